from fractions import Fraction

import numpy as np
import pytest

from pharos.attack import (AttackConfig, as_fraction, attack_hag, attack_targeted, loss_and_grad, loss_pga,
                           loss_pga_dagger, loss_weighted, mask_vector, pgd_attack, pgd_attack_batch, pgd_step,
                           random_start, read_pha, weight_vector, write_pha)
from pharos.errors import ConfigError, DimensionError, FormatError
from pharos.hashcore import CodeTable, HashCode, negate
from pharos.model import encode, forward, init_net, input_gradient

T = -0.8


def toy_net(seed=0, d=10, k=6):
    rng = np.random.default_rng(seed)
    return init_net(d, k, (8,), seed, shift=rng.random(d) * 0.2 + 0.4, scale=1 + rng.random(d))


def test_budget_parsing_is_exact():
    assert as_fraction("8/255") == Fraction(8, 255)
    assert as_fraction("0.25") == Fraction(1, 4)
    assert as_fraction(0.1) == Fraction(1, 10)
    with pytest.raises(ConfigError):
        as_fraction("eight")
    cfg = AttackConfig()
    assert cfg.epsilon == Fraction(8, 255) and cfg.eta == Fraction(1, 255)
    assert cfg.steps == 100 and cfg.margin == -0.8 and cfg.method == "pga"
    assert cfg.to_dict()["epsilon"] == "8/255"
    assert AttackConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("kw", [dict(eta="1/10", epsilon="1/20"), dict(steps=-1), dict(margin=0.0),
                                dict(margin=-1.0), dict(method="fgsm"), dict(eta=0)])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        AttackConfig(**kw)


def test_weights_and_mask_hand_values():
    u = np.array([0.5, -0.9, -0.8])
    assert np.allclose(weight_vector(u, T), [2.1, -0.64, -0.64])
    m, pi = mask_vector(u, T)
    assert m.tolist() == [1.0, 0.0, 0.0] and pi == 1


def test_losses_hand_values():
    h = np.array([0.5, -0.9])
    b = np.array([1.0, 1.0])
    assert loss_pga(h, b, T) == pytest.approx(-1.05)
    assert loss_weighted(h, b, T) == pytest.approx(-(2.1 * 0.5 + 0.64 * 0.9) / 2)
    assert loss_pga_dagger(h, b) == pytest.approx(0.2)
    assert loss_pga(np.array([-0.9, -0.95]), b, T) == 0.0
    with pytest.raises(DimensionError):
        loss_pga_dagger(h, np.ones(3))


def test_batched_losses_match_scalar_versions():
    rng = np.random.default_rng(0)
    h = rng.uniform(-1, 1, (20, 8))
    b = rng.choice([-1.0, 1.0], (20, 8))
    for kind, fn in (("pga", lambda a, c: loss_pga(a, c, T)), ("weighted", lambda a, c: loss_weighted(a, c, T)),
                     ("dagger", loss_pga_dagger)):
        vals, _ = loss_and_grad(kind, h, b, T)
        assert np.allclose(vals, [fn(h[i], b[i]) for i in range(20)])
    with pytest.raises(ConfigError):
        loss_and_grad("hinge", h, b, T)


def test_output_gradients_of_frozen_surrogate():
    rng = np.random.default_rng(1)
    h = rng.uniform(-1, 1, (1, 9))
    b = rng.choice([-1.0, 1.0], (1, 9))
    u = b * h
    frozen = (weight_vector(u, T), mask_vector(u, T)[0])
    for kind in ("dagger", "weighted", "pga"):
        _, g = loss_and_grad(kind, h, b, T, frozen)
        num = np.zeros_like(h)
        for j in range(9):
            e = np.zeros_like(h)
            e[0, j] = 1e-6
            num[0, j] = (loss_and_grad(kind, h + e, b, T, frozen)[0][0]
                         - loss_and_grad(kind, h - e, b, T, frozen)[0][0]) / 2e-6
        assert np.allclose(g, num, atol=1e-9)


def test_masked_bits_have_zero_gradient():
    h = np.array([[0.5, -0.95, 0.2, 0.9]])
    b = np.array([[1.0, 1.0, -1.0, -1.0]])      # u = [0.5, -0.95, -0.2, -0.9]
    _, g = loss_and_grad("pga", h, b, T)
    assert g[0, 1] == 0.0 and g[0, 3] == 0.0
    assert g[0, 0] != 0.0 and g[0, 2] != 0.0


def test_pgd_step_rule():
    x = np.array([0.5, 0.5, 0.99, 0.01, 0.5])
    cur = np.array([0.52, 0.5, 0.99, 0.01, 0.48])
    g = np.array([1.0, 0.0, 1.0, -1.0, -3.0])
    out = pgd_step(cur, x, g, 0.03, 0.02)
    assert np.allclose(out, [0.53, 0.5, 1.0, 0.0, 0.47])


def test_random_start_is_per_sample():
    x = np.full((3, 5), 0.5)
    a = random_start(x, 0.1, 7, [10, 11, 12])
    b = random_start(x[1:2], 0.1, 7, [11])
    assert np.array_equal(a[1], b[0])
    assert np.abs(a - x).max() <= 0.1
    assert not np.array_equal(a[0], a[1])


@pytest.mark.parametrize("method", ["pga", "pga-dagger", "pga-weighted", "hag", "anchor-targeted"])
def test_constraints_hold_for_every_method(method):
    net = toy_net()
    rng = np.random.default_rng(2)
    x = rng.random((25, 10)).astype(np.float32).astype(np.float64)
    x[0] = 0.0
    x[1] = 1.0
    target = rng.choice([-1, 1], (25, 6))
    cfg = AttackConfig(steps=20, method=method)
    out = pgd_attack_batch(net, x, target, cfg)
    eps = float(cfg.epsilon)
    assert np.abs(out.x_adv - x).max() <= eps + 1e-9
    assert out.x_adv.min() >= 0.0 and out.x_adv.max() <= 1.0
    assert np.array_equal(out.x_adv, out.x_adv.astype(np.float32))
    assert np.allclose(out.linf, np.abs(out.x_adv - x).max(axis=1))
    assert out.losses.shape == (25, 21)
    assert out.codes == encode(net, out.x_adv)


def test_attack_moves_code_away_from_target():
    net = toy_net(3)
    rng = np.random.default_rng(4)
    x = rng.random((30, 10))
    own = encode(net, x)
    cfg = AttackConfig(epsilon="64/255", eta="4/255", steps=40, method="pga-dagger")
    out = pgd_attack_batch(net, x, own, cfg)
    assert out.losses[:, -1].mean() > out.losses[:, 0].mean()
    assert np.mean(own.distances(out.codes).diagonal()) > 0


def test_zero_steps_is_random_start_only():
    net = toy_net()
    x = np.random.default_rng(0).random((4, 10))
    cfg = AttackConfig(steps=0, seed=5)
    out = pgd_attack_batch(net, x, np.ones((4, 6)), cfg)
    assert np.allclose(out.x_adv, random_start(x, float(cfg.epsilon), 5, range(4)), atol=1e-7)


def test_single_sample_wrappers_agree_with_batch():
    net = toy_net()
    x = np.random.default_rng(6).random((3, 10))
    cfg = AttackConfig(steps=5)
    target = HashCode.from_signs([1, -1, 1, -1, 1, -1])
    batch = pgd_attack_batch(net, x, np.tile(target.signs(), (3, 1)), cfg)
    one = pgd_attack(net, x[2], target, cfg, sample_id=2)
    assert np.array_equal(one.x_adv, batch.x_adv[2])
    hag = attack_hag(net, x[0], cfg)
    ref = pgd_attack(net, x[0], encode(net, x[:1])[0], cfg)
    assert np.array_equal(hag.x_adv, ref.x_adv)
    tgt = attack_targeted(net, x[0], target, cfg)
    assert np.array_equal(tgt.x_adv, pgd_attack(net, x[0], negate(target), cfg).x_adv)
    with pytest.raises(DimensionError):
        pgd_attack(net, x[0], HashCode.from_signs([1, 1]), cfg)


def test_ascent_direction_uses_input_gradient():
    net = toy_net(8)
    x = np.random.default_rng(8).random((1, 10)) * 0.5 + 0.25
    b = np.ones((1, 6))
    cfg = AttackConfig(epsilon="10/255", eta="1/255", steps=1, method="pga-dagger")
    out = pgd_attack_batch(net, x, b, cfg)
    start = random_start(x, float(cfg.epsilon), 0, [0])
    _, g_h = loss_and_grad("dagger", forward(net, start), b, T)
    want = pgd_step(start, x, input_gradient(net, start, g_h), float(cfg.epsilon), float(cfg.eta))
    assert np.allclose(out.x_adv, want, atol=1e-7)


def test_pha_roundtrip(tmp_path):
    net = toy_net()
    x = np.random.default_rng(1).random((4, 10))
    cfg = AttackConfig(steps=2)
    out = pgd_attack_batch(net, x, np.ones((4, 6)), cfg)
    p = tmp_path / "a.pha"
    write_pha(p, out, cfg, {"model": "m.phm"})
    header, xa, codes = read_pha(p)
    assert header["epsilon"] == "8/255" and header["model"] == "m.phm"
    assert np.array_equal(xa, out.x_adv) and codes == out.codes
    raw = p.read_bytes()
    p.write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        read_pha(p)
    p.write_bytes(b"PHA0" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_pha(p)
