"""A small tanh hashing network with hand-written reverse mode.

Architecture is ``D -> hidden... -> K`` with tanh after every layer, so the
outputs lie in (-1, 1)^K and ``sign`` of them is the hash code. Inputs first
pass a fixed (untrained) standardization ``(x - shift) * scale``. Trainable
parameters are float64 and stored as ``[W0, b0, W1, b1, ...]`` with ``W`` of
shape ``(fan_in, fan_out)``.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, InvalidInputError, NumericalError
from .hashcore import CodeTable
from .semantics import as_labels

log = logging.getLogger(__name__)

PHM_MAGIC = b"PHM1"
_LEN = struct.Struct("<I")


@dataclass(frozen=True, eq=False)
class HashNet:
    in_dim: int
    hidden: tuple
    k: int
    params: tuple
    seed: int = 0
    alpha: float = 0.1
    meta: dict = field(default_factory=dict)
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        dims = self.dims
        for name, default in (("shift", 0.0), ("scale", 1.0)):
            v = getattr(self, name)
            v = np.full(int(self.in_dim), default) if v is None else np.array(v, dtype=np.float64).reshape(-1)
            if v.shape != (int(self.in_dim),):
                raise DimensionError(f"{name} must have {self.in_dim} entries, got {v.shape[0]}")
            v.flags.writeable = False
            object.__setattr__(self, name, v)
        if len(self.params) != 2 * (len(dims) - 1):
            raise DimensionError(f"expected {2 * (len(dims) - 1)} parameter arrays, got {len(self.params)}")
        frozen = []
        for i, p in enumerate(self.params):
            p = np.array(p, dtype=np.float64)
            layer = i // 2
            want = (dims[layer], dims[layer + 1]) if i % 2 == 0 else (dims[layer + 1],)
            if p.shape != want:
                raise DimensionError(f"parameter {i} has shape {p.shape}, expected {want}")
            p.flags.writeable = False
            frozen.append(p)
        object.__setattr__(self, "params", tuple(frozen))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def dims(self) -> tuple:
        return (int(self.in_dim), *[int(h) for h in self.hidden], int(self.k))

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def __call__(self, x):
        return forward(self, x)


def init_net(in_dim: int, k: int, hidden=(256,), seed: int = 0, alpha: float = 0.1, shift=None,
             scale=None) -> HashNet:
    """Glorot-uniform weights and zero biases drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    dims = (in_dim, *hidden, k)
    params = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        params += [rng.uniform(-lim, lim, size=(fan_in, fan_out)), np.zeros(fan_out)]
    return HashNet(in_dim, tuple(hidden), k, tuple(params), seed, alpha, shift=shift, scale=scale)


def standardizer(features) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature ``(mean, 1/std)`` of a training set; constant features get scale 1."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    sd = x.std(axis=0)
    return x.mean(axis=0), np.where(sd > 0, 1.0 / np.where(sd > 0, sd, 1.0), 1.0)


def zero_net(in_dim: int, k: int, hidden=(256,)) -> HashNet:
    dims = (in_dim, *hidden, k)
    params = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        params += [np.zeros((fan_in, fan_out)), np.zeros(fan_out)]
    return HashNet(in_dim, tuple(hidden), k, tuple(params))


def _as_input(net: HashNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise DimensionError(f"input has {x.shape[-1]} features, network expects {net.in_dim}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("input contains non-finite values")
    return x, single


def _forward_cache(params, x: np.ndarray, net: HashNet) -> list[np.ndarray]:
    acts = [(x - net.shift) * net.scale]
    for i in range(0, len(params), 2):
        acts.append(np.tanh(acts[-1] @ params[i] + params[i + 1]))
    return acts


def _backward(params, acts, g_out: np.ndarray, want_params: bool = True):
    """Backpropagate ``g_out`` (gradient w.r.t. the final tanh output).

    Returns ``(param_grads or None, grad w.r.t. the standardized input)``.
    """
    grads = [None] * len(params) if want_params else None
    g = g_out
    for layer in range(len(params) // 2 - 1, -1, -1):
        g = g * (1.0 - acts[layer + 1] ** 2)
        if want_params:
            grads[2 * layer] = acts[layer].T @ g
            grads[2 * layer + 1] = g.sum(axis=0)
        g = g @ params[2 * layer].T
    return grads, g


def forward(net: HashNet, x) -> np.ndarray:
    """Real-valued outputs in (-1, 1)^K for one input or a batch of rows."""
    x, single = _as_input(net, x)
    h = _forward_cache(net.params, x, net)[-1]
    return h[0] if single else h


def input_gradient(net: HashNet, x, upstream) -> np.ndarray:
    """Gradient of ``upstream . forward(net, x)`` with respect to ``x``."""
    x, single = _as_input(net, x)
    up = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if up.shape != (x.shape[0], net.k):
        raise DimensionError(f"upstream shape {up.shape} does not match output shape {(x.shape[0], net.k)}")
    acts = _forward_cache(net.params, x, net)
    _, gx = _backward(net.params, acts, up, want_params=False)
    gx = gx * net.scale
    return gx[0] if single else gx


def encode(net: HashNet, features, batch: int = 4096) -> CodeTable:
    """Hash codes ``sign(forward(x))`` of every row, order preserved."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[0] == 0:
        return CodeTable(net.k, np.zeros((0, (net.k + 63) // 64), np.uint64))
    parts = [forward(net, x[lo:lo + batch]) for lo in range(0, x.shape[0], batch)]
    return CodeTable.from_real(np.vstack(parts))


encode_dataset = encode


# --- serialization ---------------------------------------------------------


def net_to_bytes(net: HashNet) -> bytes:
    header = {
        "in_dim": net.in_dim,
        "hidden": list(net.hidden),
        "k": net.k,
        "activation": "tanh",
        "input_transform": "standardize",
        "output_activation": "tanh",
        "seed": net.seed,
        "alpha": net.alpha,
        "param_shapes": [list(p.shape) for p in net.params],
        "meta": net.meta,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(p.astype("<f8").tobytes() for p in (net.shift, net.scale, *net.params))
    return PHM_MAGIC + _LEN.pack(len(hb)) + hb + blob


def net_from_bytes(buf: bytes, path=None) -> HashNet:
    if len(buf) < 8:
        raise FormatError("truncated model header", len(buf), path)
    if buf[:4] != PHM_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {PHM_MAGIC!r}", 0, path)
    (n,) = _LEN.unpack_from(buf, 4)
    if len(buf) < 8 + n:
        raise FormatError("truncated model JSON header", len(buf), path)
    try:
        header = json.loads(buf[8:8 + n].decode("utf-8"))
        dims = (header["in_dim"], *header["hidden"], header["k"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable model header: {exc}", 8, path) from None
    if header.get("activation", "tanh") != "tanh" or header.get("output_activation", "tanh") != "tanh":
        raise FormatError("only tanh networks are supported", 8, path)
    pos = 8 + n
    d = int(header["in_dim"])
    if len(buf) < pos + 16 * d:
        raise FormatError("truncated input transform", len(buf), path)
    shift = np.frombuffer(buf, dtype="<f8", count=d, offset=pos).astype(np.float64)
    scale = np.frombuffer(buf, dtype="<f8", count=d, offset=pos + 8 * d).astype(np.float64)
    pos += 16 * d
    params = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        for shape in ((fan_in, fan_out), (fan_out,)):
            count = int(np.prod(shape))
            if len(buf) < pos + 8 * count:
                raise FormatError("truncated parameter blob", len(buf), path)
            params.append(np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64))
            pos += 8 * count
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after parameters", pos, path)
    return HashNet(header["in_dim"], tuple(header["hidden"]), header["k"], tuple(params),
                   header.get("seed", 0), header.get("alpha", 0.1), header.get("meta", {}), shift, scale)


def save_net(path, net: HashNet) -> None:
    Path(path).write_bytes(net_to_bytes(net))


def load_net(path) -> HashNet:
    return net_from_bytes(Path(path).read_bytes(), path)


# --- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 50
    seed: int = 42
    alpha: float = 0.1
    hidden: tuple = (256,)
    standardize: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidInputError("learning rate and batch size must be positive, epochs non-negative")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0 or self.alpha < 0:
            raise InvalidInputError("momentum must be in [0, 1); weight decay and alpha non-negative")


def pair_similarity(labels) -> np.ndarray:
    """1 where two label rows intersect, else 0."""
    lab = np.asarray(labels, dtype=np.float64)
    return (lab @ lab.T > 0).astype(np.float64)


def _quant_sign(h):
    return np.where(h >= 0, 1.0, -1.0)


def pairwise_loss(h: np.ndarray, sim: np.ndarray, alpha: float) -> tuple[float, np.ndarray]:
    """Pairwise likelihood hashing loss on a batch and its gradient w.r.t. ``h``.

    With ``theta_ij = h_i . h_j / 2`` over the unordered pairs ``i < j``::

        L = mean_pairs [log(1 + exp(theta_ij)) - s_ij theta_ij]
            + alpha * mean_i ||h_i - sign(h_i)||^2
    """
    b = h.shape[0]
    theta = 0.5 * (h @ h.T)
    iu = np.triu_indices(b, 1)
    n_pairs = max(len(iu[0]), 1)
    th = theta[iu]
    s = sim[iu]
    pair = np.logaddexp(0.0, th) - s * th
    g_theta = np.zeros((b, b))
    g_theta[iu] = (0.5 * (1.0 + np.tanh(0.5 * th)) - s) / n_pairs  # sigmoid via tanh, overflow-free
    resid = h - _quant_sign(h)
    loss = pair.sum() / n_pairs + alpha * np.sum(resid ** 2) / b
    grad = 0.5 * (g_theta + g_theta.T) @ h + 2.0 * alpha * resid / b
    return float(loss), grad


def alignment_loss(h_adv: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """``-mean_i (1/K) b*_i . f(x'_i)`` and its gradient w.r.t. ``h_adv``."""
    b, k = h_adv.shape
    loss = -np.sum(targets * h_adv) / (k * b)
    return float(loss), -targets / (k * b)


class _SGD:
    def __init__(self, params, cfg: TrainConfig):
        self.params = [p.copy() for p in params]
        self.vel = [np.zeros_like(p) for p in params]
        self.cfg = cfg

    def step(self, grads):
        cfg = self.cfg
        for p, v, g in zip(self.params, self.vel, grads):
            g = g + cfg.weight_decay * p
            v *= cfg.momentum
            v += g
            p -= cfg.lr * v


def _check_dataset(features, labels, cfg: TrainConfig):
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[0] == 0:
        raise InvalidInputError("empty training set")
    lab = as_labels(np.atleast_2d(labels))
    if lab.shape[0] != x.shape[0]:
        raise DimensionError(f"{x.shape[0]} feature rows but {lab.shape[0]} label rows")
    if x.shape[0] < cfg.batch_size:
        raise InvalidInputError(f"training set ({x.shape[0]}) smaller than batch size ({cfg.batch_size})")
    return x, lab


def _fresh_net(x, k, cfg: TrainConfig) -> HashNet:
    shift, scale = standardizer(x) if cfg.standardize else (None, None)
    return init_net(x.shape[1], k, cfg.hidden, cfg.seed, cfg.alpha, shift, scale)


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n - batch + 1, batch):
        yield order[lo:lo + batch]


def _finite_or_raise(loss, epoch):
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite training loss at epoch {epoch}")


def train_pairwise(features, labels, k: int, cfg: TrainConfig = TrainConfig(), init: HashNet | None = None,
                   history: list | None = None) -> HashNet:
    """Train a hashing network with :func:`pairwise_loss` and momentum SGD.

    Batches are drawn from a permutation seeded by ``cfg.seed`` each epoch;
    a trailing partial batch is dropped. If ``history`` is a list, the mean
    loss of every epoch is appended to it.
    """
    x, lab = _check_dataset(features, labels, cfg)
    net = init or _fresh_net(x, k, cfg)
    if net.in_dim != x.shape[1] or net.k != k:
        raise DimensionError("initial network does not match data dimension / code length")
    sim_all = lab.astype(np.float64)
    opt = _SGD(net.params, cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _batches(len(x), cfg.batch_size, rng):
            acts = _forward_cache(opt.params, x[idx], net)
            loss, g_h = pairwise_loss(acts[-1], pair_similarity(sim_all[idx]), cfg.alpha)
            _finite_or_raise(loss, epoch)
            grads, _ = _backward(opt.params, acts, g_h)
            opt.step(grads)
            total += loss
            count += 1
        if history is not None:
            history.append(total / max(count, 1))
        log.debug("epoch %d loss %.6f", epoch, total / max(count, 1))
    meta = {"trainer": "pairwise", "epochs": cfg.epochs, "lr": cfg.lr, "batch_size": cfg.batch_size}
    return replace(net, params=tuple(opt.params), seed=net.seed, alpha=cfg.alpha, meta=meta)


def adv_train(features, labels, k: int, attack_cfg, cfg: TrainConfig = TrainConfig(), init: HashNet | None = None,
              scheme: str = "dice", history: list | None = None, probe: dict | None = None) -> HashNet:
    """Adversarial training that pulls adversarial outputs back to their pharos codes.

    Per batch, pharos codes come from the training-set codes of the current
    network (refreshed every epoch), adversarial inputs from a PgA attack with
    ``attack_cfg``, and the minimized loss is

        pairwise_loss(f(x)) - mean_i (1/K) b*_i . f(x'_i).

    When ``probe`` is a dict it receives the first batch's indices, adversarial
    inputs, pharos targets and loss, for spot checks.
    """
    from .attack import pgd_attack_batch
    from .semantics import pharos_batch

    x, lab = _check_dataset(features, labels, cfg)
    net = init or _fresh_net(x, k, cfg)
    if net.in_dim != x.shape[1] or net.k != k:
        raise DimensionError("initial network does not match data dimension / code length")
    opt = _SGD(net.params, cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    labf = lab.astype(np.float64)
    step = 0
    for epoch in range(cfg.epochs):
        current = replace(net, params=tuple(opt.params))
        pharos, _ = pharos_batch(lab, encode(current, x), lab, scheme)
        targets_all = pharos.signs().astype(np.float64)
        total, count = 0.0, 0
        for idx in _batches(len(x), cfg.batch_size, rng):
            current = replace(net, params=tuple(opt.params))
            adv = pgd_attack_batch(current, x[idx], targets_all[idx], attack_cfg,
                                   sample_ids=epoch * len(x) + idx)
            acts = _forward_cache(opt.params, x[idx], net)
            loss_o, g_h = pairwise_loss(acts[-1], pair_similarity(labf[idx]), cfg.alpha)
            acts_adv = _forward_cache(opt.params, adv.x_adv, net)
            loss_a, g_adv = alignment_loss(acts_adv[-1], targets_all[idx])
            loss = loss_o + loss_a
            _finite_or_raise(loss, epoch)
            if probe is not None and step == 0:
                probe.update(indices=idx.copy(), x_adv=adv.x_adv.copy(), targets=targets_all[idx].copy(),
                             loss=loss, params=tuple(p.copy() for p in opt.params))
            grads, _ = _backward(opt.params, acts, g_h)
            grads_adv, _ = _backward(opt.params, acts_adv, g_adv)
            opt.step([g1 + g2 for g1, g2 in zip(grads, grads_adv)])
            total += loss
            count += 1
            step += 1
        if history is not None:
            history.append(total / max(count, 1))
    meta = {"trainer": "adversarial", "epochs": cfg.epochs, "lr": cfg.lr, "batch_size": cfg.batch_size,
            "attack": attack_cfg.to_dict(), "scheme": scheme}
    return replace(net, params=tuple(opt.params), alpha=cfg.alpha, meta=meta)
