"""Pharos-guided PGD attacks and their loss family.

All attacks push the network output ``h = f(x')`` away from a target code
``b*`` under an L-infinity budget. ``u = b* * h`` is the per-bit alignment;
the attack drives it toward -1.

Loss variants (maximized):

* ``pga-dagger``: ``-(1/K) b*.h``
* ``pga-weighted``: ``-(1/K) w.u`` with ``w_k = u_k - 2t`` if ``u_k > t`` else ``-t**2``
* ``pga``: ``-(1/pi) (m*w).u`` with mask ``m_k = [u_k > t]`` and ``pi = sum(m)``;
  zero (and zero gradient) once ``pi == 0``.

The weights ``w`` and mask ``m`` are recomputed each step but held constant
when differentiating.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .hashcore import CodeTable, HashCode, negate
from .model import HashNet, _as_input, _backward, _forward_cache

METHODS = ("pga", "pga-dagger", "pga-weighted", "hag", "anchor-targeted")
_LOSS_OF = {"pga": "pga", "pga-dagger": "dagger", "pga-weighted": "weighted", "hag": "dagger",
            "anchor-targeted": "dagger"}

PHA_MAGIC = b"PHA1"
_LEN = struct.Struct("<I")


def as_fraction(value) -> Fraction:
    """Parse ``"8/255"``, ``"0.03"``, ints, floats or Fractions exactly."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    try:
        return Fraction(str(value).strip())
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"not a number or rational: {value!r}") from None


def _frac_str(f: Fraction) -> str:
    return str(f.numerator) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"


@dataclass(frozen=True)
class AttackConfig:
    epsilon: Fraction = Fraction(8, 255)
    eta: Fraction = Fraction(1, 255)
    steps: int = 100
    margin: float = -0.8
    method: str = "pga"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "epsilon", as_fraction(self.epsilon))
        object.__setattr__(self, "eta", as_fraction(self.eta))
        if not 0 < self.eta <= self.epsilon:
            raise ConfigError(f"need 0 < eta <= epsilon, got eta={self.eta}, epsilon={self.epsilon}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ConfigError(f"steps must be a non-negative integer, got {self.steps}")
        if not -1.0 < float(self.margin) < 0.0:
            raise ConfigError(f"margin t must satisfy -1 < t < 0, got {self.margin}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "margin", float(self.margin))

    @property
    def loss(self) -> str:
        return _LOSS_OF[self.method]

    def to_dict(self) -> dict:
        return {"epsilon": _frac_str(self.epsilon), "eta": _frac_str(self.eta), "steps": self.steps,
                "t": self.margin, "method": self.method, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(d.get("epsilon", Fraction(8, 255)), d.get("eta", Fraction(1, 255)), d.get("steps", 100),
                   d.get("t", d.get("margin", -0.8)), d.get("method", "pga"), d.get("seed", 0))


# --- losses ------------------------------------------------------------------


def _check_margin(t):
    if not -1.0 < t < 0.0:
        raise ConfigError(f"margin t must satisfy -1 < t < 0, got {t}")


def _target_array(b) -> np.ndarray:
    if isinstance(b, HashCode):
        return b.signs().astype(np.float64)
    if isinstance(b, CodeTable):
        return b.signs().astype(np.float64)
    return np.asarray(b, dtype=np.float64)


def _pair(h, b):
    h = np.asarray(h, dtype=np.float64)
    b = _target_array(b)
    if h.shape != b.shape:
        raise DimensionError(f"output shape {h.shape} does not match code shape {b.shape}")
    return h, b


def bit_alignment(h, b) -> np.ndarray:
    h, b = _pair(h, b)
    return b * h


def weight_vector(u, t: float) -> np.ndarray:
    _check_margin(t)
    u = np.asarray(u, dtype=np.float64)
    return np.where(u > t, u - 2.0 * t, -t * t)


def mask_vector(u, t: float) -> tuple[np.ndarray, int]:
    _check_margin(t)
    m = (np.asarray(u, dtype=np.float64) > t).astype(np.float64)
    return m, int(m.sum())


def loss_pga_dagger(h, b) -> float:
    h, b = _pair(h, b)
    return float(-(b @ h) / h.shape[-1])


def loss_weighted(h, b, t: float = -0.8) -> float:
    u = bit_alignment(h, b)
    return float(-(weight_vector(u, t) @ u) / u.shape[-1])


def loss_pga(h, b, t: float = -0.8) -> float:
    u = bit_alignment(h, b)
    w = weight_vector(u, t)
    m, pi = mask_vector(u, t)
    if pi == 0:
        return 0.0
    return float(-((m * w) @ u) / pi)


def loss_and_grad(kind: str, h: np.ndarray, b: np.ndarray, t: float,
                  frozen: tuple | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise loss values and ``dL/dh`` for a batch ``(B, K)``.

    ``frozen=(w, m)`` evaluates the loss with externally fixed weights and mask
    (the surrogate whose gradient the attack follows); by default they are
    computed from the current ``h``.
    """
    k = h.shape[1]
    if kind == "dagger":
        return -(b * h).sum(axis=1) / k, -b / k
    u = b * h
    if frozen is None:
        w = np.where(u > t, u - 2.0 * t, -t * t)
        m = (u > t).astype(np.float64)
    else:
        w, m = frozen
    if kind == "weighted":
        return -(w * u).sum(axis=1) / k, -(w * b) / k
    if kind == "pga":
        pi = m.sum(axis=1, keepdims=True)
        scale = np.divide(1.0, pi, out=np.zeros_like(pi), where=pi > 0)
        return -(m * w * u).sum(axis=1) * scale[:, 0], -(m * w * b) * scale
    raise ConfigError(f"unknown loss {kind!r}")


# --- PGD ---------------------------------------------------------------------


def pgd_step(x_cur: np.ndarray, x_orig: np.ndarray, grad: np.ndarray, eps: float, eta: float) -> np.ndarray:
    """One signed ascent step projected onto the eps-box around ``x_orig`` and onto [0, 1]."""
    x_new = x_cur + eta * np.sign(grad)
    x_new = np.clip(x_new, x_orig - eps, x_orig + eps)
    return np.clip(x_new, 0.0, 1.0)


def _snap_f32(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    # Round to float32 so files reproduce the in-memory result exactly, then
    # walk any coordinate that rounding pushed outside the ball back toward x.
    x32 = x_adv.astype(np.float32)
    lo = (x - eps).astype(np.float64)
    hi = (x + eps).astype(np.float64)
    for _ in range(4):
        over = x32.astype(np.float64) > hi
        under = x32.astype(np.float64) < lo
        if not (over.any() or under.any()):
            break
        x32 = np.where(over, np.nextafter(x32, np.float32(-np.inf)), x32)
        x32 = np.where(under, np.nextafter(x32, np.float32(np.inf)), x32)
    return np.clip(x32, 0.0, 1.0).astype(np.float64)


@dataclass(frozen=True, eq=False)
class AdvResult:
    x_adv: np.ndarray
    losses: np.ndarray
    code: HashCode
    linf: float


@dataclass(frozen=True, eq=False)
class AdvBatch:
    x_adv: np.ndarray      # (B, D)
    losses: np.ndarray     # (B, T + 1)
    codes: CodeTable
    linf: np.ndarray       # (B,)

    def __len__(self):
        return self.x_adv.shape[0]

    def __getitem__(self, i) -> AdvResult:
        return AdvResult(self.x_adv[i], self.losses[i], self.codes[i], float(self.linf[i]))


def random_start(x: np.ndarray, eps: float, seed: int, sample_ids) -> np.ndarray:
    """``clip(x + r, 0, 1)`` with ``r ~ U(-eps, eps)`` from a per-sample stream."""
    r = np.empty_like(x)
    for row, sid in enumerate(sample_ids):
        r[row] = np.random.default_rng([int(seed), int(sid)]).uniform(-eps, eps, size=x.shape[1])
    return np.clip(x + r, 0.0, 1.0)


def pgd_attack_batch(net: HashNet, x, targets, cfg: AttackConfig, sample_ids=None) -> AdvBatch:
    """Run the configured attack on every row of ``x`` against its target code.

    ``targets`` holds one code per row (CodeTable or a +/-1 array). Row ``i``
    draws its random start from the stream ``(cfg.seed, sample_ids[i])``,
    which defaults to the row index, so a row's result does not depend on
    which other rows share its batch.
    """
    x, _ = _as_input(net, x)
    b = np.atleast_2d(_target_array(targets))
    if b.shape != (x.shape[0], net.k):
        raise DimensionError(f"targets shape {b.shape} does not match {(x.shape[0], net.k)}")
    ids = np.arange(x.shape[0]) if sample_ids is None else np.asarray(sample_ids).reshape(-1)
    if ids.shape[0] != x.shape[0]:
        raise DimensionError("one sample id per input row is required")
    eps, eta, t = float(cfg.epsilon), float(cfg.eta), cfg.margin
    kind = cfg.loss
    losses = np.empty((x.shape[0], cfg.steps + 1))
    x_adv = random_start(x, eps, cfg.seed, ids)
    for s in range(cfg.steps):
        acts = _forward_cache(net.params, x_adv, net)
        losses[:, s], g_h = loss_and_grad(kind, acts[-1], b, t)
        _, g_x = _backward(net.params, acts, g_h, want_params=False)
        x_adv = pgd_step(x_adv, x, g_x * net.scale, eps, eta)
    x_adv = _snap_f32(x_adv, x, eps)
    h = _forward_cache(net.params, x_adv, net)[-1]
    losses[:, cfg.steps] = loss_and_grad(kind, h, b, t)[0]
    return AdvBatch(x_adv, losses, CodeTable.from_real(h), np.abs(x_adv - x).max(axis=1))


def pgd_attack(net: HashNet, x, target: HashCode, cfg: AttackConfig, sample_id: int = 0) -> AdvResult:
    """Attack a single input; pushes ``f(x')`` away from ``target``."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if target.k != net.k:
        raise DimensionError(f"target code length {target.k} != network code length {net.k}")
    return pgd_attack_batch(net, x, target.signs()[None, :], cfg, [sample_id])[0]


def attack_hag(net: HashNet, x, cfg: AttackConfig, sample_id: int = 0) -> AdvResult:
    """Push the output away from the input's own code."""
    from .model import encode

    return pgd_attack(net, x, encode(net, np.atleast_2d(x))[0], cfg, sample_id)


def attack_targeted(net: HashNet, x, anchor: HashCode, cfg: AttackConfig, sample_id: int = 0) -> AdvResult:
    """Pull the output toward ``anchor`` by pushing it away from ``-anchor``."""
    return pgd_attack(net, x, negate(anchor), cfg, sample_id)


# --- .pha files ----------------------------------------------------------------


def adv_to_bytes(batch: AdvBatch, cfg: AttackConfig, extra: dict | None = None) -> bytes:
    n, d = batch.x_adv.shape
    header = {"n": n, "d": d, **cfg.to_dict(), **(extra or {})}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return (PHA_MAGIC + _LEN.pack(len(hb)) + hb + batch.x_adv.astype("<f4").tobytes()
            + batch.codes.to_bytes())


def adv_from_bytes(buf: bytes, path=None) -> tuple[dict, np.ndarray, CodeTable]:
    """Parse a ``.pha`` file into (header, float64 inputs, codes)."""
    if len(buf) < 8:
        raise FormatError("truncated adversarial header", len(buf), path)
    if buf[:4] != PHA_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {PHA_MAGIC!r}", 0, path)
    (hn,) = _LEN.unpack_from(buf, 4)
    if len(buf) < 8 + hn:
        raise FormatError("truncated adversarial JSON header", len(buf), path)
    try:
        header = json.loads(buf[8:8 + hn].decode("utf-8"))
        n, d = int(header["n"]), int(header["d"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable adversarial header: {exc}", 8, path) from None
    pos = 8 + hn
    if len(buf) < pos + 4 * n * d:
        raise FormatError("truncated adversarial inputs", len(buf), path)
    x = np.frombuffer(buf, dtype="<f4", count=n * d, offset=pos).reshape(n, d).astype(np.float64)
    codes, end = CodeTable.from_bytes(buf, pos + 4 * n * d, path)
    if len(codes) != n:
        raise FormatError(f"{len(codes)} codes for {n} adversarial rows", pos + 4 * n * d, path)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes", end, path)
    return header, x, codes


def write_pha(path, batch: AdvBatch, cfg: AttackConfig, extra: dict | None = None) -> None:
    Path(path).write_bytes(adv_to_bytes(batch, cfg, extra))


def read_pha(path) -> tuple[dict, np.ndarray, CodeTable]:
    return adv_from_bytes(Path(path).read_bytes(), path)
