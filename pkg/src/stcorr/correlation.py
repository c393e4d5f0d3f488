"""Global and local correlation maps, correlation down-sampling, entropy masks.

Feature maps are ``(B, h, w, d)`` tensors with unit-norm channels (an
unbatched ``(h, w, d)`` map is accepted and treated as B = 1). A local window
of odd size ``r`` is centred on the co-located reference pixel; window cells
are flattened row-major, so cell ``k`` has offset ``(k // r - R, k % r - R)``
with ``R = (r - 1) // 2``. Cells falling outside the reference frame are
masked out of the softmax and come out as exact zeros.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_TAU = 0.07
ENTROPY_FLOOR = 1e-12


class CorrelationError(ValueError):
    pass


@dataclass
class GlobalCorrelationMap:
    values: Tensor          # (B, h*w, h*w), rows sum to 1
    tau: float


@dataclass
class LocalCorrelationMap:
    values: Tensor          # (B, h, w, r*r)
    r: int
    valid: np.ndarray       # (h, w, r*r) bool
    level: int | None = None

    @property
    def hw(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def rows(self) -> np.ndarray:
        """Values as ``(B, h*w, r*r)`` numpy rows."""
        B, h, w, n = self.values.shape
        return self.values.data.reshape(B, h * w, n)


@dataclass
class EntropyMap:
    H: np.ndarray           # (B, h, w)
    convention: str


def _batched(x: Tensor) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise CorrelationError(f"feature map must be (h, w, d) or (B, h, w, d), got {x.shape}")
    return x


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise CorrelationError(f"temperature must be positive, got {tau}")


def window_offsets(r: int) -> np.ndarray:
    """(r*r, 2) integer (dy, dx) offsets in cell order."""
    if r < 1 or r % 2 == 0:
        raise CorrelationError(f"window size must be a positive odd number, got {r}")
    R = (r - 1) // 2
    dy, dx = np.meshgrid(np.arange(-R, R + 1), np.arange(-R, R + 1), indexing="ij")
    return np.stack([dy.ravel(), dx.ravel()], axis=1)


def window_validity(h: int, w: int, r: int) -> np.ndarray:
    """(h, w, r*r) mask of window cells that land inside an h x w frame."""
    off = window_offsets(r)
    yy, xx = np.mgrid[0:h, 0:w]
    ty = yy[..., None] + off[:, 0]
    tx = xx[..., None] + off[:, 1]
    return (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)


def _pad(x: np.ndarray, R: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (R, R), (R, R), (0, 0)))


def local_dot(Ft, Fr, r: int) -> Tensor:
    """Dot products of each query with its r x r reference window: (B, h, w, r*r).

    Out-of-frame cells read zero-padded features (value 0).
    """
    Ft, Fr = _batched(Ft), _batched(Fr)
    if Ft.shape != Fr.shape:
        raise CorrelationError(f"local correlation: shapes differ {Ft.shape} vs {Fr.shape}")
    off = window_offsets(r)
    R = (r - 1) // 2
    B, h, w, d = Ft.shape
    frp = _pad(Fr.data, R)
    out = np.empty((B, h, w, len(off)), dtype=Ft.data.dtype)
    for k, (dy, dx) in enumerate(off):
        out[..., k] = (Ft.data * frp[:, R + dy:R + dy + h, R + dx:R + dx + w]).sum(axis=-1)

    def backward(g):
        gt = np.zeros_like(Ft.data) if Ft.requires_grad else None
        grp = np.zeros_like(frp) if Fr.requires_grad else None
        for k, (dy, dx) in enumerate(off):
            gk = g[..., k:k + 1]
            if gt is not None:
                gt += gk * frp[:, R + dy:R + dy + h, R + dx:R + dx + w]
            if grp is not None:
                grp[:, R + dy:R + dy + h, R + dx:R + dx + w] += gk * Ft.data
        gr = grp[:, R:R + h, R:R + w] if grp is not None else None
        return gt, gr

    return T.custom_op("local_dot", out, (Ft, Fr), backward)


def local_correlation(Ft, Fr, r: int, tau: float = DEFAULT_TAU, level: int | None = None) -> LocalCorrelationMap:
    """Softmax of F_t(i) . F_r(j) / tau over the in-frame cells of i's r x r window."""
    _check_tau(tau)
    logits = local_dot(Ft, Fr, r)
    _, h, w, _ = logits.shape
    valid = window_validity(h, w, r)
    c = T.masked_softmax(T.mul(logits, 1.0 / tau), valid)
    return LocalCorrelationMap(c, r, valid, level)


def global_correlation(Ft, Fr, tau: float = DEFAULT_TAU) -> GlobalCorrelationMap:
    """Softmax of F_t(i) . F_r(j) / tau over every reference position j."""
    _check_tau(tau)
    Ft, Fr = _batched(Ft), _batched(Fr)
    if Ft.shape != Fr.shape:
        raise CorrelationError(f"global correlation: shapes differ {Ft.shape} vs {Fr.shape}")
    B, h, w, d = Ft.shape
    qt = T.reshape(Ft, (B, h * w, d))
    kr = T.transpose(T.reshape(Fr, (B, h * w, d)), (0, 2, 1))
    a = T.softmax(T.mul(T.matmul(qt, kr), 1.0 / tau))
    return GlobalCorrelationMap(a, tau)


def window_weighted_sum(c, I, r: int) -> Tensor:
    """out(i) = sum_j c[i, j] * I(i + offset_j), accumulated in cell order.

    ``c`` is ``(B, h, w, r*r)``, ``I`` is ``(B, h, w, C)``; out-of-frame cells
    read zeros. Accumulation runs cell by cell from 0.0 so the result is
    bit-identical to a per-pixel loop over the window in the same order.
    """
    c, I = T.as_tensor(c), _batched(I)
    if c.ndim == 3:
        c = T.reshape(c, (1,) + c.shape)
    B, h, w, n = c.shape
    if I.shape[:3] != (B, h, w):
        raise CorrelationError(f"reconstruction: correlation {c.shape} and frame {I.shape} "
                               "are at different levels")
    if n != r * r:
        raise CorrelationError(f"correlation has {n} cells, window {r}x{r} needs {r * r}")
    off = window_offsets(r)
    R = (r - 1) // 2
    ip = _pad(I.data, R)
    out = np.zeros((B, h, w, I.shape[3]), dtype=np.result_type(c.data, I.data))
    for k, (dy, dx) in enumerate(off):
        out = out + c.data[..., k:k + 1] * ip[:, R + dy:R + dy + h, R + dx:R + dx + w]

    def backward(g):
        gc = np.empty_like(c.data) if c.requires_grad else None
        gip = np.zeros_like(ip) if I.requires_grad else None
        for k, (dy, dx) in enumerate(off):
            if gc is not None:
                gc[..., k] = (g * ip[:, R + dy:R + dy + h, R + dx:R + dx + w]).sum(axis=-1)
            if gip is not None:
                gip[:, R + dy:R + dy + h, R + dx:R + dx + w] += c.data[..., k:k + 1] * g
        gi = gip[:, R:R + h, R:R + w] if gip is not None else None
        return gc, gi

    return T.custom_op("window_weighted_sum", out, (c, I), backward)


def required_fine_window(r_coarse: int, s: int) -> int:
    return s * (r_coarse - 1) + 1


def correlation_downsample(c: LocalCorrelationMap, s: int = 2, r_out: int | None = None) -> LocalCorrelationMap:
    """Pool a level-l local map into a pseudo label at level l+1 (stride ratio ``s``).

    Queries are taken on the coarse-aligned grid (every s-th row/column). The
    fine window cell at offset o contributes to coarse cell floor(o / s), i.e.
    each coarse cell collects the s x s block of fine reference pixels it
    covers. Rows are renormalized; the result carries no gradient.
    """
    r_in = c.r
    if (r_in - 1) % s:
        raise CorrelationError(f"window {r_in} cannot be pooled by stride ratio {s}")
    r_c = (r_in - 1) // s + 1
    if r_out is not None and r_out != r_c:
        raise CorrelationError(
            f"coarse window {r_out} needs a fine window of {required_fine_window(r_out, s)}, got {r_in}")
    if r_c % 2 == 0:
        raise CorrelationError(f"pooled window {r_c} is even; choose r_l = s*(r_(l+1)-1)+1 with odd r_(l+1)")
    B, h, w, n = c.values.shape
    if h % s or w % s:
        raise CorrelationError(f"level extent {h}x{w} not divisible by stride ratio {s}")
    vals = c.values.data[:, ::s, ::s]                       # (B, h', w', r_in*r_in)
    off_in = window_offsets(r_in)
    Rc = (r_c - 1) // 2
    dst = (off_in[:, 0] // s + Rc) * r_c + (off_in[:, 1] // s + Rc)
    pooled = np.zeros(vals.shape[:3] + (r_c * r_c,), dtype=vals.dtype)
    for k in range(r_c * r_c):
        pooled[..., k] = vals[..., dst == k].sum(axis=-1)
    hc, wc = h // s, w // s
    valid = window_validity(hc, wc, r_c)
    pooled = np.where(valid, pooled, 0.0)
    tot = pooled.sum(axis=-1, keepdims=True)
    if np.any(tot <= 0):
        raise CorrelationError("pooled row has no mass on valid cells")
    pooled = pooled / tot
    level = None if c.level is None else c.level + 1
    return LocalCorrelationMap(Tensor(pooled), r_c, valid, level)


# -------------------------------------------------------------------- entropy
CONVENTIONS = ("as-written", "shannon")


def entropy_map(c: LocalCorrelationMap, convention: str = "as-written") -> EntropyMap:
    """Per-query entropy over valid cells.

    ``as-written``: sum_j -log c_ij. ``shannon``: sum_j -c_ij log c_ij.
    Values are clamped at 1e-12 before the log.
    """
    if convention not in CONVENTIONS:
        raise CorrelationError(f"unknown entropy convention {convention!r}; use one of {CONVENTIONS}")
    vals = c.values.data
    logc = np.log(np.maximum(vals, ENTROPY_FLOOR))
    valid = np.broadcast_to(c.valid, vals.shape)
    if convention == "as-written":
        terms = -logc
    else:
        terms = -vals * logc
    H = np.where(valid, terms, 0.0).sum(axis=-1)
    return EntropyMap(H, convention)


@dataclass(frozen=True)
class Threshold:
    """Either an absolute entropy value or a per-frame quantile in (0, 1)."""
    value: float
    kind: str = "quantile"

    def __post_init__(self):
        if self.kind not in ("quantile", "absolute"):
            raise CorrelationError(f"threshold kind must be 'quantile' or 'absolute', got {self.kind!r}")
        if self.kind == "quantile" and not 0.0 < self.value < 1.0:
            raise CorrelationError(f"quantile must lie in (0, 1), got {self.value}")

    @classmethod
    def parse(cls, spec: str | float) -> "Threshold":
        """'q0.5' -> quantile 0.5, 'abs2.5' -> absolute 2.5, bare float -> quantile."""
        if isinstance(spec, Threshold):
            return spec
        if isinstance(spec, (int, float)):
            return cls(float(spec), "quantile")
        s = spec.strip()
        if s.startswith("abs"):
            return cls(float(s[3:].lstrip(":=")), "absolute")
        if s.startswith("q"):
            return cls(float(s[1:].lstrip(":=")), "quantile")
        return cls(float(s), "quantile")


def entropy_mask(H: EntropyMap | np.ndarray, threshold: Threshold | float | str = 0.5) -> np.ndarray:
    """m_i = 1 iff H(i) exceeds the threshold (absolute, or this frame's quantile)."""
    thr = Threshold.parse(threshold)
    vals = H.H if isinstance(H, EntropyMap) else np.asarray(H, dtype=np.float64)
    if thr.kind == "absolute":
        return (vals > thr.value).astype(np.float64)
    if vals.ndim <= 1:
        return (vals > np.quantile(vals, thr.value)).astype(np.float64)
    flat = vals.reshape(vals.shape[0], -1)
    q = np.quantile(flat, thr.value, axis=1)
    return (flat > q[:, None]).reshape(vals.shape).astype(np.float64)
