"""Leaky integrate-and-fire dynamics and spike encoding of real inputs.

Membrane update per step::

    U_t = I_t + beta * U_{t-1} - S_{t-1} * threshold
    S_t = 1 if U_t >= threshold else 0

The reset term is not scaled by ``beta`` and potentials are never clamped.
Backward through the threshold uses the triangle surrogate
``max(0, 1 - |U - threshold| / width) / width``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, DimensionError, DomainError
from .tensor import Tensor, _record, add, as_tensor


@dataclass(frozen=True)
class LifParams:
    threshold: float = 1.0
    beta: float = 0.9
    surrogate_width: float = 1.0

    def __post_init__(self):
        if not self.threshold > 0:
            raise ConfigError(f"LIF threshold must be > 0, got {self.threshold}")
        if not 0 < self.beta <= 1:
            raise ConfigError(f"LIF decay must lie in (0, 1], got {self.beta}")
        if not self.surrogate_width > 0:
            raise ConfigError(f"surrogate width must be > 0, got {self.surrogate_width}")


@dataclass
class LifState:
    u: np.ndarray
    s_prev: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "LifState":
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


class BinarityMonitor:
    """Counts spike outputs that are not exactly 0.0 or 1.0."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self.checks = 0
        self.violations = 0
        self.last_violation: str | None = None

    def record(self, where: str, arr: np.ndarray) -> None:
        self.checks += 1
        if not np.all((arr == 0) | (arr == 1)):
            self.violations += 1
            self.last_violation = where


BINARITY = BinarityMonitor()


def surrogate_grad(u, params: LifParams) -> np.ndarray:
    u = np.asarray(u)
    f = u.dtype.type if u.dtype.kind == "f" else np.float64
    return kernels._lifscan_py.surrogate(u, f(params.threshold), f(params.surrogate_width))


def lif_step(current, state: LifState, params: LifParams) -> tuple[Tensor, LifState]:
    """Advance one time step; no gradient is recorded."""
    i_t = current.data if isinstance(current, Tensor) else np.asarray(current, dtype=np.float32)
    if i_t.shape != state.u.shape:
        raise DimensionError(f"lif_step: input shape {i_t.shape} != state shape {state.u.shape}")
    f = i_t.dtype.type
    u = i_t + f(params.beta) * state.u - state.s_prev * f(params.threshold)
    s = (u >= f(params.threshold)).astype(i_t.dtype)
    BINARITY.record("lif_step", s)
    return Tensor._wrap(s, False, None), LifState(u, s)


def lif_scan(current: Tensor, params: LifParams, *, relaxed: bool = False,
             where: str = "lif", trace: dict | None = None) -> Tensor:
    """Run LIF neurons over the leading time axis of ``current`` from zero state.

    With ``relaxed`` the hard threshold is replaced by the integral of the
    surrogate, which makes the forward pass differentiable; used only for
    gradient checking.
    """
    current = as_tensor(current)
    if current.ndim < 1 or current.shape[0] < 1:
        raise ContractError("lif_scan: input needs a leading time axis")
    shape = current.shape
    flat = np.ascontiguousarray(current.data.reshape(shape[0], -1))
    u, s = kernels.kernel.lif_forward(flat, params.beta, params.threshold,
                                      params.surrogate_width, relaxed)
    if not relaxed:
        BINARITY.record(where, s)
    if trace is not None:
        trace["u"] = u.reshape(shape)
        trace["s"] = s.reshape(shape)
    beta, thr, width = params.beta, params.threshold, params.surrogate_width

    def backward(g):
        g = np.ascontiguousarray(g.reshape(shape[0], -1))
        return (kernels.kernel.lif_backward(g, u, beta, thr, width).reshape(shape),)

    return _record("lif", s.reshape(shape), (current,), backward)


def encode_constant(x, time_steps: int, params: LifParams = LifParams(), *,
                    where: str = "encode") -> Tensor:
    """Spike train from a constant input current (unit weight) held for ``time_steps``."""
    if time_steps <= 0:
        raise ContractError(f"encode_constant: time_steps must be positive, got {time_steps}")
    x = as_tensor(x)
    zeros = np.zeros((time_steps,) + x.shape, dtype=x.dtype)
    return lif_scan(add(Tensor._wrap(zeros, False, None), x), params, where=where)


def _resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (h, w):
        return img.astype(np.float64)

    def coords(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = coords(h, in_h)
    x0, x1, wx = coords(w, in_w)
    src = img.astype(np.float64)
    top = src[y0][:, x0] + wx[None, :, None] * (src[y0][:, x1] - src[y0][:, x0])
    bot = src[y1][:, x0] + wx[None, :, None] * (src[y1][:, x1] - src[y1][:, x0])
    return top + wy[:, None, None] * (bot - top)


def normalize_image(img, mean, std, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an [H, W, C] 0..255 image, then ``(v/255 - mean) / std``."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise DimensionError(f"normalize_image: expected [H, W, C], got shape {img.shape}")
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    std = np.asarray(std, dtype=np.float64).reshape(-1)
    if np.any(std <= 0):
        raise DomainError("normalize_image: std components must be > 0")
    if mean.size not in (1, img.shape[2]) or std.size not in (1, img.shape[2]):
        raise DimensionError("normalize_image: mean/std length must match channel count")
    resized = _resize_bilinear(img, *target)
    return ((resized / 255.0 - mean) / std).astype(np.float32)
