"""Pure-numpy LIF time scan; reference backend for the compiled kernel.

Both backends evaluate every expression in the same order and precision so
their outputs are bit-equal.
"""
import numpy as np


def _relaxed_step(x, alpha):
    # antiderivative of the triangle surrogate, centred on the threshold
    two_a2 = 2 * alpha * alpha
    lo = (x + alpha) * (x + alpha) / two_a2
    hi = 1 - (alpha - x) * (alpha - x) / two_a2
    out = np.where(x < 0, lo, hi)
    out = np.where(x <= -alpha, 0, out)
    return np.where(x >= alpha, 1, out).astype(x.dtype)


def surrogate(u, thr, alpha):
    x = 1 - np.abs(u - thr) / alpha
    return np.maximum(x, 0) / alpha


def lif_forward(current, beta, thr, alpha, relaxed=False):
    t_steps, n = current.shape
    f = current.dtype.type
    b, th, al = f(beta), f(thr), f(alpha)
    u_out = np.empty_like(current)
    s_out = np.empty_like(current)
    u = np.zeros(n, dtype=current.dtype)
    s = np.zeros(n, dtype=current.dtype)
    for t in range(t_steps):
        u = current[t] + b * u - s * th
        if relaxed:
            s = _relaxed_step(u - th, al)
        else:
            s = (u >= th).astype(current.dtype)
        u_out[t] = u
        s_out[t] = s
    return u_out, s_out


def lif_backward(grad_s, u, beta, thr, alpha):
    t_steps, n = grad_s.shape
    f = grad_s.dtype.type
    b, th, al = f(beta), f(thr), f(alpha)
    grad_i = np.empty_like(grad_s)
    a_next = np.zeros(n, dtype=grad_s.dtype)
    for t in range(t_steps - 1, -1, -1):
        gs = grad_s[t] - th * a_next
        a = gs * surrogate(u[t], th, al) + b * a_next
        grad_i[t] = a
        a_next = a
    return grad_i
