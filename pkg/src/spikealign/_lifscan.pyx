# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LIF time scan.  Mirrors ``_lifscan_py`` expression for expression."""
import numpy as np
from cython cimport floating


cdef inline floating _relaxed(floating x, floating al) noexcept nogil:
    cdef floating two_a2 = 2 * al * al
    if x >= al:
        return 1
    if x <= -al:
        return 0
    if x < 0:
        return (x + al) * (x + al) / two_a2
    return 1 - (al - x) * (al - x) / two_a2


cdef inline floating _surrogate(floating u, floating th, floating al) noexcept nogil:
    cdef floating d = u - th
    if d < 0:
        d = -d
    cdef floating x = 1 - d / al
    if x < 0:
        x = 0
    return x / al


def _forward(floating[:, ::1] current, floating[:, ::1] u_out, floating[:, ::1] s_out,
             floating b, floating th, floating al, bint relaxed):
    # time outer, neurons inner: the inner loop is contiguous and vectorises
    cdef Py_ssize_t t, i
    cdef Py_ssize_t t_steps = current.shape[0], n = current.shape[1]
    cdef floating u, up, sp
    cdef floating zero = 0
    with nogil:
        for t in range(t_steps):
            for i in range(n):
                if t == 0:
                    up = zero
                    sp = zero
                else:
                    up = u_out[t - 1, i]
                    sp = s_out[t - 1, i]
                u = current[t, i] + b * up - sp * th
                u_out[t, i] = u
            if relaxed:
                for i in range(n):
                    s_out[t, i] = _relaxed(u_out[t, i] - th, al)
            else:
                for i in range(n):
                    s_out[t, i] = 1 if u_out[t, i] >= th else 0


def _backward(floating[:, ::1] grad_s, floating[:, ::1] u, floating[:, ::1] grad_i,
              floating b, floating th, floating al):
    cdef Py_ssize_t t, i
    cdef Py_ssize_t t_steps = grad_s.shape[0], n = grad_s.shape[1]
    cdef floating a_next, gs
    cdef floating zero = 0
    with nogil:
        for t in range(t_steps - 1, -1, -1):
            for i in range(n):
                a_next = grad_i[t + 1, i] if t + 1 < t_steps else zero
                gs = grad_s[t, i] - th * a_next
                grad_i[t, i] = gs * _surrogate(u[t, i], th, al) + b * a_next


def lif_forward(current, beta, thr, alpha, relaxed=False):
    current = np.ascontiguousarray(current)
    f = current.dtype.type
    u_out = np.empty_like(current)
    s_out = np.empty_like(current)
    _forward(current, u_out, s_out, f(beta), f(thr), f(alpha), bool(relaxed))
    return u_out, s_out


def lif_backward(grad_s, u, beta, thr, alpha):
    grad_s = np.ascontiguousarray(grad_s)
    u = np.ascontiguousarray(u, dtype=grad_s.dtype)
    f = grad_s.dtype.type
    grad_i = np.empty_like(grad_s)
    _backward(grad_s, u, grad_i, f(beta), f(thr), f(alpha))
    return grad_i
