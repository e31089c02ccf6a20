# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``; same signatures."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, fmod, fabs, INFINITY, M_PI

cnp.import_array()

cdef double TWO_PI = 2.0 * M_PI
cdef double EPS64 = np.finfo(np.float64).eps


cdef inline double _wrap(double x) nogil:
    cdef double r = fmod(x + M_PI, TWO_PI)
    if r != 0.0 and r < 0.0:
        r += TWO_PI
    if r >= TWO_PI:
        r -= TWO_PI
    return r - M_PI


def wrap_angle(x):
    cdef const double[::1] a = np.ascontiguousarray(np.ravel(x), dtype=np.float64)
    out_arr = np.empty(a.shape[0])
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        out[i] = _wrap(a[i])
    return out_arr.reshape(np.shape(x))


def unicycle_advance(px, py, heading, speed, turn_rate, speed_delta,
                     double dt, double v_min, double v_max):
    shape = np.broadcast(px, py, heading, speed, turn_rate, speed_delta).shape
    cdef const double[::1] x = np.ascontiguousarray(np.broadcast_to(px, shape), dtype=np.float64).ravel()
    cdef const double[::1] y = np.ascontiguousarray(np.broadcast_to(py, shape), dtype=np.float64).ravel()
    cdef const double[::1] h = np.ascontiguousarray(np.broadcast_to(heading, shape), dtype=np.float64).ravel()
    cdef const double[::1] v = np.ascontiguousarray(np.broadcast_to(speed, shape), dtype=np.float64).ravel()
    cdef const double[::1] w = np.ascontiguousarray(np.broadcast_to(turn_rate, shape), dtype=np.float64).ravel()
    cdef const double[::1] dv = np.ascontiguousarray(np.broadcast_to(speed_delta, shape), dtype=np.float64).ravel()
    cdef Py_ssize_t n = x.shape[0], i
    ox = np.empty(n)
    oy = np.empty(n)
    oh = np.empty(n)
    ov = np.empty(n)
    cdef double[::1] rx = ox, ry = oy, rh = oh, rv = ov
    cdef double hh, vv
    with nogil:
        for i in range(n):
            hh = _wrap(h[i] + w[i] * dt)
            vv = v[i] + dv[i] * dt
            if vv < v_min:
                vv = v_min
            elif vv > v_max:
                vv = v_max
            rh[i] = hh
            rv[i] = vv
            rx[i] = x[i] + vv * cos(hh) * dt
            ry[i] = y[i] + vv * sin(hh) * dt
    return ox.reshape(shape), oy.reshape(shape), oh.reshape(shape), ov.reshape(shape)


def gae(rewards, values, dones, double gamma, double lam):
    r2 = np.ascontiguousarray(rewards, dtype=np.float64)
    shape = r2.shape
    cdef Py_ssize_t T = shape[0]
    cdef const double[:, ::1] r = r2.reshape(T, -1)
    cdef const double[:, ::1] v = np.ascontiguousarray(values, dtype=np.float64).reshape(T + 1, -1)
    cdef const double[:, ::1] d = np.ascontiguousarray(dones, dtype=np.float64).reshape(T, -1)
    cdef Py_ssize_t N = r.shape[1], t, j
    out = np.zeros((T, N))
    cdef double[:, ::1] adv = out
    cdef double last, nonterminal, delta
    with nogil:
        for j in range(N):
            last = 0.0
            for t in range(T - 1, -1, -1):
                nonterminal = 1.0 - d[t, j]
                delta = r[t, j] + gamma * v[t + 1, j] * nonterminal - v[t, j]
                last = delta + gamma * lam * nonterminal * last
                adv[t, j] = last
    return out.reshape(shape)


def value_iteration(P, R, terminal, double gamma, double tol, long max_iter):
    cdef const double[:, :, ::1] p = np.ascontiguousarray(P, dtype=np.float64)
    cdef const double[:, ::1] rw = np.ascontiguousarray(R, dtype=np.float64)
    cdef const double[::1] live = 1.0 - np.ascontiguousarray(terminal, dtype=np.float64)
    cdef Py_ssize_t S = rw.shape[0], A = rw.shape[1], s, a, s2
    q_arr = np.zeros((S, A))
    qn_arr = np.zeros((S, A))
    cdef double[:, ::1] Q = q_arr
    cdef double[:, ::1] Qn = qn_arr
    cdef double[::1] V = np.zeros(S)
    cdef double residual = INFINITY, scale, acc, m, diff, thresh
    cdef long it = 0
    cdef bint converged = False
    with nogil:
        for it in range(1, max_iter + 1):
            for s in range(S):
                m = Q[s, 0]
                for a in range(1, A):
                    if Q[s, a] > m:
                        m = Q[s, a]
                V[s] = m * live[s]
            residual = 0.0
            scale = 0.0
            for s in range(S):
                for a in range(A):
                    acc = 0.0
                    for s2 in range(S):
                        acc = acc + p[s, a, s2] * V[s2]
                    acc = rw[s, a] + gamma * acc
                    diff = fabs(acc - Q[s, a])
                    if diff > residual:
                        residual = diff
                    if fabs(acc) > scale:
                        scale = fabs(acc)
                    Qn[s, a] = acc
            for s in range(S):
                for a in range(A):
                    Q[s, a] = Qn[s, a]
            thresh = 8.0 * EPS64 * scale
            if thresh < tol:
                thresh = tol
            if residual <= thresh:
                converged = True
                break
    return q_arr, it, residual, bool(converged)
