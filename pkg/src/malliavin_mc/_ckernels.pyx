# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``.

Signatures and semantics match the numpy fallback exactly; loops over the
path axis run without the GIL.
"""
import numpy as np

from libc.math cimport log, sqrt, cos, sin
from libc.stdint cimport uint64_t
from libc.stdlib cimport malloc, free

NAME = "cython"

cdef extern from *:
    """
    static inline void mc_mulhilo64(uint64_t a, uint64_t b, uint64_t *hi, uint64_t *lo) {
        __uint128_t p = (__uint128_t)a * (__uint128_t)b;
        *hi = (uint64_t)(p >> 64);
        *lo = (uint64_t)p;
    }
    """
    void mc_mulhilo64(uint64_t a, uint64_t b, uint64_t *hi, uint64_t *lo) nogil

cdef uint64_t M0 = 0xD2E7470EE14C6C93ULL
cdef uint64_t M1 = 0xCA5A826395121157ULL
cdef uint64_t W0 = 0x9E3779B97F4A7C15ULL
cdef uint64_t W1 = 0xBB67AE8584CAA73BULL
cdef double TWO_PI = 6.283185307179586
cdef double INV_2_53 = 1.1102230246251565e-16


cdef inline void _philox(uint64_t *c, uint64_t k0, uint64_t k1) noexcept nogil:
    cdef uint64_t hi0, lo0, hi1, lo1, x0, x1, x2, x3
    cdef int r
    for r in range(10):
        if r:
            k0 += W0
            k1 += W1
        mc_mulhilo64(M0, c[0], &hi0, &lo0)
        mc_mulhilo64(M1, c[2], &hi1, &lo1)
        x0 = hi1 ^ c[1] ^ k0
        x1 = lo1
        x2 = hi0 ^ c[3] ^ k1
        x3 = lo0
        c[0] = x0
        c[1] = x1
        c[2] = x2
        c[3] = x3


def philox4x64(c0, c1, c2, c3, k0, k1):
    b = np.broadcast_arrays(*(np.asarray(c, dtype=np.uint64) for c in (c0, c1, c2, c3)))
    shape = b[0].shape
    cdef uint64_t[::1] a0 = np.ascontiguousarray(b[0]).ravel()
    cdef uint64_t[::1] a1 = np.ascontiguousarray(b[1]).ravel()
    cdef uint64_t[::1] a2 = np.ascontiguousarray(b[2]).ravel()
    cdef uint64_t[::1] a3 = np.ascontiguousarray(b[3]).ravel()
    n = a0.shape[0]
    out = np.empty((4, n), dtype=np.uint64)
    cdef uint64_t[:, ::1] o = out
    cdef uint64_t kk0 = <uint64_t>(int(k0) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t kk1 = <uint64_t>(int(k1) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t c[4]
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            c[0] = a0[i]
            c[1] = a1[i]
            c[2] = a2[i]
            c[3] = a3[i]
            _philox(c, kk0, kk1)
            o[0, i] = c[0]
            o[1, i] = c[1]
            o[2, i] = c[2]
            o[3, i] = c[3]
    return tuple(out[j].reshape(shape) for j in range(4))


cdef inline double _unif(uint64_t o) noexcept nogil:
    return (<double>(o >> 11) + 0.5) * INV_2_53


def standard_normals(key0, key1, stream, path_start, n_paths, n_draws):
    cdef Py_ssize_t np_ = n_paths
    cdef Py_ssize_t nd = n_draws
    cdef Py_ssize_t n_blocks = (nd + 3) // 4
    out = np.empty((np_, 4 * n_blocks))
    cdef double[:, ::1] z = out
    cdef uint64_t kk0 = <uint64_t>(int(key0) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t kk1 = <uint64_t>(int(key1) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t st = <uint64_t>int(stream)
    cdef uint64_t p0 = <uint64_t>int(path_start)
    cdef uint64_t c[4]
    cdef Py_ssize_t p, b
    cdef double r, th
    with nogil:
        for p in range(np_):
            for b in range(n_blocks):
                c[0] = <uint64_t>b
                c[1] = p0 + <uint64_t>p
                c[2] = st
                c[3] = 0
                _philox(c, kk0, kk1)
                r = sqrt(-2.0 * log(_unif(c[0])))
                th = TWO_PI * _unif(c[1])
                z[p, 4 * b] = r * cos(th)
                z[p, 4 * b + 1] = r * sin(th)
                r = sqrt(-2.0 * log(_unif(c[2])))
                th = TWO_PI * _unif(c[3])
                z[p, 4 * b + 2] = r * cos(th)
                z[p, 4 * b + 3] = r * sin(th)
    return out[:, :nd].copy()


cdef inline void _noise(const double[:, :, :, ::1] S, const double[:, ::1] dW,
                        Py_ssize_t n, Py_ssize_t d, Py_ssize_t m, double *out) noexcept nogil:
    cdef Py_ssize_t a, b, k
    for a in range(d):
        for b in range(d):
            out[a * d + b] = S[n, 0, a, b] * dW[n, 0]
    for k in range(1, m):
        for a in range(d):
            for b in range(d):
                out[a * d + b] += S[n, k, a, b] * dW[n, k]


cdef inline void _corr(const double[:, :, :, ::1] S, double *noise, Py_ssize_t n,
                       Py_ssize_t d, Py_ssize_t m, double dt, bint realized,
                       double *out) noexcept nogil:
    cdef Py_ssize_t a, b, c, k
    cdef double s
    if realized:
        for a in range(d):
            for b in range(d):
                s = 0.0
                for c in range(d):
                    s += noise[a * d + c] * noise[c * d + b]
                out[a * d + b] = s
    else:
        for a in range(d):
            for b in range(d):
                out[a * d + b] = 0.0
        for k in range(m):
            for a in range(d):
                for b in range(d):
                    s = 0.0
                    for c in range(d):
                        s += S[n, k, a, c] * S[n, k, c, b]
                    out[a * d + b] += s
        for a in range(d * d):
            out[a] *= dt


cdef inline void _left_update(const double[:, :, ::1] Y, double *M, Py_ssize_t n,
                              Py_ssize_t d, double[:, :, ::1] out) noexcept nogil:
    # out = Y + M Y
    cdef Py_ssize_t a, b, c
    cdef double s
    for a in range(d):
        for b in range(d):
            s = 0.0
            for c in range(d):
                s += M[a * d + c] * Y[n, c, b]
            out[n, a, b] = Y[n, a, b] + s


cdef inline void _right_update(const double[:, :, ::1] Y, double *R, Py_ssize_t n,
                               Py_ssize_t d, double[:, :, ::1] out) noexcept nogil:
    # out = Y - Y R
    cdef Py_ssize_t a, b, c
    cdef double s
    for a in range(d):
        for b in range(d):
            s = 0.0
            for c in range(d):
                s += Y[n, a, c] * R[c * d + b]
            out[n, a, b] = Y[n, a, b] - s


def _c3(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def noise_matrix(S, dW):
    cdef const double[:, :, :, ::1] s = _c3(S)
    cdef const double[:, ::1] w = _c3(dW)
    cdef Py_ssize_t N = s.shape[0], m = s.shape[1], d = s.shape[2]
    out = np.empty((N, d, d))
    cdef double[:, :, ::1] o = out
    cdef double *buf = <double *>malloc(d * d * sizeof(double))
    cdef Py_ssize_t n, a, b
    try:
        with nogil:
            for n in range(N):
                _noise(s, w, n, d, m, buf)
                for a in range(d):
                    for b in range(d):
                        o[n, a, b] = buf[a * d + b]
    finally:
        free(buf)
    return out


def flow_step(J, Jinv, B, S, dW, double dt, bint realized):
    cdef const double[:, :, ::1] j = _c3(J)
    cdef const double[:, :, ::1] ji = _c3(Jinv)
    cdef const double[:, :, ::1] bb = _c3(np.broadcast_to(B, np.shape(J)))
    cdef const double[:, :, :, ::1] s = _c3(S)
    cdef const double[:, ::1] w = _c3(dW)
    cdef Py_ssize_t N = j.shape[0], d = j.shape[1], m = s.shape[1]
    J_new = np.empty((N, d, d))
    Jinv_new = np.empty((N, d, d))
    cdef double[:, :, ::1] jo = J_new
    cdef double[:, :, ::1] jio = Jinv_new
    cdef double *buf = <double *>malloc(3 * d * d * sizeof(double))
    cdef double *noise = buf
    cdef double *M = buf + d * d
    cdef double *corr = buf + 2 * d * d
    cdef Py_ssize_t n, a, b
    try:
        with nogil:
            for n in range(N):
                _noise(s, w, n, d, m, noise)
                for a in range(d):
                    for b in range(d):
                        M[a * d + b] = bb[n, a, b] * dt + noise[a * d + b]
                _left_update(j, M, n, d, jo)
                _corr(s, noise, n, d, m, dt, realized, corr)
                for a in range(d * d):
                    corr[a] = M[a] - corr[a]
                _right_update(ji, corr, n, d, jio)
    finally:
        free(buf)
    return J_new, Jinv_new


def forward_step(G, b, c, dW, double dt):
    cdef const double[:, :, ::1] g = _c3(G)
    cdef const double[:, :, ::1] bb = _c3(np.broadcast_to(b, np.shape(G)))
    cdef const double[:, :, :, ::1] s = _c3(c)
    cdef const double[:, ::1] w = _c3(dW)
    cdef Py_ssize_t N = g.shape[0], d = g.shape[1], m = s.shape[1]
    out = np.empty((N, d, d))
    cdef double[:, :, ::1] o = out
    cdef double *buf = <double *>malloc(2 * d * d * sizeof(double))
    cdef double *noise = buf
    cdef double *M = buf + d * d
    cdef Py_ssize_t n, a, e
    try:
        with nogil:
            for n in range(N):
                _noise(s, w, n, d, m, noise)
                for a in range(d):
                    for e in range(d):
                        M[a * d + e] = bb[n, a, e] * dt + noise[a * d + e]
                _left_update(g, M, n, d, o)
    finally:
        free(buf)
    return out


def inverse_step(Ginv, b, c, dW, double dt, bint realized):
    cdef const double[:, :, ::1] g = _c3(Ginv)
    cdef const double[:, :, ::1] bb = _c3(np.broadcast_to(b, np.shape(Ginv)))
    cdef const double[:, :, :, ::1] s = _c3(c)
    cdef const double[:, ::1] w = _c3(dW)
    cdef Py_ssize_t N = g.shape[0], d = g.shape[1], m = s.shape[1]
    out = np.empty((N, d, d))
    cdef double[:, :, ::1] o = out
    cdef double *buf = <double *>malloc(2 * d * d * sizeof(double))
    cdef double *noise = buf
    cdef double *corr = buf + d * d
    cdef Py_ssize_t n, a, e
    try:
        with nogil:
            for n in range(N):
                _noise(s, w, n, d, m, noise)
                _corr(s, noise, n, d, m, dt, realized, corr)
                for a in range(d):
                    for e in range(d):
                        corr[a * d + e] = (bb[n, a, e] * dt + noise[a * d + e]) - corr[a * d + e]
                _right_update(g, corr, n, d, o)
    finally:
        free(buf)
    return out


def affine_step(Y, b, c, a, f, dW, double dt):
    cdef const double[:, :, ::1] y = _c3(Y)
    cdef const double[:, :, ::1] bb = _c3(np.broadcast_to(b, np.shape(Y)))
    cdef const double[:, :, ::1] aa = _c3(np.broadcast_to(a, np.shape(Y)))
    cdef const double[:, :, :, ::1] s = _c3(c)
    cdef const double[:, :, :, ::1] ff = _c3(f)
    cdef const double[:, ::1] w = _c3(dW)
    cdef Py_ssize_t N = y.shape[0], d = y.shape[1], m = s.shape[1]
    out = np.empty((N, d, d))
    cdef double[:, :, ::1] o = out
    cdef double *buf = <double *>malloc(3 * d * d * sizeof(double))
    cdef double *noise = buf
    cdef double *M = buf + d * d
    cdef double *fn = buf + 2 * d * d
    cdef Py_ssize_t n, i, e
    try:
        with nogil:
            for n in range(N):
                _noise(s, w, n, d, m, noise)
                for i in range(d):
                    for e in range(d):
                        M[i * d + e] = bb[n, i, e] * dt + noise[i * d + e]
                _left_update(y, M, n, d, o)
                _noise(ff, w, n, d, m, fn)
                for i in range(d):
                    for e in range(d):
                        o[n, i, e] = o[n, i, e] + (aa[n, i, e] * dt + fn[i * d + e])
    finally:
        free(buf)
    return out


def weight_step(acc, g1, P, Jinv, Sc, H2, H, u, w, dW, double t, double dt):
    cdef double[:, ::1] A = acc
    cdef double[:, ::1] G = g1
    cdef const double[:, :, ::1] p = _c3(P)
    cdef const double[:, :, ::1] ji = _c3(Jinv)
    cdef const double[:, :, :, ::1] sc = _c3(Sc)
    cdef const double[:, :, ::1] h2 = _c3(H2)
    cdef const double[:, :, :, ::1] h = _c3(H)
    cdef const double[:, ::1] uu = _c3(u)
    cdef const double[:, ::1] ww = _c3(w)
    cdef const double[:, ::1] dw = _c3(dW)
    cdef Py_ssize_t N = ji.shape[0], d = ji.shape[1], m = sc.shape[1]
    cdef double *JS = <double *>malloc(d * d * sizeof(double))
    cdef Py_ssize_t n, i, j, k, r, c
    cdef double inc, s, s1, q
    try:
        with nogil:
            for n in range(N):
                s1 = 0.0
                for i in range(d):
                    inc = 0.0
                    for j in range(m):
                        inc += p[n, j, i] * dw[n, j]
                    G[n, i] += inc
                    s1 += inc * ww[n, i]
                A[n, 0] += s1
                s = 0.0
                for r in range(d):
                    for c in range(d):
                        s += ji[n, r, c] * h2[n, r, c]
                A[n, 1] += (t * dt) * s
                for j in range(m):
                    s = 0.0
                    for k in range(d):
                        for c in range(d):
                            s += ji[n, k, c] * h[n, j, k, c]
                    A[n, 2] += (t * dw[n, j]) * s
                    for r in range(d):
                        for c in range(d):
                            q = 0.0
                            for k in range(d):
                                q += ji[n, r, k] * sc[n, j, k, c]
                            JS[r * d + c] = q
                    s = 0.0
                    for k in range(d):
                        q = 0.0
                        for c in range(d):
                            q += JS[k * d + c] * uu[n, c]
                        s += p[n, j, k] * q
                    A[n, 3] += dt * s
                    s = 0.0
                    for r in range(d):
                        for c in range(d):
                            s += JS[r * d + c] * h[n, j, r, c]
                    A[n, 4] -= (t * dt) * s
    finally:
        free(JS)
