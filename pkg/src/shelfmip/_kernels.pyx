# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: polynomial row evaluation, augmented Lagrangian, SAT."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


cdef class PolyRows:
    cdef public Py_ssize_t n, m
    cdef public object indptr, idx, val, bil_row, bil_i, bil_j, bil_val, rhs
    cdef const long long[::1] _indptr
    cdef const long long[::1] _idx
    cdef const double[::1] _val
    cdef const long long[::1] _brow
    cdef const long long[::1] _bi
    cdef const long long[::1] _bj
    cdef const double[::1] _bval
    cdef const double[::1] _rhs

    def __init__(self, indptr, idx, val, bil_row, bil_i, bil_j, bil_val, rhs, n):
        self.n = n
        self.m = len(rhs)
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.idx = np.ascontiguousarray(idx, dtype=np.int64)
        self.val = np.ascontiguousarray(val, dtype=np.float64)
        self.bil_row = np.ascontiguousarray(bil_row, dtype=np.int64)
        self.bil_i = np.ascontiguousarray(bil_i, dtype=np.int64)
        self.bil_j = np.ascontiguousarray(bil_j, dtype=np.int64)
        self.bil_val = np.ascontiguousarray(bil_val, dtype=np.float64)
        self.rhs = np.ascontiguousarray(rhs, dtype=np.float64)
        self._indptr = self.indptr
        self._idx = self.idx
        self._val = self.val
        self._brow = self.bil_row
        self._bi = self.bil_i
        self._bj = self.bil_j
        self._bval = self.bil_val
        self._rhs = self.rhs

    cdef void _values(self, const double[::1] x, double[::1] r) noexcept nogil:
        cdef Py_ssize_t row, k
        cdef double acc
        for row in range(self.m):
            acc = -self._rhs[row]
            for k in range(self._indptr[row], self._indptr[row + 1]):
                acc += self._val[k] * x[self._idx[k]]
            r[row] = acc
        for k in range(self._brow.shape[0]):
            r[self._brow[k]] += self._bval[k] * x[self._bi[k]] * x[self._bj[k]]

    cdef void _jac_t(self, const double[::1] x, const double[::1] w, double[::1] g) noexcept nogil:
        cdef Py_ssize_t row, k
        cdef double wr
        for k in range(self.n):
            g[k] = 0.0
        for row in range(self.m):
            wr = w[row]
            if wr == 0.0:
                continue
            for k in range(self._indptr[row], self._indptr[row + 1]):
                g[self._idx[k]] += self._val[k] * wr
        for k in range(self._brow.shape[0]):
            wr = w[self._brow[k]] * self._bval[k]
            g[self._bi[k]] += wr * x[self._bj[k]]
            g[self._bj[k]] += wr * x[self._bi[k]]

    def values(self, x):
        cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
        out = np.empty(self.m, dtype=np.float64)
        cdef double[::1] r = out
        self._values(xv, r)
        return out

    def jac_t(self, x, w):
        cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
        cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
        out = np.empty(self.n, dtype=np.float64)
        cdef double[::1] g = out
        self._jac_t(xv, wv, g)
        return out

    def al_value_grad(self, x, lam, rho, is_eq, p_indptr, p_idx, p_val, q, double const):
        cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
        cdef const double[::1] lv = np.ascontiguousarray(lam, dtype=np.float64)
        cdef const cnp.uint8_t[::1] eq = np.ascontiguousarray(is_eq, dtype=np.uint8)
        cdef const long long[::1] pip = np.ascontiguousarray(p_indptr, dtype=np.int64)
        cdef const long long[::1] pid = np.ascontiguousarray(p_idx, dtype=np.int64)
        cdef const double[::1] pv = np.ascontiguousarray(p_val, dtype=np.float64)
        cdef const double[::1] qv = np.ascontiguousarray(q, dtype=np.float64)
        cdef double rh = rho
        res = np.empty(self.m, dtype=np.float64)
        mult = np.empty(self.m, dtype=np.float64)
        grad = np.empty(self.n, dtype=np.float64)
        cdef double[::1] r = res
        cdef double[::1] mu = mult
        cdef double[::1] g = grad
        cdef double value = const
        cdef double t, ri, li, px
        cdef Py_ssize_t i, k
        with nogil:
            self._values(xv, r)
            for i in range(self.m):
                ri = r[i]
                li = lv[i]
                t = li + rh * ri
                if eq[i]:
                    mu[i] = t
                    value += li * ri + 0.5 * rh * ri * ri
                else:
                    if t < 0.0:
                        t = 0.0
                    mu[i] = t
                    value += (t * t - li * li) / (2.0 * rh)
            self._jac_t(xv, mu, g)
            for i in range(self.n):
                px = 0.0
                for k in range(pip[i], pip[i + 1]):
                    px += pv[k] * xv[pid[k]]
                value += 0.5 * xv[i] * px + qv[i] * xv[i]
                g[i] += px + qv[i]
        return value, grad, res


def rect_penetration(a, b):
    cdef const double[:, :, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, :, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t p, s, k, v
    cdef double ex, ey, nx, ny, nn, best, lo_a, hi_a, lo_b, hi_b, d, ov
    cdef const double[:, :, ::1] poly
    with nogil:
        for p in range(n):
            best = INFINITY
            for s in range(2):
                poly = av if s == 0 else bv
                for k in range(4):
                    ex = poly[p, (k + 1) % 4, 0] - poly[p, k, 0]
                    ey = poly[p, (k + 1) % 4, 1] - poly[p, k, 1]
                    nn = sqrt(ex * ex + ey * ey)
                    if nn < 1e-300:
                        nn = 1e-300
                    nx = -ey / nn
                    ny = ex / nn
                    lo_a = INFINITY
                    hi_a = -INFINITY
                    lo_b = INFINITY
                    hi_b = -INFINITY
                    for v in range(4):
                        d = av[p, v, 0] * nx + av[p, v, 1] * ny
                        if d < lo_a:
                            lo_a = d
                        if d > hi_a:
                            hi_a = d
                        d = bv[p, v, 0] * nx + bv[p, v, 1] * ny
                        if d < lo_b:
                            lo_b = d
                        if d > hi_b:
                            hi_b = d
                    ov = (hi_a if hi_a < hi_b else hi_b) - (lo_a if lo_a > lo_b else lo_b)
                    if ov < best:
                        best = ov
            o[p] = best
    return out
