"""Pure-numpy reference kernels.

Mirrors the compiled ``_kernels`` extension one to one.  Used when the
extension is not built, or when ``SHELFMIP_PURE_PYTHON=1`` is set.
"""
import numpy as np
import scipy.sparse as sp


class PolyRows:
    """Rows of degree-2 polynomials ``r(x) = A x + sum c x_i x_j - rhs``.

    The linear part is a CSR matrix; bilinear terms are flat arrays
    ``(row, i, j, coef)``.
    """

    def __init__(self, indptr, idx, val, bil_row, bil_i, bil_j, bil_val, rhs, n):
        self.n = int(n)
        self.m = len(rhs)
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.idx = np.ascontiguousarray(idx, dtype=np.int64)
        self.val = np.ascontiguousarray(val, dtype=np.float64)
        self.bil_row = np.ascontiguousarray(bil_row, dtype=np.int64)
        self.bil_i = np.ascontiguousarray(bil_i, dtype=np.int64)
        self.bil_j = np.ascontiguousarray(bil_j, dtype=np.int64)
        self.bil_val = np.ascontiguousarray(bil_val, dtype=np.float64)
        self.rhs = np.ascontiguousarray(rhs, dtype=np.float64)
        self._A = sp.csr_matrix((self.val, self.idx, self.indptr), shape=(self.m, self.n))
        self._AT = self._A.T.tocsr()

    def values(self, x):
        x = np.asarray(x, dtype=np.float64)
        r = self._A @ x - self.rhs
        if len(self.bil_row):
            r += np.bincount(self.bil_row, self.bil_val * x[self.bil_i] * x[self.bil_j],
                             minlength=self.m)
        return r

    def jac_t(self, x, w):
        """Return ``J(x)^T w``."""
        x = np.asarray(x, dtype=np.float64)
        w = np.asarray(w, dtype=np.float64)
        g = self._AT @ w
        if len(self.bil_row):
            wr = w[self.bil_row] * self.bil_val
            g += np.bincount(self.bil_i, wr * x[self.bil_j], minlength=self.n)
            g += np.bincount(self.bil_j, wr * x[self.bil_i], minlength=self.n)
        return g

    def al_value_grad(self, x, lam, rho, is_eq, p_indptr, p_idx, p_val, q, const):
        """Augmented Lagrangian value and gradient.

        Objective is ``0.5 x'Px + q'x + const``.  Equality rows use the
        classic quadratic penalty, inequality rows the Rockafellar form.
        Returns ``(value, grad, residuals)``.
        """
        x = np.asarray(x, dtype=np.float64)
        n = self.n
        P = sp.csr_matrix((p_val, p_idx, p_indptr), shape=(n, n))
        px = P @ x
        value = 0.5 * float(x @ px) + float(q @ x) + const
        r = self.values(x)
        eq = np.asarray(is_eq, dtype=bool)
        t = lam + rho * r
        mult = np.where(eq, t, np.maximum(t, 0.0))
        pen_eq = lam * r + 0.5 * rho * r * r
        pen_in = (mult * mult - lam * lam) / (2.0 * rho)
        value += float(np.sum(np.where(eq, pen_eq, pen_in)))
        grad = px + q + self.jac_t(x, mult)
        return value, grad, r


def rect_penetration(a, b):
    """Signed SAT overlap for batches of convex quadrilaterals.

    ``a`` and ``b`` have shape ``(n, 4, 2)`` with vertices in cyclic order.
    Returns the minimum projected overlap over all edge normals of both
    shapes: positive means penetration depth, zero is touching and
    negative is separated.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    best = np.full(a.shape[0], np.inf)
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=1) - poly
        normals = np.stack([-edges[..., 1], edges[..., 0]], axis=-1)
        normals /= np.maximum(np.linalg.norm(normals, axis=-1, keepdims=True), 1e-300)
        for k in range(4):
            ax = normals[:, k, :]
            pa = np.einsum("nvd,nd->nv", a, ax)
            pb = np.einsum("nvd,nd->nv", b, ax)
            ov = np.minimum(pa.max(1), pb.max(1)) - np.maximum(pa.min(1), pb.min(1))
            best = np.minimum(best, ov)
    return best
