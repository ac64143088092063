"""Dense tensors and the small linear-algebra kernel set used by LDA.

Tensors are plain ``numpy.ndarray`` objects stored in 32-bit floats; every
reduction in this module (products, factorizations, eigensolves) runs in
64-bit.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import (
    ConvergenceError,
    NotPositiveDefiniteError,
    ShapeError,
    SingularMatrixError,
)

STORAGE_DTYPE = np.float32
ACCUM_DTYPE = np.float64

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


def as_tensor(data, dtype=STORAGE_DTYPE) -> np.ndarray:
    """Return `data` as a contiguous array, checking the tensor invariants.

    Rank must be at least one and every extent positive.
    """
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim < 1:
        raise ShapeError("tensor rank must be >= 1")
    arr = np.ascontiguousarray(arr)
    if any(n < 1 for n in arr.shape):
        raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
    return arr


class SymmetricMatrix:
    """Symmetric matrix stored as its packed lower triangle (row-wise, float64).

    Entry (i, j) with i >= j lives at ``i*(i+1)//2 + j``.
    """

    __slots__ = ("order", "packed")

    def __init__(self, order: int, packed):
        if order < 1:
            raise ShapeError("symmetric matrix order must be >= 1")
        packed = np.ascontiguousarray(packed, dtype=ACCUM_DTYPE).ravel()
        if packed.size != order * (order + 1) // 2:
            raise ShapeError(
                f"packed length {packed.size} does not match order {order}"
            )
        self.order = order
        self.packed = packed

    @classmethod
    def from_dense(cls, a) -> "SymmetricMatrix":
        """Pack the lower triangle of a square matrix (the upper one is ignored)."""
        a = np.asarray(a, dtype=ACCUM_DTYPE)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"expected a square matrix, got shape {a.shape}")
        rows, cols = np.tril_indices(a.shape[0])
        return cls(a.shape[0], a[rows, cols])

    @classmethod
    def identity(cls, order: int) -> "SymmetricMatrix":
        return cls.from_dense(np.eye(order))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.order, self.order), dtype=ACCUM_DTYPE)
        rows, cols = np.tril_indices(self.order)
        out[rows, cols] = self.packed
        out[cols, rows] = self.packed
        return out

    def __getitem__(self, ij):
        i, j = ij
        if i < j:
            i, j = j, i
        return self.packed[i * (i + 1) // 2 + j]

    def __add__(self, other: "SymmetricMatrix") -> "SymmetricMatrix":
        if self.order != other.order:
            raise ShapeError("order mismatch")
        return SymmetricMatrix(self.order, self.packed + other.packed)

    def scaled(self, alpha: float) -> "SymmetricMatrix":
        return SymmetricMatrix(self.order, alpha * self.packed)

    def trace(self) -> float:
        idx = np.arange(self.order)
        return float(self.packed[idx * (idx + 1) // 2 + idx].sum())

    def frobenius(self) -> float:
        return float(np.linalg.norm(self.to_dense()))

    def __repr__(self):
        return f"SymmetricMatrix(order={self.order})"


def _dense(s) -> np.ndarray:
    if isinstance(s, SymmetricMatrix):
        return s.to_dense()
    a = np.asarray(s, dtype=ACCUM_DTYPE)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product of two rank-2 tensors, accumulated in 64-bit.

    The result keeps 64-bit precision if either operand is 64-bit, otherwise
    it is rounded back to 32-bit storage.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.astype(ACCUM_DTYPE) @ b.astype(ACCUM_DTYPE)
    if a.dtype == ACCUM_DTYPE or b.dtype == ACCUM_DTYPE:
        return out
    return out.astype(STORAGE_DTYPE)


def cholesky(s) -> np.ndarray:
    """Lower-triangular L with L @ L.T == S for symmetric positive definite S.

    Accepts a :class:`SymmetricMatrix` or a square array (only its lower
    triangle is read).
    """
    a = _dense(s)
    m = a.shape[0]
    L = np.zeros_like(a)
    for j in range(m):
        row = L[j, :j]
        pivot = a[j, j] - row @ row
        if not (pivot > 0.0) or not math.isfinite(pivot):
            raise NotPositiveDefiniteError(j, float(pivot))
        d = math.sqrt(pivot)
        L[j, j] = d
        if j + 1 < m:
            L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ row) / d
    return L


def triangular_solve(L, b, transpose: bool = False) -> np.ndarray:
    """Solve ``L x = b`` (or ``L.T x = b`` with `transpose`) for lower-triangular L."""
    L = np.asarray(L, dtype=ACCUM_DTYPE)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ShapeError(f"triangular factor must be square, got {L.shape}")
    b = np.asarray(b, dtype=ACCUM_DTYPE)
    vector = b.ndim == 1
    if vector:
        b = b[:, None]
    if b.ndim != 2 or b.shape[0] != L.shape[0]:
        raise ShapeError(f"right-hand side {b.shape} incompatible with {L.shape}")
    diag = np.diag(L)
    zero = np.flatnonzero(diag == 0.0)
    if zero.size:
        raise SingularMatrixError(f"zero diagonal entry at index {zero[0]}")
    m = L.shape[0]
    x = np.zeros_like(b)
    if not transpose:
        for i in range(m):
            x[i] = (b[i] - L[i, :i] @ x[:i]) / diag[i]
    else:
        for i in range(m - 1, -1, -1):
            x[i] = (b[i] - L[i + 1:, i] @ x[i + 1:]) / diag[i]
    return x[:, 0] if vector else x


def _canonical_signs(vecs: np.ndarray) -> np.ndarray:
    # first clearly nonzero component of each eigenvector is made positive
    for k in range(vecs.shape[1]):
        col = vecs[:, k]
        big = np.flatnonzero(np.abs(col) > 1e-8 * np.abs(col).max())
        if big.size and col[big[0]] < 0:
            vecs[:, k] = -col
    return vecs


def symmetric_eig(s, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted in
    descending order (ties keep the lower index) and eigenvectors as
    orthonormal columns.  Sweeps stop once the off-diagonal Frobenius norm
    drops below ``tol * ||S||_F``.
    """
    a = _dense(s).copy()
    a = 0.5 * (a + a.T)
    m = a.shape[0]
    v = np.eye(m)
    norm = float(np.linalg.norm(a))
    if norm == 0.0 or m == 1:
        return np.diag(a).copy(), v
    target = tol * norm

    upper = np.triu_indices(m, 1)

    def off_norm():
        return math.sqrt(2.0 * float(np.sum(a[upper] ** 2)))

    sweeps = 0
    while off_norm() >= target:
        if sweeps >= max_sweeps:
            raise ConvergenceError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")
        sweeps += 1
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app, aqq = a[p, p], a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                sn = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q]
                a[:, p] = c * col_p - sn * col_q
                a[:, q] = sn * col_p + c * col_q
                a[p, :] = a[:, p]
                a[q, :] = a[:, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                v[:, p] = c * vp - sn * v[:, q]
                v[:, q] = sn * vp + c * v[:, q]

    lam = np.diag(a).copy()
    order = np.argsort(-lam, kind="stable")
    return lam[order], _canonical_signs(v[:, order])


def generalized_eigh(a, b):
    """Solve ``A v = lambda B v`` for symmetric A and SPD B.

    Reduces to a standard problem through the Cholesky factor of B:
    ``C = L^-1 A L^-T``, then maps eigenvectors back with ``v = L^-T w``.
    The returned vectors satisfy ``V.T @ B @ V == I``.
    """
    A = _dense(a)
    L = cholesky(b)
    if A.shape != L.shape:
        raise ShapeError(f"shape mismatch: {A.shape} vs {L.shape}")
    y = triangular_solve(L, A)            # L^-1 A
    c = triangular_solve(L, y.T)          # L^-1 A L^-T  (A symmetric)
    lam, w = symmetric_eig(0.5 * (c + c.T))
    return lam, triangular_solve(L, w, transpose=True)
