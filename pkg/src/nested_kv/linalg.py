"""Small dense linear algebra kernels.

Everything here works on float64 numpy arrays and is deliberately written
out by hand (no ``numpy.linalg``): the sizes are tiny (d <= 128) and the
callers care more about determinism and tight residuals than about speed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Mat = np.ndarray

MAX_SWEEPS = 100


class SingularMatrix(ValueError):
    pass


class NotSymmetric(ValueError):
    pass


class NoConvergence(RuntimeError):
    pass


def _as_square(a) -> Mat:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return a


def frobenius(a: Mat) -> float:
    return float(np.sqrt(np.sum(np.square(a))))


def mat_inverse(a) -> Mat:
    """Gauss-Jordan inversion with partial pivoting."""
    a = _as_square(a)
    n = a.shape[0]
    thresh = 1e-12 * frobenius(a)
    aug = np.concatenate([a.copy(), np.eye(n)], axis=1)
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(aug[col:, col])))
        if abs(aug[pivot, col]) <= thresh:
            raise SingularMatrix(f"pivot {aug[pivot, col]:.3e} below threshold at column {col}")
        if pivot != col:
            aug[[col, pivot]] = aug[[pivot, col]]
        aug[col] /= aug[col, col]
        factors = aug[:, col].copy()
        factors[col] = 0.0
        aug -= np.outer(factors, aug[col])
    return aug[:, n:].copy()


@dataclass(frozen=True)
class EighResult:
    eigenvalues: np.ndarray
    eigenvectors: Mat


def _off_norm(a: Mat) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def jacobi_eigh(a, tol: float = 1e-12, max_sweeps: int = MAX_SWEEPS) -> EighResult:
    """Cyclic Jacobi eigensolver for a real symmetric matrix.

    Eigenvalues come back in descending order (stable on ties) and each
    eigenvector is signed so that its largest-magnitude entry is >= 0.
    """
    a = _as_square(a)
    norm = frobenius(a)
    if frobenius(a - a.T) > 1e-9 * norm:
        raise NotSymmetric("matrix is not symmetric")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    target = tol * norm
    converged = _off_norm(a) <= target
    sweeps = 0
    while not converged:
        if sweeps >= max_sweeps:
            raise NoConvergence(f"off-diagonal norm {_off_norm(a):.3e} after {max_sweeps} sweeps")
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(apq) < 1e-150 * max(abs(diff), 1.0):
                    # rotation angle underflows; the entry is already negligible
                    a[p, q] = a[q, p] = 0.0
                    continue
                tau = diff / (2.0 * apq)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.hypot(1.0, tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # A <- J^T A J with J the (p, q) plane rotation
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        sweeps += 1
        converged = _off_norm(a) <= target

    evals = np.diag(a).copy()
    order = np.argsort(-evals, kind="stable")
    evals = evals[order]
    v = v[:, order]
    for i in range(n):
        if v[int(np.argmax(np.abs(v[:, i]))), i] < 0:
            v[:, i] = -v[:, i]
    return EighResult(evals, v)


def n_skew_params(dim: int) -> int:
    return dim * (dim - 1) // 2


@dataclass
class SkewGenerator:
    """Skew-symmetric matrix stored as its strict lower triangle."""

    dim: int
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        if self.params.size != n_skew_params(self.dim):
            raise ValueError(
                f"expected {n_skew_params(self.dim)} params for dim {self.dim}, got {self.params.size}"
            )

    @classmethod
    def zeros(cls, dim: int) -> "SkewGenerator":
        return cls(dim, np.zeros(n_skew_params(dim)))

    def matrix(self) -> Mat:
        return skew_from_params(self.params, self.dim)


def skew_from_params(params: np.ndarray, dim: int) -> Mat:
    s = np.zeros((dim, dim))
    rows, cols = np.tril_indices(dim, -1)
    s[rows, cols] = params
    s[cols, rows] = -params
    return s


def cayley(s: Mat) -> Mat:
    """(I + S)(I - S)^-1 for a skew-symmetric matrix S."""
    eye = np.eye(s.shape[0])
    return (eye + s) @ mat_inverse(eye - s)


def cayley_map(gen: SkewGenerator) -> Mat:
    return cayley(gen.matrix())


def orthogonality_defect(u) -> float:
    u = _as_square(u)
    return frobenius(u.T @ u - np.eye(u.shape[0]))
