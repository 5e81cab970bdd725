"""Dense linear-algebra kernel.

Kronecker products, the block rearrangement operator and its inverse, a
deterministic SVD, singular value soft-thresholding, norms and a fixed-point
discrete Lyapunov solver.

Index conventions
-----------------
A ``pq x pq`` matrix ``M`` is viewed as a ``p x p`` grid of ``q x q`` blocks
``M(i, j) = M[i*q:(i+1)*q, j*q:(j+1)*q]`` (0-based here, 1-based in the
literature). ``vec`` is column stacking throughout. The rearrangement places
``vec(M(i, j))`` in the row of ``R(M)`` whose index is the column-stacked
position of ``(i, j)`` in the ``p x p`` block grid, i.e. row ``i + j*p``.
With this ordering ``R(A kron B) = vec(A) vec(B)^T`` for arbitrary ``A, B``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

__all__ = [
    "DimensionOverflowError",
    "SvdConvergenceError",
    "LyapunovError",
    "SvdResult",
    "MatrixNorms",
    "KRON_MAX_ENTRIES",
    "as_matrix",
    "vec",
    "unvec",
    "kron",
    "permute_R",
    "depermute_R_inv",
    "svd",
    "soft_threshold_svd",
    "matrix_norms",
    "trace",
    "symmetrize",
    "pseudo_inverse",
    "solve_discrete_lyapunov",
]

# 2**27 doubles is 1 GiB.
KRON_MAX_ENTRIES = 2**27


class DimensionOverflowError(ValueError):
    """Requested matrix would exceed the configured size cap."""


class SvdConvergenceError(np.linalg.LinAlgError):
    """The SVD backend failed to converge."""


class LyapunovError(ValueError):
    """Discrete Lyapunov iteration rejected or failed to converge."""


def as_matrix(M: ArrayLike, name: str = "matrix") -> NDArray[np.float64]:
    """Coerce to a finite, 2-D float64 array (no copy when already one)."""
    A = np.asarray(M, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got ndim={A.ndim}")
    if A.shape[0] == 0 or A.shape[1] == 0:
        raise ValueError(f"{name} must have positive dimensions, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return A


def _require_square(A: NDArray[np.float64], name: str) -> None:
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")


def vec(M: ArrayLike) -> NDArray[np.float64]:
    """Column-stacking vectorization."""
    return np.asarray(M, dtype=np.float64).ravel(order="F")


def unvec(x: ArrayLike, rows: int, cols: int | None = None) -> NDArray[np.float64]:
    """Inverse of :func:`vec`."""
    cols = rows if cols is None else cols
    return np.asarray(x, dtype=np.float64).reshape((rows, cols), order="F")


def kron(A: ArrayLike, B: ArrayLike, *, max_entries: int = KRON_MAX_ENTRIES) -> NDArray[np.float64]:
    """Kronecker product ``A kron B``; block ``(i, j)`` is ``A[i, j] * B``."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    rows = A.shape[0] * B.shape[0]
    cols = A.shape[1] * B.shape[1]
    if rows * cols > max_entries:
        raise DimensionOverflowError(
            f"kron result {rows}x{cols} exceeds the cap of {max_entries} entries"
        )
    return np.kron(A, B)


def permute_R(M: ArrayLike, p: int, q: int) -> NDArray[np.float64]:
    """Rearrange a ``pq x pq`` matrix into the ``p^2 x q^2`` matrix ``R(M)``.

    Row ``i + j*p`` of the result is ``vec(M(i, j))``. Pure index relocation.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape != (p * q, p * q):
        raise ValueError(f"expected a {p * q}x{p * q} matrix for p={p}, q={q}, got {M.shape}")
    # M[i*q + k, j*q + l] -> R[j*p + i, l*q + k]
    return M.reshape(p, q, p, q).transpose(2, 0, 3, 1).reshape(p * p, q * q)


def depermute_R_inv(R: ArrayLike, p: int, q: int) -> NDArray[np.float64]:
    """Exact inverse of :func:`permute_R`."""
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape != (p * p, q * q):
        raise ValueError(f"expected a {p * p}x{q * q} matrix for p={p}, q={q}, got {R.shape}")
    return R.reshape(p, p, q, q).transpose(1, 3, 0, 2).reshape(p * q, p * q)


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``M = U diag(s) V^T`` with non-increasing ``s``."""

    U: NDArray[np.float64]
    s: NDArray[np.float64]
    V: NDArray[np.float64]

    def reconstruct(self) -> NDArray[np.float64]:
        return (self.U * self.s) @ self.V.T


def svd(M: ArrayLike) -> SvdResult:
    """Thin SVD with a fixed sign convention.

    Each left singular vector is flipped (jointly with its right partner) so
    that its first entry of non-negligible magnitude is non-negative.
    """
    M = as_matrix(M)
    try:
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        try:
            import scipy.linalg

            U, s, Vt = scipy.linalg.svd(M, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc2:
            raise SvdConvergenceError(
                f"SVD did not converge for a {M.shape[0]}x{M.shape[1]} matrix "
                f"(gesdd: {exc}; gesvd: {exc2})"
            ) from exc2
    V = Vt.T.copy()
    if U.size:
        mag = np.abs(U)
        cutoff = 1e-12 * mag.max(axis=0, keepdims=True)
        first = np.argmax(mag > cutoff, axis=0)
        signs = np.sign(U[first, np.arange(U.shape[1])])
        signs[signs == 0] = 1.0
        U = U * signs
        V = V * signs
    return SvdResult(U=U, s=s, V=V)


def soft_threshold_svd(M: ArrayLike, lam: float) -> NDArray[np.float64]:
    """Minimizer of ``||M - X||_F^2 + lam * ||X||_*``.

    Shrinks every singular value by ``lam / 2`` and clips at zero.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    res = svd(M)
    shrunk = np.maximum(res.s - lam / 2.0, 0.0)
    keep = shrunk > 0
    return (res.U[:, keep] * shrunk[keep]) @ res.V[:, keep].T


@dataclass(frozen=True)
class MatrixNorms:
    frobenius: float
    spectral: float
    nuclear: float
    trace: float | None  # None for non-square input


def trace(M: ArrayLike) -> float:
    A = as_matrix(M)
    _require_square(A, "trace argument")
    return float(np.trace(A))


def matrix_norms(M: ArrayLike) -> MatrixNorms:
    A = as_matrix(M)
    s = np.linalg.svd(A, compute_uv=False)
    return MatrixNorms(
        frobenius=float(np.linalg.norm(A, "fro")),
        spectral=float(s[0]),
        nuclear=float(s.sum()),
        trace=float(np.trace(A)) if A.shape[0] == A.shape[1] else None,
    )


def symmetrize(M: ArrayLike) -> NDArray[np.float64]:
    """Return ``(M + M^T) / 2``; the result is exactly symmetric."""
    A = as_matrix(M)
    _require_square(A, "symmetrize argument")
    return 0.5 * (A + A.T)


def pseudo_inverse(M: ArrayLike, tol: float = 1e-10) -> NDArray[np.float64]:
    """Moore-Penrose pseudo-inverse with relative cutoff ``tol * sigma_1``."""
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    res = svd(M)
    if res.s.size == 0 or res.s[0] == 0.0:
        return np.zeros((res.V.shape[0], res.U.shape[0]))
    keep = res.s > tol * res.s[0]
    return (res.V[:, keep] / res.s[keep]) @ res.U[:, keep].T


def solve_discrete_lyapunov(
    Phi: ArrayLike,
    Q: ArrayLike,
    *,
    rtol: float = 1e-12,
    max_iter: int = 1_000_000,
) -> NDArray[np.float64]:
    """Solve ``X = Phi X Phi^T + Q`` by fixed-point iteration.

    Requires ``||Phi||_2 < 1``, which makes the map a contraction in the
    Frobenius norm. Iterates from ``X_0 = Q`` until
    ``||X_{k+1} - X_k||_F <= rtol * ||X_k||_F``.
    """
    Phi = as_matrix(Phi, "Phi")
    Q = as_matrix(Q, "Q")
    _require_square(Phi, "Phi")
    if Q.shape != Phi.shape:
        raise ValueError(f"Q shape {Q.shape} does not match Phi shape {Phi.shape}")
    norm = float(np.linalg.norm(Phi, 2))
    if norm >= 1.0:
        raise LyapunovError(f"||Phi||_2 = {norm:.6g} >= 1; the iteration does not contract")

    X = Q.copy()
    for it in range(1, max_iter + 1):
        X_next = Phi @ X @ Phi.T + Q
        step = np.linalg.norm(X_next - X, "fro")
        if step <= rtol * np.linalg.norm(X, "fro"):
            return 0.5 * (X_next + X_next.T)
        X = X_next
    raise LyapunovError(
        f"no convergence after {max_iter} iterations (last step {step:.3e}, ||Phi||_2={norm:.6g})"
    )
