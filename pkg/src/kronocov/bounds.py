"""Empirical checks of the estimation-error and approximation-error bounds.

Covers the operator-norm rate of the permuted SCM error, the oracle
inequality for the thresholded estimator, the Kronecker spectrum with its
variational / Gram-Schmidt / row-subtraction upper bounds for block-Toeplitz
covariances, and the minimal separation rank for a target bias.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .estimators import LD_C, LD_C1, LD_C2, SampleSet, dimension_rate, minimal_tail_parameter, scm
from .matcore import as_matrix, permute_R, vec
from .synthgen import RngSeed, Var1Spec, var1_block_toeplitz, var1_lag_covariances

__all__ = [
    "BoundParams",
    "SpectrumReport",
    "OracleCheck",
    "OpnormGrowth",
    "GsBasis",
    "permuted_error_norm",
    "thm3_rate",
    "opnorm_growth_experiment",
    "opnorm_coverage",
    "oracle_inequality_check",
    "kron_spectrum",
    "variational_bound",
    "gs_toeplitz_basis",
    "toeplitz_spectrum_bounds",
    "min_separation_rank",
    "fit_quadratic",
    "linear_fit_r2",
]

ORACLE_PENALTY = (1.0 + math.sqrt(2.0)) ** 2 / 4.0


@dataclass(frozen=True)
class BoundParams:
    """Constants of the operator-norm bound.

    ``C0`` is ``||Sigma0||_2``; ``t`` the tail parameter; ``eps_prime`` the
    sphere-net resolution. ``t`` defaults to its smallest admissible value.
    """

    C0: float
    eps_prime: float = 0.25
    t: float | None = None

    C1 = LD_C1
    C2 = LD_C2
    C = LD_C

    def __post_init__(self) -> None:
        if not self.C0 > 0:
            raise ValueError(f"C0 must be positive, got {self.C0}")
        if not 0.0 < self.eps_prime < 0.5:
            raise ValueError(f"eps_prime must lie in (0, 1/2), got {self.eps_prime}")
        if self.t is None:
            object.__setattr__(self, "t", minimal_tail_parameter(self.eps_prime))
        elif not self.t > 1.0:
            raise ValueError(f"t must exceed 1, got {self.t}")

    @property
    def t_min(self) -> float:
        return minimal_tail_parameter(self.eps_prime)

    @property
    def admissible(self) -> bool:
        return self.t >= self.t_min

    def coverage(self, p: int, q: int, n: int) -> float:
        """Nominal probability ``1 - 2 M^{-t / 4C}`` that the rate bound holds."""
        M = max(p, q, n)
        return 1.0 - 2.0 * M ** (-self.t / (4.0 * self.C))


def _check_pair(A: NDArray, B: NDArray, p: int, q: int) -> None:
    for name, X in (("S_hat", A), ("Sigma0", B)):
        if X.shape != (p * q, p * q):
            raise ValueError(f"{name} must be {p * q}x{p * q}, got {X.shape}")


def permuted_error_norm(S_hat: ArrayLike, Sigma0: ArrayLike, p: int, q: int) -> float:
    """Spectral norm of ``R(S_hat - Sigma0)``."""
    S = as_matrix(S_hat, "S_hat")
    T = as_matrix(Sigma0, "Sigma0")
    _check_pair(S, T, p, q)
    return float(np.linalg.norm(permute_R(S - T, p, q), 2))


def thm3_rate(params: BoundParams, p: int, q: int, n: int) -> float:
    """High-probability bound on ``||R(S_hat - Sigma0)||_2``.

    ``C0 t / (1 - 2 eps') * max(x, sqrt(x))`` with
    ``x = (p^2 + q^2 + log max(p, q, n)) / n``; the square-root branch is
    active whenever ``x <= 1``.
    """
    if not params.admissible:
        raise ValueError(
            f"t = {params.t:.4f} is below the admissible minimum {params.t_min:.4f}"
        )
    x = dimension_rate(p, q, n)
    return params.C0 * params.t / (1.0 - 2.0 * params.eps_prime) * max(x, math.sqrt(x))


@dataclass(frozen=True)
class OpnormGrowth:
    p_grid: NDArray[np.int64]
    means: NDArray[np.float64]
    a: float
    b: float
    r_squared: float


def fit_quadratic(x: ArrayLike, y: ArrayLike) -> tuple[float, float, float]:
    """Least-squares fit of ``y = a x^2 + b``; returns ``(a, b, R^2)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    X = np.column_stack([x**2, np.ones_like(x)])
    (a, b), *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ np.array([a, b])
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2


def linear_fit_r2(x: ArrayLike, y: ArrayLike) -> tuple[float, float, float]:
    """Least-squares line ``y = slope x + intercept``; returns ``(slope, intercept, R^2)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    X = np.column_stack([x, np.ones_like(x)])
    (slope, icpt), *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ np.array([slope, icpt])
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icpt), r2


def _identity_trial(p: int, q: int, n: int, seed: RngSeed) -> float:
    X = seed.generator().standard_normal((n, p * q))
    S = scm(SampleSet(X, p, q))
    S[np.diag_indices_from(S)] -= 1.0
    return float(np.linalg.norm(permute_R(S, p, q), 2)) ** 2


def opnorm_growth_experiment(
    q: int,
    n: int,
    p_grid: Sequence[int],
    trials: int,
    rng: RngSeed,
) -> OpnormGrowth:
    """Mean of ``||R(S_hat - I)||_2^2`` over trials for each ``p``, with a quadratic fit in ``p``.

    Uses ``Sigma0 = I_{pq}``. Trial ``k`` at grid index ``i`` draws from
    substream ``(i, k)`` of ``rng``.
    """
    if len(p_grid) == 0:
        raise ValueError("p_grid must not be empty")
    if trials < 1:
        raise ValueError(f"trials must be positive, got {trials}")
    grid = np.asarray(p_grid, dtype=np.int64)
    means = np.empty(grid.size)
    for i, p in enumerate(grid):
        vals = [_identity_trial(int(p), q, n, rng.child(i, k)) for k in range(trials)]
        means[i] = math.fsum(vals) / trials
    a, b, r2 = fit_quadratic(grid, means) if grid.size >= 2 else (float("nan"),) * 3
    return OpnormGrowth(p_grid=grid, means=means, a=a, b=b, r_squared=r2)


def opnorm_coverage(
    Sigma0: ArrayLike,
    p: int,
    q: int,
    n: int,
    params: BoundParams,
    trials: int,
    rng: RngSeed,
) -> tuple[float, float]:
    """Empirical fraction of trials with ``||Delta_n||_2 <= thm3_rate``, and the nominal level."""
    from .synthgen import sample_gaussian

    Sigma0 = as_matrix(Sigma0, "Sigma0")
    bound = thm3_rate(params, p, q, n)
    hits = 0
    for k in range(trials):
        S = scm(sample_gaussian(Sigma0, n, rng.child(k), p=p, q=q))
        hits += permuted_error_norm(S, Sigma0, p, q) <= bound
    return hits / trials, params.coverage(p, q, n)


@dataclass(frozen=True)
class OracleCheck:
    lhs: float
    rhs_per_r: NDArray[np.float64]  # index r = 0 .. min(p^2, q^2)
    holds: bool
    lam: float
    delta_norm: float | None = None  # ||R(S_hat - Sigma0)||_2 when S_hat is supplied
    hypothesis_ok: bool | None = None

    @property
    def rhs(self) -> float:
        return float(self.rhs_per_r.min())


def oracle_inequality_check(
    Sigma_hat: ArrayLike,
    Sigma0: ArrayLike,
    lam: float,
    p: int,
    q: int,
    *,
    S_hat: ArrayLike | None = None,
    rtol: float = 1e-10,
) -> OracleCheck:
    """Compare ``||R(Sigma_hat - Sigma0)||_F^2`` with the oracle right-hand side.

    ``rhs_per_r[r] = sum_{k > r} sigma_k^2(R(Sigma0)) + (1 + sqrt 2)^2 / 4 * lam^2 * r``;
    the infimum over all ``R`` is the minimum over ``r`` by Eckart-Young.
    Passing the sample covariance ``S_hat`` also checks ``lam >= 2 ||Delta_n||_2``.
    ``rtol`` absorbs floating-point rounding at equality.
    """
    Sh = as_matrix(Sigma_hat, "Sigma_hat")
    T = as_matrix(Sigma0, "Sigma0")
    _check_pair(Sh, T, p, q)
    lhs = float(np.sum(permute_R(Sh - T, p, q) ** 2))
    sig2 = kron_spectrum(T, p, q) ** 2
    tails = np.concatenate([np.cumsum(sig2[::-1])[::-1], [0.0]])
    r = np.arange(tails.size)
    rhs = tails + ORACLE_PENALTY * lam**2 * r
    holds = lhs <= rhs.min() * (1.0 + rtol) + rtol * float(np.sum(sig2))
    delta = ok = None
    if S_hat is not None:
        delta = permuted_error_norm(S_hat, T, p, q)
        ok = bool(lam >= 2.0 * delta * (1.0 - 1e-12))
    return OracleCheck(lhs=lhs, rhs_per_r=rhs, holds=bool(holds), lam=float(lam),
                       delta_norm=delta, hypothesis_ok=ok)


def kron_spectrum(Sigma0: ArrayLike, p: int, q: int) -> NDArray[np.float64]:
    """Singular values of ``R(Sigma0)``, non-increasing, length ``min(p^2, q^2)``."""
    S = as_matrix(Sigma0, "Sigma0")
    if S.shape != (p * q, p * q):
        raise ValueError(f"Sigma0 must be {p * q}x{p * q}, got {S.shape}")
    return np.linalg.svd(permute_R(S, p, q), compute_uv=False)


def variational_bound(R0: ArrayLike, P_k: ArrayLike, *, tol: float = 1e-8) -> float:
    """``||(I - P_k) R0^T||_2^2``, an upper bound on ``sigma_{k+1}^2(R0)`` for a rank-``k`` projector."""
    R = as_matrix(R0, "R0")
    P = np.asarray(P_k, dtype=np.float64)
    n = R.shape[1]
    if P.shape != (n, n):
        raise ValueError(f"P_k must be {n}x{n}, got {P.shape}")
    if np.max(np.abs(P - P.T), initial=0.0) > tol or np.max(np.abs(P @ P - P), initial=0.0) > tol:
        raise ValueError("P_k is not an orthogonal projector")
    resid = R.T - P @ R.T
    return float(np.linalg.norm(resid, 2)) ** 2


@dataclass(frozen=True)
class GsBasis:
    """Orthonormal basis rows ``vectors[i]`` built from ``vec(Sigma(taus[i]))``."""

    vectors: NDArray[np.float64]
    taus: tuple[int, ...]
    skipped: tuple[int, ...] = ()

    def projector(self, k: int) -> NDArray[np.float64]:
        V = self.vectors[:k]
        return V.T @ V


def _lag_order(lags: Mapping[int, NDArray]) -> list[int]:
    N = max(abs(t) for t in lags)
    order = [0]
    for l in range(1, N + 1):
        order += [l, -l]
    return [t for t in order if t in lags]


def gs_toeplitz_basis(lags: Mapping[int, ArrayLike], *, tol: float = 1e-10) -> GsBasis:
    """Gram-Schmidt over ``vec(Sigma(0)), vec(Sigma(1)), vec(Sigma(-1)), vec(Sigma(2)), ...``.

    A lag whose residual after projection is at most ``tol`` times its own
    norm (or which is exactly zero) is skipped as linearly dependent.
    Modified Gram-Schmidt with one re-orthogonalization pass.
    """
    basis: list[NDArray[np.float64]] = []
    taus, skipped = [], []
    for tau in _lag_order(lags):
        x = vec(lags[tau])
        norm = float(np.linalg.norm(x))
        r = x.copy()
        for _ in range(2):
            for b in basis:
                r -= (b @ r) * b
        rn = float(np.linalg.norm(r))
        if norm == 0.0 or rn <= tol * norm:
            skipped.append(tau)
            continue
        basis.append(r / rn)
        taus.append(tau)
    dim = vec(lags[0]).size
    vectors = np.array(basis) if basis else np.zeros((0, dim))
    return GsBasis(vectors=vectors, taus=tuple(taus), skipped=tuple(skipped))


@dataclass(frozen=True)
class SpectrumReport:
    """Kronecker spectrum of a block-Toeplitz covariance with upper-bound curves.

    All curves are indexed by ``k = 0 .. min(p^2, q^2) - 1`` and bound
    ``sigma_{k+1}^2``:

    ``exact``     ``sigma_{k+1}^2(R0)``
    ``frob_opt``  ``||(I - V_k V_k^T) R0^T||_F^2`` with the top-``k`` right singular vectors
    ``frob_gs``   the same with the Gram-Schmidt lag basis
    ``gs_tail``   row-subtraction tail ``p sum_{l > k'} (||Sigma(l)||_F^2 + ||Sigma(-l)||_F^2)``
                  at odd ``k = 2k' + 1``, linear interpolation at even ``k``
    """

    sigma: NDArray[np.float64]
    exact: NDArray[np.float64]
    frob_opt: NDArray[np.float64]
    frob_gs: NDArray[np.float64]
    gs_tail: NDArray[np.float64]
    c_prime: float = field(default=float("nan"))

    @property
    def k(self) -> NDArray[np.int64]:
        return np.arange(self.exact.size)

    def curves(self) -> dict[str, NDArray[np.float64]]:
        return {"exact": self.exact, "frob_opt": self.frob_opt,
                "frob_gs": self.frob_gs, "gs_tail": self.gs_tail}


def _row_subtraction_tail(lags: Mapping[int, NDArray], p: int, r0: int) -> NDArray[np.float64]:
    N = max(abs(t) for t in lags)
    fro2 = {t: float(np.sum(np.asarray(S) ** 2)) for t, S in lags.items()}
    pair = np.array([fro2.get(l, 0.0) + fro2.get(-l, 0.0) for l in range(N + 1)])
    # tail[k'] = sum_{l = k'+1}^{N} pair[l]
    tail = np.concatenate([np.cumsum(pair[::-1])[::-1][1:], [0.0]])
    out = np.zeros(r0)
    for k in range(1, r0):
        if k % 2 == 1:
            kp = (k - 1) // 2
            out[k] = p * tail[kp] if kp <= N else 0.0
        else:
            lo = (k - 2) // 2
            hi = k // 2
            a = p * tail[lo] if lo <= N else 0.0
            b = p * tail[hi] if hi <= N else 0.0
            out[k] = 0.5 * (a + b)
    return out


def toeplitz_spectrum_bounds(spec: Var1Spec, p: int | None = None, q: int | None = None) -> SpectrumReport:
    """Kronecker spectrum of the VAR(1) block-Toeplitz covariance and its bound curves.

    The factor dimensions are ``p = N + 1`` time blocks and ``q = m``.
    """
    p_ = spec.N + 1
    q_ = spec.m
    if (p is not None and p != p_) or (q is not None and q != q_):
        raise ValueError(f"block-Toeplitz layout requires p = N+1 = {p_} and q = m = {q_}")
    p, q = p_, q_
    lags = var1_lag_covariances(spec)
    R0 = permute_R(var1_block_toeplitz(spec), p, q)
    r0 = min(p * p, q * q)

    _, s, Vt = np.linalg.svd(R0, full_matrices=False)
    V = Vt.T
    exact = s[:r0] ** 2
    RT = R0.T
    frob_opt = np.empty(r0)
    for k in range(r0):
        Vk = V[:, :k]
        frob_opt[k] = float(np.sum((RT - Vk @ (Vk.T @ RT)) ** 2))

    basis = gs_toeplitz_basis(lags)
    frob_gs = np.empty(r0)
    for k in range(r0):
        B = basis.vectors[: min(k, basis.vectors.shape[0])]
        frob_gs[k] = float(np.sum((RT - B.T @ (B @ RT)) ** 2))

    gs_tail = _row_subtraction_tail(lags, p, r0)
    gs_tail[0] = float(np.sum(R0**2))

    u = spec.u
    if u > 0:
        c_prime = max(float(np.sum(S**2)) / (u ** (2 * abs(t)) * q) for t, S in lags.items())
    else:
        c_prime = float(np.sum(lags[0] ** 2)) / q
    return SpectrumReport(sigma=s[:r0], exact=exact, frob_opt=frob_opt,
                          frob_gs=frob_gs, gs_tail=gs_tail, c_prime=c_prime)


def min_separation_rank(p: int, q: int, u: float, eps: float) -> int:
    """Smallest integer ``r >= log(pq / eps) / log(1 / u)``."""
    if not 0.0 < u < 1.0:
        raise ValueError(f"u must lie in (0, 1), got {u}")
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if p < 1 or q < 1:
        raise ValueError(f"p and q must be positive, got p={p}, q={q}")
    return max(1, math.ceil(math.log(p * q / eps) / math.log(1.0 / u)))
