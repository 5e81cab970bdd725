"""Covariance estimators.

Sample covariance, PCA truncation, trace-penalized eigenvalue thresholding
(SVT), the permuted rank-penalized least-squares estimator (PRLS) and
rank-constrained covariance matching (CM), plus regularization rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .matcore import as_matrix, depermute_R_inv, permute_R, svd, symmetrize, unvec

__all__ = [
    "LD_C1",
    "LD_C2",
    "LD_C",
    "SampleSet",
    "KroneckerTerm",
    "KroneckerExpansion",
    "KroneckerFit",
    "LambdaRule",
    "scm",
    "pca_covariance",
    "svt_covariance",
    "prls",
    "cm_covariance",
    "PermutedSpectrum",
    "svt_path",
    "lambda_select",
    "effective_rank",
    "dimension_rate",
    "minimal_tail_parameter",
]

# Large-deviation constants for bilinear forms of the permuted SCM error.
LD_C1 = 4.0 * math.e / math.sqrt(6.0 * math.pi)
LD_C2 = math.e * math.sqrt(2.0)
LD_C = max(LD_C1, LD_C2)

# Reshaped singular vectors closer than this to symmetric are symmetrized.
FACTOR_SYMMETRY_TOL = 1e-6


@dataclass(frozen=True)
class SampleSet:
    """``n`` zero-mean observations of dimension ``d = p*q`` stored as rows."""

    data: NDArray[np.float64]
    p: int
    q: int

    def __post_init__(self) -> None:
        data = as_matrix(self.data, "sample data")
        if self.p < 1 or self.q < 1:
            raise ValueError(f"p and q must be positive, got p={self.p}, q={self.q}")
        if data.shape[1] != self.p * self.q:
            raise ValueError(
                f"sample data has {data.shape[1]} columns, expected p*q = {self.p * self.q}"
            )
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.p * self.q


@dataclass(frozen=True)
class KroneckerTerm:
    weight: float
    left: NDArray[np.float64]
    right: NDArray[np.float64]

    def matrix(self) -> NDArray[np.float64]:
        return self.weight * np.kron(self.left, self.right)


@dataclass(frozen=True)
class KroneckerExpansion:
    """Weighted sum of Kronecker products ``sum_k w_k A_k kron B_k``.

    Factors have unit Frobenius norm. When ``orthogonal`` is set (expansions
    read off an SVD), weights are non-increasing and factors are mutually
    orthogonal in the trace inner product.
    """

    p: int
    q: int
    terms: tuple[KroneckerTerm, ...]
    orthogonal: bool = True

    def __post_init__(self) -> None:
        for t in self.terms:
            if t.left.shape != (self.p, self.p) or t.right.shape != (self.q, self.q):
                raise ValueError("factor shapes do not match (p, q)")
            if t.weight < 0:
                raise ValueError("weights must be non-negative")
        if self.orthogonal and self.terms:
            w = np.array([t.weight for t in self.terms])
            if np.any(np.diff(w) > 1e-12 * max(1.0, w[0])):
                raise ValueError("weights must be non-increasing")

    @property
    def rank(self) -> int:
        return len(self.terms)

    def __len__(self) -> int:
        return len(self.terms)

    @property
    def weights(self) -> NDArray[np.float64]:
        return np.array([t.weight for t in self.terms])

    def covariance(self) -> NDArray[np.float64]:
        out = np.zeros((self.p * self.q, self.p * self.q))
        for t in self.terms:
            out += t.matrix()
        return out


@dataclass(frozen=True)
class KroneckerFit:
    """Output of PRLS / covariance matching."""

    expansion: KroneckerExpansion
    covariance: NDArray[np.float64]
    singular_values: NDArray[np.float64]  # spectrum of the permuted input
    lam: float | None = None

    @property
    def r_eff(self) -> int:
        return self.expansion.rank


def scm(samples: SampleSet) -> NDArray[np.float64]:
    """Sample covariance ``(1/n) sum_t z_t z_t^T`` (no mean removal)."""
    if samples.n < 1:
        raise ValueError("empty sample set")
    X = samples.data
    return symmetrize(X.T @ X / samples.n)


def _check_symmetric(S: NDArray[np.float64], name: str, tol: float = 1e-8) -> None:
    if S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} must be square, got {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S))))
    defect = float(np.max(np.abs(S - S.T)))
    if defect > tol * scale:
        raise ValueError(f"{name} is not symmetric (max |S - S^T| = {defect:.3e})")


def pca_covariance(S_hat: ArrayLike, r: int) -> NDArray[np.float64]:
    """Keep the top ``r`` eigenpairs of ``S_hat``."""
    S = as_matrix(S_hat, "S_hat")
    _check_symmetric(S, "S_hat")
    d = S.shape[0]
    if not 1 <= r <= d:
        raise ValueError(f"r must lie in [1, {d}], got {r}")
    w, V = np.linalg.eigh(symmetrize(S))
    w, V = w[::-1][:r], V[:, ::-1][:, :r]
    return symmetrize((V * w) @ V.T)


def svt_covariance(S_hat: ArrayLike, lam: float) -> NDArray[np.float64]:
    """Minimizer of ``||S_hat - S||_F^2 + lam tr(S)`` over psd ``S``.

    Eigenvalues are shifted down by ``lam / 2`` and clipped at zero.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    S = as_matrix(S_hat, "S_hat")
    _check_symmetric(S, "S_hat")
    w, V = np.linalg.eigh(symmetrize(S))
    shrunk = np.maximum(w - lam / 2.0, 0.0)
    keep = shrunk > 0
    return symmetrize((V[:, keep] * shrunk[keep]) @ V[:, keep].T)


def _factor(x: NDArray[np.float64], n: int) -> NDArray[np.float64]:
    F = unvec(x, n)
    if np.max(np.abs(F - F.T)) <= FACTOR_SYMMETRY_TOL:
        F = 0.5 * (F + F.T)
        F /= np.linalg.norm(F)
    return F


def _expansion(U, weights, V, p: int, q: int) -> KroneckerExpansion:
    terms = []
    for k in range(weights.size):
        A = _factor(U[:, k], p)
        B = _factor(V[:, k], q)
        if np.trace(A) < 0:
            A, B = -A, -B
        terms.append(KroneckerTerm(weight=float(weights[k]), left=A, right=B))
    return KroneckerExpansion(p=p, q=q, terms=tuple(terms))


def _check_dims(S: NDArray[np.float64], p: int, q: int) -> None:
    if p < 1 or q < 1:
        raise ValueError(f"p and q must be positive, got p={p}, q={q}")
    if S.shape != (p * q, p * q):
        raise ValueError(f"expected a {p * q}x{p * q} matrix for p={p}, q={q}, got {S.shape}")


def prls(S_hat: ArrayLike, lam: float, p: int, q: int) -> KroneckerFit:
    """Permuted rank-penalized least squares.

    Soft-thresholds the singular values of ``R(S_hat)`` by ``lam / 2`` and
    maps the result back. The surviving singular triplets, reshaped to
    ``p x p`` and ``q x q`` factors, form the Kronecker expansion.
    """
    S = as_matrix(S_hat, "S_hat")
    _check_dims(S, p, q)
    _check_symmetric(S, "S_hat")
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    res = svd(permute_R(S, p, q))
    shrunk = np.maximum(res.s - lam / 2.0, 0.0)
    keep = shrunk > 0
    U, w, V = res.U[:, keep], shrunk[keep], res.V[:, keep]
    R_lam = (U * w) @ V.T
    cov = symmetrize(depermute_R_inv(R_lam, p, q))
    return KroneckerFit(
        expansion=_expansion(U, w, V, p, q),
        covariance=cov,
        singular_values=res.s,
        lam=float(lam),
    )


def cm_covariance(S_hat: ArrayLike, r: int, p: int, q: int) -> KroneckerFit:
    """Best separation-rank-``r`` Frobenius approximation (truncated SVD of ``R(S_hat)``)."""
    S = as_matrix(S_hat, "S_hat")
    _check_dims(S, p, q)
    r0 = min(p * p, q * q)
    if not 1 <= r <= r0:
        raise ValueError(f"r must lie in [1, {r0}], got {r}")
    res = svd(permute_R(S, p, q))
    U, w, V = res.U[:, :r], res.s[:r], res.V[:, :r]
    R_r = (U * w) @ V.T
    cov = symmetrize(depermute_R_inv(R_r, p, q))
    return KroneckerFit(
        expansion=_expansion(U, w, V, p, q),
        covariance=cov,
        singular_values=res.s,
    )


class PermutedSpectrum:
    """One SVD of ``R(S_hat)`` shared by several PRLS / CM evaluations.

    ``prls_covariance(lam)`` and ``cm_covariance(r)`` match :func:`prls` and
    :func:`cm_covariance` on the same input; use this when scanning lambda.
    """

    def __init__(self, S_hat: ArrayLike, p: int, q: int) -> None:
        S = as_matrix(S_hat, "S_hat")
        _check_dims(S, p, q)
        _check_symmetric(S, "S_hat")
        self.p, self.q = p, q
        self._res = svd(permute_R(S, p, q))

    @property
    def singular_values(self) -> NDArray[np.float64]:
        return self._res.s

    def _covariance(self, w: NDArray[np.float64], keep: NDArray[np.bool_]) -> NDArray[np.float64]:
        R = (self._res.U[:, keep] * w[keep]) @ self._res.V[:, keep].T
        return symmetrize(depermute_R_inv(R, self.p, self.q))

    def prls_covariance(self, lam: float) -> NDArray[np.float64]:
        if lam < 0:
            raise ValueError(f"lambda must be non-negative, got {lam}")
        shrunk = np.maximum(self._res.s - lam / 2.0, 0.0)
        return self._covariance(shrunk, shrunk > 0)

    def cm_covariance(self, r: int) -> NDArray[np.float64]:
        r0 = self._res.s.size
        if not 1 <= r <= r0:
            raise ValueError(f"r must lie in [1, {r0}], got {r}")
        keep = np.arange(r0) < r
        return self._covariance(self._res.s, keep)


def svt_path(S_hat: ArrayLike, lams: list[float] | NDArray[np.float64]) -> list[NDArray[np.float64]]:
    """:func:`svt_covariance` for several lambdas from one eigendecomposition."""
    S = as_matrix(S_hat, "S_hat")
    _check_symmetric(S, "S_hat")
    w, V = np.linalg.eigh(symmetrize(S))
    out = []
    for lam in lams:
        if lam < 0:
            raise ValueError(f"lambda must be non-negative, got {lam}")
        shrunk = np.maximum(w - lam / 2.0, 0.0)
        keep = shrunk > 0
        out.append(symmetrize((V[:, keep] * shrunk[keep]) @ V[:, keep].T))
    return out


def dimension_rate(p: int, q: int, n: int) -> float:
    """``(p^2 + q^2 + log max(p, q, n)) / n``."""
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    return (p * p + q * q + math.log(max(p, q, n))) / n


def minimal_tail_parameter(eps_prime: float) -> float:
    """Smallest admissible tail parameter ``t`` for a net resolution ``eps_prime``."""
    if not 0.0 < eps_prime < 0.5:
        raise ValueError(f"eps_prime must lie in (0, 1/2), got {eps_prime}")
    log_net = math.log(1.0 + 2.0 / eps_prime)
    return max(math.sqrt(4.0 * LD_C1 * log_net), 4.0 * LD_C2 * log_net)


_RULE_KINDS = ("fixed", "prls_practical", "prls_theory", "svt_lounici")


@dataclass(frozen=True)
class LambdaRule:
    """Regularization rule.

    ``fixed``           lambda = C
    ``prls_practical``  C ||S||_2 sqrt(rate)
    ``prls_theory``     C * 2 C0 t / (1 - 2 eps') * max(rate, sqrt(rate))
    ``svt_lounici``     C sqrt(tr(S) ||S||_2) sqrt(log(2pq) / n)

    where ``rate = (p^2 + q^2 + log max(p, q, n)) / n``. For the theory rule
    ``t`` defaults to its smallest admissible value and ``C0`` to ``||S||_2``.
    """

    kind: str
    C: float = 1.0
    t: float | None = None
    eps_prime: float = 0.25
    C0: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in _RULE_KINDS:
            raise ValueError(f"unknown lambda rule {self.kind!r}; expected one of {_RULE_KINDS}")
        if not self.C > 0:
            raise ValueError(f"C must be positive, got {self.C}")
        if self.kind == "prls_theory":
            t_min = minimal_tail_parameter(self.eps_prime)
            if self.t is not None and self.t < t_min:
                raise ValueError(
                    f"t = {self.t} is below the admissible minimum {t_min:.4f} "
                    f"for eps_prime = {self.eps_prime}"
                )
            if self.C0 is not None and not self.C0 > 0:
                raise ValueError(f"C0 must be positive, got {self.C0}")

    def with_C(self, C: float) -> LambdaRule:
        return LambdaRule(self.kind, C, self.t, self.eps_prime, self.C0)

    @classmethod
    def from_dict(cls, cfg: dict) -> LambdaRule:
        return cls(
            kind=cfg["kind"],
            C=float(cfg.get("C", 1.0)),
            t=cfg.get("t"),
            eps_prime=float(cfg.get("eps_prime", 0.25)),
            C0=cfg.get("C0"),
        )

    def to_dict(self) -> dict:
        return {"kind": self.kind, "C": self.C, "t": self.t,
                "eps_prime": self.eps_prime, "C0": self.C0}


def lambda_select(
    rule: LambdaRule,
    S_hat: ArrayLike,
    p: int,
    q: int,
    n: int,
    *,
    spectral_norm: float | None = None,
) -> float:
    """Evaluate a regularization rule on a sample covariance.

    ``spectral_norm`` may pass a precomputed ``||S_hat||_2`` to skip an SVD.
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if rule.kind == "fixed":
        return rule.C
    S = as_matrix(S_hat, "S_hat")
    spec = float(np.linalg.norm(S, 2)) if spectral_norm is None else float(spectral_norm)
    if rule.kind == "prls_practical":
        return rule.C * spec * math.sqrt(dimension_rate(p, q, n))
    if rule.kind == "prls_theory":
        t = rule.t if rule.t is not None else minimal_tail_parameter(rule.eps_prime)
        C0 = rule.C0 if rule.C0 is not None else spec
        rate = dimension_rate(p, q, n)
        return rule.C * 2.0 * C0 * t / (1.0 - 2.0 * rule.eps_prime) * max(rate, math.sqrt(rate))
    # svt_lounici
    tr = float(np.trace(S))
    return rule.C * math.sqrt(max(tr, 0.0) * spec) * math.sqrt(math.log(2 * p * q) / n)


def effective_rank(Sigma: ArrayLike) -> float:
    """``tr(Sigma) / ||Sigma||_2``."""
    S = as_matrix(Sigma, "Sigma")
    _check_symmetric(S, "Sigma")
    spec = float(np.linalg.norm(S, 2))
    if spec == 0.0:
        raise ValueError("effective rank is undefined for the zero matrix")
    return float(np.trace(S)) / spec
