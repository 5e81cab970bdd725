"""Synthetic ground-truth covariances and Gaussian sampling.

Two truth families are provided: sums of Kronecker products of random
positive definite factors, and block-Toeplitz covariances of a stationary
VAR(1) process observed over ``N + 1`` consecutive time steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .estimators import KroneckerExpansion, KroneckerTerm, SampleSet
from .matcore import as_matrix, solve_discrete_lyapunov, symmetrize

__all__ = [
    "RNG_NAME",
    "RngSeed",
    "Var1Spec",
    "random_kp_sum_covariance",
    "var1_lag_covariances",
    "var1_block_toeplitz",
    "random_stable_matrix",
    "sample_gaussian",
    "simulate_var1",
]

# Recorded in run manifests; bump the suffix if the stream derivation changes.
RNG_NAME = "philox4x64/seedsequence-v1"


@dataclass(frozen=True)
class RngSeed:
    """A (seed, stream) pair naming one reproducible random substream.

    Draws depend only on the pair, never on the order in which substreams
    are consumed, so parallel trials reproduce sequential runs exactly.
    """

    seed: int
    stream: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if any(k < 0 for k in self.stream):
            raise ValueError(f"stream ids must be non-negative, got {self.stream}")

    def child(self, *keys: int) -> RngSeed:
        return RngSeed(self.seed, self.stream + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))


def _rng(rng: RngSeed | np.random.Generator) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else rng.generator()


def random_kp_sum_covariance(
    p: int, q: int, r: int, rng: RngSeed | np.random.Generator
) -> tuple[NDArray[np.float64], KroneckerExpansion]:
    """Draw ``sum_{g<=r} A_g kron B_g`` with ``A_g = C C^T``, ``C`` standard normal.

    Returns the covariance and its generating terms (weights carry the
    magnitude; stored factors have unit Frobenius norm).
    """
    if not 1 <= r <= min(p * p, q * q):
        raise ValueError(f"r must lie in [1, {min(p * p, q * q)}], got {r}")
    gen = _rng(rng)
    Sigma0 = np.zeros((p * q, p * q))
    terms = []
    for _ in range(r):
        CA = gen.standard_normal((p, p))
        CB = gen.standard_normal((q, q))
        A = CA @ CA.T
        B = CB @ CB.T
        Sigma0 += np.kron(A, B)
        na, nb = np.linalg.norm(A), np.linalg.norm(B)
        terms.append(KroneckerTerm(weight=na * nb, left=A / na, right=B / nb))
    # Generating terms are not orthogonal, so they are not sorted by the
    # SVD rules; keep them in draw order.
    expansion = KroneckerExpansion(p=p, q=q, terms=tuple(terms), orthogonal=False)
    return symmetrize(Sigma0), expansion


@dataclass(frozen=True)
class Var1Spec:
    """VAR(1) process ``Z_t = Phi Z_{t-1} + e_t`` observed at ``N + 1`` times."""

    Phi: NDArray[np.float64]
    N: int
    Sigma_eps: NDArray[np.float64] | None = field(default=None)

    def __post_init__(self) -> None:
        Phi = as_matrix(self.Phi, "Phi")
        if Phi.shape[0] != Phi.shape[1]:
            raise ValueError(f"Phi must be square, got {Phi.shape}")
        norm = float(np.linalg.norm(Phi, 2))
        if norm >= 1.0:
            raise ValueError(f"||Phi||_2 must be < 1, got {norm:.6g}")
        if self.N < 0:
            raise ValueError(f"N must be non-negative, got {self.N}")
        m = Phi.shape[0]
        eps = np.eye(m) if self.Sigma_eps is None else as_matrix(self.Sigma_eps, "Sigma_eps")
        if eps.shape != (m, m):
            raise ValueError(f"Sigma_eps must be {m}x{m}, got {eps.shape}")
        if np.max(np.abs(eps - eps.T)) > 1e-10 * max(1.0, np.max(np.abs(eps))):
            raise ValueError("Sigma_eps must be symmetric")
        if np.linalg.eigvalsh(symmetrize(eps))[0] < -1e-10 * max(1.0, np.max(np.abs(eps))):
            raise ValueError("Sigma_eps must be positive semidefinite")
        object.__setattr__(self, "Phi", Phi)
        object.__setattr__(self, "Sigma_eps", eps)

    @property
    def m(self) -> int:
        return self.Phi.shape[0]

    @property
    def u(self) -> float:
        """Spectral norm of ``Phi`` (the decay rate of the lag covariances)."""
        return float(np.linalg.norm(self.Phi, 2))


def var1_lag_covariances(spec: Var1Spec) -> dict[int, NDArray[np.float64]]:
    """Lag covariances ``Sigma(tau) = E[y(0) y(tau)^T]`` for ``|tau| <= N``.

    With ``y(tau) = Phi^tau y(0) + (innovations independent of y(0))``,
    ``E[y(0) y(tau)^T] = Sigma(0) (Phi^T)^tau`` for ``tau > 0`` and
    ``Sigma(-tau) = Sigma(tau)^T``. ``Sigma(0)`` is the stationary covariance.
    """
    S0 = solve_discrete_lyapunov(spec.Phi, spec.Sigma_eps)
    lags = {0: S0}
    cur = S0
    for tau in range(1, spec.N + 1):
        cur = cur @ spec.Phi.T
        lags[tau] = cur
        lags[-tau] = cur.T
    return lags


def var1_block_toeplitz(spec: Var1Spec) -> NDArray[np.float64]:
    """Block-Toeplitz covariance with block ``(i, j) = Sigma(j - i)``."""
    lags = var1_lag_covariances(spec)
    m, nb = spec.m, spec.N + 1
    out = np.empty((nb * m, nb * m))
    for i in range(nb):
        for j in range(nb):
            out[i * m:(i + 1) * m, j * m:(j + 1) * m] = lags[j - i]
    return out


def random_stable_matrix(
    m: int, target_norm: float, rng: RngSeed | np.random.Generator
) -> NDArray[np.float64]:
    """Standard normal ``m x m`` matrix rescaled to spectral norm ``target_norm``."""
    if not 0.0 < target_norm < 1.0:
        raise ValueError(f"target_norm must lie in (0, 1), got {target_norm}")
    G = _rng(rng).standard_normal((m, m))
    return G * (target_norm / np.linalg.norm(G, 2))


def _psd_factor(Sigma0: NDArray[np.float64]) -> NDArray[np.float64]:
    try:
        return np.linalg.cholesky(Sigma0)
    except np.linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(symmetrize(Sigma0))
    scale = max(1.0, float(np.max(np.abs(w))))
    if w[0] < -1e-10 * scale:
        raise np.linalg.LinAlgError(
            f"covariance is indefinite (min eigenvalue {w[0]:.3e})"
        )
    return V * np.sqrt(np.clip(w, 0.0, None))


def sample_gaussian(
    Sigma0: ArrayLike,
    n: int,
    rng: RngSeed | np.random.Generator,
    *,
    p: int | None = None,
    q: int | None = None,
) -> SampleSet:
    """Draw ``n`` zero-mean Gaussian rows with covariance ``Sigma0``.

    Uses a Cholesky factor, falling back to a symmetric eigen square root for
    singular positive semidefinite input.
    """
    Sigma0 = as_matrix(Sigma0, "Sigma0")
    d = Sigma0.shape[0]
    if Sigma0.shape != (d, d):
        raise ValueError(f"Sigma0 must be square, got {Sigma0.shape}")
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if p is None and q is None:
        p, q = 1, d
    elif p is None:
        p = d // q
    elif q is None:
        q = d // p
    L = _psd_factor(Sigma0)
    g = _rng(rng).standard_normal((n, d))
    return SampleSet(g @ L.T, p, q)


def simulate_var1(
    Phi: ArrayLike,
    T: int,
    rng: RngSeed | np.random.Generator,
    *,
    Sigma_eps: ArrayLike | None = None,
    burn_in: int = 200,
) -> NDArray[np.float64]:
    """Simulate ``T`` steps of a VAR(1) process, returned as a ``T x m`` array."""
    Phi = as_matrix(Phi, "Phi")
    m = Phi.shape[0]
    eps_cov = np.eye(m) if Sigma_eps is None else as_matrix(Sigma_eps, "Sigma_eps")
    L = _psd_factor(eps_cov)
    gen = _rng(rng)
    noise = gen.standard_normal((T + burn_in, m)) @ L.T
    out = np.empty((T + burn_in, m))
    z = np.zeros(m)
    for t in range(T + burn_in):
        z = Phi @ z + noise[t]
        out[t] = z
    return out[burn_in:]
