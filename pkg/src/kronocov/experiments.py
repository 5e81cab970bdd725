"""Monte Carlo normalized-MSE harness for the synthetic covariance studies.

One ground-truth covariance is drawn per experiment (from the first RNG
substream); every (n, trial) cell then draws its own substream, so results
do not depend on the worker count or scheduling order.
"""

from __future__ import annotations

import csv
import io
import math
import os
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import jsonschema
import numpy as np
from numpy.typing import ArrayLike, NDArray

from .estimators import (
    LambdaRule,
    PermutedSpectrum,
    SampleSet,
    lambda_select,
    pca_covariance,
    scm,
    svt_path,
)
from .matcore import as_matrix, permute_R
from .synthgen import (
    RngSeed,
    Var1Spec,
    random_kp_sum_covariance,
    random_stable_matrix,
    sample_gaussian,
    var1_block_toeplitz,
)

__all__ = [
    "ConfigError",
    "CONFIG_SCHEMA",
    "GeneratorSpec",
    "EstimatorSpec",
    "ExperimentConfig",
    "MseRow",
    "MseTable",
    "normalized_mse",
    "normalized_rmse",
    "db_reduction",
    "draw_truth",
    "mse_vs_n",
    "spectrum_energy_report",
    "resolve_threads",
]

ESTIMATOR_NAMES = ("scm", "pca", "svt", "prls", "cm")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``path`` locates the offending field."""

    def __init__(self, message: str, path: str = "$") -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


_RULE_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["fixed", "prls_practical", "prls_theory", "svt_lounici"]},
        "C": {"type": "number", "exclusiveMinimum": 0},
        "t": {"type": ["number", "null"]},
        "eps_prime": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
        "C0": {"type": ["number", "null"]},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "p": {"type": "integer", "minimum": 1},
        "q": {"type": "integer", "minimum": 1},
        "generator": {
            "oneOf": [
                {
                    "type": "object",
                    "properties": {"kind": {"const": "kp_sum"}, "r": {"type": "integer", "minimum": 1}},
                    "required": ["kind", "r"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {
                        "kind": {"const": "var1"},
                        "norm": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    },
                    "required": ["kind", "norm"],
                    "additionalProperties": False,
                },
            ]
        },
        "n_grid": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "trials": {"type": "integer", "minimum": 1},
        "pilot_trials": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "estimators": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "name": {"enum": list(ESTIMATOR_NAMES)},
                    "r": {"type": "integer", "minimum": 1},
                    "rule": _RULE_SCHEMA,
                    "scan": {
                        "type": "array",
                        "items": {"type": "number", "exclusiveMinimum": 0},
                        "minItems": 1,
                    },
                },
                "required": ["name"],
                "additionalProperties": False,
            },
        },
    },
    "required": ["p", "q", "generator", "n_grid", "trials", "seed", "estimators"],
    "additionalProperties": False,
}


def _json_path(err: jsonschema.ValidationError) -> str:
    path = "$"
    for part in err.absolute_path:
        path += f"[{part}]" if isinstance(part, int) else f".{part}"
    return path


@dataclass(frozen=True)
class GeneratorSpec:
    """``kp_sum`` with separation rank ``r``, or ``var1`` with ``||Phi||_2 = norm``."""

    kind: str
    r: int | None = None
    norm: float | None = None

    def to_dict(self) -> dict:
        if self.kind == "kp_sum":
            return {"kind": "kp_sum", "r": self.r}
        return {"kind": "var1", "norm": self.norm}


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator column.

    ``scan`` lists candidate multipliers ``C`` for ``rule``; the best one is
    chosen per ``n`` on separate pilot trials by mean normalized MSE against
    the known truth (oracle tuning), then frozen for the main trials.
    """

    name: str
    r: int | None = None
    rule: LambdaRule | None = None
    scan: tuple[float, ...] | None = None

    @property
    def label(self) -> str:
        return f"{self.name}({self.r})" if self.r is not None else self.name

    def to_dict(self) -> dict:
        out: dict = {"name": self.name}
        if self.r is not None:
            out["r"] = self.r
        if self.rule is not None:
            out["rule"] = {k: v for k, v in self.rule.to_dict().items() if v is not None}
        if self.scan is not None:
            out["scan"] = list(self.scan)
        return out


_DEFAULT_RULES = {
    # Used when a config omits the rule.
    "prls": LambdaRule("prls_theory"),
    "svt": LambdaRule("svt_lounici"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    p: int
    q: int
    generator: GeneratorSpec
    n_grid: tuple[int, ...]
    trials: int
    estimators: tuple[EstimatorSpec, ...]
    seed: int = 0
    pilot_trials: int = 20

    def __post_init__(self) -> None:
        if not self.n_grid:
            raise ConfigError("must not be empty", "$.n_grid")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ConfigError("must be strictly ascending", "$.n_grid")
        if self.trials < 1:
            raise ConfigError("must be at least 1", "$.trials")
        if self.generator.kind == "kp_sum" and not 1 <= (self.generator.r or 0) <= min(self.p**2, self.q**2):
            raise ConfigError(f"r must lie in [1, {min(self.p**2, self.q**2)}]", "$.generator.r")
        names = [e.label for e in self.estimators]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate estimator entries", "$.estimators")
        for i, e in enumerate(self.estimators):
            if e.name in ("pca", "cm") and e.r is None:
                raise ConfigError(f"{e.name} requires r", f"$.estimators[{i}]")
            if e.name in ("scm",) and (e.rule or e.scan or e.r):
                raise ConfigError("scm takes no parameters", f"$.estimators[{i}]")
            if e.name == "cm" and e.r is not None and e.r > min(self.p**2, self.q**2):
                raise ConfigError("r exceeds min(p^2, q^2)", f"$.estimators[{i}].r")
            if e.name == "pca" and e.r is not None and e.r > self.p * self.q:
                raise ConfigError("r exceeds p*q", f"$.estimators[{i}].r")

    @property
    def rng(self) -> RngSeed:
        return RngSeed(self.seed)

    @classmethod
    def from_dict(cls, cfg: dict) -> ExperimentConfig:
        try:
            jsonschema.validate(cfg, CONFIG_SCHEMA)
        except jsonschema.ValidationError as err:
            raise ConfigError(err.message, _json_path(err)) from None
        g = cfg["generator"]
        gen = GeneratorSpec(kind=g["kind"], r=g.get("r"), norm=g.get("norm"))
        ests = []
        r0 = min(cfg["p"] ** 2, cfg["q"] ** 2)
        for i, e in enumerate(cfg["estimators"]):
            if e["name"] in ("pca", "cm") and "r" not in e:
                raise ConfigError(f"{e['name']} requires r", f"$.estimators[{i}]")
            limit = r0 if e["name"] == "cm" else cfg["p"] * cfg["q"]
            if "r" in e and e["r"] > limit:
                raise ConfigError(f"r must not exceed {limit}", f"$.estimators[{i}].r")
            rule = None
            if e["name"] in ("prls", "svt"):
                try:
                    rule = LambdaRule.from_dict(e["rule"]) if "rule" in e else _DEFAULT_RULES[e["name"]]
                except ValueError as exc:
                    raise ConfigError(str(exc), f"$.estimators[{i}].rule") from None
            elif "rule" in e or "scan" in e:
                raise ConfigError(f"{e['name']} takes no lambda rule", f"$.estimators[{i}]")
            scan = tuple(float(c) for c in e["scan"]) if "scan" in e else None
            ests.append(EstimatorSpec(name=e["name"], r=e.get("r"), rule=rule, scan=scan))
        if not any(e.name == "scm" for e in ests):
            ests.insert(0, EstimatorSpec("scm"))
        return cls(
            p=cfg["p"], q=cfg["q"], generator=gen, n_grid=tuple(cfg["n_grid"]),
            trials=cfg["trials"], estimators=tuple(ests), seed=cfg["seed"],
            pilot_trials=cfg.get("pilot_trials", 20),
        )

    def to_dict(self) -> dict:
        return {
            "p": self.p, "q": self.q, "generator": self.generator.to_dict(),
            "n_grid": list(self.n_grid), "trials": self.trials,
            "pilot_trials": self.pilot_trials, "seed": self.seed,
            "estimators": [e.to_dict() for e in self.estimators],
        }


def normalized_mse(Sigma_hat: ArrayLike, Sigma0: ArrayLike) -> float:
    """``||Sigma_hat - Sigma0||_F^2 / ||Sigma0||_F^2``."""
    A = as_matrix(Sigma_hat, "Sigma_hat")
    B = as_matrix(Sigma0, "Sigma0")
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    den = float(np.sum(B * B))
    if den == 0.0:
        raise ValueError("Sigma0 is zero; normalized error undefined")
    return float(np.sum((A - B) ** 2)) / den


def normalized_rmse(Sigma_hat: ArrayLike, Sigma0: ArrayLike) -> float:
    """``||Sigma_hat - Sigma0||_F / ||Sigma0||_F``."""
    return math.sqrt(normalized_mse(Sigma_hat, Sigma0))


def db_reduction(mse_scm: float, mse_est: float) -> float:
    """``10 log10(mse_scm / mse_est)``."""
    if not (mse_scm > 0 and mse_est > 0):
        raise ValueError(f"errors must be positive, got {mse_scm} and {mse_est}")
    return 10.0 * math.log10(mse_scm / mse_est)


def draw_truth(config: ExperimentConfig) -> NDArray[np.float64]:
    """The single ground-truth covariance of an experiment (substream 0)."""
    g = config.generator
    stream = config.rng.child(0)
    if g.kind == "kp_sum":
        Sigma0, _ = random_kp_sum_covariance(config.p, config.q, g.r, stream)
        return Sigma0
    # Block-Toeplitz layout: p = N + 1 time blocks of size q = m.
    Phi = random_stable_matrix(config.q, g.norm, stream)
    return var1_block_toeplitz(Var1Spec(Phi, config.p - 1))


def resolve_threads(threads: int | None = None) -> int:
    """Worker count: explicit value, else ``KRONOCOV_THREADS``, else all cores."""
    if threads is None:
        env = os.environ.get("KRONOCOV_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ValueError(f"KRONOCOV_THREADS must be an integer, got {env!r}") from None
    if threads is None:
        threads = os.cpu_count() or 1
    if threads < 1:
        raise ValueError(f"thread count must be positive, got {threads}")
    return threads


@dataclass(frozen=True)
class MseRow:
    """Aggregate for one (estimator, n) cell.

    ``db_reduction`` compares trial-mean normalized RMSE against SCM;
    ``db_reduction_mse`` applies the same formula to the squared errors.
    ``C`` is the scanned multiplier that was selected, if any.
    """

    estimator: str
    n: int
    trial_mean_mse: float
    stderr: float
    trial_mean_rmse: float
    db_reduction: float
    db_reduction_mse: float
    C: float | None = None
    failures: int = 0


@dataclass(frozen=True)
class MseTable:
    rows: tuple[MseRow, ...]
    scan_curves: dict = field(default_factory=dict)  # (label, n) -> ((C, pilot mean mse), ...)

    COLUMNS = ("estimator", "n", "trial_mean_mse", "stderr", "db_reduction",
               "trial_mean_rmse", "db_reduction_mse", "C", "failures")

    def get(self, estimator: str, n: int) -> MseRow:
        for r in self.rows:
            if r.estimator == estimator and r.n == n:
                return r
        raise KeyError((estimator, n))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r.estimator, r.n, repr(r.trial_mean_mse), repr(r.stderr),
                        repr(r.db_reduction), repr(r.trial_mean_rmse),
                        repr(r.db_reduction_mse), "" if r.C is None else repr(r.C), r.failures])
        return buf.getvalue()


def _trial_errors(
    Sigma0: NDArray[np.float64],
    config: ExperimentConfig,
    n: int,
    seed: RngSeed,
    choices: dict[str, tuple[float, ...] | None],
) -> dict[tuple[str, float | None], float]:
    # Every estimator, and every candidate C, is scored on the same sample.
    p, q = config.p, config.q
    S = scm(sample_gaussian(Sigma0, n, seed, p=p, q=q))
    spec_norm = float(np.linalg.eigvalsh(S)[-1])
    out: dict[tuple[str, float | None], float] = {}
    perm: PermutedSpectrum | None = None

    def permuted() -> PermutedSpectrum:
        nonlocal perm
        if perm is None:
            perm = PermutedSpectrum(S, p, q)
        return perm

    for e in config.estimators:
        Cs = choices.get(e.label)
        try:
            if e.name == "scm":
                out[(e.label, None)] = normalized_mse(S, Sigma0)
            elif e.name == "pca":
                out[(e.label, None)] = normalized_mse(pca_covariance(S, e.r), Sigma0)
            elif e.name == "cm":
                out[(e.label, None)] = normalized_mse(permuted().cm_covariance(e.r), Sigma0)
            else:
                Cs_eval = Cs if Cs is not None else (e.rule.C,)
                lams = [lambda_select(e.rule.with_C(C), S, p, q, n, spectral_norm=spec_norm)
                        for C in Cs_eval]
                if e.name == "prls":
                    covs = [permuted().prls_covariance(lam) for lam in lams]
                else:
                    covs = svt_path(S, lams)
                for C, cov in zip(Cs_eval, covs):
                    out[(e.label, C)] = normalized_mse(cov, Sigma0)
        except (np.linalg.LinAlgError, ValueError):
            # Recorded as a failure for this cell only.
            continue
    return out


def _run_trials(
    fn: Callable[[int], dict], count: int, threads: int
) -> list[dict]:
    if threads <= 1 or count <= 1:
        return [fn(k) for k in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(count)))


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else float("nan")


def _stderr(values: Sequence[float]) -> float:
    k = len(values)
    if k < 2:
        return float("nan")
    m = _mean(values)
    return math.sqrt(math.fsum((v - m) ** 2 for v in values) / (k - 1) / k)


def mse_vs_n(
    config: ExperimentConfig,
    *,
    threads: int | None = None,
    Sigma0: ArrayLike | None = None,
) -> MseTable:
    """Normalized MSE of every configured estimator for each ``n`` in the grid.

    Substreams: 0 draws the truth, ``(1, i, k)`` main trial ``k`` at grid
    index ``i``, ``(2, i, k)`` pilot trial ``k`` used by scanned estimators.
    A precomputed ``Sigma0`` may be passed to skip the draw.
    """
    threads = resolve_threads(threads)
    Sigma0 = draw_truth(config) if Sigma0 is None else as_matrix(Sigma0, "Sigma0")
    rows: list[MseRow] = []
    curves: dict = {}
    for i, n in enumerate(config.n_grid):
        scanned = {e.label: e.scan for e in config.estimators if e.scan is not None}
        selected: dict[str, float] = {}
        if scanned:
            pilot = _run_trials(
                lambda k: _trial_errors(Sigma0, config, n, config.rng.child(2, i, k), scanned),
                config.pilot_trials, threads,
            )
            for label, Cs in scanned.items():
                curve = []
                for C in Cs:
                    vals = [t[(label, C)] for t in pilot if (label, C) in t]
                    curve.append((C, _mean(vals)))
                curves[(label, n)] = tuple(curve)
                finite = [(m, C) for C, m in curve if math.isfinite(m)]
                # Ties resolve to the smallest C.
                selected[label] = min(finite)[1] if finite else Cs[0]

        fixed = {label: (C,) for label, C in selected.items()}
        main = _run_trials(
            lambda k: _trial_errors(Sigma0, config, n, config.rng.child(1, i, k), fixed),
            config.trials, threads,
        )

        cells = {}
        for e in config.estimators:
            if e.name in ("prls", "svt"):
                key = (e.label, selected.get(e.label, e.rule.C))
            else:
                key = (e.label, None)
            vals = [t[key] for t in main if key in t]
            cells[e.label] = (vals, key[1] if e.name in ("prls", "svt") else None)

        scm_vals, _ = cells["scm"]
        scm_mse = _mean(scm_vals)
        scm_rmse = _mean([math.sqrt(v) for v in scm_vals])
        for e in config.estimators:
            vals, C = cells[e.label]
            mse = _mean(vals)
            rmse = _mean([math.sqrt(v) for v in vals])
            try:
                db = db_reduction(scm_rmse, rmse)
                db_sq = db_reduction(scm_mse, mse)
            except ValueError:
                db = db_sq = float("nan")
            rows.append(MseRow(
                estimator=e.label, n=n, trial_mean_mse=mse, stderr=_stderr(vals),
                trial_mean_rmse=rmse, db_reduction=db, db_reduction_mse=db_sq,
                C=C if e.name in ("prls", "svt") else None,
                failures=config.trials - len(vals),
            ))
    return MseTable(rows=tuple(rows), scan_curves=curves)


def spectrum_energy_report(S: ArrayLike, p: int, q: int) -> dict[str, NDArray[np.float64]]:
    """Percent of ``||S||_F^2`` carried by each Kronecker / eigen component.

    ``kron_pcts[k] = 100 sigma_k^2(R(S)) / ||S||_F^2``; ``eigen_pcts`` uses
    squared eigenvalues, truncated to ``min(p^2, q^2)`` entries.
    """
    A = as_matrix(S, "S")
    if A.shape != (p * q, p * q):
        raise ValueError(f"S must be {p * q}x{p * q}, got {A.shape}")
    if np.max(np.abs(A - A.T)) > 1e-8 * max(1.0, float(np.max(np.abs(A)))):
        raise ValueError("S must be symmetric")
    total = float(np.sum(A * A))
    if total == 0.0:
        raise ValueError("S is zero; energy fractions undefined")
    sig = np.linalg.svd(permute_R(A, p, q), compute_uv=False)
    ev = np.sort(np.abs(np.linalg.eigvalsh(0.5 * (A + A.T))))[::-1]
    r0 = min(p * p, q * q)
    return {
        "kron_pcts": 100.0 * sig**2 / total,
        "eigen_pcts": 100.0 * ev[:r0] ** 2 / total,
    }
