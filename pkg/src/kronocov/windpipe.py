"""Wind-speed panels: ingestion, detrending, windowing and linear prediction.

Speeds are square-root transformed, station means and a polynomial seasonal
effect (fitted on the cross-station average) are removed, giving velocity
measures. Non-overlapping length-``p`` windows of the velocity series form
the samples whose covariance drives a one-step linear predictor.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .estimators import LambdaRule, SampleSet, lambda_select, prls, scm, svt_covariance
from .matcore import as_matrix, pseudo_inverse

__all__ = [
    "PanelFormatError",
    "WindPanel",
    "DetrendState",
    "PredictorModel",
    "TuneResult",
    "load_panel",
    "save_panel",
    "load_statlib_wind",
    "detrend",
    "apply_detrend",
    "retrend",
    "windowize",
    "unwindowize",
    "estimate_covariance",
    "fit_predictor",
    "predict_series",
    "rmse_by_station",
    "mean_db_improvement",
    "tune_lambda",
    "tune_lambda_velocity",
]

_MISSING = {"", "na", "nan", "null", "none", "-"}


class PanelFormatError(ValueError):
    """Malformed panel file."""


@dataclass(frozen=True)
class WindPanel:
    """Daily speeds, one column per station, rows in strictly increasing date order."""

    dates: tuple[dt.date, ...]
    stations: tuple[str, ...]
    speeds: NDArray[np.float64]

    def __post_init__(self) -> None:
        S = np.asarray(self.speeds, dtype=np.float64)
        if S.ndim != 2 or S.shape != (len(self.dates), len(self.stations)):
            raise ValueError(
                f"speeds shape {S.shape} does not match {len(self.dates)} dates x "
                f"{len(self.stations)} stations"
            )
        if S.size and not np.all(np.isfinite(S)):
            raise ValueError("speeds contain NaN or Inf")
        if S.size and np.min(S) < 0:
            raise ValueError("speeds must be non-negative")
        for a, b in zip(self.dates, self.dates[1:]):
            if b <= a:
                raise ValueError(f"dates must be strictly increasing ({a} then {b})")
        object.__setattr__(self, "speeds", S)

    @property
    def T(self) -> int:
        return self.speeds.shape[0]

    @property
    def q(self) -> int:
        return self.speeds.shape[1]

    @property
    def day_of_year(self) -> NDArray[np.int64]:
        return np.array([d.timetuple().tm_yday for d in self.dates], dtype=np.int64)

    @property
    def years(self) -> NDArray[np.int64]:
        return np.array([d.year for d in self.dates], dtype=np.int64)

    def select_years(self, first: int, last: int) -> WindPanel:
        """Rows whose calendar year lies in ``[first, last]``."""
        keep = (self.years >= first) & (self.years <= last)
        if not np.any(keep):
            raise ValueError(f"no rows in years {first}-{last}")
        idx = np.flatnonzero(keep)
        return WindPanel(tuple(self.dates[i] for i in idx), self.stations, self.speeds[idx])


def load_panel(path: str | Path, format: str = "csv") -> WindPanel:
    """Read a CSV panel: header ``date,<station>...``, ISO dates, no missing cells."""
    if format != "csv":
        raise ValueError(f"unsupported panel format {format!r}")
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelFormatError(f"{path}: empty file") from None
        if len(header) < 2:
            raise PanelFormatError(f"{path}:1: header needs a date column and at least one station")
        stations = tuple(h.strip() for h in header[1:])
        if len(set(stations)) != len(stations) or any(not s for s in stations):
            raise PanelFormatError(f"{path}:1: station names must be non-empty and unique")
        dates, rows = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise PanelFormatError(
                    f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                date = dt.date.fromisoformat(row[0].strip())
            except ValueError:
                raise PanelFormatError(f"{path}:{line_no}: bad ISO date {row[0]!r}") from None
            vals = []
            for col, cell in zip(stations, row[1:]):
                if cell.strip().lower() in _MISSING:
                    raise PanelFormatError(f"{path}:{line_no}: missing value for station {col}")
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise PanelFormatError(
                        f"{path}:{line_no}: non-numeric value {cell!r} for station {col}"
                    ) from None
            if dates and date <= dates[-1]:
                raise PanelFormatError(f"{path}:{line_no}: date {date} is not after {dates[-1]}")
            dates.append(date)
            rows.append(vals)
    if not rows:
        raise PanelFormatError(f"{path}: no data rows")
    try:
        return WindPanel(tuple(dates), stations, np.array(rows))
    except ValueError as exc:
        raise PanelFormatError(f"{path}: {exc}") from None


def save_panel(panel: WindPanel, path: str | Path) -> None:
    """Write a panel in the format read by :func:`load_panel` (values round-trip exactly)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *panel.stations])
        for d, row in zip(panel.dates, panel.speeds):
            w.writerow([d.isoformat(), *(repr(float(v)) for v in row)])


def load_statlib_wind(path: str | Path, drop: Sequence[str] = ("ROS",)) -> WindPanel:
    """Read the whitespace-separated Irish daily wind file (``YR MO DY`` then 12 stations, knots).

    Two-digit years are taken as 19xx. ``drop`` removes stations by name.
    """
    names = ("RPT", "VAL", "ROS", "KIL", "SHA", "BIR", "DUB", "CLA", "MUL", "CLO", "BEL", "MAL")
    unknown = set(drop) - set(names)
    if unknown:
        raise ValueError(f"unknown stations to drop: {sorted(unknown)}")
    keep = [i for i, s in enumerate(names) if s not in drop]
    dates, rows = [], []
    with Path(path).open() as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if not parts[0].lstrip("-").isdigit():
                continue  # header line
            if len(parts) != 3 + len(names):
                raise PanelFormatError(
                    f"{path}:{line_no}: expected {3 + len(names)} fields, got {len(parts)}"
                )
            try:
                yr, mo, dy = (int(x) for x in parts[:3])
                vals = [float(x) for x in parts[3:]]
                date = dt.date(yr + 1900 if yr < 100 else yr, mo, dy)
            except ValueError as exc:
                raise PanelFormatError(f"{path}:{line_no}: {exc}") from None
            dates.append(date)
            rows.append([vals[i] for i in keep])
    if not rows:
        raise PanelFormatError(f"{path}: no data rows")
    return WindPanel(tuple(dates), tuple(names[i] for i in keep), np.array(rows))


@dataclass(frozen=True)
class DetrendState:
    """Station means of sqrt speeds and seasonal polynomial coefficients.

    ``seasonal_coeffs`` are power-basis coefficients in ``x = 2 (doy - 1) / 365 - 1``.
    """

    station_means: NDArray[np.float64]
    seasonal_coeffs: NDArray[np.float64]
    degree: int

    def __post_init__(self) -> None:
        means = np.asarray(self.station_means, dtype=np.float64).ravel()
        coeffs = np.asarray(self.seasonal_coeffs, dtype=np.float64).ravel()
        if coeffs.size != self.degree + 1:
            raise ValueError(f"expected {self.degree + 1} coefficients, got {coeffs.size}")
        object.__setattr__(self, "station_means", means)
        object.__setattr__(self, "seasonal_coeffs", coeffs)

    def seasonal(self, day_of_year: ArrayLike) -> NDArray[np.float64]:
        return np.polynomial.polynomial.polyval(_doy_to_unit(day_of_year), self.seasonal_coeffs)

    def to_dict(self) -> dict:
        return {"degree": self.degree, "station_means": self.station_means.tolist(),
                "seasonal_coeffs": self.seasonal_coeffs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> DetrendState:
        try:
            return cls(np.array(d["station_means"], dtype=np.float64),
                       np.array(d["seasonal_coeffs"], dtype=np.float64), int(d["degree"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed detrend state: {exc}") from None


def _doy_to_unit(day_of_year: ArrayLike) -> NDArray[np.float64]:
    return 2.0 * (np.asarray(day_of_year, dtype=np.float64) - 1.0) / 365.0 - 1.0


def detrend(panel: WindPanel, degree: int = 14) -> tuple[NDArray[np.float64], DetrendState]:
    """Velocity measures ``sqrt(speed) - station mean - seasonal(day of year)``.

    The seasonal polynomial is an ordinary least-squares fit, over all days,
    of the cross-station average of the mean-centred sqrt speeds.
    """
    if degree < 0:
        raise ValueError(f"degree must be non-negative, got {degree}")
    doy = panel.day_of_year
    if np.unique(doy).size < degree + 1:
        raise ValueError(
            f"seasonal fit of degree {degree} needs at least {degree + 1} distinct days, "
            f"got {np.unique(doy).size}"
        )
    X = np.sqrt(panel.speeds)
    means = X.mean(axis=0)
    avg = (X - means).mean(axis=1)
    coeffs = np.polynomial.polynomial.polyfit(_doy_to_unit(doy), avg, degree)
    state = DetrendState(means, coeffs, degree)
    return apply_detrend(panel, state), state


def apply_detrend(panel: WindPanel, state: DetrendState) -> NDArray[np.float64]:
    """Detrend a panel with a previously fitted state (e.g. test years with training state)."""
    if state.station_means.size != panel.q:
        raise ValueError(f"state has {state.station_means.size} stations, panel has {panel.q}")
    return np.sqrt(panel.speeds) - state.station_means - state.seasonal(panel.day_of_year)[:, None]


def retrend(velocity: ArrayLike, day_of_year: ArrayLike, state: DetrendState) -> NDArray[np.float64]:
    """Inverse of :func:`apply_detrend`: velocity back to speeds."""
    V = as_matrix(velocity, "velocity")
    root = V + state.station_means + state.seasonal(day_of_year)[:, None]
    return root**2


def windowize(velocity: ArrayLike, p: int) -> SampleSet:
    """Non-overlapping length-``p`` windows, each the oldest-first concatenation of ``p`` rows."""
    V = as_matrix(velocity, "velocity")
    T, q = V.shape
    if p < 2:
        raise ValueError(f"window length p must be at least 2, got {p}")
    if T < p:
        raise ValueError(f"need at least p={p} rows, got {T}")
    n = T // p
    return SampleSet(V[: n * p].reshape(n, p * q), p, q)


def unwindowize(samples: SampleSet) -> NDArray[np.float64]:
    """Inverse of :func:`windowize` on the rows it used."""
    return samples.data.reshape(samples.n * samples.p, samples.q)


def estimate_covariance(
    samples: SampleSet, estimator: str, rule: LambdaRule | None = None
) -> tuple[NDArray[np.float64], float | None]:
    """Covariance of windowed samples by ``scm``, ``prls`` or ``svt``; returns ``(Sigma, lambda)``."""
    S = scm(samples)
    if estimator == "scm":
        return S, None
    if rule is None:
        raise ValueError(f"{estimator} requires a lambda rule")
    lam = lambda_select(rule, S, samples.p, samples.q, samples.n)
    if estimator == "prls":
        return prls(S, lam, samples.p, samples.q).covariance, lam
    if estimator == "svt":
        return svt_covariance(S, lam), lam
    raise ValueError(f"unknown estimator {estimator!r}; expected scm, prls or svt")


@dataclass(frozen=True)
class PredictorModel:
    """``v_t ~ W [v_{t-p+1}; ...; v_{t-1}]`` with ``W = Sigma_21 pinv(Sigma_11)``."""

    p: int
    q: int
    W: NDArray[np.float64]
    lambda_used: float | None = None
    pinv_tol: float = 1e-10

    def __post_init__(self) -> None:
        W = np.asarray(self.W, dtype=np.float64)
        if W.shape != (self.q, self.q * (self.p - 1)):
            raise ValueError(f"W must be {self.q}x{self.q * (self.p - 1)}, got {W.shape}")
        if not np.all(np.isfinite(W)):
            raise ValueError("W contains NaN or Inf")
        object.__setattr__(self, "W", W)

    def to_dict(self) -> dict:
        return {"p": self.p, "q": self.q, "W": self.W.tolist(),
                "lambda_used": self.lambda_used, "pinv_tol": self.pinv_tol}

    @classmethod
    def from_dict(cls, d: dict) -> PredictorModel:
        try:
            return cls(int(d["p"]), int(d["q"]), np.array(d["W"], dtype=np.float64),
                       d.get("lambda_used"), float(d.get("pinv_tol", 1e-10)))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed predictor model: {exc}") from None


def fit_predictor(
    Sigma_hat: ArrayLike, p: int, q: int, pinv_tol: float = 1e-10, lambda_used: float | None = None
) -> PredictorModel:
    """Partition ``Sigma_hat`` into past (leading ``q(p-1)`` block) and target (last ``q``)."""
    S = as_matrix(Sigma_hat, "Sigma_hat")
    if p < 2 or q < 1:
        raise ValueError(f"need p >= 2 and q >= 1, got p={p}, q={q}")
    if S.shape != (p * q, p * q):
        raise ValueError(f"Sigma_hat must be {p * q}x{p * q}, got {S.shape}")
    if np.max(np.abs(S - S.T)) > 1e-8 * max(1.0, float(np.max(np.abs(S)))):
        raise ValueError("Sigma_hat must be symmetric")
    k = q * (p - 1)
    W = S[k:, :k] @ pseudo_inverse(S[:k, :k], tol=pinv_tol)
    return PredictorModel(p=p, q=q, W=W, lambda_used=lambda_used, pinv_tol=pinv_tol)


def predict_series(
    model: PredictorModel, velocity: ArrayLike
) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Sliding one-step predictions; returns ``(pred, valid)``.

    Row ``t`` uses rows ``t-p+1 .. t-1`` (0-based). The first ``p - 1`` rows
    lack full history: they are zero and ``valid`` is False there.
    """
    V = as_matrix(velocity, "velocity")
    T, q = V.shape
    if q != model.q:
        raise ValueError(f"velocity has {q} stations, model expects {model.q}")
    p = model.p
    if T < p:
        raise ValueError(f"need at least p={p} rows, got {T}")
    # history[j] = rows j .. j+p-2 flattened, predicting row j + p - 1
    hist = np.lib.stride_tricks.sliding_window_view(V[:-1], (p - 1, q))[:, 0]
    hist = hist.reshape(T - p + 1, (p - 1) * q)
    pred = np.zeros_like(V)
    pred[p - 1:] = hist @ model.W.T
    valid = np.zeros(T, dtype=bool)
    valid[p - 1:] = True
    return pred, valid


def rmse_by_station(pred: ArrayLike, truth: ArrayLike, skip: int) -> NDArray[np.float64]:
    """Per-column RMSE over rows ``skip`` onwards."""
    P = as_matrix(pred, "pred")
    Y = as_matrix(truth, "truth")
    if P.shape != Y.shape:
        raise ValueError(f"shape mismatch {P.shape} vs {Y.shape}")
    if not 0 <= skip < P.shape[0]:
        raise ValueError(f"skip must lie in [0, {P.shape[0]}), got {skip}")
    return np.sqrt(np.mean((P[skip:] - Y[skip:]) ** 2, axis=0))


def mean_db_improvement(rmse_ref: ArrayLike, rmse_est: ArrayLike) -> float:
    """Mean over stations of ``20 log10(rmse_ref / rmse_est)``."""
    a = np.asarray(rmse_ref, dtype=np.float64)
    b = np.asarray(rmse_est, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("RMSE vectors must be non-empty and of equal length")
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("RMSE values must be positive")
    return float(np.mean(20.0 * np.log10(a / b)))


@dataclass(frozen=True)
class TuneResult:
    best_C: float
    curve: tuple[tuple[float, float], ...]  # (C, mean training RMSE); NaN marks a failure


def _default_estimator(rule: LambdaRule) -> str:
    return "svt" if rule.kind == "svt_lounici" else "prls"


def tune_lambda_velocity(
    velocity: ArrayLike,
    p: int,
    rule: LambdaRule,
    C_grid: Sequence[float],
    *,
    estimator: str | None = None,
    threads: int = 1,
) -> TuneResult:
    """Grid search of ``C`` by mean one-step training RMSE; ties go to the smallest ``C``."""
    if len(C_grid) == 0:
        raise ValueError("C_grid must not be empty")
    V = as_matrix(velocity, "velocity")
    est = estimator or _default_estimator(rule)
    samples = windowize(V, p)

    def score(C: float) -> float:
        try:
            Sigma, lam = estimate_covariance(samples, est, rule.with_C(C))
            model = fit_predictor(Sigma, p, samples.q, lambda_used=lam)
            pred, _ = predict_series(model, V)
            return float(np.mean(rmse_by_station(pred, V, p - 1)))
        except (np.linalg.LinAlgError, ValueError):
            return math.nan

    grid = [float(C) for C in C_grid]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(score, grid))
    else:
        scores = [score(C) for C in grid]
    curve = tuple(zip(grid, scores))
    finite = [(s, C) for C, s in curve if math.isfinite(s)]
    if not finite:
        raise ValueError("every C in the grid failed")
    return TuneResult(best_C=min(finite)[1], curve=curve)


def tune_lambda(
    train: WindPanel,
    p: int,
    rule: LambdaRule,
    C_grid: Sequence[float],
    *,
    degree: int = 14,
    estimator: str | None = None,
    threads: int = 1,
) -> TuneResult:
    """:func:`tune_lambda_velocity` on the detrended training panel."""
    velocity, _ = detrend(train, degree)
    return tune_lambda_velocity(velocity, p, rule, C_grid, estimator=estimator, threads=threads)
