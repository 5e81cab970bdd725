"""Command-line front end.

Subcommands: ``simulate``, ``bounds {opnorm,spectrum,oracle}`` and
``wind {detrend,train,predict,evaluate}``. Every run writes its outputs and
a ``manifest.json`` under ``--out``. Exit codes: 0 success, 1 runtime
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import io
import json
import sys
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .bounds import (
    linear_fit_r2,
    opnorm_growth_experiment,
    oracle_inequality_check,
    permuted_error_norm,
    toeplitz_spectrum_bounds,
)
from .estimators import LambdaRule, prls, scm
from .experiments import ConfigError, ExperimentConfig, mse_vs_n, resolve_threads
from .synthgen import (
    RNG_NAME,
    RngSeed,
    Var1Spec,
    random_kp_sum_covariance,
    random_stable_matrix,
    sample_gaussian,
)
from .windpipe import (
    DetrendState,
    PanelFormatError,
    PredictorModel,
    WindPanel,
    apply_detrend,
    detrend,
    estimate_covariance,
    fit_predictor,
    load_panel,
    load_statlib_wind,
    mean_db_improvement,
    predict_series,
    rmse_by_station,
    tune_lambda_velocity,
    windowize,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

BUNDLED_CONFIGS = ("sim_a", "sim_b", "smoke", "opnorm_growth", "toeplitz_spectrum", "oracle_check")


class UsageError(Exception):
    """Bad flags, files or configuration (exit code 2)."""


@dataclass(frozen=True)
class RunManifest:
    command: str
    config: dict
    seed: int | None
    version: str
    wall_clock_s: float
    outputs: dict[str, str]  # file name -> sha256
    started: str

    def to_dict(self) -> dict:
        return {"command": self.command, "config": self.config, "seed": self.seed,
                "version": self.version, "rng": RNG_NAME, "started": self.started,
                "wall_clock_s": self.wall_clock_s, "outputs": self.outputs}


class _Outputs:
    """Collects files written under the output directory."""

    def __init__(self, root: Path) -> None:
        self.root = root
        self.files: dict[str, str] = {}

    def write_text(self, name: str, text: str) -> None:
        data = text.encode()
        (self.root / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def write_csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        self.write_text(name, buf.getvalue())

    def write_json(self, name: str, obj) -> None:
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# -- config loading ---------------------------------------------------------


def _load_json(path_or_name: str) -> dict:
    path = Path(path_or_name)
    if path.exists():
        text = path.read_text()
    elif path_or_name in BUNDLED_CONFIGS:
        text = resources.files("kronocov.configs").joinpath(f"{path_or_name}.json").read_text()
    else:
        raise UsageError(f"config file not found: {path_or_name}")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path_or_name}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path_or_name}: top level must be an object")
    return cfg


def _validate(cfg: dict, schema: dict, source: str) -> None:
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as err:
        path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
        raise UsageError(f"{source}: {path}: {err.message}") from None


_OPNORM_SCHEMA = {
    "type": "object",
    "properties": {
        "q": {"type": "integer", "minimum": 1},
        "n": {"type": "integer", "minimum": 1},
        "p_grid": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "trials": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
    },
    "required": ["q", "n", "p_grid", "trials", "seed"],
    "additionalProperties": False,
}

_SPECTRUM_SCHEMA = {
    "type": "object",
    "properties": {
        "m": {"type": "integer", "minimum": 1},
        "N": {"type": "integer", "minimum": 0},
        "norm": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0},
    },
    "required": ["m", "N", "norm", "seed"],
    "additionalProperties": False,
}

_ORACLE_SCHEMA = {
    "type": "object",
    "properties": {
        "p": {"type": "integer", "minimum": 1},
        "q": {"type": "integer", "minimum": 1},
        "r": {"type": "integer", "minimum": 1},
        "n_grid": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "trials": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "lambda_factor": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["p", "q", "r", "n_grid", "trials", "seed"],
    "additionalProperties": False,
}


# -- commands ---------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace, out: _Outputs) -> tuple[dict, int | None]:
    raw = _load_json(args.config)
    try:
        cfg = ExperimentConfig.from_dict(raw)
    except ConfigError as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    table = mse_vs_n(cfg, threads=args.threads)
    out.write_text("mse_table.csv", table.to_csv())
    if table.scan_curves:
        rows = [(label, n, C, m) for (label, n), curve in sorted(table.scan_curves.items())
                for C, m in curve]
        out.write_csv("scan_curves.csv", ("estimator", "n", "C", "pilot_mean_mse"), rows)
    return cfg.to_dict(), cfg.seed


def cmd_bounds_opnorm(args: argparse.Namespace, out: _Outputs) -> tuple[dict, int | None]:
    cfg = _load_json(args.config)
    _validate(cfg, _OPNORM_SCHEMA, args.config)
    res = opnorm_growth_experiment(cfg["q"], cfg["n"], cfg["p_grid"], cfg["trials"],
                                   RngSeed(cfg["seed"]))
    rows = [(int(p), m, res.a, res.b, res.r_squared) for p, m in zip(res.p_grid, res.means)]
    out.write_csv("opnorm.csv", ("p", "mean_sq_opnorm", "a", "b", "r_squared"), rows)
    return cfg, cfg["seed"]


def _spectrum_spec(cfg: dict) -> Var1Spec:
    m = cfg["m"]
    if cfg["norm"] == 0:
        Phi = np.zeros((m, m))
    else:
        Phi = random_stable_matrix(m, cfg["norm"], RngSeed(cfg["seed"]))
    return Var1Spec(Phi, cfg["N"])


def cmd_bounds_spectrum(args: argparse.Namespace, out: _Outputs) -> tuple[dict, int | None]:
    cfg = _load_json(args.config)
    _validate(cfg, _SPECTRUM_SCHEMA, args.config)
    rep = toeplitz_spectrum_bounds(_spectrum_spec(cfg))
    rows = [(int(k), e, fo, fg, gt) for k, e, fo, fg, gt in
            zip(rep.k, rep.exact, rep.frob_opt, rep.frob_gs, rep.gs_tail)]
    out.write_csv("spectrum.csv", ("k", "exact", "frob_opt", "frob_gs", "gs_tail"), rows)
    pos = rep.gs_tail > 0
    r2 = linear_fit_r2(rep.k[pos], np.log(rep.gs_tail[pos]))[2] if pos.sum() >= 2 else None
    out.write_json("spectrum_summary.json", {"c_prime": rep.c_prime, "log_gs_tail_r2": r2})
    return cfg, cfg["seed"]


def cmd_bounds_oracle(args: argparse.Namespace, out: _Outputs) -> tuple[dict, int | None]:
    cfg = _load_json(args.config)
    _validate(cfg, _ORACLE_SCHEMA, args.config)
    p, q, r = cfg["p"], cfg["q"], cfg["r"]
    if r > min(p * p, q * q):
        raise UsageError(f"{args.config}: $.r: must not exceed min(p^2, q^2)")
    factor = cfg.get("lambda_factor", 2.0)
    seed = RngSeed(cfg["seed"])
    Sigma0, _ = random_kp_sum_covariance(p, q, r, seed.child(0))
    rows = []
    for i, n in enumerate(cfg["n_grid"]):
        for k in range(cfg["trials"]):
            S = scm(sample_gaussian(Sigma0, n, seed.child(1, i, k), p=p, q=q))
            lam = factor * permuted_error_norm(S, Sigma0, p, q)
            fit = prls(S, lam, p, q)
            chk = oracle_inequality_check(fit.covariance, Sigma0, lam, p, q, S_hat=S)
            rows.append((n, k, lam, chk.delta_norm, chk.lhs, chk.rhs, chk.hypothesis_ok, chk.holds))
    out.write_csv("oracle.csv", ("n", "trial", "lambda", "delta_norm", "lhs", "rhs",
                                 "hypothesis_ok", "holds"), rows)
    return cfg, cfg["seed"]


def _parse_range(text: str | None, flag: str) -> tuple[int, int] | None:
    if text is None:
        return None
    parts = text.replace(":", "-").split("-")
    try:
        years = [int(x) for x in parts]
    except ValueError:
        raise UsageError(f"{flag}: expected YEAR or FIRST-LAST, got {text!r}") from None
    if len(years) == 1:
        years *= 2
    if len(years) != 2 or years[0] > years[1]:
        raise UsageError(f"{flag}: expected YEAR or FIRST-LAST, got {text!r}")
    return years[0], years[1]


def _parse_grid(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        grid = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--tune-grid: expected comma-separated numbers, got {text!r}") from None
    if not grid or any(not c > 0 for c in grid):
        raise UsageError("--tune-grid: values must be positive")
    return grid


def _load_wind(args: argparse.Namespace) -> WindPanel:
    path = Path(args.panel)
    if not path.exists():
        raise UsageError(f"panel file not found: {path}")
    try:
        if args.panel_format == "statlib":
            return load_statlib_wind(path)
        return load_panel(path)
    except PanelFormatError as exc:
        raise UsageError(str(exc)) from None


def _subset(panel: WindPanel, rng: tuple[int, int] | None, flag: str) -> WindPanel:
    if rng is None:
        return panel
    try:
        return panel.select_years(*rng)
    except ValueError as exc:
        raise UsageError(f"{flag}: {exc}") from None


_RULES = {"prls": "prls_practical", "svt": "svt_lounici"}


def _train(panel: WindPanel, args: argparse.Namespace, estimator: str,
           C: float | None) -> tuple[PredictorModel, DetrendState, dict]:
    velocity, state = detrend(panel, args.degree)
    samples = windowize(velocity, args.p)
    info: dict = {"estimator": estimator, "n_train": samples.n, "d": samples.d}
    rule = None
    if estimator != "scm":
        grid = _parse_grid(args.tune_grid)
        base = LambdaRule(_RULES[estimator])
        if grid is not None:
            tuned = tune_lambda_velocity(velocity, args.p, base, grid, estimator=estimator,
                                         threads=resolve_threads(args.threads))
            C = tuned.best_C
            info["tune_curve"] = [list(pt) for pt in tuned.curve]
        if C is None:
            raise UsageError(f"{estimator} needs --lambda-C or --tune-grid")
        rule = base.with_C(C)
        info["C"] = C
    Sigma, lam = estimate_covariance(samples, estimator, rule)
    model = fit_predictor(Sigma, args.p, samples.q, lambda_used=lam)
    return model, state, info


def cmd_wind_detrend(args: argparse.Namespace, out: _Outputs) -> tuple[dict, int | None]:
    panel = _subset(_load_wind(args), _parse_range(args.train_range, "--train-range"),
                    "--train-range")
    velocity, state = detrend(panel, args.degree)
    rows = [(d.isoformat(), *row) for d, row in zip(panel.dates, velocity)]
    out.write_csv("velocity.csv", ("date", *panel.stations), rows)
    out.write_json("detrend_state.json", state.to_dict())
    return {"panel": str(args.panel), "degree": args.degree, "train_range": args.train_range}, None


def cmd_wind_train(args: argparse.Namespace, out: _Outputs) -> tuple[dict, int | None]:
    panel = _subset(_load_wind(args), _parse_range(args.train_range, "--train-range"),
                    "--train-range")
    model, state, info = _train(panel, args, args.estimator, args.lambda_C)
    out.write_json("model.json", {"model": model.to_dict(), "detrend_state": state.to_dict(),
                                  "stations": list(panel.stations), **info})
    return {"panel": str(args.panel), "p": args.p, "degree": args.degree,
            "train_range": args.train_range, **info}, None


def cmd_wind_predict(args: argparse.Namespace, out: _Outputs) -> tuple[dict, int | None]:
    panel = _subset(_load_wind(args), _parse_range(args.test_range, "--test-range"),
                    "--test-range")
    try:
        blob = json.loads(Path(args.model).read_text())
        model = PredictorModel.from_dict(blob["model"])
        state = DetrendState.from_dict(blob["detrend_state"])
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise UsageError(f"--model: cannot read {args.model}: {exc}") from None
    try:
        velocity = apply_detrend(panel, state)
        pred, valid = predict_series(model, velocity)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = [(d.isoformat(), bool(v), *row) for d, v, row in zip(panel.dates, valid, pred)]
    out.write_csv("predictions.csv", ("date", "valid", *panel.stations), rows)
    return {"panel": str(args.panel), "model": str(args.model), "test_range": args.test_range}, None


def cmd_wind_evaluate(args: argparse.Namespace, out: _Outputs) -> tuple[dict, int | None]:
    panel = _load_wind(args)
    train = _subset(panel, _parse_range(args.train_range, "--train-range"), "--train-range")
    test = _subset(panel, _parse_range(args.test_range, "--test-range"), "--test-range")
    estimators = [e.strip() for e in args.estimators.split(",") if e.strip()]
    bad = [e for e in estimators if e not in ("scm", "prls", "svt")]
    if bad or not estimators:
        raise UsageError(f"--estimators: unknown entries {bad}")
    if "scm" not in estimators:
        estimators.insert(0, "scm")
    C_for = {"prls": args.prls_C if args.prls_C is not None else args.lambda_C,
             "svt": args.svt_C if args.svt_C is not None else args.lambda_C}
    rmse: dict[str, np.ndarray] = {}
    summary: dict = {"estimators": {}}
    for est in estimators:
        model, state, info = _train(train, args, est, C_for.get(est))
        velocity = apply_detrend(test, state)
        pred, _ = predict_series(model, velocity)
        rmse[est] = rmse_by_station(pred, velocity, args.p - 1)
        summary["estimators"][est] = {**info, "mean_rmse": float(np.mean(rmse[est]))}
    for est in estimators:
        summary["estimators"][est]["db_vs_scm"] = mean_db_improvement(rmse["scm"], rmse[est])
    rows = [(s, *(rmse[e][i] for e in estimators)) for i, s in enumerate(panel.stations)]
    out.write_csv("rmse.csv", ("station", *estimators), rows)
    out.write_json("summary.json", summary)
    return {"panel": str(args.panel), "p": args.p, "degree": args.degree,
            "train_range": args.train_range, "test_range": args.test_range,
            "estimators": estimators, "tune_grid": args.tune_grid,
            "lambda_C": args.lambda_C, "prls_C": args.prls_C, "svt_C": args.svt_C}, None


# -- parser -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 on usage errors already
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kronocov", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--out", required=True, help="output directory (created if missing)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap (default: KRONOCOV_THREADS, else all cores)")

    sim = sub.add_parser("simulate", help="normalized-MSE Monte Carlo")
    sim.add_argument("--config", required=True,
                     help=f"JSON config path or bundled name ({', '.join(BUNDLED_CONFIGS[:3])})")
    common(sim)
    sim.set_defaults(func=cmd_simulate, name="simulate")

    bnd = sub.add_parser("bounds", help="bound validations")
    bsub = bnd.add_subparsers(dest="bounds_command", required=True, parser_class=_Parser)
    for name, func in (("opnorm", cmd_bounds_opnorm), ("spectrum", cmd_bounds_spectrum),
                       ("oracle", cmd_bounds_oracle)):
        b = bsub.add_parser(name)
        b.add_argument("--config", required=True)
        common(b)
        b.set_defaults(func=func, name=f"bounds {name}")

    wind = sub.add_parser("wind", help="wind-speed prediction pipeline")
    wsub = wind.add_subparsers(dest="wind_command", required=True, parser_class=_Parser)

    def wind_common(w: argparse.ArgumentParser) -> None:
        w.add_argument("--panel", required=True)
        w.add_argument("--panel-format", choices=("csv", "statlib"), default="csv")
        w.add_argument("--degree", type=int, default=14, help="seasonal polynomial degree")
        common(w)

    def fit_flags(w: argparse.ArgumentParser) -> None:
        w.add_argument("--p", type=int, default=8, help="window length")
        w.add_argument("--lambda-C", dest="lambda_C", type=float, default=None)
        w.add_argument("--tune-grid", default=None, help="comma-separated C values")
        w.add_argument("--train-range", default=None, help="YEAR or FIRST-LAST")

    w = wsub.add_parser("detrend")
    wind_common(w)
    w.add_argument("--train-range", default=None)
    w.set_defaults(func=cmd_wind_detrend, name="wind detrend")

    w = wsub.add_parser("train")
    wind_common(w)
    fit_flags(w)
    w.add_argument("--estimator", choices=("scm", "prls", "svt"), default="prls")
    w.set_defaults(func=cmd_wind_train, name="wind train")

    w = wsub.add_parser("predict")
    wind_common(w)
    w.add_argument("--model", required=True, help="model.json from 'wind train'")
    w.add_argument("--test-range", default=None)
    w.set_defaults(func=cmd_wind_predict, name="wind predict")

    w = wsub.add_parser("evaluate")
    wind_common(w)
    fit_flags(w)
    w.add_argument("--test-range", default=None)
    w.add_argument("--estimators", default="scm,prls,svt")
    w.add_argument("--prls-C", dest="prls_C", type=float, default=None)
    w.add_argument("--svt-C", dest="svt_C", type=float, default=None)
    w.set_defaults(func=cmd_wind_evaluate, name="wind evaluate")
    return parser


def _check_args(args: argparse.Namespace) -> None:
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be positive")
    if getattr(args, "p", 8) < 2:
        raise UsageError("--p must be at least 2")
    if getattr(args, "degree", 0) < 0:
        raise UsageError("--degree must be non-negative")
    for flag in ("lambda_C", "prls_C", "svt_C"):
        v = getattr(args, flag, None)
        if v is not None and not v > 0:
            raise UsageError(f"--{flag.replace('_', '-')} must be positive")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    func: Callable = args.func
    started = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    try:
        _check_args(args)
        try:
            resolve_threads(args.threads)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        root = Path(args.out)
        root.mkdir(parents=True, exist_ok=True)
        out = _Outputs(root)
        config, seed = func(args, out)
    except UsageError as exc:
        print(f"kronocov: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, ArithmeticError, np.linalg.LinAlgError, OSError) as exc:
        print(f"kronocov: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest = RunManifest(
        command=args.name, config=config, seed=seed, version=__version__,
        wall_clock_s=round(time.perf_counter() - t0, 3), outputs=dict(out.files), started=started,
    )
    (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
