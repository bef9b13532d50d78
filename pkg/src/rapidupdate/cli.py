"""Command-line front end: ``simulate``, ``update`` and ``report``.

Exit codes: 0 success, 2 validation error, 3 partial completion.

Configuration is an INI file with ``[paths]``, ``[synthetic]``, ``[update]``
and ``[report]`` sections; command-line flags override file values. Relative
paths in the file are resolved against the file's directory.
"""
from __future__ import annotations

import argparse
import configparser
import glob
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fileio
from .geostat import (
    MarginalShape,
    SpecError,
    SyntheticSpec,
    VariogramModel,
    demo_spec,
    make_period_plan,
    make_truth_and_prior,
    sample_observations,
)
from .grid import BlockModel, Ensemble, ErrorSpec, GridError, GridSpec
from .pipeline import (
    REPORT_CSV_HEADER,
    SCATTER_CSV_HEADER,
    PartialRunError,
    UpdateConfig,
    cumulative_mse,
    read_report_json,
    report_csv_rows,
    scatter_csv_rows,
    sequential_run,
    write_report_json,
)

log = logging.getLogger("rapidupdate")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_PARTIAL = 3

_DEFAULTS = UpdateConfig()


class ValidationError(Exception):
    pass


@dataclass
class SyntheticConfig:
    spec: SyntheticSpec
    n_real: int = 100
    n_periods: int = 5
    obs_per_period: int = 100
    relative_error: float = 0.1


@dataclass
class ReportOptions:
    timings: bool = True
    diagnostics: bool = True
    scatter: bool = True


@dataclass
class RunConfig:
    grid: Path | None = None
    prior: Path | None = None
    observations: str | None = None
    out: Path | None = None
    synthetic: SyntheticConfig | None = None
    update: UpdateConfig = field(default_factory=UpdateConfig)
    error: ErrorSpec = field(default_factory=ErrorSpec)
    report: ReportOptions = field(default_factory=ReportOptions)
    periods: tuple[int, int] | None = None

    def validate_inputs(self) -> None:
        for name in ("grid", "prior"):
            path = getattr(self, name)
            if path is None:
                raise ValidationError(f"no {name} path configured")
            if not Path(path).is_file():
                raise ValidationError(f"{name} file {path} does not exist")
        if not self.observation_files():
            raise ValidationError(f"no observation files match {self.observations!r}")

    def observation_files(self) -> list[Path]:
        if not self.observations:
            return []
        return sorted(Path(p) for p in glob.glob(str(self.observations)))


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]


def _parse_marginal(text: str) -> MarginalShape:
    parts = [p.strip() for p in text.split(":")]
    kind, nums = parts[0], [float(x) for x in parts[1:]]
    keys = ("loc", "scale", "sigma", "shift")
    return MarginalShape(kind, **dict(zip(keys, nums)))


def _section(cp: configparser.ConfigParser, name: str) -> dict[str, str]:
    return dict(cp[name]) if cp.has_section(name) else {}


def _resolve(base: Path, value: str | None) -> str | None:
    if not value:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def parse_periods(text: str) -> tuple[int, int]:
    """``"1..5"`` or ``"3"`` to an inclusive range."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
        else:
            lo = hi = int(text)
    except ValueError:
        raise ValidationError(f"bad period range {text!r}; expected a..b") from None
    if lo > hi:
        raise ValidationError(f"empty period range {text!r}")
    return lo, hi


def load_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file {path} does not exist")
    cp = configparser.ConfigParser()
    try:
        cp.read(p)
    except configparser.Error as exc:
        raise ValidationError(f"{path}: {exc}") from None
    base = p.parent
    paths = _section(cp, "paths")
    try:
        cfg.grid = Path(_resolve(base, paths["grid"])) if paths.get("grid") else None
        cfg.prior = Path(_resolve(base, paths["prior"])) if paths.get("prior") else None
        cfg.observations = _resolve(base, paths.get("observations"))
        cfg.out = Path(_resolve(base, paths["out"])) if paths.get("out") else None

        up = _section(cp, "update")
        kw: dict = {}
        if "radius_blocks" in up:
            kw["radius_blocks"] = int(up["radius_blocks"])
        if "localization_m" in up:
            kw["localization_m"] = float(up["localization_m"])
        if "assimilations" in up:
            kw["n_assimilations"] = int(up["assimilations"])
        if up.get("alphas"):
            kw["alphas"] = tuple(_floats(up["alphas"]))
        if "rbig_iterations" in up:
            kw["rbig_iterations"] = int(up["rbig_iterations"])
        if up.get("rbig_early_stop"):
            kw["rbig_early_stop"] = float(up["rbig_early_stop"])
        if "include_previous_observations" in up:
            kw["include_previous_observations"] = cp.getboolean(
                "update", "include_previous_observations")
        if up.get("factor_error_variance"):
            vals = _floats(up["factor_error_variance"])
            kw["factor_error_variance"] = vals[0] if len(vals) == 1 else tuple(vals)
        if "seed" in up:
            kw["seed"] = int(up["seed"])
        cfg.update = UpdateConfig(**kw)
        if up.get("absolute_error"):
            cfg.error = ErrorSpec(relative=None, absolute=tuple(_floats(up["absolute_error"])))
        elif up.get("relative_error"):
            cfg.error = ErrorSpec(relative=float(up["relative_error"]))
        if up.get("periods"):
            cfg.periods = parse_periods(up["periods"])

        rep = _section(cp, "report")
        cfg.report = ReportOptions(
            timings=cp.getboolean("report", "timings", fallback=True),
            diagnostics=cp.getboolean("report", "diagnostics", fallback=True),
            scatter=cp.getboolean("report", "scatter", fallback=True),
        ) if rep else ReportOptions()

        if cp.has_section("synthetic"):
            cfg.synthetic = _synthetic_from_section(_section(cp, "synthetic"))
    except (ValueError, KeyError, SpecError, GridError) as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return cfg


def _synthetic_from_section(sec: dict[str, str]) -> SyntheticConfig:
    grid = GridSpec(
        int(sec.get("nx", 32)), int(sec.get("ny", 32)), int(sec.get("nz", 1)),
        float(sec.get("dx", 10.0)), float(sec.get("dy", 10.0)), float(sec.get("dz", 4.0)),
        float(sec.get("x0", 0.0)), float(sec.get("y0", 0.0)), float(sec.get("z0", 0.0)),
    )
    seed = int(sec.get("seed", 0))
    n_vars = int(sec.get("n_vars", 3))
    spec = demo_spec(grid, n_vars, seed)
    changes: dict = {}
    if sec.get("variables"):
        changes["variable_names"] = tuple(s.strip() for s in sec["variables"].split(","))
    if sec.get("variograms"):
        changes["variograms"] = tuple(
            VariogramModel.parse(s) for s in sec["variograms"].split(";") if s.strip()
        )
    if sec.get("mixing"):
        rows = [_floats(r) for r in sec["mixing"].split(";") if r.strip()]
        try:
            changes["mixing_matrix"] = np.asarray(rows, dtype=float)
        except ValueError:
            raise SpecError("mixing matrix rows have unequal lengths") from None
    if sec.get("marginals"):
        changes["marginal_shapes"] = tuple(
            _parse_marginal(s) for s in sec["marginals"].split(";") if s.strip()
        )
    if "drillhole_spacing" in sec:
        changes["drillhole_spacing"] = int(sec["drillhole_spacing"])
    if "blend_weight" in sec:
        changes["blend_weight"] = float(sec["blend_weight"])
    if changes:
        fields = {
            "grid": spec.grid, "variograms": spec.variograms,
            "mixing_matrix": spec.mixing_matrix, "marginal_shapes": spec.marginal_shapes,
            "variable_names": spec.variable_names, "seed": spec.seed,
            "drillhole_spacing": spec.drillhole_spacing, "blend_weight": spec.blend_weight,
        }
        n = len(changes.get("variograms", spec.variograms))
        if n != spec.n_vars:
            # defaults sized for n_vars no longer fit; rebuild them for n
            d = demo_spec(grid, n, seed)
            fields.update(mixing_matrix=d.mixing_matrix, marginal_shapes=d.marginal_shapes,
                          variable_names=d.variable_names)
        fields.update(changes)
        spec = SyntheticSpec(**fields)
    return SyntheticConfig(
        spec,
        n_real=int(sec.get("n_real", 100)),
        n_periods=int(sec.get("n_periods", 5)),
        obs_per_period=int(sec.get("obs_per_period", 100)),
        relative_error=float(sec.get("relative_error", 0.1)),
    )


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out: Path, payload: dict, files: list[Path]) -> None:
    payload = dict(payload)
    payload["files"] = {str(f.relative_to(out)): sha256_file(f) for f in sorted(files)}
    (out / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _ensure_out(out: Path | None) -> Path:
    if out is None:
        raise ValidationError("no output directory given (--out or [paths] out)")
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ValidationError(f"output directory {out} is not writable: {exc}") from None
    return out


def cmd_simulate(cfg: RunConfig, seed: int | None = None) -> int:
    if cfg.synthetic is None:
        raise ValidationError("simulate needs a [synthetic] section in the config")
    syn = cfg.synthetic
    spec = syn.spec if seed is None else replace(syn.spec, seed=seed)
    out = _ensure_out(cfg.out)
    grid = spec.grid
    truth, prior = make_truth_and_prior(spec, syn.n_real)
    plan = make_period_plan(grid, syn.n_periods, syn.obs_per_period, spec.seed)
    periods = sample_observations(
        truth, grid, plan, ErrorSpec(relative=syn.relative_error), spec.seed,
        spec.variable_names,
    )
    names = list(spec.variable_names)
    files = [out / "grid.txt", out / "truth.csv", out / "prior.csv"]
    fileio.write_grid(files[0], grid)
    fileio.write_ensemble(files[1], truth[None, :, :], names)
    fileio.write_ensemble(files[2], prior.values, names)
    for obs in periods:
        path = out / f"observations_period_{obs.period:03d}.csv"
        fileio.write_observations(path, obs)
        files.append(path)
    _write_manifest(
        out,
        {
            "command": "simulate",
            "seed": spec.seed,
            "n_real": syn.n_real,
            "n_periods": syn.n_periods,
            "obs_per_period": syn.obs_per_period,
            "relative_error": syn.relative_error,
            "variables": names,
            "variograms": [str(v) for v in spec.variograms],
            "mixing_matrix": spec.mixing_matrix.tolist(),
        },
        files,
    )
    print(f"simulated {syn.n_real} realisations on {grid.shape}, "
          f"{syn.n_periods} periods -> {out}")
    return EXIT_OK


def _load_inputs(cfg: RunConfig):
    cfg.validate_inputs()
    try:
        grid = fileio.read_grid(cfg.grid)
        values, names = fileio.read_ensemble(cfg.prior)
        if values.shape[1] != grid.n_blocks:
            raise ValidationError(
                f"{cfg.prior}: {values.shape[1]} blocks but grid has {grid.n_blocks}"
            )
        model = BlockModel(grid, Ensemble(values, names), model_id=str(cfg.prior))
        periods = []
        for f in cfg.observation_files():
            for obs in fileio.read_observations(f, names, cfg.error):
                try:
                    obs.validate_for(grid)
                except GridError as exc:
                    raise ValidationError(f"{f}: period {obs.period}: {exc}") from None
                periods.append(obs)
    except (fileio.ParseError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(str(exc)) from None
    periods.sort(key=lambda o: o.period)
    keys = [o.period for o in periods]
    if len(set(keys)) != len(keys):
        raise ValidationError("the same period appears in more than one observation file")
    if cfg.periods is not None:
        lo, hi = cfg.periods
        periods = [o for o in periods if lo <= o.period <= hi]
    if not periods:
        raise ValidationError("no observation periods selected")
    return model, periods


def _write_update_outputs(out: Path, cfg: RunConfig, prior: BlockModel, model: BlockModel,
                          reports, periods, status: str) -> None:
    rep_dir = out / "reports"
    rep_dir.mkdir(exist_ok=True)
    files = []
    rows = [REPORT_CSV_HEADER]
    scatter = [SCATTER_CSV_HEADER]
    diag = ["period,iteration,factor,mean_abs_innovation,mean_abs_gain"]
    for r in reports:
        if not cfg.report.timings:
            r = replace(r, seconds={k: 0.0 for k in r.seconds})
        path = rep_dir / f"period_{r.period:03d}.json"
        write_report_json(path, r)
        files.append(path)
        rows += report_csv_rows(r)
        scatter += scatter_csv_rows(r)
        diag += [
            f"{r.period},{d['iteration']},{d['factor']},"
            f"{d['mean_abs_innovation']:.12g},{d['mean_abs_gain']:.12g}"
            for d in r.diagnostics
        ]
    targets = [(out / "run_report.csv", rows)]
    if cfg.report.scatter:
        targets.append((out / "scatter.csv", scatter))
    if cfg.report.diagnostics:
        targets.append((out / "diagnostics.csv", diag))
    for path, lines in targets:
        path.write_text("\n".join(lines) + "\n")
        files.append(path)
    done = [p for p in periods if p.period in {r.period for r in reports}]
    if done:
        cum = cumulative_mse(prior, model, done)
        (out / "cumulative.json").write_text(json.dumps(
            {**cum, "mse_reduction_pct": [None if np.isnan(v) else v for v in cum["mse_reduction_pct"]],
             "periods": [p.period for p in done]},
            indent=2, sort_keys=True) + "\n")
        files.append(out / "cumulative.json")
    ens_path = out / "updated_ensemble.csv"
    fileio.write_ensemble(ens_path, model.ensemble.values, model.variable_names)
    files.append(ens_path)
    u = cfg.update
    _write_manifest(
        out,
        {
            "command": "update",
            "status": status,
            "seed": u.seed,
            "n_assimilations": u.n_assimilations,
            "alphas": list(u.schedule.alphas),
            "radius_blocks": u.radius_blocks,
            "localization_m": u.localization_m,
            "rbig_iterations": u.rbig_iterations,
            "include_previous_observations": u.include_previous_observations,
            "periods": [r.period for r in reports],
            "timing_dependent": (
                ["run_report.csv"] + [f"reports/period_{r.period:03d}.json" for r in reports]
                if cfg.report.timings else []
            ),
        },
        files,
    )


def cmd_update(cfg: RunConfig) -> int:
    prior, periods = _load_inputs(cfg)
    out = _ensure_out(cfg.out)
    try:
        model, reports = sequential_run(prior, periods, cfg.update)
    except PartialRunError as exc:
        log.error("%s", exc)
        _write_update_outputs(out, cfg, prior, exc.model, exc.reports, periods, "partial")
        print(f"period {exc.period} failed; {len(exc.reports)} periods written to {out}",
              file=sys.stderr)
        return EXIT_PARTIAL
    _write_update_outputs(out, cfg, prior, model, reports, periods, "complete")
    for r in reports:
        print(f"period {r.period}: " + ", ".join(
            f"{v} {x:.2f}%" for v, x in zip(r.variables, r.mse_reduction_pct)))
    return EXIT_OK


def _load_reports(run_dir: Path):
    paths = sorted((run_dir / "reports").glob("period_*.json"))
    reports = []
    for p in paths:
        try:
            reports.append(read_report_json(p))
        except (json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
            raise ValidationError(f"corrupted report {p}: {exc}") from None
    return reports


def _fmt_pct(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.2f}"


def cmd_report(run_dir: Path) -> int:
    if not run_dir.is_dir():
        raise ValidationError(f"{run_dir} is not a directory")
    lines: list[str] = []
    reports = _load_reports(run_dir)
    sweep = []
    for sub in sorted(p for p in run_dir.iterdir() if p.is_dir() and p.name != "reports"):
        manifest = sub / "manifest.json"
        if not manifest.is_file():
            continue
        try:
            meta = json.loads(manifest.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"corrupted manifest {manifest}: {exc}") from None
        sub_reports = _load_reports(sub)
        if "n_assimilations" in meta and sub_reports:
            sweep.append((int(meta["n_assimilations"]), sub_reports))
    if not reports and not sweep:
        raise ValidationError(f"no reports found in {run_dir}")

    if reports:
        names = reports[0].variables
        lines.append("MSE reduction (%) per period")
        lines.append(",".join(["period", *names]))
        for r in reports:
            lines.append(",".join([str(r.period), *map(_fmt_pct, r.mse_reduction_pct)]))
        cum_path = run_dir / "cumulative.json"
        if cum_path.is_file():
            try:
                cum = json.loads(cum_path.read_text())
            except json.JSONDecodeError as exc:
                raise ValidationError(f"corrupted report {cum_path}: {exc}") from None
            lines.append("")
            lines.append("cumulative MSE reduction (%) over all periods")
            lines.append(",".join(["scope", *cum["variables"]]))
            lines.append(",".join(["all", *map(_fmt_pct, cum["mse_reduction_pct"])]))
    if sweep:
        sweep.sort(key=lambda t: t[0])
        names = sweep[0][1][0].variables
        if lines:
            lines.append("")
        lines.append(f"MSE reduction (%) in period {sweep[0][1][0].period} by number of assimilations")
        lines.append(",".join(["n_assimilations", *names]))
        for n, reps in sweep:
            lines.append(",".join([str(n), *map(_fmt_pct, reps[0].mse_reduction_pct)]))
    text = "\n".join(lines) + "\n"
    (run_dir / "summary.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="INI configuration file (default: none)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="master seed, overrides the config (default: 0)")
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="output directory, overrides [paths] out (default: none)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log progress to stderr (default: off)")

    parser = argparse.ArgumentParser(
        prog="rapidupdate", parents=[common],
        description="Rapid updating of multivariate block-model ensembles with "
                    "EnKF-MDA and RBIG.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common],
                   help="write a synthetic grid, truth, prior and observations")
    up = sub.add_parser("update", parents=[common],
                        help="sequentially update a prior ensemble with observations")
    up.add_argument("--input", default=None,
                    help="directory written by simulate; fills missing [paths] (default: none)")
    up.add_argument("--periods", default=None,
                    help="inclusive period range a..b (default: all periods)")
    up.add_argument("--assimilations", type=int, default=None,
                    help=f"number of data assimilations (default: {_DEFAULTS.n_assimilations})")
    up.add_argument("--radius-blocks", type=int, default=None,
                    help=f"neighbourhood radius in blocks (default: {_DEFAULTS.radius_blocks})")
    up.add_argument("--localization-m", type=float, default=None,
                    help=f"localisation radius in metres (default: {_DEFAULTS.localization_m:g})")
    up.add_argument("--rbig-iterations", type=int, default=None,
                    help=f"RBIG iterations (default: {_DEFAULTS.rbig_iterations})")
    up.add_argument("--no-history", action="store_true",
                    help="do not merge previous observations (default: merge them)")
    rep = sub.add_parser("report", parents=[common], help="summarise a run directory")
    rep.add_argument("run_dir", nargs="?", default=None,
                     help="run directory (default: --out)")
    return parser


def _apply_update_flags(cfg: RunConfig, args) -> None:
    if args.input:
        base = Path(args.input)
        cfg.grid = cfg.grid or base / "grid.txt"
        cfg.prior = cfg.prior or base / "prior.csv"
        cfg.observations = cfg.observations or str(base / "observations_period_*.csv")
    kw = {}
    if args.assimilations is not None:
        kw["n_assimilations"] = args.assimilations
        kw["alphas"] = None
    if args.radius_blocks is not None:
        kw["radius_blocks"] = args.radius_blocks
    if args.localization_m is not None:
        kw["localization_m"] = args.localization_m
    if args.rbig_iterations is not None:
        kw["rbig_iterations"] = args.rbig_iterations
    if args.no_history:
        kw["include_previous_observations"] = False
    if kw:
        cfg.update = replace(cfg.update, **kw)
    if args.periods:
        cfg.periods = parse_periods(args.periods)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "verbose", False):
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(getattr(args, "config", None))
        if getattr(args, "out", None):
            cfg.out = Path(args.out)
        seed = getattr(args, "seed", None)
        if args.command == "simulate":
            return cmd_simulate(cfg, seed)
        if args.command == "update":
            if seed is not None:
                cfg.update = replace(cfg.update, seed=seed)
            _apply_update_flags(cfg, args)
            return cmd_update(cfg)
        run_dir = args.run_dir or cfg.out
        if run_dir is None:
            raise ValidationError("report needs a run directory")
        return cmd_report(Path(run_dir))
    except (ValidationError, SpecError, GridError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        # config-level value errors (e.g. an invalid schedule) are validation failures
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
