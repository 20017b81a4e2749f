"""Command-line entry point: ``snnbp COMMAND [--config FILE] [--set KEY=VALUE ...]``.

Configuration files are INI documents with the sections ``[run]``,
``[problem]``, ``[optimizer]`` and ``[study]``; ``--set section.key=value``
overrides are applied after the file.  Some defaults depend on the command
(see ``docs/config.example.ini``).  Every run writes ``config.ini`` (the
fully resolved configuration) and ``manifest.json`` next to its CSV
reports; either file can be passed back as ``--config`` to rerun.
"""

from __future__ import annotations

import argparse
import configparser
import json
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .io import atomic_writer

COMMANDS = (
    "lq-convergence-n",
    "lq-convergence-k",
    "gradient-decay",
    "funcapprox-1d",
    "funcapprox-8d",
    "gradient-check",
    "derivative-check",
)


class ConfigError(ValueError):
    """Bad configuration value; the message names the key path."""


def _int_list(text):
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int(text):
    v = float(text) if isinstance(text, str) and ("e" in text.lower() or "." in text) else text
    if float(v) != int(float(v)):
        raise ValueError(f"not an integer: {text!r}")
    return int(float(v))


def _choice(*options):
    def parse(text):
        t = str(text).strip().lower()
        if t not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return t

    return parse


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    check: object = None
    help: str = ""
    per_command: dict = field(default_factory=dict)

    def default_for(self, command):
        return self.per_command.get(command, self.default)


_SNN8 = "funcapprox-8d"

SCHEMA = {
    "run": {
        "seed": Key(_int, 0, lambda v: 0 <= v < 2**64, "master seed of every random stream (unsigned 64-bit)"),
        "threads": Key(_int, 1, _positive, "worker processes for repeat-parallel studies"),
        "plots": Key(_bool, True, None, "write SVG figures next to the CSV files"),
        "output": Key(str, "snnbp-out", None, "output directory"),
    },
    "problem": {
        "kind": Key(_choice("lq", "snn", "both"), "lq", None, "gradient-check: lq or snn; derivative-check: lq, snn or both",
                    {"derivative-check": "both"}),
        "sigma": Key(float, 0.5, _positive, "LQ diffusion coefficient"),
        "T": Key(float, 1.0, _positive, "LQ horizon (the closed form needs T = 1)"),
        "N": Key(_int, 10, _positive, "LQ grid steps for gradient-check"),
        "layers": Key(_int, 8, _positive, "SNN layers", {_SNN8: 15, "gradient-check": 4, "derivative-check": 4}),
        "neurons": Key(_int, 4, _positive, "SNN neurons per layer", {_SNN8: 40}),
        "n_sig": Key(_int, 0, _nonneg, "sigmoid units per layer (0 = neurons)"),
        "h": Key(float, 1.0, _positive, "SNN layer step"),
        "activation": Key(_choice("sigmoid", "relu"), "sigmoid", None, "SNN activation"),
        "diffusion_floor": Key(float, 0.01, _positive, "lower bound of the SNN noise scale"),
        "reg": Key(float, 1e-4, _nonneg, "ridge weight of the running cost"),
        "n_data": Key(_int, 10_000, _positive, "1-D dataset size"),
        "data_noise": Key(float, 0.05, _nonneg, "standard deviation of the target noise"),
        "points_per_dim": Key(_int, 6, lambda v: v >= 2, "8-D mesh points per axis"),
    },
    "optimizer": {
        "schedule": Key(_choice("harmonic", "constant"), "harmonic", None, "learning-rate schedule"),
        "theta": Key(float, 2.0, _positive, "harmonic numerator",
                     {"funcapprox-1d": 1000.0, _SNN8: 1000.0, "gradient-decay": 200.0}),
        "M": Key(float, 3.0, _positive, "harmonic offset",
                 {"funcapprox-1d": 10_000.0, _SNN8: 10_000.0, "gradient-decay": 2000.0}),
        "eta": Key(float, 0.01, _positive, "constant learning rate"),
        "batch": Key(_int, 1, _positive, "SGD mini-batch size", {"lq-convergence-k": 64}),
        "K": Key(_int, 200_000, _nonneg, "SGD iterations (SNN commands)",
                 {"funcapprox-1d": 2_000_000, _SNN8: 3_000_000}),
        "noise_init": Key(float, 0.05, _positive, "initial SNN noise scale"),
        "diagnostics_every": Key(_int, 0, _nonneg, "trace checkpoint spacing (0 = first and last only)",
                                 {"gradient-decay": 20_000}),
        "oracle_M": Key(_int, 0, _nonneg, "samples per oracle gradient estimate at checkpoints",
                        {"gradient-decay": 20_000}),
    },
    "study": {
        "N_list": Key(_int_list, (20, 30, 40, 50, 60, 70, 80, 90, 100), _positive, "grid sizes of the N sweep"),
        "kappa": Key(float, 0.2, _nonneg, "K = round(kappa N^2) in the N sweep"),
        "repeats": Key(_int, 50, _positive, "independent SGD runs per row", {"lq-convergence-k": 20}),
        "N": Key(_int, 60, _positive, "grid size of the K sweep"),
        "K_list": Key(_int_list, (200, 2000, 4000, 8000, 16000), _nonneg, "iteration counts of the K sweep"),
        "grid_points": Key(_int, 101, lambda v: v >= 2, "evaluation points per axis", {_SNN8: 21}),
        "band_M": Key(_int, 400, lambda v: v >= 2, "forward passes per evaluation point"),
        "samples": Key(_int, 100_000, _positive, "gradient-check Monte-Carlo samples"),
        "eps": Key(float, 1e-4, _positive, "gradient-check finite-difference step"),
        "trials": Key(_int, 100, _positive, "derivative-check random points"),
        "tol_lq": Key(float, 1e-6, _positive, "derivative-check tolerance for LQ"),
        "tol_snn": Key(float, 1e-4, _positive, "derivative-check tolerance for the SNN"),
    },
}


@dataclass
class RunConfig:
    command: str
    values: dict

    def __getitem__(self, path):
        section, key = path.split(".", 1)
        return self.values[section][key]

    @property
    def output_dir(self) -> Path:
        return Path(self["run.output"])

    @property
    def emit_plots(self) -> bool:
        return self["run.plots"]

    @property
    def seed(self) -> int:
        return self["run.seed"]

    def to_ini(self) -> str:
        lines = [f"# resolved configuration for: snnbp {self.command}"]
        for section, keys in self.values.items():
            lines.append(f"\n[{section}]")
            for k, v in keys.items():
                lines.append(f"{k} = {_show(v)}")
        return "\n".join(lines) + "\n"


def _show(v):
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _apply(values, command, section, key, raw):
    path = f"{section}.{key}"
    if section not in SCHEMA:
        raise ConfigError(f"{path}: unknown section '{section}'")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{path}: unknown key")
    spec = SCHEMA[section][key]
    try:
        v = spec.parse(raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from None
    if spec.check is not None:
        items = v if isinstance(v, tuple) else (v,)
        if not all(spec.check(x) for x in items):
            raise ConfigError(f"{path}: value {raw!r} violates its constraint ({spec.help})")
    values[section][key] = v


def parse_config(command: str, path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``section.key=value`` overrides.

    ``path`` is an INI file or a ``manifest.json`` written by a previous run,
    whose echoed configuration is replayed.
    """
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    values = {s: {k: spec.default_for(command) for k, spec in keys.items()} for s, keys in SCHEMA.items()}
    if path is not None and str(path).endswith(".json"):
        for section, key, raw in _manifest_items(path, command):
            _apply(values, command, section, key, raw)
    elif path is not None:
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as err:
            raise ConfigError(f"{path}: {err.strerror}") from None
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from None
        for section in cp.sections():
            for key, raw in cp.items(section):
                _apply(values, command, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _apply(values, command, section, key, raw.strip())
    cfg = RunConfig(command, values)
    _cross_check(cfg)
    return cfg


def _manifest_items(path, command):
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except OSError as err:
        raise ConfigError(f"{path}: {err.strerror}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not a JSON manifest ({err})") from None
    if not isinstance(manifest, dict) or not isinstance(manifest.get("config"), dict):
        raise ConfigError(f"{path}: manifest has no 'config' table")
    if manifest.get("command") != command:
        raise ConfigError(f"{path}: manifest is for {manifest.get('command')!r}, not {command!r}")
    for section, keys in manifest["config"].items():
        if not isinstance(keys, dict):
            raise ConfigError(f"{path}: config section {section!r} is not a table")
        for key, v in keys.items():
            raw = ", ".join(str(x) for x in v) if isinstance(v, list) else _show(v)
            yield section, key, raw


def _cross_check(cfg):
    uses_lq = cfg.command.startswith("lq-") or (
        cfg.command in ("gradient-check", "derivative-check") and cfg["problem.kind"] in ("lq", "both")
    )
    if uses_lq and cfg["problem.T"] != 1.0:
        raise ConfigError("problem.T: the LQ closed form is defined for T = 1 only")
    if cfg.command == "gradient-check" and cfg["problem.kind"] == "both":
        raise ConfigError("problem.kind: gradient-check takes lq or snn")
    if cfg.command == "funcapprox-8d" and cfg["problem.neurons"] < 8:
        raise ConfigError("problem.neurons: the 8-D study needs at least 8 neurons")


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def _schedule(cfg):
    from .optimizer import Constant, Harmonic

    if cfg["optimizer.schedule"] == "constant":
        return Constant(cfg["optimizer.eta"])
    return Harmonic(cfg["optimizer.theta"], cfg["optimizer.M"])


def _arch(cfg, d_in=1):
    from .problems import SnnArch

    return SnnArch(
        L=cfg["problem.neurons"], N_layers=cfg["problem.layers"], n_sig=cfg["problem.n_sig"] or None,
        d_in=d_in, h=cfg["problem.h"], activation=cfg["problem.activation"],
    )


def _fa_config(cfg):
    from .experiments import FuncApproxConfig

    return FuncApproxConfig(
        theta=cfg["optimizer.theta"], M=cfg["optimizer.M"], batch=cfg["optimizer.batch"],
        n_data=cfg["problem.n_data"], points_per_dim=cfg["problem.points_per_dim"],
        data_noise=cfg["problem.data_noise"], diffusion_floor=cfg["problem.diffusion_floor"],
        reg=cfg["problem.reg"], noise_init=cfg["optimizer.noise_init"], grid_points=cfg["study.grid_points"],
        band_M=cfg["study.band_M"], diagnostics_every=cfg["optimizer.diagnostics_every"],
        oracle_M=cfg["optimizer.oracle_M"], seed=cfg.seed,
    )


def _snn_1d_problem(cfg, arch):
    from .problems import make_dataset_1d, make_snn_problem

    data = make_dataset_1d(cfg["problem.n_data"], cfg["problem.data_noise"], seed=cfg.seed)
    return make_snn_problem(arch, data, cfg["problem.diffusion_floor"], cfg["problem.reg"])


class _Outputs:
    def __init__(self, root: Path, plots: bool):
        self.root, self.plots = root, plots
        self.files = []
        self.summary = {}

    def path(self, name):
        p = self.root / name
        self.files.append(name)
        return p


def _run_convergence(cfg, out, which):
    from . import plots
    from .experiments import LqStudyConfig, run_lq_convergence_in_K, run_lq_convergence_in_N, write_convergence_csv
    from .optimizer import save_control

    if which == "N":
        study = LqStudyConfig(
            sigma=cfg["problem.sigma"], T=cfg["problem.T"], N_list=cfg["study.N_list"], kappa=cfg["study.kappa"],
            repeats=cfg["study.repeats"], schedule=_schedule(cfg), batch=cfg["optimizer.batch"], seed=cfg.seed,
        )
        rep = run_lq_convergence_in_N(study, workers=cfg["run.threads"])
        name = "convergence_n"
    else:
        rep = run_lq_convergence_in_K(
            cfg["study.N"], cfg["study.K_list"], cfg["study.repeats"], _schedule(cfg), cfg.seed,
            batch=cfg["optimizer.batch"], sigma=cfg["problem.sigma"], T=cfg["problem.T"], workers=cfg["run.threads"],
        )
        name = "convergence_k"
    write_convergence_csv(rep, out.path(f"{name}.csv"))
    if rep.final_control is not None:
        save_control(out.path("control.ctrl"), rep.final_control)
    out.summary.update(slope=rep.slope, intercept=rep.intercept, diverged=rep.diverged)
    if which == "K":
        out.summary.update(plateau_K=rep.plateau_K, per_doubling=[float(v) for v in rep.per_doubling])
    if out.plots:
        x = [getattr(r, which) for r in rep.rows]
        plots.loglog_fit(out.path(f"{name}.svg"), x, [r.rmse for r in rep.rows], rep.slope, rep.intercept,
                         which, "RMSE", f"LQ convergence in {which}")
    return 0


def _run_decay(cfg, out):
    from . import plots
    from .experiments import run_gradient_decay
    from .optimizer import SgdConfig, save_control
    from .problems import initial_control

    arch = _arch(cfg)
    spec = _snn_1d_problem(cfg, arch)
    if cfg["optimizer.oracle_M"] <= 0:
        raise ConfigError("optimizer.oracle_M: gradient-decay needs oracle_M > 0")
    sgd = SgdConfig(
        K=cfg["optimizer.K"], B=cfg["optimizer.batch"], schedule=_schedule(cfg), seed=cfg.seed,
        diagnostics_every=cfg["optimizer.diagnostics_every"], oracle_M=cfg["optimizer.oracle_M"],
    )
    u0 = initial_control(spec, arch.grid(), seed=cfg.seed, noise_init=cfg["optimizer.noise_init"])
    rep = run_gradient_decay(spec, sgd, u0)
    rep.trace.to_csv(out.path("trace.csv"))
    save_control(out.path("control.ctrl"), rep.control)
    out.summary.update(ratio=rep.ratio)
    if out.plots:
        plots.trace(out.path("trace.svg"), rep.trace.column("k"), rep.trace.column("grad_norm"),
                    "oracle gradient norm", "Gradient-norm decay")
    return 0


def _run_funcapprox(cfg, out, dim):
    from . import plots
    from .experiments import run_funcapprox_1d, run_funcapprox_8d, write_bands_csv
    from .optimizer import save_control

    fa = _fa_config(cfg)
    if dim == 1:
        res = run_funcapprox_1d(_arch(cfg, 1), cfg["optimizer.K"], fa)
    else:
        res = run_funcapprox_8d(_arch(cfg, 8), cfg["optimizer.K"], fa)
    res.trace.to_csv(out.path("trace.csv"))
    save_control(out.path("control.ctrl"), res.control)
    views = {}
    for name, view in res.views.items():
        fname = "bands.csv" if dim == 1 else f"bands_{name}.csv"
        write_bands_csv(view, out.path(fname))
        views[name] = {"rmse": view.rmse, "band_error": view.band_error, "interior_half_width": view.interior_half_width}
        if out.plots and (dim == 1 or name.startswith("axis_")):
            axis = 0 if dim == 1 else int(name.split("_")[1]) - 1
            plots.mean_band(out.path(fname.replace(".csv", ".svg")), view.points[:, axis], view.mean, view.half_width,
                            view.truth_mean, view.truth_half_width, f"x_{axis + 1}", f"Mean and 95% band ({name})")
    out.summary.update(views=views)
    return 0


def _run_gradient_check(cfg, out):
    import csv

    from .core import ControlPath, make_grid
    from .problems import LqParams, initial_control, make_lq_problem
    from .solver import estimate_full_gradient, finite_difference_gradient

    if cfg["problem.kind"] == "lq":
        spec = make_lq_problem(LqParams(sigma=cfg["problem.sigma"], T=cfg["problem.T"]))
        grid = make_grid(cfg["problem.T"], cfg["problem.N"])
        u = ControlPath(grid, np.full((grid.N, spec.p), 0.5))
    else:
        arch = _arch(cfg)
        spec = _snn_1d_problem(cfg, arch)
        grid = arch.grid()
        u = initial_control(spec, grid, seed=cfg.seed, noise_init=cfg["optimizer.noise_init"])
    M = cfg["study.samples"]
    est = estimate_full_gradient(spec, u, M, cfg.seed)
    fd = finite_difference_gradient(spec, u, M, cfg["study.eps"], cfg.seed)
    se = np.sqrt(est.stderr**2 + fd.stderr**2)
    tol = np.maximum(5 * se, 2e-3)
    diff = np.abs(est.values - fd.values)
    ok = diff <= tol
    with atomic_writer(out.path("gradient_check.csv")) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "j", "estimate", "estimate_se", "oracle", "oracle_se", "abs_diff", "tol", "ok"])
        for n in range(grid.N):
            for j in range(spec.p):
                w.writerow([n, j, repr(float(est.values[n, j])), repr(float(est.stderr[n, j])),
                            repr(float(fd.values[n, j])), repr(float(fd.stderr[n, j])),
                            repr(float(diff[n, j])), repr(float(tol[n, j])), int(ok[n, j])])
    out.summary.update(max_ratio=float(np.max(diff / tol)), failures=int((~ok).sum()))
    return 0 if ok.all() else 1


def _run_derivative_check(cfg, out):
    import csv

    from .problems import LqParams, check_problem_derivatives, make_lq_problem

    kinds = ("lq", "snn") if cfg["problem.kind"] == "both" else (cfg["problem.kind"],)
    rows, status = [], 0
    for kind in kinds:
        if kind == "lq":
            spec, tol = make_lq_problem(LqParams(sigma=cfg["problem.sigma"])), cfg["study.tol_lq"]
        else:
            spec, tol = _snn_1d_problem(cfg, _arch(cfg)), cfg["study.tol_snn"]
        worst = check_problem_derivatives(spec, cfg["study.trials"], tol, seed=cfg.seed, raise_on_failure=False)
        for name, err in worst.items():
            rows.append((kind, name, err, tol, err <= tol))
            status |= int(err > tol)
    with atomic_writer(out.path("derivative_check.csv")) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["problem", "callback", "error", "tol", "ok"])
        for kind, name, err, tol, ok in rows:
            w.writerow([kind, name, repr(float(err)), repr(float(tol)), int(ok)])
    out.summary.update(worst={f"{k}.{n}": e for k, n, e, _, _ in rows})
    return status


def _versions():
    import numba

    return {"snnbp": __version__, "python": platform.python_version(), "numpy": np.__version__, "numba": numba.__version__}


def dispatch(cfg: RunConfig) -> int:
    """Run the configured command; returns the process exit status."""
    root = cfg.output_dir
    root.mkdir(parents=True, exist_ok=True)
    out = _Outputs(root, cfg.emit_plots)
    with atomic_writer(root / "config.ini") as fh:
        fh.write(cfg.to_ini())
    manifest = {"command": cfg.command, "seed": cfg.seed, "config": _jsonable(cfg.values), "versions": _versions()}
    t0 = time.perf_counter()
    try:
        if cfg.command in ("lq-convergence-n", "lq-convergence-k"):
            status = _run_convergence(cfg, out, "N" if cfg.command.endswith("-n") else "K")
        elif cfg.command == "gradient-decay":
            status = _run_decay(cfg, out)
        elif cfg.command == "funcapprox-1d":
            status = _run_funcapprox(cfg, out, 1)
        elif cfg.command == "funcapprox-8d":
            status = _run_funcapprox(cfg, out, 8)
        elif cfg.command == "gradient-check":
            status = _run_gradient_check(cfg, out)
        else:
            status = _run_derivative_check(cfg, out)
        manifest["status"] = "complete" if status == 0 else "check-failed"
    except Exception as err:  # reported in the manifest, then as the exit status
        manifest.update(status="failed", error=f"{type(err).__name__}: {err}", partial=True)
        print(f"snnbp {cfg.command}: {type(err).__name__}: {err}", file=sys.stderr)
        status = 1
    manifest["outputs"] = ["config.ini"] + out.files
    manifest["summary"] = _jsonable(out.summary)
    manifest["elapsed_seconds"] = round(time.perf_counter() - t0, 3)
    with atomic_writer(root / "manifest.json") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return status


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        return float(v) if np.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="snnbp", description="Sample-wise back-propagation experiments.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", metavar="PATH", help="INI configuration file")
    ap.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                    help="override one key, e.g. study.repeats=5 (repeatable)")
    ap.add_argument("--output", metavar="DIR", help="output directory (run.output)")
    ap.add_argument("--seed", metavar="U64", help="master seed (run.seed)")
    ap.add_argument("--threads", metavar="N", help="worker processes (run.threads)")
    ap.add_argument("--plots", dest="plots", action="store_true", default=None, help="write SVG figures")
    ap.add_argument("--no-plots", dest="plots", action="store_false", help="skip SVG figures")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    for flag, key in (("output", "run.output"), ("seed", "run.seed"), ("threads", "run.threads")):
        if getattr(args, flag) is not None:
            overrides.append(f"{key}={getattr(args, flag)}")
    if args.plots is not None:
        overrides.append(f"run.plots={args.plots}")
    try:
        cfg = parse_config(args.command, args.config, overrides)
    except ConfigError as err:
        print(f"snnbp: configuration error: {err}", file=sys.stderr)
        return 2
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
