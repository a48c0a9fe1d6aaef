"""Command-line entry point.

Every subcommand takes ``--config`` (default: the bundled example
experiment), ``--out`` (created if absent) and repeatable
``--override section.field=value`` applied after the file is parsed.

Exit codes: 0 success, 2 configuration error, 3 persistency-of-excitation
gate failure, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cm, fds, harness, metrics, serialize
from .excitation import build_S
from .harmonics import (HarmonicData, RegressorRankError, build_regressor, load_harmonics,
                        save_harmonics)
from .model import SimulationDivergence

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_CONFIG", "EXIT_PE", "EXIT_NUMERIC"]

EXIT_OK, EXIT_CONFIG, EXIT_PE, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("cmsid")


class _Failure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config(args) -> harness.ExperimentConfig:
    return harness.load_config(args.config, args.override)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _harmonics_for_run(cfg: harness.ExperimentConfig, run: int = 0) -> HarmonicData:
    """Exact harmonics when noise-free, else regression on run ``run``'s noisy samples."""
    if not cfg.noisy and cfg.noiseless_source == "analytic":
        return harness.noiseless_harmonics(cfg)
    data = harness.simulate_records(cfg)
    var = harness._noise_variance(cfg, data)
    clean = np.concatenate([data.u, data.y], axis=-1)
    noisy = harness.add_noise(clean, var, cfg.seed, run).reshape(-1, clean.shape[-1])
    reg = build_regressor(data.flat("v"), cfg.pipeline.L_e, cfg.max_cond)
    blocks = reg.solve(data.flat("v"), noisy)
    m = cfg.system.m
    return HarmonicData([b[:m] for b in blocks], [b[m:] for b in blocks], reg.condition, reg.samples)


def _load_models(path) -> dict:
    doc = json.loads(Path(path).read_text())
    return {k: cm.IdentifiedModel.from_dict(v) for k, v in doc["models"].items()}


def cmd_simulate(args) -> int:
    cfg = _config(args)
    data = harness.simulate_records(cfg)
    out = _out(args)
    arrays = {"t": data.t, "v": data.v, "u": data.u, "y": data.y}
    if cfg.noisy:
        var = harness._noise_variance(cfg, data)
        clean = np.concatenate([data.u, data.y], axis=-1)
        noisy = harness.add_noise(clean, var, cfg.seed, args.run)
        arrays["u_noisy"], arrays["y_noisy"] = noisy[..., : cfg.system.m], noisy[..., cfg.system.m :]
    np.savez(out / "simulation.npz", **arrays)
    print(f"{data.t.size} samples x {data.v.shape[1]} records -> {out / 'simulation.npz'}")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _config(args)
    hd = _harmonics_for_run(cfg, args.run)
    path = _out(args) / "harmonics.json"
    save_harmonics(hd, path)
    print(f"harmonics up to degree {hd.order} (regressor condition {hd.condition:.3g}) -> {path}")
    return EXIT_OK


def _identify(cfg, hd) -> dict:
    return cm.identify(hd, build_S(cfg.excitation), cfg.pipeline, methods=cfg.methods)


def cmd_identify(args) -> int:
    cfg = _config(args)
    hd = load_harmonics(args.harmonics) if args.harmonics else _harmonics_for_run(cfg, args.run)
    models = _identify(cfg, hd)
    path = _out(args) / "identified.json"
    serialize.dump({"models": {k: m.to_dict() for k, m in models.items()}}, path)
    for k, m in models.items():
        print(f"method {k}: n={m.n}, n1c={m.n1c}, eig(A)={np.round(np.linalg.eigvals(m.A), 6).tolist()}")
    print(f"-> {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    models = _load_models(args.model)
    out = _out(args)
    errors, aligned = {}, {}
    for k, m in models.items():
        errors[k], aligned[f"model-{k}"] = harness.evaluate_model(cfg.system, m, cfg.hinf_grid)
    serialize.dump({"error_ratios": errors}, out / "errors.json")
    harness.write_bode(cfg.system, aligned, out / "bode", cfg.bode_grid)
    for k, e in errors.items():
        print(f"method {k}: " + ", ".join(f"{n}={v:.3e}" for n, v in e.items()))
    return EXIT_OK


def _print_table(result) -> None:
    print(result.table.format())


def cmd_montecarlo(args) -> int:
    cfg = _config(args)
    out = _out(args)
    try:
        result = harness.run_experiment(cfg, out, noiseless=not args.skip_noiseless)
    except harness.ExperimentError as err:
        table = out / "error_table.csv"
        if table.exists():
            print(table.read_text())
        raise _Failure(EXIT_NUMERIC, f"monte carlo: {err}") from err
    _print_table(result)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _config(args)
    if args.model:
        models = _load_models(args.model)
    else:
        hd = harness.noiseless_harmonics(cfg)
        models = _identify(cfg, hd)
    aligned = {f"model-{k}": metrics.cf_align(cfg.system.C, cfg.system.A, m.C, m.A, m.B, m.F20)
               for k, m in models.items()}
    val = cfg.validation
    res = harness.validation_run(
        cfg.system, aligned, duration=float(val.get("duration", 50.0)),
        input_std=float(val.get("input_std", 0.05)), seed=int(val.get("seed", cfg.seed)),
        dt=cfg.sample_interval, dt_int=cfg.dt_int,
        out_path=_out(args) / "validation" / "validation.csv")
    serialize.dump({"rms": res["rms"], "diverged": res["diverged"]},
                   _out(args) / "validation" / "summary.json")
    for label, rms in res["rms"].items():
        print(f"{label}: output RMS deviation {rms:.3e}")
    for label in res["diverged"]:
        print(f"{label}: diverged")
    return EXIT_NUMERIC if res["diverged"] else EXIT_OK


def cmd_demo(args) -> int:
    cfg = _config(args)
    out = _out(args)
    print(f"example system, {cfg.runs} noisy runs, {cfg.samples} samples, "
          f"{'SNR %g dB' % cfg.snr_db if cfg.snr_db is not None else 'variance %g' % cfg.variance}")
    try:
        result = harness.run_experiment(cfg, out)
    except harness.ExperimentError as err:
        doc = json.loads((out / "error_table.json").read_text()) if (out / "error_table.json").exists() else None
        if doc is not None:
            print(harness.ErrorTable(doc["entries"]).format())
        raise _Failure(EXIT_NUMERIC, f"noisy experiment: {err}") from err
    _print_table(result)
    print(f"outputs -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmsid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="experiment JSON (default: bundled example)")
        p.add_argument("--out", default="results", help="output directory")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, value parsed as JSON (repeatable)")
        p.set_defaults(func=func)
        return p

    add("simulate", cmd_simulate, "simulate the excitation records").add_argument(
        "--run", type=int, default=0, help="noise realisation to store")
    add("extract", cmd_extract, "estimate harmonic coefficients").add_argument(
        "--run", type=int, default=0, help="noise realisation to use")
    p = add("identify", cmd_identify, "run the identification pipeline")
    p.add_argument("--harmonics", default=None, help="harmonics JSON from 'extract'")
    p.add_argument("--run", type=int, default=0, help="noise realisation to use")
    add("evaluate", cmd_evaluate, "error ratios and Bode data of identified models").add_argument(
        "--model", required=True, help="identified.json from 'identify'")
    add("montecarlo", cmd_montecarlo, "Monte-Carlo experiment and error table").add_argument(
        "--skip-noiseless", action="store_true", help="omit the noise-free column")
    add("validate", cmd_validate, "white-noise validation run").add_argument(
        "--model", default=None, help="identified.json (default: identify from exact harmonics)")
    add("demo", cmd_demo, "noise-free and noisy experiments on the bundled example")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _Failure as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except (harness.ConfigError, KeyError, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except cm.PEError as err:
        print(f"error: PE gate failed at {err.stage} (condition number {err.condition:.3g})",
              file=sys.stderr)
        return EXIT_PE
    except (fds.FDSError, RegressorRankError, SimulationDivergence, metrics.AlignmentError,
            np.linalg.LinAlgError, ValueError) as err:
        print(f"error: numerical failure ({type(err).__name__}): {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
