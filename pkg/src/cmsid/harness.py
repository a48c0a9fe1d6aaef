"""Experiment orchestration: simulation, noise, identification and error tables.

One experiment simulates the true system once from K initial conditions of
the excitation oscillator, then, per Monte-Carlo run, adds an independent
noise realisation to the measured input and outputs, extracts the harmonic
coefficients, runs the staged identification and evaluates the error
ratios of the four compared transfer entries.

Noise seeding: channel ``c`` of run ``k`` draws from
``numpy.random.default_rng(SeedSequence(seed, spawn_key=(k, c)))``, so
adding runs never changes earlier ones.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cm, fds, metrics, serialize
from .excitation import ExcitationSpec, build_S, eval_u, eval_v, random_initial_conditions
from .harmonics import HarmonicData, RegressorRankError, analytic_harmonics, build_regressor
from .model import PolynomialSystem, SimulationDivergence, example_system, load_system, simulate

__all__ = [
    "ConfigError",
    "ExperimentError",
    "ExperimentConfig",
    "SimulatedData",
    "ErrorTable",
    "ExperimentResult",
    "default_config_dict",
    "load_config",
    "apply_overrides",
    "add_noise",
    "simulate_records",
    "noiseless_harmonics",
    "evaluate_model",
    "run_experiment",
    "validation_run",
    "model_to_system",
]

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).with_name("data")
CONDITIONS = ("noise_free", "noisy_I", "noisy_II")


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    pass


def default_config_dict() -> dict:
    return json.loads((DATA_DIR / "experiment.json").read_text())


def _set_path(doc: dict, key: str, value) -> None:
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"override '{key}': '{p}' is not a config section")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"override '{key}': unknown field '{parts[-1]}'")
    node[parts[-1]] = value


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key.path=value`` strings; values are parsed as JSON when possible."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(doc, key.strip(), value)
    return doc


def _require(doc: dict, *path):
    node = doc
    for i, p in enumerate(path):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"config lacks field '{'.'.join(path[: i + 1])}'")
        node = node[p]
    return node


@dataclass
class ExperimentConfig:
    system: PolynomialSystem
    excitation: ExcitationSpec
    variance: float
    snr_db: float | None
    sample_interval: float
    samples: int
    settle: float
    dt_int: float
    runs: int
    seed: int
    method: str
    pipeline: cm.PipelineConfig
    max_cond: float = 1e10
    noiseless_source: str = "analytic"
    bode_grid: tuple = (1e-2, 1e2, 400)
    hinf_grid: tuple = (1e-3, 1e3, 2000)
    validation: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def records(self) -> int:
        return self.excitation.initial_conditions.shape[0]

    @property
    def samples_per_record(self) -> int:
        return self.samples // self.records

    @property
    def methods(self) -> tuple:
        return ("I", "II") if self.method == "both" else (self.method,)

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "ExperimentConfig":
        base_dir = Path(base_dir or ".")
        path = _require(doc, "system").get("path")
        if path:
            p = Path(path)
            system = load_system(p if p.is_absolute() else base_dir / p)
        else:
            system = example_system()
        exc = _require(doc, "excitation")
        freqs = _require(doc, "excitation", "frequencies")
        U = {int(k): np.asarray(v, dtype=float) for k, v in _require(doc, "excitation", "U").items()}
        ic = _require(doc, "excitation", "initial_conditions")
        sigma = 2 * len(freqs) + 1
        if isinstance(ic, list):
            v0 = np.asarray(ic, dtype=float)
        else:
            v0 = random_initial_conditions(int(ic["count"]), sigma, int(ic["seed"]),
                                           float(ic["scale"]), float(ic.get("spread", 0.5)))
        try:
            spec = ExcitationSpec(np.asarray(freqs, dtype=float), U, v0)
        except ValueError as exc_err:
            raise ConfigError(f"excitation: {exc_err}") from exc_err
        if spec.m != system.m:
            raise ConfigError(f"excitation has {spec.m} inputs, system has {system.m}")
        sim = _require(doc, "simulation")
        noise = _require(doc, "noise")
        mc = _require(doc, "montecarlo")
        pipe = dict(_require(doc, "pipeline"))
        max_cond = float(pipe.pop("max_cond", 1e10))
        try:
            pcfg = cm.PipelineConfig(**{k: v for k, v in pipe.items() if k != "method"},
                                     method="I")
        except TypeError as err:
            raise ConfigError(f"pipeline: {err}") from err
        ev = doc.get("evaluation", {})
        cfg = cls(
            system=system,
            excitation=spec,
            variance=float(_require(doc, "noise", "variance")),
            snr_db=None if noise.get("snr_db") is None else float(noise["snr_db"]),
            sample_interval=float(_require(doc, "simulation", "sample_interval")),
            samples=int(_require(doc, "simulation", "samples")),
            settle=float(sim.get("settle", 15.0)),
            dt_int=float(sim.get("dt_int", 2.5e-3)),
            runs=int(_require(doc, "montecarlo", "runs")),
            seed=int(_require(doc, "seed")),
            method=str(mc.get("method", "both")),
            pipeline=pcfg,
            max_cond=max_cond,
            noiseless_source=str(ev.get("noiseless_source", "analytic")),
            bode_grid=tuple(ev.get("bode_grid", (1e-2, 1e2, 400))),
            hinf_grid=tuple(ev.get("hinf_grid", (1e-3, 1e3, 2000))),
            validation=dict(doc.get("validation", {})),
            raw=copy.deepcopy(doc),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.runs < 1:
            raise ConfigError("montecarlo.runs must be >= 1")
        if self.variance < 0:
            raise ConfigError("noise.variance must be >= 0")
        if self.method not in ("I", "II", "both"):
            raise ConfigError("montecarlo.method must be I, II or both")
        if self.samples < self.records or self.samples % self.records:
            raise ConfigError(
                f"simulation.samples={self.samples} must be a positive multiple of the "
                f"{self.records} initial conditions"
            )
        if self.noiseless_source not in ("analytic", "regression"):
            raise ConfigError("evaluation.noiseless_source must be 'analytic' or 'regression'")
        if self.sample_interval <= 0 or self.settle < 0:
            raise ConfigError("simulation.sample_interval must be > 0 and settle >= 0")

    @property
    def noisy(self) -> bool:
        return self.snr_db is not None or self.variance > 0


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Parse a config file (default: the bundled example experiment)."""
    if path is None:
        doc, base = default_config_dict(), DATA_DIR
    else:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: {err}") from err
        base = path.parent
    return ExperimentConfig.from_dict(apply_overrides(doc, overrides), base)


def add_noise(samples, variance, seed: int, run: int = 0) -> np.ndarray:
    """Add i.i.d. Gaussian noise to every channel (last axis) of ``samples``.

    ``variance`` is a scalar or one value per channel; channel ``c`` uses the
    stream ``SeedSequence(seed, spawn_key=(run, c))``.
    """
    x = np.asarray(samples, dtype=float)
    var = np.broadcast_to(np.asarray(variance, dtype=float), (x.shape[-1],))
    if np.any(var < 0):
        raise ValueError("variance must be nonnegative")
    out = x.copy()
    for c in range(x.shape[-1]):
        if var[c] == 0:
            continue
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(run, c)))
        out[..., c] += np.sqrt(var[c]) * rng.standard_normal(x.shape[:-1])
    return out


@dataclass
class SimulatedData:
    """Retained (post-transient) samples, ``(N, K, dim)`` arrays."""

    t: np.ndarray
    v: np.ndarray
    u: np.ndarray
    y: np.ndarray

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape(-1, a.shape[-1])

    def channel_power(self) -> np.ndarray:
        return np.concatenate([np.mean(self.u**2, axis=(0, 1)), np.mean(self.y**2, axis=(0, 1))])


def simulate_records(cfg: ExperimentConfig) -> SimulatedData:
    """Noise-free records after discarding ``settle`` seconds of transient."""
    spec, V0 = cfg.excitation, cfg.excitation.initial_conditions
    n_keep = cfg.samples_per_record
    t_end = cfg.settle + (n_keep - 1) * cfg.sample_interval
    x0 = np.zeros((V0.shape[0], cfg.system.n))
    traj = simulate(cfg.system, lambda t: eval_u(spec, eval_v(spec, V0, t)), x0, t_end,
                    cfg.dt_int, cfg.sample_interval)
    keep = traj.t >= cfg.settle - 1e-9
    t = traj.t[keep]
    return SimulatedData(t - t[0] + cfg.settle, eval_v(spec, V0, t), traj.u[keep], traj.y[keep])


def noiseless_harmonics(cfg: ExperimentConfig, data: SimulatedData | None = None) -> HarmonicData:
    """Exact (analytic) or regressed harmonics of the noise-free response."""
    order = cfg.pipeline.L_e
    if cfg.noiseless_source == "analytic":
        return analytic_harmonics(cfg.system, cfg.excitation, order)
    data = data or simulate_records(cfg)
    reg = build_regressor(data.flat("v"), order, cfg.max_cond)
    blocks = reg.solve(data.flat("v"), np.hstack([data.flat("u"), data.flat("y")]))
    m = cfg.system.m
    return HarmonicData([b[:m] for b in blocks], [b[m:] for b in blocks], reg.condition, reg.samples)


def _true_transfers(sys: PolynomialSystem) -> dict:
    return metrics.entry_transfers(sys.C, sys.A, sys.B, sys.f_block(2, 0))


def evaluate_model(sys: PolynomialSystem, model: cm.IdentifiedModel, hinf_grid=(1e-3, 1e3, 2000)):
    """Align ``model`` to the true frame and return ``(errors, aligned)``."""
    aligned = metrics.cf_align(sys.C, sys.A, model.C, model.A, model.B, model.F20)
    true = _true_transfers(sys)
    est = metrics.entry_transfers(aligned.C, aligned.A, aligned.B, aligned.F20)
    kw = dict(w_min=hinf_grid[0], w_max=hinf_grid[1], points=int(hinf_grid[2]))
    errors = {name: metrics.error_ratio(true[name], est[name], **kw) for name in true}
    return errors, aligned


def _stage_of(err: Exception) -> str:
    if isinstance(err, cm.PEError):
        return err.stage
    if isinstance(err, metrics.AlignmentError):
        return "evaluation (frame alignment)"
    return type(err).__name__


@dataclass
class ErrorTable:
    """Mean / std / run count per compared entry and experimental condition."""

    cells: dict  # cells[entry][condition] = {"mean", "std", "runs", "failed"}

    @classmethod
    def from_errors(cls, per_condition: dict, failures: dict) -> "ErrorTable":
        cells = {}
        for entry in metrics.ENTRIES:
            cells[entry] = {}
            for cond in CONDITIONS:
                if cond not in per_condition:
                    continue
                vals = np.array([e[entry] for e in per_condition[cond]], dtype=float)
                cells[entry][cond] = {
                    "mean": float(vals.mean()) if vals.size else float("nan"),
                    "std": float(vals.std()) if vals.size else float("nan"),
                    "runs": int(vals.size),
                    "failed": int(failures.get(cond, 0)),
                }
        return cls(cells)

    def mean(self, entry: str, condition: str) -> float:
        return self.cells[entry][condition]["mean"]

    def to_dict(self) -> dict:
        return {"entries": self.cells}

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        conds = [c for c in CONDITIONS if any(c in row for row in self.cells.values())]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            head = ["entry"]
            for c in conds:
                head += [f"{c}_mean", f"{c}_std", f"{c}_runs", f"{c}_failed"]
            w.writerow(head)
            for entry, row in self.cells.items():
                line = [entry]
                for c in conds:
                    cell = row.get(c, {})
                    line += [format(cell.get("mean", float("nan")), ".17g"),
                             format(cell.get("std", float("nan")), ".17g"),
                             cell.get("runs", 0), cell.get("failed", 0)]
                w.writerow(line)

    def format(self) -> str:
        conds = [c for c in CONDITIONS if any(c in row for row in self.cells.values())]
        lines = [f"{'entry':<8}" + "".join(f"{c:>24}" for c in conds)]
        for entry, row in self.cells.items():
            cells = []
            for c in conds:
                cell = row.get(c)
                cells.append(f"{cell['mean']:>14.3e} ({cell['runs']}/{cell['runs'] + cell['failed']})"
                             if cell else " " * 24)
            lines.append(f"{entry:<8}" + "".join(f"{s:>24}" for s in cells))
        return "\n".join(lines)


@dataclass
class ExperimentResult:
    table: ErrorTable
    noiseless: dict  # method -> IdentifiedModel
    runs: list  # per run: {"run", "models", "errors", "failures"}
    true_system: PolynomialSystem
    info: dict = field(default_factory=dict)

    def first_model(self, method: str):
        for run in self.runs:
            if method in run["models"]:
                return run["models"][method]
        return None


def _identify(hd, S, cfg: ExperimentConfig):
    return cm.identify(hd, S, cfg.pipeline, methods=cfg.methods)


def _noise_variance(cfg: ExperimentConfig, data: SimulatedData) -> np.ndarray:
    channels = cfg.system.m + cfg.system.p
    if cfg.snr_db is not None:
        return data.channel_power() * 10.0 ** (-cfg.snr_db / 10.0)
    return np.full(channels, cfg.variance)


def _noisy_runs(cfg: ExperimentConfig, S: np.ndarray, info: dict) -> list:
    """Simulate once, then extract and identify per noise realisation."""
    sys = cfg.system
    data = simulate_records(cfg)
    v = data.flat("v")
    try:
        reg = build_regressor(v, cfg.pipeline.L_e, cfg.max_cond)
    except RegressorRankError as err:
        raise ExperimentError(f"harmonic extraction: {err}") from err
    info["regressor_condition"] = reg.condition
    var = _noise_variance(cfg, data)
    info["noise_variance"] = var.tolist()
    clean = np.concatenate([data.u, data.y], axis=-1)
    ch = clean.shape[-1]
    # every run's targets are solved together (one factorisation, two passes)
    targets = np.concatenate(
        [add_noise(clean, var, cfg.seed, run).reshape(-1, ch) for run in range(cfg.runs)], axis=1)
    coef = reg.solve(v, targets)
    del targets
    runs = []
    for run in range(cfg.runs):
        blocks = [b[run * ch : (run + 1) * ch] for b in coef]
        hd = HarmonicData([b[: sys.m] for b in blocks], [b[sys.m :] for b in blocks],
                          reg.condition, reg.samples)
        record = {"run": run, "models": {}, "errors": {}, "failures": {}}
        try:
            models = _identify(hd, S, cfg)
        except (cm.PEError, fds.FDSError, np.linalg.LinAlgError, ValueError) as err:
            models = {}
            for method in cfg.methods:
                record["failures"][method] = {"stage": _stage_of(err), "message": str(err)}
        for method, model in models.items():
            record["models"][method] = model
            try:
                record["errors"][method] = evaluate_model(sys, model, cfg.hinf_grid)[0]
            except (metrics.AlignmentError, ValueError, np.linalg.LinAlgError) as err:
                record["failures"][method] = {"stage": _stage_of(err), "message": str(err)}
        log.info("run %d: %s", run, record["errors"] or record["failures"])
        runs.append(record)
    return runs


def run_experiment(cfg: ExperimentConfig, out_dir=None, noiseless: bool = True,
                   bode: bool = True, validation: bool = True) -> ExperimentResult:
    """Noise-free reference plus ``cfg.runs`` noisy Monte-Carlo runs.

    Per-run failures are recorded and excluded from the means; the experiment
    fails (:class:`ExperimentError`, raised after all outputs are written)
    when more than half of the noisy runs fail for some method.
    """
    t0 = time.perf_counter()
    sys, S = cfg.system, build_S(cfg.excitation)
    per_condition, failures = {}, {}
    noiseless_models = {}
    info = {}

    if noiseless:
        hd0 = noiseless_harmonics(cfg)
        models = cm.identify(hd0, S, cfg.pipeline, methods=("I", "II"))
        noiseless_models = models
        errs, _ = evaluate_model(sys, models["I"], cfg.hinf_grid)
        per_condition["noise_free"] = [errs]

    runs = []
    if not cfg.noisy and noiseless and cfg.noiseless_source == "analytic":
        # zero noise: every run sees the same exact harmonics
        models = {k: noiseless_models[k] for k in cfg.methods}
        errs = {k: evaluate_model(sys, m, cfg.hinf_grid)[0] for k, m in models.items()}
        runs = [{"run": run, "models": models, "errors": errs, "failures": {}}
                for run in range(cfg.runs)]
    else:
        runs = _noisy_runs(cfg, S, info)
    for method in cfg.methods:
        cond = f"noisy_{method}"
        per_condition[cond] = [r["errors"][method] for r in runs if method in r["errors"]]
        failures[cond] = sum(method not in r["errors"] for r in runs)
    table = ErrorTable.from_errors(per_condition, failures)
    info["elapsed_s"] = time.perf_counter() - t0
    result = ExperimentResult(table, noiseless_models, runs, sys, info)

    if out_dir is not None:
        write_results(result, cfg, out_dir, bode=bode, validation=validation)
    bad = [c for c, k in failures.items() if k * 2 > cfg.runs]
    if bad:
        raise ExperimentError(
            f"more than half of the noisy runs failed ({', '.join(f'{c}: {failures[c]}/{cfg.runs}' for c in bad)})"
        )
    return result


def _run_doc(run: dict) -> dict:
    return {
        "run": run["run"],
        "models": {k: m.to_dict() for k, m in run["models"].items()},
        "errors": run["errors"],
        "failures": run["failures"],
    }


def write_results(result: ExperimentResult, cfg: ExperimentConfig, out_dir,
                  bode: bool = True, validation: bool = True) -> None:
    """``error_table.{json,csv}``, ``runs/run_<k>.json``, ``bode/*.csv``, ``validation/*.csv``.

    Content files carry no timestamps, so identical inputs give identical files.
    """
    out = Path(out_dir)
    serialize.dump(result.table.to_dict(), out / "error_table.json")
    result.table.to_csv(out / "error_table.csv")
    for run in result.runs:
        serialize.dump(_run_doc(run), out / "runs" / f"run_{run['run']}.json")
    if result.noiseless:
        serialize.dump({k: m.to_dict() for k, m in result.noiseless.items()},
                       out / "runs" / "noise_free.json")
    models = _comparison_models(result)
    if bode:
        write_bode(result.true_system, models, out / "bode", cfg.bode_grid)
    if validation and models:
        val = cfg.validation
        validation_run(result.true_system, models, duration=float(val.get("duration", 50.0)),
                       input_std=float(val.get("input_std", 0.05)),
                       seed=int(val.get("seed", cfg.seed)), dt=cfg.sample_interval,
                       dt_int=cfg.dt_int, out_path=out / "validation" / "validation.csv")


def _comparison_models(result: ExperimentResult) -> dict:
    """Label -> aligned model: noiseless (Method I) and the first good noisy run per method."""
    sys = result.true_system
    models = {}
    if "I" in result.noiseless:
        models["noiseless"] = result.noiseless["I"]
    for method in ("I", "II"):
        for run in result.runs:
            if method in run["errors"]:
                models[f"noisy-{method}"] = run["models"][method]
                break
    out = {}
    for label, model in models.items():
        try:
            out[label] = metrics.cf_align(sys.C, sys.A, model.C, model.A, model.B, model.F20)
        except metrics.AlignmentError:
            continue
    return out


def write_bode(sys: PolynomialSystem, aligned: dict, out_dir, grid=(1e-2, 1e2, 400)) -> None:
    """``<entry>_<variant>.csv`` for the true system and every aligned model."""
    omega = np.logspace(np.log10(grid[0]), np.log10(grid[1]), int(grid[2]))
    variants = {"true": _true_transfers(sys)}
    for label, al in aligned.items():
        variants[label] = metrics.entry_transfers(al.C, al.A, al.B, al.F20)
    for name in metrics.ENTRIES:
        for label, tms in variants.items():
            metrics.write_bode_csv(Path(out_dir) / f"{name}_{label}.csv",
                                   {label: metrics.bode_data(tms[name], omega)})


def model_to_system(aligned, template: PolynomialSystem | None = None) -> PolynomialSystem:
    """Polynomial system with ``A, B, C, F_{2,0}`` from an (aligned) model."""
    A, B, C, F20 = aligned.A, aligned.B, aligned.C, aligned.F20
    n, m, p = A.shape[0], B.shape[1], C.shape[0]
    return PolynomialSystem(n, m, p, 2, {(1, 0): A, (0, 1): B, (2, 0): F20}, {(1, 0): C})


def validation_run(sys: PolynomialSystem, models: dict, duration: float = 50.0,
                   input_std: float = 0.05, seed: int = 0, dt: float = 0.01,
                   dt_int: float = 2.5e-3, out_path=None) -> dict:
    """Simulate the true system and every model under one white-noise input.

    The input is a zero-order-hold Gaussian sequence (std ``input_std``,
    interval ``dt``).  Returns ``{"t", "u", "true", label: y | None}`` and the
    RMS deviation from the true output per model; a diverging model maps
    to ``None``.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2**31 - 1,)))
    steps = int(round(duration / dt))
    seq = input_std * rng.standard_normal((steps + 1, sys.m))

    def u_fun(t):
        return seq[min(int(t / dt + 1e-9), steps)]

    def run(system):
        traj = simulate(system, u_fun, np.zeros(system.n), duration, dt_int, dt)
        return traj.t, traj.u, traj.y

    t, u, y_true = run(sys)
    out = {"t": t, "u": u, "true": y_true, "rms": {}, "diverged": []}
    for label, model in models.items():
        system = model if isinstance(model, PolynomialSystem) else model_to_system(model)
        try:
            _, _, y = run(system)
        except SimulationDivergence:
            out[label] = None
            out["diverged"].append(label)
            continue
        out[label] = y
        out["rms"][label] = float(np.sqrt(np.mean((y - y_true) ** 2)))
    if out_path is not None:
        _write_validation_csv(out, list(models), out_path)
    return out


def _write_validation_csv(res: dict, labels, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    p = res["true"].shape[1]
    series = ["true"] + [l for l in labels if res.get(l) is not None]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "u"] + [f"{s}_y{j + 1}" for s in series for j in range(p)])
        for k in range(res["t"].size):
            row = [repr(float(res["t"][k])), repr(float(res["u"][k, 0]))]
            row += [repr(float(res[s][k, j])) for s in series for j in range(p)]
            w.writerow(row)
