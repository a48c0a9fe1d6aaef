"""Polynomial nonlinear systems: representation, checks and simulation.

The vector field and output map are

    f(x, u) = sum_{1 <= i+r <= L} F[i, r] (x^[i] ⊗ u^[r])
    h(x, u) = sum_{1 <= i+r <= L} H[i, r] (x^[i] ⊗ u^[r])

with ``x^[0] = u^[0] = 1``.  Blocks that are not stored are zero.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .kron import reduced_length, reduced_power

__all__ = [
    "PolynomialSystem",
    "AssumptionReport",
    "Trajectory",
    "SimulationDivergence",
    "block_width",
    "eval_f",
    "eval_h",
    "check_assumptions",
    "controllability_rank",
    "observability_rank",
    "simulate",
    "load_system",
    "save_system",
    "example_system",
]

RANK_TOL = 1e-9


class SimulationDivergence(RuntimeError):
    def __init__(self, t: float):
        super().__init__(f"state became non-finite at t={t:.6g} s")
        self.t = t


def block_width(n: int, m: int, i: int, r: int) -> int:
    """Column count s_{i,r} = C(n+i-1, i) C(m+r-1, r)."""
    return reduced_length(n, i) * reduced_length(m, r)


@dataclass
class PolynomialSystem:
    n: int
    m: int
    p: int
    L: int
    F: dict = field(default_factory=dict)
    H: dict = field(default_factory=dict)

    def __post_init__(self):
        self.F = {k: np.atleast_2d(np.asarray(v, dtype=float)) for k, v in self.F.items()}
        self.H = {k: np.atleast_2d(np.asarray(v, dtype=float)) for k, v in self.H.items()}
        for name, blocks, rows in (("F", self.F, self.n), ("H", self.H, self.p)):
            for (i, r), mat in blocks.items():
                if i < 0 or r < 0 or not 1 <= i + r <= self.L:
                    raise ValueError(f"{name}[{i},{r}] outside 1 <= i+r <= L={self.L}")
                width = block_width(self.n, self.m, i, r)
                if mat.shape != (rows, width):
                    raise ValueError(
                        f"{name}[{i},{r}] has shape {mat.shape}, expected {(rows, width)}"
                    )

    def f_block(self, i: int, r: int) -> np.ndarray:
        return self.F.get((i, r), np.zeros((self.n, block_width(self.n, self.m, i, r))))

    def h_block(self, i: int, r: int) -> np.ndarray:
        return self.H.get((i, r), np.zeros((self.p, block_width(self.n, self.m, i, r))))

    @property
    def A(self) -> np.ndarray:
        return self.f_block(1, 0)

    @property
    def B(self) -> np.ndarray:
        return self.f_block(0, 1)

    @property
    def C(self) -> np.ndarray:
        return self.h_block(1, 0)

    @property
    def D(self) -> np.ndarray:
        return self.h_block(0, 1)

    def F_degree(self, l: int) -> np.ndarray:
        """Compacted ``[F_{l,0}, F_{l-1,1}, ..., F_{0,l}]``."""
        return np.hstack([self.f_block(l - r, r) for r in range(l + 1)])


def _apply(blocks: Mapping, rows: int, x, u) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    out = np.zeros(batch + (rows,))
    for (i, r), mat in blocks.items():
        if not mat.any():
            continue
        xi = reduced_power(x, i)
        ur = reduced_power(u, r)
        xi = np.broadcast_to(xi, batch + xi.shape[-1:])
        ur = np.broadcast_to(ur, batch + ur.shape[-1:])
        term = (xi[..., :, None] * ur[..., None, :]).reshape(*batch, -1)
        out += term @ mat.T
    return out


def _check_dims(sys: PolynomialSystem, x, u):
    if np.shape(x)[-1] != sys.n:
        raise ValueError(f"state has length {np.shape(x)[-1]}, system has n={sys.n}")
    if np.shape(u)[-1] != sys.m:
        raise ValueError(f"input has length {np.shape(u)[-1]}, system has m={sys.m}")


def eval_f(sys: PolynomialSystem, x, u) -> np.ndarray:
    _check_dims(sys, x, u)
    return _apply(sys.F, sys.n, x, u)


def eval_h(sys: PolynomialSystem, x, u) -> np.ndarray:
    _check_dims(sys, x, u)
    return _apply(sys.H, sys.p, x, u)


def controllability_rank(A, B, tol: float = RANK_TOL) -> int:
    A = np.asarray(A, dtype=float)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    K = np.hstack(blocks)
    s = np.linalg.svd(K, compute_uv=False)
    return int(np.sum(s > tol * max(1.0, s[0]))) if s.size else 0


def observability_rank(C, A, tol: float = RANK_TOL) -> int:
    return controllability_rank(np.asarray(A).T, np.asarray(C).T, tol)


@dataclass
class AssumptionReport:
    hurwitz: bool
    spectral_abscissa: float
    observable: bool
    observability_rank: int
    extended_controllable: bool
    controllability_rank: int
    linear_controllability_rank: int
    n_upper_bound_ok: bool


def check_assumptions(sys: PolynomialSystem, n_bar: int | None = None) -> AssumptionReport:
    """Evaluate the standing assumptions (Hurwitz A, observable (C, A),
    controllable (A, [B, F_2, ..., F_L]), n <= n_bar)."""
    abscissa = float(np.max(np.linalg.eigvals(sys.A).real))
    obs = observability_rank(sys.C, sys.A)
    inputs = np.hstack([sys.B] + [sys.F_degree(l) for l in range(2, sys.L + 1)])
    ctrb = controllability_rank(sys.A, inputs)
    return AssumptionReport(
        hurwitz=abscissa < -RANK_TOL,
        spectral_abscissa=abscissa,
        observable=obs == sys.n,
        observability_rank=obs,
        extended_controllable=ctrb == sys.n,
        controllability_rank=ctrb,
        linear_controllability_rank=controllability_rank(sys.A, sys.B),
        n_upper_bound_ok=True if n_bar is None else sys.n <= n_bar,
    )


@dataclass
class Trajectory:
    """Sampled simulation output; arrays are time-major ``(N, [K,] dim)``."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray


def simulate(
    sys: PolynomialSystem,
    u_fun: Callable[[float], np.ndarray],
    x0,
    t_end: float,
    dt_int: float = 1e-3,
    dt_sample: float = 1e-2,
) -> Trajectory:
    """Fixed-step RK4 integration of ``dx/dt = f(x, u(t))``.

    ``x0`` may carry a leading batch axis ``(K, n)``; ``u_fun(t)`` must then
    return ``(K, m)``.  Samples are taken at ``0, dt_sample, ..., t_end``.
    """
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    ratio = dt_sample / dt_int
    sub = int(round(ratio))
    if sub < 1 or abs(ratio - sub) > 1e-9 * max(1.0, ratio):
        raise ValueError(f"dt_int={dt_int} does not divide dt_sample={dt_sample}")
    n_samples = int(round(t_end / dt_sample)) + 1

    x = np.array(x0, dtype=float)
    ts = np.arange(n_samples) * dt_sample
    xs = np.empty((n_samples,) + x.shape)
    u0 = np.asarray(u_fun(0.0), dtype=float)
    us = np.empty((n_samples,) + np.broadcast_shapes(u0.shape, x.shape[:-1] + (sys.m,)))
    xs[0] = x
    us[0] = u0
    h = dt_int
    u_now = u0
    # overflow is detected below and reported as SimulationDivergence
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, n_samples):
            t = ts[k - 1]
            for s in range(sub):
                tk = t + s * h
                u_mid = u_fun(tk + 0.5 * h)
                u_end = u_fun(tk + h)
                k1 = eval_f(sys, x, u_now)
                k2 = eval_f(sys, x + 0.5 * h * k1, u_mid)
                k3 = eval_f(sys, x + 0.5 * h * k2, u_mid)
                k4 = eval_f(sys, x + h * k3, u_end)
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                u_now = u_end
            if not np.all(np.isfinite(x)):
                raise SimulationDivergence(float(ts[k]))
            xs[k] = x
            us[k] = u_now
    ys = eval_h(sys, xs, us)
    return Trajectory(ts, xs, us, ys)


def _matrix(value, rows: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(rows, -1)
    return arr


def load_system(path) -> PolynomialSystem:
    """Read a system definition JSON (``n, m, p, L, blocks[{i, r, F, H}]``)."""
    doc = json.loads(Path(path).read_text())
    for key in ("n", "m", "p", "L", "blocks"):
        if key not in doc:
            raise KeyError(f"system file {path} lacks field '{key}'")
    n, m, p, L = (int(doc[k]) for k in ("n", "m", "p", "L"))
    F, H = {}, {}
    for block in doc["blocks"]:
        key = (int(block["i"]), int(block["r"]))
        if block.get("F") is not None:
            F[key] = _matrix(block["F"], n)
        if block.get("H") is not None:
            H[key] = _matrix(block["H"], p)
    return PolynomialSystem(n, m, p, L, F, H)


def save_system(sys: PolynomialSystem, path) -> None:
    keys = sorted(set(sys.F) | set(sys.H))
    blocks = [
        {"i": i, "r": r, "F": sys.f_block(i, r).tolist(), "H": sys.h_block(i, r).tolist()}
        for i, r in keys
    ]
    doc = {"n": sys.n, "m": sys.m, "p": sys.p, "L": sys.L, "blocks": blocks}
    Path(path).write_text(json.dumps(doc, indent=2))


def example_system() -> PolynomialSystem:
    """The bundled second-order example with an uncontrollable (A, B)."""
    return load_system(Path(__file__).with_name("data") / "pns_example.json")
