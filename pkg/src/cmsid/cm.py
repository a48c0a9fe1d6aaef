"""Staged center-manifold identification for single-input, quadratic systems.

Stages:

1. realise the controllable part from ``(U_1, Y_1, S)`` and, per degree, the
   reachable response ``X_{l,c}`` used by Method II;
2. recover ``(C, A)`` and the order from the composite problem
   ``(V''_2, [Y_1, Y_2], blkdiag(S, S^<2>))``;
3. recover the state coefficients ``X_1 .. X_3`` (Method I: one Sylvester
   problem per degree with the Z-regressors; Method II: one joint problem on
   ``V''_4``);
4. recover ``(B, F_{2,0})`` from ``(Z''_4, [Y_1 .. Y_4], S_bar_4)``.

The pipeline covers the structural pattern ``D = F_{1,1} = F_{0,2} = H_2 = 0``
with known-zero flags, L = 2 and up to four harmonic degrees.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from . import fds, serialize
from .harmonics import HarmonicData
from .kron import expand_right, kron_power, merge_left, merge_right, reduced_kron_sum, reduced_length

__all__ = [
    "PEError",
    "PipelineConfig",
    "StageOneResult",
    "IdentifiedModel",
    "PECheck",
    "check_pe",
    "stage1",
    "build_V2",
    "build_V4",
    "stage2",
    "build_Z",
    "stage4_regressor",
    "stage3_method1",
    "stage3_method2",
    "stage4",
    "identify",
]

log = logging.getLogger(__name__)


class PEError(RuntimeError):
    def __init__(self, stage: str, condition: float):
        super().__init__(f"PE gate failed at {stage} (condition number {condition:.3g})")
        self.stage = stage
        self.condition = condition


@dataclass
class PipelineConfig:
    method: str = "I"
    n_bar: int = 3
    L: int = 2
    L_e: int = 4
    pe_threshold: float = 1e8
    pe_floor: float = 1e-12
    rel_tol: float = 1e-8
    abs_tol: float = 1e-12
    min_gap: float = 10.0
    D_zero: bool = True
    F11_zero: bool = True
    F02_zero: bool = True
    H2_zero: bool = True
    # keep the F11 / F02 regressors in the per-degree stage-3 problems even
    # when those blocks are known to vanish (as in the reference procedure)
    stage3_full_regressor: bool = True
    stage2_refit: bool = True
    # reference frequency for the subspace step ("max", a number, or None
    # to work with S unscaled); it only changes the state coordinates
    frequency_scale: float | str | None = "max"

    def __post_init__(self):
        if self.method not in ("I", "II"):
            raise ValueError(f"method must be 'I' or 'II', got {self.method!r}")
        if self.L != 2:
            raise ValueError("only quadratic systems (L = 2) are supported")
        if self.L_e < 4:
            raise ValueError("the staged procedure needs harmonics up to degree 4")


@dataclass
class PECheck:
    passed: bool
    condition: float
    smallest: float


def check_pe(regressor, threshold: float = 1e8, floor: float = 1e-12) -> PECheck:
    """Row-independence surrogate for persistency of excitation.

    Passes when the regressor has full row rank with condition number at
    most ``threshold`` and smallest singular value at least ``floor``.  No
    row scaling is applied: rows that vanish up to rounding must fail.
    """
    Z = np.atleast_2d(np.asarray(regressor, dtype=float))
    if Z.size == 0 or Z.shape[0] > Z.shape[1] or not Z.any():
        return PECheck(False, np.inf, 0.0)
    s = np.linalg.svd(Z, compute_uv=False)
    cond = s[0] / s[-1] if s[-1] > 0 else np.inf
    return PECheck(bool(cond <= threshold and s[-1] >= floor), float(cond), float(s[-1]))


@lru_cache(maxsize=8)
def _S_power_sum(S_bytes: bytes, sigma: int, l: int) -> np.ndarray:
    S = np.frombuffer(S_bytes).reshape(sigma, sigma)
    return reduced_kron_sum(S, l)


def S_power(S: np.ndarray, l: int) -> np.ndarray:
    """``S^<l>`` (``S`` itself for l = 1), cached per ``S``."""
    if l == 1:
        return S
    S = np.ascontiguousarray(S, dtype=float)
    return _S_power_sum(S.tobytes(), S.shape[0], l)


@lru_cache(maxsize=8)
def _basis_cached(S_bytes: bytes, sigma: int, degrees: tuple) -> fds.SpectralBasis:
    S = np.frombuffer(S_bytes).reshape(sigma, sigma)
    return fds.diagonalize(S_bar(S, degrees))


def S_bar(S: np.ndarray, degrees) -> np.ndarray:
    return sla.block_diag(*[S_power(S, l) for l in degrees])


def spectral_basis(S: np.ndarray, degrees) -> fds.SpectralBasis:
    S = np.ascontiguousarray(S, dtype=float)
    return _basis_cached(S.tobytes(), S.shape[0], tuple(degrees))


def _pad(X: np.ndarray, rows: int) -> np.ndarray:
    if X.shape[0] > rows:
        raise ValueError(f"{X.shape[0]} state rows exceed the bound n_bar={rows}")
    return np.vstack([X, np.zeros((rows - X.shape[0], X.shape[1]))])


def _blocks(rows) -> np.ndarray:
    """Assemble a block matrix where ``None`` entries are zeros."""
    heights = [next(b.shape[0] for b in row if b is not None) for row in rows]
    widths = [next(r[j].shape[1] for r in rows if r[j] is not None) for j in range(len(rows[0]))]
    return np.block(
        [[b if b is not None else np.zeros((h, w)) for b, w in zip(row, widths)]
         for row, h in zip(rows, heights)]
    )


def _d_mask(p: int, m: int, cfg: PipelineConfig) -> np.ndarray:
    return np.zeros((p, m), bool) if cfg.D_zero and cfg.H2_zero else np.ones((p, m), bool)


@dataclass
class Realization:
    order: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    X: np.ndarray
    singular_values: np.ndarray
    gap_ratio: float


@dataclass
class StageOneResult:
    n1c: int
    A1c: np.ndarray
    B1c: np.ndarray
    C1c: np.ndarray
    X_c: list  # X_{l,c}, l = 1, 2, 3 (higher degrees only when computed)
    singular_values: np.ndarray
    gap_ratio: float
    degree_realizations: list = field(default_factory=list)


def _realize(U, Y, S, n_bar, cfg: PipelineConfig, compress: bool) -> Realization:
    U = fds.compress_rows(U) if compress else U
    if compress and np.abs(Y).max(initial=0.0) <= cfg.abs_tol:
        # a degree with no output content (e.g. a linear system) has no reachable states
        n_y, sigma = Y.shape[0], S.shape[0]
        return Realization(0, np.zeros((0, 0)), np.zeros((0, U.shape[0])), np.zeros((n_y, 0)),
                           np.zeros((0, sigma)), np.zeros(0), np.inf)
    prob = fds.SylvesterProblem(U, Y, S, n_bar)
    sub = fds.algorithm1(prob, cfg.rel_tol, cfg.abs_tol, cfg.min_gap, compress=False,
                         frequency_scale=cfg.frequency_scale)
    basis = fds.diagonalize(S) if S.shape[0] < 400 else None
    fit = fds.algorithm2(
        prob, sub.A, sub.C, D_mask=_d_mask(Y.shape[0], U.shape[0], cfg),
        basis=basis, allow_rank_deficient=compress,
    )
    return Realization(sub.order, sub.A, fit.B, sub.C, fit.X, sub.singular_values, sub.gap_ratio)


def build_V2(s1: StageOneResult, hd: HarmonicData, n_bar: int):
    """``V''_2 = [[U_1, U_2], [0, V_2^{2,0}]]`` and ``S_bar_2 = blkdiag(S, S^<2>)``.

    ``V_2^{2,0}`` is the reduced square of the zero-padded ``X_{1,c}``.
    """
    sigma = hd.sigma
    P1 = _pad(s1.X_c[0], n_bar)
    V2 = merge_left(expand_right(np.kron(P1, P1), sigma, 2), n_bar, 2)
    return _blocks([[hd.U[0], hd.U[1]], [None, V2]]), V2


def _V3(P1, P2M, sigma):
    return expand_right(np.vstack([np.kron(P1, P2M), np.kron(P2M, P1)]), sigma, 3)


def _V4(P1, P2M, P3M, sigma, n_bar):
    middle = merge_left(np.kron(P2M, P2M), n_bar, 2)
    return expand_right(np.vstack([np.kron(P1, P3M), middle, np.kron(P3M, P1)]), sigma, 4)


def build_V4(s1: StageOneResult, hd: HarmonicData, n_bar: int):
    """Method II regressor ``V''_4`` with the padded ``X_{l,c}`` products.

    ``V_3^{2,0}`` and ``V_4^{2,0}`` stack the ordered Kronecker products
    (2 n_bar^2 and 2 n_bar^2 + C(n_bar+1, 2) rows) so that their row spaces
    contain those of the true quadratic regressors.
    """
    sigma = hd.sigma
    P1 = _pad(s1.X_c[0], n_bar)
    P2M = merge_right(_pad(s1.X_c[1], n_bar), sigma, 2)
    P3M = merge_right(_pad(s1.X_c[2], n_bar), sigma, 3)
    _, V2 = build_V2(s1, hd, n_bar)
    V3 = _V3(P1, P2M, sigma)
    V4 = _V4(P1, P2M, P3M, sigma, n_bar)
    U = hd.U
    V = _blocks([
        [U[0], U[1], U[2], U[3]],
        [None, V2, None, None],
        [None, None, V3, None],
        [None, None, None, V4],
    ])
    return V, {"V2": V2, "V3": V3, "V4": V4}


def stage1(hd: HarmonicData, S: np.ndarray, n_bar: int, cfg: PipelineConfig | None = None,
           degrees: int = 3) -> StageOneResult:
    """Controllable-part realisation and the per-degree reachable states.

    ``X_{l,c}`` for l >= 2 comes from realising the degree-l map
    ``[U_l; V_l^{2,0}] -> Y_l`` on ``S^<l>`` (Algorithm 1 then 2), with
    ``V_l^{2,0}`` built from the lower-degree ``X_{k,c}``.
    """
    cfg = cfg or PipelineConfig(n_bar=n_bar)
    sigma = hd.sigma
    first = _realize(hd.U[0], hd.Y[0], S, n_bar, cfg, compress=False)
    s1 = StageOneResult(first.order, first.A, first.B, first.C, [first.X],
                        first.singular_values, first.gap_ratio, [first])
    if degrees >= 2:
        _, V2 = build_V2(s1, hd, n_bar)
        real2 = _realize(np.vstack([hd.U[1], V2]), hd.Y[1], S_power(S, 2), n_bar, cfg, True)
        s1.X_c.append(real2.X)
        s1.degree_realizations.append(real2)
    if degrees >= 3:
        P1 = _pad(s1.X_c[0], n_bar)
        P2M = merge_right(_pad(s1.X_c[1], n_bar), sigma, 2)
        V3 = _V3(P1, P2M, sigma)
        real3 = _realize(np.vstack([hd.U[2], V3]), hd.Y[2], S_power(S, 3), n_bar, cfg, True)
        s1.X_c.append(real3.X)
        s1.degree_realizations.append(real3)
    return s1


def _block_weights(Ybar: np.ndarray, widths) -> np.ndarray:
    """Per-column weights equalising the output energy of each degree block."""
    w, start, ref = [], 0, None
    for d in widths:
        norm = np.linalg.norm(Ybar[:, start : start + d])
        ref = norm if ref is None else ref
        w.append(np.full(d, ref / norm if norm > 0 else 1.0))
        start += d
    return np.concatenate(w)


def stage2(V2bar, Y2bar, S2bar, n_bar: int, cfg: PipelineConfig | None = None,
           balance: bool = True):
    """``(C, A)`` and the order from the composite degree-1/2 problem.

    With ``balance`` the degree-2 columns of ``V''_2`` and ``[Y_1, Y_2]`` are
    rescaled so both degree blocks carry the same output energy.  ``S_bar_2``
    is block diagonal, so the rescaled data satisfy the same Sylvester
    equation; without it the much weaker quadratic response hides behind the
    linear singular value as soon as the data are noisy.
    """
    cfg = cfg or PipelineConfig(n_bar=n_bar)
    if balance:
        sigma = _sigma_from_composite(S2bar.shape[0])
        w = _block_weights(Y2bar, [sigma, S2bar.shape[0] - sigma])
        raw_V, raw_Y = V2bar, Y2bar
        V2bar, Y2bar = V2bar * w, Y2bar * w
    U = fds.compress_rows(V2bar)
    prob = fds.SylvesterProblem(U, Y2bar, S2bar, n_bar)
    Ubar = np.vstack([U @ np.linalg.matrix_power(S2bar, k) for k in range(n_bar)])
    pe = check_pe(Ubar, cfg.pe_threshold, cfg.pe_floor)
    if not pe.passed:
        raise PEError("stage 2 (C, A)", pe.condition)
    sub = fds.algorithm1(prob, cfg.rel_tol, cfg.abs_tol, cfg.min_gap, compress=False,
                         frequency_scale=cfg.frequency_scale)
    if balance and cfg.stage2_refit:
        raw = fds.SylvesterProblem(fds.compress_rows(raw_V), raw_Y, S2bar, n_bar)
        refit = fds.algorithm1(raw, order=sub.order, compress=False,
                               frequency_scale=cfg.frequency_scale)
        sub.C, sub.A = refit.C, refit.A
    return sub, pe


def _sigma_from_composite(size: int) -> int:
    """``sigma`` with ``sigma + C(sigma+1, 2) == size``."""
    for sigma in range(1, size + 1):
        if sigma + reduced_length(sigma, 2) == size:
            return sigma
    raise ValueError(f"{size} is not sigma + C(sigma+1, 2)")


def build_Z(hd: HarmonicData, X: list, n: int) -> dict:
    """Quadratic regressors of the degree-2..4 Sylvester problems.

    Needs ``X[0]`` for the degree-2 blocks, ``X[1]`` additionally for
    degree 3 and ``X[2]`` for ``Z_4^{2,0}``.
    """
    if not X:
        raise ValueError("X_1 is required to build the Z regressors")
    sigma, m = hd.sigma, hd.m
    U1, U2 = hd.U[0], hd.U[1]
    X1 = X[0]
    Z = {
        "Z2_20": merge_left(expand_right(np.kron(X1, X1), sigma, 2), n, 2),
        "Z2_11": expand_right(np.kron(X1, U1), sigma, 2),
        "Z2_02": merge_left(expand_right(np.kron(U1, U1), sigma, 2), m, 2),
    }
    if len(X) >= 2:
        X2M = merge_right(X[1], sigma, 2)
        U2M = merge_right(U2, sigma, 2)
        Z["Z3_20"] = merge_left(expand_right(np.kron(X1, X2M) + np.kron(X2M, X1), sigma, 3), n, 2)
        Z["Z3_11"] = expand_right(np.kron(X1, U2M) + np.kron(X2M, U1), sigma, 3)
        Z["Z3_02"] = merge_left(expand_right(np.kron(U1, U2M) + np.kron(U2M, U1), sigma, 3), m, 2)
    if len(X) >= 3:
        X2M = merge_right(X[1], sigma, 2)
        X3M = merge_right(X[2], sigma, 3)
        inner = np.kron(X1, X3M) + kron_power(X2M, 2) + np.kron(X3M, X1)
        Z["Z4_20"] = merge_left(expand_right(inner, sigma, 4), n, 2)
    return Z


def stage4_regressor(hd: HarmonicData, Z: dict, k: int) -> np.ndarray:
    """``Z''_k = [[U_1 .. U_k], [0, Z_2^{2,0} .. Z_k^{2,0}]]``."""
    top = [hd.U[l] for l in range(k)]
    bottom = [None] + [Z[f"Z{l}_20"] for l in range(2, k + 1)]
    return _blocks([top, bottom])


def _degree_problem(hd: HarmonicData, S, l: int, A, C, cfg: PipelineConfig, U_rows):
    Sl = S_power(S, l)
    prob = fds.SylvesterProblem(U_rows, hd.Y[l - 1], Sl, cfg.n_bar)
    fit = fds.algorithm2(prob, A, C, D_mask=_d_mask(hd.p, U_rows.shape[0], cfg),
                         basis=spectral_basis(S, (l,)), allow_rank_deficient=True)
    return fit.X


def stage3_method1(hd: HarmonicData, S, A, C, cfg: PipelineConfig | None = None) -> list:
    """``X_1, X_2, X_3`` one degree at a time with the Z regressors."""
    cfg = cfg or PipelineConfig()
    n = A.shape[0]
    X1 = _degree_problem(hd, S, 1, A, C, cfg, hd.U[0])
    Z = build_Z(hd, [X1], n)
    keep = ["Z2_20"] + ([] if not cfg.stage3_full_regressor and cfg.F11_zero else ["Z2_11"]) \
        + ([] if not cfg.stage3_full_regressor and cfg.F02_zero else ["Z2_02"])
    X2 = _degree_problem(hd, S, 2, A, C, cfg, np.vstack([hd.U[1]] + [Z[k] for k in keep]))
    Z = build_Z(hd, [X1, X2], n)
    keep3 = [k.replace("Z2", "Z3") for k in keep]
    X3 = _degree_problem(hd, S, 3, A, C, cfg, np.vstack([hd.U[2]] + [Z[k] for k in keep3]))
    return [X1, X2, X3]


def stage3_method2(s1: StageOneResult, hd: HarmonicData, S, A, C,
                   cfg: PipelineConfig | None = None) -> list:
    """``[X_1 .. X_4]`` from the joint problem on ``V''_4``."""
    cfg = cfg or PipelineConfig()
    V4bar, _ = build_V4(s1, hd, cfg.n_bar)
    U = fds.compress_rows(V4bar)
    Ybar = np.hstack(hd.Y[:4])
    prob = fds.SylvesterProblem(U, Ybar, S_bar(S, (1, 2, 3, 4)), cfg.n_bar)
    fit = fds.algorithm2(prob, A, C, D_mask=_d_mask(hd.p, U.shape[0], cfg),
                         basis=spectral_basis(S, (1, 2, 3, 4)), allow_rank_deficient=True)
    return _split(fit.X, hd.sigma, 4)


def _split(X: np.ndarray, sigma: int, degrees: int) -> list:
    out, start = [], 0
    for l in range(1, degrees + 1):
        d = reduced_length(sigma, l)
        out.append(X[:, start : start + d])
        start += d
    return out


def stage4(Z4bar, Y4bar, S4bar, A, C, m: int, cfg: PipelineConfig | None = None,
           basis: fds.SpectralBasis | None = None):
    """``(B, F_{2,0})`` from ``X_bar_4 S_bar_4 = A X_bar_4 + [B F_{2,0}] Z''_4``.

    Returns ``(B, F20, pe_check, fit)``.
    """
    cfg = cfg or PipelineConfig()
    pe = check_pe(Z4bar, cfg.pe_threshold, cfg.pe_floor)
    if not pe.passed:
        raise PEError("stage 4 (B, F20)", pe.condition)
    prob = fds.SylvesterProblem(Z4bar, Y4bar, S4bar, cfg.n_bar)
    fit = fds.algorithm2(prob, A, C, D_mask=_d_mask(Y4bar.shape[0], Z4bar.shape[0], cfg),
                         basis=basis)
    return fit.B[:, :m], fit.B[:, m:], pe, fit


@dataclass
class IdentifiedModel:
    method: str
    n: int
    n1c: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    F20: np.ndarray
    X: list
    diagnostics: dict = field(default_factory=dict)

    @property
    def D(self) -> np.ndarray:
        return np.zeros((self.C.shape[0], self.B.shape[1]))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "n": self.n,
            "n1c": self.n1c,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "F20": self.F20.tolist(),
            "X": [x.tolist() for x in self.X],
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "IdentifiedModel":
        return cls(
            doc["method"], int(doc["n"]), int(doc["n1c"]),
            np.asarray(doc["A"], float), np.asarray(doc["B"], float),
            np.asarray(doc["C"], float), np.asarray(doc["F20"], float),
            [np.asarray(x, float) for x in doc.get("X", [])],
            doc.get("diagnostics", {}),
        )


def _checkpoint(directory, name: str, doc: dict) -> None:
    if directory is not None:
        serialize.dump(doc, Path(directory) / f"{name}.json")


def identify(hd: HarmonicData, S: np.ndarray, cfg: PipelineConfig,
             methods=None, checkpoint_dir=None) -> dict:
    """Run the four stages; returns ``{method: IdentifiedModel}``.

    Stages 1 and 2 are shared when several methods are requested, so all
    returned models live in the same coordinate frame.  With
    ``checkpoint_dir`` every stage writes its result as JSON
    (``stage1``, ``stage2``, ``stage3_<method>``, ``model_<method>``).
    """
    methods = tuple(methods or (cfg.method,))
    if hd.order < 4:
        raise ValueError("harmonics up to degree 4 are required")
    n_bar, m = cfg.n_bar, hd.m
    s1 = stage1(hd, S, n_bar, cfg, degrees=3 if "II" in methods else 1)
    if s1.n1c > n_bar:
        raise fds.FDSError(f"controllable order {s1.n1c} exceeds n_bar={n_bar}")
    _checkpoint(checkpoint_dir, "stage1", {
        "n1c": s1.n1c, "A1c": s1.A1c, "B1c": s1.B1c, "C1c": s1.C1c, "X_c": s1.X_c,
        "singular_values": s1.singular_values, "gap_ratio": s1.gap_ratio})
    V2bar, _ = build_V2(s1, hd, n_bar)
    sub, pe2 = stage2(V2bar, np.hstack(hd.Y[:2]), S_bar(S, (1, 2)), n_bar, cfg)
    A, C = sub.A, sub.C
    _checkpoint(checkpoint_dir, "stage2", {
        "n": sub.order, "A": A, "C": C, "singular_values": sub.singular_values,
        "gap_ratio": sub.gap_ratio, "pe_condition": pe2.condition})
    basis4 = spectral_basis(S, (1, 2, 3, 4))
    S4bar = S_bar(S, (1, 2, 3, 4))
    Y4bar = np.hstack(hd.Y[:4])
    base = {
        "stage1_singular_values": s1.singular_values.tolist(),
        "stage1_gap_ratio": float(s1.gap_ratio),
        "stage2_singular_values": sub.singular_values.tolist(),
        "stage2_gap_ratio": float(sub.gap_ratio),
        "stage2_order_forced": bool(sub.forced),
        "pe_condition_numbers": {"stage2": pe2.condition},
    }
    if "II" in methods:
        base["degree_orders"] = [s1.n1c] + [r.order for r in s1.degree_realizations[1:]]
    out = {}
    for method in methods:
        if method == "I":
            X = stage3_method1(hd, S, A, C, cfg)
        elif method == "II":
            X = stage3_method2(s1, hd, S, A, C, cfg)[:3]
        else:
            raise ValueError(f"unknown method {method!r}")
        _checkpoint(checkpoint_dir, f"stage3_{method}", {"X": X})
        Z = build_Z(hd, X, sub.order)
        diag = {**base, "pe_condition_numbers": dict(base["pe_condition_numbers"])}
        for k in (2, 3):
            diag["pe_condition_numbers"][f"stage4_k{k}"] = check_pe(
                stage4_regressor(hd, Z, k), cfg.pe_threshold, cfg.pe_floor).condition
        Z4bar = stage4_regressor(hd, Z, 4)
        B, F20, pe4, fit = stage4(Z4bar, Y4bar, S4bar, A, C, m, cfg, basis4)
        diag["pe_condition_numbers"]["stage4_k4"] = pe4.condition
        diag["stage4_residual"] = fit.residual
        out[method] = IdentifiedModel(method, sub.order, s1.n1c, A, B, C, F20, X, diag)
        _checkpoint(checkpoint_dir, f"model_{method}", out[method].to_dict())
    return out
