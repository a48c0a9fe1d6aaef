"""Transfer entries, H-infinity error ratios, frame alignment and Bode tables.

The compared quantities are entries of

    G1(s) = C (sI - A)^{-1} B        (p x m)
    G2(s) = C (sI - A)^{-1} F_{2,0}  (p x C(n+1, 2))

``G1`` is invariant under a change of state coordinates, ``G2`` is not, so
identified models are first brought into the true frame with
:func:`cf_align`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from .kron import expand_right, merge_left

__all__ = [
    "ENTRIES",
    "LinearMapTransfer",
    "AlignedModel",
    "AlignmentError",
    "transfer_entry",
    "hinf_norm",
    "error_ratio",
    "cf_align",
    "quadratic_frame_change",
    "entry_transfers",
    "bode_data",
    "write_bode_csv",
    "DB_FLOOR",
]

#: Magnitude written for an identically zero response (instead of -inf dB).
DB_FLOOR = -300.0

#: Compared entries: name -> (map, row, column), zero-based.
ENTRIES = {
    "G111": ("G1", 0, 0),
    "G221": ("G2", 1, 0),
    "G222": ("G2", 1, 1),
    "G213": ("G2", 0, 2),
}


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class LinearMapTransfer:
    """Entry ``(row, col)`` of ``C (sI - A)^{-1} E``."""

    C: np.ndarray
    A: np.ndarray
    E: np.ndarray
    row: int = 0
    col: int = 0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "C", np.atleast_2d(np.asarray(self.C, dtype=float)))
        object.__setattr__(self, "E", np.atleast_2d(np.asarray(self.E, dtype=float)))

    @property
    def c(self) -> np.ndarray:
        return self.C[self.row]

    @property
    def e(self) -> np.ndarray:
        return self.E[:, self.col]

    def is_stable(self) -> bool:
        return bool(np.all(np.linalg.eigvals(self.A).real < 0))


def transfer_entry(tm: LinearMapTransfer, omega) -> np.ndarray:
    """Complex response at ``s = j omega`` (scalar or array)."""
    w = np.asarray(omega, dtype=float)
    s = 1j * np.atleast_1d(w)
    n = tm.A.shape[0]
    M = s[:, None, None] * np.eye(n) - tm.A
    if np.any(np.abs(np.linalg.det(M)) < 1e-300):
        raise np.linalg.LinAlgError("resolvent is singular on the grid")
    g = np.linalg.solve(M, np.broadcast_to(tm.e, (s.size, n))[..., None])[..., 0] @ tm.c
    return g.reshape(w.shape) if w.shape else g[0]


def _magnitude(tms, signs):
    def mag(w):
        return np.abs(sum(sg * transfer_entry(tm, w) for tm, sg in zip(tms, signs)))
    return mag


def hinf_norm(tm: LinearMapTransfer, minus: LinearMapTransfer | None = None,
              w_min: float = 1e-3, w_max: float = 1e3, points: int = 2000,
              rel_tol: float = 1e-6) -> float:
    """``sup_w |G(jw)|`` (or of ``G - minus``) by grid search and refinement.

    The grid is logarithmic on ``[w_min, w_max]`` plus ``w = 0``; the best
    grid point is refined by a bounded golden-section search in ``log w``.
    """
    tms = [tm] if minus is None else [tm, minus]
    for t in tms:
        if not t.is_stable():
            raise ValueError("H-infinity norm requires a stable A")
    mag = _magnitude(tms, [1.0, -1.0])
    grid = np.concatenate([[0.0], np.logspace(np.log10(w_min), np.log10(w_max), points)])
    vals = mag(grid)
    k = int(np.argmax(vals))
    best = float(vals[k])
    if best == 0.0:
        return 0.0
    if 0 < k < grid.size - 1:
        lo, hi = np.log10(grid[max(k - 1, 1)]), np.log10(grid[k + 1])
        res = minimize_scalar(lambda x: -mag(10.0**x), bounds=(lo, hi), method="bounded",
                              options={"xatol": rel_tol / np.log(10)})
        best = max(best, float(-res.fun))
    return best


def error_ratio(true_tm: LinearMapTransfer, est_tm: LinearMapTransfer, **kw) -> float:
    """``||G - G_hat||_inf / ||G||_inf``."""
    den = hinf_norm(true_tm, **kw)
    if den == 0.0:
        raise ZeroDivisionError("true transfer entry is identically zero")
    return hinf_norm(true_tm, est_tm, **kw) / den


def _observability(C, A, k):
    blocks = [C]
    for _ in range(k - 1):
        blocks.append(blocks[-1] @ A)
    return np.vstack(blocks)


@dataclass
class AlignedModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    F20: np.ndarray
    T: np.ndarray


def quadratic_frame_change(F20, T, T_inv=None) -> np.ndarray:
    """``T F M_2 (T^{-1} ⊗ T^{-1}) N_2``: F20 expressed in the coordinates ``x = T x_hat``."""
    T = np.asarray(T, dtype=float)
    n = T.shape[0]
    T_inv = np.linalg.inv(T) if T_inv is None else T_inv
    G = merge_left(expand_right(np.kron(T_inv, T_inv), n, 2), n, 2)
    return T @ np.asarray(F20, dtype=float) @ G


def cf_align(C, A, C_hat, A_hat, B_hat, F20_hat, max_cond: float = 1e8) -> AlignedModel:
    """Express an identified model in the frame of ``(C, A)``.

    The similarity ``x = T x_hat`` solves ``O(C, A) T = O(C_hat, A_hat)`` in
    least squares.
    """
    A, C, A_hat, C_hat = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (A, C, A_hat, C_hat))
    n = A.shape[0]
    if A_hat.shape != (n, n) or C_hat.shape != C.shape:
        raise AlignmentError(f"model orders differ: {A.shape} vs {A_hat.shape}")
    O = _observability(C, A, n)
    O_hat = _observability(C_hat, A_hat, n)
    T = np.linalg.lstsq(O, O_hat, rcond=None)[0]
    if np.linalg.cond(T) > max_cond:
        raise AlignmentError(f"similarity transform is ill-conditioned (cond {np.linalg.cond(T):.3g})")
    T_inv = np.linalg.inv(T)
    return AlignedModel(
        T @ A_hat @ T_inv,
        T @ np.asarray(B_hat, dtype=float),
        C_hat @ T_inv,
        quadratic_frame_change(F20_hat, T, T_inv),
        T,
    )


def entry_transfers(C, A, B, F20) -> dict:
    """The four compared entries as :class:`LinearMapTransfer` objects."""
    maps = {"G1": B, "G2": F20}
    return {name: LinearMapTransfer(C, A, maps[which], r, c)
            for name, (which, r, c) in ENTRIES.items()}


def bode_data(tm: LinearMapTransfer, omega) -> dict:
    """Magnitude (dB) and unwrapped phase (deg) on ``omega``."""
    omega = np.asarray(omega, dtype=float)
    g = np.atleast_1d(transfer_entry(tm, omega))
    mag = np.abs(g)
    with np.errstate(divide="ignore"):
        db = np.where(mag > 0, 20 * np.log10(np.where(mag > 0, mag, 1.0)), DB_FLOOR)
    phase = np.degrees(np.unwrap(np.angle(g)))
    return {"omega": omega.reshape(-1), "mag_db": db, "phase_deg": phase}


def write_bode_csv(path, series: dict) -> None:
    """One CSV with ``omega_rad_s, mag_db, phase_deg, series_label`` rows.

    ``series`` maps a label to the output of :func:`bode_data`.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["omega_rad_s", "mag_db", "phase_deg", "series_label"])
        for label, data in series.items():
            for om, db, ph in zip(data["omega"], data["mag_db"], data["phase_deg"]):
                w.writerow([repr(float(om)), repr(float(db)), repr(float(ph)), label])
