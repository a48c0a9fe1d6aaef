"""Polynomial harmonic coefficients ``(U_l, Y_l)`` of the steady-state response.

In steady state the Hurwitz system driven by ``u = sum_l U_l v^[l]`` follows
``x = sum_l X_l v^[l]`` and ``y = sum_l Y_l v^[l]``.  :func:`extract` fits the
coefficients jointly by least squares on the reduced-power regressor
``[v^[1], ..., v^[L_e]]``; :func:`analytic_harmonics` computes them exactly
from a known system for noiseless reference runs.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from . import serialize
from .kron import expand_right, merge_left, merge_right, reduced_length, reduced_power

__all__ = [
    "HarmonicData",
    "Regressor",
    "RegressorRankError",
    "build_regressor",
    "extract",
    "retained_samples",
    "analytic_harmonics",
    "save_harmonics",
    "load_harmonics",
]


class RegressorRankError(ValueError):
    def __init__(self, degree: int, cond: float):
        super().__init__(
            f"harmonic regressor is rank deficient in the degree-{degree} block "
            f"(condition number {cond:.3g}); use more or more diverse initial conditions"
        )
        self.degree = degree
        self.cond = cond


@dataclass
class HarmonicData:
    U: list  # U[l-1]: (m, delta_l)
    Y: list  # Y[l-1]: (p, delta_l)
    condition: float = 1.0
    samples: int = 0
    X: list | None = None  # only known for analytic data

    @property
    def order(self) -> int:
        return len(self.U)

    @property
    def m(self) -> int:
        return self.U[0].shape[0]

    @property
    def p(self) -> int:
        return self.Y[0].shape[0]

    @property
    def sigma(self) -> int:
        return self.U[0].shape[1]

    def truncate(self, order: int) -> "HarmonicData":
        X = None if self.X is None else self.X[:order]
        return HarmonicData(self.U[:order], self.Y[:order], self.condition, self.samples, X)


def _monomials(v: np.ndarray, order: int) -> np.ndarray:
    return np.hstack([reduced_power(v, l) for l in range(1, order + 1)])


def _chunks(count: int, size: int):
    for start in range(0, count, size):
        yield slice(start, min(start + size, count))


@dataclass
class Regressor:
    """Triangular factor of the monomial regressor ``[v^[1], ..., v^[order]]``.

    Only ``R`` of a chunked QR is kept, so records of 10^5+ samples fit in
    memory; coefficients are obtained from the semi-normal equations
    ``R^T R theta = Phi^T target`` with ``Phi^T target`` accumulated per chunk.
    """

    order: int
    sigma: int
    R: np.ndarray  # R of Phi @ diag(1 / scale)
    scale: np.ndarray
    samples: int
    condition: float
    block_conditions: list = field(default_factory=list)
    chunk: int = 8192

    def project(self, v: np.ndarray, targets: np.ndarray) -> np.ndarray:
        """``diag(1/scale) Phi^T targets`` for samples ``v`` (N, sigma), targets (N, k)."""
        v = np.asarray(v, dtype=float)
        targets = np.asarray(targets, dtype=float).reshape(v.shape[0], -1)
        out = np.zeros((self.R.shape[0], targets.shape[1]))
        for sl in _chunks(v.shape[0], self.chunk):
            out += _monomials(v[sl], self.order).T @ targets[sl]
        return out / self.scale[:, None]

    def _theta(self, rhs: np.ndarray) -> np.ndarray:
        w = sla.solve_triangular(self.R, rhs, trans="T")
        return sla.solve_triangular(self.R, w) / self.scale[:, None]

    def _blocks(self, theta: np.ndarray) -> list:
        blocks, start = [], 0
        for l in range(1, self.order + 1):
            d = reduced_length(self.sigma, l)
            blocks.append(theta[start : start + d].T)
            start += d
        return blocks

    def solve_projected(self, rhs: np.ndarray) -> list:
        """Coefficient blocks from projected targets (output of :meth:`project`).

        Plain semi-normal equations: the error grows with the squared
        condition number; :meth:`solve` adds a refinement pass.
        """
        return self._blocks(self._theta(rhs))

    def solve(self, v: np.ndarray, targets: np.ndarray, refine: int = 1) -> list:
        """Least-squares coefficient blocks for every column of ``targets``.

        Each refinement step re-projects the residual (corrected semi-normal
        equations), bringing the accuracy back to that of a full QR solve.
        """
        v = np.asarray(v, dtype=float)
        targets = np.asarray(targets, dtype=float).reshape(v.shape[0], -1)
        theta = self._theta(self.project(v, targets))
        for _ in range(refine):
            out = np.zeros_like(theta)
            for sl in _chunks(v.shape[0], self.chunk):
                phi = _monomials(v[sl], self.order)
                out += phi.T @ (targets[sl] - phi @ theta)
            theta = theta + self._theta(out / self.scale[:, None])
        return self._blocks(theta)


def build_regressor(v, order: int, max_cond: float = 1e10, chunk: int = 8192) -> Regressor:
    """Factor ``[v^[1], ..., v^[order]]`` for samples ``v`` of shape ``(N, sigma)``.

    Raises :class:`RegressorRankError` naming the first degree block whose
    cumulative (column-equilibrated) condition number exceeds ``max_cond``.
    """
    v = np.asarray(v, dtype=float)
    N, sigma = v.shape
    cols = sum(reduced_length(sigma, l) for l in range(1, order + 1))
    if N < cols:
        raise RegressorRankError(order, np.inf)
    R = np.zeros((0, cols))
    for sl in _chunks(N, chunk):
        R = sla.qr(np.vstack([R, _monomials(v[sl], order)]), mode="r", check_finite=False)[0][:cols]
    scale = np.linalg.norm(R, axis=0) / np.sqrt(N)
    scale[scale == 0] = 1.0
    R = R / scale
    conds, stop = [], 0
    for l in range(1, order + 1):
        stop += reduced_length(sigma, l)
        s = np.linalg.svd(R[:stop, :stop], compute_uv=False)
        cond = s[0] / s[-1] if s[-1] > 0 else np.inf
        conds.append(float(cond))
        if cond > max_cond:
            raise RegressorRankError(l, cond)
    return Regressor(order, sigma, R, scale, N, conds[-1], conds, chunk)


def _retained(t, discard):
    t = np.asarray(t, dtype=float)
    if discard is None:
        discard = 0.2 * (t[-1] - t[0])
    return t >= t[0] + discard - 1e-12


def retained_samples(t, v, discard: float | None = None) -> np.ndarray:
    """Flattened ``v`` samples that :func:`extract` uses (for a shared regressor)."""
    v = np.asarray(v, dtype=float)[_retained(t, discard)]
    return v.reshape(-1, v.shape[-1])


def extract(t, v, u, y, order: int, discard: float | None = None,
            max_cond: float = 1e10, regressor: Regressor | None = None) -> HarmonicData:
    """Least-squares harmonic coefficients from sampled records.

    ``v``, ``u``, ``y`` are ``(N, K, dim)`` (K records sharing the time grid
    ``t``) or ``(N, dim)``.  Samples before ``discard`` seconds (default: the
    first 20 % of the record) are dropped from every record.
    """
    keep = _retained(t, discard)
    v, u, y = (np.asarray(a, dtype=float)[keep] for a in (v, u, y))
    v, u, y = (a.reshape(-1, a.shape[-1]) for a in (v, u, y))
    if regressor is None:
        regressor = build_regressor(v, order, max_cond)
    elif regressor.samples != v.shape[0] or regressor.order != order:
        raise ValueError("precomputed regressor does not match the retained samples")
    m = u.shape[1]
    blocks = regressor.solve(v, np.hstack([u, y]))
    U = [b[:m] for b in blocks]
    Y = [b[m:] for b in blocks]
    return HarmonicData(U, Y, regressor.condition, regressor.samples)


def _degree_part(factors, l: int, sigma: int) -> np.ndarray:
    """Coefficient of ``v^[l]`` in ``w_1 ⊗ ... ⊗ w_k``.

    Each factor is a series ``w_j = sum_a factors[j][a-1] v^[a]``; the result
    acts on the full Kronecker product of the factors.
    """
    rows = int(np.prod([f[0].shape[0] for f in factors]))
    out = np.zeros((rows, reduced_length(sigma, l)))
    for degs in itertools.product(*[range(1, len(f) + 1) for f in factors]):
        if sum(degs) != l:
            continue
        term = np.ones((1, 1))
        for f, a in zip(factors, degs):
            term = np.kron(term, f[a - 1] if a == 1 else merge_right(f[a - 1], sigma, a))
        out += expand_right(term, sigma, l)
    return out


def _polynomial_terms(blocks, rows, Xs, Us, l, n, m, sigma) -> np.ndarray:
    """Degree-l coefficient of ``sum F[i, r] (x^[i] ⊗ u^[r])`` excluding ``(1, 0)``."""
    rhs = np.zeros((rows, reduced_length(sigma, l)))
    for (i, r), mat in blocks.items():
        if (i, r) == (1, 0) or not mat.any():
            continue
        factors = [Xs] * i + [Us] * r
        if any(len(f) == 0 for f in factors):
            continue
        reduce_x = np.eye(n) if i == 1 else merge_left(np.eye(n**i), n, i) if i else np.ones((1, 1))
        reduce_u = np.eye(m) if r == 1 else merge_left(np.eye(m**r), m, r) if r else np.ones((1, 1))
        rhs += mat @ np.kron(reduce_x, reduce_u) @ _degree_part(factors, l, sigma)
    return rhs


def analytic_harmonics(sys, spec, order: int) -> HarmonicData:
    """Exact steady-state coefficients of the known system ``sys`` under ``spec``.

    Solves ``X_l S^<l> - A X_l = (degree-l part of the other terms of f)``
    degree by degree with a dense Sylvester solver; ``Y_l`` follows from h.
    """
    from .excitation import build_S
    from .kron import reduced_kron_sum

    S = build_S(spec)
    sigma = S.shape[0]
    Us = [spec.U_block(l) for l in range(1, order + 1)]
    Xs: list = []
    Ys: list = []
    for l in range(1, order + 1):
        Sl = S if l == 1 else reduced_kron_sum(S, l)
        rhs = _polynomial_terms(sys.F, sys.n, Xs, Us, l, sys.n, sys.m, sigma)
        X = sla.solve_sylvester(-sys.A, Sl, rhs)
        Xs.append(X)
        Ys.append(sys.C @ X + _polynomial_terms(sys.H, sys.p, Xs, Us, l, sys.n, sys.m, sigma))
    return HarmonicData(Us, Ys, 1.0, 0, Xs)


def save_harmonics(hd: HarmonicData, path) -> None:
    doc = {
        "order": hd.order,
        "condition": hd.condition,
        "samples": hd.samples,
        "U": [u.tolist() for u in hd.U],
        "Y": [y.tolist() for y in hd.Y],
    }
    serialize.dump(doc, path)


def load_harmonics(path) -> HarmonicData:
    doc = json.loads(Path(path).read_text())
    return HarmonicData(
        [np.asarray(u, dtype=float) for u in doc["U"]],
        [np.asarray(y, dtype=float) for y in doc["Y"]],
        float(doc.get("condition", 1.0)),
        int(doc.get("samples", 0)),
    )
