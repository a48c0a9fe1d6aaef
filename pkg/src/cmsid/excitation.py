"""Oscillator-driven excitation ``dv/dt = S v``, ``u = sum_l U_l v^[l]``.

``v`` has ``sigma = 2q + 1`` coordinates: a constant one followed by q
planar rotations at the angular frequencies ``omega_1 < ... < omega_q``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kron import reduced_length, reduced_power

__all__ = [
    "ExcitationSpec",
    "build_S",
    "eval_v",
    "eval_u",
    "random_initial_conditions",
    "example_frequencies",
    "example_U1",
]


def example_frequencies() -> np.ndarray:
    return np.array([0.13, 0.79, 2.65, 7.81, 18.37])


def example_U1() -> np.ndarray:
    """``0.05 ([1, 2, 4, 8, 16] ⊗ [1, 0])`` with a zero for the constant coordinate."""
    gains = 0.05 * np.kron([1.0, 2.0, 4.0, 8.0, 16.0], [1.0, 0.0])
    return np.concatenate([[0.0], gains])[None, :]


@dataclass
class ExcitationSpec:
    frequencies: np.ndarray
    U: dict = field(default_factory=dict)
    initial_conditions: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.frequencies, dtype=float).ravel()
        if w.size < 1:
            raise ValueError("at least one frequency is required")
        if np.any(w <= 0) or np.any(np.diff(w) <= 0):
            raise ValueError(f"frequencies must be positive and strictly increasing: {w}")
        self.frequencies = w
        self.U = {int(l): np.atleast_2d(np.asarray(mat, dtype=float)) for l, mat in self.U.items()}
        m = None
        for l, mat in self.U.items():
            if mat.shape[1] != reduced_length(self.sigma, l):
                raise ValueError(
                    f"U_{l} has {mat.shape[1]} columns, expected {reduced_length(self.sigma, l)}"
                )
            if m is not None and mat.shape[0] != m:
                raise ValueError("all U_l must have the same number of rows")
            m = mat.shape[0]
        if self.initial_conditions is not None:
            v0 = np.atleast_2d(np.asarray(self.initial_conditions, dtype=float))
            if v0.shape[1] != self.sigma:
                raise ValueError(f"initial conditions must have length sigma={self.sigma}")
            self.initial_conditions = v0

    @property
    def q(self) -> int:
        return self.frequencies.size

    @property
    def sigma(self) -> int:
        return 2 * self.q + 1

    @property
    def m(self) -> int:
        return next(iter(self.U.values())).shape[0] if self.U else 0

    def U_block(self, l: int) -> np.ndarray:
        return self.U.get(l, np.zeros((self.m, reduced_length(self.sigma, l))))


def build_S(spec_or_frequencies) -> np.ndarray:
    """``blkdiag(0, [[0, w_1], [-w_1, 0]], ..., [[0, w_q], [-w_q, 0]])``."""
    if isinstance(spec_or_frequencies, ExcitationSpec):
        w = spec_or_frequencies.frequencies
    else:
        w = ExcitationSpec(spec_or_frequencies).frequencies
    sigma = 2 * w.size + 1
    S = np.zeros((sigma, sigma))
    for k, omega in enumerate(w):
        a = 1 + 2 * k
        S[a, a + 1] = omega
        S[a + 1, a] = -omega
    return S


def eval_v(spec: ExcitationSpec, v0, t) -> np.ndarray:
    """Closed-form ``v(t) = expm(S t) v0``.

    ``v0`` is ``(sigma,)`` or ``(K, sigma)``; scalar ``t`` keeps that shape,
    an array of times prepends a time axis.
    """
    v0 = np.asarray(v0, dtype=float)
    t = np.asarray(t, dtype=float)
    angle = t[..., None] * spec.frequencies  # (*t, q)
    c, s = np.cos(angle), np.sin(angle)
    tshape = t.shape
    if tshape:
        c = c.reshape(tshape + (1,) * (v0.ndim - 1) + (spec.q,))
        s = s.reshape(c.shape)
    a0 = v0[..., 1::2]
    b0 = v0[..., 2::2]
    a = a0 * c + b0 * s
    b = -a0 * s + b0 * c
    out = np.empty(np.broadcast_shapes(a.shape[:-1], v0.shape[:-1]) + (spec.sigma,))
    out[..., 0] = v0[..., 0]
    out[..., 1::2] = a
    out[..., 2::2] = b
    return out


def eval_u(spec: ExcitationSpec, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != spec.sigma:
        raise ValueError(f"v has length {v.shape[-1]}, expected sigma={spec.sigma}")
    out = np.zeros(v.shape[:-1] + (spec.m,))
    for l, mat in spec.U.items():
        out += reduced_power(v, l) @ mat.T
    return out


def random_initial_conditions(count: int, sigma: int, seed, scale: float = 1.0,
                              spread: float = 0.5) -> np.ndarray:
    """``count`` seeded random directions in R^sigma.

    Norms are drawn uniformly from ``scale * [1 - spread, 1 + spread]``.
    ``|v(t)|`` is conserved along the flow, so equal norms (``spread=0``)
    make ``|v|^2 v^[l]`` a copy of ``scale^2 v^[l]`` and the harmonic
    regressor is singular from degree 3 on.
    """
    if not 0 <= spread < 1:
        raise ValueError("spread must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((count, sigma))
    radius = scale * rng.uniform(1 - spread, 1 + spread, size=(count, 1))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)
