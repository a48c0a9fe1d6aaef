"""Frequency-domain subspace identification for Sylvester-structured data.

Data model::

    X S = A X + B U
    Y   = C X + D U

with ``S`` diagonalizable and purely imaginary spectrum.  :func:`algorithm1`
estimates the order and ``(C, A)`` with a QR projection, an SVD and the
shift property; :func:`algorithm2` then fits ``(B, D)`` by linear least
squares over the frequency components of the data and rebuilds ``X``.
"""
from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.sparse.csgraph import connected_components

__all__ = [
    "FDSError",
    "SylvesterProblem",
    "SpectralBasis",
    "FrequencyComponents",
    "SubspaceResult",
    "InputFit",
    "diagonalize",
    "freq_decompose",
    "compress_rows",
    "algorithm1",
    "algorithm2",
    "transfer",
]

log = logging.getLogger(__name__)

ZERO_TOL = 1e-8
IMAG_TOL = 1e-9


class FDSError(RuntimeError):
    pass


@dataclass
class SylvesterProblem:
    U: np.ndarray
    Y: np.ndarray
    S: np.ndarray
    n_bar: int

    def __post_init__(self):
        self.U = np.atleast_2d(np.asarray(self.U, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        self.S = np.atleast_2d(np.asarray(self.S, dtype=float))
        sigma0 = self.S.shape[0]
        if self.S.shape != (sigma0, sigma0):
            raise ValueError("S must be square")
        if self.U.shape[1] != sigma0 or self.Y.shape[1] != sigma0:
            raise ValueError(
                f"U {self.U.shape} and Y {self.Y.shape} must have {sigma0} columns"
            )
        if self.n_bar < 1:
            raise ValueError("n_bar must be positive")

    @property
    def sigma0(self) -> int:
        return self.S.shape[0]


@dataclass
class SpectralBasis:
    """``T^{-1} S T = diag(0, .., 0, jw_1, -jw_1, ..., jw_k, -jw_k)``."""

    eigenvalues: np.ndarray
    T: np.ndarray
    T_inv: np.ndarray
    alpha: int
    omegas: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        """Column indices of the zero and +jw components (one per conjugate pair)."""
        pairs = self.alpha + 2 * np.arange(self.omegas.size)
        return np.concatenate([np.arange(self.alpha), pairs])


@dataclass
class FrequencyComponents:
    basis: SpectralBasis
    Z_tilde: np.ndarray

    @property
    def alpha(self) -> int:
        return self.basis.alpha

    @property
    def zero(self) -> np.ndarray:
        return self.Z_tilde[:, : self.alpha]

    @property
    def oscillatory(self) -> list[tuple[float, np.ndarray]]:
        cols = self.Z_tilde[:, self.alpha :: 2]
        return [(w, cols[:, k]) for k, w in enumerate(self.basis.omegas)]

    def reassemble(self) -> np.ndarray:
        return self.Z_tilde @ self.basis.T_inv


def _skew_symmetrizer(S: np.ndarray, tol: float) -> np.ndarray | None:
    """Positive ``d`` with ``diag(d) S diag(d)^-1`` skew-symmetric, if one exists."""
    n = S.shape[0]
    if np.any(np.abs(np.diag(S)) > tol):
        return None
    d = np.zeros(n)
    d[0] = 1.0
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(S[i]):
            if d[j] == 0.0:
                if S[j, i] == 0.0 or -S[i, j] / S[j, i] <= 0:
                    return None
                d[j] = d[i] * np.sqrt(-S[i, j] / S[j, i])
                queue.append(j)
    if np.any(d == 0.0):
        return None
    K = d[:, None] * S / d[None, :]
    scale = max(1.0, np.abs(K).max())
    if np.abs(K + K.T).max() > tol * scale:
        return None
    return d


def _diag_block(S: np.ndarray, zero_tol: float):
    """Eigen-decompose one irreducible block: returns (zero vecs, [(w, vec)])."""
    scale = max(1.0, np.abs(S).max())
    d = _skew_symmetrizer(S, 1e-12)
    if d is not None:
        K = d[:, None] * S / d[None, :]
        K = 0.5 * (K - K.T)
        mu, V = np.linalg.eigh(-1j * K)  # K v = j mu v
        zero = np.abs(mu) < zero_tol * scale
        pos = mu > zero_tol * scale
        neg = mu < -zero_tol * scale
        if pos.sum() != neg.sum():
            raise FDSError("unpaired imaginary eigenvalue in S")
        zvecs = np.zeros((S.shape[0], 0))
        if zero.any():
            V0 = V[:, zero]
            stacked = np.hstack([V0.real, V0.imag])
            W, s, _ = np.linalg.svd(stacked, full_matrices=False)
            zvecs = W[:, : zero.sum()]
        zvecs = zvecs / d[:, None]
        osc = [(m, V[:, k] / d) for k, m in zip(np.flatnonzero(pos), mu[pos])]
        left_zero = zvecs.T * (d**2)[None, :]  # rows of T^{-1}
        left_osc = [np.conj(v) * d**2 for _, v in osc]
        return zvecs, left_zero, osc, left_osc

    lam, V = np.linalg.eig(S)
    if np.abs(lam.real).max(initial=0.0) > 1e-8 * scale:
        raise FDSError("S has eigenvalues off the imaginary axis")
    if np.linalg.cond(V) > 1e10:
        raise FDSError("S is not (numerically) diagonalizable")
    zero = np.abs(lam) < zero_tol * scale
    pos = lam.imag > zero_tol * scale
    if pos.sum() != (lam.imag < -zero_tol * scale).sum():
        raise FDSError("unpaired imaginary eigenvalue in S")
    zvecs = np.zeros((S.shape[0], 0))
    if zero.any():
        Vz = V[:, zero]
        W, _, _ = np.linalg.svd(np.hstack([Vz.real, Vz.imag]), full_matrices=False)
        zvecs = W[:, : zero.sum()]
    osc_vecs = V[:, pos]
    T = np.hstack([zvecs, osc_vecs, np.conj(osc_vecs)]).astype(complex)
    T_inv = np.linalg.inv(T)
    nz = zvecs.shape[1]
    npos = osc_vecs.shape[1]
    osc = [(lam[k].imag, osc_vecs[:, c]) for c, k in enumerate(np.flatnonzero(pos))]
    left_zero = T_inv[:nz].real
    left_osc = [T_inv[nz + c] for c in range(npos)]
    return zvecs, left_zero, osc, left_osc


def diagonalize(S, zero_tol: float = ZERO_TOL) -> SpectralBasis:
    """Real-structured eigendecomposition of ``S`` with conjugate-paired columns.

    ``S`` is split into the connected components of its sparsity graph; each
    component is brought to skew-symmetric form by a diagonal similarity when
    possible (true for ``S`` and its reduced Kronecker sums), which keeps
    repeated eigenvalues well conditioned.
    """
    S = np.asarray(S, dtype=float)
    sigma0 = S.shape[0]
    _, labels = connected_components(S != 0, directed=False)
    zero_cols, zero_rows = [], []
    osc = []  # (omega, full right vector, full left row)
    for comp in np.unique(labels):
        idx = np.flatnonzero(labels == comp)
        zv, lz, ov, lo = _diag_block(S[np.ix_(idx, idx)], zero_tol)
        for k in range(zv.shape[1]):
            col = np.zeros(sigma0)
            col[idx] = zv[:, k]
            row = np.zeros(sigma0)
            row[idx] = lz[k]
            zero_cols.append(col)
            zero_rows.append(row)
        for (w, v), left in zip(ov, lo):
            col = np.zeros(sigma0, dtype=complex)
            col[idx] = v
            row = np.zeros(sigma0, dtype=complex)
            row[idx] = left
            osc.append((w, col, row))
    osc.sort(key=lambda item: item[0])
    alpha = len(zero_cols)
    T = np.zeros((sigma0, sigma0), dtype=complex)
    T_inv = np.zeros((sigma0, sigma0), dtype=complex)
    eig = np.zeros(sigma0, dtype=complex)
    if alpha:
        T[:, :alpha] = np.array(zero_cols).T
        T_inv[:alpha] = np.array(zero_rows)
    for k, (w, col, row) in enumerate(osc):
        c = alpha + 2 * k
        T[:, c], T[:, c + 1] = col, np.conj(col)
        T_inv[c], T_inv[c + 1] = row, np.conj(row)
        eig[c], eig[c + 1] = 1j * w, -1j * w
    omegas = np.array([w for w, _, _ in osc])
    return SpectralBasis(eig, T, T_inv, alpha, omegas)


def freq_decompose(Z, S=None, basis: SpectralBasis | None = None) -> FrequencyComponents:
    """Split the columns of ``Z`` into the eigen-components of ``S``."""
    if basis is None:
        if S is None:
            raise ValueError("either S or basis is required")
        basis = diagonalize(S)
    Z = np.atleast_2d(np.asarray(Z))
    return FrequencyComponents(basis, Z @ basis.T)


def compress_rows(U, rel_tol: float = 1e-10) -> np.ndarray:
    """Orthogonal row compression ``P^T U`` onto the numerical row space of ``U``.

    Used where the left factor of the input matrix is itself unknown, so only
    the row space of ``U`` carries information.
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if not U.any():
        return U[:0]
    P, s, Vt = np.linalg.svd(U, full_matrices=False)
    r = int(np.sum(s > rel_tol * s[0]))
    return s[:r, None] * Vt[:r]


@dataclass
class SubspaceResult:
    order: int
    C: np.ndarray
    A: np.ndarray
    singular_values: np.ndarray
    gap_index: int
    gap_ratio: float
    forced: bool = False
    input_rank: int = 0


def _shifted_stack(Z: np.ndarray, S: np.ndarray, count: int) -> np.ndarray:
    blocks = [Z]
    for _ in range(count - 1):
        blocks.append(blocks[-1] @ S)
    return np.vstack(blocks)


def algorithm1(
    prob: SylvesterProblem,
    rel_tol: float = 1e-8,
    abs_tol: float = 1e-12,
    min_gap: float = 10.0,
    order: int | None = None,
    compress: bool = True,
    frequency_scale: float | str | None = "max",
) -> SubspaceResult:
    """Order and ``(C, A)`` from ``(U, Y, S)``.

    The order is the number of singular values above
    ``max(rel_tol * mu_1, abs_tol)``; when that count exceeds ``n_bar`` or the
    gap ``mu_n / mu_{n+1}`` is below ``min_gap`` the order falls back to the
    largest gap among the first ``n_bar`` values (with a warning).

    ``frequency_scale`` divides ``S`` by a reference frequency before the
    shifted stacks are formed (``"max"``: the largest ``|eig(S)|``) and
    rescales ``A`` afterwards.  This leaves noiseless results unchanged but
    stops the powers of ``S`` from amplifying noise at high frequencies.
    """
    U = compress_rows(prob.U) if compress else prob.U
    Y, S, nb = prob.Y, prob.S, prob.n_bar
    rho = _reference_frequency(S, frequency_scale)
    S = S / rho
    p0 = Y.shape[0]
    Ubar = _shifted_stack(U, S, nb) if U.shape[0] else np.zeros((0, prob.sigma0))
    Ybar = _shifted_stack(Y, S, nb)
    mu_rows = Ubar.shape[0]
    if mu_rows + Ybar.shape[0] > prob.sigma0:
        warnings.warn(
            f"data matrix has {mu_rows + Ybar.shape[0]} rows but only {prob.sigma0} "
            "columns; the projection is not informative",
            stacklevel=2,
        )
    R = np.linalg.qr(np.hstack([Ubar.T, Ybar.T]), mode="r")
    R22 = R[mu_rows:, mu_rows:]
    Wl, sv, _ = np.linalg.svd(R22.T, full_matrices=True)
    sv_full = np.zeros(p0 * nb)
    sv_full[: sv.size] = sv

    mu1 = sv_full[0] if sv_full.size else 0.0
    if mu1 <= abs_tol:
        raise FDSError("output data carry no state information (all singular values zero)")
    ratios = sv_full[:-1] / np.maximum(sv_full[1:], np.finfo(float).tiny)
    forced = False
    if order is None:
        count = int(np.sum(sv_full > max(rel_tol * mu1, abs_tol)))
        n0 = count
        # the shift equation needs p0 (n_bar - 1) >= n0 rows
        limit = max(1, min(nb, p0 * (nb - 1)))
        if count > limit or (count < sv_full.size and ratios[count - 1] < min_gap):
            n0 = int(np.argmax(ratios[:limit])) + 1
            forced = True
            warnings.warn(
                f"no clear singular-value gap (values {sv_full[: nb + 1]}); "
                f"order set to {n0} at the largest gap",
                stacklevel=2,
            )
    else:
        n0 = int(order)
    if not 1 <= n0 <= nb:
        raise FDSError(f"order {n0} outside 1..{nb}")
    gap = float(ratios[n0 - 1]) if n0 - 1 < ratios.size else np.inf

    O = Wl[:, :n0]
    C = O[:p0]
    upper, lower = O[:-p0], O[p0:]
    if upper.shape[0] < n0 or np.linalg.matrix_rank(upper) < n0:
        raise FDSError("shifted observability matrix is rank deficient; increase n_bar")
    A = rho * (np.linalg.pinv(upper) @ lower)
    return SubspaceResult(n0, C, A, sv_full, n0, gap, forced, U.shape[0])


def _reference_frequency(S: np.ndarray, mode) -> float:
    if mode is None:
        return 1.0
    if not isinstance(mode, str):
        if mode <= 0:
            raise ValueError("frequency_scale must be positive")
        return float(mode)
    if mode != "max":
        raise ValueError(f"unknown frequency_scale {mode!r}")
    rho = float(np.abs(np.linalg.eigvals(S)).max()) if S.size else 0.0
    return rho if rho > 0 else 1.0


def transfer(C, A, B, s, D=None) -> np.ndarray:
    """``C (sI - A)^{-1} B + D`` for an array of complex frequencies ``s``."""
    s = np.atleast_1d(np.asarray(s, dtype=complex))
    n = A.shape[0]
    R = np.linalg.solve(s[:, None, None] * np.eye(n) - A, np.broadcast_to(B, (s.size,) + B.shape))
    G = C @ R
    if D is not None:
        G = G + D
    return G


@dataclass
class InputFit:
    B: np.ndarray
    D: np.ndarray
    X: np.ndarray
    rank: int
    unknowns: int
    residual: float
    imag_residual: float = 0.0


def algorithm2(
    prob: SylvesterProblem,
    A,
    C,
    B_mask=None,
    D_mask=None,
    basis: SpectralBasis | None = None,
    allow_rank_deficient: bool = False,
    spectral_tol: float = 1e-8,
) -> InputFit:
    """Least-squares ``(B, D)`` over all frequency components, then ``X``.

    ``B_mask`` / ``D_mask`` are boolean arrays marking free entries; entries
    outside the mask are held at zero.  By default ``B`` is free and ``D`` is
    zero.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    U, Y = prob.U, prob.Y
    n0, m0, p0 = A.shape[0], U.shape[0], Y.shape[0]
    B_mask = np.ones((n0, m0), bool) if B_mask is None else np.asarray(B_mask, bool)
    D_mask = np.zeros((p0, m0), bool) if D_mask is None else np.asarray(D_mask, bool)
    if B_mask.shape != (n0, m0) or D_mask.shape != (p0, m0):
        raise ValueError("mask shapes do not match (n0, m0) / (p0, m0)")
    if basis is None:
        basis = diagonalize(prob.S)

    lam = basis.eigenvalues
    eigA = np.linalg.eigvals(A)
    if np.min(np.abs(lam[:, None] - eigA[None, :])) < spectral_tol:
        raise FDSError("A and S share an eigenvalue; (sI - A) is singular")
    Ut = U @ basis.T
    Yt = Y @ basis.T

    # resolvents for every component
    Res = np.linalg.inv(lam[:, None, None] * np.eye(n0) - A)  # (sigma0, n0, n0)
    keep = basis.positive
    G = C @ Res[keep]  # (k, p0, n0)
    u = Ut[:, keep].T  # (k, m0)
    # vec() is column-major: vec(B) index = b + n0 * j
    PhiB = np.einsum("kj,kab->kajb", u, G).reshape(len(keep), p0, m0 * n0)
    PhiD = np.einsum("kj,ab->kajb", u, np.eye(p0)).reshape(len(keep), p0, m0 * p0)
    Phi = np.concatenate(
        [PhiB[:, :, B_mask.ravel(order="F")], PhiD[:, :, D_mask.ravel(order="F")]], axis=2
    ).reshape(len(keep) * p0, -1)
    rhs = Yt[:, keep].T.reshape(-1)
    Phi_r = np.vstack([Phi.real, Phi.imag])
    rhs_r = np.concatenate([rhs.real, rhs.imag])
    unknowns = Phi_r.shape[1]

    theta, _, rank, sv = np.linalg.lstsq(Phi_r, rhs_r, rcond=None)
    if rank < unknowns and not allow_rank_deficient:
        raise FDSError(
            f"least-squares problem for (B, D) is rank deficient ({rank} < {unknowns})"
        )
    B = np.zeros(n0 * m0)
    nb_free = int(B_mask.sum())
    B[B_mask.ravel(order="F")] = theta[:nb_free]
    B = B.reshape((n0, m0), order="F")
    D = np.zeros(p0 * m0)
    D[D_mask.ravel(order="F")] = theta[nb_free:]
    D = D.reshape((p0, m0), order="F")
    resid = float(np.linalg.norm(Phi_r @ theta - rhs_r))

    Xt = np.einsum("kab,bj,jk->ak", Res, B, Ut)
    X_c = Xt @ basis.T_inv
    scale = max(1.0, np.abs(X_c).max())
    imag = float(np.abs(X_c.imag).max() / scale) if X_c.size else 0.0
    if imag > IMAG_TOL:
        log.warning("reassembled X has relative imaginary part %.3g", imag)
    return InputFit(B, D, X_c.real.copy(), int(rank), unknowns, resid, imag)
