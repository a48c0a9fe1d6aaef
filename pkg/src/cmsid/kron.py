"""Full and reduced Kronecker powers, merge/expand matrices and Kronecker sums.

Conventions used everywhere in the package:

* ``full_power(v, i)`` is the i-fold Kronecker product ``v ⊗ ... ⊗ v``
  (row-major, so ``full_power([a, b], 2) == [a*a, a*b, b*a, b*b]``).
* ``reduced_power(v, i)`` lists the distinct degree-i monomials in graded
  lexicographic order of their exponent tuples, i.e. the order of
  ``itertools.combinations_with_replacement(range(n), i)``.  For ``n=2, i=2``
  this is ``[x1**2, x1*x2, x2**2]``.
* ``M`` (merge) averages the duplicate positions of a monomial in the full
  power, ``N`` (expand) copies a reduced entry to all its positions.  Hence
  ``M @ N == I``, ``reduced = M @ full`` and ``full = N @ reduced``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np
import scipy.sparse as sp

__all__ = [
    "MAX_FULL_LENGTH",
    "SizeLimitError",
    "MonomialIndexTable",
    "ConversionPair",
    "monomial_table",
    "reduced_length",
    "full_power",
    "reduced_power",
    "kron_power",
    "conversion_pair",
    "merge_sparse",
    "expand_sparse",
    "expand_right",
    "merge_left",
    "merge_right",
    "kron_sum",
    "reduced_kron_sum",
]

#: Largest admissible length n**i of a full Kronecker power.
MAX_FULL_LENGTH = 10**7


class SizeLimitError(ValueError):
    """Raised when a requested Kronecker object would exceed the size cap."""


def _check_args(n: int, i: int, entries: int | None = None) -> None:
    if n < 1 or i < 1:
        raise ValueError(f"need n >= 1 and i >= 1, got n={n}, i={i}")
    size = n**i if entries is None else entries
    if size > MAX_FULL_LENGTH:
        raise SizeLimitError(
            f"Kronecker object with {size} entries (n={n}, i={i}) exceeds the cap "
            f"of {MAX_FULL_LENGTH}"
        )


def reduced_length(n: int, i: int) -> int:
    """Number of distinct degree-i monomials in n variables, C(n+i-1, i)."""
    if i == 0:
        return 1
    return comb(n + i - 1, i)


@dataclass(frozen=True)
class MonomialIndexTable:
    n: int
    degree: int
    exponents: np.ndarray  # (delta, n) exponent tuples
    combos: np.ndarray  # (delta, degree) sorted variable indices
    position: np.ndarray  # (n**degree,) full index -> reduced index

    @property
    def reduced_length(self) -> int:
        return self.exponents.shape[0]

    @property
    def full_length(self) -> int:
        return self.position.shape[0]


@lru_cache(maxsize=None)
def monomial_table(n: int, i: int) -> MonomialIndexTable:
    _check_args(n, i)
    combos = np.array(
        list(itertools.combinations_with_replacement(range(n), i)), dtype=np.intp
    ).reshape(-1, i)
    exponents = np.zeros((combos.shape[0], n), dtype=np.intp)
    for k in range(i):
        np.add.at(exponents, (np.arange(combos.shape[0]), combos[:, k]), 1)
    lookup = {tuple(c): r for r, c in enumerate(combos.tolist())}
    # every full index, written as its digit tuple in base n, sorted
    digits = np.array(list(itertools.product(range(n), repeat=i)), dtype=np.intp)
    digits.sort(axis=1)
    position = np.fromiter(
        (lookup[tuple(d)] for d in digits.tolist()), dtype=np.intp, count=n**i
    )
    for arr in (combos, exponents, position):
        arr.setflags(write=False)
    return MonomialIndexTable(n, i, exponents, combos, position)


def _full_index(digits: np.ndarray, n: int) -> np.ndarray:
    i = digits.shape[-1]
    weights = n ** np.arange(i - 1, -1, -1, dtype=np.intp)
    return digits @ weights


def full_power(v, i: int) -> np.ndarray:
    """i-fold Kronecker power of ``v``; a leading batch axis is allowed."""
    v = np.asarray(v, dtype=float)
    n = v.shape[-1]
    _check_args(n, i)
    out = v
    for _ in range(i - 1):
        out = (out[..., :, None] * v[..., None, :]).reshape(*v.shape[:-1], -1)
    return out.copy() if i == 1 else out


def reduced_power(v, i: int) -> np.ndarray:
    """Distinct degree-i monomials of ``v`` (shape ``(..., n)``)."""
    v = np.asarray(v, dtype=float)
    n = v.shape[-1]
    if i == 0:
        return np.ones(v.shape[:-1] + (1,))
    table = monomial_table(n, i)
    out = v[..., table.combos[:, 0]]
    for k in range(1, i):
        out = out * v[..., table.combos[:, k]]
    return out


def kron_power(X, i: int) -> np.ndarray:
    """Kronecker power ``X ⊗ ... ⊗ X`` of a matrix."""
    X = np.asarray(X, dtype=float)
    if i < 1:
        raise ValueError("i must be >= 1")
    out = X
    for _ in range(i - 1):
        out = np.kron(out, X)
    return out


@lru_cache(maxsize=None)
def expand_sparse(n: int, i: int) -> sp.csr_matrix:
    """Sparse ``N``: n**i x C(n+i-1, i)."""
    table = monomial_table(n, i)
    full = table.full_length
    N = sp.csr_matrix(
        (np.ones(full), (np.arange(full), table.position)),
        shape=(full, table.reduced_length),
    )
    return N


@lru_cache(maxsize=None)
def merge_sparse(n: int, i: int) -> sp.csr_matrix:
    """Sparse ``M``: C(n+i-1, i) x n**i, averaging duplicate positions."""
    table = monomial_table(n, i)
    counts = np.bincount(table.position, minlength=table.reduced_length)
    full = table.full_length
    M = sp.csr_matrix(
        (1.0 / counts[table.position], (table.position, np.arange(full))),
        shape=(table.reduced_length, full),
    )
    return M


@dataclass(frozen=True)
class ConversionPair:
    M: np.ndarray
    N: np.ndarray


@lru_cache(maxsize=64)
def _dense_pair(n: int, i: int) -> ConversionPair:
    M = merge_sparse(n, i).toarray()
    N = expand_sparse(n, i).toarray()
    M.setflags(write=False)
    N.setflags(write=False)
    return ConversionPair(M, N)


def conversion_pair(n: int, i: int) -> ConversionPair:
    """Dense merge/expand matrices ``(M_i^n, N_i^n)``.

    The arrays are shared through a cache and are read-only.
    """
    _check_args(n, i)
    return _dense_pair(n, i)


def expand_right(W, n: int, i: int) -> np.ndarray:
    """``W @ N_i^n`` without forming the dense expand matrix."""
    W = np.asarray(W)
    return np.asarray((expand_sparse(n, i).T @ W.T).T)


def merge_left(W, n: int, i: int) -> np.ndarray:
    """``M_i^n @ W`` without forming the dense merge matrix."""
    return np.asarray(merge_sparse(n, i) @ np.asarray(W))


def merge_right(W, n: int, i: int) -> np.ndarray:
    """``W @ M_i^n`` (columns indexed by the reduced power -> full power)."""
    W = np.asarray(W)
    return np.asarray((merge_sparse(n, i).T @ W.T).T)


def _square(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    return A


def kron_sum(A, i: int) -> np.ndarray:
    """Successive Kronecker sum ``sum_k I^(k-1) ⊗ A ⊗ I^(i-k)``."""
    A = _square(A)
    n = A.shape[0]
    _check_args(n, i, entries=n ** (2 * i))
    out = A
    for _ in range(i - 1):
        size = out.shape[0]
        out = np.kron(out, np.eye(n)) + np.kron(np.eye(size), A)
    return out


def reduced_kron_sum(A, i: int) -> np.ndarray:
    """``A^<i> = M A^{i} N``: generator of ``v^[i]`` along ``dv/dt = A v``.

    Built from the product rule on monomials instead of the (much larger)
    full Kronecker sum; the two agree exactly.
    """
    A = _square(A)
    n = A.shape[0]
    table = monomial_table(n, i)
    delta = table.reduced_length
    out = np.zeros((delta, delta))
    rows = np.arange(delta)
    for k in range(i):
        source = table.combos[:, k]
        for j in range(n):
            coeff = A[source, j]
            hit = coeff != 0
            if not hit.any():
                continue
            digits = table.combos[hit].copy()
            digits[:, k] = j
            cols = table.position[_full_index(digits, n)]
            np.add.at(out, (rows[hit], cols), coeff[hit])
    return out
