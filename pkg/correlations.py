"""
Analytic intensity correlation functions of thermal light.

For Gaussian light the n-point intensity correlation equals the permanent of
the n x n coherence matrix scaled by the mean intensity. Permanents are
evaluated with Ryser's formula in Gray-code order.
"""
import logging
from dataclasses import dataclass
from itertools import permutations
from math import factorial
from typing import Sequence

import numpy as np

from geometry import DetectorArray, SourceGeometry, coherence, coherence_matrix

logger = logging.getLogger(__name__)

# Largest total order 2n handed to the permanent (2n = 12 for n = 6).
MAX_TOTAL_ORDER = 12
# Matrices per Ryser batch; bounds memory for large pixel sets.
BATCH_SIZE = 16384


class OrderCapError(ValueError):
    """Raised when a correlation order exceeds the permanent cap."""


@dataclass(frozen=True)
class CorrelationSpec:
    """Order, position tuple (scanning position first) and mean intensity."""

    order: int
    positions: tuple
    mean_intensity: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(float(p) for p in self.positions))
        if self.order < 2:
            raise ValueError(f"correlation order must be >= 2, got {self.order}")
        if len(self.positions) != self.order:
            raise ValueError(
                f"order {self.order} needs {self.order} positions, got {len(self.positions)}"
            )
        if self.mean_intensity < 0:
            raise ValueError("mean intensity must be nonnegative")


def batch_permanent(matrices) -> np.ndarray:
    """
    Permanents of a stack of square matrices.

    Ryser's inclusion-exclusion sum, visiting column subsets in Gray-code
    order so each step adds or removes a single column from the row sums.

    Args:
        matrices: array of shape (..., n, n)

    Returns:
        Array of shape (...) holding the permanents.
    """
    matrices = np.asarray(matrices)
    if matrices.ndim < 2 or matrices.shape[-1] != matrices.shape[-2]:
        raise ValueError(f"permanent needs square matrices, got shape {matrices.shape}")
    n = matrices.shape[-1]
    batch_shape = matrices.shape[:-2]
    if n == 0:
        return np.ones(batch_shape, dtype=matrices.dtype)
    flat = matrices.reshape((-1, n, n))
    dtype = np.result_type(flat.dtype, float)
    out = np.empty(flat.shape[0], dtype=dtype)
    for start in range(0, flat.shape[0], BATCH_SIZE):
        out[start:start + BATCH_SIZE] = _ryser(flat[start:start + BATCH_SIZE].astype(dtype))
    return out.reshape(batch_shape)


def _ryser(stack: np.ndarray) -> np.ndarray:
    n = stack.shape[-1]
    row_sums = np.zeros(stack.shape[:-1], dtype=stack.dtype)
    total = np.zeros(stack.shape[0], dtype=stack.dtype)
    subset = 0
    size = 0
    for k in range(1, 1 << n):
        column = (k & -k).bit_length() - 1
        if subset >> column & 1:
            row_sums -= stack[:, :, column]
            size -= 1
        else:
            row_sums += stack[:, :, column]
            size += 1
        subset ^= 1 << column
        term = np.prod(row_sums, axis=1)
        if size % 2:
            total -= term
        else:
            total += term
    return total if n % 2 == 0 else -total


def permanent(matrix):
    """
    Permanent of a square real or complex matrix.

    Raises:
        ValueError: if the matrix is not square
    """
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"permanent needs a square matrix, got shape {matrix.shape}")
    return batch_permanent(matrix[None])[0].item()


def permanent_by_permutations(matrix):
    """Naive sum over all permutations; reference for small matrices."""
    matrix = np.asarray(matrix)
    rows = np.arange(matrix.shape[0])
    return sum(np.prod(matrix[rows, list(cols)]) for cols in permutations(rows))


def _scalar_or_array(value):
    value = np.asarray(value)
    return value.item() if value.ndim == 0 else value


def g_n(spec: CorrelationSpec, source: SourceGeometry, array: DetectorArray) -> float:
    """G^(n) on an arbitrary position tuple: perm(<I> Gamma)."""
    gamma = coherence_matrix(spec.positions, source, array)
    return spec.mean_intensity ** spec.order * permanent(gamma)


def g_n_scheme1(x, s, order, mean_intensity, source, array) -> float:
    """G^(n)(x, s, ..., s) = <I>^n (n-1)! [1 + (n-1)|gamma(x,s)|^2]."""
    if order < 2:
        raise ValueError(f"correlation order must be >= 2, got {order}")
    gamma_xs = np.abs(coherence(x, s, source, array)) ** 2
    value = mean_intensity ** order * factorial(order - 1) * (1.0 + (order - 1) * gamma_xs)
    return _scalar_or_array(value)


def _scheme1_bracket(gamma_ij, gamma_is, gamma_js, copies):
    """Closed-form permanent of (x_i, x_j, s repeated `copies` times) divided by copies!."""
    abs_is = np.abs(gamma_is) ** 2
    abs_js = np.abs(gamma_js) ** 2
    triple = np.real(gamma_ij * gamma_js * np.conj(gamma_is))
    return (
        1.0
        + np.abs(gamma_ij) ** 2
        + copies * (abs_is + abs_js)
        + 2.0 * copies * triple
        + copies * (copies - 1) * abs_is * abs_js
    )


def g_2n_scheme1(xi, xj, s, order, mean_intensity, source, array) -> float:
    """
    G^(2n)(x_i, x_j, s, ..., s) with 2n - 2 copies of s, in closed form.

    Counting permutations by where x_i and x_j are sent gives
    m! {1 + |g_ij|^2 + m(|g_is|^2 + |g_js|^2) + 2m Re(g_ij g_js g_si)
    + m(m-1)|g_is|^2 |g_js|^2} with m = 2n - 2. Broadcasts over array
    positions.
    """
    if order < 2:
        raise ValueError(f"correlation order must be >= 2, got {order}")
    copies = 2 * order - 2
    bracket = _scheme1_bracket(
        coherence(xi, xj, source, array),
        coherence(xi, s, source, array),
        coherence(xj, s, source, array),
        copies,
    )
    return _scalar_or_array(mean_intensity ** (2 * order) * factorial(copies) * bracket)


def g_2n_general(xi, xj, refs: Sequence[float], mean_intensity, source, array,
                 max_total_order: int = MAX_TOTAL_ORDER) -> float:
    """
    G^(2n)(x_i, x_j, s_2, s_2, ..., s_n, s_n) as a 2n x 2n permanent.

    Raises:
        OrderCapError: if 2n exceeds max_total_order
    """
    refs = list(refs)
    total_order = 2 * (len(refs) + 1)
    if total_order > max_total_order:
        raise OrderCapError(
            f"total order {total_order} exceeds the permanent cap of {max_total_order}"
        )
    doubled = [r for r in refs for _ in range(2)]
    spec = CorrelationSpec(total_order, (xi, xj, *doubled), mean_intensity)
    return g_n(spec, source, array)


def _drop(matrix, rows, cols):
    keep_rows = [r for r in range(matrix.shape[0]) if r not in rows]
    keep_cols = [c for c in range(matrix.shape[1]) if c not in cols]
    return matrix[np.ix_(keep_rows, keep_cols)]


def reference_minors(block: np.ndarray):
    """
    Permanent of a reference block together with its one- and two-row minors.

    Returns:
        (P, Q, W) where P = perm(block), Q[l, k] = perm(block without row l and
        column k) and W[l, p, k, q] = perm(block without rows l, p and columns
        k, q), zero when l == p or k == q.
    """
    m = block.shape[0]
    whole = permanent(block) if m else 1.0
    singles = np.zeros((m, m))
    doubles = np.zeros((m, m, m, m))
    if m >= 1:
        stack = [_drop(block, (l,), (k,)) for l in range(m) for k in range(m)]
        singles = batch_permanent(np.array(stack)).reshape(m, m)
    if m >= 2:
        index = [(l, p, k, q) for l in range(m) for p in range(m) for k in range(m) for q in range(m)
                 if l != p and k != q]
        stack = np.array([_drop(block, (l, p), (k, q)) for l, p, k, q in index])
        values = batch_permanent(stack)
        for (l, p, k, q), value in zip(index, values):
            doubles[l, p, k, q] = value
    return whole, singles, doubles


def g_n_vector(scan_positions, refs, mean_intensity, source, array) -> np.ndarray:
    """
    G^(n)(x_i, s_2, ..., s_n) for every scanning position.

    Expands the permanent along the scanning row: perm = P + u^T Q u with u the
    coherences between x_i and the references.
    """
    scan_positions = np.asarray(scan_positions, dtype=float)
    refs = np.asarray(refs, dtype=float)
    order = refs.size + 1
    block = coherence_matrix(refs, source, array)
    whole, singles, _ = reference_minors(block)
    u = np.asarray(coherence(scan_positions[:, None], refs[None, :], source, array))
    values = whole + np.einsum("il,lk,ik->i", u, singles, u)
    return mean_intensity ** order * values


def g_2n_matrix(scan_positions, refs, mean_intensity, source, array,
                max_total_order: int = MAX_TOTAL_ORDER) -> np.ndarray:
    """
    G^(2n)(x_i, x_j, s_2, s_2, ..., s_n, s_n) for every pair of scanning positions.

    Expands the 2n x 2n permanent along the rows of x_i and x_j. Only the
    reference-block minors need permanents; the pixel dependence reduces to
    matrix products.
    """
    scan_positions = np.asarray(scan_positions, dtype=float)
    refs = np.asarray(refs, dtype=float)
    total_order = 2 * (refs.size + 1)
    if total_order > max_total_order:
        raise OrderCapError(
            f"total order {total_order} exceeds the permanent cap of {max_total_order}"
        )
    doubled = np.repeat(refs, 2)
    m = doubled.size
    block = coherence_matrix(doubled, source, array)
    whole, singles, doubles = reference_minors(block)
    pair = coherence_matrix(scan_positions, source, array)
    u = np.asarray(coherence(scan_positions[:, None], doubled[None, :], source, array))

    one_row = np.einsum("il,lk,ik->i", u, singles, u)
    cross = u @ singles @ u.T
    kron = np.einsum("il,ik->ilk", u, u).reshape(-1, m * m)
    two_row = kron @ doubles.transpose(0, 2, 1, 3).reshape(m * m, m * m) @ kron.T

    values = (
        whole * (1.0 + pair * pair)
        + one_row[:, None]
        + one_row[None, :]
        + pair * (cross + cross.T)
        + two_row
    )
    values = 0.5 * (values + values.T)
    return mean_intensity ** total_order * values
