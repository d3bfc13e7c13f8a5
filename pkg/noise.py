"""
Gaussian detector-efficiency noise and the noise moments entering the
mean and covariance of measured correlations.

Reference sets are either one pixel repeated n-1 times or n-1 distinct
pixels; anything in between is rejected.
"""
import logging
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

MAX_MOMENT_ORDER = 12
# Positions closer than this (metres) are the same pixel.
POSITION_ATOL = 1e-12


class MixedMultiplicityError(ValueError):
    """Raised for reference sets that are neither all equal nor all distinct."""


@dataclass(frozen=True)
class NoiseModel:
    """Efficiency eta ~ Normal(nu, sigma^2), independent across pixels and frames."""

    nu: float = 0.5
    sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.nu <= 1.0:
            raise ValueError(f"mean efficiency nu must lie in (0, 1], got {self.nu}")
        if self.sigma < 0:
            raise ValueError(f"efficiency std sigma must be nonnegative, got {self.sigma}")

    @property
    def chi(self) -> float:
        return self.sigma / self.nu

    @classmethod
    def unit(cls, chi: float) -> "NoiseModel":
        """Noise law of eta / nu, which depends on chi alone."""
        return cls(nu=1.0, sigma=chi)


@lru_cache(maxsize=4096)
def _raw_moment(order: int, nu: float, sigma: float) -> float:
    if order == 0:
        return 1.0
    if sigma == 0:
        return nu ** order
    return float(stats.norm(loc=nu, scale=sigma).moment(order))


def gaussian_raw_moment(order: int, model: NoiseModel) -> float:
    """
    Raw moment <eta^k> of the efficiency distribution.

    Args:
        order: k in 0..12
        model: noise model

    Returns:
        <eta^k>; exactly nu^k when sigma = 0.
    """
    if int(order) != order or not 0 <= order <= MAX_MOMENT_ORDER:
        raise ValueError(f"moment order must be an integer in 0..{MAX_MOMENT_ORDER}, got {order}")
    return _raw_moment(int(order), float(model.nu), float(model.sigma))


def _same(x, y) -> bool:
    return abs(float(x) - float(y)) <= POSITION_ATOL


def classify_references(refs: Sequence[float]) -> str:
    """
    'repeated' when every reference is the same pixel, 'distinct' when no two
    coincide.

    Raises:
        MixedMultiplicityError: for anything else
    """
    refs = [float(r) for r in refs]
    if not refs:
        raise ValueError("at least one reference position is required")
    if all(_same(r, refs[0]) for r in refs):
        return "repeated"
    for k, r in enumerate(refs):
        if any(_same(r, other) for other in refs[k + 1:]):
            raise MixedMultiplicityError(
                "reference pixels must be all equal or all distinct"
            )
    return "distinct"


def _in_refs(x, refs) -> bool:
    return any(_same(x, r) for r in refs)


def noise_moment_n(xi, refs: Sequence[float], model: NoiseModel) -> float:
    """<eta(x_i) eta(s_2) ... eta(s_n)>."""
    refs = [float(r) for r in refs]
    order = len(refs) + 1
    moment = lambda k: gaussian_raw_moment(k, model)
    if classify_references(refs) == "repeated":
        if _same(xi, refs[0]):
            return moment(order)
        return moment(1) * moment(order - 1)
    j1 = moment(1) ** len(refs)
    if _in_refs(xi, refs):
        return moment(2) / moment(1) * j1
    return moment(1) * j1


def noise_case_label(xi, xj, refs: Sequence[float]) -> str:
    """
    Case letter of the 2n-th noise moment: a (x_i = x_j in S), b (x_i = x_j
    not in S), c (both in S, different), d (neither in S, different),
    e (only x_i in S), f (only x_j in S).
    """
    classify_references(refs)
    in_i = _in_refs(xi, refs)
    in_j = _in_refs(xj, refs)
    if _same(xi, xj):
        return "a" if in_i else "b"
    if in_i and in_j:
        return "c"
    if in_i:
        return "e"
    if in_j:
        return "f"
    return "d"


def noise_moment_2n(xi, xj, refs: Sequence[float], model: NoiseModel) -> float:
    """<eta(x_i) eta(x_j) eta(s_2)^2 ... eta(s_n)^2>."""
    refs = [float(r) for r in refs]
    order = len(refs) + 1
    moment = lambda k: gaussian_raw_moment(k, model)
    case = noise_case_label(xi, xj, refs)

    if classify_references(refs) == "repeated":
        j4 = moment(2 * order - 2)
        if case == "a":
            return moment(2 * order)
        if case == "b":
            return moment(2) * j4
        if case == "d":
            return moment(1) ** 2 * j4
        return moment(1) * moment(2 * order - 1)

    j3 = moment(2) ** len(refs)
    lifted = moment(3) / moment(2)
    if case == "a":
        return moment(4) / moment(2) * j3
    if case == "b":
        return moment(2) * j3
    if case == "c":
        return lifted * lifted * j3
    if case == "d":
        return moment(1) ** 2 * j3
    return lifted * moment(1) * j3


def factorised_moment(multiplicities, model: NoiseModel) -> float:
    """
    Moment of a product of efficiencies from independent pixels.

    Args:
        multiplicities: power per pixel, either a mapping or a sequence of
            pixel labels (repeated labels raise the power)

    Returns:
        prod_p <eta^{k_p}>
    """
    if not hasattr(multiplicities, "values"):
        multiplicities = Counter(multiplicities)
    value = 1.0
    for power in multiplicities.values():
        value *= gaussian_raw_moment(power, model)
    return value


def _membership(scan_positions, refs):
    scan_positions = np.asarray(scan_positions, dtype=float)
    refs = np.asarray(refs, dtype=float)
    return np.any(np.abs(scan_positions[:, None] - refs[None, :]) <= POSITION_ATOL, axis=1)


def noise_moment_vector(scan_positions, refs: Sequence[float], model: NoiseModel) -> np.ndarray:
    """noise_moment_n evaluated at every scanning position."""
    refs = [float(r) for r in refs]
    order = len(refs) + 1
    moment = lambda k: gaussian_raw_moment(k, model)
    inside = _membership(scan_positions, refs)
    if classify_references(refs) == "repeated":
        return np.where(inside, moment(order), moment(1) * moment(order - 1))
    j1 = moment(1) ** len(refs)
    return np.where(inside, moment(2) / moment(1) * j1, moment(1) * j1)


def noise_moment_matrix(scan_positions, refs: Sequence[float], model: NoiseModel) -> np.ndarray:
    """noise_moment_2n over every pair of scanning positions."""
    refs = [float(r) for r in refs]
    order = len(refs) + 1
    moment = lambda k: gaussian_raw_moment(k, model)
    scan_positions = np.asarray(scan_positions, dtype=float)
    inside = _membership(scan_positions, refs)
    same = np.abs(scan_positions[:, None] - scan_positions[None, :]) <= POSITION_ATOL
    in_i = inside[:, None]
    in_j = inside[None, :]

    if classify_references(refs) == "repeated":
        j4 = moment(2 * order - 2)
        values = np.full(same.shape, moment(1) ** 2 * j4)
        values = np.where(in_i | in_j, moment(1) * moment(2 * order - 1), values)
        values = np.where(same, moment(2) * j4, values)
        return np.where(same & in_i, moment(2 * order), values)

    j3 = moment(2) ** len(refs)
    lifted = moment(3) / moment(2)
    values = np.full(same.shape, moment(1) ** 2 * j3)
    values = np.where(in_i ^ in_j, lifted * moment(1) * j3, values)
    values = np.where(in_i & in_j, lifted * lifted * j3, values)
    values = np.where(same, moment(2) * j3, values)
    return np.where(same & in_i, moment(4) / moment(2) * j3, values)


def noise_case_matrix(scan_positions, refs: Sequence[float]) -> np.ndarray:
    """Case letters of noise_moment_matrix, as an array of strings."""
    return np.array([[noise_case_label(xi, xj, refs) for xj in scan_positions]
                     for xi in scan_positions])
