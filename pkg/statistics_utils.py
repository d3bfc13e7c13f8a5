"""
Measurement probability model for correlation data.

The measured correlation vector over the M scanning pixels is treated as
multivariate normal. This module assembles its mean and covariance from the
analytic correlations and noise moments, and derives the log-likelihood,
score, Fisher information and Cramer-Rao bound from them.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy import linalg

from correlations import g_2n_matrix, g_2n_scheme1, g_n_scheme1, g_n_vector
from geometry import DetectorArray, SourceGeometry
from noise import NoiseModel, noise_moment_matrix, noise_moment_vector

logger = logging.getLogger(__name__)

# Added to every covariance before factorisation, relative to its mean diagonal.
COVARIANCE_JITTER = 1e-10
# Relative finite-difference step for parameter derivatives.
DERIVATIVE_STEP = 1e-5
# Largest disagreement tolerated between closed forms and permanents in crosscheck mode.
CROSSCHECK_RTOL = 1e-10


class CovarianceConditioningError(np.linalg.LinAlgError):
    """Covariance still not positive definite after jitter."""


class SingularFisherError(np.linalg.LinAlgError):
    """Fisher information matrix cannot be inverted."""


class StepUnderflowError(ValueError):
    """Finite-difference step vanishes for a zero-valued parameter."""


class CrosscheckError(ValueError):
    """Closed-form correlations disagree with the permanent evaluation."""


class ReferenceScheme(str, Enum):
    REPEATED = "repeated"
    DISTINCT = "distinct"


@dataclass(frozen=True)
class DetectionScheme:
    """
    Placement of the reference pixels for an order-n measurement.

    Pixel indices are 1-based. A repeated scheme holds one reference index
    used n-1 times; a distinct scheme holds n-1 indices at uniform spacing.
    """

    order: int
    scheme: ReferenceScheme
    reference_pixels: tuple
    scan_pixels: tuple

    def __post_init__(self):
        object.__setattr__(self, "scheme", ReferenceScheme(self.scheme))
        object.__setattr__(self, "reference_pixels", tuple(int(p) for p in self.reference_pixels))
        object.__setattr__(self, "scan_pixels", tuple(int(p) for p in self.scan_pixels))
        if self.order < 2:
            raise ValueError(f"correlation order must be >= 2, got {self.order}")
        if not self.scan_pixels:
            raise ValueError("at least one scanning pixel is required")
        refs = self.reference_pixels
        if self.scheme is ReferenceScheme.REPEATED:
            if len(refs) != 1:
                raise ValueError("repeated-reference scheme takes exactly one reference pixel")
        else:
            if len(refs) != self.order - 1:
                raise ValueError(
                    f"distinct-reference scheme of order {self.order} needs "
                    f"{self.order - 1} reference pixels, got {len(refs)}"
                )
            if len(set(refs)) != len(refs):
                raise ValueError("distinct reference pixels must not coincide")
            steps = {abs(b - a) for a, b in zip(refs, refs[1:])}
            if len(steps) > 1:
                raise ValueError(f"reference pixels must be uniformly spaced, got {refs}")

    @classmethod
    def repeated(cls, order: int, pixel_count: int, reference: Optional[int] = None) -> "DetectionScheme":
        """All reference pixels at s (the central pixel floor(M/2) by default)."""
        reference = pixel_count // 2 if reference is None else reference
        return cls(order, ReferenceScheme.REPEATED, (reference,), range(1, pixel_count + 1))

    @classmethod
    def distinct(cls, order: int, pixel_count: int, separation: int,
                 center: Optional[int] = None) -> "DetectionScheme":
        """
        n-1 reference pixels s_k = c - floor((n-2)d/2) + k d, centred on c.

        Raises:
            ValueError: for d < 1 or references falling off the array
        """
        if int(separation) != separation or separation < 1:
            raise ValueError(f"reference separation d must be a positive integer, got {separation}")
        center = pixel_count // 2 if center is None else center
        first = center - ((order - 2) * separation) // 2
        refs = tuple(first + k * separation for k in range(order - 1))
        if refs[0] < 1 or refs[-1] > pixel_count:
            raise ValueError(
                f"order {order} references at separation {separation} span pixels "
                f"{refs[0]}..{refs[-1]}, outside 1..{pixel_count}"
            )
        return cls(order, ReferenceScheme.DISTINCT, refs, range(1, pixel_count + 1))

    @property
    def separation(self) -> int:
        refs = self.reference_pixels
        return abs(refs[1] - refs[0]) if len(refs) > 1 else 0

    @property
    def expanded_references(self) -> tuple:
        """Reference indices s_2..s_n, one entry per correlation slot."""
        if self.scheme is ReferenceScheme.REPEATED:
            return self.reference_pixels * (self.order - 1)
        return self.reference_pixels


@dataclass(frozen=True)
class ParameterVector:
    """Source dimension a (metres), effective intensity I_eff and optionally chi."""

    a: float
    i_eff: float
    chi: Optional[float] = None

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"source dimension a must be positive, got {self.a}")
        if not self.i_eff > 0:
            raise ValueError(f"effective intensity must be positive, got {self.i_eff}")
        if self.chi is not None and self.chi < 0:
            raise ValueError(f"chi must be nonnegative, got {self.chi}")

    def as_array(self, names: Sequence[str]) -> np.ndarray:
        return np.array([getattr(self, name) for name in names], dtype=float)

    @classmethod
    def from_array(cls, values, names: Sequence[str], chi: Optional[float] = None) -> "ParameterVector":
        fields = dict(zip(names, (float(v) for v in values)))
        fields.setdefault("chi", chi)
        return cls(**fields)


class GaussianModel(Protocol):
    """Anything with a parameter-dependent mean vector and covariance matrix."""

    parameter_names: tuple

    def mean(self, values: np.ndarray) -> np.ndarray: ...

    def covariance(self, values: np.ndarray) -> np.ndarray: ...


@lru_cache(maxsize=32)
def unit_correlations(scheme: DetectionScheme, source: SourceGeometry, array: DetectorArray,
                      crosscheck: bool = False):
    """
    G^(n) vector and G^(2n) matrix at unit mean intensity, cached per source.

    Returns:
        (g_n, g_2n) read-only arrays over the scanning pixels.
    """
    scan = array.positions(scheme.scan_pixels)
    refs = array.positions(scheme.expanded_references)
    if scheme.scheme is ReferenceScheme.REPEATED:
        s = refs[0]
        g_n = g_n_scheme1(scan, s, scheme.order, 1.0, source, array)
        g_2n = g_2n_scheme1(scan[:, None], scan[None, :], s, scheme.order, 1.0, source, array)
        if crosscheck:
            _crosscheck(g_n, g_n_vector(scan, refs, 1.0, source, array), "G^(n)")
            _crosscheck(g_2n, g_2n_matrix(scan, refs, 1.0, source, array), "G^(2n)")
    else:
        g_n = g_n_vector(scan, refs, 1.0, source, array)
        g_2n = g_2n_matrix(scan, refs, 1.0, source, array)
    g_n = np.array(g_n, dtype=float)
    g_2n = np.array(g_2n, dtype=float)
    g_n.flags.writeable = False
    g_2n.flags.writeable = False
    return g_n, g_2n


def _crosscheck(closed, permanent_path, label):
    worst = np.max(np.abs(closed - permanent_path) / np.abs(permanent_path))
    logger.debug("closed form %s deviates from permanents by %.2e", label, worst)
    if worst > CROSSCHECK_RTOL:
        raise CrosscheckError(f"closed form {label} disagrees with permanents by {worst:.2e}")


@dataclass(frozen=True)
class MeasurementModel:
    """
    Detection scheme, geometry and frame count behind one correlation data set.

    ν and <I> are absorbed into I_eff. When `estimate_chi` is false the noise
    ratio is fixed at `chi` and the parameters are (a, I_eff); otherwise they
    are (a, I_eff, chi).
    """

    scheme: DetectionScheme
    source: SourceGeometry
    array: DetectorArray
    frames: int
    chi: float = 0.0
    estimate_chi: bool = False
    crosscheck: bool = field(default=False, compare=False)

    def __post_init__(self):
        if int(self.frames) != self.frames or self.frames < 2:
            raise ValueError(f"frame count N must be an integer >= 2, got {self.frames}")
        if self.chi < 0:
            raise ValueError(f"chi must be nonnegative, got {self.chi}")
        for pixel in self.scheme.reference_pixels + self.scheme.scan_pixels:
            if not 1 <= pixel <= self.array.pixel_count:
                raise IndexError(f"pixel index {pixel} outside 1..{self.array.pixel_count}")

    @property
    def parameter_names(self) -> tuple:
        return ("a", "i_eff", "chi") if self.estimate_chi else ("a", "i_eff")

    @property
    def order(self) -> int:
        return self.scheme.order

    @property
    def scan_positions(self) -> np.ndarray:
        return self.array.positions(self.scheme.scan_pixels)

    @property
    def reference_positions(self) -> np.ndarray:
        return self.array.positions(self.scheme.expanded_references)

    def unpack(self, values):
        values = np.asarray(values, dtype=float)
        a, i_eff = values[0], values[1]
        chi = values[2] if self.estimate_chi else self.chi
        if not a > 0 or not i_eff > 0 or chi < 0:
            raise ValueError(f"parameters out of range: a={a}, i_eff={i_eff}, chi={chi}")
        return a, i_eff, chi

    def admissible(self, values) -> bool:
        values = np.asarray(values, dtype=float)
        if not (values[0] > 0 and values[1] > 0):
            return False
        return not self.estimate_chi or values[2] >= 0

    def correlations(self, a):
        return unit_correlations(self.scheme, self.source.with_dimension(a), self.array, self.crosscheck)

    def unit_mean_shape(self, a: float, chi: float) -> np.ndarray:
        """Mean at I_eff = 1 without touching the G^(2n) cache."""
        source = self.source.with_dimension(a)
        scan, refs = self.scan_positions, self.reference_positions
        if self.scheme.scheme is ReferenceScheme.REPEATED:
            g_n = g_n_scheme1(scan, refs[0], self.order, 1.0, source, self.array)
        else:
            g_n = g_n_vector(scan, refs, 1.0, source, self.array)
        return np.asarray(g_n) * noise_moment_vector(scan, refs, NoiseModel.unit(chi))

    def mean(self, values) -> np.ndarray:
        a, i_eff, chi = self.unpack(values)
        g_n, _ = self.correlations(a)
        h_n = noise_moment_vector(self.scan_positions, self.reference_positions, NoiseModel.unit(chi))
        return i_eff ** self.order * g_n * h_n

    def covariance(self, values) -> np.ndarray:
        a, i_eff, chi = self.unpack(values)
        mu = self.mean(values)
        _, g_2n = self.correlations(a)
        h_2n = noise_moment_matrix(self.scan_positions, self.reference_positions, NoiseModel.unit(chi))
        cov = (i_eff ** (2 * self.order) * g_2n * h_2n - np.outer(mu, mu)) / self.frames
        return 0.5 * (cov + cov.T)

    def with_frames(self, frames: int) -> "MeasurementModel":
        return MeasurementModel(self.scheme, self.source, self.array, frames,
                                self.chi, self.estimate_chi, self.crosscheck)


def parameter_values(theta, model: GaussianModel) -> np.ndarray:
    """Raw parameter array in model.parameter_names order."""
    if isinstance(theta, ParameterVector):
        return theta.as_array(model.parameter_names)
    return np.atleast_1d(np.asarray(theta, dtype=float))


def mean_vector(theta, model: GaussianModel) -> np.ndarray:
    """Expected correlation at every scanning pixel."""
    return model.mean(parameter_values(theta, model))


def covariance_matrix(theta, model: GaussianModel) -> np.ndarray:
    """Covariance of the measured correlations, scaled by 1/N."""
    return model.covariance(parameter_values(theta, model))


def physical_moments(a: float, mean_intensity: float, noise: NoiseModel, model: MeasurementModel):
    """
    Mean and covariance in the physical parameters (a, <I>, nu, sigma).

    Agrees with the (a, I_eff, chi) parameterisation when I_eff = nu <I> and
    chi = sigma / nu.
    """
    g_n, g_2n = model.correlations(a)
    scan, refs = model.scan_positions, model.reference_positions
    mu = mean_intensity ** model.order * g_n * noise_moment_vector(scan, refs, noise)
    second = mean_intensity ** (2 * model.order) * g_2n * noise_moment_matrix(scan, refs, noise)
    cov = (second - np.outer(mu, mu)) / model.frames
    return mu, 0.5 * (cov + cov.T)


def factorize_covariance(cov: np.ndarray):
    """
    Cholesky factor of the covariance with a small diagonal jitter.

    Raises:
        CovarianceConditioningError: if the jittered matrix is not positive definite
    """
    cov = np.asarray(cov, dtype=float)
    jitter = COVARIANCE_JITTER * np.mean(np.diag(cov))
    if not np.isfinite(jitter) or jitter <= 0:
        raise CovarianceConditioningError("covariance has a non-positive mean diagonal")
    try:
        return linalg.cho_factor(cov + jitter * np.eye(cov.shape[0]), lower=True)
    except linalg.LinAlgError as exc:
        logger.warning("covariance not positive definite after jitter %.3g", jitter)
        raise CovarianceConditioningError(f"covariance not positive definite: {exc}") from exc


def _log_det(factor) -> float:
    return 2.0 * np.sum(np.log(np.diag(factor[0])))


def gaussian_log_density(data, mu, cov) -> float:
    residual = np.asarray(data, dtype=float) - mu
    factor = factorize_covariance(cov)
    quad = residual @ linalg.cho_solve(factor, residual)
    return -0.5 * (quad + _log_det(factor) + residual.size * np.log(2.0 * np.pi))


def log_likelihood(data, theta, model: GaussianModel) -> float:
    """ln p(data | theta) under the multivariate-normal model."""
    values = parameter_values(theta, model)
    data = np.asarray(data, dtype=float)
    mu = model.mean(values)
    if data.shape != mu.shape:
        raise ValueError(f"data has shape {data.shape}, model expects {mu.shape}")
    return gaussian_log_density(data, mu, model.covariance(values))


def param_jacobians(theta, model: GaussianModel):
    """
    Central finite-difference derivatives of mean and covariance.

    Args:
        theta: ParameterVector or raw parameter values
        model: Gaussian model

    Returns:
        (dmu, dcov) with dmu of shape (M, p) and dcov of shape (p, M, M)

    Raises:
        StepUnderflowError: if a parameter is zero or the step is not representable
    """
    values = parameter_values(theta, model)
    mean_columns = []
    cov_stack = []
    for k, value in enumerate(values):
        step = DERIVATIVE_STEP * abs(value)
        if step == 0 or not np.isfinite(step) or value + step == value:
            raise StepUnderflowError(
                f"finite-difference step underflows for parameter {model.parameter_names[k]}={value}"
            )
        upper = values.copy()
        lower = values.copy()
        upper[k] += step
        lower[k] -= step
        width = upper[k] - lower[k]
        mean_columns.append((model.mean(upper) - model.mean(lower)) / width)
        cov_stack.append((model.covariance(upper) - model.covariance(lower)) / width)
    return np.column_stack(mean_columns), np.stack(cov_stack)


@dataclass
class FisherInformation:
    """Fisher information split into its mean and covariance contributions."""

    matrix: np.ndarray
    mean_term: np.ndarray
    covariance_term: np.ndarray
    parameter_names: tuple = ()


@dataclass
class ModelDerivatives:
    mean: np.ndarray
    covariance: np.ndarray
    factor: tuple
    mean_jacobian: np.ndarray
    covariance_jacobian: np.ndarray


def evaluate_derivatives(theta, model: GaussianModel) -> ModelDerivatives:
    values = parameter_values(theta, model)
    cov = model.covariance(values)
    dmu, dcov = param_jacobians(values, model)
    return ModelDerivatives(model.mean(values), cov, factorize_covariance(cov), dmu, dcov)


def _fisher(derivs: ModelDerivatives, names=()) -> FisherInformation:
    solved_mean = linalg.cho_solve(derivs.factor, derivs.mean_jacobian)
    mean_term = derivs.mean_jacobian.T @ solved_mean
    solved_cov = [linalg.cho_solve(derivs.factor, d) for d in derivs.covariance_jacobian]
    p = len(solved_cov)
    cov_term = np.empty((p, p))
    for k in range(p):
        for l in range(p):
            cov_term[k, l] = 0.5 * np.sum(solved_cov[k] * solved_cov[l].T)
    mean_term = 0.5 * (mean_term + mean_term.T)
    cov_term = 0.5 * (cov_term + cov_term.T)
    return FisherInformation(mean_term + cov_term, mean_term, cov_term, tuple(names))


def _score(derivs: ModelDerivatives, data) -> np.ndarray:
    residual = np.asarray(data, dtype=float) - derivs.mean
    weights = linalg.cho_solve(derivs.factor, residual)
    gradient = derivs.mean_jacobian.T @ weights
    for k, dcov in enumerate(derivs.covariance_jacobian):
        trace = np.trace(linalg.cho_solve(derivs.factor, dcov))
        gradient[k] += -0.5 * trace + 0.5 * weights @ dcov @ weights
    return gradient


def fisher_information(theta, model: GaussianModel) -> FisherInformation:
    """Fisher information of the Gaussian model: mean term plus covariance term."""
    return _fisher(evaluate_derivatives(theta, model), model.parameter_names)


def score(data, theta, model: GaussianModel) -> np.ndarray:
    """Gradient of the log-likelihood with respect to the parameters."""
    return _score(evaluate_derivatives(theta, model), data)


def score_and_fisher(data, theta, model: GaussianModel):
    derivs = evaluate_derivatives(theta, model)
    return _score(derivs, data), _fisher(derivs, model.parameter_names)


def solve_fisher(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """
    Solve I x = rhs with the Fisher matrix rescaled to unit diagonal.

    Raises:
        SingularFisherError: if the matrix is not positive definite
    """
    matrix = np.asarray(matrix, dtype=float)
    diag = np.diag(matrix)
    if np.any(~np.isfinite(matrix)) or np.any(diag <= 0):
        raise SingularFisherError("Fisher matrix has non-positive or non-finite diagonal")
    scale = 1.0 / np.sqrt(diag)
    scaled = matrix * np.outer(scale, scale)
    try:
        factor = linalg.cho_factor(scaled, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularFisherError(f"Fisher matrix is singular: {exc}") from exc
    rhs = np.asarray(rhs, dtype=float)
    scale_rhs = scale[:, None] if rhs.ndim == 2 else scale
    return scale_rhs * linalg.cho_solve(factor, scale_rhs * rhs)


def bounds_from_fisher(matrix: np.ndarray) -> np.ndarray:
    """Diagonal of the inverse Fisher matrix."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    return np.diag(solve_fisher(matrix, np.eye(matrix.shape[0])))


def crb(theta, model: GaussianModel) -> np.ndarray:
    """Cramer-Rao lower bounds on the variance of each parameter, in parameter_names order."""
    return bounds_from_fisher(fisher_information(theta, model).matrix)
