"""
Maximum-likelihood estimation of the source dimension by scoring, and the
Monte Carlo study that compares the achieved variance with the Cramer-Rao
bound.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import optimize
from tqdm import tqdm

from analytics_utils import (
    calculate_nuisance_summary,
    calculate_study_summary,
    failure_fractions,
    prepare_trials_dataframe,
)
from geometry import (
    DetectorArray,
    SourceGeometry,
    coherence_zero_separations,
)
from noise import NoiseModel
from simulator import stream_correlations
from statistics_utils import (
    DetectionScheme,
    FisherInformation,
    GaussianModel,
    MeasurementModel,
    ParameterVector,
    ReferenceScheme,
    SingularFisherError,
    bounds_from_fisher,
    crb,
    fisher_information,
    log_likelihood,
    parameter_values,
    score_and_fisher,
    solve_fisher,
)

logger = logging.getLogger(__name__)

DEFAULT_CHI_PRIOR = 0.02
# Studies with a larger share of failed trials are reported as invalid.
MAX_FAILURE_FRACTION = 0.01
# Smallest relative peak height above the data minimum accepted by initial_guess.
MIN_CONTRAST = 0.05
GUESS_GRID_POINTS = 64
# Relative tolerance of the bounded refinement of the guessed dimension.
GUESS_RTOL = 1e-8


class DampingExhaustedError(RuntimeError):
    """No admissible, non-decreasing step found after the allowed halvings."""


class PeakNotFoundError(ValueError):
    """Data shows no correlation peak to seed the estimate from."""


@dataclass(frozen=True)
class ScoringConfig:
    """
    Scoring iteration settings.

    Iteration stops when the undamped step is below `tolerance` relative to
    every parameter, or when the Newton decrement score' I^-1 score (twice the
    predicted log-likelihood gain) drops below `decrement_tolerance`. A step
    rejected by every halving counts as convergence when the decrement is below
    `stall_decrement`.
    """

    max_iterations: int = 50
    tolerance: float = 1e-8
    damping: bool = True
    damping_factor: float = 0.5
    max_halvings: int = 10
    decrement_tolerance: float = 1e-6
    stall_decrement: float = 1e-2

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not 0 < self.damping_factor <= 1:
            raise ValueError("damping_factor must lie in (0, 1]")
        if not 0 < self.decrement_tolerance <= self.stall_decrement:
            raise ValueError("need 0 < decrement_tolerance <= stall_decrement")


@dataclass
class EstimationResult:
    theta_hat: object
    iterations: int
    converged: bool
    log_likelihood: float
    fisher: FisherInformation
    crb: np.ndarray
    history: List[float] = field(default_factory=list)


@dataclass
class ScoringUpdate:
    values: np.ndarray
    log_likelihood: float
    step: np.ndarray
    decrement: float
    stalled: bool = False

    def converged(self, config: ScoringConfig) -> bool:
        if self.stalled or self.decrement <= config.decrement_tolerance:
            return True
        reference = np.maximum(np.abs(self.values), np.finfo(float).tiny)
        return bool(np.all(np.abs(self.step) <= config.tolerance * reference))


def _wrap(values, model: GaussianModel, like):
    if isinstance(model, MeasurementModel) and (like is None or isinstance(like, ParameterVector)):
        chi = None if model.estimate_chi else model.chi
        return ParameterVector.from_array(values, model.parameter_names, chi=chi)
    return np.asarray(values, dtype=float)


def _admissible(values, model) -> bool:
    check = getattr(model, "admissible", None)
    return True if check is None else bool(check(values))


def _scoring_update(data, values, current_ll, model, config: ScoringConfig) -> ScoringUpdate:
    """One scoring step with positivity halving and optional likelihood damping."""
    gradient, fisher = score_and_fisher(data, values, model)
    step = solve_fisher(fisher.matrix, gradient)
    decrement = float(gradient @ step)
    scale = 1.0
    floor = current_ll - 1e-10 * max(1.0, abs(current_ll))
    for halving in range(config.max_halvings + 1):
        candidate = values + scale * step
        if _admissible(candidate, model):
            try:
                candidate_ll = log_likelihood(data, candidate, model)
            except np.linalg.LinAlgError:
                candidate_ll = -np.inf
            if not config.damping and np.isfinite(candidate_ll):
                return ScoringUpdate(candidate, candidate_ll, step, decrement)
            if candidate_ll >= floor:
                return ScoringUpdate(candidate, candidate_ll, step, decrement)
        logger.debug("rejecting scoring step at scale %.3g", scale)
        scale *= config.damping_factor
    if decrement <= config.stall_decrement:
        logger.debug("step rejected at the likelihood rounding floor (decrement %.3g)", decrement)
        return ScoringUpdate(values, current_ll, step, decrement, stalled=True)
    raise DampingExhaustedError(
        f"no acceptable scoring step after {config.max_halvings} halvings (decrement {decrement:.3g})"
    )


def score_step(data, theta, model: GaussianModel, config: Optional[ScoringConfig] = None):
    """
    Advance theta by one iteration of I(theta) theta' = I(theta) theta + score.

    Raises:
        SingularFisherError: if the Fisher matrix cannot be inverted
        DampingExhaustedError: if every halved step is rejected
    """
    config = config or ScoringConfig()
    values = parameter_values(theta, model)
    current = log_likelihood(data, values, model)
    update = _scoring_update(np.asarray(data, dtype=float), values, current, model, config)
    return _wrap(update.values, model, theta)


def _shape_misfit(data, shape):
    scale = float(shape @ data) / float(shape @ shape)
    residual = data - scale * shape
    return float(residual @ residual), scale


def initial_guess(data, model: MeasurementModel, chi_prior: float = DEFAULT_CHI_PRIOR) -> ParameterVector:
    """
    Rough starting point for scoring.

    The correlation peak is located and the analytic unit-intensity profile
    is matched to the data over source sizes whose first coherence zero lies
    between 2 pixels and twice the array length; the best size is refined by
    a bounded scalar search. I_eff follows from the least-squares intensity
    scale, which on a flat far-field plateau is plateau / (n-1)! to the n-th
    root.

    Raises:
        PeakNotFoundError: for flat or non-positive data
    """
    data = np.asarray(data, dtype=float)
    if data.shape != (len(model.scheme.scan_pixels),):
        raise ValueError(f"data has shape {data.shape}, expected ({len(model.scheme.scan_pixels)},)")
    if not np.all(np.isfinite(data)) or np.max(data) <= 0:
        raise PeakNotFoundError("data is not finite and positive")
    peak = int(np.argmax(data))
    contrast = (data[peak] - np.min(data)) / data[peak]
    if contrast < MIN_CONTRAST:
        raise PeakNotFoundError(f"no correlation peak found (contrast {contrast:.3g})")
    scan = np.asarray(model.scheme.scan_pixels)
    nearest_ref = min(model.scheme.reference_pixels, key=lambda s: abs(s - scan[peak]))
    logger.debug("peak at pixel %d, nearest reference %d", scan[peak], nearest_ref)

    chi = chi_prior if model.estimate_chi else model.chi
    # The first-zero separation scales as 1/a.
    first_zero = coherence_zero_separations(model.source, model.array, 1)[0]
    span = np.geomspace(2.0, 2.0 * model.array.pixel_count, GUESS_GRID_POINTS)
    grid = model.source.dimension * first_zero / span

    misfits = [_shape_misfit(data, model.unit_mean_shape(a, chi))[0] for a in grid]
    best = int(np.argmin(misfits))
    lower = grid[min(best + 1, grid.size - 1)]
    upper = grid[max(best - 1, 0)]
    if upper > lower:
        refined = optimize.minimize_scalar(
            lambda a: _shape_misfit(data, model.unit_mean_shape(a, chi))[0],
            bounds=(lower, upper), method="bounded",
            options={"xatol": GUESS_RTOL * lower},
        )
        a0 = float(refined.x)
    else:
        a0 = float(grid[best])
    _, scale = _shape_misfit(data, model.unit_mean_shape(a0, chi))
    if not scale > 0:
        raise PeakNotFoundError("profile match gives a non-positive intensity scale")
    i_eff0 = scale ** (1.0 / model.order)
    return ParameterVector(a0, i_eff0, chi_prior if model.estimate_chi else None)


def estimate(data, model: GaussianModel, config: Optional[ScoringConfig] = None,
             theta0=None, chi_prior: float = DEFAULT_CHI_PRIOR) -> EstimationResult:
    """
    Iterate scoring from theta0 (or initial_guess) until ScoringConfig reports
    convergence.

    Non-convergence within max_iterations is returned with converged=False.
    """
    config = config or ScoringConfig()
    data = np.asarray(data, dtype=float)
    if theta0 is None:
        theta0 = initial_guess(data, model, chi_prior)
    values = parameter_values(theta0, model)
    current = log_likelihood(data, values, model)
    history = [current]
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        update = _scoring_update(data, values, current, model, config)
        values, current = update.values, update.log_likelihood
        history.append(current)
        if update.converged(config):
            converged = True
            break
    if not converged:
        logger.warning("scoring did not converge in %d iterations", config.max_iterations)
    fisher = fisher_information(values, model)
    return EstimationResult(
        theta_hat=_wrap(values, model, theta0),
        iterations=iterations,
        converged=converged,
        log_likelihood=current,
        fisher=fisher,
        crb=bounds_from_fisher(fisher.matrix),
        history=history,
    )


@dataclass(frozen=True)
class StudyConfig:
    """Everything a Monte Carlo study needs; picklable for worker processes."""

    source: SourceGeometry
    array: DetectorArray
    noise: NoiseModel
    orders: tuple = (2, 3, 4, 5)
    scheme: ReferenceScheme = ReferenceScheme.REPEATED
    reference_pixel: Optional[int] = None
    separation: Optional[int] = None
    mean_intensity: float = 1.0
    frames: int = 50000
    repetitions: int = 1000
    seed: int = 20140601
    estimate_chi: bool = False
    chi_prior: float = DEFAULT_CHI_PRIOR
    scoring: ScoringConfig = ScoringConfig()
    threads: int = 1
    start: str = "guess"
    fixed_trial_stream: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scheme", ReferenceScheme(self.scheme))
        object.__setattr__(self, "orders", tuple(int(n) for n in self.orders))
        if self.repetitions < 2:
            raise ValueError(f"a study needs at least 2 repetitions, got {self.repetitions}")
        if self.start not in ("guess", "truth"):
            raise ValueError(f"start must be 'guess' or 'truth', got {self.start!r}")
        if self.scheme is ReferenceScheme.DISTINCT and self.separation is None:
            raise ValueError("distinct-reference studies need a separation d")

    def detection_scheme(self, order: int) -> DetectionScheme:
        if self.scheme is ReferenceScheme.REPEATED:
            return DetectionScheme.repeated(order, self.array.pixel_count, self.reference_pixel)
        return DetectionScheme.distinct(order, self.array.pixel_count, self.separation,
                                        self.reference_pixel)

    def measurement_model(self, order: int) -> MeasurementModel:
        return MeasurementModel(self.detection_scheme(order), self.source, self.array,
                                self.frames, chi=self.noise.chi, estimate_chi=self.estimate_chi)

    def truth(self) -> ParameterVector:
        return ParameterVector(
            self.source.dimension,
            self.noise.nu * self.mean_intensity,
            self.noise.chi if self.estimate_chi else None,
        )


@dataclass
class StudyReport:
    """Per-order summary rows plus the per-trial and nuisance tables behind them."""

    summary: pd.DataFrame
    trials: pd.DataFrame
    nuisance: pd.DataFrame
    valid: bool


def run_trial(config: StudyConfig, trial: int) -> List[dict]:
    """Simulate one data set and estimate every configured order from it."""
    stream = 0 if config.fixed_trial_stream else trial
    models = {order: config.measurement_model(order) for order in config.orders}
    data = stream_correlations(
        config.source, config.array, config.mean_intensity, config.noise, config.frames,
        [model.scheme for model in models.values()], config.seed, stream,
    )
    truth = config.truth()
    records = []
    for order, model in models.items():
        record = {"trial": trial, "n": order, "scheme": config.scheme.value,
                  "d": model.scheme.separation}
        try:
            theta0 = truth if config.start == "truth" else None
            result = estimate(data[model.scheme], model, config.scoring, theta0, config.chi_prior)
            theta = result.theta_hat
            record.update(
                converged=result.converged,
                iterations=result.iterations,
                a_hat=theta.a,
                i_eff_hat=theta.i_eff,
                chi_hat=theta.chi,
                crb_a_at_estimate=result.crb[0],
                log_likelihood=result.log_likelihood,
                error="" if result.converged else "not converged",
            )
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            logger.debug("trial %d order %d failed: %s", trial, order, exc)
            record.update(converged=False, error=f"{type(exc).__name__}: {exc}")
        records.append(record)
    return records


def crb_at_truth(config: StudyConfig) -> dict:
    """Cramer-Rao bounds at the true parameters, keyed by order."""
    truth = config.truth()
    return {order: crb(truth, config.measurement_model(order)) for order in config.orders}


def monte_carlo_study(config: StudyConfig, progress: bool = True) -> StudyReport:
    """
    Run config.repetitions independent trials and aggregate them per order.

    Each trial feeds every order from the same simulated data set. A failed
    trial is recorded, never fatal.
    """
    bounds = crb_at_truth(config)
    trials = range(config.repetitions)
    records = []
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as executor:
            results = executor.map(run_trial, [config] * config.repetitions, trials)
            for trial_records in tqdm(results, total=config.repetitions, disable=not progress,
                                      desc="trials"):
                records.extend(trial_records)
    else:
        for trial in tqdm(trials, disable=not progress, desc="trials"):
            records.extend(run_trial(config, trial))

    trials_df = prepare_trials_dataframe(records)
    summary = calculate_study_summary(trials_df, {n: b[0] for n, b in bounds.items()})
    nuisance = calculate_nuisance_summary(trials_df, {n: b[1] for n, b in bounds.items()})
    fractions = failure_fractions(trials_df)
    valid = all(fraction <= MAX_FAILURE_FRACTION for fraction in fractions.values())
    if not valid:
        logger.warning("study invalid: failure fractions %s exceed %.0f%%",
                       fractions, 100 * MAX_FAILURE_FRACTION)
    return StudyReport(summary, trials_df, nuisance, valid)


def crb_scan(config: StudyConfig, separations: Sequence[int]) -> pd.DataFrame:
    """
    CRB standard deviation of a for every (d, n), with no simulation.

    Separations whose references do not fit on the array are skipped.
    """
    rows = []
    truth = config.truth()
    for d in separations:
        if d < 1:
            raise ValueError(f"reference separation must be >= 1, got {d}")
        for order in config.orders:
            try:
                scheme = DetectionScheme.distinct(order, config.array.pixel_count, d, config.reference_pixel)
            except ValueError as exc:
                logger.debug("skipping d=%d n=%d: %s", d, order, exc)
                continue
            model = MeasurementModel(scheme, config.source, config.array, config.frames,
                                     chi=config.noise.chi, estimate_chi=config.estimate_chi)
            try:
                variance = crb(truth, model)[0]
            except (SingularFisherError, np.linalg.LinAlgError) as exc:
                logger.warning("CRB undefined at d=%d n=%d: %s", d, order, exc)
                variance = np.nan
            rows.append({"d": int(d), "n": order, "std_dev_crb_um": np.sqrt(variance) * 1e6})
    return pd.DataFrame(rows, columns=["d", "n", "std_dev_crb_um"])
