from dataclasses import dataclass

import numpy as np
import pandas as pd
import pytest

from config_utils import load_config, preset_path
from estimation import (
    DampingExhaustedError,
    PeakNotFoundError,
    ScoringConfig,
    ScoringUpdate,
    StudyConfig,
    crb_at_truth,
    crb_scan,
    estimate,
    initial_guess,
    monte_carlo_study,
    run_trial,
    score_step,
)
from geometry import coherence_zero_separations
from noise import NoiseModel
from statistics_utils import (
    DetectionScheme,
    MeasurementModel,
    ParameterVector,
    ReferenceScheme,
    crb,
    mean_vector,
)

V = np.array([1.0, 2.0, 0.5, -1.0])
W = np.array([0.0, 1.0, 1.0, 3.0])
DATA = np.array([0.9, 1.7, 0.2, -0.5])


@dataclass(frozen=True)
class LinearModel:
    parameter_names: tuple = ("p", "q")

    def mean(self, values):
        return values[0] * V + values[1] * W

    def covariance(self, values):
        return 0.05 * np.eye(4) + 0.01 * np.ones((4, 4))


class NeverAdmissible(LinearModel):
    def admissible(self, values):
        return False


def generalised_least_squares(data):
    jacobian = np.column_stack([V, W])
    weight = np.linalg.inv(LinearModel().covariance(None))
    return np.linalg.solve(jacobian.T @ weight @ jacobian, jacobian.T @ weight @ data)


@pytest.fixture
def sparse_model(wide_disc, small_array):
    scheme = DetectionScheme(2, ReferenceScheme.REPEATED, (20,), range(1, 42, 5))
    return MeasurementModel(scheme, wide_disc, small_array, frames=10 ** 12)


@pytest.fixture
def small_study(wide_disc, small_array):
    return StudyConfig(
        source=wide_disc,
        array=small_array,
        noise=NoiseModel(0.5, 0.0),
        orders=(2, 3),
        frames=2000,
        repetitions=3,
        seed=7,
    )


def test_scoring_config_validation():
    with pytest.raises(ValueError):
        ScoringConfig(max_iterations=0)
    with pytest.raises(ValueError):
        ScoringConfig(tolerance=0.0)
    with pytest.raises(ValueError):
        ScoringConfig(damping_factor=1.5)
    with pytest.raises(ValueError):
        ScoringConfig(decrement_tolerance=0.1, stall_decrement=0.01)


def test_convergence_uses_the_undamped_step():
    config = ScoringConfig(tolerance=1e-8, decrement_tolerance=1e-6)
    values = np.array([2.0, 1.0])
    assert not ScoringUpdate(values, 0.0, np.array([1e-3, 0.0]), 1.0).converged(config)
    assert ScoringUpdate(values, 0.0, np.array([1e-9, 1e-9]), 1.0).converged(config)
    assert ScoringUpdate(values, 0.0, np.array([1e-3, 0.0]), 1e-7).converged(config)
    assert ScoringUpdate(values, 0.0, np.array([1e-3, 0.0]), 1e-3, stalled=True).converged(config)


def test_score_step_solves_linear_model_in_one_step():
    step = score_step(DATA, np.array([0.3, 0.3]), LinearModel())
    np.testing.assert_allclose(step, generalised_least_squares(DATA), rtol=1e-6)


def test_estimate_converges_on_linear_model():
    result = estimate(DATA, LinearModel(), theta0=np.array([0.3, 0.3]))
    assert result.converged
    assert result.iterations <= 3
    np.testing.assert_allclose(result.theta_hat, generalised_least_squares(DATA), rtol=1e-6)
    assert result.history[-1] >= result.history[0]
    assert result.crb.shape == (2,)


def test_damping_exhausted_when_no_step_is_admissible():
    with pytest.raises(DampingExhaustedError):
        score_step(DATA, np.array([0.3, 0.3]), NeverAdmissible())


def test_rejected_step_at_the_optimum_keeps_the_point():
    optimum = generalised_least_squares(DATA)
    np.testing.assert_array_equal(score_step(DATA, optimum, NeverAdmissible()), optimum)


def test_non_convergence_is_flagged():
    config = ScoringConfig(max_iterations=1)
    result = estimate(DATA, LinearModel(), config, theta0=np.array([0.3, 0.3]))
    assert not result.converged
    assert result.iterations == 1


SPARSE_SCAN = range(1, 42, 5)


@pytest.mark.parametrize("order, scheme", [
    (2, ReferenceScheme.REPEATED),
    (3, ReferenceScheme.REPEATED),
    (4, ReferenceScheme.REPEATED),
    (5, ReferenceScheme.REPEATED),
    (2, ReferenceScheme.DISTINCT),
    (3, ReferenceScheme.DISTINCT),
    (4, ReferenceScheme.DISTINCT),
])
def test_noiseless_data_is_a_fixed_point(wide_disc, small_array, order, scheme):
    if scheme is ReferenceScheme.REPEATED:
        refs = (20,)
    else:
        refs = DetectionScheme.distinct(order, small_array.pixel_count, 6).reference_pixels
    model = MeasurementModel(DetectionScheme(order, scheme, refs, SPARSE_SCAN), wide_disc, small_array,
                             frames=10 ** 12)
    truth = ParameterVector(1e-3, 0.5)
    data = mean_vector(truth, model)
    result = estimate(data, model, theta0=truth)
    assert result.converged
    assert isinstance(result.theta_hat, ParameterVector)
    assert result.theta_hat.a == pytest.approx(truth.a, rel=1e-6)
    assert result.theta_hat.i_eff == pytest.approx(truth.i_eff, rel=1e-6)


def test_initial_guess_recovers_noiseless_parameters(sparse_model):
    truth = ParameterVector(1.2e-3, 0.4)
    data = mean_vector(truth, sparse_model)
    guess = initial_guess(data, sparse_model)
    assert guess.a == pytest.approx(truth.a, rel=1e-4)
    assert guess.i_eff == pytest.approx(truth.i_eff, rel=1e-4)
    assert guess.chi is None


def test_initial_guess_seeds_chi_from_prior(wide_disc, small_array):
    scheme = DetectionScheme.repeated(2, small_array.pixel_count)
    model = MeasurementModel(scheme, wide_disc, small_array, frames=1000, chi=0.02, estimate_chi=True)
    data = mean_vector(ParameterVector(1e-3, 0.5, 0.02), model)
    assert initial_guess(data, model, chi_prior=0.03).chi == 0.03


def test_initial_guess_needs_a_peak(sparse_model):
    with pytest.raises(PeakNotFoundError):
        initial_guess(np.ones(9), sparse_model)
    with pytest.raises(PeakNotFoundError):
        initial_guess(-np.ones(9), sparse_model)
    with pytest.raises(ValueError):
        initial_guess(np.ones(4), sparse_model)


def test_study_config_validation(small_study):
    with pytest.raises(ValueError):
        StudyConfig(small_study.source, small_study.array, small_study.noise, repetitions=1)
    with pytest.raises(ValueError):
        StudyConfig(small_study.source, small_study.array, small_study.noise, start="middle")
    with pytest.raises(ValueError):
        StudyConfig(small_study.source, small_study.array, small_study.noise, scheme="distinct")


def test_study_truth_and_schemes(small_study):
    assert small_study.truth() == ParameterVector(1e-3, 0.5, None)
    assert small_study.detection_scheme(3).reference_pixels == (20,)
    assert small_study.measurement_model(2).parameter_names == ("a", "i_eff")
    bounds = crb_at_truth(small_study)
    assert set(bounds) == {2, 3}


def test_run_trial_records_every_order(small_study):
    records = run_trial(small_study, 0)
    assert [r["n"] for r in records] == [2, 3]
    for record in records:
        assert record["trial"] == 0
        assert record["scheme"] == "repeated"
        assert record["converged"], record["error"]
        assert record["error"] == ""
        assert record["a_hat"] == pytest.approx(1e-3, rel=0.2)


def test_monte_carlo_study_is_deterministic(small_study):
    first = monte_carlo_study(small_study, progress=False)
    again = monte_carlo_study(small_study, progress=False)
    assert len(first.trials) == 6
    assert list(first.summary["n"]) == [2, 3]
    assert list(first.nuisance["n"]) == [2, 3]
    pd.testing.assert_frame_equal(first.trials, again.trials)
    pd.testing.assert_frame_equal(first.summary, again.summary)
    assert first.valid and again.valid
    assert first.trials["converged"].all()
    assert (first.trials["error"] == "").all()


def test_crb_scan_skips_separations_off_the_array(small_study):
    config = StudyConfig(small_study.source, small_study.array, small_study.noise,
                         orders=(2, 3), scheme="distinct", separation=5)
    table = crb_scan(config, [5, 45])
    assert list(table.columns) == ["d", "n", "std_dev_crb_um"]
    assert list(zip(table["d"], table["n"])) == [(5, 2), (5, 3), (45, 2)]
    with pytest.raises(ValueError):
        crb_scan(config, [0])


@pytest.mark.slow
def test_study_independent_of_worker_count(small_study):
    from dataclasses import replace

    serial = monte_carlo_study(small_study, progress=False)
    parallel = monte_carlo_study(replace(small_study, threads=2), progress=False)
    pd.testing.assert_frame_equal(serial.trials, parallel.trials)


def test_constant_loss_bounds_at_defaults():
    study = load_config(preset_path("table_1")).study_config()
    bounds = {n: b[0] * 1e12 for n, b in crb_at_truth(study).items()}
    expected = {2: 0.1518, 3: 0.1467, 4: 0.2517, 5: 0.5180}
    for order, value in expected.items():
        assert bounds[order] == pytest.approx(value, rel=2e-3)
    assert bounds[3] < bounds[2] < bounds[4] < bounds[5]


def test_distinct_reference_bounds_at_first_zero():
    study = load_config(preset_path("table_2")).study_config()
    bounds = {n: b[0] for n, b in crb_at_truth(study).items()}
    assert bounds[3] < bounds[4] < bounds[2]


@pytest.mark.slow
def test_third_order_minima_sit_at_coherence_zeros():
    config = load_config(preset_path("fig_5"))
    study = config.study_config(scheme=ReferenceScheme.DISTINCT, separation=1, orders=(3,))
    zeros = coherence_zero_separations(study.source, study.array, 2)
    windows = [range(int(zero) - 12, int(zero) + 13) for zero in zeros]
    for zero, window in zip(zeros, windows):
        table = crb_scan(study, window)
        best = int(table.loc[table["std_dev_crb_um"].idxmin(), "d"])
        assert window[0] < best < window[-1]
        assert abs(best - zero) <= 6


@pytest.mark.slow
def test_slit_fourth_order_matches_third_at_sinc_zero():
    config = load_config(preset_path("fig_7"))
    study = config.study_config(scheme=ReferenceScheme.DISTINCT, separation=1, orders=(2, 3, 4))
    table = crb_scan(study, range(146, 153)).pivot(index="d", columns="n", values="std_dev_crb_um")
    assert (table[4] <= table[2]).all()
    ratio = table[4] / table[3]
    assert ratio.between(0.9, 1.2).all()


@pytest.mark.slow
def test_bound_grows_with_efficiency_spread():
    config = load_config(preset_path("fig_6"))
    for nu in config.nu_list:
        variances = []
        for sigma in config.sigma_values():
            study = config.study_config(noise=NoiseModel(nu, float(sigma)), estimate_chi=False)
            variances.append(crb(study.truth(), study.measurement_model(2))[0])
        variances = np.array(variances)
        assert np.all(np.diff(variances) >= -1e-9 * variances[:-1])


@pytest.mark.slow
def test_constant_loss_trials_converge_at_defaults():
    study = load_config(preset_path("table_1")).study_config()
    for trial in range(3):
        for record in run_trial(study, trial):
            assert record["converged"], record["error"]
            assert record["a_hat"] == pytest.approx(1e-4, rel=0.05)


@pytest.mark.slow
@pytest.mark.parametrize("preset, orders", [("table_1", (3, 2, 4, 5)), ("table_2", (3, 4, 2))])
def test_simulated_variance_tracks_the_bound(preset, orders):
    import os
    from dataclasses import replace

    study = replace(load_config(preset_path(preset)).study_config(), threads=os.cpu_count() or 1)
    report = monte_carlo_study(study, progress=False)
    assert report.valid
    summary = report.summary.set_index("n")
    crbs = [summary.loc[n, "var_crb_um2"] for n in orders]
    assert crbs == sorted(crbs)
    ratio = summary["var_sim_um2"] / summary["var_crb_um2"]
    assert ratio.between(0.9, 1.3).all(), ratio.to_dict()
    if preset == "table_1":
        for order in (2, 3):
            assert abs(summary.loc[order, "mean_a_um"] - 100.0) <= 0.2
