import numpy as np
import pytest

from fastqrs.preprocess import rqr_process
from fastqrs.propensity import fit_logit, predict_propensity
from fastqrs.qrs import (
    InstrumentConfig,
    QrsFit,
    estimate,
    estimate_qrs_baseline,
    estimate_qrs_reduced,
    estimate_qrs_refined,
    qrs_objective,
    select_candidates,
)
from fastqrs.rqr import RqrProblem, solve_interior_point
from fastqrs.types import CopulaParamGrid, QuantileGrid, validate_dataset

THETAS = CopulaParamGrid(np.round(np.arange(-6, 7) * 0.1, 12))
FINE = QuantileGrid(np.round(np.arange(1, 20) / 20, 12), 0.05)
COARSE = QuantileGrid([0.25, 0.5, 0.75], 0.05)


def test_objective_zero_when_shares_match():
    n = 100
    y = np.arange(1.0, n + 1)
    data = validate_dataset({"y": y, "d": np.ones(n), "z1": np.linspace(-1, 1, n)})
    grid = QuantileGrid(np.round(np.arange(1, 10) / 10, 12), 0.1)
    betas = grid.values[:, None] * n
    ps = np.full(n, 0.6)
    # indicator shares equal tau exactly; only the float sum of the tau values is inexact
    assert qrs_objective(data, betas, 0.0, ps, grid, InstrumentConfig(degree=0)) <= 1e-15


def test_objective_deterministic_and_checked(small_data):
    ps = predict_propensity(fit_logit(small_data), small_data)
    betas = np.tile([0.0, 1.0], (len(FINE), 1))
    a = qrs_objective(small_data, betas, 0.3, ps, FINE)
    b = qrs_objective(small_data, betas.copy(), 0.3, ps, FINE)
    assert a == b
    with pytest.raises(ValueError):
        qrs_objective(small_data, betas[:3], 0.3, ps, FINE)


def test_objective_small_at_truth_without_selection():
    rng = np.random.default_rng(8)
    n = 100_000
    x2 = rng.uniform(2, 3, n)
    u = rng.uniform(size=n)
    from scipy.special import ndtri

    y = ndtri(u) + 0.5 * x2 * u
    data = validate_dataset({"y": y, "d": np.ones(n), "z1": rng.normal(size=n), "x2": x2})
    ps = np.full(n, 1 - 1e-10)
    grid = QuantileGrid.percentiles()
    res = rqr_process(data, 0.0, grid, ps)
    assert qrs_objective(data, res.beta, 0.0, ps, grid) <= 0.01


def test_weighting_hook():
    instr = InstrumentConfig(degree=1, weighting=np.diag([4.0, 0.0]))
    assert instr.norm(np.array([1.0, 5.0])) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        InstrumentConfig(degree=2, weighting=np.eye(2))


@pytest.fixture(scope="module")
def fits(request):
    from fastqrs.simulation import DgpConfig, simulate_dgp

    data, _ = simulate_dgp(DgpConfig(n=1500, k=2, theta_true=0.5, seed=11))
    base = estimate_qrs_baseline(data, THETAS, FINE, coarse_grid=COARSE)
    alg2 = estimate_qrs_reduced(data, THETAS, FINE, COARSE)
    alg3 = estimate_qrs_refined(data, THETAS, FINE, COARSE, p=3)
    return data, base, alg2, alg3


def test_exhaustive_refinement_equals_baseline(fits):
    data, base, _, _ = fits
    full = estimate_qrs_refined(data, THETAS, FINE, COARSE, p=len(THETAS))
    assert full.theta_hat == base.theta_hat
    np.testing.assert_array_equal(full.beta_process, base.beta_process)
    np.testing.assert_array_equal(full.candidate_objectives, base.objective_profile)


def test_refined_candidates(fits):
    _, _, alg2, alg3 = fits
    assert alg3.candidates.size == 3
    assert np.all(np.diff(alg3.candidates) > 0)
    assert alg3.theta_hat in alg3.candidates
    np.testing.assert_array_equal(alg2.objective_profile, alg3.objective_profile)
    order = np.argsort(alg2.objective_profile, kind="stable")[:3]
    np.testing.assert_array_equal(alg3.candidates, THETAS.values[np.sort(order)])


def test_select_candidates_ties():
    prof = np.array([3.0, 1.0, 1.0, 2.0, 1.0])
    np.testing.assert_array_equal(select_candidates(prof, 2), [1, 2])
    with pytest.raises(ValueError):
        select_candidates(prof, 0)


def test_profile_recomputes(fits):
    data, base, alg2, _ = fits
    ps = predict_propensity(fit_logit(data), data)
    for a in (0, 5, 12):
        t = float(THETAS.values[a])
        v = qrs_objective(data, alg2.coarse_beta[a], t, ps, COARSE)
        assert abs(v - alg2.objective_profile[a]) <= 1e-12
    a = base.theta_index
    v = qrs_objective(data, base.beta_process, base.theta_hat, ps, FINE)
    assert abs(v - base.objective_profile[a]) <= 1e-12


def test_baseline_stores_coarse_cells(fits):
    _, base, alg2, _ = fits
    assert base.coarse_beta.shape == (len(THETAS), len(COARSE), 2)
    np.testing.assert_array_equal(base.coarse_beta, alg2.coarse_beta)


def test_instrument_scaling_keeps_argmin(fits):
    data, _, alg2, _ = fits
    scaled = estimate_qrs_reduced(data, THETAS, FINE, COARSE, InstrumentConfig(scale=10.0))
    assert scaled.theta_hat == alg2.theta_hat
    np.testing.assert_allclose(scaled.objective_profile, 10 * alg2.objective_profile, rtol=1e-12)


def test_zero_only_grid_is_plain_qr(small_data):
    fit = estimate_qrs_reduced(small_data, CopulaParamGrid([0.0]), FINE, COARSE)
    part = small_data.participants
    assert fit.theta_hat == 0.0
    for q, tau in enumerate(FINE.values):
        ref = solve_interior_point(RqrProblem(small_data.y[part], small_data.x[part], tau))
        np.testing.assert_allclose(fit.beta_process[q], ref.beta, atol=1e-8)


def test_repeated_matches_baseline_profile(fits):
    data, base, _, _ = fits
    alg1 = estimate("alg1", data, THETAS, FINE, COARSE)
    np.testing.assert_allclose(alg1.objective_profile, base.objective_profile, atol=1e-12)
    assert alg1.theta_hat == base.theta_hat


def test_threads_do_not_change_results(fits):
    data, _, _, alg3 = fits
    par = estimate_qrs_refined(data, THETAS, FINE, COARSE, p=3, threads=3)
    assert par.theta_hat == alg3.theta_hat
    np.testing.assert_array_equal(par.beta_process, alg3.beta_process)
    np.testing.assert_array_equal(par.objective_profile, alg3.objective_profile)


def test_fit_json_round_trip(fits, tmp_path):
    _, _, _, alg3 = fits
    path = tmp_path / "fit.json"
    alg3.write_json(path)
    back = QrsFit.read_json(path)
    assert back.theta_hat == alg3.theta_hat
    np.testing.assert_array_equal(back.beta_process, alg3.beta_process)
    np.testing.assert_array_equal(back.coarse_beta, alg3.coarse_beta)
    np.testing.assert_array_equal(back.candidates, alg3.candidates)
    assert back.data_hash == alg3.data_hash
    lines = alg3.beta_csv().splitlines()
    assert lines[0] == "tau,beta_0,beta_1" and len(lines) == len(FINE) + 1


def test_unconverged_cells_are_flagged(fits):
    for fit in fits[1:]:
        d = fit.diagnostics
        assert d["n_unconverged"] == len(d["unconverged"])
        assert d["cells"] > 0


def test_bad_inputs(small_data):
    with pytest.raises(ValueError, match="unknown algorithm"):
        estimate("alg9", small_data, THETAS, FINE, COARSE)
    with pytest.raises(ValueError):
        estimate_qrs_refined(small_data, THETAS, FINE, COARSE, p=0)
    with pytest.raises(ValueError):
        estimate_qrs_reduced(small_data, THETAS, FINE, QuantileGrid([0.02, 0.5], 0.01))
