import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import expit

from fastqrs.propensity import PSCORE_CLAMP, PerfectSeparationError, PropensityModel, fit_logit, predict_propensity
from fastqrs.types import validate_dataset


def logit_data(n, seed, gamma=(-1.5, 2.0)):
    rng = np.random.default_rng(seed)
    z1 = rng.standard_normal(n)
    d = (rng.uniform(size=n) <= expit(gamma[0] + gamma[1] * z1)).astype(float)
    y = d * rng.normal(size=n)
    return validate_dataset({"y": y, "d": d, "z1": z1})


def test_recovers_coefficients():
    data = logit_data(100_000, 3)
    model = fit_logit(data)
    assert model.converged
    assert abs(model.gamma[0] + 1.5) <= 0.05
    assert abs(model.gamma[1] - 2.0) <= 0.05


def test_score_equations():
    data = logit_data(5000, 4)
    w = np.random.default_rng(1).exponential(size=data.n)
    model = fit_logit(data, weights=w)
    p = expit(data.z @ model.gamma)
    score = (w * (data.d - p)) @ data.z
    assert np.max(np.abs(score)) <= 1e-8


def test_unit_weights_identity():
    data = logit_data(3000, 5)
    a = fit_logit(data).gamma
    b = fit_logit(data, weights=np.ones(data.n)).gamma
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_warm_start_same_fixed_point():
    data = logit_data(3000, 6)
    cold = fit_logit(data).gamma
    warm = fit_logit(data, start=cold + 0.3).gamma
    np.testing.assert_allclose(cold, warm, atol=1e-8)


def test_all_participants_separation():
    rng = np.random.default_rng(0)
    data = validate_dataset({"y": rng.normal(size=50), "d": np.ones(50), "z1": rng.normal(size=50)})
    with pytest.raises(PerfectSeparationError):
        fit_logit(data)


def test_prediction_values():
    data = logit_data(10, 0)
    zero = PropensityModel(gamma=np.zeros(2), converged=True, log_likelihood=0.0)
    np.testing.assert_array_equal(predict_propensity(zero, data), 0.5)
    intercept = PropensityModel(gamma=np.array([-1.5, 0.0]), converged=True, log_likelihood=0.0)
    np.testing.assert_allclose(predict_propensity(intercept, data), 0.18242552380635634, atol=1e-15)
    big = PropensityModel(gamma=np.array([100.0, 0.0]), converged=True, log_likelihood=0.0)
    np.testing.assert_array_equal(predict_propensity(big, data), 1 - PSCORE_CLAMP)


@given(st.integers(0, 10_000))
def test_loglik_path_monotone(seed):
    data = logit_data(400, seed, gamma=(0.3, 1.0))
    lls = []
    for it in range(1, 8):
        m = fit_logit(data, max_iter=it, raise_on_separation=False)
        lls.append(m.log_likelihood)
    assert all(b >= a - 1e-9 for a, b in zip(lls, lls[1:]))
