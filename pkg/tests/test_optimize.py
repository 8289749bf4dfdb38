import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tagi.data import Dataset, toy_cubic
from tagi.engine import InputBelief
from tagi.optimize import (
    OptimizerConfig,
    StationaryDerivativeError,
    infer_step_constrained,
    infer_step_unconstrained,
    optimize,
    optimize_many,
)

finite = st.floats(-10, 10)


@given(finite, st.floats(0.01, 2), finite, st.floats(0.01, 5), st.floats(-0.9, 0.9))
def test_unconstrained_is_gaussian_conditioning(m, v, dm, dv, rho):
    cov = rho * np.sqrt(v * dv)
    nb = infer_step_unconstrained(InputBelief([m], [v]), dm, dv, cov)
    assert nb.mean[0] == pytest.approx(m + cov / dv * (0 - dm), abs=1e-9)
    assert nb.var[0] == pytest.approx(v - cov**2 / dv, abs=1e-9)


@given(finite, st.floats(0.01, 2), finite, st.floats(0.01, 5), st.floats(-0.9, 0.9), st.sampled_from([1, -1]))
def test_constrained_step_size_and_direction(m, v, dm, dv, rho, alpha):
    cov = rho * np.sqrt(v * dv)
    free = infer_step_unconstrained(InputBelief([m], [v]), dm, dv, cov)
    nb, zero = infer_step_constrained(InputBelief([m], [v]), dm, dv, cov, alpha)
    step = nb.mean[0] - m
    assert abs(step) == pytest.approx(abs(free.mean[0] - m), abs=1e-9)
    assert nb.var[0] == pytest.approx(free.var[0])
    if step != 0:
        assert np.sign(step) == alpha * (np.sign(dm) if dm != 0 else 1)
    assert zero == int(dm == 0)


def test_zero_derivative_variance():
    with pytest.raises(StationaryDerivativeError):
        infer_step_unconstrained(InputBelief([0.0], [1.0]), 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        infer_step_constrained(InputBelief([0.0], [1.0]), 1.0, 1.0, 0.0, 0)


def test_config_validation():
    for kw in [dict(alpha=2), dict(epochs=-1), dict(sigma_x0=0), dict(hidden=(4,), activations=())]:
        with pytest.raises(ValueError):
            OptimizerConfig(**kw)


SMALL = dict(hidden=(32, 32), activations=("tanh", "relu"), epochs=2)


@pytest.fixture(scope="module")
def cubic():
    return toy_cubic(100, 0.1, seed=0)


def test_zero_epochs_returns_start(cubic):
    tr = optimize(cubic, OptimizerConfig(x0_mean=(0.3,), epochs=0, hidden=(8,), activations=("relu",)))
    assert len(tr) == 1 and tr.final_mean[0] == pytest.approx(0.3)
    assert tr.final_var[0] == pytest.approx(1e-4)


def test_shared_surrogate_matches_separate_runs(cubic):
    cfgs = [OptimizerConfig(x0_mean=(s,), alpha=a, **SMALL) for s, a in [(0.25, None), (-0.25, 1), (0.5, -1)]]
    many, _ = optimize_many(cubic, cfgs)
    for c, t in zip(cfgs, many):
        one = optimize(cubic, c)
        assert np.array_equal(np.array(one.x_mean), np.array(t.x_mean))
    with pytest.raises(ValueError, match="shared"):
        optimize_many(cubic, [cfgs[0], OptimizerConfig(seed=5, **SMALL)])


def test_trace_csv(tmp_path, cubic):
    tr = optimize(cubic, OptimizerConfig(x0_mean=(0.1,), **SMALL))
    tr.to_csv(tmp_path / "t.csv")
    with open(tmp_path / "t.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "x_mean", "x_var", "dz_mean", "dz_var", "y_mean"]
    assert len(rows) == len(tr) + 1 == 2 * 100 + 2
    assert float(rows[-1][1]) == tr.final_mean[0]


def test_variance_never_increases(cubic):
    tr = optimize(cubic, OptimizerConfig(x0_mean=(0.1,), **SMALL))
    v = np.array(tr.x_var)[:, 0]
    assert np.all(np.diff(v) <= 1e-15) and np.all(v >= 0)


def test_early_stop_on_flat_surface():
    x = np.linspace(-1, 1, 40)[:, None]
    data = Dataset(x, np.zeros_like(x), "regression")
    cfg = OptimizerConfig(x0_mean=(0.0,), early_stop=True, tol=10.0, patience=3, hidden=(4,), activations=("relu",), epochs=3)
    tr = optimize(data, cfg)
    assert tr.early_stopped and len(tr) == 4


def test_two_dimensional_bowl():
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, (300, 2))
    y = -((x[:, 0] - 0.5) ** 2) - (x[:, 1] + 0.5) ** 2
    tr = optimize(Dataset(x, y[:, None], "regression"), OptimizerConfig(
        x0_mean=(0.0, 0.0), alpha=1, sigma_x0=0.05, epochs=3, hidden=(64, 64), activations=("tanh", "relu")))
    assert tr.header()[1:3] == ["x_mean_0", "x_mean_1"]
    assert np.allclose(tr.final_mean, [0.5, -0.5], atol=0.35)


def test_empty_dataset():
    with pytest.raises(ValueError):
        optimize(Dataset(np.zeros((0, 1)), np.zeros((0, 1)), "regression"), OptimizerConfig())


def test_quadratic_iterates_approach_optimum_monotonically():
    """Fixed surrogate of x^2, learned first; unconstrained steps from 0.5."""
    from tagi.deriv import derivative_moments
    from tagi.engine import fit, forward
    from tagi.net import NetworkSpec, init_posterior

    x = np.linspace(-1, 1, 400)[:, None]
    spec = NetworkSpec.from_widths([1, 64, 64, 1], ["tanh", "tanh", "identity"])
    post, _ = fit(spec, init_posterior(spec, 0, var_gain=0.01), x, x**2, 1e-4, epochs=20, seed=0)
    b = InputBelief([0.5], [0.01])
    path = [0.5]
    while abs(path[-1]) >= 0.05 and len(path) < 20:
        dm = derivative_moments(spec, post, forward(spec, post, b))
        b = infer_step_unconstrained(b, dm.mean, dm.variance, dm.cov_with_input)
        path.append(float(b.mean[0]))
    assert abs(path[-1]) < 0.05
    assert np.all(np.diff(np.abs(path)) < 0)


@given(finite, st.floats(0.01, 2), finite, st.floats(0.01, 5), st.floats(-0.9, 0.9))
def test_alpha_steps_are_negations(m, v, dm, dv, rho):
    cov = rho * np.sqrt(v * dv)
    up, _ = infer_step_constrained(InputBelief([m], [v]), dm, dv, cov, 1)
    dn, _ = infer_step_constrained(InputBelief([m], [v]), dm, dv, cov, -1)
    assert up.mean[0] - m == pytest.approx(m - dn.mean[0], abs=1e-12)
    if dm == 0:
        assert up.mean[0] == dn.mean[0] == m
