import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tagi.deriv import (
    BranchFactors,
    BranchStep,
    branch_count,
    branch_cov_with_input,
    branch_covariance_matrix,
    branch_mean,
    branch_var,
    derivative_moments,
    enumerate_branches,
)
from tagi.engine import InputBelief, forward
from tagi.net import NetworkSpec, init_posterior
from tagi.oracles import chain_derivative_suite, finite_difference_check, random_network

# DP and enumeration add the same terms in a different order
REASSOC = 1e-12


def _setup(seed, max_width=4, var=True):
    rng = np.random.default_rng(seed)
    spec, post = random_network(rng, max_width=max_width, max_layers=3)
    x_var = rng.uniform(0.01, 0.5, spec.input_width) if var else np.zeros(spec.input_width)
    st = forward(spec, post, InputBelief(rng.normal(size=spec.input_width), x_var))
    return spec, post, st, int(rng.integers(spec.output_width))


def _close(a, b, scale):
    return abs(a - b) <= REASSOC * scale


@settings(max_examples=60)
@given(st.integers(0, 2**31 - 1))
def test_dp_equals_enumeration(seed):
    spec, post, state, o = _setup(seed)
    dm = derivative_moments(spec, post, state, output_index=o, cross_branch=False, input_coherence=False)
    for d in range(spec.input_width):
        br = [b for _, b in enumerate_branches(spec, post, state, d, o)]
        assert len(br) == branch_count(spec)
        for got, terms in [
            (dm.mean[d], [branch_mean(b) for b in br]),
            (dm.branch_var_sum[d], [branch_var(b) for b in br]),
            (dm.cov_with_input[d], [branch_cov_with_input(b) for b in br]),
        ]:
            assert _close(got, sum(terms), sum(map(abs, terms)))


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_cross_branch_matrix(seed):
    spec, post, state, o = _setup(seed, max_width=3)
    for d in range(spec.input_width):
        br = [b for _, b in enumerate_branches(spec, post, state, d, o)]
        K = branch_covariance_matrix(spec, post, state, d, o)
        assert np.allclose(K, K.T, rtol=1e-12, atol=1e-14)
        diag = [branch_var(b) for b in br]
        assert np.allclose(np.diag(K), diag, rtol=1e-12, atol=1e-14)
    dm = derivative_moments(spec, post, state, output_index=o, cross_branch=True, input_coherence=False)
    for d in range(spec.input_width):
        K = branch_covariance_matrix(spec, post, state, d, o)
        assert dm.variance[d] == pytest.approx(max(K.sum(), 0.0), rel=1e-12, abs=1e-14)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_input_coherent_term(seed, cross):
    spec, post, state, o = _setup(seed, max_width=3)
    dm = derivative_moments(spec, post, state, output_index=o, cross_branch=cross)
    x_var = state.units[0].z_var[0]
    for d in range(spec.input_width):
        paths_br = enumerate_branches(spec, post, state, d, o)
        c = np.array([branch_cov_with_input(b) for _, b in paths_br])
        if cross:
            # pairs in the same first-layer unit are already covered by the branch matrix
            first = np.array([p[-2] for p, _ in paths_br])
            groups = [c[first == i].sum() for i in np.unique(first)]
            want = (c.sum() ** 2 - np.sum(np.square(groups))) / x_var[d]
        else:
            want = (c.sum() ** 2 - np.sum(c**2)) / x_var[d]
        assert dm.coherent[d] == pytest.approx(want, rel=1e-10, abs=1e-13)


def test_coherence_keeps_conditioned_input_variance_nonnegative():
    spec = NetworkSpec.from_widths([1, 32, 32, 1], ["tanh", "relu", "identity"])
    post = init_posterior(spec, 0)
    for x in np.linspace(-2, 2, 21):
        st = forward(spec, post, InputBelief([x], [0.05]))
        dm = derivative_moments(spec, post, st)
        assert dm.cov_with_input[0] ** 2 <= 0.05 * dm.variance[0] * (1 + 1e-9)


def test_point_input_has_no_coherent_term():
    spec, post, state, o = _setup(7, var=False)
    dm = derivative_moments(spec, post, state, output_index=o)
    assert np.all(dm.coherent == 0) and np.all(dm.cov_with_input == 0)


def test_single_step_branch_by_hand():
    b = BranchFactors(1.0, 0.0, (BranchStep(2.0, 0.5, 1.0, 0.0),))
    assert branch_mean(b) == 2.0
    assert branch_var(b) == 0.5
    with pytest.raises(ValueError):
        branch_mean(BranchFactors(1.0, 0.0, ()))


def test_batch_and_subset():
    spec, post, _, _ = _setup(3)
    x = np.random.default_rng(0).normal(size=(5, spec.input_width))
    st = forward(spec, post, InputBelief(x, 0.1))
    dm = derivative_moments(spec, post, st, inputs=[0])
    assert dm.mean.shape == (5, 1)
    one = derivative_moments(spec, post, forward(spec, post, InputBelief(x[2], 0.1)))
    assert one.mean[0] == pytest.approx(dm.mean[2, 0])


def test_chain_against_sampling():
    assert chain_derivative_suite(n_sets=5, n_samples=400_000).passed


def test_finite_differences_on_trained_net(cubic_net):
    spec, post = cubic_net
    checks, skipped = finite_difference_check(spec, post, np.linspace(-1.8, 1.8, 50), exclude=0.002)
    assert len(checks) + skipped == 50 and len(checks) >= 20
    assert all(c.passed for c in checks), [c for c in checks if not c.passed][:3]
