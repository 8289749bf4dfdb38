from fractions import Fraction

import numpy as np
import pytest

from tagi import gma, oracles
from tagi.net import NetworkSpec, init_posterior


@pytest.mark.parametrize("name", oracles.MUTATIONS)
def test_mutations_detected(name):
    suite = oracles.deriv_covariance_suite if name == "deriv_covariances" else oracles.gma_product_suite
    assert suite(n_sets=5, n_samples=100_000, seed=100, ops=oracles.mutated_ops(name)).n_failed > 0


def test_unknown_mutation():
    with pytest.raises(ValueError):
        oracles.mutated_ops("nothing")


def test_z_scores_are_calibrated():
    """A correct formula should exceed 3 SE about 0.27% of the time."""
    res = oracles.gma_product_suite(n_sets=150, n_samples=20_000, seed=11)
    z = np.array([(c.value - c.reference) / (c.tolerance / 3) for c in res.checks])
    assert abs(z.mean()) < 0.15 and 0.85 < z.std() < 1.15
    assert np.mean(np.abs(z) > 3) < 0.015


def test_spec_examples_by_sampling(rng):
    n = 1_000_000
    # product mean
    pair = gma.GaussianPair(gma.Gaussian(1.0, 1.0), gma.Gaussian(-1.0, 4.0), 0.3)
    x = rng.multivariate_normal([1, -1], [[1, 0.3], [0.3, 4]], n)
    c = oracles._z_check("mean", gma.product_mean(pair), x[:, 0] * x[:, 1], 3)
    assert c.passed, c
    # cov with product on a consistent trivariate Gaussian
    cov = np.array([[1.0, 0.0, 0.2], [0.0, 1.0, -0.1], [0.2, -0.1, 1.0]])
    x = rng.multivariate_normal([1, 3, 0], cov, n)
    c = oracles._z_check("cov3", gma.cov_with_product(0.2, -0.1, 1.0, 3.0),
                         oracles._centered(x[:, 2]) * oracles._centered(x[:, 0] * x[:, 1]), 3)
    assert c.passed, c
    # correlated variance, 1% relative
    x = rng.multivariate_normal([0.5, -0.5], [[1, 0.6], [0.6, 2.25]], n)
    want = gma.var_product(gma.GaussianPair(gma.Gaussian(0.5, 1), gma.Gaussian(-0.5, 2.25), 0.6))
    assert np.var(x[:, 0] * x[:, 1]) == pytest.approx(want, rel=0.01)


def test_td_brute_force_by_hand():
    mean, var = oracles.td_brute_force([1.0, 2.0], 4.0, 1.0, 0.5, 2.0)
    assert mean == [Fraction(1) + Fraction(1, 2) * 2 + Fraction(1, 4) * 4, Fraction(2) + Fraction(1, 2) * 4]
    assert var[1] == Fraction(1, 4) + 4 and var[0] == Fraction(1, 16) + 4 * (1 + Fraction(1, 4))


def test_td_geometric_closed_form():
    from tagi.rl import td_targets

    g, sv, H = 0.99, 0.7, 12
    t = td_targets(np.zeros(H), 0.0, 0.0, g, sv)
    j = np.arange(H)
    assert np.all(t.mean == 0)
    assert np.allclose(t.std**2, sv**2 * (1 - g ** (2 * (H - j))) / (1 - g**2), rtol=1e-12)


def test_exact_or_ulp_rule():
    assert oracles._exact_or_ulp("a", 0.5, Fraction(1, 2), lambda v: v).tolerance == 0
    c = oracles._exact_or_ulp("b", 0.1, Fraction(1, 10), lambda v: v)
    assert c.tolerance > 0 and c.passed


def test_gate_flips_found():
    spec = NetworkSpec.from_widths([1, 1, 1], ["relu", "identity"])
    post = init_posterior(spec, 0)
    post.layers[0].w_mean[:] = 1.0
    post.layers[0].b_mean[:] = -0.3
    flips = oracles.gate_flips(spec, post, -1, 1)
    assert len(flips) == 1 and flips[0] == pytest.approx(0.3, abs=1e-3)


def test_exact_variance_mask_scope():
    spec = NetworkSpec.from_widths([2, 2, 2, 1], ["relu", "tanh", "identity"])
    names = [("x", 0), ("w", 0, 0, 0), ("w", 1, 0, 0), ("b", 2, 0)]
    assert oracles.exact_variance_mask(spec, names).tolist() == [False, False, True, True]
    chain = NetworkSpec.from_widths([1, 1, 1, 1], ["relu", "tanh", "identity"])
    assert oracles.exact_variance_mask(chain, names).all()


def test_suite_result_helpers():
    r = oracles.SuiteResult("x", [oracles.Check("a", 1.0, 0.0, 2.0, True), oracles.Check("b", 3.0, 0.0, 1.0, False)])
    assert not r.passed and r.n_failed == 1 and r.worst().name == "b"
    assert oracles.SuiteResult("empty").worst() is None
