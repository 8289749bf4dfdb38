"""Independent reference computations for the analytic kernels.

Everything here is deliberately written the slow, direct way: Monte-Carlo
sampling, explicit covariance bookkeeping over every variable of a small
network, central finite differences and exact rational arithmetic. None of
it shares code paths with the engine beyond the network containers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from . import gma
from .deriv import derivative_moments
from .engine import InputBelief, Observation, backward, condition_output, forward
from .gma import Activation
from .net import LayerParams, NetworkSpec, ParameterPosterior


@dataclass
class Check:
    name: str
    value: float  # analytic
    reference: float  # oracle
    tolerance: float
    passed: bool
    detail: str = ""

    @property
    def delta(self) -> float:
        return abs(self.value - self.reference)


@dataclass
class SuiteResult:
    name: str
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def n_failed(self) -> int:
        return sum(not c.passed for c in self.checks)

    def worst(self) -> Check | None:
        if not self.checks:
            return None
        return max(self.checks, key=lambda c: c.delta / c.tolerance if c.tolerance > 0 else np.inf * c.delta)


def _z_check(name: str, value: float, samples: np.ndarray, n_se: float) -> Check:
    """Compare ``value`` with the sample mean of ``samples`` in standard errors."""
    est = float(samples.mean())
    se = float(samples.std(ddof=1) / np.sqrt(len(samples)))
    tol = n_se * se
    return Check(name, float(value), est, tol, abs(value - est) <= tol, f"se={se:.3g}")


def _centered(x: np.ndarray) -> np.ndarray:
    return x - x.mean()


# ---------------------------------------------------------------------------
# product moments


@dataclass
class GmaOps:
    """The product formulas under test; swap one out to check the suite notices."""

    product_mean: Callable = gma.product_mean
    cov_with_product: Callable = gma.cov_with_product
    var_product: Callable = gma.var_product
    cov_product_product: Callable = gma.cov_product_product
    deriv_covariances: Callable = gma.tanh_deriv_covariances


def random_gaussian_set(rng: np.random.Generator, dim: int = 4):
    """Random mean and a well-conditioned random covariance."""
    mean = rng.normal(0.0, 1.0, dim)
    a = rng.normal(0.0, 1.0, (dim, dim))
    cov = a @ a.T / dim + 0.05 * np.eye(dim)
    scale = rng.uniform(0.2, 1.5, dim)
    return mean, cov * np.outer(scale, scale)


def gma_product_suite(
    n_sets: int = 50, n_samples: int = 1_000_000, seed: int = 0, n_se: float = 3.0, ops: GmaOps | None = None
) -> SuiteResult:
    ops = ops or GmaOps()
    rng = np.random.default_rng(seed)
    out = SuiteResult("gma_products")
    for k in range(n_sets):
        mean, cov = random_gaussian_set(rng)
        x = rng.multivariate_normal(mean, cov, size=n_samples, method="cholesky")
        x1, x2, x3, x4 = x.T
        p12 = x1 * x2
        pair = gma.GaussianPair(gma.Gaussian(mean[0], cov[0, 0]), gma.Gaussian(mean[1], cov[1, 1]), cov[0, 1])
        out.checks.append(_z_check(f"product_mean[{k}]", ops.product_mean(pair), p12, n_se))
        out.checks.append(
            _z_check(
                f"cov_with_product[{k}]",
                ops.cov_with_product(cov[0, 2], cov[1, 2], mean[0], mean[1]),
                _centered(x3) * _centered(p12),
                n_se,
            )
        )
        out.checks.append(_z_check(f"var_product[{k}]", ops.var_product(pair), _centered(p12) ** 2, n_se))
        out.checks.append(
            _z_check(
                f"cov_product_product[{k}]",
                ops.cov_product_product(mean, cov),
                _centered(p12) * _centered(x3 * x4),
                n_se,
            )
        )
    return out


# ---------------------------------------------------------------------------
# covariances of tanh derivative factors


def random_deriv_setup(rng: np.random.Generator) -> dict:
    """Moments of (Z_i^{l+1}, W_ij, Z_j^l) for Z_i = W_ij A_j + rest, tanh both layers."""
    zj_mean = rng.normal(0.0, 0.8)
    zj_var = rng.uniform(0.05, 0.6)
    w_mean = rng.normal(0.0, 0.8)
    w_var = rng.uniform(0.02, 0.4)
    rest_mean = rng.normal(0.0, 0.5)
    rest_var = rng.uniform(0.0, 0.3)
    aj_mean = np.tanh(zj_mean)
    j_prev = 1.0 - aj_mean**2
    aj_var = j_prev**2 * zj_var
    zi_mean = w_mean * aj_mean + rest_mean
    zi_var = w_var * aj_var + w_var * aj_mean**2 + aj_var * w_mean**2 + rest_var
    cov = np.array(
        [
            [zi_var, w_var * aj_mean, w_mean * j_prev * zj_var],
            [w_var * aj_mean, w_var, 0.0],
            [w_mean * j_prev * zj_var, 0.0, zj_var],
        ]
    )
    ai_mean = np.tanh(zi_mean)
    return dict(
        mean=np.array([zi_mean, w_mean, zj_mean]),
        cov=cov,
        a_next_mean=ai_mean,
        j_next=1.0 - ai_mean**2,
        w_mean=w_mean,
        w_var=w_var,
        a_prev_mean=aj_mean,
        j_prev=j_prev,
        z_prev_var=zj_var,
    )


def deriv_covariance_suite(
    n_sets: int = 50, n_samples: int = 1_000_000, seed: int = 1, n_se: float = 3.0, ops: GmaOps | None = None
) -> SuiteResult:
    """Sample the linearized model exactly and compare the four covariances."""
    ops = ops or GmaOps()
    rng = np.random.default_rng(seed)
    out = SuiteResult("deriv_covariances")
    names = ("a_next_mean", "j_next", "w_mean", "w_var", "a_prev_mean", "j_prev", "z_prev_var")
    for k in range(n_sets):
        s = random_deriv_setup(rng)
        zi, w, zj = rng.multivariate_normal(s["mean"], s["cov"], size=n_samples, method="cholesky").T
        ai = s["a_next_mean"] + s["j_next"] * (zi - s["mean"][0])
        aj = s["a_prev_mean"] + s["j_prev"] * (zj - s["mean"][2])
        di = _centered(1.0 - ai * ai)
        dj = _centered(1.0 - aj * aj)
        dc = ops.deriv_covariances(Activation.TANH, Activation.TANH, **{n: s[n] for n in names})
        out.checks.append(_z_check(f"dnext_w[{k}]", float(dc.dnext_w), di * _centered(w), n_se))
        out.checks.append(_z_check(f"dnext_dprev[{k}]", float(dc.dnext_dprev), di * dj, n_se))
        out.checks.append(_z_check(f"dnext_zprev[{k}]", float(dc.dnext_zprev), di * _centered(zj), n_se))
        out.checks.append(_z_check(f"dprev_zprev[{k}]", float(dc.dprev_zprev), dj * _centered(zj), n_se))
    return out


# ---------------------------------------------------------------------------
# exact conditioning on a small network


def random_network(rng: np.random.Generator, max_width: int = 3, max_layers: int = 3, chain: bool = False):
    n_layers = int(rng.integers(1, max_layers + 1))
    widths = [1 if chain else int(rng.integers(1, max_width + 1)) for _ in range(n_layers + 1)]
    acts = [str(rng.choice(["tanh", "relu", "identity"])) for _ in range(n_layers - 1)]
    acts.append(str(rng.choice(["identity", "tanh"])))
    spec = NetworkSpec.from_widths(widths, acts)
    layers = []
    for ls in spec.layers:
        shape = (ls.output_width, ls.input_width)
        layers.append(
            LayerParams(
                rng.normal(0.0, 1.0, shape),
                rng.uniform(0.05, 0.5, shape),
                rng.normal(0.0, 0.5, ls.output_width),
                rng.uniform(0.05, 0.5, ls.output_width),
            )
        )
    return spec, ParameterPosterior(layers)


class _JointModel:
    """Covariance of every variable with the output, built layer by layer.

    Variables: the input X, every weight and bias, every hidden state Z.
    Parameters and inputs are independent a priori. The forward pass is the
    linearized one, so cov(Z^{l+1}_i, U) for any earlier variable U is
    sum_k E[W_ik] J_k cov(Z^l_k, U), plus the direct terms for the
    parameters of layer l.
    """

    def __init__(self, spec: NetworkSpec, post: ParameterPosterior, x_mean, x_var):
        self.spec = spec
        self.post = post
        self.names: list[tuple] = []
        prior_mean, prior_var = [], []
        for d in range(spec.input_width):
            self.names.append(("x", d))
            prior_mean.append(x_mean[d])
            prior_var.append(x_var[d])
        for l, p in enumerate(post.layers):
            for i in range(p.w_mean.shape[0]):
                for k in range(p.w_mean.shape[1]):
                    self.names.append(("w", l, i, k))
                    prior_mean.append(p.w_mean[i, k])
                    prior_var.append(p.w_var[i, k])
                self.names.append(("b", l, i))
                prior_mean.append(p.b_mean[i])
                prior_var.append(p.b_var[i])
        self.n_base = len(self.names)
        base_var = np.array(prior_var, dtype=float)
        index = {n: k for k, n in enumerate(self.names)}

        # cross covariance rows: C[l][i] = cov(Z^l_i, base variables)
        z_mean = np.asarray(x_mean, dtype=float)
        z_var = np.asarray(x_var, dtype=float)
        C = np.zeros((spec.input_width, self.n_base))
        for d in range(spec.input_width):
            C[d, index[("x", d)]] = x_var[d]
        kind = Activation.IDENTITY
        self.z_moments = []
        self.cross = []
        for l, (ls, p) in enumerate(zip(spec.layers, post.layers)):
            a_mean, a_var, jac, _, _ = gma.linearize(kind, z_mean, z_var)
            new_C = (p.w_mean * jac[None, :]) @ C
            for i in range(ls.output_width):
                for k in range(ls.input_width):
                    new_C[i, index[("w", l, i, k)]] += p.w_var[i, k] * a_mean[k]
                new_C[i, index[("b", l, i)]] += p.b_var[i]
            zm = p.w_mean @ a_mean + p.b_mean
            zv = (p.w_var + p.w_mean**2) @ a_var + p.w_var @ (a_mean**2) + p.b_var
            self.z_moments.append((zm, zv))
            self.cross.append(new_C)
            C, z_mean, z_var, kind = new_C, zm, zv, ls.activation
        self.base_mean = np.array(prior_mean, dtype=float)
        self.base_var = base_var

    def cov_hidden_with_output(self, o: int) -> list[np.ndarray]:
        """cov(Z^l, Z^L_o) for l = 1..L-1 via the same chain rule."""
        L = len(self.spec.layers)
        out = [None] * L
        # covariance of Z^l with Z^L_o through every path above l
        g = np.zeros(self.spec.layers[-1].output_width)
        g[o] = 1.0  # d Z^L / d Z^L
        for l in range(L - 1, 0, -1):
            p = self.post.layers[l]
            zm, zv = self.z_moments[l - 1]
            kind = self.spec.layers[l - 1].activation
            _, _, jac, _, _ = gma.linearize(kind, zm, zv)
            g = (g @ p.w_mean) * jac  # sensitivity of Z^L_o to Z^l, TAGI's diagonal Z^l
            out[l - 1] = g * zv
        return out

    def condition(self, o: int, y: float, noise: float):
        """Exact posterior means/variances of every variable after observing A^L_o."""
        zm, zv = self.z_moments[-1]
        kind = self.spec.layers[-1].activation
        a_mean, a_var, jac, _, _ = gma.linearize(kind, zm, zv)
        s = a_var[o] + noise
        innov = y - a_mean[o]
        res = {}
        c_base = jac[o] * self.cross[-1][o]
        res["base_mean"] = self.base_mean + c_base / s * innov
        res["base_var"] = self.base_var - c_base**2 / s
        hidden = []
        for l, cz in enumerate(self.cov_hidden_with_output(o)):
            if cz is None:
                continue
            m, v = self.z_moments[l]
            c = jac[o] * cz
            hidden.append((m + c / s * innov, v - c**2 / s))
        c_top = jac[o] * zv[o]
        top_mean, top_var = zm.copy(), zv.copy()
        top_mean[o] += c_top / s * innov
        top_var[o] -= c_top**2 / s
        hidden.append((top_mean, top_var))
        res["hidden"] = hidden
        return res


def _flatten_posterior(post: ParameterPosterior, x_mean, x_var):
    mean, var = [np.asarray(x_mean, dtype=float)], [np.asarray(x_var, dtype=float)]
    for p in post.layers:
        for i in range(p.w_mean.shape[0]):
            mean += [p.w_mean[i], p.b_mean[i : i + 1]]
            var += [p.w_var[i], p.b_var[i : i + 1]]
    return np.concatenate(mean), np.concatenate(var)


def exact_variance_mask(spec: NetworkSpec, names: list[tuple]) -> np.ndarray:
    """Base variables whose layerwise variance update is exact.

    The layerwise pass keeps only the diagonal of each hidden layer's
    posterior covariance. Variances survive that for the parameters of the
    top two layers, and for everything when every layer has one unit.
    """
    L = len(spec.layers)
    if all(w == 1 for w in spec.widths):
        return np.ones(len(names), dtype=bool)
    keep = []
    for n in names:
        if n[0] == "x":
            keep.append(L == 1)
        else:
            keep.append(n[1] >= L - 2)
    return np.array(keep)


def exact_conditioning_check(
    spec: NetworkSpec, post: ParameterPosterior, x_mean, x_var, y: float, noise: float, o: int = 0, atol: float = 1e-8
) -> list[Check]:
    model = _JointModel(spec, post, x_mean, x_var)
    ref = model.condition(o, y, noise)
    st = forward(spec, post, InputBelief(np.asarray(x_mean, float), np.asarray(x_var, float)))
    value = np.full(spec.output_width, np.nan)
    value[o] = y
    res = backward(spec, post, st, condition_output(st, Observation(value, noise)))
    got_mean, got_var = _flatten_posterior(res.posterior, res.input.mean, res.input.var)
    mask = exact_variance_mask(spec, model.names)
    checks = []
    for k, n in enumerate(model.names):
        label = "/".join(map(str, n))
        checks.append(Check(f"mean {label}", got_mean[k], ref["base_mean"][k], atol, abs(got_mean[k] - ref["base_mean"][k]) <= atol))
        if mask[k]:
            checks.append(Check(f"var {label}", got_var[k], ref["base_var"][k], atol, abs(got_var[k] - ref["base_var"][k]) <= atol))
    L = len(spec.layers)
    chain = all(w == 1 for w in spec.widths)
    for l, ((rm, rv), (gm, gv)) in enumerate(zip(ref["hidden"], res.hidden)):
        for i in range(len(rm)):
            checks.append(Check(f"mean z/{l + 1}/{i}", gm[0, i], rm[i], atol, abs(gm[0, i] - rm[i]) <= atol))
            if chain or l >= L - 2:
                checks.append(Check(f"var z/{l + 1}/{i}", gv[0, i], rv[i], atol, abs(gv[0, i] - rv[i]) <= atol))
    return checks


def exact_conditioning_suite(n_nets: int = 20, seed: int = 2, atol: float = 1e-8) -> SuiteResult:
    """Half general nets, half single-unit chains (where every variance is exact)."""
    rng = np.random.default_rng(seed)
    out = SuiteResult("exact_conditioning")
    for k in range(n_nets):
        spec, post = random_network(rng, chain=k % 2 == 1)
        x_mean = rng.normal(0.0, 1.0, spec.input_width)
        x_var = rng.uniform(0.0, 0.5, spec.input_width)
        o = int(rng.integers(spec.output_width))
        y = float(rng.normal(0.0, 1.0))
        noise = float(rng.uniform(0.01, 0.5))
        for c in exact_conditioning_check(spec, post, x_mean, x_var, y, noise, o, atol):
            c.name = f"net{k} {c.name}"
            out.checks.append(c)
    return out


# ---------------------------------------------------------------------------
# forward pass by sampling


def forward_monte_carlo(
    spec: NetworkSpec, post: ParameterPosterior, x_mean, x_var, n_samples: int, rng: np.random.Generator, lin=None
):
    """Samples of every Z^l under the linearized generative model.

    Weights are drawn afresh per sample. Each layer's units are shuffled
    independently across samples so that the within-layer correlations,
    which the analytic pass ignores, are destroyed before feeding the next
    layer. ``lin`` gives the (mean, var) of Z^0..Z^{L-1} to linearize at;
    by default the sample moments are used.
    """
    x_mean = np.asarray(x_mean, dtype=float)
    z = x_mean + np.sqrt(np.asarray(x_var, dtype=float)) * rng.standard_normal((n_samples, len(x_mean)))
    kind = Activation.IDENTITY
    layers = []
    for l, (ls, p) in enumerate(zip(spec.layers, post.layers)):
        m, v = (z.mean(axis=0), z.var(axis=0)) if lin is None else lin[l]
        a_mean, _, jac, _, _ = gma.linearize(kind, m, v)
        a = a_mean + jac * (z - m)
        w = p.w_mean + np.sqrt(p.w_var) * rng.standard_normal((n_samples, *p.w_mean.shape))
        b = p.b_mean + np.sqrt(p.b_var) * rng.standard_normal((n_samples, len(p.b_mean)))
        z = np.einsum("sij,sj->si", w, a) + b
        for i in range(z.shape[1]):
            z[:, i] = rng.permutation(z[:, i])
        layers.append(z.copy())
        kind = ls.activation
    return layers


def forward_suite(n_nets: int = 10, n_samples: int = 200_000, seed: int = 3, n_se: float = 3.5) -> SuiteResult:
    """Means and variances of every hidden state against sampling."""
    rng = np.random.default_rng(seed)
    out = SuiteResult("forward")
    for k in range(n_nets):
        spec, post = random_network(rng)
        x_mean = rng.normal(0.0, 1.0, spec.input_width)
        x_var = rng.uniform(0.0, 0.3, spec.input_width)
        st = forward(spec, post, InputBelief(x_mean, x_var))
        lin = [(u.z_mean[0], u.z_var[0]) for u in st.units[:-1]]
        for l, z in enumerate(forward_monte_carlo(spec, post, x_mean, x_var, n_samples, rng, lin)):
            u = st.units[l + 1]
            for i in range(z.shape[1]):
                out.checks.append(_z_check(f"net{k} mean z/{l + 1}/{i}", u.z_mean[0, i], z[:, i], n_se))
                out.checks.append(_z_check(f"net{k} var z/{l + 1}/{i}", u.z_var[0, i], _centered(z[:, i]) ** 2, n_se))
    return out


# ---------------------------------------------------------------------------
# derivative of a one-unit chain


def chain_derivative_suite(n_sets: int = 20, n_samples: int = 1_000_000, seed: int = 4, n_se: float = 3.0) -> SuiteResult:
    """1-1-1 net, tanh hidden, identity output, fixed first weight.

    With the first weight and the input-side bias deterministic apart from
    the input, Z^1 is Gaussian and dz/dx = W1 W0 (1 - A^2) has Gaussian
    closure, so the analytic moments are exact and sampling can check them.
    """
    rng = np.random.default_rng(seed)
    out = SuiteResult("chain_derivative")
    spec = NetworkSpec.from_widths([1, 1, 1], ["tanh", "identity"])
    for k in range(n_sets):
        w0 = rng.normal(0.0, 1.0)
        b0 = rng.normal(0.0, 0.5)
        w1_mean, w1_var = rng.normal(0.0, 1.0), rng.uniform(0.05, 0.5)
        post = ParameterPosterior(
            [
                LayerParams(np.array([[w0]]), np.zeros((1, 1)), np.array([b0]), np.zeros(1)),
                LayerParams(np.array([[w1_mean]]), np.array([[w1_var]]), np.zeros(1), np.array([0.1])),
            ]
        )
        x_mean, x_var = rng.normal(0.0, 0.7), rng.uniform(0.01, 0.3)
        st = forward(spec, post, InputBelief(np.array([x_mean]), np.array([x_var])))
        dm = derivative_moments(spec, post, st)
        u = st.units[1]
        x = x_mean + np.sqrt(x_var) * rng.standard_normal(n_samples)
        a = u.a_mean[0] + u.jac[0] * (w0 * (x - x_mean))
        w1 = w1_mean + np.sqrt(w1_var) * rng.standard_normal(n_samples)
        d = w1 * w0 * (1.0 - a * a)
        out.checks.append(_z_check(f"mean[{k}]", float(dm.mean[0]), d, n_se))
        out.checks.append(_z_check(f"var[{k}]", float(dm.variance[0]), _centered(d) ** 2, n_se))
        out.checks.append(_z_check(f"cov[{k}]", float(dm.cov_with_input[0]), _centered(d) * _centered(x), n_se))
    return out


# ---------------------------------------------------------------------------
# finite differences


def gate_flips(spec: NetworkSpec, post: ParameterPosterior, lo: float, hi: float, step: float = 1e-3) -> np.ndarray:
    """Inputs (1D) where some ReLU unit's mean pre-activation changes sign."""
    grid = np.arange(lo, hi + step / 2, step)
    st = forward(spec, post, InputBelief(grid[:, None], np.zeros((len(grid), 1))))
    flips = []
    for ls, u in zip(spec.layers, st.units[1:]):
        if ls.activation is not Activation.RELU:
            continue
        on = u.z_mean > 0
        change = np.any(on[1:] != on[:-1], axis=1)
        flips.extend(0.5 * (grid[1:][change] + grid[:-1][change]))
    return np.sort(np.array(flips))


def finite_difference_check(
    spec: NetworkSpec,
    post: ParameterPosterior,
    grid,
    *,
    h: float = 1e-3,
    rtol: float = 0.05,
    exclude: float = 0.05,
) -> tuple[list[Check], int]:
    """Analytic derivative mean against central differences of the predictive mean.

    Points within ``exclude`` of a ReLU gate flip are skipped; returns the
    checks and the number of skipped points.
    """
    grid = np.asarray(grid, dtype=float)
    flips = gate_flips(spec, post, grid.min() - exclude - h, grid.max() + exclude + h)
    checks, skipped = [], 0
    for x in grid:
        if len(flips) and np.min(np.abs(flips - x)) <= exclude:
            skipped += 1
            continue
        st = forward(spec, post, InputBelief(np.array([x]), np.zeros(1)))
        d = float(derivative_moments(spec, post, st).mean[0])
        up = forward(spec, post, InputBelief(np.array([x + h]), np.zeros(1))).out_mean()[0]
        dn = forward(spec, post, InputBelief(np.array([x - h]), np.zeros(1))).out_mean()[0]
        fd = float((up - dn) / (2 * h))
        tol = rtol * abs(fd)
        checks.append(Check(f"x={x:+.4f}", d, fd, tol, abs(d - fd) <= tol))
    return checks, skipped


# ---------------------------------------------------------------------------
# TD targets by brute force


def td_brute_force(rewards, bootstrap_mean, bootstrap_std, gamma, sigma_v):
    """Closed-form sums in exact rational arithmetic.

    mean_t = sum_{k>=t} gamma^{k-t} r_k + gamma^{H-t} mu_boot
    var_t  = gamma^{2(H-t)} sigma_boot^2 + sigma_v^2 sum_{k<H-t} gamma^{2k}
    """
    r = [Fraction(float(v)) for v in rewards]
    g = Fraction(float(gamma))
    mb = Fraction(float(bootstrap_mean))
    vb = Fraction(float(bootstrap_std)) ** 2
    sv = Fraction(float(sigma_v)) ** 2
    H = len(r)
    mean, var = [], []
    for t in range(H):
        mean.append(sum(g ** (k - t) * r[k] for k in range(t, H)) + g ** (H - t) * mb)
        var.append(g ** (2 * (H - t)) * vb + sv * sum(g ** (2 * k) for k in range(H - t)))
    return mean, var


def _exact_or_ulp(name: str, got: float, exact: Fraction, f) -> Check:
    """Compare with f(exact); exact match required when ``exact`` is a double."""
    ref = float(f(float(exact)))
    tol = 0.0 if Fraction(float(exact)) == exact else 4 * float(np.spacing(abs(ref)))
    return Check(name, got, ref, tol, abs(got - ref) <= tol, "exact" if tol == 0 else "ulp")


def td_suite(n_cases: int = 50, max_horizon: int = 16, seed: int = 5) -> SuiteResult:
    """Dyadic inputs, so most exact answers are doubles and must match bit for bit.

    When the exact value is not a double the recursion rounds at every
    step and may differ from the correctly rounded result by a few ulp.
    """
    from .rl import td_targets

    rng = np.random.default_rng(seed)
    out = SuiteResult("td_targets")
    for k in range(n_cases):
        H = int(rng.integers(1, max_horizon + 1))
        rewards = rng.integers(-64, 65, H) / 16.0
        mb = int(rng.integers(-64, 65)) / 8.0
        sb = int(rng.integers(0, 33)) / 16.0
        gamma = float(rng.choice([0.0, 0.25, 0.5, 0.75, 0.875, 1.0]))
        sv = int(rng.integers(0, 17)) / 8.0
        got = td_targets(rewards, mb, sb, gamma, sv)
        mean, var = td_brute_force(rewards, mb, sb, gamma, sv)
        for t in range(H):
            out.checks.append(_exact_or_ulp(f"case{k} mean[{t}]", float(got.mean[t]), mean[t], lambda v: v))
            out.checks.append(_exact_or_ulp(f"case{k} std[{t}]", float(got.std[t]), var[t], np.sqrt))
    return out


# ---------------------------------------------------------------------------
# sensitivity


def mutated_ops(name: str) -> GmaOps:
    """A copy of the product formulas with one deliberately wrong term."""
    ops = GmaOps()
    if name == "var_product":
        ops.var_product = lambda p: gma.var_product(p) - p.cov**2
    elif name == "cov_with_product":
        ops.cov_with_product = lambda c13, c23, m1, m2: c13 * m2
    elif name == "product_mean":
        ops.product_mean = lambda p: p.a.mean * p.b.mean
    elif name == "cov_product_product":
        ops.cov_product_product = lambda m, c: gma.cov_product_product(m, c) - c[0, 3] * c[1, 2]
    elif name == "deriv_covariances":

        def wrong(*args, **kw):
            dc = gma.tanh_deriv_covariances(*args, **kw)
            return gma.DerivCovariances(0.5 * dc.dnext_w, dc.dnext_dprev, dc.dnext_zprev, dc.dprev_zprev)

        ops.deriv_covariances = wrong
    else:
        raise ValueError(f"no mutation for {name!r}")
    return ops


MUTATIONS = ("product_mean", "cov_with_product", "var_product", "cov_product_product", "deriv_covariances")
