"""Moments of the first derivative of a network output with respect to its inputs.

The derivative d A^L_o / d x_d is a sum over branches, one per path through
the hidden units. Each branch is an alternating product

    X^L  Y^{L-1}  X^{L-1}  ...  Y^0  X^0

of activation-derivative factors X = phi'(Z) and weights Y = W. Branch
moments follow a recursion from the output down; only adjacent factors are
correlated.

Two evaluators are provided. ``enumerate_branches`` builds every branch
explicitly (small networks only) and feeds the scalar recursions
``branch_mean``/``branch_var``/``branch_cov_with_input``. ``derivative_moments``
gets the same sums with a dynamic program that carries a handful of per-unit
aggregates from layer to layer, at the cost of two matrix products per layer.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .gma import Activation, tanh_deriv_covariances
from .engine import ForwardState
from .net import NetworkSpec, ParameterPosterior

# widest hidden layer for which cross-branch covariances are enumerated
CROSS_BRANCH_MAX_WIDTH = 8
CROSS_BRANCH_MAX_BRANCHES = 512


@dataclass
class ClampCounter:
    count: int = 0

    def clamp(self, v: float) -> float:
        if v < 0:
            self.count += 1
            return 0.0
        return v


@dataclass(frozen=True)
class BranchStep:
    """One Y^l X^l step of a branch, plus its covariances with the factor above.

    ``cov_up_w`` = cov(X^{l+1}, Y^l), ``cov_up_x`` = cov(X^{l+1}, X^l),
    ``cov_up_z`` = cov(X^{l+1}, Z^l), ``cov_x_z`` = cov(X^l, Z^l).
    """

    w_mean: float
    w_var: float
    x_mean: float
    x_var: float
    cov_up_w: float = 0.0
    cov_up_x: float = 0.0
    cov_up_z: float = 0.0
    cov_x_z: float = 0.0


@dataclass(frozen=True)
class BranchFactors:
    top_mean: float  # E[X^L]
    top_var: float
    steps: tuple[BranchStep, ...]  # ordered from the output layer down


def _walk(branch: BranchFactors):
    """Yield (step, E_above, U) per step, where E_above is the mean of the
    partial product above the step and U = E[Y^{l+1}] E[partial product above X^{l+1}]."""
    if not branch.steps:
        raise ValueError("empty branch")
    e_above = branch.top_mean
    u = 1.0
    for s in branch.steps:
        c = (s.cov_up_w * s.x_mean + s.cov_up_x * s.w_mean) * u
        yield s, e_above, u, c
        u_next = s.w_mean * e_above
        e_above = e_above * s.w_mean * s.x_mean + c
        u = u_next


def branch_mean(branch: BranchFactors) -> float:
    e = None
    for s, e_above, _, c in _walk(branch):
        e = e_above * s.w_mean * s.x_mean + c
    return float(e)


def branch_var(branch: BranchFactors, counter: ClampCounter | None = None) -> float:
    v = branch.top_var
    for s, e_above, _, c in _walk(branch):
        mf = s.w_mean * s.x_mean
        vf = s.w_var * s.x_var + s.w_var * s.x_mean**2 + s.x_var * s.w_mean**2
        v = v * vf + c * c + 2.0 * c * e_above * mf + v * mf * mf + vf * e_above * e_above
    counter = counter or ClampCounter()
    return counter.clamp(float(v))


def branch_cov_with_input(branch: BranchFactors) -> float:
    """cov(branch product, Z^l) for the hidden state Z^l at the bottom of the branch."""
    last = None
    for last in _walk(branch):
        pass
    s, e_above, u, _ = last
    return float(s.cov_up_z * u * s.w_mean * s.x_mean + s.cov_x_z * s.w_mean * e_above)


# ---------------------------------------------------------------------------
# per-layer factor tables


@dataclass
class _Layer:
    """Factor moments for the transition from layer l+1 (rows i) to layer l (cols j)."""

    w_mean: np.ndarray  # (out, in)
    w_var: np.ndarray
    x_mean: np.ndarray  # (B, in)   phi'(Z^l)
    x_var: np.ndarray
    up_w: np.ndarray  # (B, out, in)
    up_x: np.ndarray
    up_z: np.ndarray
    x_z: np.ndarray  # (B, in)


def _tables(spec: NetworkSpec, posterior: ParameterPosterior, state: ForwardState) -> list[_Layer]:
    out = []
    for l, (ls, p) in enumerate(zip(spec.layers, posterior.layers)):
        lo, hi = state.units[l], state.units[l + 1]
        dc = tanh_deriv_covariances(
            ls.activation,
            lo.kind,
            a_next_mean=hi.a_mean[:, :, None],
            j_next=hi.jac[:, :, None],
            w_mean=p.w_mean[None],
            w_var=p.w_var[None],
            a_prev_mean=lo.a_mean[:, None, :],
            j_prev=lo.jac[:, None, :],
            z_prev_var=lo.z_var[:, None, :],
        )
        out.append(
            _Layer(
                p.w_mean, p.w_var, lo.dphi_mean, lo.dphi_var,
                dc.dnext_w, dc.dnext_dprev, dc.dnext_zprev, dc.dprev_zprev[:, 0, :],
            )
        )
    return out


def enumerate_branches(
    spec: NetworkSpec,
    posterior: ParameterPosterior,
    state: ForwardState,
    input_index: int,
    output_index: int = 0,
    sample: int = 0,
) -> list[tuple[tuple[int, ...], BranchFactors]]:
    """All branches from output unit ``output_index`` down to input ``input_index``.

    Paths are returned as unit indices from the output layer to the input.
    """
    tabs = _tables(spec, posterior, state)
    top = state.units[-1]
    hidden_widths = [ls.output_width for ls in spec.layers[:-1]]
    branches = []
    for mid in itertools.product(*[range(w) for w in reversed(hidden_widths)]):
        path = (output_index, *mid, input_index)
        steps = []
        for k in range(len(path) - 1):
            l = len(spec.layers) - 1 - k
            i, j = path[k], path[k + 1]
            t = tabs[l]
            steps.append(
                BranchStep(
                    w_mean=float(t.w_mean[i, j]),
                    w_var=float(t.w_var[i, j]),
                    x_mean=float(t.x_mean[sample, j]),
                    x_var=float(t.x_var[sample, j]),
                    cov_up_w=float(t.up_w[sample, i, j]),
                    cov_up_x=float(t.up_x[sample, i, j]),
                    cov_up_z=float(t.up_z[sample, i, j]),
                    cov_x_z=float(t.x_z[sample, j]),
                )
            )
        branches.append(
            (
                path,
                BranchFactors(
                    float(top.dphi_mean[sample, output_index]),
                    float(top.dphi_var[sample, output_index]),
                    tuple(steps),
                ),
            )
        )
    return branches


def branch_count(spec: NetworkSpec) -> int:
    return int(np.prod([ls.output_width for ls in spec.layers[:-1]], dtype=np.int64))


# ---------------------------------------------------------------------------
# dynamic program


@dataclass
class DerivativeMoments:
    mean: np.ndarray  # (d,) or (B, d)
    variance: np.ndarray
    cov_with_input: np.ndarray
    independent_branches: bool = True  # cross-branch covariances omitted
    clamped: int = 0
    branch_var_sum: np.ndarray | None = field(default=None, repr=False)
    coherent: np.ndarray | None = field(default=None, repr=False)  # shared-input term included in variance


def _dp(tabs: list[_Layer], top_mean, top_var, output_index: int):
    """Sums over branches of mean, variance and cov-with-input, per input unit."""
    B, n_out = top_mean.shape
    e = np.zeros((B, n_out))
    e[:, output_index] = 1.0
    se = e * top_mean  # sum of branch means ending at each unit
    see = e * top_mean**2  # sum of squared branch means
    sv = e * top_var  # sum of branch variances
    m = e.copy()  # sum_k E[Y_ki] * (means ending at k)
    h = e.copy()  # sum_k E[Y_ki]^2 * (squared means ending at k)
    g = e * top_mean  # sum_k E[Y_ki] * sum(E_above * E_here)
    for k, t in enumerate(reversed(tabs)):
        xm = t.x_mean[:, None, :]
        xv = t.x_var[:, None, :]
        wm = t.w_mean[None]
        wv = t.w_var[None]
        a = wm * xm
        vf = wv * xv + wv * xm * xm + xv * wm * wm
        c = t.up_w * xm + t.up_x * wm
        last = k == len(tabs) - 1
        if last:
            alpha = t.up_z * wm * xm
            beta = t.x_z[:, None, :] * wm
            per_unit = alpha * m[:, :, None] + beta * se[:, :, None]  # summed over branches through each unit
            cov_in = per_unit.sum(axis=1)
            sq = np.sum(alpha**2 * h[:, :, None] + beta**2 * see[:, :, None] + 2 * alpha * beta * g[:, :, None], axis=1)
        se_i, see_i, sv_i, m_i, h_i, g_i = (q[:, :, None] for q in (se, see, sv, m, h, g))
        new_se = np.sum(a * se_i + c * m_i, axis=1)
        new_see = np.sum(a * a * see_i + 2 * a * c * g_i + c * c * h_i, axis=1)
        new_sv = np.sum((vf + a * a) * sv_i + c * c * h_i + 2 * c * a * g_i + vf * see_i, axis=1)
        m = np.einsum("ij,bi->bj", t.w_mean, se)
        h = np.einsum("ij,bi->bj", t.w_mean**2, see)
        g = np.sum(wm * (a * see_i + c * g_i), axis=1)
        se, see, sv = new_se, new_see, new_sv
    return se, sv, cov_in, sq, np.sum(per_unit**2, axis=1)


def _cross_branch_matrix(tabs: list[_Layer], top_mean: float, top_var: float, paths: np.ndarray, sample: int):
    """Matrix of cov(P_a, P_b) over all branch pairs for one input unit.

    ``paths`` has one row per branch, columns are unit indices from the
    output layer down to the input.
    """
    nb = len(paths)
    K = np.full((nb, nb), top_var)
    E = np.full(nb, top_mean)
    U = np.ones(nb)
    L = len(tabs)
    for k in range(L):
        t = tabs[L - 1 - k]
        i, j = paths[:, k], paths[:, k + 1]
        wm = t.w_mean[i, j]
        xm = t.x_mean[sample, j]
        xv = t.x_var[sample, j]
        mf = wm * xm
        vf = t.w_var[i, j] * xv + t.w_var[i, j] * xm * xm + xv * wm * wm
        same_j = j[:, None] == j[None, :]
        same_edge = same_j & (i[:, None] == i[None, :])
        kappa = np.where(same_edge, vf[:, None], np.where(same_j, np.outer(wm, wm) * xv[:, None], 0.0))
        # cov(X^{l+1}_{i_a}, Y_{i_b j_b} X_{j_b}) scaled by U_a
        up_w = t.up_w[sample][i[:, None], j[None, :]] * (i[:, None] == i[None, :])
        up_x = t.up_x[sample][i[:, None], j[None, :]]
        gam = (up_w * xm[None, :] + up_x * wm[None, :]) * U[:, None]
        c = np.diag(gam).copy()
        K = (
            K * kappa
            + gam * gam.T
            + K * np.outer(mf, mf)
            + gam * np.outer(E, mf).T
            + gam.T * np.outer(E, mf)
            + kappa * np.outer(E, E)
        )
        U = wm * E
        E = E * mf + c
    return K


def branch_covariance_matrix(
    spec: NetworkSpec, posterior: ParameterPosterior, state: ForwardState,
    input_index: int, output_index: int = 0, sample: int = 0,
) -> np.ndarray:
    """Pairwise branch covariances, rows ordered as in ``enumerate_branches``."""
    tabs = _tables(spec, posterior, state)
    top = state.units[-1]
    paths = np.array([p for p, _ in enumerate_branches(spec, posterior, state, input_index, output_index, sample)])
    return _cross_branch_matrix(
        tabs, float(top.dphi_mean[sample, output_index]), float(top.dphi_var[sample, output_index]), paths, sample
    )


def derivative_moments(
    spec: NetworkSpec,
    posterior: ParameterPosterior,
    state: ForwardState,
    *,
    output_index: int = 0,
    inputs=None,
    cross_branch: bool | None = None,
    input_coherence: bool = True,
) -> DerivativeMoments:
    """Mean, variance and covariance with the input of d output / d input.

    ``inputs`` restricts the result to a subset of input coordinates.
    ``cross_branch`` forces (True) or disables (False) cross-branch
    covariances; by default they are added when every hidden layer is at
    most ``CROSS_BRANCH_MAX_WIDTH`` wide.

    Branches through different first-layer units still covary through the
    shared input belief. To first order that covariance is
    cov_a * cov_b / var(x), and ``input_coherence`` adds it for every pair
    the chosen branch model would otherwise treat as independent. Without
    it the variance can fall below cov(x, dz)^2 / var(x), which makes the
    conditioned input variance negative.
    """
    tabs = _tables(spec, posterior, state)
    top = state.units[-1]
    mean, var_sum, cov_in, sq_branch, sq_unit = _dp(tabs, top.dphi_mean, top.dphi_var, output_index)
    small = all(ls.output_width <= CROSS_BRANCH_MAX_WIDTH for ls in spec.layers[:-1]) and (
        branch_count(spec) <= CROSS_BRANCH_MAX_BRANCHES
    )
    use_cross = small if cross_branch is None else cross_branch
    variance = var_sum.copy()
    if use_cross:
        hidden = [range(ls.output_width) for ls in reversed(spec.layers[:-1])]
        mids = np.array(list(itertools.product(*hidden)), dtype=int).reshape(branch_count(spec), -1)
        B, D = mean.shape
        for b in range(B):
            for d in range(D):
                paths = np.column_stack(
                    [np.full(len(mids), output_index), mids, np.full(len(mids), d)]
                )
                variance[b, d] = _cross_branch_matrix(
                    tabs, float(top.dphi_mean[b, output_index]), float(top.dphi_var[b, output_index]), paths, b
                ).sum()
    coherent = np.zeros_like(variance)
    if input_coherence:
        x_var = state.units[0].z_var
        paired = cov_in**2 - (sq_unit if use_cross else sq_branch)
        coherent = np.divide(paired, x_var, out=np.zeros_like(paired), where=x_var > 0)
        variance = variance + coherent
    clamped = int(np.count_nonzero(variance < 0))
    variance = np.maximum(variance, 0.0)
    out = [mean, variance, cov_in, var_sum, coherent]
    if inputs is not None:
        idx = np.asarray(inputs)
        out = [q[:, idx] for q in out]
    if state.squeeze:
        out = [q[0] for q in out]
    mean, variance, cov_in, var_sum, coherent = out
    return DerivativeMoments(mean, variance, cov_in, not use_cross, clamped, var_sum, coherent)
