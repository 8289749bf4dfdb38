"""Forward propagation of Gaussian moments and layer-wise Gaussian conditioning.

Shapes: every per-unit array carries a leading batch axis ``(B, n)``. A
single example is a batch of one. Within a layer, hidden units are treated
as mutually independent, so only variances are stored per unit; the
cross-covariances needed by the backward pass (hidden state with the
parameters and with the previous layer) are rebuilt on demand from the
stored moments.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gma import Activation, linearize
from .net import NetworkSpec, ParameterPosterior


class DegenerateObservationError(ArithmeticError):
    """Zero predictive variance and zero noise, yet the observation differs from the prediction."""


@dataclass
class InputBelief:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.var = np.broadcast_to(np.asarray(self.var, dtype=float), self.mean.shape).copy()
        if np.any(self.var < 0):
            raise ValueError("input variance must be >= 0")

    @classmethod
    def point(cls, x) -> "InputBelief":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(x, np.zeros_like(x))


@dataclass
class UnitMoments:
    """Moments of the hidden states Z and activations A of one layer."""

    kind: Activation
    z_mean: np.ndarray
    z_var: np.ndarray
    a_mean: np.ndarray
    a_var: np.ndarray
    jac: np.ndarray
    dphi_mean: np.ndarray
    dphi_var: np.ndarray

    @classmethod
    def from_z(cls, kind, z_mean, z_var) -> "UnitMoments":
        a_mean, a_var, jac, dm, dv = linearize(kind, z_mean, z_var)
        return cls(Activation(kind), z_mean, z_var, a_mean, a_var, jac, dm, dv)


@dataclass
class ForwardState:
    """Per-layer moments; ``units[0]`` is the input layer, ``units[-1]`` the output."""

    units: list[UnitMoments]
    squeeze: bool = False  # input was a single unbatched vector

    @property
    def output(self) -> UnitMoments:
        return self.units[-1]

    def out_mean(self) -> np.ndarray:
        m = self.output.a_mean
        return m[0] if self.squeeze else m

    def out_var(self) -> np.ndarray:
        v = self.output.a_var
        return v[0] if self.squeeze else v

    # stored cross-covariances, materialized lazily ------------------------
    def cov_z_w(self, posterior: ParameterPosterior, l: int) -> np.ndarray:
        """cov(Z_i^{l+1}, W_ik^{l}) with shape (B, out, in)."""
        return posterior.layers[l].w_var[None] * self.units[l].a_mean[:, None, :]

    def cov_z_b(self, posterior: ParameterPosterior, l: int) -> np.ndarray:
        """cov(Z_i^{l+1}, B_i^{l}) with shape (out,)."""
        return posterior.layers[l].b_var

    def cov_z_prev(self, posterior: ParameterPosterior, l: int) -> np.ndarray:
        """cov(Z_i^{l+1}, Z_k^{l}) with shape (B, out, in); for l = 0 this is cov(Z^1, X)."""
        u = self.units[l]
        return posterior.layers[l].w_mean[None] * (u.jac * u.z_var)[:, None, :]


@dataclass
class Observation:
    """Observed output values with per-unit noise variance.

    ``value`` entries that are NaN are treated as unobserved.
    """

    value: np.ndarray
    noise_var: np.ndarray

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float)
        self.noise_var = np.broadcast_to(np.asarray(self.noise_var, dtype=float), self.value.shape).copy()
        if np.any(self.noise_var < 0):
            raise ValueError("noise variance must be >= 0")


@dataclass
class OutputPosterior:
    z_mean: np.ndarray
    z_var: np.ndarray
    a_mean: np.ndarray
    a_var: np.ndarray
    skipped: int = 0


@dataclass
class Diagnostics:
    clamped: int = 0  # variances floored at zero
    skipped: int = 0  # units with zero prior variance but non-zero innovation

    def add(self, other: "Diagnostics") -> None:
        self.clamped += other.clamped
        self.skipped += other.skipped


@dataclass
class BackwardResult:
    posterior: ParameterPosterior
    hidden: list[tuple[np.ndarray, np.ndarray]]  # posterior (mean, var) of Z^1..Z^L
    input: InputBelief | None
    diagnostics: Diagnostics = field(default_factory=Diagnostics)


def _batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _check_dims(spec: NetworkSpec, posterior: ParameterPosterior, width: int) -> None:
    if width != spec.input_width:
        raise ValueError(f"input width {width} != network input width {spec.input_width}")
    if len(posterior.layers) != len(spec.layers):
        raise ValueError("posterior does not match network spec")


def forward(spec: NetworkSpec, posterior: ParameterPosterior, belief: InputBelief) -> ForwardState:
    mean, squeeze = _batch(belief.mean)
    var, _ = _batch(belief.var)
    _check_dims(spec, posterior, mean.shape[1])
    units = [UnitMoments.from_z(Activation.IDENTITY, mean, var)]
    for ls, p in zip(spec.layers, posterior.layers):
        prev = units[-1]
        if p.w_mean.shape != (ls.output_width, ls.input_width):
            raise ValueError("posterior weight shape does not match spec")
        z_mean = prev.a_mean @ p.w_mean.T + p.b_mean
        # sum of var(W A) over independent terms, plus the bias variance
        z_var = (
            prev.a_var @ (p.w_var + p.w_mean * p.w_mean).T
            + (prev.a_mean * prev.a_mean) @ p.w_var.T
            + p.b_var
        )
        units.append(UnitMoments.from_z(ls.activation, z_mean, z_var))
    return ForwardState(units, squeeze)


def deterministic_forward(spec: NetworkSpec, posterior: ParameterPosterior, x) -> np.ndarray:
    """Plain forward pass through the weight means."""
    from .gma import activate

    a, squeeze = _batch(x)
    for ls, p in zip(spec.layers, posterior.layers):
        a = activate(ls.activation, a @ p.w_mean.T + p.b_mean)
    return a[0] if squeeze else a


def condition_output(state: ForwardState, obs: Observation) -> OutputPosterior:
    """Scalar Gaussian conditioning of each output unit on its observation."""
    out = state.output
    y, _ = _batch(obs.value)
    r, _ = _batch(obs.noise_var)
    if y.shape != out.z_mean.shape:
        raise ValueError(f"observation shape {y.shape} != output shape {out.z_mean.shape}")
    observed = ~np.isnan(y)
    innov = np.where(observed, y - out.a_mean, 0.0)
    s = out.a_var + r
    zero = observed & (s == 0)
    if np.any(zero & (innov != 0)):
        raise DegenerateObservationError(
            "zero predictive and observation variance with a non-zero innovation"
        )
    skipped = int(np.sum(observed & (out.a_var == 0) & (innov != 0)))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_s = np.where(observed & (s > 0) & np.isfinite(s), 1.0 / s, 0.0)
    cov_az = out.jac * out.z_var
    z_mean = out.z_mean + cov_az * inv_s * innov
    z_var = np.maximum(out.z_var - cov_az * cov_az * inv_s, 0.0)
    a_mean = out.a_mean + out.a_var * inv_s * innov
    a_var = np.maximum(out.a_var - out.a_var * out.a_var * inv_s, 0.0)
    return OutputPosterior(z_mean, z_var, a_mean, a_var, skipped)


def _clamp(x: np.ndarray, diag: Diagnostics) -> np.ndarray:
    neg = x < 0
    n = int(np.count_nonzero(neg))
    if n:
        diag.clamped += n
        x = np.where(neg, 0.0, x)
    return x


def _deltas(prior_mean, prior_var, post_mean, post_var):
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = prior_var > 0
        dm = np.where(pos, (post_mean - prior_mean) / prior_var, 0.0)
        dv = np.where(pos, (post_var - prior_var) / (prior_var * prior_var), 0.0)
    return dm, dv


def backward(
    spec: NetworkSpec,
    posterior: ParameterPosterior,
    state: ForwardState,
    out_post: OutputPosterior,
    *,
    update_params: bool = True,
    update_hidden: bool = True,
    update_input: bool = True,
) -> BackwardResult:
    """Propagate the output update down the network, layer by layer.

    Each quantity Q connected to Z^{l+1} moves by cov(Q, Z) var(Z)^-1 times the
    change in the mean of Z, and its variance by cov^2 var^-2 times the change
    in var(Z). Parameters and the previous layer use the same innovation.
    Parameter deltas are summed over the batch axis.
    """
    diag = Diagnostics(skipped=out_post.skipped)
    units = state.units
    n_layers = len(spec.layers)
    new_post = posterior.copy() if update_params else posterior
    dm, dv = _deltas(units[-1].z_mean, units[-1].z_var, out_post.z_mean, out_post.z_var)
    hidden: list[tuple[np.ndarray, np.ndarray]] = [None] * n_layers  # type: ignore[list-item]
    hidden[-1] = (out_post.z_mean, out_post.z_var)
    belief = None
    for l in range(n_layers - 1, -1, -1):
        p = posterior.layers[l]
        prev = units[l]
        need_prev = l > 0 or update_input
        if need_prev:
            dm_prev = (dm @ p.w_mean) * prev.jac
            dv_prev = (dv @ (p.w_mean * p.w_mean)) * (prev.jac * prev.jac)
        if update_params:
            q = new_post.layers[l]
            a = prev.a_mean
            q.w_mean = p.w_mean + p.w_var * (dm.T @ a)
            q.w_var = _clamp(p.w_var + p.w_var * p.w_var * (dv.T @ (a * a)), diag)
            q.b_mean = p.b_mean + p.b_var * dm.sum(axis=0)
            q.b_var = _clamp(p.b_var + p.b_var * p.b_var * dv.sum(axis=0), diag)
        if not need_prev:
            break
        post_mean = prev.z_mean + prev.z_var * dm_prev
        post_var = _clamp(prev.z_var + prev.z_var * prev.z_var * dv_prev, diag)
        if l > 0:
            if update_hidden:
                hidden[l - 1] = (post_mean, post_var)
        else:
            belief = InputBelief(
                post_mean[0] if state.squeeze else post_mean,
                post_var[0] if state.squeeze else post_var,
            )
        dm, dv = dm_prev, dv_prev
    if update_params:
        new_post.updates = posterior.updates + units[0].z_mean.shape[0]
    return BackwardResult(new_post, hidden, belief, diag)


def gaussian_nll(y, mean, var) -> float:
    var = np.maximum(var, 1e-300)
    return float(np.sum(0.5 * (np.log(2 * np.pi * var) + (y - mean) ** 2 / var)))


@dataclass
class EpochLog:
    log_likelihood: float  # mean predictive log density before each update
    rmse: float
    diagnostics: Diagnostics


def train_epoch(
    spec: NetworkSpec,
    posterior: ParameterPosterior,
    inputs: np.ndarray,
    targets: np.ndarray,
    noise_var,
    seed: int,
    *,
    batch_size: int = 1,
    shuffle: bool = True,
) -> tuple[ParameterPosterior, EpochLog]:
    """One pass of parameter-only updates over the data.

    ``noise_var`` is a scalar, or an array shaped like ``targets`` for
    heteroscedastic observations. Hidden-state and input updates are computed
    only where needed to reach the parameters and are then discarded.
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if len(x) == 0:
        raise ValueError("empty dataset")
    if len(x) != len(y):
        raise ValueError("inputs and targets differ in length")
    r = np.broadcast_to(np.asarray(noise_var, dtype=float), y.shape)
    order = np.random.default_rng(seed).permutation(len(x)) if shuffle else np.arange(len(x))
    diag = Diagnostics()
    nll = 0.0
    sq = 0.0
    for start in range(0, len(x), batch_size):
        idx = order[start : start + batch_size]
        xb = x[idx]
        state = forward(spec, posterior, InputBelief(xb, np.zeros_like(xb)))
        out = state.output
        nll += gaussian_nll(y[idx], out.a_mean, out.a_var + r[idx])
        sq += float(np.sum((y[idx] - out.a_mean) ** 2))
        op = condition_output(state, Observation(y[idx], r[idx]))
        res = backward(spec, posterior, state, op, update_hidden=False, update_input=False)
        posterior = res.posterior
        diag.add(res.diagnostics)
    n = y.size
    return posterior, EpochLog(-nll / len(x), float(np.sqrt(sq / n)), diag)


def predict(spec: NetworkSpec, posterior: ParameterPosterior, x, x_var=0.0):
    """Predictive output mean and variance (without observation noise)."""
    xb, squeeze = _batch(x)
    state = forward(spec, posterior, InputBelief(xb, np.broadcast_to(x_var, xb.shape)))
    out = state.output
    if squeeze:
        return out.a_mean[0], out.a_var[0]
    return out.a_mean, out.a_var


def fit(
    spec: NetworkSpec,
    posterior: ParameterPosterior,
    inputs: np.ndarray,
    targets: np.ndarray,
    noise_var,
    *,
    epochs: int,
    seed: int,
    batch_size: int = 1,
) -> tuple[ParameterPosterior, list[EpochLog]]:
    """``epochs`` calls to ``train_epoch`` with per-epoch shuffling seeds drawn from ``seed``."""
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=epochs)
    logs = []
    for s in seeds:
        posterior, log = train_epoch(
            spec, posterior, inputs, targets, noise_var, int(s), batch_size=batch_size
        )
        logs.append(log)
    return posterior, logs
