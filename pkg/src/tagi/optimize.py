"""Optimization by inference: condition the input belief on a zero derivative.

The surrogate network is trained online. After every parameter update the
input belief is pushed through the network, the moments of the output
derivative are computed, and the belief is conditioned on that derivative
being zero (``alpha=None``) or moved with a fixed orientation (``alpha=+1``
climbs the surrogate, ``alpha=-1`` descends it).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .deriv import derivative_moments
from .engine import InputBelief, Observation, backward, condition_output, forward
from .net import NetworkSpec, ParameterPosterior, init_posterior


class StationaryDerivativeError(ArithmeticError):
    """The derivative has zero variance, so conditioning on it is undefined."""


@dataclass
class OptimizerConfig:
    x0_mean: Sequence[float] = (0.25,)
    alpha: int | None = None  # +1 seeks a maximum, -1 a minimum, None = Newton-like step
    sigma_x0: float = 0.01  # prior std of the input, data units
    epochs: int = 50
    seed: int = 0
    sigma_v: float = 0.1  # observation noise std for surrogate training, data units
    hidden: tuple[int, ...] = (128, 128, 128)
    activations: tuple[str, ...] = ("tanh", "relu", "relu")
    prior_mean_gain: float = 1.0
    prior_var_gain: float = 0.01
    early_stop: bool = False  # stop when |mu'| < tol for `patience` consecutive steps
    tol: float = 1e-4
    patience: int = 5

    def __post_init__(self):
        if self.alpha not in (None, 1, -1):
            raise ValueError("alpha must be +1, -1 or None")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.sigma_x0 <= 0:
            raise ValueError("sigma_x0 must be > 0")
        if len(self.hidden) != len(self.activations):
            raise ValueError("one activation per hidden layer")

    def network(self, n_in: int, n_out: int = 1) -> NetworkSpec:
        return NetworkSpec.from_widths(
            [n_in, *self.hidden, n_out], [*self.activations, "identity"]
        )


@dataclass
class OptimizationTrace:
    x_mean: list[np.ndarray] = field(default_factory=list)  # data units
    x_var: list[np.ndarray] = field(default_factory=list)
    dz_mean: list[np.ndarray] = field(default_factory=list)  # standardized units
    dz_var: list[np.ndarray] = field(default_factory=list)
    y_mean: list[float] = field(default_factory=list)  # surrogate prediction, data units
    early_stopped: bool = False
    zero_sign: int = 0  # steps where sign(mu') was 0 and +1 was used

    def __len__(self) -> int:
        return len(self.x_mean)

    @property
    def final_mean(self) -> np.ndarray:
        return self.x_mean[-1]

    @property
    def final_var(self) -> np.ndarray:
        return self.x_var[-1]

    def rows(self):
        for k in range(len(self)):
            yield (
                k,
                *self.x_mean[k].tolist(),
                *self.x_var[k].tolist(),
                *self.dz_mean[k].tolist(),
                *self.dz_var[k].tolist(),
                self.y_mean[k],
            )

    def header(self) -> list[str]:
        d = len(self.x_mean[0]) if self.x_mean else 1
        cols = ["x_mean", "x_var", "dz_mean", "dz_var"]
        if d == 1:
            names = cols
        else:
            names = [f"{c}_{j}" for c in cols for j in range(d)]
        return ["iter", *names, "y_mean"]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(self.header())
            for row in self.rows():
                w.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


# ---------------------------------------------------------------------------
# input-belief updates


def _ratio(dz_mean, dz_var, cov):
    dz_mean, dz_var, cov = (np.asarray(a, dtype=float) for a in (dz_mean, dz_var, cov))
    if np.any(dz_var <= 0):
        raise StationaryDerivativeError("derivative variance is zero")
    return cov / dz_var, dz_mean


def infer_step_unconstrained(belief: InputBelief, dz_mean, dz_var, cov) -> InputBelief:
    """Condition each input coordinate on its partial derivative being zero."""
    gain, mu = _ratio(dz_mean, dz_var, cov)
    mean = belief.mean - gain * mu
    var = np.maximum(belief.var - gain * cov, 0.0)
    return InputBelief(mean, var)


def infer_step_constrained(belief: InputBelief, dz_mean, dz_var, cov, alpha: int) -> tuple[InputBelief, int]:
    """Step of the same size as the unconstrained one, oriented by alpha * sign(mu').

    Returns the new belief and the number of coordinates whose derivative
    mean was exactly zero (those use a + sign).
    """
    if alpha not in (1, -1):
        raise ValueError("alpha must be +1 or -1")
    gain, mu = _ratio(dz_mean, dz_var, cov)
    sign = np.sign(mu)
    zero = int(np.count_nonzero(sign == 0))
    sign = np.where(sign == 0, 1.0, sign)
    mean = belief.mean + alpha * sign * np.abs(gain * mu)
    var = np.maximum(belief.var - gain * cov, 0.0)
    return InputBelief(mean, var), zero


# ---------------------------------------------------------------------------
# Algorithm loop


@dataclass
class _Scaling:
    x_mu: np.ndarray
    x_sd: np.ndarray
    y_mu: float
    y_sd: float

    @classmethod
    def of(cls, data: Dataset) -> "_Scaling":
        x_sd = data.inputs.std(axis=0)
        y_sd = float(data.targets.std())
        return cls(
            data.inputs.mean(axis=0),
            np.where(x_sd > 0, x_sd, 1.0),
            float(data.targets.mean()),
            y_sd if y_sd > 0 else 1.0,
        )


def optimize_many(
    data: Dataset, configs: Sequence[OptimizerConfig]
) -> tuple[list[OptimizationTrace], ParameterPosterior]:
    """Run several starts against one shared surrogate.

    Surrogate training never looks at the input belief, so every start sees
    the same parameter sequence it would see in a run of its own. All
    configs must therefore agree on everything except ``x0_mean``,
    ``alpha`` and ``sigma_x0``.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if not configs:
        return [], None
    base = configs[0]
    shared = (
        "epochs", "seed", "sigma_v", "hidden", "activations",
        "prior_mean_gain", "prior_var_gain", "early_stop", "tol", "patience",
    )
    for c in configs[1:]:
        for k in shared:
            if getattr(c, k) != getattr(base, k):
                raise ValueError(f"configs differ in shared field {k!r}")
    sc = _Scaling.of(data)
    x = (data.inputs - sc.x_mu) / sc.x_sd
    y = (data.targets - sc.y_mu) / sc.y_sd
    spec = base.network(x.shape[1], y.shape[1])
    post = init_posterior(spec, base.seed, mean_gain=base.prior_mean_gain, var_gain=base.prior_var_gain)
    noise = (base.sigma_v / sc.y_sd) ** 2

    R = len(configs)
    mean = np.array([np.asarray(c.x0_mean, dtype=float) for c in configs])
    if mean.shape[1] != x.shape[1]:
        raise ValueError("x0_mean dimension does not match the data")
    mean = (mean - sc.x_mu) / sc.x_sd
    var = np.array([np.full(x.shape[1], c.sigma_x0**2) for c in configs]) / sc.x_sd**2
    alpha = [c.alpha for c in configs]
    traces = [OptimizationTrace() for _ in configs]
    active = np.ones(R, dtype=bool)
    quiet = np.zeros(R, dtype=int)

    def record(dz_m, dz_v, y_m):
        for r in range(R):
            if not active[r] and len(traces[r]):
                continue
            t = traces[r]
            t.x_mean.append(mean[r] * sc.x_sd + sc.x_mu)
            t.x_var.append(var[r] * sc.x_sd**2)
            t.dz_mean.append(dz_m[r].copy())
            t.dz_var.append(dz_v[r].copy())
            t.y_mean.append(float(y_m[r] * sc.y_sd + sc.y_mu))

    def moments():
        st = forward(spec, post, InputBelief(mean, var))
        dm = derivative_moments(spec, post, st, cross_branch=False)
        return st, dm

    st, dm = moments()
    record(dm.mean, dm.variance, st.output.a_mean[:, 0])
    rng = np.random.default_rng(base.seed)
    for _ in range(base.epochs):
        order = rng.permutation(len(x))
        for i in order:
            s = forward(spec, post, InputBelief(x[i], np.zeros(x.shape[1])))
            op = condition_output(s, Observation(y[i], noise))
            post = backward(spec, post, s, op, update_hidden=False, update_input=False).posterior
            st, dm = moments()
            for r in range(R):
                if not active[r]:
                    continue
                b = InputBelief(mean[r], var[r])
                if alpha[r] is None:
                    nb = infer_step_unconstrained(b, dm.mean[r], dm.variance[r], dm.cov_with_input[r])
                else:
                    nb, z = infer_step_constrained(b, dm.mean[r], dm.variance[r], dm.cov_with_input[r], alpha[r])
                    traces[r].zero_sign += z
                mean[r], var[r] = nb.mean, nb.var
                if base.early_stop:
                    quiet[r] = quiet[r] + 1 if np.all(np.abs(dm.mean[r]) < base.tol) else 0
            record(dm.mean, dm.variance, st.output.a_mean[:, 0])
            if base.early_stop:
                done = active & (quiet >= base.patience)
                for r in np.flatnonzero(done):
                    traces[r].early_stopped = True
                active &= ~done
                if not active.any():
                    return traces, post
    return traces, post


def optimize(data: Dataset, config: OptimizerConfig) -> OptimizationTrace:
    return optimize_many(data, [config])[0][0]
