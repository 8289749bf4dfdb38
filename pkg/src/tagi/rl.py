"""Continuous-action TD learning with a Gaussian policy network and a Q network.

Every ``horizon`` steps the stored transitions are turned into TD targets
(backward recursion seeded by a bootstrapped Q prediction), the Q network is
trained on them, and the policy is trained on actions inferred from the Q
network: the action belief proposed by the policy is conditioned on
dq/da = 0 and the result is used as an observation of the policy output.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .deriv import derivative_moments
from .engine import (
    Diagnostics,
    InputBelief,
    Observation,
    backward,
    condition_output,
    forward,
    train_epoch,
)
from .net import NetworkSpec, ParameterPosterior, init_posterior
from .optimize import infer_step_constrained, infer_step_unconstrained


@dataclass
class RlConfig:
    horizon: int = 1024
    sigma_v0: float = 2.0
    decay: float = 0.9999
    decay_every: int = 1024
    sigma_v_min: float = 0.3
    gamma: float = 0.99
    batch: int = 16
    epochs: int = 1
    seed: int = 0
    steps: int = 100_000
    policy_hidden: tuple[int, ...] = (128, 128)
    q_hidden: tuple[int, ...] = (128, 128, 128)
    q_activations: tuple[str, ...] = ("tanh", "relu", "relu")
    prior_var_gain: float = 1.0
    alpha: int | None = None  # None: condition on dq/da = 0; +1 climbs q
    inner_iterations: int = 1
    reward_scale: float = 1.0  # rewards are multiplied by this before learning
    stop_avg: float | None = None  # end the run once the 100-episode average reaches this

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.sigma_v_min > self.sigma_v0:
            raise ValueError("sigma_v_min exceeds sigma_v0")
        if self.sigma_v_min < 0:
            raise ValueError("sigma_v_min must be >= 0")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.batch < 1 or self.epochs < 1 or self.decay_every < 1:
            raise ValueError("batch, epochs and decay_every must be >= 1")
        if self.alpha not in (None, 1, -1):
            raise ValueError("alpha must be +1, -1 or None")
        if len(self.q_hidden) != len(self.q_activations):
            raise ValueError("one activation per Q hidden layer")


def sigma_v_at(step: int, config: RlConfig) -> float:
    """sigma_V after ``step`` environment steps: one decay per completed block."""
    return max(config.sigma_v_min, config.sigma_v0 * config.decay ** (step // config.decay_every))


# ---------------------------------------------------------------------------
# environments


class Environment(Protocol):
    state_dim: int
    action_dim: int
    low: np.ndarray
    high: np.ndarray

    def reset(self) -> np.ndarray: ...

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]: ...


class QuadraticBandit:
    """One state, one step per episode, reward -(a - optimum)^2."""

    state_dim = 1
    action_dim = 1

    def __init__(self, seed: int = 0, optimum: float = 0.4):
        self.optimum = optimum
        self.low = np.array([-1.0])
        self.high = np.array([1.0])

    def reset(self) -> np.ndarray:
        return np.zeros(1)

    def step(self, action):
        a = float(np.asarray(action).ravel()[0])
        return np.zeros(1), -((a - self.optimum) ** 2), True


class PointMass:
    """1D mass pushed by a bounded force toward the origin.

    State [position, velocity]; reward -position^2 - 0.01 force^2; fixed
    episode length; inelastic walls at +-2.
    """

    state_dim = 2
    action_dim = 1

    def __init__(self, seed: int = 0, length: int = 200, dt: float = 0.05, wall: float = 2.0):
        self.rng = np.random.default_rng(seed)
        self.length = length
        self.dt = dt
        self.wall = wall
        self.low = np.array([-1.0])
        self.high = np.array([1.0])
        self.state = np.zeros(2)
        self.t = 0

    def reset(self) -> np.ndarray:
        self.state = np.array([self.rng.uniform(-1.0, 1.0), 0.0])
        self.t = 0
        return self.state.copy()

    def step(self, action):
        f = float(np.clip(np.asarray(action).ravel()[0], -1.0, 1.0))
        pos, vel = self.state
        vel = vel + f * self.dt
        pos = pos + vel * self.dt
        if abs(pos) > self.wall:
            pos, vel = float(np.sign(pos)) * self.wall, 0.0
        self.state = np.array([pos, vel])
        self.t += 1
        reward = -(pos**2) - 0.01 * f * f
        return self.state.copy(), float(reward), self.t >= self.length


class ZeroReward:
    """Random-walk state, reward always 0, 50-step episodes."""

    state_dim = 1
    action_dim = 1

    def __init__(self, seed: int = 0, length: int = 50):
        self.rng = np.random.default_rng(seed)
        self.length = length
        self.low = np.array([-1.0])
        self.high = np.array([1.0])
        self.t = 0

    def reset(self) -> np.ndarray:
        self.t = 0
        return self.rng.standard_normal(1)

    def step(self, action):
        self.t += 1
        return self.rng.standard_normal(1), 0.0, self.t >= self.length


ENVIRONMENTS = {"bandit": QuadraticBandit, "pointmass": PointMass, "zero": ZeroReward}


def make_env(name: str, seed: int) -> Environment:
    try:
        return ENVIRONMENTS[name](seed=seed)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None


# ---------------------------------------------------------------------------
# memory and TD targets


class EpisodeMemory:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def add(self, s, a, r) -> None:
        self._items.append((np.asarray(s, dtype=float), np.asarray(a, dtype=float), float(r)))

    def __len__(self) -> int:
        return len(self._items)

    @property
    def full(self) -> bool:
        return len(self._items) == self.capacity

    def clear(self) -> None:
        self._items.clear()

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self._items:
            raise ValueError("memory is empty")
        s, a, r = zip(*self._items)
        return np.array(s), np.array(a), np.array(r)


@dataclass
class TdTargets:
    mean: np.ndarray
    std: np.ndarray


def td_targets(rewards, bootstrap_mean: float, bootstrap_std: float, gamma: float, sigma_v: float) -> TdTargets:
    """Backward recursion mu_j = r_j + gamma mu_{j+1}, var_j = gamma^2 var_{j+1} + sigma_v^2."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("no rewards")
    H = len(r)
    mean = np.empty(H)
    var = np.empty(H)
    m, v = float(bootstrap_mean), float(bootstrap_std) ** 2
    for j in range(H - 1, -1, -1):
        m = r[j] + gamma * m
        v = gamma * gamma * v + sigma_v * sigma_v
        mean[j] = m
        var[j] = v
    return TdTargets(mean, np.sqrt(var))


# ---------------------------------------------------------------------------
# agent


@dataclass
class Agent:
    policy_spec: NetworkSpec
    policy: ParameterPosterior
    q_spec: NetworkSpec
    q: ParameterPosterior

    @classmethod
    def create(cls, state_dim: int, action_dim: int, config: RlConfig, seed: int) -> "Agent":
        pspec = NetworkSpec.from_widths(
            [state_dim, *config.policy_hidden, action_dim],
            ["relu"] * len(config.policy_hidden) + ["tanh"],
        )
        qspec = NetworkSpec.from_widths(
            [state_dim + action_dim, *config.q_hidden, 1], [*config.q_activations, "identity"]
        )
        g = config.prior_var_gain
        return cls(pspec, init_posterior(pspec, seed, var_gain=g), qspec, init_posterior(qspec, seed + 1, var_gain=g))


def policy_moments(agent: Agent, states) -> tuple[np.ndarray, np.ndarray]:
    s = np.atleast_2d(np.asarray(states, dtype=float))
    out = forward(agent.policy_spec, agent.policy, InputBelief(s, np.zeros_like(s))).output
    return out.a_mean, out.a_var


def sample_action(agent: Agent, state, sigma_v: float, rng: np.random.Generator, low, high) -> np.ndarray:
    """Draw from N(policy mean, policy var + sigma_v^2), clipped to the action box."""
    mean, var = policy_moments(agent, state)
    a = mean[0] + np.sqrt(var[0] + sigma_v * sigma_v) * rng.standard_normal(mean.shape[1])
    return np.clip(a, low, high)


def q_moments(agent: Agent, states, actions, action_var=0.0) -> tuple[np.ndarray, np.ndarray]:
    s = np.atleast_2d(np.asarray(states, dtype=float))
    a = np.atleast_2d(np.asarray(actions, dtype=float))
    x = np.hstack([s, a])
    v = np.hstack([np.zeros_like(s), np.broadcast_to(action_var, a.shape)])
    out = forward(agent.q_spec, agent.q, InputBelief(x, v)).output
    return out.a_mean[:, 0], out.a_var[:, 0]


def update_value(agent: Agent, states, actions, targets: TdTargets, config: RlConfig, seed: int) -> ParameterPosterior:
    x = np.hstack([np.atleast_2d(states), np.atleast_2d(actions)])
    post = agent.q
    for e in range(config.epochs):
        post, _ = train_epoch(
            agent.q_spec, post, x, targets.mean[:, None], targets.std[:, None] ** 2,
            seed + e, batch_size=config.batch,
        )
    return post


@dataclass
class PolicyUpdateInfo:
    skipped: int = 0  # states whose dq/da had zero variance
    shift: float = 0.0  # mean |inferred action - proposed action|
    diagnostics: Diagnostics = field(default_factory=Diagnostics)


def infer_actions(agent: Agent, states, sigma_v: float, config: RlConfig):
    """Action beliefs proposed by the policy, conditioned on dq/da = 0.

    Returns (proposed mean, inferred mean, inferred var, usable mask).
    """
    s = np.atleast_2d(np.asarray(states, dtype=float))
    mu_a, var_a = policy_moments(agent, s)
    var_a = var_a + sigma_v * sigma_v
    mean, var = mu_a.copy(), var_a.copy()
    S = s.shape[1]
    acts = list(range(S, S + mean.shape[1]))
    ok = np.ones(len(s), dtype=bool)
    for _ in range(config.inner_iterations):
        x = np.hstack([s, mean])
        v = np.hstack([np.zeros_like(s), var])
        st = forward(agent.q_spec, agent.q, InputBelief(x, v))
        dm = derivative_moments(agent.q_spec, agent.q, st, inputs=acts, cross_branch=False)
        usable = np.all(dm.variance > 0, axis=1)
        ok &= usable
        for b in np.flatnonzero(usable):
            belief = InputBelief(mean[b], var[b])
            if config.alpha is None:
                nb = infer_step_unconstrained(belief, dm.mean[b], dm.variance[b], dm.cov_with_input[b])
            else:
                nb, _ = infer_step_constrained(belief, dm.mean[b], dm.variance[b], dm.cov_with_input[b], config.alpha)
            mean[b], var[b] = nb.mean, nb.var
    return mu_a, mean, var, ok


def update_policy(agent: Agent, states, sigma_v: float, config: RlConfig) -> tuple[ParameterPosterior, PolicyUpdateInfo]:
    s_all = np.atleast_2d(np.asarray(states, dtype=float))
    info = PolicyUpdateInfo()
    post = agent.policy
    shifts = []
    for start in range(0, len(s_all), config.batch):
        s = s_all[start : start + config.batch]
        view = Agent(agent.policy_spec, post, agent.q_spec, agent.q)
        mu_a, mean, var, ok = infer_actions(view, s, sigma_v, config)
        info.skipped += int(np.count_nonzero(~ok))
        if not ok.any():
            continue
        s, mean, var = s[ok], mean[ok], var[ok]
        shifts.append(np.abs(mean - mu_a[ok]).ravel())
        st = forward(agent.policy_spec, post, InputBelief(s, np.zeros_like(s)))
        res = backward(
            agent.policy_spec, post, st, condition_output(st, Observation(mean, var)),
            update_hidden=False, update_input=False,
        )
        post = res.posterior
        info.diagnostics.add(res.diagnostics)
    if shifts:
        info.shift = float(np.mean(np.concatenate(shifts)))
    return post, info


# ---------------------------------------------------------------------------
# Algorithm loop


@dataclass
class RewardTrace:
    step: list[int] = field(default_factory=list)
    episode: list[int] = field(default_factory=list)
    reward: list[float] = field(default_factory=list)
    sigma_v: list[float] = field(default_factory=list)
    moving_avg_100: list[float] = field(default_factory=list)  # mean return of the last 100 episodes
    episode_returns: list[float] = field(default_factory=list)
    skipped_states: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["step", "episode", "reward", "sigma_v", "moving_avg_100"])
            for row in zip(self.step, self.episode, self.reward, self.sigma_v, self.moving_avg_100):
                w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4])])

    def window_mean(self, start: int, stop: int) -> float:
        r = np.asarray(self.reward)
        return float(r[start:stop].mean())


def train(env: Environment, config: RlConfig, agent: Agent | None = None) -> tuple[RewardTrace, Agent]:
    rng = np.random.default_rng(config.seed)
    if agent is None:
        agent = Agent.create(env.state_dim, env.action_dim, config, config.seed)
    memory = EpisodeMemory(config.horizon)
    trace = RewardTrace()
    recent: deque = deque(maxlen=100)
    s = env.reset()
    episode, ep_return = 0, 0.0
    avg = float("nan")
    for step in range(config.steps):
        sv = sigma_v_at(step, config)
        a = sample_action(agent, s, sv, rng, env.low, env.high)
        s_next, r, done = env.step(a)
        memory.add(s, a, r * config.reward_scale)
        ep_return += r
        trace.step.append(step)
        trace.episode.append(episode)
        trace.reward.append(float(r))
        trace.sigma_v.append(sv)
        if done:
            recent.append(ep_return)
            trace.episode_returns.append(ep_return)
            avg = float(np.mean(recent))
            episode += 1
            ep_return = 0.0
            s = env.reset()
        else:
            s = s_next
        trace.moving_avg_100.append(avg)
        if config.stop_avg is not None and len(recent) == recent.maxlen and avg >= config.stop_avg:
            break
        if memory.full:
            a_boot = sample_action(agent, s, sv, rng, env.low, env.high)
            mq, vq = q_moments(agent, s, a_boot)
            S, A, R = memory.arrays()
            targets = td_targets(R, mq[0], np.sqrt(vq[0]), config.gamma, sv)
            agent.q = update_value(agent, S, A, targets, config, int(rng.integers(2**31 - 1)))
            agent.policy, info = update_policy(agent, S, sv, config)
            trace.skipped_states += info.skipped
            memory.clear()
    return trace, agent
