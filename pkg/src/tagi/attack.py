"""Adversarial examples by recursive inference on the input layer.

The image becomes a Gaussian belief N(x, sigma_x^2 I). Each iteration
pushes the belief through the frozen classifier, conditions the output on
the label we want the network to report, and carries the updated input
belief over as the next prior. Parameters are never touched.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np

from .data import Dataset
from .engine import InputBelief, Observation, backward, condition_output, forward
from .net import Model


class UntrainedModelError(ValueError):
    pass


@dataclass
class AttackConfig:
    sigma_x: float = 0.03
    max_epochs: int = 100
    target: int | None = None  # None: non-targeted
    seed: int = 0
    early_stop: bool = False  # stop after `patience` consecutive successful readings
    patience: int = 3
    low: float = 0.0  # valid pixel range
    high: float = 1.0

    def __post_init__(self):
        if self.sigma_x < 0:
            raise ValueError("sigma_x must be >= 0")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.low >= self.high:
            raise ValueError("empty pixel range")


@dataclass
class AttackResult:
    x_mean: np.ndarray
    x_var: np.ndarray
    iterations: int
    success: bool
    pred_before: int
    pred_after: int
    linf: float
    l2: float


def _check_model(model: Model, n_features: int) -> None:
    if model.posterior.updates == 0:
        raise UntrainedModelError("model has never been trained; attacks need a trained classifier")
    if n_features != model.spec.input_width:
        raise ValueError(f"input has {n_features} features, model expects {model.spec.input_width}")


def predict_class(model: Model, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    st = forward(model.spec, model.posterior, InputBelief(x, np.zeros_like(x)))
    return np.argmax(st.output.a_mean, axis=1)


def _run(model: Model, x: np.ndarray, obs_value: np.ndarray, goal, config: AttackConfig):
    """Batched attack loop.

    ``goal(pred, rows)`` flags which of the batch rows ``rows`` count as a
    success given their predicted classes ``pred``.
    """
    _check_model(model, x.shape[1])
    if np.any(x < config.low) or np.any(x > config.high):
        raise ValueError(f"input outside the valid range [{config.low}, {config.high}]")
    B = len(x)
    noise = np.full(obs_value.shape, model.obs.sigma_v**2)
    obs = Observation(obs_value, noise)
    mean = x.copy()
    var = np.full_like(x, config.sigma_x**2)
    pred0 = predict_class(model, x)
    pred = pred0.copy()
    every = np.arange(B)
    done = goal(pred0, every)  # already fooled: nothing to do
    iters = np.zeros(B, dtype=int)
    streak = np.zeros(B, dtype=int)
    active = ~done
    for _ in range(config.max_epochs):
        if not active.any():
            break
        rows = np.flatnonzero(active)
        st = forward(model.spec, model.posterior, InputBelief(mean[rows], var[rows]))
        sub = Observation(obs.value[rows], obs.noise_var[rows])
        res = backward(
            model.spec, model.posterior, st, condition_output(st, sub),
            update_params=False, update_hidden=False, update_input=True,
        )
        mean[rows] = np.clip(res.input.mean, config.low, config.high)
        var[rows] = res.input.var
        iters[rows] += 1
        pred[rows] = predict_class(model, mean[rows])
        if config.early_stop:
            ok = goal(pred[rows], rows)
            streak[rows] = np.where(ok, streak[rows] + 1, 0)
            active[rows[streak[rows] >= config.patience]] = False
    success = goal(pred, every)
    delta = mean - x
    results = []
    for b in range(B):
        results.append(
            AttackResult(
                x_mean=mean[b],
                x_var=var[b],
                iterations=int(iters[b]),
                success=bool(success[b]),
                pred_before=int(pred0[b]),
                pred_after=int(pred[b]),
                linf=float(np.max(np.abs(delta[b]))) if delta.shape[1] else 0.0,
                l2=float(np.linalg.norm(delta[b])),
            )
        )
    return results


def _n_classes(model: Model) -> int:
    return model.spec.output_width


def attack_targeted_batch(model: Model, x, targets, config: AttackConfig) -> list[AttackResult]:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    targets = np.broadcast_to(np.asarray(targets, dtype=int), (len(x),))
    C = _n_classes(model)
    if np.any(targets < 0) or np.any(targets >= C):
        raise ValueError(f"target outside [0, {C})")
    obs = np.zeros((len(x), C))
    obs[np.arange(len(x)), targets] = 1.0
    return _run(model, x, obs, lambda pred, rows: pred == targets[rows], config)


def attack_untargeted_batch(model: Model, x, labels, config: AttackConfig) -> list[AttackResult]:
    """Observe the true-class output at 0 and leave the other outputs unobserved."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    labels = np.broadcast_to(np.asarray(labels, dtype=int), (len(x),))
    C = _n_classes(model)
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"label outside [0, {C})")
    obs = np.full((len(x), C), np.nan)
    obs[np.arange(len(x)), labels] = 0.0
    return _run(model, x, obs, lambda pred, rows: pred != labels[rows], config)


def attack_targeted(model: Model, x, config: AttackConfig) -> AttackResult:
    if config.target is None:
        raise ValueError("targeted attack needs config.target")
    return attack_targeted_batch(model, np.asarray(x, dtype=float)[None], [config.target], config)[0]


def attack_untargeted(model: Model, x, label: int, config: AttackConfig) -> AttackResult:
    return attack_untargeted_batch(model, np.asarray(x, dtype=float)[None], [label], config)[0]


# ---------------------------------------------------------------------------
# evaluation report


SCHEMA_NAME = "attack_report.schema.json"


def report_schema() -> dict:
    return json.loads(resources.files("tagi").joinpath("schemas", SCHEMA_NAME).read_text())


@dataclass
class AttackReport:
    n_images: int
    sigma_x: float
    max_epochs: int
    seed: int
    clean_error: float
    targeted_error: float  # misclassified after a targeted attack
    targeted_success: float  # predicted the requested class
    untargeted_error: float
    targeted_linf: float
    targeted_l2: float
    untargeted_linf: float
    untargeted_l2: float
    parameters_unchanged: bool
    images: list[dict]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def choose_targets(labels, n_classes: int, seed: int) -> np.ndarray:
    """A uniformly random wrong class for each label."""
    rng = np.random.default_rng(seed)
    shift = rng.integers(1, n_classes, size=len(labels))
    return (np.asarray(labels) + shift) % n_classes


CHUNK = 25  # images per batched attack; fixed so results do not depend on threads


def _chunked(fn, model, x, y, config, threads):
    parts = [(x[k : k + CHUNK], y[k : k + CHUNK]) for k in range(0, len(x), CHUNK)]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        done = list(pool.map(lambda p: fn(model, p[0], p[1], config), parts))
    return [r for chunk in done for r in chunk]


def evaluate_attacks(
    model: Model, data: Dataset, config: AttackConfig, *, n_images: int | None = None, threads: int = 1
) -> AttackReport:
    """Clean, targeted and non-targeted error rates on ``n_images`` random rows."""
    if data.kind != "classification":
        raise ValueError("attacks need a labelled classification dataset")
    if len(data) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    n = len(data) if n_images is None else min(n_images, len(data))
    idx = np.sort(rng.permutation(len(data))[:n])
    x = data.inputs[idx]
    labels = data.labels[idx]
    targets = choose_targets(labels, model.spec.output_width, config.seed + 1)
    before = model.posterior.copy()
    tgt = _chunked(attack_targeted_batch, model, x, targets, config, threads)
    unt = _chunked(attack_untargeted_batch, model, x, labels, config, threads)
    unchanged = model.posterior.equal(before)
    clean_pred = predict_class(model, x)
    images = [
        {
            "index": int(i),
            "label": int(y),
            "clean_pred": int(c),
            "target": int(t),
            "targeted_pred": r.pred_after,
            "targeted_linf": r.linf,
            "untargeted_pred": u.pred_after,
            "untargeted_linf": u.linf,
        }
        for i, y, c, t, r, u in zip(idx, labels, clean_pred, targets, tgt, unt)
    ]
    return AttackReport(
        n_images=int(n),
        sigma_x=float(config.sigma_x),
        max_epochs=int(config.max_epochs),
        seed=int(config.seed),
        clean_error=float(np.mean(clean_pred != labels)),
        targeted_error=float(np.mean([r.pred_after != y for r, y in zip(tgt, labels)])),
        targeted_success=float(np.mean([r.success for r in tgt])),
        untargeted_error=float(np.mean([r.success for r in unt])),
        targeted_linf=float(np.mean([r.linf for r in tgt])),
        targeted_l2=float(np.mean([r.l2 for r in tgt])),
        untargeted_linf=float(np.mean([r.linf for r in unt])),
        untargeted_l2=float(np.mean([r.l2 for r in unt])),
        parameters_unchanged=bool(unchanged),
        images=images,
    )
