"""Network topology, Gaussian parameter beliefs and the ``.tagi`` model file."""
from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .gma import Activation

FORMAT_VERSION = 1
MAGIC = b"TAGI"


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    input_width: int
    output_width: int
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        if self.input_width < 1 or self.output_width < 1:
            raise ValueError("layer widths must be >= 1")
        object.__setattr__(self, "activation", Activation(self.activation))


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.output_width != nxt.input_width:
                raise ValueError(
                    f"width mismatch: {prev.output_width} -> {nxt.input_width}"
                )
        object.__setattr__(self, "layers", layers)

    @classmethod
    def from_widths(cls, widths: Sequence[int], activations: Sequence[str | Activation]) -> "NetworkSpec":
        """``widths`` includes the input; one activation per non-input layer."""
        if len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        return cls(
            tuple(
                LayerSpec(widths[k], widths[k + 1], Activation(act))
                for k, act in enumerate(activations)
            )
        )

    @property
    def input_width(self) -> int:
        return self.layers[0].input_width

    @property
    def output_width(self) -> int:
        return self.layers[-1].output_width

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].input_width] + [l.output_width for l in self.layers]

    def to_dict(self) -> dict:
        return {
            "widths": self.widths,
            "activations": [l.activation.value for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls.from_widths(d["widths"], d["activations"])


@dataclass
class LayerParams:
    w_mean: np.ndarray  # (out, in)
    w_var: np.ndarray
    b_mean: np.ndarray  # (out,)
    b_var: np.ndarray

    def copy(self) -> "LayerParams":
        return LayerParams(
            self.w_mean.copy(), self.w_var.copy(), self.b_mean.copy(), self.b_var.copy()
        )


@dataclass
class ParameterPosterior:
    layers: list[LayerParams]
    updates: int = 0  # number of observations conditioned on so far

    def copy(self) -> "ParameterPosterior":
        return ParameterPosterior([l.copy() for l in self.layers], self.updates)

    def arrays(self):
        for l in self.layers:
            yield l.w_mean
            yield l.w_var
            yield l.b_mean
            yield l.b_var

    def check(self, spec: NetworkSpec | None = None) -> None:
        """Raise if any variance is negative, any value non-finite, or shapes disagree."""
        for k, l in enumerate(self.layers):
            for name in ("w_mean", "w_var", "b_mean", "b_var"):
                arr = getattr(l, name)
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"layer {k} {name} has non-finite entries")
            if np.any(l.w_var < 0) or np.any(l.b_var < 0):
                raise ValueError(f"layer {k} has negative variance")
        if spec is not None:
            if len(spec.layers) != len(self.layers):
                raise ValueError("layer count does not match spec")
            for k, (ls, lp) in enumerate(zip(spec.layers, self.layers)):
                shape = (ls.output_width, ls.input_width)
                if lp.w_mean.shape != shape or lp.w_var.shape != shape:
                    raise ValueError(f"layer {k} weight shape {lp.w_mean.shape} != {shape}")
                if lp.b_mean.shape != (ls.output_width,) or lp.b_var.shape != (ls.output_width,):
                    raise ValueError(f"layer {k} bias shape mismatch")

    def equal(self, other: "ParameterPosterior") -> bool:
        """Bit-exact equality of every mean and variance."""
        if len(self.layers) != len(other.layers):
            return False
        return all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass
class ObservationModel:
    sigma_v: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.sigma_v) or self.sigma_v < 0:
            raise ValueError("sigma_v must be finite and >= 0")


def init_posterior(
    spec: NetworkSpec, seed: int, *, mean_gain: float = 1.0, var_gain: float = 1.0
) -> ParameterPosterior:
    """Fan-in scaled prior.

    Weight means ~ N(0, mean_gain / fan_in), weight and bias variances
    var_gain / fan_in, bias means 0.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for ls in spec.layers:
        scale = 1.0 / ls.input_width
        shape = (ls.output_width, ls.input_width)
        layers.append(
            LayerParams(
                w_mean=rng.normal(0.0, np.sqrt(mean_gain * scale), size=shape),
                w_var=np.full(shape, var_gain * scale),
                b_mean=np.zeros(ls.output_width),
                b_var=np.full(ls.output_width, var_gain * scale),
            )
        )
    return ParameterPosterior(layers)


# ---------------------------------------------------------------------------
# model file: MAGIC | u32 header length | JSON header | float64 LE payload


@dataclass
class Model:
    spec: NetworkSpec
    posterior: ParameterPosterior
    obs: ObservationModel = field(default_factory=ObservationModel)
    seed: int = 0
    meta: dict = field(default_factory=dict)  # e.g. standardization stats


def dumps(model: Model) -> bytes:
    model.posterior.check(model.spec)
    header = {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "seed": int(model.seed),
        "sigma_v": float(model.obs.sigma_v),
        "updates": int(model.posterior.updates),
        "meta": model.meta,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    for arr in model.posterior.arrays():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> Model:
    if len(data) < 8 or data[:4] != MAGIC:
        raise ModelFormatError("not a .tagi model (bad magic)")
    (hlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hlen:
        raise ModelFormatError("truncated header")
    try:
        header = json.loads(data[8 : 8 + hlen])
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported format version {header.get('format_version')} (expected {FORMAT_VERSION})"
        )
    spec = NetworkSpec.from_dict(header["spec"])
    payload = data[8 + hlen :]
    expected = sum(2 * (l.output_width * l.input_width + l.output_width) for l in spec.layers)
    if len(payload) != 8 * expected:
        raise ModelFormatError(
            f"payload holds {len(payload)} bytes, expected {8 * expected} (truncated or dimension mismatch)"
        )
    values = np.frombuffer(payload, dtype="<f8").astype(float)
    if not np.all(np.isfinite(values)):
        raise ModelFormatError("payload contains NaN or infinite values")
    layers, pos = [], 0
    for ls in spec.layers:
        shape = (ls.output_width, ls.input_width)
        n = shape[0] * shape[1]
        w_mean = values[pos : pos + n].reshape(shape); pos += n
        w_var = values[pos : pos + n].reshape(shape); pos += n
        b_mean = values[pos : pos + shape[0]]; pos += shape[0]
        b_var = values[pos : pos + shape[0]]; pos += shape[0]
        layers.append(LayerParams(w_mean.copy(), w_var.copy(), b_mean.copy(), b_var.copy()))
    post = ParameterPosterior(layers, int(header.get("updates", 0)))
    try:
        post.check(spec)
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc
    return Model(spec, post, ObservationModel(header["sigma_v"]), header["seed"], header.get("meta", {}))


def save(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(model))


def load(path) -> Model:
    with open(path, "rb") as fh:
        return loads(fh.read())


def copy_model(model: Model) -> Model:
    return Model(model.spec, model.posterior.copy(), model.obs, model.seed, copy.deepcopy(model.meta))
