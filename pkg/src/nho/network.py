"""Tanh MLPs for the feedback control and the decoupling field.

Weights are stored ``(fan_in, fan_out)`` so a layer is ``x @ W + b`` on
row-batched inputs.  All functions accept either plain arrays or traced
values from :mod:`nho.autodiff`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

OUTPUT_MAPS = ("identity", "box")


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"
    output_map: str = "identity"
    time_input: bool = True
    horizon: float = 1.0  # time feature is t / horizon
    output_scale: float = 1.0  # last layer output is multiplied by this

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.activation != "tanh":
            raise ValueError(f"only tanh activation is supported, got {self.activation!r}")
        if self.output_map not in OUTPUT_MAPS:
            raise ValueError(f"output_map must be one of {OUTPUT_MAPS}, got {self.output_map!r}")
        if min((self.input_dim, self.output_dim) + self.hidden_widths) < 1:
            raise ValueError("all layer widths must be >= 1")
        if self.time_input and self.input_dim < 2:
            raise ValueError("time-dependent network needs input_dim = 1 + d >= 2")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not self.output_scale > 0:
            raise ValueError("output_scale must be positive")

    @property
    def state_dim(self) -> int:
        return self.input_dim - 1 if self.time_input else self.input_dim

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim,) + self.hidden_widths + (self.output_dim,)


def default_spec(d: int, output_dim: int, *, output_map: str = "identity",
                 stationary: bool = False, horizon: float = 1.0,
                 hidden_widths=None, output_scale: float = 1.0) -> NetworkSpec:
    """Two hidden layers of width ``max(64, 2d)`` unless widths are given."""
    if hidden_widths is None:
        w = max(64, 2 * d)
        hidden_widths = (w, w)
    return NetworkSpec(
        input_dim=d if stationary else d + 1,
        hidden_widths=tuple(hidden_widths),
        output_dim=output_dim,
        output_map=output_map,
        time_input=not stationary,
        horizon=horizon,
        output_scale=output_scale,
    )


@dataclass(frozen=True)
class NetworkParams:
    spec: NetworkSpec
    weights: tuple
    biases: tuple

    def __post_init__(self):
        sizes = self.spec.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("number of layers does not match spec")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if np.shape(w) != (sizes[i], sizes[i + 1]) or np.shape(b) != (sizes[i + 1],):
                raise ValueError(
                    f"layer {i}: expected W{(sizes[i], sizes[i + 1])}, b{(sizes[i + 1],)}, "
                    f"got W{np.shape(w)}, b{np.shape(b)}")

    # autodiff pytree protocol
    def tree_flatten(self):
        return list(self.weights) + list(self.biases), self.spec

    @classmethod
    def tree_unflatten(cls, spec, children):
        n = len(children) // 2
        return cls(spec, tuple(children[:n]), tuple(children[n:]))

    def arrays(self) -> list[np.ndarray]:
        return [np.asarray(ad.value_of(a)) for a in self.tree_flatten()[0]]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass(frozen=True)
class ControlBounds:
    """Box ``K = prod_i [lower_i, upper_i]``."""

    lower: np.ndarray = field(repr=False)
    upper: np.ndarray = field(repr=False)

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be 1-D of equal length")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise ValueError("control box must be compact (finite bounds)")
        if not np.all(lo < hi):
            raise ValueError("need lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def uniform(cls, m: int, lo: float, hi: float) -> "ControlBounds":
        return cls(np.full(m, lo), np.full(m, hi))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, a) -> np.ndarray:
        a = np.asarray(a)
        return np.all((a > self.lower) & (a < self.upper), axis=-1)


def init_network(spec: NetworkSpec, seed) -> NetworkParams:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    sizes = spec.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(spec, tuple(weights), tuple(biases))


def _inputs(spec: NetworkSpec, t, s):
    shape = np.shape(ad.value_of(s))
    if len(shape) not in (1, 2) or shape[-1] != spec.state_dim:
        raise ValueError(f"state must have trailing dimension {spec.state_dim}, got {shape}")
    single = len(shape) == 1
    if single:
        s = ad.reshape(s, (1, shape[0]))
    if not spec.time_input:
        return s, single
    n = 1 if single else shape[0]
    tv = np.asarray(t, dtype=float) / spec.horizon
    tcol = np.broadcast_to(tv.reshape(-1, 1), (n, 1))
    return ad.concat([tcol, s], axis=-1), single


def raw_forward(params: NetworkParams, t, s):
    """MLP output before the output map.  ``s`` is ``(d,)`` or ``(B, d)``."""
    x, single = _inputs(params.spec, t, s)
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = x @ w + b
        if i < n_layers - 1:
            x = ad.tanh(x)
    if params.spec.output_scale != 1.0:
        x = params.spec.output_scale * x
    if single:
        x = ad.reshape(x, (params.spec.output_dim,))
    return x


def bounded_map(raw, bounds: ControlBounds):
    """``center + half_width * tanh(raw)``: strictly inside the box."""
    return bounds.center + bounds.half_width * ad.tanh(raw)


def forward(params: NetworkParams, t, s, bounds: ControlBounds | None = None):
    raw = raw_forward(params, t, s)
    if params.spec.output_map == "box":
        if bounds is None:
            raise ValueError("box output map requires ControlBounds")
        return bounded_map(raw, bounds)
    return raw


def control_forward(omega: NetworkParams, bounds: ControlBounds, t, s):
    """Feedback control ``alpha(t, s)`` with values strictly inside ``bounds``."""
    if omega.spec.output_dim != bounds.dim:
        raise ValueError(
            f"control network has {omega.spec.output_dim} outputs, box has {bounds.dim}")
    return bounded_map(raw_forward(omega, t, s), bounds)


def value_and_input_jacobian(xi: NetworkParams, t, s):
    """``Phi(t, s)`` and ``d Phi / d s`` (shape ``(..., d_out, d)``)."""
    return ad.value_and_jacobian(lambda z: forward(xi, t, z), s)


def input_jacobian(xi: NetworkParams, t, s):
    return value_and_input_jacobian(xi, t, s)[1]


# ---------------------------------------------------------------------------
# checkpoints


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "input_dim": spec.input_dim,
        "hidden_widths": list(spec.hidden_widths),
        "output_dim": spec.output_dim,
        "activation": spec.activation,
        "output_map": spec.output_map,
        "time_input": spec.time_input,
        "horizon": spec.horizon,
        "output_scale": spec.output_scale,
    }


def params_to_dict(params: NetworkParams, seed=None) -> dict:
    # json writes floats with repr(), the shortest string that round-trips exactly
    return {
        "spec": spec_to_dict(params.spec),
        "seed": seed,
        "layers": [
            {"weight": np.asarray(ad.value_of(w)).tolist(),
             "bias": np.asarray(ad.value_of(b)).tolist()}
            for w, b in zip(params.weights, params.biases)
        ],
    }


def params_from_dict(doc: dict) -> NetworkParams:
    s = doc["spec"]
    spec = NetworkSpec(
        input_dim=int(s["input_dim"]),
        hidden_widths=tuple(s["hidden_widths"]),
        output_dim=int(s["output_dim"]),
        activation=s.get("activation", "tanh"),
        output_map=s.get("output_map", "identity"),
        time_input=bool(s.get("time_input", True)),
        horizon=float(s.get("horizon", 1.0)),
        output_scale=float(s.get("output_scale", 1.0)),
    )
    weights = tuple(np.array(layer["weight"], dtype=float).reshape(
        spec.layer_sizes[i], spec.layer_sizes[i + 1]) for i, layer in enumerate(doc["layers"]))
    biases = tuple(np.array(layer["bias"], dtype=float) for layer in doc["layers"])
    return NetworkParams(spec, weights, biases)


def save_params(params: NetworkParams, path, seed=None) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params, seed), indent=1))


def load_params(path) -> NetworkParams:
    return params_from_dict(json.loads(Path(path).read_text()))
