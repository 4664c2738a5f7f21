"""Feedforward classifiers with optional per-neuron / per-channel activation clipping."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .engine import Graph, ShapeError, Tensor

EPS_Z = 1e-3
# stands in for an infinite bound; min(h, LARGE) == h for every finite activation
LARGE = 1e300

LAYER_KINDS = ("dense", "conv", "pool", "norm", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_size: int = 0        # dense: fan-in; conv: in channels; norm: channels
    out_size: int = 0       # dense: fan-out; conv: out channels
    kernel: int = 0         # conv kernel side, pool window side
    padding: int = 0
    activation: str = "none"
    clippable: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def output_shape(self, in_shape: tuple) -> tuple:
        k = self.kind
        if k == "dense":
            if in_shape != (self.in_size,):
                raise ShapeError(f"dense expects ({self.in_size},), got {in_shape}")
            return (self.out_size,)
        if k == "conv":
            if len(in_shape) != 3 or in_shape[0] != self.in_size:
                raise ShapeError(f"conv expects ({self.in_size}, H, W), got {in_shape}")
            h = in_shape[1] + 2 * self.padding - self.kernel + 1
            w = in_shape[2] + 2 * self.padding - self.kernel + 1
            if h < 1 or w < 1:
                raise ShapeError(f"conv kernel {self.kernel} too large for {in_shape}")
            return (self.out_size, h, w)
        if k == "pool":
            if len(in_shape) != 3 or in_shape[1] % self.kernel or in_shape[2] % self.kernel:
                raise ShapeError(f"pool {self.kernel} does not tile {in_shape}")
            return (in_shape[0], in_shape[1] // self.kernel, in_shape[2] // self.kernel)
        if k == "norm":
            if in_shape[0] != self.in_size:
                raise ShapeError(f"norm expects {self.in_size} channels, got {in_shape}")
            return in_shape
        return (int(np.prod(in_shape)),)

    @property
    def parametric(self) -> bool:
        return self.kind in ("dense", "conv", "norm")

    def param_shapes(self) -> dict[str, tuple]:
        if self.kind == "dense":
            return {"W": (self.in_size, self.out_size), "b": (self.out_size,)}
        if self.kind == "conv":
            return {"W": (self.out_size, self.in_size, self.kernel, self.kernel), "b": (self.out_size,)}
        if self.kind == "norm":
            return {"scale": (self.in_size,), "shift": (self.in_size,)}
        return {}


@dataclass(frozen=True)
class Network:
    """Layer list plus weights.  Treat as immutable; use :meth:`with_params` to update."""

    layers: tuple
    params: tuple               # one dict of ndarrays per layer ({} for pool/flatten)
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "params", tuple(dict(p) for p in self.params))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.params) != len(self.layers):
            raise ValueError("one parameter dict per layer required")
        if not self.layers:
            raise ValueError("network needs at least one layer")
        shape = self.input_shape
        for spec, p in zip(self.layers, self.params):
            shape = spec.output_shape(shape)
            for name, s in spec.param_shapes().items():
                if name not in p or np.shape(p[name]) != s:
                    raise ShapeError(f"{spec.kind} layer parameter {name} must have shape {s}")
        if shape != (self.num_classes,):
            raise ShapeError(f"network emits {shape}, expected ({self.num_classes},)")
        last = self.layers[-1]
        if last.activation != "none" or last.clippable:
            raise ValueError("final (logit) layer must have no activation and no clipping")

    @property
    def clip_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.clippable]

    def clip_sizes(self) -> list[int]:
        """Bound-vector length for every clippable layer (neurons, or channels for maps)."""
        sizes, shape = [], self.input_shape
        for spec in self.layers:
            shape = spec.output_shape(shape)
            if spec.clippable:
                sizes.append(shape[0])
        return sizes

    def with_params(self, params: Sequence[dict]) -> "Network":
        return dataclasses.replace(self, params=tuple(params))

    def flat_params(self) -> list[np.ndarray]:
        return [p[k] for spec, p in zip(self.layers, self.params) for k in spec.param_shapes()]


@dataclass(frozen=True)
class BoundVectors:
    """One non-negative upper-bound vector per clippable layer, floored at ``EPS_Z``."""

    z: tuple = field(default_factory=tuple)

    def __post_init__(self):
        vecs = tuple(np.maximum(np.asarray(v, dtype=np.float64).reshape(-1), EPS_Z) for v in self.z)
        object.__setattr__(self, "z", vecs)

    def __len__(self):
        return len(self.z)

    def __iter__(self):
        return iter(self.z)

    def check(self, net: Network) -> None:
        sizes = net.clip_sizes()
        if [len(v) for v in self.z] != sizes:
            raise ShapeError(f"bound lengths {[len(v) for v in self.z]} do not match clip sizes {sizes}")

    def to_flat(self) -> np.ndarray:
        return np.concatenate(self.z) if self.z else np.zeros(0)

    @classmethod
    def from_flat(cls, flat: np.ndarray, sizes: Sequence[int]) -> "BoundVectors":
        parts = np.split(np.asarray(flat, dtype=np.float64), np.cumsum(sizes)[:-1]) if sizes else []
        return cls(tuple(parts))


def _as_tensor(g: Graph, value) -> Tensor:
    return value if isinstance(value, Tensor) else g.constant(value)


def trace(net: Network, g: Graph, x, bounds=None, params=None):
    """Record the (optionally bounded) forward pass of ``net`` into ``g``.

    ``x`` is a batch ``(N, *input_shape)``; ``bounds`` a sequence with one entry per
    clippable layer and ``params`` a per-layer sequence of dicts, either of which may
    hold Tensors (to differentiate through them) or plain arrays.  Returns the logits
    Tensor and the list of post-clip activations at each clip point.
    """
    h = _as_tensor(g, x)
    if h.shape[1:] != net.input_shape:
        raise ShapeError(f"input batch {h.shape} does not match network input {net.input_shape}")
    params = net.params if params is None else params
    if bounds is not None and len(bounds) != len(net.clip_layers):
        raise ShapeError(f"{len(bounds)} bound vectors for {len(net.clip_layers)} clippable layers")
    acts = []
    bi = 0
    for spec, p in zip(net.layers, params):
        if spec.kind == "dense":
            h = g.add(g.matmul(h, _as_tensor(g, p["W"])), _as_tensor(g, p["b"]))
        elif spec.kind == "conv":
            b = _as_tensor(g, p["b"])
            h = g.conv2d(h, _as_tensor(g, p["W"]), padding=spec.padding)
            ones = g.constant(np.ones(spec.out_size))
            h = g.affine_norm(h, ones, b)
        elif spec.kind == "pool":
            h = g.mean_pool(h, spec.kernel)
        elif spec.kind == "norm":
            h = g.affine_norm(h, _as_tensor(g, p["scale"]), _as_tensor(g, p["shift"]))
        else:
            h = g.flatten(h)
        if spec.activation == "relu":
            h = g.relu(h)
        if spec.clippable:
            if bounds is not None:
                h = g.clip_upper(h, _as_tensor(g, bounds[bi]))
            bi += 1
            acts.append(h)
    return h, acts


def forward(net: Network, x) -> np.ndarray:
    """Logits of the unbounded network for a batch (or a single sample)."""
    return bounded_forward(net, None, x)


def bounded_forward(net: Network, Z: Optional[BoundVectors], x) -> np.ndarray:
    """Logits with every clippable activation replaced by ``min(h, z)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == net.input_shape
    if single:
        x = x[None]
    if Z is not None:
        Z.check(net)
    logits, _ = trace(net, Graph(), x, None if Z is None else Z.z)
    return logits.data[0] if single else logits.data


def clip_activations(net: Network, x, Z: Optional[BoundVectors] = None) -> list[np.ndarray]:
    """Activations at every clip point (post-clip when ``Z`` is given)."""
    _, acts = trace(net, Graph(), np.asarray(x, dtype=np.float64), None if Z is None else Z.z)
    return [a.data for a in acts]


def _channel_max(a: np.ndarray) -> np.ndarray:
    return a.max(axis=(0, 2, 3)) if a.ndim == 4 else a.max(axis=0)


def init_bounds(net: Network, X, beta: float = 2.0) -> BoundVectors:
    """Bounds at ``beta`` times each neuron's (channel's) largest activation over ``X``."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("init_bounds: empty clean set")
    if beta < 1:
        raise ValueError("init_bounds: beta must be >= 1")
    acts = clip_activations(net, X)
    if np.isinf(beta):
        return BoundVectors(tuple(np.full(_channel_max(a).shape, LARGE) for a in acts))
    return BoundVectors(tuple(beta * _channel_max(a) for a in acts))


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(layers: Sequence[LayerSpec], rng: np.random.Generator) -> list[dict]:
    params = []
    for spec in layers:
        if spec.kind == "dense":
            params.append({"W": _he(rng, (spec.in_size, spec.out_size), spec.in_size),
                           "b": np.zeros(spec.out_size)})
        elif spec.kind == "conv":
            fan_in = spec.in_size * spec.kernel ** 2
            params.append({"W": _he(rng, (spec.out_size, spec.in_size, spec.kernel, spec.kernel), fan_in),
                           "b": np.zeros(spec.out_size)})
        elif spec.kind == "norm":
            params.append({"scale": np.ones(spec.in_size), "shift": np.zeros(spec.in_size)})
        else:
            params.append({})
    return params


def mlp(input_dim: int, num_classes: int, hidden=(128, 64), seed: int = 0) -> Network:
    sizes = [input_dim, *hidden]
    layers = [LayerSpec("dense", a, b, activation="relu", clippable=True) for a, b in zip(sizes, sizes[1:])]
    layers.append(LayerSpec("dense", sizes[-1], num_classes))
    rng = np.random.default_rng(seed)
    return Network(tuple(layers), tuple(init_params(layers, rng)), (input_dim,), num_classes)


def mlp3(input_dim: int, num_classes: int, seed: int = 0) -> Network:
    """Dense 128 / 64 / C with ReLU and clipping on both hidden layers."""
    return mlp(input_dim, num_classes, (128, 64), seed)


def cnn_s(input_shape=(1, 16, 16), num_classes: int = 10, channels=(8, 16), hidden: int = 64,
          seed: int = 0) -> Network:
    """Two conv+pool blocks and one hidden dense layer; clipping after each pool and the dense."""
    c, h, w = input_shape
    c1, c2 = channels
    layers = [
        LayerSpec("conv", c, c1, kernel=3, padding=1, activation="relu"),
        LayerSpec("pool", kernel=2, clippable=True),
        LayerSpec("conv", c1, c2, kernel=3, padding=1, activation="relu"),
        LayerSpec("pool", kernel=2, clippable=True),
        LayerSpec("flatten"),
        LayerSpec("dense", c2 * (h // 4) * (w // 4), hidden, activation="relu", clippable=True),
        LayerSpec("dense", hidden, num_classes),
    ]
    rng = np.random.default_rng(seed)
    return Network(tuple(layers), tuple(init_params(layers, rng)), tuple(input_shape), num_classes)


PRESETS = {"mlp3": mlp3, "cnn_s": cnn_s}
