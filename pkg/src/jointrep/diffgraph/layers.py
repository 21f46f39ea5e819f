"""Parameter containers and the small set of layers the models are built from."""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from ..errors import ConfigError, ShapeError
from . import graph as G
from .graph import Node


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParamStore:
    """Named, ordered collection of trainable leaves.

    Leaves persist across steps.  Updates rebind each leaf's ``value`` to a
    fresh array, so arrays captured by an existing graph are never mutated.
    """

    def __init__(self, seed: int | np.random.Generator = 0):
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._nodes: dict[str, Node] = {}

    # -- construction --------------------------------------------------------
    def add(self, name: str, value: np.ndarray) -> Node:
        if name in self._nodes:
            raise ConfigError(f"duplicate parameter name {name!r}")
        node = G.leaf(np.array(value, dtype=G.DTYPE), requires_grad=True, name=name)
        self._nodes[name] = node
        return node

    def weight(self, name: str, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Node:
        return self.add(name, glorot_uniform(self.rng, shape, fan_in, fan_out))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Node:
        return self.add(name, np.zeros(shape))

    # -- access --------------------------------------------------------------
    def __getitem__(self, name: str) -> Node:
        return self._nodes[name]

    def __contains__(self, name: str) -> bool:
        return name in self._nodes

    def __iter__(self) -> Iterator[str]:
        return iter(self._nodes)

    def __len__(self) -> int:
        return len(self._nodes)

    def items(self):
        return self._nodes.items()

    def nodes(self) -> list[Node]:
        return list(self._nodes.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: n.value for k, n in self._nodes.items()}

    def num_params(self) -> int:
        return int(sum(n.value.size for n in self._nodes.values()))

    # -- bulk operations -----------------------------------------------------
    def zero_grad(self) -> None:
        for n in self._nodes.values():
            n.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(n.value) if n.grad is None else n.grad) for k, n in self._nodes.items()}

    def fill_(self, value: float = 0.0) -> None:
        for n in self._nodes.values():
            n.value = np.full_like(n.value, value)

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, node in self._nodes.items():
            if name not in arrays:
                raise ShapeError("load", f"missing parameter {name!r}")
            arr = np.asarray(arrays[name], dtype=G.DTYPE)
            if arr.shape != node.value.shape:
                raise ShapeError("load", f"parameter {name!r} expects shape {node.value.shape}, got {arr.shape}")
            node.value = arr.copy()

    def copy_from(self, other: "ParamStore") -> None:
        self.load_arrays(other.arrays())

    def ema_from(self, other: "ParamStore", decay: float) -> None:
        """self <- decay * self + (1 - decay) * other."""
        for name, node in self._nodes.items():
            node.value = decay * node.value + (1.0 - decay) * other[name].value

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, node in self._nodes.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(node.value, dtype="<f8").tobytes())
        return h.hexdigest()

    @contextlib.contextmanager
    def frozen(self):
        """Treat every parameter as a constant while the context is open.

        Gradients still flow *through* the frozen computation to other
        differentiable inputs; they just never reach these parameters.
        """
        previous = [n.requires_grad for n in self._nodes.values()]
        for n in self._nodes.values():
            n.requires_grad = False
        try:
            yield self
        finally:
            for n, flag in zip(self._nodes.values(), previous):
                n.requires_grad = flag


# ---------------------------------------------------------------------------
# affine + MLP
# ---------------------------------------------------------------------------

class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int):
        self.d_in, self.d_out = d_in, d_out
        self.w = store.weight(f"{name}.w", (d_in, d_out), d_in, d_out)
        self.b = store.zeros(f"{name}.b", (d_out,))

    def __call__(self, x) -> Node:
        x = G.lift(x)
        if x.shape[-1] != self.d_in:
            raise ShapeError("linear", f"{self.w.name} expects width {self.d_in}, got {x.shape[-1]}")
        return G.add(G.matmul(x, self.w), self.b)


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "elu"
    heads: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if len(self.widths) < 1 or any(int(w) < 1 for w in self.widths):
            raise ConfigError(f"MLP needs at least one layer of positive width, got {self.widths}")
        if self.activation not in G.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        for _, width in self.heads:
            if int(width) < 1:
                raise ConfigError(f"head width must be positive, got {width}")

    @classmethod
    def make(cls, widths: Sequence[int], activation: str = "elu", heads: Mapping[str, int] | None = None) -> "MlpSpec":
        return cls(tuple(int(w) for w in widths), activation, tuple((heads or {}).items()))


class Mlp:
    """Stack of affine+activation layers with optional named affine heads."""

    def __init__(self, store: ParamStore, name: str, d_in: int, spec: MlpSpec):
        self.spec = spec
        self.d_in = d_in
        self.layers: list[Linear] = []
        width = d_in
        for i, w in enumerate(spec.widths):
            self.layers.append(Linear(store, f"{name}.l{i}", width, w))
            width = w
        self.heads = {h: Linear(store, f"{name}.{h}", width, w) for h, w in spec.heads}
        self.d_out = width

    def __call__(self, x):
        return mlp_apply(self, x)


def mlp_apply(mlp: Mlp, x):
    """Run the hidden stack; return a dict of head outputs if heads exist."""
    act = G.ACTIVATIONS[mlp.spec.activation]
    h = G.lift(x)
    if h.shape[-1] != mlp.d_in:
        raise ShapeError("mlp_apply", f"expects input width {mlp.d_in}, got {h.shape[-1]}")
    for layer in mlp.layers:
        h = act(layer(h))
    if not mlp.heads:
        return h
    return {name: head(h) for name, head in mlp.heads.items()}


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------

class GruParams:
    """Gate weights act on the concatenation [x; h] (or [x; r*h] for the candidate)."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_hidden: int = 200):
        self.d_in, self.d_hidden = d_in, d_hidden
        d = d_in + d_hidden
        self.w_u = store.weight(f"{name}.w_u", (d, d_hidden), d, d_hidden)
        self.b_u = store.zeros(f"{name}.b_u", (d_hidden,))
        self.w_r = store.weight(f"{name}.w_r", (d, d_hidden), d, d_hidden)
        self.b_r = store.zeros(f"{name}.b_r", (d_hidden,))
        self.w_c = store.weight(f"{name}.w_c", (d, d_hidden), d, d_hidden)
        self.b_c = store.zeros(f"{name}.b_c", (d_hidden,))


def gru_cell(x, h, p: GruParams) -> Node:
    """u = s(W_u[x;h]+b_u), r = s(W_r[x;h]+b_r), c = tanh(W_c[x;r*h]+b_c), h' = (1-u)h + uc."""
    x, h = G.lift(x), G.lift(h)
    if x.shape[-1] != p.d_in or h.shape[-1] != p.d_hidden:
        raise ShapeError("gru_cell", f"expected widths ({p.d_in}, {p.d_hidden}), got ({x.shape[-1]}, {h.shape[-1]})")
    xh = G.concat([x, h], axis=-1)
    u = G.sigmoid(G.add(G.matmul(xh, p.w_u), p.b_u))
    r = G.sigmoid(G.add(G.matmul(xh, p.w_r), p.b_r))
    xrh = G.concat([x, G.mul(r, h)], axis=-1)
    c = G.tanh(G.add(G.matmul(xrh, p.w_c), p.b_c))
    return G.add(G.mul(G.sub(1.0, u), h), G.mul(u, c))


# ---------------------------------------------------------------------------
# normalisation and convolution stacks
# ---------------------------------------------------------------------------

class LayerNorm:
    def __init__(self, store: ParamStore, name: str, width: int):
        self.gain = store.add(f"{name}.gain", np.ones(width))
        self.bias = store.zeros(f"{name}.bias", (width,))

    def __call__(self, x) -> Node:
        return G.layer_norm(x, self.gain, self.bias)


@dataclass(frozen=True)
class ConvSpec:
    """Per-layer (channels, kernel, stride) for a valid-padding conv stack."""

    layers: tuple[tuple[int, int, int], ...] = ((16, 4, 2), (32, 4, 2), (32, 4, 2))
    activation: str = "elu"


def conv_out_size(size: int, layers) -> int:
    for _, k, s in layers:
        size = (size - k) // s + 1
        if size < 1:
            raise ConfigError(f"conv stack {layers} collapses the spatial size to zero")
    return size


class ConvEncoder:
    def __init__(self, store: ParamStore, name: str, image_shape: tuple[int, int, int], spec: ConvSpec):
        h, w, c = image_shape
        self.image_shape = tuple(image_shape)
        self.spec = spec
        self.kernels = []
        cin = c
        for i, (cout, k, s) in enumerate(spec.layers):
            wk = store.weight(f"{name}.c{i}.w", (k, k, cin, cout), k * k * cin, k * k * cout)
            bk = store.zeros(f"{name}.c{i}.b", (cout,))
            self.kernels.append((wk, bk, s))
            cin = cout
        oh, ow = conv_out_size(h, spec.layers), conv_out_size(w, spec.layers)
        self.d_out = oh * ow * cin

    def __call__(self, images) -> Node:
        x = G.lift(images)
        if x.shape[1:] != self.image_shape:
            raise ShapeError("conv_encoder", f"expects images {self.image_shape}, got {x.shape[1:]}")
        act = G.ACTIVATIONS[self.spec.activation]
        for wk, bk, s in self.kernels:
            x = act(G.conv2d(x, wk, bk, s))
        return G.reshape(x, (x.shape[0], self.d_out))


class ConvDecoder:
    """Affine map to a small seed grid followed by transposed convolutions.

    The last layer has no activation; its output is the Gaussian mean.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        d_in: int,
        image_shape: tuple[int, int, int],
        seed_grid: tuple[int, int, int] = (2, 2, 32),
        layers: tuple[tuple[int, int, int], ...] = ((32, 4, 2), (16, 4, 2), (3, 6, 2)),
        activation: str = "elu",
    ):
        self.image_shape = tuple(image_shape)
        self.seed_grid = tuple(seed_grid)
        self.activation = activation
        self.fc = Linear(store, f"{name}.fc", d_in, int(np.prod(seed_grid)))
        h, w, cin = seed_grid
        self.kernels = []
        for i, (cout, k, s) in enumerate(layers):
            wk = store.weight(f"{name}.d{i}.w", (cin, k, k, cout), k * k * cin, k * k * cout)
            bk = store.zeros(f"{name}.d{i}.b", (cout,))
            self.kernels.append((wk, bk, s))
            h, w, cin = (h - 1) * s + k, (w - 1) * s + k, cout
        if (h, w, cin) != self.image_shape:
            raise ConfigError(f"decoder produces {(h, w, cin)}, expected {self.image_shape}")

    def __call__(self, z) -> Node:
        act = G.ACTIVATIONS[self.activation]
        x = act(self.fc(z))
        x = G.reshape(x, (x.shape[0],) + self.seed_grid)
        last = len(self.kernels) - 1
        for i, (wk, bk, s) in enumerate(self.kernels):
            x = G.conv_transpose2d(x, wk, bk, s)
            if i != last:
                x = act(x)
        return x


def decoder_layers_for(image_shape: tuple[int, int, int]) -> dict:
    """Seed grid and transposed-conv stack that reach ``image_shape`` exactly."""
    h, w, c = image_shape
    if h != w:
        raise ConfigError("only square images are supported")
    presets = {
        32: dict(seed_grid=(2, 2, 32), layers=((32, 4, 2), (16, 4, 2), (c, 6, 2))),
        16: dict(seed_grid=(2, 2, 32), layers=((16, 4, 2), (c, 6, 2))),
        64: dict(seed_grid=(1, 1, 256), layers=((64, 5, 2), (32, 5, 2), (16, 6, 2), (c, 6, 2))),
    }
    if h in presets:
        return presets[h]
    # generic fallback: a single transposed conv from a 1x1 seed
    return dict(seed_grid=(1, 1, 32), layers=((c, h, 1),))


def encoder_spec_for(image_shape: tuple[int, int, int]) -> ConvSpec:
    h = image_shape[0]
    if h >= 32:
        return ConvSpec(((16, 4, 2), (32, 4, 2), (32, 4, 2)) if h < 64 else ((32, 4, 2), (64, 4, 2), (128, 4, 2), (256, 4, 2)))
    if h >= 16:
        return ConvSpec(((16, 4, 2), (32, 3, 2)))
    return ConvSpec(((8, 3, 1), (8, 3, 2)))

