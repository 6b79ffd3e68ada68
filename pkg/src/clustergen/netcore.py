"""Dense feedforward generator with exact reverse-mode gradients.

The generator G_theta(z, y) consumes the concatenation [z ; y_onehot] and
produces a D-dimensional mean vector. Parameters live in one flat float64
vector `theta`; per-layer weight matrices are views into it, so in-place
updates through either alias stay consistent.

Everything here is 64-bit and pure: identical (theta, z, y) always produce
identical output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError, ShapeError

AFFINE = "affine"
NONLINEARITY = "nonlinearity"

_ACTIVATIONS = ("identity", "tanh", "relu", "sigmoid")

_KIND_CODES = {AFFINE: 0, NONLINEARITY: 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_ACT_CODES = {name: i for i, name in enumerate(_ACTIVATIONS)}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}

MAGIC = b"CLG1"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.activation not in _ACT_CODES:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ConfigError("layer dimensions must be positive")
        if self.kind == NONLINEARITY and self.in_dim != self.out_dim:
            raise ConfigError("nonlinearity layers must preserve dimension")

    @property
    def n_params(self) -> int:
        if self.kind == AFFINE:
            return self.in_dim * self.out_dim + self.out_dim
        return 0


class GeneratorNet:
    """Layer specs plus the flat parameter vector theta."""

    def __init__(self, layers, theta=None):
        layers = tuple(layers)
        if not layers:
            raise ConfigError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigError(
                    f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = layers
        n = sum(sp.n_params for sp in layers)
        if theta is None:
            theta = np.zeros(n, dtype=np.float64)
        else:
            theta = np.asarray(theta, dtype=np.float64)
            if theta.shape != (n,):
                raise ShapeError(f"theta must have length {n}, got {theta.shape}")
        self.theta = theta

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def weight_views(self):
        """Yield (spec, W, b) per affine layer; W and b alias theta."""
        off = 0
        for sp in self.layers:
            if sp.kind == AFFINE:
                w = self.theta[off:off + sp.in_dim * sp.out_dim]
                w = w.reshape(sp.in_dim, sp.out_dim)
                b = self.theta[off + sp.in_dim * sp.out_dim:off + sp.n_params]
                yield sp, w, b
                off += sp.n_params

    def copy(self) -> "GeneratorNet":
        return GeneratorNet(self.layers, self.theta.copy())


def default_arch(input_dim, output_dim, hidden=(64, 64), out_activation="identity"):
    """Dense stack input -> hidden... -> output with tanh between layers."""
    layers = []
    prev = input_dim
    for h in hidden:
        layers.append(LayerSpec(AFFINE, prev, h))
        layers.append(LayerSpec(NONLINEARITY, h, h, "tanh"))
        prev = h
    layers.append(LayerSpec(AFFINE, prev, output_dim))
    if out_activation != "identity":
        layers.append(LayerSpec(NONLINEARITY, output_dim, output_dim, out_activation))
    return tuple(layers)


def init_net(layers, rng) -> GeneratorNet:
    """Glorot-uniform weights, zero biases.

    Weights for each affine layer are drawn i.i.d. uniform on [-s, s] with
    s = sqrt(6 / (in_dim + out_dim)), in layer order, row-major.
    """
    net = GeneratorNet(layers)
    for sp, w, b in net.weight_views():
        s = np.sqrt(6.0 / (sp.in_dim + sp.out_dim))
        w[...] = rng.uniform(-s, s, size=(sp.in_dim, sp.out_dim))
        b[...] = 0.0
    return net


def _apply_activation(name, a):
    if name == "identity":
        return a
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "sigmoid":
        # stable logistic
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out
    raise ConfigError(f"unknown activation {name!r}")


def _activation_deriv_from_output(name, h):
    if name == "identity":
        return None
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (h > 0.0).astype(np.float64)
    if name == "sigmoid":
        return h * (1.0 - h)
    raise ConfigError(f"unknown activation {name!r}")


def forward_batch(net: GeneratorNet, u: np.ndarray, want_cache=False):
    """Run the network on an N x input_dim batch.

    Returns the N x output_dim result, plus per-layer input cache when
    requested (needed by backward_batch).
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[1] != net.input_dim:
        raise ShapeError(
            f"batch input must be (N, {net.input_dim}), got {u.shape}")
    cache = [] if want_cache else None
    a = u
    views = iter(net.weight_views())
    for li, sp in enumerate(net.layers):
        if a.shape[1] != sp.in_dim:
            raise ShapeError(
                f"layer {li} ({sp.kind}) expects width {sp.in_dim}, got {a.shape[1]}")
        if want_cache:
            cache.append(a)
        if sp.kind == AFFINE:
            _, w, b = next(views)
            a = a @ w + b
        else:
            a = _apply_activation(sp.activation, a)
    if want_cache:
        return a, cache
    return a


def backward_batch(net: GeneratorNet, cache, upstream):
    """Reverse pass over a cached forward run.

    `upstream` is N x output_dim. Returns (grad_theta, grad_input) where
    grad_theta sums the per-example parameter gradients of
    dot(upstream_i, forward(u_i)) and grad_input is N x input_dim with the
    per-example input gradients.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim != 2 or g.shape[1] != net.output_dim:
        raise ShapeError(
            f"upstream must be (N, {net.output_dim}), got {g.shape}")
    grad_theta = np.zeros_like(net.theta)
    views = list(net.weight_views())
    vi = len(views) - 1
    off_ends = []
    off = 0
    for sp in net.layers:
        off += sp.n_params
        off_ends.append(off)
    for li in range(len(net.layers) - 1, -1, -1):
        sp = net.layers[li]
        a_in = cache[li]
        if sp.kind == AFFINE:
            _, w, _ = views[vi]
            end = off_ends[li]
            start = end - sp.n_params
            nw = sp.in_dim * sp.out_dim
            gw = grad_theta[start:start + nw].reshape(sp.in_dim, sp.out_dim)
            gw += a_in.T @ g
            grad_theta[start + nw:end] += g.sum(axis=0)
            g = g @ w.T
            vi -= 1
        else:
            # the layer's output is the next layer's cached input
            if li + 1 < len(cache):
                h = cache[li + 1]
            else:
                h = _apply_activation(sp.activation, a_in)
            deriv = _activation_deriv_from_output(sp.activation, h)
            if deriv is not None:
                g = g * deriv
    return grad_theta, g


def backward_input_batch(net: GeneratorNet, cache, upstream):
    """Like backward_batch but returns only the N x input_dim gradient.

    Skips the parameter-gradient accumulation, which roughly halves the
    cost; the Langevin inner loop calls this thousands of times.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim != 2 or g.shape[1] != net.output_dim:
        raise ShapeError(
            f"upstream must be (N, {net.output_dim}), got {g.shape}")
    views = list(net.weight_views())
    vi = len(views) - 1
    for li in range(len(net.layers) - 1, -1, -1):
        sp = net.layers[li]
        if sp.kind == AFFINE:
            _, w, _ = views[vi]
            g = g @ w.T
            vi -= 1
        else:
            if li + 1 < len(cache):
                h = cache[li + 1]
            else:
                h = _apply_activation(sp.activation, cache[li])
            deriv = _activation_deriv_from_output(sp.activation, h)
            if deriv is not None:
                g = g * deriv
    return g


def forward(net: GeneratorNet, z, y_onehot) -> np.ndarray:
    """G_theta(z, y): network output for one example.

    Input to the first layer is the concatenation [z ; y_onehot].
    """
    u = _concat_input(net, z, y_onehot)
    return forward_batch(net, u[None, :])[0]


def backward(net: GeneratorNet, z, y_onehot, upstream):
    """Exact gradients of dot(upstream, forward(net, z, y)).

    Returns (grad_theta, grad_z). No gradient with respect to y exists:
    y is discrete.
    """
    u = _concat_input(net, z, y_onehot)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (net.output_dim,):
        raise ShapeError(
            f"upstream must have length {net.output_dim}, got {upstream.shape}")
    out, cache = forward_batch(net, u[None, :], want_cache=True)
    del out
    grad_theta, grad_u = backward_batch(net, cache, upstream[None, :])
    d = len(np.atleast_1d(z))
    return grad_theta, grad_u[0, :d]


def _concat_input(net, z, y_onehot):
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y_onehot, dtype=np.float64))
    if z.ndim != 1 or y.ndim != 1:
        raise ShapeError("z and y_onehot must be vectors")
    if z.size + y.size != net.input_dim:
        raise ShapeError(
            f"layer 0 (affine) expects width {net.input_dim}, "
            f"got {z.size} + {y.size}")
    return np.concatenate([z, y])


def onehot(y: int, k: int) -> np.ndarray:
    if not 0 <= y < k:
        raise ShapeError(f"label {y} out of range [0, {k})")
    v = np.zeros(k, dtype=np.float64)
    v[y] = 1.0
    return v


def save_checkpoint(net: GeneratorNet, path):
    """Versioned binary dump: magic CLG1, layer table, then theta as f64."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", len(net.layers))
    for sp in net.layers:
        blob += struct.pack(
            "<IIII", _KIND_CODES[sp.kind], sp.in_dim, sp.out_dim,
            _ACT_CODES[sp.activation])
    blob += net.theta.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> GeneratorNet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ParseError(f"bad checkpoint magic {blob[:4]!r}", offset=0)
    if len(blob) < 8:
        raise ParseError("truncated checkpoint header", offset=len(blob))
    (n_layers,) = struct.unpack_from("<I", blob, 4)
    off = 8
    layers = []
    for i in range(n_layers):
        if off + 16 > len(blob):
            raise ParseError(f"truncated layer table entry {i}", offset=off)
        kind, in_dim, out_dim, act = struct.unpack_from("<IIII", blob, off)
        off += 16
        if kind not in _KIND_NAMES or act not in _ACT_NAMES:
            raise ParseError(f"unknown layer encoding in entry {i}", offset=off - 16)
        layers.append(LayerSpec(_KIND_NAMES[kind], in_dim, out_dim, _ACT_NAMES[act]))
    n_params = sum(sp.n_params for sp in layers)
    need = n_params * 8
    if len(blob) - off != need:
        raise ParseError(
            f"theta payload length {len(blob) - off} != expected {need}",
            offset=off)
    theta = np.frombuffer(blob, dtype="<f8", count=n_params, offset=off)
    return GeneratorNet(layers, theta.astype(np.float64))
