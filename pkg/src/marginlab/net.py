"""Small feed-forward embedding network with explicit backprop.

Layers are affine maps followed by tanh or identity.  ``forward`` stores the
per-layer caches that ``backward`` consumes; any parameter update invalidates
them.  No autodiff anywhere: gradients are chain-rule by hand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("tanh", "softplus", "identity")


class StaleCacheError(RuntimeError):
    """backward() called without a fresh forward cache."""


@dataclass
class Layer:
    w: np.ndarray  # (fan_out, fan_in)
    b: np.ndarray  # (fan_out,)
    activation: str

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ValueError("bad layer shapes")


def _act(name, pre):
    if name == "tanh":
        return np.tanh(pre)
    if name == "softplus":
        # log(1 + e^x), overflow-safe split at 0
        return np.where(pre > 0, pre + np.log1p(np.exp(-np.abs(pre))), np.log1p(np.exp(np.minimum(pre, 0.0))))
    return pre


def _act_deriv(name, pre, out):
    if name == "tanh":
        return 1.0 - out * out
    if name == "softplus":
        return 1.0 / (1.0 + np.exp(-pre))  # sigmoid
    return np.ones_like(pre)


class EmbedNet:
    def __init__(self, layers):
        if not layers:
            raise ValueError("need at least one layer")
        self.layers = list(layers)
        self._cache = None

    @property
    def input_dim(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].w.shape[0]

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"inputs must be (batch, {self.input_dim})")
        cache = []
        out = x
        for layer in self.layers:
            pre = out @ layer.w.T + layer.b
            post = _act(layer.activation, pre)
            cache.append((out, pre, post))
            out = post
        self._cache = cache
        return out

    def backward(self, d_embeddings):
        """Parameter gradients and the input gradient for the last forward."""
        if self._cache is None:
            raise StaleCacheError("no forward cache; run forward first")
        d_out = np.asarray(d_embeddings, dtype=np.float64)
        grads = []
        for layer, (inp, pre, post) in zip(
            reversed(self.layers), reversed(self._cache)
        ):
            d_pre = d_out * _act_deriv(layer.activation, pre, post)
            grads.append((d_pre.T @ inp, d_pre.sum(axis=0)))
            d_out = d_pre @ layer.w
        grads.reverse()
        return grads, d_out

    def apply_update(self, deltas) -> None:
        """Add (dw, db) steps to every layer; invalidates the forward cache."""
        if len(deltas) != len(self.layers):
            raise ValueError("one (dw, db) pair per layer required")
        for layer, (dw, db) in zip(self.layers, deltas):
            layer.w = layer.w + dw
            layer.b = layer.b + db
        self._cache = None

    def parameters(self):
        return [(layer.w, layer.b) for layer in self.layers]


def build_embed_net(
    input_dim: int,
    hidden=(256, 256),
    embed_dim: int = 64,
    seed: int = 0,
    activation: str = "softplus",
) -> EmbedNet:
    """Smooth hidden layers, linear output, 1/sqrt(fan_in) init, zero bias.

    Softplus is the default hidden nonlinearity: unlike tanh it does not
    saturate, so embedding norms keep carrying input-strength information.
    """
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden, embed_dim]
    layers = []
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        act = "identity" if k == len(dims) - 2 else activation
        layers.append(Layer(w=w, b=np.zeros(fan_out), activation=act))
    return EmbedNet(layers)
