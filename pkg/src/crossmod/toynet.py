"""Small dense networks with hand-written backprop and Adam, in float64."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimMismatch, IndexOutOfRange, ShapeMismatch
from .flowcore import load_tns, save_tns
from .rng import RngStream


@dataclass
class Dense:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape


@dataclass
class ForwardCache:
    inputs: list  # input to each layer
    pre: list  # pre-activation of each layer


class MlpNet:
    """Affine layers with ReLU in between and an identity output.

    Weights are He-normal (std ``sqrt(2 / fan_in)``) and biases zero, drawn
    from ``rng`` when one is given; otherwise everything starts at zero.
    """

    def __init__(self, sizes: Sequence[int], rng: RngStream | None = None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise DimMismatch(f"bad layer sizes {sizes}")
        self.sizes = sizes
        self.layers: list[Dense] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if rng is None:
                W = np.zeros((n_out, n_in))
            else:
                W = rng.child("layer", i).normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
            self.layers.append(Dense(W, np.zeros(n_out)))

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def copy(self) -> "MlpNet":
        clone = MlpNet(self.sizes)
        for dst, src in zip(clone.layers, self.layers):
            dst.W = src.W.copy()
            dst.b = src.b.copy()
        return clone

    def forward(self, x) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[-1] != self.n_in:
            raise DimMismatch(f"input dim {h.shape[-1]} != {self.n_in}")
        cache = ForwardCache([], [])
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            cache.inputs.append(h)
            z = h @ layer.W.T + layer.b
            cache.pre.append(z)
            h = z if i == last else np.maximum(z, 0.0)
        return (h[0] if single else h), cache

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, d_out) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients for ``[W0, b0, W1, b1, ...]`` and for the input.

        The ReLU subgradient at zero is taken as zero.
        """
        g = np.asarray(d_out, dtype=np.float64)
        single = g.ndim == 1
        if single:
            g = g[None, :]
        if len(cache.pre) != len(self.layers) or g.shape != cache.pre[-1].shape:
            raise ShapeMismatch(f"upstream gradient shape {g.shape} does not match forward pass")
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            if i < len(self.layers) - 1:
                g = g * (cache.pre[i] > 0.0)
            grads[2 * i] = g.T @ cache.inputs[i]
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.layers[i].W
        return grads, (g[0] if single else g)

    # -- persistence

    def topology(self) -> dict:
        return {"kind": "mlp", "sizes": self.sizes, "activation": "relu", "output": "identity"}

    def save(self, directory, name: str) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, layer in enumerate(self.layers):
            save_tns(directory / f"{name}.{i}.W.tns", layer.W)
            save_tns(directory / f"{name}.{i}.b.tns", layer.b)
        (directory / f"{name}.json").write_text(json.dumps(self.topology(), indent=2) + "\n")

    @classmethod
    def load(cls, directory, name: str) -> "MlpNet":
        directory = Path(directory)
        topo = json.loads((directory / f"{name}.json").read_text())
        net = cls(topo["sizes"])
        for i, layer in enumerate(net.layers):
            W = load_tns(directory / f"{name}.{i}.W.tns")
            b = load_tns(directory / f"{name}.{i}.b.tns")
            if W.shape != layer.W.shape or b.shape != layer.b.shape:
                raise ShapeMismatch(f"{name} layer {i}: stored shapes do not match topology")
            layer.W, layer.b = W, b
        return net


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} parameters vs {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeMismatch(f"parameter {p.shape} vs gradient {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(logits, target_index) -> tuple[float, np.ndarray]:
    """Cross-entropy ``-log softmax(logits)[target]`` and its logit gradient.

    Accepts a single logit vector with an int target, or a batch ``(B, C)``
    with one target per row; the batch loss is the sum over rows.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    t = np.atleast_1d(np.asarray(target_index, dtype=np.int64))
    if len(t) != len(zb) or np.any(t < 0) or np.any(t >= zb.shape[1]):
        raise IndexOutOfRange(f"target {target_index} outside [0, {zb.shape[1]})")
    shifted = zb - zb.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(zb))
    loss = float(np.sum(log_norm - shifted[rows, t]))
    grad = softmax(zb)
    grad[rows, t] -= 1.0
    return loss, (grad[0] if single else grad)


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    diff = pred - np.asarray(target, dtype=np.float64)
    if diff.shape != pred.shape:
        raise DimMismatch("prediction and target shapes differ")
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def central_difference(f, params: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Finite-difference gradient of scalar ``f()`` w.r.t. every entry of ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def max_relative_error(a: Sequence[np.ndarray], b: Sequence[np.ndarray], floor: float = 1e-4) -> float:
    """``max |a - b| / max(|a|, |b|, floor)`` over all entries."""
    worst = 0.0
    for x, y in zip(a, b):
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst
