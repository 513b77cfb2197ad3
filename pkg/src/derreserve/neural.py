"""Small dense networks with hand-written backpropagation and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = "derreserve-mlp"
CHECKPOINT_VERSION = 1


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Mlp:
    """Feed-forward net: ReLU hidden layers, linear or sigmoid output.

    Inputs may be a single vector or a (batch, features) array.
    """

    def __init__(self, layer_dims, output="linear", rng=None, weights=None, biases=None):
        if output not in ("linear", "sigmoid"):
            raise ValueError(f"unknown output activation {output!r}")
        self.layer_dims = tuple(int(d) for d in layer_dims)
        if len(self.layer_dims) < 2:
            raise ValueError("need at least input and output dimensions")
        self.output = output
        if weights is None:
            rng = np.random.default_rng(rng)
            weights, biases = [], []
            for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
                bound = 1.0 / np.sqrt(fan_in)
                weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                biases.append(rng.uniform(-bound, bound, size=fan_out))
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[k], self.layer_dims[k + 1]) or b.shape != (self.layer_dims[k + 1],):
                raise ValueError(f"layer {k} parameter shapes do not chain")

    def params(self) -> list[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> Mlp:
        return Mlp(self.layer_dims, self.output, weights=[w.copy() for w in self.weights],
                   biases=[b.copy() for b in self.biases])

    def _forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.layer_dims[0]:
            raise ValueError(f"input has {x.shape[-1]} features, net expects {self.layer_dims[0]}")
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            if k < last:
                h = relu(z)
            else:
                h = sigmoid(z) if self.output == "sigmoid" else z
            acts.append(h)
        return acts, pre

    def forward(self, x) -> np.ndarray:
        return self._forward(x)[0][-1]

    __call__ = forward

    def backward(self, x, upstream):
        """Gradients of sum(output * upstream) w.r.t. parameters and input.

        Returns (grads in ``params()`` order, input gradient).
        """
        acts, pre = self._forward(x)
        upstream = np.asarray(upstream, dtype=float)
        if upstream.shape != acts[-1].shape:
            raise ValueError(f"upstream shape {upstream.shape} != output shape {acts[-1].shape}")
        delta = upstream
        if self.output == "sigmoid":
            y = acts[-1]
            delta = delta * y * (1.0 - y)
        grads = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            h = acts[k]
            if h.ndim == 1:
                grads[2 * k] = np.outer(h, delta)
                grads[2 * k + 1] = delta.copy()
            else:
                grads[2 * k] = h.T @ delta
                grads[2 * k + 1] = delta.sum(axis=0)
            delta = delta @ self.weights[k].T
            if k > 0:
                delta = delta * (pre[k - 1] > 0)
        return grads, delta

    def set_params(self, flat: list[np.ndarray]) -> None:
        for k in range(len(self.weights)):
            self.weights[k] = np.array(flat[2 * k], dtype=float)
            self.biases[k] = np.array(flat[2 * k + 1], dtype=float)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_net(cls, net: Mlp, lr: float, **kw) -> AdamState:
        return cls(lr=lr, m=[np.zeros_like(p) for p in net.params()],
                   v=[np.zeros_like(p) for p in net.params()], **kw)


def adam_step(adam: AdamState, net: Mlp, grads, direction: str = "descent") -> Mlp:
    """Bias-corrected Adam update applied in place; returns ``net``."""
    if direction not in ("descent", "ascent"):
        raise ValueError(f"direction must be descent or ascent, got {direction!r}")
    params = net.params()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match network parameters")
    for k, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {k}")
    sign = -1.0 if direction == "descent" else 1.0
    adam.t += 1
    c1 = 1.0 - adam.beta1 ** adam.t
    c2 = 1.0 - adam.beta2 ** adam.t
    for p, g, m, v in zip(params, grads, adam.m, adam.v):
        m *= adam.beta1
        m += (1.0 - adam.beta1) * g
        v *= adam.beta2
        v += (1.0 - adam.beta2) * g * g
        p += sign * adam.lr * (m / c1) / (np.sqrt(v / c2) + adam.eps)
    return net


def save_mlp(net: Mlp, path) -> None:
    """Text checkpoint: header, output activation, dims, then one parameter block per line."""
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}", f"output {net.output}",
             "dims " + " ".join(str(d) for d in net.layer_dims)]
    for p in net.params():
        lines.append(" ".join(repr(float(x)) for x in p.ravel()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mlp(path) -> Mlp:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a network checkpoint")
    version = int(lines[0].split()[1].lstrip("v"))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    output = lines[1].split()[1]
    dims = [int(d) for d in lines[2].split()[1:]]
    blocks = [np.array([float(x) for x in ln.split()]) for ln in lines[3:]]
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        weights.append(blocks[2 * k].reshape(fan_in, fan_out))
        biases.append(blocks[2 * k + 1].reshape(fan_out))
    return Mlp(dims, output, weights=weights, biases=biases)
