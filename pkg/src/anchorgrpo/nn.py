"""Dense network substrate: explicit forward/backward, AdamW, warmup-cosine lr."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    pass


class DenseNet:
    """ReLU MLP with a linear output layer, double precision.

    Weights are stored as ``(d_in, d_out)`` so a batch ``x`` of shape
    ``(B, d_in)`` maps to ``x @ W + b``.
    """

    def __init__(self, layer_dims, seed=0, weights=None, biases=None):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or any(d <= 0 for d in layer_dims):
            raise ShapeError(f"invalid layer_dims {layer_dims}")
        self.layer_dims = layer_dims
        if weights is None:
            rng = np.random.default_rng(seed)
            weights, biases = [], []
            for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
                lim = math.sqrt(6.0 / (d_in + d_out))
                weights.append(rng.uniform(-lim, lim, size=(d_in, d_out)))
                biases.append(np.zeros(d_out))
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (layer_dims[i], layer_dims[i + 1]) or b.shape != (layer_dims[i + 1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} do not match dims")

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self):
        """Parameter arrays in layer order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return DenseNet(self.layer_dims, weights=[w.copy() for w in self.weights],
                        biases=[b.copy() for b in self.biases])

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.layer_dims[0] or x.ndim not in (1, 2):
            raise ShapeError(f"expected input width {self.layer_dims[0]}, got shape {x.shape}")
        return x

    def forward(self, x, return_cache=False):
        x = self._check_input(x)
        h = x
        pre = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i < self.n_layers - 1 else z
        if return_cache:
            return h, (x, pre)
        return h

    def backward(self, x, grad_out, cache=None):
        """Gradients of a scalar loss given ``dL/d output``.

        Returns ``(param_grads, grad_input)`` where ``param_grads`` is aligned
        with :meth:`params`. Batched inputs accumulate (sum) over the batch.
        """
        if cache is None:
            _, cache = self.forward(x, return_cache=True)
        x, pre = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != pre[-1].shape:
            raise ShapeError(f"output gradient shape {g.shape} != output shape {pre[-1].shape}")
        grads = [None] * (2 * self.n_layers)
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                g = g * (pre[i] > 0)
            h_in = x if i == 0 else np.maximum(pre[i - 1], 0.0)
            if g.ndim == 1:
                grads[2 * i] = np.outer(h_in, g)
                grads[2 * i + 1] = g.copy()
            else:
                grads[2 * i] = h_in.T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g

    # -- persistence ---------------------------------------------------------
    def to_lines(self, extra=None):
        header = {"layer_dims": self.layer_dims}
        if extra:
            header.update(extra)
        lines = [json.dumps(header)]
        for p in self.params():
            lines.extend(repr(float(v)) for v in p.ravel(order="C"))
        return lines

    @classmethod
    def from_lines(cls, lines):
        """Parse one network block; returns ``(net, header, n_lines_consumed)``."""
        header = json.loads(lines[0])
        dims = header["layer_dims"]
        n = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
        flat = np.array([float(v) for v in lines[1:1 + n]], dtype=np.float64)
        if flat.size != n:
            raise ShapeError(f"checkpoint truncated: expected {n} values, found {flat.size}")
        weights, biases, pos = [], [], 0
        for a, b in zip(dims[:-1], dims[1:]):
            weights.append(flat[pos:pos + a * b].reshape(a, b))
            pos += a * b
            biases.append(flat[pos:pos + b].copy())
            pos += b
        return cls(dims, weights=weights, biases=biases), header, 1 + n

    def save(self, path, extra=None):
        with open(path, "w") as f:
            f.write("\n".join(self.to_lines(extra)) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            lines = f.read().splitlines()
        net, header, _ = cls.from_lines(lines)
        return net, header


def lr_at(step, peak_lr, total_steps, warmup_ratio=0.1, schedule="cosine"):
    """Learning rate for a 1-based update index ``step`` (``lr_at(0) == 0`` under warmup)."""
    if schedule == "constant":
        return peak_lr
    warmup = int(round(warmup_ratio * total_steps))
    if warmup > 0 and step < warmup:
        return peak_lr * step / warmup
    if total_steps <= warmup:
        return peak_lr
    frac = min(max((step - warmup) / (total_steps - warmup), 0.0), 1.0)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    shapes: list
    lr: float = 2e-4
    weight_decay: float = 1e-4
    warmup_ratio: float = 0.10
    total_steps: int = 1000
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros(s) for s in self.shapes]
            self.v = [np.zeros(s) for s in self.shapes]

    @classmethod
    def for_params(cls, params, **kw):
        return cls(shapes=[p.shape for p in params], **kw)

    def current_lr(self):
        return lr_at(self.step, self.lr, self.total_steps, self.warmup_ratio, self.schedule)


def optimizer_step(state, params, grads):
    """AdamW update applied in place to ``params``; returns the lr used."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and moment buffers are misaligned")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ShapeError(f"grad {i} shape {g.shape} != param shape {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient in parameter block {i} "
                                     f"({'weight' if i % 2 == 0 else 'bias'} of layer {i // 2})")
    state.step += 1
    lr = state.current_lr()
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr
