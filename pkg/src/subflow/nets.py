"""Minimal MLP with hand-rolled reverse-mode gradients, plus Adam.

Parameters live in one flat float64 vector per network; per-layer weight and
bias views alias that vector so the optimizer can treat every head uniformly.
Gradient accumulation is single-writer: parallel callers must sum private
buffers before stepping.
"""

from __future__ import annotations

import math
import struct

import numpy as np

MAGIC = b"SFNET"
VERSION = 1

ACTIVATIONS = ("leaky_relu", "tanh")


def _act(name, z):
    if name == "leaky_relu":
        return np.where(z >= 0, z, 0.01 * z)
    return np.tanh(z)


def _act_grad(name, z):
    if name == "leaky_relu":
        return np.where(z >= 0, 1.0, 0.01)
    return 1.0 - np.tanh(z) ** 2


def param_count(widths):
    return sum((a + 1) * b for a, b in zip(widths[:-1], widths[1:]))


class Mlp:
    """Fully connected net with the named activation between hidden layers.

    ``widths`` lists input, hidden..., output sizes. The flat parameter
    vector stores, per layer, the (out x in) weight matrix row-major followed
    by the bias. ``grad`` is the aligned accumulator, zeroed via
    ``zero_grad`` at the start of each optimization step.
    """

    def __init__(self, widths, activation="leaky_relu", rng=None, zero_final=False):
        if len(widths) < 2:
            raise ValueError("need at least an input and an output width")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = list(widths)
        self.activation = activation
        self.params = np.zeros(param_count(widths))
        self.grad = np.zeros_like(self.params)
        self._weights, self._biases = self._views(self.params)
        self._gw, self._gb = self._views(self.grad)
        if rng is not None:
            self.init_params(rng, zero_final=zero_final)

    def _views(self, flat):
        ws, bs, off = [], [], 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            ws.append(flat[off : off + a * b].reshape(b, a))
            off += a * b
            bs.append(flat[off : off + b])
            off += b
        return ws, bs

    def __getstate__(self):
        return {
            "widths": self.widths,
            "activation": self.activation,
            "params": self.params,
            "grad": self.grad,
        }

    def __setstate__(self, state):
        self.widths = state["widths"]
        self.activation = state["activation"]
        self.params = state["params"]
        self.grad = state["grad"]
        self._weights, self._biases = self._views(self.params)
        self._gw, self._gb = self._views(self.grad)

    def init_params(self, rng, zero_final=False):
        """Glorot-uniform weights, zero biases; optionally zero last layer."""
        for i, w in enumerate(self._weights):
            if zero_final and i == len(self._weights) - 1:
                w[:] = 0.0
                continue
            bound = math.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            w[:] = rng.uniform(-bound, bound, size=w.shape)
        for b in self._biases:
            b[:] = 0.0

    def zero_grad(self):
        self.grad[:] = 0.0

    @property
    def in_width(self):
        return self.widths[0]

    @property
    def out_width(self):
        return self.widths[-1]

    def forward_cached(self, x):
        """Batched forward pass. ``x`` is (n, in_width); returns (y, cache)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise ValueError(
                f"input shape {x.shape} incompatible with widths {self.widths}"
            )
        pre, post = [], [x]
        h = x
        last = len(self._weights) - 1
        for i, (w, b) in enumerate(zip(self._weights, self._biases)):
            z = h @ w.T + b
            pre.append(z)
            h = z if i == last else _act(self.activation, z)
            post.append(h)
        return h, (pre, post)

    def forward_many(self, x):
        return self.forward_cached(x)[0]

    def forward(self, x):
        """Single-vector forward pass."""
        return self.forward_many(np.asarray(x, dtype=np.float64)[None, :])[0]

    def backward_cached(self, cache, upstream):
        """Accumulate d(upstream . output)/dparams; return input gradient."""
        pre, post = cache
        d = np.asarray(upstream, dtype=np.float64)
        if d.shape != pre[-1].shape:
            raise ValueError(
                f"upstream shape {d.shape} does not match output {pre[-1].shape}"
            )
        last = len(self._weights) - 1
        for i in range(last, -1, -1):
            if i != last:
                d = d * _act_grad(self.activation, pre[i])
            self._gw[i] += d.T @ post[i]
            self._gb[i] += d.sum(axis=0)
            d = d @ self._weights[i]
        return d

    def backward(self, x, upstream):
        """Single-vector backward pass; returns d(upstream . output)/dinput."""
        _, cache = self.forward_cached(np.asarray(x, dtype=np.float64)[None, :])
        return self.backward_cached(cache, np.asarray(upstream)[None, :])[0]


class ScalarParam:
    """A single learnable scalar (the total-flow estimate) with the same
    params/grad interface as Mlp so optimizers treat it uniformly."""

    def __init__(self, value=0.0):
        self.widths = [0, 1]
        self.params = np.array([float(value)])
        self.grad = np.zeros(1)

    def zero_grad(self):
        self.grad[:] = 0.0

    @property
    def value(self):
        return float(self.params[0])


class Adam:
    """Standard Adam; aborts on non-finite gradients."""

    def __init__(self, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grads):
        if not np.all(np.isfinite(grads)):
            bad = int(np.flatnonzero(~np.isfinite(grads))[0])
            raise FloatingPointError(f"non-finite gradient at slot {bad}")
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1 - self.beta2) * grads**2
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def save_params(head) -> bytes:
    """Versioned little-endian blob: magic, version, widths, float64 params."""
    widths = head.widths
    header = struct.pack(
        f"<5sBI{len(widths)}I", MAGIC, VERSION, len(widths), *widths
    )
    return header + head.params.astype("<f8").tobytes()


def load_params(blob: bytes, head) -> None:
    magic, version, nw = struct.unpack_from("<5sBI", blob, 0)
    if magic != MAGIC or version != VERSION:
        raise ValueError("not a recognized parameter blob")
    off = struct.calcsize("<5sBI")
    widths = list(struct.unpack_from(f"<{nw}I", blob, off))
    off += 4 * nw
    if widths != list(head.widths):
        raise ValueError(f"widths {widths} do not match head widths {head.widths}")
    flat = np.frombuffer(blob, dtype="<f8", offset=off)
    if flat.size != head.params.size:
        raise ValueError("parameter payload has wrong length")
    head.params[:] = flat
