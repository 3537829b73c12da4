"""Minimal deterministic neural-network substrate.

Double-precision numpy throughout: dense layers, a single-input-channel 2D
convolution, relu/exp/identity activations, bias-corrected Adam, seeded
initialization, JSON checkpoints that round-trip bit-identically, and a
central finite-difference gradient checker. No threading, no in-place
tricks that would make two runs with the same seed diverge.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .fileio import atomic_write_text

CHECKPOINT_VERSION = 1
LOG_EPS = 1e-8


def make_rng(seed) -> np.random.Generator:
    """Seeded generator; accepts ints or tuples of ints for stream splitting."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


class Dense:
    """Affine layer y = x W^T + b for batches of row vectors."""

    kind = "dense"

    def __init__(self, n_in: int, n_out: int, init: str = "he", rng=None):
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.init = init
        if rng is None:
            self.weight = np.zeros((self.n_out, self.n_in))
        elif init == "he":
            limit = np.sqrt(6.0 / self.n_in)
            self.weight = rng.uniform(-limit, limit, size=(self.n_out, self.n_in))
        elif init == "small":
            self.weight = rng.uniform(-0.01, 0.01, size=(self.n_out, self.n_in))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.bias = np.zeros(self.n_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, g):
        self.grad_weight = g.T @ self._x
        self.grad_bias = g.sum(axis=0)
        return g @ self.weight

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def spec(self):
        return {"kind": "dense", "n_in": self.n_in, "n_out": self.n_out, "init": self.init}


class Conv2d:
    """Valid 2D convolution, one input channel, stride 1.

    Input (N, H, W) -> output (N, filters, H - kh + 1, W - kw + 1).
    """

    kind = "conv"

    def __init__(self, filters: int, kh: int, kw: int, in_h: int, in_w: int, rng=None):
        if kh > in_h or kw > in_w:
            raise ValueError("kernel larger than input")
        self.filters = int(filters)
        self.kh, self.kw = int(kh), int(kw)
        self.in_h, self.in_w = int(in_h), int(in_w)
        self.out_h = self.in_h - self.kh + 1
        self.out_w = self.in_w - self.kw + 1
        fan_in = self.kh * self.kw
        if rng is None:
            self.weight = np.zeros((self.filters, self.kh, self.kw))
        else:
            limit = np.sqrt(6.0 / fan_in)
            self.weight = rng.uniform(-limit, limit, size=(self.filters, self.kh, self.kw))
        self.bias = np.zeros(self.filters)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    def forward(self, x):
        if x.ndim != 3 or x.shape[1:] != (self.in_h, self.in_w):
            raise ValueError(f"expected (N, {self.in_h}, {self.in_w}) input, got {x.shape}")
        self._x = x
        n = x.shape[0]
        y = np.zeros((n, self.filters, self.out_h, self.out_w))
        for a in range(self.kh):
            for b in range(self.kw):
                patch = x[:, None, a : a + self.out_h, b : b + self.out_w]
                y += self.weight[None, :, a, b, None, None] * patch
        return y + self.bias[None, :, None, None]

    def backward(self, g):
        x = self._x
        self.grad_bias = g.sum(axis=(0, 2, 3))
        self.grad_weight = np.zeros_like(self.weight)
        dx = np.zeros_like(x)
        for a in range(self.kh):
            for b in range(self.kw):
                patch = x[:, a : a + self.out_h, b : b + self.out_w]
                self.grad_weight[:, a, b] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 1, 2]))
                dx[:, a : a + self.out_h, b : b + self.out_w] += np.tensordot(
                    g, self.weight[:, a, b], axes=([1], [0])
                )
        return dx

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def spec(self):
        return {
            "kind": "conv",
            "filters": self.filters,
            "kh": self.kh,
            "kw": self.kw,
            "in_h": self.in_h,
            "in_w": self.in_w,
        }


class Relu:
    kind = "relu"

    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        return g * self._mask

    def params(self):
        return []

    def grads(self):
        return []

    def spec(self):
        return {"kind": "relu"}


class Exp:
    """Elementwise exp; pre-activations clipped at 500 to stay finite."""

    kind = "exp"

    def __init__(self):
        self._y = None
        self._mask = None

    def forward(self, x):
        self._mask = x < 500.0
        self._y = np.exp(np.minimum(x, 500.0))
        return self._y

    def backward(self, g):
        return g * self._y * self._mask

    def params(self):
        return []

    def grads(self):
        return []

    def spec(self):
        return {"kind": "exp"}


class Identity:
    kind = "identity"

    def forward(self, x):
        return x

    def backward(self, g):
        return g

    def params(self):
        return []

    def grads(self):
        return []

    def spec(self):
        return {"kind": "identity"}


class Flatten:
    kind = "flatten"

    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._shape)

    def params(self):
        return []

    def grads(self):
        return []

    def spec(self):
        return {"kind": "flatten"}


_LAYER_KINDS = {
    "dense": Dense,
    "conv": Conv2d,
    "relu": Relu,
    "exp": Exp,
    "identity": Identity,
    "flatten": Flatten,
}


class Network:
    """An ordered stack of layers with explicit forward/backward."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def params(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def grads(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.grads())
        return out

    def spec(self):
        return [layer.spec() for layer in self.layers]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def get_flat(self) -> np.ndarray:
        ps = self.params()
        if not ps:
            return np.zeros(0)
        return np.concatenate([p.reshape(-1) for p in ps])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params():
            raise ValueError("flat parameter vector has wrong length")
        k = 0
        for p in self.params():
            p[...] = vec[k : k + p.size].reshape(p.shape)
            k += p.size

    def get_flat_grads(self) -> np.ndarray:
        gs = self.grads()
        if not gs:
            return np.zeros(0)
        return np.concatenate([g.reshape(-1) for g in gs])


def _shape_after(spec_entry, shape):
    kind = spec_entry["kind"]
    if kind == "dense":
        if shape != (spec_entry["n_in"],):
            raise ValueError(f"dense layer expects ({spec_entry['n_in']},), got {shape}")
        return (spec_entry["n_out"],)
    if kind == "conv":
        if shape != (spec_entry["in_h"], spec_entry["in_w"]):
            raise ValueError(f"conv layer expects {spec_entry['in_h']}x{spec_entry['in_w']}, got {shape}")
        return (
            spec_entry["filters"],
            spec_entry["in_h"] - spec_entry["kh"] + 1,
            spec_entry["in_w"] - spec_entry["kw"] + 1,
        )
    if kind == "flatten":
        return (int(np.prod(shape)),)
    return shape


def build_network(spec, rng=None, input_shape=None) -> Network:
    """Instantiate a network from a layer spec list, validating shape flow."""
    layers = []
    shape = tuple(input_shape) if input_shape is not None else None
    for entry in spec:
        kind = entry.get("kind")
        if kind not in _LAYER_KINDS:
            raise ValueError(f"unknown layer kind {kind!r}")
        if shape is not None:
            shape = _shape_after(entry, shape)
        kwargs = {k: v for k, v in entry.items() if k != "kind"}
        cls = _LAYER_KINDS[kind]
        if kind in ("dense", "conv"):
            layers.append(cls(rng=rng, **kwargs))
        else:
            layers.append(cls())
    return Network(layers)


@dataclass
class AdamState:
    """Bias-corrected Adam over a list of parameter arrays."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Optional[list] = None
    v: Optional[list] = None

    def init(self, params):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0
        return self


def adam_step(state: AdamState, params, grads):
    """One in-place Adam update; returns the parameter list."""
    if state.m is None:
        state.init(params)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    passed: bool


def grad_check(
    net: Network,
    loss_fn: Callable,
    x,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_params: Optional[int] = None,
    rng=None,
) -> GradCheckReport:
    """Compare backprop gradients against central finite differences.

    ``loss_fn(y) -> (loss, dloss_dy)``. Checks every parameter unless
    ``max_params`` caps the count (sampled with ``rng``).
    """
    x = np.asarray(x, dtype=float)
    y = net.forward(x)
    _, dldy = loss_fn(y)
    net.backward(dldy)
    analytic = net.get_flat_grads()
    theta = net.get_flat()
    n = theta.size
    idx = np.arange(n)
    if max_params is not None and max_params < n:
        if rng is None:
            rng = make_rng(0)
        idx = np.sort(rng.choice(n, size=max_params, replace=False))
    fd = np.zeros(idx.size)
    for k, i in enumerate(idx):
        saved = theta[i]
        theta[i] = saved + step
        net.set_flat(theta)
        lp, _ = loss_fn(net.forward(x))
        theta[i] = saved - step
        net.set_flat(theta)
        lm, _ = loss_fn(net.forward(x))
        theta[i] = saved
        fd[k] = (lp - lm) / (2.0 * step)
    net.set_flat(theta)
    ana = analytic[idx]
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(ana)), 1e-6)
    rel = float(np.max(np.abs(fd - ana) / denom)) if idx.size else 0.0
    return GradCheckReport(max_rel_error=rel, n_checked=int(idx.size), passed=rel < tolerance)


def _to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return [float(v) for v in obj.reshape(-1)]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def save_checkpoint(path, spec, weights, norm_stats=None, seed=None, epochs=None, kind=None) -> None:
    """Serialize a model to versioned JSON.

    ``weights`` is the flat parameter vector (concatenated in layer order);
    saving, loading and saving again produces byte-identical files.
    """
    weights = np.asarray(weights, dtype=float)
    if not np.all(np.isfinite(weights)):
        raise ValueError("non-finite weights")
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "spec": _to_jsonable(spec),
        "weights": [float(v) for v in weights],
        "norm_stats": _to_jsonable(norm_stats) if norm_stats is not None else None,
        "seed": seed,
        "epochs": epochs,
    }
    atomic_write_text(path, json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")


def load_checkpoint(path) -> dict:
    with open(path, "r") as fh:
        payload = json.load(fh)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    payload["weights"] = np.array(payload["weights"], dtype=float)
    return payload
