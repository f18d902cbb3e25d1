"""Small fully connected networks with hand-written backprop, Adam, and checkpoints.

Batches are row-major: an input of shape ``(batch, n_in)`` maps to
``(batch, n_out)``; a 1-D input is treated as a batch of one and the output is
squeezed back.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericError, StructuralError

ACTIVATIONS = ("relu", "tanh")


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0)
    return np.tanh(z)


def _act_grad(name, z, h):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return 1 - h * h


class DenseLayer:
    """Affine map ``x -> x W^T + b`` with ``W`` of shape ``(out, in)``."""

    def __init__(self, weights, bias, init_scale=1.0):
        self.weights = np.asarray(weights)
        self.bias = np.asarray(bias, dtype=self.weights.dtype)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise StructuralError(f"bias {self.bias.shape} does not match weights {self.weights.shape}")
        self.init_scale = float(init_scale)

    @classmethod
    def init(cls, n_in, n_out, rng, scale=1.0, dtype=np.float64):
        """Uniform in ``+-scale * sqrt(1 / n_in)`` for weights and bias."""
        bound = scale * np.sqrt(1.0 / n_in)
        W = rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype)
        b = rng.uniform(-bound, bound, size=n_out).astype(dtype)
        return cls(W, b, init_scale=scale)

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def n_out(self):
        return self.weights.shape[0]

    def params(self):
        return [self.weights, self.bias]

    def forward(self, x):
        return x @ self.weights.T + self.bias

    def backward(self, x, grad_out):
        """Returns ``([dW, db], dx)`` for a batched input ``x``."""
        return [grad_out.T @ x, grad_out.sum(axis=0)], grad_out @ self.weights

    def copy(self):
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.init_scale)


@dataclass
class Tape:
    owner: object
    x: np.ndarray
    inputs: list
    pre: list
    post: list
    squeeze: bool


class Mlp:
    """Stack of dense layers with an activation between them.

    ``activate_input`` / ``activate_output`` additionally apply the activation
    before the first and after the last layer, which is how the policy
    backbone sits between two linear maps.
    """

    def __init__(self, layers, activation="relu", activate_input=False, activate_output=False):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not layers:
            raise StructuralError("an Mlp needs at least one layer")
        for a, b in zip(layers[:-1], layers[1:]):
            if a.n_out != b.n_in:
                raise StructuralError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
        self.layers = list(layers)
        self.activation = activation
        self.activate_input = activate_input
        self.activate_output = activate_output

    @classmethod
    def build(cls, sizes, rng, activation="relu", scale=1.0, dtype=np.float64, **kw):
        layers = [DenseLayer.init(i, o, rng, scale, dtype) for i, o in zip(sizes[:-1], sizes[1:])]
        return cls(layers, activation, **kw)

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def copy(self):
        return Mlp([l.copy() for l in self.layers], self.activation, self.activate_input, self.activate_output)

    def _activated(self, k):
        return k < len(self.layers) - 1 or self.activate_output

    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.n_in:
            raise StructuralError(f"input width {x.shape[-1]} does not match network input {self.n_in}")
        h = _act(self.activation, x) if self.activate_input else x
        inputs, pre, post = [], [], []
        for k, layer in enumerate(self.layers):
            inputs.append(h)
            z = layer.forward(h)
            h = _act(self.activation, z) if self._activated(k) else z
            pre.append(z)
            post.append(h)
        tape = Tape(self, x, inputs, pre, post, squeeze)
        return (h[0] if squeeze else h), tape

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, tape, grad_out):
        """Gradients for ``params()`` (same order) and for the input."""
        if tape.owner is not self or len(tape.pre) != len(self.layers):
            raise StructuralError("tape was not produced by this network")
        g = np.asarray(grad_out, dtype=self.dtype)
        if tape.squeeze:
            g = g[None, :]
        if g.shape != tape.post[-1].shape:
            raise StructuralError(f"output gradient shape {g.shape} != output {tape.post[-1].shape}")
        grads = [None] * (2 * len(self.layers))
        for k in reversed(range(len(self.layers))):
            layer = self.layers[k]
            if layer.weights.shape[1] != tape.inputs[k].shape[1]:
                raise StructuralError("tape is stale: layer shapes changed since forward")
            if self._activated(k):
                g = g * _act_grad(self.activation, tape.pre[k], tape.post[k])
            (dW, db), g = layer.backward(tape.inputs[k], g)
            grads[2 * k], grads[2 * k + 1] = dW, db
        if self.activate_input:
            h0 = _act(self.activation, tape.x)
            g = g * _act_grad(self.activation, tape.x, h0)
        return grads, (g[0] if tape.squeeze else g)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_params(cls, params, lr=1e-3, **kw):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr, **kw)

    def reset(self):
        for m, v in zip(self.first_moment, self.second_moment):
            m[...] = 0
            v[...] = 0
        self.step_count = 0


def adam_step(state, params, grads):
    """Bias-corrected Adam update applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise StructuralError("params, grads and optimizer state are misaligned")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise StructuralError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype)
    return params


def soft_update(target, online, tau):
    """``target <- tau * online + (1 - tau) * target`` for matching parameter lists."""
    for t, o in zip(target, online):
        t[...] = tau * o + (1 - tau) * t


def checksum(arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def numerical_gradient(f, params, eps=1e-5):
    """Central differences of scalar ``f()`` with respect to each array in ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p, dtype=np.float64)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + eps
            up = f()
            p[i] = old - eps
            down = f()
            p[i] = old
            g[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def relative_error(a, b):
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "apb-checkpoint/1"


def layer_arrays(prefix, layers):
    out = {}
    for k, layer in enumerate(layers):
        out[f"{prefix}/{k}/weights"] = layer.weights
        out[f"{prefix}/{k}/bias"] = layer.bias
    return out


def save_checkpoint(path, arrays, metadata=None):
    """Write ``{name: array}`` plus JSON metadata into one ``.npz`` container.

    Names are ``group/...``; the manifest records every array's shape and dtype.
    """
    path = Path(path)
    manifest = {name: {"shape": list(a.shape), "dtype": str(a.dtype)} for name, a in arrays.items()}
    meta = {"format": CHECKPOINT_FORMAT, "arrays": manifest, "metadata": metadata or {}}
    payload = {name: np.ascontiguousarray(a) for name, a in arrays.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


@dataclass
class Checkpoint:
    arrays: dict
    metadata: dict = field(default_factory=dict)

    def groups(self):
        return sorted({name.split("/", 1)[0] for name in self.arrays})

    def group(self, name):
        prefix = name + "/"
        found = {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}
        if not found:
            raise StructuralError(f"checkpoint has no group {name!r} (groups: {self.groups()})")
        return found


def load_checkpoint(path):
    with np.load(Path(path), allow_pickle=False) as data:
        if "__meta__" not in data.files:
            raise StructuralError(f"{path} is not a checkpoint container")
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise StructuralError(f"unsupported checkpoint format {meta.get('format')!r}")
        arrays = {}
        for name, spec in meta["arrays"].items():
            a = data[name]
            if list(a.shape) != spec["shape"]:
                raise StructuralError(f"array {name} has shape {a.shape}, manifest says {spec['shape']}")
            arrays[name] = a
    return Checkpoint(arrays, meta.get("metadata", {}))


def assign_layers(layers, group_arrays, group_name="group"):
    """Copy checkpoint arrays into existing layers, refusing any shape mismatch."""
    expected = {f"{k}/{p}" for k in range(len(layers)) for p in ("weights", "bias")}
    if set(group_arrays) != expected:
        raise StructuralError(f"{group_name}: checkpoint entries {sorted(group_arrays)} != {sorted(expected)}")
    for k, layer in enumerate(layers):
        for attr in ("weights", "bias"):
            src = group_arrays[f"{k}/{attr}"]
            dst = getattr(layer, attr)
            if src.shape != dst.shape:
                raise StructuralError(f"{group_name} layer {k} {attr}: shape {src.shape} != {dst.shape}")
            dst[...] = src
