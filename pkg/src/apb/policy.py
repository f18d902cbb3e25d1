"""The adaptive-policy-backbone actor: ``tanh(h(f(g(s))))``.

``g`` ("head") and ``h`` ("tail") are task-specific affine layers placed
before and after the shared nonlinear backbone ``f``.  Adaptation trains the
head and tail only; the backbone can be frozen, in which case its gradients
are still computed (they are needed for meta-training) but never applied.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError
from .nn import DenseLayer, Mlp, assign_layers, checksum, layer_arrays

GROUPS = ("head", "backbone", "tail")
SQUASH_LIMIT = 1 - 1e-6


@dataclass(frozen=True)
class ParamGroupSpec:
    group: str
    init_scale: float = 1.0
    frozen: bool = False

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"unknown parameter group {self.group!r}")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be positive")


@dataclass
class ActorTape:
    states: np.ndarray
    backbone_in: np.ndarray
    backbone_tape: object
    backbone_out: np.ndarray
    tanh_out: np.ndarray
    squeeze: bool


class ApbActor:
    def __init__(self, head, backbone, tail, action_bound=1.0, squash=True, frozen=()):
        if head.n_out != backbone.n_in or backbone.n_out != tail.n_in:
            raise StructuralError(
                f"head {head.n_in}->{head.n_out}, backbone {backbone.n_in}->{backbone.n_out}, "
                f"tail {tail.n_in}->{tail.n_out} do not chain")
        self.head = head
        self.backbone = backbone
        self.tail = tail
        self.action_bound = float(action_bound)
        self.squash = squash
        self.frozen = frozenset(frozen)
        unknown = self.frozen - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown groups {sorted(unknown)}")

    @classmethod
    def build(cls, state_dim, action_dim, rng, width=64, depth=2, init_scale=1.0,
              backbone_scale=1.0, freeze_backbone=False, action_bound=1.0, dtype=np.float64):
        """Head ``state_dim -> width``, backbone of ``depth`` relu layers, tail ``width -> action_dim``.

        Initialisation order (head, backbone, tail) is fixed so seeds are stable.
        """
        head = DenseLayer.init(state_dim, width, rng, init_scale, dtype)
        backbone = Mlp.build([width] * (depth + 1), rng, "relu", backbone_scale, dtype,
                             activate_input=True, activate_output=True)
        tail = DenseLayer.init(width, action_dim, rng, init_scale, dtype)
        return cls(head, backbone, tail, action_bound, True, {"backbone"} if freeze_backbone else ())

    # -- bookkeeping -------------------------------------------------------

    @property
    def state_dim(self):
        return self.head.n_in

    @property
    def action_dim(self):
        return self.tail.n_out

    @property
    def dtype(self):
        return self.head.weights.dtype

    @property
    def freeze_backbone(self):
        return "backbone" in self.frozen

    def group_specs(self):
        return [ParamGroupSpec("head", self.head.init_scale, "head" in self.frozen),
                ParamGroupSpec("backbone", self.backbone.layers[0].init_scale, "backbone" in self.frozen),
                ParamGroupSpec("tail", self.tail.init_scale, "tail" in self.frozen)]

    def groups(self):
        return {"head": self.head.params(), "backbone": self.backbone.params(), "tail": self.tail.params()}

    def trainable_groups(self):
        return [g for g in GROUPS if g not in self.frozen]

    def params(self):
        return [p for g in GROUPS for p in self.groups()[g]]

    def trainable_params(self):
        groups = self.groups()
        return [p for g in self.trainable_groups() for p in groups[g]]

    def n_trainable(self):
        return sum(p.size for p in self.trainable_params())

    def checksum(self, group=None):
        groups = self.groups()
        return checksum(groups[group] if group else [p for g in GROUPS for p in groups[g]])

    def copy(self, share_backbone=False):
        backbone = self.backbone if share_backbone else self.backbone.copy()
        return ApbActor(self.head.copy(), backbone, self.tail.copy(), self.action_bound, self.squash, self.frozen)

    def with_backbone(self, backbone):
        """Same head/tail objects around another backbone (used to share one backbone across tasks)."""
        return ApbActor(self.head, backbone, self.tail, self.action_bound, self.squash, self.frozen)

    # -- evaluation --------------------------------------------------------

    def forward(self, states):
        s = np.asarray(states, dtype=self.dtype)
        squeeze = s.ndim == 1
        if squeeze:
            s = s[None, :]
        if s.shape[1] != self.state_dim:
            raise StructuralError(f"state width {s.shape[1]} != actor input {self.state_dim}")
        z = self.head.forward(s)
        y, btape = self.backbone.forward(z)
        u = self.tail.forward(y)
        if self.squash:
            t = np.tanh(u)
            a = self.action_bound * np.clip(t, -SQUASH_LIMIT, SQUASH_LIMIT)
        else:
            t = None
            a = u
        tape = ActorTape(s, z, btape, y, t, squeeze)
        return (a[0] if squeeze else a), tape

    def act(self, state):
        return self.forward(state)[0]

    __call__ = act

    def pre_squash(self, states):
        s = np.asarray(states, dtype=self.dtype)
        return self.tail.forward(self.backbone(self.head.forward(s)))

    def backward(self, tape, grad_actions):
        """Gradients of every group (frozen ones included) and of the input states."""
        g = np.asarray(grad_actions, dtype=self.dtype)
        if tape.squeeze:
            g = g[None, :]
        if self.squash:
            g = g * self.action_bound * (1 - tape.tanh_out * tape.tanh_out)
        tail_grads, g = self.tail.backward(tape.backbone_out, g)
        backbone_grads, g = self.backbone.backward(tape.backbone_tape, g)
        head_grads, g = self.head.backward(tape.states, g)
        grads = {"head": head_grads, "backbone": backbone_grads, "tail": tail_grads}
        return grads, (g[0] if tape.squeeze else g)

    # -- task-specific parameter handling -----------------------------------

    def reset_task_parameters(self, rng):
        """Redraw head and tail at their init scale, in place; the backbone is untouched."""
        for layer in (self.head, self.tail):
            fresh = DenseLayer.init(layer.n_in, layer.n_out, rng, layer.init_scale, layer.weights.dtype)
            layer.weights[...] = fresh.weights
            layer.bias[...] = fresh.bias
        return self

    def perturb_parameters(self, sigma, rng):
        """Copy with Gaussian noise of std ``sigma`` added to every trainable parameter."""
        if sigma < 0:
            raise ValueError("sigma must be nonnegative")
        clone = self.copy()
        if sigma > 0:
            for p in clone.trainable_params():
                p += rng.normal(0.0, sigma, size=p.shape).astype(p.dtype)
        return clone

    def state_arrays(self, groups=GROUPS):
        out = {}
        if "head" in groups:
            out.update(layer_arrays("head", [self.head]))
        if "backbone" in groups:
            out.update(layer_arrays("backbone", self.backbone.layers))
        if "tail" in groups:
            out.update(layer_arrays("tail", [self.tail]))
        return out

    def load_group(self, checkpoint, group):
        layers = {"head": [self.head], "backbone": self.backbone.layers, "tail": [self.tail]}[group]
        assign_layers(layers, checkpoint.group(group), group)


def absorb_linear(outer_pre, actor, outer_post):
    """Fold outer linear maps into the actor: head <- head . outer_pre, tail <- outer_post . tail.

    ``outer_pre`` is ``(state_dim, new_state_dim)`` and ``outer_post`` is
    ``(new_action_dim, action_dim)``; the backbone is shared, not copied.
    """
    M_pre = np.asarray(outer_pre, dtype=actor.dtype)
    M_post = np.asarray(outer_post, dtype=actor.dtype)
    if M_pre.ndim != 2 or M_pre.shape[0] != actor.state_dim:
        raise StructuralError(f"outer_pre must have {actor.state_dim} rows, got {M_pre.shape}")
    if M_post.ndim != 2 or M_post.shape[1] != actor.action_dim:
        raise StructuralError(f"outer_post must have {actor.action_dim} columns, got {M_post.shape}")
    head = DenseLayer(actor.head.weights @ M_pre, actor.head.bias.copy(), actor.head.init_scale)
    tail = DenseLayer(M_post @ actor.tail.weights, M_post @ actor.tail.bias, actor.tail.init_scale)
    return ApbActor(head, actor.backbone, tail, actor.action_bound, actor.squash, actor.frozen)
