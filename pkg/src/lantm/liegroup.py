"""Lie group actions on the 2-d key space.

Every group here is parametrised by a pair (a, b):

* ``translation2d``: (a, b) acts by k ↦ k + (a, b)
* ``scaling_rotation``: (a, b) is the complex number a + bi acting by
  multiplication, i.e. the matrix [[a, -b], [b, a]]
* ``rotation``: as above with (a, b) rescaled to unit norm

Action parameters may be numpy arrays or tape nodes of shape (..., 2).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Node


class GroupKind(str, Enum):
    TRANSLATION = "translation2d"
    SCALING_ROTATION = "scaling_rotation"
    ROTATION = "rotation"


class DegenerateActionError(ValueError):
    """(a, b) = (0, 0) does not name an element of a multiplicative group."""


@dataclass
class ActionParams:
    ab: object
    kind: GroupKind = GroupKind.TRANSLATION

    @property
    def value(self) -> np.ndarray:
        return self.ab.value if isinstance(self.ab, Node) else np.asarray(self.ab, dtype=np.float64)


def identity(kind: GroupKind) -> ActionParams:
    kind = GroupKind(kind)
    if kind is GroupKind.TRANSLATION:
        return ActionParams(np.zeros(2), kind)
    return ActionParams(np.array([1.0, 0.0]), kind)


def _check_nondegenerate(ab: np.ndarray) -> None:
    if np.any(np.sum(ab * ab, axis=-1) == 0.0):
        raise DegenerateActionError("action (0, 0) is not a group element")


def _complex_mul(u: Node, z: Node) -> Node:
    a, b = ad.split(u, [1, 1])
    x, y = ad.split(z, [1, 1])
    return ad.concat([a * x - b * y, b * x + a * y])


def _unit(ab: Node) -> Node:
    return ad.scale(ad.reciprocal(ad.sqrt(ad.reduce_sum(ab * ab, axis=-1))), ab)


def canonical(v: ActionParams) -> ActionParams:
    """Project a rotation onto the unit circle; other kinds are returned as-is."""
    kind = GroupKind(v.kind)
    if kind is GroupKind.TRANSLATION:
        return v
    _check_nondegenerate(v.value)
    if kind is GroupKind.ROTATION:
        t = ad._tape_of(v.ab)
        return ActionParams(_unit(ad.lift(t, v.ab)), kind)
    return v


def act(v: ActionParams, k) -> Node:
    """Apply the group element ``v`` to key(s) ``k``."""
    kind = GroupKind(v.kind)
    t = ad._tape_of(v.ab, k)
    ab, k = ad.lift(t, v.ab), ad.lift(t, k)
    if kind is GroupKind.TRANSLATION:
        return ab + k
    _check_nondegenerate(ab.value)
    if kind is GroupKind.ROTATION:
        ab = _unit(ab)
    return _complex_mul(ab, k)


def compose(v: ActionParams, w: ActionParams) -> ActionParams:
    """The element v∘w, so that act(compose(v, w), k) == act(v, act(w, k))."""
    if GroupKind(v.kind) is not GroupKind(w.kind):
        raise ValueError("cannot compose actions of different groups")
    kind = GroupKind(v.kind)
    t = ad._tape_of(v.ab, w.ab)
    a, b = ad.lift(t, v.ab), ad.lift(t, w.ab)
    if kind is GroupKind.TRANSLATION:
        return ActionParams(a + b, kind)
    if kind is GroupKind.ROTATION:
        _check_nondegenerate(a.value)
        _check_nondegenerate(b.value)
        a, b = _unit(a), _unit(b)
    return ActionParams(_complex_mul(a, b), kind)


def interpolate_action(v_prev: ActionParams, v_cand: ActionParams, h) -> ActionParams:
    """Straight-line mix h·v_cand + (1-h)·v_prev; rotations are re-projected to the circle."""
    if GroupKind(v_prev.kind) is not GroupKind(v_cand.kind):
        raise ValueError("cannot mix actions of different groups")
    kind = GroupKind(v_prev.kind)
    t = ad._tape_of(v_prev.ab, v_cand.ab, h)
    h = ad.lift(t, h)
    mixed = h * ad.lift(t, v_cand.ab) + (1.0 - h) * ad.lift(t, v_prev.ab)
    if kind is GroupKind.ROTATION:
        _check_nondegenerate(mixed.value)
        mixed = _unit(mixed)
    return ActionParams(mixed, kind)


def normalize_step(v: ActionParams, eps: float = 1e-6) -> ActionParams:
    """Rescale a translation step to roughly unit length: v / sqrt(|v|² + eps)."""
    if GroupKind(v.kind) is not GroupKind.TRANSLATION:
        raise ValueError("step normalization is defined for translations only")
    t = ad._tape_of(v.ab)
    ab = ad.lift(t, v.ab)
    norm = ad.sqrt(ad.reduce_sum(ab * ab, axis=-1, keepdims=True) + eps)
    return ActionParams(ab * ad.reciprocal(norm), v.kind)
