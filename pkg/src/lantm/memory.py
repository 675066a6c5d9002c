"""Unbounded Lie-access memory: append-only store, two retrieval weightings, addressing.

Entries are kept in insertion order.  Each entry is a key (..., 2), a vector
(..., m) squashed by tanh on write, and a strength (...,) in [0, 1].  Leading
axes are a batch of independent stores that always share the same length.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .liegroup import ActionParams, GroupKind, act, interpolate_action, normalize_step

INVNORM_EPS = 1e-9


class EmptyMemoryError(RuntimeError):
    pass


@dataclass
class MemoryStore:
    width: int
    addresses: list = field(default_factory=list)
    vectors: list = field(default_factory=list)
    strengths: list = field(default_factory=list)

    def __len__(self):
        return len(self.addresses)

    def entries(self):
        """(address, vector, strength) triples as numpy arrays, oldest first."""
        val = _value
        return [(val(a), val(m), val(s)) for a, m, s in zip(self.addresses, self.vectors, self.strengths)]


@dataclass
class HeadState:
    key: object
    action: ActionParams


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _tape(key, store: MemoryStore, *extra) -> ad.Tape:
    return ad._tape_of(key, *extra, *store.addresses, *store.strengths, *store.vectors)


def _sqdists(t: ad.Tape, key, store: MemoryStore) -> Node:
    if len(store) == 0:
        raise EmptyMemoryError("read from an empty memory")
    addr = ad.stack([ad.lift(t, a) for a in store.addresses], axis=-2)   # (..., N, 2)
    k = ad.lift(t, key)
    k = ad.reshape(k, k.shape[:-1] + (1, k.shape[-1]))
    return ad.sqdist(k, addr)                                             # (..., N)


def _strengths(t: ad.Tape, store: MemoryStore) -> Node:
    return ad.stack([ad.lift(t, s) for s in store.strengths], axis=-1)


def weights_invnorm(key, store: MemoryStore, eps: float = INVNORM_EPS) -> Node:
    """w(i) = S(i)/(d_i² + eps) / Σ_j 1/(d_j² + eps), d_i = |key - a(i)|."""
    t = _tape(key, store)
    inv = ad.reciprocal(_sqdists(t, key, store) + eps)
    norm = ad.reciprocal(ad.reduce_sum(inv, axis=-1, keepdims=True))
    return _strengths(t, store) * inv * norm


def weights_softmax(key, temperature, store: MemoryStore) -> Node:
    """w(i) = S(i) exp(-d_i²/T) / Σ_j exp(-d_j²/T)."""
    t = _tape(key, store, temperature)
    temp = ad.lift(t, temperature)
    if np.any(temp.value <= 0):
        raise ValueError("softmax temperature must be positive")
    d = _sqdists(t, key, store)
    if temp.value.ndim == d.value.ndim - 1:
        temp = ad.reshape(temp, temp.shape + (1,))
    logits = -(d * ad.reciprocal(temp))
    # the shift cancels between numerator and denominator, so it is held constant
    shift = logits.value.max(axis=-1, keepdims=True)
    e = ad.exp(logits - shift)
    norm = ad.reciprocal(ad.reduce_sum(e, axis=-1, keepdims=True))
    return _strengths(t, store) * e * norm


def read(store: MemoryStore, weights) -> Node:
    """ρ = Σ_j w(j) M(j)."""
    t = _tape(weights, store)
    w = ad.lift(t, weights)
    if w.shape[-1] != len(store):
        raise ValueError(f"{w.shape[-1]} weights for {len(store)} memory entries")
    mem = ad.stack([ad.lift(t, m) for m in store.vectors], axis=-2)      # (..., N, m)
    w = ad.reshape(w, w.shape + (1,))
    return ad.reduce_sum(w * mem, axis=-2)


def write(store: MemoryStore, key, raw_vector, strength) -> MemoryStore:
    """Append (key, tanh(raw_vector), strength); existing entries are untouched."""
    t = ad._tape_of(key, raw_vector, strength)
    vec = ad.tanh(ad.lift(t, raw_vector))
    if vec.shape[-1] != store.width:
        raise ValueError(f"memory width is {store.width}, got vector of size {vec.shape[-1]}")
    return MemoryStore(store.width,
                       store.addresses + [key],
                       store.vectors + [vec],
                       store.strengths + [strength])


def compute_key(head: HeadState, cand_key, gate_key, cand_action: ActionParams, gate_action,
                group: GroupKind = GroupKind.TRANSLATION,
                normalize: bool = False, norm_eps: float = 1e-6) -> tuple[Node, HeadState]:
    """Gate-mix the previous key and action with the candidates, then act.

        v = mix(v_prev, ṽ; h)   (optionally step-normalized)
        k̄ = g k̃ + (1 - g) k_prev
        k = v · k̄
    """
    group = GroupKind(group)
    if GroupKind(head.action.kind) is not group or GroupKind(cand_action.kind) is not group:
        raise ValueError("action kinds must match the memory's group")
    t = ad._tape_of(head.key, cand_key, gate_key, head.action.ab, cand_action.ab, gate_action)
    prev = ActionParams(ad.lift(t, head.action.ab), group)
    cand = ActionParams(ad.lift(t, cand_action.ab), group)
    v = interpolate_action(prev, cand, ad.lift(t, gate_action))
    if normalize:
        v = normalize_step(v, norm_eps)
    g = ad.lift(t, gate_key)
    k_bar = g * ad.lift(t, cand_key) + (1.0 - g) * ad.lift(t, head.key)
    k = act(v, k_bar)
    return k, HeadState(k, v)


def evict(store: MemoryStore, cap: int = 100, drop: int = 60) -> MemoryStore:
    """Once the store holds ``cap`` entries, discard the ``drop`` oldest."""
    if not cap > drop >= 0:
        raise ValueError("need cap > drop >= 0")
    if len(store) < cap:
        return store
    return MemoryStore(store.width, store.addresses[drop:], store.vectors[drop:], store.strengths[drop:])
