"""LSTM cell without peepholes, plus a plain stacked variant for the baseline.

    i = σ(W_xi x + W_hi h + b_i)
    f = σ(W_xf x + W_hf h + b_f)
    c' = f c + i tanh(W_xc x + W_hc h + b_c)
    o = σ(W_xo x + W_ho h + b_o)
    h' = o tanh(c'),   y = h'

Weights are stored as (in, out) so that batched inputs of shape (B, in)
multiply from the left.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Node

GATES = ("i", "f", "c", "o")
PARAM_NAMES = tuple(
    [f"W_x{g}" for g in GATES] + [f"W_h{g}" for g in GATES] + [f"b_{g}" for g in GATES]
)


@dataclass
class LSTMParams:
    W_xi: object
    W_hi: object
    W_xf: object
    W_hf: object
    W_xc: object
    W_hc: object
    W_xo: object
    W_ho: object
    b_i: object
    b_f: object
    b_c: object
    b_o: object

    @property
    def input_dim(self) -> int:
        return _shape(self.W_xi)[0]

    @property
    def recurrent_dim(self) -> int:
        return _shape(self.W_hi)[0]

    @property
    def hidden_dim(self) -> int:
        return _shape(self.W_xi)[1]

    def validate(self) -> None:
        n_in, n_rec, n_h = self.input_dim, self.recurrent_dim, self.hidden_dim
        for g in GATES:
            for name, want in ((f"W_x{g}", (n_in, n_h)), (f"W_h{g}", (n_rec, n_h)), (f"b_{g}", (n_h,))):
                got = _shape(getattr(self, name))
                if got != want:
                    raise ValueError(f"LSTM param {name} has shape {got}, expected {want}")

    @classmethod
    def from_mapping(cls, m: Mapping[str, object], prefix: str = "") -> "LSTMParams":
        return cls(**{f.name: m[prefix + f.name] for f in fields(cls)})

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


@dataclass
class LSTMState:
    c: object
    h: object


def _shape(x) -> tuple[int, ...]:
    return x.shape if isinstance(x, Node) else np.shape(x)


def init_lstm_params(input_dim: int, hidden_dim: int, rng: np.random.Generator,
                     init_range: float = 0.08, recurrent_dim: int | None = None,
                     forget_bias: float = 1.0) -> dict[str, np.ndarray]:
    """Uniform(-r, r) weights and biases, forget-gate bias set to ``forget_bias``.

    ``recurrent_dim`` defaults to ``hidden_dim``; a memory controller passes
    ``hidden_dim + memory_width`` because the reading rides alongside h.
    """
    n_rec = hidden_dim if recurrent_dim is None else recurrent_dim
    out = {}
    for g in GATES:
        out[f"W_x{g}"] = rng.uniform(-init_range, init_range, (input_dim, hidden_dim))
        out[f"W_h{g}"] = rng.uniform(-init_range, init_range, (n_rec, hidden_dim))
    for g in GATES:
        if g == "f":
            out[f"b_{g}"] = np.full(hidden_dim, forget_bias)
        else:
            out[f"b_{g}"] = rng.uniform(-init_range, init_range, hidden_dim)
    return out


def lstm_step(x, state: LSTMState, params: LSTMParams) -> tuple[Node, LSTMState]:
    """One LSTM transition; returns (y, new state) with y = new h."""
    xs, hs = _shape(x), _shape(state.h)
    if xs[-1] != params.input_dim:
        raise ValueError(f"input dim {xs[-1]} != {params.input_dim}")
    if hs[-1] != params.recurrent_dim:
        raise ValueError(f"recurrent dim {hs[-1]} != {params.recurrent_dim}")
    if _shape(state.c)[-1] != params.hidden_dim:
        raise ValueError(f"cell dim {_shape(state.c)[-1]} != {params.hidden_dim}")
    t = ad._tape_of(x, state.c, state.h, *[v for _, v in params.items()])
    x, c, h = ad.lift(t, x), ad.lift(t, state.c), ad.lift(t, state.h)
    p = {k: ad.lift(t, v) for k, v in params.items()}

    def pre(g):
        return x @ p[f"W_x{g}"] + h @ p[f"W_h{g}"] + p[f"b_{g}"]

    i = ad.sigmoid(pre("i"))
    f = ad.sigmoid(pre("f"))
    c_new = f * c + i * ad.tanh(pre("c"))
    o = ad.sigmoid(pre("o"))
    h_new = o * ad.tanh(c_new)
    return h_new, LSTMState(c_new, h_new)


def stacked_lstm_step(x, states: list[LSTMState], params: list[LSTMParams]) -> tuple[Node, list[LSTMState]]:
    if not params:
        raise ValueError("stacked LSTM needs at least one layer")
    if len(states) != len(params):
        raise ValueError("one state per layer required")
    out, new_states = x, []
    for st, p in zip(states, params):
        out, st = lstm_step(out, st, p)
        new_states.append(st)
    return out, new_states
