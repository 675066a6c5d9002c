"""LANTM and stacked-LSTM baseline episodes under the encoder-decoder protocol.

An episode feeds ``<s>``, the input symbols, then ``</s>`` once per response
step.  Predictions are read off only at the response steps; the last target
is always the end-of-output marker.  Nothing the model emits is fed back.

Episodes are batched: a batch of B instances with identical input and answer
lengths runs as one vectorised episode whose values carry a leading B axis.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .liegroup import ActionParams, GroupKind
from .lstm import LSTMParams, LSTMState, init_lstm_params, lstm_step, stacked_lstm_step
from .memory import (HeadState, MemoryStore, compute_key, evict, read, weights_invnorm,
                     weights_softmax, write)


@dataclass
class LANTMConfig:
    vocab_size: int
    embed_dim: int = 7
    hidden: int = 50
    memory_width: int = 20
    group: str = "translation2d"
    scheme: str = "invnorm"
    write_gate_bias: float = -10.0
    read_gate_bias: float = -3.0
    normalize_steps: bool = True
    write_lock: bool = True
    eviction: tuple[int, int] | None = None
    init_range: float = 0.1
    embed_init: float = 1.0
    temperature_floor: float = 0.01
    step_eps: float = 1e-6
    invnorm_eps: float = 1e-9
    read_heads: int = 1
    write_heads: int = 1

    kind = "lantm"

    def __post_init__(self):
        if min(self.vocab_size, self.embed_dim, self.hidden, self.memory_width) <= 0:
            raise ValueError("dimensions must be positive")
        GroupKind(self.group)
        if self.scheme not in ("invnorm", "softmax"):
            raise ValueError(f"unknown weight scheme {self.scheme!r}")
        if self.read_heads != 1 or self.write_heads != 1:
            raise NotImplementedError("only one read and one write head are supported")
        if self.eviction is not None:
            cap, drop = self.eviction
            if not cap > drop >= 0:
                raise ValueError("eviction needs cap > drop >= 0")
            self.eviction = (int(cap), int(drop))
        if self.normalize_steps and GroupKind(self.group) is not GroupKind.TRANSLATION:
            raise ValueError("step normalization only applies to the translation group")

    @property
    def write_layout(self) -> list[tuple[str, int]]:
        return [("key", 2), ("g", 1), ("h", 1), ("action", 2), ("vector", self.memory_width), ("strength", 1)]

    @property
    def read_layout(self) -> list[tuple[str, int]]:
        out = [("key", 2), ("g", 1), ("h", 1), ("action", 2)]
        if self.scheme == "softmax":
            out.append(("temperature", 1))
        return out

    @property
    def instruction_size(self) -> int:
        return sum(n for _, n in self.write_layout) + sum(n for _, n in self.read_layout)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["kind"] = self.kind
        if d["eviction"] is not None:
            d["eviction"] = list(d["eviction"])
        return d


@dataclass
class BaselineConfig:
    vocab_size: int
    embed_dim: int = 7
    hidden: int = 256
    layers: int = 4
    init_range: float = 0.08
    embed_init: float = 1.0

    kind = "lstm-baseline"

    def __post_init__(self):
        if min(self.vocab_size, self.embed_dim, self.hidden, self.layers) <= 0:
            raise ValueError("dimensions must be positive")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["kind"] = self.kind
        return d


def config_from_dict(d: dict[str, Any]):
    d = dict(d)
    kind = d.pop("kind", "lantm")
    cls = {"lantm": LANTMConfig, "lstm-baseline": BaselineConfig}.get(kind)
    if cls is None:
        raise ValueError(f"unknown model kind {kind!r}")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown model config keys: {sorted(unknown)}")
    if d.get("eviction") is not None:
        d["eviction"] = tuple(d["eviction"])
    return cls(**d)


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg, rng: np.random.Generator) -> dict[str, np.ndarray]:
    if isinstance(cfg, BaselineConfig):
        return _init_baseline(cfg, rng)
    r = cfg.init_range
    p = {"embed.E": rng.uniform(-cfg.embed_init, cfg.embed_init, (cfg.vocab_size, cfg.embed_dim))}
    ctrl = init_lstm_params(cfg.embed_dim, cfg.hidden, rng, r, recurrent_dim=cfg.memory_width + cfg.hidden)
    p.update({f"controller.{k}": v for k, v in ctrl.items()})
    p["interface.W"] = rng.uniform(-r, r, (cfg.hidden, cfg.instruction_size))
    b = np.zeros(cfg.instruction_size)
    off = _offsets(cfg.write_layout)
    b[off["g"][0]] = cfg.write_gate_bias
    b[off["h"][0]] = cfg.write_gate_bias
    n_write = sum(n for _, n in cfg.write_layout)
    roff = _offsets(cfg.read_layout)
    b[n_write + roff["g"][0]] = cfg.read_gate_bias
    b[n_write + roff["h"][0]] = cfg.read_gate_bias
    p["interface.b"] = b
    p["output.W"] = rng.uniform(-r, r, (cfg.hidden, cfg.vocab_size))
    p["output.b"] = np.zeros(cfg.vocab_size)
    p["init.c"] = np.zeros(cfg.hidden)
    p["init.h"] = np.zeros(cfg.hidden)
    p["init.rho"] = np.zeros(cfg.memory_width)
    p["init.k_w"] = np.zeros(2)
    p["init.k_r"] = np.zeros(2)
    if GroupKind(cfg.group) is GroupKind.TRANSLATION:
        # a unit first step, shared by both heads, so writes start out on a line
        theta = rng.uniform(0, 2 * np.pi)
        v0 = np.array([np.cos(theta), np.sin(theta)])
    else:
        v0 = np.array([1.0, 0.0])
    p["init.v_w"] = v0.copy()
    p["init.v_r"] = v0.copy()
    return p


def _init_baseline(cfg: BaselineConfig, rng) -> dict[str, np.ndarray]:
    r = cfg.init_range
    p = {"embed.E": rng.uniform(-cfg.embed_init, cfg.embed_init, (cfg.vocab_size, cfg.embed_dim))}
    n_in = cfg.embed_dim
    for layer in range(cfg.layers):
        lp = init_lstm_params(n_in, cfg.hidden, rng, r)
        p.update({f"layer{layer}.{k}": v for k, v in lp.items()})
        n_in = cfg.hidden
    p["output.W"] = rng.uniform(-r, r, (cfg.hidden, cfg.vocab_size))
    p["output.b"] = np.zeros(cfg.vocab_size)
    for layer in range(cfg.layers):
        p[f"init.c{layer}"] = np.zeros(cfg.hidden)
        p[f"init.h{layer}"] = np.zeros(cfg.hidden)
    return p


def count_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def _offsets(layout) -> dict[str, tuple[int, int]]:
    out, start = {}, 0
    for name, n in layout:
        out[name] = (start, start + n)
        start += n
    return out


# ---------------------------------------------------------------------------
# episodes


@dataclass
class MachineState:
    lstm: LSTMState
    read_head: HeadState
    write_head: HeadState
    memory: MemoryStore
    reading: Node


@dataclass
class StepInfo:
    read_key: np.ndarray
    write_key: np.ndarray | None
    g_r: np.ndarray
    h_r: np.ndarray
    g_w: np.ndarray | None
    h_w: np.ndarray | None
    strength: np.ndarray | None
    temperature: np.ndarray | None
    store_size: int


@dataclass
class EpisodeResult:
    tape: Tape
    loss: Node | None
    logits: list[Node]                 # one (B, V) node per response step
    predictions: np.ndarray            # (B, answer_len) argmax ids
    steps: list[StepInfo] = field(default_factory=list)
    phases: list[str] = field(default_factory=list)

    @property
    def loss_value(self) -> float:
        return float(self.loss.value) if self.loss is not None else float("nan")


def episode_schedule(inputs: np.ndarray, answer_len: int, soi: int, eoi: int) -> tuple[np.ndarray, list[str]]:
    """Per-step input ids (B, T) and phase labels for the fixed-length protocol."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.int64))
    if answer_len < 1:
        raise ValueError("answer length must be >= 1 (it includes the end marker)")
    b = inputs.shape[0]
    seq = np.concatenate([np.full((b, 1), soi), inputs, np.full((b, answer_len), eoi)], axis=1)
    phases = ["input"] * (1 + inputs.shape[1]) + ["response"] * answer_len
    return seq, phases


def _bind(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, Node]:
    return {k: tape.parameter(k, v) for k, v in params.items()}


def _embed(p: dict[str, Node], ids: np.ndarray, vocab: int) -> Node:
    onehot = np.zeros((ids.shape[0], vocab))
    onehot[np.arange(ids.shape[0]), ids] = 1.0
    return ad.matmul(onehot, p["embed.E"])


def _batch(node: Node, b: int) -> Node:
    return ad.broadcast_to(node, (b,) + node.shape)


def initial_state(cfg: LANTMConfig, p: dict[str, Node], b: int) -> MachineState:
    kind = GroupKind(cfg.group)
    return MachineState(
        lstm=LSTMState(_batch(p["init.c"], b), _batch(p["init.h"], b)),
        read_head=HeadState(_batch(p["init.k_r"], b), ActionParams(_batch(p["init.v_r"], b), kind)),
        write_head=HeadState(_batch(p["init.k_w"], b), ActionParams(_batch(p["init.v_w"], b), kind)),
        memory=MemoryStore(cfg.memory_width),
        reading=_batch(p["init.rho"], b),
    )


def lantm_step(state: MachineState, x: Node, cfg: LANTMConfig, p: dict[str, Node],
               ctrl: LSTMParams, phase: str) -> tuple[Node, MachineState, StepInfo]:
    """One controller/memory transition; returns (logits, new state, step record)."""
    kind = GroupKind(cfg.group)
    # the previous reading rides on the hidden side of the LSTM: ρ ⊕ h
    rec = LSTMState(state.lstm.c, ad.concat([state.reading, state.lstm.h]))
    h, lstm_state = lstm_step(x, rec, ctrl)
    lstm_state = LSTMState(lstm_state.c, h)

    instr = h @ p["interface.W"] + p["interface.b"]
    n_write = sum(n for _, n in cfg.write_layout)
    w_part, r_part = ad.split(instr, [n_write, instr.shape[-1] - n_write])
    wf = dict(zip([n for n, _ in cfg.write_layout], ad.split(w_part, [n for _, n in cfg.write_layout])))
    rf = dict(zip([n for n, _ in cfg.read_layout], ad.split(r_part, [n for _, n in cfg.read_layout])))

    memory, write_head = state.memory, state.write_head
    info = dict(write_key=None, g_w=None, h_w=None, strength=None, temperature=None)
    if phase == "input" or not cfg.write_lock:
        g_w, h_w = ad.sigmoid(wf["g"]), ad.sigmoid(wf["h"])
        k_w, write_head = compute_key(write_head, ad.tanh(wf["key"]), g_w, ActionParams(wf["action"], kind),
                                      h_w, kind, cfg.normalize_steps, cfg.step_eps)
        strength = ad.reshape(ad.sigmoid(wf["strength"]), wf["strength"].shape[:-1])
        memory = write(memory, k_w, wf["vector"], strength)
        if cfg.eviction is not None:
            memory = evict(memory, *cfg.eviction)
        info.update(write_key=k_w.value, g_w=g_w.value[..., 0], h_w=h_w.value[..., 0], strength=strength.value)

    g_r, h_r = ad.sigmoid(rf["g"]), ad.sigmoid(rf["h"])
    k_r, read_head = compute_key(state.read_head, ad.tanh(rf["key"]), g_r, ActionParams(rf["action"], kind),
                                 h_r, kind, cfg.normalize_steps, cfg.step_eps)
    if cfg.scheme == "invnorm":
        weights = weights_invnorm(k_r, memory, cfg.invnorm_eps)
    else:
        temp = ad.reshape(ad.softplus(rf["temperature"]) + cfg.temperature_floor, rf["temperature"].shape[:-1])
        weights = weights_softmax(k_r, temp, memory)
        info["temperature"] = temp.value
    reading = read(memory, weights)

    logits = h @ p["output.W"] + p["output.b"]
    new_state = MachineState(lstm_state, read_head, write_head, memory, reading)
    step = StepInfo(read_key=k_r.value, g_r=g_r.value[..., 0], h_r=h_r.value[..., 0],
                    store_size=len(memory), **info)
    return logits, new_state, step


def _finish(tape, logits, targets, phases, steps) -> EpisodeResult:
    preds = np.stack([lg.value.argmax(axis=-1) for lg in logits], axis=1)
    loss = None
    if targets is not None:
        targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
        if targets.shape != preds.shape:
            raise ValueError(f"targets shape {targets.shape} != {preds.shape}")
        total = ad.softmax_cross_entropy(ad.stack(logits, axis=1), targets)
        loss = total * (1.0 / targets.size)
    return EpisodeResult(tape, loss, logits, preds, steps, phases)


def _check_ids(ids: np.ndarray, vocab: int) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError("symbol id outside the vocabulary")


def run_lantm(params: dict[str, np.ndarray], cfg: LANTMConfig, inputs, answer_len: int,
              soi: int, eoi: int, targets=None, check_finite: bool = False,
              trace: bool = False) -> EpisodeResult:
    """Run a batch of same-shaped episodes; ``loss`` is the mean NLL per response symbol.

    With ``trace`` the per-step head/gate/strength values are kept in ``steps``.
    """
    seq, phases = episode_schedule(inputs, answer_len, soi, eoi)
    _check_ids(seq, cfg.vocab_size)
    tape = Tape(check_finite)
    p = _bind(tape, params)
    ctrl = LSTMParams.from_mapping(p, "controller.")
    b = seq.shape[0]
    state = initial_state(cfg, p, b)
    logits, steps = [], []
    for t, phase in enumerate(phases):
        x = _embed(p, seq[:, t], cfg.vocab_size)
        lg, state, info = lantm_step(state, x, cfg, p, ctrl, phase)
        if trace:
            steps.append(info)
        if phase == "response":
            logits.append(lg)
    return _finish(tape, logits, targets, phases, steps)


def run_baseline(params: dict[str, np.ndarray], cfg: BaselineConfig, inputs, answer_len: int,
                 soi: int, eoi: int, targets=None, check_finite: bool = False,
                 trace: bool = False) -> EpisodeResult:
    seq, phases = episode_schedule(inputs, answer_len, soi, eoi)
    _check_ids(seq, cfg.vocab_size)
    tape = Tape(check_finite)
    p = _bind(tape, params)
    layers = [LSTMParams.from_mapping(p, f"layer{i}.") for i in range(cfg.layers)]
    b = seq.shape[0]
    states = [LSTMState(_batch(p[f"init.c{i}"], b), _batch(p[f"init.h{i}"], b)) for i in range(cfg.layers)]
    logits = []
    for t, phase in enumerate(phases):
        x = _embed(p, seq[:, t], cfg.vocab_size)
        y, states = stacked_lstm_step(x, states, layers)
        if phase == "response":
            logits.append(y @ p["output.W"] + p["output.b"])
    return _finish(tape, logits, targets, phases, [])


def run_batch(params, cfg, inputs, answer_len, soi, eoi, targets=None, check_finite=False,
              trace=False) -> EpisodeResult:
    runner = run_baseline if isinstance(cfg, BaselineConfig) else run_lantm
    return runner(params, cfg, inputs, answer_len, soi, eoi, targets, check_finite, trace)


def run_episode(params, cfg, vocab, input_symbols, answer_len: int, target_symbols=None,
                check_finite: bool = False, trace: bool = True) -> EpisodeResult:
    """Single-instance convenience wrapper taking symbol sequences."""
    ids = np.asarray(vocab.encode(input_symbols), dtype=np.int64).reshape(1, -1)
    targets = None if target_symbols is None else vocab.encode(target_symbols)[None, :]
    return run_batch(params, cfg, ids, answer_len, vocab.soi, vocab.eoi, targets, check_finite, trace)


def baseline_episode(params, cfg: BaselineConfig, vocab, input_symbols, answer_len: int, target_symbols=None):
    return run_episode(params, cfg, vocab, input_symbols, answer_len, target_symbols)
