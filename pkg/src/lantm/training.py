"""Loss, optimizers, learning-rate schedules, curriculum, and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import tasks
from .machine import BaselineConfig, LANTMConfig, init_params, run_batch

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "loss", "lr", "fine", "coarse", "wall_seconds")


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# loss


def nll_loss(logits, targets) -> ad.Node:
    """Mean over positions of -log softmax(logits)[target].

    ``logits`` is a (P, V) node (or a list of (V,) / (B, V) nodes, one per position).
    """
    if isinstance(logits, (list, tuple)):
        logits = ad.stack(list(logits), axis=-2 if logits[0].value.ndim > 1 else 0)
    targets = np.asarray(targets, dtype=np.int64)
    total = ad.softmax_cross_entropy(logits, targets)
    return total * (1.0 / targets.size)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str = "rmsprop"
    lr: float = 0.02
    decay: float = 0.95
    momentum: float = 0.0
    eps: float = 1e-8
    sq: dict[str, np.ndarray] = field(default_factory=dict)
    mom: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("rmsprop", "adagrad"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def rmsprop_step(opt: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """s ← d·s + (1-d)·g²;  v ← μ·v - lr·g/√(s+ε);  p ← p + v."""
    out = {}
    for name, p in params.items():
        g = grads[name]
        s = opt.sq.get(name)
        s = (1.0 - opt.decay) * g * g if s is None else opt.decay * s + (1.0 - opt.decay) * g * g
        v = opt.mom.get(name)
        step = -opt.lr * g / np.sqrt(s + opt.eps)
        v = step if v is None else opt.momentum * v + step
        opt.sq[name], opt.mom[name] = s, v
        out[name] = p + v
    return out


def adagrad_step(opt: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """s ← s + g²;  p ← p - lr·g/√(s+ε)."""
    out = {}
    for name, p in params.items():
        g = grads[name]
        s = opt.sq.get(name)
        s = g * g if s is None else s + g * g
        opt.sq[name] = s
        out[name] = p - opt.lr * g / np.sqrt(s + opt.eps)
    return out


def optimizer_step(opt: OptimizerState, params, grads):
    return (rmsprop_step if opt.kind == "rmsprop" else adagrad_step)(opt, params, grads)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    f = max_norm / norm
    return {k: g * f for k, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# schedules


@dataclass
class Schedule:
    """Learning-rate adjustment rules.

    * ``plateau_halving``: after ``start`` epochs, halve when the best training
      loss has not improved for ``patience`` epochs.
    * ``factor_on_regress``: multiply by ``factor`` whenever a validation score
      falls below the highest of the previous ``window`` scores.
    * ``halve_on_val_regress``: halve whenever a validation score falls below
      the previous one.

    Validation values are scores, so higher is better.
    * ``none``: constant.
    """

    kind: str = "plateau_halving"
    start: int = 100
    patience: int = 30
    factor: float = 0.5
    window: int = 4
    best_loss: float = math.inf
    best_epoch: int = 0
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("plateau_halving", "factor_on_regress", "halve_on_val_regress", "none"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if not 0 < self.factor < 1:
            raise ValueError("schedule factor must lie in (0, 1)")

    def on_epoch(self, epoch: int, loss: float, lr: float) -> float:
        if self.kind != "plateau_halving":
            return lr
        if loss < self.best_loss:
            self.best_loss, self.best_epoch = loss, epoch
        elif epoch > self.start and epoch - self.best_epoch >= self.patience:
            self.best_epoch = epoch
            return lr * self.factor
        return lr

    def on_validation(self, value: float, lr: float) -> float:
        if self.kind == "factor_on_regress":
            prev = self.history[-self.window:]
            self.history.append(value)
            if prev and value < max(prev):
                return lr * self.factor
        elif self.kind == "halve_on_val_regress":
            prev = self.history[-1] if self.history else None
            self.history.append(value)
            if prev is not None and value < prev:
                return lr * 0.5
        return lr


# ---------------------------------------------------------------------------
# curriculum and batches


def curriculum_mixed(lo: int, hi: int, rng: np.random.Generator) -> int:
    """Difficulty drawn uniformly from {lo, ..., hi}, independently per call."""
    if lo > hi:
        raise ValueError("empty difficulty range")
    return int(rng.integers(lo, hi + 1))


@dataclass
class Group:
    inputs: np.ndarray       # (B, L) ids
    targets: np.ndarray      # (B, A) ids
    answer_len: int


def make_batch(task: str, vocab: tasks.Vocab, lengths: tuple[int, int], batch_size: int,
               rng: np.random.Generator, shared_length: bool = True) -> list[Group]:
    """Draw instances and group them into same-shaped sub-batches.

    With ``shared_length`` one length is drawn for the whole batch, otherwise
    one per instance.
    """
    lo, hi = lengths
    if shared_length:
        k = curriculum_mixed(lo, hi, rng)
        insts = [tasks.generate(task, k, rng) for _ in range(batch_size)]
    else:
        insts = [tasks.generate(task, curriculum_mixed(lo, hi, rng), rng) for _ in range(batch_size)]
    buckets: dict[tuple[int, int], list[tasks.TaskInstance]] = defaultdict(list)
    for inst in insts:
        buckets[(len(inst.input), len(inst.target))].append(inst)
    return [Group(np.stack([vocab.encode(i.input) for i in group]),
                  np.stack([vocab.encode(i.target) for i in group]), a)
            for (_, a), group in buckets.items()]


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    task: str = "copy"
    scale: str = "desk"
    train_lengths: tuple[int, int] | None = None
    test_multiplier: int = 2
    epochs: int = 2000
    batches_per_epoch: int = 10
    batch_size: int = 32
    optimizer: str = "rmsprop"
    lr: float = 0.02
    decay: float = 0.95
    momentum: float = 0.0
    eps: float = 1e-8
    schedule: str = "plateau_halving"
    schedule_start: int = 100
    schedule_patience: int = 30
    schedule_factor: float = 0.5
    clip_norm: float | None = 10.0
    test_every: int = 20
    test_batches: int = 100
    stop_at_coarse: float | None = None
    shared_length: bool = True
    trace_every: int | None = None

    def __post_init__(self):
        if self.task not in tasks.TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.scale not in ("desk", "paper"):
            raise ValueError("scale must be 'desk' or 'paper'")
        if self.train_lengths is not None:
            self.train_lengths = (int(self.train_lengths[0]), int(self.train_lengths[1]))
        if min(self.epochs, self.batches_per_epoch, self.batch_size, self.test_every, self.test_batches) < 1:
            raise ValueError("counts must be positive")

    @property
    def lengths(self) -> tuple[int, int]:
        if self.train_lengths is not None:
            return self.train_lengths
        return tasks.length_range(self.task, 1, self.scale)

    @property
    def test_lengths(self) -> tuple[int, int]:
        if self.task == "python":
            return (self.lengths[1], self.lengths[1])
        if self.test_multiplier == 1:
            return self.lengths
        hi = self.lengths[1]
        return (self.test_multiplier - 1) * hi + 1, self.test_multiplier * hi

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("train_lengths") is not None:
            d["train_lengths"] = tuple(d["train_lengths"])
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        if d["train_lengths"] is not None:
            d["train_lengths"] = list(d["train_lengths"])
        return d


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    best_fine: float
    best_coarse: float
    best_epoch: int
    metrics: list[dict[str, float]]


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, int]:
    """Independent generators for initialisation and training data, plus a test seed."""
    init_ss, data_ss, test_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(data_ss),
            int(test_ss.generate_state(1)[0]))


def batch_gradients(params, model_cfg, groups: Sequence[Group], vocab: tasks.Vocab) -> tuple[float, dict[str, np.ndarray]]:
    """Mean NLL per response symbol over all groups, and its gradient."""
    total = sum(g.targets.size for g in groups)
    loss, grads = 0.0, None
    for g in groups:
        res = run_batch(params, model_cfg, g.inputs, g.answer_len, vocab.soi, vocab.eoi, g.targets)
        w = g.targets.size / total
        gr = res.tape.backward(res.loss)
        loss += w * res.loss_value
        grads = {k: w * v for k, v in gr.items()} if grads is None else {k: grads[k] + w * v for k, v in gr.items()}
    return loss, grads


def evaluate(params, model_cfg, task: str, lengths: tuple[int, int], n_batches: int = 100,
             batch_size: int = 32, seed: int = 0, shared_length: bool = True) -> tuple[float, float]:
    """(fine, coarse) over ``n_batches`` × ``batch_size`` fresh instances."""
    vocab = tasks.vocab_for(task)
    rng = np.random.default_rng(seed)
    preds, targs = [], []
    for _ in range(n_batches):
        for g in make_batch(task, vocab, lengths, batch_size, rng, shared_length):
            res = run_batch(params, model_cfg, g.inputs, g.answer_len, vocab.soi, vocab.eoi)
            preds.extend(res.predictions.tolist())
            targs.extend(g.targets.tolist())
    return tasks.score(preds, targs)


def train_task(train_cfg: TrainConfig, model_cfg, seed: int,
               out_dir: str | Path | None = None,
               on_epoch: Callable[[dict[str, float]], None] | None = None,
               trace_hook: Callable[[int, dict[str, np.ndarray]], None] | None = None) -> TrainResult:
    """Train from scratch; keep the parameters with the best periodic test score.

    If ``out_dir`` is given, ``metrics.csv`` is (re)written there after every epoch.
    """
    vocab = tasks.vocab_for(train_cfg.task)
    if model_cfg.vocab_size != len(vocab):
        raise ValueError(f"model vocab {model_cfg.vocab_size} != task vocab {len(vocab)}")
    init_rng, data_rng, test_seed = seed_streams(seed)
    params = init_params(model_cfg, init_rng)
    opt = OptimizerState(train_cfg.optimizer, train_cfg.lr, train_cfg.decay, train_cfg.momentum, train_cfg.eps)
    sched = Schedule(train_cfg.schedule, train_cfg.schedule_start, train_cfg.schedule_patience,
                     train_cfg.schedule_factor)
    metrics: list[dict[str, float]] = []
    best = (-1.0, -1.0)
    best_params, best_epoch = {k: v.copy() for k, v in params.items()}, 0
    t0 = time.perf_counter()
    out_path = Path(out_dir) if out_dir is not None else None

    for epoch in range(1, train_cfg.epochs + 1):
        losses = []
        for _ in range(train_cfg.batches_per_epoch):
            groups = make_batch(train_cfg.task, vocab, train_cfg.lengths, train_cfg.batch_size,
                                data_rng, train_cfg.shared_length)
            loss, grads = batch_gradients(params, model_cfg, groups, vocab)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(f"non-finite loss/gradient at epoch {epoch} (loss={loss})")
            grads, _ = clip_global_norm(grads, train_cfg.clip_norm)
            params = optimizer_step(opt, params, grads)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        opt.lr = sched.on_epoch(epoch, mean_loss, opt.lr)

        row = {"epoch": epoch, "loss": mean_loss, "lr": opt.lr, "fine": float("nan"),
               "coarse": float("nan"), "wall_seconds": time.perf_counter() - t0}
        if epoch % train_cfg.test_every == 0 or epoch == train_cfg.epochs:
            fine, coarse = evaluate(params, model_cfg, train_cfg.task, train_cfg.test_lengths,
                                    train_cfg.test_batches, train_cfg.batch_size, test_seed,
                                    train_cfg.shared_length)
            row.update(fine=fine, coarse=coarse)
            opt.lr = sched.on_validation(fine, opt.lr)
            if (coarse, fine) > best:
                best = (coarse, fine)
                best_params, best_epoch = {k: v.copy() for k, v in params.items()}, epoch
            log.info("epoch %d loss %.4f lr %.3g fine %.4f coarse %.4f", epoch, mean_loss, opt.lr, fine, coarse)
        metrics.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if trace_hook is not None and train_cfg.trace_every and epoch % train_cfg.trace_every == 0:
            trace_hook(epoch, params)
        if out_path is not None:
            write_metrics(out_path / "metrics.csv", metrics)
        if train_cfg.stop_at_coarse is not None and best[0] >= train_cfg.stop_at_coarse:
            break

    return TrainResult(params, best_params, best[1], best[0], best_epoch, metrics)


def write_metrics(path: str | Path, rows: Sequence[dict[str, float]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if isinstance(r[k], float) and math.isnan(r[k]) else repr(r[k])) for k in METRIC_COLUMNS})


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    with Path(path).open() as fh:
        return [{k: (float(v) if v != "" else float("nan")) for k, v in r.items()} for r in csv.DictReader(fh)]


def default_lr(model_cfg, task: str) -> float:
    """Learning rates per model and task (addition trains at half the usual rate)."""
    if isinstance(model_cfg, BaselineConfig):
        return 0.0002
    if task == "python":
        return 0.002
    return 0.01 if task == "addition" else 0.02


def default_train(task: str, model_cfg) -> dict[str, Any]:
    """Training-config defaults that depend on the task and model family."""
    out: dict[str, Any] = {"lr": default_lr(model_cfg, task)}
    if isinstance(model_cfg, BaselineConfig):
        out.update(schedule="none", test_every=200)
    elif task == "python":
        out.update(schedule="factor_on_regress", schedule_factor=0.8)
    return out


def default_model(task: str, model: str = "lantm-invnorm", **overrides):
    """Per-task model sizes: controller 100 for bigramFlip, embedding 14 for addition."""
    vocab = len(tasks.vocab_for(task))
    if model == "lstm-baseline":
        embed = 64 if task in tasks.ARITHMETIC_TASKS else 7
        return BaselineConfig(vocab_size=vocab, embed_dim=embed, **overrides)
    scheme = {"lantm-invnorm": "invnorm", "lantm-softmax": "softmax"}.get(model)
    if scheme is None:
        raise ValueError(f"unknown model {model!r}")
    hidden = 100 if task == "bigramFlip" else 50
    embed = 14 if task == "addition" else 7
    if scheme == "softmax" and task == "double":
        embed = 14
    if scheme == "softmax" and task == "bigramFlip":
        embed = 10
    kw = dict(vocab_size=vocab, embed_dim=embed, hidden=hidden, memory_width=20, scheme=scheme)
    if task == "python":
        kw.update(embed_dim=100, hidden=128, memory_width=128, write_gate_bias=0.0, read_gate_bias=0.0,
                  normalize_steps=False, init_range=0.0008)
    kw.update(overrides)
    return LANTMConfig(**kw)
