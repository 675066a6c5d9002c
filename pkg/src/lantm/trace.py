"""Per-step episode traces: capture, JSONL storage, and SVG rendering.

A trace is a list of :class:`TraceRecord`, one per time step of a single
episode.  Capturing only reads values the forward pass already computed, so
tracing never changes the loss.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .machine import EpisodeResult
from .tasks import Vocab


@dataclass
class TraceRecord:
    step: int
    phase: str
    read_key: list[float] | None
    write_key: list[float] | None       # None while writes are locked
    g_r: float | None
    h_r: float | None
    g_w: float | None
    h_w: float | None
    strength: float | None
    temperature: float | None
    store_size: int
    predicted: str | None = None        # only response steps carry symbols
    target: str | None = None


def _item(x, i):
    if x is None:
        return None
    a = np.asarray(x)
    return a[i].tolist() if a.ndim > 1 else float(a[i])


def capture(result: EpisodeResult, vocab: Vocab, targets=None, index: int = 0) -> list[TraceRecord]:
    """Trace instance ``index`` of a batched episode run with ``trace=True``."""
    if not result.steps:
        raise ValueError("episode was run without tracing")
    n_input = result.phases.count("input")
    preds = vocab.decode(result.predictions[index])
    targs = None if targets is None else vocab.decode(np.atleast_2d(targets)[index])
    out = []
    for t, (info, phase) in enumerate(zip(result.steps, result.phases)):
        r = t - n_input
        out.append(TraceRecord(
            step=t, phase=phase,
            read_key=_item(info.read_key, index), write_key=_item(info.write_key, index),
            g_r=_item(info.g_r, index), h_r=_item(info.h_r, index),
            g_w=_item(info.g_w, index), h_w=_item(info.h_w, index),
            strength=_item(info.strength, index), temperature=_item(info.temperature, index),
            store_size=info.store_size,
            predicted=preds[r] if r >= 0 else None,
            target=targs[r] if (r >= 0 and targs is not None) else None,
        ))
    return out


def save(records: Sequence[TraceRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def load(path: str | Path) -> list[TraceRecord]:
    with Path(path).open() as fh:
        return [TraceRecord(**json.loads(line)) for line in fh if line.strip()]


def render(records: Sequence[TraceRecord], path: str | Path) -> Path:
    """Write a three-panel SVG: key-space plot, gate chart, answer strip.

    Writes are circles whose fill darkens with strength (zero strength is left
    unfilled); reads are small disks joined in time order.  Output is
    byte-stable for a given trace.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "lantm-trace", "svg.fonttype": "none"}):
        fig, (ax_k, ax_g, ax_a) = plt.subplots(
            3, 1, figsize=(7, 10), gridspec_kw={"height_ratios": [4, 2, 1]})

        writes = [r for r in records if r.write_key is not None]
        if writes:
            wk = np.array([r.write_key for r in writes])
            s = np.clip([r.strength or 0.0 for r in writes], 0.0, 1.0)
            faces = [(0.75, 0.1, 0.1, float(a)) for a in s]
            ax_k.scatter(wk[:, 0], wk[:, 1], s=120, facecolors=faces, edgecolors="firebrick",
                         linewidths=1.0, label="write")
        reads = [r for r in records if r.read_key is not None]
        if reads:
            rk = np.array([r.read_key for r in reads])
            ax_k.plot(rk[:, 0], rk[:, 1], "-", color="steelblue", linewidth=0.8)
            ax_k.scatter(rk[:, 0], rk[:, 1], s=16, color="steelblue", label="read", zorder=3)
        ax_k.set_aspect("equal", adjustable="datalim")
        ax_k.set_title("keys")
        ax_k.legend(loc="best", fontsize=8)

        steps = [r.step for r in records]
        for name, style in (("g_r", "-"), ("h_r", "--"), ("g_w", "-"), ("h_w", "--")):
            vals = [np.nan if getattr(r, name) is None else getattr(r, name) for r in records]
            ax_g.plot(steps, vals, style, label=name, linewidth=1.0)
        ax_g.set_ylim(-0.05, 1.05)
        ax_g.set_xlabel("step")
        ax_g.legend(loc="best", fontsize=8, ncol=4)

        resp = [r for r in records if r.phase == "response"]
        ax_a.set_xlim(-0.5, max(len(resp), 1) - 0.5)
        ax_a.set_ylim(-0.5, 1.5)
        ax_a.set_yticks([0, 1], ["pred", "target"])
        ax_a.set_xticks([])
        for i, r in enumerate(resp):
            bad = r.target is not None and r.predicted != r.target
            ax_a.text(i, 0, r.predicted or "", ha="center", va="center", fontsize=7,
                      color="crimson" if bad else "black")
            ax_a.text(i, 1, r.target or "", ha="center", va="center", fontsize=7)

        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
