"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

The lines are collected in ``RESULTS`` and printed at the end of the session
(see conftest.py).  Criteria 5-7 train real models and take tens of minutes.
"""
import math
import time

import numpy as np
import pytest

from lantm import autodiff as ad
from lantm import machine, tasks, trace, training
from lantm.liegroup import ActionParams, GroupKind, act, compose, identity
from lantm.machine import LANTMConfig
from lantm.memory import MemoryStore, weights_invnorm, weights_softmax, write

RESULTS: dict[int, str] = {}
N_CASES = 10_000
COPY_EPOCHS = 400
ADDITION_EPOCHS = 1000
REVERSE_EPOCHS = 500


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


# --- 1: gradient fidelity -------------------------------------------------


def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    v = tasks.vocab_for("copy")
    cfg = LANTMConfig(vocab_size=len(v), hidden=8, memory_width=4, scheme="invnorm")
    rng = np.random.default_rng(2024)
    params = machine.init_params(cfg, rng)
    inst = tasks.generate("copy", 3, rng)
    x, y = v.encode(inst.input)[None], v.encode(inst.target)[None]

    def builder(p):
        return machine.run_batch(p, cfg, x, y.shape[1], v.soi, v.eoi, y).loss

    rep = ad.gradcheck(builder, params, n_coords=200, step=1e-5, rng=rng)
    secs = time.perf_counter() - t0
    record(1, len(rep) >= 200 and rep.max_rel_err < 1e-4 and secs < 60,
           f"coords={len(rep)} max_rel_err={rep.max_rel_err:.2e} seconds={secs:.1f}")


# --- 2: weight-scheme algebra --------------------------------------------


def _random_stores(rng, unit_strength: bool):
    """Yield (key, store, sqdists, strengths) batches totalling N_CASES cases."""
    sizes = np.arange(1, 9)
    per = N_CASES // len(sizes)
    for n in sizes:
        key = rng.normal(size=(per, 2)) * 2
        addrs = rng.normal(size=(n, per, 2)) * 3
        strengths = np.ones((n, per)) if unit_strength else rng.uniform(0, 1, size=(n, per))
        store = MemoryStore(1)
        for a, s in zip(addrs, strengths):
            store = write(store, a, np.zeros((per, 1)), s)
        d = ((key[None] - addrs) ** 2).sum(-1).T            # (per, n)
        yield key, store, d, strengths.T


def test_criterion_2_weight_scheme_algebra():
    rng = np.random.default_rng(7)
    failures = []
    checked = 0
    for key, store, d, s in _random_stores(rng, unit_strength=False):
        inv = weights_invnorm(key, store).value
        sm = weights_softmax(key, rng.uniform(0.05, 5.0, size=key.shape[0]), store).value
        if inv.min() < 0 or sm.min() < 0:
            failures.append("negative weight")
        # InvNorm: strength-adjusted weight strictly decreases with distance
        r = inv / s
        closer = d[:, :, None] < d[:, None, :]
        if np.any(closer & (r[:, :, None] < r[:, None, :])):
            failures.append("invnorm monotonicity")
        # SoftMax T -> 0+: all mass (scaled by strength) on the nearest entry
        srt = np.sort(d, axis=1)
        gap = srt[:, 1] - srt[:, 0] if d.shape[1] > 1 else np.ones(d.shape[0])
        t_small = np.maximum(gap, 1e-12) * 1e-3
        w0 = weights_softmax(key, t_small, store).value
        expect = np.zeros_like(d)
        nearest = d.argmin(axis=1)
        expect[np.arange(d.shape[0]), nearest] = s[np.arange(d.shape[0]), nearest]
        if np.max(np.abs(w0 - expect)) > 1e-9:
            failures.append("softmax concentration")
        # SoftMax T -> inf: S(i)/N
        w_inf = weights_softmax(key, np.full(d.shape[0], 1e13), store).value
        if np.max(np.abs(w_inf - s / d.shape[1])) > 1e-9:
            failures.append("softmax uniform limit")
        checked += d.shape[0]
    worst_sum = 0.0
    for key, store, d, s in _random_stores(rng, unit_strength=True):
        for w in (weights_invnorm(key, store).value,
                  weights_softmax(key, rng.uniform(0.05, 5.0, size=key.shape[0]), store).value):
            worst_sum = max(worst_sum, float(np.max(np.abs(w.sum(axis=1) - 1))))
    if worst_sum > 1e-9:
        failures.append("unit sum")
    record(2, not failures and checked >= N_CASES,
           f"cases={checked} per property; unit-sum max err={worst_sum:.1e}; failures={sorted(set(failures))}")


# --- 3: group laws -------------------------------------------------------


def _rel(a, b):
    return float(np.max(np.linalg.norm(a - b, axis=-1) / np.maximum(np.linalg.norm(b, axis=-1), 1e-300)))


def test_criterion_3_group_laws():
    rng = np.random.default_rng(11)
    worst = {}
    for kind in (GroupKind.TRANSLATION, GroupKind.ROTATION):
        v = rng.normal(size=(N_CASES, 2))
        w = rng.normal(size=(N_CASES, 2))
        k = rng.normal(size=(N_CASES, 2)) * 5
        e = np.broadcast_to(identity(kind).value, (N_CASES, 2))
        worst[f"{kind.value}-identity"] = _rel(act(ActionParams(e, kind), k).value, k)
        lhs = act(ActionParams(v, kind), act(ActionParams(w, kind), k).value).value
        rhs = act(compose(ActionParams(v, kind), ActionParams(w, kind)), k).value
        worst[f"{kind.value}-composition"] = _rel(lhs, rhs)
        if kind is GroupKind.ROTATION:
            n_in = np.linalg.norm(k, axis=-1)
            n_out = np.linalg.norm(act(ActionParams(v, kind), k).value, axis=-1)
            worst["rotation-norm"] = float(np.max(np.abs(n_out - n_in) / n_in))
    ok = all(err < 1e-12 for err in worst.values())
    record(3, ok, "triples=%d worst=%s" % (N_CASES, {k: f"{v:.1e}" for k, v in worst.items()}))


# --- 4: generators vs oracles --------------------------------------------


def test_criterion_4_generator_oracle_equivalence():
    rng = np.random.default_rng(5)
    mismatches = {}
    for task in ("copy", "reverse", "bigramFlip", "double", "addition"):
        lo, hi = tasks.length_range(task, 1)
        bad = 0
        for _ in range(N_CASES):
            inst = tasks.generate(task, int(rng.integers(lo, 2 * hi + 1)), rng)
            bad += tasks.oracle_eval(task, inst.input) != inst.answer
        mismatches[task] = bad
    for ptype in tasks.PYTHON_TYPES:
        bad = 0
        for _ in range(N_CASES):
            inst = tasks.gen_python(ptype, int(rng.integers(1, 5)), rng)
            bad += tasks.oracle_eval("python", inst.input) != inst.answer
        mismatches[f"python/{ptype}"] = bad
    table = (tasks.double_instance(829, 3) == tasks.TaskInstance(tuple("928"), tuple("8561") + (tasks.EOO,))
             and tasks.addition_instance(94, 423, 3).input == tuple("439204")
             and tasks.oracle_eval("addition", tuple("439204")) == tuple("7150")
             and tasks.oracle_eval("double", tuple("928")) == tuple("8561"))
    record(4, table and not any(mismatches.values()),
           f"instances per task={N_CASES}; table examples={'ok' if table else 'MISMATCH'}; mismatches={mismatches}")


# --- 5-7: desk-scale training --------------------------------------------


TRAINED: dict[str, tuple] = {}


def train_and_score(task, model, seed, epochs, stop_at=None, train_lengths=None, final_batches=100):
    """Train one seed, then score the best checkpoint on 100 fresh 2x batches."""
    mcfg = training.default_model(task, model)
    tcfg = training.TrainConfig(task=task, epochs=epochs, lr=training.default_lr(mcfg, task),
                                train_lengths=train_lengths, test_batches=10, stop_at_coarse=stop_at)
    res = training.train_task(tcfg, mcfg, seed)
    fine, coarse = training.evaluate(res.best_params, mcfg, task, tcfg.test_lengths, final_batches,
                                     tcfg.batch_size, seed=10_000 + seed)
    prev = TRAINED.get((task, model))
    if prev is None or coarse > prev[2]:
        TRAINED[(task, model)] = (res.best_params, mcfg, coarse)
    return fine, coarse, res.best_epoch


def best_of_seeds(task, model, epochs, threshold=None, seeds=(1, 2, 3), **kw):
    runs = []
    for seed in seeds:
        runs.append((seed,) + train_and_score(task, model, seed, epochs, **kw))
        if threshold is not None and runs[-1][2] >= threshold:
            break
    return max(r[2] for r in runs), runs


def _fmt(runs):
    return "; ".join(f"seed {s}: fine={f:.3f} coarse={c:.3f} best_epoch={e}" for s, f, c, e in runs)


@pytest.mark.slow
def test_criterion_5_copy_desk_scale():
    best, runs = best_of_seeds("copy", "lantm-invnorm", epochs=COPY_EPOCHS, threshold=0.95, stop_at=1.0)
    record(5, best >= 0.95, f"train 2-16, test 17-32, best coarse={best:.3f} ({_fmt(runs)})")


@pytest.mark.slow
def test_criterion_6_addition_desk_scale():
    best, runs = best_of_seeds("addition", "lantm-invnorm", epochs=ADDITION_EPOCHS, threshold=0.90,
                               stop_at=1.0, train_lengths=(2, 8))
    record(6, best >= 0.90, f"train 2-8 digits, test 9-16, best coarse={best:.3f} ({_fmt(runs)})")


@pytest.mark.slow
def test_criterion_7_reverse_scheme_ordering():
    inv, inv_runs = best_of_seeds("reverse", "lantm-invnorm", epochs=REVERSE_EPOCHS, stop_at=1.0)
    soft, soft_runs = best_of_seeds("reverse", "lantm-softmax", epochs=REVERSE_EPOCHS, stop_at=1.0)
    gap = inv - soft
    record(7, gap >= 0.30, f"invnorm best coarse={inv:.3f} softmax best coarse={soft:.3f} gap={gap:+.3f} "
                           f"[invnorm: {_fmt(inv_runs)}] [softmax: {_fmt(soft_runs)}]")


def trained_copy():
    if ("copy", "lantm-invnorm") not in TRAINED:
        train_and_score("copy", "lantm-invnorm", 1, COPY_EPOCHS, stop_at=1.0, final_batches=5)
    return TRAINED[("copy", "lantm-invnorm")]


def _copy_trace(length=24, seed=0):
    params, cfg, _ = trained_copy()
    v = tasks.vocab_for("copy")
    inst = tasks.generate("copy", length, np.random.default_rng(seed))
    x, y = v.encode(inst.input)[None], v.encode(inst.target)[None]
    res = machine.run_batch(params, cfg, x, y.shape[1], v.soi, v.eoi, y, trace=True)
    return trace.capture(res, v, y)


@pytest.mark.slow
def test_trained_copy_writes_are_collinear():
    recs = _copy_trace()
    pts = np.array([r.write_key for r in recs if r.write_key is not None])
    centred = pts - pts.mean(axis=0)
    _, sv, vt = np.linalg.svd(centred, full_matrices=False)
    resid = np.abs(centred @ vt[1])
    along = centred @ vt[0]
    length = along.max() - along.min()
    assert resid.max() < 0.1 * length, (resid.max(), length)


@pytest.mark.slow
def test_trained_copy_trace_renders(tmp_path):
    out = trace.render(_copy_trace(), tmp_path / "copy.svg")
    assert out.stat().st_size > 0


# --- 8: protocol invariants ----------------------------------------------


def test_criterion_8_protocol_invariants():
    rng = np.random.default_rng(3)
    v = tasks.vocab_for("copy")
    problems = []
    cases = 0
    while cases < 1000:
        lock = bool(rng.integers(2))
        evicting = bool(rng.integers(2))
        cfg = LANTMConfig(vocab_size=len(v), embed_dim=3, hidden=4, memory_width=2,
                          scheme=("invnorm", "softmax")[int(rng.integers(2))], write_lock=lock,
                          eviction=(100, 60) if evicting else None)
        params = machine.init_params(cfg, rng)
        b = 25
        n_in = int(rng.integers(0, 110 if evicting else 20))
        ans = int(rng.integers(1, 10))
        x = rng.integers(0, 125, size=(b, n_in))
        y = rng.integers(0, len(v), size=(b, ans))
        res = machine.run_batch(params, cfg, x, ans, v.soi, v.eoi, y, trace=True)
        on_loss = res.loss.value.tobytes()
        off = machine.run_batch(params, cfg, x, ans, v.soi, v.eoi, y, trace=False)
        if off.loss.value.tobytes() != on_loss or off.predictions.tobytes() != res.predictions.tobytes():
            problems.append("tracing changed the episode")
        steps = 1 + n_in + ans
        if len(res.steps) != steps or len(res.logits) != ans or res.predictions.shape != (b, ans):
            problems.append("episode length")
        size = 0
        for info, phase in zip(res.steps, res.phases):
            writes = phase == "input" or not lock
            if writes:
                size += 1
                if evicting and size >= 100:
                    size -= 60
            if (info.write_key is None) == writes:
                problems.append("write lock")
            if info.store_size != size:
                problems.append("store size")
            if evicting and info.store_size >= 100:
                problems.append("eviction")
        cases += b
    record(8, not problems, f"episodes={cases} problems={sorted(set(problems))}")


# --- 9: determinism ------------------------------------------------------


def test_criterion_9_determinism():
    def run():
        mcfg = training.default_model("copy")
        tcfg = training.TrainConfig(task="copy", epochs=5, test_every=5, test_batches=2)
        res = training.train_task(tcfg, mcfg, seed=123)
        return [{k: r[k] for k in training.METRIC_COLUMNS if k != "wall_seconds"} for r in res.metrics]

    a, b = run(), run()
    same = repr(a) == repr(b)
    record(9, same and len(a) == 5, f"epochs={len(a)} identical={same} last={a[-1]}")
