"""Command-line entry point: ``lantm {train,eval,gradcheck,gen,trace-plot}``.

Train config files are JSON objects with these keys (all optional)::

    {"task": "copy", "model": "lantm-invnorm", "seed": 1, "out_dir": "runs/copy",
     "model_config": {<LANTMConfig / BaselineConfig fields>},
     "train": {<TrainConfig fields except task>}}

Unknown keys anywhere are rejected.  Command-line flags override file values.
Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from . import tasks, trace
from .checkpoint import load_checkpoint, save_checkpoint
from .machine import LANTMConfig, init_params, run_batch
from .training import TrainConfig, default_model, default_train, evaluate, train_task

OUTPUT_ENV = "LANTM_OUTPUT_DIR"
MODELS = ("lantm-invnorm", "lantm-softmax", "lstm-baseline")
RUN_KEYS = {"task", "model", "seed", "out_dir", "model_config", "train"}

log = logging.getLogger("lantm")


class UsageError(ValueError):
    pass


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _load_json(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return data


def resolve_train_config(args) -> dict[str, Any]:
    """Merge the config file with flag overrides and validate everything up front."""
    raw = _load_json(args.config)
    unknown = set(raw) - RUN_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    task = args.task or raw.get("task", "copy")
    model = args.model or raw.get("model", "lantm-invnorm")
    if model not in MODELS:
        raise UsageError(f"unknown model {model!r}; choose from {MODELS}")
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    train = dict(raw.get("train", {}))
    if "task" in train:
        raise UsageError("set the task at top level, not inside 'train'")
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("trace_every", "trace_every"),
                      ("stop_at_coarse", "stop_at_coarse")):
        if getattr(args, flag) is not None:
            train[key] = getattr(args, flag)
    model_cfg = default_model(task, model, **raw.get("model_config", {}))
    for key, value in default_train(task, model_cfg).items():
        train.setdefault(key, value)
    train_cfg = TrainConfig.from_dict({"task": task, **train})
    out = Path(args.out or raw.get("out_dir") or default_output_dir())
    return {"task": task, "model": model, "seed": seed, "model_cfg": model_cfg,
            "train_cfg": train_cfg, "out_dir": out}


def write_trace(path: Path, params, model_cfg, task: str, k: int, rng) -> Path:
    vocab = tasks.vocab_for(task)
    inst = tasks.generate(task, k, rng)
    x = vocab.encode(inst.input)[None]
    y = vocab.encode(inst.target)[None]
    res = run_batch(params, model_cfg, x, y.shape[1], vocab.soi, vocab.eoi, y, trace=True)
    trace.save(trace.capture(res, vocab, y), path)
    return path


def cmd_train(args) -> int:
    run = resolve_train_config(args)
    out: Path = run["out_dir"]
    out.mkdir(parents=True, exist_ok=True)
    tcfg, mcfg, seed = run["train_cfg"], run["model_cfg"], run["seed"]
    (out / "config.json").write_text(json.dumps(
        {"task": run["task"], "model": run["model"], "seed": seed,
         "model_config": mcfg.to_dict(), "train": tcfg.to_dict()}, indent=2, sort_keys=True) + "\n")

    def hook(epoch, params):
        # its own generator so tracing never perturbs the training stream
        rng = np.random.default_rng([seed, epoch])
        write_trace(out / "traces" / f"ep{epoch:04d}.trace", params, mcfg, tcfg.task, tcfg.lengths[1], rng)

    res = train_task(tcfg, mcfg, seed, out_dir=out, trace_hook=hook)
    extra = {"task": tcfg.task, "train_lengths": list(tcfg.lengths), "scale": tcfg.scale,
             "best_epoch": res.best_epoch}
    save_checkpoint(out / "best.ckpt", res.best_params, mcfg, seed, extra)
    save_checkpoint(out / "final.ckpt", res.params, mcfg, seed, extra)
    print(f"fine={res.best_fine:.6f} coarse={res.best_coarse:.6f}")
    return 0


def cmd_eval(args) -> int:
    params, mcfg, header = load_checkpoint(args.checkpoint)
    extra = header.get("extra", {})
    task = args.task or extra.get("task")
    if task is None:
        raise UsageError("checkpoint does not record a task; pass --task")
    vocab = tasks.vocab_for(task)
    if mcfg.vocab_size != len(vocab):
        raise UsageError(f"checkpoint vocabulary ({mcfg.vocab_size}) does not fit task {task!r} ({len(vocab)})")
    lengths = extra.get("train_lengths") if extra.get("task") == task else None
    tcfg = TrainConfig(task=task, train_lengths=lengths, test_multiplier=args.multiplier,
                       scale=extra.get("scale", "desk"))
    fine, coarse = evaluate(params, mcfg, task, tcfg.test_lengths, args.batches, args.batch_size, args.seed)
    print(f"fine={fine:.6f} coarse={coarse:.6f}")
    return 0


GRADCHECK_KEYS = {"episode", "len", "hidden", "width", "embed", "scheme", "coords", "seed", "tol"}


def cmd_gradcheck(args) -> int:
    opts = {"episode": "copy", "len": 3, "hidden": 8, "width": 4, "embed": 7, "scheme": "invnorm",
            "coords": 200, "seed": 0, "tol": 1e-4}
    raw = _load_json(args.config)
    unknown = set(raw) - GRADCHECK_KEYS
    if unknown:
        raise UsageError(f"unknown gradcheck keys: {sorted(unknown)}")
    opts.update(raw)
    opts.update({k: v for k, v in vars(args).items() if k in GRADCHECK_KEYS and v is not None})
    task = opts["episode"]
    if task == "python":
        raise UsageError("gradcheck episodes must have a fixed answer length")
    vocab = tasks.vocab_for(task)
    cfg = LANTMConfig(vocab_size=len(vocab), embed_dim=opts["embed"], hidden=opts["hidden"],
                      memory_width=opts["width"], scheme=opts["scheme"])
    rng = np.random.default_rng(opts["seed"])
    params = init_params(cfg, rng)
    inst = tasks.generate(task, opts["len"], rng)
    x, y = vocab.encode(inst.input)[None], vocab.encode(inst.target)[None]

    def builder(p):
        return run_batch(p, cfg, x, y.shape[1], vocab.soi, vocab.eoi, y).loss

    rep = ad.gradcheck(builder, params, n_coords=opts["coords"], rng=rng)
    ok = rep.max_rel_err < opts["tol"]
    print(f"coords={len(rep)} max_rel_err={rep.max_rel_err:.3e} {'ok' if ok else 'FAIL'}")
    return 0 if ok else 2


def _render_symbols(task: str, symbols) -> str:
    symbols = [s for s in symbols if s != tasks.EOO]
    return " ".join(symbols) if task in tasks.PERMUTATION_TASKS else "".join(symbols)


def cmd_gen(args) -> int:
    if args.task not in tasks.TASKS:
        raise UsageError(f"unknown task {args.task!r}")
    if args.k < 1 or args.n < 0:
        raise UsageError("--k must be >= 1 and --n >= 0")
    rng = np.random.default_rng(args.seed)
    lines = []
    for _ in range(args.n):
        if args.task == "python" and args.type:
            inst = tasks.gen_python(args.type, args.k, rng)
        else:
            inst = tasks.generate(args.task, args.k, rng)
        lines.append(f"{_render_symbols(args.task, inst.input)}\t{_render_symbols(args.task, inst.target)}")
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_trace_plot(args) -> int:
    records = trace.load(args.trace)
    if not records:
        raise UsageError(f"{args.trace}: empty trace")
    out = Path(args.out) if args.out else Path(args.trace).with_suffix(".svg")
    trace.render(records, out)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lantm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write metrics/checkpoints")
    t.add_argument("--config")
    t.add_argument("--task", choices=tasks.TASKS)
    t.add_argument("--model", choices=MODELS)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--trace-every", dest="trace_every", type=int)
    t.add_argument("--stop-at-coarse", dest="stop_at_coarse", type=float)
    t.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./runs)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint at a length multiplier")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", choices=tasks.TASKS)
    e.add_argument("--multiplier", type=int, default=2, choices=(1, 2, 4, 5, 8))
    e.add_argument("--batches", type=int, default=100)
    e.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of a small episode")
    g.add_argument("--config")
    g.add_argument("--episode", choices=[t for t in tasks.TASKS if t != "python"])
    g.add_argument("--len", type=int)
    g.add_argument("--hidden", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--embed", type=int)
    g.add_argument("--scheme", choices=("invnorm", "softmax"))
    g.add_argument("--coords", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--tol", type=float)
    g.set_defaults(func=cmd_gradcheck)

    n = sub.add_parser("gen", help="emit task instances as 'input<TAB>target' lines")
    n.add_argument("--task", required=True)
    n.add_argument("--k", type=int, required=True)
    n.add_argument("--n", type=int, default=1)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--type", choices=tasks.PYTHON_TYPES)
    n.add_argument("--out")
    n.set_defaults(func=cmd_gen)

    r = sub.add_parser("trace-plot", help="render a trace file to SVG")
    r.add_argument("trace")
    r.add_argument("--out")
    r.set_defaults(func=cmd_trace_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, TypeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures: divergence, numerical errors
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
