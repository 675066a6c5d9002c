"""Synthetic sequence tasks, their vocabularies, scoring, and independent oracles.

Numbers in the arithmetic tasks are written least-significant digit first
and zero padded.  Python-program answers are the decimal result with its
characters reversed, so a negative result ends in '-'.
"""
from __future__ import annotations

import ast
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

SOI, EOI, EOO = "<s>", "</s>", "<e>"
MARKERS = (SOI, EOI, EOO)

PERMUTATION_TASKS = ("copy", "reverse", "bigramFlip")
ARITHMETIC_TASKS = ("double", "addition")
PYTHON_TYPES = ("identity", "small_mult", "if_then_else", "var_subst",
                "addition_subtraction", "small_loop")
TASKS = PERMUTATION_TASKS + ARITHMETIC_TASKS + ("python",)

# (min train, max train, min test, max test); bigramFlip counts pairs
PAPER_RANGES = {
    "copy": (2, 64, 65, 128),
    "reverse": (2, 64, 65, 128),
    "bigramFlip": (2, 32, 33, 64),
    "double": (2, 40, 41, 80),
    "addition": (2, 16, 17, 32),
    "python": (2, 4, 4, 4),
}
DESK_RANGES = {
    "copy": (2, 16, 17, 32),
    "reverse": (2, 16, 17, 32),
    "bigramFlip": (2, 8, 9, 16),
    "double": (2, 10, 11, 20),
    "addition": (2, 8, 9, 16),
    "python": (2, 4, 4, 4),
}


@dataclass(frozen=True)
class TaskInstance:
    input: tuple[str, ...]
    target: tuple[str, ...]

    @property
    def answer(self) -> tuple[str, ...]:
        return self.target[:-1]


class Vocab:
    def __init__(self, symbols: Sequence[str]):
        self.symbols = list(symbols)
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ValueError("duplicate vocabulary symbols")

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, s):
        return s in self.index

    def encode(self, seq: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.index[s] for s in seq], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"unknown symbol {e.args[0]!r}") from None

    def decode(self, ids) -> tuple[str, ...]:
        return tuple(self.symbols[int(i)] for i in ids)

    @property
    def soi(self) -> int:
        return self.index[SOI]

    @property
    def eoi(self) -> int:
        return self.index[EOI]

    @property
    def eoo(self) -> int:
        return self.index[EOO]


PERMUTATION_SYMBOLS = tuple(str(i) for i in range(128 - len(MARKERS)))
ARITHMETIC_SYMBOLS = tuple("0123456789") + ("-",)
PYTHON_SYMBOLS = tuple("0123456789abcdefghijklmnopqrstuvwxyz()*+-=<>;: ")


def vocab_for(task: str) -> Vocab:
    if task in PERMUTATION_TASKS:
        return Vocab(PERMUTATION_SYMBOLS + MARKERS)
    if task in ARITHMETIC_TASKS:
        return Vocab(ARITHMETIC_SYMBOLS + MARKERS)
    if task == "python":
        return Vocab(PYTHON_SYMBOLS + MARKERS)
    raise ValueError(f"unknown task {task!r}")


def task_ranges(task: str, scale: str = "desk") -> tuple[int, int, int, int]:
    table = {"desk": DESK_RANGES, "paper": PAPER_RANGES}[scale]
    return table[task]


def length_range(task: str, multiplier: int = 1, scale: str = "desk") -> tuple[int, int]:
    """Length range at a multiple of the maximum training length.

    1 gives the training range; m >= 2 gives ((m-1)·max + 1, m·max), which for
    m = 2 is exactly the held-out test range.
    """
    lo, hi, _, _ = task_ranges(task, scale)
    if multiplier == 1:
        return lo, hi
    if multiplier < 1:
        raise ValueError("multiplier must be >= 1")
    return (multiplier - 1) * hi + 1, multiplier * hi


# ---------------------------------------------------------------------------
# generators


def permutation_target(task: str, seq: Sequence[str]) -> tuple[str, ...]:
    seq = tuple(seq)
    if task == "copy":
        return seq
    if task == "reverse":
        return seq[::-1]
    if task == "bigramFlip":
        if len(seq) % 2:
            raise ValueError("bigramFlip needs an even-length input")
        out = []
        for i in range(0, len(seq), 2):
            out += [seq[i + 1], seq[i]]
        return tuple(out)
    raise ValueError(f"not a permutation task: {task!r}")


def gen_permutation(task: str, k: int, rng: np.random.Generator,
                    symbols: Sequence[str] = PERMUTATION_SYMBOLS) -> TaskInstance:
    if k < 1:
        raise ValueError("k must be >= 1")
    n = 2 * k if task == "bigramFlip" else k
    seq = tuple(symbols[i] for i in rng.integers(0, len(symbols), size=n))
    return TaskInstance(seq, permutation_target(task, seq) + (EOO,))


def lsd_digits(n: int, width: int) -> str:
    """``n`` zero padded to ``width`` digits, least significant digit first."""
    s = str(n)
    if n < 0 or len(s) > width:
        raise ValueError(f"{n} does not fit in {width} digits")
    return s.zfill(width)[::-1]


def double_instance(x: int, k: int) -> TaskInstance:
    return TaskInstance(tuple(lsd_digits(x, k)), tuple(lsd_digits(2 * x, k + 1)) + (EOO,))


def addition_instance(x: int, y: int, k: int) -> TaskInstance:
    xs, ys = lsd_digits(x, k), lsd_digits(y, k)
    inp = tuple(c for pair in zip(xs, ys) for c in pair)
    return TaskInstance(inp, tuple(lsd_digits(x + y, k + 1)) + (EOO,))


def _uniform_int(rng: np.random.Generator, lo: int, hi: int) -> int:
    """Uniform integer in [lo, hi) for arbitrarily large bounds."""
    span = hi - lo
    if span <= 2 ** 62:
        return lo + int(rng.integers(0, span))
    # assemble enough random 62-bit limbs, rejection-sample to stay uniform
    bits = span.bit_length()
    while True:
        r = 0
        for _ in range((bits + 61) // 62):
            r = (r << 62) | int(rng.integers(0, 2 ** 62))
        r >>= (62 * ((bits + 61) // 62) - bits)
        if r < span:
            return lo + r


def gen_arithmetic(task: str, k: int, rng: np.random.Generator) -> TaskInstance:
    if k < 1:
        raise ValueError("k must be >= 1")
    if task == "double":
        return double_instance(_uniform_int(rng, 0, 10 ** k), k)
    if task == "addition":
        return addition_instance(_uniform_int(rng, 0, 10 ** k), _uniform_int(rng, 0, 10 ** k), k)
    raise ValueError(f"not an arithmetic task: {task!r}")


def reversed_answer(value: int) -> tuple[str, ...]:
    return tuple(str(value)[::-1])


def _operand(rng: np.random.Generator, digits: int) -> int:
    lo = 0 if digits == 1 else 10 ** (digits - 1)
    return int(rng.integers(lo, 10 ** digits))


_VAR_NAMES = "abcdefghijklmnopqrstuvwyz"   # 'x' is the loop variable


def python_program(program_type: str, digits: int, rng: np.random.Generator) -> tuple[str, int]:
    """Program text and its integer result."""
    if digits < 1:
        raise ValueError("digits must be >= 1")
    a, b = _operand(rng, digits), _operand(rng, digits)
    if program_type == "identity":
        return f"print({a})", a
    if program_type == "small_mult":
        s = int(rng.integers(1, 4 * digits + 1))
        if rng.random() < 0.5:
            return f"print(({s}*{a}))", s * a
        return f"print(({a}*{s}))", a * s
    if program_type == "if_then_else":
        c, d = _operand(rng, digits), _operand(rng, digits)
        op = ">" if rng.random() < 0.5 else "<"
        cond = c > d if op == ">" else c < d
        return f"print(({a} if {c}{op}{d} else {b}))", a if cond else b
    if program_type == "var_subst":
        v = _VAR_NAMES[int(rng.integers(len(_VAR_NAMES)))]
        op = "+" if rng.random() < 0.5 else "-"
        return f"{v}={a};print(({v}{op}{b}))", a + b if op == "+" else a - b
    if program_type == "addition_subtraction":
        op = "+" if rng.random() < 0.5 else "-"
        return f"print(({a}{op}{b}))", a + b if op == "+" else a - b
    if program_type == "small_loop":
        v = _VAR_NAMES[int(rng.integers(len(_VAR_NAMES)))]
        op = "+" if rng.random() < 0.5 else "-"
        return f"{v}={a};for x in range(10):{v}{op}={b};print({v})", a + 10 * b if op == "+" else a - 10 * b
    raise ValueError(f"unknown program type {program_type!r}")


def gen_python(program_type: str, digits: int, rng: np.random.Generator) -> TaskInstance:
    text, value = python_program(program_type, digits, rng)
    return TaskInstance(tuple(text), reversed_answer(value) + (EOO,))


def generate(task: str, k: int, rng: np.random.Generator) -> TaskInstance:
    """One instance of ``task`` at length/digit parameter ``k``."""
    if task in PERMUTATION_TASKS:
        return gen_permutation(task, k, rng)
    if task in ARITHMETIC_TASKS:
        return gen_arithmetic(task, k, rng)
    if task == "python":
        ptype = PYTHON_TYPES[int(rng.integers(len(PYTHON_TYPES)))]
        return gen_python(ptype, k, rng)
    raise ValueError(f"unknown task {task!r}")


def answer_length(task: str, k: int) -> int | None:
    """Response steps (answer + EOO) for fixed-shape tasks; None for python."""
    if task in ("copy", "reverse"):
        return k + 1
    if task == "bigramFlip":
        return 2 * k + 1
    if task in ARITHMETIC_TASKS:
        return k + 2
    return None


# ---------------------------------------------------------------------------
# oracles


class MalformedProgram(ValueError):
    pass


def _eval_expr(node, env):
    if isinstance(node, ast.Constant) and type(node.value) is int:
        return node.value
    if isinstance(node, ast.Name):
        if node.id not in env:
            raise MalformedProgram(f"unbound variable {node.id!r}")
        return env[node.id]
    if isinstance(node, ast.BinOp):
        left, right = _eval_expr(node.left, env), _eval_expr(node.right, env)
        if isinstance(node.op, ast.Add):
            return left + right
        if isinstance(node.op, ast.Sub):
            return left - right
        if isinstance(node.op, ast.Mult):
            return left * right
        raise MalformedProgram(f"operator {type(node.op).__name__} not allowed")
    if isinstance(node, ast.IfExp):
        return _eval_expr(node.body if _eval_cond(node.test, env) else node.orelse, env)
    raise MalformedProgram(f"expression {type(node).__name__} not allowed")


def _eval_cond(node, env) -> bool:
    if not (isinstance(node, ast.Compare) and len(node.ops) == 1):
        raise MalformedProgram("condition must be a single comparison")
    left, right = _eval_expr(node.left, env), _eval_expr(node.comparators[0], env)
    if isinstance(node.ops[0], ast.Gt):
        return left > right
    if isinstance(node.ops[0], ast.Lt):
        return left < right
    raise MalformedProgram("comparison must be < or >")


def _exec(stmts, env, out):
    for st in stmts:
        if isinstance(st, ast.Assign) and len(st.targets) == 1 and isinstance(st.targets[0], ast.Name):
            env[st.targets[0].id] = _eval_expr(st.value, env)
        elif isinstance(st, ast.AugAssign) and isinstance(st.target, ast.Name):
            cur = _eval_expr(st.target, env)
            rhs = _eval_expr(st.value, env)
            if isinstance(st.op, ast.Add):
                env[st.target.id] = cur + rhs
            elif isinstance(st.op, ast.Sub):
                env[st.target.id] = cur - rhs
            else:
                raise MalformedProgram("only += and -= allowed")
        elif isinstance(st, ast.For):
            it = st.iter
            if not (isinstance(st.target, ast.Name) and isinstance(it, ast.Call)
                    and isinstance(it.func, ast.Name) and it.func.id == "range" and len(it.args) == 1):
                raise MalformedProgram("loops must be 'for <name> in range(<n>)'")
            for i in range(_eval_expr(it.args[0], env)):
                env[st.target.id] = i
                _exec(st.body, env, out)
        elif (isinstance(st, ast.Expr) and isinstance(st.value, ast.Call)
              and isinstance(st.value.func, ast.Name) and st.value.func.id == "print"
              and len(st.value.args) == 1):
            out.append(_eval_expr(st.value.args[0], env))
        else:
            raise MalformedProgram(f"statement {type(st).__name__} not allowed")


_LOOP = re.compile(r"for (\w+) in range\((\w+)\):([^;]*)")


def _to_lines(text: str) -> str:
    # a loop header on one line cannot be followed by ';' in real syntax; the
    # generated programs loop only the first statement after the colon
    lines = []
    for part in text.split(";"):
        m = _LOOP.fullmatch(part)
        if m:
            lines.append(f"for {m.group(1)} in range({m.group(2)}):")
            lines.append("    " + m.group(3))
        else:
            lines.append(part)
    return "\n".join(lines)


def eval_program(text: str) -> int:
    """Interpret one of the six program forms and return the printed integer."""
    try:
        tree = ast.parse(_to_lines(text))
    except SyntaxError as e:
        raise MalformedProgram(str(e)) from None
    out: list[int] = []
    _exec(tree.body, {}, out)
    if len(out) != 1 or not tree.body or not isinstance(tree.body[-1], ast.Expr):
        raise MalformedProgram("program must end with exactly one print")
    return out[0]


def oracle_eval(task: str, inp: Sequence[str]) -> tuple[str, ...]:
    """Recompute the answer (without EOO) directly from the input symbols."""
    inp = tuple(inp)
    if task in PERMUTATION_TASKS:
        if task == "copy":
            return inp
        if task == "reverse":
            return tuple(reversed(inp))
        return tuple(inp[i ^ 1] for i in range(len(inp)))
    if task == "double":
        k = len(inp)
        x = int("".join(reversed(inp)))
        return tuple(format(x * 2, f"0{k + 1}d")[::-1])
    if task == "addition":
        k = len(inp) // 2
        x = int("".join(reversed(inp[0::2])))
        y = int("".join(reversed(inp[1::2])))
        return tuple(format(x + y, f"0{k + 1}d")[::-1])
    if task == "python":
        return tuple(str(eval_program("".join(inp)))[::-1])
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# scoring


def score(predictions: Sequence[Sequence], targets: Sequence[Sequence]) -> tuple[float, float]:
    """(fine, coarse): fraction of correct positions, fraction of fully correct instances."""
    if len(predictions) != len(targets):
        raise ValueError("batch sizes differ")
    if not targets:
        raise ValueError("empty batch")
    right = total = perfect = 0
    for p, t in zip(predictions, targets):
        p, t = list(p), list(t)
        if len(p) != len(t):
            raise ValueError(f"prediction length {len(p)} != target length {len(t)}")
        hits = sum(a == b for a, b in zip(p, t))
        right += hits
        total += len(t)
        perfect += hits == len(t)
    return right / total, perfect / len(targets)
