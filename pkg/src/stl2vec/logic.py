"""STL syntax trees, concrete text syntax and robustness monitoring.

Formulae are immutable dataclasses.  Monitoring works on a batch of
trajectories sampled on a uniform grid: values of shape ``(M, T, n)`` with
grid step ``dt``.  Every sub-formula is evaluated at all grid times at once,
so a whole batch costs a handful of numpy operations per syntax node.

Concrete syntax (whitespace-insensitive)::

    formula := "true" | atom | "not" formula
             | ("F" | "G") "[" num "," num "]" formula
             | "(" formula ")"
             | "(" formula ("and" | "or") formula ")"
             | "(" formula "U" "[" num "," num "]" formula ")"
    atom    := "x" uint (">=" | "<=") num
"""
from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

GE = ">="
LE = "<="


class RobustnessMode(enum.Enum):
    RAW = "raw"
    NORMALIZED = "normalized"


class IntervalError(ValueError):
    """A temporal interval violates 0 <= a < b."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} at byte {offset}")


class HorizonError(ValueError):
    """A temporal window falls entirely beyond the end of the trajectory."""


class ParseError(ValueError):
    def __init__(self, message: str, offset: int, expected: frozenset[str] = frozenset()):
        self.offset = offset
        self.expected = expected
        detail = f" (expected one of: {', '.join(sorted(expected))})" if expected else ""
        super().__init__(f"{message} at byte {offset}{detail}")


def _check_interval(a: float, b: float) -> None:
    if not (math.isfinite(a) and math.isfinite(b)):
        raise IntervalError(f"interval bounds must be finite, got [{a}, {b}]")
    if a < 0:
        raise IntervalError(f"interval lower bound must be >= 0, got [{a}, {b}]")
    if a >= b:
        raise IntervalError(f"interval requires a < b, got [{a}, {b}]")


@dataclass(frozen=True)
class Truth:
    pass


@dataclass(frozen=True)
class Atom:
    var: int
    relation: str
    threshold: float

    def __post_init__(self):
        if self.relation not in (GE, LE):
            raise ValueError(f"relation must be '>=' or '<=', got {self.relation!r}")
        if int(self.var) != self.var or self.var < 0:
            raise ValueError(f"variable index must be a non-negative integer, got {self.var!r}")
        object.__setattr__(self, "var", int(self.var))
        object.__setattr__(self, "threshold", float(self.threshold))


@dataclass(frozen=True)
class Not:
    child: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Eventually:
    a: float
    b: float
    child: "Formula"

    def __post_init__(self):
        _check_interval(self.a, self.b)


@dataclass(frozen=True)
class Always:
    a: float
    b: float
    child: "Formula"

    def __post_init__(self):
        _check_interval(self.a, self.b)


@dataclass(frozen=True)
class Until:
    a: float
    b: float
    left: "Formula"
    right: "Formula"

    def __post_init__(self):
        _check_interval(self.a, self.b)


Formula = Union[Truth, Atom, Not, And, Or, Eventually, Always, Until]


def children(f: Formula) -> tuple[Formula, ...]:
    if isinstance(f, (Truth, Atom)):
        return ()
    if isinstance(f, (Not, Eventually, Always)):
        return (f.child,)
    if isinstance(f, (And, Or, Until)):
        return (f.left, f.right)
    raise TypeError(f"not a formula: {f!r}")


def walk(f: Formula) -> Iterator[Formula]:
    """Pre-order traversal."""
    stack = [f]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(children(node)))


def node_count(f: Formula) -> int:
    return sum(1 for _ in walk(f))


def variables(f: Formula) -> frozenset[int]:
    return frozenset(node.var for node in walk(f) if isinstance(node, Atom))


def _grid_offsets(a: float, b: float, dt: float) -> tuple[int, int]:
    """Grid offsets {ceil(a/dt), ..., floor(b/dt)} covered by [a, b]."""
    lo, hi = a / dt, b / dt
    # snap ratios that are integers up to roundoff (e.g. 0.3 / 0.1)
    if abs(lo - round(lo)) < 1e-9:
        lo = round(lo)
    if abs(hi - round(hi)) < 1e-9:
        hi = round(hi)
    return math.ceil(lo), math.floor(hi)


def horizon(f: Formula, dt: float = 1.0) -> int:
    """Number of grid steps after t that robustness at t can depend on."""
    if isinstance(f, (Truth, Atom)):
        return 0
    if isinstance(f, (Eventually, Always, Until)):
        _, hi = _grid_offsets(f.a, f.b, dt)
        return max(hi, 0) + max(horizon(c, dt) for c in children(f))
    return max(horizon(c, dt) for c in children(f))


# ---------------------------------------------------------------------------
# concrete syntax

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<rel>>=|<=)
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[()\[\],])
    """,
    re.VERBOSE,
)
_KEYWORDS = {"true", "not", "and", "or", "F", "G", "U"}
_VAR_RE = re.compile(r"x(\d+)\Z")


@dataclass
class _Token:
    kind: str  # 'num', 'rel', 'var', keyword text, punctuation text, or 'eof'
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    byte_offset = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", byte_offset)
        chunk = m.group()
        kind = m.lastgroup
        if kind == "word":
            if chunk in _KEYWORDS:
                kind = chunk
            elif _VAR_RE.match(chunk):
                kind = "var"
            else:
                raise ParseError(f"unknown identifier {chunk!r}", byte_offset,
                                 frozenset({"variable", "true", "not", "F", "G"}))
        elif kind == "punct":
            kind = chunk
        if kind != "ws":
            tokens.append(_Token(kind, chunk, byte_offset))
        byte_offset += len(chunk.encode("utf-8"))
        pos = m.end()
    tokens.append(_Token("eof", "", byte_offset))
    return tokens


_FORMULA_START = frozenset({"true", "variable", "not", "F", "G", "("})


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def expect(self, *kinds: str) -> _Token:
        tok = self.tok
        if tok.kind not in kinds:
            found = "end of input" if tok.kind == "eof" else repr(tok.text)
            raise ParseError(f"unexpected {found}", tok.offset, frozenset(kinds))
        self.i += 1
        return tok

    def number(self) -> float:
        return float(self.expect("num").text)

    def interval(self) -> tuple[float, float, int]:
        start = self.expect("[").offset
        a = self.number()
        self.expect(",")
        b = self.number()
        self.expect("]")
        if a < 0 or a >= b:
            raise IntervalError(f"invalid interval [{a}, {b}]: need 0 <= a < b", start)
        return a, b, start

    def formula(self) -> Formula:
        tok = self.tok
        if tok.kind == "true":
            self.i += 1
            return Truth()
        if tok.kind == "var":
            self.i += 1
            var = int(_VAR_RE.match(tok.text).group(1))
            rel = self.expect("rel").text
            return Atom(var, rel, self.number())
        if tok.kind == "not":
            self.i += 1
            return Not(self.formula())
        if tok.kind in ("F", "G"):
            self.i += 1
            a, b, _ = self.interval()
            child = self.formula()
            return Eventually(a, b, child) if tok.kind == "F" else Always(a, b, child)
        if tok.kind == "(":
            self.i += 1
            left = self.formula()
            op = self.tok.kind
            if op == ")":
                self.i += 1
                return left
            if op in ("and", "or"):
                self.i += 1
                right = self.formula()
                self.expect(")")
                return And(left, right) if op == "and" else Or(left, right)
            if op == "U":
                self.i += 1
                a, b, _ = self.interval()
                right = self.formula()
                self.expect(")")
                return Until(a, b, left, right)
            self.expect(")", "and", "or", "U")
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        raise ParseError(f"unexpected {found}", tok.offset, _FORMULA_START)


def parse(text: str) -> Formula:
    """Parse one formula; raises ParseError (a ValueError) on bad input."""
    p = _Parser(text)
    f = p.formula()
    p.expect("eof")
    return f


def _fmt_num(x: float) -> str:
    x = float(x)
    if x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def _wrap(f: Formula) -> str:
    s = format_formula(f)
    return f"({s})" if isinstance(f, Atom) else s


def format_formula(f: Formula) -> str:
    if isinstance(f, Truth):
        return "true"
    if isinstance(f, Atom):
        return f"x{f.var} {f.relation} {_fmt_num(f.threshold)}"
    if isinstance(f, Not):
        return f"not {_wrap(f.child)}"
    if isinstance(f, And):
        return f"({_wrap(f.left)} and {_wrap(f.right)})"
    if isinstance(f, Or):
        return f"({_wrap(f.left)} or {_wrap(f.right)})"
    if isinstance(f, Eventually):
        return f"F[{_fmt_num(f.a)},{_fmt_num(f.b)}] {_wrap(f.child)}"
    if isinstance(f, Always):
        return f"G[{_fmt_num(f.a)},{_fmt_num(f.b)}] {_wrap(f.child)}"
    if isinstance(f, Until):
        return f"({_wrap(f.left)} U[{_fmt_num(f.a)},{_fmt_num(f.b)}] {_wrap(f.right)})"
    raise TypeError(f"not a formula: {f!r}")


def read_formulae(path) -> list[Formula]:
    """Read a formula file: one formula per line, '#' starts a comment."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            try:
                out.append(parse(body))
            except ParseError as exc:
                raise ParseError(f"line {lineno}: {exc}", exc.offset, exc.expected) from None
            except IntervalError as exc:
                raise IntervalError(f"line {lineno}: {exc}") from None
    return out


def write_formulae(path, formulae, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for f in formulae:
            fh.write(format_formula(f) + "\n")


# ---------------------------------------------------------------------------
# robustness


def _mode(mode) -> RobustnessMode:
    return mode if isinstance(mode, RobustnessMode) else RobustnessMode(str(mode).lower())


def _window_extreme(sig: np.ndarray, lo: int, hi: int, reduce) -> np.ndarray:
    """reduce(sig[t+lo .. t+hi]) for every t, clamped at the last sample; NaN if empty."""
    length = sig.shape[1]
    out = np.full_like(sig, np.nan)
    if lo >= length or hi < lo:
        return out
    out[:, : length - lo] = sig[:, lo:]
    for k in range(lo + 1, min(hi, length - 1) + 1):
        view = out[:, : length - k]
        reduce(view, sig[:, k:], out=view)
    return out


def _until(left: np.ndarray, right: np.ndarray, lo: int, hi: int) -> np.ndarray:
    length = left.shape[1]
    out = np.full_like(left, np.nan)
    if lo >= length or hi < lo:
        return out
    running = left.copy()  # min of left over [t, t+k]
    for k in range(0, min(hi, length - 1) + 1):
        n = length - k
        if k > 0:
            np.minimum(running[:, :n], left[:, k:], out=running[:, :n])
        if k < lo:
            continue
        cand = np.minimum(right[:, k:], running[:, :n])
        if k == lo:
            out[:, :n] = cand
        else:
            np.maximum(out[:, :n], cand, out=out[:, :n])
    return out


def _signal(f: Formula, cols, dt: float, normalized: bool) -> np.ndarray:
    """Robustness of f at every grid time; cols[i] is the (M, L) signal of x_i."""
    if isinstance(f, Atom):
        x = cols[f.var]
        v = x - f.threshold if f.relation == GE else f.threshold - x
        return np.tanh(v, out=v) if normalized else v
    if isinstance(f, Truth):
        return np.full(cols[0].shape, 1.0 if normalized else np.inf)
    if isinstance(f, Not):
        return np.negative(_signal(f.child, cols, dt, normalized))
    if isinstance(f, (And, Or)):
        left = _signal(f.left, cols, dt, normalized)
        right = _signal(f.right, cols, dt, normalized)
        return np.minimum(left, right, out=left) if isinstance(f, And) else np.maximum(left, right, out=left)
    if isinstance(f, (Eventually, Always)):
        lo, hi = _grid_offsets(f.a, f.b, dt)
        child = _signal(f.child, cols, dt, normalized)
        return _window_extreme(child, lo, hi, np.maximum if isinstance(f, Eventually) else np.minimum)
    if isinstance(f, Until):
        lo, hi = _grid_offsets(f.a, f.b, dt)
        return _until(_signal(f.left, cols, dt, normalized), _signal(f.right, cols, dt, normalized), lo, hi)
    raise TypeError(f"not a formula: {f!r}")


def _batch_values(xi, dt: float | None) -> tuple[np.ndarray, float]:
    """Accept a Trajectory, a TrajectoryBatch or raw arrays; return ((M, T, n), dt)."""
    if hasattr(xi, "values") and hasattr(xi, "dt"):
        values, step = np.asarray(xi.values, dtype=float), float(xi.dt)
    else:
        values, step = np.asarray(xi, dtype=float), 1.0 if dt is None else float(dt)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim == 2:
        values = values[None]
    if values.ndim != 3:
        raise ValueError(f"expected trajectory values of shape (M, T, n), got {values.shape}")
    return values, step


def robustness_batch(f: Formula, xi, t: int = 0, mode=RobustnessMode.NORMALIZED,
                     dt: float | None = None, columns=None) -> np.ndarray:
    """Robustness of f at grid index t for every trajectory in the batch.

    ``columns`` optionally supplies the per-variable (M, T) signals already
    split out of ``xi``, which saves the transpose when monitoring many
    formulae against the same batch.
    """
    values, step = _batch_values(xi, dt)
    m, length, n = values.shape
    bad = [v for v in variables(f) if v >= n]
    if bad:
        raise IndexError(f"formula uses variable x{max(bad)} but trajectories have dimension {n}")
    if not 0 <= t < length:
        raise IndexError(f"time index {t} outside trajectory of length {length}")
    stop = min(length, t + horizon(f, step) + 1)
    if columns is None:
        columns = [values[:, :, i] for i in range(n)]
    cols = [np.ascontiguousarray(c[:, t:stop]) for c in columns] if n else [np.zeros((m, stop - t))]
    out = _signal(f, cols, step, _mode(mode) is RobustnessMode.NORMALIZED)[:, 0]
    if np.isnan(out).any():
        raise HorizonError("a temporal window lies beyond the end of the trajectory")
    return out


def robustness(f: Formula, xi, t: int = 0, mode=RobustnessMode.NORMALIZED, dt: float | None = None) -> float:
    """Robustness of f on a single trajectory at grid index t."""
    values, step = _batch_values(xi, dt)
    if values.shape[0] != 1:
        raise ValueError("robustness() takes one trajectory; use robustness_batch for many")
    return float(robustness_batch(f, values, t, mode, step)[0])


def satisfied(f: Formula, xi, t: int = 0, dt: float | None = None) -> int:
    """Boolean satisfaction; a robustness of exactly zero counts as violated."""
    return int(robustness(f, xi, t, RobustnessMode.NORMALIZED, dt) > 0)
