"""Time-bounded Signal Temporal Logic over affine predicates.

Formulas are immutable trees. Robustness is evaluated on uniformly sampled
signals with the discrete-time window rules documented on :func:`window`.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

_EPS = 1e-9


class STLError(ValueError):
    pass


class SpecSyntaxError(STLError):
    def __init__(self, msg: str, line: int, col: int):
        super().__init__(f"{msg} (line {line}, column {col})")
        self.line = line
        self.col = col


class SignalTooShortError(STLError):
    pass


class EmptyWindowError(STLError):
    pass


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise STLError(f"interval bounds must be finite, got [{self.lo}, {self.hi}]")
        if self.lo < 0 or self.hi < self.lo:
            raise STLError(f"invalid interval [{self.lo}, {self.hi}]")

    def scaled(self, factor: float) -> "Interval":
        return Interval(self.lo * factor, self.hi * factor)


class Formula:
    """Base class of all formula nodes."""

    def children(self) -> tuple["Formula", ...]:
        return ()

    def __and__(self, other: "Formula") -> "And":
        return And((self, other))

    def __or__(self, other: "Formula") -> "Or":
        return Or((self, other))

    def __invert__(self) -> "Not":
        return Not(self)

    def __str__(self) -> str:
        return to_text(self)


@dataclass(frozen=True)
class TrueF(Formula):
    pass


@dataclass(frozen=True)
class Pred(Formula):
    """Affine predicate ``a @ x + c >= 0``."""

    a: tuple[float, ...]
    c: float
    label: str = field(default="", compare=False)

    def __post_init__(self):
        a = tuple(float(v) for v in self.a)
        if not a or not all(math.isfinite(v) for v in a):
            raise STLError("predicate coefficients must be finite")
        if all(v == 0.0 for v in a):
            raise STLError("predicate coefficients must not all be zero")
        if not math.isfinite(self.c):
            raise STLError("predicate offset must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "c", float(self.c))

    @property
    def dim(self) -> int:
        return len(self.a)

    def negated(self) -> "Pred":
        return Pred(tuple(-v for v in self.a), -self.c, f"!{self.label}" if self.label else "")


@dataclass(frozen=True)
class Not(Formula):
    child: Formula

    def children(self):
        return (self.child,)


@dataclass(frozen=True)
class And(Formula):
    args: tuple[Formula, ...]

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(self.args))
        if len(self.args) < 2:
            raise STLError("And needs at least two operands; use conj()")

    def children(self):
        return self.args


@dataclass(frozen=True)
class Or(Formula):
    args: tuple[Formula, ...]

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(self.args))
        if len(self.args) < 2:
            raise STLError("Or needs at least two operands; use disj()")

    def children(self):
        return self.args


@dataclass(frozen=True)
class Until(Formula):
    interval: Interval
    left: Formula
    right: Formula

    def children(self):
        return (self.left, self.right)


@dataclass(frozen=True)
class Eventually(Formula):
    interval: Interval
    child: Formula

    def children(self):
        return (self.child,)


@dataclass(frozen=True)
class Always(Formula):
    interval: Interval
    child: Formula

    def children(self):
        return (self.child,)


def conj(*fs: Formula) -> Formula:
    return fs[0] if len(fs) == 1 else And(tuple(fs))


def disj(*fs: Formula) -> Formula:
    return fs[0] if len(fs) == 1 else Or(tuple(fs))


def predicates(f: Formula) -> list[Pred]:
    out = []
    stack = [f]
    while stack:
        node = stack.pop()
        if isinstance(node, Pred):
            out.append(node)
        stack.extend(node.children())
    return out


def horizon(f: Formula) -> float:
    """Latest time offset, relative to the evaluation time, that ``f`` reads."""
    if isinstance(f, (TrueF, Pred)):
        return 0.0
    if isinstance(f, (Eventually, Always)):
        return f.interval.hi + horizon(f.child)
    if isinstance(f, Until):
        return f.interval.hi + max(horizon(f.left), horizon(f.right))
    return max(horizon(c) for c in f.children())


def time_scale(f: Formula, factor: float) -> Formula:
    """Multiply every temporal interval in ``f`` by ``factor``."""
    if not (math.isfinite(factor) and factor > 0):
        raise STLError(f"time scale factor must be positive, got {factor}")
    if isinstance(f, (TrueF, Pred)):
        return f
    if isinstance(f, Not):
        return Not(time_scale(f.child, factor))
    if isinstance(f, And):
        return And(tuple(time_scale(c, factor) for c in f.args))
    if isinstance(f, Or):
        return Or(tuple(time_scale(c, factor) for c in f.args))
    if isinstance(f, Eventually):
        return Eventually(f.interval.scaled(factor), time_scale(f.child, factor))
    if isinstance(f, Always):
        return Always(f.interval.scaled(factor), time_scale(f.child, factor))
    if isinstance(f, Until):
        return Until(f.interval.scaled(factor), time_scale(f.left, factor),
                     time_scale(f.right, factor))
    raise TypeError(f"unknown formula node {type(f).__name__}")


# ---------------------------------------------------------------------------
# Box regions


DIM_ALIASES = {
    "x": "x", "y": "y", "z": "z",
    "roll": "roll", "phi": "roll",
    "pitch": "pitch", "theta": "pitch",
    "yaw": "yaw", "psi": "yaw",
}


def canonical_dim(name: str) -> str:
    try:
        return DIM_ALIASES[name.lower()]
    except KeyError:
        raise STLError(f"unknown signal dimension {name!r}") from None


@dataclass(frozen=True)
class Region:
    """Axis-aligned box given by center and full widths along named dimensions."""

    name: str
    center: tuple[float, ...]
    widths: tuple[float, ...]
    dims: tuple[str, ...]

    def __post_init__(self):
        if not (len(self.center) == len(self.widths) == len(self.dims)):
            raise STLError(f"region {self.name}: center, widths and dims differ in length")
        if any(w <= 0 for w in self.widths):
            raise STLError(f"region {self.name}: widths must be positive")
        object.__setattr__(self, "dims", tuple(canonical_dim(d) for d in self.dims))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, float)
        h = 0.5 * np.asarray(self.widths, float)
        return c - h, c + h

    def faces(self, signal_dims: Sequence[str]) -> list[Pred]:
        signal_dims = [canonical_dim(d) for d in signal_dims]
        out = []
        for d, c, w in zip(self.dims, self.center, self.widths):
            if d not in signal_dims:
                raise STLError(f"region {self.name}: dimension {d!r} not in signal dims {signal_dims}")
            i = signal_dims.index(d)
            e = np.zeros(len(signal_dims))
            e[i] = 1.0
            half = 0.5 * w
            out.append(Pred(tuple(e), -(c - half), f"{self.name}.{d}>="))
            out.append(Pred(tuple(-e), c + half, f"{self.name}.{d}<="))
        return out

    def formula(self, signal_dims: Sequence[str]) -> Formula:
        return conj(*self.faces(signal_dims))


# ---------------------------------------------------------------------------
# Concrete syntax


_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)
  | (?P<temporal>[FGU](?=\s*\[))
  | (?P<name>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<sym>[!&|()\[\],;])
""", re.VERBOSE)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise SpecSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        chunk = m.group()
        if kind != "ws":
            toks.append(_Tok(kind, chunk, line, pos - line_start + 1))
        for i, ch in enumerate(chunk):
            if ch == "\n":
                line += 1
                line_start = pos + i + 1
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


class _Parser:
    def __init__(self, text: str, bindings: Mapping[str, Formula]):
        self.toks = _tokenize(text)
        self.i = 0
        self.bindings = bindings

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def fail(self, msg: str, tok: _Tok | None = None):
        tok = tok or self.peek()
        raise SpecSyntaxError(msg, tok.line, tok.col)

    def expect(self, text: str) -> _Tok:
        tok = self.peek()
        if tok.text != text:
            self.fail(f"expected {text!r}, found {tok.text or 'end of input'!r}")
        return self.take()

    def parse(self) -> Formula:
        f = self.or_expr()
        if self.peek().kind != "eof":
            self.fail(f"unexpected {self.peek().text!r}")
        return f

    def or_expr(self) -> Formula:
        args = [self.and_expr()]
        while self.peek().text == "|":
            self.take()
            args.append(self.and_expr())
        return disj(*args)

    def and_expr(self) -> Formula:
        args = [self.until_expr()]
        while self.peek().text == "&":
            self.take()
            args.append(self.until_expr())
        return conj(*args)

    def until_expr(self) -> Formula:
        left = self.unary()
        if self.peek().kind == "temporal" and self.peek().text == "U":
            self.take()
            interval = self.interval()
            right = self.until_expr()
            return Until(interval, left, right)
        return left

    def unary(self) -> Formula:
        tok = self.peek()
        if tok.text == "!":
            self.take()
            return Not(self.unary())
        if tok.kind == "temporal":
            if tok.text == "U":
                self.fail("'U' needs a left operand")
            self.take()
            interval = self.interval()
            child = self.unary()
            return Eventually(interval, child) if tok.text == "F" else Always(interval, child)
        return self.atom()

    def number(self) -> float:
        tok = self.peek()
        if tok.kind != "num":
            self.fail(f"expected a number, found {tok.text or 'end of input'!r}")
        self.take()
        return float(tok.text)

    def interval(self) -> Interval:
        start = self.expect("[")
        lo = self.number()
        self.expect(",")
        hi = self.number()
        self.expect("]")
        try:
            return Interval(lo, hi)
        except STLError as exc:
            raise SpecSyntaxError(str(exc), start.line, start.col) from None

    def atom(self) -> Formula:
        tok = self.peek()
        if tok.text == "(":
            self.take()
            f = self.or_expr()
            self.expect(")")
            return f
        if tok.kind != "name":
            self.fail(f"expected a formula, found {tok.text or 'end of input'!r}")
        self.take()
        if tok.text == "true":
            return TrueF()
        if tok.text == "pred" and self.peek().text == "(":
            return self.pred_literal()
        if tok.text == "in_box":
            name_tok = self.take()
            if name_tok.kind != "name":
                self.fail("expected a region name after 'in_box'", name_tok)
            return self.lookup(name_tok)
        return self.lookup(tok)

    def lookup(self, tok: _Tok) -> Formula:
        try:
            return self.bindings[tok.text]
        except KeyError:
            self.fail(f"unknown predicate or region {tok.text!r}", tok)

    def pred_literal(self) -> Pred:
        start = self.expect("(")
        coeffs = [self.number()]
        while self.peek().text == ",":
            self.take()
            coeffs.append(self.number())
        self.expect(";")
        c = self.number()
        self.expect(")")
        try:
            return Pred(tuple(coeffs), c)
        except STLError as exc:
            raise SpecSyntaxError(str(exc), start.line, start.col) from None


def parse_spec(text: str, bindings: Mapping[str, Formula] | None = None) -> Formula:
    """Parse the textual specification grammar into a formula.

    ``bindings`` maps names (single predicates or whole regions) to formulas;
    ``in_box A`` and bare ``A`` both resolve through it.
    """
    return _Parser(text, bindings or {}).parse()


def _num(v: float) -> str:
    return repr(float(v))


def to_text(f: Formula) -> str:
    """Render ``f`` so that ``parse_spec(to_text(f)) == f``."""
    if isinstance(f, TrueF):
        return "true"
    if isinstance(f, Pred):
        return "pred(" + ", ".join(_num(v) for v in f.a) + "; " + _num(f.c) + ")"
    if isinstance(f, Not):
        return "!" + to_text(f.child)
    if isinstance(f, And):
        return "(" + " & ".join(to_text(c) for c in f.args) + ")"
    if isinstance(f, Or):
        return "(" + " | ".join(to_text(c) for c in f.args) + ")"
    if isinstance(f, (Eventually, Always)):
        op = "F" if isinstance(f, Eventually) else "G"
        return f"{op}[{_num(f.interval.lo)},{_num(f.interval.hi)}] {to_text(f.child)}"
    if isinstance(f, Until):
        iv = f"U[{_num(f.interval.lo)},{_num(f.interval.hi)}]"
        return f"({to_text(f.left)} {iv} {to_text(f.right)})"
    raise TypeError(f"unknown formula node {type(f).__name__}")


# ---------------------------------------------------------------------------
# Signals and robustness


@dataclass(frozen=True, eq=False)
class Signal:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if t.ndim != 1 or len(t) != len(v) or len(t) == 0:
            raise STLError("times and values must have matching length")
        if len(t) > 1:
            steps = np.diff(t)
            dt = steps[0]
            if dt <= 0 or np.any(np.abs(steps - dt) > 1e-9 * max(1.0, abs(dt)) * len(t)):
                raise STLError("signal samples must be strictly increasing and uniformly spaced")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, values, dt: float, t0: float = 0.0) -> "Signal":
        values = np.asarray(values, float)
        return cls(t0 + dt * np.arange(len(values)), values)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 1.0

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def index_of(self, t: float) -> int:
        k = (t - self.times[0]) / self.dt
        i = int(round(k))
        if abs(k - i) > 1e-6 or not 0 <= i < len(self.times):
            raise STLError(f"time {t} is not a sample time of the signal")
        return i


def window(interval: Interval, dt: float, kind: str) -> tuple[int, int]:
    """Sample-offset window ``(first, last)`` for a temporal interval.

    Eventually and Until round inward (ceil on the start, floor on the end);
    Always rounds outward. The window may be empty (``first > last``).
    """
    lo, hi = interval.lo / dt, interval.hi / dt
    if kind == "always":
        return math.floor(lo + _EPS * max(1.0, lo)), math.ceil(hi - _EPS * max(1.0, hi))
    return math.ceil(lo - _EPS * max(1.0, lo)), math.floor(hi + _EPS * max(1.0, hi))


def _check_dims(f: Formula, dim: int):
    for p in predicates(f):
        if p.dim != dim:
            raise STLError(f"predicate has dimension {p.dim}, signal has {dim}")


def _shift_reduce(child: np.ndarray, first: int, last: int, reducer) -> np.ndarray:
    n = len(child)
    out = np.full(n, np.nan)
    width = last - first + 1
    m = n - last
    if m <= 0:
        return out
    view = np.lib.stride_tricks.sliding_window_view(child[first:], width)[:m]
    out[:m] = reducer(view, axis=1)
    return out


def _trace(f: Formula, values: np.ndarray, dt: float) -> np.ndarray:
    n = len(values)
    if isinstance(f, TrueF):
        return np.full(n, np.inf)
    if isinstance(f, Pred):
        return values @ np.asarray(f.a) + f.c
    if isinstance(f, Not):
        return -_trace(f.child, values, dt)
    if isinstance(f, And):
        return np.minimum.reduce([_trace(c, values, dt) for c in f.args])
    if isinstance(f, Or):
        return np.maximum.reduce([_trace(c, values, dt) for c in f.args])
    if isinstance(f, Eventually):
        first, last = window(f.interval, dt, "eventually")
        if first > last:
            raise EmptyWindowError(f"interval {f.interval} contains no sample at dt={dt}")
        return _shift_reduce(_trace(f.child, values, dt), first, last, np.max)
    if isinstance(f, Always):
        first, last = window(f.interval, dt, "always")
        if first > last:
            return np.full(n, np.inf)
        return _shift_reduce(_trace(f.child, values, dt), first, last, np.min)
    if isinstance(f, Until):
        first, last = window(f.interval, dt, "eventually")
        if first > last:
            raise EmptyWindowError(f"interval {f.interval} contains no sample at dt={dt}")
        r1 = _trace(f.left, values, dt)
        r2 = _trace(f.right, values, dt)
        out = np.full(n, -np.inf)
        running = np.full(n, np.inf)
        for off in range(last + 1):
            shifted1 = np.full(n, np.nan)
            shifted2 = np.full(n, np.nan)
            shifted1[: n - off] = r1[off:]
            shifted2[: n - off] = r2[off:]
            running = np.minimum(running, shifted1)
            if off >= first:
                out = np.maximum(out, np.minimum(shifted2, running))
        return out
    raise TypeError(f"unknown formula node {type(f).__name__}")


def robustness_trace(f: Formula, s: Signal) -> np.ndarray:
    """Robustness at every sample time; NaN where the signal is too short."""
    _check_dims(f, s.dim)
    return _trace(f, s.values, s.dt)


def robustness(f: Formula, s: Signal, t: float = 0.0) -> float:
    k = s.index_of(t)
    r = robustness_trace(f, s)[k]
    if np.isnan(r):
        raise SignalTooShortError(
            f"signal ends at {s.times[-1]}, formula needs samples up to {t + horizon(f)}")
    return float(r)


@dataclass(frozen=True)
class Evaluation:
    robustness: float
    satisfied: bool
    boundary: bool


def evaluate(f: Formula, s: Signal, t: float = 0.0) -> Evaluation:
    r = robustness(f, s, t)
    return Evaluation(r, r >= 0.0, r == 0.0)


def satisfies(f: Formula, s: Signal, t: float = 0.0) -> bool:
    return robustness(f, s, t) >= 0.0
