"""Signal temporal logic: parsing, crisp robustness and smooth robustness.

Formulas are kept in negation normal form: ``Not`` only ever wraps an
``Atom``.  Temporal windows select sample indices whose time stamps fall in
``[t + a, t + b]``; windows that run past the end of the signal are clamped
to the final sample.

Smooth robustness replaces every max by ``(1/s) log sum exp(s a_i)`` and
every min by ``-(1/s) log sum exp(-s a_i)`` and returns the exact gradient of
the smoothed value with respect to every signal sample.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "Atom", "Not", "And", "Or", "Globally", "Finally", "Until", "Formula",
    "SampledSignal", "Robustness", "SmoothingParams",
    "STLSyntaxError", "STLEvaluationError",
    "parse_formula", "negate", "crisp_robustness", "robustness_signal",
    "smooth_robustness", "smooth_gradient_check", "smoothmax", "smoothmin",
    "formula_depth", "max_operand_count", "signal_names",
]


class STLSyntaxError(ValueError):
    """Raised for malformed STL text; ``position`` is a character offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class STLEvaluationError(ValueError):
    pass


# --------------------------------------------------------------------------
# Abstract syntax


@dataclass(frozen=True)
class Atom:
    """Affine predicate ``sum(c_i * y_i) + d > 0``."""

    coeffs: tuple[tuple[str, float], ...]
    offset: float = 0.0

    def __str__(self) -> str:
        return _affine_str(self.coeffs, self.offset) + " > 0"


@dataclass(frozen=True)
class Not:
    child: Atom

    def __post_init__(self):
        if not isinstance(self.child, Atom):
            raise TypeError("negation is only allowed directly above an atom")

    def __str__(self) -> str:
        return f"not ({self.child})"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"

    def __str__(self) -> str:
        return f"({self.left}) and ({self.right})"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"

    def __str__(self) -> str:
        return f"({self.left}) or ({self.right})"


def _check_interval(a: float, b: float) -> None:
    if not (0.0 <= a <= b):
        raise ValueError(f"invalid interval [{a}, {b}]: need 0 <= a <= b")


@dataclass(frozen=True)
class Globally:
    a: float
    b: float
    child: "Formula"

    def __post_init__(self):
        _check_interval(self.a, self.b)

    def __str__(self) -> str:
        return f"always[{_num(self.a)},{_num(self.b)}] ({self.child})"


@dataclass(frozen=True)
class Finally:
    a: float
    b: float
    child: "Formula"

    def __post_init__(self):
        _check_interval(self.a, self.b)

    def __str__(self) -> str:
        return f"eventually[{_num(self.a)},{_num(self.b)}] ({self.child})"


@dataclass(frozen=True)
class Until:
    a: float
    b: float
    left: "Formula"
    right: "Formula"

    def __post_init__(self):
        _check_interval(self.a, self.b)

    def __str__(self) -> str:
        return f"({self.left}) until[{_num(self.a)},{_num(self.b)}] ({self.right})"


Formula = Atom | Not | And | Or | Globally | Finally | Until


def _num(v: float) -> str:
    return repr(float(v)).removesuffix(".0") if float(v).is_integer() else repr(float(v))


def _affine_str(coeffs, offset) -> str:
    parts = []
    for name, c in coeffs:
        if c == 1.0:
            parts.append(f"+ {name}")
        elif c == -1.0:
            parts.append(f"- {name}")
        else:
            parts.append(f"{'+' if c >= 0 else '-'} {_num(abs(c))}*{name}")
    if offset != 0.0 or not parts:
        parts.append(f"{'+' if offset >= 0 else '-'} {_num(abs(offset))}")
    text = " ".join(parts)
    return text[2:] if text.startswith("+ ") else "-" + text[2:]


def negate(f: Formula) -> Formula:
    """Push a negation through ``f`` down to the atoms.

    Until has no dual in the fragment, so negating it is an error.
    """
    if isinstance(f, Atom):
        return Not(f)
    if isinstance(f, Not):
        return f.child
    if isinstance(f, And):
        return Or(negate(f.left), negate(f.right))
    if isinstance(f, Or):
        return And(negate(f.left), negate(f.right))
    if isinstance(f, Globally):
        return Finally(f.a, f.b, negate(f.child))
    if isinstance(f, Finally):
        return Globally(f.a, f.b, negate(f.child))
    raise ValueError("cannot negate an until subformula in negation normal form")


def formula_depth(f: Formula) -> int:
    """Number of stacked min/max nodes along the deepest path."""
    if isinstance(f, (Atom, Not)):
        return 0
    if isinstance(f, (And, Or)):
        return 1 + max(formula_depth(f.left), formula_depth(f.right))
    if isinstance(f, (Globally, Finally)):
        return 1 + formula_depth(f.child)
    # until: outer max over inner min of (psi, running min of phi)
    return 3 + max(formula_depth(f.left), formula_depth(f.right))


def max_operand_count(f: Formula, times: np.ndarray) -> int:
    """Largest number of operands of any min/max node on the given time grid."""
    if isinstance(f, (Atom, Not)):
        return 1
    if isinstance(f, (And, Or)):
        return max(2, max_operand_count(f.left, times), max_operand_count(f.right, times))
    lo, hi = _window_bounds(times, f.a, f.b)
    width = int(np.max(hi - lo + 1))
    if isinstance(f, Until):
        return max(width, max_operand_count(f.left, times), max_operand_count(f.right, times))
    return max(width, max_operand_count(f.child, times))


# --------------------------------------------------------------------------
# Signals and results


@dataclass(frozen=True)
class SampledSignal:
    times: np.ndarray
    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if times.ndim != 1 or times.size < 2:
            raise ValueError("a sampled signal needs at least 2 time stamps")
        if np.any(np.diff(times) <= 0):
            raise ValueError("time stamps must be strictly increasing")
        if values.shape[0] != times.size:
            raise ValueError("values row count must equal the number of time stamps")
        names = tuple(self.names)
        if len(names) != values.shape[1]:
            raise ValueError("one name per signal dimension is required")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)

    def with_values(self, values: np.ndarray) -> "SampledSignal":
        return SampledSignal(self.times, values, self.names)


@dataclass(frozen=True)
class Robustness:
    value: float
    gradient: np.ndarray | None = None


@dataclass(frozen=True)
class SmoothingParams:
    s: float = 2.0

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("smoothing coefficient must be positive")


# --------------------------------------------------------------------------
# Parsing

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op><=|>=|->|[<>\[\](),+\-*]))"
)
_KEYWORDS = {"always", "eventually", "until", "and", "or", "not", "implies"}


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks, pos = [], 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise STLSyntaxError(f"unexpected character {text[bad]!r}", bad)
        kind = m.lastgroup
        val = m.group(kind)
        start = m.start(kind)
        if kind == "name" and val in _KEYWORDS:
            kind = "kw"
        toks.append(_Tok(kind, val, start))
        pos = m.end()
    toks.append(_Tok("end", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> _Tok:
        tok = self.peek()
        if tok.text != text or tok.kind not in ("op", "kw"):
            raise STLSyntaxError(f"expected {text!r}, found {tok.text or 'end of input'!r}", tok.pos)
        return self.take()

    def at(self, *texts: str) -> bool:
        tok = self.peek()
        return tok.kind in ("op", "kw") and tok.text in texts

    # formula := disj ('->' | 'implies') formula
    def formula(self) -> Formula:
        left = self.disj()
        if self.at("->", "implies"):
            tok = self.take()
            right = self.formula()
            try:
                return Or(negate(left), right)
            except ValueError as exc:
                raise STLSyntaxError(str(exc), tok.pos) from None
        return left

    def disj(self) -> Formula:
        f = self.conj()
        while self.at("or"):
            self.take()
            f = Or(f, self.conj())
        return f

    def conj(self) -> Formula:
        f = self.until()
        while self.at("and"):
            self.take()
            f = And(f, self.until())
        return f

    def until(self) -> Formula:
        f = self.unary()
        while self.at("until"):
            self.take()
            a, b = self.interval()
            f = Until(a, b, f, self.unary())
        return f

    def unary(self) -> Formula:
        tok = self.peek()
        if self.at("always", "eventually"):
            self.take()
            a, b = self.interval()
            child = self.unary()
            return Globally(a, b, child) if tok.text == "always" else Finally(a, b, child)
        if self.at("not"):
            self.take()
            child = self.unary()
            if isinstance(child, Atom):
                return Not(child)
            if isinstance(child, Not):
                return child.child
            raise STLSyntaxError("negation applied to a non-atomic subformula", tok.pos)
        return self.primary()

    def primary(self) -> Formula:
        tok = self.peek()
        if self.at("("):
            start = self.i
            try:
                self.take()
                f = self.formula()
                self.expect(")")
                return f
            except STLSyntaxError as formula_err:
                self.i = start
                try:
                    return self.atom()
                except STLSyntaxError as atom_err:
                    raise max(formula_err, atom_err, key=lambda e: e.position) from None
        if tok.kind in ("num", "name") or self.at("-", "+"):
            return self.atom()
        raise STLSyntaxError(f"unexpected {tok.text or 'end of input'!r}", tok.pos)

    def interval(self) -> tuple[float, float]:
        start = self.expect("[")
        a = self.number()
        self.expect(",")
        b = self.number()
        self.expect("]")
        if a < 0 or a > b:
            raise STLSyntaxError(f"invalid interval [{_num(a)},{_num(b)}]", start.pos)
        return a, b

    def number(self) -> float:
        tok = self.peek()
        if tok.kind != "num":
            raise STLSyntaxError(f"expected a number, found {tok.text or 'end of input'!r}", tok.pos)
        self.take()
        return float(tok.text)

    def atom(self) -> Atom:
        lhs = self.linexpr()
        tok = self.peek()
        if not self.at("<", "<=", ">", ">="):
            raise STLSyntaxError(f"expected a comparison, found {tok.text or 'end of input'!r}", tok.pos)
        self.take()
        rhs = self.linexpr()
        # a >= b  ->  a - b > 0 ; a <= b  ->  b - a > 0
        pos, neg = (lhs, rhs) if tok.text in (">", ">=") else (rhs, lhs)
        coeffs = dict(pos[0])
        for name, c in neg[0].items():
            coeffs[name] = coeffs.get(name, 0.0) - c
        coeffs = tuple((n, c) for n, c in coeffs.items() if c != 0.0)
        return Atom(coeffs, pos[1] - neg[1])

    def linexpr(self):
        sign = 1.0
        if self.at("-", "+"):
            sign = -1.0 if self.take().text == "-" else 1.0
        coeffs, const = self.term()
        coeffs = {k: sign * v for k, v in coeffs.items()}
        const *= sign
        while self.at("+", "-"):
            sign = -1.0 if self.take().text == "-" else 1.0
            c2, k2 = self.term()
            for n, v in c2.items():
                coeffs[n] = coeffs.get(n, 0.0) + sign * v
            const += sign * k2
        return coeffs, const

    def term(self):
        tok = self.peek()
        coeffs, const = self.factor()
        while self.at("*"):
            self.take()
            c2, k2 = self.factor()
            if coeffs and c2:
                raise STLSyntaxError("product of two signals is not affine", tok.pos)
            if coeffs:
                coeffs, const = {n: v * k2 for n, v in coeffs.items()}, const * k2
            else:
                coeffs, const = {n: v * const for n, v in c2.items()}, const * k2
        return coeffs, const

    def factor(self):
        tok = self.peek()
        if tok.kind == "num":
            self.take()
            return {}, float(tok.text)
        if tok.kind == "name":
            self.take()
            return {tok.text: 1.0}, 0.0
        if self.at("("):
            self.take()
            out = self.linexpr()
            self.expect(")")
            return out
        if self.at("-"):
            self.take()
            c, k = self.factor()
            return {n: -v for n, v in c.items()}, -k
        raise STLSyntaxError(f"expected a signal name or number, found {tok.text or 'end of input'!r}", tok.pos)


def parse_formula(text: str) -> Formula:
    """Parse STL text into a formula in negation normal form.

    >>> parse_formula("always[0,100] (y5 - y4 <= 40)")
    Globally(a=0.0, b=100.0, child=Atom(coeffs=(('y5', -1.0), ('y4', 1.0)), offset=40.0))
    """
    p = _Parser(text)
    f = p.formula()
    tok = p.peek()
    if tok.kind != "end":
        raise STLSyntaxError(f"unexpected {tok.text!r}", tok.pos)
    return f


# --------------------------------------------------------------------------
# Windows


def _time_tol(times: np.ndarray) -> float:
    return 1e-9 * max(1.0, float(np.max(np.abs(times))))


def _window_bounds(times: np.ndarray, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive index bounds of samples in ``[t_j + a, t_j + b]`` for every j.

    Windows that start after the final sample collapse onto it.  Empty
    windows come back with ``lo > hi``.
    """
    tol = _time_tol(times)
    n = times.size
    lo = np.searchsorted(times, times + a - tol, side="left")
    hi = np.searchsorted(times, times + b + tol, side="right") - 1
    past = lo >= n
    lo = np.where(past, n - 1, lo)
    hi = np.where(past, n - 1, np.minimum(hi, n - 1))
    return lo, hi


class _SparseTable:
    """Range-min queries over a fixed array in O(1) after O(n log n) setup."""

    def __init__(self, a: np.ndarray, op: Callable):
        self.op = op
        self.levels = [a]
        k = 1
        while 2 * k <= a.size:
            prev = self.levels[-1]
            self.levels.append(op(prev[:-k], prev[k:]))
            k *= 2

    def query(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        length = np.maximum(hi - lo + 1, 1)
        k = np.floor(np.log2(length)).astype(int)
        out = np.empty(lo.size)
        for level in np.unique(k):
            sel = k == level
            tab = self.levels[level]
            out[sel] = self.op(tab[lo[sel]], tab[hi[sel] - (1 << level) + 1])
        return out


# --------------------------------------------------------------------------
# Crisp semantics


def _atom_signal(atom: Atom, y: SampledSignal) -> np.ndarray:
    idx = {n: i for i, n in enumerate(y.names)}
    out = np.full(y.times.size, float(atom.offset))
    for name, c in atom.coeffs:
        if name not in idx:
            raise STLEvaluationError(f"signal {name!r} is not a dimension of the evaluated signal")
        out = out + c * y.values[:, idx[name]]
    return out


def _window_reduce(rho: np.ndarray, times: np.ndarray, a: float, b: float, op) -> np.ndarray:
    lo, hi = _window_bounds(times, a, b)
    empty = lo > hi
    out = _SparseTable(rho, op).query(lo, np.maximum(hi, lo))
    out[empty] = np.nan
    return out


def robustness_signal(f: Formula, y: SampledSignal) -> np.ndarray:
    """Crisp robustness of ``f`` at every sample index (NaN for empty windows)."""
    if isinstance(f, Atom):
        return _atom_signal(f, y)
    if isinstance(f, Not):
        return -robustness_signal(f.child, y)
    if isinstance(f, And):
        return np.minimum(robustness_signal(f.left, y), robustness_signal(f.right, y))
    if isinstance(f, Or):
        return np.maximum(robustness_signal(f.left, y), robustness_signal(f.right, y))
    if isinstance(f, Globally):
        return _window_reduce(robustness_signal(f.child, y), y.times, f.a, f.b, np.minimum)
    if isinstance(f, Finally):
        return _window_reduce(robustness_signal(f.child, y), y.times, f.a, f.b, np.maximum)
    if isinstance(f, Until):
        r1 = robustness_signal(f.left, y)
        r2 = robustness_signal(f.right, y)
        lo, hi = _window_bounds(y.times, f.a, f.b)
        out = np.full(y.times.size, np.nan)
        for j in range(y.times.size):
            if lo[j] > hi[j]:
                continue
            prefix_min = np.minimum.accumulate(r1[lo[j]:hi[j] + 1])
            out[j] = np.max(np.minimum(r2[lo[j]:hi[j] + 1], prefix_min))
        return out
    raise TypeError(f"not a formula: {f!r}")


def _check_index(y: SampledSignal, t_index: int) -> int:
    n = y.times.size
    if not -n <= t_index < n:
        raise IndexError(f"sample index {t_index} out of range for {n} samples")
    return t_index % n


def crisp_robustness(f: Formula, y: SampledSignal, t_index: int = 0) -> float:
    """Max-semantics robustness of ``f`` on ``y`` at sample ``t_index``."""
    t_index = _check_index(y, t_index)
    value = robustness_signal(f, y)[t_index]
    if np.isnan(value):
        raise STLEvaluationError("empty temporal window: no sample lies in [t+a, t+b]")
    return float(value)


# --------------------------------------------------------------------------
# Smooth semantics


def smoothmax(a, s: float) -> float:
    a = np.asarray(a, dtype=float)
    m = np.max(a)
    return float(m + np.log(np.sum(np.exp(s * (a - m)))) / s)


def smoothmin(a, s: float) -> float:
    return -smoothmax(-np.asarray(a, dtype=float), s)


def _lse_pair(x: np.ndarray, y: np.ndarray, s: float, sign: float):
    """Elementwise smooth max (sign=+1) or min (sign=-1) of two arrays."""
    sx, sy = sign * s * x, sign * s * y
    m = np.maximum(sx, sy)
    ex, ey = np.exp(sx - m), np.exp(sy - m)
    tot = ex + ey
    val = sign * (m + np.log(tot)) / s
    return val, ex / tot, ey / tot


# rows x window-width elements processed per chunk when smoothing windows
_CHUNK_ELEMS = 4_000_000


def _window_lse(rho: np.ndarray, lo: np.ndarray, hi: np.ndarray, s: float, sign: float):
    """Smooth max/min of ``rho`` over each window; returns values and a VJP."""
    n = rho.size
    empty = lo > hi
    width = int(np.max(np.where(empty, 1, hi - lo + 1)))
    rows = max(1, _CHUNK_ELEMS // width)
    offs = np.arange(width)
    out = np.full(n, np.nan)

    def chunk_weights(start, stop):
        idx = lo[start:stop, None] + offs
        mask = idx <= hi[start:stop, None]
        z = np.where(mask, sign * s * rho[np.minimum(idx, n - 1)], -np.inf)
        m = np.max(z, axis=1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(z - m), 0.0)
        tot = e.sum(axis=1, keepdims=True)
        return idx, mask, m[:, 0], e, tot[:, 0]

    for start in range(0, n, rows):
        stop = min(n, start + rows)
        _, _, m, _, tot = chunk_weights(start, stop)
        with np.errstate(divide="ignore"):
            out[start:stop] = sign * (m + np.log(tot)) / s
    out[empty] = np.nan

    def vjp(g: np.ndarray) -> np.ndarray:
        gin = np.zeros(n)
        live = np.nonzero((g != 0) & ~empty)[0]
        if live.size == 0:
            return gin
        for start in range(live[0], live[-1] + 1, rows):
            stop = min(n, start + rows)
            idx, mask, _, e, tot = chunk_weights(start, stop)
            w = e / np.where(tot > 0, tot, 1.0)[:, None]
            contrib = w * g[start:stop, None]
            gin += np.bincount(idx[mask], weights=contrib[mask], minlength=n)
        return gin

    return out, vjp


def _smooth_eval(f: Formula, y: SampledSignal, s: float, names: dict):
    """Return (robustness at every index, vjp mapping node grads to signal grads)."""
    n, d = y.values.shape
    if isinstance(f, (Atom, Not)):
        atom = f if isinstance(f, Atom) else f.child
        sign = 1.0 if isinstance(f, Atom) else -1.0
        val = sign * _atom_signal(atom, y)
        cols = []
        for name, c in atom.coeffs:
            cols.append((names[name], sign * c))

        def vjp(g):
            out = np.zeros((n, d))
            for col, c in cols:
                out[:, col] += c * g
            return out
        return val, vjp

    if isinstance(f, (And, Or)):
        sign = 1.0 if isinstance(f, Or) else -1.0
        va, ja = _smooth_eval(f.left, y, s, names)
        vb, jb = _smooth_eval(f.right, y, s, names)
        val, wa, wb = _lse_pair(va, vb, s, sign)
        return val, lambda g: ja(g * wa) + jb(g * wb)

    if isinstance(f, (Globally, Finally)):
        sign = 1.0 if isinstance(f, Finally) else -1.0
        vc, jc = _smooth_eval(f.child, y, s, names)
        lo, hi = _window_bounds(y.times, f.a, f.b)
        val, wj = _window_lse(vc, lo, hi, s, sign)
        return val, lambda g: jc(wj(g))

    if isinstance(f, Until):
        v1, j1 = _smooth_eval(f.left, y, s, names)
        v2, j2 = _smooth_eval(f.right, y, s, names)
        lo, hi = _window_bounds(y.times, f.a, f.b)
        val = np.full(n, np.nan)
        cache = {}
        for j in range(n):
            if lo[j] > hi[j]:
                continue
            w1 = v1[lo[j]:hi[j] + 1]
            # running smooth min of phi from the window start
            run = -np.logaddexp.accumulate(-s * w1) / s
            inner, wa, wb = _lse_pair(v2[lo[j]:hi[j] + 1], run, s, -1.0)
            m = np.max(s * inner)
            e = np.exp(s * inner - m)
            val[j] = (m + np.log(e.sum())) / s
            cache[j] = (w1, run, wa, wb, e / e.sum())

        def vjp(g):
            g1, g2 = np.zeros(n), np.zeros(n)
            for j, (w1, run, wa, wb, wout) in cache.items():
                if g[j] == 0:
                    continue
                gi = g[j] * wout
                g2[lo[j]:hi[j] + 1] += gi * wa
                grun = gi * wb
                # d run_i / d w1_l = exp(s (run_i - w1_l)) for l <= i; every
                # grun_i shares the sign of g[j], so accumulate in log space
                with np.errstate(divide="ignore"):
                    logs = s * run + np.log(np.abs(grun))
                tail = np.logaddexp.accumulate(logs[::-1])[::-1]
                g1[lo[j]:hi[j] + 1] += np.sign(g[j]) * np.exp(tail - s * w1)
            return j1(g1) + j2(g2)
        return val, vjp

    raise TypeError(f"not a formula: {f!r}")


def _as_s(p) -> float:
    if isinstance(p, SmoothingParams):
        return p.s
    return SmoothingParams(float(p)).s


def smooth_robustness(f: Formula, y: SampledSignal, t_index: int = 0,
                      p: SmoothingParams | float = 2.0) -> Robustness:
    """Log-sum-exp robustness of ``f`` at ``t_index`` with its gradient.

    The gradient has the shape of ``y.values``.
    """
    s = _as_s(p)
    t_index = _check_index(y, t_index)
    names = {n: i for i, n in enumerate(y.names)}
    for name in signal_names(f):
        if name not in names:
            raise STLEvaluationError(f"signal {name!r} is not a dimension of the evaluated signal")
    val, vjp = _smooth_eval(f, y, s, names)
    value = val[t_index]
    if np.isnan(value):
        raise STLEvaluationError("empty temporal window: no sample lies in [t+a, t+b]")
    g = np.zeros(y.times.size)
    g[t_index] = 1.0
    return Robustness(float(value), vjp(g))


def signal_names(f: Formula) -> set[str]:
    """Names of the signals a formula refers to."""
    if isinstance(f, Atom):
        return {n for n, _ in f.coeffs}
    if isinstance(f, Not):
        return signal_names(f.child)
    if isinstance(f, (And, Or, Until)):
        return signal_names(f.left) | signal_names(f.right)
    return signal_names(f.child)


def smooth_gradient_check(f: Formula, y: SampledSignal, p: SmoothingParams | float = 2.0,
                          step: float = 1e-5, t_index: int = 0) -> float:
    """Compare the analytic smooth gradient with central differences.

    Returns the largest absolute discrepancy divided by the largest gradient
    magnitude (normwise relative error).
    """
    s = _as_s(p)
    analytic = smooth_robustness(f, y, t_index, s).gradient
    numeric = np.zeros_like(y.values)
    base = y.values.copy()
    for i in range(base.shape[0]):
        for k in range(base.shape[1]):
            vals = base.copy()
            vals[i, k] += step
            up = smooth_robustness(f, y.with_values(vals), t_index, s).value
            vals[i, k] -= 2 * step
            dn = smooth_robustness(f, y.with_values(vals), t_index, s).value
            numeric[i, k] = (up - dn) / (2 * step)
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)
