"""Propositional objective logic: syntax, quantitative semantics and tooling.

A specification combines per-objective atoms with ``&`` (min) and ``|`` (max)::

    psi := oN | -oN | oN >= c | oN <= c | ( psi ) | psi & psi | psi | psi

``&`` binds tighter than ``|`` and both associate to the left. Constants come
from the set {0.0, 0.1, ..., 1.0}.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import LexError, ObjectiveIndexError, ParseError

MAX_OBJECTIVES = 6
CONSTANTS: tuple[float, ...] = tuple(k / 10 for k in range(11))
CONSTANT_TOKENS: tuple[str, ...] = tuple(f"{c:.1f}" for c in CONSTANTS)

VOCAB: tuple[str, ...] = (
    tuple(f"o{i}" for i in range(1, MAX_OBJECTIVES + 1))
    + ("-", "&", "|", ">=", "<=", "(", ")")
    + CONSTANT_TOKENS
)
TOKEN_ID: dict[str, int] = {tok: i for i, tok in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Atom:
    index: int


@dataclass(frozen=True)
class NegAtom:
    index: int


@dataclass(frozen=True)
class Geq:
    index: int
    const: float


@dataclass(frozen=True)
class Leq:
    index: int
    const: float


@dataclass(frozen=True)
class And:
    left: "SpecAst"
    right: "SpecAst"


@dataclass(frozen=True)
class Or:
    left: "SpecAst"
    right: "SpecAst"


Leaf = Union[Atom, NegAtom, Geq, Leq]
SpecAst = Union[Atom, NegAtom, Geq, Leq, And, Or]
_LEAVES = (Atom, NegAtom, Geq, Leq)
_COMPOUND = (And, Or)


def _canonical_const(value: float) -> float:
    k = round(value * 10)
    if not (0 <= k <= 10) or abs(value * 10 - k) > 1e-9:
        raise ParseError(f"constant {value!r} is not in {{0.0, 0.1, ..., 1.0}}")
    return CONSTANTS[k]


def max_index(ast: SpecAst) -> int:
    """Largest objective index referenced anywhere in ``ast``."""
    if isinstance(ast, _COMPOUND):
        return max(max_index(ast.left), max_index(ast.right))
    return ast.index


def leaves(ast: SpecAst) -> list[Leaf]:
    if isinstance(ast, _COMPOUND):
        return leaves(ast.left) + leaves(ast.right)
    return [ast]


# ---------------------------------------------------------------------------
# lexing and parsing

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<obj>o\d+)|(?P<num>\d*\.\d+|\d+)|(?P<op>>=|<=|[-&|()]))"
)


def lex(text: str) -> list[str]:
    """Split ``text`` into vocabulary tokens, canonicalizing numeric literals."""
    tokens: list[str] = []
    pos = 0
    end = len(text.rstrip())
    while pos < end:
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            raise LexError(f"unexpected character {text[pos:pos + 1]!r} at offset {pos}")
        if m.group("obj"):
            tok = m.group("obj")
            if tok not in TOKEN_ID:
                raise LexError(f"unknown objective token {tok!r}")
        elif m.group("num"):
            try:
                tok = f"{_canonical_const(float(m.group('num'))):.1f}"
            except ParseError as exc:
                raise LexError(str(exc)) from None
        else:
            tok = m.group("op")
        tokens.append(tok)
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> str | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self) -> str:
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of specification")
        self.pos += 1
        return tok

    def expect(self, tok: str) -> None:
        got = self.take()
        if got != tok:
            raise ParseError(f"expected {tok!r}, got {got!r} at token {self.pos - 1}")

    def expr(self) -> SpecAst:
        node = self.term()
        while self.peek() == "|":
            self.take()
            node = Or(node, self.term())
        return node

    def term(self) -> SpecAst:
        node = self.factor()
        while self.peek() == "&":
            self.take()
            node = And(node, self.factor())
        return node

    def factor(self) -> SpecAst:
        tok = self.take()
        if tok == "(":
            node = self.expr()
            self.expect(")")
            return node
        if tok == "-":
            nxt = self.take()
            if not nxt.startswith("o"):
                raise ParseError(f"negation applies only to objectives, got {nxt!r}")
            return NegAtom(int(nxt[1:]))
        if tok.startswith("o"):
            index = int(tok[1:])
            if self.peek() in (">=", "<="):
                op = self.take()
                const = self.take()
                if const not in CONSTANT_TOKENS:
                    raise ParseError(f"expected a constant after {op!r}, got {const!r}")
                c = CONSTANTS[CONSTANT_TOKENS.index(const)]
                return Geq(index, c) if op == ">=" else Leq(index, c)
            return Atom(index)
        raise ParseError(f"unexpected token {tok!r} at token {self.pos - 1}")


def parse(text: str, n_objectives: int | None = None) -> SpecAst:
    """Parse a specification string.

    Raises LexError for unknown tokens, ParseError for grammar violations and
    ObjectiveIndexError when ``n_objectives`` is given and an atom exceeds it.
    """
    tokens = lex(text)
    if not tokens:
        raise ParseError("empty specification")
    parser = _Parser(tokens)
    ast = parser.expr()
    if parser.pos != len(tokens):
        raise ParseError(f"trailing tokens starting at {tokens[parser.pos]!r}")
    limit = MAX_OBJECTIVES if n_objectives is None else n_objectives
    if max_index(ast) > limit:
        raise ObjectiveIndexError(f"objective o{max_index(ast)} exceeds n={limit}")
    return ast


# ---------------------------------------------------------------------------
# rendering and tokens


def _tokens(ast: SpecAst, out: list[str]) -> None:
    if isinstance(ast, Atom):
        out.append(f"o{ast.index}")
    elif isinstance(ast, NegAtom):
        out.extend(("-", f"o{ast.index}"))
    elif isinstance(ast, (Geq, Leq)):
        out.extend((f"o{ast.index}", ">=" if isinstance(ast, Geq) else "<=", f"{ast.const:.1f}"))
    else:
        op = "&" if isinstance(ast, And) else "|"
        for side, child in (("l", ast.left), ("r", ast.right)):
            # a same-connective right child must be grouped to survive left-associative re-parsing
            wrap = isinstance(child, _COMPOUND) and (type(child) is not type(ast) or side == "r")
            if side == "r":
                out.append(op)
            if wrap:
                out.append("(")
            _tokens(child, out)
            if wrap:
                out.append(")")


def token_strings(ast: SpecAst) -> list[str]:
    out: list[str] = []
    _tokens(ast, out)
    return out


def render(ast: SpecAst) -> str:
    """Canonical string form; ``parse(render(a)) == a``."""
    parts: list[str] = []
    glue = False
    for tok in token_strings(ast):
        if glue:
            parts[-1] += tok
        else:
            parts.append(tok)
        glue = tok == "-"
    return " ".join(parts)


def canonical_length(ast: SpecAst) -> int:
    """Character count of the canonical rendering (the curriculum measure)."""
    return len(render(ast))


def tokenize(ast: SpecAst) -> list[int]:
    return [TOKEN_ID[t] for t in token_strings(ast)]


def one_hot(tokens: Sequence[int]) -> np.ndarray:
    out = np.zeros((len(tokens), VOCAB_SIZE))
    out[np.arange(len(tokens)), tokens] = 1.0
    return out


def from_one_hot(matrix: np.ndarray) -> list[int]:
    return [int(i) for i in np.argmax(matrix, axis=1)]


# ---------------------------------------------------------------------------
# semantics


def evaluate(r, ast: SpecAst):
    """Degree to which reward vector(s) ``r`` satisfy ``ast``.

    ``r`` has shape (n,) or (..., n); the result is a float or an array of
    shape ``r.shape[:-1]``.
    """
    arr = np.asarray(r, dtype=float)
    if arr.ndim == 0:
        raise ValueError("reward vector must have at least one dimension")
    if max_index(ast) > arr.shape[-1]:
        raise ObjectiveIndexError(
            f"objective o{max_index(ast)} missing from reward vector of length {arr.shape[-1]}"
        )
    value = _eval(arr, ast)
    if arr.ndim == 1:
        return float(value)
    return np.broadcast_to(value, arr.shape[:-1]).astype(float)


def _eval(r: np.ndarray, ast: SpecAst):
    if isinstance(ast, Atom):
        return r[..., ast.index - 1]
    if isinstance(ast, NegAtom):
        return 1.0 - r[..., ast.index - 1]
    if isinstance(ast, Geq):
        return np.where(r[..., ast.index - 1] >= ast.const, 1.0, 0.0)
    if isinstance(ast, Leq):
        return np.where(r[..., ast.index - 1] <= ast.const, 1.0, 0.0)
    if isinstance(ast, And):
        return np.minimum(_eval(r, ast.left), _eval(r, ast.right))
    return np.maximum(_eval(r, ast.left), _eval(r, ast.right))


# ---------------------------------------------------------------------------
# generation and fingerprints


def _random_leaf(rng: np.random.Generator, n: int) -> Leaf:
    kind = int(rng.integers(4))
    index = int(rng.integers(1, n + 1))
    if kind == 0:
        return Atom(index)
    if kind == 1:
        return NegAtom(index)
    const = CONSTANTS[int(rng.integers(len(CONSTANTS)))]
    return Geq(index, const) if kind == 2 else Leq(index, const)


def _random_tree(rng: np.random.Generator, n: int, n_leaves: int) -> SpecAst:
    if n_leaves == 1:
        return _random_leaf(rng, n)
    left = int(rng.integers(1, n_leaves))
    cls = And if rng.integers(2) == 0 else Or
    return cls(_random_tree(rng, n, left), _random_tree(rng, n, n_leaves - left))


def generate(rng: np.random.Generator, n: int, max_atoms: int) -> SpecAst:
    """Random grammar-valid specification with 1..max_atoms leaves.

    Leaf count, leaf kind, objective, constant and connective are all drawn
    uniformly; the tree shape comes from recursively splitting the leaf budget.
    """
    if n < 1 or max_atoms < 1:
        raise ValueError("n and max_atoms must be >= 1")
    return _random_tree(rng, n, int(rng.integers(1, max_atoms + 1)))


def canonical_probes(n: int, seed: int = 0) -> np.ndarray:
    """Reward vectors used to decide semantic equivalence for ``n`` objectives."""
    if n <= 3:
        axis = np.arange(21) / 20
        grids = np.meshgrid(*([axis] * n), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)
    rng = np.random.default_rng(seed)
    probes = [rng.uniform(0.0, 1.0, size=(4096, n))]
    for k in range(n):
        block = np.full((len(CONSTANTS), n), 0.5)
        block[:, k] = CONSTANTS
        probes.append(block)
    return np.concatenate(probes, axis=0)


def fingerprint(ast: SpecAst, probes: Iterable) -> list[float]:
    arr = np.asarray(probes, dtype=float)
    if arr.ndim != 2 or len(arr) == 0:
        raise ValueError("probes must be a non-empty list of reward vectors")
    return evaluate(arr, ast).tolist()


def fingerprint_key(ast: SpecAst, probes: np.ndarray) -> bytes:
    """Hashable fingerprint for bucketing."""
    return np.ascontiguousarray(evaluate(np.asarray(probes, dtype=float), ast)).tobytes()


def read_specs(path, n_objectives: int | None = None) -> list[SpecAst]:
    """Read a spec-set file (one specification per line)."""
    with open(path, encoding="utf-8") as fh:
        return [parse(line, n_objectives) for line in fh.read().splitlines() if line.strip()]


def write_specs(path, specs: Iterable[SpecAst]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ast in specs:
            fh.write(render(ast) + "\n")
