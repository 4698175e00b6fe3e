"""Random STL formulae by recursive syntax-tree growth.

The root is always an operator.  Every other node becomes an atom with
probability ``p_leaf``, otherwise an operator drawn from ``weights``.
Atoms compare a uniformly chosen variable against a standard normal
threshold; temporal operators get the interval ``[0, b]`` with ``b`` uniform
on ``{1, ..., t_max}``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .logic import GE, LE, Always, And, Atom, Eventually, Formula, Not, Or, Truth, Until, node_count
from .rng import substream

OPERATORS = ("not", "and", "or", "eventually", "always", "until")
ARITY = {"not": 1, "and": 2, "or": 2, "eventually": 1, "always": 1, "until": 2}

# Unary operators three times as likely as binary ones; this reproduces the
# reported mean size (about 4.4 nodes) at p_leaf = 0.5.
DEFAULT_WEIGHTS = (0.25, 1 / 12, 1 / 12, 0.25, 0.25, 1 / 12)
UNIFORM_WEIGHTS = (1 / 6,) * 6


@dataclass(frozen=True)
class FormulaDistParams:
    p_leaf: float = 0.5
    t_max: int = 10
    n_vars: int = 3
    weights: tuple[float, ...] = DEFAULT_WEIGHTS
    max_depth: int | None = None

    def __post_init__(self):
        if not 0 < self.p_leaf <= 1:
            raise ValueError("p_leaf must lie in (0, 1]")
        if int(self.t_max) != self.t_max or self.t_max < 1:
            raise ValueError("t_max must be a positive integer")
        if int(self.n_vars) != self.n_vars or self.n_vars < 1:
            raise ValueError("n_vars must be a positive integer")
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(OPERATORS),) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError(f"weights must be {len(OPERATORS)} non-negative numbers, not all zero")
        object.__setattr__(self, "weights", tuple(float(x) for x in w / w.sum()))
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.max_depth is None and self.branching >= 1:
            raise ValueError(
                f"p_leaf={self.p_leaf} with these weights grows unbounded trees "
                f"(mean offspring {self.branching:.3f} >= 1); set max_depth")

    @property
    def mean_arity(self) -> float:
        return float(sum(w * ARITY[op] for w, op in zip(self.weights, OPERATORS)))

    @property
    def branching(self) -> float:
        """Expected number of operator children of an operator node."""
        return (1 - self.p_leaf) * self.mean_arity

    def expected_nodes(self) -> float:
        """Mean node count of an unbounded tree (root forced to be an operator)."""
        if self.max_depth is not None:
            raise NotImplementedError("closed form only for unbounded trees")
        return (1 + self.mean_arity * self.p_leaf) / (1 - self.branching)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        d["operators"] = list(OPERATORS)
        return d


def _atom(rng: np.random.Generator, n_vars: int) -> Atom:
    var = int(rng.integers(n_vars))
    rel = GE if rng.random() < 0.5 else LE
    return Atom(var, rel, float(rng.standard_normal()))


def _operator(rng: np.random.Generator, p: FormulaDistParams, depth: int) -> Formula:
    op = OPERATORS[int(rng.choice(len(OPERATORS), p=p.weights))]
    if op == "not":
        return Not(_node(rng, p, depth + 1))
    if op in ("and", "or", "until"):
        left = _node(rng, p, depth + 1)
        right = _node(rng, p, depth + 1)
        if op == "until":
            return Until(0, int(rng.integers(1, p.t_max + 1)), left, right)
        return And(left, right) if op == "and" else Or(left, right)
    b = int(rng.integers(1, p.t_max + 1))
    child = _node(rng, p, depth + 1)
    return Eventually(0, b, child) if op == "eventually" else Always(0, b, child)


def _node(rng: np.random.Generator, p: FormulaDistParams, depth: int) -> Formula:
    if (p.max_depth is not None and depth >= p.max_depth) or rng.random() < p.p_leaf:
        return _atom(rng, p.n_vars)
    return _operator(rng, p, depth)


def sample_formula(rng: np.random.Generator, p: FormulaDistParams) -> Formula:
    return _operator(rng, p, 0)


def sample_formulae(p: FormulaDistParams, count: int, seed: int, label: str = "formulae",
                    start: int = 0) -> list[Formula]:
    """Formula i is drawn from substream (seed, label, start + i)."""
    return [sample_formula(substream(seed, label, start + i), p) for i in range(count)]


def with_variable(f: Formula, var: int) -> Formula:
    """Rename every variable in f to ``var``."""
    if isinstance(f, Atom):
        return Atom(var, f.relation, f.threshold)
    if isinstance(f, Truth):
        return f
    if isinstance(f, Not):
        return Not(with_variable(f.child, var))
    if isinstance(f, (And, Or)):
        return type(f)(with_variable(f.left, var), with_variable(f.right, var))
    if isinstance(f, (Eventually, Always)):
        return type(f)(f.a, f.b, with_variable(f.child, var))
    if isinstance(f, Until):
        return Until(f.a, f.b, with_variable(f.left, var), with_variable(f.right, var))
    raise TypeError(f"not a formula: {f!r}")


def mean_node_count(formulae) -> float:
    return float(np.mean([node_count(f) for f in formulae]))
