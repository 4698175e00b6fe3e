import math

import numpy as np
import pytest
from hypothesis import strategies as st

from stl2vec.logic import GE, LE, Always, And, Atom, Eventually, Not, Or, Truth, Until


def oracle(f, x, t=0, normalized=True):
    """Robustness straight from the recursive definition, one grid point at a time.

    ``x`` is a (T, n) array sampled at unit step.  Windows are clamped to the
    last sample; an empty window raises LookupError.
    """
    last = x.shape[0] - 1
    if isinstance(f, Truth):
        return 1.0 if normalized else math.inf
    if isinstance(f, Atom):
        v = x[t, f.var] - f.threshold if f.relation == GE else f.threshold - x[t, f.var]
        return math.tanh(v) if normalized else float(v)
    if isinstance(f, Not):
        return -oracle(f.child, x, t, normalized)
    if isinstance(f, And):
        return min(oracle(f.left, x, t, normalized), oracle(f.right, x, t, normalized))
    if isinstance(f, Or):
        return max(oracle(f.left, x, t, normalized), oracle(f.right, x, t, normalized))
    lo, hi = t + math.ceil(f.a), min(t + math.floor(f.b), last)
    if lo > hi:
        raise LookupError("empty window")
    window = range(lo, hi + 1)
    if isinstance(f, Eventually):
        return max(oracle(f.child, x, s, normalized) for s in window)
    if isinstance(f, Always):
        return min(oracle(f.child, x, s, normalized) for s in window)
    best = -math.inf
    for s in window:
        # right side at s, left side on every point of [t, s]
        val = oracle(f.right, x, s, normalized)
        for u in range(t, s + 1):
            val = min(val, oracle(f.left, x, u, normalized))
        best = max(best, val)
    return best


def formulas(n_vars=2, max_leaves=4, t_max=4, truth=True):
    leaf = st.builds(Atom, st.integers(0, n_vars - 1), st.sampled_from([GE, LE]),
                     st.floats(-2, 2, allow_nan=False).map(lambda v: round(v, 3)))
    if truth:
        leaf = leaf | st.just(Truth())
    bound = st.integers(1, t_max)
    lower = st.integers(0, 2)

    def extend(children):
        interval = st.tuples(lower, bound).filter(lambda ab: ab[0] < ab[1])
        return (st.builds(Not, children)
                | st.builds(And, children, children)
                | st.builds(Or, children, children)
                | st.builds(lambda ab, c: Eventually(ab[0], ab[1], c), interval, children)
                | st.builds(lambda ab, c: Always(ab[0], ab[1], c), interval, children)
                | st.builds(lambda ab, l, r: Until(ab[0], ab[1], l, r), interval, children, children))

    return st.recursive(leaf, extend, max_leaves=max_leaves)


def trajectories(n_vars=2, min_len=2, max_len=6):
    return st.integers(min_len, max_len).flatmap(
        lambda length: st.lists(st.floats(-3, 3, allow_nan=False, width=32), min_size=length * n_vars,
                                max_size=length * n_vars)
        .map(lambda vals: np.asarray(vals, dtype=float).reshape(length, n_vars)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one acceptance line: report(number, passed, detail)."""
    def add(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE.append((number, line))
        return passed
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
