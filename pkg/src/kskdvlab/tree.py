"""Binomial surrogate of the Brownian filtration and adapted tree processes.

Time is discretized into N steps of size dt = T/N.  The noise increment on
each step is +-sqrt(dt) with equal probability, so level l of the tree has
2**l nodes, every path has probability 2**-l, and conditional expectations
and martingale representations are exact two-point formulas:

    up child   = mean + sqrt(dt) * Z
    down child = mean - sqrt(dt) * Z

Node addressing is level-major: the children of node i at level l are 2*i
(up move) and 2*i + 1 (down move) at level l + 1.  Adaptedness is structural
because a node's value can only depend on the path that reaches it.

Trees and processes are immutable-by-convention after construction; all
reductions use a fixed pairwise order so expectations are bitwise
reproducible regardless of how callers parallelize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_DEPTH = 20  # memory guard: 2**(N+1) - 1 nodes


@dataclass(frozen=True)
class BinomialTree:
    depth: int
    horizon: float

    @property
    def dt(self) -> float:
        return self.horizon / self.depth

    @property
    def sqrt_dt(self) -> float:
        return float(np.sqrt(self.dt))

    def nodes(self, level: int) -> int:
        return 1 << level

    def times(self) -> np.ndarray:
        """Level times t_l = l * dt for l = 0..depth."""
        return self.dt * np.arange(self.depth + 1)


def build_tree(depth: int, horizon: float) -> BinomialTree:
    if not (1 <= depth <= MAX_DEPTH):
        raise ValueError(f"depth must be in [1, {MAX_DEPTH}], got {depth}")
    if not horizon > 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    return BinomialTree(depth=int(depth), horizon=float(horizon))


@dataclass
class TreeProcess:
    """Adapted process: values[l] has shape (2**l,) or (2**l, width)."""

    values: list

    def __post_init__(self):
        for level, arr in enumerate(self.values):
            if arr.shape[0] != 1 << level:
                raise ValueError(
                    f"level {level} has {arr.shape[0]} nodes, expected {1 << level}")

    @property
    def n_levels(self) -> int:
        return len(self.values)

    @classmethod
    def zeros(cls, n_levels: int, width: int | None = None) -> "TreeProcess":
        shape = (lambda l: (1 << l,)) if width is None else (lambda l: (1 << l, width))
        return cls([np.zeros(shape(l)) for l in range(n_levels)])

    @classmethod
    def constant(cls, n_levels: int, value) -> "TreeProcess":
        value = np.asarray(value, dtype=float)
        return cls([np.broadcast_to(value, (1 << l,) + value.shape).copy()
                    for l in range(n_levels)])

    @classmethod
    def random(cls, n_levels: int, rng: np.random.Generator,
               width: int | None = None, scale: float = 1.0) -> "TreeProcess":
        shape = (lambda l: (1 << l,)) if width is None else (lambda l: (1 << l, width))
        return cls([scale * rng.standard_normal(shape(l)) for l in range(n_levels)])

    def copy(self) -> "TreeProcess":
        return TreeProcess([arr.copy() for arr in self.values])

    def scaled(self, c: float) -> "TreeProcess":
        return TreeProcess([c * arr for arr in self.values])


def conditional_expectation(proc: TreeProcess, level: int) -> np.ndarray:
    """Average the two children of each level-(level-1) node; returns the
    value array at level - 1."""
    if not 1 <= level < proc.n_levels:
        raise ValueError(f"process has no level {level}")
    v = proc.values[level]
    return 0.5 * (v[0::2] + v[1::2])


def martingale_coefficient(proc: TreeProcess, level: int,
                           tree: BinomialTree) -> np.ndarray:
    """Scaled child difference (up - down) / (2 sqrt(dt)) at level - 1.

    Together with the conditional expectation this reconstructs the children
    exactly: up = mean + sqrt(dt)*Z, down = mean - sqrt(dt)*Z.
    """
    if not 1 <= level < proc.n_levels:
        raise ValueError(f"process has no level {level}")
    v = proc.values[level]
    return (v[0::2] - v[1::2]) / (2.0 * tree.sqrt_dt)


def pairwise_mean(arr: np.ndarray, level: int) -> np.ndarray:
    """Uniform 2**-level weighted node sum with a fixed pairwise reduction
    order (adjacent pairs up the tree), bitwise reproducible."""
    acc = np.asarray(arr, dtype=float)
    if acc.shape[0] != 1 << level:
        raise ValueError(f"array has {acc.shape[0]} nodes, expected {1 << level}")
    acc = acc.copy()
    while acc.shape[0] > 1:
        acc = acc[0::2] + acc[1::2]
    return acc[0] * 2.0 ** (-level)


def expectation(proc: TreeProcess, level: int):
    """Mean value of the process at the given level."""
    if level >= proc.n_levels:
        raise ValueError(f"process has no level {level}")
    return pairwise_mean(proc.values[level], level)


def sample_path(tree: BinomialTree, seed: int) -> np.ndarray:
    """Reproducible sequence of +-1 branch choices (one per time step)."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=tree.depth) * 2 - 1


def path_node_indices(choices: np.ndarray) -> np.ndarray:
    """Node index visited at each level 0..len(choices) for a choice
    sequence of +-1 moves (+1 selects the up child 2*i)."""
    idx = np.zeros(len(choices) + 1, dtype=np.int64)
    for k, c in enumerate(choices):
        idx[k + 1] = 2 * idx[k] + (0 if c > 0 else 1)
    return idx


def brownian_process(tree: BinomialTree) -> TreeProcess:
    """The discrete Brownian motion itself: W at every node, levels 0..N."""
    values = [np.zeros(1)]
    s = tree.sqrt_dt
    for _ in range(tree.depth):
        prev = values[-1]
        nxt = np.empty(2 * prev.shape[0])
        nxt[0::2] = prev + s
        nxt[1::2] = prev - s
        values.append(nxt)
    return TreeProcess(values)
