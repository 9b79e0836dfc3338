"""Forward and backward sweeps on the noise tree and the discrete duality check.

The forward scheme treats the stiff fourth-order drift implicitly and
everything else explicitly: at node nu on level l with state y and sources
F (drift) and G (diffusion) evaluated at nu,

    (I + dt*L_f) y_child = y + dt*F +- sqrt(dt)*G.

The backward scheme mirrors it with the transposed drift operator.  Sweeping
from the leaves, each node takes the conditional mean m and the martingale
coefficient Z of its children and solves

    (I + dt*L_f^T) z = m - dt*S(level, m, Z),

with the affine drift source S evaluated explicitly on (m, Z).  Evaluating S
on the child mean rather than on the unknown keeps the backward solver the
*exact* adjoint of the forward one, which is what makes the duality residual
below and every adjoint-based gradient in the leader layer vanish at machine
precision.

Node solves within a level are independent (they share one banded factor and
are batched into a single solve); level sweeps are sequential.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mesh import Grid, ModelParams, RegionMask, build_drift_operator, solve_banded
from .tree import (BinomialTree, TreeProcess, conditional_expectation,
                   martingale_coefficient, pairwise_mean)


@dataclass(eq=False)
class ForwardInputs:
    """Data of the controlled forward equation.

    Drift source:     a*y + f*chi_O + v*chi_D + psi1
    Diffusion source: b*y + g + psi2

    Any of the processes may be None (interpreted as zero).  ``psi1`` and
    ``psi2`` are not masked, so they double as generic drift/diffusion source
    slots for auxiliary equations.
    """

    y0: np.ndarray
    params: ModelParams
    masks: RegionMask | None = None
    f: TreeProcess | None = None
    g: TreeProcess | None = None
    v: TreeProcess | None = None
    psi1: TreeProcess | None = None
    psi2: TreeProcess | None = None


@dataclass(eq=False)
class ForwardSolution:
    y: TreeProcess
    inputs: ForwardInputs


@dataclass(eq=False)
class BackwardInputs:
    """Terminal data and affine drift source for a backward equation.

    ``drift_source(level, mean, coeff)`` receives the child conditional mean
    and martingale coefficient as (2**level, n) arrays and must be affine in
    them; it is evaluated explicitly.  ``terminal`` is a single state vector
    or one vector per leaf.
    """

    terminal: np.ndarray
    drift_source: Callable[[int, np.ndarray, np.ndarray], np.ndarray] | None = None


@dataclass(eq=False)
class BackwardSolution:
    z: TreeProcess      # levels 0..N, z[N] = terminal
    mart: TreeProcess   # levels 0..N-1, martingale coefficient per node
    inputs: BackwardInputs


def _interleave(up: np.ndarray, down: np.ndarray) -> np.ndarray:
    out = np.empty((2 * up.shape[0],) + up.shape[1:])
    out[0::2] = up
    out[1::2] = down
    return out


def _source_at(proc: TreeProcess | None, level: int):
    return None if proc is None else proc.values[level]


def forward_drift_diffusion(inputs: ForwardInputs, level: int, y: np.ndarray,
                            a_tab: np.ndarray, b_tab: np.ndarray):
    """Assemble the drift source F and diffusion source G at one level."""
    F = y * a_tab[level]
    G = y * b_tab[level]
    masks = inputs.masks
    fv = _source_at(inputs.f, level)
    if fv is not None:
        F = F + fv * masks.chi_O
    vv = _source_at(inputs.v, level)
    if vv is not None:
        F = F + vv * masks.chi_D
    p1 = _source_at(inputs.psi1, level)
    if p1 is not None:
        F = F + p1
    gv = _source_at(inputs.g, level)
    if gv is not None:
        G = G + gv
    p2 = _source_at(inputs.psi2, level)
    if p2 is not None:
        G = G + p2
    return F, G


def forward_sweep(drift_op, y0: np.ndarray, tree: BinomialTree,
                  source_fn) -> TreeProcess:
    """Generic forward sweep; source_fn(level, y) -> (F, G)."""
    dt, s = tree.dt, tree.sqrt_dt
    values = [np.tile(np.asarray(y0, dtype=float), (1, 1))]
    for level in range(tree.depth):
        y = values[level]
        F, G = source_fn(level, y)
        base = y + dt * F
        dev = s * G
        rhs = _interleave(base + dev, base - dev)
        values.append(solve_banded(drift_op, dt, rhs))
    return TreeProcess(values)


def forward_solve(inputs: ForwardInputs, tree: BinomialTree,
                  grid: Grid) -> ForwardSolution:
    """Solve the controlled forward equation level by level."""
    _check_widths(inputs, tree, grid)
    op = build_drift_operator(grid, inputs.params, "forward")
    a_tab, b_tab = inputs.params.coefficient_tables(grid, tree.depth)

    def source_fn(level, y):
        return forward_drift_diffusion(inputs, level, y, a_tab, b_tab)

    y = forward_sweep(op, inputs.y0, tree, source_fn)
    return ForwardSolution(y=y, inputs=inputs)


def _check_widths(inputs: ForwardInputs, tree: BinomialTree, grid: Grid):
    if inputs.y0.shape != (grid.n_interior,):
        raise ValueError("y0 has the wrong width for the grid")
    for name in ("f", "g", "v", "psi1", "psi2"):
        proc = getattr(inputs, name)
        if proc is None:
            continue
        if proc.n_levels < tree.depth:
            raise ValueError(f"{name} must be defined on levels 0..{tree.depth - 1}")
        if proc.values[0].shape[-1] != grid.n_interior:
            raise ValueError(f"{name} has the wrong width for the grid")
    if (inputs.f is not None or inputs.v is not None) and inputs.masks is None:
        raise ValueError("masked sources need region masks")


def backward_sweep(drift_op, terminal: np.ndarray, tree: BinomialTree,
                   source_fn) -> tuple[TreeProcess, TreeProcess]:
    """Generic backward sweep; source_fn(level, mean, coeff) -> drift source."""
    dt, s = tree.dt, tree.sqrt_dt
    n_leaf = tree.nodes(tree.depth)
    term = np.asarray(terminal, dtype=float)
    if term.ndim == 1:
        term = np.tile(term, (n_leaf, 1))
    z = [None] * (tree.depth + 1)
    mart = [None] * tree.depth
    z[tree.depth] = term
    for level in range(tree.depth - 1, -1, -1):
        child = z[level + 1]
        m = 0.5 * (child[0::2] + child[1::2])
        Z = (child[0::2] - child[1::2]) / (2.0 * s)
        S = source_fn(level, m, Z)
        rhs = m if S is None else m - dt * S
        z[level] = solve_banded(drift_op, dt, rhs)
        mart[level] = Z
    return TreeProcess(z), TreeProcess(mart)


def _probe_affinity(source_fn, level: int, shape, rng=None):
    rng = rng or np.random.default_rng(0)
    m1, m2 = rng.standard_normal(shape), rng.standard_normal(shape)
    z1, z2 = rng.standard_normal(shape), rng.standard_normal(shape)
    lhs = source_fn(level, m1 + m2, z1 + z2) + source_fn(level, np.zeros(shape), np.zeros(shape))
    rhs = source_fn(level, m1, z1) + source_fn(level, m2, z2)
    scale = 1.0 + np.linalg.norm(rhs)
    if np.linalg.norm(lhs - rhs) > 1e-8 * scale:
        raise ValueError("drift_source must be affine in (mean, coeff)")


def backward_solve(inputs: BackwardInputs, tree: BinomialTree, grid: Grid,
                   params: ModelParams) -> BackwardSolution:
    """Solve a backward equation with the transposed drift operator."""
    op = build_drift_operator(grid, params, "backward")
    if inputs.drift_source is not None:
        _probe_affinity(inputs.drift_source, tree.depth - 1,
                        (tree.nodes(tree.depth - 1), grid.n_interior))
    src = inputs.drift_source or (lambda level, m, Z: None)
    z, mart = backward_sweep(op, inputs.terminal, tree, src)
    return BackwardSolution(z=z, mart=mart, inputs=inputs)


# ---------------------------------------------------------------------------
# quadrature helpers shared by the cost and diagnostic layers
# ---------------------------------------------------------------------------

def expected_inner(u: np.ndarray, w: np.ndarray, level: int, h: float) -> float:
    """E<u, w>_h at one level: h-weighted spatial dot, pairwise node mean."""
    nodewise = h * np.sum(u * w, axis=-1)
    return float(pairwise_mean(nodewise, level))


def expected_sq_norm(u: np.ndarray, level: int, h: float) -> float:
    return expected_inner(u, u, level, h)


def space_time_sq_norm(proc: TreeProcess, tree: BinomialTree, grid: Grid,
                       n_levels: int | None = None,
                       weight: np.ndarray | None = None) -> float:
    """sum_l dt * E ||proc_l||_h^2 over levels 0..n_levels-1, optionally with a
    pointwise spatial weight (e.g. a region indicator)."""
    n_levels = tree.depth if n_levels is None else n_levels
    total = 0.0
    for level in range(n_levels):
        u = proc.values[level]
        w = u if weight is None else weight * u
        total += tree.dt * expected_inner(u, w, level, grid.h)
    return total


def space_time_inner(p1: TreeProcess, p2: TreeProcess, tree: BinomialTree,
                     grid: Grid, n_levels: int | None = None,
                     weight: np.ndarray | None = None) -> float:
    n_levels = tree.depth if n_levels is None else n_levels
    total = 0.0
    for level in range(n_levels):
        u, w = p1.values[level], p2.values[level]
        if weight is not None:
            w = weight * w
        total += tree.dt * expected_inner(u, w, level, grid.h)
    return total


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def ito_pairing_check(fwd: ForwardSolution, bwd: BackwardSolution,
                      tree: BinomialTree, grid: Grid) -> float:
    """Relative defect of the discrete product rule between a forward and a
    backward solution on the same tree and grid:

        E<y_N, z_N> - <y_0, z_0>
          = sum_l dt * E[ <F_l, z_l> + <ybar_l, S_l> + <Gbar_l, Z_l> ],

    where ybar/Gbar are the conditional mean and martingale coefficient of
    the forward children (the post-drift splitting of the implicit step) and
    S is the backward drift source re-evaluated on (mean, coeff).  The
    identity is exact because the backward drift operator is the transpose of
    the forward one; the returned value is |lhs - rhs| / (1 + |lhs|).
    """
    if fwd.y.values[0].shape[-1] != bwd.z.values[0].shape[-1]:
        raise ValueError("forward and backward solutions have mismatched widths")
    h, dt, N = grid.h, tree.dt, tree.depth
    a_tab, b_tab = fwd.inputs.params.coefficient_tables(grid, N)
    src = bwd.inputs.drift_source

    lhs = (expected_inner(fwd.y.values[N], bwd.z.values[N], N, h)
           - expected_inner(fwd.y.values[0], bwd.z.values[0], 0, h))
    rhs = 0.0
    for level in range(N):
        y = fwd.y.values[level]
        F, _ = forward_drift_diffusion(fwd.inputs, level, y, a_tab, b_tab)
        ybar = conditional_expectation(fwd.y, level + 1)
        gbar = martingale_coefficient(fwd.y, level + 1, tree)
        z = bwd.z.values[level]
        Z = bwd.mart.values[level]
        term = expected_inner(F, z, level, h)
        if src is not None:
            m = conditional_expectation(bwd.z, level + 1)
            S = src(level, m, Z)
            if S is not None:
                term += expected_inner(ybar, S, level, h)
        term += expected_inner(gbar, Z, level, h)
        rhs += dt * term
    return abs(lhs - rhs) / (1.0 + abs(lhs))


@dataclass
class EnergyReport:
    max_state_sq: float          # max over levels of E ||y||^2
    dissipation_sq: float        # sum_l dt E ||y_xx||^2
    data_sq: float               # ||y0||^2 plus all source norms
    ratio: float


def energy_report(fwd: ForwardSolution, tree: BinomialTree,
                  grid: Grid) -> EnergyReport:
    """Energy bookkeeping for a forward solution: the peak mean-square state,
    the accumulated second-derivative dissipation, and their ratio against
    the squared data norm."""
    from .mesh import build_derivative_operator

    h = grid.h
    d2 = build_derivative_operator(grid, 2)
    max_sq = max(expected_sq_norm(fwd.y.values[l], l, h)
                 for l in range(tree.depth + 1))
    diss = 0.0
    for level in range(tree.depth):
        diss += tree.dt * expected_sq_norm(d2.apply(fwd.y.values[level]), level, h)

    inp = fwd.inputs
    data = h * float(np.sum(inp.y0 ** 2))
    masks = inp.masks
    for proc, weight in ((inp.f, None if masks is None else masks.chi_O),
                         (inp.v, None if masks is None else masks.chi_D),
                         (inp.g, None), (inp.psi1, None), (inp.psi2, None)):
        if proc is not None:
            data += space_time_sq_norm(proc, tree, grid, weight=weight)
    num = max_sq + diss
    ratio = 0.0 if num == 0.0 else (num / data if data > 0 else float("inf"))
    return EnergyReport(max_state_sq=max_sq, dissipation_sq=diss,
                        data_sq=data, ratio=ratio)
