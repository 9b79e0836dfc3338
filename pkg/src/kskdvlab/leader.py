"""Leader layer: penalized terminal control of the coupled optimality system.

The leaders minimize half their squared norm plus (1/2 eps) times the
expected squared terminal state of the *coupled* follower-disturbance
system.  The gradient is computed through the adjoint pair (p, P) and the
auxiliary forward state q; its defining equations are the exact stationarity
conditions of the discrete problem, so the adjoint gradient agrees with
finite differences to roundoff:

  * the adjoint terminal enters through one implicit step (solve with the
    transposed drift) exactly like every interior level,
  * all couplings read the adjoint at the child conditional mean, the same
    placement used by the follower characterization,
  * the gradient is grad_f = chi_O (f + p),  grad_g = g + P, so the optimum
    satisfies (f, g) = (-p chi_O, -P); equivalently, flipping the sign of the
    adjoint terminal recovers the usual convention (f, g) = (p chi_O, P).

Conjugate gradients on (f, g) drives the quadratic to the stated relative
gradient tolerance; the epsilon schedule is swept with warm starts.  Direct
sparse assemblies of the adjoint system and of the full stationarity system
serve as oracles.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import carleman
from .game import (GameParams, NonContractionError, SaddleProblem,
                   SaddleSolution, Targets, _TreeIndexer, _add_block,
                   _derivative_ops, evaluate_leader_cost, solve_saddle_point,
                   tracking_sources)
from .mesh import Grid, ModelParams, RegionMask, build_drift_operator, solve_banded
from .solvers import (BackwardInputs, ForwardInputs, backward_solve,
                      expected_sq_norm, forward_solve, space_time_inner,
                      space_time_sq_norm)
from .tree import (BinomialTree, TreeProcess, conditional_expectation,
                   martingale_coefficient)

SIGN_CONVENTION = ("adjoint terminal p_T = +y(T)/eps with optimum "
                   "(f, g) = (-p chi_O, -P)")


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")


@dataclass(frozen=True)
class PenalizedConfig:
    epsilon: float = 1e-6
    cg_tol: float = 1e-6
    cg_max_iter: int = 400
    epsilon_schedule: tuple = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        sched = tuple(self.epsilon_schedule)
        if any(e <= 0 for e in sched) or any(
                a <= b for a, b in zip(sched, sched[1:])):
            raise ValueError("epsilon_schedule must be positive and strictly decreasing")


@dataclass(eq=False)
class LeaderData:
    """Everything the leader problem holds fixed (no controls)."""

    y0: np.ndarray
    targets: Targets
    params: ModelParams
    game: GameParams
    masks: RegionMask

    def saddle_problem(self, f, g) -> SaddleProblem:
        return SaddleProblem(f=f, g=g, y0=self.y0, targets=self.targets,
                             params=self.params, game=self.game,
                             masks=self.masks)


@dataclass(eq=False)
class AdjointSolution:
    p: TreeProcess          # post-solve values, levels 0..N
    p_mean: TreeProcess     # child conditional mean, levels 0..N-1
    P: TreeProcess          # martingale coefficient, levels 0..N-1
    q: TreeProcess          # auxiliary forward state, levels 0..N-1, q(0) = 0
    iterations: int
    residual: float


def _q_forward(data: LeaderData, p_mean: TreeProcess, P: TreeProcess,
               tree, grid) -> TreeProcess:
    game, masks = data.game, data.masks
    drift = TreeProcess([(masks.chi_D / game.beta - 1.0 / game.delta1) * arr
                         for arr in p_mean.values])
    diff = TreeProcess([-arr / game.delta2 for arr in P.values])
    inputs = ForwardInputs(y0=np.zeros(grid.n_interior), params=data.params,
                           masks=masks, psi1=drift, psi2=diff)
    full = forward_solve(inputs, tree, grid).y
    return TreeProcess(full.values[:tree.depth])


def _p_backward(data: LeaderData, q: TreeProcess, terminal: np.ndarray,
                tree, grid):
    a_tab, b_tab = data.params.coefficient_tables(grid, tree.depth)
    kq = tracking_sources(q, Targets(), data.masks, tree, grid)

    def src(level, m, Z):
        return -(a_tab[level] * m + b_tab[level] * Z) + kq[level]

    return backward_solve(BackwardInputs(terminal=terminal, drift_source=src),
                          tree, grid, data.params)


def solve_adjoint_system(p_T: np.ndarray, data: LeaderData,
                         tree: BinomialTree, grid: Grid, *, tol: float = 1e-11,
                         max_iter: int = 100,
                         allow_weak_coupling: bool = False) -> AdjointSolution:
    """Picard iteration on the coupled adjoint pair and auxiliary state.

    ``p_T`` is the terminal data (one vector, or one per leaf); it enters
    through one implicit step with the transposed drift so that the chain
    rule through the terminal penalty is exact at the discrete level.
    """
    if not data.game.validate(data.params) and not allow_weak_coupling:
        est = data.game.coupling_estimate(data.params)
        raise ValueError(
            f"coupling estimate {est:.3g} >= 0.9; pass allow_weak_coupling=True "
            "to override")
    n, N = grid.n_interior, tree.depth
    op_b = build_drift_operator(grid, data.params, "backward")
    term = np.asarray(p_T, dtype=float)
    if term.ndim == 1:
        term = np.tile(term, (tree.nodes(N), 1))
    terminal = solve_banded(op_b, tree.dt, term)

    q = TreeProcess.zeros(N, n)
    p_mean = TreeProcess.zeros(N, n)
    P = TreeProcess.zeros(N, n)
    trace: list[float] = []
    bwd = None
    for iteration in range(1, max_iter + 1):
        bwd = _p_backward(data, q, terminal, tree, grid)
        p_mean_new = TreeProcess([conditional_expectation(bwd.z, l + 1)
                                  for l in range(N)])
        P_new = TreeProcess(list(bwd.mart.values))
        q_new = _q_forward(data, p_mean_new, P_new, tree, grid)
        num = (space_time_sq_norm(_diff(p_mean_new, p_mean), tree, grid)
               + space_time_sq_norm(_diff(P_new, P), tree, grid)
               + space_time_sq_norm(_diff(q_new, q), tree, grid))
        den = (space_time_sq_norm(p_mean_new, tree, grid)
               + space_time_sq_norm(P_new, tree, grid))
        res = float(np.sqrt(num) / (1.0 + np.sqrt(den)))
        trace.append(res)
        p_mean, P, q = p_mean_new, P_new, q_new
        if res <= tol:
            break
        if len(trace) >= 4 and trace[-1] > 0.999 * trace[-4]:
            raise NonContractionError("adjoint iteration stagnated", trace)
    else:
        raise NonContractionError(
            f"adjoint iteration did not reach {tol:.1e} in {max_iter} passes",
            trace)
    return AdjointSolution(p=bwd.z, p_mean=p_mean, P=P, q=q,
                           iterations=len(trace), residual=trace[-1])


def _diff(a: TreeProcess, b: TreeProcess) -> TreeProcess:
    return TreeProcess([x - y for x, y in zip(a.values, b.values)])


# ---------------------------------------------------------------------------
# penalized functional and its gradient
# ---------------------------------------------------------------------------

def penalized_cost(f, g, epsilon: float, saddle: SaddleSolution,
                   data: LeaderData, tree, grid) -> float:
    terminal = expected_sq_norm(saddle.y.y.values[tree.depth], tree.depth,
                                grid.h)
    return (evaluate_leader_cost(f, g, data.masks, tree, grid).total
            + 0.5 / epsilon * terminal)


def penalized_gradient(f, g, epsilon: float, data: LeaderData,
                       tree: BinomialTree, grid: Grid, *,
                       tol: float = 1e-11, allow_weak_coupling: bool = False):
    """Adjoint gradient of the penalized functional at (f, g).

    Returns (grad_f, grad_g, saddle_solution); the saddle solution carries
    the coupled state used for the terminal penalty.
    """
    saddle = solve_saddle_point(data.saddle_problem(f, g), tree, grid, tol=tol,
                                allow_weak_coupling=allow_weak_coupling)
    p_T = saddle.y.y.values[tree.depth] / epsilon
    adj = solve_adjoint_system(p_T, data, tree, grid, tol=tol,
                               allow_weak_coupling=allow_weak_coupling)
    n, N = grid.n_interior, tree.depth
    fz = f if f is not None else TreeProcess.zeros(N, n)
    gz = g if g is not None else TreeProcess.zeros(N, n)
    grad_f = TreeProcess([data.masks.chi_O * (fv + pv) for fv, pv in
                          zip(fz.values, adj.p_mean.values)])
    grad_g = TreeProcess([gv + Pv for gv, Pv in zip(gz.values, adj.P.values)])
    return grad_f, grad_g, saddle


def _pair_inner(f1, g1, f2, g2, data, tree, grid) -> float:
    return (space_time_inner(f1, f2, tree, grid, weight=data.masks.chi_O)
            + space_time_inner(g1, g2, tree, grid))


@dataclass
class MinimizeReport:
    iterations: int
    relative_gradient: float
    char_residual_f: float
    char_residual_g: float
    cost: float
    terminal_sq: float
    converged: bool
    cost_trace: list = field(default_factory=list)


def minimize_penalized(epsilon: float, data: LeaderData,
                       config: PenalizedConfig, tree: BinomialTree, grid: Grid,
                       warm_start=None, *, solver_tol: float = 1e-11):
    """Conjugate gradients on the leaders for one penalty value.

    The inner product is the tree-weighted space-time one (f restricted to
    the leader region).  Stops at relative gradient <= cg_tol with the
    characterization residuals within 10x of it; if the iteration budget runs
    out a partial result is returned with ``converged=False``.
    """
    n, N = grid.n_interior, tree.depth
    zeros = lambda: TreeProcess.zeros(N, n)
    axpy = lambda a, x, y: TreeProcess([yv + a * xv for xv, yv in
                                        zip(x.values, y.values)])

    cf, cg_, sol0 = penalized_gradient(zeros(), zeros(), epsilon, data, tree,
                                       grid, tol=solver_tol)

    if warm_start is None:
        f, g = zeros(), zeros()
        rf = TreeProcess([-v for v in cf.values])
        rg = TreeProcess([-v for v in cg_.values])
        saddle = sol0
    else:
        f, g = warm_start[0].copy(), warm_start[1].copy()
        gf, gg, saddle = penalized_gradient(f, g, epsilon, data, tree, grid,
                                            tol=solver_tol)
        rf = TreeProcess([-v for v in gf.values])
        rg = TreeProcess([-v for v in gg.values])

    cost = penalized_cost(f, g, epsilon, saddle, data, tree, grid)
    trace = [cost]
    rr = _pair_inner(rf, rg, rf, rg, data, tree, grid)
    df, dg = rf.copy(), rg.copy()

    def status():
        xn = np.sqrt(_pair_inner(f, g, f, g, data, tree, grid))
        rel = np.sqrt(rr) / (1.0 + xn)
        fn = np.sqrt(space_time_sq_norm(f, tree, grid, weight=data.masks.chi_O))
        gn = np.sqrt(space_time_sq_norm(g, tree, grid))
        chf = np.sqrt(space_time_sq_norm(rf, tree, grid,
                                         weight=data.masks.chi_O)) / (1.0 + fn)
        chg = np.sqrt(space_time_sq_norm(rg, tree, grid)) / (1.0 + gn)
        return rel, chf, chg

    iterations = 0
    rel, chf, chg = status()
    converged = rr == 0.0 or (rel <= config.cg_tol
                              and max(chf, chg) <= 10 * config.cg_tol)
    while not converged and iterations < config.cg_max_iter:
        qf, qg, _ = penalized_gradient(df, dg, epsilon, data, tree, grid,
                                       tol=solver_tol)
        qf = _diff(qf, cf)
        qg = _diff(qg, cg_)
        dqd = _pair_inner(df, dg, qf, qg, data, tree, grid)
        if dqd <= 0:
            break
        alpha = rr / dqd
        f, g = axpy(alpha, df, f), axpy(alpha, dg, g)
        rf, rg = axpy(-alpha, qf, rf), axpy(-alpha, qg, rg)
        cost = cost - 0.5 * alpha * rr  # exact quadratic decrement
        trace.append(cost)
        rr_new = _pair_inner(rf, rg, rf, rg, data, tree, grid)
        beta = rr_new / rr
        df, dg = axpy(beta, df, rf), axpy(beta, dg, rg)
        rr = rr_new
        iterations += 1
        rel, chf, chg = status()
        converged = rel <= config.cg_tol and max(chf, chg) <= 10 * config.cg_tol

    # refresh the gradient and cost exactly at the final iterate; convergence
    # is re-judged on the true gradient, not the drifting recurrence residual
    gf, gg, saddle = penalized_gradient(f, g, epsilon, data, tree, grid,
                                        tol=solver_tol)
    rf = TreeProcess([-v for v in gf.values])
    rg = TreeProcess([-v for v in gg.values])
    rr = _pair_inner(rf, rg, rf, rg, data, tree, grid)
    rel, chf, chg = status()
    converged = rr == 0.0 or (rel <= config.cg_tol
                              and max(chf, chg) <= 10 * config.cg_tol)
    cost = penalized_cost(f, g, epsilon, saddle, data, tree, grid)
    terminal = expected_sq_norm(saddle.y.y.values[N], N, grid.h)
    report = MinimizeReport(iterations=iterations, relative_gradient=rel,
                            char_residual_f=chf, char_residual_g=chg,
                            cost=cost, terminal_sq=terminal,
                            converged=bool(converged), cost_trace=trace)
    return f, g, saddle, report


@dataclass
class SweepRow:
    epsilon: float
    terminal_sq: float
    f_sq: float
    g_sq: float
    leader_cost: float
    cg_iterations: int
    char_residual_f: float
    char_residual_g: float
    converged: bool


def epsilon_sweep(data: LeaderData, config: PenalizedConfig,
                  tree: BinomialTree, grid: Grid, *,
                  solver_tol: float = 1e-11):
    """One penalized minimization per epsilon, warm-started down the schedule."""
    rows: list[SweepRow] = []
    warm = None
    f = g = saddle = None
    for eps in config.epsilon_schedule:
        f, g, saddle, rep = minimize_penalized(eps, data, config, tree, grid,
                                               warm_start=warm,
                                               solver_tol=solver_tol)
        warm = (f, g)
        f_sq = space_time_sq_norm(f, tree, grid, weight=data.masks.chi_O)
        g_sq = space_time_sq_norm(g, tree, grid)
        rows.append(SweepRow(epsilon=eps, terminal_sq=rep.terminal_sq,
                             f_sq=f_sq, g_sq=g_sq,
                             leader_cost=0.5 * (f_sq + g_sq),
                             cg_iterations=rep.iterations,
                             char_residual_f=rep.char_residual_f,
                             char_residual_g=rep.char_residual_g,
                             converged=rep.converged))
    return rows, f, g, saddle


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PipelineReport:
    f_hat: TreeProcess
    g_hat: TreeProcess
    saddle: SaddleSolution
    sweep_rows: list
    y0_sq: float
    terminal_sq: float
    decay_ratio: float
    leader_cost: float
    char_residual_f: float
    char_residual_g: float
    target_weighted_norm: float
    control_estimate_ratio: float
    sign_convention: str
    config_hash: str
    timings: dict


def weighted_target_norm(data: LeaderData, cp: carleman.CarlemanParams,
                         kappa: carleman.KappaFunction, tree: BinomialTree,
                         grid: Grid) -> float:
    """Squared target norm with the blow-up weight rho(t)^2; contributions
    where the target vanishes are dropped so that an unbounded weight only
    matters where it multiplies data."""
    rho = carleman.rho_profile(cp, kappa, data.params.T, tree.times())
    total = 0.0
    for i in range(3):
        tgt = data.targets.component(i)
        if tgt is None:
            continue
        for level in range(tree.depth):
            vals = data.masks.chi(i) * tgt.values[level] ** 2
            nodewise = grid.h * np.sum(
                np.where(vals == 0.0, 0.0, rho[level] ** 2 * vals), axis=-1)
            from .tree import pairwise_mean
            total += tree.dt * float(pairwise_mean(nodewise, level))
    return total


def stackelberg_pipeline(data: LeaderData, config: PenalizedConfig,
                         tree: BinomialTree, grid: Grid,
                         cp: carleman.CarlemanParams | None = None,
                         config_hash: str = "", *,
                         solver_tol: float = 1e-11) -> PipelineReport:
    """Full hierarchical run: validate the target weight, sweep the penalty
    schedule, re-solve the follower game at the final leaders, and report the
    empirical control-estimate constant."""
    timings: dict[str, float] = {}
    cp = cp or carleman.CarlemanParams.default(data.params.T)

    t0 = time.perf_counter()
    try:
        kappa = carleman.construct_kappa(data.masks.intervals["B"])
        target_norm = weighted_target_norm(data, cp, kappa, tree, grid)
        if not np.isfinite(target_norm):
            raise ValueError(
                "target weighted norm is not finite; targets must vanish "
                "where the blow-up weight overflows")
    except Exception as exc:
        raise StageFailure("target-norm", exc) from exc
    timings["target-norm"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        rows, f_hat, g_hat, _ = epsilon_sweep(data, config, tree, grid,
                                              solver_tol=solver_tol)
    except Exception as exc:
        raise StageFailure("epsilon-sweep", exc) from exc
    timings["epsilon-sweep"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        saddle = solve_saddle_point(data.saddle_problem(f_hat, g_hat), tree,
                                    grid, tol=solver_tol)
        gf, gg, _ = penalized_gradient(f_hat, g_hat,
                                       config.epsilon_schedule[-1], data,
                                       tree, grid, tol=solver_tol)
        fn = np.sqrt(space_time_sq_norm(f_hat, tree, grid,
                                        weight=data.masks.chi_O))
        gn = np.sqrt(space_time_sq_norm(g_hat, tree, grid))
        chf = np.sqrt(space_time_sq_norm(gf, tree, grid,
                                         weight=data.masks.chi_O)) / (1.0 + fn)
        chg = np.sqrt(space_time_sq_norm(gg, tree, grid)) / (1.0 + gn)
    except Exception as exc:
        raise StageFailure("saddle-verification", exc) from exc
    timings["saddle-verification"] = time.perf_counter() - t0

    y0_sq = grid.h * float(np.sum(data.y0 ** 2))
    terminal_sq = rows[-1].terminal_sq
    f_sq, g_sq = rows[-1].f_sq, rows[-1].g_sq
    denom = y0_sq + target_norm
    estimate = (f_sq + g_sq) / denom if denom > 0 else 0.0
    decay = terminal_sq / y0_sq if y0_sq > 0 else 0.0
    return PipelineReport(
        f_hat=f_hat, g_hat=g_hat, saddle=saddle, sweep_rows=rows,
        y0_sq=y0_sq, terminal_sq=terminal_sq, decay_ratio=decay,
        leader_cost=0.5 * (f_sq + g_sq), char_residual_f=chf,
        char_residual_g=chg, target_weighted_norm=target_norm,
        control_estimate_ratio=estimate, sign_convention=SIGN_CONVENTION,
        config_hash=config_hash, timings=timings)


# ---------------------------------------------------------------------------
# direct assemblies (oracles)
# ---------------------------------------------------------------------------

def _assembly_pieces(data: LeaderData, tree, grid):
    n, N = grid.n_interior, tree.depth
    params = data.params
    a_tab, b_tab = params.coefficient_tables(grid, N)
    A = np.eye(n) + tree.dt * build_drift_operator(grid, params,
                                                   "forward").todense()
    ops = _derivative_ops(grid)
    K = np.zeros((n, n))
    for i in range(3):
        di = np.eye(n) if ops[i] is None else ops[i].todense()
        K += di.T @ (data.masks.chi(i)[:, None] * di)
    return a_tab, b_tab, A, A.T.copy(), K


def direct_adjoint_solve(p_T: np.ndarray, data: LeaderData,
                         tree: BinomialTree, grid: Grid) -> AdjointSolution:
    """Sparse assembly of the coupled adjoint system over all nodes."""
    n, N = grid.n_interior, tree.depth
    dt, s = tree.dt, tree.sqrt_dt
    if (2 ** (N + 1) - 1) * n > 200_000:
        raise ValueError("instance exceeds the direct-assembly size guard")
    game, masks = data.game, data.masks
    a_tab, b_tab, A, AT, K = _assembly_pieces(data, tree, grid)
    eye = np.eye(n)

    px = _TreeIndexer(range(1, N + 1), n)
    qx = _TreeIndexer(range(1, N), n, offset=px.end)
    size = qx.end
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    rhs = np.zeros(size)
    row0 = 0

    term = np.asarray(p_T, dtype=float)
    if term.ndim == 1:
        term = np.tile(term, (tree.nodes(N), 1))

    # p equations: leaves carry the terminal data, interior levels couple to
    # their children and to q
    for node in range(1 << N):
        r = row0
        row0 += n
        _add_block(rows, cols, vals, r, px.block(N, node), AT)
        rhs[r:r + n] = term[node]
    for level in range(N - 1, 0, -1):
        coef = eye + dt * np.diag(a_tab[level])
        bdiag = np.diag(b_tab[level])
        for node in range(1 << level):
            r = row0
            row0 += n
            _add_block(rows, cols, vals, r, px.block(level, node), AT)
            pu = px.block(level + 1, 2 * node)
            pd = px.block(level + 1, 2 * node + 1)
            _add_block(rows, cols, vals, r, pu, -0.5 * coef - 0.5 * s * bdiag)
            _add_block(rows, cols, vals, r, pd, -0.5 * coef + 0.5 * s * bdiag)
            _add_block(rows, cols, vals, r, qx.block(level, node), dt * K)

    # q equations: children of every node at levels 0..N-2; the root value
    # vanishes, so level-1 rows have no parent term
    for level in range(0, N - 1):
        coef = eye + dt * np.diag(a_tab[level])
        bdiag = np.diag(b_tab[level])
        m_coef = dt * (np.diag(masks.chi_D) / game.beta - eye / game.delta1)
        for node in range(1 << level):
            pu = px.block(level + 1, 2 * node)
            pd = px.block(level + 1, 2 * node + 1)
            for sign, child in ((+1.0, 2 * node), (-1.0, 2 * node + 1)):
                r = row0
                row0 += n
                _add_block(rows, cols, vals, r, qx.block(level + 1, child), A)
                if level >= 1:
                    _add_block(rows, cols, vals, r, qx.block(level, node),
                               -(coef + sign * s * bdiag))
                # -dt (chi_D/beta - 1/delta1) m^p + sign sqrt(dt)/delta2 Z^p
                _add_block(rows, cols, vals, r, pu,
                           -0.5 * m_coef + (sign / (2.0 * game.delta2)) * eye)
                _add_block(rows, cols, vals, r, pd,
                           -0.5 * m_coef - (sign / (2.0 * game.delta2)) * eye)

    assert row0 == size
    mat = sp.csr_matrix(sp.coo_matrix((vals, (rows, cols)), shape=(size, size)))
    sol = spla.spsolve(mat, rhs)
    if not np.all(np.isfinite(sol)):
        raise ValueError("singular assembly: the coupled system factorization failed")

    pvals = [np.zeros((1 << level, n)) for level in range(N + 1)]
    for level in range(1, N + 1):
        blk = sol[px.block(level, 0):px.block(level, 0) + (1 << level) * n]
        pvals[level] = blk.reshape(1 << level, n).copy()
    qvals = [np.zeros((1 << level, n)) for level in range(N)]
    for level in range(1, N):
        blk = sol[qx.block(level, 0):qx.block(level, 0) + (1 << level) * n]
        qvals[level] = blk.reshape(1 << level, n).copy()
    p = TreeProcess(pvals)
    # the root post-solve value is determined by the level-1 values
    a_tab0 = a_tab[0]
    m0 = conditional_expectation(p, 1)
    Z0 = martingale_coefficient(p, 1, tree)
    op_b = build_drift_operator(grid, data.params, "backward")
    kq0 = tracking_sources(TreeProcess(qvals), Targets(), masks, tree,
                           grid)[0]
    rhs0 = m0 + dt * (a_tab0 * m0 + b_tab[0] * Z0) - dt * kq0
    p.values[0] = solve_banded(op_b, dt, rhs0)
    p_mean = TreeProcess([conditional_expectation(p, l + 1) for l in range(N)])
    P = TreeProcess([martingale_coefficient(p, l + 1, tree) for l in range(N)])
    resid = np.linalg.norm(mat @ sol - rhs) / (1.0 + np.linalg.norm(rhs))
    return AdjointSolution(p=p, p_mean=p_mean, P=P, q=TreeProcess(qvals),
                           iterations=0, residual=float(resid))


def direct_penalized_solve(epsilon: float, data: LeaderData,
                           tree: BinomialTree, grid: Grid):
    """Sparse assembly of the full leader stationarity system with the
    controls eliminated through (f, g) = (-p chi_O, -P).

    Returns (f, g, cost); the oracle for the conjugate-gradient path.
    """
    n, N = grid.n_interior, tree.depth
    dt, s = tree.dt, tree.sqrt_dt
    if (2 ** (N + 1) - 1) * n > 100_000:
        raise ValueError("instance exceeds the direct-assembly size guard")
    game, masks = data.game, data.masks
    a_tab, b_tab, A, AT, K = _assembly_pieces(data, tree, grid)
    eye = np.eye(n)
    chiO = np.diag(masks.chi_O)

    yx = _TreeIndexer(range(1, N + 1), n)
    zx = _TreeIndexer(range(1, N), n, offset=yx.end)
    px = _TreeIndexer(range(1, N + 1), n, offset=zx.end)
    qx = _TreeIndexer(range(1, N), n, offset=px.end)
    size = qx.end
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    rhs = np.zeros(size)
    row0 = 0

    from .game import _tracking_data_part
    track_const = _tracking_data_part(data.saddle_problem(None, None), tree,
                                      grid)
    m_coef_zeta = (dt / game.delta1) * eye - (dt / game.beta) * np.diag(masks.chi_D)
    m_coef_q = dt * (np.diag(masks.chi_D) / game.beta - eye / game.delta1)

    # forward state equations with f = -chi_O m^p and g = -Z^p substituted
    for level in range(N):
        coef = eye + dt * np.diag(a_tab[level])
        bdiag = np.diag(b_tab[level])
        for node in range(1 << level):
            zu = zx.block(level + 1, 2 * node) if level + 1 < N else None
            zd = zx.block(level + 1, 2 * node + 1) if level + 1 < N else None
            pu = px.block(level + 1, 2 * node)
            pd = px.block(level + 1, 2 * node + 1)
            for sign, child in ((+1.0, 2 * node), (-1.0, 2 * node + 1)):
                r = row0
                row0 += n
                _add_block(rows, cols, vals, r, yx.block(level + 1, child), A)
                if level >= 1:
                    _add_block(rows, cols, vals, r, yx.block(level, node),
                               -(coef + sign * s * bdiag))
                else:
                    rhs[r:r + n] += (coef + sign * s * bdiag) @ data.y0
                if zu is not None:
                    _add_block(rows, cols, vals, r, zu,
                               -0.5 * m_coef_zeta - (sign / (2 * game.delta2)) * eye)
                    _add_block(rows, cols, vals, r, zd,
                               -0.5 * m_coef_zeta + (sign / (2 * game.delta2)) * eye)
                # -dt chi_O f - sign sqrt(dt) g = +dt chi_O m^p + sign sqrt(dt) Z^p
                _add_block(rows, cols, vals, r, pu, 0.5 * dt * chiO + 0.5 * sign * eye)
                _add_block(rows, cols, vals, r, pd, 0.5 * dt * chiO - 0.5 * sign * eye)

    # follower multiplier equations
    for level in range(1, N):
        coef = eye + dt * np.diag(a_tab[level])
        bdiag = np.diag(b_tab[level])
        for node in range(1 << level):
            r = row0
            row0 += n
            _add_block(rows, cols, vals, r, zx.block(level, node), AT)
            if level + 1 < N:
                zu = zx.block(level + 1, 2 * node)
                zd = zx.block(level + 1, 2 * node + 1)
                _add_block(rows, cols, vals, r, zu, -0.5 * coef - 0.5 * s * bdiag)
                _add_block(rows, cols, vals, r, zd, -0.5 * coef + 0.5 * s * bdiag)
            _add_block(rows, cols, vals, r, yx.block(level, node), -dt * K)
            rhs[r:r + n] += dt * track_const[level][node]

    # adjoint equations: leaves tie p to the terminal state
    for node in range(1 << N):
        r = row0
        row0 += n
        _add_block(rows, cols, vals, r, px.block(N, node), AT)
        _add_block(rows, cols, vals, r, yx.block(N, node), -(1.0 / epsilon) * eye)
    for level in range(N - 1, 0, -1):
        coef = eye + dt * np.diag(a_tab[level])
        bdiag = np.diag(b_tab[level])
        for node in range(1 << level):
            r = row0
            row0 += n
            _add_block(rows, cols, vals, r, px.block(level, node), AT)
            pu = px.block(level + 1, 2 * node)
            pd = px.block(level + 1, 2 * node + 1)
            _add_block(rows, cols, vals, r, pu, -0.5 * coef - 0.5 * s * bdiag)
            _add_block(rows, cols, vals, r, pd, -0.5 * coef + 0.5 * s * bdiag)
            _add_block(rows, cols, vals, r, qx.block(level, node), dt * K)

    # auxiliary forward equations
    for level in range(0, N - 1):
        coef = eye + dt * np.diag(a_tab[level])
        bdiag = np.diag(b_tab[level])
        for node in range(1 << level):
            pu = px.block(level + 1, 2 * node)
            pd = px.block(level + 1, 2 * node + 1)
            for sign, child in ((+1.0, 2 * node), (-1.0, 2 * node + 1)):
                r = row0
                row0 += n
                _add_block(rows, cols, vals, r, qx.block(level + 1, child), A)
                if level >= 1:
                    _add_block(rows, cols, vals, r, qx.block(level, node),
                               -(coef + sign * s * bdiag))
                _add_block(rows, cols, vals, r, pu,
                           -0.5 * m_coef_q + (sign / (2 * game.delta2)) * eye)
                _add_block(rows, cols, vals, r, pd,
                           -0.5 * m_coef_q - (sign / (2 * game.delta2)) * eye)

    assert row0 == size
    mat = sp.csr_matrix(sp.coo_matrix((vals, (rows, cols)), shape=(size, size)))
    sol = spla.spsolve(mat, rhs)
    if not np.all(np.isfinite(sol)):
        raise ValueError("singular assembly: the coupled system factorization failed")

    pvals = [np.zeros((1 << level, n)) for level in range(N + 1)]
    for level in range(1, N + 1):
        blk = sol[px.block(level, 0):px.block(level, 0) + (1 << level) * n]
        pvals[level] = blk.reshape(1 << level, n).copy()
    p = TreeProcess(pvals)
    f = TreeProcess([-masks.chi_O * conditional_expectation(p, l + 1)
                     for l in range(N)])
    g = TreeProcess([-martingale_coefficient(p, l + 1, tree)
                     for l in range(N)])
    yN = sol[yx.block(N, 0):yx.block(N, 0) + (1 << N) * n].reshape(1 << N, n)
    terminal = expected_sq_norm(yN, N, grid.h)
    cost = (evaluate_leader_cost(f, g, masks, tree, grid).total
            + 0.5 / epsilon * terminal)
    return f, g, cost
