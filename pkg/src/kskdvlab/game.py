"""Follower-disturbance layer: costs, saddle point, and its verifications.

For fixed leader controls the follower v minimizes and the disturbance pair
(psi1, psi2) maximizes the robust tracking functional.  The saddle point is
computed by Picard iteration on the coupled forward/backward system; the
stationarity conditions of the *discrete* functional give the closed-form
characterization

    psi1 = z / delta1,   psi2 = Z / delta2,   v = -z * chi_D / beta,

where (z, Z) are the conditional-mean and martingale extractions of the
backward multiplier at the node where the controls act.  The stored saddle
fields use exactly that placement, so the identities above hold as data
identities and finite-difference first-order residuals vanish to roundoff.

A direct sparse assembly of the whole coupled system over all tree nodes
serves as the oracle for the iterative path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Grid, ModelParams, RegionMask, build_derivative_operator, \
    build_drift_operator
from .solvers import (BackwardInputs, ForwardInputs, ForwardSolution,
                      backward_solve, expected_inner, forward_solve,
                      space_time_sq_norm)
from .tree import (BinomialTree, TreeProcess, conditional_expectation,
                   martingale_coefficient)


class NonContractionError(RuntimeError):
    """Picard residual stopped decreasing before reaching the tolerance."""

    def __init__(self, message: str, trace: list[float]):
        self.trace = trace
        tail = ", ".join(f"{r:.3e}" for r in trace[-5:])
        super().__init__(f"{message}; residual tail [{tail}]")


@dataclass(frozen=True)
class GameParams:
    """Penalty weights: follower beta and disturbance delta1/delta2, all > 0.

    ``coupling_estimate`` is a deliberately crude a-priori contraction bound
    for the Picard iteration, ~ (1/beta + 1/delta1 + 1/delta2) scaled by the
    horizon and the zero-order coefficient sizes; the iteration is validated
    against the threshold 0.9 unless the caller overrides.
    """

    beta: float
    delta1: float
    delta2: float

    def __post_init__(self):
        if not (self.beta > 0 and self.delta1 > 0 and self.delta2 > 0):
            raise ValueError("beta, delta1 and delta2 must be positive")

    def coupling_estimate(self, params: ModelParams) -> float:
        sup_a, sup_b = params.sup_norms()
        couplings = 1.0 / self.beta + 1.0 / self.delta1 + 1.0 / self.delta2
        return couplings * (params.T + params.T**2) * (1.0 + sup_a + sup_b) ** 2

    def validate(self, params: ModelParams, threshold: float = 0.9) -> bool:
        return self.coupling_estimate(params) < threshold


@dataclass(eq=False)
class Targets:
    """Tracking targets for the state and its first two derivatives, each
    supported on its observation region."""

    yd0: TreeProcess | None = None
    yd1: TreeProcess | None = None
    yd2: TreeProcess | None = None

    def component(self, i: int) -> TreeProcess | None:
        return (self.yd0, self.yd1, self.yd2)[i]


def make_targets(masks: RegionMask, yd0=None, yd1=None, yd2=None) -> Targets:
    """Build targets restricted to their masks."""
    def clip(proc, chi):
        if proc is None:
            return None
        return TreeProcess([chi * arr for arr in proc.values])
    return Targets(yd0=clip(yd0, masks.chi_Od0), yd1=clip(yd1, masks.chi_Od1),
                   yd2=clip(yd2, masks.chi_Od2))


@dataclass(eq=False)
class SaddleProblem:
    """Everything the follower-disturbance game holds fixed."""

    f: TreeProcess | None
    g: TreeProcess | None
    y0: np.ndarray
    targets: Targets
    params: ModelParams
    game: GameParams
    masks: RegionMask


@dataclass(eq=False)
class SaddleSolution:
    psi1_star: TreeProcess
    psi2_star: TreeProcess
    v_star: TreeProcess
    y: ForwardSolution
    z: TreeProcess            # conditional-mean placement, levels 0..N-1
    Z: TreeProcess            # martingale coefficient, levels 0..N-1
    picard_iterations: int
    residual: float
    problem: SaddleProblem
    residual_trace: list = field(default_factory=list)


@dataclass
class CostReport:
    total: float
    terms: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# cost evaluation
# ---------------------------------------------------------------------------

def _derivative_ops(grid: Grid):
    return (None, build_derivative_operator(grid, 1),
            build_derivative_operator(grid, 2))


def _tracking_terms(y: TreeProcess, targets: Targets, masks: RegionMask,
                    tree: BinomialTree, grid: Grid) -> list[float]:
    """(1/2) E iint chi_i |d^i y - yd_i|^2 for i = 0, 1, 2, over levels
    0..N-1 (left-endpoint time rule, matching where the sources act)."""
    ops = _derivative_ops(grid)
    terms = [0.0, 0.0, 0.0]
    for level in range(tree.depth):
        yv = y.values[level]
        for i in range(3):
            di = yv if ops[i] is None else ops[i].apply(yv)
            tgt = targets.component(i)
            resid = di if tgt is None else di - tgt.values[level]
            terms[i] += 0.5 * tree.dt * expected_inner(
                masks.chi(i) * resid, resid, level, grid.h)
    return terms


def evaluate_robust_cost(y, v, psi1, psi2, targets: Targets, masks: RegionMask,
                         game: GameParams, tree: BinomialTree,
                         grid: Grid) -> CostReport:
    """Robust functional: tracking plus follower penalty minus the
    disturbance penalties."""
    yproc = y.y if isinstance(y, ForwardSolution) else y
    tr = _tracking_terms(yproc, targets, masks, tree, grid)
    terms = {"tracking0": tr[0], "tracking1": tr[1], "tracking2": tr[2]}
    terms["follower"] = 0.0 if v is None else \
        0.5 * game.beta * space_time_sq_norm(v, tree, grid, weight=masks.chi_D)
    terms["disturbance1"] = 0.0 if psi1 is None else \
        -0.5 * game.delta1 * space_time_sq_norm(psi1, tree, grid)
    terms["disturbance2"] = 0.0 if psi2 is None else \
        -0.5 * game.delta2 * space_time_sq_norm(psi2, tree, grid)
    return CostReport(total=sum(terms.values()), terms=terms)


def evaluate_leader_cost(f, g, masks: RegionMask, tree: BinomialTree,
                         grid: Grid) -> CostReport:
    terms = {
        "leader_f": 0.0 if f is None else
        0.5 * space_time_sq_norm(f, tree, grid, weight=masks.chi_O),
        "leader_g": 0.0 if g is None else
        0.5 * space_time_sq_norm(g, tree, grid),
    }
    return CostReport(total=sum(terms.values()), terms=terms)


def evaluate_follower_cost(y, v, targets: Targets, masks: RegionMask,
                           beta: float, tree: BinomialTree,
                           grid: Grid) -> CostReport:
    """Disturbance-free tracking functional (robust cost at psi1 = psi2 = 0)."""
    yproc = y.y if isinstance(y, ForwardSolution) else y
    tr = _tracking_terms(yproc, targets, masks, tree, grid)
    terms = {"tracking0": tr[0], "tracking1": tr[1], "tracking2": tr[2]}
    terms["follower"] = 0.0 if v is None else \
        0.5 * beta * space_time_sq_norm(v, tree, grid, weight=masks.chi_D)
    return CostReport(total=sum(terms.values()), terms=terms)


# ---------------------------------------------------------------------------
# saddle point
# ---------------------------------------------------------------------------

def tracking_sources(y: TreeProcess, targets: Targets, masks: RegionMask,
                     tree: BinomialTree, grid: Grid) -> list[np.ndarray]:
    """Adjoint tracking source per level:  sum_i D_i^T (chi_i (D_i y - yd_i)),
    the exact transpose pairing of the tracking terms."""
    ops = _derivative_ops(grid)
    opsT = (None, ops[1].transpose(), ops[2].transpose())
    out = []
    for level in range(tree.depth):
        yv = y.values[level]
        acc = np.zeros_like(yv)
        for i in range(3):
            di = yv if ops[i] is None else ops[i].apply(yv)
            tgt = targets.component(i)
            resid = di if tgt is None else di - tgt.values[level]
            weighted = masks.chi(i) * resid
            acc += weighted if opsT[i] is None else opsT[i].apply(weighted)
        out.append(acc)
    return out


def characterized_controls(z: TreeProcess, Z: TreeProcess, game: GameParams,
                           masks: RegionMask):
    psi1 = TreeProcess([arr / game.delta1 for arr in z.values])
    psi2 = TreeProcess([arr / game.delta2 for arr in Z.values])
    v = TreeProcess([-masks.chi_D * arr / game.beta for arr in z.values])
    return psi1, psi2, v


def _forward_at(problem: SaddleProblem, psi1, psi2, v, tree, grid) -> ForwardSolution:
    inputs = ForwardInputs(y0=problem.y0, params=problem.params,
                           masks=problem.masks, f=problem.f, g=problem.g,
                           v=v, psi1=psi1, psi2=psi2)
    return forward_solve(inputs, tree, grid)


def _saddle_backward(problem: SaddleProblem, y: TreeProcess, tree, grid):
    """One backward pass of the coupled system given the current state."""
    a_tab, b_tab = problem.params.coefficient_tables(grid, tree.depth)
    track = tracking_sources(y, problem.targets, problem.masks, tree, grid)

    def src(level, m, Z):
        return -(a_tab[level] * m + b_tab[level] * Z) - track[level]

    terminal = np.zeros(grid.n_interior)
    return backward_solve(BackwardInputs(terminal=terminal, drift_source=src),
                          tree, grid, problem.params)


def _mean_placement(bwd, tree) -> tuple[TreeProcess, TreeProcess]:
    z = TreeProcess([conditional_expectation(bwd.z, level + 1)
                     for level in range(tree.depth)])
    return z, TreeProcess(list(bwd.mart.values))


def _pair_diff_norm(z_new, Z_new, z_old, Z_old, tree, grid) -> float:
    dz = TreeProcess([a - b for a, b in zip(z_new.values, z_old.values)])
    dZ = TreeProcess([a - b for a, b in zip(Z_new.values, Z_old.values)])
    num = space_time_sq_norm(dz, tree, grid) + space_time_sq_norm(dZ, tree, grid)
    den = space_time_sq_norm(z_new, tree, grid) + space_time_sq_norm(Z_new, tree, grid)
    return float(np.sqrt(num) / (1.0 + np.sqrt(den)))


def solve_saddle_point(problem: SaddleProblem, tree: BinomialTree, grid: Grid,
                       *, tol: float = 1e-11, max_iter: int = 100,
                       relaxation: float = 1.0,
                       allow_weak_coupling: bool = False) -> SaddleSolution:
    """Picard iteration on the coupled optimality system.

    Each pass solves the forward equation with the controls characterized
    from the current (z, Z), then the backward equation with the tracking
    sources of the new state; the update is relaxed and the relaxation factor
    is halved whenever the residual fails to decrease.
    """
    if not problem.game.validate(problem.params) and not allow_weak_coupling:
        est = problem.game.coupling_estimate(problem.params)
        raise ValueError(
            f"coupling estimate {est:.3g} >= 0.9; the Picard iteration is not "
            "a priori contractive (pass allow_weak_coupling=True to override)")

    n = grid.n_interior
    z = TreeProcess.zeros(tree.depth, n)
    Z = TreeProcess.zeros(tree.depth, n)
    omega = relaxation
    trace: list[float] = []
    fwd = None
    for iteration in range(1, max_iter + 1):
        psi1, psi2, v = characterized_controls(z, Z, problem.game, problem.masks)
        fwd = _forward_at(problem, psi1, psi2, v, tree, grid)
        bwd = _saddle_backward(problem, fwd.y, tree, grid)
        z_new, Z_new = _mean_placement(bwd, tree)
        res = _pair_diff_norm(z_new, Z_new, z, Z, tree, grid)
        trace.append(res)
        if omega != 1.0:
            z_new = TreeProcess([a + omega * (b - a)
                                 for a, b in zip(z.values, z_new.values)])
            Z_new = TreeProcess([a + omega * (b - a)
                                 for a, b in zip(Z.values, Z_new.values)])
        z, Z = z_new, Z_new
        if res <= tol:
            break
        if len(trace) >= 2 and res >= trace[-2]:
            omega *= 0.5
            if omega < 1.0 / 1024.0:
                raise NonContractionError("relaxation exhausted", trace)
        if len(trace) >= 4 and trace[-1] > 0.999 * trace[-4]:
            raise NonContractionError("residual stagnated", trace)
    else:
        raise NonContractionError(
            f"no convergence to {tol:.1e} in {max_iter} iterations", trace)

    psi1, psi2, v = characterized_controls(z, Z, problem.game, problem.masks)
    fwd = _forward_at(problem, psi1, psi2, v, tree, grid)
    return SaddleSolution(psi1_star=psi1, psi2_star=psi2, v_star=v, y=fwd,
                          z=z, Z=Z, picard_iterations=len(trace),
                          residual=trace[-1], problem=problem,
                          residual_trace=trace)


# ---------------------------------------------------------------------------
# direct global assembly (oracle)
# ---------------------------------------------------------------------------

MAX_DIRECT_UNKNOWNS = 200_000


class _TreeIndexer:
    """Flat unknown indices for per-node state blocks of width n."""

    def __init__(self, levels: range, n: int, offset: int = 0):
        self.n = n
        self.base = {}
        pos = offset
        for level in levels:
            self.base[level] = pos
            pos += (1 << level) * n
        self.end = pos

    def block(self, level: int, node: int) -> int:
        return self.base[level] + node * self.n


def _add_block(rows, cols, vals, r0: int, c0: int, block: np.ndarray):
    n, m = block.shape
    rr, cc = np.nonzero(block)
    rows.extend((r0 + rr).tolist())
    cols.extend((c0 + cc).tolist())
    vals.extend(block[rr, cc].tolist())


def direct_assembly_solve(problem: SaddleProblem, tree: BinomialTree,
                          grid: Grid) -> SaddleSolution:
    """Assemble and solve the full coupled linear system over all tree nodes.

    Unknowns are the state at every non-root node and the backward multiplier
    at levels 1..N-1 (the leaf multiplier vanishes); the martingale part is
    eliminated through the two-point representation.  Exact up to the sparse
    solver tolerance; used as the oracle for the Picard path.
    """
    n, N = grid.n_interior, tree.depth
    dt, s = tree.dt, tree.sqrt_dt
    total_nodes = 2 ** (N + 1) - 1
    if total_nodes * n > MAX_DIRECT_UNKNOWNS:
        raise ValueError("instance exceeds the direct-assembly size guard")

    params, game, masks = problem.params, problem.game, problem.masks
    a_tab, b_tab = params.coefficient_tables(grid, N)
    A = np.eye(n) + dt * build_drift_operator(grid, params, "forward").todense()
    AT = A.T.copy()
    ops = _derivative_ops(grid)
    K = np.zeros((n, n))
    for i in range(3):
        di = np.eye(n) if ops[i] is None else ops[i].todense()
        K += di.T @ (masks.chi(i)[:, None] * di)

    yx = _TreeIndexer(range(1, N + 1), n)
    zx = _TreeIndexer(range(1, N), n, offset=yx.end)
    size = zx.end
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    rhs = np.zeros(size)
    eye = np.eye(n)
    row0 = 0

    def z_children(level, node):
        """Indices of the multiplier children of (level, node); None at leaves."""
        if level + 1 >= N:
            return None, None
        return zx.block(level + 1, 2 * node), zx.block(level + 1, 2 * node + 1)

    # forward equations, one block row per non-root node; the follower and
    # disturbance controls are the characterized functions of the multiplier
    # children: psi1 = m/delta1, psi2 = Zc/delta2, v = -m chi_D/beta with
    # m = (zu + zd)/2 and Zc = (zu - zd)/(2 sqrt(dt)).
    m_coef = (dt / game.delta1) * eye - (dt / game.beta) * np.diag(masks.chi_D)
    for level in range(N):
        coef = eye + dt * np.diag(a_tab[level])
        bdiag = np.diag(b_tab[level])
        zu, zd = None, None
        for node in range(1 << level):
            if level + 1 < N:
                zu = zx.block(level + 1, 2 * node)
                zd = zx.block(level + 1, 2 * node + 1)
            for sign, child in ((+1.0, 2 * node), (-1.0, 2 * node + 1)):
                r = row0
                row0 += n
                _add_block(rows, cols, vals, r, yx.block(level + 1, child), A)
                if level >= 1:
                    _add_block(rows, cols, vals, r, yx.block(level, node),
                               -(coef + sign * s * bdiag))
                else:
                    rhs[r:r + n] += (coef + sign * s * bdiag) @ problem.y0
                if level + 1 < N:
                    _add_block(rows, cols, vals, r, zu,
                               -0.5 * m_coef - (sign / (2.0 * game.delta2)) * eye)
                    _add_block(rows, cols, vals, r, zd,
                               -0.5 * m_coef + (sign / (2.0 * game.delta2)) * eye)
                src = np.zeros(n)
                if problem.f is not None:
                    src += dt * masks.chi_O * problem.f.values[level][node]
                if problem.g is not None:
                    src += sign * s * problem.g.values[level][node]
                rhs[r:r + n] += src

    # backward equations at levels 1..N-1
    track_const = _tracking_data_part(problem, tree, grid)
    for level in range(1, N):
        coef = eye + dt * np.diag(a_tab[level])
        bdiag = np.diag(b_tab[level])
        for node in range(1 << level):
            r = row0
            row0 += n
            _add_block(rows, cols, vals, r, zx.block(level, node), AT)
            zu, zd = z_children(level, node)
            if zu is not None:
                # -(I + dt a) m - dt b Zc with m, Zc from the children
                _add_block(rows, cols, vals, r, zu, -0.5 * coef - 0.5 * s * bdiag)
                _add_block(rows, cols, vals, r, zd, -0.5 * coef + 0.5 * s * bdiag)
            _add_block(rows, cols, vals, r, yx.block(level, node), -dt * K)
            rhs[r:r + n] += dt * track_const[level][node]

    assert row0 == size
    mat = sp.csr_matrix(sp.coo_matrix((vals, (rows, cols)), shape=(size, size)))
    sol = spla.spsolve(mat, rhs)
    if not np.all(np.isfinite(sol)):
        raise ValueError("singular assembly: the coupled system factorization failed")
    resid = np.linalg.norm(mat @ sol - rhs) / (1.0 + np.linalg.norm(rhs))

    yvals = [np.tile(problem.y0, (1, 1))]
    for level in range(1, N + 1):
        blk = sol[yx.block(level, 0):yx.block(level, 0) + (1 << level) * n]
        yvals.append(blk.reshape(1 << level, n).copy())
    zpost = [np.zeros((1 << level, n)) for level in range(N + 1)]
    for level in range(1, N):
        blk = sol[zx.block(level, 0):zx.block(level, 0) + (1 << level) * n]
        zpost[level] = blk.reshape(1 << level, n).copy()
    zproc = TreeProcess(zpost)
    z = TreeProcess([conditional_expectation(zproc, level + 1)
                     for level in range(N)])
    Z = TreeProcess([martingale_coefficient(zproc, level + 1, tree)
                     for level in range(N)])
    psi1, psi2, v = characterized_controls(z, Z, game, masks)
    inputs = ForwardInputs(y0=problem.y0, params=params, masks=masks,
                           f=problem.f, g=problem.g, v=v, psi1=psi1, psi2=psi2)
    fwd = ForwardSolution(y=TreeProcess(yvals), inputs=inputs)
    return SaddleSolution(psi1_star=psi1, psi2_star=psi2, v_star=v, y=fwd,
                          z=z, Z=Z, picard_iterations=0, residual=float(resid),
                          problem=problem, residual_trace=[float(resid)])


def _tracking_data_part(problem: SaddleProblem, tree, grid) -> list[np.ndarray]:
    """Data part of the adjoint tracking source: -sum_i D_i^T (chi_i yd_i)."""
    ops = _derivative_ops(grid)
    opsT = (None, ops[1].transpose(), ops[2].transpose())
    masks, targets = problem.masks, problem.targets
    out = []
    for level in range(tree.depth):
        acc = np.zeros((1 << level, grid.n_interior))
        for i in range(3):
            tgt = targets.component(i)
            if tgt is None:
                continue
            weighted = masks.chi(i) * (-tgt.values[level])
            acc += weighted if opsT[i] is None else opsT[i].apply(weighted)
        out.append(acc)
    return out


# ---------------------------------------------------------------------------
# verifications
# ---------------------------------------------------------------------------

def _robust_cost_at(problem: SaddleProblem, psi1, psi2, v, tree, grid) -> float:
    fwd = _forward_at(problem, psi1, psi2, v, tree, grid)
    return evaluate_robust_cost(fwd, v, psi1, psi2, problem.targets,
                                problem.masks, problem.game, tree, grid).total


def _unit_direction(rng, tree, grid, weight=None) -> TreeProcess:
    proc = TreeProcess.random(tree.depth, rng, width=grid.n_interior)
    if weight is not None:
        proc = TreeProcess([weight * arr for arr in proc.values])
    nrm = np.sqrt(space_time_sq_norm(proc, tree, grid))
    return proc.scaled(1.0 / nrm)


def _shifted(proc: TreeProcess, direction: TreeProcess, step: float) -> TreeProcess:
    return TreeProcess([a + step * d for a, d in
                        zip(proc.values, direction.values)])


def verify_first_order_conditions(saddle: SaddleSolution, tree: BinomialTree,
                                  grid: Grid, n_directions: int = 5,
                                  seed: int = 0, step: float = 1e-4) -> float:
    """Centered finite-difference probe of the stationarity of the robust
    cost at the computed saddle.

    For random unit directions in each of psi1, psi2 and v the first
    difference is normalized by the second difference (the local curvature
    along the direction); the maximum over directions is returned.
    """
    rng = np.random.default_rng(seed)
    problem = saddle.problem
    base = (saddle.psi1_star, saddle.psi2_star, saddle.v_star)
    J0 = _robust_cost_at(problem, *base, tree, grid)
    worst = 0.0
    for kdir in range(n_directions):
        which = kdir % 3
        weight = problem.masks.chi_D if which == 2 else None
        u = _unit_direction(rng, tree, grid, weight=weight)
        plus = list(base)
        minus = list(base)
        plus[which] = _shifted(base[which], u, step)
        minus[which] = _shifted(base[which], u, -step)
        Jp = _robust_cost_at(problem, *plus, tree, grid)
        Jm = _robust_cost_at(problem, *minus, tree, grid)
        deriv = (Jp - Jm) / (2.0 * step)
        curv = abs(Jp - 2.0 * J0 + Jm) / step**2
        worst = max(worst, abs(deriv) / (curv + 1e-12))
    return worst


@dataclass
class MarginReport:
    worst_disturbance_margin: float   # max over samples of J(psi*+d) - J*
    worst_follower_margin: float      # min over samples of J(v*+d) - J*
    all_signed_correctly: bool
    validated: bool
    n_samples: int


def verify_saddle_inequalities(saddle: SaddleSolution, tree: BinomialTree,
                               grid: Grid, n_samples: int = 100,
                               seed: int = 0, scale: float = 0.1) -> MarginReport:
    """Sampled max-min inequalities around the saddle:

        J(psi* + dpsi, v*) <= J(psi*, v*) <= J(psi*, v* + dv).

    Margins are reported; signs are only meaningful when the penalty
    parameters pass the concavity/convexity validation, so the report carries
    the validation flag instead of asserting.
    """
    rng = np.random.default_rng(seed)
    problem = saddle.problem
    base = (saddle.psi1_star, saddle.psi2_star, saddle.v_star)
    J0 = _robust_cost_at(problem, *base, tree, grid)
    worst_dist = -np.inf
    worst_fol = np.inf
    for _ in range(n_samples):
        mag = scale * rng.uniform(0.1, 1.0)
        d1 = _unit_direction(rng, tree, grid)
        d2 = _unit_direction(rng, tree, grid)
        Jd = _robust_cost_at(problem, _shifted(base[0], d1, mag),
                             _shifted(base[1], d2, mag), base[2], tree, grid)
        dv = _unit_direction(rng, tree, grid, weight=problem.masks.chi_D)
        Jv = _robust_cost_at(problem, base[0], base[1],
                             _shifted(base[2], dv, mag), tree, grid)
        worst_dist = max(worst_dist, Jd - J0)
        worst_fol = min(worst_fol, Jv - J0)
    ok = worst_dist <= 1e-10 * (1 + abs(J0)) and worst_fol >= -1e-10 * (1 + abs(J0))
    return MarginReport(worst_disturbance_margin=float(worst_dist),
                        worst_follower_margin=float(worst_fol),
                        all_signed_correctly=bool(ok),
                        validated=problem.game.validate(problem.params),
                        n_samples=n_samples)
