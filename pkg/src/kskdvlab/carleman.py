"""Carleman-type weight functions and empirical inequality diagnostics.

The weights are built from a smooth spatial bump kappa with a single interior
critical point inside the auxiliary interval B:

    phi(x)   = exp(5 mu) - exp(mu (kappa(x) + 3))          (positive)
    gamma(t) = 1 / (t (T - t))                             (endpoint blow-up)
    theta    = exp(-lambda phi gamma)

plus the one-sided variants where gamma is frozen at its minimum on the first
half of the horizon, and the time-only blow-up weight

    rho(t) = exp(lambda max_x phibar(t, x)).

At realistic parameter sizes theta underflows and rho overflows double
precision; every quantity reported here is therefore either scale-invariant
(the inequality quotients are homogeneous of degree two in theta and are
evaluated in log space relative to the largest weight) or explicitly masked
(the rho-weighted target norm drops exact zeros of the data).  Saturated
values are represented by 0.0 and inf, which the quadratures treat as tagged.

All evaluations are pure functions; sampling studies use independent seeded
draws and deterministic reductions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import Grid, build_derivative_operator
from .solvers import backward_sweep, expected_inner, forward_sweep
from .tree import BinomialTree, TreeProcess, pairwise_mean


class AuditFailed(RuntimeError):
    """A constructed weight ingredient violated one of its invariants."""

    def __init__(self, prop: str, detail: str = ""):
        self.prop = prop
        super().__init__(f"{prop}: {detail}" if detail else prop)


# ---------------------------------------------------------------------------
# the spatial bump
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KappaFunction:
    """Smooth bump on [0, 1]: positive inside, vanishing at the ends, maximum
    exactly 1 at a single critical point inside B.

    Built as kappa = 4 P (1 - P) with P a strictly increasing cubic fixing
    P(0) = 0, P(c) = 1/2, P(1) = 1 for c the midpoint of B.  The derivative
    of P is the quadratic q(s) = q0 + q1 s + q2 s**2 (coefficients stored on
    the possibly mirrored axis).
    """

    critical_point: float
    interval: tuple
    q_coeffs: tuple
    mirrored: bool

    def _s(self, x):
        x = np.asarray(x, dtype=float)
        return 1.0 - x if self.mirrored else x

    def _P(self, s):
        q0, q1, q2 = self.q_coeffs
        return s * (q0 + s * (q1 / 2.0 + s * q2 / 3.0))

    def _q(self, s):
        q0, q1, q2 = self.q_coeffs
        return q0 + s * (q1 + s * q2)

    def kappa(self, x):
        P = self._P(self._s(x))
        return 4.0 * P * (1.0 - P)

    def kappa_x(self, x):
        s = self._s(x)
        grad = 4.0 * (1.0 - 2.0 * self._P(s)) * self._q(s)
        return -grad if self.mirrored else grad


def _increasing_cubic_coeffs(c: float) -> tuple:
    """Derivative coefficients of the increasing cubic through (0,0), (c,1/2),
    (1,1), with the derivative's vertex pinned at s = 1 (the extremal choice
    that stays positive on the widest range of c)."""
    if c == 0.5:
        return (1.0, 0.0, 0.0)
    q2 = 3.0 * (0.5 - c) / (c * (1.0 - c) * (2.0 - c))
    q1 = -2.0 * q2
    q0 = 1.0 + 2.0 * q2 / 3.0
    return (q0, q1, q2)


def construct_kappa(B: tuple, audit_points: int = 10_000) -> KappaFunction:
    """Bump with its critical point at the midpoint of B; every invariant is
    re-verified on a fine audit grid and violations raise AuditFailed."""
    left, right = B
    if not (0.0 < left < right < 1.0):
        raise ValueError(f"B must be strictly inside (0, 1), got {B}")
    c = 0.5 * (left + right)
    mirrored = c > 0.5
    cc = 1.0 - c if mirrored else c
    coeffs = _increasing_cubic_coeffs(cc)
    kf = KappaFunction(critical_point=c, interval=(left, right),
                       q_coeffs=coeffs, mirrored=mirrored)
    _audit_kappa(kf, audit_points)
    return kf


def _audit_kappa(kf: KappaFunction, n_points: int):
    x = np.linspace(0.0, 1.0, n_points + 1)
    k = kf.kappa(x)
    kx = kf.kappa_x(x)
    left, right = kf.interval
    if abs(k[0]) > 1e-12 or abs(k[-1]) > 1e-12:
        raise AuditFailed("endpoint-values", f"kappa(0)={k[0]:.2e}, kappa(1)={k[-1]:.2e}")
    if np.min(k[1:-1]) <= 0.0:
        raise AuditFailed("interior-positivity", f"min={np.min(k[1:-1]):.2e}")
    if np.max(k) > 1.0 + 1e-12:
        raise AuditFailed("maximum-exceeds-one", f"max={np.max(k):.2e}")
    if abs(kf.kappa(kf.critical_point) - 1.0) > 1e-12:
        raise AuditFailed("maximum-not-one")
    outside = (x <= left) | (x >= right)
    if np.min(np.abs(kx[outside])) <= 0.0:
        raise AuditFailed("vanishing-slope-outside-B")
    if not (kx[0] > 0.0 and kx[-1] < 0.0):
        raise AuditFailed("boundary-slope-signs")
    qmin = np.min(kf._q(kf._s(x)))
    if qmin <= 0.0:
        raise AuditFailed("reparameterization-not-increasing",
                          f"min derivative {qmin:.2e} (bump midpoint too close "
                          "to the boundary for a cubic reparameterization)")


# ---------------------------------------------------------------------------
# weight fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CarlemanParams:
    lam: float
    mu: float

    def __post_init__(self):
        if not (self.lam >= 1.0 and self.mu >= 1.0):
            raise ValueError("lambda and mu must both be >= 1")

    @classmethod
    def default(cls, T: float) -> "CarlemanParams":
        # reporting anchor for diagnostics; any lam >= O(T + T^2) qualifies
        return cls(lam=max(1.0, 2.0 * (T + T**2)), mu=2.0)

    def phi_max(self) -> float:
        return float(np.exp(5 * self.mu) - np.exp(3 * self.mu))


@dataclass(frozen=True, eq=False)
class WeightField:
    """Pointwise weight evaluations; saturated entries are 0.0 / inf."""

    phi: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray
    gamma_bar: np.ndarray
    alpha_bar: np.ndarray
    theta_bar: np.ndarray
    rho: np.ndarray


def _gamma_of(t, T):
    with np.errstate(divide="ignore"):
        return 1.0 / (t * (T - t))


def _ell_of(t, T):
    return np.where(t <= T / 2.0, T * T / 4.0, t * (T - t))


def evaluate_weights(cp: CarlemanParams, kappa: KappaFunction, T: float,
                     t, x) -> WeightField:
    """Evaluate all weight fields at broadcastable (t, x)."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    phi = np.exp(5 * cp.mu) - np.exp(cp.mu * (kappa.kappa(x) + 3.0))
    gamma = _gamma_of(t, T)
    with np.errstate(divide="ignore"):
        gamma_bar = 1.0 / _ell_of(t, T)
    with np.errstate(over="ignore", invalid="ignore"):
        alpha = phi * gamma
        alpha_bar = phi * gamma_bar
        theta = np.exp(-cp.lam * alpha)
        theta_bar = np.exp(-cp.lam * alpha_bar)
        rho = np.exp(cp.lam * cp.phi_max() * gamma_bar)
    theta = np.where(np.isfinite(alpha), theta, 0.0)
    theta_bar = np.where(np.isfinite(alpha_bar), theta_bar, 0.0)
    return WeightField(phi=phi, gamma=gamma, alpha=alpha, theta=theta,
                       gamma_bar=gamma_bar, alpha_bar=alpha_bar,
                       theta_bar=theta_bar, rho=rho)


def rho_profile(cp: CarlemanParams, kappa: KappaFunction, T: float,
                times) -> np.ndarray:
    """Time-only blow-up weight rho(t) = exp(lam * max_x alpha_bar(t, x))."""
    times = np.asarray(times, dtype=float)
    with np.errstate(over="ignore", divide="ignore"):
        return np.exp(cp.lam * cp.phi_max() / _ell_of(times, T))


@dataclass
class FittedConstants:
    values: dict = field(default_factory=dict)

    def all_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.values.values())


def verify_parameter_bounds(cp: CarlemanParams, kappa: KappaFunction,
                            T: float, n_t: int = 2000) -> FittedConstants:
    """Fitted constants of the elementary weight bounds: for each inequality
    the supremum of lhs / (majorant without its constant) over an interior
    time sample.  Only finiteness is asserted by callers."""
    t = np.linspace(T * 1e-3, T * (1 - 1e-3), n_t)
    gamma = _gamma_of(t, T)
    gamma_t = -(T - 2 * t) * gamma**2
    gamma_tt = 2 * gamma**2 + 2 * (T - 2 * t) ** 2 * gamma**3
    phi_max = cp.phi_max()
    e5mu = float(np.exp(5 * cp.mu))
    out = {}
    for s in (0.5, 1.0, 2.0):
        out[f"gamma_inverse_power_{s:g}"] = float(np.max(gamma**(-s) / T**(2 * s)))
    out["gamma_t"] = float(np.max(np.abs(gamma_t) / (T * gamma**2)))
    out["gamma_tt"] = float(np.max(np.abs(gamma_tt) / (T**2 * gamma**3)))
    out["alpha_t"] = float(np.max(phi_max * np.abs(gamma_t) / (T * e5mu * gamma**2)))
    out["alpha_tt"] = float(np.max(phi_max * np.abs(gamma_tt)
                                   / (T**2 * e5mu * gamma**3)))
    return FittedConstants(values=out)


# ---------------------------------------------------------------------------
# inequality quotients
# ---------------------------------------------------------------------------

@dataclass
class QuotientResult:
    lhs: float
    rhs: float
    quotient: float
    degenerate: bool


def _quad_levels(tree: BinomialTree) -> range:
    """Interior time levels: the two levels adjacent to each endpoint are
    excluded (the weight vanishes there faster than any polynomial)."""
    return range(2, tree.depth - 1)


class _LogWeights:
    """Scale-invariant evaluation of sums  sum (lam*gamma)^d theta^2 |u|^2.

    Every admissible inequality is homogeneous of degree two in theta, so
    theta is rescaled by its maximum over the quadrature sample; the powers
    are applied in log space to avoid overflow at large exponents d.
    """

    def __init__(self, cp: CarlemanParams, kappa: KappaFunction, T: float,
                 tree: BinomialTree, grid: Grid):
        self.tree, self.grid = tree, grid
        levels = list(_quad_levels(tree))
        t = tree.times()[levels]
        wf = evaluate_weights(cp, kappa, T, t[:, None], grid.x_points[None, :])
        self.levels = levels
        self.log_lgamma = np.log(cp.lam * wf.gamma)          # (L, 1) broadcast
        a0 = np.min(wf.alpha)
        self.log_theta2 = 2.0 * cp.lam * (a0 - wf.alpha)     # <= 0
        self.level_pos = {level: i for i, level in enumerate(levels)}

    def weighted_sum(self, proc_values, d: float, chi=None) -> float:
        """sum_l dt E[ h sum_x w(l, x) |u|^2 ] over the quadrature levels for
        values indexed by absolute level."""
        total = 0.0
        for level in self.levels:
            i = self.level_pos[level]
            logw = self.log_theta2[i] + d * self.log_lgamma[i]
            w = np.exp(logw)
            if chi is not None:
                w = w * chi
            u = proc_values[level]
            nodewise = self.grid.h * np.sum(w * u * u, axis=-1)
            total += self.tree.dt * float(pairwise_mean(nodewise, level))
        return total

    def graded_sum(self, proc_values, d: float) -> float:
        """The three-term graded quantity: weight powers d, d-2, d-4 against
        the value and its first two derivative fields."""
        d1 = build_derivative_operator(self.grid, 1)
        d2 = build_derivative_operator(self.grid, 2)
        vals_x = [d1.apply(v) for v in proc_values]
        vals_xx = [d2.apply(v) for v in proc_values]
        return (self.weighted_sum(proc_values, d)
                + self.weighted_sum(vals_x, d - 2.0)
                + self.weighted_sum(vals_xx, d - 4.0))


@dataclass(eq=False)
class ForwardQuotientInstance:
    z: TreeProcess                 # solution of dz + eta z_xxxx dt = ... levels 0..N
    F: tuple                       # (F1, F2, F3, F4) source processes


@dataclass(eq=False)
class BackwardQuotientInstance:
    z: TreeProcess                 # levels 0..N
    Z: TreeProcess                 # martingale coefficient, levels 0..N-1
    F: tuple                       # (F1, F2, F3)


def make_forward_quotient_instance(seed: int, tree: BinomialTree, grid: Grid,
                                   eta: float) -> ForwardQuotientInstance:
    """Random dissipation-only forward instance with first/second-derivative
    structured drift sources and a diffusion source."""
    rng = np.random.default_rng(seed)
    n, N = grid.n_interior, tree.depth
    F = tuple(TreeProcess.random(N, rng, width=n) for _ in range(4))
    d1 = build_derivative_operator(grid, 1)
    d2 = build_derivative_operator(grid, 2)
    op = eta * build_derivative_operator(grid, 4)
    drift = [F[0].values[l] + d1.apply(F[1].values[l]) + d2.apply(F[2].values[l])
             for l in range(N)]

    def source_fn(level, y):
        return drift[level], F[3].values[level]

    z = forward_sweep(op, rng.standard_normal(n), tree, source_fn)
    return ForwardQuotientInstance(z=z, F=F)


def make_backward_quotient_instance(seed: int, tree: BinomialTree, grid: Grid,
                                    eta: float) -> BackwardQuotientInstance:
    rng = np.random.default_rng(seed)
    n, N = grid.n_interior, tree.depth
    F = tuple(TreeProcess.random(N, rng, width=n) for _ in range(3))
    d1 = build_derivative_operator(grid, 1)
    d2 = build_derivative_operator(grid, 2)
    op = eta * build_derivative_operator(grid, 4)  # symmetric: self-transposed
    drift = [F[0].values[l] + d1.apply(F[1].values[l]) + d2.apply(F[2].values[l])
             for l in range(N)]

    def source_fn(level, m, Z):
        return drift[level]

    z, mart = backward_sweep(op, rng.standard_normal((1 << N, n)), tree,
                             source_fn)
    return BackwardQuotientInstance(z=z, Z=mart, F=F)


def carleman_quotient(which: str, instance, cp: CarlemanParams,
                      kappa: KappaFunction, tree: BinomialTree, grid: Grid,
                      chi_B: np.ndarray, chi_O: np.ndarray | None = None) -> QuotientResult:
    """Empirical quotient lhs/rhs of one weighted inequality; a diagnostic of
    the observed constant, never an assertion about it."""
    lw = _LogWeights(cp, kappa, tree.horizon, tree, grid)
    if which == "forward":
        z, (F1, F2, F3, F4) = instance.z, instance.F
        lhs = lw.graded_sum(z.values, 7.0)
        rhs = (lw.weighted_sum(z.values, 7.0, chi=chi_B)
               + lw.weighted_sum(F1.values, 0.0)
               + lw.weighted_sum(F2.values, 2.0)
               + lw.weighted_sum(F3.values, 4.0)
               + lw.weighted_sum(F4.values, 4.0))
    elif which == "backward":
        z, Z, (F1, F2, F3) = instance.z, instance.Z, instance.F
        lhs = lw.graded_sum(z.values, 7.0)
        rhs = (lw.weighted_sum(z.values, 7.0, chi=chi_B)
               + lw.weighted_sum(F1.values, 0.0)
               + lw.weighted_sum(F2.values, 2.0)
               + lw.weighted_sum(F3.values, 4.0)
               + lw.weighted_sum(Z.values, 4.0))
    elif which == "coupled":
        adj = instance
        lhs = (lw.graded_sum(adj.p_mean.values, 7.0)
               + lw.graded_sum(adj.q.values, 9.0))
        rhs = (lw.weighted_sum(adj.p_mean.values, 47.0, chi=chi_O)
               + lw.weighted_sum(adj.P.values, 9.0))
    else:
        raise ValueError(f"unknown inequality kind {which!r}")
    if rhs == 0.0:
        return QuotientResult(lhs=lhs, rhs=rhs, quotient=float("nan"),
                              degenerate=True)
    return QuotientResult(lhs=lhs, rhs=rhs, quotient=lhs / rhs,
                          degenerate=False)


# ---------------------------------------------------------------------------
# observability estimator
# ---------------------------------------------------------------------------

@dataclass
class ObservabilityReport:
    rows: list                      # (sample id, lhs, rhs, quotient)
    max_quotient: float
    median_quotient: float
    skipped: int


def observability_quotient(n_samples: int, seed: int, data, tree: BinomialTree,
                           grid: Grid, cp: CarlemanParams,
                           kappa: KappaFunction, *,
                           solver_tol: float = 1e-10) -> ObservabilityReport:
    """Empirical constant of the weighted observation inequality: for random
    Gaussian terminal data the ratio of the recovered initial energy plus the
    rho^-2 weighted auxiliary-state energy to the observed quantities."""
    from .leader import solve_adjoint_system

    rng = np.random.default_rng(seed)
    d1 = build_derivative_operator(grid, 1)
    d2 = build_derivative_operator(grid, 2)
    rho = rho_profile(cp, kappa, data.params.T, tree.times())
    with np.errstate(over="ignore"):
        inv_rho_sq = np.where(np.isfinite(rho), 1.0 / rho**2, 0.0)

    rows = []
    skipped = 0
    quotients = []
    for k in range(n_samples):
        p_T = rng.standard_normal((tree.nodes(tree.depth), grid.n_interior))
        adj = solve_adjoint_system(p_T, data, tree, grid, tol=solver_tol)
        p0 = adj.p.values[0][0]
        lhs = grid.h * float(np.sum(p0**2))
        for level in range(tree.depth):
            qv = adj.q.values[level]
            qsum = (expected_inner(qv, qv, level, grid.h)
                    + expected_inner(d1.apply(qv), d1.apply(qv), level, grid.h)
                    + expected_inner(d2.apply(qv), d2.apply(qv), level, grid.h))
            lhs += tree.dt * inv_rho_sq[level] * qsum
        rhs = 0.0
        for level in range(tree.depth):
            pv = adj.p_mean.values[level]
            Pv = adj.P.values[level]
            rhs += tree.dt * (expected_inner(data.masks.chi_O * pv, pv, level,
                                             grid.h)
                              + expected_inner(Pv, Pv, level, grid.h))
        if rhs == 0.0 and lhs == 0.0:
            skipped += 1
            continue
        quot = lhs / rhs if rhs > 0 else float("inf")
        rows.append((k, lhs, rhs, quot))
        quotients.append(quot)
    if quotients:
        mx, md = float(np.max(quotients)), float(np.median(quotients))
    else:
        mx = md = float("nan")
    return ObservabilityReport(rows=rows, max_quotient=mx, median_quotient=md,
                               skipped=skipped)
