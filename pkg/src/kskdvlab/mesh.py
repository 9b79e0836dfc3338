"""Spatial mesh, clamped-boundary difference operators, and control regions.

The spatial domain is the unit interval with clamped boundary conditions
(value and first derivative vanish at both ends).  All operators act on the
interior points only; boundary values are eliminated through the closure

    y_0 = y_{n+1} = 0,        y_{-1} = y_1,  y_{n+2} = y_n,

i.e. homogeneous Dirichlet plus an even-reflection ghost for the wide
stencils.  The third-derivative stencil uses a homogeneous (zero) ghost
instead, which makes it an exactly antisymmetric matrix; together with the
symmetric second/fourth derivative operators this gives the exact transpose
relation between the forward and backward drift operators that the adjoint
solvers rely on.

Everything in this module is a pure function of its inputs and safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla


class ViolatedGeometry(ValueError):
    """A region layout violates a structural requirement.

    ``clause`` is a short machine-readable name of the violated condition.
    """

    def __init__(self, clause: str, detail: str = ""):
        self.clause = clause
        super().__init__(f"{clause}: {detail}" if detail else clause)


class IllConditionedSolve(RuntimeError):
    """A shifted banded solve failed to meet the residual contract."""

    def __init__(self, message: str, cond_estimate: float):
        self.cond_estimate = cond_estimate
        super().__init__(f"{message} (condition estimate {cond_estimate:.3e})")


@dataclass(frozen=True)
class Grid:
    """Uniform interior mesh of (0, 1) with width h = 1/(n_interior + 1)."""

    n_interior: int
    h: float
    x_points: np.ndarray

    def __post_init__(self):
        assert self.x_points.shape == (self.n_interior,)


def build_grid(n_interior: int) -> Grid:
    """Interior mesh x_j = j*h, j = 1..n_interior.  Requires n_interior >= 8
    so the five-point stencils have room."""
    if n_interior < 8:
        raise ValueError(f"n_interior must be >= 8, got {n_interior}")
    h = 1.0 / (n_interior + 1)
    x = h * np.arange(1, n_interior + 1, dtype=float)
    return Grid(n_interior=int(n_interior), h=h, x_points=x)


@dataclass(frozen=True, eq=False)
class BandedOperator:
    """Banded matrix in LAPACK band storage: bands[u + i - j, j] = A[i, j]."""

    n: int
    lower: int
    upper: int
    bands: np.ndarray

    def __post_init__(self):
        assert self.bands.shape == (self.lower + self.upper + 1, self.n)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Apply to v with the space axis last; v is (n,) or (..., n)."""
        out = np.zeros_like(v, dtype=float)
        n, u = self.n, self.upper
        for d in range(-self.lower, self.upper + 1):
            i0, i1 = max(0, -d), n - max(0, d)
            if i0 >= i1:
                continue
            diag = self.bands[u - d, i0 + d:i1 + d]
            out[..., i0:i1] += diag * v[..., i0 + d:i1 + d]
        return out

    def __matmul__(self, v: np.ndarray) -> np.ndarray:
        return self.apply(v)

    def transpose(self) -> "BandedOperator":
        bands = np.zeros((self.lower + self.upper + 1, self.n))
        n, u = self.n, self.upper
        for d in range(-self.lower, self.upper + 1):
            i0, i1 = max(0, -d), n - max(0, d)
            # diagonal d of A becomes diagonal -d of A^T
            vals = self.bands[u - d, i0 + d:i1 + d]
            bands[self.lower + d, i0:i1] = vals
        return BandedOperator(n=self.n, lower=self.upper, upper=self.lower,
                              bands=bands)

    def todense(self) -> np.ndarray:
        return self.apply(np.eye(self.n)).T

    def __add__(self, other: "BandedOperator") -> "BandedOperator":
        lo, up = max(self.lower, other.lower), max(self.upper, other.upper)
        bands = np.zeros((lo + up + 1, self.n))
        for op in (self, other):
            off = up - op.upper
            bands[off:off + op.bands.shape[0], :] += op.bands
        return BandedOperator(n=self.n, lower=lo, upper=up, bands=bands)

    def __mul__(self, c: float) -> "BandedOperator":
        return BandedOperator(n=self.n, lower=self.lower, upper=self.upper,
                              bands=c * self.bands)

    __rmul__ = __mul__


def _banded_from_diagonals(n: int, diags: dict[int, float]) -> BandedOperator:
    lo = -min(0, min(diags))
    up = max(0, max(diags))
    bands = np.zeros((lo + up + 1, n))
    for d, val in diags.items():
        i0, i1 = max(0, -d), n - max(0, d)
        bands[up - d, i0 + d:i1 + d] = val
    return BandedOperator(n=n, lower=lo, upper=up, bands=bands)


def build_derivative_operator(grid: Grid, order: int) -> BandedOperator:
    """Central-difference derivative of the given order on the interior points.

    Boundary closure: the boundary values themselves vanish; the ghost points
    of the five-point stencils use even reflection (order 4) so that the
    operator stays symmetric, and zero extension (order 3) so that the
    operator stays exactly antisymmetric.  Interior rows are order-2 accurate.
    """
    n, h = grid.n_interior, grid.h
    if order == 1:
        op = _banded_from_diagonals(n, {-1: -1.0, 1: 1.0})
        return (1.0 / (2 * h)) * op
    if order == 2:
        op = _banded_from_diagonals(n, {-1: 1.0, 0: -2.0, 1: 1.0})
        return (1.0 / h**2) * op
    if order == 3:
        op = _banded_from_diagonals(n, {-2: -1.0, -1: 2.0, 1: -2.0, 2: 1.0})
        return (1.0 / (2 * h**3)) * op
    if order == 4:
        op = _banded_from_diagonals(n, {-2: 1.0, -1: -4.0, 0: 6.0, 1: -4.0, 2: 1.0})
        bands = op.bands.copy()
        # even-reflection ghosts fold onto the first/last interior point
        bands[op.upper, 0] += 1.0
        bands[op.upper, n - 1] += 1.0
        op = BandedOperator(n=n, lower=op.lower, upper=op.upper, bands=bands)
        return (1.0 / h**4) * op
    raise ValueError(f"order must be 1, 2, 3 or 4, got {order}")


def build_drift_operator(grid: Grid, params: "ModelParams",
                         direction: str) -> BandedOperator:
    """Composite drift operator.

    forward:  k*D2 + D3 + eta*D4  (anti-diffusion, dispersion, dissipation)
    backward: k*D2 - D3 + eta*D4  (the exact transpose of the forward one)
    """
    d2 = build_derivative_operator(grid, 2)
    d3 = build_derivative_operator(grid, 3)
    d4 = build_derivative_operator(grid, 4)
    if direction == "forward":
        return params.k * d2 + d3 + params.eta * d4
    if direction == "backward":
        return params.k * d2 + (-1.0) * d3 + params.eta * d4
    raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")


def solve_banded(op: BandedOperator, shift: float, rhs: np.ndarray) -> np.ndarray:
    """Solve (I + shift*op) x = rhs; rhs has the space axis last.

    One step of iterative refinement is applied when needed so that the
    residual satisfies ||rhs - (I + shift*op) x|| <= 1e-12 * ||rhs||.
    """
    if shift == 0.0:
        return np.array(rhs, dtype=float, copy=True)
    bands = shift * op.bands
    bands[op.upper, :] += 1.0

    squeeze = rhs.ndim == 1
    b = np.atleast_2d(np.asarray(rhs, dtype=float))
    flat = b.reshape(-1, op.n)

    def matvec(x):
        return x + shift * op.apply(x)

    try:
        x = sla.solve_banded((op.lower, op.upper), bands, flat.T).T
    except np.linalg.LinAlgError as exc:
        raise IllConditionedSolve(str(exc), _cond_estimate(op, shift)) from exc

    rhs_norm = np.linalg.norm(flat)
    resid = np.linalg.norm(flat - matvec(x))
    if resid > 1e-13 * rhs_norm:
        x = x + sla.solve_banded((op.lower, op.upper), bands,
                                 (flat - matvec(x)).T).T
        resid = np.linalg.norm(flat - matvec(x))
    if not np.isfinite(resid) or resid > 1e-12 * rhs_norm:
        raise IllConditionedSolve(
            f"shifted banded solve residual {resid:.3e} exceeds contract",
            _cond_estimate(op, shift))
    out = x.reshape(b.shape)
    return out[0] if squeeze else out


def _cond_estimate(op: BandedOperator, shift: float) -> float:
    if op.n > 2048:
        return float("inf")
    dense = np.eye(op.n) + shift * op.todense()
    try:
        return float(np.linalg.cond(dense))
    except np.linalg.LinAlgError:
        return float("inf")


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Equation coefficients: anti-diffusion k > 0, dissipation eta > 0,
    horizon T > 0, and bounded zero-order coefficients a (drift) and b
    (diffusion), either constants or fields tabulated on (time cell, space
    cell) with constant-in-cell interpolation."""

    k: float
    eta: float
    T: float
    a: float | np.ndarray = 0.0
    b: float | np.ndarray = 0.0

    def __post_init__(self):
        if not (self.k > 0 and self.eta > 0 and self.T > 0):
            raise ValueError("k, eta and T must all be positive")
        for name in ("a", "b"):
            val = getattr(self, name)
            arr = np.asarray(val, dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"coefficient {name} must have a finite sup-norm")
            if arr.ndim not in (0, 2):
                raise ValueError(f"coefficient {name} must be a scalar or a 2-D table")

    def sup_norms(self) -> tuple[float, float]:
        return (float(np.max(np.abs(np.asarray(self.a)))),
                float(np.max(np.abs(np.asarray(self.b)))))

    def coefficient_tables(self, grid: Grid, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate a and b at (t_l, x_j) for l = 0..n_steps-1; returns two
        (n_steps, n_interior) arrays."""
        dt = self.T / n_steps
        times = dt * np.arange(n_steps)
        out = []
        for val in (self.a, self.b):
            arr = np.asarray(val, dtype=float)
            if arr.ndim == 0:
                out.append(np.full((n_steps, grid.n_interior), float(arr)))
                continue
            mt, mx = arr.shape
            it = np.minimum((mt * times / self.T).astype(int), mt - 1)
            ix = np.minimum((mx * grid.x_points).astype(int), mx - 1)
            out.append(arr[np.ix_(it, ix)])
        return out[0], out[1]


_REQUIRED_REGIONS = ("O", "D", "Od0", "Od1", "Od2")


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Sharp 0/1 indicators per interior grid point for the control region O,
    follower region D, observation regions Od0/Od1/Od2 and the auxiliary
    interval B compactly contained in O & Od0."""

    chi_O: np.ndarray
    chi_D: np.ndarray
    chi_Od0: np.ndarray
    chi_Od1: np.ndarray
    chi_Od2: np.ndarray
    chi_B: np.ndarray
    intervals: dict = field(default_factory=dict)

    def chi(self, i: int) -> np.ndarray:
        """Observation indicator for derivative order i = 0, 1, 2."""
        return (self.chi_Od0, self.chi_Od1, self.chi_Od2)[i]


def _indicator(grid: Grid, left: float, right: float) -> np.ndarray:
    return ((grid.x_points > left) & (grid.x_points < right)).astype(float)


def region_mask(grid: Grid, intervals) -> RegionMask:
    """Build and validate the region indicators.

    ``intervals`` is a mapping or a list of (name, left, right) with names
    O, D, Od0, Od1, Od2 and optionally B.  Raises ViolatedGeometry with the
    violated clause when the layout is inadmissible:

      * O and D must be disjoint,
      * O and Od0 must intersect,
      * some point of O & Od0 must lie outside Od1 | Od2,
      * B (defaulted to the middle half of the interval O & Od0) must be
        compactly contained in O & Od0.
    """
    if not isinstance(intervals, dict):
        intervals = {name: (l, r) for name, l, r in intervals}
    for name, (l, r) in intervals.items():
        if not (0.0 <= l < r <= 1.0):
            raise ViolatedGeometry("bad-interval", f"{name}=({l}, {r})")
    missing = [n for n in _REQUIRED_REGIONS if n not in intervals]
    if missing:
        raise ViolatedGeometry("missing-region", ", ".join(missing))

    chi = {n: _indicator(grid, *intervals[n]) for n in _REQUIRED_REGIONS}

    if np.any(chi["O"] * chi["D"] > 0):
        raise ViolatedGeometry("O-D-overlap", "O and D must be disjoint")
    both = chi["O"] * chi["Od0"]
    if not np.any(both > 0):
        raise ViolatedGeometry("intersection-empty", "O and Od0 must intersect")
    outside = both * (1 - chi["Od1"]) * (1 - chi["Od2"])
    if not np.any(outside > 0):
        raise ViolatedGeometry(
            "no-point-outside-derivative-regions",
            "O & Od0 must contain a point outside Od1 | Od2")

    core_l = max(intervals["O"][0], intervals["Od0"][0])
    core_r = min(intervals["O"][1], intervals["Od0"][1])
    if "B" in intervals:
        bl, br = intervals["B"]
        if not (core_l < bl < br < core_r):
            raise ViolatedGeometry(
                "B-not-compactly-contained",
                f"B=({bl}, {br}) must sit strictly inside ({core_l}, {core_r})")
    else:
        w = core_r - core_l
        bl, br = core_l + 0.25 * w, core_r - 0.25 * w
        intervals = dict(intervals)
        intervals["B"] = (bl, br)
    chi["B"] = _indicator(grid, bl, br)

    return RegionMask(chi_O=chi["O"], chi_D=chi["D"], chi_Od0=chi["Od0"],
                      chi_Od1=chi["Od1"], chi_Od2=chi["Od2"], chi_B=chi["B"],
                      intervals=dict(intervals))
