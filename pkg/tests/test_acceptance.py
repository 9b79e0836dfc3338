"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
summary lines and timings.
"""

import time

import numpy as np
import scipy.linalg as sla

from kskdvlab.carleman import (CarlemanParams, construct_kappa,
                               evaluate_weights, verify_parameter_bounds)
from kskdvlab.config import ExperimentConfig
from kskdvlab.game import (GameParams, SaddleProblem,
                           direct_assembly_solve, make_targets,
                           solve_saddle_point, verify_first_order_conditions,
                           verify_saddle_inequalities)
from kskdvlab.leader import (LeaderData, PenalizedConfig, epsilon_sweep,
                             penalized_cost, penalized_gradient,
                             stackelberg_pipeline)
from kskdvlab.mesh import (ModelParams, build_derivative_operator,
                           build_drift_operator, build_grid, region_mask)
from kskdvlab.solvers import (BackwardInputs, ForwardInputs, backward_solve,
                              forward_solve, ito_pairing_check,
                              space_time_inner)
from kskdvlab.runner import manifest_digest_table, run
from kskdvlab.tree import (TreeProcess, build_tree, conditional_expectation,
                           expectation, martingale_coefficient)

REGIONS = {"O": (0.2, 0.5), "D": (0.6, 0.8), "Od0": (0.3, 0.7),
           "Od1": (0.55, 0.75), "Od2": (0.6, 0.9)}


def report(number, name, ok, detail, budget, elapsed):
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {number:02d} [{name}] {status} "
          f"({detail}; {elapsed:.1f}s of {budget:.0f}s budget)")
    assert elapsed <= budget, f"criterion {number} exceeded its runtime budget"
    assert ok, f"criterion {number} [{name}] failed: {detail}"


def test_01_discrete_duality():
    t_start = time.monotonic()
    grid = build_grid(16)
    tree = build_tree(6, 1.0)
    masks = region_mask(grid, REGIONS)
    worst = 0.0
    for k in range(50):
        rng = np.random.default_rng(k)
        params = ModelParams(k=0.8 * rng.uniform(0.5, 1.5), eta=0.1, T=1.0,
                             a=rng.uniform(-0.5, 0.5, (3, 4)),
                             b=rng.uniform(-0.5, 0.5, (2, 5)))
        mk = lambda: TreeProcess.random(6, rng, width=16)
        fwd = forward_solve(
            ForwardInputs(y0=rng.standard_normal(16), params=params,
                          masks=masks, f=mk(), g=mk(), v=mk(), psi1=mk(),
                          psi2=mk()), tree, grid)
        src = mk()
        ca, cb = rng.standard_normal(16), rng.standard_normal(16)
        bwd = backward_solve(
            BackwardInputs(
                terminal=rng.standard_normal((2**6, 16)),
                drift_source=lambda level, m, Z: ca * m + cb * Z
                + src.values[level]),
            tree, grid, params)
        worst = max(worst, ito_pairing_check(fwd, bwd, tree, grid))
    elapsed = time.monotonic() - t_start
    report(1, "discrete duality", worst <= 1e-10,
           f"max residual {worst:.2e} <= 1e-10 over 50 instances", 30, elapsed)


def test_02_tree_identities():
    t_start = time.monotonic()
    worst_tower = worst_iso = worst_rec = 0.0
    for k in range(100):
        rng = np.random.default_rng(1000 + k)
        N = int(rng.integers(4, 11))
        tree = build_tree(N, float(rng.uniform(0.5, 2.0)))
        proc = TreeProcess.random(N + 1, rng)
        # tower property through every level
        for level in range(1, N + 1):
            coarse = TreeProcess(proc.values[:level - 1]
                                 + [conditional_expectation(proc, level)])
            worst_tower = max(worst_tower,
                              abs(expectation(coarse, level - 1)
                                  - expectation(proc, level)))
        # martingale reconstruction at every node
        for level in range(1, N + 1):
            m = conditional_expectation(proc, level)
            Z = martingale_coefficient(proc, level, tree)
            up = m + tree.sqrt_dt * Z
            down = m - tree.sqrt_dt * Z
            worst_rec = max(worst_rec,
                            np.max(np.abs(up - proc.values[level][0::2])),
                            np.max(np.abs(down - proc.values[level][1::2])))
        # discrete stochastic-integral isometry for an adapted integrand
        integrand = TreeProcess.random(N, rng)
        acc = TreeProcess.zeros(N + 1)
        for level in range(N):
            prev, coef = acc.values[level], integrand.values[level]
            nxt = np.empty(2 ** (level + 1))
            nxt[0::2] = prev + coef * tree.sqrt_dt
            nxt[1::2] = prev - coef * tree.sqrt_dt
            acc.values[level + 1] = nxt
        lhs = expectation(TreeProcess([a**2 for a in acc.values]), N)
        rhs = sum(tree.dt * expectation(
            TreeProcess([a**2 for a in integrand.values]), l)
            for l in range(N))
        worst_iso = max(worst_iso, abs(lhs - rhs) / (1 + abs(lhs)))
    elapsed = time.monotonic() - t_start
    worst = max(worst_tower, worst_iso, worst_rec)
    report(2, "tree identities", worst <= 1e-12,
           f"tower {worst_tower:.1e}, isometry {worst_iso:.1e}, "
           f"reconstruction {worst_rec:.1e}, all <= 1e-12", 10, elapsed)


def test_03_operator_accuracy():
    t_start = time.monotonic()
    # interior exactness of the fourth derivative on the reference quartic
    grid = build_grid(12)
    d4 = build_derivative_operator(grid, 4)
    p = grid.x_points**2 * (1 - grid.x_points) ** 2
    d4_err = float(np.max(np.abs(d4.apply(p)[2:-2] - 24.0)))

    # spatial order: halving h cuts the interior error by >= 3.5
    def interior_error(n, order):
        g = build_grid(n)
        op = build_derivative_operator(g, order)
        prof = np.sin(np.pi * g.x_points) ** 2
        exact = {1: np.pi * np.sin(2 * np.pi * g.x_points),
                 2: 2 * np.pi**2 * np.cos(2 * np.pi * g.x_points),
                 3: -4 * np.pi**3 * np.sin(2 * np.pi * g.x_points),
                 4: -8 * np.pi**4 * np.cos(2 * np.pi * g.x_points)}[order]
        return np.max(np.abs(op.apply(prof)[2:-2] - exact[2:-2]))

    spatial_factors = [interior_error(15, order) / interior_error(31, order)
                       for order in (1, 2, 3, 4)]

    # temporal order of the deterministic reduction against the exact
    # semidiscrete flow (augmented matrix exponential); the horizon is short
    # enough that the transient is alive, otherwise both integrators sit on
    # the shared steady state and the measured order is vacuous
    T_hor = 0.01
    grid = build_grid(12)
    masks = region_mask(grid, REGIONS)
    params = ModelParams(k=0.5, eta=0.05, T=T_hor, a=0.3)
    rng = np.random.default_rng(7)
    y0 = rng.standard_normal(12)
    fvec = rng.standard_normal(12)
    op = build_drift_operator(grid, params, "forward")
    aug = np.zeros((13, 13))
    aug[:12, :12] = -op.todense() + 0.3 * np.eye(12)
    aug[:12, 12] = masks.chi_O * fvec
    phi = sla.expm(aug * T_hor)
    exact = phi[:12, :12] @ y0 + phi[:12, 12]
    errors = []
    for N in (2, 4, 8, 16):
        tree = build_tree(N, T_hor)
        sol = forward_solve(
            ForwardInputs(y0=y0, params=params, masks=masks,
                          f=TreeProcess.constant(N, fvec)), tree, grid)
        errors.append(np.linalg.norm(sol.y.values[N][0] - exact))
    orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))

    elapsed = time.monotonic() - t_start
    ok = (d4_err <= 1e-10 and min(spatial_factors) >= 3.5
          and np.min(orders) >= 0.9)
    report(3, "operator accuracy", ok,
           f"D4 interior error {d4_err:.1e} <= 1e-10, spatial factors "
           f">= {min(spatial_factors):.2f} (need 3.5), temporal orders "
           f">= {np.min(orders):.2f} (need 0.9)", 60, elapsed)


def _random_saddle_problem(rng, grid, tree, masks, beta=1e3):
    params = ModelParams(k=0.5, eta=0.05, T=tree.horizon,
                         a=rng.uniform(-0.3, 0.3), b=rng.uniform(-0.4, 0.4))
    game = GameParams(beta=beta, delta1=beta, delta2=beta)
    n, N = grid.n_interior, tree.depth
    mk = lambda: TreeProcess.random(N, rng, width=n)
    targets = make_targets(masks, yd0=mk(), yd1=mk(), yd2=mk())
    return SaddleProblem(f=mk(), g=mk(), y0=rng.standard_normal(n),
                         targets=targets, params=params, game=game,
                         masks=masks)


def test_04_saddle_point():
    t_start = time.monotonic()
    grid = build_grid(8)
    tree = build_tree(4, 1.0)
    masks = region_mask(grid, REGIONS)
    worst_diff = worst_foc = 0.0
    all_signed = True
    for inst in range(10):
        rng = np.random.default_rng(4000 + inst)
        problem = _random_saddle_problem(rng, grid, tree, masks)
        picard = solve_saddle_point(problem, tree, grid, tol=1e-12,
                                    max_iter=200)
        direct = direct_assembly_solve(problem, tree, grid)
        num = den = 0.0
        for a, b in zip(picard.z.values + picard.y.y.values,
                        direct.z.values + direct.y.y.values):
            num += float(np.sum((a - b) ** 2))
            den += float(np.sum(b**2))
        worst_diff = max(worst_diff, np.sqrt(num) / (1 + np.sqrt(den)))
        worst_foc = max(worst_foc, verify_first_order_conditions(
            picard, tree, grid, n_directions=6, seed=inst))
        margins = verify_saddle_inequalities(picard, tree, grid,
                                             n_samples=100, seed=inst)
        all_signed = all_signed and margins.validated \
            and margins.all_signed_correctly
    elapsed = time.monotonic() - t_start
    ok = worst_diff <= 1e-8 and worst_foc <= 1e-6 and all_signed
    report(4, "saddle point", ok,
           f"picard-vs-assembly {worst_diff:.1e} <= 1e-8, finite-difference "
           f"stationarity {worst_foc:.1e} <= 1e-6, 10x100 margins signed "
           f"correctly: {all_signed}", 300, elapsed)


def test_05_penalized_gradient():
    t_start = time.monotonic()
    grid = build_grid(12)
    tree = build_tree(5, 1.0)
    masks = region_mask(grid, REGIONS)
    eps_pen = 1e-2
    worst = 0.0
    for inst in range(5):
        rng = np.random.default_rng(5000 + inst)
        params = ModelParams(k=0.5, eta=0.05, T=1.0,
                             a=rng.uniform(-0.3, 0.3), b=rng.uniform(-0.4, 0.4))
        game = GameParams(beta=1e3, delta1=1e3, delta2=1e3)
        mk = lambda: TreeProcess.random(5, rng, width=12)
        data = LeaderData(y0=rng.standard_normal(12),
                          targets=make_targets(masks, yd0=mk(), yd1=mk(),
                                               yd2=mk()),
                          params=params, game=game, masks=masks)
        f = TreeProcess([masks.chi_O * v for v in mk().values])
        g = mk()
        gf, gg, _ = penalized_gradient(f, g, eps_pen, data, tree, grid,
                                       tol=1e-12)

        def cost_at(ff, gg_):
            _, _, saddle = penalized_gradient(ff, gg_, eps_pen, data, tree,
                                              grid, tol=1e-12)
            return penalized_cost(ff, gg_, eps_pen, saddle, data, tree, grid)

        for kdir in range(5):
            df = TreeProcess([masks.chi_O * v for v in mk().values])
            dg = mk()
            step = 1e-4
            shift = lambda base, d, c: TreeProcess(
                [bv + c * dv for bv, dv in zip(base.values, d.values)])
            fd = (cost_at(shift(f, df, step), shift(g, dg, step))
                  - cost_at(shift(f, df, -step), shift(g, dg, -step))) / (2 * step)
            exact = (space_time_inner(gf, df, tree, grid, weight=masks.chi_O)
                     + space_time_inner(gg, dg, tree, grid))
            worst = max(worst, abs(fd - exact) / (1e-300 + abs(exact)))
    elapsed = time.monotonic() - t_start
    report(5, "penalized gradient", worst <= 1e-6,
           f"adjoint-vs-centered-difference relative error {worst:.1e} "
           f"<= 1e-6 over 5x5 directions", 180, elapsed)


def test_06_null_control_decay():
    t_start = time.monotonic()
    cfg = ExperimentConfig()  # defaults: n=24, depth=7, random y0, zero targets
    assert (cfg.n_interior, cfg.depth, cfg.y0_kind, cfg.targets_kind) == \
        (24, 7, "random", "zero")
    assert cfg.eps_schedule[0] == 1e-2 and cfg.eps_schedule[-1] == 1e-6
    from kskdvlab.runner import materialize
    bundle = materialize(cfg)
    rows, f, g, _ = epsilon_sweep(bundle.data, bundle.pen, bundle.tree,
                                  bundle.grid, solver_tol=cfg.saddle_tol)
    terminal = [r.terminal_sq for r in rows]
    y0_sq = bundle.grid.h * float(np.sum(bundle.data.y0**2))
    monotone = all(b <= a for a, b in zip(terminal, terminal[1:]))
    decay = terminal[-1] / y0_sq
    char = max(rows[-1].char_residual_f, rows[-1].char_residual_g)
    elapsed = time.monotonic() - t_start
    ok = monotone and decay <= 1e-3 and char <= 10 * cfg.cg_tol \
        and all(r.converged for r in rows)
    report(6, "null-control decay", ok,
           f"terminal nonincreasing: {monotone}, final ratio {decay:.2e} "
           f"<= 1e-3, characterization residual {char:.1e} <= "
           f"{10 * cfg.cg_tol:.0e}", 600, elapsed)


def test_07_control_estimate():
    t_start = time.monotonic()
    grid = build_grid(16)
    tree = build_tree(6, 2.0)
    masks = region_mask(grid, REGIONS)
    params = ModelParams(k=0.5, eta=0.05, T=2.0, b=0.25)
    game = GameParams(beta=50.0, delta1=50.0, delta2=50.0)
    cp = CarlemanParams(lam=1.0, mu=1.0)
    pen = PenalizedConfig(cg_tol=1e-6, cg_max_iter=400,
                          epsilon_schedule=(1e-2, 1e-3, 1e-4, 1e-5, 1e-6))
    ratios = []
    for inst in range(20):
        rng = np.random.default_rng(1000 + inst)
        y0 = rng.standard_normal(16)
        mk = lambda: TreeProcess.random(6, rng, width=16)
        targets = make_targets(masks, yd0=mk(), yd1=mk(), yd2=mk())
        data = LeaderData(y0=y0, targets=targets, params=params, game=game,
                          masks=masks)
        rep = stackelberg_pipeline(data, pen, tree, grid, cp)
        ratios.append(rep.control_estimate_ratio)
    ratios = np.array(ratios)
    spread = float(ratios.max() / np.median(ratios))
    elapsed = time.monotonic() - t_start
    ok = bool(np.all(np.isfinite(ratios)) and np.all(ratios > 0)
              and spread <= 3.0)
    report(7, "control estimate", ok,
           f"20 ratios finite, max/median {spread:.2f} <= 3", 900, elapsed)


def test_08_observability_quotient(tmp_path):
    t_start = time.monotonic()
    # near-identity stepping keeps the recovered-initial-energy term at full
    # spatial rank, which is what makes the sampled constant a stable statistic
    cfg = ExperimentConfig(n_interior=32, depth=4, T=2e-5, eta=1e-3,
                           lam=1.0, mu=1.0, y0_kind="zero",
                           observability_samples=100, seed=7,
                           out=str(tmp_path / "obs"))
    record = run("observability", cfg)
    csv = (tmp_path / "obs" / "observability_samples.csv").read_text()
    rows = [line.split(",") for line in csv.splitlines()[1:]]
    quotients = np.array([float(r[3]) for r in rows])
    spread = float(quotients.max() / np.median(quotients))
    elapsed = time.monotonic() - t_start
    ok = (len(quotients) == 100 and bool(np.all(np.isfinite(quotients)))
          and spread <= 3.0 and "observability_samples.csv" in record.files)
    report(8, "observability quotient", ok,
           f"100 finite quotients, max/median {spread:.2f} <= 3, "
           f"report persisted", 600, elapsed)


def test_09_weight_toolkit():
    t_start = time.monotonic()
    rng = np.random.default_rng(9)
    audits_ok = True
    for _ in range(10):
        c = rng.uniform(0.3, 0.7)
        w = rng.uniform(0.02, 0.1)
        construct_kappa((c - w, c + w))  # raises AuditFailed on violation
    kappa = construct_kappa((0.35, 0.45))
    exact_mid = exact_match = True
    for T in (1.0, 2.0, 0.5):
        cp = CarlemanParams(lam=1.0, mu=1.0)
        wf = evaluate_weights(cp, kappa, T, T / 2, 0.5)
        exact_mid = exact_mid and wf.gamma == 4.0 / T**2
        t = np.linspace(T / 2, T * 0.999, 50)
        wf2 = evaluate_weights(cp, kappa, T, t, 0.3)
        exact_match = exact_match and bool(
            np.all(wf2.gamma_bar == wf2.gamma))
    cp = CarlemanParams(lam=1.0, mu=1.0)
    t = np.linspace(1e-3, 0.999, 500)[:, None]
    x = np.linspace(0, 1, 101)[None, :]
    wf = evaluate_weights(cp, kappa, 1.0, t, x)
    with np.errstate(over="ignore"):
        inv_rho_sq = np.where(np.isfinite(wf.rho), wf.rho**-2.0, 0.0)
    dominated = bool(np.all(np.broadcast_to(inv_rho_sq, wf.theta_bar.shape)
                            <= wf.theta_bar**2 + 1e-300))
    fc = verify_parameter_bounds(CarlemanParams.default(1.0), kappa, 1.0)
    elapsed = time.monotonic() - t_start
    ok = audits_ok and exact_mid and exact_match and dominated \
        and fc.all_finite()
    report(9, "weight toolkit", ok,
           f"10 audits passed, midpoint blow-up exact: {exact_mid}, "
           f"one-sided weight matches on the late half: {exact_match}, "
           f"rho^-2 <= theta_bar^2: {dominated}, fitted constants finite: "
           f"{fc.all_finite()}", 10, elapsed)


def test_10_reproducibility(tmp_path):
    t_start = time.monotonic()
    cfg = ExperimentConfig(n_interior=16, depth=5, seed=20240601,
                           eps_schedule=(1e-2, 1e-3, 1e-4), cg_tol=1e-6)
    r1 = run("stackelberg", cfg, out_dir=tmp_path / "run1")
    r2 = run("stackelberg", cfg, out_dir=tmp_path / "run2")
    t1 = manifest_digest_table(tmp_path / "run1" / "manifest.txt")
    t2 = manifest_digest_table(tmp_path / "run2" / "manifest.txt")
    elapsed = time.monotonic() - t_start
    ok = r1.files == r2.files and t1 == t2 and len(t1) >= 5
    report(10, "reproducibility", ok,
           f"{len(t1)} file digests identical across two runs", 240, elapsed)
