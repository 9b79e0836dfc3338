"""Run orchestration: materialize a config, execute a subcommand, persist
CSV tables, a human-readable report, figures, and a digest manifest.

Reproducibility contract: a run is a pure function of (config, seed).  All
randomness flows through per-stage seeds derived from the master seed with a
splitmix-style mix (documented in ``stage_seed``), reductions are
deterministic, and every emitted file except the manifest itself is digested;
wall-clock timings live only in the manifest's informational tail so the
digest table is identical across reruns.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import carleman, figures
from .config import ExperimentConfig, config_hash
from .game import (GameParams, Targets, evaluate_robust_cost, make_targets,
                   solve_saddle_point, verify_first_order_conditions,
                   verify_saddle_inequalities)
from .leader import (LeaderData, PenalizedConfig, epsilon_sweep,
                     stackelberg_pipeline)
from .mesh import ModelParams, build_derivative_operator, build_grid, region_mask
from .solvers import ForwardInputs, energy_report, expected_sq_norm, forward_solve
from .tree import TreeProcess, build_tree

ARTIFACT_VERSION = "0.1.0"
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 output step (Steele-Lea-Flood mixing constants)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def stage_seed(master: int, stage: str) -> int:
    """Per-stage seed: fold the stage name bytes into the master seed with
    one splitmix64 step per byte."""
    s = master & _MASK64
    for byte in stage.encode("utf-8"):
        s = splitmix64(s ^ byte)
    return s


@dataclass
class RunRecord:
    config_hash: str
    version: str
    files: dict = field(default_factory=dict)   # name -> sha256
    timings: dict = field(default_factory=dict)
    out_dir: str = ""


@dataclass(eq=False)
class Bundle:
    """Materialized problem objects for one config."""

    cfg: ExperimentConfig
    grid: object
    tree: object
    masks: object
    params: ModelParams
    game: GameParams
    data: LeaderData
    cp: carleman.CarlemanParams
    kappa: carleman.KappaFunction
    pen: PenalizedConfig


def _load_coefficient(entry, label: str):
    if isinstance(entry, str) and entry.startswith("file:"):
        return np.loadtxt(entry[5:], delimiter=",", ndmin=2)
    return float(entry)


def _build_y0(cfg: ExperimentConfig, grid) -> np.ndarray:
    kind = cfg.y0_kind
    if kind == "zero":
        return np.zeros(grid.n_interior)
    if kind == "bump":
        x = grid.x_points
        return cfg.y0_scale * 16.0 * x**2 * (1 - x) ** 2
    if kind == "random":
        rng = np.random.default_rng(stage_seed(cfg.seed, "y0"))
        return cfg.y0_scale * rng.standard_normal(grid.n_interior)
    if kind.startswith("file:"):
        return np.loadtxt(kind[5:], ndmin=1)
    raise ValueError(f"unknown initial kind {kind!r}")


def _build_targets(cfg: ExperimentConfig, grid, tree, masks) -> Targets:
    kind = cfg.targets_kind
    N = tree.depth
    active = int(np.ceil(cfg.targets_active_fraction * N))
    if kind == "zero":
        return Targets()

    def taper(proc):
        vals = [arr if level < active else np.zeros_like(arr)
                for level, arr in enumerate(proc.values)]
        return TreeProcess(vals)

    if kind == "constant":
        const = TreeProcess.constant(N, np.full(grid.n_interior,
                                                cfg.targets_value))
        return make_targets(masks, yd0=taper(const), yd1=taper(const),
                            yd2=taper(const))
    if kind == "random":
        rng = np.random.default_rng(stage_seed(cfg.seed, "targets"))
        mk = lambda: taper(TreeProcess.random(N, rng, width=grid.n_interior,
                                              scale=cfg.targets_scale))
        return make_targets(masks, yd0=mk(), yd1=mk(), yd2=mk())
    if kind.startswith("file:"):
        prefix = kind[5:]
        comps = {}
        for i in range(3):
            arr = np.loadtxt(f"{prefix}{i}.csv", delimiter=",", ndmin=2)
            comps[f"yd{i}"] = TreeProcess.constant(N, arr[0])
        return make_targets(masks, **comps)
    raise ValueError(f"unknown targets kind {kind!r}")


def materialize(cfg: ExperimentConfig) -> Bundle:
    grid = build_grid(cfg.n_interior)
    tree = build_tree(cfg.depth, cfg.T)
    masks = region_mask(grid, cfg.region_dict())
    params = ModelParams(k=cfg.k, eta=cfg.eta, T=cfg.T,
                         a=_load_coefficient(cfg.a, "a"),
                         b=_load_coefficient(cfg.b, "b"))
    game = GameParams(beta=cfg.beta, delta1=cfg.delta1, delta2=cfg.delta2)
    targets = _build_targets(cfg, grid, tree, masks)
    data = LeaderData(y0=_build_y0(cfg, grid), targets=targets, params=params,
                      game=game, masks=masks)
    cp = carleman.CarlemanParams(lam=cfg.resolved_lambda(), mu=cfg.mu)
    kappa = carleman.construct_kappa(masks.intervals["B"])
    pen = PenalizedConfig(epsilon=cfg.eps_schedule[-1], cg_tol=cfg.cg_tol,
                          cg_max_iter=cfg.cg_max_iter,
                          epsilon_schedule=cfg.eps_schedule)
    return Bundle(cfg=cfg, grid=grid, tree=tree, masks=masks, params=params,
                  game=game, data=data, cp=cp, kappa=kappa, pen=pen)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))  # shortest round-trip form
    return str(value)


class _Writer:
    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def csv(self, name: str, header: list[str], rows):
        path = self.out_dir / name
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
        self.files.append(name)

    def text(self, name: str, content: str):
        path = self.out_dir / name
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(content)
        self.files.append(name)

    def figure(self, name: str, render, *args, **kwargs):
        render(self.out_dir / name, *args, **kwargs)
        self.files.append(name)

    def manifest(self, record: RunRecord):
        lines = ["# file digests"]
        for name in sorted(self.files):
            digest = hashlib.sha256((self.out_dir / name).read_bytes()).hexdigest()
            record.files[name] = digest
            lines.append(f"{digest}  {name}")
        lines.append("")
        lines.append("# run")
        lines.append(f"config_hash = {record.config_hash}")
        lines.append(f"version = {record.version}")
        lines.append("")
        lines.append("# timings (informational, excluded from determinism)")
        for stage, secs in record.timings.items():
            lines.append(f"{stage} = {secs:.3f} s")
        lines.append("")
        (self.out_dir / "manifest.txt").write_text("\n".join(lines),
                                                   encoding="utf-8")


def manifest_digest_table(path) -> dict:
    """The digest table of a manifest file (name -> sha256); the timing tail
    is excluded, so two runs compare equal iff their outputs match."""
    table = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# run"):
            break
        if line.startswith("#") or not line.strip():
            continue
        digest, name = line.split()
        table[name] = digest
    return table


def _report_block(title: str, pairs) -> str:
    width = max((len(k) for k, _ in pairs), default=0)
    lines = [title, "-" * len(title)]
    lines += [f"{k.ljust(width)} : {_fmt(v)}" for k, v in pairs]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _run_simulate(bundle: Bundle, w: _Writer) -> str:
    grid, tree = bundle.grid, bundle.tree
    fwd = forward_solve(ForwardInputs(y0=bundle.data.y0, params=bundle.params,
                                      masks=bundle.masks), tree, grid)
    d2 = build_derivative_operator(grid, 2)
    rows = []
    for level in range(tree.depth + 1):
        state_sq = expected_sq_norm(fwd.y.values[level], level, grid.h)
        curv_sq = expected_sq_norm(d2.apply(fwd.y.values[level]), level, grid.h)
        rows.append((level, level * tree.dt, state_sq, curv_sq))
    w.csv("energy.csv", ["level", "t", "state_sq", "second_derivative_sq"], rows)
    rep = energy_report(fwd, tree, grid)
    w.figure("energy.png", figures.render_energy,
             [r[1] for r in rows], [r[2] for r in rows], [r[3] for r in rows])
    return _report_block("forward simulation", [
        ("max_state_sq", rep.max_state_sq),
        ("dissipation_sq", rep.dissipation_sq),
        ("data_sq", rep.data_sq),
        ("energy_ratio", rep.ratio),
    ])


def _run_saddle(bundle: Bundle, w: _Writer) -> str:
    cfg, grid, tree = bundle.cfg, bundle.grid, bundle.tree
    problem = bundle.data.saddle_problem(None, None)
    sol = solve_saddle_point(problem, tree, grid, tol=cfg.saddle_tol,
                             max_iter=cfg.saddle_max_iter)
    cost = evaluate_robust_cost(sol.y, sol.v_star, sol.psi1_star,
                                sol.psi2_star, problem.targets, bundle.masks,
                                bundle.game, tree, grid)
    foc = verify_first_order_conditions(
        sol, tree, grid, n_directions=6,
        seed=stage_seed(cfg.seed, "saddle-foc"))
    margins = verify_saddle_inequalities(
        sol, tree, grid, n_samples=100,
        seed=stage_seed(cfg.seed, "saddle-margins"))
    w.csv("saddle_costs.csv", ["term", "value"],
          sorted(cost.terms.items()) + [("total", cost.total)])
    w.csv("saddle_trace.csv", ["iteration", "residual"],
          list(enumerate(sol.residual_trace, start=1)))
    w.csv("saddle_verification.csv", ["check", "value"], [
        ("picard_iterations", sol.picard_iterations),
        ("picard_residual", sol.residual),
        ("foc_residual", foc),
        ("worst_disturbance_margin", margins.worst_disturbance_margin),
        ("worst_follower_margin", margins.worst_follower_margin),
        ("margins_signed_correctly", int(margins.all_signed_correctly)),
        ("parameters_validated", int(margins.validated)),
    ])
    w.figure("saddle_trace.png", figures.render_residual_trace,
             sol.residual_trace)
    return _report_block("follower-disturbance saddle point", [
        ("robust_cost", cost.total),
        ("picard_iterations", sol.picard_iterations),
        ("picard_residual", sol.residual),
        ("foc_residual", foc),
        ("coupling_estimate", bundle.game.coupling_estimate(bundle.params)),
        ("parameters_validated", margins.validated),
        ("margins_signed_correctly", margins.all_signed_correctly),
    ])


def _sweep_rows_csv(w: _Writer, rows):
    w.csv("epsilon_sweep.csv",
          ["epsilon", "terminal_sq", "f_sq", "g_sq", "leader_cost",
           "cg_iterations", "char_residual_f", "char_residual_g", "converged"],
          [(r.epsilon, r.terminal_sq, r.f_sq, r.g_sq, r.leader_cost,
            r.cg_iterations, r.char_residual_f, r.char_residual_g,
            int(r.converged)) for r in rows])


def _run_nullcontrol(bundle: Bundle, w: _Writer) -> str:
    cfg = bundle.cfg
    rows, f, g, saddle = epsilon_sweep(bundle.data, bundle.pen, bundle.tree,
                                       bundle.grid, solver_tol=cfg.saddle_tol)
    _sweep_rows_csv(w, rows)
    w.figure("decay.png", figures.render_decay,
             [r.epsilon for r in rows], [r.terminal_sq for r in rows],
             [r.f_sq + r.g_sq for r in rows])
    y0_sq = bundle.grid.h * float(np.sum(bundle.data.y0**2))
    return _report_block("penalized terminal decay", [
        ("y0_sq", y0_sq),
        ("final_epsilon", rows[-1].epsilon),
        ("final_terminal_sq", rows[-1].terminal_sq),
        ("decay_ratio", rows[-1].terminal_sq / y0_sq if y0_sq else 0.0),
        ("final_leader_cost", rows[-1].leader_cost),
    ])


def _run_stackelberg(bundle: Bundle, w: _Writer) -> str:
    cfg = bundle.cfg
    rep = stackelberg_pipeline(bundle.data, bundle.pen, bundle.tree,
                               bundle.grid, bundle.cp,
                               config_hash=config_hash(cfg),
                               solver_tol=cfg.saddle_tol)
    _sweep_rows_csv(w, rep.sweep_rows)
    w.csv("pipeline_summary.csv", ["quantity", "value"], [
        ("y0_sq", rep.y0_sq),
        ("terminal_sq", rep.terminal_sq),
        ("decay_ratio", rep.decay_ratio),
        ("leader_cost", rep.leader_cost),
        ("char_residual_f", rep.char_residual_f),
        ("char_residual_g", rep.char_residual_g),
        ("target_weighted_norm", rep.target_weighted_norm),
        ("control_estimate_ratio", rep.control_estimate_ratio),
        ("saddle_picard_iterations", rep.saddle.picard_iterations),
    ])
    w.figure("decay.png", figures.render_decay,
             [r.epsilon for r in rep.sweep_rows],
             [r.terminal_sq for r in rep.sweep_rows],
             [r.f_sq + r.g_sq for r in rep.sweep_rows])
    terminal_mean = np.abs(rep.saddle.y.y.values[bundle.tree.depth]).mean(axis=0)
    w.figure("terminal_profile.png", figures.render_profile,
             bundle.grid.x_points, terminal_mean,
             "mean |terminal state| per grid point")
    pairs = [
        ("y0_sq", rep.y0_sq),
        ("terminal_sq", rep.terminal_sq),
        ("decay_ratio", rep.decay_ratio),
        ("leader_cost", rep.leader_cost),
        ("char_residual_f", rep.char_residual_f),
        ("char_residual_g", rep.char_residual_g),
        ("target_weighted_norm", rep.target_weighted_norm),
        ("empirical_control_constant", rep.control_estimate_ratio),
        ("sign_convention", rep.sign_convention),
        ("config_hash", rep.config_hash),
    ] + [(f"terminal_sq[eps={r.epsilon:g}]", r.terminal_sq)
         for r in rep.sweep_rows]
    return _report_block("hierarchical control pipeline", pairs)


def _run_observability(bundle: Bundle, w: _Writer) -> str:
    cfg = bundle.cfg
    rep = carleman.observability_quotient(
        cfg.observability_samples, stage_seed(cfg.seed, "observability"),
        bundle.data, bundle.tree, bundle.grid, bundle.cp, bundle.kappa,
        solver_tol=cfg.saddle_tol)
    w.csv("observability_samples.csv", ["sample", "lhs", "rhs", "quotient"],
          rep.rows)
    w.figure("observability_hist.png", figures.render_histogram,
             [r[3] for r in rep.rows], "observability quotient")
    return _report_block("observability study", [
        ("samples", len(rep.rows)),
        ("skipped", rep.skipped),
        ("max_quotient", rep.max_quotient),
        ("median_quotient", rep.median_quotient),
        ("max_over_median", rep.max_quotient / rep.median_quotient
         if rep.median_quotient else float("nan")),
    ])


def _run_carleman_check(bundle: Bundle, w: _Writer) -> str:
    cfg, grid, tree = bundle.cfg, bundle.grid, bundle.tree
    fc = carleman.verify_parameter_bounds(bundle.cp, bundle.kappa,
                                          bundle.params.T)
    w.csv("fitted_constants.csv", ["bound", "fitted"],
          sorted(fc.values.items()))
    rows = []
    seed0 = stage_seed(cfg.seed, "quotients")
    for kind, make in (("forward", carleman.make_forward_quotient_instance),
                       ("backward", carleman.make_backward_quotient_instance)):
        for k in range(cfg.quotient_samples):
            inst = make(seed0 + k, tree, grid, bundle.params.eta)
            res = carleman.carleman_quotient(kind, inst, bundle.cp,
                                             bundle.kappa, tree, grid,
                                             bundle.masks.chi_B)
            rows.append((kind, k, res.lhs, res.rhs, res.quotient))
    w.csv("carleman_quotients.csv", ["kind", "sample", "lhs", "rhs", "quotient"],
          rows)
    xs = np.linspace(0.0, 1.0, 401)
    w.figure("kappa.png", figures.render_profile, xs, bundle.kappa.kappa(xs),
             "spatial bump")
    times = np.linspace(1e-3 * bundle.params.T, bundle.params.T * (1 - 1e-3), 400)
    wf = carleman.evaluate_weights(bundle.cp, bundle.kappa, bundle.params.T,
                                   times, 0.5)
    w.figure("weights.png", figures.render_weights, times, wf.gamma,
             wf.gamma_bar)
    quot = [r[4] for r in rows]
    return _report_block("weight toolkit diagnostics", [
        ("bounds_all_finite", fc.all_finite()),
        ("max_quotient", max(quot)),
        ("median_quotient", float(np.median(quot))),
        ("lambda", bundle.cp.lam),
        ("mu", bundle.cp.mu),
    ])


_SUBCOMMANDS = {
    "simulate": _run_simulate,
    "saddle": _run_saddle,
    "nullcontrol": _run_nullcontrol,
    "stackelberg": _run_stackelberg,
    "observability": _run_observability,
    "carleman-check": _run_carleman_check,
}


def run(subcommand: str, cfg: ExperimentConfig, out_dir=None) -> RunRecord:
    """Execute one subcommand; returns the manifest record."""
    if subcommand not in _SUBCOMMANDS:
        raise ValueError(f"unknown subcommand {subcommand!r}; "
                         f"expected one of {sorted(_SUBCOMMANDS)}")
    out = Path(out_dir if out_dir is not None else cfg.out)
    record = RunRecord(config_hash=config_hash(cfg), version=ARTIFACT_VERSION,
                       out_dir=str(out))
    w = _Writer(out)
    t0 = time.perf_counter()
    bundle = materialize(cfg)
    record.timings["materialize"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    body = _SUBCOMMANDS[subcommand](bundle, w)
    record.timings[subcommand] = time.perf_counter() - t0

    header = _report_block("run", [
        ("subcommand", subcommand),
        ("config_hash", record.config_hash),
        ("version", record.version),
        ("seed", cfg.seed),
        ("n_interior", cfg.n_interior),
        ("depth", cfg.depth),
        ("horizon", cfg.T),
    ])
    w.text("report.txt", header + "\n" + body)
    w.manifest(record)
    return record
