"""Experiment configuration: a line-oriented text format and its validation.

The format is deliberately schema-free and diffable: ``[section]`` headers,
``key = value`` pairs, ``#`` comments.  Values are scalars, words, or
whitespace-separated lists; file references are plain paths.  Example::

    [model]
    n_interior = 24
    depth = 7
    T = 1.0
    k = 0.5
    eta = 0.05
    a = 0.0            # constant, or a = file:coeffs_a.csv
    b = 0.25

    [game]
    beta = 1e3
    delta1 = 1e3
    delta2 = 1e3

    [regions]
    O = 0.2 0.5
    D = 0.6 0.8
    Od0 = 0.3 0.7
    Od1 = 0.55 0.75
    Od2 = 0.6 0.9
    B = 0.35 0.45

    [carleman]
    lambda = auto      # 2 (T + T^2)
    mu = 2.0

    [initial]
    kind = random      # zero | bump | random | file:<path>
    scale = 1.0

    [targets]
    kind = zero        # zero | constant | random | file:<path prefix>
    value = 0.0
    scale = 1.0
    active_fraction = 1.0   # leading fraction of time levels where targets act

    [leader]
    eps_schedule = 1e-2 1e-3 1e-4 1e-5 1e-6
    cg_tol = 1e-6
    cg_max_iter = 400

    [solver]
    saddle_tol = 1e-11
    saddle_max_iter = 120

    [study]
    observability_samples = 100
    quotient_samples = 20

    [run]
    seed = 20240601
    out = out

Parsing reports syntax errors with their line number; validation collects
*all* violations before failing.  Serialization is canonical (sorted keys,
shortest round-trip floats), so parse -> serialize -> parse is the identity
on validated configs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

from .mesh import ViolatedGeometry


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class ValidationError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid config:\n  " + "\n  ".join(self.violations))


DEFAULT_REGIONS = {"O": (0.2, 0.5), "D": (0.6, 0.8), "Od0": (0.3, 0.7),
                   "Od1": (0.55, 0.75), "Od2": (0.6, 0.9), "B": (0.35, 0.45)}


@dataclass(frozen=True)
class ExperimentConfig:
    n_interior: int = 24
    depth: int = 7
    T: float = 1.0
    k: float = 0.5
    eta: float = 0.05
    a: float | str = 0.0          # constant or "file:<path>"
    b: float | str = 0.25
    beta: float = 1e3
    delta1: float = 1e3
    delta2: float = 1e3
    regions: tuple = tuple(sorted(DEFAULT_REGIONS.items()))
    lam: float | str = "auto"
    mu: float = 2.0
    y0_kind: str = "random"
    y0_scale: float = 1.0
    targets_kind: str = "zero"
    targets_value: float = 0.0
    targets_scale: float = 1.0
    targets_active_fraction: float = 1.0
    eps_schedule: tuple = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
    cg_tol: float = 1e-6
    cg_max_iter: int = 400
    saddle_tol: float = 1e-11
    saddle_max_iter: int = 120
    observability_samples: int = 100
    quotient_samples: int = 20
    seed: int = 20240601
    out: str = "out"

    def region_dict(self) -> dict:
        return {name: tuple(iv) for name, iv in self.regions}

    def resolved_lambda(self) -> float:
        if self.lam == "auto":
            return max(1.0, 2.0 * (self.T + self.T**2))
        return float(self.lam)


# (section, key) -> (field name, type tag)
_SCHEMA = {
    ("model", "n_interior"): ("n_interior", "int"),
    ("model", "depth"): ("depth", "int"),
    ("model", "t"): ("T", "float"),
    ("model", "k"): ("k", "float"),
    ("model", "eta"): ("eta", "float"),
    ("model", "a"): ("a", "coeff"),
    ("model", "b"): ("b", "coeff"),
    ("game", "beta"): ("beta", "float"),
    ("game", "delta1"): ("delta1", "float"),
    ("game", "delta2"): ("delta2", "float"),
    ("carleman", "lambda"): ("lam", "auto_float"),
    ("carleman", "mu"): ("mu", "float"),
    ("initial", "kind"): ("y0_kind", "word"),
    ("initial", "scale"): ("y0_scale", "float"),
    ("targets", "kind"): ("targets_kind", "word"),
    ("targets", "value"): ("targets_value", "float"),
    ("targets", "scale"): ("targets_scale", "float"),
    ("targets", "active_fraction"): ("targets_active_fraction", "float"),
    ("leader", "eps_schedule"): ("eps_schedule", "float_list"),
    ("leader", "cg_tol"): ("cg_tol", "float"),
    ("leader", "cg_max_iter"): ("cg_max_iter", "int"),
    ("solver", "saddle_tol"): ("saddle_tol", "float"),
    ("solver", "saddle_max_iter"): ("saddle_max_iter", "int"),
    ("study", "observability_samples"): ("observability_samples", "int"),
    ("study", "quotient_samples"): ("quotient_samples", "int"),
    ("run", "seed"): ("seed", "int"),
    ("run", "out"): ("out", "word"),
}

_REGION_NAMES = ("O", "D", "Od0", "Od1", "Od2", "B")


def _convert(raw: str, kind: str, line: int):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "auto_float":
            return "auto" if raw == "auto" else float(raw)
        if kind == "coeff":
            return raw if raw.startswith("file:") else float(raw)
        if kind == "float_list":
            return tuple(float(tok) for tok in raw.split())
        return raw
    except ValueError as exc:
        raise ParseError(line, f"cannot parse {raw!r} as {kind}") from exc


def parse_config_text(text: str) -> ExperimentConfig:
    values = {}
    regions = dict(DEFAULT_REGIONS)
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError(lineno, "unterminated section header")
            section = line[1:-1].strip().lower()
            continue
        if "=" not in line:
            raise ParseError(lineno, "expected 'key = value'")
        key, _, raw_val = line.partition("=")
        key, raw_val = key.strip(), raw_val.strip()
        if section is None:
            raise ParseError(lineno, "key outside any [section]")
        if section == "regions":
            name = {n.lower(): n for n in _REGION_NAMES}.get(key.lower())
            if name is None:
                raise ParseError(lineno, f"unknown region {key!r}")
            toks = raw_val.split()
            if len(toks) != 2:
                raise ParseError(lineno, "a region is 'left right'")
            regions[name] = (_convert(toks[0], "float", lineno),
                             _convert(toks[1], "float", lineno))
            continue
        entry = _SCHEMA.get((section, key.lower()))
        if entry is None:
            raise ParseError(lineno, f"unknown key {key!r} in [{section}]")
        field_name, kind = entry
        values[field_name] = _convert(raw_val, kind, lineno)
    values["regions"] = tuple(sorted(regions.items()))
    cfg = ExperimentConfig(**values)
    violations = validate_config(cfg)
    if violations:
        raise ValidationError(violations)
    return cfg


def parse_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def validate_config(cfg: ExperimentConfig) -> list[str]:
    """All violations, not just the first."""
    bad: list[str] = []
    if cfg.n_interior < 8:
        bad.append(f"model.n_interior: must be >= 8, got {cfg.n_interior}")
    if not 1 <= cfg.depth <= 20:
        bad.append(f"model.depth: must be in [1, 20], got {cfg.depth}")
    if not cfg.T > 0:
        bad.append(f"model.T: must be positive, got {cfg.T}")
    for name in ("k", "eta"):
        if not getattr(cfg, name) > 0:
            bad.append(f"model.{name}: must be positive")
    for name in ("beta", "delta1", "delta2"):
        if not getattr(cfg, name) > 0:
            bad.append(f"game.{name}: must be positive, got {getattr(cfg, name)}")
    if cfg.lam != "auto" and not float(cfg.lam) >= 1.0:
        bad.append(f"carleman.lambda: must be >= 1 or 'auto', got {cfg.lam}")
    if not cfg.mu >= 1.0:
        bad.append(f"carleman.mu: must be >= 1, got {cfg.mu}")
    for name in ("cg_tol", "saddle_tol"):
        val = getattr(cfg, name)
        if not 0.0 < val < 1.0:
            bad.append(f"{name}: tolerance must be in (0, 1), got {val}")
    sched = cfg.eps_schedule
    if not sched or any(e <= 0 for e in sched) or any(
            x <= y for x, y in zip(sched, sched[1:])):
        bad.append("leader.eps_schedule: must be positive and strictly decreasing")
    if cfg.y0_kind not in ("zero", "bump", "random") and not \
            cfg.y0_kind.startswith("file:"):
        bad.append(f"initial.kind: unknown kind {cfg.y0_kind!r}")
    if cfg.targets_kind not in ("zero", "constant", "random") and not \
            cfg.targets_kind.startswith("file:"):
        bad.append(f"targets.kind: unknown kind {cfg.targets_kind!r}")
    if not 0.0 <= cfg.targets_active_fraction <= 1.0:
        bad.append("targets.active_fraction: must be in [0, 1]")
    try:
        from .mesh import build_grid, region_mask
        region_mask(build_grid(max(cfg.n_interior, 8)), cfg.region_dict())
    except ViolatedGeometry as exc:
        bad.append(f"regions: {exc.clause} ({exc})")
    return bad


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)  # shortest representation that round-trips
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form (round-trips through parse_config_text)."""
    regions = cfg.region_dict()
    lines = []
    sections: dict[str, list[tuple[str, str]]] = {}
    for (section, key), (field_name, kind) in _SCHEMA.items():
        value = getattr(cfg, field_name)
        if kind == "float_list":
            text = " ".join(_fmt(v) for v in value)
        else:
            text = _fmt(value)
        sections.setdefault(section, []).append((key, text))
    for section in sorted(sections):
        lines.append(f"[{section}]")
        for key, text in sorted(sections[section]):
            lines.append(f"{key} = {text}")
        lines.append("")
    lines.append("[regions]")
    for name in _REGION_NAMES:
        left, right = regions[name]
        lines.append(f"{name} = {_fmt(left)} {_fmt(right)}")
    lines.append("")
    return "\n".join(lines)


def config_hash(cfg: ExperimentConfig) -> str:
    """Digest of the experiment-defining fields; the output location is
    excluded so runs of one experiment into different directories compare
    equal."""
    canonical = serialize_config(replace(cfg, out=""))
    return hashlib.sha256(canonical.encode()).hexdigest()


def with_overrides(cfg: ExperimentConfig, **kwargs) -> ExperimentConfig:
    """Apply CLI flag overrides (None values are ignored)."""
    updates = {k: v for k, v in kwargs.items() if v is not None}
    if "final_eps" in updates:
        eps = updates.pop("final_eps")
        sched = tuple(e for e in cfg.eps_schedule if e > eps) + (eps,)
        updates["eps_schedule"] = sched
    return replace(cfg, **updates)
