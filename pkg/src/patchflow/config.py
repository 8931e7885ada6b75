"""
Experiment configuration: a YAML document with a fixed schema.

Every problem found is collected before anything is computed; unknown keys
are errors. See ``README.md`` for the full key list. A minimal document::

    scenario: single
    grid: {nx: 64, ny: 64}
    density:
      background: 0.0
      shapes:
        - {disk: {center: [0.5, 0.5], radius: 0.25}, level: 1.0}
    velocity: {kind: stokes_eigenmode, amplitude: 1.0}
"""

import math
from dataclasses import asdict, dataclass

import yaml

from .errors import ConfigError
from .transport import Disk, PatchSpec, Rect

SCENARIOS = ("single", "pair", "intermediate_triple", "sweep")
VELOCITY_KINDS = ("stokes_eigenmode", "stream_function", "zero")


@dataclass(frozen=True)
class GridConfig:
    nx: int = 128
    ny: int = 128
    lx: float = 1.0
    ly: float = 1.0


@dataclass(frozen=True)
class FluidConfig:
    mu: float = 0.05
    rho_star: float = 1.0


@dataclass(frozen=True)
class VelocityConfig:
    kind: str = "stokes_eigenmode"
    amplitude: float = 1.0
    k: int = 1
    m: int = 1


@dataclass(frozen=True)
class PerturbationConfig:
    """What is added to the base data to form the perturbed member."""

    shapes: tuple = ()
    velocity: VelocityConfig = None
    target: str = "first"


@dataclass(frozen=True)
class SchemeConfig:
    eps_vac: float = 1e-3
    cfl: float = 0.9
    momentum_tol: float = 1e-10
    projection_tol: float = 1e-10
    max_substeps: int = 64
    incremental_pressure: bool = False


@dataclass(frozen=True)
class TimeConfig:
    t_end: object = "auto"  # "auto": exp(-beta1 T) = 1e-3
    t_end_factor: float = 1.0
    sample_every: int = 1
    cadence: int = 10
    snapshot_times: tuple = ()


@dataclass(frozen=True)
class SweepConfig:
    kind: str = "density"
    amplitudes: tuple = ()


@dataclass(frozen=True)
class AnalysisConfig:
    beta: object = "auto"  # "auto": fitted energy rate of the first member / 4
    p_values: tuple = (1.5, 4.0)
    eps_check: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "single"
    grid: GridConfig = GridConfig()
    fluid: FluidConfig = FluidConfig()
    density: PatchSpec = PatchSpec(background=1.0)
    velocity: VelocityConfig = VelocityConfig()
    perturbation: PerturbationConfig = PerturbationConfig()
    scheme: SchemeConfig = SchemeConfig()
    time: TimeConfig = TimeConfig()
    sweep: SweepConfig = SweepConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    output: str = ""
    seed: int = 0
    threads: int = 1


_SECTIONS = {
    "grid": GridConfig,
    "fluid": FluidConfig,
    "velocity": VelocityConfig,
    "scheme": SchemeConfig,
    "time": TimeConfig,
    "sweep": SweepConfig,
    "analysis": AnalysisConfig,
}
_TOP = {"scenario", "grid", "fluid", "density", "velocity", "perturbation", "scheme", "time",
        "sweep", "analysis", "output", "seed", "threads"}


def _keys(cls):
    return set(cls.__dataclass_fields__)


def _number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _integer(value):
    return isinstance(value, int) and not isinstance(value, bool)


class _Collector:
    def __init__(self):
        self.problems = []

    def add(self, msg):
        self.problems.append(msg)

    def mapping(self, raw, where):
        if raw is None:
            return {}
        if not isinstance(raw, dict):
            self.add(f"{where}: expected a mapping")
            return {}
        return raw

    def known(self, raw, allowed, where):
        for key in raw:
            if key not in allowed:
                self.add(f"{where}: unknown key {key!r}")
        return {k: v for k, v in raw.items() if k in allowed}


def _parse_shape(raw, c, where, signed=False):
    raw = c.mapping(raw, where)
    raw = c.known(raw, {"disk", "rect", "level"}, where)
    level = raw.get("level", 1.0)
    if not _number(level):
        c.add(f"{where}.level: expected a number")
        level = 1.0
    elif not signed and level < 0:
        c.add(f"{where}.level: must be >= 0")
    if ("disk" in raw) == ("rect" in raw):
        c.add(f"{where}: give exactly one of 'disk' or 'rect'")
        return None
    if "disk" in raw:
        d = c.known(c.mapping(raw["disk"], f"{where}.disk"), {"center", "radius"}, f"{where}.disk")
        center, radius = d.get("center"), d.get("radius")
        ok = True
        if not (isinstance(center, (list, tuple)) and len(center) == 2 and all(map(_number, center))):
            c.add(f"{where}.disk.center: expected [x, y]")
            ok = False
        if not (_number(radius) and radius > 0):
            c.add(f"{where}.disk.radius: expected a positive number")
            ok = False
        return Disk(tuple(float(x) for x in center), float(radius), float(level)) if ok else None
    r = c.known(c.mapping(raw["rect"], f"{where}.rect"), {"lower", "upper"}, f"{where}.rect")
    lo, hi = r.get("lower"), r.get("upper")
    for name, pt in (("lower", lo), ("upper", hi)):
        if not (isinstance(pt, (list, tuple)) and len(pt) == 2 and all(map(_number, pt))):
            c.add(f"{where}.rect.{name}: expected [x, y]")
            return None
    return Rect(tuple(map(float, lo)), tuple(map(float, hi)), float(level))


def _parse_shapes(raw, c, where, signed=False):
    if raw is None:
        return ()
    if not isinstance(raw, list):
        c.add(f"{where}: expected a list of shapes")
        return ()
    shapes = [_parse_shape(s, c, f"{where}[{k}]", signed) for k, s in enumerate(raw)]
    return tuple(s for s in shapes if s is not None)


def _parse_section(cls, raw, c, where):
    raw = c.known(c.mapping(raw, where), _keys(cls), where)
    defaults = cls()
    out = {}
    for key, value in raw.items():
        default = getattr(defaults, key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                c.add(f"{where}.{key}: expected true or false")
                continue
        elif isinstance(default, int) and not isinstance(default, bool):
            if not _integer(value):
                c.add(f"{where}.{key}: expected an integer")
                continue
        elif isinstance(default, float):
            if not _number(value):
                c.add(f"{where}.{key}: expected a number")
                continue
            value = float(value)
        elif isinstance(default, tuple):
            if not isinstance(value, list) or not all(map(_number, value)):
                c.add(f"{where}.{key}: expected a list of numbers")
                continue
            value = tuple(float(x) for x in value)
        out[key] = value
    return cls(**{**asdict(defaults), **out})


def _parse_velocity(raw, c, where):
    if raw is None:
        return None
    return _parse_section(VelocityConfig, raw, c, where)


def parse_config(doc):
    """Build an ``ExperimentConfig`` from a parsed YAML mapping, or raise ``ConfigError``."""
    c = _Collector()
    doc = c.known(c.mapping(doc, "config"), _TOP, "config")
    kw = {}
    scenario = doc.get("scenario", "single")
    if scenario not in SCENARIOS:
        c.add(f"scenario: expected one of {', '.join(SCENARIOS)}, got {scenario!r}")
    kw["scenario"] = scenario
    for name, cls in _SECTIONS.items():
        if name == "velocity":
            continue
        kw[name] = _parse_section(cls, doc.get(name), c, name)
    kw["velocity"] = _parse_velocity(doc.get("velocity", {}), c, "velocity")
    if kw["velocity"] is None:
        c.add("velocity: required (use kind: zero for a fluid at rest)")
        kw["velocity"] = VelocityConfig(kind="zero")

    dens = c.known(c.mapping(doc.get("density", {}), "density"),
                   {"background", "shapes"}, "density")
    background = dens.get("background", 1.0 if "shapes" not in dens else 0.0)
    if not _number(background):
        c.add("density.background: expected a number")
        background = 0.0
    fluid = kw["fluid"]
    kw["density"] = PatchSpec(_parse_shapes(dens.get("shapes"), c, "density.shapes"),
                              float(background), fluid.rho_star)

    pert = c.known(c.mapping(doc.get("perturbation", {}), "perturbation"),
                   {"shapes", "velocity", "target"}, "perturbation")
    target = pert.get("target", "first")
    if target not in ("first", "second"):
        c.add("perturbation.target: expected 'first' or 'second'")
    kw["perturbation"] = PerturbationConfig(
        _parse_shapes(pert.get("shapes"), c, "perturbation.shapes", signed=True),
        _parse_velocity(pert.get("velocity"), c, "perturbation.velocity"),
        target,
    )
    for key, check, msg in (("output", lambda v: isinstance(v, str), "expected a path string"),
                            ("seed", lambda v: _integer(v) and 0 <= v < 2**64, "expected a u64"),
                            ("threads", lambda v: _integer(v) and v >= 1, "expected a positive integer")):
        if key in doc:
            if check(doc[key]):
                kw[key] = doc[key]
            else:
                c.add(f"{key}: {msg}")

    cfg = ExperimentConfig(**kw)
    _validate(cfg, c)
    if c.problems:
        raise ConfigError(c.problems)
    return cfg


def _validate(cfg, c):
    g, fl, sc, tm = cfg.grid, cfg.fluid, cfg.scheme, cfg.time
    if g.nx < 8 or g.ny < 8:
        c.add("grid: need at least 8 cells per direction")
    if not (g.lx > 0 and g.ly > 0):
        c.add("grid: side lengths must be positive")
    if not fl.mu > 0:
        c.add("fluid.mu: must be positive")
    if not fl.rho_star > 0:
        c.add("fluid.rho_star: must be positive")
    dens = cfg.density
    if not 0 <= dens.background <= fl.rho_star:
        c.add("density.background: outside [0, rho_star]")
    for k, s in enumerate(dens.shapes):
        if not 0 <= s.level <= fl.rho_star:
            c.add(f"density.shapes[{k}].level: outside [0, rho_star]")
        if g.lx > 0 and g.ly > 0 and not s.inside_box(g.lx, g.ly):
            c.add(f"density.shapes[{k}]: does not lie inside the domain")
    if dens.background == 0 and not any(s.level > 0 for s in dens.shapes):
        c.add("density: identically zero")
    for k, s in enumerate(cfg.perturbation.shapes):
        if g.lx > 0 and g.ly > 0 and not s.inside_box(g.lx, g.ly):
            c.add(f"perturbation.shapes[{k}]: does not lie inside the domain")
    for where, vc in (("velocity", cfg.velocity), ("perturbation.velocity", cfg.perturbation.velocity)):
        if vc is None:
            continue
        if vc.kind not in VELOCITY_KINDS:
            c.add(f"{where}.kind: expected one of {', '.join(VELOCITY_KINDS)}")
        if vc.k < 1 or vc.m < 1:
            c.add(f"{where}: mode numbers must be >= 1")
    if not 0 < sc.eps_vac <= 0.1:
        c.add("scheme.eps_vac: must lie in (0, 0.1]")
    if not 0 < sc.cfl <= 0.9:
        c.add("scheme.cfl: must lie in (0, 0.9]")
    for name in ("momentum_tol", "projection_tol"):
        if not 0 < getattr(sc, name) <= 1e-4:
            c.add(f"scheme.{name}: must lie in (0, 1e-4]")
    if sc.max_substeps < 1:
        c.add("scheme.max_substeps: must be positive")
    if tm.t_end != "auto" and not (_number(tm.t_end) and tm.t_end >= 0):
        c.add("time.t_end: expected 'auto' or a number >= 0")
    if not tm.t_end_factor > 0:
        c.add("time.t_end_factor: must be positive")
    if tm.sample_every < 1 or tm.cadence < 1:
        c.add("time: sample_every and cadence must be positive")
    if any(t < 0 for t in tm.snapshot_times):
        c.add("time.snapshot_times: must be >= 0")
    if cfg.analysis.beta != "auto" and not (_number(cfg.analysis.beta) and cfg.analysis.beta >= 0):
        c.add("analysis.beta: expected 'auto' or a number >= 0")
    if any(not 1 < p < math.inf for p in cfg.analysis.p_values):
        c.add("analysis.p_values: each p must lie in (1, inf)")
    if cfg.scenario in ("pair", "intermediate_triple", "sweep"):
        if not cfg.perturbation.shapes and cfg.perturbation.velocity is None:
            if cfg.scenario == "sweep":
                c.add("perturbation: a sweep needs a density or velocity perturbation")
    if cfg.scenario == "sweep":
        sw = cfg.sweep
        if sw.kind not in ("density", "velocity"):
            c.add("sweep.kind: expected 'density' or 'velocity'")
        amps = sw.amplitudes
        if len(amps) < 4:
            c.add("sweep.amplitudes: need at least 4 amplitudes")
        if any(a <= 0 for a in amps):
            c.add("sweep.amplitudes: must be positive")
        if list(amps) != sorted(amps) or len(set(amps)) != len(amps):
            c.add("sweep.amplitudes: must be strictly increasing")
        if amps and min(amps) > 0 and max(amps) / min(amps) < 10 * (1 - 1e-12):
            c.add("sweep.amplitudes: must span at least one decade")
        if sw.kind == "density" and not cfg.perturbation.shapes:
            c.add("sweep: a density sweep needs perturbation.shapes")
        if sw.kind == "velocity" and cfg.perturbation.velocity is None:
            c.add("sweep: a velocity sweep needs perturbation.velocity")


def load_config(path):
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError([f"{path}: not valid YAML ({exc})"]) from exc
    return parse_config(doc or {})


def config_to_dict(cfg):
    """Plain nested mapping (for echoing the effective configuration next to the outputs)."""
    def shape(s):
        d = {"level": s.level}
        if isinstance(s, Disk):
            d["disk"] = {"center": list(s.center), "radius": s.radius}
        else:
            d["rect"] = {"lower": list(s.lower), "upper": list(s.upper)}
        return d

    def vel(v):
        return None if v is None else asdict(v)

    out = {
        "scenario": cfg.scenario,
        "grid": asdict(cfg.grid),
        "fluid": asdict(cfg.fluid),
        "density": {"background": cfg.density.background,
                    "shapes": [shape(s) for s in cfg.density.shapes]},
        "velocity": vel(cfg.velocity),
        "perturbation": {"shapes": [shape(s) for s in cfg.perturbation.shapes],
                         "target": cfg.perturbation.target},
        "scheme": asdict(cfg.scheme),
        "time": {**asdict(cfg.time), "snapshot_times": list(cfg.time.snapshot_times)},
        "sweep": {"kind": cfg.sweep.kind, "amplitudes": list(cfg.sweep.amplitudes)},
        "analysis": {**asdict(cfg.analysis), "p_values": list(cfg.analysis.p_values)},
        "output": cfg.output,
        "seed": cfg.seed,
        "threads": cfg.threads,
    }
    if cfg.perturbation.velocity is not None:
        out["perturbation"]["velocity"] = vel(cfg.perturbation.velocity)
    return out


def dump_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
