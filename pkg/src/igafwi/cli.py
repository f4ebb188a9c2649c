"""Command-line entry point: ``igafwi <command> --config run.cfg [--set key=value ...]``.

The configuration is an INI-style file with the sections ``[domain]``,
``[sources]``, ``[discretization]``, ``[inversion]`` and ``[output]``. Values
are JSON literals (bare words are read as strings). Physical quantities carry
their unit in the key name; internally lengths are millimetres, times
microseconds and frequencies megahertz.

Exit codes: 0 success, 1 configuration error, 2 numerical or I/O failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import io
from .assembly import AssemblyError
from .dynamics import EstimationError, InstabilityError, critical_dt
from .fwi import (ConvergenceConfig, ExperimentConfig, InvalidStateError, Model, convergence_study,
                  invert, synthesize_reference)
from .geometry import BelowSpline, Box, Circle, RotatedEllipse
from .material import InvalidStateError as MaterialStateError
from .material import compute_indicator, select_and_refine

log = logging.getLogger("igafwi")

COMMANDS = ("synthesize", "forward", "invert", "convergence-study", "indicator")

# design decisions that change numbers; recorded in every manifest
DESIGN_FLAGS = dict(
    burst_envelope="sin^2(pi f t / 2) over two periods",
    kernel_weighting="midpoint value per voxel (inversion); consistent voxel integral available",
    adjoint_source="negative trapezoid-weighted residual",
    neighborhood="8-neighbour dilation of marked voxels",
    indicator_y_jump="difference of y neighbours",
    mass_solver="sparse LU in symmetric mode",
    optimizer="projected L-BFGS, Armijo 1e-4, halving, 20 trials",
    refinement_memory="optimizer memory discarded at refinement",
)


class ConfigError(ValueError):
    pass


# -- configuration schema --------------------------------------------------------

@dataclass
class DomainSection:
    extent_mm: list = field(default_factory=lambda: [100.0, 50.0])
    density: float = 2.7
    wave_speed_mm_per_us: float = 6.0
    eps_fict: float = 1e-5
    geometry: list = field(default_factory=list)
    defects: list = field(default_factory=list)


@dataclass
class SourcesSection:
    positions_mm: list | None = None
    line_count: int = 6
    line_spacing_mm: float = 12.8
    line_center_mm: list | None = None  # default: centre of the top edge
    receivers_mm: list | None = None  # default: the source positions
    sigma_mm: list = field(default_factory=lambda: [1.0, 1.0])
    frequency_khz: float = 500.0
    envelope_power: int = 2


@dataclass
class DiscretizationSection:
    h_mm: float = 2.5
    degree: int = 3
    depth: int = 4
    quad_order: int | None = None
    t_max_us: float = 45.0
    n_steps: int = 1200
    auto_dt: bool = False
    lumped: bool = False
    history_stride: int = 1
    synth_h_factor: int = 2
    synth_degree_increase: int = 1
    synth_n_steps: int | None = None
    study_h_mm: list = field(default_factory=lambda: [0.5, 0.25, 0.125, 0.0625])
    study_degrees: list = field(default_factory=lambda: [2, 3])
    study_masses: list = field(default_factory=lambda: ["consistent", "lumped"])
    study_reference_h_mm: float | None = None
    study_reference_degree: int | None = None
    study_window_mm: list | None = None
    study_eval_points: list = field(default_factory=lambda: [61, 101])
    study_min_leaf_mm: float = 1 / 4096


@dataclass
class InversionSection:
    n_v: int = 1
    n_sub: int = 4
    n_layers: int = 1
    tau_fraction: float = 0.5
    stage1_iters: int = 3
    stage2_iters: int = 10
    strategy: str = "restart"
    refine: bool = True
    gamma_min: float = 1e-5
    gamma_max: float = 1.0
    window_mm: list | None = None
    gradient_rule: str = "midpoint"
    reference_dir: str = "out/reference"
    gamma_file: str | None = None
    seed: int = 0


@dataclass
class OutputSection:
    directory: str = "out"
    threads: int = 1
    log_level: str = "warning"


SECTIONS = dict(domain=DomainSection, sources=SourcesSection, discretization=DiscretizationSection,
                inversion=InversionSection, output=OutputSection)


@dataclass
class RunConfig:
    domain: DomainSection = field(default_factory=DomainSection)
    sources: SourcesSection = field(default_factory=SourcesSection)
    discretization: DiscretizationSection = field(default_factory=DiscretizationSection)
    inversion: InversionSection = field(default_factory=InversionSection)
    output: OutputSection = field(default_factory=OutputSection)
    base_dir: Path = field(default=Path("."), compare=False)

    def resolve(self, relative: str) -> Path:
        p = Path(relative)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.output.directory)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


def _key_index() -> dict[str, str]:
    index = {}
    for sec, cls in SECTIONS.items():
        for f in fields(cls):
            index[f.name] = sec
    return index


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def format_value(value) -> str:
    return json.dumps(value)


def _check_type(section: str, key: str, value, default):
    where = f"[{section}] {key}"
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
    return value


def _set(cfg: RunConfig, section: str, key: str, raw: str):
    sec_obj = getattr(cfg, section)
    known = {f.name: f for f in fields(sec_obj)}
    if key not in known:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    value = parse_value(raw)
    f = known[key]
    default = f.default if f.default is not MISSING else f.default_factory()
    # Optional fields keep None as their default; check against the annotated kind instead
    if default is None and value is not None:
        default = _optional_template(f.type)
    setattr(sec_obj, key, _check_type(section, key, value, default))


def _optional_template(annotation: str):
    kind = str(annotation).split("|")[0].strip()
    return {"int": 0, "float": 0.0, "str": "", "list": [], "bool": False}.get(kind)


def apply_override(cfg: RunConfig, assignment: str):
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    key = key.strip()
    if "." in key:
        section, key = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}] in override")
    else:
        section = _key_index().get(key)
        if section is None:
            raise ConfigError(f"unknown key {key!r} in override")
    _set(cfg, section, key, raw)


def parse_config_text(text: str, base_dir: Path = Path(".")) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=None, strict=True)
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from exc
    cfg = RunConfig(base_dir=base_dir)
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            _set(cfg, section, key, raw)
    return cfg


def load_config(path, overrides=()) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    cfg = parse_config_text(p.read_text(), base_dir=p.resolve().parent)
    for item in overrides:
        apply_override(cfg, item)
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in asdict(getattr(cfg, name)).items():
            lines.append(f"{key} = {format_value(value)}")
        lines.append("")
    return "\n".join(lines)


# -- config -> domain objects ---------------------------------------------------

_SHAPE_KEYS = {
    "circle": {"center_mm", "radius_mm"},
    "ellipse": {"center_mm", "a_mm", "b_mm", "angle_deg"},
    "box": {"lo_mm", "hi_mm"},
    "below_spline": {"points_mm"},
}


def build_shape(record: dict):
    if not isinstance(record, dict) or "shape" not in record:
        raise ConfigError(f"shape record needs a 'shape' field: {record!r}")
    kind = record["shape"]
    if kind not in _SHAPE_KEYS:
        raise ConfigError(f"unknown shape {kind!r}")
    params = {k: v for k, v in record.items() if k not in ("shape", "role")}
    extra = set(params) - _SHAPE_KEYS[kind]
    missing = _SHAPE_KEYS[kind] - set(params) - ({"angle_deg"} if kind == "ellipse" else set())
    if extra or missing:
        raise ConfigError(f"{kind} record: unknown {sorted(extra)}, missing {sorted(missing)}")
    if kind == "circle":
        return Circle(tuple(params["center_mm"]), float(params["radius_mm"]))
    if kind == "ellipse":
        return RotatedEllipse(tuple(params["center_mm"]), float(params["a_mm"]), float(params["b_mm"]),
                              float(params.get("angle_deg", 0.0)))
    if kind == "box":
        return Box(tuple(params["lo_mm"]), tuple(params["hi_mm"]))
    return BelowSpline(tuple(tuple(p) for p in params["points_mm"]))


def _geometry(records) -> list:
    out = []
    for rec in records:
        role = rec.get("role", "fictitious") if isinstance(rec, dict) else None
        if role not in ("fictitious", "physical"):
            raise ConfigError(f"shape role must be 'fictitious' or 'physical', got {role!r}")
        out.append((build_shape(rec), role))
    return out


def _spans(extent: float, h: float, axis: str) -> int:
    n = extent / h
    if h <= 0 or abs(n - round(n)) > 1e-9 * max(1.0, n):
        raise ConfigError(f"h_mm={h} does not divide the {axis} extent {extent}")
    return int(round(n))


def source_positions(cfg: RunConfig) -> list[tuple[float, float]]:
    s, d = cfg.sources, cfg.domain
    if s.positions_mm is not None:
        return [tuple(map(float, p)) for p in s.positions_mm]
    cx, cy = s.line_center_mm or (d.extent_mm[0] / 2, d.extent_mm[1])
    x0 = cx - s.line_spacing_mm * (s.line_count - 1) / 2
    return [(x0 + k * s.line_spacing_mm, float(cy)) for k in range(s.line_count)]


def experiment_config(cfg: RunConfig) -> ExperimentConfig:
    d, s, z, inv = cfg.domain, cfg.sources, cfg.discretization, cfg.inversion
    extents = tuple(float(v) for v in d.extent_mm)
    spans = (_spans(extents[0], z.h_mm, "x"), _spans(extents[1], z.h_mm, "y"))
    try:
        return ExperimentConfig(
            extents=extents, spans=spans, degree=z.degree, rho=d.density, c=d.wave_speed_mm_per_us,
            eps_fict=d.eps_fict, geometry=_geometry(d.geometry),
            defects=[build_shape(r) for r in d.defects], sources=source_positions(cfg),
            receivers=None if s.receivers_mm is None else [tuple(r) for r in s.receivers_mm],
            sigma=tuple(s.sigma_mm), frequency=s.frequency_khz / 1000.0, envelope_power=s.envelope_power,
            t_max=z.t_max_us, n_steps=z.n_steps, auto_dt=z.auto_dt, lumped=z.lumped, depth=z.depth,
            quad_order=z.quad_order, n_v=inv.n_v, n_sub=inv.n_sub, n_layers=inv.n_layers,
            tau_fraction=inv.tau_fraction, stage1_iters=inv.stage1_iters, stage2_iters=inv.stage2_iters,
            strategy=inv.strategy, refine=inv.refine, gamma_min=inv.gamma_min, gamma_max=inv.gamma_max,
            window=None if inv.window_mm is None else tuple(inv.window_mm),
            gradient_rule=inv.gradient_rule, history_stride=z.history_stride,
            synth_h_factor=z.synth_h_factor, synth_degree_increase=z.synth_degree_increase,
            synth_n_steps=z.synth_n_steps, seed=inv.seed)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def study_config(cfg: RunConfig) -> ConvergenceConfig:
    d, s, z = cfg.domain, cfg.sources, cfg.discretization
    holes = [r for r in d.geometry if isinstance(r, dict) and r.get("shape") == "circle"]
    if len(holes) != 1:
        raise ConfigError("the convergence study needs exactly one circle in [domain] geometry")
    hole = build_shape(holes[0])
    src = source_positions(cfg)
    extents = tuple(float(v) for v in d.extent_mm)
    window = tuple(z.study_window_mm) if z.study_window_mm else (0.7 * extents[0], 0.0, extents[0], extents[1])
    return ConvergenceConfig(
        extents=extents, hole_center=hole.center, hole_radius=hole.radius, eps_fict=d.eps_fict,
        source=src[0], sigma=tuple(s.sigma_mm), frequency=s.frequency_khz / 1000.0, rho=d.density,
        c=d.wave_speed_mm_per_us, t_max=z.t_max_us, n_steps=z.n_steps, hs=tuple(z.study_h_mm),
        degrees=tuple(z.study_degrees), masses=tuple(z.study_masses), window=window,
        n_eval=tuple(z.study_eval_points), min_leaf=z.study_min_leaf_mm,
        reference_h=z.study_reference_h_mm, reference_degree=z.study_reference_degree,
        envelope_power=s.envelope_power)


# -- commands ----------------------------------------------------------------------

def _manifest(cfg: RunConfig, command: str, extra: dict | None = None):
    flags = dict(DESIGN_FLAGS, kernel_weighting=cfg.inversion.gradient_rule,
                 strategy=cfg.inversion.strategy)
    io.write_manifest(cfg.output_dir / f"manifest_{command}.json", cfg.to_dict(), flags,
                      dict(command=command, **(extra or {})))


def _trace_files(directory: Path) -> list[Path]:
    return sorted(directory.glob("source_*.csv"), key=lambda p: int(p.stem.split("_")[1]))


def cmd_synthesize(cfg: RunConfig) -> int:
    ecfg = experiment_config(cfg)
    traces = synthesize_reference(ecfg)
    out = cfg.resolve(cfg.inversion.reference_dir)
    for k, tr in enumerate(traces):
        io.write_traces_csv(out / f"source_{k}.csv", tr)
    _manifest(cfg, "synthesize", dict(n_sources=len(traces)))
    print(f"wrote {len(traces)} trace files to {out}")
    return 0


def cmd_forward(cfg: RunConfig) -> int:
    ecfg = experiment_config(cfg)
    ecfg = replace(ecfg, geometry=list(ecfg.geometry) + [(d, "fictitious") for d in ecfg.defects],
                   defects=[])
    model = Model(ecfg)
    grid = model.initial_grid()
    if cfg.inversion.gamma_file:
        grid = io.read_gamma_grid(cfg.resolve(cfg.inversion.gamma_file), ecfg.gamma_min, ecfg.gamma_max)
    system, _, traces = model.forward(grid, store=False)
    dtc = critical_dt(system, ecfg.lumped)
    out = cfg.output_dir / "forward"
    for k, tr in enumerate(traces):
        io.write_traces_csv(out / f"source_{k}.csv", tr)
    _manifest(cfg, "forward", dict(dt=model.time.dt, dt_crit=dtc, n_dof=system.n_dof))
    stable = "stable" if model.time.dt < dtc else "UNSTABLE"
    print(f"dt={model.time.dt:.6g} us, dt_c={dtc:.6g} us ({stable}), n_dof={system.n_dof}, "
          f"sources={len(traces)}")
    return 0


def cmd_invert(cfg: RunConfig) -> int:
    ecfg = experiment_config(cfg)
    ref_dir = cfg.resolve(cfg.inversion.reference_dir)
    files = _trace_files(ref_dir) if ref_dir.is_dir() else []
    if len(files) != len(ecfg.sources):
        raise ConfigError(f"expected {len(ecfg.sources)} reference trace files in {ref_dir}, "
                          f"found {len(files)}")
    reference = [io.read_traces_csv(f, ecfg.receiver_positions) for f in files]
    report = invert(ecfg, reference)
    out = cfg.output_dir / "inversion"
    io.write_gamma_grid(out / "gamma.txt", report.grid)
    io.write_voxel_csv(out / "gamma.csv", report.grid)
    io.write_gamma_pgm(out / "gamma.pgm", report.grid)
    rows = [dict(r, stage=k + 1) for k, st in enumerate(report.stages) for r in st.journal]
    io.write_rows_csv(out / "journal.csv", rows, ["stage"] + io.JOURNAL_COLUMNS)
    if report.indicator is not None:
        np.savetxt(out / "indicator.txt", report.indicator)
        np.savetxt(out / "marked.txt", report.marked.astype(int), fmt="%d")
    _manifest(cfg, "invert", dict(flags=report.flags, timings=report.timings))
    chi = report.chi
    print(f"chi {chi[0][0]:.4e} -> {chi[-1][-1]:.4e} over {len(chi)} stage(s); "
          f"refined={report.flags['refined']}")
    return 0


def cmd_convergence_study(cfg: RunConfig) -> int:
    cc = study_config(cfg)
    t0 = time.perf_counter()
    rows, slopes = convergence_study(
        cc, progress=lambda r, dt: log.info("p=%d %s h=%g eps=%.3e (%.1fs)", r["p"], r["mass"], r["h"],
                                            r["eps"], dt))
    out = cfg.output_dir
    io.write_convergence_csv(out / "convergence.csv", rows)
    io.write_rows_csv(out / "convergence_slopes.csv",
                      [dict(p=p, mass=m, slope=s) for (p, m), s in slopes.items()], ["p", "mass", "slope"])
    _manifest(cfg, "convergence-study", dict(seconds=time.perf_counter() - t0))
    for (p, m), s in slopes.items():
        print(f"p={p} {m}: slope {s:.3f}")
    return 0


def cmd_indicator(cfg: RunConfig) -> int:
    inv = cfg.inversion
    if not inv.gamma_file:
        raise ConfigError("the indicator command needs [inversion] gamma_file")
    path = cfg.resolve(inv.gamma_file)
    if not path.is_file():
        raise ConfigError(f"gamma file not found: {path}")
    grid = io.read_gamma_grid(path, inv.gamma_min, inv.gamma_max)
    eta = compute_indicator(grid)
    res = select_and_refine(grid, eta, inv.tau_fraction, inv.n_layers, inv.n_sub, inv.strategy)
    out = cfg.output_dir / "indicator"
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "indicator.txt", eta)
    np.savetxt(out / "marked.txt", res.marked.astype(int), fmt="%d")
    io.write_gamma_grid(out / "refined_gamma.txt", res.grid)
    io.write_gamma_pgm(out / "refined_gamma.pgm", res.grid)
    _manifest(cfg, "indicator", dict(threshold=res.threshold, n_marked=int(res.marked.sum())))
    print(f"threshold {res.threshold:.4g}, {int(res.marked.sum())} of {eta.size} voxels marked")
    return 0


HANDLERS = {"synthesize": cmd_synthesize, "forward": cmd_forward, "invert": cmd_invert,
            "convergence-study": cmd_convergence_study, "indicator": cmd_indicator}


def write_gamma_png_like(grid, path):
    """Graymap of gamma at the finest resolution plus its ``.csv`` twin."""
    p = io.write_gamma_pgm(path, grid)
    io.write_voxel_csv(Path(p).with_suffix(".csv"), grid)
    return p


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="igafwi", description="Embedded-domain isogeometric full waveform inversion")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="run configuration file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration value (repeatable)")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, args.set)
        logging.basicConfig(level=getattr(logging, cfg.output.log_level.upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (InstabilityError, AssemblyError, EstimationError, InvalidStateError, MaterialStateError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
