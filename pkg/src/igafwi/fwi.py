"""Reference synthesis, two-stage inversion and the forward convergence study.

Internal units are millimetres and microseconds (wave speed in mm/us,
frequency in MHz).
"""

from __future__ import annotations

import logging
import math
import time as _time
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from . import adjoint as adj
from .assembly import Assembler, SourceSpec, burst, spatial_source
from .dynamics import TimeGrid, TraceSet, adjoint_run, cdm_run, critical_dt
from .geometry import AlphaField, BelowSpline, Circle, RotatedEllipse, Shape, physical_region
from .material import MaterialGrid, compute_indicator, select_and_refine, window_mask
from .optimize import OptimizerState, minimize
from .splines import TensorBasis

log = logging.getLogger(__name__)


class InvalidStateError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    extents: tuple[float, float]
    spans: tuple[int, int]
    degree: int = 2
    rho: float = 1.0
    c: float = 1.0
    eps_fict: float = 1e-5
    geometry: list = field(default_factory=list)  # (Shape, "fictitious" | "physical")
    defects: list = field(default_factory=list)  # Shapes removed only for synthesis
    sources: list = field(default_factory=list)  # (x, y)
    receivers: list | None = None  # defaults to the source positions (full matrix capture)
    sigma: tuple[float, float] = (1.0, 1.0)
    frequency: float = 0.5
    envelope_power: int = 2
    t_max: float = 10.0
    n_steps: int = 1000
    auto_dt: bool = False
    lumped: bool = False
    depth: int = 3
    quad_order: int | None = None
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
    window: tuple[float, float, float, float] | None = None
    gradient_rule: str = "midpoint"
    history_stride: int = 1
    synth_h_factor: int = 2
    synth_degree_increase: int = 1
    synth_n_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if min(self.extents) <= 0 or min(self.spans) < 1:
            raise ValueError("extents and span counts must be positive")
        if self.strategy not in ("restart", "warm-start"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.gradient_rule not in ("midpoint", "consistent"):
            raise ValueError(f"unknown gradient rule {self.gradient_rule!r}")
        lx, ly = self.extents
        for x, y in self.sources:
            if not (0 <= x <= lx and 0 <= y <= ly):
                raise ValueError(f"source ({x}, {y}) outside the embedding domain")

    @property
    def h(self) -> tuple[float, float]:
        return self.extents[0] / self.spans[0], self.extents[1] / self.spans[1]

    @property
    def receiver_positions(self) -> np.ndarray:
        return np.asarray(self.receivers if self.receivers is not None else self.sources, dtype=float)

    def synthesis_config(self) -> ExperimentConfig:
        """Finer, higher-degree discretization with the true defects removed from alpha."""
        k = self.synth_h_factor
        geo = list(self.geometry) + [(d, "fictitious") for d in self.defects]
        return replace(self, spans=(self.spans[0] * k, self.spans[1] * k),
                       degree=self.degree + self.synth_degree_increase, geometry=geo, defects=[],
                       n_steps=self.synth_n_steps or self.n_steps, n_v=1, auto_dt=True)


class Timer:
    def __init__(self):
        self.totals = defaultdict(float)

    def __call__(self, phase):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = _time.perf_counter()

            def __exit__(self, *exc):
                timer.totals[phase] += _time.perf_counter() - self.t0

        return _Ctx()

    def shares(self) -> dict:
        total = sum(self.totals.values()) or 1.0
        return {k: v / total for k, v in self.totals.items()}


class Model:
    """Discretized experiment: basis, indicator, receivers, sources and time grid."""

    def __init__(self, cfg: ExperimentConfig, timer: Timer | None = None):
        self.cfg = cfg
        self.timer = timer or Timer()
        self.basis = TensorBasis.uniform(cfg.spans, cfg.degree, cfg.extents)
        self.alpha = AlphaField(physical_region(cfg.geometry), cfg.eps_fict)
        self.R = self.basis.evaluation_matrix(cfg.receiver_positions)
        self.forces = [spatial_source(self.basis, SourceSpec(tuple(s), tuple(cfg.sigma), cfg.frequency))
                       for s in cfg.sources]
        self._assemblers: dict = {}
        self.time = TimeGrid(cfg.t_max, cfg.n_steps)
        if cfg.auto_dt:
            grid = self.initial_grid()
            system = self.assemble(grid)
            dtc = critical_dt(system, cfg.lumped)
            self.dt_crit = dtc
            self.time = TimeGrid.auto(cfg.t_max, cfg.n_steps, dtc)
        self.signal = burst(self.time.times, cfg.frequency, cfg.envelope_power)

    def initial_grid(self, n_v: int | None = None) -> MaterialGrid:
        return MaterialGrid.homogeneous(self.cfg.spans, n_v or self.cfg.n_v, self.cfg.extents,
                                        gamma_min=self.cfg.gamma_min, gamma_max=self.cfg.gamma_max)

    def assembler(self, grid: MaterialGrid) -> Assembler:
        key = (grid.nx, grid.ny, grid.n_sub, tuple(sorted(grid.refined)))
        if key not in self._assemblers:
            self._assemblers.clear()
            with self.timer("assembly"):
                self._assemblers[key] = Assembler(self.basis, self.alpha, grid, self.cfg.depth,
                                                  self.cfg.quad_order)
        return self._assemblers[key]

    def assemble(self, grid: MaterialGrid):
        asm = self.assembler(grid)
        with self.timer("assembly"):
            system = asm.assemble(grid, self.cfg.rho, self.cfg.c)
            if not self.cfg.lumped:
                system.factorize()
        return system

    def forward(self, grid: MaterialGrid, store: bool = True):
        system = self.assemble(grid)
        hists, traces = [], []
        with self.timer("forward"):
            for F in self.forces:
                h, tr = cdm_run(system, self.time, self.signal, F, self.R,
                                stride=self.cfg.history_stride if store else None, lumped=self.cfg.lumped)
                tr.receivers = self.cfg.receiver_positions
                hists.append(h.coeffs)
                traces.append(tr)
        return system, hists, traces

    def misfit_and_gradient(self, grid: MaterialGrid, reference: list[TraceSet]):
        mis, gradient, traces = self.misfit_lazy(grid, reference)
        return mis, gradient(), traces

    def misfit_lazy(self, grid: MaterialGrid, reference: list[TraceSet]):
        """Forward runs and misfit now; adjoint runs and kernel only when the
        returned callable is invoked."""
        rule = self.cfg.gradient_rule
        if rule == "consistent" and (self.cfg.lumped or self.cfg.history_stride != 1):
            raise ValueError("the consistent gradient needs consistent mass and stride 1")
        system, hists, traces = self.forward(grid)
        mis = adj.misfit(traces, reference, self.time.dt)

        def gradient() -> adj.Gradient:
            adjs = []
            with self.timer("adjoint"):
                for r in mis.residuals:
                    a = adjoint_run(system, self.time, adj.adjoint_sources(r), self.R, lumped=self.cfg.lumped)
                    adjs.append(a.coeffs[::self.cfg.history_stride] if self.cfg.history_stride > 1 else a.coeffs)
            with self.timer("gradient"):
                if rule == "midpoint":
                    return adj.gradient_midpoint(self.basis, grid, self.alpha, hists, adjs, self.cfg.rho,
                                                 self.cfg.c, self.time.dt, self.cfg.history_stride)
                return adj.gradient_consistent(self.assembler(grid), hists, adjs, self.cfg.rho,
                                               self.cfg.c, self.time.dt)

        return mis, gradient, traces

    def misfit(self, grid: MaterialGrid, reference: list[TraceSet]) -> float:
        _, _, traces = self.forward(grid, store=False)
        return adj.misfit(traces, reference, self.time.dt).chi


# -- reference data ----------------------------------------------------------

def synthesize_reference(cfg: ExperimentConfig, synthesis: bool = True) -> list[TraceSet]:
    """Traces at every receiver for every source (full matrix capture).

    With ``synthesis`` the finer synthesis discretization is used; otherwise
    the inversion discretization itself (defects still baked into alpha).
    """
    scfg = cfg.synthesis_config() if synthesis else replace(
        cfg, geometry=list(cfg.geometry) + [(d, "fictitious") for d in cfg.defects], defects=[])
    model = Model(scfg)
    _, _, traces = model.forward(model.initial_grid(1), store=False)
    return traces


# -- inversion ---------------------------------------------------------------

@dataclass
class StageResult:
    grid: MaterialGrid
    chi: list[float]
    journal: list[dict]
    reason: str
    optimizable: np.ndarray


@dataclass
class InversionReport:
    grid: MaterialGrid
    stages: list[StageResult]
    indicator: np.ndarray | None
    marked: np.ndarray | None
    flags: dict
    timings: dict

    @property
    def chi(self) -> list[list[float]]:
        return [s.chi for s in self.stages]


def optimizable_mask(model: Model, grid: MaterialGrid) -> np.ndarray:
    keep = window_mask(grid, model.cfg.window)
    return keep & (model.alpha(grid.midpoints()) == 1.0)


def run_stage(model: Model, grid: MaterialGrid, reference, iters: int) -> StageResult:
    mask = optimizable_mask(model, grid)
    frozen = grid.values.copy()
    frozen[~mask] = 1.0
    grid = grid.with_values(frozen)
    cfg = model.cfg

    def evaluator(x):
        vals = frozen.copy()
        vals[mask] = x
        mis, gradient, _ = model.misfit_lazy(grid.with_values(vals), reference)
        return mis.chi, lambda: gradient().values[mask]

    state = OptimizerState.for_bounds(int(mask.sum()), cfg.gamma_min, cfg.gamma_max, max_iter=iters)
    t_inner = sum(model.timer.totals[k] for k in ("assembly", "forward", "adjoint", "gradient"))
    start = _time.perf_counter()
    res = minimize(evaluator, frozen[mask], state)
    elapsed = _time.perf_counter() - start
    inner = sum(model.timer.totals[k] for k in ("assembly", "forward", "adjoint", "gradient")) - t_inner
    model.timer.totals["optimizer"] += max(elapsed - inner, 0.0)
    vals = frozen.copy()
    vals[mask] = res.x
    log.info("stage finished after %d iterations (%s), chi %.4e -> %.4e",
             state.k, res.reason, res.chi[0], res.chi[-1])
    return StageResult(grid=grid.with_values(vals), chi=res.chi, journal=res.journal,
                       reason=res.reason, optimizable=mask)


def invert(cfg: ExperimentConfig, reference: list[TraceSet], model: Model | None = None) -> InversionReport:
    """Coarse stage, indicator-driven refinement, then a fine stage."""
    model = model or Model(cfg)
    flags = dict(strategy=cfg.strategy, gradient_rule=cfg.gradient_rule, refined=False,
                 nothing_to_refine=False)
    stage1 = run_stage(model, model.initial_grid(), reference, cfg.stage1_iters)
    stages = [stage1]
    eta = marked = None
    if cfg.refine and cfg.stage2_iters > 0:
        eta = compute_indicator(stage1.grid)
        ref = select_and_refine(stage1.grid, eta, cfg.tau_fraction, cfg.n_layers, cfg.n_sub, cfg.strategy)
        marked = ref.marked
        if ref.nothing_to_refine:
            flags["nothing_to_refine"] = True
        else:
            flags["refined"] = True
            # a fresh optimizer state: the variable set changed
            stages.append(run_stage(model, ref.grid, reference, cfg.stage2_iters))
    return InversionReport(grid=stages[-1].grid, stages=stages, indicator=eta, marked=marked,
                           flags=flags, timings=dict(model.timer.totals))


# -- forward convergence study --------------------------------------------------

@dataclass
class ConvergenceConfig:
    extents: tuple[float, float] = (10.0, 5.0)
    hole_center: tuple[float, float] = (6.0, 2.85)
    hole_radius: float = 0.5
    eps_fict: float = 1e-8
    source: tuple[float, float] = (2.0, 2.5)
    sigma: tuple[float, float] = (0.25, 0.25)
    frequency: float = 0.5
    rho: float = 1.0
    c: float = 1.0
    t_max: float = 10.0
    n_steps: int = 20000
    hs: tuple[float, ...] = (1 / 2, 1 / 4, 1 / 8, 1 / 16)
    degrees: tuple[int, ...] = (2, 3)
    masses: tuple[str, ...] = ("consistent", "lumped")
    window: tuple[float, float, float, float] = (7.0, 0.0, 10.0, 5.0)
    n_eval: tuple[int, int] = (61, 101)
    min_leaf: float = 1 / 4096
    reference_h: float | None = None  # default: finest h / 2
    reference_degree: int | None = None  # default: max degree + 1
    envelope_power: int = 2


def _depth_for(h: float, min_leaf: float) -> int:
    return max(0, min(12, int(math.ceil(math.log2(h / min_leaf) - 1e-9))))


def forward_field(cc: ConvergenceConfig, h: float, p: int, lumped: bool, points) -> np.ndarray:
    """Field at ``points`` at ``t_max`` for one mesh of the study."""
    spans = (int(round(cc.extents[0] / h)), int(round(cc.extents[1] / h)))
    basis = TensorBasis.uniform(spans, p, cc.extents)
    alpha = AlphaField(physical_region([(Circle(cc.hole_center, cc.hole_radius), "fictitious")]), cc.eps_fict)
    grid = MaterialGrid.homogeneous(spans, 1, cc.extents)
    asm = Assembler(basis, alpha, grid, _depth_for(h, cc.min_leaf), cache_basis=False)
    system = asm.assemble(grid, cc.rho, cc.c)
    system.mass_method = "woodbury"  # homogeneous gamma: tensor mass plus a local correction
    del asm
    F = spatial_source(basis, SourceSpec(cc.source, cc.sigma, cc.frequency))
    tg = TimeGrid(cc.t_max, cc.n_steps)
    hist, _ = cdm_run(system, tg, burst(tg.times, cc.frequency, cc.envelope_power), F,
                      stride=None, lumped=lumped)
    return basis.evaluation_matrix(points) @ hist.coeffs[-1]


def evaluation_points(cc: ConvergenceConfig) -> np.ndarray:
    x0, y0, x1, y1 = cc.window
    X, Y = np.meshgrid(np.linspace(x0, x1, cc.n_eval[0]), np.linspace(y0, y1, cc.n_eval[1]))
    return np.stack([X.ravel(), Y.ravel()], axis=1)


def relative_error(u, u_ref) -> float:
    return float(np.linalg.norm(u - u_ref) / np.linalg.norm(u_ref))


def fit_slope(hs, errs) -> float:
    """Least-squares slope of log(eps) against log(h); exact zeros are left out."""
    hs, errs = np.asarray(hs, dtype=float), np.asarray(errs, dtype=float)
    keep = errs > 0
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(hs[keep]), np.log(errs[keep]), 1)[0])


def convergence_study(cc: ConvergenceConfig, reference: np.ndarray | None = None, progress=None):
    """Rows ``(p, mass, h, eps)`` and slopes over the three finest meshes per (p, mass)."""
    pts = evaluation_points(cc)
    if reference is None:
        h_ref = cc.reference_h or min(cc.hs) / 2
        p_ref = cc.reference_degree or max(cc.degrees) + 1
        reference = forward_field(cc, h_ref, p_ref, False, pts)
    if reference is None or not np.any(reference):
        raise InvalidStateError("reference solution missing")
    rows = []
    for p in cc.degrees:
        for mass in cc.masses:
            for h in cc.hs:
                t0 = _time.perf_counter()
                u = forward_field(cc, h, p, mass == "lumped", pts)
                rows.append(dict(p=p, mass=mass, h=h, eps=relative_error(u, reference)))
                if progress:
                    progress(rows[-1], _time.perf_counter() - t0)
    slopes = {}
    for p in cc.degrees:
        for mass in cc.masses:
            sel = sorted((r["h"], r["eps"]) for r in rows if r["p"] == p and r["mass"] == mass)[:3]
            slopes[(p, mass)] = fit_slope([s[0] for s in sel], [s[1] for s in sel])
    return rows, slopes


# -- benchmark geometry ----------------------------------------------------------

# lower boundary of the specimen, mm
SPECIMEN_SPLINE = ((0, 10), (10, 1), (25, 7.5), (35, 2), (50, 15), (60, 3), (75, 12), (90, 1), (100, 10))


def specimen_geometry() -> list[tuple[Shape, str]]:
    return [(BelowSpline(SPECIMEN_SPLINE), "fictitious"), (Circle((35.0, 20.0), 7.5), "fictitious")]


def ellipse_defect() -> RotatedEllipse:
    return RotatedEllipse((63.0, 18.0), 6.0, 1.0, 67.5)


def transducer_line(n: int, spacing: float, center: float = 50.0, y: float = 50.0) -> list[tuple[float, float]]:
    x0 = center - spacing * (n - 1) / 2
    return [(x0 + k * spacing, y) for k in range(n)]


def desk_benchmark(**overrides) -> ExperimentConfig:
    """Scaled specimen benchmark: 100 x 50 mm, 40 x 20 spans, 6 sources, 1200 steps.

    Steel-like wave speed 6 mm/us and a 500 kHz burst give a 12 mm dominant
    wavelength, so h = 2.5 mm resolves it with 4.8 spans.
    """
    cfg = dict(extents=(100.0, 50.0), spans=(40, 20), degree=3, rho=2.7, c=6.0, eps_fict=1e-5,
               geometry=specimen_geometry(), defects=[ellipse_defect()],
               sources=transducer_line(6, 12.8), sigma=(1.0, 1.0), frequency=0.5, t_max=45.0,
               n_steps=1200, depth=4, n_v=1, n_sub=4, n_layers=1, tau_fraction=0.5, stage1_iters=3,
               stage2_iters=10, strategy="restart", gamma_min=1e-5, gamma_max=1.0)
    cfg.update(overrides)
    return ExperimentConfig(**cfg)


# -- recovery metrics ------------------------------------------------------------

@dataclass
class RecoveryMetrics:
    mean_inside: float  # mean gamma inside the true defects
    mean_background: float  # mean gamma over the physical background
    artifact: float  # mean |1 - gamma| over the same background
    n_inside: int
    n_background: int


def recovery_metrics(cfg: ExperimentConfig, grid: MaterialGrid, pixels_per_span: int = 4,
                     margin_voxels: int = 2) -> RecoveryMetrics:
    """Score a reconstruction on a fixed raster independent of the voxel layout.

    The background is every physical pixel outside the defects dilated by
    ``margin_voxels`` level-0 voxels of the inversion grid (8-neighbourhood).
    """
    from scipy.ndimage import binary_dilation

    nx, ny = cfg.spans[0] * pixels_per_span, cfg.spans[1] * pixels_per_span
    lx, ly = cfg.extents
    X, Y = np.meshgrid((np.arange(nx) + 0.5) * lx / nx, (np.arange(ny) + 0.5) * ly / ny)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    gamma = grid.gamma_at(pts).reshape(ny, nx)
    inside = np.zeros((ny, nx), dtype=bool)
    for d in cfg.defects:
        inside |= d.inside(pts).reshape(ny, nx)
    physical = physical_region(cfg.geometry).inside(pts).reshape(ny, nx)
    step = max(1, int(round(margin_voxels * pixels_per_span / cfg.n_v)))
    grown = binary_dilation(inside, structure=np.ones((3, 3), bool), iterations=step)
    background = physical & ~grown
    if not inside.any() or not background.any():
        raise InvalidStateError("empty defect or background region on the scoring raster")
    return RecoveryMetrics(mean_inside=float(gamma[inside].mean()),
                           mean_background=float(gamma[background].mean()),
                           artifact=float(np.abs(1.0 - gamma[background]).mean()),
                           n_inside=int(inside.sum()), n_background=int(background.sum()))


# -- gradient cost scaling ---------------------------------------------------------

def gradient_cost_scaling(cfg: ExperimentConfig, reference: list[TraceSet], n_vs=(1, 2, 4),
                          repeats: int = 3) -> tuple[list[dict], float]:
    """Kernel wall time against the number of material voxels at a fixed mesh.

    Forward and adjoint histories are computed once on the homogeneous model;
    only the voxel kernel depends on the material grid, so it alone is timed
    (best of ``repeats``). Returns the rows and the fitted power-law exponent.
    """
    model = Model(cfg)
    system, hists, traces = model.forward(model.initial_grid(1))
    mis = adj.misfit(traces, reference, model.time.dt)
    adjs = [adjoint_run(system, model.time, adj.adjoint_sources(r), model.R, lumped=cfg.lumped).coeffs
            for r in mis.residuals]
    rows = []
    for n_v in n_vs:
        grid = model.initial_grid(n_v)
        best = math.inf
        for _ in range(repeats):
            t0 = _time.perf_counter()
            adj.gradient_midpoint(model.basis, grid, model.alpha, hists, adjs, cfg.rho, cfg.c, model.time.dt)
            best = min(best, _time.perf_counter() - t0)
        rows.append(dict(n_v=n_v, n_m=grid.n_active, seconds=best))
    exponent = float(np.polyfit(np.log([r["n_m"] for r in rows]), np.log([r["seconds"] for r in rows]), 1)[0])
    return rows, exponent
