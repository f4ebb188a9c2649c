import numpy as np
import pytest

from igafwi.fwi import (ConvergenceConfig, ExperimentConfig, InvalidStateError, Model, convergence_study,
                        ellipse_defect, evaluation_points, fit_slope, forward_field, invert, relative_error,
                        specimen_geometry, synthesize_reference, transducer_line)
from igafwi.geometry import Circle


def plate(**kw):
    base = dict(extents=(12.0, 6.0), spans=(12, 6), degree=2, geometry=[(Circle((3.0, 2.0), 0.8), "fictitious")],
                sources=[(4.0, 6.0), (8.0, 6.0)], sigma=(0.5, 0.5), frequency=0.25, t_max=24.0,
                n_steps=240, depth=3, synth_h_factor=1, synth_degree_increase=0)
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        plate(spans=(0, 6))
    with pytest.raises(ValueError):
        plate(sources=[(20.0, 6.0)])
    with pytest.raises(ValueError):
        plate(strategy="sideways")
    with pytest.raises(ValueError):
        plate(gradient_rule="exact")


def test_synthesis_config_is_finer():
    cfg = plate(synth_h_factor=2, synth_degree_increase=1, defects=[Circle((8.0, 3.0), 0.5)])
    s = cfg.synthesis_config()
    assert s.spans == (24, 12) and s.degree == 3
    assert len(s.geometry) == 2 and s.defects == []


def test_self_consistent_pipeline_has_zero_misfit():
    cfg = plate()
    ref = synthesize_reference(cfg)
    model = Model(cfg)
    assert model.misfit(model.initial_grid(), ref) < 1e-20


def test_defect_gives_positive_misfit():
    cfg = plate(defects=[Circle((8.0, 3.0), 0.7)])
    ref = synthesize_reference(cfg, synthesis=False)
    model = Model(cfg)
    assert model.misfit(model.initial_grid(), ref) > 0


def test_full_matrix_capture_shapes():
    srcs = transducer_line(17, 0.6, center=6.0, y=6.0)
    cfg = plate(sources=srcs, n_steps=60, t_max=6.0)
    ref = synthesize_reference(cfg, synthesis=False)
    assert len(ref) == 17
    assert all(tr.traces.shape == (17, 61) for tr in ref)


def test_homogeneous_truth_exits_early():
    cfg = plate()
    ref = synthesize_reference(cfg)
    report = invert(cfg, ref)
    assert report.stages[0].chi[-1] < 1e-20
    assert report.flags["nothing_to_refine"]
    assert not report.flags["refined"]
    assert len(report.stages) == 1


@pytest.fixture(scope="module")
def small_inversion():
    cfg = plate(defects=[Circle((8.0, 3.0), 0.8)], stage1_iters=2, stage2_iters=2, n_sub=2)
    ref = synthesize_reference(cfg, synthesis=False)
    return cfg, ref, invert(cfg, ref)


def test_chi_non_increasing_per_stage(small_inversion):
    _, _, report = small_inversion
    assert report.flags["refined"]
    for stage in report.chi:
        assert np.all(np.diff(stage) <= 0)
    assert set(report.timings) >= {"assembly", "forward", "adjoint", "gradient", "optimizer"}


def test_restart_starts_from_fresh_state(small_inversion):
    _, _, report = small_inversion
    first = report.stages[1].journal[0]
    assert first["iter"] == 0 and first["n_evals"] == 1
    # restart: stage 2 starts from gamma = 1 away from frozen voxels
    assert report.stages[1].chi[0] > report.stages[0].chi[-1]


def test_inversion_is_deterministic(small_inversion):
    cfg, ref, report = small_inversion
    again = invert(cfg, ref)
    assert np.array_equal(again.grid.values, report.grid.values)
    assert again.chi == report.chi


def test_frozen_voxels_stay_at_one(small_inversion):
    cfg, _, report = small_inversion
    model = Model(cfg)
    frozen = model.alpha(report.grid.midpoints()) < 1.0
    assert frozen.any()
    assert np.all(report.grid.values[frozen] == 1.0)


def test_window_restricts_optimization():
    cfg = plate(defects=[Circle((8.0, 3.0), 0.8)], stage1_iters=1, refine=False, window=(6.0, 0.0, 12.0, 6.0))
    ref = synthesize_reference(cfg, synthesis=False)
    report = invert(cfg, ref)
    outside = report.grid.midpoints()[:, 0] < 6.0
    assert np.all(report.grid.values[outside] == 1.0)
    assert np.any(report.grid.values[~outside] < 1.0)


def test_timer_shares_sum_to_one():
    from igafwi.fwi import Timer

    t = Timer()
    with t("forward"):
        sum(range(10000))
    with t("adjoint"):
        sum(range(20000))
    assert sum(t.shares().values()) == pytest.approx(1.0)
    assert set(t.totals) == {"forward", "adjoint"}


def tiny_study(**kw):
    base = dict(extents=(2.0, 1.0), hole_center=(1.2, 0.5), hole_radius=0.2, eps_fict=1e-6, source=(0.5, 0.5),
                sigma=(0.1, 0.1), frequency=2.0, t_max=0.5, n_steps=200, hs=(0.5, 0.25), degrees=(2,),
                masses=("consistent",), window=(1.4, 0.0, 2.0, 1.0), n_eval=(5, 5), min_leaf=1 / 64)
    base.update(kw)
    return ConvergenceConfig(**base)


def test_identical_settings_give_zero_error():
    cc = tiny_study()
    pts = evaluation_points(cc)
    ref = forward_field(cc, 0.25, 2, False, pts)
    rows, _ = convergence_study(cc, reference=ref)
    assert rows[-1]["h"] == 0.25 and rows[-1]["eps"] == 0.0
    assert rows[0]["eps"] > 0


def test_missing_reference_is_invalid_state():
    cc = tiny_study()
    with pytest.raises(InvalidStateError):
        convergence_study(cc, reference=np.zeros(25))


def test_fit_slope_and_error_helpers():
    hs = np.array([0.5, 0.25, 0.125])
    assert fit_slope(hs, 3 * hs**3) == pytest.approx(3.0)
    assert np.isnan(fit_slope(hs, [0.0, 0.0, 1.0]))
    assert relative_error(np.array([1.0, 1.0]), np.array([1.0, 0.0])) == 1.0


def test_benchmark_geometry_helpers():
    geo = specimen_geometry()
    assert [role for _, role in geo] == ["fictitious", "fictitious"]
    below, hole = geo[0][0], geo[1][0]
    assert below.inside(np.array([[90.0, 0.5]]))[0] and not below.inside(np.array([[50.0, 30.0]]))[0]
    assert hole.inside(np.array([[35.0, 20.0]]))[0]
    e = ellipse_defect()
    assert e.inside(np.array([[63.0, 18.0]]))[0]
    line = transducer_line(17, 5.0)
    assert len(line) == 17 and line[8] == (50.0, 50.0)


def test_recovery_metrics_on_known_fields():
    from igafwi.fwi import recovery_metrics
    cfg = plate(defects=[Circle((8.0, 3.0), 1.0)])
    model = Model(cfg)
    grid = model.initial_grid(1)
    m = recovery_metrics(cfg, grid)
    assert m.mean_inside == 1.0 and m.mean_background == 1.0 and m.artifact == 0.0
    # voxels holding the defect set to gamma_min; the 2-voxel margin excludes their halo
    mid = grid.midpoints()
    vals = np.where(np.hypot(mid[:, 0] - 8.0, mid[:, 1] - 3.0) < 1.5, 1e-5, 1.0)
    m = recovery_metrics(cfg, grid.with_values(vals))
    assert m.mean_inside < 0.01
    assert m.mean_background == 1.0
    # background pixels exclude the fictitious hole (n_v = 4: one voxel per scoring pixel)
    fine = model.initial_grid(4)
    mid = fine.midpoints()
    hole = np.hypot(mid[:, 0] - 3.0, mid[:, 1] - 2.0) < 0.8
    assert recovery_metrics(cfg, fine.with_values(np.where(hole, 0.5, 1.0))).artifact == 0.0


def test_gradient_cost_scaling_rows():
    from igafwi.fwi import gradient_cost_scaling
    cfg = plate(defects=[Circle((8.0, 3.0), 0.8)])
    ref = synthesize_reference(cfg, synthesis=False)
    rows, exponent = gradient_cost_scaling(cfg, ref, n_vs=(1, 2), repeats=1)
    assert [r["n_m"] for r in rows] == [72, 288]
    assert all(r["seconds"] > 0 for r in rows) and np.isfinite(exponent)


def test_lazy_and_eager_gradients_agree():
    cfg = plate(defects=[Circle((8.0, 3.0), 0.8)])
    ref = synthesize_reference(cfg, synthesis=False)
    model = Model(cfg)
    grid = model.initial_grid()
    mis, g, _ = model.misfit_and_gradient(grid, ref)
    mis_lazy, gradient, _ = model.misfit_lazy(grid, ref)
    assert mis_lazy.chi == mis.chi
    np.testing.assert_array_equal(gradient().values, g.values)
