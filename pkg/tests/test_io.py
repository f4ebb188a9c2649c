import json

import numpy as np
import scipy.io
import scipy.sparse as sp

from igafwi import io
from igafwi.dynamics import TraceSet
from igafwi.material import MaterialGrid, compute_indicator, select_and_refine


def refined_grid():
    g = MaterialGrid.homogeneous((5, 4), 1, (10.0, 8.0), gamma_min=1e-5)
    base = g.base.copy()
    base[2, 3] = 1e-5
    g = g.with_values(base.ravel())
    return select_and_refine(g, compute_indicator(g), 0.9, 0, 4, strategy="warm-start").grid


def test_traces_round_trip(tmp_path, rng):
    tr = TraceSet(receivers=np.zeros((3, 2)), traces=rng.standard_normal((3, 11)), dt=0.25)
    p = io.write_traces_csv(tmp_path / "a" / "s.csv", tr)
    assert p.read_text().splitlines()[0] == "t, r0, r1, r2"
    back = io.read_traces_csv(p)
    np.testing.assert_array_equal(back.traces, tr.traces)
    assert back.dt == 0.25


def test_gamma_grid_round_trip(tmp_path, rng):
    g = refined_grid()
    g = g.with_values(rng.uniform(size=g.n_active))
    p = io.write_gamma_grid(tmp_path / "g.txt", g)
    lines = p.read_text().splitlines()
    assert lines[0].split()[:3] == ["level0", "5", "4"]
    assert any(ln.startswith("sub 3 2 4") for ln in lines)
    back = io.read_gamma_grid(p)
    np.testing.assert_array_equal(back.values, g.values)
    assert back.refined.keys() == g.refined.keys()


def test_pgm_homogeneous_is_white(tmp_path):
    g = MaterialGrid.homogeneous((5, 4), 2, (10.0, 8.0), n_sub=4)
    img = io.read_pgm(io.write_gamma_pgm(tmp_path / "w.pgm", g))
    assert img.shape == (4 * 2 * 4, 5 * 2 * 4)
    assert np.all(img == 255)


def test_pgm_void_block(tmp_path):
    g = refined_grid()
    vals = g.values.copy()
    first = g.voxel_index(np.array([[6.0, 4.0]]))[0]
    vals[:] = 1.0
    vals[first] = g.gamma_min
    g = g.with_values(vals)
    img = io.read_pgm(io.write_gamma_pgm(tmp_path / "v.pgm", g))
    assert img.shape == (16, 20)
    black = np.argwhere(img == 0)
    assert len(black) == 1  # one sub-voxel of the refined cell = one finest pixel
    assert np.count_nonzero(img < 255) == 1
    # row 0 of the image is the top of the domain
    assert tuple(black[0]) == (16 - 1 - 2 * 4, 3 * 4)


def test_pgm_unrefined_void_voxel_is_a_block(tmp_path):
    g = MaterialGrid.homogeneous((5, 4), 1, (10.0, 8.0), n_sub=4, gamma_min=1e-5)
    base = g.base.copy()
    base[0, 0] = 1e-5
    img = io.read_pgm(io.write_gamma_pgm(tmp_path / "b.pgm", g.with_values(base.ravel())))
    assert np.count_nonzero(img == 0) == 16


def test_voxel_csv(tmp_path):
    g = refined_grid()
    p = io.write_voxel_csv(tmp_path / "g.csv", g)
    data = np.loadtxt(p, delimiter=",", skiprows=1)
    assert data.shape == (g.n_active, 3)
    np.testing.assert_allclose(data[:, :2], g.midpoints())


def test_tables_and_manifest(tmp_path):
    io.write_journal_csv(tmp_path / "j.csv", [dict(iter=0, chi=1.0, proj_grad_norm=2.0, step_len=0.0, n_evals=1)])
    rows = io.read_rows_csv(tmp_path / "j.csv")
    assert list(rows[0]) == io.JOURNAL_COLUMNS
    io.write_convergence_csv(tmp_path / "c.csv", [dict(p=2, mass="lumped", h=0.5, eps=0.1)])
    assert io.read_rows_csv(tmp_path / "c.csv")[0]["mass"] == "lumped"
    m = io.write_manifest(tmp_path / "m.json", {"a": np.float64(1.5)}, {"burst": "sin^2"})
    doc = json.loads(m.read_text())
    assert doc["config"]["a"] == 1.5 and doc["design_flags"]["burst"] == "sin^2"


def test_matrix_dump(tmp_path):
    A = sp.random(6, 6, density=0.3, random_state=1, format="csr")
    p = io.dump_matrix(tmp_path / "M", A)
    assert p.suffix == ".mtx"
    np.testing.assert_allclose(scipy.io.mmread(str(p)).toarray(), A.toarray())
