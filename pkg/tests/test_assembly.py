import numpy as np
import pytest
import scipy.sparse as sp

from igafwi.assembly import (Assembler, LumpingError, SourceSpec, TensorWoodburySolver, assemble, burst,
                             row_sum_lump, spatial_source)
from igafwi.geometry import AlphaField, Box, Circle, Everything, physical_region
from igafwi.material import MaterialGrid
from igafwi.splines import TensorBasis


def unit_system(p=1, spans=(1, 1), alpha=None, grid=None, rho=1.0, c=1.0, depth=0):
    basis = TensorBasis.uniform(spans, p, (float(spans[0]), float(spans[1])))
    alpha = alpha or AlphaField(Everything(), 1e-8)
    grid = grid or MaterialGrid.homogeneous(spans, 1, basis.extents)
    return assemble(basis, alpha, grid, rho, c, depth=depth)


def test_constants_in_stiffness_kernel():
    s = unit_system()
    np.testing.assert_allclose(s.K.sum(axis=1), 0.0, atol=1e-15)


def test_total_mass_is_one():
    assert unit_system().M.sum() == pytest.approx(1.0, abs=1e-14)


def test_gamma_linearity():
    basis = TensorBasis.uniform((3, 2), 2, (3.0, 2.0))
    alpha = AlphaField(physical_region([(Circle((1.4, 0.9), 0.5), "fictitious")]), 1e-5)
    g = MaterialGrid.homogeneous((3, 2), 2, (3.0, 2.0))
    rng = np.random.default_rng(1)
    g = g.with_values(rng.uniform(0.2, 1.0, g.n_active))
    asm = Assembler(basis, alpha, g, depth=3)
    a = asm.assemble(g, 1.3, 2.0)
    b = asm.assemble(g.with_values(0.5 * g.values), 1.3, 2.0)
    np.testing.assert_allclose(b.M.toarray(), 0.5 * a.M.toarray(), rtol=1e-14, atol=1e-17)
    np.testing.assert_allclose(b.K.toarray(), 0.5 * a.K.toarray(), rtol=1e-14, atol=1e-17)


def test_lumping_examples():
    s = unit_system()
    d = row_sum_lump(s.M)
    np.testing.assert_allclose(d, 0.25, rtol=1e-14)
    assert d.sum() == pytest.approx(s.M.sum(), rel=1e-14)
    fict = unit_system(alpha=AlphaField(physical_region([(Everything(), "fictitious")]), 1e-8))
    np.testing.assert_allclose(row_sum_lump(fict.M), 0.25e-8, rtol=1e-12)


def test_lumping_rejects_nonpositive_rows():
    with pytest.raises(LumpingError):
        row_sum_lump(sp.csr_matrix(np.array([[1.0, 0.0], [0.0, -1.0]])))


def test_bilinear_mass_matches_symbolic():
    # int_0^1 N_a N_b for linear hats: [[1/3, 1/6], [1/6, 1/3]]; tensor product
    m1 = np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
    np.testing.assert_allclose(unit_system().M.toarray(), np.kron(m1, m1), rtol=1e-14)


def test_gauss_order_does_not_change_uncut_stiffness():
    basis = TensorBasis.uniform((4, 3), 3, (2.0, 1.5))
    g = MaterialGrid.homogeneous((4, 3), 1, basis.extents)
    alpha = AlphaField(Everything(), 1e-8)
    K1 = assemble(basis, alpha, g, 1.0, 1.0, q=4).K.toarray()
    K2 = assemble(basis, alpha, g, 1.0, 1.0, q=6).K.toarray()
    assert np.max(np.abs(K1 - K2)) <= 1e-10 * np.max(np.abs(K1))


def test_void_voxel_removes_its_mass():
    basis = TensorBasis.uniform((4, 4), 2, (4.0, 4.0))
    g = MaterialGrid.homogeneous((4, 4), 2, basis.extents, gamma_min=1e-5)
    alpha = AlphaField(Everything(), 1e-8)
    asm = Assembler(basis, alpha, g, depth=0)
    rho = 2.7
    full = asm.assemble(g, rho, 1.0).M.sum()
    vals = g.values.copy()
    vals[13] = g.gamma_min
    holed = asm.assemble(g.with_values(vals), rho, 1.0).M.sum()
    area = g.areas()[13]
    assert full - holed == pytest.approx(rho * (1 - g.gamma_min) * area, rel=1e-10)


def test_reflection_symmetry():
    basis = TensorBasis.uniform((6, 4), 2, (6.0, 4.0))
    alpha = AlphaField(physical_region([(Circle((3.0, 2.0), 0.8), "fictitious")]), 1e-6)
    g = MaterialGrid.homogeneous((6, 4), 1, basis.extents)
    s = assemble(basis, alpha, g, 1.0, 1.0, depth=4)
    nx, ny = basis.kx.n, basis.ky.n
    iy, ix = np.divmod(np.arange(basis.n_dof), nx)
    flip_x = (nx - 1 - ix) + nx * iy
    flip_y = ix + nx * (ny - 1 - iy)
    for A in (s.M.toarray(), s.K.toarray()):
        np.testing.assert_allclose(A, A.T, atol=1e-14 * np.abs(A).max())
        for perm in (flip_x, flip_y):
            np.testing.assert_allclose(A[np.ix_(perm, perm)], A, atol=1e-12 * np.abs(A).max())


def test_mass_is_positive_definite():
    basis = TensorBasis.uniform((5, 3), 3, (5.0, 3.0))
    alpha = AlphaField(physical_region([(Circle((2.5, 1.5), 1.0), "fictitious")]), 1e-5)
    s = assemble(basis, alpha, MaterialGrid.homogeneous((5, 3), 1, basis.extents), 1.0, 1.0, depth=3)
    assert np.linalg.eigvalsh(s.M.toarray()).min() > 0


def test_source_integral_matches_gaussian():
    basis = TensorBasis.uniform((40, 20), 2, (10.0, 5.0))
    spec = SourceSpec((2.0, 2.5), (0.25, 0.25), 0.5)
    F = spatial_source(basis, spec)
    exact = 2 * np.pi * 0.25 * 0.25
    assert abs(F.sum() - exact) / exact < 1e-3


def test_wide_source_approaches_function_integrals():
    basis = TensorBasis.uniform((4, 3), 2, (4.0, 3.0))
    F = spatial_source(basis, SourceSpec((2.0, 1.5), (1e6, 1e6), 0.5))
    M = assemble(basis, AlphaField(Everything(), 1e-8), MaterialGrid.homogeneous((4, 3), 1, (4.0, 3.0)), 1.0, 1.0).M
    # int N_i = row sums of the mass matrix (partition of unity)
    np.testing.assert_allclose(F, np.asarray(M.sum(axis=1)).ravel(), rtol=1e-10)


def test_source_translation_shifts_pattern():
    basis = TensorBasis.uniform((20, 10), 2, (20.0, 10.0))
    F1 = spatial_source(basis, SourceSpec((8.0, 5.0), (0.7, 0.7), 0.5)).reshape(basis.ky.n, basis.kx.n)
    F2 = spatial_source(basis, SourceSpec((9.0, 5.0), (0.7, 0.7), 0.5)).reshape(basis.ky.n, basis.kx.n)
    np.testing.assert_allclose(F2[:, 6:16], F1[:, 5:15], atol=1e-14)


def test_source_spec_validation():
    with pytest.raises(ValueError):
        SourceSpec((0.0, 0.0), (0.0, 1.0), 1.0)


def test_burst_values():
    f = 0.5
    assert burst(0.0, f) == 0.0
    assert burst(2 / f, f) == pytest.approx(0.0, abs=1e-15)
    assert burst(2 / f + 1e-9, f) == 0.0
    assert burst(2 / f - 1e-9, f) == pytest.approx(0.0, abs=1e-8)
    assert burst(0.5, f) == pytest.approx(np.sin(np.pi / 2) * np.sin(np.pi / 8) ** 2, abs=1e-15)
    assert burst(0.5, f) == pytest.approx(0.146447, abs=1e-6)


def test_woodbury_solver_matches_direct():
    basis = TensorBasis.uniform((40, 20), 3, (10.0, 5.0))
    alpha = AlphaField(physical_region([(Circle((6.0, 2.85), 0.5), "fictitious")]), 1e-8)
    g = MaterialGrid.homogeneous((40, 20), 1, basis.extents)
    s = assemble(basis, alpha, g, 1.0, 1.0, depth=5)
    W = TensorWoodburySolver(s.M, basis, 1.0)
    assert 0 < len(W.S) < basis.n_dof
    b = np.random.default_rng(3).standard_normal(basis.n_dof)
    x = W.solve(b)
    assert np.linalg.norm(s.M @ x - b) < 1e-11 * np.linalg.norm(b)
    s.mass_method = "woodbury"
    np.testing.assert_allclose(s.mass_solver(False)(b), x)


def test_unit_cell_with_box_geometry_mass():
    # a quarter of the square is fictitious: total mass = 0.75 + 0.25 * eps
    eps = 1e-4
    alpha = AlphaField(physical_region([(Box((0.5, 0.5), (1.5, 1.5)), "fictitious")]), eps)
    s = unit_system(p=2, alpha=alpha, depth=1)
    assert s.M.sum() == pytest.approx(0.75 + 0.25 * eps, rel=1e-12)
