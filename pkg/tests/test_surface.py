import math

import numpy as np
import pytest
import scipy.sparse as sp

from curvflow.errors import (
    DimensionMismatchError,
    MeshFormatError,
    MeshTopologyError,
    NumericRangeError,
)
from curvflow.surface import (
    DiscreteSurface,
    _cotangent_assembly,
    build_periodic_grid,
    build_two_vertex,
    conformal_volume,
    dirichlet_energy,
    gauss_bonnet_residual,
    gauss_curvature,
    genus2_mesh,
    integrate,
    laplacian,
    load_mesh,
    save_obj,
    save_off,
    surface_to_json,
    thin_tetrahedron,
)


@pytest.fixture(scope="module")
def grid():
    return build_periodic_grid(8, -1.0)


@pytest.fixture(scope="module")
def genus2(tmp_path_factory):
    path = tmp_path_factory.mktemp("mesh") / "genus2.off"
    save_off(path, *genus2_mesh())
    return load_mesh(path)


def test_integrate_constants(grid):
    assert integrate(grid, np.ones(grid.n)) == pytest.approx(1.0, abs=1e-15)
    assert integrate(grid, np.full(grid.n, 2.5)) == pytest.approx(2.5, abs=1e-14)


def test_integrate_two_vertex_hand_quadrature():
    two = build_two_vertex(-1.0)
    assert integrate(two, np.array([1.0, 3.0])) == pytest.approx(2.0, abs=1e-15)


def test_integrate_dimension_mismatch(grid):
    with pytest.raises(DimensionMismatchError):
        integrate(grid, np.ones(grid.n + 1))


def test_conformal_volume_constants(grid):
    assert conformal_volume(grid, np.zeros(grid.n)) == pytest.approx(1.0, abs=1e-15)
    A = 3.7
    u = np.full(grid.n, 0.5 * math.log(A))
    assert conformal_volume(grid, u) == pytest.approx(A, rel=1e-14)


def test_conformal_volume_two_vertex():
    two = build_two_vertex(-1.0)
    u = np.array([0.0, 0.5 * math.log(2.0)])
    assert conformal_volume(two, u) == pytest.approx(1.5, abs=1e-15)


def test_conformal_volume_overflow(grid):
    with pytest.raises(NumericRangeError):
        conformal_volume(grid, np.full(grid.n, 500.0))


def test_laplacian_of_constant_vanishes(grid):
    # rounding in (S u) is amplified by 1/areas = n
    assert np.abs(laplacian(grid, np.full(grid.n, 4.2))).max() <= 1e-14 * grid.n


def test_laplacian_integral_vanishes(grid):
    rng = np.random.default_rng(0)
    for _ in range(10):
        u = rng.standard_normal(grid.n)
        assert abs(integrate(grid, laplacian(grid, u))) <= 1e-13


@pytest.mark.parametrize("N", [16, 32])
def test_laplacian_grid_eigenfunction_dispersion(N):
    # oracle: the 5-point stencil maps sin(2*pi*x) to -mu*sin(2*pi*x) with
    # mu = (2 - 2 cos(2*pi*h)) / h^2, which tends to (2*pi)^2 at rate h^2
    surf = build_periodic_grid(N, -1.0)
    x = surf.coords[:, 0]
    u = np.sin(2.0 * math.pi * x)
    h = 1.0 / N
    mu = (2.0 - 2.0 * math.cos(2.0 * math.pi * h)) / h**2
    assert np.abs(laplacian(surf, u) + mu * u).max() <= 1e-10 * mu


def test_laplacian_dispersion_is_second_order():
    errs = []
    for N in (16, 32):
        h = 1.0 / N
        mu = (2.0 - 2.0 * math.cos(2.0 * math.pi * h)) / h**2
        errs.append(abs(mu - (2.0 * math.pi) ** 2))
    assert 3.5 <= errs[0] / errs[1] <= 4.5


def test_dirichlet_energy_basics(grid):
    assert dirichlet_energy(grid, np.full(grid.n, 1.3)) <= 1e-13
    rng = np.random.default_rng(1)
    u = rng.standard_normal(grid.n)
    assert dirichlet_energy(grid, u) >= 0.0
    assert dirichlet_energy(grid, u + 2.0) == pytest.approx(
        dirichlet_energy(grid, u), abs=1e-12
    )


def test_dirichlet_energy_two_vertex_expansion():
    w = 1.7
    two = build_two_vertex(-1.0, weight=w)
    assert dirichlet_energy(two, np.array([0.0, 1.0])) == pytest.approx(w, abs=1e-15)


def test_gauss_curvature_constants(grid):
    K = gauss_curvature(grid, np.zeros(grid.n))
    assert np.abs(K - grid.kbar).max() <= 1e-13
    c = 0.4
    K = gauss_curvature(grid, np.full(grid.n, c))
    assert np.abs(K - math.exp(-2.0 * c) * grid.kbar).max() <= 1e-13


def test_gauss_bonnet_identity_random(grid, genus2):
    rng = np.random.default_rng(2)
    for surf in (grid, genus2):
        for _ in range(20):
            u = rng.uniform(-1.0, 1.0, surf.n)
            assert gauss_bonnet_residual(surf, u) <= 1e-12 * abs(surf.kbar)


def test_self_adjoint_laplacian(grid, genus2):
    rng = np.random.default_rng(3)
    for surf in (grid, genus2):
        for _ in range(10):
            u = rng.standard_normal(surf.n)
            v = rng.standard_normal(surf.n)
            lhs = integrate(surf, v * laplacian(surf, u))
            rhs = integrate(surf, u * laplacian(surf, v))
            assert abs(lhs - rhs) <= 1e-12


def test_grid_builder_small():
    surf = build_periodic_grid(2, -1.0)
    assert surf.n == 4
    assert surf.areas.sum() == pytest.approx(1.0, abs=1e-16)
    assert np.abs(laplacian(surf, np.full(4, 0.7))).max() <= 1e-14


def test_grid_hat_field_matches_stencil_arithmetic():
    # hat over the x index on a 4x4 grid: values [0, 1, 2, 1] per column.
    # Hand stencil: (S u)(ix) = 2 u(ix) - u(ix-1) - u(ix+1) = [-2, 0, 2, 0],
    # so Lap u = -(S u)/a = N^2 * [2, 0, -2, 0].
    surf = build_periodic_grid(4, -1.0)
    ix = np.arange(16) // 4
    hat = np.minimum(ix, 4 - ix).astype(float)
    expected = 16.0 * np.array([2.0, 0.0, -2.0, 0.0])[ix]
    assert np.abs(laplacian(surf, hat) - expected).max() <= 1e-12


def test_grid_builder_rejects_bad_arguments():
    with pytest.raises(ValueError):
        build_periodic_grid(1, -1.0)
    with pytest.raises(ValueError):
        build_periodic_grid(4, 0.0)


def test_surface_invariant_enforcement():
    S = sp.csr_matrix(np.array([[1.0, -1.0], [-1.0, 1.0]]))
    with pytest.raises(ValueError):
        DiscreteSurface(np.array([0.5, 0.5]), S, kbar=1.0)
    with pytest.raises(ValueError):
        DiscreteSurface(np.array([0.7, 0.5]), S, kbar=-1.0)
    bad = sp.csr_matrix(np.array([[1.0, -0.5], [-1.0, 1.0]]))
    with pytest.raises(ValueError):
        DiscreteSurface(np.array([0.5, 0.5]), bad, kbar=-1.0)


# --- triangle meshes -------------------------------------------------------


def test_cotangent_weights_right_isoceles_pair():
    # unit square split along its diagonal: the diagonal edge sees two right
    # angles, weight 0.5*(cot 90 + cot 90) = 0; a boundary edge sees a single
    # 45-degree angle, weight 0.5*cot(45) = 0.5
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    S, areas, delaunay = _cotangent_assembly(verts, faces)
    assert S[0, 2] == pytest.approx(0.0, abs=1e-15)
    assert S[0, 1] == pytest.approx(-0.5, abs=1e-15)
    assert S[1, 2] == pytest.approx(-0.5, abs=1e-15)
    assert delaunay
    # barycentric: one third of each incident face area 1/2
    assert areas[0] == pytest.approx(1.0 / 3.0, abs=1e-15)
    assert areas[1] == pytest.approx(1.0 / 6.0, abs=1e-15)


def test_genus2_mesh_is_closed_genus_two(genus2):
    assert genus2.euler_char == -2
    assert genus2.kbar == pytest.approx(2.0 * math.pi * -2)
    assert genus2.areas.sum() == pytest.approx(1.0, rel=1e-14)
    asym = abs(genus2.stiffness - genus2.stiffness.T)
    assert asym.nnz == 0 or asym.data.max() <= 1e-14
    rowsums = np.asarray(genus2.stiffness.sum(axis=1)).ravel()
    assert np.abs(rowsums).max() <= 1e-13
    genus2.validate()


def test_load_mesh_obj_round_trip(tmp_path, genus2):
    verts, faces = genus2_mesh()
    path = tmp_path / "genus2.obj"
    save_obj(path, verts, faces)
    surf = load_mesh(path)
    assert surf.euler_char == -2
    assert np.abs(surf.areas - genus2.areas).max() <= 1e-15
    assert abs(surf.stiffness - genus2.stiffness).max() <= 1e-14


def test_load_mesh_refuses_nonnegative_euler(tmp_path):
    path = tmp_path / "thin.off"
    save_off(path, *thin_tetrahedron())
    with pytest.raises(MeshTopologyError, match="Euler characteristic 2"):
        load_mesh(path)
    with pytest.warns(UserWarning, match="differs from 2\\*pi\\*chi"):
        surf = load_mesh(path, kbar=-1.0, allow_nonneg_euler=True)
    assert not surf.delaunay


def test_load_mesh_boundary_edge_rejected(tmp_path):
    path = tmp_path / "open.off"
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    save_off(path, verts, np.array([[0, 1, 2]]))
    with pytest.raises(MeshTopologyError, match="boundary"):
        load_mesh(path)


def test_load_mesh_inconsistent_orientation_rejected(tmp_path):
    verts, faces = thin_tetrahedron()
    faces = faces.copy()
    faces[0] = faces[0][::-1]
    path = tmp_path / "flip.off"
    save_off(path, verts, faces)
    with pytest.raises(MeshTopologyError):
        load_mesh(path, kbar=-1.0, allow_nonneg_euler=True)


def test_load_mesh_unreadable_and_malformed(tmp_path):
    with pytest.raises(MeshFormatError):
        load_mesh(tmp_path / "missing.off")
    bad = tmp_path / "bad.off"
    bad.write_text("OFF\n4 nonsense\n")
    with pytest.raises(MeshFormatError):
        load_mesh(bad)
    with pytest.raises(MeshFormatError):
        load_mesh(tmp_path / "wrong.stl")


def test_surface_json_export(grid):
    doc = surface_to_json(grid)
    assert set(doc) == {"n", "areas", "stiffness", "kbar"}
    assert doc["n"] == grid.n
    assert len(doc["areas"]) == grid.n
    S = sp.coo_matrix(
        (
            [t[2] for t in doc["stiffness"]],
            ([t[0] for t in doc["stiffness"]], [t[1] for t in doc["stiffness"]]),
        ),
        shape=(grid.n, grid.n),
    )
    assert abs(S.tocsr() - grid.stiffness).max() <= 1e-15
