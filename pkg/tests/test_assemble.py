import itertools

import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp
from scipy import integrate

from biharm.assemble import (BoundaryData, DGForms, assemble_AL, assemble_Am, assemble_mass,
                             assemble_rhs, assemble_rhs_inhomogeneous, assemble_system,
                             default_penalties)
from biharm.experiments import case_example1, case_example2
from biharm.mesh import build_unit_mesh, uniform_refine, unit_hierarchy
from biharm.polyspace import simplex_quadrature
from biharm.recon import build_reconstruction


def _zero(x):
    return np.zeros(x.shape[:-1])


@pytest.fixture(scope="module")
def sys4():
    return assemble_system(build_unit_mesh(2, 4), 2, _zero)


def _sym_err(a):
    a = a.toarray()
    return np.abs(a - a.T).max() / np.abs(a).max()


def test_symmetry_and_size(sys4):
    assert sys4.n_p == 9
    for mat in (sys4.A, sys4.M, sys4.AL):
        assert mat.shape == (9, 9)
        assert _sym_err(mat) < 1e-12


def test_size_independent_of_degree():
    mesh = build_unit_mesh(2, 4)
    sizes = {assemble_system(mesh, m, _zero).n_p for m in (2, 3)}
    assert sizes == {9}


def test_stiffness_positive_definite(sys4):
    assert np.linalg.eigvalsh(sys4.A.toarray())[0] > 0
    assert np.linalg.eigvalsh(sys4.M.toarray())[0] > 0
    assert np.linalg.eigvalsh(sys4.AL.toarray())[0] > 0


@pytest.mark.parametrize("dim, n", [(2, 4), (3, 2)])
def test_linear_path_is_scaled_low_order_form(dim, n):
    mesh = build_unit_mesh(dim, n)
    recon = build_reconstruction(mesh, 1, dim + 1)
    forms = DGForms(mesh, recon.basis)
    mu1, mu2 = 7.0, 3.0
    a = assemble_Am(recon, forms, mu1, mu2).toarray()
    al = assemble_AL(mesh).toarray()
    assert np.abs(a - mu2 * al).max() < 1e-12 * np.abs(a).max()


def _hand_low_order_entry(mesh, node):
    """Sum over edges of |e| h_e^-1 [d phi/dn]^2 for the hat function of ``node``, 2D."""
    grads = {}
    for k, tri in enumerate(mesh.elements):
        if node in tri:
            x = mesh.vertices[tri]
            mat = np.column_stack([np.ones(3), x])
            coef = np.linalg.solve(mat, (tri == node).astype(float))
            grads[k] = coef[1:]
    owners = {}
    for k, tri in enumerate(mesh.elements):
        for e in itertools.combinations(sorted(tri.tolist()), 2):
            owners.setdefault(e, []).append(k)
    total = 0.0
    for (a, b), ks in owners.items():
        t = mesh.vertices[b] - mesh.vertices[a]
        nrm = np.array([t[1], -t[0]]) / np.linalg.norm(t)
        side = [grads.get(k, np.zeros(2)) @ nrm for k in ks]
        jump = side[0] - side[1] if len(side) == 2 else side[0]
        # |e| / h_e = 1 for a straight edge
        total += jump ** 2
    return total


def test_low_order_single_node():
    mesh = build_unit_mesh(2, 2)
    al = assemble_AL(mesh).toarray()
    assert al.shape == (1, 1) and al[0, 0] > 0
    assert al[0, 0] == pytest.approx(_hand_low_order_entry(mesh, int(mesh.interior_nodes[0])),
                                     rel=1e-13)
    # 6 incident triangles, hat slopes 2 and 2*sqrt(2): the sum of squared jumps is 64
    assert al[0, 0] == pytest.approx(64.0, rel=1e-13)


def test_low_order_form_is_energy_norm():
    mesh = build_unit_mesh(2, 4)
    recon = build_reconstruction(mesh, 1, 3)
    forms = DGForms(mesh, recon.basis)
    al = assemble_AL(mesh)
    rng = np.random.default_rng(0)
    for _ in range(5):
        v = rng.standard_normal(al.shape[0])
        c = recon.apply_interior(v)
        assert forms.energy_norm(c) ** 2 == pytest.approx(v @ al @ v, rel=1e-12)
        t = forms.norm_terms(c)
        assert t["lap"] < 1e-20 and t["jump0"] < 1e-20


@pytest.mark.parametrize("dim", [2, 3])
def test_rediscretized_low_order_scaling(dim):
    coarse = build_unit_mesh(dim, 2 if dim == 3 else 4)
    fine, p = uniform_refine(coarse)
    pi = p[fine.interior_nodes][:, coarse.interior_nodes]
    ac, af = assemble_AL(coarse), assemble_AL(fine)
    rng = np.random.default_rng(1)
    for _ in range(20):
        v = rng.standard_normal(ac.shape[0])
        w = pi @ v
        assert (w @ af @ w) / (v @ ac @ v) == pytest.approx(2.0, rel=1e-12)


def test_mass_matrix(sys4):
    recon = sys4.recon
    mesh = recon.mesh
    pts, w = simplex_quadrature(2, 8).map_to(mesh.element_points)
    elems = np.arange(mesh.num_elements)
    ones = recon.apply_interior(np.ones(sys4.n_p))
    r1 = recon.basis.eval_coefficients(ones, elems, pts)
    row = sys4.M @ np.ones(sys4.n_p)
    for nu in range(sys4.n_p):
        e = np.zeros(sys4.n_p)
        e[nu] = 1.0
        phi = recon.basis.eval_coefficients(recon.apply_interior(e), elems, pts)
        assert row[nu] == pytest.approx(float((w * phi * r1).sum()), rel=1e-12, abs=1e-14)
    assert row.sum() == pytest.approx(float((w * r1 ** 2).sum()), rel=1e-12)
    assert np.abs((sys4.M - sys4.M.T).toarray()).max() < 1e-12


def test_mass_rayleigh_envelope():
    rng = np.random.default_rng(2)
    lows, highs = [], []
    for n in (4, 8, 16):
        mesh = build_unit_mesh(2, n)
        recon = build_reconstruction(mesh, 2)
        m = assemble_mass(recon)
        v = rng.standard_normal((100, m.shape[0]))
        q = np.einsum("ki,ki->k", v, (m @ v.T).T) / (v * v).sum(1) / mesh.h ** 2
        lows.append(q.min())
        highs.append(q.max() / recon.stats.lambda_m ** 2)
    assert min(lows) > 0.01 and max(highs) < 10.0
    assert max(lows) / min(lows) < 4 and max(highs) / min(highs) < 4


def test_zero_data_gives_zero_load():
    mesh = build_unit_mesh(2, 4)
    recon = build_reconstruction(mesh, 2)
    forms = DGForms(mesh, recon.basis)
    b, offset = assemble_rhs_inhomogeneous(recon, forms, _zero, BoundaryData.zero(), 1.0, 1.0)
    assert np.abs(b).max() == 0.0 and np.abs(offset).max() == 0.0


def test_unit_load_single_node():
    mesh = build_unit_mesh(2, 2)
    recon = build_reconstruction(mesh, 2)
    b = assemble_rhs(recon, lambda x: np.ones(x.shape[:-1]))
    pts, w = simplex_quadrature(2, 6).map_to(mesh.element_points)
    phi = recon.basis.eval_coefficients(recon.apply_interior(np.ones(1)),
                                        np.arange(mesh.num_elements), pts)
    assert b.shape == (1,)
    assert b[0] == pytest.approx(float((w * phi).sum()), rel=1e-13)


def test_example2_normal_data_on_left_face():
    bc = case_example2().bc
    pts = np.random.default_rng(4).random((10, 3))
    pts[:, 0] = 0.0
    nrm = np.tile([-1.0, 0.0, 0.0], (10, 1))
    expect = -np.pi * np.sin(np.pi * pts[:, 1]) * np.sin(np.pi * pts[:, 2])
    assert np.allclose(bc.g2(pts, nrm), expect, atol=1e-14)
    assert np.abs(bc.g1(pts)).max() < 1e-15


def test_boundary_face_integral_against_adaptive_quadrature():
    mesh = build_unit_mesh(3, 2)
    case = case_example2()
    recon = build_reconstruction(mesh, 2)
    forms = DGForms(mesh, recon.basis, quad_degree=16)
    mu1, mu2 = default_penalties(2)
    vec = forms.boundary_functional(case.bc, mu1, mu2).reshape(mesh.num_elements, -1)
    fel, fv = mesh.face_elements, mesh.face_vertices
    bnd = np.flatnonzero(fel[:, 1] < 0)
    owners = np.bincount(fel[bnd, 0], minlength=mesh.num_elements)
    # a face on x=0 whose element has no other boundary face
    face = next(f for f in bnd
                if np.allclose(mesh.vertices[fv[f]][:, 0], 0.0) and owners[fel[f, 0]] == 1)
    k = int(fel[face, 0])
    tri = mesh.vertices[fv[face]]
    h = mesh.face_diameters[face]
    loc = recon.basis.local(k)
    area2 = np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    for i in range(loc.size):
        def integrand(t, s):
            x = tri[0] + s * (tri[1] - tri[0]) + t * (tri[2] - tri[0])
            g2 = -np.pi * np.sin(np.pi * x[1]) * np.sin(np.pi * x[2])
            lap = sum(loc.evaluate(x[None], b)[0, i] for b in [(2, 0, 0), (0, 2, 0), (0, 0, 2)])
            dn = -loc.evaluate(x[None], (1, 0, 0))[0, i]
            return area2 * g2 * (-lap + mu2 * dn / h)

        ref, _ = integrate.dblquad(integrand, 0, 1, 0, lambda s: 1 - s,
                                   epsabs=1e-11, epsrel=1e-11)
        assert vec[k, i] == pytest.approx(ref, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("dim, m", [(2, 2), (2, 3), (3, 2)])
def test_polynomial_solution_reproduced(dim, m):
    mesh = build_unit_mesh(dim, 4 if dim == 2 else 2)
    coef = np.array([1.0, -2.0, 0.5][:dim])

    def u(x):
        return 1 + x @ coef + x[..., 0] * x[..., -1] - x[..., 0] ** 2

    def grad(x):
        g = np.broadcast_to(coef, x.shape).copy()
        g[..., 0] += x[..., -1] - 2 * x[..., 0]
        g[..., -1] += x[..., 0]
        return g

    sys_ = assemble_system(mesh, m, _zero, bc=BoundaryData.from_solution(u, grad))
    x = np.linalg.solve(sys_.A.toarray(), sys_.b)
    assert np.abs(x - u(mesh.vertices[mesh.interior_nodes])).max() < 1e-10


def test_energy_error_decreases():
    case = case_example1()
    errs = []
    for n in (8, 16):
        s = assemble_system(unit_hierarchy(2, n).finest, 2, case.f)
        x = np.linalg.solve(s.A.toarray(), s.b)
        from biharm.experiments import measure_errors
        errs.append(measure_errors(case, s.recon, s.coefficients(x))[1])
    assert errs[1] < 0.75 * errs[0]


def test_norm_ordering_and_trace_bound(sys4):
    rng = np.random.default_rng(3)
    forms, recon = sys4.forms, sys4.recon
    for _ in range(50):
        c = recon.apply_interior(rng.standard_normal(sys4.n_p))
        assert forms.energy_norm(c) <= forms.energy_norm(c, "energy_tilde")
    c = rng.standard_normal((recon.mesh.num_elements, recon.basis.size))
    hess = np.einsum("nqlab,nl->nqab", forms.vol_hess, c)
    tr = np.trace(hess, axis1=-2, axis2=-1)
    assert np.all(tr ** 2 <= 2 * (hess ** 2).sum((-2, -1)) * (1 + 1e-12))


def test_unknown_norm(sys4):
    with pytest.raises(ValueError):
        sys4.energy_norm(np.zeros(sys4.n_p), "bogus")


def test_matrix_market_roundtrip(tmp_path):
    case = case_example1()
    s = assemble_system(build_unit_mesh(2, 4), 2, case.f)
    paths = s.export(tmp_path)
    assert sorted(p.split("/")[-1] for p in paths) == ["A_L.mtx", "A_m.mtx", "M_m.mtx", "b.mtx"]
    for name, mat in (("A_m", s.A), ("M_m", s.M), ("A_L", s.AL)):
        back = sp.csr_array(scipy.io.mmread(tmp_path / f"{name}.mtx"))
        assert np.array_equal(back.toarray(), mat.toarray())
    b = np.asarray(scipy.io.mmread(tmp_path / "b.mtx")).ravel()
    assert np.array_equal(b, s.b)
