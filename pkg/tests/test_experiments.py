import csv
import json
import math

import numpy as np
import pytest

from biharm import experiments as ex
from biharm.assemble import BoundaryData, DGForms, assemble_system
from biharm.mesh import build_unit_mesh, unit_hierarchy
from biharm.polyspace import orthonormalize, simplex_quadrature
from biharm.recon import build_reconstruction


def _boundary_points(dim, k, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.random((k, dim))
    axis = rng.integers(dim, size=k)
    side = rng.integers(2, size=k).astype(float)
    pts[np.arange(k), axis] = side
    nrm = np.zeros((k, dim))
    nrm[np.arange(k), axis] = 2 * side - 1
    return pts, nrm


def test_example1_values():
    case = ex.case_example1()
    assert case.u(np.array([0.5, 0.5])) == pytest.approx(1.0)
    pts, nrm = _boundary_points(2, 50)
    assert np.abs(np.einsum("kd,kd->k", case.grad(pts), nrm)).max() < 1e-12
    assert np.abs(case.u(pts)).max() < 1e-12
    assert case.bc is None


@pytest.mark.parametrize("name", ["ex1", "ex2"])
def test_load_matches_finite_differences(name):
    assert ex.check_load(ex.CASES[name]()) < 1e-5


@pytest.mark.parametrize("name", ["ex1", "ex2"])
def test_closed_form_derivatives(name):
    case = ex.CASES[name]()
    x = np.random.default_rng(1).uniform(0.1, 0.9, (20, case.dim))
    step = 1e-5
    for a in range(case.dim):
        e = np.zeros(case.dim)
        e[a] = step
        fd = (case.u(x + e) - case.u(x - e)) / (2 * step)
        assert np.allclose(fd, case.grad(x)[:, a], atol=1e-8)
        fdg = (case.grad(x + e) - case.grad(x - e)) / (2 * step)
        assert np.allclose(fdg, case.hess(x)[:, :, a], atol=1e-7)
    assert np.allclose(np.trace(case.hess(x), axis1=-2, axis2=-1), case.laplacian(x))


def test_example2_eigenfunction():
    case = ex.case_example2()
    x = np.random.default_rng(2).uniform(0.05, 0.95, (30, 3))
    assert np.allclose(case.f(x) / case.u(x), 9 * np.pi ** 4)
    pts, nrm = _boundary_points(3, 50)
    assert np.abs(case.u(pts)).max() < 1e-12
    face = pts[:, 0] == 0
    left = pts[face]
    assert np.allclose(case.bc.g2(left, nrm[face]),
                       -np.pi * np.sin(np.pi * left[:, 1]) * np.sin(np.pi * left[:, 2]))


def test_example1_norm():
    # int_0^1 sin^4(pi x) dx = 3/8 in each direction
    assert ex.exact_l2_norm(ex.case_example1()) == pytest.approx(0.375, rel=1e-10)


def test_zero_solution_error_is_norm():
    case = ex.case_example1()
    recon = build_reconstruction(build_unit_mesh(2, 8), 2)
    l2, energy = ex.measure_errors(case, recon, np.zeros((recon.mesh.num_elements, 6)))
    assert l2 == pytest.approx(0.375, rel=1e-8)
    # u has no jumps, so the energy error of zero is ||Lap u|| by independent quadrature
    pts, w = simplex_quadrature(2, 14).map_to(recon.mesh.element_points)
    assert energy == pytest.approx(math.sqrt(float((w * case.laplacian(pts) ** 2).sum())), rel=1e-10)


def test_interpolant_converges_at_optimal_rate():
    case = ex.case_example1()
    errs = []
    for n in (8, 16, 32):
        mesh = unit_hierarchy(2, n).finest
        recon = build_reconstruction(mesh, 2)
        errs.append(ex.measure_errors(case, recon, recon.apply(case.u(mesh.vertices)))[0])
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(rates - 3) < 0.4)


def test_boundary_values_match_clamped_data():
    def u(x):
        return 1 + x[..., 0] + 0.5 * x[..., 1] ** 2

    def grad(x):
        return np.stack([np.ones(x.shape[:-1]), x[..., 1]], -1)

    mesh = build_unit_mesh(2, 4)
    s = assemble_system(mesh, 2, lambda x: np.zeros(x.shape[:-1]), bc=BoundaryData.from_solution(u, grad))
    x = np.linalg.solve(s.A.toarray(), s.b)
    vals = s.recon.vertex_values(s.coefficients(x))
    bnodes = set(mesh.boundary_nodes.tolist())
    for k, tri in enumerate(mesh.elements):
        for j, v in enumerate(tri):
            if v in bnodes:
                assert vals[k, j] == pytest.approx(u(mesh.vertices[v]), abs=1e-12)


def test_preconditioners_agree():
    case = ex.case_example1()
    hier = unit_hierarchy(2, 16)
    s = assemble_system(hier.finest, 2, case.f)
    xa, _ = ex.solve_system(s, "pcg-al", hierarchy=hier)
    xm, _ = ex.solve_system(s, "pcg-mg1", hierarchy=hier)
    d = xa - xm
    assert math.sqrt(d @ (s.A @ d)) <= 1e-7 * math.sqrt(xa @ (s.A @ xa))


def test_unknown_solver():
    s = assemble_system(build_unit_mesh(2, 4), 2, ex.case_example1().f)
    with pytest.raises(ValueError):
        ex.solve_system(s, "gmres")


def test_convergence_table_and_csv(tmp_path):
    tab = ex.run_convergence_study(ex.case_example1(), 2, [8, 16], solvers=("direct", "cg"))
    rows = tab.to_rows()
    assert [r["n"] for r in rows] == [8, 16]
    assert rows[1]["l2_rate"] == pytest.approx(math.log2(rows[0]["l2_error"] / rows[1]["l2_error"]))
    assert tab.solvers() == ["direct", "cg"]
    assert rows[0]["iters_cg"] > 0 and rows[0]["error"] == ""
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    ex.write_csv(a, [{k: v for k, v in r.items() if k != "seconds"} for r in rows])
    ex.write_csv(b, [{k: v for k, v in r.items() if k != "seconds"} for r in rows])
    assert a.read_bytes() == b.read_bytes()
    with open(a) as fh:
        back = list(csv.DictReader(fh))
    assert float(back[1]["l2_error"]) == rows[1]["l2_error"]


def test_failures_recorded_in_row():
    tab = ex.run_convergence_study(ex.case_example1(), 2, [4], solvers=("cg",), max_iters=1,
                                   conditions=False)
    assert "not converged" in tab.rows[0].error


def test_dmt_c1_function_has_no_excess():
    mesh = build_unit_mesh(2, 4)
    basis = orthonormalize(mesh, 2)
    forms = DGForms(mesh, basis)
    c = basis.project(lambda x: x[..., 0] ** 2 + x[..., 1] ** 2)
    t = forms.norm_terms(c, hessian=True)
    # D^2 v = 2 I: ||D^2 v||^2 = 8, ||Lap v||^2 = 16, interior jumps vanish
    assert t["hess"] == pytest.approx(8.0, rel=1e-12)
    assert t["lap"] == pytest.approx(16.0, rel=1e-12)
    assert t["jump0_interior"] < 1e-20
    c = basis.project(lambda x: x[..., 0] * x[..., 1])
    t = forms.norm_terms(c, hessian=True)
    assert t["hess"] == pytest.approx(2.0, rel=1e-12) and t["lap"] < 1e-20


def test_dmt_ratio_finite_and_stable():
    vals = [ex.run_dmt_check(build_unit_mesh(2, n), 2, trials=20) for n in (4, 8, 16)]
    assert all(np.isfinite(vals))
    assert max(vals[1:]) <= 1.25 * vals[0]


def test_dmt_rejects_bad_trials():
    with pytest.raises(ValueError):
        ex.run_dmt_check(build_unit_mesh(2, 2), 2, trials=0)


def test_lambda_study_rows():
    rows = ex.run_lambda_study(build_unit_mesh(2, 8), 2, [6, 9, 12])
    assert [r["nm"] for r in rows] == [6, 9, 12]
    assert math.isnan(rows[0]["lambda_m"]) and rows[0]["error"]
    assert rows[1]["lambda_m"] >= 1 and rows[1]["error"] == ""
    assert ex.nm_sweep(2, 3) == list(range(12, 26))


def test_manifest_roundtrip(tmp_path):
    man = ex.run_manifest({"m": 2, "seed": 7, "n": np.array([8, 16])}, 1.5, {"note": np.float64(2)})
    path = tmp_path / "run.json"
    ex.write_json(path, man)
    back = json.loads(path.read_text())
    assert back["seed"] == 7 and back["config"]["n"] == [8, 16] and back["note"] == 2.0
    assert set(back["versions"]) == {"biharm", "numpy", "scipy", "python"}
