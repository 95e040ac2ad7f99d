"""Manufactured-solution, error-norm, study-driver and CLI tests.

Symbolic differentiation provides the oracle for the closed-form solution
bundles; the study drivers run at levels 0-2 where everything is cheap.
"""

import numpy as np
import pytest
import sympy

from cutprec.cli import main
from cutprec.experiments import (ExperimentConfig, ManufacturedSolution,
                                 StudyResult, LevelResult, ErrorNorms,
                                 build_system, error_norms,
                                 fictitious_solution, interface_solution,
                                 run_delta_sweep, run_fd_study,
                                 run_interface_study, write_tables)
from cutprec.geometry import SphereLevelSet, build_cut_info
from cutprec.mesh import MeshHierarchy
from cutprec.solver import estimate_condition
from cutprec.space import (FICTITIOUS, INTERFACE, build_dof_layout,
                           build_index_sets)

X0 = np.array([0.001, 0.002, 0.003])
ALPHA1, ALPHA2 = 1.0, 10.0


def sphere_points(n, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 3))
    return X0 + v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def symbolic_bundle():
    """Independent symbolic model of the closed-form solutions."""
    x, y, z = sympy.symbols("x y z")
    xh = sympy.Matrix([x - X0[0], y - X0[1], z - X0[2]])
    p = 3 * xh[0] ** 2 * xh[1] - xh[1] ** 3
    E = sympy.exp(1 - xh.dot(xh))
    xyz = (x, y, z)

    def bundle(expr):
        grad = [sympy.diff(expr, s) for s in xyz]
        lap = sum(sympy.diff(expr, s, 2) for s in xyz)
        return (sympy.lambdify(xyz, expr, "numpy"),
                sympy.lambdify(xyz, grad, "numpy"),
                sympy.lambdify(xyz, sympy.simplify(lap), "numpy"))

    return {"fd": bundle(p * E),
            1: bundle(p * (E - 1) / ALPHA1),
            2: bundle(p * (E - 1) / ALPHA2)}


def test_interface_conditions_on_sphere():
    # [u] = 0 and [-alpha grad u] . n = 0 at 10^4 random sphere points
    sol = interface_solution(X0, ALPHA1, ALPHA2)
    pts = sphere_points(10_000)
    normals = pts - X0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    jump_u = sol.u(pts, 1) - sol.u(pts, 2)
    flux1 = ALPHA1 * np.einsum("px,px->p", sol.grad_u(pts, 1), normals)
    flux2 = ALPHA2 * np.einsum("px,px->p", sol.grad_u(pts, 2), normals)
    assert np.max(np.abs(jump_u)) <= 1e-12
    assert np.max(np.abs(flux1 - flux2)) <= 1e-12


def test_interface_solution_matches_symbolic(symbolic_bundle):
    sol = interface_solution(X0, ALPHA1, ALPHA2)
    rng = np.random.default_rng(3)
    pts = X0 + rng.uniform(-1.2, 1.2, size=(60, 3))
    cols = (pts[:, 0], pts[:, 1], pts[:, 2])
    for side in (1, 2):
        uref, gref, lref = symbolic_bundle[side]
        assert np.allclose(sol.u(pts, side), uref(*cols), atol=1e-12)
        gr = np.stack(np.broadcast_arrays(*gref(*cols)), axis=1)
        assert np.allclose(sol.grad_u(pts, side), gr, atol=1e-12)
        # the load is side independent: f = -alpha_i lap(u_i) on both sides
        alpha = ALPHA1 if side == 1 else ALPHA2
        assert np.allclose(sol.f(pts), -alpha * lref(*cols), atol=1e-10)


def test_fd_solution_matches_symbolic(symbolic_bundle):
    sol = fictitious_solution(X0)
    uref, gref, lref = symbolic_bundle["fd"]
    rng = np.random.default_rng(4)
    pts = X0 + rng.uniform(-1.1, 1.1, size=(60, 3))
    cols = (pts[:, 0], pts[:, 1], pts[:, 2])
    assert np.allclose(sol.u(pts), uref(*cols), atol=1e-12)
    gr = np.stack(np.broadcast_arrays(*gref(*cols)), axis=1)
    assert np.allclose(sol.grad_u(pts), gr, atol=1e-12)
    assert np.allclose(sol.f(pts), -lref(*cols), atol=1e-10)
    assert np.allclose(sol.g(pts), sol.u(pts), atol=1e-14)


def affine_solution(problem):
    c = np.array([0.3, -0.7, 0.2])

    def u(pts, side=1):
        return pts @ c + 0.5

    def grad_u(pts, side=1):
        return np.broadcast_to(c, (pts.shape[0], 3)).copy()

    g = u if problem == INTERFACE else (lambda pts: u(pts))
    return ManufacturedSolution(u=u, grad_u=grad_u,
                                f=lambda pts: np.zeros(pts.shape[0]), g=g)


@pytest.mark.parametrize("problem", [INTERFACE, FICTITIOUS])
def test_error_norms_affine_exact(problem):
    # P1 spaces reproduce affine functions on both integration paths
    mesh = MeshHierarchy.build(0).levels[0]
    cutinfo = build_cut_info(mesh, SphereLevelSet(center=X0))
    layout = build_dof_layout(build_index_sets(mesh, cutinfo, problem))
    sol = affine_solution(problem)
    y = np.zeros(layout.dim)
    y[layout.v1_dof[layout.v1_vertices]] = sol.u(
        mesh.vertices[layout.v1_vertices], 1)
    if problem == INTERFACE:
        y[layout.v2_dof[layout.v2_vertices]] = sol.u(
            mesh.vertices[layout.v2_vertices], 2)
    err = error_norms(mesh, cutinfo, layout, y, sol)
    assert err.l2 <= 1e-10
    assert err.h1_semi <= 1e-10
    assert err.h1_full <= 2e-10


def test_order_computation_is_log2_ratio():
    cfg = ExperimentConfig(max_level=1)
    rows = [LevelResult(level=k, h=0.75 / 2 ** k, N0=1, N1=1,
                        errors=ErrorNorms(l2=e, h1_semi=2 * e, h1_full=3 * e),
                        kappa2=1.0, iterations={k2: 5 for k2 in
                                                cfg.preconditioners})
            for k, e in enumerate([0.4, 0.1])]
    d = StudyResult(INTERFACE, cfg, rows).row_dicts()
    assert "l2_order" not in d[0]
    assert d[1]["l2_order"] == pytest.approx(2.0, abs=1e-14)
    assert d[1]["h1_semi_order"] == pytest.approx(2.0, abs=1e-14)
    assert d[1]["h1_full_order"] == pytest.approx(2.0, abs=1e-14)


def test_config_roundtrip_and_validation(tmp_path):
    cfg = ExperimentConfig(max_level=2, deltas=(0.0, 0.01), gamma=100.0,
                           beta=0.0, strip_sweeps=2)
    path = tmp_path / "cfg.json"
    cfg.to_file(path)
    assert ExperimentConfig.from_file(path) == cfg

    import json
    data = json.loads(path.read_text())
    data["typo_key"] = 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(data))
    with pytest.raises(ValueError, match="typo_key"):
        ExperimentConfig.from_file(bad)

    for kwargs in (dict(problem="stokes"), dict(tol=0.0),
                   dict(max_level=-1), dict(x0=(0.0, 0.0)),
                   dict(preconditioners=("Cholesky",)),
                   dict(cond_method="svd"), dict(base_order=0),
                   dict(preconditioners=()), dict(gamma=-1.0)):
        with pytest.raises(ValueError):
            ExperimentConfig(**kwargs)


@pytest.fixture(scope="module")
def tiny_interface_study():
    return run_interface_study(ExperimentConfig(max_level=0))


def test_emission_idempotent(tiny_interface_study, tmp_path):
    first = write_tables(tiny_interface_study, tmp_path, "study")
    before = [p.read_bytes() for p in first]
    second = write_tables(tiny_interface_study, tmp_path, "study")
    assert [p.read_bytes() for p in second] == before

    # a fresh run of the same configuration reproduces the bytes too
    again = run_interface_study(ExperimentConfig(max_level=0))
    third = write_tables(again, tmp_path / "again", "study")
    assert [p.read_bytes() for p in third] == before


def test_delta_zero_run_deterministic(tmp_path):
    cfg = ExperimentConfig(delta_level=0, deltas=(0.0,))
    a = write_tables(run_delta_sweep(cfg), tmp_path / "a", "sweep")
    b = write_tables(run_delta_sweep(cfg), tmp_path / "b", "sweep")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_study_row_contents(tiny_interface_study):
    row = tiny_interface_study.rows[0]
    assert (row.N0, row.N1) == (27, 27)
    assert set(row.iterations) == set(tiny_interface_study.config.
                                      preconditioners)
    assert all(n > 0 for n in row.iterations.values())
    assert row.kappa2 > 1.0
    assert row.tsys.Ahat.shape == (54, 54)


def test_delta_sweep_kappa_same_order_of_magnitude():
    # moving the cut position shifts kappa2 but not its magnitude
    cfg = ExperimentConfig(delta_level=1, deltas=(0.0, 0.05),
                           preconditioners=("BlockExact",))
    res = run_delta_sweep(cfg)
    k0, k5 = (r.kappa2 for r in res.rows)
    assert max(k0 / k5, k5 / k0) <= 4.0


def test_ghost_penalty_controls_conditioning():
    # dropping the ghost penalty (gamma raised to keep Nitsche coercive)
    # sends the condition number far above the stabilized value
    stab = build_system(ExperimentConfig(max_level=2))
    k_stab = estimate_condition(stab.Ahat, method="lanczos").kappa
    plain = build_system(ExperimentConfig(max_level=2, beta=0.0,
                                          gamma=100.0))
    est = estimate_condition(plain.Ahat, method="lanczos", budget=300)
    # exhausted budget yields a lower bound, enough for the comparison
    assert est.kappa >= k_stab


def test_fd_strip_dimension_growth():
    # the cut strip is a surface layer: dofs scale by ~4 per refinement
    cfg = ExperimentConfig(problem=FICTITIOUS, max_level=2,
                           preconditioners=("SGS",))
    res = run_fd_study(cfg)
    n1 = [r.N1 for r in res.rows]
    assert 3.0 <= n1[2] / n1[1] <= 5.0


def test_cli_interface_study(tmp_path, capsys):
    out = tmp_path / "tables"
    code = main(["interface-study", "--max-level", "0",
                 "--output-dir", str(out)])
    assert code == 0
    assert (out / "interface_study.csv").exists()
    assert (out / "interface_study.md").exists()
    header = (out / "interface_study.csv").read_text().splitlines()[0]
    assert header.startswith("level,h,N0,N1")
    assert "Dimensions" in capsys.readouterr().out


def test_cli_delta_sweep_and_fd_study(tmp_path):
    assert main(["delta-sweep", "--delta-level", "0", "--deltas", "0.0",
                 "--output-dir", str(tmp_path)]) == 0
    assert (tmp_path / "delta_sweep.csv").exists()
    assert main(["fd-study", "--max-level", "0",
                 "--output-dir", str(tmp_path)]) == 0
    assert (tmp_path / "fd_study.csv").exists()


def test_cli_cond(capsys):
    assert main(["cond", "--max-level", "0"]) == 0
    out = capsys.readouterr().out
    assert "kappa2(Ahat)" in out
    assert "kappa(DA^-1 Ahat)" in out
    assert "kappa(D1^-1 A1)" in out


def test_cli_export_matrices(tmp_path):
    target = tmp_path / "mats"
    assert main(["export-matrices", "--max-level", "0",
                 "--directory", str(target)]) == 0
    names = sorted(p.name for p in target.glob("*.mtx"))
    assert names == ["A.mtx", "A0.mtx", "A1.mtx", "Ahat.mtx", "L.mtx"]


def test_cli_config_file_with_overrides(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    ExperimentConfig(max_level=0, output_dir=str(tmp_path / "a")).to_file(
        cfg_path)
    code = main(["interface-study", "--config", str(cfg_path),
                 "--output-dir", str(tmp_path / "b")])
    assert code == 0
    assert not (tmp_path / "a").exists()
    assert (tmp_path / "b" / "interface_study.csv").exists()


def test_cli_rejects_bad_parameters(capsys):
    assert main(["interface-study", "--gamma", "-1.0"]) == 1
    assert "gamma" in capsys.readouterr().err
