"""Manufactured-solution studies: convergence, conditioning and iteration
tables for the interface and fictitious-domain discretizations.

All runs are deterministic; table emission carries no timestamps, so
rerunning a configuration reproduces the output files byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .assembly import (AVERAGE_HARMONIC, LENGTH_GLOBAL, ProblemCoefficients,
                       TransformedSystem, all_gradients, assemble_fd,
                       assemble_interface, build_L, build_L_fd,
                       dirichlet_values, transform)
from .geometry import (NEG, POS, SphereLevelSet, TET_RULE_LAM, TET_RULE_W,
                       build_cut_info, classify)
from .mesh import MeshHierarchy
from .solver import (PRECONDITIONER_KINDS, PreconditionerSettings,
                     estimate_condition, make_preconditioner, pcg)
from .space import FICTITIOUS, INTERFACE, build_dof_layout, build_index_sets

COND_PER_LEVEL = "per-level"
COND_METHODS = (COND_PER_LEVEL, "auto", "dense", "lanczos")

# dense eigensolves below this level, Lanczos above (per-level policy)
DENSE_MAX_LEVEL = 1


@dataclass(frozen=True)
class ManufacturedSolution:
    """Closed-form solution bundle for one study problem.

    u(points, side) and grad_u(points, side) evaluate the exact solution and
    its gradient; f(points) the volume load.  g is the boundary datum in the
    shape the matching assembler expects: per-side box values for the
    interface problem, a single-argument trace for the fictitious domain.
    """

    u: callable
    grad_u: callable
    f: callable
    g: callable


def _cubic_parts(pts, x0):
    xh = pts - x0
    p = 3.0 * xh[:, 0] ** 2 * xh[:, 1] - xh[:, 1] ** 3
    gp = np.stack([6.0 * xh[:, 0] * xh[:, 1],
                   3.0 * xh[:, 0] ** 2 - 3.0 * xh[:, 1] ** 2,
                   np.zeros(pts.shape[0])], axis=1)
    r2 = np.sum(xh * xh, axis=1)
    return xh, p, gp, r2, np.exp(1.0 - r2)


def interface_solution(x0, alpha1: float, alpha2: float) -> ManufacturedSolution:
    """Piecewise solution vanishing on the unit sphere around x0.

    u_i = (3 xh_1^2 xh_2 - xh_2^3)(exp(1-|xh|^2) - 1) / alpha_i with
    xh = x - x0; both interface conditions hold because the cubic factor is
    harmonic and u_i is alpha_i-scaled, and the load is side-independent.
    """
    x0 = np.asarray(x0, dtype=float)
    alphas = {1: alpha1, 2: alpha2}

    def u(pts, side):
        _, p, _, _, E = _cubic_parts(np.asarray(pts, dtype=float), x0)
        return p * (E - 1.0) / alphas[side]

    def grad_u(pts, side):
        xh, p, gp, _, E = _cubic_parts(np.asarray(pts, dtype=float), x0)
        return (gp * (E - 1.0)[:, None] - 2.0 * (p * E)[:, None] * xh) \
            / alphas[side]

    def f(pts):
        _, p, _, r2, E = _cubic_parts(np.asarray(pts, dtype=float), x0)
        return p * E * (18.0 - 4.0 * r2)

    return ManufacturedSolution(u=u, grad_u=grad_u, f=f, g=u)


def fictitious_solution(x0) -> ManufacturedSolution:
    """One-sided solution u = (3 xh_1^2 xh_2 - xh_2^3) exp(1-|xh|^2) with
    load f = u (18 - 4|xh|^2); g is the trace of u on the sphere."""
    x0 = np.asarray(x0, dtype=float)

    def u(pts, side=1):
        _, p, _, _, E = _cubic_parts(np.asarray(pts, dtype=float), x0)
        return p * E

    def grad_u(pts, side=1):
        xh, p, gp, _, E = _cubic_parts(np.asarray(pts, dtype=float), x0)
        return E[:, None] * (gp - 2.0 * p[:, None] * xh)

    def f(pts):
        _, p, _, r2, E = _cubic_parts(np.asarray(pts, dtype=float), x0)
        return p * E * (18.0 - 4.0 * r2)

    return ManufacturedSolution(u=u, grad_u=grad_u, f=f,
                                g=lambda pts: u(pts))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a study run depends on; JSON round-trippable."""

    problem: str = INTERFACE
    max_level: int = 3
    x0: tuple = (0.001, 0.002, 0.003)
    deltas: tuple = (0.0, 0.01, 0.02, 0.03, 0.04, 0.05)
    delta_level: int = 2
    alpha1: float = 1.0
    alpha2: float = 10.0
    gamma: float = 10.0
    beta: float = 0.1
    alpha_bar_rule: str = AVERAGE_HARMONIC
    nitsche_length_rule: str | None = None
    ghost_length_rule: str = LENGTH_GLOBAL
    tol: float = 1e-6
    max_iter: int = 1000
    preconditioners: tuple = PRECONDITIONER_KINDS
    base_order: int = 4
    mg_cycles: int = 3
    strip_sweeps: int | None = None
    cond_method: str = COND_PER_LEVEL
    output_dir: str = "results"

    def __post_init__(self):
        if self.problem not in (INTERFACE, FICTITIOUS):
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.max_level < 0 or self.delta_level < 0:
            raise ValueError("levels must be nonnegative")
        if len(self.x0) != 3:
            raise ValueError("x0 must have three components")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("invalid solver controls")
        if not self.preconditioners:
            raise ValueError("at least one preconditioner required")
        unknown = set(self.preconditioners) - set(PRECONDITIONER_KINDS)
        if unknown:
            raise ValueError(f"unknown preconditioners {sorted(unknown)}")
        if self.cond_method not in COND_METHODS:
            raise ValueError(f"unknown condition method {self.cond_method!r}")
        if self.base_order < 1:
            raise ValueError("quadrature order must be positive")
        # delegate coefficient validation
        self.coefficients()

    def coefficients(self) -> ProblemCoefficients:
        return ProblemCoefficients(
            alpha1=self.alpha1, alpha2=self.alpha2, gamma=self.gamma,
            beta=self.beta, alpha_bar_rule=self.alpha_bar_rule,
            nitsche_length_rule=self.nitsche_length_rule,
            ghost_length_rule=self.ghost_length_rule)

    def settings(self) -> PreconditionerSettings:
        return PreconditionerSettings(mg_cycles=self.mg_cycles,
                                      strip_sweeps=self.strip_sweeps)

    def to_file(self, path):
        data = {k: list(v) if isinstance(v, tuple) else v
                for k, v in self.__dict__.items()}
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True)
                              + "\n")

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text())
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        for key in ("x0", "deltas", "preconditioners"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class ErrorNorms:
    l2: float
    h1_semi: float
    h1_full: float


@dataclass
class LevelResult:
    """One study row plus the transformed system it came from."""

    level: int
    h: float
    N0: int
    N1: int
    errors: ErrorNorms
    kappa2: float
    iterations: dict
    delta: float | None = None
    tsys: TransformedSystem = field(repr=False, default=None)


@dataclass
class StudyResult:
    problem: str
    config: ExperimentConfig
    rows: list

    def row_dicts(self) -> list:
        """Flat per-row dictionaries with convergence orders filled in."""
        out = []
        prev = None
        for r in self.rows:
            d = {"level": r.level, "h": r.h, "N0": r.N0, "N1": r.N1,
                 "l2": r.errors.l2, "h1_semi": r.errors.h1_semi,
                 "h1_full": r.errors.h1_full, "kappa2": r.kappa2}
            if r.delta is not None:
                d["delta"] = r.delta
            if prev is not None and r.delta is None:
                for name in ("l2", "h1_semi", "h1_full"):
                    d[name + "_order"] = float(
                        np.log2(getattr(prev.errors, name)
                                / getattr(r.errors, name)))
            for kind in self.config.preconditioners:
                d["it_" + kind] = r.iterations[kind]
            out.append(d)
            prev = r
        return out


def _expand_side_values(mesh, layout, y, side, lift):
    """Vertex values of the side restriction of the solved function.

    y is the side-block coefficient vector; eliminated box-boundary slots
    are filled from the Dirichlet lift.
    """
    dof = layout.v1_dof if side == 1 else layout.v2_dof
    verts = layout.v1_vertices if side == 1 else layout.v2_vertices
    vals = lift[:, side - 1].copy()
    vals[verts] = y[dof[verts]]
    return vals


def _accumulate_full(mesh, grads, sel, vals, sol, side, acc):
    if sel.size == 0:
        return
    verts = mesh.tets[sel]
    coords = mesh.vertices[verts]
    pts = np.einsum("qi,mix->mqx", TET_RULE_LAM, coords)
    flat = pts.reshape(-1, 3)
    ue = np.asarray(sol.u(flat, side)).reshape(sel.size, -1)
    uh = np.einsum("qi,mi->mq", TET_RULE_LAM, vals[verts])
    ge = np.asarray(sol.grad_u(flat, side)).reshape(sel.size, -1, 3)
    gh = np.einsum("mix,mi->mx", grads[sel], vals[verts])
    w = mesh.volumes[sel, None] * TET_RULE_W[None, :]
    acc[0] += float(np.sum(w * (ue - uh) ** 2))
    diff = ge - gh[:, None, :]
    acc[1] += float(np.sum(w * np.einsum("mqx,mqx->mq", diff, diff)))


def _accumulate_cut(mesh, grads, cutinfo, vals, sol, side, acc):
    if side == 1:
        pts, w, off = cutinfo.vpts1, cutinfo.vw1, cutinfo.voff1
    else:
        pts, w, off = cutinfo.vpts2, cutinfo.vw2, cutinfo.voff2
    if pts.shape[0] == 0:
        return
    owner = np.repeat(np.arange(cutinfo.n_cut), np.diff(off))
    tets = cutinfo.cut_tets[owner]
    G = grads[tets]
    lam = np.einsum("pix,px->pi",
                    G, pts - mesh.vertices[mesh.tets[tets, 0]])
    lam[:, 0] += 1.0
    nodal = vals[mesh.tets[tets]]
    uh = np.einsum("pi,pi->p", lam, nodal)
    ue = np.asarray(sol.u(pts, side))
    gh = np.einsum("pix,pi->px", G, nodal)
    ge = np.asarray(sol.grad_u(pts, side))
    acc[0] += float(w @ (ue - uh) ** 2)
    diff = ge - gh
    acc[1] += float(w @ np.einsum("px,px->p", diff, diff))


def error_norms(mesh, cutinfo, layout, y, sol) -> ErrorNorms:
    """L2 and H1 errors of the solved side-block coefficient vector y.

    Integration runs over both physical subdomains for the interface
    problem and over the inside region only for the fictitious domain,
    using the same cut quadrature as the assembly.
    """
    grads = all_gradients(mesh)
    acc = [0.0, 0.0]
    if layout.problem == INTERFACE:
        lift = dirichlet_values(mesh, sol.g)
        vals1 = _expand_side_values(mesh, layout, y, 1, lift)
        vals2 = _expand_side_values(mesh, layout, y, 2, lift)
        neg = np.flatnonzero(cutinfo.tet_class == NEG)
        pos = np.flatnonzero(cutinfo.tet_class == POS)
        _accumulate_full(mesh, grads, neg, vals1, sol, 1, acc)
        _accumulate_full(mesh, grads, pos, vals2, sol, 2, acc)
        _accumulate_cut(mesh, grads, cutinfo, vals1, sol, 1, acc)
        _accumulate_cut(mesh, grads, cutinfo, vals2, sol, 2, acc)
    else:
        vals1 = np.zeros(mesh.n_vertices)
        vals1[layout.v1_vertices] = y[layout.v1_dof[layout.v1_vertices]]
        neg = np.flatnonzero(cutinfo.tet_class == NEG)
        _accumulate_full(mesh, grads, neg, vals1, sol, 1, acc)
        _accumulate_cut(mesh, grads, cutinfo, vals1, sol, 1, acc)
    l2 = float(np.sqrt(acc[0]))
    semi = float(np.sqrt(acc[1]))
    return ErrorNorms(l2=l2, h1_semi=semi,
                      h1_full=float(np.sqrt(acc[0] + acc[1])))


def _cond_method_for(config, level, dim):
    if config.cond_method == COND_PER_LEVEL:
        return "dense" if level <= DENSE_MAX_LEVEL else "lanczos"
    return config.cond_method


def _interface_active_sets(hierarchy):
    return [np.flatnonzero(~m.boundary_vertex_flags)
            for m in hierarchy.levels]


def _fd_active_sets(hierarchy, levelset):
    out = []
    for m in hierarchy.levels:
        _, snapped = classify(m, levelset)
        out.append(np.flatnonzero(snapped < 0.0))
    return out


def _solve_level(mesh, cutinfo, layout, config, sol, hierarchy, active,
                 delta=None) -> LevelResult:
    coeffs = config.coefficients()
    if layout.problem == INTERFACE:
        A, b = assemble_interface(mesh, cutinfo, layout, coeffs, sol.f, sol.g)
        L = build_L(layout)
    else:
        A, b = assemble_fd(mesh, cutinfo, layout, coeffs, sol.f, sol.g)
        L = build_L_fd(layout)
    tsys = transform(A, b, L, layout)

    iterations = {}
    first_solution = None
    for kind in config.preconditioners:
        P = make_preconditioner(kind, tsys, hierarchy=hierarchy,
                                active_sets=active,
                                settings=config.settings())
        try:
            xhat, rep = pcg(tsys.Ahat, tsys.bhat, P, tol=config.tol,
                            max_iter=config.max_iter, level=mesh.level,
                            delta=delta)
        except (RuntimeError, ValueError) as exc:
            where = f"level {mesh.level}" + \
                (f", delta {delta}" if delta is not None else "")
            raise RuntimeError(f"{kind} solve failed at {where}: {exc}") \
                from exc
        iterations[kind] = rep.iterations
        if first_solution is None:
            first_solution = xhat

    est = estimate_condition(
        tsys.Ahat, method=_cond_method_for(config, mesh.level,
                                           tsys.Ahat.shape[0]))
    errors = error_norms(mesh, cutinfo, layout, L @ first_solution, sol)
    return LevelResult(level=mesh.level, h=mesh.h, N0=layout.N0,
                       N1=layout.N1, errors=errors, kappa2=est.kappa,
                       iterations=iterations, delta=delta, tsys=tsys)


def build_system(config: ExperimentConfig, level: int = None
                 ) -> TransformedSystem:
    """Assemble and transform the configured problem at one level."""
    if level is None:
        level = config.max_level
    mesh = MeshHierarchy.build(level).levels[level]
    x0 = np.asarray(config.x0, dtype=float)
    cutinfo = build_cut_info(mesh, SphereLevelSet(center=x0),
                             base_order=config.base_order)
    coeffs = config.coefficients()
    if config.problem == INTERFACE:
        sol = interface_solution(x0, config.alpha1, config.alpha2)
        layout = build_dof_layout(build_index_sets(mesh, cutinfo, INTERFACE))
        A, b = assemble_interface(mesh, cutinfo, layout, coeffs, sol.f, sol.g)
        L = build_L(layout)
    else:
        sol = fictitious_solution(x0)
        layout = build_dof_layout(build_index_sets(mesh, cutinfo, FICTITIOUS))
        A, b = assemble_fd(mesh, cutinfo, layout, coeffs, sol.f, sol.g)
        L = build_L_fd(layout)
    return transform(A, b, L, layout)


def run_interface_study(config: ExperimentConfig = None) -> StudyResult:
    """Level sweep of the interface problem: dimensions, errors, conditioning
    and PCG iteration counts for every configured preconditioner."""
    if config is None:
        config = ExperimentConfig()
    if config.problem != INTERFACE:
        config = replace(config, problem=INTERFACE)
    hierarchy = MeshHierarchy.build(config.max_level)
    x0 = np.asarray(config.x0, dtype=float)
    sol = interface_solution(x0, config.alpha1, config.alpha2)
    levelset = SphereLevelSet(center=x0)
    rows = []
    for lvl, mesh in enumerate(hierarchy.levels):
        cutinfo = build_cut_info(mesh, levelset, base_order=config.base_order)
        layout = build_dof_layout(build_index_sets(mesh, cutinfo, INTERFACE))
        sub = hierarchy.truncated(lvl)
        active = _interface_active_sets(sub)
        rows.append(_solve_level(mesh, cutinfo, layout, config, sol,
                                 sub, active))
    return StudyResult(problem=INTERFACE, config=config, rows=rows)


def run_delta_sweep(config: ExperimentConfig = None) -> StudyResult:
    """Interface-position robustness: the sphere midpoint moves to
    (delta, 2 delta, 3 delta) at a fixed refinement level."""
    if config is None:
        config = ExperimentConfig()
    hierarchy = MeshHierarchy.build(config.delta_level)
    mesh = hierarchy.levels[config.delta_level]
    active = _interface_active_sets(hierarchy)
    rows = []
    for delta in config.deltas:
        x0 = np.array([delta, 2.0 * delta, 3.0 * delta])
        sol = interface_solution(x0, config.alpha1, config.alpha2)
        cutinfo = build_cut_info(mesh, SphereLevelSet(center=x0),
                                 base_order=config.base_order)
        layout = build_dof_layout(build_index_sets(mesh, cutinfo, INTERFACE))
        rows.append(_solve_level(mesh, cutinfo, layout, config, sol,
                                 hierarchy, active, delta=float(delta)))
    return StudyResult(problem=INTERFACE, config=config, rows=rows)


def run_fd_study(config: ExperimentConfig = None) -> StudyResult:
    """Level sweep of the fictitious-domain problem (uniform refinement)."""
    if config is None:
        config = ExperimentConfig(problem=FICTITIOUS)
    if config.problem != FICTITIOUS:
        config = replace(config, problem=FICTITIOUS)
    hierarchy = MeshHierarchy.build(config.max_level)
    x0 = np.asarray(config.x0, dtype=float)
    sol = fictitious_solution(x0)
    levelset = SphereLevelSet(center=x0)
    rows = []
    for lvl, mesh in enumerate(hierarchy.levels):
        cutinfo = build_cut_info(mesh, levelset, base_order=config.base_order)
        layout = build_dof_layout(build_index_sets(mesh, cutinfo, FICTITIOUS))
        sub = hierarchy.truncated(lvl)
        active = _fd_active_sets(sub, levelset)
        if not np.array_equal(active[-1], layout.x0_vertices):
            raise RuntimeError("multigrid vertex set disagrees with the "
                               "interior block layout")
        rows.append(_solve_level(mesh, cutinfo, layout, config, sol,
                                 sub, active))
    return StudyResult(problem=FICTITIOUS, config=config, rows=rows)


_FORMATS = {"h": "{:.6g}", "l2": "{:.6e}", "h1_semi": "{:.6e}",
            "h1_full": "{:.6e}", "kappa2": "{:.4e}", "delta": "{:.2f}",
            "l2_order": "{:.3f}", "h1_semi_order": "{:.3f}",
            "h1_full_order": "{:.3f}"}


def _fmt(key, value):
    if key in _FORMATS:
        return _FORMATS[key].format(value)
    return str(value)


def _columns(rows):
    base = ["delta", "level", "h", "N0", "N1", "l2", "l2_order", "h1_semi",
            "h1_semi_order", "h1_full", "h1_full_order", "kappa2"]
    cols = [c for c in base if any(c in r for r in rows)]
    for r in rows:
        cols += [c for c in r if c.startswith("it_") and c not in cols]
    return cols


def write_tables(result: StudyResult, directory, name) -> list:
    """Emit one CSV and one Markdown rendering of the study rows.

    Returns the written paths.  Output is deterministic so repeated runs of
    the same configuration reproduce identical files.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = result.row_dicts()
    cols = _columns(rows)

    csv_path = directory / f"{name}.csv"
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(_fmt(c, r[c]) if c in r else "" for c in cols))
    csv_path.write_text("\n".join(lines) + "\n")

    md_path = directory / f"{name}.md"
    key = "delta" if any("delta" in r for r in rows) else "level"
    sections = [
        ("Dimensions", [key, "h", "N0", "N1"]),
        ("Discretization errors",
         [key, "l2", "l2_order", "h1_semi", "h1_semi_order", "h1_full",
          "h1_full_order"]),
        ("Condition number and iterations",
         [key, "kappa2"] + [c for c in cols if c.startswith("it_")]),
    ]
    out = [f"# {name.replace('_', ' ')}", ""]
    for title, wanted in sections:
        use = [c for c in wanted if c in cols]
        out += [f"## {title}", "", "| " + " | ".join(use) + " |",
                "|" + "|".join("---" for _ in use) + "|"]
        for r in rows:
            out.append("| " + " | ".join(
                _fmt(c, r[c]) if c in r else "" for c in use) + " |")
        out.append("")
    md_path.write_text("\n".join(out))
    return [csv_path, md_path]
