"""Stiffness/load assembly for the stabilized Nitsche cut discretizations.

Two variational forms are assembled on the side-block nodal basis delivered
by the space module:

* interface: a_h + N_h + G_h with per-side diffusion, cut-fraction averaged
  consistency terms, interface penalty and one-sided ghost penalties;
* fictitious domain: the one-sided form with boundary data imposed weakly
  on the zero level set.

Right-hand-side callables are vectorized: f(points) with points (n, 3)
returns (n,).  Interface Dirichlet data is g(points, side); fictitious
domain trace data is g(points).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.io import mmwrite

from .geometry import CUT, NEG, POS, CutInfo, TET_RULE_LAM, TET_RULE_W, \
    ghost_facets
from .mesh import Mesh
from .space import DofLayout, FICTITIOUS, INTERFACE

AVERAGE_MAX = "max"
AVERAGE_MEAN = "mean"
AVERAGE_HARMONIC = "harmonic"

LENGTH_GLOBAL = "global"
LENGTH_FACET = "facet"
LENGTH_ELEMENT = "element"


@dataclass(frozen=True)
class ProblemCoefficients:
    """Diffusion pair and stabilization weights.

    alpha_bar_rule picks the averaging of (alpha1, alpha2) used in the
    interface penalty scaling; the fictitious-domain form ignores the
    diffusion pair (unit coefficient).  The two length rules select the
    scale dividing the boundary penalty (nitsche_length_rule: global mesh
    size or element diameter) and the scale multiplying each ghost facet
    (ghost_length_rule: global mesh size or facet diameter).  On uniform
    meshes the choices are equivalent up to constants, but the constants
    feed the effective penalty, so each form carries its own default:
    nitsche_length_rule None resolves to the element diameter in the
    interface form and to the global mesh size in the fictitious-domain
    form.
    """

    alpha1: float = 1.0
    alpha2: float = 10.0
    gamma: float = 10.0
    beta: float = 0.1
    alpha_bar_rule: str = AVERAGE_HARMONIC
    nitsche_length_rule: str | None = None
    ghost_length_rule: str = LENGTH_GLOBAL

    def __post_init__(self):
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ValueError("diffusion coefficients must be positive")
        if self.gamma <= 0:
            raise ValueError("penalty parameter gamma must be positive")
        if self.beta < 0:
            raise ValueError("ghost penalty weight beta must be nonnegative")
        if self.alpha_bar_rule not in (AVERAGE_MAX, AVERAGE_MEAN,
                                       AVERAGE_HARMONIC):
            raise ValueError(f"unknown averaging rule {self.alpha_bar_rule!r}")
        if self.nitsche_length_rule not in (None, LENGTH_GLOBAL,
                                            LENGTH_ELEMENT):
            raise ValueError(
                f"unknown penalty length rule {self.nitsche_length_rule!r}")
        if self.ghost_length_rule not in (LENGTH_GLOBAL, LENGTH_FACET):
            raise ValueError(
                f"unknown ghost length rule {self.ghost_length_rule!r}")

    @property
    def alpha_bar(self) -> float:
        if self.alpha_bar_rule == AVERAGE_MAX:
            return max(self.alpha1, self.alpha2)
        if self.alpha_bar_rule == AVERAGE_HARMONIC:
            return 2.0 * self.alpha1 * self.alpha2 / (self.alpha1 + self.alpha2)
        return 0.5 * (self.alpha1 + self.alpha2)


@dataclass(frozen=True)
class TransformedSystem:
    """System in the split basis together with its side-block original.

    Ahat = L^T A L; A0/A1 are the leading/trailing principal blocks in the
    (x0, x1) ordering and D1 the diagonal of A1.
    """

    A: sp.csr_matrix
    b: np.ndarray
    L: sp.csr_matrix
    Ahat: sp.csr_matrix
    bhat: np.ndarray
    A0: sp.csr_matrix
    A1: sp.csr_matrix
    D1: np.ndarray
    layout: DofLayout


class _SystemAccumulator:
    """COO triplet buffer with symmetric elimination of prescribed dofs.

    Local blocks carry global dof ids, -1 marking eliminated slots whose
    prescribed values (lift) move to the right-hand side.
    """

    def __init__(self, ndof: int):
        self.ndof = ndof
        self._rows = []
        self._cols = []
        self._vals = []
        self.b = np.zeros(ndof)

    def add_local(self, local, dofs, lift=None):
        m, k = dofs.shape
        if m == 0:
            return
        free = dofs >= 0
        rows = np.broadcast_to(dofs[:, :, None], (m, k, k))
        cols = np.broadcast_to(dofs[:, None, :], (m, k, k))
        keep = free[:, :, None] & free[:, None, :]
        self._rows.append(rows[keep])
        self._cols.append(cols[keep])
        self._vals.append(local[keep])
        if not free.all():
            if lift is None:
                raise ValueError("eliminated dof without prescribed value")
            drop = free[:, :, None] & ~free[:, None, :]
            contrib = local * lift[:, None, :]
            np.add.at(self.b, rows[drop], -contrib[drop])

    def add_load(self, vals, dofs):
        free = dofs >= 0
        np.add.at(self.b, dofs[free], vals[free])

    def matrix(self) -> sp.csr_matrix:
        if self._rows:
            rows = np.concatenate(self._rows)
            cols = np.concatenate(self._cols)
            vals = np.concatenate(self._vals)
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
            vals = np.zeros(0)
        A = sp.coo_matrix((vals, (rows, cols)),
                          shape=(self.ndof, self.ndof)).tocsr()
        A.sort_indices()
        return A


def all_gradients(mesh: Mesh) -> np.ndarray:
    """Constant P1 shape gradients for every element, shape (nt, 4, 3)."""
    verts = mesh.vertices[mesh.tets]
    edges = verts[:, 1:, :] - verts[:, :1, :]
    inv = np.linalg.inv(np.transpose(edges, (0, 2, 1)))
    return np.concatenate([-inv.sum(axis=1, keepdims=True), inv], axis=1)


def element_diameters(mesh: Mesh) -> np.ndarray:
    """Longest edge per element."""
    verts = mesh.vertices[mesh.tets]
    pairs = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
    lengths = np.stack([np.linalg.norm(verts[:, a] - verts[:, b], axis=1)
                        for a, b in pairs], axis=1)
    return lengths.max(axis=1)


def is_symmetric(A: sp.spmatrix, tol: float = 1e-10) -> bool:
    """Entrywise symmetry check scaled by the largest magnitude entry."""
    diff = (A - A.T).tocoo()
    if diff.nnz == 0:
        return True
    scale = 1.0 + (np.abs(A.data).max() if A.nnz else 0.0)
    return float(np.abs(diff.data).max()) <= tol * scale


def dirichlet_values(mesh: Mesh, g) -> np.ndarray:
    """Per-side boundary data interpolated at box-boundary vertices.

    Returns (n_vertices, 2); rows of interior vertices are zero.
    """
    vals = np.zeros((mesh.n_vertices, 2))
    bnd = np.flatnonzero(mesh.boundary_vertex_flags)
    if bnd.size:
        pts = mesh.vertices[bnd]
        vals[bnd, 0] = np.asarray(g(pts, 1), dtype=float)
        vals[bnd, 1] = np.asarray(g(pts, 2), dtype=float)
    return vals


def _check_cut_rules(mesh: Mesh, cutinfo: CutInfo):
    cut = np.flatnonzero(cutinfo.tet_class == CUT)
    if cut.size != cutinfo.n_cut or not np.array_equal(cut, np.sort(cutinfo.cut_tets)):
        raise ValueError("cut rules do not cover the cut elements")
    if cutinfo.tet_class.shape[0] != mesh.n_tets:
        raise ValueError("classification does not match the mesh")


def _side_measures(mesh: Mesh, cutinfo: CutInfo):
    meas1 = np.where(cutinfo.tet_class == NEG, mesh.volumes, 0.0)
    meas2 = np.where(cutinfo.tet_class == POS, mesh.volumes, 0.0)
    meas1[cutinfo.cut_tets] = cutinfo.vol1
    meas2[cutinfo.cut_tets] = cutinfo.vol2
    return meas1, meas2


def _add_volume(acc, mesh, grads, meas, alpha, vdof, liftvals):
    sel = np.flatnonzero(meas > 0)
    if sel.size == 0:
        return
    local = np.einsum("tix,tjx->tij", grads[sel], grads[sel])
    local *= (alpha * meas[sel])[:, None, None]
    verts = mesh.tets[sel]
    lift = None if liftvals is None else liftvals[verts]
    acc.add_local(local, vdof[verts], lift)


def _nitsche_lengths(mesh, diam, tids, coeffs, default):
    rule = coeffs.nitsche_length_rule or default
    if rule == LENGTH_GLOBAL:
        return np.full(tids.shape[0], mesh.h)
    return diam[tids]


def _surface_batches(mesh, cutinfo, grads):
    """Group cut elements by interface point count; yield per-group geometry.

    Yields (cut-local ids, element ids, weights (m,p), barycentric values
    (m,p,4), shape normal derivatives (m,4)).
    """
    counts = np.diff(cutinfo.soff)
    for cnt in np.unique(counts):
        C = np.flatnonzero(counts == cnt)
        tids = cutinfo.cut_tets[C]
        idx = cutinfo.soff[C][:, None] + np.arange(cnt)[None, :]
        pts = cutinfo.spts[idx]
        w = cutinfo.sw[idx]
        v0 = mesh.vertices[mesh.tets[tids, 0]]
        lam = np.einsum("mix,mpx->mpi", grads[tids], pts - v0[:, None, :])
        lam[:, :, 0] += 1.0
        gn = np.einsum("mix,mx->mi", grads[tids], cutinfo.normals[C])
        yield C, tids, w, lam, gn


def _add_ghost(acc, mesh, cutinfo, grads, side, coeffs, vdof, liftvals):
    if coeffs.beta == 0.0:
        return
    fids = ghost_facets(mesh, cutinfo, side)
    if fids.size == 0:
        return
    fac = mesh.facets
    t0 = fac.tets[fids, 0]
    t1 = fac.tets[fids, 1]
    n = fac.normals[fids]
    d = np.concatenate([np.einsum("mix,mx->mi", grads[t0], n),
                        -np.einsum("mix,mx->mi", grads[t1], n)], axis=1)
    length = (mesh.h if coeffs.ghost_length_rule == LENGTH_GLOBAL
              else fac.diameters[fids])
    scale = coeffs.beta * length * fac.areas[fids]
    local = scale[:, None, None] * d[:, :, None] * d[:, None, :]
    verts = np.concatenate([mesh.tets[t0], mesh.tets[t1]], axis=1)
    lift = None if liftvals is None else liftvals[verts]
    acc.add_local(local, vdof[verts], lift)


def _add_full_loads(acc, mesh, sel, f, vdof):
    if sel.size == 0:
        return
    verts = mesh.vertices[mesh.tets[sel]]
    pts = np.einsum("qi,mix->mqx", TET_RULE_LAM, verts)
    fv = np.asarray(f(pts.reshape(-1, 3)), dtype=float).reshape(sel.size, -1)
    bloc = mesh.volumes[sel, None] * np.einsum(
        "q,mq,qi->mi", TET_RULE_W, fv, TET_RULE_LAM)
    acc.add_load(bloc, vdof[mesh.tets[sel]])


def _add_cut_loads(acc, mesh, cutinfo, grads, side, f, vdof):
    if side == 1:
        pts, w, off = cutinfo.vpts1, cutinfo.vw1, cutinfo.voff1
    else:
        pts, w, off = cutinfo.vpts2, cutinfo.vw2, cutinfo.voff2
    if pts.shape[0] == 0:
        return
    owner = np.repeat(np.arange(cutinfo.n_cut), np.diff(off))
    tids = cutinfo.cut_tets[owner]
    d = pts - mesh.vertices[mesh.tets[tids, 0]]
    lam = np.einsum("pix,px->pi", grads[tids], d)
    lam[:, 0] += 1.0
    fv = np.asarray(f(pts), dtype=float)
    acc.add_load((w * fv)[:, None] * lam, vdof[mesh.tets[tids]])


def assemble_interface(mesh: Mesh, cutinfo: CutInfo, layout: DofLayout,
                       coeffs: ProblemCoefficients, f, g):
    """Assemble the coupled two-sided system in the side-block basis.

    g(points, side) supplies the box-boundary Dirichlet data per side; the
    corresponding vertices are eliminated symmetrically.  Returns (A, b).
    """
    if layout.problem != INTERFACE:
        raise ValueError("layout does not describe the interface problem")
    _check_cut_rules(mesh, cutinfo)
    grads = all_gradients(mesh)
    diam = element_diameters(mesh)
    liftvals = dirichlet_values(mesh, g)
    acc = _SystemAccumulator(layout.dim)

    meas1, meas2 = _side_measures(mesh, cutinfo)
    _add_volume(acc, mesh, grads, meas1, coeffs.alpha1, layout.v1_dof,
                liftvals[:, 0])
    _add_volume(acc, mesh, grads, meas2, coeffs.alpha2, layout.v2_dof,
                liftvals[:, 1])

    pen = coeffs.alpha_bar * coeffs.gamma
    for C, tids, w, lam, gn in _surface_batches(mesh, cutinfo, grads):
        jump = np.concatenate([lam, -lam], axis=2)
        k1 = cutinfo.kappa1[C][:, None]
        flux = np.concatenate([-coeffs.alpha1 * k1 * gn,
                               -coeffs.alpha2 * (1.0 - k1) * gn], axis=1)
        mom = np.einsum("mp,mpi->mi", w, jump)
        consistency = flux[:, :, None] * mom[:, None, :]
        local = consistency + consistency.transpose(0, 2, 1)
        local += (pen / _nitsche_lengths(mesh, diam, tids, coeffs,
                                         LENGTH_ELEMENT))[
            :, None, None] * np.einsum("mp,mpi,mpj->mij", w, jump, jump)
        verts = mesh.tets[tids]
        dofs = np.concatenate([layout.v1_dof[verts], layout.v2_dof[verts]],
                              axis=1)
        lift = np.concatenate([liftvals[verts, 0], liftvals[verts, 1]],
                              axis=1)
        acc.add_local(local, dofs, lift)

    _add_ghost(acc, mesh, cutinfo, grads, 1, coeffs, layout.v1_dof,
               liftvals[:, 0])
    _add_ghost(acc, mesh, cutinfo, grads, 2, coeffs, layout.v2_dof,
               liftvals[:, 1])

    _add_full_loads(acc, mesh, cutinfo.minus1, f, layout.v1_dof)
    _add_full_loads(acc, mesh, cutinfo.minus2, f, layout.v2_dof)
    _add_cut_loads(acc, mesh, cutinfo, grads, 1, f, layout.v1_dof)
    _add_cut_loads(acc, mesh, cutinfo, grads, 2, f, layout.v2_dof)

    return acc.matrix(), acc.b


def assemble_fd(mesh: Mesh, cutinfo: CutInfo, layout: DofLayout,
                coeffs: ProblemCoefficients, f, g):
    """Assemble the one-sided system with weak boundary data on the zero set.

    g(points) is the trace datum on the reconstructed boundary.  All nodes
    of the extended domain are unknowns.  Returns (A, b).
    """
    if layout.problem != FICTITIOUS:
        raise ValueError("layout does not describe the fictitious domain")
    _check_cut_rules(mesh, cutinfo)
    grads = all_gradients(mesh)
    diam = element_diameters(mesh)
    acc = _SystemAccumulator(layout.dim)

    meas1, _ = _side_measures(mesh, cutinfo)
    _add_volume(acc, mesh, grads, meas1, 1.0, layout.v1_dof, None)

    for C, tids, w, lam, gn in _surface_batches(mesh, cutinfo, grads):
        mom = np.einsum("mp,mpi->mi", w, lam)
        consistency = -mom[:, :, None] * gn[:, None, :]
        local = consistency + consistency.transpose(0, 2, 1)
        penfac = coeffs.gamma / _nitsche_lengths(mesh, diam, tids, coeffs,
                                                 LENGTH_GLOBAL)
        local += penfac[:, None, None] * np.einsum("mp,mpi,mpj->mij",
                                                   w, lam, lam)
        verts = mesh.tets[tids]
        dofs = layout.v1_dof[verts]
        if np.any(dofs < 0):
            raise ValueError("active element with unnumbered vertex")
        acc.add_local(local, dofs)

        idx = cutinfo.soff[C][:, None] + np.arange(w.shape[1])[None, :]
        gv = np.asarray(g(cutinfo.spts[idx].reshape(-1, 3)),
                        dtype=float).reshape(w.shape)
        gw = np.einsum("mp,mp->m", w, gv)
        bloc = -gw[:, None] * gn
        bloc += penfac[:, None] * np.einsum("mp,mp,mpi->mi", w, gv, lam)
        acc.add_load(bloc, dofs)

    _add_ghost(acc, mesh, cutinfo, grads, 1, coeffs, layout.v1_dof,
               None)

    _add_full_loads(acc, mesh, cutinfo.minus1, f, layout.v1_dof)
    _add_cut_loads(acc, mesh, cutinfo, grads, 1, f, layout.v1_dof)

    return acc.matrix(), acc.b


def _split_columns(layout: DofLayout):
    """Row/column index pairs of the basis transformation, all entries one."""
    rows = []
    cols = []
    for vdof in (layout.v1_dof, layout.v2_dof):
        present = vdof[layout.x0_vertices] >= 0
        vs = layout.x0_vertices[present]
        rows.append(vdof[vs])
        cols.append(layout.x0_dof[vs])
    in1 = np.isin(layout.x1_vertices, layout.sets.IG1)
    for vdof, vs in ((layout.v1_dof, layout.x1_vertices[in1]),
                     (layout.v2_dof, layout.x1_vertices[~in1])):
        rows.append(vdof[vs])
        cols.append(layout.x1_dof[vs])
    return np.concatenate(rows), np.concatenate(cols)


def build_L(layout: DofLayout) -> sp.csr_matrix:
    """Basis transformation from split (x0, x1) to side-block coefficients.

    Each x0 column places a unit entry in every side block whose extended
    domain contains the vertex; each x1 column hits the single block where
    the vertex acts as a cut dof (the side opposite its level-set sign).
    """
    rows, cols = _split_columns(layout)
    if rows.size != layout.dim + layout.N1:
        raise ValueError("transformation entry count mismatch")
    L = sp.coo_matrix((np.ones(rows.size), (rows, cols)),
                      shape=(layout.dim, layout.dim)).tocsr()
    L.sort_indices()
    return L


def build_L_fd(layout: DofLayout) -> sp.csr_matrix:
    """One-sided basis transformation; a permutation (identity here since
    the side-block ordering already lists interior dofs before strip dofs).
    """
    if layout.problem != FICTITIOUS:
        raise ValueError("layout does not describe the fictitious domain")
    rows, cols = _split_columns(layout)
    if rows.size != layout.dim:
        raise ValueError("transformation entry count mismatch")
    L = sp.coo_matrix((np.ones(rows.size), (rows, cols)),
                      shape=(layout.dim, layout.dim)).tocsr()
    L.sort_indices()
    return L


def transform(A: sp.csr_matrix, b: np.ndarray, L: sp.csr_matrix,
              layout: DofLayout) -> TransformedSystem:
    """Congruence transform to the split basis and principal block split."""
    Ahat = (L.T @ A @ L).tocsr()
    Ahat.sort_indices()
    bhat = L.T @ b
    n0 = layout.N0
    A0 = Ahat[:n0, :n0].tocsr()
    A1 = Ahat[n0:, n0:].tocsr()
    D1 = A1.diagonal().copy()
    if D1.size and D1.min() <= 0.0:
        raise ValueError(
            "non-positive diagonal in the strip block; assembled system is "
            "not positive definite (check penalty parameters)")
    return TransformedSystem(A=A, b=b, L=L, Ahat=Ahat, bhat=bhat,
                             A0=A0, A1=A1, D1=D1, layout=layout)


def export_matrix_market(tsys: TransformedSystem, directory):
    """Debug dump of the assembled operators in Matrix Market format."""
    import pathlib

    out = pathlib.Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name, M in (("A", tsys.A), ("L", tsys.L), ("Ahat", tsys.Ahat),
                    ("A0", tsys.A0), ("A1", tsys.A1)):
        mmwrite(str(out / name), M)
    return sorted(p.name for p in out.glob("*.mtx"))
