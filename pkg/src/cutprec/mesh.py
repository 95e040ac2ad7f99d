"""Structured tetrahedral meshes of a box and their uniform refinement hierarchy.

The initial mesh subdivides each cell of an n x n x n cube grid into 6
tetrahedra (Kuhn subdivision along the (0,0,0)->(1,1,1) cell diagonal).
Uniform refinement splits every tetrahedron into 8 children (red refinement:
4 corner tetrahedra plus an octahedron cut along its shortest diagonal).
Vertex coordinates are derived from integer lattice indices so that
coordinates of coarse vertices reappear bitwise identically on finer levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Axis insertion orders generating the 6 Kuhn tetrahedra of a cube.
_KUHN_PERMS = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))

# Local vertex pairs of the 6 edges of a tetrahedron, in a fixed order.
_TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

# The three interior diagonals of the midpoint octahedron, as edge-slot pairs
# into _TET_EDGES, and the equatorial 4-cycle of the remaining midpoints.
_OCT_DIAGONALS = ((0, 5), (1, 4), (2, 3))
_OCT_EQUATORS = ((1, 2, 4, 3), (0, 2, 5, 3), (0, 1, 5, 4))


@dataclass(frozen=True)
class Facets:
    """Facet connectivity of a tetrahedral mesh.

    vertices: (nf, 3) sorted vertex triples.
    tets: (nf, 2) adjacent tet ids; tets[:, 1] == -1 on the boundary.
    normals: (nf, 3) unit normals, oriented from tets[:, 0] towards
        tets[:, 1] (outward on the boundary).
    areas, diameters: (nf,) triangle areas and longest-edge lengths.
    """

    vertices: np.ndarray
    tets: np.ndarray
    normals: np.ndarray
    areas: np.ndarray
    diameters: np.ndarray

    @property
    def n_facets(self) -> int:
        return self.vertices.shape[0]

    @property
    def is_boundary(self) -> np.ndarray:
        return self.tets[:, 1] < 0


@dataclass(frozen=True)
class Mesh:
    """Immutable conforming tetrahedral mesh.

    Vertices carry integer lattice indices (lattice, lattice_n): the physical
    coordinate is box_lo + extent * lattice / lattice_n.  Tet vertex orderings
    are canonical (sorted by lattice order); red refinement relies on this to
    reproduce the halved-lattice cube subdivision exactly.  The per-tet parity
    is recorded in orientations, so orientations * det(edges) / 6 =
    volumes > 0.  All arrays are read-only after construction.
    """

    vertices: np.ndarray
    tets: np.ndarray
    level: int
    boundary_vertex_flags: np.ndarray
    lattice: np.ndarray
    lattice_n: int
    box: np.ndarray
    facets: Facets = field(repr=False)
    volumes: np.ndarray = field(repr=False)
    orientations: np.ndarray = field(repr=False)

    def __post_init__(self):
        for arr in (self.vertices, self.tets, self.boundary_vertex_flags,
                    self.lattice, self.box, self.volumes, self.orientations):
            arr.setflags(write=False)
        for arr in (self.facets.vertices, self.facets.tets,
                    self.facets.normals, self.facets.areas,
                    self.facets.diameters):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    @property
    def h(self) -> float:
        """Grid size: the (largest) cube edge length of the background grid."""
        extent = self.box[1] - self.box[0]
        return float(np.max(extent) / self.lattice_n)

    def tet_coords(self, t: int) -> np.ndarray:
        return self.vertices[self.tets[t]]


@dataclass(frozen=True)
class RefinementMaps:
    """Connectivity between a mesh and its uniform refinement.

    child_tets: (n_coarse_tets, 8) fine tet ids per coarse tet.
    coarse_to_fine: coarse vertex id -> fine vertex id (identity embedding).
    midpoint_parents: (n_new, 2) coarse vertex pair whose midpoint is fine
        vertex len(coarse_to_fine) + row index.
    """

    child_tets: np.ndarray
    coarse_to_fine: np.ndarray
    midpoint_parents: np.ndarray

    def __post_init__(self):
        for arr in (self.child_tets, self.coarse_to_fine, self.midpoint_parents):
            arr.setflags(write=False)


def _signed_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = vertices[tets]
    e = p[:, 1:] - p[:, :1]
    return np.einsum("ti,ti->t", e[:, 0], np.cross(e[:, 1], e[:, 2])) / 6.0


def _coords_from_lattice(lattice: np.ndarray, n: int, box: np.ndarray) -> np.ndarray:
    lo, hi = box[0], box[1]
    return lo + (hi - lo) * lattice / float(n)


def build_facets(mesh_or_vertices, tets: np.ndarray | None = None) -> Facets:
    """Derive facet connectivity: vertex triples, adjacent tets, oriented normals.

    Accepts a Mesh or a (vertices, tets) pair.  Interior facet normals point
    from the lower to the higher adjacent tet id; boundary normals point out
    of their single tet.
    """
    if tets is None:
        vertices, tets = mesh_or_vertices.vertices, mesh_or_vertices.tets
    else:
        vertices = mesh_or_vertices
    nt = tets.shape[0]
    local = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
    faces = np.sort(tets[:, local], axis=2).reshape(-1, 3)
    owners = np.repeat(np.arange(nt), 4)
    uniq, inv = np.unique(faces, axis=0, return_inverse=True)
    nf = uniq.shape[0]
    counts = np.bincount(inv, minlength=nf)
    if counts.max() > 2:
        raise ValueError("nonconforming mesh: facet shared by more than 2 tets")
    order = np.argsort(inv, kind="stable")
    adj = np.full((nf, 2), -1, dtype=np.int64)
    starts = np.zeros(nf + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    sorted_owners = owners[order]
    adj[:, 0] = sorted_owners[starts[:-1]]
    two = counts == 2
    adj[two, 1] = sorted_owners[starts[:-1][two] + 1]
    # keep the lower tet id first so normal orientation is deterministic
    swap = two & (adj[:, 0] > adj[:, 1])
    adj[swap] = adj[swap][:, ::-1]

    p = vertices[uniq]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    nvec = np.cross(e1, e2)
    nrm = np.linalg.norm(nvec, axis=1)
    areas = 0.5 * nrm
    normals = nvec / nrm[:, None]
    # orient away from the first adjacent tet (towards the second / outward)
    opp = vertices[tets[adj[:, 0]]].sum(axis=1) / 4.0
    centroid = p.mean(axis=1)
    wrong = np.einsum("fi,fi->f", normals, centroid - opp) < 0
    normals[wrong] *= -1.0
    edges = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 2] - p[:, 1]])
    diameters = np.sqrt(np.max(np.sum(edges**2, axis=2), axis=0))
    return Facets(vertices=uniq, tets=adj, normals=normals, areas=areas,
                  diameters=diameters)


def _canonical_tet_order(lattice: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Order each tet's vertices by (coordinate sum, i, j, k) of their lattice
    indices.  On cube-path (Kuhn) tets this is the canonical path order, which
    the octahedron tie-break needs to reproduce the halved-lattice subdivision
    at every refinement level."""
    lat = lattice[tets]
    order = np.lexsort((lat[:, :, 2], lat[:, :, 1], lat[:, :, 0],
                        lat.sum(axis=2)), axis=1)
    return np.take_along_axis(tets, order, axis=1)


def _make_mesh(lattice: np.ndarray, n: int, box: np.ndarray,
               tets: np.ndarray, level: int) -> Mesh:
    vertices = _coords_from_lattice(lattice, n, box)
    tets = _canonical_tet_order(lattice, tets)
    on_bnd = np.any((lattice == 0) | (lattice == n), axis=1)
    facets = build_facets(vertices, tets)
    signed = _signed_volumes(vertices, tets)
    if np.any(signed == 0):
        raise ValueError("degenerate tetrahedron")
    orientations = np.where(signed > 0, 1, -1).astype(np.int8)
    return Mesh(vertices=vertices, tets=tets, level=level,
                boundary_vertex_flags=on_bnd, lattice=lattice, lattice_n=n,
                box=box, facets=facets, volumes=np.abs(signed),
                orientations=orientations)


def build_initial_mesh(n_per_axis: int, box=((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))) -> Mesh:
    """Kuhn-subdivide an n x n x n cube grid of the box into 6n^3 tetrahedra."""
    if n_per_axis < 1:
        raise ValueError("n_per_axis must be >= 1")
    box = np.asarray(box, dtype=float).reshape(2, 3)
    if np.any(box[1] <= box[0]):
        raise ValueError("box must have positive extent in every axis")
    n = int(n_per_axis)
    m = n + 1
    ii, jj, kk = np.meshgrid(np.arange(m), np.arange(m), np.arange(m),
                             indexing="ij")
    lattice = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(np.int64)

    def vid(i, j, k):
        return (i * m + j) * m + k

    cubes = np.stack(np.meshgrid(np.arange(n), np.arange(n), np.arange(n),
                                 indexing="ij"), axis=-1).reshape(-1, 3)
    tets = np.empty((6 * cubes.shape[0], 4), dtype=np.int64)
    for p_idx, perm in enumerate(_KUHN_PERMS):
        c = cubes.copy()
        v = [vid(c[:, 0], c[:, 1], c[:, 2])]
        for axis in perm:
            c = c.copy()
            c[:, axis] += 1
            v.append(vid(c[:, 0], c[:, 1], c[:, 2]))
        tets[p_idx::6] = np.stack([v[0], v[1], v[2], v[3]], axis=1)
    return _make_mesh(lattice, n, box, tets, level=0)


def refine_uniform(mesh: Mesh) -> tuple[Mesh, RefinementMaps]:
    """Split every tet into 8 children; returns the fine mesh and the maps."""
    tets = mesh.tets
    nv = mesh.n_vertices
    pairs = np.sort(tets[:, _TET_EDGES].reshape(-1, 2), axis=1)
    edges, edge_of = np.unique(pairs, axis=0, return_inverse=True)
    edge_of = edge_of.reshape(-1, 6)
    mid = nv + np.arange(edges.shape[0])

    fine_lattice = np.vstack([2 * mesh.lattice,
                              mesh.lattice[edges[:, 0]] + mesh.lattice[edges[:, 1]]])
    fine_n = 2 * mesh.lattice_n

    # m[t, e] = fine vertex id of the midpoint of edge slot e of tet t
    m = mid[edge_of]
    v = tets
    corner = np.stack([
        np.stack([v[:, 0], m[:, 0], m[:, 1], m[:, 2]], axis=1),
        np.stack([m[:, 0], v[:, 1], m[:, 3], m[:, 4]], axis=1),
        np.stack([m[:, 1], m[:, 3], v[:, 2], m[:, 5]], axis=1),
        np.stack([m[:, 2], m[:, 4], m[:, 5], v[:, 3]], axis=1),
    ], axis=1)

    # shortest interior diagonal of the midpoint octahedron; ties resolved by
    # the fixed candidate order, which selects the self-similar split on Kuhn tets
    ext_over_n = (mesh.box[1] - mesh.box[0]) / float(fine_n)
    mid_lat = fine_lattice[m]
    d2 = np.stack([
        np.sum(((mid_lat[:, a] - mid_lat[:, b]) * ext_over_n) ** 2, axis=1)
        for a, b in _OCT_DIAGONALS
    ], axis=1)
    choice = np.argmin(d2, axis=1)

    octa = np.empty((tets.shape[0], 4, 4), dtype=np.int64)
    for c, ((da, db), eq) in enumerate(zip(_OCT_DIAGONALS, _OCT_EQUATORS)):
        rows = choice == c
        if not np.any(rows):
            continue
        p, q = m[rows, da], m[rows, db]
        for k in range(4):
            ca, cb = m[rows, eq[k]], m[rows, eq[(k + 1) % 4]]
            octa[rows, k] = np.stack([p, ca, cb, q], axis=1)

    children = np.concatenate([corner, octa], axis=1)
    fine_tets = children.reshape(-1, 4)
    fine = _make_mesh(fine_lattice, fine_n, mesh.box, fine_tets,
                      level=mesh.level + 1)
    maps = RefinementMaps(
        child_tets=np.arange(fine_tets.shape[0]).reshape(-1, 8),
        coarse_to_fine=np.arange(nv),
        midpoint_parents=edges,
    )
    return fine, maps


class MeshHierarchy:
    """Nested meshes produced by successive uniform refinement.

    levels[k] is the mesh at refinement level k; maps[k] connects levels[k]
    to levels[k+1].
    """

    def __init__(self, initial: Mesh):
        self.levels: list[Mesh] = [initial]
        self.maps: list[RefinementMaps] = []

    @classmethod
    def build(cls, max_level: int, n_per_axis: int = 4,
              box=((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))) -> "MeshHierarchy":
        hier = cls(build_initial_mesh(n_per_axis, box))
        for _ in range(max_level):
            hier.refine()
        return hier

    def refine(self) -> Mesh:
        fine, maps = refine_uniform(self.levels[-1])
        self.levels.append(fine)
        self.maps.append(maps)
        return fine

    @property
    def finest(self) -> Mesh:
        return self.levels[-1]

    def truncated(self, level: int) -> "MeshHierarchy":
        """Sub-hierarchy sharing the meshes up to the given level."""
        if not 0 <= level < len(self.levels):
            raise ValueError("level outside the hierarchy")
        sub = MeshHierarchy(self.levels[0])
        sub.levels = self.levels[:level + 1]
        sub.maps = self.maps[:level]
        return sub


def dump_mesh(mesh: Mesh, path) -> None:
    """Write an ASCII dump: 'nv nt' header, vertex coordinates, tet vertex ids."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.n_vertices} {mesh.n_tets}\n")
        for x, y, z in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
        for t in mesh.tets:
            fh.write(f"{t[0]} {t[1]} {t[2]} {t[3]}\n")
