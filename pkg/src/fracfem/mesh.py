"""Nested structured triangulations and the broken P1 degree-of-freedom map.

The initial mesh is a uniform square grid, every square split along its
lower-left/upper-right diagonal. Uniform refinement quarters every triangle
via edge midpoints and keeps the coarse vertex indices, so vertex sets nest
with identical indices across levels. Broken dofs are (cell, vertex) pairs:
a vertex interior to a cell owns one dof, a vertex on the interface network
owns one dof per adjacent cell, and boundary vertices own none.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GeometryError


class MeshError(Exception):
    pass


@dataclass
class Triangulation:
    level: int
    n: int  # squares per side; grid spacing h = 1/n
    vertices: np.ndarray  # (nv, 2) float64
    triangles: np.ndarray  # (nt, 3) int64
    boundary_vertex: np.ndarray  # (nv,) bool
    edges: np.ndarray  # (ne, 2) sorted vertex pairs
    triangle_edges: np.ndarray  # (nt, 3)
    edge_triangles: np.ndarray  # (ne, 2), -1 on boundary
    parent_triangle: np.ndarray | None = None  # (nt,) into previous level
    midpoint_parents: np.ndarray | None = None  # (nv, 2): coarse endpoints, (v, v) if inherited
    _coord_index: dict | None = None

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    def vertex_at(self, ix, iy):
        """Vertex index at integer grid coordinates (units of h)."""
        if self._coord_index is None:
            keys = np.round(self.vertices * self.n).astype(np.int64)
            self._coord_index = {(int(a), int(b)): i for i, (a, b) in enumerate(keys)}
        return self._coord_index[(ix, iy)]

    def has_edge(self, ix0, iy0, ix1, iy1):
        try:
            a = self.vertex_at(ix0, iy0)
            b = self.vertex_at(ix1, iy1)
        except KeyError:
            return False
        key = (min(a, b), max(a, b))
        if not hasattr(self, "_edge_set") or self._edge_set is None:
            self._edge_set = {(int(u), int(v)) for u, v in self.edges.tolist()}
        return key in self._edge_set


def _build_edge_tables(vertices, triangles):
    t = triangles
    pairs = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [0, 2]]])
    pairs = np.sort(pairs, axis=1)
    edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
    triangle_edges = inverse.reshape(3, -1).T
    edge_triangles = np.full((len(edges), 2), -1, dtype=np.int64)
    order = np.argsort(inverse, kind="stable")
    tri_of_pair = np.tile(np.arange(len(t)), 3)[order]
    eids = inverse[order]
    first = np.ones(len(eids), dtype=bool)
    first[1:] = eids[1:] != eids[:-1]
    edge_triangles[eids[first], 0] = tri_of_pair[first]
    second = ~first
    edge_triangles[eids[second], 1] = tri_of_pair[second]
    return edges, triangle_edges, edge_triangles


def build_initial_triangulation(h1):
    """Uniform triangulation of the unit square with grid spacing h1 = 2**-p."""
    p = round(-np.log2(h1))
    if p < 0 or 2.0 ** -p != h1:
        raise MeshError(f"h1 must be a dyadic fraction 2**-p, got {h1}")
    n = 2 ** p
    g = np.arange(n + 1) / n
    xx, yy = np.meshgrid(g, g, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(ix, iy):
        return iy * (n + 1) + ix

    ix, iy = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    ix, iy = ix.ravel(), iy.ravel()
    v00, v10 = vid(ix, iy), vid(ix + 1, iy)
    v01, v11 = vid(ix, iy + 1), vid(ix + 1, iy + 1)
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.vstack([lower, upper]).astype(np.int64)
    order = np.lexsort((triangles[:, 1], triangles[:, 0]))
    triangles = triangles[order]

    boundary = (np.isin(np.round(vertices[:, 0] * n), (0, n))
                | np.isin(np.round(vertices[:, 1] * n), (0, n)))
    edges, tri_edges, edge_tris = _build_edge_tables(vertices, triangles)
    return Triangulation(level=1, n=n, vertices=vertices, triangles=triangles,
                         boundary_vertex=boundary, edges=edges,
                         triangle_edges=tri_edges, edge_triangles=edge_tris)


def refine_uniform(T):
    """Quarter every triangle via edge midpoints; coarse vertex indices persist."""
    nv = T.num_vertices
    mid_start = nv
    midpoints = 0.5 * (T.vertices[T.edges[:, 0]] + T.vertices[T.edges[:, 1]])
    vertices = np.vstack([T.vertices, midpoints])
    m = mid_start + T.triangle_edges  # midpoint vertex per triangle edge (01, 12, 02)
    v0, v1, v2 = T.triangles.T
    m01, m12, m02 = m.T
    children = np.empty((4 * T.num_triangles, 3), dtype=np.int64)
    children[0::4] = np.column_stack([v0, m01, m02])
    children[1::4] = np.column_stack([m01, v1, m12])
    children[2::4] = np.column_stack([m02, m12, v2])
    children[3::4] = np.column_stack([m01, m12, m02])
    parent = np.repeat(np.arange(T.num_triangles), 4)

    boundary = np.concatenate([T.boundary_vertex, T.edge_triangles[:, 1] == -1])
    mid_parents = np.empty((len(vertices), 2), dtype=np.int64)
    mid_parents[:nv, 0] = mid_parents[:nv, 1] = np.arange(nv)
    mid_parents[nv:] = T.edges

    edges, tri_edges, edge_tris = _build_edge_tables(vertices, children)
    return Triangulation(level=T.level + 1, n=2 * T.n, vertices=vertices,
                         triangles=children, boundary_vertex=boundary, edges=edges,
                         triangle_edges=tri_edges, edge_triangles=edge_tris,
                         parent_triangle=parent, midpoint_parents=mid_parents)


def build_hierarchy(h1, levels):
    """Triangulations T^(1), ..., T^(levels), each a uniform refinement of the last."""
    out = [build_initial_triangulation(h1)]
    for _ in range(levels - 1):
        out.append(refine_uniform(out[-1]))
    return out


def _facet_unit_edges(net, K, n):
    """All mesh unit edges (integer grid coords at scale n) along facets of levels <= K.

    Returns (levels, x0, y0, x1, y1, axis) arrays with one row per unit edge,
    or None if some facet does not land on the grid.
    """
    arr, lev = net.facets_up_to(K)
    if not len(arr):
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty, empty, empty, empty
    scale = 2 ** net.scale_exp
    coords = arr[:, :4] * n
    if (coords % scale).any():
        return None
    coords //= scale
    out = []
    for (x0, y0, x1, y1, axis), k in zip(np.column_stack([coords, arr[:, 4]]).tolist(), lev.tolist()):
        if axis == 0:
            ys = range(min(y0, y1), max(y0, y1))
            out.extend((k, x0, y, x0, y + 1, 0) for y in ys)
        else:
            xs = range(min(x0, x1), max(x0, x1))
            out.extend((k, x, y0, x + 1, y0, 1) for x in xs)
    res = np.array(out, dtype=np.int64).reshape(-1, 6)
    return res[:, 0], res[:, 1], res[:, 2], res[:, 3], res[:, 4], res[:, 5]


def check_resolves(T, net, K):
    """True iff every facet of levels <= K is a union of edges of T."""
    parts = _facet_unit_edges(net, K, T.n)
    if parts is None:
        return False, [f for k in range(1, K + 1) for f in net.facets(k)]
    lev, x0, y0, x1, y1, axis = parts
    violations = []
    for i in range(len(lev)):
        if not T.has_edge(int(x0[i]), int(y0[i]), int(x1[i]), int(y1[i])):
            violations.append((int(lev[i]), int(x0[i]), int(y0[i]), int(x1[i]), int(y1[i])))
    return not violations, violations


@dataclass
class BrokenDofMap:
    """Per-cell duplicated P1 dofs and the interface edge-pair records."""

    level: int
    n: int
    total_dofs: int
    dof_cell: np.ndarray  # (nd,)
    dof_vertex: np.ndarray  # (nd,)
    tri_dofs: np.ndarray  # (nt, 3), -1 for Dirichlet vertices
    tri_cell: np.ndarray  # (nt,)
    edge_level: np.ndarray  # (ne,)
    edge_plus: np.ndarray  # (ne, 2) dofs on the +normal side, -1 if Dirichlet
    edge_minus: np.ndarray  # (ne, 2)
    edge_length: np.ndarray  # (ne,)
    edge_sign: np.ndarray  # (ne,)
    edge_mid: np.ndarray  # (ne, 2) midpoint coordinates (for coefficient sampling)
    _key_base: int = 2
    _key_order: np.ndarray = None
    _keys_sorted: np.ndarray = None

    def dof_of(self, cells, vertices):
        """Vectorized (cell, vertex) -> dof lookup; -1 where absent."""
        cells = np.asarray(cells, dtype=np.int64)
        vertices = np.asarray(vertices, dtype=np.int64)
        key = cells * self._key_base + vertices
        pos = np.searchsorted(self._keys_sorted, key)
        pos = np.clip(pos, 0, len(self._keys_sorted) - 1)
        hit = self._keys_sorted[pos] == key
        return np.where(hit, self._key_order[pos], -1)

    def dofs_at_vertices(self, vertex_ids):
        """All dofs whose vertex lies in vertex_ids (sorted by dof index)."""
        mask = np.isin(self.dof_vertex, vertex_ids)
        return np.nonzero(mask)[0]


def build_broken_dof_map(T, part, net):
    """Assign broken dofs and enumerate interface edge pairs for T and the partition."""
    g = 2 ** part.grid_exp
    if T.n % g:
        raise MeshError("mesh does not refine the partition grid")
    ratio = T.n // g

    cent = T.vertices[T.triangles].mean(axis=1)
    px = np.minimum((cent[:, 0] * g).astype(np.int64), g - 1)
    py = np.minimum((cent[:, 1] * g).astype(np.int64), g - 1)
    tri_cell = part.labels[px, py].astype(np.int64)

    v = T.triangles.ravel()
    c = np.repeat(tri_cell, 3)
    keep = ~T.boundary_vertex[v]
    pairs = np.unique(np.column_stack([c[keep], v[keep]]), axis=0)
    dof_cell, dof_vertex = pairs[:, 0], pairs[:, 1]
    nd = len(pairs)

    base = int(dof_vertex.max()) + 2 if nd else 2
    keys = dof_cell * base + dof_vertex
    order = np.argsort(keys)
    dm = BrokenDofMap(
        level=part.level, n=T.n, total_dofs=nd, dof_cell=dof_cell, dof_vertex=dof_vertex,
        tri_dofs=None, tri_cell=tri_cell, edge_level=None, edge_plus=None,
        edge_minus=None, edge_length=None, edge_sign=None, edge_mid=None,
        _key_base=base, _key_order=order, _keys_sorted=keys[order])

    tri_dofs = dm.dof_of(np.repeat(tri_cell, 3), v).reshape(-1, 3)
    dm.tri_dofs = tri_dofs

    ok, violations = check_resolves(T, net, part.level)
    if not ok:
        raise MeshError(f"mesh does not resolve the network: {violations[:5]} ...")
    lev, x0, y0, x1, y1, axis = _facet_unit_edges(net, part.level, T.n)
    ne = len(lev)
    va = np.array([T.vertex_at(int(a), int(b)) for a, b in zip(x0, y0)], dtype=np.int64)
    vb = np.array([T.vertex_at(int(a), int(b)) for a, b in zip(x1, y1)], dtype=np.int64)

    # pixel on each side of the edge, in partition grid units
    ex, ey = x0 // ratio, y0 // ratio
    vert = axis == 0
    plus_cell = np.empty(ne, dtype=np.int64)
    minus_cell = np.empty(ne, dtype=np.int64)
    plus_cell[vert] = part.labels[ex[vert], ey[vert]]
    minus_cell[vert] = part.labels[ex[vert] - 1, ey[vert]]
    horiz = ~vert
    plus_cell[horiz] = part.labels[ex[horiz], ey[horiz]]
    minus_cell[horiz] = part.labels[ex[horiz], ey[horiz] - 1]

    dm.edge_level = lev
    dm.edge_plus = np.column_stack([dm.dof_of(plus_cell, va), dm.dof_of(plus_cell, vb)])
    dm.edge_minus = np.column_stack([dm.dof_of(minus_cell, va), dm.dof_of(minus_cell, vb)])
    dm.edge_length = np.full(ne, T.h)
    dm.edge_sign = np.ones(ne, dtype=np.int64)
    dm.edge_mid = 0.5 * (T.vertices[va] + T.vertices[vb])
    return dm


@dataclass
class PatchIndex:
    level: int
    center_vertex: int  # index into the level-(k-1) vertex set; -1 for the whole domain
    coarse_triangles: np.ndarray
    dofs: np.ndarray


def enumerate_patches(hierarchy, dofmaps, k):
    """Local patches of level k: vertex stars of the level-(k-1) mesh.

    For k = 1 the single whole-domain patch holds every level-1 dof. For
    k >= 2, each level-(k-1) vertex x yields the patch of level-k dofs at
    vertices strictly inside the refined star of x, so the spanned functions
    vanish on the complement of the open patch. (Broken dofs on an interface
    along the patch rim would also qualify when their one-sided support is
    interior; they are deliberately left out, which reproduces the reference
    reduction-factor tables almost exactly.)
    """
    if k == 1:
        dm = dofmaps[0]
        return [PatchIndex(1, -1, np.arange(hierarchy[0].num_triangles),
                           np.arange(dm.total_dofs))]
    Tc, Tf = hierarchy[k - 2], hierarchy[k - 1]
    dm = dofmaps[k - 1]

    nvc = Tc.num_vertices
    tri_flat = Tc.triangles.ravel()
    order = np.argsort(tri_flat, kind="stable")
    star_ptr = np.zeros(nvc + 1, dtype=np.int64)
    np.add.at(star_ptr, tri_flat + 1, 1)
    star_ptr = np.cumsum(star_ptr)
    star_tris = np.repeat(np.arange(Tc.num_triangles), 3)[order]

    children = np.argsort(Tf.parent_triangle, kind="stable").reshape(-1, 4)

    # vertex -> dofs lookup for the fine dofmap
    vorder = np.argsort(dm.dof_vertex, kind="stable")
    vptr = np.zeros(Tf.num_vertices + 1, dtype=np.int64)
    np.add.at(vptr, dm.dof_vertex + 1, 1)
    vptr = np.cumsum(vptr)

    patches = []
    fedges = Tf.triangle_edges
    ftris = Tf.triangles
    for x in range(nvc):
        ctris = star_tris[star_ptr[x]:star_ptr[x + 1]]
        fine = children[ctris].ravel()
        eids, counts = np.unique(fedges[fine].ravel(), return_counts=True)
        rim_vertices = np.unique(Tf.edges[eids[counts == 1]].ravel())
        verts = np.unique(ftris[fine].ravel())
        inner = np.setdiff1d(verts, rim_vertices, assume_unique=True)
        dofs = np.concatenate([vorder[vptr[vv]:vptr[vv + 1]] for vv in inner]) \
            if len(inner) else np.zeros(0, dtype=np.int64)
        patches.append(PatchIndex(k, x, ctris, np.sort(dofs)))
    return patches


def prolongation_matrix(dm_coarse, dm_fine, part_coarse, part_fine, T_fine):
    """Sparse interpolation from the coarse broken space into the fine one.

    Per-cell nodal interpolation: inherited vertices copy the value of their
    cell's coarse trace, edge midpoints average the two coarse endpoint traces
    of the same cell. Dirichlet endpoints contribute zero.
    """
    from scipy.sparse import csr_matrix

    ratio = 2 ** (part_fine.grid_exp - part_coarse.grid_exp)
    # parent cell of each fine cell via any one of its pixels
    gf = 2 ** part_fine.grid_exp
    lab = part_fine.labels.ravel()
    firsts = np.zeros(part_fine.n_cells, dtype=np.int64)
    uniq, pos = np.unique(lab, return_index=True)
    firsts[uniq] = pos
    fx, fy = np.divmod(firsts, gf)
    parent_cell = part_coarse.labels[fx // ratio, fy // ratio]

    a = T_fine.midpoint_parents[dm_fine.dof_vertex, 0]
    b = T_fine.midpoint_parents[dm_fine.dof_vertex, 1]
    pc = parent_cell[dm_fine.dof_cell]
    ca = dm_coarse.dof_of(pc, a)
    cb = dm_coarse.dof_of(pc, b)
    rows, cols, vals = [], [], []
    same = a == b
    rows.append(np.nonzero(same & (ca >= 0))[0])
    cols.append(ca[same & (ca >= 0)])
    vals.append(np.ones(len(rows[-1])))
    half = ~same
    for cc in (ca, cb):
        sel = half & (cc >= 0)
        rows.append(np.nonzero(sel)[0])
        cols.append(cc[sel])
        vals.append(np.full(len(rows[-1]), 0.5))
    return csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(dm_fine.total_dofs, dm_coarse.total_dofs))


def write_vtk_mesh(T, cell_ids, path):
    """VTK legacy ASCII unstructured grid with a per-triangle cell-id field."""
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nfracfem mesh\nASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {T.num_vertices} double\n")
        for x, y in T.vertices.tolist():
            fh.write(f"{x:.17g} {y:.17g} 0\n")
        nt = T.num_triangles
        fh.write(f"CELLS {nt} {4 * nt}\n")
        for a, b, c in T.triangles.tolist():
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {nt}\n")
        fh.write("\n".join(["5"] * nt) + "\n")
        fh.write(f"CELL_DATA {nt}\nSCALARS cell_id int 1\nLOOKUP_TABLE default\n")
        fh.write("\n".join(str(int(c)) for c in cell_ids) + "\n")


def write_dofmap_csv(dm, T, path):
    with open(path, "w") as fh:
        fh.write("dof_id,cell_id,vertex_id,x,y\n")
        for d in range(dm.total_dofs):
            v = dm.dof_vertex[d]
            fh.write(f"{d},{dm.dof_cell[d]},{v},"
                     f"{T.vertices[v, 0]:.17g},{T.vertices[v, 1]:.17g}\n")
