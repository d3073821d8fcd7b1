"""Hierarchical interface networks on the unit square and their cell partitions.

All facet coordinates are exact dyadic rationals stored as integers scaled by
2**scale_exp, so set operations (disjointness, resolution checks, flood fill)
are exact. Two network kinds are provided: the Cantor-type comminution network
and a randomized layered network of horizontal polyline interfaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


class GeometryError(Exception):
    """Raised when a generated geometry violates a structural invariant."""


class InfeasibleGeometryError(GeometryError):
    """Raised when requested parameters leave no room for valid interfaces."""


# facet array columns: x0, y0, x1, y1, axis   (axis = normal direction: 0 -> +x, 1 -> +y)
FACET_COLS = 5


@dataclass(frozen=True)
class InterfaceFacet:
    """One axis-aligned interface segment with dyadic integer endpoints."""

    level: int
    x0: int
    y0: int
    x1: int
    y1: int
    normal_axis: int
    scale_exp: int

    def __post_init__(self):
        if self.level < 1:
            raise GeometryError("facet level must be >= 1")
        dx, dy = self.x1 - self.x0, self.y1 - self.y0
        if (dx == 0) == (dy == 0):
            raise GeometryError("facet endpoints must differ in exactly one coordinate")
        # normal +e_axis must be perpendicular to the segment direction
        if self.normal_axis == 0 and dx != 0 or self.normal_axis == 1 and dy != 0:
            raise GeometryError("normal_axis must be perpendicular to the segment")

    @property
    def endpoints(self):
        s = 2.0 ** -self.scale_exp
        return (self.x0 * s, self.y0 * s), (self.x1 * s, self.y1 * s)

    @property
    def length(self):
        return (abs(self.x1 - self.x0) + abs(self.y1 - self.y0)) * 2.0 ** -self.scale_exp


@dataclass
class InterfaceNetwork:
    """Levelled collection of interface facets inside Q = (0,1)^2.

    facets_by_level maps level k to an integer array of shape (n_k, 5) with
    columns (x0, y0, x1, y1, axis) at scale 2**scale_exp. crossing_constants
    holds the per-level constants used in the energy weights (2**(k-1) for the
    Cantor kind, 2**k - 1 for the layered kind; overridable downstream).
    """

    kind: str
    max_level: int
    scale_exp: int
    facets_by_level: dict[int, np.ndarray]
    crossing_constants: dict[int, int]
    seed: int | None = None
    # squares (x, y, side) at scale 2**scale_exp that are refined at level k+1;
    # level 0 entry is the whole domain
    active_squares: dict[int, np.ndarray] = field(default_factory=dict)
    # layered only: macro interface heights in scale units, and grid exponent of T^(1)
    macro_rows: np.ndarray | None = None
    base_grid_exp: int | None = None

    def facets(self, k):
        """Facets of level k as a list of InterfaceFacet."""
        arr = self.facets_by_level.get(k)
        if arr is None:
            return []
        return [InterfaceFacet(k, *row[:4], row[4], self.scale_exp) for row in arr.tolist()]

    def facets_up_to(self, K):
        """Stacked facet array and level array for all levels <= K."""
        parts, levels = [], []
        for k in range(1, K + 1):
            arr = self.facets_by_level.get(k)
            if arr is not None and len(arr):
                parts.append(arr)
                levels.append(np.full(len(arr), k))
        if not parts:
            return np.zeros((0, FACET_COLS), dtype=np.int64), np.zeros(0, dtype=np.int64)
        return np.vstack(parts), np.concatenate(levels)

    def grid_exponent(self, k):
        """log2 of the coarsest uniform grid resolving all facets of levels <= k."""
        if self.kind == "cantor":
            return max(k, 0)
        return self.base_grid_exp + max(k - 1, 0)

    def level_length(self, k):
        arr = self.facets_by_level.get(k)
        if arr is None or not len(arr):
            return 0.0
        d = np.abs(arr[:, 2] - arr[:, 0]) + np.abs(arr[:, 3] - arr[:, 1])
        return float(d.sum()) * 2.0 ** -self.scale_exp


@dataclass
class CellPartition:
    """Connected components of Q minus the level-K network, on a pixel grid.

    labels is a (g, g) array over pixels indexed [ix, iy]; cell c owns the
    pixels with labels == c. Diameters are measured per axis-aligned extent
    (max bounding-box edge), which makes d_K = 2**-K exact for the Cantor
    hierarchy.
    """

    level: int
    grid_exp: int
    labels: np.ndarray
    n_cells: int
    invariant_flags: np.ndarray
    d_K: float
    d_K_min: float
    shape_constant: float
    bboxes: np.ndarray  # (n_cells, 4): ix0, iy0, ix1, iy1 inclusive pixel ranges

    def cell_pixels(self, c):
        ix, iy = np.nonzero(self.labels == c)
        return np.column_stack([ix, iy])


@dataclass
class LayeredNetworkConfig:
    seed: int
    macro_interface_count: int = 3
    polylines_per_macro_per_level: int = 6  # total new polylines per level, one above/below each macro
    band_halfwidth_cells: int = 2

    def __post_init__(self):
        if self.macro_interface_count < 1:
            raise InfeasibleGeometryError("need at least one macro interface")
        if self.polylines_per_macro_per_level != 2 * self.macro_interface_count:
            raise InfeasibleGeometryError(
                "polylines per level must be 2 per macro interface (one above, one below)")
        if self.band_halfwidth_cells < 1:
            raise InfeasibleGeometryError("bands must be at least one grid cell wide")


@dataclass
class LineFamily:
    """Line sample family for crossing counts.

    kind 'axis': exhaustive axis-aligned lines at all half-cell offsets of the
    network's finest grid. kind 'random': seeded random chords of the domain.
    """

    kind: str = "axis"
    count: int = 1000
    seed: int = 0


# Comminution convention: the two refined children of every parent square.
# Child positions are (col, row) in {0,1}^2; the complementary pair is kept
# invariant. A same-column (or same-row) pair reproduces the level-k crossing
# counts 2**(k-1) along axis-parallel lines; diagonal pairs do not.
CANTOR_ACTIVE_CHILDREN = ((0, 0), (0, 1))


def build_cantor_network(K, active_children=CANTOR_ACTIVE_CHILDREN):
    """Build the 2D Cantor comminution network up to level K.

    Each refined square splits into 4 children; the two children at
    active_children positions are refined further, the other two become
    invariant cells. Level-k facets are the interior cross of each square
    refined at step k. K = 0 yields the empty network.
    """
    if K < 0:
        raise GeometryError("K must be >= 0")
    (c0, c1) = active_children
    if c0 == c1 or not all(v in (0, 1) for v in (*c0, *c1)):
        raise GeometryError("active children must be two distinct unit-square positions")
    S = max(K, 0)
    scale = 2 ** S
    facets = {}
    actives = {0: np.array([[0, 0, scale]], dtype=np.int64)}
    cur = [(0, 0, scale)]
    for k in range(1, K + 1):
        rows = []
        nxt = []
        for (x, y, s) in cur:
            h = s // 2
            rows.append((x + h, y, x + h, y + s, 0))
            rows.append((x, y + h, x + s, y + h, 1))
            for (cx, cy) in (c0, c1):
                nxt.append((x + cx * h, y + cy * h, h))
        facets[k] = np.array(rows, dtype=np.int64)
        cur = sorted(nxt)
        actives[k] = np.array(cur, dtype=np.int64)
    crossing = {k: 2 ** (k - 1) for k in range(1, K + 1)}
    return InterfaceNetwork(
        kind="cantor", max_level=K, scale_exp=S, facets_by_level=facets,
        crossing_constants=crossing, active_squares=actives)


def build_layered_network(cfg, K, h1=2.0 ** -4):
    """Build the randomized layered network up to level K.

    Level 1 consists of macro horizontal interfaces spanning the domain width
    at heights i/(m+1). Each level k >= 2 adds one x-monotone polyline above
    and one below each macro, confined to disjoint horizontal bands that nest
    toward the macro, with vertices on the level-k grid. Deterministic given
    cfg.seed.
    """
    if K < 1:
        raise GeometryError("K must be >= 1")
    p = -int(np.log2(h1))
    if 2.0 ** -p != h1 or p < 1:
        raise InfeasibleGeometryError("h1 must be 2**-p with p >= 1")
    m = cfg.macro_interface_count
    n1 = 2 ** p
    if n1 % (m + 1):
        raise InfeasibleGeometryError(
            f"macro heights i/{m + 1} do not lie on the level-1 grid with h1={h1}")
    bhc = cfg.band_halfwidth_cells
    # outermost bands (level 2) of adjacent macros must not overlap
    if 2 * bhc * (h1 / 2) > 0.5 / (m + 1):
        raise InfeasibleGeometryError(
            "bands thinner than one grid cell: reduce h1 or band_halfwidth_cells")

    S = p + K - 1
    scale = 2 ** S
    gap = scale // (m + 1)
    macros = np.array([(i + 1) * gap for i in range(m)], dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)

    facets = {1: np.array([(0, y, scale, y, 1) for y in macros], dtype=np.int64)}
    for k in range(2, K + 1):
        u = 2 ** (S - (p + k - 1))  # level-k grid cell in scale units
        nk = scale // u
        # an oblique line can cross a polyline jogs+1 times and meets one
        # polyline above and one below some interface, so 2(jogs+1) <= C_k
        jogs = min(2 ** (k - 1) - 2, nk - 1)
        jogs = max(jogs, 0)
        rows = []
        for y_macro in macros:
            for sign in (+1, -1):
                lo = y_macro + sign * bhc * u
                hi = lo + sign * u
                cols = np.sort(rng.choice(np.arange(1, nk), size=jogs, replace=False)) * u
                y_cur = lo if rng.integers(2) == 0 else hi
                x_cur = 0
                for xj in cols.tolist():
                    rows.append((x_cur, y_cur, xj, y_cur, 1))
                    y_nxt = hi if y_cur == lo else lo
                    rows.append((xj, min(y_cur, y_nxt), xj, max(y_cur, y_nxt), 0))
                    x_cur, y_cur = xj, y_nxt
                rows.append((x_cur, y_cur, scale, y_cur, 1))
        facets[k] = np.array(rows, dtype=np.int64)
    crossing = {k: 2 ** k - 1 for k in range(1, K + 1)}
    return InterfaceNetwork(
        kind="layered", max_level=K, scale_exp=S, facets_by_level=facets,
        crossing_constants=crossing, seed=cfg.seed, macro_rows=macros, base_grid_exp=p)


def _blocked_edges(net, K, g):
    """Boolean masks of grid adjacencies blocked by facets of levels <= K.

    block_x[i, j] blocks pixel (i, j) <-> (i+1, j); block_y[i, j] blocks
    (i, j) <-> (i, j+1). Pixel grid is g x g.
    """
    shift = net.scale_exp - int(np.log2(g)) if g else 0
    arr, _ = net.facets_up_to(K)
    block_x = np.zeros((max(g - 1, 0), g), dtype=bool)
    block_y = np.zeros((g, max(g - 1, 0)), dtype=bool)
    for x0, y0, x1, y1, axis in arr.tolist():
        x0, y0, x1, y1 = x0 >> shift, y0 >> shift, x1 >> shift, y1 >> shift
        if axis == 0:
            block_x[x0 - 1, min(y0, y1):max(y0, y1)] = True
        else:
            block_y[min(x0, x1):max(x0, x1), y0 - 1] = True
    return block_x, block_y


def _component_labels(g, block_x, block_y):
    idx = np.arange(g * g).reshape(g, g)  # [ix, iy]
    rows, cols = [], []
    if g > 1:
        keep = ~block_x
        rows.append(idx[:-1, :][keep])
        cols.append(idx[1:, :][keep])
        keep = ~block_y
        rows.append(idx[:, :-1][keep])
        cols.append(idx[:, 1:][keep])
    r = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    c = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    adj = coo_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(g * g, g * g))
    n, labels = connected_components(adj, directed=False)
    return n, labels.reshape(g, g)


def _check_simply_connected(labels, n_cells):
    g = labels.shape[0]
    lab = labels.ravel()
    ix, iy = np.divmod(np.arange(g * g), g)
    # pixel complex per cell: chi = V - E + F must be 1 for a topological disk
    def count_unique(keys):
        pairs = np.unique(np.stack(keys, axis=1), axis=0)
        return np.bincount(pairs[:, 0], minlength=n_cells)

    F = np.bincount(lab, minlength=n_cells)
    edges = []
    for dx, dy, horiz in ((0, 0, 0), (0, 0, 1), (1, 0, 0), (0, 1, 1)):
        key = (ix + dx) * 2 * (g + 1) + (iy + dy) * 2 + horiz
        edges.append(np.stack([lab, key], axis=1))
    E = np.bincount(np.unique(np.vstack(edges), axis=0)[:, 0], minlength=n_cells)
    corners = []
    for dx in (0, 1):
        for dy in (0, 1):
            corners.append(np.stack([lab, (ix + dx) * (g + 1) + (iy + dy)], axis=1))
    V = np.bincount(np.unique(np.vstack(corners), axis=0)[:, 0], minlength=n_cells)
    chi = V - E + F
    bad = np.nonzero(chi != 1)[0]
    if len(bad):
        raise GeometryError(f"cells {bad.tolist()} are not simply connected")


def compute_cell_partition(net, K):
    """Partition Q into the open cells of the level-K network.

    Flood fill over the level-K grid; invariant cells are those never refined
    at higher levels of the construction (for the Cantor kind the refined
    squares of the generator, for the layered kind the bands touching a macro
    interface, remain non-invariant). Raises GeometryError if a cell is not
    simply connected.
    """
    if K > net.max_level:
        raise GeometryError("K exceeds the network's max_level")
    gexp = net.grid_exponent(K)
    g = 2 ** gexp
    n_cells, labels = _component_labels(g, *_blocked_edges(net, K, g))
    _check_simply_connected(labels, n_cells)

    lab = labels.ravel()
    ix, iy = np.divmod(np.arange(g * g), g)
    bbox = np.zeros((n_cells, 4), dtype=np.int64)
    for col, arr, op in ((0, ix, np.minimum), (1, iy, np.minimum),
                         (2, ix, np.maximum), (3, iy, np.maximum)):
        acc = np.full(n_cells, g if op is np.minimum else -1, dtype=np.int64)
        op.at(acc, lab, arr)
        bbox[:, col] = acc

    invariant = np.ones(n_cells, dtype=bool)
    sizes = np.bincount(lab, minlength=n_cells)
    if net.kind == "cantor":
        shift = gexp - K
        for x, y, s in net.active_squares[K].tolist():
            sx, sy, ss = x >> max(net.scale_exp - gexp, 0), y >> max(net.scale_exp - gexp, 0), s >> max(net.scale_exp - gexp, 0)
            c = labels[sx, sy]
            if sizes[c] == ss * ss:
                invariant[c] = False
    else:
        shift = net.scale_exp - gexp
        for y in (net.macro_rows >> shift).tolist():
            for row in (y - 1, y):
                invariant[np.unique(labels[:, row])] = False

    w = (bbox[:, 2] - bbox[:, 0] + 1) / g
    h = (bbox[:, 3] - bbox[:, 1] + 1) / g
    dmax = np.maximum(w, h)
    dmin = np.minimum(w, h)
    d_K = float(dmax[~invariant].max()) if (~invariant).any() else 0.0
    return CellPartition(
        level=K, grid_exp=gexp, labels=labels, n_cells=n_cells,
        invariant_flags=invariant, d_K=d_K, d_K_min=float(dmin.min()),
        shape_constant=float(np.sqrt(2.0) * (dmax / dmin).max()), bboxes=bbox)


def count_line_crossings(net, k, samples=LineFamily()):
    """Max number of intersection points of a sampled line with the level-k facets."""
    arr = net.facets_by_level.get(k)
    if arr is None or not len(arr):
        return 0
    if samples.kind == "axis":
        g = 2 ** net.grid_exponent(net.max_level)
        shift = net.scale_exp - int(np.log2(g))
        best = 0
        for axis in (0, 1):
            f = arr[arr[:, 4] == axis]
            if not len(f):
                continue
            lo = np.minimum(f[:, 1 - axis], f[:, 3 - axis]) >> shift
            hi = np.maximum(f[:, 1 - axis], f[:, 3 - axis]) >> shift
            cover = np.zeros(g + 1, dtype=np.int64)
            np.add.at(cover, lo, 1)
            np.add.at(cover, hi, -1)
            best = max(best, int(np.cumsum(cover)[:-1].max()))
        return best
    if samples.kind == "random":
        rng = np.random.default_rng(samples.seed)
        scale = float(2 ** net.scale_exp)
        x0, y0, x1, y1, axis = (arr[:, i].astype(float) for i in range(5))
        lo_x, hi_x = np.minimum(x0, x1), np.maximum(x0, x1)
        lo_y, hi_y = np.minimum(y0, y1), np.maximum(y0, y1)
        best = 0
        for _ in range(samples.count):
            p = rng.uniform(0.0, scale, size=2)
            q = rng.uniform(0.0, scale, size=2)
            d = q - p
            cnt = 0
            for ax, coord, lo, hi, other in (
                    (0, x0, lo_y, hi_y, (p[1], d[1])),
                    (1, y0, lo_x, hi_x, (p[0], d[0]))):
                sel = axis == ax
                if not sel.any() or d[ax] == 0.0:
                    continue
                t = (coord[sel] - p[ax]) / d[ax]
                u = other[0] + t * other[1]
                cnt += int(((t > 0) & (t < 1) & (u > lo[sel]) & (u < hi[sel])).sum())
            best = max(best, cnt)
        return best
    raise GeometryError(f"unknown line family kind {samples.kind!r}")


def network_stats(net):
    """Per-level facet counts, lengths, d_k and crossing constants, plus shape data."""
    rows = []
    shape_const = 0.0
    for k in range(1, net.max_level + 1):
        part = compute_cell_partition(net, k)
        shape_const = max(shape_const, part.shape_constant)
        arr = net.facets_by_level.get(k)
        rows.append({
            "level": k,
            "facet_count": 0 if arr is None else int(len(arr)),
            "total_length": net.level_length(k),
            "d_k": part.d_K,
            "C_k": net.crossing_constants.get(k, 0),
        })
    return {"kind": net.kind, "max_level": net.max_level, "seed": net.seed,
            "shape_constant": shape_const, "levels": rows}


def save_network(net, path):
    """Write the line-oriented text format: header, then `k x0 y0 x1 y1 axis` rows."""
    with open(path, "w") as fh:
        fh.write("# fracfem interface network v1\n")
        fh.write(f"kind {net.kind}\n")
        fh.write(f"max_level {net.max_level}\n")
        fh.write(f"scale_exp {net.scale_exp}\n")
        fh.write(f"seed {net.seed if net.seed is not None else '-'}\n")
        if net.base_grid_exp is not None:
            fh.write(f"# meta base_grid_exp {net.base_grid_exp}\n")
        if net.macro_rows is not None:
            fh.write(f"# meta macro_rows {' '.join(map(str, net.macro_rows.tolist()))}\n")
        for k, arr in sorted(net.active_squares.items()):
            for x, y, s in arr.tolist():
                fh.write(f"# meta active {k} {x} {y} {s}\n")
        for k in range(1, net.max_level + 1):
            for x0, y0, x1, y1, axis in net.facets_by_level.get(k, []).tolist():
                fh.write(f"{k} {x0} {y0} {x1} {y1} {axis}\n")


def load_network(path):
    header = {}
    meta_active = {}
    macro_rows = None
    base_grid_exp = None
    facet_rows = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts[:2] == ["meta", "active"]:
                    k = int(parts[2])
                    meta_active.setdefault(k, []).append([int(v) for v in parts[3:6]])
                elif parts[:2] == ["meta", "macro_rows"]:
                    macro_rows = np.array([int(v) for v in parts[2:]], dtype=np.int64)
                elif parts[:2] == ["meta", "base_grid_exp"]:
                    base_grid_exp = int(parts[2])
                continue
            key, *rest = line.split()
            if key in ("kind", "max_level", "scale_exp", "seed"):
                header[key] = rest[0]
            else:
                k = int(key)
                facet_rows.setdefault(k, []).append([int(v) for v in rest])
    K = int(header["max_level"])
    kind = header["kind"]
    facets = {k: np.array(v, dtype=np.int64) for k, v in facet_rows.items()}
    crossing = ({k: 2 ** (k - 1) for k in range(1, K + 1)} if kind == "cantor"
                else {k: 2 ** k - 1 for k in range(1, K + 1)})
    return InterfaceNetwork(
        kind=kind, max_level=K, scale_exp=int(header["scale_exp"]),
        facets_by_level=facets, crossing_constants=crossing,
        seed=None if header["seed"] == "-" else int(header["seed"]),
        active_squares={k: np.array(v, dtype=np.int64) for k, v in meta_active.items()},
        macro_rows=macro_rows, base_grid_exp=base_grid_exp)
