"""Norms, estimators, convergence fitting, and inequality property checks.

Everything here recomputes integrals element by element, independently of the
assembled operators, so these routines double as oracles for the assembly
path. Broken functions are coefficient vectors over a BrokenDofMap; point
values and segment traversals resolve the interface side from the triangle
actually containing the query point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DOMAIN_DIAMETER = np.sqrt(2.0)  # Euclidean diameter of the unit square


@dataclass
class NormBreakdown:
    gradient_part: float
    jump_parts: dict  # level -> weighted squared jump norm
    total: float
    l2: float


@dataclass
class ConvergenceStudy:
    levels: list
    e_values: list
    factor: float
    fit_residual: float
    K_ref: int


def _triangle_values(prob, v):
    """(nt, 3) nodal values per triangle; Dirichlet vertices contribute zero."""
    td = prob.dofmap.tri_dofs
    vals = np.where(td >= 0, np.asarray(v)[np.clip(td, 0, None)], 0.0)
    return vals


def _triangle_gradients(prob, v):
    T = prob.mesh
    pts = T.vertices[T.triangles]
    d = np.stack([pts[:, 2] - pts[:, 1], pts[:, 0] - pts[:, 2], pts[:, 1] - pts[:, 0]], axis=1)
    det = d[:, 2, 0] * (-d[:, 1, 1]) - d[:, 2, 1] * (-d[:, 1, 0])
    grads = np.stack([-d[:, :, 1], d[:, :, 0]], axis=2) / det[:, None, None]
    vals = _triangle_values(prob, v)
    area = 0.5 * np.abs(det)
    return area, vals, np.einsum("tid,ti->td", grads, vals)


def norm_breakdown(prob, v):
    """Exact decomposition of the squared broken energy norm of v.

    gradient_part is the squared L2 norm of the broken gradient; jump_parts[k]
    is (1+c)**k C_k times the squared L2 norm of the jump along the level-k
    interfaces; total is their sum. The interface coefficient plays no role
    here (norm weights only).
    """
    area, vals, grad = _triangle_gradients(prob, v)
    gradient_part = float(np.sum(area * np.sum(grad * grad, axis=1)))
    sq = np.sum(vals * vals, axis=1)
    cross = vals[:, 0] * vals[:, 1] + vals[:, 0] * vals[:, 2] + vals[:, 1] * vals[:, 2]
    l2 = float(np.sum(area / 6.0 * (sq + cross)))

    dm = prob.dofmap
    v = np.asarray(v)
    jp = np.where(dm.edge_plus >= 0, v[np.clip(dm.edge_plus, 0, None)], 0.0)
    jm = np.where(dm.edge_minus >= 0, v[np.clip(dm.edge_minus, 0, None)], 0.0)
    j = jp - jm
    per_edge = dm.edge_length / 6.0 * (2 * j[:, 0] ** 2 + 2 * j[:, 1] ** 2
                                       + 2 * j[:, 0] * j[:, 1])
    jump_parts = {}
    for k in np.unique(dm.edge_level).tolist():
        w = prob.hierarchy.form.weight(prob.hierarchy.net, k)
        jump_parts[int(k)] = float(w * per_edge[dm.edge_level == k].sum())
    return NormBreakdown(gradient_part=gradient_part, jump_parts=jump_parts,
                         total=gradient_part + sum(jump_parts.values()), l2=l2)


def energy_value(v, M, b):
    """Quadratic energy 0.5 v' M v - b' v."""
    mat = getattr(M, "matrix", M)
    v = np.asarray(v)
    return float(0.5 * v @ (mat @ v) - np.asarray(b) @ v)


def random_broken_vector(prob, rng):
    return rng.uniform(-1.0, 1.0, size=prob.dofmap.total_dofs)


def convergence_study(hierarchy, K_ref):
    """Heuristic homogenization-error decay study.

    e_K combines the level increment above the reference level with the gap to
    it, everything measured in the broken energy norm of the finest space. The
    per-level factor is fitted by least squares on log e_K over K < K_ref
    (the reference level itself has a vanishing second term).
    """
    if K_ref < 3:
        raise ValueError("need K_ref >= 3 for a meaningful fit")
    if hierarchy.levels < K_ref + 1:
        raise ValueError("hierarchy must reach K_ref + 1")
    top = K_ref + 1
    fine = [hierarchy.prolong_to(hierarchy.reference_solution(K), K, top)
            for K in range(1, top + 1)]
    N = hierarchy.norm_operators[top - 1].matrix

    def dist(a, b):
        d = a - b
        return float(np.sqrt(max(d @ (N @ d), 0.0)))

    head = dist(fine[top - 1], fine[K_ref - 1])
    levels = list(range(1, K_ref + 1))
    e_values = [head + dist(fine[K_ref - 1], fine[K - 1]) for K in range(1, K_ref)]
    e_values.append(head)
    ks = np.array(levels[:K_ref - 1], dtype=float)
    ys = np.log(np.array(e_values[:K_ref - 1]))
    slope, intercept = np.polyfit(ks, ys, 1)
    resid = float(np.sqrt(np.mean((slope * ks + intercept - ys) ** 2)))
    return ConvergenceStudy(levels=levels, e_values=e_values,
                            factor=float(np.exp(slope)), fit_residual=resid,
                            K_ref=K_ref)


def poincare_constant(c, diameter=DOMAIN_DIAMETER):
    return (1.0 + 1.0 / c) * diameter * max(diameter, 1.0)


def poincare_check(prob, v):
    """L2 norm against the weighted broken energy, with the explicit constant."""
    nb = norm_breakdown(prob, v)
    c0 = poincare_constant(prob.hierarchy.form.c)
    lhs = nb.l2
    rhs = c0 * nb.total
    return lhs, rhs, lhs <= rhs * (1.0 + 1e-12)


class _BrokenEvaluator:
    """Point evaluation and exact segment traversal of a broken function."""

    def __init__(self, prob, v):
        self.prob = prob
        self.T = prob.mesh
        self.n = self.T.n
        area, vals, grad = _triangle_gradients(prob, v)
        self.vals = vals
        self.grad = grad
        self.anchor = self.T.vertices[self.T.triangles[:, 0]]
        cent = self.T.vertices[self.T.triangles].mean(axis=1)
        n = self.n
        ix = np.minimum((cent[:, 0] * n).astype(int), n - 1)
        iy = np.minimum((cent[:, 1] * n).astype(int), n - 1)
        upper = (cent[:, 1] - iy / n) > (cent[:, 0] - ix / n)
        self.locator = np.full(2 * n * n, -1, dtype=np.int64)
        self.locator[(iy * n + ix) * 2 + upper.astype(int)] = np.arange(len(cent))
        # facet interval tables per (axis, line index in net-scale units)
        net = prob.hierarchy.net
        self.net = net
        self.facet_levels = {}
        arr, lev = net.facets_up_to(prob.K)
        for row, k in zip(arr.tolist(), lev.tolist()):
            x0, y0, x1, y1, axis = row
            fixed = x0 if axis == 0 else y0
            lo = min(y0, y1) if axis == 0 else min(x0, x1)
            hi = max(y0, y1) if axis == 0 else max(x0, x1)
            self.facet_levels.setdefault((axis, fixed), []).append((lo, hi, k))

    def triangle_at(self, p):
        n = self.n
        ix = min(int(p[0] * n), n - 1)
        iy = min(int(p[1] * n), n - 1)
        upper = (p[1] - iy / n) > (p[0] - ix / n)
        return int(self.locator[(iy * n + ix) * 2 + int(upper)])

    def value_in_triangle(self, t, p):
        return float(self.vals[t, 0] + self.grad[t] @ (p - self.anchor[t]))

    def __call__(self, p):
        return self.value_in_triangle(self.triangle_at(np.asarray(p)), np.asarray(p))

    def facet_level_at(self, axis, coord, along):
        """Interface level at a crossing point, or None off the network."""
        scale = 2 ** self.net.scale_exp
        key = (axis, int(round(coord * scale)))
        if abs(coord * scale - round(coord * scale)) > 1e-9:
            return None
        for lo, hi, k in self.facet_levels.get(key, ()):
            if lo < along * scale < hi:
                return k
        return None

    def traverse(self, x, y, reject_tol=1e-11):
        """Breakpoints, per-interval triangles, and per-crossing jump levels.

        Returns (s_breaks, triangles, crossings) where crossings is a list of
        (s, level, point) for breakpoints on interface facets. Raises
        ValueError for segments passing through mesh vertices.
        """
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        d = y - x
        n = self.n
        ss = []
        for axis in (0, 1):
            if d[axis] != 0.0:
                lines = np.arange(1, n) / n
                t = (lines - x[axis]) / d[axis]
                ss.append(t[(t > reject_tol) & (t < 1 - reject_tol)])
        if d[0] != d[1]:
            m = np.arange(-(n - 1), n) / n
            t = (m - (x[1] - x[0])) / (d[1] - d[0])
            ss.append(t[(t > reject_tol) & (t < 1 - reject_tol)])
        s = np.sort(np.concatenate(ss)) if ss else np.zeros(0)
        if len(s) > 1 and np.min(np.diff(s)) < reject_tol:
            raise ValueError("segment passes through a mesh vertex")
        for p in (x, y):
            if (np.abs(p * n - np.round(p * n)) < 1e-9).any():
                raise ValueError("segment endpoint lies on a mesh line")
        breaks = np.concatenate([[0.0], s, [1.0]])
        mids = x[None, :] + 0.5 * (breaks[:-1] + breaks[1:])[:, None] * d[None, :]
        tris = [self.triangle_at(p) for p in mids]
        crossings = []
        for si in s.tolist():
            p = x + si * d
            for axis in (0, 1):
                lev = self.facet_level_at(axis, p[axis], p[1 - axis])
                if lev is not None:
                    crossings.append((si, lev, p))
                    break
        return breaks, tris, crossings


def fundamental_estimate_check(prob, v, segments):
    """Directional-difference inequality along segments: worst lhs/rhs ratio.

    For each segment the squared endpoint difference is tested against the
    weighted line integral of the squared broken gradient plus the weighted
    squared directional jumps at interface crossings.
    """
    ev = _BrokenEvaluator(prob, v)
    form = prob.hierarchy.form
    net = prob.hierarchy.net
    one_over = 1.0 + 1.0 / form.c
    worst = 0.0
    for (x, y) in segments:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        breaks, tris, crossings = ev.traverse(x, y)
        d = y - x
        lhs = (ev.value_in_triangle(tris[-1], y) - ev.value_in_triangle(tris[0], x)) ** 2
        grad_int = sum((b2 - b1) * float(ev.grad[t] @ ev.grad[t])
                       for b1, b2, t in zip(breaks[:-1], breaks[1:], tris))
        jump_sum = 0.0
        for si, lev, p in crossings:
            i = int(np.searchsorted(breaks, si)) - 1
            before = ev.value_in_triangle(tris[i], p)
            after = ev.value_in_triangle(tris[i + 1], p)
            jump_sum += form.weight(net, lev) * (after - before) ** 2
        rhs = one_over * (float(d @ d) * grad_int + jump_sum)
        if lhs == 0.0:
            continue
        worst = max(worst, lhs / rhs if rhs > 0 else np.inf)
    return worst


def sample_segments(prob, count, rng):
    """Random segments whose endpoints avoid all mesh lines of the level."""
    n = prob.mesh.n
    out = []
    while len(out) < count:
        x = rng.uniform(0.02, 0.98, size=2)
        y = rng.uniform(0.02, 0.98, size=2)
        pts = np.concatenate([x, y])
        if (np.abs(pts * n - np.round(pts * n)) < 1e-6).any():
            continue
        if abs((y[1] - x[1]) - (y[0] - x[0])) < 1e-9 and abs((x[1] - x[0]) * n
                - round((x[1] - x[0]) * n)) < 1e-6:
            continue
        out.append((x, y))
    return out


@dataclass
class PolyField:
    """Polynomial vector field with component coefficient matrices c[i, j] x^i y^j."""

    cx: np.ndarray
    cy: np.ndarray

    def __call__(self, x, y):
        return (np.polynomial.polynomial.polyval2d(x, y, self.cx),
                np.polynomial.polynomial.polyval2d(x, y, self.cy))

    def divergence(self, x, y):
        dx = np.polynomial.polynomial.polyder(self.cx, axis=0)
        dy = np.polynomial.polynomial.polyder(self.cy, axis=1)
        return (np.polynomial.polynomial.polyval2d(x, y, dx)
                + np.polynomial.polynomial.polyval2d(x, y, dy))


def green_identity_check(prob, v, phi):
    """Defect of the broken integration-by-parts identity for a field phi.

    Evaluates | int v div(phi) + int grad(v).phi - sum_k int_Gk [v] phi.nu |
    relative to the term magnitudes; exact quadrature for polynomial phi of
    degree <= 2. The boundary term vanishes because broken functions carry no
    boundary dofs.
    """
    T = prob.mesh
    area, vals, grad = _triangle_gradients(prob, v)
    pts = T.vertices[T.triangles]
    mids = 0.5 * np.stack([pts[:, 0] + pts[:, 1], pts[:, 1] + pts[:, 2],
                           pts[:, 2] + pts[:, 0]], axis=1)
    vm = 0.5 * np.stack([vals[:, 0] + vals[:, 1], vals[:, 1] + vals[:, 2],
                         vals[:, 2] + vals[:, 0]], axis=1)
    div = phi.divergence(mids[:, :, 0], mids[:, :, 1])
    term_vdiv = float(np.sum(area / 3.0 * np.sum(vm * div, axis=1)))
    px, py = phi(mids[:, :, 0], mids[:, :, 1])
    term_gradphi = float(np.sum(area / 3.0 * (grad[:, 0] * np.sum(px, axis=1)
                                              + grad[:, 1] * np.sum(py, axis=1))))

    dm = prob.dofmap
    v = np.asarray(v)
    jp = np.where(dm.edge_plus >= 0, v[np.clip(dm.edge_plus, 0, None)], 0.0)
    jm = np.where(dm.edge_minus >= 0, v[np.clip(dm.edge_minus, 0, None)], 0.0)
    # orientation that closes the divergence identity: trace from the side the
    # normal exits minus the trace from the side it enters
    j = jm - jp
    term_jump = 0.0
    if dm.total_dofs and len(dm.edge_level):
        # 2-point Gauss along each edge (exact to degree 3); vertical facets
        # (normal +x) run along y, horizontal ones along x
        g = np.array([-1.0 / np.sqrt(3.0), 1.0 / np.sqrt(3.0)])
        normal_is_x = np.isclose(dm.edge_mid[:, 0] * dm.n,
                                 np.round(dm.edge_mid[:, 0] * dm.n))
        tang = np.where(normal_is_x[:, None], np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]))
        nu = np.where(normal_is_x[:, None], np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
        half = 0.5 * dm.edge_length
        for q in g.tolist():
            pq = dm.edge_mid + (q * half)[:, None] * tang
            jq = 0.5 * (1 - q) * j[:, 0] + 0.5 * (1 + q) * j[:, 1]
            fx, fy = phi(pq[:, 0], pq[:, 1])
            phinu = fx * nu[:, 0] + fy * nu[:, 1]
            term_jump += float(np.sum(half * jq * phinu))
    defect = abs(term_vdiv + term_gradphi - term_jump)
    scale = abs(term_vdiv) + abs(term_gradphi) + abs(term_jump)
    return defect / scale if scale > 0 else defect


def galerkin_orthogonality_check(hierarchy, K, L):
    """Max normalized residual of the coarse solution against level-K tests.

    Also verifies the energy Pythagoras identity between the two levels.
    Returns (max_defect, pythagoras_defect).
    """
    if L < K:
        raise ValueError("need L >= K")
    uK = hierarchy.reference_solution(K)
    uL = hierarchy.reference_solution(L)
    if L == K:
        return 0.0, 0.0
    uK_f = hierarchy.prolong_to(uK, K, L)
    ML = hierarchy.operators[L - 1].matrix
    MK = hierarchy.operators[K - 1].matrix
    d = uL - uK_f
    # residual against every level-K basis vector: a_L(d, P e_v) = (P^T M_L d)_v
    vec = ML @ d
    for k in range(L - 1, K - 1, -1):
        vec = hierarchy.prolongations[k - 1].T @ vec
    dnorm = float(np.sqrt(max(d @ (ML @ d), 0.0)))
    vnorms = np.sqrt(MK.diagonal())
    defect = float(np.max(np.abs(vec) / (dnorm * vnorms))) if dnorm > 0 else 0.0
    eL = float(uL @ (ML @ uL))
    eK = float(uK @ (MK @ uK))
    pyth = abs(eL - eK - dnorm ** 2) / max(eL, 1e-30)
    return defect, pyth


def stability_check(prob, u=None):
    """Uniform stability of the discrete solution against the load.

    Returns (norm, bound, ok) for ||u_K|| <= C0 / a_lower * ||f||_L2.
    """
    hier = prob.hierarchy
    if u is None:
        u = prob.reference_solution()
    nrm = float(np.sqrt(max(u @ (prob.norm_operator.matrix @ u), 0.0)))
    f = hier.f
    if callable(f):
        T = prob.mesh
        pts = T.vertices[T.triangles]
        area = np.abs(np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0])) / 2.0
        mids = 0.5 * np.stack([pts[:, 0] + pts[:, 1], pts[:, 1] + pts[:, 2],
                               pts[:, 2] + pts[:, 0]], axis=1)
        fl2 = float(np.sqrt(np.sum(area / 3.0 * np.sum(
            np.asarray(f(mids[:, :, 0], mids[:, :, 1])) ** 2, axis=1))))
    else:
        fl2 = abs(float(f))
    bound = poincare_constant(hier.form.c) / hier.form.coeff_lower * fl2
    return nrm, bound, nrm <= bound * (1.0 + 1e-12)
