"""Assembly of the broken-P1 energy forms as symmetric sparse operators.

The bilinear form is the broken Dirichlet energy plus exponentially weighted
interface jump terms: per level-k interface edge the weight is
(1 + c)**k * C_k times the interface coefficient sampled at the edge midpoint.
All P1 integrals are closed form; there is no quadrature error for constant or
per-level coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix


class AssemblyError(Exception):
    pass


# exact integral of products of linear jump traces over an edge, ordered
# (plus_1, plus_2, minus_1, minus_2), to be scaled by w * A * L / 6
JUMP_KERNEL = np.array([
    [2.0, 1.0, -2.0, -1.0],
    [1.0, 2.0, -1.0, -2.0],
    [-2.0, -1.0, 2.0, 1.0],
    [-1.0, -2.0, 1.0, 2.0],
])


@dataclass
class EnergyForm:
    """Material constant, per-level weights, and interface coefficient bounds.

    coefficient may be a float, a {level: float} map, or a callable
    (level, x, y) -> float evaluated at edge midpoints. For callables the
    bounds must be supplied explicitly.
    """

    c: float = 1.0
    coefficient: object = 1.0
    coeff_lower: float = None
    coeff_upper: float = None
    crossing_override: dict = None

    def __post_init__(self):
        if self.c <= 0:
            raise AssemblyError("material constant c must be positive")
        if self.coeff_lower is None or self.coeff_upper is None:
            if callable(self.coefficient):
                raise AssemblyError("callable coefficients need explicit bounds")
            vals = (list(self.coefficient.values()) if isinstance(self.coefficient, dict)
                    else [float(self.coefficient)])
            self.coeff_lower = min(min(vals), 1.0)
            self.coeff_upper = max(max(vals), 1.0)
        if not (0.0 < self.coeff_lower <= 1.0 <= self.coeff_upper):
            raise AssemblyError("coefficient bounds must satisfy 0 < lower <= 1 <= upper")

    def crossing_constant(self, net, k):
        if self.crossing_override and k in self.crossing_override:
            return self.crossing_override[k]
        return net.crossing_constants[k]

    def weight(self, net, k):
        """Jump weight (1 + c)**k * C_k for level-k interface edges."""
        return (1.0 + self.c) ** k * self.crossing_constant(net, k)

    def coefficient_at(self, level, x, y):
        if callable(self.coefficient):
            f = np.vectorize(lambda xi, yi: self.coefficient(level, xi, yi))
            return f(x, y) if np.ndim(x) else float(self.coefficient(level, x, y))
        if isinstance(self.coefficient, dict):
            return np.full_like(np.asarray(x, dtype=float), self.coefficient[level])
        return np.full_like(np.asarray(x, dtype=float), float(self.coefficient))

    def with_unit_coefficient(self):
        return EnergyForm(c=self.c, coefficient=1.0,
                          crossing_override=self.crossing_override)


@dataclass
class SymmetricSparseOperator:
    matrix: csr_matrix
    level: int
    form_kind: str  # 'energy' or 'norm'

    @property
    def dimension(self):
        return self.matrix.shape[0]


def local_stiffness_kernel(coords):
    """Exact P1 stiffness matrix of one triangle with vertex rows coords (3, 2)."""
    coords = np.asarray(coords, dtype=float)
    d = np.array([coords[2] - coords[1], coords[0] - coords[2], coords[1] - coords[0]])
    det = d[2, 0] * (-d[1, 1]) - d[2, 1] * (-d[1, 0])
    area = 0.5 * abs(det)
    if area == 0.0:
        raise AssemblyError("degenerate triangle")
    grads = np.column_stack([-d[:, 1], d[:, 0]]) / det
    return area * grads @ grads.T


def local_jump_kernel(length, weight, a_value):
    """Exact weighted jump-product integral over an edge with linear traces."""
    if length <= 0 or weight <= 0:
        raise AssemblyError("edge length and weight must be positive")
    return (weight * a_value * length / 6.0) * JUMP_KERNEL


def _triangle_geometry(T):
    pts = T.vertices[T.triangles]  # (nt, 3, 2)
    d = np.stack([pts[:, 2] - pts[:, 1], pts[:, 0] - pts[:, 2], pts[:, 1] - pts[:, 0]], axis=1)
    det = d[:, 2, 0] * (-d[:, 1, 1]) - d[:, 2, 1] * (-d[:, 1, 0])
    area = 0.5 * np.abs(det)
    grads = np.stack([-d[:, :, 1], d[:, :, 0]], axis=2) / det[:, None, None]
    return area, grads


def assemble_system(T, dofmap, net, form, K):
    """Assemble the level-K energy operator over the broken dof map.

    The volume term sums exact P1 stiffness kernels over all triangles; the
    interface term sums the weighted jump kernels over all interface edges of
    levels k <= K. Accumulation follows a fixed element order, so repeated
    runs produce identical matrices.
    """
    if dofmap.level != K:
        raise AssemblyError("dofmap level does not match requested K")
    nd = dofmap.total_dofs
    area, grads = _triangle_geometry(T)
    local = area[:, None, None] * np.einsum("tid,tjd->tij", grads, grads)
    td = dofmap.tri_dofs
    rows = np.repeat(td, 3, axis=1).ravel()
    cols = np.tile(td, (1, 3)).ravel()
    vals = local.ravel()
    keep = (rows >= 0) & (cols >= 0)
    rows, cols, vals = rows[keep], cols[keep], vals[keep]

    if len(dofmap.edge_level):
        a_vals = np.empty(len(dofmap.edge_level))
        w_vals = np.empty(len(dofmap.edge_level))
        for k in np.unique(dofmap.edge_level).tolist():
            sel = dofmap.edge_level == k
            w_vals[sel] = form.weight(net, k)
            a_vals[sel] = form.coefficient_at(k, dofmap.edge_mid[sel, 0],
                                              dofmap.edge_mid[sel, 1])
        lo, hi = form.coeff_lower, form.coeff_upper
        if (a_vals < lo).any() or (a_vals > hi).any():
            raise AssemblyError("sampled coefficient violates its declared bounds")
        quad = np.column_stack([dofmap.edge_plus, dofmap.edge_minus])  # (ne, 4)
        scale = w_vals * a_vals * dofmap.edge_length / 6.0
        jk = scale[:, None, None] * JUMP_KERNEL[None, :, :]
        erows = np.repeat(quad, 4, axis=1).ravel()
        ecols = np.tile(quad, (1, 4)).ravel()
        evals = jk.ravel()
        keep = (erows >= 0) & (ecols >= 0)
        rows = np.concatenate([rows, erows[keep]])
        cols = np.concatenate([cols, ecols[keep]])
        vals = np.concatenate([vals, evals[keep]])

    mat = coo_matrix((vals, (rows, cols)), shape=(nd, nd)).tocsr()
    kind = "norm" if (not callable(form.coefficient)
                      and not isinstance(form.coefficient, dict)
                      and float(form.coefficient) == 1.0) else "energy"
    return SymmetricSparseOperator(matrix=mat, level=K, form_kind=kind)


def assemble_load(T, dofmap, f):
    """Load vector l(phi_i) = integral of f * phi_i, edge-midpoint quadrature.

    Exact for f constant or affine; general callables are integrated with the
    same degree-2 rule.
    """
    nd = dofmap.total_dofs
    pts = T.vertices[T.triangles]
    area, _ = _triangle_geometry(T)
    mids = 0.5 * np.stack([pts[:, 0] + pts[:, 1], pts[:, 1] + pts[:, 2],
                           pts[:, 2] + pts[:, 0]], axis=1)  # (nt, 3, 2)
    if callable(f):
        fm = np.asarray(f(mids[:, :, 0], mids[:, :, 1]), dtype=float)
        fm = np.broadcast_to(fm, mids.shape[:2])
    else:
        fm = np.full(mids.shape[:2], float(f))
    phi = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    local = (area / 3.0)[:, None] * (fm @ phi)
    b = np.zeros(nd)
    td = dofmap.tri_dofs.ravel()
    keep = td >= 0
    np.add.at(b, td[keep], local.ravel()[keep])
    return b


def apply_operator(op, v):
    v = np.asarray(v)
    if v.shape[0] != op.dimension:
        raise AssemblyError(f"dimension mismatch: {v.shape[0]} vs {op.dimension}")
    return op.matrix @ v


def write_matrix_market(op, path):
    """Matrix Market coordinate format, symmetric (lower triangle stored)."""
    m = op.matrix.tocoo()
    keep = m.row >= m.col
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real symmetric\n")
        fh.write(f"% fracfem level={op.level} kind={op.form_kind}\n")
        fh.write(f"{op.dimension} {op.dimension} {int(keep.sum())}\n")
        for r, c, v in zip(m.row[keep], m.col[keep], m.data[keep]):
            fh.write(f"{r + 1} {c + 1} {v:.17g}\n")


def write_load_csv(b, path):
    with open(path, "w") as fh:
        fh.write("dof_id,value\n")
        for i, v in enumerate(b):
            fh.write(f"{i},{v:.17g}\n")
