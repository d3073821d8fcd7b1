"""Reference solvers and the multilevel patch-preconditioned conjugate gradients.

The preconditioner is an additive subspace correction: one exact solve on the
whole level-1 space plus, on every finer level k, independent solves on the
energy matrix restricted to each vertex-star patch, all prolonged back to the
finest broken space and summed. Patch factorizations are precomputed at setup;
application order is fixed, so iterate histories are reproducible bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla
from scipy.linalg import cho_factor, cho_solve


class SolverError(Exception):
    pass


class NotSPDError(SolverError):
    pass


DIRECT_SOLVE_LIMIT = 1_300_000


def solve_reference(M, b, tol=1e-12, direct_limit=DIRECT_SOLVE_LIMIT):
    """Solve M u = b to relative residual <= tol; treated as the exact solution.

    Sparse LU with iterative refinement below direct_limit unknowns, plain
    conjugate gradients otherwise. Raises NotSPDError on CG breakdown.
    """
    mat = getattr(M, "matrix", M).tocsc()
    b = np.asarray(b, dtype=float)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros_like(b)
    if mat.shape[0] <= direct_limit:
        lu = spla.splu(mat)
        x = lu.solve(b)
        for _ in range(3):
            r = b - mat @ x
            if np.linalg.norm(r) <= tol * nb:
                break
            x = x + lu.solve(r)
        return x
    x = np.zeros_like(b)
    r = b.copy()
    d = r.copy()
    rr = r @ r
    for _ in range(20 * mat.shape[0]):
        Md = mat @ d
        dMd = d @ Md
        if dMd <= 0.0:
            raise NotSPDError("conjugate gradient breakdown: operator not SPD")
        alpha = rr / dMd
        x += alpha * d
        r -= alpha * Md
        rr_new = r @ r
        if np.sqrt(rr_new) <= tol * nb:
            return x
        d = r + (rr_new / rr) * d
        rr = rr_new
    raise SolverError("reference CG did not reach the requested tolerance")


@dataclass
class PreconditionerConfig:
    levels: int = None  # default: all levels of the hierarchy
    damping: float = 1.0


@dataclass
class _PatchGroup:
    indices: np.ndarray  # (np, s) dof indices per patch
    inverses: np.ndarray  # (np, s, s)


def build_patch_solvers(operator, patches):
    """Dense inverses of the energy matrix restricted to each patch dof set.

    Patches are grouped by dof count so applications run as batched matmuls.
    """
    Mk = getattr(operator, "matrix", operator).tocsr()
    groups = {}
    for patch in patches:
        # corner stars aligned against the mesh diagonal span only the zero
        # function; they contribute nothing and are skipped
        if not len(patch.dofs):
            continue
        groups.setdefault(len(patch.dofs), []).append(patch.dofs)
    built = []
    for size in sorted(groups):
        idx = np.vstack(groups[size])
        inv = np.empty((len(idx), size, size))
        for i, dofs in enumerate(idx):
            sub = Mk[dofs][:, dofs].toarray()
            try:
                ch = cho_factor(sub, lower=True)
            except np.linalg.LinAlgError as exc:
                raise SolverError("singular patch matrix "
                                  f"(patch dofs {dofs[:4]}...)") from exc
            a = cho_solve(ch, np.eye(size))
            inv[i] = 0.5 * (a + a.T)
        built.append(_PatchGroup(indices=idx, inverses=inv))
    return built


def factorize_coarse(operator):
    return spla.splu(getattr(operator, "matrix", operator).tocsc())


class MultilevelPreconditioner:
    """Additive correction over the coarse space and all vertex-star patches.

    Built from per-level energy operators, patch indices, and the chain of
    broken-space prolongations (prolongations[j] maps level j+1 to level j+2).
    apply() evaluates
    z = E_1 A_1^{-1} R_1 r + sum_k sum_patches E_patch A_patch^{-1} R_patch r.
    Precomputed patch solvers and the coarse factorization may be shared
    between instances.
    """

    def __init__(self, operators, patches_per_level, prolongations, config=None,
                 patch_solvers=None, coarse_lu=None):
        self.config = config or PreconditionerConfig()
        K = self.config.levels or len(operators)
        self.levels = K
        mats = [getattr(op, "matrix", op) for op in operators[:K]]
        self._coarse = coarse_lu if coarse_lu is not None else factorize_coarse(mats[0])
        # cumulative prolongations P_k: level-k dofs -> level-K dofs
        self._prolong = [None] * K
        acc = None
        for k in range(K - 1, 0, -1):
            step = prolongations[k - 1]
            acc = step if acc is None else (acc @ step).tocsr()
            self._prolong[k - 1] = acc
        self._groups = []
        for k in range(2, K + 1):
            if patch_solvers is not None and k in patch_solvers:
                self._groups.append(patch_solvers[k])
            else:
                self._groups.append(build_patch_solvers(mats[k - 1],
                                                        patches_per_level[k - 1]))
        self._dims = [m.shape[0] for m in mats]

    @property
    def dimension(self):
        return self._dims[self.levels - 1]

    def apply(self, r):
        """Additive subspace correction of a residual on the finest level."""
        r = np.asarray(r, dtype=float)
        z = np.zeros_like(r)
        P1 = self._prolong[0]
        r1 = P1.T @ r if P1 is not None else r
        z1 = self._coarse.solve(r1)
        z += P1 @ z1 if P1 is not None else z1
        for k in range(2, self.levels + 1):
            Pk = self._prolong[k - 1]
            rk = Pk.T @ r if Pk is not None else r
            zk = np.zeros(self._dims[k - 1])
            for grp in self._groups[k - 2]:
                loc = np.einsum("pij,pj->pi", grp.inverses, rk[grp.indices])
                zk += np.bincount(grp.indices.ravel(), weights=loc.ravel(),
                                  minlength=len(zk))
            z += Pk @ zk if Pk is not None else zk
        if self.config.damping != 1.0:
            z *= self.config.damping
        return z


def apply_preconditioner(precond, r):
    return precond.apply(r)


@dataclass
class StopSpec:
    max_iter: int = 200
    rel_residual: float = 1e-12
    energy_tol: float = None  # absolute bound on the energy error, if known
    exact_solution: np.ndarray = None
    norm_matrix: object = None  # defaults to the system matrix (energy norm)


@dataclass
class SolveReport:
    iterations: int
    energy_errors: list = field(default_factory=list)
    reduction_factors: list = field(default_factory=list)
    rho_geometric: float = None
    residual_norms: list = field(default_factory=list)
    wall_time: float = 0.0
    converged: bool = False


def compute_reduction_factors(energy_errors):
    """Per-step factors e_v / e_{v-1} and their geometric average.

    Truncates at the first zero denominator (iteration converged exactly).
    """
    rho = []
    for prev, cur in zip(energy_errors, energy_errors[1:]):
        if prev == 0.0:
            break
        rho.append(cur / prev)
    geo = float(np.exp(np.mean(np.log(rho)))) if rho and min(rho) > 0 else None
    return rho, geo


def pcg(M, b, precond=None, x0=None, stop=None):
    """Preconditioned conjugate gradients with energy-error tracking.

    When stop.exact_solution is given, the energy error ||u - x_v|| in the
    norm of stop.norm_matrix (default M) is recorded every step together with
    the per-step reduction factors.
    """
    stop = stop or StopSpec()
    mat = getattr(M, "matrix", M)
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    nmat = getattr(stop.norm_matrix, "matrix", stop.norm_matrix) if stop.norm_matrix is not None else mat
    exact = stop.exact_solution

    def energy_error(v):
        d = exact - v
        return float(np.sqrt(max(d @ (nmat @ d), 0.0)))

    t0 = time.perf_counter()
    r = b - mat @ x
    nb = np.linalg.norm(b) or 1.0
    report = SolveReport(iterations=0)
    report.residual_norms.append(float(np.linalg.norm(r)))
    if exact is not None:
        report.energy_errors.append(energy_error(x))
    z = precond.apply(r) if precond is not None else r.copy()
    d = z.copy()
    rz = r @ z
    for nu in range(1, stop.max_iter + 1):
        Md = mat @ d
        dMd = d @ Md
        if dMd <= 0.0:
            raise NotSPDError("pcg breakdown: operator not SPD")
        alpha = rz / dMd
        x += alpha * d
        r -= alpha * Md
        report.iterations = nu
        report.residual_norms.append(float(np.linalg.norm(r)))
        if exact is not None:
            report.energy_errors.append(energy_error(x))
        done = report.residual_norms[-1] <= stop.rel_residual * nb
        if stop.energy_tol is not None and exact is not None:
            done = done or report.energy_errors[-1] <= stop.energy_tol
        if done:
            report.converged = True
            break
        z = precond.apply(r) if precond is not None else r.copy()
        rz_new = r @ z
        beta = rz_new / rz
        d = z + beta * d
        rz = rz_new
    report.wall_time = time.perf_counter() - t0
    if exact is not None:
        report.reduction_factors, report.rho_geometric = \
            compute_reduction_factors(report.energy_errors)
    return x, report


@dataclass
class NestedIterationReport:
    levels: list = field(default_factory=list)
    steps: list = field(default_factory=list)  # PCG steps taken per level
    achieved_errors: list = field(default_factory=list)
    stopping_bounds: list = field(default_factory=list)


def nested_iteration(problems, precond_config=None, verify=True):
    """Nested iteration over a problem hierarchy with the two-level stopping rule.

    Starts each level from the prolonged final iterate of the previous one and
    iterates until the algebraic error drops below the level-increment bound
    ||u_{K+1} - u_K||, evaluated from reference solves. The hierarchy must
    therefore contain one level beyond the last one iterated on.
    """
    if len(problems) < 3:
        raise SolverError("nested iteration needs levels 1 .. K_max + 1")
    top = len(problems) - 1  # last level iterated on (problems[-1] only feeds the bound)
    refs = [p.reference_solution() for p in problems]
    report = NestedIterationReport()
    x = refs[0]
    for i in range(1, top):
        prob = problems[i]
        x = prob.prolong_from_prev @ x
        diff = problems[i + 1].prolong_from_prev @ refs[i] - refs[i + 1]
        nmat = problems[i + 1].norm_operator.matrix
        bound = float(np.sqrt(max(diff @ (nmat @ diff), 0.0)))
        precond = prob.preconditioner(precond_config)
        stop = StopSpec(max_iter=100, energy_tol=bound, exact_solution=refs[i],
                        norm_matrix=prob.norm_operator)
        x, rep = pcg(prob.energy_operator, prob.load, precond, x0=x, stop=stop)
        report.levels.append(prob.K)
        report.steps.append(rep.iterations)
        report.achieved_errors.append(rep.energy_errors[-1])
        report.stopping_bounds.append(bound)
    return report


def write_solver_csv(path, rows):
    """Solver log: one row per (level, iteration)."""
    with open(path, "w") as fh:
        fh.write("# fracfem solver log schema v1\n")
        fh.write("level,iter,energy_error,rho,residual2\n")
        for level, it, err, rho, res in rows:
            rho_s = f"{rho:.17g}" if rho is not None else ""
            err_s = f"{err:.17g}" if err is not None else ""
            fh.write(f"{level},{it},{err_s},{rho_s},{res:.17g}\n")
