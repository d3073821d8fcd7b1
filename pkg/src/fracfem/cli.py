"""Experiment driver: geometry generation, studies, exports, reports.

Configuration is a plain-text `key = value` file with `#` comments; unknown
keys are rejected. Every study writes its config echo, schema-versioned CSV
tables, and matplotlib figures into the output directory, and is reproducible
bit for bit from the same config (timings live in summary.txt only).
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from . import analysis, assembly, geometry, mesh, plots, problem, solve

ENV_OUTDIR = "FRACFEM_OUTDIR"


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    kind: str = "cantor"
    K_max: int = 8
    h1: float = None  # default per kind: 2^-1 cantor, 2^-4 layered
    c: float = 1.0
    f: float = 1.0
    coefficient: float = 1.0
    crossing_override: str = ""  # e.g. "1:1,2:3"; empty = network defaults
    seed: int = 0
    tolerance: float = 1e-12
    max_iterations: int = 200
    preconditioner: bool = True
    rho_steps: int = 8
    K_ref: int = 8
    study: str = "convergence"
    output_dir: str = ""

    def __post_init__(self):
        if self.kind not in ("cantor", "layered"):
            raise ConfigError(f"kind must be cantor or layered, got {self.kind!r}")
        if self.K_max < 1:
            raise ConfigError("K_max must be >= 1")
        if self.c <= 0:
            raise ConfigError("material constant c must be > 0")
        if self.h1 is not None:
            p = -np.log2(self.h1)
            if p != round(p):
                raise ConfigError("h1 must be a dyadic fraction 2**-p")
        if self.study not in ("convergence", "preconditioner", "nested", "properties"):
            raise ConfigError(f"unknown study kind {self.study!r}")

    @property
    def effective_h1(self):
        if self.h1 is not None:
            return self.h1
        return (problem.CANTOR_DEFAULT_H1 if self.kind == "cantor"
                else problem.LAYERED_DEFAULT_H1)

    def crossing_map(self):
        if not self.crossing_override:
            return None
        out = {}
        for item in self.crossing_override.split(","):
            k, v = item.split(":")
            out[int(k)] = int(v)
        return out


_BOOL = {"true": True, "on": True, "1": True, "yes": True,
         "false": False, "off": False, "0": False, "no": False}


def validate_config(text):
    """Parse a key = value config; unknown keys and bad values are errors."""
    spec = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in spec:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if key in ("K_max", "seed", "max_iterations", "rho_steps", "K_ref"):
                values[key] = int(val)
            elif key in ("h1", "c", "f", "coefficient", "tolerance"):
                values[key] = float(val)
            elif key == "preconditioner":
                values[key] = _BOOL[val.lower()]
            else:
                values[key] = val
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def serialize_config(cfg):
    lines = []
    for f in fields(ExperimentConfig):
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if isinstance(v, bool):
            v = "on" if v else "off"
        elif isinstance(v, float):
            v = f"{v:.17g}"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def _build(cfg, levels):
    return problem.build_hierarchy(
        kind=cfg.kind, levels=levels, h1=cfg.effective_h1, c=cfg.c, f=cfg.f,
        coefficient=cfg.coefficient, seed=cfg.seed,
        crossing_override=cfg.crossing_map())


def _csv_header(fh, cfg, name):
    fh.write(f"# fracfem {name} schema v1\n")
    fh.write("# config: " + "; ".join(serialize_config(cfg).strip().splitlines()) + "\n")
    fh.write(f"# seed: {cfg.seed}\n")


def _outdir(cfg):
    out = cfg.output_dir or os.environ.get(ENV_OUTDIR, "fracfem-out")
    os.makedirs(out, exist_ok=True)
    return out


def run_convergence_study(cfg):
    out = _outdir(cfg)
    t0 = time.perf_counter()
    hier = _build(cfg, cfg.K_ref + 1)
    study = analysis.convergence_study(hier, cfg.K_ref)
    with open(os.path.join(out, "convergence.csv"), "w") as fh:
        _csv_header(fh, cfg, "convergence")
        fh.write("K,e_K,fit_factor\n")
        for K, e in zip(study.levels, study.e_values):
            fh.write(f"{K},{e:.17g},{study.factor:.17g}\n")
    plots.render_convergence(study, os.path.join(out, "convergence.png"))
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write(f"convergence study: kind={cfg.kind} K_ref={cfg.K_ref}\n")
        fh.write(f"fitted per-level factor: {study.factor:.6f}"
                 f" (fit residual {study.fit_residual:.3e})\n")
        fh.write(f"wall time: {time.perf_counter() - t0:.1f}s\n")
    print(f"convergence: factor={study.factor:.4f} -> {out}")
    return 0


def _rho_levels(cfg):
    lo = 5 if cfg.kind == "cantor" and cfg.K_max >= 5 else 2
    return list(range(lo, cfg.K_max + 1))


def run_preconditioner_study(cfg):
    out = _outdir(cfg)
    t0 = time.perf_counter()
    hier = _build(cfg, cfg.K_max)
    levels = _rho_levels(cfg)
    coarse = hier.reference_solution(1)
    factors, averages, log_rows = [], [], []
    for K in levels:
        prob = hier.level(K)
        exact = prob.reference_solution()
        x0 = hier.prolong_to(coarse, 1, K)
        pre = prob.preconditioner() if cfg.preconditioner else None
        stop = solve.StopSpec(max_iter=cfg.rho_steps, rel_residual=0.0,
                              exact_solution=exact, norm_matrix=prob.norm_operator)
        _, rep = solve.pcg(prob.energy_operator, prob.load, pre, x0=x0, stop=stop)
        factors.append(rep.reduction_factors)
        averages.append(rep.rho_geometric)
        for it, (err, res) in enumerate(zip(rep.energy_errors, rep.residual_norms)):
            rho = rep.reduction_factors[it - 1] if 1 <= it <= len(rep.reduction_factors) else None
            log_rows.append((K, it, err, rho, res))
    with open(os.path.join(out, "reduction_factors.csv"), "w") as fh:
        _csv_header(fh, cfg, "reduction_factors")
        fh.write("nu," + ",".join(f"K={K}" for K in levels) + "\n")
        for nu in range(cfg.rho_steps):
            row = [f"{f[nu]:.17g}" if nu < len(f) else "" for f in factors]
            fh.write(f"{nu + 1}," + ",".join(row) + "\n")
        fh.write("rho_K," + ",".join(f"{a:.17g}" for a in averages) + "\n")
    solve.write_solver_csv(os.path.join(out, "solver_log.csv"), log_rows)
    plots.render_reduction_factors(levels, factors, averages,
                                   os.path.join(out, "reduction_factors.png"))
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write(f"preconditioner study: kind={cfg.kind} K={levels}\n")
        for K, a in zip(levels, averages):
            fh.write(f"rho_{K} = {a:.4f}\n")
        fh.write(f"wall time: {time.perf_counter() - t0:.1f}s\n")
    print("preconditioner: rho =",
          " ".join(f"{K}:{a:.3f}" for K, a in zip(levels, averages)), f"-> {out}")
    return 0


def run_nested_study(cfg):
    out = _outdir(cfg)
    t0 = time.perf_counter()
    hier = _build(cfg, cfg.K_max + 1)
    report = solve.nested_iteration(hier.problems)
    with open(os.path.join(out, "nested.csv"), "w") as fh:
        _csv_header(fh, cfg, "nested")
        fh.write("level,nu0,achieved_error,stopping_bound,met\n")
        for K, s, err, bnd in zip(report.levels, report.steps,
                                  report.achieved_errors, report.stopping_bounds):
            fh.write(f"{K},{s},{err:.17g},{bnd:.17g},{int(err <= bnd)}\n")
    plots.render_nested(report, os.path.join(out, "nested.png"))
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write(f"nested iteration: kind={cfg.kind} levels 2..{cfg.K_max}\n")
        fh.write(f"steps per level: {report.steps}\n")
        fh.write(f"wall time: {time.perf_counter() - t0:.1f}s\n")
    print(f"nested: steps={report.steps} -> {out}")
    return 0


def run_properties_study(cfg):
    out = _outdir(cfg)
    t0 = time.perf_counter()
    levels = min(cfg.K_max, 5)
    hier = _build(cfg, max(levels, 3))
    rng = np.random.default_rng(cfg.seed)
    rows = []

    def record(check, worst, ok):
        rows.append({"check": check, "seed": cfg.seed,
                     "worst_ratio": float(worst), "pass": bool(ok)})

    per_level = max(1, 200 // levels) * levels  # about 200 draws spread over levels
    worst = 0.0
    for K in range(1, levels + 1):
        prob = hier.level(K)
        for _ in range(200):
            v = analysis.random_broken_vector(prob, rng)
            lhs, rhs, ok = analysis.poincare_check(prob, v)
            worst = max(worst, lhs / rhs if rhs else 0.0)
    record("poincare", worst, worst <= 1.0)

    worst = 0.0
    for K in range(2, levels + 1):
        prob = hier.level(K)
        v = analysis.random_broken_vector(prob, rng)
        segs = analysis.sample_segments(prob, 250, rng)
        worst = max(worst, analysis.fundamental_estimate_check(prob, v, segs))
    record("fundamental_estimate", worst, worst <= 1.0)

    worst = 0.0
    for K in range(1, levels + 1):
        prob = hier.level(K)
        for _ in range(40):
            v = analysis.random_broken_vector(prob, rng)
            cx = rng.uniform(-1, 1, size=(2, 2))
            cy = rng.uniform(-1, 1, size=(2, 2))
            phi = analysis.PolyField(cx=cx, cy=cy)
            worst = max(worst, analysis.green_identity_check(prob, v, phi))
    record("green_identity", worst, worst <= 1e-12)

    defect, pyth = analysis.galerkin_orthogonality_check(hier, 2, min(3, hier.levels))
    record("galerkin_orthogonality", defect, defect <= 1e-10)
    record("energy_pythagoras", pyth, pyth <= 1e-10)

    worst = 0.0
    for K in range(1, levels + 1):
        prob = hier.level(K)
        nrm, bound, ok = analysis.stability_check(prob)
        worst = max(worst, nrm / bound)
    record("stability_bound", worst, worst <= 1.0)

    with open(os.path.join(out, "properties.csv"), "w") as fh:
        _csv_header(fh, cfg, "properties")
        fh.write("check,seed,worst_ratio,pass\n")
        for r in rows:
            fh.write(f"{r['check']},{r['seed']},{r['worst_ratio']:.17g},{int(r['pass'])}\n")
    plots.render_properties(rows, os.path.join(out, "properties.png"))
    ok = all(r["pass"] for r in rows)
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write(f"property suites: kind={cfg.kind} levels<= {levels}\n")
        for r in rows:
            fh.write(f"{r['check']}: worst={r['worst_ratio']:.3e} "
                     f"{'pass' if r['pass'] else 'FAIL'}\n")
        fh.write(f"wall time: {time.perf_counter() - t0:.1f}s\n")
    for r in rows:
        print(f"property {r['check']}: {'pass' if r['pass'] else 'FAIL'}"
              f" (worst {r['worst_ratio']:.3e})")
    return 0 if ok else 1


def run_study(cfg):
    runner = {"convergence": run_convergence_study,
              "preconditioner": run_preconditioner_study,
              "nested": run_nested_study,
              "properties": run_properties_study}[cfg.study]
    out = _outdir(cfg)
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(serialize_config(cfg))
    return runner(cfg)


def export_solution(u, T, dofmap, path):
    """VTK legacy ASCII with per-cell duplicated vertices so jumps render.

    Point list is all broken dofs followed by the boundary vertices (value 0);
    triangle corners reference their cell's dof copy.
    """
    nd = dofmap.total_dofs
    bverts = np.nonzero(T.boundary_vertex)[0]
    bindex = {int(b): nd + i for i, b in enumerate(bverts.tolist())}
    npts = nd + len(bverts)
    coords = np.vstack([T.vertices[dofmap.dof_vertex], T.vertices[bverts]])
    values = np.concatenate([np.asarray(u), np.zeros(len(bverts))])
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nfracfem broken solution\nASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {npts} double\n")
        for x, y in coords.tolist():
            fh.write(f"{x:.17g} {y:.17g} 0\n")
        nt = T.num_triangles
        fh.write(f"CELLS {nt} {4 * nt}\n")
        for t in range(nt):
            ids = []
            for local in range(3):
                d = dofmap.tri_dofs[t, local]
                ids.append(int(d) if d >= 0 else bindex[int(T.triangles[t, local])])
            fh.write(f"3 {ids[0]} {ids[1]} {ids[2]}\n")
        fh.write(f"CELL_TYPES {nt}\n")
        fh.write("\n".join(["5"] * nt) + "\n")
        fh.write(f"POINT_DATA {npts}\nSCALARS u double 1\nLOOKUP_TABLE default\n")
        for v in values.tolist():
            fh.write(f"{v:.17g}\n")


def run_generate(cfg):
    out = _outdir(cfg)
    if cfg.kind == "cantor":
        net = geometry.build_cantor_network(cfg.K_max)
    else:
        net = geometry.build_layered_network(
            geometry.LayeredNetworkConfig(seed=cfg.seed), cfg.K_max, cfg.effective_h1)
    geometry.save_network(net, os.path.join(out, "network.txt"))
    plots.render_network(net, os.path.join(out, "network.png"))
    stats = geometry.network_stats(net)
    with open(os.path.join(out, "network_stats.csv"), "w") as fh:
        _csv_header(fh, cfg, "network_stats")
        fh.write("level,facet_count,total_length,d_k,C_k\n")
        for row in stats["levels"]:
            fh.write(f"{row['level']},{row['facet_count']},{row['total_length']:.17g},"
                     f"{row['d_k']:.17g},{row['C_k']}\n")
    print(f"generated {cfg.kind} network K={cfg.K_max} -> {out}")
    return 0


def run_export(cfg, level):
    out = _outdir(cfg)
    K = level or cfg.K_max
    hier = _build(cfg, K)
    prob = hier.level(K)
    u = prob.reference_solution()
    mesh.write_vtk_mesh(prob.mesh, prob.dofmap.tri_cell, os.path.join(out, "mesh.vtk"))
    mesh.write_dofmap_csv(prob.dofmap, prob.mesh, os.path.join(out, "dofmap.csv"))
    assembly.write_matrix_market(prob.energy_operator, os.path.join(out, "operator.mtx"))
    assembly.write_load_csv(prob.load, os.path.join(out, "load.csv"))
    export_solution(u, prob.mesh, prob.dofmap, os.path.join(out, "solution.vtk"))
    plots.render_solution(prob.mesh, prob.dofmap, u, os.path.join(out, "solution.png"))
    print(f"exported level-{K} problem -> {out}")
    return 0


def _add_config_args(sub):
    sub.add_argument("--config", help="path to a key = value config file")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config field")
    sub.add_argument("-o", "--output", help="output directory "
                     f"(default: config, then ${ENV_OUTDIR}, then ./fracfem-out)")


def _load_config(args, **extra):
    text = ""
    if args.config:
        with open(args.config) as fh:
            text = fh.read()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        text += "\n" + item.replace("=", " = ", 1)
    cfg = validate_config(text)
    if args.output:
        cfg = replace(cfg, output_dir=args.output)
    for key, val in extra.items():
        cfg = replace(cfg, **{key: val})
    return cfg


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="fracfem",
        description="Broken-P1 solvers and studies on hierarchical interface networks")
    subs = parser.add_subparsers(dest="command", required=True)

    g = subs.add_parser("generate", help="generate an interface network")
    _add_config_args(g)
    g.add_argument("-K", "--levels", type=int, help="network depth (overrides K_max)")

    s = subs.add_parser("study", help="run a study end to end")
    s.add_argument("study_kind",
                   choices=["convergence", "preconditioner", "nested", "properties"])
    _add_config_args(s)

    e = subs.add_parser("export", help="export mesh, operator, and solution files")
    _add_config_args(e)
    e.add_argument("--level", type=int, help="hierarchy level to export (default K_max)")

    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            cfg = _load_config(args)
            if args.levels:
                cfg = replace(cfg, K_max=args.levels)
            return run_generate(cfg)
        if args.command == "study":
            cfg = _load_config(args, study=args.study_kind)
            return run_study(cfg)
        if args.command == "export":
            cfg = _load_config(args)
            return run_export(cfg, args.level)
    except (ConfigError, geometry.GeometryError, mesh.MeshError,
            assembly.AssemblyError, solve.SolverError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
