"""Figure rendering for study reports; every study drops PNGs next to its CSVs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_network(net, path, max_level=None):
    K = max_level or net.max_level
    fig, ax = plt.subplots(figsize=(5, 5))
    scale = 2.0 ** -net.scale_exp
    cmap = plt.get_cmap("viridis")
    for k in range(1, K + 1):
        arr = net.facets_by_level.get(k)
        if arr is None or not len(arr):
            continue
        color = cmap((k - 1) / max(K - 1, 1))
        for x0, y0, x1, y1, _axis in arr.tolist():
            ax.plot([x0 * scale, x1 * scale], [y0 * scale, y1 * scale],
                    color=color, lw=max(2.2 - 0.3 * k, 0.5))
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_aspect("equal")
    ax.set_title(f"{net.kind} interface network, levels 1..{K}")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_convergence(study, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    ks = np.array(study.levels)
    ax.semilogy(ks, study.e_values, "o:", label="$e_K$")
    ref = study.e_values[0] * study.factor ** (ks - ks[0])
    ax.semilogy(ks, ref, "-", label=f"fit factor {study.factor:.3f}")
    ax.semilogy(ks, study.e_values[0] * 0.5 ** (ks - ks[0]), "--",
                color="gray", label="factor 0.5")
    ax.set_xlabel("level $K$")
    ax.set_ylabel("error estimate $e_K$")
    ax.legend()
    ax.set_title("homogenization error decay")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_reduction_factors(levels, factors_per_level, averages, path):
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for K, factors in zip(levels, factors_per_level):
        ax.plot(np.arange(1, len(factors) + 1), factors, "o-", label=f"K={K}")
    for K, avg in zip(levels, averages):
        ax.axhline(avg, color="gray", lw=0.5, ls=":")
    ax.set_xlabel(r"iteration $\nu$")
    ax.set_ylabel(r"reduction factor $\rho_K^{(\nu)}$")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    ax.set_title("algebraic error reduction factors")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_nested(report, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.semilogy(report.levels, report.stopping_bounds, "s--", label="stopping bound")
    ax.semilogy(report.levels, report.achieved_errors, "o-", label="achieved error")
    ax.set_xlabel("level $K$")
    ax.set_ylabel("energy error")
    for K, s in zip(report.levels, report.steps):
        ax.annotate(str(s), (K, report.achieved_errors[report.levels.index(K)]),
                    textcoords="offset points", xytext=(0, 6), fontsize=8)
    ax.legend()
    ax.set_title("nested iteration (annotations: PCG steps)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_properties(rows, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [r["check"] for r in rows]
    vals = [max(r["worst_ratio"], 1e-18) for r in rows]
    colors = ["tab:green" if r["pass"] else "tab:red" for r in rows]
    ax.barh(range(len(rows)), vals, color=colors)
    ax.set_yticks(range(len(rows)), names, fontsize=7)
    ax.set_xscale("log")
    ax.set_xlabel("worst ratio / defect")
    ax.set_title("property suites")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_solution(T, dofmap, u, path):
    """Flat-shaded broken solution; interface jumps render as color steps."""
    from matplotlib.tri import Triangulation as MplTri

    vals = np.where(dofmap.tri_dofs >= 0,
                    np.asarray(u)[np.clip(dofmap.tri_dofs, 0, None)], 0.0)
    face = vals.mean(axis=1)
    tri = MplTri(T.vertices[:, 0], T.vertices[:, 1], T.triangles)
    fig, ax = plt.subplots(figsize=(5, 4.2))
    tpc = ax.tripcolor(tri, facecolors=face, cmap="viridis")
    fig.colorbar(tpc, ax=ax)
    ax.set_aspect("equal")
    ax.set_title("broken solution (cellwise)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
