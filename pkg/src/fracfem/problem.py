"""Level-by-level problem hierarchies: geometry, meshes, dofs, operators, loads.

A Hierarchy bundles everything the studies need for levels 1..K_max of one
interface network: nested meshes, broken dof maps, energy and norm operators,
load vectors, prolongations between consecutive broken spaces, and cached
patch factorizations for the multilevel preconditioner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import assembly, geometry, mesh, solve

CANTOR_DEFAULT_H1 = 2.0 ** -1
LAYERED_DEFAULT_H1 = 2.0 ** -4


@dataclass
class LevelProblem:
    """View of one level of a Hierarchy."""

    hierarchy: "Hierarchy"
    K: int

    @property
    def mesh(self):
        return self.hierarchy.meshes[self.K - 1]

    @property
    def partition(self):
        return self.hierarchy.partitions[self.K - 1]

    @property
    def dofmap(self):
        return self.hierarchy.dofmaps[self.K - 1]

    @property
    def energy_operator(self):
        return self.hierarchy.operators[self.K - 1]

    @property
    def norm_operator(self):
        return self.hierarchy.norm_operators[self.K - 1]

    @property
    def load(self):
        return self.hierarchy.loads[self.K - 1]

    @property
    def prolong_from_prev(self):
        return self.hierarchy.prolongations[self.K - 2] if self.K >= 2 else None

    def reference_solution(self):
        return self.hierarchy.reference_solution(self.K)

    def preconditioner(self, config=None):
        return self.hierarchy.preconditioner(self.K, config)


class Hierarchy:
    """Assembled level-K interface problems for K = 1..levels."""

    def __init__(self, net, form, f, h1, levels):
        if levels > net.max_level:
            raise geometry.GeometryError("hierarchy deeper than the network")
        self.net = net
        self.form = form
        self.f = f
        self.meshes = mesh.build_hierarchy(h1, levels)
        self.partitions = [geometry.compute_cell_partition(net, k)
                           for k in range(1, levels + 1)]
        self.dofmaps = [mesh.build_broken_dof_map(T, p, net)
                        for T, p in zip(self.meshes, self.partitions)]
        self.operators = [assembly.assemble_system(T, dm, net, form, k + 1)
                          for k, (T, dm) in enumerate(zip(self.meshes, self.dofmaps))]
        unit = form.with_unit_coefficient()
        if self.operators[0].form_kind == "norm":
            self.norm_operators = self.operators
        else:
            self.norm_operators = [assembly.assemble_system(T, dm, net, unit, k + 1)
                                   for k, (T, dm) in enumerate(zip(self.meshes, self.dofmaps))]
        self.loads = [assembly.assemble_load(T, dm, f)
                      for T, dm in zip(self.meshes, self.dofmaps)]
        self.prolongations = [
            mesh.prolongation_matrix(self.dofmaps[k], self.dofmaps[k + 1],
                                     self.partitions[k], self.partitions[k + 1],
                                     self.meshes[k + 1])
            for k in range(levels - 1)]
        self.levels = levels
        self._references = {}
        self._patches = {}
        self._patch_solvers = {}
        self._coarse_lu = None
        self._precond = {}

    def level(self, K):
        return LevelProblem(self, K)

    @property
    def problems(self):
        return [self.level(K) for K in range(1, self.levels + 1)]

    def reference_solution(self, K):
        if K not in self._references:
            self._references[K] = solve.solve_reference(
                self.operators[K - 1], self.loads[K - 1])
        return self._references[K]

    def patches(self, k):
        if k not in self._patches:
            self._patches[k] = mesh.enumerate_patches(self.meshes, self.dofmaps, k)
        return self._patches[k]

    def preconditioner(self, K, config=None):
        key = (K, config.damping if config else 1.0)
        if key not in self._precond:
            if self._coarse_lu is None:
                self._coarse_lu = solve.factorize_coarse(self.operators[0])
            for k in range(2, K + 1):
                if k not in self._patch_solvers:
                    self._patch_solvers[k] = solve.build_patch_solvers(
                        self.operators[k - 1], self.patches(k))
            self._precond[key] = solve.MultilevelPreconditioner(
                self.operators[:K], None, self.prolongations[:K - 1], config,
                patch_solvers={k: self._patch_solvers[k] for k in range(2, K + 1)},
                coarse_lu=self._coarse_lu)
        return self._precond[key]

    def prolong_to(self, v, K_from, K_to):
        """Embed a level-K_from coefficient vector into the level-K_to space."""
        for k in range(K_from, K_to):
            v = self.prolongations[k - 1] @ v
        return v


def build_hierarchy(kind="cantor", levels=5, h1=None, c=1.0, f=1.0, coefficient=1.0,
                    seed=0, crossing_override=None, layered_config=None,
                    extra_network_levels=1):
    """Build the network and the assembled hierarchy for a study.

    The network is generated extra_network_levels deeper than the hierarchy so
    invariant-cell flags at the top level are meaningful.
    """
    net_levels = levels + extra_network_levels
    if kind == "cantor":
        h1 = CANTOR_DEFAULT_H1 if h1 is None else h1
        net = geometry.build_cantor_network(net_levels)
    elif kind == "layered":
        h1 = LAYERED_DEFAULT_H1 if h1 is None else h1
        cfg = layered_config or geometry.LayeredNetworkConfig(seed=seed)
        net = geometry.build_layered_network(cfg, net_levels, h1)
    else:
        raise geometry.GeometryError(f"unknown geometry kind {kind!r}")
    form = assembly.EnergyForm(c=c, coefficient=coefficient,
                               crossing_override=crossing_override)
    return Hierarchy(net, form, f, h1, levels)
