"""Mesh hierarchy, broken dof map, patch, and prolongation tests."""

import numpy as np
import pytest

from fracfem import geometry as geo
from fracfem import mesh
from fracfem import problem


def build_ctx(kind="cantor", levels=3, **kw):
    return problem.build_hierarchy(kind=kind, levels=levels, **kw)


class TestTriangulation:
    def test_initial_counts(self):
        T = mesh.build_initial_triangulation(0.5)
        assert T.num_triangles == 8
        assert T.num_vertices == 9

    def test_h1_one(self):
        T = mesh.build_initial_triangulation(1.0)
        assert T.num_triangles == 2

    def test_h1_sixteenth(self):
        T = mesh.build_initial_triangulation(2.0 ** -4)
        assert T.num_triangles == 512

    def test_rejects_non_dyadic(self):
        with pytest.raises(mesh.MeshError):
            mesh.build_initial_triangulation(0.3)

    def test_refine_quadruples(self):
        T = mesh.build_initial_triangulation(0.5)
        R = mesh.refine_uniform(T)
        assert R.num_triangles == 32
        assert R.h == T.h / 2

    def test_vertex_counts_structured(self):
        T = mesh.build_initial_triangulation(0.5)
        for K in (2, 3, 4):
            T = mesh.refine_uniform(T)
            assert T.num_vertices == (2 ** K + 1) ** 2

    def test_nested_vertices(self):
        T = mesh.build_initial_triangulation(0.5)
        R = mesh.refine_uniform(T)
        assert np.array_equal(R.vertices[:T.num_vertices], T.vertices)

    def test_refinement_commutes_with_itself(self):
        a = mesh.refine_uniform(mesh.refine_uniform(mesh.build_initial_triangulation(0.5)))
        b = mesh.build_initial_triangulation(0.5)
        for _ in range(2):
            b = mesh.refine_uniform(b)
        assert np.array_equal(a.triangles, b.triangles)

    def test_regularity_edge_sharing(self):
        T = mesh.refine_uniform(mesh.build_initial_triangulation(0.5))
        # every interior edge is shared by exactly two triangles
        interior = T.edge_triangles[:, 1] >= 0
        assert interior.sum() > 0
        assert (T.edge_triangles[interior] >= 0).all()


class TestResolves:
    def test_cantor_resolved(self):
        net = geo.build_cantor_network(3)
        T = mesh.build_initial_triangulation(0.5)
        for _ in range(2):
            T = mesh.refine_uniform(T)
        ok, violations = mesh.check_resolves(T, net, 3)
        assert ok and not violations

    def test_coarse_mesh_fails(self):
        net = geo.build_cantor_network(3)
        T = mesh.refine_uniform(mesh.build_initial_triangulation(0.5))  # level 2
        ok, violations = mesh.check_resolves(T, net, 3)
        assert not ok and violations

    def test_empty_network(self):
        net = geo.build_cantor_network(0)
        T = mesh.build_initial_triangulation(0.5)
        ok, violations = mesh.check_resolves(T, net, 0)
        assert ok and not violations


class TestBrokenDofMap:
    def test_k0_single_dof(self):
        hier = build_ctx(levels=1, kind="cantor")
        # K=0 equivalent: no-interface network on the coarse mesh
        net = geo.build_cantor_network(0)
        T = mesh.build_initial_triangulation(0.5)
        part = geo.compute_cell_partition(net, 0)
        dm = mesh.build_broken_dof_map(T, part, net)
        assert dm.total_dofs == 1

    def test_cantor_k1_count_oracle(self):
        net = geo.build_cantor_network(1)
        T = mesh.build_initial_triangulation(0.5)
        part = geo.compute_cell_partition(net, 1)
        dm = mesh.build_broken_dof_map(T, part, net)
        # direct incidence oracle: count (cell, vertex) pairs over non-boundary vertices
        pairs = set()
        for t in range(T.num_triangles):
            for v in T.triangles[t]:
                if not T.boundary_vertex[v]:
                    pairs.add((int(dm.tri_cell[t]), int(v)))
        assert dm.total_dofs == len(pairs) == 4

    def test_edge_records_have_four_distinct_dofs(self):
        hier = build_ctx(levels=3)
        dm = hier.dofmaps[2]
        quad = np.column_stack([dm.edge_plus, dm.edge_minus])
        for row in quad:
            live = row[row >= 0]
            assert len(set(live.tolist())) == len(live)
            # interior edges carry all four
        interior = (quad >= 0).all(axis=1)
        assert interior.any()

    def test_edge_lengths_sum_to_interface_length(self):
        hier = build_ctx(levels=3)
        net = hier.net
        dm = hier.dofmaps[2]
        for k in (1, 2, 3):
            total = dm.edge_length[dm.edge_level == k].sum()
            assert total == pytest.approx(net.level_length(k), rel=1e-12)

    def test_plus_minus_sides_follow_normals(self):
        hier = build_ctx(levels=2)
        dm, T = hier.dofmaps[1], hier.meshes[1]
        part = hier.partitions[1]
        g = 2 ** part.grid_exp
        for i in range(len(dm.edge_level)):
            mid = dm.edge_mid[i]
            vertical = abs(mid[0] * T.n - round(mid[0] * T.n)) < 1e-9
            eps = 0.5 / g
            if vertical:
                plus_pix = part.labels[int((mid[0] + eps) * g), int(mid[1] * g)]
                minus_pix = part.labels[int((mid[0] - eps) * g), int(mid[1] * g)]
            else:
                plus_pix = part.labels[int(mid[0] * g), int((mid[1] + eps) * g)]
                minus_pix = part.labels[int(mid[0] * g), int((mid[1] - eps) * g)]
            live = dm.edge_plus[i][dm.edge_plus[i] >= 0]
            if len(live):
                assert (dm.dof_cell[live] == plus_pix).all()
            live = dm.edge_minus[i][dm.edge_minus[i] >= 0]
            if len(live):
                assert (dm.dof_cell[live] == minus_pix).all()


class TestPatches:
    def test_k1_single_patch(self):
        hier = build_ctx(levels=2)
        patches = mesh.enumerate_patches(hier.meshes, hier.dofmaps, 1)
        assert len(patches) == 1
        assert np.array_equal(patches[0].dofs, np.arange(hier.dofmaps[0].total_dofs))

    def test_k2_patch_count(self):
        hier = build_ctx(levels=2)
        patches = mesh.enumerate_patches(hier.meshes, hier.dofmaps, 2)
        assert len(patches) == 9  # one per level-1 vertex

    def test_patch_cover(self):
        hier = build_ctx(levels=3)
        for k in (2, 3):
            patches = mesh.enumerate_patches(hier.meshes, hier.dofmaps, k)
            covered = np.zeros(hier.dofmaps[k - 1].total_dofs, dtype=bool)
            for p in patches:
                covered[p.dofs] = True
            assert covered.all()

    def test_patch_functions_vanish_outside(self):
        hier = build_ctx(levels=2)
        T = hier.meshes[1]
        dm = hier.dofmaps[1]
        patches = mesh.enumerate_patches(hier.meshes, hier.dofmaps, 2)
        children = np.argsort(T.parent_triangle, kind="stable").reshape(-1, 4)
        for p in patches:
            inside = np.zeros(T.num_triangles, dtype=bool)
            inside[children[p.coarse_triangles].ravel()] = True
            member = np.zeros(dm.total_dofs, dtype=bool)
            member[p.dofs] = True
            # any triangle outside the patch must reference no patch dof
            outside_dofs = dm.tri_dofs[~inside].ravel()
            outside_dofs = outside_dofs[outside_dofs >= 0]
            assert not member[outside_dofs].any()


class TestProlongation:
    def test_pointwise_values_preserved(self):
        hier = build_ctx(levels=3)
        rng = np.random.default_rng(2)
        v = rng.uniform(-1, 1, hier.dofmaps[1].total_dofs)
        P = hier.prolongations[1]
        vf = P @ v
        Tc, Tf = hier.meshes[1], hier.meshes[2]
        dmc, dmf = hier.dofmaps[1], hier.dofmaps[2]
        # inherited vertices keep their per-cell values
        ratio = 2 ** (hier.partitions[2].grid_exp - hier.partitions[1].grid_exp)
        for d in range(dmf.total_dofs):
            vtx = dmf.dof_vertex[d]
            a, b = Tf.midpoint_parents[vtx]
            if a == b and a < Tc.num_vertices:
                pix = np.argwhere(hier.partitions[2].labels == dmf.dof_cell[d])[0]
                pc = hier.partitions[1].labels[pix[0] // ratio, pix[1] // ratio]
                dc = dmc.dof_of(np.array([pc]), np.array([a]))[0]
                expect = v[dc] if dc >= 0 else 0.0
                assert vf[d] == pytest.approx(expect, abs=1e-15)

    def test_interface_midpoints_take_cell_side_trace(self):
        hier = build_ctx(levels=2)
        dmc, dmf = hier.dofmaps[0], hier.dofmaps[1]
        P = hier.prolongations[0]
        v = np.arange(1.0, dmc.total_dofs + 1)
        vf = P @ v
        # all four level-1 dofs sit at the cross center; each cell side keeps its own trace
        Tf = hier.meshes[1]
        for d in range(dmf.total_dofs):
            vtx = dmf.dof_vertex[d]
            a, b = Tf.midpoint_parents[vtx]
            if a == b and not Tf.boundary_vertex[vtx] and a < hier.meshes[0].num_vertices:
                assert vf[d] in set(v.tolist())

    def test_vtk_and_csv_exports(self, tmp_path):
        hier = build_ctx(levels=2)
        T, dm = hier.meshes[1], hier.dofmaps[1]
        mesh.write_vtk_mesh(T, dm.tri_cell, tmp_path / "m.vtk")
        mesh.write_dofmap_csv(dm, T, tmp_path / "d.csv")
        head = (tmp_path / "m.vtk").read_text().splitlines()
        assert head[0].startswith("# vtk DataFile")
        assert f"POINTS {T.num_vertices} double" in head
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert lines[0] == "dof_id,cell_id,vertex_id,x,y"
        assert len(lines) == dm.total_dofs + 1
