"""Tests for the equivariant mesh and its discrete calculus."""

import numpy as np
import pytest
from scipy.sparse import diags
from scipy.sparse.linalg import eigsh

from ghmcreal.fuchsian import FNCoords, fn_to_holonomy
from ghmcreal.mesh import (
    J2,
    OperatorField,
    build_disk_mesh,
    build_mesh,
    hessian,
    integrate,
    laplacian,
    scalar_times_id,
    _frame_transport,
)
from ghmcreal.minkowski import hyp_dist, mink_inner

RNG = np.random.default_rng(77)


@pytest.fixture(scope="module")
def metric():
    return fn_to_holonomy(FNCoords((2.0, 2.0, 2.0), (0.3, -0.2, 0.5)))


@pytest.fixture(scope="module")
def mesh(metric):
    return build_mesh(metric, 0.2)


@pytest.fixture(scope="module")
def fine_mesh(metric):
    return build_mesh(metric, 0.1)


@pytest.fixture(scope="module")
def disk():
    return build_disk_mesh(1.0, 0.1)


class TestConstruction:
    def test_euler_characteristic(self, mesh):
        assert mesh.euler_characteristic() == -2

    def test_area(self, mesh):
        assert mesh.area == pytest.approx(4.0 * np.pi, abs=1e-4)

    def test_quality(self, mesh):
        assert mesh.min_angle() > np.deg2rad(5.0)
        assert mesh.max_edge() <= 1.5 * mesh.target_edge

    def test_halving_edge_quadruples_faces(self, mesh, fine_mesh):
        ratio = fine_mesh.nfaces / mesh.nfaces
        assert 3.0 <= ratio <= 5.5

    def test_vertices_on_hyperboloid(self, mesh):
        n2 = mink_inner(mesh.verts, mesh.verts)
        assert np.max(np.abs(n2 + 1.0)) < 1e-9

    def test_identification_exact(self, mesh):
        # copies are bitwise isometric images of their class representative
        for i in range(len(mesh.verts)):
            rep = mesh.verts[mesh.vclass[i]]
            assert np.array_equal(mesh.verts[i], mesh.viso[i] @ rep)

    def test_boundary_edge_lengths_paired(self, mesh):
        # each pairing-crossing edge has an isometric partner on the far side
        for f in range(mesh.nfaces):
            for k in range(3):
                g, iso = mesh.adjacency[f][k]
                assert g >= 0
                if iso is None:
                    continue
                a, b = mesh.tris[f][k], mesh.tris[f][(k + 1) % 3]
                length = hyp_dist(mesh.verts[a], mesh.verts[b])
                lens_g = [hyp_dist(mesh.verts[mesh.tris[g][t]],
                                   mesh.verts[mesh.tris[g][(t + 1) % 3]])
                          for t in range(3)]
                assert min(abs(length - l) for l in lens_g) < 1e-7

    def test_target_edge_range_enforced(self, metric):
        with pytest.raises(ValueError):
            build_mesh(metric, 0.6)

    def test_rebuild_deterministic(self, metric, mesh):
        again = build_mesh(metric, 0.2)
        assert np.array_equal(again.tris, mesh.tris)
        assert np.array_equal(again.verts, mesh.verts)


class TestIntegrate:
    def test_constant_gives_area(self, mesh):
        assert integrate(mesh, np.ones(mesh.nclasses)) == pytest.approx(
            4.0 * np.pi, abs=1e-4)

    def test_linearity(self, mesh):
        u = RNG.normal(size=mesh.nclasses)
        v = RNG.normal(size=mesh.nclasses)
        assert integrate(mesh, 2.0 * u + v) == pytest.approx(
            2.0 * integrate(mesh, u) + integrate(mesh, v), abs=1e-10)

    def test_laplacian_integrates_to_zero(self, mesh):
        lap = laplacian(mesh)
        u = RNG.normal(size=mesh.nclasses)
        assert abs(integrate(mesh, lap.apply(u))) < 1e-8


class TestLaplacian:
    def test_stiffness_symmetric(self, mesh):
        L = laplacian(mesh).stiffness
        assert abs(L - L.T).max() < 1e-12

    def test_zero_row_sums(self, mesh):
        L = laplacian(mesh).stiffness
        assert np.max(np.abs(L @ np.ones(mesh.nclasses))) < 1e-12

    def test_negative_semidefinite(self, mesh):
        lap = laplacian(mesh)
        top = eigsh(lap.stiffness, k=1, M=diags(lap.mass), which='LA',
                    return_eigenvectors=False)
        assert top[0] < 1e-10

    def test_weak_form_symmetry(self, mesh):
        lap = laplacian(mesh)
        u = RNG.normal(size=mesh.nclasses)
        v = RNG.normal(size=mesh.nclasses)
        a = integrate(mesh, u * lap.apply(v))
        b = integrate(mesh, v * lap.apply(u))
        assert abs(a - b) < 1e-10

    def test_eigenvalue_refinement_convergence(self, metric, mesh, fine_mesh):
        # error in the first nonzero eigenvalue should drop ~4x per halving
        vals = {}
        for msh in (mesh, fine_mesh):
            lap = laplacian(msh)
            w = eigsh(-lap.stiffness, k=2, M=diags(lap.mass), sigma=0,
                      which='LM', return_eigenvectors=False)
            vals[msh.target_edge] = np.sort(w)[1]
        # frozen fine-resolution reference 0.40906 (Richardson from
        # target edges 0.1 and 0.05)
        ref = 0.40906
        e_coarse = abs(vals[0.2] - ref)
        e_fine = abs(vals[0.1] - ref)
        assert e_coarse / e_fine > 2.5

    def test_shifted_solve(self, mesh):
        lap = laplacian(mesh)
        rhs = RNG.normal(size=mesh.nclasses)
        f = lap.solve_shifted(rhs, -2.0)
        res = lap.apply(f) - 2.0 * f - rhs
        assert np.max(np.abs(res)) < 1e-8


class TestHessian:
    def test_constant_field_zero(self, mesh):
        H = hessian(mesh, np.ones(mesh.nclasses))
        assert np.max(np.abs(H.face)) < 1e-10

    def test_linear_restriction_on_disk(self, disk):
        # u = <V, x> satisfies Hess u = u * Id
        V = np.array([0.3, -0.2, 0.15])
        u = mink_inner(disk.verts[disk.class_rep], V)
        H = hessian(disk, u)
        uid = scalar_times_id(disk, u)
        r = np.arccosh(np.maximum(
            -mink_inner(disk.centroids, np.array([0.0, 0.0, 1.0])[None, :]), 1.0))
        inner = r < 1.0 - 3 * disk.target_edge
        err = np.max(np.abs(H.face[inner] - uid.face[inner]))
        assert err < 50.0 * disk.target_edge ** 2

    def test_trace_matches_laplacian_weakly(self, disk):
        V = np.array([0.3, -0.2, 0.15])
        u = mink_inner(disk.verts[disk.class_rep], V)
        H = hessian(disk, u)
        lap = laplacian(disk)
        phi = np.cos(disk.verts[disk.class_rep][:, 0])
        # interior cutoff so the disk boundary does not pollute either side
        r = np.arccosh(np.maximum(
            -mink_inner(disk.verts[disk.class_rep],
                        np.array([0.0, 0.0, 1.0])[None, :]), 1.0))
        phi = phi * np.clip(2.0 * (0.8 - r), 0.0, 1.0)
        lhs = float(np.sum(disk.face_areas * disk.scalar_at_faces(phi)
                           * H.trace()))
        rhs = float(phi @ (lap.stiffness @ u))
        assert abs(lhs - rhs) < 5.0 * disk.target_edge

    def test_trace_accuracy_on_disk(self, disk):
        # Laplacian of <V, x> is exactly 2 <V, x>
        V = np.array([0.3, -0.2, 0.15])
        u = mink_inner(disk.verts[disk.class_rep], V)
        H = hessian(disk, u)
        uf = disk.scalar_at_faces(u)
        r = np.arccosh(np.maximum(
            -mink_inner(disk.centroids, np.array([0.0, 0.0, 1.0])[None, :]), 1.0))
        inner = r < 1.0 - 3 * disk.target_edge
        assert np.max(np.abs(H.trace()[inner] - 2 * uf[inner])) < \
            100.0 * disk.target_edge ** 2

    def test_equivariance_across_pairings(self, fine_mesh):
        # hessian of an equivariant scalar: values transported across a side
        # pairing agree like values across any interior edge
        msh = fine_mesh
        lap = laplacian(msh)
        _, vecs = eigsh(-lap.stiffness, k=2, M=diags(lap.mass), sigma=0,
                        which='LM')
        H = hessian(msh, vecs[:, 1])
        diffs = []
        for f in range(msh.nfaces):
            for k in range(3):
                g, iso = msh.adjacency[f][k]
                if iso is None:
                    continue
                cg = iso @ msh.centroids[g]
                Eg = iso @ msh.face_frames[g]
                R = _frame_transport(cg, Eg, msh.centroids[f],
                                     msh.face_frames[f])
                diffs.append(np.max(np.abs(R @ H.face[g] @ R.T - H.face[f])))
        assert max(diffs) < 1.0 * msh.target_edge


class TestOperatorField:
    def test_symmetry_enforced(self, mesh):
        bad = np.tile(np.array([[0.0, 1.0], [0.0, 0.0]]), (mesh.nfaces, 1, 1))
        with pytest.raises(ValueError):
            OperatorField(mesh, bad)

    def test_identity_trace_det(self, mesh):
        I = OperatorField.identity(mesh)
        assert np.allclose(I.trace(), 2.0)
        assert np.allclose(I.det(), 1.0)

    def test_J_squares_to_minus_id(self):
        assert np.allclose(J2 @ J2, -np.eye(2))

    def test_J_preserves_symmetric_tracefree(self, mesh):
        a = RNG.normal(size=mesh.nfaces)
        b = RNG.normal(size=mesh.nfaces)
        face = np.zeros((mesh.nfaces, 2, 2))
        face[:, 0, 0] = a
        face[:, 1, 1] = -a
        face[:, 0, 1] = face[:, 1, 0] = b
        MJ = OperatorField(mesh, face).J_rotate()
        assert np.max(np.abs(MJ.trace())) < 1e-12
        assert np.max(np.abs(MJ.face - np.transpose(MJ.face, (0, 2, 1)))) < 1e-12

    def test_J_rotate_of_identity_rejected(self, mesh):
        # Id * J is antisymmetric: not a valid symmetric operator field
        with pytest.raises(ValueError):
            OperatorField.identity(mesh).J_rotate()

    def test_J_rotation_preserves_lengths(self, mesh):
        a = RNG.normal(size=mesh.nfaces)
        b = RNG.normal(size=mesh.nfaces)
        face = np.zeros((mesh.nfaces, 2, 2))
        face[:, 0, 0] = a
        face[:, 1, 1] = -a
        face[:, 0, 1] = face[:, 1, 0] = b
        M = OperatorField(mesh, face)
        v = RNG.normal(size=(mesh.nfaces, 2))
        Jv = np.einsum("ij,fj->fi", J2, v)
        assert np.allclose(M.apply(Jv), M.J_rotate().apply(v), atol=1e-12)

    def test_l2_norm_of_identity(self, mesh):
        I = OperatorField.identity(mesh)
        assert I.l2_norm() == pytest.approx(np.sqrt(2.0 * 4.0 * np.pi), rel=1e-4)

    def test_vertex_values_of_identity(self, mesh):
        vv = OperatorField.identity(mesh).vertex_values()
        assert np.max(np.abs(vv - np.eye(2)[None])) < 1e-10
