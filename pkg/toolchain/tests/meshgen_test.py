import math
import numpy as np
import pytest
from collections import Counter

from perfusim import meshgen
from perfusim.errors import MeshError
from perfusim.models import BinaryMask, PhantomSpec, SurfaceMesh, TaubinParams
from perfusim.voxelio import phantom_mask


def _edge_counts(mesh: SurfaceMesh) -> Counter:
    return Counter(map(tuple, mesh.edges().tolist()))


def _single_voxel(n=3):
    values = np.zeros((n, n, n), dtype=bool)
    values[n // 2, n // 2, n // 2] = True
    return BinaryMask(values=values)


def test_marching_cubes_empty():
    mesh = meshgen.marching_cubes(BinaryMask(values=np.zeros((4, 4, 4), dtype=bool)))
    assert mesh.is_empty
    assert len(mesh.vertices) == 0


def test_marching_cubes_single_voxel():
    mesh = meshgen.marching_cubes(_single_voxel())
    edges = _edge_counts(mesh)
    euler = len(mesh.vertices) - len(edges) + len(mesh.triangles)
    assert euler == 2
    assert set(edges.values()) == {2}
    assert meshgen.surface_volume(mesh) > 0


def test_marching_cubes_vertices_on_edge_midpoints():
    mask = _single_voxel()
    mask = mask.model_copy(update={'spacing': (2.0, 1.0, 0.5), 'origin': (10.0, 0.0, 0.0)})
    mesh = meshgen.marching_cubes(mask)
    index = (mesh.vertices - np.asarray(mask.origin)) / np.asarray(mask.spacing)
    assert np.allclose(index * 2, np.round(index * 2))
    assert np.all(np.abs(index - 1).max(axis=1) <= 0.5 + 1e-12)


def test_marching_cubes_sphere(sphere_mask):
    mesh = meshgen.marching_cubes(sphere_mask)
    assert set(_edge_counts(mesh).values()) == {2}
    analytic = 4.0 / 3.0 * math.pi * 10 ** 3
    assert abs(meshgen.surface_volume(mesh) - analytic) <= 0.05 * analytic


def test_marching_cubes_other_phantoms_watertight():
    specs = [
        PhantomSpec(kind='ellipsoid', dims=(20, 14, 12), semi_axes=(8.0, 5.0, 4.0)),
        PhantomSpec(kind='tube', dims=(10, 10, 20), radius=2.5, start=(4.5, 4.5, 4.0), end=(4.5, 4.5, 15.0)),
    ]
    for spec in specs:
        mesh = meshgen.marching_cubes(phantom_mask(spec))
        assert set(_edge_counts(mesh).values()) == {2}
        assert meshgen.surface_volume(mesh) > 0


def test_taubin_zero_iterations_is_identity(sphere_mask):
    mesh = meshgen.marching_cubes(sphere_mask)
    same = meshgen.taubin_smooth(mesh, iterations=0)
    assert np.array_equal(same.vertices, mesh.vertices)
    assert np.array_equal(same.triangles, mesh.triangles)


def test_taubin_preserves_volume_and_topology(sphere_mask):
    mesh = meshgen.marching_cubes(sphere_mask)
    smooth = meshgen.taubin_smooth(mesh, 0.33, -0.34, 20)
    assert np.array_equal(smooth.triangles, mesh.triangles)
    assert smooth.vertices.shape == mesh.vertices.shape
    before = meshgen.surface_volume(mesh)
    after = meshgen.surface_volume(smooth)
    assert abs(after - before) <= 0.01 * before


def test_taubin_reduces_stair_steps(sphere_mask):
    'Smoothing pulls the vertices towards a sphere'

    mesh = meshgen.marching_cubes(sphere_mask)
    smooth = meshgen.taubin_smooth(mesh, 0.33, -0.34, 20)
    center = np.full(3, 15.5)

    def spread(m):
        r = np.linalg.norm(m.vertices - center, axis=1)
        return r.std()

    assert spread(smooth) < spread(mesh)


def test_taubin_keeps_isolated_vertices():
    mesh = SurfaceMesh(
        vertices=[[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]],
        triangles=[[0, 1, 2]],
    )
    smooth = meshgen.taubin_smooth(mesh, 0.33, -0.34, 5)
    assert np.array_equal(smooth.vertices[3], [5.0, 5.0, 5.0])


def test_umbrella_operator_rows():
    laplacian = meshgen.umbrella_operator(4, np.array([[0, 1, 2]]))
    dense = laplacian.toarray()
    assert np.allclose(dense.sum(axis=1)[:3], 0.0)
    assert np.all(dense[3] == 0.0)
    assert dense[0, 1] == 0.5


def test_kuhn_split():
    volumes = []
    for t in meshgen.KUHN:
        d = (t[1:] - t[0]).astype(float)
        volumes.append(np.linalg.det(d) / 6.0)
    assert np.allclose(volumes, 1.0 / 6.0)
    for t in meshgen.KUHN:
        corners = {tuple(c) for c in t.tolist()}
        assert (0, 0, 0) in corners and (1, 1, 1) in corners


def test_voxel_mesh_single_voxel():
    mesh = meshgen.voxel_tet_mesh(_single_voxel(1))
    assert mesh.num_cells == 6
    assert mesh.num_vertices == 8
    assert mesh.signed_volumes().sum() == pytest.approx(1.0, rel=1e-12)
    assert np.all(mesh.vertex_tags == 1)


def test_voxel_mesh_block_is_conforming():
    mesh = meshgen.voxel_tet_mesh(BinaryMask(values=np.ones((2, 2, 2), dtype=bool)))
    assert mesh.num_cells == 48
    assert mesh.signed_volumes().sum() == pytest.approx(8.0, rel=1e-12)
    faces, _, counts = meshgen.tet_faces(mesh.tets)
    boundary = meshgen.boundary_faces(mesh.tets)
    assert set(counts.tolist()) == {1, 2}
    assert len(boundary) == 6 * 4 * 2
    assert (counts == 2).sum() == (4 * 48 - len(boundary)) // 2
    # the center vertex is the only interior one
    assert mesh.vertex_tags.sum() == 26


def test_voxel_mesh_l_shape():
    values = np.zeros((2, 2, 1), dtype=bool)
    values[0, 0, 0] = values[1, 0, 0] = values[0, 1, 0] = True
    mesh = meshgen.voxel_tet_mesh(BinaryMask(values=values, spacing=(0.5, 1.0, 2.0)))
    assert mesh.num_cells == 18
    assert mesh.signed_volumes().sum() == pytest.approx(3.0, rel=1e-12)
    _, _, counts = meshgen.tet_faces(mesh.tets)
    assert counts.max() == 2


def test_voxel_mesh_volume_exact(sphere_mask):
    mesh = meshgen.voxel_tet_mesh(sphere_mask)
    assert mesh.num_cells == 6 * sphere_mask.count()
    assert np.all(mesh.signed_volumes() > 0)
    volume = mesh.signed_volumes().sum()
    assert abs(volume - sphere_mask.count()) <= 1e-12 * sphere_mask.count()
    assert np.unique(mesh.cell_tags).size == sphere_mask.count()


def test_voxel_mesh_boundary_smoothing(small_sphere_mask):
    plain = meshgen.voxel_tet_mesh(small_sphere_mask)
    smooth = meshgen.voxel_tet_mesh(small_sphere_mask, TaubinParams(iterations=3))
    interior = plain.vertex_tags == 0
    assert np.array_equal(smooth.vertices[interior], plain.vertices[interior])
    assert not np.array_equal(smooth.vertices[~interior], plain.vertices[~interior])
    assert np.all(smooth.signed_volumes() > 0)


def test_voxel_mesh_rejects_inversion(monkeypatch):
    monkeypatch.setattr(meshgen, '_taubin', lambda v, laplacian, params: v * np.array([-1.0, 1.0, 1.0]))
    with pytest.raises(MeshError, match='inverted'):
        meshgen.voxel_tet_mesh(_single_voxel(), TaubinParams(iterations=1))


def test_voxel_mesh_empty():
    with pytest.raises(MeshError):
        meshgen.voxel_tet_mesh(BinaryMask(values=np.zeros((2, 2, 2), dtype=bool)))


def test_regular_tet_quality(regular_tet):
    stats = meshgen.mesh_stats(regular_tet)
    assert stats.min_quality == pytest.approx(1.0, abs=1e-12)
    assert stats.max_quality == pytest.approx(1.0, abs=1e-12)
    assert stats.boundary_face_count == 4
    assert stats.inverted == []


def test_mesh_stats_unit_voxel():
    mesh = meshgen.voxel_tet_mesh(_single_voxel(1))
    stats = meshgen.mesh_stats(mesh)
    assert stats.volume == pytest.approx(1.0, rel=1e-12)
    assert 0 < stats.min_quality <= stats.max_quality < 1
    assert stats.boundary_face_count == 12


def test_mesh_stats_boundary_count_matches_face_hashing(small_sphere_mask):
    mesh = meshgen.voxel_tet_mesh(small_sphere_mask)
    seen = Counter()
    for tet in mesh.tets.tolist():
        for a, b, c in ([1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]):
            seen[tuple(sorted((tet[a], tet[b], tet[c])))] += 1
    expected = sum(1 for v in seen.values() if v == 1)
    assert meshgen.mesh_stats(mesh).boundary_face_count == expected


def test_mesh_stats_reports_inverted(single_tet):
    flipped = single_tet.model_copy(update={'tets': single_tet.tets[:, [0, 2, 1, 3]]})
    stats = meshgen.mesh_stats(flipped)
    assert stats.inverted == [0]
    assert stats.volume == pytest.approx(-1.0 / 6.0)


def test_boundary_faces_point_outwards(box3):
    faces = meshgen.boundary_faces(box3.tets)
    p = box3.vertices[faces]
    normals = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    outward = p.mean(axis=1) - box3.vertices.mean(axis=0)
    assert np.all(np.einsum('ij,ij->i', normals, outward) > 0)
