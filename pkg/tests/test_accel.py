"""
Tests for the BVH and ray/mesh intersection.
"""
import numpy as np
import pytest

from src.core.accel import QueryStats, build_accel, intersect, intersect_brute, intersect_rays
from src.core.camera_io import Ray
from src.core.errors import MeshError
from src.core.mesh import TriMesh, box_mesh, icosphere


def _random_rays(rng, n: int, radius: float = 2.0):
    origins = rng.normal(size=(n, 3))
    origins *= radius / np.linalg.norm(origins, axis=1, keepdims=True)
    targets = rng.uniform(-1.2, 1.2, size=(n, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origins, dirs


def test_empty_mesh_is_error():
    """An accelerator needs at least one face."""
    empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))
    with pytest.raises(MeshError):
        build_accel(empty)


def test_single_triangle():
    """A one-face hierarchy behaves like the direct test."""
    mesh = TriMesh.from_faces([[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 1.0, 0.0]], [[0, 1, 2]])
    accel = build_accel(mesh)
    assert accel.n_nodes == 1
    hit = intersect(accel, Ray([0.0, 0.0, 2.0], [0.0, 0.0, -1.0]))
    assert hit.t == pytest.approx(2.0)
    assert hit.face == 0
    assert hit.entering
    np.testing.assert_allclose(hit.normal, [0.0, 0.0, 1.0])
    assert intersect(accel, Ray([5.0, 0.0, 2.0], [0.0, 0.0, -1.0])) is None


def test_cube_entry_hit():
    """Axis-aligned entry into the unit cube."""
    accel = build_accel(box_mesh(half_extent=0.5))
    hit = intersect(accel, Ray([0.0, 0.0, -3.0], [0.0, 0.0, 1.0]))
    assert hit.t == pytest.approx(2.5, abs=1e-12)
    np.testing.assert_allclose(hit.point, [0.0, 0.0, -0.5], atol=1e-12)
    np.testing.assert_allclose(hit.normal, [0.0, 0.0, -1.0], atol=1e-12)
    assert hit.entering


def test_cube_exit_hit_from_inside():
    """A ray starting inside exits through the far face with the normal flipped toward it."""
    accel = build_accel(box_mesh(half_extent=0.5))
    hit = intersect(accel, Ray([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]), t_min=1e-4)
    assert hit.t == pytest.approx(0.5, abs=1e-12)
    assert not hit.entering
    assert hit.normal @ np.array([0.0, 0.0, 1.0]) < 0


def test_ray_pointing_away():
    """Rays leaving the mesh behind them miss."""
    accel = build_accel(box_mesh(half_extent=0.5))
    assert intersect(accel, Ray([0.0, 0.0, -3.0], [0.0, 0.0, -1.0])) is None


def test_t_min_skips_near_hits():
    """Hits at or before t_min are ignored."""
    accel = build_accel(box_mesh(half_extent=0.5))
    hit = intersect(accel, Ray([0.0, 0.0, -3.0], [0.0, 0.0, 1.0]), t_min=2.6)
    assert hit.t == pytest.approx(3.5)
    assert not hit.entering


def test_bvh_matches_brute_force():
    """Nearest hits on a 20k-face icosphere match brute force exactly."""
    mesh = icosphere(1.0, 5)
    assert len(mesh.faces) >= 10000
    accel = build_accel(mesh)
    origins, dirs = _random_rays(np.random.default_rng(7), 1000)
    fast = intersect_rays(accel, origins, dirs)
    slow = intersect_brute(accel, origins, dirs)
    assert fast.hit.any() and not fast.hit.all()
    np.testing.assert_array_equal(fast.hit, slow.hit)
    np.testing.assert_array_equal(fast.face, slow.face)
    np.testing.assert_array_equal(fast.t, slow.t)
    np.testing.assert_array_equal(fast.entering, slow.entering)


def test_bvh_matches_brute_force_from_inside():
    """Exit hits from interior origins also agree."""
    accel = build_accel(box_mesh(half_extent=0.5))
    rng = np.random.default_rng(3)
    origins = rng.uniform(-0.4, 0.4, size=(300, 3))
    dirs = rng.normal(size=(300, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    fast = intersect_rays(accel, origins, dirs)
    slow = intersect_brute(accel, origins, dirs)
    assert fast.hit.all()
    np.testing.assert_array_equal(fast.face, slow.face)
    np.testing.assert_array_equal(fast.t, slow.t)
    assert not fast.entering.any()


def test_threads_do_not_change_hits():
    """Chunked parallel queries give the serial answer."""
    accel = build_accel(icosphere(1.0, 3))
    origins, dirs = _random_rays(np.random.default_rng(11), 5000)
    serial = intersect_rays(accel, origins, dirs)
    parallel = intersect_rays(accel, origins, dirs, threads=4)
    np.testing.assert_array_equal(serial.t, parallel.t)
    np.testing.assert_array_equal(serial.face, parallel.face)


def test_missing_bounding_box_tests_no_faces():
    """Rays that miss the root box never reach a triangle test."""
    accel = build_accel(icosphere(1.0, 3))
    stats = QueryStats()
    origins = np.tile([5.0, 5.0, 5.0], (10, 1))
    dirs = np.tile([1.0, 0.0, 0.0], (10, 1))
    batch = intersect_rays(accel, origins, dirs, stats=stats)
    assert not batch.hit.any()
    assert stats.triangle_tests == 0
    assert stats.node_visits == 10


def test_normals_face_incoming_ray():
    """Reported normals always oppose the ray direction."""
    accel = build_accel(icosphere(1.0, 3))
    origins, dirs = _random_rays(np.random.default_rng(5), 500)
    batch = intersect_rays(accel, origins, dirs)
    dots = np.einsum("ij,ij->i", batch.normal[batch.hit], dirs[batch.hit])
    assert (dots < 0).all()
    np.testing.assert_allclose(np.linalg.norm(batch.normal[batch.hit], axis=1), 1.0, atol=1e-9)
    assert batch.entering[batch.hit].all()
