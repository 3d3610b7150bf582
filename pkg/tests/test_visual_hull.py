"""
Tests for silhouette carving, occupancy smoothing and hull meshing.
"""
import numpy as np
import pytest

from src.core.camera_io import Intrinsics, View, project_points
from src.core.errors import HullError
from src.core.mesh import boundary_edge_count, signed_volume
from src.core.synth_scene import look_at
from src.core.visual_hull import (GridSpec, OccupancyGrid, carve, dilate_masks, estimate_bbox, mesh_from_grid,
                                  read_occupancy, reconstruct_hull, select_mask_views, smooth_occupancy,
                                  write_occupancy)

RADIUS = 0.5
SPHERE_VOLUME = 4.0 / 3.0 * np.pi * RADIUS ** 3


def _with_mask(view: View, mask: np.ndarray) -> View:
    return View(view.intrinsics, view.pose, view.image, mask, view.name)


def test_empty_mask_carves_everything(front_view):
    """Any all-zero mask empties the grid."""
    view = _with_mask(front_view, np.zeros((48, 64), dtype=bool))
    grid = carve([view], GridSpec(8, [-1, -1, -1], [1, 1, 1]))
    assert grid.count == 0
    assert mesh_from_grid(grid).is_empty


def test_full_mask_keeps_view_cone(front_view):
    """A single full-frame mask keeps exactly the voxels projecting into the frame."""
    view = _with_mask(front_view, np.ones((48, 64), dtype=bool))
    spec = GridSpec(16, [-2, -2, -2], [2, 2, 2])
    grid = carve([view], spec)
    uv, in_front = project_points(view, spec.centers())
    inside = in_front & (uv[:, 0] >= 0) & (uv[:, 0] < 64) & (uv[:, 1] >= 0) & (uv[:, 1] < 48)
    assert (grid.occ.ravel() == inside).all()
    assert 0 < grid.count < spec.K ** 3


def test_missing_mask_is_error(front_view):
    """Carving needs a mask on every view."""
    with pytest.raises(HullError):
        carve([front_view], GridSpec(4, [-1, -1, -1], [1, 1, 1]))
    with pytest.raises(HullError):
        carve([], GridSpec(4, [-1, -1, -1], [1, 1, 1]))


def test_sphere_hull_superset(fine_sphere_ring_views):
    """With a one-pixel mask margin the carved sphere contains its voxelization and stays within 15%."""
    spec = GridSpec(64, [-0.75] * 3, [0.75] * 3)
    grid = carve(fine_sphere_ring_views, spec, margin=1)
    r = np.linalg.norm(spec.centers(), axis=1).reshape((64,) * 3)
    assert grid.occ[r <= RADIUS].all()
    assert SPHERE_VOLUME * 0.95 < grid.volume <= SPHERE_VOLUME * 1.15
    exact = carve(fine_sphere_ring_views, spec)
    assert not (exact.occ & ~grid.occ).any()


def test_pixel_center_masks_lose_only_the_outer_pixel(sphere_ring_views):
    """Without a margin only voxels within about one pixel of the silhouette can be carved away."""
    spec = GridSpec(64, [-0.75] * 3, [0.75] * 3)
    grid = carve(sphere_ring_views, spec)
    r = np.linalg.norm(spec.centers(), axis=1).reshape((64,) * 3)
    # one pixel at the sphere is about 0.017 world units for this rig
    assert grid.occ[r <= RADIUS - 0.03].all()
    assert SPHERE_VOLUME * 0.95 < grid.volume <= SPHERE_VOLUME * 1.15


def test_dilate_masks():
    """Each margin step grows the mask by one 8-connected pixel ring."""
    intr = Intrinsics(9, 9, 9.0, 9.0, 4.5, 4.5)
    mask = np.zeros((9, 9), dtype=bool)
    mask[4, 4] = True
    view = View(intr, look_at([0.0, 0.0, 4.0], [0.0, 0.0, 0.0]), np.zeros((9, 9, 3)), mask, "dot.png")
    assert dilate_masks([view], 0)[0] is view
    grown = dilate_masks([view], 2)[0]
    assert grown.mask.sum() == 25 and grown.mask[2:7, 2:7].all()
    assert grown.name == "dot.png" and view.mask.sum() == 1
    with pytest.raises(HullError):
        dilate_masks([view], -1)


def test_carving_is_monotone(sphere_ring_views):
    """Adding views only removes voxels."""
    spec = GridSpec(24, [-0.75] * 3, [0.75] * 3)
    few = carve(sphere_ring_views[:4], spec)
    many = carve(sphere_ring_views, spec)
    assert not (many.occ & ~few.occ).any()
    assert many.count <= few.count


def test_carving_threads_agree(sphere_ring_views):
    """Parallel carving matches serial carving."""
    spec = GridSpec(24, [-0.75] * 3, [0.75] * 3)
    assert (carve(sphere_ring_views, spec, threads=4).occ == carve(sphere_ring_views, spec).occ).all()


def test_smooth_radius_zero_is_identity():
    """Radius 0 casts the occupancy bits to reals."""
    spec = GridSpec(5, [0, 0, 0], [1, 1, 1])
    occ = np.random.default_rng(0).random((5, 5, 5)) > 0.5
    smoothed = smooth_occupancy(OccupancyGrid(spec, occ), 0)
    np.testing.assert_array_equal(smoothed.values, occ.astype(float))


def test_smooth_box_filter():
    """Full neighborhoods average to 1; an isolated voxel spreads to 1/27."""
    spec = GridSpec(5, [0, 0, 0], [1, 1, 1])
    full = smooth_occupancy(OccupancyGrid(spec, np.ones((5, 5, 5), dtype=bool)), 1)
    assert full.values[2, 2, 2] == pytest.approx(1.0)
    assert full.values[0, 0, 0] == pytest.approx(8.0 / 27.0)
    occ = np.zeros((5, 5, 5), dtype=bool)
    occ[2, 2, 2] = True
    single = smooth_occupancy(OccupancyGrid(spec, occ), 1)
    assert single.values[2, 2, 2] == pytest.approx(1.0 / 27.0)
    with pytest.raises(HullError):
        smooth_occupancy(OccupancyGrid(spec, occ), -1)


def test_select_mask_views(sphere_ring_views):
    """Evenly spaced selection, all views when the count is out of range."""
    picked = select_mask_views(sphere_ring_views, 8)
    assert len(picked) == 8
    assert picked[0] is sphere_ring_views[0] and picked[-1] is sphere_ring_views[-1]
    assert len(select_mask_views(sphere_ring_views, 0)) == len(sphere_ring_views)
    assert len(select_mask_views(sphere_ring_views, 99)) == len(sphere_ring_views)


def test_estimate_bbox_encloses_object(sphere_ring_views):
    """The mask-cone box contains the sphere and stays close to it."""
    lo, hi = estimate_bbox(sphere_ring_views)
    assert (lo < -RADIUS + 0.02).all() and (hi > RADIUS - 0.02).all()
    assert (lo > -0.8).all() and (hi < 0.8).all()


def test_reconstruct_hull_mesh(sphere_ring_views):
    """The hull mesh is closed, outward and close to the sphere."""
    spec = GridSpec(48, [-0.75] * 3, [0.75] * 3)
    mesh, grid = reconstruct_hull(sphere_ring_views, spec)
    assert boundary_edge_count(mesh) == 0
    assert 0.8 * SPHERE_VOLUME < signed_volume(mesh) < 1.1 * grid.volume
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(radii - RADIUS).max() < 0.1


def _radial_error_deg(mesh) -> np.ndarray:
    radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    return np.degrees(np.arccos(np.clip(np.einsum("ij,ij->i", radial, mesh.normals), -1.0, 1.0)))


def test_voxel_sphere_mesh_normals():
    """With the default smoothing, a voxelized sphere's mesh normals stay within 10 degrees of radial."""
    spec = GridSpec(64, [-0.75] * 3, [0.75] * 3)
    occ = np.linalg.norm(spec.centers(), axis=1) <= RADIUS
    mesh = mesh_from_grid(OccupancyGrid(spec, occ))
    assert np.mean(_radial_error_deg(mesh) < 10.0) >= 0.9


def test_heavier_smoothing_reaches_two_degrees():
    """A 5^3 box filter and 60 Laplacian passes keep 90% of normals within 2 degrees of radial."""
    spec = GridSpec(96, [-0.75] * 3, [0.75] * 3)
    occ = np.linalg.norm(spec.centers(), axis=1) <= RADIUS
    mesh = mesh_from_grid(OccupancyGrid(spec, occ), smooth_radius=2, iters=60)
    assert boundary_edge_count(mesh) == 0
    assert np.mean(_radial_error_deg(mesh) < 2.0) >= 0.9


def test_occupancy_dump_round_trip(tmp_path):
    """Dumped grids read back bit for bit."""
    spec = GridSpec(6, [-1.0, -0.5, 0.25], [1.0, 0.5, 1.75])
    occ = np.random.default_rng(2).random((6, 6, 6)) > 0.3
    path = str(tmp_path / "grid.occ")
    write_occupancy(path, OccupancyGrid(spec, occ))
    loaded = read_occupancy(path)
    assert loaded.spec.K == 6
    np.testing.assert_array_equal(loaded.spec.bbox_min, spec.bbox_min)
    np.testing.assert_array_equal(loaded.occ, occ)


def test_occupancy_dump_rejects_other_files(tmp_path):
    """Files without the dump header are rejected."""
    path = tmp_path / "bad.occ"
    path.write_bytes(b"hello\n\n\n\n\n")
    with pytest.raises(HullError):
        read_occupancy(str(path))
