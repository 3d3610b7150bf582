"""
Visual Hull

Carves a K^3 occupancy grid from multi-view silhouettes, smooths it, and turns
it into a triangle mesh with vertex normals.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .camera_io import View, pixel_rays, project_points
from .errors import HullError
from .logs import log_event
from .marching_cubes import marching_cubes
from .mesh import TriMesh, laplacian_smooth
from .workers import chunk_ranges, map_ranges

logger = logging.getLogger(__name__)

# centers projected per work item
_CARVE_CHUNK_POINTS = 1 << 21


@dataclass(frozen=True, eq=False)
class GridSpec:
    """K voxels per axis over an axis-aligned world box."""
    K: int
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    voxel_size: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if int(self.K) < 2:
            raise HullError(f"grid needs K >= 2, got {self.K}")
        if not np.all(bbox_max > bbox_min):
            raise HullError(f"empty bounding box {bbox_min} .. {bbox_max}")
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "bbox_min", bbox_min)
        object.__setattr__(self, "bbox_max", bbox_max)
        object.__setattr__(self, "voxel_size", (bbox_max - bbox_min) / self.K)

    def centers(self, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        """World centers of voxels with x index in [start, stop), C order."""
        stop = self.K if stop is None else stop
        axes = [np.arange(start, stop), np.arange(self.K), np.arange(self.K)]
        ii, jj, kk = np.meshgrid(*axes, indexing="ij")
        idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
        return self.bbox_min + (idx + 0.5) * self.voxel_size


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    spec: GridSpec
    occ: np.ndarray

    def __post_init__(self):
        occ = np.asarray(self.occ, dtype=bool)
        if occ.size != self.spec.K ** 3:
            raise HullError(f"occupancy has {occ.size} voxels, expected {self.spec.K ** 3}")
        object.__setattr__(self, "occ", occ.reshape((self.spec.K,) * 3))

    @property
    def count(self) -> int:
        return int(self.occ.sum())

    @property
    def volume(self) -> float:
        return self.count * float(np.prod(self.spec.voxel_size))


@dataclass(frozen=True, eq=False)
class ScalarGrid:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape((self.spec.K,) * 3)
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise HullError("scalar grid values must lie in [0, 1]")
        object.__setattr__(self, "values", values)


def _inside_masks(views: Sequence[View], points: np.ndarray) -> np.ndarray:
    """True where a point projects into the object region of every view."""
    keep = np.ones(len(points), dtype=bool)
    for view in views:
        alive = np.flatnonzero(keep)
        if not len(alive):
            break
        uv, in_front = project_points(view, points[alive])
        u, v = uv[:, 0], uv[:, 1]
        inside = in_front & (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
        hit = np.zeros(len(alive), dtype=bool)
        ui = np.floor(u[inside]).astype(np.int64)
        vi = np.floor(v[inside]).astype(np.int64)
        hit[inside] = view.mask[vi, ui]
        keep[alive[~hit]] = False
    return keep


def _require_masks(views: Sequence[View]):
    if not views:
        raise HullError("carving needs at least one view")
    for view in views:
        if view.mask is None:
            raise HullError(f"view {view.name!r} has no mask")


def dilate_masks(views: Sequence[View], margin: int) -> List[View]:
    """Grow every mask by `margin` pixels (8-connected); margin 0 returns the views unchanged."""
    if margin < 0:
        raise HullError(f"mask margin must be >= 0, got {margin}")
    if margin == 0:
        return list(views)
    structure = np.ones((3, 3), dtype=bool)
    return [View(v.intrinsics, v.pose, v.image, ndimage.binary_dilation(v.mask, structure, iterations=margin),
                 v.name) for v in views]


def carve(views: Sequence[View], spec: GridSpec, threads: int = 1, margin: int = 0) -> OccupancyGrid:
    """
    Keep a voxel iff its center projects inside the mask of every view.

    Projections behind a camera or outside the image count as outside. Masks
    sampled at pixel centers can miss object points up to a pixel inside the
    silhouette; with `margin` >= 1 the masks are grown by that many pixels
    first, and every voxel whose center lies inside the object survives.
    """
    _require_masks(views)
    views = dilate_masks(views, margin)
    K = spec.K
    slab = max(1, _CARVE_CHUNK_POINTS // (K * K))

    def carve_slab(start: int, stop: int) -> np.ndarray:
        return _inside_masks(views, spec.centers(start, stop)).reshape(stop - start, K, K)

    occ = np.concatenate(map_ranges(carve_slab, chunk_ranges(K, slab), threads))
    grid = OccupancyGrid(spec, occ)
    log_event(logger, "hull.carve", views=len(views), K=K, margin=margin, occupied=grid.count)
    return grid


def smooth_occupancy(grid: OccupancyGrid, radius: int = 1) -> ScalarGrid:
    """Box-filter average over the (2r+1)^3 neighborhood; outside the grid counts as empty."""
    if radius < 0:
        raise HullError(f"smoothing radius must be >= 0, got {radius}")
    values = grid.occ.astype(np.float64)
    if radius > 0:
        values = ndimage.uniform_filter(values, size=2 * radius + 1, mode="constant", cval=0.0)
        values = np.clip(values, 0.0, 1.0)
    return ScalarGrid(grid.spec, values)


def select_mask_views(views: Sequence[View], count: int) -> List[View]:
    """Pick `count` evenly spaced views (all when count <= 0 or >= len(views))."""
    views = list(views)
    if count <= 0 or count >= len(views):
        return views
    picks = np.unique(np.round(np.linspace(0, len(views) - 1, count)).astype(int))
    return [views[i] for i in picks]


def estimate_bbox(views: Sequence[View], depth_steps: int = 512, max_rays: int = 4096,
                  padding: float = 0.05) -> Tuple[np.ndarray, np.ndarray]:
    """
    Bounding box of the mask-cone intersection.

    Points are sampled along rays through the first view's object pixels and
    kept when they project inside every mask; the box of the survivors is
    padded by `padding` of its extent.
    """
    _require_masks(views)
    reference = views[0]
    vi, ui = np.nonzero(reference.mask)
    if not len(ui):
        raise HullError(f"mask of view {reference.name!r} is empty")
    stride = max(1, len(ui) // max_rays)
    uv = np.stack([ui[::stride] + 0.5, vi[::stride] + 0.5], axis=1)
    origins, dirs = pixel_rays(reference, uv)

    centers = np.array([v.pose.camera_center for v in views])
    spread = np.linalg.norm(centers[:, None] - centers[None], axis=2).max()
    far = 2.0 * max(spread, np.linalg.norm(centers - centers.mean(axis=0), axis=1).max(), 1.0)
    depths = np.linspace(1e-3 * far, far, depth_steps)
    points = (origins[:, None, :] + depths[None, :, None] * dirs[:, None, :]).reshape(-1, 3)
    kept = points[_inside_masks(views, points)]
    if not len(kept):
        raise HullError("mask cones do not intersect")
    lo, hi = kept.min(axis=0), kept.max(axis=0)
    pad = padding * np.maximum(hi - lo, 1e-6)
    log_event(logger, "hull.bbox", samples=len(points), kept=len(kept))
    return lo - pad, hi + pad


def reconstruct_hull(views: Sequence[View], spec: GridSpec, smooth_radius: int = 1, isolevel: float = 0.5,
                     lam: float = 0.5, iters: int = 10, threads: int = 1,
                     margin: int = 0) -> Tuple[TriMesh, OccupancyGrid]:
    """Carve, smooth, triangulate and Laplacian-smooth a visual hull."""
    grid = carve(views, spec, threads=threads, margin=margin)
    mesh = mesh_from_grid(grid, smooth_radius, isolevel, lam, iters)
    return mesh, grid


def mesh_from_grid(grid: OccupancyGrid, smooth_radius: int = 1, isolevel: float = 0.5,
                   lam: float = 0.5, iters: int = 10) -> TriMesh:
    """Box-filter, marching cubes (closed at the grid border) and Laplacian smoothing."""
    scalar = smooth_occupancy(grid, smooth_radius)
    mesh = marching_cubes(scalar, isolevel, close_boundary=True)
    if mesh.is_empty:
        logger.warning("visual hull is empty; nothing to mesh")
        return mesh
    mesh = laplacian_smooth(mesh, lam, iters)
    log_event(logger, "hull.mesh", vertices=len(mesh.vertices), faces=len(mesh.faces))
    return mesh


# ---------------------------------------------------------------------------
# Grid dump
# ---------------------------------------------------------------------------

_DUMP_MAGIC = "OCCUPANCY 1"


def write_occupancy(path: str, grid: OccupancyGrid):
    """Raw uint8 voxels (C order, x slowest) after a 5-line ASCII header."""
    spec = grid.spec
    header = "\n".join([
        _DUMP_MAGIC,
        f"K {spec.K}",
        "bbox_min " + " ".join(f"{x:.17g}" for x in spec.bbox_min),
        "bbox_max " + " ".join(f"{x:.17g}" for x in spec.bbox_max),
        "data uint8 little-endian C-order",
    ]) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(grid.occ.astype(np.uint8).tobytes(order="C"))


def read_occupancy(path: str) -> OccupancyGrid:
    with open(path, "rb") as f:
        lines = [f.readline().decode("ascii").strip() for _ in range(5)]
        payload = f.read()
    if lines[0] != _DUMP_MAGIC:
        raise HullError(f"{path}: not an occupancy dump")
    try:
        K = int(lines[1].split()[1])
        bbox_min = [float(x) for x in lines[2].split()[1:4]]
        bbox_max = [float(x) for x in lines[3].split()[1:4]]
    except (IndexError, ValueError) as e:
        raise HullError(f"{path}: malformed header") from e
    spec = GridSpec(K, bbox_min, bbox_max)
    data = np.frombuffer(payload, dtype=np.uint8)
    if data.size != K ** 3:
        raise HullError(f"{path}: expected {K ** 3} voxels, found {data.size}")
    return OccupancyGrid(spec, data.reshape(K, K, K) != 0)
