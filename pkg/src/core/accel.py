"""
Ray / Mesh Intersection

A bounding-volume hierarchy over the faces of a TriMesh and vectorized
nearest-hit queries. Traversal is breadth-first over (ray, node) pairs so a
whole batch of rays advances through the tree with numpy operations; leaves are
tested with the Moller-Trumbore algorithm.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .camera_io import Ray
from .errors import MeshError
from .mesh import TriMesh
from .workers import chunk_ranges, map_ranges

logger = logging.getLogger(__name__)

LEAF_SIZE = 4
DET_EPS = 1e-15
RAY_CHUNK = 4096


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # fixed summation order so BVH and brute-force queries agree bit for bit
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


@dataclass
class QueryStats:
    """Work counters filled by intersection queries."""
    node_visits: int = 0
    triangle_tests: int = 0

    def add(self, other: "QueryStats"):
        self.node_visits += other.node_visits
        self.triangle_tests += other.triangle_tests


@dataclass(frozen=True, eq=False)
class SurfaceHit:
    t: float
    point: np.ndarray
    normal: np.ndarray
    face: int
    entering: bool


@dataclass(frozen=True, eq=False)
class HitBatch:
    """Nearest hits for N rays; misses have t = inf and face = -1."""
    hit: np.ndarray
    t: np.ndarray
    face: np.ndarray
    point: np.ndarray
    normal: np.ndarray
    entering: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def at(self, i: int) -> Optional[SurfaceHit]:
        if not self.hit[i]:
            return None
        return SurfaceHit(float(self.t[i]), self.point[i].copy(), self.normal[i].copy(), int(self.face[i]),
                          bool(self.entering[i]))


@dataclass(frozen=True, eq=False)
class AccelMesh:
    """Immutable BVH over a mesh's faces."""
    mesh: TriMesh
    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    face_order: np.ndarray
    v0: np.ndarray = field(repr=False)
    e1: np.ndarray = field(repr=False)
    e2: np.ndarray = field(repr=False)
    geo_normal: np.ndarray = field(repr=False)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.node_max[0] - self.node_min[0]))

    @property
    def default_t_min(self) -> float:
        return 1e-4 * self.diagonal

    @property
    def n_nodes(self) -> int:
        return len(self.left)


def build_accel(mesh: TriMesh, leaf_size: int = LEAF_SIZE) -> AccelMesh:
    """
    Build a median-split BVH.

    Raises:
        MeshError: mesh has no faces
    """
    if mesh.is_empty:
        raise MeshError("cannot build an accelerator over an empty mesh")
    tri = mesh.vertices[mesh.faces]
    tri_min = tri.min(axis=1)
    tri_max = tri.max(axis=1)
    centroid = tri.mean(axis=1)
    order = np.arange(len(mesh.faces))

    node_min, node_max, left, right, start, count = [], [], [], [], [], []

    def new_node(lo: int, hi: int) -> int:
        idx = order[lo:hi]
        node_min.append(tri_min[idx].min(axis=0))
        node_max.append(tri_max[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(lo)
        count.append(hi - lo)
        return len(left) - 1

    stack = [(new_node(0, len(order)), 0, len(order))]
    while stack:
        node, lo, hi = stack.pop()
        if hi - lo <= leaf_size:
            continue
        cent = centroid[order[lo:hi]]
        extent = cent.max(axis=0) - cent.min(axis=0)
        if not np.any(extent > 0):
            continue
        axis = int(np.argmax(extent))
        mid = (hi - lo) // 2
        part = np.argpartition(cent[:, axis], mid, kind="introselect")
        order[lo:hi] = order[lo:hi][part]
        a = new_node(lo, lo + mid)
        b = new_node(lo + mid, hi)
        left[node], right[node] = a, b
        count[node] = 0
        stack.append((b, lo + mid, hi))
        stack.append((a, lo, lo + mid))

    node_min = np.array(node_min)
    node_max = np.array(node_max)
    # pad boxes so flat (axis-aligned) triangles still have a volume to hit
    pad = 1e-9 * max(float(np.linalg.norm(node_max[0] - node_min[0])), 1e-12)
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    gn = np.cross(e1, e2)
    gn /= np.maximum(np.linalg.norm(gn, axis=1, keepdims=True), 1e-300)
    accel = AccelMesh(mesh, node_min - pad, node_max + pad, np.array(left), np.array(right),
                      np.array(start), np.array(count), order, tri[:, 0].copy(), e1, e2, gn)
    logger.debug("built BVH: %d faces, %d nodes", len(mesh.faces), accel.n_nodes)
    return accel


def _triangle_hits(accel: AccelMesh, origins: np.ndarray, dirs: np.ndarray, faces: np.ndarray, t_min: float):
    """Moller-Trumbore for paired rays and faces; returns (t, u, v, valid)."""
    e1 = accel.e1[faces]
    e2 = accel.e2[faces]
    pvec = np.cross(dirs, e2)
    det = _dot(e1, pvec)
    ok = np.abs(det) > DET_EPS
    inv = 1.0 / np.where(ok, det, 1.0)
    tvec = origins - accel.v0[faces]
    u = _dot(tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = _dot(dirs, qvec) * inv
    t = _dot(e2, qvec) * inv
    valid = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > t_min)
    return t, u, v, valid


def _finish(accel: AccelMesh, origins: np.ndarray, dirs: np.ndarray, best_t: np.ndarray,
            best_face: np.ndarray) -> HitBatch:
    n = len(origins)
    hit = best_face >= 0
    point = np.full((n, 3), np.nan)
    normal = np.zeros((n, 3))
    entering = np.zeros(n, dtype=bool)
    if np.any(hit):
        idx = np.flatnonzero(hit)
        faces = best_face[idx]
        t, u, v, _ = _triangle_hits(accel, origins[idx], dirs[idx], faces, -np.inf)
        point[idx] = origins[idx] + best_t[idx, None] * dirs[idx]
        tri_n = accel.mesh.normals[accel.mesh.faces[faces]]
        shade = (1.0 - u - v)[:, None] * tri_n[:, 0] + u[:, None] * tri_n[:, 1] + v[:, None] * tri_n[:, 2]
        length = np.linalg.norm(shade, axis=1)
        geo = accel.geo_normal[faces]
        shade = np.where(length[:, None] > 1e-12, shade / np.maximum(length, 1e-300)[:, None], geo)
        d = dirs[idx]
        shade = np.where((_dot(shade, d) > 0.0)[:, None], -shade, shade)
        geo_dot = _dot(geo, d)
        geo_facing = np.where((geo_dot > 0.0)[:, None], -geo, geo)
        # a shading normal at grazing incidence falls back to the facing geometric normal
        shade = np.where((_dot(shade, d) > -1e-12)[:, None], geo_facing, shade)
        normal[idx] = shade
        entering[idx] = geo_dot < 0.0
    return HitBatch(hit, best_t, best_face, point, normal, entering)


def _traverse(accel: AccelMesh, origins: np.ndarray, dirs: np.ndarray, t_min: float, stats: QueryStats):
    n = len(origins)
    safe = np.where(np.abs(dirs) < 1e-300, 1e-300, dirs)
    inv_dir = 1.0 / safe
    best_t = np.full(n, np.inf)
    best_face = np.full(n, -1, dtype=np.int64)
    ray_idx = np.arange(n)
    node_idx = np.zeros(n, dtype=np.int64)
    while len(ray_idx):
        stats.node_visits += len(ray_idx)
        o = origins[ray_idx]
        inv = inv_dir[ray_idx]
        t0 = (accel.node_min[node_idx] - o) * inv
        t1 = (accel.node_max[node_idx] - o) * inv
        t_near = np.minimum(t0, t1).max(axis=1)
        t_far = np.maximum(t0, t1).min(axis=1)
        keep = (t_near <= t_far) & (t_far >= t_min) & (t_near <= best_t[ray_idx])
        ray_idx = ray_idx[keep]
        node_idx = node_idx[keep]

        leaf = accel.left[node_idx] < 0
        leaf_rays = ray_idx[leaf]
        leaf_nodes = node_idx[leaf]
        if len(leaf_rays):
            counts = accel.count[leaf_nodes]
            rays = np.repeat(leaf_rays, counts)
            first = np.repeat(accel.start[leaf_nodes], counts)
            within = np.arange(len(rays)) - np.repeat(np.cumsum(counts) - counts, counts)
            faces = accel.face_order[first + within]
            stats.triangle_tests += len(rays)
            t, _, _, valid = _triangle_hits(accel, origins[rays], dirs[rays], faces, t_min)
            rays, faces, t = rays[valid], faces[valid], t[valid]
            if len(rays):
                order = np.lexsort((faces, t, rays))
                rays, faces, t = rays[order], faces[order], t[order]
                _, first_of_ray = np.unique(rays, return_index=True)
                rays, faces, t = rays[first_of_ray], faces[first_of_ray], t[first_of_ray]
                better = (t < best_t[rays]) | ((t == best_t[rays]) & (faces < best_face[rays]))
                best_t[rays[better]] = t[better]
                best_face[rays[better]] = faces[better]

        inner_rays = ray_idx[~leaf]
        inner_nodes = node_idx[~leaf]
        ray_idx = np.concatenate([inner_rays, inner_rays])
        node_idx = np.concatenate([accel.left[inner_nodes], accel.right[inner_nodes]])
    return best_t, best_face


def intersect_rays(accel: AccelMesh, origins: np.ndarray, dirs: np.ndarray, t_min: Optional[float] = None,
                   stats: Optional[QueryStats] = None, threads: int = 1) -> HitBatch:
    """
    Nearest hits with t > t_min for a batch of rays.

    Args:
        accel: Accelerator built by build_accel
        origins, dirs: (N, 3) ray origins and unit directions
        t_min: Self-intersection offset (default 1e-4 of the scene diagonal)
        stats: Optional counters to accumulate into
        threads: Worker count for ray chunks

    Returns:
        HitBatch with shading normals facing the incoming rays
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t_min = accel.default_t_min if t_min is None else float(t_min)

    def run(lo: int, hi: int):
        local = QueryStats()
        best_t, best_face = _traverse(accel, origins[lo:hi], dirs[lo:hi], t_min, local)
        return best_t, best_face, local

    parts = map_ranges(run, chunk_ranges(len(origins), RAY_CHUNK), threads)
    if parts:
        best_t = np.concatenate([p[0] for p in parts])
        best_face = np.concatenate([p[1] for p in parts])
    else:
        best_t, best_face = np.zeros(0), np.zeros(0, dtype=np.int64)
    if stats is not None:
        for p in parts:
            stats.add(p[2])
    return _finish(accel, origins, dirs, best_t, best_face)


def intersect_brute(accel: AccelMesh, origins: np.ndarray, dirs: np.ndarray,
                    t_min: Optional[float] = None) -> HitBatch:
    """Reference nearest-hit query testing every face (lowest face index wins ties)."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t_min = accel.default_t_min if t_min is None else float(t_min)
    n_faces = len(accel.mesh.faces)
    best_t = np.full(len(origins), np.inf)
    best_face = np.full(len(origins), -1, dtype=np.int64)
    faces = np.arange(n_faces)
    for i in range(len(origins)):
        o = np.broadcast_to(origins[i], (n_faces, 3))
        d = np.broadcast_to(dirs[i], (n_faces, 3))
        t, _, _, valid = _triangle_hits(accel, o, d, faces, t_min)
        t = np.where(valid, t, np.inf)
        j = int(np.argmin(t))
        if np.isfinite(t[j]):
            best_t[i], best_face[i] = t[j], j
    return _finish(accel, origins, dirs, best_t, best_face)


def intersect(accel: AccelMesh, ray: Ray, t_min: Optional[float] = None) -> Optional[SurfaceHit]:
    """Nearest hit of a single ray, or None."""
    batch = intersect_rays(accel, ray.origin[None], ray.direction[None], t_min)
    return batch.at(0)
