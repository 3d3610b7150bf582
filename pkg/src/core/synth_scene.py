"""
Synthetic Scenes

Analytic glass solids (cube, sphere, cylinder) in front of a checkerboard
plane. Images are traced exactly with the same two-event refraction model the
mesh pipeline uses, masks come from primary-ray hits, and camera rigs are
written as COLMAP text files so datasets load like captured ones.
"""
import json
import logging
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .camera_io import (CameraRecord, Intrinsics, Pose, Ray, View, save_image, save_mask, view_rays,
                        write_colmap)
from .errors import SceneError
from .logs import log_event
from .mesh import TriMesh, box_mesh, cylinder_mesh, icosphere
from .refract_trace import refract_dirs
from .version import APP_NAME, __version__
from .workers import chunk_ranges, map_ranges

logger = logging.getLogger(__name__)

AMBIENT = (0.5, 0.5, 0.5)
CHECKER_A = (0.85, 0.1, 0.1)
CHECKER_B = (0.95, 0.95, 0.95)
HIT_EPS = 1e-6
PIXEL_CHUNK = 8192

# default index of refraction per preset solid
IOR_PRESETS = {"cube": 1.5, "bottle": 1.4, "cup": 1.35, "sphere": 1.4}


def _safe_inverse(dirs: np.ndarray) -> np.ndarray:
    return 1.0 / np.where(np.abs(dirs) < 1e-300, 1e-300, dirs)


def _nearest(candidates: np.ndarray, t_min: float) -> Tuple[np.ndarray, np.ndarray]:
    """Smallest candidate > t_min per row and its column (-1 when none)."""
    masked = np.where(candidates > t_min, candidates, np.inf)
    col = np.argmin(masked, axis=1)
    t = masked[np.arange(len(masked)), col]
    return t, np.where(np.isfinite(t), col, -1)


class Solid(ABC):
    """Closed convex glass solid with analytic ray intersection."""

    kind = ""

    @abstractmethod
    def intersect(self, origins: np.ndarray, dirs: np.ndarray, t_min: float = HIT_EPS):
        """Nearest t > t_min (inf on miss) and the outward normal there."""

    @abstractmethod
    def contains(self, points: np.ndarray) -> np.ndarray:
        """True for points strictly inside."""

    @abstractmethod
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        ...

    @abstractmethod
    def mesh(self, fine: bool = True) -> TriMesh:
        ...

    @abstractmethod
    def describe(self) -> Dict:
        ...


@dataclass(frozen=True, eq=False)
class Cube(Solid):
    center: np.ndarray
    half_extent: float
    kind = "cube"

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if self.half_extent <= 0:
            raise SceneError(f"cube half extent must be positive, got {self.half_extent}")

    def intersect(self, origins, dirs, t_min=HIT_EPS):
        inv = _safe_inverse(dirs)
        t0 = (self.center - self.half_extent - origins) * inv
        t1 = (self.center + self.half_extent - origins) * inv
        t_near = np.minimum(t0, t1).max(axis=1)
        t_far = np.maximum(t0, t1).min(axis=1)
        valid = t_near <= t_far
        candidates = np.stack([np.where(valid, t_near, -np.inf), np.where(valid, t_far, -np.inf)], axis=1)
        t, _ = _nearest(candidates, t_min)
        local = (origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs - self.center) / self.half_extent
        axis = np.argmax(np.abs(local), axis=1)
        normal = np.zeros_like(local)
        rows = np.arange(len(local))
        normal[rows, axis] = np.sign(local[rows, axis])
        return t, normal

    def contains(self, points):
        return np.all(np.abs(points - self.center) < self.half_extent, axis=-1)

    def bounds(self):
        return self.center - self.half_extent, self.center + self.half_extent

    def mesh(self, fine=True):
        return box_mesh(self.center, self.half_extent, split_faces=True)

    def describe(self):
        return {"type": self.kind, "center": self.center.tolist(), "half_extent": self.half_extent}


@dataclass(frozen=True, eq=False)
class Sphere(Solid):
    center: np.ndarray
    radius: float
    kind = "sphere"

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if self.radius <= 0:
            raise SceneError(f"sphere radius must be positive, got {self.radius}")

    def intersect(self, origins, dirs, t_min=HIT_EPS):
        oc = origins - self.center
        b = np.einsum("ij,ij->i", dirs, oc)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        candidates = np.stack([-b - root, -b + root], axis=1)
        candidates[disc < 0] = -np.inf
        t, _ = _nearest(candidates, t_min)
        point = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        return t, (point - self.center) / self.radius

    def contains(self, points):
        return np.linalg.norm(points - self.center, axis=-1) < self.radius

    def bounds(self):
        return self.center - self.radius, self.center + self.radius

    def mesh(self, fine=True):
        return icosphere(self.radius, 5 if fine else 3, self.center)

    def describe(self):
        return {"type": self.kind, "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True, eq=False)
class Cylinder(Solid):
    """Capped cylinder with its axis along +y."""
    center: np.ndarray
    radius: float
    half_height: float
    kind = "cylinder"

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if self.radius <= 0 or self.half_height <= 0:
            raise SceneError("cylinder radius and half height must be positive")

    def intersect(self, origins, dirs, t_min=HIT_EPS):
        o = origins - self.center
        a = dirs[:, 0] ** 2 + dirs[:, 2] ** 2
        b = o[:, 0] * dirs[:, 0] + o[:, 2] * dirs[:, 2]
        c = o[:, 0] ** 2 + o[:, 2] ** 2 - self.radius ** 2
        disc = b * b - a * c
        safe_a = np.where(a > 1e-300, a, 1.0)
        root = np.sqrt(np.maximum(disc, 0.0))
        side = np.stack([(-b - root) / safe_a, (-b + root) / safe_a], axis=1)
        side[(disc < 0) | (a <= 1e-300)] = -np.inf
        side_y = o[:, 1:2] + side * dirs[:, 1:2]
        side[np.abs(side_y) > self.half_height] = -np.inf

        inv_y = _safe_inverse(dirs[:, 1:2])[:, 0]
        caps = np.stack([(-self.half_height - o[:, 1]) * inv_y, (self.half_height - o[:, 1]) * inv_y], axis=1)
        for k in range(2):
            x = o[:, 0] + caps[:, k] * dirs[:, 0]
            z = o[:, 2] + caps[:, k] * dirs[:, 2]
            caps[x * x + z * z > self.radius ** 2, k] = -np.inf

        t, col = _nearest(np.concatenate([side, caps], axis=1), t_min)
        point = o + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        normal = np.zeros_like(point)
        on_side = (col == 0) | (col == 1)
        radial = point[:, [0, 2]] / self.radius
        normal[on_side, 0] = radial[on_side, 0]
        normal[on_side, 2] = radial[on_side, 1]
        normal[col == 2, 1] = -1.0
        normal[col == 3, 1] = 1.0
        return t, normal

    def contains(self, points):
        o = points - self.center
        return (o[..., 0] ** 2 + o[..., 2] ** 2 < self.radius ** 2) & (np.abs(o[..., 1]) < self.half_height)

    def bounds(self):
        extent = np.array([self.radius, self.half_height, self.radius])
        return self.center - extent, self.center + extent

    def mesh(self, fine=True):
        return cylinder_mesh(self.center, self.radius, self.half_height, 256 if fine else 64)

    def describe(self):
        return {"type": self.kind, "center": self.center.tolist(), "radius": self.radius,
                "half_height": self.half_height}


@dataclass(frozen=True, eq=False)
class CheckerPlane:
    origin: np.ndarray
    normal: np.ndarray
    u_axis: np.ndarray
    cell: float = 0.25
    color_a: Tuple[float, float, float] = CHECKER_A
    color_b: Tuple[float, float, float] = CHECKER_B
    v_axis: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=np.float64)
        normal = normal / np.linalg.norm(normal)
        u_axis = np.asarray(self.u_axis, dtype=np.float64)
        u_axis = u_axis - (u_axis @ normal) * normal
        if np.linalg.norm(u_axis) < 1e-12:
            raise SceneError("checkerboard u axis is parallel to the plane normal")
        if self.cell <= 0:
            raise SceneError(f"checker cell must be positive, got {self.cell}")
        u_axis = u_axis / np.linalg.norm(u_axis)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "u_axis", u_axis)
        object.__setattr__(self, "v_axis", np.cross(normal, u_axis))

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return (points - self.origin) @ self.normal

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the plane hit, inf when parallel or behind."""
        denom = dirs @ self.normal
        safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
        t = (self.origin - origins) @ self.normal / safe
        return np.where((np.abs(denom) > 1e-12) & (t > 0.0), t, np.inf)

    def color_at(self, points: np.ndarray) -> np.ndarray:
        rel = points - self.origin
        iu = np.floor(rel @ self.u_axis / self.cell).astype(np.int64)
        iv = np.floor(rel @ self.v_axis / self.cell).astype(np.int64)
        even = (iu + iv) % 2 == 0
        return np.where(even[:, None], np.array(self.color_a), np.array(self.color_b))


@dataclass(frozen=True, eq=False)
class SceneSpec:
    solid: Solid
    ior: float
    background: CheckerPlane
    ambient: Tuple[float, float, float] = AMBIENT

    def __post_init__(self):
        if self.ior < 1.0:
            raise SceneError(f"ior must be >= 1, got {self.ior}")
        lo, hi = self.solid.bounds()
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        if np.any(self.background.signed_distance(corners) <= 0.0):
            raise SceneError("solid must lie strictly in front of the background plane")

    def describe(self) -> Dict:
        bg = self.background
        return {
            "solid": self.solid.describe(),
            "ior": self.ior,
            "background": {"origin": bg.origin.tolist(), "normal": bg.normal.tolist(), "u_axis": bg.u_axis.tolist(),
                           "cell": bg.cell, "color_a": list(bg.color_a), "color_b": list(bg.color_b)},
            "ambient": list(self.ambient),
        }


def make_scene(solid: str = "cube", ior: Optional[float] = None, size: float = 0.5, checker_cell: float = 0.25,
               background_z: float = -1.2) -> SceneSpec:
    """
    Preset scene centered at the origin over a checkerboard at z = background_z.

    Args:
        solid: cube, sphere, bottle or cup (cylinders)
        ior: Index of refraction (preset default when None)
        size: Half extent / radius / half height of the solid
    """
    center = np.zeros(3)
    if solid == "cube":
        shape = Cube(center, size)
    elif solid == "sphere":
        shape = Sphere(center, size)
    elif solid == "bottle":
        shape = Cylinder(center, 0.5 * size, size)
    elif solid == "cup":
        shape = Cylinder(center, 0.8 * size, 0.7 * size)
    else:
        raise SceneError(f"unknown solid {solid!r}; expected one of {sorted(IOR_PRESETS)}")
    ior = IOR_PRESETS[solid] if ior is None else float(ior)
    plane = CheckerPlane([0.0, 0.0, background_z], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0], checker_cell)
    return SceneSpec(shape, ior, plane)


# ---------------------------------------------------------------------------
# Oracle tracing
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OracleTrace:
    """Exact traced rays: final straight ray, event count and the background color seen."""
    final_origin: np.ndarray
    final_dir: np.ndarray
    n_events: np.ndarray
    tir: np.ndarray
    primary_hit: np.ndarray
    color: np.ndarray


def oracle_paths(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray) -> OracleTrace:
    """Analytic two-event trace of a batch of rays, then a background lookup."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    final_o, final_d = origins.copy(), dirs.copy()
    n_events = np.zeros(len(origins), dtype=np.int64)
    tir = np.zeros(len(origins), dtype=bool)

    t1, n1 = scene.solid.intersect(origins, dirs)
    hit = np.isfinite(t1)
    rows = np.flatnonzero(hit)
    if len(rows):
        p1 = origins[rows] + t1[rows, None] * dirs[rows]
        facing = np.where((np.einsum("ij,ij->i", n1[rows], dirs[rows]) > 0)[:, None], -n1[rows], n1[rows])
        d1, _, _, _ = refract_dirs(dirs[rows], facing, 1.0 / scene.ior)
        final_o[rows], final_d[rows] = p1, d1
        n_events[rows] = 1

        t2, n2 = scene.solid.intersect(p1, d1)
        out = np.isfinite(t2)
        rows2 = rows[out]
        if len(rows2):
            p2 = p1[out] + t2[out, None] * d1[out]
            facing = np.where((np.einsum("ij,ij->i", n2[out], d1[out]) > 0)[:, None], -n2[out], n2[out])
            d2, reflected, _, _ = refract_dirs(d1[out], facing, scene.ior)
            final_o[rows2], final_d[rows2] = p2, d2
            n_events[rows2] = 2
            tir[rows2] = reflected

    t_bg = scene.background.intersect(final_o, final_d)
    color = np.tile(np.array(scene.ambient, dtype=np.float64), (len(origins), 1))
    seen = np.isfinite(t_bg)
    if np.any(seen):
        color[seen] = scene.background.color_at(final_o[seen] + t_bg[seen, None] * final_d[seen])
    return OracleTrace(final_o, final_d, n_events, tir, hit, color)


def oracle_trace(scene: SceneSpec, ray: Ray) -> np.ndarray:
    """Exact color seen along one ray."""
    return oracle_paths(scene, ray.origin[None], ray.direction[None]).color[0]


def render_mask(scene: SceneSpec, view: View) -> np.ndarray:
    """(H, W) bool: primary ray through the pixel center hits the solid."""
    origins, dirs = view_rays(view)
    t, _ = scene.solid.intersect(origins, dirs)
    return np.isfinite(t).reshape(view.height, view.width)


def render_oracle_image(scene: SceneSpec, view: View, threads: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Exact image and mask of a view."""
    origins, dirs = view_rays(view)

    def trace(lo: int, hi: int):
        result = oracle_paths(scene, origins[lo:hi], dirs[lo:hi])
        return result.color, result.primary_hit

    parts = map_ranges(trace, chunk_ranges(len(origins), PIXEL_CHUNK), threads)
    image = np.concatenate([p[0] for p in parts]).reshape(view.height, view.width, 3)
    mask = np.concatenate([p[1] for p in parts]).reshape(view.height, view.width)
    return image, mask


# ---------------------------------------------------------------------------
# Camera rigs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigSpec:
    """
    Camera placement around a look-at target.

    `arc` spreads cameras over rows of elevation across a frontal azimuth span
    (facing -z, toward the background); `ring` covers the full circle around
    the y axis and adds `polar_views` cameras above and below.
    """
    n_views: int = 44
    width: int = 96
    height: int = 72
    fov_deg: float = 40.0
    distance: float = 4.0
    azimuth_span_deg: float = 30.0
    elevations_deg: Tuple[float, ...] = (-12.0, 0.0, 12.0)
    target: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    layout: str = "arc"
    polar_views: int = 0

    def __post_init__(self):
        if self.n_views < 2:
            raise SceneError(f"a rig needs at least 2 views, got {self.n_views}")
        if self.layout not in ("arc", "ring"):
            raise SceneError(f"unknown rig layout {self.layout!r}")
        if not self.elevations_deg:
            raise SceneError("rig needs at least one elevation row")
        if not 0.0 < self.fov_deg < 180.0:
            raise SceneError(f"field of view must lie in (0, 180), got {self.fov_deg}")
        if self.distance <= 0:
            raise SceneError(f"camera distance must be positive, got {self.distance}")

    @property
    def intrinsics(self) -> Intrinsics:
        f = 0.5 * self.width / np.tan(np.radians(self.fov_deg) / 2.0)
        return Intrinsics(self.width, self.height, f, f, self.width / 2.0, self.height / 2.0)

    def describe(self) -> Dict:
        return {"n_views": self.n_views, "width": self.width, "height": self.height, "fov_deg": self.fov_deg,
                "distance": self.distance, "azimuth_span_deg": self.azimuth_span_deg,
                "elevations_deg": list(self.elevations_deg), "target": list(self.target),
                "layout": self.layout, "polar_views": self.polar_views}


def look_at(center: Sequence[float], target: Sequence[float]) -> Pose:
    """World-to-camera pose of a camera at `center` facing `target`, image y toward -y world."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise SceneError("camera coincides with its look-at target")
    forward /= norm
    down = np.array([0.0, -1.0, 0.0])
    if abs(forward @ down) > 0.999:
        down = np.array([0.0, 0.0, -1.0])
    x_axis = np.cross(down, forward)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(forward, x_axis)
    rotation = np.stack([x_axis, y_axis, forward])
    return Pose.from_rotation(rotation, -rotation @ center)


def _row_counts(total: int, rows: int) -> List[int]:
    return [total // rows + (1 if i < total % rows else 0) for i in range(rows)]


def camera_centers(rig: RigSpec) -> np.ndarray:
    target = np.asarray(rig.target, dtype=np.float64)
    n_ring = rig.n_views - (rig.polar_views if rig.layout == "ring" else 0)
    if n_ring < 1:
        raise SceneError("polar views leave no ring cameras")
    rows = _row_counts(n_ring, len(rig.elevations_deg))
    centers = []
    for elevation, count in zip(rig.elevations_deg, rows):
        if rig.layout == "arc":
            span = rig.azimuth_span_deg
            azimuths = np.linspace(-span, span, count) if count > 1 else np.zeros(1)
        else:
            azimuths = np.arange(count) * 360.0 / max(count, 1)
        el = np.radians(elevation)
        for az in np.radians(azimuths):
            centers.append([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
    if rig.layout == "ring":
        for i in range(rig.polar_views):
            el = np.radians(80.0 if i % 2 == 0 else -80.0)
            az = np.radians(37.0 * i)
            centers.append([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
    centers = target + rig.distance * np.array(centers)
    gaps = np.linalg.norm(centers[:, None] - centers[None], axis=2)
    np.fill_diagonal(gaps, np.inf)
    if np.min(gaps) < 1e-9 * rig.distance:
        raise SceneError("degenerate rig: two cameras coincide")
    return centers


def rig_poses(rig: RigSpec) -> List[Pose]:
    return [look_at(c, rig.target) for c in camera_centers(rig)]


def holdout_indices(n_views: int) -> np.ndarray:
    """Evenly spread 10% hold-out (at least one view)."""
    n_test = max(1, int(round(0.1 * n_views)))
    return np.floor((np.arange(n_test) + 0.5) * n_views / n_test).astype(np.int64)


def blank_views(rig: RigSpec) -> List[View]:
    """Views of the rig with black images and no masks."""
    intr = rig.intrinsics
    black = np.zeros((intr.height, intr.width, 3))
    return [View(intr, pose, black, None, f"view_{i:03d}.png") for i, pose in enumerate(rig_poses(rig))]


def field_hints(scene: SceneSpec, rig: RigSpec, views: Sequence[View]) -> Dict:
    """Field box around the solid and the visible background, and a t span covering it."""
    lo, hi = scene.solid.bounds()
    points = [lo, hi]
    for view in views:
        origins, dirs = view_rays(view)
        t = scene.background.intersect(origins, dirs)
        seen = np.isfinite(t)
        if np.any(seen):
            hits = origins[seen] + t[seen, None] * dirs[seen]
            points += [hits.min(axis=0), hits.max(axis=0)]
    points = np.array(points)
    box_min, box_max = points.min(axis=0), points.max(axis=0)
    pad = 0.05 * (box_max - box_min).max()
    box_min, box_max = box_min - pad, box_max + pad
    corners = np.array([[x, y, z] for x in (box_min[0], box_max[0]) for y in (box_min[1], box_max[1])
                        for z in (box_min[2], box_max[2])])
    centers = camera_centers(rig)
    nearest = np.linalg.norm(centers - np.clip(centers, box_min, box_max), axis=1)
    farthest = np.linalg.norm(centers[:, None] - corners[None], axis=2).max()
    return {"field_bbox_min": box_min.tolist(), "field_bbox_max": box_max.tolist(),
            "t_near": float(max(0.0, nearest.min() * 0.95)), "t_far": float(farthest * 1.05)}


def generate_dataset(scene: SceneSpec, rig: RigSpec, out_dir: str, threads: int = 1,
                     progress: bool = True) -> List[View]:
    """
    Render a complete dataset directory.

    Writes images/, masks/, sparse/cameras.txt, sparse/images.txt and
    manifest.json (scene, rig, train/test split, field box and t hints).

    Raises:
        SceneError: resolution below 32x32, degenerate rig, or a camera not in
            front of the background plane
    """
    if rig.width < 32 or rig.height < 32:
        raise SceneError(f"resolution must be at least 32x32, got {rig.width}x{rig.height}")
    views = blank_views(rig)
    centers = np.array([v.pose.camera_center for v in views])
    if np.any(scene.background.signed_distance(centers) <= 0.0):
        raise SceneError("every camera must be in front of the background plane")

    records, rendered = [], []
    for view in tqdm(views, desc="synth", unit="view", disable=not progress):
        image, mask = render_oracle_image(scene, view, threads)
        save_image(os.path.join(out_dir, "images", view.name), image)
        save_mask(os.path.join(out_dir, "masks", view.name), mask)
        records.append(CameraRecord(1, view.intrinsics, view.name, view.pose))
        rendered.append(View(view.intrinsics, view.pose, image, mask, view.name))
    write_colmap(records, os.path.join(out_dir, "sparse"))

    test = set(holdout_indices(len(views)).tolist())
    manifest = {
        "generator": APP_NAME,
        "version": __version__,
        "scene": scene.describe(),
        "rig": rig.describe(),
        "splits": {
            "train": [v.name for i, v in enumerate(views) if i not in test],
            "test": [v.name for i, v in enumerate(views) if i in test],
        },
    }
    manifest.update(field_hints(scene, rig, views))
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    log_event(logger, "synth.done", out=out_dir, views=len(views), test=len(test), solid=scene.solid.kind,
              ior=scene.ior)
    return rendered
