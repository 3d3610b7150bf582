"""
Refraction Tracing

Bends camera rays through a closed hull mesh with Snell's law (total internal
reflection included), builds piecewise-linear paths capped at two interface
events, and places stratified samples along them.
"""
import csv
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .accel import AccelMesh, intersect_rays
from .camera_io import Ray
from .errors import RefractionError

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-6
MAX_SEGMENTS = 3


class EventKind(str, Enum):
    REFRACT = "Refract"
    TIR = "TIR"


class PathClass(str, Enum):
    MISS = "Miss"
    THROUGH = "Through"
    TIR_EXIT = "TIRExit"


# integer codes used by PathBatch
_CLASS_CODES = [PathClass.MISS, PathClass.THROUGH, PathClass.TIR_EXIT]
NO_EVENT, REFRACT_CODE, TIR_CODE = -1, 0, 1


@dataclass(frozen=True, eq=False)
class RefractionEvent:
    kind: EventKind
    cos_theta1: float
    cos_theta2: float
    n1: float
    n2: float
    out_dir: np.ndarray


@dataclass(frozen=True, eq=False)
class Segment:
    origin: np.ndarray
    direction: np.ndarray
    length: float

    @property
    def end(self) -> np.ndarray:
        return self.origin + self.length * self.direction


@dataclass(frozen=True, eq=False)
class RayPath:
    segments: Tuple[Segment, ...]
    events: Tuple[RefractionEvent, ...]
    classification: PathClass

    @property
    def total_length(self) -> float:
        return float(sum(s.length for s in self.segments))


@dataclass(frozen=True, eq=False)
class SamplePoint:
    position: np.ndarray
    direction: np.ndarray
    delta: float
    segment: int


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def refract_dirs(l: np.ndarray, n: np.ndarray, eta) -> tuple:
    """
    Vector Snell's law for arrays of unit directions.

    Args:
        l: (N, 3) incoming directions
        n: (N, 3) normals facing the incoming rays (n . l < 0)
        eta: n1 / n2, scalar or (N,)

    Returns:
        out: (N, 3) unit outgoing directions
        tir: (N,) bool, total internal reflection
        cos1, cos2: (N,) cosines of incidence and transmission (cos2 = 0 on TIR)
    """
    eta = np.asarray(eta, dtype=np.float64)
    cos1 = np.minimum(-_dot(n, l), 1.0)
    radicand = 1.0 - eta * eta * (1.0 - cos1 * cos1)
    tir = radicand < 0.0
    cos2 = np.sqrt(np.maximum(radicand, 0.0))
    refracted = eta[..., None] * l + (eta * cos1 - cos2)[..., None] * n
    reflected = l + (2.0 * cos1)[..., None] * n
    out = np.where(tir[..., None], reflected, refracted)
    out = out / np.linalg.norm(out, axis=-1, keepdims=True)
    return out, tir, cos1, np.where(tir, 0.0, cos2)


def refract_dir(l: Sequence[float], n: Sequence[float], n1: float, n2: float) -> RefractionEvent:
    """
    Refract (or totally reflect) one direction at an interface.

    Args:
        l: Unit incoming direction
        n: Unit normal on the incoming side (n . l < 0)
        n1: Index of refraction on the incoming side
        n2: Index of refraction on the far side

    Raises:
        RefractionError: non-unit vectors, n . l >= 0, or an index below 1
    """
    l = np.asarray(l, dtype=np.float64).reshape(3)
    n = np.asarray(n, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(l) - 1.0) > UNIT_TOL or abs(np.linalg.norm(n) - 1.0) > UNIT_TOL:
        raise RefractionError("incoming direction and normal must be unit vectors")
    if float(n @ l) >= 0.0:
        raise RefractionError(f"normal must face the incoming ray, got n.l = {float(n @ l):.6g}")
    if n1 < 1.0 or n2 < 1.0:
        raise RefractionError(f"refractive indices must be >= 1, got {n1}, {n2}")
    out, tir, cos1, cos2 = refract_dirs(l[None], n[None], n1 / n2)
    kind = EventKind.TIR if tir[0] else EventKind.REFRACT
    return RefractionEvent(kind, float(cos1[0]), float(cos2[0]), float(n1), float(n2), out[0])


@dataclass(frozen=True, eq=False)
class PathBatch:
    """
    Paths for N rays in padded arrays.

    Unused segments have zero length and repeat the last origin; events are
    coded NO_EVENT / REFRACT_CODE / TIR_CODE and event k starts segment k + 1.
    """
    origins: np.ndarray
    directions: np.ndarray
    lengths: np.ndarray
    n_segments: np.ndarray
    event_kind: np.ndarray
    cos_theta1: np.ndarray
    cos_theta2: np.ndarray
    classification: np.ndarray
    ior: float

    def __len__(self) -> int:
        return len(self.n_segments)

    def path(self, i: int) -> RayPath:
        segments = tuple(Segment(self.origins[i, k].copy(), self.directions[i, k].copy(), float(self.lengths[i, k]))
                         for k in range(self.n_segments[i]))
        events = []
        for k in range(self.n_segments[i] - 1):
            n1, n2 = (1.0, self.ior) if k == 0 else (self.ior, 1.0)
            kind = EventKind.TIR if self.event_kind[i, k] == TIR_CODE else EventKind.REFRACT
            events.append(RefractionEvent(kind, float(self.cos_theta1[i, k]), float(self.cos_theta2[i, k]),
                                          n1, n2, self.directions[i, k + 1].copy()))
        return RayPath(segments, tuple(events), _CLASS_CODES[self.classification[i]])

    def take(self, index: np.ndarray) -> "PathBatch":
        """Sub-batch of the given rows."""
        return PathBatch(self.origins[index], self.directions[index], self.lengths[index], self.n_segments[index],
                         self.event_kind[index], self.cos_theta1[index], self.cos_theta2[index],
                         self.classification[index], self.ior)

    def in_object(self, samples: "SampleBatch", accel: Optional[AccelMesh] = None) -> np.ndarray:
        """
        (N, S) mask of samples inside the object.

        Segment 1 of an entered path is inside. After total internal reflection
        segment 2 starts inside too; with `accel` it counts up to its next
        surface hit, without it to the end of the path.
        """
        seg = samples.segments
        inside = (self.n_segments >= 2)[:, None] & (seg == 1)
        tir = self.event_kind[:, 1] == TIR_CODE
        reflected = tir[:, None] & (seg == 2)
        if accel is not None and reflected.any():
            rows = np.flatnonzero(tir)
            hits = intersect_rays(accel, self.origins[rows, 2], self.directions[rows, 2])
            limit = np.full(len(seg), np.inf)
            limit[rows] = hits.t
            offset = samples.arc - self.lengths[:, :2].sum(axis=1)[:, None]
            reflected &= offset < limit[:, None]
        return inside | reflected


def straight_paths(origins: np.ndarray, dirs: np.ndarray, t_far: float) -> PathBatch:
    """Single-segment paths that ignore any mesh."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    seg_o = np.repeat(origins[:, None], MAX_SEGMENTS, axis=1)
    seg_d = np.repeat(dirs[:, None], MAX_SEGMENTS, axis=1)
    lengths = np.zeros((n, MAX_SEGMENTS))
    lengths[:, 0] = t_far
    return PathBatch(seg_o, seg_d, lengths, np.ones(n, dtype=np.int64), np.full((n, 2), NO_EVENT),
                     np.zeros((n, 2)), np.zeros((n, 2)), np.zeros(n, dtype=np.int64), 1.0)


def build_paths(origins: np.ndarray, dirs: np.ndarray, accel: AccelMesh, ior: float, t_far: float,
                t_min: Optional[float] = None, threads: int = 1) -> PathBatch:
    """
    Two-event refracted paths for a batch of rays.

    The first hit refracts from air (1) into the medium (ior), the next hit
    along the bent ray refracts or totally reflects back out (ior -> 1), and the
    ray then runs straight. Every path ends at arc length t_far.
    """
    if ior < 1.0:
        raise RefractionError(f"ior must be >= 1, got {ior}")
    if t_far <= 0.0:
        raise RefractionError(f"t_far must be positive, got {t_far}")
    paths = straight_paths(origins, dirs, t_far)
    seg_o, seg_d, lengths = paths.origins, paths.directions, paths.lengths
    n_seg, kinds, cos1, cos2 = paths.n_segments, paths.event_kind, paths.cos_theta1, paths.cos_theta2
    classes = paths.classification
    if not len(n_seg):
        return paths

    front = intersect_rays(accel, seg_o[:, 0], seg_d[:, 0], t_min, threads=threads)
    entered = np.flatnonzero(front.hit & (front.t < t_far))
    if len(entered):
        t1 = front.t[entered]
        d1, _, c1, c2 = refract_dirs(seg_d[entered, 0], front.normal[entered], 1.0 / ior)
        lengths[entered, 0] = t1
        lengths[entered, 1] = t_far - t1
        seg_o[entered, 1:] = front.point[entered, None]
        seg_d[entered, 1:] = d1[:, None]
        n_seg[entered] = 2
        kinds[entered, 0] = REFRACT_CODE
        cos1[entered, 0], cos2[entered, 0] = c1, c2
        classes[entered] = 1

        rear = intersect_rays(accel, front.point[entered], d1, t_min, threads=threads)
        exits = rear.hit & (t1 + rear.t < t_far)
        rows = entered[exits]
        if len(rows):
            t2 = rear.t[exits]
            d2, tir, c1, c2 = refract_dirs(d1[exits], rear.normal[exits], ior)
            lengths[rows, 1] = t2
            lengths[rows, 2] = t_far - t1[exits] - t2
            seg_o[rows, 2] = rear.point[exits]
            seg_d[rows, 2] = d2
            n_seg[rows] = 3
            kinds[rows, 1] = np.where(tir, TIR_CODE, REFRACT_CODE)
            cos1[rows, 1], cos2[rows, 1] = c1, c2
            classes[rows] = np.where(tir, 2, 1)
        logger.debug("paths: %d rays, %d entered, %d exited", len(n_seg), len(entered), len(rows))
    return PathBatch(seg_o, seg_d, lengths, n_seg, kinds, cos1, cos2, classes, float(ior))


def build_path(ray: Ray, accel: AccelMesh, ior: float, t_far: float, t_min: Optional[float] = None) -> RayPath:
    """Two-event refracted path of a single ray."""
    return build_paths(ray.origin[None], ray.direction[None], accel, ior, t_far, t_min).path(0)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SampleBatch:
    """(N, S) samples; every delta equals the uniform spacing."""
    positions: np.ndarray
    directions: np.ndarray
    deltas: np.ndarray
    segments: np.ndarray
    arc: np.ndarray


def sample_paths(paths: PathBatch, t_near: float, t_far: float, count: int,
                 rng: Optional[np.random.Generator] = None) -> SampleBatch:
    """
    Stratified samples over arc length [t_near, t_far] of every path.

    Sample i sits at the midpoint of the i-th of `count` equal sub-intervals,
    or at a uniform random offset inside it when `rng` is given.

    Raises:
        RefractionError: count < 2, t_near < 0 or t_near >= t_far
    """
    if count < 2:
        raise RefractionError(f"need at least 2 samples per ray, got {count}")
    if t_near < 0.0 or t_near >= t_far:
        raise RefractionError(f"invalid sampling span [{t_near}, {t_far}]")
    n = len(paths)
    spacing = (t_far - t_near) / count
    offsets = rng.random((n, count)) if rng is not None else np.full((n, count), 0.5)
    arc = t_near + (np.arange(count)[None, :] + offsets) * spacing

    ends = np.cumsum(paths.lengths, axis=1)
    starts = ends - paths.lengths
    seg = (arc[:, :, None] >= ends[:, None, :MAX_SEGMENTS - 1]).sum(axis=2)
    seg = np.minimum(seg, (paths.n_segments - 1)[:, None])
    rows = np.arange(n)[:, None]
    origin = paths.origins[rows, seg]
    direction = paths.directions[rows, seg]
    positions = origin + (arc - starts[rows, seg])[..., None] * direction
    deltas = np.full((n, count), spacing)
    return SampleBatch(positions, direction, deltas, seg, arc)


def sample_path(path: RayPath, t_near: float, t_far: float, count: int,
                rng: Optional[np.random.Generator] = None) -> List[SamplePoint]:
    """Stratified samples along one path."""
    k = len(path.segments)
    origins = np.zeros((1, MAX_SEGMENTS, 3))
    dirs = np.zeros((1, MAX_SEGMENTS, 3))
    lengths = np.zeros((1, MAX_SEGMENTS))
    for i in range(MAX_SEGMENTS):
        seg = path.segments[min(i, k - 1)]
        origins[0, i], dirs[0, i] = seg.origin, seg.direction
        lengths[0, i] = seg.length if i < k else 0.0
    batch = PathBatch(origins, dirs, lengths, np.array([k]), np.full((1, 2), NO_EVENT), np.zeros((1, 2)),
                      np.zeros((1, 2)), np.zeros(1, dtype=np.int64), 1.0)
    samples = sample_paths(batch, t_near, t_far, count, rng)
    return [SamplePoint(samples.positions[0, i], samples.directions[0, i], float(samples.deltas[0, i]),
                        int(samples.segments[0, i])) for i in range(count)]


def write_paths_csv(path: str, paths: PathBatch, ray_ids: Optional[Sequence[int]] = None):
    """Debug dump: one row per segment, event columns describe the event that started it."""
    ray_ids = range(len(paths)) if ray_ids is None else ray_ids
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["ray_id", "segment", "origin_xyz", "dir_xyz", "length", "event_kind",
                         "cos_theta1", "cos_theta2"])
        for row, ray_id in enumerate(ray_ids):
            for k in range(paths.n_segments[row]):
                kind, c1, c2 = "none", "", ""
                if k > 0:
                    code = paths.event_kind[row, k - 1]
                    kind = EventKind.TIR.value if code == TIR_CODE else EventKind.REFRACT.value
                    c1 = f"{paths.cos_theta1[row, k - 1]:.9f}"
                    c2 = f"{paths.cos_theta2[row, k - 1]:.9f}"
                writer.writerow([
                    ray_id, k,
                    " ".join(f"{x:.9f}" for x in paths.origins[row, k]),
                    " ".join(f"{x:.9f}" for x in paths.directions[row, k]),
                    f"{paths.lengths[row, k]:.9f}", kind, c1, c2,
                ])
