"""
Camera I/O

Parses COLMAP sparse-model text files, loads images and masks, and provides
the projection / ray-generation primitives every other module shares.

Conventions: poses are world-to-camera (COLMAP), the camera looks down +z with
x right and y down, and pixel (i, j) has its center at (i + 0.5, j + 0.5).
"""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import CameraError, ColmapFormatError, DatasetError

logger = logging.getLogger(__name__)

BEHIND_EPS = 1e-9
MASK_THRESHOLD = 128

# COLMAP model name -> number of parameters
SUPPORTED_MODELS = {
    "SIMPLE_PINHOLE": 3,
    "PINHOLE": 4,
}


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise CameraError(f"image size must be positive, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @property
    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix."""
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def qvec2rotmat(qvec: Sequence[float]) -> np.ndarray:
    """Rotation matrix of a (qw, qx, qy, qz) quaternion."""
    w, x, y, z = np.asarray(qvec, dtype=np.float64) / np.linalg.norm(qvec)
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * z * x + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * z * x - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def rotmat2qvec(rotation: np.ndarray) -> np.ndarray:
    """Unit quaternion (qw >= 0) of a rotation matrix."""
    rxx, ryx, rzx, rxy, ryy, rzy, rxz, ryz, rzz = np.asarray(rotation, dtype=np.float64).flat
    k = np.array([
        [rxx - ryy - rzz, 0, 0, 0],
        [ryx + rxy, ryy - rxx - rzz, 0, 0],
        [rzx + rxz, rzy + ryz, rzz - rxx - ryy, 0],
        [ryz - rzy, rzx - rxz, rxy - ryx, rxx + ryy + rzz]]) / 3.0
    eigvals, eigvecs = np.linalg.eigh(k)
    qvec = eigvecs[[3, 0, 1, 2], np.argmax(eigvals)]
    if qvec[0] < 0:
        qvec = -qvec
    return qvec / np.linalg.norm(qvec)


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform: x_cam = R x_world + t."""
    qvec: np.ndarray
    tvec: np.ndarray
    rotation: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        qvec = np.asarray(self.qvec, dtype=np.float64).reshape(4)
        tvec = np.asarray(self.tvec, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(qvec) - 1.0) > 1e-6:
            raise CameraError(f"quaternion must be unit length, got norm {np.linalg.norm(qvec):.9f}")
        object.__setattr__(self, "qvec", qvec)
        object.__setattr__(self, "tvec", tvec)
        object.__setattr__(self, "rotation", qvec2rotmat(qvec))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rotation(cls, rotation: np.ndarray, tvec: Sequence[float]) -> "Pose":
        return cls(rotmat2qvec(rotation), np.asarray(tvec, dtype=np.float64))

    @property
    def camera_center(self) -> np.ndarray:
        """Camera center in world coordinates (-R^T t)."""
        return -self.rotation.T @ self.tvec


@dataclass(frozen=True, eq=False)
class View:
    """One calibrated observation."""
    intrinsics: Intrinsics
    pose: Pose
    image: np.ndarray
    mask: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        expected = (self.intrinsics.height, self.intrinsics.width, 3)
        if image.shape != expected:
            raise CameraError(f"image shape {image.shape} does not match intrinsics {expected}")
        image.setflags(write=False)
        object.__setattr__(self, "image", image)
        if self.mask is not None:
            mask = np.asarray(self.mask).astype(bool)
            if mask.shape != expected[:2]:
                raise CameraError(f"mask shape {mask.shape} does not match image {expected[:2]}")
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height


@dataclass(frozen=True, eq=False)
class Ray:
    """Half-line with unit direction."""
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
            raise CameraError(f"ray direction must be unit length, got norm {np.linalg.norm(direction):.12f}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


class CameraRecord(NamedTuple):
    """One joined images.txt / cameras.txt row."""
    camera_id: int
    intrinsics: Intrinsics
    image_name: str
    pose: Pose


# ---------------------------------------------------------------------------
# COLMAP text format
# ---------------------------------------------------------------------------

def _data_lines(text: str):
    """Yield (line_number, stripped_line) for every non-comment line, blanks included."""
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#"):
            continue
        yield number, line


def _parse_cameras(cameras_text: str) -> Dict[int, Intrinsics]:
    cameras = {}
    for number, line in _data_lines(cameras_text):
        if not line:
            continue
        elems = line.split()
        if len(elems) < 4:
            raise ColmapFormatError(f"camera row needs at least 4 fields, got {len(elems)}", number)
        model = elems[1]
        if model not in SUPPORTED_MODELS:
            raise ColmapFormatError(f"unsupported camera model {model!r} (supported: PINHOLE, SIMPLE_PINHOLE)",
                                    number)
        expected = 4 + SUPPORTED_MODELS[model]
        if len(elems) != expected:
            raise ColmapFormatError(f"{model} row needs {expected} fields, got {len(elems)}", number)
        try:
            camera_id = int(elems[0])
            width, height = int(elems[2]), int(elems[3])
            params = [float(x) for x in elems[4:]]
        except ValueError as e:
            raise ColmapFormatError(f"bad number in camera row: {e}", number) from e
        if model == "SIMPLE_PINHOLE":
            f, cx, cy = params
            fx = fy = f
        else:
            fx, fy, cx, cy = params
        try:
            cameras[camera_id] = Intrinsics(width, height, fx, fy, cx, cy)
        except CameraError as e:
            raise ColmapFormatError(str(e), number) from e
    return cameras


def load_colmap(cameras_text: str, images_text: str) -> List[CameraRecord]:
    """
    Parse COLMAP cameras.txt and images.txt contents.

    Args:
        cameras_text: Contents of cameras.txt
        images_text: Contents of images.txt

    Returns:
        List of CameraRecord in images.txt order

    Raises:
        ColmapFormatError: unsupported model, malformed row or dangling CAMERA_ID
    """
    cameras = _parse_cameras(cameras_text)
    records = []
    expect_points = False
    for number, line in _data_lines(images_text):
        if expect_points:
            # 2D points line, possibly empty
            expect_points = False
            continue
        if not line:
            continue
        elems = line.split()
        if len(elems) < 10:
            raise ColmapFormatError(f"image row needs 10 fields, got {len(elems)}", number)
        try:
            qvec = np.array([float(x) for x in elems[1:5]])
            tvec = np.array([float(x) for x in elems[5:8]])
            camera_id = int(elems[8])
        except ValueError as e:
            raise ColmapFormatError(f"bad number in image row: {e}", number) from e
        if camera_id not in cameras:
            raise ColmapFormatError(f"image refers to unknown CAMERA_ID {camera_id}", number)
        try:
            pose = Pose(qvec, tvec)
        except CameraError as e:
            raise ColmapFormatError(str(e), number) from e
        records.append(CameraRecord(camera_id, cameras[camera_id], " ".join(elems[9:]), pose))
        expect_points = True
    return records


def read_colmap_dir(path: str) -> List[CameraRecord]:
    """Read `cameras.txt` and `images.txt` from a sparse-model directory."""
    with open(os.path.join(path, "cameras.txt"), "r", encoding="utf-8") as f:
        cameras_text = f.read()
    with open(os.path.join(path, "images.txt"), "r", encoding="utf-8") as f:
        images_text = f.read()
    return load_colmap(cameras_text, images_text)


def format_colmap(records: Sequence[CameraRecord]) -> tuple:
    """Serialize records to (cameras_text, images_text) with exact float repr."""
    cam_lines = [
        "# Camera list with one line of data per camera:",
        "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]",
        f"# Number of cameras: {len({r.camera_id for r in records})}",
    ]
    seen = set()
    for rec in records:
        if rec.camera_id in seen:
            continue
        seen.add(rec.camera_id)
        k = rec.intrinsics
        cam_lines.append(f"{rec.camera_id} PINHOLE "
                         + " ".join([str(k.width), str(k.height)] + [repr(float(v)) for v in (k.fx, k.fy, k.cx, k.cy)]))
    img_lines = [
        "# Image list with two lines of data per image:",
        "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
        "#   POINTS2D[] as (X, Y, POINT3D_ID)",
        f"# Number of images: {len(records)}, mean observations per image: 0",
    ]
    for image_id, rec in enumerate(records, start=1):
        values = [repr(float(v)) for v in (*rec.pose.qvec, *rec.pose.tvec)]
        img_lines.append(" ".join([str(image_id), *values, str(rec.camera_id), rec.image_name]))
        img_lines.append("")
    return "\n".join(cam_lines) + "\n", "\n".join(img_lines) + "\n"


def write_colmap(records: Sequence[CameraRecord], path: str):
    """Write cameras.txt / images.txt into a sparse-model directory."""
    os.makedirs(path, exist_ok=True)
    cameras_text, images_text = format_colmap(records)
    with open(os.path.join(path, "cameras.txt"), "w", encoding="utf-8") as f:
        f.write(cameras_text)
    with open(os.path.join(path, "images.txt"), "w", encoding="utf-8") as f:
        f.write(images_text)


# ---------------------------------------------------------------------------
# Images and masks
# ---------------------------------------------------------------------------

def load_image(path: str) -> np.ndarray:
    """Load a PNG or PPM image as an HxWx3 float array in [0, 1]."""
    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float64)
    return data / 255.0


def save_image(path: str, image: np.ndarray):
    """Save an HxWx3 array in [0, 1] as 8-bit RGB (format from the extension: .png or .ppm)."""
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    Image.fromarray(data).save(path)


def load_mask(path: str) -> np.ndarray:
    """Load an 8-bit grayscale mask, thresholded at 128."""
    with Image.open(path) as img:
        data = np.asarray(img.convert("L"))
    return data >= MASK_THRESHOLD


def save_mask(path: str, mask: np.ndarray):
    """Save a binary mask as 8-bit grayscale PNG (0 / 255)."""
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    Image.fromarray(data).save(path)


def load_manifest(data_dir: str) -> dict:
    """
    Read the dataset manifest (empty dict when absent).

    Raises:
        DatasetError: the file is not a JSON object or its splits are malformed
    """
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        return {}
    with open(path, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(manifest, dict):
        raise DatasetError(f"{path}: expected a JSON object, got {type(manifest).__name__}")
    splits = manifest.get("splits", {})
    if not isinstance(splits, dict) or not all(isinstance(names, list) for names in splits.values()):
        raise DatasetError(f"{path}: 'splits' must map split names to lists of image names")
    return manifest


def load_dataset(data_dir: str, split: str = "all", with_masks: bool = True) -> List[View]:
    """
    Assemble Views from a dataset directory.

    Layout: sparse/cameras.txt, sparse/images.txt, images/<name>, masks/<stem>.png
    and an optional manifest.json holding the train/test split.

    Args:
        data_dir: Dataset root
        split: "train", "test" or "all"
        with_masks: Load masks when present

    Returns:
        List of View in images.txt order
    """
    records = read_colmap_dir(os.path.join(data_dir, "sparse"))
    manifest = load_manifest(data_dir)
    if split != "all":
        names = set(manifest.get("splits", {}).get(split, []))
        if not names and split == "train":
            names = {r.image_name for r in records}
        records = [r for r in records if r.image_name in names]
    views = []
    for rec in records:
        image = load_image(os.path.join(data_dir, "images", rec.image_name))
        mask = None
        mask_path = os.path.join(data_dir, "masks", os.path.splitext(rec.image_name)[0] + ".png")
        if with_masks and os.path.exists(mask_path):
            mask = load_mask(mask_path)
        views.append(View(rec.intrinsics, rec.pose, image, mask, rec.image_name))
    logger.debug("loaded %d views from %s (split=%s)", len(views), data_dir, split)
    return views


# ---------------------------------------------------------------------------
# Projection and rays
# ---------------------------------------------------------------------------

def project(view: View, p: Sequence[float]) -> Optional[np.ndarray]:
    """
    Project a world point to pixel coordinates.

    Returns:
        (u, v) array, or None when the point is behind the camera (z <= 1e-9)
    """
    uv, in_front = project_points(view, np.asarray(p, dtype=np.float64).reshape(1, 3))
    if not in_front[0]:
        return None
    return uv[0]


def project_points(view: View, points: np.ndarray) -> tuple:
    """
    Project an (N, 3) array of world points.

    Returns:
        uv: (N, 2) pixel coordinates (undefined where not in front)
        in_front: (N,) bool, camera-space z > 1e-9
    """
    k = view.intrinsics
    cam = points @ view.pose.rotation.T + view.pose.tvec
    z = cam[:, 2]
    in_front = z > BEHIND_EPS
    safe_z = np.where(in_front, z, 1.0)
    uv = np.empty((points.shape[0], 2))
    uv[:, 0] = k.fx * cam[:, 0] / safe_z + k.cx
    uv[:, 1] = k.fy * cam[:, 1] / safe_z + k.cy
    return uv, in_front


def pixel_rays(view: View, uv: np.ndarray) -> tuple:
    """
    Back-project (N, 2) pixel coordinates to world rays.

    Returns:
        origins: (N, 3) camera centers
        directions: (N, 3) unit directions
    """
    k = view.intrinsics
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    cam = np.stack([(uv[:, 0] - k.cx) / k.fx, (uv[:, 1] - k.cy) / k.fy, np.ones(len(uv))], axis=1)
    dirs = cam @ view.pose.rotation
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(view.pose.camera_center, dirs.shape).copy()
    return origins, dirs


def pixel_ray(view: View, u: float, v: float) -> Ray:
    """
    Camera ray through sub-pixel position (u, v).

    Raises:
        CameraError: pixel outside [0, width) x [0, height)
    """
    k = view.intrinsics
    if not (0 <= u < k.width and 0 <= v < k.height):
        raise CameraError(f"pixel ({u}, {v}) outside {k.width}x{k.height} image")
    origins, dirs = pixel_rays(view, np.array([[u, v]]))
    return Ray(origins[0], dirs[0])


def pixel_centers(intrinsics: Intrinsics) -> np.ndarray:
    """(H*W, 2) pixel-center coordinates in row-major order."""
    jj, ii = np.meshgrid(np.arange(intrinsics.height), np.arange(intrinsics.width), indexing="ij")
    return np.stack([ii.ravel() + 0.5, jj.ravel() + 0.5], axis=1).astype(np.float64)


def view_rays(view: View) -> tuple:
    """Rays through every pixel center, row-major."""
    return pixel_rays(view, pixel_centers(view.intrinsics))
