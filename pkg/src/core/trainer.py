"""
Training and Rendering

Fits a radiance field to the training views along straight or refracted ray
paths, renders images, evaluates PSNR on held-out views and reports the
samples of single pixels.
"""
import csv
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .accel import AccelMesh
from .camera_io import View, pixel_ray, view_rays
from .errors import RenderError
from .logs import log_event
from .radiance_field import GridField, RadianceField
from .refract_trace import PathBatch, build_paths, sample_paths, straight_paths
from .renderer import adam_step, composite, composite_backward, loss_mse, psnr
from .workers import chunk_ranges, map_ranges

logger = logging.getLogger(__name__)

# rays per work item; fixed so results do not depend on the thread count
RAY_CHUNK = 256
RENDER_CHUNK = 2048


class Mode(str, Enum):
    STRAIGHT = "straight"
    REFRACT = "refract"


@dataclass
class TrainConfig:
    batch_rays: int = 1024
    samples_per_ray: int = 128
    iterations: int = 20000
    lr: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: Mode = Mode.REFRACT
    seed: int = 0
    t_near: float = 2.0
    t_far: float = 8.0
    jitter: bool = False
    log_every: int = 100
    threads: int = 1
    progress: bool = True

    def __post_init__(self):
        try:
            self.mode = Mode(self.mode)
        except ValueError as e:
            raise RenderError(f"mode must be straight or refract, got {self.mode!r}") from e
        if self.batch_rays < 1 or self.samples_per_ray < 2 or self.log_every < 1:
            raise RenderError("batch_rays, samples_per_ray and log_every must be positive (samples >= 2)")
        if self.iterations < 0:
            raise RenderError(f"iterations must be >= 0, got {self.iterations}")
        if not 0.0 <= self.t_near < self.t_far:
            raise RenderError(f"invalid sampling span [{self.t_near}, {self.t_far}]")

    def learning_rate(self, field: RadianceField) -> float:
        """Configured rate, else 5e-3 for grids and 5e-4 for MLPs."""
        if self.lr is not None:
            return self.lr
        return 5e-3 if isinstance(field, GridField) else 5e-4


@dataclass
class TrainingLog:
    rows: List[Tuple[int, float, float]] = field(default_factory=list)

    @property
    def final_loss(self) -> Optional[float]:
        return self.rows[-1][1] if self.rows else None

    def loss_at(self, iteration: int) -> Optional[float]:
        for it, loss, _ in self.rows:
            if it == iteration:
                return loss
        return None

    def write_csv(self, path: str):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "loss", "elapsed_seconds"])
            for it, loss, elapsed in self.rows:
                writer.writerow([it, repr(loss), f"{elapsed:.3f}"])


def _check_mode(mode: Mode, accel: Optional[AccelMesh]) -> Mode:
    try:
        mode = Mode(mode)
    except ValueError as e:
        raise RenderError(f"mode must be straight or refract, got {mode!r}") from e
    if mode is Mode.REFRACT and accel is None:
        raise RenderError("refract mode needs a hull mesh")
    return mode


def trace_rays(origins: np.ndarray, dirs: np.ndarray, mode: Mode, accel: Optional[AccelMesh], ior: float,
               t_far: float, threads: int = 1) -> PathBatch:
    """Paths for a ray batch in the given mode."""
    if _check_mode(mode, accel) is Mode.STRAIGHT:
        return straight_paths(origins, dirs, t_far)
    return build_paths(origins, dirs, accel, ior, t_far, threads=threads)


def _render_paths(field: RadianceField, paths: PathBatch, t_near: float, t_far: float, samples: int,
                  rng: Optional[np.random.Generator] = None):
    batch = sample_paths(paths, t_near, t_far, samples, rng)
    n, s = batch.deltas.shape
    rgb, sigma, cache = field.forward(batch.positions.reshape(-1, 3), batch.directions.reshape(-1, 3))
    rgb = rgb.reshape(n, s, 3)
    sigma = sigma.reshape(n, s)
    return batch, rgb, sigma, cache, composite(rgb, sigma, batch.deltas)


def train(views: Sequence[View], field: RadianceField, accel: Optional[AccelMesh] = None, ior: float = 1.5,
          config: TrainConfig = None) -> TrainingLog:
    """
    Optimize `field` against the pixels of `views`.

    Every iteration draws `batch_rays` random training pixels (seeded), samples
    their precomputed paths, composites, backpropagates the MSE and takes one
    Adam step. Gradients of fixed-size ray chunks are merged in chunk order so
    a given seed reproduces the same run for any thread count.

    Raises:
        RenderError: no views, or refract mode without a mesh
    """
    config = config or TrainConfig()
    if not views:
        raise RenderError("training needs at least one view")
    mode = _check_mode(config.mode, accel)
    lr = config.learning_rate(field)

    origins, dirs, colors = [], [], []
    for view in views:
        o, d = view_rays(view)
        origins.append(o)
        dirs.append(d)
        colors.append(view.image.reshape(-1, 3))
    colors = np.concatenate(colors)
    paths = trace_rays(np.concatenate(origins), np.concatenate(dirs), mode, accel, ior, config.t_far,
                       config.threads)
    log_event(logger, "train.start", mode=mode.value, rays=len(paths), views=len(views), lr=lr,
              iterations=config.iterations, batch=config.batch_rays, samples=config.samples_per_ray)

    log = TrainingLog()
    rng = np.random.default_rng(config.seed)
    start = time.perf_counter()
    V = config.batch_rays
    for it in tqdm(range(1, config.iterations + 1), desc=f"train[{mode.value}]", unit="it",
                   disable=not config.progress):
        pick = rng.integers(0, len(paths), V)

        def step(lo: int, hi: int):
            rows = pick[lo:hi]
            jitter = None
            if config.jitter:
                jitter = np.random.default_rng([config.seed, it, lo])
            batch, rgb, sigma, cache, result = _render_paths(field, paths.take(rows), config.t_near,
                                                             config.t_far, config.samples_per_ray, jitter)
            chunk_loss, upstream = loss_mse(result.rgb, colors[rows])
            share = (hi - lo) / V
            d_rgb, d_sigma = composite_backward(rgb, sigma, batch.deltas, upstream * share, result)
            return chunk_loss * share, field.backward(cache, d_rgb.reshape(-1, 3), d_sigma.ravel())

        parts = map_ranges(step, chunk_ranges(V, RAY_CHUNK), config.threads)
        loss = float(sum(p[0] for p in parts))
        field.store.accumulate([p[1] for p in parts])
        adam_step(field.store, lr, config.beta1, config.beta2, config.eps)

        if not np.isfinite(loss):
            raise RenderError(f"training diverged at iteration {it}")
        if it % config.log_every == 0 or it == config.iterations:
            elapsed = time.perf_counter() - start
            log.rows.append((it, loss, elapsed))
            log_event(logger, "train.progress", iteration=it, loss=loss, elapsed=elapsed)
    log_event(logger, "train.done", iterations=config.iterations, final_loss=log.final_loss)
    return log


def render_image(field: RadianceField, view: View, mode: Mode = Mode.STRAIGHT, accel: Optional[AccelMesh] = None,
                 ior: float = 1.5, samples: int = 128, t_near: float = 2.0, t_far: float = 8.0,
                 threads: int = 1) -> np.ndarray:
    """(H, W, 3) image with one composite per pixel center."""
    mode = _check_mode(mode, accel)
    origins, dirs = view_rays(view)
    paths = trace_rays(origins, dirs, mode, accel, ior, t_far, threads)

    def render(lo: int, hi: int) -> np.ndarray:
        return _render_paths(field, paths.take(np.arange(lo, hi)), t_near, t_far, samples)[4].rgb

    parts = map_ranges(render, chunk_ranges(len(paths), RENDER_CHUNK), threads)
    return np.concatenate(parts).reshape(view.height, view.width, 3)


@dataclass
class EvalReport:
    rows: List[Tuple[str, float]]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([p for _, p in self.rows])) if self.rows else float("nan")

    def write_csv(self, path: str):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["view", "psnr_db"])
            for name, value in self.rows:
                writer.writerow([name, f"{value:.6f}"])
            writer.writerow(["mean", f"{self.mean_psnr:.6f}"])


def evaluate(field: RadianceField, views: Sequence[View], mode: Mode = Mode.STRAIGHT,
             accel: Optional[AccelMesh] = None, ior: float = 1.5, samples: int = 128, t_near: float = 2.0,
             t_far: float = 8.0, threads: int = 1, progress: bool = True) -> EvalReport:
    """PSNR of each rendered view against its image."""
    if not views:
        raise RenderError("evaluation needs at least one view")
    rows = []
    for view in tqdm(views, desc="eval", unit="view", disable=not progress):
        image = render_image(field, view, mode, accel, ior, samples, t_near, t_far, threads)
        rows.append((view.name, psnr(image, view.image)))
    report = EvalReport(rows)
    log_event(logger, "eval.done", views=len(rows), mean_psnr=report.mean_psnr)
    return report


@dataclass(frozen=True, eq=False)
class TraceRow:
    sample: int
    position: np.ndarray
    direction: np.ndarray
    sigma: float
    rgb: np.ndarray
    transmittance: float
    alpha: float
    region: str


def trace_pixel(field: RadianceField, view: View, pixel: Tuple[int, int], mode: Mode = Mode.STRAIGHT,
                accel: Optional[AccelMesh] = None, ior: float = 1.5, samples: int = 128, t_near: float = 2.0,
                t_far: float = 8.0) -> List[TraceRow]:
    """
    Per-sample report of one pixel's ray.

    A sample's region is `hull` when it lies inside the object along the
    mode's path; straight rays are tested against the mesh with ior 1.

    Raises:
        CameraError: pixel outside the image
    """
    mode = _check_mode(mode, accel)
    u, v = pixel
    ray = pixel_ray(view, u + 0.5, v + 0.5)
    paths = trace_rays(ray.origin[None], ray.direction[None], mode, accel, ior, t_far)
    batch, rgb, sigma, _, result = _render_paths(field, paths, t_near, t_far, samples)

    region = np.zeros(samples, dtype=bool)
    if accel is not None:
        regions = paths if mode is Mode.REFRACT else build_paths(ray.origin[None], ray.direction[None], accel,
                                                                 1.0, t_far)
        labels = sample_paths(regions, t_near, t_far, samples)
        region = regions.in_object(labels, accel)[0]
    return [TraceRow(i, batch.positions[0, i], batch.directions[0, i], float(sigma[0, i]), rgb[0, i],
                     float(result.transmittance[0, i]), float(result.alpha[0, i]),
                     "hull" if region[i] else "outside") for i in range(samples)]


def write_trace_csv(path: str, rows: Sequence[TraceRow]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sample", "x", "y", "z", "dx", "dy", "dz", "sigma", "r", "g", "b",
                         "transmittance", "alpha", "region"])
        for row in rows:
            writer.writerow([row.sample, *(f"{x:.6f}" for x in row.position), *(f"{x:.6f}" for x in row.direction),
                             f"{row.sigma:.6g}", *(f"{x:.6f}" for x in row.rgb), f"{row.transmittance:.6g}",
                             f"{row.alpha:.6g}", row.region])


def mean_hull_sigma(rows: Sequence[TraceRow]) -> float:
    """Mean density of the samples inside the hull (nan when none)."""
    values = [r.sigma for r in rows if r.region == "hull"]
    return float(np.mean(values)) if values else float("nan")
