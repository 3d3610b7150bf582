"""
Radiance Fields

Differentiable color/density fields queried at sample points: a dense
trilinear logit grid (default) and a small positional-encoding MLP. Both keep
their parameters in a flat ParamStore and return gradients as GradSlices that
the trainer merges before each optimizer step.
"""
import logging
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import CheckpointError, FieldError
from .version import CHECKPOINT_MAGIC

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-6


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class FieldQueryResult:
    rgb: np.ndarray
    sigma: float


@dataclass(frozen=True, eq=False)
class GradSlice:
    """Gradient contribution: sparse (index, value) pairs, or dense when index is None."""
    index: Optional[np.ndarray]
    value: np.ndarray


class ParamStore:
    """Flat parameters with gradient accumulator and Adam moments."""

    def __init__(self, params: np.ndarray):
        self.params = np.ascontiguousarray(params, dtype=np.float64).ravel().copy()
        self.grad = np.zeros_like(self.params)
        self.m = np.zeros_like(self.params)
        self.v = np.zeros_like(self.params)
        self.step = 0

    @property
    def size(self) -> int:
        return self.params.size

    def accumulate(self, slices: Sequence[GradSlice]):
        """Sum gradient slices into the accumulator in the given order."""
        sparse = [s for s in slices if s.index is not None and len(s.index)]
        for s in slices:
            if s.index is None:
                self.grad += s.value
        if sparse:
            index = np.concatenate([s.index for s in sparse])
            value = np.concatenate([s.value for s in sparse])
            self.grad += np.bincount(index, weights=value, minlength=self.size)

    def zero_grad(self):
        self.grad[:] = 0.0


def positional_encoding(x, L: int) -> np.ndarray:
    """
    Fourier features (sin(2^k pi x), cos(2^k pi x)) for k < L.

    Ordered per input dimension, then per band, then (sin, cos); the last axis
    of x is the dimension axis.
    """
    if L < 0:
        raise FieldError(f"number of bands must be >= 0, got {L}")
    x = np.asarray(x, dtype=np.float64)
    freqs = (2.0 ** np.arange(L)) * np.pi
    angles = x[..., None] * freqs
    feats = np.stack([np.sin(angles), np.cos(angles)], axis=-1)
    return feats.reshape(x.shape[:-1] + (2 * L * x.shape[-1],))


def _check_directions(dirs: np.ndarray):
    norms = np.linalg.norm(dirs, axis=-1)
    if norms.size and np.max(np.abs(norms - 1.0)) > UNIT_TOL:
        raise FieldError("query directions must be unit vectors")


class RadianceField(ABC):
    """Common query surface over a world-space bounding box."""

    tag: bytes = b""

    def __init__(self, bbox_min: Sequence[float], bbox_max: Sequence[float]):
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64).reshape(3)
        if not np.all(self.bbox_max > self.bbox_min):
            raise FieldError(f"empty field box {self.bbox_min} .. {self.bbox_max}")
        self.store: ParamStore = None

    def inside(self, positions: np.ndarray) -> np.ndarray:
        return np.all((positions >= self.bbox_min) & (positions <= self.bbox_max), axis=-1)

    @abstractmethod
    def forward(self, positions: np.ndarray, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray, object]:
        """(M, 3) positions and unit directions -> rgb (M, 3), sigma (M,), backward cache."""

    @abstractmethod
    def backward(self, cache, d_rgb: np.ndarray, d_sigma: np.ndarray) -> GradSlice:
        """Parameter gradient of sum(d_rgb * rgb) + sum(d_sigma * sigma)."""

    @abstractmethod
    def header(self) -> bytes:
        """Architecture header written after the backend tag."""

    def query_points(self, positions: np.ndarray, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        _check_directions(dirs)
        rgb, sigma, _ = self.forward(positions, dirs)
        return rgb, sigma

    def query(self, position: Sequence[float], direction: Sequence[float]) -> FieldQueryResult:
        rgb, sigma = self.query_points(np.asarray(position)[None], np.asarray(direction)[None])
        return FieldQueryResult(rgb[0], float(sigma[0]))

    def query_with_grad(self, position: Sequence[float], direction: Sequence[float],
                        upstream: Sequence[float]) -> FieldQueryResult:
        """
        Query one point and add the upstream-weighted gradient to the store.

        Args:
            upstream: dLoss/d(r, g, b, sigma)
        """
        positions = np.asarray(position, dtype=np.float64).reshape(1, 3)
        dirs = np.asarray(direction, dtype=np.float64).reshape(1, 3)
        _check_directions(dirs)
        upstream = np.asarray(upstream, dtype=np.float64).reshape(4)
        rgb, sigma, cache = self.forward(positions, dirs)
        self.store.accumulate([self.backward(cache, upstream[None, :3], upstream[None, 3:4].ravel())])
        return FieldQueryResult(rgb[0], float(sigma[0]))


class GridField(RadianceField):
    """
    R^3 lattice of logits spanning the field box, 4 per vertex.

    Channels 0-2 are color logits and channel 3 the density logit; values are
    trilinearly interpolated before sigmoid / softplus.
    """

    tag = b"GRID"

    def __init__(self, resolution: int, bbox_min, bbox_max, params: Optional[np.ndarray] = None):
        super().__init__(bbox_min, bbox_max)
        if resolution < 2:
            raise FieldError(f"grid resolution must be >= 2, got {resolution}")
        self.resolution = int(resolution)
        size = self.resolution ** 3 * 4
        if params is None:
            params = np.zeros(size)
        elif np.size(params) != size:
            raise FieldError(f"grid expects {size} parameters, got {np.size(params)}")
        self.store = ParamStore(params)

    def _cell(self, positions: np.ndarray):
        R = self.resolution
        g = (positions - self.bbox_min) / (self.bbox_max - self.bbox_min) * (R - 1)
        base = np.clip(np.floor(g), 0, R - 2).astype(np.int64)
        frac = np.clip(g - base, 0.0, 1.0)
        corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
        idx = base[:, None, :] + corners[None]
        vertex = (idx[..., 0] * R + idx[..., 1]) * R + idx[..., 2]
        w = np.where(corners[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :]).prod(axis=2)
        w = w * self.inside(positions)[:, None]
        return vertex, w

    def forward(self, positions, dirs):
        vertex, w = self._cell(positions)
        table = self.store.params.reshape(-1, 4)
        logits = np.einsum("mc,mcj->mj", w, table[vertex])
        inside = self.inside(positions)
        rgb = expit(logits[:, :3]) * inside[:, None]
        sigma = softplus(logits[:, 3]) * inside
        return rgb, sigma, (vertex, w, logits, inside)

    def backward(self, cache, d_rgb, d_sigma) -> GradSlice:
        vertex, w, logits, inside = cache
        s = expit(logits[:, :3])
        d_logits = np.empty_like(logits)
        d_logits[:, :3] = d_rgb * s * (1.0 - s)
        d_logits[:, 3] = d_sigma * expit(logits[:, 3])
        rows = np.flatnonzero(inside)
        index = vertex[rows, :, None] * 4 + np.arange(4)
        value = w[rows, :, None] * d_logits[rows, None, :]
        return GradSlice(index.ravel(), value.ravel())

    def header(self) -> bytes:
        return struct.pack("<I", self.resolution)


class MLPField(RadianceField):
    """
    Positional-encoding MLP.

    A ReLU trunk of `depth` layers of `width` units maps encoded positions
    (normalized to [-1, 1] over the field box) to features; the density head is
    a softplus of one linear unit, the color head runs features plus encoded
    direction through a width/2 ReLU layer and a sigmoid.
    """

    tag = b"MLP_"

    def __init__(self, bbox_min, bbox_max, depth: int = 4, width: int = 64, pos_bands: int = 6,
                 dir_bands: int = 4, seed: int = 0, params: Optional[np.ndarray] = None):
        super().__init__(bbox_min, bbox_max)
        if depth < 1 or width < 2 or pos_bands < 1 or dir_bands < 0:
            raise FieldError(f"invalid MLP shape depth={depth} width={width} bands={pos_bands}/{dir_bands}")
        self.depth, self.width = int(depth), int(width)
        self.pos_bands, self.dir_bands = int(pos_bands), int(dir_bands)
        half = self.width // 2
        shapes = [(6 * self.pos_bands, self.width)] + [(self.width, self.width)] * (self.depth - 1)
        shapes += [(self.width, 1), (self.width + 6 * self.dir_bands, half), (half, 3)]
        self._layout = []
        offset = 0
        for fan_in, fan_out in shapes:
            self._layout.append((offset, fan_in, fan_out))
            offset += fan_in * fan_out + fan_out
        if params is None:
            params = self._init_params(offset, seed)
        elif np.size(params) != offset:
            raise FieldError(f"MLP expects {offset} parameters, got {np.size(params)}")
        self.store = ParamStore(params)

    def _init_params(self, size: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        params = np.zeros(size)
        for offset, fan_in, fan_out in self._layout:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[offset:offset + fan_in * fan_out] = rng.uniform(-limit, limit, fan_in * fan_out)
        return params

    def _layer(self, params: np.ndarray, i: int):
        offset, fan_in, fan_out = self._layout[i]
        weight = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        bias = params[offset + fan_in * fan_out:offset + fan_in * fan_out + fan_out]
        return weight, bias

    def forward(self, positions, dirs):
        p = self.store.params
        inside = self.inside(positions)
        x = 2.0 * (positions - self.bbox_min) / (self.bbox_max - self.bbox_min) - 1.0
        h = positional_encoding(x, self.pos_bands)
        trunk = []
        for i in range(self.depth):
            weight, bias = self._layer(p, i)
            pre = h @ weight + bias
            trunk.append((h, pre))
            h = np.maximum(pre, 0.0)
        weight, bias = self._layer(p, self.depth)
        sigma_logit = (h @ weight + bias)[:, 0]
        color_in = np.concatenate([h, positional_encoding(dirs, self.dir_bands)], axis=1)
        weight, bias = self._layer(p, self.depth + 1)
        color_pre = color_in @ weight + bias
        color_h = np.maximum(color_pre, 0.0)
        weight, bias = self._layer(p, self.depth + 2)
        rgb_logit = color_h @ weight + bias
        rgb = expit(rgb_logit) * inside[:, None]
        sigma = softplus(sigma_logit) * inside
        cache = (inside, trunk, h, sigma_logit, color_in, color_pre, color_h, rgb_logit)
        return rgb, sigma, cache

    def backward(self, cache, d_rgb, d_sigma) -> GradSlice:
        inside, trunk, h, sigma_logit, color_in, color_pre, color_h, rgb_logit = cache
        p = self.store.params
        grad = np.zeros_like(p)

        def put(i: int, d_weight: np.ndarray, d_bias: np.ndarray):
            offset, fan_in, fan_out = self._layout[i]
            grad[offset:offset + fan_in * fan_out] += d_weight.ravel()
            grad[offset + fan_in * fan_out:offset + fan_in * fan_out + fan_out] += d_bias

        s = expit(rgb_logit)
        d_rgb_logit = d_rgb * s * (1.0 - s) * inside[:, None]
        d_sigma_logit = (d_sigma * expit(sigma_logit) * inside)[:, None]

        weight, _ = self._layer(p, self.depth + 2)
        put(self.depth + 2, color_h.T @ d_rgb_logit, d_rgb_logit.sum(axis=0))
        d_color_pre = (d_rgb_logit @ weight.T) * (color_pre > 0.0)
        weight, _ = self._layer(p, self.depth + 1)
        put(self.depth + 1, color_in.T @ d_color_pre, d_color_pre.sum(axis=0))
        d_h = (d_color_pre @ weight.T)[:, :self.width]

        weight, _ = self._layer(p, self.depth)
        put(self.depth, h.T @ d_sigma_logit, d_sigma_logit.sum(axis=0))
        d_h = d_h + d_sigma_logit @ weight.T

        for i in reversed(range(self.depth)):
            layer_in, pre = trunk[i]
            d_pre = d_h * (pre > 0.0)
            put(i, layer_in.T @ d_pre, d_pre.sum(axis=0))
            if i:
                weight, _ = self._layer(p, i)
                d_h = d_pre @ weight.T
        return GradSlice(None, grad)

    def header(self) -> bytes:
        return struct.pack("<IIII", self.depth, self.width, self.pos_bands, self.dir_bands)


def make_field(backend: str, bbox_min, bbox_max, grid_resolution: int = 128, mlp_depth: int = 4,
               mlp_width: int = 64, mlp_pos_bands: int = 6, mlp_dir_bands: int = 4, seed: int = 0) -> RadianceField:
    """Fresh field for backend "grid" or "mlp"."""
    if backend == "grid":
        return GridField(grid_resolution, bbox_min, bbox_max)
    if backend == "mlp":
        return MLPField(bbox_min, bbox_max, mlp_depth, mlp_width, mlp_pos_bands, mlp_dir_bands, seed)
    raise FieldError(f"unknown field backend {backend!r}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, field: RadianceField):
    """Magic, backend tag, architecture header, field box, count, float32 LE parameters."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(field.tag)
        f.write(field.header())
        f.write(struct.pack("<6d", *field.bbox_min, *field.bbox_max))
        f.write(struct.pack("<Q", field.store.size))
        f.write(field.store.params.astype("<f4").tobytes())
    logger.debug("wrote %s checkpoint %s (%d parameters)", field.tag.decode(), path, field.store.size)


def _unpack(f, fmt: str, path: str) -> tuple:
    size = struct.calcsize(fmt)
    data = f.read(size)
    if len(data) != size:
        raise CheckpointError(f"{path}: truncated header")
    return struct.unpack(fmt, data)


def load_checkpoint(path: str) -> RadianceField:
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a field checkpoint")
        tag = f.read(4)
        if tag == GridField.tag:
            arch = _unpack(f, "<I", path)
        elif tag == MLPField.tag:
            arch = _unpack(f, "<IIII", path)
        else:
            raise CheckpointError(f"{path}: unknown backend tag {tag!r}")
        bbox = _unpack(f, "<6d", path)
        (count,) = _unpack(f, "<Q", path)
        payload = f.read()
    if len(payload) != 4 * count:
        raise CheckpointError(f"{path}: expected {count} parameters, found {len(payload) // 4}")
    params = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    try:
        if tag == GridField.tag:
            return GridField(arch[0], bbox[:3], bbox[3:], params)
        depth, width, pos_bands, dir_bands = arch
        return MLPField(bbox[:3], bbox[3:], depth, width, pos_bands, dir_bands, params=params)
    except FieldError as e:
        raise CheckpointError(f"{path}: {e}") from e


def field_summary(field: RadianceField) -> List[str]:
    """Human-readable description lines for logs."""
    lines = [f"backend={field.tag.decode().rstrip('_').lower()} parameters={field.store.size}"]
    if isinstance(field, GridField):
        lines.append(f"resolution={field.resolution}")
    elif isinstance(field, MLPField):
        lines.append(f"depth={field.depth} width={field.width} bands={field.pos_bands}/{field.dir_bands}")
    return lines
