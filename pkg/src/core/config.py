"""
Configuration Manager

Run settings from a plain-text `key = value` file, dataset manifest hints and
command-line overrides.
"""
import logging
import os
from typing import Any, Dict, Iterable, Optional, Tuple

from .errors import ConfigError, DatasetError
from .radiance_field import make_field
from .synth_scene import RigSpec, make_scene
from .trainer import TrainConfig
from .visual_hull import GridSpec

logger = logging.getLogger(__name__)

# None marks "derive automatically"
DEFAULT_CONFIG = {
    "seed": 0,
    "threads": 1,
    "progress": True,
    # scene
    "solid": "cube",
    "ior": None,
    "solid_size": 0.5,
    "checker_cell": 0.25,
    "background_z": -1.2,
    # rig
    "n_views": 44,
    "width": 96,
    "height": 72,
    "fov_deg": 40.0,
    "camera_distance": 4.0,
    "azimuth_span_deg": 30.0,
    "elevations_deg": (-12.0, 0.0, 12.0),
    "rig_layout": "arc",
    "polar_views": 0,
    # visual hull
    "hull_K": 64,
    "mask_views": 8,
    "mask_margin": 0,
    "smooth_radius": 1,
    "isolevel": 0.5,
    "smooth_lambda": 0.5,
    "smooth_iters": 10,
    "hull_bbox_min": None,
    "hull_bbox_max": None,
    # field and training
    "backend": "grid",
    "grid_resolution": 128,
    "mlp_depth": 4,
    "mlp_width": 64,
    "mlp_pos_bands": 6,
    "mlp_dir_bands": 4,
    "mode": "refract",
    "iterations": 20000,
    "batch_rays": 1024,
    "samples": 128,
    "lr": None,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "jitter": False,
    "t_near": None,
    "t_far": None,
    "log_every": 100,
    "field_bbox_min": None,
    "field_bbox_max": None,
}

# value kind of every key
_KINDS = {
    "seed": "int", "threads": "int", "progress": "bool",
    "solid": "str", "ior": "float?", "solid_size": "float", "checker_cell": "float", "background_z": "float",
    "n_views": "int", "width": "int", "height": "int", "fov_deg": "float", "camera_distance": "float",
    "azimuth_span_deg": "float", "elevations_deg": "floats", "rig_layout": "str", "polar_views": "int",
    "hull_K": "int", "mask_views": "int", "mask_margin": "int", "smooth_radius": "int", "isolevel": "float",
    "smooth_lambda": "float", "smooth_iters": "int", "hull_bbox_min": "vec3?", "hull_bbox_max": "vec3?",
    "backend": "str", "grid_resolution": "int", "mlp_depth": "int", "mlp_width": "int",
    "mlp_pos_bands": "int", "mlp_dir_bands": "int", "mode": "str", "iterations": "int", "batch_rays": "int",
    "samples": "int", "lr": "float?", "beta1": "float", "beta2": "float", "adam_eps": "float",
    "jitter": "bool", "t_near": "float?", "t_far": "float?", "log_every": "int",
    "field_bbox_min": "vec3?", "field_bbox_max": "vec3?",
}

_CHOICES = {
    "solid": ("cube", "sphere", "bottle", "cup"),
    "rig_layout": ("arc", "ring"),
    "backend": ("grid", "mlp"),
    "mode": ("straight", "refract"),
}

# keys a dataset manifest may supply
MANIFEST_KEYS = ("field_bbox_min", "field_bbox_max", "t_near", "t_far")

DEFAULT_T_NEAR = 2.0
DEFAULT_T_FAR = 8.0

_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def coerce(key: str, value: Any) -> Any:
    """
    Convert a raw value (usually text) to the type of `key`.

    Raises:
        ConfigError: unknown key or a value that does not parse
    """
    if key not in _KINDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _KINDS[key]
    optional = kind.endswith("?")
    kind = kind.rstrip("?")
    if isinstance(value, str):
        value = value.strip()
        if optional and value.lower() in ("", "none", "auto"):
            return None
    elif value is None:
        if optional:
            return None
        raise ConfigError(f"{key} needs a value")
    try:
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            result = int(value)
        elif kind == "float":
            result = float(value)
        elif kind == "bool":
            if isinstance(value, bool):
                result = value
            elif str(value).lower() in _TRUE:
                result = True
            elif str(value).lower() in _FALSE:
                result = False
            else:
                raise ValueError(value)
        elif kind in ("floats", "vec3"):
            parts = value.split(",") if isinstance(value, str) else list(value)
            result = tuple(float(p) for p in parts if str(p).strip() != "")
            if kind == "vec3" and len(result) != 3:
                raise ValueError(value)
        else:
            result = str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value {value!r} for {key} ({kind})") from e
    if key in _CHOICES and result not in _CHOICES[key]:
        raise ConfigError(f"{key} must be one of {', '.join(_CHOICES[key])}, got {result!r}")
    return result


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return str(value)


class RunConfig:
    """Merged run settings: defaults < file < manifest hints < explicit overrides."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._config = DEFAULT_CONFIG.copy()
        self._explicit = set()
        if path:
            self._load()

    def _load(self):
        """Load `key = value` lines; '#' starts a comment."""
        with open(self.path, "r", encoding="utf-8") as f:
            lines = f.readlines()
        for number, raw in enumerate(lines, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{self.path}:{number}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                self.set(key, value)
            except ConfigError as e:
                raise ConfigError(f"{self.path}:{number}: {e}") from e
        logger.debug("loaded %d config keys from %s", len(self._explicit), self.path)

    def save(self, path: Optional[str] = None):
        """Write every key in file format."""
        path = path or self.path
        if not path:
            raise ConfigError("no config path to save to")
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for key in DEFAULT_CONFIG:
                f.write(f"{key} = {_format(self._config[key])}\n")

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get a configuration value.

        Args:
            key: Configuration key
            default: Returned when the value is unset (None)

        Returns:
            Configuration value
        """
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"unknown config key {key!r}")
        value = self._config[key]
        return default if value is None else value

    def set(self, key: str, value: Any):
        """Set and validate one value; it then outranks manifest hints."""
        self._config[key] = coerce(key, value)
        self._explicit.add(key)

    def is_explicit(self, key: str) -> bool:
        return key in self._explicit

    def apply_overrides(self, pairs: Iterable[str]):
        """Apply `key=value` strings."""
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override must look like key=value, got {pair!r}")
            key, value = pair.split("=", 1)
            self.set(key.strip(), value)

    def apply_hints(self, manifest: Dict):
        """
        Take field box, t span and ior from a dataset manifest unless set explicitly.

        Raises:
            DatasetError: a hint in the manifest has the wrong type
        """
        try:
            for key in MANIFEST_KEYS:
                if key in manifest and manifest[key] is not None and key not in self._explicit:
                    self._config[key] = coerce(key, manifest[key])
            scene = manifest.get("scene") or {}
            scene_ior = scene.get("ior") if isinstance(scene, dict) else None
            if scene_ior is not None and "ior" not in self._explicit:
                self._config["ior"] = coerce("ior", scene_ior)
        except ConfigError as e:
            raise DatasetError(f"bad manifest hint: {e}") from e

    def reset_to_defaults(self):
        """Reset all settings to defaults."""
        self._config = DEFAULT_CONFIG.copy()
        self._explicit.clear()

    @property
    def all(self) -> dict:
        """Get all configuration as dictionary."""
        return self._config.copy()

    # typed views

    def t_span(self) -> Tuple[float, float]:
        return self.get("t_near", DEFAULT_T_NEAR), self.get("t_far", DEFAULT_T_FAR)

    def hull_bbox(self) -> Optional[Tuple[Tuple[float, ...], Tuple[float, ...]]]:
        lo, hi = self.get("hull_bbox_min"), self.get("hull_bbox_max")
        if (lo is None) != (hi is None):
            raise ConfigError("hull_bbox_min and hull_bbox_max must be set together")
        return None if lo is None else (lo, hi)

    def field_bbox(self) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
        lo, hi = self.get("field_bbox_min"), self.get("field_bbox_max")
        if lo is None or hi is None:
            raise ConfigError("field_bbox_min/max are not set and the dataset manifest has none")
        return lo, hi

    def grid_spec(self, bbox_min, bbox_max):
        return GridSpec(self.get("hull_K"), bbox_min, bbox_max)

    def train_config(self):
        t_near, t_far = self.t_span()
        return TrainConfig(
            batch_rays=self.get("batch_rays"),
            samples_per_ray=self.get("samples"),
            iterations=self.get("iterations"),
            lr=self.get("lr"),
            beta1=self.get("beta1"),
            beta2=self.get("beta2"),
            eps=self.get("adam_eps"),
            mode=self.get("mode"),
            seed=self.get("seed"),
            t_near=t_near,
            t_far=t_far,
            jitter=self.get("jitter"),
            log_every=self.get("log_every"),
            threads=self.get("threads"),
            progress=self.get("progress"),
        )

    def scene_spec(self):
        return make_scene(self.get("solid"), self.get("ior"), self.get("solid_size"), self.get("checker_cell"),
                          self.get("background_z"))

    def rig_spec(self):
        return RigSpec(
            n_views=self.get("n_views"),
            width=self.get("width"),
            height=self.get("height"),
            fov_deg=self.get("fov_deg"),
            distance=self.get("camera_distance"),
            azimuth_span_deg=self.get("azimuth_span_deg"),
            elevations_deg=tuple(self.get("elevations_deg")),
            layout=self.get("rig_layout"),
            polar_views=self.get("polar_views"),
        )

    def build_field(self):
        lo, hi = self.field_bbox()
        return make_field(self.get("backend"), lo, hi, self.get("grid_resolution"), self.get("mlp_depth"),
                          self.get("mlp_width"), self.get("mlp_pos_bands"), self.get("mlp_dir_bands"),
                          self.get("seed"))
