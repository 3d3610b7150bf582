"""
Exception hierarchy

Every failure raised by the pipeline derives from RefractionNeRFError so the
command-line front end can map it onto a single exit code.
"""


class RefractionNeRFError(Exception):
    """Root of all pipeline errors."""


class ConfigError(RefractionNeRFError, ValueError):
    """Unknown key, bad value or malformed line in a run configuration."""


class ColmapFormatError(RefractionNeRFError, ValueError):
    """Malformed or unsupported COLMAP text input."""

    def __init__(self, message: str, line_number: int = 0):
        if line_number:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class CameraError(RefractionNeRFError, ValueError):
    """Invalid camera parameters, pose or pixel."""


class HullError(RefractionNeRFError, ValueError):
    """Visual hull input cannot be carved."""


class MeshError(RefractionNeRFError, ValueError):
    """Invalid mesh or mesh file."""


class RefractionError(RefractionNeRFError, ValueError):
    """Invalid interface geometry for Snell refraction."""


class FieldError(RefractionNeRFError, ValueError):
    """Invalid radiance field query or parameters."""


class RenderError(RefractionNeRFError, ValueError):
    """Invalid compositing, loss or training input."""


class SceneError(RefractionNeRFError, ValueError):
    """Invalid synthetic scene or camera rig."""


class CheckpointError(RefractionNeRFError, ValueError):
    """Unreadable or incompatible checkpoint file."""


class DatasetError(RefractionNeRFError, ValueError):
    """Unreadable or inconsistent dataset directory (manifest, split, image files)."""
