"""
Glasshull - Refraction-aware radiance fields for transparent objects
"""
__version__ = "0.1.0"
APP_NAME = "Glasshull"
CHECKPOINT_MAGIC = b"RFLD0001"
