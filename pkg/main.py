"""
Glasshull - Refraction-aware radiance fields for transparent objects

Entry point for the command-line application.
"""
import sys
import os

# Add src to path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.cli.app import run


if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
