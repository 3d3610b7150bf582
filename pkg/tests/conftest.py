"""
Shared pytest configuration and fixtures.
"""
import numpy as np
import pytest

from src.core.camera_io import Intrinsics, View
from src.core.synth_scene import RigSpec, blank_views, generate_dataset, look_at, make_scene, render_mask


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end acceptance runs (enable with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def front_view():
    """64x48 camera at (0, 0, 4) looking at the origin."""
    intr = Intrinsics(64, 48, 50.0, 50.0, 32.0, 24.0)
    return View(intr, look_at([0.0, 0.0, 4.0], [0.0, 0.0, 0.0]), np.zeros((48, 64, 3)))


def _sphere_ring_views(size: int):
    scene = make_scene("sphere", size=0.5, background_z=-3.0)
    rig = RigSpec(n_views=14, width=size, height=size, fov_deg=30.0, distance=4.0, elevations_deg=(0.0,),
                  layout="ring", polar_views=2)
    views = []
    for view in blank_views(rig):
        views.append(View(view.intrinsics, view.pose, view.image, render_mask(scene, view), view.name))
    return views


@pytest.fixture
def sphere_ring_views():
    """12 ring views plus 2 polar views of a radius-0.5 sphere, masks only (128x128)."""
    return _sphere_ring_views(128)


@pytest.fixture(scope="session")
def fine_sphere_ring_views():
    """The same rig at 384x384; the sphere spans about 180 pixels."""
    return _sphere_ring_views(384)


@pytest.fixture(scope="session")
def cube_dataset(tmp_path_factory):
    """Small rendered cube dataset on disk: (directory, scene, rig, views)."""
    out = tmp_path_factory.mktemp("cube")
    scene = make_scene("cube", ior=1.5)
    rig = RigSpec(n_views=10, width=32, height=32, fov_deg=40.0, distance=4.0, elevations_deg=(-12.0, 12.0))
    views = generate_dataset(scene, rig, str(out), progress=False)
    return str(out), scene, rig, views
