"""
Tests for Snell refraction, two-event path construction and path sampling.
"""
import csv

import numpy as np
import pytest

from src.core.accel import build_accel
from src.core.camera_io import Ray
from src.core.errors import RefractionError
from src.core.mesh import TriMesh, box_mesh
from src.core.refract_trace import (EventKind, PathClass, RayPath, Segment, build_path, build_paths, refract_dir,
                                    refract_dirs, sample_path, sample_paths, straight_paths, write_paths_csv)
from src.core.synth_scene import make_scene, oracle_paths

S = np.sqrt(0.5)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _slab_accel(thickness: float = 0.4):
    return build_accel(box_mesh(half_extent=[5.0, 5.0, 0.5 * thickness]))


def test_normal_incidence_passes_straight():
    """Normal incidence keeps the direction."""
    event = refract_dir([0.0, 0.0, -1.0], [0.0, 0.0, 1.0], 1.0, 1.5)
    assert event.kind == EventKind.REFRACT
    assert event.cos_theta1 == pytest.approx(1.0)
    assert event.cos_theta2 == pytest.approx(1.0)
    np.testing.assert_allclose(event.out_dir, [0.0, 0.0, -1.0], atol=1e-15)


def test_oblique_refraction_into_glass():
    """45 degrees from air into glass bends toward the normal."""
    event = refract_dir([S, 0.0, -S], [0.0, 0.0, 1.0], 1.0, 1.5)
    assert event.kind == EventKind.REFRACT
    assert event.cos_theta2 == pytest.approx(0.8819171, abs=1e-6)
    np.testing.assert_allclose(event.out_dir, [0.4714045, 0.0, -0.8819171], atol=1e-6)


def test_total_internal_reflection():
    """60 degrees inside glass exceeds the critical angle and mirrors."""
    event = refract_dir([np.sqrt(0.75), 0.0, 0.5], [0.0, 0.0, -1.0], 1.5, 1.0)
    assert event.kind == EventKind.TIR
    np.testing.assert_allclose(event.out_dir, [np.sqrt(0.75), 0.0, -0.5], atol=1e-12)


def test_refract_dir_validation():
    """Non-unit inputs, back-facing normals and indices below 1 are rejected."""
    with pytest.raises(RefractionError):
        refract_dir([0.0, 0.0, -2.0], [0.0, 0.0, 1.0], 1.0, 1.5)
    with pytest.raises(RefractionError):
        refract_dir([0.0, 0.0, 1.0], [0.0, 0.0, 1.0], 1.0, 1.5)
    with pytest.raises(RefractionError):
        refract_dir([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 1.0, 1.5)
    with pytest.raises(RefractionError):
        refract_dir([0.0, 0.0, -1.0], [0.0, 0.0, 1.0], 0.9, 1.5)


def test_snell_matches_scalar_law():
    """Random interfaces obey sin t2 = (n1/n2) sin t1, stay coplanar and unit; TIR past the critical angle."""
    rng = np.random.default_rng(0)
    n = _unit(rng.normal(size=(10000, 3)))
    l = _unit(rng.normal(size=(10000, 3)))
    l = np.where((np.einsum("ij,ij->i", n, l) > 0)[:, None], -l, l)
    n1 = rng.uniform(1.0, 2.5, 10000)
    n2 = rng.uniform(1.0, 2.5, 10000)
    out, tir, cos1, cos2 = refract_dirs(l, n, n1 / n2)

    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)
    sin1 = np.linalg.norm(np.cross(l, n), axis=1)
    critical = np.where(n2 < n1, n2 / n1, np.inf)
    clear = np.abs(sin1 - critical) > 1e-9
    np.testing.assert_array_equal(tir[clear], (sin1 > critical)[clear])

    ok = ~tir
    sin2 = np.linalg.norm(np.cross(out[ok], n[ok]), axis=1)
    np.testing.assert_allclose(sin2, (n1 / n2 * sin1)[ok], atol=1e-9)
    assert (np.einsum("ij,ij->i", out[ok], n[ok]) < 0).all()
    plane = _unit(np.cross(l, n))
    assert np.abs(np.einsum("ij,ij->i", out, plane)).max() < 1e-9
    np.testing.assert_allclose(cos1, -np.einsum("ij,ij->i", n, l), atol=1e-15)
    assert (cos2[tir] == 0.0).all()


def test_single_and_batch_refraction_agree():
    """The validated single form matches the batch form."""
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = _unit(rng.normal(size=3))
        l = _unit(rng.normal(size=3))
        if n @ l > 0:
            l = -l
        event = refract_dir(l, n, 1.0, 1.4)
        out, _, _, _ = refract_dirs(l[None], n[None], 1.0 / 1.4)
        np.testing.assert_array_equal(event.out_dir, out[0])


def test_missing_ray_is_one_segment():
    """A ray missing the hull is a single straight segment of length t_far."""
    path = build_path(Ray([3.0, 3.0, 3.0], [0.0, 0.0, 1.0]), _slab_accel(), 1.5, 8.0)
    assert path.classification == PathClass.MISS
    assert len(path.segments) == 1 and not path.events
    assert path.segments[0].length == pytest.approx(8.0)


def test_normal_incidence_through_slab():
    """Straight-on rays cross a slab undeviated in three collinear segments."""
    path = build_path(Ray([0.0, 0.0, 2.0], [0.0, 0.0, -1.0]), _slab_accel(), 1.5, 6.0)
    assert path.classification == PathClass.THROUGH
    assert len(path.segments) == 3
    assert [e.kind for e in path.events] == [EventKind.REFRACT, EventKind.REFRACT]
    for seg in path.segments:
        np.testing.assert_allclose(seg.direction, [0.0, 0.0, -1.0], atol=1e-12)
    assert path.segments[0].length == pytest.approx(1.8)
    assert path.segments[1].length == pytest.approx(0.4)
    assert path.total_length == pytest.approx(6.0)


def test_slab_lateral_displacement():
    """A 45 degree ray leaves a 0.4 slab parallel to itself and shifted by 0.13165."""
    origin = np.array([-1.0, 0.0, 1.0])
    direction = np.array([S, 0.0, -S])
    path = build_path(Ray(origin, direction), _slab_accel(0.4), 1.5, 6.0)
    assert path.classification == PathClass.THROUGH
    exit_seg = path.segments[2]
    np.testing.assert_allclose(exit_seg.direction, direction, atol=1e-12)
    offset = np.linalg.norm(np.cross(exit_seg.origin - origin, direction))
    expected = 0.4 * np.sin(np.radians(45.0) - np.arcsin(np.sin(np.radians(45.0)) / 1.5)) / np.sqrt(
        1.0 - (np.sin(np.radians(45.0)) / 1.5) ** 2)
    assert expected == pytest.approx(0.13165, abs=1e-5)
    assert offset == pytest.approx(expected, abs=1e-4)


def test_tir_exit_classification():
    """Entering the top face and meeting a side face steeply reflects internally."""
    accel = build_accel(box_mesh(half_extent=0.5))
    path = build_path(Ray([-0.6, 0.0, 1.5], [S, 0.0, -S]), accel, 1.5, 8.0)
    assert path.classification == PathClass.TIR_EXIT
    assert [e.kind for e in path.events] == [EventKind.REFRACT, EventKind.TIR]
    inside, out = path.segments[1].direction, path.segments[2].direction
    np.testing.assert_allclose(out, [-inside[0], inside[1], inside[2]], atol=1e-12)


def test_reflected_segment_stays_inside_until_the_next_wall():
    """After total internal reflection, samples count as inside until the reflected ray meets the bottom face."""
    accel = build_accel(box_mesh(half_extent=0.5))
    origin, direction = np.array([[-0.6, 0.0, 1.5]]), np.array([[S, 0.0, -S]])
    batch = build_paths(origin, direction, accel, 1.5, 8.0)
    samples = sample_paths(batch, 0.1, 8.0, 400)
    inside = batch.in_object(samples, accel)[0]
    seg = samples.segments[0]
    assert inside[seg == 1].all() and not inside[seg == 0].any()
    # the reflected ray runs 0.922 inside before leaving through z = -0.5
    offset = samples.arc[0] - batch.lengths[0, :2].sum()
    assert inside[(seg == 2) & (offset < 0.9)].all()
    assert not inside[(seg == 2) & (offset > 0.95)].any()
    assert batch.in_object(samples)[0][seg == 2].all()


def test_open_hull_gives_two_segments():
    """A front hit with no rear surface is a two-segment Through path."""
    mesh = TriMesh.from_faces([[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 1.0, 0.0]], [[0, 1, 2]])
    path = build_path(Ray([0.0, 0.0, 1.0], [0.0, 0.0, -1.0]), build_accel(mesh), 1.5, 4.0)
    assert path.classification == PathClass.THROUGH
    assert len(path.segments) == 2 and len(path.events) == 1


def test_path_invariants_on_random_rays():
    """Segments chain end to start, count events + 1 and sum to t_far."""
    rng = np.random.default_rng(4)
    origins = _unit(rng.normal(size=(400, 3))) * 2.0
    dirs = _unit(rng.uniform(-0.6, 0.6, size=(400, 3)) - origins)
    batch = build_paths(origins, dirs, build_accel(box_mesh(half_extent=0.5)), 1.5, 7.0)
    for i in range(len(batch)):
        path = batch.path(i)
        assert len(path.segments) == len(path.events) + 1
        assert path.total_length == pytest.approx(7.0)
        for a, b in zip(path.segments, path.segments[1:]):
            np.testing.assert_allclose(a.end, b.origin, atol=1e-6)
        for seg in path.segments:
            assert np.linalg.norm(seg.direction) == pytest.approx(1.0)
    assert (batch.classification == 1).sum() > 100


def test_unit_ior_keeps_directions():
    """ior 1 splits segments but never bends them."""
    rng = np.random.default_rng(6)
    origins = _unit(rng.normal(size=(200, 3))) * 2.0
    dirs = _unit(rng.uniform(-0.6, 0.6, size=(200, 3)) - origins)
    batch = build_paths(origins, dirs, build_accel(box_mesh(half_extent=0.5)), 1.0, 5.0)
    last = batch.directions[np.arange(len(batch)), batch.n_segments - 1]
    np.testing.assert_allclose(last, dirs, atol=1e-12)


def test_build_path_validation():
    """ior below 1 and non-positive t_far are errors."""
    accel = _slab_accel()
    ray = Ray([0.0, 0.0, 1.0], [0.0, 0.0, -1.0])
    with pytest.raises(RefractionError):
        build_path(ray, accel, 0.9, 4.0)
    with pytest.raises(RefractionError):
        build_path(ray, accel, 1.5, 0.0)


@pytest.mark.parametrize("solid", ["cube", "sphere"])
def test_solid_mesh_matches_analytic_oracle(solid):
    """Exit directions through the fine solid mesh match the analytic trace within 0.5 degrees."""
    scene = make_scene(solid)
    rng = np.random.default_rng(9)
    origins = _unit(rng.normal(size=(4000, 3)) + [0.0, 0.0, 1.5]) * 3.5
    dirs = _unit(rng.uniform(-0.6, 0.6, size=(4000, 3)) - origins)
    oracle = oracle_paths(scene, origins, dirs)
    batch = build_paths(origins, dirs, build_accel(scene.solid.mesh(fine=True)), scene.ior, 10.0)
    both = (oracle.n_events == 2) & (batch.n_segments == 3)
    assert oracle.primary_hit.sum() > 1000
    assert both.sum() >= 0.99 * oracle.primary_hit.sum()
    final = batch.directions[np.arange(len(batch)), batch.n_segments - 1]
    cos = np.clip(np.einsum("ij,ij->i", final[both], oracle.final_dir[both]), -1.0, 1.0)
    assert np.mean(np.degrees(np.arccos(cos)) < 0.5) >= 0.99
    np.testing.assert_array_equal(batch.classification[both] == 2, oracle.tir[both])


def test_straight_paths_shape():
    """Straight paths have one segment of length t_far."""
    batch = straight_paths(np.zeros((3, 3)), np.tile([0.0, 0.0, 1.0], (3, 1)), 5.0)
    assert batch.n_segments.tolist() == [1, 1, 1]
    assert batch.lengths[:, 0].tolist() == [5.0, 5.0, 5.0]
    samples = sample_paths(batch, 1.0, 5.0, 8)
    assert not batch.in_object(samples).any()


def _straight(length: float = 4.0) -> RayPath:
    seg = Segment(np.zeros(3), np.array([1.0, 0.0, 0.0]), length)
    return RayPath((seg,), (), PathClass.MISS)


def test_sample_midpoints():
    """Midpoints of equal sub-intervals with constant delta."""
    samples = sample_path(_straight(), 0.0, 4.0, 4)
    assert [s.position[0] for s in samples] == pytest.approx([0.5, 1.5, 2.5, 3.5])
    assert all(s.delta == pytest.approx(1.0) for s in samples)


def test_sample_count_128():
    """128 samples, each with span / 128 spacing."""
    samples = sample_path(_straight(8.0), 2.0, 8.0, 128)
    assert len(samples) == 128
    assert samples[0].delta == pytest.approx(6.0 / 128)
    assert samples[0].position[0] == pytest.approx(2.0 + 3.0 / 128)


def test_sample_bent_path():
    """Samples past the bend take the second segment's direction."""
    a = Segment(np.zeros(3), np.array([1.0, 0.0, 0.0]), 2.0)
    b = Segment(np.array([2.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), 2.0)
    path = RayPath((a, b), (), PathClass.THROUGH)
    samples = sample_path(path, 0.0, 4.0, 4)
    assert [s.segment for s in samples] == [0, 0, 1, 1]
    np.testing.assert_allclose(samples[2].direction, [0.0, 1.0, 0.0])
    np.testing.assert_allclose(samples[2].position, [2.0, 0.5, 0.0])
    np.testing.assert_allclose(samples[3].position, [2.0, 1.5, 0.0])


def test_sample_validation():
    """Fewer than two samples or an empty span are errors."""
    with pytest.raises(RefractionError):
        sample_path(_straight(), 0.0, 4.0, 1)
    with pytest.raises(RefractionError):
        sample_path(_straight(), 4.0, 4.0, 8)


def test_jittered_samples_stay_in_strata():
    """Random offsets keep each sample inside its own sub-interval."""
    batch = straight_paths(np.zeros((5, 3)), np.tile([1.0, 0.0, 0.0], (5, 1)), 4.0)
    samples = sample_paths(batch, 0.0, 4.0, 8, rng=np.random.default_rng(0))
    lower = np.arange(8) * 0.5
    assert ((samples.arc >= lower) & (samples.arc < lower + 0.5)).all()
    np.testing.assert_allclose(samples.positions[..., 0], samples.arc)


def test_write_paths_csv(tmp_path):
    """The debug dump has one row per segment with its starting event."""
    batch = build_paths([[0.0, 0.0, 2.0], [8.0, 8.0, 2.0]], [[0.0, 0.0, -1.0]] * 2, _slab_accel(), 1.5, 6.0)
    out = tmp_path / "paths.csv"
    write_paths_csv(str(out), batch)
    with open(out, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [(r["ray_id"], r["segment"], r["event_kind"]) for r in rows] == [
        ("0", "0", "none"), ("0", "1", "Refract"), ("0", "2", "Refract"), ("1", "0", "none")]
