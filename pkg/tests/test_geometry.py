import numpy as np
import pytest

from conftest import random_rotation
from src.errors import GeometryError
from src.geometry import (
    BodyRegion,
    Plane,
    PlaneTriplet,
    RigidTransform,
    VolumeMeta,
    angle_between,
    denormalize_translation,
    normalize_translation,
    plane_from_transform,
    rot_z,
    transform_from_plane,
    voxel_to_world,
    world_to_voxel,
)

META = VolumeMeta((32, 32, 32), (5.0, 5.0, 5.0))


def test_identity_transform_gives_axial_plane():
    plane = plane_from_transform(RigidTransform.identity())
    np.testing.assert_array_equal(plane.e_w, [0.0, 0.0, 1.0])
    np.testing.assert_array_equal(plane.center, [0.0, 0.0, 0.0])


def test_rotation_about_z_maps_plane_axes():
    plane = plane_from_transform(RigidTransform(rot_z(90.0).T, (0.0, 0.0, 0.0)))
    np.testing.assert_allclose(plane.e_u, [0.0, 1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(plane.e_v, [-1.0, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(plane.e_w, [0.0, 0.0, 1.0], atol=1e-15)


def test_plane_transform_round_trip(rng):
    for _ in range(100):
        t = RigidTransform(random_rotation(rng), rng.uniform(-50, 50, size=3))
        back = transform_from_plane(plane_from_transform(t))
        np.testing.assert_allclose(back.rotation, t.rotation, atol=1e-12)
        np.testing.assert_allclose(back.translation, t.translation, atol=1e-12)


def test_plane_rejects_non_orthogonal_directions():
    with pytest.raises(GeometryError):
        Plane((0, 0, 0), (1, 0, 0), (0.1, 1, 0))
    with pytest.raises(GeometryError):
        Plane((0, 0, 0), (2, 0, 0), (0, 1, 0))


def test_plane_from_directions_repairs_small_errors():
    plane = Plane.from_directions((0, 0, 0), (1, 0, 1e-4), (1e-4, 1, 0))
    assert abs(plane.e_u @ plane.e_v) < 1e-15
    assert np.linalg.norm(plane.e_w) == pytest.approx(1.0, abs=1e-12)


def test_rigid_transform_rejects_reflection():
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([-1.0, 1.0, 1.0]))


def test_arrays_are_read_only():
    plane = Plane((0, 0, 0), (1, 0, 0), (0, 1, 0))
    with pytest.raises(ValueError):
        plane.center[0] = 1.0


@pytest.mark.parametrize(
    "mm, expected",
    [((80.0, 0.0, 0.0), (1.0, 0.0, 0.0)), ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)), ((-40.0, 20.0, 0.0), (-0.5, 0.25, 0.0))],
)
def test_normalize_translation(mm, expected):
    np.testing.assert_allclose(normalize_translation(np.array(mm), META), expected)


def test_translation_outside_extent_is_rejected():
    with pytest.raises(GeometryError):
        normalize_translation(np.array([81.0, 0.0, 0.0]), META)


def test_translation_round_trip(rng):
    t = rng.uniform(-80, 80, size=(50, 3))
    for row in t:
        np.testing.assert_allclose(denormalize_translation(normalize_translation(row, META), META), row, atol=1e-12)


def test_voxel_world_mapping():
    np.testing.assert_allclose(voxel_to_world(np.array([0, 0, 0]), META), [-80.0, -80.0, -80.0])
    np.testing.assert_allclose(voxel_to_world(np.array([16, 16, 16]), META), [0.0, 0.0, 0.0])
    np.testing.assert_allclose(world_to_voxel(voxel_to_world(np.array([3.5, 7, 31]), META), META), [3.5, 7, 31])


def test_angle_between():
    assert angle_between(np.array([1.0, 0, 0]), np.array([1.0, 0, 0])) == 0.0
    assert angle_between(np.array([1.0, 0, 0]), np.array([-1.0, 0, 0])) == pytest.approx(180.0)
    assert angle_between(np.array([1.0, 0, 0]), np.array([1.0, 1.0, 0])) == pytest.approx(45.0)
    with pytest.raises(GeometryError):
        angle_between(np.zeros(3), np.array([1.0, 0, 0]))


def test_angle_between_is_precise_for_tiny_angles():
    eps = 1e-10
    assert angle_between(np.array([1.0, 0, 0]), np.array([1.0, eps, 0])) == pytest.approx(np.degrees(eps), rel=1e-6)


def test_angle_between_is_a_metric_on_directions(rng):
    for _ in range(500):
        a, b, c = rng.standard_normal((3, 3))
        assert angle_between(a, b) == pytest.approx(angle_between(b, a), abs=1e-12)
        assert angle_between(a, c) <= angle_between(a, b) + angle_between(b, c) + 1e-9


def test_triplet_dict_round_trip(rng):
    planes = [plane_from_transform(RigidTransform(random_rotation(rng), rng.uniform(-9, 9, 3))) for _ in range(3)]
    triplet = PlaneTriplet(*planes, region=BodyRegion.KNEE)
    back = PlaneTriplet.from_dict(triplet.as_dict(), "knee")
    for a, b in zip(triplet, back):
        np.testing.assert_array_equal(a.center, b.center)
        np.testing.assert_array_equal(a.e_u, b.e_u)
        np.testing.assert_array_equal(a.e_v, b.e_v)


def test_region_indices_are_stable():
    assert [r.index for r in BodyRegion] == [0, 1, 2, 3]
    assert BodyRegion.from_index(2) is BodyRegion.KNEE
    with pytest.raises(GeometryError):
        BodyRegion.from_index(4)
