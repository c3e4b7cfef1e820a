import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viral.geometry import InvalidArgument, Pose, exp_so3
from viral.timebase import (
    ImagePair,
    ImuGapError,
    ImuStream,
    LidarCloud,
    OutOfRange,
    UwbMeasurement,
    assign_steps,
    interpolate_imu,
)


def imu_stream(t0=0.0, t1=1.0, rate=400):
    t = np.linspace(t0, t1, int(round((t1 - t0) * rate)) + 1)
    return ImuStream(t, np.stack([t, 2 * t, 3 * t], 1), np.stack([-t, t * t, np.ones_like(t)], 1))


def clouds(stamps, lidar=0):
    return [LidarCloud(t, np.array([[1.0, 2.0, 3.0]]), lidar) for t in stamps]


def test_interpolate_exact_stamp():
    s = imu_stream()
    g, a = interpolate_imu(s, s.t[7])
    assert np.array_equal(g, s.gyro[7]) and np.array_equal(a, s.acc[7])


def test_interpolate_midpoint_and_quarter():
    s = ImuStream([0.0, 1.0], [[0, 0, 0], [4, 8, 12]], [[1, 1, 1], [5, 5, 5]])
    g, a = interpolate_imu(s, 0.5)
    np.testing.assert_allclose(g, [2, 4, 6])
    g, a = interpolate_imu(s, 0.25)
    np.testing.assert_allclose(g, 0.75 * np.zeros(3) + 0.25 * np.array([4, 8, 12]))
    np.testing.assert_allclose(a, [2, 2, 2])


def test_interpolate_out_of_range():
    with pytest.raises(OutOfRange):
        interpolate_imu(imu_stream(), 1.5)


def test_empty_primary():
    with pytest.raises(InvalidArgument):
        assign_steps([], [], imu_stream(), [], [])


def test_uwb_right_closed():
    stamps = [0.1, 0.2, 0.3]
    uwb = [UwbMeasurement(0.2, 0, 0, 5.0), UwbMeasurement(0.2000001, 1, 0, 5.0)]
    frames = assign_steps(clouds(stamps), [], imu_stream(), uwb, [])
    assert [u.anchor for u in frames[1].uwb] == [0]
    assert [u.anchor for u in frames[2].uwb] == [1]


def test_empty_bundle_still_produces_frame():
    frames = assign_steps(clouds([0.1, 0.2]), [], imu_stream(), [], [])
    assert len(frames) == 2 and frames[1].uwb == ()


def test_image_tie_goes_to_earlier():
    # dyadic stamps so that the tie is exact in floating point
    imgs = [ImagePair(0.4375, np.zeros((0, 4))), ImagePair(0.5625, np.zeros((0, 4)))]
    frames = assign_steps(clouds([0.25, 0.5, 0.75]), [], imu_stream(), [], imgs)
    assert frames[1].image.t == 0.4375
    assert frames[1].delay == -0.0625
    imgs = [ImagePair(0.17, np.zeros((0, 4))), ImagePair(0.21, np.zeros((0, 4)))]
    frames = assign_steps(clouds([0.1, 0.2, 0.3]), [], imu_stream(), [], imgs)
    assert frames[1].image.t == 0.21


def test_image_beyond_half_period_not_attached():
    imgs = [ImagePair(0.46, np.zeros((0, 4)))]
    frames = assign_steps(clouds([0.1, 0.2, 0.3]), [], imu_stream(), [], imgs)
    assert all(f.image is None for f in frames)


def test_imu_segment_covers_interval():
    frames = assign_steps(clouds([0.1013, 0.2027]), [], imu_stream(), [], [])
    seg = frames[1].imu
    assert seg.t[0] == 0.1013 and seg.t[-1] == 0.2027
    assert np.all(np.diff(seg.t) > 0)
    np.testing.assert_allclose(seg.gyro[0], [0.1013, 0.2026, 0.3039])


def test_imu_gap_error():
    s = imu_stream()
    keep = (s.t < 0.3) | (s.t > 0.4)
    s = ImuStream(s.t[keep], s.gyro[keep], s.acc[keep])
    with pytest.raises(ImuGapError, match="0.3"):
        assign_steps(clouds([0.25, 0.35, 0.45]), [], s, [], [])


def test_secondary_merge_with_extrinsics():
    T = Pose(exp_so3([0, 0, np.pi / 2]), np.array([0.1, 0, 0]))
    frames = assign_steps(clouds([0.1, 0.2]), clouds([0.1, 0.2], lidar=1), imu_stream(), [], [], {1: T})
    c = frames[0].cloud
    assert len(c) == 2
    np.testing.assert_allclose(c.points[1], T.apply(np.array([1.0, 2.0, 3.0])))
    assert list(c.source) == [0, 1]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.1001, 0.9), min_size=0, max_size=60))
def test_uwb_union_lossless(times):
    stamps = list(np.arange(1, 10) * 0.1)
    uwb = [UwbMeasurement(t, i % 3, 0, 1.0) for i, t in enumerate(sorted(times))]
    frames = assign_steps(clouds(stamps), [], imu_stream(), uwb, [])
    got = [u for f in frames for u in f.uwb]
    expected = [u for u in uwb if u.t > stamps[0] and u.t <= stamps[-1]]
    assert got == expected
    for f in frames[1:]:
        assert all(f.t_prev < u.t <= f.t for u in f.uwb)


def test_deterministic():
    args = (clouds([0.1, 0.2, 0.3]), [], imu_stream(), [UwbMeasurement(0.15, 0, 0, 2.0)], [])
    a, b = assign_steps(*args), assign_steps(*args)
    for fa, fb in zip(a, b):
        assert fa.t == fb.t and fa.uwb == fb.uwb
        assert np.array_equal(fa.cloud.points, fb.cloud.points)
        if fa.imu is not None:
            assert np.array_equal(fa.imu.acc, fb.imu.acc)
