import numpy as np
import pytest

from viral.dataset import load_dataset
from viral.geometry import InvalidArgument, Pose
from viral.globalmap import GlobalConfig
from viral.lidar import build_local_map
from viral.pipeline import KeyframeMap, make_config, run, write_outputs
from viral.sim import generate, make_scenario


@pytest.fixture(scope="module")
def short(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    generate(make_scenario("box-loop", 4), 4, duration=5.0).write(out)
    return load_dataset(out)


def test_make_config_overrides():
    cfg = make_config(("imu", "lidar"), {"window": {"size": 8, "lidar": {"sigma": 0.1}},
                                         "global": {"ba_every": 3}, "threaded": False, "lag": 1})
    assert cfg.window.size == 8 and cfg.window.lidar.sigma == 0.1
    assert cfg.global_.ba_every == 3 and not cfg.threaded and cfg.lag == 1
    assert not cfg.window.use_cam and not cfg.window.use_uwb and not cfg.global_.uwb_enabled
    for bad in ({"window": {"nope": 1}}, {"nope": 1}, {"global": {"lidar": {"nope": 2}}}):
        with pytest.raises(InvalidArgument):
            make_config(overrides=bad)
    with pytest.raises(InvalidArgument):
        make_config(("imu", "cam"))


def test_keyframe_map_cache():
    kmap = KeyframeMap(GlobalConfig(), 0.4)
    assert kmap(Pose.identity()) is None
    rng = np.random.default_rng(0)
    cloud = rng.uniform(-5, 5, (300, 3))
    kmap.add(Pose.identity().to_row(), cloud)
    first = kmap(Pose.identity())
    assert kmap(Pose.identity()) is first
    up = Pose.from_matrix(np.eye(3), [0.0, 0, 1])
    kmap.update({0: np.array(up.to_row())})
    moved = kmap(Pose.identity())
    assert moved is not first
    np.testing.assert_array_equal(moved.points, build_local_map([(up, cloud)], 0.4).points)


def test_threaded_matches_inline(short, tmp_path):
    a = run(short, make_config(overrides={"threaded": True}))
    b = run(short, make_config(overrides={"threaded": False}))
    np.testing.assert_array_equal(np.array([r.state for r in a.reports]), np.array([r.state for r in b.reports]))
    assert len(a.keyframes) == len(b.keyframes) > 3
    for ka, kb in zip(a.keyframes, b.keyframes):
        np.testing.assert_array_equal(ka.pose, kb.pose)
    assert a.ate["odometry"] < 0.1 and not a.aborted
    out = write_outputs(a, short, make_config(), tmp_path / "o")
    assert (out / "report.json").exists()


def test_lidar_only_run(short):
    res = run(short, make_config(("imu", "lidar"), {"threaded": False}))
    assert res.counts()["visual"] == 0 and res.counts()["uwb"] == 0
    assert not res.mmm and res.gate_time is None
    assert res.ate["odometry"] < 0.1
