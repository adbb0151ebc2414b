import numpy as np
import pytest

from odoslam.manifold import Pose, exp_so3
from odoslam.sensors import (
    BehindCamera,
    CameraModel,
    Extrinsics,
    FeatureObservation,
    GyroSample,
    NoiseParams,
    WheelSample,
    backproject,
    merge_streams,
    project,
    project_many,
    read_sensor_log,
    wheel_displacement,
    write_sensor_log,
)


def default_cam():
    return CameraModel(fx=300.0, fy=300.0, cx=320.0, cy=240.0, width=640, height=480)


def test_wheel_displacement_equal():
    psi = wheel_displacement(WheelSample(0.0, 1.0, 1.0))
    assert np.allclose(psi, [1.0, 0.0, 0.0])


def test_wheel_displacement_zero():
    assert np.allclose(wheel_displacement(WheelSample(0.0, 0.0, 0.0)), np.zeros(3))


def test_wheel_displacement_mean():
    psi = wheel_displacement(WheelSample(0.0, 0.4, 0.6))
    assert np.allclose(psi, [0.5, 0.0, 0.0])


def test_wheel_displacement_linear_and_zero_yz():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b, s = rng.normal(size=3)
        p1 = wheel_displacement(WheelSample(0.0, a, b))
        p2 = wheel_displacement(WheelSample(0.0, s * a, s * b))
        assert p1[1] == 0.0 and p1[2] == 0.0
        assert np.allclose(p2, s * p1)


def test_project_optical_axis():
    cam = default_cam()
    pix = project(np.array([0.0, 0.0, 2.0]), Pose.identity(), Extrinsics(), cam)
    assert np.allclose(pix, [cam.cx, cam.cy])


def test_project_hand_computed():
    cam = CameraModel(fx=100.0, fy=100.0, cx=0.0, cy=0.0, width=1000, height=1000)
    # principal point (0,0) is on the image corner; validate() is not
    # required for projection itself
    pix = project(np.array([1.0, 0.0, 2.0]), Pose.identity(), Extrinsics(), cam)
    assert np.allclose(pix, [50.0, 0.0])


def test_project_behind_camera():
    with pytest.raises(BehindCamera):
        project(np.array([0.0, 0.0, 0.0]), Pose.identity(), Extrinsics(), default_cam())
    with pytest.raises(BehindCamera):
        project(np.array([0.0, 0.0, -1.0]), Pose.identity(), Extrinsics(), default_cam())


def test_project_backproject_roundtrip():
    rng = np.random.default_rng(1)
    cam = default_cam()
    for _ in range(30):
        pose = Pose(exp_so3(rng.normal(size=3) * 0.3), rng.normal(size=3))
        ext = Extrinsics(R_C_O=exp_so3(rng.normal(size=3) * 0.2), p_C_O=rng.normal(size=3) * 0.1)
        pix = rng.uniform([0, 0], [cam.width - 1, cam.height - 1])
        depth = rng.uniform(0.5, 20.0)
        f_w = backproject(pix, depth, pose, ext, cam)
        assert np.allclose(project(f_w, pose, ext, cam), pix, atol=1e-9)


def test_project_many_matches_scalar():
    rng = np.random.default_rng(2)
    cam = default_cam()
    pose = Pose(exp_so3(rng.normal(size=3) * 0.2), rng.normal(size=3))
    ext = Extrinsics(R_C_O=exp_so3(rng.normal(size=3) * 0.2), p_C_O=rng.normal(size=3) * 0.1)
    pts = rng.normal(size=(40, 3)) * 3.0 + np.array([0.0, 0.0, 6.0])
    pix, depth = project_many(pts, pose, ext, cam)
    for i, p in enumerate(pts):
        if depth[i] > 1e-6:
            assert np.allclose(pix[i], project(p, pose, ext, cam), atol=1e-12)


def test_noise_params_validate():
    NoiseParams.from_scalars().validate()
    bad = NoiseParams.from_scalars()
    bad.sigma_gyro = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    with pytest.raises(ValueError):
        bad.validate()


def test_camera_model_validate():
    default_cam().validate()
    with pytest.raises(ValueError):
        CameraModel(fx=-1.0, fy=1.0, cx=0.0, cy=0.0, width=10, height=10).validate()
    with pytest.raises(ValueError):
        CameraModel(fx=1.0, fy=1.0, cx=20.0, cy=0.0, width=10, height=10).validate()


def test_sensor_log_roundtrip(tmp_path):
    path = str(tmp_path / "log.csv")
    gyro = [GyroSample(0.0, np.array([0.1, -0.2, 0.3])), GyroSample(0.1, np.array([0.0, 0.0, 1.0]))]
    wheel = [WheelSample(0.05, 0.01, 0.02), WheelSample(0.15, 0.0, 0.0)]
    feats = [FeatureObservation(0, 7, np.array([12.5, 340.25]), timestamp=0.05)]
    write_sensor_log(path, gyro=gyro, wheel=wheel, features=feats)
    log = read_sensor_log(path)
    assert len(log.gyro) == 2 and len(log.wheel) == 2 and len(log.features) == 1
    assert np.allclose(log.gyro[0].omega, gyro[0].omega)
    assert log.wheel[0].dist_right == pytest.approx(0.02)
    assert log.features[0].landmark_id == 7
    assert np.allclose(log.features[0].pixel, feats[0].pixel)
    with open(path) as fh:
        first = fh.readline()
    assert first.startswith("#"), "log must carry a documenting header comment"


def test_merge_streams_equal_rate():
    gyro = [GyroSample(0.1 * k, np.array([0.0, 0.0, 0.1 * k])) for k in range(5)]
    wheel = [WheelSample(0.1 * (k + 1), 0.01, 0.01) for k in range(4)]
    steps = merge_streams(gyro, wheel, start_time=0.0)
    assert len(steps) == 4
    for k, (omega, dl, dr, dt) in enumerate(steps):
        # each interval [0.1k, 0.1(k+1)] is covered by the k-th gyro sample
        assert np.allclose(omega, [0.0, 0.0, 0.1 * k])
        assert dt == pytest.approx(0.1)


def test_merge_streams_double_rate_gyro():
    # gyro at 20 Hz, wheel at 10 Hz: each wheel interval averages two holds
    gyro = [GyroSample(0.05 * k, np.array([0.0, 0.0, float(k)])) for k in range(8)]
    wheel = [WheelSample(0.1 * (k + 1), 0.01, 0.01) for k in range(3)]
    steps = merge_streams(gyro, wheel, start_time=0.0)
    assert np.allclose(steps[0][0], [0.0, 0.0, 0.5])  # mean of samples 0 and 1
    assert np.allclose(steps[1][0], [0.0, 0.0, 2.5])  # mean of samples 2 and 3
