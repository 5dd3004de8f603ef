import json
import math

import evplug


def test_stereo_round_trip():
    rig = evplug.StereoRig()
    point = [0.03, -0.02, 0.7]
    left, right = rig.project(point)
    back = rig.triangulate(left, right)
    assert max(abs(a - b) for a, b in zip(back, point)) < 1e-9
    parallel = evplug.StereoRig(theta_deg=0.0)
    l, r = parallel.project(point)
    assert math.isclose(parallel.triangulate(l, r, method="eq1")[2], 0.7, rel_tol=1e-12)


def test_plane_fit():
    pts = [[x, y, 2 * x + 3 * y + 1] for x in (-1.0, 0.0, 2.0) for y in (-1.0, 0.5)]
    a, b, c, rms = evplug.fit_plane(pts)
    assert abs(a - 2) < 1e-9 and abs(b - 3) < 1e-9 and abs(c - 1) < 1e-9 and rms < 1e-9


def test_render_and_detect():
    frame = evplug.render(port_type="type2", angle_deg=30.0, seed=3)
    assert len(frame.pixels("left")) == frame.width * frame.height
    assert frame.to_pgm("right").startswith(b"P5")
    det = evplug.Detector("type2").detect(frame)
    assert det.score > 0.8
    assert det.translation_error < 2e-3
    assert len(det.left) == len(det.right) >= 3


def test_calibrate_and_run():
    calib = evplug.calibrate(poses=26, noise="none", seed=1)
    assert calib.base_cam_translation_error < 1e-6
    assert json.loads(calib.to_json())["accepted"] == 26
    runs = evplug.run_experiment(calib, angles_deg=[10.0, 30.0], runs=2, noise="none", seed=2)
    assert [r.category for r in runs] == ["FullInsertion"] * 4
    full, partial, failed, errors, rate = evplug.summarize(runs)
    assert (full, rate) == (4, 1.0)
    assert json.loads(runs[0].to_json())["run_index"] == 0


def test_robot():
    arm = evplug.Robot()
    q = [0.3, -1.2, 1.4, -1.6, -1.5, 0.2]
    pose = arm.forward_kinematics(q)
    seed = [v + 0.05 for v in q]
    back = arm.forward_kinematics(arm.inverse_kinematics(pose, seed))
    assert max(abs(back[i][j] - pose[i][j]) for i in range(4) for j in range(4)) < 1e-6
    assert len(arm.jacobian(q)) == 6
    path = arm.plan(q, [-0.3, -1.2, 1.4, -1.6, -1.5, 0.2], boxes=[], seed=1)
    assert path[0] == q and len(path) >= 2


def test_bad_arguments():
    import pytest

    with pytest.raises(ValueError):
        evplug.render(port_type="type3")
    with pytest.raises(ValueError):
        evplug.calibrate(noise="fog")
