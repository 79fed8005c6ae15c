#!/usr/bin/env python3
"""Smoke test for the dvmap_py extension module.

Build and stage the module first:

    cargo build --release -p dvmap-py
    cp target/release/libdvmap_py.so python/dvmap_py.so

Then run: python3 python/smoke_test.py
"""
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import dvmap_py as dv


def approx(a, b, tol=1e-9):
    assert abs(a - b) < tol, f"{a} != {b} (tol {tol})"


def main():
    # pose algebra round trips
    pose = dv.SE3Pose((1.0, 2.0, 3.0), (0.0, 0.0, math.sin(0.3), math.cos(0.3)))
    back = dv.SE3Pose.exp(pose.log())
    for a, b in zip(pose.translation, back.translation):
        approx(a, b)
    ident = pose.compose(pose.inverse())
    for v in ident.translation:
        approx(v, 0.0)

    # projection round trip through a world-to-camera transform
    k = dv.CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)
    cam_pt = dv.back_project(100.0, 200.0, 2.5, k)
    world = pose.inverse().transform_point(cam_pt)
    u, v = dv.project(pose, world, k)
    approx(u, 100.0)
    approx(v, 200.0)

    # published bandwidth figures
    approx(dv.per_robot_bandwidth(15.0, 700e3, 10.0, 350e3), 112.0)
    assert abs(dv.map_update_frequency(110.0, 10.58) - 10.4) / 10.4 < 0.01

    # ATE of a rigidly shifted trajectory is zero after alignment
    gt = [
        (float(i), [float(i), math.sin(0.5 * i), math.cos(0.3 * i), 0.0, 0.0, 0.0, 1.0])
        for i in range(10)
    ]
    c, s = math.cos(0.7), math.sin(0.7)
    est = [
        (t, [c * p[0] - s * p[1] + 5.0, s * p[0] + c * p[1] + 1.0, p[2] - 2.0, *p[3:]])
        for t, p in gt
    ]
    ate, rmse = dv.ate_rmse(est, gt, align=True)
    assert ate < 1e-9 and rmse >= ate

    # outlier removal drops the lone far point
    cluster = [(0.01 * i, 0.0, 0.0) for i in range(30)] + [(50.0, 50.0, 50.0)]
    kept = dv.remove_outliers(cluster, 5, 2.0)
    assert (50.0, 50.0, 50.0) not in kept
    assert len(kept) >= 25

    # SNR gate keeps order and filters strictly below threshold
    m = [(1.0, 0.0, 0.0, 0.0, 20.0), (1.0, 0.1, 0.0, 0.0, 5.0), (1.0, 0.2, 0.0, 0.0, 15.0)]
    kept = dv.snr_filter(m, 15.0)
    assert [x[4] for x in kept] == [20.0, 15.0]

    print("smoke test passed")


if __name__ == "__main__":
    main()
