#!/usr/bin/env python3
"""Regenerates the shipped scenario trajectory files (TUM format).

The scene and config TOML files are hand-written; this script only produces
the trajectory text files so they stay reproducible.
"""

import math
import os

HERE = os.path.dirname(os.path.abspath(__file__))


def quat_mul(a, b):
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return (
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    )


def quat_ry(angle):
    return (0.0, math.sin(angle / 2), 0.0, math.cos(angle / 2))


def quat_rz(angle):
    return (0.0, 0.0, math.sin(angle / 2), math.cos(angle / 2))


IDENTITY = (0.0, 0.0, 0.0, 1.0)


def write_tum(path, samples):
    with open(path, "w") as f:
        for t, pos, q in samples:
            f.write(
                "%.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f\n"
                % (t, pos[0], pos[1], pos[2], q[0], q[1], q[2], q[3])
            )
    print("wrote", os.path.relpath(path, HERE))


def arc_samples(n, dt, amplitude, offset=(0.0, 0.0, 0.0), arc=0.4 * math.pi):
    """Gentle arc in front of the back wall, non-collinear on purpose."""
    out = []
    for i in range(n):
        a = arc * (i / (n - 1)) - arc / 2
        pos = (
            amplitude * math.sin(a) + offset[0],
            0.2 * math.sin(2 * a) + offset[1],
            0.1 * (1 - math.cos(a)) + offset[2],
        )
        out.append((i * dt, pos, quat_ry(0.5 * a)))
    return out


def room():
    write_tum(
        os.path.join(HERE, "room", "traj_r0.txt"),
        arc_samples(40, 0.25, 1.2),
    )


def loop100():
    # 2.5 turns, camera looking radially outward (forward = +x of the
    # sensor frame rotated into the world); the revisited arc closes loops
    samples = []
    n = 101
    for i in range(n):
        th = 2.5 * 2 * math.pi * i / (n - 1)
        pos = (math.cos(th), math.sin(th), 0.0)
        q = quat_mul(quat_rz(th), quat_ry(math.pi / 2))
        samples.append((i * 0.2, pos, q))
    write_tum(os.path.join(HERE, "loop100", "traj_r0.txt"), samples)


def wiggle_samples(n, dt):
    out = []
    for i in range(n):
        pos = (0.03 * i, 0.02 * math.sin(1.3 * i), 0.015 * math.cos(0.9 * i))
        out.append((i * dt, pos, IDENTITY))
    return out


def fig4_pipe():
    write_tum(os.path.join(HERE, "fig4_pipe", "traj_r0.txt"), wiggle_samples(8, 0.25))


def fig5_studs():
    write_tum(os.path.join(HERE, "fig5_studs", "traj_r0.txt"), wiggle_samples(8, 0.25))


def multi4():
    offsets = [(-0.3, 0.0, 0.0), (0.3, 0.0, 0.0), (0.0, -0.2, 0.0), (0.0, 0.2, 0.1)]
    for r, off in enumerate(offsets):
        write_tum(
            os.path.join(HERE, "multi4", "traj_r%d.txt" % r),
            arc_samples(50, 0.01, 1.2, offset=off, arc=0.3 * math.pi),
        )


if __name__ == "__main__":
    room()
    loop100()
    fig4_pipe()
    fig5_studs()
    multi4()
