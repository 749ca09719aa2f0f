"""Smoke test for the Python bindings.

Build and install first:
    cd crates/py && maturin build --release -o dist && pip install dist/*.whl
"""

import math
import random
import sys
import tempfile
from pathlib import Path

import thermoslam_py as ts

SCENARIO = """
radius = 20.0
frames = 150
landmarks = 1500
ring = [30.0, 45.0]
dynamic_objects = 2
moving_objects = 1
object_distance = [8.0, 12.0]
width = 320
height = 240
focal = 200.0
"""


def check(cond, what):
    print(("PASS " if cond else "FAIL ") + what)
    return cond


def main():
    ok = True

    p = ts.Pose.exp([0.1, -0.2, 0.3, 1.0, 2.0, 3.0])
    q = p @ p.inverse()
    ok &= check(all(abs(x) < 1e-12 for x in q.log()), "pose compose with inverse is identity")
    ok &= check(max(abs(a - b) for a, b in zip(p.log(), [0.1, -0.2, 0.3, 1.0, 2.0, 3.0])) < 1e-12, "exp/log round trip")

    rng = random.Random(1)
    a = bytes(rng.randrange(256) for _ in range(ts.DESCRIPTOR_BYTES))
    b = bytes(x ^ 0x01 for x in a)
    ok &= check(ts.hamming(a, b) == ts.DESCRIPTOR_BYTES, "hamming counts flipped bits")

    w, h = 160, 120
    img = bytes(int(128 + 60 * math.sin(0.3 * x) * math.cos(0.25 * y)) for y in range(h) for x in range(w))
    eq = ts.clahe(img, w, h)
    ok &= check(len(eq) == w * h, "clahe keeps the image size")
    kps, descs = ts.detect(eq, w, h, max_points=200)
    ok &= check(0 < len(kps) <= 200 and len(kps) == len(descs), f"detector found {len(kps)} keypoints")
    matches = ts.match_descriptors(descs, descs, 0)
    ok &= check(len(matches) == len(set(descs)), "self matching pairs each distinct descriptor")

    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "data"
        n = ts.simulate(str(data), seed=3, scenario=SCENARIO)
        ok &= check(n == 150 and (data / "gt.txt").exists(), "simulated dataset written")
        cfg = ts.default_config().replace("sync = false", "sync = true")
        res = ts.run_slam(str(data), config=cfg, out=str(Path(tmp) / "out"))
        ok &= check(res["status"] == "ok", f"run status {res['status']} {res['error'] or ''}")
        ok &= check(len(res["trajectory"]) == n, "one pose per frame")
        m = res.get("metrics")
        ok &= check(m is not None and m["cr"] > 0.9, f"completion ratio {m and m['cr']:.3f}")
        again = ts.evaluate(str(Path(tmp) / "out" / "trajectory.txt"), str(data / "gt.txt"))
        ok &= check(abs(again["ate_rmse"] - m["ate_rmse"]) < 1e-6, f"file evaluation agrees, ATE {m['ate_rmse']:.3f} m")

    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
