"""Time forward and backward passes on the numba and numpy kernel backends.

    python3 benchmarks/bench_backends.py --splats 2000 --size 128 --repeats 5

Prints one JSON line per (backend, pass) with the median wall time in
milliseconds, plus the largest absolute difference between the backends'
outputs so a speedup never hides a divergence.
"""

import argparse
import json
import statistics
import time

import numpy as np

from surfelgs.geometry import CameraModel
from surfelgs.gradients import render_backward
from surfelgs.losses import LossWeights, total_loss
from surfelgs.model import SplatModel
from surfelgs.rasterizer import render
from surfelgs.scene_io import look_at


def scene(n, size, seed):
    rng = np.random.default_rng(seed)
    op = rng.uniform(0.3, 0.95, n)
    model = SplatModel(rng.normal(0, 0.4, (n, 3)), rng.normal(size=(n, 4)),
                       np.log(rng.uniform(0.02, 0.12, (n, 2))), np.log(op / (1 - op)),
                       rng.normal(0, 0.3, (n, 16, 3)), sh_degree=3)
    cam = CameraModel(size, size, size / 2, size / 2, size, size, look_at(np.array([2.5, 1.0, 1.2])))
    return model, cam, rng.uniform(0, 1, (size, size, 3))


def timed(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times) * 1e3, result


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--splats", type=int, default=2000)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()

    model, cam, target = scene(a.splats, a.size, a.seed)
    weights = LossWeights(1.0, 0.05)
    results = {}
    for backend in ("numba", "numpy"):
        render(model, cam, backend=backend)     # warm up (jit compile / cache load)
        fwd_ms, out = timed(lambda: render(model, cam, backend=backend), a.repeats)
        grads = total_loss(out, target, cam, weights).grads
        bwd_ms, g = timed(lambda: render_backward(model, cam, out, grads, backend=backend), a.repeats)
        results[backend] = (out, g)
        for name, ms in (("forward", fwd_ms), ("backward", bwd_ms)):
            print(json.dumps({"backend": backend, "pass": name, "splats": a.splats, "size": a.size,
                              "median_ms": round(ms, 2)}))
    (o1, g1), (o2, g2) = results["numba"], results["numpy"]
    print(json.dumps(dict(max_abs_diff_color=float(np.abs(o1.color - o2.color).max()),
                          max_abs_diff_grad=float(np.abs(g1.flat() - g2.flat()).max()))))


if __name__ == "__main__":
    main()
