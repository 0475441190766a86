"""Compare the numba tile kernel against the pure-numpy compositing path.

    python benchmarks/bench_render.py --size 128 --count 3000 --repeat 5
"""

import argparse
import json
import time

import numpy as np

from streamsplat import synthgen
from streamsplat.rasterizer import render


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--count", type=int, default=3000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--kind", default="sphere")
    args = ap.parse_args()

    params = synthgen.TrajectoryParams(frames=args.repeat, image_size=(args.size, args.size), radius_shell=(2.5, 3.5))
    traj = synthgen.sample_trajectory(params)
    obj = synthgen.make_object(args.kind, count=args.count)
    results = {}
    images = {}
    for backend in ("numba", "numpy"):
        render(obj, *traj[0], backend=backend)  # warm-up / jit compile
        times = []
        for pose, intr in traj:
            t0 = time.perf_counter()
            out = render(obj, pose, intr, backend=backend)
            times.append(time.perf_counter() - t0)
        images[backend] = out.color
        results[backend] = {"median_ms": 1e3 * float(np.median(times)), "min_ms": 1e3 * float(np.min(times))}
    results["speedup"] = results["numpy"]["median_ms"] / results["numba"]["median_ms"]
    results["max_abs_diff"] = float(np.abs(images["numba"] - images["numpy"]).max())
    results["config"] = vars(args)
    print(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
