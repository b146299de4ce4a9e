"""Compare the compiled and numpy kernel backends on the standard episode.

5-way 1-shot, 75 query images, 361 descriptors per image, dimension 64.

    python benchmarks/bench_kernels.py [--episodes N] [--python-episodes N]
"""
import argparse
import json
import statistics
import time

from fewshot_nbnn.bench import Workload, time_episodes
from fewshot_nbnn.similarity import available_backends


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=200)
    ap.add_argument("--python-episodes", type=int, default=20, help="the fallback is slow; time fewer episodes")
    args = ap.parse_args()

    wl = Workload()
    out = {}
    for name in available_backends():
        n = args.episodes if name == "compiled" else args.python_episodes
        t0 = time.perf_counter()
        times = time_episodes(wl, n, name)
        out[name] = {
            "episodes": n,
            "mean_ms": 1e3 * statistics.fmean(times),
            "median_ms": 1e3 * statistics.median(times),
            "min_ms": 1e3 * min(times),
            "wall_s": time.perf_counter() - t0,
        }
    if "compiled" in out and "python" in out:
        out["speedup_mean"] = out["python"]["mean_ms"] / out["compiled"]["mean_ms"]
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
