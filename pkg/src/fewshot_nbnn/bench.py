"""Per-episode timing of the kernel backends on a realistic episode shape.

The default workload is a 5-way 1-shot episode with 75 query images, 361
descriptors per image and dimension 64 (a 19x19 feature map of a shallow
backbone).
"""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

from .core import Method
from .episodes import ProtocolConfig, run_episode
from .similarity import available_backends, use_backend
from .synth import SynthSpec, synth_generate


@dataclass(frozen=True)
class Workload:
    n_ways: int = 5
    k_shots: int = 1
    queries_per_class: int = 15
    descriptors_per_image: int = 361
    dim: int = 64
    method: Method = Method.MN4
    seed: int = 0

    def dataset(self):
        spec = SynthSpec(
            n_classes=self.n_ways,
            images_per_class=self.k_shots + self.queries_per_class,
            descriptors_per_image=self.descriptors_per_image,
            dim=self.dim,
            seed=self.seed,
        )
        return synth_generate(spec)

    def config(self, episodes: int) -> ProtocolConfig:
        return ProtocolConfig(
            n_ways=self.n_ways,
            k_shots=self.k_shots,
            queries_per_class=self.queries_per_class,
            episode_count=episodes,
            method=self.method,
            seed=self.seed,
        )


def time_episodes(workload: Workload, episodes: int, backend: str | None = None, warmup: int = 5) -> list[float]:
    """Wall seconds of each of ``episodes`` full episodes (sample, pool, classify)."""
    dataset = workload.dataset()
    config = workload.config(episodes + warmup)
    backend = backend or available_backends()[0]
    with use_backend(backend):
        for i in range(warmup):
            run_episode(dataset, config, i)
        out = []
        for i in range(warmup, warmup + episodes):
            t0 = time.perf_counter()
            run_episode(dataset, config, i)
            out.append(time.perf_counter() - t0)
    return out


def compare_backends(workload: Workload | None = None, episodes: int = 200) -> dict:
    workload = workload or Workload()
    results = {}
    for name in available_backends():
        times = time_episodes(workload, episodes, name)
        results[name] = {
            "episodes": episodes,
            "mean_ms": 1e3 * statistics.fmean(times),
            "median_ms": 1e3 * statistics.median(times),
            "min_ms": 1e3 * min(times),
        }
    return results
