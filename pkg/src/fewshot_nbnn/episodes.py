"""Episodic N-way K-shot evaluation.

Every episode draws from its own RNG stream derived from ``(seed, episode
index)`` through :class:`numpy.random.SeedSequence`, so an episode is the same
no matter which worker runs it or in what order.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .classify import batch_scores, fill_empty, log_softmax, pseudo_label_augment
from .core import (
    CardinalityMismatch,
    DataError,
    DescriptorSet,
    Episode,
    EvalReport,
    InsufficientData,
    InvalidSpec,
    MergeStrategy,
    Method,
    ScoreRule,
    SupportPool,
    concat_sets,
)
from .selection import check_percent, selection_mask
from .similarity import neighbor_stats


@dataclass(frozen=True)
class Item:
    image_id: str
    class_id: str
    descriptors: DescriptorSet


@dataclass(frozen=True)
class UnlabeledItem:
    image_id: str
    descriptors: DescriptorSet
    group: str | None = None


class LabeledDataset:
    """Labelled images plus optional unlabelled ones (e.g. distractor classes)."""

    def __init__(self, items: Sequence[Item], unlabeled: Sequence[UnlabeledItem] = ()):
        self.items = tuple(items)
        self.unlabeled = tuple(unlabeled)
        ids = [it.image_id for it in self.items] + [u.image_id for u in self.unlabeled]
        if len(set(ids)) != len(ids):
            raise DataError("image ids must be unique")
        dims = {it.descriptors.dim for it in self.items} | {u.descriptors.dim for u in self.unlabeled}
        if len(dims) > 1:
            raise DataError(f"descriptor dimensions differ across images: {sorted(dims)}")
        self.dim = dims.pop() if dims else 0
        by_class: dict[str, list[int]] = {}
        for pos, it in enumerate(self.items):
            by_class.setdefault(it.class_id, []).append(pos)
        self.by_class = by_class
        self.class_ids = tuple(by_class)
        groups: dict[str, list[int]] = {}
        for pos, u in enumerate(self.unlabeled):
            if u.group is not None:
                groups.setdefault(u.group, []).append(pos)
        self.groups = groups

    def __len__(self) -> int:
        return len(self.items)

    def __repr__(self) -> str:
        return f"LabeledDataset(images={len(self.items)}, classes={len(self.class_ids)}, unlabeled={len(self.unlabeled)})"


@dataclass(frozen=True)
class ProtocolConfig:
    n_ways: int = 5
    k_shots: int = 1
    queries_per_class: int = 15
    episode_count: int = 600
    merge_strategy: MergeStrategy = MergeStrategy.UNION
    method: Method = Method.MN4
    score_rule: ScoreRule = ScoreRule.NBNN
    odm_k_percent: float | None = None
    unlabeled_per_class: int = 0
    distractor_classes: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "merge_strategy", MergeStrategy(self.merge_strategy))
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "score_rule", ScoreRule(self.score_rule))
        if self.n_ways < 2:
            raise InvalidSpec("n_ways must be at least 2")
        if min(self.k_shots, self.queries_per_class, self.episode_count) < 1:
            raise InvalidSpec("shots, queries per class and episode count must be positive")
        if self.unlabeled_per_class < 0 or self.distractor_classes < 0:
            raise InvalidSpec("unlabeled and distractor counts cannot be negative")
        if self.distractor_classes and not self.unlabeled_per_class:
            raise InvalidSpec("distractor classes need unlabeled_per_class > 0")
        if self.method is Method.ODM:
            if self.odm_k_percent is None:
                raise InvalidSpec("the odm method needs odm_k_percent")
            check_percent(self.odm_k_percent)

    @property
    def semi(self) -> bool:
        return self.unlabeled_per_class > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("merge_strategy", "method", "score_rule"):
            d[key] = d[key].value
        return d

    def with_(self, **changes) -> "ProtocolConfig":
        return replace(self, **changes)


def merge_shots(shot_sets: Sequence[DescriptorSet], strategy: MergeStrategy | str = MergeStrategy.UNION) -> DescriptorSet:
    """Combine one class's K shot sets into its support set.

    MEAN averages descriptors position by position across shots and needs
    equal cardinalities; UNION concatenates in shot order.
    """
    strategy = MergeStrategy(strategy)
    if not shot_sets:
        raise InsufficientData("at least one shot is required")
    if len(shot_sets) == 1:
        return shot_sets[0]
    if strategy is MergeStrategy.UNION:
        return concat_sets(shot_sets)
    sizes = {len(s) for s in shot_sets}
    if len(sizes) != 1:
        raise CardinalityMismatch(f"MEAN merging needs equal descriptor counts, got {sorted(sizes)}")
    dims = {s.dim for s in shot_sets}
    if len(dims) != 1:
        raise DataError(f"shots have differing dimensions {sorted(dims)}")
    mean = np.stack([s.data for s in shot_sets]).mean(axis=0)
    return DescriptorSet(mean)


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """RNG stream for one episode; equals ``SeedSequence(seed).spawn(n)[index]``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def sample_episode(dataset: LabeledDataset, config: ProtocolConfig, index: int) -> Episode:
    """Draw episode ``index``.

    Classes are drawn without replacement; within each class one permutation
    of its images supplies, in order, the K support shots, the query images and
    the unlabelled images.  Distractor groups are drawn after all classes.
    """
    rng = episode_rng(config.seed, index)
    n, k, nq, nu = config.n_ways, config.k_shots, config.queries_per_class, config.unlabeled_per_class
    if len(dataset.class_ids) < n:
        raise InsufficientData(f"{n}-way episodes need {n} classes, dataset has {len(dataset.class_ids)}")
    chosen = rng.choice(len(dataset.class_ids), size=n, replace=False)
    class_ids, support, support_ids, queries, query_ids, unlabeled = [], [], [], [], [], []
    for ci in chosen:
        cid = dataset.class_ids[ci]
        members = dataset.by_class[cid]
        need = k + nq + nu
        if len(members) < need:
            raise InsufficientData(f"class {cid!r} has {len(members)} images, episode needs {need}")
        perm = rng.permutation(len(members))
        picked = [dataset.items[members[p]] for p in perm[:need]]
        class_ids.append(cid)
        support.append(tuple(it.descriptors for it in picked[:k]))
        support_ids.append(tuple(it.image_id for it in picked[:k]))
        for it in picked[k : k + nq]:
            queries.append((it.descriptors, cid))
            query_ids.append(it.image_id)
        unlabeled.extend(it.descriptors for it in picked[k + nq :])
    if config.distractor_classes:
        groups = list(dataset.groups)
        if len(groups) < config.distractor_classes:
            raise InsufficientData(
                f"{config.distractor_classes} distractor classes requested, dataset has {len(groups)}"
            )
        for gi in rng.choice(len(groups), size=config.distractor_classes, replace=False):
            members = dataset.groups[groups[gi]]
            if len(members) < nu:
                raise InsufficientData(f"distractor group {groups[gi]!r} has fewer than {nu} images")
            for p in rng.permutation(len(members))[:nu]:
                unlabeled.append(dataset.unlabeled[members[p]].descriptors)
    return Episode(
        n_ways=n,
        k_shots=k,
        class_ids=tuple(class_ids),
        support=tuple(support),
        queries=tuple(queries),
        merge_strategy=config.merge_strategy,
        unlabeled=tuple(unlabeled),
        support_ids=tuple(support_ids),
        query_ids=tuple(query_ids),
    )


def build_pool(episode: Episode, *, semi: bool = False) -> SupportPool:
    pool = SupportPool(
        [(cid, merge_shots(shots, episode.merge_strategy)) for cid, shots in zip(episode.class_ids, episode.support)]
    )
    if semi and episode.unlabeled:
        pool = pseudo_label_augment(pool, episode.unlabeled)
    return pool


@dataclass
class EpisodeRecord:
    index: int
    accuracy: float
    cross_entropy: float
    selected_fraction: float
    seconds: float
    predictions: list[int] = field(default_factory=list)


def run_episode(dataset: LabeledDataset, config: ProtocolConfig, index: int) -> EpisodeRecord:
    t0 = time.perf_counter()
    ep = sample_episode(dataset, config, index)
    pool = build_pool(ep, semi=config.semi)
    stats = neighbor_stats([q for q, _ in ep.queries], pool)
    mask = selection_mask(stats, config.method.selection, config.odm_k_percent)
    mask, _ = fill_empty(stats, mask)
    scores = batch_scores(stats, mask, config.score_rule)
    truth = np.array([ep.class_ids.index(label) for _, label in ep.queries])
    pred = np.argmax(scores, axis=1)
    logp = log_softmax(scores)[np.arange(len(truth)), truth]
    return EpisodeRecord(
        index=index,
        accuracy=float(np.mean(pred == truth)),
        cross_entropy=float(-np.mean(logp)),
        selected_fraction=float(np.mean(mask)),
        seconds=time.perf_counter() - t0,
        predictions=pred.tolist(),
    )


_WORKER_STATE: dict = {}


def _worker_init(dataset, config):
    _WORKER_STATE["dataset"] = dataset
    _WORKER_STATE["config"] = config


def _worker_run(indices):
    ds, cfg = _WORKER_STATE["dataset"], _WORKER_STATE["config"]
    return [run_episode(ds, cfg, i) for i in indices]


def run_episodes(dataset: LabeledDataset, config: ProtocolConfig, workers: int = 1) -> list[EpisodeRecord]:
    indices = list(range(config.episode_count))
    if workers <= 1:
        return [run_episode(dataset, config, i) for i in indices]
    chunk = max(1, math.ceil(len(indices) / (workers * 4)))
    chunks = [indices[i : i + chunk] for i in range(0, len(indices), chunk)]
    records: dict[int, EpisodeRecord] = {}
    with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init, initargs=(dataset, config)) as ex:
        for batch in ex.map(_worker_run, chunks):
            for rec in batch:
                records[rec.index] = rec
    return [records[i] for i in indices]


def summarize(config: ProtocolConfig, records: Sequence[EpisodeRecord]) -> EvalReport:
    acc = np.array([r.accuracy for r in records], dtype=np.float64)
    n = acc.size
    ci = 1.96 * float(np.std(acc, ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    return EvalReport(
        config=config.to_dict(),
        episodes=n,
        accuracy=float(np.mean(acc)),
        ci95=ci,
        mean_cross_entropy=float(np.mean([r.cross_entropy for r in records])),
        episode_accuracies=acc.tolist(),
        seed=config.seed,
        mean_episode_seconds=float(np.mean([r.seconds for r in records])),
        mean_selected_fraction=float(np.mean([r.selected_fraction for r in records])),
    )


def evaluate(dataset: LabeledDataset, config: ProtocolConfig, workers: int = 1) -> EvalReport:
    """Run ``config.episode_count`` episodes and aggregate them in index order."""
    return summarize(config, run_episodes(dataset, config, workers))


def shuffle_labels(dataset: LabeledDataset, seed: int) -> LabeledDataset:
    """Same images with class labels randomly permuted across items."""
    rng = np.random.default_rng(seed)
    labels = [it.class_id for it in dataset.items]
    perm = rng.permutation(len(labels))
    items = [replace(it, class_id=labels[p]) for it, p in zip(dataset.items, perm)]
    return LabeledDataset(items, dataset.unlabeled)
