"""Scoring rules, the end-to-end classifier and pseudo-label pool augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    ClassScores,
    DescriptorSet,
    EmptySelection,
    IndexOutOfRange,
    Method,
    ScoreKind,
    ScoreRule,
    SelectionMethod,
    SelectionResult,
    SupportPool,
    concat_sets,
    validate_descriptor_set,
)
from .selection import mnn_mask, result_from_mask, selection_mask
from .similarity import NeighborStats, neighbor_stats


# ---------------------------------------------------------------------------
# Batched scoring over stacked query images
# ---------------------------------------------------------------------------


def _segment_sums(values: np.ndarray, mask: np.ndarray, img_offsets: np.ndarray) -> np.ndarray:
    # excluded rows contribute exact zeros, so this is the sum over selected rows
    masked = np.where(mask[:, None], values, 0.0)
    return np.add.reduceat(masked, img_offsets[:-1], axis=0)


def batch_scores(stats: NeighborStats, mask: np.ndarray, rule: ScoreRule) -> np.ndarray:
    """(images, N) scores for every query image under ``rule``."""
    rule = ScoreRule(rule)
    if rule is ScoreRule.NBNN:
        per_row = stats.class_max
    elif rule is ScoreRule.LOG_ODDS:
        per_row = stats.class_max - stats.rival_per_class()
    else:
        per_row = np.zeros_like(stats.class_max)
        per_row[np.arange(stats.n_rows), stats.nn_class] = 1.0
    return _segment_sums(per_row, mask, stats.img_offsets)


def fill_empty(stats: NeighborStats, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Replace empty per-image selections with every row of that image."""
    counts = np.add.reduceat(mask.astype(np.int64), stats.img_offsets[:-1])
    empty = counts == 0
    if np.any(empty):
        mask = mask | empty[stats.image_of_row]
    return mask, empty


def log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Public per-image scoring
# ---------------------------------------------------------------------------


def _selection_rows(selection: SelectionResult, Q: DescriptorSet, pool: SupportPool) -> np.ndarray:
    selection.validate_against(len(Q), pool)
    if len(selection) == 0:
        raise EmptySelection("the selection is empty")
    mask = np.zeros(len(Q), dtype=bool)
    mask[selection.query_indices] = True
    return mask


def nbnn_score(selection: SelectionResult, Q: DescriptorSet, pool: SupportPool) -> ClassScores:
    """Sum over selected descriptors of the cosine to each class's nearest descriptor."""
    Q = validate_descriptor_set(Q)
    mask = _selection_rows(selection, Q, pool)
    vals = batch_scores(neighbor_stats(Q, pool), mask, ScoreRule.NBNN)[0]
    return ClassScores(pool.class_ids, tuple(float(v) for v in vals), ScoreKind.NBNN)


def log_odds_score(selection: SelectionResult, Q: DescriptorSet, pool: SupportPool) -> ClassScores:
    """Sum over selected descriptors of (cosine to ``s_c``) minus (cosine to ``S \\ s_c``)."""
    Q = validate_descriptor_set(Q)
    mask = _selection_rows(selection, Q, pool)
    vals = batch_scores(neighbor_stats(Q, pool), mask, ScoreRule.LOG_ODDS)[0]
    return ClassScores(pool.class_ids, tuple(float(v) for v in vals), ScoreKind.LOG_ODDS)


def rank_counts(selection: SelectionResult, pool: SupportPool) -> ClassScores:
    if len(selection) == 0:
        raise EmptySelection("the selection is empty")
    selection.validate_against(max(p.query_index for p in selection.pairs) + 1, pool)
    counts = np.zeros(pool.n_classes)
    for p in selection.pairs:
        counts[pool.class_index[p.pool_index]] += 1
    return ClassScores(pool.class_ids, tuple(float(v) for v in counts), ScoreKind.RANK_COUNT)


def rank_classify(selection: SelectionResult, pool: SupportPool) -> str:
    """Class receiving the most nearest-class votes; lowest class index on ties."""
    scores = rank_counts(selection, pool)
    return pool.class_ids[scores.argmax()]


def softmax_probs(scores: ClassScores | Sequence[float]) -> np.ndarray:
    values = np.asarray(scores.values if isinstance(scores, ClassScores) else scores, dtype=np.float64)
    e = np.exp(values - values.max())
    return e / e.sum()


def cross_entropy(probs: Sequence[float], true_index: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= true_index < probs.size:
        raise IndexOutOfRange(f"true class index {true_index} out of range for {probs.size} classes")
    p = float(probs[true_index])
    return math.inf if p <= 0.0 else -math.log(p)


# ---------------------------------------------------------------------------
# End to end
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Classification:
    predicted: str
    predicted_index: int
    scores: ClassScores
    selection: SelectionResult
    fallback: bool = False


def classify(
    Q: DescriptorSet,
    pool: SupportPool,
    method: Method | str = Method.MN4,
    score_rule: ScoreRule | str = ScoreRule.NBNN,
    k_percent: float | None = None,
) -> Classification:
    """Select query descriptors with ``method``, score them with ``score_rule``.

    An empty selection falls back to using every descriptor and sets
    ``fallback``.  The argmax breaks ties toward the lower class index.
    """
    Q = validate_descriptor_set(Q)
    method, score_rule = Method(method), ScoreRule(score_rule)
    stats = neighbor_stats(Q, pool)
    mask = selection_mask(stats, method.selection, k_percent)
    mask, empty = fill_empty(stats, mask)
    sel_method = SelectionMethod.ALL if empty[0] else method.selection
    scores = batch_scores(stats, mask, score_rule)[0]
    idx = int(np.argmax(scores))
    return Classification(
        predicted=pool.class_ids[idx],
        predicted_index=idx,
        scores=ClassScores(pool.class_ids, tuple(float(v) for v in scores), score_rule.kind),
        selection=result_from_mask(stats, mask, sel_method),
        fallback=bool(empty[0]),
    )


def pseudo_label_augment(pool: SupportPool, unlabeled: Sequence[DescriptorSet]) -> SupportPool:
    """Attach each unlabeled descriptor that is a mutual nearest neighbour of a
    support descriptor to that descriptor's class.

    One pass against the original pool; appended descriptors follow all
    existing pool entries so earlier pool indices are unchanged.
    """
    if not unlabeled:
        return pool
    U = concat_sets([validate_descriptor_set(u) for u in unlabeled])
    stats = neighbor_stats(U, pool)
    picked = np.flatnonzero(mnn_mask(stats))
    if picked.size == 0:
        return pool
    new = [(int(pool.class_index[stats.nn_index[u]]), U.data[u]) for u in picked]
    return SupportPool(list(pool.base_classes), appended=list(pool.appended) + new)
