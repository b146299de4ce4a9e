"""Query-descriptor selection: MNN, DMNN, ODM and the select-everything baseline.

The mask functions work on :class:`NeighborStats` covering any number of query
images at once and return a boolean mask over the stacked rows.  The public
``*_select`` functions wrap them for a single query image.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from .core import (
    DescriptorSet,
    InvalidPercent,
    SelectedPair,
    SelectionMethod,
    SelectionResult,
    SupportPool,
    TauRecord,
    validate_descriptor,
    validate_descriptor_set,
)
from .similarity import NeighborStats, neighbor_stats


def odm_count(n: int, k_percent: float) -> int:
    """``ceil(n * k / 100)``, evaluated on the decimal value of ``k``."""
    check_percent(k_percent)
    return max(1, math.ceil(n * Fraction(str(float(k_percent))) / 100))


def check_percent(k_percent) -> None:
    try:
        k = float(k_percent)
    except (TypeError, ValueError):
        raise InvalidPercent(f"k_percent must be a number, got {k_percent!r}") from None
    if not (0.0 < k <= 100.0):
        raise InvalidPercent(f"k_percent must lie in (0, 100], got {k_percent!r}")


def all_mask(stats: NeighborStats) -> np.ndarray:
    return np.ones(stats.n_rows, dtype=bool)


def mnn_mask(stats: NeighborStats) -> np.ndarray:
    """Rows whose nearest pool descriptor points back at them."""
    back = stats.back_row[stats.image_of_row, stats.nn_index]
    return back == stats.local_row


def dmnn_mask(stats: NeighborStats) -> np.ndarray:
    """One row per (image, nearest pool descriptor) group: the largest tau.

    Ties on tau go to the lowest query index.
    """
    rows = np.arange(stats.n_rows)
    img = stats.image_of_row
    order = np.lexsort((rows, -stats.tau, stats.nn_index, img))
    g_img, g_nn = img[order], stats.nn_index[order]
    first = np.empty(order.size, dtype=bool)
    first[:1] = True
    first[1:] = (g_img[1:] != g_img[:-1]) | (g_nn[1:] != g_nn[:-1])
    mask = np.zeros(stats.n_rows, dtype=bool)
    mask[order[first]] = True
    return mask


def odm_mask(stats: NeighborStats, k_percent: float) -> np.ndarray:
    """Top ``ceil(M * k / 100)`` rows of each image by tau (lowest index on ties)."""
    check_percent(k_percent)
    rows = np.arange(stats.n_rows)
    img = stats.image_of_row
    order = np.lexsort((rows, -stats.tau, img))
    counts = np.diff(stats.img_offsets)
    keep = np.array([odm_count(int(n), k_percent) for n in counts], dtype=np.int64)
    # rank of each sorted row inside its image
    rank = np.arange(order.size) - np.repeat(stats.img_offsets[:-1], counts)
    mask = np.zeros(stats.n_rows, dtype=bool)
    mask[order[rank < np.repeat(keep, counts)]] = True
    return mask


def selection_mask(stats: NeighborStats, method: SelectionMethod, k_percent: float | None = None) -> np.ndarray:
    method = SelectionMethod(method)
    if method is SelectionMethod.ALL:
        return all_mask(stats)
    if method is SelectionMethod.MNN:
        return mnn_mask(stats)
    if method is SelectionMethod.DMNN:
        return dmnn_mask(stats)
    if k_percent is None:
        raise InvalidPercent("ODM needs k_percent")
    return odm_mask(stats, k_percent)


def result_from_mask(
    stats: NeighborStats, mask: np.ndarray, method: SelectionMethod, image: int = 0
) -> SelectionResult:
    lo, hi = int(stats.img_offsets[image]), int(stats.img_offsets[image + 1])
    pairs = tuple(
        SelectedPair(
            query_index=int(r - lo),
            pool_index=int(stats.nn_index[r]),
            similarity=float(stats.nn_sim[r]),
            tau=float(stats.tau[r]),
        )
        for r in np.flatnonzero(mask[lo:hi]) + lo
    )
    return SelectionResult(pairs=pairs, method=SelectionMethod(method))


def _select(Q, pool: SupportPool, method: SelectionMethod, k_percent=None) -> SelectionResult:
    Q = validate_descriptor_set(Q)
    stats = neighbor_stats(Q, pool)
    return result_from_mask(stats, selection_mask(stats, method, k_percent), method)


def mnn_select(Q: DescriptorSet, pool: SupportPool) -> SelectionResult:
    """Mutual nearest neighbour pairs between ``Q`` and the merged pool."""
    return _select(Q, pool, SelectionMethod.MNN)


def dmnn_select(Q: DescriptorSet, pool: SupportPool) -> SelectionResult:
    """Per nearest-neighbour group, the query descriptor with the largest tau."""
    return _select(Q, pool, SelectionMethod.DMNN)


def odm_select(Q: DescriptorSet, pool: SupportPool, k_percent: float) -> SelectionResult:
    """The top ``k_percent`` query descriptors by tau; pool indices may repeat."""
    check_percent(k_percent)
    return _select(Q, pool, SelectionMethod.ODM, k_percent)


def all_select(Q: DescriptorSet, pool: SupportPool) -> SelectionResult:
    return _select(Q, pool, SelectionMethod.ALL)


def tau_of(q, pool: SupportPool) -> TauRecord:
    """Relative closeness of one descriptor to its nearest class versus the rest."""
    q = validate_descriptor(q)
    stats = neighbor_stats(DescriptorSet(q[None, :]), pool)
    return TauRecord(
        query_index=0,
        nearest_class=int(stats.nn_class[0]),
        nearest_similarity=float(stats.nn_sim[0]),
        rival_similarity=float(stats.rival_sim[0]),
        tau=float(stats.tau[0]),
    )


def tau_records(Q: DescriptorSet, pool: SupportPool) -> list[TauRecord]:
    stats = neighbor_stats(validate_descriptor_set(Q), pool)
    return [
        TauRecord(i, int(stats.nn_class[i]), float(stats.nn_sim[i]), float(stats.rival_sim[i]), float(stats.tau[i]))
        for i in range(stats.n_rows)
    ]
