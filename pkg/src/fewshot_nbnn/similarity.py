"""Exact cosine similarity and nearest-neighbour search.

Every cosine in the package has the same definition: both vectors are scaled
to unit length (:func:`fewshot_nbnn.core.unit_rows`) and their products are
summed in float64 in the fixed lane order of :func:`fewshot_nbnn.core.lane_dot`.
That makes a similarity a pure function of its two operands, bitwise,
independent of batch position or backend, which is what lets the oracle
comparisons be exact.

The batched statistics used by selection and scoring come from a kernel
backend chosen at import time: the compiled ``_kernels`` extension when it is
built, otherwise the numpy fallback.  Set ``FEWSHOT_NBNN_BACKEND=python`` to
force the fallback.
"""
from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels_py
from .core import DescriptorSet, DimensionMismatch, SupportPool, lane_dot, unit_rows, validate_descriptor

_kernels = None
if os.environ.get("FEWSHOT_NBNN_BACKEND", "").lower() != "python":
    try:
        from . import _kernels  # type: ignore[no-redef]
    except ImportError:  # extension not built
        _kernels = None

BACKEND = "compiled" if _kernels is not None else "python"
_BACKENDS = {"python": _kernels_py}
if _kernels is not None:
    _BACKENDS["compiled"] = _kernels


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


@contextmanager
def use_backend(name: str):
    """Temporarily route :func:`neighbor_stats` through backend ``name``."""
    global BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} is not available (have {available_backends()})")
    previous, BACKEND = BACKEND, name
    try:
        yield
    finally:
        BACKEND = previous


def cosine(a, b) -> float:
    """Cosine similarity of two descriptors.

    Symmetric bit for bit and invariant to positive rescaling of either
    operand up to rounding.

    >>> cosine([1.0, 1.0], [1.0, 0.0])
    0.7071067811865475
    """
    a = validate_descriptor(a)
    b = validate_descriptor(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"cannot compare descriptors of length {a.size} and {b.size}")
    return float(lane_dot(unit_rows(a[None, :]), unit_rows(b[None, :]))[0])


def _as_set(x) -> DescriptorSet:
    return x if isinstance(x, DescriptorSet) else DescriptorSet(np.asarray(x, dtype=np.float64))


def similarity_matrix(Q, S) -> np.ndarray:
    """Dense ``|Q| x |S|`` matrix of cosines; entry (i, j) equals ``cosine(Q[i], S[j])``."""
    Q, S = _as_set(Q), _as_set(S)
    if Q.dim != S.dim:
        raise DimensionMismatch(f"query dim {Q.dim} != support dim {S.dim}")
    return lane_dot(Q.unit[:, None, :], S.unit[None, :, :])


def nearest_in_set(q, descriptors) -> tuple[int, float]:
    """Index and similarity of the most similar member; lowest index on ties."""
    descriptors = _as_set(descriptors)
    q = validate_descriptor(q)
    if q.size != descriptors.dim:
        raise DimensionMismatch(f"query dim {q.size} != set dim {descriptors.dim}")
    row = similarity_matrix(q[None, :], descriptors)[0]
    j = int(np.argmax(row))
    return j, float(row[j])


@dataclass(frozen=True)
class NeighborStats:
    """Nearest-neighbour summary of one or more query images against a pool.

    Rows are the query descriptors of all images stacked in order; image ``m``
    owns rows ``img_offsets[m]:img_offsets[m+1]``.

    Attributes:
        class_max: (rows, N) cosine to the nearest descriptor of each class.
        class_arg: (rows, N) pool index of that nearest descriptor.
        nn_index: (rows,) pool index of the nearest pool descriptor.
        nn_class: (rows,) its class, the nearest class c*.
        nn_sim: (rows,) its cosine.
        rival_sim: (rows,) best cosine outside class c*.
        tau: (rows,) relative closeness ``nn_sim - rival_sim``.
        back_row: (images, |S|) image-local row of each pool descriptor's
            nearest query descriptor.
    """

    img_offsets: np.ndarray
    class_max: np.ndarray
    class_arg: np.ndarray
    nn_index: np.ndarray
    nn_class: np.ndarray
    nn_sim: np.ndarray
    rival_sim: np.ndarray
    tau: np.ndarray
    back_row: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.class_max.shape[0]

    @property
    def n_images(self) -> int:
        return len(self.img_offsets) - 1

    @property
    def image_of_row(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_images), np.diff(self.img_offsets))

    @property
    def local_row(self) -> np.ndarray:
        return np.arange(self.n_rows) - np.repeat(self.img_offsets[:-1], np.diff(self.img_offsets))

    def rival_per_class(self) -> np.ndarray:
        """(rows, N) best cosine outside each class, i.e. to ``S \\ s_c``."""
        cm = self.class_max
        n = cm.shape[1]
        order = np.argsort(-cm, axis=1, kind="stable")
        top1 = np.take_along_axis(cm, order[:, :1], axis=1)
        top2 = np.take_along_axis(cm, order[:, 1:2], axis=1)
        rival = np.broadcast_to(top1, cm.shape).copy()
        is_top = np.arange(n)[None, :] == order[:, :1]
        rival[is_top] = top2[:, 0]
        return rival


def neighbor_stats(
    queries: DescriptorSet | Sequence[DescriptorSet],
    pool: SupportPool,
    *,
    backend: str | None = None,
) -> NeighborStats:
    """Compute :class:`NeighborStats` for one query set or a list of them."""
    sets = [queries] if isinstance(queries, DescriptorSet) else list(queries)
    for s in sets:
        if s.dim != pool.dim:
            raise DimensionMismatch(f"query dim {s.dim} != pool dim {pool.dim}")
    counts = np.array([len(s) for s in sets], dtype=np.int64)
    img_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    kernels = _BACKENDS[backend or BACKEND]
    class_max, sorted_arg, back_row = kernels.neighbor_stats(
        [s.unit for s in sets], pool.sorted_unit, pool.class_offsets
    )
    class_arg = pool.order[sorted_arg]
    # kernel columns are class-sorted; reorder to pool index order
    back_row_pool = np.empty_like(back_row)
    back_row_pool[:, pool.order] = back_row

    nn_class, nn_sim, rival_sim = kernels.nn_summary(class_max)
    nn_index = np.take_along_axis(class_arg, nn_class[:, None], axis=1)[:, 0]
    return NeighborStats(
        img_offsets=img_offsets,
        class_max=class_max,
        class_arg=class_arg,
        nn_index=nn_index,
        nn_class=nn_class,
        nn_sim=nn_sim,
        rival_sim=rival_sim,
        tau=nn_sim - rival_sim,
        back_row=back_row_pool,
    )
