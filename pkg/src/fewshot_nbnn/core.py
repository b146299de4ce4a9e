"""Domain types shared by every module.

All containers are immutable once built: arrays are stored read-only and the
dataclasses are frozen, so instances can be handed to worker processes or
threads without copying.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

ZERO_NORM_THRESHOLD = 1e-12


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class NBNNError(Exception):
    """Base class for every error raised by this package."""


class DataError(NBNNError, ValueError):
    """Input data violates a documented invariant."""


class DimensionMismatch(DataError):
    pass


class NonFiniteComponent(DataError):
    pass


class ZeroNormDescriptor(DataError):
    pass


class EmptyDescriptorSet(DataError):
    pass


class CardinalityMismatch(DataError):
    pass


class InsufficientData(DataError):
    pass


class InvalidSpec(DataError):
    pass


class InvalidPercent(DataError):
    pass


class EmptySelection(DataError):
    pass


class IndexOutOfRange(NBNNError, IndexError):
    pass


# ---------------------------------------------------------------------------
# Enumerations
# ---------------------------------------------------------------------------


class SelectionMethod(str, enum.Enum):
    MNN = "MNN"
    DMNN = "DMNN"
    ODM = "ODM"
    ALL = "ALL"


class ScoreKind(str, enum.Enum):
    NBNN = "NBNN"
    LOG_ODDS = "LOG_ODDS"
    RANK_COUNT = "RANK_COUNT"


class MergeStrategy(str, enum.Enum):
    MEAN = "MEAN"
    UNION = "UNION"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.upper() in cls.__members__:
            return cls[value.upper()]
        return None


class Method(str, enum.Enum):
    """Classifier families; each maps to one selection rule."""

    DN4 = "dn4"
    MN4 = "mn4"
    DMN4 = "dmn4"
    ODM = "odm"

    @property
    def selection(self) -> SelectionMethod:
        return _METHOD_SELECTION[self]


_METHOD_SELECTION = {
    Method.DN4: SelectionMethod.ALL,
    Method.MN4: SelectionMethod.MNN,
    Method.DMN4: SelectionMethod.DMNN,
    Method.ODM: SelectionMethod.ODM,
}


class ScoreRule(str, enum.Enum):
    NBNN = "nbnn"
    LOG_ODDS = "logodds"
    RANK = "rank"

    @property
    def kind(self) -> ScoreKind:
        return {
            ScoreRule.NBNN: ScoreKind.NBNN,
            ScoreRule.LOG_ODDS: ScoreKind.LOG_ODDS,
            ScoreRule.RANK: ScoreKind.RANK_COUNT,
        }[self]


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------


def unit_rows(x: np.ndarray) -> np.ndarray:
    """Row-normalise ``x`` with a fixed, position-independent operation order.

    Each row is first divided by its largest magnitude, which is exact up to
    one correctly rounded quotient per component, so rows that are exact
    multiples of each other give identical bits.  The squared norm is then
    accumulated left to right over the columns, so a row produces the same
    bits whether it is normalised alone or inside a batch.  Every cosine in
    the package is :func:`lane_dot` of two such rows.
    """
    x = np.asarray(x, dtype=np.float64)
    x = x / np.max(np.abs(x), axis=1, keepdims=True)
    sq = x[:, 0] * x[:, 0]
    for k in range(1, x.shape[1]):
        sq = sq + x[:, k] * x[:, k]
    return x / np.sqrt(sq)[:, None]


LANES = 8


def lane_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dot products along the last axis in the package's fixed summation order.

    Component ``k`` goes to lane ``k % 8``; each lane is summed in increasing
    ``k`` (lanes past the dimension hold +0.0) and the eight lanes are combined
    as ``((l0 + l1) + (l2 + l3)) + ((l4 + l5) + (l6 + l7))``.  The order is a
    pure function of the dimension, so a cosine has the same bits in every
    batch and every backend, and one SIMD register evaluates it exactly.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = a.shape[-1]
    lanes = []
    for lane in range(LANES):
        if lane >= d:
            lanes.append(np.zeros(np.broadcast_shapes(a.shape[:-1], b.shape[:-1])))
            continue
        acc = a[..., lane] * b[..., lane]
        for k in range(lane + LANES, d, LANES):
            acc = acc + a[..., k] * b[..., k]
        lanes.append(acc)
    return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))


def _row_norms(x: np.ndarray) -> np.ndarray:
    # huge components overflow to inf here; callers report that as non-finite
    with np.errstate(over="ignore"):
        sq = x[:, 0] * x[:, 0]
        for k in range(1, x.shape[1]):
            sq = sq + x[:, k] * x[:, k]
    return np.sqrt(sq)


def validate_descriptor(values: Iterable[float], dim: int | None = None) -> np.ndarray:
    """Return ``values`` as a read-only float64 vector after validation."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionMismatch(f"descriptor must be a non-empty vector, got shape {arr.shape}")
    if dim is not None and arr.size != dim:
        raise DimensionMismatch(f"descriptor has length {arr.size}, expected {dim}")
    _check_rows(arr[None, :])
    arr.flags.writeable = False
    return arr


def _check_rows(data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        bad = int(np.argwhere(~np.isfinite(data))[0, 0])
        raise NonFiniteComponent(f"descriptor {bad} has a NaN or infinite component")
    norms = _row_norms(data)
    if not np.all(np.isfinite(norms)):
        bad = int(np.argmax(~np.isfinite(norms)))
        raise NonFiniteComponent(f"descriptor {bad} overflows when squared")
    small = norms <= ZERO_NORM_THRESHOLD
    if np.any(small):
        raise ZeroNormDescriptor(f"descriptor {int(np.argmax(small))} has norm <= {ZERO_NORM_THRESHOLD}")


class DescriptorSet:
    """An ordered, non-empty collection of same-length descriptors.

    Index order is part of the identity of a set: ties are always broken in
    favour of the lowest index.
    """

    def __init__(self, data: np.ndarray, *, _validated: bool = False):
        if not _validated:
            data = np.array(data, dtype=np.float64)
            if data.ndim != 2:
                raise DimensionMismatch(f"expected a 2-D array of descriptors, got shape {data.shape}")
            if data.shape[0] == 0:
                raise EmptyDescriptorSet("a descriptor set needs at least one descriptor")
            if data.shape[1] == 0:
                raise DimensionMismatch("descriptor dimension must be positive")
            _check_rows(data)
            data = np.ascontiguousarray(data)
        data.flags.writeable = False
        self._data = data

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "DescriptorSet":
        return validate_descriptor_set(rows)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def dim(self) -> int:
        return self._data.shape[1]

    def __len__(self) -> int:
        return self._data.shape[0]

    def __getitem__(self, i: int) -> np.ndarray:
        return self._data[i]

    def __iter__(self):
        return iter(self._data)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DescriptorSet):
            return NotImplemented
        return self._data.shape == other._data.shape and np.array_equal(self._data, other._data)

    def __hash__(self) -> int:
        return hash((self._data.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"DescriptorSet(n={len(self)}, dim={self.dim})"

    def __getstate__(self):
        return {"data": self._data}

    def __setstate__(self, state):
        data = state["data"].copy()
        data.flags.writeable = False
        self._data = data

    @cached_property
    def unit(self) -> np.ndarray:
        """Unit-norm rows in float64, read-only."""
        u = unit_rows(self._data)
        u.flags.writeable = False
        return u


def validate_descriptor_set(raw: Sequence[Sequence[float]] | np.ndarray) -> DescriptorSet:
    """Validate a list of real vectors and wrap it as a :class:`DescriptorSet`.

    Raises:
        EmptyDescriptorSet: ``raw`` has no rows.
        DimensionMismatch: rows of differing length.
        NonFiniteComponent: a NaN or infinite component.
        ZeroNormDescriptor: a row with Euclidean norm at most 1e-12.
    """
    if isinstance(raw, DescriptorSet):
        return raw
    if isinstance(raw, np.ndarray):
        return DescriptorSet(raw)
    rows = list(raw)
    if not rows:
        raise EmptyDescriptorSet("a descriptor set needs at least one descriptor")
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise DimensionMismatch(f"descriptors have differing lengths {sorted(lengths)}")
    return DescriptorSet(np.array(rows, dtype=np.float64))


def concat_sets(sets: Sequence[DescriptorSet]) -> DescriptorSet:
    dims = {s.dim for s in sets}
    if len(dims) != 1:
        raise DimensionMismatch(f"cannot concatenate sets of dimensions {sorted(dims)}")
    return DescriptorSet(np.concatenate([s.data for s in sets]), _validated=True)


# ---------------------------------------------------------------------------
# Support pool
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoolEntry:
    pool_index: int
    class_id: str
    within_class_index: int
    descriptor: np.ndarray


class SupportPool:
    """Per-class support sets plus the merged pool ``S``.

    Pool indices follow the merged order: every original class set in class
    order, then any descriptors appended later by pseudo-labelling.  Kernels
    operate on the class-sorted view (``sorted_*``), in which each class is one
    contiguous block ordered by within-class index.
    """

    def __init__(
        self,
        classes: Sequence[tuple[str, DescriptorSet]],
        *,
        appended: Sequence[tuple[int, np.ndarray]] = (),
    ):
        classes = [(str(cid), validate_descriptor_set(s)) for cid, s in classes]
        if len(classes) < 2:
            raise DataError("a support pool needs at least two classes")
        ids = [cid for cid, _ in classes]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate class ids in support pool: {ids}")
        dims = {s.dim for _, s in classes}
        if len(dims) != 1:
            raise DimensionMismatch(f"support classes have differing dimensions {sorted(dims)}")
        dim = dims.pop()

        self._class_ids = tuple(ids)
        self._base_sets = tuple(s for _, s in classes)
        n_classes = len(ids)

        blocks = [s.data for s in self._base_sets]
        class_index = [np.full(len(s), c, dtype=np.int64) for c, s in enumerate(self._base_sets)]
        within = [np.arange(len(s), dtype=np.int64) for s in self._base_sets]
        extra_counts = [0] * n_classes
        for c, vec in appended:
            if not 0 <= c < n_classes:
                raise IndexOutOfRange(f"class index {c} out of range")
            vec = validate_descriptor(vec, dim)
            blocks.append(vec[None, :])
            class_index.append(np.array([c], dtype=np.int64))
            within.append(np.array([len(self._base_sets[c]) + extra_counts[c]], dtype=np.int64))
            extra_counts[c] += 1
        self._appended = tuple((int(c), validate_descriptor(v, dim)) for c, v in appended)

        self.vectors = np.ascontiguousarray(np.concatenate(blocks))
        self.class_index = np.concatenate(class_index)
        self.within_index = np.concatenate(within)
        # stable sort keeps within-class order, which is also pool order
        self.order = np.argsort(self.class_index, kind="stable")
        counts = np.bincount(self.class_index, minlength=n_classes)
        self.class_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        for arr in (self.vectors, self.class_index, self.within_index, self.order, self.class_offsets):
            arr.flags.writeable = False
        self.dim = dim

    @classmethod
    def from_mapping(cls, classes: dict[str, Sequence[Sequence[float]] | DescriptorSet]) -> "SupportPool":
        return cls([(cid, validate_descriptor_set(s)) for cid, s in classes.items()])

    @property
    def class_ids(self) -> tuple[str, ...]:
        return self._class_ids

    @property
    def n_classes(self) -> int:
        return len(self._class_ids)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @cached_property
    def class_sets(self) -> tuple[DescriptorSet, ...]:
        """Each class's full descriptor set ``s_c`` (originals then appended)."""
        out = []
        for c, base in enumerate(self._base_sets):
            extra = [v for k, v in self._appended if k == c]
            if extra:
                out.append(DescriptorSet(np.vstack([base.data, *extra]), _validated=True))
            else:
                out.append(base)
        return tuple(out)

    @property
    def classes(self) -> tuple[tuple[str, DescriptorSet], ...]:
        return tuple(zip(self._class_ids, self.class_sets))

    @property
    def base_classes(self) -> tuple[tuple[str, DescriptorSet], ...]:
        """Class sets as supplied at construction, without appended descriptors."""
        return tuple(zip(self._class_ids, self._base_sets))

    @property
    def appended(self) -> tuple[tuple[int, np.ndarray], ...]:
        return self._appended

    @property
    def merged(self) -> list[PoolEntry]:
        return [
            PoolEntry(j, self._class_ids[self.class_index[j]], int(self.within_index[j]), self.vectors[j])
            for j in range(len(self))
        ]

    def locate(self, pool_index: int) -> tuple[str, int]:
        """Map a pool index back to ``(class id, within-class index)``."""
        if not 0 <= pool_index < len(self):
            raise IndexOutOfRange(f"pool index {pool_index} out of range")
        return self._class_ids[self.class_index[pool_index]], int(self.within_index[pool_index])

    @cached_property
    def unit(self) -> np.ndarray:
        u = unit_rows(self.vectors)
        u.flags.writeable = False
        return u

    @cached_property
    def sorted_unit(self) -> np.ndarray:
        u = np.ascontiguousarray(self.unit[self.order])
        u.flags.writeable = False
        return u

    def __getstate__(self):
        return {"classes": list(zip(self._class_ids, self._base_sets)), "appended": list(self._appended)}

    def __setstate__(self, state):
        self.__init__(state["classes"], appended=state["appended"])

    def __repr__(self) -> str:
        return f"SupportPool(classes={list(self._class_ids)}, size={len(self)})"


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectedPair:
    query_index: int
    pool_index: int
    similarity: float
    tau: float | None = None


@dataclass(frozen=True)
class SelectionResult:
    pairs: tuple[SelectedPair, ...]
    method: SelectionMethod

    def __post_init__(self):
        qs = [p.query_index for p in self.pairs]
        if len(set(qs)) != len(qs):
            raise DataError("query indices repeat within a selection")
        if self.method in (SelectionMethod.MNN, SelectionMethod.DMNN):
            ps = [p.pool_index for p in self.pairs]
            if len(set(ps)) != len(ps):
                raise DataError(f"pool indices repeat within a {self.method.value} selection")

    @property
    def query_indices(self) -> list[int]:
        return [p.query_index for p in self.pairs]

    def as_index_pairs(self) -> set[tuple[int, int]]:
        return {(p.query_index, p.pool_index) for p in self.pairs}

    def __len__(self) -> int:
        return len(self.pairs)

    def validate_against(self, n_queries: int, pool: SupportPool) -> None:
        for p in self.pairs:
            if not 0 <= p.query_index < n_queries:
                raise IndexOutOfRange(f"query index {p.query_index} out of range")
            if not 0 <= p.pool_index < len(pool):
                raise IndexOutOfRange(f"pool index {p.pool_index} out of range")


@dataclass(frozen=True)
class TauRecord:
    query_index: int
    nearest_class: int
    nearest_similarity: float
    rival_similarity: float
    tau: float


@dataclass(frozen=True)
class ClassScores:
    class_ids: tuple[str, ...]
    values: tuple[float, ...]
    kind: ScoreKind

    def __post_init__(self):
        if len(self.class_ids) != len(self.values):
            raise DataError("one score per class is required")
        if not all(math.isfinite(v) for v in self.values):
            raise DataError("class scores must be finite")

    def argmax(self) -> int:
        # first maximum wins
        return int(np.argmax(np.asarray(self.values)))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.class_ids, self.values))


@dataclass(frozen=True)
class Episode:
    n_ways: int
    k_shots: int
    class_ids: tuple[str, ...]
    support: tuple[tuple[DescriptorSet, ...], ...]
    queries: tuple[tuple[DescriptorSet, str], ...]
    merge_strategy: MergeStrategy = MergeStrategy.UNION
    unlabeled: tuple[DescriptorSet, ...] = ()
    support_ids: tuple[tuple[str, ...], ...] = ()
    query_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n_ways < 2 or self.k_shots < 1:
            raise DataError("an episode needs N >= 2 ways and K >= 1 shots")
        if len(set(self.class_ids)) != self.n_ways or len(self.class_ids) != self.n_ways:
            raise DataError("an episode needs exactly N distinct class ids")
        if len(self.support) != self.n_ways or any(len(s) != self.k_shots for s in self.support):
            raise DataError("each class needs exactly K support sets")
        known = set(self.class_ids)
        for _, label in self.queries:
            if label not in known:
                raise DataError(f"query label {label!r} is not a support class")


@dataclass
class EvalReport:
    config: dict
    episodes: int
    accuracy: float
    ci95: float
    mean_cross_entropy: float
    episode_accuracies: list[float]
    seed: int
    mean_episode_seconds: float = 0.0
    mean_selected_fraction: float = field(default=0.0)

    TIMING_FIELDS = ("mean_episode_seconds",)

    def to_dict(self, *, include_timing: bool = True) -> dict:
        d = {
            "config": self.config,
            "episodes": self.episodes,
            "accuracy": self.accuracy,
            "ci95": self.ci95,
            "mean_cross_entropy": self.mean_cross_entropy,
            "mean_selected_fraction": self.mean_selected_fraction,
            "seed": self.seed,
            "episode_accuracies": self.episode_accuracies,
        }
        if include_timing:
            d["mean_episode_seconds"] = self.mean_episode_seconds
        return d

    def to_json(self, *, include_timing: bool = True, indent: int | None = 2) -> str:
        import json

        return json.dumps(self.to_dict(include_timing=include_timing), indent=indent, sort_keys=True)
