import pickle

import numpy as np
import pytest

from fewshot_nbnn import DescriptorSet, Episode, MergeStrategy, SupportPool, lane_dot, validate_descriptor_set
from fewshot_nbnn.core import (
    ClassScores,
    DataError,
    DimensionMismatch,
    EmptyDescriptorSet,
    IndexOutOfRange,
    NonFiniteComponent,
    ScoreKind,
    SelectedPair,
    SelectionMethod,
    SelectionResult,
    ZeroNormDescriptor,
    unit_rows,
)


def test_validate_examples():
    ds = validate_descriptor_set([[1, 0], [0, 1]])
    assert len(ds) == 2 and ds.dim == 2
    with pytest.raises(DimensionMismatch):
        validate_descriptor_set([[1, 0], [1, 0, 0]])
    with pytest.raises(ZeroNormDescriptor):
        validate_descriptor_set([[0, 0]])


@pytest.mark.parametrize(
    "raw, err",
    [
        ([], EmptyDescriptorSet),
        ([[1.0, float("nan")]], NonFiniteComponent),
        ([[float("inf"), 1.0]], NonFiniteComponent),
        ([[1e200, 1e200]], NonFiniteComponent),
        ([[1e-13, 0.0]], ZeroNormDescriptor),
        ([[]], DimensionMismatch),
    ],
)
def test_validate_rejects(raw, err):
    with pytest.raises(err):
        validate_descriptor_set(raw)


def test_zero_norm_threshold_is_inclusive_above():
    validate_descriptor_set([[2e-12, 0.0]])


def test_descriptor_set_is_immutable_and_round_trips():
    ds = validate_descriptor_set([[1.0, 2.0], [3.0, -4.0]])
    with pytest.raises(ValueError):
        ds.data[0, 0] = 5.0
    assert validate_descriptor_set(ds) is ds
    assert DescriptorSet(ds.data) == ds
    assert pickle.loads(pickle.dumps(ds)) == ds


def test_support_pool_merged_order():
    pool = SupportPool([("A", [[1, 0], [2, 0]]), ("B", [[0, 1]])])
    merged = pool.merged
    assert len(merged) == 3 == len(pool)
    assert [(e.class_id, e.within_class_index) for e in merged] == [("A", 0), ("A", 1), ("B", 0)]
    assert pool.locate(2) == ("B", 0)
    with pytest.raises(IndexOutOfRange):
        pool.locate(3)


def test_support_pool_appended_keep_indices():
    pool = SupportPool([("A", [[1, 0]]), ("B", [[0, 1]])], appended=[(0, np.array([1.0, 0.1]))])
    assert pool.locate(2) == ("A", 1)
    assert list(pool.order) == [0, 2, 1]
    assert list(pool.class_offsets) == [0, 2, 3]
    assert np.array_equal(pool.sorted_unit[1], pool.unit[2])


@pytest.mark.parametrize(
    "classes",
    [
        [("A", [[1, 0]])],
        [("A", [[1, 0]]), ("A", [[0, 1]])],
        [("A", [[1, 0]]), ("B", [[0, 1, 0]])],
    ],
)
def test_support_pool_rejects(classes):
    with pytest.raises(DataError):
        SupportPool(classes)


def test_selection_result_invariants():
    p = lambda q, s: SelectedPair(q, s, 0.5)
    SelectionResult((p(0, 0), p(1, 0)), SelectionMethod.ODM)
    with pytest.raises(DataError):
        SelectionResult((p(0, 0), p(0, 1)), SelectionMethod.ALL)
    with pytest.raises(DataError):
        SelectionResult((p(0, 0), p(1, 0)), SelectionMethod.MNN)


def test_class_scores():
    s = ClassScores(("A", "B"), (1.0, 1.0), ScoreKind.NBNN)
    assert s.argmax() == 0
    with pytest.raises(DataError):
        ClassScores(("A", "B"), (1.0, float("inf")), ScoreKind.NBNN)


def test_episode_validation():
    a = validate_descriptor_set([[1, 0]])
    ok = Episode(2, 1, ("A", "B"), ((a,), (a,)), ((a, "A"),))
    assert ok.merge_strategy is MergeStrategy.UNION
    with pytest.raises(DataError):
        Episode(2, 1, ("A", "A"), ((a,), (a,)), ())
    with pytest.raises(DataError):
        Episode(2, 2, ("A", "B"), ((a,), (a, a)), ())
    with pytest.raises(DataError):
        Episode(2, 1, ("A", "B"), ((a,), (a,)), ((a, "C"),))


def test_merge_strategy_accepts_lowercase():
    assert MergeStrategy("mean") is MergeStrategy.MEAN


def test_lane_dot_order():
    rng = np.random.default_rng(0)
    for d in (1, 3, 8, 13, 64):
        a, b = rng.standard_normal(d), rng.standard_normal(d)
        lanes = [0.0] * 8
        for lane in range(min(8, d)):
            acc = a[lane] * b[lane]
            for k in range(lane + 8, d, 8):
                acc = acc + a[k] * b[k]
            lanes[lane] = acc
        want = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
        assert lane_dot(a, b) == want
        assert lane_dot(a[None], b[None])[0] == want


def test_unit_rows_is_batch_independent():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((7, 5))
    u = unit_rows(x)
    for i in range(7):
        assert np.array_equal(unit_rows(x[i : i + 1])[0], u[i])
