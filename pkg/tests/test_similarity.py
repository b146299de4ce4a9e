import math

import numpy as np
import pytest

from fewshot_nbnn import DescriptorSet, SupportPool, cosine, nearest_in_set, similarity_matrix, use_backend
from fewshot_nbnn import _kernels_py
from fewshot_nbnn.core import DimensionMismatch, ZeroNormDescriptor
from fewshot_nbnn.similarity import available_backends, neighbor_stats

from _instances import instances


def test_cosine_examples():
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine([2, 0], [1, 0]) == 1.0
    assert cosine([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_cosine_errors():
    with pytest.raises(DimensionMismatch):
        cosine([1, 0], [1, 0, 0])
    with pytest.raises(ZeroNormDescriptor):
        cosine([0, 0], [1, 0])


def test_cosine_symmetric_and_scale_invariant():
    rng = np.random.default_rng(3)
    for _ in range(200):
        d = int(rng.integers(1, 20))
        a, b = rng.standard_normal(d), rng.standard_normal(d)
        assert cosine(a, b) == cosine(b, a)
        for lam in (1e-3, 1.0, 1e3):
            assert abs(cosine(lam * a, b) - cosine(a, b)) <= 1e-12


def test_similarity_matrix_examples():
    eye = [[1, 0], [0, 1]]
    assert np.array_equal(similarity_matrix(eye, eye), np.eye(2))
    assert similarity_matrix([[1, 0]], [[1, 0]]).tolist() == [[1.0]]


def test_similarity_matrix_matches_scalar_loop():
    rng = np.random.default_rng(5)
    Q, S = rng.standard_normal((5, 4)), rng.standard_normal((7, 4))
    M = similarity_matrix(Q, S)
    for i in range(5):
        for j in range(7):
            direct = float(np.dot(Q[i], S[j]) / (np.linalg.norm(Q[i]) * np.linalg.norm(S[j])))
            assert abs(M[i, j] - direct) <= 1e-12
            assert M[i, j] == cosine(Q[i], S[j])


def test_similarity_matrix_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        similarity_matrix([[1, 0]], [[1, 0, 0]])


def test_nearest_in_set_examples():
    j, s = nearest_in_set([1, 0], [[0, 1], [1, 0.1]])
    assert j == 1 and s == pytest.approx(0.99503719, abs=1e-8)
    assert nearest_in_set([1, 0], [[1, 0], [1, 0]]) == (0, 1.0)
    assert nearest_in_set([3, 4], [[1, 2]]) == (0, cosine([3, 4], [1, 2]))


def test_nearest_in_set_agrees_with_matrix_argmax():
    rng = np.random.default_rng(9)
    for _ in range(100):
        S = rng.integers(-2, 3, size=(int(rng.integers(1, 12)), 3)).astype(float)
        S[np.linalg.norm(S, axis=1) == 0, 0] = 1
        q = rng.standard_normal(3)
        row = similarity_matrix(q[None], S)[0]
        assert nearest_in_set(q, S) == (int(np.argmax(row)), float(row.max()))


def test_self_nearest():
    rng = np.random.default_rng(11)
    S = rng.standard_normal((10, 6))
    for i in range(10):
        assert nearest_in_set(S[i], S)[1] >= 1 - 1e-12


def _brute_stats(qs, pool):
    """Per-row class maxima and back-pointers straight from similarity_matrix."""
    out_max, out_arg, back = [], [], []
    for Q in qs:
        M = similarity_matrix(Q, DescriptorSet(pool.vectors))
        cm, ca = [], []
        for c in range(pool.n_classes):
            members = np.flatnonzero(pool.class_index == c)
            # lowest within-class index wins: members are in pool order already
            sub = M[:, members]
            cm.append(sub.max(axis=1))
            ca.append(members[np.argmax(sub, axis=1)])
        out_max.append(np.stack(cm, axis=1))
        out_arg.append(np.stack(ca, axis=1))
        back.append(np.argmax(M, axis=0))
    return np.concatenate(out_max), np.concatenate(out_arg), np.stack(back)


@pytest.mark.parametrize("backend", available_backends())
def test_neighbor_stats_matches_brute_force(backend):
    rng = np.random.default_rng(21)
    with use_backend(backend):
        for Q, pool in instances(21, 150):
            extra = DescriptorSet(rng.standard_normal((int(rng.integers(1, 30)), Q.dim)))
            st = neighbor_stats([Q, extra], pool)
            cm, ca, back = _brute_stats([Q, extra], pool)
            assert np.array_equal(st.class_max, cm)
            assert np.array_equal(st.class_arg, ca)
            assert np.array_equal(st.back_row, back)
            assert np.array_equal(st.tau, st.nn_sim - st.rival_sim)


def test_neighbor_stats_dimension_mismatch():
    pool = SupportPool([("A", [[1, 0]]), ("B", [[0, 1]])])
    with pytest.raises(DimensionMismatch):
        neighbor_stats(DescriptorSet([[1, 0, 0]]), pool)


def test_use_backend_rejects_unknown():
    with pytest.raises(ValueError):
        with use_backend("gpu"):
            pass


# --- compiled kernel against the numpy fallback, bit for bit ----------------

try:
    from fewshot_nbnn import _kernels as kernels
except ImportError:
    kernels = None
compiled = pytest.mark.skipif(kernels is None, reason="compiled extension not built")
SCREENS = kernels.available_screens() if kernels else []


def _kernel_instances(seed, count):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        dim = int(rng.integers(1, 80))
        kind = int(rng.integers(3))

        def make(n):
            if kind == 0:
                x = rng.standard_normal((n, dim))
            elif kind == 1:
                x = rng.integers(-2, 3, (n, dim)).astype(float)
            else:
                x = rng.standard_normal((1, dim)) + 0.01 * rng.standard_normal((n, dim))
            x[np.linalg.norm(x, axis=1) < 1e-6, 0] = 1.0
            return x

        n_classes = int(rng.integers(2, 6))
        pool = SupportPool([(f"c{c}", make(int(rng.integers(1, 700)))) for c in range(n_classes)])
        imgs = [DescriptorSet(make(int(rng.integers(1, 600)))) for _ in range(int(rng.integers(1, 4)))]
        yield [d.unit for d in imgs], pool.sorted_unit, pool.class_offsets


@compiled
@pytest.mark.parametrize("screen", SCREENS)
def test_compiled_kernel_is_bitwise_equal_to_fallback(screen):
    for args in _kernel_instances(7, 60):
        ref = _kernels_py.neighbor_stats(*args)
        out = kernels.neighbor_stats(*args, screen=screen)
        for a, b in zip(ref, out):
            assert np.array_equal(a, b)


@compiled
def test_compiled_kernel_realistic_shape():
    rng = np.random.default_rng(2)
    protos = rng.standard_normal((6, 64))
    sets = [protos[c % 6] + 0.8 * rng.standard_normal((361, 64)) for c in range(6)]
    pool = SupportPool([(f"c{c}", sets[c]) for c in range(5)])
    qs = [DescriptorSet(protos[m % 6] + 0.8 * rng.standard_normal((361, 64))).unit for m in range(4)]
    ref = _kernels_py.neighbor_stats(qs, pool.sorted_unit, pool.class_offsets)
    for screen in kernels.available_screens():
        out = kernels.neighbor_stats(qs, pool.sorted_unit, pool.class_offsets, screen=screen)
        for a, b in zip(ref, out):
            assert np.array_equal(a, b)


@compiled
def test_nn_summary_backends_agree():
    rng = np.random.default_rng(4)
    cm = rng.integers(-3, 4, size=(500, 4)).astype(float)
    for a, b in zip(_kernels_py.nn_summary(cm), kernels.nn_summary(cm)):
        assert np.array_equal(a, b)


@compiled
def test_unknown_screen():
    with pytest.raises(ValueError):
        kernels.neighbor_stats([np.eye(2)], np.eye(2), np.array([0, 1, 2]), screen="fp8")
