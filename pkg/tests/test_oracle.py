import math

import numpy as np
import pytest

from fewshot_nbnn import DescriptorSet, SupportPool, lane_dot
from fewshot_nbnn import oracle
from fewshot_nbnn.core import ScoreKind

AB = SupportPool([("A", [[1, 0]]), ("B", [[0, 1]])])


def test_oracle_cosine_is_lane_order():
    rng = np.random.default_rng(0)
    for d in (1, 5, 8, 9, 16, 64):
        a, b = rng.standard_normal(d), rng.standard_normal(d)
        assert oracle._cos(list(a), list(b)) == lane_dot(a, b)


def test_oracle_mnn_examples():
    assert oracle.oracle_mnn(DescriptorSet([[1, 0], [0.8, 0.6]]), AB) == {(0, 0)}
    assert oracle.oracle_mnn(DescriptorSet([[1, 0]]), SupportPool([("A", [[1, 0]]), ("B", [[0, 1]])])) == {(0, 0)}


def test_oracle_tau_examples():
    t = oracle.oracle_tau([1.0, 0.0], AB)
    assert (t.nearest_class, t.nearest_similarity, t.rival_similarity, t.tau) == (0, 1.0, 0.0, 1.0)
    t = oracle.oracle_tau([0.8, 0.6], AB)
    assert t.nearest_class == 0 and t.tau == pytest.approx(0.2, abs=1e-15)
    h = 1 / math.sqrt(2)
    t = oracle.oracle_tau([h, h], AB)
    assert t.nearest_class == 0 and t.tau == 0.0


def test_oracle_scores_toy():
    Q = DescriptorSet([[1, 0]])
    assert oracle.oracle_scores([0], Q, AB, "nbnn").values == (1.0, 0.0)
    s = oracle.oracle_scores([0], Q, AB, "logodds")
    assert s.values == (1.0, -1.0) and s.kind is ScoreKind.LOG_ODDS
    assert oracle.oracle_scores([0], Q, AB, "rank").values == (1.0, 0.0)


def test_oracle_dmnn_example():
    pool = SupportPool([("A", [[1, 0, 0]]), ("B", [[0, 1, 0]])])
    qi = [0.95, 0.30, math.sqrt(1 - 0.95**2 - 0.30**2)]
    qj = [0.90, 0.10, math.sqrt(1 - 0.90**2 - 0.10**2)]
    Q = DescriptorSet([qi, qj])
    assert oracle.oracle_dmnn(Q, pool) == {(1, 0)}
    s = oracle.oracle_scores([1], Q, pool, "nbnn")
    assert oracle.oracle_predict(s) == 0
    assert s.values == pytest.approx((0.90, 0.10), abs=1e-12)


def test_oracle_odm_and_all():
    Q = DescriptorSet([[1, 0], [0.6, 0.8], [0.1, 1]])
    assert oracle.oracle_all(Q, AB) == {(0, 0), (1, 1), (2, 1)}
    assert oracle.oracle_odm(Q, AB, 34) == {(0, 0), (2, 1)}
    assert oracle.oracle_odm(Q, AB, 100) == oracle.oracle_all(Q, AB)


def test_oracle_shares_no_engine_code():
    import ast
    import inspect

    tree = ast.parse(inspect.getsource(oracle))
    imported = {n.module for n in ast.walk(tree) if isinstance(n, ast.ImportFrom)}
    assert imported <= {"__future__", "decimal", "core"}
