"""Acceptance criteria, one test per criterion.

Each test prints a single PASS/FAIL line with the measured quantity and the
threshold it is held to; the lines are repeated in the terminal summary.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from fewshot_nbnn import (
    DescriptorSet,
    Method,
    ProtocolConfig,
    ScoreRule,
    SupportPool,
    SynthSpec,
    all_select,
    classify,
    decode_descriptor_file,
    dmnn_select,
    encode_descriptor_file,
    evaluate,
    log_odds_score,
    mnn_select,
    nbnn_score,
    odm_select,
    rank_classify,
    read_descriptor_file,
    softmax_probs,
    synth_generate,
    tau_of,
)
from fewshot_nbnn.bench import Workload, time_episodes
from fewshot_nbnn.core import EmptyDescriptorSet, ZeroNormDescriptor
from fewshot_nbnn.episodes import shuffle_labels
from fewshot_nbnn.fileio import BadMagic, TrailingBytes, TruncatedPayload, UnsupportedVersion
from fewshot_nbnn.oracle import (
    oracle_dmnn,
    oracle_mnn,
    oracle_odm,
    oracle_predict,
    oracle_scores,
    oracle_tau,
)

from _instances import instances

FIX = Path(__file__).parent / "fixtures"
SEED = 20240601
N_INSTANCES = 1000
EPISODES = 600


def pts(x):
    return f"{100 * x:.2f}%"


# --- 1, 2, 3: exact rules on random instances --------------------------------


def test_criterion_01_oracle_equivalence(verdict):
    rng = np.random.default_rng(SEED + 1)
    t0 = time.perf_counter()
    mismatches = []
    worst = 0.0
    for n, (Q, pool) in enumerate(instances(SEED, N_INSTANCES)):
        k = float(rng.choice([0.5, 10, 25, 33.3, 50, 75, 100]))
        if mnn_select(Q, pool).as_index_pairs() != oracle_mnn(Q, pool):
            mismatches.append((n, "mnn"))
        if dmnn_select(Q, pool).as_index_pairs() != oracle_dmnn(Q, pool):
            mismatches.append((n, "dmnn"))
        if odm_select(Q, pool, k).as_index_pairs() != oracle_odm(Q, pool, k):
            mismatches.append((n, "odm"))
        for i in range(len(Q)):
            got, want = tau_of(Q.data[i], pool), oracle_tau(Q.unit[i], pool)
            if got.nearest_class != want.nearest_class:
                mismatches.append((n, "tau class"))
            worst = max(worst, abs(got.tau - want.tau), abs(got.nearest_similarity - want.nearest_similarity))
        for sel in (all_select(Q, pool), mnn_select(Q, pool), odm_select(Q, pool, k)):
            idx = sel.query_indices
            for fn, rule in ((nbnn_score, "nbnn"), (log_odds_score, "logodds")):
                diff = np.abs(np.array(fn(sel, Q, pool).values) - np.array(oracle_scores(idx, Q, pool, rule).values))
                worst = max(worst, float(diff.max()))
            want = pool.class_ids[oracle_predict(oracle_scores(idx, Q, pool, "rank"))]
            if rank_classify(sel, pool) != want:
                mismatches.append((n, "rank"))
    elapsed = time.perf_counter() - t0
    ok = not mismatches and worst <= 1e-9 and elapsed < 30.0
    verdict(1, "oracle equivalence", ok,
            f"{N_INSTANCES} instances, selection mismatches={len(mismatches)}, max score diff={worst:.2e} (<= 1e-9), "
            f"runtime={elapsed:.1f}s (< 30s)")
    assert not mismatches, mismatches[:10]
    assert worst <= 1e-9
    assert elapsed < 30.0


def test_criterion_02_mnn_structure(verdict):
    bad = 0
    for Q, pool in instances(SEED, N_INSTANCES):
        sel = mnn_select(Q, pool)
        qs = [p.query_index for p in sel.pairs]
        ss = [p.pool_index for p in sel.pairs]
        if not qs or len(set(qs)) != len(qs) or len(set(ss)) != len(ss):
            bad += 1
    verdict(2, "MNN non-empty partial matching", bad == 0, f"violations={bad} of {N_INSTANCES} (exact)")
    assert bad == 0


def _scaled(Q, pool, lam):
    return DescriptorSet(Q.data * lam), SupportPool([(c, DescriptorSet(s.data * lam)) for c, s in zip(pool.class_ids, pool.class_sets)])


def test_criterion_03_identities(verdict):
    rng = np.random.default_rng(SEED + 3)
    dn4_diff = lodds_diff = sum_diff = shift_diff = 0.0
    flips = 0
    for Q, pool in instances(SEED, N_INSTANCES):
        U = Q.unit
        M = np.array([[float(np.dot(q, v)) for v in pool.unit] for q in U])
        own = np.stack([M[:, pool.class_index == c].max(axis=1) for c in range(pool.n_classes)], axis=1)
        rival = np.stack([M[:, pool.class_index != c].max(axis=1) for c in range(pool.n_classes)], axis=1)
        # class term of the selected-set score with every row selected is the DN4 sum
        sel = all_select(Q, pool)
        phi = np.array(nbnn_score(sel, Q, pool).values)
        dn4_diff = max(dn4_diff, float(np.abs(phi - own.sum(axis=0)).max()))
        for s2 in (sel, mnn_select(Q, pool)):
            idx = s2.query_indices
            phi2 = np.array(nbnn_score(s2, Q, pool).values)
            lo = np.array(log_odds_score(s2, Q, pool).values)
            lodds_diff = max(lodds_diff, float(np.abs(lo - (phi2 - rival[idx].sum(axis=0))).max()))
        s = rng.normal(0, 30, size=pool.n_classes)
        p = softmax_probs(s)
        sum_diff = max(sum_diff, abs(float(p.sum()) - 1.0))
        shift_diff = max(shift_diff, float(np.abs(softmax_probs(s + rng.uniform(-500, 500)) - p).max()))
        lam = float(rng.choice([2.0**-20, 1e-3, 0.37, 7.3, 1e3, 2.0**30]))
        Qs, pools = _scaled(Q, pool, lam)
        for m in Method:
            for r in ScoreRule:
                if classify(Q, pool, m, r, k_percent=50).predicted != classify(Qs, pools, m, r, k_percent=50).predicted:
                    flips += 1
    ok = dn4_diff <= 1e-9 and lodds_diff <= 1e-9 and sum_diff <= 1e-12 and shift_diff <= 1e-9 and flips == 0
    verdict(3, "algebraic identities", ok,
            f"ALL-score vs DN4={dn4_diff:.1e} (<= 1e-9), log-odds vs class-rival={lodds_diff:.1e} (<= 1e-9), "
            f"softmax sum={sum_diff:.1e} (<= 1e-12), shift={shift_diff:.1e} (<= 1e-9), scaling flips={flips} (exact)")
    assert ok


# --- 4 to 8: directional claims on synthetic clutter data ----------------------


@pytest.fixture(scope="module")
def clutter():
    return synth_generate(SynthSpec(seed=SEED))


@pytest.fixture(scope="module")
def clutter_runs(clutter):
    t0 = time.perf_counter()
    cfg = ProtocolConfig(n_ways=5, k_shots=1, episode_count=EPISODES, seed=SEED)
    acc = {}
    for m in ("dn4", "mn4", "dmn4"):
        acc[m] = evaluate(clutter, cfg.with_(method=m)).accuracy
    elapsed = time.perf_counter() - t0
    return acc, elapsed


def test_criterion_04_clutter_direction(verdict, clutter_runs):
    acc, elapsed = clutter_runs
    gap_mn4, gap_dmn4 = acc["mn4"] - acc["dn4"], acc["dmn4"] - acc["dn4"]
    ok = gap_mn4 >= 0.01 and gap_dmn4 >= 0.01 and elapsed < 120
    verdict(4, "MN4/DMN4 beat DN4 under clutter", ok,
            f"DN4={pts(acc['dn4'])} MN4={pts(acc['mn4'])} (+{100 * gap_mn4:.2f} pt) "
            f"DMN4={pts(acc['dmn4'])} (+{100 * gap_dmn4:.2f} pt), need >= +1.00 pt each; "
            f"{EPISODES} episodes x 3 methods in {elapsed:.1f}s (< 120s)")
    assert gap_mn4 >= 0.01 and gap_dmn4 >= 0.01
    assert elapsed < 120


def test_criterion_05_rank_gap(verdict, clutter, clutter_runs):
    acc, _ = clutter_runs
    cfg = ProtocolConfig(n_ways=5, k_shots=1, episode_count=EPISODES, seed=SEED, score_rule="rank")
    rank = {m: evaluate(clutter, cfg.with_(method=m)).accuracy for m in ("dn4", "mn4")}
    gap = {m: acc[m] - rank[m] for m in rank}
    ok = gap["mn4"] < gap["dn4"]
    verdict(5, "NBNN-rank gap smaller for MN4", ok,
            f"DN4 gap={100 * gap['dn4']:.2f} pt (nbnn {pts(acc['dn4'])}, rank {pts(rank['dn4'])}), "
            f"MN4 gap={100 * gap['mn4']:.2f} pt (nbnn {pts(acc['mn4'])}, rank {pts(rank['mn4'])}), need MN4 < DN4")
    assert ok


def test_criterion_06_semi_supervised(verdict):
    ds = synth_generate(SynthSpec(distractor_classes=3, seed=SEED))
    cfg = ProtocolConfig(n_ways=5, k_shots=1, episode_count=EPISODES, seed=SEED, method="mn4")
    base = evaluate(ds, cfg).accuracy
    semi = evaluate(ds, cfg.with_(unlabeled_per_class=5)).accuracy
    distract = evaluate(ds, cfg.with_(unlabeled_per_class=5, distractor_classes=3)).accuracy
    ok = semi >= base - 0.005 and (semi - distract) < 0.02
    verdict(6, "semi-supervised MN4", ok,
            f"MN4={pts(base)} semi={pts(semi)} (need >= MN4 - 0.50 pt), semi+3 distractors={pts(distract)} "
            f"(drop {100 * (semi - distract):.2f} pt, need < 2.00 pt)")
    assert ok


def test_criterion_07_separable(verdict):
    ds = synth_generate(SynthSpec(signal_fraction=1.0, signal_noise=0.0, seed=SEED))
    cfg = ProtocolConfig(n_ways=5, k_shots=1, episode_count=200, seed=SEED, odm_k_percent=50)
    worst, where = 1.0, None
    for m in Method:
        for r in ScoreRule:
            a = evaluate(ds, cfg.with_(method=m, score_rule=r)).accuracy
            if a < worst:
                worst, where = a, f"{m.value}/{r.value}"
    ok = worst >= 0.99
    verdict(7, "separable sanity", ok, f"lowest accuracy={pts(worst)} ({where or 'all'}) over 12 combos, need >= 99%")
    assert ok


def test_criterion_08_chance_level(verdict, clutter):
    shuffled = shuffle_labels(clutter, SEED)
    cfg = ProtocolConfig(n_ways=5, k_shots=1, episode_count=EPISODES, seed=SEED, odm_k_percent=50)
    accs = {m.value: evaluate(shuffled, cfg.with_(method=m)).accuracy for m in Method}
    dev = max(abs(a - 0.2) for a in accs.values())
    ok = dev <= 0.05
    verdict(8, "chance level on shuffled labels", ok,
            ", ".join(f"{k}={pts(v)}" for k, v in accs.items()) + f"; max |acc - 20%|={100 * dev:.2f} pt (<= 5 pt)")
    assert ok


# --- 9, 10, 11: engineering ----------------------------------------------------


def test_criterion_09_determinism(verdict):
    ds = synth_generate(SynthSpec(n_classes=8, images_per_class=20, distractor_classes=2, seed=SEED))
    configs = [
        ProtocolConfig(n_ways=5, episode_count=40, seed=SEED, method="dmn4"),
        ProtocolConfig(n_ways=4, k_shots=2, episode_count=40, seed=SEED + 1, method="odm", odm_k_percent=30,
                       merge_strategy="mean", score_rule="logodds", unlabeled_per_class=2, distractor_classes=2),
    ]
    differ = 0
    for cfg in configs:
        ref = evaluate(ds, cfg, workers=1).to_json(include_timing=False)
        for w in (2, 3):
            differ += evaluate(ds, cfg, workers=w).to_json(include_timing=False) != ref
        differ += evaluate(ds, cfg, workers=1).to_json(include_timing=False) != ref
    verdict(9, "byte-identical reports across workers", differ == 0,
            f"{differ} differing reports out of 6 (workers 1/2/3, two configs, exact)")
    assert differ == 0


def test_criterion_10_performance(verdict):
    times = time_episodes(Workload(), 1000)
    mean = float(np.mean(times))
    ok = mean <= 0.050
    verdict(10, "episode latency", ok,
            f"mean={1e3 * mean:.1f} ms median={1e3 * float(np.median(times)):.1f} ms over 1000 episodes "
            f"(5-way 1-shot, 75 queries, 361x64), need <= 50 ms")
    assert ok


GOLDEN = {
    "one_1x2.dsc": [[1.0, 2.0]],
    "mixed_3x4.dsc": None,
}
MALFORMED = {
    "bad_magic.dsc": BadMagic,
    "truncated_payload.dsc": TruncatedPayload,
    "truncated_header.dsc": TruncatedPayload,
    "version_2.dsc": UnsupportedVersion,
    "zero_norm.dsc": ZeroNormDescriptor,
    "trailing.dsc": TrailingBytes,
    "empty.dsc": EmptyDescriptorSet,
}


def test_criterion_11_codec_golden_files(verdict):
    failures = []
    for name, want in GOLDEN.items():
        raw = (FIX / name).read_bytes()
        ds = decode_descriptor_file(raw)
        if encode_descriptor_file(ds) != raw:
            failures.append(name)
        if want is not None and ds.data.tolist() != want:
            failures.append(name)
    for name, err in MALFORMED.items():
        try:
            read_descriptor_file(FIX / name)
            failures.append(f"{name}: no error")
        except err:
            pass
        except Exception as exc:  # wrong error class
            failures.append(f"{name}: {type(exc).__name__}")
    ok = not failures
    verdict(11, "codec golden files", ok,
            f"{len(GOLDEN)} golden round trips, {len(MALFORMED)} malformed files; failures={failures or 'none'}")
    assert ok
