"""Brute-force reference implementations for tests and acceptance runs.

Deliberately naive: Python lists and nested scalar loops.  Each call builds
the full query-by-pool cosine table and then scans it linearly.  Nothing here
imports the engine modules; the only shared pieces are the core types (for
unit rows) and the definition of a cosine: unit-vector products summed in
eight strided lanes, each lane left to right, lanes combined pairwise.
"""
from __future__ import annotations

from decimal import ROUND_CEILING, Decimal

from .core import ClassScores, DescriptorSet, ScoreKind, SupportPool, TauRecord


def _cos(a, b):
    lanes = [0.0] * 8
    for lane in range(min(8, len(a))):
        acc = a[lane] * b[lane]
        for i in range(lane + 8, len(a), 8):
            acc = acc + a[i] * b[i]
        lanes[lane] = acc
    return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))


def _unit_list(ds: DescriptorSet):
    return [list(map(float, row)) for row in ds.unit]


def _pool_rows(pool: SupportPool):
    """Pool entries as (pool index, class index, unit vector) in tie-break order."""
    rows = []
    for j in range(len(pool)):
        rows.append((int(pool.class_index[j]), int(pool.within_index[j]), j, list(map(float, pool.unit[j]))))
    rows.sort(key=lambda r: (r[0], r[1]))
    return [(j, c, v) for c, _, j, v in rows]


def _sims(q, rows):
    return [_cos(q, v) for _, _, v in rows]


def _first_max(cands):
    """(key, value) with the largest value; the earliest one wins ties."""
    best_k, best_v = None, None
    for k, v in cands:
        if best_v is None or v > best_v:
            best_k, best_v = k, v
    return best_k, best_v


def _nn(sims, rows):
    return _first_max((j, s) for (j, _, _), s in zip(rows, sims))


def _tau(sims, rows, n_classes, query_index):
    per_class = [_first_max((j, s) for (j, c, _), s in zip(rows, sims) if c == cc)[1] for cc in range(n_classes)]
    c_star = 0
    for c in range(1, n_classes):
        if per_class[c] > per_class[c_star]:
            c_star = c
    rival = _first_max((j, s) for (j, c, _), s in zip(rows, sims) if c != c_star)[1]
    return TauRecord(query_index, c_star, per_class[c_star], rival, per_class[c_star] - rival)


def oracle_nn(q, pool: SupportPool):
    """(pool index, class index, similarity) of the nearest pool descriptor."""
    rows = _pool_rows(pool)
    j, v = _nn(_sims(q, rows), rows)
    return j, int(pool.class_index[j]), v


def oracle_tau(q, pool: SupportPool, query_index: int = 0) -> TauRecord:
    rows = _pool_rows(pool)
    return _tau(_sims(q, rows), rows, pool.n_classes, query_index)


def oracle_mnn(Q: DescriptorSet, pool: SupportPool) -> set[tuple[int, int]]:
    rows = _pool_rows(pool)
    table = [_sims(q, rows) for q in _unit_list(Q)]
    pairs = set()
    for i, sims in enumerate(table):
        s_idx, _ = _nn(sims, rows)
        col = next(p for p, (j, _, _) in enumerate(rows) if j == s_idx)
        back, _ = _first_max((i2, table[i2][col]) for i2 in range(len(table)))
        if back == i:
            pairs.add((i, s_idx))
    return pairs


def oracle_all(Q: DescriptorSet, pool: SupportPool) -> set[tuple[int, int]]:
    rows = _pool_rows(pool)
    return {(i, _nn(_sims(q, rows), rows)[0]) for i, q in enumerate(_unit_list(Q))}


def oracle_dmnn(Q: DescriptorSet, pool: SupportPool) -> set[tuple[int, int]]:
    rows = _pool_rows(pool)
    groups: dict[int, list[tuple[float, int]]] = {}
    for i, q in enumerate(_unit_list(Q)):
        sims = _sims(q, rows)
        s_idx = _nn(sims, rows)[0]
        groups.setdefault(s_idx, []).append((_tau(sims, rows, pool.n_classes, i).tau, i))
    out = set()
    for s_idx, members in groups.items():
        best_tau, best_i = members[0]
        for t, i in members[1:]:
            if t > best_tau:
                best_tau, best_i = t, i
        out.add((best_i, s_idx))
    return out


def oracle_odm(Q: DescriptorSet, pool: SupportPool, k_percent: float) -> set[tuple[int, int]]:
    qs = _unit_list(Q)
    rows = _pool_rows(pool)
    table = [_sims(q, rows) for q in qs]
    n = (Decimal(len(qs)) * Decimal(repr(float(k_percent))) / Decimal(100)).to_integral_value(ROUND_CEILING)
    scored = [(_tau(sims, rows, pool.n_classes, i).tau, i) for i, sims in enumerate(table)]
    # bubble the best remaining each round; O(n^2) on purpose
    chosen = []
    remaining = list(scored)
    for _ in range(max(1, int(n))):
        best = remaining[0]
        for cand in remaining[1:]:
            if cand[0] > best[0] or (cand[0] == best[0] and cand[1] < best[1]):
                best = cand
        chosen.append(best[1])
        remaining.remove(best)
    return {(i, _nn(table[i], rows)[0]) for i in chosen}


def oracle_scores(query_indices, Q: DescriptorSet, pool: SupportPool, rule: str) -> ClassScores:
    """Class scores for the selected query indices under ``rule``.

    ``rule`` is one of ``"nbnn"``, ``"logodds"`` or ``"rank"``.
    """
    qs = _unit_list(Q)
    rows = _pool_rows(pool)
    totals = [0.0] * pool.n_classes
    for i in sorted(query_indices):
        sims = _sims(qs[i], rows)
        if rule == "rank":
            totals[_tau(sims, rows, pool.n_classes, i).nearest_class] += 1.0
            continue
        for c in range(pool.n_classes):
            term = _first_max((j, s) for (j, cc, _), s in zip(rows, sims) if cc == c)[1]
            if rule == "logodds":
                term = term - _first_max((j, s) for (j, cc, _), s in zip(rows, sims) if cc != c)[1]
            totals[c] += term
    kind = {"nbnn": ScoreKind.NBNN, "logodds": ScoreKind.LOG_ODDS, "rank": ScoreKind.RANK_COUNT}[rule]
    return ClassScores(pool.class_ids, tuple(totals), kind)


def oracle_predict(scores: ClassScores) -> int:
    best = 0
    for c in range(1, len(scores.values)):
        if scores.values[c] > scores.values[best]:
            best = c
    return best
