"""Pure-numpy neighbour statistics; the fallback when ``_kernels`` is not built.

Produces bit-identical output to the compiled kernel: both screen with a GEMM
and rescore every entry within the screening tolerance of a maximum using
:func:`canonical_dot`.
"""
import numpy as np

from .core import lane_dot

FLOAT64_UNIT = 2.0 ** -53
FLOAT32_UNIT = 2.0 ** -24


def screen_tolerance(dim, screen):
    """Margin under a screened maximum that may still hide the exact maximum.

    ``e`` bounds the gap between one screened entry and its canonical float64
    value for unit vectors; two entries can be off in opposite directions, so
    ``2e`` suffices and we keep a further factor of two.

    * ``float64``/``float32`` GEMM: input rounding plus the summation bound,
      valid for any summation order, ``(dim + 2)`` unit roundoffs.
    * ``bf16x3``: each operand is split into two bf16 parts and the three
      leading cross products are accumulated in float32.  The dropped terms are
      below ``2**-16 + 2**-15`` relative; accumulation adds ``3K + 2`` float32
      roundoffs with ``K`` the dimension padded to the tile width of 32.

    The canonical dot itself is within ``dim + 2`` float64 roundoffs of the
    exact value, and ``1e-30`` absorbs flushed subnormals.
    """
    canon = (dim + 2) * FLOAT64_UNIT
    if screen == "bf16x3":
        k = -(-dim // 32) * 32
        e = 2.0 ** -16 + 2.0 ** -15 + 1.05 * (3 * k + 2) * FLOAT32_UNIT
    elif screen == "float32":
        e = (dim + 2) * FLOAT32_UNIT
    elif screen == "float64":
        e = (dim + 2) * FLOAT64_UNIT
    else:
        raise ValueError(f"unknown screen {screen!r}")
    return 4.0 * (e + canon) + 1e-30


def canonical_dot(a, b):
    """Row-wise canonical dot products (see :func:`fewshot_nbnn.core.lane_dot`)."""
    return lane_dot(a, b)


def _first_max_by_group(group, vals, idx, n_groups):
    # largest value per group, lowest idx among equal values
    order = np.lexsort((idx, -vals, group))
    g = group[order]
    first = np.empty(g.shape[0], dtype=bool)
    first[0] = True
    np.not_equal(g[1:], g[:-1], out=first[1:])
    sel = order[first]
    best_val = np.empty(n_groups, dtype=np.float64)
    best_idx = np.empty(n_groups, dtype=np.int64)
    best_val[group[sel]] = vals[sel]
    best_idx[group[sel]] = idx[sel]
    return best_val, best_idx


def neighbor_stats(q_sets, s64, class_offsets, screen=None):
    """Per-row class maxima and per-image column argmaxima of ``Q @ S.T``.

    ``q_sets`` is a list of per-image unit-row arrays; rows are numbered
    consecutively across images.  ``s64`` holds unit rows sorted by class,
    with class ``c`` occupying ``class_offsets[c]:class_offsets[c+1]``.  The
    screen is always a float64 GEMM; ``screen`` exists for signature parity.

    Returns ``(class_max, class_arg, back_row)`` where ``class_arg`` indexes
    the class-sorted pool and ``back_row`` is local to each image.
    """
    n_pool, dim = s64.shape
    n_classes = len(class_offsets) - 1
    n_img = len(q_sets)
    img_offsets = np.concatenate([[0], np.cumsum([len(q) for q in q_sets])]).astype(np.int64)
    n_rows = int(img_offsets[-1])
    tol = screen_tolerance(dim, "float64")

    class_max = np.empty((n_rows, n_classes), dtype=np.float64)
    class_arg = np.empty((n_rows, n_classes), dtype=np.int64)
    back_row = np.empty((n_img, n_pool), dtype=np.int64)

    for m in range(n_img):
        lo, hi = int(img_offsets[m]), int(img_offsets[m + 1])
        qi = q_sets[m]
        sims = qi @ s64.T
        for c in range(n_classes):
            a, b = int(class_offsets[c]), int(class_offsets[c + 1])
            seg = sims[:, a:b]
            thr = seg.max(axis=1) - tol
            rows, cols = np.nonzero(seg >= thr[:, None])
            vals = canonical_dot(qi[rows], s64[a + cols])
            best_val, best_idx = _first_max_by_group(rows, vals, cols, hi - lo)
            class_max[lo:hi, c] = best_val
            class_arg[lo:hi, c] = a + best_idx
        thr = sims.max(axis=0) - tol
        rows, cols = np.nonzero(sims >= thr[None, :])
        vals = canonical_dot(qi[rows], s64[cols])
        back_row[m] = _first_max_by_group(cols, vals, rows, n_pool)[1]

    return class_max, class_arg, back_row


def nn_summary(class_max):
    """Nearest class (lowest index on ties), its cosine and the best rival cosine per row."""
    rows = np.arange(class_max.shape[0])
    nn_class = np.argmax(class_max, axis=1)
    nn_sim = class_max[rows, nn_class]
    masked = class_max.copy()
    masked[rows, nn_class] = -np.inf
    rival = masked.max(axis=1)
    return nn_class, nn_sim, rival
