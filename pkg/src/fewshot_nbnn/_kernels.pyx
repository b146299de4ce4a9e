# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled neighbour statistics.

The similarity matrix is screened block by block with a fast low-precision
GEMM (AMX bf16x3 tiles when the CPU and OS allow it, float32 SGEMM
otherwise); every entry within the screen's error bound of a maximum is
rescored with the canonical lane-order float64 dot.  Output is bit-identical
to ``_kernels_py`` whichever screen runs.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY
from libc.stdint cimport int64_t
from libc.stdlib cimport free, malloc
from scipy.linalg.cython_blas cimport sgemm

cnp.import_array()

from ._kernels_py import screen_tolerance

cdef extern from "_nbnn_core.h" nogil:
    ctypedef void (*nbnn_sgemm_fn)(char*, char*, int*, int*, int*, float*, float*, int*,
                                   float*, int*, float*, float*, int*)
    int NBNN_SCREEN_F32
    int NBNN_SCREEN_BF16X3
    int nbnn_amx_usable()
    int nbnn_neighbor_stats(const double* const* q_img, int64_t n_rows, const int64_t* img_offsets, int64_t n_img,
                            const double* s64, int64_t n_pool, int64_t dim, const int64_t* class_offsets,
                            int64_t n_classes, int screen, double tol, nbnn_sgemm_fn sgemm,
                            double* class_max, int64_t* class_arg, int64_t* back_row, double* back_val)

_SCREENS = {"float32": NBNN_SCREEN_F32, "bf16x3": NBNN_SCREEN_BF16X3}


def available_screens():
    out = ["float32"]
    if nbnn_amx_usable():
        out.insert(0, "bf16x3")
    return out


default_screen = available_screens()[0]


def neighbor_stats(q_sets, const double[:, ::1] s64, const int64_t[::1] class_offsets, screen=None):
    """Compiled twin of :func:`fewshot_nbnn._kernels_py.neighbor_stats`.

    ``screen`` picks the screening GEMM (``"bf16x3"`` or ``"float32"``);
    the default is the fastest one available.
    """
    screen = screen or default_screen
    if screen not in available_screens():
        raise ValueError(f"screen {screen!r} is not available here (have {available_screens()})")
    cdef int mode = _SCREENS[screen]
    cdef Py_ssize_t dim = s64.shape[1], n_pool = s64.shape[0]
    cdef Py_ssize_t n_classes = class_offsets.shape[0] - 1
    cdef Py_ssize_t n_img = len(q_sets)
    cdef double tol = screen_tolerance(dim, screen)
    cdef const double[:, ::1] mv

    img_offsets_a = np.zeros(n_img + 1, dtype=np.int64)
    cdef int64_t[::1] img_offsets = img_offsets_a
    cdef const double** q_img = <const double**>malloc(sizeof(double*) * max(n_img, 1))
    if q_img == NULL:
        raise MemoryError()
    try:
        for m in range(n_img):
            mv = q_sets[m]
            if mv.shape[1] != dim:
                raise ValueError("query and pool dimensions differ")
            q_img[m] = &mv[0, 0] if mv.shape[0] > 0 else NULL
            img_offsets[m + 1] = img_offsets[m] + mv.shape[0]
        n_rows = img_offsets[n_img]

        class_max_a = np.empty((n_rows, n_classes), dtype=np.float64)
        class_arg_a = np.empty((n_rows, n_classes), dtype=np.int64)
        back_row_a = np.empty((n_img, n_pool), dtype=np.int64)
        back_val_a = np.empty((n_img, n_pool), dtype=np.float64)
        if n_rows == 0 or n_pool == 0:
            return class_max_a, class_arg_a, back_row_a
        rc = _run(q_img, n_rows, img_offsets, s64, class_offsets, mode, tol,
                  class_max_a, class_arg_a, back_row_a, back_val_a)
    finally:
        free(q_img)
    if rc == -1:
        raise MemoryError()
    if rc != 0:
        raise RuntimeError(f"screen {screen!r} failed to initialise")
    return class_max_a, class_arg_a, back_row_a


cdef int _run(const double** q_img, int64_t n_rows, int64_t[::1] img_offsets, const double[:, ::1] s64,
              const int64_t[::1] class_offsets, int mode, double tol, double[:, ::1] class_max,
              int64_t[:, ::1] class_arg, int64_t[:, ::1] back_row, double[:, ::1] back_val):
    cdef int rc
    with nogil:
        rc = nbnn_neighbor_stats(
            q_img, n_rows, &img_offsets[0], img_offsets.shape[0] - 1,
            &s64[0, 0], s64.shape[0], s64.shape[1], &class_offsets[0], class_offsets.shape[0] - 1,
            mode, tol, sgemm,
            &class_max[0, 0], &class_arg[0, 0], &back_row[0, 0], &back_val[0, 0],
        )
    return rc


def nn_summary(const double[:, ::1] class_max):
    """Nearest class (lowest index on ties), its cosine and the best rival cosine per row."""
    cdef Py_ssize_t n = class_max.shape[0], k = class_max.shape[1], i, c, best
    cdef double riv
    nn_class_a = np.empty(n, dtype=np.int64)
    nn_sim_a = np.empty(n, dtype=np.float64)
    rival_a = np.empty(n, dtype=np.float64)
    cdef int64_t[::1] nn_class = nn_class_a
    cdef double[::1] nn_sim = nn_sim_a, rival = rival_a
    with nogil:
        for i in range(n):
            best = 0
            for c in range(1, k):
                if class_max[i, c] > class_max[i, best]:
                    best = c
            riv = -INFINITY
            for c in range(k):
                if c != best and class_max[i, c] > riv:
                    riv = class_max[i, c]
            nn_class[i] = best
            nn_sim[i] = class_max[i, best]
            rival[i] = riv
    return nn_class_a, nn_sim_a, rival_a
