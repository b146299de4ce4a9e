#ifndef FEWSHOT_NBNN_CORE_H
#define FEWSHOT_NBNN_CORE_H

#include <stdint.h>

typedef void (*nbnn_sgemm_fn)(char *, char *, int *, int *, int *, float *, float *, int *,
                              float *, int *, float *, float *, int *);

enum { NBNN_SCREEN_F32 = 0, NBNN_SCREEN_BF16X3 = 1 };

/* 1 when AMX-BF16 tiles are usable by this process (CPU support and OS grant). */
int nbnn_amx_usable(void);

/* q_img[m] holds the unit rows of image m (img_offsets[m+1] - img_offsets[m] of them).
 * back_val (n_img x n_pool) is workspace; its contents on return are unspecified.
 * Returns 0 on success, -1 on allocation failure, -2 if the screen is unavailable. */
int nbnn_neighbor_stats(const double *const *q_img, int64_t n_rows, const int64_t *img_offsets, int64_t n_img,
                        const double *s64, int64_t n_pool, int64_t dim, const int64_t *class_offsets,
                        int64_t n_classes, int screen, double tol, nbnn_sgemm_fn sgemm,
                        double *class_max, int64_t *class_arg, int64_t *back_row, double *back_val);

#endif
