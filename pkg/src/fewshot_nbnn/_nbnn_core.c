/* Blocked neighbour statistics for the compiled backend.
 *
 * The similarity matrix is produced one block at a time (up to ROW_BLOCK rows
 * of one query image x up to COL_BLOCK columns of one support class, sized to
 * stay in L2) by a screening GEMM: AMX bf16x3 when available, float32 SGEMM
 * otherwise.  Inside a block, every entry within `tol` of its row maximum or
 * of its column's running maximum is rescored with the canonical float64 dot,
 * and exact maxima are merged across blocks with lowest-index tie-breaking.
 * Partial maxima never exceed final ones, so the candidate sets always contain
 * every entry within `tol` of a final maximum.
 *
 * On the AMX path each freshly stored tile is folded (while L1-hot) into
 * per-lane top-two summaries with the position of the top value, for rows
 * and for columns.  Candidates then come straight from the summaries; a
 * block row or column is rescanned only when a runner-up is itself within
 * `tol`, so the block is read once.  Column candidates are kept in screened
 * form until the image is finished; only columns left with more than one
 * candidate within `tol` of the final maximum need exact rescoring.
 */
#include "_nbnn_core.h"

#include <math.h>
#include <stdlib.h>
#include <string.h>

/* The AMX path folds tile maxima with AVX-512, so it needs both. */
#if defined(__x86_64__) && defined(__GNUC__) && defined(__linux__) && defined(__AVX512F__) && defined(__AVX512DQ__)
#define NBNN_AMX_BUILD 1
#include <cpuid.h>
#include <immintrin.h>
#include <sys/syscall.h>
#include <unistd.h>
#elif defined(__AVX512F__)
#include <immintrin.h>
#endif

#define ROW_BLOCK 128
#define COL_BLOCK 512
#define CAND_CAP 4096
#define CAND_SLACK 16
#define COL_SHIFT 9 /* COL_BLOCK == 1 << COL_SHIFT */

static inline int64_t round_up(int64_t x, int64_t m) { return (x + m - 1) / m * m; }

/* Tile rows are 64 bytes; unaligned panels split every row across two lines. */
static void *alloc64(size_t bytes) { return aligned_alloc(64, (size_t)round_up((int64_t)bytes, 64)); }

/* ------------------------------------------------------------------------ */
/* Canonical dot: lane k % 8, lanes summed in increasing k, pairwise combine */
/* ------------------------------------------------------------------------ */

static inline double combine_lanes(const double *p)
{
    return ((p[0] + p[1]) + (p[2] + p[3])) + ((p[4] + p[5]) + (p[6] + p[7]));
}

static inline double canon_dot(const double *a, const double *b, int64_t n)
{
    double p[8];
#if defined(__AVX512F__)
    __m512d acc;
    if (n >= 8) {
        acc = _mm512_mul_pd(_mm512_loadu_pd(a), _mm512_loadu_pd(b));
        int64_t k = 8;
        for (; k + 8 <= n; k += 8)
            acc = _mm512_add_pd(acc, _mm512_mul_pd(_mm512_loadu_pd(a + k), _mm512_loadu_pd(b + k)));
        if (k < n) {
            __mmask8 m = (__mmask8)((1u << (n - k)) - 1u);
            __m512d prod = _mm512_mul_pd(_mm512_maskz_loadu_pd(m, a + k), _mm512_maskz_loadu_pd(m, b + k));
            acc = _mm512_mask_add_pd(acc, m, acc, prod);
        }
    } else {
        __mmask8 m = (__mmask8)((1u << n) - 1u);
        acc = _mm512_maskz_mul_pd(m, _mm512_maskz_loadu_pd(m, a), _mm512_maskz_loadu_pd(m, b));
    }
    _mm512_storeu_pd(p, acc);
#else
    for (int l = 0; l < 8; l++)
        p[l] = l < n ? a[l] * b[l] : 0.0;
    for (int64_t k = 8; k < n; k++)
        p[k & 7] = p[k & 7] + a[k] * b[k];
#endif
    return combine_lanes(p);
}

#if defined(__AVX512F__)
/* Four candidates at once so the lane accumulators' add chains overlap. */
static inline void canon_dot4(const double **pa, const double **pb, int64_t n, double *out)
{
    __m512d acc[4];
    double p[8];
    for (int u = 0; u < 4; u++)
        acc[u] = _mm512_mul_pd(_mm512_loadu_pd(pa[u]), _mm512_loadu_pd(pb[u]));
    int64_t k = 8;
    for (; k + 8 <= n; k += 8)
        for (int u = 0; u < 4; u++)
            acc[u] = _mm512_add_pd(acc[u], _mm512_mul_pd(_mm512_loadu_pd(pa[u] + k), _mm512_loadu_pd(pb[u] + k)));
    if (k < n) {
        __mmask8 m = (__mmask8)((1u << (n - k)) - 1u);
        for (int u = 0; u < 4; u++) {
            __m512d prod = _mm512_mul_pd(_mm512_maskz_loadu_pd(m, pa[u] + k), _mm512_maskz_loadu_pd(m, pb[u] + k));
            acc[u] = _mm512_mask_add_pd(acc[u], m, acc[u], prod);
        }
    }
    for (int u = 0; u < 4; u++) {
        _mm512_storeu_pd(p, acc[u]);
        out[u] = combine_lanes(p);
    }
}
#endif

static void rescore(const double **pa, const double **pb, int64_t n, int64_t dim, double *out)
{
    int64_t i = 0;
#if defined(__AVX512F__)
    if (dim >= 8)
        for (; i + 4 <= n; i += 4)
            canon_dot4(pa + i, pb + i, dim, out + i);
#endif
    for (; i < n; i++)
        out[i] = canon_dot(pa[i], pb[i], dim);
}

/* ------------------------------------------------------------------------ */
/* Block scans                                                               */
/* ------------------------------------------------------------------------ */

/* max of g[0:w]; also colmax[j] = max(colmax[j], g[j]) */
static inline float row_max_update(const float *g, float *colmax, int64_t w)
{
#if defined(__AVX512F__)
    __m512 vm = _mm512_set1_ps(-INFINITY);
    int64_t j = 0;
    for (; j + 16 <= w; j += 16) {
        __m512 v = _mm512_loadu_ps(g + j);
        vm = _mm512_max_ps(vm, v);
        _mm512_storeu_ps(colmax + j, _mm512_max_ps(_mm512_loadu_ps(colmax + j), v));
    }
    if (j < w) {
        __mmask16 k = (__mmask16)((1u << (w - j)) - 1u);
        __m512 v = _mm512_mask_loadu_ps(_mm512_set1_ps(-INFINITY), k, g + j);
        vm = _mm512_max_ps(vm, v);
        _mm512_mask_storeu_ps(colmax + j, k, _mm512_max_ps(_mm512_maskz_loadu_ps(k, colmax + j), v));
    }
    return _mm512_reduce_max_ps(vm);
#else
    float m[8];
    int64_t j = 0;
    for (int l = 0; l < 8; l++)
        m[l] = -INFINITY;
    for (; j + 8 <= w; j += 8)
        for (int l = 0; l < 8; l++) {
            float v = g[j + l];
            m[l] = v > m[l] ? v : m[l];
            colmax[j + l] = v > colmax[j + l] ? v : colmax[j + l];
        }
    for (; j < w; j++) {
        float v = g[j];
        m[0] = v > m[0] ? v : m[0];
        colmax[j] = v > colmax[j] ? v : colmax[j];
    }
    float r = m[0];
    for (int l = 1; l < 8; l++)
        r = m[l] > r ? m[l] : r;
    return r;
#endif
}

/* Candidates are stored as flat block offsets (i << COL_SHIFT) + j.  The
 * vector path writes 16 slots past the count, so buffers carry that slack. */

/* One sweep over a row: g[j] >= rthr goes to rows, g[j] >= cthr[j] to cols.
 * Almost every 16-wide chunk matches neither, hence the early out. */
static inline void scan_row(const float *g, float rthr, const float *cthr, int64_t w, int32_t base,
                            int32_t *rows, int64_t *nr, int32_t *cols, int64_t *nc)
{
#if defined(__AVX512F__)
    const __m512 vr = _mm512_set1_ps(rthr);
    const __m512i lane = _mm512_setr_epi32(0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15);
    for (int64_t j = 0; j < w; j += 16) {
        __mmask16 lim = w - j >= 16 ? (__mmask16)0xFFFF : (__mmask16)((1u << (w - j)) - 1u);
        __m512 v = _mm512_maskz_loadu_ps(lim, g + j);
        __mmask16 mr = _mm512_mask_cmp_ps_mask(lim, v, vr, _CMP_GE_OQ);
        __mmask16 mc = _mm512_mask_cmp_ps_mask(lim, v, _mm512_maskz_loadu_ps(lim, cthr + j), _CMP_GE_OQ);
        if (__builtin_expect((mr | mc) != 0, 0)) {
            __m512i idx = _mm512_add_epi32(_mm512_set1_epi32(base + (int32_t)j), lane);
            _mm512_storeu_si512(rows + *nr, _mm512_maskz_compress_epi32(mr, idx));
            *nr += __builtin_popcount(mr);
            _mm512_storeu_si512(cols + *nc, _mm512_maskz_compress_epi32(mc, idx));
            *nc += __builtin_popcount(mc);
        }
    }
#else
    for (int64_t j = 0; j < w; j++) {
        if (g[j] >= rthr)
            rows[(*nr)++] = base + (int32_t)j;
        if (g[j] >= cthr[j])
            cols[(*nc)++] = base + (int32_t)j;
    }
#endif
}

/* ------------------------------------------------------------------------ */
/* AMX bf16x3 screening                                                      */
/* ------------------------------------------------------------------------ */

#ifdef NBNN_AMX_BUILD

#define ARCH_REQ_XCOMP_PERM 0x1023
#define XFEATURE_XTILEDATA 18

typedef struct {
    uint8_t palette_id;
    uint8_t start_row;
    uint8_t reserved[14];
    uint16_t colsb[16];
    uint8_t rows[16];
} tile_config;

static int amx_state = -1;

int nbnn_amx_usable(void)
{
    if (amx_state >= 0)
        return amx_state;
    unsigned a, b, c, d;
    amx_state = 0;
    if (!__get_cpuid_count(7, 0, &a, &b, &c, &d))
        return 0;
    if (!(d & (1u << 24)) || !(d & (1u << 22)))
        return 0;
    if (!__get_cpuid(1, &a, &b, &c, &d) || !(c & (1u << 27)))
        return 0;
    unsigned lo, hi;
    __asm__ volatile("xgetbv" : "=a"(lo), "=d"(hi) : "c"(0));
    if ((lo & (3u << 17)) != (3u << 17))
        return 0;
    if (syscall(SYS_arch_prctl, ARCH_REQ_XCOMP_PERM, XFEATURE_XTILEDATA) != 0)
        return 0;
    amx_state = 1;
    return 1;
}

static inline uint16_t to_bf16(float f)
{
    uint32_t u;
    memcpy(&u, &f, 4);
    u += 0x7FFFu + ((u >> 16) & 1u);
    return (uint16_t)(u >> 16);
}

static inline float from_bf16(uint16_t h)
{
    uint32_t u = (uint32_t)h << 16;
    float f;
    memcpy(&f, &u, 4);
    return f;
}

/* x ~ hi + lo; the float residual f - hi is exact. */
static inline void split_bf16(double x, uint16_t *h, uint16_t *l)
{
    float f = (float)x;
    uint16_t hb = to_bf16(f);
    *h = hb;
    *l = to_bf16(f - from_bf16(hb));
}

#if defined(__AVX512F__) && defined(__AVX512DQ__)
static inline __m512i to_bf16_x16(__m512 f)
{
    __m512i u = _mm512_castps_si512(f);
    __m512i odd = _mm512_and_si512(_mm512_srli_epi32(u, 16), _mm512_set1_epi32(1));
    return _mm512_srli_epi32(_mm512_add_epi32(u, _mm512_add_epi32(_mm512_set1_epi32(0x7FFF), odd)), 16);
}
#endif

/* Rows of x (n x dim) into 16-row panels: panel p, k-block kb is a 16x32
 * bf16 tile.  Rows are padded to a multiple of 32, k to a multiple of 32. */
static void pack_rows(const double *x, int64_t n, int64_t dim, int64_t kb_count, uint16_t *hi, uint16_t *lo)
{
    int64_t panels = round_up(n, 32) / 16;
    memset(hi, 0, (size_t)panels * kb_count * 512 * sizeof(uint16_t));
    memset(lo, 0, (size_t)panels * kb_count * 512 * sizeof(uint16_t));
    for (int64_t r = 0; r < n; r++) {
        const int64_t base = (r / 16) * kb_count * 512 + (r % 16) * 32;
        const double *row = x + r * dim;
#if defined(__AVX512F__) && defined(__AVX512DQ__)
        for (int64_t k = 0; k < dim; k += 16) {
            int64_t left = dim - k;
            __mmask8 m0 = left >= 8 ? (__mmask8)0xFF : (__mmask8)((1u << left) - 1u);
            __mmask8 m1 = left >= 16 ? (__mmask8)0xFF : left > 8 ? (__mmask8)((1u << (left - 8)) - 1u) : 0;
            __m256 f0 = _mm512_cvtpd_ps(_mm512_maskz_loadu_pd(m0, row + k));
            __m256 f1 = _mm512_cvtpd_ps(_mm512_maskz_loadu_pd(m1, row + k + 8));
            __m512 f = _mm512_insertf32x8(_mm512_castps256_ps512(f0), f1, 1);
            __m512i h = to_bf16_x16(f);
            __m512 rest = _mm512_sub_ps(f, _mm512_castsi512_ps(_mm512_slli_epi32(h, 16)));
            __m512i l = to_bf16_x16(rest);
            const int64_t off = base + (k / 32) * 512 + (k % 32);
            _mm256_storeu_si256((__m256i *)(hi + off), _mm512_cvtepi32_epi16(h));
            _mm256_storeu_si256((__m256i *)(lo + off), _mm512_cvtepi32_epi16(l));
        }
#else
        for (int64_t k = 0; k < dim; k++) {
            const int64_t off = base + (k / 32) * 512 + k % 32;
            split_bf16(row[k], hi + off, lo + off);
        }
#endif
    }
}

/* Columns x[0:n] (rows of a row-major n x dim matrix) into VNNI panels of
 * 16 columns: element (k, col) sits at kp = k/2, slot k%2. */
static void pack_cols(const double *x, int64_t n, int64_t dim, int64_t kb_count, uint16_t *hi, uint16_t *lo)
{
    int64_t panels = round_up(n, 32) / 16;
    memset(hi, 0, (size_t)panels * kb_count * 512 * sizeof(uint16_t));
    memset(lo, 0, (size_t)panels * kb_count * 512 * sizeof(uint16_t));
    for (int64_t col = 0; col < n; col++) {
        int64_t p = col / 16, cc = col % 16;
        for (int64_t k = 0; k < dim; k++) {
            int64_t kk = k % 32;
            int64_t off = (p * kb_count + k / 32) * 512 + (kk / 2) * 32 + cc * 2 + (kk % 2);
            split_bf16(x[col * dim + k], hi + off, lo + off);
        }
    }
}

__attribute__((target("amx-tile,amx-bf16"))) static void amx_configure(void)
{
    tile_config cfg;
    memset(&cfg, 0, sizeof cfg);
    cfg.palette_id = 1;
    for (int t = 0; t < 8; t++) {
        cfg.rows[t] = 16;
        cfg.colsb[t] = 64;
    }
    _tile_loadconfig(&cfg);
}

__attribute__((target("amx-tile,amx-bf16"))) static void amx_release(void) { _tile_release(); }

/* C[32 x 32] (row stride ldc floats) = A panels a0,a1 times B panels b0,b1,
 * summing hi*hi + hi*lo + lo*hi over kb_count k-blocks. */
__attribute__((target("amx-tile,amx-bf16"))) static void amx_tile_32x32(
    const uint16_t *ah, const uint16_t *al, int64_t a_panel_stride,
    const uint16_t *bh, const uint16_t *bl, int64_t b_panel_stride,
    int64_t kb_count, float *c, int64_t ldc)
{
    _tile_zero(0);
    _tile_zero(1);
    _tile_zero(2);
    _tile_zero(3);
    for (int64_t kb = 0; kb < kb_count; kb++) {
        const int64_t o = kb * 512;
        _tile_loadd(4, ah + o, 64);
        _tile_loadd(5, ah + a_panel_stride + o, 64);
        _tile_loadd(6, bh + o, 64);
        _tile_loadd(7, bh + b_panel_stride + o, 64);
        _tile_dpbf16ps(0, 4, 6);
        _tile_dpbf16ps(1, 4, 7);
        _tile_dpbf16ps(2, 5, 6);
        _tile_dpbf16ps(3, 5, 7);
        _tile_loadd(6, bl + o, 64);
        _tile_loadd(7, bl + b_panel_stride + o, 64);
        _tile_dpbf16ps(0, 4, 6);
        _tile_dpbf16ps(1, 4, 7);
        _tile_dpbf16ps(2, 5, 6);
        _tile_dpbf16ps(3, 5, 7);
        _tile_loadd(4, al + o, 64);
        _tile_loadd(5, al + a_panel_stride + o, 64);
        _tile_loadd(6, bh + o, 64);
        _tile_loadd(7, bh + b_panel_stride + o, 64);
        _tile_dpbf16ps(0, 4, 6);
        _tile_dpbf16ps(1, 4, 7);
        _tile_dpbf16ps(2, 5, 6);
        _tile_dpbf16ps(3, 5, 7);
    }
    const int64_t stride = ldc * (int64_t)sizeof(float);
    _tile_stored(0, c, stride);
    _tile_stored(1, c + 16, stride);
    _tile_stored(2, c + 16 * ldc, stride);
    _tile_stored(3, c + 16 * ldc + 16, stride);
}

#else

int nbnn_amx_usable(void) { return 0; }

#endif

/* ------------------------------------------------------------------------ */
/* Driver                                                                    */
/* ------------------------------------------------------------------------ */

typedef struct {
    const double *const *q_img;
    const double *s64;
    int64_t dim, n_classes;
    float tol; /* rounded up so that float thresholds never exceed max - tol */
    const double **pa, **pb;
    double *vals;
    double *class_max;
    int64_t *class_arg;
#ifdef NBNN_AMX_BUILD
    /* column candidates of the current image: local row, sorted column, screened value */
    int32_t *cc_row, *cc_col;
    float *cc_val;
    int64_t cc_n, cc_cap;
    int32_t *col_class, *cc_cnt;
    int oom;
#endif
} ctx_t;

/* One screened block and its scan state. */
typedef struct {
    float *block; /* ROW_BLOCK x COL_BLOCK */
    float rowthr[ROW_BLOCK];
    float colthr[COL_BLOCK]; /* running column maxima, then thresholds */
    int64_t r0, R, img_lo, j0, W, c;
    const double *q; /* first row of the block */
    int64_t *back_row;
    double *back_val;
    int64_t nr, nc;
    int32_t *rows, *cols;
#ifdef NBNN_AMX_BUILD
    /* lane l of row r summarises columns l, l+16, ...; per column over the block's rows */
    __m512 *rtop1, *rtop2;
    float *ctop1, *ctop2;
#endif
} job_t;

static void merge_rows(ctx_t *x, job_t *b)
{
    for (int64_t t = 0; t < b->nr; t++) {
        x->pa[t] = b->q + (b->rows[t] >> COL_SHIFT) * x->dim;
        x->pb[t] = x->s64 + (b->j0 + (b->rows[t] & (COL_BLOCK - 1))) * x->dim;
    }
    rescore(x->pa, x->pb, b->nr, x->dim, x->vals);
    for (int64_t t = 0; t < b->nr; t++) {
        const int64_t row = b->r0 + (b->rows[t] >> COL_SHIFT), j = b->j0 + (b->rows[t] & (COL_BLOCK - 1));
        double *best = x->class_max + row * x->n_classes + b->c;
        int64_t *arg = x->class_arg + row * x->n_classes + b->c;
        const double v = x->vals[t];
        if (*arg < 0 || v > *best || (v == *best && j < *arg)) {
            *best = v;
            *arg = j;
        }
    }
    b->nr = 0;
}

static void merge_cols(ctx_t *x, job_t *b)
{
    for (int64_t t = 0; t < b->nc; t++) {
        x->pa[t] = b->q + (b->cols[t] >> COL_SHIFT) * x->dim;
        x->pb[t] = x->s64 + (b->j0 + (b->cols[t] & (COL_BLOCK - 1))) * x->dim;
    }
    rescore(x->pa, x->pb, b->nc, x->dim, x->vals);
    for (int64_t t = 0; t < b->nc; t++) {
        const int64_t j = b->j0 + (b->cols[t] & (COL_BLOCK - 1));
        const int64_t i = b->r0 - b->img_lo + (b->cols[t] >> COL_SHIFT);
        const double v = x->vals[t];
        if (b->back_row[j] < 0 || v > b->back_val[j] || (v == b->back_val[j] && i < b->back_row[j])) {
            b->back_val[j] = v;
            b->back_row[j] = i;
        }
    }
    b->nc = 0;
}

static void job_begin(job_t *b, const double *q, int64_t r0, int64_t R, int64_t img_lo, int64_t j0, int64_t W,
                      int64_t c, int64_t *back_row, double *back_val)
{
    b->q = q;
    b->r0 = r0;
    b->R = R;
    b->img_lo = img_lo;
    b->j0 = j0;
    b->W = W;
    b->c = c;
    b->back_row = back_row;
    b->back_val = back_val;
    b->nr = b->nc = 0;
}

/* SGEMM path: maxima, thresholds, then one scan of the whole block. */
static void job_scan_all(ctx_t *x, job_t *b, float *colrun)
{
    memcpy(b->colthr, colrun, sizeof(float) * b->W);
    for (int64_t i = 0; i < b->R; i++)
        b->rowthr[i] = row_max_update(b->block + i * COL_BLOCK, b->colthr, b->W) - x->tol;
    for (int64_t j = 0; j < b->W; j++) {
        colrun[j] = b->colthr[j];
        b->colthr[j] -= x->tol;
    }
    for (int64_t i = 0; i < b->R; i++) {
        if (b->nr + b->W > CAND_CAP)
            merge_rows(x, b);
        if (b->nc + b->W > CAND_CAP)
            merge_cols(x, b);
        scan_row(b->block + i * COL_BLOCK, b->rowthr[i], b->colthr, b->W, (int32_t)(i << COL_SHIFT), b->rows, &b->nr,
                 b->cols, &b->nc);
    }
    merge_rows(x, b);
    merge_cols(x, b);
}

#ifdef NBNN_AMX_BUILD
static const int32_t lane_ids[16] __attribute__((aligned(64))) = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15};

/* Summaries carry positions in the low TAG_BITS mantissa bits of the values
 * themselves, so max/min move the tag along for free.  Tagging moves a value
 * by less than 2^-16 for |v| < 2, covered by TAG_SLACK in the tolerance.
 * Distinct positions get distinct bit patterns, so an exact tie always shows
 * up as a runner-up within tolerance and triggers a rescan. */
#define TAG_BITS 7
#define TAG_MASK ((1 << TAG_BITS) - 1)
#define TAG_SLACK 0x1p-14f
#define SENTINEL -1e30f /* finite, so tagging never makes a NaN */

static inline __m512 tag(__m512 v, __m512i t)
{
    /* (v & ~TAG_MASK) | t */
    return _mm512_castsi512_ps(
        _mm512_ternarylogic_epi32(_mm512_castps_si512(v), _mm512_set1_epi32(~TAG_MASK), t, 0xEA));
}

static inline void fold(__m512 *t1, __m512 *t2, __m512 v)
{
    *t2 = _mm512_max_ps(*t2, _mm512_min_ps(*t1, v));
    *t1 = _mm512_max_ps(*t1, v);
}

static inline __m512i tag_of(__m512 v) { return _mm512_and_si512(_mm512_castps_si512(v), _mm512_set1_epi32(TAG_MASK)); }

static void job_reset_summaries(job_t *b)
{
    const __m512 low = _mm512_set1_ps(SENTINEL);
    for (int64_t i = 0; i < b->R; i++) {
        b->rtop1[i] = low;
        b->rtop2[i] = low;
    }
    for (int64_t j = 0; j < COL_BLOCK; j += 16) {
        _mm512_store_ps(b->ctop1 + j, low);
        _mm512_store_ps(b->ctop2 + j, low);
    }
}

/* Fold the 32 x 32 tile at (rt, ct) into the row summaries (tag: 16-column
 * chunk) and column summaries (tag: block row). */
static inline void tile_fold(job_t *b, int64_t rt, int64_t ct)
{
    const int64_t w = b->W - ct, rend = rt + 32 < b->R ? rt + 32 : b->R;
    const __mmask16 m0 = w >= 16 ? (__mmask16)0xFFFF : (__mmask16)((1u << w) - 1u);
    const __mmask16 m1 = w >= 32 ? (__mmask16)0xFFFF : w > 16 ? (__mmask16)((1u << (w - 16)) - 1u) : 0;
    const __m512 low = _mm512_set1_ps(SENTINEL);
    const __m512i k0 = _mm512_set1_epi32((int32_t)(ct / 16)), k1 = _mm512_set1_epi32((int32_t)(ct / 16 + 1));
    __m512 a1 = low, a2 = low, b1 = low, b2 = low;
    for (int64_t r = rt; r < rend; r++) {
        const float *g = b->block + r * COL_BLOCK + ct;
        const __m512 v0 = _mm512_mask_loadu_ps(low, m0, g);
        const __m512 v1 = _mm512_mask_loadu_ps(low, m1, g + 16);
        __m512 t1 = b->rtop1[r], t2 = b->rtop2[r];
        fold(&t1, &t2, tag(v0, k0));
        fold(&t1, &t2, tag(v1, k1));
        b->rtop1[r] = t1;
        b->rtop2[r] = t2;
        const __m512i ri = _mm512_set1_epi32((int32_t)r);
        fold(&a1, &a2, tag(v0, ri));
        fold(&b1, &b2, tag(v1, ri));
    }
    for (int h = 0; h < 2; h++) {
        float *p1 = b->ctop1 + ct + 16 * h, *p2 = b->ctop2 + ct + 16 * h;
        __m512 t1 = _mm512_load_ps(p1), t2 = _mm512_load_ps(p2);
        const __m512 n1 = h ? b1 : a1, n2 = h ? b2 : a2;
        t2 = _mm512_max_ps(_mm512_max_ps(t2, n2), _mm512_min_ps(t1, n1));
        t1 = _mm512_max_ps(t1, n1);
        _mm512_store_ps(p1, t1);
        _mm512_store_ps(p2, t2);
    }
}

/* Room for `more` column candidates plus vector slack; 0 (and x->oom) on failure. */
static int cc_reserve(ctx_t *x, int64_t more)
{
    const int64_t need = x->cc_n + more + CAND_SLACK;
    if (need <= x->cc_cap)
        return 1;
    int64_t cap = x->cc_cap ? x->cc_cap : 1 << 16;
    while (cap < need)
        cap *= 2;
    int32_t *r = realloc(x->cc_row, sizeof(int32_t) * cap);
    if (r)
        x->cc_row = r;
    int32_t *c = realloc(x->cc_col, sizeof(int32_t) * cap);
    if (c)
        x->cc_col = c;
    float *v = realloc(x->cc_val, sizeof(float) * cap);
    if (v)
        x->cc_val = v;
    if (!r || !c || !v) {
        x->oom = 1;
        return 0;
    }
    x->cc_cap = cap;
    return 1;
}

/* Candidates from the summaries; rescan only rows or columns with a close runner-up. */
static void job_extract(ctx_t *x, job_t *b, float *colrun)
{
    const __m512i lanes = _mm512_load_si512(lane_ids);
    const __m512 vtol = _mm512_set1_ps(x->tol);
    for (int64_t i = 0; i < b->R; i++) {
        if (b->nr + b->W > CAND_CAP)
            merge_rows(x, b);
        const float thr = _mm512_reduce_max_ps(b->rtop1[i]) - x->tol;
        const __m512 vt = _mm512_set1_ps(thr);
        const int32_t base = (int32_t)(i << COL_SHIFT);
        if (_mm512_cmp_ps_mask(b->rtop2[i], vt, _CMP_GE_OQ)) {
            const float *g = b->block + i * COL_BLOCK;
            for (int64_t j = 0; j < b->W; j++)
                if (g[j] >= thr)
                    b->rows[b->nr++] = base + (int32_t)j;
        } else {
            __mmask16 m = _mm512_cmp_ps_mask(b->rtop1[i], vt, _CMP_GE_OQ);
            __m512i idx = _mm512_add_epi32(_mm512_slli_epi32(tag_of(b->rtop1[i]), 4), _mm512_add_epi32(lanes, _mm512_set1_epi32(base)));
            _mm512_storeu_si512(b->rows + b->nr, _mm512_maskz_compress_epi32(m, idx));
            b->nr += __builtin_popcount(m);
        }
    }
    merge_rows(x, b);
    if (!cc_reserve(x, b->W * b->R))
        return;
    const int32_t row0 = (int32_t)(b->r0 - b->img_lo);
    for (int64_t j = 0; j < b->W; j += 16) {
        const int64_t w = b->W - j;
        const __mmask16 lim = w >= 16 ? (__mmask16)0xFFFF : (__mmask16)((1u << w) - 1u);
        const __m512 t1 = _mm512_load_ps(b->ctop1 + j);
        const __m512 run = _mm512_max_ps(_mm512_maskz_loadu_ps(lim, colrun + j), t1);
        _mm512_mask_storeu_ps(colrun + j, lim, run);
        const __m512 vt = _mm512_sub_ps(run, vtol);
        __mmask16 fb = _mm512_mask_cmp_ps_mask(lim, _mm512_load_ps(b->ctop2 + j), vt, _CMP_GE_OQ);
        __mmask16 m = _mm512_mask_cmp_ps_mask(lim, t1, vt, _CMP_GE_OQ) & (__mmask16)~fb;
        const __m512i rows = _mm512_add_epi32(tag_of(t1), _mm512_set1_epi32(row0));
        const __m512i cols = _mm512_add_epi32(lanes, _mm512_set1_epi32((int32_t)(b->j0 + j)));
        _mm512_storeu_si512(x->cc_row + x->cc_n, _mm512_maskz_compress_epi32(m, rows));
        _mm512_storeu_si512(x->cc_col + x->cc_n, _mm512_maskz_compress_epi32(m, cols));
        _mm512_storeu_ps(x->cc_val + x->cc_n, _mm512_maskz_compress_ps(m, t1));
        x->cc_n += __builtin_popcount(m);
        if (fb) {
            float thr[16];
            _mm512_storeu_ps(thr, vt);
            for (int l = 0; l < 16; l++)
                if (fb & (1u << l))
                    for (int64_t i = 0; i < b->R; i++) {
                        const float v = b->block[i * COL_BLOCK + j + l];
                        if (v >= thr[l]) {
                            x->cc_row[x->cc_n] = row0 + (int32_t)i;
                            x->cc_col[x->cc_n] = (int32_t)(b->j0 + j + l);
                            x->cc_val[x->cc_n++] = v;
                        }
                    }
        }
    }
}

/* The image is done: a column candidate survives if it is within tol of the
 * column's final screened maximum.  A column with a single survivor has its
 * exact argmax settled without rescoring; otherwise the survivors are rescored
 * (reusing row maxima where the pair is one) and merged with the lowest-row
 * tie-break.  back_val is only meaningful for rescored columns. */
static void image_cols(ctx_t *x, const double *q, int64_t img_lo, int64_t n_pool, const float *colrun,
                       int64_t *back_row, double *back_val)
{
    int32_t *cnt = x->cc_cnt;
    memset(cnt, 0, sizeof(int32_t) * n_pool);
    for (int64_t t = 0; t < x->cc_n; t++) {
        const int64_t j = x->cc_col[t];
        cnt[j] += x->cc_val[t] >= colrun[j] - x->tol;
    }
    int64_t n = 0;
    for (int64_t t = 0; t <= x->cc_n; t++) {
        if (n == CAND_CAP || (t == x->cc_n && n > 0)) {
            rescore(x->pa, x->pb, n, x->dim, x->vals);
            for (int64_t u = 0; u < n; u++) {
                const int64_t i = (x->pa[u] - q) / x->dim, j = (x->pb[u] - x->s64) / x->dim;
                const double v = x->vals[u];
                if (back_row[j] < 0 || v > back_val[j] || (v == back_val[j] && i < back_row[j])) {
                    back_val[j] = v;
                    back_row[j] = i;
                }
            }
            n = 0;
        }
        if (t == x->cc_n)
            break;
        const int64_t j = x->cc_col[t];
        if (x->cc_val[t] < colrun[j] - x->tol)
            continue;
        const int64_t i = x->cc_row[t];
        if (cnt[j] == 1) {
            back_row[j] = i;
            continue;
        }
        const int64_t at = (img_lo + i) * x->n_classes + x->col_class[j];
        if (x->class_arg[at] == j) {
            const double v = x->class_max[at];
            if (back_row[j] < 0 || v > back_val[j] || (v == back_val[j] && i < back_row[j])) {
                back_val[j] = v;
                back_row[j] = i;
            }
        } else {
            x->pa[n] = q + i * x->dim;
            x->pb[n] = x->s64 + j * x->dim;
            n++;
        }
    }
}
#endif

int nbnn_neighbor_stats(const double *const *q_img, int64_t n_rows, const int64_t *img_offsets, int64_t n_img,
                        const double *s64, int64_t n_pool, int64_t dim, const int64_t *class_offsets,
                        int64_t n_classes, int screen, double tol, nbnn_sgemm_fn sgemm,
                        double *class_max, int64_t *class_arg, int64_t *back_row, double *back_val)
{
    for (int64_t t = 0; t < n_rows * n_classes; t++) {
        class_max[t] = -INFINITY;
        class_arg[t] = -1;
    }
    for (int64_t t = 0; t < n_img * n_pool; t++) {
        back_row[t] = -1;
        back_val[t] = 0.0;
    }
    if (n_rows == 0 || n_pool == 0)
        return 0;
    if (screen == NBNN_SCREEN_BF16X3 && !nbnn_amx_usable())
        return -2;
    if (screen == NBNN_SCREEN_F32 && sgemm == NULL)
        return -2;

    int64_t max_img = 0;
    for (int64_t m = 0; m < n_img; m++)
        if (img_offsets[m + 1] - img_offsets[m] > max_img)
            max_img = img_offsets[m + 1] - img_offsets[m];

    ctx_t x;
    memset(&x, 0, sizeof x);
    x.q_img = q_img;
    x.s64 = s64;
    x.dim = dim;
    x.n_classes = n_classes;
    /* |screened entry| <= 1 + tol, so one float subtraction errs by < 2^-23 */
    x.tol = (float)tol + 0x1p-21f;
#ifdef NBNN_AMX_BUILD
    if (screen == NBNN_SCREEN_BF16X3)
        x.tol += TAG_SLACK;
#endif
    x.class_max = class_max;
    x.class_arg = class_arg;

    int rc = -1, configured = 0;
    job_t *jobs = NULL;
    float *colrun = NULL, *q32 = NULL, *s32 = NULL;
    uint16_t *qh = NULL, *ql = NULL, *sh = NULL, *sl = NULL;
    int64_t *panel_base = NULL;
    const int64_t kb_count = round_up(dim, 32) / 32;

    jobs = calloc(1, sizeof(job_t));
    colrun = malloc(sizeof(float) * n_pool);
    x.pa = malloc(sizeof(double *) * CAND_CAP);
    x.pb = malloc(sizeof(double *) * CAND_CAP);
    x.vals = malloc(sizeof(double) * CAND_CAP);
    if (!jobs || !colrun || !x.pa || !x.pb || !x.vals)
        goto done;
    jobs->block = alloc64(sizeof(float) * ROW_BLOCK * COL_BLOCK);
    jobs->rows = malloc(sizeof(int32_t) * (CAND_CAP + CAND_SLACK));
    jobs->cols = malloc(sizeof(int32_t) * (CAND_CAP + CAND_SLACK));
    if (!jobs->block || !jobs->rows || !jobs->cols)
        goto done;
#ifdef NBNN_AMX_BUILD
    jobs->rtop1 = alloc64(sizeof(__m512) * ROW_BLOCK);
    jobs->rtop2 = alloc64(sizeof(__m512) * ROW_BLOCK);
    jobs->ctop1 = alloc64(sizeof(float) * COL_BLOCK);
    jobs->ctop2 = alloc64(sizeof(float) * COL_BLOCK);
    if (!jobs->rtop1 || !jobs->rtop2 || !jobs->ctop1 || !jobs->ctop2)
        goto done;
#endif

    if (screen == NBNN_SCREEN_F32) {
        q32 = malloc(sizeof(float) * n_rows * dim);
        s32 = malloc(sizeof(float) * n_pool * dim);
        if (!q32 || !s32)
            goto done;
        for (int64_t m = 0; m < n_img; m++)
            for (int64_t t = 0; t < (img_offsets[m + 1] - img_offsets[m]) * dim; t++)
                q32[img_offsets[m] * dim + t] = (float)q_img[m][t];
        for (int64_t t = 0; t < n_pool * dim; t++)
            s32[t] = (float)s64[t];
    }
#ifdef NBNN_AMX_BUILD
    else {
        panel_base = malloc(sizeof(int64_t) * (n_classes + 1));
        if (!panel_base)
            goto done;
        x.col_class = malloc(sizeof(int32_t) * n_pool);
        x.cc_cnt = malloc(sizeof(int32_t) * n_pool);
        if (!x.col_class || !x.cc_cnt)
            goto done;
        panel_base[0] = 0;
        for (int64_t c = 0; c < n_classes; c++) {
            panel_base[c + 1] = panel_base[c] + round_up(class_offsets[c + 1] - class_offsets[c], 32) / 16;
            for (int64_t j = class_offsets[c]; j < class_offsets[c + 1]; j++)
                x.col_class[j] = (int32_t)c;
        }
        size_t s_elems = (size_t)panel_base[n_classes] * kb_count * 512;
        size_t q_elems = (size_t)(round_up(max_img, 32) / 16) * kb_count * 512;
        sh = alloc64(sizeof(uint16_t) * s_elems);
        sl = alloc64(sizeof(uint16_t) * s_elems);
        qh = alloc64(sizeof(uint16_t) * q_elems);
        ql = alloc64(sizeof(uint16_t) * q_elems);
        if (!sh || !sl || !qh || !ql)
            goto done;
        for (int64_t c = 0; c < n_classes; c++) {
            size_t off = (size_t)panel_base[c] * kb_count * 512;
            pack_cols(s64 + class_offsets[c] * dim, class_offsets[c + 1] - class_offsets[c], dim, kb_count,
                      sh + off, sl + off);
        }
        amx_configure();
        configured = 1;
    }
#endif

    job_t *b = jobs;
    for (int64_t m = 0; m < n_img; m++) {
        const int64_t img_lo = img_offsets[m], img_hi = img_offsets[m + 1];
        if (img_hi <= img_lo)
            continue;
        for (int64_t j = 0; j < n_pool; j++)
            colrun[j] = -INFINITY;
#ifdef NBNN_AMX_BUILD
        x.cc_n = 0;
        if (screen == NBNN_SCREEN_BF16X3)
            pack_rows(q_img[m], img_hi - img_lo, dim, kb_count, qh, ql);
#endif
        for (int64_t r0 = img_lo; r0 < img_hi; r0 += ROW_BLOCK) {
            const int64_t R = img_hi - r0 < ROW_BLOCK ? img_hi - r0 : ROW_BLOCK;
            for (int64_t c = 0; c < n_classes; c++) {
                const int64_t lo = class_offsets[c], hi = class_offsets[c + 1];
                for (int64_t j0 = lo; j0 < hi; j0 += COL_BLOCK) {
                    const int64_t W = hi - j0 < COL_BLOCK ? hi - j0 : COL_BLOCK;
                    job_begin(b, q_img[m] + (r0 - img_lo) * dim, r0, R, img_lo, j0, W, c, back_row + m * n_pool,
                              back_val + m * n_pool);
                    if (screen == NBNN_SCREEN_F32) {
                        char ta = 'T', tb = 'N';
                        int mm = (int)W, nn = (int)R, kk = (int)dim, lda = (int)dim, ldc = COL_BLOCK;
                        float one = 1.0f, zero = 0.0f;
                        sgemm(&ta, &tb, &mm, &nn, &kk, &one, s32 + j0 * dim, &lda, q32 + r0 * dim, &lda, &zero,
                              b->block, &ldc);
                        job_scan_all(&x, b, colrun + j0);
                    }
#ifdef NBNN_AMX_BUILD
                    else {
                        const int64_t pstride = kb_count * 512;
                        const int64_t rp0 = (r0 - img_lo) / 16, cp0 = panel_base[c] + (j0 - lo) / 16;
                        const int64_t Rp = round_up(R, 32), Wp = round_up(W, 32);
                        int64_t prt = -1, pct = 0;
                        job_reset_summaries(b);
                        for (int64_t rt = 0; rt < Rp; rt += 32)
                            for (int64_t ct = 0; ct < Wp; ct += 32) {
                                const int64_t ap = (rp0 + rt / 16) * pstride, bp = (cp0 + ct / 16) * pstride;
                                amx_tile_32x32(qh + ap, ql + ap, pstride, sh + bp, sl + bp, pstride, kb_count,
                                               b->block + rt * COL_BLOCK + ct, COL_BLOCK);
                                if (prt >= 0)
                                    tile_fold(b, prt, pct);
                                prt = rt;
                                pct = ct;
                            }
                        tile_fold(b, prt, pct);
                        job_extract(&x, b, colrun + j0);
                        if (x.oom)
                            goto done;
                    }
#endif
                }
            }
        }
#ifdef NBNN_AMX_BUILD
        if (screen == NBNN_SCREEN_BF16X3)
            image_cols(&x, q_img[m], img_lo, n_pool, colrun, back_row + m * n_pool, back_val + m * n_pool);
#endif
    }
    rc = 0;

done:
#ifdef NBNN_AMX_BUILD
    if (configured)
        amx_release();
#endif
    if (jobs) {
        free(jobs->block);
        free(jobs->rows);
        free(jobs->cols);
#ifdef NBNN_AMX_BUILD
        free(jobs->rtop1);
        free(jobs->rtop2);
        free(jobs->ctop1);
        free(jobs->ctop2);
#endif
    }
    free(jobs);
    free(colrun);
    free(x.pa);
    free(x.pb);
    free(x.vals);
    free(q32);
    free(s32);
    free(qh);
    free(ql);
    free(sh);
    free(sl);
    free(panel_base);
#ifdef NBNN_AMX_BUILD
    free(x.cc_row);
    free(x.cc_col);
    free(x.cc_val);
    free(x.col_class);
    free(x.cc_cnt);
#endif
    return rc;
}
