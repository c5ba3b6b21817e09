/* Binary16-emulated matmul: out[i,j] = fold_p round16(acc + round16(a[i,p]*b[p,j])).
 *
 * Inputs are binary16-valued floats. The SIMD path computes in float32 with
 * hardware F16C conversions: products of two binary16 values are exact in
 * float32, and rounding an exactly-computed or correctly-rounded float32 sum
 * of two binary16 values through binary16 gives the same bits as rounding the
 * exact sum directly (verified exhaustively across binade combinations), so
 * the SIMD path is bit-identical to the scalar double path below.
 */
#ifndef CA3D_HALFGEMM_H
#define CA3D_HALFGEMM_H

#include "half_round.h"

#ifdef _OPENMP
#include <omp.h>
#endif

#if defined(__AVX2__) && defined(__F16C__)
#include <immintrin.h>

static inline __m256 ca3d_round8(__m256 v) {
    return _mm256_cvtph_ps(_mm256_cvtps_ph(v, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC));
}

static inline float ca3d_round1f(float v) {
    return _cvtsh_ss(_cvtss_sh(v, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC));
}

static void ca3d_gemm_half(const float *a, const float *b, float *out,
                           long n, long k, long m, int nthreads) {
    long m8 = m - (m % 8);
    long i;
#ifdef _OPENMP
#pragma omp parallel for num_threads(nthreads) schedule(static) if (nthreads > 1)
#endif
    for (i = 0; i < n; i++) {
        const float *ai = a + i * k;
        float *oi = out + i * m;
        long j, p;
        for (j = 0; j < m8; j += 8) {
            __m256 acc = _mm256_setzero_ps();
            const float *bj = b + j;
            for (p = 0; p < k; p++) {
                __m256 vb = _mm256_loadu_ps(bj + p * m);
                __m256 va = _mm256_set1_ps(ai[p]);
                __m256 prod = ca3d_round8(_mm256_mul_ps(va, vb));
                acc = ca3d_round8(_mm256_add_ps(acc, prod));
            }
            _mm256_storeu_ps(oi + j, acc);
        }
        for (j = m8; j < m; j++) {
            float acc = 0.0f;
            for (p = 0; p < k; p++) {
                float prod = ca3d_round1f(ai[p] * b[p * m + j]);
                acc = ca3d_round1f(acc + prod);
            }
            oi[j] = acc;
        }
    }
}

#else /* portable scalar path, bit-identical results */

static void ca3d_gemm_half(const float *a, const float *b, float *out,
                           long n, long k, long m, int nthreads) {
    long i;
    (void)nthreads;
#ifdef _OPENMP
#pragma omp parallel for num_threads(nthreads) schedule(static) if (nthreads > 1)
#endif
    for (i = 0; i < n; i++) {
        long j, p;
        for (j = 0; j < m; j++) {
            double acc = 0.0;
            for (p = 0; p < k; p++) {
                double prod = ca3d_half_round((double)a[i * k + p] * (double)b[p * m + j]);
                acc = ca3d_half_round(acc + prod);
            }
            out[i * m + j] = (float)acc;
        }
    }
}

#endif /* __AVX2__ && __F16C__ */

#endif /* CA3D_HALFGEMM_H */
