#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <type_traits>
#include <vector>

#include "flowbench/util/thread_pool.hpp"

#if defined(__AVX512F__) || defined(__AVX2__)
#include <immintrin.h>
#endif

namespace flowbench::nn {

// Register-blocked f32 matrix multiply with packed panels and a fused
// epilogue (bias row add, optional relu). Rows of C are partitioned across
// the pool in fixed contiguous blocks, so results are bit-identical for any
// thread count. The f64 path is a plain reference implementation for the
// 64-bit gradient-check mode.

namespace detail {

#if defined(__AVX512F__)
inline constexpr int kMr = 8;
inline constexpr int kNr = 32;
#elif defined(__AVX2__)
inline constexpr int kMr = 6;
inline constexpr int kNr = 16;
#else
inline constexpr int kMr = 4;
inline constexpr int kNr = 8;
#endif

inline constexpr int b_panels(int N) { return (N + kNr - 1) / kNr; }
inline constexpr std::int64_t packed_b_size(int K, int N) {
    return static_cast<std::int64_t>(b_panels(N)) * K * kNr;
}

// Short-K shapes go through a 4x64 kernel: fewer pack/writeback passes per
// flop. Requires AVX-512 and N a multiple of 64 (packed size is identical).
inline bool use_wide64(int K, int N) {
#if defined(__AVX512F__)
    return K <= 96 && N % 64 == 0;
#else
    (void)K;
    (void)N;
    return false;
#endif
}

// Packs columns [n0, n0+nr) of B into [K x kNr], zero-padding short panels.
inline void pack_b_panel(const float* b, int ldb, int n0, int nr, int K, float* out) {
    for (int k = 0; k < K; ++k) {
        float* dst = out + static_cast<std::int64_t>(k) * kNr;
        const float* src = b + static_cast<std::int64_t>(k) * ldb + n0;
        std::memcpy(dst, src, sizeof(float) * static_cast<std::size_t>(nr));
        for (int r = nr; r < kNr; ++r) dst[r] = 0.0f;
    }
}

inline void pack_b_panel_w(const float* b, int ldb, int n0, int K, float* out) {
    for (int k = 0; k < K; ++k)
        std::memcpy(out + static_cast<std::int64_t>(k) * 64, b + static_cast<std::int64_t>(k) * ldb + n0,
                    sizeof(float) * 64);
}

inline void pack_b(const float* b, int ldb, int K, int N, float* out) {
    if (use_wide64(K, N)) {
        for (int j = 0; j < N / 64; ++j)
            pack_b_panel_w(b, ldb, j * 64, K, out + static_cast<std::int64_t>(j) * K * 64);
        return;
    }
    for (int j = 0; j < b_panels(N); ++j)
        pack_b_panel(b, ldb, j * kNr, std::min(kNr, N - j * kNr), K, out + static_cast<std::int64_t>(j) * K * kNr);
}

// Packs rows [m0, m0+mr) of op(A) into row-major [kMr x K], zero-padding
// short panels. Row-major panels avoid a transpose: the microkernel
// broadcasts from kMr streaming row pointers.
inline void pack_a_panel(const float* a, int lda, bool trans_a, int m0, int mr, int K, float* out) {
    if (!trans_a) {
        for (int r = 0; r < mr; ++r)
            std::memcpy(out + static_cast<std::int64_t>(r) * K, a + static_cast<std::int64_t>(m0 + r) * lda,
                        sizeof(float) * static_cast<std::size_t>(K));
    } else {
        // op(A)(m, k) = A[k * lda + m]: gather a column of the stored matrix.
        for (int r = 0; r < mr; ++r) {
            float* dst = out + static_cast<std::int64_t>(r) * K;
            for (int k = 0; k < K; ++k) dst[k] = a[static_cast<std::int64_t>(k) * lda + m0 + r];
        }
    }
}

#if defined(__AVX512F__)

inline void micro_kernel(const float* ap, int lda_k, const float* bp, int K, float* acc) {
    __m512 c[kMr][2];
    for (int r = 0; r < kMr; ++r) {
        c[r][0] = _mm512_setzero_ps();
        c[r][1] = _mm512_setzero_ps();
    }
    for (int k = 0; k < K; ++k) {
        __m512 b0 = _mm512_loadu_ps(bp + static_cast<std::int64_t>(k) * kNr);
        __m512 b1 = _mm512_loadu_ps(bp + static_cast<std::int64_t>(k) * kNr + 16);
        for (int r = 0; r < kMr; ++r) {
            __m512 av = _mm512_set1_ps(ap[static_cast<std::int64_t>(r) * lda_k + k]);
            c[r][0] = _mm512_fmadd_ps(av, b0, c[r][0]);
            c[r][1] = _mm512_fmadd_ps(av, b1, c[r][1]);
        }
    }
    for (int r = 0; r < kMr; ++r) {
        _mm512_storeu_ps(acc + r * kNr, c[r][0]);
        _mm512_storeu_ps(acc + r * kNr + 16, c[r][1]);
    }
}

// Wide-N microkernel used for short K (fewer writeback/pack passes per flop):
// 4 rows x 64 columns. Only correct when N is a multiple of 64.
inline void micro_kernel_4x64(const float* ap, int lda_k, const float* bp, int K, float* acc) {
    __m512 c[4][4];
    for (int r = 0; r < 4; ++r)
        for (int j = 0; j < 4; ++j) c[r][j] = _mm512_setzero_ps();
    for (int k = 0; k < K; ++k) {
        __m512 b0 = _mm512_loadu_ps(bp + static_cast<std::int64_t>(k) * 64);
        __m512 b1 = _mm512_loadu_ps(bp + static_cast<std::int64_t>(k) * 64 + 16);
        __m512 b2 = _mm512_loadu_ps(bp + static_cast<std::int64_t>(k) * 64 + 32);
        __m512 b3 = _mm512_loadu_ps(bp + static_cast<std::int64_t>(k) * 64 + 48);
        for (int r = 0; r < 4; ++r) {
            __m512 av = _mm512_set1_ps(ap[static_cast<std::int64_t>(r) * lda_k + k]);
            c[r][0] = _mm512_fmadd_ps(av, b0, c[r][0]);
            c[r][1] = _mm512_fmadd_ps(av, b1, c[r][1]);
            c[r][2] = _mm512_fmadd_ps(av, b2, c[r][2]);
            c[r][3] = _mm512_fmadd_ps(av, b3, c[r][3]);
        }
    }
    for (int r = 0; r < 4; ++r)
        for (int j = 0; j < 4; ++j) _mm512_storeu_ps(acc + r * 64 + 16 * j, c[r][j]);
}

// Running dot-product accumulator: lanes collect partial products across
// several add() calls and reduce once at the end.
struct DotAccum {
    __m512 v = _mm512_setzero_ps();
    float tail = 0.0f;
    void add(const float* a, const float* b, int n) {
        int i = 0;
        for (; i + 16 <= n; i += 16) v = _mm512_fmadd_ps(_mm512_loadu_ps(a + i), _mm512_loadu_ps(b + i), v);
        for (; i < n; ++i) tail += a[i] * b[i];
    }
    float finish() const { return _mm512_reduce_add_ps(v) + tail; }
};

// Contiguous dot product (fixed lane structure, deterministic per build).
inline float dot_f32(const float* a, const float* b, int n) {
    __m512 acc0 = _mm512_setzero_ps(), acc1 = _mm512_setzero_ps();
    int i = 0;
    for (; i + 32 <= n; i += 32) {
        acc0 = _mm512_fmadd_ps(_mm512_loadu_ps(a + i), _mm512_loadu_ps(b + i), acc0);
        acc1 = _mm512_fmadd_ps(_mm512_loadu_ps(a + i + 16), _mm512_loadu_ps(b + i + 16), acc1);
    }
    for (; i + 16 <= n; i += 16)
        acc0 = _mm512_fmadd_ps(_mm512_loadu_ps(a + i), _mm512_loadu_ps(b + i), acc0);
    float s = _mm512_reduce_add_ps(_mm512_add_ps(acc0, acc1));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

#elif defined(__AVX2__)

struct DotAccum {
    __m256 v = _mm256_setzero_ps();
    float tail = 0.0f;
    void add(const float* a, const float* b, int n) {
        int i = 0;
        for (; i + 8 <= n; i += 8) v = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), v);
        for (; i < n; ++i) tail += a[i] * b[i];
    }
    float finish() const {
        float lanes[8];
        _mm256_storeu_ps(lanes, v);
        return ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) +
               ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail;
    }
};

inline void micro_kernel(const float* ap, int lda_k, const float* bp, int K, float* acc) {
    __m256 c[kMr][2];
    for (int r = 0; r < kMr; ++r) {
        c[r][0] = _mm256_setzero_ps();
        c[r][1] = _mm256_setzero_ps();
    }
    for (int k = 0; k < K; ++k) {
        __m256 b0 = _mm256_loadu_ps(bp + static_cast<std::int64_t>(k) * kNr);
        __m256 b1 = _mm256_loadu_ps(bp + static_cast<std::int64_t>(k) * kNr + 8);
        for (int r = 0; r < kMr; ++r) {
            __m256 av = _mm256_set1_ps(ap[static_cast<std::int64_t>(r) * lda_k + k]);
            c[r][0] = _mm256_fmadd_ps(av, b0, c[r][0]);
            c[r][1] = _mm256_fmadd_ps(av, b1, c[r][1]);
        }
    }
    for (int r = 0; r < kMr; ++r) {
        _mm256_storeu_ps(acc + r * kNr, c[r][0]);
        _mm256_storeu_ps(acc + r * kNr + 8, c[r][1]);
    }
}

inline float dot_f32(const float* a, const float* b, int n) {
    __m256 acc0 = _mm256_setzero_ps(), acc1 = _mm256_setzero_ps();
    int i = 0;
    for (; i + 16 <= n; i += 16) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
        acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
    }
    __m256 acc = _mm256_add_ps(acc0, acc1);
    float lanes[8];
    _mm256_storeu_ps(lanes, acc);
    float s = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) +
              ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

#else

struct DotAccum {
    float tail = 0.0f;
    void add(const float* a, const float* b, int n) {
        for (int i = 0; i < n; ++i) tail += a[i] * b[i];
    }
    float finish() const { return tail; }
};

inline void micro_kernel(const float* ap, int lda_k, const float* bp, int K, float* acc) {
    for (int i = 0; i < kMr * kNr; ++i) acc[i] = 0.0f;
    for (int k = 0; k < K; ++k) {
        const float* brow = bp + static_cast<std::int64_t>(k) * kNr;
        for (int r = 0; r < kMr; ++r) {
            float av = ap[static_cast<std::int64_t>(r) * lda_k + k];
            for (int n = 0; n < kNr; ++n) acc[r * kNr + n] += av * brow[n];
        }
    }
}

inline float dot_f32(const float* a, const float* b, int n) {
    float s = 0.0f;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

#endif

struct Epilogue {
    const float* bias = nullptr;  // length N row added at writeback
    bool relu = false;
    bool accumulate = false;  // c += acc; excludes bias/relu
};

// Applies the epilogue to one accumulated row segment.
inline void write_row(float* crow, const float* arow, int n0, int nr, const Epilogue& ep) {
    if (ep.accumulate) {
        for (int n = 0; n < nr; ++n) crow[n] += arow[n];
    } else if (ep.bias && ep.relu) {
        for (int n = 0; n < nr; ++n) crow[n] = std::max(arow[n] + ep.bias[n0 + n], 0.0f);
    } else if (ep.bias) {
        for (int n = 0; n < nr; ++n) crow[n] = arow[n] + ep.bias[n0 + n];
    } else if (ep.relu) {
        for (int n = 0; n < nr; ++n) crow[n] = std::max(arow[n], 0.0f);
    } else {
        for (int n = 0; n < nr; ++n) crow[n] = arow[n];
    }
}

// Core driver: B already packed; A panels come from `pack_a(m0, mr, pad, out)`
// producing row-major [pad x K] panels with rows mr..pad zeroed.
template <typename PackA>
inline void gemm_packed_driver(PackA&& pack_a, const float* bp_all, float* c, int ldc, int M,
                               int N, int K, const Epilogue& ep, util::ThreadPool* pool) {
#if defined(__AVX512F__)
    if (use_wide64(K, N)) {
        const int m_panels4 = (M + 3) / 4;
        auto run4 = [&](std::int64_t p0, std::int64_t p1) {
            std::vector<float> ap(static_cast<std::size_t>(K) * 4);
            float acc[4 * 64];
            for (std::int64_t pi = p0; pi < p1; ++pi) {
                int m0 = static_cast<int>(pi) * 4;
                int mr = std::min(4, M - m0);
                pack_a(m0, mr, 4, ap.data());
                for (int j = 0; j < N / 64; ++j) {
                    micro_kernel_4x64(ap.data(), K, bp_all + static_cast<std::int64_t>(j) * K * 64, K, acc);
                    for (int r = 0; r < mr; ++r)
                        write_row(c + static_cast<std::int64_t>(m0 + r) * ldc + j * 64, acc + r * 64, j * 64, 64, ep);
                }
            }
        };
        if (pool != nullptr && pool->size() > 1 && m_panels4 > 1)
            pool->parallel_for(m_panels4, run4);
        else
            run4(0, m_panels4);
        return;
    }
#endif
    const int n_panels = b_panels(N);
    const int m_panels = (M + kMr - 1) / kMr;

    auto run_rows = [&](std::int64_t p0, std::int64_t p1) {
        std::vector<float> ap(static_cast<std::size_t>(K) * kMr);
        float acc[kMr * kNr];
        for (std::int64_t pi = p0; pi < p1; ++pi) {
            int m0 = static_cast<int>(pi) * kMr;
            int mr = std::min(kMr, M - m0);
            pack_a(m0, mr, kMr, ap.data());
            for (int j = 0; j < n_panels; ++j) {
                int n0 = j * kNr;
                int nr = std::min(kNr, N - n0);
                micro_kernel(ap.data(), K, bp_all + static_cast<std::int64_t>(j) * K * kNr, K, acc);
                for (int r = 0; r < mr; ++r)
                    write_row(c + static_cast<std::int64_t>(m0 + r) * ldc + n0, acc + r * kNr, n0, nr, ep);
            }
        }
    };

    if (pool != nullptr && pool->size() > 1 && m_panels > 1) {
        pool->parallel_for(m_panels, run_rows);
    } else {
        run_rows(0, m_panels);
    }
}

// Small-N fallback: B transposed to [N][K] so each output is a contiguous dot.
inline void gemm_small_n(const float* a, int lda, const float* b, int ldb, float* c, int ldc,
                         int M, int N, int K, bool trans_a, const Epilogue& ep) {
    std::vector<float> bt(static_cast<std::size_t>(N) * K);
    for (int k = 0; k < K; ++k)
        for (int n = 0; n < N; ++n) bt[static_cast<std::size_t>(n) * K + k] = b[static_cast<std::int64_t>(k) * ldb + n];
    std::vector<float> arow_buf;
    for (int m = 0; m < M; ++m) {
        const float* arow;
        if (!trans_a) {
            arow = a + static_cast<std::int64_t>(m) * lda;
        } else {
            arow_buf.resize(static_cast<std::size_t>(K));
            for (int k = 0; k < K; ++k) arow_buf[static_cast<std::size_t>(k)] = a[static_cast<std::int64_t>(k) * lda + m];
            arow = arow_buf.data();
        }
        float* crow = c + static_cast<std::int64_t>(m) * ldc;
        for (int n = 0; n < N; ++n) {
            float acc = dot_f32(arow, bt.data() + static_cast<std::size_t>(n) * K, K);
            if (ep.accumulate)
                crow[n] += acc;
            else if (ep.bias)
                crow[n] = ep.relu ? std::max(acc + ep.bias[n], 0.0f) : acc + ep.bias[n];
            else
                crow[n] = ep.relu ? std::max(acc, 0.0f) : acc;
        }
    }
}

}  // namespace detail

// C[M x N] (+)= op(A) * B with op(A) = A [M x K] row-major, or A^T when
// trans_a (A then stored [K x M]). Optional fused bias/relu epilogue.
// `packed_b` may point at a detail::packed_b_size(K, N) buffer; when
// `packed_b_valid` it is used as-is (weights cached by frozen-weight graphs),
// otherwise it is filled. Without a buffer a thread-local scratch is used.
inline void gemm_f32(const float* a, int lda, const float* b, int ldb, float* c, int ldc, int M,
                     int N, int K, bool trans_a = false, bool accumulate = false,
                     util::ThreadPool* pool = nullptr, const float* bias = nullptr,
                     bool relu = false, float* packed_b = nullptr, bool packed_b_valid = false) {
    using namespace detail;
    if (M <= 0 || N <= 0) return;
    Epilogue ep;
    ep.bias = bias;
    ep.relu = relu;
    ep.accumulate = accumulate;
    if (K <= 0) {
        for (int m = 0; m < M; ++m) {
            float* crow = c + static_cast<std::int64_t>(m) * ldc;
            if (accumulate) continue;
            for (int n = 0; n < N; ++n) crow[n] = bias ? bias[n] : 0.0f;
            if (relu)
                for (int n = 0; n < N; ++n) crow[n] = std::max(crow[n], 0.0f);
        }
        return;
    }
    if (N < 8 && packed_b == nullptr) {
        gemm_small_n(a, lda, b, ldb, c, ldc, M, N, K, trans_a, ep);
        return;
    }

    float* bp_all = packed_b;
    if (bp_all == nullptr) {
        static thread_local std::vector<float> bp_store;
        bp_store.resize(static_cast<std::size_t>(packed_b_size(K, N)));
        bp_all = bp_store.data();
        pack_b(b, ldb, K, N, bp_all);
    } else if (!packed_b_valid) {
        pack_b(b, ldb, K, N, bp_all);
    }

    auto pack_a = [&](int m0, int mr, int pad, float* out) {
        pack_a_panel(a, lda, trans_a, m0, mr, K, out);
        for (int r = mr; r < pad; ++r)
            std::memset(out + static_cast<std::int64_t>(r) * K, 0, sizeof(float) * static_cast<std::size_t>(K));
    };
    gemm_packed_driver(pack_a, bp_all, c, ldc, M, N, K, ep, pool);
}

// Reference path for the 64-bit gradient-check mode.
inline void gemm_f64(const double* a, int lda, const double* b, int ldb, double* c, int ldc,
                     int M, int N, int K, bool trans_a = false, bool accumulate = false,
                     util::ThreadPool* = nullptr) {
    for (int m = 0; m < M; ++m) {
        double* crow = c + static_cast<std::int64_t>(m) * ldc;
        if (!accumulate) std::fill(crow, crow + N, 0.0);
    }
    for (int m = 0; m < M; ++m) {
        double* crow = c + static_cast<std::int64_t>(m) * ldc;
        for (int k = 0; k < K; ++k) {
            double av = trans_a ? a[static_cast<std::int64_t>(k) * lda + m]
                                : a[static_cast<std::int64_t>(m) * lda + k];
            const double* brow = b + static_cast<std::int64_t>(k) * ldb;
            for (int n = 0; n < N; ++n) crow[n] += av * brow[n];
        }
    }
}

template <typename T>
inline void gemm(const T* a, int lda, const T* b, int ldb, T* c, int ldc, int M, int N, int K,
                 bool trans_a = false, bool accumulate = false, util::ThreadPool* pool = nullptr) {
    if constexpr (std::is_same_v<T, float>)
        gemm_f32(a, lda, b, ldb, c, ldc, M, N, K, trans_a, accumulate, pool);
    else
        gemm_f64(a, lda, b, ldb, c, ldc, M, N, K, trans_a, accumulate, pool);
}

}  // namespace flowbench::nn
