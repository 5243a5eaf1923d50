#include "maps/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <exception>
#include <thread>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define MAPS_HAVE_AVX2_FMA 1
#endif

namespace maps {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw std::invalid_argument("Matrix: data size does not match shape");
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

Matrix Matrix::scaled(float c) const {
    Matrix out = *this;
    for (float& v : out.data_) v *= c;
    return out;
}

PackedMatrix::PackedMatrix(const Matrix& m) : rows_(m.rows()), cols_(m.cols()) {
    data_.assign(panels() * rows_ * kPanelWidth, 0.0f);
    for (std::size_t p = 0; p < panels(); ++p) {
        float* dst = data_.data() + p * rows_ * kPanelWidth;
        const std::size_t c0 = p * kPanelWidth;
        const std::size_t width = std::min(kPanelWidth, cols_ - c0);
        for (std::size_t r = 0; r < rows_; ++r) {
            const float* src = m.data() + r * cols_ + c0;
            std::copy(src, src + width, dst + r * kPanelWidth);
        }
    }
}

namespace {

constexpr std::size_t kW = PackedMatrix::kPanelWidth;

#ifdef MAPS_HAVE_AVX2_FMA

template <int R>
void micro_kernel(const float* a, std::size_t a_stride, std::size_t inner, const float* panel,
                  float* out, std::size_t out_stride, std::size_t width) {
    __m256 lo[R];
    __m256 hi[R];
    for (int r = 0; r < R; ++r) {
        lo[r] = _mm256_setzero_ps();
        hi[r] = _mm256_setzero_ps();
    }
    for (std::size_t p = 0; p < inner; ++p) {
        const __m256 b0 = _mm256_loadu_ps(panel + p * kW);
        const __m256 b1 = _mm256_loadu_ps(panel + p * kW + 8);
        for (int r = 0; r < R; ++r) {
            const __m256 av = _mm256_broadcast_ss(a + r * a_stride + p);
            lo[r] = _mm256_fmadd_ps(av, b0, lo[r]);
            hi[r] = _mm256_fmadd_ps(av, b1, hi[r]);
        }
    }
    if (width == kW) {
        for (int r = 0; r < R; ++r) {
            _mm256_storeu_ps(out + r * out_stride, lo[r]);
            _mm256_storeu_ps(out + r * out_stride + 8, hi[r]);
        }
    } else {
        alignas(32) float tmp[kW];
        for (int r = 0; r < R; ++r) {
            _mm256_store_ps(tmp, lo[r]);
            _mm256_store_ps(tmp + 8, hi[r]);
            std::copy(tmp, tmp + width, out + r * out_stride);
        }
    }
}

#else

template <int R>
void micro_kernel(const float* a, std::size_t a_stride, std::size_t inner, const float* panel,
                  float* out, std::size_t out_stride, std::size_t width) {
    float acc[R][kW] = {};
    for (std::size_t p = 0; p < inner; ++p) {
        const float* b = panel + p * kW;
        for (int r = 0; r < R; ++r) {
            const float av = a[r * a_stride + p];
            for (std::size_t j = 0; j < kW; ++j) acc[r][j] = std::fma(av, b[j], acc[r][j]);
        }
    }
    for (int r = 0; r < R; ++r) std::copy(acc[r], acc[r] + width, out + r * out_stride);
}

#endif

constexpr int kRowTile = 6;

void row_tile(int rows, const float* a, std::size_t a_stride, std::size_t inner,
              const float* panel, float* out, std::size_t out_stride, std::size_t width) {
    switch (rows) {
        case 6: micro_kernel<6>(a, a_stride, inner, panel, out, out_stride, width); break;
        case 5: micro_kernel<5>(a, a_stride, inner, panel, out, out_stride, width); break;
        case 4: micro_kernel<4>(a, a_stride, inner, panel, out, out_stride, width); break;
        case 3: micro_kernel<3>(a, a_stride, inner, panel, out, out_stride, width); break;
        case 2: micro_kernel<2>(a, a_stride, inner, panel, out, out_stride, width); break;
        case 1: micro_kernel<1>(a, a_stride, inner, panel, out, out_stride, width); break;
        default: break;
    }
}

}  // namespace

void gemm_rows(const float* a, std::size_t a_stride, std::size_t n_rows,
               const PackedMatrix& b, std::size_t panel_begin, std::size_t panel_end,
               float* out, std::size_t out_stride) {
    const std::size_t inner = b.rows();
    // Row groups of 48 keep the A strip resident while a panel is streamed.
    constexpr std::size_t kRowGroup = 8 * kRowTile;
    for (std::size_t g = 0; g < n_rows; g += kRowGroup) {
        const std::size_t g_end = std::min(n_rows, g + kRowGroup);
        for (std::size_t p = panel_begin; p < panel_end; ++p) {
            const std::size_t c0 = p * kW;
            const std::size_t width = std::min(kW, b.cols() - c0);
            float* out_col = out + (c0 - panel_begin * kW);
            for (std::size_t r = g; r < g_end; r += kRowTile) {
                const int rows = static_cast<int>(std::min<std::size_t>(kRowTile, g_end - r));
                row_tile(rows, a + r * a_stride, a_stride, inner, b.panel(p),
                         out_col + r * out_stride, out_stride, width);
            }
        }
    }
}

Matrix matmul(const Matrix& a, const PackedMatrix& b, unsigned workers) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    Matrix out(a.rows(), b.cols());
    if (a.rows() == 0 || b.cols() == 0) return out;
    if (a.rows() >= b.panels()) {
        parallel_for(a.rows(), workers, [&](std::size_t r0, std::size_t r1) {
            gemm_rows(a.data() + r0 * a.cols(), a.cols(), r1 - r0, b, 0, b.panels(),
                      out.data() + r0 * out.cols(), out.cols());
        });
    } else {
        parallel_for(b.panels(), workers, [&](std::size_t p0, std::size_t p1) {
            gemm_rows(a.data(), a.cols(), a.rows(), b, p0, p1, out.data() + p0 * kW, out.cols());
        });
    }
    return out;
}

Matrix matmul(const Matrix& a, const Matrix& b, unsigned workers) {
    return matmul(a, PackedMatrix(b), workers);
}

void parallel_for(std::size_t n, unsigned workers,
                  const std::function<void(std::size_t, std::size_t)>& fn) {
    if (n == 0) return;
    const std::size_t chunks = std::max<std::size_t>(1, std::min<std::size_t>(workers, n));
    if (chunks == 1) {
        fn(0, n);
        return;
    }
    const std::size_t base = n / chunks;
    const std::size_t extra = n % chunks;
    std::vector<std::exception_ptr> errors(chunks);
    {
        std::vector<std::jthread> threads;
        threads.reserve(chunks - 1);
        std::size_t begin = 0;
        std::size_t first_end = 0;
        for (std::size_t c = 0; c < chunks; ++c) {
            const std::size_t end = begin + base + (c < extra ? 1 : 0);
            if (c == 0) {
                first_end = end;
            } else {
                threads.emplace_back([&fn, &errors, c, begin, end] {
                    try {
                        fn(begin, end);
                    } catch (...) {
                        errors[c] = std::current_exception();
                    }
                });
            }
            begin = end;
        }
        try {
            fn(0, first_end);
        } catch (...) {
            errors[0] = std::current_exception();
        }
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace maps
