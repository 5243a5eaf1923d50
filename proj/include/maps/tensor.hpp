#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace maps {

// Dense row-major float matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

    static Matrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::span<const float> values() const { return data_; }
    std::span<float> values() { return data_; }

    Matrix transposed() const;
    Matrix scaled(float c) const;

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// Right-hand GEMM operand repacked into column panels of kPanelWidth so the
// micro-kernel streams one contiguous (inner x kPanelWidth) strip at a time.
// Trailing panel is zero padded.
class PackedMatrix {
public:
    static constexpr std::size_t kPanelWidth = 16;

    PackedMatrix() = default;
    explicit PackedMatrix(const Matrix& m);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t panels() const { return (cols_ + kPanelWidth - 1) / kPanelWidth; }
    const float* panel(std::size_t p) const { return data_.data() + p * rows_ * kPanelWidth; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// out[r, j] = sum_p a[r, p] * b[p, j] for r in [0, n_rows), j in [col_begin, col_end)
// where a has row stride a_stride and out has row stride out_stride
// (column j of b lands in out column j - col_begin).
//
// Every output element is accumulated as acc = fma(a[p], b[p, j], acc) for
// p = 0, 1, ... starting from acc = 0, independent of tiling, so results do
// not depend on how rows or columns are partitioned across calls.
void gemm_rows(const float* a, std::size_t a_stride, std::size_t n_rows,
               const PackedMatrix& b, std::size_t panel_begin, std::size_t panel_end,
               float* out, std::size_t out_stride);

// Convenience: full product a * b.
Matrix matmul(const Matrix& a, const PackedMatrix& b, unsigned workers = 1);
Matrix matmul(const Matrix& a, const Matrix& b, unsigned workers = 1);

// Runs fn(begin, end) over a static partition of [0, n) into at most
// `workers` contiguous chunks. Chunk boundaries depend only on n and workers.
void parallel_for(std::size_t n, unsigned workers,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace maps
