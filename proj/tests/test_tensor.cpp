#include <doctest.h>

#include <atomic>
#include <mutex>
#include <stdexcept>
#include <vector>

#include "maps/tensor.hpp"
#include "oracles.hpp"

using maps::Matrix;
using maps::PackedMatrix;

TEST_SUITE("tensor") {

TEST_CASE("matmul matches the naive fma oracle bit for bit") {
    std::mt19937_64 rng(11);
    const std::size_t shapes[][3] = {{1, 1, 1}, {3, 5, 7}, {17, 33, 19}, {64, 16, 48}, {2, 40, 15}, {9, 1, 31}};
    for (const auto& s : shapes) {
        const Matrix a = oracle::random_matrix(s[0], s[1], rng);
        const Matrix b = oracle::random_matrix(s[1], s[2], rng);
        CHECK(maps::matmul(a, b) == oracle::matmul(a, b));
    }
}

TEST_CASE("matmul is worker-count invariant") {
    std::mt19937_64 rng(12);
    const Matrix a = oracle::random_matrix(53, 21, rng);
    const Matrix b = oracle::random_matrix(21, 70, rng);
    const Matrix ref = maps::matmul(a, b, 1);
    for (unsigned w : {2u, 3u, 8u, 64u}) CHECK(maps::matmul(a, b, w) == ref);
}

TEST_CASE("gemm_rows over a panel range yields the matching column slice") {
    std::mt19937_64 rng(13);
    const Matrix a = oracle::random_matrix(7, 9, rng);
    const Matrix b = oracle::random_matrix(9, 50, rng);
    const Matrix ref = oracle::matmul(a, b);
    const PackedMatrix pb(b);
    REQUIRE(pb.panels() == 4);
    // panels 1..3 cover columns 16..49
    const std::size_t c0 = PackedMatrix::kPanelWidth;
    std::vector<float> out(7 * (50 - c0), -1.0f);
    maps::gemm_rows(a.data(), a.cols(), a.rows(), pb, 1, pb.panels(), out.data(), 50 - c0);
    for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = c0; j < 50; ++j) CHECK(out[i * (50 - c0) + (j - c0)] == ref(i, j));
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    CHECK_THROWS_AS(maps::matmul(Matrix(2, 3), Matrix(4, 2)), std::invalid_argument);
}

TEST_CASE("transpose and identity") {
    Matrix m(2, 3, std::vector<float>{1, 2, 3, 4, 5, 6});
    const Matrix t = m.transposed();
    CHECK(t.rows() == 3);
    CHECK(t(2, 1) == 6.0f);
    CHECK(t.transposed() == m);
    CHECK(maps::matmul(m, Matrix::identity(3)) == m);
    CHECK(m.scaled(2.0f)(1, 2) == 12.0f);
}

TEST_CASE("parallel_for covers every index exactly once") {
    for (std::size_t n : {0u, 1u, 7u, 100u}) {
        for (unsigned w : {1u, 2u, 3u, 16u}) {
            std::vector<std::atomic<int>> hits(n);
            maps::parallel_for(n, w, [&](std::size_t b, std::size_t e) {
                for (std::size_t i = b; i < e; ++i) ++hits[i];
            });
            for (std::size_t i = 0; i < n; ++i) CHECK(hits[i] == 1);
        }
    }
}

TEST_CASE("parallel_for partitions depend only on n and workers") {
    auto chunks = [](unsigned w) {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        std::mutex mu;
        maps::parallel_for(37, w, [&](std::size_t b, std::size_t e) {
            std::lock_guard lock(mu);
            out.emplace_back(b, e);
        });
        std::sort(out.begin(), out.end());
        return out;
    };
    CHECK(chunks(4) == chunks(4));
    CHECK(chunks(4).size() == 4);
}

TEST_CASE("parallel_for propagates worker exceptions") {
    CHECK_THROWS_AS(maps::parallel_for(10, 4,
                                       [](std::size_t b, std::size_t) {
                                           if (b > 0) throw std::runtime_error("boom");
                                       }),
                    std::runtime_error);
}

}  // TEST_SUITE
