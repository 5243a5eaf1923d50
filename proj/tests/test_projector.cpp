#include <doctest.h>

#include <cmath>
#include <random>

#include "maps/errors.hpp"
#include "maps/projector.hpp"
#include "maps/toy.hpp"
#include "oracles.hpp"

using maps::Direction;
using maps::HeadOperator;
using maps::Matrix;
using maps::ScanOptions;
using maps::TokenId;
using maps::VocabSpace;

namespace {

// Small integer entries make products exact and ties frequent.
Matrix int_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, int lo = -2, int hi = 2) {
    std::uniform_int_distribution<int> dist(lo, hi);
    Matrix m(r, c);
    for (float& x : m.values()) x = static_cast<float>(dist(rng));
    return m;
}

struct Fixture {
    Matrix e, w, u;
    HeadOperator op;
};

Fixture make_fixture(std::size_t v, std::size_t d, std::mt19937_64& rng, bool integer) {
    Matrix e = integer ? int_matrix(v, d, rng) : oracle::random_matrix(v, d, rng);
    Matrix w = integer ? int_matrix(d, d, rng) : oracle::random_matrix(d, d, rng);
    Matrix u = integer ? int_matrix(d, v, rng) : oracle::random_matrix(d, v, rng);
    HeadOperator op(VocabSpace(e, u), w);
    return {std::move(e), std::move(w), std::move(u), std::move(op)};
}

maps::TokenizedRelation relation_of(const std::vector<std::pair<TokenId, TokenId>>& pairs) {
    maps::TokenizedRelation r;
    r.spec.name = "r";
    r.pairs = pairs;
    return r;
}

std::vector<std::pair<TokenId, TokenId>> random_relation(std::size_t v, std::size_t n, std::mt19937_64& rng) {
    std::uniform_int_distribution<TokenId> id(0, static_cast<TokenId>(v - 1));
    std::vector<std::pair<TokenId, TokenId>> out;
    for (std::size_t i = 0; i < n; ++i) out.emplace_back(id(rng), id(rng));
    return out;
}

std::vector<float> negated(std::span<const float> row) {
    std::vector<float> out(row.begin(), row.end());
    for (float& x : out) x = -x;
    return out;
}

}  // namespace

TEST_SUITE("projector") {

TEST_CASE("topk_targets worked examples") {
    const std::vector<float> row = {0.1f, 0.9f, 0.5f};
    CHECK(maps::topk_targets(row, 2, Direction::promote) == std::vector<TokenId>{1, 2});
    CHECK(maps::topk_targets(row, 2, Direction::suppress) == std::vector<TokenId>{0, 2});
    const std::vector<float> flat(5, 0.3f);
    CHECK(maps::topk_targets(flat, 2, Direction::promote) == std::vector<TokenId>{0, 1});
    CHECK(maps::topk_targets(flat, 2, Direction::suppress) == std::vector<TokenId>{0, 1});
    CHECK_THROWS_AS(maps::topk_targets(row, 0, Direction::promote), maps::UsageError);
    CHECK_THROWS_AS(maps::topk_targets(row, 4, Direction::promote), maps::UsageError);
}

TEST_CASE("topk_targets and in_topk agree with a full-sort oracle under ties") {
    std::mt19937_64 rng(31);
    std::uniform_int_distribution<int> val(-3, 3);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<float> row(1 + trial % 40);
        for (float& x : row) x = static_cast<float>(val(rng));
        const std::size_t k = 1 + static_cast<std::size_t>(trial) % row.size();
        for (Direction dir : {Direction::promote, Direction::suppress}) {
            const bool sup = dir == Direction::suppress;
            const auto want = oracle::topk(row, k, sup);
            REQUIRE(maps::topk_targets(row, k, dir) == want);
            for (TokenId t = 0; t < row.size(); ++t) {
                const bool in = std::find(want.begin(), want.end(), t) != want.end();
                REQUIRE(maps::in_topk(row, t, k, dir) == in);
            }
        }
    }
}

TEST_CASE("classification threshold is inclusive") {
    CHECK(maps::classify(0.15, 0.15));
    CHECK_FALSE(maps::classify(0.149, 0.15));
    CHECK(maps::classify(1.0, 0.15));
    CHECK(maps::classify(0.0, 0.0));
    CHECK_THROWS_AS(maps::classify(0.5, 1.5), maps::UsageError);
}

TEST_CASE("blocked projector equals the full-M oracle bit for bit") {
    std::mt19937_64 rng(32);
    const std::size_t vs[] = {5, 17, 33, 64};
    for (std::size_t v : vs) {
        for (bool integer : {false, true}) {
            const std::size_t d = integer ? 6 : 3 + v % 11;
            const Fixture f = make_fixture(v, d, rng, integer);
            const Matrix m = oracle::full_m(f.e, f.w, f.u);
            for (std::size_t block : {1u, 3u, 64u, 1024u}) {
                for (unsigned workers : {1u, 3u}) {
                    const ScanOptions opts{block, workers, nullptr};
                    std::vector<TokenId> ids(v);
                    std::iota(ids.begin(), ids.end(), 0u);
                    REQUIRE(maps::mapping_rows(f.op, ids, opts) == m);

                    const auto pairs = random_relation(v, 12, rng);
                    for (std::size_t k : {std::size_t{1}, std::size_t{3}, v}) {
                        for (Direction dir : {Direction::promote, Direction::suppress}) {
                            const auto got = maps::relation_score(f.op, relation_of(pairs), k, dir, 0.15, opts);
                            REQUIRE(got.score == oracle::relation_score(m, pairs, k, dir == Direction::suppress));
                        }
                    }

                    const auto prof = maps::saliency(f.op, opts);
                    REQUIRE(prof.sigma == oracle::saliency(f.e, f.w));
                    REQUIRE(maps::output_space_size(f.op, opts) == oracle::output_space_size(f.e, f.w, f.u));
                    const auto targets = maps::argmax_targets(f.op, opts);
                    REQUIRE(targets == oracle::argmax_rows(oracle::full_m(f.e, f.w, oracle::unit_columns(f.u))));

                    const std::size_t kt = std::min<std::size_t>(v, 30), n = std::min<std::size_t>(v, 5);
                    if (std::any_of(prof.sigma.begin(), prof.sigma.end(), [](double s) { return s != 0.0; })) {
                        const auto set = maps::salient_mappings(f.op, kt, n, nullptr, opts);
                        const auto ref = oracle::salient(f.e, f.w, f.u, kt, n);
                        REQUIRE(set.entries.size() == ref.size());
                        for (std::size_t i = 0; i < ref.size(); ++i) {
                            REQUIRE(set.entries[i].source_id == ref[i].source);
                            REQUIRE(set.entries[i].sigma == ref[i].sigma);
                            for (std::size_t j = 0; j < n; ++j) {
                                REQUIRE(set.entries[i].targets[j].id == ref[i].targets[j]);
                                REQUIRE(set.entries[i].targets[j].score == ref[i].scores[j]);
                            }
                        }
                    }
                }
            }
            for (TokenId s = 0; s < v; ++s) {
                const auto row = maps::mapping_row(f.op, s);
                REQUIRE(row.source_id == s);
                REQUIRE(std::equal(row.scores.begin(), row.scores.end(), m.row(s).begin()));
            }
        }
    }
}

TEST_CASE("zero W_VO gives all-zero rows") {
    std::mt19937_64 rng(33);
    const HeadOperator op(VocabSpace(oracle::random_matrix(5, 3, rng), oracle::random_matrix(3, 5, rng)), Matrix(3, 3));
    const auto row = maps::mapping_row(op, 2);
    CHECK(row.scores == std::vector<float>(5, 0.0f));
    CHECK_THROWS_AS(maps::salient_mappings(op, 3, 2), maps::DataError);
}

TEST_CASE("global top mappings match a full sort of M") {
    std::mt19937_64 rng(34);
    for (bool integer : {false, true}) {
        const Fixture f = make_fixture(20, 4, rng, integer);
        const Matrix m = oracle::full_m(f.e, f.w, f.u);
        std::vector<std::tuple<float, TokenId, TokenId>> all;
        for (TokenId s = 0; s < 20; ++s)
            for (TokenId t = 0; t < 20; ++t) all.emplace_back(m(s, t), s, t);
        std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
            if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
            return std::make_pair(std::get<1>(a), std::get<2>(a)) < std::make_pair(std::get<1>(b), std::get<2>(b));
        });
        for (std::size_t count : {1u, 7u, 50u}) {
            const auto got = maps::global_top_mappings(f.op, count, {3, 1, nullptr});
            REQUIRE(got.size() == count);
            for (std::size_t i = 0; i < count; ++i) {
                CHECK(got[i].first == std::get<1>(all[i]));
                CHECK(got[i].second == std::get<2>(all[i]));
            }
        }
    }
}

TEST_CASE("jaccard") {
    using P = maps::TokenPair;
    CHECK(maps::jaccard({P{1, 2}, P{3, 4}}, {P{3, 4}, P{1, 2}}) == 1.0);
    CHECK(maps::jaccard({P{1, 2}}, {P{2, 1}}) == 0.0);
    CHECK(maps::jaccard({P{1, 2}, P{3, 4}}, {P{1, 2}, P{5, 6}}) == doctest::Approx(1.0 / 3.0));
    CHECK(maps::jaccard({}, {}) == 1.0);
}

TEST_CASE("jaccard_top_vs_salient matches its oracle") {
    std::mt19937_64 rng(35);
    const Fixture f = make_fixture(24, 5, rng, false);
    const Matrix m = oracle::full_m(f.e, f.w, f.u);
    const auto ref = oracle::salient(f.e, f.w, f.u, 2, 5);
    std::vector<maps::TokenPair> salient;
    for (const auto& r : ref)
        for (TokenId t : r.targets) salient.emplace_back(r.source, t);
    const auto top = maps::global_top_mappings(f.op, 10);
    CHECK(maps::jaccard_top_vs_salient(f.op, 10) == maps::jaccard(top, salient));
}

TEST_CASE("relation_score evaluates exactly one row per pair") {
    std::mt19937_64 rng(36);
    const Fixture f = make_fixture(64, 8, rng, false);
    for (std::size_t n : {1u, 7u, 30u}) {
        for (std::size_t block : {1u, 4u, 1024u}) {
            maps::ScanStats stats;
            const auto pairs = random_relation(64, n, rng);
            maps::relation_score(f.op, relation_of(pairs), 3, Direction::promote, 0.15, {block, 2, &stats});
            CHECK(stats.rows_evaluated == n);
            CHECK(stats.peak_score_entries <= block * 64);
        }
    }
    CHECK_THROWS_AS(maps::relation_score(f.op, relation_of({}), 1, Direction::promote), maps::DataError);
    CHECK_THROWS_AS(maps::relation_score(f.op, relation_of({{0, 64}}), 1, Direction::promote), maps::DataError);
}

TEST_CASE("relation_score_both equals two single-direction passes") {
    std::mt19937_64 rng(37);
    for (int trial = 0; trial < 20; ++trial) {
        const Fixture f = make_fixture(32, 4, rng, trial % 2 == 0);
        const auto rel = relation_of(random_relation(32, 15, rng));
        for (std::size_t k : {1u, 5u}) {
            const auto [up, down] = maps::relation_score_both(f.op, rel, k);
            CHECK(up.score == maps::relation_score(f.op, rel, k, Direction::promote).score);
            CHECK(down.score == maps::relation_score(f.op, rel, k, Direction::suppress).score);
            CHECK(down.suppressive);
            CHECK_FALSE(up.suppressive);
        }
    }
}

TEST_CASE("suppression duality on random heads") {
    std::mt19937_64 rng(38);
    for (int trial = 0; trial < 50; ++trial) {
        const Fixture f = make_fixture(40, 6, rng, trial % 3 == 0);
        const HeadOperator neg(f.op.space(), f.w.scaled(-1.0f));
        const auto rel = relation_of(random_relation(40, 20, rng));
        for (std::size_t k : {1u, 4u, 10u}) {
            CHECK(maps::relation_score(f.op, rel, k, Direction::suppress).score ==
                  maps::relation_score(neg, rel, k, Direction::promote).score);
        }
        // rows of -W are exact negations, so top-k lists coincide too
        const auto row = maps::mapping_row(f.op, 3).scores;
        CHECK(maps::topk_targets(row, 5, Direction::suppress) ==
              maps::topk_targets(maps::mapping_row(neg, 3).scores, 5, Direction::promote));
        CHECK(maps::topk_targets(negated(row), 5, Direction::promote) ==
              maps::topk_targets(row, 5, Direction::suppress));
    }
}

TEST_CASE("saliency examples") {
    std::mt19937_64 rng(39);
    const Matrix e = oracle::random_matrix(10, 4, rng);
    const VocabSpace space(e, e.transposed());
    const auto id = maps::saliency(HeadOperator(space, Matrix::identity(4)));
    CHECK(id.sigma == std::vector<double>(10, 1.0));
    CHECK_FALSE(id.skewness.has_value());
    const auto twice = maps::saliency(HeadOperator(space, Matrix::identity(4).scaled(2.0f)));
    CHECK(twice.sigma == std::vector<double>(10, 2.0));

    Matrix z = e;
    for (float& x : z.row(4)) x = 0.0f;
    const auto prof = maps::saliency(HeadOperator(VocabSpace(z, z.transposed()), oracle::random_matrix(4, 4, rng)));
    CHECK(prof.sigma[4] == 0.0);
    CHECK(prof.warnings.size() == 1);
    for (double s : prof.sigma) CHECK(std::isfinite(s));
}

TEST_CASE("input skewness") {
    const std::vector<double> sym = {1, 2, 3};
    CHECK(std::abs(maps::input_skewness(sym)) <= 1e-9);
    const std::vector<double> x = {0, 0, 0, 1};
    CHECK(maps::input_skewness(x) == doctest::Approx(oracle::skewness(x)).epsilon(1e-12));
    CHECK(maps::input_skewness(x) == doctest::Approx(2.0 / std::sqrt(3.0)).epsilon(1e-12));
    CHECK_THROWS_AS(maps::input_skewness(std::vector<double>{2, 2, 2}), maps::DataError);
    CHECK_THROWS_AS(maps::input_skewness(std::vector<double>{1, 2}), maps::UsageError);

    std::mt19937_64 rng(40);
    std::gamma_distribution<double> gamma(2.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> s(3 + trial);
        for (double& v : s) v = gamma(rng);
        const double sk = maps::input_skewness(s);
        CHECK(sk == doctest::Approx(oracle::skewness(s)).epsilon(1e-9));
        // reflection flips the sign, positive affine maps preserve it
        std::vector<double> r(s), a(s);
        for (double& v : r) v = -v;
        for (double& v : a) v = 3.0 * v + 7.0;
        CHECK(maps::input_skewness(r) == doctest::Approx(-sk).epsilon(1e-9));
        CHECK(maps::input_skewness(a) == doctest::Approx(sk).epsilon(1e-9));
        // symmetric fixtures: the sample and its mirror image
        std::vector<double> both(s);
        for (double v : s) both.push_back(-v);
        CHECK(std::abs(maps::input_skewness(both)) <= 1e-9);
    }
}

TEST_CASE("output space size: rank one, permutation plant, identity") {
    std::mt19937_64 rng(41);
    {
        // every row of E W is a positive multiple of one direction
        Matrix e = oracle::random_matrix(30, 6, rng);
        for (std::size_t r = 0; r < 30; ++r) e(r, 0) = std::abs(e(r, 0)) + 0.1f;
        Matrix w(6, 6);
        const Matrix b = oracle::random_matrix(1, 6, rng);
        for (std::size_t j = 0; j < 6; ++j) w(0, j) = b(0, j);
        const HeadOperator op(VocabSpace(e, oracle::random_matrix(6, 30, rng)), w);
        CHECK(maps::output_space_size(op) == doctest::Approx(1.0 / 30.0));
    }
    {
        // E = I, row s of W is the unit unembedding column of pi(s)
        const std::size_t v = 32;
        const Matrix u = oracle::random_matrix(v, v, rng);
        const Matrix uhat = oracle::unit_columns(u);
        std::vector<TokenId> pi(v);
        std::iota(pi.begin(), pi.end(), 0u);
        std::shuffle(pi.begin(), pi.end(), rng);
        Matrix w(v, v);
        for (std::size_t s = 0; s < v; ++s)
            for (std::size_t j = 0; j < v; ++j) w(s, j) = uhat(j, pi[s]);
        const HeadOperator op(VocabSpace(Matrix::identity(v), u), w);
        CHECK(maps::output_space_size(op) == 1.0);
        CHECK(maps::argmax_targets(op) == pi);
    }
    {
        const Matrix e = oracle::random_matrix(64, 128, rng);
        const HeadOperator op(VocabSpace(e, e.transposed()), Matrix::identity(128));
        CHECK(maps::output_space_size(op) >= 0.9);
    }
}

TEST_CASE("output space size is block and worker invariant with bounded buffers") {
    std::mt19937_64 rng(42);
    const Fixture f = make_fixture(300, 16, rng, false);
    const auto ref = maps::argmax_targets(f.op, {1024, 1, nullptr});
    for (std::size_t block : {1u, 7u, 64u, 256u}) {
        for (unsigned w : {1u, 4u}) {
            maps::ScanStats stats;
            CHECK(maps::argmax_targets(f.op, {block, w, &stats}) == ref);
            CHECK(stats.peak_score_entries <= block * 300);
            CHECK(stats.rows_evaluated == 300);
        }
    }
}

TEST_CASE("scale invariance of rankings; saliency scales by c") {
    std::mt19937_64 rng(43);
    for (int trial = 0; trial < 10; ++trial) {
        const Fixture f = make_fixture(48, 8, rng, false);
        const auto rel = relation_of(random_relation(48, 20, rng));
        const auto base_sigma = maps::saliency(f.op).sigma;
        const auto base_set = maps::salient_mappings(f.op, 10, 5);
        for (float c : {0.5f, 3.0f}) {
            const HeadOperator scaled(f.op.space(), f.w.scaled(c));
            CHECK(maps::output_space_size(scaled) == maps::output_space_size(f.op));
            for (Direction dir : {Direction::promote, Direction::suppress}) {
                const auto a = maps::relation_score(f.op, rel, 3, dir);
                const auto b = maps::relation_score(scaled, rel, 3, dir);
                CHECK(a.score == b.score);
                CHECK(a.classified == b.classified);
            }
            for (TokenId s = 0; s < 48; s += 7) {
                CHECK(maps::topk_targets(maps::mapping_row(f.op, s).scores, 5, Direction::promote) ==
                      maps::topk_targets(maps::mapping_row(scaled, s).scores, 5, Direction::promote));
            }
            const auto sigma = maps::saliency(scaled).sigma;
            for (std::size_t t = 0; t < sigma.size(); ++t)
                CHECK(sigma[t] == doctest::Approx(c * base_sigma[t]).epsilon(1e-6));
            const auto set = maps::salient_mappings(scaled, 10, 5);
            for (std::size_t i = 0; i < 10; ++i) CHECK(set.entries[i].source_id == base_set.entries[i].source_id);
        }
    }
}

TEST_CASE("salient mappings of a planted toy recover the plant") {
    maps::toy::ToyModelSpec spec;
    spec.unplanted = maps::toy::UnplantedHeads::zero;
    spec.n_heads = 1;
    std::mt19937_64 rng(44);
    std::set<TokenId> exclude;
    const auto pairs = maps::toy::random_pairs(256, 30, rng, exclude);
    const auto toy = maps::toy::build_toy(spec, {{0, pairs, 8.0f}});
    const auto op = maps::toy::head_operator(toy, 0);
    const auto set = maps::salient_mappings(op, 30, 5);
    std::map<TokenId, TokenId> want(pairs.begin(), pairs.end());
    for (const auto& e : set.entries) {
        REQUIRE(want.count(e.source_id) == 1);
        CHECK(e.targets.front().id == want[e.source_id]);
        for (std::size_t j = 1; j < e.targets.size(); ++j) CHECK(e.targets[j - 1].score >= e.targets[j].score);
    }
    for (std::size_t i = 1; i < set.entries.size(); ++i) CHECK(set.entries[i - 1].sigma >= set.entries[i].sigma);
    CHECK_THROWS_AS(maps::salient_mappings(op, 257, 5), maps::UsageError);
}

TEST_CASE("salient mappings carry display strings from the vocabulary") {
    std::mt19937_64 rng(45);
    const Fixture f = make_fixture(6, 3, rng, false);
    const maps::Vocabulary v({"Ġa", "b", "Ġc", "d", "Ġe", "f"});
    const auto set = maps::salient_mappings(f.op, 2, 3, &v);
    for (const auto& e : set.entries) {
        CHECK(e.source == v.display(e.source_id));
        for (const auto& t : e.targets) CHECK(t.text == v.display(t.id));
    }
    const maps::Vocabulary small({"x"});
    CHECK_THROWS_AS(maps::salient_mappings(f.op, 2, 3, &small), maps::DataError);
}

TEST_CASE("random baseline heads") {
    std::mt19937_64 rng(46);
    std::vector<Matrix> layer;
    for (int h = 0; h < 4; ++h) layer.push_back(oracle::random_matrix(32, 32, rng, 0.5));
    for (float& x : layer[0].values()) x += 0.2f;
    const auto a = maps::random_baseline_heads(layer, 4, 7);
    const auto b = maps::random_baseline_heads(layer, 4, 7);
    const auto c = maps::random_baseline_heads(layer, 4, 8);
    CHECK(a == b);
    CHECK_FALSE(a == c);
    REQUIRE(a.size() == 4);
    double mean_ref = 0, mean_gen = 0, sq_ref = 0, sq_gen = 0;
    const double n = 4.0 * 32 * 32;
    for (int h = 0; h < 4; ++h)
        for (std::size_t i = 0; i < 32 * 32; ++i) {
            mean_ref += layer[h].values()[i];
            mean_gen += a[h].values()[i];
        }
    mean_ref /= n;
    mean_gen /= n;
    for (int h = 0; h < 4; ++h)
        for (std::size_t i = 0; i < 32 * 32; ++i) {
            sq_ref += std::pow(layer[h].values()[i] - mean_ref, 2);
            sq_gen += std::pow(a[h].values()[i] - mean_gen, 2);
        }
    const double sd_ref = std::sqrt(sq_ref / n), sd_gen = std::sqrt(sq_gen / n);
    // 4096 draws: standard error of the mean is sd / 64
    CHECK(std::abs(mean_gen - mean_ref) < 4 * sd_ref / 64);
    CHECK(std::abs(sd_gen / sd_ref - 1.0) < 0.05);
}

TEST_CASE("a random head scores below tau on a large vocabulary") {
    std::mt19937_64 rng(47);
    const std::size_t v = 50000, d = 32;
    const Matrix e = oracle::random_matrix(v, d, rng);
    std::vector<Matrix> layer = {oracle::random_matrix(d, d, rng)};
    const auto heads = maps::random_baseline_heads(layer, 1, 3);
    const HeadOperator op(VocabSpace(e, e.transposed()), heads[0]);
    std::set<TokenId> exclude;
    const auto pairs = maps::toy::random_pairs(v, 30, rng, exclude);
    const auto s = maps::relation_score(op, relation_of(pairs), 10, Direction::promote);
    CHECK(s.score < 0.15);
    CHECK_FALSE(s.classified);
}

TEST_CASE("capitalized space fraction") {
    CHECK(maps::capitalized_space_fraction(maps::Vocabulary({"Ġa", "ĠA", "b", "ĠB"})) == 0.5);
    CHECK(maps::capitalized_space_fraction(maps::Vocabulary({"A", "B"})) == 0.0);
}

TEST_CASE("final norm variant normalizes rows of E W before unembedding") {
    std::mt19937_64 rng(48);
    const Matrix e = oracle::random_matrix(12, 4, rng);
    const Matrix u = oracle::random_matrix(4, 12, rng);
    const Matrix w = oracle::random_matrix(4, 4, rng);
    maps::NormParams np{{1, 1, 1, 1}, {}, 1e-5f};
    const HeadOperator op(VocabSpace(e, u, np, maps::NormKind::layernorm), w);
    Matrix states = oracle::matmul(e, w);
    for (std::size_t r = 0; r < 12; ++r) maps::apply_norm(np, maps::NormKind::layernorm, states.row(r));
    std::vector<TokenId> ids(12);
    std::iota(ids.begin(), ids.end(), 0u);
    CHECK(maps::mapping_rows(op, ids) == oracle::matmul(states, u));
}

}  // TEST_SUITE
