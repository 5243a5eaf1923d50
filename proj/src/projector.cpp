#include "maps/projector.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <random>
#include <set>

#include "maps/errors.hpp"

namespace maps {

VocabSpace::VocabSpace(Matrix embeddings, const Matrix& unembedding,
                       std::optional<NormParams> final_norm, NormKind norm_kind)
    : state_(std::make_shared<State>()) {
    if (embeddings.cols() != unembedding.rows() || embeddings.rows() != unembedding.cols()) {
        throw DataError("vocab space: embedding is " + std::to_string(embeddings.rows()) + "x" +
                        std::to_string(embeddings.cols()) + " but unembedding is " +
                        std::to_string(unembedding.rows()) + "x" + std::to_string(unembedding.cols()));
    }
    state_->embeddings = std::move(embeddings);
    state_->unembedding_raw = unembedding;
    state_->unembedding = PackedMatrix(unembedding);
    state_->final_norm = std::move(final_norm);
    state_->norm_kind = norm_kind;
}

VocabSpace VocabSpace::from_model(const LoadedModel& model, std::size_t layer,
                                  EmbeddingPolicy policy, MlpForm form, bool final_norm,
                                  unsigned workers) {
    if (final_norm && !model.store.final_norm) {
        throw DataError("final-norm variant requested but the model has no final norm");
    }
    return VocabSpace(
        effective_embeddings(model.store, model.geometry, layer, policy, form, workers),
        model.store.unembedding, final_norm ? model.store.final_norm : std::nullopt,
        model.geometry.norm_kind);
}

const PackedMatrix& VocabSpace::unit_unembedding() const {
    std::call_once(state_->unit_once, [this] {
        Matrix u = state_->unembedding_raw;
        for (std::size_t c = 0; c < u.cols(); ++c) {
            double sq = 0.0;
            for (std::size_t r = 0; r < u.rows(); ++r) sq += static_cast<double>(u(r, c)) * u(r, c);
            if (sq == 0.0) continue;
            const float inv = static_cast<float>(1.0 / std::sqrt(sq));
            for (std::size_t r = 0; r < u.rows(); ++r) u(r, c) *= inv;
        }
        state_->unit_unembedding = PackedMatrix(u);
    });
    return state_->unit_unembedding;
}

HeadOperator::HeadOperator(VocabSpace space, Matrix ov, HeadRef head)
    : space_(std::move(space)), ov_(std::move(ov)), ov_packed_(ov_), head_(head) {
    const std::size_t d = space_.d_model();
    if (ov_.rows() != d || ov_.cols() != d) {
        throw DataError("head operator: W_VO must be " + std::to_string(d) + "x" + std::to_string(d));
    }
}

HeadOperator make_head_operator(const LoadedModel& model, const VocabSpace& space, HeadRef head) {
    return HeadOperator(space, head_vo(model.store, model.geometry, head), head);
}

std::string to_string(Direction d) { return d == Direction::promote ? "promote" : "suppress"; }

Direction parse_direction(const std::string& s) {
    if (s == "promote") return Direction::promote;
    if (s == "suppress") return Direction::suppress;
    throw UsageError("unknown direction '" + s + "'");
}

namespace {

void check_ids(std::span<const TokenId> ids, std::size_t vocab_size) {
    for (TokenId id : ids) {
        if (id >= vocab_size) {
            throw DataError("token id " + std::to_string(id) + " is outside the vocabulary (" +
                            std::to_string(vocab_size) + ")");
        }
    }
}

// Rows e'_id * W_VO into `out` (ids.size() x d); optional final norm.
void states_into(const HeadOperator& op, std::span<const TokenId> ids, std::vector<float>& gathered,
                 std::vector<float>& out, bool with_final_norm) {
    const Matrix& e = op.space().embeddings();
    const std::size_t d = e.cols();
    gathered.resize(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto row = e.row(ids[i]);
        std::copy(row.begin(), row.end(), gathered.begin() + i * d);
    }
    out.assign(ids.size() * d, 0.0f);
    const PackedMatrix& w = op.ov_packed();
    gemm_rows(gathered.data(), d, ids.size(), w, 0, w.panels(), out.data(), d);
    if (with_final_norm && op.space().final_norm()) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
            apply_norm(*op.space().final_norm(), op.space().norm_kind(), {out.data() + i * d, d});
        }
    }
}

// Evaluates rows of states * unemb into `scores` (n x |V|), splitting
// column panels across workers.
void project_into(const std::vector<float>& states, std::size_t n, std::size_t d,
                  const PackedMatrix& unemb, unsigned workers, std::vector<float>& scores) {
    const std::size_t v = unemb.cols();
    scores.resize(n * v);
    parallel_for(unemb.panels(), workers, [&](std::size_t p0, std::size_t p1) {
        gemm_rows(states.data(), d, n, unemb, p0, p1, scores.data() + p0 * PackedMatrix::kPanelWidth,
                  v);
    });
}

void note_block(const ScanOptions& opts, std::size_t rows, std::size_t vocab) {
    if (!opts.stats) return;
    opts.stats->rows_evaluated += rows;
    const std::size_t entries = rows * vocab;
    std::size_t prev = opts.stats->peak_score_entries.load();
    while (entries > prev && !opts.stats->peak_score_entries.compare_exchange_weak(prev, entries)) {
    }
}

// Calls fn(ids_block, scores_block) over consecutive blocks of `ids`.
template <typename Fn>
void for_each_block(const HeadOperator& op, std::span<const TokenId> ids, const PackedMatrix& unemb,
                    const ScanOptions& opts, Fn&& fn) {
    if (opts.block_rows == 0) throw UsageError("block size must be positive");
    const std::size_t d = op.space().d_model();
    const std::size_t v = unemb.cols();
    std::vector<float> gathered, states, scores;
    for (std::size_t b = 0; b < ids.size(); b += opts.block_rows) {
        const std::size_t n = std::min(opts.block_rows, ids.size() - b);
        const auto block = ids.subspan(b, n);
        states_into(op, block, gathered, states, true);
        project_into(states, n, d, unemb, opts.workers, scores);
        note_block(opts, n, v);
        fn(block, std::span<const float>(scores.data(), n * v));
    }
}

std::vector<TokenId> all_ids(std::size_t n) {
    std::vector<TokenId> ids(n);
    std::iota(ids.begin(), ids.end(), TokenId{0});
    return ids;
}

void check_k(std::size_t k, std::size_t vocab_size) {
    if (k < 1 || k > vocab_size) {
        throw UsageError("k must lie in [1, " + std::to_string(vocab_size) + "], got " +
                         std::to_string(k));
    }
}

}  // namespace

Matrix source_states(const HeadOperator& op, std::span<const TokenId> ids) {
    check_ids(ids, op.space().vocab_size());
    std::vector<float> gathered, states;
    states_into(op, ids, gathered, states, true);
    return Matrix(ids.size(), op.space().d_model(), std::move(states));
}

Matrix mapping_rows(const HeadOperator& op, std::span<const TokenId> ids, const ScanOptions& opts) {
    check_ids(ids, op.space().vocab_size());
    const std::size_t v = op.space().vocab_size();
    Matrix out(ids.size(), v);
    std::size_t row = 0;
    for_each_block(op, ids, op.space().unembedding(), opts,
                   [&](std::span<const TokenId> block, std::span<const float> scores) {
                       std::copy(scores.begin(), scores.end(), out.data() + row * v);
                       row += block.size();
                   });
    return out;
}

MappingRow mapping_row(const HeadOperator& op, TokenId source_id) {
    const TokenId ids[] = {source_id};
    Matrix m = mapping_rows(op, ids);
    return {source_id, std::vector<float>(m.values().begin(), m.values().end())};
}

namespace {

// a ranks ahead of b
inline bool ahead(float sa, TokenId a, float sb, TokenId b, Direction dir) {
    if (sa != sb) return dir == Direction::promote ? sa > sb : sa < sb;
    return a < b;
}

}  // namespace

std::vector<TokenId> topk_targets(std::span<const float> scores, std::size_t k, Direction dir) {
    check_k(k, scores.size());
    std::vector<TokenId> ids = all_ids(scores.size());
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                      [&](TokenId a, TokenId b) { return ahead(scores[a], a, scores[b], b, dir); });
    ids.resize(k);
    return ids;
}

bool in_topk(std::span<const float> scores, TokenId target, std::size_t k, Direction dir) {
    const float st = scores[target];
    std::size_t better = 0;
    for (std::size_t j = 0; j < scores.size(); ++j) {
        if (ahead(scores[j], static_cast<TokenId>(j), st, target, dir) && ++better >= k) return false;
    }
    return true;
}

bool classify(double score, double tau) {
    if (tau < 0.0 || tau > 1.0) throw UsageError("tau must lie in [0, 1]");
    return score >= tau;
}

namespace {

void check_relation(const TokenizedRelation& rel, std::size_t vocab_size) {
    if (rel.pairs.empty()) {
        throw DataError("relation '" + rel.spec.name + "' has no pairs; the score is undefined");
    }
    for (const auto& [s, t] : rel.pairs) {
        if (s >= vocab_size || t >= vocab_size) {
            throw DataError("relation '" + rel.spec.name + "' references a token outside the vocabulary");
        }
    }
}

std::vector<TokenId> sources_of(const TokenizedRelation& rel) {
    std::vector<TokenId> ids;
    ids.reserve(rel.pairs.size());
    for (const auto& p : rel.pairs) ids.push_back(p.first);
    return ids;
}

RelationScore make_score(const HeadOperator& op, const TokenizedRelation& rel, std::size_t k,
                         Direction dir, std::size_t hits, double tau) {
    RelationScore r;
    r.head = op.head();
    r.relation = rel.spec.name;
    r.k = k;
    r.suppressive = dir == Direction::suppress;
    r.score = static_cast<double>(hits) / static_cast<double>(rel.pairs.size());
    r.classified = classify(r.score, tau);
    return r;
}

}  // namespace

RelationScore relation_score(const HeadOperator& op, const TokenizedRelation& rel, std::size_t k,
                             Direction dir, double tau, const ScanOptions& opts) {
    const std::size_t v = op.space().vocab_size();
    check_relation(rel, v);
    check_k(k, v);
    const auto ids = sources_of(rel);
    std::size_t hits = 0;
    std::size_t pair = 0;
    for_each_block(op, ids, op.space().unembedding(), opts,
                   [&](std::span<const TokenId> block, std::span<const float> scores) {
                       for (std::size_t r = 0; r < block.size(); ++r, ++pair) {
                           if (in_topk(scores.subspan(r * v, v), rel.pairs[pair].second, k, dir)) ++hits;
                       }
                   });
    return make_score(op, rel, k, dir, hits, tau);
}

std::pair<RelationScore, RelationScore> relation_score_both(const HeadOperator& op,
                                                            const TokenizedRelation& rel,
                                                            std::size_t k, double tau,
                                                            const ScanOptions& opts) {
    const std::size_t v = op.space().vocab_size();
    check_relation(rel, v);
    check_k(k, v);
    const auto ids = sources_of(rel);
    std::size_t hits_up = 0;
    std::size_t hits_down = 0;
    std::size_t pair = 0;
    for_each_block(op, ids, op.space().unembedding(), opts,
                   [&](std::span<const TokenId> block, std::span<const float> scores) {
                       for (std::size_t r = 0; r < block.size(); ++r, ++pair) {
                           const auto row = scores.subspan(r * v, v);
                           const TokenId t = rel.pairs[pair].second;
                           if (in_topk(row, t, k, Direction::promote)) ++hits_up;
                           if (in_topk(row, t, k, Direction::suppress)) ++hits_down;
                       }
                   });
    return {make_score(op, rel, k, Direction::promote, hits_up, tau),
            make_score(op, rel, k, Direction::suppress, hits_down, tau)};
}

double input_skewness(std::span<const double> sigma) {
    if (sigma.size() < 3) throw UsageError("skewness needs at least 3 values");
    const double n = static_cast<double>(sigma.size());
    double mean = 0.0;
    for (double x : sigma) mean += x;
    mean /= n;
    double m2 = 0.0;
    double m3 = 0.0;
    for (double x : sigma) {
        const double c = x - mean;
        m2 += c * c;
        m3 += c * c * c;
    }
    m2 /= n;
    m3 /= n;
    if (m2 == 0.0) throw DataError("skewness of a constant vector is undefined");
    return m3 / std::pow(m2, 1.5);
}

SaliencyProfile saliency(const HeadOperator& op, const ScanOptions& opts) {
    if (opts.block_rows == 0) throw UsageError("block size must be positive");
    const Matrix& e = op.space().embeddings();
    const std::size_t v = e.rows();
    const std::size_t d = e.cols();
    SaliencyProfile out;
    out.head = op.head();
    out.sigma.assign(v, 0.0);
    const std::size_t n_blocks = (v + opts.block_rows - 1) / opts.block_rows;
    std::vector<std::uint8_t> zero_norm(v, 0);
    const auto ids = all_ids(v);
    parallel_for(n_blocks, opts.workers, [&](std::size_t b0, std::size_t b1) {
        std::vector<float> gathered, states;
        for (std::size_t b = b0; b < b1; ++b) {
            const std::size_t r0 = b * opts.block_rows;
            const std::size_t n = std::min(opts.block_rows, v - r0);
            states_into(op, std::span<const TokenId>(ids).subspan(r0, n), gathered, states, false);
            for (std::size_t i = 0; i < n; ++i) {
                double in_sq = 0.0;
                double out_sq = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    in_sq += static_cast<double>(gathered[i * d + j]) * gathered[i * d + j];
                    out_sq += static_cast<double>(states[i * d + j]) * states[i * d + j];
                }
                if (in_sq == 0.0) {
                    zero_norm[r0 + i] = 1;
                } else {
                    out.sigma[r0 + i] = std::sqrt(out_sq) / std::sqrt(in_sq);
                }
            }
        }
    });
    for (std::size_t t = 0; t < v; ++t) {
        if (zero_norm[t]) out.warnings.push_back("token " + std::to_string(t) + " has a zero-norm embedding");
    }
    const auto [lo, hi] = std::minmax_element(out.sigma.begin(), out.sigma.end());
    if (v >= 3 && *lo != *hi) out.skewness = input_skewness(out.sigma);
    return out;
}

SalientMappingSet salient_mappings(const HeadOperator& op, std::size_t k_tokens,
                                   std::size_t n_targets, const Vocabulary* vocab,
                                   const ScanOptions& opts) {
    const std::size_t v = op.space().vocab_size();
    if (k_tokens < 1 || k_tokens > v) {
        throw UsageError("k_tokens must lie in [1, " + std::to_string(v) + "]");
    }
    check_k(n_targets, v);
    if (vocab && vocab->size() != v) throw DataError("vocabulary size does not match the model");
    const SaliencyProfile prof = saliency(op, opts);
    if (std::all_of(prof.sigma.begin(), prof.sigma.end(), [](double s) { return s == 0.0; })) {
        throw DataError("head " + op.head().label() + " has an all-zero OV map; saliency is degenerate");
    }
    std::vector<TokenId> order = all_ids(v);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k_tokens), order.end(),
                      [&](TokenId a, TokenId b) {
                          if (prof.sigma[a] != prof.sigma[b]) return prof.sigma[a] > prof.sigma[b];
                          return a < b;
                      });
    order.resize(k_tokens);
    const Matrix rows = mapping_rows(op, order, opts);
    SalientMappingSet set;
    set.head = op.head();
    set.n_targets = n_targets;
    for (std::size_t i = 0; i < order.size(); ++i) {
        SalientEntry e;
        e.source_id = order[i];
        e.sigma = prof.sigma[order[i]];
        if (vocab) e.source = vocab->display(order[i]);
        for (TokenId t : topk_targets(rows.row(i), n_targets, Direction::promote)) {
            e.targets.push_back({t, vocab ? vocab->display(t) : std::string(), rows(i, t)});
        }
        set.entries.push_back(std::move(e));
    }
    return set;
}

double jaccard(const std::vector<TokenPair>& a, const std::vector<TokenPair>& b) {
    const std::set<TokenPair> sa(a.begin(), a.end());
    const std::set<TokenPair> sb(b.begin(), b.end());
    if (sa.empty() && sb.empty()) return 1.0;
    std::size_t inter = 0;
    for (const auto& p : sa) inter += sb.count(p);
    return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

std::vector<TokenPair> global_top_mappings(const HeadOperator& op, std::size_t count,
                                           const ScanOptions& opts) {
    const std::size_t v = op.space().vocab_size();
    if (count < 1 || count > v * v) throw UsageError("global top count out of range");
    struct Entry {
        float score;
        TokenId s;
        TokenId t;
    };
    auto better = [](const Entry& a, const Entry& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.s != b.s) return a.s < b.s;
        return a.t < b.t;
    };
    std::vector<Entry> heap;  // heap front is the worst kept entry
    heap.reserve(count + 1);
    const auto ids = all_ids(v);
    for_each_block(op, ids, op.space().unembedding(), opts,
                   [&](std::span<const TokenId> block, std::span<const float> scores) {
                       for (std::size_t r = 0; r < block.size(); ++r) {
                           for (std::size_t j = 0; j < v; ++j) {
                               const Entry e{scores[r * v + j], block[r], static_cast<TokenId>(j)};
                               if (heap.size() < count) {
                                   heap.push_back(e);
                                   std::push_heap(heap.begin(), heap.end(), better);
                               } else if (better(e, heap.front())) {
                                   std::pop_heap(heap.begin(), heap.end(), better);
                                   heap.back() = e;
                                   std::push_heap(heap.begin(), heap.end(), better);
                               }
                           }
                       }
                   });
    std::sort(heap.begin(), heap.end(), better);
    std::vector<TokenPair> out;
    out.reserve(heap.size());
    for (const auto& e : heap) out.emplace_back(e.s, e.t);
    return out;
}

double jaccard_top_vs_salient(const HeadOperator& op, std::size_t set_size, std::size_t n_targets,
                              const ScanOptions& opts) {
    if (set_size < 1) throw UsageError("set size must be at least 1");
    const std::size_t k_tokens = (set_size + n_targets - 1) / n_targets;
    const SalientMappingSet set = salient_mappings(op, k_tokens, n_targets, nullptr, opts);
    std::vector<TokenPair> salient;
    for (const auto& e : set.entries)
        for (const auto& t : e.targets)
            if (salient.size() < set_size) salient.emplace_back(e.source_id, t.id);
    return jaccard(global_top_mappings(op, set_size, opts), salient);
}

std::vector<Matrix> random_baseline_heads(std::span<const Matrix> layer_ovs, std::size_t count,
                                          std::uint64_t seed) {
    if (layer_ovs.empty()) throw UsageError("random baseline needs at least one reference matrix");
    const std::size_t rows = layer_ovs.front().rows();
    const std::size_t cols = layer_ovs.front().cols();
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& m : layer_ovs) {
        if (m.rows() != rows || m.cols() != cols) throw DataError("layer W_VO shapes differ");
        for (float x : m.values()) sum += x;
        n += m.values().size();
    }
    const double mean = sum / static_cast<double>(n);
    double sq = 0.0;
    for (const auto& m : layer_ovs)
        for (float x : m.values()) sq += (x - mean) * (x - mean);
    const double stddev = std::sqrt(sq / static_cast<double>(n));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(mean, stddev > 0.0 ? stddev : 0.0);
    std::vector<Matrix> out;
    out.reserve(count);
    for (std::size_t h = 0; h < count; ++h) {
        Matrix m(rows, cols);
        for (float& x : m.values()) x = stddev > 0.0 ? static_cast<float>(dist(rng)) : static_cast<float>(mean);
        out.push_back(std::move(m));
    }
    return out;
}

std::vector<Matrix> random_baseline_heads(const LoadedModel& model, std::size_t layer,
                                          std::uint64_t seed) {
    if (layer >= model.geometry.n_layers) throw UsageError("layer out of range");
    std::vector<Matrix> ovs;
    for (std::size_t h = 0; h < model.geometry.n_heads; ++h) {
        ovs.push_back(head_vo(model.store, model.geometry, {layer, h}));
    }
    return random_baseline_heads(ovs, model.geometry.n_heads, seed);
}

std::vector<TokenId> argmax_targets(const HeadOperator& op, const ScanOptions& opts) {
    const std::size_t v = op.space().vocab_size();
    std::vector<TokenId> out(v, 0);
    const auto ids = all_ids(v);
    for_each_block(op, ids, op.space().unit_unembedding(), opts,
                   [&](std::span<const TokenId> block, std::span<const float> scores) {
                       parallel_for(block.size(), opts.workers, [&](std::size_t r0, std::size_t r1) {
                           for (std::size_t r = r0; r < r1; ++r) {
                               const float* row = scores.data() + r * v;
                               std::size_t best = 0;
                               for (std::size_t j = 1; j < v; ++j)
                                   if (row[j] > row[best]) best = j;
                               out[block[r]] = static_cast<TokenId>(best);
                           }
                       });
                   });
    return out;
}

double output_space_size(const HeadOperator& op, const ScanOptions& opts) {
    const auto targets = argmax_targets(op, opts);
    const std::set<TokenId> unique(targets.begin(), targets.end());
    return static_cast<double>(unique.size()) / static_cast<double>(targets.size());
}

double capitalized_space_fraction(const Vocabulary& vocab) {
    if (vocab.size() == 0) return 0.0;
    const std::string& marker = vocab.space_marker();
    std::size_t n = 0;
    for (const auto& t : vocab.tokens()) {
        if (t.size() > marker.size() && t.compare(0, marker.size(), marker) == 0) {
            const char c = t[marker.size()];
            if (c >= 'A' && c <= 'Z') ++n;
        }
    }
    return static_cast<double>(n) / static_cast<double>(vocab.size());
}

}  // namespace maps
