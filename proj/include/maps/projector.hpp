#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "maps/model_io.hpp"
#include "maps/tensor.hpp"
#include "maps/vocab.hpp"

namespace maps {

// Vocabulary-side operands shared by every head of a layer: token
// representations E' (|V| x d) and the unembedding U (d x |V|), plus an
// optional final norm applied to rows of E' * W_VO before unembedding.
class VocabSpace {
public:
    VocabSpace() = default;
    VocabSpace(Matrix embeddings, const Matrix& unembedding,
               std::optional<NormParams> final_norm = std::nullopt,
               NormKind norm_kind = NormKind::layernorm);

    static VocabSpace from_model(const LoadedModel& model, std::size_t layer, EmbeddingPolicy policy,
                                 MlpForm form = MlpForm::residual, bool final_norm = false,
                                 unsigned workers = 1);

    const Matrix& embeddings() const { return state_->embeddings; }
    const PackedMatrix& unembedding() const { return state_->unembedding; }
    // U with unit-norm columns (zero columns stay zero); built on first use.
    const PackedMatrix& unit_unembedding() const;
    std::size_t vocab_size() const { return state_->embeddings.rows(); }
    std::size_t d_model() const { return state_->embeddings.cols(); }
    const std::optional<NormParams>& final_norm() const { return state_->final_norm; }
    NormKind norm_kind() const { return state_->norm_kind; }

private:
    struct State {
        Matrix embeddings;
        Matrix unembedding_raw;
        PackedMatrix unembedding;
        std::optional<NormParams> final_norm;
        NormKind norm_kind = NormKind::layernorm;
        std::once_flag unit_once;
        PackedMatrix unit_unembedding;
    };
    std::shared_ptr<State> state_;
};

// One head's OV map in vocabulary space: rows of M = E' * W_VO * U.
class HeadOperator {
public:
    HeadOperator(VocabSpace space, Matrix ov, HeadRef head = {});

    const VocabSpace& space() const { return space_; }
    const Matrix& ov() const { return ov_; }
    const PackedMatrix& ov_packed() const { return ov_packed_; }
    HeadRef head() const { return head_; }

private:
    VocabSpace space_;
    Matrix ov_;
    PackedMatrix ov_packed_;
    HeadRef head_;
};

HeadOperator make_head_operator(const LoadedModel& model, const VocabSpace& space, HeadRef head);

struct ScanStats {
    std::atomic<std::size_t> rows_evaluated{0};
    std::atomic<std::size_t> peak_score_entries{0};
};

struct ScanOptions {
    std::size_t block_rows = 1024;
    unsigned workers = 1;
    ScanStats* stats = nullptr;
};

enum class Direction { promote, suppress };
std::string to_string(Direction d);
Direction parse_direction(const std::string& s);

struct MappingRow {
    TokenId source_id = 0;
    std::vector<float> scores;
};

// e'_s * W_VO for each id (final norm applied when the space carries one).
Matrix source_states(const HeadOperator& op, std::span<const TokenId> ids);

// Full mapping rows for `ids`, evaluated block by block.
Matrix mapping_rows(const HeadOperator& op, std::span<const TokenId> ids, const ScanOptions& opts = {});
MappingRow mapping_row(const HeadOperator& op, TokenId source_id);

// Ids of the k largest (promote) or smallest (suppress) entries, ordered
// best first; ties go to the lower id.
std::vector<TokenId> topk_targets(std::span<const float> scores, std::size_t k, Direction dir);

// True iff `target` is among topk_targets(scores, k, dir), in O(|V|).
bool in_topk(std::span<const float> scores, TokenId target, std::size_t k, Direction dir);

inline constexpr double kDefaultTau = 0.15;

struct RelationScore {
    HeadRef head;
    std::string relation;
    double score = 0.0;
    std::size_t k = 0;
    bool suppressive = false;
    bool classified = false;
};

bool classify(double score, double tau = kDefaultTau);

RelationScore relation_score(const HeadOperator& op, const TokenizedRelation& rel, std::size_t k,
                             Direction dir, double tau = kDefaultTau, const ScanOptions& opts = {});

// Promote and suppress scores from a single pass over the source rows.
std::pair<RelationScore, RelationScore> relation_score_both(const HeadOperator& op,
                                                            const TokenizedRelation& rel,
                                                            std::size_t k, double tau = kDefaultTau,
                                                            const ScanOptions& opts = {});

struct SaliencyProfile {
    HeadRef head;
    std::vector<double> sigma;
    std::optional<double> skewness;  // absent when sigma is constant
    std::vector<std::string> warnings;
};

SaliencyProfile saliency(const HeadOperator& op, const ScanOptions& opts = {});

// Population third standardized moment m3 / m2^(3/2).
double input_skewness(std::span<const double> sigma);

struct ScoredToken {
    TokenId id = 0;
    std::string text;
    float score = 0.0f;
};

struct SalientEntry {
    TokenId source_id = 0;
    std::string source;
    double sigma = 0.0;
    std::vector<ScoredToken> targets;
};

struct SalientMappingSet {
    HeadRef head;
    std::size_t n_targets = 0;
    std::vector<SalientEntry> entries;
};

// Top-k_tokens sources by saliency with their top-n_targets promoted targets.
// Token strings are filled from `vocab` when given.
SalientMappingSet salient_mappings(const HeadOperator& op, std::size_t k_tokens = 30,
                                   std::size_t n_targets = 5, const Vocabulary* vocab = nullptr,
                                   const ScanOptions& opts = {});

using TokenPair = std::pair<TokenId, TokenId>;

double jaccard(const std::vector<TokenPair>& a, const std::vector<TokenPair>& b);

// The `count` largest entries of M ordered by (score desc, source asc, target asc).
std::vector<TokenPair> global_top_mappings(const HeadOperator& op, std::size_t count,
                                           const ScanOptions& opts = {});

// Jaccard similarity between the `set_size` globally top entries of M and
// the first `set_size` salient (source, target) pairs.
double jaccard_top_vs_salient(const HeadOperator& op, std::size_t set_size,
                              std::size_t n_targets = 5, const ScanOptions& opts = {});

// `count` i.i.d. normal matrices shaped like the layer's W_VO matrices with
// the layer's entry mean and standard deviation.
std::vector<Matrix> random_baseline_heads(std::span<const Matrix> layer_ovs, std::size_t count,
                                          std::uint64_t seed);
std::vector<Matrix> random_baseline_heads(const LoadedModel& model, std::size_t layer,
                                          std::uint64_t seed);

// argmax_t of e'_s * W_VO * U_hat for every source s.
std::vector<TokenId> argmax_targets(const HeadOperator& op, const ScanOptions& opts = {});

// Unique argmax targets over the vocabulary, as a fraction of |V|.
double output_space_size(const HeadOperator& op, const ScanOptions& opts = {});

double capitalized_space_fraction(const Vocabulary& vocab);

}  // namespace maps
