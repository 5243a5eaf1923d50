#pragma once

#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "maps/model_io.hpp"
#include "maps/projector.hpp"
#include "maps/tensor.hpp"
#include "maps/vocab.hpp"

namespace maps::toy {

enum class UnplantedHeads { zero, random };

struct ToyModelSpec {
    std::size_t d_model = 128;
    std::size_t vocab_size = 256;
    std::size_t n_heads = 8;
    std::uint64_t seed = 0;
    bool tie_embeddings = true;
    float embedding_scale = 0.0f;  // 0 selects 1 / sqrt(d_model)
    UnplantedHeads unplanted = UnplantedHeads::random;
    float random_head_std = 0.25f;
};

struct PlantSpec {
    std::size_t head = 0;
    std::vector<std::pair<TokenId, TokenId>> pairs;
    float gain = 4.0f;
};

struct ToyModel {
    ToyModelSpec spec;
    Matrix embedding;    // |V| x d
    Matrix unembedding;  // d x |V|
    std::vector<Matrix> heads;  // W_VO per head, d x d
    std::vector<PlantSpec> plants;

    std::size_t vocab_size() const { return embedding.rows(); }
    std::size_t d_model() const { return embedding.cols(); }
    bool is_planted(std::size_t head) const;
};

// Builds the toy and brute-force checks that every planted source's argmax
// target is its planted target; throws DataError (suggesting a larger
// d_model or gain) if not.
ToyModel build_toy(const ToyModelSpec& spec, const std::vector<PlantSpec>& plants);

// Heads W_h = gains[h] * P + N_h where P is the unit-gain plant for `pairs`
// and N_h is i.i.d. N(0, noise_std^2). No plant property is asserted, so
// low-gain heads behave like noise.
ToyModel build_graded_family(const ToyModelSpec& spec,
                             const std::vector<std::pair<TokenId, TokenId>>& pairs,
                             const std::vector<float>& gains, float noise_std);

// Single-layer store (W_V = W_VO, W_O = I) usable by the projector and sweep.
LoadedModel to_loaded_model(const ToyModel& model);
VocabSpace vocab_space(const ToyModel& model);
HeadOperator head_operator(const ToyModel& model, std::size_t head);
// Synthetic vocabulary "Ġt0", "Ġt1", ... so that words "t0", "t1" resolve
// as single tokens with a leading space.
Vocabulary toy_vocabulary(std::size_t size);

struct PromptSpec {
    std::vector<TokenId> tokens;
    std::size_t query_position = 0;
    std::vector<float> attention;  // over positions, sums to 1

    void validate(std::size_t vocab_size) const;
};

enum class AttentionPattern { one_hot, uniform_last_two };

// Fillers followed by the source token; the query is the source position.
struct PromptTemplate {
    std::vector<TokenId> fillers;
    AttentionPattern attention = AttentionPattern::one_hot;

    PromptSpec instantiate(TokenId source) const;
};

// (sum_p a_p e_{token_p}) * W_VO(head)
std::vector<float> toy_head_output(const ToyModel& model, std::size_t head, const PromptSpec& prompt);

// Vocabulary logits y * U for a residual-space vector y.
std::vector<float> project(const ToyModel& model, std::span<const float> y);

double dynamic_relation_score(const ToyModel& model, std::size_t head, const TokenizedRelation& rel,
                              std::size_t k, const PromptTemplate& tmpl);

// Sample Pearson correlation coefficient.
double pearson(std::span<const double> x, std::span<const double> y);

// argmax of (e_query + sum of non-ablated head outputs) * U, ties to lower id.
TokenId ablate_and_predict(const ToyModel& model, const PromptSpec& prompt,
                           const std::set<std::size_t>& ablated_heads);

// `n` pairs with distinct sources, target != source, avoiding `exclude`.
std::vector<std::pair<TokenId, TokenId>> random_pairs(std::size_t vocab_size, std::size_t n,
                                                      std::mt19937_64& rng,
                                                      std::set<TokenId>& exclude);

TokenizedRelation as_relation(const std::string& name,
                              const std::vector<std::pair<TokenId, TokenId>>& pairs,
                              RelationCategory category = RelationCategory::custom);

// Battery run by the `toy` CLI subcommand.
struct BatteryConfig {
    std::size_t d_model = 128;
    std::size_t vocab_size = 256;
    std::size_t n_heads = 8;
    std::size_t planted_heads = 2;
    std::size_t pairs_per_plant = 20;
    float plant_gain = 8.0f;
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    double tau = kDefaultTau;
    std::size_t graded_heads = 32;
    float graded_max_gain = 4.0f;
    double graded_noise_std = 0.7;
    std::size_t causal_seeds = 20;
    std::size_t duality_heads = 100;
    std::size_t baseline_seeds = 10;

    static BatteryConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

struct CheckResult {
    std::string name;
    bool passed = false;
    nlohmann::json metrics;
};

CheckResult check_plant_detection(const BatteryConfig& cfg);
CheckResult check_static_dynamic(const BatteryConfig& cfg);
CheckResult check_causal_ablation(const BatteryConfig& cfg);
CheckResult check_suppression_duality(const BatteryConfig& cfg);
CheckResult check_random_baseline(const BatteryConfig& cfg);

std::vector<CheckResult> run_battery(const BatteryConfig& cfg);
nlohmann::json battery_report(const BatteryConfig& cfg, const std::vector<CheckResult>& results);

}  // namespace maps::toy
