#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "maps/model_io.hpp"
#include "maps/projector.hpp"
#include "maps/vocab.hpp"

namespace maps {

struct SweepConfig {
    std::string model_path;
    std::string adapter = "auto";
    std::string vocab_path;      // defaults to tokenizer.json / vocab.json beside the model
    std::string manifest_path;
    std::string space_marker = "Ġ";
    nlohmann::json geometry_overrides = nlohmann::json::object();
    double tau = kDefaultTau;
    std::map<std::string, std::size_t> k_overrides;
    std::vector<Direction> directions = {Direction::promote};
    std::optional<EmbeddingPolicy> policy;  // model default when absent
    MlpForm mlp_form = MlpForm::residual;
    bool final_norm = false;
    std::optional<std::vector<HeadRef>> heads;  // all heads when absent
    std::uint64_t seed = 0;
    unsigned workers = 1;
    std::size_t block_rows = 1024;
    std::string checkpoint_dir;  // no checkpoints when empty

    static SweepConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    void validate() const;
    // FNV-1a over the canonical JSON of the fields that affect scores
    // (workers, block size, seed and checkpoint location excluded).
    std::string hash() const;
};

struct RelationInfo {
    std::string name;
    RelationCategory category = RelationCategory::custom;
    bool suppressive = false;
    std::size_t k = 0;
    std::size_t n_pairs = 0;
    std::size_t n_dropped = 0;

    bool operator==(const RelationInfo&) const = default;
};

// RelationScore::suppressive marks the direction of a cell.
struct SweepResult {
    std::string model;
    std::string adapter;
    std::string config_hash;
    std::string started_at;
    std::string finished_at;
    double tau = kDefaultTau;
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::vector<HeadRef> heads;
    std::vector<Direction> directions;
    std::vector<RelationInfo> relations;
    std::vector<RelationScore> cells;  // (head, relation, direction) order
    std::vector<std::string> warnings;

    const RelationInfo* relation(const std::string& name) const;
};

bool operator==(const RelationScore& a, const RelationScore& b);
bool operator==(const SweepResult& a, const SweepResult& b);

// Same scores and metadata, timestamps ignored.
bool same_scores(const SweepResult& a, const SweepResult& b);

// Loads model, vocabulary and manifest named by the config, then sweeps.
SweepResult run_sweep(const SweepConfig& config);

SweepResult run_sweep(const LoadedModel& model, std::span<const TokenizedRelation> relations,
                      const SweepConfig& config);

// Directions scored for a relation: the configured ones plus suppress when
// the relation is marked suppressive.
std::vector<Direction> directions_for(const SweepConfig& config, const RelationSpec& spec);

using CountTable = std::vector<std::pair<std::string, std::size_t>>;

// Heads with score >= tau per relation, in manifest order.
CountTable count_by_relation(const SweepResult& result, double tau, Direction dir = Direction::promote);

struct CategoryGrid {
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::vector<std::set<RelationCategory>> cells;  // layer-major

    const std::set<RelationCategory>& at(std::size_t layer, std::size_t head) const {
        return cells[layer * n_heads + head];
    }
    bool empty() const;
};

// A head carries a category if it implements any relation of it in either direction.
CategoryGrid category_grid(const SweepResult& result, double tau);

struct SummaryStats {
    std::size_t classified_heads = 0;
    std::optional<double> multi_category_fraction;  // absent without classified heads
    std::optional<double> suppression_fraction;
    std::vector<std::size_t> per_layer_classified_counts;
};

SummaryStats summary_stats(const SweepResult& result, double tau);

struct ScoreDistribution {
    static constexpr std::size_t kBins = 50;
    static constexpr double kBinWidth = 0.02;

    std::string relation;
    Direction direction = Direction::promote;
    std::array<std::size_t, kBins> counts{};
    double max = 0.0;
    std::size_t n = 0;
};

// Bin b holds scores in [b * 0.02, (b + 1) * 0.02); a score of 1 falls in the last bin.
ScoreDistribution score_distribution(const SweepResult& result, const std::string& relation,
                                     Direction dir = Direction::promote);

}  // namespace maps
