#include "maps/sweep.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>

#include "maps/errors.hpp"
#include "maps/report.hpp"

namespace maps {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::vector<std::string> direction_names(const std::vector<Direction>& dirs) {
    std::vector<std::string> out;
    for (auto d : dirs) out.push_back(to_string(d));
    return out;
}

}  // namespace

SweepConfig SweepConfig::from_json(const json& j) {
    if (!j.is_object()) throw DataError("sweep config must be a JSON object");
    SweepConfig c;
    try {
        c.model_path = j.value("model", c.model_path);
        c.adapter = j.value("adapter", c.adapter);
        c.vocab_path = j.value("vocab", c.vocab_path);
        c.manifest_path = j.value("manifest", c.manifest_path);
        c.space_marker = j.value("space_marker", c.space_marker);
        if (j.contains("geometry")) c.geometry_overrides = j["geometry"];
        c.tau = j.value("tau", c.tau);
        if (j.contains("k")) c.k_overrides = j["k"].get<std::map<std::string, std::size_t>>();
        if (j.contains("directions")) {
            const auto& d = j["directions"];
            c.directions.clear();
            if (d.is_string() && d.get<std::string>() == "both") {
                c.directions = {Direction::promote, Direction::suppress};
            } else if (d.is_string()) {
                c.directions = {parse_direction(d.get<std::string>())};
            } else {
                for (const auto& s : d) c.directions.push_back(parse_direction(s.get<std::string>()));
            }
        }
        if (j.contains("policy") && !j["policy"].is_null()) {
            c.policy = parse_embedding_policy(j["policy"].get<std::string>());
        }
        if (j.contains("mlp_form")) c.mlp_form = parse_mlp_form(j["mlp_form"].get<std::string>());
        c.final_norm = j.value("final_norm", c.final_norm);
        if (j.contains("heads") && !j["heads"].is_null()) {
            std::vector<HeadRef> heads;
            for (const auto& h : j["heads"]) heads.push_back(HeadRef::parse(h.get<std::string>()));
            c.heads = std::move(heads);
        }
        c.seed = j.value("seed", c.seed);
        c.workers = j.value("workers", c.workers);
        c.block_rows = j.value("block_rows", c.block_rows);
        c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
    } catch (const json::exception& e) {
        throw DataError(std::string("sweep config: ") + e.what());
    }
    c.validate();
    return c;
}

json SweepConfig::to_json() const {
    json j = {{"model", model_path},
              {"adapter", adapter},
              {"vocab", vocab_path},
              {"manifest", manifest_path},
              {"space_marker", space_marker},
              {"geometry", geometry_overrides},
              {"tau", tau},
              {"k", k_overrides},
              {"directions", direction_names(directions)},
              {"policy", policy ? json(to_string(*policy)) : json(nullptr)},
              {"mlp_form", to_string(mlp_form)},
              {"final_norm", final_norm},
              {"seed", seed},
              {"workers", workers},
              {"block_rows", block_rows},
              {"checkpoint_dir", checkpoint_dir}};
    if (heads) {
        json hs = json::array();
        for (const auto& h : *heads) hs.push_back(h.label());
        j["heads"] = hs;
    } else {
        j["heads"] = nullptr;
    }
    return j;
}

void SweepConfig::validate() const {
    if (!(tau >= 0.0 && tau <= 1.0)) throw UsageError("tau must be in [0, 1]");
    if (directions.empty()) throw UsageError("at least one direction is required");
    if (workers == 0) throw UsageError("workers must be positive");
    if (block_rows == 0) throw UsageError("block_rows must be positive");
    for (const auto& [name, k] : k_overrides)
        if (k == 0) throw UsageError("k override for '" + name + "' must be positive");
}

std::string SweepConfig::hash() const {
    json j = to_json();
    for (const char* key : {"workers", "block_rows", "seed", "checkpoint_dir"}) j.erase(key);
    const std::string canon = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : canon) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

const RelationInfo* SweepResult::relation(const std::string& name) const {
    for (const auto& r : relations)
        if (r.name == name) return &r;
    return nullptr;
}

bool operator==(const RelationScore& a, const RelationScore& b) {
    return a.head == b.head && a.relation == b.relation && a.score == b.score && a.k == b.k &&
           a.suppressive == b.suppressive && a.classified == b.classified;
}

bool same_scores(const SweepResult& a, const SweepResult& b) {
    return a.model == b.model && a.adapter == b.adapter && a.config_hash == b.config_hash && a.tau == b.tau &&
           a.n_layers == b.n_layers && a.n_heads == b.n_heads && a.heads == b.heads &&
           a.directions == b.directions && a.relations == b.relations && a.cells == b.cells &&
           a.warnings == b.warnings;
}

bool operator==(const SweepResult& a, const SweepResult& b) {
    return same_scores(a, b) && a.started_at == b.started_at && a.finished_at == b.finished_at;
}

std::vector<Direction> directions_for(const SweepConfig& config, const RelationSpec& spec) {
    std::vector<Direction> out;
    for (Direction d : {Direction::promote, Direction::suppress}) {
        const bool wanted = std::find(config.directions.begin(), config.directions.end(), d) !=
                            config.directions.end();
        if (wanted || (d == Direction::suppress && spec.suppressive)) out.push_back(d);
    }
    return out;
}

namespace {

fs::path checkpoint_path(const SweepConfig& c, std::size_t layer) {
    return fs::path(c.checkpoint_dir) / c.hash() / ("layer_" + std::to_string(layer) + ".json");
}

std::optional<std::vector<RelationScore>> read_checkpoint(const SweepConfig& c, std::size_t layer,
                                                          std::size_t expected) {
    if (c.checkpoint_dir.empty()) return std::nullopt;
    const auto path = checkpoint_path(c, layer);
    std::ifstream in(path);
    if (!in) return std::nullopt;
    try {
        const json j = json::parse(in);
        if (j.at("config_hash") != c.hash() || j.at("layer") != layer) return std::nullopt;
        std::vector<RelationScore> cells;
        for (const auto& cj : j.at("cells")) cells.push_back(cell_from_json(cj));
        if (cells.size() != expected) return std::nullopt;
        return cells;
    } catch (const std::exception&) {
        return std::nullopt;  // a torn checkpoint is recomputed
    }
}

void write_checkpoint(const SweepConfig& c, std::size_t layer, const std::vector<RelationScore>& cells) {
    if (c.checkpoint_dir.empty()) return;
    const auto path = checkpoint_path(c, layer);
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError(path.parent_path().string(), ec.message());
    json arr = json::array();
    for (const auto& cell : cells) arr.push_back(cell_to_json(cell));
    const fs::path tmp = path.string() + ".tmp";
    write_json(tmp, {{"config_hash", c.hash()}, {"layer", layer}, {"cells", arr}});
    fs::rename(tmp, path, ec);
    if (ec) throw IoError(path.string(), ec.message());
}

struct CellTask {
    std::size_t head_index;  // into the layer's operator list
    std::size_t relation;
    Direction direction;
};

}  // namespace

SweepResult run_sweep(const LoadedModel& model, std::span<const TokenizedRelation> relations,
                      const SweepConfig& config) {
    config.validate();
    const auto& g = model.geometry;
    SweepResult res;
    res.model = config.model_path;
    res.adapter = model.store.adapter;
    res.config_hash = config.hash();
    res.started_at = utc_now();
    res.tau = config.tau;
    res.n_layers = g.n_layers;
    res.n_heads = g.n_heads;
    res.directions = config.directions;

    if (config.heads) {
        for (const auto& h : *config.heads) {
            if (h.layer >= g.n_layers || h.head >= g.n_heads) {
                throw UsageError("head " + h.label() + " is outside the model");
            }
        }
        res.heads = *config.heads;
        std::sort(res.heads.begin(), res.heads.end());
        res.heads.erase(std::unique(res.heads.begin(), res.heads.end()), res.heads.end());
    } else {
        for (std::size_t l = 0; l < g.n_layers; ++l)
            for (std::size_t h = 0; h < g.n_heads; ++h) res.heads.push_back({l, h});
    }

    std::vector<const TokenizedRelation*> rels;
    for (const auto& r : relations) {
        for (const auto& w : r.warnings) res.warnings.push_back(w);
        if (r.pairs.empty()) {
            res.warnings.push_back("relation '" + r.spec.name + "' skipped: no usable pairs");
            continue;
        }
        RelationInfo info;
        info.name = r.spec.name;
        info.category = r.spec.category;
        info.suppressive = r.spec.suppressive;
        auto ov = config.k_overrides.find(r.spec.name);
        info.k = ov != config.k_overrides.end() ? ov->second : default_k(r.spec, g.vocab_size);
        if (info.k > g.vocab_size) throw UsageError("k for '" + info.name + "' exceeds the vocabulary");
        info.n_pairs = r.pairs.size();
        info.n_dropped = r.dropped.size();
        res.relations.push_back(info);
        rels.push_back(&r);
    }

    const EmbeddingPolicy policy = config.policy.value_or(model.store.default_policy);
    std::size_t next = 0;
    while (next < res.heads.size()) {
        const std::size_t layer = res.heads[next].layer;
        std::vector<HeadRef> layer_heads;
        while (next < res.heads.size() && res.heads[next].layer == layer) layer_heads.push_back(res.heads[next++]);

        std::vector<CellTask> tasks;
        for (std::size_t h = 0; h < layer_heads.size(); ++h)
            for (std::size_t r = 0; r < rels.size(); ++r)
                for (Direction d : directions_for(config, rels[r]->spec)) tasks.push_back({h, r, d});

        if (auto cached = read_checkpoint(config, layer, tasks.size())) {
            res.cells.insert(res.cells.end(), cached->begin(), cached->end());
            continue;
        }

        const VocabSpace space =
            VocabSpace::from_model(model, layer, policy, config.mlp_form, config.final_norm, config.workers);
        std::vector<std::optional<HeadOperator>> ops(layer_heads.size());
        parallel_for(layer_heads.size(), config.workers, [&](std::size_t b, std::size_t e) {
            for (std::size_t i = b; i < e; ++i) ops[i].emplace(make_head_operator(model, space, layer_heads[i]));
        });

        std::vector<RelationScore> cells(tasks.size());
        const ScanOptions opts{config.block_rows, 1, nullptr};
        parallel_for(tasks.size(), config.workers, [&](std::size_t b, std::size_t e) {
            for (std::size_t i = b; i < e; ++i) {
                const auto& t = tasks[i];
                cells[i] = relation_score(*ops[t.head_index], *rels[t.relation], res.relations[t.relation].k,
                                          t.direction, config.tau, opts);
            }
        });
        write_checkpoint(config, layer, cells);
        res.cells.insert(res.cells.end(), cells.begin(), cells.end());
    }
    res.finished_at = utc_now();
    return res;
}

namespace {

fs::path default_vocab(const fs::path& model_path) {
    const fs::path dir = fs::is_directory(model_path) ? model_path : model_path.parent_path();
    for (const char* name : {"tokenizer.json", "vocab.json"}) {
        if (fs::exists(dir / name)) return dir / name;
    }
    throw UsageError("no vocabulary given and none found next to " + model_path.string());
}

}  // namespace

SweepResult run_sweep(const SweepConfig& config) {
    config.validate();
    if (config.model_path.empty()) throw UsageError("sweep: model path is required");
    if (config.manifest_path.empty()) throw UsageError("sweep: relation manifest is required");
    const LoadedModel model = load_model(config.model_path, config.adapter, config.geometry_overrides);
    const fs::path vocab_path = config.vocab_path.empty() ? default_vocab(config.model_path) : fs::path(config.vocab_path);
    const Vocabulary vocab = load_vocab(vocab_path, config.space_marker);
    if (vocab.size() != model.geometry.vocab_size) {
        throw DataError(vocab_path.string() + ": vocabulary has " + std::to_string(vocab.size()) +
                        " tokens but the model has " + std::to_string(model.geometry.vocab_size));
    }
    std::vector<TokenizedRelation> rels;
    try {
        rels = load_relations(config.manifest_path, vocab);
    } catch (const DataError& e) {
        throw DataError(std::string("loading relations: ") + e.what());
    }
    return run_sweep(model, rels, config);
}

CountTable count_by_relation(const SweepResult& result, double tau, Direction dir) {
    CountTable out;
    for (const auto& r : result.relations) out.emplace_back(r.name, 0);
    const bool suppress = dir == Direction::suppress;
    for (const auto& c : result.cells) {
        if (c.suppressive != suppress || !classify(c.score, tau)) continue;
        for (auto& [name, n] : out)
            if (name == c.relation) ++n;
    }
    return out;
}

bool CategoryGrid::empty() const {
    return std::all_of(cells.begin(), cells.end(), [](const auto& s) { return s.empty(); });
}

CategoryGrid category_grid(const SweepResult& result, double tau) {
    CategoryGrid g;
    g.n_layers = result.n_layers;
    g.n_heads = result.n_heads;
    g.cells.resize(g.n_layers * g.n_heads);
    for (const auto& c : result.cells) {
        if (!classify(c.score, tau)) continue;
        const RelationInfo* info = result.relation(c.relation);
        if (!info) throw DataError("sweep result: cell names unknown relation '" + c.relation + "'");
        g.cells[c.head.layer * g.n_heads + c.head.head].insert(info->category);
    }
    return g;
}

SummaryStats summary_stats(const SweepResult& result, double tau) {
    SummaryStats s;
    s.per_layer_classified_counts.assign(result.n_layers, 0);
    const CategoryGrid grid = category_grid(result, tau);
    std::set<HeadRef> suppressing;
    for (const auto& c : result.cells)
        if (c.suppressive && classify(c.score, tau)) suppressing.insert(c.head);
    std::size_t multi = 0;
    for (std::size_t l = 0; l < grid.n_layers; ++l) {
        for (std::size_t h = 0; h < grid.n_heads; ++h) {
            const auto& cats = grid.at(l, h);
            if (cats.empty()) continue;
            ++s.classified_heads;
            ++s.per_layer_classified_counts[l];
            if (cats.size() > 1) ++multi;
        }
    }
    if (s.classified_heads > 0) {
        const double n = static_cast<double>(s.classified_heads);
        s.multi_category_fraction = multi / n;
        s.suppression_fraction = static_cast<double>(suppressing.size()) / n;
    }
    return s;
}

ScoreDistribution score_distribution(const SweepResult& result, const std::string& relation, Direction dir) {
    if (!result.relation(relation)) throw UsageError("relation '" + relation + "' is not in the sweep result");
    ScoreDistribution d;
    d.relation = relation;
    d.direction = dir;
    const bool suppress = dir == Direction::suppress;
    for (const auto& c : result.cells) {
        if (c.relation != relation || c.suppressive != suppress) continue;
        // The epsilon keeps exact multiples of the bin width (e.g. 0.3) in their own bin.
        const auto b = static_cast<std::size_t>(std::floor(c.score / ScoreDistribution::kBinWidth + 1e-9));
        ++d.counts[std::min(b, ScoreDistribution::kBins - 1)];
        d.max = std::max(d.max, c.score);
        ++d.n;
    }
    return d;
}

}  // namespace maps
