// maps: vocabulary-space analysis of attention-head OV circuits.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "maps/describe.hpp"
#include "maps/errors.hpp"
#include "maps/model_io.hpp"
#include "maps/projector.hpp"
#include "maps/report.hpp"
#include "maps/safetensors.hpp"
#include "maps/sweep.hpp"
#include "maps/toy.hpp"
#include "maps/vocab.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace maps;

namespace {

// Flags shared by every subcommand; empty/absent values leave the config file's.
struct Common {
    std::string config_path;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> workers;

    std::string model, adapter, vocab, manifest, space_marker, geometry, policy, mlp_form;
    std::optional<double> tau;
    std::optional<std::size_t> block_rows;
    bool final_norm = false;
};

Common g;

SweepConfig sweep_config() {
    json j = json::object();
    if (!g.config_path.empty()) {
        std::ifstream in(g.config_path);
        if (!in) throw IoError(g.config_path, "cannot open config");
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw DataError(g.config_path + ": " + e.what());
        }
    }
    if (!g.model.empty()) j["model"] = g.model;
    if (!g.adapter.empty()) j["adapter"] = g.adapter;
    if (!g.vocab.empty()) j["vocab"] = g.vocab;
    if (!g.manifest.empty()) j["manifest"] = g.manifest;
    if (!g.space_marker.empty()) j["space_marker"] = g.space_marker;
    if (!g.geometry.empty()) {
        const json over = json::parse(g.geometry, nullptr, false);
        if (!over.is_object()) throw UsageError("--geometry must be a JSON object");
        j["geometry"] = over;
    }
    if (!g.policy.empty()) j["policy"] = g.policy;
    if (!g.mlp_form.empty()) j["mlp_form"] = g.mlp_form;
    if (g.final_norm) j["final_norm"] = true;
    if (g.tau) j["tau"] = *g.tau;
    if (g.block_rows) j["block_rows"] = *g.block_rows;
    if (g.seed) j["seed"] = *g.seed;
    if (g.workers) j["workers"] = *g.workers;
    return SweepConfig::from_json(j);
}

LoadedModel load(const SweepConfig& c) {
    if (c.model_path.empty()) throw UsageError("--model is required");
    return load_model(c.model_path, c.adapter, c.geometry_overrides);
}

Vocabulary vocab_for(const SweepConfig& c) {
    fs::path p = c.vocab_path;
    if (p.empty()) {
        const fs::path m = c.model_path;
        const fs::path dir = fs::is_directory(m) ? m : m.parent_path();
        for (const char* name : {"tokenizer.json", "vocab.json"})
            if (fs::exists(dir / name)) p = dir / name;
        if (p.empty()) throw UsageError("--vocab is required (none found next to the model)");
    }
    return load_vocab(p, c.space_marker);
}

EmbeddingPolicy policy_of(const SweepConfig& c, const LoadedModel& m) {
    return c.policy.value_or(m.store.default_policy);
}

ScanOptions scan_of(const SweepConfig& c) {
    ScanOptions o;
    o.block_rows = c.block_rows;
    o.workers = c.workers;
    return o;
}

VocabSpace space_for(const SweepConfig& c, const LoadedModel& m, std::size_t layer) {
    return VocabSpace::from_model(m, layer, policy_of(c, m), c.mlp_form, c.final_norm, c.workers);
}

void emit(const json& doc) {
    if (g.out.empty()) {
        std::cout << doc.dump(2) << "\n";
    } else {
        write_json(g.out, doc);
    }
}

std::vector<HeadRef> parse_heads(const std::vector<std::string>& labels, const ModelGeometry& geo,
                                 std::optional<std::size_t> layer) {
    std::vector<HeadRef> out;
    for (const auto& l : labels) out.push_back(HeadRef::parse(l));
    if (layer) {
        if (*layer >= geo.n_layers) throw UsageError("layer out of range");
        for (std::size_t h = 0; h < geo.n_heads; ++h) out.push_back({*layer, h});
    }
    if (out.empty()) throw UsageError("give --head and/or --layer");
    for (const auto& h : out)
        if (h.layer >= geo.n_layers || h.head >= geo.n_heads) throw UsageError("head " + h.label() + " is outside the model");
    return out;
}

TokenizedRelation relation_from(const SweepConfig& c, const Vocabulary& vocab, const std::string& name,
                                const std::string& pairs_path) {
    if (!pairs_path.empty()) {
        RelationSpec spec;
        spec.name = name.empty() ? fs::path(pairs_path).stem().string() : name;
        return tokenize_relation(vocab, spec, load_pairs_tsv(pairs_path));
    }
    if (c.manifest_path.empty()) throw UsageError("give --pairs or --manifest with --relation");
    for (const auto& e : load_manifest(c.manifest_path)) {
        if (e.spec.name == name) return tokenize_relation(vocab, e.spec, load_pairs_tsv(e.file));
    }
    throw UsageError("relation '" + name + "' is not in " + c.manifest_path);
}

json score_json(const RelationScore& s) {
    return {{"head", s.head.label()},
            {"relation", s.relation},
            {"direction", to_string(s.suppressive ? Direction::suppress : Direction::promote)},
            {"k", s.k},
            {"score", s.score},
            {"classified", s.classified}};
}

json geometry_json(const LoadedModel& m) {
    const auto& geo = m.geometry;
    return {{"adapter", m.store.adapter},
            {"n_layers", geo.n_layers},
            {"n_heads", geo.n_heads},
            {"n_kv_heads", geo.n_kv_heads},
            {"d_model", geo.d_model},
            {"d_head", geo.d_head},
            {"vocab_size", geo.vocab_size},
            {"weights_tied", geo.weights_tied},
            {"norm_kind", to_string(geo.norm_kind)},
            {"mlp_kind", to_string(geo.mlp_kind)},
            {"activation", to_string(geo.activation)},
            {"default_policy", to_string(m.store.default_policy)},
            {"has_first_mlp", m.store.mlp0.has_value()},
            {"has_final_norm", m.store.final_norm.has_value()}};
}

// Writes a planted toy as a native model with a vocabulary and relation manifest.
json write_toy_model(const toy::BatteryConfig& bc, const fs::path& dir) {
    fs::create_directories(dir / "relations");
    std::mt19937_64 rng(bc.seeds.front() * 7919 + 17);
    std::set<TokenId> exclude;
    std::vector<toy::PlantSpec> plants;
    for (std::size_t i = 0; i < bc.planted_heads; ++i) {
        plants.push_back({i, toy::random_pairs(bc.vocab_size, bc.pairs_per_plant, rng, exclude), bc.plant_gain});
    }
    toy::ToyModelSpec spec;
    spec.d_model = bc.d_model;
    spec.vocab_size = bc.vocab_size;
    spec.n_heads = bc.n_heads;
    spec.seed = bc.seeds.front();
    const toy::ToyModel m = toy::build_toy(spec, plants);
    const LoadedModel lm = toy::to_loaded_model(m);
    save_native(dir / "model.safetensors", lm.geometry, lm.store);

    const Vocabulary vocab = toy::toy_vocabulary(bc.vocab_size);
    json vj = json::object();
    for (std::size_t i = 0; i < vocab.size(); ++i) vj[vocab.token(static_cast<TokenId>(i))] = i;
    write_json(dir / "vocab.json", vj);

    json rels = json::array();
    for (std::size_t p = 0; p < plants.size(); ++p) {
        const std::string name = "plant" + std::to_string(p);
        std::string tsv = "# planted on head 0." + std::to_string(plants[p].head) + "\n";
        for (const auto& [s, t] : plants[p].pairs) tsv += "t" + std::to_string(s) + "\tt" + std::to_string(t) + "\n";
        write_text(dir / "relations" / (name + ".tsv"), tsv);
        rels.push_back({{"name", name}, {"category", "custom"}, {"file", "relations/" + name + ".tsv"}, {"k", 1}});
    }
    write_json(dir / "manifest.json", {{"relations", rels}});
    return {{"model", (dir / "model.safetensors").string()},
            {"vocab", (dir / "vocab.json").string()},
            {"manifest", (dir / "manifest.json").string()}};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"maps: map attention heads to vocabulary-level relations"};
    app.require_subcommand(1);
    app.fallthrough();
    app.add_option("--config", g.config_path, "JSON config mirroring the sweep config");
    app.add_option("--seed", g.seed, "Random seed");
    app.add_option("--workers", g.workers, "Worker threads");
    app.add_option("-o,--out", g.out, "Write the JSON result here instead of stdout");

    auto model_opts = [](CLI::App* s) {
        s->add_option("--model", g.model, "Weights file or directory");
        s->add_option("--adapter", g.adapter, "auto, gpt2, neox, llama or native");
        s->add_option("--vocab", g.vocab, "Token -> id JSON (default: next to the model)");
        s->add_option("--space-marker", g.space_marker, "Leading-space marker of the vocabulary");
        s->add_option("--geometry", g.geometry, "JSON object overriding model geometry");
        s->add_option("--policy", g.policy, "Token representation: raw or first-mlp");
        s->add_option("--mlp-form", g.mlp_form, "first-mlp variant: residual or pure");
        s->add_flag("--final-norm", g.final_norm, "Apply the final norm before unembedding");
        s->add_option("--block-rows", g.block_rows, "Mapping rows evaluated per block");
    };

    // inspect
    auto* inspect = app.add_subcommand("inspect", "Print model geometry");
    model_opts(inspect);
    inspect->callback([] {
        const auto c = sweep_config();
        emit(geometry_json(load(c)));
    });

    // score
    std::vector<std::string> head_labels;
    std::optional<std::size_t> layer_opt;
    std::string relation_name, pairs_path, direction = "promote";
    std::optional<std::size_t> k_opt;
    auto* score = app.add_subcommand("score", "Relation score of heads on one relation");
    model_opts(score);
    score->add_option("--head", head_labels, "Head as layer.head (repeatable)");
    score->add_option("--layer", layer_opt, "All heads of a layer");
    score->add_option("--relation", relation_name, "Relation name from the manifest");
    score->add_option("--manifest", g.manifest, "Relation manifest");
    score->add_option("--pairs", pairs_path, "Two-column TSV instead of a manifest entry");
    score->add_option("-k", k_opt, "Top-k (default from the relation policy)");
    score->add_option("--direction", direction, "promote, suppress or both");
    score->add_option("--tau", g.tau, "Classification threshold");
    score->callback([&] {
        const auto c = sweep_config();
        const auto m = load(c);
        const auto vocab = vocab_for(c);
        const auto rel = relation_from(c, vocab, relation_name, pairs_path);
        const std::size_t k = k_opt.value_or(default_k(rel.spec, m.geometry.vocab_size));
        std::vector<Direction> dirs;
        if (direction == "both") dirs = {Direction::promote, Direction::suppress};
        else dirs = {parse_direction(direction)};
        json out = json::array();
        std::optional<std::size_t> current;
        std::optional<VocabSpace> space;
        for (const auto& h : parse_heads(head_labels, m.geometry, layer_opt)) {
            if (current != h.layer) {
                space = space_for(c, m, h.layer);
                current = h.layer;
            }
            const auto op = make_head_operator(m, *space, h);
            for (auto d : dirs) out.push_back(score_json(relation_score(op, rel, k, d, c.tau, scan_of(c))));
        }
        emit({{"relation", rel.spec.name},
              {"pairs", rel.pairs.size()},
              {"dropped", rel.dropped.size()},
              {"scores", out}});
    });

    // sweep
    std::string csv_out, svg_out, stats_out;
    std::vector<std::string> sweep_heads;
    std::string sweep_dirs, checkpoint_dir;
    auto* sweep = app.add_subcommand("sweep", "Score every head on every relation of a manifest");
    model_opts(sweep);
    sweep->add_option("--manifest", g.manifest, "Relation manifest");
    sweep->add_option("--tau", g.tau, "Classification threshold");
    sweep->add_option("--head", sweep_heads, "Restrict to these heads (layer.head)");
    sweep->add_option("--directions", sweep_dirs, "promote, suppress or both");
    sweep->add_option("--checkpoint-dir", checkpoint_dir, "Per-layer checkpoints for resuming");
    sweep->add_option("--csv", csv_out, "Also write cell scores as CSV");
    sweep->add_option("--svg", svg_out, "Also write the category heatmap");
    sweep->add_option("--stats", stats_out, "Also write the statistics document");
    sweep->callback([&] {
        auto c = sweep_config();
        if (!sweep_heads.empty()) {
            std::vector<HeadRef> hs;
            for (const auto& l : sweep_heads) hs.push_back(HeadRef::parse(l));
            c.heads = hs;
        }
        if (!sweep_dirs.empty()) {
            c.directions = sweep_dirs == "both" ? std::vector<Direction>{Direction::promote, Direction::suppress}
                                                : std::vector<Direction>{parse_direction(sweep_dirs)};
        }
        if (!checkpoint_dir.empty()) c.checkpoint_dir = checkpoint_dir;
        const SweepResult r = run_sweep(c);
        for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
        emit(to_json(r));
        if (!csv_out.empty()) export_report(r, c.tau, ReportFormat::csv, csv_out);
        if (!svg_out.empty()) export_report(r, c.tau, ReportFormat::svg, svg_out);
        if (!stats_out.empty()) export_report(r, c.tau, ReportFormat::stats, stats_out);
    });

    // classify
    std::string report_path;
    auto* classify_cmd = app.add_subcommand("classify", "Re-classify a sweep report at a threshold");
    classify_cmd->add_option("--report", report_path, "Sweep report JSON")->required();
    classify_cmd->add_option("--tau", g.tau, "Classification threshold");
    classify_cmd->callback([&] {
        const auto r = read_sweep(report_path);
        const double tau = g.tau.value_or(r.tau);
        if (!(tau >= 0.0 && tau <= 1.0)) throw UsageError("tau must be in [0, 1]");
        emit(stats_document(r, tau));
    });

    // saliency
    std::size_t top_tokens = 20;
    auto* sal = app.add_subcommand("saliency", "Saliency profile and input skewness of a head");
    model_opts(sal);
    sal->add_option("--head", head_labels, "Head as layer.head")->required();
    sal->add_option("--top", top_tokens, "Number of most salient tokens to list");
    sal->callback([&] {
        const auto c = sweep_config();
        const auto m = load(c);
        const auto vocab = vocab_for(c);
        json out = json::array();
        for (const auto& h : parse_heads(head_labels, m.geometry, std::nullopt)) {
            const auto op = make_head_operator(m, space_for(c, m, h.layer), h);
            const auto prof = saliency(op, scan_of(c));
            std::vector<TokenId> order(prof.sigma.size());
            std::iota(order.begin(), order.end(), 0);
            const std::size_t n = std::min(top_tokens, order.size());
            std::partial_sort(order.begin(), order.begin() + n, order.end(), [&](TokenId a, TokenId b) {
                return prof.sigma[a] != prof.sigma[b] ? prof.sigma[a] > prof.sigma[b] : a < b;
            });
            json top = json::array();
            for (std::size_t i = 0; i < n; ++i)
                top.push_back({{"id", order[i]}, {"token", vocab.display(order[i])}, {"sigma", prof.sigma[order[i]]}});
            out.push_back({{"head", h.label()},
                           {"skewness", prof.skewness ? json(*prof.skewness) : json(nullptr)},
                           {"top", top},
                           {"warnings", prof.warnings}});
        }
        emit(out);
    });

    // salient-maps
    std::size_t k_tokens = 30, n_targets = 5;
    auto* sm = app.add_subcommand("salient-maps", "Most salient tokens with their top mappings");
    model_opts(sm);
    sm->add_option("--head", head_labels, "Head as layer.head")->required();
    sm->add_option("--k-tokens", k_tokens, "Salient source tokens");
    sm->add_option("--n-targets", n_targets, "Targets per source");
    sm->callback([&] {
        const auto c = sweep_config();
        const auto m = load(c);
        const auto vocab = vocab_for(c);
        json out = json::array();
        for (const auto& h : parse_heads(head_labels, m.geometry, std::nullopt)) {
            const auto op = make_head_operator(m, space_for(c, m, h.layer), h);
            const auto set = salient_mappings(op, k_tokens, n_targets, &vocab, scan_of(c));
            json entries = json::array();
            for (const auto& e : set.entries) {
                json ts = json::array();
                for (const auto& t : e.targets) ts.push_back({{"id", t.id}, {"token", t.text}, {"score", t.score}});
                entries.push_back({{"id", e.source_id}, {"token", e.source}, {"sigma", e.sigma}, {"targets", ts}});
            }
            out.push_back({{"head", h.label()}, {"entries", entries}});
        }
        emit(out);
    });

    // describe
    std::string endpoint_path, canned_dir, prompts_dir;
    bool strict_unclear = false;
    auto* desc = app.add_subcommand("describe", "Describe salient mappings with a chat-completion model");
    model_opts(desc);
    desc->add_option("--head", head_labels, "Head as layer.head (repeatable)");
    desc->add_option("--layer", layer_opt, "All heads of a layer");
    desc->add_option("--endpoint", endpoint_path, "Endpoint config JSON");
    desc->add_option("--canned", canned_dir, "Directory of canned replies keyed by request hash");
    desc->add_option("--dump-prompts", prompts_dir, "Write each prompt as <request hash>.prompt.txt here");
    desc->add_flag("--strict-unclear", strict_unclear, "Only an exact \"Unclear\" means no pattern");
    desc->callback([&] {
        const auto c = sweep_config();
        EndpointConfig ep;
        if (!endpoint_path.empty()) {
            std::ifstream in(endpoint_path);
            if (!in) throw IoError(endpoint_path, "cannot open endpoint config");
            const json j = json::parse(in, nullptr, false);
            if (j.is_discarded()) throw DataError(endpoint_path + ": not valid JSON");
            ep = EndpointConfig::from_json(j);
        }
        if (g.seed) ep.seed = *g.seed;
        if (strict_unclear) ep.strict_unclear = true;
        const auto m = load(c);
        const auto vocab = vocab_for(c);
        std::vector<SalientMappingSet> sets;
        for (const auto& h : parse_heads(head_labels, m.geometry, layer_opt)) {
            const auto op = make_head_operator(m, space_for(c, m, h.layer), h);
            sets.push_back(salient_mappings(op, 30, 5, &vocab, scan_of(c)));
        }
        if (!prompts_dir.empty()) {
            fs::create_directories(prompts_dir);
            for (const auto& s : sets) {
                const ChatRequest req{ep.model, format_prompt(s), ep.seed, ep.temperature, ep.max_tokens};
                write_text(fs::path(prompts_dir) / (req.hash() + ".prompt.txt"), req.prompt);
            }
        }
        auto transport = make_transport(ep, canned_dir);
        const auto records = describe_sets(sets, ep, *transport);
        json recs = json::array();
        for (const auto& r : records) recs.push_back(to_json(r));
        json rate = json::object();
        for (const auto& [layer, f] : identification_rate(records)) rate[std::to_string(layer)] = f;
        emit({{"descriptions", recs}, {"identification_rate", rate}});
    });

    // skewness
    auto* skew = app.add_subcommand("skewness", "Input skewness of saliency for heads");
    model_opts(skew);
    skew->add_option("--head", head_labels, "Head as layer.head (repeatable)");
    skew->add_option("--layer", layer_opt, "All heads of a layer");
    skew->callback([&] {
        const auto c = sweep_config();
        const auto m = load(c);
        json out = json::array();
        std::optional<std::size_t> current;
        std::optional<VocabSpace> space;
        for (const auto& h : parse_heads(head_labels, m.geometry, layer_opt)) {
            if (current != h.layer) {
                space = space_for(c, m, h.layer);
                current = h.layer;
            }
            const auto prof = saliency(make_head_operator(m, *space, h), scan_of(c));
            out.push_back({{"head", h.label()}, {"skewness", prof.skewness ? json(*prof.skewness) : json(nullptr)}});
        }
        emit(out);
    });

    // output-space
    auto* os = app.add_subcommand("output-space", "Share of the vocabulary reached as argmax targets");
    model_opts(os);
    os->add_option("--head", head_labels, "Head as layer.head (repeatable)");
    os->add_option("--layer", layer_opt, "All heads of a layer");
    os->callback([&] {
        const auto c = sweep_config();
        const auto m = load(c);
        json out = json::array();
        std::optional<std::size_t> current;
        std::optional<VocabSpace> space;
        for (const auto& h : parse_heads(head_labels, m.geometry, layer_opt)) {
            if (current != h.layer) {
                space = space_for(c, m, h.layer);
                current = h.layer;
            }
            out.push_back({{"head", h.label()},
                           {"output_space_size", output_space_size(make_head_operator(m, *space, h), scan_of(c))}});
        }
        json doc = {{"heads", out}};
        if (!c.vocab_path.empty()) doc["capitalized_space_fraction"] = capitalized_space_fraction(vocab_for(c));
        emit(doc);
    });

    // baselines
    std::size_t baseline_layer = 0, baseline_count = 0;
    auto* base = app.add_subcommand("baselines", "Score random-baseline heads of a layer on the manifest");
    model_opts(base);
    base->add_option("--layer", baseline_layer, "Layer whose W_VO statistics are matched")->required();
    base->add_option("--count", baseline_count, "Random heads (default: heads per layer)");
    base->add_option("--manifest", g.manifest, "Relation manifest");
    base->add_option("--tau", g.tau, "Classification threshold");
    base->callback([&] {
        const auto c = sweep_config();
        if (c.manifest_path.empty()) throw UsageError("--manifest is required");
        const auto m = load(c);
        if (baseline_layer >= m.geometry.n_layers) throw UsageError("layer out of range");
        const auto vocab = vocab_for(c);
        const auto rels = load_relations(c.manifest_path, vocab);
        std::vector<Matrix> ovs;
        for (std::size_t h = 0; h < m.geometry.n_heads; ++h) ovs.push_back(head_vo(m.store, m.geometry, {baseline_layer, h}));
        const auto heads = random_baseline_heads(ovs, baseline_count ? baseline_count : m.geometry.n_heads, c.seed);
        const auto space = space_for(c, m, baseline_layer);
        json per_rel = json::array();
        std::size_t any_classified = 0;
        std::vector<bool> classified(heads.size(), false);
        for (const auto& rel : rels) {
            if (rel.pairs.empty()) continue;
            const std::size_t k = c.k_overrides.contains(rel.spec.name) ? c.k_overrides.at(rel.spec.name)
                                                                         : default_k(rel.spec, m.geometry.vocab_size);
            double max_score = 0.0;
            std::size_t n_classified = 0;
            for (std::size_t i = 0; i < heads.size(); ++i) {
                const HeadOperator op(space, heads[i], HeadRef{baseline_layer, i});
                const auto s = relation_score(op, rel, k, Direction::promote, c.tau, scan_of(c));
                max_score = std::max(max_score, s.score);
                n_classified += s.classified;
                if (s.classified) classified[i] = true;
            }
            per_rel.push_back({{"relation", rel.spec.name}, {"k", k}, {"max_score", max_score}, {"classified", n_classified}});
        }
        for (bool b : classified) any_classified += b;
        emit({{"layer", baseline_layer},
              {"random_heads", heads.size()},
              {"seed", c.seed},
              {"classified_fraction", static_cast<double>(any_classified) / static_cast<double>(heads.size())},
              {"relations", per_rel}});
    });

    // toy
    std::string toy_config, write_model_dir;
    auto* toy_cmd = app.add_subcommand("toy", "Run the planted-toy verification battery");
    toy_cmd->add_option("--toy-config", toy_config, "Battery config JSON");
    toy_cmd->add_option("--write-model", write_model_dir, "Also write a planted toy model, vocabulary and manifest here");
    int toy_status = 0;
    toy_cmd->callback([&] {
        json j = json::object();
        if (!toy_config.empty()) {
            std::ifstream in(toy_config);
            if (!in) throw IoError(toy_config, "cannot open toy config");
            j = json::parse(in, nullptr, false);
            if (j.is_discarded()) throw DataError(toy_config + ": not valid JSON");
        }
        if (g.seed) j["seeds"] = std::vector<std::uint64_t>{*g.seed};
        const auto bc = toy::BatteryConfig::from_json(j);
        const auto results = toy::run_battery(bc);
        json doc = toy::battery_report(bc, results);
        if (!write_model_dir.empty()) doc["written"] = write_toy_model(bc, write_model_dir);
        emit(doc);
        for (const auto& r : results) std::cerr << (r.passed ? "PASS " : "FAIL ") << r.name << "\n";
        if (!doc["passed"].get<bool>()) toy_status = 2;
    });

    // export
    std::string format = "json";
    auto* exp = app.add_subcommand("export", "Convert a sweep report to another artifact");
    exp->add_option("--report", report_path, "Sweep report JSON")->required();
    exp->add_option("--format", format, "json, csv, counts-csv, svg or stats");
    exp->add_option("--tau", g.tau, "Classification threshold");
    exp->callback([&] {
        if (g.out.empty()) throw UsageError("export needs --out");
        const auto r = read_sweep(report_path);
        const double tau = g.tau.value_or(r.tau);
        if (!(tau >= 0.0 && tau <= 1.0)) throw UsageError("tau must be in [0, 1]");
        export_report(r, tau, parse_report_format(format), g.out);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return 3;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return toy_status;
}
