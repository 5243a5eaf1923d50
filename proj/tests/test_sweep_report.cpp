#include <doctest.h>

#include <regex>

#include "maps/errors.hpp"
#include "maps/report.hpp"
#include "maps/sweep.hpp"
#include "maps/toy.hpp"
#include "test_util.hpp"

using namespace maps;

namespace {

struct ToySweep {
    LoadedModel model;
    std::vector<TokenizedRelation> relations;
};

// 4 heads; head 1 carries rel_A (knowledge), head 3 carries rel_B (linguistic).
ToySweep toy_sweep_inputs(std::uint64_t seed = 0) {
    std::mt19937_64 rng(seed + 50);
    std::set<TokenId> exclude = {254, 255};
    const auto a = toy::random_pairs(256, 20, rng, exclude);
    const auto b = toy::random_pairs(256, 20, rng, exclude);
    toy::ToyModelSpec spec;
    spec.n_heads = 4;
    spec.seed = seed;
    const auto m = toy::build_toy(spec, {{1, a, 8.0f}, {3, b, 8.0f}});
    ToySweep out{toy::to_loaded_model(m), {toy::as_relation("rel_A", a, RelationCategory::knowledge),
                                           toy::as_relation("rel_B", b, RelationCategory::linguistic)}};
    for (auto& r : out.relations) r.spec.k_override = 1;
    return out;
}

RelationScore cell(std::size_t l, std::size_t h, const std::string& rel, double score, bool suppress = false) {
    RelationScore c;
    c.head = {l, h};
    c.relation = rel;
    c.score = score;
    c.k = 1;
    c.suppressive = suppress;
    c.classified = score >= kDefaultTau;
    return c;
}

SweepResult hand_result() {
    SweepResult r;
    r.model = "hand";
    r.n_layers = 1;
    r.n_heads = 3;
    r.heads = {{0, 0}, {0, 1}, {0, 2}};
    r.directions = {Direction::promote, Direction::suppress};
    r.relations = {{"know", RelationCategory::knowledge, false, 1, 10, 0},
                   {"ling", RelationCategory::linguistic, false, 1, 10, 0}};
    for (std::size_t h = 0; h < 3; ++h)
        for (const char* rel : {"know", "ling"})
            for (bool sup : {false, true}) r.cells.push_back(cell(0, h, rel, 0.0, sup));
    return r;
}

void set_score(SweepResult& r, std::size_t h, const std::string& rel, bool sup, double score) {
    for (auto& c : r.cells)
        if (c.head.head == h && c.relation == rel && c.suppressive == sup) {
            c.score = score;
            c.classified = score >= kDefaultTau;
        }
}

}  // namespace

TEST_SUITE("sweep") {

TEST_CASE("toy sweep: planted cells score 1, all others stay below tau") {
    const auto in = toy_sweep_inputs();
    SweepConfig cfg;
    const auto res = run_sweep(in.model, in.relations, cfg);
    REQUIRE(res.cells.size() == 8);
    for (const auto& c : res.cells) {
        const bool planted = (c.head.head == 1 && c.relation == "rel_A") || (c.head.head == 3 && c.relation == "rel_B");
        CHECK_FALSE(c.suppressive);
        CHECK(c.k == 1);
        if (planted) {
            CHECK(c.score == 1.0);
            CHECK(c.classified);
        } else {
            CHECK(c.score < kDefaultTau);
        }
    }
    const CountTable want = {{"rel_A", 1}, {"rel_B", 1}};
    CHECK(count_by_relation(res, kDefaultTau) == want);
    const auto grid = category_grid(res, kDefaultTau);
    CHECK(grid.at(0, 1) == std::set<RelationCategory>{RelationCategory::knowledge});
    CHECK(grid.at(0, 3) == std::set<RelationCategory>{RelationCategory::linguistic});
    CHECK(grid.at(0, 0).empty());
    CHECK(grid.at(0, 2).empty());
    CHECK(score_distribution(res, "rel_A").max == 1.0);
}

TEST_CASE("head subsets") {
    const auto in = toy_sweep_inputs();
    SweepConfig cfg;
    cfg.heads = std::vector<HeadRef>{{0, 2}};
    CHECK(run_sweep(in.model, in.relations, cfg).cells.size() == 2);
    cfg.heads = std::vector<HeadRef>{};
    const auto empty = run_sweep(in.model, in.relations, cfg);
    CHECK(empty.cells.empty());
    const CountTable zeros = {{"rel_A", 0}, {"rel_B", 0}};
    CHECK(count_by_relation(empty, kDefaultTau) == zeros);
    CHECK(category_grid(empty, kDefaultTau).empty());
    cfg.heads = std::vector<HeadRef>{{0, 9}};
    CHECK_THROWS_AS(run_sweep(in.model, in.relations, cfg), UsageError);
}

TEST_CASE("both directions and suppressive relations") {
    auto in = toy_sweep_inputs();
    SweepConfig cfg;
    cfg.directions = {Direction::promote, Direction::suppress};
    const auto both = run_sweep(in.model, in.relations, cfg);
    CHECK(both.cells.size() == 16);

    cfg.directions = {Direction::promote};
    in.relations[1].spec.suppressive = true;
    const auto mixed = run_sweep(in.model, in.relations, cfg);
    CHECK(mixed.cells.size() == 12);
    CHECK(directions_for(cfg, in.relations[1].spec).size() == 2);
    CHECK(directions_for(cfg, in.relations[0].spec).size() == 1);
}

TEST_CASE("relations without usable pairs are skipped with a warning") {
    auto in = toy_sweep_inputs();
    TokenizedRelation empty;
    empty.spec.name = "nothing";
    in.relations.push_back(empty);
    const auto res = run_sweep(in.model, in.relations, SweepConfig{});
    CHECK(res.cells.size() == 8);
    CHECK_FALSE(res.warnings.empty());
}

TEST_CASE("worker count and block size do not change results") {
    const auto in = toy_sweep_inputs(3);
    SweepConfig cfg;
    cfg.directions = {Direction::promote, Direction::suppress};
    const auto one = run_sweep(in.model, in.relations, cfg);
    cfg.workers = 4;
    cfg.block_rows = 3;
    const auto many = run_sweep(in.model, in.relations, cfg);
    CHECK(same_scores(one, many));
    CHECK(one.cells == many.cells);
}

TEST_CASE("checkpoints resume a sweep and torn files are recomputed") {
    TempDir dir;
    const auto in = toy_sweep_inputs(4);
    SweepConfig cfg;
    cfg.model_path = "toy";
    cfg.checkpoint_dir = dir.path().string();
    const auto first = run_sweep(in.model, in.relations, cfg);
    const auto file = dir.path() / cfg.hash() / "layer_0.json";
    REQUIRE(std::filesystem::exists(file));
    CHECK(same_scores(first, run_sweep(in.model, in.relations, cfg)));

    // a checkpoint is trusted as written: doctored scores come back verbatim
    auto doc = nlohmann::json::parse(read_file(file));
    doc["cells"][0]["score"] = 0.5;
    write_file(file, doc.dump());
    CHECK(run_sweep(in.model, in.relations, cfg).cells[0].score == 0.5);

    write_file(file, "{\"config_hash\": \"");
    CHECK(same_scores(first, run_sweep(in.model, in.relations, cfg)));
}

TEST_CASE("config hash ignores execution-only fields and survives re-serialization") {
    SweepConfig c;
    c.model_path = "m.safetensors";
    c.manifest_path = "rels.json";
    c.k_overrides = {{"copying", 3}};
    c.heads = std::vector<HeadRef>{{1, 2}, {0, 0}};
    c.directions = {Direction::suppress};
    const std::string h = c.hash();
    CHECK(h.size() == 16);
    CHECK(SweepConfig::from_json(c.to_json()).hash() == h);
    CHECK(SweepConfig::from_json(nlohmann::json::parse(c.to_json().dump())).to_json() == c.to_json());
    SweepConfig w = c;
    w.workers = 8;
    w.block_rows = 17;
    w.seed = 99;
    w.checkpoint_dir = "/tmp/x";
    CHECK(w.hash() == h);
    SweepConfig t = c;
    t.tau = 0.2;
    CHECK(t.hash() != h);
}

TEST_CASE("config validation") {
    SweepConfig c;
    c.tau = 1.5;
    CHECK_THROWS_AS(c.validate(), UsageError);
    c = {};
    c.directions.clear();
    CHECK_THROWS_AS(c.validate(), UsageError);
    c = {};
    c.workers = 0;
    CHECK_THROWS_AS(c.validate(), UsageError);
    const auto j = nlohmann::json::parse(R"({"directions": "both", "heads": ["0.1", "2.3"], "k": {"copying": 2}})");
    const auto parsed = SweepConfig::from_json(j);
    CHECK(parsed.directions.size() == 2);
    CHECK(parsed.heads->at(1) == HeadRef{2, 3});
    CHECK(parsed.k_overrides.at("copying") == 2);
}

TEST_CASE("category grid and summary statistics on hand-built results") {
    SweepResult r = hand_result();
    CHECK(category_grid(r, kDefaultTau).empty());
    const auto none = summary_stats(r, kDefaultTau);
    CHECK(none.classified_heads == 0);
    CHECK_FALSE(none.multi_category_fraction.has_value());
    CHECK_FALSE(none.suppression_fraction.has_value());

    // head 0: knowledge + linguistic; head 1: knowledge through suppression only
    set_score(r, 0, "know", false, 0.5);
    set_score(r, 0, "ling", false, 0.15);
    set_score(r, 1, "know", true, 0.3);
    const auto grid = category_grid(r, kDefaultTau);
    CHECK(grid.at(0, 0).size() == 2);
    CHECK(grid.at(0, 1) == std::set<RelationCategory>{RelationCategory::knowledge});
    const auto s = summary_stats(r, kDefaultTau);
    CHECK(s.classified_heads == 2);
    CHECK(s.multi_category_fraction == 0.5);
    CHECK(s.suppression_fraction == 0.5);
    CHECK(s.per_layer_classified_counts == std::vector<std::size_t>{2});

    // counts may exceed classified heads when one head carries several relations
    std::size_t total = 0;
    for (const auto& [name, n] : count_by_relation(r, kDefaultTau)) total += n;
    CHECK(total == 2);  // head 0 counted for know and ling
    CHECK(count_by_relation(r, kDefaultTau, Direction::suppress) == CountTable{{"know", 1}, {"ling", 0}});
}

TEST_CASE("grid non-emptiness matches classification, counts bound heads (random results)") {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> u(0.0, 0.3);
    for (int trial = 0; trial < 100; ++trial) {
        SweepResult r = hand_result();
        for (auto& c : r.cells) {
            c.score = std::round(u(rng) * 50) / 50;
            c.classified = c.score >= kDefaultTau;
        }
        const auto grid = category_grid(r, kDefaultTau);
        std::set<HeadRef> classified;
        std::set<HeadRef> multi_rel;
        std::map<HeadRef, int> per_head;
        for (const auto& c : r.cells)
            if (c.score >= kDefaultTau) classified.insert(c.head);
        for (const auto& c : r.cells)
            if (!c.suppressive && c.score >= kDefaultTau && ++per_head[c.head] > 1) multi_rel.insert(c.head);
        for (std::size_t h = 0; h < 3; ++h) CHECK(grid.at(0, h).empty() == !classified.contains({0, h}));
        std::set<HeadRef> promote_heads;
        for (const auto& c : r.cells)
            if (!c.suppressive && c.score >= kDefaultTau) promote_heads.insert(c.head);
        std::size_t total = 0;
        for (const auto& [name, n] : count_by_relation(r, kDefaultTau)) total += n;
        CHECK(total >= promote_heads.size());
        CHECK((total == promote_heads.size()) == multi_rel.empty());
        const auto s = summary_stats(r, kDefaultTau);
        CHECK(s.classified_heads == classified.size());
    }
}

TEST_CASE("score distribution bins") {
    SweepResult r = hand_result();
    set_score(r, 0, "know", false, 0.3);
    set_score(r, 1, "know", false, 1.0);
    set_score(r, 2, "know", false, 0.019);
    const auto d = score_distribution(r, "know");
    CHECK(d.n == 3);
    CHECK(d.max == 1.0);
    CHECK(d.counts[15] == 1);
    CHECK(d.counts[49] == 1);
    CHECK(d.counts[0] == 1);
    CHECK_THROWS_AS(score_distribution(r, "absent"), UsageError);
}

}  // TEST_SUITE

TEST_SUITE("report") {

TEST_CASE("sweep results round-trip through JSON") {
    const auto in = toy_sweep_inputs(5);
    SweepConfig cfg;
    cfg.directions = {Direction::promote, Direction::suppress};
    auto res = run_sweep(in.model, in.relations, cfg);
    res.warnings.push_back("note");
    const auto back = sweep_from_json(nlohmann::json::parse(to_json(res).dump()));
    CHECK(back == res);
    TempDir dir;
    write_json(dir / "r.json", to_json(res));
    CHECK(read_sweep(dir / "r.json") == res);
    CHECK_THROWS_AS(sweep_from_json(nlohmann::json::parse(R"({"cells": 3})")), DataError);
    CHECK_THROWS_AS(read_sweep(dir / "missing.json"), IoError);
}

TEST_CASE("format_double reads back exactly") {
    for (double v : {0.0, 0.15, 1.0 / 3.0, 0.95, 1e-17, 1.0}) CHECK(std::stod(format_double(v)) == v);
    CHECK(format_double(0.15) == "0.15");
}

TEST_CASE("exports are byte-stable") {
    const auto in = toy_sweep_inputs(6);
    const auto res = run_sweep(in.model, in.relations, SweepConfig{});
    TempDir dir;
    for (auto f : {ReportFormat::json, ReportFormat::csv, ReportFormat::counts_csv, ReportFormat::svg,
                   ReportFormat::stats}) {
        export_report(res, kDefaultTau, f, dir / "a.out");
        export_report(res, kDefaultTau, f, dir / "b.out");
        const std::string a = read_file(dir / "a.out");
        CHECK_FALSE(a.empty());
        CHECK(a == read_file(dir / "b.out"));
    }
    CHECK_THROWS_AS(export_report(res, kDefaultTau, ReportFormat::csv, dir / "no" / "such" / "dir" / "x.csv"),
                    IoError);
}

TEST_CASE("csv layouts") {
    const auto in = toy_sweep_inputs(7);
    const auto res = run_sweep(in.model, in.relations, SweepConfig{});
    const std::string cells = cells_csv(res);
    CHECK(cells.rfind("layer,head,relation,direction,k,score,classified\n", 0) == 0);
    CHECK(std::count(cells.begin(), cells.end(), '\n') == 9);
    CHECK(cells.find("0,1,rel_A,promote,1,1,1\n") != std::string::npos);
    const std::string counts = counts_csv(res, kDefaultTau);
    CHECK(counts == "relation,category,promote_heads,suppress_heads\nrel_A,knowledge,1,0\nrel_B,linguistic,1,0\n");
}

TEST_CASE("svg heatmap has one cell per head") {
    for (std::size_t layers : {1u, 3u}) {
        for (std::size_t heads : {4u, 12u}) {
            CategoryGrid g;
            g.n_layers = layers;
            g.n_heads = heads;
            g.cells.resize(layers * heads);
            g.cells[0].insert(RelationCategory::knowledge);
            g.cells.back().insert(RelationCategory::translation);
            g.cells.back().insert(RelationCategory::algorithmic);
            const std::string svg = category_svg(g);
            const std::regex rect("<rect class=\"cell\"");
            const auto n = std::distance(std::sregex_iterator(svg.begin(), svg.end(), rect), std::sregex_iterator());
            CHECK(static_cast<std::size_t>(n) == layers * heads);
            CHECK(svg.rfind("<svg", 0) == 0);
        }
    }
}

TEST_CASE("stats document carries every section") {
    const auto in = toy_sweep_inputs(8);
    SweepConfig cfg;
    cfg.directions = {Direction::promote, Direction::suppress};
    const auto res = run_sweep(in.model, in.relations, cfg);
    const auto doc = stats_document(res, kDefaultTau);
    for (const char* key : {"counts_promote", "counts_suppress", "summary", "category_grid", "distributions"})
        CHECK(doc.contains(key));
    CHECK(doc["distributions"].size() == 4);
    CHECK(doc["summary"]["classified_heads"] == 2);
}

TEST_CASE("report format names") {
    CHECK(parse_report_format("counts-csv") == ReportFormat::counts_csv);
    CHECK(parse_report_format("svg") == ReportFormat::svg);
    CHECK_THROWS_AS(parse_report_format("pdf"), UsageError);
}

}  // TEST_SUITE
