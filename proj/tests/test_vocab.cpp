#include <doctest.h>

#include <random>
#include <set>

#include "maps/errors.hpp"
#include "maps/vocab.hpp"
#include "test_util.hpp"

using maps::Vocabulary;

TEST_SUITE("vocab") {

TEST_CASE("load_vocab reads flat maps and tokenizer descriptions") {
    TempDir dir;
    write_file(dir / "vocab.json", R"({"a":0,"Ġa":1,"b":2,"Ġb":3})");
    const Vocabulary v = maps::load_vocab(dir / "vocab.json");
    CHECK(v.size() == 4);
    CHECK(v.token(1) == "Ġa");
    write_file(dir / "tokenizer.json", R"({"model":{"type":"BPE","vocab":{"x":1,"y":0}}})");
    const Vocabulary t = maps::load_vocab(dir / "tokenizer.json");
    CHECK(t.size() == 2);
    CHECK(t.token(0) == "y");
}

TEST_CASE("load_vocab rejects id gaps and duplicates") {
    TempDir dir;
    write_file(dir / "gap.json", R"({"a":0,"b":2})");
    CHECK_THROWS_AS(maps::load_vocab(dir / "gap.json"), maps::DataError);
    write_file(dir / "dup.json", R"({"a":0,"b":0})");
    CHECK_THROWS_AS(maps::load_vocab(dir / "dup.json"), maps::DataError);
    write_file(dir / "bad.json", R"({"a":"zero"})");
    CHECK_THROWS_AS(maps::load_vocab(dir / "bad.json"), maps::DataError);
    CHECK_THROWS_AS(maps::load_vocab(dir / "absent.json"), maps::IoError);
    CHECK_THROWS_AS(Vocabulary({"a", "a"}), maps::DataError);
}

TEST_CASE("lookup_single_token") {
    const Vocabulary v({"a", "Ġa", "b", "Ġb"});
    CHECK_FALSE(maps::lookup_single_token(v, "qzx", true).has_value());
    CHECK(maps::lookup_single_token(v, "a", false) == 0u);
    CHECK(maps::lookup_single_token(v, "a", true) == 1u);
    const Vocabulary w({"x", "Ġthe"});
    CHECK(maps::lookup_single_token(w, "the", true) == 1u);
    CHECK_THROWS_AS(maps::lookup_single_token(v, "", true), maps::UsageError);
}

TEST_CASE("byte-level display decodes the space marker") {
    const Vocabulary v({"Ġhello", "plain", "Ċ"});
    CHECK(v.display(0) == " hello");
    CHECK(v.display(1) == "plain");
    CHECK(v.display(2) == "\n");
    const Vocabulary sp({"▁word"}, "▁");
    CHECK(sp.display(0) == " word");
}

TEST_CASE("tokenize_relation keeps single-token pairs and records the rest") {
    const Vocabulary v({"Ġa", "Ġb", "Ġhot", "Ġdog"});
    maps::RelationSpec spec{"r"};
    auto rel = maps::tokenize_relation(v, spec, {{"a", "b"}});
    REQUIRE(rel.pairs.size() == 1);
    CHECK(rel.pairs[0] == std::pair<maps::TokenId, maps::TokenId>{0, 1});

    rel = maps::tokenize_relation(v, spec, {{"hot", "hotdog"}, {"a", "b"}});
    CHECK(rel.pairs.size() == 1);
    REQUIRE(rel.dropped.size() == 1);
    CHECK(rel.dropped[0].target == "hotdog");

    rel = maps::tokenize_relation(v, spec, {{"zzz", "yyy"}});
    CHECK(rel.pairs.empty());
    CHECK(rel.warnings.size() == 1);
    CHECK_THROWS_AS(maps::tokenize_relation(v, spec, {}), maps::DataError);
}

TEST_CASE("targets without a leading space for letter relations") {
    const Vocabulary v({"Ġapple", "a", "Ġa"});
    maps::RelationSpec spec{"word_to_first_letter"};
    spec.target_leading_space = false;
    const auto rel = maps::tokenize_relation(v, spec, {{"apple", "a"}});
    REQUIRE(rel.pairs.size() == 1);
    CHECK(rel.pairs[0].second == 1u);
}

TEST_CASE("an external encoder hook replaces vocabulary membership") {
    const Vocabulary v({"Ġa", "Ġb"});
    maps::SingleTokenEncoder enc = [](const std::string& w, bool) -> std::optional<maps::TokenId> {
        if (w == "x") return 7;
        return std::nullopt;
    };
    const auto rel = maps::tokenize_relation(v, {"r"}, {{"x", "x"}, {"a", "b"}}, enc);
    REQUIRE(rel.pairs.size() == 1);
    CHECK(rel.pairs[0].first == 7u);
    CHECK(rel.dropped.size() == 1);
}

TEST_CASE("tokenize_relation properties on random vocabularies") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::string> tokens;
        std::uniform_int_distribution<int> len(1, 4), ch(0, 3), coin(0, 1);
        std::set<std::string> seen;
        for (int i = 0; i < 40; ++i) {
            std::string w;
            for (int k = len(rng); k > 0; --k) w.push_back(static_cast<char>('a' + ch(rng)));
            const std::string t = coin(rng) ? "Ġ" + w : w;
            if (seen.insert(t).second) tokens.push_back(t);
        }
        const Vocabulary v(tokens);
        std::vector<std::pair<std::string, std::string>> raw;
        for (int i = 0; i < 30; ++i) {
            std::string s, t;
            for (int k = len(rng); k > 0; --k) s.push_back(static_cast<char>('a' + ch(rng)));
            for (int k = len(rng); k > 0; --k) t.push_back(static_cast<char>('a' + ch(rng)));
            raw.emplace_back(s, t);
        }
        const auto rel = maps::tokenize_relation(v, {"r"}, raw);
        CHECK(rel.pairs.size() + rel.dropped.size() == raw.size());
        std::size_t kept = 0;
        for (const auto& [s, t] : raw) {
            const auto sid = v.find("Ġ" + s);
            const auto tid = v.find("Ġ" + t);
            if (!sid || !tid) continue;
            REQUIRE(kept < rel.pairs.size());
            CHECK(v.token(rel.pairs[kept].first) == "Ġ" + s);
            CHECK(v.token(rel.pairs[kept].second) == "Ġ" + t);
            ++kept;
        }
        CHECK(kept == rel.pairs.size());
    }
}

TEST_CASE("default_k policy") {
    CHECK(maps::default_k({"copying"}, 50257) == 1);
    CHECK(maps::default_k({"name_copying"}, 50257) == 1);
    CHECK(maps::default_k({"country_to_capital"}, 50257) == 10);
    CHECK(maps::default_k({"copying"}, 128256) == 3);
    CHECK(maps::default_k({"country_to_capital"}, 128256) == 25);
    CHECK(maps::default_k({"country_to_capital"}, 100000) == 25);
    maps::RelationSpec flagged{"dup"};
    flagged.copying = true;
    CHECK(maps::default_k(flagged, 50257) == 1);
    for (std::size_t k : {1u, 4u, 99u}) {
        maps::RelationSpec s{"copying"};
        s.k_override = k;
        CHECK(maps::default_k(s, 50257) == k);
        CHECK(maps::default_k(s, 200000) == k);
    }
}

TEST_CASE("TSV datasets and manifests") {
    TempDir dir;
    write_file(dir / "caps.tsv", "# country\tcapital\nfrance\tparis\n\nitaly\trome\r\n");
    const auto pairs = maps::load_pairs_tsv(dir / "caps.tsv");
    REQUIRE(pairs.size() == 2);
    CHECK(pairs[1] == std::pair<std::string, std::string>{"italy", "rome"});
    write_file(dir / "bad.tsv", "one column\n");
    CHECK_THROWS_AS(maps::load_pairs_tsv(dir / "bad.tsv"), maps::DataError);
    write_file(dir / "three.tsv", "a\tb\tc\n");
    CHECK_THROWS_AS(maps::load_pairs_tsv(dir / "three.tsv"), maps::DataError);

    write_file(dir / "manifest.json", R"({"relations": [
        {"name": "country_to_capital", "category": "knowledge", "file": "caps.tsv"},
        {"name": "neg", "category": "linguistic", "file": "caps.tsv", "suppressive": true, "k": 3}]})");
    const auto m = maps::load_manifest(dir / "manifest.json");
    REQUIRE(m.size() == 2);
    CHECK(m[0].spec.category == maps::RelationCategory::knowledge);
    CHECK(m[0].file == dir / "caps.tsv");
    CHECK(m[1].spec.suppressive);
    CHECK(m[1].spec.k_override == 3u);

    const Vocabulary v({"Ġfrance", "Ġparis", "Ġitaly"});
    const auto rels = maps::load_relations(dir / "manifest.json", v);
    REQUIRE(rels.size() == 2);
    CHECK(rels[0].pairs.size() == 1);
    CHECK(rels[0].dropped.size() == 1);

    write_file(dir / "dupe.json", R"({"relations": [{"name": "a", "file": "x"}, {"name": "a", "file": "y"}]})");
    CHECK_THROWS_AS(maps::load_manifest(dir / "dupe.json"), maps::DataError);
    write_file(dir / "cat.json", R"({"relations": [{"name": "a", "file": "x", "category": "music"}]})");
    CHECK_THROWS_AS(maps::load_manifest(dir / "cat.json"), maps::DataError);
    write_file(dir / "none.json", R"({"rel": []})");
    CHECK_THROWS_AS(maps::load_manifest(dir / "none.json"), maps::DataError);
}

}  // TEST_SUITE
