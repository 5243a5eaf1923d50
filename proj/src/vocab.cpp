#include "maps/vocab.hpp"

#include <array>
#include <fstream>
#include <set>

#include <json.hpp>

#include "maps/errors.hpp"

namespace maps {

namespace fs = std::filesystem;
using nlohmann::json;

Vocabulary::Vocabulary(std::vector<std::string> tokens, std::string space_marker)
    : tokens_(std::move(tokens)), space_marker_(std::move(space_marker)) {
    ids_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
            throw DataError("vocabulary: token '" + tokens_[i] + "' appears twice");
        }
    }
}

std::optional<TokenId> Vocabulary::find(const std::string& s) const {
    auto it = ids_.find(s);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
}

namespace {

// GPT-2 byte <-> unicode table.
const std::array<int, 512>& unicode_to_byte() {
    static const std::array<int, 512> table = [] {
        std::array<int, 512> t;
        t.fill(-1);
        int next = 256;
        for (int b = 0; b < 256; ++b) {
            const bool printable = (b >= 33 && b <= 126) || (b >= 161 && b <= 172) || (b >= 174);
            const int cp = printable ? b : next++;
            t[cp] = b;
        }
        return t;
    }();
    return table;
}

// Decodes one UTF-8 code point at s[i]; returns -1 on malformed input.
int next_code_point(const std::string& s, std::size_t& i) {
    const auto c = static_cast<unsigned char>(s[i]);
    int len = 0;
    int cp = 0;
    if (c < 0x80) {
        len = 1;
        cp = c;
    } else if ((c >> 5) == 0x6) {
        len = 2;
        cp = c & 0x1f;
    } else if ((c >> 4) == 0xe) {
        len = 3;
        cp = c & 0x0f;
    } else if ((c >> 3) == 0x1e) {
        len = 4;
        cp = c & 0x07;
    } else {
        return -1;
    }
    if (i + len > s.size()) return -1;
    for (int k = 1; k < len; ++k) {
        const auto cc = static_cast<unsigned char>(s[i + k]);
        if ((cc >> 6) != 0x2) return -1;
        cp = (cp << 6) | (cc & 0x3f);
    }
    i += len;
    return cp;
}

bool valid_utf8(const std::string& s) {
    std::size_t i = 0;
    while (i < s.size())
        if (next_code_point(s, i) < 0) return false;
    return true;
}

// Copies valid UTF-8 sequences and replaces stray bytes with <0xNN>.
std::string escape_invalid_utf8(const std::string& s) {
    std::string out;
    std::size_t i = 0;
    while (i < s.size()) {
        const std::size_t start = i;
        if (next_code_point(s, i) >= 0) {
            out.append(s, start, i - start);
        } else {
            char buf[8];
            std::snprintf(buf, sizeof buf, "<0x%02X>", static_cast<unsigned char>(s[start]));
            out += buf;
            i = start + 1;
        }
    }
    return out;
}

}  // namespace

std::optional<std::string> decode_byte_level(const std::string& token) {
    const auto& table = unicode_to_byte();
    std::string bytes;
    std::size_t i = 0;
    while (i < token.size()) {
        const int cp = next_code_point(token, i);
        if (cp < 0 || cp >= static_cast<int>(table.size()) || table[cp] < 0) return std::nullopt;
        bytes.push_back(static_cast<char>(table[cp]));
    }
    return bytes;
}

std::string Vocabulary::display(TokenId id) const {
    const std::string& t = token(id);
    if (space_marker_ == "Ġ") {
        if (auto bytes = decode_byte_level(t)) return escape_invalid_utf8(*bytes);
        return escape_invalid_utf8(t);
    }
    std::string out;
    for (std::size_t i = 0; i < t.size();) {
        if (!space_marker_.empty() && t.compare(i, space_marker_.size(), space_marker_) == 0) {
            out.push_back(' ');
            i += space_marker_.size();
        } else {
            out.push_back(t[i++]);
        }
    }
    return valid_utf8(out) ? out : escape_invalid_utf8(out);
}

Vocabulary load_vocab(const fs::path& path, std::string space_marker) {
    std::ifstream in(path);
    if (!in) throw IoError(path.string(), "cannot open vocabulary");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    const json* map = &j;
    if (j.contains("model") && j["model"].is_object() && j["model"].contains("vocab")) {
        map = &j["model"]["vocab"];
    }
    if (!map->is_object()) throw DataError(path.string() + ": expected a token -> id object");
    std::vector<std::string> tokens(map->size());
    std::vector<bool> seen(map->size(), false);
    for (auto it = map->begin(); it != map->end(); ++it) {
        if (!it->is_number_integer()) {
            throw DataError(path.string() + ": id of token '" + it.key() + "' is not an integer");
        }
        const auto id = it->get<long long>();
        if (id < 0 || static_cast<std::size_t>(id) >= tokens.size()) {
            throw DataError(path.string() + ": ids are not dense (gap below id " +
                            std::to_string(id) + ")");
        }
        if (seen[id]) throw DataError(path.string() + ": duplicate id " + std::to_string(id));
        seen[id] = true;
        tokens[id] = it.key();
    }
    return Vocabulary(std::move(tokens), std::move(space_marker));
}

std::optional<TokenId> lookup_single_token(const Vocabulary& vocab, const std::string& word,
                                           bool leading_space) {
    if (word.empty()) throw UsageError("lookup_single_token: empty word");
    return vocab.find(leading_space ? vocab.space_marker() + word : word);
}

std::string to_string(RelationCategory c) {
    switch (c) {
        case RelationCategory::algorithmic: return "algorithmic";
        case RelationCategory::knowledge: return "knowledge";
        case RelationCategory::linguistic: return "linguistic";
        case RelationCategory::translation: return "translation";
        case RelationCategory::custom: return "custom";
    }
    return "custom";
}

RelationCategory parse_category(const std::string& s) {
    if (s == "algorithmic") return RelationCategory::algorithmic;
    if (s == "knowledge") return RelationCategory::knowledge;
    if (s == "linguistic") return RelationCategory::linguistic;
    if (s == "translation") return RelationCategory::translation;
    if (s == "custom") return RelationCategory::custom;
    throw DataError("unknown relation category '" + s + "'");
}

TokenizedRelation tokenize_relation(const Vocabulary& vocab, const RelationSpec& spec,
                                    const std::vector<std::pair<std::string, std::string>>& raw_pairs,
                                    const SingleTokenEncoder& encoder) {
    if (raw_pairs.empty()) throw DataError("relation '" + spec.name + "' has no raw pairs");
    TokenizedRelation out;
    out.spec = spec;
    auto resolve = [&](const std::string& w, bool space) -> std::optional<TokenId> {
        if (w.empty()) return std::nullopt;
        return encoder ? encoder(w, space) : lookup_single_token(vocab, w, space);
    };
    for (const auto& [src, tgt] : raw_pairs) {
        const auto s = resolve(src, true);
        const auto t = resolve(tgt, spec.target_leading_space);
        if (s && t) {
            out.pairs.emplace_back(*s, *t);
            continue;
        }
        std::string reason;
        if (!s) reason = "source is not a single token";
        if (!t) reason += std::string(reason.empty() ? "" : "; ") + "target is not a single token";
        out.dropped.push_back({src, tgt, reason});
    }
    if (out.pairs.empty()) {
        out.warnings.push_back("relation '" + spec.name + "': no pair survived single-token filtering");
    }
    return out;
}

std::size_t default_k(const RelationSpec& spec, std::size_t vocab_size) {
    if (spec.k_override) return *spec.k_override;
    const bool copying = spec.copying || spec.name == "copying" || spec.name == "name_copying";
    if (vocab_size < 100000) return copying ? 1 : 10;
    return copying ? 3 : 25;
}

std::vector<std::pair<std::string, std::string>> load_pairs_tsv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(path.string(), "cannot open relation dataset");
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
            throw DataError(path.string() + ":" + std::to_string(lineno) +
                            ": expected two tab-separated columns");
        }
        out.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    return out;
}

std::vector<ManifestEntry> load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(path.string(), "cannot open relation manifest");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    if (!j.contains("relations") || !j["relations"].is_array()) {
        throw DataError(path.string() + ": manifest needs a \"relations\" array");
    }
    std::vector<ManifestEntry> out;
    std::set<std::string> names;
    for (const auto& r : j["relations"]) {
        ManifestEntry e;
        try {
            e.spec.name = r.at("name").get<std::string>();
            e.spec.category = parse_category(r.value("category", std::string("custom")));
            e.spec.suppressive = r.value("suppressive", false);
            if (r.contains("k")) e.spec.k_override = r["k"].get<std::size_t>();
            e.spec.copying = r.value("copying", false);
            e.spec.target_leading_space = r.value("target_leading_space", true);
            e.file = r.at("file").get<std::string>();
        } catch (const json::exception& ex) {
            throw DataError(path.string() + ": bad relation entry: " + ex.what());
        }
        if (e.file.is_relative()) e.file = path.parent_path() / e.file;
        if (!names.insert(e.spec.name).second) {
            throw DataError(path.string() + ": relation name '" + e.spec.name + "' is not unique");
        }
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<TokenizedRelation> load_relations(const fs::path& manifest, const Vocabulary& vocab) {
    std::vector<TokenizedRelation> out;
    for (const auto& e : load_manifest(manifest)) {
        out.push_back(tokenize_relation(vocab, e.spec, load_pairs_tsv(e.file)));
    }
    return out;
}

}  // namespace maps
