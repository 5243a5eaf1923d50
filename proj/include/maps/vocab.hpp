#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace maps {

using TokenId = std::uint32_t;

class Vocabulary {
public:
    Vocabulary() = default;
    // Throws DataError unless `tokens` is duplicate free.
    explicit Vocabulary(std::vector<std::string> tokens, std::string space_marker = "Ġ");

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(TokenId id) const { return tokens_.at(id); }
    std::optional<TokenId> find(const std::string& s) const;
    const std::string& space_marker() const { return space_marker_; }
    const std::vector<std::string>& tokens() const { return tokens_; }

    // Human-readable form of a token: byte-level markers decoded to bytes,
    // undecodable bytes rendered as <0xNN>.
    std::string display(TokenId id) const;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> ids_;
    std::string space_marker_;
};

// Reads a token -> id map: either a flat JSON object or a tokenizer
// description with the map under model.vocab. Ids must be dense from 0.
Vocabulary load_vocab(const std::filesystem::path& path, std::string space_marker = "Ġ");

std::optional<TokenId> lookup_single_token(const Vocabulary& vocab, const std::string& word,
                                           bool leading_space);

// Decodes a byte-level BPE token string (GPT-2 byte-to-unicode alphabet).
// Returns nullopt when a code point falls outside that alphabet.
std::optional<std::string> decode_byte_level(const std::string& token);

enum class RelationCategory { algorithmic, knowledge, linguistic, translation, custom };
std::string to_string(RelationCategory c);
RelationCategory parse_category(const std::string& s);

struct RelationSpec {
    std::string name;
    RelationCategory category = RelationCategory::custom;
    bool suppressive = false;
    std::optional<std::size_t> k_override;
    bool copying = false;  // copying-type k policy regardless of name
    bool target_leading_space = true;
};

struct DroppedPair {
    std::string source;
    std::string target;
    std::string reason;
};

struct TokenizedRelation {
    RelationSpec spec;
    std::vector<std::pair<TokenId, TokenId>> pairs;
    std::vector<DroppedPair> dropped;
    std::vector<std::string> warnings;
};

// Hook for tokenizers where space-marked vocabulary membership is not
// equivalent to single-token encoding.
using SingleTokenEncoder =
    std::function<std::optional<TokenId>(const std::string& word, bool leading_space)>;

TokenizedRelation tokenize_relation(const Vocabulary& vocab, const RelationSpec& spec,
                                    const std::vector<std::pair<std::string, std::string>>& raw_pairs,
                                    const SingleTokenEncoder& encoder = {});

std::size_t default_k(const RelationSpec& spec, std::size_t vocab_size);

// Two-column TSV, '#' comment lines and blank lines skipped.
std::vector<std::pair<std::string, std::string>> load_pairs_tsv(const std::filesystem::path& path);

struct ManifestEntry {
    RelationSpec spec;
    std::filesystem::path file;
};

// JSON manifest: {"relations": [{"name", "category", "file", "suppressive"?,
// "k"?, "copying"?, "target_leading_space"?}]}; files resolve relative to it.
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path);

std::vector<TokenizedRelation> load_relations(const std::filesystem::path& manifest,
                                              const Vocabulary& vocab);

}  // namespace maps
