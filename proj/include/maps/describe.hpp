#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "maps/errors.hpp"
#include "maps/model_io.hpp"
#include "maps/projector.hpp"
#include "maps/vocab.hpp"

namespace maps {

struct EndpointConfig {
    std::string base_url = "https://api.openai.com/v1";
    std::string model = "gpt-4o";
    std::string token_env = "OPENAI_API_KEY";
    std::uint64_t seed = 0;
    unsigned max_retries = 2;
    double timeout_seconds = 60.0;
    unsigned max_concurrency = 4;
    double temperature = 0.0;
    std::size_t max_tokens = 1024;
    bool strict_unclear = false;  // only an exact "Unclear" means no pattern

    static EndpointConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    void validate() const;
};

struct DescribeResponse {
    std::string reasoning;
    std::string input_strings;
    std::string observed_pattern;
    bool pattern_detected = false;
    std::string raw;
};

class ResponseParseError : public DataError {
public:
    ResponseParseError(const std::string& what, std::string raw)
        : DataError(what), raw_(std::move(raw)) {}
    const std::string& raw() const { return raw_; }

private:
    std::string raw_;
};

class RetriesExhausted : public DataError {
public:
    using DataError::DataError;
};

// Fills the describer prompt with the set's salient tokens and their
// "s: t1, t2, t3, t4, t5" mappings, in saliency order.
std::string format_prompt(const SalientMappingSet& set);

// Reads the "Reasoning", "Input strings" and "Observed pattern" keys from a
// reply that may wrap the JSON object in prose or code fences.
DescribeResponse parse_response(const std::string& raw, bool strict_unclear = false);

// No pattern iff the observation contains "clear" (any case); in strict mode
// iff it is exactly "Unclear".
bool pattern_detected(const std::string& observed_pattern, bool strict_unclear = false);

struct ChatRequest {
    std::string model;
    std::string prompt;
    std::uint64_t seed = 0;
    double temperature = 0.0;
    std::size_t max_tokens = 1024;

    nlohmann::json body() const;
    std::string hash() const;  // FNV-1a of the serialized body, 16 hex digits
};

struct ChatReply {
    std::string content;
    std::string finish_reason = "stop";
};

ChatReply parse_chat_completion(const nlohmann::json& body);

class Transport {
public:
    virtual ~Transport() = default;
    virtual ChatReply complete(const ChatRequest& request) = 0;
};

// Offline transport. Replies come from a queue of scripted replies when one
// is set, else from <dir>/<request hash>.json (a chat-completion body) or
// <dir>/<request hash>.txt (the message content).
class CannedTransport : public Transport {
public:
    CannedTransport() = default;
    explicit CannedTransport(std::filesystem::path dir) : dir_(std::move(dir)) {}

    void push(ChatReply reply);
    void push(std::string content) { push(ChatReply{std::move(content), "stop"}); }

    ChatReply complete(const ChatRequest& request) override;
    std::size_t requests() const;
    std::vector<ChatRequest> history() const;

private:
    std::filesystem::path dir_;
    mutable std::mutex mu_;
    std::deque<ChatReply> scripted_;
    std::vector<ChatRequest> history_;
};

// POSTs to <base_url>/chat/completions with a bearer token read from the
// configured environment variable.
class HttpTransport : public Transport {
public:
    explicit HttpTransport(EndpointConfig config);
    ChatReply complete(const ChatRequest& request) override;

private:
    EndpointConfig config_;
};

std::unique_ptr<Transport> make_transport(const EndpointConfig& config, const std::string& canned_dir);

struct DescribeRecord {
    HeadRef head;
    std::string prompt;
    DescribeResponse response;
    unsigned attempts = 0;
};

// One request per attempt with seed = config.seed + attempt; truncated or
// unparseable replies are retried up to max_retries times.
DescribeRecord describe_set(const SalientMappingSet& set, const EndpointConfig& config, Transport& transport);

struct DescribeOptions {
    EmbeddingPolicy policy = EmbeddingPolicy::raw;
    MlpForm mlp_form = MlpForm::residual;
    std::size_t k_tokens = 30;
    std::size_t n_targets = 5;
    unsigned workers = 1;
};

DescribeRecord describe_head(const LoadedModel& model, const Vocabulary& vocab, HeadRef head,
                             const EndpointConfig& config, Transport& transport,
                             const DescribeOptions& options = {});

// At most config.max_concurrency requests in flight; output follows input order.
std::vector<DescribeRecord> describe_sets(const std::vector<SalientMappingSet>& sets,
                                          const EndpointConfig& config, Transport& transport);

// Fraction of heads per layer with a detected pattern.
std::map<std::size_t, double> identification_rate(const std::vector<DescribeRecord>& records);

nlohmann::json to_json(const DescribeRecord& record);

}  // namespace maps
