#include "maps/describe.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <httplib.h>

namespace maps {

namespace fs = std::filesystem;
using nlohmann::json;

EndpointConfig EndpointConfig::from_json(const json& j) {
    EndpointConfig c;
    try {
        c.base_url = j.value("base_url", c.base_url);
        c.model = j.value("model", c.model);
        c.token_env = j.value("token_env", c.token_env);
        c.seed = j.value("seed", c.seed);
        c.max_retries = j.value("max_retries", c.max_retries);
        c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
        c.max_concurrency = j.value("max_concurrency", c.max_concurrency);
        c.temperature = j.value("temperature", c.temperature);
        c.max_tokens = j.value("max_tokens", c.max_tokens);
        c.strict_unclear = j.value("strict_unclear", c.strict_unclear);
    } catch (const json::exception& e) {
        throw DataError(std::string("endpoint config: ") + e.what());
    }
    c.validate();
    return c;
}

json EndpointConfig::to_json() const {
    return {{"base_url", base_url},       {"model", model},
            {"token_env", token_env},     {"seed", seed},
            {"max_retries", max_retries}, {"timeout_seconds", timeout_seconds},
            {"max_concurrency", max_concurrency}, {"temperature", temperature},
            {"max_tokens", max_tokens},   {"strict_unclear", strict_unclear}};
}

void EndpointConfig::validate() const {
    if (max_concurrency < 1) throw UsageError("max_concurrency must be at least 1");
    if (!(timeout_seconds > 0.0)) throw UsageError("timeout must be positive");
    if (max_tokens == 0) throw UsageError("max_tokens must be positive");
}

namespace {

constexpr const char* kPromptHead =
    "Below you are given a list of input strings, and a list of mappings: each mapping is between an input "
    "string and a list of 5 strings.\n"
    "Mappings are provided in the format \"s: t1, t2, t3, t4, t5\" where each of s, t1, t2, t3, t4, t5 is a "
    "short string, typically corresponding to a single word or a sub-word.\n"
    "Your goal is to describe shortly and simply the inputs and the function that produces these mappings. To "
    "perform the task, look for semantic and textual patterns.\n"
    "For example, input tokens 'water','ice','freeze' are water-related, and a mapping ('fire':'f') is from a "
    "word to its first letter.\n"
    "As a final response, suggest the most clear patterns observed or indicate that no clear pattern is visible "
    "(write only the word \"Unclear\").\n"
    "Your response should be a vaild json, with the following keys:\n"
    "\"Reasoning\": your reasoning.\n"
    "\"Input strings\": One sentence describing the input strings (or \"Unclear\").\n"
    "\"Observed pattern\": One sentence describing the most clear patterns observed (or \"Unclear\").\n"
    "\n"
    "The input strings are:\n";

constexpr std::size_t kTemplateTargets = 5;

// Keeps one token per line: control characters become escapes.
std::string prompt_text(const std::string& s, TokenId id) {
    if (s.empty()) return "<" + std::to_string(id) + ">";
    std::string out;
    for (char c : s) {
        const auto u = static_cast<unsigned char>(c);
        if (c == '\n') {
            out += "\\n";
        } else if (c == '\t') {
            out += "\\t";
        } else if (c == '\r') {
            out += "\\r";
        } else if (u < 0x20 || u == 0x7f) {
            char buf[8];
            std::snprintf(buf, sizeof buf, "<0x%02X>", u);
            out += buf;
        } else {
            out += c;
        }
    }
    return out;
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// End (exclusive) of the balanced {...} starting at `begin`, or npos.
std::size_t object_end(const std::string& s, std::size_t begin) {
    int depth = 0;
    bool in_string = false;
    for (std::size_t i = begin; i < s.size(); ++i) {
        const char c = s[i];
        if (in_string) {
            if (c == '\\') ++i;
            else if (c == '"') in_string = false;
        } else if (c == '"') {
            in_string = true;
        } else if (c == '{') {
            ++depth;
        } else if (c == '}' && --depth == 0) {
            return i + 1;
        }
    }
    return std::string::npos;
}

const json* find_key(const json& obj, const std::string& key) {
    if (auto it = obj.find(key); it != obj.end()) return &*it;
    const std::string want = lower(key);
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (lower(trim(it.key())) == want) return &*it;
    return nullptr;
}

std::string as_text(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

std::string format_prompt(const SalientMappingSet& set) {
    if (set.entries.empty()) throw UsageError("format_prompt: empty mapping set");
    if (set.n_targets != kTemplateTargets) {
        throw UsageError("format_prompt: the prompt describes mappings to exactly 5 strings");
    }
    for (const auto& e : set.entries) {
        if (e.targets.size() != set.n_targets) {
            throw UsageError("format_prompt: entry " + std::to_string(e.source_id) + " has " +
                             std::to_string(e.targets.size()) + " targets, expected " +
                             std::to_string(set.n_targets));
        }
    }
    std::string out = kPromptHead;
    for (const auto& e : set.entries) out += prompt_text(e.source, e.source_id) + "\n";
    out += "\nThe mappings are:\n";
    for (const auto& e : set.entries) {
        out += prompt_text(e.source, e.source_id) + ":";
        for (std::size_t i = 0; i < e.targets.size(); ++i) {
            out += (i == 0 ? " " : ", ") + prompt_text(e.targets[i].text, e.targets[i].id);
        }
        out += "\n";
    }
    return out;
}

bool pattern_detected(const std::string& observed, bool strict_unclear) {
    if (strict_unclear) {
        std::string t = trim(observed);
        if (!t.empty() && t.back() == '.') t.pop_back();
        return lower(t) != "unclear";
    }
    return lower(observed).find("clear") == std::string::npos;
}

DescribeResponse parse_response(const std::string& raw, bool strict_unclear) {
    for (std::size_t pos = raw.find('{'); pos != std::string::npos; pos = raw.find('{', pos + 1)) {
        const std::size_t end = object_end(raw, pos);
        if (end == std::string::npos) continue;
        const json obj = json::parse(raw.begin() + pos, raw.begin() + end, nullptr, false);
        if (obj.is_discarded() || !obj.is_object()) continue;
        const json* pattern = find_key(obj, "Observed pattern");
        if (!pattern) continue;
        DescribeResponse r;
        r.raw = raw;
        r.observed_pattern = as_text(*pattern);
        if (const json* v = find_key(obj, "Reasoning")) r.reasoning = as_text(*v);
        if (const json* v = find_key(obj, "Input strings")) r.input_strings = as_text(*v);
        r.pattern_detected = pattern_detected(r.observed_pattern, strict_unclear);
        return r;
    }
    throw ResponseParseError("describer reply has no JSON object with an \"Observed pattern\" key", raw);
}

json ChatRequest::body() const {
    return {{"model", model},
            {"messages", json::array({{{"role", "user"}, {"content", prompt}}})},
            {"seed", seed},
            {"temperature", temperature},
            {"max_tokens", max_tokens}};
}

std::string ChatRequest::hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(body().dump())));
    return buf;
}

ChatReply parse_chat_completion(const json& body) {
    try {
        const auto& choice = body.at("choices").at(0);
        ChatReply r;
        r.content = choice.at("message").at("content").get<std::string>();
        if (choice.contains("finish_reason") && choice["finish_reason"].is_string()) {
            r.finish_reason = choice["finish_reason"].get<std::string>();
        }
        return r;
    } catch (const json::exception& e) {
        throw DataError(std::string("chat completion body: ") + e.what());
    }
}

void CannedTransport::push(ChatReply reply) {
    std::lock_guard lock(mu_);
    scripted_.push_back(std::move(reply));
}

ChatReply CannedTransport::complete(const ChatRequest& request) {
    {
        std::lock_guard lock(mu_);
        history_.push_back(request);
        if (!scripted_.empty()) {
            ChatReply r = std::move(scripted_.front());
            scripted_.pop_front();
            return r;
        }
    }
    if (dir_.empty()) throw DataError("canned transport: no scripted reply left");
    const std::string h = request.hash();
    if (std::ifstream in(dir_ / (h + ".json")); in) {
        json body = json::parse(in, nullptr, false);
        if (body.is_discarded()) throw DataError((dir_ / (h + ".json")).string() + ": not valid JSON");
        return parse_chat_completion(body);
    }
    if (std::ifstream in(dir_ / (h + ".txt")); in) {
        std::ostringstream s;
        s << in.rdbuf();
        return {s.str(), "stop"};
    }
    throw DataError("canned transport: no reply for request " + h + " in " + dir_.string());
}

std::size_t CannedTransport::requests() const {
    std::lock_guard lock(mu_);
    return history_.size();
}

std::vector<ChatRequest> CannedTransport::history() const {
    std::lock_guard lock(mu_);
    return history_;
}

HttpTransport::HttpTransport(EndpointConfig config) : config_(std::move(config)) { config_.validate(); }

ChatReply HttpTransport::complete(const ChatRequest& request) {
    const char* token = std::getenv(config_.token_env.c_str());
    if (!token || !*token) throw UsageError("environment variable " + config_.token_env + " is not set");

    const auto scheme_end = config_.base_url.find("://");
    if (scheme_end == std::string::npos) throw UsageError("base URL needs a scheme: " + config_.base_url);
    const auto path_begin = config_.base_url.find('/', scheme_end + 3);
    const std::string origin = config_.base_url.substr(0, path_begin);
    std::string prefix = path_begin == std::string::npos ? "" : config_.base_url.substr(path_begin);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    const std::string url = origin + prefix + "/chat/completions";

    httplib::Client client(origin);
    const auto secs = static_cast<time_t>(config_.timeout_seconds);
    client.set_connection_timeout(secs, 0);
    client.set_read_timeout(secs, 0);
    client.set_write_timeout(secs, 0);
    const httplib::Headers headers = {{"Authorization", std::string("Bearer ") + token}};
    auto res = client.Post(prefix + "/chat/completions", headers, request.body().dump(), "application/json");
    if (!res) throw IoError(url, "request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) {
        throw IoError(url, "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 300));
    }
    const json body = json::parse(res->body, nullptr, false);
    if (body.is_discarded()) throw DataError(url + ": response is not JSON");
    return parse_chat_completion(body);
}

std::unique_ptr<Transport> make_transport(const EndpointConfig& config, const std::string& canned_dir) {
    if (!canned_dir.empty()) return std::make_unique<CannedTransport>(canned_dir);
    return std::make_unique<HttpTransport>(config);
}

DescribeRecord describe_set(const SalientMappingSet& set, const EndpointConfig& config, Transport& transport) {
    DescribeRecord rec;
    rec.head = set.head;
    rec.prompt = format_prompt(set);
    std::string last_problem;
    for (unsigned attempt = 0; attempt <= config.max_retries; ++attempt) {
        ChatRequest req{config.model, rec.prompt, config.seed + attempt, config.temperature, config.max_tokens};
        const ChatReply reply = transport.complete(req);
        rec.attempts = attempt + 1;
        if (reply.finish_reason == "length") {
            last_problem = "reply truncated";
            continue;
        }
        try {
            rec.response = parse_response(reply.content, config.strict_unclear);
            return rec;
        } catch (const ResponseParseError& e) {
            last_problem = std::string(e.what()) + ": " + e.raw().substr(0, 200);
        }
    }
    throw RetriesExhausted("head " + set.head.label() + ": no usable reply after " +
                           std::to_string(config.max_retries + 1) + " attempts (" + last_problem + ")");
}

DescribeRecord describe_head(const LoadedModel& model, const Vocabulary& vocab, HeadRef head,
                             const EndpointConfig& config, Transport& transport, const DescribeOptions& options) {
    const VocabSpace space = VocabSpace::from_model(model, head.layer, options.policy, options.mlp_form, false,
                                                    options.workers);
    const HeadOperator op = make_head_operator(model, space, head);
    ScanOptions scan;
    scan.workers = options.workers;
    const auto set = salient_mappings(op, options.k_tokens, options.n_targets, &vocab, scan);
    return describe_set(set, config, transport);
}

std::vector<DescribeRecord> describe_sets(const std::vector<SalientMappingSet>& sets,
                                          const EndpointConfig& config, Transport& transport) {
    config.validate();
    std::vector<DescribeRecord> out(sets.size());
    parallel_for(sets.size(), config.max_concurrency, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) out[i] = describe_set(sets[i], config, transport);
    });
    return out;
}

std::map<std::size_t, double> identification_rate(const std::vector<DescribeRecord>& records) {
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> tally;
    for (const auto& r : records) {
        auto& [hit, total] = tally[r.head.layer];
        hit += r.response.pattern_detected;
        ++total;
    }
    std::map<std::size_t, double> out;
    for (const auto& [layer, t] : tally) out[layer] = static_cast<double>(t.first) / static_cast<double>(t.second);
    return out;
}

json to_json(const DescribeRecord& r) {
    return {{"head", r.head.label()},
            {"attempts", r.attempts},
            {"reasoning", r.response.reasoning},
            {"input_strings", r.response.input_strings},
            {"observed_pattern", r.response.observed_pattern},
            {"pattern_detected", r.response.pattern_detected},
            {"raw", r.response.raw}};
}

}  // namespace maps
