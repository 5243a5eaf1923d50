#include "maps/toy.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "maps/errors.hpp"

namespace maps::toy {

using nlohmann::json;

namespace {

constexpr std::uint64_t kHeadStream = 0x9e3779b97f4a7c15ULL;

float resolved_scale(const ToyModelSpec& spec) {
    if (spec.embedding_scale > 0.0f) return spec.embedding_scale;
    return static_cast<float>(1.0 / std::sqrt(static_cast<double>(spec.d_model)));
}

void validate_spec(const ToyModelSpec& spec) {
    if (spec.vocab_size < 8) throw UsageError("toy: vocab_size must be at least 8");
    if (spec.d_model < 8) throw UsageError("toy: d_model must be at least 8");
    if (spec.n_heads == 0) throw UsageError("toy: n_heads must be positive");
    if (spec.embedding_scale < 0.0f) throw UsageError("toy: embedding_scale must be nonnegative");
}

Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix m(rows, cols);
    for (float& v : m.values()) v = static_cast<float>(dist(rng) * stddev);
    return m;
}

// E and U for a spec; U = E^T when tied.
std::pair<Matrix, Matrix> embeddings_for(const ToyModelSpec& spec) {
    std::mt19937_64 rng(spec.seed);
    const double scale = resolved_scale(spec);
    Matrix e = gaussian(spec.vocab_size, spec.d_model, scale, rng);
    Matrix u = spec.tie_embeddings ? e.transposed() : gaussian(spec.d_model, spec.vocab_size, scale, rng);
    return {std::move(e), std::move(u)};
}

// gain * sum_pairs (e_s / |e_s|^2)^T (u_t / |u_t|), accumulated in double.
std::vector<double> plant_matrix(const Matrix& e, const Matrix& u,
                                 const std::vector<std::pair<TokenId, TokenId>>& pairs, double gain) {
    const std::size_t d = e.cols();
    std::vector<double> w(d * d, 0.0);
    std::vector<double> uhat(d);
    for (const auto& [s, t] : pairs) {
        double es2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) es2 += double(e(s, i)) * e(s, i);
        double un2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) un2 += double(u(j, t)) * u(j, t);
        if (es2 == 0.0 || un2 == 0.0) throw DataError("toy plant: zero embedding or unembedding vector");
        const double un = std::sqrt(un2);
        for (std::size_t j = 0; j < d; ++j) uhat[j] = u(j, t) / un;
        for (std::size_t i = 0; i < d; ++i) {
            const double a = gain * e(s, i) / es2;
            for (std::size_t j = 0; j < d; ++j) w[i * d + j] += a * uhat[j];
        }
    }
    return w;
}

void check_pairs(const std::vector<std::pair<TokenId, TokenId>>& pairs, std::size_t vocab_size) {
    std::set<TokenId> sources;
    for (const auto& [s, t] : pairs) {
        if (s >= vocab_size || t >= vocab_size) {
            throw UsageError("toy plant: token id out of range for vocabulary of " +
                             std::to_string(vocab_size));
        }
        if (!sources.insert(s).second) {
            throw DataError("toy plant: source " + std::to_string(s) + " appears twice");
        }
    }
}

// Brute-force argmax of e_s * W * U in double precision.
TokenId brute_argmax(const Matrix& e, const Matrix& w, const Matrix& u, TokenId s) {
    const std::size_t d = e.cols();
    std::vector<double> y(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) y[j] += double(e(s, i)) * w(i, j);
    TokenId best = 0;
    double best_v = -INFINITY;
    for (std::size_t t = 0; t < u.cols(); ++t) {
        double v = 0.0;
        for (std::size_t j = 0; j < d; ++j) v += y[j] * u(j, t);
        if (v > best_v) {
            best_v = v;
            best = static_cast<TokenId>(t);
        }
    }
    return best;
}

TokenId argmax_lower(std::span<const float> v) {
    TokenId best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = static_cast<TokenId>(i);
    return best;
}

Matrix head_outputs(const ToyModel& model, std::size_t head, const std::vector<PromptSpec>& prompts) {
    if (head >= model.heads.size()) throw UsageError("toy: head index out of range");
    const std::size_t d = model.d_model();
    Matrix x(prompts.size(), d);
    for (std::size_t r = 0; r < prompts.size(); ++r) {
        const auto& p = prompts[r];
        p.validate(model.vocab_size());
        auto row = x.row(r);
        for (std::size_t pos = 0; pos < p.tokens.size(); ++pos) {
            const auto e = model.embedding.row(p.tokens[pos]);
            for (std::size_t i = 0; i < d; ++i) row[i] = std::fma(p.attention[pos], e[i], row[i]);
        }
    }
    return matmul(x, PackedMatrix(model.heads[head]));
}

}  // namespace

bool ToyModel::is_planted(std::size_t head) const {
    return std::any_of(plants.begin(), plants.end(), [&](const PlantSpec& p) { return p.head == head; });
}

ToyModel build_toy(const ToyModelSpec& spec, const std::vector<PlantSpec>& plants) {
    validate_spec(spec);
    ToyModel m;
    m.spec = spec;
    std::tie(m.embedding, m.unembedding) = embeddings_for(spec);
    const std::size_t d = spec.d_model;

    std::vector<std::vector<double>> planted(spec.n_heads);
    for (const auto& p : plants) {
        if (p.head >= spec.n_heads) throw UsageError("toy plant: head " + std::to_string(p.head) + " out of range");
        if (!(p.gain >= 0.0f)) throw UsageError("toy plant: gain must be nonnegative");
        check_pairs(p.pairs, spec.vocab_size);
        auto w = plant_matrix(m.embedding, m.unembedding, p.pairs, p.gain);
        auto& acc = planted[p.head];
        if (acc.empty()) acc.assign(d * d, 0.0);
        for (std::size_t i = 0; i < w.size(); ++i) acc[i] += w[i];
    }

    std::mt19937_64 head_rng(spec.seed ^ kHeadStream);
    m.heads.resize(spec.n_heads);
    for (std::size_t h = 0; h < spec.n_heads; ++h) {
        if (!planted[h].empty()) {
            m.heads[h] = Matrix(d, d);
            for (std::size_t i = 0; i < d * d; ++i) m.heads[h].data()[i] = static_cast<float>(planted[h][i]);
        } else if (spec.unplanted == UnplantedHeads::random) {
            m.heads[h] = gaussian(d, d, spec.random_head_std, head_rng);
        } else {
            m.heads[h] = Matrix(d, d);
        }
    }
    m.plants = plants;

    for (const auto& p : plants) {
        if (p.gain == 0.0f) continue;
        for (const auto& [s, t] : p.pairs) {
            const TokenId got = brute_argmax(m.embedding, m.heads[p.head], m.unembedding, s);
            if (got != t) {
                throw DataError("toy plant: head " + std::to_string(p.head) + " maps " + std::to_string(s) +
                                " to " + std::to_string(got) + " instead of " + std::to_string(t) +
                                "; increase d_model or the gain");
            }
        }
    }
    return m;
}

ToyModel build_graded_family(const ToyModelSpec& spec,
                             const std::vector<std::pair<TokenId, TokenId>>& pairs,
                             const std::vector<float>& gains, float noise_std) {
    ToyModelSpec s = spec;
    s.n_heads = gains.size();
    validate_spec(s);
    check_pairs(pairs, s.vocab_size);
    ToyModel m;
    m.spec = s;
    std::tie(m.embedding, m.unembedding) = embeddings_for(s);
    const auto unit = plant_matrix(m.embedding, m.unembedding, pairs, 1.0);
    std::mt19937_64 rng(s.seed ^ kHeadStream);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (float g : gains) {
        Matrix w(s.d_model, s.d_model);
        for (std::size_t i = 0; i < unit.size(); ++i) {
            w.data()[i] = static_cast<float>(g * unit[i] + noise_std * dist(rng));
        }
        m.heads.push_back(std::move(w));
    }
    return m;
}

LoadedModel to_loaded_model(const ToyModel& model) {
    LoadedModel out;
    auto& g = out.geometry;
    g.n_layers = 1;
    g.n_heads = model.heads.size();
    g.n_kv_heads = model.heads.size();
    g.d_model = model.d_model();
    g.d_head = model.d_model();
    g.vocab_size = model.vocab_size();
    g.weights_tied = model.spec.tie_embeddings;
    auto& st = out.store;
    st.embedding = model.embedding;
    st.unembedding = model.unembedding;
    st.value.resize(1);
    st.output.resize(1);
    for (const auto& w : model.heads) {
        st.value[0].push_back(w);
        st.output[0].push_back(Matrix::identity(model.d_model()));
    }
    st.default_policy = EmbeddingPolicy::raw;
    st.adapter = "native";
    return out;
}

VocabSpace vocab_space(const ToyModel& model) { return VocabSpace(model.embedding, model.unembedding); }

HeadOperator head_operator(const ToyModel& model, std::size_t head) {
    if (head >= model.heads.size()) throw UsageError("toy: head index out of range");
    return HeadOperator(vocab_space(model), model.heads[head], HeadRef{0, head});
}

Vocabulary toy_vocabulary(std::size_t size) {
    std::vector<std::string> tokens;
    tokens.reserve(size);
    for (std::size_t i = 0; i < size; ++i) tokens.push_back("Ġt" + std::to_string(i));
    return Vocabulary(std::move(tokens));
}

void PromptSpec::validate(std::size_t vocab_size) const {
    if (tokens.empty()) throw UsageError("prompt: empty token sequence");
    if (attention.size() != tokens.size()) throw UsageError("prompt: attention length differs from token count");
    if (query_position >= tokens.size()) throw UsageError("prompt: query position out of range");
    double sum = 0.0;
    for (float a : attention) {
        if (!(a >= 0.0f)) throw UsageError("prompt: negative attention weight");
        sum += a;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw UsageError("prompt: attention weights do not sum to 1");
    for (TokenId t : tokens)
        if (t >= vocab_size) throw UsageError("prompt: token id out of range");
}

PromptSpec PromptTemplate::instantiate(TokenId source) const {
    PromptSpec p;
    p.tokens = fillers;
    p.tokens.push_back(source);
    p.query_position = p.tokens.size() - 1;
    p.attention.assign(p.tokens.size(), 0.0f);
    if (attention == AttentionPattern::one_hot || p.tokens.size() == 1) {
        p.attention.back() = 1.0f;
    } else {
        p.attention[p.tokens.size() - 2] = 0.5f;
        p.attention.back() = 0.5f;
    }
    return p;
}

std::vector<float> toy_head_output(const ToyModel& model, std::size_t head, const PromptSpec& prompt) {
    const Matrix y = head_outputs(model, head, {prompt});
    return {y.row(0).begin(), y.row(0).end()};
}

std::vector<float> project(const ToyModel& model, std::span<const float> y) {
    if (y.size() != model.d_model()) throw UsageError("toy: vector length differs from d_model");
    const Matrix row(1, y.size(), std::vector<float>(y.begin(), y.end()));
    const Matrix logits = matmul(row, PackedMatrix(model.unembedding));
    return {logits.row(0).begin(), logits.row(0).end()};
}

double dynamic_relation_score(const ToyModel& model, std::size_t head, const TokenizedRelation& rel,
                              std::size_t k, const PromptTemplate& tmpl) {
    if (rel.pairs.empty()) throw DataError("relation '" + rel.spec.name + "' has no pairs");
    if (k == 0 || k > model.vocab_size()) throw UsageError("k must be in [1, |V|]");
    std::vector<PromptSpec> prompts;
    for (const auto& [s, t] : rel.pairs) {
        if (t >= model.vocab_size()) throw UsageError("relation target out of range");
        prompts.push_back(tmpl.instantiate(s));
    }
    const Matrix y = head_outputs(model, head, prompts);
    const Matrix logits = matmul(y, PackedMatrix(model.unembedding));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < rel.pairs.size(); ++i) {
        if (in_topk(logits.row(i), rel.pairs[i].second, k, Direction::promote)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(rel.pairs.size());
}

double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw UsageError("pearson: inputs differ in length");
    if (x.size() < 3) throw UsageError("pearson: need at least 3 points");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw DataError("pearson: constant input");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

TokenId ablate_and_predict(const ToyModel& model, const PromptSpec& prompt,
                           const std::set<std::size_t>& ablated_heads) {
    prompt.validate(model.vocab_size());
    const auto e = model.embedding.row(prompt.tokens[prompt.query_position]);
    std::vector<float> residual(e.begin(), e.end());
    for (std::size_t h = 0; h < model.heads.size(); ++h) {
        if (ablated_heads.contains(h)) continue;
        const auto y = toy_head_output(model, h, prompt);
        for (std::size_t i = 0; i < residual.size(); ++i) residual[i] += y[i];
    }
    const auto logits = project(model, residual);
    return argmax_lower(logits);
}

std::vector<std::pair<TokenId, TokenId>> random_pairs(std::size_t vocab_size, std::size_t n,
                                                      std::mt19937_64& rng, std::set<TokenId>& exclude) {
    std::vector<TokenId> free;
    for (TokenId t = 0; t < vocab_size; ++t)
        if (!exclude.contains(t)) free.push_back(t);
    if (free.size() < n + 1) throw UsageError("toy: vocabulary too small for the requested pairs");
    const std::vector<TokenId> allowed = free;  // targets avoid the caller's exclusions too
    std::shuffle(free.begin(), free.end(), rng);
    std::uniform_int_distribution<std::size_t> pick(0, allowed.size() - 1);
    std::vector<std::pair<TokenId, TokenId>> out;
    for (std::size_t i = 0; i < n; ++i) {
        const TokenId s = free[i];
        TokenId t;
        do t = allowed[pick(rng)];
        while (t == s);
        exclude.insert(s);
        out.emplace_back(s, t);
    }
    return out;
}

TokenizedRelation as_relation(const std::string& name, const std::vector<std::pair<TokenId, TokenId>>& pairs,
                              RelationCategory category) {
    TokenizedRelation r;
    r.spec.name = name;
    r.spec.category = category;
    r.pairs = pairs;
    return r;
}

// Battery --------------------------------------------------------------------

BatteryConfig BatteryConfig::from_json(const json& j) {
    BatteryConfig c;
    try {
        c.d_model = j.value("d_model", c.d_model);
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.planted_heads = j.value("planted_heads", c.planted_heads);
        c.pairs_per_plant = j.value("pairs_per_plant", c.pairs_per_plant);
        c.plant_gain = j.value("plant_gain", c.plant_gain);
        c.seeds = j.value("seeds", c.seeds);
        c.tau = j.value("tau", c.tau);
        c.graded_heads = j.value("graded_heads", c.graded_heads);
        c.graded_max_gain = j.value("graded_max_gain", c.graded_max_gain);
        c.graded_noise_std = j.value("graded_noise_std", c.graded_noise_std);
        c.causal_seeds = j.value("causal_seeds", c.causal_seeds);
        c.duality_heads = j.value("duality_heads", c.duality_heads);
        c.baseline_seeds = j.value("baseline_seeds", c.baseline_seeds);
    } catch (const json::exception& e) {
        throw DataError(std::string("toy config: ") + e.what());
    }
    if (c.seeds.empty()) throw UsageError("toy config: seeds must not be empty");
    if (c.planted_heads > c.n_heads) throw UsageError("toy config: more planted heads than heads");
    if (c.graded_heads < 3) throw UsageError("toy config: graded_heads must be at least 3");
    return c;
}

json BatteryConfig::to_json() const {
    return {{"d_model", d_model},
            {"vocab_size", vocab_size},
            {"n_heads", n_heads},
            {"planted_heads", planted_heads},
            {"pairs_per_plant", pairs_per_plant},
            {"plant_gain", plant_gain},
            {"seeds", seeds},
            {"tau", tau},
            {"graded_heads", graded_heads},
            {"graded_max_gain", graded_max_gain},
            {"graded_noise_std", graded_noise_std},
            {"causal_seeds", causal_seeds},
            {"duality_heads", duality_heads},
            {"baseline_seeds", baseline_seeds}};
}

namespace {

ToyModelSpec spec_of(const BatteryConfig& c, std::uint64_t seed) {
    ToyModelSpec s;
    s.d_model = c.d_model;
    s.vocab_size = c.vocab_size;
    s.n_heads = c.n_heads;
    s.seed = seed;
    return s;
}

// Planted toy for one seed: `planted_heads` distinct heads, disjoint sources,
// the two highest ids held back as prompt fillers.
ToyModel planted_toy(const BatteryConfig& c, std::uint64_t seed, std::size_t n_planted) {
    std::mt19937_64 rng(seed * 7919 + 17);
    std::vector<std::size_t> heads(c.n_heads);
    std::iota(heads.begin(), heads.end(), 0);
    std::shuffle(heads.begin(), heads.end(), rng);
    std::set<TokenId> exclude = {static_cast<TokenId>(c.vocab_size - 1), static_cast<TokenId>(c.vocab_size - 2)};
    std::vector<PlantSpec> plants;
    for (std::size_t i = 0; i < n_planted; ++i) {
        plants.push_back({heads[i], random_pairs(c.vocab_size, c.pairs_per_plant, rng, exclude), c.plant_gain});
    }
    return build_toy(spec_of(c, seed), plants);
}

PromptTemplate default_template(const BatteryConfig& c, AttentionPattern a = AttentionPattern::one_hot) {
    return {{static_cast<TokenId>(c.vocab_size - 2), static_cast<TokenId>(c.vocab_size - 1)}, a};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

CheckResult check_plant_detection(const BatteryConfig& c) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r{"plant_detection", true, json::object()};
    double min_planted = 1.0, max_unplanted = 0.0;
    for (auto seed : c.seeds) {
        const ToyModel m = planted_toy(c, seed, c.planted_heads);
        const VocabSpace space = vocab_space(m);
        for (std::size_t h = 0; h < m.heads.size(); ++h) {
            const HeadOperator op(space, m.heads[h], HeadRef{0, h});
            for (std::size_t p = 0; p < m.plants.size(); ++p) {
                const auto rel = as_relation("plant" + std::to_string(p), m.plants[p].pairs);
                const double s = relation_score(op, rel, 1, Direction::promote, c.tau).score;
                if (m.plants[p].head == h) {
                    min_planted = std::min(min_planted, s);
                } else if (!m.is_planted(h)) {
                    max_unplanted = std::max(max_unplanted, s);
                }
            }
        }
    }
    r.passed = min_planted == 1.0 && max_unplanted < c.tau;
    r.metrics = {{"min_planted_score", min_planted},
                 {"max_unplanted_score", max_unplanted},
                 {"seconds", seconds_since(t0)}};
    return r;
}

CheckResult check_static_dynamic(const BatteryConfig& c) {
    CheckResult r{"static_dynamic_correlation", true, json::object()};
    double min_onehot = 1.0, min_uniform = 1.0;
    bool exact = true;
    json per_seed = json::array();
    for (auto seed : c.seeds) {
        std::mt19937_64 rng(seed * 104729 + 3);
        std::set<TokenId> exclude = {static_cast<TokenId>(c.vocab_size - 1),
                                     static_cast<TokenId>(c.vocab_size - 2)};
        const auto pairs = random_pairs(c.vocab_size, c.pairs_per_plant, rng, exclude);
        std::vector<float> gains;
        for (std::size_t i = 0; i < c.graded_heads; ++i) {
            gains.push_back(c.graded_max_gain * static_cast<float>(i) / static_cast<float>(c.graded_heads - 1));
        }
        const ToyModel m = build_graded_family(spec_of(c, seed), pairs, gains, c.graded_noise_std);
        const auto rel = as_relation("graded", pairs);
        const VocabSpace space = vocab_space(m);
        std::vector<double> stat, dyn1, dyn2;
        for (std::size_t h = 0; h < m.heads.size(); ++h) {
            const HeadOperator op(space, m.heads[h], HeadRef{0, h});
            stat.push_back(relation_score(op, rel, 1, Direction::promote, c.tau).score);
            dyn1.push_back(dynamic_relation_score(m, h, rel, 1, default_template(c)));
            dyn2.push_back(
                dynamic_relation_score(m, h, rel, 1, default_template(c, AttentionPattern::uniform_last_two)));
            exact = exact && stat.back() == dyn1.back();
        }
        double r1 = -1.0, r2 = -1.0;
        try {
            r1 = pearson(stat, dyn1);
            r2 = pearson(stat, dyn2);
        } catch (const DataError&) {
            exact = false;
        }
        min_onehot = std::min(min_onehot, r1);
        min_uniform = std::min(min_uniform, r2);
        per_seed.push_back({{"seed", seed}, {"pearson_one_hot", r1}, {"pearson_uniform", r2}});
    }
    r.passed = exact && min_onehot >= 0.9 && min_uniform >= 0.7;
    r.metrics = {{"static_equals_dynamic_one_hot", exact},
                 {"min_pearson_one_hot", min_onehot},
                 {"min_pearson_uniform", min_uniform},
                 {"per_seed", per_seed}};
    return r;
}

CheckResult check_causal_ablation(const BatteryConfig& c) {
    CheckResult r{"causal_ablation", true, json::object()};
    double acc_full = 0.0, acc_planted = 0.0, acc_random = 0.0;
    for (std::size_t seed = 0; seed < c.causal_seeds; ++seed) {
        const ToyModel m = planted_toy(c, seed, 1);
        const auto& plant = m.plants.front();
        std::vector<std::size_t> others;
        for (std::size_t h = 0; h < m.heads.size(); ++h)
            if (h != plant.head) others.push_back(h);
        std::mt19937_64 rng(seed + 1000);
        std::shuffle(others.begin(), others.end(), rng);
        const std::set<std::size_t> ablate_planted = {plant.head};
        const std::set<std::size_t> ablate_random = {others.front()};
        const auto tmpl = default_template(c);
        std::size_t full = 0, planted = 0, random = 0;
        for (const auto& [s, t] : plant.pairs) {
            const PromptSpec p = tmpl.instantiate(s);
            full += ablate_and_predict(m, p, {}) == t;
            planted += ablate_and_predict(m, p, ablate_planted) == t;
            random += ablate_and_predict(m, p, ablate_random) == t;
        }
        const double n = static_cast<double>(plant.pairs.size());
        acc_full += full / n;
        acc_planted += planted / n;
        acc_random += random / n;
    }
    const double seeds = static_cast<double>(c.causal_seeds);
    acc_full /= seeds;
    acc_planted /= seeds;
    acc_random /= seeds;
    r.passed = acc_full == 1.0 && acc_planted <= 0.1 && acc_random >= 0.9;
    r.metrics = {{"accuracy_unablated", acc_full},
                 {"accuracy_planted_ablated", acc_planted},
                 {"accuracy_random_ablated", acc_random}};
    return r;
}

CheckResult check_suppression_duality(const BatteryConfig& c) {
    CheckResult r{"suppression_duality", true, json::object()};
    std::size_t mismatches = 0;
    ToyModelSpec spec = spec_of(c, c.seeds.front());
    spec.n_heads = 1;
    const ToyModel base = build_toy(spec, {});
    const VocabSpace space = vocab_space(base);
    std::mt19937_64 rng(c.seeds.front() + 99);
    std::set<TokenId> exclude;
    const auto rel = as_relation("random", random_pairs(c.vocab_size, c.pairs_per_plant, rng, exclude));
    for (std::size_t i = 0; i < c.duality_heads; ++i) {
        const Matrix w = gaussian(c.d_model, c.d_model, base.spec.random_head_std, rng);
        const HeadOperator pos(space, w);
        const HeadOperator neg(space, w.scaled(-1.0f));
        for (std::size_t k : {std::size_t{1}, std::size_t{10}}) {
            const double a = relation_score(pos, rel, k, Direction::suppress, c.tau).score;
            const double b = relation_score(neg, rel, k, Direction::promote, c.tau).score;
            mismatches += a != b;
        }
    }
    r.passed = mismatches == 0;
    r.metrics = {{"heads", c.duality_heads}, {"mismatches", mismatches}};
    return r;
}

CheckResult check_random_baseline(const BatteryConfig& c) {
    CheckResult r{"random_baseline_separation", true, json::object()};
    constexpr std::size_t kRandomHeads = 100;
    std::size_t random_classified = 0, random_total = 0, planted_classified = 0, planted_total = 0;
    for (std::size_t seed = 0; seed < c.baseline_seeds; ++seed) {
        const ToyModel m = planted_toy(c, seed, c.planted_heads);
        const VocabSpace space = vocab_space(m);
        std::vector<TokenizedRelation> rels;
        for (std::size_t p = 0; p < m.plants.size(); ++p) {
            rels.push_back(as_relation("plant" + std::to_string(p), m.plants[p].pairs));
            const HeadOperator op(space, m.heads[m.plants[p].head]);
            planted_classified += relation_score(op, rels.back(), 1, Direction::promote, c.tau).classified;
            ++planted_total;
        }
        for (const auto& w : random_baseline_heads(m.heads, kRandomHeads, seed)) {
            const HeadOperator op(space, w);
            bool any = false;
            for (const auto& rel : rels) any = any || relation_score(op, rel, 1, Direction::promote, c.tau).classified;
            random_classified += any;
            ++random_total;
        }
    }
    const double frac = static_cast<double>(random_classified) / static_cast<double>(random_total);
    r.passed = frac <= 0.01 && planted_classified == planted_total;
    r.metrics = {{"random_heads", random_total},
                 {"random_classified_fraction", frac},
                 {"planted_classified", planted_classified},
                 {"planted_total", planted_total}};
    return r;
}

std::vector<CheckResult> run_battery(const BatteryConfig& c) {
    return {check_plant_detection(c), check_static_dynamic(c), check_causal_ablation(c),
            check_suppression_duality(c), check_random_baseline(c)};
}

json battery_report(const BatteryConfig& c, const std::vector<CheckResult>& results) {
    json checks = json::array();
    bool all = true;
    for (const auto& r : results) {
        checks.push_back({{"name", r.name}, {"passed", r.passed}, {"metrics", r.metrics}});
        all = all && r.passed;
    }
    return {{"config", c.to_json()}, {"checks", checks}, {"passed", all}};
}

}  // namespace maps::toy
