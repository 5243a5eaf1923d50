#include "maps/model_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>

#include "maps/errors.hpp"
#include "maps/safetensors.hpp"

namespace maps {

namespace fs = std::filesystem;
using nlohmann::json;
using safetensors::Archive;

std::string to_string(NormKind k) { return k == NormKind::layernorm ? "layernorm" : "rmsnorm"; }
std::string to_string(MlpKind k) { return k == MlpKind::standard ? "standard" : "gated"; }
std::string to_string(Activation a) {
    switch (a) {
        case Activation::gelu_tanh: return "gelu-tanh";
        case Activation::gelu_erf: return "gelu-erf";
        case Activation::silu: return "silu";
    }
    return "?";
}
std::string to_string(EmbeddingPolicy p) { return p == EmbeddingPolicy::raw ? "raw" : "first-mlp"; }
std::string to_string(MlpForm f) { return f == MlpForm::residual ? "residual" : "pure"; }

NormKind parse_norm_kind(const std::string& s) {
    if (s == "layernorm") return NormKind::layernorm;
    if (s == "rmsnorm") return NormKind::rmsnorm;
    throw UsageError("unknown norm kind '" + s + "'");
}
MlpKind parse_mlp_kind(const std::string& s) {
    if (s == "standard") return MlpKind::standard;
    if (s == "gated") return MlpKind::gated;
    throw UsageError("unknown mlp kind '" + s + "'");
}
Activation parse_activation(const std::string& s) {
    if (s == "gelu-tanh" || s == "gelu_new" || s == "gelu_pytorch_tanh") return Activation::gelu_tanh;
    if (s == "gelu-erf" || s == "gelu") return Activation::gelu_erf;
    if (s == "silu" || s == "swish") return Activation::silu;
    throw UsageError("unknown activation '" + s + "'");
}
EmbeddingPolicy parse_embedding_policy(const std::string& s) {
    if (s == "raw") return EmbeddingPolicy::raw;
    if (s == "first-mlp") return EmbeddingPolicy::first_mlp;
    throw UsageError("unknown embedding policy '" + s + "'");
}
MlpForm parse_mlp_form(const std::string& s) {
    if (s == "residual") return MlpForm::residual;
    if (s == "pure") return MlpForm::pure;
    throw UsageError("unknown mlp form '" + s + "'");
}

void ModelGeometry::validate() const {
    if (n_heads == 0 || n_kv_heads == 0) throw DataError("geometry: head counts must be positive");
    if (n_heads % n_kv_heads != 0) {
        throw DataError("geometry: n_kv_heads (" + std::to_string(n_kv_heads) +
                        ") does not divide n_heads (" + std::to_string(n_heads) + ")");
    }
    if (d_model == 0 || d_head == 0 || vocab_size == 0) {
        throw DataError("geometry: dimensions must be positive");
    }
}

std::string HeadRef::label() const { return std::to_string(layer) + "." + std::to_string(head); }

HeadRef HeadRef::parse(const std::string& s) {
    const auto dot = s.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == s.size()) {
        throw UsageError("head reference '" + s + "' is not of the form layer.head");
    }
    try {
        std::size_t used = 0;
        HeadRef h;
        h.layer = std::stoul(s.substr(0, dot), &used);
        if (used != dot) throw std::invalid_argument("");
        const std::string rest = s.substr(dot + 1);
        h.head = std::stoul(rest, &used);
        if (used != rest.size()) throw std::invalid_argument("");
        return h;
    } catch (const std::logic_error&) {
        throw UsageError("head reference '" + s + "' is not of the form layer.head");
    }
}

std::size_t kv_group(const ModelGeometry& geometry, std::size_t head) {
    return head / (geometry.n_heads / geometry.n_kv_heads);
}

Matrix head_vo(const WeightStore& store, const ModelGeometry& geometry, HeadRef head) {
    if (head.layer >= geometry.n_layers || head.head >= geometry.n_heads) {
        throw UsageError("head " + head.label() + " is outside the model geometry");
    }
    const Matrix& wv = store.value.at(head.layer).at(kv_group(geometry, head.head));
    const Matrix& wo = store.output.at(head.layer).at(head.head);
    return matmul(wv, wo);
}

float activate(Activation a, float x) {
    switch (a) {
        case Activation::gelu_tanh: {
            constexpr float k = 0.7978845608028654f;  // sqrt(2 / pi)
            return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
        }
        case Activation::gelu_erf:
            return 0.5f * x * (1.0f + std::erf(x * 0.7071067811865476f));
        case Activation::silu:
            return x / (1.0f + std::exp(-x));
    }
    return x;
}

void apply_norm(const NormParams& p, NormKind kind, std::span<float> row) {
    const std::size_t d = row.size();
    double mean = 0.0;
    if (kind == NormKind::layernorm) {
        for (float v : row) mean += v;
        mean /= static_cast<double>(d);
    }
    double var = 0.0;
    for (float v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + p.eps);
    for (std::size_t i = 0; i < d; ++i) {
        float v = static_cast<float>((row[i] - mean) * inv);
        if (!p.scale.empty()) v *= p.scale[i];
        if (!p.bias.empty()) v += p.bias[i];
        row[i] = v;
    }
}

Matrix effective_embeddings(const WeightStore& store, const ModelGeometry& geometry,
                            std::size_t layer, EmbeddingPolicy policy, MlpForm form,
                            unsigned workers) {
    if (policy == EmbeddingPolicy::raw || layer == 0) return store.embedding;
    if (!store.norm0 || !store.mlp0) {
        throw DataError("first-mlp policy requires the first MLP and the norm preceding it");
    }
    const MlpParams& mlp = *store.mlp0;
    const bool gated = geometry.mlp_kind == MlpKind::gated;
    if (gated && mlp.fc_gate.empty()) throw DataError("gated MLP is missing its gate projection");
    const PackedMatrix fc_in(mlp.fc_in);
    const PackedMatrix fc_out(mlp.fc_out);
    const PackedMatrix fc_gate = gated ? PackedMatrix(mlp.fc_gate) : PackedMatrix();

    const Matrix& e = store.embedding;
    const std::size_t d = e.cols();
    const std::size_t ff = mlp.fc_in.cols();
    Matrix out(e.rows(), d);
    constexpr std::size_t kBlock = 256;
    const std::size_t n_blocks = (e.rows() + kBlock - 1) / kBlock;
    parallel_for(n_blocks, workers, [&](std::size_t b0, std::size_t b1) {
        std::vector<float> normed, hidden, gate;
        for (std::size_t b = b0; b < b1; ++b) {
            const std::size_t r0 = b * kBlock;
            const std::size_t rows = std::min(kBlock, e.rows() - r0);
            normed.assign(e.data() + r0 * d, e.data() + (r0 + rows) * d);
            for (std::size_t r = 0; r < rows; ++r) {
                apply_norm(*store.norm0, geometry.norm_kind, {normed.data() + r * d, d});
            }
            hidden.assign(rows * ff, 0.0f);
            gemm_rows(normed.data(), d, rows, fc_in, 0, fc_in.panels(), hidden.data(), ff);
            if (gated) {
                gate.assign(rows * ff, 0.0f);
                gemm_rows(normed.data(), d, rows, fc_gate, 0, fc_gate.panels(), gate.data(), ff);
            }
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < ff; ++j) {
                    float& h = hidden[r * ff + j];
                    if (!mlp.fc_in_bias.empty()) h += mlp.fc_in_bias[j];
                    h = gated ? activate(geometry.activation, gate[r * ff + j]) * h
                              : activate(geometry.activation, h);
                }
            }
            float* dst = out.data() + r0 * d;
            gemm_rows(hidden.data(), ff, rows, fc_out, 0, fc_out.panels(), dst, d);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < d; ++j) {
                    float v = dst[r * d + j];
                    if (!mlp.fc_out_bias.empty()) v += mlp.fc_out_bias[j];
                    if (form == MlpForm::residual) v = e(r0 + r, j) + v;
                    dst[r * d + j] = v;
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Adapters

namespace {

struct Settings {
    std::optional<std::size_t> n_heads;
    std::optional<std::size_t> n_kv_heads;
    std::optional<std::size_t> n_layers;
    std::optional<std::size_t> d_head;
    std::optional<float> eps;
    std::optional<bool> tied;
    std::optional<Activation> activation;
    std::optional<NormKind> norm_kind;
    std::optional<MlpKind> mlp_kind;
    std::optional<EmbeddingPolicy> default_policy;

    void merge(const json& j) {
        auto get_size = [&](std::initializer_list<const char*> keys, std::optional<std::size_t>& dst) {
            for (const char* k : keys)
                if (j.contains(k) && j[k].is_number_integer()) dst = j[k].get<std::size_t>();
        };
        get_size({"n_head", "num_attention_heads", "n_heads"}, n_heads);
        get_size({"num_key_value_heads", "n_kv_heads"}, n_kv_heads);
        get_size({"n_layer", "num_hidden_layers", "n_layers"}, n_layers);
        get_size({"head_dim", "d_head"}, d_head);
        for (const char* k : {"layer_norm_epsilon", "layer_norm_eps", "rms_norm_eps", "norm_eps"})
            if (j.contains(k) && j[k].is_number()) eps = j[k].get<float>();
        for (const char* k : {"tie_word_embeddings", "weights_tied"})
            if (j.contains(k) && j[k].is_boolean()) tied = j[k].get<bool>();
        for (const char* k : {"activation_function", "hidden_act", "activation"})
            if (j.contains(k) && j[k].is_string()) activation = parse_activation(j[k]);
        if (j.contains("norm_kind")) norm_kind = parse_norm_kind(j["norm_kind"]);
        if (j.contains("mlp_kind")) mlp_kind = parse_mlp_kind(j["mlp_kind"]);
        if (j.contains("default_policy")) default_policy = parse_embedding_policy(j["default_policy"]);
    }

    void merge_metadata(const std::map<std::string, std::string>& meta) {
        json j = json::object();
        for (const auto& [k, v] : meta) {
            if (k == "n_heads" || k == "n_kv_heads" || k == "n_layers" || k == "d_head") {
                j[k] = std::stoul(v);
            } else if (k == "norm_eps") {
                j[k] = std::stof(v);
            } else if (k == "weights_tied") {
                j[k] = (v == "true");
            } else {
                j[k] = v;
            }
        }
        merge(j);
    }
};

void require_finite(const std::string& name, std::span<const float> values) {
    for (float v : values) {
        if (!std::isfinite(v)) throw DataError("tensor '" + name + "' contains NaN or Inf");
    }
}

Matrix read_checked(const Archive& a, const std::string& name) {
    if (!a.contains(name)) throw DataError("missing tensor '" + name + "'");
    Matrix m = a.read_matrix(name);
    require_finite(name, m.values());
    return m;
}

std::vector<float> read_vector(const Archive& a, const std::string& name) {
    if (!a.contains(name)) throw DataError("missing tensor '" + name + "'");
    auto v = a.read(name);
    require_finite(name, v);
    return v;
}

std::vector<float> read_optional_vector(const Archive& a, const std::string& name) {
    return a.contains(name) ? read_vector(a, name) : std::vector<float>{};
}

void expect_shape(const std::string& name, const Matrix& m, std::size_t rows, std::size_t cols) {
    if (m.rows() != rows || m.cols() != cols) {
        throw DataError("tensor '" + name + "' has shape [" + std::to_string(m.rows()) + ", " +
                        std::to_string(m.cols()) + "], expected [" + std::to_string(rows) + ", " +
                        std::to_string(cols) + "]");
    }
}

std::size_t count_layers(const Archive& a, const std::function<std::string(std::size_t)>& name) {
    std::size_t n = 0;
    while (a.contains(name(n))) ++n;
    return n;
}

// Columns [c0, c0 + width) of m.
Matrix slice_cols(const Matrix& m, std::size_t c0, std::size_t width) {
    Matrix out(m.rows(), width);
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < width; ++c) out(r, c) = m(r, c0 + c);
    return out;
}

// Rows [r0, r0 + height) of m.
Matrix slice_rows(const Matrix& m, std::size_t r0, std::size_t height) {
    Matrix out(height, m.cols());
    std::copy(m.data() + r0 * m.cols(), m.data() + (r0 + height) * m.cols(), out.data());
    return out;
}

NormParams read_norm(const Archive& a, const std::string& scale, const std::string& bias, float eps) {
    NormParams p;
    p.scale = read_vector(a, scale);
    if (!bias.empty()) p.bias = read_optional_vector(a, bias);
    p.eps = eps;
    return p;
}

std::size_t require_heads(const Settings& s, const std::string& adapter) {
    if (!s.n_heads) {
        throw DataError(adapter + " adapter: head count unknown; supply n_heads via a geometry "
                                  "config or a config.json next to the weights");
    }
    return *s.n_heads;
}

void finish(LoadedModel& m, const Settings& s) {
    ModelGeometry& g = m.geometry;
    if (s.norm_kind) g.norm_kind = *s.norm_kind;
    if (s.mlp_kind) g.mlp_kind = *s.mlp_kind;
    if (s.activation) g.activation = *s.activation;
    if (s.default_policy) m.store.default_policy = *s.default_policy;
    if (s.n_layers && *s.n_layers != g.n_layers) {
        throw DataError("geometry: config says " + std::to_string(*s.n_layers) +
                        " layers but the tensors define " + std::to_string(g.n_layers));
    }
    g.validate();
    if (m.store.embedding.rows() != g.vocab_size || m.store.unembedding.cols() != g.vocab_size) {
        throw DataError("geometry: embedding rows and unembedding columns disagree on vocab size");
    }
}

void set_unembedding_tied(LoadedModel& m) {
    m.store.unembedding = m.store.embedding.transposed();
    m.geometry.weights_tied = true;
}

// GPT-2: Conv1D weights stored (in, out); fused c_attn columns are [Q | K | V].
LoadedModel load_gpt2(const Archive& a, const Settings& s) {
    const std::string pre = a.contains("transformer.wte.weight") ? "transformer." : "";
    LoadedModel m;
    m.store.adapter = "gpt2";
    m.store.embedding = read_checked(a, pre + "wte.weight");
    auto& g = m.geometry;
    g.vocab_size = m.store.embedding.rows();
    g.d_model = m.store.embedding.cols();
    g.n_layers = count_layers(a, [&](std::size_t l) {
        return pre + "h." + std::to_string(l) + ".attn.c_attn.weight";
    });
    g.n_heads = require_heads(s, "gpt2");
    g.n_kv_heads = g.n_heads;
    g.d_head = g.d_model / g.n_heads;
    g.norm_kind = NormKind::layernorm;
    g.mlp_kind = MlpKind::standard;
    g.activation = Activation::gelu_tanh;
    const float eps = s.eps.value_or(1e-5f);
    if (a.contains("lm_head.weight") && !s.tied.value_or(false)) {
        m.store.unembedding = read_checked(a, "lm_head.weight").transposed();
    } else {
        set_unembedding_tied(m);
    }
    const std::size_t d = g.d_model;
    for (std::size_t l = 0; l < g.n_layers; ++l) {
        const std::string p = pre + "h." + std::to_string(l) + ".attn.";
        const Matrix qkv = read_checked(a, p + "c_attn.weight");
        expect_shape(p + "c_attn.weight", qkv, d, 3 * d);
        const Matrix proj = read_checked(a, p + "c_proj.weight");
        expect_shape(p + "c_proj.weight", proj, d, d);
        m.store.value.emplace_back();
        m.store.output.emplace_back();
        for (std::size_t h = 0; h < g.n_heads; ++h) {
            m.store.value[l].push_back(slice_cols(qkv, 2 * d + h * g.d_head, g.d_head));
            m.store.output[l].push_back(slice_rows(proj, h * g.d_head, g.d_head));
        }
    }
    const std::string l0 = pre + "h.0.";
    if (a.contains(l0 + "mlp.c_fc.weight")) {
        m.store.norm0 = read_norm(a, l0 + "ln_2.weight", l0 + "ln_2.bias", eps);
        MlpParams mlp;
        mlp.fc_in = read_checked(a, l0 + "mlp.c_fc.weight");
        mlp.fc_in_bias = read_optional_vector(a, l0 + "mlp.c_fc.bias");
        mlp.fc_out = read_checked(a, l0 + "mlp.c_proj.weight");
        mlp.fc_out_bias = read_optional_vector(a, l0 + "mlp.c_proj.bias");
        expect_shape(l0 + "mlp.c_fc.weight", mlp.fc_in, d, mlp.fc_in.cols());
        expect_shape(l0 + "mlp.c_proj.weight", mlp.fc_out, mlp.fc_in.cols(), d);
        m.store.mlp0 = std::move(mlp);
    }
    if (a.contains(pre + "ln_f.weight")) {
        m.store.final_norm = read_norm(a, pre + "ln_f.weight", pre + "ln_f.bias", eps);
    }
    finish(m, s);
    return m;
}

// GPT-NeoX / Pythia: Linear weights stored (out, in); query_key_value rows
// are interleaved per head as [head][q|k|v][d_head].
LoadedModel load_neox(const Archive& a, const Settings& s) {
    LoadedModel m;
    m.store.adapter = "neox";
    m.store.embedding = read_checked(a, "gpt_neox.embed_in.weight");
    auto& g = m.geometry;
    g.vocab_size = m.store.embedding.rows();
    g.d_model = m.store.embedding.cols();
    g.n_layers = count_layers(a, [](std::size_t l) {
        return "gpt_neox.layers." + std::to_string(l) + ".attention.query_key_value.weight";
    });
    g.n_heads = require_heads(s, "neox");
    g.n_kv_heads = g.n_heads;
    g.d_head = g.d_model / g.n_heads;
    g.norm_kind = NormKind::layernorm;
    g.mlp_kind = MlpKind::standard;
    g.activation = Activation::gelu_erf;
    const float eps = s.eps.value_or(1e-5f);
    if (s.tied.value_or(false)) {
        set_unembedding_tied(m);
    } else {
        const Matrix out = read_checked(a, "embed_out.weight");
        expect_shape("embed_out.weight", out, g.vocab_size, g.d_model);
        m.store.unembedding = out.transposed();
    }
    const std::size_t d = g.d_model;
    const std::size_t dh = g.d_head;
    for (std::size_t l = 0; l < g.n_layers; ++l) {
        const std::string p = "gpt_neox.layers." + std::to_string(l) + ".attention.";
        const Matrix qkv = read_checked(a, p + "query_key_value.weight");
        expect_shape(p + "query_key_value.weight", qkv, 3 * d, d);
        const Matrix dense = read_checked(a, p + "dense.weight");
        expect_shape(p + "dense.weight", dense, d, d);
        m.store.value.emplace_back();
        m.store.output.emplace_back();
        for (std::size_t h = 0; h < g.n_heads; ++h) {
            Matrix wv(d, dh);
            const std::size_t base = h * 3 * dh + 2 * dh;
            for (std::size_t i = 0; i < dh; ++i)
                for (std::size_t r = 0; r < d; ++r) wv(r, i) = qkv(base + i, r);
            Matrix wo(dh, d);
            for (std::size_t i = 0; i < dh; ++i)
                for (std::size_t c = 0; c < d; ++c) wo(i, c) = dense(c, h * dh + i);
            m.store.value[l].push_back(std::move(wv));
            m.store.output[l].push_back(std::move(wo));
        }
    }
    // With the parallel residual the first MLP reads post_attention_layernorm(x).
    const std::string l0 = "gpt_neox.layers.0.";
    if (a.contains(l0 + "mlp.dense_h_to_4h.weight")) {
        m.store.norm0 = read_norm(a, l0 + "post_attention_layernorm.weight",
                                  l0 + "post_attention_layernorm.bias", eps);
        MlpParams mlp;
        mlp.fc_in = read_checked(a, l0 + "mlp.dense_h_to_4h.weight").transposed();
        mlp.fc_in_bias = read_optional_vector(a, l0 + "mlp.dense_h_to_4h.bias");
        mlp.fc_out = read_checked(a, l0 + "mlp.dense_4h_to_h.weight").transposed();
        mlp.fc_out_bias = read_optional_vector(a, l0 + "mlp.dense_4h_to_h.bias");
        expect_shape(l0 + "mlp.dense_h_to_4h.weight", mlp.fc_in, d, mlp.fc_in.cols());
        expect_shape(l0 + "mlp.dense_4h_to_h.weight", mlp.fc_out, mlp.fc_in.cols(), d);
        m.store.mlp0 = std::move(mlp);
    }
    if (a.contains("gpt_neox.final_layer_norm.weight")) {
        m.store.final_norm = read_norm(a, "gpt_neox.final_layer_norm.weight",
                                       "gpt_neox.final_layer_norm.bias", eps);
    }
    finish(m, s);
    return m;
}

// Llama family: separate projections stored (out, in), grouped K/V heads.
LoadedModel load_llama(const Archive& a, const Settings& s) {
    LoadedModel m;
    m.store.adapter = "llama";
    m.store.embedding = read_checked(a, "model.embed_tokens.weight");
    auto& g = m.geometry;
    g.vocab_size = m.store.embedding.rows();
    g.d_model = m.store.embedding.cols();
    g.n_layers = count_layers(a, [](std::size_t l) {
        return "model.layers." + std::to_string(l) + ".self_attn.v_proj.weight";
    });
    g.n_heads = require_heads(s, "llama");
    g.n_kv_heads = s.n_kv_heads.value_or(g.n_heads);
    g.norm_kind = NormKind::rmsnorm;
    g.mlp_kind = MlpKind::gated;
    g.activation = Activation::silu;
    const float eps = s.eps.value_or(1e-5f);
    if (g.n_layers == 0) throw DataError("missing tensor 'model.layers.0.self_attn.v_proj.weight'");
    {
        const auto& o = a.info("model.layers.0.self_attn.o_proj.weight");
        if (o.shape.size() != 2 || o.shape[1] % g.n_heads != 0) {
            throw DataError("tensor 'model.layers.0.self_attn.o_proj.weight' width is not a "
                            "multiple of n_heads");
        }
        g.d_head = o.shape[1] / g.n_heads;
    }
    if (a.contains("lm_head.weight") && !s.tied.value_or(false)) {
        const Matrix out = read_checked(a, "lm_head.weight");
        expect_shape("lm_head.weight", out, g.vocab_size, g.d_model);
        m.store.unembedding = out.transposed();
    } else {
        set_unembedding_tied(m);
    }
    const std::size_t d = g.d_model;
    const std::size_t dh = g.d_head;
    for (std::size_t l = 0; l < g.n_layers; ++l) {
        const std::string p = "model.layers." + std::to_string(l) + ".self_attn.";
        const Matrix v = read_checked(a, p + "v_proj.weight");
        expect_shape(p + "v_proj.weight", v, g.n_kv_heads * dh, d);
        const Matrix o = read_checked(a, p + "o_proj.weight");
        expect_shape(p + "o_proj.weight", o, d, g.n_heads * dh);
        m.store.value.emplace_back();
        m.store.output.emplace_back();
        for (std::size_t kv = 0; kv < g.n_kv_heads; ++kv) {
            Matrix wv(d, dh);
            for (std::size_t i = 0; i < dh; ++i)
                for (std::size_t r = 0; r < d; ++r) wv(r, i) = v(kv * dh + i, r);
            m.store.value[l].push_back(std::move(wv));
        }
        for (std::size_t h = 0; h < g.n_heads; ++h) {
            Matrix wo(dh, d);
            for (std::size_t i = 0; i < dh; ++i)
                for (std::size_t c = 0; c < d; ++c) wo(i, c) = o(c, h * dh + i);
            m.store.output[l].push_back(std::move(wo));
        }
    }
    const std::string l0 = "model.layers.0.";
    if (a.contains(l0 + "mlp.gate_proj.weight")) {
        m.store.norm0 = read_norm(a, l0 + "post_attention_layernorm.weight", "", eps);
        MlpParams mlp;
        mlp.fc_gate = read_checked(a, l0 + "mlp.gate_proj.weight").transposed();
        mlp.fc_in = read_checked(a, l0 + "mlp.up_proj.weight").transposed();
        mlp.fc_out = read_checked(a, l0 + "mlp.down_proj.weight").transposed();
        m.store.mlp0 = std::move(mlp);
    }
    if (a.contains("model.norm.weight")) {
        m.store.final_norm = read_norm(a, "model.norm.weight", "", eps);
    }
    // 80-layer (70B-class) checkpoints read better without the first MLP.
    m.store.default_policy = g.n_layers >= 80 ? EmbeddingPolicy::raw : EmbeddingPolicy::first_mlp;
    finish(m, s);
    return m;
}

// Native layout: everything stored in (in, out) orientation.
//   embedding [V, d], unembedding [d, V] (absent when tied)
//   layers.L.value [n_kv, d, d_head], layers.L.output [n_heads, d_head, d]
//   mlp0.norm.scale/bias, mlp0.fc_in [d, ff], mlp0.fc_in_bias, mlp0.fc_gate,
//   mlp0.fc_out [ff, d], mlp0.fc_out_bias, final_norm.scale/bias
LoadedModel load_native(const Archive& a, const Settings& s) {
    LoadedModel m;
    m.store.adapter = "native";
    m.store.embedding = read_checked(a, "embedding");
    auto& g = m.geometry;
    g.vocab_size = m.store.embedding.rows();
    g.d_model = m.store.embedding.cols();
    g.n_layers = count_layers(a, [](std::size_t l) {
        return "layers." + std::to_string(l) + ".value";
    });
    if (g.n_layers == 0) throw DataError("missing tensor 'layers.0.value'");
    const auto& v0 = a.info("layers.0.value");
    const auto& o0 = a.info("layers.0.output");
    if (v0.shape.size() != 3 || o0.shape.size() != 3) {
        throw DataError("tensor 'layers.0.value' / 'layers.0.output' must be 3-D");
    }
    g.n_kv_heads = v0.shape[0];
    g.d_head = v0.shape[2];
    g.n_heads = o0.shape[0];
    if (s.n_heads && *s.n_heads != g.n_heads) {
        throw DataError("geometry: config n_heads disagrees with 'layers.0.output'");
    }
    const float eps = s.eps.value_or(1e-5f);
    if (s.tied.value_or(!a.contains("unembedding"))) {
        set_unembedding_tied(m);
    } else {
        m.store.unembedding = read_checked(a, "unembedding");
        expect_shape("unembedding", m.store.unembedding, g.d_model, g.vocab_size);
    }
    const std::size_t d = g.d_model;
    const std::size_t dh = g.d_head;
    for (std::size_t l = 0; l < g.n_layers; ++l) {
        const std::string vn = "layers." + std::to_string(l) + ".value";
        const std::string on = "layers." + std::to_string(l) + ".output";
        const auto& vi = a.info(vn);
        if (vi.shape != std::vector<std::size_t>{g.n_kv_heads, d, dh}) {
            throw DataError("tensor '" + vn + "' is mis-shaped");
        }
        if (!a.contains(on) || a.info(on).shape != std::vector<std::size_t>{g.n_heads, dh, d}) {
            throw DataError("tensor '" + on + "' is missing or mis-shaped");
        }
        auto vv = read_vector(a, vn);
        auto ov = read_vector(a, on);
        m.store.value.emplace_back();
        m.store.output.emplace_back();
        for (std::size_t kv = 0; kv < g.n_kv_heads; ++kv) {
            m.store.value[l].emplace_back(
                d, dh, std::vector<float>(vv.begin() + kv * d * dh, vv.begin() + (kv + 1) * d * dh));
        }
        for (std::size_t h = 0; h < g.n_heads; ++h) {
            m.store.output[l].emplace_back(
                dh, d, std::vector<float>(ov.begin() + h * d * dh, ov.begin() + (h + 1) * d * dh));
        }
    }
    if (a.contains("mlp0.fc_in")) {
        m.store.norm0 = read_norm(a, "mlp0.norm.scale", "mlp0.norm.bias", eps);
        MlpParams mlp;
        mlp.fc_in = read_checked(a, "mlp0.fc_in");
        mlp.fc_in_bias = read_optional_vector(a, "mlp0.fc_in_bias");
        if (a.contains("mlp0.fc_gate")) mlp.fc_gate = read_checked(a, "mlp0.fc_gate");
        mlp.fc_out = read_checked(a, "mlp0.fc_out");
        mlp.fc_out_bias = read_optional_vector(a, "mlp0.fc_out_bias");
        expect_shape("mlp0.fc_in", mlp.fc_in, d, mlp.fc_in.cols());
        expect_shape("mlp0.fc_out", mlp.fc_out, mlp.fc_in.cols(), d);
        if (!mlp.fc_gate.empty()) {
            expect_shape("mlp0.fc_gate", mlp.fc_gate, d, mlp.fc_in.cols());
            g.mlp_kind = MlpKind::gated;
        }
        m.store.mlp0 = std::move(mlp);
    }
    if (a.contains("final_norm.scale")) {
        m.store.final_norm = read_norm(a, "final_norm.scale", "final_norm.bias", eps);
    }
    if (!s.default_policy) m.store.default_policy = EmbeddingPolicy::raw;
    finish(m, s);
    return m;
}

using Loader = LoadedModel (*)(const Archive&, const Settings&);

const std::map<std::string, Loader>& registry() {
    static const std::map<std::string, Loader> r = {
        {"gpt2", &load_gpt2}, {"neox", &load_neox}, {"llama", &load_llama}, {"native", &load_native}};
    return r;
}

std::string detect_adapter(const Archive& a) {
    if (a.contains("wte.weight") || a.contains("transformer.wte.weight")) return "gpt2";
    if (a.contains("gpt_neox.embed_in.weight")) return "neox";
    if (a.contains("model.embed_tokens.weight")) return "llama";
    if (a.contains("embedding")) return "native";
    throw DataError("cannot detect an adapter from the tensor names; pass one explicitly");
}

}  // namespace

std::vector<std::string> adapter_names() { return {"auto", "gpt2", "neox", "llama", "native"}; }

LoadedModel load_model(const fs::path& path, const std::string& adapter, const json& overrides) {
    const Archive archive = Archive::open(path);
    Settings settings;
    settings.merge_metadata(archive.metadata());
    const fs::path cfg = (fs::is_directory(path) ? path : path.parent_path()) / "config.json";
    if (fs::exists(cfg)) {
        std::ifstream in(cfg);
        try {
            settings.merge(json::parse(in));
        } catch (const json::exception& e) {
            throw DataError(cfg.string() + ": " + e.what());
        }
    }
    settings.merge(overrides);
    const std::string name = adapter == "auto" ? detect_adapter(archive) : adapter;
    auto it = registry().find(name);
    if (it == registry().end()) throw UsageError("unknown adapter '" + name + "'");
    return it->second(archive, settings);
}

void save_native(const fs::path& path, const ModelGeometry& g, const WeightStore& store) {
    using safetensors::TensorToWrite;
    std::vector<TensorToWrite> t;
    auto mat = [](std::string name, const Matrix& m) {
        return TensorToWrite{std::move(name), {m.rows(), m.cols()},
                             std::vector<float>(m.values().begin(), m.values().end())};
    };
    auto vec = [](std::string name, const std::vector<float>& v) {
        return TensorToWrite{std::move(name), {v.size()}, v};
    };
    t.push_back(mat("embedding", store.embedding));
    if (!g.weights_tied) t.push_back(mat("unembedding", store.unembedding));
    for (std::size_t l = 0; l < g.n_layers; ++l) {
        TensorToWrite v{"layers." + std::to_string(l) + ".value", {g.n_kv_heads, g.d_model, g.d_head}, {}};
        for (const auto& m : store.value[l]) v.values.insert(v.values.end(), m.values().begin(), m.values().end());
        TensorToWrite o{"layers." + std::to_string(l) + ".output", {g.n_heads, g.d_head, g.d_model}, {}};
        for (const auto& m : store.output[l]) o.values.insert(o.values.end(), m.values().begin(), m.values().end());
        t.push_back(std::move(v));
        t.push_back(std::move(o));
    }
    float eps = 1e-5f;
    if (store.norm0 && store.mlp0) {
        eps = store.norm0->eps;
        t.push_back(vec("mlp0.norm.scale", store.norm0->scale));
        if (!store.norm0->bias.empty()) t.push_back(vec("mlp0.norm.bias", store.norm0->bias));
        t.push_back(mat("mlp0.fc_in", store.mlp0->fc_in));
        if (!store.mlp0->fc_in_bias.empty()) t.push_back(vec("mlp0.fc_in_bias", store.mlp0->fc_in_bias));
        if (!store.mlp0->fc_gate.empty()) t.push_back(mat("mlp0.fc_gate", store.mlp0->fc_gate));
        t.push_back(mat("mlp0.fc_out", store.mlp0->fc_out));
        if (!store.mlp0->fc_out_bias.empty()) t.push_back(vec("mlp0.fc_out_bias", store.mlp0->fc_out_bias));
    }
    if (store.final_norm) {
        t.push_back(vec("final_norm.scale", store.final_norm->scale));
        if (!store.final_norm->bias.empty()) t.push_back(vec("final_norm.bias", store.final_norm->bias));
    }
    std::map<std::string, std::string> meta = {
        {"n_heads", std::to_string(g.n_heads)},
        {"n_kv_heads", std::to_string(g.n_kv_heads)},
        {"norm_kind", to_string(g.norm_kind)},
        {"mlp_kind", to_string(g.mlp_kind)},
        {"activation", to_string(g.activation)},
        {"weights_tied", g.weights_tied ? "true" : "false"},
        {"default_policy", to_string(store.default_policy)},
    };
    if (store.norm0) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(eps));
        meta["norm_eps"] = buf;
    }
    safetensors::write(path, std::move(t), meta);
}

}  // namespace maps
