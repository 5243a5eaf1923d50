#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "maps/tensor.hpp"

namespace maps {

enum class NormKind { layernorm, rmsnorm };
enum class MlpKind { standard, gated };
enum class Activation { gelu_tanh, gelu_erf, silu };

// Which token representation a head is assumed to read.
enum class EmbeddingPolicy { raw, first_mlp };
// first_mlp variant: E + MLP0(Norm0(E)) or MLP0(Norm0(E)) alone.
enum class MlpForm { residual, pure };

std::string to_string(NormKind k);
std::string to_string(MlpKind k);
std::string to_string(Activation a);
std::string to_string(EmbeddingPolicy p);
std::string to_string(MlpForm f);
NormKind parse_norm_kind(const std::string& s);
MlpKind parse_mlp_kind(const std::string& s);
Activation parse_activation(const std::string& s);
EmbeddingPolicy parse_embedding_policy(const std::string& s);
MlpForm parse_mlp_form(const std::string& s);

struct ModelGeometry {
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::size_t n_kv_heads = 0;
    std::size_t d_model = 0;
    std::size_t d_head = 0;
    std::size_t vocab_size = 0;
    bool weights_tied = false;
    NormKind norm_kind = NormKind::layernorm;
    MlpKind mlp_kind = MlpKind::standard;
    Activation activation = Activation::gelu_tanh;

    // Throws DataError when the head counts are inconsistent.
    void validate() const;
};

struct HeadRef {
    std::size_t layer = 0;
    std::size_t head = 0;

    std::string label() const;               // "layer.head"
    static HeadRef parse(const std::string&);  // inverse of label()
    auto operator<=>(const HeadRef&) const = default;
};

struct NormParams {
    std::vector<float> scale;
    std::vector<float> bias;  // empty when the norm has no bias
    float eps = 1e-5f;
};

struct MlpParams {
    Matrix fc_in;    // d x ff (input orientation)
    std::vector<float> fc_in_bias;
    Matrix fc_gate;  // d x ff, gated MLPs only
    Matrix fc_out;   // ff x d
    std::vector<float> fc_out_bias;
};

// Read-only tensors needed to analyze OV circuits. Matrices are stored in
// "input x output" orientation so that a residual row vector x maps to x * W.
struct WeightStore {
    Matrix embedding;    // |V| x d
    Matrix unembedding;  // d x |V|
    std::vector<std::vector<Matrix>> value;   // [layer][kv head] d x d_head
    std::vector<std::vector<Matrix>> output;  // [layer][head] d_head x d
    std::optional<NormParams> norm0;          // norm feeding the first MLP
    std::optional<MlpParams> mlp0;
    std::optional<NormParams> final_norm;
    EmbeddingPolicy default_policy = EmbeddingPolicy::first_mlp;
    std::string adapter;
};

struct LoadedModel {
    ModelGeometry geometry;
    WeightStore store;
};

// Adapter names: "auto", "gpt2", "neox", "llama", "native".
std::vector<std::string> adapter_names();

// Loads the tensors an OV analysis needs. `overrides` may set any geometry
// field plus "norm_eps" and "default_policy"; when absent, a Hugging Face
// style config.json next to the weights is consulted for head counts.
LoadedModel load_model(const std::filesystem::path& path, const std::string& adapter = "auto",
                       const nlohmann::json& overrides = nlohmann::json::object());

// Writes a store in the native tensor layout understood by the "native" adapter.
void save_native(const std::filesystem::path& path, const ModelGeometry& geometry,
                 const WeightStore& store);

// Index of the shared key/value head serving query head `head`.
std::size_t kv_group(const ModelGeometry& geometry, std::size_t head);

// W_V(kv_group(head)) * W_O(head), biases excluded.
Matrix head_vo(const WeightStore& store, const ModelGeometry& geometry, HeadRef head);

// Applies a norm in place to one residual row.
void apply_norm(const NormParams& p, NormKind kind, std::span<float> row);

float activate(Activation a, float x);

// Token representations read by heads of `layer` under `policy`. Layer 0 and
// the raw policy return the embedding matrix unchanged.
Matrix effective_embeddings(const WeightStore& store, const ModelGeometry& geometry,
                            std::size_t layer, EmbeddingPolicy policy,
                            MlpForm form = MlpForm::residual, unsigned workers = 1);

}  // namespace maps
