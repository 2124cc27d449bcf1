#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "soupkit/autodiff.hpp"
#include "soupkit/tensor.hpp"
#include "soupkit/train_config.hpp"

namespace soup {

struct ModelConfig {
    std::uint32_t layers = 4;
    std::uint32_t d_model = 128;
    std::uint32_t heads = 4;
    std::uint32_t context = 256;
    std::uint32_t vocab = 2048;
    std::uint32_t bottleneck = 64;
    std::uint64_t base_seed = 1;
    std::uint64_t adapter_seed = 1;

    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::ordered_json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct NamedTensor {
    std::string name;
    Tensor<float> value;
    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};
using ParamSet = std::vector<NamedTensor>;

const Tensor<float>& find_param(const ParamSet& params, std::string_view name);
Tensor<float>& find_param(ParamSet& params, std::string_view name);
std::size_t param_count(const ParamSet& params);

// Shapes in canonical order.
std::vector<std::pair<std::string, Shape>> base_layout(const ModelConfig& c);
std::vector<std::pair<std::string, Shape>> adapter_layout(const ModelConfig& c);
// L * (2 * d_model * d + d + d_model + 2 * d_model)
std::size_t adapter_param_formula(const ModelConfig& c);

struct BaseModel {
    ModelConfig config;
    ParamSet params;
    std::string tokenizer_fingerprint;

    // SHA-256 over config, tokenizer fingerprint and every tensor.
    std::string content_hash() const;
};

struct AdapterMeta {
    std::string domain;
    TrainConfig hyper;
    std::uint64_t adapter_init_seed = 0;
    std::string base_hash;
    double final_train_loss = 0.0;
    // Free-form provenance, e.g. a soup recipe or an unsafe-override note.
    nlohmann::ordered_json provenance = nlohmann::ordered_json::object();
};

struct AdapterWeights {
    ModelConfig config;
    ParamSet params;
    AdapterMeta meta;

    // SHA-256 of the serialized checkpoint; used as the registry id.
    std::string id() const;
};

BaseModel init_base(const ModelConfig& config, std::string tokenizer_fingerprint = {});
// Down-projections drawn from N(0, 1/d_model) with the given seed; every
// other adapter tensor starts at the identity point (gain 1, zeros elsewhere).
AdapterWeights attach_adapters(const BaseModel& base, std::uint64_t adapter_init_seed);

// --- checkpoints -------------------------------------------------------------

// Generic container: magic, u16 version, u32 header length, JSON header with a
// tensor manifest, then little-endian f32 payload.
struct TensorFile {
    nlohmann::ordered_json header;
    ParamSet tensors;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::byte> encode_tensor_file(std::string_view magic, const nlohmann::ordered_json& header,
                                          const ParamSet& tensors);
TensorFile decode_tensor_file(std::string_view magic, std::span<const std::byte> bytes);

std::vector<std::byte> encode_checkpoint(const BaseModel& base);
std::vector<std::byte> encode_checkpoint(const AdapterWeights& adapters);
BaseModel decode_base_checkpoint(std::span<const std::byte> bytes);
AdapterWeights decode_adapter_checkpoint(std::span<const std::byte> bytes);

void save_checkpoint(const BaseModel& base, const std::filesystem::path& path);
void save_checkpoint(const AdapterWeights& adapters, const std::filesystem::path& path);
BaseModel load_base(const std::filesystem::path& path);
AdapterWeights load_adapters(const std::filesystem::path& path);

// Throws CompatibilityError when the adapter does not fit the base.
void check_compatible(const BaseModel& base, const AdapterWeights& adapters);

// --- forward -----------------------------------------------------------------

template <class T>
struct LayerVars {
    ad::Var<T> ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    ad::Var<T> ln2_g, ln2_b, fc_w, fc_b, out_w, out_b;
    bool has_adapter = false;
    ad::Var<T> a_ln_g, a_ln_b, a_down_w, a_down_b, a_up_w, a_up_b;
};

// Graph leaves for one (base, adapters) pair.
template <class T>
struct ModelVars {
    ModelConfig config;
    ad::Var<T> wte, wpe, lnf_g, lnf_b, head_w, head_b;
    std::vector<LayerVars<T>> layers;
    std::vector<std::string> trainable_names;
    std::vector<ad::Var<T>> trainable;

    static ModelVars bind(const ModelConfig& config, const ParamSet& base, const ParamSet* adapters, bool train_base,
                          bool train_adapters);
    // Copies current leaf values back (float storage).
    void export_base(ParamSet& base) const;
    void export_adapters(ParamSet& adapters) const;
};

// tokens holds batch rows of seq ids; seq <= context. Returns logits
// [(batch*seq) x V]; hidden, when non-null, receives the final normalized
// hidden states [(batch*seq) x d_model].
template <class T>
ad::Var<T> forward(const ModelVars<T>& vars, std::span<const std::uint32_t> tokens, std::size_t batch,
                   std::size_t seq, ad::Var<T>* hidden = nullptr);

// A base with an optional adapter, ready for inference. Immutable; safe for
// concurrent forward calls.
class BoundModel {
public:
    BoundModel(const BaseModel& base, const AdapterWeights* adapters);

    Tensor<float> logits(std::span<const std::uint32_t> tokens) const;
    Tensor<float> logits(std::span<const std::uint32_t> tokens, std::size_t batch, std::size_t seq) const;
    Tensor<float> hidden(std::span<const std::uint32_t> tokens, std::size_t batch, std::size_t seq) const;
    const ModelConfig& config() const noexcept { return vars_.config; }

private:
    ModelVars<float> vars_;
};

}  // namespace soup
