#include "soupkit/model.hpp"

#include <cmath>
#include <cstring>

#include "soupkit/binary_io.hpp"
#include "soupkit/error.hpp"
#include "soupkit/hash.hpp"
#include "soupkit/rng.hpp"

namespace soup {

namespace {

constexpr std::string_view kCheckpointMagic = "SOUPCKP1";

std::string layer_prefix(std::uint32_t i) { return "h." + std::to_string(i) + "."; }

}  // namespace

void ModelConfig::validate() const {
    if (layers < 1) throw ConfigError("model needs at least one layer");
    if (d_model < 1 || heads < 1 || d_model % heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " must be a positive multiple of heads " +
                          std::to_string(heads));
    }
    if (context < 2) throw ConfigError("context length must be >= 2");
    if (vocab < 256) throw ConfigError("vocab must be >= 256");
    if (bottleneck < 1) throw ConfigError("adapter bottleneck must be >= 1");
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["layers"] = c.layers;
    j["d_model"] = c.d_model;
    j["heads"] = c.heads;
    j["context"] = c.context;
    j["vocab"] = c.vocab;
    j["bottleneck"] = c.bottleneck;
    j["base_seed"] = c.base_seed;
    j["adapter_seed"] = c.adapter_seed;
    return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.layers = j.at("layers").get<std::uint32_t>();
        c.d_model = j.at("d_model").get<std::uint32_t>();
        c.heads = j.at("heads").get<std::uint32_t>();
        c.context = j.at("context").get<std::uint32_t>();
        c.vocab = j.at("vocab").get<std::uint32_t>();
        c.bottleneck = j.at("bottleneck").get<std::uint32_t>();
        c.base_seed = j.at("base_seed").get<std::uint64_t>();
        c.adapter_seed = j.at("adapter_seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
    return c;
}

const Tensor<float>& find_param(const ParamSet& params, std::string_view name) {
    for (const auto& p : params) {
        if (p.name == name) return p.value;
    }
    throw CompatibilityError("missing tensor '" + std::string(name) + "'");
}

Tensor<float>& find_param(ParamSet& params, std::string_view name) {
    for (auto& p : params) {
        if (p.name == name) return p.value;
    }
    throw CompatibilityError("missing tensor '" + std::string(name) + "'");
}

std::size_t param_count(const ParamSet& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
}

std::vector<std::pair<std::string, Shape>> base_layout(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    std::vector<std::pair<std::string, Shape>> out{{"wte", {c.vocab, d}}, {"wpe", {c.context, d}}};
    for (std::uint32_t i = 0; i < c.layers; ++i) {
        const auto p = layer_prefix(i);
        out.push_back({p + "ln1.g", {d}});
        out.push_back({p + "ln1.b", {d}});
        out.push_back({p + "attn.qkv.w", {d, 3 * d}});
        out.push_back({p + "attn.qkv.b", {3 * d}});
        out.push_back({p + "attn.proj.w", {d, d}});
        out.push_back({p + "attn.proj.b", {d}});
        out.push_back({p + "ln2.g", {d}});
        out.push_back({p + "ln2.b", {d}});
        out.push_back({p + "ffn.fc.w", {d, 4 * d}});
        out.push_back({p + "ffn.fc.b", {4 * d}});
        out.push_back({p + "ffn.proj.w", {4 * d, d}});
        out.push_back({p + "ffn.proj.b", {d}});
    }
    out.push_back({"lnf.g", {d}});
    out.push_back({"lnf.b", {d}});
    out.push_back({"head.w", {d, c.vocab}});
    out.push_back({"head.b", {c.vocab}});
    return out;
}

std::vector<std::pair<std::string, Shape>> adapter_layout(const ModelConfig& c) {
    const std::size_t d = c.d_model, b = c.bottleneck;
    std::vector<std::pair<std::string, Shape>> out;
    for (std::uint32_t i = 0; i < c.layers; ++i) {
        const auto p = layer_prefix(i) + "adapter.";
        out.push_back({p + "ln.g", {d}});
        out.push_back({p + "ln.b", {d}});
        out.push_back({p + "down.w", {d, b}});
        out.push_back({p + "down.b", {b}});
        out.push_back({p + "up.w", {b, d}});
        out.push_back({p + "up.b", {d}});
    }
    return out;
}

std::size_t adapter_param_formula(const ModelConfig& c) {
    const std::size_t d = c.d_model, b = c.bottleneck;
    return c.layers * (2 * d * b + b + d + 2 * d);
}

namespace {

void hash_params(Sha256& h, const ParamSet& params) {
    for (const auto& p : params) {
        h.update(p.name).update(shape_str(p.value.shape()));
        io::Writer w;
        w.reserve(p.value.size() * 4);
        for (float v : p.value.data()) w.f32(v);
        h.update(w.buffer());
    }
}

void check_layout(const ParamSet& params, const std::vector<std::pair<std::string, Shape>>& layout,
                  const std::string& what) {
    if (params.size() != layout.size()) {
        throw CompatibilityError(what + ": expected " + std::to_string(layout.size()) + " tensors, found " +
                                 std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
        if (params[i].name != layout[i].first || params[i].value.shape() != layout[i].second) {
            throw CompatibilityError(what + ": tensor " + std::to_string(i) + " is " + params[i].name +
                                     shape_str(params[i].value.shape()) + ", expected " + layout[i].first +
                                     shape_str(layout[i].second));
        }
    }
}

}  // namespace

std::string BaseModel::content_hash() const {
    Sha256 h;
    h.update(to_json(config).dump()).update(tokenizer_fingerprint);
    hash_params(h, params);
    return h.hex();
}

std::string AdapterWeights::id() const { return sha256_hex(encode_checkpoint(*this)); }

BaseModel init_base(const ModelConfig& config, std::string tokenizer_fingerprint) {
    config.validate();
    BaseModel base;
    base.config = config;
    base.tokenizer_fingerprint = std::move(tokenizer_fingerprint);
    const double resid_std = 0.02 / std::sqrt(2.0 * config.layers);
    const auto layout = base_layout(config);
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const auto& [name, shape] = layout[i];
        Tensor<float> t(shape);
        const bool gain = name.ends_with(".g");
        const bool weight = name.ends_with(".w") || name == "wte" || name == "wpe";
        if (gain) {
            t.fill(1.0f);
        } else if (weight) {
            const double stdev = name.ends_with("proj.w") ? resid_std : (name == "wpe" ? 0.01 : 0.02);
            Rng rng(Rng::derive(config.base_seed, 0x62617365ULL, i));
            for (auto& v : t.data()) v = static_cast<float>(rng.normal() * stdev);
        }
        base.params.push_back({name, std::move(t)});
    }
    return base;
}

AdapterWeights attach_adapters(const BaseModel& base, std::uint64_t adapter_init_seed) {
    AdapterWeights a;
    a.config = base.config;
    a.meta.adapter_init_seed = adapter_init_seed;
    a.meta.base_hash = base.content_hash();
    const double stdev = 1.0 / std::sqrt(static_cast<double>(base.config.d_model));
    const auto layout = adapter_layout(base.config);
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const auto& [name, shape] = layout[i];
        Tensor<float> t(shape);
        if (name.ends_with(".g")) {
            t.fill(1.0f);
        } else if (name.ends_with("down.w")) {
            Rng rng(Rng::derive(adapter_init_seed, 0x61646170ULL, i));
            for (auto& v : t.data()) v = static_cast<float>(rng.normal() * stdev);
        }
        a.params.push_back({name, std::move(t)});
    }
    return a;
}

void check_compatible(const BaseModel& base, const AdapterWeights& adapters) {
    if (!(adapters.config == base.config)) {
        throw CompatibilityError("adapter config " + to_json(adapters.config).dump() + " does not match base " +
                                 to_json(base.config).dump());
    }
    const auto hash = base.content_hash();
    if (adapters.meta.base_hash != hash) {
        throw CompatibilityError("adapter trained on base " + adapters.meta.base_hash.substr(0, 12) +
                                 ", bound to base " + hash.substr(0, 12));
    }
    check_layout(adapters.params, adapter_layout(base.config), "adapter");
}

// --- tensor files ------------------------------------------------------------

std::vector<std::byte> encode_tensor_file(std::string_view magic, const nlohmann::ordered_json& header,
                                          const ParamSet& tensors) {
    nlohmann::ordered_json h = header;
    nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
    std::size_t offset = 0;
    for (const auto& t : tensors) {
        nlohmann::ordered_json e;
        e["name"] = t.name;
        e["shape"] = t.value.shape();
        e["offset"] = offset;
        manifest.push_back(e);
        offset += t.value.size() * 4;
    }
    h["tensors"] = manifest;
    const auto text = h.dump();
    io::Writer w;
    w.reserve(magic.size() + 6 + text.size() + offset);
    w.bytes(magic);
    w.u16(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(text.size()));
    w.bytes(text);
    for (const auto& t : tensors) {
        for (float v : t.value.data()) w.f32(v);
    }
    auto out = w.take();
    io::seal(out);
    return out;
}

TensorFile decode_tensor_file(std::string_view magic, std::span<const std::byte> bytes) {
    const std::string what(magic);
    io::Reader r(io::unseal(bytes, what), what);
    if (r.bytes(magic.size()) != magic) throw FormatError(what + ": bad magic");
    const auto version = r.u16();
    if (version != kCheckpointVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
    const auto header_len = r.u32();
    const auto text = r.bytes(header_len);
    TensorFile out;
    try {
        out.header = nlohmann::ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(what + ": malformed header: " + e.what());
    }
    const std::size_t payload_start = r.position();
    std::size_t expected = 0;
    try {
        for (const auto& e : out.header.at("tensors")) {
            Shape shape = e.at("shape").get<Shape>();
            const auto offset = e.at("offset").get<std::size_t>();
            if (offset != expected) throw FormatError(what + ": non-contiguous tensor manifest");
            for (auto d : shape) {
                if (d == 0) throw FormatError(what + ": zero dimension in manifest");
            }
            const auto n = shape_numel(shape);
            r.require(n * 4);
            std::vector<float> data(n);
            for (auto& v : data) v = r.f32();
            expected += n * 4;
            out.tensors.push_back({e.at("name").get<std::string>(), Tensor<float>(std::move(shape), std::move(data))});
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(what + ": bad manifest: " + e.what());
    }
    if (r.position() - payload_start != expected || r.remaining() != 0) {
        throw FormatError(what + ": payload size does not match manifest");
    }
    out.header.erase("tensors");
    return out;
}

namespace {

nlohmann::ordered_json meta_json(const AdapterMeta& m) {
    nlohmann::ordered_json j;
    j["domain"] = m.domain;
    j["hyper"] = to_json(m.hyper);
    j["adapter_init_seed"] = m.adapter_init_seed;
    j["base_hash"] = m.base_hash;
    j["final_train_loss"] = m.final_train_loss;
    j["provenance"] = m.provenance;
    return j;
}

}  // namespace

std::vector<std::byte> encode_checkpoint(const BaseModel& base) {
    nlohmann::ordered_json h;
    h["kind"] = "base";
    h["config"] = to_json(base.config);
    nlohmann::ordered_json meta;
    meta["tokenizer_fingerprint"] = base.tokenizer_fingerprint;
    h["meta"] = meta;
    return encode_tensor_file(kCheckpointMagic, h, base.params);
}

std::vector<std::byte> encode_checkpoint(const AdapterWeights& adapters) {
    nlohmann::ordered_json h;
    h["kind"] = "adapter";
    h["config"] = to_json(adapters.config);
    h["meta"] = meta_json(adapters.meta);
    return encode_tensor_file(kCheckpointMagic, h, adapters.params);
}

BaseModel decode_base_checkpoint(std::span<const std::byte> bytes) {
    auto file = decode_tensor_file(kCheckpointMagic, bytes);
    BaseModel base;
    try {
        if (file.header.at("kind") != "base") throw FormatError("checkpoint is not a base model");
        base.config = model_config_from_json(file.header.at("config"));
        base.tokenizer_fingerprint = file.header.at("meta").at("tokenizer_fingerprint").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("base checkpoint header: ") + e.what());
    }
    base.params = std::move(file.tensors);
    try {
        check_layout(base.params, base_layout(base.config), "base checkpoint");
    } catch (const CompatibilityError& e) {
        throw FormatError(e.what());
    }
    return base;
}

AdapterWeights decode_adapter_checkpoint(std::span<const std::byte> bytes) {
    auto file = decode_tensor_file(kCheckpointMagic, bytes);
    AdapterWeights a;
    try {
        if (file.header.at("kind") != "adapter") throw FormatError("checkpoint is not an adapter");
        a.config = model_config_from_json(file.header.at("config"));
        const auto& m = file.header.at("meta");
        a.meta.domain = m.at("domain").get<std::string>();
        a.meta.hyper = train_config_from_json(m.at("hyper"));
        a.meta.adapter_init_seed = m.at("adapter_init_seed").get<std::uint64_t>();
        a.meta.base_hash = m.at("base_hash").get<std::string>();
        a.meta.final_train_loss = m.at("final_train_loss").get<double>();
        a.meta.provenance = m.at("provenance");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("adapter checkpoint header: ") + e.what());
    }
    a.params = std::move(file.tensors);
    try {
        check_layout(a.params, adapter_layout(a.config), "adapter checkpoint");
    } catch (const CompatibilityError& e) {
        throw FormatError(e.what());
    }
    return a;
}

void save_checkpoint(const BaseModel& base, const std::filesystem::path& path) {
    io::write_file_atomic(path, encode_checkpoint(base));
}

void save_checkpoint(const AdapterWeights& adapters, const std::filesystem::path& path) {
    io::write_file_atomic(path, encode_checkpoint(adapters));
}

BaseModel load_base(const std::filesystem::path& path) { return decode_base_checkpoint(io::read_file(path)); }

AdapterWeights load_adapters(const std::filesystem::path& path) {
    return decode_adapter_checkpoint(io::read_file(path));
}

// --- forward -----------------------------------------------------------------

namespace {

template <class T>
ad::Var<T> leaf_from(const ParamSet& params, const std::string& name, bool grad, std::vector<std::string>& names,
                     std::vector<ad::Var<T>>& trainable) {
    const auto& src = find_param(params, name);
    auto v = ad::Var<T>::leaf(src.template cast<T>(), grad);
    if (grad) {
        names.push_back(name);
        trainable.push_back(v);
    }
    return v;
}

template <class T>
void export_into(const ad::Var<T>& v, Tensor<float>& dst) {
    const auto& src = v.value().data();
    auto out = dst.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(src[i]);
}

}  // namespace

template <class T>
ModelVars<T> ModelVars<T>::bind(const ModelConfig& config, const ParamSet& base, const ParamSet* adapters,
                                bool train_base, bool train_adapters) {
    config.validate();
    check_layout(base, base_layout(config), "base");
    if (adapters) check_layout(*adapters, adapter_layout(config), "adapter");
    ModelVars v;
    v.config = config;
    auto& names = v.trainable_names;
    auto& tr = v.trainable;
    v.wte = leaf_from<T>(base, "wte", train_base, names, tr);
    v.wpe = leaf_from<T>(base, "wpe", train_base, names, tr);
    for (std::uint32_t i = 0; i < config.layers; ++i) {
        const auto p = layer_prefix(i);
        LayerVars<T> l;
        l.ln1_g = leaf_from<T>(base, p + "ln1.g", train_base, names, tr);
        l.ln1_b = leaf_from<T>(base, p + "ln1.b", train_base, names, tr);
        l.qkv_w = leaf_from<T>(base, p + "attn.qkv.w", train_base, names, tr);
        l.qkv_b = leaf_from<T>(base, p + "attn.qkv.b", train_base, names, tr);
        l.proj_w = leaf_from<T>(base, p + "attn.proj.w", train_base, names, tr);
        l.proj_b = leaf_from<T>(base, p + "attn.proj.b", train_base, names, tr);
        l.ln2_g = leaf_from<T>(base, p + "ln2.g", train_base, names, tr);
        l.ln2_b = leaf_from<T>(base, p + "ln2.b", train_base, names, tr);
        l.fc_w = leaf_from<T>(base, p + "ffn.fc.w", train_base, names, tr);
        l.fc_b = leaf_from<T>(base, p + "ffn.fc.b", train_base, names, tr);
        l.out_w = leaf_from<T>(base, p + "ffn.proj.w", train_base, names, tr);
        l.out_b = leaf_from<T>(base, p + "ffn.proj.b", train_base, names, tr);
        v.layers.push_back(std::move(l));
    }
    v.lnf_g = leaf_from<T>(base, "lnf.g", train_base, names, tr);
    v.lnf_b = leaf_from<T>(base, "lnf.b", train_base, names, tr);
    v.head_w = leaf_from<T>(base, "head.w", train_base, names, tr);
    v.head_b = leaf_from<T>(base, "head.b", train_base, names, tr);
    if (adapters) {
        for (std::uint32_t i = 0; i < config.layers; ++i) {
            const auto p = layer_prefix(i) + "adapter.";
            auto& l = v.layers[i];
            l.has_adapter = true;
            l.a_ln_g = leaf_from<T>(*adapters, p + "ln.g", train_adapters, names, tr);
            l.a_ln_b = leaf_from<T>(*adapters, p + "ln.b", train_adapters, names, tr);
            l.a_down_w = leaf_from<T>(*adapters, p + "down.w", train_adapters, names, tr);
            l.a_down_b = leaf_from<T>(*adapters, p + "down.b", train_adapters, names, tr);
            l.a_up_w = leaf_from<T>(*adapters, p + "up.w", train_adapters, names, tr);
            l.a_up_b = leaf_from<T>(*adapters, p + "up.b", train_adapters, names, tr);
        }
    }
    return v;
}

template <class T>
void ModelVars<T>::export_base(ParamSet& base) const {
    export_into(wte, find_param(base, "wte"));
    export_into(wpe, find_param(base, "wpe"));
    for (std::uint32_t i = 0; i < config.layers; ++i) {
        const auto p = layer_prefix(i);
        const auto& l = layers[i];
        export_into(l.ln1_g, find_param(base, p + "ln1.g"));
        export_into(l.ln1_b, find_param(base, p + "ln1.b"));
        export_into(l.qkv_w, find_param(base, p + "attn.qkv.w"));
        export_into(l.qkv_b, find_param(base, p + "attn.qkv.b"));
        export_into(l.proj_w, find_param(base, p + "attn.proj.w"));
        export_into(l.proj_b, find_param(base, p + "attn.proj.b"));
        export_into(l.ln2_g, find_param(base, p + "ln2.g"));
        export_into(l.ln2_b, find_param(base, p + "ln2.b"));
        export_into(l.fc_w, find_param(base, p + "ffn.fc.w"));
        export_into(l.fc_b, find_param(base, p + "ffn.fc.b"));
        export_into(l.out_w, find_param(base, p + "ffn.proj.w"));
        export_into(l.out_b, find_param(base, p + "ffn.proj.b"));
    }
    export_into(lnf_g, find_param(base, "lnf.g"));
    export_into(lnf_b, find_param(base, "lnf.b"));
    export_into(head_w, find_param(base, "head.w"));
    export_into(head_b, find_param(base, "head.b"));
}

template <class T>
void ModelVars<T>::export_adapters(ParamSet& adapters) const {
    for (std::uint32_t i = 0; i < config.layers; ++i) {
        const auto p = layer_prefix(i) + "adapter.";
        const auto& l = layers[i];
        if (!l.has_adapter) throw CompatibilityError("no adapters bound");
        export_into(l.a_ln_g, find_param(adapters, p + "ln.g"));
        export_into(l.a_ln_b, find_param(adapters, p + "ln.b"));
        export_into(l.a_down_w, find_param(adapters, p + "down.w"));
        export_into(l.a_down_b, find_param(adapters, p + "down.b"));
        export_into(l.a_up_w, find_param(adapters, p + "up.w"));
        export_into(l.a_up_b, find_param(adapters, p + "up.b"));
    }
}

template <class T>
ad::Var<T> forward(const ModelVars<T>& v, std::span<const std::uint32_t> tokens, std::size_t batch, std::size_t seq,
                   ad::Var<T>* hidden) {
    const auto& c = v.config;
    if (seq == 0 || batch == 0 || seq > c.context) {
        throw DimensionError("sequence length " + std::to_string(seq) + " outside [1, " + std::to_string(c.context) +
                             "]");
    }
    if (tokens.size() != batch * seq) throw DimensionError("token buffer does not match batch x seq");
    std::vector<std::uint32_t> positions(batch * seq);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < seq; ++t) positions[b * seq + t] = static_cast<std::uint32_t>(t);
    }
    using ad::add;
    using ad::add_bias;
    using ad::matmul;
    auto x = add(ad::embedding(v.wte, tokens), ad::embedding(v.wpe, std::span<const std::uint32_t>(positions)));
    for (const auto& l : v.layers) {
        auto h = ad::layer_norm(x, l.ln1_g, l.ln1_b);
        auto qkv = add_bias(matmul(h, l.qkv_w), l.qkv_b);
        auto att = ad::causal_attention(qkv, batch, seq, c.heads);
        x = add(x, add_bias(matmul(att, l.proj_w), l.proj_b));
        h = ad::layer_norm(x, l.ln2_g, l.ln2_b);
        auto f = ad::gelu(add_bias(matmul(h, l.fc_w), l.fc_b));
        x = add(x, add_bias(matmul(f, l.out_w), l.out_b));
        if (l.has_adapter) {
            auto z = ad::layer_norm(x, l.a_ln_g, l.a_ln_b);
            z = ad::relu(add_bias(matmul(z, l.a_down_w), l.a_down_b));
            x = add(x, add_bias(matmul(z, l.a_up_w), l.a_up_b));
        }
    }
    auto hf = ad::layer_norm(x, v.lnf_g, v.lnf_b);
    if (hidden) *hidden = hf;
    return add_bias(matmul(hf, v.head_w), v.head_b);
}

template struct ModelVars<float>;
template struct ModelVars<double>;
template ad::Var<float> forward(const ModelVars<float>&, std::span<const std::uint32_t>, std::size_t, std::size_t,
                                ad::Var<float>*);
template ad::Var<double> forward(const ModelVars<double>&, std::span<const std::uint32_t>, std::size_t, std::size_t,
                                 ad::Var<double>*);

BoundModel::BoundModel(const BaseModel& base, const AdapterWeights* adapters) {
    if (adapters) check_compatible(base, *adapters);
    vars_ = ModelVars<float>::bind(base.config, base.params, adapters ? &adapters->params : nullptr, false, false);
}

Tensor<float> BoundModel::logits(std::span<const std::uint32_t> tokens) const {
    return logits(tokens, 1, tokens.size());
}

Tensor<float> BoundModel::logits(std::span<const std::uint32_t> tokens, std::size_t batch, std::size_t seq) const {
    return forward(vars_, tokens, batch, seq).value();
}

Tensor<float> BoundModel::hidden(std::span<const std::uint32_t> tokens, std::size_t batch, std::size_t seq) const {
    ad::Var<float> h;
    forward(vars_, tokens, batch, seq, &h);
    return h.value();
}

}  // namespace soup
