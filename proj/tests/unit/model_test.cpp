#include <gtest/gtest.h>

#include <cmath>

#include "soupkit/autodiff.hpp"
#include "soupkit/error.hpp"
#include "soupkit/gradcheck.hpp"
#include "soupkit/model.hpp"
#include "soupkit/rng.hpp"

using namespace soup;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.layers = 2;
    c.d_model = 16;
    c.heads = 2;
    c.context = 16;
    c.vocab = 256;
    c.bottleneck = 4;
    return c;
}

std::vector<std::uint32_t> random_tokens(Rng& rng, std::size_t n, std::uint32_t vocab) {
    std::vector<std::uint32_t> t(n);
    for (auto& v : t) v = static_cast<std::uint32_t>(rng.below(vocab));
    return t;
}

void randomize(ParamSet& params, std::uint64_t seed, double scale) {
    Rng rng(seed);
    for (auto& p : params) {
        for (auto& v : p.value.data()) v = static_cast<float>(rng.normal() * scale);
    }
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

// Scalar reference forward of a single-layer model, written without the
// autodiff ops, in double precision.
std::vector<std::vector<double>> reference_forward(const ModelConfig& c, const ParamSet& base, const ParamSet* ad,
                                                   const std::vector<std::uint32_t>& tokens) {
    const std::size_t d = c.d_model, T = tokens.size(), V = c.vocab, hd = d / c.heads;
    auto P = [&](const ParamSet& ps, const std::string& n) { return find_param(ps, n).cast<double>(); };
    auto ln = [&](std::vector<double> x, const Tensor<double>& g, const Tensor<double>& b) {
        double mean = 0, var = 0;
        for (double v : x) mean += v;
        mean /= x.size();
        for (double v : x) var += (v - mean) * (v - mean);
        var /= x.size();
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * g[i] + b[i];
        return x;
    };
    auto affine = [&](const std::vector<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
        const std::size_t out = w.cols();
        std::vector<double> y(out);
        for (std::size_t j = 0; j < out; ++j) {
            double s = b[j];
            for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w(i, j);
            y[j] = s;
        }
        return y;
    };
    const auto wte = P(base, "wte"), wpe = P(base, "wpe");
    std::vector<std::vector<double>> x(T, std::vector<double>(d));
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < d; ++i) x[t][i] = wte(tokens[t], i) + wpe(t, i);
    }
    for (std::uint32_t layer = 0; layer < c.layers; ++layer) {
        const std::string p = "h." + std::to_string(layer) + ".";
        std::vector<std::vector<double>> qkv(T);
        for (std::size_t t = 0; t < T; ++t) {
            qkv[t] = affine(ln(x[t], P(base, p + "ln1.g"), P(base, p + "ln1.b")), P(base, p + "attn.qkv.w"),
                            P(base, p + "attn.qkv.b"));
        }
        std::vector<std::vector<double>> att(T, std::vector<double>(d, 0.0));
        for (std::size_t h = 0; h < c.heads; ++h) {
            for (std::size_t t = 0; t < T; ++t) {
                std::vector<double> s(t + 1);
                double mx = -1e300;
                for (std::size_t u = 0; u <= t; ++u) {
                    double dot = 0;
                    for (std::size_t e = 0; e < hd; ++e) dot += qkv[t][h * hd + e] * qkv[u][d + h * hd + e];
                    s[u] = dot / std::sqrt(static_cast<double>(hd));
                    mx = std::max(mx, s[u]);
                }
                double z = 0;
                for (auto& v : s) z += (v = std::exp(v - mx));
                for (std::size_t u = 0; u <= t; ++u) {
                    for (std::size_t e = 0; e < hd; ++e) att[t][h * hd + e] += s[u] / z * qkv[u][2 * d + h * hd + e];
                }
            }
        }
        for (std::size_t t = 0; t < T; ++t) {
            auto a = affine(att[t], P(base, p + "attn.proj.w"), P(base, p + "attn.proj.b"));
            for (std::size_t i = 0; i < d; ++i) x[t][i] += a[i];
            auto f = affine(ln(x[t], P(base, p + "ln2.g"), P(base, p + "ln2.b")), P(base, p + "ffn.fc.w"),
                            P(base, p + "ffn.fc.b"));
            for (auto& v : f) v = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
            auto g = affine(f, P(base, p + "ffn.proj.w"), P(base, p + "ffn.proj.b"));
            for (std::size_t i = 0; i < d; ++i) x[t][i] += g[i];
            if (ad) {
                const std::string q = p + "adapter.";
                auto z = affine(ln(x[t], P(*ad, q + "ln.g"), P(*ad, q + "ln.b")), P(*ad, q + "down.w"),
                                P(*ad, q + "down.b"));
                for (auto& v : z) v = std::max(0.0, v);
                auto u = affine(z, P(*ad, q + "up.w"), P(*ad, q + "up.b"));
                for (std::size_t i = 0; i < d; ++i) x[t][i] += u[i];
            }
        }
    }
    std::vector<std::vector<double>> logits(T);
    for (std::size_t t = 0; t < T; ++t) {
        logits[t] = affine(ln(x[t], P(base, "lnf.g"), P(base, "lnf.b")), P(base, "head.w"), P(base, "head.b"));
        EXPECT_EQ(logits[t].size(), V);
    }
    return logits;
}

}  // namespace

TEST(ModelConfig, ValidationAndJson) {
    auto c = tiny_config();
    c.heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny_config();
    EXPECT_EQ(model_config_from_json(to_json(c)), c);
}

TEST(ModelConfig, AdapterCountFormulaAndBudget) {
    for (auto c : {ModelConfig{}, tiny_config()}) {
        auto base = init_base(c);
        auto ad = attach_adapters(base, 3);
        EXPECT_EQ(param_count(ad.params), adapter_param_formula(c));
    }
    const ModelConfig def;
    const auto base = init_base(def);
    EXPECT_LT(static_cast<double>(adapter_param_formula(def)), 0.05 * static_cast<double>(param_count(base.params)));
}

TEST(InitBase, DeterministicHash) {
    auto c = tiny_config();
    EXPECT_EQ(init_base(c).content_hash(), init_base(c).content_hash());
    auto c2 = c;
    c2.base_seed = 2;
    EXPECT_NE(init_base(c).content_hash(), init_base(c2).content_hash());
}

TEST(InitBase, FreshBasePerplexityNearVocab) {
    auto c = tiny_config();
    auto base = init_base(c);
    BoundModel m(base, nullptr);
    Rng rng(4);
    auto tokens = random_tokens(rng, 16 * 8, c.vocab);
    auto logits = m.logits(tokens, 8, 16);
    ASSERT_TRUE(logits.all_finite());
    std::vector<std::uint32_t> targets(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) targets[i] = static_cast<std::uint32_t>(rng.below(c.vocab));
    auto ce = ad::cross_entropy_mean(ad::Var<float>::constant(logits), targets);
    const double ppl = std::exp(ce.value()[0]);
    EXPECT_GT(ppl, c.vocab / 2.0);
    EXPECT_LT(ppl, c.vocab * 2.0);
}

TEST(Adapters, IdentityAtInit) {
    auto c = tiny_config();
    auto base = init_base(c);
    auto ad = attach_adapters(base, 9);
    BoundModel plain(base, nullptr), adapted(base, &ad);
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        auto tokens = random_tokens(rng, 1 + rng.below(c.context), c.vocab);
        EXPECT_LE(max_abs_diff(plain.logits(tokens), adapted.logits(tokens)), 1e-6);
    }
}

TEST(Adapters, SameSeedSameWeights) {
    auto base = init_base(tiny_config());
    auto a = attach_adapters(base, 5);
    auto b = attach_adapters(base, 5);
    a.meta.domain = "alpha";
    b.meta.domain = "beta";
    EXPECT_EQ(a.params, b.params);
    EXPECT_NE(attach_adapters(base, 6).params, a.params);
}

TEST(Forward, Causality) {
    auto c = tiny_config();
    auto base = init_base(c);
    auto ad = attach_adapters(base, 2);
    randomize(ad.params, 77, 0.3);
    BoundModel m(base, &ad);
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        auto tokens = random_tokens(rng, c.context, c.vocab);
        const std::size_t t = rng.below(c.context - 1);
        auto before = m.logits(tokens);
        tokens[t + 1] = (tokens[t + 1] + 1) % c.vocab;
        auto after = m.logits(tokens);
        for (std::size_t r = 0; r <= t; ++r) {
            for (std::size_t v = 0; v < c.vocab; ++v) ASSERT_EQ(before(r, v), after(r, v));
        }
    }
}

TEST(Forward, MatchesScalarReferenceTwoWide) {
    ModelConfig c;
    c.layers = 1;
    c.d_model = 2;
    c.heads = 1;
    c.context = 2;
    c.vocab = 256;
    c.bottleneck = 2;
    auto base = init_base(c);
    randomize(base.params, 1234, 0.5);
    auto ad = attach_adapters(base, 3);
    randomize(ad.params, 99, 0.5);
    ad.meta.base_hash = base.content_hash();
    const std::vector<std::uint32_t> tokens{17, 200};
    for (const ParamSet* adp : {static_cast<const ParamSet*>(nullptr), static_cast<const ParamSet*>(&ad.params)}) {
        BoundModel m(base, adp ? &ad : nullptr);
        const auto got = m.logits(tokens);
        const auto ref = reference_forward(c, base.params, adp, tokens);
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            for (std::size_t v = 0; v < c.vocab; ++v) EXPECT_NEAR(got(t, v), ref[t][v], 1e-5);
        }
    }
}

TEST(Forward, MatchesScalarReferenceTwoLayers) {
    auto c = tiny_config();
    auto base = init_base(c);
    randomize(base.params, 4321, 0.2);
    auto ad = attach_adapters(base, 3);
    randomize(ad.params, 98, 0.2);
    ad.meta.base_hash = base.content_hash();
    Rng rng(3);
    const auto tokens = random_tokens(rng, 9, c.vocab);
    BoundModel m(base, &ad);
    const auto got = m.logits(tokens);
    const auto ref = reference_forward(c, base.params, &ad.params, tokens);
    double worst = 0;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        for (std::size_t v = 0; v < c.vocab; ++v) worst = std::max(worst, std::abs(got(t, v) - ref[t][v]));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Forward, BatchedEqualsUnbatched) {
    auto c = tiny_config();
    auto base = init_base(c);
    BoundModel m(base, nullptr);
    Rng rng(2);
    auto tokens = random_tokens(rng, 3 * 8, c.vocab);
    auto all = m.logits(tokens, 3, 8);
    for (std::size_t b = 0; b < 3; ++b) {
        auto one = m.logits(std::span<const std::uint32_t>(tokens).subspan(b * 8, 8));
        for (std::size_t r = 0; r < 8; ++r) {
            for (std::size_t v = 0; v < c.vocab; ++v) ASSERT_EQ(one(r, v), all(b * 8 + r, v));
        }
    }
}

TEST(Forward, RejectsOverlongInput) {
    auto c = tiny_config();
    BoundModel m(init_base(c), nullptr);
    std::vector<std::uint32_t> tokens(c.context + 1, 1);
    EXPECT_THROW(m.logits(tokens), DimensionError);
}

namespace {

template <class T>
GradCheckResult lm_gradcheck(GradCheckOptions opt) {
    ModelConfig c;
    c.layers = 1;
    c.d_model = 8;
    c.heads = 2;
    c.context = 8;
    c.vocab = 256;
    c.bottleneck = 4;
    auto base = init_base(c);
    randomize(base.params, 5, 0.3);
    auto ad = attach_adapters(base, 1);
    randomize(ad.params, 6, 0.3);
    auto vars = ModelVars<T>::bind(c, base.params, &ad.params, true, true);
    Rng rng(11);
    const auto tokens = random_tokens(rng, 9, c.vocab);
    std::span<const std::uint32_t> in(tokens.data(), 8), tgt(tokens.data() + 1, 8);
    auto loss = [&] { return ad::cross_entropy_mean(forward(vars, in, 1, 8), tgt); };
    return finite_diff_check<T>(loss, vars.trainable, opt);
}

}  // namespace

TEST(GradCheck, OneLayerLanguageModelFloat) {
    auto r = lm_gradcheck<float>({.step = 1e-2, .probes = 200, .seed = 3, .order = 4});
    EXPECT_LT(r.max_rel_error, 1e-2) << "param " << r.worst_param << " idx " << r.worst_index;
}

TEST(GradCheck, OneLayerLanguageModelDouble) {
    auto r = lm_gradcheck<double>({.step = 1e-5, .probes = 200, .seed = 3});
    EXPECT_LT(r.max_rel_error, 1e-6) << "param " << r.worst_param << " idx " << r.worst_index;
}

TEST(Checkpoint, BaseAndAdapterRoundTrip) {
    auto c = tiny_config();
    auto base = init_base(c, "tok-fp");
    auto bytes = encode_checkpoint(base);
    auto back = decode_base_checkpoint(bytes);
    EXPECT_EQ(encode_checkpoint(back), bytes);
    EXPECT_EQ(back.content_hash(), base.content_hash());

    auto ad = attach_adapters(base, 4);
    randomize(ad.params, 3, 0.1);
    ad.meta.domain = "news";
    ad.meta.final_train_loss = 2.0 / 3.0;
    ad.meta.hyper.lr = 7e-3;
    ad.meta.provenance["note"] = "x";
    auto abytes = encode_checkpoint(ad);
    auto aback = decode_adapter_checkpoint(abytes);
    EXPECT_EQ(encode_checkpoint(aback), abytes);
    EXPECT_EQ(aback.meta.final_train_loss, ad.meta.final_train_loss);
    EXPECT_EQ(aback.params, ad.params);
}

TEST(Checkpoint, CorruptionRejected) {
    auto base = init_base(tiny_config());
    auto bytes = encode_checkpoint(base);
    auto bad = bytes;
    bad[0] = std::byte{'Z'};
    EXPECT_THROW(decode_base_checkpoint(bad), FormatError);
    auto trunc = bytes;
    trunc.resize(bytes.size() - 3);
    EXPECT_THROW(decode_base_checkpoint(trunc), FormatError);
    auto ver = bytes;
    ver[8] = std::byte{9};
    EXPECT_THROW(decode_base_checkpoint(ver), FormatError);
    EXPECT_THROW(decode_adapter_checkpoint(bytes), FormatError);
    auto tiny = bytes;
    tiny.resize(10);
    EXPECT_THROW(decode_base_checkpoint(tiny), FormatError);
    auto payload = bytes;
    payload[payload.size() - 80] ^= std::byte{0x40};  // a float in the last tensor
    EXPECT_THROW(decode_base_checkpoint(payload), FormatError);
}

TEST(Checkpoint, AdapterAgainstOtherBaseIsIncompatible) {
    auto c = tiny_config();
    auto base = init_base(c);
    auto c2 = c;
    c2.base_seed = 42;
    auto other = init_base(c2);
    auto ad = attach_adapters(base, 1);
    EXPECT_NO_THROW(BoundModel(base, &ad));
    EXPECT_THROW(BoundModel(other, &ad), CompatibilityError);
}
