#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "soupkit/binary_io.hpp"
#include "soupkit/error.hpp"
#include "soupkit/evalkit.hpp"
#include "soupkit/kernels.hpp"
#include "soupkit/rng.hpp"
#include "soupkit/trainer.hpp"

using namespace soup;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny(std::uint32_t vocab, std::uint32_t context = 8) {
    ModelConfig c;
    c.layers = 1;
    c.d_model = 8;
    c.heads = 2;
    c.context = context;
    c.vocab = vocab;
    c.bottleneck = 2;
    return c;
}

DomainCorpus ramp_corpus(const std::string& name, std::uint32_t vocab, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::array<std::vector<std::uint32_t>, 3> s;
    for (auto& split : s) {
        for (std::size_t i = 0; i < n; ++i) split.push_back(static_cast<std::uint32_t>(rng.below(vocab)));
    }
    return DomainCorpus(name, DomainRole::kTraining, vocab, s);
}

AdapterWeights noisy_adapter(const BaseModel& base, std::uint64_t seed, float scale = 0.3f) {
    auto a = attach_adapters(base, 1);
    Rng rng(seed);
    for (auto& p : a.params) {
        for (auto& v : p.value.data()) v += scale * static_cast<float>(rng.normal());
    }
    return a;
}

double log_softmax_nats(std::span<const double> logits, std::uint32_t target) {
    double mx = -1e300;
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    return mx + std::log(z) - logits[target];
}

struct World {
    Tokenizer tok;
    std::vector<DomainCorpus> train, novel;
    BaseModel base;
    Registry registry;
};

World& world() {
    static World w = [] {
        World w;
        std::vector<SyntheticDomainSpec> specs;
        std::vector<std::string> texts;
        for (std::uint32_t t = 0; t < 4; ++t) {
            SyntheticDomainSpec s;
            s.name = "dom" + std::to_string(t);
            s.seed = 30 + t;
            s.profile = topic_profile(s.world.topics, std::vector<std::uint32_t>{t});
            s.split_tokens = {2000, 400, 300};
            texts.push_back(synthetic_text(s, Split::kTrain, 4000));
            specs.push_back(s);
        }
        w.tok = Tokenizer::train(texts, 300);
        for (const auto& s : specs) w.train.push_back(generate_synthetic_domain(s, w.tok));
        for (std::uint32_t t = 0; t < 2; ++t) {
            SyntheticDomainSpec s;
            s.name = "novel" + std::to_string(t);
            s.role = DomainRole::kNovel;
            s.seed = 80 + t;
            s.profile = topic_profile(s.world.topics, std::vector<std::uint32_t>{t, t + 2});
            s.split_tokens = {200, 400, 300};
            w.novel.push_back(generate_synthetic_domain(s, w.tok));
        }
        auto c = tiny(300, 16);
        c.d_model = 16;
        c.bottleneck = 4;
        w.base = init_base(c, w.tok.fingerprint());
        TrainConfig phi;
        phi.lr = 1e-2;
        phi.batch_size = 4;
        phi.grad_accum = 1;
        phi.max_steps = 8;
        std::vector<TrainJob> jobs;
        for (const auto& d : w.train) jobs.push_back({d.name(), &d, phi, 1});
        register_outcomes(w.registry, train_all_domains(w.base, jobs, phi, 1));
        return w;
    }();
    return w;
}

}  // namespace

TEST(Perplexity, UniformLogitsGiveVocabSize) {
    auto base = init_base(tiny(2048));
    for (auto& p : base.params) {
        if (p.name == "head.w" || p.name == "head.b") p.value.fill(0.0f);
    }
    auto corpus = ramp_corpus("u", 2048, 100, 1);
    auto r = perplexity(base, nullptr, corpus);
    EXPECT_NEAR(r.ppl, 2048.0, 1.0);
    EXPECT_EQ(r.predicted, 99u);
}

TEST(Perplexity, MatchesPerWindowOracle) {
    auto base = init_base(tiny(256));
    auto a = noisy_adapter(base, 3);
    auto corpus = ramp_corpus("c", 256, 29, 2);
    EvalOptions opt;
    opt.batch = 3;
    auto r = perplexity(base, &a, corpus, Split::kTest, opt);

    // Oracle: every window scored alone, start k*8, predicting up to 8 tokens.
    BoundModel m(base, &a);
    const auto toks = corpus.raw(Split::kTest);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start + 1 < toks.size(); start += 8) {
        const std::size_t len = std::min<std::size_t>(8, toks.size() - 1 - start);
        std::vector<std::uint32_t> in(toks.begin() + start, toks.begin() + start + len);
        auto logits = m.logits(in, 1, len);
        for (std::size_t t = 0; t < len; ++t) {
            std::vector<double> row(logits.row(t).begin(), logits.row(t).end());
            total += log_softmax_nats(row, toks[start + t + 1]);
            ++count;
        }
    }
    EXPECT_EQ(r.predicted, count);
    EXPECT_EQ(count, 28u);
    EXPECT_NEAR(r.nats, total / count, 1e-9);
    EXPECT_EQ(r.ppl, std::exp(r.nats));
}

TEST(Perplexity, DeterministicAndBatchInvariant) {
    auto base = init_base(tiny(256));
    auto corpus = ramp_corpus("c", 256, 200, 4);
    EvalOptions one;
    one.batch = 1;
    auto a = perplexity(base, nullptr, corpus);
    auto b = perplexity(base, nullptr, corpus);
    auto c = perplexity(base, nullptr, corpus, Split::kTest, one);
    EXPECT_EQ(a.nats, b.nats);
    EXPECT_NEAR(a.nats, c.nats, 1e-6);
}

TEST(Perplexity, OverfitMemorizedCorpus) {
    auto cfg = tiny(256, 10);
    cfg.d_model = 16;
    auto base = init_base(cfg);
    const std::vector<std::uint32_t> pattern{3, 1, 4, 15, 9, 2, 6, 5, 8, 7};
    std::array<std::vector<std::uint32_t>, 3> s;
    for (int i = 0; i < 40; ++i) s[0].insert(s[0].end(), pattern.begin(), pattern.end());
    s[2] = pattern;
    DomainCorpus corpus("memo", DomainRole::kTraining, 256, s);
    PretrainConfig pc;
    pc.lr = 1e-2;
    pc.steps = 300;
    pc.batch_size = 8;
    const DomainCorpus* list[] = {&corpus};
    auto trained = pretrain_base(base, list, pc);
    EXPECT_LT(perplexity(trained, nullptr, corpus).ppl, 1.5);
}

TEST(Perplexity, EmptySplitAndAccessPolicy) {
    std::array<std::vector<std::uint32_t>, 3> s{std::vector<std::uint32_t>{1, 2, 3}, {1, 2}, {}};
    DomainCorpus corpus("e", DomainRole::kTraining, 256, s);
    auto base = init_base(tiny(256));
    EXPECT_THROW(perplexity(base, nullptr, corpus), DataError);
    EXPECT_NO_THROW(perplexity(base, nullptr, corpus, Split::kHeldOut));
    const auto recs = corpus.access_log()->records();
    ASSERT_FALSE(recs.empty());
    EXPECT_EQ(recs.back().purpose, Purpose::kValidation);
}

TEST(Ensemble, IdenticalMembersMatchSingle) {
    auto base = init_base(tiny(256));
    auto a = noisy_adapter(base, 5);
    auto corpus = ramp_corpus("c", 256, 120, 6);
    const AdapterWeights* three[] = {&a, &a, &a};
    const double single = perplexity(base, &a, corpus).ppl;
    EXPECT_NEAR(logit_ensemble_perplexity(base, three, corpus).ppl, single, 1e-6 * single);
    EXPECT_NEAR(logit_ensemble_perplexity(base, three, corpus, Split::kTest, {}, EnsembleMode::kProbabilities).ppl,
                single, 1e-6 * single);
}

TEST(Ensemble, MatchesHandAveragedLogits) {
    auto base = init_base(tiny(256));
    auto a = noisy_adapter(base, 7, 1.0f);
    auto b = noisy_adapter(base, 8, 1.0f);
    auto corpus = ramp_corpus("c", 256, 9, 9);
    const AdapterWeights* two[] = {&a, &b};
    auto r = logit_ensemble_perplexity(base, two, corpus);
    auto p = logit_ensemble_perplexity(base, two, corpus, Split::kTest, {}, EnsembleMode::kProbabilities);

    BoundModel ma(base, &a), mb(base, &b);
    const auto toks = corpus.raw(Split::kTest);
    std::vector<std::uint32_t> in(toks.begin(), toks.begin() + 8);
    auto la = ma.logits(in, 1, 8), lb = mb.logits(in, 1, 8);
    double nats = 0.0, pn = 0.0;
    for (std::size_t t = 0; t < 8; ++t) {
        std::vector<double> avg(256), ra(256), rb(256);
        for (std::size_t v = 0; v < 256; ++v) {
            ra[v] = la(t, v);
            rb[v] = lb(t, v);
            avg[v] = 0.5 * (ra[v] + rb[v]);
        }
        nats += log_softmax_nats(avg, toks[t + 1]);
        pn -= std::log(0.5 * (std::exp(-log_softmax_nats(ra, toks[t + 1])) +
                              std::exp(-log_softmax_nats(rb, toks[t + 1]))));
    }
    EXPECT_NEAR(r.nats, nats / 8, 1e-5);
    EXPECT_NEAR(p.nats, pn / 8, 1e-5);
}

TEST(Ensemble, CostScalesWithMembers) {
    auto base = init_base(tiny(256));
    auto a = noisy_adapter(base, 1), b = noisy_adapter(base, 2), c = noisy_adapter(base, 3);
    auto corpus = ramp_corpus("c", 256, 200, 6);
    const AdapterWeights* three[] = {&a, &b, &c};
    const auto single = perplexity(base, &a, corpus).flops;
    const auto ens = logit_ensemble_perplexity(base, three, corpus).flops;
    ASSERT_GT(single, 0u);
    EXPECT_NEAR(static_cast<double>(ens) / static_cast<double>(single), 3.0, 0.6);
}

TEST(Ensemble, RejectsTooFewOrIncompatible) {
    auto base = init_base(tiny(256));
    auto a = noisy_adapter(base, 1);
    auto corpus = ramp_corpus("c", 256, 50, 6);
    const AdapterWeights* one[] = {&a};
    EXPECT_THROW(logit_ensemble_perplexity(base, one, corpus), ConfigError);
    auto other = init_base(tiny(256, 16));
    auto b = attach_adapters(other, 1);
    const AdapterWeights* mixed[] = {&a, &b};
    EXPECT_THROW(logit_ensemble_perplexity(base, mixed, corpus), CompatibilityError);
}

namespace {

EvalCell make_cell(double ppl, double nats) {
    EvalCell c;
    c.ppl = ppl;
    c.nats = nats;
    return c;
}

EvalReport sample_report() {
    EvalReport r("t", {"zero-shot", "soup,\"quoted\"", "missing"}, {"a", "b", "c"});
    double v = 1.0;
    for (const auto& m : {"zero-shot", "soup,\"quoted\""}) {
        for (const auto& d : {"a", "b", "c"}) {
            EvalCell c;
            c.nats = (v += 0.37);
            c.ppl = std::exp(c.nats);
            c.model = "m";
            r.set(m, d, c);
        }
    }
    EvalCell c;
    c.nats = 2.0;
    c.ppl = std::exp(2.0);
    r.set("missing", "a", c);
    r.metadata["seed"] = 3;
    return r;
}

}  // namespace

TEST(Report, CsvRoundTripAndAverage) {
    const auto r = sample_report();
    const auto m = parse_report_csv(report_csv(r));
    EXPECT_EQ(m.methods, r.methods);
    ASSERT_EQ(m.columns.size(), 4u);
    EXPECT_EQ(m.columns.back(), "Avg");
    for (std::size_t i = 0; i < r.methods.size(); ++i) {
        double sum = 0.0;
        bool full = true;
        for (std::size_t d = 0; d < 3; ++d) {
            const auto& cell = r.cells[i][d];
            ASSERT_EQ(m.values[i][d].has_value(), cell.has_value());
            if (cell) {
                EXPECT_EQ(*m.values[i][d], cell->ppl);
                sum += cell->ppl;
            } else {
                full = false;
            }
        }
        ASSERT_EQ(m.values[i][3].has_value(), full);
        if (full) {
            EXPECT_NEAR(*m.values[i][3], sum / 3, 0.05);
        }
    }
}

TEST(Report, LongFormAndJson) {
    const auto r = sample_report();
    const auto rows = parse_csv(report_long_csv(r));
    EXPECT_EQ(rows.size(), 1u + 7u);
    EvalReport full("f", {"x", "y"}, {"a", "b", "c"});
    for (const auto& m : full.methods) {
        for (const auto& d : full.domains) full.set(m, d, make_cell(std::exp(1.5), 1.5));
    }
    EXPECT_EQ(parse_csv(report_long_csv(full)).size(), 1u + 2u * 3u);

    auto back = report_from_json(nlohmann::json::parse(to_json(r).dump()));
    EXPECT_EQ(back.methods, r.methods);
    EXPECT_EQ(report_csv(back), report_csv(r));
    EXPECT_EQ(back.metadata["seed"], 3);
}

TEST(Report, RejectsInconsistentCellsAndBadCsv) {
    EvalReport r("t", {"m"}, {"d"});
    EXPECT_THROW(r.set("m", "d", make_cell(10.0, 1.0)), NumericError);
    EXPECT_THROW(r.set("nope", "d", make_cell(std::exp(1.0), 1.0)), IndexError);
    EXPECT_THROW(EvalReport("t", {"m", "m"}, {"d"}), ConfigError);
    EXPECT_THROW(parse_report_csv("method,a\r\nx,1,2\r\n"), FormatError);
    EXPECT_THROW(parse_report_csv("method,a\r\nx,abc\r\n"), FormatError);
    EXPECT_THROW(parse_csv("\"open"), FormatError);
}

TEST(Report, EmitWritesAllFormats) {
    const auto dir = fs::temp_directory_path() / ("soupkit_eval_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    const auto paths = emit_report(sample_report(), dir / "r");
    ASSERT_EQ(paths.size(), 3u);
    for (const auto& p : paths) EXPECT_TRUE(fs::exists(p));
    EXPECT_EQ(io::read_text(dir / "r.csv"), report_csv(sample_report()));
    fs::remove_all(dir);
    EXPECT_THROW(emit_report(sample_report(), fs::path("/proc/definitely/not/here/r")), IoError);
}

TEST(Cost, RatiosAndArithmetic) {
    auto c = cost_estimate(12, 768, 64, 8);
    EXPECT_EQ(c.adapter_train_flops, 2359296u);
    EXPECT_EQ(c.adapter_inference_flops, 2359296u);
    EXPECT_EQ(c.train_ratio, (Ratio{8, 1}));
    EXPECT_EQ(c.inference_ratio, (Ratio{16, 1}));
    auto one = cost_estimate(2, 4, 3, 1);
    EXPECT_EQ(one.train_ratio, (Ratio{1, 1}));
    EXPECT_EQ(one.inference_ratio, (Ratio{2, 1}));
    for (std::int64_t T = 1; T <= 20; ++T) {
        auto e = cost_estimate(3, 5, 7, T);
        EXPECT_EQ(e.hierarchy_train_flops, e.adapter_train_flops * static_cast<std::uint64_t>(T));
        EXPECT_EQ(e.train_ratio, (Ratio{static_cast<std::uint64_t>(T), 1}));
        EXPECT_EQ(e.inference_ratio, (Ratio{static_cast<std::uint64_t>(2 * T), 1}));
    }
    EXPECT_THROW(cost_estimate(0, 768, 64, 8), ConfigError);
    EXPECT_THROW(cost_estimate(12, 768, 64, -1), ConfigError);
}

TEST(CrossDomain, ShapeOracleAndSplitHygiene) {
    auto& w = world();
    CrossDomainSetup s;
    s.base = &w.base;
    s.registry = &w.registry;
    for (const auto& c : w.train) s.training.push_back(&c);
    for (const auto& c : w.novel) s.novel.push_back(&c);
    s.selection.n_sequences = 12;
    s.selection.gmm.pca_max_dims = 4;
    s.eval.workers = 2;
    auto r = run_cross_domain_experiment(s);
    EXPECT_EQ(r.methods, kCrossDomainMethods);
    EXPECT_EQ(r.domains, (std::vector<std::string>{"novel0", "novel1"}));
    EXPECT_TRUE(r.complete());
    const auto adapters = domain_adapters(w.registry);
    for (const auto& d : r.domains) {
        const double oracle = r.at("oracle:best-single", d)->ppl;
        for (const auto& [dom, id] : adapters) {
            EXPECT_LE(oracle, perplexity(w.base, &w.registry.get(id), *s.novel[r.domain_index(d)]).ppl);
        }
        EXPECT_LE(r.at("oracle:cluster+2", d)->ppl, r.at("soup:cluster", d)->ppl * 10);
        const auto& access = r.metadata["novel_access"][d];
        for (const auto& [k, v] : access.items()) {
            EXPECT_TRUE(k == "heldout/selection" || k == "test/evaluation") << k;
        }
    }
    EXPECT_EQ(parse_report_csv(report_csv(r)).methods.size(), 8u);
}

TEST(CrossDomain, MissingAdapterMarksCellsAbsent) {
    auto& w = world();
    SyntheticDomainSpec extra;
    extra.name = "orphan";
    extra.seed = 99;
    extra.profile = topic_profile(extra.world.topics, std::vector<std::uint32_t>{5});
    extra.split_tokens = {2000, 400, 300};
    auto orphan = generate_synthetic_domain(extra, w.tok);
    CrossDomainSetup s;
    s.base = &w.base;
    s.registry = &w.registry;
    for (const auto& c : w.train) s.training.push_back(&c);
    s.training.push_back(&orphan);
    s.novel.push_back(&w.novel[0]);
    s.methods = {"zero-shot", "soup:uniform", "oracle:best-single"};
    s.selection.n_sequences = 12;
    s.selection.gmm.pca_max_dims = 4;
    auto r = run_cross_domain_experiment(s);
    EXPECT_TRUE(r.at("zero-shot", "novel0").has_value());
    EXPECT_FALSE(r.at("soup:uniform", "novel0").has_value());
    EXPECT_TRUE(r.at("oracle:best-single", "novel0").has_value());
    EXPECT_EQ(r.metadata["missing_adapters"].get<std::vector<std::string>>(), std::vector<std::string>{"orphan"});
}

TEST(SingleDomain, EnumeratesRecipesAndRows) {
    auto& w = world();
    const auto& corpus = w.train[0];
    TrainConfig phi;
    phi.batch_size = 4;
    phi.grad_accum = 1;
    phi.max_steps = 4;
    const double lrs[] = {2e-2, 1e-3};
    const std::uint64_t seeds[] = {1, 2, 3};
    Registry reg;
    auto ids = register_outcomes(reg, run_sweep(w.base, corpus, lrs, seeds, 1, phi));
    SingleDomainSetup s;
    s.base = &w.base;
    s.registry = &reg;
    s.checkpoint_ids = ids;
    s.in_domain = &corpus;
    s.ood = {&w.train[1], &w.train[2]};
    auto r = run_single_domain_experiment(s);
    EXPECT_EQ(r.metadata["recipe_count"], 20);
    EXPECT_EQ(r.metadata["recipes"].size(), 20u);
    EXPECT_TRUE(r.complete());
    EXPECT_LE(r.at("soup:best-in-domain", corpus.name())->ppl, r.at("soup:uniform-all", corpus.name())->ppl);
    EXPECT_LE(r.at("single:best", corpus.name())->ppl, r.at("single:lr=0.001,seed=2", corpus.name())->ppl);
    EXPECT_NO_THROW(r.method_index("soup:lr=0.02"));
    EXPECT_NO_THROW(r.method_index("soup:lr=0.001"));
    EXPECT_TRUE(r.metadata["trend"].contains("in_domain_low_lr_better"));
    double best = 1e300;
    for (const auto& rec : r.metadata["recipes"]) best = std::min(best, rec["in_domain_ppl"].get<double>());
    EXPECT_LE(r.at("soup:best-in-domain", corpus.name())->ppl, best * (1 + 1e-12));

    s.checkpoint_ids.resize(2);
    EXPECT_THROW(run_single_domain_experiment(s), ConfigError);
}

TEST(SingleDomain, DefaultGridEnumerates455) {
    std::vector<std::string> ids;
    for (double lr : kSweepLrGrid) {
        for (auto seed : kSweepSeeds) ids.push_back(lr_label(lr) + "/" + std::to_string(seed));
    }
    EXPECT_EQ(ids.size(), 15u);
    EXPECT_EQ(exhaustive_combos(ids).size(), 455u);
}
