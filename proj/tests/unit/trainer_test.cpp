#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "soupkit/binary_io.hpp"
#include "soupkit/error.hpp"
#include "soupkit/trainer.hpp"

using namespace soup;
namespace fs = std::filesystem;

namespace {

struct World {
    Tokenizer tok;
    std::vector<DomainCorpus> corpora;
    BaseModel base;
};

const World& world() {
    static const World w = [] {
        World w;
        std::vector<SyntheticDomainSpec> specs;
        std::vector<std::string> texts;
        for (std::uint32_t t = 0; t < 4; ++t) {
            SyntheticDomainSpec s;
            s.name = "dom" + std::to_string(t);
            s.seed = 10 + t;
            s.profile = topic_profile(s.world.topics, std::vector<std::uint32_t>{t});
            s.split_tokens = {3000, 600, 600};
            texts.push_back(synthetic_text(s, Split::kTrain, 4000));
            specs.push_back(s);
        }
        w.tok = Tokenizer::train(texts, 300);
        for (const auto& s : specs) w.corpora.push_back(generate_synthetic_domain(s, w.tok));
        ModelConfig c;
        c.layers = 1;
        c.d_model = 16;
        c.heads = 2;
        c.context = 16;
        c.vocab = 300;
        c.bottleneck = 4;
        w.base = init_base(c, w.tok.fingerprint());
        return w;
    }();
    return w;
}

TrainConfig quick_phi() {
    TrainConfig phi;
    phi.lr = 5e-3;
    phi.batch_size = 4;
    phi.grad_accum = 2;
    phi.max_steps = 6;
    phi.finite_checks = true;
    return phi;
}

}  // namespace

TEST(Trainer, PlannedSteps) {
    TrainConfig phi;
    phi.batch_size = 4;
    phi.grad_accum = 2;
    phi.epochs = 3;
    phi.max_steps = 0;
    EXPECT_EQ(planned_steps(phi, 17), 3u * 3u);
    phi.max_steps = 5;
    EXPECT_EQ(planned_steps(phi, 17), 5u);
    EXPECT_EQ(window_count(33, 16), 2u);
    EXPECT_EQ(window_count(32, 16), 1u);
    EXPECT_EQ(window_count(16, 16), 0u);
}

TEST(Trainer, BaseFrozenAndMetadataRecorded) {
    const auto& w = world();
    const auto before = w.base.content_hash();
    const auto phi = quick_phi();
    auto a = train_adapter(w.base, w.corpora[0], phi, 7);
    EXPECT_EQ(w.base.content_hash(), before);
    EXPECT_EQ(a.meta.domain, "dom0");
    EXPECT_EQ(a.meta.hyper, phi);
    EXPECT_EQ(a.meta.adapter_init_seed, 7u);
    EXPECT_EQ(a.meta.base_hash, before);
    EXPECT_TRUE(std::isfinite(a.meta.final_train_loss));
    EXPECT_NE(a.params, attach_adapters(w.base, 7).params);
}

TEST(Trainer, IdenticalInputsIdenticalCheckpoints) {
    const auto& w = world();
    auto a = train_adapter(w.base, w.corpora[1], quick_phi(), 3);
    auto b = train_adapter(w.base, w.corpora[1], quick_phi(), 3);
    EXPECT_EQ(encode_checkpoint(a), encode_checkpoint(b));
    auto phi = quick_phi();
    phi.data_seed = 2;
    EXPECT_NE(encode_checkpoint(train_adapter(w.base, w.corpora[1], phi, 3)), encode_checkpoint(a));
}

TEST(Trainer, LossDecreasesOnLongerRun) {
    const auto& w = world();
    auto phi = quick_phi();
    phi.max_steps = 60;
    phi.lr = 1e-2;
    std::vector<double> losses;
    train_adapter(w.base, w.corpora[2], phi, 1, [&](std::uint64_t, double l) { losses.push_back(l); });
    ASSERT_EQ(losses.size(), 60u);
    double head = 0, tail = 0;
    for (int i = 0; i < 10; ++i) {
        head += losses[i];
        tail += losses[50 + i];
    }
    EXPECT_LT(tail, head);
}

TEST(Trainer, DivergenceNamesStep) {
    const auto& w = world();
    auto phi = quick_phi();
    phi.lr = 1e38;
    phi.finite_checks = false;
    try {
        train_adapter(w.base, w.corpora[0], phi, 1);
        FAIL() << "expected a training error";
    } catch (const TrainingError& e) {
        EXPECT_LT(e.step(), phi.max_steps);
        EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
        EXPECT_EQ(e.code(), ExitCode::kTraining);
    }
}

TEST(Trainer, InvalidConfig) {
    auto phi = quick_phi();
    phi.lr = 0;
    EXPECT_THROW(phi.validate(), ConfigError);
    phi = quick_phi();
    phi.epochs = 0;
    EXPECT_THROW(phi.validate(), ConfigError);
}

TEST(Sweep, DefaultGridGivesFifteenSharingSeedAndBase) {
    const auto& w = world();
    auto phi = quick_phi();
    phi.max_steps = 1;
    phi.grad_accum = 1;
    auto outs = run_sweep(w.base, w.corpora[0], kSweepLrGrid, kSweepSeeds, 5, phi);
    ASSERT_EQ(outs.size(), 15u);
    const auto hash = w.base.content_hash();
    for (const auto& o : outs) {
        ASSERT_TRUE(o.ok()) << o.error;
        EXPECT_EQ(o.weights->meta.adapter_init_seed, 5u);
        EXPECT_EQ(o.weights->meta.base_hash, hash);
    }
    EXPECT_EQ(outs.front().weights->meta.hyper.lr, 7e-3);
    EXPECT_EQ(outs.back().weights->meta.hyper.lr, 1e-4);
    EXPECT_THROW(run_sweep(w.base, w.corpora[0], std::span<const double>(), kSweepSeeds, 5, phi), ConfigError);
}

TEST(TrainAll, WorkerCountDoesNotChangeRegistry) {
    const auto& w = world();
    std::vector<TrainJob> jobs;
    for (const auto& c : w.corpora) jobs.push_back({c.name(), &c, {}, 0});
    Registry r1, r4;
    auto o1 = train_all_domains(w.base, jobs, quick_phi(), 9, 1);
    auto o4 = train_all_domains(w.base, jobs, quick_phi(), 9, 4);
    register_outcomes(r1, o1);
    register_outcomes(r4, o4);
    EXPECT_EQ(r1.size(), jobs.size());
    EXPECT_EQ(r1.checksum(), r4.checksum());
}

TEST(TrainAll, MissingCorpusFailsAlone) {
    const auto& w = world();
    std::vector<TrainJob> jobs;
    for (const auto& c : w.corpora) jobs.push_back({c.name(), &c, {}, 0});
    jobs.push_back({"ghost", nullptr, {}, 0});
    auto outs = train_all_domains(w.base, jobs, quick_phi(), 9, 2);
    ASSERT_EQ(outs.size(), 5u);
    for (int i = 0; i < 4; ++i) EXPECT_TRUE(outs[i].ok());
    EXPECT_FALSE(outs[4].ok());
    EXPECT_EQ(outs[4].code, ExitCode::kData);
    EXPECT_NE(outs[4].error.find("ghost"), std::string::npos);
}

TEST(Registry, PersistsAndReloads) {
    const auto& w = world();
    auto dir = fs::temp_directory_path() / ("soupkit_reg_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    std::string id, checksum;
    {
        auto reg = Registry::open(dir);
        auto a = train_adapter(w.base, w.corpora[0], quick_phi(), 1);
        id = reg.add(a);
        EXPECT_EQ(reg.add(a), id);
        EXPECT_EQ(reg.size(), 1u);
        checksum = reg.checksum();
        EXPECT_TRUE(reg.find_job("dom0", quick_phi(), 1, w.base.content_hash()).has_value());
        EXPECT_FALSE(reg.find_job("dom0", quick_phi(), 2, w.base.content_hash()).has_value());
        EXPECT_EQ(reg.resolve(id.substr(0, 10)), id);
        EXPECT_EQ(reg.resolve(Registry::alias_for(a, id)), id);
    }
    auto again = Registry::open(dir);
    EXPECT_EQ(again.checksum(), checksum);
    EXPECT_EQ(again.get(id).id(), id);
    EXPECT_TRUE(fs::exists(dir / "index.jsonl"));
    EXPECT_THROW(again.resolve("nope"), ConfigError);
    fs::remove_all(dir);
}

TEST(Pretrain, ReducesLossAndIsDeterministic) {
    const auto& w = world();
    std::vector<const DomainCorpus*> ptrs;
    for (const auto& c : w.corpora) ptrs.push_back(&c);
    PretrainConfig pc;
    pc.steps = 30;
    pc.batch_size = 4;
    double l1 = 0, l2 = 0;
    auto b1 = pretrain_base(w.base, ptrs, pc, &l1);
    auto b2 = pretrain_base(w.base, ptrs, pc, &l2);
    EXPECT_EQ(b1.content_hash(), b2.content_hash());
    EXPECT_NE(b1.content_hash(), w.base.content_hash());
    EXPECT_LT(l1, std::log(300.0));
}
