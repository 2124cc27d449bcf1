#include "soupkit/trainer.hpp"

#include <cmath>
#include <numeric>

#include "soupkit/autodiff.hpp"
#include "soupkit/optim.hpp"
#include "soupkit/parallel.hpp"
#include "soupkit/rng.hpp"

namespace soup {

std::size_t window_count(std::size_t tokens, std::size_t seq_len) {
    return tokens > seq_len ? (tokens - 1) / seq_len : 0;
}

std::uint64_t planned_steps(const TrainConfig& phi, std::size_t windows) {
    const std::size_t per_step = static_cast<std::size_t>(phi.batch_size) * phi.grad_accum;
    const std::uint64_t per_epoch = std::max<std::uint64_t>(1, (windows + per_step - 1) / per_step);
    const std::uint64_t full = per_epoch * phi.epochs;
    return phi.max_steps > 0 ? std::min(full, phi.max_steps) : full;
}

namespace {

// Cycles through shuffled window indices, reshuffling at every epoch boundary.
class WindowOrder {
public:
    WindowOrder(std::size_t windows, std::uint64_t seed) : order_(windows), seed_(seed) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        reshuffle();
    }
    std::size_t next() {
        if (cursor_ == order_.size()) {
            ++epoch_;
            reshuffle();
        }
        return order_[cursor_++];
    }

private:
    void reshuffle() {
        Rng rng(Rng::derive(seed_, 0x65706F63ULL, epoch_));
        rng.shuffle(order_);
        cursor_ = 0;
    }
    std::vector<std::size_t> order_;
    std::uint64_t seed_;
    std::uint64_t epoch_ = 0;
    std::size_t cursor_ = 0;
};

void fill_window(std::span<const std::uint32_t> tokens, std::size_t start, std::size_t seq,
                 std::vector<std::uint32_t>& in, std::vector<std::uint32_t>& tgt) {
    in.insert(in.end(), tokens.begin() + static_cast<std::ptrdiff_t>(start),
              tokens.begin() + static_cast<std::ptrdiff_t>(start + seq));
    tgt.insert(tgt.end(), tokens.begin() + static_cast<std::ptrdiff_t>(start + 1),
               tokens.begin() + static_cast<std::ptrdiff_t>(start + seq + 1));
}

double lr_at(const TrainConfig& phi, std::uint64_t step, std::uint64_t total) {
    if (phi.schedule == LrSchedule::kConstant || total == 0) return phi.lr;
    return phi.lr * (1.0 - static_cast<double>(step) / static_cast<double>(total));
}

}  // namespace

AdapterWeights train_adapter(const BaseModel& base, const DomainCorpus& corpus, const TrainConfig& phi,
                             std::uint64_t adapter_init_seed, const StepCallback& on_step) {
    phi.validate();
    const ad::ScopedFiniteChecks checks(phi.finite_checks);
    const std::size_t seq = phi.seq_len ? phi.seq_len : base.config.context;
    if (seq > base.config.context) throw ConfigError("training sequence length exceeds model context");
    if (corpus.vocab_size() > base.config.vocab) {
        throw CompatibilityError("corpus vocab " + std::to_string(corpus.vocab_size()) + " exceeds model vocab");
    }
    const auto tokens = corpus.read(Split::kTrain, Purpose::kTraining);
    const std::size_t windows = window_count(tokens.size(), seq);
    if (windows == 0) throw DataError("domain " + corpus.name() + ": train split too short for one window");

    AdapterWeights adapters = attach_adapters(base, adapter_init_seed);
    adapters.meta.domain = corpus.name();
    adapters.meta.hyper = phi;

    auto vars = ModelVars<float>::bind(base.config, base.params, &adapters.params, false, true);
    Adam<float> opt(vars.trainable, AdamHyper{phi.lr});
    WindowOrder order(windows, phi.data_seed);
    const std::uint64_t total = planned_steps(phi, windows);
    const float inv_accum = 1.0f / static_cast<float>(phi.grad_accum);

    std::vector<std::uint32_t> in, tgt;
    double last_loss = 0.0;
    for (std::uint64_t step = 0; step < total; ++step) {
        opt.set_lr(lr_at(phi, step, total));
        double loss_sum = 0.0;
        for (std::uint32_t micro = 0; micro < phi.grad_accum; ++micro) {
            in.clear();
            tgt.clear();
            for (std::uint32_t b = 0; b < phi.batch_size; ++b) fill_window(tokens, order.next() * seq, seq, in, tgt);
            ad::Var<float> loss;
            try {
                loss = ad::cross_entropy_mean(forward(vars, in, phi.batch_size, seq), tgt);
            } catch (const NumericError& e) {
                throw TrainingError(std::string("non-finite value during training: ") + e.what(), step);
            }
            const double l = loss.value()[0];
            if (!std::isfinite(l)) {
                throw TrainingError("domain " + corpus.name() + ": loss diverged at step " + std::to_string(step),
                                    step);
            }
            loss_sum += l;
            ad::scale(loss, inv_accum).backward();
        }
        opt.step();
        opt.zero_grad();
        for (const auto& v : vars.trainable) {
            if (!v.value().all_finite()) {
                throw TrainingError("domain " + corpus.name() + ": parameters diverged at step " + std::to_string(step),
                                    step);
            }
        }
        last_loss = loss_sum / phi.grad_accum;
        if (on_step) on_step(step, last_loss);
    }
    vars.export_adapters(adapters.params);
    adapters.meta.final_train_loss = last_loss;
    return adapters;
}

nlohmann::ordered_json to_json(const PretrainConfig& c) {
    nlohmann::ordered_json j;
    j["lr"] = c.lr;
    j["steps"] = c.steps;
    j["batch_size"] = c.batch_size;
    j["seq_len"] = c.seq_len;
    j["seed"] = c.seed;
    return j;
}

BaseModel pretrain_base(BaseModel base, std::span<const DomainCorpus* const> corpora, const PretrainConfig& cfg,
                        double* final_loss) {
    if (corpora.empty()) throw ConfigError("base pretraining needs at least one corpus");
    if (!(cfg.lr > 0.0) || cfg.batch_size == 0) throw ConfigError("invalid pretraining config");
    const ad::ScopedFiniteChecks checks(cfg.finite_checks);
    const std::size_t seq = cfg.seq_len ? cfg.seq_len : base.config.context;
    if (seq > base.config.context) throw ConfigError("pretraining sequence length exceeds model context");

    std::vector<std::span<const std::uint32_t>> streams;
    std::vector<WindowOrder> orders;
    for (std::size_t d = 0; d < corpora.size(); ++d) {
        if (corpora[d] == nullptr) throw DataError("base pretraining: missing corpus");
        const auto tokens = corpora[d]->read(Split::kTrain, Purpose::kTraining);
        const auto windows = window_count(tokens.size(), seq);
        if (windows == 0) throw DataError("domain " + corpora[d]->name() + ": train split too short");
        streams.push_back(tokens);
        orders.emplace_back(windows, Rng::derive(cfg.seed, 0x70726574ULL, d));
    }

    auto vars = ModelVars<float>::bind(base.config, base.params, nullptr, true, false);
    Adam<float> opt(vars.trainable, AdamHyper{cfg.lr});
    std::vector<std::uint32_t> in, tgt;
    std::size_t domain_cursor = 0;
    double last = 0.0;
    for (std::uint64_t step = 0; step < cfg.steps; ++step) {
        in.clear();
        tgt.clear();
        for (std::uint32_t b = 0; b < cfg.batch_size; ++b) {
            const auto d = domain_cursor++ % streams.size();
            fill_window(streams[d], orders[d].next() * seq, seq, in, tgt);
        }
        auto loss = ad::cross_entropy_mean(forward(vars, in, cfg.batch_size, seq), tgt);
        last = loss.value()[0];
        if (!std::isfinite(last)) throw TrainingError("base pretraining diverged at step " + std::to_string(step), step);
        loss.backward();
        opt.step();
        opt.zero_grad();
    }
    vars.export_base(base.params);
    if (final_loss) *final_loss = last;
    return base;
}

std::vector<JobOutcome> run_jobs(const BaseModel& base, std::span<const TrainJob> jobs, std::size_t workers) {
    std::vector<JobOutcome> out(jobs.size());
    const auto base_hash = base.content_hash();
    parallel_for(jobs.size(), workers, [&](std::size_t i) {
        auto& o = out[i];
        o.job = jobs[i];
        try {
            if (jobs[i].corpus == nullptr) throw DataError("corpus for domain '" + jobs[i].domain + "' is missing");
            auto w = train_adapter(base, *jobs[i].corpus, jobs[i].hyper, jobs[i].adapter_init_seed);
            w.meta.base_hash = base_hash;
            o.weights = std::move(w);
        } catch (const Error& e) {
            o.error = e.what();
            o.code = e.code();
        } catch (const std::exception& e) {
            o.error = e.what();
            o.code = ExitCode::kTraining;
        }
    });
    return out;
}

std::vector<JobOutcome> run_sweep(const BaseModel& base, const DomainCorpus& corpus, std::span<const double> lr_grid,
                                  std::span<const std::uint64_t> data_seeds, std::uint64_t adapter_init_seed,
                                  const TrainConfig& base_phi, std::size_t workers) {
    if (lr_grid.empty()) throw ConfigError("sweep needs a nonempty learning-rate grid");
    if (data_seeds.empty()) throw ConfigError("sweep needs at least one data seed");
    std::vector<TrainJob> jobs;
    for (double lr : lr_grid) {
        for (auto seed : data_seeds) {
            TrainJob j{corpus.name(), &corpus, base_phi, adapter_init_seed};
            j.hyper.lr = lr;
            j.hyper.data_seed = seed;
            jobs.push_back(std::move(j));
        }
    }
    return run_jobs(base, jobs, workers);
}

std::vector<JobOutcome> train_all_domains(const BaseModel& base, std::span<const TrainJob> domains,
                                          const TrainConfig& phi, std::uint64_t adapter_init_seed,
                                          std::size_t workers) {
    if (domains.empty()) throw ConfigError("train_all_domains needs at least one domain");
    std::vector<TrainJob> jobs(domains.begin(), domains.end());
    for (auto& j : jobs) {
        j.hyper = phi;
        j.adapter_init_seed = adapter_init_seed;
    }
    return run_jobs(base, jobs, workers);
}

std::vector<std::string> register_outcomes(Registry& registry, std::span<const JobOutcome> outcomes) {
    std::vector<std::string> ids;
    for (const auto& o : outcomes) ids.push_back(o.ok() ? registry.add(*o.weights) : std::string());
    return ids;
}

}  // namespace soup
