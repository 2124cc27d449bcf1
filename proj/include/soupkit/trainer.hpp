#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "soupkit/corpus.hpp"
#include "soupkit/error.hpp"
#include "soupkit/model.hpp"
#include "soupkit/registry.hpp"
#include "soupkit/train_config.hpp"

namespace soup {

// Called after each optimizer step with (step, mean micro-batch loss).
using StepCallback = std::function<void(std::uint64_t, double)>;

// Windows of seq_len + 1 tokens at stride seq_len; window k starts at k * seq_len.
std::size_t window_count(std::size_t tokens, std::size_t seq_len);
// Optimizer steps a run will take: epochs * ceil(windows / (batch * accum)),
// capped at max_steps when that is nonzero.
std::uint64_t planned_steps(const TrainConfig& phi, std::size_t windows);

// Trains only the adapter tensors on the corpus train split. Throws
// TrainingError naming the step if the loss becomes non-finite.
AdapterWeights train_adapter(const BaseModel& base, const DomainCorpus& corpus, const TrainConfig& phi,
                             std::uint64_t adapter_init_seed, const StepCallback& on_step = {});

struct PretrainConfig {
    double lr = 3e-3;
    std::uint64_t steps = 300;
    std::uint32_t batch_size = 16;
    std::uint32_t seq_len = 0;
    std::uint64_t seed = 1;
    bool finite_checks = false;
};

nlohmann::ordered_json to_json(const PretrainConfig& c);

// Trains every base tensor on the union of the corpora's train splits. Each
// step draws its windows round-robin across domains.
BaseModel pretrain_base(BaseModel base, std::span<const DomainCorpus* const> corpora, const PretrainConfig& cfg,
                        double* final_loss = nullptr);

struct TrainJob {
    std::string domain;
    const DomainCorpus* corpus = nullptr;  // null: corpus missing
    TrainConfig hyper;
    std::uint64_t adapter_init_seed = 0;
};

struct JobOutcome {
    TrainJob job;
    std::optional<AdapterWeights> weights;
    std::string error;
    ExitCode code = ExitCode::kOk;
    bool ok() const noexcept { return weights.has_value(); }
};

// Runs independent jobs on `workers` threads. Outcomes are returned in job
// order and a failing job never affects the others.
std::vector<JobOutcome> run_jobs(const BaseModel& base, std::span<const TrainJob> jobs, std::size_t workers);

// |lr_grid| x |data_seeds| runs sharing one adapter-init seed.
std::vector<JobOutcome> run_sweep(const BaseModel& base, const DomainCorpus& corpus, std::span<const double> lr_grid,
                                  std::span<const std::uint64_t> data_seeds, std::uint64_t adapter_init_seed,
                                  const TrainConfig& base_phi, std::size_t workers = 1);

// One adapter per named domain.
std::vector<JobOutcome> train_all_domains(const BaseModel& base, std::span<const TrainJob> domains,
                                          const TrainConfig& phi, std::uint64_t adapter_init_seed,
                                          std::size_t workers = 1);

// Adds successful outcomes in job order; returns their ids (empty for failures).
std::vector<std::string> register_outcomes(Registry& registry, std::span<const JobOutcome> outcomes);

// Default learning-rate grid and seeds of the single-domain sweep.
inline constexpr double kSweepLrGrid[] = {7e-3, 4e-3, 1e-3, 5e-4, 1e-4};
inline constexpr std::uint64_t kSweepSeeds[] = {1, 2, 3};

}  // namespace soup
