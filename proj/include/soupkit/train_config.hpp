#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

namespace soup {

enum class LrSchedule { kConstant, kLinearDecay };

// The hyperparameters phi of one adapter training run.
struct TrainConfig {
    double lr = 1e-4;
    std::uint64_t data_seed = 1;
    std::uint32_t epochs = 20;
    std::uint32_t batch_size = 64;
    std::uint32_t grad_accum = 5;
    // Optimizer-step cap; 0 means train for `epochs` full passes.
    std::uint64_t max_steps = 2000;
    // Window length; 0 means the model's context length.
    std::uint32_t seq_len = 0;
    LrSchedule schedule = LrSchedule::kConstant;
    bool finite_checks = false;

    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::ordered_json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

std::string schedule_name(LrSchedule s);
LrSchedule parse_schedule(const std::string& name);

}  // namespace soup
