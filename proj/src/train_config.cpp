#include "soupkit/train_config.hpp"

#include <cmath>

#include "soupkit/error.hpp"

namespace soup {

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (grad_accum < 1) throw ConfigError("gradient accumulation must be >= 1");
}

std::string schedule_name(LrSchedule s) { return s == LrSchedule::kConstant ? "constant" : "linear"; }

LrSchedule parse_schedule(const std::string& name) {
    if (name == "constant") return LrSchedule::kConstant;
    if (name == "linear") return LrSchedule::kLinearDecay;
    throw ConfigError("unknown lr schedule '" + name + "'");
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
    nlohmann::ordered_json j;
    j["lr"] = c.lr;
    j["data_seed"] = c.data_seed;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["grad_accum"] = c.grad_accum;
    j["max_steps"] = c.max_steps;
    j["seq_len"] = c.seq_len;
    j["schedule"] = schedule_name(c.schedule);
    j["finite_checks"] = c.finite_checks;
    return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        c.lr = j.at("lr").get<double>();
        c.data_seed = j.at("data_seed").get<std::uint64_t>();
        c.epochs = j.at("epochs").get<std::uint32_t>();
        c.batch_size = j.at("batch_size").get<std::uint32_t>();
        c.grad_accum = j.at("grad_accum").get<std::uint32_t>();
        c.max_steps = j.at("max_steps").get<std::uint64_t>();
        c.seq_len = j.at("seq_len").get<std::uint32_t>();
        c.schedule = parse_schedule(j.at("schedule").get<std::string>());
        c.finite_checks = j.at("finite_checks").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("train config: ") + e.what());
    }
    return c;
}

}  // namespace soup
