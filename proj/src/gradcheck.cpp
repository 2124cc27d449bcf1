#include "soupkit/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "soupkit/rng.hpp"

namespace soup {

template <class T>
GradCheckResult finite_diff_check(const std::function<ad::Var<T>()>& loss, std::vector<ad::Var<T>> params,
                                  const GradCheckOptions& options) {
    if (!(options.step > 0.0)) throw ConfigError("finite_diff_check: step must be positive");
    if (options.order != 2 && options.order != 4) throw ConfigError("finite_diff_check: order must be 2 or 4");
    auto eval = [&]() {
        const double v = static_cast<double>(loss().value()[0]);
        if (!std::isfinite(v)) throw NumericError("finite_diff_check: loss is not finite");
        return v;
    };

    for (auto& p : params) p.clear_grad();
    ad::Var<T> root = loss();
    if (!std::isfinite(static_cast<double>(root.value()[0]))) throw NumericError("finite_diff_check: loss is not finite");
    root.backward();
    const double floor = options.floor_scales_with_loss
                             ? options.denom_floor * std::max(1.0, std::abs(static_cast<double>(root.value()[0])))
                             : options.denom_floor;
    std::vector<Tensor<T>> analytic;
    for (auto& p : params) analytic.push_back(p.has_grad() ? p.grad() : Tensor<T>(p.shape()));

    std::vector<std::pair<std::size_t, std::size_t>> entries;
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = 0; j < params[i].value().size(); ++j) entries.emplace_back(i, j);
    }
    if (options.probes > 0 && options.probes < entries.size()) {
        Rng rng(options.seed);
        rng.shuffle(entries);
        entries.resize(options.probes);
    }

    GradCheckResult result;
    for (const auto& [pi, ej] : entries) {
        T& slot = params[pi].mutable_value()[ej];
        const T original = slot;
        auto at = [&](double offset) {
            slot = static_cast<T>(static_cast<double>(original) + offset);
            return eval();
        };
        const double h = options.step;
        double numeric;
        if (options.order == 2) {
            numeric = (at(h) - at(-h)) / (2.0 * h);
        } else {
            numeric = (-at(2 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2 * h)) / (12.0 * h);
        }
        slot = original;
        const double a = static_cast<double>(analytic[pi][ej]);
        const double denom = std::max({std::abs(a), std::abs(numeric), floor});
        const double rel = std::abs(a - numeric) / denom;
        ++result.probed;
        if (rel >= result.max_rel_error) {
            result.max_rel_error = rel;
            result.worst_param = pi;
            result.worst_index = ej;
            result.worst_analytic = a;
            result.worst_numeric = numeric;
        }
    }
    for (auto& p : params) p.clear_grad();
    return result;
}

template GradCheckResult finite_diff_check<float>(const std::function<ad::Var<float>()>&, std::vector<ad::Var<float>>,
                                                  const GradCheckOptions&);
template GradCheckResult finite_diff_check<double>(const std::function<ad::Var<double>()>&,
                                                   std::vector<ad::Var<double>>, const GradCheckOptions&);

}  // namespace soup
