#include "soupkit/soup.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "soupkit/binary_io.hpp"
#include "soupkit/error.hpp"

namespace soup {

SoupRecipe uniform_recipe(std::vector<std::string> ids, std::string method, std::string target) {
    SoupRecipe r;
    const double c = ids.empty() ? 0.0 : 1.0 / static_cast<double>(ids.size());
    r.coefficients.assign(ids.size(), c);
    r.ids = std::move(ids);
    r.method = std::move(method);
    r.target_domain = std::move(target);
    return r;
}

nlohmann::ordered_json to_json(const SoupRecipe& r) {
    nlohmann::ordered_json j;
    j["ids"] = r.ids;
    j["coefficients"] = r.coefficients;
    j["method"] = r.method;
    j["target_domain"] = r.target_domain;
    j["selection"] = r.selection;
    return j;
}

SoupRecipe recipe_from_json(const nlohmann::json& j) {
    SoupRecipe r;
    try {
        r.ids = j.at("ids").get<std::vector<std::string>>();
        r.coefficients = j.at("coefficients").get<std::vector<double>>();
        r.method = j.at("method").get<std::string>();
        r.target_domain = j.value("target_domain", std::string());
        if (j.contains("selection")) r.selection = j.at("selection");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("recipe: ") + e.what());
    }
    return r;
}

void save_recipe(const SoupRecipe& r, const std::filesystem::path& path) {
    io::write_text_atomic(path, to_json(r).dump(2) + "\n");
}

SoupRecipe load_recipe(const std::filesystem::path& path) {
    try {
        return recipe_from_json(nlohmann::json::parse(io::read_text(path)));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("recipe " + path.string() + ": " + e.what());
    }
}

std::vector<RecipeIssue> validate_recipe(const SoupRecipe& recipe, const Registry& registry) {
    std::vector<RecipeIssue> issues;
    if (recipe.ids.empty()) issues.push_back({"empty", "recipe has no adapters (l must be >= 1)"});
    if (recipe.coefficients.size() != recipe.ids.size()) {
        issues.push_back({"length", std::to_string(recipe.coefficients.size()) + " coefficients for " +
                                        std::to_string(recipe.ids.size()) + " adapters"});
    }
    double total = 0.0;
    for (std::size_t i = 0; i < recipe.coefficients.size(); ++i) {
        const double c = recipe.coefficients[i];
        if (!(c > 0.0) || !std::isfinite(c)) {
            issues.push_back({"coefficient", "coefficient " + std::to_string(i) + " is not positive"});
        }
        total += c;
    }
    if (!recipe.coefficients.empty() && std::abs(total - 1.0) > 1e-9) {
        issues.push_back({"normalization", "coefficients sum to " + std::to_string(total) + ", not 1"});
    }
    std::set<std::string> seen;
    const AdapterWeights* ref = nullptr;
    for (const auto& id : recipe.ids) {
        if (!seen.insert(id).second) issues.push_back({"duplicate", "adapter " + id + " listed twice"});
        if (!registry.contains(id)) {
            issues.push_back({"unknown-id", "adapter " + id + " is not in the registry"});
            continue;
        }
        const auto& w = registry.get(id);
        if (!ref) {
            ref = &w;
            continue;
        }
        if (w.meta.base_hash != ref->meta.base_hash) {
            issues.push_back({"base-hash", "adapter " + id.substr(0, 12) + " was trained on base " +
                                               w.meta.base_hash.substr(0, 12) + ", others on " +
                                               ref->meta.base_hash.substr(0, 12)});
        }
        if (!(w.config == ref->config)) {
            issues.push_back({"config", "adapter " + id.substr(0, 12) + " has a different model config"});
        }
        if (w.meta.adapter_init_seed != ref->meta.adapter_init_seed) {
            issues.push_back({"init-seed", "adapter " + id.substr(0, 12) + " uses init seed " +
                                               std::to_string(w.meta.adapter_init_seed) + ", others " +
                                               std::to_string(ref->meta.adapter_init_seed)});
        }
    }
    return issues;
}

AdapterWeights average_adapters(const SoupRecipe& recipe, const Registry& registry, bool allow_unsafe) {
    const auto issues = validate_recipe(recipe, registry);
    bool overridden = false;
    std::string compat;
    for (const auto& issue : issues) {
        const bool compat_issue = issue.kind == "base-hash" || issue.kind == "config" || issue.kind == "init-seed";
        if (!compat_issue) throw ConfigError("invalid recipe: " + issue.message);
        compat += (compat.empty() ? "" : "; ") + issue.message;
    }
    if (!compat.empty()) {
        if (!allow_unsafe) throw CompatibilityError("incompatible soup members: " + compat);
        overridden = true;
    }

    std::vector<std::pair<std::string, double>> members;
    for (std::size_t i = 0; i < recipe.ids.size(); ++i) members.emplace_back(recipe.ids[i], recipe.coefficients[i]);
    std::sort(members.begin(), members.end());
    const bool uniform = std::all_of(members.begin(), members.end(),
                                     [&](const auto& m) { return m.second == members.front().second; });

    const AdapterWeights& first = registry.get(members.front().first);
    AdapterWeights out;
    out.config = first.config;
    for (const auto& m : members) {
        if (registry.get(m.first).params.size() != first.params.size()) {
            throw CompatibilityError("soup members have different tensor layouts");
        }
    }
    for (std::size_t t = 0; t < first.params.size(); ++t) {
        const auto& proto = first.params[t];
        std::vector<double> acc(proto.value.size(), 0.0);
        for (const auto& [id, coef] : members) {
            const auto& tensor = registry.get(id).params[t];
            if (tensor.name != proto.name || tensor.value.shape() != proto.value.shape()) {
                throw CompatibilityError("soup members disagree on tensor " + proto.name);
            }
            const auto data = tensor.value.data();
            if (uniform) {
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(data[i]);
            } else {
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += coef * static_cast<double>(data[i]);
            }
        }
        Tensor<float> value(proto.value.shape());
        const double l = static_cast<double>(members.size());
        for (std::size_t i = 0; i < acc.size(); ++i) value[i] = static_cast<float>(uniform ? acc[i] / l : acc[i]);
        out.params.push_back({proto.name, std::move(value)});
    }

    out.meta.domain = recipe.target_domain.empty() ? "soup" : "soup:" + recipe.target_domain;
    out.meta.hyper = first.meta.hyper;
    out.meta.adapter_init_seed = first.meta.adapter_init_seed;
    out.meta.base_hash = first.meta.base_hash;
    out.meta.final_train_loss = 0.0;
    out.meta.provenance["recipe"] = to_json(recipe);
    if (overridden) {
        out.meta.provenance["unsafe_override"] = true;
        out.meta.provenance["override_reasons"] = compat;
    }
    return out;
}

SoupRecipe uniform_soup(const Registry& registry, const std::optional<std::set<std::string>>& domain_filter) {
    std::vector<std::string> ids;
    for (const auto& e : registry.entries()) {
        if (!domain_filter || domain_filter->count(e.domain)) ids.push_back(e.id);
    }
    if (ids.empty()) throw ConfigError("uniform soup: no adapters selected");

    // Majority signature; everything else is an offender.
    std::map<std::string, std::size_t> votes;
    auto signature = [&](const std::string& id) {
        const auto& w = registry.get(id);
        return w.meta.base_hash + "|" + std::to_string(w.meta.adapter_init_seed) + "|" + to_json(w.config).dump();
    };
    for (const auto& id : ids) ++votes[signature(id)];
    const auto majority =
        std::max_element(votes.begin(), votes.end(), [](const auto& a, const auto& b) { return a.second < b.second; })
            ->first;
    std::string offenders;
    for (const auto& id : ids) {
        if (signature(id) != majority) {
            const auto& w = registry.get(id);
            offenders += (offenders.empty() ? "" : ", ") + w.meta.domain + " (" + id.substr(0, 12) + ", init seed " +
                         std::to_string(w.meta.adapter_init_seed) + ")";
        }
    }
    if (!offenders.empty()) throw CompatibilityError("uniform soup: incompatible adapters: " + offenders);
    return uniform_recipe(std::move(ids), "uniform");
}

}  // namespace soup
