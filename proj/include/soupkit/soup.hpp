#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "soupkit/model.hpp"
#include "soupkit/registry.hpp"

namespace soup {

struct SoupRecipe {
    std::vector<std::string> ids;
    std::vector<double> coefficients;
    std::string method = "manual";
    // Selection provenance: scores, thresholds, fallback flag.
    nlohmann::ordered_json selection = nlohmann::ordered_json::object();
    std::string target_domain;

    std::size_t size() const noexcept { return ids.size(); }
};

SoupRecipe uniform_recipe(std::vector<std::string> ids, std::string method = "manual", std::string target = {});

nlohmann::ordered_json to_json(const SoupRecipe& r);
SoupRecipe recipe_from_json(const nlohmann::json& j);
void save_recipe(const SoupRecipe& r, const std::filesystem::path& path);
SoupRecipe load_recipe(const std::filesystem::path& path);

struct RecipeIssue {
    std::string kind;  // empty, length, coefficient, normalization, unknown-id, duplicate, base-hash, config, init-seed
    std::string message;
};

// Every violated constraint; empty iff the recipe is sound.
std::vector<RecipeIssue> validate_recipe(const SoupRecipe& recipe, const Registry& registry);

// Coefficient-weighted elementwise average of every adapter tensor, summed
// in double precision in ascending id order. Uniform recipes sum first and
// divide once. Compatibility violations throw unless allow_unsafe is set,
// in which case the override is written into the result's provenance.
AdapterWeights average_adapters(const SoupRecipe& recipe, const Registry& registry, bool allow_unsafe = false);

// Recipe over every adapter (optionally only those whose domain is in
// domain_filter) with coefficients 1/k. Throws ConfigError when nothing is
// selected and CompatibilityError naming the adapters whose init seed, base
// or config disagrees with the majority.
SoupRecipe uniform_soup(const Registry& registry, const std::optional<std::set<std::string>>& domain_filter = {});

}  // namespace soup
