#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "soupkit/corpus.hpp"
#include "soupkit/model.hpp"
#include "soupkit/soup.hpp"
#include "soupkit/tensor.hpp"

namespace soup {

struct EmbeddingSet {
    std::string domain;
    Tensor<double> rows;  // n x E, each row L2-normalized
    std::string pooling = "mean-final-hidden";
    Split source = Split::kTrain;

    std::size_t size() const noexcept { return rows.empty() ? 0 : rows.rows(); }
    std::size_t dim() const noexcept { return rows.empty() ? 0 : rows.cols(); }
};

// Mean-pooled final-layer (post final LayerNorm) hidden states of the base
// model, one L2-normalized row per sequence. Sequences of equal length are
// batched together.
EmbeddingSet embed_sequences(const BaseModel& base, const std::vector<std::vector<std::uint32_t>>& sequences,
                             std::string domain = {}, Split source = Split::kTrain);

struct Candidate {
    std::string domain;
    double score = 0.0;
};

struct SelectionResult {
    std::string method;
    std::vector<Candidate> ranked;
    std::vector<std::string> chosen;
    double threshold = 0.0;
    std::size_t max_adapters = 5;
    bool fallback = false;
    nlohmann::ordered_json details = nlohmann::ordered_json::object();
};

nlohmann::ordered_json to_json(const SelectionResult& r);
SelectionResult selection_from_json(const nlohmann::json& j);

inline constexpr double kCosineThreshold = 0.15;
inline constexpr double kMassThreshold = 0.10;
inline constexpr std::size_t kMaxAdapters = 5;

// score(D_i) = mean cosine over all (novel row, D_i row) pairs. Chooses in
// descending order while score > threshold, at most max_adapters; falls
// back to the top-ranked domain (flagged) when none qualify.
SelectionResult cosine_select(const EmbeddingSet& novel, std::span<const EmbeddingSet> training,
                              double threshold = kCosineThreshold, std::size_t max_adapters = kMaxAdapters);

struct GmmOptions {
    std::size_t components = 0;  // 0: one per training set
    std::uint64_t seed = 1;
    std::size_t max_iterations = 200;
    double tolerance = 1e-6;  // stop when the mean log-likelihood gains less
    double variance_floor = 1e-6;
    bool pca = true;
    std::size_t pca_max_dims = 50;
    // Independent k-means++ starts; the best final likelihood wins.
    std::size_t restarts = 5;
};

struct GmmModel {
    std::size_t k = 0;
    std::size_t dim = 0;  // after projection
    std::vector<double> weights;
    Tensor<double> means;      // k x dim
    Tensor<double> variances;  // k x dim
    double log_likelihood = 0.0;           // mean per point at convergence
    std::vector<double> history;           // mean log-likelihood after each EM iteration
    Tensor<double> pca_mean;               // E (empty without PCA)
    Tensor<double> pca_basis;              // E x dim (empty without PCA)
    std::vector<std::string> events;       // re-seeding log
    std::size_t restart = 0;               // which start won

    Tensor<double> project(const Tensor<double>& points) const;
    // Responsibilities [n x k] of (unprojected) points.
    Tensor<double> responsibilities(const Tensor<double>& points) const;
    std::vector<std::size_t> assign(const Tensor<double>& points) const;
};

GmmModel fit_gmm(const Tensor<double>& points, const GmmOptions& options);
GmmModel fit_gmm(std::span<const EmbeddingSet> training_sets, const GmmOptions& options);

std::vector<std::byte> encode_gmm(const GmmModel& gmm);
GmmModel decode_gmm(std::span<const std::byte> bytes);
void save_gmm(const GmmModel& gmm, const std::filesystem::path& path);
GmmModel load_gmm(const std::filesystem::path& path);

// Majority cluster of each training domain's embeddings; ties go to the
// lower component index.
std::map<std::string, std::size_t> map_domains_to_clusters(const GmmModel& gmm,
                                                           std::span<const EmbeddingSet> training_sets);

// score(D_i) = fraction of novel sequences whose argmax component is D_i's
// cluster. Chooses score >= mass_threshold, descending, at most max_adapters;
// falls back to the top-ranked domain (flagged). Mass landing on clusters
// that no domain maps to is reported in details["unmapped_mass"].
SelectionResult cluster_select(const GmmModel& gmm, const std::map<std::string, std::size_t>& domain_clusters,
                               const EmbeddingSet& novel, double mass_threshold = kMassThreshold,
                               std::size_t max_adapters = kMaxAdapters);

std::uint64_t binomial(std::uint64_t n, std::uint64_t k);
// All C(n, size) uniform recipes over the ids, ids sorted, combinations in
// lexicographic order.
std::vector<SoupRecipe> exhaustive_combos(std::vector<std::string> ids, std::size_t size = 3);

}  // namespace soup
