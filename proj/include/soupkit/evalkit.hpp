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
#include "soupkit/registry.hpp"
#include "soupkit/selector.hpp"
#include "soupkit/soup.hpp"

namespace soup {

struct EvalOptions {
    std::size_t seq_len = 0;  // 0: model context
    std::size_t batch = 16;
    std::size_t workers = 1;
};

struct PerplexityResult {
    double nats = 0.0;  // mean per predicted token
    double ppl = 0.0;   // exp(nats)
    std::size_t predicted = 0;
    std::uint64_t flops = 0;  // counted forward FLOPs
};

enum class EnsembleMode { kLogits, kProbabilities };

// Non-overlapping context windows over the split: window k covers tokens
// [k*s, k*s + s] and predicts the s tokens after its first, so every token
// but the first is scored exactly once.
PerplexityResult perplexity(const BaseModel& base, const AdapterWeights* adapters, const DomainCorpus& corpus,
                            Split split = Split::kTest, const EvalOptions& options = {});

// Averages the l models' raw logits per position (or their probabilities)
// before scoring. Needs at least two compatible adapters.
PerplexityResult logit_ensemble_perplexity(const BaseModel& base, std::span<const AdapterWeights* const> adapters,
                                           const DomainCorpus& corpus, Split split = Split::kTest,
                                           const EvalOptions& options = {},
                                           EnsembleMode mode = EnsembleMode::kLogits);

// Which access purpose an evaluation read of `split` is filed under.
Purpose eval_purpose(Split split);

struct EvalCell {
    double ppl = 0.0;
    double nats = 0.0;
    std::size_t predicted = 0;
    std::uint64_t flops = 0;
    std::string model;  // adapter id, soup recipe, or "base"
    std::string split = "test";
    std::string note;
};

struct EvalReport {
    std::string title;
    std::vector<std::string> methods;
    std::vector<std::string> domains;
    std::vector<std::vector<std::optional<EvalCell>>> cells;  // [method][domain]; empty: absent
    nlohmann::ordered_json metadata = nlohmann::ordered_json::object();

    EvalReport() = default;
    EvalReport(std::string title, std::vector<std::string> methods, std::vector<std::string> domains);

    std::size_t method_index(const std::string& method) const;
    std::size_t domain_index(const std::string& domain) const;
    void set(const std::string& method, const std::string& domain, EvalCell cell);
    const std::optional<EvalCell>& at(const std::string& method, const std::string& domain) const;
    // Unweighted mean of the method's domain cells; empty if any is absent.
    std::optional<double> average(const std::string& method) const;
    bool complete() const;
};

nlohmann::ordered_json to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

// Method x domain matrix with an Avg column; absent cells are empty fields.
std::string report_csv(const EvalReport& report);
// One row per present (method, domain) cell.
std::string report_long_csv(const EvalReport& report);

struct CsvMatrix {
    std::vector<std::string> methods;
    std::vector<std::string> columns;  // includes Avg
    std::vector<std::vector<std::optional<double>>> values;
};
CsvMatrix parse_report_csv(std::string_view text);

std::vector<std::vector<std::string>> parse_csv(std::string_view text);
std::string csv_escape(std::string_view field);

enum class ReportFormat { kCsv, kJson, kLongCsv };
// Writes <stem>.csv, <stem>.json and/or <stem>.long.csv; returns the paths.
std::vector<std::filesystem::path> emit_report(const EvalReport& report, const std::filesystem::path& stem,
                                               std::span<const ReportFormat> formats);
std::vector<std::filesystem::path> emit_report(const EvalReport& report, const std::filesystem::path& stem);

// --- cross-domain ------------------------------------------------------------

inline const std::vector<std::string> kCrossDomainMethods = {
    "zero-shot",    "single:cosine", "single:cluster",     "soup:uniform",
    "soup:cosine",  "soup:cluster",  "oracle:best-single", "oracle:cluster+2",
};

struct SelectionConfig {
    double threshold = kCosineThreshold;
    double mass_threshold = kMassThreshold;
    std::size_t max_adapters = kMaxAdapters;
    std::size_t n_sequences = 100;
    std::size_t seq_len = 0;  // 0: model context
    std::uint64_t seed = 1;
    GmmOptions gmm;
};

nlohmann::ordered_json to_json(const SelectionConfig& c);

// Seed of a domain's selection sample: depends on the domain name only, so
// any subset of domains embeds identically.
std::uint64_t selection_seed(std::uint64_t seed, const std::string& domain);
// n_sequences windows from the split (selection purpose), embedded by the base.
EmbeddingSet selection_embeddings(const BaseModel& base, const DomainCorpus& corpus, Split split,
                                  const SelectionConfig& config);

struct CrossDomainSetup {
    const BaseModel* base = nullptr;
    const Registry* registry = nullptr;
    std::vector<const DomainCorpus*> training;
    std::vector<const DomainCorpus*> novel;
    std::vector<std::string> methods = kCrossDomainMethods;
    // Training domain -> adapter id; empty: domain_adapters(*registry).
    std::map<std::string, std::string> adapters;
    SelectionConfig selection;
    EvalOptions eval;
};

// Adapter id of each training domain: the lexicographically first registry
// entry for that domain that is not itself a soup.
std::map<std::string, std::string> domain_adapters(const Registry& registry);

EvalReport run_cross_domain_experiment(const CrossDomainSetup& setup);

// --- single-domain -----------------------------------------------------------

struct SingleDomainSetup {
    const BaseModel* base = nullptr;
    const Registry* registry = nullptr;
    std::vector<std::string> checkpoint_ids;
    const DomainCorpus* in_domain = nullptr;
    std::vector<const DomainCorpus*> ood;
    std::size_t combo_size = 3;
    bool logit_ensemble = true;
    EvalOptions eval;
};

// Evaluates every C(n, combo_size) uniform soup in-domain and on each OOD
// corpus. Rows: zero-shot, each single checkpoint, best single, one soup row
// per learning rate (mean over recipes whose members all share it), uniform
// over all checkpoints, best in-domain and best OOD recipes, and the logit
// ensemble of the best in-domain recipe's members.
EvalReport run_single_domain_experiment(const SingleDomainSetup& setup);

std::string lr_label(double lr);

// --- cost model --------------------------------------------------------------

struct Ratio {
    std::uint64_t num = 0;
    std::uint64_t den = 1;
    friend bool operator==(const Ratio&, const Ratio&) = default;
};

struct CostEstimate {
    std::uint64_t layers = 0;
    std::uint64_t d_model = 0;
    std::uint64_t bottleneck = 0;
    std::uint64_t tree_depth = 0;  // T
    std::uint64_t adapter_train_flops = 0;      // per token
    std::uint64_t adapter_inference_flops = 0;  // per token
    std::uint64_t hierarchy_train_flops = 0;
    std::uint64_t hierarchy_inference_flops = 0;
    Ratio train_ratio;
    Ratio inference_ratio;
};

CostEstimate cost_estimate(std::int64_t layers, std::int64_t d_model, std::int64_t bottleneck, std::int64_t T);
nlohmann::ordered_json to_json(const CostEstimate& c);

}  // namespace soup
