#pragma once

#include <cstdint>
#include <filesystem>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "soupkit/corpus.hpp"
#include "soupkit/evalkit.hpp"
#include "soupkit/model.hpp"
#include "soupkit/registry.hpp"
#include "soupkit/selector.hpp"
#include "soupkit/soup.hpp"
#include "soupkit/train_config.hpp"
#include "soupkit/trainer.hpp"

namespace soup {

struct DataConfig {
    std::string mode = "synthetic";  // synthetic | ingest
    std::uint64_t seed = 1;
    std::uint64_t world_seed = 20231;
    std::uint32_t training_domains = 8;
    std::uint32_t novel_domains = 3;
    std::size_t train_tokens = 20000;
    std::size_t heldout_tokens = 4000;
    std::size_t test_tokens = 4000;
    std::size_t tokenizer_chars = 40000;  // per training domain
    // Ingest mode: raw_dir/<name>/*.txt for every listed domain.
    std::filesystem::path raw_dir;
    std::vector<std::string> training;
    std::vector<std::string> novel;
    SplitFractions fractions{0.8, 0.1, 0.1};
};

struct PipelineConfig {
    std::filesystem::path workspace = "workspace";
    ModelConfig model;
    TrainConfig train;
    std::uint64_t adapter_init_seed = 1;
    PretrainConfig pretrain;
    DataConfig data;
    SelectionConfig selection;
    EvalOptions eval;
    std::size_t workers = 1;
    std::string sweep_domain;  // empty: first training domain
    std::vector<double> sweep_lrs{std::begin(kSweepLrGrid), std::end(kSweepLrGrid)};
    std::vector<std::uint64_t> sweep_seeds{std::begin(kSweepSeeds), std::end(kSweepSeeds)};
    std::vector<std::string> ood;  // single-domain OOD columns; empty: novel domains
};

// Section.key names accepted by the config file and --set overrides.
std::vector<std::string> config_keys();
void apply_setting(PipelineConfig& cfg, const std::string& key, const std::string& value);
// Reads a flat INI document on top of `base`. Unknown keys are config errors.
PipelineConfig load_config(const std::filesystem::path& path, PipelineConfig base = PipelineConfig{});
PipelineConfig parse_config(const std::string& text, PipelineConfig base = PipelineConfig{});
// Canonical INI text of every setting except the workspace location.
std::string to_ini(const PipelineConfig& cfg);
void validate(const PipelineConfig& cfg);

struct DomainNames {
    std::vector<std::string> training;
    std::vector<std::string> novel;
};
DomainNames domain_names(const PipelineConfig& cfg);
// Synthetic preset: training domain i is topic i (grammar i mod 3); novel
// domain j mixes topics j and j+3 half and half with grammar j mod 3.
std::vector<SyntheticDomainSpec> synthetic_specs(const PipelineConfig& cfg);

// Serializes access to one workspace directory through an exclusive lock file.
class WorkspaceLock {
public:
    explicit WorkspaceLock(const std::filesystem::path& workspace);
    ~WorkspaceLock();
    WorkspaceLock(const WorkspaceLock&) = delete;
    WorkspaceLock& operator=(const WorkspaceLock&) = delete;

private:
    int fd_ = -1;
};

struct SoupOutcome {
    SelectionResult selection;
    SoupRecipe recipe;
    std::string soup_id;  // content hash of the souped checkpoint
    std::filesystem::path dir;
};

class Workspace {
public:
    explicit Workspace(PipelineConfig cfg);

    const PipelineConfig& config() const noexcept { return cfg_; }
    const std::filesystem::path& root() const noexcept { return cfg_.workspace; }
    std::filesystem::path corpus_dir(const std::string& domain) const;
    std::filesystem::path tokenizer_path() const;
    std::filesystem::path base_path() const;
    std::filesystem::path registry_dir() const;
    std::filesystem::path reports_dir() const;

    // Materializes the tokenizer and every corpus. Returns false when the
    // workspace already matched the config (no-op).
    bool prepare();
    // Pretrains the base unless a checkpoint for the current config exists.
    bool ensure_base();

    Tokenizer tokenizer() const;
    DomainCorpus corpus(const std::string& domain) const;
    BaseModel base() const;
    Registry registry() const;

    // Trains one adapter per named domain ("all" = every training domain),
    // skipping jobs already in the registry. Returns (trained, skipped).
    std::pair<std::size_t, std::size_t> train_domains(const std::vector<std::string>& domains);
    // lr x seed sweep on the sweep domain; same skipping rule.
    std::pair<std::size_t, std::size_t> train_sweep(const std::vector<double>& lrs,
                                                     const std::vector<std::uint64_t>& seeds);

    // Adapter ids of the cross-domain run (train.* hyper-parameters).
    std::map<std::string, std::string> domain_adapter_ids() const;
    std::vector<std::string> sweep_ids() const;

    // method: cosine | cluster; writes selection/<novel>.<method>.json.
    SelectionResult select(const std::string& novel, const std::string& method);
    // method: uniform | cosine | cluster | manual (ids = registry refs).
    SoupOutcome soup(const std::string& novel, const std::string& method, const std::vector<std::string>& ids = {});

    // Everything a suite (cross_domain | single_domain | cell) still needs; empty when ready.
    std::vector<std::string> missing_prerequisites(const std::string& suite) const;

    EvalReport eval_cross_domain(const std::vector<std::string>& methods = kCrossDomainMethods);
    EvalReport eval_single_domain();
    EvalCell eval_cell(const std::string& method, const std::string& domain);

    // Writes reports/<name>.{csv,json,long.csv} plus reports/<name>.config.ini.
    std::vector<std::filesystem::path> write_report(const EvalReport& report, const std::string& name) const;
    void write_snapshot(const std::string& command) const;

private:
    struct Embeddings {
        std::vector<EmbeddingSet> training;
        std::map<std::string, EmbeddingSet> novel;
        GmmModel gmm;
        std::map<std::string, std::size_t> clusters;
    };
    Embeddings selection_state(const std::vector<std::string>& novel);
    TrainConfig sweep_base_phi() const;

    PipelineConfig cfg_;
};

}  // namespace soup
