#include "soupkit/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <mutex>
#include <numeric>
#include <set>

#include "soupkit/binary_io.hpp"
#include "soupkit/error.hpp"
#include "soupkit/hash.hpp"
#include "soupkit/kernels.hpp"
#include "soupkit/parallel.hpp"
#include "soupkit/rng.hpp"

namespace soup {

// --- scoring -----------------------------------------------------------------

Purpose eval_purpose(Split split) {
    switch (split) {
        case Split::kTrain: return Purpose::kTraining;
        case Split::kHeldOut: return Purpose::kValidation;
        case Split::kTest: return Purpose::kEvaluation;
    }
    throw ConfigError("unknown split");
}

namespace {

PerplexityResult score_models(std::span<const std::unique_ptr<BoundModel>> models, const DomainCorpus& corpus,
                              Split split, const EvalOptions& opt, EnsembleMode mode) {
    const auto tokens = corpus.read(split, eval_purpose(split));
    if (tokens.size() < 2) {
        throw DataError("perplexity: " + corpus.name() + "/" + std::string(split_name(split)) +
                        " has fewer than 2 tokens");
    }
    const auto& cfg = models.front()->config();
    const std::size_t s = opt.seq_len == 0 ? cfg.context : opt.seq_len;
    if (s == 0 || s > cfg.context) throw ConfigError("perplexity: seq_len must be in [1, context]");
    const std::size_t batch = std::max<std::size_t>(1, opt.batch);
    const std::size_t n = tokens.size();
    const std::size_t V = cfg.vocab;
    const double l = static_cast<double>(models.size());

    const std::uint64_t flops0 = kernels::thread_flops();
    double total = 0.0;
    std::size_t predicted = 0;
    std::vector<double> avg(V);
    std::vector<Tensor<float>> outs(models.size());

    std::size_t start = 0;
    while (start + 1 < n) {
        const std::size_t len = std::min(s, n - 1 - start);
        std::size_t b = 1;
        if (len == s) {
            while (b < batch && start + (b + 1) * s < n) ++b;
        }
        std::vector<std::uint32_t> input;
        input.reserve(b * len);
        for (std::size_t w = 0; w < b; ++w) {
            const std::size_t off = start + w * s;
            input.insert(input.end(), tokens.begin() + static_cast<std::ptrdiff_t>(off),
                         tokens.begin() + static_cast<std::ptrdiff_t>(off + len));
        }
        for (std::size_t m = 0; m < models.size(); ++m) outs[m] = models[m]->logits(input, b, len);
        for (std::size_t w = 0; w < b; ++w) {
            for (std::size_t t = 0; t < len; ++t) {
                const std::size_t row = w * len + t;
                const std::uint32_t target = tokens[start + w * s + t + 1];
                if (mode == EnsembleMode::kLogits || models.size() == 1) {
                    std::fill(avg.begin(), avg.end(), 0.0);
                    for (const auto& o : outs) {
                        const auto r = o.row(row);
                        for (std::size_t v = 0; v < V; ++v) avg[v] += static_cast<double>(r[v]);
                    }
                    double mx = -std::numeric_limits<double>::infinity();
                    for (auto& v : avg) {
                        v /= l;
                        mx = std::max(mx, v);
                    }
                    double z = 0.0;
                    for (double v : avg) z += std::exp(v - mx);
                    total += mx + std::log(z) - avg[target];
                } else {
                    double p = 0.0;
                    for (const auto& o : outs) {
                        const auto r = o.row(row);
                        double mx = -std::numeric_limits<double>::infinity();
                        for (float v : r) mx = std::max(mx, static_cast<double>(v));
                        double z = 0.0;
                        for (float v : r) z += std::exp(static_cast<double>(v) - mx);
                        p += std::exp(static_cast<double>(r[target]) - mx) / z;
                    }
                    total -= std::log(p / l);
                }
                ++predicted;
            }
        }
        start += b * s;
    }
    PerplexityResult r;
    r.predicted = predicted;
    r.nats = total / static_cast<double>(predicted);
    r.ppl = std::exp(r.nats);
    r.flops = kernels::thread_flops() - flops0;
    if (!std::isfinite(r.ppl)) throw NumericError("perplexity: non-finite result on " + corpus.name());
    return r;
}

}  // namespace

PerplexityResult perplexity(const BaseModel& base, const AdapterWeights* adapters, const DomainCorpus& corpus,
                            Split split, const EvalOptions& options) {
    std::vector<std::unique_ptr<BoundModel>> models;
    models.push_back(std::make_unique<BoundModel>(base, adapters));
    return score_models(models, corpus, split, options, EnsembleMode::kLogits);
}

PerplexityResult logit_ensemble_perplexity(const BaseModel& base, std::span<const AdapterWeights* const> adapters,
                                           const DomainCorpus& corpus, Split split, const EvalOptions& options,
                                           EnsembleMode mode) {
    if (adapters.size() < 2) throw ConfigError("logit ensemble needs at least 2 adapters");
    std::vector<std::unique_ptr<BoundModel>> models;
    for (const auto* a : adapters) {
        if (a == nullptr) throw ConfigError("logit ensemble: null adapter");
        models.push_back(std::make_unique<BoundModel>(base, a));
    }
    return score_models(models, corpus, split, options, mode);
}

// --- report ------------------------------------------------------------------

EvalReport::EvalReport(std::string t, std::vector<std::string> m, std::vector<std::string> d)
    : title(std::move(t)), methods(std::move(m)), domains(std::move(d)) {
    if (std::set<std::string>(methods.begin(), methods.end()).size() != methods.size()) {
        throw ConfigError("report: duplicate method names");
    }
    if (std::set<std::string>(domains.begin(), domains.end()).size() != domains.size()) {
        throw ConfigError("report: duplicate domain names");
    }
    cells.assign(methods.size(), std::vector<std::optional<EvalCell>>(domains.size()));
}

std::size_t EvalReport::method_index(const std::string& method) const {
    auto it = std::find(methods.begin(), methods.end(), method);
    if (it == methods.end()) throw IndexError("report has no method " + method);
    return static_cast<std::size_t>(it - methods.begin());
}

std::size_t EvalReport::domain_index(const std::string& domain) const {
    auto it = std::find(domains.begin(), domains.end(), domain);
    if (it == domains.end()) throw IndexError("report has no domain " + domain);
    return static_cast<std::size_t>(it - domains.begin());
}

void EvalReport::set(const std::string& method, const std::string& domain, EvalCell cell) {
    if (std::exp(cell.nats) != cell.ppl) throw NumericError("report cell violates ppl = exp(nats)");
    cells[method_index(method)][domain_index(domain)] = std::move(cell);
}

const std::optional<EvalCell>& EvalReport::at(const std::string& method, const std::string& domain) const {
    return cells[method_index(method)][domain_index(domain)];
}

std::optional<double> EvalReport::average(const std::string& method) const {
    const auto& row = cells[method_index(method)];
    if (row.empty()) return std::nullopt;
    double s = 0.0;
    for (const auto& c : row) {
        if (!c) return std::nullopt;
        s += c->ppl;
    }
    return s / static_cast<double>(row.size());
}

bool EvalReport::complete() const {
    for (const auto& row : cells) {
        for (const auto& c : row) {
            if (!c) return false;
        }
    }
    return true;
}

nlohmann::ordered_json to_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["title"] = r.title;
    j["methods"] = r.methods;
    j["domains"] = r.domains;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (std::size_t m = 0; m < r.methods.size(); ++m) {
        nlohmann::ordered_json row;
        row["method"] = r.methods[m];
        nlohmann::ordered_json cells = nlohmann::ordered_json::object();
        for (std::size_t d = 0; d < r.domains.size(); ++d) {
            const auto& c = r.cells[m][d];
            if (!c) {
                cells[r.domains[d]] = nullptr;
                continue;
            }
            cells[r.domains[d]] = {{"ppl", c->ppl},     {"nats", c->nats},   {"predicted", c->predicted},
                                   {"flops", c->flops}, {"model", c->model}, {"split", c->split},
                                   {"note", c->note}};
        }
        row["cells"] = cells;
        const auto avg = r.average(r.methods[m]);
        row["avg"] = avg ? nlohmann::ordered_json(*avg) : nlohmann::ordered_json(nullptr);
        rows.push_back(row);
    }
    j["rows"] = rows;
    j["metadata"] = r.metadata;
    return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
    try {
        EvalReport r(j.at("title").get<std::string>(), j.at("methods").get<std::vector<std::string>>(),
                     j.at("domains").get<std::vector<std::string>>());
        for (const auto& row : j.at("rows")) {
            const auto method = row.at("method").get<std::string>();
            for (const auto& d : r.domains) {
                const auto& c = row.at("cells").at(d);
                if (c.is_null()) continue;
                EvalCell cell;
                cell.ppl = c.at("ppl").get<double>();
                cell.nats = c.at("nats").get<double>();
                cell.predicted = c.at("predicted").get<std::size_t>();
                cell.flops = c.at("flops").get<std::uint64_t>();
                cell.model = c.at("model").get<std::string>();
                cell.split = c.at("split").get<std::string>();
                cell.note = c.at("note").get<std::string>();
                r.cells[r.method_index(method)][r.domain_index(d)] = std::move(cell);
            }
        }
        r.metadata = nlohmann::ordered_json::parse(j.at("metadata").dump());
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("report json: ") + e.what());
    }
}

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string csv_line(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out += ',';
        out += csv_escape(fields[i]);
    }
    out += "\r\n";
    return out;
}

}  // namespace

std::string csv_escape(std::string_view field) {
    if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, any = false;
    std::size_t i = 0;
    auto end_row = [&] {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
        row.clear();
        field.clear();
        any = false;
    };
    while (i < text.size()) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    i += 2;
                    continue;
                }
                quoted = false;
            } else {
                field += c;
            }
            ++i;
            continue;
        }
        if (c == '"') {
            if (!field.empty()) throw FormatError("csv: quote inside unquoted field");
            quoted = true;
            any = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\r' || c == '\n') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            end_row();
        } else {
            field += c;
            any = true;
        }
        ++i;
    }
    if (quoted) throw FormatError("csv: unterminated quoted field");
    if (any || !row.empty()) end_row();
    return rows;
}

std::string report_csv(const EvalReport& r) {
    std::vector<std::string> header{"method"};
    header.insert(header.end(), r.domains.begin(), r.domains.end());
    header.push_back("Avg");
    std::string out = csv_line(header);
    for (std::size_t m = 0; m < r.methods.size(); ++m) {
        std::vector<std::string> f{r.methods[m]};
        for (const auto& c : r.cells[m]) f.push_back(c ? fmt_double(c->ppl) : std::string());
        const auto avg = r.average(r.methods[m]);
        f.push_back(avg ? fmt_double(*avg) : std::string());
        out += csv_line(f);
    }
    return out;
}

std::string report_long_csv(const EvalReport& r) {
    std::string out = csv_line({"method", "domain", "ppl", "nats_per_token", "predicted_tokens", "model"});
    for (std::size_t m = 0; m < r.methods.size(); ++m) {
        for (std::size_t d = 0; d < r.domains.size(); ++d) {
            const auto& c = r.cells[m][d];
            if (!c) continue;
            out += csv_line({r.methods[m], r.domains[d], fmt_double(c->ppl), fmt_double(c->nats),
                             std::to_string(c->predicted), c->model});
        }
    }
    return out;
}

CsvMatrix parse_report_csv(std::string_view text) {
    const auto rows = parse_csv(text);
    if (rows.empty() || rows[0].size() < 2 || rows[0][0] != "method") throw FormatError("report csv: bad header");
    CsvMatrix out;
    out.columns.assign(rows[0].begin() + 1, rows[0].end());
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() != rows[0].size()) {
            throw FormatError("report csv: row " + std::to_string(i) + " has " + std::to_string(rows[i].size()) +
                              " fields, expected " + std::to_string(rows[0].size()));
        }
        out.methods.push_back(rows[i][0]);
        std::vector<std::optional<double>> vals;
        for (std::size_t k = 1; k < rows[i].size(); ++k) {
            if (rows[i][k].empty()) {
                vals.emplace_back();
                continue;
            }
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(rows[i][k], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != rows[i][k].size()) throw FormatError("report csv: bad number '" + rows[i][k] + "'");
            vals.emplace_back(v);
        }
        out.values.push_back(std::move(vals));
    }
    return out;
}

std::vector<std::filesystem::path> emit_report(const EvalReport& report, const std::filesystem::path& stem,
                                               std::span<const ReportFormat> formats) {
    std::vector<std::filesystem::path> out;
    auto with = [&](const std::string& suffix) { return std::filesystem::path(stem.string() + suffix); };
    for (auto f : formats) {
        std::filesystem::path p;
        switch (f) {
            case ReportFormat::kCsv:
                p = with(".csv");
                io::write_text_atomic(p, report_csv(report));
                break;
            case ReportFormat::kJson:
                p = with(".json");
                io::write_text_atomic(p, to_json(report).dump(2) + "\n");
                break;
            case ReportFormat::kLongCsv:
                p = with(".long.csv");
                io::write_text_atomic(p, report_long_csv(report));
                break;
        }
        out.push_back(p);
    }
    return out;
}

std::vector<std::filesystem::path> emit_report(const EvalReport& report, const std::filesystem::path& stem) {
    const ReportFormat all[] = {ReportFormat::kCsv, ReportFormat::kJson, ReportFormat::kLongCsv};
    return emit_report(report, stem, all);
}

// --- shared experiment plumbing ------------------------------------------------

namespace {

// A model to score: the base alone, or the base plus a (possibly souped) adapter.
struct ModelSpec {
    std::vector<std::string> ids;  // empty: base; one: that adapter; more: uniform soup
    std::string key() const {
        std::string k = ids.empty() ? "base" : "";
        for (const auto& id : ids) k += (k.empty() ? "" : "+") + id;
        return k;
    }
};

ModelSpec canonical(std::vector<std::string> ids) {
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ModelSpec{std::move(ids)};
}

EvalCell to_cell(const PerplexityResult& r, std::string model, Split split) {
    EvalCell c;
    c.ppl = r.ppl;
    c.nats = r.nats;
    c.predicted = r.predicted;
    c.flops = r.flops;
    c.model = std::move(model);
    c.split = split_name(split);
    return c;
}

// Scores every (spec, corpus) pair once, in parallel. Soups are built from
// the registry per job.
class CellCache {
public:
    CellCache(const BaseModel& base, const Registry& registry, EvalOptions opt)
        : base_(base), registry_(registry), opt_(opt) {}

    void want(const ModelSpec& spec, const DomainCorpus* corpus) {
        const auto k = std::make_pair(spec.key(), corpus->name());
        if (index_.count(k)) return;
        index_[k] = jobs_.size();
        jobs_.push_back({spec, corpus, {}});
    }

    void run() {
        parallel_for(jobs_.size(), opt_.workers, [&](std::size_t i) {
            auto& job = jobs_[i];
            if (job.result) return;
            PerplexityResult r;
            if (job.spec.ids.empty()) {
                r = perplexity(base_, nullptr, *job.corpus, Split::kTest, opt_);
            } else if (job.spec.ids.size() == 1) {
                r = perplexity(base_, &registry_.get(job.spec.ids[0]), *job.corpus, Split::kTest, opt_);
            } else {
                const auto soup = average_adapters(uniform_recipe(job.spec.ids), registry_);
                r = perplexity(base_, &soup, *job.corpus, Split::kTest, opt_);
            }
            job.result = r;
        });
    }

    const PerplexityResult& get(const ModelSpec& spec, const DomainCorpus* corpus) const {
        return *jobs_.at(index_.at({spec.key(), corpus->name()})).result;
    }

    EvalCell cell(const ModelSpec& spec, const DomainCorpus* corpus) const {
        return to_cell(get(spec, corpus), spec.key(), Split::kTest);
    }

private:
    struct Job {
        ModelSpec spec;
        const DomainCorpus* corpus;
        std::optional<PerplexityResult> result;
    };
    const BaseModel& base_;
    const Registry& registry_;
    EvalOptions opt_;
    std::vector<Job> jobs_;
    std::map<std::pair<std::string, std::string>, std::size_t> index_;
};

nlohmann::ordered_json access_summary(const DomainCorpus& c) {
    std::map<std::string, std::size_t> counts;
    for (const auto& r : c.access_log()->records()) {
        if (r.domain != c.name()) continue;
        counts[std::string(split_name(r.split)) + "/" + std::string(purpose_name(r.purpose))]++;
    }
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [k, v] : counts) j[k] = v;
    return j;
}

std::size_t count_reads(const DomainCorpus& c, Split split) {
    std::size_t n = 0;
    for (const auto& r : c.access_log()->records()) n += (r.domain == c.name() && r.split == split);
    return n;
}

}  // namespace

nlohmann::ordered_json to_json(const SelectionConfig& c) {
    return {{"threshold", c.threshold},
            {"mass_threshold", c.mass_threshold},
            {"max_adapters", c.max_adapters},
            {"n_sequences", c.n_sequences},
            {"seq_len", c.seq_len},
            {"seed", c.seed},
            {"gmm",
             {{"components", c.gmm.components},
              {"seed", c.gmm.seed},
              {"max_iterations", c.gmm.max_iterations},
              {"tolerance", c.gmm.tolerance},
              {"variance_floor", c.gmm.variance_floor},
              {"pca", c.gmm.pca},
              {"pca_max_dims", c.gmm.pca_max_dims},
              {"restarts", c.gmm.restarts}}}};
}

std::uint64_t selection_seed(std::uint64_t seed, const std::string& domain) {
    const auto hex = sha256_hex(domain);
    return Rng::derive(seed, std::stoull(hex.substr(0, 15), nullptr, 16));
}

EmbeddingSet selection_embeddings(const BaseModel& base, const DomainCorpus& corpus, Split split,
                                  const SelectionConfig& config) {
    const std::size_t seq = config.seq_len == 0 ? base.config.context : config.seq_len;
    const auto seqs = sample_sequences(corpus, split, Purpose::kSelection, config.n_sequences, seq,
                                       selection_seed(config.seed, corpus.name()));
    return embed_sequences(base, seqs, corpus.name(), split);
}

std::map<std::string, std::string> domain_adapters(const Registry& registry) {
    std::map<std::string, std::string> out;
    for (const auto& id : registry.ids()) {
        const auto& w = registry.get(id);
        if (!w.meta.provenance.empty()) continue;
        out.emplace(w.meta.domain, id);  // ids() is sorted, so the first wins
    }
    return out;
}

// --- cross-domain ------------------------------------------------------------

EvalReport run_cross_domain_experiment(const CrossDomainSetup& setup) {
    if (!setup.base || !setup.registry) throw ConfigError("cross-domain: base and registry are required");
    if (setup.training.empty()) throw ConfigError("cross-domain: no training domains");
    if (setup.novel.empty()) throw ConfigError("cross-domain: no novel domains");
    for (const auto& m : setup.methods) {
        if (std::find(kCrossDomainMethods.begin(), kCrossDomainMethods.end(), m) == kCrossDomainMethods.end()) {
            throw ConfigError("cross-domain: unknown method " + m);
        }
    }
    const auto& base = *setup.base;
    const auto& registry = *setup.registry;
    const auto& sel = setup.selection;

    std::vector<std::string> novel_names;
    for (const auto* c : setup.novel) novel_names.push_back(c->name());
    EvalReport report("cross-domain", setup.methods, novel_names);

    const auto all_adapters = setup.adapters.empty() ? domain_adapters(registry) : setup.adapters;
    std::map<std::string, std::string> adapters;
    std::vector<std::string> missing;
    for (const auto* c : setup.training) {
        auto it = all_adapters.find(c->name());
        if (it == all_adapters.end()) {
            missing.push_back(c->name());
        } else {
            adapters[c->name()] = it->second;
        }
    }

    std::vector<std::size_t> test_reads_before;
    for (const auto* c : setup.novel) test_reads_before.push_back(count_reads(*c, Split::kTest));

    // Selection: training embeddings from train splits, novel from held-out.
    const std::size_t nt = setup.training.size();
    std::vector<EmbeddingSet> train_sets(nt), novel_sets(setup.novel.size());
    parallel_for(nt + setup.novel.size(), setup.eval.workers, [&](std::size_t i) {
        const bool is_train = i < nt;
        const DomainCorpus& c = is_train ? *setup.training[i] : *setup.novel[i - nt];
        const Split split = is_train ? Split::kTrain : Split::kHeldOut;
        (is_train ? train_sets[i] : novel_sets[i - nt]) = selection_embeddings(base, c, split, sel);
    });
    for (std::size_t i = 0; i < setup.novel.size(); ++i) {
        if (count_reads(*setup.novel[i], Split::kTest) != test_reads_before[i]) {
            throw DataError("cross-domain: test split of " + setup.novel[i]->name() + " was read during selection");
        }
    }
    GmmOptions gopt = sel.gmm;
    if (gopt.components == 0) gopt.components = nt;
    const auto gmm = fit_gmm(std::span<const EmbeddingSet>(train_sets), gopt);
    const auto cluster_map = map_domains_to_clusters(gmm, train_sets);

    std::vector<SelectionResult> cos(setup.novel.size()), clu(setup.novel.size());
    for (std::size_t i = 0; i < setup.novel.size(); ++i) {
        cos[i] = cosine_select(novel_sets[i], train_sets, sel.threshold, sel.max_adapters);
        clu[i] = cluster_select(gmm, cluster_map, novel_sets[i], sel.mass_threshold, sel.max_adapters);
    }

    // Model specs per (method, novel domain); nullopt marks an absent row cell.
    auto ids_for = [&](const std::vector<std::string>& domains) -> std::optional<std::vector<std::string>> {
        std::vector<std::string> ids;
        for (const auto& d : domains) {
            auto it = adapters.find(d);
            if (it == adapters.end()) return std::nullopt;
            ids.push_back(it->second);
        }
        return ids;
    };
    auto has = [&](const std::string& m) {
        return std::find(setup.methods.begin(), setup.methods.end(), m) != setup.methods.end();
    };
    std::vector<std::string> all_domains;
    for (const auto* c : setup.training) all_domains.push_back(c->name());

    CellCache cache(base, registry, setup.eval);
    struct Plan {
        std::string method;
        std::size_t novel;
        std::vector<ModelSpec> candidates;  // oracle rows take the best; others have one
        std::string note;
    };
    std::vector<Plan> plans;
    for (std::size_t i = 0; i < setup.novel.size(); ++i) {
        auto add = [&](const std::string& m, const std::vector<std::string>& domains, std::string note = {}) {
            if (!has(m)) return;
            Plan p{m, i, {}, std::move(note)};
            if (auto ids = ids_for(domains)) p.candidates.push_back(canonical(*ids));
            plans.push_back(std::move(p));
        };
        add("zero-shot", {});
        add("single:cosine", {cos[i].ranked.front().domain});
        add("single:cluster", {clu[i].ranked.front().domain});
        add("soup:uniform", all_domains);
        add("soup:cosine", cos[i].chosen);
        add("soup:cluster", clu[i].chosen);
        if (has("oracle:best-single")) {
            Plan p{"oracle:best-single", i, {}, {}};
            for (const auto& [d, id] : adapters) p.candidates.push_back(canonical({id}));
            plans.push_back(std::move(p));
        }
        if (has("oracle:cluster+2")) {
            Plan p{"oracle:cluster+2", i, {}, {}};
            if (auto chosen = ids_for(clu[i].chosen)) {
                std::vector<std::string> rest;
                for (const auto& [d, id] : adapters) {
                    if (std::find(clu[i].chosen.begin(), clu[i].chosen.end(), d) == clu[i].chosen.end()) {
                        rest.push_back(id);
                    }
                }
                for (std::size_t a = 0; a < rest.size(); ++a) {
                    for (std::size_t b = a + 1; b < rest.size(); ++b) {
                        auto ids = *chosen;
                        ids.push_back(rest[a]);
                        ids.push_back(rest[b]);
                        p.candidates.push_back(canonical(ids));
                    }
                }
                if (rest.size() < 2) {
                    auto ids = *chosen;
                    ids.insert(ids.end(), rest.begin(), rest.end());
                    p.candidates.push_back(canonical(ids));
                    p.note = "fewer than two adapters outside the cluster recipe";
                }
            }
            plans.push_back(std::move(p));
        }
    }
    for (const auto& p : plans) {
        for (const auto& s : p.candidates) cache.want(s, setup.novel[p.novel]);
    }
    cache.run();

    for (const auto& p : plans) {
        const auto* corpus = setup.novel[p.novel];
        if (p.candidates.empty()) continue;
        std::size_t best = 0;
        for (std::size_t k = 1; k < p.candidates.size(); ++k) {
            if (cache.get(p.candidates[k], corpus).nats < cache.get(p.candidates[best], corpus).nats) best = k;
        }
        auto cell = cache.cell(p.candidates[best], corpus);
        cell.note = p.note;
        if (p.candidates.size() > 1) {
            cell.note += (cell.note.empty() ? "" : "; ") + std::string("best of ") +
                         std::to_string(p.candidates.size()) + " candidates";
        }
        report.set(p.method, corpus->name(), std::move(cell));
    }

    auto& meta = report.metadata;
    meta["base_hash"] = base.content_hash();
    meta["model_config"] = to_json(base.config);
    meta["selection_config"] = to_json(sel);
    meta["eval"] = {{"seq_len", setup.eval.seq_len == 0 ? base.config.context : setup.eval.seq_len},
                    {"batch", setup.eval.batch}};
    nlohmann::ordered_json ad = nlohmann::ordered_json::object();
    for (const auto& [d, id] : adapters) ad[d] = id;
    meta["adapters"] = ad;
    meta["missing_adapters"] = missing;
    nlohmann::ordered_json hashes = nlohmann::ordered_json::object();
    for (const auto* c : setup.training) hashes[c->name()] = c->content_hash();
    for (const auto* c : setup.novel) hashes[c->name()] = c->content_hash();
    meta["corpus_hashes"] = hashes;
    meta["gmm"] = {{"k", gmm.k},
                   {"dim", gmm.dim},
                   {"log_likelihood", gmm.log_likelihood},
                   {"iterations", gmm.history.size()},
                   {"restart", gmm.restart},
                   {"events", gmm.events}};
    nlohmann::ordered_json cmap = nlohmann::ordered_json::object();
    for (const auto& [d, c] : cluster_map) cmap[d] = c;
    meta["domain_clusters"] = cmap;
    nlohmann::ordered_json selections = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < setup.novel.size(); ++i) {
        selections[novel_names[i]] = {{"cosine", to_json(cos[i])}, {"cluster", to_json(clu[i])}};
    }
    meta["selections"] = selections;
    nlohmann::ordered_json audit = nlohmann::ordered_json::object();
    for (const auto* c : setup.novel) audit[c->name()] = access_summary(*c);
    meta["novel_access"] = audit;
    return report;
}

// --- single-domain -----------------------------------------------------------

std::string lr_label(double lr) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", lr);
    return buf;
}

EvalReport run_single_domain_experiment(const SingleDomainSetup& setup) {
    if (!setup.base || !setup.registry || !setup.in_domain) {
        throw ConfigError("single-domain: base, registry and in-domain corpus are required");
    }
    const std::size_t size = setup.combo_size;
    if (setup.checkpoint_ids.size() < std::max<std::size_t>(3, size)) {
        throw ConfigError("single-domain: need at least " + std::to_string(std::max<std::size_t>(3, size)) +
                          " checkpoints, have " + std::to_string(setup.checkpoint_ids.size()));
    }
    const auto& base = *setup.base;
    const auto& registry = *setup.registry;
    std::vector<std::string> ids = setup.checkpoint_ids;
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
        throw ConfigError("single-domain: duplicate checkpoint ids");
    }
    for (const auto& issue : validate_recipe(uniform_recipe(ids), registry)) {
        if (issue.kind == "unknown-id") throw ConfigError("single-domain: " + issue.message);
        throw CompatibilityError("single-domain: " + issue.message);
    }

    std::vector<const DomainCorpus*> columns{setup.in_domain};
    columns.insert(columns.end(), setup.ood.begin(), setup.ood.end());
    std::vector<std::string> col_names;
    for (const auto* c : columns) col_names.push_back(c->name());

    auto single_name = [&](const std::string& id) {
        const auto& h = registry.get(id).meta.hyper;
        return "single:lr=" + lr_label(h.lr) + ",seed=" + std::to_string(h.data_seed);
    };
    std::map<double, std::vector<std::string>, std::greater<>> by_lr;
    for (const auto& id : ids) by_lr[registry.get(id).meta.hyper.lr].push_back(id);

    const auto combos = exhaustive_combos(ids, size);
    CellCache cache(base, registry, setup.eval);
    for (const auto* c : columns) {
        cache.want(ModelSpec{}, c);
        for (const auto& id : ids) cache.want(ModelSpec{{id}}, c);
        for (const auto& r : combos) cache.want(canonical(r.ids), c);
        cache.want(canonical(ids), c);
    }
    cache.run();

    auto ood_nats = [&](const ModelSpec& s) {
        if (setup.ood.empty()) return 0.0;
        double t = 0.0;
        for (const auto* c : setup.ood) t += cache.get(s, c).nats;
        return t / static_cast<double>(setup.ood.size());
    };

    std::vector<std::string> methods{"zero-shot"};
    std::vector<std::string> singles;
    for (const auto& [lr, group] : by_lr) {
        for (const auto& id : group) singles.push_back(id);
    }
    std::stable_sort(singles.begin(), singles.end(), [&](const std::string& a, const std::string& b) {
        const auto& ha = registry.get(a).meta.hyper;
        const auto& hb = registry.get(b).meta.hyper;
        if (ha.lr != hb.lr) return ha.lr > hb.lr;
        return ha.data_seed < hb.data_seed;
    });
    for (const auto& id : singles) methods.push_back(single_name(id));
    methods.push_back("single:best");
    for (const auto& [lr, group] : by_lr) methods.push_back("soup:lr=" + lr_label(lr));
    methods.push_back("soup:uniform-all");
    methods.push_back("soup:best-in-domain");
    methods.push_back("soup:best-ood");
    if (setup.logit_ensemble) methods.push_back("logit-ensemble");
    EvalReport report("single-domain", methods, col_names);

    auto fill_row = [&](const std::string& method, const ModelSpec& spec, const std::string& note = {}) {
        for (const auto* c : columns) {
            auto cell = cache.cell(spec, c);
            cell.note = note;
            report.set(method, c->name(), std::move(cell));
        }
    };
    fill_row("zero-shot", ModelSpec{});
    std::string best_single = ids.front();
    for (const auto& id : ids) {
        fill_row(single_name(id), ModelSpec{{id}});
        if (cache.get(ModelSpec{{id}}, setup.in_domain).nats < cache.get(ModelSpec{{best_single}}, setup.in_domain).nats) {
            best_single = id;
        }
    }
    fill_row("single:best", ModelSpec{{best_single}}, single_name(best_single));
    fill_row("soup:uniform-all", canonical(ids), "uniform over " + std::to_string(ids.size()) + " checkpoints");

    // Per-lr rows: recipes whose members all share the learning rate,
    // aggregated as the mean of nats (ppl = exp of that mean).
    nlohmann::ordered_json lr_groups = nlohmann::ordered_json::array();
    for (const auto& [lr, group] : by_lr) {
        std::set<std::string> members(group.begin(), group.end());
        std::vector<const SoupRecipe*> pure;
        for (const auto& r : combos) {
            if (std::all_of(r.ids.begin(), r.ids.end(), [&](const std::string& id) { return members.count(id); })) {
                pure.push_back(&r);
            }
        }
        const std::string method = "soup:lr=" + lr_label(lr);
        lr_groups.push_back({{"lr", lr}, {"checkpoints", group.size()}, {"recipes", pure.size()}});
        if (pure.empty()) continue;
        for (const auto* c : columns) {
            EvalCell cell;
            for (const auto* r : pure) {
                const auto& res = cache.get(canonical(r->ids), c);
                cell.nats += res.nats;
                cell.predicted += res.predicted;
                cell.flops += res.flops;
            }
            cell.nats /= static_cast<double>(pure.size());
            cell.ppl = std::exp(cell.nats);
            cell.model = "mean over " + std::to_string(pure.size()) + " recipe(s) at lr " + lr_label(lr);
            cell.note = "aggregate: ppl = exp(mean nats)";
            report.set(method, c->name(), std::move(cell));
        }
    }

    std::size_t best_id = 0, best_ood = 0;
    nlohmann::ordered_json recipes = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < combos.size(); ++k) {
        const auto spec = canonical(combos[k].ids);
        const double id_nats = cache.get(spec, setup.in_domain).nats;
        const double o = ood_nats(spec);
        if (id_nats < cache.get(canonical(combos[best_id].ids), setup.in_domain).nats) best_id = k;
        if (o < ood_nats(canonical(combos[best_ood].ids))) best_ood = k;
        std::vector<double> lrs;
        for (const auto& id : combos[k].ids) lrs.push_back(registry.get(id).meta.hyper.lr);
        nlohmann::ordered_json ood = nlohmann::ordered_json::object();
        for (const auto* c : setup.ood) ood[c->name()] = cache.get(spec, c).ppl;
        recipes.push_back({{"ids", combos[k].ids},
                           {"lrs", lrs},
                           {"in_domain_ppl", std::exp(id_nats)},
                           {"ood_ppl", ood},
                           {"ood_mean_nats", o}});
    }
    // The uniform soup over every checkpoint also competes for both "best" rows.
    const auto all_spec = canonical(ids);
    const bool all_wins_id = cache.get(all_spec, setup.in_domain).nats <
                             cache.get(canonical(combos[best_id].ids), setup.in_domain).nats;
    const bool all_wins_ood = ood_nats(all_spec) < ood_nats(canonical(combos[best_ood].ids));
    const auto best_id_spec = all_wins_id ? all_spec : canonical(combos[best_id].ids);
    fill_row("soup:best-in-domain", best_id_spec, all_wins_id ? "uniform-all" : "recipe " + std::to_string(best_id));
    fill_row("soup:best-ood", all_wins_ood ? all_spec : canonical(combos[best_ood].ids),
             all_wins_ood ? "uniform-all" : "recipe " + std::to_string(best_ood));

    if (setup.logit_ensemble) {
        std::vector<const AdapterWeights*> members;
        for (const auto& id : best_id_spec.ids) members.push_back(&registry.get(id));
        std::vector<std::optional<PerplexityResult>> res(columns.size());
        parallel_for(columns.size(), setup.eval.workers, [&](std::size_t i) {
            res[i] = logit_ensemble_perplexity(base, members, *columns[i], Split::kTest, setup.eval);
        });
        for (std::size_t i = 0; i < columns.size(); ++i) {
            auto cell = to_cell(*res[i], best_id_spec.key(), Split::kTest);
            cell.note = "logit average of the best in-domain recipe's members";
            report.set("logit-ensemble", columns[i]->name(), std::move(cell));
        }
    }

    auto& meta = report.metadata;
    meta["base_hash"] = base.content_hash();
    meta["model_config"] = to_json(base.config);
    meta["in_domain"] = setup.in_domain->name();
    meta["checkpoints"] = ids;
    meta["combo_size"] = size;
    meta["recipe_count"] = combos.size();
    meta["lr_groups"] = lr_groups;
    meta["recipes"] = recipes;
    meta["best_in_domain_recipe"] = all_wins_id ? nlohmann::ordered_json("uniform-all") : nlohmann::ordered_json(best_id);
    meta["best_ood_recipe"] = all_wins_ood ? nlohmann::ordered_json("uniform-all") : nlohmann::ordered_json(best_ood);
    nlohmann::ordered_json hashes = nlohmann::ordered_json::object();
    for (const auto* c : columns) hashes[c->name()] = c->content_hash();
    meta["corpus_hashes"] = hashes;

    // Learning-rate trend: lowest vs highest lr group.
    const auto low = "soup:lr=" + lr_label(by_lr.rbegin()->first);
    const auto high = "soup:lr=" + lr_label(by_lr.begin()->first);
    const auto& lo_id = report.at(low, setup.in_domain->name());
    const auto& hi_id = report.at(high, setup.in_domain->name());
    nlohmann::ordered_json trend;
    trend["low_lr"] = by_lr.rbegin()->first;
    trend["high_lr"] = by_lr.begin()->first;
    if (lo_id && hi_id) {
        trend["in_domain_low_lr_ppl"] = lo_id->ppl;
        trend["in_domain_high_lr_ppl"] = hi_id->ppl;
        trend["in_domain_low_lr_better"] = lo_id->ppl < hi_id->ppl;
        if (!setup.ood.empty()) {
            double lo = 0.0, hi = 0.0;
            for (const auto* c : setup.ood) {
                lo += report.at(low, c->name())->nats;
                hi += report.at(high, c->name())->nats;
            }
            const double n = static_cast<double>(setup.ood.size());
            trend["ood_low_lr_ppl"] = std::exp(lo / n);
            trend["ood_high_lr_ppl"] = std::exp(hi / n);
            trend["ood_high_lr_better"] = hi < lo;
        }
    }
    meta["trend"] = trend;
    return report;
}

// --- cost model --------------------------------------------------------------

CostEstimate cost_estimate(std::int64_t layers, std::int64_t d_model, std::int64_t bottleneck, std::int64_t T) {
    if (layers <= 0 || d_model <= 0 || bottleneck <= 0 || T <= 0) {
        throw ConfigError("cost_estimate: L, d_model, d and T must be positive");
    }
    CostEstimate c;
    c.layers = static_cast<std::uint64_t>(layers);
    c.d_model = static_cast<std::uint64_t>(d_model);
    c.bottleneck = static_cast<std::uint64_t>(bottleneck);
    c.tree_depth = static_cast<std::uint64_t>(T);
    const std::uint64_t per = 4 * c.layers * c.d_model * c.bottleneck;
    c.adapter_train_flops = per;
    c.adapter_inference_flops = per;
    c.hierarchy_train_flops = per * c.tree_depth;
    c.hierarchy_inference_flops = per * c.tree_depth * 2;
    auto ratio = [](std::uint64_t a, std::uint64_t b) {
        const auto g = std::gcd(a, b);
        return Ratio{a / g, b / g};
    };
    c.train_ratio = ratio(c.hierarchy_train_flops, c.adapter_train_flops);
    c.inference_ratio = ratio(c.hierarchy_inference_flops, c.adapter_inference_flops);
    return c;
}

nlohmann::ordered_json to_json(const CostEstimate& c) {
    return {{"L", c.layers},
            {"d_model", c.d_model},
            {"d", c.bottleneck},
            {"T", c.tree_depth},
            {"adapter_train_flops_per_token", c.adapter_train_flops},
            {"adapter_inference_flops_per_token", c.adapter_inference_flops},
            {"hierarchy_train_flops_per_token", c.hierarchy_train_flops},
            {"hierarchy_inference_flops_per_token", c.hierarchy_inference_flops},
            {"train_ratio", std::to_string(c.train_ratio.num) + "/" + std::to_string(c.train_ratio.den)},
            {"inference_ratio", std::to_string(c.inference_ratio.num) + "/" + std::to_string(c.inference_ratio.den)}};
}

}  // namespace soup
