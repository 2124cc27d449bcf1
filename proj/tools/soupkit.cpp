#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "soupkit/binary_io.hpp"
#include "soupkit/error.hpp"
#include "soupkit/pipeline.hpp"

namespace fs = std::filesystem;
using namespace soup;

namespace {

struct Globals {
    std::string config_path;
    std::string workspace;
    std::vector<std::string> settings;
    std::size_t workers = 0;
};

PipelineConfig resolve_config(const Globals& g) {
    PipelineConfig cfg;
    if (!g.config_path.empty()) cfg = load_config(g.config_path, cfg);
    if (const char* env = std::getenv("SOUPKIT_WORKSPACE"); env && *env) cfg.workspace = env;
    if (!g.workspace.empty()) cfg.workspace = g.workspace;
    for (const auto& s : g.settings) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + s + "'");
        apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    if (g.workers > 0) cfg.workers = g.workers;
    validate(cfg);
    return cfg;
}

std::string fixed(double v, int prec = 2) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

void print_matrix(const EvalReport& r) {
    std::size_t w0 = 6;
    for (const auto& m : r.methods) w0 = std::max(w0, m.size());
    std::vector<std::size_t> w;
    for (const auto& d : r.domains) w.push_back(std::max<std::size_t>(9, d.size()));
    std::printf("%s\n%-*s", r.title.c_str(), static_cast<int>(w0), "method");
    for (std::size_t j = 0; j < r.domains.size(); ++j) std::printf("  %*s", static_cast<int>(w[j]), r.domains[j].c_str());
    std::printf("  %9s\n", "Avg");
    for (std::size_t i = 0; i < r.methods.size(); ++i) {
        std::printf("%-*s", static_cast<int>(w0), r.methods[i].c_str());
        for (std::size_t j = 0; j < r.domains.size(); ++j) {
            const auto& c = r.cells[i][j];
            std::printf("  %*s", static_cast<int>(w[j]), c ? fixed(c->ppl).c_str() : "-");
        }
        const auto avg = r.average(r.methods[i]);
        std::printf("  %9s\n", avg ? fixed(*avg).c_str() : "-");
    }
}

void print_selection(const std::string& novel, const SelectionResult& s) {
    std::printf("%s  [%s%s]\n", novel.c_str(), s.method.c_str(), s.fallback ? ", fallback" : "");
    for (const auto& c : s.ranked) {
        const bool chosen = std::find(s.chosen.begin(), s.chosen.end(), c.domain) != s.chosen.end();
        std::printf("  %c %-20s %.4f\n", chosen ? '*' : ' ', c.domain.c_str(), c.score);
    }
}

// Domains selected per novel domain, one line per method.
void print_selected_domains(const EvalReport& r) {
    if (!r.metadata.contains("selections")) return;
    std::printf("\nselected domains\n");
    for (const auto& [novel, by_method] : r.metadata["selections"].items()) {
        for (const auto& [method, sel] : by_method.items()) {
            std::string list;
            for (const auto& d : sel["chosen"]) list += (list.empty() ? "" : ", ") + d.get<std::string>();
            std::printf("  %-12s %-8s %s\n", novel.c_str(), method.c_str(), list.c_str());
        }
    }
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const auto next = s.find(',', pos);
        const auto item = s.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
        if (!item.empty()) out.push_back(item);
        if (next == std::string::npos) break;
        pos = next + 1;
    }
    return out;
}

void require_ready(const Workspace& ws, const std::string& suite) {
    const auto missing = ws.missing_prerequisites(suite);
    if (missing.empty()) return;
    std::string msg = "missing prerequisites:";
    for (const auto& m : missing) msg += "\n  - " + m;
    throw DataError(msg);
}

int run(int argc, char** argv) {
    CLI::App app{"soupkit: train, select, average and evaluate domain adapters"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("-c,--config", g.config_path, "INI config file");
    app.add_option("-w,--workspace", g.workspace, "Workspace directory (overrides SOUPKIT_WORKSPACE)");
    app.add_option("-s,--set", g.settings, "Override section.key=value (repeatable)");
    app.add_option("-j,--workers", g.workers, "Worker threads");

    auto* prepare = app.add_subcommand("prepare", "Materialize the tokenizer and domain corpora");

    auto* train = app.add_subcommand("train", "Pretrain the base if needed and train adapters");
    std::string domains, sweep;
    train->add_option("--domains", domains, "'all' or a comma-separated list of training domains");
    train->add_option("--sweep", sweep, "lr x seed sweep on the sweep domain: 'grid' (built-in 5 x 3) or 'config'")
        ->check(CLI::IsMember({"grid", "config"}));

    auto* select = app.add_subcommand("select", "Rank training domains for a novel domain");
    std::string sel_novel, sel_method = "cluster";
    select->add_option("--novel", sel_novel, "Novel domain")->required();
    select->add_option("--method", sel_method, "cosine or cluster")->check(CLI::IsMember({"cosine", "cluster"}));

    auto* soupcmd = app.add_subcommand("soup", "Average adapters into one checkpoint");
    std::string soup_novel, soup_method = "cluster", soup_ids;
    soupcmd->add_option("--novel", soup_novel, "Novel domain");
    soupcmd->add_option("--method", soup_method, "uniform, cosine, cluster or manual")
        ->check(CLI::IsMember({"uniform", "cosine", "cluster", "manual"}));
    soupcmd->add_option("--ids", soup_ids, "Comma-separated adapter ids, prefixes or aliases (manual)");

    auto* eval = app.add_subcommand("eval", "Evaluate a suite and write its report");
    std::string suite = "cross_domain", cell_method, cell_domain, report_name;
    eval->add_option("--suite", suite, "cross_domain, single_domain or cell")
        ->check(CLI::IsMember({"cross_domain", "single_domain", "cell"}));
    eval->add_option("--method", cell_method, "Row method (cell suite)");
    eval->add_option("--domain", cell_domain, "Column domain (cell suite)");
    eval->add_option("--name", report_name, "Report name (default: the suite name)");

    auto* report = app.add_subcommand("report", "Print a written report");
    std::string show_name = "cross_domain", show_format = "table";
    report->add_option("--name", show_name, "Report name");
    report->add_option("--format", show_format, "table, csv or json")
        ->check(CLI::IsMember({"table", "csv", "json"}));

    auto* cost = app.add_subcommand("cost", "FLOP cost model of adapters vs a depth-T hierarchy");
    std::int64_t L = 12, d_model = 768, bottleneck = 64, T = 8;
    cost->add_option("--layers", L, "Transformer layers");
    cost->add_option("--d-model", d_model, "Hidden size");
    cost->add_option("--bottleneck", bottleneck, "Adapter bottleneck size");
    cost->add_option("--depth", T, "Hierarchy tree depth T");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
    }

    if (cost->parsed()) {
        const auto c = cost_estimate(L, d_model, bottleneck, T);
        std::printf("%s\n", to_json(c).dump(2).c_str());
        return 0;
    }

    const auto cfg = resolve_config(g);
    if (report->parsed()) {
        Workspace ws(cfg);
        const auto path = ws.reports_dir() / (show_name + ".json");
        if (!fs::exists(path)) throw IoError("report not found: " + path.string());
        const auto r = report_from_json(nlohmann::json::parse(io::read_text(path)));
        if (show_format == "json") {
            std::printf("%s\n", to_json(r).dump(2).c_str());
        } else if (show_format == "csv") {
            std::fputs(report_csv(r).c_str(), stdout);
        } else {
            print_matrix(r);
            print_selected_domains(r);
        }
        return 0;
    }

    WorkspaceLock lock(cfg.workspace);
    Workspace ws(cfg);

    if (prepare->parsed()) {
        ws.write_snapshot("prepare");
        const bool changed = ws.prepare();
        const auto names = domain_names(cfg);
        std::printf("%s: %zu training + %zu novel domains in %s\n", changed ? "prepared" : "up to date",
                    names.training.size(), names.novel.size(), ws.root().c_str());
        return 0;
    }

    if (train->parsed()) {
        ws.write_snapshot("train");
        const bool fresh = ws.ensure_base();
        std::printf("base: %s\n", fresh ? "pretrained" : "up to date");
        if (!domains.empty()) {
            const auto [n, skipped] = ws.train_domains(split_commas(domains));
            std::printf("domain adapters: %zu trained, %zu already present\n", n, skipped);
        }
        if (!sweep.empty()) {
            std::vector<double> lrs = cfg.sweep_lrs;
            std::vector<std::uint64_t> seeds = cfg.sweep_seeds;
            if (sweep == "grid") {
                lrs.assign(std::begin(kSweepLrGrid), std::end(kSweepLrGrid));
                seeds.assign(std::begin(kSweepSeeds), std::end(kSweepSeeds));
            }
            const auto [n, skipped] = ws.train_sweep(lrs, seeds);
            std::printf("sweep checkpoints: %zu trained, %zu already present\n", n, skipped);
        }
        return 0;
    }

    if (select->parsed()) {
        ws.write_snapshot("select");
        print_selection(sel_novel, ws.select(sel_novel, sel_method));
        return 0;
    }

    if (soupcmd->parsed()) {
        ws.write_snapshot("soup");
        if (soup_method != "manual" && !soup_ids.empty()) throw ConfigError("--ids is only valid with --method manual");
        const auto out = ws.soup(soup_novel, soup_method, split_commas(soup_ids));
        if (soup_method == "cosine" || soup_method == "cluster") print_selection(soup_novel, out.selection);
        std::printf("recipe: %zu adapters (%s)\n", out.recipe.size(), out.recipe.method.c_str());
        for (const auto& id : out.recipe.ids) std::printf("  %s\n", id.c_str());
        std::printf("soup %s -> %s\n", out.soup_id.c_str(), (out.dir / "soup.ckpt").c_str());
        return 0;
    }

    if (eval->parsed()) {
        ws.write_snapshot("eval");
        require_ready(ws, suite);
        if (suite == "cell") {
            if (cell_method.empty() || cell_domain.empty()) throw ConfigError("--suite cell needs --method and --domain");
            const auto c = ws.eval_cell(cell_method, cell_domain);
            std::printf("%.17g\n", c.ppl);
            return 0;
        }
        const auto r = suite == "cross_domain" ? ws.eval_cross_domain() : ws.eval_single_domain();
        const auto name = report_name.empty() ? suite : report_name;
        const auto paths = ws.write_report(r, name);
        print_matrix(r);
        if (suite == "cross_domain") print_selected_domains(r);
        if (suite == "single_domain") {
            std::printf("\n%s recipes evaluated\n", r.metadata["recipe_count"].dump().c_str());
        }
        for (const auto& p : paths) std::printf("wrote %s\n", p.c_str());
        // Single-domain per-lr rows are legitimately empty when no recipe is lr-pure.
        if (suite == "cross_domain" && !r.complete()) {
            std::fprintf(stderr, "error: some requested cells could not be computed\n");
            return static_cast<int>(ExitCode::kData);
        }
        return 0;
    }
    return static_cast<int>(ExitCode::kUsage);
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const Error& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return static_cast<int>(e.code());
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return static_cast<int>(ExitCode::kIo);
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "format error: %s\n", e.what());
        return static_cast<int>(ExitCode::kData);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return static_cast<int>(ExitCode::kData);
    }
}
