#include "soupkit/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <functional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "soupkit/binary_io.hpp"
#include "soupkit/error.hpp"
#include "soupkit/hash.hpp"
#include "soupkit/parallel.hpp"
#include "soupkit/rng.hpp"

namespace soup {

namespace fs = std::filesystem;

// --- value parsing -----------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream in(v);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    unsigned long long x = 0;
    try {
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
        x = std::stoull(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return x;
}

std::uint32_t to_u32(const std::string& key, const std::string& v) {
    const auto x = to_u64(key, v);
    if (x > 0xFFFFFFFFull) throw ConfigError(key + ": value out of range");
    return static_cast<std::uint32_t>(x);
}

double to_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double x = 0;
    try {
        x = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return x;
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& s : v) out += (out.empty() ? "" : ",") + s;
    return out;
}

struct Key {
    std::string name;
    std::function<void(PipelineConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const PipelineConfig&)> get;
};

#define SOUP_U32(NAME, FIELD)                                                                          \
    Key {                                                                                              \
        NAME, [](PipelineConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_u32(k, v); }, \
            [](const PipelineConfig& c) { return std::to_string(c.FIELD); }                           \
    }
#define SOUP_U64(NAME, FIELD)                                                                          \
    Key {                                                                                              \
        NAME, [](PipelineConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_u64(k, v); }, \
            [](const PipelineConfig& c) { return std::to_string(c.FIELD); }                           \
    }
#define SOUP_DBL(NAME, FIELD)                                                                             \
    Key {                                                                                                 \
        NAME, [](PipelineConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_double(k, v); }, \
            [](const PipelineConfig& c) { return fmt(c.FIELD); }                                          \
    }
#define SOUP_BOOL(NAME, FIELD)                                                                          \
    Key {                                                                                               \
        NAME, [](PipelineConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_bool(k, v); }, \
            [](const PipelineConfig& c) { return std::string(c.FIELD ? "true" : "false"); }            \
    }
#define SOUP_STR(NAME, FIELD)                                                                    \
    Key {                                                                                        \
        NAME, [](PipelineConfig& c, const std::string&, const std::string& v) { c.FIELD = v; }, \
            [](const PipelineConfig& c) { return std::string(c.FIELD); }                        \
    }
#define SOUP_LIST(NAME, FIELD)                                                                               \
    Key {                                                                                                    \
        NAME, [](PipelineConfig& c, const std::string&, const std::string& v) { c.FIELD = split_list(v); }, \
            [](const PipelineConfig& c) { return join(c.FIELD); }                                           \
    }

const std::vector<Key>& keys() {
    static const std::vector<Key> k = {
        SOUP_U32("model.layers", model.layers),
        SOUP_U32("model.d_model", model.d_model),
        SOUP_U32("model.heads", model.heads),
        SOUP_U32("model.context", model.context),
        SOUP_U32("model.vocab", model.vocab),
        SOUP_U32("model.bottleneck", model.bottleneck),
        SOUP_U64("model.base_seed", model.base_seed),
        SOUP_U64("model.adapter_seed", model.adapter_seed),
        SOUP_DBL("train.lr", train.lr),
        SOUP_U64("train.data_seed", train.data_seed),
        SOUP_U32("train.epochs", train.epochs),
        SOUP_U32("train.batch_size", train.batch_size),
        SOUP_U32("train.grad_accum", train.grad_accum),
        SOUP_U64("train.max_steps", train.max_steps),
        SOUP_U32("train.seq_len", train.seq_len),
        Key{"train.schedule",
            [](PipelineConfig& c, const std::string&, const std::string& v) { c.train.schedule = parse_schedule(v); },
            [](const PipelineConfig& c) { return schedule_name(c.train.schedule); }},
        SOUP_BOOL("train.finite_checks", train.finite_checks),
        SOUP_U64("train.adapter_init_seed", adapter_init_seed),
        SOUP_DBL("pretrain.lr", pretrain.lr),
        SOUP_U64("pretrain.steps", pretrain.steps),
        SOUP_U32("pretrain.batch_size", pretrain.batch_size),
        SOUP_U32("pretrain.seq_len", pretrain.seq_len),
        SOUP_U64("pretrain.seed", pretrain.seed),
        SOUP_STR("data.mode", data.mode),
        SOUP_U64("data.seed", data.seed),
        SOUP_U64("data.world_seed", data.world_seed),
        SOUP_U32("data.training_domains", data.training_domains),
        SOUP_U32("data.novel_domains", data.novel_domains),
        SOUP_U64("data.train_tokens", data.train_tokens),
        SOUP_U64("data.heldout_tokens", data.heldout_tokens),
        SOUP_U64("data.test_tokens", data.test_tokens),
        SOUP_U64("data.tokenizer_chars", data.tokenizer_chars),
        Key{"data.raw_dir", [](PipelineConfig& c, const std::string&, const std::string& v) { c.data.raw_dir = v; },
            [](const PipelineConfig& c) { return c.data.raw_dir.string(); }},
        SOUP_LIST("data.training", data.training),
        SOUP_LIST("data.novel", data.novel),
        Key{"data.fractions",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                const auto parts = split_list(v);
                if (parts.size() != 3) throw ConfigError(k + ": expected three comma-separated fractions");
                for (int i = 0; i < 3; ++i) c.data.fractions[i] = to_double(k, parts[i]);
            },
            [](const PipelineConfig& c) {
                return fmt(c.data.fractions[0]) + "," + fmt(c.data.fractions[1]) + "," + fmt(c.data.fractions[2]);
            }},
        SOUP_DBL("selection.threshold", selection.threshold),
        SOUP_DBL("selection.mass_threshold", selection.mass_threshold),
        SOUP_U64("selection.max_adapters", selection.max_adapters),
        SOUP_U64("selection.n_sequences", selection.n_sequences),
        SOUP_U64("selection.seq_len", selection.seq_len),
        SOUP_U64("selection.seed", selection.seed),
        SOUP_U64("selection.gmm_seed", selection.gmm.seed),
        SOUP_U64("selection.gmm_restarts", selection.gmm.restarts),
        SOUP_U64("selection.gmm_max_iterations", selection.gmm.max_iterations),
        SOUP_DBL("selection.gmm_tolerance", selection.gmm.tolerance),
        SOUP_BOOL("selection.pca", selection.gmm.pca),
        SOUP_U64("selection.pca_max_dims", selection.gmm.pca_max_dims),
        SOUP_U64("eval.seq_len", eval.seq_len),
        SOUP_U64("eval.batch", eval.batch),
        SOUP_U64("run.workers", workers),
        SOUP_STR("sweep.domain", sweep_domain),
        Key{"sweep.lrs",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.sweep_lrs.clear();
                for (const auto& p : split_list(v)) c.sweep_lrs.push_back(to_double(k, p));
            },
            [](const PipelineConfig& c) {
                std::vector<std::string> out;
                for (double lr : c.sweep_lrs) out.push_back(fmt(lr));
                return join(out);
            }},
        Key{"sweep.seeds",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.sweep_seeds.clear();
                for (const auto& p : split_list(v)) c.sweep_seeds.push_back(to_u64(k, p));
            },
            [](const PipelineConfig& c) {
                std::vector<std::string> out;
                for (auto s : c.sweep_seeds) out.push_back(std::to_string(s));
                return join(out);
            }},
        SOUP_LIST("sweep.ood", ood),
    };
    return k;
}

#undef SOUP_U32
#undef SOUP_U64
#undef SOUP_DBL
#undef SOUP_BOOL
#undef SOUP_STR
#undef SOUP_LIST

}  // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> out{"workspace.path"};
    for (const auto& k : keys()) out.push_back(k.name);
    return out;
}

void apply_setting(PipelineConfig& cfg, const std::string& key, const std::string& value) {
    const auto v = trim(value);
    if (key == "workspace.path") {
        cfg.workspace = v;
        return;
    }
    for (const auto& k : keys()) {
        if (k.name == key) {
            k.set(cfg, key, v);
            return;
        }
    }
    throw ConfigError("unknown setting '" + key + "'");
}

PipelineConfig parse_config(const std::string& text, PipelineConfig base) {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("config file: ") + e.what());
    }
    for (const auto& [section, body] : tree) {
        if (body.empty()) throw ConfigError("config file: key '" + section + "' must be inside a [section]");
        for (const auto& [key, value] : body) apply_setting(base, section + "." + key, value.data());
    }
    return base;
}

PipelineConfig load_config(const fs::path& path, PipelineConfig base) {
    if (!fs::exists(path)) throw IoError("config file not found: " + path.string());
    return parse_config(io::read_text(path), std::move(base));
}

std::string to_ini(const PipelineConfig& cfg) {
    std::string out;
    std::string section;
    for (const auto& k : keys()) {
        const auto dot = k.name.find('.');
        const auto sec = k.name.substr(0, dot);
        if (sec != section) {
            out += (out.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
            section = sec;
        }
        out += k.name.substr(dot + 1) + " = " + k.get(cfg) + "\n";
    }
    return out;
}

void validate(const PipelineConfig& cfg) {
    cfg.model.validate();
    cfg.train.validate();
    validate_fractions(cfg.data.fractions);
    if (cfg.data.mode != "synthetic" && cfg.data.mode != "ingest") {
        throw ConfigError("data.mode must be synthetic or ingest, got '" + cfg.data.mode + "'");
    }
    if (cfg.data.mode == "synthetic") {
        if (cfg.data.training_domains == 0 || cfg.data.training_domains > 8) {
            throw ConfigError("data.training_domains must be in [1, 8] for the synthetic preset");
        }
        if (cfg.data.novel_domains > 3) throw ConfigError("data.novel_domains must be in [0, 3] for the synthetic preset");
        for (std::uint32_t j = 0; j < cfg.data.novel_domains; ++j) {
            if (j + 3 >= cfg.data.training_domains) {
                throw ConfigError("synthetic novel domain " + std::to_string(j) + " needs training topic " +
                                  std::to_string(j + 3));
            }
        }
    } else if (cfg.data.training.empty()) {
        throw ConfigError("data.training must list at least one domain in ingest mode");
    }
    if (cfg.selection.max_adapters == 0) throw ConfigError("selection.max_adapters must be >= 1");
    if (cfg.selection.n_sequences < 2) throw ConfigError("selection.n_sequences must be >= 2");
    if (cfg.eval.batch == 0) throw ConfigError("eval.batch must be >= 1");
    if (cfg.workers == 0) throw ConfigError("run.workers must be >= 1");
}

DomainNames domain_names(const PipelineConfig& cfg) {
    DomainNames n;
    if (cfg.data.mode == "ingest") {
        n.training = cfg.data.training;
        n.novel = cfg.data.novel;
        return n;
    }
    for (std::uint32_t i = 0; i < cfg.data.training_domains; ++i) n.training.push_back("train" + std::to_string(i));
    for (std::uint32_t j = 0; j < cfg.data.novel_domains; ++j) n.novel.push_back("novel" + std::to_string(j));
    return n;
}

std::vector<SyntheticDomainSpec> synthetic_specs(const PipelineConfig& cfg) {
    std::vector<SyntheticDomainSpec> out;
    SyntheticWorldConfig world;
    world.seed = cfg.data.world_seed;
    const auto names = domain_names(cfg);
    for (std::uint32_t i = 0; i < names.training.size(); ++i) {
        SyntheticDomainSpec s;
        s.name = names.training[i];
        s.role = DomainRole::kTraining;
        s.seed = Rng::derive(cfg.data.seed, 1, i);
        s.world = world;
        const std::uint32_t topic[] = {i};
        s.profile = topic_profile(world.topics, topic);
        s.grammar = i % kGrammarCount;
        s.split_tokens = {cfg.data.train_tokens, cfg.data.heldout_tokens, cfg.data.test_tokens};
        out.push_back(std::move(s));
    }
    for (std::uint32_t j = 0; j < names.novel.size(); ++j) {
        SyntheticDomainSpec s;
        s.name = names.novel[j];
        s.role = DomainRole::kNovel;
        s.seed = Rng::derive(cfg.data.seed, 2, j);
        s.world = world;
        const std::uint32_t topics[] = {j, j + 3};
        s.profile = topic_profile(world.topics, topics);
        s.grammar = j % kGrammarCount;
        // Novel domains never train; their train split only needs to exist.
        s.split_tokens = {cfg.data.heldout_tokens, cfg.data.heldout_tokens, cfg.data.test_tokens};
        out.push_back(std::move(s));
    }
    return out;
}

// --- lock --------------------------------------------------------------------

WorkspaceLock::WorkspaceLock(const fs::path& workspace) {
    std::error_code ec;
    fs::create_directories(workspace, ec);
    if (ec) throw IoError("cannot create workspace " + workspace.string() + ": " + ec.message());
    const auto path = workspace / ".lock";
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file " + path.string() + ": " + std::strerror(errno));
    while (::flock(fd_, LOCK_EX) != 0) {
        if (errno == EINTR) continue;
        const int err = errno;
        ::close(fd_);
        throw IoError("cannot lock " + path.string() + ": " + std::strerror(err));
    }
}

WorkspaceLock::~WorkspaceLock() {
    if (fd_ >= 0) {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
}

// --- workspace ---------------------------------------------------------------

namespace {

std::string prepare_key(const PipelineConfig& cfg) {
    nlohmann::ordered_json j;
    j["mode"] = cfg.data.mode;
    j["seed"] = cfg.data.seed;
    j["world_seed"] = cfg.data.world_seed;
    j["training"] = domain_names(cfg).training;
    j["novel"] = domain_names(cfg).novel;
    j["tokens"] = {cfg.data.train_tokens, cfg.data.heldout_tokens, cfg.data.test_tokens};
    j["tokenizer_chars"] = cfg.data.tokenizer_chars;
    j["raw_dir"] = cfg.data.raw_dir.string();
    j["fractions"] = cfg.data.fractions;
    j["vocab"] = cfg.model.vocab;
    return sha256_hex(j.dump());
}

}  // namespace

Workspace::Workspace(PipelineConfig cfg) : cfg_(std::move(cfg)) { validate(cfg_); }

fs::path Workspace::corpus_dir(const std::string& domain) const { return root() / "corpora" / domain; }
fs::path Workspace::tokenizer_path() const { return root() / "tokenizer.bin"; }
fs::path Workspace::base_path() const { return root() / "base.ckpt"; }
fs::path Workspace::registry_dir() const { return root() / "registry"; }
fs::path Workspace::reports_dir() const { return root() / "reports"; }

bool Workspace::prepare() {
    const auto key = prepare_key(cfg_);
    const auto stamp = root() / "prepare.json";
    const auto names = domain_names(cfg_);
    if (fs::exists(stamp) && fs::exists(tokenizer_path())) {
        try {
            const auto j = nlohmann::json::parse(io::read_text(stamp));
            if (j.at("config_hash").get<std::string>() == key) {
                bool ok = true;
                for (const auto* list : {&names.training, &names.novel}) {
                    for (const auto& d : *list) {
                        if (load_corpus(corpus_dir(d)).content_hash() != j.at("corpora").at(d).get<std::string>()) {
                            ok = false;
                        }
                    }
                }
                if (ok) return false;
            }
        } catch (const nlohmann::json::exception&) {
        } catch (const Error&) {
        }
    }

    Tokenizer tok;
    std::vector<DomainCorpus> corpora;
    if (cfg_.data.mode == "synthetic") {
        const auto specs = synthetic_specs(cfg_);
        std::vector<std::string> texts;
        for (const auto& s : specs) {
            if (s.role == DomainRole::kTraining) texts.push_back(synthetic_text(s, Split::kTrain, cfg_.data.tokenizer_chars));
        }
        tok = Tokenizer::train(texts, cfg_.model.vocab);
        for (const auto& s : specs) corpora.push_back(generate_synthetic_domain(s, tok));
    } else {
        if (cfg_.data.raw_dir.empty()) throw ConfigError("data.raw_dir is required in ingest mode");
        if (!fs::is_directory(cfg_.data.raw_dir)) {
            throw IoError("raw data directory not found: " + cfg_.data.raw_dir.string());
        }
        std::vector<std::string> texts;
        for (const auto& d : names.training) {
            texts.push_back(split_directory(cfg_.data.raw_dir / d, cfg_.data.fractions).text[0]);
        }
        tok = Tokenizer::train(texts, cfg_.model.vocab);
        for (const auto& d : names.training) {
            corpora.push_back(ingest_domain(cfg_.data.raw_dir / d, d, cfg_.data.fractions, tok, DomainRole::kTraining));
        }
        for (const auto& d : names.novel) {
            corpora.push_back(ingest_domain(cfg_.data.raw_dir / d, d, cfg_.data.fractions, tok, DomainRole::kNovel));
        }
    }
    fs::create_directories(root());
    tok.save(tokenizer_path());
    nlohmann::ordered_json hashes = nlohmann::ordered_json::object();
    for (const auto& c : corpora) {
        save_corpus(c, corpus_dir(c.name()));
        hashes[c.name()] = c.content_hash();
    }
    nlohmann::ordered_json j;
    j["config_hash"] = key;
    j["tokenizer"] = tok.fingerprint();
    j["corpora"] = hashes;
    io::write_text_atomic(stamp, j.dump(2) + "\n");
    return true;
}

Tokenizer Workspace::tokenizer() const {
    if (!fs::exists(tokenizer_path())) throw DataError("workspace not prepared: missing " + tokenizer_path().string());
    return Tokenizer::load(tokenizer_path());
}

DomainCorpus Workspace::corpus(const std::string& domain) const {
    const auto dir = corpus_dir(domain);
    if (!fs::exists(dir)) throw DataError("workspace has no corpus for domain '" + domain + "' (run prepare)");
    return load_corpus(dir);
}

bool Workspace::ensure_base() {
    const auto names = domain_names(cfg_);
    const auto tok = tokenizer();
    nlohmann::ordered_json key;
    key["model"] = to_json(cfg_.model);
    key["pretrain"] = to_json(cfg_.pretrain);
    key["tokenizer"] = tok.fingerprint();
    std::vector<DomainCorpus> corpora;
    for (const auto& d : names.training) corpora.push_back(corpus(d));
    nlohmann::ordered_json hashes = nlohmann::ordered_json::object();
    for (const auto& c : corpora) hashes[c.name()] = c.content_hash();
    key["corpora"] = hashes;
    const auto k = sha256_hex(key.dump());
    const auto stamp = root() / "base.json";
    if (fs::exists(stamp) && fs::exists(base_path())) {
        try {
            const auto j = nlohmann::json::parse(io::read_text(stamp));
            if (j.at("key").get<std::string>() == k && load_base(base_path()).content_hash() == j.at("hash")) {
                return false;
            }
        } catch (const nlohmann::json::exception&) {
        } catch (const Error&) {
        }
    }
    auto base = init_base(cfg_.model, tok.fingerprint());
    double loss = 0.0;
    if (cfg_.pretrain.steps > 0) {
        std::vector<const DomainCorpus*> ptrs;
        for (const auto& c : corpora) ptrs.push_back(&c);
        base = pretrain_base(std::move(base), ptrs, cfg_.pretrain, &loss);
    }
    save_checkpoint(base, base_path());
    nlohmann::ordered_json j;
    j["key"] = k;
    j["hash"] = base.content_hash();
    j["final_loss"] = loss;
    j["inputs"] = key;
    io::write_text_atomic(stamp, j.dump(2) + "\n");
    return true;
}

BaseModel Workspace::base() const {
    if (!fs::exists(base_path())) throw DataError("workspace has no base model (run train)");
    return load_base(base_path());
}

Registry Workspace::registry() const { return Registry::open(registry_dir()); }

namespace {

std::pair<std::size_t, std::size_t> run_missing(Registry& registry, const BaseModel& base,
                                                std::vector<TrainJob> jobs, std::size_t workers) {
    const auto hash = base.content_hash();
    std::vector<TrainJob> todo;
    for (auto& j : jobs) {
        if (!registry.find_job(j.domain, j.hyper, j.adapter_init_seed, hash)) todo.push_back(std::move(j));
    }
    const std::size_t skipped = jobs.size() - todo.size();
    if (todo.empty()) return {0, skipped};
    const auto outcomes = run_jobs(base, todo, workers);
    register_outcomes(registry, outcomes);
    for (const auto& o : outcomes) {
        if (!o.ok()) throw Error(o.code, "job " + o.job.domain + " (lr " + lr_label(o.job.hyper.lr) + ", seed " +
                                             std::to_string(o.job.hyper.data_seed) + ") failed: " + o.error);
    }
    return {todo.size(), skipped};
}

}  // namespace

std::pair<std::size_t, std::size_t> Workspace::train_domains(const std::vector<std::string>& domains) {
    const auto names = domain_names(cfg_);
    std::vector<std::string> list = domains;
    if (list.size() == 1 && list[0] == "all") list = names.training;
    if (list.empty()) throw ConfigError("train: no domains given");
    std::vector<DomainCorpus> corpora;
    corpora.reserve(list.size());
    for (const auto& d : list) {
        if (std::find(names.training.begin(), names.training.end(), d) == names.training.end()) {
            throw ConfigError("train: '" + d + "' is not a training domain");
        }
        corpora.push_back(corpus(d));
    }
    const auto b = base();
    auto reg = registry();
    std::vector<TrainJob> jobs;
    for (const auto& c : corpora) jobs.push_back({c.name(), &c, cfg_.train, cfg_.adapter_init_seed});
    return run_missing(reg, b, std::move(jobs), cfg_.workers);
}

TrainConfig Workspace::sweep_base_phi() const { return cfg_.train; }

std::pair<std::size_t, std::size_t> Workspace::train_sweep(const std::vector<double>& lrs,
                                                           const std::vector<std::uint64_t>& seeds) {
    if (lrs.empty() || seeds.empty()) throw ConfigError("sweep: learning-rate grid and seeds must be nonempty");
    const auto names = domain_names(cfg_);
    const auto domain = cfg_.sweep_domain.empty() ? names.training.front() : cfg_.sweep_domain;
    const auto c = corpus(domain);
    const auto b = base();
    auto reg = registry();
    std::vector<TrainJob> jobs;
    for (double lr : lrs) {
        for (auto seed : seeds) {
            TrainJob j{domain, &c, sweep_base_phi(), cfg_.adapter_init_seed};
            j.hyper.lr = lr;
            j.hyper.data_seed = seed;
            jobs.push_back(std::move(j));
        }
    }
    return run_missing(reg, b, std::move(jobs), cfg_.workers);
}

std::map<std::string, std::string> Workspace::domain_adapter_ids() const {
    const auto reg = registry();
    const auto hash = base().content_hash();
    std::map<std::string, std::string> out;
    for (const auto& d : domain_names(cfg_).training) {
        if (auto id = reg.find_job(d, cfg_.train, cfg_.adapter_init_seed, hash)) out[d] = *id;
    }
    return out;
}

std::vector<std::string> Workspace::sweep_ids() const {
    const auto reg = registry();
    const auto hash = base().content_hash();
    const auto names = domain_names(cfg_);
    const auto domain = cfg_.sweep_domain.empty() ? names.training.front() : cfg_.sweep_domain;
    std::vector<std::string> ids, missing;
    for (double lr : cfg_.sweep_lrs) {
        for (auto seed : cfg_.sweep_seeds) {
            auto phi = sweep_base_phi();
            phi.lr = lr;
            phi.data_seed = seed;
            if (auto id = reg.find_job(domain, phi, cfg_.adapter_init_seed, hash)) {
                ids.push_back(*id);
            } else {
                missing.push_back("lr " + lr_label(lr) + " seed " + std::to_string(seed));
            }
        }
    }
    if (!missing.empty()) {
        throw DataError("sweep checkpoints missing for " + domain + ": " + join(missing) + " (run train --sweep)");
    }
    return ids;
}

Workspace::Embeddings Workspace::selection_state(const std::vector<std::string>& novel) {
    const auto b = base();
    const auto names = domain_names(cfg_);
    Embeddings e;
    e.training.resize(names.training.size());
    parallel_for(names.training.size(), cfg_.workers, [&](std::size_t i) {
        e.training[i] = selection_embeddings(b, corpus(names.training[i]), Split::kTrain, cfg_.selection);
    });
    for (const auto& d : novel) e.novel[d] = selection_embeddings(b, corpus(d), Split::kHeldOut, cfg_.selection);
    auto gopt = cfg_.selection.gmm;
    if (gopt.components == 0) gopt.components = names.training.size();
    e.gmm = fit_gmm(std::span<const EmbeddingSet>(e.training), gopt);
    e.clusters = map_domains_to_clusters(e.gmm, e.training);
    fs::create_directories(root() / "selection");
    save_gmm(e.gmm, root() / "selection" / "gmm.bin");
    return e;
}

SelectionResult Workspace::select(const std::string& novel, const std::string& method) {
    const auto names = domain_names(cfg_);
    if (std::find(names.novel.begin(), names.novel.end(), novel) == names.novel.end()) {
        throw ConfigError("select: '" + novel + "' is not a novel domain");
    }
    if (method != "cosine" && method != "cluster") {
        throw ConfigError("select: method must be cosine or cluster, got '" + method + "'");
    }
    auto st = selection_state({novel});
    const auto& s = cfg_.selection;
    auto r = method == "cosine" ? cosine_select(st.novel.at(novel), st.training, s.threshold, s.max_adapters)
                                : cluster_select(st.gmm, st.clusters, st.novel.at(novel), s.mass_threshold,
                                                 s.max_adapters);
    io::write_text_atomic(root() / "selection" / (novel + "." + method + ".json"), to_json(r).dump(2) + "\n");
    return r;
}

SoupOutcome Workspace::soup(const std::string& novel, const std::string& method, const std::vector<std::string>& ids) {
    auto reg = registry();
    SoupOutcome out;
    const auto adapters = domain_adapter_ids();
    if (method == "uniform") {
        if (adapters.empty()) throw DataError("soup: no trained domain adapters (run train)");
        std::vector<std::string> all;
        for (const auto& [d, id] : adapters) all.push_back(id);
        out.recipe = uniform_recipe(all, "uniform", novel);
    } else if (method == "cosine" || method == "cluster") {
        if (novel.empty()) throw ConfigError("soup: --novel is required for " + method);
        out.selection = select(novel, method);
        std::vector<std::string> chosen, missing;
        for (const auto& d : out.selection.chosen) {
            auto it = adapters.find(d);
            if (it == adapters.end()) {
                missing.push_back(d);
            } else {
                chosen.push_back(it->second);
            }
        }
        if (!missing.empty()) throw DataError("soup: selected domains have no adapter: " + join(missing));
        out.recipe = uniform_recipe(chosen, method, novel);
        out.recipe.selection = to_json(out.selection);
    } else if (method == "manual") {
        if (ids.empty()) throw ConfigError("soup: --ids is required for manual recipes");
        std::vector<std::string> resolved;
        for (const auto& r : ids) resolved.push_back(reg.resolve(r));
        out.recipe = uniform_recipe(resolved, "manual", novel);
    } else {
        throw ConfigError("soup: unknown method '" + method + "'");
    }
    const auto weights = average_adapters(out.recipe, reg);
    out.soup_id = weights.id();
    out.dir = root() / "soups" / ((novel.empty() ? std::string("all") : novel) + "." + method);
    fs::create_directories(out.dir);
    save_recipe(out.recipe, out.dir / "recipe.json");
    io::write_text_atomic(out.dir / "selection.json", to_json(out.selection).dump(2) + "\n");
    save_checkpoint(weights, out.dir / "soup.ckpt");
    return out;
}

std::vector<std::string> Workspace::missing_prerequisites(const std::string& suite) const {
    std::vector<std::string> out;
    const auto names = domain_names(cfg_);
    if (!fs::exists(tokenizer_path())) out.push_back("tokenizer " + tokenizer_path().string() + " (run prepare)");
    auto need_corpus = [&](const std::string& d) {
        if (!fs::exists(corpus_dir(d) / "meta.json")) out.push_back("corpus " + corpus_dir(d).string() + " (run prepare)");
    };
    for (const auto& d : names.training) need_corpus(d);
    for (const auto& d : names.novel) need_corpus(d);
    if (suite == "single_domain") {
        for (const auto& d : cfg_.ood) need_corpus(d);
    }
    if (!fs::exists(base_path())) {
        out.push_back("base checkpoint " + base_path().string() + " (run train)");
        return out;
    }
    if (suite == "cross_domain") {
        if (names.novel.empty()) out.push_back("novel domains (data.novel_domains or data.novel)");
        const auto have = domain_adapter_ids();
        for (const auto& d : names.training) {
            if (!have.count(d)) out.push_back("adapter for training domain " + d + " (run train --domains all)");
        }
    } else if (suite == "single_domain") {
        const auto reg = registry();
        const auto hash = base().content_hash();
        const auto domain = cfg_.sweep_domain.empty() ? names.training.front() : cfg_.sweep_domain;
        for (double lr : cfg_.sweep_lrs) {
            for (auto seed : cfg_.sweep_seeds) {
                auto phi = sweep_base_phi();
                phi.lr = lr;
                phi.data_seed = seed;
                if (!reg.find_job(domain, phi, cfg_.adapter_init_seed, hash)) {
                    out.push_back("sweep checkpoint " + domain + " lr " + lr_label(lr) + " seed " +
                                  std::to_string(seed) + " (run train --sweep config)");
                }
            }
        }
    } else if (suite != "cell") {
        throw ConfigError("unknown suite '" + suite + "'");
    }
    return out;
}

EvalReport Workspace::eval_cross_domain(const std::vector<std::string>& methods) {
    const auto names = domain_names(cfg_);
    if (names.novel.empty()) throw ConfigError("cross-domain evaluation needs novel domains");
    const auto b = base();
    const auto reg = registry();
    std::vector<DomainCorpus> training, novel;
    for (const auto& d : names.training) training.push_back(corpus(d));
    for (const auto& d : names.novel) novel.push_back(corpus(d));
    CrossDomainSetup s;
    s.base = &b;
    s.registry = &reg;
    for (const auto& c : training) s.training.push_back(&c);
    for (const auto& c : novel) s.novel.push_back(&c);
    s.methods = methods;
    s.adapters = domain_adapter_ids();
    if (s.adapters.empty()) throw DataError("cross-domain evaluation: no trained domain adapters (run train)");
    s.selection = cfg_.selection;
    s.eval = cfg_.eval;
    s.eval.workers = cfg_.workers;
    auto r = run_cross_domain_experiment(s);
    r.metadata["train_config"] = to_json(cfg_.train);
    r.metadata["adapter_init_seed"] = cfg_.adapter_init_seed;
    return r;
}

EvalReport Workspace::eval_single_domain() {
    const auto names = domain_names(cfg_);
    const auto domain = cfg_.sweep_domain.empty() ? names.training.front() : cfg_.sweep_domain;
    const auto b = base();
    const auto reg = registry();
    const auto in = corpus(domain);
    std::vector<DomainCorpus> ood;
    for (const auto& d : cfg_.ood.empty() ? names.novel : cfg_.ood) ood.push_back(corpus(d));
    SingleDomainSetup s;
    s.base = &b;
    s.registry = &reg;
    s.checkpoint_ids = sweep_ids();
    s.in_domain = &in;
    for (const auto& c : ood) s.ood.push_back(&c);
    s.eval = cfg_.eval;
    s.eval.workers = cfg_.workers;
    return run_single_domain_experiment(s);
}

EvalCell Workspace::eval_cell(const std::string& method, const std::string& domain) {
    const auto names = domain_names(cfg_);
    if (method == "zero-shot" &&
        std::find(names.novel.begin(), names.novel.end(), domain) == names.novel.end()) {
        const auto c = corpus(domain);
        const auto r = perplexity(base(), nullptr, c, Split::kTest, cfg_.eval);
        EvalCell cell;
        cell.ppl = r.ppl;
        cell.nats = r.nats;
        cell.predicted = r.predicted;
        cell.flops = r.flops;
        cell.model = "base";
        return cell;
    }
    if (std::find(names.novel.begin(), names.novel.end(), domain) == names.novel.end()) {
        throw ConfigError("eval cell: '" + domain + "' is not a novel domain");
    }
    const auto b = base();
    const auto reg = registry();
    std::vector<DomainCorpus> training;
    for (const auto& d : names.training) training.push_back(corpus(d));
    const auto novel = corpus(domain);
    CrossDomainSetup s;
    s.base = &b;
    s.registry = &reg;
    for (const auto& c : training) s.training.push_back(&c);
    s.novel = {&novel};
    s.methods = {method};
    s.adapters = domain_adapter_ids();
    s.selection = cfg_.selection;
    s.eval = cfg_.eval;
    s.eval.workers = cfg_.workers;
    const auto r = run_cross_domain_experiment(s);
    const auto& cell = r.at(method, domain);
    if (!cell) throw DataError("eval cell: " + method + " on " + domain + " could not be computed (missing adapters)");
    return *cell;
}

std::vector<fs::path> Workspace::write_report(const EvalReport& report, const std::string& name) const {
    fs::create_directories(reports_dir());
    auto paths = emit_report(report, reports_dir() / name);
    const auto cfg_path = reports_dir() / (name + ".config.ini");
    io::write_text_atomic(cfg_path, to_ini(cfg_));
    paths.push_back(cfg_path);
    return paths;
}

void Workspace::write_snapshot(const std::string& command) const {
    fs::create_directories(root() / "runs");
    io::write_text_atomic(root() / "runs" / (command + ".ini"), to_ini(cfg_));
}

}  // namespace soup
