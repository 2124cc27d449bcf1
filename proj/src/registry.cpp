#include "soupkit/registry.hpp"

#include <cstdio>
#include <sstream>

#include "soupkit/binary_io.hpp"
#include "soupkit/error.hpp"
#include "soupkit/hash.hpp"

namespace soup {

nlohmann::ordered_json to_json(const RegistryEntry& e) {
    nlohmann::ordered_json j;
    j["id"] = e.id;
    j["path"] = e.path;
    j["domain"] = e.domain;
    j["hyper"] = to_json(e.hyper);
    j["adapter_init_seed"] = e.adapter_init_seed;
    j["base_hash"] = e.base_hash;
    j["final_train_loss"] = e.final_train_loss;
    return j;
}

RegistryEntry registry_entry_from_json(const nlohmann::json& j) {
    RegistryEntry e;
    try {
        e.id = j.at("id").get<std::string>();
        e.path = j.at("path").get<std::string>();
        e.domain = j.at("domain").get<std::string>();
        e.hyper = train_config_from_json(j.at("hyper"));
        e.adapter_init_seed = j.at("adapter_init_seed").get<std::uint64_t>();
        e.base_hash = j.at("base_hash").get<std::string>();
        e.final_train_loss = j.at("final_train_loss").get<double>();
    } catch (const nlohmann::json::exception& ex) {
        throw FormatError(std::string("registry entry: ") + ex.what());
    }
    return e;
}

namespace {

RegistryEntry entry_for(const std::string& id, const AdapterWeights& w) {
    RegistryEntry e;
    e.id = id;
    e.path = "adapters/" + id + ".ckpt";
    e.domain = w.meta.domain;
    e.hyper = w.meta.hyper;
    e.adapter_init_seed = w.meta.adapter_init_seed;
    e.base_hash = w.meta.base_hash;
    e.final_train_loss = w.meta.final_train_loss;
    return e;
}

}  // namespace

Registry::Registry(Registry&& other) noexcept {
    std::lock_guard lock(other.mu_);
    items_ = std::move(other.items_);
    aliases_ = std::move(other.aliases_);
    dir_ = std::move(other.dir_);
}

Registry& Registry::operator=(Registry&& other) noexcept {
    if (this != &other) {
        std::scoped_lock lock(mu_, other.mu_);
        items_ = std::move(other.items_);
        aliases_ = std::move(other.aliases_);
        dir_ = std::move(other.dir_);
    }
    return *this;
}

std::string Registry::alias_for(const AdapterWeights& w, const std::string& id) {
    char lr[32];
    std::snprintf(lr, sizeof lr, "%g", w.meta.hyper.lr);
    const std::string domain = w.meta.domain.empty() ? "adapter" : w.meta.domain;
    return domain + "__lr" + lr + "__s" + std::to_string(w.meta.hyper.data_seed) + "__" + id.substr(0, 8);
}

Registry Registry::open(const std::filesystem::path& dir) {
    Registry r;
    std::error_code ec;
    std::filesystem::create_directories(dir / "adapters", ec);
    if (ec) throw IoError("cannot create registry directory " + dir.string() + ": " + ec.message());
    r.dir_ = dir;
    const auto index = dir / "index.jsonl";
    if (!std::filesystem::exists(index)) return r;
    std::istringstream in(io::read_text(index));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        RegistryEntry e;
        try {
            e = registry_entry_from_json(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& ex) {
            throw FormatError("registry index " + index.string() + ": " + ex.what());
        }
        const auto bytes = io::read_file(dir / e.path);
        if (sha256_hex(bytes) != e.id) throw FormatError("registry: checkpoint " + e.path + " does not match its id");
        auto w = decode_adapter_checkpoint(bytes);
        r.aliases_[alias_for(w, e.id)] = e.id;
        r.items_.emplace(e.id, std::move(w));
    }
    return r;
}

std::string Registry::add(AdapterWeights weights) {
    const auto id = weights.id();
    std::lock_guard lock(mu_);
    if (items_.count(id)) return id;
    aliases_[alias_for(weights, id)] = id;
    auto it = items_.emplace(id, std::move(weights)).first;
    if (dir_) persist_locked(id, it->second);
    return id;
}

void Registry::persist_locked(const std::string& id, const AdapterWeights& w) {
    const auto path = *dir_ / "adapters" / (id + ".ckpt");
    if (!std::filesystem::exists(path)) save_checkpoint(w, path);
    std::error_code ec;
    std::filesystem::create_directories(*dir_ / "aliases", ec);
    const auto link = *dir_ / "aliases" / (alias_for(w, id) + ".ckpt");
    if (!std::filesystem::exists(std::filesystem::symlink_status(link))) {
        std::filesystem::create_symlink(std::filesystem::path("..") / "adapters" / (id + ".ckpt"), link, ec);
    }
    io::write_text_atomic(*dir_ / "index.jsonl", index_text_locked());
}

bool Registry::contains(const std::string& id) const {
    std::lock_guard lock(mu_);
    return items_.count(id) > 0;
}

const AdapterWeights& Registry::get(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = items_.find(id);
    if (it == items_.end()) throw ConfigError("unknown adapter id '" + id + "'");
    return it->second;
}

std::string Registry::resolve(const std::string& ref) const {
    std::lock_guard lock(mu_);
    if (items_.count(ref)) return ref;
    if (auto it = aliases_.find(ref); it != aliases_.end()) return it->second;
    std::string found;
    for (const auto& [id, w] : items_) {
        if (!ref.empty() && id.compare(0, ref.size(), ref) == 0) {
            if (!found.empty()) throw ConfigError("adapter reference '" + ref + "' is ambiguous");
            found = id;
        }
    }
    if (found.empty()) throw ConfigError("unknown adapter reference '" + ref + "'");
    return found;
}

std::vector<std::string> Registry::ids() const {
    std::lock_guard lock(mu_);
    std::vector<std::string> out;
    for (const auto& [id, w] : items_) out.push_back(id);
    return out;
}

std::vector<RegistryEntry> Registry::entries() const {
    std::lock_guard lock(mu_);
    std::vector<RegistryEntry> out;
    for (const auto& [id, w] : items_) out.push_back(entry_for(id, w));
    return out;
}

std::size_t Registry::size() const {
    std::lock_guard lock(mu_);
    return items_.size();
}

std::optional<std::string> Registry::find_job(const std::string& domain, const TrainConfig& hyper,
                                              std::uint64_t adapter_init_seed, const std::string& base_hash) const {
    std::lock_guard lock(mu_);
    for (const auto& [id, w] : items_) {
        if (w.meta.domain == domain && w.meta.hyper == hyper && w.meta.adapter_init_seed == adapter_init_seed &&
            w.meta.base_hash == base_hash && w.meta.provenance.empty()) {
            return id;
        }
    }
    return std::nullopt;
}

std::string Registry::index_text_locked() const {
    std::string out;
    for (const auto& [id, w] : items_) out += to_json(entry_for(id, w)).dump() + "\n";
    return out;
}

std::string Registry::index_text() const {
    std::lock_guard lock(mu_);
    return index_text_locked();
}

std::string Registry::checksum() const { return sha256_hex(index_text()); }

}  // namespace soup
