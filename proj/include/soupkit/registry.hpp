#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "soupkit/model.hpp"

namespace soup {

// One line of the registry index.
struct RegistryEntry {
    std::string id;
    std::string path;  // relative to the registry directory
    std::string domain;
    TrainConfig hyper;
    std::uint64_t adapter_init_seed = 0;
    std::string base_hash;
    double final_train_loss = 0.0;
};

nlohmann::ordered_json to_json(const RegistryEntry& e);
RegistryEntry registry_entry_from_json(const nlohmann::json& j);

// Content-addressed adapter store. In memory by default; when opened on a
// directory, checkpoints live in adapters/<id>.ckpt with readable aliases in
// aliases/, and index.jsonl lists entries sorted by id. All writes are
// serialized and the index is replaced atomically.
class Registry {
public:
    Registry() = default;
    static Registry open(const std::filesystem::path& dir);

    Registry(Registry&& other) noexcept;
    Registry& operator=(Registry&& other) noexcept;

    // Returns the id; adding identical weights twice is a no-op.
    std::string add(AdapterWeights weights);
    bool contains(const std::string& id) const;
    const AdapterWeights& get(const std::string& id) const;
    // Accepts a full id, a unique id prefix, or an alias name.
    std::string resolve(const std::string& ref) const;
    std::vector<std::string> ids() const;
    std::vector<RegistryEntry> entries() const;
    std::size_t size() const;
    bool empty() const { return size() == 0; }

    // Finds a finished job with the same inputs.
    std::optional<std::string> find_job(const std::string& domain, const TrainConfig& hyper,
                                        std::uint64_t adapter_init_seed, const std::string& base_hash) const;

    // SHA-256 of the canonical index text.
    std::string checksum() const;
    std::string index_text() const;

    static std::string alias_for(const AdapterWeights& w, const std::string& id);

private:
    void persist_locked(const std::string& id, const AdapterWeights& w);
    std::string index_text_locked() const;

    mutable std::mutex mu_;
    std::map<std::string, AdapterWeights> items_;
    std::map<std::string, std::string> aliases_;
    std::optional<std::filesystem::path> dir_;
};

}  // namespace soup
