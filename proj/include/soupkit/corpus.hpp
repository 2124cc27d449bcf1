#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace soup {

// Byte-level BPE. Ids 0..255 are raw bytes; each learned merge appends one id,
// so ids are dense in [0, vocab_size()). There are no reserved special ids:
// documents are separated by the newline byte.
class Tokenizer {
public:
    Tokenizer();

    // Learns up to vocab_size - 256 merges. Ties in pair frequency go to the
    // numerically smallest (left, right) pair.
    static Tokenizer train(std::span<const std::string> texts, std::size_t vocab_size);

    std::vector<std::uint32_t> encode(std::string_view text) const;
    std::string decode(std::span<const std::uint32_t> ids) const;

    std::size_t vocab_size() const noexcept { return pieces_.size(); }
    const std::vector<std::pair<std::uint32_t, std::uint32_t>>& merges() const noexcept { return merges_; }
    const std::string& piece(std::uint32_t id) const;

    std::vector<std::byte> serialize() const;
    static Tokenizer deserialize(std::span<const std::byte> bytes);
    void save(const std::filesystem::path& path) const;
    static Tokenizer load(const std::filesystem::path& path);
    std::string fingerprint() const;

private:
    void add_merge(std::uint32_t left, std::uint32_t right);
    std::vector<std::uint32_t> encode_chunk(std::string_view chunk) const;

    std::vector<std::pair<std::uint32_t, std::uint32_t>> merges_;
    std::vector<std::string> pieces_;
    std::unordered_map<std::uint64_t, std::uint32_t> rank_;  // pair key -> merged id
};

// Splits text into BPE chunks: an optional single leading space followed by a
// run of non-space bytes; any other whitespace byte is a chunk on its own.
std::vector<std::string_view> pretokenize(std::string_view text);

enum class DomainRole { kTraining, kNovel };
enum class Split : std::uint8_t { kTrain = 0, kHeldOut = 1, kTest = 2 };
// Why a split is being read. Training reads train only; selection reads
// train or held-out; validation reads held-out; evaluation reads test only.
enum class Purpose { kTraining, kSelection, kValidation, kEvaluation };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);
std::string_view role_name(DomainRole role);
DomainRole parse_role(std::string_view name);
std::string_view purpose_name(Purpose purpose);
bool purpose_allows(Purpose purpose, Split split) noexcept;

struct AccessRecord {
    std::string domain;
    Split split;
    Purpose purpose;
    friend bool operator==(const AccessRecord&, const AccessRecord&) = default;
};

class AccessLog {
public:
    void record(AccessRecord rec);
    std::vector<AccessRecord> records() const;
    void clear();

private:
    mutable std::mutex mu_;
    std::vector<AccessRecord> records_;
};

// A named domain with three disjoint token streams. Contents are immutable
// after construction; every read goes through read(), which enforces the
// purpose policy and appends to the access log.
class DomainCorpus {
public:
    DomainCorpus() = default;
    DomainCorpus(std::string name, DomainRole role, std::size_t vocab_size,
                 std::array<std::vector<std::uint32_t>, 3> splits);

    const std::string& name() const noexcept { return name_; }
    DomainRole role() const noexcept { return role_; }
    std::size_t vocab_size() const noexcept { return vocab_size_; }
    std::size_t token_count(Split split) const noexcept { return splits_[static_cast<int>(split)].size(); }

    std::span<const std::uint32_t> read(Split split, Purpose purpose) const;

    // Unlogged access for serialization and hashing only.
    std::span<const std::uint32_t> raw(Split split) const noexcept { return splits_[static_cast<int>(split)]; }

    const std::shared_ptr<AccessLog>& access_log() const noexcept { return log_; }
    std::string content_hash() const;

    // Copy of this corpus under another name and role.
    DomainCorpus renamed(std::string name, DomainRole role) const;

private:
    std::string name_;
    DomainRole role_ = DomainRole::kTraining;
    std::size_t vocab_size_ = 0;
    std::array<std::vector<std::uint32_t>, 3> splits_;
    std::shared_ptr<AccessLog> log_ = std::make_shared<AccessLog>();
};

// --- ingestion ---------------------------------------------------------------

using SplitFractions = std::array<double, 3>;
void validate_fractions(const SplitFractions& fractions);
// Largest-remainder apportionment of n items; ties go to the earlier split.
std::array<std::size_t, 3> apportion(std::size_t n, const SplitFractions& fractions);

struct RawSplits {
    std::array<std::string, 3> text;
    std::array<std::vector<std::string>, 3> files;  // file names per split
};

// Reads every *.txt file in dir, orders files by content hash (then name) and
// assigns them to splits by apportion(). Same directory -> same assignment.
RawSplits split_directory(const std::filesystem::path& dir, const SplitFractions& fractions);

DomainCorpus ingest_domain(const std::filesystem::path& dir, std::string name, const SplitFractions& fractions,
                           const Tokenizer& tokenizer, DomainRole role = DomainRole::kTraining);

// --- synthetic domains -------------------------------------------------------

struct SyntheticWorldConfig {
    std::uint64_t seed = 20231;
    std::uint32_t topics = 8;
    std::uint32_t words_per_topic = 40;
    std::uint32_t function_words = 24;
    friend bool operator==(const SyntheticWorldConfig&, const SyntheticWorldConfig&) = default;
};

// Lexicon and per-topic successor tables shared by all domains of one world.
struct SyntheticWorld {
    SyntheticWorldConfig config;
    std::vector<std::string> function_words;
    std::vector<std::vector<std::string>> topic_words;
    std::vector<std::vector<std::array<std::uint32_t, 3>>> successors;  // [topic][word]

    static SyntheticWorld build(const SyntheticWorldConfig& config);
};

struct SyntheticDomainSpec {
    std::string name;
    DomainRole role = DomainRole::kTraining;
    std::uint64_t seed = 0;
    std::vector<double> profile;  // per-topic document weights
    std::uint32_t grammar = 0;
    std::array<std::size_t, 3> split_tokens{20000, 4000, 4000};
    SyntheticWorldConfig world;
};

inline constexpr std::uint32_t kGrammarCount = 3;

// One-hot profile on `topic`, or an equal mixture of several topics.
std::vector<double> topic_profile(std::uint32_t topics, std::span<const std::uint32_t> active);

// Text drawn from the spec's document stream for `split` until at least
// `min_chars` characters have been produced (whole documents only).
std::string synthetic_text(const SyntheticDomainSpec& spec, Split split, std::size_t min_chars);

DomainCorpus generate_synthetic_domain(const SyntheticDomainSpec& spec, const Tokenizer& tokenizer);

// --- sequence sampling -------------------------------------------------------

// n windows of len tokens placed without overlap at seeded random offsets.
std::vector<std::vector<std::uint32_t>> sample_sequences(const DomainCorpus& corpus, Split split, Purpose purpose,
                                                         std::size_t n, std::size_t len, std::uint64_t seed);

// --- corpus cache ------------------------------------------------------------

struct CachedSplit {
    std::uint32_t vocab_size = 0;
    std::vector<std::uint32_t> tokens;
};

std::vector<std::byte> encode_corpus_split(std::uint32_t vocab_size, std::span<const std::uint32_t> tokens);
CachedSplit decode_corpus_split(std::span<const std::byte> bytes);

// Writes <dir>/{train,heldout,test}.bin and meta.json.
void save_corpus(const DomainCorpus& corpus, const std::filesystem::path& dir);
DomainCorpus load_corpus(const std::filesystem::path& dir);

}  // namespace soup
