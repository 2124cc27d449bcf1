#include "soupkit/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "soupkit/binary_io.hpp"
#include "soupkit/error.hpp"
#include "soupkit/hash.hpp"
#include "soupkit/rng.hpp"

namespace soup {

namespace {

constexpr std::string_view kTokenizerMagic = "SOUPTOK1";
constexpr std::string_view kCorpusMagic = "SOUPCRP1";

std::uint64_t pair_key(std::uint32_t a, std::uint32_t b) { return (static_cast<std::uint64_t>(a) << 32) | b; }

bool is_space(unsigned char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\f' || c == '\v'; }

}  // namespace

std::vector<std::string_view> pretokenize(std::string_view text) {
    std::vector<std::string_view> chunks;
    std::size_t i = 0;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        std::size_t start = i;
        if (c == ' ' && i + 1 < text.size() && !is_space(static_cast<unsigned char>(text[i + 1]))) {
            ++i;
        } else if (is_space(c)) {
            chunks.push_back(text.substr(i, 1));
            ++i;
            continue;
        }
        while (i < text.size() && !is_space(static_cast<unsigned char>(text[i]))) ++i;
        chunks.push_back(text.substr(start, i - start));
    }
    return chunks;
}

Tokenizer::Tokenizer() {
    pieces_.reserve(256);
    for (int b = 0; b < 256; ++b) pieces_.emplace_back(1, static_cast<char>(b));
}

void Tokenizer::add_merge(std::uint32_t left, std::uint32_t right) {
    if (left >= pieces_.size() || right >= pieces_.size()) throw FormatError("tokenizer merge references unknown id");
    const auto id = static_cast<std::uint32_t>(pieces_.size());
    merges_.emplace_back(left, right);
    pieces_.push_back(pieces_[left] + pieces_[right]);
    rank_.emplace(pair_key(left, right), id);
}

Tokenizer Tokenizer::train(std::span<const std::string> texts, std::size_t vocab_size) {
    if (vocab_size < 256) throw ConfigError("tokenizer vocab size must be >= 256, got " + std::to_string(vocab_size));
    Tokenizer tok;
    if (vocab_size == 256) return tok;

    std::map<std::string_view, std::uint64_t> chunk_counts;
    for (const auto& text : texts) {
        for (auto chunk : pretokenize(text)) ++chunk_counts[chunk];
    }
    if (chunk_counts.empty()) throw DataError("tokenizer training corpus is empty");

    struct Word {
        std::vector<std::uint32_t> ids;
        std::uint64_t count;
    };
    std::vector<Word> words;
    words.reserve(chunk_counts.size());
    for (const auto& [chunk, count] : chunk_counts) {
        Word w{{}, count};
        for (unsigned char c : chunk) w.ids.push_back(c);
        words.push_back(std::move(w));
    }

    std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
    auto add_pairs = [&](const Word& w, std::int64_t sign) {
        for (std::size_t i = 0; i + 1 < w.ids.size(); ++i) {
            pair_counts[pair_key(w.ids[i], w.ids[i + 1])] += sign * static_cast<std::int64_t>(w.count);
        }
    };
    for (const auto& w : words) add_pairs(w, +1);

    while (tok.vocab_size() < vocab_size) {
        std::uint64_t best_key = 0;
        std::int64_t best_count = 0;
        for (const auto& [key, count] : pair_counts) {
            if (count > best_count || (count == best_count && count > 0 && key < best_key)) {
                best_key = key;
                best_count = count;
            }
        }
        if (best_count <= 0) break;
        const auto left = static_cast<std::uint32_t>(best_key >> 32);
        const auto right = static_cast<std::uint32_t>(best_key & 0xFFFFFFFFu);
        const auto merged = static_cast<std::uint32_t>(tok.vocab_size());
        tok.add_merge(left, right);

        for (auto& w : words) {
            bool present = false;
            for (std::size_t i = 0; i + 1 < w.ids.size(); ++i) {
                if (w.ids[i] == left && w.ids[i + 1] == right) {
                    present = true;
                    break;
                }
            }
            if (!present) continue;
            add_pairs(w, -1);
            std::vector<std::uint32_t> next;
            next.reserve(w.ids.size());
            for (std::size_t i = 0; i < w.ids.size(); ++i) {
                if (i + 1 < w.ids.size() && w.ids[i] == left && w.ids[i + 1] == right) {
                    next.push_back(merged);
                    ++i;
                } else {
                    next.push_back(w.ids[i]);
                }
            }
            w.ids = std::move(next);
            add_pairs(w, +1);
        }
        for (auto it = pair_counts.begin(); it != pair_counts.end();) {
            it = it->second == 0 ? pair_counts.erase(it) : std::next(it);
        }
    }
    return tok;
}

std::vector<std::uint32_t> Tokenizer::encode_chunk(std::string_view chunk) const {
    std::vector<std::uint32_t> ids;
    ids.reserve(chunk.size());
    for (unsigned char c : chunk) ids.push_back(c);
    while (ids.size() > 1) {
        std::uint32_t best = std::numeric_limits<std::uint32_t>::max();
        std::uint32_t best_left = 0, best_right = 0;
        for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
            auto it = rank_.find(pair_key(ids[i], ids[i + 1]));
            if (it != rank_.end() && it->second < best) {
                best = it->second;
                best_left = ids[i];
                best_right = ids[i + 1];
            }
        }
        if (best == std::numeric_limits<std::uint32_t>::max()) break;
        std::vector<std::uint32_t> next;
        next.reserve(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i + 1 < ids.size() && ids[i] == best_left && ids[i + 1] == best_right) {
                next.push_back(best);
                ++i;
            } else {
                next.push_back(ids[i]);
            }
        }
        ids = std::move(next);
    }
    return ids;
}

std::vector<std::uint32_t> Tokenizer::encode(std::string_view text) const {
    std::vector<std::uint32_t> out;
    out.reserve(text.size() / 2);
    std::unordered_map<std::string_view, std::vector<std::uint32_t>> cache;
    for (auto chunk : pretokenize(text)) {
        auto it = cache.find(chunk);
        if (it == cache.end()) it = cache.emplace(chunk, encode_chunk(chunk)).first;
        out.insert(out.end(), it->second.begin(), it->second.end());
    }
    return out;
}

const std::string& Tokenizer::piece(std::uint32_t id) const {
    if (id >= pieces_.size()) {
        throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(pieces_.size()));
    }
    return pieces_[id];
}

std::string Tokenizer::decode(std::span<const std::uint32_t> ids) const {
    std::string out;
    for (auto id : ids) out += piece(id);
    return out;
}

std::vector<std::byte> Tokenizer::serialize() const {
    io::Writer w;
    w.bytes(kTokenizerMagic);
    w.u32(static_cast<std::uint32_t>(vocab_size()));
    w.u32(static_cast<std::uint32_t>(merges_.size()));
    for (const auto& [l, r] : merges_) {
        w.u32(l);
        w.u32(r);
    }
    return w.take();
}

Tokenizer Tokenizer::deserialize(std::span<const std::byte> bytes) {
    io::Reader r(bytes, "tokenizer");
    if (r.bytes(kTokenizerMagic.size()) != kTokenizerMagic) throw FormatError("tokenizer: bad magic");
    const auto vocab = r.u32();
    const auto n = r.u32();
    if (vocab != 256 + static_cast<std::uint64_t>(n)) throw FormatError("tokenizer: vocab/merge count mismatch");
    Tokenizer tok;
    for (std::uint32_t i = 0; i < n; ++i) {
        const auto left = r.u32();
        const auto right = r.u32();
        tok.add_merge(left, right);
    }
    if (r.remaining() != 0) throw FormatError("tokenizer: trailing bytes");
    return tok;
}

void Tokenizer::save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }

Tokenizer Tokenizer::load(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

std::string Tokenizer::fingerprint() const { return sha256_hex(serialize()); }

// --- names -------------------------------------------------------------------

std::string_view split_name(Split split) {
    switch (split) {
        case Split::kTrain: return "train";
        case Split::kHeldOut: return "heldout";
        case Split::kTest: return "test";
    }
    return "?";
}

Split parse_split(std::string_view name) {
    if (name == "train") return Split::kTrain;
    if (name == "heldout" || name == "held-out") return Split::kHeldOut;
    if (name == "test") return Split::kTest;
    throw ConfigError("unknown split '" + std::string(name) + "'");
}

std::string_view role_name(DomainRole role) { return role == DomainRole::kTraining ? "training" : "novel"; }

DomainRole parse_role(std::string_view name) {
    if (name == "training") return DomainRole::kTraining;
    if (name == "novel") return DomainRole::kNovel;
    throw ConfigError("unknown domain role '" + std::string(name) + "'");
}

std::string_view purpose_name(Purpose purpose) {
    switch (purpose) {
        case Purpose::kTraining: return "training";
        case Purpose::kSelection: return "selection";
        case Purpose::kValidation: return "validation";
        case Purpose::kEvaluation: return "evaluation";
    }
    return "?";
}

bool purpose_allows(Purpose purpose, Split split) noexcept {
    switch (purpose) {
        case Purpose::kTraining: return split == Split::kTrain;
        case Purpose::kSelection: return split == Split::kTrain || split == Split::kHeldOut;
        case Purpose::kValidation: return split == Split::kHeldOut;
        case Purpose::kEvaluation: return split == Split::kTest;
    }
    return false;
}

// --- access log / corpus -----------------------------------------------------

void AccessLog::record(AccessRecord rec) {
    std::lock_guard lock(mu_);
    records_.push_back(std::move(rec));
}

std::vector<AccessRecord> AccessLog::records() const {
    std::lock_guard lock(mu_);
    return records_;
}

void AccessLog::clear() {
    std::lock_guard lock(mu_);
    records_.clear();
}

DomainCorpus::DomainCorpus(std::string name, DomainRole role, std::size_t vocab_size,
                           std::array<std::vector<std::uint32_t>, 3> splits)
    : name_(std::move(name)), role_(role), vocab_size_(vocab_size), splits_(std::move(splits)) {
    if (name_.empty()) throw ConfigError("domain name must be nonempty");
    for (const auto& s : splits_) {
        for (auto id : s) {
            if (id >= vocab_size_) {
                throw IndexError("domain " + name_ + ": token id " + std::to_string(id) + " >= vocab " +
                                 std::to_string(vocab_size_));
            }
        }
    }
}

std::span<const std::uint32_t> DomainCorpus::read(Split split, Purpose purpose) const {
    if (!purpose_allows(purpose, split)) {
        throw DataError("split policy: " + std::string(purpose_name(purpose)) + " may not read the " +
                        std::string(split_name(split)) + " split of " + name_);
    }
    log_->record({name_, split, purpose});
    return splits_[static_cast<int>(split)];
}

std::string DomainCorpus::content_hash() const {
    Sha256 h;
    h.update(name_).update("\n").update(role_name(role_)).update("\n");
    for (const auto& s : splits_) h.update(encode_corpus_split(static_cast<std::uint32_t>(vocab_size_), s));
    return h.hex();
}

DomainCorpus DomainCorpus::renamed(std::string name, DomainRole role) const {
    return DomainCorpus(std::move(name), role, vocab_size_, splits_);
}

// --- ingestion ---------------------------------------------------------------

void validate_fractions(const SplitFractions& fractions) {
    double total = 0.0;
    for (double f : fractions) {
        if (!(f >= 0.0) || !std::isfinite(f)) throw ConfigError("split fractions must be finite and non-negative");
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw ConfigError("split fractions must sum to 1, got " + std::to_string(total));
    }
}

std::array<std::size_t, 3> apportion(std::size_t n, const SplitFractions& fractions) {
    validate_fractions(fractions);
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> rem{};
    std::size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = fractions[i] * static_cast<double>(n);
        // Snap values within rounding noise of an integer so 0.8*10 gives 8.
        double whole = std::floor(exact + 1e-9);
        counts[i] = static_cast<std::size_t>(whole);
        rem[i] = std::max(0.0, exact - whole);
        assigned += counts[i];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
    for (int k = 0; assigned < n; k = (k + 1) % 3) {
        ++counts[order[k]];
        ++assigned;
    }
    return counts;
}

RawSplits split_directory(const std::filesystem::path& dir, const SplitFractions& fractions) {
    validate_fractions(fractions);
    std::error_code ec;
    if (!std::filesystem::is_directory(dir, ec)) throw IoError("not a readable directory: " + dir.string());
    struct Entry {
        std::string hash;
        std::string name;
        std::string text;
    };
    std::vector<Entry> entries;
    for (const auto& de : std::filesystem::directory_iterator(dir)) {
        if (!de.is_regular_file() || de.path().extension() != ".txt") continue;
        Entry e;
        e.name = de.path().filename().string();
        e.text = io::read_text(de.path());
        e.hash = sha256_hex(e.text);
        entries.push_back(std::move(e));
    }
    if (entries.empty()) throw DataError("ingestion: no .txt files in " + dir.string());
    std::sort(entries.begin(), entries.end(),
              [](const Entry& a, const Entry& b) { return std::tie(a.hash, a.name) < std::tie(b.hash, b.name); });
    const auto counts = apportion(entries.size(), fractions);
    RawSplits out;
    std::size_t next = 0;
    for (int s = 0; s < 3; ++s) {
        for (std::size_t k = 0; k < counts[s]; ++k, ++next) {
            auto& e = entries[next];
            out.text[s] += e.text;
            if (!e.text.empty() && e.text.back() != '\n') out.text[s] += '\n';
            out.files[s].push_back(e.name);
        }
    }
    return out;
}

DomainCorpus ingest_domain(const std::filesystem::path& dir, std::string name, const SplitFractions& fractions,
                           const Tokenizer& tokenizer, DomainRole role) {
    const auto raw = split_directory(dir, fractions);
    std::array<std::vector<std::uint32_t>, 3> splits;
    for (int s = 0; s < 3; ++s) splits[s] = tokenizer.encode(raw.text[s]);
    if (role == DomainRole::kNovel && splits[1].empty()) {
        throw DataError("ingestion: novel domain " + name + " has an empty held-out split");
    }
    return DomainCorpus(std::move(name), role, tokenizer.vocab_size(), std::move(splits));
}

// --- synthetic world ---------------------------------------------------------

namespace {

constexpr std::string_view kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                                        "s", "t", "v", "z", "sh", "ch", "th", "br", "tr", "pl"};
constexpr std::string_view kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
constexpr std::string_view kCodas[] = {"", "", "", "n", "r", "s", "l", "k"};

struct Phonology {
    std::vector<std::string_view> onsets;
    std::vector<std::string_view> vowels;
};

Phonology full_phonology() {
    return {{std::begin(kOnsets), std::end(kOnsets)}, {std::begin(kVowels), std::end(kVowels)}};
}

// Each topic spells its words from its own subset of onsets and vowels.
Phonology topic_phonology(Rng& rng) {
    auto p = full_phonology();
    rng.shuffle(p.onsets);
    rng.shuffle(p.vowels);
    p.onsets.resize(6);
    p.vowels.resize(3);
    return p;
}

std::string make_word(Rng& rng, const Phonology& ph, int min_syll, int max_syll) {
    const int n = min_syll + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_syll - min_syll + 1)));
    std::string w;
    for (int i = 0; i < n; ++i) {
        w += ph.onsets[rng.below(ph.onsets.size())];
        w += ph.vowels[rng.below(ph.vowels.size())];
        w += kCodas[rng.below(std::size(kCodas))];
    }
    return w;
}

std::vector<double> zipf_cumulative(std::size_t n, double exponent) {
    std::vector<double> cum(n);
    double acc = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        acc += 1.0 / std::pow(static_cast<double>(r + 1), exponent);
        cum[r] = acc;
    }
    return cum;
}

// Sentence templates: 'F' function word, 'T' topic word.
const std::vector<std::vector<std::string_view>>& grammars() {
    static const std::vector<std::vector<std::string_view>> g = {
        {"FTTT", "TTFTT", "FTTTT", "TTTFT"},
        {"FFTTTT", "TTFTT", "FTTFTTT"},
        {"TTTTF", "FTTT", "TTFTTT"},
    };
    return g;
}

}  // namespace

SyntheticWorld SyntheticWorld::build(const SyntheticWorldConfig& config) {
    if (config.topics == 0 || config.words_per_topic < 4 || config.function_words == 0) {
        throw ConfigError("synthetic world needs >= 1 topic, >= 4 words per topic and >= 1 function word");
    }
    SyntheticWorld world;
    world.config = config;
    Rng rng(Rng::derive(config.seed, 0x776F726CULL));
    std::set<std::string> used;
    auto fresh = [&](const Phonology& ph, int lo, int hi) {
        for (;;) {
            auto w = make_word(rng, ph, lo, hi);
            if (used.insert(w).second) return w;
        }
    };
    for (std::uint32_t i = 0; i < config.function_words; ++i) world.function_words.push_back(fresh(full_phonology(), 1, 1));
    world.topic_words.resize(config.topics);
    world.successors.resize(config.topics);
    for (std::uint32_t t = 0; t < config.topics; ++t) {
        const auto ph = topic_phonology(rng);
        for (std::uint32_t i = 0; i < config.words_per_topic; ++i) world.topic_words[t].push_back(fresh(ph, 2, 3));
        for (std::uint32_t i = 0; i < config.words_per_topic; ++i) {
            std::array<std::uint32_t, 3> next{};
            for (auto& n : next) n = static_cast<std::uint32_t>(rng.below(config.words_per_topic));
            world.successors[t].push_back(next);
        }
    }
    return world;
}

std::vector<double> topic_profile(std::uint32_t topics, std::span<const std::uint32_t> active) {
    if (active.empty()) throw ConfigError("topic profile needs at least one active topic");
    std::vector<double> p(topics, 0.0);
    for (auto t : active) {
        if (t >= topics) throw ConfigError("topic index " + std::to_string(t) + " out of range");
        p[t] += 1.0 / static_cast<double>(active.size());
    }
    return p;
}

namespace {

struct DocStream {
    const SyntheticWorld& world;
    const SyntheticDomainSpec& spec;
    Rng rng;
    std::vector<double> topic_cum;
    std::vector<double> topic_zipf;
    std::vector<double> func_zipf;

    DocStream(const SyntheticWorld& w, const SyntheticDomainSpec& s, Split split)
        : world(w),
          spec(s),
          rng(Rng::derive(s.seed, 0x646F63ULL, static_cast<std::uint64_t>(split) + 1)),
          topic_zipf(zipf_cumulative(w.config.words_per_topic, 1.1)),
          func_zipf(zipf_cumulative(w.config.function_words, 1.0)) {
        double acc = 0.0;
        for (double p : s.profile) topic_cum.push_back(acc += p);
    }

    std::string next_document() {
        const auto topic = rng.categorical(topic_cum);
        const auto& templates = grammars()[spec.grammar];
        const auto& words = world.topic_words[topic];
        const auto& succ = world.successors[topic];
        const int sentences = 4 + static_cast<int>(rng.below(6));
        std::string doc;
        std::uint32_t prev = 0;
        bool have_prev = false;
        for (int s = 0; s < sentences; ++s) {
            const auto& tpl = templates[rng.below(templates.size())];
            for (char slot : tpl) {
                if (!doc.empty()) doc += ' ';
                if (slot == 'F') {
                    doc += world.function_words[rng.categorical(func_zipf)];
                    continue;
                }
                std::uint32_t w;
                if (have_prev && rng.uniform() < 0.7) {
                    w = succ[prev][rng.below(3)];
                } else {
                    w = static_cast<std::uint32_t>(rng.categorical(topic_zipf));
                }
                doc += words[w];
                prev = w;
                have_prev = true;
            }
            doc += " .";
        }
        doc += '\n';
        return doc;
    }
};

void validate_spec(const SyntheticDomainSpec& spec) {
    if (spec.name.empty()) throw ConfigError("synthetic domain needs a name");
    if (spec.grammar >= kGrammarCount) throw ConfigError("unknown template grammar " + std::to_string(spec.grammar));
    if (spec.profile.size() != spec.world.topics) {
        throw ConfigError("profile length " + std::to_string(spec.profile.size()) + " != topics " +
                          std::to_string(spec.world.topics));
    }
    double total = 0.0;
    for (double p : spec.profile) {
        if (!(p >= 0.0)) throw ConfigError("profile weights must be non-negative");
        total += p;
    }
    if (!(total > 0.0)) throw ConfigError("profile must have positive mass");
    std::size_t budget = 0;
    for (auto n : spec.split_tokens) budget += n;
    if (budget == 0 || spec.split_tokens[0] == 0) throw ConfigError("synthetic domain " + spec.name + ": zero token budget");
    if (spec.role == DomainRole::kNovel && spec.split_tokens[1] == 0) {
        throw ConfigError("novel domain " + spec.name + " needs a held-out split");
    }
}

}  // namespace

std::string synthetic_text(const SyntheticDomainSpec& spec, Split split, std::size_t min_chars) {
    validate_spec(spec);
    const auto world = SyntheticWorld::build(spec.world);
    DocStream stream(world, spec, split);
    std::string out;
    while (out.size() < min_chars) out += stream.next_document();
    return out;
}

DomainCorpus generate_synthetic_domain(const SyntheticDomainSpec& spec, const Tokenizer& tokenizer) {
    validate_spec(spec);
    const auto world = SyntheticWorld::build(spec.world);
    std::array<std::vector<std::uint32_t>, 3> splits;
    for (int s = 0; s < 3; ++s) {
        const auto target = spec.split_tokens[s];
        DocStream stream(world, spec, static_cast<Split>(s));
        auto& ids = splits[s];
        ids.reserve(target + 256);
        while (ids.size() < target) {
            const auto doc = tokenizer.encode(stream.next_document());
            ids.insert(ids.end(), doc.begin(), doc.end());
        }
        ids.resize(target);
    }
    return DomainCorpus(spec.name, spec.role, tokenizer.vocab_size(), std::move(splits));
}

// --- sampling ----------------------------------------------------------------

std::vector<std::vector<std::uint32_t>> sample_sequences(const DomainCorpus& corpus, Split split, Purpose purpose,
                                                         std::size_t n, std::size_t len, std::uint64_t seed) {
    if (n == 0 || len == 0) throw ConfigError("sample_sequences needs n >= 1 and len >= 1");
    const auto tokens = corpus.read(split, purpose);
    if (tokens.size() / len < n) {
        throw DataError("domain " + corpus.name() + " " + std::string(split_name(split)) + " split has " +
                        std::to_string(tokens.size()) + " tokens, need " + std::to_string(n) + " x " +
                        std::to_string(len));
    }
    const std::size_t slack = tokens.size() - n * len;
    Rng rng(Rng::derive(seed, 0x73616D70ULL));
    std::vector<std::size_t> offsets(n);
    for (auto& o : offsets) o = static_cast<std::size_t>(rng.below(slack + 1));
    std::sort(offsets.begin(), offsets.end());
    std::vector<std::vector<std::uint32_t>> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t start = i * len + offsets[i];
        out.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                         tokens.begin() + static_cast<std::ptrdiff_t>(start + len));
    }
    return out;
}

// --- cache -------------------------------------------------------------------

std::vector<std::byte> encode_corpus_split(std::uint32_t vocab_size, std::span<const std::uint32_t> tokens) {
    io::Writer w;
    w.reserve(20 + tokens.size() * 4);
    w.bytes(kCorpusMagic);
    w.u32(vocab_size);
    w.u64(tokens.size());
    for (auto t : tokens) w.u32(t);
    auto out = w.take();
    io::seal(out);
    return out;
}

CachedSplit decode_corpus_split(std::span<const std::byte> bytes) {
    io::Reader r(io::unseal(bytes, "corpus cache"), "corpus cache");
    if (r.bytes(kCorpusMagic.size()) != kCorpusMagic) throw FormatError("corpus cache: bad magic");
    CachedSplit out;
    out.vocab_size = r.u32();
    const auto count = r.u64();
    if (count > r.remaining() / 4) throw FormatError("corpus cache: truncated token payload");
    out.tokens.resize(count);
    for (auto& t : out.tokens) {
        t = r.u32();
        if (t >= out.vocab_size) throw FormatError("corpus cache: token id exceeds vocab size");
    }
    if (r.remaining() != 0) throw FormatError("corpus cache: trailing bytes");
    return out;
}

void save_corpus(const DomainCorpus& corpus, const std::filesystem::path& dir) {
    for (int s = 0; s < 3; ++s) {
        const auto split = static_cast<Split>(s);
        io::write_file_atomic(dir / (std::string(split_name(split)) + ".bin"),
                              encode_corpus_split(static_cast<std::uint32_t>(corpus.vocab_size()), corpus.raw(split)));
    }
    nlohmann::ordered_json meta;
    meta["name"] = corpus.name();
    meta["role"] = role_name(corpus.role());
    meta["vocab_size"] = corpus.vocab_size();
    meta["content_hash"] = corpus.content_hash();
    io::write_text_atomic(dir / "meta.json", meta.dump(2) + "\n");
}

DomainCorpus load_corpus(const std::filesystem::path& dir) {
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(io::read_text(dir / "meta.json"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("corpus meta " + (dir / "meta.json").string() + ": " + e.what());
    }
    std::array<std::vector<std::uint32_t>, 3> splits;
    std::uint32_t vocab = 0;
    for (int s = 0; s < 3; ++s) {
        auto cached = decode_corpus_split(io::read_file(dir / (std::string(split_name(static_cast<Split>(s))) + ".bin")));
        if (s > 0 && cached.vocab_size != vocab) throw FormatError("corpus cache: inconsistent vocab sizes in " + dir.string());
        vocab = cached.vocab_size;
        splits[s] = std::move(cached.tokens);
    }
    try {
        DomainCorpus corpus(meta.at("name").get<std::string>(), parse_role(meta.at("role").get<std::string>()), vocab,
                            std::move(splits));
        if (meta.contains("content_hash") && meta["content_hash"].get<std::string>() != corpus.content_hash()) {
            throw FormatError("corpus cache: content hash mismatch in " + dir.string());
        }
        return corpus;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("corpus meta " + dir.string() + ": " + e.what());
    }
}

}  // namespace soup
