#include "soupkit/binary_io.hpp"

#include <atomic>
#include <fstream>
#include <thread>

#include "soupkit/error.hpp"
#include "soupkit/hash.hpp"

namespace soup::io {

void Reader::require(std::size_t n) const {
    if (n > remaining()) {
        throw FormatError(what_ + ": truncated (need " + std::to_string(n) + " bytes at offset " +
                          std::to_string(pos_) + ", " + std::to_string(remaining()) + " left)");
    }
}

std::string Reader::bytes(std::size_t n) {
    require(n);
    std::string out(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return out;
}

std::uint64_t Reader::get(int width) {
    require(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
}

std::vector<std::byte> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::byte> data(size);
    if (size > 0 && !in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(size))) {
        throw IoError("cannot read " + path.string());
    }
    return data;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes) {
    static std::atomic<unsigned long> counter{0};
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    auto tmp = path;
    tmp += ".tmp." + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())) + "." +
           std::to_string(counter.fetch_add(1));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
    write_file_atomic(path, std::as_bytes(std::span<const char>(text.data(), text.size())));
}

std::string read_text(const std::filesystem::path& path) {
    const auto data = read_file(path);
    return std::string(reinterpret_cast<const char*>(data.data()), data.size());
}

constexpr std::size_t kDigestChars = 64;

void seal(std::vector<std::byte>& bytes) {
    const auto digest = sha256_hex(std::span<const std::byte>(bytes));
    for (char c : digest) bytes.push_back(static_cast<std::byte>(c));
}

std::span<const std::byte> unseal(std::span<const std::byte> bytes, const std::string& what) {
    if (bytes.size() < kDigestChars) throw FormatError(what + ": truncated (no checksum trailer)");
    const auto body = bytes.first(bytes.size() - kDigestChars);
    const std::string stored(reinterpret_cast<const char*>(bytes.data() + body.size()), kDigestChars);
    if (sha256_hex(body) != stored) throw FormatError(what + ": checksum mismatch (truncated or corrupted)");
    return body;
}

}  // namespace soup::io
