#pragma once

// Little-endian encoding helpers shared by the on-disk formats.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace soup::io {

class Writer {
public:
    void bytes(std::string_view s) {
        for (char c : s) buf_.push_back(static_cast<std::byte>(c));
    }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

    const std::vector<std::byte>& buffer() const noexcept { return buf_; }
    std::vector<std::byte> take() { return std::move(buf_); }
    void reserve(std::size_t n) { buf_.reserve(n); }

private:
    void put(std::uint64_t v, int width) {
        for (int i = 0; i < width; ++i) buf_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
    }
    std::vector<std::byte> buf_;
};

// Bounds-checked reader; every overrun throws FormatError naming `what`.
class Reader {
public:
    Reader(std::span<const std::byte> data, std::string what) : data_(data), what_(std::move(what)) {}

    std::string bytes(std::size_t n);
    std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }

    std::size_t remaining() const noexcept { return data_.size() - pos_; }
    std::size_t position() const noexcept { return pos_; }
    void require(std::size_t n) const;

private:
    std::uint64_t get(int width);
    std::span<const std::byte> data_;
    std::size_t pos_ = 0;
    std::string what_;
};

std::vector<std::byte> read_file(const std::filesystem::path& path);
// Writes through a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

// Appends the lowercase hex SHA-256 of the buffer as a 64-byte trailer.
void seal(std::vector<std::byte>& bytes);
// Verifies and strips the trailer; FormatError naming `what` on mismatch.
std::span<const std::byte> unseal(std::span<const std::byte> bytes, const std::string& what);

}  // namespace soup::io
