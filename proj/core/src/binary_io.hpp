#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dtr/errors.hpp"

namespace dtr::detail {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

class ByteWriter {
public:
    template <typename T>
    void put(T value) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
        bytes_.insert(bytes_.end(), p, p + sizeof(T));
    }
    void put_bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        bytes_.insert(bytes_.end(), p, p + n);
    }
    void put_string(std::string_view s) { put_bytes(s.data(), s.size()); }

    std::vector<std::uint8_t>& bytes() { return bytes_; }
    std::size_t size() const { return bytes_.size(); }

private:
    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    template <typename T>
    T get() {
        T value;
        std::memcpy(&value, take(sizeof(T)), sizeof(T));
        return value;
    }
    const std::uint8_t* take(std::size_t n) {
        if (n > bytes_.size() - pos_) {
            throw DataError(what_ + ": truncated (needed " + std::to_string(n) + " bytes at offset " +
                            std::to_string(pos_) + ", " + std::to_string(bytes_.size() - pos_) + " left)");
        }
        const std::uint8_t* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::string get_string(std::size_t n) {
        const auto* p = take(n);
        return std::string(reinterpret_cast<const char*>(p), n);
    }

    std::size_t position() const { return pos_; }
    void seek(std::size_t pos) {
        if (pos > bytes_.size()) throw DataError(what_ + ": offset " + std::to_string(pos) + " beyond end of data");
        pos_ = pos;
    }
    bool at_end() const { return pos_ == bytes_.size(); }
    std::size_t size() const { return bytes_.size(); }

private:
    std::span<const std::uint8_t> bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

}  // namespace dtr::detail
