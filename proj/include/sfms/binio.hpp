#pragma once

// Little-endian primitive IO shared by the motion container and checkpoint
// formats. Readers track their byte offset so parse errors can name it.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "sfms/common.hpp"

namespace sfms::binio {

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

class Reader {
  public:
    Reader(std::string data, std::string origin)
        : data_(std::move(data)), origin_(std::move(origin)) {}

    std::size_t offset() const { return off_; }
    std::size_t remaining() const { return data_.size() - off_; }

    std::uint32_t u32(const char* what) {
        need(4, what);
        const unsigned char* p = reinterpret_cast<const unsigned char*>(data_.data()) + off_;
        off_ += 4;
        return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
               (static_cast<std::uint32_t>(p[2]) << 16) |
               (static_cast<std::uint32_t>(p[3]) << 24);
    }

    float f32(const char* what) {
        std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = data_.substr(off_, n);
        off_ += n;
        return s;
    }

    void f32_block(float* dst, std::size_t count, const char* what) {
        need(count * 4, what);
        for (std::size_t i = 0; i < count; ++i) {
            const unsigned char* p =
                reinterpret_cast<const unsigned char*>(data_.data()) + off_ + i * 4;
            std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                                 (static_cast<std::uint32_t>(p[1]) << 8) |
                                 (static_cast<std::uint32_t>(p[2]) << 16) |
                                 (static_cast<std::uint32_t>(p[3]) << 24);
            std::memcpy(dst + i, &bits, 4);
        }
        off_ += count * 4;
    }

    void expect_end() {
        if (off_ != data_.size())
            throw ParseError(origin_ + ": trailing bytes (expected length " +
                                 std::to_string(off_) + ", file has " +
                                 std::to_string(data_.size()) + ")",
                             off_);
    }

  private:
    void need(std::size_t n, const char* what) {
        if (off_ + n > data_.size())
            throw ParseError(origin_ + ": truncated while reading " + what + " (need " +
                                 std::to_string(n) + " bytes at offset " + std::to_string(off_) +
                                 ", " + std::to_string(data_.size() - off_) + " left)",
                             off_);
    }

    std::string data_;
    std::string origin_;
    std::size_t off_ = 0;
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for read: " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed: " + path);
    return data;
}

inline void write_file(const std::string& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + path);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace sfms::binio
