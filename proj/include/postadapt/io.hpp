// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "postadapt/errors.hpp"
#include "postadapt/mat.hpp"

namespace postadapt {

// FNV-1a 64. Tamper-evidence for shipped data and manifests, not security.
inline uint64_t fnv1a64(std::span<const unsigned char> bytes) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) {
    return fnv1a64(std::span<const unsigned char>(
        reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);
uint64_t file_digest(const std::string& path);
std::string digest_hex(uint64_t digest);

// Little-endian binary writer/reader for the fixed file formats
// (TOY1 / EMB1 / HSC1 / ADP1).
class BinWriter {
public:
    void u8(uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u16(uint16_t v) { le(v); }
    void u32(uint32_t v) { le(v); }
    void u64(uint64_t v) { le(v); }
    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        le(bits);
    }
    void bytes(std::string_view s) { buf_.append(s); }
    void mat(const Mat& m) {
        u32(static_cast<uint32_t>(m.rows));
        u32(static_cast<uint32_t>(m.cols));
        for (float v : m.data) f32(v);
    }
    void named_mat(const std::string& name, const Mat& m) {
        u16(static_cast<uint16_t>(name.size()));
        bytes(name);
        mat(m);
    }
    const std::string& buffer() const { return buf_; }
    void save(const std::string& path) const { write_file(path, buf_); }

private:
    template <typename T>
    void le(T v) {
        for (size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    std::string buf_;
};

class BinReader {
public:
    explicit BinReader(std::string data, std::string name)
        : data_(std::move(data)), name_(std::move(name)) {}

    static BinReader from_file(const std::string& path) { return BinReader(read_file(path), path); }

    uint8_t u8() { return static_cast<uint8_t>(take(1)[0]); }
    uint16_t u16() { return le<uint16_t>(); }
    uint32_t u32() { return le<uint32_t>(); }
    uint64_t u64() { return le<uint64_t>(); }
    float f32() {
        uint32_t bits = le<uint32_t>();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string str(size_t n) {
        const char* p = take(n);
        return std::string(p, n);
    }
    Mat mat() {
        uint32_t r = u32();
        uint32_t c = u32();
        if (r == 0 || c == 0 || static_cast<uint64_t>(r) * c > (1ULL << 31))
            throw ParseError(name_ + ": bad tensor shape");
        Mat m(static_cast<int>(r), static_cast<int>(c));
        for (auto& v : m.data) v = f32();
        return m;
    }
    void expect_magic(const char* magic) {
        if (str(4) != magic) throw ParseError(name_ + ": bad magic, expected " + magic);
    }
    bool at_end() const { return pos_ == data_.size(); }
    const std::string& name() const { return name_; }

private:
    const char* take(size_t n) {
        if (pos_ + n > data_.size()) throw ParseError(name_ + ": truncated file");
        const char* p = data_.data() + pos_;
        pos_ += n;
        return p;
    }
    template <typename T>
    T le() {
        const char* p = take(sizeof(T));
        T v = 0;
        for (size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<T>(static_cast<unsigned char>(p[i])) << (8 * i);
        return v;
    }
    std::string data_;
    std::string name_;
    size_t pos_ = 0;
};

} // namespace postadapt
