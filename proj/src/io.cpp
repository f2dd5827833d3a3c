// SPDX-License-Identifier: Apache-2.0
#include "postadapt/io.hpp"

#include <cstdio>
#include <filesystem>

namespace postadapt {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed on " + path);
    return s;
}

void write_file(const std::string& path, const std::string& content) {
    // Write to a sibling temp file and rename, so failures never leave a
    // partial file at the destination.
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp + " for writing");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) {
            std::remove(tmp.c_str());
            throw IoError("write failed on " + tmp);
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::remove(tmp.c_str());
        throw IoError("cannot move " + tmp + " to " + path + ": " + ec.message());
    }
}

uint64_t file_digest(const std::string& path) { return fnv1a64(read_file(path)); }

std::string digest_hex(uint64_t digest) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(digest));
    return std::string(buf);
}

} // namespace postadapt
