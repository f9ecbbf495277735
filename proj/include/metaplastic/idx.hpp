#pragma once

// IDX reader for the handwritten-digit corpus. Plain and gzip-compressed files
// are both accepted; compression is detected from the content, not the name.
//
//   images: magic 0x00000803, count, rows, cols, then count*rows*cols bytes
//   labels: magic 0x00000801, count, then count bytes
// All header integers are big-endian.

#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "metaplastic/error.hpp"

namespace metaplastic::idx {

inline constexpr std::uint32_t image_magic = 0x00000803;
inline constexpr std::uint32_t label_magic = 0x00000801;

struct Images {
    std::uint32_t count = 0;
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::vector<std::uint8_t> pixels;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open " + path.string());
    std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (raw.size() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b) {
        gzFile gz = gzopen(path.string().c_str(), "rb");
        if (gz == nullptr) throw IngestError("cannot open gzip stream " + path.string());
        std::vector<std::uint8_t> out;
        std::vector<std::uint8_t> chunk(1 << 16);
        int got = 0;
        while ((got = gzread(gz, chunk.data(), static_cast<unsigned>(chunk.size()))) > 0) {
            out.insert(out.end(), chunk.begin(), chunk.begin() + got);
        }
        int errnum = 0;
        const char* msg = gzerror(gz, &errnum);
        gzclose(gz);
        if (got < 0 || (errnum != Z_OK && errnum != Z_BUF_ERROR)) {
            throw IngestError("corrupt gzip stream in " + path.string() + ": " + (msg ? msg : "unknown"));
        }
        return out;
    }
    return raw;
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                               const std::filesystem::path& path) {
    if (offset + 4 > bytes.size()) {
        throw IngestError(path.string() + ": truncated header at byte offset " + std::to_string(bytes.size()));
    }
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline std::string hex32(std::uint32_t v) {
    char buf[11];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

inline Images parse_images(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
    const auto magic = read_be32(bytes, 0, path);
    if (magic != image_magic) {
        throw IngestError(path.string() + ": expected image magic " + hex32(image_magic) + ", found " + hex32(magic));
    }
    Images out;
    out.count = read_be32(bytes, 4, path);
    out.rows = read_be32(bytes, 8, path);
    out.cols = read_be32(bytes, 12, path);
    const std::size_t need = std::size_t{out.count} * out.rows * out.cols;
    if (bytes.size() - 16 < need) {
        throw IngestError(path.string() + ": truncated image payload at byte offset " + std::to_string(bytes.size()) +
                          " (expected " + std::to_string(16 + need) + " bytes)");
    }
    out.pixels.assign(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(need));
    return out;
}

inline std::vector<std::uint8_t> parse_labels(const std::vector<std::uint8_t>& bytes,
                                              const std::filesystem::path& path) {
    const auto magic = read_be32(bytes, 0, path);
    if (magic != label_magic) {
        throw IngestError(path.string() + ": expected label magic " + hex32(label_magic) + ", found " + hex32(magic));
    }
    const std::size_t count = read_be32(bytes, 4, path);
    if (bytes.size() - 8 < count) {
        throw IngestError(path.string() + ": truncated label payload at byte offset " + std::to_string(bytes.size()) +
                          " (expected " + std::to_string(8 + count) + " bytes)");
    }
    return {bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(count)};
}

inline Images read_images(const std::filesystem::path& path) { return parse_images(read_file_bytes(path), path); }
inline std::vector<std::uint8_t> read_labels(const std::filesystem::path& path) {
    return parse_labels(read_file_bytes(path), path);
}

inline void append_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

// Uncompressed writers, used by tests and by tooling that produces corpora.
inline void write_images(const std::filesystem::path& path, const Images& images) {
    std::vector<std::uint8_t> out;
    append_be32(out, image_magic);
    append_be32(out, images.count);
    append_be32(out, images.rows);
    append_be32(out, images.cols);
    out.insert(out.end(), images.pixels.begin(), images.pixels.end());
    std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(out.data()),
                                                static_cast<std::streamsize>(out.size()));
}

inline void write_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels) {
    std::vector<std::uint8_t> out;
    append_be32(out, label_magic);
    append_be32(out, static_cast<std::uint32_t>(labels.size()));
    out.insert(out.end(), labels.begin(), labels.end());
    std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(out.data()),
                                                static_cast<std::streamsize>(out.size()));
}

}  // namespace metaplastic::idx
