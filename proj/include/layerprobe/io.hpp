#pragma once

#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <system_error>
#include <vector>

#include "layerprobe/errors.hpp"
#include "layerprobe/tensor.hpp"

namespace layerprobe {

// ---------------------------------------------------------------------------
// Deterministic number formatting (shortest round-trip, locale independent)
// ---------------------------------------------------------------------------

inline std::string fmt_float(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw NumericError("failed to format a floating-point value");
    return std::string(buf, ptr);
}

inline std::string fmt_float(float v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw NumericError("failed to format a floating-point value");
    return std::string(buf, ptr);
}

// ---------------------------------------------------------------------------
// Little-endian scalar I/O (explicit so checkpoints are portable)
// ---------------------------------------------------------------------------

inline void put_u32_le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_f32_le(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32_le(out, bits);
}

inline float get_f32_le(const unsigned char* p) {
    const std::uint32_t bits = get_u32_le(p);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

// ---------------------------------------------------------------------------
// Base64 (for perturbation payloads in the corpus JSON lines)
// ---------------------------------------------------------------------------

inline std::string base64_encode(const std::string& bytes) {
    static const char tab[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    while (i + 2 < bytes.size()) {
        const std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                                (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                                static_cast<unsigned char>(bytes[i + 2]);
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(tab[(v >> 6) & 63]);
        out.push_back(tab[v & 63]);
        i += 3;
    }
    if (i + 1 == bytes.size()) {
        const std::uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out += "==";
    } else if (i + 2 == bytes.size()) {
        const std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                                (static_cast<unsigned char>(bytes[i + 1]) << 8);
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(tab[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::string base64_decode(const std::string& text) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    if (text.size() % 4 != 0) throw FormatError("base64 payload length is not a multiple of 4");
    std::string out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int v[4];
        int pad = 0;
        for (int j = 0; j < 4; ++j) {
            const char c = text[i + j];
            if (c == '=') {
                if (i + 4 != text.size() || j < 2) throw FormatError("misplaced base64 padding");
                v[j] = 0;
                ++pad;
            } else {
                v[j] = val(c);
                if (v[j] < 0) throw FormatError("invalid base64 character");
                if (pad > 0) throw FormatError("base64 data after padding");
            }
        }
        const std::uint32_t bits = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
        out.push_back(static_cast<char>((bits >> 16) & 0xff));
        if (pad < 2) out.push_back(static_cast<char>((bits >> 8) & 0xff));
        if (pad < 1) out.push_back(static_cast<char>(bits & 0xff));
    }
    return out;
}

inline std::string tensor_payload_b64(const Tensor& t) {
    std::string bytes;
    bytes.reserve(t.numel() * 4);
    for (float v : t.data) put_f32_le(bytes, v);
    return base64_encode(bytes);
}

inline Tensor tensor_from_payload_b64(const std::vector<int>& shape, const std::string& b64) {
    const std::string bytes = base64_decode(b64);
    const std::size_t n = Tensor::checked_numel(shape);
    if (bytes.size() != n * 4) {
        throw FormatError("tensor payload has " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(n * 4));
    }
    Tensor t(shape);
    const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
    for (std::size_t i = 0; i < n; ++i) t.data[i] = get_f32_le(p + i * 4);
    return t;
}

// ---------------------------------------------------------------------------
// Atomic file writes: write to <path>.tmp, rename on success, so interrupted
// runs never leave partial outputs.
// ---------------------------------------------------------------------------

inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    if (path.has_parent_path()) {
        std::error_code dir_ec;
        std::filesystem::create_directories(path.parent_path(), dir_ec);
        if (dir_ec) {
            throw DataError("cannot create directory " + path.parent_path().string() + ": " +
                            dir_ec.message());
        }
    }
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) {
            out.close();
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw DataError("failed to write " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw DataError("failed to move " + tmp.string() + " into place");
    }
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return content;
}

// ---------------------------------------------------------------------------
// PGM export (8-bit binary portable graymap)
// ---------------------------------------------------------------------------

/// Serializes a [0,1] grid as binary PGM; values are clamped then rounded.
/// The optional comment is embedded as a header comment line.
inline std::string pgm_bytes(const std::vector<std::vector<float>>& grid,
                             const std::string& comment = {}) {
    if (grid.empty() || grid[0].empty()) throw DimensionError("cannot write an empty PGM");
    const std::size_t h = grid.size(), w = grid[0].size();
    std::string out = "P5\n";
    if (!comment.empty()) out += "# " + comment + "\n";
    out += std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (const auto& row : grid) {
        if (row.size() != w) throw DimensionError("ragged PGM grid");
        for (float v : row) {
            const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
            out.push_back(static_cast<char>(static_cast<int>(c * 255.0f + 0.5f)));
        }
    }
    return out;
}

}  // namespace layerprobe
