#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxgene/error.hpp"

namespace voxgene {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "blob I/O assumes a little-endian host");

inline void write_bytes(const std::filesystem::path& path, const void* data, std::size_t n) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw input_error("cannot open for writing: " + path.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw input_error("write failed: " + path.string());
}

inline std::vector<char> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw input_error("cannot open: " + path.string());
    const auto size = in.tellg();
    in.seekg(0);
    std::vector<char> buf(static_cast<std::size_t>(size));
    in.read(buf.data(), size);
    if (!in) throw input_error("read failed: " + path.string());
    return buf;
}

template <class T>
void write_blob(const std::filesystem::path& path, const std::vector<T>& v) {
    write_bytes(path, v.data(), v.size() * sizeof(T));
}

template <class T>
std::vector<T> read_blob(const std::filesystem::path& path, std::size_t expected_count) {
    const auto bytes = read_bytes(path);
    if (bytes.size() != expected_count * sizeof(T))
        throw input_error("blob " + path.string() + " has " + std::to_string(bytes.size()) +
                          " bytes, expected " + std::to_string(expected_count * sizeof(T)));
    std::vector<T> v(expected_count);
    std::memcpy(v.data(), bytes.data(), bytes.size());
    return v;
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw input_error("cannot open for writing: " + path.string());
    out << j.dump(2) << "\n";
    if (!out) throw input_error("write failed: " + path.string());
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw input_error("cannot open: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw input_error("malformed JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw input_error("cannot open for writing: " + path.string());
    out << text;
    if (!out) throw input_error("write failed: " + path.string());
}

}  // namespace voxgene
