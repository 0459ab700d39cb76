#pragma once

// Self-describing binary container used for every checkpoint:
//
//   u64 (little endian)  header length N
//   N bytes              JSON header
//   remaining bytes      raw tensor payload
//
// The header carries {"format": "stylebrush.container", "version": 1,
// "kind": ..., "meta": {...}, "tensors": {name: {"dtype": "F32"|"F64",
// "shape": [...], "offsets": [begin, end]}}} with offsets relative to the
// start of the payload.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "stylebrush/core/error.hpp"
#include "stylebrush/core/tensor.hpp"

namespace stylebrush::io {

inline constexpr const char* kContainerFormat = "stylebrush.container";
inline constexpr int kContainerVersion = 1;

template <class T>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "F32";
    else if constexpr (std::is_same_v<T, double>) return "F64";
    else static_assert(sizeof(T) == 0, "unsupported dtype");
}

struct TensorBlob {
    std::string dtype;
    Shape shape;
    std::vector<char> bytes;
};

struct Container {
    std::string kind;
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, TensorBlob> tensors;

    template <class T>
    void put(const std::string& name, const Tensor<T>& t) {
        TensorBlob blob{dtype_name<T>(), t.shape(), std::vector<char>(t.size() * sizeof(T))};
        if (!blob.bytes.empty()) std::memcpy(blob.bytes.data(), t.data(), blob.bytes.size());
        tensors[name] = std::move(blob);
    }

    bool has(const std::string& name) const { return tensors.count(name) != 0; }

    /// Reads a tensor, converting between F32 and F64 when needed.
    template <class T>
    Tensor<T> get(const std::string& name) const {
        auto it = tensors.find(name);
        require(it != tensors.end(), ErrorKind::checkpoint, "checkpoint has no tensor '" + name + "'");
        const TensorBlob& b = it->second;
        if (b.dtype == "F32") return decode<float>(b).template cast<T>();
        if (b.dtype == "F64") return decode<double>(b).template cast<T>();
        fail(ErrorKind::checkpoint, "unsupported dtype '" + b.dtype + "' for tensor '" + name + "'");
    }

private:
    template <class U>
    static Tensor<U> decode(const TensorBlob& b) {
        require(b.bytes.size() == numel(b.shape) * sizeof(U), ErrorKind::checkpoint, "tensor payload size mismatch");
        Tensor<U> t(b.shape);
        if (!b.bytes.empty()) std::memcpy(t.data(), b.bytes.data(), b.bytes.size());
        return t;
    }
};

/// Writes to a temporary sibling file, then renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), ErrorKind::io, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        require(out.good(), ErrorKind::io, "short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline void save_container(const std::filesystem::path& path, const Container& c) {
    nlohmann::json header;
    header["format"] = kContainerFormat;
    header["version"] = kContainerVersion;
    header["kind"] = c.kind;
    header["meta"] = c.meta;
    header["tensors"] = nlohmann::json::object();
    std::string payload;
    for (const auto& [name, blob] : c.tensors) {
        const std::size_t begin = payload.size();
        payload.append(blob.bytes.data(), blob.bytes.size());
        header["tensors"][name] = {{"dtype", blob.dtype}, {"shape", blob.shape}, {"offsets", {begin, payload.size()}}};
    }
    const std::string h = header.dump();
    std::string out(8, '\0');
    std::uint64_t n = h.size();
    for (int i = 0; i < 8; ++i) out[static_cast<std::size_t>(i)] = static_cast<char>((n >> (8 * i)) & 0xff);
    out += h;
    out += payload;
    write_file_atomic(path, out);
}

inline Container load_container(const std::filesystem::path& path, const std::string& expected_kind = "") {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::io, "checkpoint not found: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    require(bytes.size() >= 8, ErrorKind::checkpoint, "truncated checkpoint: " + path.string());
    std::uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= std::uint64_t(static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)])) << (8 * i);
    require(n <= bytes.size() - 8, ErrorKind::checkpoint, "corrupt checkpoint header: " + path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(8, n));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::checkpoint, "unreadable checkpoint header in " + path.string() + ": " + e.what());
    }
    require(header.value("format", "") == kContainerFormat, ErrorKind::checkpoint,
            "not a stylebrush checkpoint: " + path.string());
    const int version = header.value("version", -1);
    require(version == kContainerVersion, ErrorKind::checkpoint,
            "checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                std::to_string(kContainerVersion) + "): " + path.string());
    Container c;
    c.kind = header.value("kind", "");
    if (!expected_kind.empty())
        require(c.kind == expected_kind, ErrorKind::checkpoint,
                "expected a '" + expected_kind + "' checkpoint but " + path.string() + " holds '" + c.kind + "'");
    c.meta = header.value("meta", nlohmann::json::object());
    const std::size_t payload = 8 + n;
    for (const auto& [name, entry] : header.at("tensors").items()) {
        TensorBlob b;
        b.dtype = entry.at("dtype").get<std::string>();
        b.shape = entry.at("shape").get<Shape>();
        const auto off = entry.at("offsets").get<std::vector<std::size_t>>();
        require(off.size() == 2 && off[0] <= off[1] && payload + off[1] <= bytes.size(), ErrorKind::checkpoint,
                "tensor '" + name + "' lies outside the payload");
        b.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(payload + off[0]),
                       bytes.begin() + static_cast<std::ptrdiff_t>(payload + off[1]));
        c.tensors.emplace(name, std::move(b));
    }
    return c;
}

}  // namespace stylebrush::io
