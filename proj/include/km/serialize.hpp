#pragma once

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <string>
#include <tuple>
#include <vector>

#include "km/common.hpp"

// Binary formats.
//   tensor container: "KMTC" | u32 LE header bytes | JSON {shape,dtype,order} | raw values
//   checkpoint:       "KMCK" | u32 LE manifest bytes | JSON manifest | containers in order
// The manifest records version, dtype, the model config, and a tensor list of
// {name, shape, kind} with kind "param" or "buffer". Values are IEEE-754
// little-endian, matching every platform this builds on.

namespace km {

template <class T>
constexpr const char* dtype_name();
template <>
constexpr const char* dtype_name<float>() {
    return "f32";
}
template <>
constexpr const char* dtype_name<double>() {
    return "f64";
}

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    KM_REQUIRE(in.gcount() == 4, IoError, "truncated length field");
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
           std::uint32_t(b[3]) << 24;
}

inline nlohmann::json read_magic_json(std::istream& in, const char* magic, const char* what) {
    char m[4];
    in.read(m, 4);
    KM_REQUIRE(in.gcount() == 4 && std::string(m, 4) == magic, IoError, "not a ", what, " stream");
    std::uint32_t len = read_u32(in);
    std::string body(len, '\0');
    in.read(body.data(), len);
    KM_REQUIRE(in.gcount() == std::streamsize(len), IoError, "truncated ", what, " header");
    return nlohmann::json::parse(body);
}

}  // namespace detail

template <class T>
void write_tensor_blob(std::ostream& out, const Shape& shape, const std::vector<T>& values) {
    KM_REQUIRE(values.size() == numel(shape), ShapeError, "blob size mismatch for shape ",
               shape_str(shape));
    nlohmann::json h{{"shape", shape}, {"dtype", dtype_name<T>()}, {"order", "little"}};
    std::string body = h.dump();
    out.write("KMTC", 4);
    detail::write_u32(out, std::uint32_t(body.size()));
    out.write(body.data(), std::streamsize(body.size()));
    out.write(reinterpret_cast<const char*>(values.data()), std::streamsize(values.size() * sizeof(T)));
    KM_REQUIRE(out.good(), IoError, "short tensor write");
}

template <class T>
std::pair<Shape, std::vector<T>> read_tensor_blob(std::istream& in) {
    nlohmann::json h = detail::read_magic_json(in, "KMTC", "tensor container");
    KM_REQUIRE(h.at("dtype").get<std::string>() == dtype_name<T>(), IoError,
               "tensor container holds dtype ", h.at("dtype").get<std::string>(), ", wanted ",
               dtype_name<T>());
    KM_REQUIRE(h.at("order").get<std::string>() == "little", IoError, "unsupported byte order");
    Shape shape = h.at("shape").get<Shape>();
    std::vector<T> values(numel(shape));
    in.read(reinterpret_cast<char*>(values.data()), std::streamsize(values.size() * sizeof(T)));
    KM_REQUIRE(in.gcount() == std::streamsize(values.size() * sizeof(T)), IoError,
               "truncated tensor data for shape ", shape_str(shape));
    return {std::move(shape), std::move(values)};
}

template <class T>
struct CheckpointEntry {
    std::string name;
    std::string kind;  // "param" or "buffer"
    Shape shape;
    std::vector<T> values;
};

template <class T>
void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const std::vector<CheckpointEntry<T>>& entries) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& e : entries)
        list.push_back({{"name", e.name}, {"shape", e.shape}, {"kind", e.kind}});
    nlohmann::json manifest{
        {"version", 1}, {"dtype", dtype_name<T>()}, {"config", config}, {"tensors", list}};
    std::ofstream out(path, std::ios::binary);
    KM_REQUIRE(out.good(), IoError, "cannot write ", path);
    std::string body = manifest.dump();
    out.write("KMCK", 4);
    detail::write_u32(out, std::uint32_t(body.size()));
    out.write(body.data(), std::streamsize(body.size()));
    for (const auto& e : entries) write_tensor_blob<T>(out, e.shape, e.values);
    KM_REQUIRE(out.good(), IoError, "short checkpoint write to ", path);
}

inline nlohmann::json read_checkpoint_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    KM_REQUIRE(in.good(), IoError, "cannot open ", path);
    return detail::read_magic_json(in, "KMCK", "checkpoint");
}

template <class T>
std::pair<nlohmann::json, std::vector<CheckpointEntry<T>>> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    KM_REQUIRE(in.good(), IoError, "cannot open ", path);
    nlohmann::json manifest = detail::read_magic_json(in, "KMCK", "checkpoint");
    KM_REQUIRE(manifest.at("dtype").get<std::string>() == dtype_name<T>(), IoError, path,
               " holds dtype ", manifest.at("dtype").get<std::string>(), ", wanted ", dtype_name<T>());
    std::vector<CheckpointEntry<T>> entries;
    for (const auto& item : manifest.at("tensors")) {
        CheckpointEntry<T> e;
        e.name = item.at("name").get<std::string>();
        e.kind = item.at("kind").get<std::string>();
        auto [shape, values] = read_tensor_blob<T>(in);
        KM_REQUIRE(shape == item.at("shape").get<Shape>(), IoError, "checkpoint tensor ", e.name,
                   " shape drifted between manifest and blob");
        e.shape = std::move(shape);
        e.values = std::move(values);
        entries.push_back(std::move(e));
    }
    return {std::move(manifest), std::move(entries)};
}

}  // namespace km
