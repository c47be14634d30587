#pragma once

// Checkpoint container: a UTF-8 JSON manifest (<base>.json) naming tensors,
// shapes, dtypes and byte offsets, plus one raw little-endian blob
// (<base>.bin). Round-trips are bit-exact.

#include "vicl/errors.hpp"
#include "vicl/tensor.hpp"
#include "vicl/util.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace vicl {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are little-endian");

template <class S>
struct NamedTensors {
    std::vector<std::pair<std::string, TensorT<S>>> items;

    void add(const std::string& name, const TensorT<S>& t) { items.push_back({name, t}); }

    const TensorT<S>& find(const std::string& name) const {
        for (const auto& [n, t] : items) {
            if (n == name) return t;
        }
        throw DataError("checkpoint tensor not found: " + name);
    }
};

namespace detail {
template <class S>
constexpr const char* dtype_name() {
    if constexpr (sizeof(S) == 4) return "f32";
    else return "f64";
}
} // namespace detail

template <class S>
void save_checkpoint(const std::filesystem::path& base, const NamedTensors<S>& tensors,
                     const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["endianness"] = "little";
    manifest["meta"] = meta;
    nlohmann::json entries = nlohmann::json::array();
    std::vector<std::uint8_t> blob;
    for (const auto& [name, t] : tensors.items) {
        const std::size_t nbytes = t.data().size() * sizeof(S);
        entries.push_back({{"name", name},
                           {"shape", t.shape()},
                           {"dtype", detail::dtype_name<S>()},
                           {"offset", blob.size()},
                           {"nbytes", nbytes}});
        const std::size_t off = blob.size();
        blob.resize(off + nbytes);
        std::memcpy(blob.data() + off, t.data().data(), nbytes);
    }
    manifest["tensors"] = entries;
    write_file_atomic(base.string() + ".bin", blob.data(), blob.size());
    write_file_atomic(base.string() + ".json", manifest.dump(2) + "\n");
}

template <class S>
NamedTensors<S> load_checkpoint(const std::filesystem::path& base, nlohmann::json* meta_out = nullptr) {
    const std::filesystem::path manifest_path = base.string() + ".json";
    if (!std::filesystem::exists(manifest_path)) {
        throw DataError("checkpoint manifest not found: " + manifest_path.string());
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_file_text(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
    }
    if (meta_out != nullptr) *meta_out = manifest.value("meta", nlohmann::json::object());
    const auto blob = read_file_bytes(base.string() + ".bin");

    NamedTensors<S> out;
    for (const auto& entry : manifest.at("tensors")) {
        const std::string dtype = entry.at("dtype").get<std::string>();
        if (dtype != detail::dtype_name<S>()) {
            throw DataError("checkpoint dtype mismatch: stored " + dtype + ", requested " +
                            detail::dtype_name<S>());
        }
        Shape shape = entry.at("shape").get<Shape>();
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        const std::size_t nbytes = entry.at("nbytes").get<std::size_t>();
        if (offset + nbytes > blob.size()) throw DataError("checkpoint blob is truncated");
        std::vector<S> data(nbytes / sizeof(S));
        std::memcpy(data.data(), blob.data() + offset, nbytes);
        out.add(entry.at("name").get<std::string>(), TensorT<S>(std::move(shape), std::move(data)));
    }
    return out;
}

} // namespace vicl
