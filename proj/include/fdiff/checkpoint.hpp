#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "fdiff/io_bytes.hpp"
#include "fdiff/tensor.hpp"

namespace fdiff {

/// Ordered registry of named parameter/state tensors. Entries alias the live
/// model tensors, so loading a checkpoint updates the model in place.
class ParamMap {
public:
    void add(std::string name, Tensor t) {
        if (find(name) != nullptr) throw Error("duplicate parameter name " + name);
        items_.emplace_back(std::move(name), std::move(t));
    }

    Tensor* find(const std::string& name) {
        for (auto& [n, t] : items_)
            if (n == name) return &t;
        return nullptr;
    }

    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
    std::size_t size() const { return items_.size(); }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

// FDFW checkpoint: magic "FDFW", u16 version, u32 block count, then per block
// u32 name length, name bytes, u8 dtype (1 = f64), u8 ndim, ndim x u32 dims,
// little-endian f64 payload.

constexpr std::uint16_t kFdfwVersion = 1;

inline void save_fdfw(const ParamMap& params, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write("FDFW", 4);
    detail::put_u16(os, kFdfwVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params.items()) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        detail::put_bytes(os, name.data(), name.size());
        detail::put_u8(os, 1); // f64
        detail::put_u8(os, static_cast<std::uint8_t>(t.ndim()));
        for (int i = 0; i < t.ndim(); ++i)
            detail::put_u32(os, static_cast<std::uint32_t>(t.dim(i)));
        for (std::int64_t i = 0; i < t.numel(); ++i) detail::put_f64(os, t.data()[i]);
    }
    if (!os) throw IoError("write failed for " + path.string());
}

/// Loads a checkpoint into an existing registry. Every file block must match
/// a registered tensor by name and shape, and every registered tensor must be
/// covered.
inline void load_fdfw(ParamMap& params, const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    char magic[4];
    detail::get_bytes(is, magic, 4, "magic");
    if (std::string(magic, 4) != "FDFW") throw CorruptFile("bad magic in " + path.string());
    const std::uint16_t version = detail::get_u16(is, "version");
    if (version != kFdfwVersion)
        throw CorruptFile("unsupported FDFW version " + std::to_string(version));
    const std::uint32_t count = detail::get_u32(is, "block count");
    if (count != params.size())
        throw CorruptFile("checkpoint holds " + std::to_string(count) + " blocks, model has " +
                          std::to_string(params.size()));
    for (std::uint32_t b = 0; b < count; ++b) {
        const std::uint32_t name_len = detail::get_u32(is, "name length");
        if (name_len == 0 || name_len > 4096) throw CorruptFile("implausible name length");
        std::string name(name_len, '\0');
        detail::get_bytes(is, name.data(), name_len, "name");
        const std::uint8_t dtype = detail::get_u8(is, "dtype");
        if (dtype != 1) throw CorruptFile("checkpoint dtype must be f64");
        const int ndim = detail::get_u8(is, "ndim");
        Shape shape(static_cast<std::size_t>(ndim));
        std::int64_t n = 1;
        for (auto& d : shape) {
            d = static_cast<int>(detail::get_u32(is, "dim"));
            if (d < 1) throw CorruptFile("bad dimension in checkpoint");
            n *= d;
        }
        Tensor* dst = params.find(name);
        if (dst == nullptr) throw CorruptFile("unknown parameter " + name);
        if (dst->shape() != shape)
            throw CorruptFile("shape mismatch for " + name + ": file " + shape_str(shape) +
                              " vs model " + shape_str(dst->shape()));
        for (std::int64_t i = 0; i < n; ++i) dst->data()[i] = detail::get_f64(is, "payload");
    }
}

} // namespace fdiff
