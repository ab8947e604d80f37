#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fdiff/io_bytes.hpp"
#include "fdiff/phantom.hpp"
#include "fdiff/tensor.hpp"

namespace fdiff {

// FDFV volume container: magic "FDFV", u16 version, then two self-described
// blocks (image, then label). Block: u8 dtype (0=f32, 1=f64, 2=u8), u8 ndim,
// ndim x u32 dims, little-endian payload.

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

inline void write_tensor_block(std::ostream& os, const Tensor& t, Dtype dtype) {
    detail::put_u8(os, static_cast<std::uint8_t>(dtype));
    detail::put_u8(os, static_cast<std::uint8_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i)
        detail::put_u32(os, static_cast<std::uint32_t>(t.dim(i)));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        const double v = t.data()[i];
        switch (dtype) {
            case Dtype::f32: detail::put_f32(os, static_cast<float>(v)); break;
            case Dtype::f64: detail::put_f64(os, v); break;
            case Dtype::u8: {
                if (v < 0.0 || v > 255.0 || v != std::floor(v))
                    throw IoError("u8 block requires integer values in [0,255]");
                detail::put_u8(os, static_cast<std::uint8_t>(v));
                break;
            }
        }
    }
}

inline Tensor read_tensor_block(std::istream& is) {
    const std::uint8_t dt = detail::get_u8(is, "block dtype");
    if (dt > 2) throw CorruptFile("unknown dtype code " + std::to_string(dt));
    const int ndim = detail::get_u8(is, "block ndim");
    if (ndim < 1 || ndim > 8) throw CorruptFile("implausible ndim " + std::to_string(ndim));
    Shape shape(static_cast<std::size_t>(ndim));
    std::int64_t n = 1;
    for (auto& d : shape) {
        const std::uint32_t v = detail::get_u32(is, "block dim");
        if (v == 0 || v > (1u << 24)) throw CorruptFile("implausible dimension");
        d = static_cast<int>(v);
        n *= d;
    }
    std::vector<double> data(static_cast<std::size_t>(n));
    for (auto& v : data) {
        switch (static_cast<Dtype>(dt)) {
            case Dtype::f32: v = static_cast<double>(detail::get_f32(is, "block payload")); break;
            case Dtype::f64: v = detail::get_f64(is, "block payload"); break;
            case Dtype::u8: v = static_cast<double>(detail::get_u8(is, "block payload")); break;
        }
    }
    return Tensor::from_data(shape, std::move(data));
}

constexpr std::uint16_t kFdfvVersion = 1;

inline void write_volume(const VolumeRecord& rec, const std::filesystem::path& path,
                         Dtype image_dtype = Dtype::f64, Dtype label_dtype = Dtype::u8) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write("FDFV", 4);
    detail::put_u16(os, kFdfvVersion);
    write_tensor_block(os, rec.image, image_dtype);
    write_tensor_block(os, rec.label, label_dtype);
    if (!os) throw IoError("write failed for " + path.string());
}

inline VolumeRecord read_volume(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    char magic[4];
    detail::get_bytes(is, magic, 4, "magic");
    if (std::string(magic, 4) != "FDFV") throw CorruptFile("bad magic in " + path.string());
    const std::uint16_t version = detail::get_u16(is, "version");
    if (version != kFdfvVersion)
        throw CorruptFile("unsupported FDFV version " + std::to_string(version));
    VolumeRecord rec;
    rec.image = read_tensor_block(is);
    rec.label = read_tensor_block(is);
    rec.id = path.stem().string();
    return rec;
}

// ---------------------------------------------------------------------------
// Dataset manifest: JSON list of relative record paths with split tags.
// ---------------------------------------------------------------------------

struct DatasetManifest {
    struct Entry {
        std::string path;
        std::string split; // train | val | test
    };
    std::vector<Entry> entries;

    std::vector<std::size_t> indices_of(const std::string& split) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < entries.size(); ++i)
            if (entries[i].split == split) out.push_back(i);
        return out;
    }
};

struct SplitRatios {
    double train = 0.7, val = 0.1, test = 0.2;
};

/// Deterministic shuffled split. Counts: floor allocation for val and test,
/// remainder to train; a positive ratio that floors to zero records is an
/// error.
inline DatasetManifest make_manifest(const std::vector<std::string>& paths,
                                     const SplitRatios& ratios, std::uint64_t seed) {
    if (ratios.train < 0.0 || ratios.val < 0.0 || ratios.test < 0.0)
        throw InvalidSplit("split ratios must be nonnegative");
    if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
        throw InvalidSplit("split ratios must sum to 1");

    const std::size_t n = paths.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    SeededRng rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.uniform_int(i));
        std::swap(order[i - 1], order[j]);
    }

    const auto n_val = static_cast<std::size_t>(static_cast<double>(n) * ratios.val);
    const auto n_test = static_cast<std::size_t>(static_cast<double>(n) * ratios.test);
    if (n_val + n_test > n) throw InvalidSplit("fewer records than splits");
    const std::size_t n_train = n - n_val - n_test;
    if ((ratios.train > 0.0 && n_train == 0) || (ratios.val > 0.0 && n_val == 0) ||
        (ratios.test > 0.0 && n_test == 0))
        throw InvalidSplit("fewer records than splits");

    DatasetManifest m;
    m.entries.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const char* split = i < n_train ? "train" : i < n_train + n_val ? "val" : "test";
        m.entries[order[i]] = {paths[order[i]], split};
    }
    return m;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    nlohmann::json j;
    j["version"] = 1;
    j["records"] = nlohmann::json::array();
    for (const auto& e : m.entries)
        j["records"].push_back({{"path", e.path}, {"split", e.split}});
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << j.dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile("manifest parse error: " + std::string(e.what()));
    }
    DatasetManifest m;
    if (!j.contains("records") || !j["records"].is_array())
        throw CorruptFile("manifest missing records array");
    for (const auto& r : j["records"]) {
        DatasetManifest::Entry e;
        e.path = r.at("path").get<std::string>();
        e.split = r.at("split").get<std::string>();
        if (e.split != "train" && e.split != "val" && e.split != "test")
            throw CorruptFile("unknown split tag " + e.split);
        m.entries.push_back(std::move(e));
    }
    return m;
}

// ---------------------------------------------------------------------------
// 8-bit grayscale PGM, one file per axial slice.
// ---------------------------------------------------------------------------

inline void write_pgm(const std::filesystem::path& path, int width, int height,
                      const std::vector<std::uint8_t>& pixels) {
    if (static_cast<std::size_t>(width) * height != pixels.size())
        throw IoError("write_pgm: pixel count mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << "P5\n" << width << " " << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(pixels.data()),
             static_cast<std::streamsize>(pixels.size()));
}

/// Dumps channel 0 of a [C,D,H,W] map in [0,1] as one PGM per axial slice.
inline void write_slices_pgm(const Tensor& volume, const std::filesystem::path& dir,
                             const std::string& prefix) {
    if (volume.ndim() != 4) throw InvalidShape("write_slices_pgm: need [C,D,H,W]");
    const int D = volume.dim(1), H = volume.dim(2), W = volume.dim(3);
    std::filesystem::create_directories(dir);
    for (int z = 0; z < D; ++z) {
        std::vector<std::uint8_t> px(static_cast<std::size_t>(H) * W);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double v = volume.data()[(static_cast<std::int64_t>(z) * H + y) * W + x];
                v = std::min(1.0, std::max(0.0, v));
                px[static_cast<std::size_t>(y) * W + x] =
                    static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
        char name[64];
        std::snprintf(name, sizeof name, "%s_z%03d.pgm", prefix.c_str(), z);
        write_pgm(dir / name, W, H, px);
    }
}

} // namespace fdiff
