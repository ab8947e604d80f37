#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fdiff/tensor.hpp"

namespace fdiff {

/// Synthetic fuzzy-boundary volume settings. Labels are nested ellipsoid
/// masks (class k+1 sits inside class k); the image is a scaled label map
/// with an optional blurred boundary halo plus additive noise.
struct PhantomConfig {
    int grid = 16;
    int classes = 2;
    int blobs_min = 1, blobs_max = 2;
    double radius_min = 3.0, radius_max = 6.0;
    double boundary_sigma = 1.0; // halo blur width; 0 disables the halo
    double noise_level = 0.1;
    double core_shrink = 0.55;   // per-class semi-axis scale
    std::uint64_t seed = 0;
};

struct VolumeRecord {
    Tensor image; // [C_img, D, H, W] in [0,1]
    Tensor label; // [C_mask, D, H, W] binary
    std::string id;
    std::uint64_t seed = 0;
};

namespace detail {

inline void validate_phantom_config(const PhantomConfig& c) {
    if (c.grid < 2) throw InvalidConfig("phantom: grid too small");
    if (c.classes < 1) throw InvalidConfig("phantom: need at least one class");
    if (c.blobs_min < 1 || c.blobs_max < c.blobs_min)
        throw InvalidConfig("phantom: bad blob count range");
    if (!(c.radius_min > 0.0) || c.radius_max < c.radius_min)
        throw InvalidConfig("phantom: bad radius range");
    if (2.0 * c.radius_max > static_cast<double>(c.grid))
        throw InvalidConfig("phantom: blob larger than grid");
    if (c.boundary_sigma < 0.0) throw InvalidConfig("phantom: negative blur width");
    if (c.noise_level < 0.0) throw InvalidConfig("phantom: negative noise level");
    if (!(c.core_shrink > 0.0) || c.core_shrink >= 1.0)
        throw InvalidConfig("phantom: core_shrink must be in (0,1)");
}

// Separable Gaussian blur along each axis, kernel truncated at 3 sigma.
inline void gaussian_blur3d(std::vector<double>& v, int D, int H, int W, double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius) + 1);
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i / sigma) * (i / sigma));
        norm += kernel[static_cast<std::size_t>(i + radius)];
    }
    for (auto& k : kernel) k /= norm;

    std::vector<double> tmp(v.size());
    const int dims[3] = {D, H, W};
    const std::int64_t strides[3] = {static_cast<std::int64_t>(H) * W, W, 1};
    for (int axis = 0; axis < 3; ++axis) {
        const int len = dims[axis];
        const std::int64_t stride = strides[axis];
        for (int z = 0; z < D; ++z)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const int idx3[3] = {z, y, x};
                    const std::int64_t base = (static_cast<std::int64_t>(z) * H + y) * W + x;
                    double acc = 0.0;
                    for (int o = -radius; o <= radius; ++o) {
                        int p = idx3[axis] + o;
                        if (p < 0 || p >= len) continue; // zero boundary
                        acc += kernel[static_cast<std::size_t>(o + radius)] *
                               v[base + static_cast<std::int64_t>(o) * stride];
                    }
                    tmp[static_cast<std::size_t>(base)] = acc;
                }
        v.swap(tmp);
    }
}

} // namespace detail

/// Deterministic phantom: identical (config, rng state) gives a bitwise
/// identical record.
inline VolumeRecord gen_phantom(const PhantomConfig& cfg, SeededRng& rng) {
    detail::validate_phantom_config(cfg);
    const int G = cfg.grid;
    const std::int64_t sp = static_cast<std::int64_t>(G) * G * G;

    struct Blob {
        double cz, cy, cx, az, ay, ax;
    };
    const int n_blobs =
        cfg.blobs_min + static_cast<int>(rng.uniform_int(
                            static_cast<std::uint64_t>(cfg.blobs_max - cfg.blobs_min + 1)));
    std::vector<Blob> blobs;
    for (int i = 0; i < n_blobs; ++i) {
        Blob b;
        b.az = cfg.radius_min + (cfg.radius_max - cfg.radius_min) * rng.uniform();
        b.ay = cfg.radius_min + (cfg.radius_max - cfg.radius_min) * rng.uniform();
        b.ax = cfg.radius_min + (cfg.radius_max - cfg.radius_min) * rng.uniform();
        // keep the blob fully inside the volume
        b.cz = b.az + (G - 2.0 * b.az) * rng.uniform();
        b.cy = b.ay + (G - 2.0 * b.ay) * rng.uniform();
        b.cx = b.ax + (G - 2.0 * b.ax) * rng.uniform();
        blobs.push_back(b);
    }

    Tensor label = Tensor::zeros({cfg.classes, G, G, G});
    for (int cls = 0; cls < cfg.classes; ++cls) {
        const double shrink = std::pow(cfg.core_shrink, cls);
        double* lv = label.data() + cls * sp;
        for (const auto& b : blobs) {
            const double az = b.az * shrink, ay = b.ay * shrink, ax = b.ax * shrink;
            for (int z = 0; z < G; ++z)
                for (int y = 0; y < G; ++y)
                    for (int x = 0; x < G; ++x) {
                        const double dz = (z + 0.5 - b.cz) / az;
                        const double dy = (y + 0.5 - b.cy) / ay;
                        const double dx = (x + 0.5 - b.cx) / ax;
                        if (dz * dz + dy * dy + dx * dx <= 1.0)
                            lv[(static_cast<std::int64_t>(z) * G + y) * G + x] = 1.0;
                    }
        }
    }

    // intensity: equal weight per class summing to 0.7 at the deepest nesting
    Tensor image = Tensor::zeros({1, G, G, G});
    const double w = 0.7 / static_cast<double>(cfg.classes);
    for (int cls = 0; cls < cfg.classes; ++cls) {
        const double* lv = label.data() + cls * sp;
        for (std::int64_t i = 0; i < sp; ++i) image.data()[i] += w * lv[i];
    }

    if (cfg.boundary_sigma > 0.0) {
        // halo: blurred outer-class boundary shell
        std::vector<double> halo(static_cast<std::size_t>(sp), 0.0);
        const double* lv = label.data();
        auto fg = [&](int z, int y, int x) {
            if (z < 0 || z >= G || y < 0 || y >= G || x < 0 || x >= G) return false;
            return lv[(static_cast<std::int64_t>(z) * G + y) * G + x] != 0.0;
        };
        for (int z = 0; z < G; ++z)
            for (int y = 0; y < G; ++y)
                for (int x = 0; x < G; ++x) {
                    if (!fg(z, y, x)) continue;
                    if (!fg(z - 1, y, x) || !fg(z + 1, y, x) || !fg(z, y - 1, x) ||
                        !fg(z, y + 1, x) || !fg(z, y, x - 1) || !fg(z, y, x + 1))
                        halo[static_cast<std::size_t>((static_cast<std::int64_t>(z) * G + y) * G + x)] = 1.0;
                }
        detail::gaussian_blur3d(halo, G, G, G, cfg.boundary_sigma);
        for (std::int64_t i = 0; i < sp; ++i) image.data()[i] += 0.25 * halo[static_cast<std::size_t>(i)];
    }

    if (cfg.noise_level > 0.0)
        for (std::int64_t i = 0; i < sp; ++i)
            image.data()[i] += cfg.noise_level * rng.normal();

    if (cfg.boundary_sigma > 0.0 || cfg.noise_level > 0.0)
        for (std::int64_t i = 0; i < sp; ++i)
            image.data()[i] = std::min(1.0, std::max(0.0, image.data()[i]));

    VolumeRecord rec;
    rec.image = image;
    rec.label = label;
    rec.seed = rng.seed();
    return rec;
}

/// Flips one spatial axis (0=D, 1=H, 2=W) of a [C,D,H,W] tensor.
inline Tensor flip3d(const Tensor& t, int axis) {
    if (t.ndim() != 4) throw InvalidShape("flip3d: need [C,D,H,W]");
    if (axis < 0 || axis > 2) throw InvalidConfig("flip3d: axis must be 0, 1 or 2");
    const int C = t.dim(0), D = t.dim(1), H = t.dim(2), W = t.dim(3);
    Tensor out = Tensor::zeros(t.shape());
    for (int c = 0; c < C; ++c)
        for (int z = 0; z < D; ++z)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const int sz = axis == 0 ? D - 1 - z : z;
                    const int sy = axis == 1 ? H - 1 - y : y;
                    const int sx = axis == 2 ? W - 1 - x : x;
                    out.data()[((static_cast<std::int64_t>(c) * D + z) * H + y) * W + x] =
                        t.data()[((static_cast<std::int64_t>(c) * D + sz) * H + sy) * W + sx];
                }
    return out;
}

/// Random flips applied to image and label together; each listed axis flips
/// independently with probability p.
inline VolumeRecord augment_flip(const VolumeRecord& rec, const std::vector<int>& axes,
                                 SeededRng& rng, double p) {
    if (p < 0.0 || p > 1.0) throw InvalidConfig("augment_flip: p must be in [0,1]");
    VolumeRecord out = rec;
    for (int axis : axes) {
        if (rng.uniform() < p) {
            out.image = flip3d(out.image, axis);
            out.label = flip3d(out.label, axis);
        }
    }
    return out;
}

} // namespace fdiff
