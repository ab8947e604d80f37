#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "fdiff/tensor.hpp"

namespace fdiff {

namespace detail {

inline void check_mask_pair(const Tensor& a, const Tensor& b, const char* where) {
    if (!a.same_shape(b))
        throw ShapeMismatch(std::string(where) + ": " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
}

inline std::int64_t count_fg(const Tensor& m) {
    std::int64_t n = 0;
    for (std::int64_t i = 0; i < m.numel(); ++i)
        if (m.data()[i] != 0.0) ++n;
    return n;
}

} // namespace detail

/// DSC = 2|A n B| / (|A| + |B|); both empty counts as perfect agreement.
inline double dsc(const Tensor& a, const Tensor& b) {
    detail::check_mask_pair(a, b, "dsc");
    std::int64_t inter = 0, na = 0, nb = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const bool va = a.data()[i] != 0.0, vb = b.data()[i] != 0.0;
        na += va;
        nb += vb;
        inter += va && vb;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

/// |A n B| / |A u B|; both empty -> 1.
inline double jaccard(const Tensor& a, const Tensor& b) {
    detail::check_mask_pair(a, b, "jaccard");
    std::int64_t inter = 0, uni = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const bool va = a.data()[i] != 0.0, vb = b.data()[i] != 0.0;
        inter += va && vb;
        uni += va || vb;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

/// TP / (TP + FN) with prediction first, ground truth second; empty ground
/// truth -> 1 (nothing to miss).
inline double recall(const Tensor& pred, const Tensor& gt) {
    detail::check_mask_pair(pred, gt, "recall");
    std::int64_t tp = 0, fn = 0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const bool p = pred.data()[i] != 0.0, g = gt.data()[i] != 0.0;
        tp += p && g;
        fn += !p && g;
    }
    if (tp + fn == 0) return 1.0;
    return static_cast<double>(tp) / static_cast<double>(tp + fn);
}

/// Boundary voxels under 6-connectivity: a foreground voxel with at least one
/// face neighbor that is background, the volume border counting as background.
inline std::vector<std::array<int, 3>> boundary_voxels(const Tensor& mask) {
    if (mask.ndim() != 3) throw InvalidShape("boundary_voxels: need [D,H,W]");
    const int D = mask.dim(0), H = mask.dim(1), W = mask.dim(2);
    const double* m = mask.data();
    auto fg = [&](int z, int y, int x) {
        if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W) return false;
        return m[(static_cast<std::int64_t>(z) * H + y) * W + x] != 0.0;
    };
    std::vector<std::array<int, 3>> out;
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (!fg(z, y, x)) continue;
                if (!fg(z - 1, y, x) || !fg(z + 1, y, x) || !fg(z, y - 1, x) ||
                    !fg(z, y + 1, x) || !fg(z, y, x - 1) || !fg(z, y, x + 1))
                    out.push_back({z, y, x});
            }
    return out;
}

/// Directed nearest-boundary Euclidean distances, A->B and B->A, in voxel
/// units (isotropic spacing 1).
inline std::pair<std::vector<double>, std::vector<double>>
surface_distances(const Tensor& a, const Tensor& b) {
    detail::check_mask_pair(a, b, "surface_distances");
    if (detail::count_fg(a) == 0 || detail::count_fg(b) == 0)
        throw EmptyMask("surface_distances: both masks must be nonempty");
    auto ba = boundary_voxels(a);
    auto bb = boundary_voxels(b);

    auto directed = [](const std::vector<std::array<int, 3>>& from,
                       const std::vector<std::array<int, 3>>& to) {
        std::vector<double> d;
        d.reserve(from.size());
        for (const auto& p : from) {
            std::int64_t best = INT64_MAX;
            for (const auto& q : to) {
                const std::int64_t dz = p[0] - q[0], dy = p[1] - q[1], dx = p[2] - q[2];
                best = std::min(best, dz * dz + dy * dy + dx * dx);
            }
            d.push_back(std::sqrt(static_cast<double>(best)));
        }
        return d;
    };
    return {directed(ba, bb), directed(bb, ba)};
}

/// Percentile with linear interpolation between order statistics.
inline double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw EmptyMask("percentile: no values");
    std::sort(values.begin(), values.end());
    const double rank = q * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(rank);
    if (lo + 1 >= values.size()) return values.back();
    const double frac = rank - static_cast<double>(lo);
    return values[lo] + frac * (values[lo + 1] - values[lo]);
}

/// 95th percentile over the pooled directed surface distances. Both masks
/// empty -> 0; exactly one empty -> undefined (nullopt).
inline std::optional<double> hd95(const Tensor& a, const Tensor& b) {
    detail::check_mask_pair(a, b, "hd95");
    const std::int64_t na = detail::count_fg(a), nb = detail::count_fg(b);
    if (na == 0 && nb == 0) return 0.0;
    if (na == 0 || nb == 0) return std::nullopt;
    auto [dab, dba] = surface_distances(a, b);
    dab.insert(dab.end(), dba.begin(), dba.end());
    return percentile(std::move(dab), 0.95);
}

/// Per-class row of an evaluation report.
struct ClassMetrics {
    double dsc = 0.0, jaccard = 0.0, recall = 0.0;
    std::optional<double> hd95;
};

struct MetricReport {
    std::vector<ClassMetrics> per_class;
    double dsc = 0.0, jaccard = 0.0, recall = 0.0;
    std::optional<double> hd95;      // mean over classes where defined
    int hd95_undefined_count = 0;

    static MetricReport from_classes(std::vector<ClassMetrics> classes) {
        MetricReport r;
        r.per_class = std::move(classes);
        double hsum = 0.0;
        int hn = 0;
        for (const auto& c : r.per_class) {
            r.dsc += c.dsc;
            r.jaccard += c.jaccard;
            r.recall += c.recall;
            if (c.hd95) {
                hsum += *c.hd95;
                ++hn;
            } else {
                ++r.hd95_undefined_count;
            }
        }
        const double n = static_cast<double>(r.per_class.size());
        if (n > 0) {
            r.dsc /= n;
            r.jaccard /= n;
            r.recall /= n;
        }
        if (hn > 0) r.hd95 = hsum / static_cast<double>(hn);
        return r;
    }
};

/// Evaluates one (prediction, ground truth) pair of [C,D,H,W] binary masks.
inline MetricReport evaluate_masks(const Tensor& pred, const Tensor& gt) {
    detail::check_mask_pair(pred, gt, "evaluate_masks");
    if (pred.ndim() != 4) throw InvalidShape("evaluate_masks: need [C,D,H,W]");
    const int C = pred.dim(0);
    const int D = pred.dim(1), H = pred.dim(2), W = pred.dim(3);
    const std::int64_t sp = static_cast<std::int64_t>(D) * H * W;
    std::vector<ClassMetrics> rows;
    for (int c = 0; c < C; ++c) {
        Tensor pc = Tensor::from_data(
            {D, H, W}, std::vector<double>(pred.data() + c * sp, pred.data() + (c + 1) * sp));
        Tensor gc = Tensor::from_data(
            {D, H, W}, std::vector<double>(gt.data() + c * sp, gt.data() + (c + 1) * sp));
        ClassMetrics m;
        m.dsc = dsc(pc, gc);
        m.jaccard = jaccard(pc, gc);
        m.recall = recall(pc, gc);
        m.hd95 = hd95(pc, gc);
        rows.push_back(m);
    }
    return MetricReport::from_classes(std::move(rows));
}

} // namespace fdiff
