#pragma once

#include <cmath>
#include <vector>

#include "fdiff/nn_ops.hpp"
#include "fdiff/tensor.hpp"

namespace fdiff {

/// Point-wise conv weight/bias pair with He-normal init.
struct Conv3dLayer {
    Tensor w, b;

    Conv3dLayer() = default;
    Conv3dLayer(int c_out, int c_in, int k, SeededRng& rng)
        : w(Tensor::gaussian({c_out, c_in, k, k, k}, rng)), b(Tensor::zeros({c_out})) {
        const double std = std::sqrt(2.0 / (static_cast<double>(c_in) * k * k * k));
        for (std::int64_t i = 0; i < w.numel(); ++i) w.data()[i] *= std;
        w.set_requires_grad();
        b.set_requires_grad();
    }
};

struct MsCamBranch {
    Conv3dLayer pw1; // C -> C/r
    BatchNorm3d bn1;
    Conv3dLayer pw2; // C/r -> C
    BatchNorm3d bn2;

    MsCamBranch() = default;
    MsCamBranch(int channels, int reduced, SeededRng& rng)
        : pw1(reduced, channels, 1, rng), bn1(reduced),
          pw2(channels, reduced, 1, rng), bn2(channels) {}
};

/// Multi-scale channel attention: a local point-wise branch on the full
/// feature map and a global branch on its pooled statistics, combined into
/// sigmoid gate weights.
struct MsCamParams {
    int channels = 0, reduction = 0;
    MsCamBranch local_branch, global_branch;

    MsCamParams() = default;
    MsCamParams(int channels_, int reduction_, SeededRng& rng)
        : channels(channels_), reduction(reduction_) {
        if (reduction_ < 1 || channels_ % reduction_ != 0 || channels_ / reduction_ < 1)
            throw InvalidReduction("MS-CAM: channels " + std::to_string(channels_) +
                                   " not divisible by reduction " + std::to_string(reduction_));
        local_branch = MsCamBranch(channels_, channels_ / reduction_, rng);
        global_branch = MsCamBranch(channels_, channels_ / reduction_, rng);
    }
};

namespace detail {

inline Tensor mscam_branch(const Tensor& x, MsCamBranch& b, BnMode mode) {
    Tensor t = conv3d(x, b.pw1.w, b.pw1.b);
    t = batchnorm3d(t, b.bn1, mode);
    t = relu(t);
    t = conv3d(t, b.pw2.w, b.pw2.b);
    return batchnorm3d(t, b.bn2, mode);
}

} // namespace detail

/// Gate weights M(x) = sigmoid(L(x) + G(x)) in (0,1). The global branch runs
/// its BN layers on running statistics in every mode: its spatial extent is a
/// single voxel, where batch statistics are undefined (DegenerateBatch).
inline Tensor mscam_weights(const Tensor& x, MsCamParams& p, BnMode mode) {
    if (x.ndim() != 4 || x.dim(0) != p.channels)
        throw ShapeMismatch("mscam_weights: input " + shape_str(x.shape()) + " vs " +
                            std::to_string(p.channels) + " channels");
    Tensor local = detail::mscam_branch(x, p.local_branch, mode);
    Tensor global_ctx = detail::mscam_branch(global_avg_pool3d(x), p.global_branch, BnMode::eval);
    return sigmoid(add(local, global_ctx)); // broadcast over space
}

namespace detail {

// X + M*(Y - X): algebraically M*Y + (1-M)*X, but exact at Y == X and
// elementwise bounded by [min(X,Y), max(X,Y)] for gates in (0,1).
inline Tensor gated_blend(const Tensor& x, const Tensor& y, const Tensor& gate) {
    return add(x, mul(gate, sub(y, x)));
}

} // namespace detail

/// Attention fusion: convex blend of X and Y steered by MS-CAM weights of
/// their sum; the gate weights Y and its complement weights X.
inline Tensor af(const Tensor& x, const Tensor& y, MsCamParams& p, BnMode mode = BnMode::eval) {
    if (!x.same_shape(y))
        throw ShapeMismatch("af: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    Tensor gate = mscam_weights(add(x, y), p, mode);
    return detail::gated_blend(x, y, gate);
}

/// Two-stage fusion: the first attention fusion replaces the plain sum as the
/// input of a second, independently parameterized MS-CAM.
inline Tensor iaf(const Tensor& x, const Tensor& y, MsCamParams& stage1, MsCamParams& stage2,
                  BnMode mode = BnMode::eval) {
    if (!x.same_shape(y))
        throw ShapeMismatch("iaf: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    Tensor w = af(x, y, stage1, mode);
    Tensor gate = mscam_weights(w, stage2, mode);
    return detail::gated_blend(x, y, gate);
}

enum class FuseKind { iaf, af };

/// Left fold over per-timestep predictions in sampling order: the accumulator
/// starts at the earliest prediction and absorbs each later one.
inline Tensor fuse_trajectory(const std::vector<Tensor>& preds, MsCamParams& stage1,
                              MsCamParams& stage2, BnMode mode = BnMode::eval,
                              FuseKind kind = FuseKind::iaf) {
    if (preds.empty()) throw EmptyTrajectory("fuse_trajectory: no predictions");
    for (std::size_t i = 1; i < preds.size(); ++i)
        if (!preds[i].same_shape(preds[0]))
            throw ShapeMismatch("fuse_trajectory: prediction shapes differ");
    Tensor acc = preds[0];
    for (std::size_t i = 1; i < preds.size(); ++i)
        acc = kind == FuseKind::iaf ? iaf(acc, preds[i], stage1, stage2, mode)
                                    : af(acc, preds[i], stage1, mode);
    return acc;
}

} // namespace fdiff
