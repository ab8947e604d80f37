#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fdiff/attention.hpp"
#include "fdiff/checkpoint.hpp"
#include "fdiff/fuzzy.hpp"
#include "fdiff/nn_ops.hpp"
#include "fdiff/tensor.hpp"

namespace fdiff {

struct UNetConfig {
    int depth = 2;           // number of downsamplings
    int base_channels = 8;
    int mask_channels = 2;
    int image_channels = 1;
    int time_embed_dim = 32;
    int flm_memberships = 5;
    bool flm_enabled = true; // applies to every skip level

    int in_channels() const { return mask_channels + image_channels; }
    int channels_at(int level) const { return base_channels << level; }
};

/// Sinusoidal position code [sin(t w_i), cos(t w_i)] with log-spaced
/// frequencies from 1 down to 1e-4.
inline Tensor timestep_embedding(int t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw InvalidConfig("timestep_embedding: dim must be even");
    const int half = dim / 2;
    Tensor e = Tensor::zeros({dim});
    for (int i = 0; i < half; ++i) {
        const double w =
            half == 1 ? 1.0 : std::exp(-std::log(10000.0) * static_cast<double>(i) / (half - 1));
        e.data()[i] = std::sin(t * w);
        e.data()[half + i] = std::cos(t * w);
    }
    return e;
}

/// Encoder/decoder parameter bundle. All blocks are allocated for every
/// variant so that parameter initialization consumes the seed stream
/// identically whether or not FLM is active.
struct UNetParams {
    UNetConfig cfg;
    Conv3dLayer enc_in;               // in_channels -> c0
    std::vector<Conv3dLayer> down;    // level i -> i+1, stride 2
    std::vector<Conv3dLayer> enc;     // refine at level i+1
    Conv3dLayer bottleneck;
    Conv3dLayer time_proj;            // time_embed_dim -> c_depth, 1x1x1
    std::vector<Conv3dLayer> up;      // level i+1 -> i after upsampling
    std::vector<Conv3dLayer> dec;     // 2*c_i -> c_i after skip concat
    Conv3dLayer head;                 // c0 -> mask_channels, 1x1x1
    std::vector<FlmParams> flm;       // one per skip level

    UNetParams() = default;
    UNetParams(const UNetConfig& config, SeededRng& rng) : cfg(config) {
        enc_in = Conv3dLayer(cfg.channels_at(0), cfg.in_channels(), 3, rng);
        for (int i = 0; i < cfg.depth; ++i) {
            down.emplace_back(cfg.channels_at(i + 1), cfg.channels_at(i), 3, rng);
            enc.emplace_back(cfg.channels_at(i + 1), cfg.channels_at(i + 1), 3, rng);
        }
        bottleneck = Conv3dLayer(cfg.channels_at(cfg.depth), cfg.channels_at(cfg.depth), 3, rng);
        time_proj = Conv3dLayer(cfg.channels_at(cfg.depth), cfg.time_embed_dim, 1, rng);
        for (int i = cfg.depth - 1; i >= 0; --i) {
            up.emplace_back(cfg.channels_at(i), cfg.channels_at(i + 1), 3, rng);
            dec.emplace_back(cfg.channels_at(i), 2 * cfg.channels_at(i), 3, rng);
        }
        head = Conv3dLayer(cfg.mask_channels, cfg.channels_at(0), 1, rng);
        for (int i = 0; i < cfg.depth; ++i)
            flm.emplace_back(cfg.flm_memberships, cfg.channels_at(i), rng);
    }
};

/// Image pyramid matching the encoder scales: one conv per scale, stride 2
/// between scales, so cond_encode yields depth+1 channel-matched maps.
struct CondEncoderParams {
    UNetConfig cfg;
    std::vector<Conv3dLayer> convs;

    CondEncoderParams() = default;
    CondEncoderParams(const UNetConfig& config, SeededRng& rng) : cfg(config) {
        convs.emplace_back(cfg.channels_at(0), cfg.image_channels, 3, rng);
        for (int i = 0; i < cfg.depth; ++i)
            convs.emplace_back(cfg.channels_at(i + 1), cfg.channels_at(i), 3, rng);
    }
};

inline std::vector<Tensor> cond_encode(const Tensor& image, CondEncoderParams& p) {
    if (image.ndim() != 4 || image.dim(0) != p.cfg.image_channels)
        throw ShapeMismatch("cond_encode: image " + shape_str(image.shape()));
    std::vector<Tensor> feats;
    Tensor x = relu(conv3d(image, p.convs[0].w, p.convs[0].b, 1, 1));
    feats.push_back(x);
    for (int i = 0; i < p.cfg.depth; ++i) {
        x = relu(conv3d(x, p.convs[static_cast<std::size_t>(i) + 1].w,
                        p.convs[static_cast<std::size_t>(i) + 1].b, 2, 1));
        feats.push_back(x);
    }
    return feats;
}

/// Full denoiser pass: encode concat(x_t, I), add per-scale condition
/// features, run FLM on the skip paths, decode with skip concatenation, and
/// emit mask logits.
inline Tensor denoise_forward(const Tensor& x_t, const Tensor& image, int t, UNetParams& unet,
                              CondEncoderParams& cond, BnMode mode) {
    const UNetConfig& cfg = unet.cfg;
    if (x_t.ndim() != 4 || x_t.dim(0) != cfg.mask_channels)
        throw ShapeMismatch("denoise_forward: x_t " + shape_str(x_t.shape()));
    if (image.ndim() != 4 || image.dim(0) != cfg.image_channels)
        throw ShapeMismatch("denoise_forward: image " + shape_str(image.shape()));
    for (int i = 1; i < 4; ++i) {
        if (x_t.dim(i) != image.dim(i))
            throw ShapeMismatch("denoise_forward: x_t and image spatial dims differ");
        if (x_t.dim(i) % (1 << cfg.depth) != 0)
            throw InvalidShape("denoise_forward: spatial dims must divide 2^depth");
    }

    std::vector<Tensor> cond_feats = cond_encode(image, cond);

    // encoder
    std::vector<Tensor> feats;
    Tensor x = relu(conv3d(concat_channels(x_t, image), unet.enc_in.w, unet.enc_in.b, 1, 1));
    x = add(x, cond_feats[0]);
    feats.push_back(x);
    for (int i = 0; i < cfg.depth; ++i) {
        x = relu(conv3d(x, unet.down[static_cast<std::size_t>(i)].w,
                        unet.down[static_cast<std::size_t>(i)].b, 2, 1));
        x = relu(conv3d(x, unet.enc[static_cast<std::size_t>(i)].w,
                        unet.enc[static_cast<std::size_t>(i)].b, 1, 1));
        x = add(x, cond_feats[static_cast<std::size_t>(i) + 1]);
        feats.push_back(x);
    }

    // timestep injection at the bottleneck, then the bottleneck conv
    Tensor emb = timestep_embedding(t, cfg.time_embed_dim);
    Tensor emb_col = Tensor::from_data({cfg.time_embed_dim, 1, 1, 1}, emb.values());
    Tensor tvec = conv3d(emb_col, unet.time_proj.w, unet.time_proj.b);
    x = add(feats.back(), tvec); // per-channel broadcast
    x = relu(conv3d(x, unet.bottleneck.w, unet.bottleneck.b, 1, 1));

    // decoder with (optionally fuzzy) skips
    for (int i = cfg.depth - 1; i >= 0; --i) {
        const std::size_t stage = static_cast<std::size_t>(cfg.depth - 1 - i);
        x = upsample_nearest3d(x, 2);
        x = relu(conv3d(x, unet.up[stage].w, unet.up[stage].b, 1, 1));
        Tensor skip = feats[static_cast<std::size_t>(i)];
        if (cfg.flm_enabled)
            skip = flm_forward(skip, unet.flm[static_cast<std::size_t>(i)], mode);
        x = concat_channels(skip, x);
        x = relu(conv3d(x, unet.dec[stage].w, unet.dec[stage].b, 1, 1));
    }
    return conv3d(x, unet.head.w, unet.head.b); // logits
}

// ---------------------------------------------------------------------------
// Parameter registry for optimization and checkpointing.
// ---------------------------------------------------------------------------

namespace detail {

inline void register_conv(ParamMap& m, const std::string& prefix, const Conv3dLayer& l) {
    m.add(prefix + ".w", l.w);
    m.add(prefix + ".b", l.b);
}

inline void register_bn(ParamMap& m, const std::string& prefix, const BatchNorm3d& bn) {
    m.add(prefix + ".gamma", bn.gamma);
    m.add(prefix + ".beta", bn.beta);
    m.add(prefix + ".running_mean", bn.running_mean);
    m.add(prefix + ".running_var", bn.running_var);
}

inline void register_flm(ParamMap& m, const std::string& prefix, const FlmParams& f) {
    m.add(prefix + ".mu", f.mu);
    m.add(prefix + ".sigma", f.sigma);
    register_bn(m, prefix + ".bn_fuzzy", f.bn_fuzzy);
    register_bn(m, prefix + ".bn_identity", f.bn_identity);
}

inline void register_mscam(ParamMap& m, const std::string& prefix, const MsCamParams& p) {
    register_conv(m, prefix + ".local.pw1", p.local_branch.pw1);
    register_bn(m, prefix + ".local.bn1", p.local_branch.bn1);
    register_conv(m, prefix + ".local.pw2", p.local_branch.pw2);
    register_bn(m, prefix + ".local.bn2", p.local_branch.bn2);
    register_conv(m, prefix + ".global.pw1", p.global_branch.pw1);
    register_bn(m, prefix + ".global.bn1", p.global_branch.bn1);
    register_conv(m, prefix + ".global.pw2", p.global_branch.pw2);
    register_bn(m, prefix + ".global.bn2", p.global_branch.bn2);
}

} // namespace detail

inline void register_unet(ParamMap& m, UNetParams& u, CondEncoderParams& c) {
    detail::register_conv(m, "unet.enc_in", u.enc_in);
    for (std::size_t i = 0; i < u.down.size(); ++i) {
        detail::register_conv(m, "unet.down" + std::to_string(i), u.down[i]);
        detail::register_conv(m, "unet.enc" + std::to_string(i), u.enc[i]);
    }
    detail::register_conv(m, "unet.bottleneck", u.bottleneck);
    detail::register_conv(m, "unet.time_proj", u.time_proj);
    for (std::size_t i = 0; i < u.up.size(); ++i) {
        detail::register_conv(m, "unet.up" + std::to_string(i), u.up[i]);
        detail::register_conv(m, "unet.dec" + std::to_string(i), u.dec[i]);
    }
    detail::register_conv(m, "unet.head", u.head);
    for (std::size_t i = 0; i < u.flm.size(); ++i)
        detail::register_flm(m, "unet.flm" + std::to_string(i), u.flm[i]);
    for (std::size_t i = 0; i < c.convs.size(); ++i)
        detail::register_conv(m, "cond.conv" + std::to_string(i), c.convs[i]);
}

inline void register_fusion(ParamMap& m, MsCamParams& stage1, MsCamParams& stage2) {
    detail::register_mscam(m, "fusion.stage1", stage1);
    detail::register_mscam(m, "fusion.stage2", stage2);
}

} // namespace fdiff
