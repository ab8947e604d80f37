#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fdiff/attention.hpp"
#include "fdiff/checkpoint.hpp"
#include "fdiff/config.hpp"
#include "fdiff/denoiser.hpp"
#include "fdiff/diffusion.hpp"
#include "fdiff/fuzzy.hpp"
#include "fdiff/gradcheck.hpp"
#include "fdiff/losses.hpp"
#include "fdiff/metrics.hpp"
#include "fdiff/phantom.hpp"
#include "fdiff/volume_io.hpp"

namespace fdiff {

// Seed-stream salts. Purpose streams are derived from the run seed so the
// main data/training draws stay identical across variants; record and sample
// seeds derive from their stream by index.
namespace seed_stream {
constexpr std::uint64_t data = 1;
constexpr std::uint64_t manifest = 2;
constexpr std::uint64_t init = 3;
constexpr std::uint64_t train = 4;
constexpr std::uint64_t fusion = 5;
constexpr std::uint64_t sample = 6;
} // namespace seed_stream

enum class FuseVariant { none, af, iaf };

struct VariantFlags {
    bool flm = true;
    FuseVariant fuse = FuseVariant::iaf;
};

inline VariantFlags variant_flags(const std::string& variant) {
    if (variant == "basic") return {false, FuseVariant::none};
    if (variant == "flm") return {true, FuseVariant::none};
    if (variant == "flm_af") return {true, FuseVariant::af};
    if (variant == "full") return {true, FuseVariant::iaf};
    throw ConfigError("unknown variant " + variant);
}

/// Largest divisor of `channels` not exceeding the requested reduction, so
/// the fusion MS-CAM stays valid for small mask channel counts.
inline int effective_reduction(int channels, int requested) {
    for (int r = std::min(channels, requested); r >= 1; --r)
        if (channels % r == 0) return r;
    return 1;
}

struct ModelBundle {
    RunConfig cfg;
    NoiseSchedule sched;
    UNetParams unet;
    CondEncoderParams cond;
    MsCamParams fuse1, fuse2;
    ParamMap params; // every named tensor, including BN running stats

    std::vector<std::pair<std::string, Tensor>> learnable() {
        std::vector<std::pair<std::string, Tensor>> out;
        for (auto& [name, t] : params.items())
            if (t.requires_grad()) out.emplace_back(name, t);
        return out;
    }
};

inline ModelBundle build_model(const RunConfig& cfg) {
    cfg.validate();
    ModelBundle m;
    m.cfg = cfg;
    m.sched = build_linear_schedule(cfg.T, 0.0001, 0.02);

    UNetConfig ucfg;
    ucfg.depth = cfg.depth;
    ucfg.base_channels = cfg.base_channels;
    ucfg.mask_channels = cfg.classes;
    ucfg.image_channels = 1;
    ucfg.time_embed_dim = cfg.time_embed_dim;
    ucfg.flm_memberships = cfg.M;
    ucfg.flm_enabled = variant_flags(cfg.variant).flm;

    SeededRng init_rng(SeededRng::derive(cfg.seed, seed_stream::init));
    m.unet = UNetParams(ucfg, init_rng);
    m.cond = CondEncoderParams(ucfg, init_rng);
    const int fuse_r = effective_reduction(cfg.classes, cfg.r);
    m.fuse1 = MsCamParams(cfg.classes, fuse_r, init_rng);
    m.fuse2 = MsCamParams(cfg.classes, fuse_r, init_rng);
    register_unet(m.params, m.unet, m.cond);
    register_fusion(m.params, m.fuse1, m.fuse2);
    return m;
}

// ---------------------------------------------------------------------------
// Data generation and loading.
// ---------------------------------------------------------------------------

struct Dataset {
    std::vector<VolumeRecord> records;
    std::vector<std::size_t> train, val, test;
};

inline PhantomConfig phantom_config_of(const RunConfig& cfg) {
    PhantomConfig p;
    p.grid = cfg.grid;
    p.classes = cfg.classes;
    p.blobs_min = cfg.blobs_min;
    p.blobs_max = cfg.blobs_max;
    p.radius_min = cfg.radius_min;
    p.radius_max = cfg.radius_max;
    p.boundary_sigma = cfg.boundary_sigma;
    p.noise_level = cfg.noise_level;
    return p;
}

inline Dataset generate_dataset(const RunConfig& cfg) {
    cfg.validate();
    Dataset ds;
    const std::uint64_t data_seed = SeededRng::derive(cfg.seed, seed_stream::data);
    PhantomConfig pc = phantom_config_of(cfg);
    std::vector<std::string> names;
    for (int i = 0; i < cfg.num_volumes; ++i) {
        const std::uint64_t rec_seed = SeededRng::derive(data_seed, static_cast<std::uint64_t>(i));
        SeededRng rng(rec_seed);
        VolumeRecord rec = gen_phantom(pc, rng);
        char id[32];
        std::snprintf(id, sizeof id, "vol_%04d", i);
        rec.id = id;
        rec.seed = rec_seed;
        ds.records.push_back(std::move(rec));
        names.push_back(std::string(id) + ".fdfv");
    }
    DatasetManifest manifest =
        make_manifest(names, {cfg.train_ratio, cfg.val_ratio, cfg.test_ratio},
                      SeededRng::derive(cfg.seed, seed_stream::manifest));
    ds.train = manifest.indices_of("train");
    ds.val = manifest.indices_of("val");
    ds.test = manifest.indices_of("test");
    return ds;
}

/// Writes the phantom set and its manifest under cfg.data_dir.
inline void cmd_gen_data(const RunConfig& cfg) {
    Dataset ds = generate_dataset(cfg);
    const std::filesystem::path dir(cfg.data_dir);
    std::filesystem::create_directories(dir);
    std::vector<std::string> names;
    for (const auto& rec : ds.records) {
        write_volume(rec, dir / (rec.id + ".fdfv"));
        names.push_back(rec.id + ".fdfv");
    }
    DatasetManifest manifest =
        make_manifest(names, {cfg.train_ratio, cfg.val_ratio, cfg.test_ratio},
                      SeededRng::derive(cfg.seed, seed_stream::manifest));
    save_manifest(manifest, dir / "manifest.json");
}

inline Dataset load_dataset(const RunConfig& cfg) {
    const std::filesystem::path dir(cfg.data_dir);
    DatasetManifest manifest = load_manifest(dir / "manifest.json");
    Dataset ds;
    for (const auto& e : manifest.entries)
        ds.records.push_back(read_volume(dir / e.path));
    ds.train = manifest.indices_of("train");
    ds.val = manifest.indices_of("val");
    ds.test = manifest.indices_of("test");
    return ds;
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

struct TrainLogRow {
    int iteration = 0;
    double loss = 0.0, mse = 0.0, bce = 0.0, dice = 0.0;
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    bool aborted = false;
    std::string abort_reason;
};

namespace detail {

struct AdamWState {
    std::vector<std::vector<double>> m, v;
    int step = 0;
};

inline double cosine_lr(double base, int iter, int total) {
    if (total <= 0) return base;
    return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(iter) /
                                        static_cast<double>(total)));
}

} // namespace detail

/// Denoising-objective training loop: uniform timestep draw, q_sample
/// corruption, x0-prediction loss. Fusion variants add a fused-pair loss from
/// a second timestep drawn on a dedicated stream, which trains the fusion
/// gates jointly without disturbing the main draw sequence.
inline TrainResult train_model(ModelBundle& m, const Dataset& ds) {
    const RunConfig& cfg = m.cfg;
    const VariantFlags vf = variant_flags(cfg.variant);
    if (ds.train.empty()) throw InvalidSplit("train_model: empty train split");

    SeededRng train_rng(SeededRng::derive(cfg.seed, seed_stream::train));
    SeededRng fusion_rng(SeededRng::derive(cfg.seed, seed_stream::fusion));

    auto learnable = m.learnable();
    detail::AdamWState adam;
    if (cfg.optimizer == "adamw") {
        for (auto& [name, p] : learnable) {
            adam.m.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
            adam.v.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
        }
    }

    TrainResult result;
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const double lr = detail::cosine_lr(cfg.learning_rate, iter, cfg.iterations);
        for (auto& [name, p] : learnable) p.zero_grad();

        TrainLogRow row;
        row.iteration = iter;
        bool finite = true;
        for (int b = 0; b < cfg.batch_size && finite; ++b) {
            const std::size_t idx =
                ds.train[static_cast<std::size_t>(train_rng.uniform_int(ds.train.size()))];
            VolumeRecord rec = ds.records[idx];
            if (cfg.flip_augment)
                rec = augment_flip(rec, {0, 1, 2}, train_rng, cfg.flip_prob);

            const int t = 1 + static_cast<int>(train_rng.uniform_int(
                                  static_cast<std::uint64_t>(cfg.T)));
            Tensor eps = Tensor::gaussian(rec.label.shape(), train_rng);
            Tensor x_t = q_sample(rec.label, t, eps, m.sched);
            Tensor logits = denoise_forward(x_t, rec.image, t, m.unet, m.cond, BnMode::train);
            LossBreakdown lb = total_loss(logits, rec.label);
            Tensor total = lb.total;

            if (vf.fuse != FuseVariant::none) {
                const int t2 = 1 + static_cast<int>(fusion_rng.uniform_int(
                                       static_cast<std::uint64_t>(cfg.T)));
                Tensor eps2 = Tensor::gaussian(rec.label.shape(), fusion_rng);
                Tensor x_t2 = q_sample(rec.label, t2, eps2, m.sched);
                Tensor logits2 =
                    denoise_forward(x_t2, rec.image, t2, m.unet, m.cond, BnMode::train);
                // noisier prediction first, matching the sampling fold order
                Tensor p_hi = sigmoid(t >= t2 ? logits : logits2);
                Tensor p_lo = sigmoid(t >= t2 ? logits2 : logits);
                Tensor fused = vf.fuse == FuseVariant::iaf
                                   ? iaf(p_hi, p_lo, m.fuse1, m.fuse2, BnMode::train)
                                   : af(p_hi, p_lo, m.fuse1, BnMode::train);
                total = add(total, total_loss_probs(fused, rec.label).total);
            }

            const double scale_b = 1.0 / static_cast<double>(cfg.batch_size);
            total = scale(total, scale_b);
            const double tv = total.item();
            if (!std::isfinite(tv)) {
                finite = false;
                break;
            }
            backprop(total);
            row.loss += tv;
            row.mse += lb.mse * scale_b;
            row.bce += lb.bce * scale_b;
            row.dice += lb.dice * scale_b;
        }

        if (!finite) {
            // the bad update is never applied; current parameters are the
            // last good state
            result.aborted = true;
            result.abort_reason = "non-finite loss at iteration " + std::to_string(iter);
            return result;
        }

        if (cfg.optimizer == "adamw") {
            ++adam.step;
            constexpr double b1 = 0.9, b2 = 0.999, eps_ = 1e-8;
            const double bc1 = 1.0 - std::pow(b1, adam.step);
            const double bc2 = 1.0 - std::pow(b2, adam.step);
            for (std::size_t pi = 0; pi < learnable.size(); ++pi) {
                Tensor& p = learnable[pi].second;
                const auto& g = p.grad();
                for (std::int64_t i = 0; i < p.numel(); ++i) {
                    auto& mm = adam.m[pi][static_cast<std::size_t>(i)];
                    auto& vv = adam.v[pi][static_cast<std::size_t>(i)];
                    mm = b1 * mm + (1.0 - b1) * g[static_cast<std::size_t>(i)];
                    vv = b2 * vv + (1.0 - b2) * g[static_cast<std::size_t>(i)] *
                                       g[static_cast<std::size_t>(i)];
                    p.data()[i] -= lr * (mm / bc1 / (std::sqrt(vv / bc2) + eps_) +
                                         cfg.weight_decay * p.data()[i]);
                }
            }
        } else {
            for (auto& [name, p] : learnable) {
                const auto& g = p.grad();
                for (std::int64_t i = 0; i < p.numel(); ++i)
                    p.data()[i] -= lr * g[static_cast<std::size_t>(i)];
            }
        }
        for (auto& f : m.unet.flm) f.clamp_sigma();
        result.log.push_back(row);
    }
    return result;
}

inline void write_train_log(const std::vector<TrainLogRow>& log,
                            const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << "iteration,loss,mse,bce,dice\n";
    char buf[256];
    for (const auto& r : log) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", r.iteration, r.loss,
                      r.mse, r.bce, r.dice);
        os << buf;
    }
}

/// Full training command: loads the manifest dataset, trains, writes the
/// checkpoint and CSV loss log. A divergence aborts with NumericalFailure
/// after writing the last good checkpoint.
inline TrainResult cmd_train(const RunConfig& cfg) {
    cfg.validate();
    Dataset ds = load_dataset(cfg);
    ModelBundle m = build_model(cfg);
    TrainResult result = train_model(m, ds);
    std::filesystem::create_directories(cfg.out_dir);
    save_fdfw(m.params, std::filesystem::path(cfg.out_dir) / "checkpoint.fdfw");
    write_train_log(result.log, std::filesystem::path(cfg.out_dir) / "train_log.csv");
    if (result.aborted) throw NumericalFailure("training diverged: " + result.abort_reason);
    return result;
}

// ---------------------------------------------------------------------------
// Sampling and evaluation.
// ---------------------------------------------------------------------------

struct SampleResult {
    Tensor fused;              // probability map [C,D,H,W]
    Tensor mask;               // thresholded binary map
    std::vector<Tensor> per_step;
};

inline Tensor threshold_mask(const Tensor& probs, double thr) {
    Tensor out = Tensor::zeros(probs.shape());
    for (std::int64_t i = 0; i < probs.numel(); ++i)
        out.data()[i] = probs.data()[i] > thr ? 1.0 : 0.0;
    return out;
}

/// Reverse process for one conditioning image: x_T ~ N(0,1), DDIM plan over
/// cfg.ddim_steps, per-step x0 predictions collected and fused according to
/// the variant.
inline SampleResult sample_volume(ModelBundle& m, const Tensor& image,
                                  std::uint64_t sample_seed) {
    NoGradScope ng;
    const RunConfig& cfg = m.cfg;
    const VariantFlags vf = variant_flags(cfg.variant);
    if (image.ndim() != 4)
        throw ShapeMismatch("sample_volume: image must be [C,D,H,W]");

    SeededRng rng(sample_seed);
    Tensor x = Tensor::gaussian({cfg.classes, image.dim(1), image.dim(2), image.dim(3)}, rng);
    SamplerPlan plan = ddim_plan(cfg.T, cfg.ddim_steps);

    SampleResult res;
    for (std::size_t i = 0; i < plan.timesteps.size(); ++i) {
        const int t = plan.timesteps[i];
        const int t_prev = i + 1 < plan.timesteps.size() ? plan.timesteps[i + 1] : 0;
        Tensor logits = denoise_forward(x, image, t, m.unet, m.cond, BnMode::eval);
        Tensor probs = sigmoid(logits);
        res.per_step.push_back(probs);
        Tensor x0_hat = clamp(probs, 0.0, 1.0); // keeps the trajectory bounded
        x = ddim_step(x, t, t_prev, x0_hat, m.sched, cfg.eta, &rng);
    }

    switch (vf.fuse) {
        case FuseVariant::none: res.fused = res.per_step.back(); break;
        case FuseVariant::af:
            res.fused = fuse_trajectory(res.per_step, m.fuse1, m.fuse2, BnMode::eval,
                                        FuseKind::af);
            break;
        case FuseVariant::iaf:
            res.fused = fuse_trajectory(res.per_step, m.fuse1, m.fuse2, BnMode::eval,
                                        FuseKind::iaf);
            break;
    }
    res.mask = threshold_mask(res.fused, cfg.threshold);
    return res;
}

/// CLI sampling entry: loads checkpoint and volume, runs the reverse process,
/// writes fused probabilities + mask as FDFV and optional PGM slices.
inline SampleResult cmd_sample(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                               const std::filesystem::path& volume_path) {
    cfg.validate();
    ModelBundle m = build_model(cfg);
    load_fdfw(m.params, checkpoint);
    VolumeRecord rec = read_volume(volume_path);
    SampleResult res =
        sample_volume(m, rec.image, SeededRng::derive(cfg.seed, seed_stream::sample));

    std::filesystem::create_directories(cfg.out_dir);
    VolumeRecord out;
    out.image = res.fused;
    out.label = res.mask;
    out.id = rec.id + "_pred";
    write_volume(out, std::filesystem::path(cfg.out_dir) / (out.id + ".fdfv"));
    if (cfg.save_slices) {
        const std::int64_t sp = static_cast<std::int64_t>(res.fused.dim(1)) *
                                res.fused.dim(2) * res.fused.dim(3);
        for (int c = 0; c < res.fused.dim(0); ++c) {
            Tensor chan = Tensor::from_data(
                {1, res.fused.dim(1), res.fused.dim(2), res.fused.dim(3)},
                std::vector<double>(res.fused.data() + c * sp, res.fused.data() + (c + 1) * sp));
            write_slices_pgm(chan, std::filesystem::path(cfg.out_dir) / "slices",
                             rec.id + "_c" + std::to_string(c));
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

struct EvalResult {
    std::vector<std::string> ids;
    std::vector<MetricReport> volumes;
    MetricReport average;          // per-class rows averaged across volumes
    int hd95_undefined_total = 0;
};

inline EvalResult evaluate_model(ModelBundle& m, const Dataset& ds,
                                 const std::vector<std::size_t>& split_indices) {
    if (split_indices.empty()) throw InvalidSplit("evaluate_model: empty split");
    const RunConfig& cfg = m.cfg;
    const std::uint64_t sample_stream = SeededRng::derive(cfg.seed, seed_stream::sample);

    EvalResult out;
    const int C = cfg.classes;
    std::vector<ClassMetrics> acc(static_cast<std::size_t>(C));
    std::vector<double> hd_sum(static_cast<std::size_t>(C), 0.0);
    std::vector<int> hd_n(static_cast<std::size_t>(C), 0);

    for (std::size_t si = 0; si < split_indices.size(); ++si) {
        const VolumeRecord& rec = ds.records[split_indices[si]];
        SampleResult sr = sample_volume(
            m, rec.image, SeededRng::derive(sample_stream, split_indices[si]));
        MetricReport rep = evaluate_masks(sr.mask, rec.label);
        out.hd95_undefined_total += rep.hd95_undefined_count;
        for (int c = 0; c < C; ++c) {
            const auto& cm = rep.per_class[static_cast<std::size_t>(c)];
            acc[static_cast<std::size_t>(c)].dsc += cm.dsc;
            acc[static_cast<std::size_t>(c)].jaccard += cm.jaccard;
            acc[static_cast<std::size_t>(c)].recall += cm.recall;
            if (cm.hd95) {
                hd_sum[static_cast<std::size_t>(c)] += *cm.hd95;
                ++hd_n[static_cast<std::size_t>(c)];
            }
        }
        out.ids.push_back(rec.id);
        out.volumes.push_back(std::move(rep));
    }

    const double nv = static_cast<double>(split_indices.size());
    for (int c = 0; c < C; ++c) {
        auto& a = acc[static_cast<std::size_t>(c)];
        a.dsc /= nv;
        a.jaccard /= nv;
        a.recall /= nv;
        if (hd_n[static_cast<std::size_t>(c)] > 0)
            a.hd95 = hd_sum[static_cast<std::size_t>(c)] /
                     static_cast<double>(hd_n[static_cast<std::size_t>(c)]);
    }
    out.average = MetricReport::from_classes(std::move(acc));
    out.average.hd95_undefined_count = out.hd95_undefined_total;
    return out;
}

inline nlohmann::json metric_report_json(const MetricReport& r) {
    nlohmann::json j;
    j["dsc"] = r.dsc;
    j["hd95"] = r.hd95 ? nlohmann::json(*r.hd95) : nlohmann::json(nullptr);
    j["jaccard"] = r.jaccard;
    j["recall"] = r.recall;
    j["hd95_undefined_count"] = r.hd95_undefined_count;
    j["per_class"] = nlohmann::json::array();
    for (const auto& c : r.per_class) {
        nlohmann::json cj;
        cj["dsc"] = c.dsc;
        cj["hd95"] = c.hd95 ? nlohmann::json(*c.hd95) : nlohmann::json(nullptr);
        cj["jaccard"] = c.jaccard;
        cj["recall"] = c.recall;
        j["per_class"].push_back(cj);
    }
    return j;
}

inline std::string metric_table_text(const EvalResult& r) {
    std::string s;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-12s %8s %8s %8s %8s\n", "volume", "DSC", "HD95", "Jacc",
                  "Recall");
    s += buf;
    auto hd_str = [](const std::optional<double>& h) {
        char b[32];
        if (h) std::snprintf(b, sizeof b, "%8.3f", *h);
        else std::snprintf(b, sizeof b, "%8s", "undef");
        return std::string(b);
    };
    for (std::size_t i = 0; i < r.volumes.size(); ++i) {
        const auto& m = r.volumes[i];
        std::snprintf(buf, sizeof buf, "%-12s %8.4f %s %8.4f %8.4f\n", r.ids[i].c_str(), m.dsc,
                      hd_str(m.hd95).c_str(), m.jaccard, m.recall);
        s += buf;
    }
    const auto& a = r.average;
    std::snprintf(buf, sizeof buf, "%-12s %8.4f %s %8.4f %8.4f\n", "average", a.dsc,
                  hd_str(a.hd95).c_str(), a.jaccard, a.recall);
    s += buf;
    return s;
}

/// Evaluates a checkpoint on one split of the manifest dataset; writes
/// metrics.json and an aligned text table.
inline EvalResult cmd_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                           const std::string& split = "test") {
    cfg.validate();
    Dataset ds = load_dataset(cfg);
    ModelBundle m = build_model(cfg);
    load_fdfw(m.params, checkpoint);
    const auto& indices = split == "train" ? ds.train : split == "val" ? ds.val : ds.test;
    EvalResult res = evaluate_model(m, ds, indices);

    std::filesystem::create_directories(cfg.out_dir);
    nlohmann::json j;
    j["split"] = split;
    j["volumes"] = nlohmann::json::array();
    for (std::size_t i = 0; i < res.volumes.size(); ++i) {
        nlohmann::json vj = metric_report_json(res.volumes[i]);
        vj["id"] = res.ids[i];
        j["volumes"].push_back(vj);
    }
    j["average"] = metric_report_json(res.average);
    std::ofstream os(std::filesystem::path(cfg.out_dir) / "metrics.json");
    os << j.dump(2) << "\n";
    std::ofstream ts(std::filesystem::path(cfg.out_dir) / "metrics_table.txt");
    ts << metric_table_text(res);
    return res;
}

// ---------------------------------------------------------------------------
// Ablation.
// ---------------------------------------------------------------------------

struct AblateRow {
    std::string variant;
    EvalResult eval;
};

struct AblateResult {
    std::vector<AblateRow> rows;
};

inline std::string ablation_table_text(const AblateResult& r, int classes) {
    std::string s;
    char buf[512];
    std::string head = "variant       ";
    for (int c = 0; c < classes; ++c) head += " DSC:c" + std::to_string(c) + "  ";
    head += " DSC:avg ";
    for (int c = 0; c < classes; ++c) head += " HD95:c" + std::to_string(c) + " ";
    head += " HD95:avg\n";
    s += head;
    auto hd_str = [](const std::optional<double>& h) {
        char b[32];
        if (h) std::snprintf(b, sizeof b, "%8.3f", *h);
        else std::snprintf(b, sizeof b, "%8s", "undef");
        return std::string(b);
    };
    for (const auto& row : r.rows) {
        std::snprintf(buf, sizeof buf, "%-14s", row.variant.c_str());
        s += buf;
        const auto& a = row.eval.average;
        for (const auto& c : a.per_class) {
            std::snprintf(buf, sizeof buf, "%8.4f ", c.dsc);
            s += buf;
        }
        std::snprintf(buf, sizeof buf, "%8.4f ", a.dsc);
        s += buf;
        for (const auto& c : a.per_class) s += hd_str(c.hd95) + " ";
        s += hd_str(a.hd95) + "\n";
    }
    return s;
}

/// Trains and evaluates the four module combinations with shared seeds, so
/// row differences come from the toggled modules alone.
inline AblateResult cmd_ablate(const RunConfig& cfg) {
    cfg.validate();
    AblateResult result;
    for (const std::string variant : {"basic", "flm", "flm_af", "full"}) {
        RunConfig vcfg = cfg;
        vcfg.variant = variant;
        vcfg.out_dir = (std::filesystem::path(cfg.out_dir) / variant).string();
        cmd_train(vcfg);
        EvalResult ev =
            cmd_eval(vcfg, std::filesystem::path(vcfg.out_dir) / "checkpoint.fdfw", "test");
        result.rows.push_back({variant, std::move(ev)});
    }

    nlohmann::json j = nlohmann::json::array();
    for (const auto& row : result.rows) {
        nlohmann::json rj;
        rj["variant"] = row.variant;
        rj["average"] = metric_report_json(row.eval.average);
        j.push_back(rj);
    }
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream os(std::filesystem::path(cfg.out_dir) / "ablation.json");
    os << j.dump(2) << "\n";
    std::ofstream ts(std::filesystem::path(cfg.out_dir) / "ablation_table.txt");
    ts << ablation_table_text(result, cfg.classes);
    return result;
}

// ---------------------------------------------------------------------------
// Gradient-check command.
// ---------------------------------------------------------------------------

struct GradcheckOutput {
    GradCheckReport report;
    bool pass = true;
};

/// Finite-difference verification across the learnable modules: FLM, MS-CAM,
/// AF, IAF, the combined loss, and a sampled slice of the full denoiser.
inline GradcheckOutput cmd_gradcheck(const RunConfig& cfg) {
    cfg.validate();
    GradcheckOutput out;
    auto merge = [&](const std::string& prefix, const GradCheckReport& r) {
        for (const auto& e : r.entries) {
            out.report.entries.push_back({prefix + "." + e.name, e.max_rel_err, e.pass});
            out.report.max_rel_err = std::max(out.report.max_rel_err, e.max_rel_err);
        }
        out.report.pass = out.report.pass && r.pass;
    };

    SeededRng rng(SeededRng::derive(cfg.seed, seed_stream::init));

    {
        FlmParams flm(cfg.M, 2, rng);
        Tensor f = Tensor::gaussian({2, 2, 2, 2}, rng);
        auto loss = [&]() { return sum(sigmoid(flm_forward(f, flm, BnMode::train))); };
        merge("flm", grad_check_params(loss,
                                       {{"mu", flm.mu},
                                        {"sigma", flm.sigma},
                                        {"bn_fuzzy.gamma", flm.bn_fuzzy.gamma},
                                        {"bn_fuzzy.beta", flm.bn_fuzzy.beta},
                                        {"bn_identity.gamma", flm.bn_identity.gamma},
                                        {"bn_identity.beta", flm.bn_identity.beta},
                                        {"input", f}},
                                       1e-5, 1e-4));
    }
    {
        MsCamParams cam(4, 2, rng);
        Tensor x = Tensor::gaussian({4, 2, 2, 2}, rng);
        auto loss = [&]() { return sum(mscam_weights(x, cam, BnMode::train)); };
        merge("mscam", grad_check_params(loss,
                                         {{"local.pw1.w", cam.local_branch.pw1.w},
                                          {"local.pw1.b", cam.local_branch.pw1.b},
                                          {"local.pw2.w", cam.local_branch.pw2.w},
                                          {"local.bn1.gamma", cam.local_branch.bn1.gamma},
                                          {"local.bn2.beta", cam.local_branch.bn2.beta},
                                          {"global.pw1.w", cam.global_branch.pw1.w},
                                          {"global.pw2.w", cam.global_branch.pw2.w},
                                          {"global.bn1.gamma", cam.global_branch.bn1.gamma},
                                          {"global.bn2.beta", cam.global_branch.bn2.beta},
                                          {"input", x}},
                                         1e-5, 1e-4));
    }
    {
        MsCamParams s1(2, 2, rng), s2(2, 2, rng);
        Tensor x = Tensor::gaussian({2, 2, 2, 2}, rng);
        Tensor y = Tensor::gaussian({2, 2, 2, 2}, rng);
        std::vector<std::pair<std::string, Tensor>> ps = {
            {"x", x},
            {"y", y},
            {"s1.local.pw1.w", s1.local_branch.pw1.w},
            {"s1.local.pw2.w", s1.local_branch.pw2.w},
            {"s1.global.pw1.w", s1.global_branch.pw1.w},
            {"s1.local.bn2.gamma", s1.local_branch.bn2.gamma}};
        auto loss_af = [&]() { return sum(af(x, y, s1, BnMode::train)); };
        merge("af", grad_check_params(loss_af, ps, 1e-5, 1e-4));
        ps.push_back({"s2.local.pw1.w", s2.local_branch.pw1.w});
        ps.push_back({"s2.global.pw2.w", s2.global_branch.pw2.w});
        auto loss_iaf = [&]() { return sum(iaf(x, y, s1, s2, BnMode::train)); };
        merge("iaf", grad_check_params(loss_iaf, ps, 1e-5, 1e-4));
    }
    {
        Tensor labels = Tensor::zeros({2, 3, 3});
        for (std::int64_t i = 0; i < labels.numel(); ++i)
            labels.data()[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
        Tensor logits = Tensor::gaussian({2, 3, 3}, rng);
        auto loss = [&]() { return total_loss(logits, labels).total; };
        merge("total_loss", grad_check_params(loss, {{"logits", logits}}, 1e-5, 1e-4));
    }
    {
        UNetConfig ucfg;
        ucfg.base_channels = 4;
        ucfg.time_embed_dim = 8;
        ucfg.flm_memberships = 3;
        ucfg.mask_channels = 2;
        UNetParams unet(ucfg, rng);
        CondEncoderParams cond(ucfg, rng);
        Tensor x_t = Tensor::gaussian({2, 8, 8, 8}, rng);
        Tensor image = Tensor::gaussian({1, 8, 8, 8}, rng);
        Tensor labels = Tensor::zeros({2, 8, 8, 8});
        for (std::int64_t i = 0; i < labels.numel(); ++i)
            labels.data()[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
        auto loss = [&]() {
            return total_loss(denoise_forward(x_t, image, 25, unet, cond, BnMode::train), labels)
                .total;
        };
        merge("denoiser",
              grad_check_params(loss,
                                {{"enc_in.w", unet.enc_in.w},
                                 {"bottleneck.w", unet.bottleneck.w},
                                 {"time_proj.w", unet.time_proj.w},
                                 {"dec0.w", unet.dec[0].w},
                                 {"head.w", unet.head.w},
                                 {"flm0.mu", unet.flm[0].mu},
                                 {"flm0.sigma", unet.flm[0].sigma},
                                 {"cond.conv0.w", cond.convs[0].w}},
                                1e-4, 1e-3, 4, 7));
    }
    out.pass = out.report.pass;
    return out;
}

} // namespace fdiff
