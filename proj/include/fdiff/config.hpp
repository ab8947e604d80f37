#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "fdiff/errors.hpp"

namespace fdiff {

/// Run settings with the documented defaults (T=1000, 10 DDIM steps, M=5,
/// learning rate 1e-4, reduction 4). Unknown config keys are rejected.
struct RunConfig {
    // pipeline
    int T = 1000;
    int ddim_steps = 10;
    int M = 5;
    int iterations = 300;
    double learning_rate = 1e-4;
    int batch_size = 1;
    int r = 4;
    std::uint64_t seed = 42;
    std::string variant = "full"; // basic | flm | flm_af | full
    double eta = 0.0;
    std::string optimizer = "sgd"; // sgd | adamw (extension)
    double weight_decay = 1e-3;    // adamw only

    // phantom data
    int grid = 16;
    int classes = 2;
    int num_volumes = 50;
    int blobs_min = 1, blobs_max = 2;
    double radius_min = 3.0, radius_max = 6.0;
    double boundary_sigma = 1.0;
    double noise_level = 0.1;
    double train_ratio = 0.7, val_ratio = 0.1, test_ratio = 0.2;

    // model
    int depth = 2;
    int base_channels = 8;
    int time_embed_dim = 32;

    // augmentation / evaluation
    bool flip_augment = true;
    double flip_prob = 0.5;
    double threshold = 0.5;
    bool save_slices = false;

    // paths
    std::string data_dir = "data";
    std::string out_dir = "out";

    void validate() const {
        auto bad = [](const std::string& key) { return ConfigError("invalid value for " + key); };
        if (T < 1) throw bad("T");
        if (ddim_steps < 1 || ddim_steps > T) throw bad("ddim_steps");
        if (M < 1) throw bad("M");
        if (iterations < 0) throw bad("iterations");
        if (!(learning_rate > 0.0)) throw bad("learning_rate");
        if (batch_size < 1) throw bad("batch_size");
        if (r < 1) throw bad("r");
        if (variant != "basic" && variant != "flm" && variant != "flm_af" && variant != "full")
            throw bad("variant");
        if (eta < 0.0 || eta > 1.0) throw bad("eta");
        if (optimizer != "sgd" && optimizer != "adamw") throw bad("optimizer");
        if (weight_decay < 0.0) throw bad("weight_decay");
        if (depth < 1 || depth > 4) throw bad("depth");
        if (base_channels < 2) throw bad("base_channels");
        if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw bad("time_embed_dim");
        if (grid < (1 << depth) || grid % (1 << depth) != 0) throw bad("grid");
        if (classes < 1) throw bad("classes");
        if (num_volumes < 1) throw bad("num_volumes");
        if (blobs_min < 1 || blobs_max < blobs_min) throw bad("blobs_min/blobs_max");
        if (!(radius_min > 0.0) || radius_max < radius_min) throw bad("radius_min/radius_max");
        if (2.0 * radius_max > static_cast<double>(grid)) throw bad("radius_max");
        if (boundary_sigma < 0.0) throw bad("boundary_sigma");
        if (noise_level < 0.0) throw bad("noise_level");
        if (train_ratio < 0.0 || val_ratio < 0.0 || test_ratio < 0.0 ||
            std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9)
            throw bad("split ratios");
        if (flip_prob < 0.0 || flip_prob > 1.0) throw bad("flip_prob");
        if (!(threshold > 0.0) || !(threshold < 1.0)) throw bad("threshold");
    }
};

namespace detail {

template <typename T>
T config_get(const nlohmann::json& v, const std::string& key) {
    try {
        return v.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("wrong type for key " + key);
    }
}

} // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    RunConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "T") c.T = detail::config_get<int>(v, key);
        else if (key == "ddim_steps") c.ddim_steps = detail::config_get<int>(v, key);
        else if (key == "M") c.M = detail::config_get<int>(v, key);
        else if (key == "iterations") c.iterations = detail::config_get<int>(v, key);
        else if (key == "learning_rate") c.learning_rate = detail::config_get<double>(v, key);
        else if (key == "batch_size") c.batch_size = detail::config_get<int>(v, key);
        else if (key == "r") c.r = detail::config_get<int>(v, key);
        else if (key == "seed") c.seed = detail::config_get<std::uint64_t>(v, key);
        else if (key == "variant") c.variant = detail::config_get<std::string>(v, key);
        else if (key == "eta") c.eta = detail::config_get<double>(v, key);
        else if (key == "optimizer") c.optimizer = detail::config_get<std::string>(v, key);
        else if (key == "weight_decay") c.weight_decay = detail::config_get<double>(v, key);
        else if (key == "grid") c.grid = detail::config_get<int>(v, key);
        else if (key == "classes") c.classes = detail::config_get<int>(v, key);
        else if (key == "num_volumes") c.num_volumes = detail::config_get<int>(v, key);
        else if (key == "blobs_min") c.blobs_min = detail::config_get<int>(v, key);
        else if (key == "blobs_max") c.blobs_max = detail::config_get<int>(v, key);
        else if (key == "radius_min") c.radius_min = detail::config_get<double>(v, key);
        else if (key == "radius_max") c.radius_max = detail::config_get<double>(v, key);
        else if (key == "boundary_sigma") c.boundary_sigma = detail::config_get<double>(v, key);
        else if (key == "noise_level") c.noise_level = detail::config_get<double>(v, key);
        else if (key == "train_ratio") c.train_ratio = detail::config_get<double>(v, key);
        else if (key == "val_ratio") c.val_ratio = detail::config_get<double>(v, key);
        else if (key == "test_ratio") c.test_ratio = detail::config_get<double>(v, key);
        else if (key == "depth") c.depth = detail::config_get<int>(v, key);
        else if (key == "base_channels") c.base_channels = detail::config_get<int>(v, key);
        else if (key == "time_embed_dim") c.time_embed_dim = detail::config_get<int>(v, key);
        else if (key == "flip_augment") c.flip_augment = detail::config_get<bool>(v, key);
        else if (key == "flip_prob") c.flip_prob = detail::config_get<double>(v, key);
        else if (key == "threshold") c.threshold = detail::config_get<double>(v, key);
        else if (key == "save_slices") c.save_slices = detail::config_get<bool>(v, key);
        else if (key == "data_dir") c.data_dir = detail::config_get<std::string>(v, key);
        else if (key == "out_dir") c.out_dir = detail::config_get<std::string>(v, key);
        else throw ConfigError("unknown config key: " + key);
    }
    c.validate();
    return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error: " + std::string(e.what()));
    }
    return config_from_json(j);
}

} // namespace fdiff
