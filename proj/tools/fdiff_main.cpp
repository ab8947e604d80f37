#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "fdiff/engine.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::int64_t seed = -1;
    std::string out_dir;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "JSON run configuration")->required();
    cmd->add_option("--seed", opts.seed, "seed override");
    cmd->add_option("--out", opts.out_dir, "output directory override");
}

fdiff::RunConfig load(const CommonOpts& opts) {
    fdiff::RunConfig cfg = fdiff::load_config(opts.config_path);
    if (opts.seed >= 0) cfg.seed = static_cast<std::uint64_t>(opts.seed);
    if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
    return cfg;
}

int run(int argc, char** argv) {
    CLI::App app{"fdiff: fuzzy denoising-diffusion segmentation engine"};
    app.require_subcommand(1);

    CommonOpts gen_o, train_o, sample_o, eval_o, ablate_o, grad_o;
    std::string checkpoint, volume, split = "test";

    auto* gen = app.add_subcommand("gen-data", "generate a phantom dataset + manifest");
    add_common(gen, gen_o);

    auto* train = app.add_subcommand("train", "train on the manifest dataset");
    add_common(train, train_o);

    auto* sample = app.add_subcommand("sample", "run the reverse process on one volume");
    add_common(sample, sample_o);
    sample->add_option("--checkpoint", checkpoint, "FDFW checkpoint")->required();
    sample->add_option("--volume", volume, "FDFV input volume")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    add_common(eval, eval_o);
    eval->add_option("--checkpoint", checkpoint, "FDFW checkpoint")->required();
    eval->add_option("--split", split, "train|val|test (default test)");

    auto* ablate = app.add_subcommand("ablate", "train + evaluate all four variants");
    add_common(ablate, ablate_o);

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    add_common(gradcheck, grad_o);

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        fdiff::cmd_gen_data(load(gen_o));
        std::printf("dataset written to %s\n", load(gen_o).data_dir.c_str());
    } else if (train->parsed()) {
        fdiff::RunConfig cfg = load(train_o);
        fdiff::TrainResult r = fdiff::cmd_train(cfg);
        const double last = r.log.empty() ? 0.0 : r.log.back().loss;
        std::printf("trained %zu iterations, final loss %.6f; checkpoint in %s\n",
                    r.log.size(), last, cfg.out_dir.c_str());
    } else if (sample->parsed()) {
        fdiff::RunConfig cfg = load(sample_o);
        fdiff::cmd_sample(cfg, checkpoint, volume);
        std::printf("prediction written to %s\n", cfg.out_dir.c_str());
    } else if (eval->parsed()) {
        fdiff::RunConfig cfg = load(eval_o);
        fdiff::EvalResult r = fdiff::cmd_eval(cfg, checkpoint, split);
        std::fputs(fdiff::metric_table_text(r).c_str(), stdout);
    } else if (ablate->parsed()) {
        fdiff::RunConfig cfg = load(ablate_o);
        fdiff::AblateResult r = fdiff::cmd_ablate(cfg);
        std::fputs(fdiff::ablation_table_text(r, cfg.classes).c_str(), stdout);
    } else if (gradcheck->parsed()) {
        fdiff::GradcheckOutput r = fdiff::cmd_gradcheck(load(grad_o));
        for (const auto& e : r.report.entries)
            std::printf("%-32s max_rel_err %.3e  %s\n", e.name.c_str(), e.max_rel_err,
                        e.pass ? "PASS" : "FAIL");
        if (!r.pass) throw fdiff::NumericalFailure("gradient check failed");
        std::printf("all %zu parameter groups pass\n", r.report.entries.size());
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const fdiff::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const fdiff::InvalidConfig& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const fdiff::NumericalFailure& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 2;
    } catch (const fdiff::CorruptFile& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return 3;
    } catch (const fdiff::IoError& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return 3;
    } catch (const fdiff::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
