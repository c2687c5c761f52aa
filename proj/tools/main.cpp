// Command-line front end: dataset generation, training, evaluation,
// prediction, and the gradient-check suite.
//
// Exit codes: 0 on success, 2 on runtime failure, 64 on usage errors.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hvnet/data.hpp"
#include "hvnet/gradcheck.hpp"
#include "hvnet/trainer.hpp"

namespace {

constexpr int kExitFailure = 2;
constexpr int kExitUsage = 64;

int cmd_gen_data(const std::string& out_dir, int count, int size, std::uint64_t seed) {
    hvnet::PhantomSpec spec;
    spec.size = size;
    spec.master_seed = seed;
    hvnet::write_dataset(out_dir, spec, count);
    std::printf("wrote %d samples (%dx%d) to %s\n", count, size, size, out_dir.c_str());
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& resume_from) {
    hvnet::RunConfig config = hvnet::parse_run_config(config_path);
    if (config.eval_both_configs) {
        hvnet::AblationReport report = hvnet::run_ablation(config);
        std::fputs(hvnet::format_ablation_report(report).c_str(), stdout);
        return 0;
    }
    hvnet::TrainResult result = hvnet::train(config, resume_from);
    std::printf("trained %zu epochs, best val loss %.6f at epoch %d\n", result.rows.size(),
                result.best_val_loss, result.best_epoch);
    std::printf("metrics: %s\n", result.csv_path.c_str());
    std::printf("checkpoints: %s, %s\n", result.best_path.c_str(), result.last_path.c_str());
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir,
             const std::string& split) {
    hvnet::EvalReport report = hvnet::evaluate_checkpoint(checkpoint, data_dir, split);
    std::fputs(hvnet::format_eval_report(report, split).c_str(), stdout);
    return 0;
}

int cmd_predict(const std::string& checkpoint, const std::string& image,
                const std::string& out_dir) {
    auto [mask_path, overlay_path] = hvnet::predict_to_files(checkpoint, image, out_dir);
    std::printf("mask:    %s\noverlay: %s\n", mask_path.c_str(), overlay_path.c_str());
    return 0;
}

int cmd_gradcheck(const std::string& op) {
    const std::vector<hvnet::GradCheckCase> cases = hvnet::gradcheck_suite();
    std::vector<const hvnet::GradCheckCase*> selected;
    for (const auto& test : cases) {
        if (op.empty() || test.name == op) {
            selected.push_back(&test);
        }
    }
    if (selected.empty()) {
        std::fprintf(stderr, "unknown op \"%s\"; available:\n", op.c_str());
        for (const auto& test : cases) {
            std::fprintf(stderr, "  %s\n", test.name.c_str());
        }
        return kExitUsage;
    }
    bool all_ok = true;
    for (const auto* test : selected) {
        const double max_rel_error = test->run();
        const bool ok = max_rel_error < test->tolerance;
        all_ok = all_ok && ok;
        std::printf("%-16s %s  max rel err %.3e (tolerance %.0e)\n", test->name.c_str(),
                    ok ? "ok  " : "FAIL", max_rel_error, test->tolerance);
    }
    return all_ok ? 0 : kExitFailure;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Kidney/tumor segmentation trainer"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic phantom dataset");
    std::string gen_out;
    int gen_count = 250;
    int gen_size = 64;
    std::uint64_t gen_seed = 1;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--count", gen_count, "Number of samples");
    gen->add_option("--size", gen_size, "Image edge length in pixels");
    gen->add_option("--seed", gen_seed, "Master seed");

    auto* train = app.add_subcommand("train", "Train from a config file");
    std::string train_config;
    std::string train_resume;
    train->add_option("--config", train_config, "Config file (key = value lines)")->required();
    train->add_option("--resume", train_resume, "Checkpoint to resume from");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
    std::string eval_checkpoint;
    std::string eval_data;
    std::string eval_split = "val";
    eval->add_option("--checkpoint", eval_checkpoint, "Checkpoint file")->required();
    eval->add_option("--data", eval_data, "Dataset directory")->required();
    eval->add_option("--split", eval_split, "Split to evaluate")
        ->check(CLI::IsMember({"train", "val"}));

    auto* predict = app.add_subcommand("predict", "Segment a single image");
    std::string predict_checkpoint;
    std::string predict_image;
    std::string predict_out;
    predict->add_option("--checkpoint", predict_checkpoint, "Checkpoint file")->required();
    predict->add_option("--image", predict_image, "Input PGM image")->required();
    predict->add_option("--out", predict_out, "Output directory")->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "Run finite-difference gradient checks");
    std::string gradcheck_op;
    gradcheck->add_option("--op", gradcheck_op, "Check a single op by name");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (gen->parsed()) {
            return cmd_gen_data(gen_out, gen_count, gen_size, gen_seed);
        }
        if (train->parsed()) {
            return cmd_train(train_config, train_resume);
        }
        if (eval->parsed()) {
            return cmd_eval(eval_checkpoint, eval_data, eval_split);
        }
        if (predict->parsed()) {
            return cmd_predict(predict_checkpoint, predict_image, predict_out);
        }
        if (gradcheck->parsed()) {
            return cmd_gradcheck(gradcheck_op);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitFailure;
    }
    return kExitUsage;
}
