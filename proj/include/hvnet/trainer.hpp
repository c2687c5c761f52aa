#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hvnet/data.hpp"
#include "hvnet/losses.hpp"
#include "hvnet/network.hpp"

namespace hvnet {

struct RunConfig {
    ModelConfig model;
    std::string profile = "desk"; // "desk" or "paper"
    double lr = 1e-3;
    int batch_size = 4;
    int epochs = 60;
    int patience = 10;
    double lr_factor = 0.1;
    double min_lr = 1e-7;
    double eps = kDiceEps;
    std::uint64_t seed = 1;
    int image_size = 64;
    std::string data_dir = "data";
    std::string out_dir = "out";
    bool eval_both_configs = false;
};

// key=value lines, '#' comments, every key optional. The profile key picks
// the desk (base 8, 64 px, 60 epochs) or paper (base 32, 256 px, 500 epochs)
// defaults before the remaining keys apply, regardless of line order.
// Unknown or duplicate keys are rejected with their line number.
RunConfig parse_run_config_text(const std::string& text);
RunConfig parse_run_config(const std::string& path);

struct EpochRow {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double dice_kidney = 0.0;
    double dice_tumor = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<EpochRow> rows;
    std::string csv_path;
    std::string best_path;
    std::string last_path;
    int best_epoch = 0;
    double best_val_loss = 0.0;
};

// Full training loop: seeded shuffle per epoch, Adam steps per batch,
// validation loss + Dice after each epoch, plateau schedule on validation
// loss, best/last checkpoints, CSV metrics. resume_from continues from a
// checkpoint written by this function with bit-identical trajectory.
TrainResult train(const RunConfig& config, const std::string& resume_from = "");

struct EvalReport {
    int images = 0;
    // Dice from counts pooled over the whole split, and as the mean of
    // per-image scores.
    double pooled_kidney = 0.0;
    double pooled_tumor = 0.0;
    double mean_kidney = 0.0;
    double mean_tumor = 0.0;
};

EvalReport evaluate(Model& model, const Dataset& data, const std::string& split,
                    int batch_size);
EvalReport evaluate_checkpoint(const std::string& checkpoint_path, const std::string& data_dir,
                               const std::string& split);
std::string format_eval_report(const EvalReport& report, const std::string& split);

// Writes <stem>_mask.pgm (labels 0/1/2) and <stem>_overlay.ppm into out_dir.
// Returns the two paths.
std::pair<std::string, std::string> predict_to_files(const std::string& checkpoint_path,
                                                     const std::string& image_path,
                                                     const std::string& out_dir);

struct AblationReport {
    TrainResult with_attention;
    TrainResult without_attention;
    struct Entry {
        std::string label; // e.g. "with_attention best"
        EvalReport train;
        EvalReport val;
    };
    std::vector<Entry> entries;
};

// Trains both use_attention settings from one config (all else identical)
// and evaluates the best and last checkpoint of each on both splits.
AblationReport run_ablation(const RunConfig& config);
std::string format_ablation_report(const AblationReport& report);

} // namespace hvnet
