#include "hvnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include "hvnet/checkpoint.hpp"
#include "hvnet/optimizer.hpp"
#include "hvnet/rng.hpp"
#include "hvnet/tape.hpp"

namespace hvnet {

namespace {

[[noreturn]] void config_error(int line, const std::string& msg) {
    throw std::invalid_argument("config line " + std::to_string(line) + ": " + msg);
}

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) {
        return "";
    }
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

int parse_int(const std::string& value, int line) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(value, &used);
        if (used != value.size()) {
            throw std::invalid_argument(value);
        }
        return v;
    } catch (const std::exception&) {
        config_error(line, "\"" + value + "\" is not an integer");
    }
}

double parse_double(const std::string& value, int line) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) {
            throw std::invalid_argument(value);
        }
        return v;
    } catch (const std::exception&) {
        config_error(line, "\"" + value + "\" is not a number");
    }
}

std::uint64_t parse_u64(const std::string& value, int line) {
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(value, &used);
        if (used != value.size()) {
            throw std::invalid_argument(value);
        }
        return v;
    } catch (const std::exception&) {
        config_error(line, "\"" + value + "\" is not an unsigned integer");
    }
}

bool parse_bool(const std::string& value, int line) {
    if (value == "true" || value == "1") {
        return true;
    }
    if (value == "false" || value == "0") {
        return false;
    }
    config_error(line, "\"" + value + "\" is not a boolean (true/false/1/0)");
}

struct ConfigLine {
    int number = 0;
    std::string key;
    std::string value;
};

} // namespace

RunConfig parse_run_config_text(const std::string& text) {
    std::vector<ConfigLine> lines;
    {
        std::istringstream stream(text);
        std::string raw;
        int number = 0;
        while (std::getline(stream, raw)) {
            ++number;
            const auto hash = raw.find('#');
            if (hash != std::string::npos) {
                raw.resize(hash);
            }
            const std::string entry = trim(raw);
            if (entry.empty()) {
                continue;
            }
            const auto eq = entry.find('=');
            if (eq == std::string::npos) {
                config_error(number, "expected key=value, got \"" + entry + "\"");
            }
            ConfigLine line;
            line.number = number;
            line.key = trim(entry.substr(0, eq));
            line.value = trim(entry.substr(eq + 1));
            if (line.key.empty()) {
                config_error(number, "empty key");
            }
            lines.push_back(std::move(line));
        }
    }

    RunConfig config;

    // The profile picks a coherent default set before any explicit key
    // applies, regardless of where the profile line sits in the file.
    std::string profile = "desk";
    bool profile_seen = false;
    for (const ConfigLine& line : lines) {
        if (line.key == "profile") {
            if (profile_seen) {
                config_error(line.number, "duplicate key \"profile\"");
            }
            profile_seen = true;
            profile = line.value;
            if (profile != "desk" && profile != "paper") {
                config_error(line.number,
                             "profile must be \"desk\" or \"paper\", got \"" + profile + "\"");
            }
        }
    }
    config.profile = profile;
    if (profile == "desk") {
        config.model.base_channels = 8;
        config.image_size = 64;
        config.epochs = 60;
    } else {
        config.model.base_channels = 32;
        config.image_size = 256;
        config.epochs = 500;
    }

    std::map<std::string, std::function<void(const std::string&, int)>> setters;
    auto set_int = [&](const char* key, int& field) {
        setters.emplace(key, [&field](const std::string& v, int line) {
            field = parse_int(v, line);
        });
    };
    auto set_double = [&](const char* key, double& field) {
        setters.emplace(key, [&field](const std::string& v, int line) {
            field = parse_double(v, line);
        });
    };
    auto set_bool = [&](const char* key, bool& field) {
        setters.emplace(key, [&field](const std::string& v, int line) {
            field = parse_bool(v, line);
        });
    };
    auto set_u64 = [&](const char* key, std::uint64_t& field) {
        setters.emplace(key, [&field](const std::string& v, int line) {
            field = parse_u64(v, line);
        });
    };
    auto set_string = [&](const char* key, std::string& field) {
        setters.emplace(key, [&field](const std::string& v, int line) {
            if (v.empty()) {
                config_error(line, "empty value");
            }
            field = v;
        });
    };

    set_int("in_channels", config.model.in_channels);
    set_int("num_classes", config.model.num_classes);
    set_int("base_channels", config.model.base_channels);
    set_int("depth", config.model.depth);
    set_double("dropout_rate", config.model.dropout_rate);
    set_bool("use_attention", config.model.use_attention);
    set_int("attention_reduction", config.model.attention_reduction);
    set_int("spatial_attention_kernel", config.model.spatial_attention_kernel);
    set_double("elu_alpha", config.model.elu_alpha);
    set_u64("init_seed", config.model.init_seed);
    set_double("lr", config.lr);
    set_int("batch_size", config.batch_size);
    set_int("epochs", config.epochs);
    set_int("patience", config.patience);
    set_double("lr_factor", config.lr_factor);
    set_double("min_lr", config.min_lr);
    set_double("eps", config.eps);
    set_u64("seed", config.seed);
    set_int("image_size", config.image_size);
    set_string("data_dir", config.data_dir);
    set_string("out_dir", config.out_dir);
    set_bool("eval_both_configs", config.eval_both_configs);

    std::map<std::string, int> seen;
    for (const ConfigLine& line : lines) {
        if (line.key == "profile") {
            continue;
        }
        auto it = setters.find(line.key);
        if (it == setters.end()) {
            config_error(line.number, "unknown key \"" + line.key + "\"");
        }
        auto [seen_it, inserted] = seen.emplace(line.key, line.number);
        if (!inserted) {
            config_error(line.number, "duplicate key \"" + line.key + "\" (first on line " +
                                          std::to_string(seen_it->second) + ")");
        }
        it->second(line.value, line.number);
    }

    validate(config.model);
    if (config.lr <= 0.0) {
        throw std::invalid_argument("config: lr must be > 0, got " + std::to_string(config.lr));
    }
    if (config.batch_size < 1) {
        throw std::invalid_argument("config: batch_size must be >= 1, got " +
                                    std::to_string(config.batch_size));
    }
    if (config.epochs < 1) {
        throw std::invalid_argument("config: epochs must be >= 1, got " +
                                    std::to_string(config.epochs));
    }
    if (config.patience < 1) {
        throw std::invalid_argument("config: patience must be >= 1, got " +
                                    std::to_string(config.patience));
    }
    if (config.lr_factor <= 0.0 || config.lr_factor >= 1.0) {
        throw std::invalid_argument("config: lr_factor must lie in (0, 1), got " +
                                    std::to_string(config.lr_factor));
    }
    if (config.min_lr <= 0.0) {
        throw std::invalid_argument("config: min_lr must be > 0, got " +
                                    std::to_string(config.min_lr));
    }
    if (config.eps <= 0.0) {
        throw std::invalid_argument("config: eps must be > 0, got " + std::to_string(config.eps));
    }
    const int divisor = 1 << config.model.depth;
    if (config.image_size < divisor || config.image_size % divisor != 0) {
        throw std::invalid_argument("config: image_size must be a positive multiple of " +
                                    std::to_string(divisor) + ", got " +
                                    std::to_string(config.image_size));
    }
    return config;
}

RunConfig parse_run_config(const std::string& path) {
    std::ifstream file(path);
    if (!file) {
        throw std::runtime_error("cannot open config \"" + path + "\"");
    }
    std::ostringstream buffer;
    buffer << file.rdbuf();
    return parse_run_config_text(buffer.str());
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

std::string format_csv_row(const EpochRow& row) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g", row.epoch,
                  row.train_loss, row.val_loss, row.dice_kidney, row.dice_tumor, row.lr);
    return buf;
}

// Per-batch dropout stream, a pure function of (master seed, epoch, batch).
std::uint64_t dropout_seed_for(std::uint64_t master, int epoch, std::size_t batch) {
    return mix_seed(master, (static_cast<std::uint64_t>(static_cast<std::uint32_t>(epoch)) << 32) |
                                static_cast<std::uint64_t>(batch));
}

struct ValMetrics {
    double loss = 0.0;
    double dice_kidney = 0.0;
    double dice_tumor = 0.0;
};

ValMetrics validation_pass(Model& model, const Dataset& data, const RunConfig& config) {
    ValMetrics metrics;
    double loss_sum = 0.0;
    std::size_t items = 0;
    DiceCounts kidney, tumor;
    for (std::size_t start = 0; start < data.val_indices.size();
         start += static_cast<std::size_t>(config.batch_size)) {
        const std::size_t end = std::min(data.val_indices.size(),
                                         start + static_cast<std::size_t>(config.batch_size));
        const std::vector<std::size_t> chunk(data.val_indices.begin() +
                                                 static_cast<std::ptrdiff_t>(start),
                                             data.val_indices.begin() +
                                                 static_cast<std::ptrdiff_t>(end));
        Batch batch = assemble_batch(data.samples, chunk);
        Model::Outputs out = model.forward(batch.input, Mode::kEval);
        Tensor loss = total_loss({out.hv1, out.hv2, out.final_}, batch.target, config.eps);
        loss_sum += loss.item() * static_cast<double>(chunk.size());
        items += chunk.size();
        const DiceCounts k = dice_counts(out.final_, batch.target, 1);
        const DiceCounts t = dice_counts(out.final_, batch.target, 2);
        kidney.intersection += k.intersection;
        kidney.predicted += k.predicted;
        kidney.actual += k.actual;
        tumor.intersection += t.intersection;
        tumor.predicted += t.predicted;
        tumor.actual += t.actual;
    }
    metrics.loss = loss_sum / static_cast<double>(items);
    metrics.dice_kidney = dice_from_counts(kidney);
    metrics.dice_tumor = dice_from_counts(tumor);
    return metrics;
}

} // namespace

TrainResult train(const RunConfig& config, const std::string& resume_from) {
    namespace fs = std::filesystem;
    Dataset data = load_dataset(config.data_dir, config.image_size);
    if (data.train_indices.empty()) {
        throw std::runtime_error("dataset in \"" + config.data_dir + "\" has no training split");
    }
    if (data.val_indices.empty()) {
        throw std::runtime_error("dataset in \"" + config.data_dir +
                                 "\" has no validation split");
    }
    fs::create_directories(config.out_dir);

    Model model(config.model);
    AdamState adam;
    PlateauSchedule schedule;
    schedule.lr = config.lr;
    schedule.patience = config.patience;
    schedule.factor = config.lr_factor;
    schedule.min_lr = config.min_lr;
    int start_epoch = 0;

    if (!resume_from.empty()) {
        LoadedCheckpoint loaded = checkpoint_load(resume_from);
        if (!loaded.extras.present) {
            throw std::runtime_error("checkpoint \"" + resume_from +
                                     "\" has no optimizer state to resume from");
        }
        model = std::move(loaded.model);
        adam = std::move(loaded.extras.adam);
        schedule.lr = loaded.extras.schedule.lr;
        schedule.best = loaded.extras.schedule.best;
        schedule.has_best = loaded.extras.schedule.has_best;
        schedule.stall = loaded.extras.schedule.stall;
        start_epoch = loaded.extras.epochs_completed;
    }

    TrainResult result;
    result.csv_path = (fs::path(config.out_dir) / "metrics.csv").string();
    result.best_path = (fs::path(config.out_dir) / "best.hvnc").string();
    result.last_path = (fs::path(config.out_dir) / "last.hvnc").string();
    result.best_epoch = start_epoch;
    result.best_val_loss = schedule.has_best ? schedule.best
                                             : std::numeric_limits<double>::infinity();

    // A resumed run appends to the existing metrics file; a fresh run
    // replaces it.
    const bool append = start_epoch > 0 && fs::exists(result.csv_path);
    std::ofstream csv(result.csv_path, append ? std::ios::app : std::ios::trunc);
    if (!csv) {
        throw std::runtime_error("cannot open \"" + result.csv_path + "\" for writing");
    }
    if (!append) {
        csv << "epoch,train_loss,val_loss,dice_kidney,dice_tumor,lr\n";
    }

    auto save_with_extras = [&](const std::string& path, int epochs_completed) {
        CheckpointExtras extras;
        extras.present = true;
        extras.adam = adam;
        extras.schedule = schedule;
        extras.epochs_completed = epochs_completed;
        checkpoint_save(model, &extras, config.image_size, path);
    };

    for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
        const double epoch_lr = schedule.lr;
        auto batches = make_batches(data.train_indices, config.batch_size,
                                    config.seed ^ static_cast<std::uint64_t>(epoch));
        double loss_sum = 0.0;
        std::size_t items = 0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            Batch batch = assemble_batch(data.samples, batches[bi]);
            double loss_value = 0.0;
            {
                TapeScope scope;
                Model::Outputs out = model.forward(batch.input, Mode::kTrain,
                                                   dropout_seed_for(config.seed, epoch, bi));
                Tensor loss =
                    total_loss({out.hv1, out.hv2, out.final_}, batch.target, config.eps);
                loss_value = loss.item();
                if (!std::isfinite(loss_value)) {
                    throw std::runtime_error("training loss is not finite at epoch " +
                                             std::to_string(epoch + 1) + ", batch " +
                                             std::to_string(bi + 1));
                }
                scope.tape().backward(loss);
            }
            adam_step(model.params(), adam, epoch_lr);
            for (auto& [name, param] : model.params()) {
                param.zero_grad();
            }
            loss_sum += loss_value * static_cast<double>(batches[bi].size());
            items += batches[bi].size();
        }

        const ValMetrics val = validation_pass(model, data, config);
        if (!std::isfinite(val.loss)) {
            throw std::runtime_error("validation loss is not finite at epoch " +
                                     std::to_string(epoch + 1));
        }

        EpochRow row;
        row.epoch = epoch + 1;
        row.train_loss = loss_sum / static_cast<double>(items);
        row.val_loss = val.loss;
        row.dice_kidney = val.dice_kidney;
        row.dice_tumor = val.dice_tumor;
        row.lr = epoch_lr;
        result.rows.push_back(row);
        csv << format_csv_row(row) << '\n';
        csv.flush();

        const bool improved = !schedule.has_best || val.loss < schedule.best;
        plateau_update(schedule, val.loss);
        if (improved) {
            result.best_epoch = epoch + 1;
            result.best_val_loss = val.loss;
            save_with_extras(result.best_path, epoch + 1);
        }
        save_with_extras(result.last_path, epoch + 1);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation / prediction
// ---------------------------------------------------------------------------

EvalReport evaluate(Model& model, const Dataset& data, const std::string& split,
                    int batch_size) {
    if (split != "train" && split != "val") {
        throw std::invalid_argument("evaluate: split must be \"train\" or \"val\", got \"" +
                                    split + "\"");
    }
    const std::vector<std::size_t>& indices =
        split == "train" ? data.train_indices : data.val_indices;
    if (indices.empty()) {
        throw std::runtime_error("evaluate: the " + split + " split is empty");
    }
    if (batch_size < 1) {
        throw std::invalid_argument("evaluate: batch_size must be >= 1");
    }
    EvalReport report;
    DiceCounts kidney, tumor;
    double mean_kidney_sum = 0.0;
    double mean_tumor_sum = 0.0;
    for (std::size_t start = 0; start < indices.size();
         start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end =
            std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
        const std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                             indices.begin() + static_cast<std::ptrdiff_t>(end));
        Batch batch = assemble_batch(data.samples, chunk);
        Model::Outputs out = model.forward(batch.input, Mode::kEval);
        const int height = out.final_.extent(2);
        const int width = out.final_.extent(3);
        const std::size_t plane = 3 * static_cast<std::size_t>(height) * width;
        for (std::size_t b = 0; b < chunk.size(); ++b) {
            Tensor pred({1, 3, height, width});
            Tensor truth({1, 3, height, width});
            std::copy(out.final_.raw() + b * plane, out.final_.raw() + (b + 1) * plane,
                      pred.raw());
            std::copy(batch.target.raw() + b * plane, batch.target.raw() + (b + 1) * plane,
                      truth.raw());
            const DiceCounts k = dice_counts(pred, truth, 1);
            const DiceCounts t = dice_counts(pred, truth, 2);
            kidney.intersection += k.intersection;
            kidney.predicted += k.predicted;
            kidney.actual += k.actual;
            tumor.intersection += t.intersection;
            tumor.predicted += t.predicted;
            tumor.actual += t.actual;
            mean_kidney_sum += dice_from_counts(k);
            mean_tumor_sum += dice_from_counts(t);
            ++report.images;
        }
    }
    report.pooled_kidney = dice_from_counts(kidney);
    report.pooled_tumor = dice_from_counts(tumor);
    report.mean_kidney = mean_kidney_sum / report.images;
    report.mean_tumor = mean_tumor_sum / report.images;
    return report;
}

EvalReport evaluate_checkpoint(const std::string& checkpoint_path, const std::string& data_dir,
                               const std::string& split) {
    LoadedCheckpoint loaded = checkpoint_load(checkpoint_path);
    Dataset data = load_dataset(data_dir, loaded.image_size);
    return evaluate(loaded.model, data, split, 4);
}

std::string format_eval_report(const EvalReport& report, const std::string& split) {
    char buf[256];
    std::string out = "split  images  tumor_dice(pooled)  kidney_dice(pooled)  "
                      "tumor_dice(mean)  kidney_dice(mean)\n";
    std::snprintf(buf, sizeof(buf), "%-5s  %6d  %18.4f  %19.4f  %16.4f  %17.4f\n", split.c_str(),
                  report.images, report.pooled_tumor, report.pooled_kidney, report.mean_tumor,
                  report.mean_kidney);
    out += buf;
    return out;
}

std::pair<std::string, std::string> predict_to_files(const std::string& checkpoint_path,
                                                     const std::string& image_path,
                                                     const std::string& out_dir) {
    namespace fs = std::filesystem;
    LoadedCheckpoint loaded = checkpoint_load(checkpoint_path);
    const int size = loaded.image_size;
    const int divisor = 1 << loaded.model.config().depth;
    if (size < divisor || size % divisor != 0) {
        throw std::runtime_error("checkpoint image size " + std::to_string(size) +
                                 " is not divisible by " + std::to_string(divisor));
    }
    RawImage raw = read_pgm(image_path);
    Tensor image = preprocess(raw, size);

    Tensor input({1, 1, size, size});
    std::copy(image.raw(), image.raw() + image.numel(), input.raw());
    Model::Outputs out = loaded.model.forward(input, Mode::kEval);
    Tensor labels = argmax_channels(out.final_);

    RawImage mask;
    mask.height = mask.width = size;
    mask.pixels.resize(static_cast<std::size_t>(size) * size);
    const double* lv = labels.raw();
    for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
        mask.pixels[i] = static_cast<std::uint8_t>(lv[i]);
    }

    fs::create_directories(out_dir);
    const std::string stem = fs::path(image_path).stem().string();
    const std::string mask_path = (fs::path(out_dir) / (stem + "_mask.pgm")).string();
    const std::string overlay_path = (fs::path(out_dir) / (stem + "_overlay.ppm")).string();
    write_pgm(mask_path, mask);
    write_ppm_overlay(overlay_path, tensor_to_raw(image), mask);
    return {mask_path, overlay_path};
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

AblationReport run_ablation(const RunConfig& config) {
    namespace fs = std::filesystem;
    AblationReport report;
    for (const bool attention : {true, false}) {
        RunConfig variant = config;
        variant.model.use_attention = attention;
        variant.out_dir =
            (fs::path(config.out_dir) / (attention ? "with_attention" : "without_attention"))
                .string();
        TrainResult trained = train(variant);
        const std::string prefix = attention ? "with_attention" : "without_attention";
        for (const char* which : {"best", "last"}) {
            const std::string& path =
                std::string(which) == "best" ? trained.best_path : trained.last_path;
            AblationReport::Entry entry;
            entry.label = prefix + std::string(" ") + which;
            entry.train = evaluate_checkpoint(path, variant.data_dir, "train");
            entry.val = evaluate_checkpoint(path, variant.data_dir, "val");
            report.entries.push_back(std::move(entry));
        }
        if (attention) {
            report.with_attention = std::move(trained);
        } else {
            report.without_attention = std::move(trained);
        }
    }
    return report;
}

std::string format_ablation_report(const AblationReport& report) {
    std::string out = "configuration            split  tumor_dice(mean)  kidney_dice(mean)  "
                      "tumor_dice(pooled)  kidney_dice(pooled)\n";
    char buf[256];
    for (const auto& entry : report.entries) {
        for (const char* split : {"train", "val"}) {
            const EvalReport& r = std::string(split) == "train" ? entry.train : entry.val;
            std::snprintf(buf, sizeof(buf), "%-23s  %-5s  %16.4f  %17.4f  %18.4f  %19.4f\n",
                          entry.label.c_str(), split, r.mean_tumor, r.mean_kidney,
                          r.pooled_tumor, r.pooled_kidney);
            out += buf;
        }
    }
    return out;
}

} // namespace hvnet
