// Acceptance gate for the segmentation trainer. Each criterion prints one
// pass/fail line; the process exits nonzero if any of them failed. argv[1]
// names the command-line binary used for the end-to-end training checks.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hvnet/checkpoint.hpp"
#include "hvnet/data.hpp"
#include "hvnet/gradcheck.hpp"
#include "hvnet/losses.hpp"
#include "hvnet/network.hpp"
#include "hvnet/optimizer.hpp"
#include "hvnet/tensor.hpp"
#include "hvnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace hvnet;

namespace {

int g_failures = 0;
std::string g_cli;
fs::path g_root;

void report(int number, const char* title, bool pass, const std::string& detail) {
    std::printf("criterion %d: %s  %s  [%s]\n", number, pass ? "PASS" : "FAIL", title,
                detail.c_str());
    std::fflush(stdout);
    if (!pass) {
        ++g_failures;
    }
}

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// Runs the CLI with stdout/stderr captured into log_name under the scratch
// root. Returns true when the process exits 0.
bool run_cli(const std::string& args, const std::string& log_name) {
    const fs::path log = g_root / log_name;
    const std::string cmd = "\"" + g_cli + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    return std::system(cmd.c_str()) == 0;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void spit(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// metric.csv cells as doubles, header skipped.
std::vector<std::vector<double>> read_csv(const fs::path& path) {
    std::ifstream in(path);
    std::vector<std::vector<double>> rows;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (first || line.empty()) {
            first = false;
            continue;
        }
        std::vector<double> row;
        std::size_t start = 0;
        while (start <= line.size()) {
            const std::size_t comma = line.find(',', start);
            row.push_back(std::stod(line.substr(
                start, comma == std::string::npos ? std::string::npos : comma - start)));
            if (comma == std::string::npos) {
                break;
            }
            start = comma + 1;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string format_num(const char* fmt, double value) {
    char buf[64];
    std::snprintf(buf, sizeof buf, fmt, value);
    return buf;
}

// --------------------------------------------------------------------------
// criterion 1: every gradient-checked op within tolerance, full suite under
// two minutes.
// --------------------------------------------------------------------------
void criterion_gradients() {
    const auto start = std::chrono::steady_clock::now();
    bool pass = true;
    std::string worst_name = "-";
    double worst_ratio = 0.0;
    int cases = 0;
    for (const GradCheckCase& test : gradcheck_suite()) {
        const double err = test.run();
        ++cases;
        const double ratio = err / test.tolerance;
        if (ratio > worst_ratio) {
            worst_ratio = ratio;
            worst_name = test.name + " err " + format_num("%.2e", err) + " tol " +
                         format_num("%.0e", test.tolerance);
        }
        if (!(err < test.tolerance)) {
            pass = false;
        }
    }
    const double elapsed = seconds_since(start);
    if (elapsed >= 120.0) {
        pass = false;
    }
    report(1, "gradient checks on every op and the full model", pass,
           std::to_string(cases) + " cases, worst " + worst_name + ", " +
               format_num("%.1f", elapsed) + " s (limit 120)");
}

// --------------------------------------------------------------------------
// criterion 2: loss identities.
// --------------------------------------------------------------------------
void criterion_losses() {
    bool pass = true;
    std::string detail;

    // Perfect overlap scores (numerically) zero.
    Tensor mask({2, 1, 4, 4}, 0.0);
    for (int i = 0; i < 16; ++i) {
        mask.raw()[i * 2] = 1.0;
    }
    const double perfect = dice_loss(mask, mask).item();
    if (!(perfect < 1e-6)) {
        pass = false;
        detail += "perfect-overlap dice " + format_num("%.3e", perfect) + "; ";
    }

    // Disjoint masks approach but never reach 1.
    Tensor left({1, 1, 4, 8}, 0.0);
    Tensor right({1, 1, 4, 8}, 0.0);
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
            left.at(0, 0, r, c) = 1.0;
            right.at(0, 0, r, c + 4) = 1.0;
        }
    }
    const double disjoint = dice_loss(left, right).item();
    if (!(disjoint >= 1.0 - 1e-3 && disjoint < 1.0)) {
        pass = false;
        detail += "disjoint dice " + format_num("%.6f", disjoint) + "; ";
    }

    // Cross entropy of the uniform prediction is ln 3.
    Tensor uniform({2, 3, 4, 4}, 1.0 / 3.0);
    Tensor onehot({2, 3, 4, 4}, 0.0);
    for (int b = 0; b < 2; ++b) {
        for (int h = 0; h < 4; ++h) {
            for (int w = 0; w < 4; ++w) {
                onehot.at(b, (b + h + w) % 3, h, w) = 1.0;
            }
        }
    }
    const double ce = cross_entropy(onehot, uniform).item();
    const double ln3 = std::log(3.0);
    if (!(std::abs(ce - ln3) <= 1e-9)) {
        pass = false;
        detail += "uniform CE " + format_num("%.12f", ce) + "; ";
    }

    // Hand-computed quarter overlap: dice loss 1/3.
    Tensor y({1, 1, 2, 2}, std::vector<double>{1, 1, 0, 0});
    Tensor p({1, 1, 2, 2}, std::vector<double>{1, 0, 0, 0});
    const double hand = dice_loss(y, p).item();
    if (!(std::abs(hand - 1.0 / 3.0) <= 1e-4)) {
        pass = false;
        detail += "hand dice " + format_num("%.6f", hand) + "; ";
    }

    if (pass) {
        detail = "perfect " + format_num("%.1e", perfect) + ", disjoint " +
                 format_num("%.6f", disjoint) + ", uniform CE - ln3 = " +
                 format_num("%.1e", ce - ln3) + ", hand dice " + format_num("%.6f", hand);
    }
    report(2, "dice and cross-entropy identities", pass, detail);
}

// --------------------------------------------------------------------------
// criterion 3: Adam first step and plateau cadence.
// --------------------------------------------------------------------------
void criterion_optimizer() {
    bool pass = true;
    std::string detail;

    std::map<std::string, Tensor> params;
    params.emplace("w", Tensor({1}, 0.0));
    params.at("w").grad()[0] = 0.1;
    AdamState state;
    adam_step(params, state, 1e-3);
    const double theta1 = params.at("w").data()[0];
    const double want = -1e-3 * (0.1 / (0.1 + 1e-8));
    if (!(std::abs(theta1 - want) <= 1e-9)) {
        pass = false;
        detail += "first step " + format_num("%.12f", theta1) + "; ";
    }

    PlateauSchedule schedule;
    schedule.lr = 1e-3;
    plateau_update(schedule, 1.0); // records the best
    bool reduced_early = false;
    for (int i = 0; i < 9; ++i) {
        reduced_early = plateau_update(schedule, 1.0) || reduced_early;
    }
    const double lr_after_9 = schedule.lr;
    const bool reduced_tenth = plateau_update(schedule, 1.0);
    if (reduced_early || lr_after_9 != 1e-3 || !reduced_tenth || schedule.lr != 1e-4) {
        pass = false;
        detail += "plateau lr after 10 stalls " + format_num("%.6g", schedule.lr) + "; ";
    }

    if (pass) {
        detail = "first step " + format_num("%.10f", theta1) + ", lr held at 9 stalls, " +
                 "0.001 -> " + format_num("%.6g", schedule.lr) + " on the 10th";
    }
    report(3, "Adam first step and plateau schedule", pass, detail);
}

// --------------------------------------------------------------------------
// criterion 4: output shape contract across input sizes.
// --------------------------------------------------------------------------
void criterion_shapes() {
    bool pass = true;
    std::string detail;
    ModelConfig config;
    config.base_channels = 4;
    config.attention_reduction = 2;
    Model model(config);
    for (const int k : {1, 2, 4}) {
        const int side = 16 * k;
        Rng rng(100 + static_cast<std::uint64_t>(k));
        const Tensor batch = Tensor::randn({2, 1, side, side}, rng);
        Model::Outputs out = model.forward(batch, Mode::kEval);
        const std::vector<int> want = {2, 3, side, side};
        for (const Tensor* head : {&out.hv1, &out.hv2, &out.final_}) {
            if (head->shape() != want) {
                pass = false;
                detail += "bad shape at k=" + std::to_string(k) + "; ";
                continue;
            }
            for (int b = 0; b < 2 && pass; ++b) {
                for (int h = 0; h < side && pass; ++h) {
                    for (int w = 0; w < side; ++w) {
                        const double sum = head->at(b, 0, h, w) + head->at(b, 1, h, w) +
                                           head->at(b, 2, h, w);
                        if (std::abs(sum - 1.0) > 1e-6) {
                            pass = false;
                            detail += "pixel sum " + format_num("%.8f", sum) + " at k=" +
                                      std::to_string(k) + "; ";
                            break;
                        }
                    }
                }
            }
        }
    }
    if (pass) {
        detail = "three (2,3,S,S) heads with unit pixel sums for S in {16,32,64}";
    }
    report(4, "head shapes and probability normalization", pass, detail);
}

// --------------------------------------------------------------------------
// criterion 5: the desk-scale training run reaches the target quality in
// under thirty minutes.
// --------------------------------------------------------------------------
void criterion_desk_run() {
    const auto start = std::chrono::steady_clock::now();
    const fs::path data = g_root / "desk_data";
    const fs::path out = g_root / "desk_out";
    bool pass = true;
    std::string detail;

    if (!run_cli("gen-data --out \"" + data.string() + "\" --count 250 --size 64 --seed 1",
                 "desk_gen.log")) {
        report(5, "desk training reaches target dice", false, "gen-data failed");
        return;
    }
    const fs::path config = g_root / "desk.cfg";
    spit(config, "profile = desk\n"
                 "epochs = 15\n"
                 "seed = 1\n"
                 "data_dir = " + data.string() + "\n"
                 "out_dir = " + out.string() + "\n");
    if (!run_cli("train --config \"" + config.string() + "\"", "desk_train.log")) {
        report(5, "desk training reaches target dice", false,
               "train failed, see desk_train.log");
        return;
    }
    EvalReport eval;
    try {
        eval = evaluate_checkpoint((out / "best.hvnc").string(), data.string(), "val");
    } catch (const std::exception& e) {
        report(5, "desk training reaches target dice", false, e.what());
        return;
    }
    const double minutes = seconds_since(start) / 60.0;
    if (!(eval.mean_kidney >= 0.85)) {
        pass = false;
    }
    if (!(eval.mean_tumor >= 0.75)) {
        pass = false;
    }
    if (!(minutes < 30.0)) {
        pass = false;
    }
    detail = "val mean dice: kidney " + format_num("%.4f", eval.mean_kidney) +
             " (need 0.85), tumor " + format_num("%.4f", eval.mean_tumor) +
             " (need 0.75), " + format_num("%.1f", minutes) + " min (limit 30)";
    report(5, "desk training reaches target dice", pass, detail);
}

// --------------------------------------------------------------------------
// criterion 6: one command trains and reports both attention settings.
// --------------------------------------------------------------------------
void criterion_ablation() {
    const fs::path data = g_root / "small_data";
    const fs::path out = g_root / "ablation_out";
    if (!run_cli("gen-data --out \"" + data.string() + "\" --count 16 --size 32 --seed 7",
                 "small_gen.log")) {
        report(6, "single-command attention ablation", false, "gen-data failed");
        return;
    }
    const fs::path config = g_root / "ablation.cfg";
    spit(config, "base_channels = 4\n"
                 "image_size = 32\n"
                 "epochs = 2\n"
                 "seed = 3\n"
                 "eval_both_configs = true\n"
                 "data_dir = " + data.string() + "\n"
                 "out_dir = " + out.string() + "\n");
    if (!run_cli("train --config \"" + config.string() + "\"", "ablation.log")) {
        report(6, "single-command attention ablation", false,
               "train failed, see ablation.log");
        return;
    }
    const std::string log = slurp(g_root / "ablation.log");
    bool pass = true;
    std::string missing;
    for (const char* needle :
         {"with_attention best", "with_attention last", "without_attention best",
          "without_attention last", "train", "val", "tumor_dice", "kidney_dice"}) {
        if (log.find(needle) == std::string::npos) {
            pass = false;
            missing += std::string(needle) + "; ";
        }
    }
    for (const char* arm : {"with_attention", "without_attention"}) {
        if (!fs::exists(out / arm / "best.hvnc") || !fs::exists(out / arm / "last.hvnc")) {
            pass = false;
            missing += std::string(arm) + " checkpoints; ";
        }
    }
    report(6, "single-command attention ablation", pass,
           pass ? "both settings trained, report covers train/val x tumor/kidney"
                : "missing: " + missing);
}

// --------------------------------------------------------------------------
// criterion 7: bit-stable reruns and checkpoint round trips.
// --------------------------------------------------------------------------
void criterion_reproducibility() {
    const fs::path data = g_root / "small_data"; // written by criterion 6
    bool pass = true;
    std::string detail;
    for (const char* tag : {"repro_a", "repro_b"}) {
        const fs::path config = g_root / (std::string(tag) + ".cfg");
        spit(config, "base_channels = 4\n"
                     "image_size = 32\n"
                     "epochs = 2\n"
                     "seed = 11\n"
                     "data_dir = " + data.string() + "\n"
                     "out_dir = " + (g_root / tag).string() + "\n");
        if (!run_cli("train --config \"" + config.string() + "\"",
                     std::string(tag) + ".log")) {
            report(7, "reruns and checkpoint round trips are exact", false,
                   std::string(tag) + " train failed");
            return;
        }
    }
    const auto rows_a = read_csv(g_root / "repro_a" / "metrics.csv");
    const auto rows_b = read_csv(g_root / "repro_b" / "metrics.csv");
    if (rows_a.empty() || rows_a.size() != rows_b.size()) {
        pass = false;
        detail += "row count mismatch; ";
    }
    double max_delta = 0.0;
    for (std::size_t i = 0; pass && i < rows_a.size(); ++i) {
        if (rows_a[i].size() != rows_b[i].size()) {
            pass = false;
            detail += "cell count mismatch; ";
            break;
        }
        for (std::size_t j = 0; j < rows_a[i].size(); ++j) {
            const double delta = std::abs(rows_a[i][j] - rows_b[i][j]);
            max_delta = std::max(max_delta, delta);
            if (delta > 1e-12) {
                pass = false;
                detail += "cell (" + std::to_string(i) + "," + std::to_string(j) +
                          ") differs by " + format_num("%.3e", delta) + "; ";
            }
        }
    }

    // A loaded checkpoint reproduces the forward pass bit for bit after
    // another save/load cycle.
    try {
        LoadedCheckpoint first = checkpoint_load((g_root / "repro_a" / "best.hvnc").string());
        Rng rng(2024);
        const Tensor probe = Tensor::randn({1, 1, 32, 32}, rng);
        Model::Outputs before = first.model.forward(probe, Mode::kEval);
        const fs::path copy = g_root / "repro_copy.hvnc";
        checkpoint_save(first.model, &first.extras, first.image_size, copy.string());
        LoadedCheckpoint second = checkpoint_load(copy.string());
        Model::Outputs after = second.model.forward(probe, Mode::kEval);
        const std::size_t bytes = before.final_.numel() * sizeof(double);
        if (std::memcmp(before.final_.raw(), after.final_.raw(), bytes) != 0 ||
            std::memcmp(before.hv1.raw(), after.hv1.raw(),
                        before.hv1.numel() * sizeof(double)) != 0 ||
            std::memcmp(before.hv2.raw(), after.hv2.raw(),
                        before.hv2.numel() * sizeof(double)) != 0) {
            pass = false;
            detail += "forward differs after checkpoint round trip; ";
        }
    } catch (const std::exception& e) {
        pass = false;
        detail += std::string("round trip failed: ") + e.what() + "; ";
    }

    report(7, "reruns and checkpoint round trips are exact", pass,
           pass ? "metrics identical (max cell delta " + format_num("%.1e", max_delta) +
                      "), forward bitwise stable"
                : detail);
}

// --------------------------------------------------------------------------
// criterion 8: image files round-trip byte-exact and checkpoint corruption
// is caught by the checksum.
// --------------------------------------------------------------------------
void criterion_serialization() {
    bool pass = true;
    std::string detail;

    RawImage gray;
    gray.height = 7;
    gray.width = 5;
    gray.pixels.resize(35);
    for (std::size_t i = 0; i < gray.pixels.size(); ++i) {
        gray.pixels[i] = static_cast<std::uint8_t>((i * 13 + 3) % 256);
    }
    const fs::path pgm1 = g_root / "roundtrip1.pgm";
    const fs::path pgm2 = g_root / "roundtrip2.pgm";
    write_pgm(pgm1.string(), gray);
    write_pgm(pgm2.string(), read_pgm(pgm1.string()));
    if (slurp(pgm1) != slurp(pgm2) || slurp(pgm1).empty()) {
        pass = false;
        detail += "PGM round trip not byte-exact; ";
    }

    RgbImage color;
    color.height = 4;
    color.width = 6;
    color.pixels.resize(72);
    for (std::size_t i = 0; i < color.pixels.size(); ++i) {
        color.pixels[i] = static_cast<std::uint8_t>((i * 29 + 11) % 256);
    }
    const fs::path ppm1 = g_root / "roundtrip1.ppm";
    const fs::path ppm2 = g_root / "roundtrip2.ppm";
    write_ppm(ppm1.string(), color);
    write_ppm(ppm2.string(), read_ppm(ppm1.string()));
    if (slurp(ppm1) != slurp(ppm2) || slurp(ppm1).empty()) {
        pass = false;
        detail += "PPM round trip not byte-exact; ";
    }

    ModelConfig config;
    config.base_channels = 4;
    config.attention_reduction = 2;
    Model model(config);
    const fs::path clean = g_root / "crc_clean.hvnc";
    checkpoint_save(model, nullptr, 32, clean.string());
    std::string bytes = slurp(clean);
    bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x01);
    const fs::path dirty = g_root / "crc_dirty.hvnc";
    spit(dirty, bytes);
    bool rejected = false;
    try {
        checkpoint_load(dirty.string());
    } catch (const std::exception& e) {
        rejected = std::string(e.what()).find("CRC") != std::string::npos;
    }
    if (!rejected) {
        pass = false;
        detail += "flipped byte not caught by CRC; ";
    }
    try {
        checkpoint_load(clean.string());
    } catch (const std::exception&) {
        pass = false;
        detail += "pristine checkpoint rejected; ";
    }

    report(8, "image round trips and checksum rejection", pass,
           pass ? "PGM/PPM byte-exact, single flipped byte rejected" : detail);
}

} // namespace

int main(int argc, char** argv) {
    if (argc != 2) {
        std::fprintf(stderr, "usage: %s <path-to-cli>\n", argv[0]);
        return 2;
    }
    g_cli = argv[1];
    g_root = fs::temp_directory_path() / "hvnet_acceptance";
    fs::remove_all(g_root);
    fs::create_directories(g_root);

    criterion_gradients();
    criterion_losses();
    criterion_optimizer();
    criterion_shapes();
    criterion_desk_run();
    criterion_ablation();
    criterion_reproducibility();
    criterion_serialization();

    std::printf("%d/8 criteria passed\n", 8 - g_failures);
    return g_failures == 0 ? 0 : 1;
}
