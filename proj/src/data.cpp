#include "hvnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>

#include "hvnet/rng.hpp"

namespace hvnet {

namespace {

[[noreturn]] void reject(const std::string& msg) {
    throw std::invalid_argument(msg);
}

std::string format_id(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", index);
    return buf;
}

struct Ellipse {
    double cx, cy;  // center (column, row)
    double a, b;    // semi-axes along the rotated frame
    double theta;   // rotation of the a-axis from the column axis

    bool contains(double col, double row) const {
        const double dx = col - cx;
        const double dy = row - cy;
        const double ct = std::cos(theta);
        const double st = std::sin(theta);
        const double u = (dx * ct + dy * st) / a;
        const double v = (-dx * st + dy * ct) / b;
        return u * u + v * v <= 1.0;
    }

    // Half-extents of the axis-aligned bounding box.
    double extent_x() const {
        const double ct = std::cos(theta);
        const double st = std::sin(theta);
        return std::sqrt(a * a * ct * ct + b * b * st * st);
    }
    double extent_y() const {
        const double ct = std::cos(theta);
        const double st = std::sin(theta);
        return std::sqrt(a * a * st * st + b * b * ct * ct);
    }

    bool inside_canvas(int size, double margin) const {
        const double ex = extent_x();
        const double ey = extent_y();
        return cx - ex >= margin && cx + ex <= size - 1 - margin && cy - ey >= margin &&
               cy + ey <= size - 1 - margin;
    }
};

void validate_spec(const PhantomSpec& spec) {
    if (spec.size < 8) {
        reject("PhantomSpec: size must be >= 8, got " + std::to_string(spec.size));
    }
    auto band = [](double lo, double hi, const char* name) {
        if (lo < 0.0 || hi > 255.0 || lo > hi) {
            reject(std::string("PhantomSpec: ") + name + " band [" + std::to_string(lo) + ", " +
                   std::to_string(hi) + "] must satisfy 0 <= low <= high <= 255");
        }
    };
    band(spec.kidney_low, spec.kidney_high, "kidney");
    band(spec.tumor_low, spec.tumor_high, "tumor");
    if (spec.background_level < 0.0 || spec.background_level > 255.0) {
        reject("PhantomSpec: background_level must lie in [0, 255], got " +
               std::to_string(spec.background_level));
    }
    if (spec.background_noise < 0.0) {
        reject("PhantomSpec: background_noise must be >= 0, got " +
               std::to_string(spec.background_noise));
    }
}

std::uint8_t clamp_byte(double v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

} // namespace

Phantom generate_phantom(const PhantomSpec& spec, int index) {
    validate_spec(spec);
    if (index < 0) {
        reject("generate_phantom: index must be >= 0, got " + std::to_string(index));
    }
    const int size = spec.size;
    constexpr int kMaxAttempts = 16;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        Rng rng(mix_seed(spec.master_seed,
                         (static_cast<std::uint64_t>(index) << 8) | static_cast<std::uint64_t>(attempt)));

        Ellipse kidney;
        kidney.a = size * rng.uniform(0.16, 0.26);
        kidney.b = size * rng.uniform(0.12, 0.20);
        kidney.theta = rng.uniform(0.0, std::numbers::pi);
        kidney.cx = size * rng.uniform(0.38, 0.62);
        kidney.cy = size * rng.uniform(0.38, 0.62);

        // Tumor: same orientation, scaled-down axes, center displaced inside
        // the kidney in its own elliptical coordinates.
        Ellipse tumor = kidney;
        const double scale = rng.uniform(0.30, 0.50);
        tumor.a = kidney.a * scale;
        tumor.b = kidney.b * scale;
        const double t = rng.uniform(0.0, 0.45);
        const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double lx = t * kidney.a * std::cos(phi);
        const double ly = t * kidney.b * std::sin(phi);
        const double ct = std::cos(kidney.theta);
        const double st = std::sin(kidney.theta);
        tumor.cx = kidney.cx + lx * ct - ly * st;
        tumor.cy = kidney.cy + lx * st + ly * ct;

        if (!kidney.inside_canvas(size, 1.0) || !tumor.inside_canvas(size, 1.0)) {
            continue;
        }

        Phantom out;
        out.id = format_id(index);
        out.image.height = out.image.width = size;
        out.image.pixels.resize(static_cast<std::size_t>(size) * size);
        out.mask = out.image; // same zeroed geometry
        for (int r = 0; r < size; ++r) {
            for (int c = 0; c < size; ++c) {
                const std::size_t i = static_cast<std::size_t>(r) * size + c;
                if (tumor.contains(c, r)) {
                    out.mask.pixels[i] = 2;
                    out.image.pixels[i] = clamp_byte(rng.uniform(spec.tumor_low, spec.tumor_high));
                } else if (kidney.contains(c, r)) {
                    out.mask.pixels[i] = 1;
                    out.image.pixels[i] =
                        clamp_byte(rng.uniform(spec.kidney_low, spec.kidney_high));
                } else {
                    out.mask.pixels[i] = 0;
                    out.image.pixels[i] =
                        clamp_byte(spec.background_level + rng.normal() * spec.background_noise);
                }
            }
        }
        return out;
    }
    throw std::runtime_error("generate_phantom: no fitting geometry for index " +
                             std::to_string(index) + " after " + std::to_string(kMaxAttempts) +
                             " attempts");
}

Tensor preprocess(const RawImage& image, int target) {
    if (image.height < 1 || image.width < 1) {
        reject("preprocess: empty input image (" + std::to_string(image.height) + "x" +
               std::to_string(image.width) + ")");
    }
    if (target < 1) {
        reject("preprocess: target must be >= 1, got " + std::to_string(target));
    }
    Tensor out({1, target, target});
    double* dst = out.raw();
    for (int r = 0; r < target; ++r) {
        const double sr =
            target > 1 ? static_cast<double>(image.height - 1) * r / (target - 1) : 0.0;
        const int r0 = static_cast<int>(sr);
        const int r1 = std::min(r0 + 1, image.height - 1);
        const double fr = sr - r0;
        for (int c = 0; c < target; ++c) {
            const double sc =
                target > 1 ? static_cast<double>(image.width - 1) * c / (target - 1) : 0.0;
            const int c0 = static_cast<int>(sc);
            const int c1 = std::min(c0 + 1, image.width - 1);
            const double fc = sc - c0;
            const double top = (1.0 - fc) * image.at(r0, c0) + fc * image.at(r0, c1);
            const double bottom = (1.0 - fc) * image.at(r1, c0) + fc * image.at(r1, c1);
            dst[static_cast<std::size_t>(r) * target + c] =
                ((1.0 - fr) * top + fr * bottom) / 255.0;
        }
    }
    return out;
}

RawImage resize_mask_nearest(const RawImage& mask, int target) {
    if (mask.height < 1 || mask.width < 1) {
        reject("resize_mask_nearest: empty input mask");
    }
    if (target < 1) {
        reject("resize_mask_nearest: target must be >= 1, got " + std::to_string(target));
    }
    RawImage out;
    out.height = out.width = target;
    out.pixels.resize(static_cast<std::size_t>(target) * target);
    for (int r = 0; r < target; ++r) {
        const int sr = target > 1 ? static_cast<int>(std::lround(
                                        static_cast<double>(mask.height - 1) * r / (target - 1)))
                                  : 0;
        for (int c = 0; c < target; ++c) {
            const int sc = target > 1
                               ? static_cast<int>(std::lround(
                                     static_cast<double>(mask.width - 1) * c / (target - 1)))
                               : 0;
            out.at(r, c) = mask.at(sr, sc);
        }
    }
    return out;
}

Tensor encode_mask(const RawImage& mask) {
    Tensor onehot({3, mask.height, mask.width});
    double* dst = onehot.raw();
    const std::size_t spatial = static_cast<std::size_t>(mask.height) * mask.width;
    for (int r = 0; r < mask.height; ++r) {
        for (int c = 0; c < mask.width; ++c) {
            const std::uint8_t label = mask.at(r, c);
            if (label > 2) {
                reject("encode_mask: label " + std::to_string(label) + " at (" +
                       std::to_string(r) + ", " + std::to_string(c) + ") is outside {0,1,2}");
            }
            dst[label * spatial + static_cast<std::size_t>(r) * mask.width + c] = 1.0;
        }
    }
    return onehot;
}

RawImage decode_mask(const Tensor& onehot) {
    if (onehot.rank() != 3 || onehot.extent(0) != 3) {
        reject("decode_mask: expected a (3,H,W) tensor, got shape " + onehot.shape_string());
    }
    RawImage mask;
    mask.height = onehot.extent(1);
    mask.width = onehot.extent(2);
    mask.pixels.resize(static_cast<std::size_t>(mask.height) * mask.width);
    const double* src = onehot.raw();
    const std::size_t spatial = mask.pixels.size();
    for (std::size_t i = 0; i < spatial; ++i) {
        int best = 0;
        double best_v = src[i];
        for (int c = 1; c < 3; ++c) {
            if (src[c * spatial + i] > best_v) {
                best_v = src[c * spatial + i];
                best = c;
            }
        }
        mask.pixels[i] = static_cast<std::uint8_t>(best);
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Netpbm I/O
// ---------------------------------------------------------------------------

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open \"" + path + "\" for reading");
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

[[noreturn]] void malformed(const std::string& path, std::size_t offset, const std::string& what) {
    throw std::runtime_error("\"" + path + "\": " + what + " at byte offset " +
                             std::to_string(offset));
}

struct NetpbmHeader {
    int width = 0;
    int height = 0;
    std::size_t payload_offset = 0;
};

// Parses "P<digit>", then width, height, maxval tokens separated by
// whitespace and '#' comments, then the single whitespace byte preceding the
// payload. maxval must be 255.
NetpbmHeader parse_netpbm(const std::vector<std::uint8_t>& bytes, const std::string& path,
                          char magic_digit) {
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
        if (pos + n > bytes.size()) {
            malformed(path, bytes.size(), "truncated file");
        }
    };
    need(2);
    if (bytes[0] != 'P' || bytes[1] != static_cast<std::uint8_t>(magic_digit)) {
        malformed(path, 0, std::string("expected magic P") + magic_digit);
    }
    pos = 2;
    auto skip_separators = [&]() {
        while (pos < bytes.size()) {
            const std::uint8_t b = bytes[pos];
            if (b == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') {
                    ++pos;
                }
            } else if (b == ' ' || b == '\t' || b == '\r' || b == '\n' || b == '\v' ||
                       b == '\f') {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&](const char* name) {
        skip_separators();
        if (pos >= bytes.size() || bytes[pos] < '0' || bytes[pos] > '9') {
            malformed(path, pos, std::string("expected ") + name);
        }
        long value = 0;
        while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
            value = value * 10 + (bytes[pos] - '0');
            if (value > 1 << 20) {
                malformed(path, pos, std::string(name) + " out of range");
            }
            ++pos;
        }
        return static_cast<int>(value);
    };
    NetpbmHeader header;
    header.width = read_int("width");
    header.height = read_int("height");
    if (header.width < 1 || header.height < 1) {
        malformed(path, pos, "zero image extent");
    }
    const std::size_t maxval_pos = pos;
    const int maxval = read_int("maxval");
    if (maxval != 255) {
        malformed(path, maxval_pos + 1, "maxval " + std::to_string(maxval) + " not supported");
    }
    need(1);
    const std::uint8_t sep = bytes[pos];
    if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n') {
        malformed(path, pos, "expected single whitespace before payload");
    }
    ++pos;
    header.payload_offset = pos;
    return header;
}

void write_file(const std::string& path, const std::string& header,
                const std::uint8_t* payload, std::size_t payload_size) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open \"" + path + "\" for writing");
    }
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(payload),
              static_cast<std::streamsize>(payload_size));
    if (!out) {
        throw std::runtime_error("write to \"" + path + "\" failed");
    }
}

} // namespace

RawImage read_pgm(const std::string& path) {
    const std::vector<std::uint8_t> bytes = read_file(path);
    const NetpbmHeader header = parse_netpbm(bytes, path, '5');
    const std::size_t expected =
        static_cast<std::size_t>(header.width) * static_cast<std::size_t>(header.height);
    if (bytes.size() - header.payload_offset < expected) {
        malformed(path, bytes.size(), "truncated payload (need " + std::to_string(expected) +
                                          " bytes)");
    }
    RawImage image;
    image.width = header.width;
    image.height = header.height;
    image.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header.payload_offset),
                        bytes.begin() +
                            static_cast<std::ptrdiff_t>(header.payload_offset + expected));
    return image;
}

void write_pgm(const std::string& path, const RawImage& image) {
    if (image.height < 1 || image.width < 1 ||
        image.pixels.size() != static_cast<std::size_t>(image.height) * image.width) {
        reject("write_pgm: inconsistent image extents");
    }
    const std::string header = "P5\n" + std::to_string(image.width) + " " +
                               std::to_string(image.height) + "\n255\n";
    write_file(path, header, image.pixels.data(), image.pixels.size());
}

RgbImage read_ppm(const std::string& path) {
    const std::vector<std::uint8_t> bytes = read_file(path);
    const NetpbmHeader header = parse_netpbm(bytes, path, '6');
    const std::size_t expected =
        3 * static_cast<std::size_t>(header.width) * static_cast<std::size_t>(header.height);
    if (bytes.size() - header.payload_offset < expected) {
        malformed(path, bytes.size(), "truncated payload (need " + std::to_string(expected) +
                                          " bytes)");
    }
    RgbImage image;
    image.width = header.width;
    image.height = header.height;
    image.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header.payload_offset),
                        bytes.begin() +
                            static_cast<std::ptrdiff_t>(header.payload_offset + expected));
    return image;
}

void write_ppm(const std::string& path, const RgbImage& image) {
    if (image.height < 1 || image.width < 1 ||
        image.pixels.size() != 3 * static_cast<std::size_t>(image.height) * image.width) {
        reject("write_ppm: inconsistent image extents");
    }
    const std::string header = "P6\n" + std::to_string(image.width) + " " +
                               std::to_string(image.height) + "\n255\n";
    write_file(path, header, image.pixels.data(), image.pixels.size());
}

void write_ppm_overlay(const std::string& path, const RawImage& image, const RawImage& mask) {
    if (image.height != mask.height || image.width != mask.width) {
        reject("write_ppm_overlay: image " + std::to_string(image.height) + "x" +
               std::to_string(image.width) + " and mask " + std::to_string(mask.height) + "x" +
               std::to_string(mask.width) + " extents differ");
    }
    RgbImage overlay;
    overlay.height = image.height;
    overlay.width = image.width;
    overlay.pixels.resize(3 * image.pixels.size());
    for (std::size_t i = 0; i < image.pixels.size(); ++i) {
        std::uint8_t* px = overlay.pixels.data() + 3 * i;
        switch (mask.pixels[i]) {
        case 1: px[0] = 255; px[1] = 0; px[2] = 0; break;
        case 2: px[0] = 0; px[1] = 0; px[2] = 255; break;
        default: px[0] = px[1] = px[2] = image.pixels[i]; break;
        }
    }
    write_ppm(path, overlay);
}

RawImage tensor_to_raw(const Tensor& image) {
    if (image.rank() != 3 || image.extent(0) != 1) {
        reject("tensor_to_raw: expected a (1,H,W) tensor, got shape " + image.shape_string());
    }
    RawImage out;
    out.height = image.extent(1);
    out.width = image.extent(2);
    out.pixels.resize(static_cast<std::size_t>(out.height) * out.width);
    const double* src = image.raw();
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
        out.pixels[i] = clamp_byte(src[i] * 255.0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset directory layout
// ---------------------------------------------------------------------------

void write_dataset(const std::string& dir, const PhantomSpec& spec, int count) {
    if (count < 1) {
        reject("write_dataset: count must be >= 1, got " + std::to_string(count));
    }
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    std::ofstream manifest(fs::path(dir) / "manifest.txt", std::ios::trunc);
    if (!manifest) {
        throw std::runtime_error("cannot write manifest in \"" + dir + "\"");
    }
    const int train_count = count * 4 / 5;
    for (int i = 0; i < count; ++i) {
        Phantom phantom = generate_phantom(spec, i);
        write_pgm((fs::path(dir) / "images" / (phantom.id + ".pgm")).string(), phantom.image);
        write_pgm((fs::path(dir) / "masks" / (phantom.id + ".pgm")).string(), phantom.mask);
        manifest << phantom.id << ' ' << (i < train_count ? "train" : "val") << '\n';
    }
    if (!manifest) {
        throw std::runtime_error("write to manifest in \"" + dir + "\" failed");
    }
}

Dataset load_dataset(const std::string& dir, int target) {
    namespace fs = std::filesystem;
    std::ifstream manifest(fs::path(dir) / "manifest.txt");
    if (!manifest) {
        throw std::runtime_error("cannot open manifest in \"" + dir +
                                 "\" (not a dataset directory?)");
    }
    Dataset dataset;
    std::string line;
    int line_no = 0;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        std::istringstream fields(line);
        std::string id, split;
        if (!(fields >> id >> split) || (split != "train" && split != "val")) {
            throw std::runtime_error("manifest line " + std::to_string(line_no) +
                                     " malformed: \"" + line + "\"");
        }
        RawImage raw = read_pgm((fs::path(dir) / "images" / (id + ".pgm")).string());
        RawImage mask = read_pgm((fs::path(dir) / "masks" / (id + ".pgm")).string());
        RawImage resized_mask = resize_mask_nearest(mask, target);
        for (std::size_t i = 0; i < resized_mask.pixels.size(); ++i) {
            if (resized_mask.pixels[i] > 2) {
                throw std::runtime_error("mask for sample \"" + id + "\" holds label " +
                                         std::to_string(resized_mask.pixels[i]) +
                                         ", outside {0,1,2}");
            }
        }
        Sample sample;
        sample.image = preprocess(raw, target);
        sample.mask = std::move(resized_mask.pixels);
        sample.id = id;
        const std::size_t index = dataset.samples.size();
        dataset.samples.push_back(std::move(sample));
        (split == "train" ? dataset.train_indices : dataset.val_indices).push_back(index);
    }
    if (dataset.samples.empty()) {
        throw std::runtime_error("dataset in \"" + dir + "\" is empty");
    }
    return dataset;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& indices,
                                                   int batch_size, std::uint64_t epoch_seed) {
    if (indices.empty()) {
        reject("make_batches: empty dataset");
    }
    if (batch_size < 1) {
        reject("make_batches: batch_size must be >= 1, got " + std::to_string(batch_size));
    }
    std::vector<std::size_t> order = indices;
    Rng rng(epoch_seed);
    for (std::size_t i = order.size() - 1; i > 0; --i) {
        const std::size_t j =
            static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)));
        std::swap(order[i], order[j]);
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

Batch assemble_batch(const std::vector<Sample>& samples,
                     const std::vector<std::size_t>& indices) {
    if (indices.empty()) {
        reject("assemble_batch: empty index list");
    }
    const Sample& first = samples.at(indices[0]);
    const int height = first.image.extent(1);
    const int width = first.image.extent(2);
    const int batch = static_cast<int>(indices.size());
    Batch out{Tensor({batch, 1, height, width}), Tensor({batch, 3, height, width})};
    const std::size_t spatial = static_cast<std::size_t>(height) * width;
    double* in_dst = out.input.raw();
    double* tg_dst = out.target.raw();
    for (int b = 0; b < batch; ++b) {
        const Sample& sample = samples.at(indices[static_cast<std::size_t>(b)]);
        if (sample.image.extent(1) != height || sample.image.extent(2) != width) {
            reject("assemble_batch: sample \"" + sample.id + "\" extents " +
                   sample.image.shape_string() + " differ from the batch (" +
                   std::to_string(height) + "x" + std::to_string(width) + ")");
        }
        const double* src = sample.image.raw();
        std::copy(src, src + spatial, in_dst + static_cast<std::size_t>(b) * spatial);
        double* tg = tg_dst + static_cast<std::size_t>(b) * 3 * spatial;
        for (std::size_t i = 0; i < spatial; ++i) {
            tg[sample.mask[i] * spatial + i] = 1.0;
        }
    }
    return out;
}

} // namespace hvnet
