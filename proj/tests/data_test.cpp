#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "hvnet/data.hpp"
#include "hvnet/tensor.hpp"

using namespace hvnet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir(const char* tag) {
        path = fs::temp_directory_path() / (std::string("hvnet_test_") + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
    std::string file(const char* name) const { return (path / name).string(); }
};

std::vector<unsigned char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)),
                                      std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

} // namespace

// ---------------------------------------------------------------------------
// phantom generation
// ---------------------------------------------------------------------------

TEST_CASE("phantoms are a pure function of seed and index") {
    PhantomSpec spec;
    Phantom a = generate_phantom(spec, 3);
    Phantom b = generate_phantom(spec, 3);
    Phantom c = generate_phantom(spec, 4);
    CHECK(a.id == b.id);
    CHECK(a.image.pixels == b.image.pixels);
    CHECK(a.mask.pixels == b.mask.pixels);
    CHECK(a.image.pixels != c.image.pixels);
    PhantomSpec other = spec;
    other.master_seed = 2;
    Phantom d = generate_phantom(other, 3);
    CHECK(a.image.pixels != d.image.pixels);
}

TEST_CASE("phantom ids are zero-padded indices") {
    PhantomSpec spec;
    CHECK(generate_phantom(spec, 0).id == "0000");
    CHECK(generate_phantom(spec, 17).id == "0017");
}

TEST_CASE("phantom label counts are ordered") {
    PhantomSpec spec; // 64x64 defaults
    for (int index : {0, 1, 2, 7, 19}) {
        Phantom p = generate_phantom(spec, index);
        int counts[3] = {0, 0, 0};
        for (unsigned char label : p.mask.pixels) {
            REQUIRE(label <= 2);
            counts[label] += 1;
        }
        CHECK(counts[2] > 0);
        CHECK(counts[2] < counts[1]);
        CHECK(counts[1] < counts[0]);
    }
}

TEST_CASE("phantom intensity bands separate the classes") {
    PhantomSpec spec;
    spec.background_noise = 0.0;
    Phantom p = generate_phantom(spec, 5);
    for (std::size_t i = 0; i < p.mask.pixels.size(); ++i) {
        const int v = p.image.pixels[i];
        switch (p.mask.pixels[i]) {
        case 0: CHECK(v == 30); break;             // constant background at noise 0
        case 1: CHECK((v >= 110 && v <= 160)); break;
        default: CHECK((v >= 190 && v <= 240)); break;
        }
    }
}

TEST_CASE("phantom geometry stays inside the canvas") {
    PhantomSpec spec;
    for (int index = 0; index < 8; ++index) {
        Phantom p = generate_phantom(spec, index);
        const int size = spec.size;
        // No foreground on the outermost ring.
        for (int i = 0; i < size; ++i) {
            CHECK(p.mask.at(0, i) == 0);
            CHECK(p.mask.at(size - 1, i) == 0);
            CHECK(p.mask.at(i, 0) == 0);
            CHECK(p.mask.at(i, size - 1) == 0);
        }
    }
}

TEST_CASE("phantom spec validation") {
    PhantomSpec spec;
    spec.size = 0;
    CHECK_THROWS_AS(generate_phantom(spec, 0), std::invalid_argument);
    spec = PhantomSpec{};
    spec.background_noise = -1.0;
    CHECK_THROWS_AS(generate_phantom(spec, 0), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

TEST_CASE("preprocess at the native size only rescales") {
    RawImage img;
    img.height = img.width = 2;
    img.pixels = {0, 255, 128, 64};
    Tensor t = preprocess(img, 2);
    REQUIRE(t.shape() == std::vector<int>{1, 2, 2});
    CHECK(t.raw()[0] == 0.0);
    CHECK(t.raw()[1] == 1.0);
    CHECK(t.raw()[2] == doctest::Approx(128.0 / 255.0).epsilon(1e-15));
    CHECK(t.raw()[3] == doctest::Approx(64.0 / 255.0).epsilon(1e-15));
}

TEST_CASE("bilinear upsample keeps corners and interpolates the interior") {
    RawImage img;
    img.height = img.width = 2;
    img.pixels = {0, 255, 255, 0};
    Tensor t = preprocess(img, 4);
    REQUIRE(t.shape() == std::vector<int>{1, 4, 4});
    auto at = [&](int r, int c) { return t.raw()[r * 4 + c] * 255.0; };
    CHECK(at(0, 0) == doctest::Approx(0.0));
    CHECK(at(0, 3) == doctest::Approx(255.0));
    CHECK(at(3, 0) == doctest::Approx(255.0));
    CHECK(at(3, 3) == doctest::Approx(0.0));
    // Row 0 interpolates between 0 and 255 at thirds.
    CHECK(at(0, 1) == doctest::Approx(255.0 / 3.0).epsilon(1e-12));
    CHECK(at(0, 2) == doctest::Approx(2.0 * 255.0 / 3.0).epsilon(1e-12));
    // The center mixes all four corners: at (1,1) weights are (2/3)^2, etc.
    const double want = (4.0 / 9.0) * 0 + (2.0 / 9.0) * 255 + (2.0 / 9.0) * 255 +
                        (1.0 / 9.0) * 0;
    CHECK(at(1, 1) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("preprocess of a constant image is constant at any size") {
    RawImage img;
    img.height = 3;
    img.width = 5;
    img.pixels.assign(15, 77);
    Tensor t = preprocess(img, 8);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        CHECK(t.raw()[i] == doctest::Approx(77.0 / 255.0).epsilon(1e-12));
    }
}

TEST_CASE("preprocess rejects empty input") {
    RawImage img;
    CHECK_THROWS_AS(preprocess(img, 4), std::invalid_argument);
}

TEST_CASE("mask resize is label-preserving") {
    RawImage mask;
    mask.height = mask.width = 2;
    mask.pixels = {0, 1, 2, 0};
    RawImage big = resize_mask_nearest(mask, 64);
    std::set<unsigned char> seen(big.pixels.begin(), big.pixels.end());
    for (unsigned char label : seen) {
        CHECK(label <= 2);
    }
    CHECK(seen.size() == 3); // every original label survives
    // Corners map to corners under corner-aligned nearest.
    CHECK(big.at(0, 0) == 0);
    CHECK(big.at(0, 63) == 1);
    CHECK(big.at(63, 0) == 2);
    CHECK(big.at(63, 63) == 0);
}

TEST_CASE("mask encode and decode round-trip") {
    RawImage mask;
    mask.height = 2;
    mask.width = 3;
    mask.pixels = {0, 1, 2, 2, 1, 0};
    Tensor onehot = encode_mask(mask);
    REQUIRE(onehot.shape() == std::vector<int>{3, 2, 3});
    // Channel sums count the class pixels.
    double sums[3] = {0, 0, 0};
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < 6; ++i) {
            sums[c] += onehot.raw()[c * 6 + i];
        }
    }
    CHECK(sums[0] == 2.0);
    CHECK(sums[1] == 2.0);
    CHECK(sums[2] == 2.0);
    RawImage back = decode_mask(onehot);
    CHECK(back.pixels == mask.pixels);
}

TEST_CASE("encode_mask names the offending position") {
    RawImage mask;
    mask.height = mask.width = 2;
    mask.pixels = {0, 0, 5, 0};
    CHECK_THROWS_WITH_AS(encode_mask(mask), doctest::Contains("(1, 0)"),
                         std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Netpbm I/O
// ---------------------------------------------------------------------------

TEST_CASE("pgm round-trip is byte-exact") {
    TempDir dir("pgm");
    PhantomSpec spec;
    Phantom p = generate_phantom(spec, 0);
    const std::string path = dir.file("img.pgm");
    write_pgm(path, p.image);
    RawImage back = read_pgm(path);
    CHECK(back.height == p.image.height);
    CHECK(back.width == p.image.width);
    CHECK(back.pixels == p.image.pixels);
    // A second write of the same content produces identical bytes.
    const std::string path2 = dir.file("img2.pgm");
    write_pgm(path2, back);
    CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("ppm round-trip is byte-exact") {
    TempDir dir("ppm");
    RgbImage img;
    img.height = 2;
    img.width = 3;
    img.pixels = {255, 0, 0, 0, 255, 0, 0, 0, 255, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    const std::string path = dir.file("img.ppm");
    write_ppm(path, img);
    RgbImage back = read_ppm(path);
    CHECK(back.height == 2);
    CHECK(back.width == 3);
    CHECK(back.pixels == img.pixels);
}

TEST_CASE("pgm reader handles comments and rejects malformed input") {
    TempDir dir("pgmbad");
    const std::string good = dir.file("good.pgm");
    {
        std::ofstream out(good, std::ios::binary);
        out << "P5\n# a comment\n2 2\n255\n";
        out.write("\x01\x02\x03\x04", 4);
    }
    RawImage img = read_pgm(good);
    CHECK(img.width == 2);
    CHECK(img.pixels == std::vector<std::uint8_t>{1, 2, 3, 4});

    const std::string bad_magic = dir.file("bad_magic.pgm");
    spit(bad_magic, {'P', '6', '\n', '1', ' ', '1', '\n', '2', '5', '5', '\n', 0});
    CHECK_THROWS_AS(read_pgm(bad_magic), std::runtime_error);

    const std::string bad_maxval = dir.file("bad_maxval.pgm");
    {
        std::ofstream out(bad_maxval, std::ios::binary);
        out << "P5\n1 1\n999\n";
        out.write("\x01", 1);
    }
    CHECK_THROWS_WITH_AS(read_pgm(bad_maxval), doctest::Contains("maxval"),
                         std::runtime_error);

    const std::string truncated = dir.file("short.pgm");
    {
        std::ofstream out(truncated, std::ios::binary);
        out << "P5\n2 2\n255\n";
        out.write("\x01\x02", 2); // payload two bytes short
    }
    CHECK_THROWS_WITH_AS(read_pgm(truncated), doctest::Contains("byte"), std::runtime_error);

    CHECK_THROWS_AS(read_pgm(dir.file("missing.pgm")), std::runtime_error);
}

TEST_CASE("overlay paints kidney red and tumor blue") {
    TempDir dir("overlay");
    RawImage image;
    image.height = 1;
    image.width = 3;
    image.pixels = {10, 20, 30};
    RawImage mask = image;
    mask.pixels = {0, 1, 2};
    const std::string path = dir.file("overlay.ppm");
    write_ppm_overlay(path, image, mask);
    RgbImage rgb = read_ppm(path);
    CHECK(rgb.pixels == std::vector<std::uint8_t>{10, 10, 10, 255, 0, 0, 0, 0, 255});
}

TEST_CASE("tensor_to_raw rounds back to bytes") {
    RawImage img;
    img.height = 2;
    img.width = 2;
    img.pixels = {0, 128, 200, 255};
    RawImage back = tensor_to_raw(preprocess(img, 2));
    CHECK(back.pixels == img.pixels);
}

// ---------------------------------------------------------------------------
// dataset layout
// ---------------------------------------------------------------------------

TEST_CASE("write_dataset lays out files and an 80/20 manifest") {
    TempDir dir("dataset");
    PhantomSpec spec;
    spec.size = 32;
    write_dataset(dir.str(), spec, 10);
    CHECK(fs::exists(dir.path / "images" / "0000.pgm"));
    CHECK(fs::exists(dir.path / "masks" / "0009.pgm"));
    CHECK(!fs::exists(dir.path / "images" / "0010.pgm"));

    Dataset data = load_dataset(dir.str(), 32);
    CHECK(data.samples.size() == 10);
    CHECK(data.train_indices.size() == 8);
    CHECK(data.val_indices.size() == 2);
    for (const Sample& sample : data.samples) {
        CHECK(sample.image.shape() == std::vector<int>{1, 32, 32});
        CHECK(sample.mask.size() == 32 * 32);
        for (double v : sample.image.data()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    // The split is by index: the first 8 ids train, the last 2 validate.
    CHECK(data.samples[data.train_indices[0]].id == "0000");
    CHECK(data.samples[data.val_indices[0]].id == "0008");
    CHECK(data.samples[data.val_indices[1]].id == "0009");
}

TEST_CASE("load_dataset resizes samples to the requested extent") {
    TempDir dir("resize");
    PhantomSpec spec;
    spec.size = 32;
    write_dataset(dir.str(), spec, 5);
    Dataset data = load_dataset(dir.str(), 16);
    CHECK(data.samples[0].image.shape() == std::vector<int>{1, 16, 16});
    for (unsigned char label : data.samples[0].mask) {
        CHECK(label <= 2);
    }
}

TEST_CASE("load_dataset rejects a tampered manifest") {
    TempDir dir("badmanifest");
    PhantomSpec spec;
    spec.size = 32;
    write_dataset(dir.str(), spec, 3);
    {
        std::ofstream out(dir.path / "manifest.txt", std::ios::trunc);
        out << "0000 train\n0001 nonsense\n";
    }
    CHECK_THROWS_WITH_AS(load_dataset(dir.str(), 32), doctest::Contains("line 2"),
                         std::runtime_error);
    CHECK_THROWS_AS(load_dataset((dir.path / "nowhere").string(), 32), std::runtime_error);
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

TEST_CASE("make_batches chunks a seeded permutation") {
    std::vector<std::size_t> indices{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    auto batches = make_batches(indices, 4, 99);
    REQUIRE(batches.size() == 3);
    CHECK(batches[0].size() == 4);
    CHECK(batches[1].size() == 4);
    CHECK(batches[2].size() == 2);
    std::multiset<std::size_t> seen;
    for (const auto& batch : batches) {
        seen.insert(batch.begin(), batch.end());
    }
    CHECK(seen == std::multiset<std::size_t>(indices.begin(), indices.end()));

    auto again = make_batches(indices, 4, 99);
    CHECK(again == batches);
    auto shuffled = make_batches(indices, 4, 100);
    CHECK(shuffled != batches);

    CHECK_THROWS_AS(make_batches({}, 4, 1), std::invalid_argument);
    CHECK_THROWS_AS(make_batches(indices, 0, 1), std::invalid_argument);
}

TEST_CASE("assemble_batch one-hot encodes the targets") {
    TempDir dir("batch");
    PhantomSpec spec;
    spec.size = 32;
    write_dataset(dir.str(), spec, 4);
    Dataset data = load_dataset(dir.str(), 32);
    Batch batch = assemble_batch(data.samples, {0, 2});
    REQUIRE(batch.input.shape() == std::vector<int>{2, 1, 32, 32});
    REQUIRE(batch.target.shape() == std::vector<int>{2, 3, 32, 32});
    for (int b = 0; b < 2; ++b) {
        const Sample& sample = data.samples[b == 0 ? 0 : 2];
        for (int h = 0; h < 32; ++h) {
            for (int w = 0; w < 32; ++w) {
                double sum = 0.0;
                for (int c = 0; c < 3; ++c) {
                    sum += batch.target.at(b, c, h, w);
                }
                CHECK(sum == 1.0);
                const int label = sample.mask[static_cast<std::size_t>(h) * 32 + w];
                CHECK(batch.target.at(b, label, h, w) == 1.0);
                CHECK(batch.input.at(b, 0, h, w) == sample.image.raw()[h * 32 + w]);
            }
        }
    }
}
