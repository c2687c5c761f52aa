#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hvnet/tensor.hpp"

namespace hvnet {

// Row-major integer image, one byte per pixel (grayscale or label map).
struct RawImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
    std::uint8_t at(int r, int c) const {
        return pixels[static_cast<std::size_t>(r) * width + c];
    }
};

struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels; // 3 bytes per pixel
};

// Generated image/mask pair before preprocessing. Mask pixels hold labels
// 0 (background), 1 (kidney), 2 (tumor).
struct Phantom {
    RawImage image;
    RawImage mask;
    std::string id;
};

struct PhantomSpec {
    int size = 64;
    double background_level = 30.0;
    double background_noise = 12.0; // Gaussian sigma before clamping
    double kidney_low = 110.0;      // per-pixel intensity band
    double kidney_high = 160.0;
    double tumor_low = 190.0;
    double tumor_high = 240.0;
    std::uint64_t master_seed = 1;
};

// Deterministic function of (spec, index): a rotated kidney ellipse fully
// inside the canvas with a smaller tumor ellipse placed inside it. Geometry
// that cannot fit is redrawn from derived sub-seeds a bounded number of
// times, then rejected.
Phantom generate_phantom(const PhantomSpec& spec, int index);

// Preprocessed training sample.
struct Sample {
    Tensor image;                    // (1, H, W), values in [0, 1]
    std::vector<std::uint8_t> mask;  // H*W labels in {0,1,2}
    std::string id;
};

// Bilinear resize to target x target (corner-aligned), then scale by 1/255.
Tensor preprocess(const RawImage& image, int target);

// Label-preserving nearest-neighbor resize for masks.
RawImage resize_mask_nearest(const RawImage& mask, int target);

// Labels {0,1,2} -> exact one-hot (3, H, W); rejects other labels naming the
// offending position. decode_mask is the argmax inverse.
Tensor encode_mask(const RawImage& mask);
RawImage decode_mask(const Tensor& onehot);

// Binary Netpbm I/O, maxval 255 only. Malformed input is rejected with the
// byte offset of the failure.
RawImage read_pgm(const std::string& path);
void write_pgm(const std::string& path, const RawImage& image);
RgbImage read_ppm(const std::string& path);
void write_ppm(const std::string& path, const RgbImage& image);

// Grayscale replicated to RGB with kidney pixels painted (255,0,0) and tumor
// pixels (0,0,255).
void write_ppm_overlay(const std::string& path, const RawImage& image, const RawImage& mask);

// Rounds a (1,H,W) tensor in [0,1] back to byte pixels.
RawImage tensor_to_raw(const Tensor& image);

struct Dataset {
    std::vector<Sample> samples;
    std::vector<std::size_t> train_indices;
    std::vector<std::size_t> val_indices;
};

// Writes images/NNNN.pgm, masks/NNNN.pgm and manifest.txt (id + split per
// line, first 80% of indices train).
void write_dataset(const std::string& dir, const PhantomSpec& spec, int count);

// Reads a directory written by write_dataset and preprocesses every sample
// to target x target.
Dataset load_dataset(const std::string& dir, int target);

// Seeded shuffle of the index list, chunked into batches; the final short
// batch is kept.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& indices,
                                                   int batch_size,
                                                   std::uint64_t epoch_seed);

struct Batch {
    Tensor input;  // (B, 1, H, W)
    Tensor target; // (B, 3, H, W) one-hot
};

Batch assemble_batch(const std::vector<Sample>& samples,
                     const std::vector<std::size_t>& indices);

} // namespace hvnet
