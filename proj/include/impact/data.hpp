#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "impact/tensor.hpp"

namespace impact {

// Immutable after construction; safe for shared concurrent reads.
struct Dataset {
    Tensor images;            // (N, C, H, W), values in [0, 1]
    std::vector<int> labels;  // size N, each in [0, num_classes)
    int num_classes = 0;
    std::string split;

    int64_t size() const { return images.numel() ? images.dim(0) : 0; }
    Tensor image(int64_t i) const;  // (C, H, W) copy
    std::vector<int64_t> indices_of_class(int c) const;
    void validate() const;
};

// Single-category-versus-rest subset with balanced positives/negatives.
struct BinaryTask {
    int category = -1;
    std::vector<int64_t> positives;  // dataset order
    std::vector<int64_t> negatives;  // sampled from other classes, ascending
};

// IDX files: big-endian magic and dims, raw ubyte payload. Pixels are
// scaled to [0,1] on load; save rounds to the nearest byte.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& split = "");
void save_idx(const Dataset& ds, const std::string& images_path,
              const std::string& labels_path);

// Ten procedural 32x32 grayscale classes (shape kind x fill pattern) with
// randomized position, scale, intensity, and background noise. Pixel values
// are byte-quantized so an IDX round trip is bit-exact.
Dataset generate_shapes(uint64_t seed, int per_class, const std::string& split = "train");

BinaryTask make_binary_task(const Dataset& ds, int category, uint64_t seed);

// Batched gathers for evaluation loops.
Tensor gather_images(const Dataset& ds, std::span<const int64_t> idx);
std::vector<int> gather_labels(const Dataset& ds, std::span<const int64_t> idx);

}  // namespace impact
