#include "impact/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "impact/rng.hpp"

namespace impact {

namespace {

constexpr uint32_t kImagesMagic = 0x00000803;  // ubyte, 3 dims
constexpr uint32_t kLabelsMagic = 0x00000801;  // ubyte, 1 dim

void write_be32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_be32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    check(bool(is), "idx: truncated while reading " + what);
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

}  // namespace

Tensor Dataset::image(int64_t i) const {
    check(i >= 0 && i < size(), "dataset: image index out of range");
    const int64_t chw = images.numel() / images.dim(0);
    Tensor out({images.dim(1), images.dim(2), images.dim(3)});
    std::memcpy(out.data(), images.data() + i * chw, static_cast<size_t>(chw) * sizeof(float));
    return out;
}

std::vector<int64_t> Dataset::indices_of_class(int c) const {
    std::vector<int64_t> out;
    for (int64_t i = 0; i < size(); ++i)
        if (labels[static_cast<size_t>(i)] == c) out.push_back(i);
    return out;
}

void Dataset::validate() const {
    check(images.ndim() == 4, "dataset: images must be (N, C, H, W)");
    check(static_cast<int64_t>(labels.size()) == size(), "dataset: label count mismatch");
    check(num_classes > 0, "dataset: class count must be positive");
    for (int lab : labels)
        check(lab >= 0 && lab < num_classes, "dataset: label out of range");
    for (int64_t i = 0; i < images.numel(); ++i) {
        const float v = images.data()[i];
        check(std::isfinite(v) && v >= 0.0f && v <= 1.0f, "dataset: pixel outside [0,1]");
    }
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& split) {
    std::ifstream fi(images_path, std::ios::binary);
    check(bool(fi), "idx: cannot open " + images_path);
    check(read_be32(fi, "images magic") == kImagesMagic, "idx: bad images magic in " + images_path);
    const int64_t n = read_be32(fi, "image count");
    const int64_t h = read_be32(fi, "rows");
    const int64_t w = read_be32(fi, "cols");
    std::vector<unsigned char> bytes(static_cast<size_t>(n * h * w));
    fi.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    check(fi.gcount() == static_cast<std::streamsize>(bytes.size()),
          "idx: truncated image payload in " + images_path);

    std::ifstream fl(labels_path, std::ios::binary);
    check(bool(fl), "idx: cannot open " + labels_path);
    check(read_be32(fl, "labels magic") == kLabelsMagic, "idx: bad labels magic in " + labels_path);
    const int64_t nl = read_be32(fl, "label count");
    check(nl == n, "idx: image/label count mismatch (" + std::to_string(n) + " vs " +
                       std::to_string(nl) + ")");
    std::vector<unsigned char> labs(static_cast<size_t>(nl));
    fl.read(reinterpret_cast<char*>(labs.data()), static_cast<std::streamsize>(labs.size()));
    check(fl.gcount() == static_cast<std::streamsize>(labs.size()),
          "idx: truncated label payload in " + labels_path);

    Dataset ds;
    ds.images = Tensor({n, 1, h, w});
    for (size_t i = 0; i < bytes.size(); ++i)
        ds.images.data()[i] = static_cast<float>(bytes[i]) / 255.0f;
    ds.labels.reserve(static_cast<size_t>(nl));
    int max_label = 0;
    for (unsigned char l : labs) {
        ds.labels.push_back(int(l));
        max_label = std::max(max_label, int(l));
    }
    ds.num_classes = max_label + 1;
    ds.split = split;
    ds.validate();
    return ds;
}

void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
    ds.validate();
    check(ds.images.dim(1) == 1, "idx: only single-channel images are stored");
    std::ofstream fi(images_path, std::ios::binary);
    check(bool(fi), "idx: cannot write " + images_path);
    write_be32(fi, kImagesMagic);
    write_be32(fi, static_cast<uint32_t>(ds.size()));
    write_be32(fi, static_cast<uint32_t>(ds.images.dim(2)));
    write_be32(fi, static_cast<uint32_t>(ds.images.dim(3)));
    std::vector<unsigned char> bytes(static_cast<size_t>(ds.images.numel()));
    for (int64_t i = 0; i < ds.images.numel(); ++i)
        bytes[static_cast<size_t>(i)] =
            static_cast<unsigned char>(std::lround(double(ds.images.data()[i]) * 255.0));
    fi.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    check(bool(fi), "idx: short write to " + images_path);

    std::ofstream fl(labels_path, std::ios::binary);
    check(bool(fl), "idx: cannot write " + labels_path);
    write_be32(fl, kLabelsMagic);
    write_be32(fl, static_cast<uint32_t>(ds.labels.size()));
    for (int lab : ds.labels) {
        unsigned char b = static_cast<unsigned char>(lab);
        fl.write(reinterpret_cast<const char*>(&b), 1);
    }
    check(bool(fl), "idx: short write to " + labels_path);
}

namespace {

constexpr int kSide = 32;

// One 32x32 byte raster per image; float pixels are byte/255 exactly.
void draw_shape(unsigned char* px, int cls, Rng& rng) {
    const int cx = 10 + int(rng.below(12));
    const int cy = 10 + int(rng.below(12));
    const int r = 5 + int(rng.below(7));
    const int fg = 140 + int(rng.below(116));
    const int noise = int(rng.below(33));
    for (int y = 0; y < kSide; ++y)
        for (int x = 0; x < kSide; ++x) {
            px[y * kSide + x] =
                noise > 0 ? static_cast<unsigned char>(rng.below(uint64_t(noise) + 1)) : 0;
        }
    auto in_square = [&](int x, int y, int rr) {
        return std::abs(x - cx) <= rr && std::abs(y - cy) <= rr;
    };
    auto in_circle = [&](int x, int y, int rr) {
        const int dx = x - cx, dy = y - cy;
        return dx * dx + dy * dy <= rr * rr;
    };
    auto in_triangle = [&](int x, int y, int rr) {
        const int dy = y - (cy - rr);
        if (dy < 0 || dy > 2 * rr) return false;
        return std::abs(x - cx) * 2 <= dy;
    };
    for (int y = 0; y < kSide; ++y)
        for (int x = 0; x < kSide; ++x) {
            const int dx = x - cx, dy = y - cy;
            bool on = false;
            switch (cls) {
                case 0: on = in_square(x, y, r); break;
                case 1: on = in_square(x, y, r) && !in_square(x, y, r - 3); break;
                case 2: on = in_circle(x, y, r); break;
                case 3: on = in_circle(x, y, r) && !in_circle(x, y, r - 3); break;
                case 4: on = in_triangle(x, y, r); break;
                case 5: on = in_triangle(x, y, r) && !in_triangle(x, y, r - 4); break;
                case 6:  // plus
                    on = (std::abs(dx) <= 2 && std::abs(dy) <= r) ||
                         (std::abs(dy) <= 2 && std::abs(dx) <= r);
                    break;
                case 7:  // diagonal cross
                    on = std::abs(std::abs(dx) - std::abs(dy)) <= 2 &&
                         std::max(std::abs(dx), std::abs(dy)) <= r;
                    break;
                case 8:  // horizontal stripes
                    on = in_square(x, y, r) && ((dy + r) / 3) % 2 == 0;
                    break;
                case 9:  // checkerboard
                    on = in_square(x, y, r) && (((dx + r) / 4) + ((dy + r) / 4)) % 2 == 0;
                    break;
                default: check(false, "shapes: unknown class");
            }
            if (on) px[y * kSide + x] = static_cast<unsigned char>(fg);
        }
}

}  // namespace

Dataset generate_shapes(uint64_t seed, int per_class, const std::string& split) {
    check(per_class >= 1, "shapes: per-class count must be >= 1");
    const int classes = 10;
    const int64_t n = int64_t(classes) * per_class;
    Dataset ds;
    ds.images = Tensor({n, 1, kSide, kSide});
    ds.labels.resize(static_cast<size_t>(n));
    ds.num_classes = classes;
    ds.split = split;
    std::vector<unsigned char> raster(kSide * kSide);
    for (int c = 0; c < classes; ++c) {
        for (int k = 0; k < per_class; ++k) {
            const int64_t idx = int64_t(c) * per_class + k;
            Rng rng(derive_seed(seed, "shapes", idx));
            draw_shape(raster.data(), c, rng);
            float* dst = ds.images.data() + idx * kSide * kSide;
            for (int p = 0; p < kSide * kSide; ++p)
                dst[p] = static_cast<float>(raster[static_cast<size_t>(p)]) / 255.0f;
            ds.labels[static_cast<size_t>(idx)] = c;
        }
    }
    ds.validate();
    return ds;
}

BinaryTask make_binary_task(const Dataset& ds, int category, uint64_t seed) {
    check(category >= 0 && category < ds.num_classes, "binary task: category out of range");
    BinaryTask task;
    task.category = category;
    std::vector<int64_t> others;
    for (int64_t i = 0; i < ds.size(); ++i) {
        if (ds.labels[static_cast<size_t>(i)] == category)
            task.positives.push_back(i);
        else
            others.push_back(i);
    }
    check(!task.positives.empty(), "binary task: category absent from dataset");
    check(others.size() >= task.positives.size(),
          "binary task: not enough negatives to balance");
    Rng rng(derive_seed(seed, "binary_task", category));
    rng.shuffle(others);
    task.negatives.assign(others.begin(),
                          others.begin() + static_cast<int64_t>(task.positives.size()));
    std::sort(task.negatives.begin(), task.negatives.end());
    return task;
}

Tensor gather_images(const Dataset& ds, std::span<const int64_t> idx) {
    const int64_t chw = ds.images.numel() / std::max<int64_t>(ds.size(), 1);
    Tensor out({static_cast<int64_t>(idx.size()), ds.images.dim(1), ds.images.dim(2),
                ds.images.dim(3)});
    for (size_t i = 0; i < idx.size(); ++i) {
        check(idx[i] >= 0 && idx[i] < ds.size(), "gather: index out of range");
        std::memcpy(out.data() + static_cast<int64_t>(i) * chw, ds.images.data() + idx[i] * chw,
                    static_cast<size_t>(chw) * sizeof(float));
    }
    return out;
}

std::vector<int> gather_labels(const Dataset& ds, std::span<const int64_t> idx) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (int64_t i : idx) {
        check(i >= 0 && i < ds.size(), "gather: index out of range");
        out.push_back(ds.labels[static_cast<size_t>(i)]);
    }
    return out;
}

}  // namespace impact
