#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace impact {

// Dense row-major float32 array. Shapes are immutable after construction;
// data is mutable through data() for in-place parameter updates.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0f) {}

    Tensor(std::vector<int64_t> shape, std::vector<float> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != checked_numel(shape_))
            throw std::invalid_argument("Tensor: data size does not match shape");
    }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int64_t> shape, float v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t i) const {
        if (i < 0) i += ndim();
        return shape_.at(static_cast<size_t>(i));
    }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& vec() { return data_; }
    const std::vector<float>& vec() const { return data_; }

    float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    // Reinterprets the buffer with a new shape of identical element count.
    Tensor reshaped(std::vector<int64_t> new_shape) const {
        Tensor t;
        t.shape_ = std::move(new_shape);
        if (checked_numel(t.shape_) != numel())
            throw std::invalid_argument("reshape: element count mismatch");
        t.data_ = data_;
        return t;
    }

    bool all_finite() const;

    static int64_t checked_numel(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int64_t> shape_;
    std::vector<float> data_;
};

bool bitwise_equal(const Tensor& a, const Tensor& b);

std::string shape_str(const std::vector<int64_t>& shape);

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

}  // namespace impact
