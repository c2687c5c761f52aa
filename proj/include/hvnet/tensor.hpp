#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hvnet/rng.hpp"

namespace hvnet {

// Dense n-dimensional array of doubles with shared storage. Feature maps use
// the canonical (batch, channel, height, width) order; scalars are shape {1}.
// A tensor's data is written once by the op that produces it and treated as
// immutable afterwards; the gradient buffer is allocated lazily on demand.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, double fill = 0.0);
    Tensor(std::vector<int> shape, std::vector<double> values);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor full(std::vector<int> shape, double value) { return Tensor(std::move(shape), value); }
    static Tensor scalar(double value) { return Tensor({1}, value); }
    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0);
    static Tensor rand_uniform(std::vector<int> shape, Rng& rng, double lo = 0.0, double hi = 1.0);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int extent(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

    std::span<double> data() { return {impl_->data.data(), impl_->data.size()}; }
    std::span<const double> data() const { return {impl_->data.data(), impl_->data.size()}; }
    double* raw() { return impl_->data.data(); }
    const double* raw() const { return impl_->data.data(); }

    // 4-D accessors for feature maps.
    double& at(int b, int c, int h, int w) { return impl_->data[offset4(b, c, h, w)]; }
    double at(int b, int c, int h, int w) const { return impl_->data[offset4(b, c, h, w)]; }

    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) { impl_->requires_grad = v; return *this; }

    bool has_grad() const { return !impl_->grad.empty(); }
    // Allocates (zero-filled) on first use.
    std::span<double> grad();
    std::span<const double> grad() const;
    void zero_grad();
    void drop_grad() { impl_->grad.clear(); impl_->grad.shrink_to_fit(); }
    Tensor grad_tensor() const;

    // Identity of the underlying storage, for aliasing checks.
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    bool all_finite() const;
    std::string shape_string() const;

private:
    struct Impl {
        std::vector<int> shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
    };

    std::size_t offset4(int b, int c, int h, int w) const {
        const auto& s = impl_->shape;
        return ((static_cast<std::size_t>(b) * s[1] + c) * s[2] + h) * s[3] + w;
    }

    std::shared_ptr<Impl> impl_;
};

std::int64_t shape_numel(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

} // namespace hvnet
