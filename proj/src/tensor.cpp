#include "hvnet/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace hvnet {

std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int e : shape) {
        n *= e;
    }
    return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            os << ",";
        }
        os << shape[i];
    }
    os << ")";
    return os.str();
}

namespace {

void validate_shape(const std::vector<int>& shape) {
    if (shape.empty()) {
        throw std::invalid_argument("tensor shape must have at least one extent");
    }
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] < 1) {
            throw std::invalid_argument("tensor extent " + std::to_string(i) + " is " +
                                        std::to_string(shape[i]) + "; all extents must be >= 1");
        }
    }
}

} // namespace

Tensor::Tensor(std::vector<int> shape, double fill) {
    validate_shape(shape);
    impl_ = std::make_shared<Impl>();
    impl_->data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    impl_->shape = std::move(shape);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                    " does not match shape " + shape_to_string(shape));
    }
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) {
        v = rng.normal() * stddev;
    }
    return t;
}

Tensor Tensor::rand_uniform(std::vector<int> shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) {
        v = rng.uniform(lo, hi);
    }
    return t;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw std::invalid_argument("item() requires a single-element tensor, got shape " +
                                    shape_string());
    }
    return impl_->data[0];
}

std::span<double> Tensor::grad() {
    if (impl_->grad.empty()) {
        impl_->grad.assign(impl_->data.size(), 0.0);
    }
    return {impl_->grad.data(), impl_->grad.size()};
}

std::span<const double> Tensor::grad() const {
    if (impl_->grad.empty()) {
        throw std::runtime_error("gradient requested but never populated; run backward first");
    }
    return {impl_->grad.data(), impl_->grad.size()};
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) {
        std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }
}

Tensor Tensor::grad_tensor() const {
    if (impl_->grad.empty()) {
        throw std::runtime_error("gradient requested but never populated; run backward first");
    }
    return Tensor(impl_->shape, impl_->grad);
}

bool Tensor::all_finite() const {
    for (double v : impl_->data) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

std::string Tensor::shape_string() const {
    return shape_to_string(impl_->shape);
}

} // namespace hvnet
