#include "safer/tensor.hpp"

#include <atomic>
#include <numeric>
#include <sstream>

#include "safer/errors.hpp"

namespace safer {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (const std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream oss;
    oss << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) oss << ',';
        oss << shape[i];
    }
    oss << ']';
    return oss.str();
}

Tensor make_tensor(Shape shape) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.resize(shape_numel(shape));
    impl->shape = std::move(shape);
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape) { return make_tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, double value) {
    Tensor t = make_tensor(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size())
        throw DimensionError("tensor: " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor& Tensor::set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on) {
        impl_->grad.assign(impl_->data.size(), 0.0);
    } else {
        impl_->grad.clear();
        impl_->grad.shrink_to_fit();
    }
    return *this;
}

void Tensor::zero_grad() {
    if (impl_->requires_grad) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (impl_->data.size() != 1)
        throw ContractError("item() on tensor of shape " + shape_str(impl_->shape));
    return impl_->data[0];
}

namespace {
std::atomic<bool> g_debug_checks{false};
}

void set_debug_checks(bool on) { g_debug_checks.store(on, std::memory_order_relaxed); }
bool debug_checks() { return g_debug_checks.load(std::memory_order_relaxed); }

}  // namespace safer
