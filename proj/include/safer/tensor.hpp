#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace safer {

class Tape;

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized like data when requires_grad, else empty
    bool requires_grad = false;

    // Where this value was recorded; valid only while that tape is alive and
    // current. Leaves never record.
    const Tape* tape = nullptr;
    int node = -1;
};

// Dense row-major f64 tensor. Copies share storage (value-semantic handle);
// fresh tensors come from the factory functions or from ops.
class Tensor {
  public:
    Tensor() : impl_(std::make_shared<TensorImpl>()) {}

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);  // rank-0

    const Shape& shape() const { return impl_->shape; }
    std::size_t ndim() const { return impl_->shape.size(); }
    std::size_t size() const { return impl_->data.size(); }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    std::vector<double>& vec() { return impl_->data; }
    const std::vector<double>& vec() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on);

    // Gradient storage; null when requires_grad is off.
    double* grad() { return impl_->requires_grad ? impl_->grad.data() : nullptr; }
    const double* grad() const { return impl_->requires_grad ? impl_->grad.data() : nullptr; }
    const std::vector<double>& grad_vec() const { return impl_->grad; }
    void zero_grad();

    double item() const;  // value of a 1-element tensor

    bool recorded_on(const Tape* tape) const { return impl_->tape == tape && impl_->node >= 0; }
    int node() const { return impl_->node; }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;

    friend class Tape;
    friend Tensor make_tensor(Shape shape);
};

// Internal: uninitialized-value tensor for op outputs.
Tensor make_tensor(Shape shape);

// Debug-mode validator: when on, every forward/backward result is scanned for
// NaN/Inf and a DomainError names the offending op.
void set_debug_checks(bool on);
bool debug_checks();

}  // namespace safer
