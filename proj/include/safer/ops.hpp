#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "safer/tensor.hpp"

namespace safer {

// The primitive set of the engine. Shape rules:
//   add          same shape, or b's shape a trailing suffix of a's (bias add)
//   sub/mul/div  same shape
//   matmul       [..., m, k] x [..., k, n], equal leading dims
//   softmax      along `axis`
//   layernorm    along `axis`, gain/bias shaped [extent(axis)]
//   reshape      same element count
//   transpose    axis permutation
//   slice        [start, start+len) along `axis`
//   concat       equal shapes except along `axis`
//   mean/sum     full reduction to a rank-0 scalar
//   embedding_lookup  table [v, d] + integer indices -> [n, d]
//   cross_entropy_with_logits  logits [b, c] (or [c]) + labels -> scalar mean
enum class OpKind {
    matmul,
    add,
    mul,
    div,
    sub,
    neg,
    exp,
    log,
    gelu,
    softmax,
    layernorm,
    reshape,
    transpose,
    slice,
    concat,
    mean,
    sum,
    sqrt,
    sign,
    clamp,
    embedding_lookup,
    cross_entropy_with_logits,
};

const char* op_name(OpKind kind);

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor sign(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, std::size_t axis,
                 double eps = 1e-10);
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor transpose(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor embedding_lookup(const Tensor& table, const std::vector<std::int64_t>& indices);
Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<std::int64_t>& labels);

}  // namespace ops

// Attributes for the generic entry point; only the fields a kind consumes are
// read.
struct OpAttrs {
    std::size_t axis = 0;
    double lo = 0.0, hi = 0.0;
    double eps = 1e-10;
    Shape new_shape;
    std::vector<std::size_t> perm;
    std::size_t start = 0, len = 0;
    std::vector<std::int64_t> indices;  // embedding indices / class labels
};

Tensor forward_primitive(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

// backward() of the active tape, spelled as the module-level operation.
void backward(const Tensor& loss);

}  // namespace safer
