#include "safer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "safer/errors.hpp"
#include "safer/kernels.hpp"
#include "safer/tape.hpp"

namespace safer {

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::mul: return "mul";
        case OpKind::div: return "div";
        case OpKind::sub: return "sub";
        case OpKind::neg: return "neg";
        case OpKind::exp: return "exp";
        case OpKind::log: return "log";
        case OpKind::gelu: return "gelu";
        case OpKind::softmax: return "softmax";
        case OpKind::layernorm: return "layernorm";
        case OpKind::reshape: return "reshape";
        case OpKind::transpose: return "transpose";
        case OpKind::slice: return "slice";
        case OpKind::concat: return "concat";
        case OpKind::mean: return "mean";
        case OpKind::sum: return "sum";
        case OpKind::sqrt: return "sqrt";
        case OpKind::sign: return "sign";
        case OpKind::clamp: return "clamp";
        case OpKind::embedding_lookup: return "embedding_lookup";
        case OpKind::cross_entropy_with_logits: return "cross_entropy_with_logits";
    }
    return "?";
}

namespace {

using Impl = std::shared_ptr<TensorImpl>;

void check_out(const char* name, const Tensor& out) {
    if (!debug_checks()) return;
    for (const double v : out.vec())
        if (!std::isfinite(v)) throw DomainError(std::string(name) + ": produced non-finite value");
}

[[noreturn]] void shape_error(const char* name, const Tensor& a, const Tensor& b) {
    throw DimensionError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// (outer, extent, inner) view of `shape` around `axis`.
struct AxisView {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const char* name, const Shape& shape, std::size_t axis) {
    if (axis >= shape.size())
        throw DimensionError(std::string(name) + ": axis " + std::to_string(axis) + " out of range for " +
                             shape_str(shape));
    AxisView v;
    for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
    v.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
    return v;
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    const std::size_t off = big.size() - small.size();
    for (std::size_t i = 0; i < small.size(); ++i)
        if (small[i] != big[off + i]) return false;
    return true;
}

std::vector<double> permute_raw(const double* src, const Shape& in_shape,
                                const std::vector<std::size_t>& perm) {
    const std::size_t nd = in_shape.size();
    Shape out_shape(nd);
    for (std::size_t i = 0; i < nd; ++i) out_shape[i] = in_shape[perm[i]];

    std::vector<std::size_t> in_strides(nd, 1);
    for (std::size_t i = nd; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
    // stride of output axis i in the input buffer
    std::vector<std::size_t> step(nd);
    for (std::size_t i = 0; i < nd; ++i) step[i] = in_strides[perm[i]];

    std::vector<double> out(shape_numel(in_shape));
    std::vector<std::size_t> idx(nd, 0);
    std::size_t src_off = 0;
    for (std::size_t o = 0; o < out.size(); ++o) {
        out[o] = src[src_off];
        for (std::size_t d = nd; d-- > 0;) {
            if (++idx[d] < out_shape[d]) {
                src_off += step[d];
                break;
            }
            idx[d] = 0;
            src_off -= step[d] * (out_shape[d] - 1);
        }
    }
    return out;
}

// GELU tanh approximation constants; 0.044715 is fixed by convention.
constexpr double kGeluC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// Elementwise unary helpers share this recording pattern: dx += og * factor(i).
template <typename Factor>
void record_unary(const char* name, Tensor& out, const Tensor& x, Factor factor) {
    Tape* tape = Tape::current();
    if (!tape) return;
    auto rx = tape->ref_of(x);
    if (!rx.wanted()) return;
    const std::size_t n = out.size();
    const int id = tape->append(name, n, [rx, factor, n](Tape& t, const double* og) {
        if (double* s = t.sink(rx)) {
            for (std::size_t i = 0; i < n; ++i) s[i] += og[i] * factor(i);
        }
    });
    tape->mark_output(out, id);
}

}  // namespace

namespace ops {

Tensor add(const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    if (!same && !is_suffix(b.shape(), a.shape())) shape_error("add", a, b);

    Tensor out = make_tensor(a.shape());
    const auto& K = kernels::active();
    const std::size_t n = a.size(), nb = b.size();
    if (same || nb == n) {
        K.add(a.data(), b.data(), out.data(), n);
    } else {
        if (nb == 0) throw DimensionError("add: empty bias operand");
        for (std::size_t off = 0; off < n; off += nb) K.add(a.data() + off, b.data(), out.data() + off, nb);
    }
    check_out("add", out);

    if (Tape* tape = Tape::current()) {
        auto ra = tape->ref_of(a);
        auto rb = tape->ref_of(b);
        if (ra.wanted() || rb.wanted()) {
            const int id = tape->append("add", n, [ra, rb, n, nb](Tape& t, const double* og) {
                const auto& k = kernels::active();
                if (double* s = t.sink(ra)) k.axpy(1.0, og, s, n);
                if (double* s = t.sink(rb)) {
                    for (std::size_t off = 0; off < n; off += nb) k.axpy(1.0, og + off, s, nb);
                }
            });
            tape->mark_output(out, id);
        }
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("sub", a, b);
    Tensor out = make_tensor(a.shape());
    const std::size_t n = a.size();
    kernels::active().sub(a.data(), b.data(), out.data(), n);
    check_out("sub", out);

    if (Tape* tape = Tape::current()) {
        auto ra = tape->ref_of(a);
        auto rb = tape->ref_of(b);
        if (ra.wanted() || rb.wanted()) {
            const int id = tape->append("sub", n, [ra, rb, n](Tape& t, const double* og) {
                const auto& k = kernels::active();
                if (double* s = t.sink(ra)) k.axpy(1.0, og, s, n);
                if (double* s = t.sink(rb)) k.axpy(-1.0, og, s, n);
            });
            tape->mark_output(out, id);
        }
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("mul", a, b);
    Tensor out = make_tensor(a.shape());
    const std::size_t n = a.size();
    kernels::active().mul(a.data(), b.data(), out.data(), n);
    check_out("mul", out);

    if (Tape* tape = Tape::current()) {
        auto ra = tape->ref_of(a);
        auto rb = tape->ref_of(b);
        if (ra.wanted() || rb.wanted()) {
            Impl ia = a.impl(), ib = b.impl();
            const int id = tape->append("mul", n, [ra, rb, ia, ib, n](Tape& t, const double* og) {
                if (double* s = t.sink(ra)) {
                    const double* bv = ib->data.data();
                    for (std::size_t i = 0; i < n; ++i) s[i] += og[i] * bv[i];
                }
                if (double* s = t.sink(rb)) {
                    const double* av = ia->data.data();
                    for (std::size_t i = 0; i < n; ++i) s[i] += og[i] * av[i];
                }
            });
            tape->mark_output(out, id);
        }
    }
    return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("div", a, b);
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i)
        if (b.data()[i] == 0.0) throw DomainError("div: zero divisor");
    Tensor out = make_tensor(a.shape());
    kernels::active().div(a.data(), b.data(), out.data(), n);
    check_out("div", out);

    if (Tape* tape = Tape::current()) {
        auto ra = tape->ref_of(a);
        auto rb = tape->ref_of(b);
        if (ra.wanted() || rb.wanted()) {
            Impl ia = a.impl(), ib = b.impl();
            const int id = tape->append("div", n, [ra, rb, ia, ib, n](Tape& t, const double* og) {
                const double* av = ia->data.data();
                const double* bv = ib->data.data();
                if (double* s = t.sink(ra)) {
                    for (std::size_t i = 0; i < n; ++i) s[i] += og[i] / bv[i];
                }
                if (double* s = t.sink(rb)) {
                    for (std::size_t i = 0; i < n; ++i) s[i] -= og[i] * av[i] / (bv[i] * bv[i]);
                }
            });
            tape->mark_output(out, id);
        }
    }
    return out;
}

Tensor neg(const Tensor& x) {
    Tensor out = make_tensor(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = -x.data()[i];
    record_unary("neg", out, x, [](std::size_t) { return -1.0; });
    return out;
}

Tensor exp(const Tensor& x) {
    Tensor out = make_tensor(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::exp(x.data()[i]);
    check_out("exp", out);
    Impl io = out.impl();
    record_unary("exp", out, x, [io](std::size_t i) { return io->data[i]; });
    return out;
}

Tensor log(const Tensor& x) {
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i)
        if (x.data()[i] <= 0.0) throw DomainError("log: non-positive input");
    Tensor out = make_tensor(x.shape());
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::log(x.data()[i]);
    check_out("log", out);
    Impl ix = x.impl();
    record_unary("log", out, x, [ix](std::size_t i) { return 1.0 / ix->data[i]; });
    return out;
}

Tensor sqrt(const Tensor& x) {
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i)
        if (x.data()[i] < 0.0) throw DomainError("sqrt: negative input");
    Tensor out = make_tensor(x.shape());
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::sqrt(x.data()[i]);
    Impl io = out.impl();
    record_unary("sqrt", out, x, [io](std::size_t i) { return 0.5 / io->data[i]; });
    return out;
}

Tensor sign(const Tensor& x) {
    Tensor out = make_tensor(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        out.data()[i] = (v > 0.0) ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
    }
    // Zero derivative almost everywhere.
    record_unary("sign", out, x, [](std::size_t) { return 0.0; });
    return out;
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (lo > hi) throw DomainError("clamp: lo > hi");
    Tensor out = make_tensor(x.shape());
    const std::size_t n = x.size();
    kernels::active().clamp(x.data(), lo, hi, out.data(), n);
    Impl ix = x.impl();
    record_unary("clamp", out, x, [ix, lo, hi](std::size_t i) {
        const double v = ix->data[i];
        return (v >= lo && v <= hi) ? 1.0 : 0.0;
    });
    return out;
}

Tensor gelu(const Tensor& x) {
    // tanh approximation; derivative below is exact for this approximation.
    Tensor out = make_tensor(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        const double u = kGeluC * (v + kGeluA * v * v * v);
        out.data()[i] = 0.5 * v * (1.0 + std::tanh(u));
    }
    check_out("gelu", out);
    Impl ix = x.impl();
    record_unary("gelu", out, x, [ix](std::size_t i) {
        const double v = ix->data[i];
        const double u = kGeluC * (v + kGeluA * v * v * v);
        const double th = std::tanh(u);
        const double sech2 = 1.0 - th * th;
        return 0.5 * (1.0 + th) + 0.5 * v * sech2 * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    });
    return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    const AxisView v = axis_view("softmax", x.shape(), axis);
    Tensor out = make_tensor(x.shape());
    const double* in = x.data();
    double* o = out.data();
    for (std::size_t a = 0; a < v.outer; ++a) {
        for (std::size_t c = 0; c < v.inner; ++c) {
            const std::size_t base = a * v.extent * v.inner + c;
            double mx = in[base];
            for (std::size_t e = 1; e < v.extent; ++e) mx = std::max(mx, in[base + e * v.inner]);
            double denom = 0.0;
            for (std::size_t e = 0; e < v.extent; ++e) {
                const double ev = std::exp(in[base + e * v.inner] - mx);
                o[base + e * v.inner] = ev;
                denom += ev;
            }
            for (std::size_t e = 0; e < v.extent; ++e) o[base + e * v.inner] /= denom;
        }
    }
    check_out("softmax", out);

    if (Tape* tape = Tape::current()) {
        auto rx = tape->ref_of(x);
        if (rx.wanted()) {
            Impl io = out.impl();
            const int id = tape->append("softmax", out.size(), [rx, io, v](Tape& t, const double* og) {
                double* s = t.sink(rx);
                if (!s) return;
                const double* sm = io->data.data();
                for (std::size_t a = 0; a < v.outer; ++a) {
                    for (std::size_t c = 0; c < v.inner; ++c) {
                        const std::size_t base = a * v.extent * v.inner + c;
                        double dotv = 0.0;
                        for (std::size_t e = 0; e < v.extent; ++e) {
                            const std::size_t k = base + e * v.inner;
                            dotv += og[k] * sm[k];
                        }
                        for (std::size_t e = 0; e < v.extent; ++e) {
                            const std::size_t k = base + e * v.inner;
                            s[k] += sm[k] * (og[k] - dotv);
                        }
                    }
                }
            });
            tape->mark_output(out, id);
        }
    }
    return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, std::size_t axis, double eps) {
    const AxisView v = axis_view("layernorm", x.shape(), axis);
    const Shape affine_shape{v.extent};
    if (gain.shape() != affine_shape || bias.shape() != affine_shape)
        throw DimensionError("layernorm: affine params must be shaped " + shape_str(affine_shape) +
                             ", got gain " + shape_str(gain.shape()) + " bias " + shape_str(bias.shape()));
    if (eps <= 0.0) throw DomainError("layernorm: eps must be positive");

    Tensor out = make_tensor(x.shape());
    // Cache x-hat and inverse sigma per lane for the backward pass.
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_sigma = std::make_shared<std::vector<double>>(v.outer * v.inner);

    const double* in = x.data();
    const double* gv = gain.data();
    const double* bv = bias.data();
    double* o = out.data();
    const double inv_n = 1.0 / static_cast<double>(v.extent);
    for (std::size_t a = 0; a < v.outer; ++a) {
        for (std::size_t c = 0; c < v.inner; ++c) {
            const std::size_t base = a * v.extent * v.inner + c;
            double mu = 0.0;
            for (std::size_t e = 0; e < v.extent; ++e) mu += in[base + e * v.inner];
            mu *= inv_n;
            double var = 0.0;
            for (std::size_t e = 0; e < v.extent; ++e) {
                const double d = in[base + e * v.inner] - mu;
                var += d * d;
            }
            var *= inv_n;
            const double is = 1.0 / std::sqrt(var + eps);
            (*inv_sigma)[a * v.inner + c] = is;
            for (std::size_t e = 0; e < v.extent; ++e) {
                const std::size_t k = base + e * v.inner;
                const double xh = (in[k] - mu) * is;
                (*xhat)[k] = xh;
                o[k] = xh * gv[e] + bv[e];
            }
        }
    }
    check_out("layernorm", out);

    if (Tape* tape = Tape::current()) {
        auto rx = tape->ref_of(x);
        auto rg = tape->ref_of(gain);
        auto rb = tape->ref_of(bias);
        if (rx.wanted() || rg.wanted() || rb.wanted()) {
            Impl ig = gain.impl();
            const int id = tape->append(
                "layernorm", out.size(), [rx, rg, rb, ig, xhat, inv_sigma, v](Tape& t, const double* og) {
                    const double* gv = ig->data.data();
                    const double inv_n = 1.0 / static_cast<double>(v.extent);
                    double* sx = t.sink(rx);
                    double* sg = t.sink(rg);
                    double* sb = t.sink(rb);
                    for (std::size_t a = 0; a < v.outer; ++a) {
                        for (std::size_t c = 0; c < v.inner; ++c) {
                            const std::size_t base = a * v.extent * v.inner + c;
                            const double is = (*inv_sigma)[a * v.inner + c];
                            if (sg || sb) {
                                for (std::size_t e = 0; e < v.extent; ++e) {
                                    const std::size_t k = base + e * v.inner;
                                    if (sg) sg[e] += og[k] * (*xhat)[k];
                                    if (sb) sb[e] += og[k];
                                }
                            }
                            if (sx) {
                                double m1 = 0.0, m2 = 0.0;  // mean(g), mean(g*xhat)
                                for (std::size_t e = 0; e < v.extent; ++e) {
                                    const std::size_t k = base + e * v.inner;
                                    const double g = og[k] * gv[e];
                                    m1 += g;
                                    m2 += g * (*xhat)[k];
                                }
                                m1 *= inv_n;
                                m2 *= inv_n;
                                for (std::size_t e = 0; e < v.extent; ++e) {
                                    const std::size_t k = base + e * v.inner;
                                    const double g = og[k] * gv[e];
                                    sx[k] += is * (g - m1 - (*xhat)[k] * m2);
                                }
                            }
                        }
                    }
                });
            tape->mark_output(out, id);
        }
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() != sa.size()) shape_error("matmul", a, b);
    const std::size_t nd = sa.size();
    for (std::size_t i = 0; i + 2 < nd; ++i)
        if (sa[i] != sb[i]) shape_error("matmul", a, b);
    const std::size_t m = sa[nd - 2], k = sa[nd - 1];
    const std::size_t kb = sb[nd - 2], n = sb[nd - 1];
    if (k != kb) shape_error("matmul", a, b);
    std::size_t batch = 1;
    for (std::size_t i = 0; i + 2 < nd; ++i) batch *= sa[i];

    Shape out_shape(sa);
    out_shape[nd - 2] = m;
    out_shape[nd - 1] = n;
    Tensor out = make_tensor(out_shape);  // zero-initialized; gemm accumulates
    const auto& K = kernels::active();
    for (std::size_t s = 0; s < batch; ++s)
        K.gemm_nn(m, k, n, a.data() + s * m * k, b.data() + s * k * n, out.data() + s * m * n);
    check_out("matmul", out);

    if (Tape* tape = Tape::current()) {
        auto ra = tape->ref_of(a);
        auto rb = tape->ref_of(b);
        if (ra.wanted() || rb.wanted()) {
            Impl ia = a.impl(), ib = b.impl();
            const int id = tape->append(
                "matmul", out.size(), [ra, rb, ia, ib, batch, m, k, n](Tape& t, const double* og) {
                    const auto& kr = kernels::active();
                    if (double* s = t.sink(ra)) {  // dA += dC * B^T
                        for (std::size_t bi = 0; bi < batch; ++bi)
                            kr.gemm_nt(m, n, k, og + bi * m * n, ib->data.data() + bi * k * n, s + bi * m * k);
                    }
                    if (double* s = t.sink(rb)) {  // dB += A^T * dC
                        for (std::size_t bi = 0; bi < batch; ++bi)
                            kr.gemm_tn(k, m, n, ia->data.data() + bi * m * k, og + bi * m * n, s + bi * k * n);
                    }
                });
            tape->mark_output(out, id);
        }
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.size())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    Tensor out = make_tensor(std::move(new_shape));
    std::copy(x.vec().begin(), x.vec().end(), out.vec().begin());
    record_unary("reshape", out, x, [](std::size_t) { return 1.0; });
    return out;
}

Tensor transpose(const Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t nd = x.ndim();
    if (perm.size() != nd) throw DimensionError("transpose: permutation rank mismatch for " + shape_str(x.shape()));
    std::vector<bool> seen(nd, false);
    for (const std::size_t p : perm) {
        if (p >= nd || seen[p]) throw DimensionError("transpose: invalid permutation");
        seen[p] = true;
    }
    Shape out_shape(nd);
    for (std::size_t i = 0; i < nd; ++i) out_shape[i] = x.shape()[perm[i]];

    Tensor out = make_tensor(out_shape);
    out.vec() = permute_raw(x.data(), x.shape(), perm);

    if (Tape* tape = Tape::current()) {
        auto rx = tape->ref_of(x);
        if (rx.wanted()) {
            std::vector<std::size_t> inv(nd);
            for (std::size_t i = 0; i < nd; ++i) inv[perm[i]] = i;
            const std::size_t n = out.size();
            const int id = tape->append("transpose", n, [rx, inv, out_shape, n](Tape& t, const double* og) {
                if (double* s = t.sink(rx)) {
                    const std::vector<double> gi = permute_raw(og, out_shape, inv);
                    kernels::active().axpy(1.0, gi.data(), s, n);
                }
            });
            tape->mark_output(out, id);
        }
    }
    return out;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
    const AxisView v = axis_view("slice", x.shape(), axis);
    if (start + len > v.extent || len == 0)
        throw DimensionError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                             ") out of bounds for axis extent " + std::to_string(v.extent));
    Shape out_shape(x.shape());
    out_shape[axis] = len;
    Tensor out = make_tensor(out_shape);
    const std::size_t row = v.inner;
    for (std::size_t a = 0; a < v.outer; ++a) {
        const double* src = x.data() + (a * v.extent + start) * row;
        double* dst = out.data() + a * len * row;
        std::copy(src, src + len * row, dst);
    }

    if (Tape* tape = Tape::current()) {
        auto rx = tape->ref_of(x);
        if (rx.wanted()) {
            const int id =
                tape->append("slice", out.size(), [rx, v, start, len, row](Tape& t, const double* og) {
                    if (double* s = t.sink(rx)) {
                        for (std::size_t a = 0; a < v.outer; ++a)
                            kernels::active().axpy(1.0, og + a * len * row,
                                                   s + (a * v.extent + start) * row, len * row);
                    }
                });
            tape->mark_output(out, id);
        }
    }
    return out;
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != first.size()) shape_error("concat", parts[0], p);
        for (std::size_t i = 0; i < first.size(); ++i)
            if (i != axis && p.shape()[i] != first[i]) shape_error("concat", parts[0], p);
        total += p.shape()[axis];
    }
    Shape out_shape(first);
    out_shape[axis] = total;
    Tensor out = make_tensor(out_shape);
    const AxisView v = axis_view("concat", out_shape, axis);

    std::size_t offset = 0;
    std::vector<std::size_t> offsets;
    std::vector<std::size_t> extents;
    for (const Tensor& p : parts) {
        const std::size_t ext = p.shape()[axis];
        offsets.push_back(offset);
        extents.push_back(ext);
        for (std::size_t a = 0; a < v.outer; ++a) {
            const double* src = p.data() + a * ext * v.inner;
            double* dst = out.data() + (a * v.extent + offset) * v.inner;
            std::copy(src, src + ext * v.inner, dst);
        }
        offset += ext;
    }

    if (Tape* tape = Tape::current()) {
        std::vector<Tape::GradRef> refs;
        bool any = false;
        for (const Tensor& p : parts) {
            refs.push_back(tape->ref_of(p));
            any = any || refs.back().wanted();
        }
        if (any) {
            const int id = tape->append(
                "concat", out.size(), [refs, offsets, extents, v](Tape& t, const double* og) {
                    for (std::size_t pi = 0; pi < refs.size(); ++pi) {
                        double* s = t.sink(refs[pi]);
                        if (!s) continue;
                        const std::size_t ext = extents[pi];
                        for (std::size_t a = 0; a < v.outer; ++a)
                            kernels::active().axpy(1.0, og + (a * v.extent + offsets[pi]) * v.inner,
                                                   s + a * ext * v.inner, ext * v.inner);
                    }
                });
            tape->mark_output(out, id);
        }
    }
    return out;
}

Tensor sum(const Tensor& x) {
    Tensor out = Tensor::scalar(kernels::active().sum(x.data(), x.size()));
    check_out("sum", out);
    if (Tape* tape = Tape::current()) {
        auto rx = tape->ref_of(x);
        if (rx.wanted()) {
            const std::size_t n = x.size();
            const int id = tape->append("sum", 1, [rx, n](Tape& t, const double* og) {
                if (double* s = t.sink(rx)) {
                    const double g = og[0];
                    for (std::size_t i = 0; i < n; ++i) s[i] += g;
                }
            });
            tape->mark_output(out, id);
        }
    }
    return out;
}

Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw DimensionError("mean: empty tensor");
    const double inv = 1.0 / static_cast<double>(x.size());
    Tensor out = Tensor::scalar(kernels::active().sum(x.data(), x.size()) * inv);
    check_out("mean", out);
    if (Tape* tape = Tape::current()) {
        auto rx = tape->ref_of(x);
        if (rx.wanted()) {
            const std::size_t n = x.size();
            const int id = tape->append("mean", 1, [rx, n, inv](Tape& t, const double* og) {
                if (double* s = t.sink(rx)) {
                    const double g = og[0] * inv;
                    for (std::size_t i = 0; i < n; ++i) s[i] += g;
                }
            });
            tape->mark_output(out, id);
        }
    }
    return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<std::int64_t>& indices) {
    if (table.ndim() != 2) throw DimensionError("embedding_lookup: table must be rank 2, got " + shape_str(table.shape()));
    const std::size_t rows = table.shape()[0], dim = table.shape()[1];
    for (const std::int64_t idx : indices)
        if (idx < 0 || static_cast<std::size_t>(idx) >= rows)
            throw DomainError("embedding_lookup: index " + std::to_string(idx) + " out of range for " +
                              std::to_string(rows) + " rows");
    Tensor out = make_tensor({indices.size(), dim});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const double* src = table.data() + static_cast<std::size_t>(indices[i]) * dim;
        std::copy(src, src + dim, out.data() + i * dim);
    }

    if (Tape* tape = Tape::current()) {
        auto rt = tape->ref_of(table);
        if (rt.wanted()) {
            const int id = tape->append("embedding_lookup", out.size(), [rt, indices, dim](Tape& t, const double* og) {
                if (double* s = t.sink(rt)) {
                    for (std::size_t i = 0; i < indices.size(); ++i)
                        kernels::active().axpy(1.0, og + i * dim, s + static_cast<std::size_t>(indices[i]) * dim, dim);
                }
            });
            tape->mark_output(out, id);
        }
    }
    return out;
}

Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<std::int64_t>& labels) {
    Shape s = logits.shape();
    std::size_t batch = 1, classes = 0;
    if (s.size() == 1) {
        classes = s[0];
    } else if (s.size() == 2) {
        batch = s[0];
        classes = s[1];
    } else {
        throw DimensionError("cross_entropy_with_logits: logits must be rank 1 or 2, got " + shape_str(s));
    }
    if (labels.size() != batch)
        throw DimensionError("cross_entropy_with_logits: " + std::to_string(labels.size()) + " labels for batch " +
                             std::to_string(batch));
    for (const std::int64_t l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= classes)
            throw DomainError("cross_entropy_with_logits: label " + std::to_string(l) + " out of range for " +
                              std::to_string(classes) + " classes");

    // Mean over the batch of (logsumexp - logit[label]); cache the softmax for
    // the backward pass.
    auto probs = std::make_shared<std::vector<double>>(batch * classes);
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        const double* row = logits.data() + b * classes;
        double mx = row[0];
        for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
        double denom = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            const double ev = std::exp(row[c] - mx);
            (*probs)[b * classes + c] = ev;
            denom += ev;
        }
        for (std::size_t c = 0; c < classes; ++c) (*probs)[b * classes + c] /= denom;
        total += (mx + std::log(denom)) - row[static_cast<std::size_t>(labels[b])];
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(batch));
    check_out("cross_entropy_with_logits", out);

    if (Tape* tape = Tape::current()) {
        auto rl = tape->ref_of(logits);
        if (rl.wanted()) {
            const int id = tape->append(
                "cross_entropy_with_logits", 1, [rl, probs, labels, batch, classes](Tape& t, const double* og) {
                    if (double* s = t.sink(rl)) {
                        const double g = og[0] / static_cast<double>(batch);
                        for (std::size_t b = 0; b < batch; ++b) {
                            for (std::size_t c = 0; c < classes; ++c)
                                s[b * classes + c] += g * (*probs)[b * classes + c];
                            s[b * classes + static_cast<std::size_t>(labels[b])] -= g;
                        }
                    }
                });
            tape->mark_output(out, id);
        }
    }
    return out;
}

}  // namespace ops

Tensor forward_primitive(OpKind kind, std::span<const Tensor> in, const OpAttrs& attrs) {
    const auto want = [&](std::size_t n) {
        if (in.size() != n)
            throw DimensionError(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                                 " inputs, got " + std::to_string(in.size()));
    };
    switch (kind) {
        case OpKind::matmul: want(2); return ops::matmul(in[0], in[1]);
        case OpKind::add: want(2); return ops::add(in[0], in[1]);
        case OpKind::mul: want(2); return ops::mul(in[0], in[1]);
        case OpKind::div: want(2); return ops::div(in[0], in[1]);
        case OpKind::sub: want(2); return ops::sub(in[0], in[1]);
        case OpKind::neg: want(1); return ops::neg(in[0]);
        case OpKind::exp: want(1); return ops::exp(in[0]);
        case OpKind::log: want(1); return ops::log(in[0]);
        case OpKind::gelu: want(1); return ops::gelu(in[0]);
        case OpKind::softmax: want(1); return ops::softmax(in[0], attrs.axis);
        case OpKind::layernorm: want(3); return ops::layernorm(in[0], in[1], in[2], attrs.axis, attrs.eps);
        case OpKind::reshape: want(1); return ops::reshape(in[0], attrs.new_shape);
        case OpKind::transpose: want(1); return ops::transpose(in[0], attrs.perm);
        case OpKind::slice: want(1); return ops::slice(in[0], attrs.axis, attrs.start, attrs.len);
        case OpKind::concat: return ops::concat(in, attrs.axis);
        case OpKind::mean: want(1); return ops::mean(in[0]);
        case OpKind::sum: want(1); return ops::sum(in[0]);
        case OpKind::sqrt: want(1); return ops::sqrt(in[0]);
        case OpKind::sign: want(1); return ops::sign(in[0]);
        case OpKind::clamp: want(1); return ops::clamp(in[0], attrs.lo, attrs.hi);
        case OpKind::embedding_lookup: want(1); return ops::embedding_lookup(in[0], attrs.indices);
        case OpKind::cross_entropy_with_logits:
            want(1);
            return ops::cross_entropy_with_logits(in[0], attrs.indices);
    }
    throw ContractError("forward_primitive: unknown op kind");
}

void backward(const Tensor& loss) {
    Tape* tape = Tape::current();
    if (!tape) throw ContractError("backward: no graph is being recorded");
    tape->backward(loss);
}

}  // namespace safer
