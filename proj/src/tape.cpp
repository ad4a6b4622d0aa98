#include "safer/tape.hpp"

#include <atomic>
#include <cmath>

#include "safer/errors.hpp"

namespace safer {

namespace {
thread_local Tape* t_current = nullptr;
std::atomic<std::uint64_t> g_backward_count{0};
}  // namespace

Tape* Tape::current() { return t_current; }

Tape::Scope::Scope(Tape& tape) : prev_(t_current) { t_current = &tape; }
Tape::Scope::~Scope() { t_current = prev_; }

int Tape::append(const char* op_name, std::size_t out_size, BackwardFn fn) {
    nodes_.push_back(Node{op_name, out_size, std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
}

Tape::GradRef Tape::ref_of(const Tensor& t) const {
    GradRef ref;
    if (t.recorded_on(this)) {
        ref.node = t.node();
    } else if (t.requires_grad()) {
        ref.leaf = t.impl();
    }
    return ref;
}

double* Tape::sink(const GradRef& ref) {
    if (ref.leaf) return ref.leaf->grad.data();
    if (ref.node >= 0) {
        auto& buf = node_grads_[static_cast<std::size_t>(ref.node)];
        if (buf.empty()) buf.assign(nodes_[static_cast<std::size_t>(ref.node)].out_size, 0.0);
        return buf.data();
    }
    return nullptr;
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.recorded_on(this)) throw ContractError("backward: loss is not recorded on this graph");

    node_grads_.assign(nodes_.size(), {});
    const auto loss_node = static_cast<std::size_t>(loss.node());
    node_grads_[loss_node] = {1.0};

    for (std::size_t i = loss_node + 1; i-- > 0;) {
        auto& grad = node_grads_[i];
        if (grad.empty()) continue;  // not on the path from the loss
        if (debug_checks()) {
            for (const double g : grad)
                if (!std::isfinite(g))
                    throw DomainError(std::string("backward: non-finite gradient at op ") + nodes_[i].op_name);
        }
        nodes_[i].backward(*this, grad.data());
        grad.clear();
        grad.shrink_to_fit();
    }
    node_grads_.clear();
    g_backward_count.fetch_add(1, std::memory_order_relaxed);
}

std::uint64_t backward_pass_count() { return g_backward_count.load(std::memory_order_relaxed); }

}  // namespace safer
