#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "safer/tensor.hpp"

namespace safer {

// Reverse-mode tape. Nodes are appended in forward order; backward() walks
// them in exact reverse append order, accumulating gradients into node
// buffers (transient, per backward call) and leaf tensors' grad storage
// (persistent and additive until zeroed).
//
// One tape per thread may be current at a time; independent tapes on disjoint
// tensors may run on different threads.
class Tape {
  public:
    // Gradient destination of one op input.
    struct GradRef {
        int node = -1;                          // intermediate recorded on this tape
        std::shared_ptr<TensorImpl> leaf;       // requires-grad leaf
        bool wanted() const { return node >= 0 || leaf != nullptr; }
    };

    using BackwardFn = std::function<void(Tape&, const double* out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Records a node; returns its id. `op_name` is kept for diagnostics.
    int append(const char* op_name, std::size_t out_size, BackwardFn fn);

    // Resolves the accumulation buffer for a GradRef, allocating (zeroed)
    // node buffers on first touch. Returns null when no gradient is wanted.
    double* sink(const GradRef& ref);

    // Seeds d(loss)/d(loss) = 1 and propagates. Loss must be a 1-element
    // tensor recorded on this tape.
    void backward(const Tensor& loss);

    // GradRef for using `t` as an op input under this tape.
    GradRef ref_of(const Tensor& t) const;

    std::size_t node_count() const { return nodes_.size(); }

    void mark_output(Tensor& t, int node) const {
        t.impl_->tape = this;
        t.impl_->node = node;
    }

    static Tape* current();

    // RAII: makes a tape current for the enclosing scope.
    class Scope {
      public:
        explicit Scope(Tape& tape);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

      private:
        Tape* prev_;
    };

  private:
    struct Node {
        const char* op_name;
        std::size_t out_size;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> node_grads_;  // parallel to nodes_ during backward
};

// Process-wide count of completed backward passes (weight and input passes
// alike); the trainer's cost accounting reads deltas of this.
std::uint64_t backward_pass_count();

}  // namespace safer
