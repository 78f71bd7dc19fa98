#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ctg/tensor.hpp"

namespace ctg::autodiff {

// Context handed to an op's backward rule. Exposes the output gradient and
// accumulators for each input's gradient; inputs that do not require grad
// get a null accumulator and may be skipped.
class BackwardCtx {
public:
    std::span<const double> out_grad() const { return out_grad_; }
    std::span<const double> out_values() const { return out_values_; }
    std::span<const double> in_values(std::size_t i) const { return in_values_[i]; }
    // nullptr when input i does not require grad
    double* in_grad(std::size_t i) const { return in_grads_[i]; }
    std::size_t num_inputs() const { return in_grads_.size(); }

private:
    friend class Tape;
    std::span<const double> out_grad_;
    std::span<const double> out_values_;
    std::vector<std::span<const double>> in_values_;
    std::vector<double*> in_grads_;
};

using BackwardFn = std::function<void(const BackwardCtx&)>;

// Reverse-mode differentiation tape. Nodes are appended in topological order
// (an op's inputs always precede it); backward visits each recorded op
// exactly once, in reverse. One tape per generation task; a tape is
// single-threaded, independent tapes may run concurrently.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaf that participates in differentiation (parameter / input).
    Tensor input(Tensor t);
    Tensor input(Shape shape, std::vector<double> values) {
        return input(Tensor(std::move(shape), std::move(values)));
    }

    // Leaf treated as a constant: reachable ops still record it as a parent
    // but no gradient is ever accumulated for it.
    Tensor constant(Tensor t);
    Tensor constant(Shape shape, std::vector<double> values) {
        return constant(Tensor(std::move(shape), std::move(values)));
    }

    // Records one operation. `inputs` must live on this tape (detached
    // tensors are lifted to constants). The backward rule receives the
    // output gradient and accumulates local gradients into the inputs.
    Tensor record(std::string op, const std::vector<Tensor>& inputs, Shape out_shape,
                  std::vector<double> out_values, BackwardFn backward);

    // Populates gradients of every input tensor reachable from `root`.
    // Unreachable inputs end with all-zero gradients. Root must be scalar.
    void backward(const Tensor& root);

    std::size_t num_nodes() const { return nodes_.size(); }

    // Lifts a detached tensor onto this tape (constant); returns tensors
    // already on this tape unchanged.
    Tensor lift(const Tensor& t);

private:
    struct Node {
        std::string op;
        std::vector<int> parents;
        Shape shape;
        std::shared_ptr<std::vector<double>> values;
        std::shared_ptr<std::vector<double>> grad;  // allocated by backward
        bool requires_grad = false;
        BackwardFn backward;  // empty for leaves
    };

    Tensor attach(Tensor t, bool requires_grad);

    std::vector<Node> nodes_;
};

}  // namespace ctg::autodiff
