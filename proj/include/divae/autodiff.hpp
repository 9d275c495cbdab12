#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "divae/tensor.hpp"

namespace divae {

// Reverse-mode autodiff over Tensor. A Var wraps a graph node; ops in ops.hpp
// build the graph when grad mode is on, and backward() replays it in reverse
// topological order. Leaf Vars (parameters) keep their accumulated grad until
// zero_grad().
struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily
    bool requires_grad = false;
    bool is_leaf = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // scatters node.grad into parents

    Tensor& ensure_grad() {
        if (!grad.defined()) grad = Tensor::zeros(value.shape());
        return grad;
    }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    // leaf constructors
    static Var leaf(Tensor value, bool requires_grad);
    static Var constant(Tensor value) { return leaf(std::move(value), false); }

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    Tensor& ensure_grad() { return node_->ensure_grad(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    int64_t dim(int i) const { return node_->value.dim(i); }
    int64_t size() const { return node_->value.size(); }

    std::shared_ptr<Node> node() const { return node_; }

    void zero_grad() {
        if (node_ && node_->grad.defined()) node_->grad.zero();
    }

private:
    std::shared_ptr<Node> node_;
};

// Thread-local grad mode, on by default. Sampling and evaluation run under
// NoGradGuard so no graph is recorded.
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev;
};

// Creates an op node. When grad mode is off or no parent requires grad, the
// result is a detached constant.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

// Runs reverse accumulation from a scalar loss (size-1 tensor).
void backward(const Var& loss);

}  // namespace divae
