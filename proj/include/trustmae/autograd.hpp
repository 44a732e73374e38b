#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "trustmae/tensor.hpp"

namespace tmae {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the reverse-mode tape. `backward` reads `grad` and
// accumulates into the gradients of `inputs`.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<NodePtr> inputs;
    std::function<void(Node&)> backward;

    // Adds `g` into this node's gradient, allocating it on first use.
    void accumulate(const Tensor& g);
    Tensor& ensure_grad();
};

// Global switch for tape recording (thread-local).
class GradMode {
public:
    static bool enabled();
    static void set_enabled(bool on);
};

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Handle to a node in the computation graph.
class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }

    // Gradient accumulated by the last backward pass; zeros if none.
    Tensor grad() const;
    void zero_grad();

    // Seeds d(self)/d(self) = 1; self must hold a single element.
    void backward() const;

    const NodePtr& node() const { return node_; }

    // Builds an op result. Recording happens only when grad mode is on and
    // some input requires a gradient.
    static Var make(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

private:
    explicit Var(NodePtr node) : node_(std::move(node)) {}
    NodePtr node_;
};

// Named trainable tensor.
struct Parameter {
    std::string name;
    Var var;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor value, bool train = true)
        : name(std::move(n)), var(std::move(value), train), trainable(train) {}

    // Copies are deep: the copy owns a fresh graph leaf.
    Parameter(const Parameter& o) : name(o.name), var(o.value(), o.trainable), trainable(o.trainable) {}
    Parameter& operator=(const Parameter& o) {
        if (this != &o) {
            name = o.name;
            trainable = o.trainable;
            var = Var(o.value(), o.trainable);
        }
        return *this;
    }
    Parameter(Parameter&&) noexcept = default;
    Parameter& operator=(Parameter&&) noexcept = default;

    const Tensor& value() const { return var.value(); }
    Tensor& mutable_value() { return var.mutable_value(); }
    Tensor grad() const { return var.grad(); }
};

}  // namespace tmae
