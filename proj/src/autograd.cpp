#include "trustmae/autograd.hpp"

#include <unordered_set>

#include "trustmae/error.hpp"

namespace tmae {

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor& Node::ensure_grad() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
    return grad;
}

void Node::accumulate(const Tensor& g) {
    if (g.shape() != value.shape()) {
        throw ShapeError("gradient shape " + shape_str(g.shape()) + " != value shape " +
                         shape_str(value.shape()));
    }
    Tensor& dst = ensure_grad();
    double* d = dst.ptr();
    const double* s = g.ptr();
    for (std::size_t i = 0; i < g.numel(); ++i) d[i] += s[i];
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
    if (node_->grad.shape() == node_->value.shape()) return node_->grad;
    return Tensor(node_->value.shape(), 0.0);
}

void Var::zero_grad() {
    if (node_->grad.shape() == node_->value.shape()) node_->grad.fill(0.0);
}

Var Var::make(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool needs = false;
    if (GradMode::enabled()) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& in : inputs) node->inputs.push_back(in.node_);
        node->backward = std::move(backward);
    }
    return Var(std::move(node));
}

void Var::backward() const {
    if (node_->value.numel() != 1) {
        throw ShapeError("backward() requires a scalar, got " + shape_str(node_->value.shape()));
    }
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node* child = n->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    // Interior gradients start from zero on every pass; leaves accumulate.
    for (Node* n : order) {
        if (n->backward) n->ensure_grad().fill(0.0);
    }
    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward) n->backward(*n);
    }
}

}  // namespace tmae
