#pragma once

#include "hitrans/parameters.hpp"
#include "hitrans/tensor.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace hitrans {

template <typename Scalar>
struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::function<void()> backward;

    Tensor<Scalar>& grad_buffer() {
        if (grad.empty() && !value.empty()) grad = Tensor<Scalar>(value.shape());
        return grad;
    }
};

template <typename Scalar>
using Var = std::shared_ptr<Node<Scalar>>;

/// A parameter as seen by an op: its value plus an optional gradient sink.
template <typename Scalar>
struct ParamRef {
    const Tensor<Scalar>* value = nullptr;
    Tensor<Scalar>* grad = nullptr;

    explicit operator bool() const { return value != nullptr; }
    const Tensor<Scalar>& operator*() const { return *value; }
    const Tensor<Scalar>* operator->() const { return value; }
};

/// Records ops in execution order so gradients can be replayed in reverse.
///
/// A non-recording tape evaluates ops without keeping closures or activations,
/// which is what inference uses. Each forward pass owns its tape, so concurrent
/// inferences against one const model never share mutable state.
template <typename Scalar>
class Tape {
  public:
    Tape() = default;
    explicit Tape(Gradients<Scalar>* grads, ComponentSet trainable = ComponentSet::all())
        : grads_(grads), trainable_(trainable) {}

    bool recording() const { return grads_ != nullptr || force_recording_; }
    /// Record even without parameter gradients, e.g. to differentiate w.r.t. inputs.
    void force_recording(bool on) { force_recording_ = on; }

    Var<Scalar> leaf(Tensor<Scalar> value, bool requires_grad = false) const {
        auto node = std::make_shared<Node<Scalar>>();
        node->value = std::move(value);
        node->requires_grad = requires_grad && recording();
        return node;
    }

    /// Gradient buffer for parameter `id`, or null when it is frozen or not being differentiated.
    Tensor<Scalar>* grad_sink(std::size_t id, const Parameter<Scalar>& p) const {
        if (grads_ && p.trainable && trainable_.contains(p.component)) return &(*grads_)[id];
        return nullptr;
    }

    /// Creates the output node of an op. `backward` is kept only when some input needs a gradient.
    Var<Scalar> emit(Tensor<Scalar> value, bool needs_grad, std::function<void(Node<Scalar>&)> backward) {
        auto node = std::make_shared<Node<Scalar>>();
        node->value = std::move(value);
        if (recording() && needs_grad) {
            node->requires_grad = true;
            Node<Scalar>* raw = node.get();
            node->backward = [raw, fn = std::move(backward)]() { fn(*raw); };
            nodes_.push_back(node);
        }
        return node;
    }

    /// Seeds d(root)/d(root) with `seed` (ones when empty) and runs every recorded closure in reverse.
    void backward(const Var<Scalar>& root, const Tensor<Scalar>& seed = {}) {
        if (!root->requires_grad) return;
        auto& g = root->grad_buffer();
        if (seed.empty()) {
            g.values().setOnes();
        } else {
            g.values() += seed.values();
        }
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node<Scalar>& n = **it;
            if (!n.grad.empty() && n.backward) n.backward();
        }
        nodes_.clear();
    }

  private:
    Gradients<Scalar>* grads_ = nullptr;
    ComponentSet trainable_ = ComponentSet::all();
    bool force_recording_ = false;
    std::vector<Var<Scalar>> nodes_;
};

template <typename Scalar>
bool needs_grad(const Var<Scalar>& v) {
    return v && v->requires_grad;
}
template <typename Scalar>
bool needs_grad(const ParamRef<Scalar>& p) {
    return p.grad != nullptr;
}

}  // namespace hitrans
