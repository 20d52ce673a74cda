#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "d2ae/autodiff/parameter.hpp"
#include "d2ae/autodiff/tensor.hpp"

namespace d2ae {

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

    const Tensor<T>& value() const { return graph_->value(id_); }
    const Shape& shape() const { return value().shape(); }
    std::size_t id() const noexcept { return id_; }
    Graph<T>& graph() const noexcept { return *graph_; }
    bool valid() const noexcept { return graph_ != nullptr; }

private:
    Graph<T>* graph_ = nullptr;
    std::size_t id_ = 0;
};

/// Tape of primitive applications in forward execution order.
///
/// Gradients can be cut two ways: `stop_gradient` removes an edge from the tape, and the
/// group set passed to `backward` decides which parameters receive the result. A
/// non-recording graph keeps only forward values (inference).
template <typename T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self, const Tensor<T>& grad_out)>;

    explicit Graph(bool record = true) : recording_(record) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const noexcept { return recording_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    Var<T> constant(Tensor<T> v) {
        Node n;
        n.op = "constant";
        n.owned = std::move(v);
        return push(std::move(n));
    }

    /// Constant bound by reference; the tensor must outlive the graph.
    Var<T> view(const Tensor<T>& v) {
        Node n;
        n.op = "view";
        n.external = &v;
        return push(std::move(n));
    }

    /// Differentiable leaf whose gradient can be read back with `grad()`.
    Var<T> input(Tensor<T> v) {
        Node n;
        n.op = "input";
        n.owned = std::move(v);
        n.requires_grad = recording_;
        n.is_input = recording_;
        return push(std::move(n));
    }

    Var<T> param(Parameter<T>& p) {
        Node n;
        n.op = "param";
        n.external = &p.value;
        if (recording_) {
            n.param = &p;
            n.requires_grad = true;
        }
        return push(std::move(n));
    }

    /// Appends the result of a primitive. Rejects non-finite output.
    Var<T> record(const char* op, Tensor<T> out, std::vector<std::size_t> parents, BackwardFn fn) {
        if (!out.all_finite()) {
            throw NonFiniteError(std::string(op) + ": produced non-finite value");
        }
        Node n;
        n.op = op;
        n.owned = std::move(out);
        if (recording_) {
            for (auto p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
            if (n.requires_grad) {
                n.parents = std::move(parents);
                n.backward = std::move(fn);
            }
        }
        return push(std::move(n));
    }

    const Tensor<T>& value(std::size_t id) const {
        const Node& n = nodes_.at(id);
        return n.external ? *n.external : n.owned;
    }

    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    /// During backward: whether a gradient for this node leads anywhere useful.
    bool wants_grad(std::size_t id) const { return id < want_.size() && want_[id]; }

    /// During backward: the gradient accumulator of a node, zero-initialised on first use.
    Tensor<T>& grad_buffer(std::size_t id) {
        Node& n = nodes_.at(id);
        if (!n.has_grad) {
            n.grad = Tensor<T>(value(id).shape());
            n.has_grad = true;
        }
        return n.grad;
    }

    /// Gradient of the last backward call with respect to a node, or nullptr if none flowed.
    const Tensor<T>* grad(Var<T> v) const {
        const Node& n = nodes_.at(v.id());
        return n.has_grad ? &n.grad : nullptr;
    }

    /// Reverse pass from a scalar. Adds dLoss/dθ into Parameter::grad for parameters whose
    /// group is in `groups`; all other parameters are left untouched.
    void backward(Var<T> loss, GroupSet groups = GroupSet::all()) {
        if (!recording_) throw std::logic_error("backward: graph was built without recording");
        if (loss.value().size() != 1) {
            throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        }
        for (auto& n : nodes_) {
            n.has_grad = false;
            n.grad = Tensor<T>();
        }
        want_.assign(nodes_.size(), false);
        for (std::size_t i = 0; i <= loss.id(); ++i) {
            const Node& n = nodes_[i];
            if (n.param) {
                want_[i] = groups.contains(n.param->group());
            } else if (n.is_input) {
                want_[i] = true;
            } else {
                for (auto p : n.parents) {
                    if (want_[p]) {
                        want_[i] = true;
                        break;
                    }
                }
            }
        }
        if (!want_[loss.id()]) return;
        grad_buffer(loss.id()).fill(T{1});
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.has_grad) continue;
            if (n.param) {
                n.param->grad += n.grad;
            } else if (n.backward) {
                n.backward(*this, i, n.grad);
            }
        }
        want_.clear();
    }

private:
    struct Node {
        const char* op = "";
        Tensor<T> owned;
        const Tensor<T>* external = nullptr;
        Parameter<T>* param = nullptr;
        bool requires_grad = false;
        bool is_input = false;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        Tensor<T> grad;
        bool has_grad = false;
    };

    Var<T> push(Node n) {
        nodes_.push_back(std::move(n));
        return Var<T>(this, nodes_.size() - 1);
    }

    bool recording_;
    std::vector<Node> nodes_;
    std::vector<bool> want_;
};

}  // namespace d2ae
