#pragma once

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>

#include "fdm/nn/tensor.hpp"

namespace fdm::nn {

template <class T>
class Tape;

// Handle to a value recorded on a Tape.
template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return tape->value(id); }
    const Shape& shape() const { return value().shape; }
    std::size_t dim(std::size_t i) const { return shape().at(i); }
};

// Records a computation in creation order, which is already a topological
// order, so backward() is a single reverse sweep.
template <class T>
class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t self)>;

    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }

    Var<T> leaf(Tensor<T> v) { return push(std::move(v), record_, {}); }
    Var<T> constant(Tensor<T> v) { return push(std::move(v), false, {}); }

    Var<T> push(Tensor<T> v, bool requires_grad, Backward bw) {
        Node n;
        n.value = std::move(v);
        n.value.grad.clear();
        n.requires_grad = record_ && requires_grad;
        if (n.requires_grad) n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return Var<T>{this, nodes_.size() - 1};
    }

    const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    bool requires_grad(const Var<T>& v) const { return requires_grad(v.id); }

    // Gradient accumulator for `id`, zero-initialised on first touch.
    std::vector<T>& grad_buffer(std::size_t id) {
        Node& n = nodes_.at(id);
        if (n.value.grad.empty()) n.value.grad.assign(n.value.numel(), T{0});
        return n.value.grad;
    }

    // Gradient after backward(); all zeros for values the loss never reached.
    std::vector<T> grad(const Var<T>& v) const {
        const Node& n = nodes_.at(v.id);
        if (n.value.grad.empty()) return std::vector<T>(n.value.numel(), T{0});
        return n.value.grad;
    }

    void backward(const Var<T>& loss) {
        if (loss.tape != this) throw Error("backward: loss belongs to another tape");
        const Node& l = nodes_.at(loss.id);
        if (l.value.numel() != 1) {
            throw ShapeError("backward: loss must be a scalar, got shape " + to_string(l.value.shape));
        }
        if (!std::isfinite(l.value[0])) throw DivergenceError("backward: loss is not finite");
        for (Node& n : nodes_) n.value.grad.clear();
        if (!l.requires_grad) return;
        grad_buffer(loss.id)[0] = T{1};
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (n.backward && !n.value.grad.empty()) n.backward(*this, id);
        }
        for (std::size_t id = 0; id <= loss.id; ++id) {
            const Node& n = nodes_[id];
            for (const T& g : n.value.grad) {
                if (!std::isfinite(g)) {
                    throw DivergenceError("backward: non-finite gradient at node " + std::to_string(id));
                }
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        bool requires_grad = false;
        Backward backward;
    };

    bool record_;
    std::deque<Node> nodes_;
};

// Binds ParamTree entries to tape leaves on first use and gathers their
// gradients afterwards.
template <class T>
class ParamBinder {
public:
    ParamBinder(Tape<T>& tape, const ParamTree<T>& params) : tape_(tape), params_(params) {}

    Var<T> operator()(const std::string& path) {
        if (auto it = bound_.find(path); it != bound_.end()) return it->second;
        auto p = params_.find(path);
        if (p == params_.end()) throw Error("missing parameter \"" + path + "\"");
        Var<T> v = tape_.leaf(p->second);
        bound_.emplace(path, v);
        return v;
    }

    // Uses an existing tape value for `path` instead of a fresh leaf.
    void bind(const std::string& path, Var<T> v) {
        if (!params_.count(path)) throw Error("missing parameter \"" + path + "\"");
        bound_.insert_or_assign(path, v);
    }

    Tape<T>& tape() { return tape_; }

    // Same structure as the parameters; unbound entries get zero gradients.
    ParamTree<T> grads() const {
        ParamTree<T> out;
        for (const auto& [path, t] : params_) {
            auto it = bound_.find(path);
            std::vector<T> g = it == bound_.end() ? std::vector<T>(t.numel(), T{0}) : tape_.grad(it->second);
            out.emplace(path, Tensor<T>(t.shape, std::move(g)));
        }
        return out;
    }

private:
    Tape<T>& tape_;
    const ParamTree<T>& params_;
    std::unordered_map<std::string, Var<T>> bound_;
};

} // namespace fdm::nn
