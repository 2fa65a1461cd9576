#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "qmerge/numerics.hpp"

namespace qmerge {

/// Handle to a node on a Tape.
struct Var {
    std::size_t id = 0;
};

/// Reverse-mode differentiation over matrix-valued nodes. Nodes are appended
/// in evaluation order, so a single reverse sweep from the loss visits every
/// node after all of its consumers.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Matrix value, bool requires_grad = true);
    Var constant(Matrix value) { return leaf(std::move(value), false); }

    Var matmul(Var a, Var b);
    Var matmul_nt(Var a, Var b);  // a * b^T
    Var add(Var a, Var b);
    Var add_row(Var a, Var bias);  // bias is 1 x cols, broadcast over rows
    Var scale(Var a, double factor);
    Var gelu(Var a);
    /// Square score matrix; row i is a softmax over columns 0..i, zero beyond.
    Var causal_softmax(Var scores);
    Var slice_rows(Var a, std::size_t begin, std::size_t count);
    Var slice_cols(Var a, std::size_t begin, std::size_t count);
    Var concat_cols(const std::vector<Var>& parts);
    /// 1 x 1 node: sum over all entries of (a - target)^2.
    Var sum_squared_error(Var a, const Matrix& target);

    const Matrix& value(Var v) const { return nodes_[v.id].value; }
    const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
    double scalar(Var v) const { return nodes_[v.id].value(0, 0); }

    /// Seeds d(output)/d(output) = 1 on a 1 x 1 node and propagates adjoints.
    void backward(Var output);

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        std::function<void()> backprop;
    };

    Var push(Matrix value, bool requires_grad, std::function<void()> backprop);
    bool needs(Var v) const { return nodes_[v.id].requires_grad; }
    Matrix& grad_ref(Var v) { return nodes_[v.id].grad; }

    std::vector<Node> nodes_;
};

}  // namespace qmerge
