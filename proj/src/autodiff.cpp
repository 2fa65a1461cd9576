#include "qmerge/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace qmerge {

namespace {

void accumulate(Matrix& into, const Matrix& delta) {
    auto dst = into.data();
    auto src = delta.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void check_same(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error(Errc::invalid_shape, what);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var Tape::push(Matrix value, bool requires_grad, std::function<void()> backprop) {
    Node node;
    node.grad = Matrix(value.rows(), value.cols());
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.backprop = std::move(backprop);
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
}

Var Tape::leaf(Matrix value, bool requires_grad) { return push(std::move(value), requires_grad, nullptr); }

Var Tape::matmul(Var a, Var b) {
    Matrix out = qmerge::matmul(value(a), value(b));
    const bool rg = needs(a) || needs(b);
    const std::size_t id = nodes_.size();
    return push(std::move(out), rg, [this, a, b, id] {
        const Matrix& g = nodes_[id].grad;
        if (needs(a)) accumulate(grad_ref(a), qmerge::matmul_nt(g, value(b)));
        if (needs(b)) accumulate(grad_ref(b), qmerge::matmul(value(a).transposed(), g));
    });
}

Var Tape::matmul_nt(Var a, Var b) {
    Matrix out = qmerge::matmul_nt(value(a), value(b));
    const bool rg = needs(a) || needs(b);
    const std::size_t id = nodes_.size();
    return push(std::move(out), rg, [this, a, b, id] {
        const Matrix& g = nodes_[id].grad;
        if (needs(a)) accumulate(grad_ref(a), qmerge::matmul(g, value(b)));
        if (needs(b)) accumulate(grad_ref(b), qmerge::matmul(g.transposed(), value(a)));
    });
}

Var Tape::add(Var a, Var b) {
    check_same(value(a), value(b), "add operands differ in shape");
    Matrix out = value(a);
    accumulate(out, value(b));
    const std::size_t id = nodes_.size();
    return push(std::move(out), needs(a) || needs(b), [this, a, b, id] {
        const Matrix& g = nodes_[id].grad;
        if (needs(a)) accumulate(grad_ref(a), g);
        if (needs(b)) accumulate(grad_ref(b), g);
    });
}

Var Tape::add_row(Var a, Var bias) {
    const Matrix& av = value(a);
    const Matrix& bv = value(bias);
    if (bv.rows() != 1 || bv.cols() != av.cols()) throw Error(Errc::invalid_shape, "bias must be 1 x cols");
    Matrix out = av;
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv(0, c);
    const std::size_t id = nodes_.size();
    return push(std::move(out), needs(a) || needs(bias), [this, a, bias, id] {
        const Matrix& g = nodes_[id].grad;
        if (needs(a)) accumulate(grad_ref(a), g);
        if (needs(bias)) {
            Matrix& gb = grad_ref(bias);
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
        }
    });
}

Var Tape::scale(Var a, double factor) {
    Matrix out = value(a);
    for (double& v : out.data()) v *= factor;
    const std::size_t id = nodes_.size();
    return push(std::move(out), needs(a), [this, a, factor, id] {
        const Matrix& g = nodes_[id].grad;
        Matrix& ga = grad_ref(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += factor * g.data()[i];
    });
}

Var Tape::gelu(Var a) {
    Matrix out = value(a);
    for (double& v : out.data()) {
        const double x = v;
        v = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
    }
    const std::size_t id = nodes_.size();
    return push(std::move(out), needs(a), [this, a, id] {
        const Matrix& g = nodes_[id].grad;
        const Matrix& in = value(a);
        Matrix& ga = grad_ref(a);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = in.data()[i];
            const double u = kGeluC * (x + kGeluA * x * x * x);
            const double t = std::tanh(u);
            const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
            const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            ga.data()[i] += d * g.data()[i];
        }
    });
}

Var Tape::causal_softmax(Var scores) {
    const Matrix& s = value(scores);
    if (s.rows() != s.cols()) throw Error(Errc::invalid_shape, "causal softmax needs square scores");
    const std::size_t n = s.rows();
    Matrix out(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        double peak = s(i, 0);
        for (std::size_t j = 1; j <= i; ++j) peak = std::max(peak, s(i, j));
        double total = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            out(i, j) = std::exp(s(i, j) - peak);
            total += out(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) out(i, j) /= total;
    }
    const std::size_t id = nodes_.size();
    return push(std::move(out), needs(scores), [this, scores, id, n] {
        const Matrix& g = nodes_[id].grad;
        const Matrix& p = nodes_[id].value;
        Matrix& gs = grad_ref(scores);
        for (std::size_t i = 0; i < n; ++i) {
            double inner = 0.0;
            for (std::size_t j = 0; j <= i; ++j) inner += g(i, j) * p(i, j);
            for (std::size_t j = 0; j <= i; ++j) gs(i, j) += p(i, j) * (g(i, j) - inner);
        }
    });
}

Var Tape::slice_rows(Var a, std::size_t begin, std::size_t count) {
    const Matrix& av = value(a);
    if (begin + count > av.rows()) throw Error(Errc::invalid_shape, "row slice out of range");
    Matrix out(count, av.cols());
    for (std::size_t r = 0; r < count; ++r) std::copy(av.row(begin + r).begin(), av.row(begin + r).end(), out.row(r).begin());
    const std::size_t id = nodes_.size();
    return push(std::move(out), needs(a), [this, a, begin, count, id] {
        const Matrix& g = nodes_[id].grad;
        Matrix& ga = grad_ref(a);
        for (std::size_t r = 0; r < count; ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) ga(begin + r, c) += g(r, c);
    });
}

Var Tape::slice_cols(Var a, std::size_t begin, std::size_t count) {
    const Matrix& av = value(a);
    if (begin + count > av.cols()) throw Error(Errc::invalid_shape, "column slice out of range");
    Matrix out(av.rows(), count);
    for (std::size_t r = 0; r < av.rows(); ++r)
        for (std::size_t c = 0; c < count; ++c) out(r, c) = av(r, begin + c);
    const std::size_t id = nodes_.size();
    return push(std::move(out), needs(a), [this, a, begin, count, id] {
        const Matrix& g = nodes_[id].grad;
        Matrix& ga = grad_ref(a);
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < count; ++c) ga(r, begin + c) += g(r, c);
    });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw Error(Errc::invalid_shape, "concat of nothing");
    const std::size_t rows = value(parts.front()).rows();
    std::size_t cols = 0;
    bool rg = false;
    for (Var p : parts) {
        if (value(p).rows() != rows) throw Error(Errc::invalid_shape, "concat parts differ in rows");
        cols += value(p).cols();
        rg = rg || needs(p);
    }
    Matrix out(rows, cols);
    std::size_t offset = 0;
    for (Var p : parts) {
        const Matrix& pv = value(p);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < pv.cols(); ++c) out(r, offset + c) = pv(r, c);
        offset += pv.cols();
    }
    const std::size_t id = nodes_.size();
    return push(std::move(out), rg, [this, parts, id] {
        const Matrix& g = nodes_[id].grad;
        std::size_t off = 0;
        for (Var p : parts) {
            const std::size_t w = value(p).cols();
            if (needs(p)) {
                Matrix& gp = grad_ref(p);
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < w; ++c) gp(r, c) += g(r, off + c);
            }
            off += w;
        }
    });
}

Var Tape::sum_squared_error(Var a, const Matrix& target) {
    check_same(value(a), target, "prediction and target differ in shape");
    double total = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double d = value(a).data()[i] - target.data()[i];
        total += d * d;
    }
    const std::size_t id = nodes_.size();
    return push(Matrix(1, 1, total), needs(a), [this, a, target, id] {
        const double g = nodes_[id].grad(0, 0);
        Matrix& ga = grad_ref(a);
        const Matrix& av = value(a);
        for (std::size_t i = 0; i < target.size(); ++i) ga.data()[i] += 2.0 * (av.data()[i] - target.data()[i]) * g;
    });
}

void Tape::backward(Var output) {
    if (value(output).rows() != 1 || value(output).cols() != 1)
        throw Error(Errc::invalid_shape, "backward needs a scalar output");
    for (auto& n : nodes_)
        std::fill(n.grad.data().begin(), n.grad.data().end(), 0.0);
    nodes_[output.id].grad(0, 0) = 1.0;
    for (std::size_t i = output.id + 1; i-- > 0;) {
        if (nodes_[i].requires_grad && nodes_[i].backprop) nodes_[i].backprop();
    }
}

}  // namespace qmerge
