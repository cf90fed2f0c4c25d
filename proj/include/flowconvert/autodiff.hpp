#pragma once

// Minimal reverse-mode differentiation over dense row-major-frame matrices.
// Rows are time steps (or batch items), columns are channels.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace flowconvert {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

namespace ad {

struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;

    Parameter() = default;
    Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {}

    void zero_grad()
    {
        if (grad.rows() != value.rows() || grad.cols() != value.cols())
            grad = Matrix::Zero(value.rows(), value.cols());
        else
            grad.setZero();
    }
};

class Graph;

class Var {
public:
    Var() = default;
    Var(Graph* g, int id) : graph_(g), id_(id) {}

    const Matrix& value() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    Graph& graph() const { return *graph_; }
    int id() const { return id_; }
    bool valid() const { return graph_ != nullptr; }

private:
    Graph* graph_ = nullptr;
    int id_ = -1;
};

class Graph {
public:
    using BackwardFn = std::function<void(Graph&, int)>;

    /// With record == false no backward closures are kept (inference mode).
    explicit Graph(bool record = true) : record_(record) { nodes_.reserve(256); }

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return record_; }

    Var constant(Matrix m)
    {
        nodes_.push_back(Node{std::move(m), Matrix(), false, nullptr});
        return Var(this, static_cast<int>(nodes_.size()) - 1);
    }

    Var param(Parameter& p)
    {
        nodes_.push_back(Node{p.value, Matrix(), record_, nullptr});
        const int id = static_cast<int>(nodes_.size()) - 1;
        if (record_) params_.emplace_back(id, &p);
        return Var(this, id);
    }

    Var push(Matrix value, std::initializer_list<Var> parents, BackwardFn fn)
    {
        bool needs = false;
        if (record_)
            for (const auto& p : parents) needs = needs || nodes_[p.id()].needs_grad;
        nodes_.push_back(Node{std::move(value), Matrix(), needs, needs ? std::move(fn) : nullptr});
        return Var(this, static_cast<int>(nodes_.size()) - 1);
    }

    Var push(Matrix value, const std::vector<Var>& parents, BackwardFn fn)
    {
        bool needs = false;
        if (record_)
            for (const auto& p : parents) needs = needs || nodes_[p.id()].needs_grad;
        nodes_.push_back(Node{std::move(value), Matrix(), needs, needs ? std::move(fn) : nullptr});
        return Var(this, static_cast<int>(nodes_.size()) - 1);
    }

    const Matrix& value(int id) const { return nodes_[id].value; }
    bool needs_grad(int id) const { return nodes_[id].needs_grad; }

    /// Gradient accumulator for node `id`, allocated on first use.
    Matrix& grad(int id)
    {
        auto& n = nodes_[id];
        if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    /// Back-propagates from a 1x1 node and accumulates into Parameter::grad.
    void backward(Var loss)
    {
        FLOWCONVERT_EXPECT(record_, ContractError, "backward on a non-recording graph");
        FLOWCONVERT_EXPECT(loss.rows() == 1 && loss.cols() == 1, ContractError,
                           "backward requires a scalar loss");
        grad(loss.id()).setConstant(1.0);
        for (int i = loss.id(); i >= 0; --i) {
            auto& n = nodes_[i];
            if (n.backward && n.grad.size() != 0) n.backward(*this, i);
        }
        for (auto& [id, p] : params_) {
            if (nodes_[id].grad.size() == 0) continue;
            if (p->grad.size() == 0) p->zero_grad();
            p->grad += nodes_[id].grad;
        }
    }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool needs_grad;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    std::vector<std::pair<int, Parameter*>> params_;
    bool record_;
};

inline const Matrix& Var::value() const { return graph_->value(id_); }

namespace detail {
inline void check_same_shape(const Var& a, const Var& b, const char* op)
{
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ContractError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()));
}
} // namespace detail

inline Var matmul(Var a, Var b)
{
    FLOWCONVERT_EXPECT(a.cols() == b.rows(), ContractError, "matmul: inner dimension mismatch");
    auto& g = a.graph();
    const int ia = a.id(), ib = b.id();
    return g.push(a.value() * b.value(), {a, b}, [ia, ib](Graph& g, int self) {
        const Matrix& G = g.grad(self);
        if (g.needs_grad(ia)) g.grad(ia).noalias() += G * g.value(ib).transpose();
        if (g.needs_grad(ib)) g.grad(ib).noalias() += g.value(ia).transpose() * G;
    });
}

/// a * b^T
inline Var matmul_nt(Var a, Var b)
{
    FLOWCONVERT_EXPECT(a.cols() == b.cols(), ContractError, "matmul_nt: inner dimension mismatch");
    auto& g = a.graph();
    const int ia = a.id(), ib = b.id();
    return g.push(a.value() * b.value().transpose(), {a, b}, [ia, ib](Graph& g, int self) {
        const Matrix& G = g.grad(self);
        if (g.needs_grad(ia)) g.grad(ia).noalias() += G * g.value(ib);
        if (g.needs_grad(ib)) g.grad(ib).noalias() += G.transpose() * g.value(ia);
    });
}

inline Var add(Var a, Var b)
{
    detail::check_same_shape(a, b, "add");
    auto& g = a.graph();
    const int ia = a.id(), ib = b.id();
    return g.push(a.value() + b.value(), {a, b}, [ia, ib](Graph& g, int self) {
        const Matrix& G = g.grad(self);
        if (g.needs_grad(ia)) g.grad(ia) += G;
        if (g.needs_grad(ib)) g.grad(ib) += G;
    });
}

inline Var sub(Var a, Var b)
{
    detail::check_same_shape(a, b, "sub");
    auto& g = a.graph();
    const int ia = a.id(), ib = b.id();
    return g.push(a.value() - b.value(), {a, b}, [ia, ib](Graph& g, int self) {
        const Matrix& G = g.grad(self);
        if (g.needs_grad(ia)) g.grad(ia) += G;
        if (g.needs_grad(ib)) g.grad(ib) -= G;
    });
}

/// Elementwise product.
inline Var mul(Var a, Var b)
{
    detail::check_same_shape(a, b, "mul");
    auto& g = a.graph();
    const int ia = a.id(), ib = b.id();
    return g.push(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib](Graph& g, int self) {
        const Matrix& G = g.grad(self);
        if (g.needs_grad(ia)) g.grad(ia) += G.cwiseProduct(g.value(ib));
        if (g.needs_grad(ib)) g.grad(ib) += G.cwiseProduct(g.value(ia));
    });
}

/// a + r broadcast over rows; r is 1 x cols.
inline Var add_row(Var a, Var r)
{
    FLOWCONVERT_EXPECT(r.rows() == 1 && r.cols() == a.cols(), ContractError, "add_row: bad row vector");
    auto& g = a.graph();
    const int ia = a.id(), ir = r.id();
    Matrix out = a.value().rowwise() + r.value().row(0);
    return g.push(std::move(out), {a, r}, [ia, ir](Graph& g, int self) {
        const Matrix& G = g.grad(self);
        if (g.needs_grad(ia)) g.grad(ia) += G;
        if (g.needs_grad(ir)) g.grad(ir) += G.colwise().sum();
    });
}

/// a * r broadcast over rows; r is 1 x cols.
inline Var mul_row(Var a, Var r)
{
    FLOWCONVERT_EXPECT(r.rows() == 1 && r.cols() == a.cols(), ContractError, "mul_row: bad row vector");
    auto& g = a.graph();
    const int ia = a.id(), ir = r.id();
    Matrix out = a.value().array().rowwise() * r.value().row(0).array();
    return g.push(std::move(out), {a, r}, [ia, ir](Graph& g, int self) {
        const Matrix& G = g.grad(self);
        if (g.needs_grad(ia)) g.grad(ia).array() += G.array().rowwise() * g.value(ir).row(0).array();
        if (g.needs_grad(ir)) g.grad(ir) += G.cwiseProduct(g.value(ia)).colwise().sum();
    });
}

inline Var scale(Var a, double s)
{
    auto& g = a.graph();
    const int ia = a.id();
    return g.push(a.value() * s, {a}, [ia, s](Graph& g, int self) { g.grad(ia) += g.grad(self) * s; });
}

inline Var add_scalar(Var a, double s)
{
    auto& g = a.graph();
    const int ia = a.id();
    Matrix out = a.value().array() + s;
    return g.push(std::move(out), {a}, [ia](Graph& g, int self) { g.grad(ia) += g.grad(self); });
}

inline Var tanh(Var a)
{
    auto& g = a.graph();
    const int ia = a.id();
    Matrix out = a.value().array().tanh();
    return g.push(std::move(out), {a}, [ia](Graph& g, int self) {
        const Matrix& y = g.value(self);
        g.grad(ia).array() += g.grad(self).array() * (1.0 - y.array().square());
    });
}

inline Var relu(Var a)
{
    auto& g = a.graph();
    const int ia = a.id();
    Matrix out = a.value().cwiseMax(0.0);
    return g.push(std::move(out), {a}, [ia](Graph& g, int self) {
        const Matrix& x = g.value(ia);
        g.grad(ia).array() += (x.array() > 0.0).select(g.grad(self).array(), 0.0);
    });
}

inline Var exp(Var a)
{
    auto& g = a.graph();
    const int ia = a.id();
    Matrix out = a.value().array().exp();
    return g.push(std::move(out), {a}, [ia](Graph& g, int self) {
        g.grad(ia) += g.grad(self).cwiseProduct(g.value(self));
    });
}

inline Var square(Var a)
{
    auto& g = a.graph();
    const int ia = a.id();
    Matrix out = a.value().array().square();
    return g.push(std::move(out), {a}, [ia](Graph& g, int self) {
        g.grad(ia) += 2.0 * g.grad(self).cwiseProduct(g.value(ia));
    });
}

/// bound * tanh(a / bound): smooth clamp into (-bound, bound).
inline Var soft_clamp(Var a, double bound) { return scale(tanh(scale(a, 1.0 / bound)), bound); }

inline Var sum(Var a)
{
    auto& g = a.graph();
    const int ia = a.id();
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    return g.push(std::move(out), {a}, [ia](Graph& g, int self) {
        g.grad(ia).array() += g.grad(self)(0, 0);
    });
}

inline Var mean(Var a)
{
    const double n = static_cast<double>(a.value().size());
    FLOWCONVERT_EXPECT(n > 0, ContractError, "mean of empty matrix");
    return scale(sum(a), 1.0 / n);
}

inline Var concat_cols(const std::vector<Var>& parts)
{
    FLOWCONVERT_EXPECT(!parts.empty(), ContractError, "concat_cols: no inputs");
    const Index rows = parts.front().rows();
    Index cols = 0;
    for (const auto& p : parts) {
        FLOWCONVERT_EXPECT(p.rows() == rows, ContractError, "concat_cols: row mismatch");
        cols += p.cols();
    }
    Matrix out(rows, cols);
    std::vector<int> ids;
    std::vector<Index> offsets;
    Index c = 0;
    for (const auto& p : parts) {
        out.middleCols(c, p.cols()) = p.value();
        ids.push_back(p.id());
        offsets.push_back(c);
        c += p.cols();
    }
    auto& g = parts.front().graph();
    return g.push(std::move(out), parts, [ids, offsets](Graph& g, int self) {
        const Matrix& G = g.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!g.needs_grad(ids[k])) continue;
            auto& gk = g.grad(ids[k]);
            gk += G.middleCols(offsets[k], gk.cols());
        }
    });
}

inline Var slice_cols(Var a, Index start, Index count)
{
    FLOWCONVERT_EXPECT(start >= 0 && count >= 0 && start + count <= a.cols(), ContractError,
                       "slice_cols: out of range");
    auto& g = a.graph();
    const int ia = a.id();
    Matrix out = a.value().middleCols(start, count);
    return g.push(std::move(out), {a}, [ia, start, count](Graph& g, int self) {
        g.grad(ia).middleCols(start, count) += g.grad(self);
    });
}

/// out.row(i) = a.row(index[i]), or zeros where index[i] < 0.
inline Var gather_rows(Var a, std::vector<int> index)
{
    Matrix out(static_cast<Index>(index.size()), a.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        const int r = index[i];
        FLOWCONVERT_EXPECT(r < a.rows(), LookupError, "gather_rows: index " + std::to_string(r) + " out of range");
        if (r < 0)
            out.row(static_cast<Index>(i)).setZero();
        else
            out.row(static_cast<Index>(i)) = a.value().row(r);
    }
    auto& g = a.graph();
    const int ia = a.id();
    return g.push(std::move(out), {a}, [ia, index = std::move(index)](Graph& g, int self) {
        const Matrix& G = g.grad(self);
        auto& ga = g.grad(ia);
        for (std::size_t i = 0; i < index.size(); ++i)
            if (index[i] >= 0) ga.row(index[i]) += G.row(static_cast<Index>(i));
    });
}

/// Mean over row segments [offsets[k], offsets[k+1]); returns (#segments) x cols.
inline Var segment_mean(Var a, std::vector<Index> offsets)
{
    FLOWCONVERT_EXPECT(offsets.size() >= 2 && offsets.back() == a.rows(), ContractError,
                       "segment_mean: offsets must end at row count");
    const Index n = static_cast<Index>(offsets.size()) - 1;
    Matrix out(n, a.cols());
    for (Index k = 0; k < n; ++k) {
        const Index len = offsets[k + 1] - offsets[k];
        FLOWCONVERT_EXPECT(len > 0, ContractError, "segment_mean: empty segment");
        out.row(k) = a.value().middleRows(offsets[k], len).colwise().mean();
    }
    auto& g = a.graph();
    const int ia = a.id();
    return g.push(std::move(out), {a}, [ia, offsets = std::move(offsets), n](Graph& g, int self) {
        const Matrix& G = g.grad(self);
        auto& ga = g.grad(ia);
        for (Index k = 0; k < n; ++k) {
            const Index len = offsets[k + 1] - offsets[k];
            ga.middleRows(offsets[k], len).rowwise() += G.row(k) / static_cast<double>(len);
        }
    });
}

inline Matrix softmax_rows_value(const Matrix& x)
{
    Matrix out = x.colwise() - x.rowwise().maxCoeff();
    out = out.array().exp();
    out.array().colwise() /= out.rowwise().sum().array();
    return out;
}

inline Var softmax_rows(Var a)
{
    auto& g = a.graph();
    const int ia = a.id();
    return g.push(softmax_rows_value(a.value()), {a}, [ia](Graph& g, int self) {
        const Matrix& y = g.value(self);
        const Matrix& G = g.grad(self);
        const Eigen::VectorXd dot = G.cwiseProduct(y).rowwise().sum();
        g.grad(ia).array() += y.array() * (G.colwise() - dot).array();
    });
}

inline Var log_softmax_rows(Var a)
{
    const Matrix& x = a.value();
    const Eigen::VectorXd mx = x.rowwise().maxCoeff();
    const Eigen::VectorXd lse =
        mx.array() + (x.colwise() - mx).array().exp().rowwise().sum().log();
    Matrix out = x.colwise() - lse;
    auto& g = a.graph();
    const int ia = a.id();
    return g.push(std::move(out), {a}, [ia](Graph& g, int self) {
        const Matrix& G = g.grad(self);
        const Matrix p = g.value(self).array().exp();
        const Eigen::VectorXd gs = G.rowwise().sum();
        g.grad(ia) += G - (p.array().colwise() * gs.array()).matrix();
    });
}

/// Square diagonal matrix from a 1 x n row vector.
inline Var diag(Var r)
{
    FLOWCONVERT_EXPECT(r.rows() == 1, ContractError, "diag expects a row vector");
    auto& g = r.graph();
    const int ir = r.id();
    Matrix out = r.value().row(0).asDiagonal();
    return g.push(std::move(out), {r}, [ir](Graph& g, int self) {
        g.grad(ir) += g.grad(self).diagonal().transpose();
    });
}

} // namespace ad
} // namespace flowconvert
