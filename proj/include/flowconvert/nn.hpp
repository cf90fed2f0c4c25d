#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "rng.hpp"

namespace flowconvert::nn {

using ad::Graph;
using ad::Parameter;
using ad::Var;

/// Ordered, non-owning view over the parameters of one or more modules.
using ParameterList = std::vector<Parameter*>;

inline Matrix random_normal(Index rows, Index cols, double stddev, Rng& rng)
{
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = rng.normal(0.0, stddev);
    return m;
}

/// Affine map x * W + b with W stored as (in x out).
struct Linear {
    Parameter weight;
    Parameter bias;

    Linear() = default;
    Linear(std::string name, Index in, Index out, Rng& rng, double gain = 1.0)
        : weight(name + ".weight", random_normal(in, out, gain / std::sqrt(static_cast<double>(in)), rng)),
          bias(name + ".bias", Matrix::Zero(1, out))
    {
    }

    static Linear zeros(std::string name, Index in, Index out)
    {
        Linear l;
        l.weight = Parameter(name + ".weight", Matrix::Zero(in, out));
        l.bias = Parameter(name + ".bias", Matrix::Zero(1, out));
        return l;
    }

    Index in_features() const { return weight.value.rows(); }
    Index out_features() const { return weight.value.cols(); }

    Var operator()(Graph& g, Var x)
    {
        return ad::add_row(ad::matmul(x, g.param(weight)), g.param(bias));
    }

    void collect(ParameterList& out)
    {
        out.push_back(&weight);
        out.push_back(&bias);
    }
};

inline void zero_grad(const ParameterList& params)
{
    for (auto* p : params) p->zero_grad();
}

inline double grad_norm(const ParameterList& params)
{
    double s = 0.0;
    for (auto* p : params)
        if (p->grad.size()) s += p->grad.squaredNorm();
    return std::sqrt(s);
}

inline bool all_finite(const ParameterList& params)
{
    for (auto* p : params)
        if (!p->value.allFinite()) return false;
    return true;
}

/// Adam with optional global-norm gradient clipping.
class Adam {
public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double clip_norm = 0.0;  // 0 disables clipping
        double weight_decay = 0.0;
    };

    Adam(ParameterList params, Options opt) : params_(std::move(params)), opt_(opt)
    {
        for (auto* p : params_) {
            m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        }
    }

    void zero_grad() { nn::zero_grad(params_); }

    /// Returns the pre-clipping gradient norm.
    double step()
    {
        ++t_;
        const double norm = grad_norm(params_);
        double factor = 1.0;
        if (opt_.clip_norm > 0.0 && norm > opt_.clip_norm) factor = opt_.clip_norm / norm;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto* p = params_[k];
            if (p->grad.size() == 0) continue;
            Matrix g = p->grad * factor;
            if (opt_.weight_decay > 0.0) g += opt_.weight_decay * p->value;
            m_[k] = opt_.beta1 * m_[k] + (1.0 - opt_.beta1) * g;
            v_[k] = opt_.beta2 * v_[k] + (1.0 - opt_.beta2) * g.cwiseAbs2();
            p->value.array() -= opt_.lr * (m_[k].array() / bc1) / ((v_[k].array() / bc2).sqrt() + opt_.eps);
        }
        return norm;
    }

    void set_lr(double lr) { opt_.lr = lr; }

private:
    ParameterList params_;
    Options opt_;
    std::vector<Matrix> m_, v_;
    long t_ = 0;
};

/// Name -> value snapshot, used for checkpoints and equality checks.
inline std::map<std::string, Matrix> snapshot(const ParameterList& params)
{
    std::map<std::string, Matrix> out;
    for (auto* p : params) out[p->name] = p->value;
    return out;
}

inline void restore(const ParameterList& params, const std::map<std::string, Matrix>& values)
{
    for (auto* p : params) {
        auto it = values.find(p->name);
        if (it == values.end()) throw LookupError("missing parameter '" + p->name + "'");
        if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols())
            throw ContractError("shape mismatch for parameter '" + p->name + "'");
        p->value = it->second;
    }
}

/// Row indices of the previous (offset -1) or next (+1) frame inside the same
/// segment; -1 where the neighbour falls outside the segment.
inline std::vector<int> shifted_index(const std::vector<Index>& offsets, int shift)
{
    std::vector<int> idx(static_cast<std::size_t>(offsets.back()), -1);
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
        for (Index t = offsets[s]; t < offsets[s + 1]; ++t) {
            const Index n = t + shift;
            if (n >= offsets[s] && n < offsets[s + 1]) idx[static_cast<std::size_t>(t)] = static_cast<int>(n);
        }
    return idx;
}

/// [x(t-r), ..., x(t+r)] per row, zero padded at segment edges.
inline Var context_window(Var x, const std::vector<Index>& offsets, int radius)
{
    std::vector<Var> parts;
    for (int s = -radius; s <= radius; ++s) parts.push_back(s == 0 ? x : ad::gather_rows(x, shifted_index(offsets, s)));
    return ad::concat_cols(parts);
}

inline Var context3(Var x, const std::vector<Index>& offsets)
{
    return context_window(x, offsets, 1);
}

} // namespace flowconvert::nn
