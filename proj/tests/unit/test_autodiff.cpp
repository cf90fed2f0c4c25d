#include <gtest/gtest.h>

#include <functional>

#include "flowconvert/autodiff.hpp"
#include "flowconvert/nn.hpp"

using namespace flowconvert;
using ad::Graph;
using ad::Parameter;
using ad::Var;

namespace {

using Fn = std::function<Var(Graph&, std::vector<Var>&)>;

// Compares tape gradients of f against central differences for every input entry.
void check_gradients(const Fn& f, std::vector<Matrix> inputs, double tol = 1e-6)
{
    std::vector<Parameter> params;
    for (std::size_t i = 0; i < inputs.size(); ++i) params.emplace_back("p" + std::to_string(i), inputs[i]);
    {
        Graph g;
        std::vector<Var> vars;
        for (auto& p : params) vars.push_back(g.param(p));
        for (auto& p : params) p.zero_grad();
        g.backward(f(g, vars));
    }
    auto eval = [&]() {
        Graph g(false);
        std::vector<Var> vars;
        for (auto& p : params) vars.push_back(g.constant(p.value));
        return f(g, vars).value()(0, 0);
    };
    const double h = 1e-6;
    for (auto& p : params)
        for (Index i = 0; i < p.value.size(); ++i) {
            const double orig = p.value.data()[i];
            p.value.data()[i] = orig + h;
            const double up = eval();
            p.value.data()[i] = orig - h;
            const double down = eval();
            p.value.data()[i] = orig;
            const double fd = (up - down) / (2 * h);
            EXPECT_NEAR(p.grad.data()[i], fd, tol * std::max(1.0, std::abs(fd))) << p.name << "[" << i << "]";
        }
}

Matrix rnd(Index r, Index c, std::uint64_t seed)
{
    Rng rng(seed);
    return nn::random_normal(r, c, 1.0, rng);
}

// Weighted sum so every output entry contributes a distinct gradient.
Var weighted(Graph& g, Var x, std::uint64_t seed) { return ad::sum(ad::mul(x, g.constant(rnd(x.rows(), x.cols(), seed)))); }

} // namespace

TEST(Autodiff, MatmulVariants)
{
    check_gradients([](Graph& g, auto& v) { return weighted(g, ad::matmul(v[0], v[1]), 9); }, {rnd(3, 4, 1), rnd(4, 2, 2)});
    check_gradients([](Graph& g, auto& v) { return weighted(g, ad::matmul_nt(v[0], v[1]), 9); }, {rnd(3, 4, 1), rnd(5, 4, 2)});
}

TEST(Autodiff, ElementwiseAndBroadcast)
{
    check_gradients([](Graph& g, auto& v) { return weighted(g, ad::mul(ad::add(v[0], v[1]), ad::sub(v[0], v[1])), 3); },
                    {rnd(3, 4, 1), rnd(3, 4, 2)});
    check_gradients([](Graph& g, auto& v) { return weighted(g, ad::mul_row(ad::add_row(v[0], v[1]), v[2]), 3); },
                    {rnd(5, 3, 1), rnd(1, 3, 2), rnd(1, 3, 4)});
    check_gradients([](Graph& g, auto& v) { return weighted(g, ad::soft_clamp(ad::exp(ad::tanh(v[0])), 0.7), 5); },
                    {rnd(3, 3, 1)});
    check_gradients([](Graph& g, auto& v) { return weighted(g, ad::square(ad::add_scalar(ad::scale(v[0], 0.3), 1.0)), 5); },
                    {rnd(2, 3, 7)});
    check_gradients([](Graph& g, auto& v) { return weighted(g, ad::diag(v[0]), 5); }, {rnd(1, 4, 7)});
}

TEST(Autodiff, StructuralOps)
{
    check_gradients(
        [](Graph& g, auto& v) {
            Var c = ad::concat_cols({v[0], ad::slice_cols(v[1], 1, 2)});
            return weighted(g, ad::gather_rows(c, {2, -1, 0, 2, 1}), 11);
        },
        {rnd(3, 2, 1), rnd(3, 4, 2)});
    check_gradients([](Graph& g, auto& v) { return weighted(g, ad::segment_mean(v[0], {0, 2, 5}), 4); }, {rnd(5, 3, 1)});
}

TEST(Autodiff, Softmax)
{
    check_gradients([](Graph& g, auto& v) { return weighted(g, ad::softmax_rows(v[0]), 4); }, {rnd(4, 5, 1)});
    check_gradients([](Graph& g, auto& v) { return weighted(g, ad::log_softmax_rows(v[0]), 4); }, {rnd(4, 5, 1)});
    Graph g(false);
    Var s = ad::softmax_rows(g.constant(rnd(6, 7, 3) * 20.0));
    for (Index r = 0; r < 6; ++r) EXPECT_NEAR(s.value().row(r).sum(), 1.0, 1e-12);
}

TEST(Autodiff, ReluMatchesSubgradientAwayFromKink)
{
    Matrix x = rnd(4, 4, 8);
    x = x.unaryExpr([](double v) { return std::abs(v) < 0.05 ? 0.3 : v; });
    check_gradients([](Graph& g, auto& v) { return weighted(g, ad::relu(v[0]), 2); }, {x});
}

TEST(Autodiff, ContractErrors)
{
    Graph g;
    EXPECT_THROW(ad::matmul(g.constant(rnd(2, 3, 1)), g.constant(rnd(2, 3, 1))), ContractError);
    EXPECT_THROW(ad::add(g.constant(rnd(2, 3, 1)), g.constant(rnd(3, 2, 1))), ContractError);
    EXPECT_THROW(g.backward(g.constant(rnd(2, 2, 1))), ContractError);
    EXPECT_THROW(ad::gather_rows(g.constant(rnd(2, 3, 1)), {5}), LookupError);
}

TEST(Adam, ReducesQuadratic)
{
    Parameter p("w", Matrix::Constant(2, 2, 3.0));
    nn::Adam opt({&p}, {.lr = 0.1});
    for (int i = 0; i < 300; ++i) {
        Graph g;
        opt.zero_grad();
        g.backward(ad::sum(ad::square(g.param(p))));
        opt.step();
    }
    EXPECT_LT(p.value.cwiseAbs().maxCoeff(), 1e-2);
}

TEST(Context, ShiftedIndexRespectsSegments)
{
    auto prev = nn::shifted_index({0, 2, 5}, -1);
    EXPECT_EQ(prev, (std::vector<int>{-1, 0, -1, 2, 3}));
    auto next = nn::shifted_index({0, 2, 5}, 1);
    EXPECT_EQ(next, (std::vector<int>{1, -1, 3, 4, -1}));
}
