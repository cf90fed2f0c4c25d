#include <gtest/gtest.h>

#include <cmath>

#include "flowconvert/flow.hpp"

using namespace flowconvert;

namespace {

FlowModel make_flow(int dim, int cond_dim, bool random, std::uint64_t seed, double perturb = 0.0, int steps = 4)
{
    Rng rng(seed);
    FlowConfig cfg;
    cfg.dim = dim;
    cfg.cond_dim = cond_dim;
    cfg.steps = steps;
    cfg.hidden = 16;
    cfg.random_mixing = random;
    FlowModel f(cfg, rng);
    if (perturb > 0.0)
        for (auto* p : f.parameters()) p->value += nn::random_normal(p->value.rows(), p->value.cols(), perturb, rng);
    return f;
}

Matrix rnd(Index r, Index c, std::uint64_t seed, double s = 1.0)
{
    Rng rng(seed);
    return nn::random_normal(r, c, s, rng);
}

// log|det| of the numerical Jacobian of the flattened inverse map
// (fourth-order central differences).
double numerical_logdet(const FlowModel& f, const Matrix& x, const FrameConditioning& c)
{
    const Index n = x.size();
    const double h = 1e-5;
    auto z = [&](Index k, double step) {
        Matrix m = x;
        m.data()[k] += step;
        return f.inverse(MelSpectrogram{m}, c).first.frames;
    };
    Matrix jac(n, n);
    for (Index k = 0; k < n; ++k) {
        const Matrix col = (z(k, -2 * h) - 8 * z(k, -h) + 8 * z(k, h) - z(k, 2 * h)) / (12 * h);
        for (Index i = 0; i < n; ++i) jac(i, k) = col.data()[i];
    }
    return std::log(std::abs(jac.determinant()));
}

} // namespace

TEST(Flow, IdentityInitialization)
{
    auto f = make_flow(16, 6, false, 1);
    const Matrix x = rnd(10, 16, 2);
    const FrameConditioning c{rnd(10, 6, 3)};
    auto [z, logdet] = f.inverse(MelSpectrogram{x}, c);
    EXPECT_EQ(z.frames.rows(), 10);
    EXPECT_EQ(z.frames.cols(), 16);
    EXPECT_EQ((z.frames - x).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(logdet, 0.0);
    EXPECT_EQ((f.forward(LatentSequence{x}, c).frames - x).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Flow, ShapePreserved)
{
    auto f = make_flow(16, 6, true, 4, 0.2);
    auto [z, logdet] = f.inverse(MelSpectrogram{rnd(10, 16, 5)}, FrameConditioning{rnd(10, 6, 6)});
    EXPECT_EQ(z.frame_count(), 10);
    EXPECT_EQ(z.dim(), 16);
    EXPECT_TRUE(std::isfinite(logdet));
}

TEST(Flow, RoundTripRandomParameters)
{
    for (std::uint64_t s = 0; s < 10; ++s) {
        auto f = make_flow(5 + static_cast<int>(s % 3), 3, true, 100 + s, 0.3);
        const Index d = f.config().dim;
        const Matrix x = rnd(7, d, 200 + s, 2.0);
        const FrameConditioning c{rnd(7, 3, 300 + s)};
        const auto z = f.inverse(MelSpectrogram{x}, c).first;
        EXPECT_LT((f.forward(z, c).frames - x).cwiseAbs().maxCoeff(), 1e-4);
        const Matrix z0 = rnd(7, d, 400 + s);
        const auto xr = f.forward(LatentSequence{z0}, c);
        EXPECT_LT((f.inverse(xr, c).first.frames - z0).cwiseAbs().maxCoeff(), 1e-4);
    }
}

TEST(Flow, LogDetMatchesFiniteDifferenceJacobian)
{
    for (std::uint64_t s = 0; s < 5; ++s) {
        auto f = make_flow(4, 3, true, 10 + s, 0.3);
        const Matrix x = rnd(2, 4, 20 + s);
        const FrameConditioning c{rnd(2, 3, 30 + s)};
        const double analytic = f.inverse(MelSpectrogram{x}, c).second;
        const double numeric = numerical_logdet(f, x, c);
        EXPECT_LT(std::abs(analytic - numeric), 1e-3 * std::abs(numeric)) << analytic << " vs " << numeric;
    }
}

TEST(Flow, NllAnalyticCases)
{
    auto f = make_flow(2, 1, false, 1);
    EXPECT_NEAR(f.nll(MelSpectrogram{Matrix::Zero(1, 2)}, FrameConditioning{Matrix::Zero(1, 1)}),
                0.5 * std::log(2 * M_PI), 1e-12);
    EXPECT_NEAR(0.5 * std::log(2 * M_PI), 0.918939, 1e-6);
    // Single-channel flow: x = [[1]] gives 0.5*log(2*pi) + 0.5.
    auto g = make_flow(1, 1, false, 2);
    EXPECT_NEAR(g.nll(MelSpectrogram{Matrix::Ones(1, 1)}, FrameConditioning{Matrix::Zero(1, 1)}),
                0.5 * std::log(2 * M_PI) + 0.5, 1e-12);
}

TEST(Flow, NllGradientMatchesFiniteDifferences)
{
    auto f = make_flow(4, 3, true, 77, 0.1, 3);
    const Matrix x = rnd(6, 4, 78);
    const Matrix c = rnd(6, 3, 79);
    const std::vector<Index> offsets{0, 3, 6};
    auto params = f.parameters();
    nn::zero_grad(params);
    {
        ad::Graph g;
        g.backward(f.nll(g, g.constant(x), g.constant(c), offsets));
    }
    auto eval = [&] {
        ad::Graph g(false);
        return f.nll(g, g.constant(x), g.constant(c), offsets).value()(0, 0);
    };
    Rng pick(5);
    int checked = 0;
    for (auto* p : params) {
        for (int k = 0; k < 3; ++k) {
            const Index i = pick.uniform_int(0, static_cast<int>(p->value.size()) - 1);
            const double orig = p->value.data()[i];
            const double h = 1e-5;
            p->value.data()[i] = orig + h;
            const double up = eval();
            p->value.data()[i] = orig - h;
            const double down = eval();
            p->value.data()[i] = orig;
            const double fd = (up - down) / (2 * h);
            const double an = p->grad.data()[i];
            EXPECT_LE(std::abs(an - fd), 1e-2 * std::max(std::abs(fd), 1e-4)) << p->name;
            ++checked;
        }
    }
    EXPECT_GT(checked, 30);
}

TEST(Flow, ContractErrors)
{
    auto f = make_flow(4, 3, true, 1);
    EXPECT_THROW(f.inverse(MelSpectrogram{rnd(5, 4, 1)}, FrameConditioning{rnd(4, 3, 1)}), ContractError);
    EXPECT_THROW(f.inverse(MelSpectrogram{rnd(5, 3, 1)}, FrameConditioning{rnd(5, 3, 1)}), ContractError);
    Matrix bad = rnd(5, 4, 1);
    bad(2, 2) = std::nan("");
    EXPECT_THROW(f.inverse(MelSpectrogram{bad}, FrameConditioning{rnd(5, 3, 1)}), NumericError);
    EXPECT_THROW(f.forward(LatentSequence{bad}, FrameConditioning{rnd(5, 3, 1)}), NumericError);
}

TEST(Flow, ConditioningChangesDecoding)
{
    auto f = make_flow(4, 3, true, 9, 0.3);
    const LatentSequence z{rnd(6, 4, 1)};
    Matrix c = rnd(6, 3, 2);
    const Matrix a = f.forward(z, FrameConditioning{c}).frames;
    c.col(2).array() += 0.5;
    const Matrix b = f.forward(z, FrameConditioning{c}).frames;
    EXPECT_GT((a - b).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Flow, LogScaleIsBounded)
{
    // Huge coupling outputs saturate at the clamp, keeping the inverse finite.
    auto f = make_flow(4, 3, false, 1, 0.0, 1);
    for (auto* p : f.parameters())
        if (p->name.find("coupling.out.bias") != std::string::npos) p->value.setConstant(1e3);
    const Matrix x = rnd(3, 4, 2);
    const FrameConditioning c{rnd(3, 3, 3)};
    auto [z, logdet] = f.inverse(MelSpectrogram{x}, c);
    EXPECT_LE(logdet, 5.0 * 3 * 2 + 1e-9);
    EXPECT_LT((f.forward(z, c).frames - x).cwiseAbs().maxCoeff(), 1e-4);
}
