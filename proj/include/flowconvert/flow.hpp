#pragma once

// Conditional normalizing flow over frame sequences. Each step applies, in the
// data -> latent direction: actnorm, an LU-parameterized channel mixing and a
// conditional affine coupling whose network sees the untouched half-channels
// of frames (t-1, t, t+1) together with the frame conditioning.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/LU>
#include <Eigen/QR>

#include "autodiff.hpp"
#include "features.hpp"
#include "nn.hpp"

namespace flowconvert {

struct LatentSequence {
    Matrix frames;  // T x D

    Index frame_count() const { return frames.rows(); }
    Index dim() const { return frames.cols(); }
};

struct FlowConfig {
    int dim = 16;
    int cond_dim = 44;
    int steps = 8;
    int hidden = 64;
    double log_scale_bound = 5.0;
    int cond_context = 2;       // conditioning frames seen on each side by the coupling nets
    bool random_mixing = true;  // false gives the identity flow at init
};

/// (x + bias) * exp(log_scale), per channel.
class ActNorm {
public:
    ActNorm() = default;
    ActNorm(const std::string& name, Index dim)
        : bias_(name + ".bias", Matrix::Zero(1, dim)), log_scale_(name + ".log_scale", Matrix::Zero(1, dim))
    {
    }

    std::pair<Var, Var> inverse(Graph& g, Var x)
    {
        Var ls = g.param(log_scale_);
        Var h = ad::mul_row(ad::add_row(x, g.param(bias_)), ad::exp(ls));
        return {h, ad::scale(ad::sum(ls), static_cast<double>(x.rows()))};
    }

    Matrix forward(const Matrix& h) const
    {
        Matrix x = h.array().rowwise() * (-log_scale_.value.row(0).array()).exp();
        return x.rowwise() - bias_.value.row(0);
    }

    /// Sets bias/scale so that `x` has zero mean and unit variance per channel.
    void data_init(const Matrix& x)
    {
        const RowVector mean = x.colwise().mean();
        const RowVector var = (x.rowwise() - mean).array().square().colwise().mean();
        bias_.value.row(0) = -mean;
        log_scale_.value.row(0) = -0.5 * (var.array() + 1e-6).log();
    }

    void collect(nn::ParameterList& out)
    {
        out.push_back(&bias_);
        out.push_back(&log_scale_);
    }

private:
    Parameter bias_;
    Parameter log_scale_;
};

/// Frame-wise h * W^T with W = P L (U + diag(sign * exp(log_diag))).
class ChannelMixing {
public:
    ChannelMixing() = default;
    ChannelMixing(const std::string& name, Index dim, bool random, Rng& rng)
    {
        Matrix perm = Matrix::Identity(dim, dim);
        Matrix lower = Matrix::Zero(dim, dim);
        Matrix upper = Matrix::Zero(dim, dim);
        Matrix log_diag = Matrix::Zero(1, dim);
        sign_ = RowVector::Ones(dim);
        if (random) {
            const Matrix q = Eigen::HouseholderQR<Matrix>(nn::random_normal(dim, dim, 1.0, rng)).householderQ();
            Eigen::PartialPivLU<Matrix> lu(q);
            const Matrix packed = lu.matrixLU();
            perm = lu.permutationP().transpose().toDenseMatrix().cast<double>();
            lower = packed.triangularView<Eigen::StrictlyLower>();
            upper = packed.triangularView<Eigen::StrictlyUpper>();
            for (Index i = 0; i < dim; ++i) {
                sign_[i] = packed(i, i) < 0.0 ? -1.0 : 1.0;
                log_diag(0, i) = std::log(std::abs(packed(i, i)));
            }
        }
        perm_ = perm;
        lower_ = Parameter(name + ".lower", lower);
        upper_ = Parameter(name + ".upper", upper);
        log_diag_ = Parameter(name + ".log_diag", log_diag);
    }

    Index dim() const { return perm_.rows(); }

    Matrix weight() const
    {
        const Index d = dim();
        Matrix l = lower_.value.triangularView<Eigen::StrictlyLower>();
        l += Matrix::Identity(d, d);
        Matrix u = upper_.value.triangularView<Eigen::StrictlyUpper>();
        u.diagonal() += (sign_.array() * log_diag_.value.row(0).array().exp()).matrix().transpose();
        return perm_ * l * u;
    }

    std::pair<Var, Var> inverse(Graph& g, Var h)
    {
        const Index d = dim();
        const Matrix lmask = Matrix::Ones(d, d).triangularView<Eigen::StrictlyLower>();
        const Matrix umask = Matrix::Ones(d, d).triangularView<Eigen::StrictlyUpper>();
        Var ld = g.param(log_diag_);
        Var l = ad::add(ad::mul(g.param(lower_), g.constant(lmask)), g.constant(Matrix::Identity(d, d)));
        Var u = ad::add(ad::mul(g.param(upper_), g.constant(umask)),
                        ad::diag(ad::mul(ad::exp(ld), g.constant(sign_))));
        Var w = ad::matmul(g.constant(perm_), ad::matmul(l, u));
        return {ad::matmul_nt(h, w), ad::scale(ad::sum(ld), static_cast<double>(h.rows()))};
    }

    Matrix forward(const Matrix& h2) const
    {
        // h = h2 * W^{-T}
        const Matrix w = weight();
        return w.partialPivLu().solve(h2.transpose()).transpose();
    }

    void collect(nn::ParameterList& out)
    {
        out.push_back(&lower_);
        out.push_back(&upper_);
        out.push_back(&log_diag_);
    }

    const Matrix& permutation() const { return perm_; }
    const RowVector& sign() const { return sign_; }
    void set_constants(Matrix perm, RowVector sign)
    {
        perm_ = std::move(perm);
        sign_ = std::move(sign);
    }

private:
    Matrix perm_;
    RowVector sign_;
    Parameter lower_;
    Parameter upper_;
    Parameter log_diag_;
};

/// Affine coupling: the conditioning half `a` is passed through, the other
/// half is mapped as b * exp(log_scale) + shift in the data -> latent direction.
class AffineCoupling {
public:
    AffineCoupling() = default;
    AffineCoupling(const std::string& name, Index dim, Index cond_dim, Index hidden, bool condition_on_first,
                   double bound, int cond_context, Rng& rng)
        : dim_(dim), first_(condition_on_first), bound_(bound), cond_context_(cond_context)
    {
        const Index lo = dim / 2, hi = dim - dim / 2;
        na_ = first_ ? lo : hi;
        nb_ = dim - na_;
        l1_ = nn::Linear(name + ".l1", 3 * na_ + (2 * cond_context + 1) * cond_dim, hidden, rng);
        l2_ = nn::Linear(name + ".l2", hidden, hidden, rng);
        out_ = nn::Linear::zeros(name + ".out", hidden, 2 * nb_);
    }

    std::pair<Var, Var> inverse(Graph& g, Var h, Var cond, const std::vector<Index>& offsets)
    {
        auto [a, b] = split(h);
        auto [shift, ls] = params(g, a, cond, offsets);
        Var zb = ad::add(ad::mul(b, ad::exp(ls)), shift);
        return {merge(a, zb), ad::sum(ls)};
    }

    Var forward(Graph& g, Var z, Var cond, const std::vector<Index>& offsets)
    {
        auto [a, zb] = split(z);
        auto [shift, ls] = params(g, a, cond, offsets);
        Var b = ad::mul(ad::sub(zb, shift), ad::exp(ad::scale(ls, -1.0)));
        return merge(a, b);
    }

    void collect(nn::ParameterList& out)
    {
        l1_.collect(out);
        l2_.collect(out);
        out_.collect(out);
    }

    nn::Linear& output_layer() { return out_; }

private:
    std::pair<Var, Var> split(Var h) const
    {
        if (first_) return {ad::slice_cols(h, 0, na_), ad::slice_cols(h, na_, nb_)};
        return {ad::slice_cols(h, nb_, na_), ad::slice_cols(h, 0, nb_)};
    }

    Var merge(Var a, Var b) const { return first_ ? ad::concat_cols({a, b}) : ad::concat_cols({b, a}); }

    std::pair<Var, Var> params(Graph& g, Var a, Var cond, const std::vector<Index>& offsets)
    {
        Var x = ad::concat_cols({nn::context3(a, offsets), nn::context_window(cond, offsets, cond_context_)});
        Var hdn = ad::tanh(l2_(g, ad::tanh(l1_(g, x))));
        Var out = out_(g, hdn);
        return {ad::slice_cols(out, 0, nb_), ad::soft_clamp(ad::slice_cols(out, nb_, nb_), bound_)};
    }

    Index dim_ = 0, na_ = 0, nb_ = 0;
    bool first_ = true;
    double bound_ = 5.0;
    int cond_context_ = 2;
    nn::Linear l1_, l2_, out_;
};

struct FlowStep {
    ActNorm actnorm;
    ChannelMixing mixing;
    AffineCoupling coupling;
};

class FlowModel {
public:
    FlowModel() = default;
    FlowModel(const FlowConfig& cfg, Rng& rng) : cfg_(cfg)
    {
        FLOWCONVERT_EXPECT(cfg.dim >= 1, ConfigError, "flow dim must be >= 1");
        FLOWCONVERT_EXPECT(cfg.steps >= 1, ConfigError, "flow needs at least one step");
        FLOWCONVERT_EXPECT(cfg.cond_context >= 0, ConfigError, "flow cond_context must be >= 0");
        for (int s = 0; s < cfg.steps; ++s) {
            const std::string name = "flow.step" + std::to_string(s);
            FlowStep step;
            step.actnorm = ActNorm(name + ".actnorm", cfg.dim);
            step.mixing = ChannelMixing(name + ".mixing", cfg.dim, cfg.random_mixing, rng);
            step.coupling = AffineCoupling(name + ".coupling", cfg.dim, cfg.cond_dim, cfg.hidden, s % 2 == 0,
                                           cfg.log_scale_bound, cfg.cond_context, rng);
            steps_.push_back(std::move(step));
        }
    }

    const FlowConfig& config() const { return cfg_; }
    std::vector<FlowStep>& steps() { return steps_; }
    const std::vector<FlowStep>& steps() const { return steps_; }

    /// Data -> latent with the summed log|det J| as a 1x1 node.
    std::pair<Var, Var> inverse(Graph& g, Var x, Var cond, const std::vector<Index>& offsets)
    {
        Var h = x;
        Var logdet = g.constant(Matrix::Zero(1, 1));
        for (auto& step : steps_) {
            auto [h1, ld1] = step.actnorm.inverse(g, h);
            auto [h2, ld2] = step.mixing.inverse(g, h1);
            auto [h3, ld3] = step.coupling.inverse(g, h2, cond, offsets);
            logdet = ad::add(logdet, ad::add(ld1, ad::add(ld2, ld3)));
            h = h3;
        }
        return {h, logdet};
    }

    /// Mean negative log-likelihood per dimension under a standard normal prior.
    Var nll(Graph& g, Var x, Var cond, const std::vector<Index>& offsets)
    {
        auto [z, logdet] = inverse(g, x, cond, offsets);
        const double n = static_cast<double>(x.rows() * x.cols());
        Var energy = ad::sub(ad::scale(ad::sum(ad::square(z)), 0.5), logdet);
        return ad::add_scalar(ad::scale(energy, 1.0 / n), 0.5 * std::log(2.0 * M_PI));
    }

    std::pair<LatentSequence, double> inverse(const MelSpectrogram& x, const FrameConditioning& cond) const
    {
        check_inputs(x.frames, cond);
        FLOWCONVERT_EXPECT(x.frames.allFinite(), NumericError, "flow inverse: non-finite input");
        Graph g(false);
        auto& self = const_cast<FlowModel&>(*this);
        auto [z, logdet] = self.inverse(g, g.constant(x.frames), g.constant(cond.frames), {0, x.frame_count()});
        return {LatentSequence{z.value()}, logdet.value()(0, 0)};
    }

    MelSpectrogram forward(const LatentSequence& z, const FrameConditioning& cond) const
    {
        check_inputs(z.frames, cond);
        FLOWCONVERT_EXPECT(z.frames.allFinite(), NumericError, "flow forward: non-finite input");
        Graph g(false);
        auto& self = const_cast<FlowModel&>(*this);
        const std::vector<Index> offsets{0, z.frame_count()};
        Var c = g.constant(cond.frames);
        Matrix h = z.frames;
        for (auto it = self.steps_.rbegin(); it != self.steps_.rend(); ++it) {
            h = it->coupling.forward(g, g.constant(h), c, offsets).value();
            h = it->mixing.forward(h);
            h = it->actnorm.forward(h);
        }
        return MelSpectrogram{h};
    }

    double nll(const MelSpectrogram& x, const FrameConditioning& cond) const
    {
        check_inputs(x.frames, cond);
        FLOWCONVERT_EXPECT(x.frames.allFinite(), NumericError, "flow nll: non-finite input");
        Graph g(false);
        auto& self = const_cast<FlowModel&>(*this);
        return self.nll(g, g.constant(x.frames), g.constant(cond.frames), {0, x.frame_count()}).value()(0, 0);
    }

    /// Data-dependent actnorm initialization, step by step, on one batch.
    void data_init(const Matrix& x, const Matrix& cond, const std::vector<Index>& offsets)
    {
        Graph g(false);
        Var c = g.constant(cond);
        Matrix h = x;
        for (auto& step : steps_) {
            step.actnorm.data_init(h);
            Var v = g.constant(h);
            v = step.actnorm.inverse(g, v).first;
            v = step.mixing.inverse(g, v).first;
            v = step.coupling.inverse(g, v, c, offsets).first;
            h = v.value();
        }
    }

    void collect(nn::ParameterList& out)
    {
        for (auto& s : steps_) {
            s.actnorm.collect(out);
            s.mixing.collect(out);
            s.coupling.collect(out);
        }
    }

    nn::ParameterList parameters()
    {
        nn::ParameterList out;
        collect(out);
        return out;
    }

private:
    void check_inputs(const Matrix& x, const FrameConditioning& cond) const
    {
        if (x.cols() != cfg_.dim)
            throw ContractError("flow: expected " + std::to_string(cfg_.dim) + " channels, got " +
                                std::to_string(x.cols()));
        if (x.rows() != cond.frame_count())
            throw ContractError("flow: " + std::to_string(x.rows()) + " frames but conditioning has " +
                                std::to_string(cond.frame_count()));
        if (cond.channels() != cfg_.cond_dim)
            throw ContractError("flow: conditioning has " + std::to_string(cond.channels()) + " channels, expected " +
                                std::to_string(cfg_.cond_dim));
        FLOWCONVERT_EXPECT(x.rows() >= 1, ContractError, "flow: empty sequence");
    }

    FlowConfig cfg_;
    std::vector<FlowStep> steps_;
};

} // namespace flowconvert

#include "training.hpp"

namespace flowconvert {

struct FlowTrainConfig {
    int steps = 2000;
    int batch_size = 4;
    double lr = 1e-3;
    double clip_norm = 5.0;
    int log_every = 25;
    int heldout_utterances = 32;
};

/// Feature stack and flow, trained jointly by maximum likelihood.
struct TrainedFlow {
    FeatureStack features;
    FlowModel flow;
    TrainLog log;

    nn::ParameterList parameters()
    {
        auto p = features.parameters();
        flow.collect(p);
        return p;
    }

    FrameConditioning conditioning(const PhonemeSequence& seq, int speaker, int accent) const
    {
        return features.build_conditioning(seq, speaker, accent);
    }
};

namespace detail {

struct FrameBatch {
    Matrix mel;
    std::vector<ConditioningItem> items;
};

inline FrameBatch make_frame_batch(const std::vector<const Utterance*>& utts)
{
    FrameBatch b;
    Index total = 0;
    for (const auto* u : utts) total += u->mel.frame_count();
    b.mel.resize(total, utts.front()->mel.dim());
    Index t = 0;
    for (const auto* u : utts) {
        b.mel.middleRows(t, u->mel.frame_count()) = u->mel.frames;
        t += u->mel.frame_count();
        b.items.push_back(ConditioningItem{&u->phoneme_seq, u->speaker, u->accent});
    }
    return b;
}

inline double batch_nll(TrainedFlow& m, const std::vector<const Utterance*>& utts)
{
    if (utts.empty()) return 0.0;
    auto batch = make_frame_batch(utts);
    Graph g(false);
    std::vector<Index> offsets;
    Var cond = m.features.conditioning(g, batch.items, offsets);
    return m.flow.nll(g, g.constant(batch.mel), cond, offsets).value()(0, 0);
}

} // namespace detail

/// Mean per-dimension NLL over a set of utterances (frame-weighted).
inline double mean_nll(const TrainedFlow& model, const std::vector<const Utterance*>& utts)
{
    return detail::batch_nll(const_cast<TrainedFlow&>(model), utts);
}

/// Random init followed by data-dependent actnorm init on the first batch.
inline TrainedFlow init_flow(const std::vector<const Utterance*>& train, const FeatureConfig& fcfg,
                             FlowConfig flow_cfg, const FlowTrainConfig& tcfg, std::uint64_t seed)
{
    FLOWCONVERT_EXPECT(!train.empty(), ContractError, "train_flow: no training utterances");
    flow_cfg.cond_dim = fcfg.conditioning_dim();
    flow_cfg.dim = static_cast<int>(train.front()->mel.dim());
    Rng rng(derive_seed(seed, "flow.init"));
    TrainedFlow m{FeatureStack(fcfg, rng), FlowModel(flow_cfg, rng), {}};
    BatchSampler sampler(train.size(), static_cast<std::size_t>(tcfg.batch_size), derive_seed(seed, "flow.batches"));
    std::vector<const Utterance*> first;
    for (auto i : sampler.next()) first.push_back(train[i]);
    auto batch = detail::make_frame_batch(first);
    Graph g(false);
    std::vector<Index> offsets;
    Var cond = m.features.conditioning(g, batch.items, offsets);
    m.flow.data_init(batch.mel, cond.value(), offsets);
    return m;
}

/// Trains features + flow by minimizing mean NLL. Deterministic given seed.
inline TrainedFlow train_flow(const std::vector<const Utterance*>& train, const std::vector<const Utterance*>& heldout,
                              const FeatureConfig& fcfg, const FlowConfig& flow_cfg, const FlowTrainConfig& tcfg,
                              std::uint64_t seed)
{
    FLOWCONVERT_EXPECT(tcfg.steps >= 0, ConfigError, "train.flow.steps must be >= 0");
    TrainedFlow m = init_flow(train, fcfg, flow_cfg, tcfg, seed);
    std::vector<const Utterance*> held(heldout.begin(),
                                       heldout.begin() + std::min<std::ptrdiff_t>(tcfg.heldout_utterances,
                                                                                  static_cast<std::ptrdiff_t>(heldout.size())));
    m.log.initial_heldout = detail::batch_nll(m, held);

    // The sampler replays the init batch first; that is intended.
    BatchSampler sampler(train.size(), static_cast<std::size_t>(tcfg.batch_size), derive_seed(seed, "flow.batches"));
    auto params = m.parameters();
    nn::Adam opt(params, {.lr = tcfg.lr, .clip_norm = tcfg.clip_norm});
    for (int step = 1; step <= tcfg.steps; ++step) {
        std::vector<const Utterance*> utts;
        for (auto i : sampler.next()) utts.push_back(train[i]);
        auto batch = detail::make_frame_batch(utts);
        Graph g;
        std::vector<Index> offsets;
        Var cond = m.features.conditioning(g, batch.items, offsets);
        Var loss = m.flow.nll(g, g.constant(batch.mel), cond, offsets);
        opt.zero_grad();
        g.backward(loss);
        const double l = loss.value()(0, 0);
        const double gn = opt.step();
        check_finite_loss(l, step, gn, "flow training");
        if (!nn::all_finite(params)) throw TrainingError("flow training produced non-finite parameters at step " +
                                                         std::to_string(step));
        if (step % tcfg.log_every == 0 || step == 1 || step == tcfg.steps) m.log.curve.emplace_back(step, l);
    }
    m.log.steps = tcfg.steps;
    m.log.final_heldout = detail::batch_nll(m, held);
    return m;
}

} // namespace flowconvert
