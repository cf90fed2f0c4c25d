#pragma once

// Attention over latent frames: frame-rate phoneme conditioning (plus
// positional channels) forms the queries; latent frames (plus positional
// channels) form the keys, latent frames alone the values. Trained to denoise
// time-dropout corrupted latents. Positions are measured in phonemes when the
// durations of both sides are known, so the block never sees a frame-level
// alignment between them.

#include <cmath>
#include <vector>

#include "flow.hpp"
#include "nn.hpp"
#include "training.hpp"

namespace flowconvert {

struct AttentionConfig {
    int dim = 16;
    int cond_dim = 44;
    int n_heads = 2;
    int head_dim = 16;
    int position_channels = 16;
    double max_position_frequency = 128.0;  // half-cycles over the whole sequence
};

struct TimeDropoutConfig {
    double rate = 0.3;
    std::uint64_t seed = 0;
};

/// Zeroes each frame independently with probability `rate`; survivors are not rescaled.
inline LatentSequence time_dropout(const LatentSequence& z, const TimeDropoutConfig& cfg)
{
    if (!(cfg.rate >= 0.0 && cfg.rate <= 1.0)) throw ContractError("time_dropout: rate must be in [0, 1]");
    LatentSequence out = z;
    Rng rng(cfg.seed);
    for (Index t = 0; t < out.frame_count(); ++t)
        if (rng.bernoulli(cfg.rate)) out.frames.row(t).setZero();
    return out;
}

/// Per-frame normalized position (t + 0.5) / T.
inline std::vector<double> uniform_progress(Index frames)
{
    std::vector<double> u(static_cast<std::size_t>(frames));
    for (Index t = 0; t < frames; ++t) u[static_cast<std::size_t>(t)] = (static_cast<double>(t) + 0.5) / static_cast<double>(frames);
    return u;
}

/// Per-frame position measured in phonemes: (k + (j + 0.5) / d_k) / N for
/// frame j of phoneme k.
inline std::vector<double> phoneme_progress(const std::vector<int>& durations)
{
    FLOWCONVERT_EXPECT(!durations.empty(), ContractError, "phoneme_progress: no phonemes");
    std::vector<double> u;
    const double n = static_cast<double>(durations.size());
    for (std::size_t k = 0; k < durations.size(); ++k) {
        FLOWCONVERT_EXPECT(durations[k] >= 1, ContractError, "phoneme_progress: durations must be >= 1");
        for (int j = 0; j < durations[k]; ++j)
            u.push_back((static_cast<double>(k) + (j + 0.5) / durations[k]) / n);
    }
    return u;
}

/// Sinusoids of a position u in [0, 1] at geometrically spaced frequencies
/// from 1 to `max_frequency` half-cycles over the sequence.
inline Matrix positional_channels(const std::vector<double>& progress, int channels, double max_frequency = 48.0)
{
    const Index frames = static_cast<Index>(progress.size());
    Matrix out(frames, channels);
    const int n_freq = channels / 2;
    for (Index t = 0; t < frames; ++t) {
        const double u = progress[static_cast<std::size_t>(t)];
        for (int k = 0; k < n_freq; ++k) {
            const double freq = n_freq > 1 ? std::pow(max_frequency, static_cast<double>(k) / (n_freq - 1)) : 1.0;
            out(t, 2 * k) = std::sin(M_PI * freq * u);
            out(t, 2 * k + 1) = std::cos(M_PI * freq * u);
        }
        if (channels % 2) out(t, channels - 1) = u;
    }
    return out;
}

inline Matrix positional_channels(Index frames, int channels, double max_frequency = 48.0)
{
    return positional_channels(uniform_progress(frames), channels, max_frequency);
}

struct AttendResult {
    LatentSequence output;
    std::vector<Matrix> weights;  // one T_q x T_s matrix per head
    double mean_entropy = 0.0;
};

class AttentionBlock {
public:
    AttentionBlock() = default;
    AttentionBlock(const AttentionConfig& cfg, Rng& rng)
        : cfg_(cfg),
          query_proj_("attention.query", cfg.cond_dim + cfg.position_channels, cfg.n_heads * cfg.head_dim, rng),
          key_proj_("attention.key", cfg.dim + cfg.position_channels, cfg.n_heads * cfg.head_dim, rng),
          value_proj_("attention.value", cfg.dim, cfg.n_heads * cfg.head_dim, rng),
          output_proj_("attention.output", cfg.n_heads * cfg.head_dim, cfg.dim, rng)
    {
        FLOWCONVERT_EXPECT(cfg.n_heads >= 1 && cfg.head_dim >= 1, ConfigError, "attention needs heads");
    }

    const AttentionConfig& config() const { return cfg_; }
    nn::Linear& query_proj() { return query_proj_; }
    nn::Linear& key_proj() { return key_proj_; }
    nn::Linear& value_proj() { return value_proj_; }
    nn::Linear& output_proj() { return output_proj_; }

    /// queries: T_q x cond_dim, z: T_s x dim -> T_q x dim. Positions default
    /// to uniform progress over each sequence.
    Var attend(Graph& g, Var queries, Var z, std::vector<Matrix>* weights = nullptr,
               const std::vector<double>* query_progress = nullptr, const std::vector<double>* key_progress = nullptr)
    {
        FLOWCONVERT_EXPECT(queries.rows() >= 1 && z.rows() >= 1, ContractError, "attend: empty sequence");
        FLOWCONVERT_EXPECT(queries.cols() == cfg_.cond_dim, ContractError, "attend: query channel mismatch");
        FLOWCONVERT_EXPECT(z.cols() == cfg_.dim, ContractError, "attend: latent channel mismatch");
        FLOWCONVERT_EXPECT(!query_progress || static_cast<Index>(query_progress->size()) == queries.rows(),
                           ContractError, "attend: query positions do not match the queries");
        FLOWCONVERT_EXPECT(!key_progress || static_cast<Index>(key_progress->size()) == z.rows(), ContractError,
                           "attend: key positions do not match the latents");
        const int pc = cfg_.position_channels;
        const double mf = cfg_.max_position_frequency;
        Var qpos = g.constant(query_progress ? positional_channels(*query_progress, pc, mf)
                                             : positional_channels(queries.rows(), pc, mf));
        Var kpos = g.constant(key_progress ? positional_channels(*key_progress, pc, mf)
                                           : positional_channels(z.rows(), pc, mf));
        Var q = query_proj_(g, ad::concat_cols({queries, qpos}));
        Var k = key_proj_(g, ad::concat_cols({z, kpos}));
        Var v = value_proj_(g, z);
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim));
        std::vector<Var> heads;
        for (int h = 0; h < cfg_.n_heads; ++h) {
            const Index off = static_cast<Index>(h) * cfg_.head_dim;
            Var scores = ad::scale(ad::matmul_nt(ad::slice_cols(q, off, cfg_.head_dim),
                                                 ad::slice_cols(k, off, cfg_.head_dim)),
                                   inv_sqrt);
            Var attn = ad::softmax_rows(scores);
            if (weights) weights->push_back(attn.value());
            heads.push_back(ad::matmul(attn, ad::slice_cols(v, off, cfg_.head_dim)));
        }
        return output_proj_(g, heads.size() == 1 ? heads.front() : ad::concat_cols(heads));
    }

    AttendResult attend_with_weights(const FrameConditioning& queries, const LatentSequence& z,
                                     const std::vector<double>* query_progress = nullptr,
                                     const std::vector<double>* key_progress = nullptr) const
    {
        Graph g(false);
        auto& self = const_cast<AttentionBlock&>(*this);
        AttendResult r;
        r.output.frames = self.attend(g, g.constant(queries.frames), g.constant(z.frames), &r.weights, query_progress,
                                      key_progress)
                              .value();
        r.mean_entropy = mean_entropy(r.weights);
        return r;
    }

    LatentSequence attend(const FrameConditioning& queries, const LatentSequence& z) const
    {
        Graph g(false);
        auto& self = const_cast<AttentionBlock&>(*this);
        return LatentSequence{self.attend(g, g.constant(queries.frames), g.constant(z.frames)).value()};
    }

    static double mean_entropy(const std::vector<Matrix>& weights)
    {
        double h = 0.0;
        Index n = 0;
        for (const auto& w : weights) {
            h -= (w.array() * (w.array() + 1e-300).log()).sum();
            n += w.rows();
        }
        return n ? h / static_cast<double>(n) : 0.0;
    }

    void collect(nn::ParameterList& out)
    {
        query_proj_.collect(out);
        key_proj_.collect(out);
        value_proj_.collect(out);
        output_proj_.collect(out);
    }

    nn::ParameterList parameters()
    {
        nn::ParameterList out;
        collect(out);
        return out;
    }

private:
    AttentionConfig cfg_;
    nn::Linear query_proj_, key_proj_, value_proj_, output_proj_;
};

struct AttentionTrainConfig {
    int steps = 1000;
    int batch_size = 4;
    double lr = 2e-3;
    double clip_norm = 5.0;
    double dropout_rate = 0.3;
    int log_every = 25;
};

/// Source-side inputs for one utterance under a frozen flow.
struct LatentExample {
    Matrix queries;                 // frame conditioning, T x C
    Matrix latent;                  // z = inverse(x, cond), T x D
    std::vector<double> progress;   // phoneme_progress of the source durations
};

inline std::vector<LatentExample> encode_latents(const TrainedFlow& flow, const std::vector<const Utterance*>& utts)
{
    std::vector<LatentExample> out;
    out.reserve(utts.size());
    for (const auto* u : utts) {
        FrameConditioning c = flow.conditioning(u->phoneme_seq, u->speaker, u->accent);
        out.push_back({c.frames, flow.flow.inverse(u->mel, c).first.frames, phoneme_progress(u->phoneme_seq.durations)});
    }
    return out;
}

struct DenoisingScore {
    double attend_mse = 0.0;     // MSE(attend(q, noisy z), z)
    double corrupted_mse = 0.0;  // MSE(noisy z, z)
    double mean_entropy = 0.0;
};

inline DenoisingScore denoising_score(const AttentionBlock& block, const std::vector<LatentExample>& examples,
                                      double rate, std::uint64_t seed)
{
    DenoisingScore s;
    double n = 0.0, entropy = 0.0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto& ex = examples[i];
        const LatentSequence noisy = time_dropout(LatentSequence{ex.latent}, {rate, derive_seed(seed, "heldout", i)});
        const auto* pos = ex.progress.empty() ? nullptr : &ex.progress;
        const auto r = block.attend_with_weights(FrameConditioning{ex.queries}, noisy, pos, pos);
        s.attend_mse += (r.output.frames - ex.latent).squaredNorm();
        s.corrupted_mse += (noisy.frames - ex.latent).squaredNorm();
        n += static_cast<double>(ex.latent.size());
        entropy += r.mean_entropy;
    }
    if (n > 0) {
        s.attend_mse /= n;
        s.corrupted_mse /= n;
        s.mean_entropy = entropy / static_cast<double>(examples.size());
    }
    return s;
}

struct TrainedAttention {
    AttentionBlock block;
    TrainLog log;
    DenoisingScore heldout;
};

/// L2 denoising of time-dropout corrupted source latents; the flow is frozen.
/// A zero dropout rate is allowed and usually collapses towards an identity
/// alignment; the mean attention entropy in `heldout` reports it.
inline TrainedAttention train_attention(const std::vector<LatentExample>& train,
                                        const std::vector<LatentExample>& heldout, const AttentionConfig& cfg,
                                        const AttentionTrainConfig& tcfg, std::uint64_t seed)
{
    FLOWCONVERT_EXPECT(!train.empty(), ContractError, "train_attention: no training utterances");
    FLOWCONVERT_EXPECT(tcfg.steps >= 0, ConfigError, "train.attention.steps must be >= 0");
    if (!(tcfg.dropout_rate >= 0.0 && tcfg.dropout_rate <= 1.0))
        throw ConfigError("train.attention.dropout_rate must be in [0, 1]");
    Rng rng(derive_seed(seed, "attention.init"));
    TrainedAttention out{AttentionBlock(cfg, rng), {}, {}};
    const std::uint64_t eval_seed = derive_seed(seed, "attention.eval");
    out.log.initial_heldout = denoising_score(out.block, heldout, tcfg.dropout_rate, eval_seed).attend_mse;

    BatchSampler sampler(train.size(), static_cast<std::size_t>(tcfg.batch_size), derive_seed(seed, "attention.batches"));
    Rng dropout_stream(derive_seed(seed, "attention.dropout"));
    auto params = out.block.parameters();
    nn::Adam opt(params, {.lr = tcfg.lr, .clip_norm = tcfg.clip_norm});
    for (int step = 1; step <= tcfg.steps; ++step) {
        Graph g;
        Var loss;
        double count = 0.0;
        for (auto i : sampler.next()) {
            const auto& ex = train[i];
            const LatentSequence noisy =
                time_dropout(LatentSequence{ex.latent}, {tcfg.dropout_rate, dropout_stream.next_u64()});
            const auto* pos = ex.progress.empty() ? nullptr : &ex.progress;
            Var pred = out.block.attend(g, g.constant(ex.queries), g.constant(noisy.frames), nullptr, pos, pos);
            Var err = ad::sum(ad::square(ad::sub(pred, g.constant(ex.latent))));
            loss = loss.valid() ? ad::add(loss, err) : err;
            count += static_cast<double>(ex.latent.size());
        }
        loss = ad::scale(loss, 1.0 / count);
        opt.zero_grad();
        g.backward(loss);
        const double l = loss.value()(0, 0);
        const double gn = opt.step();
        check_finite_loss(l, step, gn, "attention training");
        if (step % tcfg.log_every == 0 || step == 1 || step == tcfg.steps) out.log.curve.emplace_back(step, l);
    }
    out.log.steps = tcfg.steps;
    out.heldout = denoising_score(out.block, heldout, tcfg.dropout_rate, eval_seed);
    out.log.final_heldout = out.heldout.attend_mse;
    return out;
}

} // namespace flowconvert
