#pragma once

// Duration model and the warping-matrix machinery used to retime latent
// sequences phoneme by phoneme.

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>
#include <vector>

#include "features.hpp"
#include "flow.hpp"
#include "nn.hpp"
#include "training.hpp"

namespace flowconvert {

struct DurationConfig {
    int n_phonemes = 40;
    int n_accents = 4;
    int phoneme_embedding_dim = 32;
    int accent_dim = 4;
    int encoder_dim = 32;
    int mixing_layers = 2;
};

struct DurationTrainConfig {
    int steps = 1000;
    int batch_size = 8;
    double lr = 3e-3;
    double clip_norm = 5.0;
    int log_every = 25;
};

/// Nearest integer with ties rounded up, clamped to >= 1.
inline int round_duration(double frames) { return std::max(1, static_cast<int>(std::floor(frames + 0.5))); }

/// Phoneme encoder (own tables) with a per-phoneme log-duration head.
class DurationModel {
public:
    DurationModel() = default;
    DurationModel(const DurationConfig& cfg, Rng& rng)
        : cfg_(cfg),
          accents_(EmbeddingKind::accent, "duration.accent_embedding", cfg.n_accents, cfg.accent_dim, rng),
          encoder_("duration.encoder",
                   EncoderConfig{cfg.n_phonemes, cfg.phoneme_embedding_dim, cfg.accent_dim, cfg.encoder_dim,
                                 cfg.mixing_layers},
                   rng),
          head_(nn::Linear::zeros("duration.head", cfg.encoder_dim, 1))
    {
    }

    const DurationConfig& config() const { return cfg_; }
    const EmbeddingTable& accent_table() const { return accents_; }

    /// Predicted log-durations (N x 1) for sequences stacked back to back.
    Var log_durations(Graph& g, const std::vector<int>& phonemes, const std::vector<int>& accents,
                      const std::vector<Index>& offsets)
    {
        Var enc = encoder_.encode(g, phonemes, accents_.lookup(g, accents), offsets);
        return head_(g, enc);
    }

    Var log_durations(Graph& g, const std::vector<int>& phonemes, Var accent_rows, const std::vector<Index>& offsets)
    {
        return head_(g, encoder_.encode(g, phonemes, accent_rows, offsets));
    }

    std::vector<int> predict_durations(const std::vector<int>& phonemes, const RowVector& accent_emb) const
    {
        FLOWCONVERT_EXPECT(accent_emb.size() == cfg_.accent_dim, ContractError, "accent embedding has wrong size");
        if (phonemes.empty()) return {};
        Graph g(false);
        auto& self = const_cast<DurationModel&>(*this);
        const Index n = static_cast<Index>(phonemes.size());
        const Matrix pred =
            self.log_durations(g, phonemes, g.constant(accent_emb.replicate(n, 1)), {0, n}).value();
        std::vector<int> out;
        out.reserve(phonemes.size());
        for (Index k = 0; k < n; ++k) out.push_back(round_duration(std::exp(pred(k, 0))));
        return out;
    }

    std::vector<int> predict_durations(const std::vector<int>& phonemes, int accent) const
    {
        return predict_durations(phonemes, accents_.row(accent));
    }

    void collect(nn::ParameterList& out)
    {
        out.push_back(&accents_.rows);
        encoder_.collect(out);
        head_.collect(out);
    }

    nn::ParameterList parameters()
    {
        nn::ParameterList out;
        collect(out);
        return out;
    }

private:
    DurationConfig cfg_;
    EmbeddingTable accents_;
    PhonemeEncoder encoder_;
    nn::Linear head_;
};

struct TrainedDuration {
    DurationModel model;
    TrainLog log;
};

/// Mean absolute error in frames and mean true duration over a set of utterances.
inline std::pair<double, double> duration_error(const DurationModel& model, const std::vector<const Utterance*>& utts)
{
    double err = 0.0, total = 0.0;
    std::size_t n = 0;
    for (const auto* u : utts) {
        const auto pred = model.predict_durations(u->phoneme_seq.phonemes, u->accent);
        for (std::size_t k = 0; k < pred.size(); ++k) {
            err += std::abs(pred[k] - u->phoneme_seq.durations[k]);
            total += u->phoneme_seq.durations[k];
            ++n;
        }
    }
    if (n == 0) return {0.0, 0.0};
    return {err / static_cast<double>(n), total / static_cast<double>(n)};
}

/// L2 regression of log-durations on (phonemes, accent).
inline TrainedDuration train_duration_model(const std::vector<const Utterance*>& train,
                                            const std::vector<const Utterance*>& heldout, const DurationConfig& cfg,
                                            const DurationTrainConfig& tcfg, std::uint64_t seed)
{
    FLOWCONVERT_EXPECT(!train.empty(), ContractError, "train_duration_model: no training utterances");
    FLOWCONVERT_EXPECT(tcfg.steps >= 0, ConfigError, "train.duration.steps must be >= 0");
    Rng rng(derive_seed(seed, "duration.init"));
    TrainedDuration out{DurationModel(cfg, rng), {}};
    out.log.initial_heldout = duration_error(out.model, heldout).first;
    BatchSampler sampler(train.size(), static_cast<std::size_t>(tcfg.batch_size), derive_seed(seed, "duration.batches"));
    auto params = out.model.parameters();
    nn::Adam opt(params, {.lr = tcfg.lr, .clip_norm = tcfg.clip_norm});
    for (int step = 1; step <= tcfg.steps; ++step) {
        std::vector<int> phonemes, accents;
        std::vector<Index> offsets{0};
        std::vector<double> target;
        for (auto i : sampler.next()) {
            const auto& seq = train[i]->phoneme_seq;
            phonemes.insert(phonemes.end(), seq.phonemes.begin(), seq.phonemes.end());
            accents.insert(accents.end(), seq.size(), train[i]->accent);
            for (int d : seq.durations) target.push_back(std::log(static_cast<double>(d)));
            offsets.push_back(static_cast<Index>(phonemes.size()));
        }
        Graph g;
        Var pred = out.model.log_durations(g, phonemes, accents, offsets);
        Var loss = ad::mean(ad::square(ad::sub(pred, g.constant(Eigen::Map<Matrix>(target.data(),
                                                                                 static_cast<Index>(target.size()), 1)))));
        opt.zero_grad();
        g.backward(loss);
        const double l = loss.value()(0, 0);
        const double gn = opt.step();
        check_finite_loss(l, step, gn, "duration training");
        if (step % tcfg.log_every == 0 || step == 1 || step == tcfg.steps) out.log.curve.emplace_back(step, l);
    }
    out.log.steps = tcfg.steps;
    out.log.final_heldout = duration_error(out.model, heldout).first;
    return out;
}

// ---------------------------------------------------------------------------

struct WarpEntry {
    Index row;
    Index col;
    double weight;
};

/// Sparse T_target x T_source interpolation operator (at most two nonzeros per row).
class WarpMatrix {
public:
    WarpMatrix() = default;
    WarpMatrix(Index rows, Index cols, std::vector<WarpEntry> entries)
        : rows_(rows), cols_(cols), entries_(std::move(entries))
    {
    }

    Index rows() const { return rows_; }
    Index cols() const { return cols_; }
    const std::vector<WarpEntry>& entries() const { return entries_; }

    Matrix dense() const
    {
        Matrix m = Matrix::Zero(rows_, cols_);
        for (const auto& e : entries_) m(e.row, e.col) += e.weight;
        return m;
    }

    /// "row col weight" triplets, one per line.
    void dump(std::ostream& os) const
    {
        os.precision(17);
        os << "# warp " << rows_ << " x " << cols_ << "\n";
        for (const auto& e : entries_) os << e.row << " " << e.col << " " << e.weight << "\n";
    }

    std::string dump() const
    {
        std::ostringstream os;
        dump(os);
        return os.str();
    }

private:
    Index rows_ = 0;
    Index cols_ = 0;
    std::vector<WarpEntry> entries_;
};

/// Center-aligned piecewise-linear resampling inside each phoneme: target-local
/// frame j maps to source-local position (j + 0.5) * s / t - 0.5, clamped to [0, s - 1].
inline WarpMatrix build_warp_matrix(const std::vector<int>& src_durations, const std::vector<int>& tgt_durations)
{
    if (src_durations.size() != tgt_durations.size())
        throw ContractError("build_warp_matrix: " + std::to_string(src_durations.size()) + " source vs " +
                            std::to_string(tgt_durations.size()) + " target phonemes");
    std::vector<WarpEntry> entries;
    Index row0 = 0, col0 = 0;
    for (std::size_t k = 0; k < src_durations.size(); ++k) {
        const int s = src_durations[k], t = tgt_durations[k];
        FLOWCONVERT_EXPECT(s >= 1 && t >= 1, ContractError, "build_warp_matrix: durations must be >= 1");
        const double ratio = static_cast<double>(s) / static_cast<double>(t);
        for (int j = 0; j < t; ++j) {
            const double p = std::clamp((j + 0.5) * ratio - 0.5, 0.0, static_cast<double>(s - 1));
            const int lo = static_cast<int>(std::floor(p));
            const double frac = p - lo;
            if (frac == 0.0 || lo + 1 >= s) {
                entries.push_back({row0 + j, col0 + lo, 1.0});
            } else {
                entries.push_back({row0 + j, col0 + lo, 1.0 - frac});
                entries.push_back({row0 + j, col0 + lo + 1, frac});
            }
        }
        row0 += t;
        col0 += s;
    }
    return WarpMatrix(row0, col0, std::move(entries));
}

inline LatentSequence warp(const LatentSequence& z, const WarpMatrix& w)
{
    if (w.cols() != z.frame_count())
        throw ContractError("warp: matrix has " + std::to_string(w.cols()) + " columns for " +
                            std::to_string(z.frame_count()) + " frames");
    LatentSequence out{Matrix::Zero(w.rows(), z.dim())};
    for (const auto& e : w.entries()) out.frames.row(e.row) += e.weight * z.frames.row(e.col);
    return out;
}

} // namespace flowconvert
