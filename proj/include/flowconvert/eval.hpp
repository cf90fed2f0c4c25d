#pragma once

// Objective evaluation: edit-distance error rates, proxy classifiers and the
// statistics used to compare systems.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "autodiff.hpp"
#include "nn.hpp"
#include "syncorpus.hpp"
#include "training.hpp"

namespace flowconvert {

/// (substitutions + insertions + deletions) / |reference| via minimal edit distance.
template <typename T>
double wer(const std::vector<T>& reference, const std::vector<T>& hypothesis)
{
    FLOWCONVERT_EXPECT(!reference.empty(), ContractError, "wer: empty reference");
    const std::size_t n = reference.size(), m = hypothesis.size();
    std::vector<std::size_t> prev(m + 1), cur(m + 1);
    std::iota(prev.begin(), prev.end(), std::size_t{0});
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= m; ++j) {
            const std::size_t sub = prev[j - 1] + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return static_cast<double>(prev[m]) / static_cast<double>(n);
}

/// Merges consecutive duplicate labels.
inline std::vector<int> collapse_runs(const std::vector<int>& labels)
{
    std::vector<int> out;
    for (int l : labels)
        if (out.empty() || out.back() != l) out.push_back(l);
    return out;
}

// ---------------------------------------------------------------------------
// Proxy classifiers

enum class ClassifierKind { accent, speaker, phoneme };

inline const char* to_string(ClassifierKind k)
{
    switch (k) {
    case ClassifierKind::accent: return "accent";
    case ClassifierKind::speaker: return "speaker";
    case ClassifierKind::phoneme: return "phoneme";
    }
    return "?";
}

/// Utterance-level pooling. `mean` keeps the per-channel frame mean;
/// `mean_delta` appends the per-channel mean absolute frame-to-frame
/// difference, which tracks speaking rate.
enum class Pooling { mean, mean_delta };

inline Index pooled_dim(Pooling pooling, Index dim)
{
    return pooling == Pooling::mean ? dim : 2 * dim;
}

inline RowVector pooled_features(const Matrix& frames, Pooling pooling = Pooling::mean_delta)
{
    FLOWCONVERT_EXPECT(frames.rows() >= 1, ContractError, "pooled_features: empty input");
    const Index d = frames.cols();
    if (pooling == Pooling::mean) return frames.colwise().mean();
    RowVector f(2 * d);
    f.head(d) = frames.colwise().mean();
    if (frames.rows() > 1)
        f.tail(d) = (frames.bottomRows(frames.rows() - 1) - frames.topRows(frames.rows() - 1)).cwiseAbs().colwise().mean();
    else
        f.tail(d).setZero();
    return f;
}

struct ClassifierTrainConfig {
    int steps = 600;
    double lr = 0.05;
    double weight_decay = 1e-3;
    int frame_steps = 1500;
    int frame_batch = 256;
    double frame_lr = 3e-3;
    int hidden = 64;
    int context = 2;
};

/// Standardized features -> softmax regression.
class UtteranceClassifier {
public:
    UtteranceClassifier() = default;
    UtteranceClassifier(ClassifierKind kind, Pooling pooling, int n_labels, int dim)
        : kind_(kind),
          pooling_(pooling),
          mean_(RowVector::Zero(pooled_dim(pooling, dim))),
          scale_(RowVector::Ones(pooled_dim(pooling, dim))),
          linear_(nn::Linear::zeros(std::string(to_string(kind)) + "_classifier", pooled_dim(pooling, dim), n_labels))
    {
    }

    ClassifierKind kind() const { return kind_; }
    Pooling pooling() const { return pooling_; }
    int n_labels() const { return static_cast<int>(linear_.out_features()); }
    bool trained() const { return trained_; }

    RowVector probabilities(const Matrix& frames) const
    {
        FLOWCONVERT_EXPECT(trained_, ContractError, "classifier is not trained");
        const RowVector f = ((pooled_features(frames, pooling_) - mean_).array() / scale_.array()).matrix();
        const Matrix logits = (f * linear_.weight.value).rowwise() + linear_.bias.value.row(0);
        return ad::softmax_rows_value(logits).row(0);
    }

    int predict(const Matrix& frames) const
    {
        Index best;
        probabilities(frames).maxCoeff(&best);
        return static_cast<int>(best);
    }

    void fit(const std::vector<const Matrix*>& inputs, const std::vector<int>& labels, const ClassifierTrainConfig& cfg)
    {
        FLOWCONVERT_EXPECT(!inputs.empty() && inputs.size() == labels.size(), ContractError,
                           "classifier fit: inputs and labels differ");
        const Index n = static_cast<Index>(inputs.size());
        Matrix x(n, mean_.size());
        for (Index i = 0; i < n; ++i) x.row(i) = pooled_features(*inputs[static_cast<std::size_t>(i)], pooling_);
        mean_ = x.colwise().mean();
        scale_ = ((x.rowwise() - mean_).array().square().colwise().mean().sqrt() + 1e-8).matrix();
        x = ((x.rowwise() - mean_).array().rowwise() / scale_.array()).matrix();
        Matrix onehot = Matrix::Zero(n, n_labels());
        for (Index i = 0; i < n; ++i) {
            const int l = labels[static_cast<std::size_t>(i)];
            FLOWCONVERT_EXPECT(l >= 0 && l < n_labels(), LookupError, "classifier fit: label out of range");
            onehot(i, l) = 1.0;
        }
        nn::ParameterList params;
        linear_.collect(params);
        nn::Adam opt(params, {.lr = cfg.lr, .weight_decay = cfg.weight_decay});
        for (int step = 0; step < cfg.steps; ++step) {
            ad::Graph g;
            ad::Var logp = ad::log_softmax_rows(linear_(g, g.constant(x)));
            ad::Var loss = ad::scale(ad::sum(ad::mul(logp, g.constant(onehot))), -1.0 / static_cast<double>(n));
            opt.zero_grad();
            g.backward(loss);
            opt.step();
        }
        trained_ = true;
    }

    void collect(nn::ParameterList& out)
    {
        linear_.collect(out);
    }

    // Serialization helpers.
    const RowVector& feature_mean() const { return mean_; }
    const RowVector& feature_scale() const { return scale_; }
    void set_state(RowVector mean, RowVector scale, Matrix weight, Matrix bias)
    {
        mean_ = std::move(mean);
        scale_ = std::move(scale);
        linear_.weight.value = std::move(weight);
        linear_.bias.value = std::move(bias);
        trained_ = true;
    }
    const Matrix& weight() const { return linear_.weight.value; }
    const Matrix& bias() const { return linear_.bias.value; }

private:
    ClassifierKind kind_ = ClassifierKind::accent;
    Pooling pooling_ = Pooling::mean_delta;
    RowVector mean_, scale_;
    nn::Linear linear_;
    bool trained_ = false;
};

/// Frame-level phoneme classifier over utterance-mean-normalized frames with
/// +-context neighbouring frames spliced in.
class PhonemeClassifier {
public:
    PhonemeClassifier() = default;
    PhonemeClassifier(int n_phonemes, int dim, int context, int hidden, Rng& rng)
        : context_(context),
          mean_(RowVector::Zero(dim * (2 * context + 1))),
          scale_(RowVector::Ones(dim * (2 * context + 1))),
          hidden_("phoneme_classifier.hidden", dim * (2 * context + 1), hidden, rng),
          out_("phoneme_classifier.out", hidden, n_phonemes, rng)
    {
    }

    bool trained() const { return trained_; }
    int context() const { return context_; }
    int n_labels() const { return static_cast<int>(out_.out_features()); }

    /// Spliced, mean-normalized features, one row per frame (edges replicate).
    Matrix frame_features(const Matrix& frames) const
    {
        const Index t = frames.rows(), d = frames.cols();
        const Matrix centered = frames.rowwise() - frames.colwise().mean();
        Matrix out(t, d * (2 * context_ + 1));
        for (Index i = 0; i < t; ++i)
            for (int o = -context_; o <= context_; ++o) {
                const Index src = std::clamp<Index>(i + o, 0, t - 1);
                out.block(i, d * (o + context_), 1, d) = centered.row(src);
            }
        return out;
    }

    Matrix logits(const Matrix& frames) const
    {
        FLOWCONVERT_EXPECT(trained_, ContractError, "phoneme classifier is not trained");
        FLOWCONVERT_EXPECT(frames.rows() >= 1, ContractError, "phoneme classifier: empty input");
        ad::Graph g(false);
        auto& self = const_cast<PhonemeClassifier&>(*this);
        return self.forward(g, g.constant(standardize(frame_features(frames)))).value();
    }

    std::vector<int> frame_labels(const Matrix& frames) const
    {
        const Matrix l = logits(frames);
        std::vector<int> out(static_cast<std::size_t>(l.rows()));
        for (Index i = 0; i < l.rows(); ++i) {
            Index best;
            l.row(i).maxCoeff(&best);
            out[static_cast<std::size_t>(i)] = static_cast<int>(best);
        }
        return out;
    }

    void fit(const std::vector<const Utterance*>& utts, const ClassifierTrainConfig& cfg, std::uint64_t seed)
    {
        FLOWCONVERT_EXPECT(!utts.empty(), ContractError, "phoneme classifier: no training data");
        Index total = 0;
        for (const auto* u : utts) total += u->mel.frame_count();
        Matrix x(total, mean_.size());
        std::vector<int> y;
        y.reserve(static_cast<std::size_t>(total));
        Index r = 0;
        for (const auto* u : utts) {
            x.middleRows(r, u->mel.frame_count()) = frame_features(u->mel.frames);
            r += u->mel.frame_count();
            const auto& seq = u->phoneme_seq;
            for (std::size_t k = 0; k < seq.size(); ++k) y.insert(y.end(), static_cast<std::size_t>(seq.durations[k]), seq.phonemes[k]);
        }
        mean_ = x.colwise().mean();
        scale_ = ((x.rowwise() - mean_).array().square().colwise().mean().sqrt() + 1e-8).matrix();
        x = standardize(x);

        nn::ParameterList params;
        hidden_.collect(params);
        out_.collect(params);
        nn::Adam opt(params, {.lr = cfg.frame_lr});
        BatchSampler sampler(static_cast<std::size_t>(total), static_cast<std::size_t>(cfg.frame_batch), seed);
        for (int step = 0; step < cfg.frame_steps; ++step) {
            const auto idx = sampler.next();
            Matrix bx(static_cast<Index>(idx.size()), x.cols());
            Matrix onehot = Matrix::Zero(static_cast<Index>(idx.size()), n_labels());
            for (std::size_t i = 0; i < idx.size(); ++i) {
                bx.row(static_cast<Index>(i)) = x.row(static_cast<Index>(idx[i]));
                onehot(static_cast<Index>(i), y[idx[i]]) = 1.0;
            }
            ad::Graph g;
            ad::Var logp = ad::log_softmax_rows(forward(g, g.constant(bx)));
            ad::Var loss = ad::scale(ad::sum(ad::mul(logp, g.constant(onehot))), -1.0 / static_cast<double>(idx.size()));
            opt.zero_grad();
            g.backward(loss);
            opt.step();
        }
        trained_ = true;
    }

    void collect(nn::ParameterList& out)
    {
        hidden_.collect(out);
        out_.collect(out);
    }

    const RowVector& feature_mean() const { return mean_; }
    const RowVector& feature_scale() const { return scale_; }
    void set_state(RowVector mean, RowVector scale)
    {
        mean_ = std::move(mean);
        scale_ = std::move(scale);
        trained_ = true;
    }

private:
    Matrix standardize(const Matrix& f) const
    {
        return ((f.rowwise() - mean_).array().rowwise() / scale_.array()).matrix();
    }

    ad::Var forward(ad::Graph& g, ad::Var x) { return out_(g, ad::relu(hidden_(g, x))); }

    int context_ = 2;
    RowVector mean_, scale_;
    nn::Linear hidden_, out_;
    bool trained_ = false;
};

/// Frame-wise argmax labels with consecutive duplicates merged.
inline std::vector<int> phoneme_decode(const MelSpectrogram& mel, const PhonemeClassifier& clf)
{
    FLOWCONVERT_EXPECT(clf.trained(), ContractError, "phoneme_decode: classifier is not trained");
    FLOWCONVERT_EXPECT(mel.frame_count() >= 1, ContractError, "phoneme_decode: empty input");
    return collapse_runs(clf.frame_labels(mel.frames));
}

/// Probability mass the classifier assigns to `label`.
inline double similarity_score(const MelSpectrogram& mel, const UtteranceClassifier& clf, int label)
{
    if (label < 0 || label >= clf.n_labels())
        throw LookupError(std::string("unknown ") + to_string(clf.kind()) + " label " + std::to_string(label));
    return clf.probabilities(mel.frames)[label];
}

struct ProxyClassifiers {
    UtteranceClassifier accent;
    UtteranceClassifier speaker;
    PhonemeClassifier phoneme;
};

/// Trains all proxy classifiers on real utterances only.
inline ProxyClassifiers train_classifiers(const std::vector<const Utterance*>& utts, int n_accents, int n_speakers,
                                          int n_phonemes, int dim, const ClassifierTrainConfig& cfg, std::uint64_t seed)
{
    ProxyClassifiers c;
    std::vector<const Matrix*> inputs;
    std::vector<int> accents, speakers;
    for (const auto* u : utts) {
        inputs.push_back(&u->mel.frames);
        accents.push_back(u->accent);
        speakers.push_back(u->speaker);
    }
    // Accent covers speaking rate as well as spectrum; speaker identity is
    // spectral only, so a speaker's converted outputs are not judged by the
    // target accent's rhythm.
    c.accent = UtteranceClassifier(ClassifierKind::accent, Pooling::mean_delta, n_accents, dim);
    c.accent.fit(inputs, accents, cfg);
    c.speaker = UtteranceClassifier(ClassifierKind::speaker, Pooling::mean, n_speakers, dim);
    c.speaker.fit(inputs, speakers, cfg);
    Rng rng(derive_seed(seed, "phoneme_classifier.init"));
    c.phoneme = PhonemeClassifier(n_phonemes, dim, cfg.context, cfg.hidden, rng);
    c.phoneme.fit(utts, cfg, derive_seed(seed, "phoneme_classifier.batches"));
    return c;
}

// ---------------------------------------------------------------------------
// Statistics

/// Two-sided paired t-test on a - b. Zero-variance differences give p = 1
/// when their mean is zero and are rejected as degenerate otherwise.
inline double paired_t_test(const std::vector<double>& a, const std::vector<double>& b)
{
    FLOWCONVERT_EXPECT(a.size() == b.size(), ContractError, "paired_t_test: length mismatch");
    FLOWCONVERT_EXPECT(a.size() >= 2, ContractError, "paired_t_test: need at least two pairs");
    const double n = static_cast<double>(a.size());
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    const double mean = std::accumulate(d.begin(), d.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : d) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / (n - 1.0));
    if (sd <= 1e-12 * std::max(1.0, std::abs(mean))) {
        if (mean == 0.0) return 1.0;
        throw ContractError("paired_t_test: differences have zero variance and nonzero mean");
    }
    const double t = mean / (sd / std::sqrt(n));
    const boost::math::students_t dist(n - 1.0);
    return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
}

/// Step-down Holm procedure; decisions in input order.
inline std::vector<bool> holm_bonferroni(const std::vector<double>& p_values, double alpha)
{
    FLOWCONVERT_EXPECT(alpha > 0.0 && alpha < 1.0, ContractError, "holm_bonferroni: alpha must be in (0, 1)");
    for (double p : p_values)
        FLOWCONVERT_EXPECT(p >= 0.0 && p <= 1.0, ContractError, "holm_bonferroni: p-value outside [0, 1]");
    const std::size_t m = p_values.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return p_values[i] < p_values[j]; });
    std::vector<bool> reject(m, false);
    for (std::size_t i = 0; i < m; ++i) {
        if (p_values[order[i]] > alpha / static_cast<double>(m - i)) break;
        reject[order[i]] = true;
    }
    return reject;
}

// ---------------------------------------------------------------------------
// Many-to-many ratio matrix

struct RatioCell {
    enum class Status { value, diagonal, missing };
    Status status = Status::missing;
    double ratio = 0.0;
    std::size_t count = 0;
};

struct RatioMatrix {
    int n = 0;
    std::vector<RatioCell> cells;  // row-major, source x target

    const RatioCell& at(int source, int target) const { return cells[static_cast<std::size_t>(source * n + target)]; }
};

/// Cell (s, t) = mean converted score for s -> t divided by the mean reference
/// score of accent t. Diagonal cells are absent; empty cells are missing.
inline RatioMatrix score_ratio_matrix(const std::vector<std::vector<std::vector<double>>>& converted,
                                      const std::vector<std::vector<double>>& reference)
{
    RatioMatrix m;
    m.n = static_cast<int>(converted.size());
    FLOWCONVERT_EXPECT(reference.size() == converted.size(), ContractError, "score_ratio_matrix: accent count mismatch");
    auto mean = [](const std::vector<double>& v) {
        return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    m.cells.resize(static_cast<std::size_t>(m.n * m.n));
    for (int s = 0; s < m.n; ++s) {
        FLOWCONVERT_EXPECT(static_cast<int>(converted[static_cast<std::size_t>(s)].size()) == m.n, ContractError,
                           "score_ratio_matrix: ragged input");
        for (int t = 0; t < m.n; ++t) {
            auto& cell = m.cells[static_cast<std::size_t>(s * m.n + t)];
            if (s == t) {
                cell.status = RatioCell::Status::diagonal;
                continue;
            }
            const auto& scores = converted[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)];
            const auto& ref = reference[static_cast<std::size_t>(t)];
            cell.count = scores.size();
            const double denom = mean(ref);
            if (scores.empty() || ref.empty() || denom <= 0.0) {
                cell.status = RatioCell::Status::missing;
                continue;
            }
            cell.status = RatioCell::Status::value;
            cell.ratio = mean(scores) / denom;
        }
    }
    return m;
}

} // namespace flowconvert
