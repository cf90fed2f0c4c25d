#pragma once

// Conditioning stack: embedding tables, the phoneme encoder and upsampling of
// phoneme encodings to frame rate.
//
// Frame conditioning channel layout (fixed):
//   [0, C_ph)                      upsampled phoneme encoding
//   [C_ph, C_ph + speaker_dim)     speaker embedding, constant over time
//   [C_ph + speaker_dim, C)        accent embedding, constant over time

#include <string>
#include <vector>

#include "autodiff.hpp"
#include "nn.hpp"
#include "syncorpus.hpp"

namespace flowconvert {

using ad::Graph;
using ad::Parameter;
using ad::Var;

enum class EmbeddingKind { phoneme, speaker, accent };

inline const char* to_string(EmbeddingKind k)
{
    switch (k) {
    case EmbeddingKind::phoneme: return "phoneme";
    case EmbeddingKind::speaker: return "speaker";
    case EmbeddingKind::accent: return "accent";
    }
    return "?";
}

struct EmbeddingTable {
    EmbeddingKind kind = EmbeddingKind::phoneme;
    Parameter rows;

    EmbeddingTable() = default;
    EmbeddingTable(EmbeddingKind k, std::string name, Index vocab, Index dim, Rng& rng)
        : kind(k), rows(std::move(name), nn::random_normal(vocab, dim, 1.0, rng))
    {
    }

    Index vocab_size() const { return rows.value.rows(); }
    Index dim() const { return rows.value.cols(); }

    void check(int id) const
    {
        if (id < 0 || id >= vocab_size())
            throw LookupError(std::string("unknown ") + to_string(kind) + " id " + std::to_string(id));
    }

    RowVector row(int id) const
    {
        check(id);
        return rows.value.row(id);
    }

    Var lookup(Graph& g, const std::vector<int>& ids)
    {
        for (int id : ids) check(id);
        return ad::gather_rows(g.param(rows), ids);
    }
};

struct EncoderConfig {
    int n_phonemes = 40;
    int phoneme_embedding_dim = 32;
    int accent_dim = 4;
    int encoder_dim = 32;
    int mixing_layers = 2;
};

/// Phoneme embedding + accent embedding (concatenated at every position),
/// projected to encoder_dim, then residual local-context mixing layers over
/// (k-1, k, k+1).
struct PhonemeEncoder {
    EmbeddingTable phonemes;
    nn::Linear input;
    std::vector<nn::Linear> mixing;

    PhonemeEncoder() = default;
    PhonemeEncoder(const std::string& name, const EncoderConfig& cfg, Rng& rng)
        : phonemes(EmbeddingKind::phoneme, name + ".phoneme_embedding", cfg.n_phonemes, cfg.phoneme_embedding_dim, rng),
          input(name + ".input", cfg.phoneme_embedding_dim + cfg.accent_dim, cfg.encoder_dim, rng)
    {
        for (int l = 0; l < cfg.mixing_layers; ++l)
            mixing.emplace_back(name + ".mixing" + std::to_string(l), 3 * cfg.encoder_dim, cfg.encoder_dim, rng, 0.5);
    }

    Index output_dim() const { return input.out_features(); }

    /// `phoneme_ids` holds several sequences back to back; `offsets` delimits
    /// them. `accent_rows` has one accent embedding row per phoneme.
    Var encode(Graph& g, const std::vector<int>& phoneme_ids, Var accent_rows, const std::vector<Index>& offsets)
    {
        Var h = input(g, ad::concat_cols({phonemes.lookup(g, phoneme_ids), accent_rows}));
        for (auto& layer : mixing) h = ad::add(h, ad::tanh(layer(g, nn::context3(h, offsets))));
        return h;
    }

    void collect(nn::ParameterList& out)
    {
        out.push_back(&phonemes.rows);
        input.collect(out);
        for (auto& l : mixing) l.collect(out);
    }
};

struct FrameConditioning {
    Matrix frames;  // T x C

    Index frame_count() const { return frames.rows(); }
    Index channels() const { return frames.cols(); }
};

/// Repeats encoding k durations[k] times, in order.
inline FrameConditioning upsample(const Matrix& encodings, const std::vector<int>& durations)
{
    if (static_cast<Index>(durations.size()) != encodings.rows())
        throw ContractError("upsample: " + std::to_string(durations.size()) + " durations for " +
                            std::to_string(encodings.rows()) + " encodings");
    int total = 0;
    for (int d : durations) {
        FLOWCONVERT_EXPECT(d >= 1, ContractError, "upsample: durations must be >= 1");
        total += d;
    }
    FrameConditioning out;
    out.frames.resize(total, encodings.cols());
    Index t = 0;
    for (std::size_t k = 0; k < durations.size(); ++k)
        for (int j = 0; j < durations[k]; ++j) out.frames.row(t++) = encodings.row(static_cast<Index>(k));
    return out;
}

/// Frame index -> phoneme index map used by the differentiable upsampling.
inline std::vector<int> upsample_index(const std::vector<int>& durations, int phoneme_offset = 0)
{
    std::vector<int> idx;
    for (std::size_t k = 0; k < durations.size(); ++k)
        for (int j = 0; j < durations[k]; ++j) idx.push_back(phoneme_offset + static_cast<int>(k));
    return idx;
}

struct FeatureConfig {
    int n_phonemes = 40;
    int n_speakers = 8;
    int n_accents = 4;
    int phoneme_embedding_dim = 32;
    int encoder_dim = 32;
    int speaker_dim = 8;
    int accent_dim = 4;
    int mixing_layers = 2;

    int conditioning_dim() const { return encoder_dim + speaker_dim + accent_dim; }

    EncoderConfig encoder() const
    {
        return EncoderConfig{n_phonemes, phoneme_embedding_dim, accent_dim, encoder_dim, mixing_layers};
    }
};

/// One utterance worth of conditioning inputs.
struct ConditioningItem {
    const PhonemeSequence* sequence = nullptr;
    int speaker = 0;
    int accent = 0;
};

/// Speaker/accent lookup tables plus the phoneme encoder.
class FeatureStack {
public:
    FeatureStack() = default;
    FeatureStack(const FeatureConfig& cfg, Rng& rng)
        : cfg_(cfg),
          speakers_(EmbeddingKind::speaker, "features.speaker_embedding", cfg.n_speakers, cfg.speaker_dim, rng),
          accents_(EmbeddingKind::accent, "features.accent_embedding", cfg.n_accents, cfg.accent_dim, rng),
          encoder_("features.encoder", cfg.encoder(), rng)
    {
    }

    const FeatureConfig& config() const { return cfg_; }
    Index conditioning_dim() const { return cfg_.conditioning_dim(); }

    EmbeddingTable& speaker_table() { return speakers_; }
    EmbeddingTable& accent_table() { return accents_; }
    const EmbeddingTable& speaker_table() const { return speakers_; }
    const EmbeddingTable& accent_table() const { return accents_; }

    RowVector speaker_embedding(int id) const { return speakers_.row(id); }
    RowVector accent_embedding(int id) const { return accents_.row(id); }

    /// Per-phoneme encodings (N x C_ph) under an explicit accent embedding.
    Matrix phoneme_encoder(const std::vector<int>& phonemes, const RowVector& accent_emb) const
    {
        FLOWCONVERT_EXPECT(accent_emb.size() == cfg_.accent_dim, ContractError, "accent embedding has wrong size");
        if (phonemes.empty()) return Matrix(0, cfg_.encoder_dim);
        Graph g(false);
        auto& self = const_cast<FeatureStack&>(*this);
        Matrix acc = accent_emb.replicate(static_cast<Index>(phonemes.size()), 1);
        return self.encoder_.encode(g, phonemes, g.constant(acc), {0, static_cast<Index>(phonemes.size())}).value();
    }

    /// Frame-level conditioning from explicit speaker and accent embeddings.
    FrameConditioning build_conditioning(const PhonemeSequence& seq, const RowVector& speaker_emb,
                                         const RowVector& accent_emb) const
    {
        seq.validate();
        FLOWCONVERT_EXPECT(seq.total_frames() >= 1, ContractError, "conditioning needs at least one frame");
        FLOWCONVERT_EXPECT(speaker_emb.size() == cfg_.speaker_dim, ContractError, "speaker embedding has wrong size");
        FrameConditioning up = upsample(phoneme_encoder(seq.phonemes, accent_emb), seq.durations);
        FrameConditioning out;
        out.frames.resize(up.frame_count(), conditioning_dim());
        out.frames.leftCols(cfg_.encoder_dim) = up.frames;
        out.frames.middleCols(cfg_.encoder_dim, cfg_.speaker_dim) = speaker_emb.replicate(up.frame_count(), 1);
        out.frames.rightCols(cfg_.accent_dim) = accent_emb.replicate(up.frame_count(), 1);
        return out;
    }

    FrameConditioning build_conditioning(const PhonemeSequence& seq, int speaker, int accent) const
    {
        return build_conditioning(seq, speaker_embedding(speaker), accent_embedding(accent));
    }

    /// Differentiable batched conditioning. Items are stacked along time;
    /// `frame_offsets` receives the segment boundaries.
    Var conditioning(Graph& g, const std::vector<ConditioningItem>& items, std::vector<Index>& frame_offsets)
    {
        std::vector<int> phonemes, phoneme_accents, frame_to_phoneme, frame_speakers, frame_accents;
        std::vector<Index> phoneme_offsets{0};
        frame_offsets.assign(1, 0);
        for (const auto& item : items) {
            item.sequence->validate();
            FLOWCONVERT_EXPECT(item.sequence->total_frames() >= 1, ContractError,
                               "conditioning needs at least one frame");
            const int base = static_cast<int>(phonemes.size());
            phonemes.insert(phonemes.end(), item.sequence->phonemes.begin(), item.sequence->phonemes.end());
            phoneme_accents.insert(phoneme_accents.end(), item.sequence->size(), item.accent);
            auto idx = upsample_index(item.sequence->durations, base);
            frame_to_phoneme.insert(frame_to_phoneme.end(), idx.begin(), idx.end());
            frame_speakers.insert(frame_speakers.end(), idx.size(), item.speaker);
            frame_accents.insert(frame_accents.end(), idx.size(), item.accent);
            phoneme_offsets.push_back(static_cast<Index>(phonemes.size()));
            frame_offsets.push_back(static_cast<Index>(frame_to_phoneme.size()));
        }
        Var enc = encoder_.encode(g, phonemes, accents_.lookup(g, phoneme_accents), phoneme_offsets);
        return ad::concat_cols({ad::gather_rows(enc, frame_to_phoneme), speakers_.lookup(g, frame_speakers),
                                accents_.lookup(g, frame_accents)});
    }

    void collect(nn::ParameterList& out)
    {
        out.push_back(&speakers_.rows);
        out.push_back(&accents_.rows);
        encoder_.collect(out);
    }

    nn::ParameterList parameters()
    {
        nn::ParameterList out;
        collect(out);
        return out;
    }

private:
    FeatureConfig cfg_;
    EmbeddingTable speakers_;
    EmbeddingTable accents_;
    PhonemeEncoder encoder_;
};

} // namespace flowconvert
