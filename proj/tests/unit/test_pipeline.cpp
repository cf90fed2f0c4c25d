#include <gtest/gtest.h>

#include "flowconvert/pipeline.hpp"
#include "tiny_run.hpp"

using namespace flowconvert;

namespace {

struct Fixture {
    RunConfig config = tiny_config();
    Corpus corpus;
    TrainedFlow flow;
    DurationModel duration;
    AttentionBlock attention;

    Fixture()
    {
        corpus = generate_corpus(config.corpus, 7);
        std::vector<const Utterance*> utts;
        for (const auto& u : corpus.utterances) utts.push_back(&u);
        auto tf = config.train_flow;
        tf.steps = 30;
        flow = train_flow(utts, utts, config.features, config.flow, tf, 3);
        duration = train_duration_model(utts, utts, config.duration, config.train_duration, 4).model;
        Rng rng(5);
        attention = AttentionBlock(config.attention, rng);
    }

    Converter converter() const { return Converter({&corpus.accents, &flow, &duration, &attention}); }

    // first (utterance, accent) pair with the requested phoneme-count relation
    std::pair<const Utterance*, int> find_pair(bool equal_length) const
    {
        for (const auto& u : corpus.utterances)
            for (const auto& a : corpus.accents)
                if (a.id != u.accent && (g2p(u.text, a).size() == u.phoneme_seq.size()) == equal_length)
                    return {&u, a.id};
        return {nullptr, 0};
    }
};

const Fixture& fixture()
{
    static const Fixture f;
    return f;
}

} // namespace

TEST(Pipeline, ReconstructionIdentity)
{
    const auto& f = fixture();
    const auto conv = f.converter();
    double worst = 0.0;
    for (const auto& u : f.corpus.utterances) {
        const auto r = conv.convert({&u, u.accent, ConversionMode::remap, std::nullopt});
        worst = std::max(worst, (r.mel.frames - u.mel.frames).cwiseAbs().maxCoeff());
        const auto w = conv.convert({&u, u.accent, ConversionMode::remap_warp, u.phoneme_seq.durations});
        worst = std::max(worst, (w.mel.frames - u.mel.frames).cwiseAbs().maxCoeff());
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Pipeline, WarpWithSourceDurationsEqualsRemap)
{
    const auto& f = fixture();
    const auto [u, target] = f.find_pair(true);
    ASSERT_NE(u, nullptr);
    const auto conv = f.converter();
    const auto a = conv.convert({u, target, ConversionMode::remap, std::nullopt});
    const auto b = conv.convert({u, target, ConversionMode::remap_warp, u->phoneme_seq.durations});
    EXPECT_LT((a.mel.frames - b.mel.frames).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(a.mel.frame_count(), u->mel.frame_count());
}

TEST(Pipeline, LengthContracts)
{
    const auto& f = fixture();
    const auto conv = f.converter();
    const auto [u, target] = f.find_pair(true);
    ASSERT_NE(u, nullptr);
    const auto w = conv.convert({u, target, ConversionMode::remap_warp, std::nullopt});
    const auto predicted = f.duration.predict_durations(g2p(u->text, f.corpus.accents[static_cast<std::size_t>(target)]), target);
    EXPECT_EQ(w.target_phoneme_seq.durations, predicted);
    EXPECT_EQ(w.mel.frame_count(), w.target_phoneme_seq.total_frames());
    const auto at = conv.convert({u, target, ConversionMode::remap_warp_attend, std::nullopt});
    EXPECT_EQ(at.mel.frame_count(), w.mel.frame_count());
    EXPECT_TRUE(at.diagnostics.count("attention_entropy"));
}

TEST(Pipeline, UnequalLengthNeedsAttention)
{
    const auto& f = fixture();
    const auto [u, target] = f.find_pair(false);
    ASSERT_NE(u, nullptr);
    const auto conv = f.converter();
    EXPECT_THROW(conv.convert({u, target, ConversionMode::remap, std::nullopt}), ModeUnsupportedError);
    EXPECT_THROW(conv.convert({u, target, ConversionMode::remap_warp, std::nullopt}), ModeUnsupportedError);
    const auto r = conv.convert({u, target, ConversionMode::remap_warp_attend, std::nullopt});
    EXPECT_EQ(r.target_phoneme_seq.size(), g2p(u->text, f.corpus.accents[static_cast<std::size_t>(target)]).size());
    EXPECT_EQ(r.mel.frame_count(), r.target_phoneme_seq.total_frames());
}

TEST(Pipeline, DeterministicAndChangesAccent)
{
    const auto& f = fixture();
    const auto conv = f.converter();
    const auto [u, target] = f.find_pair(true);
    for (auto mode : all_modes()) {
        const auto a = conv.convert({u, target, mode, std::nullopt});
        const auto b = conv.convert({u, target, mode, std::nullopt});
        EXPECT_EQ(a.mel.frames, b.mel.frames);
    }
    const auto r = conv.convert({u, target, ConversionMode::remap, std::nullopt});
    EXPECT_GT((r.mel.frames - u->mel.frames).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_THROW(conv.convert({u, 99, ConversionMode::remap, std::nullopt}), LookupError);
}
