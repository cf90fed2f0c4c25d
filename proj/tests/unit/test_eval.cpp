#include <gtest/gtest.h>

#include <map>
#include <queue>

#include "flowconvert/eval.hpp"

using namespace flowconvert;

namespace {

// All strings of length <= 6 over {0,1,2}, encoded as (length, base-3 value).
struct StringSpace {
    std::vector<std::vector<int>> strings;
    std::map<std::vector<int>, int> index;

    StringSpace()
    {
        std::vector<std::vector<int>> frontier{{}};
        for (int len = 0; len <= 6; ++len) {
            std::vector<std::vector<int>> next;
            for (const auto& s : frontier) {
                index[s] = static_cast<int>(strings.size());
                strings.push_back(s);
                for (int a = 0; a < 3; ++a) {
                    auto t = s;
                    t.push_back(a);
                    next.push_back(t);
                }
            }
            frontier = std::move(next);
        }
    }

    std::vector<int> neighbours(const std::vector<int>& s) const
    {
        std::vector<int> out;
        for (std::size_t i = 0; i < s.size(); ++i) {
            auto del = s;
            del.erase(del.begin() + static_cast<std::ptrdiff_t>(i));
            out.push_back(index.at(del));
            for (int a = 0; a < 3; ++a)
                if (a != s[i]) {
                    auto sub = s;
                    sub[i] = a;
                    out.push_back(index.at(sub));
                }
        }
        if (s.size() < 6)
            for (std::size_t i = 0; i <= s.size(); ++i)
                for (int a = 0; a < 3; ++a) {
                    auto ins = s;
                    ins.insert(ins.begin() + static_cast<std::ptrdiff_t>(i), a);
                    out.push_back(index.at(ins));
                }
        return out;
    }
};

std::vector<double> holm_oracle_adjusted(const std::vector<double>& p)
{
    const std::size_t m = p.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] < p[b]; });
    std::vector<double> adj(m);
    double running = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
        running = std::max(running, std::min(1.0, static_cast<double>(m - j) * p[order[j]]));
        adj[order[j]] = running;
    }
    return adj;
}

} // namespace

TEST(Wer, Basics)
{
    EXPECT_EQ(wer<int>({1, 2, 3}, {1, 2, 3}), 0.0);
    EXPECT_DOUBLE_EQ(wer<int>({1, 2, 3}, {1, 3}), 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(wer<int>({1}, {2, 3, 4}), 3.0);
    EXPECT_DOUBLE_EQ(wer<int>({1, 2}, {}), 1.0);
    EXPECT_THROW(wer<int>({}, {1}), ContractError);
}

// Breadth-first search over single-token edits is an independent route to the
// minimal edit count; intermediate strings never need to exceed length 6.
TEST(Wer, ExhaustiveOracle)
{
    const StringSpace space;
    const std::size_t n = space.strings.size();
    ASSERT_EQ(n, 1093u);
    std::vector<std::vector<int>> adj(n);
    for (std::size_t i = 0; i < n; ++i) adj[i] = space.neighbours(space.strings[i]);
    std::size_t checked = 0;
    for (std::size_t src = 1; src < n; ++src) {
        std::vector<int> dist(n, -1);
        std::queue<int> q;
        dist[src] = 0;
        q.push(static_cast<int>(src));
        while (!q.empty()) {
            const int u = q.front();
            q.pop();
            for (int v : adj[static_cast<std::size_t>(u)])
                if (dist[static_cast<std::size_t>(v)] < 0) {
                    dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
                    q.push(v);
                }
        }
        const auto& ref = space.strings[src];
        for (std::size_t h = 0; h < n; ++h) {
            const double expect = static_cast<double>(dist[h]) / static_cast<double>(ref.size());
            const double got = wer(ref, space.strings[h]);
            if (got != expect) FAIL() << "mismatch at ref " << src << " hyp " << h;
            ++checked;
        }
    }
    EXPECT_EQ(checked, 1092u * 1093u);
}

TEST(Wer, CollapseRuns)
{
    EXPECT_EQ(collapse_runs({1, 1, 2, 2, 2, 1, 3, 3}), (std::vector<int>{1, 2, 1, 3}));
    EXPECT_TRUE(collapse_runs({}).empty());
}

TEST(Holm, MatchesAdjustedPValues)
{
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        const int m = rng.uniform_int(1, 8);
        std::vector<double> p(static_cast<std::size_t>(m));
        // mix of small and large p-values so both outcomes occur
        for (auto& v : p) v = rng.bernoulli(0.5) ? rng.uniform(0.0, 0.06) : rng.uniform(0.0, 1.0);
        const double alpha = 0.05;
        const auto got = holm_bonferroni(p, alpha);
        const auto adj = holm_oracle_adjusted(p);
        for (int i = 0; i < m; ++i) {
            EXPECT_EQ(got[static_cast<std::size_t>(i)], adj[static_cast<std::size_t>(i)] <= alpha);
            // Bonferroni domination
            if (p[static_cast<std::size_t>(i)] <= alpha / m) EXPECT_TRUE(got[static_cast<std::size_t>(i)]);
        }
    }
}

TEST(Holm, Examples)
{
    EXPECT_EQ(holm_bonferroni({0.01, 0.04, 0.03}, 0.05), (std::vector<bool>{true, false, false}));
    EXPECT_EQ(holm_bonferroni({0.01, 0.02, 0.03}, 0.05), (std::vector<bool>{true, true, true}));
    EXPECT_TRUE(holm_bonferroni({}, 0.05).empty());
    EXPECT_THROW(holm_bonferroni({1.2}, 0.05), ContractError);
    EXPECT_THROW(holm_bonferroni({0.2}, 1.0), ContractError);
}

// Reference values from scipy.stats.ttest_rel.
TEST(TTest, MatchesReference)
{
    EXPECT_NEAR(paired_t_test({1.1, 2.0, 2.9, 4.2}, {1.0, 2.1, 3.1, 4.0}), 1.0, 1e-6);
    EXPECT_NEAR(paired_t_test({0.2, 0.5, 0.9, 0.4, 0.7}, {0.1, 0.3, 0.8, 0.2, 0.6}), 0.004635839417904412, 1e-9);
}

TEST(TTest, Contracts)
{
    EXPECT_EQ(paired_t_test({1, 2, 3}, {1, 2, 3}), 1.0);
    EXPECT_THROW(paired_t_test({1, 2}, {1}), ContractError);
    EXPECT_THROW(paired_t_test({1}, {1}), ContractError);
    EXPECT_THROW(paired_t_test({2, 3}, {1, 2}), ContractError);
}

TEST(Ratio, IdenticalScoresGiveOnes)
{
    const std::vector<std::vector<double>> ref{{0.8, 0.6}, {0.5}, {0.9, 0.7, 0.8}};
    std::vector<std::vector<std::vector<double>>> conv(3, std::vector<std::vector<double>>(3));
    for (int s = 0; s < 3; ++s)
        for (int t = 0; t < 3; ++t) conv[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)] = ref[static_cast<std::size_t>(t)];
    const auto m = score_ratio_matrix(conv, ref);
    for (int s = 0; s < 3; ++s)
        for (int t = 0; t < 3; ++t) {
            if (s == t) {
                EXPECT_EQ(m.at(s, t).status, RatioCell::Status::diagonal);
            } else {
                EXPECT_EQ(m.at(s, t).status, RatioCell::Status::value);
                EXPECT_NEAR(m.at(s, t).ratio, 1.0, 1e-12);
            }
        }
}

TEST(Ratio, EmptyCellIsMissing)
{
    std::vector<std::vector<std::vector<double>>> conv(2, std::vector<std::vector<double>>(2));
    conv[0][1] = {0.3, 0.5};
    const auto m = score_ratio_matrix(conv, {{0.5}, {0.8}});
    EXPECT_NEAR(m.at(0, 1).ratio, 0.5, 1e-12);
    EXPECT_EQ(m.at(0, 1).count, 2u);
    EXPECT_EQ(m.at(1, 0).status, RatioCell::Status::missing);
}

TEST(Classifier, ProbabilitiesAndLookup)
{
    Rng rng(3);
    std::vector<Matrix> data;
    std::vector<int> labels;
    for (int i = 0; i < 60; ++i) {
        const int l = i % 3;
        data.push_back(nn::random_normal(5, 4, 0.3, rng).array() + static_cast<double>(l));
        labels.push_back(l);
    }
    std::vector<const Matrix*> ptrs;
    for (const auto& m : data) ptrs.push_back(&m);
    UtteranceClassifier clf(ClassifierKind::accent, Pooling::mean_delta, 3, 4);
    EXPECT_THROW(clf.probabilities(data[0]), ContractError);
    clf.fit(ptrs, labels, ClassifierTrainConfig{});
    int hits = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const RowVector p = clf.probabilities(data[i]);
        EXPECT_NEAR(p.sum(), 1.0, 1e-6);
        EXPECT_GE(p.minCoeff(), 0.0);
        hits += clf.predict(data[i]) == labels[i];
    }
    EXPECT_EQ(hits, 60);
    EXPECT_THROW(similarity_score(MelSpectrogram{data[0]}, clf, 3), LookupError);
    EXPECT_GT(similarity_score(MelSpectrogram{data[0]}, clf, 0), 0.5);
}

TEST(Classifier, DefaultCorpusQualityGate)
{
    const auto corpus = generate_corpus(CorpusConfig{}, 7);
    const SplitConfig split;
    const auto train = select_split(corpus, Split::classifier, split);
    const auto test = select_split(corpus, Split::test, split);
    const auto clf = train_classifiers(train, 4, 8, 40, 16, ClassifierTrainConfig{}, 7);
    double own = 0.0;
    for (const auto* u : test) {
        own += similarity_score(u->mel, clf.accent, u->accent);
        EXPECT_NEAR(clf.speaker.probabilities(u->mel.frames).sum(), 1.0, 1e-6);
    }
    EXPECT_GE(own / test.size(), 0.9);

    // zero-noise renders of the test sequences decode close to their phonemes
    double per = 0.0;
    for (const auto* u : test) {
        auto spk = corpus.speakers[static_cast<std::size_t>(u->speaker)];
        spk.noise_level = 0.0;
        const auto mel = render_mel(u->phoneme_seq, spk, corpus.accents[static_cast<std::size_t>(u->accent)],
                                    corpus.templates, corpus.config.render, 11);
        per += wer(collapse_runs(u->phoneme_seq.phonemes), phoneme_decode(mel, clf.phoneme));
    }
    EXPECT_LT(per / test.size(), 0.15);
}

TEST(Classifier, UntrainedDecodeRejected)
{
    Rng rng(1);
    PhonemeClassifier clf(5, 4, 2, 8, rng);
    EXPECT_THROW(phoneme_decode(MelSpectrogram{Matrix::Ones(3, 4)}, clf), ContractError);
}
