#include <gtest/gtest.h>

#include <fstream>

#include "flowconvert/io.hpp"
#include "tiny_run.hpp"

using namespace flowconvert;

TEST(Config, DefaultsRoundTripThroughIni)
{
    const RunConfig d = default_config();
    // regroup "section.key=value" lines into INI sections
    std::vector<std::string> order;
    std::map<std::string, std::string> body;
    std::istringstream in(canonical_config(d));
    for (std::string line; std::getline(in, line);) {
        const auto eq = line.find('=');
        const auto dot = line.rfind('.', eq);
        const std::string section = line.substr(0, dot);
        if (!body.count(section)) order.push_back(section);
        body[section] += line.substr(dot + 1, eq - dot - 1) + " = " + line.substr(eq + 1) + "\n";
    }
    std::string ini;
    for (const auto& s : order) ini += "[" + s + "]\n" + body[s];
    const RunConfig back = parse_config(ini);
    EXPECT_EQ(canonical_config(back), canonical_config(d));
    EXPECT_EQ(config_hash(back), config_hash(d));
}

TEST(Config, ShippedFileMatchesDefaults)
{
    const RunConfig c = load_config(FLOWCONVERT_SOURCE_DIR "/configs/default.ini");
    EXPECT_EQ(config_hash(c), config_hash(default_config()));
}

TEST(Config, HashTracksChanges)
{
    RunConfig a = default_config();
    RunConfig b = a;
    b.train_flow.lr = 2e-3;
    EXPECT_NE(config_hash(a), config_hash(b));
    EXPECT_EQ(config_hash(a).size(), 16u);
    b = a;
    b.eval.modes = {ConversionMode::remap};
    EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, Errors)
{
    EXPECT_THROW(parse_config("[flow]\nsteps = 3\nbogus = 1\n"), ConfigError);
    EXPECT_THROW(parse_config("[nosuch]\nx = 1\n"), ConfigError);
    EXPECT_THROW(parse_config("[flow]\nsteps = many\n"), ConfigError);
    EXPECT_THROW(parse_config("[corpus]\nn_words = 0\n"), ConfigError);
    EXPECT_THROW(parse_config("[eval]\nmodes = remap,teleport\n"), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/flowconvert.ini"), ConfigError);
    const RunConfig c = parse_config("[eval]\nmodes = remap\nalpha = 0.01\n");
    EXPECT_EQ(c.eval.modes.size(), 1u);
    EXPECT_DOUBLE_EQ(c.eval.alpha, 0.01);
}

TEST(TensorFileFormat, RoundTrip)
{
    TensorFile f;
    f.metadata = {{"kind", "test"}, {"n", 3}};
    Matrix m(2, 3);
    m << 1.5, -2.25, 3e-300, 0.1, std::nextafter(1.0, 2.0), -0.0;
    f.put("m", m);
    f.put("ids", std::vector<int>{4, -1, 7});
    f.put("empty", std::vector<int>{});
    const std::string bytes = encode_tensor_file(f);
    EXPECT_EQ(bytes.substr(0, 8), "FCTENSR1");
    const TensorFile g = decode_tensor_file(bytes);
    EXPECT_EQ(g.metadata, f.metadata);
    EXPECT_EQ(g.matrix("m"), m);
    EXPECT_EQ(g.ints("ids"), (std::vector<int>{4, -1, 7}));
    EXPECT_TRUE(g.ints("empty").empty());
    EXPECT_EQ(encode_tensor_file(g), bytes);
    EXPECT_THROW(g.matrix("ids"), IoError);
    EXPECT_THROW(g.at("nope"), IoError);
}

TEST(TensorFileFormat, RejectsDamage)
{
    TensorFile f;
    f.put("m", Matrix::Ones(4, 4));
    const std::string bytes = encode_tensor_file(f);
    EXPECT_THROW(decode_tensor_file("garbage"), IoError);
    EXPECT_THROW(decode_tensor_file(bytes.substr(0, bytes.size() - 8)), IoError);
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_tensor_file(bad), IoError);
    EXPECT_THROW(read_tensor_file("/nonexistent/file.fct"), IoError);
}

TEST(CorpusIo, SaveLoadRoundTrip)
{
    const RunConfig c = tiny_config();
    const Corpus corpus = generate_corpus(c.corpus, c.seed);
    const auto dir = fresh_dir("corpus_io");
    save_corpus(corpus, c, dir);
    const Corpus back = load_corpus(dir);
    ASSERT_EQ(back.utterances.size(), corpus.utterances.size());
    EXPECT_EQ(back.templates, corpus.templates);
    EXPECT_EQ(back.base_durations, corpus.base_durations);
    for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
        EXPECT_EQ(back.utterances[i].id, corpus.utterances[i].id);
        EXPECT_EQ(back.utterances[i].mel.frames, corpus.utterances[i].mel.frames);
        EXPECT_EQ(back.utterances[i].phoneme_seq, corpus.utterances[i].phoneme_seq);
        EXPECT_EQ(back.utterances[i].text, corpus.utterances[i].text);
    }
    for (std::size_t a = 0; a < corpus.accents.size(); ++a) {
        EXPECT_EQ(back.accents[a].remap_table, corpus.accents[a].remap_table);
        EXPECT_EQ(back.accents[a].duration_multipliers, corpus.accents[a].duration_multipliers);
        EXPECT_EQ(back.accents[a].spectral_shift, corpus.accents[a].spectral_shift);
    }
    const Json manifest = read_json(dir / "manifest.json");
    EXPECT_EQ(manifest.at("config_hash"), config_hash(c));
    EXPECT_EQ(manifest.at("format_version"), kFormatVersion);
    std::filesystem::remove_all(dir);
}
