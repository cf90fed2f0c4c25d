#include <gtest/gtest.h>

#include <fstream>

#include "flowconvert/cli.hpp"
#include "tiny_run.hpp"

using namespace flowconvert;
namespace fs = std::filesystem;

namespace {

std::string bytes_of(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

// One tiny run shared by the tests below.
struct Run {
    RunConfig config = tiny_config();
    fs::path dir = fresh_dir("cli_run");
    RunPaths paths = RunPaths::under(dir);
    Corpus corpus;

    Run()
    {
        detail::log_stream = nullptr;
        corpus = cmd_gen_data(config, paths.corpus, false);
        cmd_train(config, paths.corpus, paths.checkpoints, Stage::all);
    }
};

const Run& run()
{
    static const Run r;
    return r;
}

} // namespace

TEST(Cli, ParseStage)
{
    EXPECT_EQ(parse_stage("all"), Stage::all);
    EXPECT_EQ(parse_stage("attention"), Stage::attention);
    EXPECT_THROW(parse_stage("everything"), ConfigError);
}

TEST(Cli, ExitCodes)
{
    EXPECT_EQ(exit_code(ConfigError("x")), 2);
    EXPECT_EQ(exit_code(LookupError("x")), 2);
    EXPECT_EQ(exit_code(OrderingError("x")), 3);
    EXPECT_EQ(exit_code(OverwriteError("x")), 3);
    EXPECT_EQ(exit_code(EmptyInputError("x")), 3);
    EXPECT_EQ(exit_code(NumericError("x")), 4);
    EXPECT_EQ(exit_code(TrainingError("x")), 4);
    EXPECT_EQ(exit_code(std::runtime_error("x")), 1);
}

TEST(Cli, GenDataRefusesOverwrite)
{
    const auto& r = run();
    EXPECT_TRUE(fs::exists(r.paths.corpus / "manifest.json"));
    EXPECT_THROW(cmd_gen_data(r.config, r.paths.corpus, false), OverwriteError);
}

TEST(Cli, GenDataForceIsByteIdentical)
{
    const auto& r = run();
    const auto dir = fresh_dir("cli_gen");
    cmd_gen_data(r.config, dir, false);
    const std::string manifest = bytes_of(dir / "manifest.json");
    const std::string first = bytes_of(dir / "utterances" / (r.corpus.utterances[3].id + ".fct"));
    cmd_gen_data(r.config, dir, true);
    EXPECT_EQ(bytes_of(dir / "manifest.json"), manifest);
    EXPECT_EQ(bytes_of(dir / "utterances" / (r.corpus.utterances[3].id + ".fct")), first);
    EXPECT_EQ(manifest, bytes_of(r.paths.corpus / "manifest.json"));
    fs::remove_all(dir);
}

TEST(Cli, TrainWritesCheckpoints)
{
    const auto& r = run();
    for (const char* name : {"flow", "duration", "attention", "classifiers"}) {
        EXPECT_TRUE(fs::exists(r.paths.checkpoints / (std::string(name) + ".fct"))) << name;
        EXPECT_EQ(read_tensor_file(r.paths.checkpoints / (std::string(name) + ".fct")).metadata.at("config_hash"),
                  config_hash(r.config));
    }
    for (const char* name : {"flow_loss.csv", "duration_loss.csv", "attention_loss.csv"})
        EXPECT_TRUE(fs::exists(r.paths.checkpoints / name)) << name;
}

TEST(Cli, RetrainIsIdentical)
{
    const auto& r = run();
    const auto dir = fresh_dir("cli_retrain");
    cmd_train(r.config, r.paths.corpus, dir, Stage::flow);
    cmd_train(r.config, r.paths.corpus, dir, Stage::duration);
    EXPECT_EQ(bytes_of(dir / "flow.fct"), bytes_of(r.paths.checkpoints / "flow.fct"));
    EXPECT_EQ(bytes_of(dir / "duration.fct"), bytes_of(r.paths.checkpoints / "duration.fct"));
    fs::remove_all(dir);
}

TEST(Cli, AttentionBeforeFlowIsOrderingError)
{
    const auto& r = run();
    const auto dir = fresh_dir("cli_order");
    EXPECT_THROW(cmd_train(r.config, r.paths.corpus, dir, Stage::attention), OrderingError);
    EXPECT_THROW(cmd_train(r.config, fresh_dir("cli_nocorpus"), dir, Stage::flow), OrderingError);
    fs::remove_all(dir);
}

TEST(Cli, ConfigMismatchIsOrderingError)
{
    const auto& r = run();
    RunConfig other = r.config;
    other.train_flow.lr *= 2;
    const auto dir = fresh_dir("cli_mismatch");
    EXPECT_THROW(cmd_train(other, r.paths.corpus, dir, Stage::duration), OrderingError);
    fs::remove_all(dir);
}

TEST(Cli, ConvertIsolatesRowErrors)
{
    const auto& r = run();
    // one equal-length and one unequal-length pair
    std::string eq_utt, eq_acc, neq_utt, neq_acc;
    for (const auto& u : r.corpus.utterances)
        for (const auto& a : r.corpus.accents) {
            if (a.id == u.accent) continue;
            const bool same = g2p(u.text, a).size() == u.phoneme_seq.size();
            if (same && eq_utt.empty()) eq_utt = u.id, eq_acc = a.name;
            if (!same && neq_utt.empty()) neq_utt = u.id, neq_acc = a.name;
        }
    ASSERT_FALSE(eq_utt.empty());
    ASSERT_FALSE(neq_utt.empty());
    const auto dir = fresh_dir("cli_convert");
    fs::create_directories(dir);
    const fs::path manifest = dir / "requests.json";
    write_json(manifest, {{"requests",
                           {{{"utterance", eq_utt}, {"target_accent", eq_acc}, {"mode", "remap"}},
                            {{"utterance", neq_utt}, {"target_accent", neq_acc}, {"mode", "remap"}},
                            {{"utterance", neq_utt}, {"target_accent", neq_acc}, {"mode", "remap_warp_attend"}},
                            {{"utterance", eq_utt}, {"target_accent", eq_acc}, {"mode", "remap_warp"}},
                            {{"utterance", "nobody"}, {"target_accent", eq_acc}, {"mode", "remap"}}}}});
    const auto out = dir / "converted";
    const auto s = cmd_convert(r.config, r.paths.corpus, r.paths.checkpoints, manifest, out, false);
    EXPECT_EQ(s.converted, 3u);
    EXPECT_EQ(s.failed, 2u);
    EXPECT_FALSE(s.rows[1].ok);
    EXPECT_NE(s.rows[1].error.find("equal phoneme counts"), std::string::npos);
    EXPECT_TRUE(s.rows[2].ok);
    const Json log = read_json(out / "conversion_log.json");
    ASSERT_EQ(log.at("rows").size(), 5u);
    EXPECT_EQ(log["rows"][1]["status"], "error");
    EXPECT_EQ(log["rows"][3]["status"], "ok");
    const TensorFile item = read_tensor_file(out / s.rows[3].output);
    EXPECT_EQ(item.metadata.at("mode"), "remap_warp");
    EXPECT_THROW(cmd_convert(r.config, r.paths.corpus, r.paths.checkpoints, manifest, out, false), OverwriteError);
    EXPECT_NO_THROW(cmd_convert(r.config, r.paths.corpus, r.paths.checkpoints, manifest, out, true));
    fs::remove_all(dir);
}

TEST(Cli, BadRequestManifest)
{
    const auto& r = run();
    const auto dir = fresh_dir("cli_badreq");
    fs::create_directories(dir);
    write_json(dir / "requests.json", {{"rows", Json::array()}});
    EXPECT_THROW(cmd_convert(r.config, r.paths.corpus, r.paths.checkpoints, dir / "requests.json", dir / "out", false),
                 ConfigError);
    fs::remove_all(dir);
}

TEST(Cli, EvaluateEmptyInput)
{
    const auto& r = run();
    const auto dir = fresh_dir("cli_empty");
    fs::create_directories(dir);
    EXPECT_THROW(cmd_evaluate(r.config, r.paths.corpus, r.paths.checkpoints, dir, dir / "report"), EmptyInputError);
    fs::remove_all(dir);
}

TEST(Cli, EndToEndReportAndProvenance)
{
    const auto& r = run();
    cmd_convert(r.config, r.paths.corpus, r.paths.checkpoints, std::nullopt, r.paths.converted, true);
    const EvalReport rep = cmd_evaluate(r.config, r.paths.corpus, r.paths.checkpoints, r.paths.converted, r.paths.report);
    EXPECT_EQ(rep.systems.size(), 3u);
    EXPECT_EQ(rep.tests.size(), 3u * tested_metrics().size());
    for (const char* f : {"report.json", "systems.csv", "tests.csv", "ratio_matrix.csv", "source_ratio_matrix.csv"})
        EXPECT_TRUE(fs::exists(r.paths.report / f)) << f;
    for (int s = 0; s < rep.ratio.n; ++s) EXPECT_EQ(rep.ratio.at(s, s).status, RatioCell::Status::diagonal);

    const std::string report_bytes = bytes_of(r.paths.report / "report.json");
    cmd_evaluate(r.config, r.paths.corpus, r.paths.checkpoints, r.paths.converted, r.paths.report);
    EXPECT_EQ(bytes_of(r.paths.report / "report.json"), report_bytes);

    const auto ok = cmd_check_provenance(r.dir);
    EXPECT_TRUE(ok.ok()) << (ok.problems.empty() ? "" : ok.problems.front());
    EXPECT_GT(ok.artifacts, 10u);

    // a foreign artifact breaks the check
    TensorFile stray;
    stray.metadata = provenance(r.config, "stray");
    stray.metadata["seed"] = 12345;
    write_tensor_file(r.dir / "stray.fct", stray);
    EXPECT_FALSE(cmd_check_provenance(r.dir).ok());
    fs::remove(r.dir / "stray.fct");
    EXPECT_THROW(cmd_check_provenance(fresh_dir("cli_none")), IoError);
}

TEST(Cli, SingleModeReportHasNoTests)
{
    const auto& r = run();
    RunConfig c = r.config;
    c.eval.modes = {ConversionMode::remap};
    const auto dir = fresh_dir("cli_single");
    const auto paths = RunPaths::under(dir);
    cmd_gen_data(c, paths.corpus, false);
    cmd_train(c, paths.corpus, paths.checkpoints, Stage::all);
    cmd_convert(c, paths.corpus, paths.checkpoints, std::nullopt, paths.converted, false);
    const auto rep = cmd_evaluate(c, paths.corpus, paths.checkpoints, paths.converted, paths.report);
    EXPECT_EQ(rep.systems.size(), 1u);
    EXPECT_TRUE(rep.tests.empty());
    fs::remove_all(dir);
}
