#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "flowconvert/cli.hpp"

namespace fc = flowconvert;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool force = false;
    std::string corpus, checkpoints, converted;
};

void add_common(CLI::App* cmd, Common& c)
{
    cmd->add_option("--config", c.config, "INI run configuration (built-in defaults when omitted)");
    cmd->add_option("--seed", c.seed, "override run.seed");
    cmd->add_option("--out", c.out, "run directory")->required();
    cmd->add_option("--corpus", c.corpus, "corpus directory (default <out>/corpus)");
    cmd->add_option("--checkpoints", c.checkpoints, "checkpoint directory (default <out>/checkpoints)");
}

fc::RunConfig resolve_config(const Common& c)
{
    fc::RunConfig config = c.config.empty() ? fc::default_config() : fc::load_config(c.config);
    if (c.seed) config.seed = *c.seed;
    config.validate();
    return config;
}

fc::RunPaths resolve_paths(const Common& c)
{
    fc::RunPaths p = fc::RunPaths::under(c.out);
    if (!c.corpus.empty()) p.corpus = c.corpus;
    if (!c.checkpoints.empty()) p.checkpoints = c.checkpoints;
    if (!c.converted.empty()) p.converted = c.converted;
    return p;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Flow-based accent conversion on a synthetic multi-accent corpus"};
    app.require_subcommand(1);

    Common gen, train, convert, evaluate;
    std::string stage = "all";
    std::string requests;
    std::string run_dir;

    auto* gen_cmd = app.add_subcommand("gen-data", "generate the synthetic corpus into <out>/corpus");
    add_common(gen_cmd, gen);
    gen_cmd->add_flag("--force", gen.force, "overwrite an existing corpus");

    auto* train_cmd = app.add_subcommand("train", "train models into <out>/checkpoints");
    add_common(train_cmd, train);
    train_cmd->add_option("--stage", stage, "flow, duration, attention, classifiers or all")
        ->check(CLI::IsMember({"flow", "duration", "attention", "classifiers", "all"}));

    auto* convert_cmd = app.add_subcommand("convert", "convert utterances into <out>/converted");
    add_common(convert_cmd, convert);
    convert_cmd->add_option("--requests", requests, "JSON request manifest (default: eval split x other accents x modes)");
    convert_cmd->add_flag("--force", convert.force, "overwrite earlier conversions");

    auto* eval_cmd = app.add_subcommand("evaluate", "score converted utterances into <out>/report");
    add_common(eval_cmd, evaluate);
    eval_cmd->add_option("--converted", evaluate.converted, "converted directory (default <out>/converted)");

    auto* prov_cmd = app.add_subcommand("provenance", "check that every artifact of a run shares one config");
    prov_cmd->add_option("--out", run_dir, "run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*gen_cmd) {
            const auto config = resolve_config(gen);
            fc::cmd_gen_data(config, resolve_paths(gen).corpus, gen.force);
        } else if (*train_cmd) {
            const auto config = resolve_config(train);
            const auto paths = resolve_paths(train);
            fc::cmd_train(config, paths.corpus, paths.checkpoints, fc::parse_stage(stage));
        } else if (*convert_cmd) {
            const auto config = resolve_config(convert);
            const auto paths = resolve_paths(convert);
            std::optional<fc::fs::path> manifest;
            if (!requests.empty()) manifest = requests;
            const auto summary = fc::cmd_convert(config, paths.corpus, paths.checkpoints, manifest, paths.converted,
                                                 convert.force);
            for (const auto& r : summary.rows)
                if (!r.ok)
                    std::cerr << "row " << r.row.utterance << " -> " << r.row.target_accent << " ("
                              << fc::to_string(r.row.mode) << "): " << r.error << "\n";
        } else if (*eval_cmd) {
            const auto config = resolve_config(evaluate);
            const auto paths = resolve_paths(evaluate);
            const auto report = fc::cmd_evaluate(config, paths.corpus, paths.checkpoints, paths.converted, paths.report);
            std::cout << fc::systems_csv(report);
        } else if (*prov_cmd) {
            const auto check = fc::cmd_check_provenance(run_dir);
            for (const auto& p : check.problems) std::cerr << p << "\n";
            std::cout << check.artifacts << " artifacts, " << (check.ok() ? "consistent" : "INCONSISTENT") << "\n";
            return check.ok() ? 0 : 3;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return fc::exit_code(e);
    }
    return 0;
}
