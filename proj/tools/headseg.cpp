#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "headseg/segpipe.hpp"
#include "headseg/synthgen.hpp"

namespace fs = std::filesystem;
using namespace headseg;

namespace {

class Stopwatch {
public:
    double seconds() const
    {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void progress(const std::string& msg)
{
    std::cerr << msg << std::endl;
}

std::string seconds_text(double s)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f s", s);
    return buf;
}

// Outputs are never replaced silently.
void check_output(const fs::path& path, bool force)
{
    if (fs::exists(path) && !force) throw ValidationError(path.string() + " already exists (use --force to overwrite)");
}

void require_input(const fs::path& path, const std::string& what)
{
    if (!fs::exists(path)) throw ValidationError(what + " not found: " + path.string());
}

void write_text(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    bin::write_file_atomic(path, std::span<const char>(text.data(), text.size()));
}

struct CommonOptions {
    unsigned threads = 0;
};

struct PipelineOptions {
    std::string data;
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs;
    bool force = false;

    // Config file first, then flag overrides.
    segpipe::PipelineConfig load() const
    {
        segpipe::PipelineConfig c;
        if (!config.empty()) {
            require_input(config, "config file");
            c = segpipe::load_config(config);
        }
        if (seed) c.network.seed = *seed;
        if (epochs) {
            if (*epochs < 1) throw ConfigError("--epochs must be at least 1");
            c.network.epochs = *epochs;
        }
        return c;
    }

    synthgen::DatasetSplit split() const
    {
        require_input(fs::path(data) / "split.json", "dataset split");
        return synthgen::read_split(data);
    }
};

std::vector<std::string> select(const synthgen::DatasetSplit& split, const std::string& which)
{
    if (which == "train") return split.train;
    if (which == "test") return split.test;
    auto all = split.train;
    all.insert(all.end(), split.test.begin(), split.test.end());
    return all;
}

diffnet::DiffusionNetParams load_checkpoint(const std::string& path)
{
    require_input(path, "checkpoint");
    try {
        return diffnet::load_params(path);
    } catch (const FormatError& e) {
        throw ValidationError(std::string("checkpoint ") + path + " is unreadable: " + e.what());
    }
}

void add_config_flags(CLI::App* cmd, PipelineOptions& o)
{
    cmd->add_option("--data", o.data, "Dataset root directory")->required();
    cmd->add_option("--config", o.config, "Pipeline config JSON (defaults apply when omitted)");
}

int run(int argc, char** argv)
{
    CLI::App app{"Skin segmentation of head scans with diffusion networks over lifted image features"};
    app.name("headseg");
    app.require_subcommand(1);
    app.fallthrough();
    CommonOptions common;
    app.add_option("--threads", common.threads, "Worker threads (0 = all logical cores)")->capture_default_str();

    // gen-data
    std::string gen_out, gen_profile = "test";
    int gen_count = 80;
    std::uint64_t gen_seed = 0;
    bool gen_force = false;
    auto* gen = app.add_subcommand("gen-data", "Generate a procedural labeled dataset (overwrites only with --force)");
    gen->add_option("--out", gen_out, "Output dataset directory")->required();
    gen->add_option("--count", gen_count, "Number of samples")->capture_default_str()->check(CLI::PositiveNumber);
    gen->add_option("--seed", gen_seed, "Seed of the first sample")->capture_default_str();
    gen->add_option("--profile", gen_profile, "Mesh resolution profile")
        ->capture_default_str()
        ->check(CLI::IsMember({"test", "large"}));
    gen->add_flag("--force", gen_force, "Replace existing sample directories");

    // precompute
    PipelineOptions pre_opts;
    std::string pre_split = "all";
    auto* pre = app.add_subcommand("precompute", "Build per-sample caches (idempotent)");
    add_config_flags(pre, pre_opts);
    pre->add_option("--split", pre_split, "Samples to process")->capture_default_str()->check(CLI::IsMember({"train", "test", "all"}));

    // train
    PipelineOptions train_opts;
    std::string train_out, train_log;
    auto* train = app.add_subcommand("train", "Train on the train split and write a checkpoint");
    add_config_flags(train, train_opts);
    train->add_option("--out", train_out, "Checkpoint path")->required();
    train->add_option("--log", train_log, "Optional per-epoch TSV log");
    train->add_option("--seed", train_opts.seed, "Overrides network.seed");
    train->add_option("--epochs", train_opts.epochs, "Overrides network.epochs");
    train->add_flag("--force", train_opts.force, "Overwrite existing outputs");

    // infer
    PipelineOptions infer_opts;
    std::string infer_sample, infer_ckpt, infer_out;
    auto* inf = app.add_subcommand("infer", "Predict per-vertex labels for one sample");
    inf->add_option("--sample", infer_sample, "Sample directory")->required();
    inf->add_option("--config", infer_opts.config, "Pipeline config JSON used for training");
    inf->add_option("--checkpoint", infer_ckpt, "Trained checkpoint")->required();
    inf->add_option("--out", infer_out, "Output labels file (LBLS)")->required();
    inf->add_flag("--force", infer_opts.force, "Overwrite existing outputs");

    // eval
    PipelineOptions eval_opts;
    std::string eval_ckpt, eval_out, eval_split = "test";
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and write a JSON report");
    add_config_flags(ev, eval_opts);
    ev->add_option("--checkpoint", eval_ckpt, "Trained checkpoint")->required();
    ev->add_option("--split", eval_split, "Samples to evaluate")->capture_default_str()->check(CLI::IsMember({"train", "test", "all"}));
    ev->add_option("--out", eval_out, "Report path (standard output when omitted)");
    ev->add_flag("--force", eval_opts.force, "Overwrite existing outputs");

    // ablate
    PipelineOptions abl_opts;
    std::string abl_plan, abl_out;
    std::vector<std::uint64_t> abl_seeds;
    auto* abl = app.add_subcommand("ablate", "Train and evaluate every config of a plan, one TSV row per config and seed");
    abl->add_option("--data", abl_opts.data, "Dataset root directory")->required();
    abl->add_option("--plan", abl_plan, "Ablation plan JSON")->required();
    abl->add_option("--seeds", abl_seeds, "Overrides the plan seeds")->delimiter(',');
    abl->add_option("--out", abl_out, "Results TSV (standard output when omitted)");
    abl->add_flag("--force", abl_opts.force, "Overwrite existing outputs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }
    set_thread_count(common.threads);
    const Stopwatch clock;

    if (gen->parsed()) {
        const auto profile = synthgen::profile_by_name(gen_profile);
        const auto split = synthgen::generate_dataset(gen_out, gen_count, gen_seed, profile, gen_force);
        progress("generated " + std::to_string(gen_count) + " samples (" + std::to_string(split.train.size()) + " train, " +
                 std::to_string(split.test.size()) + " test) in " + seconds_text(clock.seconds()));
    } else if (pre->parsed()) {
        const auto config = pre_opts.load();
        const auto names = select(pre_opts.split(), pre_split);
        std::vector<segpipe::PrecomputeStats> stats(names.size());
        parallel_for(names.size(), [&](std::size_t i) { stats[i] = segpipe::precompute(fs::path(pre_opts.data) / names[i], config); });
        int solves = 0, files = 0;
        for (const auto& s : stats) {
            solves += s.eigensolves;
            files += s.files_written;
        }
        progress("precomputed " + std::to_string(names.size()) + " samples: " + std::to_string(solves) + " eigensolves, " +
                 std::to_string(files) + " files written in " + seconds_text(clock.seconds()));
    } else if (train->parsed()) {
        const auto config = train_opts.load();
        check_output(train_out, train_opts.force);
        if (!train_log.empty()) check_output(train_log, train_opts.force);
        const auto split = train_opts.split();
        std::string log = "epoch\ttrain_loss\tvalidation_mIoU\n";
        const auto outcome = segpipe::train_model(train_opts.data, split.train, config, [&](const diffnet::EpochLog& e) {
            char line[96];
            std::snprintf(line, sizeof line, "%d\t%.6f\t%.6f\n", e.epoch, e.train_loss, e.validation_miou);
            log += line;
            std::cerr << "epoch " << e.epoch << "/" << config.network.epochs << "  loss " << e.train_loss << "  val mIoU "
                      << e.validation_miou << "  (" << seconds_text(clock.seconds()) << ")" << std::endl;
        });
        if (fs::path(train_out).has_parent_path()) fs::create_directories(fs::path(train_out).parent_path());
        diffnet::save_params(outcome.params, train_out);
        if (!train_log.empty()) write_text(train_log, log);
        progress("best epoch " + std::to_string(outcome.result.best_epoch) + "; wrote " + train_out + " in " +
                 seconds_text(clock.seconds()));
    } else if (inf->parsed()) {
        const auto config = infer_opts.load();
        check_output(infer_out, infer_opts.force);
        const auto params = load_checkpoint(infer_ckpt);
        const auto result = segpipe::infer(params, infer_sample, config);
        if (fs::path(infer_out).has_parent_path()) fs::create_directories(fs::path(infer_out).parent_path());
        synthgen::write_labels(result.labels, infer_out);
        std::size_t skin = 0;
        for (auto l : result.labels) skin += l == synthgen::kSkin;
        std::cout << "vertices " << result.labels.size() << "  skin " << skin << std::endl;
    } else if (ev->parsed()) {
        const auto config = eval_opts.load();
        if (!eval_out.empty()) check_output(eval_out, eval_opts.force);
        const auto params = load_checkpoint(eval_ckpt);
        const auto report = segpipe::evaluate(params, eval_opts.data, select(eval_opts.split(), eval_split), config);
        const auto text = segpipe::report_to_json(report);
        if (eval_out.empty()) std::cout << text;
        else write_text(eval_out, text);
        progress("evaluated " + std::to_string(report.samples.size()) + " samples in " + seconds_text(clock.seconds()));
    } else if (abl->parsed()) {
        require_input(abl_plan, "ablation plan");
        auto plan = segpipe::load_ablation_plan(abl_plan);
        if (!abl_seeds.empty()) plan.seeds = abl_seeds;
        if (!abl_out.empty()) check_output(abl_out, abl_opts.force);
        abl_opts.split();
        const auto rows = segpipe::run_ablation(abl_opts.data, plan, [&](const segpipe::AblationRow& r) {
            std::cerr << r.config_id << " seed " << r.seed << ": "
                      << (r.error.empty() ? "mIoU " + std::to_string(r.miou) : "failed: " + r.error) << "  ("
                      << seconds_text(clock.seconds()) << ")" << std::endl;
        });
        const auto tsv = segpipe::ablation_tsv(rows);
        if (abl_out.empty()) std::cout << tsv;
        else write_text(abl_out, tsv);
        for (const auto& r : rows) {
            if (!r.error.empty()) return 2;
        }
    }
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    try {
        return run(argc, argv);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << std::endl;
        return 1;
    } catch (const ArgumentError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failed: " << e.what() << std::endl;
        return 2;
    }
}
