// prunekit: train, prune, compact, and benchmark small gated transformer
// encoders on synthetic tasks.
//
// Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 equivalence
// gate failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "prunekit/bench.hpp"
#include "prunekit/checkpoint.hpp"
#include "prunekit/compile.hpp"
#include "prunekit/config.hpp"
#include "prunekit/report.hpp"
#include "prunekit/trainer.hpp"

namespace fs = std::filesystem;
using namespace prunekit;

namespace {

TrainingConfig resolve_config(const std::string& config_path, std::optional<std::uint64_t> seed,
                              std::optional<double> target) {
    TrainingConfig cfg = config_path.empty() ? TrainingConfig{} : load_training_config(config_path);
    if (seed) cfg.seed = *seed;
    if (target) cfg.target_sparsity = *target;
    cfg.validate();
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw UsageError("cannot write '" + path.string() + "'");
    os << text;
}

void echo_config(const TrainingConfig& cfg, const fs::path& out_dir) {
    write_text(out_dir / "config_echo.cfg", serialize_training_config(cfg));
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out) {
    TrainingConfig cfg = resolve_config(config_path, seed, std::nullopt);
    fs::create_directories(out);
    echo_config(cfg, out);
    TaskData data = generate_task(cfg.task);
    double dev_acc = 0.0;
    std::vector<StepMetrics> history;
    MaskableEncoder teacher = train_teacher(cfg, data, &dev_acc, &history);
    save_checkpoint(make_dense_checkpoint(teacher, nullptr, nullptr,
                                          {{"role", "teacher"}, {"dev_accuracy", dev_acc}}),
                    (fs::path(out) / "teacher.ckpt").string());
    nlohmann::json j;
    j["dev_accuracy"] = dev_acc;
    j["majority_accuracy"] = majority_baseline(data.dev);
    j["config"] = training_config_json(cfg);
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& m : history) curve.push_back(m.to_json());
    j["curve"] = curve;
    write_text(fs::path(out) / "teacher.json", j.dump(2) + "\n");
    std::cout << "teacher dev accuracy " << dev_acc << " -> " << (fs::path(out) / "teacher.ckpt").string()
              << "\n";
    return 0;
}

int cmd_prune(const std::string& config_path, std::optional<std::uint64_t> seed,
              std::optional<double> target, const std::string& out, const std::string& teacher_path,
              const std::string& resume_path) {
    fs::create_directories(out);

    PipelineResult result = [&]() {
        if (!resume_path.empty()) {
            PruningRun run = PruningRun::resume(resume_path);
            echo_config(run.config(), out);
            run.run(out);
            return run.finish();
        }
        TrainingConfig cfg = resolve_config(config_path, seed, target);
        echo_config(cfg, out);
        TaskData data = generate_task(cfg.task);
        MaskableEncoder teacher = [&]() {
            if (!teacher_path.empty()) return dense_from_checkpoint(load_checkpoint(teacher_path)).model;
            std::cout << "no --teacher given; training a dense teacher first\n";
            return train_teacher(cfg, data);
        }();
        PruningRun run(cfg, data, teacher);
        run.run(out);
        return run.finish();
    }();

    const RunReport& r = result.report;
    r.write_json((fs::path(out) / "report.json").string());
    r.write_csv((fs::path(out) / "curves.csv").string());
    save_checkpoint(make_dense_checkpoint(result.model, &result.masks, &result.transform,
                                          {{"role", "masked"}}),
                    (fs::path(out) / "model_masked.ckpt").string());
    save_checkpoint(make_compact_checkpoint(result.masked_dense, &result.structure,
                                            {{"role", "masked-dense"}}),
                    (fs::path(out) / "masked_dense.ckpt").string());
    save_checkpoint(make_compact_checkpoint(result.compact, &result.structure, {{"role", "compact"}}),
                    (fs::path(out) / "compact.ckpt").string());
    r.write_table(std::cout);
    return 0;
}

int cmd_extract(const std::string& in, const std::string& out, const std::string& dense_out,
                std::optional<double> target) {
    Checkpoint ck = load_checkpoint(in);
    DenseBundle bundle = dense_from_checkpoint(ck);
    if (!bundle.has_masks)
        throw UsageError("'" + in + "' carries no mask parameters; nothing to extract");
    MaskSnapshot det = snapshot(bundle.masks.deterministic());
    PrunedStructure structure = binarize(det, bundle.model.cfg, target.value_or(0.0));
    CompactModel compact = extract(bundle.model, structure);
    save_checkpoint(make_compact_checkpoint(compact, &structure, {{"role", "compact"}}), out);
    std::cout << "extracted " << count_params(compact).headline() << " of "
              << bundle.model.cfg.full_size() << " params; pattern " << layer_pattern(structure) << "\n";
    if (!dense_out.empty()) {
        CompactModel filled = zero_fill(bundle.model, structure);
        save_checkpoint(make_compact_checkpoint(filled, &structure, {{"role", "masked-dense"}}), dense_out);
    }
    return 0;
}

int cmd_bench(const std::string& dense_path, const std::string& compact_path, BenchSpec spec,
              const std::string& out) {
    CompactModel dense = compact_from_checkpoint(load_checkpoint(dense_path));
    CompactModel compact = compact_from_checkpoint(load_checkpoint(compact_path));
    LatencyResult r = bench(dense, compact, spec);
    std::cout << "dense   median " << r.dense.median_us << " us/iter (p10 " << r.dense.p10_us << ", p90 "
              << r.dense.p90_us << ")\n";
    std::cout << "compact median " << r.compact.median_us << " us/iter (p10 " << r.compact.p10_us
              << ", p90 " << r.compact.p90_us << ")\n";
    std::cout << "speedup " << r.speedup << "x (probe gap " << r.probe_max_abs_diff << ")\n";
    if (!out.empty()) {
        fs::create_directories(fs::path(out).parent_path().empty() ? "." : fs::path(out).parent_path());
        write_text(out, r.to_json().dump(2) + "\n");
    }
    return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& format,
               const std::string& out) {
    std::vector<RunReport> reports;
    for (const auto& dir : run_dirs) {
        RunReport r = RunReport::load_json((fs::path(dir) / "report.json").string());
        // Reported counts must be recomputable from the checkpoint itself.
        const fs::path ckpt = fs::path(dir) / "compact.ckpt";
        if (fs::exists(ckpt)) {
            CompactModel c = compact_from_checkpoint(load_checkpoint(ckpt.string()));
            if (count_params(c).headline() != r.pruned_params)
                throw UsageError("report for '" + dir + "' disagrees with its checkpoint: " +
                                 std::to_string(r.pruned_params) + " vs " +
                                 std::to_string(count_params(c).headline()));
        }
        reports.push_back(std::move(r));
    }
    fs::create_directories(out);
    if (format == "json") {
        nlohmann::json j;
        j["runs"] = nlohmann::json::array();
        for (const auto& r : reports) j["runs"].push_back(r.to_json());
        if (reports.size() > 1) j["aggregate"] = aggregate_structures(reports);
        write_text(fs::path(out) / "report.json", j.dump(2) + "\n");
        std::cout << (fs::path(out) / "report.json").string() << "\n";
    } else if (format == "csv") {
        for (size_t i = 0; i < reports.size(); ++i) {
            const fs::path p = fs::path(out) / ("curves_" + std::to_string(i) + ".csv");
            reports[i].write_csv(p.string());
            std::cout << p.string() << "\n";
        }
    } else if (format == "text-table") {
        for (const auto& r : reports) {
            r.write_table(std::cout);
            std::cout << "\n";
        }
        if (reports.size() > 1) {
            const auto agg = aggregate_structures(reports);
            std::cout << "mean heads per layer   :";
            for (double v : agg.at("mean_heads_per_layer").get<std::vector<double>>()) std::cout << ' ' << v;
            std::cout << "\nmean int dims per layer:";
            for (double v : agg.at("mean_int_dims_per_layer").get<std::vector<double>>())
                std::cout << ' ' << v;
            std::cout << "\n";
        }
    } else {
        throw UsageError("unknown format '" + format + "' (expected json | csv | text-table)");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"structured pruning toolchain for gated transformer encoders"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "runs/out", teacher_path, resume_path;
    std::optional<std::uint64_t> seed;
    std::optional<double> target;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "key = value config file");
        cmd->add_option("--seed", seed, "override the config seed");
        cmd->add_option("--out-dir", out_dir, "output directory");
    };

    CLI::App* train = app.add_subcommand("train", "train the dense teacher on the synthetic task");
    add_common(train);

    CLI::App* prune = app.add_subcommand("prune", "run the full pruning pipeline");
    add_common(prune);
    prune->add_option("--target-sparsity", target, "override the config target sparsity");
    prune->add_option("--teacher", teacher_path, "dense teacher checkpoint (trained if omitted)");
    prune->add_option("--resume", resume_path, "resume from a run-state checkpoint");

    std::string in_path, compact_out = "compact.ckpt", dense_out;
    CLI::App* extract_cmd = app.add_subcommand("extract", "binarize masks and emit a compact checkpoint");
    extract_cmd->add_option("--in", in_path, "masked dense checkpoint")->required();
    extract_cmd->add_option("--out", compact_out, "compact checkpoint path");
    extract_cmd->add_option("--dense-out", dense_out, "also emit the zero-filled dense-cost twin");
    extract_cmd->add_option("--target-sparsity", target, "recorded target (thresholds are mask-driven)");

    std::string bench_dense, bench_compact, bench_out;
    BenchSpec bench_spec;
    CLI::App* bench_cmd = app.add_subcommand("bench", "latency comparison of two checkpoints");
    bench_cmd->add_option("--dense", bench_dense, "baseline checkpoint")->required();
    bench_cmd->add_option("--compact", bench_compact, "compact checkpoint")->required();
    bench_cmd->add_option("--batch", bench_spec.batch, "sequences per timed iteration");
    bench_cmd->add_option("--seq", bench_spec.seq_len, "sequence length");
    bench_cmd->add_option("--warmup", bench_spec.warmup_iters, "warmup iterations (excluded)");
    bench_cmd->add_option("--iters", bench_spec.measured_iters, "measured iterations");
    bench_cmd->add_option("--seed", bench_spec.seed, "probe/batch seed");
    bench_cmd->add_option("--out", bench_out, "write LatencyResult JSON here");

    std::vector<std::string> run_dirs;
    std::string format = "text-table";
    CLI::App* report_cmd = app.add_subcommand("report", "re-emit reports from run directories");
    report_cmd->add_option("run_dirs", run_dirs, "run directories containing report.json")->required();
    report_cmd->add_option("--format", format, "json | csv | text-table");
    report_cmd->add_option("--out-dir", out_dir, "output directory");

    try {
        app.parse(argc, argv);
        if (train->parsed()) return cmd_train(config_path, seed, out_dir);
        if (prune->parsed()) return cmd_prune(config_path, seed, target, out_dir, teacher_path, resume_path);
        if (extract_cmd->parsed()) return cmd_extract(in_path, compact_out, dense_out, target);
        if (bench_cmd->parsed()) return cmd_bench(bench_dense, bench_compact, bench_spec, bench_out);
        if (report_cmd->parsed()) return cmd_report(run_dirs, format, out_dir);
        return 1;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const EquivalenceError& e) {
        std::cerr << "equivalence gate failure: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
