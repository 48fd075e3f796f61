#pragma once

// Run reporting: per-step curves, structure summaries, the layer-pattern
// string, and emission as JSON / CSV / text table.

#include <json.hpp>

#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "prunekit/bench.hpp"
#include "prunekit/compile.hpp"
#include "prunekit/config.hpp"

namespace prunekit {

struct StepMetrics {
    long step = 0;
    int phase = 0;  // 1 prewarm, 2 prune, 3 finetune
    double loss = 0.0;
    double pred_loss = 0.0;
    double layer_loss = 0.0;
    double ce_loss = 0.0;
    double lagrangian = 0.0;
    double s_hat = 1.0;            // sampled retained fraction during pruning
    double target_retained = 1.0;  // scheduled t for this step
    double lambda1 = 0.0;
    double lambda2 = 0.0;
    double eval_accuracy = -1.0;  // -1 when no eval ran at this step
    double eval_sparsity = -1.0;

    nlohmann::json to_json() const {
        return {{"step", step},
                {"phase", phase},
                {"loss", loss},
                {"pred_loss", pred_loss},
                {"layer_loss", layer_loss},
                {"ce_loss", ce_loss},
                {"lagrangian", lagrangian},
                {"s_hat", s_hat},
                {"target_retained", target_retained},
                {"lambda1", lambda1},
                {"lambda2", lambda2},
                {"eval_accuracy", eval_accuracy},
                {"eval_sparsity", eval_sparsity}};
    }
    static StepMetrics from_json(const nlohmann::json& j) {
        StepMetrics m;
        m.step = j.at("step");
        m.phase = j.at("phase");
        m.loss = j.at("loss");
        m.pred_loss = j.at("pred_loss");
        m.layer_loss = j.at("layer_loss");
        m.ce_loss = j.at("ce_loss");
        m.lagrangian = j.at("lagrangian");
        m.s_hat = j.at("s_hat");
        m.target_retained = j.at("target_retained");
        m.lambda1 = j.at("lambda1");
        m.lambda2 = j.at("lambda2");
        m.eval_accuracy = j.at("eval_accuracy");
        m.eval_sparsity = j.at("eval_sparsity");
        return m;
    }
};

// Two characters per block: 'm' if the MHA layer survives else 'n', then 'f'
// if the FFN layer survives else 'g'.
inline std::string layer_pattern(const PrunedStructure& s) {
    std::string out;
    for (size_t i = 0; i < s.keep_mha.size(); ++i) {
        out += s.keep_mha[i] ? 'm' : 'n';
        out += s.keep_ffn[i] ? 'f' : 'g';
    }
    return out;
}

struct RunReport {
    nlohmann::json config_echo;
    std::vector<StepMetrics> curve;
    double teacher_accuracy = -1.0;
    double final_accuracy = -1.0;  // compact model on dev
    double majority_accuracy = -1.0;
    long dense_params = 0;    // M of the dense model
    long pruned_params = 0;   // retained (embeddings excluded)
    double target_sparsity = 0.0;
    double achieved_sparsity = 0.0;
    bool missed_target = false;
    bool degenerate = false;
    double equivalence_max_abs = 0.0;
    std::vector<int> heads_per_layer;
    std::vector<int> int_dims_per_layer;
    std::string pattern;
    nlohmann::json structure;
    std::optional<LatencyResult> latency;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["config"] = config_echo;
        nlohmann::json curve_json = nlohmann::json::array();
        for (const auto& m : curve) curve_json.push_back(m.to_json());
        j["curve"] = curve_json;
        j["teacher_accuracy"] = teacher_accuracy;
        j["final_accuracy"] = final_accuracy;
        j["majority_accuracy"] = majority_accuracy;
        j["dense_params"] = dense_params;
        j["pruned_params"] = pruned_params;
        j["target_sparsity"] = target_sparsity;
        j["achieved_sparsity"] = achieved_sparsity;
        j["missed_target"] = missed_target;
        j["degenerate"] = degenerate;
        j["equivalence_max_abs"] = equivalence_max_abs;
        j["heads_per_layer"] = heads_per_layer;
        j["int_dims_per_layer"] = int_dims_per_layer;
        j["layer_pattern"] = pattern;
        j["structure"] = structure;
        if (latency) j["latency"] = latency->to_json();
        return j;
    }

    static RunReport from_json(const nlohmann::json& j) {
        RunReport r;
        r.config_echo = j.at("config");
        for (const auto& m : j.at("curve")) r.curve.push_back(StepMetrics::from_json(m));
        r.teacher_accuracy = j.at("teacher_accuracy");
        r.final_accuracy = j.at("final_accuracy");
        r.majority_accuracy = j.at("majority_accuracy");
        r.dense_params = j.at("dense_params");
        r.pruned_params = j.at("pruned_params");
        r.target_sparsity = j.at("target_sparsity");
        r.achieved_sparsity = j.at("achieved_sparsity");
        r.missed_target = j.at("missed_target");
        r.degenerate = j.at("degenerate");
        r.equivalence_max_abs = j.at("equivalence_max_abs");
        r.heads_per_layer = j.at("heads_per_layer").get<std::vector<int>>();
        r.int_dims_per_layer = j.at("int_dims_per_layer").get<std::vector<int>>();
        r.pattern = j.at("layer_pattern");
        r.structure = j.at("structure");
        if (j.contains("latency")) r.latency = LatencyResult::from_json(j.at("latency"));
        return r;
    }

    void write_json(const std::string& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw UsageError("cannot write '" + path + "'");
        os << to_json().dump(2) << "\n";
    }

    static RunReport load_json(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw UsageError("cannot open '" + path + "'");
        nlohmann::json j;
        is >> j;
        return from_json(j);
    }

    // Plot-ready curve. Columns are stable:
    // step,phase,loss,pred_loss,layer_loss,ce_loss,lagrangian,s_hat,
    // target_retained,lambda1,lambda2,eval_accuracy,eval_sparsity
    void write_csv(const std::string& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw UsageError("cannot write '" + path + "'");
        os << "step,phase,loss,pred_loss,layer_loss,ce_loss,lagrangian,s_hat,"
              "target_retained,lambda1,lambda2,eval_accuracy,eval_sparsity\n";
        os << std::setprecision(10);
        for (const auto& m : curve) {
            os << m.step << ',' << m.phase << ',' << m.loss << ',' << m.pred_loss << ',' << m.layer_loss
               << ',' << m.ce_loss << ',' << m.lagrangian << ',' << m.s_hat << ',' << m.target_retained
               << ',' << m.lambda1 << ',' << m.lambda2 << ',' << m.eval_accuracy << ','
               << m.eval_sparsity << '\n';
        }
    }

    void write_table(std::ostream& os) const {
        os << "layer pattern     : " << pattern << "\n";
        os << "params (dense)    : " << dense_params << "\n";
        os << "params (pruned)   : " << pruned_params << "\n";
        os << "sparsity          : " << achieved_sparsity << " (target " << target_sparsity << ")"
           << (missed_target ? "  [missed target]" : "") << "\n";
        os << "dev accuracy      : " << final_accuracy << " (teacher " << teacher_accuracy << ", majority "
           << majority_accuracy << ")\n";
        os << "equivalence gap   : " << equivalence_max_abs << "\n";
        os << "heads per layer   :";
        for (int h : heads_per_layer) os << ' ' << h;
        os << "\nint dims per layer:";
        for (int d : int_dims_per_layer) os << ' ' << d;
        os << "\n";
        if (degenerate) os << "NOTE: every MHA and FFN layer was pruned\n";
        if (latency) {
            os << "latency (dense)   : " << latency->dense.median_us << " us/iter (p10 "
               << latency->dense.p10_us << ", p90 " << latency->dense.p90_us << ")\n";
            os << "latency (compact) : " << latency->compact.median_us << " us/iter (p10 "
               << latency->compact.p10_us << ", p90 " << latency->compact.p90_us << ")\n";
            os << "speedup           : " << latency->speedup << "x\n";
        }
    }
};

// Per-layer mean kept heads / intermediate dims across repeated runs.
inline nlohmann::json aggregate_structures(const std::vector<RunReport>& runs) {
    nlohmann::json j;
    if (runs.empty()) return j;
    const size_t layers = runs[0].heads_per_layer.size();
    std::vector<double> mean_heads(layers, 0.0), mean_int(layers, 0.0);
    for (const auto& r : runs) {
        if (r.heads_per_layer.size() != layers)
            throw UsageError("aggregate: runs have different depths");
        for (size_t l = 0; l < layers; ++l) {
            mean_heads[l] += r.heads_per_layer[l];
            mean_int[l] += r.int_dims_per_layer[l];
        }
    }
    for (size_t l = 0; l < layers; ++l) {
        mean_heads[l] /= double(runs.size());
        mean_int[l] /= double(runs.size());
    }
    j["runs"] = runs.size();
    j["mean_heads_per_layer"] = mean_heads;
    j["mean_int_dims_per_layer"] = mean_int;
    nlohmann::json patterns = nlohmann::json::array();
    for (const auto& r : runs) patterns.push_back(r.pattern);
    j["layer_patterns"] = patterns;
    return j;
}

}  // namespace prunekit
