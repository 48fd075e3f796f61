#pragma once

// Run configuration and its human-readable key = value file format.

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "prunekit/common.hpp"
#include "prunekit/gates.hpp"
#include "prunekit/model.hpp"
#include "prunekit/task.hpp"

namespace prunekit {

enum class DistillMode { full, pred_only, none };

inline const char* to_string(DistillMode m) {
    switch (m) {
        case DistillMode::full: return "full";
        case DistillMode::pred_only: return "pred-only";
        case DistillMode::none: return "none";
    }
    return "?";
}

inline DistillMode distill_mode_from_string(const std::string& s) {
    if (s == "full") return DistillMode::full;
    if (s == "pred-only") return DistillMode::pred_only;
    if (s == "none") return DistillMode::none;
    throw UsageError("unknown distill mode '" + s + "' (expected full | pred-only | none)");
}

struct TrainingConfig {
    ModelConfig model;
    TaskSpec task;

    double target_sparsity = 0.95;
    double distill_lambda = 0.5;  // weight of the prediction loss inside the distillation objective
    double temperature = 2.0;
    DistillMode distill_mode = DistillMode::full;
    bool fixed_match = false;
    bool monotonic_match = false;
    std::vector<int> teacher_layers;  // 0-based; empty means every layer

    double lr_weights = 3e-4;
    double lr_masks = 0.1;
    double lr_multipliers = 0.3;
    double lr_teacher = 1e-3;
    double lr_finetune = 1e-4;
    double clip_norm = 1.0;
    int batch_size = 32;
    int epochs_teacher = 5;
    int epochs_prewarm = 1;
    int epochs_prune = 4;
    int epochs_finetune = 5;
    int sparsity_warmup_epochs = 2;
    int eval_every_steps = 64;
    int checkpoint_every_steps = 0;  // 0 disables run-state checkpoints
    bool layer_masks = true;
    GateConfig gates;
    std::uint64_t seed = 42;

    void validate() const {
        model.validate();
        task.validate();
        gates.validate();
        if (target_sparsity < 0.0 || target_sparsity >= 1.0)
            throw UsageError("target_sparsity must lie in [0,1)");
        if (distill_lambda < 0.0 || distill_lambda > 1.0) throw UsageError("distill_lambda must lie in [0,1]");
        if (temperature <= 0.0) throw UsageError("temperature must be positive");
        if (batch_size < 1) throw UsageError("batch_size must be >= 1");
        for (int e : {epochs_teacher, epochs_prewarm, epochs_prune, epochs_finetune})
            if (e < 0) throw UsageError("epoch counts must be >= 0");
        if (sparsity_warmup_epochs < 0 || sparsity_warmup_epochs > epochs_prune)
            throw UsageError("sparsity_warmup_epochs must lie in [0, epochs_prune]");
        for (int l : teacher_layers)
            if (l < 0 || l >= model.layers) throw UsageError("teacher layer index out of range");
        if (task.classes != model.classes) throw UsageError("task classes must match model classes");
        if (task.vocab != model.vocab) throw UsageError("task vocab must match model vocab");
        if (task.seq_len > model.max_seq) throw UsageError("task seq_len exceeds model max_seq");
    }

    std::vector<int> effective_teacher_layers() const {
        if (!teacher_layers.empty()) return teacher_layers;
        std::vector<int> all(model.layers);
        for (int i = 0; i < model.layers; ++i) all[i] = i;
        return all;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace detail

// Parses "key = value" lines; '#' starts a comment. Unknown keys are errors.
inline std::map<std::string, std::string> parse_key_values(std::istream& is) {
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const std::string t = detail::trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw UsageError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" + t + "'");
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string val = detail::trim(t.substr(eq + 1));
        if (key.empty()) throw UsageError("config line " + std::to_string(lineno) + ": empty key");
        if (kv.count(key)) throw UsageError("config: duplicate key '" + key + "'");
        kv[key] = val;
    }
    return kv;
}

inline TrainingConfig training_config_from_kv(const std::map<std::string, std::string>& kv_in) {
    TrainingConfig c;
    std::map<std::string, std::string> kv = kv_in;
    auto take = [&kv](const char* key) {
        auto it = kv.find(key);
        if (it == kv.end()) return std::string();
        std::string v = it->second;
        kv.erase(it);
        return v;
    };
    auto to_int = [](const std::string& k, const std::string& v) {
        try {
            return std::stoi(v);
        } catch (...) {
            throw UsageError("config key '" + k + "': expected integer, got '" + v + "'");
        }
    };
    auto to_double = [](const std::string& k, const std::string& v) {
        try {
            return std::stod(v);
        } catch (...) {
            throw UsageError("config key '" + k + "': expected number, got '" + v + "'");
        }
    };
    auto to_bool = [](const std::string& k, const std::string& v) {
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw UsageError("config key '" + k + "': expected boolean, got '" + v + "'");
    };
    auto set_i = [&](const char* k, int& dst) {
        const std::string v = take(k);
        if (!v.empty()) dst = to_int(k, v);
    };
    auto set_d = [&](const char* k, double& dst) {
        const std::string v = take(k);
        if (!v.empty()) dst = to_double(k, v);
    };
    auto set_b = [&](const char* k, bool& dst) {
        const std::string v = take(k);
        if (!v.empty()) dst = to_bool(k, v);
    };

    if (const std::string v = take("task"); !v.empty()) c.task.kind = task_kind_from_string(v);
    set_i("vocab", c.task.vocab);
    set_i("seq_len", c.task.seq_len);
    set_i("classes", c.task.classes);
    set_i("train_size", c.task.train_size);
    set_i("dev_size", c.task.dev_size);
    if (const std::string v = take("task_seed"); !v.empty()) c.task.seed = std::stoull(v);

    set_i("layers", c.model.layers);
    set_i("hidden", c.model.hidden);
    set_i("heads", c.model.heads);
    set_i("ffn_dim", c.model.ffn_dim);
    c.model.head_dim = c.model.heads > 0 ? c.model.hidden / c.model.heads : 0;
    c.model.vocab = c.task.vocab;
    c.model.max_seq = c.task.seq_len;
    c.model.classes = c.task.classes;

    if (const std::string v = take("seed"); !v.empty()) c.seed = std::stoull(v);
    set_d("target_sparsity", c.target_sparsity);
    set_d("distill_lambda", c.distill_lambda);
    set_d("temperature", c.temperature);
    if (const std::string v = take("distill_mode"); !v.empty()) c.distill_mode = distill_mode_from_string(v);
    set_b("fixed_match", c.fixed_match);
    set_b("monotonic_match", c.monotonic_match);
    if (const std::string v = take("teacher_layers"); !v.empty()) {
        c.teacher_layers.clear();
        std::stringstream ss(v);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            const int one_based = to_int("teacher_layers", detail::trim(tok));
            c.teacher_layers.push_back(one_based - 1);  // file uses 1-based layers
        }
    }

    set_d("lr_weights", c.lr_weights);
    set_d("lr_masks", c.lr_masks);
    set_d("lr_multipliers", c.lr_multipliers);
    set_d("lr_teacher", c.lr_teacher);
    set_d("lr_finetune", c.lr_finetune);
    set_d("clip_norm", c.clip_norm);
    set_i("batch_size", c.batch_size);
    set_i("epochs_teacher", c.epochs_teacher);
    set_i("epochs_prewarm", c.epochs_prewarm);
    set_i("epochs_prune", c.epochs_prune);
    set_i("epochs_finetune", c.epochs_finetune);
    set_i("sparsity_warmup_epochs", c.sparsity_warmup_epochs);
    set_i("eval_every_steps", c.eval_every_steps);
    set_i("checkpoint_every_steps", c.checkpoint_every_steps);
    set_b("layer_masks", c.layer_masks);
    set_d("gate_beta", c.gates.beta);
    set_d("gate_stretch_lo", c.gates.stretch_lo);
    set_d("gate_stretch_hi", c.gates.stretch_hi);
    set_d("gate_init_mean", c.gates.init_mean);
    set_d("gate_init_std", c.gates.init_std);

    if (!kv.empty()) throw UsageError("config: unknown key '" + kv.begin()->first + "'");
    c.validate();
    return c;
}

inline TrainingConfig load_training_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot open config file '" + path + "'");
    auto kv = parse_key_values(is);
    return training_config_from_kv(kv);
}

// Full echo in the same key = value schema; parsing it back reproduces the run.
inline std::string serialize_training_config(const TrainingConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "task = " << to_string(c.task.kind) << "\n";
    os << "vocab = " << c.task.vocab << "\n";
    os << "seq_len = " << c.task.seq_len << "\n";
    os << "classes = " << c.task.classes << "\n";
    os << "train_size = " << c.task.train_size << "\n";
    os << "dev_size = " << c.task.dev_size << "\n";
    os << "task_seed = " << c.task.seed << "\n";
    os << "layers = " << c.model.layers << "\n";
    os << "hidden = " << c.model.hidden << "\n";
    os << "heads = " << c.model.heads << "\n";
    os << "ffn_dim = " << c.model.ffn_dim << "\n";
    os << "seed = " << c.seed << "\n";
    os << "target_sparsity = " << c.target_sparsity << "\n";
    os << "distill_lambda = " << c.distill_lambda << "\n";
    os << "temperature = " << c.temperature << "\n";
    os << "distill_mode = " << to_string(c.distill_mode) << "\n";
    os << "fixed_match = " << (c.fixed_match ? "true" : "false") << "\n";
    os << "monotonic_match = " << (c.monotonic_match ? "true" : "false") << "\n";
    if (!c.teacher_layers.empty()) {
        os << "teacher_layers = ";
        for (size_t i = 0; i < c.teacher_layers.size(); ++i)
            os << (i ? "," : "") << (c.teacher_layers[i] + 1);
        os << "\n";
    }
    os << "lr_weights = " << c.lr_weights << "\n";
    os << "lr_masks = " << c.lr_masks << "\n";
    os << "lr_multipliers = " << c.lr_multipliers << "\n";
    os << "lr_teacher = " << c.lr_teacher << "\n";
    os << "lr_finetune = " << c.lr_finetune << "\n";
    os << "clip_norm = " << c.clip_norm << "\n";
    os << "batch_size = " << c.batch_size << "\n";
    os << "epochs_teacher = " << c.epochs_teacher << "\n";
    os << "epochs_prewarm = " << c.epochs_prewarm << "\n";
    os << "epochs_prune = " << c.epochs_prune << "\n";
    os << "epochs_finetune = " << c.epochs_finetune << "\n";
    os << "sparsity_warmup_epochs = " << c.sparsity_warmup_epochs << "\n";
    os << "eval_every_steps = " << c.eval_every_steps << "\n";
    os << "checkpoint_every_steps = " << c.checkpoint_every_steps << "\n";
    os << "layer_masks = " << (c.layer_masks ? "true" : "false") << "\n";
    os << "gate_beta = " << c.gates.beta << "\n";
    os << "gate_stretch_lo = " << c.gates.stretch_lo << "\n";
    os << "gate_stretch_hi = " << c.gates.stretch_hi << "\n";
    os << "gate_init_mean = " << c.gates.init_mean << "\n";
    os << "gate_init_std = " << c.gates.init_std << "\n";
    return os.str();
}

inline nlohmann::json training_config_json(const TrainingConfig& c) {
    nlohmann::json j;
    j["task"] = {{"kind", to_string(c.task.kind)}, {"vocab", c.task.vocab},   {"seq_len", c.task.seq_len},
                 {"classes", c.task.classes},      {"train_size", c.task.train_size},
                 {"dev_size", c.task.dev_size},    {"seed", c.task.seed}};
    j["model"] = {{"layers", c.model.layers}, {"hidden", c.model.hidden}, {"heads", c.model.heads},
                  {"ffn_dim", c.model.ffn_dim}};
    j["seed"] = c.seed;
    j["target_sparsity"] = c.target_sparsity;
    j["distill_lambda"] = c.distill_lambda;
    j["temperature"] = c.temperature;
    j["distill_mode"] = to_string(c.distill_mode);
    j["fixed_match"] = c.fixed_match;
    j["monotonic_match"] = c.monotonic_match;
    j["teacher_layers"] = c.teacher_layers;
    j["lr"] = {{"weights", c.lr_weights},   {"masks", c.lr_masks},   {"multipliers", c.lr_multipliers},
               {"teacher", c.lr_teacher},   {"finetune", c.lr_finetune}};
    j["clip_norm"] = c.clip_norm;
    j["batch_size"] = c.batch_size;
    j["epochs"] = {{"teacher", c.epochs_teacher},
                   {"prewarm", c.epochs_prewarm},
                   {"prune", c.epochs_prune},
                   {"finetune", c.epochs_finetune},
                   {"sparsity_warmup", c.sparsity_warmup_epochs}};
    j["eval_every_steps"] = c.eval_every_steps;
    j["checkpoint_every_steps"] = c.checkpoint_every_steps;
    j["layer_masks"] = c.layer_masks;
    j["gates"] = {{"beta", c.gates.beta},
                  {"stretch_lo", c.gates.stretch_lo},
                  {"stretch_hi", c.gates.stretch_hi},
                  {"init_mean", c.gates.init_mean},
                  {"init_std", c.gates.init_std}};
    return j;
}

}  // namespace prunekit
