#pragma once

// Three-phase pruning pipeline: distillation prewarm, scheduled pruning with
// joint weight / gate / multiplier updates, then fixed-structure finetuning of
// the binarized subnetwork.
//
// Determinism contract: batch orders and gate noise come from pure functions
// of (seed, phase, epoch/step), so identical configs replay identical
// trajectories and run-state checkpoints resume bit-for-bit.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "prunekit/checkpoint.hpp"
#include "prunekit/compile.hpp"
#include "prunekit/config.hpp"
#include "prunekit/distill.hpp"
#include "prunekit/gates.hpp"
#include "prunekit/model.hpp"
#include "prunekit/optim.hpp"
#include "prunekit/report.hpp"
#include "prunekit/task.hpp"

namespace prunekit {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a + 0x9E3779B97F4A7C15ULL * (b + 1);
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
}

// -mean_i log p_i[label_i], built from tape primitives.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rows() != static_cast<int>(labels.size()))
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(logits.rows()) + " logit rows");
    const int n = logits.rows(), c = logits.cols();
    std::vector<float> onehot(static_cast<size_t>(n) * c, 0.0f);
    for (int i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= c) throw UsageError("cross_entropy: label out of range");
        onehot[size_t(i) * c + labels[i]] = 1.0f;
    }
    Tensor p = clamp(softmax(logits), 1e-12, 1.0);
    Tensor picked = mul(log(p), Tensor::from({n, c}, std::move(onehot)));
    return affine(sum(picked), -1.0 / n, 0.0);
}

struct SparsitySchedule {
    long start_step = 0;
    long warmup_steps = 0;
    double final_target = 0.0;

    // 0 before the start, linear over the warmup, then constant.
    double target_at(long step) const {
        if (step < start_step) return 0.0;
        if (warmup_steps <= 0 || step >= start_step + warmup_steps) return final_target;
        return final_target * double(step - start_step) / double(warmup_steps);
    }
};

inline double scheduled_target(const SparsitySchedule& s, long step) { return s.target_at(step); }

// Fixed batch membership (contiguous chunks of the class-interleaved train
// set); only the visiting order reshuffles per epoch.
struct Batcher {
    size_t n = 0;
    int batch_size = 1;

    long batches() const { return (long(n) + batch_size - 1) / batch_size; }
    std::pair<size_t, size_t> range(long b) const {
        const size_t a = size_t(b) * batch_size;
        return {a, std::min(n, a + batch_size)};
    }
    std::vector<long> order_for(std::uint64_t seed, int phase, long epoch) const {
        std::vector<long> order(batches());
        for (long i = 0; i < batches(); ++i) order[i] = i;
        Rng rng(mix_seed(seed ^ 0xBA7C4E5ULL, (std::uint64_t(phase) << 40) + std::uint64_t(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        return order;
    }
};

inline double dataset_accuracy(const MaskableEncoder& m, const MaskValues& z, const Dataset& d) {
    NoGradGuard ng;
    long hits = 0;
    for (size_t i = 0; i < d.size(); ++i) {
        EncoderOutput out = encoder_forward(m, d.tokens[i], z);
        int best = 0;
        for (int c = 1; c < m.cfg.classes; ++c)
            if (out.logits.at(0, c) > out.logits.at(0, best)) best = c;
        hits += (best == d.labels[i]);
    }
    return d.size() ? double(hits) / double(d.size()) : 0.0;
}

inline double dataset_accuracy(const CompactModel& m, const Dataset& d) {
    long hits = 0;
    for (size_t i = 0; i < d.size(); ++i) hits += (m.predict(d.tokens[i]) == d.labels[i]);
    return d.size() ? double(hits) / double(d.size()) : 0.0;
}

// Plain cross-entropy training of the dense model (the teacher-to-be).
// Embeddings train here and are frozen afterwards.
inline MaskableEncoder train_teacher(const TrainingConfig& cfg, const TaskData& data,
                                     double* dev_accuracy = nullptr,
                                     std::vector<StepMetrics>* history = nullptr) {
    cfg.validate();
    Rng init_rng(mix_seed(cfg.seed, 0x7EAC4E8ULL));
    MaskableEncoder model = MaskableEncoder::init(cfg.model, init_rng);
    MaskValues open = MaskSet::all_ones(cfg.model.layers, cfg.model.heads, cfg.model.ffn_dim,
                                        cfg.model.hidden);
    Adam opt;
    opt.add_group("weights", model.parameters(true), cfg.lr_teacher);
    Batcher batcher{data.train.size(), cfg.batch_size};

    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs_teacher; ++epoch) {
        const auto order = batcher.order_for(cfg.seed, 0, epoch);
        for (long b : order) {
            const auto [lo, hi] = batcher.range(b);
            std::vector<Tensor> rows;
            std::vector<int> labels;
            for (size_t i = lo; i < hi; ++i) {
                rows.push_back(encoder_forward(model, data.train.tokens[i], open).logits);
                labels.push_back(data.train.labels[i]);
            }
            Tensor loss = cross_entropy(concat(rows, 0), labels);
            if (!std::isfinite(loss.item()))
                throw NumericError("teacher training: non-finite loss at step " + std::to_string(step));
            backward(loss);
            opt.clip_global_norm(cfg.clip_norm);
            opt.step();
            opt.zero_grad();
            if (history) {
                StepMetrics m;
                m.step = step;
                m.phase = 0;
                m.loss = loss.item();
                m.ce_loss = loss.item();
                history->push_back(m);
            }
            ++step;
        }
    }
    if (dev_accuracy) *dev_accuracy = dataset_accuracy(model, open, data.dev);
    return model;
}

struct PipelineResult {
    RunReport report;
    PrunedStructure structure;
    CompactModel compact;
    CompactModel masked_dense;
    MaskableEncoder model;  // final weights (masked form)
    MaskSet masks;
    LayerTransform transform;
};

class PruningRun {
  public:
    static constexpr int kPrewarm = 1;
    static constexpr int kPrune = 2;
    static constexpr int kFinetune = 3;
    static constexpr int kDone = 4;

    PruningRun(TrainingConfig cfg, const TaskData& data, const MaskableEncoder& teacher)
        : cfg_(std::move(cfg)), data_(data) {
        cfg_.validate();
        if (teacher.cfg.layers != cfg_.model.layers || teacher.cfg.hidden != cfg_.model.hidden)
            throw UsageError("teacher and run configs disagree on model dimensions");
        teacher_ = TeacherSnapshot::freeze(teacher, cfg_.effective_teacher_layers());
        teacher_cache_.resize(size_t(Batcher{data_.train.size(), cfg_.batch_size}.batches()));

        student_ = teacher.clone();
        for (auto& t : {student_.tok_emb, student_.pos_emb}) t.node()->requires_grad = false;
        Rng mask_rng(mix_seed(cfg_.seed, 0x3A5C99ULL));
        masks_ = MaskSet::init(cfg_.model.layers, cfg_.model.heads, cfg_.model.ffn_dim, cfg_.model.hidden,
                               cfg_.gates, mask_rng, cfg_.layer_masks);
        transform_ = LayerTransform::identity(cfg_.model.hidden);
        lagr_.lambda1 = Tensor::scalar(0.0f, true);
        lagr_.lambda2 = Tensor::scalar(0.0f, true);

        opt_main_.add_group("weights", student_.parameters(false), cfg_.lr_weights);
        opt_main_.add_group("masks", masks_.trainables(), cfg_.lr_masks);
        opt_main_.add_group("transform", {transform_.w}, cfg_.lr_weights);
        opt_main_.add_group("multipliers", {lagr_.lambda1, lagr_.lambda2}, cfg_.lr_multipliers,
                            /*maximize=*/true);

        batcher_ = Batcher{data_.train.size(), cfg_.batch_size};
        open_masks_ = MaskSet::all_ones(cfg_.model.layers, cfg_.model.heads, cfg_.model.ffn_dim,
                                        cfg_.model.hidden);
        const long spe = batcher_.batches();
        schedule_.start_step = spe * cfg_.epochs_prewarm;
        schedule_.warmup_steps = spe * cfg_.sparsity_warmup_epochs;
        schedule_.final_target = cfg_.target_sparsity;
    }

    const TrainingConfig& config() const { return cfg_; }
    const std::vector<StepMetrics>& history() const { return history_; }
    int phase() const { return phase_; }
    long global_step() const { return global_step_; }
    const PrunedStructure& structure() const { return structure_; }
    MaskSet& masks() { return masks_; }
    LagrangianState& lagrangian() { return lagr_; }

    long phase_steps(int phase) const {
        const long spe = batcher_.batches();
        switch (phase) {
            case kPrewarm: return spe * cfg_.epochs_prewarm;
            case kPrune: return spe * cfg_.epochs_prune;
            case kFinetune: return spe * cfg_.epochs_finetune;
            default: return 0;
        }
    }

    // One training step; advances phases. Returns false once the run is done.
    bool step_once(const std::string& state_dir = "") {
        while (phase_ != kDone && step_in_phase_ >= phase_steps(phase_)) advance_phase();
        if (phase_ == kDone) return false;
        StepMetrics m = train_step(phase_);
        const bool last_of_phase = step_in_phase_ + 1 >= phase_steps(phase_);
        if (phase_ != kPrewarm &&
            (cfg_.eval_every_steps > 0 && (step_in_phase_ % cfg_.eval_every_steps == 0 || last_of_phase)))
            run_eval(m);
        history_.push_back(m);
        ++step_in_phase_;
        ++global_step_;
        if (cfg_.checkpoint_every_steps > 0 && !state_dir.empty() &&
            global_step_ % cfg_.checkpoint_every_steps == 0)
            save_state(state_dir + "/runstate.ckpt");
        while (phase_ != kDone && step_in_phase_ >= phase_steps(phase_)) advance_phase();
        return phase_ != kDone;
    }

    void run(const std::string& state_dir = "") {
        while (step_once(state_dir)) {
        }
    }

    PipelineResult finish() {
        while (phase_ != kDone) {
            if (!step_once() && phase_ != kDone) break;
        }
        PipelineResult out;
        out.structure = structure_;
        out.model = student_.clone();
        out.masks = masks_;
        out.transform = transform_;
        out.compact = extract(student_, structure_);
        out.masked_dense = zero_fill(student_, structure_);

        // The artifact's equivalence theorem, checked on a fresh probe batch.
        MaskValues zb = masks_from_snapshot(structure_masks(structure_, cfg_.model));
        Rng prng(mix_seed(cfg_.seed, 0xE0C4ULL));
        std::uniform_int_distribution<int> tok(0, cfg_.model.vocab - 1);
        double worst = 0.0;
        {
            NoGradGuard ng;
            for (int rep = 0; rep < 16; ++rep) {
                std::vector<int> seq(cfg_.task.seq_len);
                for (auto& t : seq) t = tok(prng);
                const auto compact_logits = out.compact.forward(seq);
                const auto filled_logits = out.masked_dense.forward(seq);
                EncoderOutput ref = encoder_forward(student_, seq, zb);
                for (int c = 0; c < cfg_.model.classes; ++c) {
                    worst = std::max(worst, std::fabs(double(compact_logits[c]) - ref.logits.at(0, c)));
                    worst = std::max(worst, std::fabs(double(filled_logits[c]) - ref.logits.at(0, c)));
                }
            }
        }
        if (worst > 1e-5)
            throw EquivalenceError("pipeline: compact/masked logits differ by " + std::to_string(worst));

        RunReport& r = out.report;
        r.config_echo = training_config_json(cfg_);
        r.curve = history_;
        r.teacher_accuracy = dataset_accuracy(extract(teacher_.model, PrunedStructure::identity(cfg_.model)),
                                              data_.dev);
        r.final_accuracy = dataset_accuracy(out.compact, data_.dev);
        r.majority_accuracy = majority_baseline(data_.dev);
        r.dense_params = cfg_.model.full_size();
        r.pruned_params = structure_.retained_params(cfg_.model);
        r.target_sparsity = cfg_.target_sparsity;
        r.achieved_sparsity = 1.0 - double(r.pruned_params) / double(r.dense_params);
        r.missed_target = std::fabs(r.achieved_sparsity - cfg_.target_sparsity) > 0.05;
        r.degenerate = structure_.degenerate();
        r.equivalence_max_abs = worst;
        for (int i = 0; i < cfg_.model.layers; ++i) {
            r.heads_per_layer.push_back(int(structure_.kept_heads[i].size()));
            r.int_dims_per_layer.push_back(int(structure_.kept_int[i].size()));
        }
        r.pattern = layer_pattern(structure_);
        r.structure = structure_.to_json();
        return out;
    }

    // ------------------------------------------------------------------
    // Run-state serialization (bit-exact resume)
    // ------------------------------------------------------------------

    void save_state(const std::string& path) const {
        Checkpoint ck;
        ck.header["kind"] = "runstate";
        nlohmann::json meta;
        meta["config_kv"] = serialize_training_config(cfg_);
        meta["phase"] = phase_;
        meta["step_in_phase"] = step_in_phase_;
        meta["global_step"] = global_step_;
        meta["has_best"] = has_best_;
        meta["best_accuracy"] = best_acc_;
        meta["has_closest"] = has_closest_;
        meta["closest_gap"] = closest_gap_;
        meta["adam_main_steps"] = opt_main_.step_count();
        meta["adam_ft_steps"] = opt_ft_ ? opt_ft_->step_count() : 0;
        meta["structure_ready"] = structure_ready_;
        if (structure_ready_) meta["structure"] = structure_.to_json();
        nlohmann::json hist = nlohmann::json::array();
        for (const auto& m : history_) hist.push_back(m.to_json());
        meta["history"] = hist;
        ck.header["meta"] = meta;
        ck.header["config"] = model_config_json(cfg_.model);

        push_encoder(ck, "student.", student_);
        push_encoder(ck, "teacher.", teacher_.model);
        push_masks(ck, "mask.", masks_);
        detail::push_tensor(ck, "w_layer", transform_.w);
        detail::push_tensor(ck, "lambda1", lagr_.lambda1);
        detail::push_tensor(ck, "lambda2", lagr_.lambda2);
        if (has_best_) {
            push_encoder(ck, "best.student.", best_student_);
            push_masks(ck, "best.mask.", best_masks_);
            detail::push_tensor(ck, "best.w_layer", best_transform_.w);
        }
        if (has_closest_) {
            push_encoder(ck, "closest.student.", closest_student_);
            push_masks(ck, "closest.mask.", closest_masks_);
            detail::push_tensor(ck, "closest.w_layer", closest_transform_.w);
        }
        push_adam(ck, "adam_main.", opt_main_);
        if (opt_ft_) push_adam(ck, "adam_ft.", *opt_ft_);
        save_checkpoint(ck, path);
    }

    static PruningRun resume(const std::string& path) {
        Checkpoint ck = load_checkpoint(path);
        if (ck.header.value("kind", "") != "runstate")
            throw UsageError("'" + path + "' is not a run-state checkpoint");
        const nlohmann::json& meta = ck.header.at("meta");
        std::istringstream cfg_stream(meta.at("config_kv").get<std::string>());
        TrainingConfig cfg = training_config_from_kv(parse_key_values(cfg_stream));
        TaskData data = generate_task(cfg.task);
        MaskableEncoder teacher = pull_encoder(ck, "teacher.", cfg.model);

        PruningRun run(cfg, std::move(data), teacher);
        run.student_ = pull_encoder(ck, "student.", cfg.model);
        for (auto& t : {run.student_.tok_emb, run.student_.pos_emb}) t.node()->requires_grad = false;
        run.masks_ = pull_masks(ck, "mask.", cfg);
        run.transform_.w = detail::pull_tensor(ck, "w_layer", true);
        run.lagr_.lambda1 = detail::pull_tensor(ck, "lambda1", true);
        run.lagr_.lambda2 = detail::pull_tensor(ck, "lambda2", true);

        run.phase_ = meta.at("phase");
        run.step_in_phase_ = meta.at("step_in_phase");
        run.global_step_ = meta.at("global_step");
        run.has_best_ = meta.at("has_best");
        run.best_acc_ = meta.at("best_accuracy");
        run.structure_ready_ = meta.at("structure_ready");
        if (run.structure_ready_) {
            run.structure_ = PrunedStructure::from_json(meta.at("structure"));
            run.fixed_masks_ = masks_from_snapshot(structure_masks(run.structure_, cfg.model));
        }
        for (const auto& h : meta.at("history")) run.history_.push_back(StepMetrics::from_json(h));
        if (run.has_best_) {
            run.best_student_ = pull_encoder(ck, "best.student.", cfg.model);
            run.best_masks_ = pull_masks(ck, "best.mask.", cfg);
            run.best_transform_.w = detail::pull_tensor(ck, "best.w_layer", true);
        }
        run.has_closest_ = meta.value("has_closest", false);
        run.closest_gap_ = meta.value("closest_gap", 1.0);
        if (run.has_closest_) {
            run.closest_student_ = pull_encoder(ck, "closest.student.", cfg.model);
            run.closest_masks_ = pull_masks(ck, "closest.mask.", cfg);
            run.closest_transform_.w = detail::pull_tensor(ck, "closest.w_layer", true);
        }

        run.opt_main_ = Adam();
        run.opt_main_.add_group("weights", run.student_.parameters(false), cfg.lr_weights);
        run.opt_main_.add_group("masks", run.masks_.trainables(), cfg.lr_masks);
        run.opt_main_.add_group("transform", {run.transform_.w}, cfg.lr_weights);
        run.opt_main_.add_group("multipliers", {run.lagr_.lambda1, run.lagr_.lambda2}, cfg.lr_multipliers,
                                true);
        run.opt_main_.set_step_count(meta.at("adam_main_steps"));
        pull_adam(ck, "adam_main.", run.opt_main_);
        if (run.phase_ >= kFinetune && run.structure_ready_) {
            run.make_finetune_optimizer();
            run.opt_ft_->set_step_count(meta.at("adam_ft_steps"));
            pull_adam(ck, "adam_ft.", *run.opt_ft_);
        }
        return run;
    }

  private:
    struct TeacherBatch {
        Tensor logits;
        std::vector<Tensor> hidden;
    };

    void advance_phase() {
        step_in_phase_ = 0;
        if (phase_ == kPrewarm) {
            phase_ = kPrune;
        } else if (phase_ == kPrune) {
            choose_structure();
            phase_ = kFinetune;
            make_finetune_optimizer();
        } else if (phase_ == kFinetune) {
            if (!structure_ready_) choose_structure();  // zero finetune epochs
            phase_ = kDone;
        }
    }

    void make_finetune_optimizer() {
        opt_ft_.emplace();
        opt_ft_->add_group("weights", student_.parameters(false), cfg_.lr_finetune);
        opt_ft_->add_group("transform", {transform_.w}, cfg_.lr_finetune);
    }

    // Prefers the best-accuracy state whose binarized sparsity sat inside the
    // +-0.02 band; with no such state, falls back to the state that came
    // closest to the target (the final state is always a candidate).
    void choose_structure() {
        if (structure_ready_) return;
        if (!has_best_ && has_closest_) {
            MaskSnapshot det = snapshot(masks_.deterministic());
            PrunedStructure final_structure = binarize(det, cfg_.model, cfg_.target_sparsity);
            const double final_gap =
                std::fabs(1.0 - double(final_structure.retained_params(cfg_.model)) /
                                    double(cfg_.model.full_size()) -
                          cfg_.target_sparsity);
            if (closest_gap_ < final_gap) {
                best_student_ = closest_student_;
                best_masks_ = closest_masks_;
                best_transform_ = closest_transform_;
                has_best_ = true;
            }
        }
        if (has_best_) {
            student_ = best_student_.clone();
            for (auto& t : {student_.tok_emb, student_.pos_emb}) t.node()->requires_grad = false;
            masks_ = clone_masks(best_masks_);
            transform_.w = Tensor::from(best_transform_.w.shape(), best_transform_.w.values(), true);
        }
        MaskSnapshot det = snapshot(masks_.deterministic());
        structure_ = binarize(det, cfg_.model, cfg_.target_sparsity);
        structure_ready_ = true;
        fixed_masks_ = masks_from_snapshot(structure_masks(structure_, cfg_.model));
    }

    const TeacherBatch& teacher_batch(long batch_id) {
        auto& slot = teacher_cache_[size_t(batch_id)];
        if (!slot) {
            const auto [lo, hi] = batcher_.range(batch_id);
            std::vector<std::span<const int>> spans;
            for (size_t i = lo; i < hi; ++i) spans.emplace_back(data_.train.tokens[i]);
            TeacherSnapshot::BatchStates st = teacher_.run(spans);
            slot = TeacherBatch{st.logits, std::move(st.hidden)};
        }
        return *slot;
    }

    StepMetrics train_step(int phase) {
        const long spe = batcher_.batches();
        const long epoch = step_in_phase_ / spe;
        const auto order = batcher_.order_for(cfg_.seed, phase, epoch);
        const long batch_id = order[size_t(step_in_phase_ % spe)];
        const auto [lo, hi] = batcher_.range(batch_id);

        MaskValues z;
        if (phase == kPrewarm) {
            z = open_masks_;
        } else if (phase == kPrune) {
            Rng grng(mix_seed(cfg_.seed ^ 0x6A7E5ULL, std::uint64_t(global_step_)));
            z = masks_.sample(grng);
        } else {
            z = fixed_masks_;
        }

        std::vector<Tensor> logit_rows;
        std::vector<std::vector<Tensor>> hid(cfg_.model.layers);
        std::vector<int> labels;
        for (size_t i = lo; i < hi; ++i) {
            EncoderOutput out = encoder_forward(student_, data_.train.tokens[i], z);
            logit_rows.push_back(out.logits);
            for (int l = 0; l < cfg_.model.layers; ++l) hid[l].push_back(out.hidden[l]);
            labels.push_back(data_.train.labels[i]);
        }
        Tensor logits = concat(logit_rows, 0);

        StepMetrics m;
        m.step = global_step_;
        m.phase = phase;

        Tensor data_loss;
        if (cfg_.distill_mode == DistillMode::none) {
            data_loss = cross_entropy(logits, labels);
            m.ce_loss = data_loss.item();
        } else {
            const TeacherBatch& tb = teacher_batch(batch_id);
            Tensor l_pred = prediction_loss(logits, tb.logits, cfg_.temperature);
            Tensor l_layer = Tensor::scalar(0.0f);
            if (cfg_.distill_mode == DistillMode::full) {
                std::vector<Tensor> transformed;
                for (int l = 0; l < cfg_.model.layers; ++l)
                    transformed.push_back(matmul(concat(hid[l], 0), transform_.w));
                const std::vector<float>& zffn = z.z_ffn.values();
                const auto tset = teacher_.layer_set;
                LayerMap map = cfg_.fixed_match
                                   ? fixed_layer_map(tset, zffn)
                                   : match_layers_transformed(transformed, tb.hidden, tset, zffn,
                                                              cfg_.monotonic_match);
                l_layer = layer_loss(map, transformed, tb.hidden);
            }
            data_loss = combined_loss(l_pred, l_layer, cfg_.distill_lambda);
            m.pred_loss = l_pred.item();
            m.layer_loss = l_layer.item();
        }

        m.target_retained = 1.0 - schedule_.target_at(global_step_);
        Tensor total = data_loss;
        if (phase == kPrune) {
            Tensor s_hat = retained_fraction(z, cfg_.model.accounting());
            lagr_.target_retained = m.target_retained;
            Tensor penalty = lagrangian_penalty(s_hat, lagr_);
            total = add(total, penalty);
            m.s_hat = s_hat.item();
            m.lagrangian = penalty.item();
        }
        m.lambda1 = lagr_.lambda1.item();
        m.lambda2 = lagr_.lambda2.item();
        m.loss = total.item();
        if (!std::isfinite(m.loss))
            throw NumericError("non-finite loss at step " + std::to_string(global_step_) +
                               " (s_hat=" + std::to_string(m.s_hat) +
                               ", lambda1=" + std::to_string(m.lambda1) +
                               ", lambda2=" + std::to_string(m.lambda2) + ")");

        backward(total);
        Adam& opt = (phase == kFinetune) ? *opt_ft_ : opt_main_;
        opt.clip_global_norm(cfg_.clip_norm);
        opt.step();
        opt.zero_grad();
        return m;
    }

    void run_eval(StepMetrics& m) {
        if (phase_ == kPrune) {
            MaskSnapshot det = snapshot(masks_.deterministic());
            PrunedStructure s = binarize(det, cfg_.model, cfg_.target_sparsity);
            const double sparsity = 1.0 - double(s.retained_params(cfg_.model)) / double(cfg_.model.full_size());
            MaskValues zb = masks_from_snapshot(structure_masks(s, cfg_.model));
            const double acc = dataset_accuracy(student_, zb, data_.dev);
            m.eval_accuracy = acc;
            m.eval_sparsity = sparsity;
            // Even after the schedule plateaus the gates keep moving; remember
            // the best on-target structure seen and fall back to it.
            const bool plateaued = schedule_.target_at(global_step_) >= cfg_.target_sparsity;
            const double gap = std::fabs(sparsity - cfg_.target_sparsity);
            if (plateaued && gap <= 0.02 && acc > best_acc_) {
                best_acc_ = acc;
                has_best_ = true;
                best_student_ = student_.clone();
                best_masks_ = clone_masks(masks_);
                best_transform_.w = Tensor::from(transform_.w.shape(), transform_.w.values(), true);
            }
            if (plateaued && (!has_closest_ || gap < closest_gap_)) {
                closest_gap_ = gap;
                has_closest_ = true;
                closest_student_ = student_.clone();
                closest_masks_ = clone_masks(masks_);
                closest_transform_.w = Tensor::from(transform_.w.shape(), transform_.w.values(), true);
            }
        } else if (phase_ == kFinetune) {
            m.eval_accuracy = dataset_accuracy(student_, fixed_masks_, data_.dev);
            m.eval_sparsity =
                1.0 - double(structure_.retained_params(cfg_.model)) / double(cfg_.model.full_size());
        }
    }

    static MaskSet clone_masks(const MaskSet& m) {
        MaskSet out;
        out.gate = m.gate;
        out.layer_masks_enabled = m.layer_masks_enabled;
        auto copy = [](const Tensor& t) { return Tensor::from(t.shape(), t.values(), t.requires_grad()); };
        out.la_mha = copy(m.la_mha);
        out.la_ffn = copy(m.la_ffn);
        for (const auto& t : m.la_head) out.la_head.push_back(copy(t));
        for (const auto& t : m.la_int) out.la_int.push_back(copy(t));
        out.la_hidn = copy(m.la_hidn);
        return out;
    }

    static void push_encoder(Checkpoint& ck, const std::string& prefix, const MaskableEncoder& m) {
        Checkpoint tmp = make_dense_checkpoint(m);
        for (auto& t : tmp.tensors) ck.tensors.push_back({prefix + t.name, t.shape, std::move(t.data)});
    }

    static MaskableEncoder pull_encoder(const Checkpoint& ck, const std::string& prefix,
                                        const ModelConfig& cfg) {
        Checkpoint view;
        view.header["kind"] = "dense";
        view.header["config"] = model_config_json(cfg);
        for (const auto& t : ck.tensors)
            if (t.name.rfind(prefix, 0) == 0)
                view.tensors.push_back({t.name.substr(prefix.size()), t.shape, t.data});
        return dense_from_checkpoint(view).model;
    }

    void push_masks(Checkpoint& ck, const std::string& prefix, const MaskSet& m) const {
        detail::push_tensor(ck, prefix + "la_mha", m.la_mha);
        detail::push_tensor(ck, prefix + "la_ffn", m.la_ffn);
        for (size_t i = 0; i < m.la_head.size(); ++i)
            detail::push_tensor(ck, prefix + "la_head" + std::to_string(i), m.la_head[i]);
        for (size_t i = 0; i < m.la_int.size(); ++i)
            detail::push_tensor(ck, prefix + "la_int" + std::to_string(i), m.la_int[i]);
        detail::push_tensor(ck, prefix + "la_hidn", m.la_hidn);
    }

    static MaskSet pull_masks(const Checkpoint& ck, const std::string& prefix, const TrainingConfig& cfg) {
        MaskSet m;
        m.gate = cfg.gates;
        m.layer_masks_enabled = cfg.layer_masks;
        m.la_mha = detail::pull_tensor(ck, prefix + "la_mha", true);
        m.la_ffn = detail::pull_tensor(ck, prefix + "la_ffn", true);
        for (int i = 0; i < cfg.model.layers; ++i) {
            m.la_head.push_back(detail::pull_tensor(ck, prefix + "la_head" + std::to_string(i), true));
            m.la_int.push_back(detail::pull_tensor(ck, prefix + "la_int" + std::to_string(i), true));
        }
        m.la_hidn = detail::pull_tensor(ck, prefix + "la_hidn", true);
        return m;
    }

    static void push_adam(Checkpoint& ck, const std::string& prefix, const Adam& opt) {
        const auto& groups = opt.groups();
        for (size_t g = 0; g < groups.size(); ++g)
            for (size_t p = 0; p < groups[g].params.size(); ++p) {
                const auto& shape = groups[g].params[p].shape();
                const std::string base = prefix + std::to_string(g) + "." + std::to_string(p);
                ck.tensors.push_back({base + ".m", shape, groups[g].m[p]});
                ck.tensors.push_back({base + ".v", shape, groups[g].v[p]});
            }
    }

    static void pull_adam(const Checkpoint& ck, const std::string& prefix, Adam& opt) {
        auto& groups = opt.groups();
        for (size_t g = 0; g < groups.size(); ++g)
            for (size_t p = 0; p < groups[g].params.size(); ++p) {
                const std::string base = prefix + std::to_string(g) + "." + std::to_string(p);
                groups[g].m[p] = ck.get(base + ".m").data;
                groups[g].v[p] = ck.get(base + ".v").data;
            }
    }

    TrainingConfig cfg_;
    TaskData data_;
    TeacherSnapshot teacher_;
    std::vector<std::optional<TeacherBatch>> teacher_cache_;
    MaskableEncoder student_;
    MaskSet masks_;
    LayerTransform transform_;
    LagrangianState lagr_;
    Adam opt_main_;
    std::optional<Adam> opt_ft_;
    Batcher batcher_;
    MaskValues open_masks_;
    MaskValues fixed_masks_;
    SparsitySchedule schedule_;
    std::vector<StepMetrics> history_;
    int phase_ = kPrewarm;
    long step_in_phase_ = 0;
    long global_step_ = 0;
    bool has_best_ = false;
    double best_acc_ = -1.0;
    MaskableEncoder best_student_;
    MaskSet best_masks_;
    LayerTransform best_transform_;
    bool has_closest_ = false;
    double closest_gap_ = 1.0;
    MaskableEncoder closest_student_;
    MaskSet closest_masks_;
    LayerTransform closest_transform_;
    PrunedStructure structure_;
    bool structure_ready_ = false;
};

inline PipelineResult run_pipeline(const TrainingConfig& cfg, const TaskData& data,
                                   const MaskableEncoder& teacher, const std::string& state_dir = "") {
    PruningRun run(cfg, data, teacher);
    run.run(state_dir);
    return run.finish();
}

}  // namespace prunekit
