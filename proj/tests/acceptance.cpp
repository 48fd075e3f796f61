// Acceptance suite: one pass/fail line per criterion, exit 0 only when all
// pass. Heavier criteria share trained artifacts (one task, one teacher).
//
// Run a subset with e.g. `acceptance 1 2 9`.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "prunekit/bench.hpp"
#include "prunekit/compile.hpp"
#include "prunekit/config.hpp"
#include "prunekit/distill.hpp"
#include "prunekit/gates.hpp"
#include "prunekit/grad_check.hpp"
#include "prunekit/model.hpp"
#include "prunekit/report.hpp"
#include "prunekit/task.hpp"
#include "prunekit/trainer.hpp"

using namespace prunekit;

namespace {

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) {
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

ModelConfig grad_config() {
    ModelConfig c;
    c.layers = 2;
    c.hidden = 8;
    c.heads = 2;
    c.head_dim = 4;
    c.ffn_dim = 16;
    c.vocab = 12;
    c.max_seq = 8;
    c.classes = 3;
    return c;
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness
// ---------------------------------------------------------------------------

double primitive_check(PrimitiveKind kind, std::uint64_t seed) {
    Rng rng(seed);
    ForwardAttrs attrs;
    attrs.a = 0.7;
    attrs.b = -0.2;
    attrs.lo = -0.5;
    attrs.hi = 0.5;
    attrs.temperature = 2.0;
    attrs.axis = 0;
    attrs.begin = 1;
    attrs.end = 3;
    std::vector<Tensor> inputs;
    switch (kind) {
        case PrimitiveKind::matmul:
            inputs = {randn({3, 4}, rng, 0, 1, true), randn({4, 2}, rng, 0, 1, true)};
            break;
        case PrimitiveKind::add:
        case PrimitiveKind::mul:
        case PrimitiveKind::mse:
        case PrimitiveKind::kl_temperature:
            inputs = {randn({3, 4}, rng, 0, 1, true), randn({3, 4}, rng, 0, 1, true)};
            break;
        case PrimitiveKind::row_scale:
            inputs = {randn({3, 4}, rng, 0, 1, true), randn({3}, rng, 0, 1, true)};
            break;
        case PrimitiveKind::col_scale:
            inputs = {randn({3, 4}, rng, 0, 1, true), randn({4}, rng, 0, 1, true)};
            break;
        case PrimitiveKind::layer_norm:
            inputs = {randn({3, 5}, rng, 0, 1, true), randn({5}, rng, 1.0, 0.2, true),
                      randn({5}, rng, 0, 0.2, true)};
            break;
        case PrimitiveKind::clamp: {
            Tensor t = randn({3, 4}, rng, 0, 1, true);
            for (long i = 0; i < t.numel(); ++i) {
                float& v = t.mutable_data()[i];
                if (std::fabs(std::fabs(v) - 0.5f) < 0.05f) v += 0.2f;
            }
            inputs = {t};
            break;
        }
        case PrimitiveKind::log:
            inputs = {randn({3, 4}, rng, 2.0, 0.3, true)};
            break;
        case PrimitiveKind::concat:
            inputs = {randn({2, 3}, rng, 0, 1, true), randn({4, 3}, rng, 0, 1, true)};
            break;
        default:
            inputs = {randn({3, 4}, rng, 0, 1, true)};
            break;
    }
    auto f = [&]() {
        Tensor out = forward(kind, inputs, attrs);
        return out.is_scalar() ? out : sum(mul(out, out));
    };
    return grad_check(f, inputs, 0.001953125);
}

Outcome criterion_gradients() {
    const auto t0 = clock_type::now();
    const PrimitiveKind kinds[] = {
        PrimitiveKind::matmul,     PrimitiveKind::add,        PrimitiveKind::mul,
        PrimitiveKind::row_scale,  PrimitiveKind::col_scale,  PrimitiveKind::gelu,
        PrimitiveKind::softmax,    PrimitiveKind::layer_norm, PrimitiveKind::mse,
        PrimitiveKind::kl_temperature, PrimitiveKind::sigmoid, PrimitiveKind::log,
        PrimitiveKind::clamp,      PrimitiveKind::affine,     PrimitiveKind::sum,
        PrimitiveKind::transpose,  PrimitiveKind::slice,      PrimitiveKind::concat,
    };
    double worst_primitive = 0.0;
    for (PrimitiveKind kind : kinds)
        for (std::uint64_t s = 1; s <= 10; ++s)
            worst_primitive = std::max(worst_primitive, primitive_check(kind, s * 7919));

    // Full objective: masked encoder + distillation + Lagrangian penalty, with
    // gates sampled from log_alpha under frozen noise.
    ModelConfig cfg = grad_config();
    Rng rng(2029);
    MaskableEncoder student = MaskableEncoder::init(cfg, rng);
    MaskableEncoder teacher_model = MaskableEncoder::init(cfg, rng);
    TeacherSnapshot teacher = TeacherSnapshot::freeze(teacher_model, {0, 1});

    GateConfig gc;
    auto gate_leaf = [&](int n) {
        std::uniform_real_distribution<double> uni(-0.3, 0.3);
        std::vector<float> v(n);
        for (auto& x : v) x = float(uni(rng));
        return Tensor::from({n}, v, true);
    };
    auto frozen_noise = [&](int n) {
        std::uniform_real_distribution<double> uni(0.4, 0.6);
        std::vector<float> v(n);
        for (auto& x : v) x = float(uni(rng));
        return v;
    };
    Tensor la_mha = gate_leaf(cfg.layers), la_ffn = gate_leaf(cfg.layers), la_hidn = gate_leaf(cfg.hidden);
    std::vector<Tensor> la_head, la_int;
    for (int i = 0; i < cfg.layers; ++i) {
        la_head.push_back(gate_leaf(cfg.heads));
        la_int.push_back(gate_leaf(cfg.ffn_dim));
    }
    const auto u_mha = frozen_noise(cfg.layers), u_ffn = frozen_noise(cfg.layers),
               u_hidn = frozen_noise(cfg.hidden);
    std::vector<std::vector<float>> u_head, u_int;
    for (int i = 0; i < cfg.layers; ++i) {
        u_head.push_back(frozen_noise(cfg.heads));
        u_int.push_back(frozen_noise(cfg.ffn_dim));
    }
    LayerTransform transform = LayerTransform::identity(cfg.hidden);
    Tensor lambda1 = Tensor::scalar(0.3f, true), lambda2 = Tensor::scalar(0.2f, true);

    const std::vector<std::vector<int>> batch = {{1, 3, 5, 7, 9, 11}, {2, 4, 6, 8, 10, 0}};
    std::vector<std::span<const int>> spans(batch.begin(), batch.end());
    TeacherSnapshot::BatchStates tb = teacher.run(spans);

    auto sample_all = [&]() {
        MaskValues z;
        z.z_mha = sample_gates(la_mha, u_mha, gc);
        z.z_ffn = sample_gates(la_ffn, u_ffn, gc);
        for (int i = 0; i < cfg.layers; ++i) {
            z.z_head.push_back(sample_gates(la_head[i], u_head[i], gc));
            z.z_int.push_back(sample_gates(la_int[i], u_int[i], gc));
        }
        z.z_hidn = sample_gates(la_hidn, u_hidn, gc);
        return z;
    };

    // The layer map is a discrete per-step choice; freeze it so the checked
    // objective is smooth.
    LayerMap map;
    {
        MaskValues z0 = sample_all();
        std::vector<Tensor> transformed;
        {
            NoGradGuard ng;
            std::vector<std::vector<Tensor>> per_layer(cfg.layers);
            for (const auto& seq : batch) {
                EncoderOutput out = encoder_forward(student, seq, z0);
                for (int l = 0; l < cfg.layers; ++l) per_layer[l].push_back(out.hidden[l]);
            }
            for (int l = 0; l < cfg.layers; ++l)
                transformed.push_back(matmul(concat(per_layer[l], 0), transform.w));
        }
        map = match_layers_transformed(transformed, tb.hidden, teacher.layer_set, z0.z_ffn.values(),
                                       false);
    }

    LagrangianState lagr;
    lagr.lambda1 = lambda1;
    lagr.lambda2 = lambda2;
    lagr.target_retained = 0.7;

    auto f = [&]() {
        MaskValues z = sample_all();
        std::vector<Tensor> rows;
        std::vector<std::vector<Tensor>> per_layer(cfg.layers);
        for (const auto& seq : batch) {
            EncoderOutput out = encoder_forward(student, seq, z);
            rows.push_back(out.logits);
            for (int l = 0; l < cfg.layers; ++l) per_layer[l].push_back(out.hidden[l]);
        }
        Tensor logits = concat(rows, 0);
        Tensor l_pred = prediction_loss(logits, tb.logits, 2.0);
        std::vector<Tensor> transformed;
        for (int l = 0; l < cfg.layers; ++l)
            transformed.push_back(matmul(concat(per_layer[l], 0), transform.w));
        Tensor l_layer = layer_loss(map, transformed, tb.hidden);
        Tensor s_hat = retained_fraction(z, cfg.accounting());
        return add(combined_loss(l_pred, l_layer, 0.5), lagrangian_penalty(s_hat, lagr));
    };

    std::vector<Tensor> params = student.parameters();
    params.push_back(la_mha);
    params.push_back(la_ffn);
    for (auto& t : la_head) params.push_back(t);
    for (auto& t : la_int) params.push_back(t);
    params.push_back(la_hidn);
    params.push_back(transform.w);
    params.push_back(lambda1);
    params.push_back(lambda2);
    const double full_err = grad_check(f, params, 0.00048828125);

    const double elapsed = seconds_since(t0);
    std::ostringstream os;
    os << "primitives max rel err " << worst_primitive << ", full objective " << full_err << " (limit 1e-3), "
       << elapsed << "s (limit 60s)";
    return {worst_primitive < 1e-3 && full_err < 1e-3 && elapsed < 60.0, os.str()};
}

// ---------------------------------------------------------------------------
// 2. Sparsity-formula oracle
// ---------------------------------------------------------------------------

double enumerate_retained(const MaskSnapshot& m, const ModelConfig& cfg) {
    double acc = 0.0;
    for (int i = 0; i < cfg.layers; ++i) {
        for (int h = 0; h < cfg.heads; ++h)
            for (int k = 0; k < cfg.hidden; ++k) {
                const double w = double(m.mha[i]) * m.head[i][h] * m.hidn[k];
                for (int p = 0; p < 4 * cfg.head_dim; ++p) acc += w;
            }
        for (int j = 0; j < cfg.ffn_dim; ++j)
            for (int k = 0; k < cfg.hidden; ++k) acc += 2.0 * double(m.ffn[i]) * m.intd[i][j] * m.hidn[k];
    }
    return acc / double(cfg.full_size());
}

Outcome criterion_sparsity_oracle() {
    ModelConfig cfg = grad_config();
    Rng rng(515151);
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        MaskSnapshot m;
        auto draw = [&](size_t n) {
            std::vector<float> v(n);
            for (auto& x : v) x = float(rng() & 1u);
            return v;
        };
        m.mha = draw(cfg.layers);
        m.ffn = draw(cfg.layers);
        for (int i = 0; i < cfg.layers; ++i) {
            m.head.push_back(draw(cfg.heads));
            m.intd.push_back(draw(cfg.ffn_dim));
        }
        m.hidn = draw(cfg.hidden);

        MaskValues z;
        z.z_mha = Tensor::from({cfg.layers}, m.mha);
        z.z_ffn = Tensor::from({cfg.layers}, m.ffn);
        for (int i = 0; i < cfg.layers; ++i) {
            z.z_head.push_back(Tensor::from({cfg.heads}, m.head[i]));
            z.z_int.push_back(Tensor::from({cfg.ffn_dim}, m.intd[i]));
        }
        z.z_hidn = Tensor::from({cfg.hidden}, m.hidn);

        const double oracle = enumerate_retained(m, cfg);
        const double got = retained_fraction(z, cfg.accounting()).item();
        worst = std::max(worst, std::fabs(got - oracle) / std::max(1.0, std::fabs(oracle)));
    }

    ModelConfig bert;
    bert.layers = 12;
    bert.hidden = 768;
    bert.heads = 12;
    bert.head_dim = 64;
    bert.ffn_dim = 3072;
    bert.vocab = 30522;
    bert.max_seq = 512;
    const long m_bert = count_params(bert).headline();

    std::ostringstream os;
    os << "100 binary configs, worst rel diff " << worst << " (limit 1e-9); BERT-base dims M = " << m_bert
       << " (want 84934656)";
    return {worst <= 1e-9 && m_bert == 84934656L, os.str()};
}

// ---------------------------------------------------------------------------
// 3. Hard concrete distribution
// ---------------------------------------------------------------------------

Outcome criterion_hard_concrete() {
    GateConfig gc;
    Rng rng_small(2024), rng_big(77);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    auto draw_u = [&uni](Rng& r) {
        double u = uni(r);
        while (u <= 0.0 || u >= 1.0) u = uni(r);
        return u;
    };

    const long n_small = 100000;
    long zeros = 0, ones = 0;
    double sum = 0.0, sumsq = 0.0;
    for (long i = 0; i < n_small; ++i) {
        const double z = sample_gate_value(0.0, draw_u(rng_small), gc);
        zeros += (z == 0.0);
        ones += (z == 1.0);
        sum += z;
        sumsq += z * z;
    }
    const double mean_small = sum / n_small;
    const double var_small = sumsq / n_small - mean_small * mean_small;

    const long n_big = 10000000;
    double sum_big = 0.0, sumsq_big = 0.0;
    for (long i = 0; i < n_big; ++i) {
        const double z = sample_gate_value(0.0, draw_u(rng_big), gc);
        sum_big += z;
        sumsq_big += z * z;
    }
    const double mean_big = sum_big / n_big;
    const double var_big = sumsq_big / n_big - mean_big * mean_big;
    const double se = std::sqrt(var_small / n_small + var_big / n_big);
    const double gap = std::fabs(mean_small - mean_big);

    std::ostringstream os;
    os << "P(z=0) = " << double(zeros) / n_small << ", P(z=1) = " << double(ones) / n_small
       << ", |mean gap| = " << gap << " vs 3se = " << 3.0 * se;
    return {zeros > 0 && ones > 0 && gap <= 3.0 * se, os.str()};
}

// ---------------------------------------------------------------------------
// 4. Compaction equivalence
// ---------------------------------------------------------------------------

Outcome criterion_equivalence() {
    ModelConfig cfg;  // default toy config
    Rng rng(8080);
    MaskableEncoder model = MaskableEncoder::init(cfg, rng);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::uniform_int_distribution<int> tok(0, cfg.vocab - 1);

    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        MaskSnapshot m;
        auto draw = [&](size_t n) {
            std::vector<float> v(n);
            for (auto& x : v) x = float(uni(rng));
            return v;
        };
        m.mha = draw(cfg.layers);
        m.ffn = draw(cfg.layers);
        for (int i = 0; i < cfg.layers; ++i) {
            m.head.push_back(draw(cfg.heads));
            m.intd.push_back(draw(cfg.ffn_dim));
        }
        m.hidn = draw(cfg.hidden);
        PrunedStructure s = binarize(m, cfg, 0.5);
        CompactModel compact = extract(model, s);
        MaskValues z = masks_from_snapshot(structure_masks(s, cfg));
        NoGradGuard ng;
        for (int probe = 0; probe < 3; ++probe) {
            std::vector<int> seq(cfg.max_seq);
            for (auto& t : seq) t = tok(rng);
            const auto got = compact.forward(seq);
            EncoderOutput ref = encoder_forward(model, seq, z);
            for (int c = 0; c < cfg.classes; ++c)
                worst = std::max(worst, std::fabs(double(got[c]) - double(ref.logits.at(0, c))));
        }
    }
    std::ostringstream os;
    os << "100 random binarized structures, max |logit gap| = " << worst << " (limit 1e-5)";
    return {worst < 1e-5, os.str()};
}

// ---------------------------------------------------------------------------
// 9. Dynamic matching oracle
// ---------------------------------------------------------------------------

Outcome criterion_matching_oracle() {
    Rng rng(606060);
    const int rows = 3, d = 6;
    long mismatches = 0;
    for (int rep = 0; rep < 1000; ++rep) {
        const int n_student = 3 + int(rng() % 6);
        const int n_teacher = 1 + int(rng() % 4);
        // Quantized states force exact MSE ties often enough to exercise the
        // tie-break rule.
        auto quantized = [&]() {
            std::vector<float> v(size_t(rows) * d);
            for (auto& x : v) x = float(int(rng() % 5)) * 0.25f;
            return Tensor::from({rows, d}, v);
        };
        std::vector<Tensor> h_s, h_t;
        for (int j = 0; j < n_student; ++j) {
            if (j > 0 && (rng() % 3) == 0)
                h_s.push_back(Tensor::from({rows, d}, h_s[rng() % j].values()));  // exact duplicate
            else
                h_s.push_back(quantized());
        }
        for (int i = 0; i < n_teacher; ++i) h_t.push_back(quantized());
        std::vector<float> z_ffn(n_student, 1.0f);
        for (auto& z : z_ffn)
            if ((rng() % 4) == 0) z = 0.0f;
        std::vector<int> tset(n_teacher);
        for (int i = 0; i < n_teacher; ++i) tset[i] = i;

        LayerMap got = match_layers_transformed(h_s, h_t, tset, z_ffn, false);
        for (int i = 0; i < n_teacher; ++i) {
            int best = -1;
            double best_val = std::numeric_limits<double>::infinity();
            for (int j = 0; j < n_student; ++j) {
                if (!(z_ffn[j] > 0.0f)) continue;
                double acc = 0.0;
                for (long k = 0; k < h_s[j].numel(); ++k) {
                    const double dlt = double(h_s[j].data()[k]) - double(h_t[i].data()[k]);
                    acc += dlt * dlt;
                }
                acc /= double(h_s[j].numel());
                if (acc < best_val) {  // strict: first minimum wins = lower index
                    best_val = acc;
                    best = j;
                }
            }
            mismatches += (got.student_for_teacher[i] != best);
        }
    }
    std::ostringstream os;
    os << "1000 random MSE matrices, " << mismatches << " disagreements with exhaustive argmin";
    return {mismatches == 0, os.str()};
}

// ---------------------------------------------------------------------------
// Pipelines (5, 6, 7, 8, 10)
// ---------------------------------------------------------------------------

struct PipelineArtifacts {
    TrainingConfig cfg;
    TaskData data;
    MaskableEncoder teacher;
    double teacher_acc = 0.0;
    double teacher_seconds = 0.0;
};

TrainingConfig main_config() {
    TrainingConfig cfg;
    cfg.task.train_size = 4096;
    cfg.task.dev_size = 512;
    cfg.task.seed = 1;
    cfg.seed = 42;
    // Extended plateau relative to the default schedule: the multipliers need
    // the extra post-warmup steps to pin the binarized sparsity to the band.
    cfg.epochs_prune = 6;
    cfg.eval_every_steps = 32;
    return cfg;
}

PipelineArtifacts& shared_artifacts() {
    static PipelineArtifacts art = [] {
        PipelineArtifacts a;
        a.cfg = main_config();
        a.data = generate_task(a.cfg.task);
        const auto t0 = clock_type::now();
        a.teacher = train_teacher(a.cfg, a.data, &a.teacher_acc);
        a.teacher_seconds = seconds_since(t0);
        std::printf("  [setup] dense teacher: dev acc %.4f in %.0fs (learnability gate > 0.95)\n",
                    a.teacher_acc, a.teacher_seconds);
        std::fflush(stdout);
        return a;
    }();
    return art;
}

struct RunOutcome {
    PipelineResult result;
    double seconds = 0.0;
};

RunOutcome run_target(double target, bool layer_masks, DistillMode mode = DistillMode::full) {
    PipelineArtifacts& art = shared_artifacts();
    TrainingConfig cfg = art.cfg;
    cfg.target_sparsity = target;
    cfg.layer_masks = layer_masks;
    cfg.distill_mode = mode;
    const auto t0 = clock_type::now();
    RunOutcome out{run_pipeline(cfg, art.data, art.teacher), 0.0};
    out.seconds = seconds_since(t0);
    return out;
}

RunOutcome& run_060() {
    static RunOutcome r = run_target(0.60, true);
    return r;
}
RunOutcome& run_095() {
    static RunOutcome r = run_target(0.95, true);
    return r;
}
RunOutcome& run_dense_ref() {
    static RunOutcome r = run_target(0.0, true);
    return r;
}
RunOutcome& run_095_nolayer() {
    static RunOutcome r = run_target(0.95, false);
    return r;
}

Outcome criterion_constraint() {
    RunOutcome& a = run_060();
    RunOutcome& b = run_095();
    const double gap60 = std::fabs(a.result.report.achieved_sparsity - 0.60);
    const double gap95 = std::fabs(b.result.report.achieved_sparsity - 0.95);

    // Post-warmup, the binarized sparsity must trend toward the target: the
    // later evals' mean gap may not exceed max(earlier mean, 0.05).
    auto trend_ok = [](const RunOutcome& r, double target) {
        std::vector<double> gaps;
        for (const auto& m : r.result.report.curve)
            if (m.phase == 2 && m.eval_sparsity >= 0.0 && m.target_retained <= 1.0 - target + 1e-9)
                gaps.push_back(std::fabs(m.eval_sparsity - target));
        if (gaps.size() < 2) return true;
        const size_t half = gaps.size() / 2;
        double early = 0.0, late = 0.0;
        for (size_t i = 0; i < half; ++i) early += gaps[i];
        for (size_t i = half; i < gaps.size(); ++i) late += gaps[i];
        early /= double(half);
        late /= double(gaps.size() - half);
        return late <= std::max(early, 0.05);
    };
    const bool trends = trend_ok(a, 0.60) && trend_ok(b, 0.95);

    std::ostringstream os;
    os << "achieved " << a.result.report.achieved_sparsity << " @0.60 (" << a.seconds << "s), "
       << b.result.report.achieved_sparsity << " @0.95 (" << b.seconds
       << "s); limits +-0.02, 900s; post-warmup trend ok = " << (trends ? "yes" : "no");
    return {gap60 <= 0.02 && gap95 <= 0.02 && a.seconds < 900.0 && b.seconds < 900.0 && trends, os.str()};
}

Outcome criterion_accuracy_retention() {
    PipelineArtifacts& art = shared_artifacts();
    RunOutcome& pruned60 = run_060();
    RunOutcome& pruned95 = run_095();
    RunOutcome& dense = run_dense_ref();
    const double acc60 = pruned60.result.report.final_accuracy;
    const double acc95 = pruned95.result.report.final_accuracy;
    const double acc_dense = dense.result.report.final_accuracy;
    const double baseline = majority_baseline(art.data.dev);
    std::ostringstream os;
    os << "teacher " << art.teacher_acc << " (learnability gate > 0.95); acc@0.60 = " << acc60
       << " vs dense distill " << acc_dense << " (within 2 points); acc@0.95 = " << acc95
       << " vs majority " << baseline;
    return {art.teacher_acc > 0.95 && acc60 >= acc_dense - 0.02 && acc95 > baseline, os.str()};
}

Outcome criterion_layer_mask_ablation() {
    RunOutcome& full = run_095();
    RunOutcome& nolayer = run_095_nolayer();
    BenchSpec spec;
    spec.batch = 16;
    spec.warmup_iters = 10;
    spec.measured_iters = 120;
    LatencyResult lat_full = bench(full.result.masked_dense, full.result.compact, spec);
    LatencyResult lat_nolayer = bench(nolayer.result.masked_dense, nolayer.result.compact, spec);
    const double sp_full = full.result.report.achieved_sparsity;
    const double sp_nolayer = nolayer.result.report.achieved_sparsity;
    const double param_gap = std::fabs(sp_full - sp_nolayer);
    std::ostringstream os;
    os << "speedup full CoFi " << lat_full.speedup << "x (pattern " << full.result.report.pattern
       << ") vs -layer " << lat_nolayer.speedup << "x (pattern " << nolayer.result.report.pattern
       << "); sparsity gap " << param_gap << " (limit 0.05)";
    return {lat_nolayer.speedup < lat_full.speedup && param_gap <= 0.05, os.str()};
}

Outcome criterion_distillation_ablation() {
    TrainingConfig base;
    base.task.train_size = 2048;
    base.task.dev_size = 512;
    base.task.seed = 3;
    base.target_sparsity = 0.95;
    base.epochs_teacher = 8;
    base.epochs_prewarm = 1;
    base.epochs_prune = 4;
    base.epochs_finetune = 2;
    base.sparsity_warmup_epochs = 2;
    base.eval_every_steps = 32;

    const std::uint64_t seeds[] = {11, 22, 33};
    double mean_full = 0.0, mean_pred = 0.0, mean_none = 0.0;
    std::ostringstream runs;
    for (std::uint64_t seed : seeds) {
        TrainingConfig cfg = base;
        cfg.seed = seed;
        TaskData data = generate_task(cfg.task);
        MaskableEncoder teacher = train_teacher(cfg, data);
        for (DistillMode mode : {DistillMode::full, DistillMode::pred_only, DistillMode::none}) {
            TrainingConfig run_cfg = cfg;
            run_cfg.distill_mode = mode;
            PipelineResult res = run_pipeline(run_cfg, data, teacher);
            const double acc = res.report.final_accuracy;
            runs << " [seed " << seed << " " << to_string(mode) << " " << acc << "]";
            if (mode == DistillMode::full) mean_full += acc;
            if (mode == DistillMode::pred_only) mean_pred += acc;
            if (mode == DistillMode::none) mean_none += acc;
        }
        std::printf("  [8] seed %llu done\n", (unsigned long long)seed);
        std::fflush(stdout);
    }
    mean_full /= 3.0;
    mean_pred /= 3.0;
    mean_none /= 3.0;
    std::ostringstream os;
    os << "mean acc over 3 seeds: full " << mean_full << " >= pred-only " << mean_pred << " >= none "
       << mean_none << ", full-none gap " << (mean_full - mean_none) << " (need >= 0.005);" << runs.str();
    return {mean_full >= mean_pred && mean_pred >= mean_none && (mean_full - mean_none) >= 0.005, os.str()};
}

Outcome criterion_determinism() {
    TrainingConfig cfg;
    cfg.task.train_size = 256;
    cfg.task.dev_size = 128;
    cfg.task.seed = 7;
    cfg.seed = 99;
    cfg.epochs_teacher = 1;
    cfg.epochs_prewarm = 1;
    cfg.epochs_prune = 2;
    cfg.epochs_finetune = 1;
    cfg.sparsity_warmup_epochs = 1;
    cfg.target_sparsity = 0.7;
    cfg.eval_every_steps = 4;
    TaskData data = generate_task(cfg.task);
    MaskableEncoder teacher = train_teacher(cfg, data);
    PipelineResult a = run_pipeline(cfg, data, teacher);
    PipelineResult b = run_pipeline(cfg, data, teacher);
    const std::string ja = a.report.to_json().dump(2);
    const std::string jb = b.report.to_json().dump(2);
    std::ostringstream os;
    os << "two runs, report bytes " << ja.size() << " vs " << jb.size() << ", identical = "
       << (ja == jb ? "yes" : "no");
    return {ja == jb, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    struct Entry {
        int id;
        const char* name;
        std::function<Outcome()> run;
    };
    const std::vector<Entry> criteria = {
        {1, "gradient-correctness", criterion_gradients},
        {2, "sparsity-formula-oracle", criterion_sparsity_oracle},
        {3, "hard-concrete-distribution", criterion_hard_concrete},
        {4, "compaction-equivalence", criterion_equivalence},
        {5, "constraint-satisfaction", criterion_constraint},
        {6, "accuracy-retention-direction", criterion_accuracy_retention},
        {7, "layer-mask-ablation-direction", criterion_layer_mask_ablation},
        {8, "distillation-ablation-direction", criterion_distillation_ablation},
        {9, "dynamic-matching-oracle", criterion_matching_oracle},
        {10, "determinism", criterion_determinism},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && !only.count(c.id)) continue;
        const auto t0 = clock_type::now();
        Outcome out;
        try {
            out = c.run();
        } catch (const std::exception& e) {
            out = {false, std::string("exception: ") + e.what()};
        }
        const double secs = seconds_since(t0);
        std::printf("[%s] %2d. %s: %s (%.1fs)\n", out.pass ? "PASS" : "FAIL", c.id, c.name,
                    out.detail.c_str(), secs);
        std::fflush(stdout);
        failures += !out.pass;
    }
    if (failures) std::printf("%d criterion(s) failed\n", failures);
    return failures == 0 ? 0 : 1;
}
