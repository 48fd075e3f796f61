#pragma once

// Teacher-to-student transfer: prediction-layer KL, dynamically matched
// layerwise MSE through a learned transform, and the blended objective.

#include <chrono>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "prunekit/model.hpp"
#include "prunekit/tensor.hpp"

namespace prunekit {

struct LayerTransform {
    Tensor w;  // d x d, starts as the identity

    static LayerTransform identity(int d) {
        std::vector<float> data(static_cast<size_t>(d) * d, 0.0f);
        for (int i = 0; i < d; ++i) data[size_t(i) * d + i] = 1.0f;
        LayerTransform t;
        t.w = Tensor::from({d, d}, std::move(data), true);
        return t;
    }
};

// KL(p_s || p_t) on temperature-softened distributions, scaled by T^2.
inline Tensor prediction_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
    return kl_temperature(student_logits, teacher_logits, temperature);
}

// m(i) per teacher layer in `teacher_set` order: the index of the matched
// student layer, or -1 when unmatched.
struct LayerMap {
    std::vector<int> teacher_set;
    std::vector<int> student_for_teacher;

    int matched_count() const {
        int n = 0;
        for (int s : student_for_teacher) n += (s >= 0);
        return n;
    }
};

// Batch-mean MSE between two stacked states (values only, no tape).
inline double state_mse(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    const long n = a.numel();
    for (long i = 0; i < n; ++i) {
        const double d = double(a.data()[i]) - b.data()[i];
        acc += d * d;
    }
    return acc / n;
}

// Core matcher over already-transformed student states. For each teacher layer
// (processed from the highest down when monotonic), picks the student layer
// with z_FFN > 0 minimizing the MSE; ties break to the lower student index.
// Monotonic mode additionally requires strictly decreasing student indices.
inline LayerMap match_layers_transformed(const std::vector<Tensor>& transformed_student,
                                         const std::vector<Tensor>& teacher_states,
                                         std::span<const int> teacher_set,
                                         std::span<const float> z_ffn, bool monotonic) {
    const int n_student = static_cast<int>(transformed_student.size());
    LayerMap map;
    map.teacher_set.assign(teacher_set.begin(), teacher_set.end());
    map.student_for_teacher.assign(teacher_set.size(), -1);

    std::vector<int> order(teacher_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    if (monotonic) {
        std::sort(order.begin(), order.end(),
                  [&](int a, int b) { return teacher_set[a] > teacher_set[b]; });
    }

    int bound = n_student;  // matched index must be < bound in monotonic mode
    for (int oi : order) {
        const Tensor& target = teacher_states[oi];
        int best = -1;
        double best_mse = std::numeric_limits<double>::infinity();
        const int limit = monotonic ? bound : n_student;
        for (int j = 0; j < limit; ++j) {
            if (!(z_ffn[j] > 0.0f)) continue;
            const double d = state_mse(transformed_student[j], target);
            if (d < best_mse) {
                best_mse = d;
                best = j;
            }
        }
        map.student_for_teacher[oi] = best;
        if (monotonic && best >= 0) bound = best;
    }
    return map;
}

// Spec-shaped entry point: applies the transform, then matches.
inline LayerMap match_layers(const std::vector<Tensor>& student_states,
                             const std::vector<Tensor>& teacher_states, const LayerTransform& transform,
                             std::span<const int> teacher_set, std::span<const float> z_ffn,
                             bool monotonic) {
    std::vector<Tensor> transformed;
    transformed.reserve(student_states.size());
    {
        NoGradGuard ng;
        for (const auto& h : student_states) transformed.push_back(matmul(h, transform.w));
    }
    return match_layers_transformed(transformed, teacher_states, teacher_set, z_ffn, monotonic);
}

// Fixed alternative for the ablation: teacher layer i maps to student layer i
// when that layer's FFN gate is alive, otherwise the pair is skipped.
inline LayerMap fixed_layer_map(std::span<const int> teacher_set, std::span<const float> z_ffn) {
    LayerMap map;
    map.teacher_set.assign(teacher_set.begin(), teacher_set.end());
    for (int t : teacher_set) {
        const bool alive = t < static_cast<int>(z_ffn.size()) && z_ffn[t] > 0.0f;
        map.student_for_teacher.push_back(alive ? t : -1);
    }
    return map;
}

// L_layer = sum_{i in T, matched} MSE(W_layer H_s^{m(i)}, H_t^i).
// `transformed_student` must come from the same tape as the training step so
// gradients reach W_layer and the student. Unmatched teacher layers add 0.
inline Tensor layer_loss(const LayerMap& map, const std::vector<Tensor>& transformed_student,
                         const std::vector<Tensor>& teacher_states) {
    Tensor acc = Tensor::scalar(0.0f);
    for (size_t i = 0; i < map.student_for_teacher.size(); ++i) {
        const int j = map.student_for_teacher[i];
        if (j < 0) continue;
        acc = add(acc, mse(transformed_student[j], teacher_states[i]));
    }
    return acc;
}

inline Tensor combined_loss(const Tensor& l_pred, const Tensor& l_layer, double lambda) {
    if (lambda < 0.0 || lambda > 1.0)
        throw UsageError("combined_loss: lambda must lie in [0,1], got " + std::to_string(lambda));
    return add(affine(l_pred, lambda, 0.0), affine(l_layer, 1.0 - lambda, 0.0));
}

// Frozen teacher plus the teacher-layer set used for distillation.
struct TeacherSnapshot {
    MaskableEncoder model;
    std::vector<int> layer_set;  // 0-based block indices
    MaskValues open_masks;

    struct BatchStates {
        Tensor logits;               // batch x classes (constant)
        std::vector<Tensor> hidden;  // per teacher-set layer: (batch*seq) x d (constant)
    };

    static TeacherSnapshot freeze(const MaskableEncoder& trained, std::vector<int> layer_set) {
        TeacherSnapshot t;
        t.model = trained.clone();
        for (auto& p : t.model.parameters()) p.node()->requires_grad = false;
        if (layer_set.empty())
            for (int i = 0; i < trained.cfg.layers; ++i) layer_set.push_back(i);
        for (int l : layer_set)
            if (l < 0 || l >= trained.cfg.layers)
                throw UsageError("teacher layer index " + std::to_string(l) + " out of range");
        t.layer_set = std::move(layer_set);
        t.open_masks = MaskSet::all_ones(trained.cfg.layers, trained.cfg.heads, trained.cfg.ffn_dim,
                                         trained.cfg.hidden);
        return t;
    }

    BatchStates run(const std::vector<std::span<const int>>& batch) const {
        NoGradGuard ng;
        std::vector<Tensor> logit_rows;
        std::vector<std::vector<Tensor>> hidden_rows(layer_set.size());
        for (const auto& seq : batch) {
            EncoderOutput out = encoder_forward(model, seq, open_masks);
            logit_rows.push_back(out.logits);
            for (size_t k = 0; k < layer_set.size(); ++k)
                hidden_rows[k].push_back(out.hidden[layer_set[k]]);
        }
        BatchStates s;
        s.logits = concat(logit_rows, 0);
        for (auto& rows : hidden_rows) s.hidden.push_back(concat(rows, 0));
        return s;
    }
};

}  // namespace prunekit
