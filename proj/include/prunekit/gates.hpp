#pragma once

// Hard concrete gates: stretched, clamped sigmoid transforms of logistic noise
// with point masses at 0 and 1, plus the differentiable retained-fraction
// accounting and the Lagrangian constraint penalty.

#include <cmath>
#include <vector>

#include "prunekit/common.hpp"
#include "prunekit/tensor.hpp"

namespace prunekit {

struct GateConfig {
    double beta = 2.0 / 3.0;   // sigmoid steepness
    double stretch_lo = -0.1;  // l < 0
    double stretch_hi = 1.1;   // r > 1
    double init_mean = 2.0;    // log_alpha init: gates start near-open
    double init_std = 0.01;

    void validate() const {
        if (!(stretch_lo < 0.0 && 1.0 < stretch_hi))
            throw UsageError("gate config requires l < 0 < 1 < r");
        if (!(beta > 0.0)) throw UsageError("gate config requires beta > 0");
    }
};

// z = clamp(sigmoid((log(u/(1-u)) + log_alpha)/beta) * (r-l) + l, 0, 1)
// One u draw per gate; every step of the transform is a tape primitive so the
// gradient reaches log_alpha wherever the clamp is inactive.
inline Tensor sample_gates(const Tensor& log_alpha, const std::vector<float>& u, const GateConfig& cfg) {
    cfg.validate();
    if (static_cast<long>(u.size()) != log_alpha.numel())
        throw ShapeError("sample_gates: noise length " + std::to_string(u.size()) +
                         " does not match gates " + shape_str(log_alpha.shape()));
    std::vector<float> logits(u.size());
    for (size_t i = 0; i < u.size(); ++i) {
        if (!(u[i] > 0.0f && u[i] < 1.0f))
            throw NumericError("sample_gates: noise draw must lie strictly inside (0,1), got " +
                               std::to_string(u[i]));
        logits[i] = static_cast<float>(std::log(double(u[i]) / (1.0 - double(u[i]))));
    }
    Tensor noise = Tensor::from(log_alpha.shape(), std::move(logits));
    Tensor s = sigmoid(affine(add(log_alpha, noise), 1.0 / cfg.beta, 0.0));
    return clamp(affine(s, cfg.stretch_hi - cfg.stretch_lo, cfg.stretch_lo), 0.0, 1.0);
}

// Noise-free gate value used at eval time (before thresholding):
// z = clamp(sigmoid(log_alpha) * (r-l) + l, 0, 1).
inline Tensor deterministic_gates(const Tensor& log_alpha, const GateConfig& cfg) {
    cfg.validate();
    Tensor s = sigmoid(log_alpha);
    return clamp(affine(s, cfg.stretch_hi - cfg.stretch_lo, cfg.stretch_lo), 0.0, 1.0);
}

inline double deterministic_gate_value(double log_alpha, const GateConfig& cfg) {
    const double s = 1.0 / (1.0 + std::exp(-log_alpha));
    const double z = s * (cfg.stretch_hi - cfg.stretch_lo) + cfg.stretch_lo;
    return std::min(1.0, std::max(0.0, z));
}

inline double sample_gate_value(double log_alpha, double u, const GateConfig& cfg) {
    if (!(u > 0.0 && u < 1.0)) throw NumericError("sample_gate: u must lie strictly inside (0,1)");
    const double s = 1.0 / (1.0 + std::exp(-(std::log(u / (1.0 - u)) + log_alpha) / cfg.beta));
    const double z = s * (cfg.stretch_hi - cfg.stretch_lo) + cfg.stretch_lo;
    return std::min(1.0, std::max(0.0, z));
}

// The five mask families applied to one encoder draw. Tensors are tape nodes;
// during pruning they are functions of the learnable log_alphas.
struct MaskValues {
    Tensor z_mha;                 // {L}
    Tensor z_ffn;                 // {L}
    std::vector<Tensor> z_head;   // L entries of {N_h}
    std::vector<Tensor> z_int;    // L entries of {d_f}
    Tensor z_hidn;                // {d}, shared across layers
};

// Plain-value snapshot of MaskValues, convenient for binarization and oracles.
struct MaskSnapshot {
    std::vector<float> mha, ffn;
    std::vector<std::vector<float>> head, intd;
    std::vector<float> hidn;
};

inline MaskSnapshot snapshot(const MaskValues& m) {
    MaskSnapshot s;
    s.mha = m.z_mha.values();
    s.ffn = m.z_ffn.values();
    for (const auto& t : m.z_head) s.head.push_back(t.values());
    for (const auto& t : m.z_int) s.intd.push_back(t.values());
    s.hidn = m.z_hidn.values();
    return s;
}

// Learnable gate parameters (log_alpha per gate) for the five families.
// When layer gates are disabled (the "-layer" ablation) z_MHA/z_FFN are pinned
// to 1 and excluded from the trainable set.
struct MaskSet {
    GateConfig gate;
    bool layer_masks_enabled = true;
    Tensor la_mha, la_ffn, la_hidn;
    std::vector<Tensor> la_head, la_int;

    static MaskSet init(int layers, int heads, int ffn_dim, int hidden, const GateConfig& cfg, Rng& rng,
                        bool layer_masks = true) {
        cfg.validate();
        MaskSet m;
        m.gate = cfg;
        m.layer_masks_enabled = layer_masks;
        m.la_mha = randn({layers}, rng, cfg.init_mean, cfg.init_std, true);
        m.la_ffn = randn({layers}, rng, cfg.init_mean, cfg.init_std, true);
        for (int i = 0; i < layers; ++i) {
            m.la_head.push_back(randn({heads}, rng, cfg.init_mean, cfg.init_std, true));
            m.la_int.push_back(randn({ffn_dim}, rng, cfg.init_mean, cfg.init_std, true));
        }
        m.la_hidn = randn({hidden}, rng, cfg.init_mean, cfg.init_std, true);
        return m;
    }

    std::vector<Tensor> trainables() const {
        std::vector<Tensor> ps;
        if (layer_masks_enabled) {
            ps.push_back(la_mha);
            ps.push_back(la_ffn);
        }
        for (const auto& t : la_head) ps.push_back(t);
        for (const auto& t : la_int) ps.push_back(t);
        ps.push_back(la_hidn);
        return ps;
    }

    // Draw order is fixed (mha, ffn, head by layer, int by layer, hidn) so a
    // seeded stream is replayable.
    MaskValues sample(Rng& rng) const {
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        auto draw = [&](long n) {
            std::vector<float> u(static_cast<size_t>(n));
            for (auto& v : u) {
                double x;
                do {
                    x = uni(rng);
                } while (x <= 0.0 || x >= 1.0);
                v = static_cast<float>(x);
            }
            return u;
        };
        MaskValues z;
        if (layer_masks_enabled) {
            z.z_mha = sample_gates(la_mha, draw(la_mha.numel()), gate);
            z.z_ffn = sample_gates(la_ffn, draw(la_ffn.numel()), gate);
        } else {
            z.z_mha = Tensor::full(la_mha.shape(), 1.0f);
            z.z_ffn = Tensor::full(la_ffn.shape(), 1.0f);
        }
        for (const auto& t : la_head) z.z_head.push_back(sample_gates(t, draw(t.numel()), gate));
        for (const auto& t : la_int) z.z_int.push_back(sample_gates(t, draw(t.numel()), gate));
        z.z_hidn = sample_gates(la_hidn, draw(la_hidn.numel()), gate);
        return z;
    }

    MaskValues deterministic() const {
        MaskValues z;
        if (layer_masks_enabled) {
            z.z_mha = deterministic_gates(la_mha, gate);
            z.z_ffn = deterministic_gates(la_ffn, gate);
        } else {
            z.z_mha = Tensor::full(la_mha.shape(), 1.0f);
            z.z_ffn = Tensor::full(la_ffn.shape(), 1.0f);
        }
        for (const auto& t : la_head) z.z_head.push_back(deterministic_gates(t, gate));
        for (const auto& t : la_int) z.z_int.push_back(deterministic_gates(t, gate));
        z.z_hidn = deterministic_gates(la_hidn, gate);
        return z;
    }

    static MaskValues all_ones(int layers, int heads, int ffn_dim, int hidden) {
        MaskValues z;
        z.z_mha = Tensor::full({layers}, 1.0f);
        z.z_ffn = Tensor::full({layers}, 1.0f);
        for (int i = 0; i < layers; ++i) {
            z.z_head.push_back(Tensor::full({heads}, 1.0f));
            z.z_int.push_back(Tensor::full({ffn_dim}, 1.0f));
        }
        z.z_hidn = Tensor::full({hidden}, 1.0f);
        return z;
    }
};

// Dimension bundle for the retained-fraction accounting. M excludes
// embeddings, layer norms and the classifier.
struct SparsityAccounting {
    int layers, heads, head_dim, ffn_dim, hidden;
    long full_size() const {
        const long d = hidden;
        return 4L * d * d * layers + 2L * d * ffn_dim * layers;
    }
};

// s_hat = (4 d_h / M) sum_i z_MHA_i (sum_j z_head_ij)(sum_k z_hidn_k)
//       + (2 / M)     sum_i z_FFN_i (sum_j z_int_ij)(sum_k z_hidn_k)
// computed via the factored sums; differentiable in every gate.
inline Tensor retained_fraction(const MaskValues& m, const SparsityAccounting& acct) {
    if (m.z_mha.numel() != acct.layers || m.z_ffn.numel() != acct.layers ||
        static_cast<int>(m.z_head.size()) != acct.layers || static_cast<int>(m.z_int.size()) != acct.layers ||
        m.z_hidn.numel() != acct.hidden)
        throw ShapeError("retained_fraction: mask layout does not match accounting dimensions");
    for (int i = 0; i < acct.layers; ++i) {
        if (m.z_head[i].numel() != acct.heads || m.z_int[i].numel() != acct.ffn_dim)
            throw ShapeError("retained_fraction: per-layer mask size mismatch at layer " + std::to_string(i));
    }
    Tensor hidn_sum = sum(m.z_hidn);
    Tensor mha_acc, ffn_acc;
    for (int i = 0; i < acct.layers; ++i) {
        Tensor h = mul(slice(m.z_mha, 0, i, i + 1), sum(m.z_head[i]));
        Tensor f = mul(slice(m.z_ffn, 0, i, i + 1), sum(m.z_int[i]));
        mha_acc = i == 0 ? h : add(mha_acc, h);
        ffn_acc = i == 0 ? f : add(ffn_acc, f);
    }
    const double m_full = static_cast<double>(acct.full_size());
    Tensor mha_term = affine(mul(mha_acc, hidn_sum), 4.0 * acct.head_dim / m_full, 0.0);
    Tensor ffn_term = affine(mul(ffn_acc, hidn_sum), 2.0 / m_full, 0.0);
    return add(mha_term, ffn_term);
}

// Plain-value twin of retained_fraction for reporting paths that do not need
// a tape.
inline double retained_fraction_value(const MaskSnapshot& m, const SparsityAccounting& acct) {
    double hidn = 0.0;
    for (float v : m.hidn) hidn += v;
    double mha = 0.0, ffn = 0.0;
    for (int i = 0; i < acct.layers; ++i) {
        double hs = 0.0, is = 0.0;
        for (float v : m.head[i]) hs += v;
        for (float v : m.intd[i]) is += v;
        mha += double(m.mha[i]) * hs;
        ffn += double(m.ffn[i]) * is;
    }
    const double m_full = static_cast<double>(acct.full_size());
    return (4.0 * acct.head_dim * mha * hidn + 2.0 * ffn * hidn) / m_full;
}

// Multipliers of the constraint penalty; updated by gradient ascent.
struct LagrangianState {
    Tensor lambda1 = Tensor::scalar(0.0f, true);
    Tensor lambda2 = Tensor::scalar(0.0f, true);
    double target_retained = 1.0;  // t, the scheduled retained fraction
};

// L_c = lambda1 * (s_hat - t) + lambda2 * (s_hat - t)^2
inline Tensor lagrangian_penalty(const Tensor& s_hat, const LagrangianState& st) {
    Tensor gap = affine(s_hat, 1.0, -st.target_retained);
    return add(mul(st.lambda1, gap), mul(st.lambda2, mul(gap, gap)));
}

}  // namespace prunekit
