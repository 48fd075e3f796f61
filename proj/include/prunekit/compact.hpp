#pragma once

// Physically compacted encoder: pruned heads, intermediate dims, hidden dims
// and layers are deleted and the surviving gate values are folded into the
// weights, so inference needs no mask machinery.
//
// Layer norms of dropped sublayers are kept (the residual stream still passes
// through them), and every layer norm normalizes with the ORIGINAL hidden
// width in the denominator, treating deleted dims as zeros. That makes the
// compact forward bit-for-bit faithful to the masked dense model up to
// accumulation order.

#include <Eigen/Core>

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "prunekit/common.hpp"

namespace prunekit {

struct Mat {
    int rows = 0, cols = 0;
    std::vector<float> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0f) {}
    float& at(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
    float at(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }
    long numel() const { return static_cast<long>(a.size()); }
};

namespace detail {

using CRowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CRowMatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline CRowMatD to_d(const Mat& m) {
    return Eigen::Map<const CRowMatF>(m.a.data(), m.rows, m.cols).cast<double>();
}

}  // namespace detail

struct CompactHeadSet {
    std::vector<Mat> wq, wk, wv;  // d_kept x d_h
    std::vector<Mat> wo;          // d_h x d_kept
};

struct CompactBlock {
    bool has_mha = false;
    bool has_ffn = false;
    CompactHeadSet heads;
    Mat wu, wd;
    std::vector<float> ln1_g, ln1_b, ln2_g, ln2_b;
};

struct CompactModel {
    int d_orig = 0;  // layer-norm denominator (original hidden width)
    int d_kept = 0;
    int head_dim = 0;
    int classes = 0;
    int vocab = 0;
    int max_seq = 0;
    Mat tok_emb, pos_emb, classifier;
    std::vector<float> emb_ln_g, emb_ln_b;
    std::vector<CompactBlock> blocks;

    // Normalizes each row as if the pruned dims were still present as zeros.
    void layer_norm_rows(detail::CRowMatD& x, const std::vector<float>& g, const std::vector<float>& b) const {
        const double eps = 1e-5;
        const double denom = static_cast<double>(d_orig);
        const double n_pruned = static_cast<double>(d_orig - d_kept);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            double mean = x.row(i).sum() / denom;
            double var = 0.0;
            for (Eigen::Index j = 0; j < x.cols(); ++j) {
                const double d = x(i, j) - mean;
                var += d * d;
            }
            var = (var + n_pruned * mean * mean) / denom;
            const double inv = 1.0 / std::sqrt(var + eps);
            for (Eigen::Index j = 0; j < x.cols(); ++j)
                x(i, j) = double(g[j]) * ((x(i, j) - mean) * inv) + double(b[j]);
        }
    }

    std::vector<float> forward(std::span<const int> tokens) const {
        if (tokens.empty()) throw UsageError("compact forward: empty sequence");
        if (static_cast<int>(tokens.size()) > max_seq)
            throw UsageError("compact forward: sequence longer than max_seq");
        const int seq = static_cast<int>(tokens.size());
        detail::CRowMatD x(seq, d_kept);
        for (int i = 0; i < seq; ++i) {
            const int t = tokens[i];
            if (t < 0 || t >= vocab) throw UsageError("compact forward: token id out of range");
            for (int j = 0; j < d_kept; ++j)
                x(i, j) = double(tok_emb.at(t, j)) + double(pos_emb.at(i, j));
        }
        layer_norm_rows(x, emb_ln_g, emb_ln_b);

        for (const auto& blk : blocks) {
            if (blk.has_mha) {
                detail::CRowMatD acc = detail::CRowMatD::Zero(seq, d_kept);
                for (size_t h = 0; h < blk.heads.wq.size(); ++h) {
                    detail::CRowMatD q = x * detail::to_d(blk.heads.wq[h]);
                    detail::CRowMatD k = x * detail::to_d(blk.heads.wk[h]);
                    detail::CRowMatD v = x * detail::to_d(blk.heads.wv[h]);
                    detail::CRowMatD scores = q * k.transpose() / std::sqrt(double(head_dim));
                    for (int i = 0; i < seq; ++i) {
                        double m = scores.row(i).maxCoeff();
                        double s = 0.0;
                        for (int j = 0; j < seq; ++j) {
                            scores(i, j) = std::exp(scores(i, j) - m);
                            s += scores(i, j);
                        }
                        scores.row(i) /= s;
                    }
                    acc += (scores * v) * detail::to_d(blk.heads.wo[h]);
                }
                x += acc;
            }
            layer_norm_rows(x, blk.ln1_g, blk.ln1_b);
            if (blk.has_ffn) {
                detail::CRowMatD inner = x * detail::to_d(blk.wu);
                for (Eigen::Index i = 0; i < inner.size(); ++i) {
                    const double v = inner.data()[i];
                    const double u = 0.7978845608028654 * (v + 0.044715 * v * v * v);
                    inner.data()[i] = 0.5 * v * (1.0 + std::tanh(u));
                }
                x += inner * detail::to_d(blk.wd);
            }
            layer_norm_rows(x, blk.ln2_g, blk.ln2_b);
        }

        detail::CRowMatD pooled = x.colwise().mean();
        detail::CRowMatD logits = pooled * detail::to_d(classifier);
        std::vector<float> out(static_cast<size_t>(classes));
        for (int j = 0; j < classes; ++j) out[j] = static_cast<float>(logits(0, j));
        return out;
    }

    int predict(std::span<const int> tokens) const {
        const auto logits = forward(tokens);
        int best = 0;
        for (size_t j = 1; j < logits.size(); ++j)
            if (logits[j] > logits[best]) best = static_cast<int>(j);
        return best;
    }
};

}  // namespace prunekit
