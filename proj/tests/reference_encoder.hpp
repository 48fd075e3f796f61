#pragma once

// Test-only reference implementation of the ungated encoder, written directly
// against Eigen in double precision. Deliberately independent of the tape
// machinery: it exists to cross-check the masked forward path.

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <vector>

#include "prunekit/model.hpp"

namespace reftest {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline Mat to_mat(const prunekit::Tensor& t) {
    Mat m(t.rows(), t.cols());
    for (int i = 0; i < t.rows(); ++i)
        for (int j = 0; j < t.cols(); ++j) m(i, j) = t.is_matrix() ? t.at(i, j) : t.at(j);
    return m;
}

inline Vec to_vec(const prunekit::Tensor& t) {
    Vec v(t.numel());
    for (long i = 0; i < t.numel(); ++i) v(i) = t.at(i);
    return v;
}

inline Mat layer_norm(const Mat& x, const Vec& g, const Vec& b, double eps = 1e-5) {
    Mat out = x;
    for (int i = 0; i < x.rows(); ++i) {
        const double mean = x.row(i).mean();
        double var = 0.0;
        for (int j = 0; j < x.cols(); ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
        var /= x.cols();
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < x.cols(); ++j) out(i, j) = g(j) * ((x(i, j) - mean) * inv) + b(j);
    }
    return out;
}

inline double gelu(double v) {
    const double u = 0.7978845608028654 * (v + 0.044715 * v * v * v);
    return 0.5 * v * (1.0 + std::tanh(u));
}

inline Mat softmax_rows(Mat s) {
    for (int i = 0; i < s.rows(); ++i) {
        const double m = s.row(i).maxCoeff();
        double z = 0.0;
        for (int j = 0; j < s.cols(); ++j) {
            s(i, j) = std::exp(s(i, j) - m);
            z += s(i, j);
        }
        s.row(i) /= z;
    }
    return s;
}

struct RefEncoder {
    prunekit::ModelConfig cfg;
    Mat tok_emb, pos_emb, cls;
    Vec emb_g, emb_b;
    struct Block {
        std::vector<Mat> wq, wk, wv, wo;
        Mat wu, wd;
        Vec g1, b1, g2, b2;
    };
    std::vector<Block> blocks;

    static RefEncoder from(const prunekit::MaskableEncoder& m) {
        RefEncoder r;
        r.cfg = m.cfg;
        r.tok_emb = to_mat(m.tok_emb);
        r.pos_emb = to_mat(m.pos_emb);
        r.emb_g = to_vec(m.emb_ln_g);
        r.emb_b = to_vec(m.emb_ln_b);
        for (const auto& b : m.blocks) {
            Block rb;
            for (const auto& w : b.wq) rb.wq.push_back(to_mat(w));
            for (const auto& w : b.wk) rb.wk.push_back(to_mat(w));
            for (const auto& w : b.wv) rb.wv.push_back(to_mat(w));
            for (const auto& w : b.wo) rb.wo.push_back(to_mat(w));
            rb.wu = to_mat(b.wu);
            rb.wd = to_mat(b.wd);
            rb.g1 = to_vec(b.ln1_g);
            rb.b1 = to_vec(b.ln1_b);
            rb.g2 = to_vec(b.ln2_g);
            rb.b2 = to_vec(b.ln2_b);
            r.blocks.push_back(std::move(rb));
        }
        r.cls = to_mat(m.classifier);
        return r;
    }

    // MHA over an arbitrary subset of heads (brute-force deletion oracle).
    Mat mha(const Mat& x, int blk, const std::vector<int>& heads) const {
        const auto& b = blocks[blk];
        Mat acc = Mat::Zero(x.rows(), cfg.hidden);
        for (int h : heads) {
            Mat q = x * b.wq[h];
            Mat k = x * b.wk[h];
            Mat v = x * b.wv[h];
            Mat att = softmax_rows(q * k.transpose() / std::sqrt(double(cfg.head_dim)));
            acc += (att * v) * b.wo[h];
        }
        return acc;
    }

    // FFN with an arbitrary subset of intermediate dims kept.
    Mat ffn(const Mat& x, int blk, const std::vector<int>& kept_int) const {
        const auto& b = blocks[blk];
        Mat inner(x.rows(), static_cast<int>(kept_int.size()));
        for (int i = 0; i < x.rows(); ++i)
            for (size_t j = 0; j < kept_int.size(); ++j)
                inner(i, static_cast<int>(j)) = gelu((x.row(i) * b.wu.col(kept_int[j]))(0, 0));
        Mat out = Mat::Zero(x.rows(), cfg.hidden);
        for (size_t j = 0; j < kept_int.size(); ++j)
            out += inner.col(static_cast<int>(j)) * b.wd.row(kept_int[j]);
        return out;
    }

    std::vector<int> all_heads() const {
        std::vector<int> v(cfg.heads);
        for (int i = 0; i < cfg.heads; ++i) v[i] = i;
        return v;
    }
    std::vector<int> all_int() const {
        std::vector<int> v(cfg.ffn_dim);
        for (int i = 0; i < cfg.ffn_dim; ++i) v[i] = i;
        return v;
    }

    Mat embed(std::span<const int> tokens) const {
        Mat x(tokens.size(), cfg.hidden);
        for (size_t i = 0; i < tokens.size(); ++i)
            x.row(i) = tok_emb.row(tokens[i]) + pos_emb.row(static_cast<int>(i));
        return layer_norm(x, emb_g, emb_b);
    }

    Vec forward(std::span<const int> tokens) const {
        Mat x = embed(tokens);
        for (int i = 0; i < cfg.layers; ++i) {
            x = layer_norm(x + mha(x, i, all_heads()), blocks[i].g1, blocks[i].b1);
            x = layer_norm(x + ffn(x, i, all_int()), blocks[i].g2, blocks[i].b2);
        }
        Vec pooled = x.colwise().mean();
        return cls.transpose() * pooled;
    }
};

}  // namespace reftest
