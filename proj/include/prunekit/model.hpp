#pragma once

// Transformer encoder in which every MHA layer, FFN layer, attention head,
// FFN intermediate dimension and shared hidden dimension is gated by a mask.
//
// Mask placement (chosen so a binarized model compacts exactly):
//   * z_hidn scales the columns of the stream entering W_Q/W_K/W_V/W_U and the
//     classifier, the columns produced by W_O/W_D, the embedding output, and
//     the output of every layer norm.
//   * z_head / z_MHA scale each head's output and the whole MHA sum.
//   * z_int / z_FFN gate intermediate activations and the whole FFN output.
// Blocks use post-layer-norm ordering: LN(x + sublayer(x)).

#include <span>
#include <string>
#include <vector>

#include "prunekit/common.hpp"
#include "prunekit/gates.hpp"
#include "prunekit/tensor.hpp"

namespace prunekit {

struct ModelConfig {
    int layers = 4;
    int hidden = 64;
    int heads = 4;
    int head_dim = 16;
    int ffn_dim = 256;
    int vocab = 64;
    int max_seq = 32;
    int classes = 2;

    void validate() const {
        if (hidden != heads * head_dim)
            throw UsageError("model config: hidden (" + std::to_string(hidden) + ") must equal heads*head_dim (" +
                             std::to_string(heads) + "*" + std::to_string(head_dim) + ")");
        for (int v : {layers, hidden, heads, head_dim, ffn_dim, vocab, max_seq, classes})
            if (v < 1) throw UsageError("model config: all dimensions must be >= 1");
    }

    // M: MHA + FFN weight matrices only (embeddings, layer norms and the
    // classifier are excluded by convention).
    long full_size() const { return 4L * hidden * hidden * layers + 2L * hidden * ffn_dim * layers; }

    SparsityAccounting accounting() const { return {layers, heads, head_dim, ffn_dim, hidden}; }
};

struct EncoderBlock {
    std::vector<Tensor> wq, wk, wv;  // per head: d x d_h
    std::vector<Tensor> wo;          // per head: d_h x d
    Tensor wu;                       // d x d_f
    Tensor wd;                       // d_f x d
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
};

struct MaskableEncoder {
    ModelConfig cfg;
    Tensor tok_emb;  // vocab x d
    Tensor pos_emb;  // max_seq x d
    Tensor emb_ln_g, emb_ln_b;
    std::vector<EncoderBlock> blocks;
    Tensor classifier;  // d x classes

    static MaskableEncoder init(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        MaskableEncoder m;
        m.cfg = cfg;
        const double w_std = 0.6 / std::sqrt(double(cfg.hidden));
        m.tok_emb = randn({cfg.vocab, cfg.hidden}, rng, 0.0, 0.1, true);
        m.pos_emb = randn({cfg.max_seq, cfg.hidden}, rng, 0.0, 0.1, true);
        m.emb_ln_g = Tensor::full({cfg.hidden}, 1.0f, true);
        m.emb_ln_b = Tensor::zeros({cfg.hidden}, true);
        for (int i = 0; i < cfg.layers; ++i) {
            EncoderBlock b;
            for (int h = 0; h < cfg.heads; ++h) {
                b.wq.push_back(randn({cfg.hidden, cfg.head_dim}, rng, 0.0, w_std, true));
                b.wk.push_back(randn({cfg.hidden, cfg.head_dim}, rng, 0.0, w_std, true));
                b.wv.push_back(randn({cfg.hidden, cfg.head_dim}, rng, 0.0, w_std, true));
                b.wo.push_back(randn({cfg.head_dim, cfg.hidden}, rng, 0.0, w_std, true));
            }
            b.wu = randn({cfg.hidden, cfg.ffn_dim}, rng, 0.0, w_std, true);
            b.wd = randn({cfg.ffn_dim, cfg.hidden}, rng, 0.0, w_std, true);
            b.ln1_g = Tensor::full({cfg.hidden}, 1.0f, true);
            b.ln1_b = Tensor::zeros({cfg.hidden}, true);
            b.ln2_g = Tensor::full({cfg.hidden}, 1.0f, true);
            b.ln2_b = Tensor::zeros({cfg.hidden}, true);
            m.blocks.push_back(std::move(b));
        }
        m.classifier = randn({cfg.hidden, cfg.classes}, rng, 0.0, 1.0 / std::sqrt(double(cfg.hidden)), true);
        return m;
    }

    std::vector<Tensor> parameters(bool include_embeddings = true) const {
        std::vector<Tensor> ps;
        if (include_embeddings) {
            ps.push_back(tok_emb);
            ps.push_back(pos_emb);
        }
        ps.push_back(emb_ln_g);
        ps.push_back(emb_ln_b);
        for (const auto& b : blocks) {
            for (const auto& t : b.wq) ps.push_back(t);
            for (const auto& t : b.wk) ps.push_back(t);
            for (const auto& t : b.wv) ps.push_back(t);
            for (const auto& t : b.wo) ps.push_back(t);
            ps.push_back(b.wu);
            ps.push_back(b.wd);
            ps.push_back(b.ln1_g);
            ps.push_back(b.ln1_b);
            ps.push_back(b.ln2_g);
            ps.push_back(b.ln2_b);
        }
        ps.push_back(classifier);
        return ps;
    }

    MaskableEncoder clone() const {
        MaskableEncoder out;
        out.cfg = cfg;
        auto copy = [](const Tensor& t) { return Tensor::from(t.shape(), t.values(), t.requires_grad()); };
        out.tok_emb = copy(tok_emb);
        out.pos_emb = copy(pos_emb);
        out.emb_ln_g = copy(emb_ln_g);
        out.emb_ln_b = copy(emb_ln_b);
        for (const auto& b : blocks) {
            EncoderBlock nb;
            for (const auto& t : b.wq) nb.wq.push_back(copy(t));
            for (const auto& t : b.wk) nb.wk.push_back(copy(t));
            for (const auto& t : b.wv) nb.wv.push_back(copy(t));
            for (const auto& t : b.wo) nb.wo.push_back(copy(t));
            nb.wu = copy(b.wu);
            nb.wd = copy(b.wd);
            nb.ln1_g = copy(b.ln1_g);
            nb.ln1_b = copy(b.ln1_b);
            nb.ln2_g = copy(b.ln2_g);
            nb.ln2_b = copy(b.ln2_b);
            out.blocks.push_back(std::move(nb));
        }
        out.classifier = copy(classifier);
        return out;
    }
};

namespace detail {

inline void check_block_finite(const Tensor& t, int block, int head, const char* what) {
    if (!all_finite(t))
        throw NumericError(std::string("non-finite ") + what + " in block " + std::to_string(block) +
                           (head >= 0 ? " head " + std::to_string(head) : ""));
}

}  // namespace detail

// z_MHA * sum_h z_head_h * Att(W_Q^h, W_K^h, W_V^h, W_O^h, X). X is the raw
// block input; the hidden mask is applied to its columns before projection and
// to the produced columns after W_O.
inline Tensor mha_forward(const MaskableEncoder& m, const Tensor& x, int block_idx, const MaskValues& masks) {
    if (block_idx < 0 || block_idx >= m.cfg.layers)
        throw UsageError("mha_forward: block index " + std::to_string(block_idx) + " out of range");
    if (!all_finite(x)) throw NumericError("mha_forward: non-finite input at block " + std::to_string(block_idx));
    const EncoderBlock& b = m.blocks[block_idx];
    Tensor xc = col_scale(x, masks.z_hidn);
    Tensor acc;
    for (int h = 0; h < m.cfg.heads; ++h) {
        Tensor q = matmul(xc, b.wq[h]);
        Tensor k = matmul(xc, b.wk[h]);
        Tensor v = matmul(xc, b.wv[h]);
        Tensor scores = affine(matmul(q, transpose(k)), 1.0 / std::sqrt(double(m.cfg.head_dim)), 0.0);
        Tensor att = softmax(scores);
        Tensor head_out = matmul(matmul(att, v), b.wo[h]);
        detail::check_block_finite(head_out, block_idx, h, "attention output");
        Tensor gated = mul(head_out, slice(masks.z_head[block_idx], 0, h, h + 1));
        acc = h == 0 ? gated : add(acc, gated);
    }
    Tensor out = mul(col_scale(acc, masks.z_hidn), slice(masks.z_mha, 0, block_idx, block_idx + 1));
    detail::check_block_finite(out, block_idx, -1, "MHA output");
    return out;
}

// z_FFN * gelu(X W_U) diag(z_int) W_D with the hidden mask on W_U's input
// columns and W_D's produced columns.
inline Tensor ffn_forward(const MaskableEncoder& m, const Tensor& x, int block_idx, const MaskValues& masks) {
    if (block_idx < 0 || block_idx >= m.cfg.layers)
        throw UsageError("ffn_forward: block index " + std::to_string(block_idx) + " out of range");
    if (!all_finite(x)) throw NumericError("ffn_forward: non-finite input at block " + std::to_string(block_idx));
    const EncoderBlock& b = m.blocks[block_idx];
    Tensor xc = col_scale(x, masks.z_hidn);
    Tensor inner = col_scale(gelu(matmul(xc, b.wu)), masks.z_int[block_idx]);
    Tensor out = mul(col_scale(matmul(inner, b.wd), masks.z_hidn),
                     slice(masks.z_ffn, 0, block_idx, block_idx + 1));
    detail::check_block_finite(out, block_idx, -1, "FFN output");
    return out;
}

struct EncoderOutput {
    Tensor logits;               // 1 x classes
    std::vector<Tensor> hidden;  // per block: post-FFN, post-LN state (seq x d)
};

inline Tensor one_hot_rows(std::span<const int> tokens, int vocab) {
    std::vector<float> data(tokens.size() * static_cast<size_t>(vocab), 0.0f);
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= vocab)
            throw UsageError("token id " + std::to_string(tokens[i]) + " out of range for vocab " +
                             std::to_string(vocab));
        data[i * vocab + tokens[i]] = 1.0f;
    }
    return Tensor::from({static_cast<int>(tokens.size()), vocab}, std::move(data));
}

// Embeds tokens and positions, runs the masked blocks, and classifies from the
// mean-pooled final state. Also returns the per-block hidden states consumed
// by layerwise distillation.
inline EncoderOutput encoder_forward(const MaskableEncoder& m, std::span<const int> tokens,
                                     const MaskValues& masks) {
    if (tokens.empty()) throw UsageError("encoder_forward: empty token sequence");
    if (static_cast<int>(tokens.size()) > m.cfg.max_seq)
        throw UsageError("encoder_forward: sequence length " + std::to_string(tokens.size()) +
                         " exceeds max_seq " + std::to_string(m.cfg.max_seq));
    const int seq = static_cast<int>(tokens.size());

    Tensor emb = add(matmul(one_hot_rows(tokens, m.cfg.vocab), m.tok_emb), slice(m.pos_emb, 0, 0, seq));
    Tensor x = col_scale(layer_norm(col_scale(emb, masks.z_hidn), m.emb_ln_g, m.emb_ln_b), masks.z_hidn);

    EncoderOutput out;
    for (int i = 0; i < m.cfg.layers; ++i) {
        const EncoderBlock& b = m.blocks[i];
        x = col_scale(layer_norm(add(x, mha_forward(m, x, i, masks)), b.ln1_g, b.ln1_b), masks.z_hidn);
        x = col_scale(layer_norm(add(x, ffn_forward(m, x, i, masks)), b.ln2_g, b.ln2_b), masks.z_hidn);
        out.hidden.push_back(x);
    }

    Tensor pool = affine(matmul(Tensor::full({1, seq}, 1.0f), x), 1.0 / seq, 0.0);
    out.logits = matmul(col_scale(pool, masks.z_hidn), m.classifier);
    return out;
}

}  // namespace prunekit
