#pragma once

// Turns learned real-valued masks into a discrete kept/dropped structure and
// realizes it physically. Surviving gate values are folded into the weights
// rather than rounded to 1, so the compact model reproduces the masked model
// exactly instead of approximately.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "prunekit/compact.hpp"
#include "prunekit/gates.hpp"
#include "prunekit/model.hpp"

namespace prunekit {

struct PrunedStructure {
    std::vector<bool> keep_mha, keep_ffn;            // per layer
    std::vector<std::vector<int>> kept_heads;        // per layer, ascending indices
    std::vector<std::vector<int>> kept_int;          // per layer, ascending indices
    std::vector<int> kept_hidden;                    // ascending indices, never empty
    // Fold scales, laid out over the FULL index space (0 where pruned).
    std::vector<float> mha_scale, ffn_scale;
    std::vector<std::vector<float>> head_scale, int_scale;
    std::vector<float> hidden_scale;

    long retained_params(const ModelConfig& cfg) const {
        long total = 0;
        const long dk = static_cast<long>(kept_hidden.size());
        for (int i = 0; i < cfg.layers; ++i) {
            if (keep_mha[i]) total += 4L * cfg.head_dim * static_cast<long>(kept_heads[i].size()) * dk;
            if (keep_ffn[i]) total += 2L * static_cast<long>(kept_int[i].size()) * dk;
        }
        return total;
    }

    bool degenerate() const {
        for (bool k : keep_mha)
            if (k) return false;
        for (bool k : keep_ffn)
            if (k) return false;
        return true;
    }

    static PrunedStructure identity(const ModelConfig& cfg) {
        PrunedStructure s;
        s.keep_mha.assign(cfg.layers, true);
        s.keep_ffn.assign(cfg.layers, true);
        s.mha_scale.assign(cfg.layers, 1.0f);
        s.ffn_scale.assign(cfg.layers, 1.0f);
        for (int i = 0; i < cfg.layers; ++i) {
            std::vector<int> hs(cfg.heads), is(cfg.ffn_dim);
            std::iota(hs.begin(), hs.end(), 0);
            std::iota(is.begin(), is.end(), 0);
            s.kept_heads.push_back(std::move(hs));
            s.kept_int.push_back(std::move(is));
            s.head_scale.emplace_back(cfg.heads, 1.0f);
            s.int_scale.emplace_back(cfg.ffn_dim, 1.0f);
        }
        s.kept_hidden.resize(cfg.hidden);
        std::iota(s.kept_hidden.begin(), s.kept_hidden.end(), 0);
        s.hidden_scale.assign(cfg.hidden, 1.0f);
        return s;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["keep_mha"] = std::vector<int>(keep_mha.begin(), keep_mha.end());
        j["keep_ffn"] = std::vector<int>(keep_ffn.begin(), keep_ffn.end());
        j["kept_heads"] = kept_heads;
        j["kept_int"] = kept_int;
        j["kept_hidden"] = kept_hidden;
        j["mha_scale"] = mha_scale;
        j["ffn_scale"] = ffn_scale;
        j["head_scale"] = head_scale;
        j["int_scale"] = int_scale;
        j["hidden_scale"] = hidden_scale;
        return j;
    }

    static PrunedStructure from_json(const nlohmann::json& j) {
        PrunedStructure s;
        for (int v : j.at("keep_mha").get<std::vector<int>>()) s.keep_mha.push_back(v != 0);
        for (int v : j.at("keep_ffn").get<std::vector<int>>()) s.keep_ffn.push_back(v != 0);
        s.kept_heads = j.at("kept_heads").get<std::vector<std::vector<int>>>();
        s.kept_int = j.at("kept_int").get<std::vector<std::vector<int>>>();
        s.kept_hidden = j.at("kept_hidden").get<std::vector<int>>();
        s.mha_scale = j.at("mha_scale").get<std::vector<float>>();
        s.ffn_scale = j.at("ffn_scale").get<std::vector<float>>();
        s.head_scale = j.at("head_scale").get<std::vector<std::vector<float>>>();
        s.int_scale = j.at("int_scale").get<std::vector<std::vector<float>>>();
        s.hidden_scale = j.at("hidden_scale").get<std::vector<float>>();
        return s;
    }
};

namespace detail {

// Keeps the largest count of gates whose unit count does not exceed the
// family's real-valued mass; among equal values, lower indices are pruned
// first. Returns keep flags.
inline std::vector<bool> threshold_family(const std::vector<float>& values) {
    const int n = static_cast<int>(values.size());
    double mass = 0.0;
    for (float v : values) mass += v;
    int keep = static_cast<int>(std::floor(mass + 1e-9));
    keep = std::min(keep, n);
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (values[a] != values[b]) return values[a] < values[b];
        return a < b;
    });
    std::vector<bool> kept(n, true);
    for (int k = 0; k < n - keep; ++k) kept[idx[k]] = false;
    return kept;
}

}  // namespace detail

// Per-family expected-mass thresholding followed by the layer/unit
// normalization: a layer with no surviving fine units loses its layer gate,
// and a dropped layer gate clears its fine units.
inline PrunedStructure binarize(const MaskSnapshot& m, const ModelConfig& cfg,
                                double /*target_sparsity*/ = 0.0) {
    cfg.validate();
    auto check_range = [](const std::vector<float>& fam) {
        for (float v : fam)
            if (v < 0.0f || v > 1.0f) throw UsageError("binarize: mask values must lie in [0,1]");
    };
    check_range(m.mha);
    check_range(m.ffn);
    check_range(m.hidn);
    for (const auto& h : m.head) check_range(h);
    for (const auto& f : m.intd) check_range(f);

    PrunedStructure s;
    const auto keep_mha = detail::threshold_family(m.mha);
    const auto keep_ffn = detail::threshold_family(m.ffn);

    std::vector<float> head_flat, int_flat;
    for (const auto& h : m.head) head_flat.insert(head_flat.end(), h.begin(), h.end());
    for (const auto& f : m.intd) int_flat.insert(int_flat.end(), f.begin(), f.end());
    const auto keep_head = detail::threshold_family(head_flat);
    const auto keep_int = detail::threshold_family(int_flat);

    auto keep_hidn = detail::threshold_family(m.hidn);
    if (std::none_of(keep_hidn.begin(), keep_hidn.end(), [](bool b) { return b; })) {
        // The shared hidden space must stay non-empty.
        int best = 0;
        for (size_t k = 1; k < m.hidn.size(); ++k)
            if (m.hidn[k] > m.hidn[best]) best = static_cast<int>(k);
        keep_hidn[best] = true;
    }

    s.keep_mha.assign(cfg.layers, false);
    s.keep_ffn.assign(cfg.layers, false);
    s.mha_scale.assign(cfg.layers, 0.0f);
    s.ffn_scale.assign(cfg.layers, 0.0f);
    for (int i = 0; i < cfg.layers; ++i) {
        std::vector<int> heads_i;
        std::vector<float> hscale(cfg.heads, 0.0f);
        for (int h = 0; h < cfg.heads; ++h) {
            if (keep_mha[i] && keep_head[size_t(i) * cfg.heads + h]) {
                heads_i.push_back(h);
                hscale[h] = m.head[i][h];
            }
        }
        s.keep_mha[i] = keep_mha[i] && !heads_i.empty();
        if (!s.keep_mha[i]) {
            heads_i.clear();
            std::fill(hscale.begin(), hscale.end(), 0.0f);
        } else {
            s.mha_scale[i] = m.mha[i];
        }
        s.kept_heads.push_back(std::move(heads_i));
        s.head_scale.push_back(std::move(hscale));

        std::vector<int> int_i;
        std::vector<float> iscale(cfg.ffn_dim, 0.0f);
        for (int f = 0; f < cfg.ffn_dim; ++f) {
            if (keep_ffn[i] && keep_int[size_t(i) * cfg.ffn_dim + f]) {
                int_i.push_back(f);
                iscale[f] = m.intd[i][f];
            }
        }
        s.keep_ffn[i] = keep_ffn[i] && !int_i.empty();
        if (!s.keep_ffn[i]) {
            int_i.clear();
            std::fill(iscale.begin(), iscale.end(), 0.0f);
        } else {
            s.ffn_scale[i] = m.ffn[i];
        }
        s.kept_int.push_back(std::move(int_i));
        s.int_scale.push_back(std::move(iscale));
    }

    s.hidden_scale.assign(cfg.hidden, 0.0f);
    for (int k = 0; k < cfg.hidden; ++k) {
        if (keep_hidn[k]) {
            s.kept_hidden.push_back(k);
            s.hidden_scale[k] = m.hidn[k];
        }
    }
    return s;
}

// The binarized structure seen as exact mask values (fold scale where kept).
inline MaskSnapshot structure_masks(const PrunedStructure& s, const ModelConfig& cfg) {
    MaskSnapshot m;
    m.mha = s.mha_scale;
    m.ffn = s.ffn_scale;
    m.head = s.head_scale;
    m.intd = s.int_scale;
    m.hidn = s.hidden_scale;
    (void)cfg;
    return m;
}

inline MaskValues masks_from_snapshot(const MaskSnapshot& m) {
    MaskValues z;
    z.z_mha = Tensor::from({static_cast<int>(m.mha.size())}, m.mha);
    z.z_ffn = Tensor::from({static_cast<int>(m.ffn.size())}, m.ffn);
    for (const auto& h : m.head) z.z_head.push_back(Tensor::from({static_cast<int>(h.size())}, h));
    for (const auto& f : m.intd) z.z_int.push_back(Tensor::from({static_cast<int>(f.size())}, f));
    z.z_hidn = Tensor::from({static_cast<int>(m.hidn.size())}, m.hidn);
    return z;
}

namespace detail {

// Gathers rows/cols of a weight tensor with per-row and per-col scaling.
inline Mat fold(const Tensor& w, const std::vector<int>& rows_keep, const std::vector<float>& row_scale,
                const std::vector<int>& cols_keep, const std::vector<float>& col_scale, double extra = 1.0) {
    Mat out(static_cast<int>(rows_keep.size()), static_cast<int>(cols_keep.size()));
    for (size_t i = 0; i < rows_keep.size(); ++i) {
        const int r = rows_keep[i];
        const double rs = row_scale.empty() ? 1.0 : row_scale[r];
        for (size_t j = 0; j < cols_keep.size(); ++j) {
            const int c = cols_keep[j];
            const double cs = col_scale.empty() ? 1.0 : col_scale[c];
            out.at(static_cast<int>(i), static_cast<int>(j)) =
                static_cast<float>(double(w.at(r, c)) * rs * cs * extra);
        }
    }
    return out;
}

inline std::vector<int> iota_vec(int n) {
    std::vector<int> v(n);
    std::iota(v.begin(), v.end(), 0);
    return v;
}

inline std::vector<float> gather_scaled(const Tensor& v, const std::vector<int>& keep,
                                        const std::vector<float>& scale) {
    std::vector<float> out;
    out.reserve(keep.size());
    for (int k : keep) out.push_back(static_cast<float>(double(v.at(k)) * (scale.empty() ? 1.0 : scale[k])));
    return out;
}

inline CompactModel compile_model(const MaskableEncoder& model, const PrunedStructure& s, bool physically_delete) {
    const ModelConfig& cfg = model.cfg;
    if (static_cast<int>(s.keep_mha.size()) != cfg.layers ||
        static_cast<int>(s.hidden_scale.size()) != cfg.hidden)
        throw UsageError("extract: structure does not match model config");

    const std::vector<int> hid = physically_delete ? s.kept_hidden : iota_vec(cfg.hidden);
    const std::vector<float>& hs = s.hidden_scale;
    const std::vector<float> no_scale;

    CompactModel c;
    c.d_orig = cfg.hidden;
    c.d_kept = static_cast<int>(hid.size());
    c.head_dim = cfg.head_dim;
    c.classes = cfg.classes;
    c.vocab = cfg.vocab;
    c.max_seq = cfg.max_seq;

    c.tok_emb = fold(model.tok_emb, iota_vec(cfg.vocab), no_scale, hid, hs);
    c.pos_emb = fold(model.pos_emb, iota_vec(cfg.max_seq), no_scale, hid, hs);
    c.emb_ln_g = gather_scaled(model.emb_ln_g, hid, hs);
    c.emb_ln_b = gather_scaled(model.emb_ln_b, hid, hs);
    // The classifier consumes the hidden stream: fold the mask into its rows.
    c.classifier = fold(model.classifier, hid, hs, iota_vec(cfg.classes), no_scale);

    const std::vector<int> dh = iota_vec(cfg.head_dim);
    for (int i = 0; i < cfg.layers; ++i) {
        const EncoderBlock& b = model.blocks[i];
        CompactBlock cb;
        const std::vector<int> heads_i =
            physically_delete ? s.kept_heads[i] : (s.keep_mha[i] ? iota_vec(cfg.heads) : std::vector<int>{});
        cb.has_mha = s.keep_mha[i] && (!physically_delete || !s.kept_heads[i].empty());
        if (!physically_delete && !s.keep_mha[i]) {
            // Dropped layer in zero-filled form: full-cost heads with zeroed
            // output matrices.
            cb.has_mha = true;
            for (int h = 0; h < cfg.heads; ++h) {
                cb.heads.wq.push_back(fold(b.wq[h], hid, hs, dh, no_scale));
                cb.heads.wk.push_back(fold(b.wk[h], hid, hs, dh, no_scale));
                cb.heads.wv.push_back(fold(b.wv[h], hid, hs, dh, no_scale));
                cb.heads.wo.push_back(Mat(cfg.head_dim, c.d_kept));
            }
        } else if (cb.has_mha) {
            for (int h : heads_i) {
                cb.heads.wq.push_back(fold(b.wq[h], hid, hs, dh, no_scale));
                cb.heads.wk.push_back(fold(b.wk[h], hid, hs, dh, no_scale));
                cb.heads.wv.push_back(fold(b.wv[h], hid, hs, dh, no_scale));
                const double gate = double(s.head_scale[i][h]) * s.mha_scale[i];
                cb.heads.wo.push_back(fold(b.wo[h], dh, no_scale, hid, hs, gate));
            }
        }

        const bool ffn_alive = s.keep_ffn[i];
        cb.has_ffn = ffn_alive || !physically_delete;
        if (cb.has_ffn) {
            const std::vector<int> ints_i =
                physically_delete ? s.kept_int[i] : iota_vec(cfg.ffn_dim);
            std::vector<float> int_sc(cfg.ffn_dim, 0.0f);
            if (ffn_alive)
                for (int f = 0; f < cfg.ffn_dim; ++f)
                    int_sc[f] = static_cast<float>(double(s.int_scale[i][f]) * s.ffn_scale[i]);
            cb.wu = fold(b.wu, hid, hs, ints_i, no_scale);
            cb.wd = fold(b.wd, ints_i, int_sc, hid, hs);
            if (physically_delete && ints_i.empty()) cb.has_ffn = false;
        }

        cb.ln1_g = gather_scaled(b.ln1_g, hid, hs);
        cb.ln1_b = gather_scaled(b.ln1_b, hid, hs);
        cb.ln2_g = gather_scaled(b.ln2_g, hid, hs);
        cb.ln2_b = gather_scaled(b.ln2_b, hid, hs);
        c.blocks.push_back(std::move(cb));
    }
    return c;
}

}  // namespace detail

// Physically smaller model: pruned units deleted, fold scales baked in.
inline CompactModel extract(const MaskableEncoder& model, const PrunedStructure& s) {
    return detail::compile_model(model, s, true);
}

// Same function at full architectural cost: pruned units zeroed in place, not
// deleted. This is the honest "dense" side of a latency comparison.
inline CompactModel zero_fill(const MaskableEncoder& model, const PrunedStructure& s) {
    return detail::compile_model(model, s, false);
}

struct ParamBreakdown {
    long mha = 0, ffn = 0, embeddings = 0, classifier = 0, layer_norm = 0;
    long headline() const { return mha + ffn; }  // M: embeddings excluded
    long total() const { return mha + ffn + embeddings + classifier + layer_norm; }
};

inline ParamBreakdown count_params(const ModelConfig& cfg) {
    ParamBreakdown p;
    p.mha = 4L * cfg.hidden * cfg.hidden * cfg.layers;
    p.ffn = 2L * cfg.hidden * cfg.ffn_dim * cfg.layers;
    p.embeddings = static_cast<long>(cfg.vocab + cfg.max_seq) * cfg.hidden;
    p.classifier = static_cast<long>(cfg.hidden) * cfg.classes;
    p.layer_norm = 2L * cfg.hidden * (2L * cfg.layers + 1);
    return p;
}

inline ParamBreakdown count_params(const ModelConfig& cfg, const PrunedStructure& s) {
    ParamBreakdown p;
    const long dk = static_cast<long>(s.kept_hidden.size());
    for (int i = 0; i < cfg.layers; ++i) {
        if (s.keep_mha[i]) p.mha += 4L * cfg.head_dim * static_cast<long>(s.kept_heads[i].size()) * dk;
        if (s.keep_ffn[i]) p.ffn += 2L * static_cast<long>(s.kept_int[i].size()) * dk;
    }
    p.embeddings = static_cast<long>(cfg.vocab + cfg.max_seq) * dk;
    p.classifier = dk * cfg.classes;
    p.layer_norm = 2L * dk * (2L * cfg.layers + 1);
    return p;
}

// Physical enumeration over the compact tensors.
inline ParamBreakdown count_params(const CompactModel& c) {
    ParamBreakdown p;
    for (const auto& b : c.blocks) {
        if (b.has_mha)
            for (size_t h = 0; h < b.heads.wq.size(); ++h)
                p.mha += b.heads.wq[h].numel() + b.heads.wk[h].numel() + b.heads.wv[h].numel() +
                         b.heads.wo[h].numel();
        if (b.has_ffn) p.ffn += b.wu.numel() + b.wd.numel();
        p.layer_norm += static_cast<long>(b.ln1_g.size() + b.ln1_b.size() + b.ln2_g.size() + b.ln2_b.size());
    }
    p.embeddings = c.tok_emb.numel() + c.pos_emb.numel();
    p.classifier = c.classifier.numel();
    p.layer_norm += static_cast<long>(c.emb_ln_g.size() + c.emb_ln_b.size());
    return p;
}

}  // namespace prunekit
