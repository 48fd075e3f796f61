#pragma once

// Checkpoint container: 8-byte magic, little-endian u32 header length, JSON
// header, then raw little-endian float32 payload in header-declared tensor
// order. Loading follows the header, so any tensor order round-trips.

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "prunekit/compact.hpp"
#include "prunekit/common.hpp"
#include "prunekit/compile.hpp"
#include "prunekit/distill.hpp"
#include "prunekit/model.hpp"

namespace prunekit {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'P', 'R', 'U', 'N', 'E', 'K', 'I', 'T'};
inline constexpr int kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

struct Checkpoint {
    nlohmann::json header;          // kind, config, structure, meta, tensors
    std::vector<NamedTensor> tensors;

    const NamedTensor& get(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw UsageError("checkpoint is missing tensor '" + name + "'");
    }
    bool has(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return true;
        return false;
    }
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    nlohmann::json header = ckpt.header;
    header["format_version"] = kCheckpointVersion;
    nlohmann::json tensor_list = nlohmann::json::array();
    for (const auto& t : ckpt.tensors) {
        if (numel_of(t.shape) != static_cast<long>(t.data.size()))
            throw UsageError("tensor '" + t.name + "' shape/data mismatch");
        tensor_list.push_back({{"name", t.name}, {"shape", t.shape}});
    }
    header["tensors"] = tensor_list;
    const std::string hs = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw UsageError("cannot open '" + path + "' for writing");
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint32_t len = static_cast<std::uint32_t>(hs.size());
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& t : ckpt.tensors)
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!os) throw UsageError("failed while writing '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw UsageError("cannot open '" + path + "'");
    char magic[8];
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw UsageError("'" + path + "' is not a prunekit checkpoint");
    std::uint32_t len = 0;
    if (!is.read(reinterpret_cast<char*>(&len), sizeof(len)))
        throw UsageError("'" + path + "': truncated header length");
    std::string hs(len, '\0');
    if (!is.read(hs.data(), len)) throw UsageError("'" + path + "': truncated header");

    Checkpoint ckpt;
    try {
        ckpt.header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("'" + path + "': bad header JSON: " + e.what());
    }
    const int version = ckpt.header.value("format_version", -1);
    if (version != kCheckpointVersion)
        throw UsageError("'" + path + "': format version " + std::to_string(version) + " unsupported (want " +
                         std::to_string(kCheckpointVersion) + ")");

    for (const auto& entry : ckpt.header.at("tensors")) {
        NamedTensor t;
        t.name = entry.at("name").get<std::string>();
        t.shape = entry.at("shape").get<std::vector<int>>();
        t.data.resize(static_cast<size_t>(numel_of(t.shape)));
        if (!is.read(reinterpret_cast<char*>(t.data.data()),
                     static_cast<std::streamsize>(t.data.size() * sizeof(float))))
            throw UsageError("'" + path + "': payload truncated at tensor '" + t.name + "'");
        ckpt.tensors.push_back(std::move(t));
    }
    // Trailing bytes mean the payload disagrees with the header.
    char extra;
    if (is.read(&extra, 1)) throw UsageError("'" + path + "': payload longer than header declares");
    return ckpt;
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint adapters
// ---------------------------------------------------------------------------

inline nlohmann::json model_config_json(const ModelConfig& c) {
    return {{"layers", c.layers},   {"hidden", c.hidden},   {"heads", c.heads},
            {"head_dim", c.head_dim}, {"ffn_dim", c.ffn_dim}, {"vocab", c.vocab},
            {"max_seq", c.max_seq}, {"classes", c.classes}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.layers = j.at("layers");
    c.hidden = j.at("hidden");
    c.heads = j.at("heads");
    c.head_dim = j.at("head_dim");
    c.ffn_dim = j.at("ffn_dim");
    c.vocab = j.at("vocab");
    c.max_seq = j.at("max_seq");
    c.classes = j.at("classes");
    c.validate();
    return c;
}

namespace detail {

inline void push_tensor(Checkpoint& ck, const std::string& name, const Tensor& t) {
    ck.tensors.push_back({name, t.shape(), t.values()});
}

inline Tensor pull_tensor(const Checkpoint& ck, const std::string& name, bool requires_grad) {
    const NamedTensor& t = ck.get(name);
    return Tensor::from(t.shape, t.data, requires_grad);
}

}  // namespace detail

struct DenseBundle {
    MaskableEncoder model;
    MaskSet masks;           // present iff saved with masks
    bool has_masks = false;
    LayerTransform transform;
    bool has_transform = false;
};

inline Checkpoint make_dense_checkpoint(const MaskableEncoder& m, const MaskSet* masks = nullptr,
                                        const LayerTransform* transform = nullptr,
                                        nlohmann::json meta = nlohmann::json::object()) {
    Checkpoint ck;
    ck.header["kind"] = "dense";
    ck.header["config"] = model_config_json(m.cfg);
    ck.header["meta"] = std::move(meta);
    detail::push_tensor(ck, "tok_emb", m.tok_emb);
    detail::push_tensor(ck, "pos_emb", m.pos_emb);
    detail::push_tensor(ck, "emb_ln_g", m.emb_ln_g);
    detail::push_tensor(ck, "emb_ln_b", m.emb_ln_b);
    for (int i = 0; i < m.cfg.layers; ++i) {
        const auto& b = m.blocks[i];
        const std::string p = "block" + std::to_string(i) + ".";
        for (int h = 0; h < m.cfg.heads; ++h) {
            detail::push_tensor(ck, p + "wq" + std::to_string(h), b.wq[h]);
            detail::push_tensor(ck, p + "wk" + std::to_string(h), b.wk[h]);
            detail::push_tensor(ck, p + "wv" + std::to_string(h), b.wv[h]);
            detail::push_tensor(ck, p + "wo" + std::to_string(h), b.wo[h]);
        }
        detail::push_tensor(ck, p + "wu", b.wu);
        detail::push_tensor(ck, p + "wd", b.wd);
        detail::push_tensor(ck, p + "ln1_g", b.ln1_g);
        detail::push_tensor(ck, p + "ln1_b", b.ln1_b);
        detail::push_tensor(ck, p + "ln2_g", b.ln2_g);
        detail::push_tensor(ck, p + "ln2_b", b.ln2_b);
    }
    detail::push_tensor(ck, "classifier", m.classifier);
    if (masks) {
        ck.header["gate_config"] = {{"beta", masks->gate.beta},
                                    {"stretch_lo", masks->gate.stretch_lo},
                                    {"stretch_hi", masks->gate.stretch_hi}};
        ck.header["layer_masks_enabled"] = masks->layer_masks_enabled;
        detail::push_tensor(ck, "mask.la_mha", masks->la_mha);
        detail::push_tensor(ck, "mask.la_ffn", masks->la_ffn);
        for (size_t i = 0; i < masks->la_head.size(); ++i)
            detail::push_tensor(ck, "mask.la_head" + std::to_string(i), masks->la_head[i]);
        for (size_t i = 0; i < masks->la_int.size(); ++i)
            detail::push_tensor(ck, "mask.la_int" + std::to_string(i), masks->la_int[i]);
        detail::push_tensor(ck, "mask.la_hidn", masks->la_hidn);
    }
    if (transform) detail::push_tensor(ck, "w_layer", transform->w);
    return ck;
}

inline DenseBundle dense_from_checkpoint(const Checkpoint& ck) {
    if (ck.header.value("kind", "") != "dense")
        throw UsageError("checkpoint kind '" + ck.header.value("kind", "?") + "' is not a dense model");
    DenseBundle out;
    out.model.cfg = model_config_from_json(ck.header.at("config"));
    const ModelConfig& cfg = out.model.cfg;
    out.model.tok_emb = detail::pull_tensor(ck, "tok_emb", true);
    out.model.pos_emb = detail::pull_tensor(ck, "pos_emb", true);
    out.model.emb_ln_g = detail::pull_tensor(ck, "emb_ln_g", true);
    out.model.emb_ln_b = detail::pull_tensor(ck, "emb_ln_b", true);
    for (int i = 0; i < cfg.layers; ++i) {
        EncoderBlock b;
        const std::string p = "block" + std::to_string(i) + ".";
        for (int h = 0; h < cfg.heads; ++h) {
            b.wq.push_back(detail::pull_tensor(ck, p + "wq" + std::to_string(h), true));
            b.wk.push_back(detail::pull_tensor(ck, p + "wk" + std::to_string(h), true));
            b.wv.push_back(detail::pull_tensor(ck, p + "wv" + std::to_string(h), true));
            b.wo.push_back(detail::pull_tensor(ck, p + "wo" + std::to_string(h), true));
        }
        b.wu = detail::pull_tensor(ck, p + "wu", true);
        b.wd = detail::pull_tensor(ck, p + "wd", true);
        b.ln1_g = detail::pull_tensor(ck, p + "ln1_g", true);
        b.ln1_b = detail::pull_tensor(ck, p + "ln1_b", true);
        b.ln2_g = detail::pull_tensor(ck, p + "ln2_g", true);
        b.ln2_b = detail::pull_tensor(ck, p + "ln2_b", true);
        out.model.blocks.push_back(std::move(b));
    }
    out.model.classifier = detail::pull_tensor(ck, "classifier", true);
    if (ck.has("mask.la_mha")) {
        out.has_masks = true;
        GateConfig gc;
        if (ck.header.contains("gate_config")) {
            gc.beta = ck.header["gate_config"].value("beta", gc.beta);
            gc.stretch_lo = ck.header["gate_config"].value("stretch_lo", gc.stretch_lo);
            gc.stretch_hi = ck.header["gate_config"].value("stretch_hi", gc.stretch_hi);
        }
        out.masks.gate = gc;
        out.masks.layer_masks_enabled = ck.header.value("layer_masks_enabled", true);
        out.masks.la_mha = detail::pull_tensor(ck, "mask.la_mha", true);
        out.masks.la_ffn = detail::pull_tensor(ck, "mask.la_ffn", true);
        for (int i = 0; i < cfg.layers; ++i) {
            out.masks.la_head.push_back(detail::pull_tensor(ck, "mask.la_head" + std::to_string(i), true));
            out.masks.la_int.push_back(detail::pull_tensor(ck, "mask.la_int" + std::to_string(i), true));
        }
        out.masks.la_hidn = detail::pull_tensor(ck, "mask.la_hidn", true);
    }
    if (ck.has("w_layer")) {
        out.has_transform = true;
        out.transform.w = detail::pull_tensor(ck, "w_layer", true);
    }
    return out;
}

inline Checkpoint make_compact_checkpoint(const CompactModel& c, const PrunedStructure* structure = nullptr,
                                          nlohmann::json meta = nlohmann::json::object()) {
    Checkpoint ck;
    ck.header["kind"] = "compact";
    ck.header["meta"] = std::move(meta);
    ck.header["compact"] = {{"d_orig", c.d_orig},   {"d_kept", c.d_kept}, {"head_dim", c.head_dim},
                            {"classes", c.classes}, {"vocab", c.vocab},   {"max_seq", c.max_seq}};
    nlohmann::json blocks = nlohmann::json::array();
    auto push_mat = [&ck](const std::string& name, const Mat& m) {
        ck.tensors.push_back({name, {m.rows, m.cols}, m.a});
    };
    auto push_vec = [&ck](const std::string& name, const std::vector<float>& v) {
        ck.tensors.push_back({name, {static_cast<int>(v.size())}, v});
    };
    push_mat("tok_emb", c.tok_emb);
    push_mat("pos_emb", c.pos_emb);
    push_vec("emb_ln_g", c.emb_ln_g);
    push_vec("emb_ln_b", c.emb_ln_b);
    for (size_t i = 0; i < c.blocks.size(); ++i) {
        const auto& b = c.blocks[i];
        blocks.push_back({{"has_mha", b.has_mha},
                          {"has_ffn", b.has_ffn},
                          {"n_heads", static_cast<int>(b.heads.wq.size())}});
        const std::string p = "block" + std::to_string(i) + ".";
        for (size_t h = 0; h < b.heads.wq.size(); ++h) {
            push_mat(p + "wq" + std::to_string(h), b.heads.wq[h]);
            push_mat(p + "wk" + std::to_string(h), b.heads.wk[h]);
            push_mat(p + "wv" + std::to_string(h), b.heads.wv[h]);
            push_mat(p + "wo" + std::to_string(h), b.heads.wo[h]);
        }
        if (b.has_ffn) {
            push_mat(p + "wu", b.wu);
            push_mat(p + "wd", b.wd);
        }
        push_vec(p + "ln1_g", b.ln1_g);
        push_vec(p + "ln1_b", b.ln1_b);
        push_vec(p + "ln2_g", b.ln2_g);
        push_vec(p + "ln2_b", b.ln2_b);
    }
    push_mat("classifier", c.classifier);
    ck.header["blocks"] = blocks;
    if (structure) ck.header["structure"] = structure->to_json();
    return ck;
}

inline CompactModel compact_from_checkpoint(const Checkpoint& ck) {
    if (ck.header.value("kind", "") != "compact")
        throw UsageError("checkpoint kind '" + ck.header.value("kind", "?") + "' is not a compact model");
    CompactModel c;
    const auto& meta = ck.header.at("compact");
    c.d_orig = meta.at("d_orig");
    c.d_kept = meta.at("d_kept");
    c.head_dim = meta.at("head_dim");
    c.classes = meta.at("classes");
    c.vocab = meta.at("vocab");
    c.max_seq = meta.at("max_seq");
    auto pull_mat = [&ck](const std::string& name) {
        const NamedTensor& t = ck.get(name);
        if (t.shape.size() != 2) throw UsageError("tensor '" + name + "' is not a matrix");
        Mat m(t.shape[0], t.shape[1]);
        m.a = t.data;
        return m;
    };
    auto pull_vec = [&ck](const std::string& name) { return ck.get(name).data; };
    c.tok_emb = pull_mat("tok_emb");
    c.pos_emb = pull_mat("pos_emb");
    c.emb_ln_g = pull_vec("emb_ln_g");
    c.emb_ln_b = pull_vec("emb_ln_b");
    const auto& blocks = ck.header.at("blocks");
    for (size_t i = 0; i < blocks.size(); ++i) {
        CompactBlock b;
        b.has_mha = blocks[i].at("has_mha");
        b.has_ffn = blocks[i].at("has_ffn");
        const int n_heads = blocks[i].at("n_heads");
        const std::string p = "block" + std::to_string(i) + ".";
        for (int h = 0; h < n_heads; ++h) {
            b.heads.wq.push_back(pull_mat(p + "wq" + std::to_string(h)));
            b.heads.wk.push_back(pull_mat(p + "wk" + std::to_string(h)));
            b.heads.wv.push_back(pull_mat(p + "wv" + std::to_string(h)));
            b.heads.wo.push_back(pull_mat(p + "wo" + std::to_string(h)));
        }
        if (b.has_ffn) {
            b.wu = pull_mat(p + "wu");
            b.wd = pull_mat(p + "wd");
        }
        b.ln1_g = pull_vec(p + "ln1_g");
        b.ln1_b = pull_vec(p + "ln1_b");
        b.ln2_g = pull_vec(p + "ln2_g");
        b.ln2_b = pull_vec(p + "ln2_b");
        c.blocks.push_back(std::move(b));
    }
    c.classifier = pull_mat("classifier");
    return c;
}

}  // namespace prunekit
