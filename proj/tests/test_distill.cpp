#include <catch2/catch.hpp>

#include <chrono>
#include <cmath>
#include <random>
#include <vector>

#include "prunekit/distill.hpp"
#include "prunekit/grad_check.hpp"
#include "prunekit/model.hpp"

using namespace prunekit;

namespace {

std::vector<Tensor> random_states(int layers, int rows, int d, Rng& rng, double std_dev = 1.0) {
    std::vector<Tensor> v;
    for (int i = 0; i < layers; ++i) v.push_back(randn({rows, d}, rng, 0.0, std_dev));
    return v;
}

// Independent 64-bit MSE.
double ref_mse(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (long i = 0; i < a.numel(); ++i) {
        const double d = double(a.data()[i]) - double(b.data()[i]);
        acc += d * d;
    }
    return acc / double(a.numel());
}

}  // namespace

TEST_CASE("prediction loss on identical logits is zero") {
    Tensor s = Tensor::from({2, 3}, {1, 2, 3, -1, 0, 1}, true);
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, -1, 0, 1});
    CHECK(prediction_loss(s, t, 2.0).item() == Approx(0.0).margin(1e-9));
}

TEST_CASE("prediction loss of near-opposite one-hots approaches the logit gap") {
    Tensor teacher = Tensor::from({1, 2}, {10.0f, -10.0f});
    Tensor student = Tensor::from({1, 2}, {-10.0f, 10.0f}, true);
    CHECK(prediction_loss(student, teacher, 1.0).item() == Approx(20.0).epsilon(1e-4));
}

TEST_CASE("high temperature matches the second-order expansion") {
    // As T grows, T^2 * KL(p_s || p_t) -> (1/2C) * sum_k (shat_k - that_k)^2
    // where shat/that are the mean-centred logits.
    const std::vector<float> s = {1.2f, -0.4f, 0.9f, 0.1f};
    const std::vector<float> t = {0.3f, 0.8f, -1.1f, 0.5f};
    const int c = 4;
    double ms = 0.0, mt = 0.0;
    for (int k = 0; k < c; ++k) {
        ms += s[k];
        mt += t[k];
    }
    ms /= c;
    mt /= c;
    double expansion = 0.0;
    for (int k = 0; k < c; ++k) {
        const double d = (s[k] - ms) - (t[k] - mt);
        expansion += d * d;
    }
    expansion /= 2.0 * c;

    Tensor st = Tensor::from({1, 4}, s);
    Tensor tt = Tensor::from({1, 4}, t);
    const double at_100 = prediction_loss(st, tt, 100.0).item();
    CHECK(at_100 == Approx(expansion).epsilon(0.02));
    // The unscaled KL itself vanishes.
    CHECK(at_100 / (100.0 * 100.0) < 1e-4);
}

TEST_CASE("prediction loss is non-negative and zero only for equal softened distributions") {
    Rng rng(404);
    for (int rep = 0; rep < 50; ++rep) {
        Tensor s = randn({2, 5}, rng, 0.0, 2.0);
        Tensor t = randn({2, 5}, rng, 0.0, 2.0);
        CHECK(prediction_loss(s, t, 2.0).item() >= 0.0f);
    }
    // Logits shifted by a constant soften to the same distribution.
    Tensor a = Tensor::from({1, 3}, {0.2f, -0.7f, 1.1f});
    Tensor b = Tensor::from({1, 3}, {1.2f, 0.3f, 2.1f});
    CHECK(double(prediction_loss(a, b, 2.0).item()) <= 1e-9);
    // And genuinely different distributions stay strictly positive.
    Tensor d = Tensor::from({1, 3}, {0.2f, -0.7f, 1.3f});
    CHECK(double(prediction_loss(a, d, 2.0).item()) > 1e-9);
}

TEST_CASE("prediction loss rejects shape mismatch") {
    Tensor a = Tensor::from({1, 3}, {1, 2, 3});
    Tensor b = Tensor::from({1, 2}, {1, 2});
    CHECK_THROWS_AS(prediction_loss(a, b, 2.0), ShapeError);
}

TEST_CASE("matching is the identity when student equals teacher") {
    Rng rng(7);
    const int layers = 4, d = 8;
    auto states = random_states(layers, 6, d, rng);
    std::vector<int> tset = {0, 1, 2, 3};
    std::vector<float> z_ffn(layers, 1.0f);
    LayerTransform id = LayerTransform::identity(d);
    LayerMap map = match_layers(states, states, id, tset, z_ffn, false);
    for (int i = 0; i < layers; ++i) CHECK(map.student_for_teacher[i] == i);
}

TEST_CASE("matching equals the exhaustive argmin oracle with tie-breaking") {
    Rng rng(1234);
    const int student_layers = 12, d = 16, rows = 4;
    std::vector<int> tset = {2, 5, 8, 11};
    for (int rep = 0; rep < 25; ++rep) {
        auto h_s = random_states(student_layers, rows, d, rng);
        std::vector<Tensor> h_t;
        for (size_t i = 0; i < tset.size(); ++i) h_t.push_back(randn({rows, d}, rng, 0.0, 1.0));
        std::vector<float> z_ffn(student_layers, 1.0f);
        for (int j = 0; j < student_layers; ++j)
            if ((rng() % 4) == 0) z_ffn[j] = 0.0f;

        LayerTransform id = LayerTransform::identity(d);
        LayerMap map = match_layers(h_s, h_t, id, tset, z_ffn, false);

        for (size_t ti = 0; ti < tset.size(); ++ti) {
            int best = -1;
            double best_val = std::numeric_limits<double>::infinity();
            for (int j = 0; j < student_layers; ++j) {
                if (!(z_ffn[j] > 0.0f)) continue;
                const double v = ref_mse(h_s[j], h_t[ti]);
                if (v < best_val) {
                    best_val = v;
                    best = j;
                }
            }
            CHECK(map.student_for_teacher[ti] == best);
        }
    }
}

TEST_CASE("monotonic matching under pigeonhole pressure") {
    Rng rng(55);
    const int student_layers = 6, d = 8, rows = 4;
    std::vector<int> tset = {0, 1, 2, 3};
    auto h_s = random_states(student_layers, rows, d, rng);
    std::vector<Tensor> h_t;
    for (size_t i = 0; i < tset.size(); ++i) h_t.push_back(randn({rows, d}, rng, 0.0, 1.0));
    std::vector<float> z_ffn(student_layers, 0.0f);
    z_ffn[1] = 1.0f;
    z_ffn[4] = 1.0f;  // only two unpruned student layers

    LayerTransform id = LayerTransform::identity(d);
    LayerMap map = match_layers(h_s, h_t, id, tset, z_ffn, true);
    CHECK(map.matched_count() <= 2);
    // Matched indices strictly decrease along descending teacher layers.
    int prev = student_layers;
    for (int ti = int(tset.size()) - 1; ti >= 0; --ti) {
        const int s = map.student_for_teacher[ti];
        if (s >= 0) {
            CHECK(s < prev);
            prev = s;
        }
    }
}

TEST_CASE("fixed matching maps each teacher layer to its own index when alive") {
    std::vector<int> tset = {0, 2, 3};
    std::vector<float> z_ffn = {1.0f, 0.0f, 0.0f, 0.5f};
    LayerMap map = fixed_layer_map(tset, z_ffn);
    CHECK(map.student_for_teacher == std::vector<int>{0, -1, 3});
}

TEST_CASE("no alive student layer leaves everything unmatched and the loss at zero") {
    Rng rng(56);
    auto h_s = random_states(3, 4, 8, rng);
    std::vector<Tensor> h_t = {randn({4, 8}, rng, 0.0, 1.0)};
    std::vector<int> tset = {0};
    std::vector<float> z_ffn(3, 0.0f);
    LayerTransform id = LayerTransform::identity(8);
    LayerMap map = match_layers(h_s, h_t, id, tset, z_ffn, false);
    CHECK(map.matched_count() == 0);
    CHECK(layer_loss(map, h_s, h_t).item() == 0.0f);
}

TEST_CASE("matching is invariant to positive rescaling of the distances") {
    Rng rng(57);
    const int layers = 5, d = 8, rows = 3;
    auto h_s = random_states(layers, rows, d, rng);
    std::vector<Tensor> h_t;
    std::vector<int> tset = {0, 1, 2};
    for (size_t i = 0; i < tset.size(); ++i) h_t.push_back(randn({rows, d}, rng, 0.0, 1.0));
    std::vector<float> z_ffn(layers, 1.0f);
    LayerTransform id = LayerTransform::identity(d);
    LayerMap base = match_layers(h_s, h_t, id, tset, z_ffn, false);

    // Scaling every state by the same positive factor rescales every MSE by
    // its square but cannot move any argmin.
    auto scale_all = [](const std::vector<Tensor>& v, float c) {
        std::vector<Tensor> out;
        for (const auto& t : v) out.push_back(affine(t, c, 0.0));
        return out;
    };
    LayerMap scaled = match_layers(scale_all(h_s, 3.5f), scale_all(h_t, 3.5f), id, tset, z_ffn, false);
    CHECK(base.student_for_teacher == scaled.student_for_teacher);
}

TEST_CASE("layer loss closed forms and 64-bit reference") {
    Rng rng(58);
    const int d = 8, rows = 4;

    SECTION("identical states with identity transform") {
        auto h = random_states(2, rows, d, rng);
        LayerMap map;
        map.teacher_set = {0, 1};
        map.student_for_teacher = {0, 1};
        CHECK(layer_loss(map, h, h).item() == 0.0f);
    }
    SECTION("constant offset c gives c squared") {
        Tensor h = randn({rows, d}, rng, 0.0, 1.0);
        Tensor shifted = affine(h, 1.0, 2.5);
        LayerMap map;
        map.teacher_set = {0};
        map.student_for_teacher = {0};
        CHECK(layer_loss(map, {h}, {shifted}).item() == Approx(2.5 * 2.5).epsilon(1e-5));
    }
    SECTION("random pair matches the reference MSE") {
        Tensor a = randn({rows, d}, rng, 0.0, 1.0);
        Tensor b = randn({rows, d}, rng, 0.0, 1.0);
        LayerMap map;
        map.teacher_set = {0};
        map.student_for_teacher = {0};
        CHECK(double(layer_loss(map, {a}, {b}).item()) == Approx(ref_mse(a, b)).margin(1e-6));
    }
}

TEST_CASE("combined loss arithmetic") {
    Tensor pred = Tensor::scalar(2.0f);
    Tensor layer = Tensor::scalar(4.0f);
    CHECK(combined_loss(pred, layer, 1.0).item() == 2.0f);
    CHECK(combined_loss(pred, layer, 0.0).item() == 4.0f);
    CHECK(combined_loss(pred, layer, 0.5).item() == 3.0f);
    CHECK_THROWS_AS(combined_loss(pred, layer, 1.5), UsageError);
}

TEST_CASE("combined loss gradient reaches the layer transform") {
    Rng rng(59);
    const int d = 8, rows = 4;
    LayerTransform tr = LayerTransform::identity(d);
    Tensor h_s = randn({rows, d}, rng, 0.0, 1.0);
    Tensor h_t = randn({rows, d}, rng, 0.0, 1.0);
    Tensor s_logits = randn({2, 3}, rng, 0.0, 1.0, true);
    Tensor t_logits = randn({2, 3}, rng, 0.0, 1.0);

    auto f = [&]() {
        Tensor transformed = matmul(h_s, tr.w);
        LayerMap map;
        map.teacher_set = {0};
        map.student_for_teacher = {0};
        Tensor l_layer = layer_loss(map, {transformed}, {h_t});
        Tensor l_pred = prediction_loss(s_logits, t_logits, 2.0);
        return combined_loss(l_pred, l_layer, 0.3);
    };
    const double err = grad_check(f, {tr.w, s_logits}, 0.001953125);
    CHECK(err < 1e-3);
}

TEST_CASE("matching work stays a small fraction of a forward pass") {
    ModelConfig cfg;  // default toy config: L=4, d=64, heads=4, d_f=256
    Rng rng(60);
    MaskableEncoder model = MaskableEncoder::init(cfg, rng);
    MaskValues open = MaskSet::all_ones(cfg.layers, cfg.heads, cfg.ffn_dim, cfg.hidden);

    const int batch = 8;
    std::vector<std::vector<int>> seqs;
    std::uniform_int_distribution<int> tok(0, cfg.vocab - 1);
    for (int b = 0; b < batch; ++b) {
        std::vector<int> s(cfg.max_seq);
        for (auto& t : s) t = tok(rng);
        seqs.push_back(std::move(s));
    }

    using clock = std::chrono::steady_clock;
    double forward_us = 0.0;
    std::vector<Tensor> transformed, teacher;
    {
        NoGradGuard ng;
        const auto t0 = clock::now();
        std::vector<std::vector<Tensor>> per_layer(cfg.layers);
        for (const auto& s : seqs) {
            EncoderOutput out = encoder_forward(model, s, open);
            for (int l = 0; l < cfg.layers; ++l) per_layer[l].push_back(out.hidden[l]);
        }
        for (int l = 0; l < cfg.layers; ++l) transformed.push_back(concat(per_layer[l], 0));
        forward_us = std::chrono::duration<double, std::micro>(clock::now() - t0).count();
        for (int l = 0; l < cfg.layers; ++l)
            teacher.push_back(randn({batch * cfg.max_seq, cfg.hidden}, rng, 0.0, 1.0));
    }

    std::vector<int> tset = {0, 1, 2, 3};
    std::vector<float> z_ffn(cfg.layers, 1.0f);
    // Warm, then take the best of several timings to tame scheduler noise.
    double match_us = 1e30;
    for (int rep = 0; rep < 5; ++rep) {
        const auto t0 = clock::now();
        LayerMap map = match_layers_transformed(transformed, teacher, tset, z_ffn, false);
        match_us = std::min(match_us, std::chrono::duration<double, std::micro>(clock::now() - t0).count());
        CHECK(map.student_for_teacher.size() == tset.size());
    }
    INFO("match " << match_us << " us vs forward " << forward_us << " us");
    CHECK(match_us < 0.10 * forward_us);
}
