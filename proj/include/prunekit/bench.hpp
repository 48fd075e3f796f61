#pragma once

// Latency comparison between two models that compute the same function. The
// probe gate refuses to time models whose logits disagree, so a reported
// speedup always refers to identical computations in different physical forms.

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "prunekit/common.hpp"
#include "prunekit/compact.hpp"

namespace prunekit {

struct BenchSpec {
    int batch = 32;
    int seq_len = 32;
    int warmup_iters = 20;
    int measured_iters = 200;
    int probe_sequences = 8;
    double gate_tolerance = 1e-5;
    std::uint64_t seed = 1234;
};

struct LatencyStats {
    double median_us = 0.0;
    double p10_us = 0.0;
    double p90_us = 0.0;
};

struct LatencyResult {
    int batch = 0;
    int seq_len = 0;
    int warmup_iters = 0;
    int measured_iters = 0;
    LatencyStats dense, compact;
    double speedup = 0.0;
    double probe_max_abs_diff = 0.0;

    nlohmann::json to_json() const {
        auto stats = [](const LatencyStats& s) {
            return nlohmann::json{{"median_us", s.median_us}, {"p10_us", s.p10_us}, {"p90_us", s.p90_us}};
        };
        return nlohmann::json{{"batch", batch},
                              {"seq_len", seq_len},
                              {"warmup_iters", warmup_iters},
                              {"measured_iters", measured_iters},
                              {"dense", stats(dense)},
                              {"compact", stats(compact)},
                              {"speedup", speedup},
                              {"probe_max_abs_diff", probe_max_abs_diff}};
    }

    static LatencyResult from_json(const nlohmann::json& j) {
        LatencyResult r;
        r.batch = j.at("batch");
        r.seq_len = j.at("seq_len");
        r.warmup_iters = j.at("warmup_iters");
        r.measured_iters = j.at("measured_iters");
        auto stats = [](const nlohmann::json& s) {
            return LatencyStats{s.at("median_us"), s.at("p10_us"), s.at("p90_us")};
        };
        r.dense = stats(j.at("dense"));
        r.compact = stats(j.at("compact"));
        r.speedup = j.at("speedup");
        r.probe_max_abs_diff = j.at("probe_max_abs_diff");
        return r;
    }
};

namespace detail {

inline double percentile(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    const double x = p * double(v.size() - 1);
    const size_t i = static_cast<size_t>(x);
    const size_t j = std::min(i + 1, v.size() - 1);
    const double a = x - double(i);
    return v[i] * (1.0 - a) + v[j] * a;
}

}  // namespace detail

// Measures single-threaded wall-clock per batch forward for both models.
// Throws EquivalenceError when the probe logits differ beyond tolerance.
inline LatencyResult bench(const CompactModel& dense, const CompactModel& compact, const BenchSpec& spec) {
    if (dense.vocab != compact.vocab || dense.classes != compact.classes)
        throw EquivalenceError("bench: models disagree on vocab or class count");
    const int seq_len = std::min({spec.seq_len, dense.max_seq, compact.max_seq});

    Rng rng(spec.seed);
    std::uniform_int_distribution<int> tok(0, dense.vocab - 1);
    auto make_batch = [&](int n) {
        std::vector<std::vector<int>> batch(n);
        for (auto& s : batch) {
            s.resize(seq_len);
            for (auto& t : s) t = tok(rng);
        }
        return batch;
    };

    const auto probe = make_batch(spec.probe_sequences);
    double worst = 0.0;
    for (const auto& s : probe) {
        const auto a = dense.forward(s);
        const auto b = compact.forward(s);
        for (size_t j = 0; j < a.size(); ++j) worst = std::max(worst, std::fabs(double(a[j]) - double(b[j])));
    }
    if (worst > spec.gate_tolerance)
        throw EquivalenceError("bench: probe logits differ by " + std::to_string(worst) +
                               " (tolerance " + std::to_string(spec.gate_tolerance) +
                               "); refusing to benchmark unequal computations");

    const auto batch = make_batch(spec.batch);
    using clock = std::chrono::steady_clock;
    auto time_one = [&](const CompactModel& m) {
        double acc = 0.0;
        for (const auto& s : batch) acc += m.forward(s)[0];
        (void)acc;
    };
    auto run = [&](const CompactModel& m) {
        for (int i = 0; i < spec.warmup_iters; ++i) time_one(m);
        std::vector<double> us;
        us.reserve(spec.measured_iters);
        for (int i = 0; i < spec.measured_iters; ++i) {
            const auto t0 = clock::now();
            time_one(m);
            us.push_back(std::chrono::duration<double, std::micro>(clock::now() - t0).count());
        }
        LatencyStats st;
        st.median_us = detail::percentile(us, 0.5);
        st.p10_us = detail::percentile(us, 0.10);
        st.p90_us = detail::percentile(us, 0.90);
        return st;
    };

    LatencyResult result;
    result.batch = spec.batch;
    result.seq_len = seq_len;
    result.warmup_iters = spec.warmup_iters;
    result.measured_iters = spec.measured_iters;
    result.probe_max_abs_diff = worst;
    result.dense = run(dense);
    result.compact = run(compact);
    result.speedup = result.dense.median_us / result.compact.median_us;
    return result;
}

}  // namespace prunekit
