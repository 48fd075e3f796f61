#pragma once

// Central finite-difference verification of analytic gradients. The numeric
// side divides by the actually-represented parameter gap and accumulates in
// 64-bit, so the oracle stays honest even though parameters live in floats.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "prunekit/tensor.hpp"

namespace prunekit {

struct GradCheckReport {
    double max_rel_err = 0.0;
    size_t worst_param = 0;
    long worst_coord = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

// f must rebuild its graph from the current parameter values on every call and
// be deterministic (freeze any random draws before checking).
inline GradCheckReport grad_check_report(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                         double eps = 0.0078125) {
    if (eps < 1e-4 || eps > 1e-2)
        throw UsageError("grad_check: step must lie in [1e-4, 1e-2], got " + std::to_string(eps));
    for (auto& p : params) p.zero_grad();
    Tensor out = f();
    if (!out.is_scalar()) throw ShapeError("grad_check: f must return a scalar");
    backward(out);

    std::vector<std::vector<float>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        std::vector<float> g(static_cast<size_t>(p.numel()), 0.0f);
        for (long i = 0; i < p.numel(); ++i) g[i] = p.grad_at(i);
        analytic.push_back(std::move(g));
    }

    GradCheckReport rep;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        for (long i = 0; i < p.numel(); ++i) {
            const float saved = p.data()[i];
            const float hi = static_cast<float>(double(saved) + eps);
            const float lo = static_cast<float>(double(saved) - eps);
            p.mutable_data()[i] = hi;
            const double f_hi = f().item();
            p.mutable_data()[i] = lo;
            const double f_lo = f().item();
            p.mutable_data()[i] = saved;
            const double gap = double(hi) - double(lo);
            const double numeric = (f_hi - f_lo) / gap;
            const double a = analytic[pi][i];
            if (!std::isfinite(numeric) || !std::isfinite(a))
                throw NumericError("grad_check: non-finite value at param " + std::to_string(pi) +
                                   " coord " + std::to_string(i));
            const double rel = std::fabs(a - numeric) / std::max(1.0, std::fabs(a));
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = pi;
                rep.worst_coord = i;
                rep.analytic = a;
                rep.numeric = numeric;
            }
        }
    }
    return rep;
}

inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                         double eps = 0.0078125) {
    return grad_check_report(f, std::move(params), eps).max_rel_err;
}

}  // namespace prunekit
