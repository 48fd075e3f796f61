#pragma once

// Adam with independent parameter groups (weights, mask log-alphas, layer
// transform, Lagrangian multipliers). A group may maximize, which flips the
// update direction; global-norm clipping runs across all groups.

#include <cmath>
#include <string>
#include <vector>

#include "prunekit/tensor.hpp"

namespace prunekit {

struct AdamGroup {
    std::string name;
    std::vector<Tensor> params;
    double lr = 1e-3;
    bool maximize = false;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<std::vector<float>> m, v;
};

class Adam {
  public:
    void add_group(std::string name, std::vector<Tensor> params, double lr, bool maximize = false) {
        AdamGroup g;
        g.name = std::move(name);
        g.params = std::move(params);
        g.lr = lr;
        g.maximize = maximize;
        for (const auto& p : g.params) {
            g.m.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
            g.v.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
        }
        groups_.push_back(std::move(g));
    }

    AdamGroup* find_group(const std::string& name) {
        for (auto& g : groups_)
            if (g.name == name) return &g;
        return nullptr;
    }
    std::vector<AdamGroup>& groups() { return groups_; }
    const std::vector<AdamGroup>& groups() const { return groups_; }
    long step_count() const { return step_count_; }
    void set_step_count(long s) { step_count_ = s; }

    void zero_grad() {
        for (auto& g : groups_)
            for (auto& p : g.params) p.zero_grad();
    }

    // Scales all gradients so their joint L2 norm is at most max_norm.
    // Returns the pre-clip norm.
    double clip_global_norm(double max_norm) {
        double sq = 0.0;
        for (auto& g : groups_)
            for (auto& p : g.params)
                for (long i = 0; i < p.numel(); ++i) {
                    const double gi = p.grad_at(i);
                    sq += gi * gi;
                }
        const double norm = std::sqrt(sq);
        if (norm > max_norm && norm > 0.0) {
            const float scale = static_cast<float>(max_norm / norm);
            for (auto& g : groups_)
                for (auto& p : g.params) {
                    auto& grad = p.node()->grad;
                    for (auto& gi : grad) gi *= scale;
                }
        }
        return norm;
    }

    void step() {
        ++step_count_;
        const double t = static_cast<double>(step_count_);
        for (auto& g : groups_) {
            const double bc1 = 1.0 - std::pow(g.beta1, t);
            const double bc2 = 1.0 - std::pow(g.beta2, t);
            for (size_t pi = 0; pi < g.params.size(); ++pi) {
                Tensor& p = g.params[pi];
                if (p.grad().empty()) continue;
                auto& m = g.m[pi];
                auto& v = g.v[pi];
                float* x = p.mutable_data();
                for (long i = 0; i < p.numel(); ++i) {
                    double gi = p.grad_at(i);
                    if (g.maximize) gi = -gi;
                    m[i] = static_cast<float>(g.beta1 * m[i] + (1.0 - g.beta1) * gi);
                    v[i] = static_cast<float>(g.beta2 * v[i] + (1.0 - g.beta2) * gi * gi);
                    const double mhat = m[i] / bc1;
                    const double vhat = v[i] / bc2;
                    x[i] = static_cast<float>(x[i] - g.lr * mhat / (std::sqrt(vhat) + g.eps));
                }
            }
        }
    }

  private:
    std::vector<AdamGroup> groups_;
    long step_count_ = 0;
};

}  // namespace prunekit
