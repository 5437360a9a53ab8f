#pragma once
// AdamW with decoupled weight decay and bias correction, plus the
// warmup+cosine learning-rate schedule. Deterministic: moments are keyed by
// tensor name and updated in the caller-supplied order.
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flexmerge/errors.hpp"
#include "flexmerge/tensor.hpp"

namespace flexmerge {

struct CosineSchedule {
    int warmup_steps = 100;
    int total_steps = 1000;
    double base_lr = 0.0009;
    double final_fraction = 0.1;
};

// Linear warmup to base_lr, cosine decay to base_lr*final_fraction, clamped
// past total_steps. lr is in (0, base_lr] for every step >= 0.
inline double cosine_lr(int64_t step, const CosineSchedule& s) {
    if (s.total_steps <= s.warmup_steps) throw ConfigError("cosine_lr: total <= warmup");
    if (s.final_fraction <= 0.0 || s.final_fraction > 1.0)
        throw ConfigError("cosine_lr: final fraction out of (0,1]");
    if (step < 0) throw ConfigError("cosine_lr: negative step");
    if (step < s.warmup_steps)
        return s.base_lr * static_cast<double>(step + 1) / s.warmup_steps;
    double fin = s.base_lr * s.final_fraction;
    if (step >= s.total_steps) return fin;
    double t = static_cast<double>(step - s.warmup_steps) / (s.total_steps - s.warmup_steps);
    return fin + (s.base_lr - fin) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.0;
    double epsilon = 1e-8;
    CosineSchedule schedule;
    int64_t step_count = 0; // completed updates

    struct Moments {
        std::vector<float> m, v;
    };
    std::map<std::string, Moments> moments; // trainable tensors only

    // One update over the given records, in order. Frozen records are
    // untouched even if they carry a stale grad slot.
    void step(const std::vector<TensorRecord*>& records) {
        double lr = cosine_lr(step_count, schedule);
        ++step_count;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        float b1 = static_cast<float>(beta1), b2 = static_cast<float>(beta2);
        float inv_bc1 = static_cast<float>(1.0 / bc1), inv_bc2 = static_cast<float>(1.0 / bc2);
        float flr = static_cast<float>(lr), wd = static_cast<float>(weight_decay);
        float eps = static_cast<float>(epsilon);
        for (TensorRecord* r : records) {
            if (!r->trainable) continue;
            if (r->grad.size() != r->values.size())
                throw ConfigError("adamw: missing gradient on trainable tensor '" + r->name + "'");
            Moments& mo = moments[r->name];
            if (mo.m.empty()) {
                mo.m.assign(r->values.size(), 0.f);
                mo.v.assign(r->values.size(), 0.f);
            }
            float* w = r->values.data();
            const float* g = r->grad.data();
            float* m = mo.m.data();
            float* v = mo.v.data();
            size_t n = r->values.size();
            for (size_t i = 0; i < n; ++i) {
                m[i] = b1 * m[i] + (1.f - b1) * g[i];
                v[i] = b2 * v[i] + (1.f - b2) * g[i] * g[i];
                float mhat = m[i] * inv_bc1;
                float vhat = v[i] * inv_bc2;
                w[i] -= flr * (mhat / (std::sqrt(vhat) + eps) + wd * w[i]);
            }
        }
    }
};

} // namespace flexmerge
