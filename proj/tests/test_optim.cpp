#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "flexmerge/optim.hpp"

using namespace flexmerge;

namespace {

CosineSchedule flat(double lr) {
    // warmup of one step reaches lr immediately; long tail keeps it near lr
    return CosineSchedule{1, 1000000, lr, 1.0};
}

} // namespace

TEST_CASE("first update matches the hand-computed value") {
    // w=1, g=1, lr=0.1: m-hat = v-hat = 1, so w <- 1 - 0.1/(1+eps) = 0.9
    TensorRecord w("w", {1}, true);
    w.values = {1.f};
    w.grad = {1.f};
    AdamW opt;
    opt.schedule = flat(0.1);
    opt.step({&w});
    CHECK(w.values[0] == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(opt.step_count == 1);
}

TEST_CASE("zero gradient with zero weight decay is an exact fixed point") {
    TensorRecord w("w", {3}, true);
    w.values = {0.25f, -1.5f, 3.75f};
    w.grad = {0.f, 0.f, 0.f};
    auto before = w.values;
    AdamW opt;
    opt.schedule = flat(0.01);
    for (int i = 0; i < 5; ++i) opt.step({&w});
    CHECK(w.values == before);
}

TEST_CASE("decoupled weight decay shrinks weights independently of the gradient") {
    TensorRecord w("w", {1}, true);
    w.values = {2.f};
    w.grad = {0.f};
    AdamW opt;
    opt.weight_decay = 0.5;
    opt.schedule = flat(0.1);
    opt.step({&w});
    // update = lr * wd * w = 0.1 * 0.5 * 2 = 0.1
    CHECK(w.values[0] == doctest::Approx(1.9).epsilon(1e-6));
}

TEST_CASE("frozen records are untouched even with a stale gradient slot") {
    TensorRecord w("frozen", {2}, false);
    w.values = {1.f, 2.f};
    w.grad = {5.f, 5.f};
    auto before = w.values;
    AdamW opt;
    opt.schedule = flat(0.1);
    opt.step({&w});
    CHECK(w.values == before);
    CHECK(opt.moments.find("frozen") == opt.moments.end());
}

TEST_CASE("a trainable record without a gradient is a configuration error") {
    TensorRecord w("w", {2}, true);
    AdamW opt;
    opt.schedule = flat(0.1);
    CHECK_THROWS_AS(opt.step({&w}), ConfigError);
}

TEST_CASE("two identical runs produce bit-identical weights") {
    auto run = [] {
        TensorRecord w("w", {4}, true);
        w.values = {0.1f, -0.2f, 0.3f, -0.4f};
        AdamW opt;
        opt.schedule = CosineSchedule{2, 20, 0.05, 0.1};
        for (int s = 0; s < 10; ++s) {
            w.grad.assign(4, 0.f);
            for (int i = 0; i < 4; ++i) w.grad[i] = 0.01f * (i + 1) * (s % 3 == 0 ? -1.f : 1.f);
            opt.step({&w});
        }
        return w.values;
    };
    CHECK(run() == run());
}

TEST_CASE("cosine schedule: warmup ramp, endpoints, midpoint, and clamp") {
    CosineSchedule s{10, 110, 1.0, 0.1};
    CHECK(cosine_lr(0, s) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(cosine_lr(4, s) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(cosine_lr(9, s) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cosine_lr(10, s) == doctest::Approx(1.0).epsilon(1e-12));
    // halfway through decay: fin + (base-fin)/2 = 0.1 + 0.45
    CHECK(cosine_lr(60, s) == doctest::Approx(0.55).epsilon(1e-9));
    CHECK(cosine_lr(110, s) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(cosine_lr(100000, s) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("cosine schedule rejects malformed configurations") {
    CHECK_THROWS_AS(cosine_lr(0, CosineSchedule{10, 10, 1.0, 0.1}), ConfigError);
    CHECK_THROWS_AS(cosine_lr(0, CosineSchedule{10, 20, 1.0, 0.0}), ConfigError);
    CHECK_THROWS_AS(cosine_lr(0, CosineSchedule{10, 20, 1.0, 1.5}), ConfigError);
    CHECK_THROWS_AS(cosine_lr(-1, CosineSchedule{10, 20, 1.0, 0.1}), ConfigError);
}

TEST_CASE("moments are tracked per tensor name for trainables only") {
    TensorRecord a("a", {2}, true), b("b", {2}, true);
    a.values = {1.f, 1.f};
    b.values = {1.f, 1.f};
    a.grad = {0.5f, 0.5f};
    b.grad = {0.5f, 0.5f};
    AdamW opt;
    opt.schedule = flat(0.01);
    opt.step({&a, &b});
    CHECK(opt.moments.size() == 2);
    CHECK(opt.moments.count("a") == 1);
    CHECK(opt.moments.count("b") == 1);
}
