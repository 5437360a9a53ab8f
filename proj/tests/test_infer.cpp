#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "flexmerge/graph.hpp"
#include "flexmerge/infer.hpp"
#include "flexmerge/model.hpp"
#include "flexmerge/rng.hpp"
#include "flexmerge/tokenizer.hpp"

using namespace flexmerge;

namespace {

ModelConfig tiny_config(int top_k = 1) {
    ModelConfig c;
    c.n_layers = 2;
    c.hidden_dim = 16;
    c.n_heads = 2;
    c.ffn_dim = 32;
    c.vocab_size = kVocabSize;
    c.max_seq_len = 32;
    c.top_k = top_k;
    return c;
}

std::vector<int> random_bytes(int n, uint64_t seed) {
    Rng rng(seed);
    std::vector<int> ids(n);
    for (auto& i : ids) i = static_cast<int>(rng.next_below(256));
    return ids;
}

// Reference decoder: one full forward per step, argmax of the last position,
// sliding the window by hand.
std::vector<int> greedy_oracle(MoeModel& m, std::vector<int> ctx, int max_new) {
    std::vector<int> out;
    for (int s = 0; s < max_new; ++s) {
        int T = std::min(static_cast<int>(ctx.size()), m.config.max_seq_len);
        std::vector<int> ids(ctx.end() - T, ctx.end());
        Graph<float> g;
        auto h = build_forward(g, m, ids, 1, T);
        const auto& lg = g.node(h.logits).val;
        const float* row = lg.data() + static_cast<size_t>(T - 1) * m.config.vocab_size;
        int best = 0;
        for (int v = 1; v < m.config.vocab_size; ++v)
            if (row[v] > row[best]) best = v;
        ctx.push_back(best);
        out.push_back(best);
    }
    return out;
}

} // namespace

TEST_CASE("nucleus cut keeps the smallest prefix reaching top_p") {
    // softmax of these logits is exactly {0.6, 0.3, 0.1}
    std::vector<float> logits = {std::log(0.6f), std::log(0.3f), std::log(0.1f)};
    GenParams p;
    p.top_k = 0;
    p.top_p = 0.8; // 0.6 < 0.8 <= 0.9: id 2 falls outside the nucleus
    p.temperature = 1.0;

    Rng rng(7);
    int counts[3] = {0, 0, 0};
    for (int i = 0; i < 3000; ++i) ++counts[sample_token(logits, p, rng)];
    CHECK(counts[2] == 0);
    CHECK(counts[0] > 0);
    CHECK(counts[1] > 0);
    // renormalized nucleus: P(0) = 0.6/0.9 = 2/3
    double f0 = counts[0] / 3000.0;
    CHECK(f0 == doctest::Approx(2.0 / 3.0).epsilon(0.08));

    // top_p = 1 keeps everything
    p.top_p = 1.0;
    int c2 = 0;
    for (int i = 0; i < 3000; ++i)
        if (sample_token(logits, p, rng) == 2) ++c2;
    CHECK(c2 > 0);
}

TEST_CASE("top_k=1 is greedy; greedy breaks ties to the lowest id") {
    std::vector<float> logits = {0.3f, 1.7f, -0.2f, 1.1f};
    GenParams topk1;
    topk1.top_k = 1;
    topk1.top_p = 1.0;
    Rng rng(3);
    for (int i = 0; i < 50; ++i) CHECK(sample_token(logits, topk1, rng) == 1);

    GenParams greedy;
    greedy.greedy = true;
    CHECK(sample_token(logits, greedy, rng) == 1);

    std::vector<float> tied = {1.0f, 2.0f, 2.0f};
    CHECK(sample_token(tied, greedy, rng) == 1);
    for (int i = 0; i < 50; ++i) CHECK(sample_token(tied, topk1, rng) == 1);
}

TEST_CASE("temperature widens or collapses the sampling distribution") {
    std::vector<float> logits = {2.0f, 1.0f, 0.0f};
    GenParams p;
    p.top_k = 0;
    p.top_p = 1.0;

    p.temperature = 100.0; // near-uniform
    Rng rng(11);
    std::set<int> seen;
    for (int i = 0; i < 300; ++i) seen.insert(sample_token(logits, p, rng));
    CHECK(seen.size() == 3);

    p.temperature = 0.01; // collapses onto the argmax
    for (int i = 0; i < 300; ++i) CHECK(sample_token(logits, p, rng) == 0);
}

TEST_CASE("sampling parameter validation") {
    std::vector<float> logits = {0.0f, 1.0f};
    Rng rng(1);
    GenParams p;
    p.temperature = 0.0;
    CHECK_THROWS_AS(sample_token(logits, p, rng), ConfigError);
    p = GenParams{};
    p.top_p = 0.0;
    CHECK_THROWS_AS(sample_token(logits, p, rng), ConfigError);
    p = GenParams{};
    p.top_p = 1.5;
    CHECK_THROWS_AS(sample_token(logits, p, rng), ConfigError);
    p = GenParams{};
    p.top_k = -1;
    CHECK_THROWS_AS(sample_token(logits, p, rng), ConfigError);
    CHECK_THROWS_AS(sample_token({}, GenParams{}, rng), InputError);
}

TEST_CASE("generation is deterministic in the seed") {
    auto m = MoeModel::create(tiny_config(1), {"pub"}, 5);
    auto prefix = random_bytes(8, 2);
    GenParams p; // defaults: top-k 50, top-p 0.95, temp 1.0

    auto a = generate(m, prefix, 16, p, 123);
    auto b = generate(m, prefix, 16, p, 123);
    auto c = generate(m, prefix, 16, p, 124);
    CHECK(a == b);
    CHECK(a != c);
    CHECK(a.size() == 16);
    for (int id : a) {
        CHECK(id >= 0);
        CHECK(id < kVocabSize);
    }

    GenParams g;
    g.greedy = true;
    CHECK(generate(m, prefix, 8, g, 1) == generate(m, prefix, 8, g, 999));
}

TEST_CASE("greedy generation matches the step-by-step argmax oracle") {
    auto m = MoeModel::create(tiny_config(1), {"pub"}, 5);
    GenParams g;
    g.greedy = true;

    auto prefix = random_bytes(6, 9);
    CHECK(generate(m, prefix, 10, g, 0) == greedy_oracle(m, prefix, 10));

    // context longer than max_seq_len: the window slides
    auto long_prefix = random_bytes(30, 10); // max_seq is 32; crosses during generation
    auto got = generate(m, long_prefix, 12, g, 0);
    CHECK(got == greedy_oracle(m, long_prefix, 12));
    CHECK(got.size() == 12);
}

TEST_CASE("batched generation equals one-at-a-time generation bit-exactly") {
    auto m = MoeModel::create(tiny_config(1), {"pub"}, 5);
    auto prefix = random_bytes(8, 4);
    GenParams p;

    std::vector<uint64_t> seeds = {11, 22, 33};
    auto rows = generate_batch(m, prefix, 12, p, seeds);
    REQUIRE(rows.size() == 3);
    for (size_t i = 0; i < seeds.size(); ++i)
        CHECK(rows[i] == generate(m, prefix, 12, p, seeds[i]));
}

TEST_CASE("generation edge cases") {
    auto m = MoeModel::create(tiny_config(1), {"pub"}, 5);
    GenParams p;
    CHECK_THROWS_AS(generate(m, {}, 4, p, 1), InputError);
    CHECK_THROWS_AS(generate(m, {1, 2}, -1, p, 1), ConfigError);
    CHECK(generate(m, {1, 2}, 0, p, 1).empty());
    CHECK_THROWS_AS(generate_batch(m, {1, 2}, 4, p, {}), ConfigError);
}
