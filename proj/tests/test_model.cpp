#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
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

std::string model_hash(MoeModel& m) {
    Sha256 h;
    for (auto* t : m.all_tensors()) h.update(t->values.data(), t->values.size() * sizeof(float));
    return h.hex();
}

} // namespace

TEST_CASE("config invariants are enforced") {
    ModelConfig c = tiny_config();
    c.top_k = 3;
    CHECK_THROWS_AS(MoeModel::create(c, {"pub", "a"}, 1), ConfigError);
    c = tiny_config();
    c.n_heads = 3; // 16 % 3 != 0
    CHECK_THROWS_AS(MoeModel::create(c, {"pub"}, 1), ConfigError);
    c = tiny_config();
    c.n_layers = 0;
    CHECK_THROWS_AS(MoeModel::create(c, {"pub"}, 1), ConfigError);
    CHECK_THROWS_AS(MoeModel::create(tiny_config(), {"alpha"}, 1), ConfigError);
}

TEST_CASE("model creation is deterministic in the seed") {
    auto a = MoeModel::create(tiny_config(), {"pub", "x"}, 42);
    auto b = MoeModel::create(tiny_config(), {"pub", "x"}, 42);
    auto c = MoeModel::create(tiny_config(), {"pub", "x"}, 43);
    CHECK(model_hash(a) == model_hash(b));
    CHECK(model_hash(a) != model_hash(c));
    CHECK(a.n_experts() == 2);
    CHECK(a.expert_index("x") == 1);
    CHECK(a.expert_index("missing") == -1);
}

TEST_CASE("single-expert forward: finite logits, gate exactly 1") {
    auto m = MoeModel::create(tiny_config(), {"pub"}, 7);
    int B = 2, T = 8;
    std::vector<int> ids(B * T, kPad); // degenerate all-PAD input
    Graph<float> g;
    auto h = build_forward(g, m, ids, B, T);
    const auto& logits = g.node(h.logits);
    CHECK(logits.r == B * T);
    CHECK(logits.c == kVocabSize);
    for (float v : logits.val) CHECK(std::isfinite(v));
    for (int gn : h.gates)
        for (int i = 0; i < g.node(gn).r; ++i) CHECK(g.node(gn).val[i] == 1.0f);
}

TEST_CASE("forward is bit-identical across graph builds") {
    auto m = MoeModel::create(tiny_config(2), {"pub", "x"}, 9);
    int B = 3, T = 16;
    auto ids = random_bytes(B * T, 5);
    Graph<float> g1, g2;
    auto h1 = build_forward(g1, m, ids, B, T);
    auto h2 = build_forward(g2, m, ids, B, T);
    const auto &l1 = g1.node(h1.logits), &l2 = g2.node(h2.logits);
    CHECK(std::memcmp(l1.val.data(), l2.val.data(), l1.val.size() * sizeof(float)) == 0);
}

TEST_CASE("untrained perplexity on random bytes is near vocab size") {
    auto m = MoeModel::create(tiny_config(), {"pub"}, 11);
    int B = 4, T = 32;
    auto ids = random_bytes(B * T, 6);
    auto targets = random_bytes(B * T, 7);
    Graph<float> g;
    auto h = build_forward(g, m, ids, B, T, targets, std::vector<uint8_t>(B * T, 1));
    double ppl = std::exp(static_cast<double>(g.node(h.loss).val[0]));
    CHECK(ppl > 0.9 * kVocabSize);
    CHECK(ppl < 1.1 * kVocabSize);
}

TEST_CASE("identical router rows split gates evenly") {
    auto m = MoeModel::create(tiny_config(2), {"pub", "x"}, 13);
    for (int l = 0; l < m.config.n_layers; ++l)
        m.tensor(MoeModel::router_row(l, "x")).values =
            m.tensor(MoeModel::router_row(l, "pub")).values;
    int B = 2, T = 8;
    auto ids = random_bytes(B * T, 8);
    Graph<float> g;
    auto h = build_forward(g, m, ids, B, T);
    for (int gn : h.gates) {
        const auto& n = g.node(gn);
        for (float v : n.val) CHECK(v == 0.5f);
    }
}

TEST_CASE("gates sum to 1 and are positive over the selected set") {
    ModelConfig c = tiny_config(2);
    auto m = MoeModel::create(c, {"pub", "a", "b"}, 17);
    int B = 2, T = 16;
    auto ids = random_bytes(B * T, 9);
    Graph<float> g;
    auto h = build_forward(g, m, ids, B, T);
    for (int gn : h.gates) {
        const auto& n = g.node(gn);
        for (int i = 0; i < n.r; ++i) {
            double sum = 0.0;
            int nonzero = 0;
            for (int e = 0; e < n.c; ++e) {
                float v = n.val[static_cast<size_t>(i) * n.c + e];
                CHECK(v >= 0.f);
                if (v > 0.f) ++nonzero;
                sum += v;
            }
            CHECK(nonzero == c.top_k);
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
}

TEST_CASE("with top_k = n_experts and zero biases the mixture is full softmax") {
    auto m = MoeModel::create(tiny_config(3), {"pub", "a", "b"}, 19);
    int B = 1, T = 8;
    auto ids = random_bytes(B * T, 10);
    Graph<float> g;
    auto h = build_forward(g, m, ids, B, T);
    for (int gn : h.gates) {
        const auto& n = g.node(gn);
        // all experts selected in every row; gate ordering matches logits
        for (int i = 0; i < n.r; ++i) {
            double sum = 0.0;
            for (int e = 0; e < n.c; ++e) {
                CHECK(n.val[static_cast<size_t>(i) * n.c + e] > 0.f);
                sum += n.val[static_cast<size_t>(i) * n.c + e];
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
}

TEST_CASE("select_experts: plain top-k, bias flip, tie-breaks") {
    CHECK(select_experts({3.f, 1.f, 2.f}, {0, 0, 0}, 2) == std::vector<int>{0, 2});
    CHECK(select_experts({1.0f, 1.2f}, {0, -0.5}, 1) == std::vector<int>{0});
    CHECK(select_experts({0.7f, 0.7f, 0.7f}, {0, 0, 0}, 2) == std::vector<int>{0, 1});
    const double inf = std::numeric_limits<double>::infinity();
    CHECK(select_experts({1.f, 9.f}, {0, -inf}, 2) == std::vector<int>{0});
    CHECK_THROWS_AS(select_experts({1.f}, {0, 0}, 1), ConfigError);
    CHECK_THROWS_AS(select_experts({1.f, 2.f}, {0, 0}, 3), ConfigError);
}

TEST_CASE("lowering an expert's bias never increases its selections") {
    auto m = MoeModel::create(tiny_config(2), {"pub", "a", "b"}, 23);
    int B = 4, T = 24;
    auto ids = random_bytes(B * T, 11);
    int64_t prev = -1;
    for (double b : {0.0, -0.5, -1.0, -2.0}) {
        m.biases[1] = b;
        Graph<float> g;
        auto h = build_forward(g, m, ids, B, T);
        auto tr = read_routing_trace(g, h, m.n_experts());
        int64_t count = 0;
        for (const auto& layer : tr.selections) count += layer[1];
        if (prev >= 0) CHECK(count <= prev);
        prev = count;
    }
}

TEST_CASE("routing trace counts selections and normalizes fractions") {
    auto m = MoeModel::create(tiny_config(2), {"pub", "a"}, 29);
    int B = 2, T = 8;
    auto ids = random_bytes(B * T, 12);
    Graph<float> g;
    auto h = build_forward(g, m, ids, B, T);
    auto tr = read_routing_trace(g, h, m.n_experts());
    CHECK(tr.tokens == B * T);
    auto fr = tr.fractions();
    REQUIRE(fr.size() == static_cast<size_t>(m.config.n_layers));
    for (const auto& layer : fr) {
        double sum = 0.0;
        for (double f : layer) sum += f;
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
    // top_k=2 of 2 experts: every row selects both
    for (const auto& layer : tr.selections)
        for (int64_t cnt : layer) CHECK(cnt == B * T);

    // masked rows drop out of the counts
    std::vector<uint8_t> row_mask(B * T, 1);
    row_mask[0] = row_mask[1] = 0;
    auto tr2 = read_routing_trace(g, h, m.n_experts(), row_mask);
    CHECK(tr2.tokens == B * T - 2);
}

TEST_CASE("overlong and malformed inputs are rejected") {
    auto m = MoeModel::create(tiny_config(), {"pub"}, 31);
    Graph<float> g;
    CHECK_THROWS_AS(build_forward(g, m, std::vector<int>(40, 1), 1, 40), InputError);
    CHECK_THROWS_AS(build_forward(g, m, std::vector<int>(7, 1), 1, 8), ConfigError);
    CHECK_THROWS_AS(build_forward(g, m, std::vector<int>(8, kVocabSize), 1, 8), InputError);
}
