#include "flexmerge/infer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flexmerge/errors.hpp"
#include "flexmerge/graph.hpp"

namespace flexmerge {

namespace {

void check_params(const GenParams& p) {
    if (p.greedy) return;
    if (!(p.temperature > 0.0)) throw ConfigError("sampling: temperature must be > 0");
    if (p.top_k < 0) throw ConfigError("sampling: top_k must be >= 0");
    if (!(p.top_p > 0.0 && p.top_p <= 1.0)) throw ConfigError("sampling: top_p must be in (0, 1]");
}

int argmax_low(const std::vector<float>& v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) best = i;
    return best;
}

} // namespace

int sample_token(const std::vector<float>& logits, const GenParams& p, Rng& rng) {
    if (logits.empty()) throw InputError("sampling: empty logit row");
    check_params(p);
    if (p.greedy) return argmax_low(logits);

    const int vocab = static_cast<int>(logits.size());
    std::vector<int> order(static_cast<size_t>(vocab));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)];
    });
    const int keep_k = (p.top_k == 0) ? vocab : std::min(p.top_k, vocab);

    // Softmax over the top-k survivors at the given temperature. The order is
    // already probability-descending, so the nucleus cut is a prefix scan.
    const double lmax = static_cast<double>(logits[static_cast<size_t>(order[0])]);
    std::vector<double> probs(static_cast<size_t>(keep_k));
    double total = 0.0;
    for (int i = 0; i < keep_k; ++i) {
        double z = (static_cast<double>(logits[static_cast<size_t>(order[static_cast<size_t>(i)])]) -
                    lmax) /
                   p.temperature;
        probs[static_cast<size_t>(i)] = std::exp(z);
        total += probs[static_cast<size_t>(i)];
    }
    int keep_p = keep_k;
    if (p.top_p < 1.0) {
        double cum = 0.0;
        for (int i = 0; i < keep_k; ++i) {
            cum += probs[static_cast<size_t>(i)] / total;
            if (cum >= p.top_p) {
                keep_p = i + 1; // the crossing token stays in the support
                break;
            }
        }
    }
    double kept_total = 0.0;
    for (int i = 0; i < keep_p; ++i) kept_total += probs[static_cast<size_t>(i)];

    const double u = rng.next_double() * kept_total;
    double cum = 0.0;
    for (int i = 0; i < keep_p; ++i) {
        cum += probs[static_cast<size_t>(i)];
        if (u < cum) return order[static_cast<size_t>(i)];
    }
    return order[static_cast<size_t>(keep_p - 1)]; // u == kept_total rounding
}

std::vector<std::vector<int>> generate_batch(MoeModel& m, const std::vector<int>& prefix,
                                             int max_new, const GenParams& p,
                                             const std::vector<uint64_t>& seeds) {
    if (prefix.empty()) throw InputError("generate: prefix must be nonempty");
    if (max_new < 0) throw ConfigError("generate: max_new must be >= 0");
    if (seeds.empty()) throw ConfigError("generate: at least one seed required");
    check_params(p);

    const int B = static_cast<int>(seeds.size());
    const int vocab = m.config.vocab_size;
    const int cap = m.config.max_seq_len;
    std::vector<std::vector<int>> history(static_cast<size_t>(B), prefix);
    std::vector<std::vector<int>> out(static_cast<size_t>(B));
    std::vector<Rng> rngs;
    rngs.reserve(seeds.size());
    for (uint64_t s : seeds) rngs.emplace_back(s);

    std::vector<int> ids;
    std::vector<float> row(static_cast<size_t>(vocab));
    for (int step = 0; step < max_new; ++step) {
        const int len = static_cast<int>(history[0].size());
        const int T = std::min(len, cap);
        ids.resize(static_cast<size_t>(B) * static_cast<size_t>(T));
        for (int b = 0; b < B; ++b)
            std::copy(history[static_cast<size_t>(b)].end() - T, history[static_cast<size_t>(b)].end(),
                      ids.begin() + static_cast<size_t>(b) * static_cast<size_t>(T));

        Graph<float> g;
        ForwardHandles h = build_forward(g, m, ids, B, T);
        const auto& logits = g.node(h.logits).val; // [B*T, vocab]
        for (int b = 0; b < B; ++b) {
            const float* src =
                logits.data() + (static_cast<size_t>(b) * T + static_cast<size_t>(T - 1)) * vocab;
            std::copy(src, src + vocab, row.begin());
            int id = sample_token(row, p, rngs[static_cast<size_t>(b)]);
            history[static_cast<size_t>(b)].push_back(id);
            out[static_cast<size_t>(b)].push_back(id);
        }
    }
    return out;
}

std::vector<int> generate(MoeModel& m, const std::vector<int>& prefix, int max_new,
                          const GenParams& p, uint64_t seed) {
    return generate_batch(m, prefix, max_new, p, {seed}).front();
}

} // namespace flexmerge
