#pragma once
// Finite-difference gradient oracle shared by the unit tests and the
// acceptance gate. Builders construct a scalar loss over a set of records; the
// harness compares analytic gradients against central differences (64-bit).
#include <functional>
#include <vector>

#include "flexmerge/graph.hpp"
#include "flexmerge/rng.hpp"
#include "flexmerge/tensor.hpp"

namespace flexmerge::testing {

// Builds a loss node over the given records inside the supplied graph.
using BuilderFn = std::function<int(Graph<double>&, std::vector<TensorRecord>&)>;

struct FdReport {
    double max_rel = 0.0;
    int checked = 0;
};

inline double eval_loss(const BuilderFn& build, std::vector<TensorRecord>& recs) {
    Graph<double> g;
    int loss = build(g, recs);
    return g.node(loss).val[0];
}

// Central finite differences over every element of every trainable record.
inline FdReport fd_check(const BuilderFn& build, std::vector<TensorRecord> recs,
                         double h = 1e-4) {
    Graph<double> g;
    int loss = build(g, recs);
    g.backward(loss);

    // analytic gradients per record, pulled from the bound param nodes
    std::vector<std::vector<double>> analytic(recs.size());
    for (int i = 0; i < g.size(); ++i) {
        const auto& n = g.node(i);
        if (n.op != Op::Param || !n.needs_grad) continue;
        for (size_t r = 0; r < recs.size(); ++r)
            if (n.bound == &recs[r]) analytic[r].assign(n.grad.begin(), n.grad.end());
    }

    FdReport rep;
    for (size_t r = 0; r < recs.size(); ++r) {
        if (!recs[r].trainable) continue;
        for (size_t j = 0; j < recs[r].values.size(); ++j) {
            float saved = recs[r].values[j];
            // Use the perturbation actually realized in 32-bit storage, not the
            // nominal h, so quantization does not bias the estimate.
            recs[r].values[j] = static_cast<float>(saved + h);
            double xp = recs[r].values[j];
            double lp = eval_loss(build, recs);
            recs[r].values[j] = static_cast<float>(saved - h);
            double xm = recs[r].values[j];
            double lm = eval_loss(build, recs);
            recs[r].values[j] = saved;
            double fd = (lp - lm) / (xp - xm);
            double an = analytic[r].empty() ? 0.0 : analytic[r][j];
            double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
            rep.max_rel = std::max(rep.max_rel, rel);
            ++rep.checked;
        }
    }
    return rep;
}

inline TensorRecord rand_record(const std::string& name, std::vector<int> shape, Rng& rng,
                                double scale = 0.5, bool trainable = true) {
    TensorRecord t(name, std::move(shape), trainable);
    for (auto& x : t.values) x = static_cast<float>(rng.uniform(-scale, scale));
    return t;
}

// Catalog of builders covering every primitive; `seed` varies shapes and
// content. Fills `recs` with the records the builder expects.
inline constexpr int kBuilderCount = 10;

inline BuilderFn make_builder(int which, uint64_t seed, std::vector<TensorRecord>& recs) {
    Rng rng(derive_seed(0xfdf00d, which, seed));
    recs.clear();
    switch (which) {
        case 0: { // two-layer MLP with relu + cross-entropy
            int n = 3 + (int)rng.next_below(3), d = 4 + (int)rng.next_below(3);
            int hdim = 5, v = 6;
            recs.push_back(rand_record("x", {n, d}, rng, 0.8));
            recs.push_back(rand_record("w1", {d, hdim}, rng));
            recs.push_back(rand_record("w2", {hdim, v}, rng));
            std::vector<int> targets(n);
            for (auto& t : targets) t = (int)rng.next_below(v);
            return [=](Graph<double>& g, std::vector<TensorRecord>& r) {
                int x = g.param(r[0]);
                int h1 = g.relu(g.matmul(x, g.param(r[1])));
                int logits = g.matmul(h1, g.param(r[2]));
                return g.cross_entropy_mean(logits, targets,
                                            std::vector<uint8_t>(targets.size(), 1));
            };
        }
        case 1: { // layer_norm chain + scale + sum
            int n = 2 + (int)rng.next_below(4), d = 6;
            recs.push_back(rand_record("x", {n, d}, rng, 1.0));
            recs.push_back(rand_record("gain", {d}, rng, 0.3));
            for (auto& v : recs[1].values) v += 1.f; // keep gains near 1
            return [=](Graph<double>& g, std::vector<TensorRecord>& r) {
                int y = g.layer_norm(g.param(r[0]), g.param(r[1]));
                return g.sum_all(g.scale(y, 0.7));
            };
        }
        case 2: { // causal attention block
            int B = 1 + (int)rng.next_below(2), T = 3 + (int)rng.next_below(3);
            int H = 2, hdim = 8;
            recs.push_back(rand_record("x", {B * T, hdim}, rng, 0.7));
            recs.push_back(rand_record("wq", {hdim, hdim}, rng));
            recs.push_back(rand_record("wk", {hdim, hdim}, rng));
            recs.push_back(rand_record("wv", {hdim, hdim}, rng));
            return [=](Graph<double>& g, std::vector<TensorRecord>& r) {
                int x = g.param(r[0]);
                int att = g.causal_attention(g.matmul(x, g.param(r[1])),
                                             g.matmul(x, g.param(r[2])),
                                             g.matmul(x, g.param(r[3])), B, T, H);
                return g.sum_all(g.relu(att));
            };
        }
        case 3: { // MoE gating + combine with full selection (k = E)
            int n = 4, hdim = 5, E = 2 + (int)rng.next_below(2);
            recs.push_back(rand_record("x", {n, hdim}, rng, 0.8));
            for (int e = 0; e < E; ++e)
                recs.push_back(rand_record("r" + std::to_string(e), {1, hdim}, rng));
            for (int e = 0; e < E; ++e)
                recs.push_back(rand_record("we" + std::to_string(e), {hdim, hdim}, rng));
            return [=](Graph<double>& g, std::vector<TensorRecord>& r) {
                int x = g.param(r[0]);
                std::vector<int> rows;
                for (int e = 0; e < E; ++e) rows.push_back(g.param(r[1 + e]));
                int logits = g.matmul_nt(x, g.concat_rows(rows));
                int gates = g.moe_gates(logits, std::vector<double>(E, 0.0), E);
                std::vector<int> outs;
                for (int e = 0; e < E; ++e) outs.push_back(g.matmul(x, g.param(r[1 + E + e])));
                return g.sum_all(g.moe_combine(gates, outs));
            };
        }
        case 4: { // MoE with truncating top-k and a selection bias
            int n = 3, hdim = 4, E = 3;
            recs.push_back(rand_record("x", {n, hdim}, rng, 0.6));
            for (int e = 0; e < E; ++e) {
                recs.push_back(rand_record("r" + std::to_string(e), {1, hdim}, rng));
                // separate router rows firmly so FD nudges cannot flip selection
                for (auto& v : recs.back().values) v += 2.f * e;
            }
            for (int e = 0; e < E; ++e)
                recs.push_back(rand_record("we" + std::to_string(e), {hdim, hdim}, rng));
            std::vector<double> biases{0.0, -0.1, -0.2};
            return [=](Graph<double>& g, std::vector<TensorRecord>& r) {
                int x = g.param(r[0]);
                std::vector<int> rows;
                for (int e = 0; e < E; ++e) rows.push_back(g.param(r[1 + e]));
                int logits = g.matmul_nt(x, g.concat_rows(rows));
                int gates = g.moe_gates(logits, biases, 2);
                std::vector<int> outs;
                for (int e = 0; e < E; ++e) outs.push_back(g.relu(g.matmul(x, g.param(r[1 + E + e]))));
                return g.sum_all(g.moe_combine(gates, outs));
            };
        }
        case 5: { // embedding + positional add + cross-entropy
            int T = 4, hdim = 5, v = 7;
            recs.push_back(rand_record("tok", {v, hdim}, rng));
            recs.push_back(rand_record("pos", {T, hdim}, rng));
            recs.push_back(rand_record("head", {hdim, v}, rng));
            std::vector<int> ids(2 * T), targets(2 * T);
            for (auto& i : ids) i = (int)rng.next_below(v);
            for (auto& t : targets) t = (int)rng.next_below(v);
            std::vector<uint8_t> mask(2 * T, 1);
            mask[1] = 0; // exercise masked positions
            return [=](Graph<double>& g, std::vector<TensorRecord>& r) {
                std::vector<int> iota(T);
                for (int i = 0; i < T; ++i) iota[i] = i;
                int x = g.add_tiled(g.embedding(g.param(r[0]), ids),
                                    g.embedding(g.param(r[1]), iota), 2);
                return g.cross_entropy_mean(g.matmul(x, g.param(r[2])), targets, mask);
            };
        }
        case 6: { // column slice + concat + matmul_nt
            int n = 3, d = 6;
            recs.push_back(rand_record("x", {n, d}, rng, 0.9));
            recs.push_back(rand_record("y", {2, d / 2}, rng));
            return [=](Graph<double>& g, std::vector<TensorRecord>& r) {
                int x = g.param(r[0]);
                int left = g.slice_cols(x, 0, d / 2);
                int right = g.slice_cols(x, d / 2, d / 2);
                int both = g.add(left, right);
                int s = g.matmul_nt(both, g.param(r[1]));
                return g.sum_all(s);
            };
        }
        case 7: { // softmax rows + load-balance style reduction
            int n = 4, E = 4;
            recs.push_back(rand_record("logits", {n, E}, rng, 1.2));
            return [=](Graph<double>& g, std::vector<TensorRecord>& r) {
                int l = g.param(r[0]);
                int p = g.softmax_rows(l);
                int gates = g.moe_gates(l, std::vector<double>(E, 0.0), 2);
                int lb = g.load_balance(p, gates);
                int s = g.sum_all(p);
                return g.add_scalars(lb, s, 0.5, 1.0);
            };
        }
        case 8: { // frozen weights mixed with trainable ones
            int n = 3, d = 4, hdim = 5;
            recs.push_back(rand_record("x", {n, d}, rng, 0.8));
            recs.push_back(rand_record("w_frozen", {d, hdim}, rng, 0.5, false));
            recs.push_back(rand_record("w_train", {hdim, d}, rng));
            return [=](Graph<double>& g, std::vector<TensorRecord>& r) {
                int h1 = g.relu(g.matmul(g.param(r[0]), g.param(r[1])));
                return g.sum_all(g.matmul(h1, g.param(r[2])));
            };
        }
        default: { // 9: mini transformer block end to end
            int B = 1, T = 4, H = 2, hdim = 6, v = 8, E = 2;
            recs.push_back(rand_record("tok", {v, hdim}, rng));
            recs.push_back(rand_record("pos", {T, hdim}, rng));
            recs.push_back(rand_record("g1", {hdim}, rng, 0.2));
            for (auto& x : recs.back().values) x += 1.f;
            recs.push_back(rand_record("wqkv", {hdim, 3 * hdim}, rng));
            recs.push_back(rand_record("wo", {hdim, hdim}, rng));
            recs.push_back(rand_record("g2", {hdim}, rng, 0.2));
            for (auto& x : recs.back().values) x += 1.f;
            for (int e = 0; e < E; ++e) {
                recs.push_back(rand_record("r" + std::to_string(e), {1, hdim}, rng));
                recs.push_back(rand_record("w1_" + std::to_string(e), {hdim, 2 * hdim}, rng));
                recs.push_back(rand_record("w2_" + std::to_string(e), {2 * hdim, hdim}, rng));
            }
            recs.push_back(rand_record("head", {hdim, v}, rng));
            std::vector<int> ids(B * T), targets(B * T);
            for (auto& i : ids) i = (int)rng.next_below(v);
            for (auto& t : targets) t = (int)rng.next_below(v);
            return [=](Graph<double>& g, std::vector<TensorRecord>& r) {
                std::vector<int> iota(T);
                for (int i = 0; i < T; ++i) iota[i] = i;
                int x = g.add_tiled(g.embedding(g.param(r[0]), ids),
                                    g.embedding(g.param(r[1]), iota), B);
                int a = g.layer_norm(x, g.param(r[2]));
                int qkv = g.matmul(a, g.param(r[3]));
                int att = g.causal_attention(g.slice_cols(qkv, 0, hdim),
                                             g.slice_cols(qkv, hdim, hdim),
                                             g.slice_cols(qkv, 2 * hdim, hdim), B, T, H);
                x = g.add(x, g.matmul(att, g.param(r[4])));
                int m = g.layer_norm(x, g.param(r[5]));
                std::vector<int> rows, outs;
                for (int e = 0; e < E; ++e) rows.push_back(g.param(r[6 + 3 * e]));
                int logits_r = g.matmul_nt(m, g.concat_rows(rows));
                int gates = g.moe_gates(logits_r, std::vector<double>(E, 0.0), 2);
                for (int e = 0; e < E; ++e)
                    outs.push_back(g.matmul(g.relu(g.matmul(m, g.param(r[7 + 3 * e]))),
                                            g.param(r[8 + 3 * e])));
                x = g.add(x, g.moe_combine(gates, outs));
                int lm = g.matmul(x, g.param(r.back()));
                return g.cross_entropy_mean(lm, targets,
                                            std::vector<uint8_t>(targets.size(), 1));
            };
        }
    }
}

} // namespace flexmerge::testing
