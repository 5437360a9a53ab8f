#include "flexmerge/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "flexmerge/errors.hpp"
#include "flexmerge/graph.hpp"
#include "flexmerge/rng.hpp"
#include "flexmerge/tokenizer.hpp"
#include "flexmerge/train.hpp"

namespace flexmerge {

namespace {

const TensorRecord* find_bundle_tensor(const ExpertBundle& b, const std::string& name) {
    for (const auto& t : b.tensors)
        if (t.name == name) return &t;
    return nullptr;
}

// One training row: [BOS doc EOS] cropped to a random window of seq+1 tokens
// (or PAD-filled when shorter). Targets BOS/PAD are excluded from the loss.
void fill_row(const std::string& doc, int seq, Rng& rng, int* ids, int* targets, uint8_t* mask) {
    std::vector<int> toks = encode(doc);
    const size_t window = static_cast<size_t>(seq) + 1;
    size_t start = 0;
    if (toks.size() > window) start = rng.next_below(toks.size() - window + 1);
    for (int j = 0; j < seq; ++j) {
        size_t a = start + static_cast<size_t>(j);
        int cur = (a < toks.size()) ? toks[a] : kPad;
        int nxt = (a + 1 < toks.size()) ? toks[a + 1] : kPad;
        ids[j] = cur;
        targets[j] = nxt;
        mask[j] = (nxt != kBos && nxt != kPad) ? 1 : 0;
    }
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

} // namespace

MoeModel assemble(const MoeModel& anchor, const std::string& anchor_fingerprint,
                  const std::vector<ExpertBundle>& bundles, std::vector<double> biases,
                  int top_k, std::vector<std::string> bundle_fingerprints) {
    if (anchor.roster.size() != 1 || anchor.roster[0] != "pub")
        throw ConfigError("assemble: anchor must be a single-expert public model");
    const int n = static_cast<int>(bundles.size());
    if (biases.empty()) biases.assign(static_cast<size_t>(n), kDefaultExpertBias);
    if (static_cast<int>(biases.size()) != n)
        throw ConfigError("assemble: one bias per bundle required");
    for (double b : biases)
        if (!(b <= 0.0)) throw InputError("assemble: selection biases must be <= 0");
    if (bundle_fingerprints.empty()) bundle_fingerprints.assign(static_cast<size_t>(n), "");
    if (static_cast<int>(bundle_fingerprints.size()) != n)
        throw ConfigError("assemble: one fingerprint per bundle required");
    if (top_k == 0) top_k = std::min(4, n + 1);
    if (top_k < 1 || top_k > n + 1)
        throw ConfigError("assemble: top_k out of range for roster size");

    std::unordered_set<std::string> seen{"pub"};
    for (const auto& b : bundles) {
        if (!seen.insert(b.expert_id).second)
            throw MergeError("assemble: duplicate expert id '" + b.expert_id + "'");
        if (b.anchor_fingerprint != anchor_fingerprint)
            throw MergeError("assemble: bundle '" + b.expert_id +
                             "' was branched from a different anchor (fingerprint mismatch)");
    }

    MoeModel m;
    m.config = anchor.config;
    m.config.top_k = top_k;
    m.roster = {"pub"};
    m.biases = {0.0};
    m.fingerprints = {anchor_fingerprint};
    for (const auto& t : anchor.tensors) {
        TensorRecord copy(t.name, t.shape, false);
        copy.values = t.values;
        m.add_tensor(std::move(copy));
    }
    const int L = anchor.config.n_layers;
    const int hd = anchor.config.hidden_dim;
    const int fd = anchor.config.ffn_dim;
    for (int i = 0; i < n; ++i) {
        const auto& b = bundles[static_cast<size_t>(i)];
        m.roster.push_back(b.expert_id);
        m.biases.push_back(biases[static_cast<size_t>(i)]);
        m.fingerprints.push_back(bundle_fingerprints[static_cast<size_t>(i)]);
        for (int l = 0; l < L; ++l) {
            struct Want {
                std::string name;
                std::vector<int> shape;
            };
            const Want wants[3] = {{MoeModel::expert_w1(l, b.expert_id), {hd, fd}},
                                   {MoeModel::expert_w2(l, b.expert_id), {fd, hd}},
                                   {MoeModel::router_row(l, b.expert_id), {1, hd}}};
            for (const auto& want : wants) {
                const TensorRecord* src = find_bundle_tensor(b, want.name);
                if (!src)
                    throw MergeError("assemble: bundle '" + b.expert_id + "' is missing tensor '" +
                                     want.name + "'");
                if (src->shape != want.shape)
                    throw MergeError("assemble: bundle '" + b.expert_id + "' tensor '" + want.name +
                                     "' has the wrong shape");
                TensorRecord copy(src->name, src->shape, false);
                copy.values = src->values;
                m.add_tensor(std::move(copy));
            }
        }
    }
    m.config.validate(m.n_experts());
    return m;
}

MoeModel opt_out(const MoeModel& model, const std::string& expert_id) {
    if (expert_id == "pub")
        throw ForbiddenError("opt-out of the public expert is not allowed");
    const int idx = model.expert_index(expert_id);
    if (idx < 0) throw InputError("opt-out: unknown expert '" + expert_id + "'");

    std::unordered_set<std::string> drop;
    for (int l = 0; l < model.config.n_layers; ++l) {
        drop.insert(MoeModel::expert_w1(l, expert_id));
        drop.insert(MoeModel::expert_w2(l, expert_id));
        drop.insert(MoeModel::router_row(l, expert_id));
    }

    MoeModel out;
    out.config = model.config;
    out.config.top_k = std::min(model.config.top_k, model.n_experts() - 1);
    for (int e = 0; e < model.n_experts(); ++e) {
        if (e == idx) continue;
        out.roster.push_back(model.roster[static_cast<size_t>(e)]);
        out.biases.push_back(model.biases[static_cast<size_t>(e)]);
        out.fingerprints.push_back(model.fingerprints[static_cast<size_t>(e)]);
    }
    for (const auto& t : model.tensors) {
        if (drop.count(t.name)) continue;
        TensorRecord copy(t.name, t.shape, t.trainable);
        copy.values = t.values;
        out.add_tensor(std::move(copy));
    }
    // Name audit: nothing owned by the removed expert may survive.
    const std::string ffn_tag = ".expert." + expert_id + ".";
    const std::string row_tag = ".router." + expert_id;
    for (const auto& t : out.tensors) {
        if (t.name.find(ffn_tag) != std::string::npos || t.name.ends_with(row_tag))
            throw InvariantViolation("opt-out left tensor '" + t.name + "' behind");
    }
    return out;
}

MoeModel set_bias(const MoeModel& model, const std::string& expert_id, double b) {
    if (!(b <= 0.0)) throw InputError("set-bias: selection bias must be <= 0");
    if (expert_id == "pub") throw InputError("set-bias: the public expert's bias is fixed at 0");
    const int idx = model.expert_index(expert_id);
    if (idx < 0) throw InputError("set-bias: unknown expert '" + expert_id + "'");
    MoeModel out = model;
    out.biases[static_cast<size_t>(idx)] = b;
    return out;
}

double ProxyScorer::score(MoeModel& anchor, const std::string& doc) const {
    std::vector<float> x = pooled_document_state(anchor, doc).back();
    if (x.size() != w.size()) throw ConfigError("proxy scorer: feature width mismatch");
    double z = static_cast<double>(b);
    for (size_t k = 0; k < w.size(); ++k)
        z += static_cast<double>(w[k]) * (static_cast<double>(x[k]) - mean[k]) * inv_std[k];
    return sigmoid(z);
}

ProxyScorer train_proxy_classifier(MoeModel& anchor, const std::string& owner,
                                   const std::vector<std::string>& closed_sample,
                                   const std::vector<std::string>& public_sample, uint64_t seed) {
    if (closed_sample.empty() || public_sample.empty())
        throw InputError("proxy classifier: both classes need documents");
    if (closed_sample.size() != public_sample.size())
        throw InputError("proxy classifier: balanced samples required");

    const size_t n = closed_sample.size();
    const int hd = anchor.config.hidden_dim;
    // Embed everything once: rows 0..n-1 closed (label 1), n..2n-1 public (0).
    std::vector<std::vector<float>> feats(2 * n);
    for (size_t i = 0; i < n; ++i) feats[i] = pooled_document_state(anchor, closed_sample[i]).back();
    for (size_t i = 0; i < n; ++i)
        feats[n + i] = pooled_document_state(anchor, public_sample[i]).back();

    // Per-class held-out eighth for the reported accuracy.
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    Rng split_rng(derive_seed(seed, 0x73706c69));
    split_rng.shuffle(order);
    const size_t n_val = n / 8;
    std::vector<size_t> train_rows, val_rows;
    for (size_t i = 0; i < n; ++i) {
        bool held = i < n_val;
        for (size_t base : {size_t{0}, n}) {
            (held ? val_rows : train_rows).push_back(base + order[i]);
        }
    }
    if (val_rows.empty()) val_rows = train_rows; // tiny samples: report train accuracy

    ProxyScorer s;
    s.owner = owner;
    s.mean.assign(static_cast<size_t>(hd), 0.0f);
    s.inv_std.assign(static_cast<size_t>(hd), 0.0f);
    std::vector<double> mu(static_cast<size_t>(hd), 0.0), var(static_cast<size_t>(hd), 0.0);
    for (size_t r : train_rows)
        for (int k = 0; k < hd; ++k) mu[static_cast<size_t>(k)] += feats[r][static_cast<size_t>(k)];
    for (auto& v : mu) v /= static_cast<double>(train_rows.size());
    for (size_t r : train_rows)
        for (int k = 0; k < hd; ++k) {
            double d = feats[r][static_cast<size_t>(k)] - mu[static_cast<size_t>(k)];
            var[static_cast<size_t>(k)] += d * d;
        }
    for (int k = 0; k < hd; ++k) {
        double sd = std::sqrt(var[static_cast<size_t>(k)] / static_cast<double>(train_rows.size()));
        s.mean[static_cast<size_t>(k)] = static_cast<float>(mu[static_cast<size_t>(k)]);
        s.inv_std[static_cast<size_t>(k)] = static_cast<float>(1.0 / std::max(sd, 1e-6));
    }
    auto zfeat = [&](size_t r, int k) {
        return (static_cast<double>(feats[r][static_cast<size_t>(k)]) -
                static_cast<double>(s.mean[static_cast<size_t>(k)])) *
               static_cast<double>(s.inv_std[static_cast<size_t>(k)]);
    };
    auto label = [&](size_t r) { return r < n ? 1.0 : 0.0; };

    // Full-batch logistic regression; deterministic, no stochastic steps.
    std::vector<double> w(static_cast<size_t>(hd), 0.0);
    double b = 0.0;
    const double lr = 0.5, l2 = 1e-4;
    const int iters = 300;
    for (int it = 0; it < iters; ++it) {
        std::vector<double> gw(static_cast<size_t>(hd), 0.0);
        double gb = 0.0;
        for (size_t r : train_rows) {
            double z = b;
            for (int k = 0; k < hd; ++k) z += w[static_cast<size_t>(k)] * zfeat(r, k);
            double err = sigmoid(z) - label(r);
            for (int k = 0; k < hd; ++k) gw[static_cast<size_t>(k)] += err * zfeat(r, k);
            gb += err;
        }
        const double inv = 1.0 / static_cast<double>(train_rows.size());
        for (int k = 0; k < hd; ++k) {
            w[static_cast<size_t>(k)] -=
                lr * (gw[static_cast<size_t>(k)] * inv + l2 * w[static_cast<size_t>(k)]);
        }
        b -= lr * gb * inv;
    }
    s.w.resize(static_cast<size_t>(hd));
    for (int k = 0; k < hd; ++k) s.w[static_cast<size_t>(k)] = static_cast<float>(w[static_cast<size_t>(k)]);
    s.b = static_cast<float>(b);

    int correct = 0;
    for (size_t r : val_rows) {
        double z = b;
        for (int k = 0; k < hd; ++k) z += w[static_cast<size_t>(k)] * zfeat(r, k);
        bool said_closed = sigmoid(z) > 0.5;
        if (said_closed == (label(r) > 0.5)) ++correct;
    }
    s.val_accuracy = static_cast<double>(correct) / static_cast<double>(val_rows.size());
    return s;
}

ProxySet select_proxy(const ProxyScorer& scorer, MoeModel& anchor,
                      const DomainCorpus& public_corpus, int cap, int closed_corpus_size) {
    if (cap < 0) throw ConfigError("proxy selection: cap must be >= 0");
    if (closed_corpus_size < 0) throw ConfigError("proxy selection: closed corpus size must be >= 0");
    const double limit = 0.005 * static_cast<double>(closed_corpus_size);
    if (static_cast<double>(cap) > limit + 1e-12)
        throw InputError("proxy selection: cap " + std::to_string(cap) +
                         " exceeds 0.5% of the closed corpus (" + std::to_string(limit) + ")");

    ProxySet out;
    out.owner = scorer.owner;
    if (cap == 0) return out;

    const int n_docs = static_cast<int>(public_corpus.documents.size());
    std::vector<double> scores(static_cast<size_t>(n_docs));
    for (int i = 0; i < n_docs; ++i)
        scores[static_cast<size_t>(i)] =
            scorer.score(anchor, public_corpus.documents[static_cast<size_t>(i)]);
    std::vector<int> order(static_cast<size_t>(n_docs));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b2) {
        return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b2)];
    });
    const int take = std::min(cap, n_docs);
    for (int i = 0; i < take; ++i) {
        out.indices.push_back(order[static_cast<size_t>(i)]);
        out.scores.push_back(scores[static_cast<size_t>(order[static_cast<size_t>(i)])]);
    }
    return out;
}

MoeModel tune_router(const MoeModel& model, const std::vector<ProxySet>& proxy_sets,
                     const DomainCorpus& public_corpus, int steps, uint64_t seed) {
    if (proxy_sets.empty()) throw InputError("router tuning: at least one proxy set required");
    if (steps < 0) throw ConfigError("router tuning: steps must be >= 0");
    MoeModel out = model;
    if (steps == 0) return out;

    std::vector<std::vector<std::string>> pools;
    for (const auto& ps : proxy_sets) {
        auto docs = public_corpus.docs_at(ps.indices);
        if (!docs.empty()) pools.push_back(std::move(docs));
    }
    std::vector<std::string> pub_docs = public_corpus.docs_at(public_corpus.train);
    if (pub_docs.empty()) throw InputError("router tuning: public corpus has no train split");
    pools.push_back(std::move(pub_docs));

    for (auto& t : out.tensors) t.trainable = t.name.find(".router.") != std::string::npos;
    auto frozen = snapshot_frozen(out);
    auto trainables = out.trainable_tensors();

    const int T = out.config.max_seq_len;
    const int rows = 16;
    Rng draw(derive_seed(seed, 0x74756e65));
    std::vector<int> ids(static_cast<size_t>(rows) * T), targets(static_cast<size_t>(rows) * T);
    std::vector<uint8_t> mask(static_cast<size_t>(rows) * T);
    auto fill_batch = [&]() {
        for (int r = 0; r < rows; ++r) {
            const auto& pool = pools[draw.next_below(pools.size())];
            const auto& doc = pool[draw.next_below(pool.size())];
            size_t at = static_cast<size_t>(r) * static_cast<size_t>(T);
            fill_row(doc, T, draw, ids.data() + at, targets.data() + at, mask.data() + at);
        }
    };
    fill_batch();

    Graph<float> g;
    ForwardHandles h = build_forward(g, out, ids, rows, T, targets, mask);
    AdamW opt;
    opt.schedule = default_schedule(steps);
    for (int s = 0; s < steps; ++s) {
        if (s > 0) {
            fill_batch();
            g.set_embedding_ids(h.tok_ids, ids);
            g.set_ce_batch(h.loss, targets, mask);
            g.refresh();
        }
        g.backward(h.loss);
        opt.step(trainables);
    }
    verify_frozen(out, frozen);
    out.set_all_trainable(false);
    return out;
}

} // namespace flexmerge
