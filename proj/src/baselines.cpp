#include "flexmerge/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

#include "flexmerge/errors.hpp"
#include "flexmerge/gemm.hpp"
#include "flexmerge/graph.hpp"
#include "flexmerge/rng.hpp"
#include "flexmerge/tokenizer.hpp"

namespace flexmerge {

namespace {

bool valid_expert_id(const std::string& id) {
    if (id.empty()) return false;
    for (char ch : id)
        if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '_' && ch != '-') return false;
    return true;
}

bool shared_tensor(const std::string& name) {
    return name.find(".expert.") == std::string::npos &&
           name.find(".router.") == std::string::npos;
}

// Same checkpoint shape: config, roster, biases, and tensor inventory.
void require_same_family(const MoeModel& a, const MoeModel& b, const char* what) {
    if (!(a.config == b.config)) throw MergeError(std::string(what) + ": config mismatch");
    if (a.roster != b.roster) throw MergeError(std::string(what) + ": roster mismatch");
    if (a.biases != b.biases) throw MergeError(std::string(what) + ": bias mismatch");
    if (a.tensors.size() != b.tensors.size())
        throw MergeError(std::string(what) + ": tensor count mismatch");
    for (const auto& t : a.tensors) {
        if (!b.has_tensor(t.name)) throw MergeError(std::string(what) + ": missing '" + t.name + "'");
        if (b.tensor(t.name).shape != t.shape)
            throw MergeError(std::string(what) + ": shape mismatch on '" + t.name + "'");
    }
}

// softmax(-losses) with +inf treated as an exact-zero sentinel.
std::vector<double> neg_loss_softmax(const std::vector<double>& losses, double tau,
                                     const char* what) {
    double best = std::numeric_limits<double>::infinity();
    for (double l : losses) {
        if (std::isnan(l)) throw InputError(std::string(what) + ": NaN loss");
        best = std::min(best, l);
    }
    if (!std::isfinite(best)) throw InputError(std::string(what) + ": every loss is non-finite");
    std::vector<double> w(losses.size());
    double z = 0.0;
    for (size_t i = 0; i < losses.size(); ++i) {
        w[i] = std::exp(-(losses[i] - best) / tau);
        z += w[i];
    }
    for (double& v : w) v /= z;
    return w;
}

} // namespace

double sequence_nll(MoeModel& m, const std::vector<int>& tokens) {
    const int T = m.config.max_seq_len;
    double ce_sum = 0.0;
    int64_t counted = 0;
    for (size_t start = 0; start + 1 < tokens.size(); start += static_cast<size_t>(T)) {
        std::vector<int> ids(static_cast<size_t>(T), kPad), tg(static_cast<size_t>(T), kPad);
        std::vector<uint8_t> mask(static_cast<size_t>(T), 0);
        const size_t n = std::min(static_cast<size_t>(T), tokens.size() - start - 1);
        for (size_t j = 0; j < n; ++j) {
            ids[j] = tokens[start + j];
            tg[j] = tokens[start + j + 1];
            mask[j] = (tg[j] != kBos && tg[j] != kPad) ? 1 : 0;
        }
        Graph<float> g;
        auto h = build_forward(g, m, ids, 1, T, tg, mask);
        const auto& loss = g.node(h.loss);
        ce_sum += static_cast<double>(loss.val[0]) * loss.ce_count;
        counted += loss.ce_count;
    }
    if (counted == 0) throw InputError("sequence_nll: nothing to score");
    return ce_sum / static_cast<double>(counted);
}

MoeModel soup_combine(const std::vector<MoeModel>& models, const std::vector<double>& weights) {
    if (models.empty()) throw InputError("soup: no checkpoints");
    if (weights.size() != models.size())
        throw ConfigError("soup: one weight per checkpoint required");
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w))
            throw ConfigError("soup: weights must be finite and nonnegative");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("soup: weights must sum to 1");
    for (size_t i = 1; i < models.size(); ++i)
        require_same_family(models[0], models[i], "soup");

    MoeModel out = models[0];
    std::vector<const std::vector<float>*> srcs(models.size());
    std::vector<double> terms(models.size());
    for (auto& t : out.tensors) {
        for (size_t i = 0; i < models.size(); ++i) srcs[i] = &models[i].tensor(t.name).values;
        for (size_t j = 0; j < t.values.size(); ++j) {
            // Summing the per-model terms in value order makes the result
            // independent of the argument order, not just close to it.
            for (size_t i = 0; i < models.size(); ++i)
                terms[i] = weights[i] * static_cast<double>((*srcs[i])[j]);
            std::sort(terms.begin(), terms.end());
            double acc = 0.0;
            for (double v : terms) acc += v;
            t.values[j] = static_cast<float>(acc);
        }
    }
    return out;
}

MoeModel soup_average(const std::vector<MoeModel>& models) {
    if (models.empty()) throw InputError("soup: no checkpoints");
    return soup_combine(models,
                        std::vector<double>(models.size(), 1.0 / static_cast<double>(models.size())));
}

MoeModel soup_weighted(std::vector<MoeModel>& models, const std::vector<int>& tokens,
                       std::vector<double>* weights_out) {
    if (models.empty()) throw InputError("soup: no checkpoints");
    std::vector<double> losses(models.size());
    for (size_t i = 0; i < models.size(); ++i) losses[i] = sequence_nll(models[i], tokens);
    auto w = neg_loss_softmax(losses, 1.0, "soup");
    if (weights_out) *weights_out = w;
    return soup_combine(models, w);
}

EnsembleWeights btm_weights(const std::vector<double>& losses, double tau, int k) {
    if (losses.empty()) throw InputError("ensemble: no losses");
    if (!(tau > 0.0)) throw ConfigError("ensemble: tau must be > 0");
    const int n = static_cast<int>(losses.size());
    if (k < 1 || k > n) throw ConfigError("ensemble: k must be in [1, n_models]");

    EnsembleWeights ew;
    ew.tau = tau;
    ew.k = k;
    ew.w = neg_loss_softmax(losses, tau, "ensemble");

    std::vector<int> order(losses.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (ew.w[static_cast<size_t>(a)] != ew.w[static_cast<size_t>(b)])
            return ew.w[static_cast<size_t>(a)] > ew.w[static_cast<size_t>(b)];
        return a < b;
    });
    ew.selected.assign(order.begin(), order.begin() + k);

    std::vector<double> kept(losses.size(), 0.0);
    double mass = 0.0;
    for (int i : ew.selected) mass += ew.w[static_cast<size_t>(i)];
    for (int i : ew.selected) kept[static_cast<size_t>(i)] = ew.w[static_cast<size_t>(i)] / mass;
    ew.w = std::move(kept);
    return ew;
}

std::vector<int> btm_generate(std::vector<MoeModel>& models, const std::vector<int>& prefix,
                              double tau, int k, int max_new, const GenParams& params,
                              uint64_t seed, EnsembleWeights* weights_out) {
    if (models.empty()) throw InputError("ensemble: no models");
    if (prefix.empty()) throw InputError("generate: prefix must be nonempty");
    if (max_new < 0) throw ConfigError("generate: max_new must be >= 0");
    const int vocab = models[0].config.vocab_size;
    const int cap = models[0].config.max_seq_len;
    for (const auto& m : models)
        if (m.config.vocab_size != vocab || m.config.max_seq_len != cap)
            throw ConfigError("ensemble: models disagree on vocabulary or context length");

    EnsembleWeights ew;
    if (models.size() == 1) {
        if (!(tau > 0.0)) throw ConfigError("ensemble: tau must be > 0");
        if (k != 1) throw ConfigError("ensemble: k must be in [1, n_models]");
        ew.tau = tau;
        ew.k = 1;
        ew.w = {1.0};
        ew.selected = {0};
    } else {
        std::vector<double> losses(models.size());
        for (size_t i = 0; i < models.size(); ++i) losses[i] = sequence_nll(models[i], prefix);
        ew = btm_weights(losses, tau, k);
    }
    if (weights_out) *weights_out = ew;

    std::vector<int> history = prefix, out;
    Rng rng(seed);
    std::vector<double> zsum(static_cast<size_t>(vocab));
    std::vector<float> blend(static_cast<size_t>(vocab));
    for (int step = 0; step < max_new; ++step) {
        const int T = std::min(static_cast<int>(history.size()), cap);
        std::vector<int> ids(history.end() - T, history.end());
        std::fill(zsum.begin(), zsum.end(), 0.0);
        for (int i : ew.selected) {
            Graph<float> g;
            auto h = build_forward(g, models[static_cast<size_t>(i)], ids, 1, T);
            const float* row = g.node(h.logits).val.data() + static_cast<size_t>(T - 1) * vocab;
            const double wi = ew.w[static_cast<size_t>(i)];
            for (int v = 0; v < vocab; ++v) zsum[static_cast<size_t>(v)] += wi * row[v];
        }
        for (int v = 0; v < vocab; ++v)
            blend[static_cast<size_t>(v)] = static_cast<float>(zsum[static_cast<size_t>(v)]);
        int tok = sample_token(blend, params, rng);
        history.push_back(tok);
        out.push_back(tok);
    }
    return out;
}

MoeModel btx_assemble(const MoeModel& anchor, const std::vector<MoeModel>& dense_experts,
                      const std::vector<std::string>& expert_ids, uint64_t seed, int top_k) {
    if (dense_experts.empty()) throw InputError("upcycle: no dense checkpoints");
    if (expert_ids.size() != dense_experts.size())
        throw ConfigError("upcycle: one expert id per checkpoint required");
    // Every roster leads with the public slot; the first checkpoint fills it.
    if (expert_ids[0] != "pub")
        throw ConfigError("upcycle: the first expert id must be 'pub'");
    for (size_t i = 0; i < expert_ids.size(); ++i) {
        if (!valid_expert_id(expert_ids[i]))
            throw InputError("upcycle: invalid expert id '" + expert_ids[i] + "'");
        for (size_t j = i + 1; j < expert_ids.size(); ++j)
            if (expert_ids[i] == expert_ids[j])
                throw InputError("upcycle: duplicate expert id '" + expert_ids[i] + "'");
    }
    ModelConfig dense_cfg = anchor.config;
    for (const auto& d : dense_experts) {
        if (d.n_experts() != 1)
            throw MergeError("upcycle: inputs must be dense (single-expert) checkpoints");
        ModelConfig c = d.config;
        c.top_k = dense_cfg.top_k;
        if (!(c == dense_cfg)) throw MergeError("upcycle: architecture mismatch with anchor");
    }
    const int n = static_cast<int>(dense_experts.size());
    if (top_k == 0) top_k = std::min(2, n);
    if (top_k < 1 || top_k > n) throw ConfigError("upcycle: top_k out of range");

    ModelConfig cfg = anchor.config;
    cfg.top_k = top_k;
    MoeModel out = MoeModel::create(cfg, expert_ids, seed);
    out.biases.assign(static_cast<size_t>(n), 0.0);

    std::vector<double> acc;
    for (auto& t : out.tensors) {
        if (!shared_tensor(t.name)) continue;
        acc.assign(t.values.size(), 0.0);
        for (const auto& d : dense_experts) {
            const auto& src = d.tensor(t.name).values;
            for (size_t j = 0; j < src.size(); ++j) acc[j] += static_cast<double>(src[j]);
        }
        for (size_t j = 0; j < acc.size(); ++j)
            t.values[j] = static_cast<float>(acc[j] / n);
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (int e = 0; e < n; ++e) {
            const auto& d = dense_experts[static_cast<size_t>(e)];
            out.tensor(MoeModel::expert_w1(l, expert_ids[static_cast<size_t>(e)])).values =
                d.tensor(MoeModel::expert_w1(l, d.roster[0])).values;
            out.tensor(MoeModel::expert_w2(l, expert_ids[static_cast<size_t>(e)])).values =
                d.tensor(MoeModel::expert_w2(l, d.roster[0])).values;
        }
    }
    Rng rng(derive_seed(seed, 0x62747872)); // fresh router, independent of create's init
    for (int l = 0; l < cfg.n_layers; ++l)
        for (int e = 0; e < n; ++e)
            for (auto& v : out.tensor(MoeModel::router_row(l, expert_ids[static_cast<size_t>(e)])).values)
                v = static_cast<float>(rng.normal(0.0, 0.02));

    out.set_all_trainable(true);
    return out;
}

MoeModel dense_branch(const MoeModel& anchor, const std::vector<std::string>& train_docs,
                      const TrainConfig& cfg) {
    MoeModel out = anchor;
    out.set_all_trainable(true);
    train_lm(out, train_docs, cfg);
    return out;
}

int classify_query(const std::vector<ProxyScorer>& scorers, MoeModel& embedder,
                   const std::string& query) {
    if (scorers.empty()) throw InputError("route: no scorers");
    int best = 0;
    double best_score = scorers[0].score(embedder, query);
    for (size_t i = 1; i < scorers.size(); ++i) {
        double s = scorers[i].score(embedder, query);
        if (s > best_score) { // ties keep the earlier index
            best_score = s;
            best = static_cast<int>(i);
        }
    }
    return best;
}

std::vector<int> classifier_route(const std::vector<ProxyScorer>& scorers, MoeModel& embedder,
                                  std::vector<MoeModel>& models, const std::string& query,
                                  int max_new, const GenParams& params, uint64_t seed,
                                  int* selected) {
    if (models.size() != scorers.size())
        throw ConfigError("route: one model per scorer required");
    int idx = classify_query(scorers, embedder, query);
    if (selected) *selected = idx;
    std::vector<int> prefix = encode(query);
    if (!prefix.empty() && prefix.back() == kEos) prefix.pop_back();
    return generate(models[static_cast<size_t>(idx)], prefix, max_new, params, seed);
}

ReferenceMoeResult unrestricted_moe_train(const MoeModel& anchor,
                                          const std::vector<std::string>& combined_docs,
                                          const ReferenceMoeConfig& cfg) {
    if (cfg.expert_ids.empty()) throw ConfigError("reference: at least one expert required");
    if (combined_docs.empty()) throw InputError("reference: no documents");
    if (cfg.steps <= 0 && cfg.flops == 0)
        throw ConfigError("reference: either steps or a flop budget is required");
    if (cfg.batch_rows < 1) throw ConfigError("reference: batch_rows must be >= 1");
    if (!(cfg.base_lr > 0.0)) throw ConfigError("reference: base_lr must be > 0");

    const std::vector<MoeModel> seeds_(cfg.expert_ids.size(), anchor);
    MoeModel joint = btx_assemble(anchor, seeds_, cfg.expert_ids, derive_seed(cfg.seed, 0x6d6f65));

    auto make_tc = [&](int steps) {
        TrainConfig tc;
        tc.steps = steps;
        tc.batch_rows = cfg.batch_rows;
        tc.seed = derive_seed(cfg.seed, 1);
        tc.schedule = default_schedule(steps, cfg.base_lr);
        tc.load_balance_weight = cfg.load_balance_weight;
        return tc;
    };

    int steps = cfg.steps;
    if (cfg.flops > 0) {
        // One probe step on a scratch copy prices a step; every step costs the
        // same, so the rounded count lands within half a step of the budget.
        MoeModel probe = joint;
        uint64_t before = gemm_flop_count();
        train_lm(probe, combined_docs, make_tc(1));
        uint64_t per_step = gemm_flop_count() - before;
        if (per_step == 0) throw InvariantViolation("reference: flop probe counted nothing");
        steps = std::max(
            1, static_cast<int>(std::llround(static_cast<double>(cfg.flops) /
                                             static_cast<double>(per_step))));
    }

    ReferenceMoeResult res;
    uint64_t before = gemm_flop_count();
    res.train = train_lm(joint, combined_docs, make_tc(steps));
    res.flops = gemm_flop_count() - before;
    res.steps = steps;
    res.model = std::move(joint);
    return res;
}

} // namespace flexmerge
