#include "flexmerge/branch.hpp"

#include <algorithm>
#include <cctype>

#include "flexmerge/errors.hpp"
#include "flexmerge/graph.hpp"
#include "flexmerge/tokenizer.hpp"

namespace flexmerge {

namespace {

void check_expert_id(const std::string& id) {
    if (id.empty() || id == "pub")
        throw InputError("expert id '" + id + "' is reserved or empty");
    for (char c : id) {
        bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
        if (!ok) throw InputError("expert id '" + id + "': only [A-Za-z0-9_-] allowed");
    }
}

} // namespace

std::vector<std::vector<float>> pooled_document_state(MoeModel& anchor, const std::string& doc) {
    std::vector<int> toks = encode(doc);
    const int T = std::min(static_cast<int>(toks.size()), anchor.config.max_seq_len);
    toks.resize(static_cast<size_t>(T));

    Graph<float> g;
    ForwardHandles h = build_forward(g, anchor, toks, 1, T);

    const int hd = anchor.config.hidden_dim;
    std::vector<std::vector<float>> out;
    out.reserve(h.router_inputs.size());
    for (int node : h.router_inputs) {
        const auto& v = g.node(node).val; // [T, hd]
        std::vector<double> acc(static_cast<size_t>(hd), 0.0);
        for (int t = 0; t < T; ++t)
            for (int k = 0; k < hd; ++k)
                acc[static_cast<size_t>(k)] += static_cast<double>(v[static_cast<size_t>(t) * hd + k]);
        std::vector<float> pooled(static_cast<size_t>(hd));
        for (int k = 0; k < hd; ++k)
            pooled[static_cast<size_t>(k)] = static_cast<float>(acc[static_cast<size_t>(k)] / T);
        out.push_back(std::move(pooled));
    }
    return out;
}

std::vector<std::vector<float>> init_router_embedding(MoeModel& anchor,
                                                      const std::vector<std::string>& sample_docs) {
    if (sample_docs.empty()) throw InputError("router init: no sample documents");
    const int L = anchor.config.n_layers;
    const int hd = anchor.config.hidden_dim;
    std::vector<std::vector<double>> acc(static_cast<size_t>(L),
                                         std::vector<double>(static_cast<size_t>(hd), 0.0));
    for (const auto& doc : sample_docs) {
        auto states = pooled_document_state(anchor, doc);
        for (int l = 0; l < L; ++l)
            for (int k = 0; k < hd; ++k)
                acc[static_cast<size_t>(l)][static_cast<size_t>(k)] +=
                    static_cast<double>(states[static_cast<size_t>(l)][static_cast<size_t>(k)]);
    }
    const double n = static_cast<double>(sample_docs.size());
    std::vector<std::vector<float>> r(static_cast<size_t>(L),
                                      std::vector<float>(static_cast<size_t>(hd)));
    for (int l = 0; l < L; ++l)
        for (int k = 0; k < hd; ++k)
            r[static_cast<size_t>(l)][static_cast<size_t>(k)] =
                static_cast<float>(acc[static_cast<size_t>(l)][static_cast<size_t>(k)] / n);
    return r;
}

MoeModel init_branch(const MoeModel& anchor, const std::string& expert_id,
                     const std::vector<std::vector<float>>& r_init) {
    if (anchor.roster.size() != 1 || anchor.roster[0] != "pub")
        throw ConfigError("branch: anchor must be a single-expert public model");
    check_expert_id(expert_id);

    const int L = anchor.config.n_layers;
    const int hd = anchor.config.hidden_dim;
    if (static_cast<int>(r_init.size()) != L)
        throw ConfigError("branch: router init needs one vector per layer");
    for (const auto& row : r_init)
        if (static_cast<int>(row.size()) != hd)
            throw ConfigError("branch: router init vectors must have hidden_dim entries");
    for (int l = 0; l < L; ++l)
        if (!anchor.has_tensor(MoeModel::router_row(l, "pub")))
            throw CheckpointError("branch: anchor is missing its public router row");

    MoeModel b;
    b.config = anchor.config;
    b.config.top_k = 2;
    b.roster = {"pub", expert_id};
    b.biases = {0.0, 0.0};
    b.fingerprints = {anchor.fingerprints.empty() ? std::string{} : anchor.fingerprints[0], ""};

    // Everything inherited from the anchor stays frozen; values are copied
    // bit-for-bit.
    for (const auto& t : anchor.tensors) {
        TensorRecord copy(t.name, t.shape, false);
        copy.values = t.values;
        b.add_tensor(std::move(copy));
    }
    // The new expert starts from the public FFN weights and the pooled-state
    // router row; these are the only trainable tensors.
    for (int l = 0; l < L; ++l) {
        const auto& w1 = anchor.tensor(MoeModel::expert_w1(l, "pub"));
        const auto& w2 = anchor.tensor(MoeModel::expert_w2(l, "pub"));
        TensorRecord e1(MoeModel::expert_w1(l, expert_id), w1.shape, true);
        e1.values = w1.values;
        b.add_tensor(std::move(e1));
        TensorRecord e2(MoeModel::expert_w2(l, expert_id), w2.shape, true);
        e2.values = w2.values;
        b.add_tensor(std::move(e2));
        TensorRecord rr(MoeModel::router_row(l, expert_id), {1, hd}, true);
        rr.values = r_init[static_cast<size_t>(l)];
        b.add_tensor(std::move(rr));
    }
    return b;
}

ExpertBundle extract_bundle(const MoeModel& branch, const std::string& anchor_fingerprint,
                            const std::string& corpus_id, int steps, uint64_t seed) {
    if (branch.roster.size() != 2 || branch.roster[0] != "pub")
        throw ConfigError("bundle extraction: expected a two-expert branch model");
    const std::string& id = branch.roster[1];
    ExpertBundle bundle;
    bundle.expert_id = id;
    bundle.anchor_fingerprint = anchor_fingerprint;
    bundle.corpus_id = corpus_id;
    bundle.steps = steps;
    bundle.seed = seed;
    for (int l = 0; l < branch.config.n_layers; ++l) {
        for (const auto& name : {MoeModel::expert_w1(l, id), MoeModel::expert_w2(l, id),
                                 MoeModel::router_row(l, id)}) {
            const auto& t = branch.tensor(name);
            TensorRecord copy(t.name, t.shape, true);
            copy.values = t.values;
            bundle.tensors.push_back(std::move(copy));
        }
    }
    return bundle;
}

ExpertBundle train_expert(MoeModel& branch, const DomainCorpus& corpus, const TrainConfig& cfg,
                          const std::string& anchor_fingerprint) {
    if (corpus.train.empty()) throw InputError("expert training: corpus has no train split");
    std::vector<std::string> docs = corpus.docs_at(corpus.train);
    train_lm(branch, docs, cfg);
    return extract_bundle(branch, anchor_fingerprint, corpus.domain_id, cfg.steps, cfg.seed);
}

} // namespace flexmerge
