#pragma once
// Merging: stack expert bundles onto the shared anchor (router rows
// [pub; e1; …; en] plus per-expert selection biases), opt experts in and out,
// and optionally tune only the router rows on tiny proxy subsets of the
// public corpus.
#include <string>
#include <vector>

#include "flexmerge/branch.hpp"
#include "flexmerge/corpora.hpp"
#include "flexmerge/model.hpp"

namespace flexmerge {

// Selection bias applied to every non-public expert when the caller does not
// choose one: mildly prefers the public path.
inline constexpr double kDefaultExpertBias = -0.5;

// Builds an (n+1)-expert model from the anchor and n bundles. Row order is
// [pub] + bundle order. `biases` must be one value ≤ 0 per bundle (empty →
// kDefaultExpertBias each); top_k = 0 picks min(4, n+1). Every bundle's
// anchor_fingerprint must equal `anchor_fingerprint`; `bundle_fingerprints`
// optionally records each bundle's own checkpoint hash for opt-out audits.
MoeModel assemble(const MoeModel& anchor, const std::string& anchor_fingerprint,
                  const std::vector<ExpertBundle>& bundles, std::vector<double> biases = {},
                  int top_k = 0, std::vector<std::string> bundle_fingerprints = {});

// Removes one expert: its FFNs, router rows, bias, and roster entry. Every
// remaining tensor is bit-identical; top_k is clamped to the new roster size.
// Removing "pub" is forbidden.
MoeModel opt_out(const MoeModel& model, const std::string& expert_id);

// Changes exactly biases[i]. b must be ≤ 0; -inf is the never-select
// sentinel. The public bias is fixed at zero.
MoeModel set_bias(const MoeModel& model, const std::string& expert_id, double b);

// Binary logistic scorer telling a closed corpus apart from the public one,
// fit on anchor-pooled document embeddings (deepest router-input state).
struct ProxyScorer {
    std::string owner;           // expert id whose data this scorer stands in for
    std::vector<float> mean;     // feature standardization (train-set statistics)
    std::vector<float> inv_std;
    std::vector<float> w;
    float b = 0.0f;
    double val_accuracy = 0.0;   // held-out accuracy, reported to the caller

    // P(doc is closed-domain), in (0, 1).
    double score(MoeModel& anchor, const std::string& doc) const;
};

// Public-corpus documents standing in for one owner's closed data.
struct ProxySet {
    std::string owner;
    std::vector<int> indices;   // into public_corpus.documents, best first
    std::vector<double> scores; // scorer output per selected doc
};

// Fits the scorer on balanced samples (|closed| == |public|, both nonempty).
// One eighth of each class is held out for the reported validation accuracy.
ProxyScorer train_proxy_classifier(MoeModel& anchor, const std::string& owner,
                                   const std::vector<std::string>& closed_sample,
                                   const std::vector<std::string>& public_sample, uint64_t seed);

// Scores every public document and keeps the `cap` highest (ties by document
// index). cap must stay within 0.5% of the closed corpus size — proxy sets
// are tiny by design. cap = 0 is a valid empty set.
ProxySet select_proxy(const ProxyScorer& scorer, MoeModel& anchor,
                      const DomainCorpus& public_corpus, int cap, int closed_corpus_size);

// Language-model tuning of ONLY the router rows (r_pub and every expert row);
// FFNs, attention, embeddings, and biases are frozen and hash-verified.
// Batch rows draw their source uniformly from {each proxy set, public train
// split}. steps = 0 returns the model unchanged bit-exactly.
MoeModel tune_router(const MoeModel& model, const std::vector<ProxySet>& proxy_sets,
                     const DomainCorpus& public_corpus, int steps, uint64_t seed);

} // namespace flexmerge
