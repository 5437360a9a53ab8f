#pragma once
// Branch training: pair a frozen public anchor with one trainable expert,
// train the expert (FFNs + its router row) on a closed corpus, and export a
// portable bundle holding only the expert's own tensors.
#include <deque>
#include <string>
#include <vector>

#include "flexmerge/corpora.hpp"
#include "flexmerge/model.hpp"
#include "flexmerge/train.hpp"

namespace flexmerge {

// Everything an expert owner ships: no attention/embedding weights, only the
// per-layer FFN pair and router row, plus provenance.
struct ExpertBundle {
    std::string expert_id;
    std::string anchor_fingerprint; // checkpoint hash of the anchor branched from
    double bias = 0.0;              // selection bias, set at merge time; <= 0
    std::string corpus_id;
    int steps = 0;
    uint64_t seed = 0;
    std::deque<TensorRecord> tensors; // layerL.expert.<id>.w1/.w2, layerL.router.<id>

    const TensorRecord& tensor(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw ConfigError("bundle '" + expert_id + "': unknown tensor '" + name + "'");
    }
};

// Per-layer router-row init: the anchor's mean-pooled router-input state,
// averaged over the sample documents. result[layer] has hidden_dim entries.
std::vector<std::vector<float>> init_router_embedding(MoeModel& anchor,
                                                      const std::vector<std::string>& sample_docs);

// Mean-pooled router-input states for one document (helper shared with the
// proxy classifier, which embeds documents the same way).
std::vector<std::vector<float>> pooled_document_state(MoeModel& anchor, const std::string& doc);

// Two-expert branch model [pub, expert_id]: both FFN sets are bit-identical
// copies of the anchor's, the new router rows come from r_init, and exactly
// {expert FFNs, expert router rows} are trainable.
MoeModel init_branch(const MoeModel& anchor, const std::string& expert_id,
                     const std::vector<std::vector<float>>& r_init);

// Next-token training on the corpus train split; aborts if any frozen tensor
// drifts. Extracts the bundle from the trained branch.
ExpertBundle train_expert(MoeModel& branch, const DomainCorpus& corpus, const TrainConfig& cfg,
                          const std::string& anchor_fingerprint);

// The extraction step alone (used for steps=0 flows).
ExpertBundle extract_bundle(const MoeModel& branch, const std::string& anchor_fingerprint,
                            const std::string& corpus_id, int steps, uint64_t seed);

} // namespace flexmerge
