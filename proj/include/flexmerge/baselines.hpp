#pragma once
// Reference systems the merged model is measured against: parameter soups,
// logit ensembling over independently trained models, upcycling dense
// checkpoints into a fully trainable mixture, hard classifier routing, and a
// jointly trained mixture at a matched compute budget.
#include <string>
#include <vector>

#include "flexmerge/infer.hpp"
#include "flexmerge/merge.hpp"
#include "flexmerge/model.hpp"
#include "flexmerge/train.hpp"

namespace flexmerge {

// Mean per-token negative log-likelihood of a token sequence (next-token
// targets; BOS/PAD targets are not scored). Sequences longer than the context
// are scored in consecutive windows. Throws InputError when nothing is
// scorable (fewer than two tokens).
double sequence_nll(MoeModel& m, const std::vector<int>& tokens);

// --- Parameter soups -------------------------------------------------------

// Convex combination of checkpoints: every tensor becomes sum_i w_i * t_i,
// accumulated in double. Inputs must agree on config, roster, and biases;
// weights must be nonnegative and sum to 1 within 1e-9.
MoeModel soup_combine(const std::vector<MoeModel>& models, const std::vector<double>& weights);

// Elementwise arithmetic mean of every tensor.
MoeModel soup_average(const std::vector<MoeModel>& models);

// Per-input soup: weights are softmax(-NLL_i(tokens)). A model with infinite
// loss gets weight exactly 0. `weights_out`, when non-null, receives the
// weights actually used.
MoeModel soup_weighted(std::vector<MoeModel>& models, const std::vector<int>& tokens,
                       std::vector<double>* weights_out = nullptr);

// --- Logit ensembling --------------------------------------------------

// Per-model mixture weights from test-input losses: softmax(-L_i / tau), then
// keep the k largest and renormalize the kept mass to 1.
struct EnsembleWeights {
    std::vector<double> w;     // full length; exactly 0 outside the kept set
    std::vector<int> selected; // kept model indices, descending weight
    double tau = 1.0;
    int k = 0;
};

EnsembleWeights btm_weights(const std::vector<double>& losses, double tau, int k);

// Ensemble generation. Weights are computed once from the prefix NLLs and
// stay fixed for the whole continuation; each step evaluates the kept models
// on the same sliding window as `generate`, sums their logits under the fixed
// weights, and feeds the blend to the shared sampler. With a single model the
// output is bit-identical to that model's `generate`.
std::vector<int> btm_generate(std::vector<MoeModel>& models, const std::vector<int>& prefix,
                              double tau, int k, int max_new, const GenParams& params,
                              uint64_t seed, EnsembleWeights* weights_out = nullptr);

// --- Upcycling dense checkpoints into a mixture -----------------------------

// Builds a mixture whose expert FFNs are copied from single-expert dense
// checkpoints and whose shared tensors are the elementwise mean across them.
// Router rows are fresh N(0, 0.02^2) draws. Everything is left trainable:
// the intended follow-up is full-model training on public data via train_lm.
// Rosters always lead with the public slot, so expert_ids[0] must be "pub"
// (the first checkpoint fills it). top_k = 0 picks min(2, n_experts).
MoeModel btx_assemble(const MoeModel& anchor, const std::vector<MoeModel>& dense_experts,
                      const std::vector<std::string>& expert_ids, uint64_t seed, int top_k = 0);

// Continued pretraining of the full anchor — nothing frozen — on one closed
// corpus. This is the dense per-expert baseline behind soups and ensembles.
MoeModel dense_branch(const MoeModel& anchor, const std::vector<std::string>& train_docs,
                      const TrainConfig& cfg);

// --- Classifier routing ------------------------------------------------------

// One-vs-rest argmax over per-domain scorers (ties to the lowest index).
int classify_query(const std::vector<ProxyScorer>& scorers, MoeModel& embedder,
                   const std::string& query);

// Routes the query to the argmax-domain model, which then generates alone.
// The output is bit-identical to calling generate on that model directly;
// there is no blending. `selected`, when non-null, receives the model index.
std::vector<int> classifier_route(const std::vector<ProxyScorer>& scorers, MoeModel& embedder,
                                  std::vector<MoeModel>& models, const std::string& query,
                                  int max_new, const GenParams& params, uint64_t seed,
                                  int* selected = nullptr);

// --- Jointly trained reference mixture ----------------------------------------

struct ReferenceMoeConfig {
    std::vector<std::string> expert_ids; // roster of the joint model
    int steps = 0;                       // explicit step count (ignored when flops > 0)
    uint64_t flops = 0;                  // GEMM-flop budget for the whole training run
    int batch_rows = 16;
    double base_lr = 0.0009;
    double load_balance_weight = 0.0; // optional router balance penalty
    uint64_t seed = 42;
};

struct ReferenceMoeResult {
    MoeModel model;
    int steps = 0;
    uint64_t flops = 0; // measured GEMM flops of the training run
    TrainResult train;
};

// The no-data-restrictions reference: a mixture initialized from the public
// anchor (every expert FFN starts as the anchor's, shared weights equal the
// anchor's, random router) and trained end-to-end on the combined corpus.
// When cfg.flops > 0 the step count is sized from a measured one-step probe
// so the training cost lands within the budget (within half a step's flops).
ReferenceMoeResult unrestricted_moe_train(const MoeModel& anchor,
                                          const std::vector<std::string>& combined_docs,
                                          const ReferenceMoeConfig& cfg);

} // namespace flexmerge
