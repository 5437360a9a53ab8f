#pragma once
// The transformer: token/position embeddings, pre-norm attention blocks, and a
// per-layer expert mixture. One model type covers every stage of the
// lifecycle — the public anchor is the single-expert case, a branch model is
// the two-expert case, and a merged model carries the full roster. Expert
// tensors are named by roster id so removal is auditable by name.
#include <deque>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "flexmerge/graph.hpp"
#include "flexmerge/tensor.hpp"

namespace flexmerge {

struct ModelConfig {
    int n_layers = 4;
    int hidden_dim = 128;
    int n_heads = 4;
    int ffn_dim = 512;
    int vocab_size = 259;
    int max_seq_len = 256;
    int top_k = 2; // active experts per token

    void validate(int n_experts) const;
    bool operator==(const ModelConfig&) const = default;
};

// Expert ids: roster[0] is always the public expert "pub". biases[i] ≤ 0 with
// biases[0] = 0; -inf is the never-select sentinel. fingerprints[i] records
// the checkpoint hash the expert came from ("" for anchor-born tensors).
class MoeModel {
  public:
    ModelConfig config;
    std::vector<std::string> roster;
    std::vector<double> biases;
    std::vector<std::string> fingerprints;
    std::deque<TensorRecord> tensors; // deque: stable addresses for graph binding

    // Fresh random-init model with the given roster (every expert starts with
    // its own tensors; callers overwrite them when branching/merging).
    static MoeModel create(const ModelConfig& cfg, const std::vector<std::string>& roster,
                           uint64_t seed);

    int n_experts() const { return static_cast<int>(roster.size()); }
    int expert_index(const std::string& id) const; // -1 if absent

    bool has_tensor(const std::string& name) const { return index_.count(name) != 0; }
    TensorRecord& tensor(const std::string& name);
    const TensorRecord& tensor(const std::string& name) const;
    TensorRecord& add_tensor(TensorRecord rec); // rejects duplicates

    std::vector<TensorRecord*> all_tensors();
    std::vector<TensorRecord*> trainable_tensors();

    void set_all_trainable(bool trainable);
    // Rebuild the name index (required after structural edits to `tensors`).
    void reindex();

    // Canonical tensor names.
    static std::string expert_w1(int layer, const std::string& id);
    static std::string expert_w2(int layer, const std::string& id);
    static std::string router_row(int layer, const std::string& id);

  private:
    std::unordered_map<std::string, int> index_;
};

// Node handles into a built forward graph, for loss reuse and trace reads.
struct ForwardHandles {
    int tok_ids = -1;               // embedding node (mutate ids between batches)
    int logits = -1;                // [B*T, vocab]
    int loss = -1;                  // CE node, -1 when built without targets
    std::vector<int> gates;         // per-layer MoeGates node
    std::vector<int> router_inputs; // per-layer normalized hidden feeding the router
    int final_hidden = -1;          // post-final-norm hidden, [B*T, h]
};

// Builds the full forward pass for B rows of T tokens into g, binding the
// model's tensors as graph parameters. When `targets` is nonempty a
// cross-entropy-mean loss node is added (mask: 1 = counted position).
ForwardHandles build_forward(Graph<float>& g, MoeModel& m, const std::vector<int>& ids, int B,
                             int T, const std::vector<int>& targets = {},
                             const std::vector<uint8_t>& mask = {});

// Per-layer routing statistics harvested from a forward evaluation. Rows with
// row_mask = 0 (padding) are excluded. fraction[l][e] sums to 1 per layer.
struct RoutingTrace {
    std::vector<std::vector<int64_t>> selections; // [layer][expert]
    std::vector<std::vector<double>> gate_mass;   // [layer][expert]
    int64_t tokens = 0;                           // counted rows per layer
    std::vector<std::vector<double>> fractions() const;
};

RoutingTrace read_routing_trace(const Graph<float>& g, const ForwardHandles& h, int n_experts,
                                const std::vector<uint8_t>& row_mask = {});

// Top-k selection rule shared by the layer and by offline analysis: indices of
// the top_k largest (logit + bias) scores, ties to the lowest index; -inf
// biased experts are never selected.
std::vector<int> select_experts(const std::vector<float>& router_logits,
                                const std::vector<double>& biases, int top_k);

} // namespace flexmerge
