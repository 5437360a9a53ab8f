#include "flexmerge/model.hpp"

#include <algorithm>
#include <cmath>

#include "flexmerge/rng.hpp"

namespace flexmerge {

void ModelConfig::validate(int n_experts) const {
    if (n_layers <= 0 || hidden_dim <= 0 || n_heads <= 0 || ffn_dim <= 0 || vocab_size <= 0 ||
        max_seq_len <= 0 || top_k <= 0)
        throw ConfigError("model config: all dimensions must be positive");
    if (hidden_dim % n_heads != 0) throw ConfigError("model config: hidden_dim % n_heads != 0");
    if (n_experts > 0 && top_k > n_experts)
        throw ConfigError("model config: top_k > n_experts");
}

std::string MoeModel::expert_w1(int layer, const std::string& id) {
    return "layer" + std::to_string(layer) + ".expert." + id + ".w1";
}
std::string MoeModel::expert_w2(int layer, const std::string& id) {
    return "layer" + std::to_string(layer) + ".expert." + id + ".w2";
}
std::string MoeModel::router_row(int layer, const std::string& id) {
    return "layer" + std::to_string(layer) + ".router." + id;
}

MoeModel MoeModel::create(const ModelConfig& cfg, const std::vector<std::string>& roster,
                          uint64_t seed) {
    if (roster.empty() || roster[0] != "pub")
        throw ConfigError("model: roster must start with the public expert 'pub'");
    cfg.validate(static_cast<int>(roster.size()));
    MoeModel m;
    m.config = cfg;
    m.roster = roster;
    m.biases.assign(roster.size(), 0.0);
    m.fingerprints.assign(roster.size(), "");

    Rng rng(derive_seed(seed, 0x6d6f64));
    auto add = [&](const std::string& name, std::vector<int> shape, double stddev) {
        TensorRecord t(name, std::move(shape), true);
        if (stddev > 0)
            for (auto& x : t.values) x = static_cast<float>(rng.normal(0.0, stddev));
        m.add_tensor(std::move(t));
    };
    auto add_gain = [&](const std::string& name) {
        TensorRecord t(name, {cfg.hidden_dim}, true);
        std::fill(t.values.begin(), t.values.end(), 1.f);
        m.add_tensor(std::move(t));
    };

    const double w = 0.02;
    add("tok_embed", {cfg.vocab_size, cfg.hidden_dim}, w);
    add("pos_embed", {cfg.max_seq_len, cfg.hidden_dim}, w);
    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string p = "layer" + std::to_string(l);
        add_gain(p + ".ln1.gain");
        add(p + ".attn.wqkv", {cfg.hidden_dim, 3 * cfg.hidden_dim}, w);
        add(p + ".attn.wo", {cfg.hidden_dim, cfg.hidden_dim}, w);
        add_gain(p + ".ln2.gain");
        for (const auto& id : roster) {
            add(expert_w1(l, id), {cfg.hidden_dim, cfg.ffn_dim}, w);
            add(expert_w2(l, id), {cfg.ffn_dim, cfg.hidden_dim}, w);
            add(router_row(l, id), {1, cfg.hidden_dim}, w);
        }
    }
    add_gain("final_ln.gain");
    add("lm_head", {cfg.hidden_dim, cfg.vocab_size}, w);
    return m;
}

int MoeModel::expert_index(const std::string& id) const {
    for (size_t i = 0; i < roster.size(); ++i)
        if (roster[i] == id) return static_cast<int>(i);
    return -1;
}

TensorRecord& MoeModel::tensor(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("model: unknown tensor '" + name + "'");
    return tensors[it->second];
}

const TensorRecord& MoeModel::tensor(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("model: unknown tensor '" + name + "'");
    return tensors[it->second];
}

TensorRecord& MoeModel::add_tensor(TensorRecord rec) {
    if (index_.count(rec.name)) throw ConfigError("model: duplicate tensor '" + rec.name + "'");
    index_[rec.name] = static_cast<int>(tensors.size());
    tensors.push_back(std::move(rec));
    return tensors.back();
}

std::vector<TensorRecord*> MoeModel::all_tensors() {
    std::vector<TensorRecord*> out;
    out.reserve(tensors.size());
    for (auto& t : tensors) out.push_back(&t);
    return out;
}

std::vector<TensorRecord*> MoeModel::trainable_tensors() {
    std::vector<TensorRecord*> out;
    for (auto& t : tensors)
        if (t.trainable) out.push_back(&t);
    return out;
}

void MoeModel::set_all_trainable(bool trainable) {
    for (auto& t : tensors) t.trainable = trainable;
}

void MoeModel::reindex() {
    index_.clear();
    for (size_t i = 0; i < tensors.size(); ++i) {
        if (index_.count(tensors[i].name))
            throw ConfigError("model: duplicate tensor '" + tensors[i].name + "'");
        index_[tensors[i].name] = static_cast<int>(i);
    }
}

ForwardHandles build_forward(Graph<float>& g, MoeModel& m, const std::vector<int>& ids, int B,
                             int T, const std::vector<int>& targets,
                             const std::vector<uint8_t>& mask) {
    const ModelConfig& cfg = m.config;
    cfg.validate(m.n_experts());
    if (T > cfg.max_seq_len) throw InputError("forward: sequence longer than max_seq_len");
    if (static_cast<int>(ids.size()) != B * T) throw ConfigError("forward: ids size != B*T");
    if (static_cast<int>(m.biases.size()) != m.n_experts())
        throw ConfigError("forward: biases misaligned with roster");

    ForwardHandles h;
    std::vector<int> iota(T);
    for (int i = 0; i < T; ++i) iota[i] = i;
    h.tok_ids = g.embedding(g.param(m.tensor("tok_embed")), ids, "tok_embed");
    int pos = g.embedding(g.param(m.tensor("pos_embed")), iota, "pos_embed");
    int x = g.add_tiled(h.tok_ids, pos, B);

    const int hd = cfg.hidden_dim;
    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string p = "layer" + std::to_string(l);
        int a = g.layer_norm(x, g.param(m.tensor(p + ".ln1.gain")));
        int qkv = g.matmul(a, g.param(m.tensor(p + ".attn.wqkv")));
        int att = g.causal_attention(g.slice_cols(qkv, 0, hd), g.slice_cols(qkv, hd, hd),
                                     g.slice_cols(qkv, 2 * hd, hd), B, T, cfg.n_heads);
        x = g.add(x, g.matmul(att, g.param(m.tensor(p + ".attn.wo"))));

        int mid = g.layer_norm(x, g.param(m.tensor(p + ".ln2.gain")));
        std::vector<int> rows;
        rows.reserve(m.roster.size());
        for (const auto& id : m.roster)
            rows.push_back(g.param(m.tensor(MoeModel::router_row(l, id))));
        h.router_inputs.push_back(mid);
        int rlogits = g.matmul_nt(mid, g.concat_rows(rows));
        int gates = g.moe_gates(rlogits, m.biases, cfg.top_k);
        h.gates.push_back(gates);
        std::vector<int> outs;
        outs.reserve(m.roster.size());
        for (const auto& id : m.roster) {
            int h1 = g.relu(g.matmul(mid, g.param(m.tensor(MoeModel::expert_w1(l, id)))));
            outs.push_back(g.matmul(h1, g.param(m.tensor(MoeModel::expert_w2(l, id)))));
        }
        x = g.add(x, g.moe_combine(gates, outs));
    }

    int fin = g.layer_norm(x, g.param(m.tensor("final_ln.gain")));
    h.final_hidden = fin;
    h.logits = g.matmul(fin, g.param(m.tensor("lm_head")));
    if (!targets.empty()) h.loss = g.cross_entropy_mean(h.logits, targets, mask);
    return h;
}

std::vector<std::vector<double>> RoutingTrace::fractions() const {
    std::vector<std::vector<double>> out(selections.size());
    for (size_t l = 0; l < selections.size(); ++l) {
        int64_t total = 0;
        for (int64_t c : selections[l]) total += c;
        out[l].resize(selections[l].size(), 0.0);
        if (total > 0)
            for (size_t e = 0; e < selections[l].size(); ++e)
                out[l][e] = static_cast<double>(selections[l][e]) / static_cast<double>(total);
    }
    return out;
}

RoutingTrace read_routing_trace(const Graph<float>& g, const ForwardHandles& h, int n_experts,
                                const std::vector<uint8_t>& row_mask) {
    RoutingTrace tr;
    tr.selections.assign(h.gates.size(), std::vector<int64_t>(n_experts, 0));
    tr.gate_mass.assign(h.gates.size(), std::vector<double>(n_experts, 0.0));
    for (size_t l = 0; l < h.gates.size(); ++l) {
        const auto& n = g.node(h.gates[l]);
        int k_eff = n.k_eff;
        int64_t counted = 0;
        for (int i = 0; i < n.r; ++i) {
            if (!row_mask.empty() && !row_mask[i]) continue;
            ++counted;
            const int* sel = n.sel.data() + static_cast<size_t>(i) * k_eff;
            for (int j = 0; j < k_eff; ++j) {
                tr.selections[l][sel[j]] += 1;
                tr.gate_mass[l][sel[j]] += n.val[static_cast<size_t>(i) * n.c + sel[j]];
            }
        }
        tr.tokens = counted;
    }
    return tr;
}

std::vector<int> select_experts(const std::vector<float>& router_logits,
                                const std::vector<double>& biases, int top_k) {
    if (router_logits.size() != biases.size())
        throw ConfigError("select_experts: logits/bias length mismatch");
    int E = static_cast<int>(biases.size());
    if (top_k < 1 || top_k > E) throw ConfigError("select_experts: top_k out of range");
    std::vector<int> order;
    order.reserve(E);
    for (int e = 0; e < E; ++e)
        if (!std::isinf(biases[e])) order.push_back(e);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        double sa = static_cast<double>(router_logits[a]) + biases[a];
        double sb = static_cast<double>(router_logits[b]) + biases[b];
        if (sa != sb) return sa > sb;
        return a < b;
    });
    int k = std::min<int>(top_k, static_cast<int>(order.size()));
    std::vector<int> out(order.begin(), order.begin() + k);
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace flexmerge
