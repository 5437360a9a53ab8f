#pragma once
// Reverse-mode autodiff over a flat tape of nodes. Define-by-run: each builder
// computes its value eagerly (MoE gating needs the router logits at build
// time). The tape can be re-run on mutated leaf contents (`refresh`) so a
// training loop builds its graph once and reuses every buffer.
//
// Templated on scalar S: float for training, double for the
// finite-difference oracle path used by the gradient tests.
#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "flexmerge/errors.hpp"
#include "flexmerge/gemm.hpp"
#include "flexmerge/simd.hpp"
#include "flexmerge/tensor.hpp"

namespace flexmerge {

enum class Op {
    Param,
    Const,
    MatMul,       // [M,K]x[K,N]
    MatMulNT,     // [M,K]x[N,K]^T
    Add,          // same shape
    AddTiled,     // x[B*T,h] + p[T,h] repeated over B
    Scale,        // s * x
    Relu,
    LayerNorm,    // row-wise, learnable gain
    Embedding,    // table[ids]
    SliceCols,
    ConcatRows,
    CausalAttention,
    SoftmaxRows,
    MoeGates,     // top-k selection + softmax over selected unbiased logits
    MoeCombine,   // sum of gate-weighted expert outputs over selected experts
    LoadBalance,  // n_e * sum_e frac_e * colmean(probs)_e, frac constant
    CrossEntropyMean,
    SumAll,
    AddScalars,   // ca*a + cb*b (scalars)
};

template <typename S> class Graph {
  public:
    struct Node {
        Op op;
        std::string label;
        int r = 0, c = 0; // logical [rows, cols]; scalars are 1x1
        std::vector<S> val, grad;
        bool needs_grad = false;
        std::vector<int> in;
        bool grad_ow = false; // sole consumer overwrites grad: skip pre-zeroing
        TensorRecord* bound = nullptr; // Param source
        // op parameters
        int B = 0, T = 0, H = 0;      // attention geometry
        int start = 0, len = 0;       // column slice
        int tiles = 0;                // AddTiled repeat count
        int topk = 0;                 // MoeGates requested k
        double s0 = 0.0, s1 = 0.0;    // Scale / AddScalars coefficients
        std::vector<int> ids;         // Embedding ids or CE targets
        std::vector<uint8_t> mask;    // CE loss mask (1 = counted)
        std::vector<double> biases;   // MoeGates selection biases
        // scratch (attention probs, CE probs, LN stats, selection fractions)
        std::vector<S> scratch;
        std::vector<int> sel;         // MoeGates: per-row selected experts, ascending
        int k_eff = 0;                // per-row selection count after -inf drop
        int ce_count = 0;             // CE: number of counted positions
    };

    const Node& node(int id) const { return nodes_[id]; }
    Node& node_mut(int id) { return nodes_[id]; }
    int size() const { return static_cast<int>(nodes_.size()); }

    // ----- leaves -----------------------------------------------------------

    int param(TensorRecord& t) {
        Node n;
        n.op = Op::Param;
        n.label = t.name;
        n.r = t.rows();
        n.c = t.cols();
        n.bound = &t;
        n.needs_grad = t.trainable;
        n.val.resize(t.values.size());
        copy_in(n.val, t.values);
        return push(std::move(n));
    }

    int constant(std::vector<S> v, int r, int c, const std::string& label = "const") {
        if (static_cast<size_t>(r) * c != v.size()) throw ConfigError("constant: shape mismatch");
        Node n;
        n.op = Op::Const;
        n.label = label;
        n.r = r;
        n.c = c;
        n.val = std::move(v);
        return push(std::move(n));
    }

    // ----- ops --------------------------------------------------------------

    int matmul(int a, int b) {
        const Node &A = nodes_[a], &B = nodes_[b];
        if (A.c != B.r) throw ConfigError("matmul: inner dims " + std::to_string(A.c) + " vs " +
                                          std::to_string(B.r));
        Node n = make(Op::MatMul, A.r, B.c, {a, b});
        return push_eval(std::move(n));
    }

    int matmul_nt(int a, int b) {
        const Node &A = nodes_[a], &B = nodes_[b];
        if (A.c != B.c) throw ConfigError("matmul_nt: inner dims");
        Node n = make(Op::MatMulNT, A.r, B.r, {a, b});
        return push_eval(std::move(n));
    }

    int add(int a, int b) {
        const Node &A = nodes_[a], &B = nodes_[b];
        if (A.r != B.r || A.c != B.c) throw ConfigError("add: shape mismatch");
        Node n = make(Op::Add, A.r, A.c, {a, b});
        return push_eval(std::move(n));
    }

    int add_tiled(int x, int p, int tiles) {
        const Node &X = nodes_[x], &P = nodes_[p];
        if (X.c != P.c || X.r != P.r * tiles) throw ConfigError("add_tiled: shape mismatch");
        Node n = make(Op::AddTiled, X.r, X.c, {x, p});
        n.tiles = tiles;
        return push_eval(std::move(n));
    }

    int scale(int a, double s) {
        Node n = make(Op::Scale, nodes_[a].r, nodes_[a].c, {a});
        n.s0 = s;
        return push_eval(std::move(n));
    }

    int relu(int a) { return push_eval(make(Op::Relu, nodes_[a].r, nodes_[a].c, {a})); }

    int layer_norm(int a, int gain) {
        const Node &A = nodes_[a], &G = nodes_[gain];
        if (G.r * G.c != A.c) throw ConfigError("layer_norm: gain dim");
        Node n = make(Op::LayerNorm, A.r, A.c, {a, gain});
        n.scratch.resize(2 * static_cast<size_t>(A.r)); // per-row mean, inv_std
        return push_eval(std::move(n));
    }

    int embedding(int table, std::vector<int> ids, const std::string& label = "embedding") {
        const Node& Tn = nodes_[table];
        for (int id : ids)
            if (id < 0 || id >= Tn.r) throw InputError(label + ": token id out of range");
        Node n = make(Op::Embedding, static_cast<int>(ids.size()), Tn.c, {table});
        n.label = label;
        n.ids = std::move(ids);
        return push_eval(std::move(n));
    }

    int slice_cols(int a, int start, int len) {
        const Node& A = nodes_[a];
        if (start < 0 || start + len > A.c) throw ConfigError("slice_cols: range");
        Node n = make(Op::SliceCols, A.r, len, {a});
        n.start = start;
        n.len = len;
        return push_eval(std::move(n));
    }

    int concat_rows(const std::vector<int>& parts) {
        if (parts.empty()) throw ConfigError("concat_rows: empty");
        int c = nodes_[parts[0]].c, r = 0;
        for (int p : parts) {
            if (nodes_[p].c != c) throw ConfigError("concat_rows: col mismatch");
            r += nodes_[p].r;
        }
        Node n = make(Op::ConcatRows, r, c, parts);
        return push_eval(std::move(n));
    }

    int causal_attention(int q, int k, int v, int B, int T, int H) {
        const Node& Q = nodes_[q];
        if (Q.r != B * T || Q.c % H != 0) throw ConfigError("attention: geometry");
        if (nodes_[k].r != Q.r || nodes_[v].r != Q.r || nodes_[k].c != Q.c || nodes_[v].c != Q.c)
            throw ConfigError("attention: q/k/v shapes differ");
        Node n = make(Op::CausalAttention, Q.r, Q.c, {q, k, v});
        n.B = B;
        n.T = T;
        n.H = H;
        n.scratch.resize(static_cast<size_t>(B) * H * T * T); // probs
        return push_eval(std::move(n));
    }

    int softmax_rows(int a) {
        Node n = make(Op::SoftmaxRows, nodes_[a].r, nodes_[a].c, {a});
        return push_eval(std::move(n));
    }

    // Selection = top-k of (logits + biases), ties to the lowest index; -inf
    // bias drops an expert entirely. Gates = softmax over the UNBIASED logits
    // of the selected set; unselected entries are exactly zero.
    int moe_gates(int logits, std::vector<double> biases, int k) {
        const Node& L = nodes_[logits];
        int E = L.c;
        if (static_cast<int>(biases.size()) != E) throw ConfigError("moe_gates: bias length");
        if (k > E) throw ConfigError("moe_gates: top_k > n_experts");
        if (k < 1) throw ConfigError("moe_gates: top_k < 1");
        int finite = 0;
        for (double b : biases)
            if (!std::isinf(b)) ++finite;
        if (finite == 0) throw ConfigError("moe_gates: every expert disabled");
        Node n = make(Op::MoeGates, L.r, E, {logits});
        n.topk = k;
        n.k_eff = std::min(k, finite);
        n.biases = std::move(biases);
        n.sel.resize(static_cast<size_t>(L.r) * n.k_eff);
        n.scratch.resize(E); // selection fractions, filled each forward
        return push_eval(std::move(n));
    }

    int moe_combine(int gates, const std::vector<int>& expert_outs) {
        const Node& G = nodes_[gates];
        if (G.op != Op::MoeGates) throw ConfigError("moe_combine: gates input must be moe_gates");
        if (static_cast<int>(expert_outs.size()) != G.c)
            throw ConfigError("moe_combine: expert count mismatch");
        int r = nodes_[expert_outs[0]].r, c = nodes_[expert_outs[0]].c;
        for (int e : expert_outs)
            if (nodes_[e].r != r || nodes_[e].c != c) throw ConfigError("moe_combine: shapes");
        if (r != G.r) throw ConfigError("moe_combine: row mismatch");
        std::vector<int> in{gates};
        in.insert(in.end(), expert_outs.begin(), expert_outs.end());
        Node n = make(Op::MoeCombine, r, c, in);
        return push_eval(std::move(n));
    }

    // Switch-style load-balance term: n_e * sum_e frac_e * colmean(probs)_e,
    // where frac comes from the gates node's last forward (treated constant).
    int load_balance(int probs, int gates) {
        const Node& P = nodes_[probs];
        const Node& G = nodes_[gates];
        if (G.op != Op::MoeGates || P.c != G.c) throw ConfigError("load_balance: inputs");
        Node n = make(Op::LoadBalance, 1, 1, {probs, gates});
        return push_eval(std::move(n));
    }

    int cross_entropy_mean(int logits, std::vector<int> targets, std::vector<uint8_t> mask) {
        const Node& L = nodes_[logits];
        if (static_cast<int>(targets.size()) != L.r || mask.size() != targets.size())
            throw ConfigError("cross_entropy: target/mask length");
        for (size_t i = 0; i < targets.size(); ++i)
            if (mask[i] && (targets[i] < 0 || targets[i] >= L.c))
                throw InputError("cross_entropy: target id out of range");
        Node n = make(Op::CrossEntropyMean, 1, 1, {logits});
        n.ids = std::move(targets);
        n.mask = std::move(mask);
        n.scratch.resize(L.val.size()); // probs for masked rows
        return push_eval(std::move(n));
    }

    int sum_all(int a) { return push_eval(make(Op::SumAll, 1, 1, {a})); }

    int add_scalars(int a, int b, double ca, double cb) {
        if (nodes_[a].r * nodes_[a].c != 1 || nodes_[b].r * nodes_[b].c != 1)
            throw ConfigError("add_scalars: inputs must be scalars");
        Node n = make(Op::AddScalars, 1, 1, {a, b});
        n.s0 = ca;
        n.s1 = cb;
        return push_eval(std::move(n));
    }

    // ----- leaf mutation (arena reuse between steps) -------------------------

    void set_embedding_ids(int node_id, const std::vector<int>& ids) {
        Node& n = nodes_[node_id];
        if (n.op != Op::Embedding) throw ConfigError("set_embedding_ids: wrong node");
        if (ids.size() != n.ids.size()) throw ConfigError("set_embedding_ids: length change");
        int rows = nodes_[n.in[0]].r;
        for (int id : ids)
            if (id < 0 || id >= rows) throw InputError(n.label + ": token id out of range");
        n.ids = ids;
    }

    void set_ce_batch(int node_id, const std::vector<int>& targets,
                      const std::vector<uint8_t>& mask) {
        Node& n = nodes_[node_id];
        if (n.op != Op::CrossEntropyMean) throw ConfigError("set_ce_batch: wrong node");
        if (targets.size() != n.ids.size() || mask.size() != n.mask.size())
            throw ConfigError("set_ce_batch: length change");
        int vocab = nodes_[n.in[0]].c;
        for (size_t i = 0; i < targets.size(); ++i)
            if (mask[i] && (targets[i] < 0 || targets[i] >= vocab))
                throw InputError("cross_entropy: target id out of range");
        n.ids = targets;
        n.mask = mask;
    }

    void set_const(int node_id, const std::vector<S>& v) {
        Node& n = nodes_[node_id];
        if (n.op != Op::Const || v.size() != n.val.size()) throw ConfigError("set_const");
        n.val = v;
    }

    // Recompute every node in creation order (Params re-copy their records).
    void refresh() {
        for (auto& n : nodes_) eval(n);
    }

    // Reverse sweep from a scalar loss; gradients land in node.grad and are
    // flushed to bound TensorRecords of trainable params.
    void backward(int loss) {
        Node& L = nodes_[loss];
        if (L.r * L.c != 1) throw ConfigError("backward: loss must be scalar");
        if (!std::isfinite(static_cast<double>(L.val[0]))) {
            for (const auto& n : nodes_)
                for (S x : n.val)
                    if (!std::isfinite(static_cast<double>(x)))
                        throw NumericError("non-finite value first appears at node '" +
                                           (n.label.empty() ? op_name(n.op) : n.label) + "'");
            throw NumericError("non-finite loss");
        }
        if (!L.needs_grad) throw ConfigError("backward: loss does not depend on any trainable");
        prepare_grad_overwrite(loss);
        for (auto& n : nodes_)
            if (n.needs_grad) {
                if (n.grad_ow)
                    n.grad.resize(n.val.size()); // sole writer overwrites; no pre-zero
                else
                    n.grad.assign(n.val.size(), S(0));
            }
        L.grad[0] = S(1);
        for (int i = loss; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.needs_grad && n.op != Op::Param && n.op != Op::Const) backprop(n);
        }
        for (auto& n : nodes_)
            if (n.op == Op::Param && n.needs_grad && n.bound) {
                n.bound->ensure_grad();
                for (size_t j = 0; j < n.grad.size(); ++j)
                    n.bound->grad[j] = static_cast<float>(n.grad[j]);
            }
    }

  private:
    std::vector<Node> nodes_;
    int ow_prepared_for_ = -1; // loss id the grad_ow flags were computed for

    // True when `op`'s backward writes the complete gradient of input `slot`
    // in one shot, so that a sole-consumer input can be overwritten instead of
    // accumulated (ops with partial/scattered writes must keep accumulating).
    static bool bwd_overwrites(Op op, size_t slot) {
        switch (op) {
            case Op::MatMul:
            case Op::MatMulNT:
            case Op::Add: return true;
            case Op::AddTiled: return slot == 0; // tiled operand sums over tiles
            case Op::Scale:
            case Op::Relu: return true;
            case Op::LayerNorm: return slot == 0; // gain sums over rows
            case Op::CausalAttention: return true; // per-head tiles cover q/k/v
            default: return false;
        }
    }

    // Mark nodes whose gradient has exactly one writer within [0, loss]; their
    // consumer's backprop overwrites instead of accumulating, which also lets
    // backward() skip pre-zeroing those buffers. Aliased inputs (a node used
    // twice by one consumer) are never marked since each use counts once.
    void prepare_grad_overwrite(int loss) {
        if (ow_prepared_for_ == loss) return;
        for (auto& n : nodes_) n.grad_ow = false;
        std::vector<int> uses(nodes_.size(), 0);
        for (int i = 0; i <= loss; ++i)
            for (int j : nodes_[i].in) ++uses[j];
        for (int i = 0; i <= loss; ++i) {
            const Node& n = nodes_[i];
            if (!n.needs_grad || n.op == Op::Param || n.op == Op::Const) continue;
            for (size_t s = 0; s < n.in.size(); ++s) {
                Node& src = nodes_[n.in[s]];
                if (src.needs_grad && uses[n.in[s]] == 1 && bwd_overwrites(n.op, s))
                    src.grad_ow = true;
            }
        }
        ow_prepared_for_ = loss;
    }

    static void copy_in(std::vector<S>& dst, const std::vector<float>& src) {
        for (size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<S>(src[i]);
    }

    Node make(Op op, int r, int c, std::vector<int> in) {
        Node n;
        n.op = op;
        n.r = r;
        n.c = c;
        n.in = std::move(in);
        for (int i : n.in) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
        n.val.resize(static_cast<size_t>(r) * c);
        return n;
    }

    int push(Node&& n) {
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    int push_eval(Node&& n) {
        int id = push(std::move(n));
        eval(nodes_[id]);
        return id;
    }

    static const char* op_name(Op op) {
        switch (op) {
            case Op::Param: return "param";
            case Op::Const: return "const";
            case Op::MatMul: return "matmul";
            case Op::MatMulNT: return "matmul_nt";
            case Op::Add: return "add";
            case Op::AddTiled: return "add_tiled";
            case Op::Scale: return "scale";
            case Op::Relu: return "relu";
            case Op::LayerNorm: return "layer_norm";
            case Op::Embedding: return "embedding";
            case Op::SliceCols: return "slice_cols";
            case Op::ConcatRows: return "concat_rows";
            case Op::CausalAttention: return "causal_attention";
            case Op::SoftmaxRows: return "softmax_rows";
            case Op::MoeGates: return "moe_gates";
            case Op::MoeCombine: return "moe_combine";
            case Op::LoadBalance: return "load_balance";
            case Op::CrossEntropyMean: return "cross_entropy";
            case Op::SumAll: return "sum_all";
            case Op::AddScalars: return "add_scalars";
        }
        return "?";
    }

    // ----- forward ----------------------------------------------------------

    void eval(Node& n) {
        switch (n.op) {
            case Op::Param: copy_in(n.val, n.bound->values); break;
            case Op::Const: break;
            case Op::MatMul: {
                const Node &A = nodes_[n.in[0]], &B = nodes_[n.in[1]];
                gemm_nn0(A.val.data(), B.val.data(), n.val.data(), A.r, A.c, B.c);
                break;
            }
            case Op::MatMulNT: {
                const Node &A = nodes_[n.in[0]], &B = nodes_[n.in[1]];
                gemm_nt0(A.val.data(), B.val.data(), n.val.data(), A.r, A.c, B.r);
                break;
            }
            case Op::Add: {
                const Node &A = nodes_[n.in[0]], &B = nodes_[n.in[1]];
                for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = A.val[i] + B.val[i];
                break;
            }
            case Op::AddTiled: {
                const Node &X = nodes_[n.in[0]], &P = nodes_[n.in[1]];
                size_t block = P.val.size();
                for (int t = 0; t < n.tiles; ++t)
                    for (size_t i = 0; i < block; ++i)
                        n.val[t * block + i] = X.val[t * block + i] + P.val[i];
                break;
            }
            case Op::Scale: {
                const Node& A = nodes_[n.in[0]];
                S s = static_cast<S>(n.s0);
                for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = s * A.val[i];
                break;
            }
            case Op::Relu: {
                const Node& A = nodes_[n.in[0]];
                for (size_t i = 0; i < n.val.size(); ++i)
                    n.val[i] = A.val[i] > S(0) ? A.val[i] : S(0);
                break;
            }
            case Op::LayerNorm: eval_layer_norm(n); break;
            case Op::Embedding: {
                const Node& Tn = nodes_[n.in[0]];
                for (int i = 0; i < n.r; ++i)
                    std::memcpy(n.val.data() + static_cast<size_t>(i) * n.c,
                                Tn.val.data() + static_cast<size_t>(n.ids[i]) * n.c,
                                sizeof(S) * n.c);
                break;
            }
            case Op::SliceCols: {
                const Node& A = nodes_[n.in[0]];
                for (int i = 0; i < n.r; ++i)
                    std::memcpy(n.val.data() + static_cast<size_t>(i) * n.len,
                                A.val.data() + static_cast<size_t>(i) * A.c + n.start,
                                sizeof(S) * n.len);
                break;
            }
            case Op::ConcatRows: {
                size_t off = 0;
                for (int p : n.in) {
                    const Node& P = nodes_[p];
                    std::memcpy(n.val.data() + off, P.val.data(), sizeof(S) * P.val.size());
                    off += P.val.size();
                }
                break;
            }
            case Op::CausalAttention: eval_attention(n); break;
            case Op::SoftmaxRows: {
                const Node& A = nodes_[n.in[0]];
                for (int i = 0; i < n.r; ++i) softmax_row(A.val.data() + (size_t)i * n.c,
                                                          n.val.data() + (size_t)i * n.c, n.c);
                break;
            }
            case Op::MoeGates: eval_moe_gates(n); break;
            case Op::MoeCombine: eval_moe_combine(n); break;
            case Op::LoadBalance: {
                const Node& P = nodes_[n.in[0]];
                const Node& G = nodes_[n.in[1]];
                int E = P.c;
                double acc = 0.0;
                for (int e = 0; e < E; ++e) {
                    double colmean = 0.0;
                    for (int i = 0; i < P.r; ++i) colmean += static_cast<double>(P.val[(size_t)i * E + e]);
                    colmean /= P.r;
                    acc += static_cast<double>(G.scratch[e]) * colmean;
                }
                n.val[0] = static_cast<S>(acc * E);
                break;
            }
            case Op::CrossEntropyMean: eval_ce(n); break;
            case Op::SumAll: {
                const Node& A = nodes_[n.in[0]];
                S acc = S(0);
                for (S x : A.val) acc += x;
                n.val[0] = acc;
                break;
            }
            case Op::AddScalars: {
                n.val[0] = static_cast<S>(n.s0) * nodes_[n.in[0]].val[0] +
                           static_cast<S>(n.s1) * nodes_[n.in[1]].val[0];
                break;
            }
        }
    }

    static void softmax_row(const S* x, S* y, int n) {
        S m = detail::row_max(x, n);
        S sum = detail::exp_row_shift(x, y, n, m);
        S inv = S(1) / sum;
        for (int i = 0; i < n; ++i) y[i] *= inv;
    }

    void eval_layer_norm(Node& n) {
        const Node& A = nodes_[n.in[0]];
        const Node& G = nodes_[n.in[1]];
        const S eps = static_cast<S>(1e-5);
        for (int i = 0; i < n.r; ++i) {
            const S* x = A.val.data() + static_cast<size_t>(i) * n.c;
            S* y = n.val.data() + static_cast<size_t>(i) * n.c;
            S mean = detail::row_sum(x, n.c) / static_cast<S>(n.c);
            S var = detail::row_center_sqsum(x, n.c, mean) / static_cast<S>(n.c);
            S inv = S(1) / std::sqrt(var + eps);
            n.scratch[2 * i] = mean;
            n.scratch[2 * i + 1] = inv;
            for (int j = 0; j < n.c; ++j) y[j] = (x[j] - mean) * inv * G.val[j];
        }
    }

    void eval_attention(Node& n) {
        const Node &Q = nodes_[n.in[0]], &K = nodes_[n.in[1]], &V = nodes_[n.in[2]];
        int B = n.B, T = n.T, H = n.H, h = n.c, dh = h / H;
        S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
        thread_local std::vector<S> sc; // raw scores for one (b,head)
        sc.resize(static_cast<size_t>(T) * T);
        for (int b = 0; b < B; ++b) {
            for (int hd = 0; hd < H; ++hd) {
                const S* q = Q.val.data() + (static_cast<size_t>(b) * T) * h + hd * dh;
                const S* k = K.val.data() + (static_cast<size_t>(b) * T) * h + hd * dh;
                const S* v = V.val.data() + (static_cast<size_t>(b) * T) * h + hd * dh;
                S* probs = n.scratch.data() + ((static_cast<size_t>(b) * H + hd) * T) * T;
                gemm_nt0_strided(q, h, k, h, sc.data(), T, T, dh, T);
                for (int i = 0; i < T; ++i) {
                    const S* srow = sc.data() + static_cast<size_t>(i) * T;
                    S* prow = probs + static_cast<size_t>(i) * T;
                    S m = detail::row_max(srow, i + 1) * inv_sqrt;
                    S sum = detail::exp_row_scaled(srow, prow, i + 1, inv_sqrt, m);
                    S inv = S(1) / sum;
                    for (int j = 0; j <= i; ++j) prow[j] *= inv;
                    for (int j = i + 1; j < T; ++j) prow[j] = S(0);
                }
                S* o = n.val.data() + (static_cast<size_t>(b) * T) * h + hd * dh;
                gemm_nn0_strided(probs, T, v, h, o, h, T, T, dh);
            }
        }
    }

    void eval_moe_gates(Node& n) {
        const Node& L = nodes_[n.in[0]];
        int E = n.c, R = n.r, k_eff = n.k_eff;
        std::fill(n.val.begin(), n.val.end(), S(0));
        std::vector<int> counts(E, 0);
        std::vector<int> order(E);
        for (int i = 0; i < R; ++i) {
            const S* lr = L.val.data() + static_cast<size_t>(i) * E;
            // rank experts by biased score desc, index asc; -inf never selected
            int m = 0;
            for (int e = 0; e < E; ++e)
                if (!std::isinf(n.biases[e])) order[m++] = e;
            std::stable_sort(order.begin(), order.begin() + m, [&](int a, int b) {
                double sa = static_cast<double>(lr[a]) + n.biases[a];
                double sb = static_cast<double>(lr[b]) + n.biases[b];
                if (sa != sb) return sa > sb;
                return a < b;
            });
            int* sel = n.sel.data() + static_cast<size_t>(i) * k_eff;
            for (int j = 0; j < k_eff; ++j) sel[j] = order[j];
            std::sort(sel, sel + k_eff);
            // gates: softmax over UNBIASED logits of the selected set
            S mx = lr[sel[0]];
            for (int j = 1; j < k_eff; ++j) mx = std::max(mx, lr[sel[j]]);
            S sum = S(0);
            S* g = n.val.data() + static_cast<size_t>(i) * E;
            for (int j = 0; j < k_eff; ++j) {
                g[sel[j]] = std::exp(lr[sel[j]] - mx);
                sum += g[sel[j]];
            }
            S inv = S(1) / sum;
            for (int j = 0; j < k_eff; ++j) {
                g[sel[j]] *= inv;
                ++counts[sel[j]];
            }
        }
        double total = static_cast<double>(R) * k_eff;
        for (int e = 0; e < E; ++e) n.scratch[e] = static_cast<S>(counts[e] / total);
    }

    void eval_moe_combine(Node& n) {
        const Node& G = nodes_[n.in[0]];
        int k_eff = G.k_eff, c = n.c;
        for (int i = 0; i < n.r; ++i) {
            S* y = n.val.data() + static_cast<size_t>(i) * c;
            std::fill(y, y + c, S(0));
            const int* sel = G.sel.data() + static_cast<size_t>(i) * k_eff;
            const S* g = G.val.data() + static_cast<size_t>(i) * G.c;
            for (int j = 0; j < k_eff; ++j) {
                int e = sel[j];
                const S* x = nodes_[n.in[1 + e]].val.data() + static_cast<size_t>(i) * c;
                S ge = g[e];
                for (int q = 0; q < c; ++q) y[q] += ge * x[q];
            }
        }
    }

    void eval_ce(Node& n) {
        const Node& L = nodes_[n.in[0]];
        int V = L.c;
        double total = 0.0;
        int count = 0;
        for (int i = 0; i < L.r; ++i) {
            if (!n.mask[i]) continue;
            const S* x = L.val.data() + static_cast<size_t>(i) * V;
            S* p = n.scratch.data() + static_cast<size_t>(i) * V;
            S m = detail::row_max(x, V);
            S sum = detail::exp_row_shift(x, p, V, m);
            S inv = S(1) / sum;
            for (int j = 0; j < V; ++j) p[j] *= inv;
            total += std::log(static_cast<double>(sum)) + static_cast<double>(m) -
                     static_cast<double>(x[n.ids[i]]);
            ++count;
        }
        if (count == 0) throw InputError("cross_entropy: empty loss mask");
        n.ce_count = count;
        n.val[0] = static_cast<S>(total / count);
    }

    // ----- backward ---------------------------------------------------------

    void backprop(Node& n) {
        switch (n.op) {
            case Op::Param:
            case Op::Const: break;
            case Op::MatMul: {
                Node &A = nodes_[n.in[0]], &B = nodes_[n.in[1]];
                if (A.needs_grad) {
                    if (A.grad_ow)
                        gemm_nt0(n.grad.data(), B.val.data(), A.grad.data(), A.r, B.c, A.c);
                    else
                        gemm_nt(n.grad.data(), B.val.data(), A.grad.data(), A.r, B.c, A.c);
                }
                if (B.needs_grad) {
                    if (B.grad_ow)
                        gemm_tn0(A.val.data(), n.grad.data(), B.grad.data(), A.r, A.c, B.c);
                    else
                        gemm_tn(A.val.data(), n.grad.data(), B.grad.data(), A.r, A.c, B.c);
                }
                break;
            }
            case Op::MatMulNT: {
                Node &A = nodes_[n.in[0]], &B = nodes_[n.in[1]];
                if (A.needs_grad) {
                    if (A.grad_ow)
                        gemm_nn0(n.grad.data(), B.val.data(), A.grad.data(), A.r, B.r, A.c);
                    else
                        gemm_nn(n.grad.data(), B.val.data(), A.grad.data(), A.r, B.r, A.c);
                }
                if (B.needs_grad) {
                    if (B.grad_ow)
                        gemm_tn0(n.grad.data(), A.val.data(), B.grad.data(), A.r, B.r, A.c);
                    else
                        gemm_tn(n.grad.data(), A.val.data(), B.grad.data(), A.r, B.r, A.c);
                }
                break;
            }
            case Op::Add: {
                for (int s = 0; s < 2; ++s) {
                    Node& X = nodes_[n.in[s]];
                    if (!X.needs_grad) continue;
                    if (X.grad_ow)
                        std::copy(n.grad.begin(), n.grad.end(), X.grad.begin());
                    else
                        for (size_t i = 0; i < n.grad.size(); ++i) X.grad[i] += n.grad[i];
                }
                break;
            }
            case Op::AddTiled: {
                Node &X = nodes_[n.in[0]], &P = nodes_[n.in[1]];
                size_t block = P.val.size();
                if (X.needs_grad) {
                    if (X.grad_ow)
                        std::copy(n.grad.begin(), n.grad.end(), X.grad.begin());
                    else
                        for (size_t i = 0; i < n.grad.size(); ++i) X.grad[i] += n.grad[i];
                }
                if (P.needs_grad)
                    for (int t = 0; t < n.tiles; ++t)
                        for (size_t i = 0; i < block; ++i) P.grad[i] += n.grad[t * block + i];
                break;
            }
            case Op::Scale: {
                Node& A = nodes_[n.in[0]];
                if (!A.needs_grad) break;
                S s = static_cast<S>(n.s0);
                if (A.grad_ow)
                    for (size_t i = 0; i < n.grad.size(); ++i) A.grad[i] = s * n.grad[i];
                else
                    for (size_t i = 0; i < n.grad.size(); ++i) A.grad[i] += s * n.grad[i];
                break;
            }
            case Op::Relu: {
                Node& A = nodes_[n.in[0]];
                if (!A.needs_grad) break;
                // select form (instead of a branch) so the loop vectorizes
                if (A.grad_ow)
                    for (size_t i = 0; i < n.grad.size(); ++i)
                        A.grad[i] = A.val[i] > S(0) ? n.grad[i] : S(0);
                else
                    for (size_t i = 0; i < n.grad.size(); ++i)
                        A.grad[i] += A.val[i] > S(0) ? n.grad[i] : S(0);
                break;
            }
            case Op::LayerNorm: backprop_layer_norm(n); break;
            case Op::Embedding: {
                Node& Tn = nodes_[n.in[0]];
                if (!Tn.needs_grad) break;
                for (int i = 0; i < n.r; ++i) {
                    S* dst = Tn.grad.data() + static_cast<size_t>(n.ids[i]) * n.c;
                    const S* src = n.grad.data() + static_cast<size_t>(i) * n.c;
                    for (int j = 0; j < n.c; ++j) dst[j] += src[j];
                }
                break;
            }
            case Op::SliceCols: {
                Node& A = nodes_[n.in[0]];
                if (!A.needs_grad) break;
                for (int i = 0; i < n.r; ++i) {
                    S* dst = A.grad.data() + static_cast<size_t>(i) * A.c + n.start;
                    const S* src = n.grad.data() + static_cast<size_t>(i) * n.len;
                    for (int j = 0; j < n.len; ++j) dst[j] += src[j];
                }
                break;
            }
            case Op::ConcatRows: {
                size_t off = 0;
                for (int p : n.in) {
                    Node& P = nodes_[p];
                    if (P.needs_grad)
                        for (size_t i = 0; i < P.val.size(); ++i) P.grad[i] += n.grad[off + i];
                    off += P.val.size();
                }
                break;
            }
            case Op::CausalAttention: backprop_attention(n); break;
            case Op::SoftmaxRows: {
                Node& A = nodes_[n.in[0]];
                if (!A.needs_grad) break;
                for (int i = 0; i < n.r; ++i) {
                    const S* y = n.val.data() + static_cast<size_t>(i) * n.c;
                    const S* dy = n.grad.data() + static_cast<size_t>(i) * n.c;
                    S dot = S(0);
                    for (int j = 0; j < n.c; ++j) dot += y[j] * dy[j];
                    S* dx = A.grad.data() + static_cast<size_t>(i) * n.c;
                    for (int j = 0; j < n.c; ++j) dx[j] += y[j] * (dy[j] - dot);
                }
                break;
            }
            case Op::MoeGates: {
                Node& L = nodes_[n.in[0]];
                if (!L.needs_grad) break;
                int k_eff = n.k_eff;
                for (int i = 0; i < n.r; ++i) {
                    const int* sel = n.sel.data() + static_cast<size_t>(i) * k_eff;
                    const S* g = n.val.data() + static_cast<size_t>(i) * n.c;
                    const S* dg = n.grad.data() + static_cast<size_t>(i) * n.c;
                    S dot = S(0);
                    for (int j = 0; j < k_eff; ++j) dot += g[sel[j]] * dg[sel[j]];
                    S* dl = L.grad.data() + static_cast<size_t>(i) * n.c;
                    for (int j = 0; j < k_eff; ++j) {
                        int e = sel[j];
                        dl[e] += g[e] * (dg[e] - dot);
                    }
                }
                break;
            }
            case Op::MoeCombine: {
                Node& G = nodes_[n.in[0]];
                int k_eff = G.k_eff, c = n.c;
                for (int i = 0; i < n.r; ++i) {
                    const int* sel = G.sel.data() + static_cast<size_t>(i) * k_eff;
                    const S* g = G.val.data() + static_cast<size_t>(i) * G.c;
                    const S* dy = n.grad.data() + static_cast<size_t>(i) * c;
                    for (int j = 0; j < k_eff; ++j) {
                        int e = sel[j];
                        Node& X = nodes_[n.in[1 + e]];
                        const S* x = X.val.data() + static_cast<size_t>(i) * c;
                        if (G.needs_grad)
                            G.grad[static_cast<size_t>(i) * G.c + e] += detail::dot_row(x, dy, c);
                        if (X.needs_grad) {
                            S* dx = X.grad.data() + static_cast<size_t>(i) * c;
                            S ge = g[e];
                            for (int q = 0; q < c; ++q) dx[q] += ge * dy[q];
                        }
                    }
                }
                break;
            }
            case Op::LoadBalance: {
                Node& P = nodes_[n.in[0]];
                const Node& G = nodes_[n.in[1]];
                if (!P.needs_grad) break;
                int E = P.c;
                S d = n.grad[0] * static_cast<S>(E) / static_cast<S>(P.r);
                for (int i = 0; i < P.r; ++i)
                    for (int e = 0; e < E; ++e)
                        P.grad[static_cast<size_t>(i) * E + e] += d * G.scratch[e];
                break;
            }
            case Op::CrossEntropyMean: {
                Node& L = nodes_[n.in[0]];
                if (!L.needs_grad) break;
                int V = L.c;
                S d = n.grad[0] / static_cast<S>(n.ce_count);
                for (int i = 0; i < L.r; ++i) {
                    if (!n.mask[i]) continue;
                    const S* p = n.scratch.data() + static_cast<size_t>(i) * V;
                    S* dl = L.grad.data() + static_cast<size_t>(i) * V;
                    for (int j = 0; j < V; ++j) dl[j] += d * p[j];
                    dl[n.ids[i]] -= d;
                }
                break;
            }
            case Op::SumAll: {
                Node& A = nodes_[n.in[0]];
                if (!A.needs_grad) break;
                for (size_t i = 0; i < A.grad.size(); ++i) A.grad[i] += n.grad[0];
                break;
            }
            case Op::AddScalars: {
                Node &A = nodes_[n.in[0]], &B = nodes_[n.in[1]];
                if (A.needs_grad) A.grad[0] += static_cast<S>(n.s0) * n.grad[0];
                if (B.needs_grad) B.grad[0] += static_cast<S>(n.s1) * n.grad[0];
                break;
            }
        }
    }

    void backprop_layer_norm(Node& n) {
        Node& A = nodes_[n.in[0]];
        Node& G = nodes_[n.in[1]];
        int c = n.c;
        for (int i = 0; i < n.r; ++i) {
            const S* x = A.val.data() + static_cast<size_t>(i) * c;
            const S* dy = n.grad.data() + static_cast<size_t>(i) * c;
            S mean = n.scratch[2 * i], inv = n.scratch[2 * i + 1];
            if (G.needs_grad) {
                for (int j = 0; j < c; ++j) G.grad[j] += (x[j] - mean) * inv * dy[j];
            }
            if (A.needs_grad) {
                // dx = inv * (g - mean(g) - xhat * mean(g*xhat)), g = dy*gain
                S mg, mgx;
                detail::ln_bwd_dots(x, dy, G.val.data(), c, mean, inv, mg, mgx);
                mg /= static_cast<S>(c);
                mgx /= static_cast<S>(c);
                S* dx = A.grad.data() + static_cast<size_t>(i) * c;
                if (A.grad_ow)
                    for (int j = 0; j < c; ++j) {
                        S g = dy[j] * G.val[j];
                        S xh = (x[j] - mean) * inv;
                        dx[j] = inv * (g - mg - xh * mgx);
                    }
                else
                    for (int j = 0; j < c; ++j) {
                        S g = dy[j] * G.val[j];
                        S xh = (x[j] - mean) * inv;
                        dx[j] += inv * (g - mg - xh * mgx);
                    }
            }
        }
    }

    void backprop_attention(Node& n) {
        Node &Q = nodes_[n.in[0]], &K = nodes_[n.in[1]], &V = nodes_[n.in[2]];
        int B = n.B, T = n.T, H = n.H, h = n.c, dh = h / H;
        S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
        thread_local std::vector<S> dp; // reused dP/dS scratch
        dp.resize(static_cast<size_t>(T) * T);
        for (int b = 0; b < B; ++b) {
            for (int hd = 0; hd < H; ++hd) {
                size_t base = (static_cast<size_t>(b) * T) * h + hd * dh;
                const S* q = Q.val.data() + base;
                const S* k = K.val.data() + base;
                const S* v = V.val.data() + base;
                const S* probs = n.scratch.data() + ((static_cast<size_t>(b) * H + hd) * T) * T;
                const S* dout = n.grad.data() + base;
                if (V.needs_grad) { // dV += P^T dO (per-head tiles cover V once)
                    if (V.grad_ow)
                        gemm_tn0_strided(probs, T, dout, h, V.grad.data() + base, h, T, T, dh);
                    else
                        gemm_tn_strided(probs, T, dout, h, V.grad.data() + base, h, T, T, dh);
                }
                // dP = dO V^T, then softmax backward (rows, causal) -> dS
                gemm_nt0_strided(dout, h, v, h, dp.data(), T, T, dh, T);
                for (int i = 0; i < T; ++i) {
                    const S* prow = probs + static_cast<size_t>(i) * T;
                    S* drow = dp.data() + static_cast<size_t>(i) * T;
                    S dot = detail::dot_row(prow, drow, i + 1);
                    for (int j = 0; j <= i; ++j) drow[j] = inv_sqrt * prow[j] * (drow[j] - dot);
                    for (int j = i + 1; j < T; ++j) drow[j] = S(0);
                }
                if (Q.needs_grad) { // dQ += dS K
                    if (Q.grad_ow)
                        gemm_nn0_strided(dp.data(), T, k, h, Q.grad.data() + base, h, T, T, dh);
                    else
                        gemm_nn_strided(dp.data(), T, k, h, Q.grad.data() + base, h, T, T, dh);
                }
                if (K.needs_grad) { // dK += dS^T Q
                    if (K.grad_ow)
                        gemm_tn0_strided(dp.data(), T, q, h, K.grad.data() + base, h, T, T, dh);
                    else
                        gemm_tn_strided(dp.data(), T, q, h, K.grad.data() + base, h, T, T, dh);
                }
            }
        }
    }
};

} // namespace flexmerge
