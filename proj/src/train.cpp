#include "flexmerge/train.hpp"

#include <algorithm>
#include <numeric>
#include <utility>

#include "flexmerge/errors.hpp"
#include "flexmerge/graph.hpp"
#include "flexmerge/rng.hpp"
#include "flexmerge/tokenizer.hpp"

namespace flexmerge {

CosineSchedule default_schedule(int steps, double base_lr) {
    if (steps < 1) throw ConfigError("default_schedule: steps must be >= 1");
    CosineSchedule s;
    s.warmup_steps = std::min(100, steps / 10);
    s.total_steps = steps;
    s.base_lr = base_lr;
    s.final_fraction = 0.1;
    return s;
}

std::vector<std::pair<std::string, std::string>> snapshot_frozen(const MoeModel& m) {
    std::vector<std::pair<std::string, std::string>> snap;
    for (const auto& t : m.tensors)
        if (!t.trainable) snap.emplace_back(t.name, t.content_hash());
    return snap;
}

void verify_frozen(const MoeModel& m, const std::vector<std::pair<std::string, std::string>>& snap) {
    for (const auto& [name, hash] : snap) {
        if (m.tensor(name).content_hash() != hash)
            throw InvariantViolation("frozen tensor '" + name + "' changed during training");
    }
}

PackedStream::PackedStream(const std::vector<std::string>& docs, int batch_rows, int seq_len,
                           uint64_t seed)
    : docs_(docs), rows_(batch_rows), seq_(seq_len), seed_(seed) {
    if (docs.empty()) throw InputError("packed stream: no documents");
    if (batch_rows < 1 || seq_len < 2)
        throw ConfigError("packed stream: batch_rows >= 1 and seq_len >= 2 required");
}

void PackedStream::refill() {
    ++epoch_;
    std::vector<size_t> order(docs_.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Rng rng(derive_seed(seed_, static_cast<uint64_t>(epoch_)));
    rng.shuffle(order);
    // Drop the consumed prefix, keep the unconsumed tail so windows straddle
    // epoch boundaries instead of truncating the stream.
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<ptrdiff_t>(pos_));
    pos_ = 0;
    for (size_t idx : order) {
        std::vector<int> toks = encode(docs_[idx]);
        buffer_.insert(buffer_.end(), toks.begin(), toks.end());
    }
}

void PackedStream::next(std::vector<int>& ids, std::vector<int>& targets,
                        std::vector<uint8_t>& mask) {
    const size_t n = static_cast<size_t>(rows_) * static_cast<size_t>(seq_);
    ids.assign(n, kPad);
    targets.assign(n, kPad);
    mask.assign(n, 0);
    const size_t window = static_cast<size_t>(seq_) + 1;
    for (int r = 0; r < rows_; ++r) {
        while (buffer_.size() - pos_ < window) refill();
        for (int j = 0; j < seq_; ++j) {
            int cur = buffer_[pos_ + static_cast<size_t>(j)];
            int nxt = buffer_[pos_ + static_cast<size_t>(j) + 1];
            size_t at = static_cast<size_t>(r) * static_cast<size_t>(seq_) + static_cast<size_t>(j);
            ids[at] = cur;
            targets[at] = nxt;
            // BOS is a document delimiter, never a prediction target; PAD
            // never occurs inside a packed stream but is excluded for
            // uniformity with cropped batches.
            mask[at] = (nxt != kBos && nxt != kPad) ? 1 : 0;
        }
        pos_ += static_cast<size_t>(seq_);
    }
}

TrainResult train_lm(MoeModel& m, const std::vector<std::string>& docs, const TrainConfig& cfg) {
    if (cfg.steps < 0) throw ConfigError("train: steps must be >= 0");
    auto frozen = snapshot_frozen(m);
    if (cfg.steps == 0) return TrainResult{0.0, 0};
    if (docs.empty()) throw InputError("train: no documents");

    auto trainables = m.trainable_tensors();
    if (trainables.empty()) throw ConfigError("train: model has no trainable tensors");

    const int T = m.config.max_seq_len;
    PackedStream stream(docs, cfg.batch_rows, T, cfg.seed);
    std::vector<int> ids, targets;
    std::vector<uint8_t> mask;
    stream.next(ids, targets, mask);

    Graph<float> g;
    ForwardHandles h = build_forward(g, m, ids, cfg.batch_rows, T, targets, mask);

    // Reported losses stay pure CE; the penalty only shapes the gradient.
    int objective = h.loss;
    if (cfg.load_balance_weight > 0.0 && m.n_experts() > 1) {
        int aux = -1;
        for (int gates : h.gates) {
            int lb = g.load_balance(g.softmax_rows(g.node(gates).in[0]), gates);
            aux = (aux < 0) ? lb : g.add_scalars(aux, lb, 1.0, 1.0);
        }
        objective = g.add_scalars(h.loss, aux, 1.0,
                                  cfg.load_balance_weight / static_cast<double>(h.gates.size()));
    }

    AdamW opt;
    opt.schedule = cfg.schedule;
    opt.weight_decay = cfg.weight_decay;

    const int tail_start = cfg.steps - std::max(1, cfg.steps / 10);
    double tail_sum = 0.0;
    int tail_n = 0;
    for (int s = 0; s < cfg.steps; ++s) {
        if (s > 0) {
            stream.next(ids, targets, mask);
            g.set_embedding_ids(h.tok_ids, ids);
            g.set_ce_batch(h.loss, targets, mask);
            g.refresh();
        }
        g.backward(objective);
        double lr = cosine_lr(opt.step_count, opt.schedule);
        opt.step(trainables);
        double loss = static_cast<double>(g.node(h.loss).val[0]);
        if (s >= tail_start) {
            tail_sum += loss;
            ++tail_n;
        }
        if (cfg.on_step) cfg.on_step(s, loss, lr);
    }
    verify_frozen(m, frozen);
    return TrainResult{tail_sum / std::max(1, tail_n), cfg.steps};
}

} // namespace flexmerge
