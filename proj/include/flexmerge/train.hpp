#pragma once
// Shared language-model training loop: documents are packed into contiguous
// [BOS doc EOS] streams, chopped into fixed windows, and trained with AdamW
// under a warmup+cosine schedule. The graph is built once and re-run per
// batch. Tensors left non-trainable are hash-checked for drift.
#include <functional>
#include <string>
#include <vector>

#include "flexmerge/model.hpp"
#include "flexmerge/optim.hpp"

namespace flexmerge {

struct TrainConfig {
    int steps = 2000;
    int batch_rows = 16;
    uint64_t seed = 42;
    CosineSchedule schedule{100, 2000, 0.0009, 0.1};
    double weight_decay = 0.0;
    // Coefficient on the Switch-style router load-balance penalty, averaged
    // over layers and added to the CE objective. 0 disables it entirely.
    double load_balance_weight = 0.0;
    // called after every optimizer update: (step, loss, lr)
    std::function<void(int, double, double)> on_step;
};

struct TrainResult {
    double final_loss = 0.0; // mean loss over the last tenth of the run
    int steps = 0;
};

// Warmup = min(100, steps/10), decay to 10% of base over `steps` updates.
CosineSchedule default_schedule(int steps, double base_lr = 0.0009);

// Content hashes of every non-trainable tensor, and the check that none of
// them moved. Training entry points call these around every run; exposed so
// other weight-touching routines can enforce the same contract.
std::vector<std::pair<std::string, std::string>> snapshot_frozen(const MoeModel& m);
void verify_frozen(const MoeModel& m, const std::vector<std::pair<std::string, std::string>>& snap);

// Trains m on the given documents. Window length = config.max_seq_len.
// Returns after `steps` updates; throws InvariantViolation if any frozen
// tensor changed.
TrainResult train_lm(MoeModel& m, const std::vector<std::string>& docs, const TrainConfig& cfg);

// Deterministic packed batches (exposed for tests): fills `ids`, `targets`,
// `mask` for consecutive windows of an endless shuffled-document stream.
class PackedStream {
  public:
    PackedStream(const std::vector<std::string>& docs, int batch_rows, int seq_len, uint64_t seed);
    // Each call advances the stream by batch_rows windows.
    void next(std::vector<int>& ids, std::vector<int>& targets, std::vector<uint8_t>& mask);
    int64_t epoch() const { return epoch_; }

  private:
    void refill();
    const std::vector<std::string>& docs_;
    int rows_, seq_;
    uint64_t seed_;
    int64_t epoch_ = -1;
    std::vector<int> buffer_; // current epoch token stream
    size_t pos_ = 0;
};

} // namespace flexmerge
