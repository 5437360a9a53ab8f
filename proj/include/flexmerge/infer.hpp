#pragma once
// Sampling-based generation. No KV cache: every step re-runs the forward pass
// over the last max_seq_len tokens of the context (a sliding window once the
// context outgrows it). Sampling order per step: temperature scale -> top-k
// truncate -> top-p truncate -> renormalize -> draw.
#include <cstdint>
#include <vector>

#include "flexmerge/model.hpp"
#include "flexmerge/rng.hpp"

namespace flexmerge {

struct GenParams {
    int top_k = 50;           // 0 disables top-k truncation
    double top_p = 0.95;      // 1.0 disables nucleus truncation
    double temperature = 1.0; // must be > 0 unless greedy
    bool greedy = false;      // argmax decoding, ignores the knobs above
};

// Draws one token id from a row of next-token logits. The nucleus cut keeps
// the smallest high-probability prefix whose mass reaches top_p (the
// crossing token is included). Greedy ties resolve to the lowest id.
int sample_token(const std::vector<float>& logits, const GenParams& p, Rng& rng);

// Appends up to max_new sampled tokens after the prefix and returns only the
// continuation. Deterministic in (weights, prefix, params, seed).
std::vector<int> generate(MoeModel& m, const std::vector<int>& prefix, int max_new,
                          const GenParams& p, uint64_t seed);

// One continuation per seed, all from the same prefix, advanced in a single
// batched forward per step. Row i is bit-identical to generate(..., seeds[i]).
std::vector<std::vector<int>> generate_batch(MoeModel& m, const std::vector<int>& prefix,
                                             int max_new, const GenParams& p,
                                             const std::vector<uint64_t>& seeds);

} // namespace flexmerge
