#pragma once
// Evaluation: held-out perplexity, routing analytics, active-expert sweeps,
// the prefix-continuation extraction attack, and the JSON/CSV report layer.
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "flexmerge/infer.hpp"
#include "flexmerge/model.hpp"

#include "json.hpp"

namespace flexmerge {

// (domain id, documents) pairs — the unit every evaluator consumes.
using DomainDocs = std::vector<std::pair<std::string, std::vector<std::string>>>;

// exp(token-count-weighted mean cross-entropy) over the documents. BOS and
// PAD targets are excluded from the loss. Long documents are evaluated in
// consecutive max_seq_len windows.
double perplexity(MoeModel& m, const std::vector<std::string>& docs);

// Per-layer, per-expert selection fractions (each layer row sums to 1), with
// a per-domain breakdown. At most max_tokens_per_domain tokens are counted
// per domain.
struct RoutingProfile {
    std::vector<std::string> roster;
    int64_t tokens = 0;                           // counted across all domains
    std::vector<std::vector<double>> overall;     // [layer][expert]
    std::vector<std::pair<std::string, std::vector<std::vector<double>>>> per_domain;
};

RoutingProfile routing_profile(MoeModel& m, const DomainDocs& domains, int max_tokens_per_domain);

// Perplexity per domain at each active-expert count k.
struct SweepRow {
    int k = 0;
    std::map<std::string, double> domain_ppl;
    double mean_ppl = 0.0;
};

std::vector<SweepRow> active_expert_sweep(MoeModel& m, const DomainDocs& domains,
                                          const std::vector<int>& ks);

// 1 - editdistance(a, b) / max(|a|, |b|); both empty -> 1.0.
double normalized_levenshtein(const std::vector<int>& a, const std::vector<int>& b);

struct ExtractionParams {
    int prefix_len = 32;
    int continuation_len = 256; // reference cap; generation is length-matched
    int samples_per_prefix = 10;
    double threshold = 0.9; // normalized Levenshtein similarity
    uint64_t seed = 42;
    GenParams sampling; // defaults: top-k 50, top-p 0.95, temperature 1.0
};

struct ExtractionResult {
    int n_docs = 0;      // documents given
    int n_skipped = 0;   // shorter than prefix_len + 1 tokens
    int n_extracted = 0; // any sample >= threshold
    double rate = 0.0;   // n_extracted / attempted (0 when none attempted)
    int prefix_len = 0;
    int continuation_len = 0;
    int samples_per_prefix = 0;
    double threshold = 0.0;
    std::vector<double> best_similarity; // per attempted doc, input order
};

// For each document: take the first prefix_len tokens, sample
// samples_per_prefix continuations (per-trial seeds derived from
// (seed, doc index, sample index)), and compare each against the true
// continuation, capped at continuation_len tokens. Generation is
// length-matched to the reference so short documents remain attackable.
ExtractionResult extraction_attack(MoeModel& m, const std::vector<std::string>& docs,
                                   const ExtractionParams& p);

// Everything one evaluation run reports. `timestamp` is presentation-only
// metadata: comparing two reports for determinism ignores it.
struct OptOutDelta {
    std::string expert_id;
    std::map<std::string, double> ppl_before;
    std::map<std::string, double> ppl_after;
};

struct EvalReport {
    std::string model_id;
    std::string config_hash;
    uint64_t seed = 0;
    std::string timestamp;
    std::map<std::string, double> domain_ppl;
    RoutingProfile routing;
    std::vector<SweepRow> sweep;
    std::vector<OptOutDelta> opt_out;
};

// SHA-256 over the model's architectural identity (config, roster, biases).
std::string model_config_hash(const MoeModel& m);

// Current UTC time, ISO-8601.
std::string now_iso8601();

// schema_version 1. JSON keeps full structure; CSV is one long-format table
// (section,name,domain,layer,expert,k,value).
nlohmann::json report_to_json(const EvalReport& r);
std::string report_to_csv(const EvalReport& r);

// Writes <prefix>.json and <prefix>.csv.
void write_report(const EvalReport& r, const std::filesystem::path& prefix);

nlohmann::json extraction_to_json(const ExtractionResult& r);

} // namespace flexmerge
