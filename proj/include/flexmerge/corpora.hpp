#pragma once
// Deterministic synthetic corpora: one neutral public mix plus closed domains
// with deliberately distinct byte statistics (arithmetic lines, bracketed
// code, title-case news, short verse). Everything is a pure function of
// (domain, seed, size).
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace flexmerge {

struct DomainCorpus {
    std::string domain_id;
    uint64_t seed = 0;
    std::vector<std::string> documents;
    // disjoint index sets covering all documents
    std::vector<int> train, validation, heldout;

    std::vector<std::string> docs_at(const std::vector<int>& idx) const;
};

// The available domain specs, public mix first.
const std::vector<std::string>& corpus_registry();

// Generates n_docs documents of 64..512 bytes and applies the default
// 0.9/0.05/0.05 split. Unknown spec -> ConfigError.
DomainCorpus make_corpus(const std::string& domain_spec, uint64_t seed, int n_docs);

// Re-partitions the corpus. Fractions must sum to 1; a fraction that rounds
// to an empty set at this corpus size -> ConfigError.
void split_corpus(DomainCorpus& c, std::array<double, 3> fractions, uint64_t seed);

// SHA-256 over the concatenated documents (the determinism contract).
std::string corpus_sha256(const DomainCorpus& c);

// One escaped document per line ("\n" -> "\\n"), plus a JSON manifest with
// domain, seed, counts, splits, and the content hash.
void save_corpus(const DomainCorpus& c, const std::filesystem::path& dir);
DomainCorpus load_corpus(const std::filesystem::path& dir, const std::string& domain_id);

std::string escape_doc(const std::string& doc);
std::string unescape_doc(const std::string& line);

} // namespace flexmerge
