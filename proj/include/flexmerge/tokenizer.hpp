#pragma once
// Byte-level tokenizer: ids 0..255 are raw bytes, then BOS/EOS/PAD.
#include <string>
#include <string_view>
#include <vector>

namespace flexmerge {

inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kVocabSize = 259;

// [BOS, bytes..., EOS]
std::vector<int> encode(std::string_view text);

// Inverse of encode: emits raw bytes, skipping BOS/EOS/PAD markers.
// Out-of-range ids raise InputError.
std::string decode(const std::vector<int>& tokens);

} // namespace flexmerge
