#include "flexmerge/tokenizer.hpp"

#include "flexmerge/errors.hpp"

namespace flexmerge {

std::vector<int> encode(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size() + 2);
    out.push_back(kBos);
    for (unsigned char c : text) out.push_back(static_cast<int>(c));
    out.push_back(kEos);
    return out;
}

std::string decode(const std::vector<int>& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) {
        if (t < 0 || t >= kVocabSize) throw InputError("decode: token id out of range");
        if (t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

} // namespace flexmerge
