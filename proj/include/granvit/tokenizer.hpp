#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace granvit {

// Byte-level tokenizer: ids 0..255 are raw bytes, four specials follow.
// tokenize never emits specials, so detokenize(tokenize(s)) == s for any
// byte string.
namespace tok {

inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kImg = 259;
inline constexpr int kVocab = 260;

inline std::vector<int> tokenize(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
}

inline std::string detokenize(std::span<const int> ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids)
        if (id >= 0 && id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    return out;
}

}  // namespace tok

}  // namespace granvit
