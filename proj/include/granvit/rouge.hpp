#pragma once

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace granvit {

struct RougeScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// Lowercase, strip ASCII punctuation, split on whitespace.
inline std::vector<std::string> rouge_tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            if (!cur.empty()) {
                tokens.push_back(cur);
                cur.clear();
            }
        } else if (std::ispunct(c)) {
            continue;
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    if (!cur.empty()) tokens.push_back(cur);
    return tokens;
}

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const std::size_t m = a.size(), n = b.size();
    if (m == 0 || n == 0) return 0;
    std::vector<std::size_t> prev(n + 1, 0), cur(n + 1, 0);
    for (std::size_t i = 1; i <= m; ++i) {
        for (std::size_t j = 1; j <= n; ++j) {
            if (a[i - 1] == b[j - 1])
                cur[j] = prev[j - 1] + 1;
            else
                cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[n];
}

// Sentence-level ROUGE-L F1 (beta = 1). Empty sequences score zero.
inline RougeScore rouge_l(const std::vector<std::string>& candidate,
                          const std::vector<std::string>& reference) {
    RougeScore s;
    if (candidate.empty() || reference.empty()) return s;
    const double l = static_cast<double>(lcs_length(candidate, reference));
    s.precision = l / static_cast<double>(candidate.size());
    s.recall = l / static_cast<double>(reference.size());
    if (s.precision + s.recall > 0.0) s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

inline RougeScore rouge_l(std::string_view candidate, std::string_view reference) {
    return rouge_l(rouge_tokenize(candidate), rouge_tokenize(reference));
}

}  // namespace granvit
