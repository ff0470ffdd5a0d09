#include "sapo/advantage.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <sstream>

#include "sapo/errors.hpp"

namespace sapo {

std::vector<double> group_advantages(std::span<const double> rewards) {
    if (rewards.size() < 2) {
        throw ConfigError("group advantages need at least two rewards");
    }
    for (std::size_t i = 0; i < rewards.size(); ++i) {
        if (!std::isfinite(rewards[i])) {
            throw InvalidInput("non-finite reward at index " + std::to_string(i));
        }
    }
    std::vector<double> adv(rewards.size(), 0.0);
    const auto [lo, hi] = std::minmax_element(rewards.begin(), rewards.end());
    if (*lo == *hi) {
        return adv;
    }
    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (const double r : rewards) {
        mean += r;
    }
    mean /= n;
    double var = 0.0;
    for (const double r : rewards) {
        var += (r - mean) * (r - mean);
    }
    const double std = std::sqrt(var / n);
    for (std::size_t i = 0; i < rewards.size(); ++i) {
        adv[i] = (rewards[i] - mean) / std;
    }
    return adv;
}

std::vector<std::vector<double>> broadcast_advantage(std::span<const double> advantages,
                                                     std::span<const std::size_t> lengths) {
    if (advantages.size() != lengths.size()) {
        throw InvalidInput("one advantage per trajectory length is required");
    }
    std::vector<std::vector<double>> out;
    out.reserve(lengths.size());
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        out.emplace_back(lengths[i], advantages[i]);
    }
    return out;
}

std::string normalize_answer(std::string_view text) {
    std::string lowered;
    lowered.reserve(text.size());
    for (const char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::ispunct(c)) {
            continue;
        }
        lowered.push_back(static_cast<char>(std::tolower(c)));
    }
    std::istringstream words(lowered);
    std::string word;
    std::string out;
    while (words >> word) {
        if (word == "a" || word == "an" || word == "the") {
            continue;
        }
        if (!out.empty()) {
            out.push_back(' ');
        }
        out += word;
    }
    return out;
}

std::vector<std::string> answer_tokens(std::string_view text) {
    std::istringstream words(normalize_answer(text));
    std::vector<std::string> out;
    std::string w;
    while (words >> w) {
        out.push_back(w);
    }
    return out;
}

namespace {

double token_f1(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
    if (pred.empty() || gold.empty()) {
        return 0.0;
    }
    std::map<std::string, int> counts;
    for (const auto& g : gold) {
        ++counts[g];
    }
    int overlap = 0;
    for (const auto& p : pred) {
        auto it = counts.find(p);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) {
        return 0.0;
    }
    const double precision = static_cast<double>(overlap) / static_cast<double>(pred.size());
    const double recall = static_cast<double>(overlap) / static_cast<double>(gold.size());
    return 2.0 * precision * recall / (precision + recall);
}

void require_gold(const AnswerPair& pair) {
    if (pair.gold.empty()) {
        throw InvalidInput("answer pair has no gold answer");
    }
}

}  // namespace

double f1_reward(const AnswerPair& pair) {
    require_gold(pair);
    const auto pred = answer_tokens(pair.prediction);
    double best = 0.0;
    for (const auto& g : pair.gold) {
        best = std::max(best, token_f1(pred, answer_tokens(g)));
    }
    return best;
}

int em_score(const AnswerPair& pair) {
    require_gold(pair);
    const auto pred = normalize_answer(pair.prediction);
    // An answer that normalizes to nothing never matches (keeps EM=1 => F1=1).
    if (pred.empty()) {
        return 0;
    }
    for (const auto& g : pair.gold) {
        if (normalize_answer(g) == pred) {
            return 1;
        }
    }
    return 0;
}

}  // namespace sapo
