#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sapo {

/// Group-normalized advantages (R_i - mean) / std with the population std.
/// A group whose rewards are all equal yields exact zeros. Throws ConfigError
/// when fewer than two rewards are given.
std::vector<double> group_advantages(std::span<const double> rewards);

/// Expands one advantage per trajectory to one per token.
std::vector<std::vector<double>> broadcast_advantage(std::span<const double> advantages,
                                                     std::span<const std::size_t> lengths);

struct AnswerPair {
    std::string prediction;
    std::vector<std::string> gold;
};

/// Lowercase, strip punctuation, drop the articles a/an/the, collapse whitespace.
std::string normalize_answer(std::string_view text);

std::vector<std::string> answer_tokens(std::string_view text);

/// Best token-level F1 against any gold answer (multiset overlap).
double f1_reward(const AnswerPair& pair);

int em_score(const AnswerPair& pair);

}  // namespace sapo
