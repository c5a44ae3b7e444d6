// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0

#include "cptlab/language_model.hpp"

#include <algorithm>

#include "cptlab/errors.hpp"

namespace cptlab {

std::vector<Token> encode_bytes(std::string_view text) {
    std::vector<Token> out;
    out.reserve(text.size());
    for (char c : text) {
        out.push_back(static_cast<unsigned char>(c));
    }
    return out;
}

std::string decode_bytes(std::span<const Token> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (Token t : tokens) {
        out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

std::vector<double> LanguageModel::last_logprobs(std::span<const Token> tokens) const {
    const auto rows = forward_logprobs(tokens);
    const auto last = rows.row(rows.rows() - 1);
    return {last.begin(), last.end()};
}

void check_model_input(const LanguageModel& model, std::span<const Token> tokens) {
    if (tokens.empty()) {
        throw LengthError("empty token sequence");
    }
    if (tokens.size() > model.context_length()) {
        throw LengthError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds context length " +
                          std::to_string(model.context_length()));
    }
    for (Token t : tokens) {
        if (t >= model.vocab_size()) {
            throw VocabError("token id " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(model.vocab_size()));
        }
    }
}

std::vector<Token> generate_greedy(const LanguageModel& model, std::span<const Token> prompt, std::size_t max_new,
                                   const std::set<Token>& stop) {
    if (prompt.empty() || prompt.size() > model.context_length() - 1) {
        throw LengthError("prompt of " + std::to_string(prompt.size()) + " tokens does not fit context length " +
                          std::to_string(model.context_length()) + " minus one");
    }
    std::vector<Token> out(prompt.begin(), prompt.end());
    const std::size_t ctx = model.context_length();
    for (std::size_t i = 0; i < max_new; ++i) {
        const std::size_t begin = out.size() > ctx ? out.size() - ctx : 0;
        const auto logp = model.last_logprobs(std::span<const Token>(out).subspan(begin));
        // max_element returns the first maximum, i.e. the lowest id on ties.
        const auto next = static_cast<Token>(std::max_element(logp.begin(), logp.end()) - logp.begin());
        out.push_back(next);
        if (stop.contains(next)) {
            break;
        }
    }
    return out;
}

} // namespace cptlab
