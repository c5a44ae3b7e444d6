// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal autoregressive-model interface consumed by the evaluators, plus
// byte-level tokenization and greedy decoding.

#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cptlab {

using Token = std::uint32_t;
using TokenBlock = std::vector<Token>;

// Byte 0x00 separates documents in packed training streams.
inline constexpr Token kDocumentSeparator = 0;

[[nodiscard]] std::vector<Token> encode_bytes(std::string_view text);
[[nodiscard]] std::string decode_bytes(std::span<const Token> tokens);

// Row-major [positions x vocab] natural-log probabilities.
class LogProbMatrix {
public:
    LogProbMatrix() = default;
    LogProbMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols) {}

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }
    [[nodiscard]] std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    [[nodiscard]] double at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

class LanguageModel {
public:
    virtual ~LanguageModel() = default;

    [[nodiscard]] virtual std::size_t vocab_size() const = 0;
    [[nodiscard]] virtual std::size_t context_length() const = 0;

    // Row t is the next-token distribution after tokens[0..t]. Implementations
    // must be safe to call concurrently.
    [[nodiscard]] virtual LogProbMatrix forward_logprobs(std::span<const Token> tokens) const = 0;

    // Distribution after the whole sequence; override when cheaper than a full forward.
    [[nodiscard]] virtual std::vector<double> last_logprobs(std::span<const Token> tokens) const;
};

// Throws LengthError / VocabError when tokens do not fit the model.
void check_model_input(const LanguageModel& model, std::span<const Token> tokens);

// Appends argmax tokens (ties -> lowest id) until a stop token is emitted or
// max_new tokens were added. Returns prompt + generated tokens, the stop token
// included. Once the sequence outgrows the context, only the trailing
// context_length() tokens are fed to the model.
[[nodiscard]] std::vector<Token> generate_greedy(const LanguageModel& model, std::span<const Token> prompt,
                                                 std::size_t max_new, const std::set<Token>& stop);

} // namespace cptlab
