// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Multiple-choice prompting: per-choice answer log-likelihoods, argmax
// selection, base-2 answer perplexity over a dataset, and natural-base
// validation perplexity over a token stream.
//
// Prompt template "mcp-v1" (demonstrations separated by one blank line):
//
//   <question>
//   A. <choice text>
//   B. <choice text>
//   Answer: <label>
//
// The query block ends right after "Answer: "; the scored continuation is
// the label (default) or the choice text.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cptlab/language_model.hpp"
#include "cptlab/mixer.hpp"

namespace cptlab {

inline constexpr std::string_view kMcpTemplate = "mcp-v1";

struct McpChoice {
    std::string label;
    std::string text;
    friend bool operator==(const McpChoice&, const McpChoice&) = default;
};

struct McpItem {
    std::string question;
    std::vector<McpChoice> choices;
    std::size_t correct_index = 0;
    // Optional fixed demonstrations (their own demos are ignored).
    std::vector<McpItem> demos;

    // Throws ValidationError.
    void validate() const;
    friend bool operator==(const McpItem&, const McpItem&) = default;
};

struct McpDataset {
    static constexpr int kFormatVersion = 1;
    std::string name;
    int version = kFormatVersion;
    std::vector<McpItem> items;
};

// JSON lines. Optional header {"format":"mcp-dataset","version":1,"name":...}
// then {question, choices:[{label,text}], answer_label, demos?:[...]}.
[[nodiscard]] McpDataset load_mcp_dataset(const std::filesystem::path& path);
void save_mcp_dataset(const McpDataset& dataset, const std::filesystem::path& path);

enum class ScoreTarget : std::uint8_t { label, text };

[[nodiscard]] std::string_view score_target_name(ScoreTarget t) noexcept;
[[nodiscard]] ScoreTarget parse_score_target(std::string_view name);

struct McpConfig {
    std::size_t shots = 5;
    ScoreTarget target = ScoreTarget::label;
    std::uint64_t demo_seed = 0;
    // Divide each answer log-probability by its token count before the
    // perplexity aggregation. Off for every reported metric.
    bool token_normalized = false;
};

[[nodiscard]] std::string render_mcp_block(const McpItem& item, bool with_answer);
[[nodiscard]] std::string render_mcp_prompt(const McpItem& query, std::span<const McpItem> demos);
[[nodiscard]] std::string answer_string(const McpChoice& choice, ScoreTarget target);

struct AnswerLogProb {
    double ln = 0.0;
    double log2 = 0.0;
    std::size_t tokens = 0;
};

// Sum of log p(answer_t | prompt, answer_<t). Throws LengthError when the
// prompt plus answer exceed the context, or the answer is empty.
[[nodiscard]] AnswerLogProb answer_logprob(const LanguageModel& model, std::string_view prompt,
                                           std::string_view answer);
// All choices of one prompt; single-token answers share one forward pass.
[[nodiscard]] std::vector<AnswerLogProb> score_answers(const LanguageModel& model, std::string_view prompt,
                                                       const std::vector<std::string>& answers);

// Demonstrations for item `index` under cfg: the item's own demos when present,
// otherwise a seeded draw of other dataset items.
[[nodiscard]] std::vector<McpItem> mcp_demos(const McpDataset& dataset, std::size_t index, const McpConfig& cfg);

struct McpItemScore {
    std::vector<AnswerLogProb> choices;
    std::size_t chosen = 0;
    std::size_t correct = 0;
};

// First maximum wins.
[[nodiscard]] std::size_t argmax_choice(std::span<const double> scores);
[[nodiscard]] McpItemScore score_item(const LanguageModel& model, const McpDataset& dataset, std::size_t index,
                                      const McpConfig& cfg);
[[nodiscard]] std::string choose(const LanguageModel& model, const McpDataset& dataset, std::size_t index,
                                 const McpConfig& cfg);

enum class AnswerSubset : std::uint8_t { correct, incorrect };

// 2^(-(1/N) * sum_i log2 P_i).
[[nodiscard]] double base2_perplexity(std::span<const double> log2_probs);

struct McpResult {
    std::string dataset;
    std::size_t n_items = 0;
    double accuracy = 0.0;
    double ppl_correct = 0.0;
    double ppl_incorrect = 0.0;
    McpConfig config;
};

// One pass over the dataset.
[[nodiscard]] McpResult evaluate_mcp(const LanguageModel& model, const McpDataset& dataset, const McpConfig& cfg);
[[nodiscard]] double answers_perplexity(const LanguageModel& model, const McpDataset& dataset, AnswerSubset subset,
                                        const McpConfig& cfg);
[[nodiscard]] double mcp_accuracy(const LanguageModel& model, const McpDataset& dataset, const McpConfig& cfg);

[[nodiscard]] nlohmann::ordered_json to_json(const McpResult& result);

// exp(mean next-token NLL, nats). Windows of context_length() tokens start
// every `stride` tokens (0 selects context_length()); a position is scored
// once, in the first window that holds it and at least one earlier token.
// Throws DomainError when nothing can be scored.
[[nodiscard]] double validation_perplexity(const LanguageModel& model, std::span<const Token> stream,
                                           std::size_t stride = 0);

// Concatenates documents with the separator token, as the training stream does.
[[nodiscard]] std::vector<Token> document_stream(const std::vector<std::string>& docs);

// Toy downstream set: a short word prefix from a grammar, four candidate next
// words, exactly one of which the grammar allows. Prompts are kept within
// max_prompt_bytes for zero-shot evaluation.
struct NextWordConfig {
    std::uint64_t seed = 0;
    std::uint64_t grammar_id = 1;
    Script script = Script::greek;
    std::size_t n_items = 200;
    std::size_t prefix_words = 3;
    std::size_t lexicon_size = 64;
    std::size_t max_prompt_bytes = 120;
};

[[nodiscard]] McpDataset generate_nextword_dataset(const NextWordConfig& cfg);

} // namespace cptlab
