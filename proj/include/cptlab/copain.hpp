// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Copain: list-manipulation few-shot tasks with no instruction text.
// Prompt lines look like "85, 24, 63: 85"; the query line stops after ": ".

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cptlab/language_model.hpp"
#include "cptlab/rng.hpp"

namespace cptlab {

enum class CopainTask : std::uint8_t {
    max3,
    min3,
    median3,
    even_among_odd4,
    odd_among_even4,
    alpha_first3,
    alpha_last3,
};

inline constexpr std::array<CopainTask, 7> kCopainTasks = {
    CopainTask::max3,           CopainTask::min3,         CopainTask::median3,    CopainTask::even_among_odd4,
    CopainTask::odd_among_even4, CopainTask::alpha_first3, CopainTask::alpha_last3,
};

[[nodiscard]] std::string_view task_name(CopainTask task) noexcept;
[[nodiscard]] CopainTask parse_task(std::string_view name);
[[nodiscard]] std::size_t task_arity(CopainTask task) noexcept;
// Letter tasks store items as character codes.
[[nodiscard]] bool is_letter_task(CopainTask task) noexcept;

struct CopainExample {
    CopainTask task = CopainTask::max3;
    std::vector<int> items;
    int answer = 0;

    friend bool operator==(const CopainExample&, const CopainExample&) = default;
};

// Throws MalformedExampleError when items break the task's structure.
void validate_items(CopainTask task, const std::vector<int>& items);
[[nodiscard]] int solve(CopainTask task, const std::vector<int>& items);

// One well-formed example drawn from rng.
[[nodiscard]] CopainExample random_example(CopainTask task, Rng& rng);

[[nodiscard]] std::string render_element(CopainTask task, int value);
[[nodiscard]] std::string render_line(const CopainExample& ex, bool with_answer);
// Demo lines then the query line, joined by '\n'. Throws CompositionError.
[[nodiscard]] std::string render_prompt(const CopainExample& query, const std::vector<CopainExample>& demos);

// Longest prompt, in bytes, that render_prompt can produce with `shots` demos.
[[nodiscard]] std::size_t max_prompt_length(std::size_t shots) noexcept;

struct CopainLine {
    std::vector<std::string> items;
    std::optional<std::string> answer;
    friend bool operator==(const CopainLine&, const CopainLine&) = default;
};

struct ParsedPrompt {
    std::vector<CopainLine> demos;
    CopainLine query;
};

// Throws MalformedExampleError for text that is not a rendered prompt.
[[nodiscard]] ParsedPrompt parse_prompt(std::string_view text);
// Converts rendered element strings back to stored values for a task.
[[nodiscard]] std::optional<std::vector<int>> decode_items(CopainTask task, const std::vector<std::string>& items);
// Tasks under which every demo line is valid and correctly answered.
[[nodiscard]] std::vector<CopainTask> consistent_tasks(const std::vector<CopainLine>& demos);
// Solver-backed completion: infers the task from the demos. Empty string
// when the task is ambiguous or the query does not fit it.
[[nodiscard]] std::string oracle_completion(std::string_view prompt);

struct CopainSuite {
    static constexpr int kFormatVersion = 1;
    static constexpr std::size_t kQueriesPerTask = 150;
    static constexpr std::size_t kDemosPerTask = 32;

    std::uint64_t seed = 0;
    std::map<CopainTask, std::vector<CopainExample>> queries;
    std::map<CopainTask, std::vector<CopainExample>> demo_pool;

    [[nodiscard]] std::size_t query_count() const;
};

[[nodiscard]] CopainSuite generate_suite(std::uint64_t seed, std::size_t queries_per_task = CopainSuite::kQueriesPerTask,
                                         std::size_t demos_per_task = CopainSuite::kDemosPerTask);

// JSON lines: a header {"format":"copain-suite","version":1,"seed":S} then one
// {task, items, answer, split} object per example.
void save_suite(const CopainSuite& suite, const std::filesystem::path& path);
[[nodiscard]] CopainSuite load_suite(const std::filesystem::path& path);

using CompletionFn = std::function<std::string(const std::string& prompt)>;

struct CopainResult {
    std::map<CopainTask, double> per_task;
    double overall = 0.0;
    std::size_t shots = 0;
    std::uint64_t suite_seed = 0;
    std::uint64_t eval_seed = 0;
};

// Exact match after cutting the completion at its first newline and
// trimming surrounding whitespace.
[[nodiscard]] bool completion_matches(std::string_view completion, std::string_view answer);

// Demos for query q of a task are drawn without replacement from the task's
// pool, keyed on (eval_seed, task, q).
[[nodiscard]] std::vector<CopainExample> pick_demos(const CopainSuite& suite, CopainTask task, std::size_t query_index,
                                                    std::size_t shots, std::uint64_t eval_seed);

[[nodiscard]] CopainResult evaluate(const CompletionFn& completion, const CopainSuite& suite, std::size_t shots,
                                    std::uint64_t eval_seed);

// Greedy decoding until '\n' or max_new bytes.
[[nodiscard]] CompletionFn model_completion(const LanguageModel& model, std::size_t max_new = 3);

[[nodiscard]] nlohmann::ordered_json to_json(const CopainResult& result);

} // namespace cptlab
