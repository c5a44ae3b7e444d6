// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0

#include "cptlab/copain.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "cptlab/errors.hpp"
#include "cptlab/rng.hpp"

namespace cptlab {

namespace {

constexpr std::uint64_t kGenSalt = 0x434f5047;
constexpr std::uint64_t kDemoSalt = 0x434f5044;

std::size_t task_index(CopainTask task) { return static_cast<std::size_t>(task); }

std::string join_items(const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i > 0) {
            out += ", ";
        }
        out += items[i];
    }
    return out;
}

std::vector<std::string> split(std::string_view s, std::string_view sep) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (true) {
        const auto next = s.find(sep, pos);
        if (next == std::string_view::npos) {
            out.emplace_back(s.substr(pos));
            return out;
        }
        out.emplace_back(s.substr(pos, next - pos));
        pos = next + sep.size();
    }
}

std::string_view trim(std::string_view s) {
    const auto ws = " \t\r\n\v\f";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

std::vector<int> draw_items(CopainTask task, Rng& rng) {
    const std::size_t n = task_arity(task);
    std::vector<int> items;
    switch (task) {
    case CopainTask::max3:
    case CopainTask::min3:
    case CopainTask::median3:
        while (items.size() < n) {
            const auto v = static_cast<int>(rng.below(100));
            if (std::find(items.begin(), items.end(), v) == items.end()) {
                items.push_back(v);
            }
        }
        break;
    case CopainTask::alpha_first3:
    case CopainTask::alpha_last3:
        while (items.size() < n) {
            const int v = 'a' + static_cast<int>(rng.below(26));
            if (std::find(items.begin(), items.end(), v) == items.end()) {
                items.push_back(v);
            }
        }
        break;
    case CopainTask::even_among_odd4:
    case CopainTask::odd_among_even4: {
        // one minority-parity element at a uniform position, majority may repeat
        const int minority_parity = task == CopainTask::even_among_odd4 ? 0 : 1;
        const auto pos = rng.below(n);
        for (std::size_t i = 0; i < n; ++i) {
            const int parity = i == pos ? minority_parity : 1 - minority_parity;
            items.push_back(2 * static_cast<int>(rng.below(50)) + parity);
        }
        break;
    }
    }
    return items;
}

} // namespace

std::string_view task_name(CopainTask task) noexcept {
    switch (task) {
    case CopainTask::max3:
        return "max3";
    case CopainTask::min3:
        return "min3";
    case CopainTask::median3:
        return "median3";
    case CopainTask::even_among_odd4:
        return "even_among_odd4";
    case CopainTask::odd_among_even4:
        return "odd_among_even4";
    case CopainTask::alpha_first3:
        return "alpha_first3";
    case CopainTask::alpha_last3:
        return "alpha_last3";
    }
    return "?";
}

CopainTask parse_task(std::string_view name) {
    for (CopainTask t : kCopainTasks) {
        if (task_name(t) == name) {
            return t;
        }
    }
    throw FormatError("unknown Copain task '" + std::string(name) + "'");
}

std::size_t task_arity(CopainTask task) noexcept {
    return task == CopainTask::even_among_odd4 || task == CopainTask::odd_among_even4 ? 4 : 3;
}

bool is_letter_task(CopainTask task) noexcept {
    return task == CopainTask::alpha_first3 || task == CopainTask::alpha_last3;
}

void validate_items(CopainTask task, const std::vector<int>& items) {
    const std::string where = std::string(task_name(task)) + ": ";
    if (items.size() != task_arity(task)) {
        throw MalformedExampleError(where + "expected " + std::to_string(task_arity(task)) + " items, got " +
                                    std::to_string(items.size()));
    }
    for (int v : items) {
        const bool ok = is_letter_task(task) ? (v >= 'a' && v <= 'z') : (v >= 0 && v <= 99);
        if (!ok) {
            throw MalformedExampleError(where + "item " + std::to_string(v) + " out of range");
        }
    }
    if (task == CopainTask::even_among_odd4 || task == CopainTask::odd_among_even4) {
        const int minority = task == CopainTask::even_among_odd4 ? 0 : 1;
        const auto count = std::count_if(items.begin(), items.end(), [&](int v) { return v % 2 == minority; });
        if (count != 1) {
            throw MalformedExampleError(where + "need exactly one " + (minority == 0 ? "even" : "odd") + " item");
        }
        return;
    }
    const std::set<int> distinct(items.begin(), items.end());
    if (distinct.size() != items.size()) {
        throw MalformedExampleError(where + "items must be pairwise distinct");
    }
}

int solve(CopainTask task, const std::vector<int>& items) {
    validate_items(task, items);
    std::vector<int> sorted = items;
    std::sort(sorted.begin(), sorted.end());
    switch (task) {
    case CopainTask::max3:
    case CopainTask::alpha_last3:
        return sorted.back();
    case CopainTask::min3:
    case CopainTask::alpha_first3:
        return sorted.front();
    case CopainTask::median3:
        return sorted[1];
    case CopainTask::even_among_odd4:
        return *std::find_if(items.begin(), items.end(), [](int v) { return v % 2 == 0; });
    case CopainTask::odd_among_even4:
        return *std::find_if(items.begin(), items.end(), [](int v) { return v % 2 == 1; });
    }
    throw MalformedExampleError("unknown task");
}

CopainExample random_example(CopainTask task, Rng& rng) {
    auto items = draw_items(task, rng);
    const int answer = solve(task, items);
    return {task, std::move(items), answer};
}

std::string render_element(CopainTask task, int value) {
    return is_letter_task(task) ? std::string(1, static_cast<char>(value)) : std::to_string(value);
}

std::string render_line(const CopainExample& ex, bool with_answer) {
    std::vector<std::string> items;
    for (int v : ex.items) {
        items.push_back(render_element(ex.task, v));
    }
    std::string line = join_items(items) + ": ";
    if (with_answer) {
        line += render_element(ex.task, ex.answer);
    }
    return line;
}

std::string render_prompt(const CopainExample& query, const std::vector<CopainExample>& demos) {
    if (demos.empty()) {
        throw CompositionError("a Copain prompt needs at least one demonstration");
    }
    std::string out;
    for (const auto& d : demos) {
        if (d.task != query.task) {
            throw CompositionError("demonstration task " + std::string(task_name(d.task)) + " differs from query task " +
                                   std::string(task_name(query.task)));
        }
        if (d.items == query.items) {
            throw CompositionError("query appears among its own demonstrations");
        }
        out += render_line(d, true);
        out += '\n';
    }
    out += render_line(query, false);
    return out;
}

std::size_t max_prompt_length(std::size_t shots) noexcept {
    // widest line: four two-digit items, "dd, dd, dd, dd: dd"
    constexpr std::size_t kQuery = 16;
    constexpr std::size_t kDemo = kQuery + 2 + 1;
    return shots * kDemo + kQuery;
}

ParsedPrompt parse_prompt(std::string_view text) {
    const auto lines = split(text, "\n");
    if (lines.size() < 2) {
        throw MalformedExampleError("prompt needs at least one demonstration line and a query line");
    }
    ParsedPrompt out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const std::string& line = lines[i];
        const auto colon = line.rfind(": ");
        if (colon == std::string::npos) {
            throw MalformedExampleError("line " + std::to_string(i + 1) + " has no ': ' separator");
        }
        CopainLine parsed;
        parsed.items = split(std::string_view(line).substr(0, colon), ", ");
        const std::string answer = line.substr(colon + 2);
        if (i + 1 == lines.size()) {
            if (!answer.empty()) {
                throw MalformedExampleError("query line already carries an answer");
            }
            out.query = std::move(parsed);
        } else {
            if (answer.empty()) {
                throw MalformedExampleError("demonstration line " + std::to_string(i + 1) + " has no answer");
            }
            parsed.answer = answer;
            out.demos.push_back(std::move(parsed));
        }
    }
    return out;
}

std::optional<std::vector<int>> decode_items(CopainTask task, const std::vector<std::string>& items) {
    std::vector<int> out;
    for (const auto& s : items) {
        if (is_letter_task(task)) {
            if (s.size() != 1 || s[0] < 'a' || s[0] > 'z') {
                return std::nullopt;
            }
            out.push_back(s[0]);
        } else {
            if (s.empty() || s.size() > 2 || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; }) ||
                (s.size() == 2 && s[0] == '0')) {
                return std::nullopt;
            }
            out.push_back(std::stoi(s));
        }
    }
    try {
        validate_items(task, out);
    } catch (const MalformedExampleError&) {
        return std::nullopt;
    }
    return out;
}

std::vector<CopainTask> consistent_tasks(const std::vector<CopainLine>& demos) {
    std::vector<CopainTask> out;
    for (CopainTask task : kCopainTasks) {
        const bool ok = !demos.empty() && std::all_of(demos.begin(), demos.end(), [&](const CopainLine& d) {
            const auto items = decode_items(task, d.items);
            return items && d.answer && *d.answer == render_element(task, solve(task, *items));
        });
        if (ok) {
            out.push_back(task);
        }
    }
    return out;
}

std::string oracle_completion(std::string_view prompt) {
    ParsedPrompt parsed;
    try {
        parsed = parse_prompt(prompt);
    } catch (const MalformedExampleError&) {
        return {};
    }
    const auto tasks = consistent_tasks(parsed.demos);
    if (tasks.size() != 1) {
        return {};
    }
    const auto items = decode_items(tasks.front(), parsed.query.items);
    if (!items) {
        return {};
    }
    return render_element(tasks.front(), solve(tasks.front(), *items));
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

std::size_t CopainSuite::query_count() const {
    std::size_t n = 0;
    for (const auto& [task, qs] : queries) {
        n += qs.size();
    }
    return n;
}

CopainSuite generate_suite(std::uint64_t seed, std::size_t queries_per_task, std::size_t demos_per_task) {
    CopainSuite suite;
    suite.seed = seed;
    for (CopainTask task : kCopainTasks) {
        Rng rng(hash_key(seed, kGenSalt, task_index(task)));
        std::set<std::vector<int>> seen;
        auto& qs = suite.queries[task];
        auto& pool = suite.demo_pool[task];
        while (qs.size() + pool.size() < queries_per_task + demos_per_task) {
            auto items = draw_items(task, rng);
            if (!seen.insert(items).second) {
                continue;
            }
            CopainExample ex{task, items, solve(task, items)};
            (qs.size() < queries_per_task ? qs : pool).push_back(std::move(ex));
        }
    }
    return suite;
}

void save_suite(const CopainSuite& suite, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    nlohmann::ordered_json header;
    header["format"] = "copain-suite";
    header["version"] = CopainSuite::kFormatVersion;
    header["seed"] = suite.seed;
    out << header.dump() << '\n';
    auto emit = [&](const CopainExample& ex, const char* split_name) {
        nlohmann::ordered_json j;
        j["task"] = task_name(ex.task);
        auto items = nlohmann::ordered_json::array();
        for (int v : ex.items) {
            if (is_letter_task(ex.task)) {
                items.push_back(render_element(ex.task, v));
            } else {
                items.push_back(v);
            }
        }
        j["items"] = std::move(items);
        if (is_letter_task(ex.task)) {
            j["answer"] = render_element(ex.task, ex.answer);
        } else {
            j["answer"] = ex.answer;
        }
        j["split"] = split_name;
        out << j.dump() << '\n';
    };
    for (CopainTask task : kCopainTasks) {
        if (const auto it = suite.queries.find(task); it != suite.queries.end()) {
            for (const auto& ex : it->second) {
                emit(ex, "query");
            }
        }
        if (const auto it = suite.demo_pool.find(task); it != suite.demo_pool.end()) {
            for (const auto& ex : it->second) {
                emit(ex, "demo");
            }
        }
    }
    if (!out.flush()) {
        throw IoError("write failed for " + path.string());
    }
}

CopainSuite load_suite(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open suite file " + path.string());
    }
    CopainSuite suite;
    std::string line;
    std::size_t line_no = 0;
    bool header_seen = false;
    auto fail = [&](const std::string& what) {
        return FormatError(path.string() + ":" + std::to_string(line_no) + ": " + what);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw fail(std::string("invalid JSON: ") + e.what());
        }
        if (!header_seen) {
            if (!j.is_object() || j.value("format", "") != "copain-suite") {
                throw fail("missing copain-suite header line");
            }
            if (j.value("version", 0) != CopainSuite::kFormatVersion) {
                throw fail("unsupported suite version");
            }
            suite.seed = j.at("seed").get<std::uint64_t>();
            header_seen = true;
            continue;
        }
        try {
            CopainExample ex;
            ex.task = parse_task(j.at("task").get<std::string>());
            auto decode = [&](const nlohmann::json& v) {
                if (is_letter_task(ex.task)) {
                    const auto s = v.get<std::string>();
                    if (s.size() != 1) {
                        throw MalformedExampleError("letter item must be one character");
                    }
                    return static_cast<int>(s[0]);
                }
                return v.get<int>();
            };
            for (const auto& v : j.at("items")) {
                ex.items.push_back(decode(v));
            }
            ex.answer = decode(j.at("answer"));
            if (solve(ex.task, ex.items) != ex.answer) {
                throw MalformedExampleError("stored answer disagrees with the task definition");
            }
            const std::string split_name = j.value("split", "query");
            if (split_name == "query") {
                suite.queries[ex.task].push_back(std::move(ex));
            } else if (split_name == "demo") {
                suite.demo_pool[ex.task].push_back(std::move(ex));
            } else {
                throw fail("unknown split '" + split_name + "'");
            }
        } catch (const nlohmann::json::exception& e) {
            throw fail(e.what());
        } catch (const MalformedExampleError& e) {
            throw MalformedExampleError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (!header_seen) {
        throw FormatError(path.string() + ": empty suite file");
    }
    return suite;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

bool completion_matches(std::string_view completion, std::string_view answer) {
    const auto nl = completion.find('\n');
    return trim(completion.substr(0, nl)) == answer;
}

std::vector<CopainExample> pick_demos(const CopainSuite& suite, CopainTask task, std::size_t query_index,
                                      std::size_t shots, std::uint64_t eval_seed) {
    const auto it = suite.demo_pool.find(task);
    const std::size_t available = it == suite.demo_pool.end() ? 0 : it->second.size();
    if (shots == 0 || shots > available) {
        throw ConfigError("need 1 <= shots <= " + std::to_string(available) + " for task " +
                          std::string(task_name(task)));
    }
    std::vector<std::size_t> idx(available);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(hash_key(eval_seed, kDemoSalt, task_index(task), query_index));
    std::vector<CopainExample> out;
    for (std::size_t i = 0; i < shots; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(available - i));
        std::swap(idx[i], idx[j]);
        out.push_back(it->second[idx[i]]);
    }
    return out;
}

CopainResult evaluate(const CompletionFn& completion, const CopainSuite& suite, std::size_t shots,
                      std::uint64_t eval_seed) {
    CopainResult result;
    result.shots = shots;
    result.suite_seed = suite.seed;
    result.eval_seed = eval_seed;
    double sum = 0.0;
    for (CopainTask task : kCopainTasks) {
        const auto it = suite.queries.find(task);
        if (it == suite.queries.end() || it->second.empty()) {
            throw ConfigError("suite has no queries for task " + std::string(task_name(task)));
        }
        std::size_t hits = 0;
        for (std::size_t q = 0; q < it->second.size(); ++q) {
            const auto& query = it->second[q];
            const auto prompt = render_prompt(query, pick_demos(suite, task, q, shots, eval_seed));
            hits += completion_matches(completion(prompt), render_element(task, query.answer)) ? 1 : 0;
        }
        const double acc = static_cast<double>(hits) / static_cast<double>(it->second.size());
        result.per_task[task] = acc;
        sum += acc;
    }
    result.overall = sum / static_cast<double>(kCopainTasks.size());
    return result;
}

CompletionFn model_completion(const LanguageModel& model, std::size_t max_new) {
    return [&model, max_new](const std::string& prompt) {
        const auto tokens = encode_bytes(prompt);
        const auto out = generate_greedy(model, tokens, max_new, {static_cast<Token>('\n')});
        return decode_bytes(std::span<const Token>(out).subspan(tokens.size()));
    };
}

nlohmann::ordered_json to_json(const CopainResult& result) {
    nlohmann::ordered_json j;
    j["suite_seed"] = result.suite_seed;
    j["eval_seed"] = result.eval_seed;
    j["shots"] = result.shots;
    nlohmann::ordered_json per_task;
    for (const auto& [task, acc] : result.per_task) {
        per_task[std::string(task_name(task))] = acc;
    }
    j["per_task"] = std::move(per_task);
    j["overall"] = result.overall;
    return j;
}

} // namespace cptlab
