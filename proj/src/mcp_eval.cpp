// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0

#include "cptlab/mcp_eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "cptlab/errors.hpp"
#include "cptlab/rng.hpp"

namespace cptlab {

namespace {

constexpr std::uint64_t kDemoSalt = 0x4d435044;
constexpr std::uint64_t kNextWordSalt = 0x4e575244;

McpItem item_from_json(const nlohmann::json& j, bool allow_demos) {
    McpItem item;
    item.question = j.at("question").get<std::string>();
    for (const auto& c : j.at("choices")) {
        item.choices.push_back({c.at("label").get<std::string>(), c.at("text").get<std::string>()});
    }
    const auto answer = j.at("answer_label").get<std::string>();
    const auto it = std::find_if(item.choices.begin(), item.choices.end(),
                                 [&](const McpChoice& c) { return c.label == answer; });
    if (it == item.choices.end()) {
        throw ValidationError("answer_label '" + answer + "' is not among the choice labels");
    }
    item.correct_index = static_cast<std::size_t>(it - item.choices.begin());
    if (allow_demos && j.contains("demos")) {
        for (const auto& d : j.at("demos")) {
            item.demos.push_back(item_from_json(d, false));
        }
    }
    item.validate();
    return item;
}

nlohmann::ordered_json item_to_json(const McpItem& item, bool with_demos) {
    nlohmann::ordered_json j;
    j["question"] = item.question;
    auto choices = nlohmann::ordered_json::array();
    for (const auto& c : item.choices) {
        choices.push_back({{"label", c.label}, {"text", c.text}});
    }
    j["choices"] = std::move(choices);
    j["answer_label"] = item.choices.at(item.correct_index).label;
    if (with_demos && !item.demos.empty()) {
        auto demos = nlohmann::ordered_json::array();
        for (const auto& d : item.demos) {
            demos.push_back(item_to_json(d, false));
        }
        j["demos"] = std::move(demos);
    }
    return j;
}

double mean(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    return s / static_cast<double>(v.size());
}

} // namespace

void McpItem::validate() const {
    if (choices.size() < 2) {
        throw ValidationError("item needs at least two choices");
    }
    if (correct_index >= choices.size()) {
        throw ValidationError("correct index out of range");
    }
    std::set<std::string> labels;
    for (const auto& c : choices) {
        if (c.label.empty()) {
            throw ValidationError("empty choice label");
        }
        if (!labels.insert(c.label).second) {
            throw ValidationError("duplicate choice label '" + c.label + "'");
        }
    }
    for (const auto& d : demos) {
        d.validate();
    }
}

McpDataset load_mcp_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open dataset " + path.string());
    }
    McpDataset ds;
    ds.name = path.stem().string();
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            if (j.contains("format")) {
                if (j.at("format") != "mcp-dataset" || j.value("version", 0) != McpDataset::kFormatVersion) {
                    throw FormatError("unsupported dataset header");
                }
                ds.name = j.value("name", ds.name);
                continue;
            }
            ds.items.push_back(item_from_json(j, true));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (ds.items.empty()) {
        throw ValidationError("dataset " + path.string() + " has no items");
    }
    return ds;
}

void save_mcp_dataset(const McpDataset& dataset, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    nlohmann::ordered_json header;
    header["format"] = "mcp-dataset";
    header["version"] = McpDataset::kFormatVersion;
    header["name"] = dataset.name;
    header["template"] = kMcpTemplate;
    out << header.dump() << '\n';
    for (const auto& item : dataset.items) {
        out << item_to_json(item, true).dump() << '\n';
    }
    if (!out.flush()) {
        throw IoError("write failed for " + path.string());
    }
}

std::string_view score_target_name(ScoreTarget t) noexcept { return t == ScoreTarget::label ? "label" : "text"; }

ScoreTarget parse_score_target(std::string_view name) {
    if (name == "label") {
        return ScoreTarget::label;
    }
    if (name == "text") {
        return ScoreTarget::text;
    }
    throw ConfigError("unknown score target '" + std::string(name) + "' (expected label or text)");
}

std::string render_mcp_block(const McpItem& item, bool with_answer) {
    std::string out = item.question + "\n";
    for (const auto& c : item.choices) {
        out += c.label + ". " + c.text + "\n";
    }
    out += "Answer: ";
    if (with_answer) {
        out += item.choices.at(item.correct_index).label;
    }
    return out;
}

std::string render_mcp_prompt(const McpItem& query, std::span<const McpItem> demos) {
    std::string out;
    for (const auto& d : demos) {
        out += render_mcp_block(d, true);
        out += "\n\n";
    }
    out += render_mcp_block(query, false);
    return out;
}

std::string answer_string(const McpChoice& choice, ScoreTarget target) {
    return target == ScoreTarget::label ? choice.label : choice.text;
}

AnswerLogProb answer_logprob(const LanguageModel& model, std::string_view prompt, std::string_view answer) {
    if (answer.empty()) {
        throw LengthError("empty answer");
    }
    if (prompt.empty()) {
        throw LengthError("empty prompt");
    }
    std::vector<Token> tokens = encode_bytes(prompt);
    const std::size_t p = tokens.size();
    const auto ans = encode_bytes(answer);
    tokens.insert(tokens.end(), ans.begin(), ans.end());
    // the last answer token is never fed back
    tokens.pop_back();
    check_model_input(model, tokens);
    const auto rows = model.forward_logprobs(tokens);
    AnswerLogProb out;
    for (std::size_t i = 0; i < ans.size(); ++i) {
        out.ln += rows.at(p - 1 + i, ans[i]);
    }
    out.log2 = out.ln / std::numbers::ln2;
    out.tokens = ans.size();
    return out;
}

std::vector<AnswerLogProb> score_answers(const LanguageModel& model, std::string_view prompt,
                                         const std::vector<std::string>& answers) {
    const bool single = std::all_of(answers.begin(), answers.end(), [](const std::string& a) { return a.size() == 1; });
    std::vector<AnswerLogProb> out;
    if (!single || prompt.empty()) {
        for (const auto& a : answers) {
            out.push_back(answer_logprob(model, prompt, a));
        }
        return out;
    }
    const auto tokens = encode_bytes(prompt);
    check_model_input(model, tokens);
    const auto last = model.last_logprobs(tokens);
    for (const auto& a : answers) {
        const double ln = last.at(static_cast<unsigned char>(a[0]));
        out.push_back({ln, ln / std::numbers::ln2, 1});
    }
    return out;
}

std::vector<McpItem> mcp_demos(const McpDataset& dataset, std::size_t index, const McpConfig& cfg) {
    const McpItem& item = dataset.items.at(index);
    if (cfg.shots == 0) {
        return {};
    }
    if (!item.demos.empty()) {
        if (item.demos.size() < cfg.shots) {
            throw ConfigError("item " + std::to_string(index) + " carries " + std::to_string(item.demos.size()) +
                              " demos, fewer than " + std::to_string(cfg.shots) + " shots");
        }
        return {item.demos.begin(), item.demos.begin() + static_cast<std::ptrdiff_t>(cfg.shots)};
    }
    const std::size_t others = dataset.items.size() - 1;
    if (others < cfg.shots) {
        throw ConfigError("dataset too small for " + std::to_string(cfg.shots) + " shots");
    }
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < dataset.items.size(); ++i) {
        if (i != index) {
            pool.push_back(i);
        }
    }
    Rng rng(hash_key(cfg.demo_seed, kDemoSalt, index));
    std::vector<McpItem> out;
    for (std::size_t i = 0; i < cfg.shots; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
        std::swap(pool[i], pool[j]);
        McpItem d = dataset.items[pool[i]];
        d.demos.clear();
        out.push_back(std::move(d));
    }
    return out;
}

std::size_t argmax_choice(std::span<const double> scores) {
    if (scores.empty()) {
        throw DomainError("no scores");
    }
    return static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

McpItemScore score_item(const LanguageModel& model, const McpDataset& dataset, std::size_t index,
                        const McpConfig& cfg) {
    const McpItem& item = dataset.items.at(index);
    const auto demos = mcp_demos(dataset, index, cfg);
    const auto prompt = render_mcp_prompt(item, demos);
    std::vector<std::string> answers;
    for (const auto& c : item.choices) {
        answers.push_back(answer_string(c, cfg.target));
    }
    McpItemScore s;
    s.choices = score_answers(model, prompt, answers);
    std::vector<double> ln;
    for (const auto& c : s.choices) {
        ln.push_back(c.ln);
    }
    s.chosen = argmax_choice(ln);
    s.correct = item.correct_index;
    return s;
}

std::string choose(const LanguageModel& model, const McpDataset& dataset, std::size_t index, const McpConfig& cfg) {
    return dataset.items.at(index).choices.at(score_item(model, dataset, index, cfg).chosen).label;
}

double base2_perplexity(std::span<const double> log2_probs) {
    if (log2_probs.empty()) {
        throw DomainError("perplexity over zero items");
    }
    return std::exp2(-mean(log2_probs));
}

McpResult evaluate_mcp(const LanguageModel& model, const McpDataset& dataset, const McpConfig& cfg) {
    if (dataset.items.empty()) {
        throw ValidationError("dataset has no items");
    }
    McpResult r;
    r.dataset = dataset.name;
    r.n_items = dataset.items.size();
    r.config = cfg;
    std::vector<double> correct_l2;
    std::vector<double> incorrect_l2;
    std::size_t hits = 0;
    auto value = [&](const AnswerLogProb& a) {
        return cfg.token_normalized ? a.log2 / static_cast<double>(a.tokens) : a.log2;
    };
    for (std::size_t i = 0; i < dataset.items.size(); ++i) {
        const auto s = score_item(model, dataset, i, cfg);
        hits += s.chosen == s.correct ? 1 : 0;
        correct_l2.push_back(value(s.choices[s.correct]));
        std::vector<double> wrong;
        for (std::size_t c = 0; c < s.choices.size(); ++c) {
            if (c != s.correct) {
                wrong.push_back(value(s.choices[c]));
            }
        }
        incorrect_l2.push_back(mean(wrong));
    }
    r.accuracy = static_cast<double>(hits) / static_cast<double>(dataset.items.size());
    r.ppl_correct = base2_perplexity(correct_l2);
    r.ppl_incorrect = base2_perplexity(incorrect_l2);
    return r;
}

double answers_perplexity(const LanguageModel& model, const McpDataset& dataset, AnswerSubset subset,
                          const McpConfig& cfg) {
    const auto r = evaluate_mcp(model, dataset, cfg);
    return subset == AnswerSubset::correct ? r.ppl_correct : r.ppl_incorrect;
}

double mcp_accuracy(const LanguageModel& model, const McpDataset& dataset, const McpConfig& cfg) {
    return evaluate_mcp(model, dataset, cfg).accuracy;
}

nlohmann::ordered_json to_json(const McpResult& result) {
    nlohmann::ordered_json j;
    j["dataset"] = result.dataset;
    j["template"] = kMcpTemplate;
    j["n_items"] = result.n_items;
    j["shots"] = result.config.shots;
    j["score_target"] = score_target_name(result.config.target);
    j["demo_seed"] = result.config.demo_seed;
    j["token_normalized"] = result.config.token_normalized;
    j["accuracy"] = result.accuracy;
    j["ppl_correct"] = result.ppl_correct;
    j["ppl_incorrect"] = result.ppl_incorrect;
    j["ppl_log_base"] = 2;
    return j;
}

double validation_perplexity(const LanguageModel& model, std::span<const Token> stream, std::size_t stride) {
    const std::size_t ctx = model.context_length();
    if (stride == 0) {
        stride = ctx;
    }
    if (stride > ctx) {
        throw ConfigError("stride " + std::to_string(stride) + " exceeds context length " + std::to_string(ctx));
    }
    if (stream.size() < 2) {
        throw DomainError("validation stream needs at least two tokens");
    }
    double nll = 0.0;
    std::size_t scored = 0;
    std::size_t next_unscored = 1;
    for (std::size_t start = 0; start + 1 < stream.size(); start += stride) {
        const std::size_t end = std::min(start + ctx, stream.size());
        const std::size_t first = std::max(next_unscored, start + 1);
        if (first < end) {
            const auto rows = model.forward_logprobs(stream.subspan(start, end - start));
            for (std::size_t pos = first; pos < end; ++pos) {
                nll -= rows.at(pos - start - 1, stream[pos]);
                ++scored;
            }
            next_unscored = end;
        }
        if (end == stream.size()) {
            break;
        }
    }
    if (scored == 0) {
        throw DomainError("validation stream has no scorable positions");
    }
    return std::exp(nll / static_cast<double>(scored));
}

std::vector<Token> document_stream(const std::vector<std::string>& docs) {
    std::vector<Token> out;
    for (const auto& d : docs) {
        const auto t = encode_bytes(d);
        out.insert(out.end(), t.begin(), t.end());
        out.push_back(kDocumentSeparator);
    }
    return out;
}

McpDataset generate_nextword_dataset(const NextWordConfig& cfg) {
    if (cfg.n_items == 0 || cfg.prefix_words == 0) {
        throw ConfigError("next-word dataset needs n_items and prefix_words > 0");
    }
    const auto lexicon = grammar_lexicon(cfg.grammar_id, cfg.lexicon_size, cfg.script);
    std::vector<std::vector<std::size_t>> succ(cfg.lexicon_size);
    for (std::size_t w = 0; w < cfg.lexicon_size; ++w) {
        succ[w] = grammar_successors(cfg.grammar_id, cfg.lexicon_size, w);
    }
    static constexpr std::array<const char*, 4> kLabels = {"A", "B", "C", "D"};
    Rng rng(hash_key(cfg.seed, kNextWordSalt, cfg.grammar_id));
    McpDataset ds;
    ds.name = "nextword-" + std::string(script_name(cfg.script));
    std::size_t attempts = 0;
    while (ds.items.size() < cfg.n_items) {
        if (++attempts > cfg.n_items * 1000) {
            throw ConfigError("cannot fit next-word items into " + std::to_string(cfg.max_prompt_bytes) + " bytes");
        }
        std::vector<std::size_t> walk{rng.below(cfg.lexicon_size)};
        while (walk.size() < cfg.prefix_words) {
            const auto& s = succ[walk.back()];
            walk.push_back(s[rng.below(s.size())]);
        }
        const auto& allowed = succ[walk.back()];
        const std::size_t answer = allowed[rng.below(allowed.size())];
        std::vector<std::size_t> options{answer};
        while (options.size() < kLabels.size()) {
            const auto w = rng.below(cfg.lexicon_size);
            if (std::find(allowed.begin(), allowed.end(), w) == allowed.end() &&
                std::find(options.begin(), options.end(), w) == options.end()) {
                options.push_back(w);
            }
        }
        rng.shuffle(options);
        McpItem item;
        for (std::size_t i = 0; i < walk.size(); ++i) {
            item.question += (i > 0 ? " " : "") + lexicon[walk[i]];
        }
        for (std::size_t i = 0; i < options.size(); ++i) {
            item.choices.push_back({kLabels[i], lexicon[options[i]]});
            if (options[i] == answer) {
                item.correct_index = i;
            }
        }
        if (render_mcp_block(item, false).size() + 1 > cfg.max_prompt_bytes) {
            continue;
        }
        ds.items.push_back(std::move(item));
    }
    return ds;
}

} // namespace cptlab
