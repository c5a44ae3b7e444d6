// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <fstream>
#include <set>

#include "cptlab/copain.hpp"
#include "cptlab/errors.hpp"
#include "cptlab/rng.hpp"
#include "test_support.hpp"

using namespace cptlab;

namespace {

std::vector<int> letters(std::string_view s) {
    std::vector<int> out;
    for (char c : s) {
        out.push_back(c);
    }
    return out;
}

double chi_square_p(const std::vector<std::size_t>& counts) {
    double total = 0.0;
    for (auto c : counts) {
        total += static_cast<double>(c);
    }
    const double expected = total / static_cast<double>(counts.size());
    double stat = 0.0;
    for (auto c : counts) {
        const double d = static_cast<double>(c) - expected;
        stat += d * d / expected;
    }
    const boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
    return boost::math::cdf(boost::math::complement(dist, stat));
}

// Picks one item of the query line, seeded by the prompt text.
std::string random_item_completion(const std::string& prompt) {
    const auto parsed = parse_prompt(prompt);
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : prompt) {
        h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
    }
    Rng rng(h);
    return parsed.query.items[rng.below(parsed.query.items.size())];
}

// Fixed-table model: after ' ' predict '4', after '4' predict '2', else '\n'.
class TableModel : public LanguageModel {
public:
    std::size_t vocab_size() const override { return 256; }
    std::size_t context_length() const override { return 128; }
    LogProbMatrix forward_logprobs(std::span<const Token> tokens) const override {
        LogProbMatrix out(tokens.size(), 256);
        for (std::size_t r = 0; r < tokens.size(); ++r) {
            auto row = out.row(r);
            std::fill(row.begin(), row.end(), -50.0);
            const Token next = tokens[r] == ' ' ? '4' : tokens[r] == '4' ? '2' : '\n';
            row[next] = 0.0;
        }
        return out;
    }
};

} // namespace

TEST_CASE("solve: worked examples") {
    CHECK(solve(CopainTask::max3, {85, 24, 63}) == 85);
    CHECK(solve(CopainTask::min3, {85, 24, 63}) == 24);
    CHECK(solve(CopainTask::median3, {85, 24, 63}) == 63);
    CHECK(solve(CopainTask::median3, {29, 47, 79}) == 47);
    CHECK(solve(CopainTask::median3, {59, 77, 41}) == 59);
    CHECK(solve(CopainTask::even_among_odd4, {21, 71, 68, 95}) == 68);
    CHECK(solve(CopainTask::even_among_odd4, {92, 71, 61, 29}) == 92);
    CHECK(solve(CopainTask::odd_among_even4, {24, 76, 60, 51}) == 51);
    CHECK(solve(CopainTask::odd_among_even4, {83, 52, 22, 52}) == 83);
    CHECK(solve(CopainTask::alpha_first3, letters("wya")) == 'a');
    CHECK(solve(CopainTask::alpha_last3, letters("wya")) == 'y');
    CHECK(solve(CopainTask::alpha_first3, letters("bmk")) == 'b');
    CHECK(solve(CopainTask::alpha_last3, letters("vhp")) == 'v');
}

TEST_CASE("solve: malformed examples") {
    CHECK_THROWS_AS((void)solve(CopainTask::max3, {1, 1, 2}), MalformedExampleError);
    CHECK_THROWS_AS((void)solve(CopainTask::max3, {1, 2}), MalformedExampleError);
    CHECK_THROWS_AS((void)solve(CopainTask::min3, {1, 2, 100}), MalformedExampleError);
    CHECK_THROWS_AS((void)solve(CopainTask::even_among_odd4, {2, 4, 5, 7}), MalformedExampleError);
    CHECK_THROWS_AS((void)solve(CopainTask::odd_among_even4, {1, 3, 5, 7}), MalformedExampleError);
    CHECK_THROWS_AS((void)solve(CopainTask::alpha_first3, letters("aab")), MalformedExampleError);
    CHECK_THROWS_AS((void)solve(CopainTask::alpha_first3, letters("aBc")), MalformedExampleError);
}

TEST_CASE("render_prompt") {
    const CopainExample q{CopainTask::max3, {19, 81, 88}, 88};
    const std::vector<CopainExample> demos{
        {CopainTask::max3, {85, 24, 63}, 85},
        {CopainTask::max3, {29, 47, 79}, 79},
        {CopainTask::max3, {59, 77, 41}, 77},
    };
    SUBCASE("three-shot max block") {
        CHECK(render_prompt(q, demos) == "85, 24, 63: 85\n29, 47, 79: 79\n59, 77, 41: 77\n19, 81, 88: ");
        CHECK(oracle_completion(render_prompt(q, demos)) == "88");
    }
    SUBCASE("minimal decimal and letters") {
        const CopainExample parity{CopainTask::even_among_odd4, {97, 66, 1, 3}, 66};
        CHECK(render_line(parity, false) == "97, 66, 1, 3: ");
        const CopainExample first{CopainTask::alpha_first3, letters("wya"), 'a'};
        CHECK(render_line(first, true) == "w, y, a: a");
    }
    SUBCASE("one shot gives two lines") {
        const auto p = render_prompt(q, {demos[0]});
        CHECK(std::count(p.begin(), p.end(), '\n') == 1);
        CHECK(p == "85, 24, 63: 85\n19, 81, 88: ");
    }
    SUBCASE("composition errors") {
        CHECK_THROWS_AS((void)render_prompt(q, {}), CompositionError);
        CHECK_THROWS_AS((void)render_prompt(q, {CopainExample{CopainTask::min3, {1, 2, 3}, 1}}), CompositionError);
        CHECK_THROWS_AS((void)render_prompt(q, {q}), CompositionError);
    }
    SUBCASE("render then parse round-trips") {
        const auto suite = generate_suite(3, 10, 8);
        for (CopainTask task : kCopainTasks) {
            for (std::size_t i = 0; i < 10; ++i) {
                const auto& query = suite.queries.at(task)[i];
                const auto ds = pick_demos(suite, task, i, 3, 1);
                const auto parsed = parse_prompt(render_prompt(query, ds));
                REQUIRE(parsed.demos.size() == 3);
                for (std::size_t k = 0; k < 3; ++k) {
                    CHECK(decode_items(task, parsed.demos[k].items) == ds[k].items);
                    CHECK(parsed.demos[k].answer == render_element(task, ds[k].answer));
                }
                CHECK(decode_items(task, parsed.query.items) == query.items);
                CHECK_FALSE(parsed.query.answer.has_value());
                CHECK(consistent_tasks(parsed.demos) == std::vector<CopainTask>{task});
            }
        }
    }
    SUBCASE("parser rejects non-prompts") {
        CHECK_THROWS_AS((void)parse_prompt("hello"), MalformedExampleError);
        CHECK_THROWS_AS((void)parse_prompt("1, 2, 3: 3\n4, 5, 6: 6"), MalformedExampleError);
        CHECK(oracle_completion("not a prompt").empty());
    }
}

TEST_CASE("generate_suite") {
    const auto suite = generate_suite(2026);
    CHECK(suite.query_count() == 1050);
    std::size_t total_checked = 0;
    for (CopainTask task : kCopainTasks) {
        const auto& qs = suite.queries.at(task);
        const auto& pool = suite.demo_pool.at(task);
        CHECK(qs.size() == 150);
        CHECK(pool.size() == 32);
        std::set<std::vector<int>> seen;
        for (const auto* group : {&qs, &pool}) {
            for (const auto& ex : *group) {
                CHECK(ex.task == task);
                CHECK(seen.insert(ex.items).second);
                CHECK(solve(task, ex.items) == ex.answer);
                CHECK(std::find(ex.items.begin(), ex.items.end(), ex.answer) != ex.items.end());
                ++total_checked;
            }
        }
    }
    CHECK(total_checked == 7 * 182);

    const auto again = generate_suite(2026);
    CHECK(again.queries == suite.queries);
    CHECK(again.demo_pool == suite.demo_pool);
    CHECK(generate_suite(2027).queries != suite.queries);
}

TEST_CASE("element frequencies are uniform (chi-square, p = 0.001)") {
    const auto suite = generate_suite(99);
    std::vector<std::size_t> ints(100, 0), chars(26, 0), minority_even(50, 0), minority_odd(50, 0),
        majority_odd(50, 0), majority_even(50, 0), minority_pos(4, 0);
    for (CopainTask task : kCopainTasks) {
        for (const auto& ex : suite.queries.at(task)) {
            for (std::size_t i = 0; i < ex.items.size(); ++i) {
                const int v = ex.items[i];
                switch (task) {
                case CopainTask::max3:
                case CopainTask::min3:
                case CopainTask::median3:
                    ++ints[static_cast<std::size_t>(v)];
                    break;
                case CopainTask::alpha_first3:
                case CopainTask::alpha_last3:
                    ++chars[static_cast<std::size_t>(v - 'a')];
                    break;
                case CopainTask::even_among_odd4:
                    if (v % 2 == 0) {
                        ++minority_even[static_cast<std::size_t>(v / 2)];
                        ++minority_pos[i];
                    } else {
                        ++majority_odd[static_cast<std::size_t>(v / 2)];
                    }
                    break;
                case CopainTask::odd_among_even4:
                    if (v % 2 == 1) {
                        ++minority_odd[static_cast<std::size_t>(v / 2)];
                        ++minority_pos[i];
                    } else {
                        ++majority_even[static_cast<std::size_t>(v / 2)];
                    }
                    break;
                }
            }
        }
    }
    for (const auto* counts : {&ints, &chars, &minority_even, &minority_odd, &majority_odd, &majority_even, &minority_pos}) {
        CHECK(chi_square_p(*counts) > 0.001);
    }
}

TEST_CASE("evaluate") {
    const auto suite = generate_suite(7);
    SUBCASE("oracle scores 1, empty scores 0") {
        const auto oracle = evaluate([](const std::string& p) { return oracle_completion(p); }, suite, 3, 0);
        CHECK(oracle.overall == 1.0);
        for (const auto& [task, acc] : oracle.per_task) {
            CHECK(acc == 1.0);
        }
        CHECK(evaluate([](const std::string&) { return std::string(); }, suite, 3, 0).overall == 0.0);
    }
    SUBCASE("random item sits near the chance rate") {
        const auto r = evaluate(random_item_completion, suite, 3, 11);
        CHECK(std::abs(r.overall - (5.0 / 3.0 + 2.0 / 4.0) / 7.0) <= 0.04);
        double mean = 0.0;
        for (const auto& [task, acc] : r.per_task) {
            mean += acc;
        }
        CHECK(r.overall == doctest::Approx(mean / 7.0).epsilon(1e-15));
        // pure function of the seeds
        CHECK(evaluate(random_item_completion, suite, 3, 11).overall == r.overall);
    }
    SUBCASE("scoring tolerates surrounding whitespace only") {
        auto padded = [](const std::string& p) { return "  " + oracle_completion(p) + " \t\nnext line"; };
        CHECK(evaluate(padded, suite, 3, 0).overall == 1.0);
        auto altered = [](const std::string& p) { return oracle_completion(p) + "."; };
        CHECK(evaluate(altered, suite, 3, 0).overall == 0.0);
        CHECK(completion_matches("85", "85"));
        CHECK_FALSE(completion_matches("085", "85"));
        CHECK_FALSE(completion_matches("\n85", "85"));
    }
    SUBCASE("shots bounds") {
        CHECK_THROWS_AS((void)evaluate(oracle_completion, suite, 0, 0), ConfigError);
        CHECK_THROWS_AS((void)evaluate(oracle_completion, suite, 33, 0), ConfigError);
        CHECK(evaluate(oracle_completion, suite, 1, 0).overall == 1.0);
    }
    SUBCASE("demo picks are deterministic and exclude duplicates") {
        const auto a = pick_demos(suite, CopainTask::median3, 5, 5, 42);
        CHECK(a == pick_demos(suite, CopainTask::median3, 5, 5, 42));
        std::set<std::vector<int>> distinct;
        for (const auto& d : a) {
            distinct.insert(d.items);
        }
        CHECK(distinct.size() == 5);
    }
}

TEST_CASE("model_completion stops at newline") {
    const TableModel model;
    const auto fn = model_completion(model, 3);
    CHECK(fn("1, 2, 3: 3\n7, 8, 9: ") == "42\n");
    CHECK(completion_matches(fn("x: "), "42"));
}

TEST_CASE("suite files") {
    const auto suite = generate_suite(5, 20, 6);
    const auto path = testing::temp_path("suite.jsonl");
    save_suite(suite, path);
    const auto loaded = load_suite(path);
    CHECK(loaded.seed == 5);
    CHECK(loaded.queries == suite.queries);
    CHECK(loaded.demo_pool == suite.demo_pool);
    {
        std::ifstream in(path);
        std::string first;
        std::getline(in, first);
        CHECK(first == R"({"format":"copain-suite","version":1,"seed":5})");
        std::string second;
        std::getline(in, second);
        CHECK(second.find(R"("task":"max3")") != std::string::npos);
    }

    const auto bad = testing::temp_path("bad_suite.jsonl");
    {
        std::ofstream out(bad);
        out << R"({"task":"max3","items":[1,2,3],"answer":3})" << '\n';
    }
    CHECK_THROWS_AS((void)load_suite(bad), FormatError);
    {
        std::ofstream out(bad);
        out << R"({"format":"copain-suite","version":1,"seed":0})" << '\n'
            << R"({"task":"max3","items":[1,2,3],"answer":2,"split":"query"})" << '\n';
    }
    CHECK_THROWS_AS((void)load_suite(bad), MalformedExampleError);
    {
        std::ofstream out(bad);
        out << R"({"format":"copain-suite","version":1,"seed":0})" << '\n'
            << R"({"task":"alpha_first3","items":["c","b","a"],"answer":"a","split":"demo"})" << '\n';
    }
    CHECK(load_suite(bad).demo_pool.at(CopainTask::alpha_first3).front().answer == 'a');
}

TEST_CASE("max_prompt_length bounds every prompt") {
    const auto suite = generate_suite(5);
    for (std::size_t shots : {1u, 3u, 5u, 8u}) {
        std::size_t longest = 0;
        for (auto task : kCopainTasks) {
            for (std::size_t q = 0; q < 20; ++q) {
                const auto demos = pick_demos(suite, task, q, shots, 1);
                longest = std::max(longest, render_prompt(suite.queries.at(task)[q], demos).size());
            }
        }
        CHECK(longest <= max_prompt_length(shots));
    }
    const CopainExample wide{CopainTask::even_among_odd4, {10, 11, 13, 15}, 10};
    const CopainExample wide2{CopainTask::even_among_odd4, {12, 11, 13, 15}, 12};
    const std::vector<CopainExample> demos{wide2};
    CHECK(render_prompt(wide, demos).size() == max_prompt_length(1));
}
