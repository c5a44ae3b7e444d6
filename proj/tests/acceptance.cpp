// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. One PASS/FAIL line per criterion; exit status 1 if any
// line fails.
//
//   acceptance                 reduced training grid, full-scale runtime projected
//   acceptance --full-grid     trains the shipped grid configs at full scale
//   acceptance --configs DIR   grid config folder (default: the source tree's configs/grid)
//   acceptance --work DIR      scratch folder for runs

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cptlab/copain.hpp"
#include "cptlab/ema.hpp"
#include "cptlab/errors.hpp"
#include "cptlab/harness.hpp"
#include "cptlab/mcp_eval.hpp"
#include "cptlab/mixer.hpp"
#include "cptlab/rng.hpp"
#include "cptlab/tensor_store.hpp"
#include "cptlab/toy_lm.hpp"
#include "gradcheck.hpp"
#include "test_support.hpp"

#ifndef CPTLAB_GRID_DIR
#define CPTLAB_GRID_DIR "configs/grid"
#endif

using namespace cptlab;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int prec = 6) {
    std::ostringstream s;
    s.precision(prec);
    s << v;
    return s.str();
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + p.string());
    }
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

const std::vector<std::string> kGridOrder = {"pretrain", "base", "target_only", "mix",
                                             "curriculum", "ema", "ema_eta10", "lora"};

struct Grid {
    std::map<std::string, ExperimentConfig> configs;
    std::map<std::string, RunResult> runs;
    double seconds = 0.0;
    bool full = false;
};

std::map<std::string, ExperimentConfig> load_grid(const fs::path& dir) {
    std::map<std::string, ExperimentConfig> out;
    for (const auto& name : kGridOrder) {
        out[name] = load_experiment_config(dir / (name + ".toml"));
    }
    return out;
}

void redirect(std::map<std::string, ExperimentConfig>& grid, const fs::path& work) {
    for (auto& [name, cfg] : grid) {
        cfg.output_dir = work / name;
        if (cfg.base_checkpoint) {
            cfg.base_checkpoint = work / "pretrain" / "checkpoints" / "final.cptl";
        }
    }
}

// Same configs with a smaller model, fewer steps and lighter evaluation.
void shrink(std::map<std::string, ExperimentConfig>& grid) {
    for (auto& [name, cfg] : grid) {
        cfg.model.d_model = 32;
        cfg.model.d_ff = 128;
        cfg.train.total_steps = 80;
        cfg.train.batch_size = 8;
        cfg.mix.total_steps = 80;
        cfg.eval_every = 40;
        cfg.checkpoint_every = 40;
        cfg.target.synthetic.n_documents = 800;
        if (cfg.aux) {
            cfg.aux->synthetic.n_documents = 800;
        }
        cfg.eval.copain_queries = 4;
        cfg.eval.mcp_items = 20;
    }
}

Grid run_grid(const fs::path& config_dir, const fs::path& work, bool full) {
    Grid g;
    g.full = full;
    g.configs = load_grid(config_dir);
    redirect(g.configs, work);
    if (!full) {
        shrink(g.configs);
    }
    for (const std::string name : {"mix", "curriculum"}) {
        g.configs.at(name).log_provenance = true;
    }
    fs::remove_all(work);
    const auto t0 = Clock::now();
    for (const auto& name : kGridOrder) {
        const auto t1 = Clock::now();
        g.runs[name] = run_experiment(g.configs.at(name));
        std::cerr << "  grid run " << name << ": " << fmt(seconds_since(t1), 4) << " s\n";
    }
    g.seconds = seconds_since(t0);
    return g;
}

// Per-step and per-record costs at the shipped scale, summed over the grid.
double projected_grid_seconds(const fs::path& config_dir, std::string& detail) {
    const auto grid = load_grid(config_dir);
    std::map<std::string, double> step_cost;
    auto step_seconds = [&](const ExperimentConfig& cfg) {
        const std::string key = std::to_string(cfg.model.d_model) + "/" + std::to_string(cfg.train.batch_size) +
                                (cfg.lora ? "/lora" : "");
        if (auto it = step_cost.find(key); it != step_cost.end()) {
            return it->second;
        }
        auto model = init_model(cfg.model);
        if (cfg.lora) {
            model.attach_lora(*cfg.lora);
        }
        auto state = make_train_state(std::move(model), cfg.train);
        const auto batch = testing::random_batch(1, cfg.train.batch_size, cfg.model.ctx_len, 200);
        (void)train_step_inplace(state, cfg.train, batch);
        constexpr int kReps = 3;
        const auto t0 = Clock::now();
        for (int i = 0; i < kReps; ++i) {
            (void)train_step_inplace(state, cfg.train, batch);
        }
        return step_cost[key] = seconds_since(t0) / kReps;
    };
    const auto& probe = grid.at("target_only");
    const auto ectx = build_eval_context(probe);
    const auto snap = init_model(probe.model).snapshot();
    (void)evaluate_model(*snap, ectx, probe);
    const auto t0 = Clock::now();
    (void)evaluate_model(*snap, ectx, probe);
    const double eval_cost = seconds_since(t0);

    double total = 0.0;
    std::int64_t steps = 0;
    std::int64_t records = 0;
    for (const auto& [name, cfg] : grid) {
        const auto t = cfg.trained_steps();
        const auto n_rec = t / cfg.eval_every + 1 + (t % cfg.eval_every != 0 ? 1 : 0);
        steps += t;
        records += n_rec;
        total += static_cast<double>(t) * step_seconds(cfg) + static_cast<double>(n_rec) * eval_cost;
    }
    detail = std::to_string(steps) + " steps, " + std::to_string(records) + " records, eval " +
             fmt(eval_cost, 3) + " s/record";
    return total;
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

Outcome gradient_fidelity() {
    const auto t0 = Clock::now();
    auto model = init_model(testing::tiny_f64_config(11));
    std::size_t n_params = 0;
    for (const auto& t : model.params().tensors()) {
        n_params += t.numel();
    }
    testing::jitter_parameters(model, 5, 0.3);
    const auto batch = testing::random_batch(6, 3, 8, 16);
    const auto r = testing::gradient_check(model, batch, 100, 17);
    const double secs = seconds_since(t0);
    const bool ok = n_params <= 5000 && r.checked == 100 && r.max_rel_error < 1e-4 && secs < 60.0;
    return {ok, std::to_string(n_params) + " params f64, " + std::to_string(r.checked) +
                    " coords, max rel err " + fmt(r.max_rel_error, 3) + " (< 1e-4), " + fmt(secs, 3) +
                    " s (< 60)" + (ok ? "" : ", worst " + r.worst)};
}

ParameterSet random_f64_set(Rng& rng, bool scalar) {
    ParameterSet ps;
    if (scalar) {
        ps.add(NamedTensor("s", {1}, DType::f64, {rng.normal()}), 0);
        return ps;
    }
    const auto n = rng.between(1, 5);
    for (std::int64_t i = 0; i < n; ++i) {
        Shape shape;
        for (std::int64_t r = rng.between(1, 3); r > 0; --r) {
            shape.push_back(static_cast<std::size_t>(rng.between(1, 6)));
        }
        std::vector<double> data(shape_numel(shape));
        for (double& v : data) {
            v = rng.normal();
        }
        ps.add(NamedTensor("t" + std::to_string(i), shape, DType::f64, std::move(data)),
               static_cast<LayerId>(rng.below(3)));
    }
    return ps;
}

Outcome ema_exactness() {
    double max_err = 0.0;
    std::size_t idle_steps = 0;
    std::size_t idle_changed = 0;
    std::size_t applications = 0;
    for (std::uint64_t h = 0; h < 50; ++h) {
        Rng rng(hash_key(0xE3A, h));
        const double alpha = 0.05 + 0.9 * rng.uniform();
        const std::int64_t eta = h % 5 == 0 ? 1 : rng.between(2, 10);
        const ParameterSet anchor0 = random_f64_set(rng, h % 2 == 0);
        EmaState state = ema_init(anchor0);
        ParameterSet live = anchor0;
        std::vector<ParameterSet> applied;
        const std::int64_t steps = rng.between(1, 6) * eta + rng.between(0, eta - 1);
        for (std::int64_t t = 1; t <= steps; ++t) {
            live = testing::perturbed_copy(live, hash_key(h, static_cast<std::uint64_t>(t)), 0.2);
            const ParameterSet before = live;
            const bool due = ema_due(EmaConfig{alpha, eta}, t);
            if (due) {
                applied.push_back(live);
            }
            const bool did = ema_apply_inplace(EmaConfig{alpha, eta}, state, live, t);
            if (did != due) {
                return {false, "history " + std::to_string(h) + ": application flag mismatch at t=" +
                                   std::to_string(t)};
            }
            if (!due) {
                ++idle_steps;
                idle_changed += bit_equal(before, live) ? 0 : 1;
            }
        }
        applications += applied.size();
        // The anchor is the result of the last application (anchor0 if none).
        const auto ref = ema_unroll_reference(anchor0, applied, alpha);
        for (std::size_t i = 0; i < ref.size(); ++i) {
            const auto a = state.anchor->tensors()[i].data();
            const auto b = ref.tensors()[i].data();
            for (std::size_t j = 0; j < a.size(); ++j) {
                max_err = std::max(max_err, std::abs(a[j] - b[j]));
            }
        }
    }
    const bool ok = max_err <= 1e-12 && idle_changed == 0 && idle_steps > 0;
    return {ok, "50 histories, " + std::to_string(applications) + " applications, max |chain - unrolled| " +
                    fmt(max_err, 3) + " (<= 1e-12), " + std::to_string(idle_changed) + "/" +
                    std::to_string(idle_steps) + " idle steps changed bits"};
}

Outcome ema_constants(const Grid& grid) {
    const EmaConfig defaults;
    std::string detail = "defaults alpha " + fmt(defaults.alpha, 17) + " eta " + std::to_string(defaults.eta);
    bool ok = defaults.alpha == 0.92 && defaults.eta == 1;
    for (const auto& [name, want_eta] : {std::pair<std::string, std::int64_t>{"ema", 1}, {"ema_eta10", 10}}) {
        const auto& cfg = grid.configs.at(name);
        ok = ok && cfg.ema && cfg.ema->alpha == 0.92 && cfg.ema->eta == want_eta;
        const auto mf = read_metrics(grid.runs.at(name).metrics_path);
        const auto& e = mf.meta.at("ema");
        const bool meta_ok = e.at("enabled").get<bool>() && e.at("alpha").get<double>() == 0.92 &&
                             e.at("eta").get<std::int64_t>() == want_eta;
        std::string first_line;
        std::ifstream in(grid.runs.at(name).metrics_path);
        std::getline(in, first_line);
        const std::string want =
            R"("ema":{"enabled":true,"alpha":0.92,"eta":)" + std::to_string(want_eta) + "}";
        const bool text_ok = first_line.find(want) != std::string::npos;
        ok = ok && meta_ok && text_ok;
        detail += "; " + name + ".toml -> meta " + e.dump();
    }
    return {ok, detail};
}

Outcome copain_criterion() {
    const auto suite = generate_suite(0);
    const std::size_t n = suite.query_count();
    const double oracle = evaluate([](const std::string& p) { return oracle_completion(p); }, suite, 5, 0).overall;
    const double empty = evaluate([](const std::string&) { return std::string(); }, suite, 5, 0).overall;
    Rng rng(hash_key(0xC0FA, 1));
    const double random = evaluate(
                              [&](const std::string& p) {
                                  const auto q = parse_prompt(p).query;
                                  return q.items.at(rng.below(q.items.size()));
                              },
                              suite, 5, 0)
                              .overall;
    const bool worked = solve(CopainTask::max3, {85, 24, 63}) == 85 && solve(CopainTask::median3, {85, 24, 63}) == 63 &&
                        solve(CopainTask::odd_among_even4, {24, 76, 60, 51}) == 51 &&
                        solve(CopainTask::alpha_first3, {'w', 'y', 'a'}) == 'a';
    const bool ok = n == 1050 && oracle == 1.0 && empty == 0.0 && std::abs(random - 0.31) <= 0.04 && worked;
    return {ok, std::to_string(n) + " queries, oracle " + fmt(oracle, 4) + ", empty " + fmt(empty, 4) +
                    ", random item " + fmt(random, 4) + " (0.31 +- 0.04), worked examples " +
                    (worked ? "ok" : "wrong")};
}

// Next-token distribution as a function of the prefix.
class FnModel : public LanguageModel {
public:
    using Fn = std::function<std::map<Token, double>(std::span<const Token>)>;
    explicit FnModel(Fn fn) : fn_(std::move(fn)) {}
    std::size_t vocab_size() const override { return 256; }
    std::size_t context_length() const override { return 512; }
    LogProbMatrix forward_logprobs(std::span<const Token> tokens) const override {
        LogProbMatrix out(tokens.size(), 256);
        for (std::size_t r = 0; r < tokens.size(); ++r) {
            auto row = out.row(r);
            std::fill(row.begin(), row.end(), -std::numeric_limits<double>::infinity());
            for (const auto& [tok, p] : fn_(tokens.first(r + 1))) {
                row[tok] = std::log(p);
            }
        }
        return out;
    }

private:
    Fn fn_;
};

McpItem abcd_item(std::string question, std::size_t correct) {
    McpItem it;
    it.question = std::move(question);
    for (const char* l : {"A", "B", "C", "D"}) {
        it.choices.push_back({l, std::string("option ") + l});
    }
    it.correct_index = correct;
    return it;
}

// Label distribution keyed on the first byte of the prompt.
FnModel keyed_model(std::map<char, std::map<Token, double>> table) {
    return FnModel([table = std::move(table)](std::span<const Token> prefix) -> std::map<Token, double> {
        const auto it = table.find(static_cast<char>(prefix.front()));
        if (it == table.end()) {
            return {{'A', 0.25}, {'B', 0.25}, {'C', 0.25}, {'D', 0.25}};
        }
        return it->second;
    });
}

Outcome answer_perplexity() {
    McpConfig cfg;
    cfg.shots = 0;
    McpDataset uniform_ds{.name = "uniform"};
    for (std::size_t i = 0; i < 12; ++i) {
        uniform_ds.items.push_back(abcd_item("question " + std::to_string(i), i % 4));
    }
    const auto uniform = keyed_model({});
    const double ppl_uniform = evaluate_mcp(uniform, uniform_ds, cfg).ppl_correct;

    McpDataset hand{.name = "hand", .items = {abcd_item("p?", 0), abcd_item("q?", 2)}};
    const auto table = keyed_model({
        {'p', {{'A', 0.5}, {'B', 0.25}, {'C', 0.125}, {'D', 0.125}}},
        {'q', {{'A', 0.5}, {'B', 0.25}, {'C', 0.125}, {'D', 0.125}}},
    });
    const double ppl_hand = evaluate_mcp(table, hand, cfg).ppl_correct;

    McpDataset delta_ds{.name = "delta"};
    std::map<char, std::map<Token, double>> delta_table;
    for (std::size_t i = 0; i < 8; ++i) {
        const char key = static_cast<char>('a' + i);
        delta_ds.items.push_back(abcd_item(std::string(1, key) + "?", i % 4));
        delta_table[key] = {{static_cast<Token>('A' + i % 4), 1.0}};
    }
    const double ppl_delta = evaluate_mcp(keyed_model(delta_table), delta_ds, cfg).ppl_correct;

    const bool ok = std::abs(ppl_uniform - 4.0) <= 1e-6 && ppl_hand == 4.0 && ppl_delta == 1.0;
    return {ok, "uniform " + fmt(ppl_uniform, 12) + " (4 +- 1e-6), hand table " + fmt(ppl_hand, 17) +
                    " (exactly 4), delta " + fmt(ppl_delta, 17) + " (1)"};
}

Outcome mixer_ratio(const Grid& grid) {
    SyntheticCorpusConfig tc{.seed = 1, .grammar_id = 2, .n_documents = 300, .script = Script::greek};
    SyntheticCorpusConfig ac{.seed = 2, .grammar_id = 1, .n_documents = 300, .script = Script::latin};
    const auto tdocs = generate_synthetic_corpus(tc);
    const auto adocs = generate_synthetic_corpus(ac);
    constexpr std::size_t kBatch = 16;
    constexpr std::size_t kLen = 128;

    auto drive = [&](const MixSchedule& sched, const std::function<void(std::int64_t, const PackedBatch&)>& visit) {
        CorpusStream ts(tdocs, 4, StreamRole::target);
        CorpusStream as(adocs, 5, StreamRole::auxiliary);
        SequencePacker tp(ts, kLen);
        SequencePacker ap(as, kLen);
        for (std::int64_t s = 0; s < sched.total_steps; ++s) {
            visit(s, next_batch(tp, ap, sched, s, kBatch, 9));
        }
    };

    MixSchedule full{.mode = MixMode::full, .aux_fraction = 0.20, .total_steps = 1024};
    std::size_t blocks = 0;
    std::size_t aux_tokens = 0;
    std::size_t tokens = 0;
    drive(full, [&](std::int64_t, const PackedBatch& b) {
        blocks += b.blocks.size();
        aux_tokens += b.aux_tokens();
        tokens += b.total_tokens();
    });
    const double share = static_cast<double>(aux_tokens) / static_cast<double>(tokens);

    MixSchedule cur{.mode = MixMode::curriculum, .aux_fraction = 0.20, .cutoff_fraction = 0.10, .total_steps = 2000};
    const std::int64_t cutoff = cur.cutoff_step();
    std::size_t before = 0;
    std::size_t after = 0;
    drive(cur, [&](std::int64_t s, const PackedBatch& b) {
        for (const auto& tags : b.provenance) {
            const auto n = static_cast<std::size_t>(std::count(tags.begin(), tags.end(), StreamRole::auxiliary));
            (s < cutoff ? before : after) += n;
        }
    });

    // Provenance lines written by the harness for the grid's curriculum run.
    const auto& ccfg = grid.configs.at("curriculum");
    const auto run_cutoff = ccfg.mix.cutoff_step();
    std::size_t run_after = 0;
    std::size_t run_before = 0;
    std::size_t lines = 0;
    {
        std::ifstream in(grid.runs.at("curriculum").metrics_path);
        std::string line;
        while (std::getline(in, line)) {
            const auto j = nlohmann::json::parse(line);
            if (j.value("kind", "") != "provenance") {
                continue;
            }
            ++lines;
            (j.at("step").get<std::int64_t>() < run_cutoff ? run_before : run_after) +=
                j.at("aux_tokens").get<std::size_t>();
        }
    }
    const bool ok = blocks >= 16000 && std::abs(share - 0.20) <= 0.01 && after == 0 && before > 0 &&
                    lines == static_cast<std::size_t>(ccfg.train.total_steps) && run_after == 0;
    return {ok, std::to_string(blocks) + " blocks, aux share " + fmt(share, 5) +
                    " (0.20 +- 0.01); curriculum aux tokens before/after step " + std::to_string(cutoff) + ": " +
                    std::to_string(before) + "/" + std::to_string(after) + "; grid run provenance " +
                    std::to_string(lines) + " steps, aux before/after step " + std::to_string(run_cutoff) + ": " +
                    std::to_string(run_before) + "/" + std::to_string(run_after)};
}

Outcome shift_ordering(const Grid& grid, const fs::path& config_dir) {
    auto final_record = [&](const std::string& name) { return grid.runs.at(name).records.back(); };
    const double ema = final_record("ema").shift_mean;
    const double plain = final_record("target_only").shift_mean;

    const auto base = load_checkpoint(grid.runs.at("pretrain").final_checkpoint);
    std::size_t checked = 0;
    std::size_t differing = 0;
    for (const auto& entry : fs::directory_iterator(grid.configs.at("lora").output_dir / "checkpoints")) {
        const auto ck = load_checkpoint(entry.path());
        for (const auto& t : base.tensors()) {
            ++checked;
            if (!ck.contains(t.name()) || !bit_equal(ck.at(t.name()), t)) {
                ++differing;
            }
        }
    }

    std::string runtime;
    bool runtime_ok = false;
    if (grid.full) {
        runtime_ok = grid.seconds < 3600.0;
        runtime = "full grid measured " + fmt(grid.seconds / 60.0, 4) + " min (< 60)";
    } else {
        std::string how;
        const double proj = projected_grid_seconds(config_dir, how);
        runtime_ok = proj < 3600.0;
        runtime = "reduced grid " + fmt(grid.seconds, 4) + " s; full grid projected " + fmt(proj / 60.0, 4) +
                  " min (< 60) from " + how;
    }
    const bool ok = ema < plain && checked > 0 && differing == 0 && runtime_ok;
    return {ok, "final shift_mean ema(eta=1) " + fmt(ema) + " < target_only " + fmt(plain) + "; lora base tensors " +
                    std::to_string(checked - differing) + "/" + std::to_string(checked) + " bit-identical; " +
                    runtime};
}

std::vector<fs::path> files_under(const fs::path& root) {
    std::vector<fs::path> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) {
            out.push_back(fs::relative(e.path(), root));
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

Outcome determinism(const Grid& grid, const fs::path& work) {
    std::size_t files = 0;
    std::string diff;
    for (const std::string name : {"mix", "ema_eta10", "lora"}) {
        auto cfg = grid.configs.at(name);
        cfg.output_dir = work / (name + "_rerun");
        fs::remove_all(cfg.output_dir);
        (void)run_experiment(cfg);
        const auto a = files_under(grid.configs.at(name).output_dir);
        const auto b = files_under(cfg.output_dir);
        if (a != b) {
            diff += " " + name + ":file-sets";
            continue;
        }
        for (const auto& rel : a) {
            ++files;
            if (slurp(grid.configs.at(name).output_dir / rel) != slurp(cfg.output_dir / rel)) {
                diff += " " + name + "/" + rel.generic_string();
            }
        }
    }
    return {diff.empty() && files > 0, "3 reruns, " + std::to_string(files) + " files compared" +
                                           (diff.empty() ? ", all byte-identical" : ", differing:" + diff)};
}

Outcome checkpoint_roundtrip(const fs::path& work) {
    fs::create_directories(work);
    std::size_t ok_count = 0;
    std::size_t tensors = 0;
    for (std::uint64_t i = 0; i < 100; ++i) {
        const auto ps = testing::random_parameter_set(hash_key(0xC4, i), 12);
        const auto path = work / ("rt_" + std::to_string(i) + ".cptl");
        save_checkpoint(ps, path);
        const auto back = load_checkpoint(path);
        tensors += ps.size();
        if (bit_equal(ps, back) && encode_checkpoint(back) == encode_checkpoint(ps)) {
            ++ok_count;
        }
        fs::remove(path);
    }
    return {ok_count == 100, std::to_string(ok_count) + "/100 sets (" + std::to_string(tensors) +
                                 " tensors) bit-exact after save/load"};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"cptlab acceptance suite"};
    bool full_grid = false;
    fs::path config_dir = CPTLAB_GRID_DIR;
    fs::path work = fs::temp_directory_path() / "cptlab_acceptance";
    app.add_flag("--full-grid", full_grid, "train the grid configs at full scale");
    app.add_option("--configs", config_dir, "grid config folder");
    app.add_option("--work", work, "scratch folder");
    CLI11_PARSE(app, argc, argv);

    int failures = 0;
    auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << o.detail << " ["
                  << fmt(seconds_since(t0), 3) << " s]" << std::endl;
    };

    Grid grid;
    std::string grid_error;
    try {
        std::cerr << (full_grid ? "training the full grid\n" : "training the reduced grid\n");
        grid = run_grid(config_dir, work / "grid", full_grid);
    } catch (const std::exception& e) {
        grid_error = e.what();
    }
    auto needs_grid = [&](const std::function<Outcome()>& fn) {
        return [&, fn]() -> Outcome {
            if (!grid_error.empty()) {
                return {false, "grid failed: " + grid_error};
            }
            return fn();
        };
    };

    report(1, "gradient fidelity", gradient_fidelity);
    report(2, "ema exactness", ema_exactness);
    report(3, "ema constants", needs_grid([&] { return ema_constants(grid); }));
    report(4, "copain", copain_criterion);
    report(5, "answer perplexity oracle", answer_perplexity);
    report(6, "mixer ratio", needs_grid([&] { return mixer_ratio(grid); }));
    report(7, "shift ordering", needs_grid([&] { return shift_ordering(grid, config_dir); }));
    report(8, "determinism", needs_grid([&] { return determinism(grid, work); }));
    report(9, "checkpoint round-trip", [&] { return checkpoint_roundtrip(work / "roundtrip"); });

    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
