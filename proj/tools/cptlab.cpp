// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0
//
// cptlab command-line front end. Exit codes: 0 success, 2 configuration or
// argument error, 3 training divergence, 4 I/O or unreadable input.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cptlab/copain.hpp"
#include "cptlab/errors.hpp"
#include "cptlab/harness.hpp"
#include "cptlab/mcp_eval.hpp"
#include "cptlab/mixer.hpp"
#include "cptlab/tensor_store.hpp"
#include "cptlab/toy_lm.hpp"

namespace {

using namespace cptlab;
namespace fs = std::filesystem;

constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitIo = 4;

ToyLmModel load_model(const fs::path& path, std::size_t heads) {
    ParameterSet ps = load_checkpoint(path);
    ModelConfig cfg = infer_model_config(ps, heads);
    return ToyLmModel(cfg, std::move(ps));
}

void emit_json(const nlohmann::ordered_json& j, const std::string& out) {
    const std::string text = j.dump(2);
    std::cout << text << '\n';
    if (!out.empty()) {
        std::ofstream f(out, std::ios::binary | std::ios::trunc);
        if (!f || !(f << text << '\n')) {
            throw IoError("cannot write " + out);
        }
    }
}

nlohmann::ordered_json shift_json(const LayerDistances& d) {
    nlohmann::ordered_json j;
    nlohmann::ordered_json per_layer = nlohmann::ordered_json::object();
    for (const auto& [layer, v] : d) {
        per_layer[std::to_string(layer)] = v;
    }
    j["per_layer"] = std::move(per_layer);
    j["mean"] = aggregate_shift(d, ShiftAggregate::mean);
    j["sum"] = aggregate_shift(d, ShiftAggregate::sum);
    return j;
}

int run(int argc, char** argv) {
    CLI::App app{"cptlab: continued-pretraining laboratory"};
    app.require_subcommand(1);
    std::function<void()> action;

    // run-experiment
    {
        auto* sub = app.add_subcommand("run-experiment", "Train and evaluate one variant from a config file");
        auto config = std::make_shared<std::string>();
        auto out_dir = std::make_shared<std::string>();
        auto provenance = std::make_shared<bool>(false);
        auto quiet = std::make_shared<bool>(false);
        sub->add_option("--config", *config, "TOML experiment config")->required()->check(CLI::ExistingFile);
        sub->add_option("--output-dir", *out_dir, "Override experiment.output_dir");
        sub->add_flag("--log-provenance", *provenance, "Write per-batch provenance lines to the metrics stream");
        sub->add_flag("--quiet", *quiet, "No progress lines on stderr");
        sub->callback([=, &action] {
            action = [=] {
                ExperimentConfig cfg = load_experiment_config(*config);
                if (!out_dir->empty()) {
                    cfg.output_dir = *out_dir;
                }
                cfg.log_provenance = cfg.log_provenance || *provenance;
                RunOptions opts;
                if (!*quiet) {
                    opts.log = [name = cfg.name](const std::string& m) { std::cerr << "[" << name << "] " << m << '\n'; };
                }
                const auto res = run_experiment(cfg, opts);
                std::cout << res.metrics_path.string() << '\n' << res.final_checkpoint.string() << '\n';
            };
        });
    }

    // compare-runs
    {
        auto* sub = app.add_subcommand("compare-runs", "Align metrics files and write a comparison CSV");
        auto files = std::make_shared<std::vector<std::string>>();
        auto out = std::make_shared<std::string>();
        sub->add_option("metrics", *files, "metrics.jsonl files")->required()->expected(2, -1);
        sub->add_option("--out", *out, "Output CSV (a .summary.csv is written next to it)")->required();
        sub->callback([=, &action] {
            action = [=] { compare_runs({files->begin(), files->end()}, *out); };
        });
    }

    // export-series
    {
        auto* sub = app.add_subcommand("export-series", "Write selected record fields as CSV");
        auto file = std::make_shared<std::string>();
        auto fields = std::make_shared<std::vector<std::string>>();
        auto out = std::make_shared<std::string>();
        sub->add_option("metrics", *file, "metrics.jsonl")->required();
        sub->add_option("--fields", *fields, "Comma-separated field names")->required()->delimiter(',');
        sub->add_option("--out", *out, "Output CSV")->required();
        sub->callback([=, &action] { action = [=] { export_series(*file, *fields, *out); }; });
    }

    // plot
    {
        auto* sub = app.add_subcommand("plot", "SVG line plot of one field over steps");
        auto files = std::make_shared<std::vector<std::string>>();
        auto field = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        sub->add_option("metrics", *files, "metrics.jsonl files")->required();
        sub->add_option("--field", *field, "Record field")->required();
        sub->add_option("--out", *out, "Output SVG")->required();
        sub->callback([=, &action] {
            action = [=] { write_svg_plot({files->begin(), files->end()}, *field, *out); };
        });
    }

    // gen-copain
    {
        auto* sub = app.add_subcommand("gen-copain", "Generate a Copain suite");
        auto seed = std::make_shared<std::uint64_t>(0);
        auto out = std::make_shared<std::string>();
        sub->add_option("--seed", *seed, "Generation seed")->required();
        sub->add_option("--out", *out, "Output JSONL")->required();
        sub->callback([=, &action] {
            action = [=] {
                const auto suite = generate_suite(*seed);
                save_suite(suite, *out);
                std::cout << suite.query_count() << " queries written to " << *out << '\n';
            };
        });
    }

    // eval-copain
    {
        auto* sub = app.add_subcommand("eval-copain", "Evaluate a checkpoint on a Copain suite");
        auto suite = std::make_shared<std::string>();
        auto model = std::make_shared<std::string>();
        auto shots = std::make_shared<std::size_t>(5);
        auto eval_seed = std::make_shared<std::uint64_t>(0);
        auto heads = std::make_shared<std::size_t>(2);
        auto out = std::make_shared<std::string>();
        sub->add_option("--suite", *suite, "Suite JSONL")->required();
        sub->add_option("--model", *model, "Checkpoint")->required();
        sub->add_option("--shots", *shots, "Demonstrations per prompt")->capture_default_str();
        sub->add_option("--eval-seed", *eval_seed, "Demo selection seed")->capture_default_str();
        sub->add_option("--heads", *heads, "Attention heads of the checkpointed model")->capture_default_str();
        sub->add_option("--out", *out, "Also write the JSON result here");
        sub->callback([=, &action] {
            action = [=] {
                const auto s = load_suite(*suite);
                const auto m = load_model(*model, *heads);
                const auto snap = m.snapshot();
                emit_json(to_json(evaluate(model_completion(*snap), s, *shots, *eval_seed)), *out);
            };
        });
    }

    // eval-mcp
    {
        auto* sub = app.add_subcommand("eval-mcp", "Multiple-choice evaluation of a checkpoint");
        auto dataset = std::make_shared<std::string>();
        auto model = std::make_shared<std::string>();
        auto cfg = std::make_shared<McpConfig>();
        auto target = std::make_shared<std::string>("label");
        auto heads = std::make_shared<std::size_t>(2);
        auto out = std::make_shared<std::string>();
        sub->add_option("--dataset", *dataset, "Dataset JSONL")->required();
        sub->add_option("--model", *model, "Checkpoint")->required();
        sub->add_option("--shots", cfg->shots, "Demonstrations per prompt")->capture_default_str();
        sub->add_option("--score-target", *target, "label or text")
            ->check(CLI::IsMember({"label", "text"}))
            ->capture_default_str();
        sub->add_option("--demo-seed", cfg->demo_seed, "Demo selection seed")->capture_default_str();
        sub->add_flag("--token-normalized", cfg->token_normalized, "Per-token answer log-probabilities");
        sub->add_option("--heads", *heads, "Attention heads of the checkpointed model")->capture_default_str();
        sub->add_option("--out", *out, "Also write the JSON result here");
        sub->callback([=, &action] {
            action = [=] {
                McpConfig c = *cfg;
                c.target = parse_score_target(*target);
                const auto ds = load_mcp_dataset(*dataset);
                const auto m = load_model(*model, *heads);
                const auto snap = m.snapshot();
                emit_json(to_json(evaluate_mcp(*snap, ds, c)), *out);
            };
        });
    }

    // gen-corpus
    {
        auto* sub = app.add_subcommand("gen-corpus", "Write a synthetic corpus, one document per line");
        auto cfg = std::make_shared<SyntheticCorpusConfig>();
        auto script = std::make_shared<std::string>("latin");
        auto out = std::make_shared<std::string>();
        sub->add_option("--seed", cfg->seed, "Walk seed")->capture_default_str();
        sub->add_option("--grammar-id", cfg->grammar_id, "Grammar (lexicon and successor table)")
            ->capture_default_str();
        sub->add_option("--documents", cfg->n_documents, "Document count")->capture_default_str();
        sub->add_option("--min-words", cfg->min_words, "Minimum words per document")->capture_default_str();
        sub->add_option("--max-words", cfg->max_words, "Maximum words per document")->capture_default_str();
        sub->add_option("--lexicon-size", cfg->lexicon_size, "Words in the lexicon")->capture_default_str();
        sub->add_option("--script", *script, "latin or greek")
            ->check(CLI::IsMember({"latin", "greek"}))
            ->capture_default_str();
        sub->add_option("--out", *out, "Output file")->required();
        sub->callback([=, &action] {
            action = [=] {
                SyntheticCorpusConfig c = *cfg;
                c.script = parse_script(*script);
                write_documents(generate_synthetic_corpus(c), *out);
            };
        });
    }

    // gen-mcp
    {
        auto* sub = app.add_subcommand("gen-mcp", "Write a toy next-word multiple-choice dataset");
        auto cfg = std::make_shared<NextWordConfig>();
        auto script = std::make_shared<std::string>("greek");
        auto out = std::make_shared<std::string>();
        sub->add_option("--seed", cfg->seed, "Item seed")->capture_default_str();
        sub->add_option("--grammar-id", cfg->grammar_id, "Grammar the questions come from")->capture_default_str();
        sub->add_option("--items", cfg->n_items, "Item count")->capture_default_str();
        sub->add_option("--prefix-words", cfg->prefix_words, "Words in each question")->capture_default_str();
        sub->add_option("--lexicon-size", cfg->lexicon_size, "Words in the lexicon")->capture_default_str();
        sub->add_option("--max-prompt-bytes", cfg->max_prompt_bytes, "Longest zero-shot prompt plus label")
            ->capture_default_str();
        sub->add_option("--script", *script, "latin or greek")
            ->check(CLI::IsMember({"latin", "greek"}))
            ->capture_default_str();
        sub->add_option("--out", *out, "Output JSONL")->required();
        sub->callback([=, &action] {
            action = [=] {
                NextWordConfig c = *cfg;
                c.script = parse_script(*script);
                save_mcp_dataset(generate_nextword_dataset(c), *out);
            };
        });
    }

    // shift
    {
        auto* sub = app.add_subcommand(
            "shift", "Per-layer L2 distance between two checkpoints, or the adapter shift of one");
        auto a = std::make_shared<std::string>();
        auto b = std::make_shared<std::string>();
        auto heads = std::make_shared<std::size_t>(2);
        sub->add_option("a", *a, "Checkpoint")->required();
        sub->add_option("b", *b, "Reference checkpoint (omit for the adapter shift of a)");
        sub->add_option("--heads", *heads, "Attention heads, used with a single checkpoint")->capture_default_str();
        sub->callback([=, &action] {
            action = [=] {
                if (b->empty()) {
                    const auto m = load_model(*a, *heads);
                    if (!m.has_lora()) {
                        throw ConfigError(*a + " carries no adapters; pass a reference checkpoint");
                    }
                    emit_json(shift_json(lora_shift(m)), "");
                } else {
                    emit_json(shift_json(l2_distance_per_layer(load_checkpoint(*a), load_checkpoint(*b))), "");
                }
            };
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }
    try {
        action();
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << '\n';
        return kExitDivergence;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kExitIo;
    } catch (const FormatError& e) {
        std::cerr << "unreadable input: " << e.what() << '\n';
        return kExitIo;
    } catch (const CorruptionError& e) {
        std::cerr << "unreadable input: " << e.what() << '\n';
        return kExitIo;
    } catch (const CorpusError& e) {
        std::cerr << "corpus error: " << e.what() << '\n';
        return kExitIo;
    } catch (const MalformedExampleError& e) {
        std::cerr << "unreadable input: " << e.what() << '\n';
        return kExitIo;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return 1;
    }
}
