// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: config loading, the training/evaluation loop for
// each continued-pretraining variant, metric records, and run comparison /
// series export.
//
// Timeline of a run with T steps. Update s (0-based) consumes the mixer batch
// of step s and turns the parameters at step s into those at step s + 1; EMA
// is then applied with t = s + 1. A record is written at every multiple of
// eval_every and at T. The record at step s describes the parameters at step s
// and the batch of step min(s, T - 1): train_loss is the loss of the current
// parameters on that batch and aux_fraction_realized its auxiliary token share.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cptlab/copain.hpp"
#include "cptlab/ema.hpp"
#include "cptlab/mcp_eval.hpp"
#include "cptlab/mixer.hpp"
#include "cptlab/toy_lm.hpp"

namespace cptlab {

enum class Variant : std::uint8_t { base, cpt_target_only, cpt_mix, cpt_curriculum, cpt_ema, cpt_lora };

[[nodiscard]] std::string_view variant_name(Variant v) noexcept;
[[nodiscard]] Variant parse_variant(std::string_view name);

// Either a corpus file (one document per line) or a synthetic grammar.
// Puzzle documents are Copain-style demo blocks mixed into the training
// documents in memory; the last val_documents natural documents are held out.
struct CorpusSpec {
    std::optional<std::filesystem::path> path;
    SyntheticCorpusConfig synthetic;
    double puzzle_fraction = 0.0;
    std::uint64_t puzzle_seed = 0;
    std::size_t puzzle_lines = 6;
    std::size_t val_documents = 0;
};

struct EvalSpec {
    std::optional<std::filesystem::path> copain_suite;
    std::uint64_t copain_seed = 0;
    std::uint64_t copain_eval_seed = 0;
    std::size_t copain_shots = 5;
    // Leading queries of each task evaluated at every record.
    std::size_t copain_queries = 50;
    std::optional<std::filesystem::path> mcp_dataset;
    std::uint64_t mcp_seed = 0;
    std::size_t mcp_items = 100;
    McpConfig mcp{.shots = 0};
    std::size_t val_stride = 0;
};

struct ExperimentConfig {
    static constexpr int kSchemaVersion = 1;

    std::string name = "run";
    Variant variant = Variant::cpt_target_only;
    ModelConfig model;
    TrainConfig train;
    MixSchedule mix{.mode = MixMode::none};
    std::uint64_t mix_seed = 0;
    std::optional<EmaConfig> ema;
    std::optional<LoraConfig> lora;
    std::int64_t eval_every = 100;
    std::int64_t checkpoint_every = 500;
    CorpusSpec target;
    std::optional<CorpusSpec> aux;
    EvalSpec eval;
    std::optional<std::filesystem::path> base_checkpoint;
    std::filesystem::path output_dir = "runs/run";
    bool log_provenance = false;

    // Throws ConfigError for any inconsistency between variant and sub-configs.
    void validate() const;
    // Steps actually trained (0 for the base variant).
    [[nodiscard]] std::int64_t trained_steps() const;
};

// The defaults used when a config file leaves keys out.
[[nodiscard]] ExperimentConfig default_experiment_config();

// TOML file. Unknown sections or keys, wrong value types and out-of-range
// values raise ConfigError; relative paths resolve against the file's folder.
[[nodiscard]] ExperimentConfig load_experiment_config(const std::filesystem::path& path);
[[nodiscard]] ExperimentConfig parse_experiment_config(std::string_view toml_text,
                                                       const std::filesystem::path& base_dir = {});

[[nodiscard]] nlohmann::ordered_json to_json(const ExperimentConfig& cfg);

struct MetricRecord {
    std::int64_t step = 0;
    double train_loss = 0.0;
    double val_ppl = 0.0;
    double copain_overall = 0.0;
    std::map<CopainTask, double> copain;
    double mcp_accuracy = 0.0;
    double ppl_correct = 0.0;
    double ppl_incorrect = 0.0;
    double shift_mean = 0.0;
    double shift_sum = 0.0;
    double lr = 0.0;
    bool ema_applied = false;
    double aux_fraction_realized = 0.0;

    friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

[[nodiscard]] nlohmann::ordered_json to_json(const MetricRecord& r);
[[nodiscard]] MetricRecord record_from_json(const nlohmann::json& j);

// Flat field names: step, train_loss, val_ppl, copain_overall, copain.<task>,
// mcp_accuracy, ppl_correct, ppl_incorrect, shift_mean, shift_sum, lr,
// ema_applied (0/1), aux_fraction_realized.
[[nodiscard]] std::vector<std::string> record_field_names();
// Throws FieldError for an unknown name.
[[nodiscard]] double record_field(const MetricRecord& r, std::string_view field);

// Evaluation resources shared by every record of a run.
struct EvalContext {
    CopainSuite copain;
    McpDataset mcp;
    std::vector<Token> val_stream;
};

[[nodiscard]] EvalContext build_eval_context(const ExperimentConfig& cfg);

// Evaluates one model; train_loss, lr, shift, ema and aux fields are left 0.
[[nodiscard]] MetricRecord evaluate_model(const LanguageModel& model, const EvalContext& ctx,
                                          const ExperimentConfig& cfg);

// Natural documents of a corpus spec, plus held-out validation documents.
struct CorpusSplit {
    std::vector<std::string> train;
    std::vector<std::string> val;
};

[[nodiscard]] CorpusSplit load_corpus(const CorpusSpec& spec);
// Multi-line Copain document: `lines` answered examples of one task.
[[nodiscard]] std::string puzzle_document(Rng& rng, std::size_t lines);

struct RunOptions {
    std::function<void(const std::string&)> log;
};

struct RunResult {
    std::filesystem::path metrics_path;
    std::filesystem::path final_checkpoint;
    std::vector<MetricRecord> records;
};

// Writes <output_dir>/metrics.jsonl and <output_dir>/checkpoints/. Throws
// ConfigError before any compute, DivergenceError (after saving
// checkpoints/last_good.cptl) on a non-finite loss.
RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

struct MetricsFile {
    nlohmann::json meta;
    std::vector<MetricRecord> records;
};

[[nodiscard]] MetricsFile read_metrics(const std::filesystem::path& path);

// Per-step table of every run's values plus pairwise deltas (later minus
// earlier file) for the summary metrics; also writes <out stem>.summary.csv
// with one final-step row per run. Throws AlignmentError when the step sets
// differ.
void compare_runs(const std::vector<std::filesystem::path>& metrics, const std::filesystem::path& out_csv);

// step first, then the requested fields. Throws FieldError, ValidationError
// for a non-finite value.
void export_series(const std::filesystem::path& metrics, const std::vector<std::string>& fields,
                   const std::filesystem::path& out_csv);

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

[[nodiscard]] CsvTable read_csv(const std::filesystem::path& path);
void write_csv(const CsvTable& table, const std::filesystem::path& path);
// Shortest round-trip decimal form.
[[nodiscard]] std::string format_number(double v);

// One polyline per metrics file for `field` against step.
void write_svg_plot(const std::vector<std::filesystem::path>& metrics, std::string_view field,
                    const std::filesystem::path& out_svg);

} // namespace cptlab
