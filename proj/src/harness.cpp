// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0

#include "cptlab/harness.hpp"

#include <cmath>
#include <fstream>
#include <memory>

#include "cptlab/errors.hpp"
#include "cptlab/rng.hpp"

namespace cptlab {

namespace {

constexpr std::uint64_t kPuzzleSalt = 0x50555a5a;

void log_line(const RunOptions& opts, const std::string& msg) {
    if (opts.log) {
        opts.log(msg);
    }
}

std::string copain_field(CopainTask t) { return "copain." + std::string(task_name(t)); }

CopainSuite truncate_suite(CopainSuite suite, std::size_t queries) {
    for (auto& [task, qs] : suite.queries) {
        if (qs.size() > queries) {
            qs.resize(queries);
        }
    }
    return suite;
}

void write_line(std::ofstream& out, const nlohmann::ordered_json& j, const std::filesystem::path& path) {
    out << j.dump() << '\n';
    if (!out.flush()) {
        throw IoError("write failed for " + path.string());
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

nlohmann::ordered_json to_json(const MetricRecord& r) {
    nlohmann::ordered_json j;
    j["kind"] = "record";
    j["step"] = r.step;
    j["train_loss"] = r.train_loss;
    j["val_ppl"] = r.val_ppl;
    j["copain_overall"] = r.copain_overall;
    nlohmann::ordered_json per_task = nlohmann::ordered_json::object();
    for (const auto& [task, acc] : r.copain) {
        per_task[std::string(task_name(task))] = acc;
    }
    j["copain"] = std::move(per_task);
    j["mcp_accuracy"] = r.mcp_accuracy;
    j["ppl_correct"] = r.ppl_correct;
    j["ppl_incorrect"] = r.ppl_incorrect;
    j["shift_mean"] = r.shift_mean;
    j["shift_sum"] = r.shift_sum;
    j["lr"] = r.lr;
    j["ema_applied"] = r.ema_applied;
    j["aux_fraction_realized"] = r.aux_fraction_realized;
    return j;
}

MetricRecord record_from_json(const nlohmann::json& j) {
    // null is how a non-finite double serializes
    auto num = [&](const char* key) {
        const auto& v = j.at(key);
        return v.is_null() ? std::nan("") : v.get<double>();
    };
    MetricRecord r;
    r.step = j.at("step").get<std::int64_t>();
    r.train_loss = num("train_loss");
    r.val_ppl = num("val_ppl");
    r.copain_overall = num("copain_overall");
    for (const auto& [k, v] : j.at("copain").items()) {
        r.copain[parse_task(k)] = v.is_null() ? std::nan("") : v.get<double>();
    }
    r.mcp_accuracy = num("mcp_accuracy");
    r.ppl_correct = num("ppl_correct");
    r.ppl_incorrect = num("ppl_incorrect");
    r.shift_mean = num("shift_mean");
    r.shift_sum = num("shift_sum");
    r.lr = num("lr");
    r.ema_applied = j.at("ema_applied").get<bool>();
    r.aux_fraction_realized = num("aux_fraction_realized");
    return r;
}

std::vector<std::string> record_field_names() {
    std::vector<std::string> out{"step", "train_loss", "val_ppl", "copain_overall"};
    for (auto t : kCopainTasks) {
        out.push_back(copain_field(t));
    }
    for (const char* f : {"mcp_accuracy", "ppl_correct", "ppl_incorrect", "shift_mean", "shift_sum", "lr",
                          "ema_applied", "aux_fraction_realized"}) {
        out.emplace_back(f);
    }
    return out;
}

double record_field(const MetricRecord& r, std::string_view field) {
    if (field == "step") return static_cast<double>(r.step);
    if (field == "train_loss") return r.train_loss;
    if (field == "val_ppl") return r.val_ppl;
    if (field == "copain_overall") return r.copain_overall;
    if (field == "mcp_accuracy") return r.mcp_accuracy;
    if (field == "ppl_correct") return r.ppl_correct;
    if (field == "ppl_incorrect") return r.ppl_incorrect;
    if (field == "shift_mean") return r.shift_mean;
    if (field == "shift_sum") return r.shift_sum;
    if (field == "lr") return r.lr;
    if (field == "ema_applied") return r.ema_applied ? 1.0 : 0.0;
    if (field == "aux_fraction_realized") return r.aux_fraction_realized;
    for (auto t : kCopainTasks) {
        if (field == copain_field(t)) {
            const auto it = r.copain.find(t);
            return it == r.copain.end() ? std::nan("") : it->second;
        }
    }
    throw FieldError("unknown metric field '" + std::string(field) + "'");
}

// ---------------------------------------------------------------------------
// Corpora and evaluation
// ---------------------------------------------------------------------------

std::string puzzle_document(Rng& rng, std::size_t lines) {
    const CopainTask task = kCopainTasks[rng.below(kCopainTasks.size())];
    std::string doc;
    for (std::size_t i = 0; i < lines; ++i) {
        if (i > 0) {
            doc += '\n';
        }
        doc += render_line(random_example(task, rng), true);
    }
    return doc;
}

CorpusSplit load_corpus(const CorpusSpec& spec) {
    std::vector<std::string> docs = spec.path ? read_documents(*spec.path) : generate_synthetic_corpus(spec.synthetic);
    if (docs.size() <= spec.val_documents) {
        throw CorpusError("corpus has " + std::to_string(docs.size()) + " documents, need more than " +
                          std::to_string(spec.val_documents) + " held out for validation");
    }
    CorpusSplit split;
    split.val.assign(docs.end() - static_cast<std::ptrdiff_t>(spec.val_documents), docs.end());
    docs.resize(docs.size() - spec.val_documents);
    if (spec.puzzle_fraction > 0.0) {
        const auto n = static_cast<std::size_t>(std::llround(spec.puzzle_fraction * static_cast<double>(docs.size())));
        Rng rng(hash_key(spec.puzzle_seed, kPuzzleSalt));
        for (std::size_t i = 0; i < n; ++i) {
            docs.push_back(puzzle_document(rng, spec.puzzle_lines));
        }
    }
    split.train = std::move(docs);
    return split;
}

EvalContext build_eval_context(const ExperimentConfig& cfg) {
    EvalContext ctx;
    const CopainSuite suite =
        cfg.eval.copain_suite ? load_suite(*cfg.eval.copain_suite) : generate_suite(cfg.eval.copain_seed);
    ctx.copain = truncate_suite(suite, cfg.eval.copain_queries);
    if (cfg.eval.mcp_dataset) {
        ctx.mcp = load_mcp_dataset(*cfg.eval.mcp_dataset);
    } else {
        NextWordConfig nw;
        nw.seed = cfg.eval.mcp_seed;
        nw.n_items = cfg.eval.mcp_items;
        if (cfg.target.path) {
            throw ConfigError("eval.mcp_dataset is required when the target corpus comes from a file");
        }
        nw.grammar_id = cfg.target.synthetic.grammar_id;
        nw.script = cfg.target.synthetic.script;
        nw.lexicon_size = cfg.target.synthetic.lexicon_size;
        nw.max_prompt_bytes = std::min<std::size_t>(nw.max_prompt_bytes, cfg.model.ctx_len - 1);
        ctx.mcp = generate_nextword_dataset(nw);
    }
    ctx.val_stream = document_stream(load_corpus(cfg.target).val);
    return ctx;
}

MetricRecord evaluate_model(const LanguageModel& model, const EvalContext& ctx, const ExperimentConfig& cfg) {
    MetricRecord r;
    r.val_ppl = validation_perplexity(model, ctx.val_stream, cfg.eval.val_stride);
    const auto copain =
        evaluate(model_completion(model), ctx.copain, cfg.eval.copain_shots, cfg.eval.copain_eval_seed);
    r.copain_overall = copain.overall;
    r.copain = copain.per_task;
    const auto mcp = evaluate_mcp(model, ctx.mcp, cfg.eval.mcp);
    r.mcp_accuracy = mcp.accuracy;
    r.ppl_correct = mcp.ppl_correct;
    r.ppl_incorrect = mcp.ppl_incorrect;
    return r;
}

// ---------------------------------------------------------------------------
// Run loop
// ---------------------------------------------------------------------------

RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
    cfg.validate();
    const std::int64_t total = cfg.trained_steps();

    const CorpusSplit target = load_corpus(cfg.target);
    std::optional<CorpusSplit> aux;
    if (cfg.aux && cfg.mix.mode != MixMode::none) {
        aux = load_corpus(*cfg.aux);
    }
    const EvalContext ectx = build_eval_context(cfg);

    ToyLmModel model = cfg.base_checkpoint ? ToyLmModel(cfg.model, load_checkpoint(*cfg.base_checkpoint))
                                           : init_model(cfg.model);
    if (model.has_lora()) {
        throw ConfigError("base checkpoint already carries adapters");
    }
    if (cfg.lora) {
        model.attach_lora(*cfg.lora);
    }
    const ParameterSet initial = model.params();

    namespace fs = std::filesystem;
    const fs::path ckpt_dir = cfg.output_dir / "checkpoints";
    std::error_code ec;
    fs::create_directories(ckpt_dir, ec);
    if (ec) {
        throw IoError("cannot create " + ckpt_dir.string() + ": " + ec.message());
    }
    RunResult result;
    result.metrics_path = cfg.output_dir / "metrics.jsonl";
    result.final_checkpoint = ckpt_dir / "final.cptl";
    std::ofstream metrics(result.metrics_path, std::ios::binary | std::ios::trunc);
    if (!metrics) {
        throw IoError("cannot open " + result.metrics_path.string() + " for writing");
    }

    const EmaConfig ema_cfg = cfg.ema.value_or(EmaConfig{});
    nlohmann::ordered_json meta;
    meta["kind"] = "meta";
    meta["schema_version"] = ExperimentConfig::kSchemaVersion;
    meta["name"] = cfg.name;
    meta["variant"] = variant_name(cfg.variant);
    meta["ema"] = {{"enabled", cfg.ema.has_value()}, {"alpha", ema_cfg.alpha}, {"eta", ema_cfg.eta}};
    meta["seeds"] = {{"model", cfg.model.seed},
                     {"train", cfg.train.seed},
                     {"mix", cfg.mix_seed},
                     {"corpus_target", cfg.target.synthetic.seed},
                     {"corpus_aux", cfg.aux ? cfg.aux->synthetic.seed : 0},
                     {"puzzle_target", cfg.target.puzzle_seed},
                     {"puzzle_aux", cfg.aux ? cfg.aux->puzzle_seed : 0},
                     {"copain_suite", ectx.copain.seed},
                     {"copain_eval", cfg.eval.copain_eval_seed},
                     {"mcp", cfg.eval.mcp_seed},
                     {"mcp_demo", cfg.eval.mcp.demo_seed},
                     {"lora", cfg.lora ? cfg.lora->seed : 0}};
    meta["bases"] = {{"val_ppl", "e"}, {"ppl_correct", 2}, {"ppl_incorrect", 2}};
    meta["shift"] = cfg.lora ? "lora_product_norm" : "l2_to_initial";
    meta["mcp_dataset"] = ectx.mcp.name;
    meta["copain_queries_per_task"] = ectx.copain.queries.begin()->second.size();
    meta["config"] = to_json(cfg);
    write_line(metrics, meta, result.metrics_path);

    // streams live on the heap so packers keep stable pointers
    auto target_stream = std::make_unique<CorpusStream>(target.train, cfg.mix_seed, StreamRole::target);
    std::unique_ptr<CorpusStream> aux_stream;
    if (aux) {
        aux_stream = std::make_unique<CorpusStream>(aux->train, cfg.mix_seed, StreamRole::auxiliary);
    }
    const auto epoch_hook = [&](StreamRole role, std::uint64_t epoch) {
        log_line(opts, std::string(role_name(role)) + " stream entered epoch " + std::to_string(epoch));
    };
    target_stream->on_epoch(epoch_hook);
    if (aux_stream) {
        aux_stream->on_epoch(epoch_hook);
    }
    SequencePacker target_packer(*target_stream, cfg.model.ctx_len);
    std::optional<SequencePacker> aux_packer;
    if (aux_stream) {
        aux_packer.emplace(*aux_stream, cfg.model.ctx_len);
    }
    SequencePacker& aux_src = aux_packer ? *aux_packer : target_packer;
    auto draw = [&](std::int64_t step) {
        return next_batch(target_packer, aux_src, cfg.mix, step, cfg.train.batch_size, cfg.mix_seed);
    };

    TrainState state = make_train_state(std::move(model), cfg.train);
    EmaState ema_state = ema_init(state.model.params());
    bool ema_applied = false;
    PackedBatch batch = draw(0);

    for (std::int64_t s = 0;; ++s) {
        if (s > 0 && s < total) {
            batch = draw(s);
        }
        if (cfg.log_provenance && s < total) {
            std::string roles;
            for (std::size_t i = 0; i < batch.blocks.size(); ++i) {
                roles += batch.block_role(i) == StreamRole::auxiliary ? 'A' : 'T';
            }
            nlohmann::ordered_json p;
            p["kind"] = "provenance";
            p["step"] = s;
            p["blocks"] = roles;
            p["aux_tokens"] = batch.aux_tokens();
            p["tokens"] = batch.total_tokens();
            write_line(metrics, p, result.metrics_path);
        }
        if (s % cfg.eval_every == 0 || s == total) {
            const auto snap = state.model.snapshot();
            MetricRecord r = evaluate_model(*snap, ectx, cfg);
            r.step = s;
            r.train_loss = batch_loss(*snap, batch.blocks);
            const auto shift =
                cfg.lora ? lora_shift(state.model) : l2_distance_per_layer(state.model.params(), initial);
            r.shift_mean = aggregate_shift(shift, ShiftAggregate::mean);
            r.shift_sum = aggregate_shift(shift, ShiftAggregate::sum);
            r.lr = lr_at(s, cfg.train);
            r.ema_applied = ema_applied;
            r.aux_fraction_realized =
                static_cast<double>(batch.aux_tokens()) / static_cast<double>(batch.total_tokens());
            write_line(metrics, to_json(r), result.metrics_path);
            log_line(opts, "step " + std::to_string(s) + " loss " + format_number(r.train_loss) + " val_ppl " +
                               format_number(r.val_ppl) + " copain " + format_number(r.copain_overall) +
                               " shift " + format_number(r.shift_mean));
            result.records.push_back(std::move(r));
        }
        if (s % cfg.checkpoint_every == 0) {
            save_checkpoint(state.model.params(), ckpt_dir / ("step_" + std::to_string(s) + ".cptl"));
        }
        if (s == total) {
            break;
        }
        ParameterSet last_good = state.model.params();
        try {
            train_step_inplace(state, cfg.train, batch.blocks);
        } catch (const DivergenceError&) {
            save_checkpoint(last_good, ckpt_dir / "last_good.cptl");
            throw;
        }
        ema_applied = cfg.ema && ema_apply_inplace(*cfg.ema, ema_state, state.model.mutable_params(), s + 1);
    }
    save_checkpoint(state.model.params(), result.final_checkpoint);
    return result;
}

MetricsFile read_metrics(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open metrics file " + path.string());
    }
    MetricsFile out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            const auto kind = j.value("kind", std::string("record"));
            if (kind == "meta") {
                if (j.value("schema_version", 0) != ExperimentConfig::kSchemaVersion) {
                    throw FormatError("unsupported metrics schema version");
                }
                out.meta = j;
            } else if (kind == "record") {
                out.records.push_back(record_from_json(j));
            }
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (out.meta.is_null()) {
        throw FormatError(path.string() + ": missing meta line");
    }
    return out;
}

} // namespace cptlab
