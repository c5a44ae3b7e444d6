// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <set>
#include <sstream>

#include <toml.hpp>

#include "cptlab/errors.hpp"
#include "cptlab/harness.hpp"

namespace cptlab {

namespace {

// Typed key access over one TOML table; remembers which keys were read so
// leftovers can be reported.
class Section {
public:
    Section(const toml::table* table, std::string name) : table_(table), name_(std::move(name)) {}

    [[nodiscard]] bool present() const noexcept { return table_ != nullptr; }
    [[nodiscard]] bool has(std::string_view key) const { return table_ && table_->contains(key); }

    template <class T>
    void get(std::string_view key, T& out) {
        const toml::node* node = lookup(key);
        if (!node) {
            return;
        }
        if constexpr (std::is_same_v<T, bool>) {
            out = require(node->value<bool>(), key, "a boolean");
        } else if constexpr (std::is_same_v<T, double>) {
            if (!node->is_number()) {
                fail(key, "a number");
            }
            out = *node->value<double>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            out = require(node->value<std::string>(), key, "a string");
        } else if constexpr (std::is_integral_v<T>) {
            if (!node->is_integer()) {
                fail(key, "an integer");
            }
            const auto v = *node->value<std::int64_t>();
            if constexpr (std::is_unsigned_v<T>) {
                if (v < 0) {
                    fail(key, "a non-negative integer");
                }
            }
            out = static_cast<T>(v);
        } else {
            static_assert(std::is_same_v<T, std::vector<std::string>>);
            const auto* arr = node->as_array();
            if (!arr) {
                fail(key, "an array of strings");
            }
            out.clear();
            for (const auto& e : *arr) {
                out.push_back(require(e.value<std::string>(), key, "an array of strings"));
            }
        }
    }

    std::optional<std::filesystem::path> path(std::string_view key, const std::filesystem::path& base) {
        std::string s;
        if (!has(key)) {
            return std::nullopt;
        }
        get(key, s);
        if (s.empty()) {
            fail(key, "a non-empty path");
        }
        std::filesystem::path p(s);
        return p.is_relative() && !base.empty() ? base / p : p;
    }

    // Keys not consumed by get()/path() are errors; sub-tables are skipped
    // when listed in `children`.
    void finish(const std::set<std::string>& children = {}) const {
        if (!table_) {
            return;
        }
        for (const auto& [k, v] : *table_) {
            const std::string key(k.str());
            if (!used_.contains(key) && !children.contains(key)) {
                throw ConfigError("unknown key '" + key + "' in [" + name_ + "]");
            }
        }
    }

private:
    const toml::node* lookup(std::string_view key) {
        if (!table_) {
            return nullptr;
        }
        used_.insert(std::string(key));
        return table_->get(key);
    }

    template <class T>
    T require(std::optional<T> v, std::string_view key, std::string_view what) const {
        if (!v) {
            fail(key, what);
        }
        return *v;
    }

    [[noreturn]] void fail(std::string_view key, std::string_view what) const {
        throw ConfigError("[" + name_ + "] " + std::string(key) + " must be " + std::string(what));
    }

    const toml::table* table_;
    std::string name_;
    std::set<std::string> used_;
};

Section section(const toml::table& root, std::string_view name) {
    const auto* node = root.get(name);
    if (node && !node->is_table()) {
        throw ConfigError("'" + std::string(name) + "' must be a table");
    }
    return {node ? node->as_table() : nullptr, std::string(name)};
}

CorpusSpec read_corpus(Section s, CorpusSpec spec, const std::filesystem::path& base) {
    spec.path = s.path("path", base);
    auto& syn = spec.synthetic;
    s.get("seed", syn.seed);
    s.get("grammar_id", syn.grammar_id);
    s.get("documents", syn.n_documents);
    s.get("min_words", syn.min_words);
    s.get("max_words", syn.max_words);
    s.get("lexicon_size", syn.lexicon_size);
    std::string script(script_name(syn.script));
    s.get("script", script);
    try {
        syn.script = parse_script(script);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    s.get("puzzle_fraction", spec.puzzle_fraction);
    s.get("puzzle_seed", spec.puzzle_seed);
    s.get("puzzle_lines", spec.puzzle_lines);
    s.get("val_documents", spec.val_documents);
    s.finish();
    return spec;
}

nlohmann::ordered_json corpus_json(const CorpusSpec& c) {
    nlohmann::ordered_json j;
    if (c.path) {
        j["path"] = c.path->generic_string();
    } else {
        j["seed"] = c.synthetic.seed;
        j["grammar_id"] = c.synthetic.grammar_id;
        j["documents"] = c.synthetic.n_documents;
        j["min_words"] = c.synthetic.min_words;
        j["max_words"] = c.synthetic.max_words;
        j["script"] = script_name(c.synthetic.script);
        j["lexicon_size"] = c.synthetic.lexicon_size;
    }
    j["puzzle_fraction"] = c.puzzle_fraction;
    j["puzzle_seed"] = c.puzzle_seed;
    j["puzzle_lines"] = c.puzzle_lines;
    j["val_documents"] = c.val_documents;
    return j;
}

void validate_corpus(const CorpusSpec& c, std::string_view role) {
    if (!c.path) {
        try {
            c.synthetic.validate();
        } catch (const Error& e) {
            throw ConfigError("[corpus." + std::string(role) + "] " + e.what());
        }
    }
    if (!(c.puzzle_fraction >= 0.0 && c.puzzle_fraction <= 1.0)) {
        throw ConfigError("[corpus." + std::string(role) + "] puzzle_fraction must lie in [0, 1]");
    }
    if (c.puzzle_fraction > 0.0 && c.puzzle_lines < 2) {
        throw ConfigError("[corpus." + std::string(role) + "] puzzle_lines must be at least 2");
    }
}

template <class Fn>
auto as_config_error(Fn&& fn) {
    try {
        return fn();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
}

} // namespace

std::string_view variant_name(Variant v) noexcept {
    switch (v) {
    case Variant::base: return "base";
    case Variant::cpt_target_only: return "cpt_target_only";
    case Variant::cpt_mix: return "cpt_mix";
    case Variant::cpt_curriculum: return "cpt_curriculum";
    case Variant::cpt_ema: return "cpt_ema";
    case Variant::cpt_lora: return "cpt_lora";
    }
    return "?";
}

Variant parse_variant(std::string_view name) {
    for (auto v : {Variant::base, Variant::cpt_target_only, Variant::cpt_mix, Variant::cpt_curriculum,
                   Variant::cpt_ema, Variant::cpt_lora}) {
        if (variant_name(v) == name) {
            return v;
        }
    }
    throw ConfigError("unknown variant '" + std::string(name) + "'");
}

ExperimentConfig default_experiment_config() {
    ExperimentConfig cfg;
    cfg.target.synthetic = {.seed = 1, .grammar_id = 2, .n_documents = 4000, .script = Script::greek};
    cfg.target.val_documents = 64;
    return cfg;
}

std::int64_t ExperimentConfig::trained_steps() const { return variant == Variant::base ? 0 : train.total_steps; }

void ExperimentConfig::validate() const {
    as_config_error([&] {
        model.validate();
        train.validate();
        mix.validate();
        if (ema) {
            ema->validate();
        }
        return 0;
    });
    if (mix.total_steps != train.total_steps) {
        throw ConfigError("mixer schedule length must equal train.total_steps");
    }
    if (eval_every <= 0 || checkpoint_every <= 0) {
        throw ConfigError("eval_every and checkpoint_every must be positive");
    }
    if (name.empty() || name.find_first_of("/\\\n") != std::string::npos) {
        throw ConfigError("experiment name must be a non-empty single path component");
    }
    const std::string v(variant_name(variant));
    const auto want_mode = [&](MixMode m) {
        if (mix.mode != m) {
            throw ConfigError("variant " + v + " requires mix.mode = " + std::string(mix_mode_name(m)));
        }
    };
    switch (variant) {
    case Variant::base:
    case Variant::cpt_target_only:
    case Variant::cpt_ema:
    case Variant::cpt_lora:
        want_mode(MixMode::none);
        break;
    case Variant::cpt_mix:
        want_mode(MixMode::full);
        break;
    case Variant::cpt_curriculum:
        want_mode(MixMode::curriculum);
        break;
    }
    if ((variant == Variant::cpt_mix || variant == Variant::cpt_curriculum) && mix.aux_fraction <= 0.0) {
        throw ConfigError("variant " + v + " requires mix.aux_fraction > 0");
    }
    if (mix.mode != MixMode::none && !aux) {
        throw ConfigError("mix.mode " + std::string(mix_mode_name(mix.mode)) + " requires [corpus.aux]");
    }
    if ((variant == Variant::cpt_ema) != ema.has_value()) {
        throw ConfigError(variant == Variant::cpt_ema ? "variant cpt_ema requires ema.enabled = true"
                                                      : "ema.enabled = true is only valid for variant cpt_ema");
    }
    if ((variant == Variant::cpt_lora) != lora.has_value()) {
        throw ConfigError(variant == Variant::cpt_lora ? "variant cpt_lora requires lora.enabled = true"
                                                       : "lora.enabled = true is only valid for variant cpt_lora");
    }
    if (lora && lora->rank == 0) {
        throw ConfigError("lora.rank must be positive");
    }
    validate_corpus(target, "target");
    if (aux) {
        validate_corpus(*aux, "aux");
    }
    if (target.val_documents == 0) {
        throw ConfigError("[corpus.target] val_documents must be positive");
    }
    if (eval.copain_shots == 0 || eval.copain_queries == 0) {
        throw ConfigError("eval.copain_shots and eval.copain_queries must be positive");
    }
    if (max_prompt_length(eval.copain_shots) > model.ctx_len - 1) {
        throw ConfigError("eval.copain_shots = " + std::to_string(eval.copain_shots) + " gives prompts of up to " +
                          std::to_string(max_prompt_length(eval.copain_shots)) + " bytes, beyond model.ctx_len - 1");
    }
    if (!eval.mcp_dataset && eval.mcp_items == 0) {
        throw ConfigError("eval.mcp_items must be positive");
    }
    if (eval.val_stride > model.ctx_len) {
        throw ConfigError("eval.val_stride exceeds model.ctx_len");
    }
}

ExperimentConfig parse_experiment_config(std::string_view toml_text, const std::filesystem::path& base_dir) {
    toml::table root;
    try {
        root = toml::parse(toml_text);
    } catch (const toml::parse_error& e) {
        std::ostringstream msg;
        msg << "config parse error at line " << e.source().begin.line << ": " << e.description();
        throw ConfigError(msg.str());
    }
    static const std::set<std::string> kSections = {"experiment", "model", "train", "mix",
                                                    "ema",        "lora",  "corpus", "eval"};
    for (const auto& [k, v] : root) {
        if (!kSections.contains(std::string(k.str()))) {
            throw ConfigError("unknown section [" + std::string(k.str()) + "]");
        }
    }

    ExperimentConfig cfg = default_experiment_config();

    Section ex = section(root, "experiment");
    ex.get("name", cfg.name);
    std::string variant(variant_name(cfg.variant));
    ex.get("variant", variant);
    cfg.variant = parse_variant(variant);
    ex.get("eval_every", cfg.eval_every);
    ex.get("checkpoint_every", cfg.checkpoint_every);
    ex.get("log_provenance", cfg.log_provenance);
    cfg.base_checkpoint = ex.path("base_checkpoint", base_dir);
    if (auto out = ex.path("output_dir", base_dir)) {
        cfg.output_dir = *out;
    } else {
        cfg.output_dir = (base_dir.empty() ? std::filesystem::path("runs") : base_dir / "runs") / cfg.name;
    }
    ex.finish();

    Section m = section(root, "model");
    m.get("vocab_size", cfg.model.vocab_size);
    m.get("d_model", cfg.model.d_model);
    m.get("n_layers", cfg.model.n_layers);
    m.get("n_heads", cfg.model.n_heads);
    m.get("d_ff", cfg.model.d_ff);
    m.get("ctx_len", cfg.model.ctx_len);
    m.get("seed", cfg.model.seed);
    std::string dtype(dtype_name(cfg.model.dtype));
    m.get("dtype", dtype);
    cfg.model.dtype = as_config_error([&] { return parse_dtype(dtype); });
    m.finish();

    Section t = section(root, "train");
    t.get("peak_lr", cfg.train.peak_lr);
    t.get("total_steps", cfg.train.total_steps);
    t.get("warmup_fraction", cfg.train.warmup_fraction);
    t.get("batch_size", cfg.train.batch_size);
    t.get("adam_beta1", cfg.train.adam_beta1);
    t.get("adam_beta2", cfg.train.adam_beta2);
    t.get("adam_eps", cfg.train.adam_eps);
    t.get("weight_decay", cfg.train.weight_decay);
    if (t.has("grad_clip_norm")) {
        double clip = 0.0;
        t.get("grad_clip_norm", clip);
        // 0 disables clipping
        cfg.train.grad_clip_norm = clip > 0.0 ? std::optional<double>(clip) : std::nullopt;
    }
    t.get("seed", cfg.train.seed);
    t.finish();

    Section mx = section(root, "mix");
    std::string mode(mix_mode_name(cfg.mix.mode));
    mx.get("mode", mode);
    cfg.mix.mode = as_config_error([&] { return parse_mix_mode(mode); });
    mx.get("aux_fraction", cfg.mix.aux_fraction);
    mx.get("cutoff_fraction", cfg.mix.cutoff_fraction);
    mx.get("seed", cfg.mix_seed);
    mx.finish();
    cfg.mix.total_steps = cfg.train.total_steps;

    Section e = section(root, "ema");
    bool ema_enabled = false;
    EmaConfig ema;
    e.get("enabled", ema_enabled);
    e.get("alpha", ema.alpha);
    e.get("eta", ema.eta);
    e.finish();
    if (ema_enabled) {
        cfg.ema = ema;
    }

    Section l = section(root, "lora");
    bool lora_enabled = false;
    LoraConfig lora;
    l.get("enabled", lora_enabled);
    l.get("rank", lora.rank);
    l.get("targets", lora.targets);
    l.get("seed", lora.seed);
    l.finish();
    if (lora_enabled) {
        cfg.lora = lora;
    }

    Section corpus = section(root, "corpus");
    if (corpus.present()) {
        const auto* ct = root["corpus"].as_table();
        for (const auto& [k, v] : *ct) {
            if (k.str() != "target" && k.str() != "aux") {
                throw ConfigError("unknown key '" + std::string(k.str()) + "' in [corpus]");
            }
            if (!v.is_table()) {
                throw ConfigError("corpus." + std::string(k.str()) + " must be a table");
            }
        }
        cfg.target = read_corpus(section(*ct, "target"), cfg.target, base_dir);
        if (ct->contains("aux")) {
            CorpusSpec aux;
            aux.synthetic = {.seed = 2, .grammar_id = 1, .n_documents = 4000, .script = Script::latin};
            cfg.aux = read_corpus(Section(section(*ct, "aux")), aux, base_dir);
        }
    }

    Section ev = section(root, "eval");
    cfg.eval.copain_suite = ev.path("copain_suite", base_dir);
    ev.get("copain_seed", cfg.eval.copain_seed);
    ev.get("copain_eval_seed", cfg.eval.copain_eval_seed);
    ev.get("copain_shots", cfg.eval.copain_shots);
    ev.get("copain_queries", cfg.eval.copain_queries);
    cfg.eval.mcp_dataset = ev.path("mcp_dataset", base_dir);
    ev.get("mcp_seed", cfg.eval.mcp_seed);
    ev.get("mcp_items", cfg.eval.mcp_items);
    ev.get("mcp_shots", cfg.eval.mcp.shots);
    ev.get("mcp_demo_seed", cfg.eval.mcp.demo_seed);
    std::string target(score_target_name(cfg.eval.mcp.target));
    ev.get("mcp_score_target", target);
    cfg.eval.mcp.target = as_config_error([&] { return parse_score_target(target); });
    ev.get("val_stride", cfg.eval.val_stride);
    ev.finish();

    cfg.validate();
    return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open config " + path.string());
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return parse_experiment_config(buf.str(), path.parent_path());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

nlohmann::ordered_json to_json(const ExperimentConfig& cfg) {
    nlohmann::ordered_json j;
    j["name"] = cfg.name;
    j["variant"] = variant_name(cfg.variant);
    j["eval_every"] = cfg.eval_every;
    j["checkpoint_every"] = cfg.checkpoint_every;
    j["base_checkpoint"] = cfg.base_checkpoint ? nlohmann::ordered_json(cfg.base_checkpoint->generic_string())
                                               : nlohmann::ordered_json(nullptr);
    const auto& m = cfg.model;
    j["model"] = {{"vocab_size", m.vocab_size}, {"d_model", m.d_model}, {"n_layers", m.n_layers},
                  {"n_heads", m.n_heads},       {"d_ff", m.d_ff},       {"ctx_len", m.ctx_len},
                  {"seed", m.seed},             {"dtype", dtype_name(m.dtype)}};
    const auto& t = cfg.train;
    j["train"] = {{"peak_lr", t.peak_lr},
                  {"total_steps", t.total_steps},
                  {"warmup_fraction", t.warmup_fraction},
                  {"batch_size", t.batch_size},
                  {"adam_beta1", t.adam_beta1},
                  {"adam_beta2", t.adam_beta2},
                  {"adam_eps", t.adam_eps},
                  {"weight_decay", t.weight_decay},
                  {"grad_clip_norm", t.grad_clip_norm.value_or(0.0)},
                  {"seed", t.seed}};
    j["mix"] = {{"mode", mix_mode_name(cfg.mix.mode)},
                {"aux_fraction", cfg.mix.aux_fraction},
                {"cutoff_fraction", cfg.mix.cutoff_fraction},
                {"cutoff_step", cfg.mix.cutoff_step()},
                {"seed", cfg.mix_seed}};
    if (cfg.lora) {
        j["lora"] = {{"rank", cfg.lora->rank}, {"targets", cfg.lora->targets}, {"seed", cfg.lora->seed}};
    }
    j["corpus"]["target"] = corpus_json(cfg.target);
    if (cfg.aux) {
        j["corpus"]["aux"] = corpus_json(*cfg.aux);
    }
    const auto& e = cfg.eval;
    j["eval"] = {{"copain_suite", e.copain_suite ? nlohmann::ordered_json(e.copain_suite->generic_string())
                                                 : nlohmann::ordered_json(nullptr)},
                 {"copain_seed", e.copain_seed},
                 {"copain_eval_seed", e.copain_eval_seed},
                 {"copain_shots", e.copain_shots},
                 {"copain_queries", e.copain_queries},
                 {"mcp_dataset", e.mcp_dataset ? nlohmann::ordered_json(e.mcp_dataset->generic_string())
                                               : nlohmann::ordered_json(nullptr)},
                 {"mcp_seed", e.mcp_seed},
                 {"mcp_items", e.mcp_items},
                 {"mcp_shots", e.mcp.shots},
                 {"mcp_demo_seed", e.mcp.demo_seed},
                 {"mcp_score_target", score_target_name(e.mcp.target)},
                 {"val_stride", e.val_stride}};
    return j;
}

} // namespace cptlab
