// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Tiny pre-norm decoder-only transformer with learned positional embeddings,
// an untied output head, hand-written backward pass, AdamW training step with
// warmup + cosine schedule, and optional low-rank adapters (W = W0 + A*B).
//
// Parameter layout (x W convention, W is [in, out]):
//   tok_emb [V,d]  pos_emb [ctx,d]                                  layer 0
//   blocks.i.{ln1.gain, ln1.bias, attn.{wq,bq,wk,bk,wv,bv,wo,bo},
//             ln2.gain, ln2.bias, mlp.{w1,b1,w2,b2}}                layer i+1
//   ln_f.gain ln_f.bias head.w [d,V] head.b [V]                     layer L+1
// Adapter factors are stored as "<target>.lora_a" [in,r] and
// "<target>.lora_b" [r,out] in the target's layer.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cptlab/language_model.hpp"
#include "cptlab/tensor_store.hpp"

namespace cptlab {

struct ModelConfig {
    std::size_t vocab_size = 256;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t d_ff = 256;
    std::size_t ctx_len = 128;
    std::uint64_t seed = 0;
    // Storage dtype; f32 models also compute in float.
    DType dtype = DType::f32;

    // Throws ConfigError.
    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LoraConfig {
    std::size_t rank = 4;
    // Empty selects every attention and MLP projection matrix.
    std::vector<std::string> targets;
    std::uint64_t seed = 0;
};

struct LoraAdapter {
    std::string target_name;
    LayerId layer = 0;
    NamedTensor a; // [in, r]
    NamedTensor b; // [r, out]
};

// Default adapter targets for a configuration.
[[nodiscard]] std::vector<std::string> default_lora_targets(const ModelConfig& cfg);

class FrozenLm;

class ToyLmModel : public LanguageModel {
public:
    // Validates names, shapes and layer ids against cfg; restores adapters
    // found in params.
    ToyLmModel(ModelConfig cfg, ParameterSet params);

    [[nodiscard]] const ModelConfig& config() const noexcept { return config_; }
    [[nodiscard]] const ParameterSet& params() const noexcept { return params_; }
    [[nodiscard]] ParameterSet& mutable_params() noexcept { return params_; }

    void attach_lora(const LoraConfig& lora);
    [[nodiscard]] bool has_lora() const noexcept { return !lora_targets_.empty(); }
    [[nodiscard]] const std::vector<std::string>& lora_targets() const noexcept { return lora_targets_; }
    [[nodiscard]] std::vector<LoraAdapter> adapters() const;
    // With adapters attached only the adapter factors are trainable.
    [[nodiscard]] bool is_trainable(std::string_view name) const;
    // Base parameters with every adapter folded in and adapter tensors dropped.
    [[nodiscard]] ParameterSet merged_parameters() const;
    // Base parameters only (adapter tensors dropped, W0 untouched).
    [[nodiscard]] ParameterSet base_parameters() const;

    [[nodiscard]] std::size_t vocab_size() const override { return config_.vocab_size; }
    [[nodiscard]] std::size_t context_length() const override { return config_.ctx_len; }
    [[nodiscard]] LogProbMatrix forward_logprobs(std::span<const Token> tokens) const override;
    [[nodiscard]] std::vector<double> last_logprobs(std::span<const Token> tokens) const override;

    // Immutable compute-ready copy for repeated evaluation.
    [[nodiscard]] std::shared_ptr<const FrozenLm> snapshot() const;

private:
    ModelConfig config_;
    ParameterSet params_;
    std::vector<std::string> lora_targets_;
};

// Weights converted to the compute scalar once; safe for concurrent reads.
class FrozenLm : public LanguageModel {
public:
    ~FrozenLm() override;
    [[nodiscard]] std::size_t vocab_size() const override;
    [[nodiscard]] std::size_t context_length() const override;
    [[nodiscard]] LogProbMatrix forward_logprobs(std::span<const Token> tokens) const override;
    [[nodiscard]] std::vector<double> last_logprobs(std::span<const Token> tokens) const override;

    struct Impl;
    explicit FrozenLm(std::unique_ptr<Impl> impl);

private:
    std::unique_ptr<Impl> impl_;
};

// Deterministic init: N(0, 0.02) for matrices (embeddings and head included),
// ones for layer-norm gains, zeros for every bias and layer-norm offset.
[[nodiscard]] ToyLmModel init_model(const ModelConfig& cfg);

// Recovers dimensions and dtype from tensor shapes; the head count is not
// recorded in a checkpoint and must be supplied. Throws ValidationError.
[[nodiscard]] ModelConfig infer_model_config(const ParameterSet& params, std::size_t n_heads);

struct LossAndGrads {
    double loss = 0.0; // mean next-token cross-entropy, nats
    ParameterSet grads; // congruent with the model parameters
};

// Mean over every predicted position of every block (each block >= 2 tokens).
[[nodiscard]] LossAndGrads loss_and_grads(const ToyLmModel& model, std::span<const TokenBlock> batch);
[[nodiscard]] double batch_loss(const LanguageModel& model, std::span<const TokenBlock> batch);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    double peak_lr = 3e-3;
    std::int64_t total_steps = 2000;
    double warmup_fraction = 0.10;
    std::size_t batch_size = 16;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    std::optional<double> grad_clip_norm = 1.0;
    std::uint64_t seed = 0;

    [[nodiscard]] std::int64_t warmup_steps() const;
    void validate() const;
};

// Linear warmup to peak_lr, then half-cosine decay to 0 at total_steps.
[[nodiscard]] double lr_at(std::int64_t step, const TrainConfig& cfg);

struct TrainState {
    ToyLmModel model;
    ParameterSet adam_m;
    ParameterSet adam_v;
    std::int64_t step = 0;
    std::uint64_t rng_state = 0;
};

[[nodiscard]] TrainState make_train_state(ToyLmModel model, const TrainConfig& cfg);

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// One bias-corrected Adam update with decoupled weight decay (applied to
// rank-2 tensors) at 1-based step t. Tensors for which trainable(name) is
// false are left untouched.
template <class Pred>
void adam_update(ParameterSet& params, ParameterSet& m, ParameterSet& v, const ParameterSet& grads,
                 const AdamHyper& hyper, std::int64_t t, double lr, Pred&& trainable);

// Global-norm clipping in place; returns the pre-clip norm.
double clip_grad_norm(ParameterSet& grads, double max_norm);

// Successor state after one update on batch; the update uses lr_at(step + 1).
// Throws DivergenceError for a non-finite loss or gradient.
[[nodiscard]] TrainState train_step(const TrainState& state, const TrainConfig& cfg,
                                    std::span<const TokenBlock> batch);
// In-place variant; returns the pre-update loss.
double train_step_inplace(TrainState& state, const TrainConfig& cfg, std::span<const TokenBlock> batch);

// ---------------------------------------------------------------------------
// Adapters
// ---------------------------------------------------------------------------

// W0 + A*B as a new tensor; W0 is not modified.
[[nodiscard]] NamedTensor merge_lora(const NamedTensor& w0, const LoraAdapter& adapter);

// Per-layer Frobenius norm of the A*B products of the given adapters.
[[nodiscard]] LayerDistances lora_shift(std::span<const LoraAdapter> adapters);
// Same, reported for every layer of the model (0 where nothing is adapted).
[[nodiscard]] LayerDistances lora_shift(const ToyLmModel& model);

// ---------------------------------------------------------------------------

template <class Pred>
void adam_update(ParameterSet& params, ParameterSet& m, ParameterSet& v, const ParameterSet& grads,
                 const AdamHyper& hyper, std::int64_t t, double lr, Pred&& trainable) {
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        NamedTensor& p = params.tensors()[i];
        if (!trainable(p.name())) {
            continue;
        }
        NamedTensor& mt = m.at(p.name());
        NamedTensor& vt = v.at(p.name());
        const auto g = grads.at(p.name()).data();
        auto pd = p.mutable_data();
        auto md = mt.mutable_data();
        auto vd = vt.mutable_data();
        const bool decay = hyper.weight_decay != 0.0 && p.shape().size() == 2;
        for (std::size_t j = 0; j < pd.size(); ++j) {
            md[j] = hyper.beta1 * md[j] + (1.0 - hyper.beta1) * g[j];
            vd[j] = hyper.beta2 * vd[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            const double mhat = md[j] / bc1;
            const double vhat = vd[j] / bc2;
            if (decay) {
                pd[j] -= lr * hyper.weight_decay * pd[j];
            }
            pd[j] -= lr * mhat / (std::sqrt(vhat) + hyper.eps);
        }
        p.round_to_dtype();
        mt.round_to_dtype();
        vt.round_to_dtype();
    }
}

} // namespace cptlab
