// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0
//
// In-place exponential moving average of model parameters:
//   theta_t = alpha * theta_{t-eta} + (1 - alpha) * theta'_t   when t % eta == 0
//   theta_t = theta'_t                                         otherwise
// where theta'_t is the freshly updated parameter set and theta_{t-eta} the
// anchor left by the previous application (the initial parameters at t = 0).

#pragma once

#include <cstdint>
#include <memory>
#include <span>

#include "cptlab/tensor_store.hpp"

namespace cptlab {

struct EmaConfig {
    double alpha = 0.92;
    std::int64_t eta = 1;

    void validate() const;
};

struct EmaState {
    // Shared so readers can hold a consistent snapshot across updates.
    std::shared_ptr<const ParameterSet> anchor;
    std::int64_t last_applied_step = 0;
};

[[nodiscard]] EmaState ema_init(const ParameterSet& initial);

// True when step t is an application step.
[[nodiscard]] bool ema_due(const EmaConfig& cfg, std::int64_t t) noexcept;

struct EmaResult {
    ParameterSet params;
    EmaState state;
    bool applied = false;
};

// Throws CongruenceError, SequencingError (t <= last applied step).
[[nodiscard]] EmaResult ema_apply(const EmaConfig& cfg, const EmaState& state, const ParameterSet& current,
                                  std::int64_t t);
// Averages `current` in place; returns whether this step applied.
bool ema_apply_inplace(const EmaConfig& cfg, EmaState& state, ParameterSet& current, std::int64_t t);

// Closed form after n applications:
//   alpha^n * anchor0 + sum_k (1 - alpha) * alpha^(n-k) * history[k-1],  k = 1..n
// Reference only; evaluated with long double accumulation.
[[nodiscard]] ParameterSet ema_unroll_reference(const ParameterSet& anchor0, std::span<const ParameterSet> history,
                                                double alpha);

} // namespace cptlab
