// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0

#include "cptlab/ema.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "cptlab/errors.hpp"

namespace cptlab {

void EmaConfig::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw ConfigError("ema alpha must lie in [0, 1]");
    }
    if (eta < 1) {
        throw ConfigError("ema eta must be >= 1");
    }
}

EmaState ema_init(const ParameterSet& initial) { return {std::make_shared<const ParameterSet>(initial), 0}; }

bool ema_due(const EmaConfig& cfg, std::int64_t t) noexcept { return t > 0 && t % cfg.eta == 0; }

bool ema_apply_inplace(const EmaConfig& cfg, EmaState& state, ParameterSet& current, std::int64_t t) {
    cfg.validate();
    if (!state.anchor) {
        throw ValidationError("EMA state has no anchor");
    }
    if (t <= 0) {
        return false;
    }
    if (t <= state.last_applied_step) {
        throw SequencingError("EMA step " + std::to_string(t) + " does not follow last applied step " +
                              std::to_string(state.last_applied_step));
    }
    require_congruent(*state.anchor, current);
    if (t % cfg.eta != 0) {
        return false;
    }
    const double a = cfg.alpha;
    const double b = 1.0 - cfg.alpha;
    const ParameterSet& anchor = *state.anchor;
    for (std::size_t i = 0; i < current.size(); ++i) {
        NamedTensor& cur = current.tensors()[i];
        const auto anc = anchor.tensors()[i].data();
        auto out = cur.mutable_data();
        for (std::size_t j = 0; j < out.size(); ++j) {
            // identical entries stay bit-identical (frozen tensors)
            if (out[j] != anc[j]) {
                out[j] = a * anc[j] + b * out[j];
            }
        }
        cur.round_to_dtype();
    }
    state.anchor = std::make_shared<const ParameterSet>(current);
    state.last_applied_step = t;
    return true;
}

EmaResult ema_apply(const EmaConfig& cfg, const EmaState& state, const ParameterSet& current, std::int64_t t) {
    EmaResult r{current, state, false};
    r.applied = ema_apply_inplace(cfg, r.state, r.params, t);
    return r;
}

ParameterSet ema_unroll_reference(const ParameterSet& anchor0, std::span<const ParameterSet> history, double alpha) {
    if (history.empty()) {
        throw DomainError("EMA history is empty");
    }
    for (const auto& h : history) {
        require_congruent(anchor0, h);
    }
    const auto n = static_cast<long double>(history.size());
    const long double al = alpha;
    ParameterSet out;
    for (std::size_t i = 0; i < anchor0.size(); ++i) {
        const NamedTensor& t0 = anchor0.tensors()[i];
        std::vector<long double> acc(t0.numel());
        const long double w0 = std::pow(al, n);
        for (std::size_t j = 0; j < acc.size(); ++j) {
            acc[j] = w0 * static_cast<long double>(t0.data()[j]);
        }
        for (std::size_t k = 1; k <= history.size(); ++k) {
            const long double w = (1.0L - al) * std::pow(al, n - static_cast<long double>(k));
            const auto h = history[k - 1].tensors()[i].data();
            for (std::size_t j = 0; j < acc.size(); ++j) {
                acc[j] += w * static_cast<long double>(h[j]);
            }
        }
        std::vector<double> values(acc.begin(), acc.end());
        out.add(NamedTensor(t0.name(), t0.shape(), t0.dtype(), std::move(values)), anchor0.layer_of(t0.name()));
    }
    return out;
}

} // namespace cptlab
