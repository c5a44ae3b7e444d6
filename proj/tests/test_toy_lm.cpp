// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>

#include "cptlab/errors.hpp"
#include "cptlab/toy_lm.hpp"
#include "gradcheck.hpp"
#include "test_support.hpp"

using namespace cptlab;
using cptlab::testing::random_batch;
using cptlab::testing::tiny_f64_config;

namespace {

void zero_tensor(ToyLmModel& model, const std::string& name) {
    for (double& v : model.mutable_params().at(name).mutable_data()) {
        v = 0.0;
    }
}

// Five-state deterministic chain 0->2->3->1->4->0 as a one-layer model:
// one-hot token embeddings, attention/MLP outputs zeroed, head maps the
// normalized one-hot of state i to a large logit on next(i).
ToyLmModel chain_model(double head_scale) {
    ModelConfig cfg;
    cfg.vocab_size = 5;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 8;
    cfg.ctx_len = 8;
    cfg.dtype = DType::f64;
    ToyLmModel model = init_model(cfg);
    for (const char* name : {"pos_emb", "blocks.0.attn.wo", "blocks.0.mlp.w2", "head.w"}) {
        zero_tensor(model, name);
    }
    auto emb = model.mutable_params().at("tok_emb").mutable_data();
    std::fill(emb.begin(), emb.end(), 0.0);
    for (std::size_t i = 0; i < 5; ++i) {
        emb[i * 8 + i] = 1.0;
    }
    const std::size_t next[5] = {2, 4, 3, 1, 0};
    auto head = model.mutable_params().at("head.w").mutable_data();
    for (std::size_t i = 0; i < 5; ++i) {
        head[i * 5 + next[i]] = head_scale;
    }
    return model;
}

double row_logsumexp(std::span<const double> row) {
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) {
        s += std::exp(v - mx);
    }
    return mx + std::log(s);
}

} // namespace

TEST_CASE("ModelConfig validation") {
    ModelConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.n_heads = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = ModelConfig{};
    cfg.ctx_len = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = ModelConfig{};
    cfg.d_model = 0;
    CHECK_THROWS_AS((void)init_model(cfg), ConfigError);
}

TEST_CASE("init_model") {
    SUBCASE("default parameter count matches the architecture formula") {
        const ModelConfig c;
        const std::size_t V = c.vocab_size, d = c.d_model, f = c.d_ff, T = c.ctx_len, L = c.n_layers;
        const std::size_t per_block = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        const std::size_t expected = V * d + T * d + L * per_block + 2 * d + d * V + V;
        CHECK(expected == 141312);
        CHECK(init_model(c).params().total_numel() == expected);
    }
    SUBCASE("deterministic and seed-sensitive") {
        ModelConfig c;
        const auto a = init_model(c);
        const auto b = init_model(c);
        CHECK(encode_checkpoint(a.params()) == encode_checkpoint(b.params()));
        c.seed = 1;
        CHECK_FALSE(bit_equal(a.params(), init_model(c).params()));
    }
    SUBCASE("init values") {
        const auto m = init_model(ModelConfig{});
        for (double v : m.params().at("ln_f.bias").data()) {
            CHECK(v == 0.0);
        }
        for (double v : m.params().at("blocks.1.ln2.gain").data()) {
            CHECK(v == 1.0);
        }
        const auto w = m.params().at("blocks.0.mlp.w1").data();
        double sq = 0.0;
        for (double v : w) {
            sq += v * v;
        }
        CHECK(std::sqrt(sq / static_cast<double>(w.size())) == doctest::Approx(0.02).epsilon(0.05));
        CHECK(*m.params().layer_of("tok_emb") == 0);
        CHECK(*m.params().layer_of("blocks.1.attn.wq") == 2);
        CHECK(*m.params().layer_of("head.w") == 3);
    }
    SUBCASE("constructor rejects foreign parameter sets") {
        const ModelConfig c;
        auto ps = init_model(c).params();
        ModelConfig other = c;
        other.d_ff = 128;
        CHECK_THROWS((void)ToyLmModel(other, ps));
    }
}

TEST_CASE("forward_logprobs") {
    const auto model = init_model(ModelConfig{});
    const auto tokens = encode_bytes("the quick brown fox jumps");

    SUBCASE("rows are normalized distributions") {
        const auto lp = model.forward_logprobs(tokens);
        REQUIRE(lp.rows() == tokens.size());
        REQUIRE(lp.cols() == 256);
        for (std::size_t r = 0; r < lp.rows(); ++r) {
            double s = 0.0;
            for (double v : lp.row(r)) {
                s += std::exp(v);
            }
            CHECK(std::abs(s - 1.0) < 1e-5);
        }
    }
    SUBCASE("causal: future tokens do not affect earlier rows") {
        const auto base = model.forward_logprobs(tokens);
        for (std::size_t p : {3u, 10u, 20u}) {
            auto changed = tokens;
            std::reverse(changed.begin() + static_cast<std::ptrdiff_t>(p), changed.end());
            changed.back() = 'Z';
            const auto other = model.forward_logprobs(changed);
            for (std::size_t r = 0; r < p; ++r) {
                for (std::size_t c = 0; c < 256; ++c) {
                    CHECK(other.at(r, c) == doctest::Approx(base.at(r, c)).epsilon(1e-6));
                }
            }
        }
    }
    SUBCASE("zeroed head gives uniform rows") {
        auto m = model;
        zero_tensor(m, "head.w");
        zero_tensor(m, "head.b");
        const auto lp = m.forward_logprobs(tokens);
        for (std::size_t r = 0; r < lp.rows(); ++r) {
            for (double v : lp.row(r)) {
                CHECK(v == doctest::Approx(-std::log(256.0)).epsilon(1e-7));
            }
        }
        const std::vector<TokenBlock> batch{tokens, encode_bytes("lorem ipsum")};
        CHECK(loss_and_grads(m, batch).loss == doctest::Approx(std::log(256.0)).epsilon(1e-7));
    }
    SUBCASE("last_logprobs and snapshot agree with the full forward") {
        const auto lp = model.forward_logprobs(tokens);
        const auto last = model.last_logprobs(tokens);
        const auto snap = model.snapshot();
        const auto lp2 = snap->forward_logprobs(tokens);
        for (std::size_t c = 0; c < 256; ++c) {
            CHECK(last[c] == doctest::Approx(lp.at(tokens.size() - 1, c)).epsilon(1e-6));
            CHECK(lp2.at(3, c) == lp.at(3, c));
        }
        CHECK(std::abs(row_logsumexp(last)) < 1e-5);
    }
    SUBCASE("input errors") {
        std::vector<Token> too_long(129, 1);
        CHECK_THROWS_AS((void)model.forward_logprobs(too_long), LengthError);
        CHECK_THROWS_AS((void)model.forward_logprobs(std::vector<Token>{}), LengthError);
        CHECK_THROWS_AS((void)model.forward_logprobs(std::vector<Token>{1, 256}), VocabError);
    }
}

TEST_CASE("loss_and_grads") {
    auto model = init_model(tiny_f64_config());
    testing::jitter_parameters(model, 3, 0.3);
    const auto batch = random_batch(9, 3, 8, 16);

    SUBCASE("mean invariance under duplication and permutation") {
        const double one = loss_and_grads(model, std::vector<TokenBlock>{batch[0]}).loss;
        const double two = loss_and_grads(model, std::vector<TokenBlock>{batch[0], batch[0]}).loss;
        CHECK(two == doctest::Approx(one).epsilon(1e-12));
        const std::vector<TokenBlock> permuted{batch[2], batch[0], batch[1]};
        CHECK(loss_and_grads(model, permuted).loss == doctest::Approx(loss_and_grads(model, batch).loss).epsilon(1e-12));
    }
    SUBCASE("gradients congruent with parameters") {
        const auto lg = loss_and_grads(model, batch);
        CHECK(congruent(lg.grads, model.params()));
    }
    SUBCASE("finite-difference check, full model") {
        const auto r = testing::gradient_check(model, batch, 100, 77);
        INFO(r.worst);
        CHECK(r.checked == 100);
        CHECK(r.max_rel_error < 1e-4);
    }
    SUBCASE("finite-difference check, adapters") {
        auto m = init_model(tiny_f64_config());
        m.attach_lora(LoraConfig{2, {}, 5});
        testing::jitter_parameters(m, 4, 0.3);
        const auto lg = loss_and_grads(m, batch);
        // frozen base tensors get zero gradient
        for (double v : lg.grads.at("blocks.0.attn.wq").data()) {
            CHECK(v == 0.0);
        }
        const auto r = testing::gradient_check(m, batch, 100, 78);
        INFO(r.worst);
        CHECK(r.max_rel_error < 1e-4);
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS((void)loss_and_grads(model, std::vector<TokenBlock>{}), DomainError);
        CHECK_THROWS_AS((void)loss_and_grads(model, std::vector<TokenBlock>{{1}}), LengthError);
    }
}

TEST_CASE("lr_at") {
    TrainConfig cfg; // 2000 steps, 200 warmup, peak 3e-3
    CHECK(cfg.warmup_steps() == 200);
    CHECK(lr_at(0, cfg) == 0.0);
    CHECK(lr_at(100, cfg) == doctest::Approx(1.5e-3));
    CHECK(lr_at(200, cfg) == doctest::Approx(3e-3));
    CHECK(lr_at(1100, cfg) == doctest::Approx(1.5e-3));
    CHECK(lr_at(2000, cfg) == doctest::Approx(0.0));
    CHECK(std::abs(lr_at(199, cfg) - lr_at(201, cfg)) < 3e-5);
    for (std::int64_t s = 0; s <= cfg.total_steps; ++s) {
        CHECK(lr_at(s, cfg) >= 0.0);
    }
    CHECK_THROWS_AS((void)lr_at(-1, cfg), DomainError);
    CHECK_THROWS_AS((void)lr_at(2001, cfg), DomainError);

    TrainConfig all_warmup;
    all_warmup.total_steps = 10;
    all_warmup.warmup_fraction = 1.0;
    CHECK(lr_at(10, all_warmup) == doctest::Approx(3e-3));
    CHECK(lr_at(5, all_warmup) == doctest::Approx(1.5e-3));

    TrainConfig bad;
    bad.total_steps = 4;
    bad.warmup_fraction = 0.1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("adam_update") {
    auto scalar_set = [](double v) {
        ParameterSet ps;
        ps.add(NamedTensor("w", {1, 1}, DType::f64, {v}), 0);
        return ps;
    };
    SUBCASE("three steps match the hand-run recurrence") {
        auto params = scalar_set(1.0);
        auto m = params.zeros_like();
        auto v = params.zeros_like();
        const auto grads = scalar_set(0.5);
        const AdamHyper hyper{0.9, 0.95, 1e-8, 0.1};
        const double lr = 0.1;
        for (int t = 1; t <= 3; ++t) {
            adam_update(params, m, v, grads, hyper, t, lr, [](const std::string&) { return true; });
        }
        // constant gradient: m_hat = g and v_hat = g^2 at every step
        double theta = 1.0;
        for (int t = 1; t <= 3; ++t) {
            theta = theta * (1.0 - lr * 0.1) - lr * 0.5 / (0.5 + 1e-8);
        }
        CHECK(params.at("w").data()[0] == doctest::Approx(theta).epsilon(1e-12));
        CHECK(theta == doctest::Approx(0.673289).epsilon(1e-5));
        // m_3 = 0.5 * (1 - 0.9^3), v_3 = 0.25 * (1 - 0.95^3)
        CHECK(m.at("w").data()[0] == doctest::Approx(0.5 * 0.271).epsilon(1e-12));
        CHECK(v.at("w").data()[0] == doctest::Approx(0.25 * 0.142625).epsilon(1e-12));
    }
    SUBCASE("zero gradient leaves only weight-decay shrinkage") {
        auto params = init_model(tiny_f64_config()).params();
        const auto before = params;
        auto m = params.zeros_like();
        auto v = params.zeros_like();
        const AdamHyper hyper{0.9, 0.95, 1e-8, 0.1};
        adam_update(params, m, v, params.zeros_like(), hyper, 1, 0.01, [](const std::string&) { return true; });
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& p = params.tensors()[i];
            const auto& b = before.tensors()[i];
            const double factor = p.shape().size() == 2 ? 1.0 - 0.01 * 0.1 : 1.0;
            for (std::size_t j = 0; j < p.numel(); ++j) {
                CHECK(p.data()[j] == doctest::Approx(b.data()[j] * factor).epsilon(1e-14));
            }
        }
    }
}

TEST_CASE("clip_grad_norm") {
    ParameterSet g;
    g.add(NamedTensor("a", {2}, DType::f64, {3.0, 4.0}), 0);
    CHECK(clip_grad_norm(g, 10.0) == 5.0);
    CHECK(g.at("a").data()[0] == 3.0);
    CHECK(clip_grad_norm(g, 1.0) == 5.0);
    CHECK(g.at("a").data()[0] == doctest::Approx(0.6));
    CHECK(g.at("a").data()[1] == doctest::Approx(0.8));
}

TEST_CASE("train_step") {
    TrainConfig tc;
    tc.total_steps = 20;
    tc.peak_lr = 1e-2;
    const auto batch = random_batch(1, 4, 8, 16);

    SUBCASE("deterministic successor, step advances by one") {
        const auto state = make_train_state(init_model(tiny_f64_config()), tc);
        const auto a = train_step(state, tc, batch);
        const auto b = train_step(state, tc, batch);
        CHECK(a.step == 1);
        CHECK(bit_equal(a.model.params(), b.model.params()));
        CHECK(bit_equal(a.adam_m, b.adam_m));
        CHECK(bit_equal(a.adam_v, b.adam_v));
        CHECK(a.rng_state == b.rng_state);
        CHECK_FALSE(bit_equal(a.model.params(), state.model.params()));
    }
    SUBCASE("loss decreases when fitting a fixed batch") {
        auto state = make_train_state(init_model(tiny_f64_config()), tc);
        const double first = train_step_inplace(state, tc, batch);
        double last = first;
        for (int i = 0; i < 15; ++i) {
            last = train_step_inplace(state, tc, batch);
        }
        CHECK(last < first);
        CHECK(state.step == 16);
    }
    SUBCASE("adapters: base tensors bit-identical after training") {
        auto model = init_model(tiny_f64_config());
        model.attach_lora(LoraConfig{2, {}, 1});
        const auto base_before = model.base_parameters();
        auto state = make_train_state(model, tc);
        for (int i = 0; i < 5; ++i) {
            train_step_inplace(state, tc, batch);
        }
        CHECK(bit_equal(state.model.base_parameters(), base_before));
        double moved = 0.0;
        for (const auto& [layer, d] : lora_shift(state.model)) {
            moved += d;
        }
        CHECK(moved > 0.0);
    }
    SUBCASE("non-finite loss raises divergence with the step number") {
        auto model = init_model(tiny_f64_config());
        model.mutable_params().at("head.b").mutable_data()[0] = std::numeric_limits<double>::infinity();
        auto state = make_train_state(model, tc);
        try {
            train_step_inplace(state, tc, batch);
            FAIL("expected DivergenceError");
        } catch (const DivergenceError& e) {
            CHECK(e.step() == 1);
        }
    }
}

TEST_CASE("merge_lora") {
    Rng rng(8);
    auto random_tensor = [&](const std::string& name, Shape shape) {
        std::vector<double> v(shape_numel(shape));
        for (double& x : v) {
            x = rng.normal();
        }
        return NamedTensor(name, std::move(shape), DType::f64, std::move(v));
    };

    SUBCASE("zero B leaves W0") {
        const auto w0 = random_tensor("w", {3, 4});
        const LoraAdapter ad{"w", 0, random_tensor("w.lora_a", {3, 2}), NamedTensor::zeros("w.lora_b", {2, 4}, DType::f64)};
        CHECK(bit_equal(merge_lora(w0, ad), w0));
    }
    SUBCASE("A*B = -W0 gives zero") {
        const auto w0 = random_tensor("w", {2, 3});
        // A = I (2x2), B = -W0
        std::vector<double> neg(w0.data().begin(), w0.data().end());
        for (double& x : neg) {
            x = -x;
        }
        const LoraAdapter ad{"w", 0, NamedTensor("a", {2, 2}, DType::f64, {1, 0, 0, 1}),
                             NamedTensor("b", {2, 3}, DType::f64, neg)};
        const auto merged = merge_lora(w0, ad);
        for (double x : merged.data()) {
            CHECK(x == 0.0);
        }
    }
    SUBCASE("3x2 times 2x4 matches the triple loop") {
        const auto w0 = random_tensor("w", {3, 4});
        const auto a = random_tensor("a", {3, 2});
        const auto b = random_tensor("b", {2, 4});
        const auto w0_copy = w0;
        const auto merged = merge_lora(w0, LoraAdapter{"w", 0, a, b});
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 4; ++j) {
                double s = w0.data()[i * 4 + j];
                for (std::size_t k = 0; k < 2; ++k) {
                    s += a.data()[i * 2 + k] * b.data()[k * 4 + j];
                }
                CHECK(merged.data()[i * 4 + j] == doctest::Approx(s).epsilon(1e-14));
            }
        }
        CHECK(bit_equal(w0, w0_copy));
    }
    SUBCASE("shape mismatch") {
        const auto w0 = random_tensor("w", {3, 4});
        CHECK_THROWS_AS((void)merge_lora(w0, LoraAdapter{"w", 0, random_tensor("a", {4, 2}), random_tensor("b", {2, 4})}),
                        CongruenceError);
    }
}

TEST_CASE("attach_lora") {
    auto model = init_model(tiny_f64_config());
    CHECK_THROWS_AS(model.attach_lora(LoraConfig{9, {}, 0}), ConfigError);
    CHECK_THROWS_AS(model.attach_lora(LoraConfig{2, {"tok_emb"}, 0}), ConfigError);
    CHECK_THROWS_AS(model.attach_lora(LoraConfig{0, {}, 0}), ConfigError);
    model.attach_lora(LoraConfig{});
    CHECK(model.lora_targets().size() == 12);
    CHECK(model.is_trainable("blocks.1.mlp.w2.lora_b"));
    CHECK_FALSE(model.is_trainable("blocks.1.mlp.w2"));
    // adapters survive a checkpoint round trip
    const ToyLmModel restored(model.config(), decode_checkpoint(encode_checkpoint(model.params())));
    CHECK(restored.lora_targets() == model.lora_targets());
}

TEST_CASE("lora_shift") {
    auto model = init_model(tiny_f64_config());
    model.attach_lora(LoraConfig{2, {}, 3});
    SUBCASE("zero B gives zero everywhere") {
        for (const auto& [layer, d] : lora_shift(model)) {
            CHECK(d == 0.0);
        }
    }
    SUBCASE("single adapter equals merge-then-measure") {
        auto m = init_model(tiny_f64_config());
        m.attach_lora(LoraConfig{2, {"blocks.1.attn.wv"}, 3});
        testing::jitter_parameters(m, 12, 0.1);
        const auto ads = m.adapters();
        REQUIRE(ads.size() == 1);
        const auto shift = lora_shift(std::span<const LoraAdapter>(ads));
        const auto w0 = m.params().at("blocks.1.attn.wv");
        ParameterSet merged, base;
        merged.add(merge_lora(w0, ads[0]), 2);
        base.add(w0, 2);
        CHECK(shift.at(2) == doctest::Approx(l2_distance_per_layer(merged, base).at(2)).epsilon(1e-12));
    }
    SUBCASE("multi-adapter random case equals full-merge distance") {
        testing::jitter_parameters(model, 13, 0.1);
        const auto shift = lora_shift(model);
        const auto full = l2_distance_per_layer(model.merged_parameters(), model.base_parameters());
        REQUIRE(shift.size() == full.size());
        for (const auto& [layer, d] : full) {
            CHECK(std::abs(shift.at(layer) - d) <= 1e-6 * std::max(1.0, d));
        }
        CHECK(shift.at(0) == 0.0);
    }
}

TEST_CASE("generate_greedy") {
    const auto model = chain_model(10.0);
    const std::vector<Token> prompt{0};
    SUBCASE("max_new = 0 returns the prompt") {
        CHECK(generate_greedy(model, prompt, 0, {}) == prompt);
    }
    SUBCASE("follows the hand-traced chain") {
        CHECK(generate_greedy(model, prompt, 7, {}) == std::vector<Token>{0, 2, 3, 1, 4, 0, 2, 3});
        // past the 8-token context the window slides
        CHECK(generate_greedy(model, prompt, 11, {}) == std::vector<Token>{0, 2, 3, 1, 4, 0, 2, 3, 1, 4, 0, 2});
    }
    SUBCASE("forced stop emits exactly one token") {
        const auto strong = chain_model(100.0);
        CHECK(std::exp(strong.last_logprobs(std::vector<Token>{3})[1]) > 1.0 - 1e-9);
        CHECK(generate_greedy(strong, std::vector<Token>{3}, 5, {1}) == std::vector<Token>{3, 1});
        CHECK(generate_greedy(model, prompt, 10, {4}) == std::vector<Token>{0, 2, 3, 1, 4});
    }
    SUBCASE("ties go to the lowest id") {
        auto flat = chain_model(0.0);
        zero_tensor(flat, "head.b");
        CHECK(generate_greedy(flat, prompt, 3, {}) == std::vector<Token>{0, 0, 0, 0});
    }
    SUBCASE("prompt must leave room") {
        CHECK_THROWS_AS((void)generate_greedy(model, std::vector<Token>(8, 0), 1, {}), LengthError);
    }
}
