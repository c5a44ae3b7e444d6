// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0

#include "cptlab/toy_lm.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <variant>

#include <Eigen/Dense>

#include "cptlab/errors.hpp"
#include "cptlab/rng.hpp"

namespace cptlab {

namespace {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Col = Eigen::Matrix<S, Eigen::Dynamic, 1>;
using ConstMapD = Eigen::Map<const Mat<double>>;

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-5;

enum BlockParam : std::size_t {
    kLn1Gain,
    kLn1Bias,
    kWq,
    kBq,
    kWk,
    kBk,
    kWv,
    kBv,
    kWo,
    kBo,
    kLn2Gain,
    kLn2Bias,
    kW1,
    kB1,
    kW2,
    kB2,
    kBlockParams
};

constexpr std::array<std::string_view, kBlockParams> kBlockSuffix{
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo",  "attn.bo",  "ln2.gain", "ln2.bias", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"};

constexpr std::string_view kLoraA = ".lora_a";
constexpr std::string_view kLoraB = ".lora_b";

enum class InitKind : std::uint8_t { matrix, gain, bias };

struct ParamSpec {
    std::string name;
    Shape shape;
    LayerId layer;
    InitKind kind;
};

// Canonical parameter order; Weights::m uses the same indexing.
std::vector<ParamSpec> param_specs(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    std::vector<ParamSpec> specs;
    specs.push_back({"tok_emb", {c.vocab_size, d}, 0, InitKind::matrix});
    specs.push_back({"pos_emb", {c.ctx_len, d}, 0, InitKind::matrix});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        const auto layer = static_cast<LayerId>(l + 1);
        for (std::size_t k = 0; k < kBlockParams; ++k) {
            ParamSpec s{p + std::string(kBlockSuffix[k]), {}, layer, InitKind::bias};
            switch (k) {
            case kLn1Gain:
            case kLn2Gain:
                s.shape = {d};
                s.kind = InitKind::gain;
                break;
            case kWq:
            case kWk:
            case kWv:
            case kWo:
                s.shape = {d, d};
                s.kind = InitKind::matrix;
                break;
            case kW1:
                s.shape = {d, c.d_ff};
                s.kind = InitKind::matrix;
                break;
            case kW2:
                s.shape = {c.d_ff, d};
                s.kind = InitKind::matrix;
                break;
            case kB1:
                s.shape = {c.d_ff};
                break;
            default:
                s.shape = {d};
                break;
            }
            specs.push_back(std::move(s));
        }
    }
    const auto head_layer = static_cast<LayerId>(c.n_layers + 1);
    specs.push_back({"ln_f.gain", {d}, head_layer, InitKind::gain});
    specs.push_back({"ln_f.bias", {d}, head_layer, InitKind::bias});
    specs.push_back({"head.w", {d, c.vocab_size}, head_layer, InitKind::matrix});
    specs.push_back({"head.b", {c.vocab_size}, head_layer, InitKind::bias});
    return specs;
}

bool is_adapter_name(std::string_view name) { return name.ends_with(kLoraA) || name.ends_with(kLoraB); }

template <class S>
struct Weights {
    std::vector<Mat<S>> m;
    std::size_t n_layers = 0;

    Mat<S>& tok_emb() { return m[0]; }
    Mat<S>& pos_emb() { return m[1]; }
    Mat<S>& blk(std::size_t l, std::size_t p) { return m[2 + l * kBlockParams + p]; }
    Mat<S>& lnf_g() { return m[2 + n_layers * kBlockParams]; }
    Mat<S>& lnf_b() { return m[3 + n_layers * kBlockParams]; }
    Mat<S>& head_w() { return m[4 + n_layers * kBlockParams]; }
    Mat<S>& head_b() { return m[5 + n_layers * kBlockParams]; }
    const Mat<S>& tok_emb() const { return m[0]; }
    const Mat<S>& pos_emb() const { return m[1]; }
    const Mat<S>& blk(std::size_t l, std::size_t p) const { return m[2 + l * kBlockParams + p]; }
    const Mat<S>& lnf_g() const { return m[2 + n_layers * kBlockParams]; }
    const Mat<S>& lnf_b() const { return m[3 + n_layers * kBlockParams]; }
    const Mat<S>& head_w() const { return m[4 + n_layers * kBlockParams]; }
    const Mat<S>& head_b() const { return m[5 + n_layers * kBlockParams]; }

    Weights zeros_like() const {
        Weights z;
        z.n_layers = n_layers;
        z.m.reserve(m.size());
        for (const auto& x : m) {
            z.m.push_back(Mat<S>::Zero(x.rows(), x.cols()));
        }
        return z;
    }
};

template <class S>
struct LoraSlot {
    std::size_t target = 0; // index into Weights::m
    Mat<S> a;
    Mat<S> b;
};

template <class S>
struct Net {
    ModelConfig cfg;
    Weights<S> w; // adapted matrices already hold W0 + A*B
    std::vector<LoraSlot<S>> lora;
};

template <class S>
Mat<S> to_compute(const NamedTensor& t) {
    const auto rows = static_cast<Eigen::Index>(t.shape().size() == 2 ? t.shape()[0] : 1);
    const auto cols = static_cast<Eigen::Index>(t.numel()) / rows;
    return ConstMapD(t.data().data(), rows, cols).cast<S>();
}

template <class S>
Net<S> build_net(const ModelConfig& cfg, const ParameterSet& params, const std::vector<std::string>& lora_targets) {
    Net<S> net;
    net.cfg = cfg;
    net.w.n_layers = cfg.n_layers;
    const auto specs = param_specs(cfg);
    net.w.m.reserve(specs.size());
    for (const auto& s : specs) {
        net.w.m.push_back(to_compute<S>(params.at(s.name)));
    }
    for (const auto& target : lora_targets) {
        const auto it = std::ranges::find(specs, target, &ParamSpec::name);
        LoraSlot<S> slot;
        slot.target = static_cast<std::size_t>(it - specs.begin());
        slot.a = to_compute<S>(params.at(target + std::string(kLoraA)));
        slot.b = to_compute<S>(params.at(target + std::string(kLoraB)));
        net.w.m[slot.target].noalias() += slot.a * slot.b;
        net.lora.push_back(std::move(slot));
    }
    return net;
}

// ----------------------------- kernels -----------------------------

template <class S>
Mat<S> layer_norm(const Mat<S>& x, const Mat<S>& gain, const Mat<S>& bias, Mat<S>* xhat_out, Col<S>* rstd_out) {
    const Eigen::Index rows = x.rows();
    const Eigen::Index d = x.cols();
    Mat<S> xhat(rows, d);
    Col<S> rstd(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const S mean = x.row(r).mean();
        const S var = (x.row(r).array() - mean).square().mean();
        rstd(r) = S{1} / std::sqrt(var + static_cast<S>(kLayerNormEps));
        xhat.row(r) = (x.row(r).array() - mean) * rstd(r);
    }
    Mat<S> y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
    if (xhat_out) {
        *xhat_out = std::move(xhat);
    }
    if (rstd_out) {
        *rstd_out = std::move(rstd);
    }
    return y;
}

template <class S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const Mat<S>& xhat, const Col<S>& rstd, const Mat<S>& gain,
                           Mat<S>& dgain, Mat<S>& dbias) {
    dgain.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
    dbias.row(0) += dy.colwise().sum();
    Mat<S> dxhat = dy.array().rowwise() * gain.row(0).array();
    Mat<S> dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const S mean_d = dxhat.row(r).mean();
        const S mean_dx = (dxhat.row(r).array() * xhat.row(r).array()).mean();
        dx.row(r) = rstd(r) * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx);
    }
    return dx;
}

template <class S>
constexpr S gelu_k() {
    return static_cast<S>(0.7978845608028654); // sqrt(2/pi)
}

template <class S>
S gelu(S u) {
    const S inner = gelu_k<S>() * (u + S(0.044715) * u * u * u);
    return S(0.5) * u * (S(1) + std::tanh(inner));
}

template <class S>
S gelu_grad(S u) {
    const S inner = gelu_k<S>() * (u + S(0.044715) * u * u * u);
    const S th = std::tanh(inner);
    return S(0.5) * (S(1) + th) + S(0.5) * u * (S(1) - th * th) * gelu_k<S>() * (S(1) + S(3 * 0.044715) * u * u);
}

template <class S>
struct LayerCache {
    Mat<S> xhat1, h1, q, k, v, o, xhat2, h2, u, g;
    Col<S> rstd1, rstd2;
    std::vector<Mat<S>> probs; // per head, [T,T] lower-triangular
};

template <class S>
struct Cache {
    std::vector<LayerCache<S>> layers;
    Mat<S> xhatf, hf;
    Col<S> rstdf;
};

// Returns logits for every position, or only for the last one when last_only.
template <class S>
Mat<S> forward(const Net<S>& net, std::span<const Token> tokens, Cache<S>* cache, bool last_only) {
    const auto& w = net.w;
    const auto T = static_cast<Eigen::Index>(tokens.size());
    const auto d = static_cast<Eigen::Index>(net.cfg.d_model);
    const auto n_heads = static_cast<Eigen::Index>(net.cfg.n_heads);
    const Eigen::Index dh = d / n_heads;
    const S scale = S{1} / std::sqrt(static_cast<S>(dh));

    Mat<S> x(T, d);
    for (Eigen::Index t = 0; t < T; ++t) {
        x.row(t) = w.tok_emb().row(tokens[static_cast<std::size_t>(t)]) + w.pos_emb().row(t);
    }
    if (cache) {
        cache->layers.resize(net.cfg.n_layers);
    }

    for (std::size_t l = 0; l < net.cfg.n_layers; ++l) {
        LayerCache<S> local;
        LayerCache<S>& lc = cache ? cache->layers[l] : local;

        lc.h1 = layer_norm<S>(x, w.blk(l, kLn1Gain), w.blk(l, kLn1Bias), &lc.xhat1, &lc.rstd1);
        lc.q = (lc.h1 * w.blk(l, kWq)).rowwise() + w.blk(l, kBq).row(0);
        lc.k = (lc.h1 * w.blk(l, kWk)).rowwise() + w.blk(l, kBk).row(0);
        lc.v = (lc.h1 * w.blk(l, kWv)).rowwise() + w.blk(l, kBv).row(0);
        lc.o.resize(T, d);
        lc.probs.resize(static_cast<std::size_t>(n_heads));
        for (Eigen::Index h = 0; h < n_heads; ++h) {
            Mat<S>& p = lc.probs[static_cast<std::size_t>(h)];
            p.noalias() = lc.q.middleCols(h * dh, dh) * lc.k.middleCols(h * dh, dh).transpose();
            for (Eigen::Index i = 0; i < T; ++i) {
                S mx = -std::numeric_limits<S>::infinity();
                for (Eigen::Index j = 0; j <= i; ++j) {
                    p(i, j) *= scale;
                    mx = std::max(mx, p(i, j));
                }
                S sum{0};
                for (Eigen::Index j = 0; j <= i; ++j) {
                    p(i, j) = std::exp(p(i, j) - mx);
                    sum += p(i, j);
                }
                const S inv = S{1} / sum;
                for (Eigen::Index j = 0; j <= i; ++j) {
                    p(i, j) *= inv;
                }
                for (Eigen::Index j = i + 1; j < T; ++j) {
                    p(i, j) = S{0};
                }
            }
            lc.o.middleCols(h * dh, dh).noalias() = p * lc.v.middleCols(h * dh, dh);
        }
        x.noalias() += lc.o * w.blk(l, kWo);
        x.rowwise() += w.blk(l, kBo).row(0);

        lc.h2 = layer_norm<S>(x, w.blk(l, kLn2Gain), w.blk(l, kLn2Bias), &lc.xhat2, &lc.rstd2);
        lc.u = (lc.h2 * w.blk(l, kW1)).rowwise() + w.blk(l, kB1).row(0);
        lc.g = lc.u.unaryExpr([](S u) { return gelu(u); });
        x.noalias() += lc.g * w.blk(l, kW2);
        x.rowwise() += w.blk(l, kB2).row(0);
    }

    if (last_only) {
        const Mat<S> last = x.bottomRows(1);
        const Mat<S> hf = layer_norm<S>(last, w.lnf_g(), w.lnf_b(), nullptr, nullptr);
        return (hf * w.head_w()).rowwise() + w.head_b().row(0);
    }
    Mat<S> hf = layer_norm<S>(x, w.lnf_g(), w.lnf_b(), cache ? &cache->xhatf : nullptr, cache ? &cache->rstdf : nullptr);
    Mat<S> logits = (hf * w.head_w()).rowwise() + w.head_b().row(0);
    if (cache) {
        cache->hf = std::move(hf);
    }
    return logits;
}

template <class S>
void backward(const Net<S>& net, std::span<const Token> tokens, const Cache<S>& cache, const Mat<S>& dlogits,
              Weights<S>& g) {
    const auto& w = net.w;
    const auto T = static_cast<Eigen::Index>(tokens.size());
    const auto d = static_cast<Eigen::Index>(net.cfg.d_model);
    const auto n_heads = static_cast<Eigen::Index>(net.cfg.n_heads);
    const Eigen::Index dh = d / n_heads;
    const S scale = S{1} / std::sqrt(static_cast<S>(dh));

    g.head_w().noalias() += cache.hf.transpose() * dlogits;
    g.head_b().row(0) += dlogits.colwise().sum();
    Mat<S> dhf = dlogits * w.head_w().transpose();
    Mat<S> dx = layer_norm_backward<S>(dhf, cache.xhatf, cache.rstdf, w.lnf_g(), g.lnf_g(), g.lnf_b());

    for (std::size_t li = net.cfg.n_layers; li-- > 0;) {
        const LayerCache<S>& lc = cache.layers[li];

        // MLP residual branch
        g.blk(li, kW2).noalias() += lc.g.transpose() * dx;
        g.blk(li, kB2).row(0) += dx.colwise().sum();
        Mat<S> du = dx * w.blk(li, kW2).transpose();
        du.array() *= lc.u.unaryExpr([](S u) { return gelu_grad(u); }).array();
        g.blk(li, kW1).noalias() += lc.h2.transpose() * du;
        g.blk(li, kB1).row(0) += du.colwise().sum();
        const Mat<S> dh2 = du * w.blk(li, kW1).transpose();
        dx += layer_norm_backward<S>(dh2, lc.xhat2, lc.rstd2, w.blk(li, kLn2Gain), g.blk(li, kLn2Gain),
                                     g.blk(li, kLn2Bias));

        // attention residual branch
        g.blk(li, kWo).noalias() += lc.o.transpose() * dx;
        g.blk(li, kBo).row(0) += dx.colwise().sum();
        const Mat<S> dout = dx * w.blk(li, kWo).transpose();
        Mat<S> dq(T, d);
        Mat<S> dk(T, d);
        Mat<S> dv(T, d);
        for (Eigen::Index h = 0; h < n_heads; ++h) {
            const Mat<S>& p = lc.probs[static_cast<std::size_t>(h)];
            const auto dout_h = dout.middleCols(h * dh, dh);
            Mat<S> dp = dout_h * lc.v.middleCols(h * dh, dh).transpose();
            dv.middleCols(h * dh, dh).noalias() = p.transpose() * dout_h;
            for (Eigen::Index i = 0; i < T; ++i) {
                S dot{0};
                for (Eigen::Index j = 0; j <= i; ++j) {
                    dot += p(i, j) * dp(i, j);
                }
                for (Eigen::Index j = 0; j <= i; ++j) {
                    dp(i, j) = p(i, j) * (dp(i, j) - dot) * scale;
                }
                for (Eigen::Index j = i + 1; j < T; ++j) {
                    dp(i, j) = S{0};
                }
            }
            dq.middleCols(h * dh, dh).noalias() = dp * lc.k.middleCols(h * dh, dh);
            dk.middleCols(h * dh, dh).noalias() = dp.transpose() * lc.q.middleCols(h * dh, dh);
        }
        g.blk(li, kWq).noalias() += lc.h1.transpose() * dq;
        g.blk(li, kBq).row(0) += dq.colwise().sum();
        g.blk(li, kWk).noalias() += lc.h1.transpose() * dk;
        g.blk(li, kBk).row(0) += dk.colwise().sum();
        g.blk(li, kWv).noalias() += lc.h1.transpose() * dv;
        g.blk(li, kBv).row(0) += dv.colwise().sum();
        Mat<S> dh1 = dq * w.blk(li, kWq).transpose();
        dh1.noalias() += dk * w.blk(li, kWk).transpose();
        dh1.noalias() += dv * w.blk(li, kWv).transpose();
        dx += layer_norm_backward<S>(dh1, lc.xhat1, lc.rstd1, w.blk(li, kLn1Gain), g.blk(li, kLn1Gain),
                                     g.blk(li, kLn1Bias));
    }

    for (Eigen::Index t = 0; t < T; ++t) {
        g.tok_emb().row(tokens[static_cast<std::size_t>(t)]) += dx.row(t);
        g.pos_emb().row(t) += dx.row(t);
    }
}

// Natural-log softmax of one logits row, computed in double.
template <class S>
void log_softmax_row(const Mat<S>& logits, Eigen::Index r, std::span<double> out) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        mx = std::max(mx, static_cast<double>(logits(r, c)));
    }
    double sum = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        sum += std::exp(static_cast<double>(logits(r, c)) - mx);
    }
    const double lse = mx + std::log(sum);
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        out[static_cast<std::size_t>(c)] = static_cast<double>(logits(r, c)) - lse;
    }
}

template <class S>
LogProbMatrix logprobs_of(const Mat<S>& logits) {
    LogProbMatrix out(static_cast<std::size_t>(logits.rows()), static_cast<std::size_t>(logits.cols()));
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        log_softmax_row(logits, r, out.row(static_cast<std::size_t>(r)));
    }
    return out;
}

void check_batch(const LanguageModel& model, std::span<const TokenBlock> batch) {
    if (batch.empty()) {
        throw DomainError("empty batch");
    }
    for (const auto& block : batch) {
        if (block.size() < 2) {
            throw LengthError("training block needs at least 2 tokens");
        }
        check_model_input(model, block);
    }
}

template <class S>
LossAndGrads loss_and_grads_impl(const ToyLmModel& model, std::span<const TokenBlock> batch) {
    const Net<S> net = build_net<S>(model.config(), model.params(), model.lora_targets());
    Weights<S> g = net.w.zeros_like();

    std::size_t predicted = 0;
    for (const auto& block : batch) {
        predicted += block.size() - 1;
    }
    const double inv_n = 1.0 / static_cast<double>(predicted);

    double loss = 0.0;
    Cache<S> cache;
    std::vector<double> row(model.config().vocab_size);
    for (const auto& block : batch) {
        const Mat<S> logits = forward<S>(net, block, &cache, false);
        Mat<S> dlogits = Mat<S>::Zero(logits.rows(), logits.cols());
        for (Eigen::Index t = 0; t + 1 < logits.rows(); ++t) {
            log_softmax_row(logits, t, row);
            const Token target = block[static_cast<std::size_t>(t + 1)];
            loss -= row[target];
            for (Eigen::Index c = 0; c < logits.cols(); ++c) {
                dlogits(t, c) = static_cast<S>(std::exp(row[static_cast<std::size_t>(c)]) * inv_n);
            }
            dlogits(t, target) -= static_cast<S>(inv_n);
        }
        backward<S>(net, block, cache, dlogits, g);
    }

    LossAndGrads out;
    out.loss = loss * inv_n;
    const auto specs = param_specs(model.config());
    const DType dtype = model.config().dtype;
    auto to_tensor = [&](const std::string& name, const Shape& shape, const Mat<S>& m) {
        std::vector<double> data(static_cast<std::size_t>(m.size()));
        Eigen::Map<Mat<double>>(data.data(), m.rows(), m.cols()) = m.template cast<double>();
        return NamedTensor(name, shape, dtype, std::move(data));
    };
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (model.is_trainable(specs[i].name)) {
            out.grads.add(to_tensor(specs[i].name, specs[i].shape, g.m[i]), specs[i].layer);
        } else {
            out.grads.add(NamedTensor::zeros(specs[i].name, specs[i].shape, dtype), specs[i].layer);
        }
    }
    for (std::size_t k = 0; k < net.lora.size(); ++k) {
        const auto& slot = net.lora[k];
        const std::string& target = model.lora_targets()[k];
        const Mat<S>& dw = g.m[slot.target];
        const Mat<S> da = dw * slot.b.transpose();
        const Mat<S> db = slot.a.transpose() * dw;
        const auto layer = specs[slot.target].layer;
        out.grads.add(to_tensor(target + std::string(kLoraA), {static_cast<std::size_t>(da.rows()), static_cast<std::size_t>(da.cols())}, da), layer);
        out.grads.add(to_tensor(target + std::string(kLoraB), {static_cast<std::size_t>(db.rows()), static_cast<std::size_t>(db.cols())}, db), layer);
    }
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0) {
        throw ConfigError("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                          std::to_string(n_heads) + ")");
    }
    if (ctx_len < 2) {
        throw ConfigError("ctx_len must be at least 2");
    }
}

std::vector<std::string> default_lora_targets(const ModelConfig& cfg) {
    std::vector<std::string> out;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (std::size_t k : {kWq, kWk, kWv, kWo, kW1, kW2}) {
            out.push_back("blocks." + std::to_string(l) + "." + std::string(kBlockSuffix[k]));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// ToyLmModel
// ---------------------------------------------------------------------------

ModelConfig infer_model_config(const ParameterSet& params, std::size_t n_heads) {
    auto rank2 = [&](const std::string& name) -> const Shape& {
        if (!params.contains(name) || params.at(name).shape().size() != 2) {
            throw ValidationError("checkpoint lacks a rank-2 '" + name + "' tensor");
        }
        return params.at(name).shape();
    };
    ModelConfig cfg;
    const auto& tok = rank2("tok_emb");
    cfg.vocab_size = tok[0];
    cfg.d_model = tok[1];
    cfg.ctx_len = rank2("pos_emb")[0];
    cfg.dtype = params.at("tok_emb").dtype();
    cfg.n_layers = 0;
    while (params.contains("blocks." + std::to_string(cfg.n_layers) + ".ln1.gain")) {
        ++cfg.n_layers;
    }
    if (cfg.n_layers == 0) {
        throw ValidationError("checkpoint has no transformer blocks");
    }
    cfg.d_ff = rank2("blocks.0.mlp.w1")[1];
    cfg.n_heads = n_heads;
    cfg.validate();
    return cfg;
}

ToyLmModel::ToyLmModel(ModelConfig cfg, ParameterSet params) : config_(std::move(cfg)), params_(std::move(params)) {
    config_.validate();
    const auto specs = param_specs(config_);
    for (const auto& s : specs) {
        if (!params_.contains(s.name)) {
            throw ValidationError("model parameter '" + s.name + "' missing");
        }
        const auto& t = params_.at(s.name);
        if (t.shape() != s.shape) {
            throw ValidationError("model parameter '" + s.name + "' has shape " + shape_string(t.shape()) +
                                  ", expected " + shape_string(s.shape));
        }
        if (t.dtype() != config_.dtype) {
            throw ValidationError("model parameter '" + s.name + "' has dtype " + std::string(dtype_name(t.dtype())));
        }
        if (params_.layer_of(s.name) != s.layer) {
            throw ValidationError("model parameter '" + s.name + "' has wrong layer assignment");
        }
    }
    for (const auto& t : params_.tensors()) {
        if (std::ranges::find(specs, t.name(), &ParamSpec::name) != specs.end()) {
            continue;
        }
        if (!t.name().ends_with(kLoraA)) {
            if (t.name().ends_with(kLoraB)) {
                continue;
            }
            throw ValidationError("unexpected tensor '" + t.name() + "' in model parameters");
        }
        const std::string target = t.name().substr(0, t.name().size() - kLoraA.size());
        const auto spec = std::ranges::find(specs, target, &ParamSpec::name);
        const std::string b_name = target + std::string(kLoraB);
        if (spec == specs.end() || spec->kind != InitKind::matrix || !params_.contains(b_name)) {
            throw ValidationError("adapter '" + t.name() + "' has no valid target or partner factor");
        }
        const auto& b = params_.at(b_name);
        if (t.shape().size() != 2 || b.shape().size() != 2 || t.shape()[0] != spec->shape[0] ||
            b.shape()[1] != spec->shape[1] || t.shape()[1] != b.shape()[0]) {
            throw ValidationError("adapter factors for '" + target + "' do not conform to the target");
        }
        lora_targets_.push_back(target);
    }
    for (const auto& t : params_.tensors()) {
        if (t.name().ends_with(kLoraB)) {
            const std::string target = t.name().substr(0, t.name().size() - kLoraB.size());
            if (std::ranges::find(lora_targets_, target) == lora_targets_.end()) {
                throw ValidationError("adapter '" + t.name() + "' has no partner factor");
            }
        }
    }
}

ToyLmModel init_model(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    ParameterSet params;
    for (const auto& s : param_specs(cfg)) {
        std::vector<double> data(shape_numel(s.shape));
        switch (s.kind) {
        case InitKind::matrix:
            for (double& v : data) {
                v = kInitStd * rng.normal();
            }
            break;
        case InitKind::gain:
            std::ranges::fill(data, 1.0);
            break;
        case InitKind::bias:
            break;
        }
        params.add(NamedTensor(s.name, s.shape, cfg.dtype, std::move(data)), s.layer);
    }
    return {cfg, std::move(params)};
}

void ToyLmModel::attach_lora(const LoraConfig& lora) {
    if (has_lora()) {
        throw ConfigError("adapters are already attached");
    }
    if (lora.rank == 0) {
        throw ConfigError("adapter rank must be positive");
    }
    const auto targets = lora.targets.empty() ? default_lora_targets(config_) : lora.targets;
    const auto specs = param_specs(config_);
    Rng rng(hash_key(lora.seed, 0x4c6f5241ULL));
    for (const auto& target : targets) {
        const auto spec = std::ranges::find(specs, target, &ParamSpec::name);
        if (spec == specs.end() || spec->kind != InitKind::matrix || spec->layer == 0 ||
            spec->layer == static_cast<LayerId>(config_.n_layers + 1)) {
            throw ConfigError("'" + target + "' is not an adaptable projection matrix");
        }
        const std::size_t in = spec->shape[0];
        const std::size_t out = spec->shape[1];
        if (lora.rank > std::min(in, out)) {
            throw ConfigError("adapter rank " + std::to_string(lora.rank) + " exceeds min dimension of '" + target + "'");
        }
        // A starts random, B at zero, so W0 + A*B == W0 at attach time.
        std::vector<double> a(in * lora.rank);
        const double std_a = 1.0 / std::sqrt(static_cast<double>(in));
        for (double& v : a) {
            v = std_a * rng.normal();
        }
        params_.add(NamedTensor(target + std::string(kLoraA), {in, lora.rank}, config_.dtype, std::move(a)), spec->layer);
        params_.add(NamedTensor::zeros(target + std::string(kLoraB), {lora.rank, out}, config_.dtype), spec->layer);
        lora_targets_.push_back(target);
    }
}

std::vector<LoraAdapter> ToyLmModel::adapters() const {
    std::vector<LoraAdapter> out;
    for (const auto& target : lora_targets_) {
        out.push_back({target, *params_.layer_of(target), params_.at(target + std::string(kLoraA)),
                       params_.at(target + std::string(kLoraB))});
    }
    return out;
}

bool ToyLmModel::is_trainable(std::string_view name) const { return !has_lora() || is_adapter_name(name); }

ParameterSet ToyLmModel::base_parameters() const {
    ParameterSet out;
    for (const auto& t : params_.tensors()) {
        if (!is_adapter_name(t.name())) {
            out.add(t, params_.layer_of(t.name()));
        }
    }
    return out;
}

ParameterSet ToyLmModel::merged_parameters() const {
    ParameterSet out = base_parameters();
    for (const auto& adapter : adapters()) {
        out.at(adapter.target_name) = merge_lora(out.at(adapter.target_name), adapter);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

struct FrozenLm::Impl {
    std::variant<Net<float>, Net<double>> net;
};

FrozenLm::FrozenLm(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
FrozenLm::~FrozenLm() = default;

std::size_t FrozenLm::vocab_size() const {
    return std::visit([](const auto& n) { return n.cfg.vocab_size; }, impl_->net);
}

std::size_t FrozenLm::context_length() const {
    return std::visit([](const auto& n) { return n.cfg.ctx_len; }, impl_->net);
}

LogProbMatrix FrozenLm::forward_logprobs(std::span<const Token> tokens) const {
    check_model_input(*this, tokens);
    return std::visit(
        [&](const auto& n) {
            using S = typename std::decay_t<decltype(n.w.m.front())>::Scalar;
            return logprobs_of<S>(forward<S>(n, tokens, nullptr, false));
        },
        impl_->net);
}

std::vector<double> FrozenLm::last_logprobs(std::span<const Token> tokens) const {
    check_model_input(*this, tokens);
    return std::visit(
        [&](const auto& n) {
            using S = typename std::decay_t<decltype(n.w.m.front())>::Scalar;
            const Mat<S> logits = forward<S>(n, tokens, nullptr, true);
            std::vector<double> out(static_cast<std::size_t>(logits.cols()));
            log_softmax_row<S>(logits, 0, out);
            return out;
        },
        impl_->net);
}

std::shared_ptr<const FrozenLm> ToyLmModel::snapshot() const {
    auto impl = std::make_unique<FrozenLm::Impl>();
    if (config_.dtype == DType::f32) {
        impl->net = build_net<float>(config_, params_, lora_targets_);
    } else {
        impl->net = build_net<double>(config_, params_, lora_targets_);
    }
    return std::make_shared<const FrozenLm>(std::move(impl));
}

LogProbMatrix ToyLmModel::forward_logprobs(std::span<const Token> tokens) const {
    return snapshot()->forward_logprobs(tokens);
}

std::vector<double> ToyLmModel::last_logprobs(std::span<const Token> tokens) const {
    return snapshot()->last_logprobs(tokens);
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

LossAndGrads loss_and_grads(const ToyLmModel& model, std::span<const TokenBlock> batch) {
    check_batch(model, batch);
    if (model.config().dtype == DType::f32) {
        return loss_and_grads_impl<float>(model, batch);
    }
    return loss_and_grads_impl<double>(model, batch);
}

double batch_loss(const LanguageModel& model, std::span<const TokenBlock> batch) {
    check_batch(model, batch);
    double loss = 0.0;
    std::size_t predicted = 0;
    for (const auto& block : batch) {
        const auto logp = model.forward_logprobs(block);
        for (std::size_t t = 0; t + 1 < block.size(); ++t) {
            loss -= logp.at(t, block[t + 1]);
        }
        predicted += block.size() - 1;
    }
    return loss / static_cast<double>(predicted);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

std::int64_t TrainConfig::warmup_steps() const {
    return static_cast<std::int64_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)));
}

void TrainConfig::validate() const {
    if (!(peak_lr > 0.0)) {
        throw ConfigError("peak_lr must be positive");
    }
    if (total_steps <= 0) {
        throw ConfigError("total_steps must be positive");
    }
    if (!(warmup_fraction > 0.0 && warmup_fraction <= 1.0)) {
        throw ConfigError("warmup_fraction must lie in (0, 1]");
    }
    if (warmup_steps() < 1) {
        throw ConfigError("warmup_fraction * total_steps rounds to zero warmup steps");
    }
    if (batch_size == 0) {
        throw ConfigError("batch_size must be positive");
    }
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0)) {
        throw ConfigError("invalid Adam hyperparameters");
    }
    if (weight_decay < 0.0) {
        throw ConfigError("weight_decay must be non-negative");
    }
    if (grad_clip_norm && !(*grad_clip_norm > 0.0)) {
        throw ConfigError("grad_clip_norm must be positive when set");
    }
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.total_steps) {
        throw DomainError("step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.total_steps) + "]");
    }
    const std::int64_t warmup = cfg.warmup_steps();
    if (step < warmup) {
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    if (cfg.total_steps == warmup) {
        return cfg.peak_lr;
    }
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(cfg.total_steps - warmup);
    return std::max(0.0, cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

TrainState make_train_state(ToyLmModel model, const TrainConfig& cfg) {
    cfg.validate();
    TrainState state{std::move(model), {}, {}, 0, cfg.seed};
    state.adam_m = state.model.params().zeros_like();
    state.adam_v = state.model.params().zeros_like();
    return state;
}

double clip_grad_norm(ParameterSet& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& t : grads.tensors()) {
        for (double v : t.data()) {
            sq += v * v;
        }
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& t : grads.tensors()) {
            for (double& v : t.mutable_data()) {
                v *= scale;
            }
            t.round_to_dtype();
        }
    }
    return norm;
}

double train_step_inplace(TrainState& state, const TrainConfig& cfg, std::span<const TokenBlock> batch) {
    const std::int64_t t = state.step + 1;
    const double lr = lr_at(t, cfg);
    auto [loss, grads] = loss_and_grads(state.model, batch);
    if (!std::isfinite(loss)) {
        throw DivergenceError(t, "non-finite loss");
    }
    for (const auto& g : grads.tensors()) {
        if (!g.all_finite()) {
            throw DivergenceError(t, "non-finite gradient in '" + g.name() + "'");
        }
    }
    if (cfg.grad_clip_norm) {
        clip_grad_norm(grads, *cfg.grad_clip_norm);
    }
    const AdamHyper hyper{cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay};
    const ToyLmModel& model = state.model;
    adam_update(state.model.mutable_params(), state.adam_m, state.adam_v, grads, hyper, t, lr,
                [&model](const std::string& name) { return model.is_trainable(name); });
    for (const auto& p : state.model.params().tensors()) {
        if (!p.all_finite()) {
            throw DivergenceError(t, "non-finite parameter '" + p.name() + "' after update");
        }
    }
    state.step = t;
    state.rng_state = splitmix64(state.rng_state);
    return loss;
}

TrainState train_step(const TrainState& state, const TrainConfig& cfg, std::span<const TokenBlock> batch) {
    TrainState next = state;
    train_step_inplace(next, cfg, batch);
    return next;
}

// ---------------------------------------------------------------------------
// Adapters
// ---------------------------------------------------------------------------

NamedTensor merge_lora(const NamedTensor& w0, const LoraAdapter& adapter) {
    const auto& a = adapter.a;
    const auto& b = adapter.b;
    if (w0.shape().size() != 2 || a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[0] != w0.shape()[0] ||
        b.shape()[1] != w0.shape()[1] || a.shape()[1] != b.shape()[0]) {
        throw CongruenceError("adapter for '" + adapter.target_name + "' does not conform: W0 " +
                              shape_string(w0.shape()) + ", A " + shape_string(a.shape()) + ", B " +
                              shape_string(b.shape()));
    }
    Mat<double> merged = ConstMapD(w0.data().data(), static_cast<Eigen::Index>(w0.rows()), static_cast<Eigen::Index>(w0.cols()));
    merged.noalias() += ConstMapD(a.data().data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols())) *
                        ConstMapD(b.data().data(), static_cast<Eigen::Index>(b.rows()), static_cast<Eigen::Index>(b.cols()));
    return {w0.name(), w0.shape(), w0.dtype(), std::vector<double>(merged.data(), merged.data() + merged.size())};
}

LayerDistances lora_shift(std::span<const LoraAdapter> adapters) {
    std::map<LayerId, double> squared;
    for (const auto& adapter : adapters) {
        const auto& a = adapter.a;
        const auto& b = adapter.b;
        if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
            throw CongruenceError("adapter for '" + adapter.target_name + "' has non-conforming factors");
        }
        const Mat<double> ab =
            ConstMapD(a.data().data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols())) *
            ConstMapD(b.data().data(), static_cast<Eigen::Index>(b.rows()), static_cast<Eigen::Index>(b.cols()));
        squared[adapter.layer] += ab.squaredNorm();
    }
    LayerDistances out;
    for (const auto& [layer, s] : squared) {
        out[layer] = std::sqrt(s);
    }
    return out;
}

LayerDistances lora_shift(const ToyLmModel& model) {
    LayerDistances out;
    for (LayerId l = 0; l <= static_cast<LayerId>(model.config().n_layers + 1); ++l) {
        out[l] = 0.0;
    }
    const auto adapters = model.adapters();
    for (const auto& [layer, d] : lora_shift(std::span<const LoraAdapter>(adapters))) {
        out[layer] = d;
    }
    return out;
}

} // namespace cptlab
