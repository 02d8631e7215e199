#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "km/tensor.hpp"

// Conv/norm/attention building blocks. Every layer registers its tensors under
// a dotted prefix so checkpoints address them by name.

namespace km {

template <class T>
struct ParamRegistry {
    std::vector<std::pair<std::string, Tensor<T>>> params;
    std::vector<std::pair<std::string, Tensor<T>>> buffers;
    std::unordered_set<std::string> names;

    void add_param(const std::string& name, const Tensor<T>& t) {
        KM_REQUIRE(names.insert(name).second, ConfigError, "duplicate registry name ", name);
        params.emplace_back(name, t);
    }
    void add_buffer(const std::string& name, const Tensor<T>& t) {
        KM_REQUIRE(names.insert(name).second, ConfigError, "duplicate registry name ", name);
        buffers.emplace_back(name, t);
    }
    Tensor<T>* find(const std::string& name) {
        for (auto& [n, t] : params)
            if (n == name) return &t;
        for (auto& [n, t] : buffers)
            if (n == name) return &t;
        return nullptr;
    }
};

// he-style fan-in init
template <class T>
Tensor<T> he_init(Shape shape, std::size_t fan_in, Rng& rng) {
    T stddev = std::sqrt(T(2) / T(fan_in));
    return randn<T>(std::move(shape), rng, stddev, true);
}

// batch norm as one fused graph node; running stats live outside the graph
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& run_mean, Tensor<T>& run_var, bool training, bool track_stats, T momentum,
                     T eps) {
    KM_REQUIRE(x.rank() == 4, ShapeError, "batch_norm wants NCHW, got ", shape_str(x.shape()));
    std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    KM_REQUIRE(gamma.numel() == c && beta.numel() == c, ShapeError, "batch_norm affine wants length ", c);
    Tensor<T> out = Tensor<T>::op(x.shape(), {x, gamma, beta});
    auto mean = std::make_shared<std::vector<T>>(c);
    auto var = std::make_shared<std::vector<T>>(c);
    if (training) {
        std::size_t cnt = n * h * w;
        KM_REQUIRE(cnt > 1, ShapeError, "batch_norm training needs more than one value per channel");
        kern::bn_stats(x.data(), mean->data(), var->data(), int(n), int(c), int(h), int(w));
        if (track_stats) {
            T unbias = T(cnt) / T(cnt - 1);
            for (std::size_t ic = 0; ic < c; ++ic) {
                run_mean.values()[ic] = (T(1) - momentum) * run_mean.values()[ic] + momentum * (*mean)[ic];
                run_var.values()[ic] =
                    (T(1) - momentum) * run_var.values()[ic] + momentum * (*var)[ic] * unbias;
            }
        }
    } else {
        *mean = run_mean.values();
        *var = run_var.values();
    }
    kern::bn_fwd(x.data(), mean->data(), var->data(), gamma.data(), beta.data(), out.data(), int(n),
                 int(c), int(h), int(w), eps);
    if (out.requires_grad()) {
        Node<T>* xn = x.node().get();
        Node<T>* gn = gamma.node().get();
        Node<T>* bn = beta.node().get();
        Node<T>* on = out.node().get();
        int ni = int(n), ci = int(c), hi = int(h), wi = int(w);
        out.node()->bwd = [xn, gn, bn, on, mean, var, training, eps, ni, ci, hi, wi] {
            if (on->g.empty()) return;
            std::vector<T> dump_x, dump_g, dump_b;
            T* gx;
            T* gg;
            T* gb;
            if (xn->rg) {
                xn->ensure_grad();
                gx = xn->g.data();
            } else {
                dump_x.assign(xn->v.size(), T(0));
                gx = dump_x.data();
            }
            if (gn->rg) {
                gn->ensure_grad();
                gg = gn->g.data();
            } else {
                dump_g.assign(std::size_t(ci), T(0));
                gg = dump_g.data();
            }
            if (bn->rg) {
                bn->ensure_grad();
                gb = bn->g.data();
            } else {
                dump_b.assign(std::size_t(ci), T(0));
                gb = dump_b.data();
            }
            if (training)
                kern::bn_bwd_train(xn->v.data(), mean->data(), var->data(), gn->v.data(), on->g.data(),
                                   gx, gg, gb, ni, ci, hi, wi, eps);
            else
                kern::bn_bwd_eval(xn->v.data(), mean->data(), var->data(), gn->v.data(), on->g.data(), gx,
                                  gg, gb, ni, ci, hi, wi, eps);
        };
    }
    return out;
}

template <class T>
struct BatchNorm2d {
    Tensor<T> gamma, beta;       // learned
    Tensor<T> run_mean, run_var; // buffers
    T momentum = T(0.1);
    T eps = T(1e-5);
    bool track_stats = true;

    explicit BatchNorm2d(std::size_t c)
        : gamma(Tensor<T>::full({c}, T(1), true)),
          beta(Tensor<T>::zeros({c}, true)),
          run_mean(Tensor<T>::zeros({c})),
          run_var(Tensor<T>::full({c}, T(1))) {}

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        return batch_norm(x, gamma, beta, run_mean, run_var, training, track_stats, momentum, eps);
    }
    void register_into(ParamRegistry<T>& reg, const std::string& p) {
        reg.add_param(p + ".gamma", gamma);
        reg.add_param(p + ".beta", beta);
        reg.add_buffer(p + ".run_mean", run_mean);
        reg.add_buffer(p + ".run_var", run_var);
    }
};

template <class T>
struct LayerNorm {
    Tensor<T> gamma, beta;
    T eps = T(1e-5);

    explicit LayerNorm(std::size_t e)
        : gamma(Tensor<T>::full({e}, T(1), true)), beta(Tensor<T>::zeros({e}, true)) {}

    Tensor<T> forward(const Tensor<T>& x) { return layer_norm(x, gamma, beta, eps); }
    void register_into(ParamRegistry<T>& reg, const std::string& p) {
        reg.add_param(p + ".gamma", gamma);
        reg.add_param(p + ".beta", beta);
    }
};

// weighted bag of fixed activations; the mixture weights are learned and
// unconstrained
template <class T>
struct Boa {
    static constexpr int kinds[5] = {kern::u_relu, kern::u_tanh, kern::u_softplus, kern::u_gelu,
                                     kern::u_silu};
    Tensor<T> alphas;

    Boa() : alphas(Tensor<T>::full({5}, T(0.2), true)) {}

    Tensor<T> forward(const Tensor<T>& x) {
        Tensor<T> out;
        for (std::size_t p = 0; p < 5; ++p) {
            auto term = mul(index_scalar(alphas, p), activation(x, kinds[p]));
            out = p == 0 ? term : add(out, term);
        }
        return out;
    }
    void register_into(ParamRegistry<T>& reg, const std::string& p) { reg.add_param(p + ".alphas", alphas); }
};

// channel mean/max pooled descriptor -> 7x7 conv -> sigmoid gate over space
template <class T>
struct SpatialAttention {
    Tensor<T> w, b;

    explicit SpatialAttention(Rng& rng)
        : w(he_init<T>({1, 2, 7, 7}, 2 * 7 * 7, rng)), b(Tensor<T>::zeros({1}, true)) {}

    Tensor<T> forward(const Tensor<T>& x) {
        auto desc = concat_ch(channel_mean(x), channel_max(x));
        auto map = sigmoid(conv2d(desc, w, b, 1, 3));
        return mul(x, map);
    }
    void register_into(ParamRegistry<T>& reg, const std::string& p) {
        reg.add_param(p + ".w", w);
        reg.add_param(p + ".b", b);
    }
};

enum class Resample { none, down, up };

// two [3x3 conv (no bias, the norm absorbs it) + BN + relu] stages, then an
// optional resample: maxpool on the way down, bilinear on the way up
template <class T>
struct ConvBlock {
    Tensor<T> w1, w2;
    BatchNorm2d<T> bn1, bn2;
    Resample resample;

    ConvBlock(std::size_t ci, std::size_t co, Resample r, Rng& rng)
        : w1(he_init<T>({co, ci, 3, 3}, ci * 9, rng)),
          w2(he_init<T>({co, co, 3, 3}, co * 9, rng)),
          bn1(co),
          bn2(co),
          resample(r) {}

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        auto y = relu(bn1.forward(conv2d(x, w1, 1, 1), training));
        y = relu(bn2.forward(conv2d(y, w2, 1, 1), training));
        if (resample == Resample::down) return maxpool2x2(y);
        if (resample == Resample::up) return upsample2x(y);
        return y;
    }
    void register_into(ParamRegistry<T>& reg, const std::string& p) {
        reg.add_param(p + ".w1", w1);
        bn1.register_into(reg, p + ".bn1");
        reg.add_param(p + ".w2", w2);
        bn2.register_into(reg, p + ".bn2");
    }
};

// depthwise 3x3 + BN + relu, resolution preserving
template <class T>
struct DwConvBlock {
    Tensor<T> w;
    BatchNorm2d<T> bn;

    DwConvBlock(std::size_t c, Rng& rng) : w(he_init<T>({c, 3, 3}, 9, rng)), bn(c) {}

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        return relu(bn.forward(dwconv2d(x, w, 1, 1), training));
    }
    void register_into(ParamRegistry<T>& reg, const std::string& p) {
        reg.add_param(p + ".w", w);
        bn.register_into(reg, p + ".bn");
    }
};

}  // namespace km
