#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "km/tensor.hpp"

// segmentation losses and thresholded evaluation metrics

namespace km {

struct LossConfig {
    double bce_weight = 0.5;
    double dice_weight = 0.5;
    double dice_smooth = 1e-5;  // keeps dice finite on empty masks
    double prob_clip = 1e-7;

    void validate() const {
        KM_REQUIRE(bce_weight >= 0 && dice_weight >= 0, ConfigError, "loss weights must be >= 0");
        KM_REQUIRE(bce_weight > 0 || dice_weight > 0, ConfigError, "both loss weights are zero");
        KM_REQUIRE(dice_smooth > 0, ConfigError, "dice smoothing constant must be > 0");
        KM_REQUIRE(prob_clip > 0 && prob_clip < 0.5, ConfigError, "probability clip out of range");
    }
};

// mean over pixels of -[z log p + (1-z) log(1-p)] with p = sigmoid(l) clipped
// to [eps, 1-eps]. One fused node; the clipped tails contribute a constant, so
// their gradient is exactly zero. Inside the clip the term is evaluated as
// z softplus(-l) + (1-z) softplus(l), which is the same value without the
// roundoff of forming p first.
template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& z, T eps = T(1e-7)) {
    KM_REQUIRE(logits.shape() == z.shape(), ShapeError, "bce wants matching shapes, got ",
               shape_str(logits.shape()), " vs ", shape_str(z.shape()));
    KM_REQUIRE(eps > 0 && eps < T(0.5), ConfigError, "bce clip out of range");
    std::size_t n = logits.numel();
    Tensor<T> out = Tensor<T>::op({1}, {logits, z});
    const T log_eps = std::log(eps);
    const T log_1m = std::log1p(-eps);
    auto softplus1 = [](T v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); };
    auto sig = [](T v) { return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); };
    T total = 0;
    const T* lv = logits.data();
    const T* zv = z.data();
    for (std::size_t i = 0; i < n; ++i) {
        T p = sig(lv[i]);
        if (p < eps)
            total += -(zv[i] * log_eps + (T(1) - zv[i]) * log_1m);
        else if (p > T(1) - eps)
            total += -(zv[i] * log_1m + (T(1) - zv[i]) * log_eps);
        else
            total += zv[i] * softplus1(-lv[i]) + (T(1) - zv[i]) * softplus1(lv[i]);
    }
    out.data()[0] = total / T(n);
    if (out.requires_grad()) {
        Node<T>* ln = logits.node().get();
        Node<T>* on = out.node().get();
        out.node()->bwd = [ln, on, n, eps, sig] {
            if (on->g.empty()) return;
            if (!ln->rg) return;  // the mask is a label, never a variable
            ln->ensure_grad();
            T gy = on->g[0] / T(n);
            const T* lv = ln->v.data();
            const T* zv = on->parents[1]->v.data();
            for (std::size_t i = 0; i < n; ++i) {
                T p = sig(lv[i]);
                if (p >= eps && p <= T(1) - eps) ln->g[i] += gy * (p - zv[i]);
            }
        };
    }
    return out;
}

// 1 - (2 sum(p z) + c) / (sum p + sum z + c), one global sum over the batch
template <class T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& z, T c = T(1e-5)) {
    KM_REQUIRE(probs.shape() == z.shape(), ShapeError, "dice wants matching shapes, got ",
               shape_str(probs.shape()), " vs ", shape_str(z.shape()));
    KM_REQUIRE(c > 0, ConfigError, "dice smoothing constant must be > 0");
    auto num = sadd(smul(sum_all(mul(probs, z)), T(2)), c);
    auto den = sadd(add(sum_all(probs), sum_all(z)), c);
    return sadd(neg(div(num, den)), T(1));
}

template <class T>
Tensor<T> combined_loss(const LossConfig& cfg, const Tensor<T>& logits, const Tensor<T>& z) {
    cfg.validate();
    T bw = T(cfg.bce_weight), dw = T(cfg.dice_weight);
    if (dw == 0) {
        auto b = bce_with_logits(logits, z, T(cfg.prob_clip));
        return bw == 1 ? b : smul(b, bw);
    }
    auto d = dice_loss(sigmoid(logits), z, T(cfg.dice_smooth));
    if (bw == 0) return dw == 1 ? d : smul(d, dw);
    return add(smul(bce_with_logits(logits, z, T(cfg.prob_clip)), bw), smul(d, dw));
}

struct MetricReport {
    double iou = 0, f1 = 0, accuracy = 0, auc = 0, precision = 0, recall = 0;
};

// thresholded confusion metrics, computed per image and averaged. Empty-mask
// conventions: IoU and F1 of two empty masks are 1, precision with no
// predicted positives is 0, recall with an empty truth is 1. AUC is the
// trapezoidal ROC area over the 256 thresholds i/255 (prediction counted
// positive at p >= threshold); a truth with only one class scores 0.5.
template <class T>
MetricReport metrics(const Tensor<T>& probs, const Tensor<T>& z, double threshold = 0.5) {
    KM_REQUIRE(probs.shape() == z.shape(), ShapeError, "metrics want matching shapes, got ",
               shape_str(probs.shape()), " vs ", shape_str(z.shape()));
    KM_REQUIRE(probs.rank() >= 1 && probs.dim(0) > 0, ShapeError, "metrics want a leading image axis");
    std::size_t n = probs.dim(0), per = probs.numel() / n;
    KM_REQUIRE(per > 0, ShapeError, "metrics want at least one pixel per image");
    MetricReport rep;
    const T* pv = probs.data();
    const T* zv = z.data();
    for (std::size_t im = 0; im < n; ++im) {
        const T* p = pv + im * per;
        const T* t = zv + im * per;
        double tp = 0, fp = 0, fn = 0, tn = 0;
        std::array<double, 256> hp{}, hn{};
        for (std::size_t i = 0; i < per; ++i) {
            bool pred = double(p[i]) >= threshold;
            bool truth = double(t[i]) >= 0.5;
            tp += pred && truth;
            fp += pred && !truth;
            fn += !pred && truth;
            tn += !pred && !truth;
            int k = std::clamp(int(double(p[i]) * 255.0), 0, 255);
            (truth ? hp : hn)[std::size_t(k)] += 1;
        }
        rep.iou += tp + fp + fn > 0 ? tp / (tp + fp + fn) : 1;
        rep.f1 += 2 * tp + fp + fn > 0 ? 2 * tp / (2 * tp + fp + fn) : 1;
        rep.accuracy += (tp + tn) / double(per);
        rep.precision += tp + fp > 0 ? tp / (tp + fp) : 0;
        rep.recall += tp + fn > 0 ? tp / (tp + fn) : 1;
        double pos = tp + fn, neg = fp + tn;
        if (pos == 0 || neg == 0) {
            rep.auc += 0.5;
        } else {
            // p >= i/255 holds exactly for i <= floor(255 p); suffix sums give
            // the confusion counts at every threshold at once
            double cum_p = 0, cum_n = 0, auc = 0, px = 0, py = 0;
            for (int i = 255; i >= 0; --i) {
                cum_p += hp[std::size_t(i)];
                cum_n += hn[std::size_t(i)];
                double x = cum_n / neg, y = cum_p / pos;
                auc += (x - px) * (y + py) / 2;
                px = x;
                py = y;
            }
            rep.auc += auc;
        }
    }
    rep.iou /= double(n);
    rep.f1 /= double(n);
    rep.accuracy /= double(n);
    rep.auc /= double(n);
    rep.precision /= double(n);
    rep.recall /= double(n);
    return rep;
}

}  // namespace km
