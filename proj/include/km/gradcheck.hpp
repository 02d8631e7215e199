#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <unordered_set>
#include <vector>

#include "km/rng.hpp"
#include "km/tensor.hpp"

// Central finite differences against the analytic backward pass. make_loss
// must rebuild the graph from the given leaves on every call. Returns the
// worst |analytic - fd| / max(1, |analytic|) over the checked coordinates.
// max_coords > 0 checks a random subset per input instead of every entry.

namespace km {

template <class T, class F>
double fd_check(F&& make_loss, std::vector<Tensor<T>> inputs, T eps, std::size_t max_coords = 0,
                Rng* rng = nullptr) {
    for (auto& t : inputs) t.zero_grad();
    {
        Tensor<T> loss = make_loss();
        KM_REQUIRE(loss.numel() == 1, ShapeError, "fd_check wants a scalar loss, got ",
                   shape_str(loss.shape()));
        loss.backward();
    }
    double worst = 0;
    for (auto& t : inputs) {
        if (!t.requires_grad()) continue;
        std::size_t n = t.numel();
        std::vector<std::size_t> coords;
        if (max_coords == 0 || n <= max_coords) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            KM_REQUIRE(rng != nullptr, ConfigError, "fd_check subset mode needs an rng");
            std::unordered_set<std::size_t> picked;
            while (picked.size() < max_coords) picked.insert(rng->index(n));
            coords.assign(picked.begin(), picked.end());
        }
        for (std::size_t j : coords) {
            double an = t.has_grad() ? double(t.grad()[j]) : 0.0;
            T* v = t.data();
            T save = v[j];
            T lp, lm;
            {
                NoGrad ng;
                v[j] = save + eps;
                lp = make_loss().data()[0];
                v[j] = save - eps;
                lm = make_loss().data()[0];
            }
            v[j] = save;
            double fd = (double(lp) - double(lm)) / (2.0 * double(eps));
            double rel = std::abs(fd - an) / std::max(1.0, std::abs(an));
            if (rel > worst) worst = rel;
        }
    }
    return worst;
}

// pushes values off the relu kink so finite differences stay one-sided
template <class T>
void nudge_from_zero(Tensor<T>& t, T margin) {
    for (auto& v : t.values()) {
        if (v >= T(0) && v < margin) v += margin;
        if (v < T(0) && v > -margin) v -= margin;
    }
}

// widens any 2x2 window whose top two values sit closer than margin, so the
// pooling argmax cannot flip under finite-difference probes
template <class T>
void ensure_pool_gap(Tensor<T>& t, T margin) {
    KM_REQUIRE(t.rank() == 4, ShapeError, "ensure_pool_gap wants NCHW");
    std::size_t n = t.dim(0), c = t.dim(1), h = t.dim(2), w = t.dim(3);
    T* v = t.data();
    for (std::size_t p = 0; p < n * c; ++p) {
        T* xp = v + p * h * w;
        for (std::size_t y0 = 0; y0 + 1 < h; y0 += 2)
            for (std::size_t x0 = 0; x0 + 1 < w; x0 += 2) {
                std::size_t idx[4] = {y0 * w + x0, y0 * w + x0 + 1, (y0 + 1) * w + x0,
                                      (y0 + 1) * w + x0 + 1};
                std::size_t best = 0;
                for (std::size_t k = 1; k < 4; ++k)
                    if (xp[idx[k]] > xp[idx[best]]) best = k;
                T second = -std::numeric_limits<T>::infinity();
                for (std::size_t k = 0; k < 4; ++k)
                    if (k != best && xp[idx[k]] > second) second = xp[idx[k]];
                if (xp[idx[best]] - second < margin) xp[idx[best]] = second + margin;
            }
    }
}

}  // namespace km
