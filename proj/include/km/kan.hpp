#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "km/nn_layers.hpp"
#include "km/tensor.hpp"

// Spline-parametrized layers. Each input/output pair carries a learned 1-d
// function: a fixed base activation plus a B-spline expansion on a uniform
// grid. Inputs outside [lo,hi] are evaluated on the extended knot span with
// no clamping; beyond the extension the basis is zero and only the base path
// remains.

namespace km {

template <class T>
struct SplineGrid {
    int degree;
    int grid;
    T lo, hi;
    std::vector<T> knots;  // grid + 2*degree + 1, uniform with degree-fold extension

    SplineGrid(int degree_, int grid_, T lo_, T hi_) : degree(degree_), grid(grid_), lo(lo_), hi(hi_) {
        KM_REQUIRE(degree >= 0 && degree <= 8, ConfigError, "spline degree ", degree, " out of range");
        KM_REQUIRE(grid >= 1, ConfigError, "spline grid must be positive, got ", grid);
        KM_REQUIRE(hi > lo, ConfigError, "spline domain [", lo, ",", hi, "] is empty");
        int nk = grid + 2 * degree + 1;
        KM_REQUIRE(nk <= 64, ConfigError, "spline knot count ", nk, " exceeds kernel limit");
        T h = (hi - lo) / T(grid);
        knots.resize(nk);
        for (int i = 0; i < nk; ++i) knots[i] = lo + T(i - degree) * h;
    }

    int nbasis() const { return grid + degree; }

    void eval(const T* x, std::size_t count, T* bas, T* dbas) const {
        kern::spline_basis(knots.data(), int(knots.size()), degree, x, count, bas, dbas);
    }
};

namespace detail {

// elementwise f'(x) through the backward kernel with a unit upstream grad
template <class T>
void unary_deriv(int kind, const T* x, const T* y, T* d, std::size_t n) {
    std::fill(d, d + n, T(0));
    std::vector<T> ones(n, T(1));
    kern::unary_bwd(kind, x, y, ones.data(), d, n);
}

}  // namespace detail

// rows -> rows map where every (in,out) edge is base(x)*w + sum_j s_j B_j(x);
// evaluated as two matmuls over the stacked basis features
template <class T>
struct KanLinear {
    std::size_t nin, nout;
    SplineGrid<T> grid;
    int base_kind;
    Tensor<T> w_base;    // (nout, nin)
    Tensor<T> w_spline;  // (nout, nin*nbasis), blocks of nbasis per input

    KanLinear(std::size_t nin_, std::size_t nout_, const SplineGrid<T>& grid_, int base_kind_, Rng& rng)
        : nin(nin_),
          nout(nout_),
          grid(grid_),
          base_kind(base_kind_),
          w_base(he_init<T>({nout_, nin_}, nin_, rng)),
          w_spline(randn<T>({nout_, nin_ * std::size_t(grid_.nbasis())}, rng,
                            T(0.1) / std::sqrt(T(nin_)), true)) {}

    Tensor<T> forward(const Tensor<T>& x) {
        KM_REQUIRE(x.rank() == 2 && x.dim(1) == nin, ShapeError, "kan linear wants (rows,", nin,
                   "), got ", shape_str(x.shape()));
        std::size_t rows = x.dim(0);
        std::size_t nb = std::size_t(grid.nbasis());
        Tensor<T> out = Tensor<T>::op({rows, nout}, {x, w_base, w_spline});
        auto psi = std::make_shared<std::vector<T>>(rows * nin);
        auto dpsi = std::make_shared<std::vector<T>>(rows * nin);
        auto bas = std::make_shared<std::vector<T>>(rows * nin * nb);
        auto dbas = std::make_shared<std::vector<T>>(rows * nin * nb);
        kern::unary_fwd(base_kind, x.data(), psi->data(), rows * nin);
        detail::unary_deriv(base_kind, x.data(), psi->data(), dpsi->data(), rows * nin);
        grid.eval(x.data(), rows * nin, bas->data(), dbas->data());
        // base part first, spline part accumulates on top
        kern::matmul(psi->data(), w_base.data(), out.data(), int(rows), int(nin), int(nout), false, true,
                     false);
        kern::matmul(bas->data(), w_spline.data(), out.data(), int(rows), int(nin * nb), int(nout), false,
                     true, true);
        if (out.requires_grad()) {
            Node<T>* xn = x.node().get();
            Node<T>* wn = w_base.node().get();
            Node<T>* sn = w_spline.node().get();
            Node<T>* on = out.node().get();
            std::size_t nin_c = nin, nout_c = nout;
            out.node()->bwd = [xn, wn, sn, on, psi, dpsi, bas, dbas, rows, nb, nin_c, nout_c] {
                if (on->g.empty()) return;
                const T* gy = on->g.data();
                if (wn->rg) {
                    wn->ensure_grad();
                    kern::matmul(gy, psi->data(), wn->g.data(), int(nout_c), int(rows), int(nin_c), true,
                                 false, true);
                }
                if (sn->rg) {
                    sn->ensure_grad();
                    kern::matmul(gy, bas->data(), sn->g.data(), int(nout_c), int(rows), int(nin_c * nb),
                                 true, false, true);
                }
                if (xn->rg) {
                    xn->ensure_grad();
                    std::vector<T> gw(rows * nin_c), gs(rows * nin_c * nb);
                    kern::matmul(gy, wn->v.data(), gw.data(), int(rows), int(nout_c), int(nin_c), false,
                                 false, false);
                    kern::matmul(gy, sn->v.data(), gs.data(), int(rows), int(nout_c), int(nin_c * nb),
                                 false, false, false);
                    T* gx = xn->g.data();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t p = 0; p < nin_c; ++p) {
                            std::size_t rp = r * nin_c + p;
                            T g = (*dpsi)[rp] * gw[rp];
                            const T* db = dbas->data() + rp * nb;
                            const T* gsp = gs.data() + r * nin_c * nb + p * nb;
                            for (std::size_t j = 0; j < nb; ++j) g += db[j] * gsp[j];
                            gx[rp] += g;
                        }
                }
            };
        }
        return out;
    }

    void register_into(ParamRegistry<T>& reg, const std::string& p) {
        reg.add_param(p + ".w_base", w_base);
        reg.add_param(p + ".w_spline", w_spline);
    }
};

// three rounds of token-wise spline map + depthwise conv mixing in image space
template <class T>
struct KanLayer {
    std::size_t e;
    std::vector<KanLinear<T>> kl;
    std::vector<DwConvBlock<T>> dw;

    KanLayer(std::size_t e_, const SplineGrid<T>& grid, int base_kind, Rng& rng) : e(e_) {
        for (int i = 0; i < 3; ++i) {
            kl.emplace_back(e_, e_, grid, base_kind, rng);
            dw.emplace_back(e_, rng);
        }
    }

    Tensor<T> forward(const Tensor<T>& x, std::size_t h, std::size_t w, bool training) {
        KM_REQUIRE(x.rank() == 3 && x.dim(2) == e && x.dim(1) == h * w, ShapeError,
                   "kan layer wants (N,", h * w, ",", e, "), got ", shape_str(x.shape()));
        std::size_t n = x.dim(0), l = x.dim(1);
        Tensor<T> t = x;
        for (int i = 0; i < 3; ++i) {
            auto y = kl[i].forward(reshape(t, {n * l, e}));
            auto img = tokens_to_image(reshape(y, {n, l, e}), h, w);
            t = image_to_tokens(dw[i].forward(img, training));
        }
        return t;
    }

    void register_into(ParamRegistry<T>& reg, const std::string& p) {
        for (int i = 0; i < 3; ++i) {
            kl[i].register_into(reg, p + ".kl" + std::to_string(i));
            dw[i].register_into(reg, p + ".dw" + std::to_string(i));
        }
    }
};

// residual wrapper: x + LN(kan(x))
template <class T>
struct Kanb {
    KanLayer<T> layer;
    LayerNorm<T> ln;

    Kanb(std::size_t e, const SplineGrid<T>& grid, int base_kind, Rng& rng)
        : layer(e, grid, base_kind, rng), ln(e) {}

    Tensor<T> forward(const Tensor<T>& x, std::size_t h, std::size_t w, bool training) {
        return add(x, ln.forward(layer.forward(x, h, w, training)));
    }

    void register_into(ParamRegistry<T>& reg, const std::string& p) {
        layer.register_into(reg, p + ".layer");
        ln.register_into(reg, p + ".ln");
    }
};

// strided 3x3 conv to tokens; odd extents round up
template <class T>
struct PatchEmbed {
    std::size_t cin, e;
    Tensor<T> w;  // (E, C, 3, 3)
    LayerNorm<T> ln;

    PatchEmbed(std::size_t c, std::size_t e_, Rng& rng)
        : cin(c), e(e_), w(he_init<T>({e_, c, 3, 3}, c * 9, rng)), ln(e_) {}

    struct Out {
        Tensor<T> tokens;
        std::size_t h, w;
    };

    Out forward(const Tensor<T>& x) {
        auto y = conv2d(x, w, 2, 1);
        std::size_t oh = y.dim(2), ow = y.dim(3);
        return {ln.forward(image_to_tokens(y)), oh, ow};
    }

    void register_into(ParamRegistry<T>& reg, const std::string& p) {
        reg.add_param(p + ".w", w);
        ln.register_into(reg, p + ".ln");
    }
};

}  // namespace km
