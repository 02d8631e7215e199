#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "km/kan.hpp"
#include "km/nn_layers.hpp"
#include "km/tensor.hpp"

// Selective state-space scan plus the two Mamba-style blocks built on it.
// States are diagonal per channel: A = -exp(a_log) keeps them decaying, and
// the per-token step size delta = softplus(proj(u)+bias) keeps the
// discretization positive.

namespace km {

// recurrence over row-major token order, one fused node caching the state
// history for the backward sweep.
// a (E,S), delta (N,L,E), bseq/cseq (N,L,S), d (E), u (N,L,E) -> y (N,L,E)
template <class T>
Tensor<T> scan_core(const Tensor<T>& a, const Tensor<T>& delta, const Tensor<T>& bseq,
                    const Tensor<T>& cseq, const Tensor<T>& d, const Tensor<T>& u) {
    KM_REQUIRE(u.rank() == 3, ShapeError, "scan wants u as (N,L,E), got ", shape_str(u.shape()));
    std::size_t n = u.dim(0), l = u.dim(1), e = u.dim(2);
    KM_REQUIRE(a.rank() == 2 && a.dim(0) == e, ShapeError, "scan state matrix wants (", e, ",S), got ",
               shape_str(a.shape()));
    std::size_t s = a.dim(1);
    KM_REQUIRE(delta.shape() == u.shape(), ShapeError, "scan delta shape ", shape_str(delta.shape()),
               " must match u ", shape_str(u.shape()));
    KM_REQUIRE(bseq.rank() == 3 && bseq.dim(0) == n && bseq.dim(1) == l && bseq.dim(2) == s, ShapeError,
               "scan B sequence wants (", n, ",", l, ",", s, "), got ", shape_str(bseq.shape()));
    KM_REQUIRE(cseq.shape() == bseq.shape(), ShapeError, "scan C sequence shape ",
               shape_str(cseq.shape()), " must match B ", shape_str(bseq.shape()));
    KM_REQUIRE(d.rank() == 1 && d.dim(0) == e, ShapeError, "scan skip vector wants (", e, "), got ",
               shape_str(d.shape()));
    Tensor<T> out = Tensor<T>::op({n, l, e}, {a, delta, bseq, cseq, d, u});
    auto hbuf = std::make_shared<std::vector<T>>(n * l * e * s);
    kern::scan_fwd(a.data(), delta.data(), bseq.data(), cseq.data(), d.data(), u.data(), out.data(),
                   hbuf->data(), int(n), int(l), int(e), int(s));
    if (out.requires_grad()) {
        Node<T>* an = a.node().get();
        Node<T>* dln = delta.node().get();
        Node<T>* bn = bseq.node().get();
        Node<T>* cn = cseq.node().get();
        Node<T>* dn = d.node().get();
        Node<T>* un = u.node().get();
        Node<T>* on = out.node().get();
        int ni = int(n), li = int(l), ei = int(e), si = int(s);
        out.node()->bwd = [an, dln, bn, cn, dn, un, on, hbuf, ni, li, ei, si] {
            if (on->g.empty()) return;
            // the kernel writes all six grads in one sweep; park unused ones
            std::vector<T> dumps[6];
            Node<T>* ps[6] = {an, dln, bn, cn, dn, un};
            T* gp[6];
            for (int i = 0; i < 6; ++i) {
                if (ps[i]->rg) {
                    ps[i]->ensure_grad();
                    gp[i] = ps[i]->g.data();
                } else {
                    dumps[i].assign(ps[i]->v.size(), T(0));
                    gp[i] = dumps[i].data();
                }
            }
            kern::scan_bwd(an->v.data(), dln->v.data(), bn->v.data(), cn->v.data(), dn->v.data(),
                           un->v.data(), hbuf->data(), on->g.data(), gp[0], gp[1], gp[2], gp[3], gp[4],
                           gp[5], ni, li, ei, si);
        };
    }
    return out;
}

namespace detail {

// inverse of softplus, stable for small y
template <class T>
T softplus_inv(T y) {
    return std::log(std::expm1(y));
}

}  // namespace detail

template <class T>
struct Ssm {
    std::size_t e, s;
    Tensor<T> a_log;    // (E,S), A = -exp(a_log) spans [-1,-S] log-spaced
    Tensor<T> d;        // (E) residual skip, starts at 1
    Tensor<T> w_delta;  // (E,E)
    Tensor<T> b_delta;  // (E), softplus^-1 of a log-uniform step size
    Tensor<T> w_b, w_c; // (S,E)

    Ssm(std::size_t e_, std::size_t s_, Rng& rng, T dt_lo = T(1e-3), T dt_hi = T(1e-1))
        : e(e_),
          s(s_),
          a_log(Tensor<T>::zeros({e_, s_}, true)),
          d(Tensor<T>::full({e_}, T(1), true)),
          w_delta(he_init<T>({e_, e_}, e_, rng)),
          b_delta(Tensor<T>::zeros({e_}, true)),
          w_b(he_init<T>({s_, e_}, e_, rng)),
          w_c(he_init<T>({s_, e_}, e_, rng)) {
        KM_REQUIRE(s >= 1, ConfigError, "ssm state dim must be positive, got ", s);
        for (std::size_t ie = 0; ie < e; ++ie)
            for (std::size_t is = 0; is < s; ++is)
                a_log.values()[ie * s + is] =
                    s > 1 ? T(is) / T(s - 1) * std::log(T(s)) : T(0);
        for (std::size_t ie = 0; ie < e; ++ie) {
            T dt = T(std::exp(rng.uniform(std::log(double(dt_lo)), std::log(double(dt_hi)))));
            b_delta.values()[ie] = detail::softplus_inv(dt);
        }
    }

    Tensor<T> forward(const Tensor<T>& u) {
        KM_REQUIRE(u.rank() == 3 && u.dim(2) == e, ShapeError, "ssm wants (N,L,", e, "), got ",
                   shape_str(u.shape()));
        std::size_t n = u.dim(0), l = u.dim(1);
        auto rows = reshape(u, {n * l, e});
        auto delta = softplus(add(matmul(rows, w_delta, false, true), b_delta));
        auto bseq = reshape(matmul(rows, w_b, false, true), {n, l, s});
        auto cseq = reshape(matmul(rows, w_c, false, true), {n, l, s});
        auto a = neg(exp_(a_log));
        return scan_core(a, reshape(delta, {n, l, e}), bseq, cseq, d, u);
    }

    void register_into(ParamRegistry<T>& reg, const std::string& p) {
        reg.add_param(p + ".a_log", a_log);
        reg.add_param(p + ".d", d);
        reg.add_param(p + ".w_delta", w_delta);
        reg.add_param(p + ".b_delta", b_delta);
        reg.add_param(p + ".w_b", w_b);
        reg.add_param(p + ".w_c", w_c);
    }
};

// plain token MLP with the same residual shape as the spline block, for the
// ablation that strips splines out
template <class T>
struct TokenMlp {
    std::size_t e;
    Tensor<T> w1, b1, w2, b2;
    LayerNorm<T> ln;

    TokenMlp(std::size_t e_, Rng& rng)
        : e(e_),
          w1(he_init<T>({e_, e_}, e_, rng)),
          b1(Tensor<T>::zeros({e_}, true)),
          w2(he_init<T>({e_, e_}, e_, rng)),
          b2(Tensor<T>::zeros({e_}, true)),
          ln(e_) {}

    Tensor<T> forward(const Tensor<T>& x, std::size_t, std::size_t, bool) {
        std::size_t n = x.dim(0), l = x.dim(1);
        auto rows = reshape(x, {n * l, e});
        auto h = silu(add(matmul(rows, w1, false, true), b1));
        auto o = add(matmul(h, w2, false, true), b2);
        return add(x, ln.forward(reshape(o, {n, l, e})));
    }

    void register_into(ParamRegistry<T>& reg, const std::string& p) {
        reg.add_param(p + ".w1", w1);
        reg.add_param(p + ".b1", b1);
        reg.add_param(p + ".w2", w2);
        reg.add_param(p + ".b2", b2);
        ln.register_into(reg, p + ".ln");
    }
};

struct MambaBlockOpts {
    bool kan_core = true;            // spline block vs token mlp
    bool boa_main = true;            // activation bag vs plain_act after the core
    bool boa_gate = true;            // activation bag vs plain_act on the gate branch
    int plain_act = kern::u_silu;    // the bagless activation
};

// downsampling fusion block: tokens through core+scan on the main path, the
// input pooled (and 1x1-projected on channel mismatch) on the skip and gate
// paths, all three summed
template <class T>
struct MambaKanBlock {
    std::size_t cin, e, s;
    MambaBlockOpts opts;
    PatchEmbed<T> pe;
    std::unique_ptr<Kanb<T>> kanb;
    std::unique_ptr<TokenMlp<T>> mlp;
    std::unique_ptr<Boa<T>> bag_main, bag_gate;
    Ssm<T> ssm;
    SpatialAttention<T> attn;
    Tensor<T> out_w, out_b;  // per-token (E,E) + (E)
    Tensor<T> skip_w;        // (E,cin,1,1), only when cin != e

    MambaKanBlock(std::size_t cin_, std::size_t e_, std::size_t s_, const SplineGrid<T>& grid,
                  MambaBlockOpts opts_, Rng& rng)
        : cin(cin_),
          e(e_),
          s(s_),
          opts(opts_),
          pe(cin_, e_, rng),
          ssm(e_, s_, rng),
          attn(rng),
          out_w(he_init<T>({e_, e_}, e_, rng)),
          out_b(Tensor<T>::zeros({e_}, true)) {
        if (opts.kan_core)
            kanb = std::make_unique<Kanb<T>>(e_, grid, kern::u_silu, rng);
        else
            mlp = std::make_unique<TokenMlp<T>>(e_, rng);
        if (opts.boa_main) bag_main = std::make_unique<Boa<T>>();
        if (opts.boa_gate) bag_gate = std::make_unique<Boa<T>>();
        if (cin != e) skip_w = he_init<T>({e_, cin_, 1, 1}, cin_, rng);
    }

    // pooled (and projected) input, shared by the skip and gate branches
    Tensor<T> resample(const Tensor<T>& x) {
        auto p = avgpool2x2_ceil(x);
        return cin == e ? p : conv2d(p, skip_w, 1, 0);
    }

    Tensor<T> forward_masked(const Tensor<T>& x, bool main_on, bool skip_on, bool gate_on,
                             bool training) {
        KM_REQUIRE(x.rank() == 4 && x.dim(1) == cin, ShapeError, "block wants (N,", cin, ",H,W), got ",
                   shape_str(x.shape()));
        KM_REQUIRE(main_on || skip_on || gate_on, ConfigError, "block with every branch masked off");
        std::size_t n = x.dim(0);
        Tensor<T> acc;
        if (main_on) {
            auto emb = pe.forward(x);
            std::size_t h2 = emb.h, w2 = emb.w, l = h2 * w2;
            auto t = opts.kan_core ? kanb->forward(emb.tokens, h2, w2, training)
                                   : mlp->forward(emb.tokens, h2, w2, training);
            t = bag_main ? bag_main->forward(t) : activation(t, opts.plain_act);
            t = ssm.forward(t);
            auto img = attn.forward(tokens_to_image(t, h2, w2));
            auto rows = reshape(image_to_tokens(img), {n * l, e});
            auto proj = add(matmul(rows, out_w, false, true), out_b);
            acc = tokens_to_image(reshape(proj, {n, l, e}), h2, w2);
        }
        if (skip_on || gate_on) {
            auto sk = resample(x);
            if (skip_on) acc = acc ? add(acc, sk) : sk;
            if (gate_on) {
                auto g = bag_gate ? bag_gate->forward(sk) : activation(sk, opts.plain_act);
                acc = acc ? add(acc, g) : g;
            }
        }
        return acc;
    }

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        return forward_masked(x, true, true, true, training);
    }

    void register_into(ParamRegistry<T>& reg, const std::string& p) {
        pe.register_into(reg, p + ".pe");
        if (kanb) kanb->register_into(reg, p + ".kanb");
        if (mlp) mlp->register_into(reg, p + ".mlp");
        if (bag_main) bag_main->register_into(reg, p + ".bag_main");
        if (bag_gate) bag_gate->register_into(reg, p + ".bag_gate");
        ssm.register_into(reg, p + ".ssm");
        attn.register_into(reg, p + ".attn");
        reg.add_param(p + ".out_w", out_w);
        reg.add_param(p + ".out_b", out_b);
        if (skip_w) reg.add_param(p + ".skip_w", skip_w);
    }
};

// resolution-preserving baseline: conv mini-blocks with attention in between,
// then the same scan, plus input and plain_act(input) residuals
template <class T>
struct ClassicalMambaBlock {
    std::size_t e;
    int plain_act;
    Tensor<T> in_w;  // (E,E,1,1)
    std::vector<Tensor<T>> conv_w;
    std::vector<BatchNorm2d<T>> bns;
    SpatialAttention<T> attn01, attn12, attn_final;
    Ssm<T> ssm;
    Tensor<T> out_w, out_b;

    ClassicalMambaBlock(std::size_t e_, std::size_t s_, Rng& rng, int act = kern::u_silu)
        : e(e_),
          plain_act(act),
          in_w(he_init<T>({e_, e_, 1, 1}, e_, rng)),
          attn01(rng),
          attn12(rng),
          attn_final(rng),
          ssm(e_, s_, rng),
          out_w(he_init<T>({e_, e_}, e_, rng)),
          out_b(Tensor<T>::zeros({e_}, true)) {
        for (int i = 0; i < 3; ++i) {
            conv_w.push_back(he_init<T>({e_, e_, 3, 3}, e_ * 9, rng));
            bns.emplace_back(e_);
        }
    }

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        KM_REQUIRE(x.rank() == 4 && x.dim(1) == e, ShapeError, "classical block wants (N,", e,
                   ",H,W), got ", shape_str(x.shape()));
        std::size_t h = x.dim(2), w = x.dim(3);
        auto t = conv2d(x, in_w, 1, 0);
        t = bns[0].forward(conv2d(t, conv_w[0], 1, 1), training);
        t = attn01.forward(t);
        t = bns[1].forward(conv2d(t, conv_w[1], 1, 1), training);
        t = attn12.forward(t);
        t = bns[2].forward(conv2d(t, conv_w[2], 1, 1), training);
        t = activation(t, plain_act);
        auto y = ssm.forward(image_to_tokens(t));
        auto img = attn_final.forward(tokens_to_image(y, h, w));
        std::size_t n = x.dim(0), l = h * w;
        auto rows = reshape(image_to_tokens(img), {n * l, e});
        auto proj = add(matmul(rows, out_w, false, true), out_b);
        auto main = tokens_to_image(reshape(proj, {n, l, e}), h, w);
        return add(add(main, x), activation(x, plain_act));
    }

    void register_into(ParamRegistry<T>& reg, const std::string& p) {
        reg.add_param(p + ".in_w", in_w);
        for (int i = 0; i < 3; ++i) {
            reg.add_param(p + ".conv" + std::to_string(i) + ".w", conv_w[i]);
            bns[i].register_into(reg, p + ".conv" + std::to_string(i) + ".bn");
        }
        attn01.register_into(reg, p + ".attn01");
        attn12.register_into(reg, p + ".attn12");
        attn_final.register_into(reg, p + ".attn_final");
        ssm.register_into(reg, p + ".ssm");
        reg.add_param(p + ".out_w", out_w);
        reg.add_param(p + ".out_b", out_b);
    }
};

}  // namespace km
