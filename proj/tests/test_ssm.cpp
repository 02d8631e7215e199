#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "km/gradcheck.hpp"
#include "km/ssm.hpp"
#include "oracles.hpp"

using km::Tensor;

namespace {

struct ScanInputs {
    Tensor<double> a, delta, bseq, cseq, d, u;
};

ScanInputs random_scan(km::Rng& rng, std::size_t n, std::size_t l, std::size_t e, std::size_t s,
                       bool rg = false) {
    ScanInputs in;
    in.a = Tensor<double>::zeros({e, s}, rg);
    for (auto& v : in.a.values()) v = -rng.uniform(0.05, 2.0);
    in.delta = Tensor<double>::zeros({n, l, e}, rg);
    for (auto& v : in.delta.values()) v = rng.uniform(0.05, 1.0);
    in.bseq = km::randn<double>({n, l, s}, rng, 1.0, rg);
    in.cseq = km::randn<double>({n, l, s}, rng, 1.0, rg);
    in.d = km::randn<double>({e}, rng, 1.0, rg);
    in.u = km::randn<double>({n, l, e}, rng, 1.0, rg);
    return in;
}

}  // namespace

TEST_CASE("scan matches a per-step recurrence oracle") {
    km::Rng rng(301);
    for (int trial = 0; trial < 50; ++trial) {
        std::size_t n = 1 + rng.index(2), l = 1 + rng.index(64), e = 1 + rng.index(8),
                    s = 1 + rng.index(8);
        auto in = random_scan(rng, n, l, e, s);
        auto y = km::scan_core(in.a, in.delta, in.bseq, in.cseq, in.d, in.u);
        auto ref = oracle::scan(in.a.values(), in.delta.values(), in.bseq.values(), in.cseq.values(),
                                in.d.values(), in.u.values(), int(n), int(l), int(e), int(s));
        CHECK(oracle::max_abs_diff(y.values().data(), ref.data(), y.numel()) < 1e-10);
    }
}

TEST_CASE("scan on zero input stays zero") {
    km::Rng rng(307);
    auto in = random_scan(rng, 2, 9, 3, 4);
    std::fill(in.u.values().begin(), in.u.values().end(), 0.0);
    auto y = km::scan_core(in.a, in.delta, in.bseq, in.cseq, in.d, in.u);
    for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("scan degenerates to a prefix sum") {
    km::Rng rng(311);
    std::size_t n = 1, l = 7, e = 2, s = 1;
    auto a = Tensor<double>::zeros({e, s});
    auto delta = Tensor<double>::full({n, l, e}, 1.0);
    auto ones = Tensor<double>::full({n, l, s}, 1.0);
    auto d = Tensor<double>::zeros({e});
    auto u = km::randn<double>({n, l, e}, rng);
    auto y = km::scan_core(a, delta, ones, ones, d, u);
    for (std::size_t ie = 0; ie < e; ++ie) {
        double run = 0;
        for (std::size_t t = 0; t < l; ++t) {
            run += u.values()[t * e + ie];
            CHECK(y.values()[t * e + ie] == run);
        }
    }
}

TEST_CASE("scan is causal in the token index") {
    km::Rng rng(313);
    std::size_t n = 2, l = 12, e = 3, s = 4, t0 = 5;
    auto in = random_scan(rng, n, l, e, s);
    auto y1 = km::scan_core(in.a, in.delta, in.bseq, in.cseq, in.d, in.u);
    in.u.values()[(0 * l + t0) * e + 1] += 0.75;
    in.delta.values()[(1 * l + t0) * e + 2] += 0.1;
    in.bseq.values()[(0 * l + t0) * s + 0] -= 0.5;
    auto y2 = km::scan_core(in.a, in.delta, in.bseq, in.cseq, in.d, in.u);
    for (std::size_t in_ = 0; in_ < n; ++in_)
        for (std::size_t t = 0; t < t0; ++t)
            for (std::size_t ie = 0; ie < e; ++ie)
                CHECK(y1.values()[(in_ * l + t) * e + ie] == y2.values()[(in_ * l + t) * e + ie]);
    double tail = 0;
    for (std::size_t t = t0; t < l; ++t)
        for (std::size_t ie = 0; ie < e; ++ie)
            tail = std::max(tail, std::abs(y1.values()[(0 * l + t) * e + ie] -
                                           y2.values()[(0 * l + t) * e + ie]));
    CHECK(tail > 0.0);
}

TEST_CASE("states only decay once the input stops") {
    km::Rng rng(317);
    std::size_t n = 1, l = 16, e = 2, s = 3, t0 = 6;
    auto in = random_scan(rng, n, l, e, s);
    for (std::size_t t = t0; t < l; ++t)
        for (std::size_t ie = 0; ie < e; ++ie) in.u.values()[t * e + ie] = 0.0;
    std::vector<double> y(n * l * e), hbuf(n * l * e * s);
    km::kern::scan_fwd(in.a.data(), in.delta.data(), in.bseq.data(), in.cseq.data(), in.d.data(),
                       in.u.data(), y.data(), hbuf.data(), int(n), int(l), int(e), int(s));
    for (std::size_t t = t0; t + 1 < l; ++t)
        for (std::size_t ie = 0; ie < e; ++ie)
            for (std::size_t is = 0; is < s; ++is) {
                double prev = std::abs(hbuf[(t * e + ie) * s + is]);
                double next = std::abs(hbuf[((t + 1) * e + ie) * s + is]);
                CHECK(next <= prev);
            }
}

TEST_CASE("scan gradients match finite differences") {
    km::Rng rng(331);
    auto in = random_scan(rng, 2, 6, 3, 3, true);
    double err = km::fd_check<double>(
        [&] {
            auto y = km::scan_core(in.a, in.delta, in.bseq, in.cseq, in.d, in.u);
            return km::sum_all(km::mul(y, y));
        },
        {in.a, in.delta, in.bseq, in.cseq, in.d, in.u}, 1e-6);
    CHECK(err < 1e-6);
}

TEST_CASE("ssm init spans the pinned decay range") {
    km::Rng rng(337);
    km::Ssm<double> ssm(4, 8, rng);
    for (std::size_t ie = 0; ie < 4; ++ie) {
        CHECK(std::exp(ssm.a_log.values()[ie * 8 + 0]) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::exp(ssm.a_log.values()[ie * 8 + 7]) == doctest::Approx(8.0).epsilon(1e-12));
        for (std::size_t is = 0; is + 1 < 8; ++is)  // log-spaced: constant ratio
            CHECK(ssm.a_log.values()[ie * 8 + is + 1] - ssm.a_log.values()[ie * 8 + is] ==
                  doctest::Approx(std::log(8.0) / 7.0).epsilon(1e-12));
        double dt = std::log1p(std::exp(ssm.b_delta.values()[ie]));
        CHECK(dt >= 1e-3);
        CHECK(dt <= 1e-1);
    }
    for (double v : ssm.d.values()) CHECK(v == 1.0);
}

TEST_CASE("ssm wrapper gradients") {
    km::Rng rng(347);
    km::Ssm<double> ssm(3, 2, rng);
    auto u = km::randn<double>({1, 8, 3}, rng, 1.0, true);
    double err = km::fd_check<double>(
        [&] {
            auto y = ssm.forward(u);
            return km::sum_all(km::mul(y, y));
        },
        {u, ssm.a_log, ssm.d, ssm.w_delta, ssm.b_delta, ssm.w_b, ssm.w_c}, 1e-6, 50, &rng);
    CHECK(err < 1e-6);
}

TEST_CASE("fusion block halves odd extents and remaps channels") {
    km::Rng rng(353);
    km::SplineGrid<double> g(3, 4, -1.0, 1.0);
    km::MambaKanBlock<double> blk(4, 6, 3, g, {}, rng);
    auto x = km::randn<double>({2, 4, 9, 10}, rng);
    auto y = blk.forward(x, false);
    CHECK(y.shape() == km::Shape{2, 6, 5, 5});
    CHECK(bool(blk.skip_w));
    km::MambaKanBlock<double> same(6, 6, 3, g, {}, rng);
    CHECK(!bool(same.skip_w));
}

TEST_CASE("fusion block output is exactly the sum of its branches") {
    km::Rng rng(359);
    km::SplineGrid<double> g(3, 4, -1.0, 1.0);
    km::MambaKanBlock<double> blk(3, 5, 2, g, {}, rng);
    auto x = km::randn<double>({1, 3, 8, 8}, rng);
    auto full = blk.forward(x, false);
    auto m = blk.forward_masked(x, true, false, false, false);
    auto sk = blk.forward_masked(x, false, true, false, false);
    auto gt = blk.forward_masked(x, false, false, true, false);
    for (std::size_t i = 0; i < full.numel(); ++i) {
        double sum = m.values()[i] + sk.values()[i] + gt.values()[i];
        CHECK(std::abs(full.values()[i] - sum) < 1e-10);
    }
}

TEST_CASE("fusion block with zeroed weights is twice the pooled input") {
    km::Rng rng(367);
    km::SplineGrid<double> g(3, 4, -1.0, 1.0);
    km::MambaKanBlock<double> blk(3, 3, 2, g, {}, rng);
    km::ParamRegistry<double> reg;
    blk.register_into(reg, "blk");
    for (auto& [name, t] : reg.params) std::fill(t.values().begin(), t.values().end(), 0.0);
    blk.bag_gate->alphas.values() = {1, 0, 0, 0, 0};  // relu slot only
    auto x = km::randn<double>({1, 3, 6, 6}, rng);
    for (auto& v : x.values()) v = std::abs(v);
    auto y = blk.forward(x, false);
    auto pooled = km::avgpool2x2_ceil(x);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.values()[i] == 2.0 * pooled.values()[i]);
}

TEST_CASE("fusion block gradients") {
    km::Rng rng(373);
    km::SplineGrid<double> g(3, 4, -1.0, 1.0);
    km::MambaKanBlock<double> blk(2, 3, 2, g, {}, rng);
    auto x = km::randn<double>({1, 2, 6, 6}, rng, 0.5, true);
    double err = km::fd_check<double>(
        [&] {
            auto y = blk.forward(x, false);
            return km::mean_all(km::mul(y, y));
        },
        {x, blk.pe.w, blk.kanb->layer.kl[0].w_spline, blk.ssm.a_log, blk.ssm.w_delta, blk.out_w,
         blk.attn.w, blk.bag_main->alphas, blk.bag_gate->alphas, blk.skip_w},
        1e-5, 40, &rng);
    CHECK(err < 1e-4);
}

TEST_CASE("fusion block runs with the mlp core and plain gates") {
    km::Rng rng(379);
    km::SplineGrid<double> g(3, 4, -1.0, 1.0);
    km::MambaBlockOpts opts;
    opts.kan_core = false;
    opts.boa_main = false;
    opts.boa_gate = false;
    km::MambaKanBlock<double> blk(3, 4, 2, g, opts, rng);
    CHECK(blk.mlp != nullptr);
    CHECK(blk.kanb == nullptr);
    CHECK(blk.bag_main == nullptr);
    auto x = km::randn<double>({1, 3, 8, 8}, rng, 0.5, true);
    auto y = blk.forward(x, false);
    CHECK(y.shape() == km::Shape{1, 4, 4, 4});
    double err = km::fd_check<double>(
        [&] {
            auto y2 = blk.forward(x, false);
            return km::mean_all(km::mul(y2, y2));
        },
        {x, blk.mlp->w1, blk.mlp->b2, blk.ssm.w_c, blk.out_b}, 1e-5, 40, &rng);
    CHECK(err < 1e-5);
}

TEST_CASE("classical block keeps resolution and reduces to its residuals when zeroed") {
    km::Rng rng(383);
    km::ClassicalMambaBlock<double> blk(4, 3, rng);
    auto x = km::randn<double>({1, 4, 6, 6}, rng);
    auto y = blk.forward(x, false);
    CHECK(y.shape() == km::Shape{1, 4, 6, 6});

    km::ParamRegistry<double> reg;
    blk.register_into(reg, "blk");
    for (auto& [name, t] : reg.params) std::fill(t.values().begin(), t.values().end(), 0.0);
    auto y0 = blk.forward(x, false);
    auto ref = km::add(x, km::silu(x));
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y0.values()[i] == ref.values()[i]);
}

TEST_CASE("classical block gradients") {
    km::Rng rng(389);
    km::ClassicalMambaBlock<double> blk(2, 2, rng);
    auto x = km::randn<double>({1, 2, 4, 4}, rng, 0.7, true);
    double err = km::fd_check<double>(
        [&] {
            auto y = blk.forward(x, true);
            return km::mean_all(km::mul(y, y));
        },
        {x, blk.in_w, blk.conv_w[1], blk.bns[0].gamma, blk.ssm.a_log, blk.out_w}, 1e-5, 40, &rng);
    CHECK(err < 1e-4);
}

TEST_CASE("block registries name every tensor once") {
    km::Rng rng(397);
    km::SplineGrid<double> g(3, 4, -1.0, 1.0);
    km::MambaKanBlock<double> blk(3, 5, 2, g, {}, rng);
    km::ParamRegistry<double> reg;
    blk.register_into(reg, "m1");
    CHECK(reg.find("m1.pe.w") != nullptr);
    CHECK(reg.find("m1.kanb.layer.kl0.w_base") != nullptr);
    CHECK(reg.find("m1.ssm.a_log") != nullptr);
    CHECK(reg.find("m1.bag_gate.alphas") != nullptr);
    CHECK(reg.find("m1.skip_w") != nullptr);
    CHECK(reg.find("m1.mlp.w1") == nullptr);
}
