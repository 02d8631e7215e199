#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "km/gradcheck.hpp"
#include "km/tensor.hpp"
#include "oracles.hpp"

using km::Tensor;

namespace {

std::vector<double> vals(const Tensor<double>& t) { return t.values(); }

}  // namespace

TEST_CASE("leaf construction and shape checks") {
    auto z = Tensor<double>::zeros({2, 3});
    CHECK(z.numel() == 6);
    CHECK(z.shape() == km::Shape{2, 3});
    auto f = Tensor<double>::full({4}, 2.5);
    for (double v : f.values()) CHECK(v == 2.5);
    CHECK_THROWS_AS(Tensor<double>::from({2, 2}, {1.0, 2.0, 3.0}), km::ShapeError);
    CHECK_THROWS_AS(km::reshape(z, {5}), km::ShapeError);
    auto r = km::reshape(z, {3, 2});
    CHECK(r.shape() == km::Shape{3, 2});
}

TEST_CASE("elementwise ops and broadcasting values") {
    auto a = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto row = Tensor<double>::from({3}, {10, 20, 30});
    auto s = Tensor<double>::scalar(2.0);

    auto sum = a + row;
    CHECK(sum.shape() == km::Shape{2, 3});
    CHECK(sum.values() == std::vector<double>{11, 22, 33, 14, 25, 36});

    auto prod = a * s;
    CHECK(prod.values() == std::vector<double>{2, 4, 6, 8, 10, 12});

    auto sprod = km::smul(a, 0.5);
    CHECK(sprod.values() == std::vector<double>{0.5, 1, 1.5, 2, 2.5, 3});

    // (2,1,4) x (3,1) -> (2,3,4)
    km::Rng rng(7);
    auto x = km::randn<double>({2, 1, 4}, rng);
    auto y = km::randn<double>({3, 1}, rng);
    auto z = x * y;
    REQUIRE(z.shape() == km::Shape{2, 3, 4});
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            for (std::size_t k = 0; k < 4; ++k)
                CHECK(z.values()[(i * 3 + j) * 4 + k] ==
                      doctest::Approx(x.values()[i * 4 + k] * y.values()[j]).epsilon(1e-12));

    CHECK_THROWS_AS(km::add(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({2, 4})), km::ShapeError);
}

TEST_CASE("matmul matches the oracle for every transpose pair") {
    km::Rng rng(11);
    int m = 5, k = 4, n = 3;
    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            km::Shape sa = ta ? km::Shape{std::size_t(k), std::size_t(m)}
                              : km::Shape{std::size_t(m), std::size_t(k)};
            km::Shape sb = tb ? km::Shape{std::size_t(n), std::size_t(k)}
                              : km::Shape{std::size_t(k), std::size_t(n)};
            auto a = km::randn<double>(sa, rng);
            auto b = km::randn<double>(sb, rng);
            auto c = km::matmul(a, b, ta, tb);
            auto want = oracle::matmul(a.values(), b.values(), m, k, n, ta, tb);
            CHECK(oracle::max_abs_diff(c.data(), want.data(), want.size()) < 1e-12);
        }
    CHECK_THROWS_AS(km::matmul(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({2, 3})),
                    km::ShapeError);
}

TEST_CASE("conv2d values match the pad-and-gather oracle") {
    km::Rng rng(13);
    struct Case {
        int n, ci, h, w, co, kh, kw, stride, pad;
    };
    for (Case c : {Case{2, 3, 7, 6, 4, 3, 3, 1, 1}, Case{1, 2, 8, 8, 3, 3, 3, 2, 1},
                   Case{2, 1, 9, 9, 2, 5, 5, 1, 2}, Case{1, 3, 6, 7, 2, 7, 7, 1, 3}}) {
        auto x = km::randn<double>({std::size_t(c.n), std::size_t(c.ci), std::size_t(c.h), std::size_t(c.w)},
                                   rng);
        auto w = km::randn<double>(
            {std::size_t(c.co), std::size_t(c.ci), std::size_t(c.kh), std::size_t(c.kw)}, rng);
        auto b = km::randn<double>({std::size_t(c.co)}, rng);
        auto y = km::conv2d(x, w, b, c.stride, c.pad);
        auto bias = b.values();
        auto want = oracle::conv2d(x.values(), w.values(), &bias, c.n, c.ci, c.h, c.w, c.co, c.kh, c.kw,
                                   c.stride, c.pad);
        REQUIRE(y.numel() == want.size());
        CHECK(oracle::max_abs_diff(y.data(), want.data(), want.size()) < 1e-12);
    }
}

TEST_CASE("dwconv2d values match the per-channel oracle") {
    km::Rng rng(17);
    auto x = km::randn<double>({2, 3, 6, 5}, rng);
    auto w = km::randn<double>({3, 3, 3}, rng);
    auto y = km::dwconv2d(x, w, 1, 1);
    auto want = oracle::dwconv2d(x.values(), w.values(), 2, 3, 6, 5, 3, 3, 1, 1);
    CHECK(oracle::max_abs_diff(y.data(), want.data(), want.size()) < 1e-12);
}

TEST_CASE("pooling and upsampling behave on hand cases") {
    // maxpool picks the max and routes gradient to it alone
    auto x = Tensor<double>::from({1, 1, 2, 2}, {1, 4, 2, 3}, true);
    auto y = km::maxpool2x2(x);
    CHECK(y.values()[0] == 4);
    auto loss = km::sum_all(y);
    loss.backward();
    CHECK(x.grad() == std::vector<double>{0, 1, 0, 0});

    // ceil average pooling: odd extents keep a shrunken edge window
    auto a = Tensor<double>::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto p = km::avgpool2x2_ceil(a);
    REQUIRE(p.shape() == km::Shape{1, 1, 2, 2});
    CHECK(p.values()[0] == doctest::Approx(3.0));        // (1+2+4+5)/4
    CHECK(p.values()[1] == doctest::Approx(4.5));        // (3+6)/2
    CHECK(p.values()[2] == doctest::Approx(7.5));        // (7+8)/2
    CHECK(p.values()[3] == doctest::Approx(9.0));        // lone corner

    // bilinear 2x upsample preserves constants and hits exact centers
    auto c = Tensor<double>::full({1, 1, 3, 5}, 0.7);
    auto u = km::upsample2x(c);
    REQUIRE(u.shape() == km::Shape{1, 1, 6, 10});
    for (double v : u.values()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));

    auto one = Tensor<double>::from({1, 1, 1, 2}, {0.0, 1.0});
    auto uu = km::upsample2x(one);
    CHECK(uu.values() == std::vector<double>{0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0});

    CHECK_THROWS_AS(km::maxpool2x2(Tensor<double>::zeros({1, 1, 3, 4})), km::ShapeError);
}

TEST_CASE("token layout roundtrip") {
    km::Rng rng(23);
    auto x = km::randn<double>({2, 3, 4, 5}, rng, 1.0, true);
    auto tok = km::image_to_tokens(x);
    REQUIRE(tok.shape() == km::Shape{2, 20, 3});
    auto back = km::tokens_to_image(tok, 4, 5);
    CHECK(oracle::max_abs_diff(back.data(), x.data(), x.numel()) == 0.0);
    CHECK_THROWS_AS(km::tokens_to_image(tok, 3, 5), km::ShapeError);

    auto loss = km::sum_all(km::mul(back, back));
    loss.backward();
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(x.grad()[i] == doctest::Approx(2 * x.values()[i]).epsilon(1e-12));
}

TEST_CASE("gradients: elementwise, broadcast, reductions") {
    km::Rng rng(29);
    auto a = km::randn<double>({3, 4}, rng, 1.0, true);
    auto b = km::randn<double>({3, 4}, rng, 1.0, true);
    auto row = km::randn<double>({4}, rng, 1.0, true);
    auto sc = Tensor<double>::scalar(0.8, true);
    for (auto& t : b.values()) t += t < 0 ? -0.5 : 0.5;  // keep divisors away from zero

    double err = km::fd_check<double>(
        [&] {
            auto t1 = km::add(km::mul(a, b), row);
            auto t2 = km::div(t1, b);
            auto t3 = km::mul(t2, sc);
            auto t4 = km::sub(t3, km::smul(a, 0.3));
            return km::mean_all(km::mul(t4, t4));
        },
        {a, b, row, sc}, 1e-5);
    CHECK(err < 1e-7);
}

TEST_CASE("gradients: smooth activations and scalar ops") {
    km::Rng rng(31);
    auto x = km::randn<double>({2, 6}, rng, 1.0, true);
    for (int kind :
         {km::kern::u_tanh, km::kern::u_softplus, km::kern::u_gelu, km::kern::u_silu, km::kern::u_sigmoid}) {
        double err = km::fd_check<double>(
            [&] { return km::sum_all(km::activation(x, kind)); }, {x}, 1e-5);
        CHECK_MESSAGE(err < 1e-7, "activation kind ", kind);
    }
    auto pos = km::uniform<double>({2, 5}, rng, 0.5, 2.0, true);
    double err_log = km::fd_check<double>(
        [&] { return km::sum_all(km::log_(pos)); }, {pos}, 1e-6);
    CHECK(err_log < 1e-6);
    double err_exp = km::fd_check<double>(
        [&] { return km::sum_all(km::exp_(km::sadd(x, 0.1))); }, {x}, 1e-6);
    CHECK(err_exp < 1e-6);
}

TEST_CASE("gradients: relu with kink margin") {
    km::Rng rng(37);
    auto x = km::randn<double>({3, 5}, rng, 1.0, true);
    km::nudge_from_zero(x, 1e-3);
    double err = km::fd_check<double>(
        [&] { return km::sum_all(km::relu(x)); }, {x}, 1e-5);
    CHECK(err < 1e-8);
}

TEST_CASE("gradients: matmul all transpose pairs") {
    km::Rng rng(41);
    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            km::Shape sa = ta ? km::Shape{4, 3} : km::Shape{3, 4};
            km::Shape sb = tb ? km::Shape{2, 4} : km::Shape{4, 2};
            auto a = km::randn<double>(sa, rng, 1.0, true);
            auto b = km::randn<double>(sb, rng, 1.0, true);
            double err = km::fd_check<double>(
                [&] {
                    auto c = km::matmul(a, b, ta, tb);
                    return km::sum_all(km::mul(c, c));
                },
                {a, b}, 1e-5);
            CHECK_MESSAGE(err < 1e-7, "ta=", ta, " tb=", tb);
        }
}

TEST_CASE("gradients: conv, dwconv, pooling, upsample") {
    km::Rng rng(43);
    auto x = km::randn<double>({2, 2, 6, 6}, rng, 1.0, true);
    auto w = km::randn<double>({3, 2, 3, 3}, rng, 0.5, true);
    auto b = km::randn<double>({3}, rng, 0.2, true);
    double err = km::fd_check<double>(
        [&] {
            auto y = km::conv2d(x, w, b, 2, 1);
            return km::sum_all(km::mul(y, y));
        },
        {x, w, b}, 1e-5);
    CHECK(err < 1e-7);

    auto wd = km::randn<double>({2, 3, 3}, rng, 0.5, true);
    double err_dw = km::fd_check<double>(
        [&] {
            auto y = km::dwconv2d(x, wd, 1, 1);
            return km::sum_all(km::mul(y, y));
        },
        {x, wd}, 1e-5);
    CHECK(err_dw < 1e-7);

    auto xp = km::randn<double>({2, 2, 4, 4}, rng, 1.0, true);
    km::ensure_pool_gap(xp, 1e-3);
    double err_mp = km::fd_check<double>(
        [&] { return km::sum_all(km::mul(km::maxpool2x2(xp), km::maxpool2x2(xp))); }, {xp}, 1e-5);
    CHECK(err_mp < 1e-7);

    auto xo = km::randn<double>({1, 2, 5, 7}, rng, 1.0, true);
    double err_ap = km::fd_check<double>(
        [&] {
            auto y = km::avgpool2x2_ceil(xo);
            return km::sum_all(km::mul(y, y));
        },
        {xo}, 1e-5);
    CHECK(err_ap < 1e-7);

    double err_up = km::fd_check<double>(
        [&] {
            auto y = km::upsample2x(xo);
            return km::sum_all(km::mul(y, y));
        },
        {xo}, 1e-5);
    CHECK(err_up < 1e-7);
}

TEST_CASE("gradients: concat, channel stats, indexing") {
    km::Rng rng(47);
    auto a = km::randn<double>({2, 3, 4, 4}, rng, 1.0, true);
    auto b = km::randn<double>({2, 2, 4, 4}, rng, 1.0, true);
    double err = km::fd_check<double>(
        [&] {
            auto c = km::concat_ch(a, b);
            auto m = km::channel_mean(c);
            return km::sum_all(km::mul(m, m));
        },
        {a, b}, 1e-5);
    CHECK(err < 1e-7);

    auto xm = km::randn<double>({2, 4, 3, 3}, rng, 1.0, true);
    // channel argmax must not flip under probes
    for (std::size_t in = 0; in < 2; ++in)
        for (std::size_t p = 0; p < 9; ++p) {
            double best = -1e30;
            std::size_t bi = 0;
            for (std::size_t c = 0; c < 4; ++c) {
                double v = xm.values()[(in * 4 + c) * 9 + p];
                if (v > best) {
                    best = v;
                    bi = c;
                }
            }
            xm.values()[(in * 4 + bi) * 9 + p] += 1e-2;
        }
    double err_cm = km::fd_check<double>(
        [&] {
            auto m = km::channel_max(xm);
            return km::sum_all(km::mul(m, m));
        },
        {xm}, 1e-5);
    CHECK(err_cm < 1e-7);

    auto v = km::randn<double>({5}, rng, 1.0, true);
    double err_ix = km::fd_check<double>(
        [&] { return km::mul(km::index_scalar(v, 2), km::index_scalar(v, 4)); }, {v}, 1e-6);
    CHECK(err_ix < 1e-8);
}

TEST_CASE("gradients: layer norm") {
    km::Rng rng(53);
    auto x = km::randn<double>({3, 6}, rng, 1.0, true);
    auto gamma = km::uniform<double>({6}, rng, 0.5, 1.5, true);
    auto beta = km::randn<double>({6}, rng, 0.3, true);
    double err = km::fd_check<double>(
        [&] {
            auto y = km::layer_norm(x, gamma, beta);
            return km::sum_all(km::mul(y, y));
        },
        {x, gamma, beta}, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("backward accumulates across graphs, NoGrad builds no graph") {
    auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
    km::sum_all(km::mul(x, x)).backward();
    CHECK(x.grad() == std::vector<double>{2, 4});
    km::sum_all(km::mul(x, x)).backward();  // fresh graph, same leaf: grads add up
    CHECK(x.grad() == std::vector<double>{4, 8});
    x.zero_grad();
    CHECK(x.grad() == std::vector<double>{0, 0});

    {
        km::NoGrad ng;
        auto y = km::mul(x, x);
        CHECK_FALSE(y.requires_grad());
        CHECK(y.node()->parents.empty());
    }
    CHECK(km::grad_mode_flag());
}

TEST_CASE("domain errors") {
    auto neg = Tensor<double>::from({2}, {1.0, -1.0});
    CHECK_THROWS_AS(km::log_(neg), km::DomainError);
    auto zero = Tensor<double>::from({1}, {0.0});
    CHECK_THROWS_AS(km::log_(zero), km::DomainError);
}

TEST_CASE("serial and parallel kernels agree") {
    km::Rng rng(59);
    using km::kern::set_parallel;

    auto x = km::randn<double>({2, 3, 9, 8}, rng);
    auto w = km::randn<double>({4, 3, 3, 3}, rng);
    auto b = km::randn<double>({4}, rng);

    set_parallel(false);
    auto y_s = km::conv2d(x, w, b, 2, 1);
    set_parallel(true);
    auto y_p = km::conv2d(x, w, b, 2, 1);
    CHECK(oracle::max_rel_diff(y_s.data(), y_p.data(), y_s.numel()) < 1e-14);

    auto a = km::randn<double>({17, 13}, rng);
    auto bb = km::randn<double>({13, 9}, rng);
    set_parallel(false);
    auto c_s = km::matmul(a, bb);
    set_parallel(true);
    auto c_p = km::matmul(a, bb);
    CHECK(oracle::max_rel_diff(c_s.data(), c_p.data(), c_s.numel()) < 1e-14);

    auto xp = km::randn<double>({3, 4, 10, 10}, rng);
    set_parallel(false);
    auto u_s = km::upsample2x(xp);
    auto p_s = km::avgpool2x2_ceil(xp);
    auto m_s = km::maxpool2x2(xp);
    set_parallel(true);
    auto u_p = km::upsample2x(xp);
    auto p_p = km::avgpool2x2_ceil(xp);
    auto m_p = km::maxpool2x2(xp);
    CHECK(oracle::max_abs_diff(u_s.data(), u_p.data(), u_s.numel()) == 0.0);
    CHECK(oracle::max_abs_diff(p_s.data(), p_p.data(), p_s.numel()) == 0.0);
    CHECK(oracle::max_abs_diff(m_s.data(), m_p.data(), m_s.numel()) == 0.0);

    // backward kernels: run the same graph under both dispatch modes
    auto run = [&](bool par) {
        set_parallel(par);
        auto xi = Tensor<double>::from(x.shape(), x.values(), true);
        auto wi = Tensor<double>::from(w.shape(), w.values(), true);
        auto yi = km::conv2d(xi, wi, 1, 1);
        km::sum_all(km::mul(yi, yi)).backward();
        return std::make_pair(xi.grad(), wi.grad());
    };
    auto [gx_s, gw_s] = run(false);
    auto [gx_p, gw_p] = run(true);
    set_parallel(true);
    CHECK(oracle::max_rel_diff(gx_s.data(), gx_p.data(), gx_s.size()) < 1e-14);
    CHECK(oracle::max_rel_diff(gw_s.data(), gw_p.data(), gw_s.size()) < 1e-14);
}

TEST_CASE("float32 instantiation works end to end") {
    km::Rng rng(61);
    auto x = km::randn<float>({2, 2, 4, 4}, rng, 1.0f, true);
    auto w = km::randn<float>({2, 2, 3, 3}, rng, 0.5f, true);
    auto y = km::conv2d(x, w, 1, 1);
    auto loss = km::mean_all(km::mul(y, y));
    loss.backward();
    CHECK(x.has_grad());
    CHECK(w.has_grad());
    double g = 0;
    for (float v : w.grad()) g += std::abs(v);
    CHECK(g > 0);
    (void)vals;
}
