// Times the serial kernels against the OpenMP set on the shapes the model
// actually hits, and reports the largest output disagreement while at it.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "km/kan.hpp"
#include "km/kernels.hpp"
#include "km/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using clk = std::chrono::steady_clock;

namespace {

std::vector<float> randv(std::size_t n, km::Rng& rng, float scale = 1.0f) {
    std::vector<float> v(n);
    for (auto& x : v) x = float(rng.normal()) * scale;
    return v;
}

// per-call milliseconds: warm once, then repeat until ~0.3 s is spent
double time_ms(const std::function<void()>& fn) {
    fn();
    int reps = 0;
    auto t0 = clk::now();
    double el = 0;
    while (el < 0.3 && reps < 1000) {
        fn();
        ++reps;
        el = std::chrono::duration<double>(clk::now() - t0).count();
    }
    return 1e3 * el / reps;
}

double max_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, double(std::abs(a[i] - b[i])));
    return m;
}

void row(const char* name, double ser, double par, double diff) {
    std::printf("%-28s %9.3f ms %9.3f ms %7.2fx   %.1e\n", name, ser, par, ser / par, diff);
}

}  // namespace

int main() {
    km::Rng rng(7);
#ifdef _OPENMP
    std::printf("openmp threads: %d\n", omp_get_max_threads());
#else
    std::printf("openmp threads: built without openmp\n");
#endif
    std::printf("%-28s %12s %12s %8s   %s\n", "kernel", "serial", "parallel", "speedup",
                "max diff");

    {
        int m = 256, k = 256, n = 256;
        auto a = randv(std::size_t(m) * k, rng), b = randv(std::size_t(k) * n, rng);
        std::vector<float> cs(std::size_t(m) * n), cp(cs.size());
        double ts = time_ms([&] { km::kern::serial::matmul(a.data(), b.data(), cs.data(), m, k, n, false, false, false); });
        double tp = time_ms([&] { km::kern::par::matmul(a.data(), b.data(), cp.data(), m, k, n, false, false, false); });
        row("matmul 256x256x256", ts, tp, max_diff(cs, cp));
    }
    {
        int n = 4, ci = 32, h = 64, w = 64, co = 64, kk = 3;
        auto x = randv(std::size_t(n) * ci * h * w, rng);
        auto wt = randv(std::size_t(co) * ci * kk * kk, rng, 0.1f);
        auto bias = randv(co, rng);
        std::vector<float> ys(std::size_t(n) * co * h * w), yp(ys.size());
        double ts = time_ms([&] { km::kern::serial::conv2d_fwd(x.data(), wt.data(), bias.data(), ys.data(), n, ci, h, w, co, kk, kk, 1, 1); });
        double tp = time_ms([&] { km::kern::par::conv2d_fwd(x.data(), wt.data(), bias.data(), yp.data(), n, ci, h, w, co, kk, kk, 1, 1); });
        row("conv2d 4x32x64x64 -> 64", ts, tp, max_diff(ys, yp));
    }
    {
        int n = 4, ci = 32, h = 64, w = 64, co = 64, kk = 3;
        auto x = randv(std::size_t(n) * ci * h * w, rng);
        auto gy = randv(std::size_t(n) * co * h * w, rng);
        std::vector<float> gws(std::size_t(co) * ci * kk * kk), gwp(gws.size());
        double ts = time_ms([&] { km::kern::serial::conv2d_bwd_weight(x.data(), gy.data(), gws.data(), n, ci, h, w, co, kk, kk, 1, 1); });
        double tp = time_ms([&] { km::kern::par::conv2d_bwd_weight(x.data(), gy.data(), gwp.data(), n, ci, h, w, co, kk, kk, 1, 1); });
        row("conv2d bwd weight", ts, tp, max_diff(gws, gwp));
    }
    {
        int n = 4, c = 64, h = 64, w = 64, kk = 7;
        auto x = randv(std::size_t(n) * c * h * w, rng);
        auto wt = randv(std::size_t(c) * kk * kk, rng, 0.1f);
        std::vector<float> ys(x.size()), yp(x.size());
        double ts = time_ms([&] { km::kern::serial::dwconv2d_fwd(x.data(), wt.data(), ys.data(), n, c, h, w, kk, kk, 1, 3); });
        double tp = time_ms([&] { km::kern::par::dwconv2d_fwd(x.data(), wt.data(), yp.data(), n, c, h, w, kk, kk, 1, 3); });
        row("dwconv2d 4x64x64x64 7x7", ts, tp, max_diff(ys, yp));
    }
    {
        int n = 4, l = 1024, e = 32, s = 16;
        auto a = randv(std::size_t(e) * s, rng);
        for (auto& v : a) v = -std::abs(v) - 0.05f;
        auto delta = randv(std::size_t(n) * l * e, rng);
        for (auto& v : delta) v = std::abs(v) * 0.5f + 0.05f;
        auto bs = randv(std::size_t(n) * l * s, rng), cs = randv(std::size_t(n) * l * s, rng);
        auto d = randv(e, rng), u = randv(std::size_t(n) * l * e, rng);
        std::vector<float> ys(std::size_t(n) * l * e), yp(ys.size());
        std::vector<float> h(std::size_t(n) * l * e * s);
        double ts = time_ms([&] { km::kern::serial::scan_fwd(a.data(), delta.data(), bs.data(), cs.data(), d.data(), u.data(), ys.data(), h.data(), n, l, e, s); });
        double tp = time_ms([&] { km::kern::par::scan_fwd(a.data(), delta.data(), bs.data(), cs.data(), d.data(), u.data(), yp.data(), h.data(), n, l, e, s); });
        row("scan 4x1024 e32 s16", ts, tp, max_diff(ys, yp));
    }
    {
        km::SplineGrid<float> g(3, 5, -1.0f, 1.0f);
        std::size_t count = 200000;
        auto x = randv(count, rng);
        std::vector<float> bs(count * g.nbasis()), bp(bs.size());
        std::vector<float> ds(bs.size()), dp(bs.size());
        double ts = time_ms([&] { km::kern::serial::spline_basis(g.knots.data(), int(g.knots.size()), g.degree, x.data(), count, bs.data(), ds.data()); });
        double tp = time_ms([&] { km::kern::par::spline_basis(g.knots.data(), int(g.knots.size()), g.degree, x.data(), count, bp.data(), dp.data()); });
        row("spline basis 200k deg 3", ts, tp, std::max(max_diff(bs, bp), max_diff(ds, dp)));
    }
    {
        std::size_t n = 1 << 21;
        auto x = randv(n, rng);
        std::vector<float> ys(n), yp(n);
        double ts = time_ms([&] { km::kern::serial::unary_fwd(km::kern::u_silu, x.data(), ys.data(), n); });
        double tp = time_ms([&] { km::kern::par::unary_fwd(km::kern::u_silu, x.data(), yp.data(), n); });
        row("silu 2M", ts, tp, max_diff(ys, yp));
    }
    return 0;
}
