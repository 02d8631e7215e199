#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

// Hand-rolled reference math for the tests. Deliberately written differently
// from the library kernels (pad-and-gather conv, recursive splines, plain
// per-step recurrence) so the two sides fail independently.

namespace oracle {

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <class T>
double max_abs_diff(const T* a, const T* b, std::size_t n) {
    double m = 0;
    for (std::size_t i = 0; i < n; ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

template <class T>
double max_rel_diff(const T* a, const T* b, std::size_t n) {
    double m = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = std::abs(double(a[i]) - double(b[i]));
        double s = std::max(1.0, std::max(std::abs(double(a[i])), std::abs(double(b[i]))));
        m = std::max(m, d / s);
    }
    return m;
}

// C = A_e * B_e with explicit transpose materialization
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, int m, int k,
                                  int n, bool ta, bool tb) {
    std::vector<double> ae(static_cast<std::size_t>(m) * k), be(static_cast<std::size_t>(k) * n);
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) ae[i * k + p] = ta ? a[p * m + i] : a[i * k + p];
    for (int p = 0; p < k; ++p)
        for (int j = 0; j < n; ++j) be[p * n + j] = tb ? b[j * k + p] : b[p * n + j];
    std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            for (int p = 0; p < k; ++p) c[i * n + j] += ae[i * k + p] * be[p * n + j];
    return c;
}

// zero-pads first, then gathers without bounds checks
inline std::vector<double> conv2d(const std::vector<double>& x, const std::vector<double>& w,
                                  const std::vector<double>* bias, int n, int ci, int h, int wd, int co,
                                  int kh, int kw, int stride, int pad) {
    int hp = h + 2 * pad, wp = wd + 2 * pad;
    std::vector<double> xp(static_cast<std::size_t>(n) * ci * hp * wp, 0.0);
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < ci; ++ic)
            for (int iy = 0; iy < h; ++iy)
                for (int ix = 0; ix < wd; ++ix)
                    xp[((static_cast<std::size_t>(in) * ci + ic) * hp + iy + pad) * wp + ix + pad] =
                        x[((static_cast<std::size_t>(in) * ci + ic) * h + iy) * wd + ix];
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (wd + 2 * pad - kw) / stride + 1;
    std::vector<double> y(static_cast<std::size_t>(n) * co * oh * ow, 0.0);
    for (int in = 0; in < n; ++in)
        for (int oc = 0; oc < co; ++oc)
            for (int y0 = 0; y0 < oh; ++y0)
                for (int x0 = 0; x0 < ow; ++x0) {
                    double s = bias ? (*bias)[oc] : 0.0;
                    for (int ic = 0; ic < ci; ++ic)
                        for (int r = 0; r < kh; ++r)
                            for (int q = 0; q < kw; ++q)
                                s += xp[((static_cast<std::size_t>(in) * ci + ic) * hp + y0 * stride + r) *
                                            wp +
                                        x0 * stride + q] *
                                     w[((static_cast<std::size_t>(oc) * ci + ic) * kh + r) * kw + q];
                    y[((static_cast<std::size_t>(in) * co + oc) * oh + y0) * ow + x0] = s;
                }
    return y;
}

inline std::vector<double> dwconv2d(const std::vector<double>& x, const std::vector<double>& w, int n,
                                    int c, int h, int wd, int kh, int kw, int stride, int pad) {
    // one conv2d per channel with a 1-channel kernel
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (wd + 2 * pad - kw) / stride + 1;
    std::vector<double> y(static_cast<std::size_t>(n) * c * oh * ow);
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < c; ++ic) {
            std::vector<double> xc(x.begin() + (static_cast<std::size_t>(in) * c + ic) * h * wd,
                                   x.begin() + (static_cast<std::size_t>(in) * c + ic + 1) * h * wd);
            std::vector<double> wc(w.begin() + static_cast<std::size_t>(ic) * kh * kw,
                                   w.begin() + static_cast<std::size_t>(ic + 1) * kh * kw);
            auto yc = conv2d(xc, wc, nullptr, 1, 1, h, wd, 1, kh, kw, stride, pad);
            std::copy(yc.begin(), yc.end(),
                      y.begin() + (static_cast<std::size_t>(in) * c + ic) * oh * ow);
        }
    return y;
}

// per-step recurrence, state kept explicitly
inline std::vector<double> scan(const std::vector<double>& a, const std::vector<double>& delta,
                                const std::vector<double>& bs, const std::vector<double>& cs,
                                const std::vector<double>& dvec, const std::vector<double>& u, int n, int l,
                                int e, int s) {
    std::vector<double> y(static_cast<std::size_t>(n) * l * e);
    for (int in = 0; in < n; ++in) {
        std::vector<double> h(static_cast<std::size_t>(e) * s, 0.0);
        for (int t = 0; t < l; ++t)
            for (int ie = 0; ie < e; ++ie) {
                std::size_t te = (static_cast<std::size_t>(in) * l + t) * e + ie;
                double out = dvec[ie] * u[te];
                for (int is = 0; is < s; ++is) {
                    double abar = std::exp(delta[te] * a[ie * s + is]);
                    h[ie * s + is] = abar * h[ie * s + is] +
                                     delta[te] * bs[(static_cast<std::size_t>(in) * l + t) * s + is] * u[te];
                    out += cs[(static_cast<std::size_t>(in) * l + t) * s + is] * h[ie * s + is];
                }
                y[te] = out;
            }
    }
    return y;
}

// recursive Cox-de Boor; the final knot closes the last interval
inline double bspline(const std::vector<double>& t, int i, int d, double x) {
    if (d == 0) {
        bool last = x == t.back() && i == static_cast<int>(t.size()) - 2;
        return (x >= t[i] && x < t[i + 1]) || last ? 1.0 : 0.0;
    }
    double left = 0, right = 0;
    if (t[i + d] > t[i]) left = (x - t[i]) / (t[i + d] - t[i]) * bspline(t, i, d - 1, x);
    if (t[i + d + 1] > t[i + 1]) right = (t[i + d + 1] - x) / (t[i + d + 1] - t[i + 1]) * bspline(t, i + 1, d - 1, x);
    return left + right;
}

inline double bspline_deriv(const std::vector<double>& t, int i, int d, double x) {
    if (d == 0) return 0.0;
    double left = 0, right = 0;
    if (t[i + d] > t[i]) left = bspline(t, i, d - 1, x) / (t[i + d] - t[i]);
    if (t[i + d + 1] > t[i + 1]) right = bspline(t, i + 1, d - 1, x) / (t[i + d + 1] - t[i + 1]);
    return d * (left - right);
}

}  // namespace oracle
