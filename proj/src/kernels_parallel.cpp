#include <cmath>
#include <cstring>
#include <vector>

#include "km/kernels.hpp"

// OpenMP kernels. Threads only ever split independent output elements and each
// element keeps the reference accumulation order, so results do not depend on
// the thread count.

#ifdef _OPENMP
#define KM_OMP(x) _Pragma(#x)
#else
#define KM_OMP(x)
#endif

namespace km::kern::par {

template <class T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n, bool ta, bool tb, bool accumulate) {
    if (!accumulate) std::memset(c, 0, sizeof(T) * static_cast<std::size_t>(m) * n);
    if (!ta && !tb) {
        KM_OMP(omp parallel for schedule(static))
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                T av = a[i * k + p];
                const T* br = b + static_cast<std::size_t>(p) * n;
                T* cr = c + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) cr[j] += av * br[j];
            }
    } else if (!ta && tb) {
        KM_OMP(omp parallel for schedule(static))
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                const T* ar = a + static_cast<std::size_t>(i) * k;
                const T* br = b + static_cast<std::size_t>(j) * k;
                T s = 0;
                for (int p = 0; p < k; ++p) s += ar[p] * br[p];
                c[static_cast<std::size_t>(i) * n + j] += s;
            }
    } else if (ta && !tb) {
        KM_OMP(omp parallel for schedule(static))
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                T av = a[static_cast<std::size_t>(p) * m + i];
                const T* br = b + static_cast<std::size_t>(p) * n;
                T* cr = c + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) cr[j] += av * br[j];
            }
    } else {
        KM_OMP(omp parallel for schedule(static))
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                T s = 0;
                for (int p = 0; p < k; ++p) s += a[static_cast<std::size_t>(p) * m + i] * b[static_cast<std::size_t>(j) * k + p];
                c[static_cast<std::size_t>(i) * n + j] += s;
            }
    }
}

template <class T>
void conv2d_fwd(const T* x, const T* w, const T* bias, T* y, int n, int ci, int h, int wd, int co, int kh,
                int kw, int stride, int pad) {
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (wd + 2 * pad - kw) / stride + 1;
    KM_OMP(omp parallel for collapse(2) schedule(static))
    for (int in = 0; in < n; ++in)
        for (int oc = 0; oc < co; ++oc)
            for (int y0 = 0; y0 < oh; ++y0) {
                T* yr = y + ((static_cast<std::size_t>(in) * co + oc) * oh + y0) * ow;
                T bv = bias ? bias[oc] : T(0);
                for (int x0 = 0; x0 < ow; ++x0) yr[x0] = bv;
                for (int ic = 0; ic < ci; ++ic)
                    for (int r = 0; r < kh; ++r) {
                        int iy = y0 * stride - pad + r;
                        if (iy < 0 || iy >= h) continue;
                        const T* xr = x + ((static_cast<std::size_t>(in) * ci + ic) * h + iy) * wd;
                        const T* wr = w + ((static_cast<std::size_t>(oc) * ci + ic) * kh + r) * kw;
                        for (int q = 0; q < kw; ++q) {
                            T wv = wr[q];
                            // x0*stride - pad + q must land in [0, wd)
                            int lo = 0;
                            while (lo < ow && lo * stride - pad + q < 0) ++lo;
                            int hi = ow;
                            while (hi > lo && (hi - 1) * stride - pad + q >= wd) --hi;
                            for (int x0 = lo; x0 < hi; ++x0) yr[x0] += wv * xr[x0 * stride - pad + q];
                        }
                    }
            }
}

template <class T>
void conv2d_bwd_input(const T* gy, const T* w, T* gx, int n, int ci, int h, int wd, int co, int kh, int kw,
                      int stride, int pad) {
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (wd + 2 * pad - kw) / stride + 1;
    KM_OMP(omp parallel for collapse(2) schedule(static))
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < ci; ++ic)
            for (int oc = 0; oc < co; ++oc)
                for (int r = 0; r < kh; ++r)
                    for (int q = 0; q < kw; ++q) {
                        T wv = w[((static_cast<std::size_t>(oc) * ci + ic) * kh + r) * kw + q];
                        for (int y0 = 0; y0 < oh; ++y0) {
                            int iy = y0 * stride - pad + r;
                            if (iy < 0 || iy >= h) continue;
                            const T* gr = gy + ((static_cast<std::size_t>(in) * co + oc) * oh + y0) * ow;
                            T* xr = gx + ((static_cast<std::size_t>(in) * ci + ic) * h + iy) * wd;
                            int lo = 0;
                            while (lo < ow && lo * stride - pad + q < 0) ++lo;
                            int hi = ow;
                            while (hi > lo && (hi - 1) * stride - pad + q >= wd) --hi;
                            for (int x0 = lo; x0 < hi; ++x0) xr[x0 * stride - pad + q] += gr[x0] * wv;
                        }
                    }
}

template <class T>
void conv2d_bwd_weight(const T* x, const T* gy, T* gw, int n, int ci, int h, int wd, int co, int kh, int kw,
                       int stride, int pad) {
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (wd + 2 * pad - kw) / stride + 1;
    KM_OMP(omp parallel for collapse(2) schedule(static))
    for (int oc = 0; oc < co; ++oc)
        for (int ic = 0; ic < ci; ++ic)
            for (int r = 0; r < kh; ++r)
                for (int q = 0; q < kw; ++q) {
                    T s = 0;
                    for (int in = 0; in < n; ++in)
                        for (int y0 = 0; y0 < oh; ++y0) {
                            int iy = y0 * stride - pad + r;
                            if (iy < 0 || iy >= h) continue;
                            const T* gr = gy + ((static_cast<std::size_t>(in) * co + oc) * oh + y0) * ow;
                            const T* xr = x + ((static_cast<std::size_t>(in) * ci + ic) * h + iy) * wd;
                            for (int x0 = 0; x0 < ow; ++x0) {
                                int ix = x0 * stride - pad + q;
                                if (ix < 0 || ix >= wd) continue;
                                s += gr[x0] * xr[ix];
                            }
                        }
                    gw[((static_cast<std::size_t>(oc) * ci + ic) * kh + r) * kw + q] += s;
                }
}

template <class T>
void conv2d_bwd_bias(const T* gy, T* gb, int n, int co, int oh, int ow) {
    KM_OMP(omp parallel for schedule(static))
    for (int oc = 0; oc < co; ++oc) {
        T s = 0;
        for (int in = 0; in < n; ++in) {
            const T* p = gy + (static_cast<std::size_t>(in) * co + oc) * oh * ow;
            for (int i = 0; i < oh * ow; ++i) s += p[i];
        }
        gb[oc] += s;
    }
}

template <class T>
void dwconv2d_fwd(const T* x, const T* w, T* y, int n, int c, int h, int wd, int kh, int kw, int stride,
                  int pad) {
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (wd + 2 * pad - kw) / stride + 1;
    KM_OMP(omp parallel for collapse(2) schedule(static))
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < c; ++ic)
            for (int y0 = 0; y0 < oh; ++y0) {
                T* yr = y + ((static_cast<std::size_t>(in) * c + ic) * oh + y0) * ow;
                for (int x0 = 0; x0 < ow; ++x0) yr[x0] = T(0);
                for (int r = 0; r < kh; ++r) {
                    int iy = y0 * stride - pad + r;
                    if (iy < 0 || iy >= h) continue;
                    const T* xr = x + ((static_cast<std::size_t>(in) * c + ic) * h + iy) * wd;
                    const T* wr = w + (static_cast<std::size_t>(ic) * kh + r) * kw;
                    for (int q = 0; q < kw; ++q) {
                        T wv = wr[q];
                        int lo = 0;
                        while (lo < ow && lo * stride - pad + q < 0) ++lo;
                        int hi = ow;
                        while (hi > lo && (hi - 1) * stride - pad + q >= wd) --hi;
                        for (int x0 = lo; x0 < hi; ++x0) yr[x0] += wv * xr[x0 * stride - pad + q];
                    }
                }
            }
}

template <class T>
void dwconv2d_bwd_input(const T* gy, const T* w, T* gx, int n, int c, int h, int wd, int kh, int kw,
                        int stride, int pad) {
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (wd + 2 * pad - kw) / stride + 1;
    KM_OMP(omp parallel for collapse(2) schedule(static))
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < c; ++ic)
            for (int r = 0; r < kh; ++r)
                for (int q = 0; q < kw; ++q) {
                    T wv = w[(static_cast<std::size_t>(ic) * kh + r) * kw + q];
                    for (int y0 = 0; y0 < oh; ++y0) {
                        int iy = y0 * stride - pad + r;
                        if (iy < 0 || iy >= h) continue;
                        const T* gr = gy + ((static_cast<std::size_t>(in) * c + ic) * oh + y0) * ow;
                        T* xr = gx + ((static_cast<std::size_t>(in) * c + ic) * h + iy) * wd;
                        int lo = 0;
                        while (lo < ow && lo * stride - pad + q < 0) ++lo;
                        int hi = ow;
                        while (hi > lo && (hi - 1) * stride - pad + q >= wd) --hi;
                        for (int x0 = lo; x0 < hi; ++x0) xr[x0 * stride - pad + q] += gr[x0] * wv;
                    }
                }
}

template <class T>
void dwconv2d_bwd_weight(const T* x, const T* gy, T* gw, int n, int c, int h, int wd, int kh, int kw,
                         int stride, int pad) {
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (wd + 2 * pad - kw) / stride + 1;
    KM_OMP(omp parallel for schedule(static))
    for (int ic = 0; ic < c; ++ic)
        for (int r = 0; r < kh; ++r)
            for (int q = 0; q < kw; ++q) {
                T s = 0;
                for (int in = 0; in < n; ++in)
                    for (int y0 = 0; y0 < oh; ++y0) {
                        int iy = y0 * stride - pad + r;
                        if (iy < 0 || iy >= h) continue;
                        const T* gr = gy + ((static_cast<std::size_t>(in) * c + ic) * oh + y0) * ow;
                        const T* xr = x + ((static_cast<std::size_t>(in) * c + ic) * h + iy) * wd;
                        for (int x0 = 0; x0 < ow; ++x0) {
                            int ix = x0 * stride - pad + q;
                            if (ix < 0 || ix >= wd) continue;
                            s += gr[x0] * xr[ix];
                        }
                    }
                gw[(static_cast<std::size_t>(ic) * kh + r) * kw + q] += s;
            }
}

template <class T>
void maxpool2_fwd(const T* x, T* y, std::int64_t* arg, int n, int c, int h, int wd) {
    int oh = h / 2, ow = wd / 2;
    KM_OMP(omp parallel for schedule(static))
    for (int p = 0; p < n * c; ++p) {
        const T* xp = x + static_cast<std::size_t>(p) * h * wd;
        for (int y0 = 0; y0 < oh; ++y0)
            for (int x0 = 0; x0 < ow; ++x0) {
                std::int64_t best = static_cast<std::int64_t>(2 * y0) * wd + 2 * x0;
                T bv = xp[best];
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        std::int64_t idx = static_cast<std::int64_t>(2 * y0 + dy) * wd + (2 * x0 + dx);
                        if (xp[idx] > bv) {
                            bv = xp[idx];
                            best = idx;
                        }
                    }
                std::size_t o = (static_cast<std::size_t>(p) * oh + y0) * ow + x0;
                y[o] = bv;
                arg[o] = static_cast<std::int64_t>(p) * h * wd + best;
            }
    }
}

template <class T>
void maxpool2_bwd(const T* gy, const std::int64_t* arg, T* gx, int planes, int oh, int ow) {
    // argmax indices stay inside their own plane, so planes are independent
    KM_OMP(omp parallel for schedule(static))
    for (int p = 0; p < planes; ++p) {
        std::size_t base = static_cast<std::size_t>(p) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) gx[arg[base + i]] += gy[base + i];
    }
}

template <class T>
void avgpool2c_fwd(const T* x, T* y, int n, int c, int h, int wd) {
    int oh = (h + 1) / 2, ow = (wd + 1) / 2;
    KM_OMP(omp parallel for schedule(static))
    for (int p = 0; p < n * c; ++p) {
        const T* xp = x + static_cast<std::size_t>(p) * h * wd;
        T* yp = y + static_cast<std::size_t>(p) * oh * ow;
        for (int y0 = 0; y0 < oh; ++y0)
            for (int x0 = 0; x0 < ow; ++x0) {
                int ry = std::min(2 * y0 + 2, h) - 2 * y0;
                int rx = std::min(2 * x0 + 2, wd) - 2 * x0;
                T s = 0;
                for (int dy = 0; dy < ry; ++dy)
                    for (int dx = 0; dx < rx; ++dx) s += xp[(2 * y0 + dy) * wd + (2 * x0 + dx)];
                yp[y0 * ow + x0] = s / static_cast<T>(ry * rx);
            }
    }
}

template <class T>
void avgpool2c_bwd(const T* gy, T* gx, int n, int c, int h, int wd) {
    int oh = (h + 1) / 2, ow = (wd + 1) / 2;
    KM_OMP(omp parallel for schedule(static))
    for (int p = 0; p < n * c; ++p) {
        const T* gp = gy + static_cast<std::size_t>(p) * oh * ow;
        T* xp = gx + static_cast<std::size_t>(p) * h * wd;
        for (int y0 = 0; y0 < oh; ++y0)
            for (int x0 = 0; x0 < ow; ++x0) {
                int ry = std::min(2 * y0 + 2, h) - 2 * y0;
                int rx = std::min(2 * x0 + 2, wd) - 2 * x0;
                T g = gp[y0 * ow + x0] / static_cast<T>(ry * rx);
                for (int dy = 0; dy < ry; ++dy)
                    for (int dx = 0; dx < rx; ++dx) xp[(2 * y0 + dy) * wd + (2 * x0 + dx)] += g;
            }
    }
}

template <class T>
void upsample2x_fwd(const T* x, T* y, int n, int c, int h, int wd) {
    int oh = 2 * h, ow = 2 * wd;
    KM_OMP(omp parallel for schedule(static))
    for (int p = 0; p < n * c; ++p) {
        const T* xp = x + static_cast<std::size_t>(p) * h * wd;
        T* yp = y + static_cast<std::size_t>(p) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
            T sy = (T(oy) + T(0.5)) * T(0.5) - T(0.5);
            int y0 = static_cast<int>(std::floor(sy));
            T ry = sy - T(y0);
            int y0c = std::min(std::max(y0, 0), h - 1);
            int y1c = std::min(std::max(y0 + 1, 0), h - 1);
            for (int ox = 0; ox < ow; ++ox) {
                T sx = (T(ox) + T(0.5)) * T(0.5) - T(0.5);
                int x0 = static_cast<int>(std::floor(sx));
                T rx = sx - T(x0);
                int x0c = std::min(std::max(x0, 0), wd - 1);
                int x1c = std::min(std::max(x0 + 1, 0), wd - 1);
                yp[oy * ow + ox] = (T(1) - ry) * ((T(1) - rx) * xp[y0c * wd + x0c] + rx * xp[y0c * wd + x1c]) +
                                   ry * ((T(1) - rx) * xp[y1c * wd + x0c] + rx * xp[y1c * wd + x1c]);
            }
        }
    }
}

template <class T>
void upsample2x_bwd(const T* gy, T* gx, int n, int c, int h, int wd) {
    int oh = 2 * h, ow = 2 * wd;
    KM_OMP(omp parallel for schedule(static))
    for (int p = 0; p < n * c; ++p) {
        const T* gp = gy + static_cast<std::size_t>(p) * oh * ow;
        T* xp = gx + static_cast<std::size_t>(p) * h * wd;
        for (int oy = 0; oy < oh; ++oy) {
            T sy = (T(oy) + T(0.5)) * T(0.5) - T(0.5);
            int y0 = static_cast<int>(std::floor(sy));
            T ry = sy - T(y0);
            int y0c = std::min(std::max(y0, 0), h - 1);
            int y1c = std::min(std::max(y0 + 1, 0), h - 1);
            for (int ox = 0; ox < ow; ++ox) {
                T sx = (T(ox) + T(0.5)) * T(0.5) - T(0.5);
                int x0 = static_cast<int>(std::floor(sx));
                T rx = sx - T(x0);
                int x0c = std::min(std::max(x0, 0), wd - 1);
                int x1c = std::min(std::max(x0 + 1, 0), wd - 1);
                T g = gp[oy * ow + ox];
                xp[y0c * wd + x0c] += (T(1) - ry) * (T(1) - rx) * g;
                xp[y0c * wd + x1c] += (T(1) - ry) * rx * g;
                xp[y1c * wd + x0c] += ry * (T(1) - rx) * g;
                xp[y1c * wd + x1c] += ry * rx * g;
            }
        }
    }
}

template <class T>
void bn_stats(const T* x, T* mean, T* var, int n, int c, int h, int wd) {
    std::size_t plane = static_cast<std::size_t>(h) * wd;
    KM_OMP(omp parallel for schedule(static))
    for (int ic = 0; ic < c; ++ic) {
        T s = 0;
        for (int in = 0; in < n; ++in) {
            const T* p = x + (static_cast<std::size_t>(in) * c + ic) * plane;
            for (std::size_t i = 0; i < plane; ++i) s += p[i];
        }
        T m = s / static_cast<T>(static_cast<std::size_t>(n) * plane);
        T v = 0;
        for (int in = 0; in < n; ++in) {
            const T* p = x + (static_cast<std::size_t>(in) * c + ic) * plane;
            for (std::size_t i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
        }
        mean[ic] = m;
        var[ic] = v / static_cast<T>(static_cast<std::size_t>(n) * plane);
    }
}

template <class T>
void bn_fwd(const T* x, const T* mean, const T* var, const T* gamma, const T* beta, T* y, int n, int c,
            int h, int wd, T eps) {
    std::size_t plane = static_cast<std::size_t>(h) * wd;
    KM_OMP(omp parallel for collapse(2) schedule(static))
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < c; ++ic) {
            T rstd = T(1) / std::sqrt(var[ic] + eps);
            T g = gamma[ic], b = beta[ic], m = mean[ic];
            const T* xp = x + (static_cast<std::size_t>(in) * c + ic) * plane;
            T* yp = y + (static_cast<std::size_t>(in) * c + ic) * plane;
            for (std::size_t i = 0; i < plane; ++i) yp[i] = g * (xp[i] - m) * rstd + b;
        }
}

template <class T>
void bn_bwd_train(const T* x, const T* mean, const T* var, const T* gamma, const T* gy, T* gx, T* ggamma,
                  T* gbeta, int n, int c, int h, int wd, T eps) {
    std::size_t plane = static_cast<std::size_t>(h) * wd;
    T cnt = static_cast<T>(static_cast<std::size_t>(n) * plane);
    KM_OMP(omp parallel for schedule(static))
    for (int ic = 0; ic < c; ++ic) {
        T m = mean[ic];
        T rstd = T(1) / std::sqrt(var[ic] + eps);
        T sg = 0, sgx = 0;
        for (int in = 0; in < n; ++in) {
            const T* xp = x + (static_cast<std::size_t>(in) * c + ic) * plane;
            const T* gp = gy + (static_cast<std::size_t>(in) * c + ic) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                sg += gp[i];
                sgx += gp[i] * (xp[i] - m) * rstd;
            }
        }
        ggamma[ic] += sgx;
        gbeta[ic] += sg;
        T k1 = sg / cnt, k2 = sgx / cnt, gm = gamma[ic];
        for (int in = 0; in < n; ++in) {
            const T* xp = x + (static_cast<std::size_t>(in) * c + ic) * plane;
            const T* gp = gy + (static_cast<std::size_t>(in) * c + ic) * plane;
            T* op = gx + (static_cast<std::size_t>(in) * c + ic) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                T xh = (xp[i] - m) * rstd;
                op[i] += gm * rstd * (gp[i] - k1 - xh * k2);
            }
        }
    }
}

template <class T>
void bn_bwd_eval(const T* x, const T* mean, const T* var, const T* gamma, const T* gy, T* gx, T* ggamma,
                 T* gbeta, int n, int c, int h, int wd, T eps) {
    std::size_t plane = static_cast<std::size_t>(h) * wd;
    KM_OMP(omp parallel for schedule(static))
    for (int ic = 0; ic < c; ++ic) {
        T m = mean[ic];
        T rstd = T(1) / std::sqrt(var[ic] + eps);
        T gm = gamma[ic];
        T sg = 0, sgx = 0;
        for (int in = 0; in < n; ++in) {
            const T* xp = x + (static_cast<std::size_t>(in) * c + ic) * plane;
            const T* gp = gy + (static_cast<std::size_t>(in) * c + ic) * plane;
            T* op = gx + (static_cast<std::size_t>(in) * c + ic) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                sg += gp[i];
                sgx += gp[i] * (xp[i] - m) * rstd;
                op[i] += gp[i] * gm * rstd;
            }
        }
        ggamma[ic] += sgx;
        gbeta[ic] += sg;
    }
}

template <class T>
void ln_fwd(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd, int rows, int e, T eps) {
    KM_OMP(omp parallel for schedule(static))
    for (int r = 0; r < rows; ++r) {
        const T* xp = x + static_cast<std::size_t>(r) * e;
        T* yp = y + static_cast<std::size_t>(r) * e;
        T s = 0;
        for (int j = 0; j < e; ++j) s += xp[j];
        T m = s / T(e);
        T v = 0;
        for (int j = 0; j < e; ++j) v += (xp[j] - m) * (xp[j] - m);
        T rs = T(1) / std::sqrt(v / T(e) + eps);
        mean[r] = m;
        rstd[r] = rs;
        for (int j = 0; j < e; ++j) yp[j] = gamma[j] * (xp[j] - m) * rs + beta[j];
    }
}

template <class T>
void ln_bwd(const T* x, const T* gamma, const T* mean, const T* rstd, const T* gy, T* gx, T* ggamma,
            T* gbeta, int rows, int e) {
    KM_OMP(omp parallel for schedule(static))
    for (int r = 0; r < rows; ++r) {
        const T* xp = x + static_cast<std::size_t>(r) * e;
        const T* gp = gy + static_cast<std::size_t>(r) * e;
        T* op = gx + static_cast<std::size_t>(r) * e;
        T m = mean[r], rs = rstd[r];
        T s1 = 0, s2 = 0;
        for (int j = 0; j < e; ++j) {
            T g = gp[j] * gamma[j];
            T xh = (xp[j] - m) * rs;
            s1 += g;
            s2 += g * xh;
        }
        for (int j = 0; j < e; ++j) {
            T g = gp[j] * gamma[j];
            T xh = (xp[j] - m) * rs;
            op[j] += rs * (g - s1 / T(e) - xh * s2 / T(e));
        }
    }
    KM_OMP(omp parallel for schedule(static))
    for (int j = 0; j < e; ++j) {
        T sg = 0, sb = 0;
        for (int r = 0; r < rows; ++r) {
            T xh = (x[static_cast<std::size_t>(r) * e + j] - mean[r]) * rstd[r];
            sg += gy[static_cast<std::size_t>(r) * e + j] * xh;
            sb += gy[static_cast<std::size_t>(r) * e + j];
        }
        ggamma[j] += sg;
        gbeta[j] += sb;
    }
}

template <class T>
void scan_fwd(const T* a, const T* delta, const T* bs, const T* cs, const T* dvec, const T* u, T* y,
              T* hbuf, int n, int l, int e, int s) {
    KM_OMP(omp parallel for collapse(2) schedule(static))
    for (int in = 0; in < n; ++in)
        for (int ie = 0; ie < e; ++ie) {
            for (int t = 0; t < l; ++t) {
                std::size_t te = (static_cast<std::size_t>(in) * l + t) * e + ie;
                T d = delta[te];
                T uv = u[te];
                T acc = 0;
                T* hc = hbuf + ((static_cast<std::size_t>(in) * l + t) * e + ie) * s;
                const T* hp = t > 0 ? hbuf + ((static_cast<std::size_t>(in) * l + t - 1) * e + ie) * s : nullptr;
                const T* bt = bs + (static_cast<std::size_t>(in) * l + t) * s;
                const T* ct = cs + (static_cast<std::size_t>(in) * l + t) * s;
                for (int is = 0; is < s; ++is) {
                    T ab = std::exp(d * a[ie * s + is]);
                    T hv = ab * (hp ? hp[is] : T(0)) + d * bt[is] * uv;
                    hc[is] = hv;
                    acc += ct[is] * hv;
                }
                y[te] = acc + dvec[ie] * uv;
            }
        }
}

template <class T>
void scan_bwd(const T* a, const T* delta, const T* bs, const T* cs, const T* dvec, const T* u,
              const T* hbuf, const T* gy, T* ga, T* gdelta, T* gb, T* gc, T* gd, T* gu, int n, int l, int e,
              int s) {
    std::vector<T> ga_part(static_cast<std::size_t>(n) * e * s, T(0));
    std::vector<T> gd_part(static_cast<std::size_t>(n) * e, T(0));
    std::vector<T> dh(static_cast<std::size_t>(n) * e * s);
    KM_OMP(omp parallel for schedule(static))
    for (int in = 0; in < n; ++in) {
        T* gap = ga_part.data() + static_cast<std::size_t>(in) * e * s;
        T* gdp = gd_part.data() + static_cast<std::size_t>(in) * e;
        T* dhp = dh.data() + static_cast<std::size_t>(in) * e * s;
        for (int i = 0; i < e * s; ++i) dhp[i] = 0;
        for (int t = l - 1; t >= 0; --t) {
            std::size_t row = static_cast<std::size_t>(in) * l + t;
            const T* bt = bs + row * s;
            const T* ct = cs + row * s;
            for (int ie = 0; ie < e; ++ie) {
                std::size_t te = row * e + ie;
                T gyv = gy[te];
                T d = delta[te];
                T uv = u[te];
                const T* ht = hbuf + te * s;
                const T* hm = t > 0 ? hbuf + ((row - 1) * e + ie) * s : nullptr;
                gu[te] += gyv * dvec[ie];
                gdp[ie] += gyv * uv;
                T dacc = 0;
                T guv = 0;
                for (int is = 0; is < s; ++is) {
                    gc[row * s + is] += gyv * ht[is];
                    T dhv = dhp[ie * s + is] + gyv * ct[is];
                    T av = a[ie * s + is];
                    T ab = std::exp(d * av);
                    T hprev = hm ? hm[is] : T(0);
                    gap[ie * s + is] += dhv * ab * d * hprev;
                    dacc += dhv * (ab * av * hprev + bt[is] * uv);
                    gb[row * s + is] += dhv * d * uv;
                    guv += dhv * d * bt[is];
                    dhp[ie * s + is] = dhv * ab;
                }
                gdelta[te] += dacc;
                gu[te] += guv;
            }
        }
    }
    for (int in = 0; in < n; ++in) {
        for (int i = 0; i < e * s; ++i) ga[i] += ga_part[static_cast<std::size_t>(in) * e * s + i];
        for (int ie = 0; ie < e; ++ie) gd[ie] += gd_part[static_cast<std::size_t>(in) * e + ie];
    }
}

template <class T>
void spline_basis(const T* knots, int nknots, int deg, const T* x, std::size_t count, T* bas, T* dbas) {
    int nb = nknots - 1 - deg;
    std::int64_t cnt = static_cast<std::int64_t>(count);
    KM_OMP(omp parallel for schedule(static))
    for (std::int64_t ix = 0; ix < cnt; ++ix) {
        T cur[64], nxt[64], prev[64];
        T v = x[ix];
        int nspan = nknots - 1;
        for (int i = 0; i < nspan; ++i) {
            bool in = (v >= knots[i] && v < knots[i + 1]) || (i == nspan - 1 && v == knots[nspan]);
            cur[i] = in ? T(1) : T(0);
        }
        for (int d = 1; d <= deg; ++d) {
            if (d == deg)
                for (int i = 0; i < nspan - d + 1; ++i) prev[i] = cur[i];
            for (int i = 0; i < nspan - d; ++i) {
                T left = 0, right = 0;
                T dl = knots[i + d] - knots[i];
                T dr = knots[i + d + 1] - knots[i + 1];
                if (dl > T(0)) left = (v - knots[i]) / dl * cur[i];
                if (dr > T(0)) right = (knots[i + d + 1] - v) / dr * cur[i + 1];
                nxt[i] = left + right;
            }
            for (int i = 0; i < nspan - d; ++i) cur[i] = nxt[i];
        }
        for (int i = 0; i < nb; ++i) bas[ix * nb + i] = cur[i];
        if (dbas) {
            for (int i = 0; i < nb; ++i) {
                if (deg == 0) {
                    dbas[ix * nb + i] = 0;
                    continue;
                }
                T left = 0, right = 0;
                T dl = knots[i + deg] - knots[i];
                T dr = knots[i + deg + 1] - knots[i + 1];
                if (dl > T(0)) left = prev[i] / dl;
                if (dr > T(0)) right = prev[i + 1] / dr;
                dbas[ix * nb + i] = T(deg) * (left - right);
            }
        }
    }
}

template <class T>
void unary_fwd(int kind, const T* x, T* y, std::size_t n) {
    std::int64_t cnt = static_cast<std::int64_t>(n);
    switch (kind) {
        case u_identity:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) y[i] = x[i];
            break;
        case u_relu:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
            break;
        case u_tanh:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) y[i] = std::tanh(x[i]);
            break;
        case u_softplus:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) y[i] = softplus_scalar(x[i]);
            break;
        case u_gelu:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) y[i] = gelu_scalar(x[i]);
            break;
        case u_silu:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) y[i] = x[i] * sigmoid_scalar(x[i]);
            break;
        case u_sigmoid:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) y[i] = sigmoid_scalar(x[i]);
            break;
        case u_exp:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) y[i] = std::exp(x[i]);
            break;
        case u_log:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) y[i] = std::log(x[i]);
            break;
        case u_neg:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) y[i] = -x[i];
            break;
    }
}

template <class T>
void unary_bwd(int kind, const T* x, const T* y, const T* gy, T* gx, std::size_t n) {
    const T c = T(0.7978845608028653558798921198687);
    std::int64_t cnt = static_cast<std::int64_t>(n);
    switch (kind) {
        case u_identity:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) gx[i] += gy[i];
            break;
        case u_relu:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) gx[i] += x[i] > T(0) ? gy[i] : T(0);
            break;
        case u_tanh:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) gx[i] += gy[i] * (T(1) - y[i] * y[i]);
            break;
        case u_softplus:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) gx[i] += gy[i] * sigmoid_scalar(x[i]);
            break;
        case u_gelu:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) {
                T xi = x[i];
                T t = std::tanh(c * (xi + T(0.044715) * xi * xi * xi));
                T dt = (T(1) - t * t) * c * (T(1) + T(3) * T(0.044715) * xi * xi);
                gx[i] += gy[i] * (T(0.5) * (T(1) + t) + T(0.5) * xi * dt);
            }
            break;
        case u_silu:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) {
                T s = sigmoid_scalar(x[i]);
                gx[i] += gy[i] * s * (T(1) + x[i] * (T(1) - s));
            }
            break;
        case u_sigmoid:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) gx[i] += gy[i] * y[i] * (T(1) - y[i]);
            break;
        case u_exp:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) gx[i] += gy[i] * y[i];
            break;
        case u_log:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) gx[i] += gy[i] / x[i];
            break;
        case u_neg:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) gx[i] -= gy[i];
            break;
    }
}

template <class T>
void binary_fwd(int kind, const T* a, const T* b, T* y, std::size_t n) {
    std::int64_t cnt = static_cast<std::int64_t>(n);
    switch (kind) {
        case b_add:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) y[i] = a[i] + b[i];
            break;
        case b_sub:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) y[i] = a[i] - b[i];
            break;
        case b_mul:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) y[i] = a[i] * b[i];
            break;
        case b_div:
            KM_OMP(omp parallel for schedule(static))
            for (std::int64_t i = 0; i < cnt; ++i) y[i] = a[i] / b[i];
            break;
    }
}

template <class T>
void acc(const T* a, T* out, std::size_t n) {
    std::int64_t cnt = static_cast<std::int64_t>(n);
    KM_OMP(omp parallel for schedule(static))
    for (std::int64_t i = 0; i < cnt; ++i) out[i] += a[i];
}

template <class T>
void acc_scaled(T s, const T* a, T* out, std::size_t n) {
    std::int64_t cnt = static_cast<std::int64_t>(n);
    KM_OMP(omp parallel for schedule(static))
    for (std::int64_t i = 0; i < cnt; ++i) out[i] += s * a[i];
}

template <class T>
void acc_mul(const T* a, const T* b, T* out, std::size_t n) {
    std::int64_t cnt = static_cast<std::int64_t>(n);
    KM_OMP(omp parallel for schedule(static))
    for (std::int64_t i = 0; i < cnt; ++i) out[i] += a[i] * b[i];
}

#define KM_INSTANTIATE(T)                                                                                  \
    template void matmul<T>(const T*, const T*, T*, int, int, int, bool, bool, bool);                     \
    template void conv2d_fwd<T>(const T*, const T*, const T*, T*, int, int, int, int, int, int, int, int, \
                                int);                                                                     \
    template void conv2d_bwd_input<T>(const T*, const T*, T*, int, int, int, int, int, int, int, int,     \
                                      int);                                                               \
    template void conv2d_bwd_weight<T>(const T*, const T*, T*, int, int, int, int, int, int, int, int,    \
                                       int);                                                              \
    template void conv2d_bwd_bias<T>(const T*, T*, int, int, int, int);                                   \
    template void dwconv2d_fwd<T>(const T*, const T*, T*, int, int, int, int, int, int, int, int);        \
    template void dwconv2d_bwd_input<T>(const T*, const T*, T*, int, int, int, int, int, int, int, int);  \
    template void dwconv2d_bwd_weight<T>(const T*, const T*, T*, int, int, int, int, int, int, int, int); \
    template void maxpool2_fwd<T>(const T*, T*, std::int64_t*, int, int, int, int);                       \
    template void maxpool2_bwd<T>(const T*, const std::int64_t*, T*, int, int, int);                      \
    template void avgpool2c_fwd<T>(const T*, T*, int, int, int, int);                                     \
    template void avgpool2c_bwd<T>(const T*, T*, int, int, int, int);                                     \
    template void upsample2x_fwd<T>(const T*, T*, int, int, int, int);                                    \
    template void upsample2x_bwd<T>(const T*, T*, int, int, int, int);                                    \
    template void bn_stats<T>(const T*, T*, T*, int, int, int, int);                                      \
    template void bn_fwd<T>(const T*, const T*, const T*, const T*, const T*, T*, int, int, int, int, T); \
    template void bn_bwd_train<T>(const T*, const T*, const T*, const T*, const T*, T*, T*, T*, int, int, \
                                  int, int, T);                                                           \
    template void bn_bwd_eval<T>(const T*, const T*, const T*, const T*, const T*, T*, T*, T*, int, int,  \
                                 int, int, T);                                                            \
    template void ln_fwd<T>(const T*, const T*, const T*, T*, T*, T*, int, int, T);                       \
    template void ln_bwd<T>(const T*, const T*, const T*, const T*, const T*, T*, T*, T*, int, int);      \
    template void scan_fwd<T>(const T*, const T*, const T*, const T*, const T*, const T*, T*, T*, int,    \
                              int, int, int);                                                             \
    template void scan_bwd<T>(const T*, const T*, const T*, const T*, const T*, const T*, const T*,       \
                              const T*, T*, T*, T*, T*, T*, T*, int, int, int, int);                      \
    template void spline_basis<T>(const T*, int, int, const T*, std::size_t, T*, T*);                     \
    template void unary_fwd<T>(int, const T*, T*, std::size_t);                                           \
    template void unary_bwd<T>(int, const T*, const T*, const T*, T*, std::size_t);                       \
    template void binary_fwd<T>(int, const T*, const T*, T*, std::size_t);                                \
    template void acc<T>(const T*, T*, std::size_t);                                                      \
    template void acc_scaled<T>(T, const T*, T*, std::size_t);                                            \
    template void acc_mul<T>(const T*, const T*, T*, std::size_t);

KM_INSTANTIATE(float)
KM_INSTANTIATE(double)

#undef KM_INSTANTIATE

}  // namespace km::kern::par
