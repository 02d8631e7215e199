#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>

// Low-level numeric kernels. Every kernel exists twice: kern::serial holds the
// plain reference loops used for testing, kern::par holds the OpenMP versions.
// The dispatchers below pick one at runtime (parallel by default). Both sides
// compute each output element with the same accumulation order, so results are
// bit-identical for any thread count.

namespace km::kern {

enum Unary : int {
    u_identity = 0,
    u_relu,
    u_tanh,
    u_softplus,
    u_gelu,
    u_silu,
    u_sigmoid,
    u_exp,
    u_log,
    u_neg,
};

enum Binary : int {
    b_add = 0,
    b_sub,
    b_mul,
    b_div,
};

inline bool& parallel_flag() {
    static bool on = true;
    return on;
}
inline void set_parallel(bool on) { parallel_flag() = on; }
inline bool parallel_on() { return parallel_flag(); }

#define KM_KERNEL_DECLS                                                                                   \
    template <class T>                                                                                    \
    void matmul(const T* a, const T* b, T* c, int m, int k, int n, bool ta, bool tb, bool accumulate);    \
    template <class T>                                                                                    \
    void conv2d_fwd(const T* x, const T* w, const T* bias, T* y, int n, int ci, int h, int wd, int co,    \
                    int kh, int kw, int stride, int pad);                                                 \
    template <class T>                                                                                    \
    void conv2d_bwd_input(const T* gy, const T* w, T* gx, int n, int ci, int h, int wd, int co, int kh,   \
                          int kw, int stride, int pad);                                                   \
    template <class T>                                                                                    \
    void conv2d_bwd_weight(const T* x, const T* gy, T* gw, int n, int ci, int h, int wd, int co, int kh,  \
                           int kw, int stride, int pad);                                                  \
    template <class T>                                                                                    \
    void conv2d_bwd_bias(const T* gy, T* gb, int n, int co, int oh, int ow);                              \
    template <class T>                                                                                    \
    void dwconv2d_fwd(const T* x, const T* w, T* y, int n, int c, int h, int wd, int kh, int kw,          \
                      int stride, int pad);                                                               \
    template <class T>                                                                                    \
    void dwconv2d_bwd_input(const T* gy, const T* w, T* gx, int n, int c, int h, int wd, int kh, int kw,  \
                            int stride, int pad);                                                         \
    template <class T>                                                                                    \
    void dwconv2d_bwd_weight(const T* x, const T* gy, T* gw, int n, int c, int h, int wd, int kh, int kw, \
                             int stride, int pad);                                                        \
    template <class T>                                                                                    \
    void maxpool2_fwd(const T* x, T* y, std::int64_t* arg, int n, int c, int h, int wd);                  \
    template <class T>                                                                                    \
    void maxpool2_bwd(const T* gy, const std::int64_t* arg, T* gx, int planes, int oh, int ow);           \
    template <class T>                                                                                    \
    void avgpool2c_fwd(const T* x, T* y, int n, int c, int h, int wd);                                    \
    template <class T>                                                                                    \
    void avgpool2c_bwd(const T* gy, T* gx, int n, int c, int h, int wd);                                  \
    template <class T>                                                                                    \
    void upsample2x_fwd(const T* x, T* y, int n, int c, int h, int wd);                                   \
    template <class T>                                                                                    \
    void upsample2x_bwd(const T* gy, T* gx, int n, int c, int h, int wd);                                 \
    template <class T>                                                                                    \
    void bn_stats(const T* x, T* mean, T* var, int n, int c, int h, int wd);                              \
    template <class T>                                                                                    \
    void bn_fwd(const T* x, const T* mean, const T* var, const T* gamma, const T* beta, T* y, int n,      \
                int c, int h, int wd, T eps);                                                             \
    template <class T>                                                                                    \
    void bn_bwd_train(const T* x, const T* mean, const T* var, const T* gamma, const T* gy, T* gx,        \
                      T* ggamma, T* gbeta, int n, int c, int h, int wd, T eps);                           \
    template <class T>                                                                                    \
    void bn_bwd_eval(const T* x, const T* mean, const T* var, const T* gamma, const T* gy, T* gx,         \
                     T* ggamma, T* gbeta, int n, int c, int h, int wd, T eps);                            \
    template <class T>                                                                                    \
    void ln_fwd(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd, int rows, int e,       \
                T eps);                                                                                   \
    template <class T>                                                                                    \
    void ln_bwd(const T* x, const T* gamma, const T* mean, const T* rstd, const T* gy, T* gx, T* ggamma,  \
                T* gbeta, int rows, int e);                                                               \
    template <class T>                                                                                    \
    void scan_fwd(const T* a, const T* delta, const T* bs, const T* cs, const T* dvec, const T* u, T* y,  \
                  T* hbuf, int n, int l, int e, int s);                                                   \
    template <class T>                                                                                    \
    void scan_bwd(const T* a, const T* delta, const T* bs, const T* cs, const T* dvec, const T* u,        \
                  const T* hbuf, const T* gy, T* ga, T* gdelta, T* gb, T* gc, T* gd, T* gu, int n, int l, \
                  int e, int s);                                                                          \
    template <class T>                                                                                    \
    void spline_basis(const T* knots, int nknots, int deg, const T* x, std::size_t count, T* bas,         \
                      T* dbas);                                                                           \
    template <class T>                                                                                    \
    void unary_fwd(int kind, const T* x, T* y, std::size_t n);                                            \
    template <class T>                                                                                    \
    void unary_bwd(int kind, const T* x, const T* y, const T* gy, T* gx, std::size_t n);                  \
    template <class T>                                                                                    \
    void binary_fwd(int kind, const T* a, const T* b, T* y, std::size_t n);                               \
    template <class T>                                                                                    \
    void acc(const T* a, T* out, std::size_t n);                                                          \
    template <class T>                                                                                    \
    void acc_scaled(T s, const T* a, T* out, std::size_t n);                                              \
    template <class T>                                                                                    \
    void acc_mul(const T* a, const T* b, T* out, std::size_t n);

namespace serial {
KM_KERNEL_DECLS
}
namespace par {
KM_KERNEL_DECLS
}

#undef KM_KERNEL_DECLS

// scalar helpers shared by both kernel sets and by layer code
template <class T>
inline T sigmoid_scalar(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <class T>
inline T softplus_scalar(T x) {
    if (x > T(30)) return x;  // overflow guard
    if (x > T(0)) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

template <class T>
inline T gelu_scalar(T x) {
    const T c = T(0.7978845608028653558798921198687);  // sqrt(2/pi)
    T t = std::tanh(c * (x + T(0.044715) * x * x * x));
    return T(0.5) * x * (T(1) + t);
}

#define KM_DISPATCH(fn, ...)                    \
    do {                                        \
        if (parallel_on())                      \
            par::fn(__VA_ARGS__);               \
        else                                    \
            serial::fn(__VA_ARGS__);            \
    } while (0)

template <class T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n, bool ta, bool tb, bool accumulate) {
    KM_DISPATCH(matmul, a, b, c, m, k, n, ta, tb, accumulate);
}
template <class T>
void conv2d_fwd(const T* x, const T* w, const T* bias, T* y, int n, int ci, int h, int wd, int co, int kh,
                int kw, int stride, int pad) {
    KM_DISPATCH(conv2d_fwd, x, w, bias, y, n, ci, h, wd, co, kh, kw, stride, pad);
}
template <class T>
void conv2d_bwd_input(const T* gy, const T* w, T* gx, int n, int ci, int h, int wd, int co, int kh, int kw,
                      int stride, int pad) {
    KM_DISPATCH(conv2d_bwd_input, gy, w, gx, n, ci, h, wd, co, kh, kw, stride, pad);
}
template <class T>
void conv2d_bwd_weight(const T* x, const T* gy, T* gw, int n, int ci, int h, int wd, int co, int kh, int kw,
                       int stride, int pad) {
    KM_DISPATCH(conv2d_bwd_weight, x, gy, gw, n, ci, h, wd, co, kh, kw, stride, pad);
}
template <class T>
void conv2d_bwd_bias(const T* gy, T* gb, int n, int co, int oh, int ow) {
    KM_DISPATCH(conv2d_bwd_bias, gy, gb, n, co, oh, ow);
}
template <class T>
void dwconv2d_fwd(const T* x, const T* w, T* y, int n, int c, int h, int wd, int kh, int kw, int stride,
                  int pad) {
    KM_DISPATCH(dwconv2d_fwd, x, w, y, n, c, h, wd, kh, kw, stride, pad);
}
template <class T>
void dwconv2d_bwd_input(const T* gy, const T* w, T* gx, int n, int c, int h, int wd, int kh, int kw,
                        int stride, int pad) {
    KM_DISPATCH(dwconv2d_bwd_input, gy, w, gx, n, c, h, wd, kh, kw, stride, pad);
}
template <class T>
void dwconv2d_bwd_weight(const T* x, const T* gy, T* gw, int n, int c, int h, int wd, int kh, int kw,
                         int stride, int pad) {
    KM_DISPATCH(dwconv2d_bwd_weight, x, gy, gw, n, c, h, wd, kh, kw, stride, pad);
}
template <class T>
void maxpool2_fwd(const T* x, T* y, std::int64_t* arg, int n, int c, int h, int wd) {
    KM_DISPATCH(maxpool2_fwd, x, y, arg, n, c, h, wd);
}
template <class T>
void maxpool2_bwd(const T* gy, const std::int64_t* arg, T* gx, int planes, int oh, int ow) {
    KM_DISPATCH(maxpool2_bwd, gy, arg, gx, planes, oh, ow);
}
template <class T>
void avgpool2c_fwd(const T* x, T* y, int n, int c, int h, int wd) {
    KM_DISPATCH(avgpool2c_fwd, x, y, n, c, h, wd);
}
template <class T>
void avgpool2c_bwd(const T* gy, T* gx, int n, int c, int h, int wd) {
    KM_DISPATCH(avgpool2c_bwd, gy, gx, n, c, h, wd);
}
template <class T>
void upsample2x_fwd(const T* x, T* y, int n, int c, int h, int wd) {
    KM_DISPATCH(upsample2x_fwd, x, y, n, c, h, wd);
}
template <class T>
void upsample2x_bwd(const T* gy, T* gx, int n, int c, int h, int wd) {
    KM_DISPATCH(upsample2x_bwd, gy, gx, n, c, h, wd);
}
template <class T>
void bn_stats(const T* x, T* mean, T* var, int n, int c, int h, int wd) {
    KM_DISPATCH(bn_stats, x, mean, var, n, c, h, wd);
}
template <class T>
void bn_fwd(const T* x, const T* mean, const T* var, const T* gamma, const T* beta, T* y, int n, int c,
            int h, int wd, T eps) {
    KM_DISPATCH(bn_fwd, x, mean, var, gamma, beta, y, n, c, h, wd, eps);
}
template <class T>
void bn_bwd_train(const T* x, const T* mean, const T* var, const T* gamma, const T* gy, T* gx, T* ggamma,
                  T* gbeta, int n, int c, int h, int wd, T eps) {
    KM_DISPATCH(bn_bwd_train, x, mean, var, gamma, gy, gx, ggamma, gbeta, n, c, h, wd, eps);
}
template <class T>
void bn_bwd_eval(const T* x, const T* mean, const T* var, const T* gamma, const T* gy, T* gx, T* ggamma,
                 T* gbeta, int n, int c, int h, int wd, T eps) {
    KM_DISPATCH(bn_bwd_eval, x, mean, var, gamma, gy, gx, ggamma, gbeta, n, c, h, wd, eps);
}
template <class T>
void ln_fwd(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd, int rows, int e, T eps) {
    KM_DISPATCH(ln_fwd, x, gamma, beta, y, mean, rstd, rows, e, eps);
}
template <class T>
void ln_bwd(const T* x, const T* gamma, const T* mean, const T* rstd, const T* gy, T* gx, T* ggamma,
            T* gbeta, int rows, int e) {
    KM_DISPATCH(ln_bwd, x, gamma, mean, rstd, gy, gx, ggamma, gbeta, rows, e);
}
template <class T>
void scan_fwd(const T* a, const T* delta, const T* bs, const T* cs, const T* dvec, const T* u, T* y,
              T* hbuf, int n, int l, int e, int s) {
    KM_DISPATCH(scan_fwd, a, delta, bs, cs, dvec, u, y, hbuf, n, l, e, s);
}
template <class T>
void scan_bwd(const T* a, const T* delta, const T* bs, const T* cs, const T* dvec, const T* u,
              const T* hbuf, const T* gy, T* ga, T* gdelta, T* gb, T* gc, T* gd, T* gu, int n, int l, int e,
              int s) {
    KM_DISPATCH(scan_bwd, a, delta, bs, cs, dvec, u, hbuf, gy, ga, gdelta, gb, gc, gd, gu, n, l, e, s);
}
template <class T>
void spline_basis(const T* knots, int nknots, int deg, const T* x, std::size_t count, T* bas, T* dbas) {
    KM_DISPATCH(spline_basis, knots, nknots, deg, x, count, bas, dbas);
}
template <class T>
void unary_fwd(int kind, const T* x, T* y, std::size_t n) {
    KM_DISPATCH(unary_fwd, kind, x, y, n);
}
template <class T>
void unary_bwd(int kind, const T* x, const T* y, const T* gy, T* gx, std::size_t n) {
    KM_DISPATCH(unary_bwd, kind, x, y, gy, gx, n);
}
template <class T>
void binary_fwd(int kind, const T* a, const T* b, T* y, std::size_t n) {
    KM_DISPATCH(binary_fwd, kind, a, b, y, n);
}
template <class T>
void acc(const T* a, T* out, std::size_t n) {
    KM_DISPATCH(acc, a, out, n);
}
template <class T>
void acc_scaled(T s, const T* a, T* out, std::size_t n) {
    KM_DISPATCH(acc_scaled, s, a, out, n);
}
template <class T>
void acc_mul(const T* a, const T* b, T* out, std::size_t n) {
    KM_DISPATCH(acc_mul, a, b, out, n);
}

#undef KM_DISPATCH

}  // namespace km::kern
