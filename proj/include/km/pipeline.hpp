#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "km/common.hpp"
#include "km/image_io.hpp"
#include "km/model.hpp"
#include "km/objective.hpp"
#include "km/rng.hpp"
#include "km/serialize.hpp"
#include "km/tensor.hpp"

// Data plumbing and the training loop: synthetic blob dataset, directory
// loader, flip/rot90 augmentation, Adam with cosine annealing, CSV logging.

namespace km {

template <class T>
struct Sample {
    Tensor<T> image;  // (3,h,w) in [0,1]
    Tensor<T> mask;   // (1,h,w) binary
    std::string id;
};

// --- synthetic data ------------------------------------------------------

// Dark speckled background plus blobs_lo..blobs_hi brighter rotated ellipses
// with a soft intensity edge; the mask is the exact ellipse support. Unless
// the blob count can be zero, samples are redrawn until the foreground covers
// 2..50% of the frame. Everything is driven by one sequential stream, so a
// seed pins the dataset bit for bit.
template <class T>
std::vector<Sample<T>> synth_dataset(std::size_t n, std::size_t size, std::uint64_t seed,
                                     std::size_t blobs_lo = 1, std::size_t blobs_hi = 3) {
    KM_REQUIRE(n >= 1, ConfigError, "synth_dataset wants n >= 1");
    KM_REQUIRE(size >= 16, ConfigError, "synth_dataset wants size >= 16, got ", size);
    KM_REQUIRE(blobs_lo <= blobs_hi, ConfigError, "blob range is inverted");
    Rng rng(seed);
    std::vector<Sample<T>> out;
    out.reserve(n);
    const std::size_t hw = size * size;
    for (std::size_t i = 0; i < n; ++i) {
        struct Blob {
            double cx, cy, a, b, th, amp;
        };
        std::vector<Blob> blobs;
        std::vector<T> mvals(hw);
        for (int attempt = 0;; ++attempt) {
            KM_REQUIRE(attempt < 64, DomainError, "could not place blobs inside the mask budget");
            blobs.clear();
            std::size_t nb =
                blobs_lo + (blobs_hi > blobs_lo ? rng.index(blobs_hi - blobs_lo + 1) : 0);
            for (std::size_t b = 0; b < nb; ++b)
                blobs.push_back({rng.uniform(0.2, 0.8) * (size - 1), rng.uniform(0.2, 0.8) * (size - 1),
                                 rng.uniform(0.10, 0.25) * size, rng.uniform(0.10, 0.25) * size,
                                 rng.uniform(0.0, std::numbers::pi), rng.uniform(0.35, 0.6)});
            std::size_t fg = 0;
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    bool inside = false;
                    for (const auto& bl : blobs) {
                        double dx = double(x) - bl.cx, dy = double(y) - bl.cy;
                        double u = dx * std::cos(bl.th) + dy * std::sin(bl.th);
                        double v = -dx * std::sin(bl.th) + dy * std::cos(bl.th);
                        if (u * u / (bl.a * bl.a) + v * v / (bl.b * bl.b) <= 1.0) {
                            inside = true;
                            break;
                        }
                    }
                    mvals[y * size + x] = inside ? T(1) : T(0);
                    fg += inside;
                }
            if (nb == 0) break;
            double frac = double(fg) / double(hw);
            if (frac >= 0.02 && frac <= 0.5) break;
        }
        std::vector<T> gray(hw);
        for (std::size_t p = 0; p < hw; ++p) gray[p] = T(0.12 + 0.10 * rng.uniform());
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
                double lift = 0;
                for (const auto& bl : blobs) {
                    double dx = double(x) - bl.cx, dy = double(y) - bl.cy;
                    double u = dx * std::cos(bl.th) + dy * std::sin(bl.th);
                    double v = -dx * std::sin(bl.th) + dy * std::cos(bl.th);
                    double q = u * u / (bl.a * bl.a) + v * v / (bl.b * bl.b);
                    if (q <= 1.0) lift += bl.amp * std::min(1.0, (1.0 - q) / 0.15);
                }
                gray[y * size + x] += T(lift);
            }
        for (std::size_t p = 0; p < hw; ++p) {
            double v = double(gray[p]) + rng.normal(0.0, 0.02);
            gray[p] = T(std::clamp(v, 0.0, 1.0));
        }
        std::vector<T> ivals(3 * hw);
        for (int c = 0; c < 3; ++c) std::copy(gray.begin(), gray.end(), ivals.begin() + c * hw);
        char id[32];
        std::snprintf(id, sizeof id, "synth-%04zu", i);
        out.push_back({Tensor<T>::from({3, size, size}, std::move(ivals)),
                       Tensor<T>::from({1, size, size}, std::move(mvals)), id});
    }
    return out;
}

// --- directory loader -----------------------------------------------------

namespace detail {

inline const char* kImageExts[] = {".png", ".pgm", ".ppm"};

template <class T>
Tensor<T> image_to_tensor(const ImageU8& img) {
    std::size_t h = img.h, w = img.w;
    std::vector<T> v(3 * h * w);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                v[(c * h + y) * w + x] =
                    T(img.at(int(y), int(x), img.c == 3 ? int(c) : 0)) / T(255);
    return Tensor<T>::from({3, h, w}, std::move(v));
}

template <class T>
Tensor<T> mask_to_tensor(const ImageU8& img) {
    std::size_t h = img.h, w = img.w;
    std::vector<T> v(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            v[y * w + x] = img.at(int(y), int(x), 0) > 127 ? T(1) : T(0);
    return Tensor<T>::from({1, h, w}, std::move(v));
}

}  // namespace detail

// Layout: dir/images/<id>.{png,pgm,ppm} with dir/masks/<id>.<ext> (any of the
// three extensions). Images scale to [0,1] and grayscale replicates to three
// channels; masks binarize at 127. size > 0 resizes to size x size, bilinear
// for images and nearest for masks.
template <class T>
std::vector<Sample<T>> load_dataset(const std::string& dir, std::size_t size = 0) {
    namespace fs = std::filesystem;
    std::vector<Sample<T>> out;
    fs::path images = fs::path(dir) / "images";
    if (!fs::exists(images)) return out;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(images)) {
        if (!e.is_regular_file()) continue;
        std::string ext = e.path().extension().string();
        for (const char* k : detail::kImageExts)
            if (ext == k) {
                files.push_back(e.path());
                break;
            }
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        std::string id = f.stem().string();
        fs::path mpath;
        for (const char* k : detail::kImageExts) {
            fs::path cand = fs::path(dir) / "masks" / (id + k);
            if (fs::exists(cand)) {
                mpath = cand;
                break;
            }
        }
        KM_REQUIRE(!mpath.empty(), IoError, "no mask for image '", id, "'");
        ImageU8 img = read_image(f.string());
        ImageU8 msk = read_image(mpath.string());
        if (msk.c == 3) msk = to_gray(msk);
        if (size > 0) {
            img = resize_bilinear(img, int(size), int(size));
            msk = resize_nearest(msk, int(size), int(size));
        }
        KM_REQUIRE(img.w == msk.w && img.h == msk.h, IoError, "image/mask size mismatch for '", id,
                   "': ", img.w, "x", img.h, " vs ", msk.w, "x", msk.h);
        out.push_back({detail::image_to_tensor<T>(img), detail::mask_to_tensor<T>(msk), id});
    }
    return out;
}

// --- split and augmentation ------------------------------------------------

// Seeded shuffle, then the first ceil(n*a/(a+b)) samples train.
template <class T>
std::pair<std::vector<Sample<T>>, std::vector<Sample<T>>> split(const std::vector<Sample<T>>& ds,
                                                                std::size_t a, std::size_t b,
                                                                std::uint64_t seed) {
    KM_REQUIRE(!ds.empty(), ConfigError, "split wants a non-empty dataset");
    KM_REQUIRE(a >= 1 && b >= 1, ConfigError, "split ratio parts must be positive");
    std::vector<std::size_t> idx(ds.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    for (std::size_t i = idx.size() - 1; i > 0; --i) std::swap(idx[i], idx[rng.index(i + 1)]);
    std::size_t ntrain = (ds.size() * a + a + b - 1) / (a + b);
    std::pair<std::vector<Sample<T>>, std::vector<Sample<T>>> parts;
    for (std::size_t i = 0; i < idx.size(); ++i)
        (i < ntrain ? parts.first : parts.second).push_back(ds[idx[i]]);
    return parts;
}

namespace detail {

// (c,h,w) pixel permutations; rot90 is clockwise and swaps h/w
template <class T>
void flip_h(std::vector<T>& v, std::size_t c, std::size_t h, std::size_t w) {
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t y = 0; y < h; ++y) {
            T* row = v.data() + (ci * h + y) * w;
            std::reverse(row, row + w);
        }
}

template <class T>
void flip_v(std::vector<T>& v, std::size_t c, std::size_t h, std::size_t w) {
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t y = 0; y < h / 2; ++y)
            std::swap_ranges(v.begin() + (ci * h + y) * w, v.begin() + (ci * h + y + 1) * w,
                             v.begin() + (ci * h + (h - 1 - y)) * w);
}

template <class T>
void rot90(std::vector<T>& v, std::size_t c, std::size_t& h, std::size_t& w) {
    std::vector<T> r(v.size());
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t y = 0; y < w; ++y)
            for (std::size_t x = 0; x < h; ++x)
                r[(ci * w + y) * h + x] = v[(ci * h + (h - 1 - x)) * w + y];
    v = std::move(r);
    std::swap(h, w);
}

}  // namespace detail

// Independent coins for horizontal flip, vertical flip, and k*90 degree
// rotation, the same transform on image and mask. Disabled categories do not
// consume draws.
template <class T>
Sample<T> augment(const Sample<T>& s, Rng& rng, bool flips = true, bool rot = true) {
    bool h = flips && rng.uniform() < 0.5;
    bool v = flips && rng.uniform() < 0.5;
    std::size_t k = rot ? rng.index(4) : 0;
    std::size_t ih = s.image.dim(1), iw = s.image.dim(2);
    std::vector<T> img = s.image.values();
    std::vector<T> msk = s.mask.values();
    if (h) {
        detail::flip_h(img, 3, ih, iw);
        detail::flip_h(msk, 1, ih, iw);
    }
    if (v) {
        detail::flip_v(img, 3, ih, iw);
        detail::flip_v(msk, 1, ih, iw);
    }
    std::size_t mh = ih, mw = iw;
    for (std::size_t r = 0; r < k; ++r) {
        detail::rot90(img, 3, ih, iw);
        detail::rot90(msk, 1, mh, mw);
    }
    return {Tensor<T>::from({3, ih, iw}, std::move(img)),
            Tensor<T>::from({1, ih, iw}, std::move(msk)), s.id};
}

template <class T>
Sample<T> augment(const Sample<T>& s, std::uint64_t seed, bool flips = true, bool rot = true) {
    Rng rng(seed);
    return augment(s, rng, flips, rot);
}

// --- optimizer and schedule -------------------------------------------------

// Bias-corrected Adam over a parameter registry; moments stay aligned with
// the registry order. Missing grads count as zero, so the step counter moves
// but the weights do not.
template <class T>
struct Adam {
    T beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8);
    std::size_t step = 0;
    std::vector<std::vector<T>> m, v;

    explicit Adam(const ParamRegistry<T>& reg) {
        for (const auto& [name, t] : reg.params) {
            m.emplace_back(t.numel(), T(0));
            v.emplace_back(t.numel(), T(0));
        }
    }
};

template <class T>
void adam_step(Adam<T>& st, ParamRegistry<T>& reg, T lr) {
    KM_REQUIRE(st.m.size() == reg.params.size(), ConfigError, "optimizer state holds ",
               st.m.size(), " tensors, registry has ", reg.params.size());
    ++st.step;
    T c1 = T(1) - std::pow(st.beta1, T(st.step));
    T c2 = T(1) - std::pow(st.beta2, T(st.step));
    for (std::size_t i = 0; i < st.m.size(); ++i) {
        auto& t = reg.params[i].second;
        KM_REQUIRE(st.m[i].size() == t.numel(), ConfigError, "optimizer state for '",
                   reg.params[i].first, "' holds ", st.m[i].size(), " values, parameter has ",
                   t.numel());
        const T* g = t.has_grad() ? t.grad().data() : nullptr;
        T* p = t.data();
        for (std::size_t j = 0; j < st.m[i].size(); ++j) {
            T gj = g ? g[j] : T(0);
            st.m[i][j] = st.beta1 * st.m[i][j] + (T(1) - st.beta1) * gj;
            st.v[i][j] = st.beta2 * st.v[i][j] + (T(1) - st.beta2) * gj * gj;
            p[j] -= lr * (st.m[i][j] / c1) / (std::sqrt(st.v[i][j] / c2) + st.eps);
        }
    }
}

// Cosine annealing from base at t=0 to floor at t=T, endpoints exact.
inline double cosine_lr(std::size_t t, std::size_t total, double base = 1e-4,
                        double floor_lr = 1e-5) {
    KM_REQUIRE(t <= total, ConfigError, "cosine_lr wants t <= T, got t=", t, " T=", total);
    if (t == 0) return base;
    if (t == total) return floor_lr;
    return floor_lr +
           0.5 * (base - floor_lr) * (1.0 + std::cos(std::numbers::pi * double(t) / double(total)));
}

// --- training loop -----------------------------------------------------------

struct TrainConfig {
    std::size_t epochs = 400;
    double base_lr = 1e-4;
    double min_lr = 1e-5;
    std::size_t batch = 4;
    std::size_t train_ratio = 4, val_ratio = 1;
    bool aug_flips = true, aug_rot = true;
    std::uint64_t seed = 0;
    std::string out_dir = "run";
    LossConfig loss;
    double stop_train_iou = 0;  // > 0: stop once the train split reaches this IoU

    void validate() const {
        KM_REQUIRE(epochs >= 1, ConfigError, "epochs must be positive");
        KM_REQUIRE(batch >= 1, ConfigError, "batch must be positive");
        KM_REQUIRE(base_lr > 0, ConfigError, "base_lr must be positive");
        KM_REQUIRE(min_lr <= base_lr, ConfigError, "min_lr ", min_lr, " exceeds base_lr ", base_lr);
        KM_REQUIRE(train_ratio >= 1 && val_ratio >= 1, ConfigError,
                   "split ratio parts must be positive");
        loss.validate();
    }

    nlohmann::json to_json() const {
        return {{"epochs", epochs},
                {"base_lr", base_lr},
                {"min_lr", min_lr},
                {"batch", batch},
                {"split_ratio", {train_ratio, val_ratio}},
                {"aug_flips", aug_flips},
                {"aug_rot", aug_rot},
                {"seed", seed},
                {"out_dir", out_dir},
                {"bce_weight", loss.bce_weight},
                {"dice_weight", loss.dice_weight},
                {"stop_train_iou", stop_train_iou}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        if (j.contains("epochs")) c.epochs = j.at("epochs").get<std::size_t>();
        if (j.contains("base_lr")) c.base_lr = j.at("base_lr").get<double>();
        if (j.contains("min_lr")) c.min_lr = j.at("min_lr").get<double>();
        if (j.contains("batch")) c.batch = j.at("batch").get<std::size_t>();
        if (j.contains("split_ratio")) {
            auto r = j.at("split_ratio").get<std::vector<std::size_t>>();
            KM_REQUIRE(r.size() == 2, ConfigError, "split_ratio wants [train, val]");
            c.train_ratio = r[0];
            c.val_ratio = r[1];
        }
        if (j.contains("aug_flips")) c.aug_flips = j.at("aug_flips").get<bool>();
        if (j.contains("aug_rot")) c.aug_rot = j.at("aug_rot").get<bool>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
        if (j.contains("bce_weight")) c.loss.bce_weight = j.at("bce_weight").get<double>();
        if (j.contains("dice_weight")) c.loss.dice_weight = j.at("dice_weight").get<double>();
        if (j.contains("stop_train_iou")) c.stop_train_iou = j.at("stop_train_iou").get<double>();
        c.validate();
        return c;
    }
};

template <class T>
struct TrainResult {
    std::vector<double> train_loss;  // per-epoch mean over batches
    std::vector<MetricReport> val;   // per-epoch eval-mode report
    std::vector<double> lrs;
    std::size_t best_epoch = 0;
    double best_iou = -1;
    std::string csv_path, best_path, last_path;
    std::vector<Sample<T>> train_split, val_split;  // tensors shared with the input set
};

namespace detail {

inline std::string fmt_num(double x) {
    char buf[32];
    auto r = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, r.ptr);
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> stack_batch(const std::vector<Sample<T>>& ds,
                                            const std::vector<std::size_t>& idx, std::size_t lo,
                                            std::size_t hi) {
    std::size_t n = hi - lo;
    std::size_t h = ds[idx[lo]].image.dim(1), w = ds[idx[lo]].image.dim(2);
    std::vector<T> xv(n * 3 * h * w), zv(n * h * w);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& s = ds[idx[lo + i]];
        KM_REQUIRE(s.image.dim(1) == h && s.image.dim(2) == w, ShapeError,
                   "batch mixes image sizes: '", s.id, "' is ", s.image.dim(1), "x", s.image.dim(2),
                   ", batch is ", h, "x", w);
        std::copy(s.image.values().begin(), s.image.values().end(), xv.begin() + i * 3 * h * w);
        std::copy(s.mask.values().begin(), s.mask.values().end(), zv.begin() + i * h * w);
    }
    return {Tensor<T>::from({n, 3, h, w}, std::move(xv)),
            Tensor<T>::from({n, 1, h, w}, std::move(zv))};
}

}  // namespace detail

// Eval-mode metric report plus mean combined loss over a dataset, batched.
template <class T>
std::pair<MetricReport, double> eval_pass(Model<T>& m, const std::vector<Sample<T>>& ds,
                                          std::size_t batch, const LossConfig& lc = {}) {
    KM_REQUIRE(!ds.empty(), ConfigError, "evaluation needs a non-empty dataset");
    NoGrad ng;
    std::vector<std::size_t> idx(ds.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    MetricReport acc{};
    double loss_sum = 0;
    for (std::size_t lo = 0; lo < ds.size(); lo += batch) {
        std::size_t hi = std::min(ds.size(), lo + batch);
        auto [x, z] = detail::stack_batch(ds, idx, lo, hi);
        auto logits = m.forward(x, false);
        auto rep = metrics(sigmoid(logits), z);
        double wgt = double(hi - lo);
        acc.iou += wgt * rep.iou;
        acc.f1 += wgt * rep.f1;
        acc.accuracy += wgt * rep.accuracy;
        acc.auc += wgt * rep.auc;
        acc.precision += wgt * rep.precision;
        acc.recall += wgt * rep.recall;
        loss_sum += wgt * double(combined_loss(lc, logits, z).values()[0]);
    }
    double n = double(ds.size());
    acc.iou /= n;
    acc.f1 /= n;
    acc.accuracy /= n;
    acc.auc /= n;
    acc.precision /= n;
    acc.recall /= n;
    return {acc, loss_sum / n};
}

// Train/val split, seeded per-epoch shuffles, augmentation, Adam with the
// cosine schedule. After every epoch the val split is scored in eval mode and
// appended to metrics.csv (fixed header, one row per epoch); the best-IoU
// checkpoint and the final checkpoint land in out_dir. When the val split is
// empty (tiny datasets) the train split is scored instead and the row says so.
template <class T>
TrainResult<T> train(Model<T>& m, const TrainConfig& cfg, const std::vector<Sample<T>>& dataset) {
    cfg.validate();
    KM_REQUIRE(dataset.size() >= cfg.batch, ConfigError, "dataset holds ", dataset.size(),
               " samples, batch wants ", cfg.batch);
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);

    Rng root(cfg.seed);
    Rng shuffle_rng = root.fork(1);
    Rng aug_rng = root.fork(2);
    auto [tr, va] = split(dataset, cfg.train_ratio, cfg.val_ratio, root.u64());

    Adam<T> opt(m.reg);
    TrainResult<T> res;
    res.csv_path = (fs::path(cfg.out_dir) / "metrics.csv").string();
    res.best_path = (fs::path(cfg.out_dir) / "best.ckpt").string();
    res.last_path = (fs::path(cfg.out_dir) / "last.ckpt").string();
    std::ofstream csv(res.csv_path);
    KM_REQUIRE(csv.good(), IoError, "cannot write ", res.csv_path);
    csv << "epoch,split,iou,f1,accuracy,auc,precision,recall,loss,lr\n";

    std::vector<std::size_t> idx(tr.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::size_t total = cfg.epochs - 1;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        double lr = cosine_lr(e, total, cfg.base_lr, cfg.min_lr);
        for (std::size_t i = idx.size() - 1; i > 0; --i)
            std::swap(idx[i], idx[shuffle_rng.index(i + 1)]);
        double loss_sum = 0;
        std::size_t nb = 0;
        for (std::size_t lo = 0; lo < tr.size(); lo += cfg.batch, ++nb) {
            std::size_t hi = std::min(tr.size(), lo + cfg.batch);
            std::vector<Sample<T>> batch;
            for (std::size_t i = lo; i < hi; ++i)
                batch.push_back(cfg.aug_flips || cfg.aug_rot
                                    ? augment(tr[idx[i]], aug_rng, cfg.aug_flips, cfg.aug_rot)
                                    : tr[idx[i]]);
            std::vector<std::size_t> bidx(batch.size());
            for (std::size_t i = 0; i < bidx.size(); ++i) bidx[i] = i;
            auto [x, z] = detail::stack_batch(batch, bidx, 0, batch.size());
            auto loss = combined_loss(cfg.loss, m.forward(x, true), z);
            double lv = double(loss.values()[0]);
            KM_REQUIRE(std::isfinite(lv), DomainError, "non-finite loss at epoch ", e + 1,
                       ", batch ", nb + 1);
            for (auto& [name, t] : m.reg.params) t.zero_grad();
            loss.backward();
            adam_step(opt, m.reg, T(lr));
            loss_sum += lv * double(hi - lo);
        }
        res.train_loss.push_back(loss_sum / double(tr.size()));
        res.lrs.push_back(lr);

        const auto& score_split = va.empty() ? tr : va;
        auto [rep, vloss] = eval_pass(m, score_split, cfg.batch, cfg.loss);
        res.val.push_back(rep);
        using detail::fmt_num;
        csv << e + 1 << ',' << (va.empty() ? "train" : "val") << ',' << fmt_num(rep.iou) << ','
            << fmt_num(rep.f1) << ',' << fmt_num(rep.accuracy) << ',' << fmt_num(rep.auc) << ','
            << fmt_num(rep.precision) << ',' << fmt_num(rep.recall) << ',' << fmt_num(vloss) << ','
            << fmt_num(lr) << '\n';
        if (rep.iou > res.best_iou) {
            res.best_iou = rep.iou;
            res.best_epoch = e + 1;
            m.save(res.best_path);
        }
        if (cfg.stop_train_iou > 0 &&
            eval_pass(m, tr, cfg.batch, cfg.loss).first.iou >= cfg.stop_train_iou)
            break;
    }
    m.save(res.last_path);
    res.train_split = std::move(tr);
    res.val_split = std::move(va);
    return res;
}

// Rebuild the model from the config embedded in the checkpoint, then score
// the dataset in eval mode.
template <class T>
MetricReport evaluate(const std::string& checkpoint, const std::vector<Sample<T>>& ds,
                      std::size_t batch = 4) {
    auto manifest = load_checkpoint<T>(checkpoint).first;
    auto mcfg = ModelConfig::from_json(manifest.at("config"));
    auto m = build_model<T>(mcfg);
    m.load(checkpoint);
    return eval_pass(m, ds, batch).first;
}

}  // namespace km
