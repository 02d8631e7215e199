#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "km/kan.hpp"
#include "km/nn_layers.hpp"
#include "km/serialize.hpp"
#include "km/ssm.hpp"
#include "km/tensor.hpp"

// The segmentation network: a conv pyramid with a fusion block after the first
// stage, two tokenized spline stages at the bottom, and a mirrored decoder with
// additive skips. Emits raw logits; sigmoid lives in the loss.

namespace km {

struct ModelConfig {
    std::size_t in_channels = 3;
    std::vector<std::size_t> conv_channels = {16, 32, 64};  // c1, c2, c3
    std::vector<std::size_t> embed_dims = {96, 128};        // e1, e2
    std::size_t mamba_embed = 0;  // fusion block width, 0 picks c1
    std::size_t ssm_state = 8;
    int spline_degree = 3;
    int spline_grid = 5;
    double spline_lo = -1.0;
    double spline_hi = 1.0;
    std::string variant = "full";    // mamba_mlp | mamba_kan | mamba_boa_kan | full
    std::string plain_act = "silu";  // activation where a bag is absent
    bool classical_mamba = false;
    bool stage_norm_after_kan = true;  // extra LN after (true) or before (false) K1/K2
    std::uint64_t seed = 42;

    std::size_t fusion_embed() const { return mamba_embed ? mamba_embed : conv_channels.at(0); }

    int act_id() const {
        if (plain_act == "relu") return kern::u_relu;
        if (plain_act == "tanh") return kern::u_tanh;
        if (plain_act == "softplus") return kern::u_softplus;
        if (plain_act == "gelu") return kern::u_gelu;
        KM_REQUIRE(plain_act == "silu", ConfigError, "unknown plain_act '", plain_act, "'");
        return kern::u_silu;
    }

    MambaBlockOpts block_opts() const {
        MambaBlockOpts o;
        if (variant == "mamba_mlp") { o.kan_core = false; o.boa_main = false; o.boa_gate = false; }
        else if (variant == "mamba_kan") { o.boa_main = false; o.boa_gate = false; }
        else if (variant == "mamba_boa_kan") { o.boa_gate = false; }
        else KM_REQUIRE(variant == "full", ConfigError, "unknown variant '", variant, "'");
        o.plain_act = act_id();
        return o;
    }

    void validate() const {
        KM_REQUIRE(in_channels >= 1, ConfigError, "in_channels must be positive");
        KM_REQUIRE(conv_channels.size() == 3, ConfigError, "conv_channels wants 3 stages, got ",
                   conv_channels.size());
        KM_REQUIRE(embed_dims.size() == 2, ConfigError, "embed_dims wants 2 stages, got ",
                   embed_dims.size());
        std::size_t widths[5] = {conv_channels[0], conv_channels[1], conv_channels[2], embed_dims[0],
                                 embed_dims[1]};
        for (int i = 0; i + 1 < 5; ++i)
            KM_REQUIRE(widths[i] < widths[i + 1], ConfigError,
                       "channel pyramid must increase strictly: stage ", i, " has ", widths[i],
                       " then ", widths[i + 1]);
        KM_REQUIRE(ssm_state >= 1, ConfigError, "ssm_state must be positive");
        block_opts();  // validates the variant name
    }

    nlohmann::json to_json() const {
        return {{"in_channels", in_channels},
                {"conv_channels", conv_channels},
                {"embed_dims", embed_dims},
                {"mamba_embed", mamba_embed},
                {"ssm_state", ssm_state},
                {"spline_degree", spline_degree},
                {"spline_grid", spline_grid},
                {"spline_range", {spline_lo, spline_hi}},
                {"variant", variant},
                {"plain_act", plain_act},
                {"classical_mamba", classical_mamba},
                {"stage_norm_after_kan", stage_norm_after_kan},
                {"seed", seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        if (j.contains("in_channels")) c.in_channels = j.at("in_channels").get<std::size_t>();
        if (j.contains("conv_channels"))
            c.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
        if (j.contains("embed_dims")) c.embed_dims = j.at("embed_dims").get<std::vector<std::size_t>>();
        if (j.contains("mamba_embed")) c.mamba_embed = j.at("mamba_embed").get<std::size_t>();
        if (j.contains("ssm_state")) c.ssm_state = j.at("ssm_state").get<std::size_t>();
        if (j.contains("spline_degree")) c.spline_degree = j.at("spline_degree").get<int>();
        if (j.contains("spline_grid")) c.spline_grid = j.at("spline_grid").get<int>();
        if (j.contains("spline_range")) {
            auto r = j.at("spline_range").get<std::vector<double>>();
            KM_REQUIRE(r.size() == 2, ConfigError, "spline_range wants [lo, hi]");
            c.spline_lo = r[0];
            c.spline_hi = r[1];
        }
        if (j.contains("variant")) c.variant = j.at("variant").get<std::string>();
        if (j.contains("plain_act")) c.plain_act = j.at("plain_act").get<std::string>();
        if (j.contains("classical_mamba")) c.classical_mamba = j.at("classical_mamba").get<bool>();
        if (j.contains("stage_norm_after_kan"))
            c.stage_norm_after_kan = j.at("stage_norm_after_kan").get<bool>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        c.validate();
        return c;
    }
};

template <class T>
struct Model {
    ModelConfig cfg;
    SplineGrid<T> grid;
    ConvBlock<T> c1b, c2b, c3b;
    std::unique_ptr<MambaKanBlock<T>> m1;
    std::unique_ptr<ClassicalMambaBlock<T>> m1c;
    Tensor<T> m1_skip_w;  // (c1, em, 1, 1) when the fusion width differs from c1
    PatchEmbed<T> p1, p2;
    Kanb<T> k1, k2, k3, k4;
    LayerNorm<T> l1, l2;
    ConvBlock<T> d1b, d2b, d3b, d4b, d5b;
    Tensor<T> o1_w, o1_b;
    ParamRegistry<T> reg;

    explicit Model(const ModelConfig& cfg_, Rng& rng)
        : cfg((cfg_.validate(), cfg_)),
          grid(cfg_.spline_degree, cfg_.spline_grid, T(cfg_.spline_lo), T(cfg_.spline_hi)),
          c1b(cfg_.in_channels, c1(), Resample::down, rng),
          c2b(cfg_.fusion_embed(), c2(), Resample::down, rng),
          c3b(c2(), c3(), Resample::down, rng),
          p1(c3(), e1(), rng),
          p2(e1(), e2(), rng),
          k1(e1(), grid, kern::u_silu, rng),
          k2(e2(), grid, kern::u_silu, rng),
          k3(e1(), grid, kern::u_silu, rng),
          k4(c3(), grid, kern::u_silu, rng),
          l1(e1()),
          l2(e2()),
          d1b(e2(), e1(), Resample::up, rng),
          d2b(e1(), c3(), Resample::up, rng),
          d3b(c3(), c2(), Resample::up, rng),
          d4b(c2(), c1(), Resample::up, rng),
          d5b(c1(), c1(), Resample::up, rng),
          o1_w(he_init<T>({1, c1(), 1, 1}, c1(), rng)),
          o1_b(Tensor<T>::zeros({1}, true)) {
        if (cfg.classical_mamba) {
            KM_REQUIRE(cfg.fusion_embed() == c1(), ConfigError,
                       "classical fusion block keeps the stage width: mamba_embed must be 0 or ", c1());
            m1c = std::make_unique<ClassicalMambaBlock<T>>(c1(), cfg.ssm_state, rng, cfg.act_id());
        } else {
            m1 = std::make_unique<MambaKanBlock<T>>(c1(), cfg.fusion_embed(), cfg.ssm_state, grid,
                                                    cfg.block_opts(), rng);
            if (cfg.fusion_embed() != c1())
                m1_skip_w = he_init<T>({c1(), cfg.fusion_embed(), 1, 1}, cfg.fusion_embed(), rng);
        }
        c1b.register_into(reg, "c1");
        if (m1) m1->register_into(reg, "m1");
        if (m1c) m1c->register_into(reg, "m1");
        if (m1_skip_w) reg.add_param("m1_skip.w", m1_skip_w);
        c2b.register_into(reg, "c2");
        c3b.register_into(reg, "c3");
        p1.register_into(reg, "p1");
        k1.register_into(reg, "k1");
        l1.register_into(reg, "l1");
        p2.register_into(reg, "p2");
        k2.register_into(reg, "k2");
        l2.register_into(reg, "l2");
        d1b.register_into(reg, "d1");
        k3.register_into(reg, "k3");
        d2b.register_into(reg, "d2");
        k4.register_into(reg, "k4");
        d3b.register_into(reg, "d3");
        d4b.register_into(reg, "d4");
        d5b.register_into(reg, "d5");
        reg.add_param("o1.w", o1_w);
        reg.add_param("o1.b", o1_b);
    }

    std::size_t c1() const { return cfg.conv_channels[0]; }
    std::size_t c2() const { return cfg.conv_channels[1]; }
    std::size_t c3() const { return cfg.conv_channels[2]; }
    std::size_t e1() const { return cfg.embed_dims[0]; }
    std::size_t e2() const { return cfg.embed_dims[1]; }

    Tensor<T> tokens_stage(Kanb<T>& k, LayerNorm<T>& l, const Tensor<T>& tok, std::size_t h,
                           std::size_t w, bool training) {
        if (cfg.stage_norm_after_kan) return l.forward(k.forward(tok, h, w, training));
        return k.forward(l.forward(tok), h, w, training);
    }

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        KM_REQUIRE(x.rank() == 4 && x.dim(1) == cfg.in_channels, ShapeError, "model wants (N,",
                   cfg.in_channels, ",H,W), got ", shape_str(x.shape()));
        std::size_t h = x.dim(2), w = x.dim(3);
        KM_REQUIRE(h % 32 == 0 && w % 32 == 0 && h > 0 && w > 0, ShapeError,
                   "input extents must be divisible by 32 (five halvings), got ", h, "x", w);

        auto t1 = c1b.forward(x, training);  // (c1, h/2)
        Tensor<T> m1out;                     // fusion stage keeps the half resolution
        if (m1c)
            m1out = m1c->forward(t1, training);
        else
            m1out = upsample2x(m1->forward(t1, training));  // block halves again; bring it back
        auto t2 = c2b.forward(m1out, training);  // (c2, h/4)
        auto t3 = c3b.forward(t2, training);     // (c3, h/8)

        auto s1 = p1.forward(t3);  // tokens at h/16
        auto k1tok = tokens_stage(k1, l1, s1.tokens, s1.h, s1.w, training);
        auto k1img = tokens_to_image(k1tok, s1.h, s1.w);  // (e1, h/16)

        auto s2 = p2.forward(k1img);  // tokens at h/32
        auto k2tok = tokens_stage(k2, l2, s2.tokens, s2.h, s2.w, training);
        auto bottom = tokens_to_image(k2tok, s2.h, s2.w);  // (e2, h/32)

        auto u1 = add(d1b.forward(bottom, training), k1img);  // (e1, h/16)
        auto u1tok = k3.forward(image_to_tokens(u1), s1.h, s1.w, training);
        auto u1img = tokens_to_image(u1tok, s1.h, s1.w);

        auto u2 = add(d2b.forward(u1img, training), t3);  // (c3, h/8)
        auto u2tok = k4.forward(image_to_tokens(u2), h / 8, w / 8, training);
        auto u2img = tokens_to_image(u2tok, h / 8, w / 8);

        auto u3 = add(d3b.forward(u2img, training), t2);  // (c2, h/4)
        auto u4 = d4b.forward(u3, training);              // (c1, h/2)
        u4 = add(u4, t1);
        u4 = add(u4, m1_skip_w ? conv2d(m1out, m1_skip_w, 1, 0) : m1out);
        auto u5 = d5b.forward(u4, training);  // (c1, h)
        return conv2d(u5, o1_w, o1_b, 1, 0);  // logits (1, h)
    }

    std::size_t count_params() const {
        std::size_t total = 0;
        for (const auto& [name, t] : reg.params) total += t.numel();
        return total;
    }

    // multiply-accumulates of the conv/matmul/scan work in one forward pass.
    // conv: N*Co*Ci*kh*kw*Ho*Wo; depthwise: N*C*kh*kw*Ho*Wo; matmul: rows*k*cols;
    // scan: 5 MACs per (token, channel, state) plus the skip term; elementwise
    // work (norms, activations, gates, pools) is not counted.
    std::size_t count_macs(std::size_t n, std::size_t h, std::size_t w) const {
        KM_REQUIRE(h % 32 == 0 && w % 32 == 0, ShapeError,
                   "input extents must be divisible by 32 (five halvings), got ", h, "x", w);
        std::size_t total = 0;
        auto conv = [&](std::size_t co, std::size_t ci, std::size_t k, std::size_t oh,
                        std::size_t ow) { total += n * co * ci * k * k * oh * ow; };
        auto convblock = [&](std::size_t ci, std::size_t co, std::size_t oh, std::size_t ow) {
            conv(co, ci, 3, oh, ow);  // both stages run before the resample
            conv(co, co, 3, oh, ow);
        };
        auto attn = [&](std::size_t oh, std::size_t ow) { conv(1, 2, 7, oh, ow); };
        auto kan_linear = [&](std::size_t rows, std::size_t dim) {
            std::size_t nb = std::size_t(grid.nbasis());
            total += rows * dim * dim;       // base path
            total += rows * dim * nb * dim;  // spline path
        };
        auto kanb = [&](std::size_t l, std::size_t dim) {
            for (int i = 0; i < 3; ++i) {
                kan_linear(n * l, dim);
                total += n * dim * 3 * 3 * l;  // depthwise mixer
            }
        };
        auto token_mlp = [&](std::size_t l, std::size_t dim) { total += 2 * n * l * dim * dim; };
        auto ssm = [&](std::size_t l, std::size_t dim) {
            std::size_t s = cfg.ssm_state;
            total += n * l * dim * dim;      // delta projection
            total += 2 * n * l * s * dim;    // B and C projections
            total += n * l * dim * s * 5;    // recurrence
            total += n * l * dim;            // skip
        };

        std::size_t em = cfg.fusion_embed();
        convblock(cfg.in_channels, c1(), h / 2, w / 2);  // stages compute at the output extent
        if (cfg.classical_mamba) {
            std::size_t hh = h / 2, ww = w / 2, l = hh * ww;
            conv(em, em, 1, hh, ww);
            for (int i = 0; i < 3; ++i) conv(em, em, 3, hh, ww);
            attn(hh, ww);
            attn(hh, ww);
            ssm(l, em);
            attn(hh, ww);
            total += n * l * em * em;  // token projection
        } else {
            std::size_t hh = h / 4, ww = w / 4, l = hh * ww;
            auto opts = cfg.block_opts();
            conv(em, c1(), 3, hh, ww);  // patch embed
            if (opts.kan_core) kanb(l, em); else token_mlp(l, em);
            ssm(l, em);
            attn(hh, ww);
            total += n * l * em * em;  // token projection
            if (em != c1()) conv(em, c1(), 1, hh, ww);  // pooled-skip projection
        }
        if (m1_skip_w) conv(c1(), em, 1, h / 2, w / 2);
        convblock(em, c2(), h / 4, w / 4);
        convblock(c2(), c3(), h / 8, w / 8);
        conv(e1(), c3(), 3, h / 16, w / 16);  // patch embed 1
        kanb(h / 16 * w / 16, e1());
        conv(e2(), e1(), 3, h / 32, w / 32);  // patch embed 2
        kanb(h / 32 * w / 32, e2());
        convblock(e2(), e1(), h / 32, w / 32);  // decoder stages conv before upsampling
        kanb(h / 16 * w / 16, e1());
        convblock(e1(), c3(), h / 16, w / 16);
        kanb(h / 8 * w / 8, c3());
        convblock(c3(), c2(), h / 8, w / 8);
        convblock(c2(), c1(), h / 4, w / 4);
        convblock(c1(), c1(), h / 2, w / 2);
        conv(1, c1(), 1, h, w);
        return total;
    }

    void save(const std::string& path) const {
        std::vector<CheckpointEntry<T>> entries;
        for (const auto& [name, t] : reg.params)
            entries.push_back({name, "param", t.shape(), t.values()});
        for (const auto& [name, t] : reg.buffers)
            entries.push_back({name, "buffer", t.shape(), t.values()});
        save_checkpoint(path, cfg.to_json(), entries);
    }

    void load(const std::string& path) {
        auto [manifest, entries] = load_checkpoint<T>(path);
        KM_REQUIRE(entries.size() == reg.params.size() + reg.buffers.size(), IoError, path, " holds ",
                   entries.size(), " tensors, model wants ", reg.params.size() + reg.buffers.size());
        for (auto& e : entries) {
            Tensor<T>* t = reg.find(e.name);
            KM_REQUIRE(t != nullptr, IoError, path, " names unknown tensor ", e.name);
            KM_REQUIRE(t->shape() == e.shape, IoError, "checkpoint tensor ", e.name, " has shape ",
                       shape_str(e.shape), ", model wants ", shape_str(t->shape()));
            t->values() = std::move(e.values);
        }
    }
};

// seed-derived build so identical configs give identical weights
template <class T>
Model<T> build_model(const ModelConfig& cfg) {
    Rng rng(cfg.seed);
    return Model<T>(cfg, rng);
}

}  // namespace km
