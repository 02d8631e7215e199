#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "km/gradcheck.hpp"
#include "km/model.hpp"
#include "oracles.hpp"

using km::ModelConfig;
using km::Tensor;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig c;
    c.conv_channels = {4, 6, 8};
    c.embed_dims = {10, 12};
    c.ssm_state = 2;
    c.spline_degree = 3;
    c.spline_grid = 4;
    c.seed = 7;
    return c;
}

}  // namespace

TEST_CASE("config validation catches bad pyramids and variants") {
    auto c = tiny_cfg();
    c.validate();
    c.conv_channels = {6, 6, 8};
    CHECK_THROWS_AS(c.validate(), km::ConfigError);
    c = tiny_cfg();
    c.embed_dims = {7, 9};  // below c3
    CHECK_THROWS_AS(c.validate(), km::ConfigError);
    c = tiny_cfg();
    c.variant = "bigger";
    CHECK_THROWS_AS(c.validate(), km::ConfigError);
    c = tiny_cfg();
    c.conv_channels = {4, 6};
    CHECK_THROWS_AS(c.validate(), km::ConfigError);
}

TEST_CASE("config json round trip") {
    auto c = tiny_cfg();
    c.variant = "mamba_boa_kan";
    c.classical_mamba = false;
    c.mamba_embed = 5;
    c.spline_lo = -1.5;
    auto j = c.to_json();
    auto c2 = ModelConfig::from_json(j);
    CHECK(c2.conv_channels == c.conv_channels);
    CHECK(c2.embed_dims == c.embed_dims);
    CHECK(c2.variant == c.variant);
    CHECK(c2.mamba_embed == 5);
    CHECK(c2.spline_lo == -1.5);
    CHECK(c2.seed == c.seed);
    auto d = ModelConfig::from_json(nlohmann::json::object());  // all defaults
    CHECK(d.conv_channels == std::vector<std::size_t>{16, 32, 64});
    CHECK(d.variant == "full");
}

TEST_CASE("model forward keeps the extent and emits one logit channel") {
    auto m = km::build_model<double>(tiny_cfg());
    km::Rng rng(401);
    auto x = km::randn<double>({1, 3, 64, 64}, rng);
    auto y = m.forward(x, false);
    CHECK(y.shape() == km::Shape{1, 1, 64, 64});
    auto x2 = km::randn<double>({2, 3, 32, 64}, rng);
    auto y2 = m.forward(x2, false);
    CHECK(y2.shape() == km::Shape{2, 1, 32, 64});
    for (double v : y.values()) {
        CHECK(std::isfinite(v));
        CHECK(std::abs(v) < 1e3);
    }
}

TEST_CASE("model rejects extents that are not divisible by 32") {
    auto m = km::build_model<double>(tiny_cfg());
    auto x = Tensor<double>::zeros({1, 3, 48, 64});
    try {
        m.forward(x, false);
        FAIL("expected a shape error");
    } catch (const km::ShapeError& e) {
        CHECK(std::string(e.what()).find("divisible by 32") != std::string::npos);
    }
}

TEST_CASE("parameter count matches the closed-form tally") {
    km::Rng rng(409);
    CHECK(km::he_init<double>({16, 3, 3, 3}, 27, rng).numel() == 432);
    km::SplineGrid<double> g(3, 5, -1.0, 1.0);
    km::KanLinear<double> kl(4, 8, g, km::kern::u_identity, rng);
    CHECK(kl.w_base.numel() + kl.w_spline.numel() == 288);

    auto cfg = tiny_cfg();
    auto m = km::build_model<double>(cfg);
    std::size_t c1 = 4, c2 = 6, c3 = 8, e1 = 10, e2 = 12, em = 4, S = 2;
    std::size_t nb = std::size_t(cfg.spline_grid + cfg.spline_degree);
    auto convblock = [](std::size_t ci, std::size_t co) {
        return 9 * ci * co + 2 * co + 9 * co * co + 2 * co;
    };
    auto kanb = [&](std::size_t d) { return 3 * (d * d + d * d * nb + 9 * d + 2 * d) + 2 * d; };
    auto ssm = [&](std::size_t d) { return d * S + d + d * d + d + 2 * S * d; };
    std::size_t attn = 2 * 7 * 7 + 1;
    std::size_t m1 = (em * c1 * 9 + 2 * em)            // patch embed
                     + kanb(em) + 5 + 5                // core and both activation bags
                     + ssm(em) + attn + em * em + em;  // scan, gate, token projection
    std::size_t expect = convblock(3, c1) + m1 + convblock(em, c2) + convblock(c2, c3)
                         + (e1 * c3 * 9 + 2 * e1) + kanb(e1) + 2 * e1       // p1, k1, l1
                         + (e2 * e1 * 9 + 2 * e2) + kanb(e2) + 2 * e2      // p2, k2, l2
                         + convblock(e2, e1) + kanb(e1) + convblock(e1, c3) + kanb(c3)
                         + convblock(c3, c2) + convblock(c2, c1) + convblock(c1, c1)
                         + c1 + 1;  // output head
    CHECK(m.count_params() == expect);
}

TEST_CASE("registry is duplicate-free and every parameter receives gradient") {
    auto cfg = tiny_cfg();
    cfg.mamba_embed = 5;  // forces both skip projections into the registry
    auto m = km::build_model<double>(cfg);
    CHECK(m.reg.names.size() == m.reg.params.size() + m.reg.buffers.size());
    CHECK(m.reg.find("m1_skip.w") != nullptr);
    CHECK(m.reg.find("m1.skip_w") != nullptr);
    km::Rng rng(419);
    auto x = km::randn<double>({1, 3, 64, 64}, rng, 1.0, true);
    auto y = m.forward(x, true);
    auto loss = km::mean_all(km::mul(y, y));
    loss.backward();
    for (auto& [name, t] : m.reg.params) {
        INFO("parameter ", name);
        CHECK(t.has_grad());
    }
}

TEST_CASE("all variants build, forward the same shape, and differ structurally") {
    km::Rng rng(421);
    auto x = km::randn<double>({1, 3, 32, 32}, rng);
    km::Shape want{1, 1, 32, 32};
    for (const char* v : {"mamba_mlp", "mamba_kan", "mamba_boa_kan", "full"}) {
        auto cfg = tiny_cfg();
        cfg.variant = v;
        auto m = km::build_model<double>(cfg);
        auto y = m.forward(x, false);
        CHECK(y.shape() == want);
        bool is_mlp = std::string(v) == "mamba_mlp";
        CHECK((m.m1->mlp != nullptr) == is_mlp);
        CHECK((m.m1->kanb != nullptr) == !is_mlp);
        CHECK((m.m1->bag_main != nullptr) == (std::string(v) == "mamba_boa_kan" || std::string(v) == "full"));
        CHECK((m.m1->bag_gate != nullptr) == (std::string(v) == "full"));
    }
    auto cfg = tiny_cfg();
    cfg.classical_mamba = true;
    auto m = km::build_model<double>(cfg);
    CHECK(m.m1c != nullptr);
    CHECK(m.forward(x, false).shape() == want);
    cfg.mamba_embed = 5;  // classical block cannot change width
    CHECK_THROWS_AS(km::build_model<double>(cfg), km::ConfigError);
}

TEST_CASE("eval forward is deterministic and batch items are independent") {
    auto m = km::build_model<double>(tiny_cfg());
    km::Rng rng(431);
    auto x = km::randn<double>({2, 3, 32, 32}, rng);
    auto y1 = m.forward(x, false);
    auto y2 = m.forward(x, false);
    for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(y1.values()[i] == y2.values()[i]);

    std::size_t per = 3 * 32 * 32;
    auto xa = Tensor<double>::zeros({1, 3, 32, 32});
    auto xb = Tensor<double>::zeros({1, 3, 32, 32});
    for (std::size_t i = 0; i < per; ++i) {
        xa.values()[i] = x.values()[i];
        xb.values()[i] = x.values()[per + i];
    }
    auto ya = m.forward(xa, false);
    auto yb = m.forward(xb, false);
    std::size_t oper = 32 * 32;
    for (std::size_t i = 0; i < oper; ++i) {
        CHECK(std::abs(y1.values()[i] - ya.values()[i]) < 1e-6);
        CHECK(std::abs(y1.values()[oper + i] - yb.values()[i]) < 1e-6);
    }
}

TEST_CASE("every variant passes a full-model gradient check") {
    // The fusion width must not be tiny here: when every channel of a token row
    // comes out of the kan layer relu-clamped to zero, the row's layer norm sees
    // variance exactly zero and 1/sqrt(var+eps) turns any relu kink upstream of
    // it into a ~300x amplifier that finite differences then straddle. Width 8
    // keeps such rows out of the draw; the seeds are pinned so no probed
    // coordinate lands inside a kink window.
    ModelConfig base;
    base.conv_channels = {2, 3, 4};
    base.embed_dims = {5, 6};
    base.mamba_embed = 8;
    base.ssm_state = 2;
    base.spline_degree = 2;
    base.spline_grid = 3;
    base.seed = 12;
    km::Rng rng(433);
    auto x = km::randn<double>({1, 3, 64, 64}, rng, 0.5, true);
    for (const char* v : {"mamba_mlp", "mamba_kan", "mamba_boa_kan", "full"}) {
        auto cfg = base;
        cfg.variant = v;
        auto m = km::build_model<double>(cfg);
        std::vector<Tensor<double>> inputs = {x};
        for (auto& [name, t] : m.reg.params) inputs.push_back(t);
        km::Rng crng(1);
        double err = km::fd_check<double>(
            [&] {
                auto y = m.forward(x, true);
                return km::mean_all(km::mul(y, y));
            },
            inputs, 1e-6, 25, &crng);
        INFO("variant ", std::string(v));
        CHECK(err < 1e-4);
    }
}

TEST_CASE("mac counter is linear in batch size and sensitive to the variant") {
    auto cfg = tiny_cfg();
    auto m = km::build_model<double>(cfg);
    auto one = m.count_macs(1, 64, 64);
    CHECK(one > 0);
    CHECK(m.count_macs(2, 64, 64) == 2 * one);
    CHECK(m.count_macs(5, 64, 64) == 5 * one);
    CHECK_THROWS_AS(m.count_macs(1, 48, 64), km::ShapeError);

    auto cfg_mlp = tiny_cfg();
    cfg_mlp.variant = "mamba_mlp";
    auto m_mlp = km::build_model<double>(cfg_mlp);
    CHECK(m_mlp.count_macs(1, 64, 64) < one);  // spline path costs more than the mlp

    auto cfg_cl = tiny_cfg();
    cfg_cl.classical_mamba = true;
    auto m_cl = km::build_model<double>(cfg_cl);
    CHECK(m_cl.count_macs(1, 64, 64) != one);
}

TEST_CASE("tensor blob survives a file round trip") {
    km::Rng rng(439);
    auto t = km::randn<double>({3, 5, 2}, rng);
    {
        std::ofstream out("blob_rt.kmtc", std::ios::binary);
        km::write_tensor_blob<double>(out, t.shape(), t.values());
    }
    {
        std::ifstream in("blob_rt.kmtc", std::ios::binary);
        auto [shape, values] = km::read_tensor_blob<double>(in);
        CHECK(shape == t.shape());
        for (std::size_t i = 0; i < values.size(); ++i) CHECK(values[i] == t.values()[i]);
    }
    {
        std::ifstream in("blob_rt.kmtc", std::ios::binary);
        CHECK_THROWS_AS(km::read_tensor_blob<float>(in), km::IoError);  // dtype mismatch
    }
    std::remove("blob_rt.kmtc");
}

TEST_CASE("checkpoint round trip restores every tensor and the config") {
    auto cfg = tiny_cfg();
    auto a = km::build_model<double>(cfg);
    // distinct running stats so buffers are exercised too
    km::Rng rng(443);
    auto x = km::randn<double>({2, 3, 32, 32}, rng);
    a.forward(x, true);
    a.save("ckpt_rt.kmck");

    auto cfg_b = cfg;
    cfg_b.seed = 999;
    auto b = km::build_model<double>(cfg_b);
    bool differed = false;
    for (std::size_t i = 0; i < a.o1_w.numel(); ++i)
        differed = differed || a.o1_w.values()[i] != b.o1_w.values()[i];
    CHECK(differed);
    b.load("ckpt_rt.kmck");
    for (auto& [name, t] : a.reg.params) {
        auto* other = b.reg.find(name);
        REQUIRE(other != nullptr);
        for (std::size_t i = 0; i < t.numel(); ++i) CHECK(t.values()[i] == other->values()[i]);
    }
    for (auto& [name, t] : a.reg.buffers) {
        auto* other = b.reg.find(name);
        REQUIRE(other != nullptr);
        for (std::size_t i = 0; i < t.numel(); ++i) CHECK(t.values()[i] == other->values()[i]);
    }
    auto manifest = km::read_checkpoint_manifest("ckpt_rt.kmck");
    CHECK(ModelConfig::from_json(manifest.at("config")).variant == cfg.variant);
    CHECK(manifest.at("dtype").get<std::string>() == "f64");

    // wrong dtype refuses to load
    CHECK_THROWS_AS(km::load_checkpoint<float>("ckpt_rt.kmck"), km::IoError);

    // mismatched architecture names the offending tensor
    auto cfg_c = tiny_cfg();
    cfg_c.conv_channels = {5, 6, 8};
    auto c = km::build_model<double>(cfg_c);
    try {
        c.load("ckpt_rt.kmck");
        FAIL("expected a shape complaint");
    } catch (const km::IoError& e) {
        CHECK(std::string(e.what()).find("shape") != std::string::npos);
    }
    std::remove("ckpt_rt.kmck");
}

TEST_CASE("float model saves and reloads in float") {
    auto cfg = tiny_cfg();
    auto a = km::build_model<float>(cfg);
    a.save("ckpt_f32.kmck");
    auto b = km::build_model<float>(cfg);
    b.load("ckpt_f32.kmck");
    for (std::size_t i = 0; i < a.o1_w.numel(); ++i)
        CHECK(a.o1_w.values()[i] == b.o1_w.values()[i]);
    auto manifest = km::read_checkpoint_manifest("ckpt_f32.kmck");
    CHECK(manifest.at("dtype").get<std::string>() == "f32");
    std::remove("ckpt_f32.kmck");
}

TEST_CASE("stage norm placement flag changes the forward result") {
    km::Rng rng(449);
    auto x = km::randn<double>({1, 3, 32, 32}, rng);
    auto cfg = tiny_cfg();
    auto after = km::build_model<double>(cfg);
    cfg.stage_norm_after_kan = false;
    auto before = km::build_model<double>(cfg);
    auto ya = after.forward(x, false);
    auto yb = before.forward(x, false);
    CHECK(oracle::max_abs_diff(ya.values().data(), yb.values().data(), ya.numel()) > 0.0);
}
