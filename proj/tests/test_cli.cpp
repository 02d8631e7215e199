#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "km/cli.hpp"
#include "km/image_io.hpp"
#include "km/model.hpp"

namespace fs = std::filesystem;

namespace {

int run(const std::vector<std::string>& args) {
    std::vector<const char*> argv = {"kanmamba"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return km::run_cli(int(argv.size()), argv.data());
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::vector<std::string> lines;
    std::string l;
    while (std::getline(in, l)) lines.push_back(l);
    return lines;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

struct TempDir {
    fs::path p;
    explicit TempDir(const std::string& name) : p(name) {
        fs::remove_all(p);
        fs::create_directories(p);
    }
    ~TempDir() { fs::remove_all(p); }
};

const char* kTinyConfig = R"({
  "model": {
    "conv_channels": [2, 3, 4],
    "embed_dims": [5, 6],
    "mamba_embed": 8,
    "ssm_state": 2,
    "spline_degree": 2,
    "spline_grid": 3,
    "variant": "full",
    "seed": 5
  },
  "train": {"epochs": 1, "batch": 4, "seed": 7}
})";

void write_tiny_config(const fs::path& path) {
    std::ofstream out(path);
    out << kTinyConfig;
}

}  // namespace

TEST_CASE("bad invocations are usage errors") {
    CHECK(run({}) == 1);                          // no subcommand
    CHECK(run({"frobnicate"}) == 1);              // unknown subcommand
    CHECK(run({"synth", "--bogus", "1"}) == 1);   // unknown flag
    CHECK(run({"synth"}) == 1);                   // missing --out
    CHECK(run({"train", "--data", "x"}) == 1);    // missing --out
    CHECK(run({"eval", "--data", "x"}) == 1);     // missing --checkpoint
    CHECK(run({"train", "--data", "x", "--out", "y", "--precision", "f16"}) == 1);
    CHECK(run({"--help"}) == 0);
}

TEST_CASE("synth writes byte-identical trees for the same seed") {
    TempDir ta("cli_synth_a"), tb("cli_synth_b");
    std::vector<std::string> base = {"synth", "--n", "3", "--size", "32", "--seed", "9", "--out"};
    auto a = base;
    a.push_back(ta.p.string());
    auto b = base;
    b.push_back(tb.p.string());
    CHECK(run(a) == 0);
    CHECK(run(b) == 0);
    for (const char* sub : {"images", "masks"}) {
        for (int i = 0; i < 3; ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "synth-%04d.pgm", i);
            auto fa = ta.p / sub / name;
            auto fb = tb.p / sub / name;
            REQUIRE(fs::exists(fa));
            REQUIRE(fs::exists(fb));
            CHECK(read_bytes(fa) == read_bytes(fb));
        }
    }
}

TEST_CASE("train, eval, and predict round-trip") {
    TempDir td("cli_roundtrip");
    auto dsdir = (td.p / "ds").string();
    CHECK(run({"synth", "--n", "8", "--size", "64", "--seed", "11", "--out", dsdir}) == 0);

    auto cfg = td.p / "tiny.json";
    write_tiny_config(cfg);
    auto rundir = (td.p / "run").string();
    CHECK(run({"train", "--config", cfg.string(), "--data", dsdir, "--out", rundir}) == 0);

    auto lines = read_lines(rundir + "/metrics.csv");
    REQUIRE(lines.size() == 2);
    CHECK(lines[0] == "epoch,split,iou,f1,accuracy,auc,precision,recall,loss,lr");
    CHECK(fs::exists(rundir + "/best.ckpt"));
    CHECK(fs::exists(rundir + "/last.ckpt"));

    auto evaldir = (td.p / "evald").string();
    CHECK(run({"eval", "--checkpoint", rundir + "/best.ckpt", "--data", dsdir, "--out",
               evaldir}) == 0);
    auto elines = read_lines(evaldir + "/eval.csv");
    REQUIRE(elines.size() == 2);
    CHECK(elines[1].substr(0, 7) == "0,eval,");

    auto preddir = (td.p / "preds").string();
    CHECK(run({"predict", "--checkpoint", rundir + "/best.ckpt", "--data", dsdir, "--out",
               preddir}) == 0);
    for (int i = 0; i < 8; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "synth-%04d.pgm", i);
        auto p = fs::path(preddir) / name;
        REQUIRE(fs::exists(p));
        auto img = km::read_image(p.string());
        CHECK(img.w == 64);
        CHECK(img.h == 64);
        for (unsigned char v : img.px) CHECK((v == 0 || v == 255));
    }
}

TEST_CASE("complexity agrees with the model counters and honors overrides") {
    TempDir td("cli_complexity");
    auto cfg = td.p / "tiny.json";
    write_tiny_config(cfg);

    auto outdir = (td.p / "c1").string();
    CHECK(run({"complexity", "--config", cfg.string(), "--size", "64", "--out", outdir}) == 0);
    auto lines = read_lines(outdir + "/complexity.txt");
    REQUIRE(lines.size() == 3);

    km::ModelConfig mc;
    mc.conv_channels = {2, 3, 4};
    mc.embed_dims = {5, 6};
    mc.mamba_embed = 8;
    mc.ssm_state = 2;
    mc.spline_degree = 2;
    mc.spline_grid = 3;
    mc.seed = 5;
    auto m = km::build_model<float>(mc);
    CHECK(lines[0] == "variant full");
    CHECK(lines[1] == "params " + std::to_string(m.count_params()));
    CHECK(lines[2] == "macs " + std::to_string(m.count_macs(1, 64, 64)));

    // flag wins over the config file
    auto outdir2 = (td.p / "c2").string();
    CHECK(run({"complexity", "--config", cfg.string(), "--variant", "mamba_mlp", "--size", "64",
               "--out", outdir2}) == 0);
    auto lines2 = read_lines(outdir2 + "/complexity.txt");
    mc.variant = "mamba_mlp";
    auto m2 = km::build_model<float>(mc);
    CHECK(lines2[0] == "variant mamba_mlp");
    CHECK(lines2[1] == "params " + std::to_string(m2.count_params()));
    CHECK(m2.count_params() != m.count_params());
}

TEST_CASE("gradcheck passes its gate at f64") {
    TempDir td("cli_gradcheck");
    auto outdir = (td.p / "g").string();
    CHECK(run({"gradcheck", "--precision", "f64", "--out", outdir}) == 0);
    auto lines = read_lines(outdir + "/gradcheck.txt");
    CHECK(lines.size() == 15);
    for (const auto& l : lines) {
        auto pos = l.find_last_of(' ');
        REQUIRE(pos != std::string::npos);
        CHECK(std::stod(l.substr(pos + 1)) < 1e-4);
    }
}

TEST_CASE("ablate completes all four variants and writes the comparison") {
    TempDir td("cli_ablate");
    auto cfg = td.p / "tiny.json";
    write_tiny_config(cfg);
    auto outdir = (td.p / "ab").string();
    CHECK(run({"ablate", "--config", cfg.string(), "--out", outdir, "--n", "8", "--size", "64",
               "--epochs", "1", "--seed", "3"}) == 0);
    auto lines = read_lines(outdir + "/ablation.csv");
    REQUIRE(lines.size() == 5);
    CHECK(lines[0] == "variant,params,epochs,train_iou,val_iou,train_loss");
    const char* variants[] = {"mamba_mlp", "mamba_kan", "mamba_boa_kan", "full"};
    for (int i = 0; i < 4; ++i) {
        CHECK(lines[i + 1].substr(0, std::string(variants[i]).size() + 1) ==
              std::string(variants[i]) + ",");
        CHECK(fs::exists(fs::path(outdir) / variants[i] / "last.ckpt"));
    }
}

TEST_CASE("runtime failures exit two") {
    TempDir td("cli_runtime");
    CHECK(run({"eval", "--checkpoint", (td.p / "missing.ckpt").string(), "--data",
               td.p.string(), "--out", (td.p / "o").string()}) == 2);
}
