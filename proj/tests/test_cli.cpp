// End-to-end tests of the command-line surface; the binary path arrives as
// argv[1] from ctest.
#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"
#include "safer/sha256.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string g_cli;

int run(const std::string& args) {
    const std::string cmd = g_cli + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    std::ostringstream oss;
    oss << in.rdbuf();
    return oss.str();
}

std::string digest(const fs::path& p) {
    const std::string bytes = slurp(p);
    return safer::sha256_hex(bytes.data(), bytes.size());
}

struct TempDir {
    fs::path path;
    explicit TempDir(const char* tag) {
        path = fs::temp_directory_path() / (std::string("safer_cli_") + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& content) {
    std::ofstream out(p, std::ios::trunc | std::ios::binary);
    out << content;
}

const char* kTinyConfig = R"(
# desk-scale smoke configuration
seed = 7
model.image_size = 8
model.patch_size = 4
model.embed_dim = 16
model.depth = 2
model.heads = 2
model.num_classes = 4
data.n = 48
data.val_fraction = 0.25
train.batch_size = 8
train.eval_samples = 8
attack.steps = 3
augment.pad = 1
schedule.pretrain_clean_epochs = 1
schedule.pretrain_adv_epochs = 1
schedule.finetune_epochs = 2
schedule.reselect_interval = 2
sharpness.batch_size = 8
)";

}  // namespace

TEST_CASE("train is deterministic across identical invocations") {
    TempDir dir("train");
    write_file(dir.path / "run.cfg", kTinyConfig);
    const fs::path out1 = dir.path / "run1";
    const fs::path out2 = dir.path / "run2";
    CHECK(run("train --config " + (dir.path / "run.cfg").string() + " --output-dir " + out1.string()) == 0);
    CHECK(run("train --config " + (dir.path / "run.cfg").string() + " --output-dir " + out2.string()) == 0);

    CHECK(fs::exists(out1 / "config.resolved"));
    CHECK(fs::exists(out1 / "train_log.jsonl"));
    CHECK(fs::exists(out1 / "sharpness_final.json"));
    CHECK(digest(out1 / "train_log.csv") == digest(out2 / "train_log.csv"));
    CHECK(digest(out1 / "final.bin") == digest(out2 / "final.bin"));

    // run directories refuse silent overwrites
    CHECK(run("train --config " + (dir.path / "run.cfg").string() + " --output-dir " + out1.string()) == 2);
    CHECK(run("train --force --config " + (dir.path / "run.cfg").string() + " --output-dir " +
              out1.string()) == 0);

    // a different seed produces a different trajectory
    const fs::path out3 = dir.path / "run3";
    CHECK(run("train --seed 8 --config " + (dir.path / "run.cfg").string() + " --output-dir " +
              out3.string()) == 0);
    CHECK(digest(out1 / "train_log.csv") != digest(out3 / "train_log.csv"));

    // the resolved config reproduces the run byte for byte
    const fs::path out4 = dir.path / "run4";
    CHECK(run("train --config " + (out1 / "config.resolved").string() + " --output-dir " + out4.string()) ==
          0);
    CHECK(digest(out1 / "final.bin") == digest(out4 / "final.bin"));
}

TEST_CASE("config errors exit with code 2 and name the offending key") {
    TempDir dir("badcfg");
    write_file(dir.path / "bad.cfg", std::string(kTinyConfig) + "mystery.knob = 1\n");
    CHECK(run("train --config " + (dir.path / "bad.cfg").string() + " --output-dir " +
              (dir.path / "out").string()) == 2);

    write_file(dir.path / "bad2.cfg", std::string(kTinyConfig) + "model.heads = 0\n");
    CHECK(run("train --config " + (dir.path / "bad2.cfg").string() + " --output-dir " +
              (dir.path / "out2").string()) == 2);

    CHECK(run("train --config " + (dir.path / "missing.cfg").string()) == 2);
    CHECK(run("frobnicate") == 2);
}

TEST_CASE("malformed data files exit with code 3") {
    TempDir dir("baddata");
    write_file(dir.path / "short.bin", std::string(3072, '\0'));
    std::string cfg(kTinyConfig);
    cfg += "data.source = cifar10\n";
    cfg += "data.path = " + (dir.path / "short.bin").string() + "\n";
    cfg += "model.image_size = 32\nmodel.patch_size = 8\nmodel.num_classes = 10\n";
    write_file(dir.path / "cifar.cfg", cfg);
    CHECK(run("train --config " + (dir.path / "cifar.cfg").string() + " --output-dir " +
              (dir.path / "out").string()) == 3);
}

TEST_CASE("eval: steps-0 preset equals clean accuracy, self-transfer matches white-box") {
    TempDir dir("eval");
    write_file(dir.path / "run.cfg", kTinyConfig);
    const fs::path rundir = dir.path / "run";
    REQUIRE(run("train --config " + (dir.path / "run.cfg").string() + " --output-dir " + rundir.string()) ==
            0);

    const fs::path evaldir = dir.path / "evalout";
    REQUIRE(run("eval --checkpoint " + (rundir / "final.bin").string() + " --checkpoint " +
                (rundir / "ckpt_epoch_2.bin").string() + " --presets clean,pgd20 --n 32 --batch-size 16" +
                " --output-dir " + evaldir.string() + " --seed 3") == 0);

    const json out = json::parse(slurp(evaldir / "eval_results.json"));
    REQUIRE(out.contains("records"));
    bool saw_clean = false;
    for (const auto& rec : out["records"]) {
        if (rec["preset"] == "clean") {
            saw_clean = true;
            CHECK(rec["robust_acc"] == rec["clean_acc"]);  // no perturbation at zero steps
        }
        CHECK(rec["n_samples"] == 32);
        CHECK(rec["attack"].contains("eps"));
    }
    CHECK(saw_clean);

    REQUIRE(out.contains("transfer"));
    const auto& tr = out["transfer"]["pgd20"]["robust_acc"];
    double white0 = -1.0;
    for (const auto& rec : out["records"])
        if (rec["preset"] == "pgd20" && rec["model_id"] == "final") white0 = rec["robust_acc"];
    CHECK(tr[0][0] == white0);  // self-transfer cell equals the white-box cell
}

TEST_CASE("sharpness command writes reports with timing") {
    TempDir dir("sharp");
    write_file(dir.path / "run.cfg", kTinyConfig);
    const fs::path rundir = dir.path / "run";
    REQUIRE(run("train --config " + (dir.path / "run.cfg").string() + " --output-dir " + rundir.string()) ==
            0);

    const fs::path outdir = dir.path / "sharpout";
    REQUIRE(run("sharpness --checkpoint " + (rundir / "final.bin").string() +
                " --method both --batch-sizes 8,16 --n 64 --output-dir " + outdir.string() +
                " --seed 5") == 0);
    for (const char* name : {"sharpness_estimator_bs8.json", "sharpness_estimator_bs16.json",
                             "sharpness_oracle_bs8.json", "sharpness_oracle_bs16.json"}) {
        REQUIRE(fs::exists(outdir / name));
        const json rep = json::parse(slurp(outdir / name));
        CHECK(rep["wall_seconds"].get<double>() > 0.0);
        CHECK(rep["layers"].size() > 0);
        CHECK(rep.contains("selected"));
    }
    // estimator and oracle rank the same layer list
    const json est = json::parse(slurp(outdir / "sharpness_estimator_bs8.json"));
    const json ora = json::parse(slurp(outdir / "sharpness_oracle_bs8.json"));
    REQUIRE(est["layers"].size() == ora["layers"].size());
    for (std::size_t i = 0; i < est["layers"].size(); ++i)
        CHECK(est["layers"][i]["name"] == ora["layers"][i]["name"]);

    CHECK(run("sharpness --checkpoint " + (dir.path / "nothere.bin").string()) == 3);
}

TEST_CASE("landscape command exports a parsable grid") {
    TempDir dir("land");
    write_file(dir.path / "run.cfg", kTinyConfig);
    const fs::path rundir = dir.path / "run";
    REQUIRE(run("train --config " + (dir.path / "run.cfg").string() + " --output-dir " + rundir.string()) ==
            0);

    const fs::path outdir = dir.path / "landout";
    REQUIRE(run("landscape --checkpoint " + (rundir / "final.bin").string() +
                " --layer head --n 16 --resolution 5 --extent 0.05 --output-dir " + outdir.string() +
                " --seed 9") == 0);
    const fs::path csv = outdir / "landscape_head.csv";
    REQUIRE(fs::exists(csv));
    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK(header == "a,b,loss");
    std::size_t rows = 0;
    for (std::string line; std::getline(in, line);) ++rows;
    CHECK(rows == 25);

    CHECK(run("landscape --checkpoint " + (rundir / "final.bin").string() +
              " --layer head --resolution 4 --output-dir " + outdir.string()) == 2);  // even resolution
}

TEST_CASE("sweep command records per-point results") {
    TempDir dir("sweep");
    std::string cfg(kTinyConfig);
    cfg += "schedule.pretrain_clean_epochs = 0\nschedule.finetune_epochs = 1\n";
    write_file(dir.path / "run.cfg", cfg);
    const fs::path outdir = dir.path / "sweepout";
    REQUIRE(run("sweep --config " + (dir.path / "run.cfg").string() +
                " --axis layer_count --grid 0,1 --output-dir " + outdir.string()) == 0);
    REQUIRE(fs::exists(outdir / "sweep_layer_count.csv"));
    const json points = json::parse(slurp(outdir / "sweep_layer_count.json"));
    REQUIRE(points.size() == 2);
    for (const auto& p : points) CHECK_FALSE(p["failed"].get<bool>());

    CHECK(run("sweep --config " + (dir.path / "run.cfg").string() +
              " --axis bogus --grid 1 --output-dir " + (dir.path / "x").string()) == 2);
}

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: test_cli <path-to-safer-binary>\n");
        return 2;
    }
    g_cli = argv[1];
    doctest::Context ctx;
    ctx.applyCommandLine(1, argv);
    return ctx.run();
}
