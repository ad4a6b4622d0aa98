#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "safer/checkpoint.hpp"
#include "safer/errors.hpp"
#include "safer/rng.hpp"
#include "safer/sha256.hpp"
#include "safer/vit.hpp"

using namespace safer;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("safer_ckpt_test_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

ViTConfig tiny_cfg() {
    ViTConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.num_classes = 4;
    cfg.seed = 17;
    return cfg;
}

std::string file_digest(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return sha256_hex(bytes.data(), bytes.size());
}

}  // namespace

TEST_CASE("sha256 matches the NIST vectors") {
    CHECK(sha256_hex("", 0) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc", 3) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    const char* msg = "abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq";
    CHECK(sha256_hex(msg, 56) == "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
}

TEST_CASE("checkpoint round-trip is bit-exact, including trainer state") {
    TempDir dir;
    const Model model = Model::build(tiny_cfg());

    TrainerState state;
    state.present = true;
    state.epoch = 12;
    state.phase = 3;
    state.selected = {2, 7};
    Rng rng(5);
    for (const Param& p : model.params()) {
        std::vector<double> m(p.tensor.size());
        for (double& v : m) v = rng.uniform(-0.1, 0.1);
        state.momentum.push_back(std::move(m));
    }
    state.rng = {1, 2, 3, 4};

    const fs::path file = dir.path / "model.bin";
    save_checkpoint(file.string(), model, state);
    const Checkpoint loaded = load_checkpoint(file.string());

    REQUIRE(loaded.model.params().size() == model.params().size());
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        const auto& a = model.params()[i].tensor;
        const auto& b = loaded.model.params()[i].tensor;
        CHECK(model.params()[i].name == loaded.model.params()[i].name);
        REQUIRE(a.shape() == b.shape());
        CHECK(std::memcmp(a.data(), b.data(), a.size() * 8) == 0);
    }
    CHECK(loaded.state.present);
    CHECK(loaded.state.epoch == 12);
    CHECK(loaded.state.phase == 3);
    CHECK(loaded.state.selected == std::vector<std::uint32_t>{2, 7});
    CHECK(loaded.state.rng == std::array<std::uint64_t, 4>{1, 2, 3, 4});
    REQUIRE(loaded.state.momentum.size() == state.momentum.size());
    for (std::size_t i = 0; i < state.momentum.size(); ++i)
        CHECK(std::memcmp(loaded.state.momentum[i].data(), state.momentum[i].data(),
                          state.momentum[i].size() * 8) == 0);

    // saving the loaded model again reproduces the file byte for byte
    const fs::path file2 = dir.path / "model2.bin";
    save_checkpoint(file2.string(), loaded.model, loaded.state);
    CHECK(file_digest(file) == file_digest(file2));
}

TEST_CASE("checkpoint round-trips adapter-wrapped models") {
    TempDir dir;
    for (const auto kind : {AdapterConfig::Kind::lora, AdapterConfig::Kind::dora}) {
        Model model = Model::build(tiny_cfg());
        AdapterConfig acfg;
        acfg.kind = kind;
        acfg.rank = 2;
        model.wrap_adapters(acfg);

        const fs::path file = dir.path / (std::string("adapter_") + adapter_kind_name(kind) + ".bin");
        save_checkpoint(file.string(), model);
        const Checkpoint loaded = load_checkpoint(file.string());
        CHECK(loaded.model.has_adapters());
        CHECK(loaded.model.adapter_config().kind == kind);
        REQUIRE(loaded.model.params().size() == model.params().size());
        for (std::size_t i = 0; i < model.params().size(); ++i) {
            const auto& a = model.params()[i].tensor;
            const auto& b = loaded.model.params()[i].tensor;
            CHECK(std::memcmp(a.data(), b.data(), a.size() * 8) == 0);
        }
        CHECK(loaded.model.registry().size() == model.registry().size());
    }
}

TEST_CASE("checkpoint rejects bad magic, bad version and truncation") {
    TempDir dir;
    const Model model = Model::build(tiny_cfg());
    const fs::path file = dir.path / "model.bin";
    save_checkpoint(file.string(), model);

    std::vector<char> bytes;
    {
        std::ifstream in(file, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }

    const auto write_variant = [&](const fs::path& p, std::vector<char> b) {
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        out.write(b.data(), static_cast<std::streamsize>(b.size()));
    };

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    write_variant(dir.path / "magic.bin", bad_magic);
    CHECK_THROWS_AS(load_checkpoint((dir.path / "magic.bin").string()), FormatError);

    auto bad_version = bytes;
    bad_version[9] = 99;
    write_variant(dir.path / "version.bin", bad_version);
    CHECK_THROWS_AS(load_checkpoint((dir.path / "version.bin").string()), VersionError);

    auto truncated = bytes;
    truncated.resize(truncated.size() / 2);
    write_variant(dir.path / "trunc.bin", truncated);
    CHECK_THROWS_AS(load_checkpoint((dir.path / "trunc.bin").string()), FormatError);

    CHECK_THROWS_AS(load_checkpoint((dir.path / "missing.bin").string()), IoError);
}
