#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <vector>

#include "safer/data.hpp"
#include "safer/errors.hpp"

using namespace safer;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("safer_data_test_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_bytes(const fs::path& file, const std::vector<unsigned char>& bytes) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("cifar-10 single-record fixture: red plane, label 3") {
    TempDir dir;
    std::vector<unsigned char> rec(3073, 0);
    rec[0] = 3;
    for (std::size_t i = 0; i < 1024; ++i) rec[1 + i] = 255;  // R plane
    const fs::path file = dir.path / "one.bin";
    write_bytes(file, rec);

    const Dataset ds = load_cifar10_binary(file.string(), Dataset::Split::train);
    CHECK(ds.size() == 1);
    CHECK(ds.labels[0] == 3);
    CHECK(ds.images.shape() == Shape{1, 3, 32, 32});
    for (std::size_t i = 0; i < 1024; ++i) {
        CHECK(ds.images.data()[i] == 1.0);          // R
        CHECK(ds.images.data()[1024 + i] == 0.0);   // G
        CHECK(ds.images.data()[2048 + i] == 0.0);   // B
    }
}

TEST_CASE("cifar-10 truncated file names the record size") {
    TempDir dir;
    const fs::path file = dir.path / "short.bin";
    write_bytes(file, std::vector<unsigned char>(3072, 0));
    CHECK_THROWS_WITH_AS(load_cifar10_binary(file.string(), Dataset::Split::train),
                         doctest::Contains("3073"), FormatError);
}

TEST_CASE("cifar-10 label byte out of range") {
    TempDir dir;
    std::vector<unsigned char> rec(3073, 0);
    rec[0] = 10;
    const fs::path file = dir.path / "badlabel.bin";
    write_bytes(file, rec);
    CHECK_THROWS_AS(load_cifar10_binary(file.string(), Dataset::Split::train), FormatError);
}

TEST_CASE("loaded datasets round-trip through the binary layout bit-exactly") {
    TempDir dir;
    std::vector<unsigned char> bytes;
    for (unsigned rec = 0; rec < 4; ++rec) {
        bytes.push_back(static_cast<unsigned char>(rec % 10));
        for (std::size_t i = 0; i < 3072; ++i)
            bytes.push_back(static_cast<unsigned char>((rec * 131 + i * 7) % 256));
    }
    const fs::path file = dir.path / "four.bin";
    write_bytes(file, bytes);

    const Dataset ds = load_cifar10_binary(file.string(), Dataset::Split::train);
    const fs::path out = dir.path / "roundtrip.bin";
    save_cifar10_binary(ds, out.string());
    const Dataset ds2 = load_cifar10_binary(out.string(), Dataset::Split::train);

    REQUIRE(ds2.size() == ds.size());
    CHECK(ds2.labels == ds.labels);
    CHECK(std::memcmp(ds.images.data(), ds2.images.data(), ds.images.size() * 8) == 0);

    // and the serialized bytes themselves are identical to the source
    std::ifstream a(file, std::ios::binary), b(out, std::ios::binary);
    const std::vector<char> ca((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    const std::vector<char> cb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(ca == cb);
}

TEST_CASE("cifar-10 directory layout and val split guard") {
    TempDir dir;
    CHECK_THROWS_AS(load_cifar10_binary(dir.path.string(), Dataset::Split::val), ConfigError);
}

TEST_CASE("synthetic dataset: determinism, balance, range") {
    const Dataset a = synth_dataset(103, 10, 16, 42);
    const Dataset b = synth_dataset(103, 10, 16, 42);
    const Dataset c = synth_dataset(103, 10, 16, 43);
    CHECK(std::memcmp(a.images.data(), b.images.data(), a.images.size() * 8) == 0);
    CHECK(a.labels == b.labels);
    CHECK(std::memcmp(a.images.data(), c.images.data(), a.images.size() * 8) != 0);

    std::map<std::int64_t, int> counts;
    for (const auto l : a.labels) counts[l]++;
    for (const auto& [label, count] : counts) {
        CHECK(label >= 0);
        CHECK(label < 10);
        CHECK(std::abs(count - 103 / 10) <= 1);
    }
    for (const double v : a.images.vec()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK_THROWS_AS(synth_dataset(5, 10, 16, 1), ConfigError);
    CHECK_THROWS_AS(synth_dataset(10, 1, 16, 1), ConfigError);
}

TEST_CASE("train/val split is a deterministic function of (seed, fraction)") {
    const Dataset ds = synth_dataset(60, 6, 8, 7);
    auto [t1, v1] = split_train_val(ds, 0.25, 99);
    auto [t2, v2] = split_train_val(ds, 0.25, 99);
    auto [t3, v3] = split_train_val(ds, 0.25, 100);
    CHECK(v1.size() == 15);
    CHECK(t1.size() == 45);
    CHECK(std::memcmp(t1.images.data(), t2.images.data(), t1.images.size() * 8) == 0);
    CHECK(std::memcmp(v1.images.data(), v2.images.data(), v1.images.size() * 8) == 0);
    CHECK(std::memcmp(v1.images.data(), v3.images.data(), v1.images.size() * 8) != 0);

    // disjoint: no val sample appears among train samples
    const std::size_t per = ds.images.size() / ds.size();
    for (std::size_t v = 0; v < v1.size(); ++v) {
        bool found = false;
        for (std::size_t t = 0; t < t1.size(); ++t) {
            if (std::memcmp(v1.images.data() + v * per, t1.images.data() + t * per, per * 8) == 0)
                found = true;
        }
        CHECK_FALSE(found);
    }
}

TEST_CASE("augment: no-op config is the identity") {
    const Dataset ds = synth_dataset(8, 4, 8, 3);
    AugmentConfig cfg;
    cfg.pad = 0;
    cfg.hflip_prob = 0.0;
    cfg.seed = 5;
    const Tensor out = augment(ds.images, cfg);
    CHECK(std::memcmp(out.data(), ds.images.data(), out.size() * 8) == 0);
}

TEST_CASE("augment: certain flip applied twice restores the original") {
    const Dataset ds = synth_dataset(8, 4, 8, 3);
    AugmentConfig cfg;
    cfg.pad = 0;
    cfg.hflip_prob = 1.0;
    cfg.seed = 5;
    const Tensor once = augment(ds.images, cfg);
    CHECK(std::memcmp(once.data(), ds.images.data(), once.size() * 8) != 0);
    const Tensor twice = augment(once, cfg);
    CHECK(std::memcmp(twice.data(), ds.images.data(), twice.size() * 8) == 0);
}

TEST_CASE("augment: deterministic, preserves shape and range") {
    const Dataset ds = synth_dataset(16, 4, 16, 11);
    AugmentConfig cfg;
    cfg.pad = 4;
    cfg.hflip_prob = 0.5;
    cfg.seed = 21;
    const Tensor a = augment(ds.images, cfg);
    const Tensor b = augment(ds.images, cfg);
    CHECK(a.shape() == ds.images.shape());
    CHECK(std::memcmp(a.data(), b.data(), a.size() * 8) == 0);
    for (const double v : a.vec()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    cfg.seed = 22;
    const Tensor c = augment(ds.images, cfg);
    CHECK(std::memcmp(a.data(), c.data(), a.size() * 8) != 0);

    AugmentConfig bad;
    bad.pad = 0;
    bad.crop = 20;
    CHECK_THROWS_AS(bad.validate(16), ConfigError);
    bad.crop = 0;
    bad.hflip_prob = 1.5;
    CHECK_THROWS_AS(bad.validate(16), ConfigError);
}

TEST_CASE("gather assembles batches by index") {
    const Dataset ds = synth_dataset(10, 5, 8, 2);
    const std::vector<std::size_t> idx{3, 7, 1};
    auto [images, labels] = gather(ds, idx);
    CHECK(images.shape() == Shape{3, 3, 8, 8});
    const std::size_t per = ds.images.size() / ds.size();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        CHECK(labels[i] == ds.labels[idx[i]]);
        CHECK(std::memcmp(images.data() + i * per, ds.images.data() + idx[i] * per, per * 8) == 0);
    }
}
