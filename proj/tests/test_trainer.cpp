#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "safer/checkpoint.hpp"
#include "safer/data.hpp"
#include "safer/errors.hpp"
#include "safer/kernels.hpp"
#include "safer/ops.hpp"
#include "safer/optim.hpp"
#include "safer/rng.hpp"
#include "safer/sha256.hpp"
#include "safer/tape.hpp"
#include "safer/trainer.hpp"
#include "safer/vit.hpp"

using namespace safer;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const char* tag) {
        path = fs::temp_directory_path() / (std::string("safer_trainer_") + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

ViTConfig tiny_cfg(std::uint64_t seed = 3) {
    ViTConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.num_classes = 4;
    cfg.seed = seed;
    return cfg;
}

std::string model_digest(const Model& m) {
    std::string out;
    for (const LayerHandle& h : m.registry()) out += m.digest(h.index);
    return out;
}

std::string file_digest(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return sha256_hex(bytes.data(), bytes.size());
}

void seed_grads(Model& m, std::uint64_t seed) {
    m.zero_grads();
    Rng rng(seed);
    for (Param& p : m.params()) {
        Tensor t = p.tensor;
        for (std::size_t i = 0; i < t.size(); ++i)
            const_cast<double*>(t.grad())[i] = rng.uniform(-1.0, 1.0);
    }
}

AttackConfig fast_attack() {
    AttackConfig cfg;
    cfg.steps = 3;
    return cfg;
}

}  // namespace

TEST_CASE("sam perturbation: hand case, zero gradient, exact norm") {
    Model m = Model::build(tiny_cfg());
    m.zero_grads();
    const int norm1 = m.handle_index("block0.norm1");
    // plant g = (3, 4) on two coordinates of the norm1 handle
    {
        const int pid = m.params_of(norm1)[0];
        Tensor t = m.params()[static_cast<std::size_t>(pid)].tensor;
        const_cast<double*>(t.grad())[0] = 3.0;
        const_cast<double*>(t.grad())[1] = 4.0;
    }
    const auto eps = sam_perturbation(m, {norm1}, 1.0, OptimizerConfig::SamNorm::per_layer);
    REQUIRE(eps.size() == 1);
    CHECK(eps[0].grad_norm == doctest::Approx(5.0));
    CHECK(eps[0].eps[0][0] == doctest::Approx(0.6).epsilon(1e-14));
    CHECK(eps[0].eps[0][1] == doctest::Approx(0.8).epsilon(1e-14));

    // zero gradient layer gets a zero perturbation
    const int norm2 = m.handle_index("block0.norm2");
    const auto zeps = sam_perturbation(m, {norm2}, 1.0, OptimizerConfig::SamNorm::per_layer);
    for (const auto& block : zeps[0].eps)
        for (const double v : block) CHECK(v == 0.0);

    // random gradients: each selected layer's eps has norm exactly rho
    seed_grads(m, 7);
    const double rho = 0.37;
    const std::vector<int> selected = m.rankable_handles(default_rankable_roles());
    const auto all = sam_perturbation(m, selected, rho, OptimizerConfig::SamNorm::per_layer);
    for (const auto& he : all) {
        double sq = 0;
        for (const auto& block : he.eps) sq += kernels::active().dot(block.data(), block.data(), block.size());
        CHECK(std::fabs(std::sqrt(sq) - rho) <= 1e-12);
    }

    // joint normalization: the concatenated perturbation has norm rho
    const auto joint = sam_perturbation(m, selected, rho, OptimizerConfig::SamNorm::joint);
    double total_sq = 0;
    for (const auto& he : joint)
        for (const auto& block : he.eps)
            total_sq += kernels::active().dot(block.data(), block.data(), block.size());
    CHECK(std::fabs(std::sqrt(total_sq) - rho) <= 1e-12);
}

TEST_CASE("textbook SAM on a two-parameter quadratic, hand-executed") {
    // f(w) = 0.5 ||w||^2 at w = (3, 4), rho = 0.1, lr = 0.1, no momentum:
    //   g = w, eps = rho w / ||w|| = (0.06, 0.08)
    //   g' = w + eps = (3.06, 4.08), w' = w - lr g' = (2.694, 3.592)
    std::vector<double> w{3.0, 4.0};
    const double rho = 0.1, lr = 0.1;

    const auto grad_at = [&](const std::vector<double>& point) {
        Tensor t = Tensor::from({2}, point);
        t.set_requires_grad(true);
        Tape tape;
        Tape::Scope scope(tape);
        const Tensor loss = ops::mul(ops::sum(ops::mul(t, t)), Tensor::scalar(0.5));
        tape.backward(loss);
        return t.grad_vec();
    };

    const auto g = grad_at(w);
    const double gnorm = std::sqrt(g[0] * g[0] + g[1] * g[1]);
    const std::vector<double> eps{rho * g[0] / gnorm, rho * g[1] / gnorm};
    CHECK(eps[0] == doctest::Approx(0.06).epsilon(1e-14));
    CHECK(eps[1] == doctest::Approx(0.08).epsilon(1e-14));
    const auto g2 = grad_at({w[0] + eps[0], w[1] + eps[1]});
    w[0] -= lr * g2[0];
    w[1] -= lr * g2[1];
    CHECK(w[0] == doctest::Approx(2.694).epsilon(1e-14));
    CHECK(w[1] == doctest::Approx(3.592).epsilon(1e-14));
}

TEST_CASE("safer_step freezes unselected layers and uses exactly two weight backwards") {
    const Dataset data = synth_dataset(32, 4, 8, 70);
    Model m = Model::build(tiny_cfg(71));
    auto [images, labels] = take(data, 8);
    OptimizerConfig opt;
    opt.rho = 0.05;
    Sgd sgd(m, opt);

    const std::vector<int> selected{m.handle_index("block1.mlp.fc1")};
    m.set_trainable(selected);
    std::vector<std::string> before;
    for (const LayerHandle& h : m.registry()) before.push_back(m.digest(h.index));

    const AttackConfig attack = fast_attack();
    const std::uint64_t backwards0 = backward_pass_count();
    StepMetrics metrics{};
    for (int step = 0; step < 3; ++step)
        metrics = safer_step(m, images, labels, selected, attack.with_seed(step), opt, sgd, 0.01);
    const std::uint64_t used = backward_pass_count() - backwards0;

    // per step: `attack.steps` input passes plus exactly 2 weight passes
    CHECK(used == 3 * (static_cast<std::uint64_t>(attack.steps) + 2));
    CHECK(metrics.weight_backwards == 2);
    CHECK_FALSE(metrics.skipped);
    CHECK(std::isfinite(metrics.loss));
    CHECK(std::isfinite(metrics.perturbed_loss));

    for (const LayerHandle& h : m.registry()) {
        if (h.index == selected[0]) {
            CHECK(m.digest(h.index) != before[static_cast<std::size_t>(h.index)]);
        } else {
            CHECK(m.digest(h.index) == before[static_cast<std::size_t>(h.index)]);
        }
    }

    CHECK_THROWS_AS(safer_step(m, images, labels, {}, attack, opt, sgd, 0.01), ContractError);
}

TEST_CASE("rho = 0 reduces safer_step to the plain adversarial-training step, bitwise") {
    const Dataset data = synth_dataset(32, 4, 8, 72);
    auto [images, labels] = take(data, 8);
    const AttackConfig attack = fast_attack().with_seed(5);

    Model a = Model::build(tiny_cfg(73));
    Model b = a.clone();
    OptimizerConfig opt_sam;
    opt_sam.rho = 0.0;         // degenerate SAM
    OptimizerConfig opt_sgd;   // plain path
    Sgd sgd_a(a, opt_sam), sgd_b(b, opt_sgd);

    a.set_all_trainable();
    b.set_all_trainable();
    safer_step(a, images, labels, a.trainable_handles(), attack, opt_sam, sgd_a, 0.02);
    at_step(b, images, labels, attack, opt_sgd, sgd_b, 0.02);

    for (std::size_t i = 0; i < a.params().size(); ++i)
        CHECK(std::memcmp(a.params()[i].tensor.data(), b.params()[i].tensor.data(),
                          a.params()[i].tensor.size() * 8) == 0);
}

TEST_CASE("plain AT uses one weight backward; full-model SAM uses two") {
    const Dataset data = synth_dataset(16, 4, 8, 74);
    Model m = Model::build(tiny_cfg(75));
    auto [images, labels] = take(data, 8);
    OptimizerConfig opt;
    Sgd sgd(m, opt);
    const AttackConfig attack = fast_attack();

    std::uint64_t mark = backward_pass_count();
    at_step(m, images, labels, attack, opt, sgd, 0.01);
    CHECK(backward_pass_count() - mark == static_cast<std::uint64_t>(attack.steps) + 1);

    OptimizerConfig sam = opt;
    sam.kind = OptimizerConfig::Kind::sam_over_sgd;
    mark = backward_pass_count();
    at_step(m, images, labels, attack, sam, sgd, 0.01);
    CHECK(backward_pass_count() - mark == static_cast<std::uint64_t>(attack.steps) + 2);
}

TEST_CASE("cosine schedule: starts at lr0, decays monotonically, hits zero at the horizon") {
    const double lr0 = 0.015;
    CHECK(cosine_lr(lr0, 2.0, 0, 150) == lr0);
    double prev = lr0;
    for (std::size_t e = 1; e <= 150; ++e) {
        const double lr = cosine_lr(lr0, 2.0, e, 150);
        CHECK(lr <= prev);
        prev = lr;
    }
    CHECK(cosine_lr(lr0, 2.0, 150, 150) == 0.0);  // exact
    CHECK(cosine_lr(lr0, 2.0, 200, 150) == 0.0);  // clamped past the horizon

    // larger decay factors decay faster
    CHECK(cosine_lr(lr0, 5.0, 75, 150) < cosine_lr(lr0, 2.0, 75, 150));
}

TEST_CASE("zero-epoch schedule returns the model unchanged") {
    const Dataset data = synth_dataset(32, 4, 8, 80);
    auto [train_set, val_set] = split_train_val(data, 0.25, 1);
    Model m = Model::build(tiny_cfg(81));
    const std::string before = model_digest(m);

    SaferSchedule schedule;
    schedule.pretrain_clean_epochs = 0;
    schedule.pretrain_adv_epochs = 0;
    schedule.finetune_epochs = 0;
    TrainOptions opts;
    opts.batch_size = 8;
    opts.augment.pad = 1;
    const TrainResult r =
        train(m, train_set, val_set, schedule, fast_attack(), OptimizerConfig{}, SharpnessConfig{}, opts);
    CHECK(r.log.epochs.empty());
    CHECK(model_digest(m) == before);
}

TEST_CASE("training runs are deterministic: byte-identical logs and checkpoints") {
    const Dataset data = synth_dataset(48, 4, 8, 82);
    auto [train_set, val_set] = split_train_val(data, 0.25, 2);

    SaferSchedule schedule;
    schedule.pretrain_clean_epochs = 1;
    schedule.pretrain_adv_epochs = 1;
    schedule.finetune_epochs = 2;
    schedule.reselect_interval = 2;
    SharpnessConfig sharp;
    sharp.batch_size = 8;
    sharp.attack = fast_attack();

    const auto run = [&](const fs::path& dir) {
        Model m = Model::build(tiny_cfg(83));
        TrainOptions opts;
        opts.batch_size = 8;
        opts.eval_samples = 8;
        opts.seed = 11;
        opts.augment.pad = 1;
        opts.run_dir = dir.string();
        return train(m, train_set, val_set, schedule, fast_attack(), OptimizerConfig{}, sharp, opts);
    };

    TempDir d1("det1"), d2("det2");
    const TrainResult r1 = run(d1.path);
    const TrainResult r2 = run(d2.path);
    CHECK(r1.log.epochs.size() == 4);
    CHECK(file_digest(d1.path / "train_log.csv") == file_digest(d2.path / "train_log.csv"));
    CHECK(file_digest(d1.path / "final.bin") == file_digest(d2.path / "final.bin"));

    // phase labels and selection bookkeeping
    CHECK(r1.log.epochs[0].phase == "clean-pretrain");
    CHECK(r1.log.epochs[1].phase == "pgd-at");
    CHECK(r1.log.epochs[2].phase == "safer");
    CHECK(r1.log.epochs[0].selected.empty());
    CHECK(r1.log.epochs[1].selected.empty());
    CHECK_FALSE(r1.log.epochs[2].selected.empty());
}

TEST_CASE("resuming from a boundary checkpoint reproduces the uninterrupted run") {
    const Dataset data = synth_dataset(48, 4, 8, 84);
    auto [train_set, val_set] = split_train_val(data, 0.25, 3);

    SaferSchedule schedule;
    schedule.pretrain_clean_epochs = 1;
    schedule.pretrain_adv_epochs = 1;
    schedule.finetune_epochs = 2;
    schedule.reselect_interval = 1;  // boundary checkpoint at every safer epoch
    SharpnessConfig sharp;
    sharp.batch_size = 8;
    sharp.attack = fast_attack();

    TrainOptions opts;
    opts.batch_size = 8;
    opts.eval_samples = 8;
    opts.seed = 21;
    opts.augment.pad = 1;

    TempDir full("resume_full");
    {
        Model m = Model::build(tiny_cfg(85));
        TrainOptions o = opts;
        o.run_dir = full.path.string();
        train(m, train_set, val_set, schedule, fast_attack(), OptimizerConfig{}, sharp, o);
    }

    TempDir resumed("resume_half");
    {
        Checkpoint ck = load_checkpoint((full.path / "ckpt_epoch_3.bin").string());
        CHECK(ck.state.epoch == 3);
        TrainOptions o = opts;
        o.run_dir = resumed.path.string();
        o.resume = ck.state;
        train(ck.model, train_set, val_set, schedule, fast_attack(), OptimizerConfig{}, sharp, o);
    }
    CHECK(file_digest(full.path / "final.bin") == file_digest(resumed.path / "final.bin"));
}

TEST_CASE("parameters change only while selected across the safer phase") {
    const Dataset data = synth_dataset(48, 4, 8, 86);
    auto [train_set, val_set] = split_train_val(data, 0.25, 4);

    SaferSchedule schedule;
    schedule.pretrain_clean_epochs = 0;
    schedule.pretrain_adv_epochs = 0;
    schedule.finetune_epochs = 3;
    schedule.reselect_interval = 1;
    SharpnessConfig sharp;
    sharp.batch_size = 8;
    sharp.attack = fast_attack();

    Model m = Model::build(tiny_cfg(87));
    const auto digests_before = [&] {
        std::vector<std::string> out;
        for (const LayerHandle& h : m.registry()) out.push_back(m.digest(h.index));
        return out;
    }();

    TrainOptions opts;
    opts.batch_size = 8;
    opts.eval_samples = 0;
    opts.evaluate_epochs = false;
    opts.seed = 31;
    opts.augment.pad = 1;
    const TrainResult r =
        train(m, train_set, val_set, schedule, fast_attack(), OptimizerConfig{}, sharp, opts);

    std::set<int> ever_selected;
    for (const EpochRecord& rec : r.log.epochs)
        for (const int h : rec.selected) ever_selected.insert(h);
    REQUIRE_FALSE(ever_selected.empty());
    for (const LayerHandle& h : m.registry()) {
        if (ever_selected.count(h.index)) continue;
        CHECK(m.digest(h.index) == digests_before[static_cast<std::size_t>(h.index)]);
    }
}

TEST_CASE("ablation sweep: singleton grid equals a direct run; failures are recorded") {
    const Dataset data = synth_dataset(48, 4, 8, 88);
    auto [train_set, val_set] = split_train_val(data, 0.25, 5);

    SaferSchedule schedule;
    schedule.pretrain_clean_epochs = 0;
    schedule.pretrain_adv_epochs = 1;
    schedule.finetune_epochs = 1;
    SharpnessConfig sharp;
    sharp.batch_size = 8;
    sharp.attack = fast_attack();
    TrainOptions opts;
    opts.batch_size = 8;
    opts.eval_samples = 8;
    opts.seed = 41;
    opts.augment.pad = 1;

    const std::vector<double> grid{1.0};
    const auto points = ablation_sweep(tiny_cfg(89), train_set, val_set, schedule, fast_attack(),
                                       OptimizerConfig{}, sharp, opts, AblationAxis::layer_count, grid);
    REQUIRE(points.size() == 1);
    CHECK_FALSE(points[0].failed);

    // direct run with the same override and seed gives the same final numbers
    Model m = Model::build(tiny_cfg(89));
    TrainOptions direct = opts;
    direct.fixed_layer_count = 1;
    train(m, train_set, val_set, schedule, fast_attack(), OptimizerConfig{}, sharp, direct);
    auto [images, labels] = take(val_set, 8);
    const EvalResult er = evaluate_robustness(
        m, images, labels, fast_attack().with_seed(Rng::derive(opts.seed, "sweep-eval")), opts.batch_size);
    CHECK(points[0].final_clean == er.clean_acc);
    CHECK(points[0].final_robust == er.robust_acc);

    // a grid value that exceeds the epoch budget fails that point only
    const std::vector<double> bad_grid{1.0, 99.0};
    const auto mixed = ablation_sweep(tiny_cfg(89), train_set, val_set, schedule, fast_attack(),
                                      OptimizerConfig{}, sharp, opts, AblationAxis::pretrain_split, bad_grid);
    REQUIRE(mixed.size() == 2);
    CHECK_FALSE(mixed[0].failed);
    CHECK(mixed[1].failed);
    CHECK_FALSE(mixed[1].error.empty());

    CHECK_THROWS_AS(ablation_sweep(tiny_cfg(89), train_set, val_set, schedule, fast_attack(),
                                   OptimizerConfig{}, sharp, opts, AblationAxis::layer_count,
                                   std::vector<double>{}),
                    ConfigError);

    // layer_count 0 runs the full-model SAM arm
    const auto zero = ablation_sweep(tiny_cfg(89), train_set, val_set, schedule, fast_attack(),
                                     OptimizerConfig{}, sharp, opts, AblationAxis::layer_count,
                                     std::vector<double>{0.0});
    CHECK_FALSE(zero[0].failed);
}

TEST_CASE("train log writers produce the documented formats") {
    TrainLog log;
    EpochRecord r;
    r.epoch = 0;
    r.phase = "pgd-at";
    r.clean_acc = 0.5;
    r.robust_acc = 0.25;
    r.mean_loss = 1.25;
    r.lr = 0.015;
    r.wall_time = 1.5;
    log.epochs.push_back(r);
    r.epoch = 1;
    r.phase = "safer";
    r.selected = {3, 7};
    log.epochs.push_back(r);

    TempDir dir("logs");
    write_train_log_csv(log, (dir.path / "log.csv").string());
    write_train_log_jsonl(log, (dir.path / "log.jsonl").string());

    std::ifstream csv(dir.path / "log.csv");
    std::string header, line0, line1;
    std::getline(csv, header);
    std::getline(csv, line0);
    std::getline(csv, line1);
    CHECK(header == "epoch,phase,clean_acc,robust_acc,loss,lr,selected");
    CHECK(line0.find("wall") == std::string::npos);
    CHECK(line1.find("3+7") != std::string::npos);

    std::ifstream jsonl(dir.path / "log.jsonl");
    std::string jline;
    std::getline(jsonl, jline);
    CHECK(jline.find("wall_time") != std::string::npos);
}
