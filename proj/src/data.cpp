#include "safer/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "safer/errors.hpp"
#include "safer/rng.hpp"
#include "safer/sha256.hpp"

namespace safer {

namespace fs = std::filesystem;

const char* split_name(Dataset::Split split) {
    switch (split) {
        case Dataset::Split::train: return "train";
        case Dataset::Split::val: return "val";
        case Dataset::Split::test: return "test";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format

namespace {

std::vector<std::uint8_t> read_file(const std::string& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open '" + file + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void append_records(const std::string& file, std::size_t record_pixels, std::size_t num_classes,
                    std::vector<double>& pixels, std::vector<std::int64_t>& labels) {
    const std::vector<std::uint8_t> bytes = read_file(file);
    const std::size_t record_size = 1 + record_pixels;
    if (bytes.size() % record_size != 0)
        throw FormatError("'" + file + "': length " + std::to_string(bytes.size()) +
                          " is not a multiple of the " + std::to_string(record_size) +
                          "-byte record size (offset " + std::to_string(bytes.size() % record_size) +
                          " past the last full record)");
    const std::size_t records = bytes.size() / record_size;
    pixels.reserve(pixels.size() + records * record_pixels);
    for (std::size_t r = 0; r < records; ++r) {
        const std::uint8_t* rec = bytes.data() + r * record_size;
        if (rec[0] >= num_classes)
            throw FormatError("'" + file + "': record " + std::to_string(r) + " has label byte " +
                              std::to_string(rec[0]) + " > " + std::to_string(num_classes - 1));
        labels.push_back(rec[0]);
        for (std::size_t i = 0; i < record_pixels; ++i)
            pixels.push_back(static_cast<double>(rec[1 + i]) / 255.0);
    }
}

}  // namespace

Dataset load_cifar10_binary(const std::string& path, Dataset::Split split, std::size_t image_size,
                            std::size_t channels) {
    const std::size_t record_pixels = channels * image_size * image_size;
    std::vector<std::string> files;
    if (fs::is_directory(path)) {
        if (split == Dataset::Split::train) {
            for (int i = 1; i <= 5; ++i) files.push_back((fs::path(path) / ("data_batch_" + std::to_string(i) + ".bin")).string());
        } else if (split == Dataset::Split::test) {
            files.push_back((fs::path(path) / "test_batch.bin").string());
        } else {
            throw ConfigError("cifar-10 has no validation files; split the training set instead");
        }
    } else {
        files.push_back(path);
    }

    std::vector<double> pixels;
    std::vector<std::int64_t> labels;
    for (const std::string& f : files) append_records(f, record_pixels, 10, pixels, labels);
    if (labels.empty()) throw FormatError("'" + path + "': no records");

    Dataset ds;
    ds.images = Tensor::from({labels.size(), channels, image_size, image_size}, std::move(pixels));
    ds.labels = std::move(labels);
    ds.num_classes = 10;
    ds.split = split;
    ds.source = Dataset::Source::cifar10_binary;
    return ds;
}

void save_cifar10_binary(const Dataset& ds, const std::string& file) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + file + "'");
    const std::size_t record_pixels = ds.images.size() / ds.size();
    const double* px = ds.images.data();
    for (std::size_t r = 0; r < ds.size(); ++r) {
        if (ds.labels[r] < 0 || ds.labels[r] > 255) throw FormatError("label out of byte range");
        const auto label = static_cast<char>(ds.labels[r]);
        out.put(label);
        for (std::size_t i = 0; i < record_pixels; ++i) {
            const double v = px[r * record_pixels + i];
            const long b = std::lround(std::min(1.0, std::max(0.0, v)) * 255.0);
            out.put(static_cast<char>(static_cast<unsigned char>(b)));
        }
    }
    if (!out) throw IoError("short write to '" + file + "'");
}

// ---------------------------------------------------------------------------
// synthetic shapes

namespace {

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
    h = h - std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1)      { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else             { r = c; b = x; }
    const double m = v - c;
    rgb[0] = r + m;
    rgb[1] = g + m;
    rgb[2] = b + m;
}

bool shape_mask(std::size_t kind, double dx, double dy, double r) {
    const double ax = std::fabs(dx), ay = std::fabs(dy);
    const double dist2 = dx * dx + dy * dy;
    switch (kind % 10) {
        case 0: return dist2 <= r * r;                               // disk
        case 1: return ax <= 0.9 * r && ay <= 0.9 * r;               // square
        case 2: return dy >= -r && dy <= r && ax <= 0.5 * (dy + r);  // triangle
        case 3: return dist2 <= r * r && dist2 >= 0.55 * 0.55 * r * r;  // ring
        case 4: return (ax <= 0.33 * r && ay <= r) || (ay <= 0.33 * r && ax <= r);  // plus
        case 5: return ax <= r && ay <= r && std::fabs(ax - ay) <= 0.4 * r;         // X
        case 6: return ax <= r && ay <= r &&
                       (static_cast<long>(std::floor((dy + r) / (0.5 * r))) % 2 == 0);  // h-bars
        case 7: return ax <= r && ay <= r &&
                       (static_cast<long>(std::floor((dx + r) / (0.5 * r))) % 2 == 0);  // v-bars
        case 8: return ax + ay <= 1.2 * r;  // diamond
        default:
            return ax <= r && ay <= r &&
                   ((static_cast<long>(std::floor((dx + r) / (0.66 * r))) +
                     static_cast<long>(std::floor((dy + r) / (0.66 * r)))) % 2 == 0);  // checker
    }
}

}  // namespace

Dataset synth_dataset(std::size_t n, std::size_t classes, std::size_t image_size, std::uint64_t seed) {
    if (classes < 2) throw ConfigError("synth_dataset: need at least 2 classes");
    if (n < classes) throw ConfigError("synth_dataset: n=" + std::to_string(n) + " smaller than " +
                                       std::to_string(classes) + " classes");
    const std::size_t s = image_size;
    const std::size_t plane = s * s;
    std::vector<double> pixels(n * 3 * plane);
    std::vector<std::int64_t> labels(n);

    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t label = i % classes;  // exact +-1 class balance
        labels[i] = static_cast<std::int64_t>(label);
        Rng rng(Rng::derive(seed, "synth", i));

        double bg[3], fg[3];
        hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.35), rng.uniform(0.15, 0.55), bg);
        const double hue = static_cast<double>(label) / static_cast<double>(classes) + rng.uniform(-0.05, 0.05);
        hsv_to_rgb(hue, rng.uniform(0.55, 1.0), rng.uniform(0.65, 1.0), fg);

        const double half = static_cast<double>(s) / 2.0;
        const double cx = half + rng.uniform(-half / 4.0, half / 4.0);
        const double cy = half + rng.uniform(-half / 4.0, half / 4.0);
        const double radius = static_cast<double>(s) * rng.uniform(0.30, 0.42);
        const double noise_amp = rng.uniform(0.03, 0.08);

        double* img = pixels.data() + i * 3 * plane;
        for (std::size_t y = 0; y < s; ++y) {
            for (std::size_t x = 0; x < s; ++x) {
                const double noise = rng.normal() * noise_amp;  // shared across channels
                const bool inside = shape_mask(label, static_cast<double>(x) + 0.5 - cx,
                                               static_cast<double>(y) + 0.5 - cy, radius);
                const double* color = inside ? fg : bg;
                for (std::size_t c = 0; c < 3; ++c) {
                    const double v = color[c] + noise;
                    img[c * plane + y * s + x] = std::min(1.0, std::max(0.0, v));
                }
            }
        }
    }

    Dataset ds;
    ds.images = Tensor::from({n, 3, s, s}, std::move(pixels));
    ds.labels = std::move(labels);
    ds.num_classes = classes;
    ds.split = Dataset::Split::train;
    ds.source = Dataset::Source::synthetic;
    return ds;
}

// ---------------------------------------------------------------------------

std::pair<Tensor, std::vector<std::int64_t>> gather(const Dataset& ds, std::span<const std::size_t> idx) {
    const std::size_t per = ds.images.size() / ds.size();
    Tensor images = make_tensor({idx.size(), ds.channels(), ds.image_size(), ds.image_size()});
    std::vector<std::int64_t> labels(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= ds.size()) throw ContractError("gather: index out of range");
        std::copy(ds.images.data() + idx[i] * per, ds.images.data() + (idx[i] + 1) * per,
                  images.data() + i * per);
        labels[i] = ds.labels[idx[i]];
    }
    return {std::move(images), std::move(labels)};
}

std::pair<Tensor, std::vector<std::int64_t>> take(const Dataset& ds, std::size_t count) {
    count = std::min(count, ds.size());
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = i;
    return gather(ds, idx);
}

std::pair<Dataset, Dataset> split_train_val(const Dataset& ds, double val_fraction, std::uint64_t seed) {
    if (val_fraction < 0.0 || val_fraction >= 1.0)
        throw ConfigError("split_train_val: val_fraction must be in [0,1)");
    std::vector<std::size_t> idx(ds.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(Rng::derive(seed, "split"));
    for (std::size_t i = idx.size(); i-- > 1;) std::swap(idx[i], idx[rng.below(i + 1)]);

    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(ds.size())));
    const std::span<const std::size_t> val_idx(idx.data(), n_val);
    const std::span<const std::size_t> train_idx(idx.data() + n_val, idx.size() - n_val);

    const auto build = [&](std::span<const std::size_t> part, Dataset::Split split) {
        auto [images, labels] = gather(ds, part);
        Dataset out;
        out.images = std::move(images);
        out.labels = std::move(labels);
        out.num_classes = ds.num_classes;
        out.split = split;
        out.source = ds.source;
        return out;
    };
    return {build(train_idx, Dataset::Split::train), build(val_idx, Dataset::Split::val)};
}

// ---------------------------------------------------------------------------
// augmentation

void AugmentConfig::validate(std::size_t image_size) const {
    const std::size_t out = crop == 0 ? image_size : crop;
    if (out > image_size + 2 * pad)
        throw ConfigError("augment: crop " + std::to_string(out) + " exceeds padded size " +
                          std::to_string(image_size + 2 * pad));
    if (hflip_prob < 0.0 || hflip_prob > 1.0) throw ConfigError("augment: hflip_prob must be in [0,1]");
}

namespace {
// reflect (no edge repeat): -1 -> 1, h -> h-2
std::size_t reflect_index(long t, std::size_t h) {
    const long hh = static_cast<long>(h);
    while (t < 0 || t >= hh) {
        if (t < 0) t = -t;
        if (t >= hh) t = 2 * (hh - 1) - t;
    }
    return static_cast<std::size_t>(t);
}
}  // namespace

Tensor augment(const Tensor& batch, const AugmentConfig& cfg) {
    const Shape& s = batch.shape();
    if (s.size() != 4) throw DimensionError("augment: expected [n,c,h,w], got " + shape_str(s));
    const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
    if (h != w) throw DimensionError("augment: only square images supported");
    cfg.validate(h);
    const std::size_t out_size = cfg.crop == 0 ? h : cfg.crop;
    const std::size_t padded = h + 2 * cfg.pad;

    Tensor out = make_tensor({n, c, out_size, out_size});
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(Rng::derive(cfg.seed, "aug", i));
        const std::size_t dy = static_cast<std::size_t>(rng.below(padded - out_size + 1));
        const std::size_t dx = static_cast<std::size_t>(rng.below(padded - out_size + 1));
        const bool flip = rng.uniform() < cfg.hflip_prob;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* src = batch.data() + (i * c + ch) * h * w;
            double* dst = out.data() + (i * c + ch) * out_size * out_size;
            for (std::size_t y = 0; y < out_size; ++y) {
                const std::size_t sy = reflect_index(static_cast<long>(y + dy) - static_cast<long>(cfg.pad), h);
                for (std::size_t x = 0; x < out_size; ++x) {
                    const std::size_t px = flip ? (out_size - 1 - x) : x;
                    const std::size_t sx =
                        reflect_index(static_cast<long>(px + dx) - static_cast<long>(cfg.pad), w);
                    dst[y * out_size + x] = src[sy * w + sx];
                }
            }
        }
    }
    return out;
}

std::string batch_digest(const Tensor& images, const std::vector<std::int64_t>& labels) {
    Sha256 ctx;
    ctx.update(images.data(), images.size() * sizeof(double));
    ctx.update(labels.data(), labels.size() * sizeof(std::int64_t));
    const auto digest = ctx.finish();
    static const char* kHex = "0123456789abcdef";
    std::string out(16, '0');  // first 8 bytes are plenty for an id
    for (std::size_t i = 0; i < 8; ++i) {
        out[2 * i] = kHex[digest[i] >> 4];
        out[2 * i + 1] = kHex[digest[i] & 0xf];
    }
    return out;
}

}  // namespace safer
