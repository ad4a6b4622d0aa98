#include "safer/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "safer/errors.hpp"

namespace safer {

namespace {

constexpr char kMagic[9] = {'S', 'A', 'F', 'E', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
  public:
    explicit Writer(const std::string& path) : path_(path), tmp_(path + ".tmp"), out_(tmp_, std::ios::binary | std::ios::trunc) {
        if (!out_) throw IoError("cannot write '" + tmp_ + "'");
    }
    void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void f64(double v) { bytes(&v, 8); }
    void commit() {
        out_.flush();
        if (!out_) throw IoError("short write to '" + tmp_ + "'");
        out_.close();
        std::filesystem::rename(tmp_, path_);
    }

  private:
    std::string path_, tmp_;
    std::ofstream out_;
};

class Reader {
  public:
    explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open '" + path + "'");
    }
    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (in_.gcount() != static_cast<std::streamsize>(n))
            throw FormatError("'" + path_ + "': truncated checkpoint");
    }
    std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
    std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
    std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
    double f64() { double v; bytes(&v, 8); return v; }
    bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

  private:
    std::string path_;
    std::ifstream in_;
};

std::uint32_t role_mask(const std::set<Role>& roles) {
    std::uint32_t mask = 0;
    for (const Role r : roles) mask |= 1u << static_cast<unsigned>(r);
    return mask;
}

std::set<Role> roles_from_mask(std::uint32_t mask) {
    std::set<Role> roles;
    for (unsigned bit = 0; bit < 8; ++bit)
        if (mask & (1u << bit)) roles.insert(static_cast<Role>(bit));
    return roles;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const TrainerState& state) {
    Writer w(path);
    w.bytes(kMagic, sizeof(kMagic));
    w.u32(kVersion);

    const ViTConfig& cfg = model.config();
    w.u64(cfg.image_size);
    w.u64(cfg.patch_size);
    w.u64(cfg.channels);
    w.u64(cfg.embed_dim);
    w.u64(cfg.depth);
    w.u64(cfg.heads);
    w.f64(cfg.mlp_ratio);
    w.u64(cfg.num_classes);
    w.u64(cfg.seed);

    const AdapterConfig& acfg = model.adapter_config();
    w.u8(static_cast<std::uint8_t>(acfg.kind));
    w.u32(static_cast<std::uint32_t>(acfg.rank));
    w.f64(acfg.alpha);
    w.u32(role_mask(acfg.target_roles));

    w.u32(static_cast<std::uint32_t>(model.params().size()));
    for (const Param& p : model.params()) {
        w.u32(static_cast<std::uint32_t>(p.name.size()));
        w.bytes(p.name.data(), p.name.size());
        w.u32(static_cast<std::uint32_t>(p.tensor.ndim()));
        for (const std::size_t e : p.tensor.shape()) w.u64(e);
        w.bytes(p.tensor.data(), p.tensor.size() * sizeof(double));
    }

    w.u8(state.present ? 1 : 0);
    if (state.present) {
        w.u64(state.epoch);
        w.u8(state.phase);
        w.u32(static_cast<std::uint32_t>(state.selected.size()));
        for (const std::uint32_t h : state.selected) w.u32(h);
        const bool has_momentum = !state.momentum.empty();
        w.u8(has_momentum ? 1 : 0);
        if (has_momentum) {
            if (state.momentum.size() != model.params().size())
                throw ContractError("save_checkpoint: momentum not aligned with parameters");
            for (std::size_t i = 0; i < state.momentum.size(); ++i) {
                if (state.momentum[i].size() != model.params()[i].tensor.size())
                    throw ContractError("save_checkpoint: momentum size mismatch at " + model.params()[i].name);
                w.bytes(state.momentum[i].data(), state.momentum[i].size() * sizeof(double));
            }
        }
        for (const std::uint64_t word : state.rng) w.u64(word);
    }
    w.commit();
}

Checkpoint load_checkpoint(const std::string& path) {
    Reader r(path);
    char magic[sizeof(kMagic)];
    r.bytes(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw FormatError("'" + path + "': not a checkpoint (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw VersionError("'" + path + "': format version " + std::to_string(version) + ", expected " +
                           std::to_string(kVersion));

    ViTConfig cfg;
    cfg.image_size = r.u64();
    cfg.patch_size = r.u64();
    cfg.channels = r.u64();
    cfg.embed_dim = r.u64();
    cfg.depth = r.u64();
    cfg.heads = r.u64();
    cfg.mlp_ratio = r.f64();
    cfg.num_classes = r.u64();
    cfg.seed = r.u64();

    AdapterConfig acfg;
    acfg.kind = static_cast<AdapterConfig::Kind>(r.u8());
    acfg.rank = r.u32();
    acfg.alpha = r.f64();
    acfg.target_roles = roles_from_mask(r.u32());

    Model model = Model::build(cfg);
    if (acfg.kind != AdapterConfig::Kind::none) model.wrap_adapters(acfg);

    const std::uint32_t count = r.u32();
    if (count != model.params().size())
        throw VersionError("'" + path + "': " + std::to_string(count) + " parameters, model expects " +
                           std::to_string(model.params().size()));
    for (Param& p : model.params()) {
        std::string name(r.u32(), '\0');
        r.bytes(name.data(), name.size());
        if (name != p.name)
            throw VersionError("'" + path + "': parameter '" + name + "' where '" + p.name + "' expected");
        Shape shape(r.u32());
        for (std::size_t& e : shape) e = r.u64();
        if (shape != p.tensor.shape())
            throw VersionError("'" + path + "': shape " + shape_str(shape) + " for '" + name +
                               "', model expects " + shape_str(p.tensor.shape()));
        r.bytes(p.tensor.data(), p.tensor.size() * sizeof(double));
    }

    TrainerState state;
    state.present = r.u8() != 0;
    if (state.present) {
        state.epoch = r.u64();
        state.phase = r.u8();
        state.selected.resize(r.u32());
        for (std::uint32_t& h : state.selected) h = r.u32();
        if (r.u8() != 0) {
            state.momentum.resize(model.params().size());
            for (std::size_t i = 0; i < state.momentum.size(); ++i) {
                state.momentum[i].resize(model.params()[i].tensor.size());
                r.bytes(state.momentum[i].data(), state.momentum[i].size() * sizeof(double));
            }
        }
        for (std::uint64_t& word : state.rng) word = r.u64();
    }
    return Checkpoint{std::move(model), std::move(state)};
}

}  // namespace safer
