#include "safer/vit.hpp"

#include <array>
#include <cmath>
#include <span>

#include "safer/errors.hpp"
#include "safer/ops.hpp"
#include "safer/rng.hpp"
#include "safer/sha256.hpp"

namespace safer {

const char* role_name(Role role) {
    switch (role) {
        case Role::patch_embed: return "patch-embed";
        case Role::attn_qkv: return "attn-qkv";
        case Role::attn_proj: return "attn-proj";
        case Role::mlp_fc1: return "mlp-fc1";
        case Role::mlp_fc2: return "mlp-fc2";
        case Role::norm1: return "norm1";
        case Role::norm2: return "norm2";
        case Role::head: return "head";
    }
    return "?";
}

Role role_from_name(const std::string& name) {
    for (const Role r : {Role::patch_embed, Role::attn_qkv, Role::attn_proj, Role::mlp_fc1,
                         Role::mlp_fc2, Role::norm1, Role::norm2, Role::head}) {
        if (name == role_name(r)) return r;
    }
    // short spellings used in config files
    if (name == "qkv") return Role::attn_qkv;
    if (name == "proj") return Role::attn_proj;
    if (name == "fc1") return Role::mlp_fc1;
    if (name == "fc2") return Role::mlp_fc2;
    throw ConfigError("unknown layer role '" + name + "'");
}

const std::set<Role>& default_rankable_roles() {
    static const std::set<Role> roles{Role::patch_embed, Role::attn_qkv, Role::attn_proj,
                                      Role::mlp_fc1,     Role::mlp_fc2,  Role::head};
    return roles;
}

const char* adapter_kind_name(AdapterConfig::Kind kind) {
    switch (kind) {
        case AdapterConfig::Kind::none: return "none";
        case AdapterConfig::Kind::lora: return "lora";
        case AdapterConfig::Kind::dora: return "dora";
    }
    return "?";
}

AdapterConfig::Kind adapter_kind_from_name(const std::string& name) {
    if (name == "none") return AdapterConfig::Kind::none;
    if (name == "lora") return AdapterConfig::Kind::lora;
    if (name == "dora") return AdapterConfig::Kind::dora;
    throw ConfigError("unknown adapter kind '" + name + "' (want none|lora|dora)");
}

void ViTConfig::validate() const {
    if (image_size == 0 || patch_size == 0 || channels == 0 || embed_dim == 0 || depth == 0 ||
        heads == 0 || num_classes < 2)
        throw ConfigError("vit config: all extents must be positive and num_classes >= 2");
    if (image_size % patch_size != 0)
        throw ConfigError("vit config: image_size " + std::to_string(image_size) +
                          " not divisible by patch_size " + std::to_string(patch_size));
    if (embed_dim % heads != 0)
        throw ConfigError("vit config: embed_dim " + std::to_string(embed_dim) +
                          " not divisible by heads " + std::to_string(heads));
    if (mlp_ratio <= 0.0) throw ConfigError("vit config: mlp_ratio must be positive");
    if (static_cast<std::size_t>(mlp_ratio * static_cast<double>(embed_dim)) == 0)
        throw ConfigError("vit config: mlp hidden width rounds to zero");
}

void AdapterConfig::validate() const {
    if (kind == Kind::none) return;
    if (rank == 0) throw ConfigError("adapter config: rank must be positive");
    if (target_roles.empty()) throw ConfigError("adapter config: no target roles");
    for (const Role r : target_roles)
        if (r == Role::norm1 || r == Role::norm2)
            throw ConfigError("adapter config: cannot wrap norm layers");
}

// ---------------------------------------------------------------------------
// construction

Model Model::build(const ViTConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg_ = cfg;

    const std::size_t d = cfg.embed_dim;
    const std::size_t patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
    const std::size_t hidden = static_cast<std::size_t>(cfg.mlp_ratio * static_cast<double>(d));
    const std::size_t tokens = cfg.tokens();

    Rng rng(Rng::derive(cfg.seed, "init"));
    enum class Init { trunc_normal, zeros, ones };
    const auto add_param = [&m, &rng](int handle, std::string name, Shape shape, Init init) {
        Tensor t = make_tensor(std::move(shape));
        switch (init) {
            case Init::trunc_normal:
                for (double& v : t.vec()) v = rng.truncated_normal(0.02);
                break;
            case Init::zeros:
                break;
            case Init::ones:
                std::fill(t.vec().begin(), t.vec().end(), 1.0);
                break;
        }
        t.set_requires_grad(true);
        const int id = static_cast<int>(m.params_.size());
        m.params_.push_back(Param{std::move(name), std::move(t), handle});
        m.handle_params_[static_cast<std::size_t>(handle)].push_back(id);
        return id;
    };
    const auto add_handle = [&m](std::string name, Role role) {
        const int idx = static_cast<int>(m.registry_.size());
        m.registry_.push_back(LayerHandle{idx, std::move(name), role, 0, false, -1});
        m.handle_params_.emplace_back();
        return idx;
    };

    // patch embed (owns class token and positional embeddings)
    m.patch_handle_ = add_handle("patch_embed", Role::patch_embed);
    m.patch_w_ = add_param(m.patch_handle_, "patch_embed.weight", {patch_dim, d}, Init::trunc_normal);
    m.patch_b_ = add_param(m.patch_handle_, "patch_embed.bias", {d}, Init::zeros);
    m.cls_ = add_param(m.patch_handle_, "patch_embed.cls", {1, d}, Init::trunc_normal);
    m.pos_ = add_param(m.patch_handle_, "patch_embed.pos", {tokens, d}, Init::trunc_normal);

    for (std::size_t b = 0; b < cfg.depth; ++b) {
        const std::string pre = "block" + std::to_string(b) + ".";
        BlockRefs blk{};
        int h = add_handle(pre + "norm1", Role::norm1);
        blk.n1g = add_param(h, pre + "norm1.gain", {d}, Init::ones);
        blk.n1b = add_param(h, pre + "norm1.bias", {d}, Init::zeros);

        blk.qkv = add_handle(pre + "attn.qkv", Role::attn_qkv);
        add_param(blk.qkv, pre + "attn.qkv.weight", {d, 3 * d}, Init::trunc_normal);
        add_param(blk.qkv, pre + "attn.qkv.bias", {3 * d}, Init::zeros);

        blk.proj = add_handle(pre + "attn.proj", Role::attn_proj);
        add_param(blk.proj, pre + "attn.proj.weight", {d, d}, Init::trunc_normal);
        add_param(blk.proj, pre + "attn.proj.bias", {d}, Init::zeros);

        h = add_handle(pre + "norm2", Role::norm2);
        blk.n2g = add_param(h, pre + "norm2.gain", {d}, Init::ones);
        blk.n2b = add_param(h, pre + "norm2.bias", {d}, Init::zeros);

        blk.fc1 = add_handle(pre + "mlp.fc1", Role::mlp_fc1);
        add_param(blk.fc1, pre + "mlp.fc1.weight", {d, hidden}, Init::trunc_normal);
        add_param(blk.fc1, pre + "mlp.fc1.bias", {hidden}, Init::zeros);

        blk.fc2 = add_handle(pre + "mlp.fc2", Role::mlp_fc2);
        add_param(blk.fc2, pre + "mlp.fc2.weight", {hidden, d}, Init::trunc_normal);
        add_param(blk.fc2, pre + "mlp.fc2.bias", {d}, Init::zeros);

        m.blocks_.push_back(blk);
    }

    // head owns the final pre-head layernorm
    m.head_handle_ = add_handle("head", Role::head);
    m.head_ng_ = add_param(m.head_handle_, "head.norm.gain", {d}, Init::ones);
    m.head_nb_ = add_param(m.head_handle_, "head.norm.bias", {d}, Init::zeros);
    add_param(m.head_handle_, "head.weight", {d, cfg.num_classes}, Init::trunc_normal);
    add_param(m.head_handle_, "head.bias", {cfg.num_classes}, Init::zeros);

    for (auto& handle : m.registry_) {
        std::size_t count = 0;
        for (const int pid : m.handle_params_[static_cast<std::size_t>(handle.index)])
            count += m.params_[static_cast<std::size_t>(pid)].tensor.size();
        handle.param_count = count;
    }
    m.trainable_.assign(m.registry_.size(), true);
    m.adapter_refs_.assign(m.registry_.size(), AdapterRefs{});
    m.adapter_handle_.assign(m.registry_.size(), -1);
    return m;
}

Model Model::clone() const {
    Model m(*this);
    m.params_.clear();
    for (const Param& p : params_) {
        Tensor t = Tensor::from(p.tensor.shape(), p.tensor.vec());
        t.set_requires_grad(true);
        m.params_.push_back(Param{p.name, std::move(t), p.handle});
    }
    return m;
}

// ---------------------------------------------------------------------------
// accessors

const LayerHandle& Model::handle(int index) const {
    if (index < 0 || static_cast<std::size_t>(index) >= registry_.size())
        throw RegistryError("no layer handle with index " + std::to_string(index));
    return registry_[static_cast<std::size_t>(index)];
}

int Model::handle_index(const std::string& name) const {
    for (const LayerHandle& h : registry_)
        if (h.name == name) return h.index;
    throw RegistryError("no layer handle named '" + name + "'");
}

const std::vector<int>& Model::params_of(int handle) const {
    (void)this->handle(handle);
    return handle_params_[static_cast<std::size_t>(handle)];
}

std::size_t Model::total_param_count() const {
    std::size_t n = 0;
    for (const Param& p : params_) n += p.tensor.size();
    return n;
}

void Model::set_trainable(const std::vector<int>& handles) {
    for (const int h : handles) (void)handle(h);
    std::fill(trainable_.begin(), trainable_.end(), false);
    for (const int h : handles) trainable_[static_cast<std::size_t>(h)] = true;
}

void Model::set_all_trainable() {
    if (has_adapters()) {
        std::vector<int> adapters;
        for (const LayerHandle& h : registry_)
            if (h.is_adapter) adapters.push_back(h.index);
        set_trainable(adapters);
    } else {
        std::fill(trainable_.begin(), trainable_.end(), true);
    }
}

bool Model::trainable(int handle) const {
    (void)this->handle(handle);
    return trainable_[static_cast<std::size_t>(handle)];
}

std::vector<int> Model::trainable_handles() const {
    std::vector<int> out;
    for (const LayerHandle& h : registry_)
        if (trainable_[static_cast<std::size_t>(h.index)]) out.push_back(h.index);
    return out;
}

std::vector<int> Model::resolve_selection(const std::vector<int>& selected) const {
    if (!has_adapters()) return selected;
    std::vector<int> out;
    for (const int h : selected) {
        if (handle(h).is_adapter) {
            out.push_back(h);
        } else if (adapter_handle_[static_cast<std::size_t>(h)] >= 0) {
            out.push_back(adapter_handle_[static_cast<std::size_t>(h)]);
        }
        // base layers without adapters stay frozen in PEFT mode
    }
    return out;
}

void Model::zero_grads() const {
    for (const Param& p : params_) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
}

int Model::adapter_of(int base_handle) const {
    (void)handle(base_handle);
    return adapter_handle_[static_cast<std::size_t>(base_handle)];
}

std::vector<int> Model::rankable_handles(const std::set<Role>& roles) const {
    std::vector<int> out;
    for (const LayerHandle& h : registry_)
        if (!h.is_adapter && roles.count(h.role)) out.push_back(h.index);
    return out;
}

std::string Model::digest(int handle) const {
    Sha256 ctx;
    for (const int pid : params_of(handle)) {
        const auto& v = params_[static_cast<std::size_t>(pid)].tensor.vec();
        ctx.update(v.data(), v.size() * sizeof(double));
    }
    const auto digest = ctx.finish();
    static const char* kHex = "0123456789abcdef";
    std::string out(64, '0');
    for (std::size_t i = 0; i < digest.size(); ++i) {
        out[2 * i] = kHex[digest[i] >> 4];
        out[2 * i + 1] = kHex[digest[i] & 0xf];
    }
    return out;
}

// ---------------------------------------------------------------------------
// forward

Model::LinearRefs Model::linear_refs(int handle) const {
    const auto& hp = handle_params_[static_cast<std::size_t>(handle)];
    LinearRefs refs;
    switch (this->handle(handle).role) {
        case Role::patch_embed:
            refs.w = hp[0];
            refs.b = hp[1];
            break;
        case Role::head:
            refs.w = hp[2];
            refs.b = hp[3];
            break;
        case Role::attn_qkv:
        case Role::attn_proj:
        case Role::mlp_fc1:
        case Role::mlp_fc2:
            refs.w = hp[0];
            refs.b = hp[1];
            break;
        default:
            throw RegistryError("handle " + this->handle(handle).name + " is not a linear layer");
    }
    return refs;
}

Tensor Model::linear(const Tensor& x2d, int handle) const {
    const LinearRefs refs = linear_refs(handle);
    const Tensor& w = params_[static_cast<std::size_t>(refs.w)].tensor;
    const Tensor& bias = params_[static_cast<std::size_t>(refs.b)].tensor;
    const AdapterRefs& ar = adapter_refs_[static_cast<std::size_t>(handle)];

    Tensor y;
    if (ar.a < 0) {
        y = ops::matmul(x2d, w);
    } else {
        const Tensor& a = params_[static_cast<std::size_t>(ar.a)].tensor;
        const Tensor& b = params_[static_cast<std::size_t>(ar.b)].tensor;
        const double scale = adapter_.alpha / static_cast<double>(adapter_.rank);
        if (adapter_.kind == AdapterConfig::Kind::lora) {
            Tensor delta = ops::matmul(ops::matmul(x2d, a), b);
            delta = ops::mul(delta, Tensor::full(delta.shape(), scale));
            y = ops::add(ops::matmul(x2d, w), delta);
        } else {
            // DoRA: magnitude times column-normalized (W + scaled low-rank update)
            const Tensor& mag = params_[static_cast<std::size_t>(ar.m)].tensor;
            const std::size_t in = w.shape()[0], out = w.shape()[1];
            Tensor dw = ops::mul(ops::matmul(a, b), Tensor::full({in, out}, scale));
            Tensor v = ops::add(w, dw);
            Tensor colsq = ops::matmul(Tensor::full({1, in}, 1.0), ops::mul(v, v));
            Tensor factor = ops::div(mag, ops::sqrt(colsq));              // [1, out]
            Tensor weff = ops::mul(v, ops::matmul(Tensor::full({in, 1}, 1.0), factor));
            y = ops::matmul(x2d, weff);
        }
    }
    return ops::add(y, bias);
}

Tensor Model::forward(const Tensor& images) const {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != cfg_.channels || s[2] != cfg_.image_size || s[3] != cfg_.image_size)
        throw DimensionError("forward: expected images [batch," + std::to_string(cfg_.channels) + "," +
                             std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) +
                             "], got " + shape_str(s));
    using namespace ops;
    const std::size_t batch = s[0];
    const std::size_t g = cfg_.image_size / cfg_.patch_size;
    const std::size_t patches = g * g;
    const std::size_t d = cfg_.embed_dim;
    const std::size_t p = cfg_.patch_size;

    // non-overlapping patches via reshape/transpose
    Tensor x = reshape(images, {batch, cfg_.channels, g, p, g, p});
    x = transpose(x, {0, 2, 4, 1, 3, 5});
    x = reshape(x, {batch * patches, cfg_.channels * p * p});
    x = reshape(linear(x, patch_handle_), {batch, patches, d});

    const std::vector<std::int64_t> zero_ids(batch, 0);
    Tensor cls = reshape(embedding_lookup(params_[static_cast<std::size_t>(cls_)].tensor, zero_ids),
                         {batch, 1, d});
    const std::array<Tensor, 2> parts{cls, x};
    x = concat(std::span<const Tensor>(parts.data(), parts.size()), 1);
    x = add(x, params_[static_cast<std::size_t>(pos_)].tensor);  // [tokens, d] suffix broadcast

    const std::size_t tokens = patches + 1;
    const std::size_t heads = cfg_.heads;
    const std::size_t hd = d / heads;
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    for (const BlockRefs& blk : blocks_) {
        Tensor h = layernorm(x, params_[static_cast<std::size_t>(blk.n1g)].tensor,
                             params_[static_cast<std::size_t>(blk.n1b)].tensor, 2);
        Tensor qkv = reshape(linear(reshape(h, {batch * tokens, d}), blk.qkv), {batch, tokens, 3 * d});
        Tensor q = transpose(reshape(slice(qkv, 2, 0, d), {batch, tokens, heads, hd}), {0, 2, 1, 3});
        Tensor k = transpose(reshape(slice(qkv, 2, d, d), {batch, tokens, heads, hd}), {0, 2, 1, 3});
        Tensor v = transpose(reshape(slice(qkv, 2, 2 * d, d), {batch, tokens, heads, hd}), {0, 2, 1, 3});

        Tensor scores = matmul(q, transpose(k, {0, 1, 3, 2}));
        scores = mul(scores, Tensor::full(scores.shape(), attn_scale));
        Tensor ctx = matmul(softmax(scores, 3), v);  // [batch, heads, tokens, hd]
        ctx = reshape(transpose(ctx, {0, 2, 1, 3}), {batch * tokens, d});
        x = add(x, reshape(linear(ctx, blk.proj), {batch, tokens, d}));

        Tensor h2 = layernorm(x, params_[static_cast<std::size_t>(blk.n2g)].tensor,
                              params_[static_cast<std::size_t>(blk.n2b)].tensor, 2);
        Tensor mid = gelu(linear(reshape(h2, {batch * tokens, d}), blk.fc1));
        x = add(x, reshape(linear(mid, blk.fc2), {batch, tokens, d}));
    }

    Tensor hf = layernorm(x, params_[static_cast<std::size_t>(head_ng_)].tensor,
                          params_[static_cast<std::size_t>(head_nb_)].tensor, 2);
    Tensor cls_out = reshape(slice(hf, 1, 0, 1), {batch, d});
    return linear(cls_out, head_handle_);
}

// ---------------------------------------------------------------------------
// adapters

void Model::wrap_adapters(const AdapterConfig& acfg) {
    acfg.validate();
    if (acfg.kind == AdapterConfig::Kind::none) return;
    if (has_adapters()) throw ConfigError("wrap_adapters: model already has adapters");

    // Check rank against every targeted weight before mutating anything.
    std::vector<int> targets;
    for (const LayerHandle& h : registry_) {
        if (h.is_adapter || !acfg.target_roles.count(h.role)) continue;
        const LinearRefs refs = linear_refs(h.index);
        const Shape& ws = params_[static_cast<std::size_t>(refs.w)].tensor.shape();
        if (acfg.rank > std::min(ws[0], ws[1]))
            throw ConfigError("wrap_adapters: rank " + std::to_string(acfg.rank) + " exceeds weight " +
                              shape_str(ws) + " of " + h.name);
        targets.push_back(h.index);
    }
    if (targets.empty()) throw ConfigError("wrap_adapters: no targeted layers in this model");

    adapter_ = acfg;
    const char* suffix = acfg.kind == AdapterConfig::Kind::lora ? ".lora" : ".dora";
    Rng rng(Rng::derive(cfg_.seed, "adapter"));
    for (const int base : targets) {
        const LinearRefs refs = linear_refs(base);
        const Tensor w = params_[static_cast<std::size_t>(refs.w)].tensor;  // handle copy: params_ reallocates below
        const std::size_t in = w.shape()[0], out = w.shape()[1];
        const std::string base_name = handle(base).name;  // registry reallocates below
        const Role base_role = handle(base).role;

        const int idx = static_cast<int>(registry_.size());
        registry_.push_back(LayerHandle{idx, base_name + suffix, base_role, 0, true, base});
        handle_params_.emplace_back();
        trainable_.push_back(true);
        adapter_refs_.push_back(AdapterRefs{});
        adapter_handle_.push_back(-1);

        const auto add = [&](const std::string& name, Shape shape, bool random) {
            Tensor t = make_tensor(std::move(shape));
            if (random)
                for (double& v : t.vec()) v = rng.truncated_normal(0.02);
            t.set_requires_grad(true);
            const int id = static_cast<int>(params_.size());
            params_.push_back(Param{name, std::move(t), idx});
            handle_params_[static_cast<std::size_t>(idx)].push_back(id);
            return id;
        };

        AdapterRefs ar;
        ar.a = add(base_name + suffix + ".a", {in, acfg.rank}, true);
        ar.b = add(base_name + suffix + ".b", {acfg.rank, out}, false);  // zero: identity at init
        if (acfg.kind == AdapterConfig::Kind::dora) {
            // Magnitude starts at the base column norms, computed through the
            // same kernel path the forward uses so the init identity is exact.
            ar.m = add(base_name + suffix + ".m", {1, out}, false);
            Tensor colsq = ops::matmul(Tensor::full({1, in}, 1.0), ops::mul(w, w));
            Tensor coln = ops::sqrt(colsq);
            params_[static_cast<std::size_t>(ar.m)].tensor.vec() = coln.vec();
        }
        adapter_refs_[static_cast<std::size_t>(base)] = ar;
        adapter_handle_[static_cast<std::size_t>(base)] = idx;

        std::size_t count = 0;
        for (const int pid : handle_params_[static_cast<std::size_t>(idx)])
            count += params_[static_cast<std::size_t>(pid)].tensor.size();
        registry_[static_cast<std::size_t>(idx)].param_count = count;
    }
    // PEFT mode: adapters train, base weights freeze.
    set_all_trainable();
}

// ---------------------------------------------------------------------------

ParamGradGuard::ParamGradGuard(const Model& model) {
    for (const Param& p : model.params()) {
        const auto& impl = p.tensor.impl();
        if (impl->requires_grad) {
            impl->requires_grad = false;
            suspended_.push_back(impl);
        }
    }
}

ParamGradGuard::~ParamGradGuard() {
    for (const auto& impl : suspended_) impl->requires_grad = true;
}

}  // namespace safer
