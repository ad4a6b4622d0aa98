#include "safer/runconfig.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "safer/errors.hpp"
#include "safer/rng.hpp"

namespace safer {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
}

double parse_f64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

std::set<Role> parse_roles(const std::string& key, const std::string& v) {
    std::set<Role> roles;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        try {
            roles.insert(role_from_name(item));
        } catch (const ConfigError&) {
            throw ConfigError(key + ": unknown role '" + item + "'");
        }
    }
    if (roles.empty()) throw ConfigError(key + ": empty role list");
    return roles;
}

std::string roles_str(const std::set<Role>& roles) {
    std::string out;
    for (const Role r : roles) {
        if (!out.empty()) out += ',';
        out += role_name(r);
    }
    return out;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    augment.validate(model.image_size);
    attack.validate();
    optimizer.validate();
    schedule.validate();
    sharpness.validate();
    adapter.validate();
    if (data_source != "synthetic" && data_source != "cifar10")
        throw ConfigError("data.source: expected synthetic|cifar10, got '" + data_source + "'");
    if (data_source == "cifar10" && data_path.empty())
        throw ConfigError("data.path: required for data.source = cifar10");
    if (data_source == "cifar10" && (model.image_size != 32 || model.channels != 3))
        throw ConfigError("data.source cifar10 requires model.image_size = 32, model.channels = 3");
    if (data_source == "synthetic" && model.channels != 3)
        throw ConfigError("synthetic data is rgb: model.channels must be 3");
    if (data_source == "synthetic" && data_n < model.num_classes)
        throw ConfigError("data.n must be at least model.num_classes");
    if (val_fraction < 0.0 || val_fraction >= 1.0)
        throw ConfigError("data.val_fraction: must be in [0,1)");
    if (batch_size == 0) throw ConfigError("train.batch_size: must be positive");
    const std::size_t crop = augment.crop == 0 ? model.image_size : augment.crop;
    if (crop != model.image_size) throw ConfigError("augment.crop: must keep the model input size");
}

void RunConfig::resolve() {
    if (model.seed == 0) model.seed = Rng::derive(seed, "model");
}

RunConfig parse_run_config_text(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    using Setter = std::function<void(const std::string&, const std::string&)>;
    const std::map<std::string, Setter> schema{
        {"seed", [&](const std::string& k, const std::string& v) { cfg.seed = parse_u64(k, v); }},
        {"output_dir", [&](const std::string&, const std::string& v) { cfg.output_dir = v; }},
        {"model.image_size", [&](const std::string& k, const std::string& v) { cfg.model.image_size = parse_u64(k, v); }},
        {"model.patch_size", [&](const std::string& k, const std::string& v) { cfg.model.patch_size = parse_u64(k, v); }},
        {"model.channels", [&](const std::string& k, const std::string& v) { cfg.model.channels = parse_u64(k, v); }},
        {"model.embed_dim", [&](const std::string& k, const std::string& v) { cfg.model.embed_dim = parse_u64(k, v); }},
        {"model.depth", [&](const std::string& k, const std::string& v) { cfg.model.depth = parse_u64(k, v); }},
        {"model.heads", [&](const std::string& k, const std::string& v) { cfg.model.heads = parse_u64(k, v); }},
        {"model.mlp_ratio", [&](const std::string& k, const std::string& v) { cfg.model.mlp_ratio = parse_f64(k, v); }},
        {"model.num_classes", [&](const std::string& k, const std::string& v) { cfg.model.num_classes = parse_u64(k, v); }},
        {"model.seed", [&](const std::string& k, const std::string& v) { cfg.model.seed = parse_u64(k, v); }},
        {"data.source", [&](const std::string&, const std::string& v) { cfg.data_source = v; }},
        {"data.path", [&](const std::string&, const std::string& v) { cfg.data_path = v; }},
        {"data.n", [&](const std::string& k, const std::string& v) { cfg.data_n = parse_u64(k, v); }},
        {"data.val_fraction", [&](const std::string& k, const std::string& v) { cfg.val_fraction = parse_f64(k, v); }},
        {"augment.pad", [&](const std::string& k, const std::string& v) { cfg.augment.pad = parse_u64(k, v); }},
        {"augment.crop", [&](const std::string& k, const std::string& v) { cfg.augment.crop = parse_u64(k, v); }},
        {"augment.hflip_prob", [&](const std::string& k, const std::string& v) { cfg.augment.hflip_prob = parse_f64(k, v); }},
        {"attack.norm", [&](const std::string&, const std::string& v) { cfg.attack.norm = norm_from_name(v); }},
        {"attack.epsilon", [&](const std::string& k, const std::string& v) { cfg.attack.epsilon = parse_f64(k, v); }},
        {"attack.alpha", [&](const std::string& k, const std::string& v) { cfg.attack.alpha = parse_f64(k, v); }},
        {"attack.steps", [&](const std::string& k, const std::string& v) { cfg.attack.steps = static_cast<int>(parse_u64(k, v)); }},
        {"attack.random_start", [&](const std::string& k, const std::string& v) { cfg.attack.random_start = parse_bool(k, v); }},
        {"optimizer.kind", [&](const std::string&, const std::string& v) { cfg.optimizer.kind = optimizer_kind_from_name(v); }},
        {"optimizer.lr", [&](const std::string& k, const std::string& v) { cfg.optimizer.lr = parse_f64(k, v); }},
        {"optimizer.momentum", [&](const std::string& k, const std::string& v) { cfg.optimizer.momentum = parse_f64(k, v); }},
        {"optimizer.weight_decay", [&](const std::string& k, const std::string& v) { cfg.optimizer.weight_decay = parse_f64(k, v); }},
        {"optimizer.rho", [&](const std::string& k, const std::string& v) { cfg.optimizer.rho = parse_f64(k, v); }},
        {"optimizer.decay_factor", [&](const std::string& k, const std::string& v) { cfg.optimizer.decay_factor = parse_f64(k, v); }},
        {"optimizer.sam_norm", [&](const std::string&, const std::string& v) { cfg.optimizer.sam_norm = sam_norm_from_name(v); }},
        {"schedule.pretrain_clean_epochs", [&](const std::string& k, const std::string& v) { cfg.schedule.pretrain_clean_epochs = parse_u64(k, v); }},
        {"schedule.pretrain_adv_epochs", [&](const std::string& k, const std::string& v) { cfg.schedule.pretrain_adv_epochs = parse_u64(k, v); }},
        {"schedule.finetune_epochs", [&](const std::string& k, const std::string& v) { cfg.schedule.finetune_epochs = parse_u64(k, v); }},
        {"schedule.reselect_interval", [&](const std::string& k, const std::string& v) { cfg.schedule.reselect_interval = parse_u64(k, v); }},
        {"schedule.fraction", [&](const std::string& k, const std::string& v) { cfg.schedule.fraction = parse_f64(k, v); }},
        {"schedule.dynamic", [&](const std::string& k, const std::string& v) { cfg.schedule.dynamic = parse_bool(k, v); }},
        {"sharpness.rho", [&](const std::string& k, const std::string& v) { cfg.sharpness.rho = parse_f64(k, v); }},
        {"sharpness.batch_size", [&](const std::string& k, const std::string& v) { cfg.sharpness.batch_size = parse_u64(k, v); }},
        {"sharpness.oracle_steps", [&](const std::string& k, const std::string& v) { cfg.sharpness.oracle_steps = static_cast<int>(parse_u64(k, v)); }},
        {"sharpness.fraction", [&](const std::string& k, const std::string& v) { cfg.sharpness.fraction = parse_f64(k, v); }},
        {"sharpness.microbatch", [&](const std::string& k, const std::string& v) { cfg.sharpness.microbatch = parse_u64(k, v); }},
        {"sharpness.normalize", [&](const std::string& k, const std::string& v) { cfg.sharpness.normalize_by_param_count = parse_bool(k, v); }},
        {"sharpness.on_adapters", [&](const std::string& k, const std::string& v) { cfg.sharpness.gamma_on_adapters = parse_bool(k, v); }},
        {"sharpness.rankable_roles", [&](const std::string& k, const std::string& v) { cfg.sharpness.rankable_roles = parse_roles(k, v); }},
        {"adapter.kind", [&](const std::string&, const std::string& v) { cfg.adapter.kind = adapter_kind_from_name(v); }},
        {"adapter.rank", [&](const std::string& k, const std::string& v) { cfg.adapter.rank = parse_u64(k, v); }},
        {"adapter.alpha", [&](const std::string& k, const std::string& v) { cfg.adapter.alpha = parse_f64(k, v); }},
        {"adapter.target_roles", [&](const std::string& k, const std::string& v) { cfg.adapter.target_roles = parse_roles(k, v); }},
        {"train.batch_size", [&](const std::string& k, const std::string& v) { cfg.batch_size = parse_u64(k, v); }},
        {"train.eval_samples", [&](const std::string& k, const std::string& v) { cfg.eval_samples = parse_u64(k, v); }},
    };

    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const auto it = schema.find(key);
        if (it == schema.end())
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
        it->second(key, value);
    }
    cfg.resolve();
    cfg.validate();
    return cfg;
}

RunConfig parse_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_run_config_text(buffer.str(), path);
}

std::string serialize_run_config(const RunConfig& cfg) {
    std::ostringstream o;
    o << "seed = " << cfg.seed << '\n';
    o << "output_dir = " << cfg.output_dir << '\n';
    o << "model.image_size = " << cfg.model.image_size << '\n';
    o << "model.patch_size = " << cfg.model.patch_size << '\n';
    o << "model.channels = " << cfg.model.channels << '\n';
    o << "model.embed_dim = " << cfg.model.embed_dim << '\n';
    o << "model.depth = " << cfg.model.depth << '\n';
    o << "model.heads = " << cfg.model.heads << '\n';
    o << "model.mlp_ratio = " << fmt(cfg.model.mlp_ratio) << '\n';
    o << "model.num_classes = " << cfg.model.num_classes << '\n';
    o << "model.seed = " << cfg.model.seed << '\n';
    o << "data.source = " << cfg.data_source << '\n';
    if (!cfg.data_path.empty()) o << "data.path = " << cfg.data_path << '\n';
    o << "data.n = " << cfg.data_n << '\n';
    o << "data.val_fraction = " << fmt(cfg.val_fraction) << '\n';
    o << "augment.pad = " << cfg.augment.pad << '\n';
    o << "augment.crop = " << cfg.augment.crop << '\n';
    o << "augment.hflip_prob = " << fmt(cfg.augment.hflip_prob) << '\n';
    o << "attack.norm = " << norm_name(cfg.attack.norm) << '\n';
    o << "attack.epsilon = " << fmt(cfg.attack.epsilon) << '\n';
    o << "attack.alpha = " << fmt(cfg.attack.alpha) << '\n';
    o << "attack.steps = " << cfg.attack.steps << '\n';
    o << "attack.random_start = " << (cfg.attack.random_start ? "true" : "false") << '\n';
    o << "optimizer.kind = " << optimizer_kind_name(cfg.optimizer.kind) << '\n';
    o << "optimizer.lr = " << fmt(cfg.optimizer.lr) << '\n';
    o << "optimizer.momentum = " << fmt(cfg.optimizer.momentum) << '\n';
    o << "optimizer.weight_decay = " << fmt(cfg.optimizer.weight_decay) << '\n';
    o << "optimizer.rho = " << fmt(cfg.optimizer.rho) << '\n';
    o << "optimizer.decay_factor = " << fmt(cfg.optimizer.decay_factor) << '\n';
    o << "optimizer.sam_norm = " << sam_norm_name(cfg.optimizer.sam_norm) << '\n';
    o << "schedule.pretrain_clean_epochs = " << cfg.schedule.pretrain_clean_epochs << '\n';
    o << "schedule.pretrain_adv_epochs = " << cfg.schedule.pretrain_adv_epochs << '\n';
    o << "schedule.finetune_epochs = " << cfg.schedule.finetune_epochs << '\n';
    o << "schedule.reselect_interval = " << cfg.schedule.reselect_interval << '\n';
    o << "schedule.fraction = " << fmt(cfg.schedule.fraction) << '\n';
    o << "schedule.dynamic = " << (cfg.schedule.dynamic ? "true" : "false") << '\n';
    o << "sharpness.rho = " << fmt(cfg.sharpness.rho) << '\n';
    o << "sharpness.batch_size = " << cfg.sharpness.batch_size << '\n';
    o << "sharpness.oracle_steps = " << cfg.sharpness.oracle_steps << '\n';
    o << "sharpness.fraction = " << fmt(cfg.sharpness.fraction) << '\n';
    o << "sharpness.microbatch = " << cfg.sharpness.microbatch << '\n';
    o << "sharpness.normalize = " << (cfg.sharpness.normalize_by_param_count ? "true" : "false") << '\n';
    o << "sharpness.on_adapters = " << (cfg.sharpness.gamma_on_adapters ? "true" : "false") << '\n';
    o << "sharpness.rankable_roles = " << roles_str(cfg.sharpness.rankable_roles) << '\n';
    o << "adapter.kind = " << adapter_kind_name(cfg.adapter.kind) << '\n';
    o << "adapter.rank = " << cfg.adapter.rank << '\n';
    o << "adapter.alpha = " << fmt(cfg.adapter.alpha) << '\n';
    o << "adapter.target_roles = " << roles_str(cfg.adapter.target_roles) << '\n';
    o << "train.batch_size = " << cfg.batch_size << '\n';
    o << "train.eval_samples = " << cfg.eval_samples << '\n';
    return o.str();
}

}  // namespace safer
