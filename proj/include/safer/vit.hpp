#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "safer/tensor.hpp"

namespace safer {

// Architectural role of a parameter group. The registry decomposes each
// transformer block into its six weight-bearing sublayers; layernorms are
// registered but excluded from sharpness ranking by default.
enum class Role { patch_embed, attn_qkv, attn_proj, mlp_fc1, mlp_fc2, norm1, norm2, head };

const char* role_name(Role role);
Role role_from_name(const std::string& name);  // accepts the registry spellings
const std::set<Role>& default_rankable_roles();

struct ViTConfig {
    std::size_t image_size = 16;
    std::size_t patch_size = 4;
    std::size_t channels = 3;
    std::size_t embed_dim = 32;
    std::size_t depth = 3;
    std::size_t heads = 4;
    double mlp_ratio = 2.0;
    std::size_t num_classes = 10;
    std::uint64_t seed = 0;

    void validate() const;  // throws ConfigError
    std::size_t tokens() const {  // patches + class token
        const std::size_t g = image_size / patch_size;
        return g * g + 1;
    }
};

struct LayerHandle {
    int index = 0;            // ordinal position, equals forward order for base handles
    std::string name;         // e.g. "block2.mlp.fc1"
    Role role = Role::head;
    std::size_t param_count = 0;
    bool is_adapter = false;
    int base_index = -1;      // wrapped handle for adapter entries
};

struct AdapterConfig {
    enum class Kind { none, lora, dora };
    Kind kind = Kind::none;
    std::size_t rank = 4;
    double alpha = 8.0;
    std::set<Role> target_roles{Role::attn_qkv, Role::attn_proj, Role::mlp_fc1, Role::mlp_fc2};

    void validate() const;
};

const char* adapter_kind_name(AdapterConfig::Kind kind);
AdapterConfig::Kind adapter_kind_from_name(const std::string& name);

struct Param {
    std::string name;
    Tensor tensor;
    int handle = -1;
};

// Tiny ViT with a named layer registry. Copies share parameter storage;
// clone() deep-copies. Class token, positional embeddings and the final
// pre-head layernorm ride along under the patch-embed and head handles, which
// keeps the registry at exactly 1 + depth*6 + 1 entries.
class Model {
  public:
    static Model build(const ViTConfig& cfg);
    Model clone() const;

    const ViTConfig& config() const { return cfg_; }
    const std::vector<LayerHandle>& registry() const { return registry_; }
    const LayerHandle& handle(int index) const;
    int handle_index(const std::string& name) const;  // RegistryError when unknown

    const std::vector<Param>& params() const { return params_; }
    std::vector<Param>& params() { return params_; }
    const std::vector<int>& params_of(int handle) const;
    std::size_t total_param_count() const;

    Tensor forward(const Tensor& images) const;

    // Freezing is enforced at the optimizer: only trainable handles receive
    // updates, every parameter still carries gradients.
    void set_trainable(const std::vector<int>& handles);
    void set_all_trainable();
    bool trainable(int handle) const;
    std::vector<int> trainable_handles() const;

    // Maps a base-handle selection to the handles that actually train: with
    // adapters wrapped, the adapter handle of each selected layer; selected
    // layers without an adapter are dropped.
    std::vector<int> resolve_selection(const std::vector<int>& selected) const;

    void zero_grads() const;

    void wrap_adapters(const AdapterConfig& acfg);
    const AdapterConfig& adapter_config() const { return adapter_; }
    bool has_adapters() const { return adapter_.kind != AdapterConfig::Kind::none; }
    int adapter_of(int base_handle) const;  // -1 when not wrapped

    // Weight-bearing handles eligible for sharpness ranking, in index order.
    std::vector<int> rankable_handles(const std::set<Role>& roles) const;

    std::string digest(int handle) const;  // SHA-256 over the handle's parameter bytes

  private:
    Model() = default;
    Tensor linear(const Tensor& x2d, int handle) const;  // x [n, in] -> [n, out]

    ViTConfig cfg_;
    AdapterConfig adapter_;
    std::vector<LayerHandle> registry_;
    std::vector<Param> params_;
    std::vector<std::vector<int>> handle_params_;  // param ids per handle
    std::vector<bool> trainable_;

    struct LinearRefs {
        int w = -1, b = -1;
    };
    struct AdapterRefs {
        int a = -1, b = -1, m = -1;
    };
    struct BlockRefs {
        int n1g, n1b, n2g, n2b;
        int qkv, proj, fc1, fc2;  // handle indices
    };
    LinearRefs linear_refs(int handle) const;

    int patch_w_ = -1, patch_b_ = -1, cls_ = -1, pos_ = -1;
    int head_ng_ = -1, head_nb_ = -1;
    std::vector<BlockRefs> blocks_;
    int patch_handle_ = 0, head_handle_ = 0;
    std::vector<AdapterRefs> adapter_refs_;   // per base handle
    std::vector<int> adapter_handle_;         // per base handle, -1 if none
};

// Suspends gradient accumulation into model parameters for the lifetime of
// the guard (input-gradient-only passes); grad buffers are left untouched.
class ParamGradGuard {
  public:
    explicit ParamGradGuard(const Model& model);
    ~ParamGradGuard();
    ParamGradGuard(const ParamGradGuard&) = delete;
    ParamGradGuard& operator=(const ParamGradGuard&) = delete;

  private:
    std::vector<std::shared_ptr<TensorImpl>> suspended_;
};

}  // namespace safer
