#include "safer/kernels.hpp"

#include <string>

#include "safer/errors.hpp"

namespace safer::kernels {

bool avx2_supported() {
#if defined(__x86_64__) || defined(_M_X64)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

#if !(defined(__x86_64__) || defined(_M_X64))
const Ops& avx2_ops() { throw ConfigError("avx2 backend not compiled on this architecture"); }
#endif

namespace {
const Ops* g_active = nullptr;

const Ops* pick_default() { return avx2_supported() ? &avx2_ops() : &scalar_ops(); }
}  // namespace

const Ops& active() {
    if (g_active == nullptr) g_active = pick_default();
    return *g_active;
}

void force_backend(std::string_view name) {
    if (name == "auto") {
        g_active = pick_default();
    } else if (name == "scalar") {
        g_active = &scalar_ops();
    } else if (name == "avx2") {
        if (!avx2_supported()) throw ConfigError("avx2 backend requested but not available on this CPU");
        g_active = &avx2_ops();
    } else {
        throw ConfigError("unknown kernel backend '" + std::string(name) + "' (want auto|scalar|avx2)");
    }
}

}  // namespace safer::kernels
