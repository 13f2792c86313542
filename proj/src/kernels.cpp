#include "knnattn/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <string>

#include "kernels_impl.hpp"

namespace knnattn::kernels {

namespace {

bool cpu_has_avx2() {
#if defined(KNNATTN_HAVE_AVX2)
    return __builtin_cpu_supports("avx2");
#else
    return false;
#endif
}

Level detect_default() {
    if (const char* env = std::getenv("KNN_ATTN_SIMD")) {
        if (std::strcmp(env, "scalar") == 0) return Level::scalar;
        if (std::strcmp(env, "avx2") == 0) return Level::avx2;
        if (std::strcmp(env, "neon") == 0) return Level::neon;
        throw std::invalid_argument(std::string("KNN_ATTN_SIMD: unknown level '") + env + "'");
    }
#if defined(KNNATTN_HAVE_NEON)
    return Level::neon;
#else
    return cpu_has_avx2() ? Level::avx2 : Level::scalar;
#endif
}

std::atomic<int> g_level{-1};

Level resolve() {
    int lv = g_level.load(std::memory_order_acquire);
    if (lv < 0) {
        Level detected = detect_default();
        if (!level_supported(detected)) {
            throw std::invalid_argument(std::string("SIMD level not supported here: ") +
                                        level_name(detected));
        }
        int expected = -1;
        g_level.compare_exchange_strong(expected, static_cast<int>(detected));
        lv = g_level.load(std::memory_order_acquire);
    }
    return static_cast<Level>(lv);
}

}  // namespace

const char* level_name(Level level) {
    switch (level) {
        case Level::scalar: return "scalar";
        case Level::avx2: return "avx2";
        case Level::neon: return "neon";
    }
    return "?";
}

bool level_supported(Level level) {
    switch (level) {
        case Level::scalar: return true;
        case Level::avx2: return cpu_has_avx2();
        case Level::neon:
#if defined(KNNATTN_HAVE_NEON)
            return true;
#else
            return false;
#endif
    }
    return false;
}

Level active_level() { return resolve(); }

void set_level(Level level) {
    if (!level_supported(level)) {
        throw std::invalid_argument(std::string("SIMD level not supported here: ") +
                                    level_name(level));
    }
    g_level.store(static_cast<int>(level), std::memory_order_release);
}

const Ops& ops_for(Level level) {
    switch (level) {
        case Level::scalar: return detail::scalar_ops;
#if defined(KNNATTN_HAVE_AVX2)
        case Level::avx2: return detail::avx2_ops;
#endif
#if defined(KNNATTN_HAVE_NEON)
        case Level::neon: return detail::neon_ops;
#endif
        default:
            throw std::invalid_argument(std::string("SIMD level not compiled in: ") +
                                        level_name(level));
    }
}

const Ops& ops() { return ops_for(resolve()); }

}  // namespace knnattn::kernels
