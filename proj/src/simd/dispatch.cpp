#include "maskgan/simd/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace maskgan::simd {

#ifndef MASKGAN_HAVE_AVX2
const KernelTable& avx2_kernels() { return scalar_kernels(); }
#endif

namespace {

bool cpu_has_avx2() {
#if defined(MASKGAN_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Level initial_level() {
    Level level = detect_level();
    if (const char* env = std::getenv("MASKGAN_SIMD")) {
        const std::string value(env);
        if (value == "scalar") level = Level::Scalar;
        else if (value == "avx2" && cpu_has_avx2()) level = Level::Avx2;
    }
    return level;
}

std::atomic<const KernelTable*>& table_slot() {
    static std::atomic<const KernelTable*> slot{
        initial_level() == Level::Avx2 ? &avx2_kernels() : &scalar_kernels()};
    return slot;
}

}  // namespace

std::string_view level_name(Level level) {
    switch (level) {
        case Level::Scalar: return "scalar";
        case Level::Avx2: return "avx2";
    }
    return "unknown";
}

Level detect_level() { return cpu_has_avx2() ? Level::Avx2 : Level::Scalar; }

Level active_level() {
    return table_slot().load() == &scalar_kernels() ? Level::Scalar : Level::Avx2;
}

void set_level(Level level) {
    if (level == Level::Avx2 && !cpu_has_avx2()) level = Level::Scalar;
    table_slot().store(level == Level::Avx2 ? &avx2_kernels() : &scalar_kernels());
}

const KernelTable& kernels() { return *table_slot().load(std::memory_order_relaxed); }

void gemm(const GemmArgs& args) { kernels().gemm(args); }
void gemm(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda, const float* b,
          std::size_t ldb, float* c, std::size_t ldc, bool accumulate) {
    kernels().gemm(GemmArgs{m, n, k, a, lda, b, ldb, c, ldc, accumulate});
}
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda, const float* b,
             std::size_t ldb, float* c, std::size_t ldc, bool accumulate) {
    kernels().gemm_nt(GemmArgs{m, n, k, a, lda, b, ldb, c, ldc, accumulate});
}
void axpy(std::size_t n, float alpha, const float* x, float* y) { kernels().axpy(n, alpha, x, y); }
float dot(std::size_t n, const float* x, const float* y) { return kernels().dot(n, x, y); }
float sum(std::size_t n, const float* x) { return kernels().sum(n, x); }
void scale_shift(std::size_t n, float scale, float shift, const float* x, float* y) {
    kernels().scale_shift(n, scale, shift, x, y);
}

}  // namespace maskgan::simd
