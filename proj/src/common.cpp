#include "adaseg/common.hpp"

#include <atomic>
#include <cstdio>

namespace adaseg {

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

std::uint64_t fnv1a(const void* bytes, std::size_t n) {
    Fnv1a h;
    h.update(bytes, n);
    return h.value();
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over the combined state
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

namespace {
std::atomic<std::uint64_t> g_grad_ops{0};
}

std::uint64_t grad_op_count() { return g_grad_ops.load(); }
void note_grad_op() { g_grad_ops.fetch_add(1); }

}  // namespace adaseg
