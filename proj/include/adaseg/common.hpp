#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace adaseg {

// All in-memory numerics are double; tensors are stored on disk as float32.
using real = double;

// ============================================================================
// Error taxonomy. The CLI maps these onto exit codes:
//   validation (and subtypes) -> 1, contract -> 2, io -> 3.
// ============================================================================
struct validation_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct shape_error : validation_error {
    using validation_error::validation_error;
};
struct numeric_error : validation_error {
    using validation_error::validation_error;
};
struct contract_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ============================================================================
// FNV-1a 64-bit hashing, used for checkpoint fingerprints and config hashes.
// ============================================================================
class Fnv1a {
public:
    void update(const void* bytes, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(bytes);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= static_cast<std::uint64_t>(p[i]);
            state_ *= 1099511628211ull;
        }
    }
    void update(const std::string& s) { update(s.data(), s.size()); }
    std::uint64_t value() const { return state_; }

private:
    std::uint64_t state_ = 14695981039346656037ull;
};

std::string hex64(std::uint64_t v);
std::uint64_t fnv1a(const void* bytes, std::size_t n);

// splitmix64 mix, for deriving per-item seeds from (seed, index) pairs.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

// ============================================================================
// Gradient-machinery instrumentation. Every backward pass and every optimizer
// step bumps this counter; inference-path tests assert it never moves.
// ============================================================================
std::uint64_t grad_op_count();
void note_grad_op();

}  // namespace adaseg
