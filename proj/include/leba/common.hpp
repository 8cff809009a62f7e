#ifndef LEBA_COMMON_HPP
#define LEBA_COMMON_HPP

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace leba {

// Contract violation: a caller broke a documented precondition.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes do not conform for an operation.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// A primitive was asked for a derivative rule it does not define.
struct UnsupportedOpError : std::runtime_error {
    explicit UnsupportedOpError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file or stream; carries the byte offset where parsing failed.
struct ParseError : std::runtime_error {
    ParseError(const std::string& msg, std::uint64_t offset)
        : std::runtime_error(msg + " (at byte offset " + std::to_string(offset) + ")"),
          offset(offset) {}
    std::uint64_t offset;
};

// Weight file does not match the requested model spec.
struct IncompatibleWeightsError : std::runtime_error {
    explicit IncompatibleWeightsError(const std::string& msg) : std::runtime_error(msg) {}
};

// The query oracle refused because the budget is spent. Kept distinct from
// every other error type so callers can tell it apart.
struct BudgetExceededError : std::runtime_error {
    explicit BudgetExceededError(const std::string& msg) : std::runtime_error(msg) {}
};

// Wire-protocol failure on the client side.
struct ProtocolError : std::runtime_error {
    explicit ProtocolError(const std::string& msg) : std::runtime_error(msg) {}
};

// Deterministic 64-bit RNG (splitmix64 core). std::mt19937 plus the standard
// distributions is implementation-defined across libraries; attack traces must
// be reproducible bit for bit, so we keep the whole pipeline in-house.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Uniform index in [0, n). n must be positive.
    std::size_t next_index(std::size_t n) {
        if (n == 0) throw ContractError("Rng::next_index: n must be positive");
        // 128-bit multiply avoids modulo bias.
        unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
        return static_cast<std::size_t>(m >> 64);
    }

    // Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 1e-300) u1 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.28318530717958647692 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Stable seed derivation for sub-streams (per image, per repeat, ...).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    Rng r(base ^ (0xd1b54a32d192ed03ULL * (stream + 1)));
    return r.next_u64();
}

}  // namespace leba

#endif  // LEBA_COMMON_HPP
