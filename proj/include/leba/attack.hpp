#ifndef LEBA_ATTACK_HPP
#define LEBA_ATTACK_HPP

#include <cstdint>
#include <utility>
#include <vector>

#include "leba/hoga.hpp"
#include "leba/nets.hpp"
#include "leba/oracle.hpp"
#include "leba/tensor.hpp"

namespace leba {

enum class Variant : std::uint8_t {
    kSimba = 0,      // uniform coordinates, smoothed probes
    kSimbaPlus = 1,  // surrogate-saliency coordinate sampling
    kSimbaPP = 2,    // alternate transfer steps with query steps
    kLebaTrain = 3,  // surrogate updated online from query feedback
    kLebaTest = 4,   // frozen (possibly learned) surrogate
};

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct KernelSpec {
    std::size_t size = 5;
    double sigma = 1.5;
};

struct AttackConfig {
    double epsilon = 0.1;       // query probe step
    double zeta = 0.0;          // l2 budget; harness fills a size-derived default
    std::size_t n_Q = 20;       // query iterations per transfer step
    std::size_t n_T = 10;       // transfer-attack inner iterations
    double mu = 0.9;            // transfer momentum
    double epsilon_T = 0.0;     // transfer step; 0 means zeta / n_T
    KernelSpec kernel;          // shared smoothing kernel
    std::size_t buffer_size = 24;
    double lambda = 0.01;
    double gamma0 = 3.0;
    double hoga_lr = 1e-3;
    std::uint64_t max_queries = 2000;
    std::uint64_t seed = 0;
    // Disabling the transfer step reduces simba_pp / leba to simba_plus with
    // the gradient map cached once up front.
    bool transfer_enabled = true;

    double transfer_step() const { return epsilon_T > 0.0 ? epsilon_T : zeta / static_cast<double>(n_T); }
    void validate() const;
};

struct AttackResult {
    bool success = false;
    std::uint64_t queries = 0;
    Tensor x_adv;
    double l2_dist = 0.0;
    // (query index, best loss value after that query)
    std::vector<std::pair<std::uint64_t, double>> trace;
};

// C&W-style margin on log probabilities: J = log p_y - max_{j!=y} log p_j.
// The attack succeeds exactly when J < 0.
double attack_loss(const Tensor& probs, std::size_t y);

// l2-ball projection of Eq-3 form (pre-clamp): if the distance reaches zeta
// the point is pulled back onto the sphere, otherwise returned unchanged.
Tensor project_l2(const Tensor& x_adv, const Tensor& x, double zeta);

// Projection followed by a pixel clamp to [0,1] (no re-projection; clamping
// only shrinks the distance).
Tensor clip_l2(const Tensor& x_adv, const Tensor& x, double zeta);

// Draw a coordinate with probability proportional to |M| (uniform when |M|
// sums to zero), stamp the smoothing kernel there, scale to unit max entry.
// Consumes exactly one rng draw. Returns the probe and the flat coordinate.
std::pair<Tensor, std::size_t> sample_perturbation(const Tensor& M, const Tensor& kernel, Rng& rng);

struct TimiResult {
    Tensor x_adv;     // final iterate, feasible (clipped + clamped)
    Tensor grad_map;  // last smoothed surrogate gradient (the cached M)
};

// Translation-invariant momentum transfer attack on the surrogate: n_T
// iterations of smoothed, l2-normalized, momentum-accumulated gradient
// descent on the attack loss, clipped to the l2 ball each step.
TimiResult timi(const Model& surrogate, const Tensor& x_adv, const Tensor& x, std::size_t y,
                const AttackConfig& cfg);

// Unified attack loop. The surrogate is mutated only for kLebaTrain, which
// also requires `hoga`; other variants leave both untouched. kSimba ignores
// the surrogate entirely.
AttackResult run_attack(Variant variant, const Tensor& x, std::size_t y, Oracle& oracle,
                        Model& surrogate, const AttackConfig& cfg, HogaState* hoga = nullptr);

// Named entry points for the individual algorithms.
AttackResult simba_plus(const Tensor& x, std::size_t y, Oracle& oracle, const Model& surrogate,
                        const AttackConfig& cfg);
AttackResult simba_pp(const Tensor& x, std::size_t y, Oracle& oracle, const Model& surrogate,
                      const AttackConfig& cfg);
AttackResult leba_attack(const Tensor& x, std::size_t y, Oracle& oracle, Model& surrogate,
                         const AttackConfig& cfg, HogaState& hoga, bool train_mode);

}  // namespace leba

#endif  // LEBA_ATTACK_HPP
