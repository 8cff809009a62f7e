#ifndef LEBA_HOGA_HPP
#define LEBA_HOGA_HPP

#include <cstddef>
#include <vector>

#include "leba/nets.hpp"
#include "leba/tensor.hpp"

namespace leba {

// One probe observed through the oracle: pre/post images and the victim's
// target probabilities for both. The difference x_post - x_pre is a single
// smoothed coordinate stamp.
struct QueryTuple {
    Tensor x_post;
    Tensor x_pre;
    double p_post = 0.0;
    double p_pre = 0.0;
};

struct Buffer {
    std::vector<QueryTuple> entries;
    std::size_t capacity = 24;

    explicit Buffer(std::size_t cap = 24) : capacity(cap) {}
    void add(QueryTuple t) { entries.push_back(std::move(t)); }
    bool full() const { return entries.size() >= capacity; }
    std::size_t size() const { return entries.size(); }
    void clear() { entries.clear(); }
};

// Surrogate-update state: the gradient-compensation factor plus loss/optimizer
// knobs. Lives for a whole attack campaign; the ablation flags select the
// loss configuration.
struct HogaState {
    double gamma = 3.0;
    double lambda = 0.01;
    double lr = 1e-3;
    bool use_backward_loss = true;
    bool use_forward_loss = true;
    bool adaptive_gamma = true;
    std::uint64_t steps = 0;
    // Updates that would have made a parameter non-finite are rolled back and
    // counted here; surrogate parameters stay finite at every exit.
    std::uint64_t skipped_steps = 0;
};

// MSE between surrogate and victim target probabilities.
double forward_loss(const std::vector<double>& s_t, const std::vector<double>& p_t);

// MSE between predicted directional derivatives g_s . delta and the
// gamma-scaled observed log-probability changes.
double backward_loss(const std::vector<double>& g_s_dot_delta, const std::vector<double>& logp_post,
                     const std::vector<double>& logp_pre, double gamma);

// Ratio of summed |g_s . delta| to summed |log-probability change|. A
// denominator below 1e-12 returns `fallback` unchanged.
double estimate_gamma(const std::vector<double>& g_s_dot_delta, const std::vector<double>& logp_post,
                      const std::vector<double>& logp_pre, double fallback);

// gamma <- 0.9 gamma + 0.1 estimate.
double update_gamma(double gamma, const std::vector<double>& g_s_dot_delta,
                    const std::vector<double>& logp_post, const std::vector<double>& logp_pre);

// One surrogate update from a full buffer: forward loss on probabilities,
// backward loss on the gradient graph, one SGD step. gamma is refreshed from
// the pre-update gradients. The buffer itself is left untouched; the caller
// empties it.
void hoga_step(Model& surrogate, const Buffer& buffer, HogaState& state, std::size_t target_class);

}  // namespace leba

#endif  // LEBA_HOGA_HPP
