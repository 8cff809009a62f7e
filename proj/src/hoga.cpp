#include "leba/hoga.hpp"

#include <cmath>

#include "leba/autograd.hpp"

namespace leba {

namespace {

double safe_log(double p) { return std::log(p < 1e-300 ? 1e-300 : p); }

void require_batch(const char* op, std::size_t a, std::size_t b) {
    if (a != b) throw ShapeError(std::string(op) + ": batch lengths differ");
    if (a == 0) throw ContractError(std::string(op) + ": empty batch");
}

}  // namespace

double forward_loss(const std::vector<double>& s_t, const std::vector<double>& p_t) {
    require_batch("forward_loss", s_t.size(), p_t.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < s_t.size(); ++i) {
        const double d = s_t[i] - p_t[i];
        acc += d * d;
    }
    return acc / static_cast<double>(s_t.size());
}

double backward_loss(const std::vector<double>& g_s_dot_delta, const std::vector<double>& logp_post,
                     const std::vector<double>& logp_pre, double gamma) {
    require_batch("backward_loss", g_s_dot_delta.size(), logp_post.size());
    require_batch("backward_loss", g_s_dot_delta.size(), logp_pre.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < g_s_dot_delta.size(); ++i) {
        const double d = g_s_dot_delta[i] - gamma * (logp_post[i] - logp_pre[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(g_s_dot_delta.size());
}

double estimate_gamma(const std::vector<double>& g_s_dot_delta, const std::vector<double>& logp_post,
                      const std::vector<double>& logp_pre, double fallback) {
    require_batch("estimate_gamma", g_s_dot_delta.size(), logp_post.size());
    require_batch("estimate_gamma", g_s_dot_delta.size(), logp_pre.size());
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < g_s_dot_delta.size(); ++i) {
        num += std::abs(g_s_dot_delta[i]);
        den += std::abs(logp_post[i] - logp_pre[i]);
    }
    if (den < 1e-12) return fallback;
    return num / den;
}

double update_gamma(double gamma, const std::vector<double>& g_s_dot_delta,
                    const std::vector<double>& logp_post, const std::vector<double>& logp_pre) {
    return 0.9 * gamma + 0.1 * estimate_gamma(g_s_dot_delta, logp_post, logp_pre, gamma);
}

void hoga_step(Model& surrogate, const Buffer& buffer, HogaState& state, std::size_t target_class) {
    if (!buffer.full())
        throw ContractError("hoga_step: buffer holds " + std::to_string(buffer.size()) +
                            " of " + std::to_string(buffer.capacity) + " tuples");
    if (target_class >= surrogate.spec.classes)
        throw ContractError("hoga_step: target class out of range");

    const std::size_t n = buffer.size();
    auto params = param_variables(surrogate);

    // Per-tuple gradient graphs, batched into the two losses.
    NodeRef fl_sum, bl_sum;
    std::vector<double> gsd_values(n), logp_post(n), logp_pre(n);
    for (std::size_t i = 0; i < n; ++i) {
        const QueryTuple& t = buffer.entries[i];
        NodeRef xn = variable(t.x_pre);
        NodeRef log_s = gather1d(log_softmax(model_logits(surrogate.spec, params, xn)), target_class);
        NodeRef s_t = exp_(log_s);

        NodeRef fl_term = mul(sub(s_t, constant(Tensor::scalar(t.p_pre))),
                              sub(s_t, constant(Tensor::scalar(t.p_pre))));
        fl_sum = fl_sum ? add(fl_sum, fl_term) : fl_term;

        NodeRef g_s = grad_as_node(log_s, {xn})[0];
        NodeRef gsd = dot(g_s, constant(k_sub(t.x_post, t.x_pre)));
        gsd_values[i] = gsd->value.data[0];
        logp_post[i] = safe_log(t.p_post);
        logp_pre[i] = safe_log(t.p_pre);

        const double target = state.gamma * (logp_post[i] - logp_pre[i]);
        NodeRef r = sub(gsd, constant(Tensor::scalar(target)));
        NodeRef bl_term = mul(r, r);
        bl_sum = bl_sum ? add(bl_sum, bl_term) : bl_term;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    NodeRef total;
    if (state.use_backward_loss) total = mul_scalar(bl_sum, inv_n);
    if (state.use_forward_loss) {
        // Inside the full loss FL is lambda-weighted; as the only term it
        // runs at unit weight so the ablation actually exercises it.
        NodeRef fl = mul_scalar(fl_sum, inv_n * (state.use_backward_loss ? state.lambda : 1.0));
        total = total ? add(total, fl) : fl;
    }
    if (!total) throw ContractError("hoga_step: both loss terms disabled");

    auto grads = backward(total, params);
    if (state.adaptive_gamma) state.gamma = update_gamma(state.gamma, gsd_values, logp_post, logp_pre);
    bool finite = true;
    for (std::size_t p = 0; p < params.size() && finite; ++p)
        for (double g : grads[p].data)
            if (!std::isfinite(g) || !std::isfinite(g * state.lr)) {
                finite = false;
                break;
            }
    if (finite) {
        for (std::size_t p = 0; p < params.size(); ++p) {
            Tensor& t = surrogate.params[p].second;
            for (std::size_t j = 0; j < t.numel(); ++j) t.data[j] -= state.lr * grads[p].data[j];
        }
        for (auto& [name, t] : surrogate.params) {
            if (!t.all_finite()) {
                finite = false;
                break;
            }
        }
        if (!finite) {
            // roll back: the step overflowed a parameter
            for (std::size_t p = 0; p < params.size(); ++p) {
                Tensor& t = surrogate.params[p].second;
                for (std::size_t j = 0; j < t.numel(); ++j) t.data[j] += state.lr * grads[p].data[j];
            }
            // addition round trip can leave dust; restore exactly
            for (std::size_t p = 0; p < params.size(); ++p)
                surrogate.params[p].second = params[p]->value;
        }
    }
    if (finite)
        ++state.steps;
    else
        ++state.skipped_steps;
}

}  // namespace leba
