#include "leba/attack.hpp"

#include <algorithm>
#include <cmath>

#include "leba/autograd.hpp"

namespace leba {

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::kSimba: return "simba";
        case Variant::kSimbaPlus: return "simba_plus";
        case Variant::kSimbaPP: return "simba_pp";
        case Variant::kLebaTrain: return "leba_train";
        case Variant::kLebaTest: return "leba_test";
    }
    throw ContractError("variant_name: unknown variant");
}

Variant variant_from_name(const std::string& name) {
    if (name == "simba") return Variant::kSimba;
    if (name == "simba_plus") return Variant::kSimbaPlus;
    if (name == "simba_pp") return Variant::kSimbaPP;
    if (name == "leba_train") return Variant::kLebaTrain;
    if (name == "leba_test") return Variant::kLebaTest;
    throw ContractError("unknown attack variant: " + name);
}

void AttackConfig::validate() const {
    if (!(epsilon > 0.0)) throw ContractError("AttackConfig: epsilon must be > 0");
    if (!(zeta > 0.0)) throw ContractError("AttackConfig: zeta must be > 0");
    if (n_Q < 1) throw ContractError("AttackConfig: n_Q must be >= 1");
    if (n_T < 1) throw ContractError("AttackConfig: n_T must be >= 1");
    if (mu < 0.0 || mu >= 1.0) throw ContractError("AttackConfig: mu must be in [0,1)");
    if (buffer_size < 1) throw ContractError("AttackConfig: buffer_size must be >= 1");
    if (lambda < 0.0) throw ContractError("AttackConfig: lambda must be >= 0");
    if (!(gamma0 > 0.0)) throw ContractError("AttackConfig: gamma0 must be > 0");
    if (max_queries < 1) throw ContractError("AttackConfig: max_queries must be >= 1");
    if (kernel.size % 2 == 0) throw ContractError("AttackConfig: kernel size must be odd");
}

double attack_loss(const Tensor& probs, std::size_t y) {
    if (probs.shape.size() != 1 || y >= probs.numel())
        throw ContractError("attack_loss: bad probability vector or label");
    double runner_up = -1.0;
    for (std::size_t j = 0; j < probs.numel(); ++j) {
        if (j == y) continue;
        runner_up = std::max(runner_up, probs.data[j]);
    }
    const double floor = 1e-300;
    return std::log(std::max(probs.data[y], floor)) - std::log(std::max(runner_up, floor));
}

Tensor project_l2(const Tensor& x_adv, const Tensor& x, double zeta) {
    if (!(zeta > 0.0)) throw ContractError("project_l2: zeta must be > 0");
    if (!x_adv.same_shape(x))
        throw ShapeError("project_l2: shapes " + shape_str(x_adv.shape) + " vs " + shape_str(x.shape));
    const double d = l2_distance(x_adv, x);
    if (d < zeta) return x_adv;
    const double scale = zeta / d;
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i)
        out.data[i] = x.data[i] + scale * (x_adv.data[i] - x.data[i]);
    return out;
}

Tensor clip_l2(const Tensor& x_adv, const Tensor& x, double zeta) {
    Tensor out = project_l2(x_adv, x, zeta);
    for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
    return out;
}

std::pair<Tensor, std::size_t> sample_perturbation(const Tensor& M, const Tensor& kernel, Rng& rng) {
    const std::size_t n = M.numel();
    if (n == 0) throw ContractError("sample_perturbation: empty map");
    double total = 0.0;
    for (double v : M.data) total += std::abs(v);
    std::size_t coord;
    if (total <= 0.0) {
        coord = rng.next_index(n);  // degenerate map: plain SimBA coordinate
    } else {
        const double r = rng.next_double() * total;
        double acc = 0.0;
        coord = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
            acc += std::abs(M.data[i]);
            if (r < acc) {
                coord = i;
                break;
            }
        }
    }
    Tensor q(M.shape);
    q.data[coord] = 1.0;
    Tensor delta = smooth(q, kernel);
    double mx = 0.0;
    for (double v : delta.data) mx = std::max(mx, v);
    for (double& v : delta.data) v /= mx;
    return {std::move(delta), coord};
}

TimiResult timi(const Model& surrogate, const Tensor& x_adv, const Tensor& x, std::size_t y,
                const AttackConfig& cfg) {
    cfg.validate();
    const Tensor kernel = gaussian_kernel(cfg.kernel.size, cfg.kernel.sigma);
    const double step = cfg.transfer_step();

    std::vector<NodeRef> params;
    params.reserve(surrogate.params.size());
    for (const auto& [name, t] : surrogate.params) params.push_back(constant(t));

    Tensor cur = x_adv;
    Tensor momentum = Tensor::zeros(x.shape);
    Tensor grad_map = Tensor::zeros(x.shape);
    for (std::size_t t = 0; t < cfg.n_T; ++t) {
        NodeRef xn = variable(cur);
        NodeRef ls = log_softmax(model_logits(surrogate.spec, params, xn));
        std::size_t runner_up = y == 0 ? 1 : 0;
        for (std::size_t j = 0; j < ls->value.numel(); ++j) {
            if (j == y) continue;
            if (ls->value.data[j] > ls->value.data[runner_up]) runner_up = j;
        }
        NodeRef loss = sub(gather1d(ls, y), gather1d(ls, runner_up));
        Tensor g = backward(loss, {xn})[0];
        Tensor g_sm = smooth(g, kernel);
        grad_map = g_sm;
        const double norm = l2_norm(g_sm);
        if (norm <= 0.0) break;  // flat iterate: leave state as is
        for (std::size_t i = 0; i < cur.numel(); ++i) {
            momentum.data[i] = cfg.mu * momentum.data[i] + g_sm.data[i] / norm;
            cur.data[i] -= step * momentum.data[i];
        }
        cur = clip_l2(cur, x, cfg.zeta);
    }
    return {std::move(cur), std::move(grad_map)};
}

namespace {

struct LoopState {
    Tensor x_adv;
    double p_t = 0.0;
    double j = 0.0;
    std::uint64_t queries = 0;
};

}  // namespace

AttackResult run_attack(Variant variant, const Tensor& x, std::size_t y, Oracle& oracle,
                        Model& surrogate, const AttackConfig& cfg, HogaState* hoga) {
    cfg.validate();
    const bool guided = variant != Variant::kSimba;
    const bool use_timi = (variant == Variant::kSimbaPP || variant == Variant::kLebaTrain ||
                           variant == Variant::kLebaTest) &&
                          cfg.transfer_enabled;
    const bool train_mode = variant == Variant::kLebaTrain;
    if (train_mode && hoga == nullptr)
        throw ContractError("run_attack: leba_train requires a HogaState");

    Rng rng(cfg.seed);
    const Tensor kernel = gaussian_kernel(cfg.kernel.size, cfg.kernel.sigma);
    Buffer buffer(cfg.buffer_size);

    AttackResult result;
    LoopState st;
    st.x_adv = x;

    auto record = [&](const OracleResponse& resp) {
        result.trace.emplace_back(resp.query_index, st.j);
    };

    // Initialization query.
    {
        OracleResponse resp = oracle.query(x);
        st.queries = 1;
        st.p_t = resp.probs.data[y];
        st.j = attack_loss(resp.probs, y);
        record(resp);
    }

    Tensor m_map = Tensor::zeros(x.shape);
    if (guided && !use_timi) m_map = grad_input(surrogate, x, y);  // cached once

    for (std::size_t i = 0; st.j >= 0.0 && st.queries < cfg.max_queries; ++i) {
        if (use_timi && i % cfg.n_Q == 0) {
            // Transfer step: run the surrogate attack, spend one query on it.
            TimiResult tr = timi(surrogate, st.x_adv, x, y, cfg);
            m_map = tr.grad_map;
            OracleResponse resp = oracle.query(tr.x_adv);
            ++st.queries;
            const double jp = attack_loss(resp.probs, y);
            if (jp < st.j) {
                st.x_adv = std::move(tr.x_adv);
                st.j = jp;
                st.p_t = resp.probs.data[y];
            }
            record(resp);
        } else {
            // Query step: probe one smoothed coordinate both ways.
            auto [delta, coord] = sample_perturbation(m_map, kernel, rng);
            for (int sign = 0; sign < 2 && st.queries < cfg.max_queries; ++sign) {
                const double alpha = sign == 0 ? cfg.epsilon : -cfg.epsilon;
                Tensor cand(x.shape);
                for (std::size_t p = 0; p < cand.numel(); ++p)
                    cand.data[p] = st.x_adv.data[p] + alpha * delta.data[p];
                cand = clip_l2(cand, x, cfg.zeta);
                OracleResponse resp = oracle.query(cand);
                ++st.queries;
                const double jp = attack_loss(resp.probs, y);
                const double pp = resp.probs.data[y];
                if (train_mode) {
                    buffer.add(QueryTuple{cand, st.x_adv, pp, st.p_t});
                    if (buffer.full()) {
                        hoga_step(surrogate, buffer, *hoga, y);
                        buffer.clear();
                    }
                }
                const bool accepted = jp < st.j;
                if (accepted) {
                    st.x_adv = std::move(cand);
                    st.j = jp;
                    st.p_t = pp;
                }
                record(resp);
                if (accepted) break;
            }
        }
    }

    result.success = st.j < 0.0;
    result.queries = st.queries;
    result.x_adv = std::move(st.x_adv);
    result.l2_dist = l2_distance(result.x_adv, x);
    return result;
}

AttackResult simba_plus(const Tensor& x, std::size_t y, Oracle& oracle, const Model& surrogate,
                        const AttackConfig& cfg) {
    Model s = surrogate;  // never mutated for this variant
    return run_attack(Variant::kSimbaPlus, x, y, oracle, s, cfg);
}

AttackResult simba_pp(const Tensor& x, std::size_t y, Oracle& oracle, const Model& surrogate,
                      const AttackConfig& cfg) {
    Model s = surrogate;
    return run_attack(Variant::kSimbaPP, x, y, oracle, s, cfg);
}

AttackResult leba_attack(const Tensor& x, std::size_t y, Oracle& oracle, Model& surrogate,
                         const AttackConfig& cfg, HogaState& hoga, bool train_mode) {
    return run_attack(train_mode ? Variant::kLebaTrain : Variant::kLebaTest, x, y, oracle, surrogate,
                      cfg, &hoga);
}

}  // namespace leba
