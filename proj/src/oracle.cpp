#include "leba/oracle.hpp"

#include <algorithm>
#include <cmath>

namespace leba {

DefenseSpec DefenseSpec::quantize(std::size_t levels) {
    if (levels < 2) throw ContractError("DefenseSpec::quantize: levels must be >= 2");
    DefenseSpec s;
    s.kind = DefenseKind::kQuantize;
    s.levels = levels;
    return s;
}

DefenseSpec DefenseSpec::blur(std::size_t kernel_size, double sigma) {
    DefenseSpec s;
    s.kind = DefenseKind::kBlur;
    s.kernel_size = kernel_size;
    s.sigma = sigma;
    return s;
}

Tensor apply_defense(const DefenseSpec& spec, const Tensor& x) {
    switch (spec.kind) {
        case DefenseKind::kNone:
            return x;
        case DefenseKind::kQuantize: {
            Tensor out(x.shape);
            const double L = static_cast<double>(spec.levels - 1);
            for (std::size_t i = 0; i < x.numel(); ++i)
                out.data[i] = std::round(x.data[i] * L) / L;
            return out;
        }
        case DefenseKind::kBlur: {
            if (spec.kernel_size == 1) return x;
            return smooth(x, gaussian_kernel(spec.kernel_size, spec.sigma));
        }
    }
    throw ContractError("apply_defense: unknown defense kind");
}

LocalOracle::LocalOracle(Model victim, DefenseSpec defense, std::uint64_t max_queries)
    : victim_(std::move(victim)), defense_(defense) {
    if (max_queries == 0) throw ContractError("LocalOracle: max_queries must be >= 1");
    budget_.max_queries = max_queries;
}

OracleResponse LocalOracle::query(const Tensor& x) {
    x.require_finite("oracle query input");
    std::lock_guard<std::mutex> lock(mutex_);
    if (budget_.used >= budget_.max_queries)
        throw BudgetExceededError("oracle: query budget of " + std::to_string(budget_.max_queries) +
                                  " exhausted");
    Tensor probs = predict(victim_, apply_defense(defense_, x));
    ++budget_.used;
    return OracleResponse{std::move(probs), budget_.used};
}

std::uint64_t LocalOracle::queries_used() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return budget_.used;
}

std::unique_ptr<LocalOracle> wrap_defense(Model victim, const DefenseSpec& spec,
                                          std::uint64_t max_queries) {
    return std::make_unique<LocalOracle>(std::move(victim), spec, max_queries);
}

double fgsm_robust_accuracy(const Model& m, const LabeledDataset& data, double eps) {
    if (data.size() == 0) throw ContractError("fgsm_robust_accuracy: empty dataset");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        Tensor g = grad_input(m, data.images[i], data.labels[i]);
        Tensor adv = data.images[i];
        for (std::size_t j = 0; j < adv.numel(); ++j) {
            const double s = g.data[j] > 0.0 ? -1.0 : (g.data[j] < 0.0 ? 1.0 : 0.0);
            adv.data[j] = std::clamp(adv.data[j] + eps * s, 0.0, 1.0);
        }
        Tensor logits = logits_raw(m, adv);
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.numel(); ++j)
            if (logits.data[j] > logits.data[best]) best = j;
        if (best == data.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

AdversarialTrainResult adversarial_train(const ModelSpec& spec, const LabeledDataset& data,
                                         int epochs, double lr, std::size_t batch, double fgsm_eps) {
    if (fgsm_eps < 0.0) throw ContractError("adversarial_train: fgsm_eps must be >= 0");
    AdversarialTrainResult out;
    out.model = init_model(spec);
    train(out.model, data, epochs, lr, batch, fgsm_eps);
    out.clean_accuracy = accuracy(out.model, data);
    out.robust_accuracy = fgsm_robust_accuracy(out.model, data, fgsm_eps);
    return out;
}

}  // namespace leba
