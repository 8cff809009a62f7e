#ifndef LEBA_ORACLE_HPP
#define LEBA_ORACLE_HPP

#include <cstdint>
#include <memory>
#include <mutex>

#include "leba/nets.hpp"
#include "leba/tensor.hpp"

namespace leba {

// Score-only response: the full probability vector plus the 1-based index of
// the query that produced it. No gradients, no parameters cross this line.
struct OracleResponse {
    Tensor probs;
    std::uint64_t query_index = 0;
};

enum class DefenseKind : std::uint8_t { kNone = 0, kQuantize = 1, kBlur = 2 };

struct DefenseSpec {
    DefenseKind kind = DefenseKind::kNone;
    std::size_t levels = 256;       // quantize
    std::size_t kernel_size = 3;    // blur
    double sigma = 1.0;             // blur

    static DefenseSpec none() { return {}; }
    static DefenseSpec quantize(std::size_t levels);
    static DefenseSpec blur(std::size_t kernel_size, double sigma);
};

// The input transform a defended victim applies before classifying.
Tensor apply_defense(const DefenseSpec& spec, const Tensor& x);

struct QueryBudget {
    std::uint64_t max_queries = 0;
    std::uint64_t used = 0;
};

// The black-box boundary. query() meters exactly one unit per call and throws
// BudgetExceededError once the budget is spent.
class Oracle {
public:
    virtual ~Oracle() = default;
    virtual OracleResponse query(const Tensor& x) = 0;
    virtual std::uint64_t queries_used() const = 0;
    virtual std::uint64_t max_queries() const = 0;
};

class LocalOracle : public Oracle {
public:
    LocalOracle(Model victim, DefenseSpec defense, std::uint64_t max_queries);

    OracleResponse query(const Tensor& x) override;
    std::uint64_t queries_used() const override;
    std::uint64_t max_queries() const override { return budget_.max_queries; }
    std::size_t num_classes() const { return victim_.spec.classes; }

private:
    Model victim_;
    DefenseSpec defense_;
    QueryBudget budget_;
    mutable std::mutex mutex_;
};

// Convenience constructor mirroring the defended-victim workflow.
std::unique_ptr<LocalOracle> wrap_defense(Model victim, const DefenseSpec& spec,
                                          std::uint64_t max_queries);

struct AdversarialTrainResult {
    Model model;
    double clean_accuracy = 0.0;
    double robust_accuracy = 0.0;
};

// FGSM adversarial training: half of every batch is replaced with FGSM
// examples at fgsm_eps crafted against the current parameters. fgsm_eps == 0
// reduces to plain training bit for bit.
AdversarialTrainResult adversarial_train(const ModelSpec& spec, const LabeledDataset& data,
                                         int epochs, double lr, std::size_t batch, double fgsm_eps);

// Accuracy under a white-box FGSM attack at radius eps against `m` itself.
double fgsm_robust_accuracy(const Model& m, const LabeledDataset& data, double eps);

}  // namespace leba

#endif  // LEBA_ORACLE_HPP
