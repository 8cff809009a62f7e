#ifndef LEBA_NETS_HPP
#define LEBA_NETS_HPP

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "leba/autograd.hpp"
#include "leba/tensor.hpp"

namespace leba {

enum class Arch : std::uint8_t { kMlp = 0, kTinyCnn = 1 };

// Architecture + shape + seed. Two specs that compare equal produce
// bit-identical models.
struct ModelSpec {
    Arch arch = Arch::kMlp;
    std::vector<std::size_t> hidden;    // mlp hidden layer widths (may be empty)
    std::vector<std::size_t> channels;  // tinycnn conv channel counts
    std::size_t kernel = 3;             // tinycnn kernel size (odd)
    std::array<std::size_t, 3> input_shape{1, 28, 28};  // C,H,W
    std::size_t classes = 10;
    std::uint64_t seed = 0;

    std::size_t input_size() const { return input_shape[0] * input_shape[1] * input_shape[2]; }

    // Compares only fields the architecture actually uses.
    bool operator==(const ModelSpec& o) const {
        if (arch != o.arch || input_shape != o.input_shape || classes != o.classes || seed != o.seed)
            return false;
        if (arch == Arch::kMlp) return hidden == o.hidden;
        return channels == o.channels && kernel == o.kernel;
    }
};

// A classifier: spec plus named parameter tensors in a stable order.
struct Model {
    ModelSpec spec;
    std::vector<std::pair<std::string, Tensor>> params;

    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;
    std::size_t param_count() const;
};

struct LabeledDataset {
    std::vector<Tensor> images;  // each {C,H,W}, pixels in [0,1]
    std::vector<std::size_t> labels;
    std::array<std::size_t, 3> image_shape{1, 28, 28};
    std::size_t classes = 10;

    std::size_t size() const { return images.size(); }
};

// Deterministic initialization: weights uniform in +-1/sqrt(fan_in) drawn
// from the spec seed, biases zero.
Model init_model(const ModelSpec& spec);

// Raw (graph-free) forward pass to logits. Uses the same kernels in the same
// order as the graph builder, so both paths agree bitwise.
Tensor logits_raw(const Model& m, const Tensor& x);

// Softmax probabilities over logits; positive, sum to 1 within 1e-12.
Tensor predict(const Model& m, const Tensor& x);

// Graph forward: params must come from param_variables (or equivalent nodes
// matching the spec's parameter order); x is the input node.
NodeRef model_logits(const ModelSpec& spec, const std::vector<NodeRef>& params, const NodeRef& x);

// One variable node per parameter, in parameter order, sharing values.
std::vector<NodeRef> param_variables(const Model& m);

// Copy node values back into the model (after an optimizer step).
void assign_params(Model& m, const std::vector<NodeRef>& params);

// Minibatch SGD on cross-entropy. Deterministic given the model's seed.
// fgsm_eps > 0 replaces the second half of every batch with FGSM examples
// generated from the current model at that radius (adversarial training);
// fgsm_eps == 0 is plain training, bit for bit.
// Returns final training-set accuracy.
double train(Model& m, const LabeledDataset& data, int epochs, double lr, std::size_t batch,
             double fgsm_eps = 0.0);

// d log p_target / dx at x, same shape as x.
Tensor grad_input(const Model& m, const Tensor& x, std::size_t target);

// Fraction of dataset classified correctly (argmax of logits).
double accuracy(const Model& m, const LabeledDataset& data);

// Weight persistence; round trip is bit-exact. load_weights verifies the file
// against the requested spec and never returns a partial model.
void save_weights(const Model& m, const std::string& path);
Model load_weights(const ModelSpec& spec, const std::string& path);

}  // namespace leba

#endif  // LEBA_NETS_HPP
