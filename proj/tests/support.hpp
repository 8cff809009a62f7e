#ifndef LEBA_TESTS_SUPPORT_HPP
#define LEBA_TESTS_SUPPORT_HPP

#include <functional>
#include <string>

#include "leba/harness.hpp"
#include "leba/nets.hpp"
#include "leba/tensor.hpp"

namespace leba::testsup {

// Central finite differences of a scalar function, h per element.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

// Max |a-b| normalized by the largest magnitude in either tensor. This is the
// "max relative error" used by every gradient check: elementwise ratios blow
// up on entries that are legitimately ~0.
double max_rel_err(const Tensor& a, const Tensor& b);

// Independent O(n^2 k^2) cross-correlation with zero padding, same shape.
// Written index-by-index, no shared code with the library kernels.
Tensor brute_force_conv(const Tensor& map_hw, const Tensor& kernel);

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0);

// Small trained desk models, trained once per process and cached.
struct DeskFixture {
    LabeledDataset train_set;
    LabeledDataset test_set;
    Model victim;     // tinycnn
    Model surrogate;  // tinycnn, different width and seed
    Model mlp_surrogate;
};
const DeskFixture& desk_fixture();

// Scratch directory for file-format tests.
std::string temp_dir();

}  // namespace leba::testsup

#endif
