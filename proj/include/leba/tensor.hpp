#ifndef LEBA_TENSOR_HPP
#define LEBA_TENSOR_HPP

#include <cstddef>
#include <string>
#include <vector>

#include "leba/common.hpp"

namespace leba {

// Dense row-major n-dimensional array of 64-bit floats. The single numeric
// carrier for images, perturbations, gradient maps and probability vectors.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)), data(count(shape), 0.0) {}
    Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != count(shape))
            throw ShapeError("Tensor: data length " + std::to_string(data.size()) +
                             " does not match shape product " + std::to_string(count(shape)));
    }

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t e : s) n *= e;
        return n;
    }

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<std::size_t> s, double v) {
        Tensor t(std::move(s));
        for (double& x : t.data) x = v;
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    std::size_t numel() const { return data.size(); }
    bool is_scalar() const { return numel() == 1; }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    // True when every entry is finite.
    bool all_finite() const;
    // Throws ContractError naming `who` if any entry is NaN/Inf.
    void require_finite(const std::string& who) const;
};

std::string shape_str(const std::vector<std::size_t>& s);

// --- elementwise / linear-algebra kernels (plain value math, no graph) ---
// Binary elementwise kernels allow a scalar (numel 1) on either side.

Tensor k_add(const Tensor& a, const Tensor& b);
Tensor k_sub(const Tensor& a, const Tensor& b);
Tensor k_mul(const Tensor& a, const Tensor& b);
Tensor k_div(const Tensor& a, const Tensor& b);
Tensor k_neg(const Tensor& a);
Tensor k_add_scalar(const Tensor& a, double c);
Tensor k_mul_scalar(const Tensor& a, double c);
Tensor k_relu(const Tensor& a);
Tensor k_relu_mask(const Tensor& a);  // 1 where a > 0, else 0
Tensor k_log(const Tensor& a);
Tensor k_exp(const Tensor& a);
Tensor k_log_softmax(const Tensor& a);  // 1-D over its only axis
Tensor k_sum_all(const Tensor& a);      // -> scalar {1}
Tensor k_mean_all(const Tensor& a);     // -> scalar {1}
Tensor k_gather1d(const Tensor& a, std::size_t index);  // -> scalar {1}
Tensor k_matmul(const Tensor& a, const Tensor& b);      // {m,k}x{k,n} -> {m,n}
Tensor k_transpose(const Tensor& a);                    // 2-D
Tensor k_reshape(const Tensor& a, std::vector<std::size_t> shape);

// 2-D cross-correlation family, stride 1, odd kernel, "same" zero padding.
// The three ops are mutual gradients of one another, which is what makes the
// graph closed under repeated differentiation.
//   conv2d:        x{C,H,W}, w{O,C,k,k} -> y{O,H,W}
//   conv2d_dinput: g{O,H,W}, w{O,C,k,k} -> dx{C,H,W}
//   conv2d_dweight:g{O,H,W}, x{C,H,W}   -> dw{O,C,k,k}
Tensor k_conv2d(const Tensor& x, const Tensor& w);
Tensor k_conv2d_dinput(const Tensor& g, const Tensor& w, std::size_t C, std::size_t H, std::size_t W);
Tensor k_conv2d_dweight(const Tensor& g, const Tensor& x, std::size_t k);

// Per-channel bias broadcast and its reduction.
Tensor k_broadcast_hw(const Tensor& b, std::size_t H, std::size_t W);  // {C} -> {C,H,W}
Tensor k_sum_hw(const Tensor& a);                                      // {C,H,W} -> {C}

// --- smoothing ---

// size x size Gaussian, values proportional to exp(-(i^2+j^2)/(2 sigma^2))
// around the center, normalized to sum 1. size must be odd, sigma > 0.
Tensor gaussian_kernel(std::size_t size, double sigma);

// Channel-wise 2-D cross-correlation of `map` (HxW or CxHxW) with `kernel`
// (2-D, odd, no larger than the map), zero padding, same shape out.
Tensor smooth(const Tensor& map, const Tensor& kernel);

// l2 distance between two same-shaped tensors.
double l2_distance(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);

}  // namespace leba

#endif  // LEBA_TENSOR_HPP
