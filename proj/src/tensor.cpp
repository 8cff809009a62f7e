#include "leba/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace leba {

std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::require_finite(const std::string& who) const {
    if (!all_finite()) throw ContractError(who + ": non-finite value in tensor");
}

namespace {

void require_conforming(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b) && !a.is_scalar() && !b.is_scalar())
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape) + " do not conform");
}

template <class F>
Tensor binary_ew(const char* op, const Tensor& a, const Tensor& b, F f) {
    require_conforming(op, a, b);
    if (a.same_shape(b)) {
        Tensor out(a.shape);
        for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = f(a.data[i], b.data[i]);
        return out;
    }
    if (a.is_scalar()) {
        Tensor out(b.shape);
        const double av = a.data[0];
        for (std::size_t i = 0; i < b.numel(); ++i) out.data[i] = f(av, b.data[i]);
        return out;
    }
    Tensor out(a.shape);
    const double bv = b.data[0];
    for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = f(a.data[i], bv);
    return out;
}

}  // namespace

Tensor k_add(const Tensor& a, const Tensor& b) { return binary_ew("add", a, b, [](double x, double y) { return x + y; }); }
Tensor k_sub(const Tensor& a, const Tensor& b) { return binary_ew("sub", a, b, [](double x, double y) { return x - y; }); }
Tensor k_mul(const Tensor& a, const Tensor& b) { return binary_ew("mul", a, b, [](double x, double y) { return x * y; }); }
Tensor k_div(const Tensor& a, const Tensor& b) { return binary_ew("div", a, b, [](double x, double y) { return x / y; }); }

Tensor k_neg(const Tensor& a) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = -a.data[i];
    return out;
}

Tensor k_add_scalar(const Tensor& a, double c) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] + c;
    return out;
}

Tensor k_mul_scalar(const Tensor& a, double c) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] * c;
    return out;
}

Tensor k_relu(const Tensor& a) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] > 0.0 ? a.data[i] : 0.0;
    return out;
}

Tensor k_relu_mask(const Tensor& a) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] > 0.0 ? 1.0 : 0.0;
    return out;
}

Tensor k_log(const Tensor& a) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = std::log(a.data[i]);
    return out;
}

Tensor k_exp(const Tensor& a) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = std::exp(a.data[i]);
    return out;
}

Tensor k_log_softmax(const Tensor& a) {
    if (a.shape.size() != 1)
        throw ShapeError("log_softmax: expected 1-D logits, got " + shape_str(a.shape));
    Tensor out(a.shape);
    double mx = a.data[0];
    for (double v : a.data) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : a.data) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] - lse;
    return out;
}

Tensor k_sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data) s += v;
    return Tensor::scalar(s);
}

Tensor k_mean_all(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean_all: empty tensor");
    double s = 0.0;
    for (double v : a.data) s += v;
    return Tensor::scalar(s / static_cast<double>(a.numel()));
}

Tensor k_gather1d(const Tensor& a, std::size_t index) {
    if (a.shape.size() != 1)
        throw ShapeError("gather1d: expected 1-D tensor, got " + shape_str(a.shape));
    if (index >= a.numel())
        throw ContractError("gather1d: index " + std::to_string(index) + " out of range " +
                            std::to_string(a.numel()));
    return Tensor::scalar(a.data[index]);
}

Tensor k_matmul(const Tensor& a, const Tensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
        throw ShapeError("matmul: shapes " + shape_str(a.shape) + " vs " + shape_str(b.shape) +
                         " do not conform");
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = &a.data[i * k];
        double* orow = &out.data[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = &b.data[p * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

Tensor k_transpose(const Tensor& a) {
    if (a.shape.size() != 2) throw ShapeError("transpose: expected 2-D tensor, got " + shape_str(a.shape));
    const std::size_t m = a.shape[0], n = a.shape[1];
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = a.data[i * n + j];
    return out;
}

Tensor k_reshape(const Tensor& a, std::vector<std::size_t> shape) {
    if (Tensor::count(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape) + " as " + shape_str(shape));
    return Tensor(std::move(shape), a.data);
}

namespace {

void require_conv_args(const char* op, const std::vector<std::size_t>& x,
                       const std::vector<std::size_t>& w) {
    if (x.size() != 3 || w.size() != 4 || w[2] != w[3] || w[2] % 2 == 0 || x[0] != w[1])
        throw ShapeError(std::string(op) + ": shapes " + shape_str(x) + " vs " + shape_str(w) +
                         " do not conform (need {C,H,W} and {O,C,k,k}, odd k)");
}

}  // namespace

Tensor k_conv2d(const Tensor& x, const Tensor& w) {
    require_conv_args("conv2d", x.shape, w.shape);
    const std::size_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
    const std::size_t O = w.shape[0], k = w.shape[2];
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(k) / 2;
    Tensor y({O, H, W});
    for (std::size_t o = 0; o < O; ++o)
        for (std::size_t c = 0; c < C; ++c) {
            const double* xc = &x.data[c * H * W];
            const double* wk = &w.data[(o * C + c) * k * k];
            double* yo = &y.data[o * H * W];
            for (std::size_t u = 0; u < k; ++u)
                for (std::size_t v = 0; v < k; ++v) {
                    const double wv = wk[u * k + v];
                    if (wv == 0.0) continue;
                    const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(u) - p;
                    const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(v) - p;
                    const std::size_t i0 = di < 0 ? static_cast<std::size_t>(-di) : 0;
                    const std::size_t i1 = di > 0 ? H - static_cast<std::size_t>(di) : H;
                    const std::size_t j0 = dj < 0 ? static_cast<std::size_t>(-dj) : 0;
                    const std::size_t j1 = dj > 0 ? W - static_cast<std::size_t>(dj) : W;
                    for (std::size_t i = i0; i < i1; ++i) {
                        const double* xrow = &xc[(i + di) * W + dj];
                        double* yrow = &yo[i * W];
                        for (std::size_t j = j0; j < j1; ++j) yrow[j] += wv * xrow[j];
                    }
                }
        }
    return y;
}

Tensor k_conv2d_dinput(const Tensor& g, const Tensor& w, std::size_t C, std::size_t H, std::size_t W) {
    if (g.shape.size() != 3 || w.shape.size() != 4 || g.shape[0] != w.shape[0] || w.shape[1] != C ||
        g.shape[1] != H || g.shape[2] != W || w.shape[2] != w.shape[3] || w.shape[2] % 2 == 0)
        throw ShapeError("conv2d_dinput: shapes " + shape_str(g.shape) + " vs " + shape_str(w.shape) +
                         " do not conform");
    const std::size_t O = g.shape[0], k = w.shape[2];
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(k) / 2;
    Tensor dx({C, H, W});
    // dx[c,a,b] = sum_{o,u,v} g[o, a-u+p, b-v+p] * w[o,c,u,v]
    for (std::size_t o = 0; o < O; ++o)
        for (std::size_t c = 0; c < C; ++c) {
            const double* go = &g.data[o * H * W];
            const double* wk = &w.data[(o * C + c) * k * k];
            double* dc = &dx.data[c * H * W];
            for (std::size_t u = 0; u < k; ++u)
                for (std::size_t v = 0; v < k; ++v) {
                    const double wv = wk[u * k + v];
                    if (wv == 0.0) continue;
                    const std::ptrdiff_t di = p - static_cast<std::ptrdiff_t>(u);
                    const std::ptrdiff_t dj = p - static_cast<std::ptrdiff_t>(v);
                    const std::size_t a0 = di < 0 ? static_cast<std::size_t>(-di) : 0;
                    const std::size_t a1 = di > 0 ? H - static_cast<std::size_t>(di) : H;
                    const std::size_t b0 = dj < 0 ? static_cast<std::size_t>(-dj) : 0;
                    const std::size_t b1 = dj > 0 ? W - static_cast<std::size_t>(dj) : W;
                    for (std::size_t a = a0; a < a1; ++a) {
                        const double* grow = &go[(a + di) * W + dj];
                        double* drow = &dc[a * W];
                        for (std::size_t b = b0; b < b1; ++b) drow[b] += wv * grow[b];
                    }
                }
        }
    return dx;
}

Tensor k_conv2d_dweight(const Tensor& g, const Tensor& x, std::size_t k) {
    if (g.shape.size() != 3 || x.shape.size() != 3 || g.shape[1] != x.shape[1] ||
        g.shape[2] != x.shape[2] || k % 2 == 0)
        throw ShapeError("conv2d_dweight: shapes " + shape_str(g.shape) + " vs " + shape_str(x.shape) +
                         " do not conform");
    const std::size_t O = g.shape[0], C = x.shape[0], H = x.shape[1], W = x.shape[2];
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(k) / 2;
    Tensor dw({O, C, k, k});
    // dw[o,c,u,v] = sum_{i,j} g[o,i,j] * x[c, i+u-p, j+v-p]
    for (std::size_t o = 0; o < O; ++o)
        for (std::size_t c = 0; c < C; ++c) {
            const double* go = &g.data[o * H * W];
            const double* xc = &x.data[c * H * W];
            double* wk = &dw.data[(o * C + c) * k * k];
            for (std::size_t u = 0; u < k; ++u)
                for (std::size_t v = 0; v < k; ++v) {
                    const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(u) - p;
                    const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(v) - p;
                    const std::size_t i0 = di < 0 ? static_cast<std::size_t>(-di) : 0;
                    const std::size_t i1 = di > 0 ? H - static_cast<std::size_t>(di) : H;
                    const std::size_t j0 = dj < 0 ? static_cast<std::size_t>(-dj) : 0;
                    const std::size_t j1 = dj > 0 ? W - static_cast<std::size_t>(dj) : W;
                    double acc = 0.0;
                    for (std::size_t i = i0; i < i1; ++i) {
                        const double* grow = &go[i * W];
                        const double* xrow = &xc[(i + di) * W + dj];
                        for (std::size_t j = j0; j < j1; ++j) acc += grow[j] * xrow[j];
                    }
                    wk[u * k + v] = acc;
                }
        }
    return dw;
}

Tensor k_broadcast_hw(const Tensor& b, std::size_t H, std::size_t W) {
    if (b.shape.size() != 1) throw ShapeError("broadcast_hw: expected 1-D bias, got " + shape_str(b.shape));
    const std::size_t C = b.shape[0];
    Tensor out({C, H, W});
    for (std::size_t c = 0; c < C; ++c) {
        const double v = b.data[c];
        double* oc = &out.data[c * H * W];
        for (std::size_t i = 0; i < H * W; ++i) oc[i] = v;
    }
    return out;
}

Tensor k_sum_hw(const Tensor& a) {
    if (a.shape.size() != 3) throw ShapeError("sum_hw: expected {C,H,W}, got " + shape_str(a.shape));
    const std::size_t C = a.shape[0], HW = a.shape[1] * a.shape[2];
    Tensor out({C});
    for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        const double* ac = &a.data[c * HW];
        for (std::size_t i = 0; i < HW; ++i) s += ac[i];
        out.data[c] = s;
    }
    return out;
}

Tensor gaussian_kernel(std::size_t size, double sigma) {
    if (size % 2 == 0) throw ContractError("gaussian_kernel: size must be odd");
    if (!(sigma > 0.0)) throw ContractError("gaussian_kernel: sigma must be positive");
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(size) / 2;
    Tensor k({size, size});
    double sum = 0.0;
    for (std::ptrdiff_t i = -r; i <= r; ++i)
        for (std::ptrdiff_t j = -r; j <= r; ++j) {
            const double v = std::exp(-(static_cast<double>(i * i + j * j)) / (2.0 * sigma * sigma));
            k.data[(i + r) * static_cast<std::ptrdiff_t>(size) + (j + r)] = v;
            sum += v;
        }
    for (double& v : k.data) v /= sum;
    return k;
}

Tensor smooth(const Tensor& map, const Tensor& kernel) {
    if (kernel.shape.size() != 2 || kernel.shape[0] != kernel.shape[1] || kernel.shape[0] % 2 == 0)
        throw ShapeError("smooth: kernel must be square 2-D with odd size, got " + shape_str(kernel.shape));
    const bool has_channels = map.shape.size() == 3;
    if (!has_channels && map.shape.size() != 2)
        throw ShapeError("smooth: map must be HxW or CxHxW, got " + shape_str(map.shape));
    const std::size_t H = map.shape[has_channels ? 1 : 0];
    const std::size_t W = map.shape[has_channels ? 2 : 1];
    const std::size_t k = kernel.shape[0];
    if (k > H || k > W)
        throw ContractError("smooth: kernel " + shape_str(kernel.shape) + " larger than map " +
                            shape_str(map.shape));
    // Channel-wise cross-correlation via the conv kernel with a {1,1,k,k} weight.
    const std::size_t C = has_channels ? map.shape[0] : 1;
    Tensor w({1, 1, k, k}, kernel.data);
    Tensor out(map.shape);
    for (std::size_t c = 0; c < C; ++c) {
        Tensor plane({1, H, W});
        std::copy(map.data.begin() + c * H * W, map.data.begin() + (c + 1) * H * W, plane.data.begin());
        Tensor sm = k_conv2d(plane, w);
        std::copy(sm.data.begin(), sm.data.end(), out.data.begin() + c * H * W);
    }
    return out;
}

double l2_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

double l2_distance(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("l2_distance: shapes " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = a.data[i] - b.data[i];
        s += d * d;
    }
    return std::sqrt(s);
}

}  // namespace leba
