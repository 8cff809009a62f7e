#include "support.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <mutex>

namespace leba::testsup {

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    Tensor g(x.shape);
    Tensor probe = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = probe.data[i];
        probe.data[i] = orig + h;
        const double fp = f(probe);
        probe.data[i] = orig - h;
        const double fm = f(probe);
        probe.data[i] = orig;
        g.data[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

double max_rel_err(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("max_rel_err: shape mismatch");
    double scale = 1e-12, worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        scale = std::max({scale, std::abs(a.data[i]), std::abs(b.data[i])});
    for (std::size_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
    return worst / scale;
}

Tensor brute_force_conv(const Tensor& map_hw, const Tensor& kernel) {
    const std::size_t H = map_hw.shape[0], W = map_hw.shape[1];
    const std::size_t k = kernel.shape[0];
    const long r = static_cast<long>(k) / 2;
    Tensor out({H, W});
    for (long i = 0; i < static_cast<long>(H); ++i)
        for (long j = 0; j < static_cast<long>(W); ++j) {
            double acc = 0.0;
            for (long u = -r; u <= r; ++u)
                for (long v = -r; v <= r; ++v) {
                    const long ii = i + u, jj = j + v;
                    if (ii < 0 || jj < 0 || ii >= static_cast<long>(H) || jj >= static_cast<long>(W))
                        continue;
                    acc += map_hw.data[ii * W + jj] * kernel.data[(u + r) * k + (v + r)];
                }
            out.data[i * W + j] = acc;
        }
    return out;
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

const DeskFixture& desk_fixture() {
    static DeskFixture fx;
    static std::once_flag once;
    std::call_once(once, [] {
        SynthSpec spec;
        spec.seed = 11;
        fx.train_set = synth_dataset(spec, 600, 1);
        fx.test_set = synth_dataset(spec, 300, 2);

        ModelSpec victim_spec;
        victim_spec.arch = Arch::kTinyCnn;
        victim_spec.channels = {4, 8};
        victim_spec.kernel = 3;
        victim_spec.seed = 21;
        fx.victim = init_model(victim_spec);
        train(fx.victim, fx.train_set, 4, 0.05, 32);

        ModelSpec surrogate_spec;
        surrogate_spec.arch = Arch::kTinyCnn;
        surrogate_spec.channels = {3, 6};
        surrogate_spec.kernel = 3;
        surrogate_spec.seed = 22;
        fx.surrogate = init_model(surrogate_spec);
        train(fx.surrogate, fx.train_set, 4, 0.05, 32);

        ModelSpec mlp_spec;
        mlp_spec.arch = Arch::kMlp;
        mlp_spec.hidden = {32};
        mlp_spec.seed = 23;
        fx.mlp_surrogate = init_model(mlp_spec);
        train(fx.mlp_surrogate, fx.train_set, 4, 0.05, 32);
    });
    return fx;
}

std::string temp_dir() {
    static std::string dir = [] {
        auto base = std::filesystem::temp_directory_path() / "leba_tests";
        std::filesystem::create_directories(base);
        return base.string();
    }();
    return dir;
}

}  // namespace leba::testsup
