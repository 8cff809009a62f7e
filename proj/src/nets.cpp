#include "leba/nets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

namespace leba {

Tensor& Model::param(const std::string& name) {
    for (auto& [n, t] : params)
        if (n == name) return t;
    throw ContractError("Model::param: no parameter named " + name);
}

const Tensor& Model::param(const std::string& name) const {
    for (const auto& [n, t] : params)
        if (n == name) return t;
    throw ContractError("Model::param: no parameter named " + name);
}

std::size_t Model::param_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

namespace {

void validate_spec(const ModelSpec& spec) {
    if (spec.classes < 2) throw ContractError("ModelSpec: classes must be >= 2");
    if (spec.input_size() == 0) throw ContractError("ModelSpec: input shape must be nonempty");
    if (spec.arch == Arch::kTinyCnn) {
        if (spec.channels.empty()) throw ContractError("ModelSpec: tinycnn needs channel sizes");
        if (spec.kernel % 2 == 0) throw ContractError("ModelSpec: tinycnn kernel must be odd");
    } else if (spec.arch != Arch::kMlp) {
        throw ContractError("ModelSpec: unknown architecture tag");
    }
}

Tensor uniform_init(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.uniform(-s, s);
    return t;
}

}  // namespace

Model init_model(const ModelSpec& spec) {
    validate_spec(spec);
    Model m;
    m.spec = spec;
    Rng rng(spec.seed);
    if (spec.arch == Arch::kMlp) {
        std::size_t in = spec.input_size();
        for (std::size_t l = 0; l < spec.hidden.size(); ++l) {
            const std::size_t out = spec.hidden[l];
            m.params.emplace_back("fc" + std::to_string(l) + ".w", uniform_init({in, out}, in, rng));
            m.params.emplace_back("fc" + std::to_string(l) + ".b", Tensor::zeros({out}));
            in = out;
        }
        m.params.emplace_back("out.w", uniform_init({in, spec.classes}, in, rng));
        m.params.emplace_back("out.b", Tensor::zeros({spec.classes}));
    } else {
        std::size_t cin = spec.input_shape[0];
        const std::size_t k = spec.kernel;
        for (std::size_t l = 0; l < spec.channels.size(); ++l) {
            const std::size_t cout = spec.channels[l];
            m.params.emplace_back("conv" + std::to_string(l) + ".w",
                                  uniform_init({cout, cin, k, k}, cin * k * k, rng));
            m.params.emplace_back("conv" + std::to_string(l) + ".b", Tensor::zeros({cout}));
            cin = cout;
        }
        const std::size_t flat = cin * spec.input_shape[1] * spec.input_shape[2];
        m.params.emplace_back("out.w", uniform_init({flat, spec.classes}, flat, rng));
        m.params.emplace_back("out.b", Tensor::zeros({spec.classes}));
    }
    return m;
}

Tensor logits_raw(const Model& m, const Tensor& x) {
    const ModelSpec& spec = m.spec;
    if (x.shape != std::vector<std::size_t>{spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]})
        throw ShapeError("logits_raw: input shape " + shape_str(x.shape) + " does not match model input " +
                         shape_str({spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]}));
    std::size_t pi = 0;
    Tensor h = x;
    if (spec.arch == Arch::kMlp) {
        h = k_reshape(h, {1, spec.input_size()});
        for (std::size_t l = 0; l < spec.hidden.size(); ++l) {
            h = k_matmul(h, m.params[pi++].second);
            h = k_add(k_reshape(h, {h.numel()}), m.params[pi++].second);
            h = k_relu(h);
            h = k_reshape(h, {1, h.numel()});
        }
        h = k_matmul(h, m.params[pi++].second);
        h = k_add(k_reshape(h, {h.numel()}), m.params[pi++].second);
        return h;
    }
    const std::size_t H = spec.input_shape[1], W = spec.input_shape[2];
    for (std::size_t l = 0; l < spec.channels.size(); ++l) {
        h = k_conv2d(h, m.params[pi++].second);
        h = k_add(h, k_broadcast_hw(m.params[pi++].second, H, W));
        h = k_relu(h);
    }
    h = k_reshape(h, {1, h.numel()});
    h = k_matmul(h, m.params[pi++].second);
    h = k_add(k_reshape(h, {h.numel()}), m.params[pi++].second);
    return h;
}

Tensor predict(const Model& m, const Tensor& x) {
    Tensor logits = logits_raw(m, x);
    Tensor ls = k_log_softmax(logits);
    Tensor p = k_exp(ls);
    p.require_finite("predict");
    return p;
}

NodeRef model_logits(const ModelSpec& spec, const std::vector<NodeRef>& params, const NodeRef& x) {
    std::size_t pi = 0;
    NodeRef h = x;
    if (spec.arch == Arch::kMlp) {
        h = reshape(h, {1, spec.input_size()});
        for (std::size_t l = 0; l < spec.hidden.size(); ++l) {
            h = matmul(h, params[pi++]);
            h = add(reshape(h, {h->value.numel()}), params[pi++]);
            h = relu(h);
            h = reshape(h, {1, h->value.numel()});
        }
        h = matmul(h, params[pi++]);
        h = add(reshape(h, {h->value.numel()}), params[pi++]);
        return h;
    }
    const std::size_t H = spec.input_shape[1], W = spec.input_shape[2];
    for (std::size_t l = 0; l < spec.channels.size(); ++l) {
        h = conv2d(h, params[pi++]);
        h = add(h, broadcast_hw(params[pi++], H, W));
        h = relu(h);
    }
    h = reshape(h, {1, h->value.numel()});
    h = matmul(h, params[pi++]);
    h = add(reshape(h, {h->value.numel()}), params[pi++]);
    return h;
}

std::vector<NodeRef> param_variables(const Model& m) {
    std::vector<NodeRef> out;
    out.reserve(m.params.size());
    for (const auto& [name, t] : m.params) out.push_back(variable(t));
    return out;
}

void assign_params(Model& m, const std::vector<NodeRef>& params) {
    if (params.size() != m.params.size())
        throw ContractError("assign_params: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->value.shape != m.params[i].second.shape)
            throw ShapeError("assign_params: shape mismatch for " + m.params[i].first);
        m.params[i].second = params[i]->value;
    }
}

namespace {

// Mean cross-entropy over a list of (image, label); params are graph nodes.
NodeRef batch_ce(const ModelSpec& spec, const std::vector<NodeRef>& params,
                 const std::vector<NodeRef>& xs, const std::vector<std::size_t>& ys) {
    NodeRef total;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        NodeRef nll = neg(gather1d(log_softmax(model_logits(spec, params, xs[i])), ys[i]));
        total = total ? add(total, nll) : nll;
    }
    return mul_scalar(total, 1.0 / static_cast<double>(xs.size()));
}

}  // namespace

double train(Model& m, const LabeledDataset& data, int epochs, double lr, std::size_t batch,
             double fgsm_eps) {
    if (data.size() == 0) throw ContractError("train: dataset is empty");
    if (!(lr >= 0.0)) throw ContractError("train: lr must be nonnegative");
    if (batch == 0) throw ContractError("train: batch must be positive");
    Rng rng(derive_seed(m.spec.seed, 0x545241494eULL));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    for (int e = 0; e < epochs; ++e) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.next_index(i)]);
        for (std::size_t start = 0; start < order.size(); start += batch) {
            const std::size_t end = std::min(start + batch, order.size());
            std::vector<NodeRef> xs;
            std::vector<std::size_t> ys;
            xs.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const std::size_t idx = order[i];
                Tensor img = data.images[idx];
                // Adversarial half: the back of each batch trains on FGSM
                // examples crafted against the current parameters.
                if (fgsm_eps > 0.0 && (i - start) >= (end - start + 1) / 2) {
                    Tensor g = grad_input(m, img, data.labels[idx]);
                    for (std::size_t j = 0; j < img.numel(); ++j) {
                        // ascend CE = descend log p_y
                        const double s = g.data[j] > 0.0 ? -1.0 : (g.data[j] < 0.0 ? 1.0 : 0.0);
                        img.data[j] = std::clamp(img.data[j] + fgsm_eps * s, 0.0, 1.0);
                    }
                }
                xs.push_back(constant(std::move(img)));
                ys.push_back(data.labels[idx]);
            }
            auto params = param_variables(m);
            NodeRef loss = batch_ce(m.spec, params, xs, ys);
            auto grads = backward(loss, params);
            for (std::size_t p = 0; p < params.size(); ++p) {
                Tensor& t = m.params[p].second;
                for (std::size_t j = 0; j < t.numel(); ++j) t.data[j] -= lr * grads[p].data[j];
            }
        }
    }
    for (const auto& [name, t] : m.params) t.require_finite("train: parameter " + name);
    return accuracy(m, data);
}

Tensor grad_input(const Model& m, const Tensor& x, std::size_t target) {
    if (target >= m.spec.classes)
        throw ContractError("grad_input: target " + std::to_string(target) + " out of range " +
                            std::to_string(m.spec.classes));
    NodeRef xn = variable(x);
    std::vector<NodeRef> params;
    params.reserve(m.params.size());
    for (const auto& [name, t] : m.params) params.push_back(constant(t));
    NodeRef logp = gather1d(log_softmax(model_logits(m.spec, params, xn)), target);
    return backward(logp, {xn})[0];
}

double accuracy(const Model& m, const LabeledDataset& data) {
    if (data.size() == 0) throw ContractError("accuracy: dataset is empty");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        Tensor logits = logits_raw(m, data.images[i]);
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.numel(); ++j)
            if (logits.data[j] > logits.data[best]) best = j;
        if (best == data.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---- weight files ----
// Layout (all little-endian):
//   magic "LEBANETW" (8)  version u8  arch u8  classes u32  C,H,W u32x3
//   seed u64  n_sizes u32  sizes u32xN  kernel u32  n_params u32
//   per param: name_len u32, name bytes, ndim u32, dims u32xndim, data f64xn

namespace {

constexpr char kMagic[8] = {'L', 'E', 'B', 'A', 'N', 'E', 'T', 'W'};

void put_u32(std::ofstream& f, std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ofstream& f, std::uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }

struct Reader {
    std::ifstream f;
    std::uint64_t off = 0;
    explicit Reader(const std::string& path) : f(path, std::ios::binary) {
        if (!f) throw ParseError("weights: cannot open " + path, 0);
    }
    void read(char* dst, std::size_t n, const char* what) {
        f.read(dst, static_cast<std::streamsize>(n));
        if (f.gcount() != static_cast<std::streamsize>(n))
            throw ParseError(std::string("weights: truncated ") + what, off);
        off += n;
    }
    std::uint8_t u8(const char* what) {
        std::uint8_t v;
        read(reinterpret_cast<char*>(&v), 1, what);
        return v;
    }
    std::uint32_t u32(const char* what) {
        std::uint32_t v;
        read(reinterpret_cast<char*>(&v), 4, what);
        return v;
    }
    std::uint64_t u64(const char* what) {
        std::uint64_t v;
        read(reinterpret_cast<char*>(&v), 8, what);
        return v;
    }
};

}  // namespace

void save_weights(const Model& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ContractError("save_weights: cannot open " + path + " for writing");
    f.write(kMagic, 8);
    const std::uint8_t version = 1;
    f.write(reinterpret_cast<const char*>(&version), 1);
    const std::uint8_t arch = static_cast<std::uint8_t>(m.spec.arch);
    f.write(reinterpret_cast<const char*>(&arch), 1);
    put_u32(f, static_cast<std::uint32_t>(m.spec.classes));
    for (std::size_t d : m.spec.input_shape) put_u32(f, static_cast<std::uint32_t>(d));
    put_u64(f, m.spec.seed);
    const auto& sizes = m.spec.arch == Arch::kMlp ? m.spec.hidden : m.spec.channels;
    put_u32(f, static_cast<std::uint32_t>(sizes.size()));
    for (std::size_t s : sizes) put_u32(f, static_cast<std::uint32_t>(s));
    put_u32(f, m.spec.arch == Arch::kTinyCnn ? static_cast<std::uint32_t>(m.spec.kernel) : 0u);
    put_u32(f, static_cast<std::uint32_t>(m.params.size()));
    for (const auto& [name, t] : m.params) {
        put_u32(f, static_cast<std::uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(f, static_cast<std::uint32_t>(t.shape.size()));
        for (std::size_t d : t.shape) put_u32(f, static_cast<std::uint32_t>(d));
        f.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!f) throw ContractError("save_weights: write failed for " + path);
}

Model load_weights(const ModelSpec& spec, const std::string& path) {
    validate_spec(spec);
    Reader r(path);
    char magic[8];
    r.read(magic, 8, "magic");
    for (std::size_t i = 0; i < 8; ++i)
        if (magic[i] != kMagic[i]) throw ParseError("weights: bad magic byte", i);
    if (r.u8("version") != 1) throw ParseError("weights: unsupported version", 8);
    const std::uint8_t arch = r.u8("arch");
    if (arch > 1) throw ParseError("weights: unknown architecture tag", 9);
    ModelSpec file_spec;
    file_spec.arch = static_cast<Arch>(arch);
    file_spec.classes = r.u32("classes");
    for (std::size_t i = 0; i < 3; ++i) file_spec.input_shape[i] = r.u32("input shape");
    file_spec.seed = r.u64("seed");
    const std::uint32_t n_sizes = r.u32("size count");
    if (n_sizes > 1u << 16) throw ParseError("weights: implausible layer count", r.off - 4);
    std::vector<std::size_t> sizes(n_sizes);
    for (auto& s : sizes) s = r.u32("layer size");
    const std::uint32_t kernel = r.u32("kernel");
    if (file_spec.arch == Arch::kMlp)
        file_spec.hidden = sizes;
    else {
        file_spec.channels = sizes;
        file_spec.kernel = kernel;
    }
    if (!(file_spec == spec))
        throw IncompatibleWeightsError("load_weights: file spec does not match requested spec for " +
                                       path);
    Model m = init_model(spec);
    const std::uint32_t n_params = r.u32("param count");
    if (n_params != m.params.size())
        throw IncompatibleWeightsError("load_weights: parameter count mismatch in " + path);
    for (std::size_t p = 0; p < n_params; ++p) {
        const std::uint32_t name_len = r.u32("name length");
        if (name_len > 4096) throw ParseError("weights: implausible name length", r.off - 4);
        std::string name(name_len, '\0');
        r.read(name.data(), name_len, "name");
        if (name != m.params[p].first)
            throw IncompatibleWeightsError("load_weights: parameter name mismatch: expected " +
                                           m.params[p].first + ", found " + name);
        const std::uint32_t ndim = r.u32("ndim");
        if (ndim > 8) throw ParseError("weights: implausible rank", r.off - 4);
        std::vector<std::size_t> dims(ndim);
        for (auto& d : dims) d = r.u32("dim");
        if (dims != m.params[p].second.shape)
            throw IncompatibleWeightsError("load_weights: shape mismatch for " + name);
        r.read(reinterpret_cast<char*>(m.params[p].second.data.data()),
               m.params[p].second.numel() * sizeof(double), "param data");
    }
    return m;
}

}  // namespace leba
