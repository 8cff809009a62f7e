#include "leba/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace leba {

namespace {

std::uint32_t read_u32be(std::ifstream& f, std::uint64_t& off, const char* what) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (f.gcount() != 4) throw ParseError(std::string("dataset: truncated ") + what, off);
    off += 4;
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
constexpr char kRawDatasetMagic[8] = {'L', 'E', 'B', 'A', 'D', 'S', '0', '1'};
constexpr char kRawTensorMagic[8] = {'L', 'E', 'B', 'A', 'T', 'E', 'N', '1'};

std::vector<Tensor> load_idx_images(const std::string& path, std::array<std::size_t, 3>& shape) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("dataset: cannot open " + path, 0);
    std::uint64_t off = 0;
    const std::uint32_t magic = read_u32be(f, off, "image magic");
    if (magic != kIdxImagesMagic)
        throw ParseError("dataset: bad IDX image magic in " + path, 0);
    const std::uint32_t n = read_u32be(f, off, "image count");
    const std::uint32_t rows = read_u32be(f, off, "row count");
    const std::uint32_t cols = read_u32be(f, off, "column count");
    if (rows == 0 || cols == 0 || rows > 4096 || cols > 4096)
        throw ParseError("dataset: implausible image dimensions", 8);
    shape = {1, rows, cols};
    std::vector<Tensor> images;
    images.reserve(n);
    std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
    for (std::uint32_t i = 0; i < n; ++i) {
        f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (f.gcount() != static_cast<std::streamsize>(buf.size()))
            throw ParseError("dataset: truncated image payload", off);
        off += buf.size();
        Tensor t({1, rows, cols});
        for (std::size_t j = 0; j < buf.size(); ++j) t.data[j] = buf[j] / 255.0;
        images.push_back(std::move(t));
    }
    return images;
}

std::vector<std::size_t> load_idx_labels(const std::string& path, std::size_t classes) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("dataset: cannot open " + path, 0);
    std::uint64_t off = 0;
    const std::uint32_t magic = read_u32be(f, off, "label magic");
    if (magic != kIdxLabelsMagic)
        throw ParseError("dataset: bad IDX label magic in " + path, 0);
    const std::uint32_t n = read_u32be(f, off, "label count");
    std::vector<std::size_t> labels(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        unsigned char b;
        f.read(reinterpret_cast<char*>(&b), 1);
        if (f.gcount() != 1) throw ParseError("dataset: truncated labels", off);
        off += 1;
        if (b >= classes)
            throw ContractError("dataset: label " + std::to_string(int(b)) + " out of range at index " +
                                std::to_string(i));
        labels[i] = b;
    }
    return labels;
}

bool has_magic(const std::string& path, const char* magic, std::size_t len) {
    std::ifstream f(path, std::ios::binary);
    if (!f) return false;
    std::vector<char> b(len);
    f.read(b.data(), static_cast<std::streamsize>(len));
    return f.gcount() == static_cast<std::streamsize>(len) && std::memcmp(b.data(), magic, len) == 0;
}

LabeledDataset load_raw_dataset(const std::string& path, std::size_t classes) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("dataset: cannot open " + path, 0);
    char magic[8];
    f.read(magic, 8);
    if (f.gcount() != 8 || std::memcmp(magic, kRawDatasetMagic, 8) != 0)
        throw ParseError("dataset: bad raw dataset magic in " + path, 0);
    std::uint64_t off = 8;
    std::uint32_t dims[4];
    f.read(reinterpret_cast<char*>(dims), 16);
    if (f.gcount() != 16) throw ParseError("dataset: truncated raw header", off);
    off += 16;
    const std::size_t n = dims[0], C = dims[1], H = dims[2], W = dims[3];
    if (C * H * W == 0 || C * H * W > (1u << 24)) throw ParseError("dataset: implausible raw shape", 8);
    LabeledDataset d;
    d.image_shape = {C, H, W};
    d.classes = classes;
    d.images.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Tensor t({C, H, W});
        f.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (f.gcount() != static_cast<std::streamsize>(t.numel() * sizeof(double)))
            throw ParseError("dataset: truncated raw images", off);
        off += t.numel() * sizeof(double);
        for (double v : t.data)
            if (!(v >= 0.0 && v <= 1.0)) throw ContractError("dataset: raw pixel outside [0,1]");
        d.images.push_back(std::move(t));
    }
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        unsigned char b;
        f.read(reinterpret_cast<char*>(&b), 1);
        if (f.gcount() != 1) throw ParseError("dataset: truncated raw labels", off);
        off += 1;
        if (b >= classes)
            throw ContractError("dataset: label " + std::to_string(int(b)) + " out of range at index " +
                                std::to_string(i));
        d.labels[i] = b;
    }
    return d;
}

}  // namespace

LabeledDataset load_dataset(const std::string& images_path, const std::string& labels_path,
                            std::size_t classes) {
    if (has_magic(images_path, kRawDatasetMagic, 8)) return load_raw_dataset(images_path, classes);
    LabeledDataset d;
    d.classes = classes;
    d.images = load_idx_images(images_path, d.image_shape);
    d.labels = load_idx_labels(labels_path, classes);
    if (d.images.size() != d.labels.size())
        throw ContractError("dataset: image/label count mismatch: " + std::to_string(d.images.size()) +
                            " vs " + std::to_string(d.labels.size()));
    if (d.images.empty()) throw ContractError("dataset: no images in " + images_path);
    return d;
}

LabeledDataset attack_set(const LabeledDataset& data, const Model& victim, const DefenseSpec& defense,
                          std::size_t limit, std::size_t offset) {
    LabeledDataset out;
    out.image_shape = data.image_shape;
    out.classes = data.classes;
    std::size_t retained = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (limit > 0 && out.size() == limit) break;
        Tensor logits = logits_raw(victim, apply_defense(defense, data.images[i]));
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.numel(); ++j)
            if (logits.data[j] > logits.data[best]) best = j;
        if (best == data.labels[i]) {
            if (retained++ < offset) continue;
            out.images.push_back(data.images[i]);
            out.labels.push_back(data.labels[i]);
        }
    }
    if (out.images.empty())
        std::cerr << "warning: attack set is empty (victim misclassifies every candidate)\n";
    return out;
}

void write_idx_images(const LabeledDataset& data, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ContractError("write_idx_images: cannot open " + path);
    auto put_be = [&](std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
        f.write(reinterpret_cast<char*>(b), 4);
    };
    put_be(kIdxImagesMagic);
    put_be(static_cast<std::uint32_t>(data.size()));
    put_be(static_cast<std::uint32_t>(data.image_shape[1]));
    put_be(static_cast<std::uint32_t>(data.image_shape[2]));
    for (const Tensor& t : data.images)
        for (double v : t.data) {
            const unsigned char b = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            f.write(reinterpret_cast<const char*>(&b), 1);
        }
}

void write_idx_labels(const LabeledDataset& data, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ContractError("write_idx_labels: cannot open " + path);
    auto put_be = [&](std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
        f.write(reinterpret_cast<char*>(b), 4);
    };
    put_be(kIdxLabelsMagic);
    put_be(static_cast<std::uint32_t>(data.size()));
    for (std::size_t l : data.labels) {
        const unsigned char b = static_cast<unsigned char>(l);
        f.write(reinterpret_cast<const char*>(&b), 1);
    }
}

void save_tensor(const Tensor& t, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ContractError("save_tensor: cannot open " + path);
    f.write(kRawTensorMagic, 8);
    const std::uint32_t nd = static_cast<std::uint32_t>(t.shape.size());
    f.write(reinterpret_cast<const char*>(&nd), 4);
    for (std::size_t d : t.shape) {
        const std::uint32_t v = static_cast<std::uint32_t>(d);
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}

Tensor load_tensor(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("load_tensor: cannot open " + path, 0);
    char magic[8];
    f.read(magic, 8);
    if (f.gcount() != 8 || std::memcmp(magic, kRawTensorMagic, 8) != 0)
        throw ParseError("load_tensor: bad magic in " + path, 0);
    std::uint32_t nd;
    f.read(reinterpret_cast<char*>(&nd), 4);
    if (f.gcount() != 4 || nd > 8) throw ParseError("load_tensor: bad rank", 8);
    std::vector<std::size_t> shape(nd);
    for (auto& d : shape) {
        std::uint32_t v;
        f.read(reinterpret_cast<char*>(&v), 4);
        if (f.gcount() != 4) throw ParseError("load_tensor: truncated dims", 12);
        d = v;
    }
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (f.gcount() != static_cast<std::streamsize>(t.numel() * sizeof(double)))
        throw ParseError("load_tensor: truncated data", 12 + 4ull * nd);
    return t;
}

LabeledDataset synth_dataset(const SynthSpec& spec, std::size_t count, std::uint64_t split_tag) {
    if (spec.classes < 2) throw ContractError("synth_dataset: need at least 2 classes");
    const std::size_t H = spec.height, W = spec.width;
    // Class templates are drawn from the base seed only, so train/test splits
    // share them; the sample stream differs by split tag.
    Rng template_rng(derive_seed(spec.seed, 0x54454d50ULL));
    struct Site {
        double ci, cj, amp, sg;
    };
    std::vector<std::vector<Site>> sites(spec.classes);
    const double margin = 6.0;
    for (std::size_t k = 0; k < spec.classes; ++k)
        for (std::size_t s = 0; s < spec.sites_per_class; ++s)
            sites[k].push_back(Site{template_rng.uniform(margin, H - 1 - margin),
                                    template_rng.uniform(margin, W - 1 - margin),
                                    template_rng.uniform(0.55, 0.95), template_rng.uniform(1.0, 1.8)});
    // Per-class fine pattern over the central region: coarse bumps carry the
    // shared saliency, the texture carries model-specific fine structure.
    const std::size_t tmargin = 6;
    std::vector<Tensor> texture(spec.classes, Tensor({H, W}));
    for (std::size_t k = 0; k < spec.classes; ++k)
        for (std::size_t r = tmargin; r + tmargin < H; ++r)
            for (std::size_t c = tmargin; c + tmargin < W; ++c)
                texture[k].data[r * W + c] =
                    spec.texture_amp * (template_rng.next_double() < 0.5 ? -1.0 : 1.0);

    Rng rng(derive_seed(spec.seed, split_tag));
    LabeledDataset d;
    d.image_shape = {1, H, W};
    d.classes = spec.classes;
    d.images.reserve(count);
    d.labels.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t k = rng.next_index(spec.classes);
        Tensor img({1, H, W});
        for (std::size_t p = 0; p < H * W; ++p)
            img.data[p] = 0.35 + texture[k].data[p] + spec.noise * rng.normal();
        for (const Site& s : sites[k]) {
            const double gain = rng.uniform(0.8, 1.2);
            const double ci = s.ci + spec.jitter * rng.normal();
            const double cj = s.cj + spec.jitter * rng.normal();
            const double inv = 1.0 / (2.0 * s.sg * s.sg);
            for (std::size_t r = 0; r < H; ++r)
                for (std::size_t c = 0; c < W; ++c) {
                    const double dr = r - ci, dc = c - cj;
                    img.data[r * W + c] += s.amp * gain * std::exp(-(dr * dr + dc * dc) * inv);
                }
        }
        for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
        d.images.push_back(std::move(img));
        d.labels.push_back(k);
    }
    return d;
}

// ---- configuration ----

void ExperimentConfig::validate() const {
    if (repeats < 1) throw ContractError("ExperimentConfig: repeats must be >= 1");
    if (images_path.empty()) throw ContractError("ExperimentConfig: dataset path missing");
    attack.validate();
}

std::map<std::string, std::string> read_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ContractError("config: cannot open " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ContractError("config: line " + std::to_string(lineno) + " is not key = value");
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

namespace {

std::vector<std::size_t> parse_size_list(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(std::stoul(tok));
    return out;
}

ModelSpec parse_model_spec(const std::map<std::string, std::string>& kv, const std::string& prefix,
                           std::size_t classes, std::array<std::size_t, 3> input_shape) {
    ModelSpec spec;
    spec.classes = classes;
    spec.input_shape = input_shape;
    auto get = [&](const std::string& key) -> std::optional<std::string> {
        auto it = kv.find(prefix + key);
        if (it == kv.end()) return std::nullopt;
        return it->second;
    };
    if (auto a = get("arch")) {
        if (*a == "mlp")
            spec.arch = Arch::kMlp;
        else if (*a == "tinycnn")
            spec.arch = Arch::kTinyCnn;
        else
            throw ContractError("config: unknown arch " + *a);
    }
    if (auto h = get("hidden")) spec.hidden = parse_size_list(*h);
    if (auto c = get("channels")) spec.channels = parse_size_list(*c);
    if (auto k = get("kernel")) spec.kernel = std::stoul(*k);
    if (auto s = get("seed")) spec.seed = std::stoull(*s);
    return spec;
}

DefenseSpec parse_defense(const std::string& s) {
    if (s.empty() || s == "none") return DefenseSpec::none();
    if (s.rfind("quantize:", 0) == 0) return DefenseSpec::quantize(std::stoul(s.substr(9)));
    if (s.rfind("blur:", 0) == 0) {
        const auto rest = s.substr(5);
        const auto colon = rest.find(':');
        if (colon == std::string::npos) throw ContractError("config: blur needs size:sigma");
        return DefenseSpec::blur(std::stoul(rest.substr(0, colon)), std::stod(rest.substr(colon + 1)));
    }
    throw ContractError("config: unknown defense " + s);
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::map<std::string, std::string>& kv) {
    ExperimentConfig cfg;
    cfg.output_dir = default_output_dir();
    std::size_t classes = 10;
    std::array<std::size_t, 3> ishape{1, 28, 28};
    static const std::vector<std::string> known = {
        "dataset", "labels", "images", "image_offset", "classes", "input_channels", "input_height", "input_width",
        "victim_arch", "victim_hidden", "victim_channels", "victim_kernel", "victim_seed",
        "victim_weights", "surrogate_arch", "surrogate_hidden", "surrogate_channels",
        "surrogate_kernel", "surrogate_seed", "surrogate_weights", "variant", "epsilon", "zeta",
        "n_q", "n_t", "mu", "epsilon_t", "kernel_size", "kernel_sigma", "buffer_size", "lambda",
        "gamma0", "hoga_lr", "max_queries", "transfer_enabled", "defense", "repeats", "seed",
        "output", "threads", "write_traces", "save_adv_images", "save_surrogate",
        "hoga_backward_loss", "hoga_forward_loss", "hoga_adaptive_gamma"};
    for (const auto& [key, value] : kv)
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ContractError("config: unknown key " + key);
    auto get = [&](const std::string& key) -> std::optional<std::string> {
        auto it = kv.find(key);
        if (it == kv.end()) return std::nullopt;
        return it->second;
    };
    if (auto v = get("classes")) classes = std::stoul(*v);
    if (auto v = get("input_channels")) ishape[0] = std::stoul(*v);
    if (auto v = get("input_height")) ishape[1] = std::stoul(*v);
    if (auto v = get("input_width")) ishape[2] = std::stoul(*v);
    if (auto v = get("dataset")) cfg.images_path = *v;
    if (auto v = get("labels")) cfg.labels_path = *v;
    if (auto v = get("images")) cfg.image_limit = std::stoul(*v);
    if (auto v = get("image_offset")) cfg.image_offset = std::stoul(*v);
    cfg.victim_spec = parse_model_spec(kv, "victim_", classes, ishape);
    cfg.surrogate_spec = parse_model_spec(kv, "surrogate_", classes, ishape);
    if (auto v = get("victim_weights")) cfg.victim_weights = *v;
    if (auto v = get("surrogate_weights")) cfg.surrogate_weights = *v;
    if (auto v = get("variant")) cfg.variant = variant_from_name(*v);
    if (auto v = get("epsilon")) cfg.attack.epsilon = std::stod(*v);
    if (auto v = get("zeta")) cfg.attack.zeta = std::stod(*v);
    if (auto v = get("n_q")) cfg.attack.n_Q = std::stoul(*v);
    if (auto v = get("n_t")) cfg.attack.n_T = std::stoul(*v);
    if (auto v = get("mu")) cfg.attack.mu = std::stod(*v);
    if (auto v = get("epsilon_t")) cfg.attack.epsilon_T = std::stod(*v);
    if (auto v = get("kernel_size")) cfg.attack.kernel.size = std::stoul(*v);
    if (auto v = get("kernel_sigma")) cfg.attack.kernel.sigma = std::stod(*v);
    if (auto v = get("buffer_size")) cfg.attack.buffer_size = std::stoul(*v);
    if (auto v = get("lambda")) cfg.attack.lambda = std::stod(*v);
    if (auto v = get("gamma0")) cfg.attack.gamma0 = std::stod(*v);
    if (auto v = get("hoga_lr")) cfg.attack.hoga_lr = std::stod(*v);
    if (auto v = get("max_queries")) cfg.attack.max_queries = std::stoull(*v);
    if (auto v = get("transfer_enabled")) cfg.attack.transfer_enabled = *v == "1" || *v == "true";
    if (auto v = get("defense")) cfg.defense = parse_defense(*v);
    if (auto v = get("repeats")) cfg.repeats = std::stoul(*v);
    if (auto v = get("seed")) cfg.seed = std::stoull(*v);
    if (auto v = get("output")) cfg.output_dir = *v;
    if (auto v = get("threads")) cfg.threads = std::stoul(*v);
    if (auto v = get("write_traces")) cfg.write_traces = *v == "1" || *v == "true";
    if (auto v = get("save_adv_images")) cfg.save_adv_images = *v == "1" || *v == "true";
    if (auto v = get("save_surrogate")) cfg.save_surrogate = *v == "1" || *v == "true";
    if (auto v = get("hoga_backward_loss")) cfg.hoga_backward_loss = *v == "1" || *v == "true";
    if (auto v = get("hoga_forward_loss")) cfg.hoga_forward_loss = *v == "1" || *v == "true";
    if (auto v = get("hoga_adaptive_gamma")) cfg.hoga_adaptive_gamma = *v == "1" || *v == "true";
    // Default l2 budget follows the sqrt(0.001 * pixels) scaling rule.
    if (cfg.attack.zeta <= 0.0)
        cfg.attack.zeta = std::sqrt(0.001 * static_cast<double>(ishape[0] * ishape[1] * ishape[2]));
    return cfg;
}

// ---- metrics ----

MetricsRow compute_metrics(const std::string& variant, std::uint64_t seed,
                           const std::vector<AttackResult>& results, std::uint64_t budget) {
    MetricsRow row;
    row.variant = variant;
    row.seed = seed;
    row.n_images = results.size();
    if (results.empty()) {
        row.avg_q = std::nan("");
        row.avg_q_prime = std::nan("");
        return row;
    }
    std::size_t successes = 0;
    double q_success = 0.0, q_prime = 0.0;
    for (const AttackResult& r : results) {
        if (r.success) {
            ++successes;
            q_success += static_cast<double>(r.queries);
            q_prime += static_cast<double>(r.queries);
        } else {
            q_prime += static_cast<double>(budget);
        }
    }
    row.asr = static_cast<double>(successes) / static_cast<double>(results.size());
    row.avg_q = successes ? q_success / static_cast<double>(successes) : std::nan("");
    row.avg_q_prime = q_prime / static_cast<double>(results.size());
    return row;
}

double avgq_convert(double avg_q_prime, double asr, std::uint64_t budget) {
    if (!(asr > 0.0) || asr > 1.0)
        throw ContractError("avgq_convert: ASR must be in (0,1], got " + std::to_string(asr));
    return (avg_q_prime - (1.0 - asr) * static_cast<double>(budget)) / asr;
}

// ---- experiment driver ----

namespace {

Model load_model(const ModelSpec& spec, const std::string& weights) {
    if (weights.empty()) return init_model(spec);
    return load_weights(spec, weights);
}

}  // namespace

ExperimentOutput run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const Model victim = load_model(cfg.victim_spec, cfg.victim_weights);
    const Model surrogate0 = load_model(cfg.surrogate_spec, cfg.surrogate_weights);
    LabeledDataset raw = load_dataset(cfg.images_path, cfg.labels_path, cfg.victim_spec.classes);
    LabeledDataset set = attack_set(raw, victim, cfg.defense, cfg.image_limit, cfg.image_offset);
    if (set.size() == 0) throw ContractError("run_experiment: attack set is empty");

    const bool train_mode = cfg.variant == Variant::kLebaTrain;
    std::size_t threads = cfg.threads ? cfg.threads : std::thread::hardware_concurrency();
    if (threads == 0) threads = 1;

    ExperimentOutput out;
    out.per_repeat.resize(cfg.repeats);

    for (std::size_t rep = 0; rep < cfg.repeats; ++rep) {
        const std::uint64_t rep_seed = cfg.seed + rep;
        Model surrogate = surrogate0;
        HogaState hoga;
        hoga.gamma = cfg.attack.gamma0;
        hoga.lambda = cfg.attack.lambda;
        hoga.lr = cfg.attack.hoga_lr;
        hoga.use_backward_loss = cfg.hoga_backward_loss;
        hoga.use_forward_loss = cfg.hoga_forward_loss;
        hoga.adaptive_gamma = cfg.hoga_adaptive_gamma;

        auto& records = out.per_repeat[rep];
        records.resize(set.size());

        auto attack_one = [&](std::size_t i, Model& surr, HogaState* hs) {
            AttackConfig acfg = cfg.attack;
            acfg.seed = derive_seed(rep_seed, i);
            LocalOracle oracle(victim, cfg.defense, cfg.attack.max_queries);
            AttackResult res;
            try {
                res = run_attack(cfg.variant, set.images[i], set.labels[i], oracle, surr, acfg, hs);
            } catch (const std::exception& e) {
                throw ContractError("image " + std::to_string(i) + " (repeat " + std::to_string(rep) +
                                    "): " + e.what());
            }
            if (res.queries != oracle.queries_used())
                throw ContractError("image " + std::to_string(i) +
                                    ": query count disagrees with oracle meter");
            records[i] = PerImageRecord{i, acfg.seed, set.labels[i], std::move(res)};
        };

        if (train_mode || threads == 1 || set.size() == 1) {
            for (std::size_t i = 0; i < set.size(); ++i)
                attack_one(i, surrogate, train_mode ? &hoga : nullptr);
        } else {
            // Frozen surrogate: read-only share across the pool.
            std::vector<std::thread> pool;
            std::atomic<std::size_t> next{0};
            std::vector<std::exception_ptr> errors(threads);
            for (std::size_t t = 0; t < threads; ++t)
                pool.emplace_back([&, t] {
                    try {
                        for (;;) {
                            const std::size_t i = next.fetch_add(1);
                            if (i >= set.size()) break;
                            attack_one(i, surrogate, nullptr);
                        }
                    } catch (...) {
                        errors[t] = std::current_exception();
                    }
                });
            for (auto& th : pool) th.join();
            for (auto& e : errors)
                if (e) std::rethrow_exception(e);
        }

        std::vector<AttackResult> results;
        results.reserve(records.size());
        for (const auto& r : records) results.push_back(r.result);
        out.rows.push_back(
            compute_metrics(variant_name(cfg.variant), rep_seed, results, cfg.attack.max_queries));

        if (train_mode && cfg.save_surrogate) {
            std::filesystem::create_directories(cfg.output_dir);
            const std::string path =
                cfg.output_dir + "/surrogate_rep" + std::to_string(rep) + ".weights";
            save_weights(surrogate, path);
            out.surrogate_paths.push_back(path);
        }
    }

    // Pooled row over all repeats.
    std::vector<AttackResult> pooled;
    for (const auto& records : out.per_repeat)
        for (const auto& r : records) pooled.push_back(r.result);
    MetricsRow agg = compute_metrics(std::string(variant_name(cfg.variant)) + "/pooled", cfg.seed,
                                     pooled, cfg.attack.max_queries);
    out.rows.push_back(agg);
    return out;
}

// ---- reports ----

namespace {

std::string fmt_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace

ReportPaths emit_report(const ExperimentOutput& out, const ExperimentConfig& cfg) {
    std::filesystem::create_directories(cfg.output_dir);
    ReportPaths paths;
    paths.metrics_csv = cfg.output_dir + "/metrics.csv";
    paths.traces_jsonl = cfg.output_dir + "/results.jsonl";

    {
        std::ofstream csv(paths.metrics_csv, std::ios::trunc);
        if (!csv) throw ContractError("emit_report: cannot open " + paths.metrics_csv);
        csv << "variant,seed,n,asr,avg_q,avg_q_prime\n";
        for (const MetricsRow& r : out.rows)
            csv << r.variant << "," << r.seed << "," << r.n_images << "," << fmt_double(r.asr) << ","
                << fmt_double(r.avg_q) << "," << fmt_double(r.avg_q_prime) << "\n";
        if (!csv) throw ContractError("emit_report: write failed for " + paths.metrics_csv);
    }

    {
        std::ofstream jf(paths.traces_jsonl, std::ios::trunc);
        if (!jf) throw ContractError("emit_report: cannot open " + paths.traces_jsonl);
        for (std::size_t rep = 0; rep < out.per_repeat.size(); ++rep) {
            for (const PerImageRecord& rec : out.per_repeat[rep]) {
                nlohmann::json j;
                j["repeat"] = rep;
                j["image"] = rec.image_index;
                j["seed"] = rec.seed;
                j["label"] = rec.label;
                j["variant"] = variant_name(cfg.variant);
                j["success"] = rec.result.success;
                j["queries"] = rec.result.queries;
                j["l2"] = rec.result.l2_dist;
                if (cfg.write_traces) {
                    nlohmann::json tr = nlohmann::json::array();
                    for (const auto& [q, loss] : rec.result.trace) tr.push_back({q, loss});
                    j["trace"] = std::move(tr);
                }
                jf << j.dump() << "\n";
            }
        }
        if (!jf) throw ContractError("emit_report: write failed for " + paths.traces_jsonl);
    }

    if (cfg.save_adv_images) {
        for (std::size_t rep = 0; rep < out.per_repeat.size(); ++rep)
            for (const PerImageRecord& rec : out.per_repeat[rep])
                save_tensor(rec.result.x_adv, cfg.output_dir + "/adv_rep" + std::to_string(rep) +
                                                  "_img" + std::to_string(rec.image_index) + ".tensor");
    }
    return paths;
}

std::vector<MetricsRow> metrics_from_traces(const std::string& jsonl_path, std::uint64_t budget) {
    std::ifstream f(jsonl_path);
    if (!f) throw ContractError("metrics_from_traces: cannot open " + jsonl_path);
    struct Key {
        std::string variant;
        std::uint64_t repeat;
    };
    std::vector<std::pair<Key, std::vector<AttackResult>>> groups;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        AttackResult r;
        r.success = j.at("success").get<bool>();
        r.queries = j.at("queries").get<std::uint64_t>();
        const Key key{j.at("variant").get<std::string>(), j.at("repeat").get<std::uint64_t>()};
        auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) {
            return g.first.variant == key.variant && g.first.repeat == key.repeat;
        });
        if (it == groups.end()) {
            groups.push_back({key, {}});
            it = groups.end() - 1;
        }
        it->second.push_back(std::move(r));
    }
    std::vector<MetricsRow> rows;
    for (const auto& [key, results] : groups)
        rows.push_back(compute_metrics(key.variant, key.repeat, results, budget));
    return rows;
}

std::string default_output_dir() {
    const char* env = std::getenv("LEBA_OUT_DIR");
    return env && *env ? env : "out";
}

}  // namespace leba
