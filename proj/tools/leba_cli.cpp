#include <CLI11.hpp>

#include <csignal>
#include <filesystem>
#include <iostream>

#include "leba/harness.hpp"
#include "leba/wire.hpp"

namespace {

leba::OracleServer* g_server = nullptr;

void handle_signal(int) {
    if (g_server) g_server->stop();
}

leba::ModelSpec spec_from_flags(const std::string& arch, const std::string& hidden,
                                const std::string& channels, std::size_t kernel, std::uint64_t seed,
                                std::size_t classes, std::size_t H, std::size_t W) {
    leba::ModelSpec spec;
    spec.classes = classes;
    spec.input_shape = {1, H, W};
    spec.seed = seed;
    spec.kernel = kernel;
    if (arch == "mlp") {
        spec.arch = leba::Arch::kMlp;
        std::stringstream ss(hidden);
        std::string tok;
        spec.hidden.clear();
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) spec.hidden.push_back(std::stoul(tok));
    } else if (arch == "tinycnn") {
        spec.arch = leba::Arch::kTinyCnn;
        std::stringstream ss(channels);
        std::string tok;
        spec.channels.clear();
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) spec.channels.push_back(std::stoul(tok));
    } else {
        throw leba::ContractError("unknown arch: " + arch);
    }
    return spec;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale score-only black-box attack lab"};
    app.require_subcommand(1);

    // ---- make-data ----
    auto* make_data = app.add_subcommand("make-data", "Generate the synthetic IDX dataset");
    std::string md_out = "data";
    std::size_t md_classes = 10, md_train = 2000, md_test = 1000, md_sites = 3;
    double md_noise = 0.06, md_jitter = 1.2;
    std::uint64_t md_seed = 0;
    make_data->add_option("--out", md_out, "Output directory");
    make_data->add_option("--classes", md_classes);
    make_data->add_option("--train", md_train, "Training sample count");
    make_data->add_option("--test", md_test, "Test sample count");
    make_data->add_option("--sites", md_sites, "Bump sites per class");
    make_data->add_option("--noise", md_noise);
    make_data->add_option("--jitter", md_jitter, "Per-sample site displacement (px)");
    make_data->add_option("--seed", md_seed);

    // ---- train-models ----
    auto* train_cmd = app.add_subcommand("train-models", "Train a classifier and save its weights");
    std::string tm_images = "data/train-images.idx", tm_labels = "data/train-labels.idx";
    std::string tm_out = "out/model.weights";
    std::string tm_arch = "tinycnn", tm_hidden = "64", tm_channels = "4,8";
    std::size_t tm_kernel = 3, tm_classes = 10, tm_H = 28, tm_W = 28, tm_batch = 32, tm_limit = 0;
    std::uint64_t tm_seed = 1;
    int tm_epochs = 10;
    double tm_lr = 0.05, tm_fgsm = 0.0;
    train_cmd->add_option("--images", tm_images);
    train_cmd->add_option("--labels", tm_labels);
    train_cmd->add_option("--out", tm_out, "Weight file path");
    train_cmd->add_option("--arch", tm_arch, "mlp or tinycnn");
    train_cmd->add_option("--hidden", tm_hidden, "mlp hidden sizes, comma separated");
    train_cmd->add_option("--channels", tm_channels, "tinycnn channels, comma separated");
    train_cmd->add_option("--kernel", tm_kernel);
    train_cmd->add_option("--classes", tm_classes);
    train_cmd->add_option("--height", tm_H);
    train_cmd->add_option("--width", tm_W);
    train_cmd->add_option("--seed", tm_seed);
    train_cmd->add_option("--epochs", tm_epochs);
    train_cmd->add_option("--lr", tm_lr);
    train_cmd->add_option("--batch", tm_batch);
    train_cmd->add_option("--fgsm-eps", tm_fgsm, "Adversarial training radius (0 = plain)");
    train_cmd->add_option("--limit", tm_limit, "Use only the first N samples (0 = all)");
    std::string tm_blur;
    train_cmd->add_option("--blur", tm_blur,
                          "Blur training images first, size:sigma (coarse-biased model)");

    // ---- attack ----
    auto* attack_cmd = app.add_subcommand("attack", "Run an attack campaign");
    std::string at_config;
    std::vector<std::string> at_set;
    attack_cmd->add_option("--config", at_config, "Key=value config file");
    attack_cmd->add_option("--set", at_set, "Override config keys, key=value")->take_all();

    // ---- serve-oracle ----
    auto* serve_cmd = app.add_subcommand("serve-oracle", "Serve a victim over the wire protocol");
    std::string so_weights, so_arch = "tinycnn", so_hidden, so_channels = "4,8", so_defense = "none";
    std::string so_host = "127.0.0.1";
    std::size_t so_kernel = 3, so_classes = 10, so_H = 28, so_W = 28;
    std::uint64_t so_seed = 1, so_budget = 10000;
    std::uint16_t so_port = 7788;
    serve_cmd->add_option("--weights", so_weights)->required();
    serve_cmd->add_option("--arch", so_arch);
    serve_cmd->add_option("--hidden", so_hidden);
    serve_cmd->add_option("--channels", so_channels);
    serve_cmd->add_option("--kernel", so_kernel);
    serve_cmd->add_option("--classes", so_classes);
    serve_cmd->add_option("--height", so_H);
    serve_cmd->add_option("--width", so_W);
    serve_cmd->add_option("--seed", so_seed, "Model spec seed (must match weights)");
    serve_cmd->add_option("--defense", so_defense, "none, quantize:<levels>, blur:<size>:<sigma>");
    serve_cmd->add_option("--budget", so_budget);
    serve_cmd->add_option("--host", so_host);
    serve_cmd->add_option("--port", so_port);

    // ---- report ----
    auto* report_cmd = app.add_subcommand("report", "Recompute metrics from a traces file");
    std::string rp_traces, rp_out;
    std::uint64_t rp_budget = 2000;
    report_cmd->add_option("--traces", rp_traces)->required();
    report_cmd->add_option("--budget", rp_budget);
    report_cmd->add_option("--out", rp_out, "Optional CSV output path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*make_data) {
            leba::SynthSpec spec;
            spec.classes = md_classes;
            spec.sites_per_class = md_sites;
            spec.noise = md_noise;
            spec.jitter = md_jitter;
            spec.seed = md_seed;
            std::filesystem::create_directories(md_out);
            leba::LabeledDataset train = leba::synth_dataset(spec, md_train, 0x545241494eULL);
            leba::LabeledDataset strain = leba::synth_dataset(spec, md_train, 0x53555252ULL);
            leba::LabeledDataset test = leba::synth_dataset(spec, md_test, 0x54455354ULL);
            leba::write_idx_images(train, md_out + "/train-images.idx");
            leba::write_idx_labels(train, md_out + "/train-labels.idx");
            // disjoint draw from the same class templates, for surrogates
            leba::write_idx_images(strain, md_out + "/surrogate-train-images.idx");
            leba::write_idx_labels(strain, md_out + "/surrogate-train-labels.idx");
            leba::write_idx_images(test, md_out + "/test-images.idx");
            leba::write_idx_labels(test, md_out + "/test-labels.idx");
            std::cout << "wrote " << train.size() << " train (x2 splits) / " << test.size()
                      << " test samples to " << md_out << "\n";
        } else if (*train_cmd) {
            leba::ModelSpec spec = spec_from_flags(tm_arch, tm_hidden, tm_channels, tm_kernel, tm_seed,
                                                   tm_classes, tm_H, tm_W);
            leba::LabeledDataset data = leba::load_dataset(tm_images, tm_labels, tm_classes);
            if (tm_limit > 0 && tm_limit < data.size()) {
                data.images.resize(tm_limit);
                data.labels.resize(tm_limit);
            }
            if (!tm_blur.empty()) {
                const auto colon = tm_blur.find(':');
                if (colon == std::string::npos)
                    throw leba::ContractError("--blur expects size:sigma");
                auto blur = leba::DefenseSpec::blur(std::stoul(tm_blur.substr(0, colon)),
                                                    std::stod(tm_blur.substr(colon + 1)));
                for (auto& img : data.images) img = leba::apply_defense(blur, img);
            }
            leba::Model model = leba::init_model(spec);
            const double acc = leba::train(model, data, tm_epochs, tm_lr, tm_batch, tm_fgsm);
            std::filesystem::create_directories(std::filesystem::path(tm_out).parent_path());
            leba::save_weights(model, tm_out);
            std::cout << "train accuracy " << acc;
            if (tm_fgsm > 0.0)
                std::cout << ", fgsm(" << tm_fgsm
                          << ") robust accuracy " << leba::fgsm_robust_accuracy(model, data, tm_fgsm);
            std::cout << ", weights -> " << tm_out << "\n";
        } else if (*attack_cmd) {
            std::map<std::string, std::string> kv;
            if (!at_config.empty()) kv = leba::read_config_file(at_config);
            for (const std::string& s : at_set) {
                const auto eq = s.find('=');
                if (eq == std::string::npos)
                    throw leba::ContractError("--set expects key=value, got " + s);
                kv[s.substr(0, eq)] = s.substr(eq + 1);
            }
            leba::ExperimentConfig cfg = leba::parse_experiment_config(kv);
            leba::ExperimentOutput out = leba::run_experiment(cfg);
            leba::ReportPaths paths = leba::emit_report(out, cfg);
            for (const leba::MetricsRow& r : out.rows)
                std::cout << r.variant << " seed=" << r.seed << " n=" << r.n_images
                          << " asr=" << r.asr << " avg_q=" << r.avg_q
                          << " avg_q'=" << r.avg_q_prime << "\n";
            std::cout << "metrics -> " << paths.metrics_csv << "\ntraces  -> " << paths.traces_jsonl
                      << "\n";
        } else if (*serve_cmd) {
            leba::ModelSpec spec = spec_from_flags(so_arch, so_hidden, so_channels, so_kernel, so_seed,
                                                   so_classes, so_H, so_W);
            leba::Model victim = leba::load_weights(spec, so_weights);
            leba::DefenseSpec defense = leba::DefenseSpec::none();
            if (so_defense != "none") {
                if (so_defense.rfind("quantize:", 0) == 0)
                    defense = leba::DefenseSpec::quantize(std::stoul(so_defense.substr(9)));
                else if (so_defense.rfind("blur:", 0) == 0) {
                    const auto rest = so_defense.substr(5);
                    const auto colon = rest.find(':');
                    defense = leba::DefenseSpec::blur(std::stoul(rest.substr(0, colon)),
                                                      std::stod(rest.substr(colon + 1)));
                } else {
                    throw leba::ContractError("unknown defense " + so_defense);
                }
            }
            leba::LocalOracle oracle(std::move(victim), defense, so_budget);
            leba::OracleServer server(oracle, so_host, so_port);
            g_server = &server;
            std::signal(SIGINT, handle_signal);
            std::signal(SIGTERM, handle_signal);
            std::cout << "serving on " << so_host << ":" << server.port() << " (budget " << so_budget
                      << ")\n";
            server.run();
        } else if (*report_cmd) {
            auto rows = leba::metrics_from_traces(rp_traces, rp_budget);
            std::ostringstream csv;
            csv << "variant,seed,n,asr,avg_q,avg_q_prime\n";
            for (const auto& r : rows) {
                char buf[256];
                std::snprintf(buf, sizeof(buf), "%s,%llu,%zu,%.6g,%.6g,%.6g\n", r.variant.c_str(),
                              static_cast<unsigned long long>(r.seed), r.n_images, r.asr, r.avg_q,
                              r.avg_q_prime);
                csv << buf;
            }
            if (rp_out.empty()) {
                std::cout << csv.str();
            } else {
                std::ofstream f(rp_out, std::ios::trunc);
                f << csv.str();
                std::cout << "metrics -> " << rp_out << "\n";
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
