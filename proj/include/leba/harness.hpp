#ifndef LEBA_HARNESS_HPP
#define LEBA_HARNESS_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "leba/attack.hpp"
#include "leba/nets.hpp"
#include "leba/oracle.hpp"

namespace leba {

// ---- dataset ingestion ----

// Parses an IDX image/label pair (big-endian headers, u8 payloads) or this
// repo's raw binary dataset format, detected by magic. Pixels are scaled to
// [0,1]; labels are validated against `classes`.
LabeledDataset load_dataset(const std::string& images_path, const std::string& labels_path,
                            std::size_t classes);

// Keeps only images the (possibly defended) victim classifies correctly,
// skipping the first `offset` retained images and truncating to `limit`
// (0 = no limit). Prints a warning to stderr when the result is empty.
// Does not touch any query meter.
LabeledDataset attack_set(const LabeledDataset& data, const Model& victim, const DefenseSpec& defense,
                          std::size_t limit, std::size_t offset = 0);

// IDX writers (big-endian headers, u8 pixels/labels).
void write_idx_images(const LabeledDataset& data, const std::string& path);
void write_idx_labels(const LabeledDataset& data, const std::string& path);

// Raw tensor container ("LEBATEN1" magic) used for saved adversarial images.
void save_tensor(const Tensor& t, const std::string& path);
Tensor load_tensor(const std::string& path);

// ---- synthetic desk data ----

// Procedural class patterns: each class owns a few Gaussian bump sites inside
// the central region; samples add per-site intensity jitter and pixel noise.
// Border pixels carry no class signal, which is what makes saliency-guided
// coordinate sampling pay off.
struct SynthSpec {
    std::size_t classes = 10;
    std::size_t height = 28, width = 28;
    std::size_t sites_per_class = 3;
    double noise = 0.06;
    double jitter = 1.2;       // per-sample site displacement (pixels, stdev)
    double texture_amp = 0.12; // fixed per-class fine-grained pattern strength
    std::uint64_t seed = 0;
};

LabeledDataset synth_dataset(const SynthSpec& spec, std::size_t count, std::uint64_t split_tag);

// ---- experiment configuration ----

struct ExperimentConfig {
    std::string images_path;
    std::string labels_path;
    std::size_t image_limit = 200;
    std::size_t image_offset = 0;

    ModelSpec victim_spec;
    std::string victim_weights;
    ModelSpec surrogate_spec;
    std::string surrogate_weights;

    Variant variant = Variant::kSimbaPlus;
    AttackConfig attack;
    DefenseSpec defense;

    std::size_t repeats = 1;
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    std::size_t threads = 0;  // 0 = hardware concurrency
    bool write_traces = true;
    bool save_adv_images = false;
    bool save_surrogate = true;

    // Surrogate-update ablations.
    bool hoga_backward_loss = true;
    bool hoga_forward_loss = true;
    bool hoga_adaptive_gamma = true;

    void validate() const;
};

// Flat key=value config file; '#' starts a comment. Unknown keys are errors.
ExperimentConfig parse_experiment_config(const std::map<std::string, std::string>& kv);
std::map<std::string, std::string> read_config_file(const std::string& path);

// ---- metrics ----

struct MetricsRow {
    std::string variant;
    std::uint64_t seed = 0;
    std::size_t n_images = 0;
    double asr = 0.0;
    double avg_q = 0.0;        // over successes only; NaN when none
    double avg_q_prime = 0.0;  // failures counted at the budget

    bool operator==(const MetricsRow&) const = default;
};

MetricsRow compute_metrics(const std::string& variant, std::uint64_t seed,
                           const std::vector<AttackResult>& results, std::uint64_t budget);

// AVG.Q from AVG.Q' and ASR: (AVG.Q' - (1 - ASR) * budget) / ASR.
// asr must be in (0, 1].
double avgq_convert(double avg_q_prime, double asr, std::uint64_t budget);

// ---- experiment driver ----

struct PerImageRecord {
    std::size_t image_index = 0;
    std::uint64_t seed = 0;
    std::size_t label = 0;
    AttackResult result;
};

struct ExperimentOutput {
    std::vector<MetricsRow> rows;       // one per repeat, then one pooled row
    std::vector<std::vector<PerImageRecord>> per_repeat;
    std::vector<std::string> surrogate_paths;  // saved per repeat for leba_train
};

// Runs the configured variant over the attack set, `repeats` times with seeds
// seed, seed+1, ... Frozen-surrogate variants fan images out over a worker
// pool; leba_train runs images in order and persists the learned surrogate.
ExperimentOutput run_experiment(const ExperimentConfig& cfg);

// ---- reports ----

struct ReportPaths {
    std::string metrics_csv;
    std::string traces_jsonl;
};

// Writes metrics.csv (header variant,seed,n,asr,avg_q,avg_q_prime) and the
// per-image JSON-lines log; optionally dumps adversarial images as raw
// tensors. Output is byte-deterministic for a given input.
ReportPaths emit_report(const ExperimentOutput& out, const ExperimentConfig& cfg);

// Recomputes metrics rows from a traces JSONL file (the `report` subcommand).
std::vector<MetricsRow> metrics_from_traces(const std::string& jsonl_path, std::uint64_t budget);

std::string default_output_dir();  // $LEBA_OUT_DIR or "out"

}  // namespace leba

#endif  // LEBA_HARNESS_HPP
