#pragma once

// End-to-end experiment steps shared by the command-line tool and the
// acceptance suite: dataset resolution, training runs, generative KL
// evaluation, pixelwise detection and report aggregation.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "qrvae/data.hpp"
#include "qrvae/stats.hpp"
#include "qrvae/trainer.hpp"

namespace qrvae::experiments {

namespace fs = std::filesystem;

// ---- datasets ------------------------------------------------------------------------------

/// Samples as a tensor [n, D] or [n, C, H, W]; masks [n, H, W] when ground truth exists.
struct Dataset {
    std::string id;
    Tensor x;
    std::vector<std::uint8_t> masks;
    std::vector<MoonSample> moons;  // generator truth for synthetic moons

    std::size_t count() const { return x.dim(0); }
    bool has_masks() const { return !masks.empty(); }
};

enum class Role { Train, Val, Test };

/// Resolves --data: "synthetic:moons", "synthetic:lesion", a moons CSV
/// (columns v1..v4), an IDX image file, or a directory holding images.idx and
/// optionally masks.idx. Synthetic sets draw from `config` (moons.*, lesion.*)
/// with a role-specific seed.
Dataset load_dataset(const std::string& spec, const KeyValues& config, Role role);

/// Synthetic sources give independent train/val draws; files are split by
/// data.val_fraction with data.split_seed.
std::pair<Dataset, Dataset> load_train_val(const std::string& spec, const KeyValues& config);

Dataset moons_dataset(std::size_t n, std::uint64_t seed, double noise_scale, double jitter);
Dataset lesion_dataset(std::size_t n, std::uint64_t seed, double rate, const LesionConfig& config);

// ---- artifacts --------------------------------------------------------------------------------

struct ExperimentManifest {
    std::string experiment;
    std::string config_path;
    std::string config_hash;
    fs::path output_dir;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> artifacts;  // relative path, sha256

    /// Checksums every regular file under output_dir except manifest.txt and writes manifest.txt.
    void write();
    static ExperimentManifest read(const fs::path& dir);
};

using Metrics = std::vector<std::pair<std::string, double>>;

/// "metric,value" CSV.
void write_metrics(const fs::path& path, const Metrics& metrics);
Metrics read_metrics(const fs::path& path);

/// Output directory, resolved against $QRVAE_OUTPUT_ROOT when that is set and `out` is relative.
fs::path resolve_output(const fs::path& out);

// ---- commands ------------------------------------------------------------------------------

void simulate(std::size_t n, std::uint64_t seed, double noise_scale, double jitter, const fs::path& out);

struct TrainRun {
    Autoencoder model;
    TrainLog log;
    std::string config_hash;
};

/// Builds the model from `config` (model.kind overridden by `kind`), trains it
/// and, when `out` is set, writes model.ckpt, train_log.csv and manifest.txt.
TrainRun run_train(ModelKind kind, const Dataset& train_set, const Dataset& val_set, KeyValues config,
                   const std::optional<fs::path>& out = std::nullopt, const std::string& config_path = "");

ModelConfig model_config_for(ModelKind kind, const KeyValues& config, const Dataset& data);

enum class ZSource { Prior, Encode };

/// n draws from the model's generative distribution: z from the prior or from
/// the posterior of randomly chosen rows of `input`, then x from the per-pixel
/// Gaussian (VAE heads, or the Gaussian matched to the quantile heads).
Tensor generate(Autoencoder& model, std::size_t n, ZSource source, const Tensor& input, std::uint64_t seed);

/// Per-pixel Gaussian implied by decoder outputs; quantile heads go through
/// quantiles_to_gaussian when the high level is the median, else the quantile pair.
stats::GaussianFit decoder_gaussian(const Autoencoder& model, const Reconstruction& r, bool paper_approx = false);

struct KlResult {
    double kl = 0.0;
    std::size_t duplicates = 0;
    Tensor generated;
};

KlResult run_eval_kl(Autoencoder& model, const Dataset& input, std::size_t n_samples, ZSource source,
                     std::uint64_t seed, const std::optional<fs::path>& out = std::nullopt,
                     const std::string& config_hash = "");

enum class DetectMode { Interval, Fdr };

struct DetectOptions {
    DetectMode mode = DetectMode::Fdr;
    double q = 0.05;
    LatentMode latent = LatentMode::Mean;
    std::uint64_t seed = 1;
    std::size_t median_window = 7;
    bool paper_approx = false;
    std::size_t max_maps = 8;  // images whose z/p maps are written as CSV
};

struct DetectResult {
    std::size_t images = 0;
    std::size_t elements = 0;        // pixel-channel values
    double flagged_fraction = 0.0;   // interval: values outside [Q_L, Q_H]; fdr: pixels rejected
    double detected_pixels = 0.0;
    double crossing_rate = 0.0;
    std::optional<double> auc, fdr, tpr;
    std::vector<std::uint8_t> masks;  // [n, H, W]
    std::vector<double> scores;       // median-filtered |z| per pixel, [n, H, W]
    Metrics metrics() const;
};

/// Checks the model's quantile levels against the mode: interval needs
/// (0.025, 0.975), fdr needs (0.15, 0.5) unless the model is a Gaussian VAE.
void check_detect_compatible(const ModelConfig& config, DetectMode mode);

DetectResult run_detect(Autoencoder& model, const Dataset& data, const DetectOptions& options,
                        const std::optional<fs::path>& out = std::nullopt, const std::string& config_hash = "");

/// Aggregates every metrics CSV and training log under `dir` into summary.csv.
/// Throws InputError naming the expected files when none is present.
fs::path run_report(const fs::path& dir);

}  // namespace qrvae::experiments
