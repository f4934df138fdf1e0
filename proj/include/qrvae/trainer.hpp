#pragma once

// Adam training loop, per-epoch log and checkpoint files.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qrvae/models.hpp"

namespace qrvae {

struct TrainConfig {
    std::size_t epochs = 500;
    std::size_t batch = 64;
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps_opt = 1e-8;
    std::uint64_t seed = 1;
    bool wall_clock = false;  // seconds column stays 0 unless set, so logs are reproducible
    std::string dataset = "moons";

    static TrainConfig from(const KeyValues& kv);
    void write_to(KeyValues& kv) const;
    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double sigma_stat = 0.0;  // mean sigma (VAE) or mean Q_high - Q_low (QR-VAE) on the validation set
    double seconds = 0.0;

    bool operator==(const EpochRecord&) const = default;
};

struct TrainLog {
    std::vector<EpochRecord> rows;

    void write_csv(const std::filesystem::path& path) const;
    static TrainLog read_csv(const std::filesystem::path& path);
    bool operator==(const TrainLog&) const = default;
};

/// Loss went NaN/Inf; carries where.
struct TrainingDiverged : NumericError {
    TrainingDiverged(std::size_t epoch, std::size_t batch, const std::string& what);
    std::size_t epoch, batch;
};

struct EvalSummary {
    double loss = 0.0;
    double sigma_stat = 0.0;
};

/// Loss and sigma statistic over `x` in eval mode, with eps drawn from `eps_seed`.
EvalSummary evaluate(Autoencoder& model, const Tensor& x, std::uint64_t eps_seed, std::size_t chunk = 256);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains in place. `val` may be empty (val_loss then repeats train_loss's data).
TrainLog train(Autoencoder& model, const Tensor& train_x, const std::optional<Tensor>& val_x,
               const TrainConfig& config, const EpochCallback& on_epoch = {});

// ---- checkpoints -------------------------------------------------------------------------

struct CheckpointError : InputError {
    using InputError::InputError;
};

struct Checkpoint {
    Autoencoder model;
    KeyValues manifest;  // mirrored configuration plus config_hash
};

/// Hash of the configuration mirrored into the manifest: `extra` (e.g. the
/// experiment file's data keys) overlaid by the model and training keys.
std::string config_hash(const ModelConfig& model, const TrainConfig& train, const KeyValues& extra = {});

void save_checkpoint(Autoencoder& model, const TrainConfig& train, const std::filesystem::path& path,
                     const KeyValues& extra = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Throws CheckpointError unless the checkpoint's quantile levels are (alpha_low, alpha_high).
void require_alphas(const ModelConfig& config, double alpha_low, double alpha_high);

}  // namespace qrvae
