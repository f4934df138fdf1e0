// qrvae: command-line driver for the moons, fashion and lesion experiments.
//
// Exit codes: 0 success, 1 numeric failure (NaN loss), 2 usage or input error.

#include <CLI11.hpp>

#include <iostream>

#include "qrvae/experiments.hpp"

namespace ex = qrvae::experiments;
using qrvae::KeyValues;

namespace {

KeyValues load_config(const std::string& path) { return path.empty() ? KeyValues{} : KeyValues::load(path); }

// Synthetic datasets are regenerated from --config when given, else from the
// configuration mirrored into the checkpoint.
KeyValues data_config(const std::string& config_path, const qrvae::Checkpoint& ckpt) {
    return config_path.empty() ? ckpt.manifest : KeyValues::load(config_path);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gaussian and quantile-regression VAEs: training, sampling and anomaly detection"};
    app.require_subcommand(1);

    std::size_t n = 500;
    std::uint64_t seed = 1;
    double noise_scale = 1.0, jitter = 0.1, rate = 0.5, q = 0.05;
    std::string out, data, config, model_kind, checkpoint, z_source = "prior", mode = "fdr", latent = "mean", dir;
    std::size_t n_samples = 1000, max_maps = 8;
    bool paper_approx = false;

    auto* sim = app.add_subcommand("simulate", "Two-moons latents mapped to 4-D observations");
    sim->add_option("--n", n, "Number of points")->required()->check(CLI::PositiveNumber);
    sim->add_option("--seed", seed, "Generator seed");
    sim->add_option("--noise-scale", noise_scale, "Multiplier on the observation noise")->check(CLI::NonNegativeNumber);
    sim->add_option("--jitter", jitter, "Latent jitter std")->check(CLI::NonNegativeNumber);
    sim->add_option("--out", out, "Output directory")->required();

    auto* tr = app.add_subcommand("train", "Train a VAE or QR-VAE");
    tr->add_option("--model", model_kind, "vae | qrvae")->required()->check(CLI::IsMember({"vae", "qrvae"}));
    tr->add_option("--data", data, "synthetic:moons | synthetic:lesion | CSV | IDX file | directory")->required();
    tr->add_option("--config", config, "key = value experiment file");
    tr->add_option("--out", out, "Output directory")->required();

    auto* kl = app.add_subcommand("eval-kl", "k-NN KL divergence between the data and model samples");
    kl->add_option("--checkpoint", checkpoint)->required();
    kl->add_option("--data", data)->required();
    kl->add_option("--config", config, "Experiment file for synthetic data (default: the checkpoint's)");
    kl->add_option("--n-samples", n_samples)->check(CLI::Range(2, 1000000));
    kl->add_option("--z-source", z_source, "prior | encode")->check(CLI::IsMember({"prior", "encode"}));
    kl->add_option("--seed", seed);
    kl->add_option("--out", out)->required();

    auto* det = app.add_subcommand("detect", "Pixelwise anomaly detection");
    det->add_option("--checkpoint", checkpoint)->required();
    det->add_option("--data", data)->required();
    det->add_option("--config", config, "Experiment file for synthetic data (default: the checkpoint's)");
    det->add_option("--mode", mode, "interval | fdr")->check(CLI::IsMember({"interval", "fdr"}));
    det->add_option("--q", q, "FDR level")->check(CLI::Range(1e-9, 1.0 - 1e-9));
    det->add_option("--latent", latent, "mean (eps = 0) | sample")->check(CLI::IsMember({"mean", "sample"}));
    det->add_flag("--paper-approx", paper_approx, "Treat Q_0.15 as exactly one sigma below the median");
    det->add_option("--max-maps", max_maps, "Images whose z/p maps are written");
    det->add_option("--seed", seed);
    det->add_option("--out", out)->required();

    auto* rep = app.add_subcommand("report", "Aggregate metrics under a directory into summary.csv");
    rep->add_option("--dir", dir)->required();

    auto* syn = app.add_subcommand("synth-lesions", "Write a synthetic lesion set as IDX files");
    syn->add_option("--n", n)->required()->check(CLI::PositiveNumber);
    syn->add_option("--seed", seed);
    syn->add_option("--rate", rate, "Fraction of images with a lesion")->check(CLI::Range(0.0, 1.0));
    syn->add_option("--config", config);
    syn->add_option("--out", out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*sim) {
            ex::simulate(n, seed, noise_scale, jitter, ex::resolve_output(out));
        } else if (*tr) {
            KeyValues cfg = load_config(config);
            auto [train_set, val_set] = ex::load_train_val(data, cfg);
            auto run = ex::run_train(qrvae::parse_model_kind(model_kind), train_set, val_set, cfg,
                                     ex::resolve_output(out), config);
            const auto& last = run.log.rows.back();
            std::cout << "trained " << model_kind << " for " << run.log.rows.size() << " epochs: val_loss "
                      << qrvae::format_double(last.val_loss) << ", sigma_stat " << qrvae::format_double(last.sigma_stat)
                      << "\n";
        } else if (*kl) {
            auto ckpt = qrvae::load_checkpoint(checkpoint);
            ex::Dataset input = ex::load_dataset(data, data_config(config, ckpt), ex::Role::Train);
            auto r = ex::run_eval_kl(ckpt.model, input, n_samples,
                                     z_source == "prior" ? ex::ZSource::Prior : ex::ZSource::Encode, seed,
                                     ex::resolve_output(out), ckpt.manifest.get_or("config_hash", ""));
            std::cout << "kl " << qrvae::format_double(r.kl) << "\n";
            if (r.duplicates) std::cerr << "warning: " << r.duplicates << " zero neighbour distances were floored\n";
        } else if (*det) {
            auto ckpt = qrvae::load_checkpoint(checkpoint);
            ex::DetectOptions o;
            o.mode = mode == "fdr" ? ex::DetectMode::Fdr : ex::DetectMode::Interval;
            o.q = q;
            o.latent = latent == "mean" ? qrvae::LatentMode::Mean : qrvae::LatentMode::Sample;
            o.paper_approx = paper_approx;
            o.max_maps = max_maps;
            o.seed = seed;
            ex::check_detect_compatible(ckpt.model.config(), o.mode);
            ex::Dataset input = ex::load_dataset(data, data_config(config, ckpt), ex::Role::Test);
            auto r = ex::run_detect(ckpt.model, input, o, ex::resolve_output(out), ckpt.manifest.get_or("config_hash", ""));
            for (const auto& [k, v] : r.metrics()) std::cout << k << " " << qrvae::format_double(v) << "\n";
        } else if (*rep) {
            std::cout << ex::run_report(dir).string() << "\n";
        } else if (*syn) {
            KeyValues cfg = load_config(config);
            auto ds = qrvae::synthesize_lesion_set(n, seed, rate, qrvae::LesionConfig::from(cfg));
            const auto target = ex::resolve_output(out);
            std::filesystem::create_directories(target);
            qrvae::write_idx(target / "images.idx", qrvae::images_to_idx(ds));
            qrvae::write_idx(target / "masks.idx", qrvae::masks_to_idx(ds));
            ex::ExperimentManifest m{"lesion", config, cfg.hash(), target, seed, {}};
            m.write();
        }
    } catch (const qrvae::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
