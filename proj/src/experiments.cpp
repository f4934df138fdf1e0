#include "qrvae/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>

namespace qrvae::experiments {

// ---- datasets ------------------------------------------------------------------------------

Dataset moons_dataset(std::size_t n, std::uint64_t seed, double noise_scale, double jitter) {
    if (n == 0) throw InputError("moons dataset needs n > 0");
    Dataset d;
    d.id = "moons";
    d.moons = generate_moon_samples(n, seed, noise_scale, jitter);
    d.x = moons_observed(d.moons);
    return d;
}

namespace {

Dataset from_images(const ImageDataset& ds, std::string id) {
    if (ds.count == 0) throw InputError("image dataset '" + id + "' holds no images");
    std::vector<std::size_t> all(ds.count);
    std::iota(all.begin(), all.end(), std::size_t{0});
    Dataset d;
    d.id = std::move(id);
    d.x = ds.batch(all);
    d.masks = ds.masks;
    return d;
}

std::uint64_t role_seed(std::uint64_t seed, Role role) {
    return role == Role::Train ? seed : derive_seed(seed, role == Role::Val ? 1 : 2);
}

Dataset load_moons_csv(const fs::path& path) {
    CsvTable t = read_csv(path);
    if (t.rows.empty() || t.header.empty()) throw InputError(path.string() + ": no rows");
    std::vector<double> values;
    for (const auto& row : t.rows) {
        if (row.size() != t.header.size()) throw InputError(path.string() + ": ragged row");
        for (const auto& cell : row) {
            try {
                values.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw InputError(path.string() + ": non-numeric cell '" + cell + "'");
            }
        }
    }
    Dataset d;
    d.id = path.stem().string();
    d.x = Tensor(Shape{t.rows.size(), t.header.size()}, std::move(values));
    return d;
}

Dataset select_rows(const Dataset& d, std::span<const std::size_t> idx) {
    const std::size_t per = d.x.size() / d.count();
    Shape s = d.x.shape();
    s[0] = idx.size();
    std::vector<double> out;
    std::vector<std::uint8_t> masks;
    const std::size_t mask_per = d.has_masks() ? d.masks.size() / d.count() : 0;
    for (std::size_t i : idx) {
        auto b = d.x.data().begin() + static_cast<std::ptrdiff_t>(i * per);
        out.insert(out.end(), b, b + static_cast<std::ptrdiff_t>(per));
        if (mask_per) {
            auto m = d.masks.begin() + static_cast<std::ptrdiff_t>(i * mask_per);
            masks.insert(masks.end(), m, m + static_cast<std::ptrdiff_t>(mask_per));
        }
    }
    Dataset r;
    r.id = d.id;
    r.x = Tensor(std::move(s), std::move(out));
    r.masks = std::move(masks);
    for (std::size_t i : idx)
        if (!d.moons.empty()) r.moons.push_back(d.moons[i]);
    return r;
}

}  // namespace

Dataset lesion_dataset(std::size_t n, std::uint64_t seed, double rate, const LesionConfig& config) {
    return from_images(synthesize_lesion_set(n, seed, rate, config), "lesion");
}

Dataset load_dataset(const std::string& spec, const KeyValues& config, Role role) {
    const char* role_name = role == Role::Train ? "n" : role == Role::Val ? "n_val" : "n_test";
    if (spec == "synthetic:moons") {
        const auto n = config.get_int(std::string("moons.") + role_name, role == Role::Train ? 500 : 1000);
        if (n <= 0) throw InputError("moons sample count must be positive");
        return moons_dataset(static_cast<std::size_t>(n), role_seed(config.get_int("moons.seed", 1), role),
                             config.get_double("moons.noise_scale", 1.0), config.get_double("moons.jitter", 0.1));
    }
    if (spec == "synthetic:lesion") {
        const char* key = role == Role::Train ? "lesion.n_train" : role == Role::Val ? "lesion.n_val" : "lesion.n_test";
        const auto n = config.get_int(key, role == Role::Train ? 400 : 100);
        if (n <= 0) throw InputError("lesion sample count must be positive");
        const double rate = role == Role::Test ? config.get_double("lesion.test_rate", 0.5)
                                               : config.get_double("lesion.train_rate", 0.0);
        return lesion_dataset(static_cast<std::size_t>(n), role_seed(config.get_int("lesion.seed", 1), role), rate,
                              LesionConfig::from(config));
    }
    if (spec.rfind("synthetic:", 0) == 0) throw InputError("unknown synthetic dataset '" + spec + "'");

    const fs::path path(spec);
    if (!fs::exists(path)) throw InputError("dataset not found: " + spec);
    if (fs::is_directory(path)) {
        const fs::path images = path / "images.idx";
        if (!fs::exists(images)) throw InputError("dataset directory " + spec + " has no images.idx");
        ImageDataset ds = load_idx_images(images);
        const fs::path masks = path / "masks.idx";
        if (fs::exists(masks)) {
            IdxArray m = read_idx(masks);
            if (m.dims.size() != 3 || m.dims[0] != ds.count || m.dims[1] != ds.height || m.dims[2] != ds.width)
                throw InputError(masks.string() + ": mask extents do not match the images");
            ds.masks.resize(m.values.size());
            for (std::size_t i = 0; i < m.values.size(); ++i) ds.masks[i] = m.values[i] > 127 ? 1 : 0;
        }
        return from_images(ds, path.filename().string());
    }
    if (path.extension() == ".csv") return load_moons_csv(path);
    return from_images(load_idx_images(path), path.stem().string());
}

std::pair<Dataset, Dataset> load_train_val(const std::string& spec, const KeyValues& config) {
    if (spec.rfind("synthetic:", 0) == 0)
        return {load_dataset(spec, config, Role::Train), load_dataset(spec, config, Role::Val)};
    Dataset all = load_dataset(spec, config, Role::Train);
    const double vf = config.get_double("data.val_fraction", 0.1);
    if (!(vf > 0.0 && vf < 1.0)) throw InputError("data.val_fraction must lie in (0, 1)");
    SplitIndices s = split(all.count(), {1.0 - vf, vf, 0.0}, config.get_int("data.split_seed", 1));
    if (s.train.empty() || s.val.empty()) throw InputError("dataset too small to split into train and validation");
    return {select_rows(all, s.train), select_rows(all, s.val)};
}

// ---- artifacts ------------------------------------------------------------------------------

void ExperimentManifest::write() {
    artifacts.clear();
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(output_dir))
        if (entry.is_regular_file() && entry.path().filename() != "manifest.txt") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) artifacts.emplace_back(fs::relative(f, output_dir).generic_string(), sha256_file(f));

    std::ostringstream os;
    os << "experiment = " << experiment << "\n"
       << "config = " << config_path << "\n"
       << "config_hash = " << config_hash << "\n"
       << "seed = " << seed << "\n";
    for (const auto& [name, sum] : artifacts) os << "artifact " << name << " " << sum << "\n";
    write_text(output_dir / "manifest.txt", os.str());
}

ExperimentManifest ExperimentManifest::read(const fs::path& dir) {
    ExperimentManifest m;
    m.output_dir = dir;
    std::istringstream is(read_text(dir / "manifest.txt"));
    std::string line;
    while (std::getline(is, line)) {
        if (line.rfind("artifact ", 0) == 0) {
            std::istringstream ls(line.substr(9));
            std::string name, sum;
            ls >> name >> sum;
            m.artifacts.emplace_back(name, sum);
            continue;
        }
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq), value = line.substr(eq + 3);
        if (key == "experiment") m.experiment = value;
        if (key == "config") m.config_path = value;
        if (key == "config_hash") m.config_hash = value;
        if (key == "seed") m.seed = std::stoull(value);
    }
    return m;
}

void write_metrics(const fs::path& path, const Metrics& metrics) {
    std::string text = "metric,value\n";
    for (const auto& [k, v] : metrics) text += k + "," + format_double(v) + "\n";
    write_text(path, text);
}

Metrics read_metrics(const fs::path& path) {
    CsvTable t = read_csv(path);
    if (t.header != std::vector<std::string>{"metric", "value"}) throw InputError(path.string() + ": not a metrics file");
    Metrics out;
    for (const auto& row : t.rows) out.emplace_back(row.at(0), std::stod(row.at(1)));
    return out;
}

fs::path resolve_output(const fs::path& out) {
    const char* root = std::getenv("QRVAE_OUTPUT_ROOT");
    if (root && *root && out.is_relative()) return fs::path(root) / out;
    return out;
}

static void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw InputError("cannot create output directory " + dir.string());
}

// ---- simulate ------------------------------------------------------------------------------

void simulate(std::size_t n, std::uint64_t seed, double noise_scale, double jitter, const fs::path& out) {
    if (n == 0) throw InputError("--n must be positive");
    Dataset d = moons_dataset(n, seed, noise_scale, jitter);
    ensure_dir(out);
    std::vector<std::vector<double>> latent, observed;
    for (const auto& s : d.moons) {
        latent.push_back({s.latent.z1, s.latent.z2});
        observed.push_back({s.observed[0], s.observed[1], s.observed[2], s.observed[3]});
    }
    write_csv(out / "latent.csv", {"z1", "z2"}, latent);
    write_csv(out / "observed.csv", {"v1", "v2", "v3", "v4"}, observed);
    ExperimentManifest m{"moons", "", "", out, seed, {}};
    m.write();
}

// ---- train ---------------------------------------------------------------------------------

ModelConfig model_config_for(ModelKind kind, const KeyValues& config, const Dataset& data) {
    KeyValues kv = config;
    kv.set("model.kind", to_string(kind));
    std::string input;
    for (std::size_t i = 1; i < data.x.rank(); ++i) input += (i > 1 ? "x" : "") + std::to_string(data.x.dim(i));
    kv.set("model.input", input);
    return ModelConfig::from(kv);
}

TrainRun run_train(ModelKind kind, const Dataset& train_set, const Dataset& val_set, KeyValues config,
                   const std::optional<fs::path>& out, const std::string& config_path) {
    ModelConfig mc = model_config_for(kind, config, train_set);
    TrainConfig tc = TrainConfig::from(config);
    if (val_set.x.rank() != train_set.x.rank()) throw InputError("validation and training data differ in shape");
    Autoencoder model(mc);
    TrainLog log = train(model, train_set.x, val_set.x, tc);
    const std::string hash = config_hash(mc, tc, config);
    if (out) {
        ensure_dir(*out);
        save_checkpoint(model, tc, *out / "model.ckpt", config);
        log.write_csv(*out / "train_log.csv");
        ExperimentManifest m{config.get_or("experiment", train_set.id), config_path, hash, *out, tc.seed, {}};
        m.write();
    }
    return {std::move(model), std::move(log), hash};
}

// ---- generation and KL ----------------------------------------------------------------------

stats::GaussianFit decoder_gaussian(const Autoencoder& model, const Reconstruction& r, bool paper_approx) {
    const ModelConfig& c = model.config();
    if (c.kind == ModelKind::Vae) {
        Tensor sd = r.head_b;
        for (auto& v : sd.data()) v = std::exp(0.5 * v);
        return {{r.head_a, sd}, 0};
    }
    if (c.alpha_high == 0.5) return stats::quantiles_to_gaussian(r.head_b, r.head_a, c.alpha_low, paper_approx);
    return stats::quantile_pair_to_gaussian(r.head_a, r.head_b, c.alpha_low, c.alpha_high);
}

Tensor generate(Autoencoder& model, std::size_t n, ZSource source, const Tensor& input, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t latent = model.config().latent;
    Tensor z;
    if (source == ZSource::Prior) {
        z = standard_normal(Shape{n, latent}, rng);
    } else {
        const std::size_t rows = input.dim(0), per = input.size() / rows;
        Shape s = input.shape();
        s[0] = n;
        Tensor picked(s);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t r = rng() % rows;
            std::copy_n(input.data().begin() + static_cast<std::ptrdiff_t>(r * per), per,
                        picked.data().begin() + static_cast<std::ptrdiff_t>(i * per));
        }
        Reconstruction enc = model.reconstruct(picked, LatentMode::Mean, rng);
        Tensor eps = standard_normal(Shape{n, latent}, rng);
        z = Tensor(Shape{n, latent});
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = enc.mu[i] + std::exp(0.5 * enc.logvar[i]) * eps[i];
    }
    Reconstruction r = model.decode_latents(z);
    stats::GaussianFit g = decoder_gaussian(model, r);
    Tensor x = g.params.mean;
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += g.params.stddev[i] * normal(rng);
    return x;
}

namespace {

Tensor flatten_rows(const Tensor& x) { return x.reshaped(Shape{x.dim(0), x.size() / x.dim(0)}); }

Tensor columns(const Tensor& x, std::size_t a, std::size_t b) {
    const std::size_t n = x.dim(0), d = x.dim(1);
    Tensor out(Shape{n, 2});
    for (std::size_t i = 0; i < n; ++i) {
        out[2 * i] = x[i * d + a];
        out[2 * i + 1] = x[i * d + b];
    }
    return out;
}

void write_kde_grid(const fs::path& path, const Tensor& input2, const Tensor& gen2, std::size_t cells = 64) {
    double lo[2], hi[2];
    for (int j = 0; j < 2; ++j) {
        lo[j] = hi[j] = input2[static_cast<std::size_t>(j)];
        for (std::size_t i = 0; i < input2.dim(0); ++i) {
            lo[j] = std::min(lo[j], input2[2 * i + j]);
            hi[j] = std::max(hi[j], input2[2 * i + j]);
        }
        const double pad = 0.1 * (hi[j] - lo[j]) + 1e-9;
        lo[j] -= pad;
        hi[j] += pad;
    }
    Tensor grid(Shape{cells * cells, 2});
    for (std::size_t i = 0; i < cells; ++i)
        for (std::size_t k = 0; k < cells; ++k) {
            grid[2 * (i * cells + k)] = lo[0] + (hi[0] - lo[0]) * double(i) / double(cells - 1);
            grid[2 * (i * cells + k) + 1] = lo[1] + (hi[1] - lo[1]) * double(k) / double(cells - 1);
        }
    auto din = stats::gaussian_kde(input2, grid);
    auto dgen = stats::gaussian_kde(gen2, grid);
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < cells * cells; ++i) rows.push_back({grid[2 * i], grid[2 * i + 1], din[i], dgen[i]});
    write_csv(path, {"a", "b", "density_input", "density_generated"}, rows);
}

}  // namespace

KlResult run_eval_kl(Autoencoder& model, const Dataset& input, std::size_t n_samples, ZSource source,
                     std::uint64_t seed, const std::optional<fs::path>& out, const std::string& config_hash) {
    if (n_samples < 2) throw InputError("--n-samples must be at least 2");
    const Shape per(input.x.shape().begin() + 1, input.x.shape().end());
    if (per != model.config().input_shape)
        throw InputError("data samples are " + shape_string(per) + " but the model expects " +
                         shape_string(model.config().input_shape));
    KlResult r;
    r.generated = generate(model, n_samples, source, input.x, seed);
    Tensor p = flatten_rows(input.x), q = flatten_rows(r.generated);
    stats::KlEstimate kl = stats::knn_kl(p, q);
    r.kl = kl.value;
    r.duplicates = kl.duplicates;
    if (out) {
        ensure_dir(*out);
        write_metrics(*out / "kl_report.csv", {{"kl", r.kl},
                                               {"duplicates", double(r.duplicates)},
                                               {"n_input", double(input.count())},
                                               {"n_generated", double(n_samples)},
                                               {"z_source_encode", source == ZSource::Encode ? 1.0 : 0.0}});
        const std::size_t d = p.dim(1);
        if (d >= 3) {
            write_kde_grid(*out / "kde_v1v2.csv", columns(p, 0, 1), columns(q, 0, 1));
            write_kde_grid(*out / "kde_v2v3.csv", columns(p, 1, 2), columns(q, 1, 2));
        }
        if (d <= 16) {
            std::vector<std::string> header;
            for (std::size_t j = 0; j < d; ++j) header.push_back("v" + std::to_string(j + 1));
            std::vector<std::vector<double>> rows;
            for (std::size_t i = 0; i < q.dim(0); ++i)
                rows.emplace_back(q.data().begin() + static_cast<std::ptrdiff_t>(i * d),
                                  q.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
            write_csv(*out / "generated.csv", header, rows);
        }
        ExperimentManifest m{input.id, "", config_hash, *out, seed, {}};
        m.write();
    }
    return r;
}

// ---- detection -----------------------------------------------------------------------------

void check_detect_compatible(const ModelConfig& config, DetectMode mode) {
    if (mode == DetectMode::Interval) {
        if (config.kind != ModelKind::QrVae) throw CheckpointError("interval mode needs a quantile model");
        require_alphas(config, 0.025, 0.975);
    } else {
        require_alphas(config, 0.15, 0.5);
    }
}

Metrics DetectResult::metrics() const {
    Metrics m{{"images", double(images)},
              {"elements", double(elements)},
              {"flagged_fraction", flagged_fraction},
              {"detected_pixels", detected_pixels},
              {"crossing_rate", crossing_rate}};
    if (auc) m.emplace_back("auc", *auc);
    if (fdr) m.emplace_back("fdr", *fdr);
    if (tpr) m.emplace_back("tpr", *tpr);
    return m;
}

DetectResult run_detect(Autoencoder& model, const Dataset& data, const DetectOptions& o,
                        const std::optional<fs::path>& out, const std::string& config_hash) {
    check_detect_compatible(model.config(), o.mode);
    const Shape per(data.x.shape().begin() + 1, data.x.shape().end());
    if (per != model.config().input_shape)
        throw InputError("data samples are " + shape_string(per) + " but the model expects " +
                         shape_string(model.config().input_shape));
    const std::size_t n = data.count();
    // Vectors are treated as 1x1 images with one channel per feature.
    const std::size_t c = per[0];
    const std::size_t h = per.size() == 3 ? per[1] : 1, w = per.size() == 3 ? per[2] : 1;
    const std::size_t hw = h * w;

    std::mt19937_64 rng(o.seed);
    Reconstruction r = model.reconstruct(data.x, o.latent, rng);
    stats::GaussianFit fit = o.mode == DetectMode::Interval
                                 ? stats::quantile_pair_to_gaussian(r.head_a, r.head_b, model.config().alpha_low,
                                                                    model.config().alpha_high)
                                 : decoder_gaussian(model, r, o.paper_approx);
    stats::DetectionResult zp = stats::z_and_p(data.x, fit.params);

    DetectResult res;
    res.images = n;
    res.elements = data.x.size();
    res.crossing_rate = fit.crossing_rate();
    res.masks.assign(n * hw, 0);
    res.scores.assign(n * hw, 0.0);

    std::vector<std::uint8_t> outside;
    if (o.mode == DetectMode::Interval) {
        outside = stats::interval_detect(data.x, r.head_a, r.head_b);
        res.flagged_fraction = double(std::count(outside.begin(), outside.end(), 1)) / double(res.elements);
    }

    std::vector<double> zpix(hw), ppix(hw);
    std::vector<std::vector<double>> zmaps, pmaps;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < hw; ++k) {
            double s = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) s += zp.z[(i * c + ch) * hw + k];
            zpix[k] = s / std::sqrt(double(c));
            ppix[k] = stats::two_sided_p(zpix[k]);
        }
        std::uint8_t* mask = res.masks.data() + i * hw;
        if (o.mode == DetectMode::Interval) {
            for (std::size_t k = 0; k < hw; ++k)
                for (std::size_t ch = 0; ch < c; ++ch) mask[k] |= outside[(i * c + ch) * hw + k];
        } else {
            stats::BhResult bh = stats::bh_fdr(ppix, o.q);
            for (std::size_t k = 0; k < hw; ++k) mask[k] = ppix[k] <= bh.threshold ? 1 : 0;
        }
        std::vector<double> absz(hw);
        for (std::size_t k = 0; k < hw; ++k) absz[k] = std::abs(zpix[k]);
        auto filtered = hw > 1 ? stats::median_filter(absz, h, w, o.median_window) : absz;
        std::copy(filtered.begin(), filtered.end(), res.scores.begin() + static_cast<std::ptrdiff_t>(i * hw));

        if (out && i < o.max_maps && hw > 1) {
            zmaps.clear();
            pmaps.clear();
            for (std::size_t y = 0; y < h; ++y) {
                zmaps.emplace_back(zpix.begin() + static_cast<std::ptrdiff_t>(y * w),
                                   zpix.begin() + static_cast<std::ptrdiff_t>((y + 1) * w));
                pmaps.emplace_back(ppix.begin() + static_cast<std::ptrdiff_t>(y * w),
                                   ppix.begin() + static_cast<std::ptrdiff_t>((y + 1) * w));
            }
            std::vector<std::string> header;
            for (std::size_t x = 0; x < w; ++x) header.push_back("x" + std::to_string(x));
            char name[32];
            std::snprintf(name, sizeof name, "%04zu", i);
            ensure_dir(*out / "maps");
            write_csv(*out / "maps" / ("z_" + std::string(name) + ".csv"), header, zmaps);
            write_csv(*out / "maps" / ("p_" + std::string(name) + ".csv"), header, pmaps);
        }
    }
    const std::size_t detected = std::count(res.masks.begin(), res.masks.end(), 1);
    res.detected_pixels = double(detected);
    if (o.mode == DetectMode::Fdr) res.flagged_fraction = double(detected) / double(n * hw);

    if (data.has_masks()) {
        if (data.masks.size() != n * hw) throw InputError("ground-truth masks do not match the images");
        std::size_t tp = 0, fp = 0, pos = 0;
        for (std::size_t k = 0; k < n * hw; ++k) {
            pos += data.masks[k];
            tp += res.masks[k] && data.masks[k];
            fp += res.masks[k] && !data.masks[k];
        }
        res.fdr = detected ? double(fp) / double(detected) : 0.0;
        if (pos) res.tpr = double(tp) / double(pos);
        if (pos && pos < n * hw) res.auc = stats::roc_auc(res.scores, data.masks);
    }

    if (out) {
        ensure_dir(*out);
        if (hw > 1) {
            ensure_dir(*out / "masks");
            std::vector<std::uint8_t> pgm(hw);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t k = 0; k < hw; ++k) pgm[k] = res.masks[i * hw + k] ? 255 : 0;
                char name[32];
                std::snprintf(name, sizeof name, "mask_%04zu.pgm", i);
                write_pgm(*out / "masks" / name, w, h, pgm);
            }
        }
        Metrics m = res.metrics();
        m.emplace_back("mode_fdr", o.mode == DetectMode::Fdr ? 1.0 : 0.0);
        m.emplace_back("q", o.q);
        write_metrics(*out / "detect_metrics.csv", m);
        ExperimentManifest man{data.id, "", config_hash, *out, o.seed, {}};
        man.write();
    }
    return res;
}

// ---- report --------------------------------------------------------------------------------

fs::path run_report(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw InputError("report directory not found: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        const auto name = e.path().filename();
        if (e.is_regular_file() && (name == "kl_report.csv" || name == "detect_metrics.csv" || name == "train_log.csv"))
            files.push_back(e.path());
    }
    if (files.empty())
        throw InputError("no experiment artifacts under " + dir.string() +
                         "; expected at least one of: train_log.csv, kl_report.csv, detect_metrics.csv");
    std::sort(files.begin(), files.end());

    std::string text = "source,metric,value,config_hash\n";
    for (const auto& f : files) {
        std::string hash;
        if (fs::exists(f.parent_path() / "manifest.txt")) hash = ExperimentManifest::read(f.parent_path()).config_hash;
        const std::string source = fs::relative(f, dir).generic_string();
        Metrics m;
        if (f.filename() == "train_log.csv") {
            TrainLog log = TrainLog::read_csv(f);
            if (log.rows.empty()) throw InputError(f.string() + ": empty training log");
            auto best = std::min_element(log.rows.begin(), log.rows.end(),
                                         [](const auto& a, const auto& b) { return a.val_loss < b.val_loss; });
            m = {{"epochs", double(log.rows.size())},
                 {"final_train_loss", log.rows.back().train_loss},
                 {"final_val_loss", log.rows.back().val_loss},
                 {"min_val_loss", best->val_loss},
                 {"min_val_epoch", double(best->epoch)},
                 {"first_sigma_stat", log.rows.front().sigma_stat},
                 {"final_sigma_stat", log.rows.back().sigma_stat}};
        } else {
            m = read_metrics(f);
        }
        for (const auto& [k, v] : m) text += source + "," + k + "," + format_double(v) + "," + hash + "\n";
    }
    const fs::path summary = dir / "summary.csv";
    write_text(summary, text);
    return summary;
}

}  // namespace qrvae::experiments
