// Acceptance suite: one PASS/FAIL line per criterion with its measurements.
// Exits 1 when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "oracles.hpp"
#include "qrvae/experiments.hpp"
#include "qrvae/layers.hpp"

using namespace qrvae;
using namespace qrvae::experiments;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int digits = 4) {
    char b[64];
    std::snprintf(b, sizeof b, "%.*g", digits, v);
    return b;
}

const fs::path kConfigs = QRVAE_CONFIG_DIR;

KeyValues config(const std::string& name) { return KeyValues::load(kConfigs / name); }

// ---- 1 -------------------------------------------------------------------------------------

Outcome gradients() {
    oracle::Gen g(2024);
    std::mt19937_64 rng(7);
    std::map<std::string, double> worst;
    std::map<std::string, int> count;
    auto note = [&](const std::string& name, double err) {
        worst[name] = std::max(worst[name], err);
        ++count[name];
    };
    auto layer_error = [&](Layer& layer, const Shape& in, Mode mode) {
        Parameter x("x", g.tensor(in));
        std::vector<Parameter*> ps{&x};
        for (auto* p : layer.parameters()) ps.push_back(p);
        const auto seed = g.rng();
        return oracle::gradient_error(
            [&](Tape& t) { return oracle::project(t, layer.forward(t.parameter(x), mode), seed); }, ps);
    };
    for (int inst = 0; inst < 20; ++inst) {
        const std::size_t n = g.index(2, 3);
        Dense dense(g.index(1, 6), g.index(1, 6), rng);
        note("dense", layer_error(dense, {n, dense.parameters()[0]->value.dim(0)}, Mode::Train));
        ConvGeometry geo{g.index(1, 3), g.index(1, 3), g.index(2, 4), g.index(1, 2), g.index(0, 1)};
        Conv2d conv(geo, rng);
        note("conv2d", layer_error(conv, {n, geo.in_channels, 7, 6}, Mode::Train));
        Deconv2d deconv(geo, rng);
        note("deconv2d", layer_error(deconv, {n, geo.in_channels, 3, 4}, Mode::Train));
        BatchNorm bn(geo.out_channels);
        bn.gamma().value = g.tensor({geo.out_channels}, 0.5, 2.0);
        note("batchnorm(train)", layer_error(bn, {n + 1, geo.out_channels, 2, 3}, Mode::Train));
        note("batchnorm(eval)", layer_error(bn, {n, geo.out_channels, 2, 3}, Mode::Eval));
        Relu relu;
        note("relu", layer_error(relu, {n, 9}, Mode::Train));
        Sigmoid sig;
        note("sigmoid", layer_error(sig, {n, 9}, Mode::Train));

        const std::size_t d = g.index(1, 6);
        Parameter x("x", g.tensor({n, d})), a("a", g.tensor({n, d})), b("b", g.tensor({n, d}));
        Parameter mu("mu", g.tensor({n, 2})), lv("lv", g.tensor({n, 2})), eps("eps", g.normal_tensor({n, 2}));
        const double al = g.uniform(0.05, 0.45), ah = g.uniform(0.55, 0.95);
        note("kl", oracle::gradient_error([&](Tape& t) { return kl_term(t.parameter(mu), t.parameter(lv)); },
                                          {&mu, &lv}));
        note("gaussian_nll", oracle::gradient_error(
                                 [&](Tape& t) { return gaussian_nll(t.parameter(x), t.parameter(a), t.parameter(b)); },
                                 {&x, &a, &b}));
        note("pinball", oracle::gradient_error([&](Tape& t) { return pinball_loss(t.parameter(x), t.parameter(a), al); },
                                               {&x, &a}));
        note("qr_reconstruction", oracle::gradient_error(
                                      [&](Tape& t) {
                                          return qrvae_reconstruction_loss(t.parameter(x), t.parameter(a),
                                                                           t.parameter(b), al, ah);
                                      },
                                      {&x, &a, &b}));
        note("reparameterize", oracle::gradient_error(
                                   [&](Tape& t) {
                                       return oracle::project(
                                           t, reparameterize(t.parameter(mu), t.parameter(lv), t.parameter(eps)), 3);
                                   },
                                   {&mu, &lv, &eps}));
    }
    Outcome o{true, ""};
    double overall = 0;
    for (auto& [name, err] : worst) {
        o.pass = o.pass && err < 1e-4 && count[name] >= 20;
        overall = std::max(overall, err);
        if (err >= 1e-4) o.detail += name + " err " + fmt(err) + "; ";
    }
    o.detail += std::to_string(worst.size()) + " layers/losses x 20 instances, worst relative error " + fmt(overall);
    return o;
}

// ---- 2 -------------------------------------------------------------------------------------

Outcome shrinkage() {
    KeyValues c = config("moons");
    Dataset tr = moons_dataset(500, 11, 0.01, 0.1), va = moons_dataset(1000, 12, 0.01, 0.1),
            te = moons_dataset(1000, 13, 0.01, 0.1);
    TrainRun vae = run_train(ModelKind::Vae, tr, va, c);
    const double first = vae.log.rows.front().sigma_stat, last = vae.log.rows.back().sigma_stat;
    const bool vae_ok = last < 0.1 * first;

    TrainRun qr = run_train(ModelKind::QrVae, tr, va, c);
    std::mt19937_64 rng(5);
    Reconstruction r = qr.model.reconstruct(te.x, LatentMode::Mean, rng);
    stats::GaussianFit fit = decoder_gaussian(qr.model, r);
    std::size_t inside = 0, points_inside = 0;
    double ratio_sum = 0;
    for (std::size_t i = 0; i < te.count(); ++i) {
        const auto truth = moons_noise_std(te.moons[i].latent);
        bool all = true;
        for (std::size_t d = 0; d < 4; ++d) {
            const double ratio = fit.params.stddev[i * 4 + d] / (0.01 * truth[d]);
            ratio_sum += ratio;
            const bool ok = ratio >= 0.5 && ratio <= 2.0;
            inside += ok;
            all = all && ok;
        }
        points_inside += all;
    }
    const double frac = double(inside) / double(4 * te.count());
    const bool qr_ok = frac >= 0.8;
    return {vae_ok && qr_ok,
            "VAE sigma epoch1 " + fmt(first) + " -> final " + fmt(last) + " (ratio " + fmt(last / first) + ", need < 0.1); " +
                "QR-VAE sigma within [0.5x, 2x] of true noise on " + fmt(100 * frac, 3) + "% of held-out values (" +
                fmt(100.0 * double(points_inside) / double(te.count()), 3) + "% of points on all 4 dims; need >= 80%), " +
                "mean sigma/true " + fmt(ratio_sum / double(4 * te.count()))};
}

// ---- 3 -------------------------------------------------------------------------------------

Outcome kl_ordering() {
    KeyValues c = config("moons");
    int wins = 0;
    std::string detail;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        c.set("train.seed", std::to_string(seed));
        c.set("model.init_seed", std::to_string(seed));
        Dataset tr = moons_dataset(500, 100 + seed, 1.0, 0.1), va = moons_dataset(1000, 200 + seed, 1.0, 0.1);
        TrainRun vae = run_train(ModelKind::Vae, tr, va, c);
        TrainRun qr = run_train(ModelKind::QrVae, tr, va, c);
        const double kv = run_eval_kl(vae.model, tr, 1000, ZSource::Prior, seed).kl;
        const double kq = run_eval_kl(qr.model, tr, 1000, ZSource::Prior, seed).kl;
        wins += kq < kv;
        // Reported only: z drawn from the encoder instead of the prior.
        const double ev = run_eval_kl(vae.model, tr, 1000, ZSource::Encode, seed).kl;
        const double eq = run_eval_kl(qr.model, tr, 1000, ZSource::Encode, seed).kl;
        detail += "seed " + std::to_string(seed) + ": KL(input||QR) " + fmt(kq) + " vs KL(input||VAE) " + fmt(kv) +
                  " (encoder z: " + fmt(eq) + " vs " + fmt(ev) + "); ";
    }
    return {wins >= 2, detail + "QR-VAE closer on " + std::to_string(wins) + "/3 with prior z"};
}

// ---- 4 -------------------------------------------------------------------------------------

Outcome estimators() {
    oracle::Gen g(4);
    Tensor p(Shape{5000, 1}), q(Shape{5000, 1});
    for (auto& v : p.storage()) v = g.normal();
    for (auto& v : q.storage()) v = 1.0 + g.normal();
    const double kl = stats::knn_kl(p, q).value;
    const double qi = stats::normal_quantile(0.15), ref = oracle::normal_quantile(0.15);
    const auto bh = stats::bh_fdr(std::vector<double>{0.01, 0.02, 0.04, 0.5}, 0.05);
    const bool ok = std::abs(kl - 0.5) <= 0.1 && std::abs(qi - ref) < 1e-5 && std::abs(qi + 1.036433) < 1e-5 &&
                    bh.rejections == 2;
    return {ok, "knn-kl N(0,1)||N(1,1) = " + fmt(kl) + " (0.5 +- 0.1); Phi^-1(0.15) = " + fmt(qi, 10) +
                    " vs bisection " + fmt(ref, 10) + "; BH rejects " + std::to_string(bh.rejections)};
}

// ---- 5 -------------------------------------------------------------------------------------

Outcome coverage() {
    KeyValues c = config("moons");
    Dataset tr = moons_dataset(500, 31, 1.0, 0.1), va = moons_dataset(1000, 32, 1.0, 0.1),
            te = moons_dataset(1000, 33, 1.0, 0.1);
    TrainRun qr = run_train(ModelKind::QrVae, tr, va, c);
    std::mt19937_64 rng(9);
    Reconstruction r = qr.model.reconstruct(te.x, LatentMode::Sample, rng);
    std::size_t below_low = 0, below_med = 0;
    for (std::size_t i = 0; i < te.x.size(); ++i) {
        below_low += te.x[i] < r.head_a[i];
        below_med += te.x[i] < r.head_b[i];
    }
    const double f15 = double(below_low) / double(te.x.size()), f50 = double(below_med) / double(te.x.size());

    c.set("model.alpha_low", "0.025");
    c.set("model.alpha_high", "0.975");
    TrainRun wide = run_train(ModelKind::QrVae, tr, va, c);
    DetectOptions o;
    o.mode = DetectMode::Interval;
    o.latent = LatentMode::Sample;
    o.seed = 9;
    const double flagged = run_detect(wide.model, te, o).flagged_fraction;

    const bool ok = std::abs(f15 - 0.15) <= 0.05 && std::abs(f50 - 0.5) <= 0.05 && std::abs(flagged - 0.05) <= 0.02;
    return {ok, "below Q0.15: " + fmt(f15) + " (0.15 +- 0.05), below Q0.5: " + fmt(f50) +
                    " (0.5 +- 0.05), interval mode flags " + fmt(flagged) + " of clean values (0.05 +- 0.02); " +
                    "latent sampled from the posterior"};
}

// ---- 6 and 7 share the lesion runs -----------------------------------------------------------

struct LesionRuns {
    std::string source;
    std::optional<TrainRun> vae, qr;
    std::optional<Dataset> test;
    double seconds = 0;
};

std::optional<fs::path> fashion_dir() {
    if (const char* env = std::getenv("QRVAE_FASHION_DIR"); env && fs::exists(fs::path(env) / "images.idx"))
        return fs::path(env);
    return std::nullopt;
}

LesionRuns& lesion_runs() {
    static LesionRuns runs = [] {
        LesionRuns r;
        const auto t0 = std::chrono::steady_clock::now();
        KeyValues c = config("lesion");
        auto [tr, va] = load_train_val("synthetic:lesion", c);
        r.test = load_dataset("synthetic:lesion", c, Role::Test);
        r.source = "synthetic lesions (" + std::to_string(tr.count()) + " train, " + std::to_string(va.count()) +
                   " val, " + std::to_string(r.test->count()) + " test)";
        r.vae = run_train(ModelKind::Vae, tr, va, c);
        r.qr = run_train(ModelKind::QrVae, tr, va, c);
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return r;
    }();
    return runs;
}

// Fraction of pixels flagged in test images without a lesion.
double clean_flag_rate(const DetectResult& r, const Dataset& d) {
    const std::size_t hw = r.masks.size() / r.images;
    std::size_t flagged = 0, pixels = 0;
    for (std::size_t i = 0; i < r.images; ++i) {
        const auto* gt = d.masks.data() + i * hw;
        if (std::any_of(gt, gt + hw, [](std::uint8_t m) { return m != 0; })) continue;
        flagged += std::count(r.masks.begin() + std::ptrdiff_t(i * hw), r.masks.begin() + std::ptrdiff_t((i + 1) * hw), 1);
        pixels += hw;
    }
    return pixels ? double(flagged) / double(pixels) : 0.0;
}

Outcome fdr_control() {
    LesionRuns& runs = lesion_runs();
    DetectOptions o;
    o.mode = DetectMode::Fdr;
    o.q = 0.05;
    DetectResult q = run_detect(runs.qr->model, *runs.test, o);
    DetectResult v = run_detect(runs.vae->model, *runs.test, o);
    const bool ok = *q.fdr <= 0.10 && *q.auc > *v.auc && *q.auc >= 0.85;
    return {ok, runs.source + ": QR-VAE FDR " + fmt(*q.fdr) + " (<= 0.10), TPR " + fmt(*q.tpr) + ", AUC " +
                    fmt(*q.auc) + "; VAE FDR " + fmt(*v.fdr) + ", AUC " + fmt(*v.auc) + " (need QR AUC > VAE AUC and >= 0.85); " +
                    "QR crossing rate " + fmt(q.crossing_rate) + "; flagged on lesion-free test images: QR " +
                    fmt(clean_flag_rate(q, *runs.test)) + ", VAE " + fmt(clean_flag_rate(v, *runs.test))};
}

struct Curve {
    double min = 0, final = 0;
    std::size_t argmin = 0;
};

Curve curve(const TrainLog& log) {
    Curve c{log.rows.front().val_loss, log.rows.back().val_loss, 1};
    for (const auto& r : log.rows)
        if (r.val_loss < c.min) c = {r.val_loss, c.final, r.epoch};
    return c;
}

Outcome divergence() {
    const TrainLog *vlog = nullptr, *qlog = nullptr;
    std::optional<TrainRun> fv, fq;
    std::string source;
    if (auto dir = fashion_dir()) {
        KeyValues c = config("fashion");
        auto [tr, va] = load_train_val(dir->string(), c);
        fv = run_train(ModelKind::Vae, tr, va, c);
        fq = run_train(ModelKind::QrVae, tr, va, c);
        vlog = &fv->log;
        qlog = &fq->log;
        source = "Fashion-MNIST at " + dir->string();
    } else {
        LesionRuns& runs = lesion_runs();
        vlog = &runs.vae->log;
        qlog = &runs.qr->log;
        source = runs.source + " (no Fashion-MNIST: set QRVAE_FASHION_DIR)";
    }
    const Curve v = curve(*vlog), q = curve(*qlog);
    // Losses can be negative (Gaussian NLL), so the margin is taken relative to |min|.
    const double v_rise = (v.final - v.min) / std::abs(v.min), q_rise = (q.final - q.min) / std::abs(q.min);
    const bool ok = v.argmin < vlog->rows.size() && v_rise >= 0.10 && q_rise <= 0.05;
    return {ok, source + ": VAE val loss min " + fmt(v.min) + " at epoch " + std::to_string(v.argmin) + ", final " +
                    fmt(v.final) + " (rise " + fmt(100 * v_rise, 3) + "% of |min|, need >= 10%); QR-VAE min " + fmt(q.min) +
                    " at epoch " + std::to_string(q.argmin) + ", final " + fmt(q.final) + " (rise " +
                    fmt(100 * q_rise, 3) + "%, need <= 5%)"};
}

// ---- 8 -------------------------------------------------------------------------------------

int cli(const std::string& args) {
    const std::string cmd = std::string(QRVAE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int s = std::system(cmd.c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
}

Outcome determinism() {
    const fs::path root = fs::temp_directory_path() / "qrvae_acceptance_determinism";
    fs::remove_all(root);
    const std::string conf = (kConfigs / "moons").string();
    std::vector<std::vector<std::pair<std::string, std::string>>> seen[2];
    std::size_t files = 0;
    for (int rep = 0; rep < 2; ++rep) {
        const fs::path d = root / ("run" + std::to_string(rep));
        const std::string ckpt = (d / "train" / "model.ckpt").string();
        const std::string steps[] = {
            "simulate --n 500 --seed 3 --out " + (d / "sim").string(),
            "train --model qrvae --data synthetic:moons --config " + conf + " --out " + (d / "train").string(),
            "eval-kl --checkpoint " + ckpt + " --data synthetic:moons --out " + (d / "kl").string(),
            "detect --checkpoint " + ckpt + " --data synthetic:moons --latent sample --out " + (d / "detect").string(),
        };
        for (const auto& s : steps)
            if (cli(s) != 0) return {false, "command failed: qrvae " + s};
        for (const char* sub : {"sim", "train", "kl", "detect"}) {
            seen[rep].push_back(ExperimentManifest::read(d / sub).artifacts);
            files += seen[rep].back().size();
        }
    }
    const bool ok = seen[0] == seen[1];
    fs::remove_all(root);
    return {ok, "simulate, train, eval-kl and detect run twice: " + std::to_string(files / 2) + " artifact checksums " +
                    (ok ? "identical" : "differ")};
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        std::function<Outcome()> run;
    };
    const Criterion criteria[] = {
        {1, "gradient correctness", gradients},
        {2, "variance shrinkage", shrinkage},
        {3, "generative KL ordering", kl_ordering},
        {4, "estimator oracles", estimators},
        {5, "coverage calibration", coverage},
        {6, "FDR control and AUC", fdr_control},
        {7, "divergence witness", divergence},
        {8, "determinism", determinism},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::string timing = fmt(s, 3) + " s";
        if (c.id == 6) timing += ", of which " + fmt(lesion_runs().seconds, 3) + " s shared lesion training";
        std::printf("%s criterion %d (%s): %s [%s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(),
                    timing.c_str());
        std::fflush(stdout);
        failed += !o.pass;
    }
    std::printf("%d/%zu criteria passed\n", int(std::size(criteria)) - failed, std::size(criteria));
    return failed ? 1 : 0;
}
