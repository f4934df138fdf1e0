#include "qrvae/trainer.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <sstream>

#include "qrvae/data.hpp"

namespace qrvae {

TrainConfig TrainConfig::from(const KeyValues& kv) {
    TrainConfig c;
    c.epochs = static_cast<std::size_t>(kv.get_int("train.epochs", static_cast<long long>(c.epochs)));
    c.batch = static_cast<std::size_t>(kv.get_int("train.batch", static_cast<long long>(c.batch)));
    c.lr = kv.get_double("train.lr", c.lr);
    c.beta1 = kv.get_double("train.beta1", c.beta1);
    c.beta2 = kv.get_double("train.beta2", c.beta2);
    c.eps_opt = kv.get_double("train.eps_opt", c.eps_opt);
    c.seed = static_cast<std::uint64_t>(kv.get_int("train.seed", static_cast<long long>(c.seed)));
    c.wall_clock = kv.get_bool("train.wall_clock", c.wall_clock);
    c.dataset = kv.get_or("train.dataset", c.dataset);
    c.validate();
    return c;
}

void TrainConfig::write_to(KeyValues& kv) const {
    kv.set("train.epochs", std::to_string(epochs));
    kv.set("train.batch", std::to_string(batch));
    kv.set("train.lr", format_double(lr));
    kv.set("train.beta1", format_double(beta1));
    kv.set("train.beta2", format_double(beta2));
    kv.set("train.eps_opt", format_double(eps_opt));
    kv.set("train.seed", std::to_string(seed));
    kv.set("train.wall_clock", wall_clock ? "true" : "false");
    kv.set("train.dataset", dataset);
}

void TrainConfig::validate() const {
    // lr = 0 is allowed: it freezes the parameters, which the tests rely on.
    if (epochs == 0 || batch == 0) throw InputError("train.epochs and train.batch must be positive");
    if (!(lr >= 0.0) || !(eps_opt > 0.0)) throw InputError("train.lr must be >= 0 and train.eps_opt > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
        throw InputError("adam betas must lie in [0, 1)");
}

static const std::vector<std::string> kLogHeader{"epoch", "train_loss", "val_loss", "sigma_stat", "seconds"};

void TrainLog::write_csv(const std::filesystem::path& path) const {
    std::vector<std::vector<double>> out;
    for (const auto& r : rows) out.push_back({double(r.epoch), r.train_loss, r.val_loss, r.sigma_stat, r.seconds});
    qrvae::write_csv(path, kLogHeader, out);
}

TrainLog TrainLog::read_csv(const std::filesystem::path& path) {
    CsvTable t = qrvae::read_csv(path);
    if (t.header != kLogHeader) throw InputError(path.string() + ": not a training log");
    TrainLog log;
    for (const auto& row : t.rows) {
        if (row.size() != 5) throw InputError(path.string() + ": short row");
        log.rows.push_back({std::stoul(row[0]), std::stod(row[1]), std::stod(row[2]), std::stod(row[3]),
                            std::stod(row[4])});
    }
    return log;
}

TrainingDiverged::TrainingDiverged(std::size_t e, std::size_t b, const std::string& what)
    : NumericError("non-finite loss at epoch " + std::to_string(e) + ", batch " + std::to_string(b) + ": " + what),
      epoch(e),
      batch(b) {}

namespace {

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
    const std::size_t per = x.size() / x.dim(0);
    Shape s = x.shape();
    s[0] = idx.size();
    std::vector<double> out;
    out.reserve(idx.size() * per);
    for (std::size_t i : idx) {
        auto begin = x.data().begin() + static_cast<std::ptrdiff_t>(i * per);
        out.insert(out.end(), begin, begin + static_cast<std::ptrdiff_t>(per));
    }
    return Tensor(std::move(s), std::move(out));
}

double sigma_stat_of(const Autoencoder& model, const ForwardResult& r) {
    const auto a = r.head_a.value().data();
    const auto b = r.head_b.value().data();
    double s = 0.0;
    if (model.kind() == ModelKind::Vae)
        for (double lv : b) s += std::exp(0.5 * lv);
    else
        for (std::size_t i = 0; i < a.size(); ++i) s += b[i] - a[i];
    return s;
}

// Batches of size one break batchnorm, so a trailing singleton joins the previous batch.
std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t start = 0; start < n; start += batch) out.emplace_back(start, std::min(batch, n - start));
    if (out.size() > 1 && out.back().second == 1) {
        out[out.size() - 2].second += 1;
        out.pop_back();
    }
    return out;
}

}  // namespace

EvalSummary evaluate(Autoencoder& model, const Tensor& x, std::uint64_t eps_seed, std::size_t chunk) {
    std::mt19937_64 rng(eps_seed);
    const std::size_t n = x.dim(0);
    double loss = 0.0, sigma = 0.0;
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (auto [start, count] : batch_ranges(n, chunk)) {
        Tape tape;
        Var xv = tape.constant(gather_rows(x, std::span(idx).subspan(start, count)));
        ForwardResult r = model.forward(xv, standard_normal(Shape{count, model.config().latent}, rng), Mode::Eval);
        loss += model.loss(xv, r).total.value().item() * double(count);
        sigma += sigma_stat_of(model, r);
    }
    return {loss / double(n), sigma / double(x.size())};
}

TrainLog train(Autoencoder& model, const Tensor& train_x, const std::optional<Tensor>& val_x,
               const TrainConfig& config, const EpochCallback& on_epoch) {
    config.validate();
    const std::size_t n = train_x.dim(0);
    if (n == 0) throw InputError("training set is empty");
    const Tensor& val = val_x ? *val_x : train_x;
    const std::uint64_t val_seed = derive_seed(config.seed, 0x7A1);

    auto params = model.parameters();
    std::vector<Tensor> m, v;
    for (Parameter* p : params) {
        m.emplace_back(p->value.shape(), 0.0);
        v.emplace_back(p->value.shape(), 0.0);
    }

    std::mt19937_64 rng(config.seed);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t step = 0;
    TrainLog log;

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

        double total = 0.0;
        std::size_t b = 0;
        for (auto [start, count] : batch_ranges(n, config.batch)) {
            ++b;
            Tape tape;
            Var x = tape.constant(gather_rows(train_x, std::span(order).subspan(start, count)));
            ForwardResult r = model.forward(x, standard_normal(Shape{count, model.config().latent}, rng), Mode::Train);
            LossParts parts = model.loss(x, r);
            const double value = parts.total.value().item();
            if (!std::isfinite(value)) throw TrainingDiverged(epoch, b, "loss = " + format_double(value));
            total += value * double(count);

            for (Parameter* p : params) p->zero_grad();
            tape.backward(parts.total);

            ++step;
            const double c1 = 1.0 - std::pow(config.beta1, double(step));
            const double c2 = 1.0 - std::pow(config.beta2, double(step));
            for (std::size_t k = 0; k < params.size(); ++k) {
                auto w = params[k]->value.data();
                auto g = params[k]->grad.data();
                auto mk = m[k].data();
                auto vk = v[k].data();
                for (std::size_t j = 0; j < w.size(); ++j) {
                    mk[j] = config.beta1 * mk[j] + (1.0 - config.beta1) * g[j];
                    vk[j] = config.beta2 * vk[j] + (1.0 - config.beta2) * g[j] * g[j];
                    w[j] -= config.lr * (mk[j] / c1) / (std::sqrt(vk[j] / c2) + config.eps_opt);
                }
            }
        }

        EvalSummary eval = evaluate(model, val, val_seed);
        if (!std::isfinite(eval.loss)) throw TrainingDiverged(epoch, 0, "validation loss = " + format_double(eval.loss));
        EpochRecord rec{epoch, total / double(n), eval.loss, eval.sigma_stat, 0.0};
        if (config.wall_clock)
            rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.rows.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    return log;
}

// ---- checkpoints -------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little, "checkpoint payload is written in host order");

namespace {

constexpr const char* kMagic = "QRVAE1";

struct TensorEntry {
    std::string name;
    Tensor* tensor;
};

std::vector<TensorEntry> checkpoint_tensors(Autoencoder& model) {
    std::vector<TensorEntry> out;
    for (auto& [name, p] : model.named_parameters()) out.push_back({name, &p->value});
    for (auto& [name, t] : model.named_buffers()) out.push_back({name, t});
    return out;
}

std::string dims_string(const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out;
}

KeyValues manifest_of(const ModelConfig& model, const TrainConfig& train, const KeyValues& extra) {
    KeyValues kv = extra;
    model.write_to(kv);
    train.write_to(kv);
    return kv;
}

}  // namespace

std::string config_hash(const ModelConfig& model, const TrainConfig& train, const KeyValues& extra) {
    return manifest_of(model, train, extra).hash();
}

void save_checkpoint(Autoencoder& model, const TrainConfig& train, const std::filesystem::path& path,
                     const KeyValues& extra) {
    KeyValues kv = manifest_of(model.config(), train, extra);
    kv.set("config_hash", kv.hash());
    std::string head = std::string(kMagic) + "\n" + kv.serialize();
    for (const auto& line : model.describe()) head += "layer " + line + "\n";
    auto tensors = checkpoint_tensors(model);
    for (const auto& t : tensors) head += "tensor " + t.name + " " + dims_string(t.tensor->shape()) + "\n";
    head += "---\n";

    std::vector<std::uint8_t> bytes(head.begin(), head.end());
    for (const auto& t : tensors) {
        auto d = t.tensor->data();
        const std::size_t at = bytes.size();
        bytes.resize(at + d.size() * sizeof(double));
        std::memcpy(bytes.data() + at, d.data(), d.size() * sizeof(double));
    }
    write_bytes(path, bytes);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    const std::string where = path.string() + ": ";
    std::size_t pos = 0;
    auto next_line = [&]() -> std::optional<std::string> {
        const auto* begin = bytes.data() + pos;
        const auto* end = static_cast<const std::uint8_t*>(std::memchr(begin, '\n', bytes.size() - pos));
        if (!end) return std::nullopt;
        std::string line(begin, end);
        pos += line.size() + 1;
        return line;
    };

    auto magic = next_line();
    if (!magic || magic->rfind("QRVAE", 0) != 0) throw CheckpointError(where + "not a checkpoint (bad magic)");
    if (*magic != kMagic)
        throw CheckpointError(where + "unsupported checkpoint version '" + *magic + "', expected '" + kMagic + "'");

    std::string kv_text;
    std::vector<std::string> layers;
    std::vector<std::pair<std::string, std::string>> specs;
    bool terminated = false;
    while (auto line = next_line()) {
        if (*line == "---") {
            terminated = true;
            break;
        }
        if (line->rfind("layer ", 0) == 0) {
            layers.push_back(line->substr(6));
        } else if (line->rfind("tensor ", 0) == 0) {
            std::istringstream ss(line->substr(7));
            std::string name, dims;
            ss >> name >> dims;
            specs.emplace_back(name, dims);
        } else {
            kv_text += *line + "\n";
        }
    }
    if (!terminated) throw CheckpointError(where + "truncated manifest");

    KeyValues manifest = KeyValues::parse(kv_text);
    ModelConfig mc = ModelConfig::from(manifest);
    Autoencoder model(mc);
    if (layers != model.describe()) throw CheckpointError(where + "layer list does not match the declared model");

    auto tensors = checkpoint_tensors(model);
    if (specs.size() != tensors.size())
        throw CheckpointError(where + "manifest lists " + std::to_string(specs.size()) + " tensors, model has " +
                              std::to_string(tensors.size()));
    std::size_t need = 0;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const std::string expect = dims_string(tensors[i].tensor->shape());
        if (specs[i].first != tensors[i].name || specs[i].second != expect)
            throw CheckpointError(where + "manifest shape mismatch: file has " + specs[i].first + " [" +
                                  specs[i].second + "], model expects " + tensors[i].name + " [" + expect + "]");
        need += tensors[i].tensor->size() * sizeof(double);
    }
    if (bytes.size() - pos != need)
        throw CheckpointError(where + "payload holds " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                              std::to_string(need));
    for (auto& t : tensors) {
        auto d = t.tensor->data();
        std::memcpy(d.data(), bytes.data() + pos, d.size() * sizeof(double));
        pos += d.size() * sizeof(double);
    }
    return {std::move(model), std::move(manifest)};
}

void require_alphas(const ModelConfig& config, double alpha_low, double alpha_high) {
    if (config.kind != ModelKind::QrVae) return;
    if (std::abs(config.alpha_low - alpha_low) > 1e-12 || std::abs(config.alpha_high - alpha_high) > 1e-12)
        throw CheckpointError("checkpoint quantile levels (" + format_double(config.alpha_low) + ", " +
                              format_double(config.alpha_high) + ") do not match the required (" +
                              format_double(alpha_low) + ", " + format_double(alpha_high) + ")");
}

}  // namespace qrvae
