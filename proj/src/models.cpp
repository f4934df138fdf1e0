#include "qrvae/models.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace qrvae {

std::string to_string(ModelKind k) { return k == ModelKind::Vae ? "vae" : "qrvae"; }

ModelKind parse_model_kind(const std::string& s) {
    if (s == "vae") return ModelKind::Vae;
    if (s == "qrvae") return ModelKind::QrVae;
    throw InputError("unknown model kind '" + s + "' (expected vae or qrvae)");
}

namespace {

std::vector<std::size_t> parse_list(const std::string& s, char sep) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) {
        if (item.empty()) continue;
        try {
            out.push_back(static_cast<std::size_t>(std::stoull(item)));
        } catch (const std::exception&) {
            throw InputError("not a list of positive integers: '" + s + "'");
        }
    }
    return out;
}

std::string join(const std::vector<std::size_t>& v, char sep) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? std::string(1, sep) : "") + std::to_string(v[i]);
    return out;
}

}  // namespace

ModelConfig ModelConfig::from(const KeyValues& kv) {
    ModelConfig c;
    c.kind = parse_model_kind(kv.get_or("model.kind", to_string(c.kind)));
    const std::string arch = kv.get_or("model.arch", "mlp");
    if (arch == "mlp")
        c.arch = Architecture::Mlp;
    else if (arch == "conv")
        c.arch = Architecture::Conv;
    else
        throw InputError("unknown model.arch '" + arch + "'");
    if (kv.contains("model.input")) c.input_shape = parse_list(kv.get("model.input"), 'x');
    if (kv.contains("model.hidden")) c.hidden = parse_list(kv.get("model.hidden"), ',');
    if (kv.contains("model.channels")) c.channels = parse_list(kv.get("model.channels"), ',');
    c.kernel = static_cast<std::size_t>(kv.get_int("model.kernel", static_cast<long long>(c.kernel)));
    c.stride = static_cast<std::size_t>(kv.get_int("model.stride", static_cast<long long>(c.stride)));
    c.padding = static_cast<std::size_t>(kv.get_int("model.padding", static_cast<long long>(c.padding)));
    c.latent = static_cast<std::size_t>(kv.get_int("model.latent", static_cast<long long>(c.latent)));
    c.alpha_low = kv.get_double("model.alpha_low", c.alpha_low);
    c.alpha_high = kv.get_double("model.alpha_high", c.alpha_high);
    c.logvar_min = kv.get_double("model.logvar_min", c.logvar_min);
    c.logvar_max = kv.get_double("model.logvar_max", c.logvar_max);
    const std::string out = kv.get_or("model.output", "identity");
    if (out == "identity")
        c.output = OutputActivation::Identity;
    else if (out == "sigmoid")
        c.output = OutputActivation::Sigmoid;
    else
        throw InputError("unknown model.output '" + out + "'");
    c.init_seed = static_cast<std::uint64_t>(kv.get_int("model.init_seed", static_cast<long long>(c.init_seed)));
    c.validate();
    return c;
}

void ModelConfig::write_to(KeyValues& kv) const {
    kv.set("model.kind", to_string(kind));
    kv.set("model.arch", arch == Architecture::Mlp ? "mlp" : "conv");
    kv.set("model.input", join(input_shape, 'x'));
    kv.set("model.hidden", join(hidden, ','));
    kv.set("model.channels", join(channels, ','));
    kv.set("model.kernel", std::to_string(kernel));
    kv.set("model.stride", std::to_string(stride));
    kv.set("model.padding", std::to_string(padding));
    kv.set("model.latent", std::to_string(latent));
    kv.set("model.alpha_low", format_double(alpha_low));
    kv.set("model.alpha_high", format_double(alpha_high));
    kv.set("model.logvar_min", format_double(logvar_min));
    kv.set("model.logvar_max", format_double(logvar_max));
    kv.set("model.output", output == OutputActivation::Identity ? "identity" : "sigmoid");
    kv.set("model.init_seed", std::to_string(init_seed));
}

void ModelConfig::validate() const {
    if (input_shape.empty() || shape_size(input_shape) == 0) throw InputError("model.input must be non-empty");
    if (latent == 0) throw InputError("model.latent must be positive");
    if (!(alpha_low > 0.0 && alpha_low < alpha_high && alpha_high < 1.0))
        throw InputError("quantile levels must satisfy 0 < alpha_low < alpha_high < 1");
    if (!(logvar_min < logvar_max)) throw InputError("model.logvar_min must be below model.logvar_max");
    if (arch == Architecture::Conv) {
        if (input_shape.size() != 3) throw InputError("conv models need model.input = CxHxW");
        if (channels.empty()) throw InputError("conv models need model.channels");
    }
    if (arch == Architecture::Mlp && hidden.empty()) throw InputError("mlp models need model.hidden");
}

// ---- loss terms --------------------------------------------------------------------------

Var reparameterize(const Var& mu, const Var& logvar, const Var& eps) {
    if (mu.shape() != logvar.shape() || mu.shape() != eps.shape())
        throw ShapeError("reparameterize: mu, logvar and eps must share a shape");
    return mu + exp(scale(logvar, 0.5)) * eps;
}

Var kl_term(const Var& mu, const Var& logvar) {
    const double batch = double(mu.shape().at(0));
    Var inner = square(mu) + exp(logvar) - logvar;
    return scale(add_scalar(scale(sum(inner), 1.0 / batch), -double(mu.value().size()) / batch), 0.5);
}

Var gaussian_nll(const Var& x, const Var& mean, const Var& logvar) {
    if (x.shape() != mean.shape() || x.shape() != logvar.shape())
        throw ShapeError("gaussian_nll: x, mean and logvar must share a shape");
    const double batch = double(x.shape().at(0));
    Var per_pixel = scale(logvar, 0.5) + scale(square(x - mean) * exp(neg(logvar)), 0.5);
    return scale(sum(per_pixel), 1.0 / batch);
}

namespace {

Var pinball_sum(const Var& y, const Var& yhat, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("pinball alpha must lie in (0, 1)");
    if (y.shape() != yhat.shape()) throw ShapeError("pinball: target and prediction differ in shape");
    Var u = y - yhat;
    return sum(relu(scale(u, alpha)) + relu(scale(u, alpha - 1.0)));
}

}  // namespace

Var pinball_loss(const Var& y, const Var& yhat, double alpha) {
    return scale(pinball_sum(y, yhat, alpha), 1.0 / double(y.value().size()));
}

Var qrvae_reconstruction_loss(const Var& x, const Var& q_low, const Var& q_high, double alpha_low, double alpha_high) {
    if (!(alpha_low < alpha_high)) throw std::invalid_argument("alpha_low must be below alpha_high");
    const double batch = double(x.shape().at(0));
    return scale(pinball_sum(x, q_low, alpha_low) + pinball_sum(x, q_high, alpha_high), 1.0 / batch);
}

// ---- Autoencoder --------------------------------------------------------------------------

namespace {

void add_output_activation(Sequential& head, OutputActivation a) {
    if (a == OutputActivation::Sigmoid) head.emplace<Sigmoid>();
}

}  // namespace

Autoencoder::Autoencoder(ModelConfig c) : config_(std::move(c)) {
    config_.validate();
    std::mt19937_64 rng(config_.init_seed);
    const Shape& in = config_.input_shape;
    const std::size_t flat = shape_size(in);
    const Shape latent_shape{config_.latent};

    encoder_ = Sequential(in);
    decoder_ = Sequential(latent_shape);

    if (config_.arch == Architecture::Mlp) {
        if (in.size() != 1) encoder_.emplace<Reshape>(Shape{flat});
        std::size_t width = flat;
        for (std::size_t h : config_.hidden) {
            encoder_.emplace<Dense>(width, h, rng);
            encoder_.emplace<Relu>();
            width = h;
        }
        for (const char* name : {"mu", "logvar"}) {
            Sequential head(Shape{width});
            head.emplace<Dense>(width, config_.latent, rng);
            encoder_.add_head(name, std::move(head));
        }

        width = config_.latent;
        for (auto it = config_.hidden.rbegin(); it != config_.hidden.rend(); ++it) {
            decoder_.emplace<Dense>(width, *it, rng);
            decoder_.emplace<Relu>();
            width = *it;
        }
        const bool vae = config_.kind == ModelKind::Vae;
        for (int h = 0; h < 2; ++h) {
            Sequential head(Shape{width});
            head.emplace<Dense>(width, flat, rng);
            const bool variance_head = vae && h == 1;
            if (!variance_head) add_output_activation(head, config_.output);
            if (in.size() != 1) head.emplace<Reshape>(in);
            const char* name = vae ? (h == 0 ? "mean" : "logvar") : (h == 0 ? "q_low" : "q_high");
            decoder_.add_head(name, std::move(head));
        }
        return;
    }

    // Conv: [conv -> batchnorm -> relu] per channel entry, dense bottleneck heads;
    // the decoder mirrors with deconv blocks and two deconv output layers.
    ConvGeometry g{in[0], 0, config_.kernel, config_.stride, config_.padding};
    for (std::size_t ch : config_.channels) {
        g.out_channels = ch;
        encoder_.emplace<Conv2d>(g, rng);
        encoder_.emplace<BatchNorm>(ch);
        encoder_.emplace<Relu>();
        g.in_channels = ch;
    }
    const Shape feature = encoder_.output_shape();
    const std::size_t feature_flat = shape_size(feature);
    encoder_.emplace<Reshape>(Shape{feature_flat});
    for (const char* name : {"mu", "logvar"}) {
        Sequential head(Shape{feature_flat});
        head.emplace<Dense>(feature_flat, config_.latent, rng);
        encoder_.add_head(name, std::move(head));
    }

    decoder_.emplace<Dense>(config_.latent, feature_flat, rng);
    decoder_.emplace<Reshape>(feature);
    decoder_.emplace<Relu>();
    std::vector<std::size_t> up(config_.channels.rbegin(), config_.channels.rend());
    for (std::size_t i = 0; i < up.size(); ++i) {
        const std::size_t cin = up[i];
        const std::size_t cout = i + 1 < up.size() ? up[i + 1] : up.back();
        decoder_.emplace<Deconv2d>(ConvGeometry{cin, cout, config_.kernel, config_.stride, config_.padding}, rng);
        decoder_.emplace<BatchNorm>(cout);
        decoder_.emplace<Relu>();
    }
    if (decoder_.output_shape() != Shape({up.back(), in[1], in[2]}))
        throw ShapeError("conv decoder geometry " + shape_string(decoder_.output_shape()) +
                         " does not reproduce the input extent " + shape_string(in));
    const bool vae = config_.kind == ModelKind::Vae;
    for (int h = 0; h < 2; ++h) {
        Sequential head(decoder_.output_shape());
        head.emplace<Deconv2d>(ConvGeometry{up.back(), in[0], 3, 1, 1}, rng);
        const bool variance_head = vae && h == 1;
        if (!variance_head) add_output_activation(head, config_.output);
        const char* name = vae ? (h == 0 ? "mean" : "logvar") : (h == 0 ? "q_low" : "q_high");
        decoder_.add_head(name, std::move(head));
    }
}

ForwardResult Autoencoder::decode(const Var& z, Mode mode) {
    auto heads = decoder_.forward_heads(z, mode);
    ForwardResult r;
    r.z = z;
    r.head_a = heads[0];
    r.head_b = config_.kind == ModelKind::Vae ? clamp(heads[1], config_.logvar_min, config_.logvar_max) : heads[1];
    return r;
}

ForwardResult Autoencoder::forward(const Var& x, const Tensor& eps, Mode mode) {
    Shape expected{x.shape().at(0)};
    expected.insert(expected.end(), config_.input_shape.begin(), config_.input_shape.end());
    if (x.shape() != expected)
        throw ShapeError("model expects input " + shape_string(expected) + ", got " + shape_string(x.shape()));
    auto enc = encoder_.forward_heads(x, mode);
    Tape& tape = *x.tape();
    Var z = reparameterize(enc[0], enc[1], tape.constant(eps));
    ForwardResult r = decode(z, mode);
    r.mu = enc[0];
    r.logvar = enc[1];
    return r;
}

LossParts Autoencoder::loss(const Var& x, const ForwardResult& out) const {
    LossParts parts;
    parts.reconstruction = config_.kind == ModelKind::Vae
                               ? gaussian_nll(x, out.head_a, out.head_b)
                               : qrvae_reconstruction_loss(x, out.head_a, out.head_b, config_.alpha_low,
                                                           config_.alpha_high);
    parts.kl = kl_term(out.mu, out.logvar);
    parts.total = parts.reconstruction + parts.kl;
    return parts;
}

namespace {

Tensor rows(const Tensor& t, std::size_t begin, std::size_t count) {
    const std::size_t per = t.size() / t.dim(0);
    Shape s = t.shape();
    s[0] = count;
    std::vector<double> data(t.data().begin() + static_cast<std::ptrdiff_t>(begin * per),
                             t.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * per));
    return Tensor(std::move(s), std::move(data));
}

void append_rows(std::vector<double>& dst, const Tensor& t) { dst.insert(dst.end(), t.data().begin(), t.data().end()); }

Tensor with_rows(const Tensor& like, std::size_t n, std::vector<double> data) {
    Shape s = like.shape();
    s[0] = n;
    return Tensor(std::move(s), std::move(data));
}

}  // namespace

Reconstruction Autoencoder::reconstruct(const Tensor& x, LatentMode latent, std::mt19937_64& rng, std::size_t chunk) {
    const std::size_t n = x.dim(0);
    std::vector<double> a, b, mu, lv;
    Tensor la, lb, lmu, llv;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t count = std::min(chunk, n - start);
        Tape tape;
        Var xv = tape.constant(rows(x, start, count));
        Tensor eps = latent == LatentMode::Sample ? standard_normal(Shape{count, config_.latent}, rng)
                                                  : Tensor(Shape{count, config_.latent}, 0.0);
        ForwardResult r = forward(xv, eps, Mode::Eval);
        append_rows(a, r.head_a.value());
        append_rows(b, r.head_b.value());
        append_rows(mu, r.mu.value());
        append_rows(lv, r.logvar.value());
        la = r.head_a.value();
        lb = r.head_b.value();
        lmu = r.mu.value();
        llv = r.logvar.value();
    }
    return {with_rows(la, n, std::move(a)), with_rows(lb, n, std::move(b)), with_rows(lmu, n, std::move(mu)),
            with_rows(llv, n, std::move(lv))};
}

Reconstruction Autoencoder::decode_latents(const Tensor& z, std::size_t chunk) {
    if (z.rank() != 2 || z.dim(1) != config_.latent)
        throw ShapeError("latent codes must be [n, " + std::to_string(config_.latent) + "]");
    const std::size_t n = z.dim(0);
    std::vector<double> a, b;
    Tensor la, lb;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t count = std::min(chunk, n - start);
        Tape tape;
        ForwardResult r = decode(tape.constant(rows(z, start, count)), Mode::Eval);
        append_rows(a, r.head_a.value());
        append_rows(b, r.head_b.value());
        la = r.head_a.value();
        lb = r.head_b.value();
    }
    return {with_rows(la, n, std::move(a)), with_rows(lb, n, std::move(b)), z, Tensor(z.shape(), 0.0)};
}

std::vector<std::pair<std::string, Parameter*>> Autoencoder::named_parameters() {
    auto out = encoder_.named_parameters("encoder.");
    for (auto& p : decoder_.named_parameters("decoder.")) out.push_back(p);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> Autoencoder::named_buffers() {
    auto out = encoder_.named_buffers("encoder.");
    for (auto& b : decoder_.named_buffers("decoder.")) out.push_back(b);
    return out;
}

std::vector<Parameter*> Autoencoder::parameters() {
    std::vector<Parameter*> out;
    for (auto& [name, p] : named_parameters()) out.push_back(p);
    return out;
}

std::vector<std::string> Autoencoder::describe() const {
    auto out = encoder_.describe("encoder.");
    for (auto& d : decoder_.describe("decoder.")) out.push_back(d);
    return out;
}

Tensor standard_normal(const Shape& shape, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor t(shape);
    for (auto& v : t.data()) v = normal(rng);
    return t;
}

}  // namespace qrvae
