#include "qrvae/layers.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gemm.hpp"

namespace qrvae {

namespace {

Tensor uniform_init(Shape shape, double fan_in, double fan_out, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

std::size_t conv_out(std::size_t in, const ConvGeometry& g) {
    if (in + 2 * g.padding < g.kernel)
        throw ShapeError("conv2d geometry: extent " + std::to_string(in) + " with padding " +
                         std::to_string(g.padding) + " is smaller than kernel " + std::to_string(g.kernel));
    return (in + 2 * g.padding - g.kernel) / g.stride + 1;
}

std::size_t deconv_out(std::size_t in, const ConvGeometry& g) {
    const std::size_t grown = (in - 1) * g.stride + g.kernel;
    if (grown <= 2 * g.padding)
        throw ShapeError("deconv2d geometry: padding " + std::to_string(g.padding) + " consumes the whole output");
    return grown - 2 * g.padding;
}

void check_geometry(const ConvGeometry& g) {
    if (g.in_channels == 0 || g.out_channels == 0 || g.kernel == 0 || g.stride == 0)
        throw ShapeError("convolution geometry needs positive channels, kernel and stride");
}

// col[(c*k + ki)*k + kj][oh*ow_n + ow] = img[c][oh*s - p + ki][ow*s - p + kj]
// Output columns ow whose input column ow * stride + kj - padding lies in [0, w).
std::pair<std::size_t, std::size_t> valid_columns(std::size_t kj, std::size_t w, std::size_t ow_n, const ConvGeometry& g) {
    const auto s = static_cast<std::ptrdiff_t>(g.stride);
    const auto off = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(g.padding);
    std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
    std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(w) - 1 - off) < 0 ? 0 : (static_cast<std::ptrdiff_t>(w) - 1 - off) / s + 1;
    hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(ow_n));
    if (lo > hi) lo = hi;
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

void im2col(const double* img, std::size_t channels, std::size_t h, std::size_t w, const ConvGeometry& g,
            std::size_t oh_n, std::size_t ow_n, double* col) {
    const std::size_t k = g.kernel, st = g.stride;
    const std::size_t cols = oh_n * ow_n;
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t ki = 0; ki < k; ++ki)
            for (std::size_t kj = 0; kj < k; ++kj) {
                double* row = col + ((c * k + ki) * k + kj) * cols;
                const auto [lo, hi] = valid_columns(kj, w, ow_n, g);
                const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(g.padding);
                for (std::size_t oh = 0; oh < oh_n; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * st + ki) - static_cast<std::ptrdiff_t>(g.padding);
                    double* dst = row + oh * ow_n;
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) {
                        std::fill(dst, dst + ow_n, 0.0);
                        continue;
                    }
                    const double* src = img + (c * h + static_cast<std::size_t>(ih)) * w;
                    std::fill(dst, dst + lo, 0.0);
                    for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = src[static_cast<std::ptrdiff_t>(ow * st) + shift];
                    std::fill(dst + hi, dst + ow_n, 0.0);
                }
            }
}

void col2im(const double* col, std::size_t channels, std::size_t h, std::size_t w, const ConvGeometry& g,
            std::size_t oh_n, std::size_t ow_n, double* img) {
    const std::size_t k = g.kernel, st = g.stride;
    const std::size_t cols = oh_n * ow_n;
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t ki = 0; ki < k; ++ki)
            for (std::size_t kj = 0; kj < k; ++kj) {
                const double* row = col + ((c * k + ki) * k + kj) * cols;
                const auto [lo, hi] = valid_columns(kj, w, ow_n, g);
                const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(g.padding);
                for (std::size_t oh = 0; oh < oh_n; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * st + ki) - static_cast<std::ptrdiff_t>(g.padding);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                    double* dst = img + (c * h + static_cast<std::size_t>(ih)) * w;
                    const double* src = row + oh * ow_n;
                    for (std::size_t ow = lo; ow < hi; ++ow) dst[static_cast<std::ptrdiff_t>(ow * st) + shift] += src[ow];
                }
            }
}

std::string geometry_string(const ConvGeometry& g) {
    std::ostringstream os;
    os << "in=" << g.in_channels << " out=" << g.out_channels << " kernel=" << g.kernel << " stride=" << g.stride
       << " padding=" << g.padding;
    return os.str();
}

}  // namespace

// ---- Dense -----------------------------------------------------------------------

Dense::Dense(std::size_t in, std::size_t out, std::mt19937_64& rng)
    : in_(in),
      out_(out),
      weight_("weight", uniform_init(Shape{in, out}, double(in), double(out), rng)),
      bias_("bias", Tensor(Shape{out}, 0.0)) {}

Shape Dense::output_shape(const Shape& input) const {
    if (input != Shape{in_})
        throw ShapeError("dense expects per-sample shape [" + std::to_string(in_) + "], got " + shape_string(input));
    return Shape{out_};
}

Var Dense::forward(const Var& x, Mode) {
    if (x.shape().size() != 2 || x.shape()[1] != in_)
        throw ShapeError("dense expects [batch, " + std::to_string(in_) + "], got " + shape_string(x.shape()));
    Tape& tape = *x.tape();
    return add(matmul(x, tape.parameter(weight_)), tape.parameter(bias_));
}

std::string Dense::describe() const { return "dense in=" + std::to_string(in_) + " out=" + std::to_string(out_); }

// ---- Conv2d ------------------------------------------------------------------------

Conv2d::Conv2d(ConvGeometry g, std::mt19937_64& rng)
    : g_((check_geometry(g), g)),
      weight_("weight", uniform_init(Shape{g.out_channels, g.in_channels, g.kernel, g.kernel},
                                     double(g.in_channels * g.kernel * g.kernel),
                                     double(g.out_channels * g.kernel * g.kernel), rng)),
      bias_("bias", Tensor(Shape{g.out_channels}, 0.0)) {}

Shape Conv2d::output_shape(const Shape& input) const {
    if (input.size() != 3 || input[0] != g_.in_channels)
        throw ShapeError("conv2d expects per-sample [" + std::to_string(g_.in_channels) + ",H,W], got " +
                         shape_string(input));
    return Shape{g_.out_channels, conv_out(input[1], g_), conv_out(input[2], g_)};
}

Var Conv2d::forward(const Var& x, Mode) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("conv2d expects [batch,C,H,W], got " + shape_string(s));
    const Shape os = output_shape(Shape{s[1], s[2], s[3]});
    const std::size_t batch = s[0], cin = s[1], h = s[2], w = s[3];
    const std::size_t cout = os[0], oh = os[1], ow = os[2];
    const std::size_t ckk = cin * g_.kernel * g_.kernel;
    const std::size_t L = oh * ow;
    const ConvGeometry g = g_;

    auto cols = std::make_shared<std::vector<double>>(batch * ckk * L);
    Tensor out(Shape{batch, cout, oh, ow});
    const double* xin = x.value().data().data();
    const double* W = weight_.value.data().data();
    const double* bias = bias_.value.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        double* col = cols->data() + b * ckk * L;
        im2col(xin + b * cin * h * w, cin, h, w, g, oh, ow, col);
        double* o = out.data().data() + b * cout * L;
        detail::gemm(false, false, cout, L, ckk, W, col, o, false);
        for (std::size_t c = 0; c < cout; ++c)
            for (std::size_t i = 0; i < L; ++i) o[c * L + i] += bias[c];
    }

    Tape& tape = *x.tape();
    Var wv = tape.parameter(weight_);
    Var bv = tape.parameter(bias_);
    return tape.record("conv2d", std::move(out), {x, wv, bv}, [=](const BackwardContext& c) {
        const double* G = c.output_grad.data().data();
        Tensor* gx = c.input_grads[0];
        Tensor* gw = c.input_grads[1];
        Tensor* gb = c.input_grads[2];
        const double* Wv = c.inputs[1]->data().data();
        std::vector<double> dcol(gx ? ckk * L : 0);
        for (std::size_t b = 0; b < batch; ++b) {
            const double* Gb = G + b * cout * L;
            if (gw) detail::gemm(false, true, cout, ckk, L, Gb, cols->data() + b * ckk * L, gw->data().data(), true);
            if (gb)
                for (std::size_t ch = 0; ch < cout; ++ch) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < L; ++i) acc += Gb[ch * L + i];
                    (*gb)[ch] += acc;
                }
            if (gx) {
                detail::gemm(true, false, ckk, L, cout, Wv, Gb, dcol.data(), false);
                col2im(dcol.data(), cin, h, w, g, oh, ow, gx->data().data() + b * cin * h * w);
            }
        }
    });
}

std::string Conv2d::describe() const { return "conv2d " + geometry_string(g_); }

// ---- Deconv2d ----------------------------------------------------------------------

Deconv2d::Deconv2d(ConvGeometry g, std::mt19937_64& rng)
    : g_((check_geometry(g), g)),
      weight_("weight", uniform_init(Shape{g.in_channels, g.out_channels, g.kernel, g.kernel},
                                     double(g.in_channels * g.kernel * g.kernel),
                                     double(g.out_channels * g.kernel * g.kernel), rng)),
      bias_("bias", Tensor(Shape{g.out_channels}, 0.0)) {}

Shape Deconv2d::output_shape(const Shape& input) const {
    if (input.size() != 3 || input[0] != g_.in_channels)
        throw ShapeError("deconv2d expects per-sample [" + std::to_string(g_.in_channels) + ",H,W], got " +
                         shape_string(input));
    return Shape{g_.out_channels, deconv_out(input[1], g_), deconv_out(input[2], g_)};
}

Var Deconv2d::forward(const Var& x, Mode) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("deconv2d expects [batch,C,H,W], got " + shape_string(s));
    const Shape os = output_shape(Shape{s[1], s[2], s[3]});
    const std::size_t batch = s[0], cin = s[1], h = s[2], w = s[3];
    const std::size_t cout = os[0], oh = os[1], ow = os[2];
    const std::size_t ckk = cout * g_.kernel * g_.kernel;
    const std::size_t Lin = h * w;
    const std::size_t Lout = oh * ow;
    const ConvGeometry g = g_;

    Tensor out(Shape{batch, cout, oh, ow});
    const double* xin = x.value().data().data();
    const double* W = weight_.value.data().data();  // [cin, cout*k*k]
    const double* bias = bias_.value.data().data();
    std::vector<double> col(ckk * Lin);
    for (std::size_t b = 0; b < batch; ++b) {
        detail::gemm(true, false, ckk, Lin, cin, W, xin + b * cin * Lin, col.data(), false);
        double* o = out.data().data() + b * cout * Lout;
        col2im(col.data(), cout, oh, ow, g, h, w, o);
        for (std::size_t c = 0; c < cout; ++c)
            for (std::size_t i = 0; i < Lout; ++i) o[c * Lout + i] += bias[c];
    }

    Tape& tape = *x.tape();
    Var wv = tape.parameter(weight_);
    Var bv = tape.parameter(bias_);
    return tape.record("deconv2d", std::move(out), {x, wv, bv}, [=](const BackwardContext& c) {
        const double* G = c.output_grad.data().data();
        Tensor* gx = c.input_grads[0];
        Tensor* gw = c.input_grads[1];
        Tensor* gb = c.input_grads[2];
        const double* Wv = c.inputs[1]->data().data();
        const double* X = c.inputs[0]->data().data();
        std::vector<double> gcol(ckk * Lin);
        for (std::size_t b = 0; b < batch; ++b) {
            const double* Gb = G + b * cout * Lout;
            if (gb)
                for (std::size_t ch = 0; ch < cout; ++ch) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < Lout; ++i) acc += Gb[ch * Lout + i];
                    (*gb)[ch] += acc;
                }
            if (!gx && !gw) continue;
            im2col(Gb, cout, oh, ow, g, h, w, gcol.data());
            if (gx) detail::gemm(false, false, cin, Lin, ckk, Wv, gcol.data(), gx->data().data() + b * cin * Lin, true);
            if (gw) detail::gemm(false, true, cin, ckk, Lin, X + b * cin * Lin, gcol.data(), gw->data().data(), true);
        }
    });
}

std::string Deconv2d::describe() const { return "deconv2d " + geometry_string(g_); }

// ---- BatchNorm ---------------------------------------------------------------------

BatchNorm::BatchNorm(std::size_t channels, double eps, double momentum)
    : channels_(channels),
      eps_(eps),
      momentum_(momentum),
      gamma_("gamma", Tensor(Shape{channels}, 1.0)),
      beta_("beta", Tensor(Shape{channels}, 0.0)),
      running_mean_(Shape{channels}, 0.0),
      running_var_(Shape{channels}, 1.0) {}

Shape BatchNorm::output_shape(const Shape& input) const {
    if (input.empty() || input[0] != channels_ || (input.size() != 1 && input.size() != 3))
        throw ShapeError("batchnorm expects per-sample [" + std::to_string(channels_) + "] or [" +
                         std::to_string(channels_) + ",H,W], got " + shape_string(input));
    return input;
}

Var BatchNorm::forward(const Var& x, Mode mode) {
    const Shape& s = x.shape();
    if (s.size() != 2 && s.size() != 4) throw ShapeError("batchnorm expects rank 2 or 4, got " + shape_string(s));
    output_shape(Shape(s.begin() + 1, s.end()));
    const std::size_t batch = s[0];
    const std::size_t C = channels_;
    const std::size_t inner = s.size() == 4 ? s[2] * s[3] : 1;
    const std::size_t n = batch * inner;
    if (mode == Mode::Train && batch < 2) throw ShapeError("batchnorm in train mode needs a batch of at least 2");

    const auto& X = x.value();
    std::vector<double> mu(C), invstd(C);
    if (mode == Mode::Train) {
        for (std::size_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < inner; ++i) acc += X[(b * C + c) * inner + i];
            const double m = acc / double(n);
            double var = 0.0;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < inner; ++i) {
                    const double d = X[(b * C + c) * inner + i] - m;
                    var += d * d;
                }
            var /= double(n);
            mu[c] = m;
            invstd[c] = 1.0 / std::sqrt(var + eps_);
            running_mean_[c] = momentum_ * running_mean_[c] + (1.0 - momentum_) * m;
            running_var_[c] = momentum_ * running_var_[c] + (1.0 - momentum_) * var;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mu[c] = running_mean_[c];
            invstd[c] = 1.0 / std::sqrt(running_var_[c] + eps_);
        }
    }

    auto xhat = std::make_shared<Tensor>(s);
    Tensor out(s);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t idx = (b * C + c) * inner + i;
                (*xhat)[idx] = (X[idx] - mu[c]) * invstd[c];
                out[idx] = gamma_.value[c] * (*xhat)[idx] + beta_.value[c];
            }

    Tape& tape = *x.tape();
    Var gv = tape.parameter(gamma_);
    Var bv = tape.parameter(beta_);
    const bool train = mode == Mode::Train;
    return tape.record("batchnorm", std::move(out), {x, gv, bv}, [=](const BackwardContext& ctx) {
        const auto& G = ctx.output_grad;
        const auto& gamma = *ctx.inputs[1];
        Tensor* gx = ctx.input_grads[0];
        Tensor* gg = ctx.input_grads[1];
        Tensor* gb = ctx.input_grads[2];
        for (std::size_t c = 0; c < C; ++c) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t idx = (b * C + c) * inner + i;
                    sum_g += G[idx];
                    sum_gx += G[idx] * (*xhat)[idx];
                }
            if (gg) (*gg)[c] += sum_gx;
            if (gb) (*gb)[c] += sum_g;
            if (!gx) continue;
            const double k = gamma[c] * invstd[c];
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t idx = (b * C + c) * inner + i;
                    if (train)
                        (*gx)[idx] += k * (G[idx] - sum_g / double(n) - (*xhat)[idx] * sum_gx / double(n));
                    else
                        (*gx)[idx] += k * G[idx];
                }
        }
    });
}

std::string BatchNorm::describe() const {
    std::ostringstream os;
    os << "batchnorm channels=" << channels_ << " eps=" << eps_ << " momentum=" << momentum_;
    return os.str();
}

// ---- Reshape -----------------------------------------------------------------------

Shape Reshape::output_shape(const Shape& input) const {
    if (shape_size(input) != shape_size(shape_))
        throw ShapeError("reshape " + shape_string(input) + " to " + shape_string(shape_) + " changes size");
    return shape_;
}

Var Reshape::forward(const Var& x, Mode) {
    Shape full{x.shape().at(0)};
    full.insert(full.end(), shape_.begin(), shape_.end());
    return reshape(x, full);
}

std::string Reshape::describe() const { return "reshape to=" + shape_string(shape_); }

// ---- Sequential ------------------------------------------------------------------------

Shape Sequential::output_shape() const {
    Shape s = input_shape_;
    for (const auto& l : layers_) s = l->output_shape(s);
    return s;
}

Sequential& Sequential::add(LayerPtr layer) {
    if (!heads_.empty()) throw std::logic_error("cannot extend a trunk after heads are attached");
    layer->output_shape(output_shape());
    layers_.push_back(std::move(layer));
    return *this;
}

Sequential& Sequential::add_head(std::string name, Sequential head) {
    if (head.input_shape() != output_shape())
        throw ShapeError("head '" + name + "' expects " + shape_string(head.input_shape()) + " but the trunk yields " +
                         shape_string(output_shape()));
    heads_.emplace_back(std::move(name), std::move(head));
    return *this;
}

Var Sequential::forward(const Var& x, Mode mode) {
    Var h = x;
    for (auto& l : layers_) h = l->forward(h, mode);
    return h;
}

std::vector<Var> Sequential::forward_heads(const Var& x, Mode mode) {
    Var trunk = forward(x, mode);
    std::vector<Var> outs;
    outs.reserve(heads_.size());
    for (auto& [name, head] : heads_) outs.push_back(head.forward(trunk, mode));
    return outs;
}

std::vector<std::pair<std::string, Parameter*>> Sequential::named_parameters(const std::string& prefix) {
    std::vector<std::pair<std::string, Parameter*>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
        for (Parameter* p : layers_[i]->parameters()) out.emplace_back(prefix + std::to_string(i) + "." + p->name, p);
    for (auto& [name, head] : heads_)
        for (auto& np : head.named_parameters(prefix + "head." + name + ".")) out.push_back(np);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> Sequential::named_buffers(const std::string& prefix) {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
        for (const Buffer& b : layers_[i]->buffers()) out.emplace_back(prefix + std::to_string(i) + "." + b.name, b.tensor);
    for (auto& [name, head] : heads_)
        for (auto& nb : head.named_buffers(prefix + "head." + name + ".")) out.push_back(nb);
    return out;
}

std::vector<std::string> Sequential::describe(const std::string& prefix) const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) out.push_back(prefix + std::to_string(i) + " " + layers_[i]->describe());
    for (const auto& [name, head] : heads_)
        for (auto& d : head.describe(prefix + "head." + name + ".")) out.push_back(d);
    return out;
}

}  // namespace qrvae
