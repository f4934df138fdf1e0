#include "oracles.hpp"

#include <algorithm>
#include <cmath>

namespace oracle {

Tensor Gen::tensor(const Shape& s, double lo, double hi) {
    Tensor t(s);
    for (auto& v : t.data()) v = uniform(lo, hi);
    return t;
}

Tensor Gen::normal_tensor(const Shape& s) {
    Tensor t(s);
    for (auto& v : t.data()) v = normal();
    return t;
}

double gradient_error(const std::function<Var(Tape&)>& loss, const std::vector<Parameter*>& params, double h) {
    for (auto* p : params) p->zero_grad();
    {
        Tape tape;
        tape.backward(loss(tape));
    }
    double worst = 0.0;
    for (auto* p : params) {
        const Tensor analytic = p->grad;
        double diff = 0.0, na = 0.0, nf = 0.0;
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double keep = p->value[i];
            p->value[i] = keep + h;
            double up, down;
            {
                Tape t;
                up = loss(t).value().item();
            }
            p->value[i] = keep - h;
            {
                Tape t;
                down = loss(t).value().item();
            }
            p->value[i] = keep;
            const double fd = (up - down) / (2.0 * h);
            diff += (analytic[i] - fd) * (analytic[i] - fd);
            na += analytic[i] * analytic[i];
            nf += fd * fd;
        }
        const double denom = std::max(std::sqrt(std::max(na, nf)), 1e-12);
        worst = std::max(worst, std::sqrt(diff) / denom);
    }
    return worst;
}

Var project(Tape& tape, const Var& out, std::uint64_t seed) {
    Gen g(seed);
    return qrvae::sum(out * tape.constant(g.tensor(out.shape(), -1.0, 1.0)));
}

long double erf_series(long double x) {
    long double term = x, total = x;
    for (int n = 1; n < 400; ++n) {
        term *= -x * x / n;
        const long double add = term / (2 * n + 1);
        total += add;
        if (std::fabs(add) < 1e-22L) break;
    }
    return total * 2.0L / std::sqrt(3.141592653589793238462643383279502884L);
}

double normal_cdf(double x) { return double(0.5L * (1.0L + erf_series(x / std::sqrt(2.0L)))); }

double normal_quantile(double alpha) {
    double lo = -8.0, hi = 8.0;
    while (hi - lo > 1e-15) {
        const double mid = 0.5 * (lo + hi);
        (normal_cdf(mid) < alpha ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

Tensor conv2d_reference(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t padding) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t o = w.dim(0), k = w.dim(2);
    const std::size_t oh = (h + 2 * padding - k) / stride + 1, ow = (wd + 2 * padding - k) / stride + 1;
    Tensor y(Shape{n, o, oh, ow});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t f = 0; f < o; ++f)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    double acc = b[f];
                    for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t ki = 0; ki < k; ++ki)
                            for (std::size_t kj = 0; kj < k; ++kj) {
                                const long yy = long(i * stride + ki) - long(padding);
                                const long xx = long(j * stride + kj) - long(padding);
                                if (yy < 0 || xx < 0 || yy >= long(h) || xx >= long(wd)) continue;
                                acc += x[((s * c + ch) * h + std::size_t(yy)) * wd + std::size_t(xx)] *
                                       w[((f * c + ch) * k + ki) * k + kj];
                            }
                    y[((s * o + f) * oh + i) * ow + j] = acc;
                }
    return y;
}

Tensor deconv2d_reference(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t padding) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t o = w.dim(1), k = w.dim(2);
    const std::size_t oh = (h - 1) * stride + k - 2 * padding, ow = (wd - 1) * stride + k - 2 * padding;
    Tensor y(Shape{n, o, oh, ow});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t f = 0; f < o; ++f)
            for (std::size_t i = 0; i < oh * ow; ++i) y[(s * o + f) * oh * ow + i] = b[f];
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < wd; ++j)
                    for (std::size_t f = 0; f < o; ++f)
                        for (std::size_t ki = 0; ki < k; ++ki)
                            for (std::size_t kj = 0; kj < k; ++kj) {
                                const long yy = long(i * stride + ki) - long(padding);
                                const long xx = long(j * stride + kj) - long(padding);
                                if (yy < 0 || xx < 0 || yy >= long(oh) || xx >= long(ow)) continue;
                                y[((s * o + f) * oh + std::size_t(yy)) * ow + std::size_t(xx)] +=
                                    x[((s * c + ch) * h + i) * wd + j] * w[((ch * o + f) * k + ki) * k + kj];
                            }
    return y;
}

}  // namespace oracle
