#include "qrvae/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace qrvae::stats {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double two_sided_p(double z) { return std::erfc(std::abs(z) / std::numbers::sqrt2); }

double normal_quantile(double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::domain_error("normal_quantile needs alpha in (0, 1)");
    double lo = -40.0, hi = 40.0;
    for (int i = 0; i < 200 && hi - lo > 1e-10; ++i) {
        const double mid = 0.5 * (lo + hi);
        (normal_cdf(mid) < alpha ? lo : hi) = mid;
    }
    double x = 0.5 * (lo + hi);
    for (int i = 0; i < 3; ++i) {
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        if (pdf < 1e-300) break;
        const double step = (normal_cdf(x) - alpha) / pdf;
        if (!std::isfinite(step)) break;
        x -= step;
    }
    return x;
}

// ---- quantile -> Gaussian ---------------------------------------------------------------

GaussianFit quantile_pair_to_gaussian(const Tensor& q_low, const Tensor& q_high, double alpha_low, double alpha_high) {
    if (q_low.shape() != q_high.shape()) throw ShapeError("quantile maps differ in shape");
    if (!(alpha_low < alpha_high)) throw std::invalid_argument("alpha_low must be below alpha_high");
    const double zl = normal_quantile(alpha_low);
    const double zh = normal_quantile(alpha_high);
    GaussianFit fit{{Tensor(q_low.shape()), Tensor(q_low.shape())}, 0};
    for (std::size_t i = 0; i < q_low.size(); ++i) {
        double sigma = (q_high[i] - q_low[i]) / (zh - zl);
        if (!(sigma > 0.0)) {
            sigma = kSigmaFloor;
            ++fit.crossings;
        }
        fit.params.stddev[i] = sigma;
        fit.params.mean[i] = q_low[i] - sigma * zl;
    }
    return fit;
}

GaussianFit quantiles_to_gaussian(const Tensor& q_med, const Tensor& q_low, double alpha_low, bool unit_divisor) {
    if (q_med.shape() != q_low.shape()) throw ShapeError("quantile maps differ in shape");
    if (!(alpha_low > 0.0 && alpha_low < 0.5)) throw std::invalid_argument("alpha_low must lie in (0, 0.5)");
    const double divisor = unit_divisor ? 1.0 : -normal_quantile(alpha_low);
    GaussianFit fit{{q_med, Tensor(q_med.shape())}, 0};
    for (std::size_t i = 0; i < q_med.size(); ++i) {
        double sigma = (q_med[i] - q_low[i]) / divisor;
        if (!(sigma > 0.0)) {
            sigma = kSigmaFloor;
            ++fit.crossings;
        }
        fit.params.stddev[i] = sigma;
    }
    return fit;
}

// ---- z-scores, p-values, thresholds ------------------------------------------------------

void DetectionResult::apply_threshold(double t) {
    threshold = t;
    mask.assign(p.size(), 0);
    for (std::size_t i = 0; i < p.size(); ++i) mask[i] = p[i] <= t ? 1 : 0;
}

std::size_t DetectionResult::detections() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

DetectionResult z_and_p(const Tensor& x, const GaussianParams& g) {
    if (x.shape() != g.mean.shape() || x.shape() != g.stddev.shape())
        throw ShapeError("z_and_p: input and Gaussian maps differ in shape");
    DetectionResult r{Tensor(x.shape()), Tensor(x.shape()), -1.0, {}};
    for (std::size_t i = 0; i < x.size(); ++i) {
        r.z[i] = (x[i] - g.mean[i]) / g.stddev[i];
        r.p[i] = two_sided_p(r.z[i]);
    }
    return r;
}

BhResult bh_fdr(std::span<const double> p, double q) {
    if (p.empty()) throw std::invalid_argument("bh_fdr on empty input");
    if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("bh_fdr needs q in (0, 1)");
    std::vector<double> sorted(p.begin(), p.end());
    for (double v : sorted)
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("p-values must lie in [0, 1]");
    std::sort(sorted.begin(), sorted.end());
    const double m = double(sorted.size());
    std::size_t k_star = 0;
    for (std::size_t k = 1; k <= sorted.size(); ++k)
        if (sorted[k - 1] <= double(k) * q / m) k_star = k;
    if (k_star == 0) return {std::nextafter(sorted.front(), -1.0), 0};
    // Ties at p_(k*) are rejected too, so count by value.
    const double t = sorted[k_star - 1];
    const auto rejected = static_cast<std::size_t>(std::upper_bound(sorted.begin(), sorted.end(), t) - sorted.begin());
    return {t, rejected};
}

std::vector<std::uint8_t> interval_detect(const Tensor& x, const Tensor& q_low, const Tensor& q_high) {
    if (x.shape() != q_low.shape() || x.shape() != q_high.shape())
        throw ShapeError("interval_detect: input and quantile maps differ in shape");
    std::vector<std::uint8_t> mask(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) mask[i] = (x[i] < q_low[i] || x[i] > q_high[i]) ? 1 : 0;
    return mask;
}

// ---- density and divergence ----------------------------------------------------------------

std::vector<double> scott_bandwidths(const Tensor& samples) {
    if (samples.rank() != 2) throw ShapeError("samples must be [n, d]");
    const std::size_t n = samples.dim(0), d = samples.dim(1);
    if (n < 2) throw std::invalid_argument("kde needs at least 2 samples");
    const double factor = std::pow(double(n), -1.0 / double(d + 4));
    std::vector<double> h(d);
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += samples[i * d + j];
        mean /= double(n);
        double ss = 0.0;
        for (std::size_t i = 0; i < n; ++i) ss += (samples[i * d + j] - mean) * (samples[i * d + j] - mean);
        h[j] = std::max(1e-6, factor * std::sqrt(ss / double(n - 1)));
    }
    return h;
}

std::vector<double> gaussian_kde(const Tensor& samples, const Tensor& queries, std::optional<std::vector<double>> bw) {
    if (samples.rank() != 2 || queries.rank() != 2 || samples.dim(1) != queries.dim(1))
        throw ShapeError("kde: samples and queries must be [n, d] and [q, d]");
    const std::size_t n = samples.dim(0), d = samples.dim(1), nq = queries.dim(0);
    std::vector<double> h = bw ? *bw : scott_bandwidths(samples);
    if (h.size() != d) throw ShapeError("kde: one bandwidth per dimension");
    for (auto& v : h) v = std::max(v, 1e-6);
    double norm = 1.0;
    for (double v : h) norm *= v * std::sqrt(2.0 * std::numbers::pi);
    std::vector<double> out(nq);
    for (std::size_t q = 0; q < nq; ++q) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double e = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double u = (queries[q * d + j] - samples[i * d + j]) / h[j];
                e += u * u;
            }
            acc += std::exp(-0.5 * e);
        }
        out[q] = acc / (double(n) * norm);
    }
    return out;
}

namespace {

/// k-th smallest squared distance from `row` to rows of `set`, skipping index `self`.
double kth_sq_distance(const Tensor& set, const double* row, std::size_t d, std::size_t k, std::size_t self,
                       std::vector<double>& scratch) {
    const std::size_t n = set.dim(0);
    scratch.clear();
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        if (i == self) continue;
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double u = set[i * d + j] - row[j];
            s += u * u;
        }
        if (k == 1)
            best = std::min(best, s);
        else
            scratch.push_back(s);
    }
    if (k == 1) return best;
    std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k - 1), scratch.end());
    return scratch[k - 1];
}

}  // namespace

KlEstimate knn_kl(const Tensor& p, const Tensor& q, std::size_t k) {
    if (p.rank() != 2 || q.rank() != 2 || p.dim(1) != q.dim(1))
        throw ShapeError("knn_kl: sample sets must be [n, d] and [m, d] with equal d");
    const std::size_t n = p.dim(0), m = q.dim(0), d = p.dim(1);
    if (k == 0 || n <= k || m < k) throw std::invalid_argument("knn_kl needs n > k and m >= k");
    constexpr double floor_sq = 1e-24;  // (1e-12)^2
    KlEstimate est;
    std::vector<double> scratch;
    double acc = 0.0;
    const std::size_t none = std::numeric_limits<std::size_t>::max();
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = p.data().data() + i * d;
        double rho = kth_sq_distance(p, row, d, k, i, scratch);
        double nu = kth_sq_distance(q, row, d, k, none, scratch);
        if (rho < floor_sq) {
            rho = floor_sq;
            ++est.duplicates;
        }
        if (nu < floor_sq) {
            nu = floor_sq;
            ++est.duplicates;
        }
        acc += 0.5 * (std::log(nu) - std::log(rho));
    }
    est.value = double(d) / double(n) * acc + std::log(double(m) / double(n - 1));
    return est;
}

// ---- ROC / filtering ------------------------------------------------------------------------

double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("roc_auc: scores and labels differ in length");
    std::size_t pos = 0;
    for (auto l : labels) pos += l ? 1 : 0;
    const std::size_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) throw std::invalid_argument("roc_auc needs both classes");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Sum of mid-ranks of positives.
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double mid = 0.5 * double(i + 1 + j);
        for (std::size_t t = i; t < j; ++t)
            if (labels[order[t]]) rank_sum += mid;
        i = j;
    }
    const double np = double(pos), nn = double(neg);
    return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

std::vector<double> median_filter(std::span<const double> image, std::size_t h, std::size_t w, std::size_t window) {
    if (window % 2 == 0) throw std::invalid_argument("median_filter needs an odd window");
    if (image.size() != h * w) throw ShapeError("median_filter: image size does not match h x w");
    const auto r = static_cast<std::ptrdiff_t>(window / 2);
    std::vector<double> out(image.size()), buf;
    buf.reserve(window * window);
    const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
    for (std::ptrdiff_t y = 0; y < H; ++y)
        for (std::ptrdiff_t x = 0; x < W; ++x) {
            buf.clear();
            for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
                for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
                    const auto yy = std::clamp<std::ptrdiff_t>(y + dy, 0, H - 1);
                    const auto xx = std::clamp<std::ptrdiff_t>(x + dx, 0, W - 1);
                    buf.push_back(image[static_cast<std::size_t>(yy * W + xx)]);
                }
            auto mid = buf.begin() + static_cast<std::ptrdiff_t>(buf.size() / 2);
            std::nth_element(buf.begin(), mid, buf.end());
            out[static_cast<std::size_t>(y * W + x)] = *mid;
        }
    return out;
}

}  // namespace qrvae::stats
