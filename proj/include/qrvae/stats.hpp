#pragma once

// Statistical machinery for turning quantile or mean/variance decoder outputs
// into calibrated per-pixel evidence.
//
// p-values are two-sided. The Benjamini-Hochberg step-up procedure assumes
// independent tests; positively correlated neighbouring pixels make it
// conservative in the FDR sense, which is accepted here.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "qrvae/tensor.hpp"

namespace qrvae::stats {

/// Standard normal CDF.
double normal_cdf(double x);
/// Inverse of normal_cdf by bisection refined with Newton steps; alpha in (0, 1).
double normal_quantile(double alpha);
/// 2 (1 - Phi(|z|)).
double two_sided_p(double z);

struct GaussianParams {
    Tensor mean;
    Tensor stddev;  // > 0 everywhere
};

struct GaussianFit {
    GaussianParams params;
    std::size_t crossings = 0;  // entries whose raw sigma was <= 0 and got floored
    double crossing_rate() const { return double(crossings) / double(params.stddev.size()); }
};

inline constexpr double kSigmaFloor = 1e-4;

/// Gaussian matched to the alpha_low and alpha_high quantiles:
///   sigma = (q_high - q_low) / (Phi^-1(alpha_high) - Phi^-1(alpha_low)),
///   mu    = q_low - sigma Phi^-1(alpha_low).
/// Non-positive sigma is floored at kSigmaFloor and counted as a crossing.
GaussianFit quantile_pair_to_gaussian(const Tensor& q_low, const Tensor& q_high, double alpha_low, double alpha_high);

/// Median/low-quantile special case: mu = q_med, sigma = (q_med - q_low) / -Phi^-1(alpha_low).
/// `unit_divisor` replaces the divisor by 1, i.e. treats the low quantile as
/// exactly one standard deviation below the median.
GaussianFit quantiles_to_gaussian(const Tensor& q_med, const Tensor& q_low, double alpha_low, bool unit_divisor = false);

struct DetectionResult {
    Tensor z;
    Tensor p;
    double threshold = -1.0;          // p-value cutoff; < 0 until set
    std::vector<std::uint8_t> mask;   // p <= threshold

    void apply_threshold(double t);
    std::size_t detections() const;
};

/// z = (x - mu) / sigma and two-sided p-values; threshold left unset.
DetectionResult z_and_p(const Tensor& x, const GaussianParams& params);

struct BhResult {
    double threshold = 0.0;  // reject p <= threshold; below min(p) when nothing is rejected
    std::size_t rejections = 0;
};

/// Benjamini-Hochberg: k* = max{k : p_(k) <= k q / m}, threshold = p_(k*).
BhResult bh_fdr(std::span<const double> p, double q);

/// (x < q_low) or (x > q_high), elementwise.
std::vector<std::uint8_t> interval_detect(const Tensor& x, const Tensor& q_low, const Tensor& q_high);

/// Scott's rule per dimension: n^(-1/(d+4)) * sample std, floored at 1e-6.
std::vector<double> scott_bandwidths(const Tensor& samples);

/// Product-Gaussian kernel density of `samples` [n, d] at `queries` [q, d].
std::vector<double> gaussian_kde(const Tensor& samples, const Tensor& queries,
                                 std::optional<std::vector<double>> bandwidths = std::nullopt);

struct KlEstimate {
    double value = 0.0;         // nats
    std::size_t duplicates = 0; // zero neighbour distances that were floored
};

/// k-NN divergence estimate of KL(P || Q) from samples p [n, d] and q [m, d]:
///   (d / n) sum_i log(nu_k(i) / rho_k(i)) + log(m / (n - 1))
/// with rho_k the k-th neighbour distance inside p (self excluded) and nu_k
/// the k-th neighbour distance into q. Euclidean, brute force.
KlEstimate knn_kl(const Tensor& p, const Tensor& q, std::size_t k = 1);

/// Mann-Whitney AUC: P(score+ > score-) + P(equal) / 2.
double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Odd-window median with replicate padding at the borders.
std::vector<double> median_filter(std::span<const double> image, std::size_t height, std::size_t width,
                                  std::size_t window = 7);

}  // namespace qrvae::stats
