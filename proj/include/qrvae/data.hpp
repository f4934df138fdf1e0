#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "qrvae/io.hpp"
#include "qrvae/tensor.hpp"

namespace qrvae {

// ---- two-moons simulation ---------------------------------------------------------

struct MoonPoint {
    double z1 = 0.0, z2 = 0.0;
};

/// Point on arc 0, (cos t, sin t), or arc 1, (1 - cos t, 0.5 - sin t).
MoonPoint moon_arc_point(int arc, double t);

/// n points, t ~ U[0, pi]; the first ceil(n/2) on arc 0, the rest on arc 1,
/// each coordinate jittered by N(0, jitter^2).
std::vector<MoonPoint> generate_two_moons(std::size_t n, std::uint64_t seed, double jitter = 0.1);

/// Per-dimension noise standard deviations of the 4-D observation map at z
/// (before any noise_scale). Throws NumericError when a radicand is negative.
std::array<double, 4> moons_noise_std(const MoonPoint& z);

/// v1 = z1 - z2 + e1 sqrt(0.03 + 0.05 (3 + z1))
/// v2 = z1^2 - z2/2 + e2 sqrt(0.03 + 0.03 |z1|)
/// v3 = z1 z2 - z1 + e3 sqrt(0.03 + 0.05 |z1|)
/// v4 = z1 + z2 + e4 sqrt(0.03 + 0.03 / (0.02 + |z1|))
/// with every noise term multiplied by noise_scale.
std::array<double, 4> moons_to_4d(const MoonPoint& z, const std::array<double, 4>& eps, double noise_scale = 1.0);

struct MoonSample {
    MoonPoint latent;
    std::array<double, 4> observed{};
    std::array<double, 4> eps{};
};

/// Two-moons latents mapped to 4-D with independent standard-normal noise per
/// dimension. Latents outside the map's domain are redrawn.
std::vector<MoonSample> generate_moon_samples(std::size_t n, std::uint64_t seed, double noise_scale = 1.0,
                                              double jitter = 0.1);

/// [n, 4] observation matrix.
Tensor moons_observed(std::span<const MoonSample> samples);

// ---- image datasets -----------------------------------------------------------------

/// Images stored flat as n x C x H x W values in [0, 1]; optional labels and
/// per-image H x W binary masks.
struct ImageDataset {
    std::size_t count = 0;
    std::size_t channels = 1, height = 0, width = 0;
    std::vector<double> pixels;
    std::vector<int> labels;
    std::vector<std::uint8_t> masks;

    std::size_t sample_size() const { return channels * height * width; }
    bool has_masks() const { return !masks.empty(); }
    /// [indices.size(), C, H, W]
    Tensor batch(std::span<const std::size_t> indices) const;
    ImageDataset subset(std::span<const std::size_t> indices) const;
    std::span<const double> image(std::size_t i) const;
    std::span<const std::uint8_t> mask(std::size_t i) const;
    void validate() const;
};

// ---- IDX files ------------------------------------------------------------------------

/// Unsigned-byte IDX array: big-endian magic 0x000008NN (NN = rank), rank
/// big-endian uint32 extents, then the raw payload.
struct IdxArray {
    std::vector<std::uint32_t> dims;
    std::vector<std::uint8_t> values;
};

IdxArray parse_idx_bytes(std::span<const std::uint8_t> bytes);
IdxArray read_idx(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_idx(const IdxArray& array);
void write_idx(const std::filesystem::path& path, const IdxArray& array);

/// Images from a rank-3 (N,H,W) or rank-4 (N,C,H,W) IDX file, scaled by 1/255.
ImageDataset parse_idx_images(std::span<const std::uint8_t> bytes);
ImageDataset load_idx_images(const std::filesystem::path& path);
std::vector<int> load_idx_labels(const std::filesystem::path& path);
/// Rounds pixels to bytes; masks, when present, are written to a separate rank-3 file.
IdxArray images_to_idx(const ImageDataset& ds);
IdxArray masks_to_idx(const ImageDataset& ds);

// ---- synthetic lesion benchmark ---------------------------------------------------------

struct LesionConfig {
    std::size_t size = 64;
    std::size_t channels = 3;
    std::uint64_t family_seed = 20210101;
    int blobs_min = 3, blobs_max = 6;
    double base_intensity = 0.1;
    double noise_std = 0.02;
    double pose_shift = 2.0;      // max translation, pixels
    double pose_scale = 0.05;     // max relative scale change
    double amplitude_jitter = 0.1;
    double lesion_intensity_min = 0.3, lesion_intensity_max = 0.5;
    double lesion_radius_min = 3.0, lesion_radius_max = 8.0;

    static LesionConfig from(const KeyValues& kv, const std::string& prefix = "lesion.");
    void write_to(KeyValues& kv, const std::string& prefix = "lesion.") const;
};

/// Smooth blob "anatomy" (one blob family shared by all images, per-image pose
/// jitter) plus pixel noise; round(rate * n) images, chosen by the seed, carry
/// one bright ellipse whose stencil is the mask.
ImageDataset synthesize_lesion_set(std::size_t n, std::uint64_t seed, double lesion_rate,
                                   const LesionConfig& config = {});

// ---- splitting ---------------------------------------------------------------------------

struct SplitIndices {
    std::vector<std::size_t> train, val, test;
};

/// Seeded permutation cut into round(n f0), round(n f1) and the remainder.
SplitIndices split(std::size_t n, std::array<double, 3> fractions, std::uint64_t seed);

/// Stateless seed derivation for per-sample generators.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace qrvae
