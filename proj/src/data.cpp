#include "qrvae/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace qrvae {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    // splitmix64 finalizer over seed ^ golden-ratio-weighted index
    std::uint64_t z = seed ^ (index * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

namespace {

std::vector<std::size_t> permutation(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
    return idx;
}

}  // namespace

// ---- moons --------------------------------------------------------------------------

MoonPoint moon_arc_point(int arc, double t) {
    if (arc == 0) return {std::cos(t), std::sin(t)};
    return {1.0 - std::cos(t), 0.5 - std::sin(t)};
}

std::vector<MoonPoint> generate_two_moons(std::size_t n, std::uint64_t seed, double jitter) {
    if (n == 0) throw std::invalid_argument("generate_two_moons needs n >= 1");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
    std::normal_distribution<double> noise(0.0, 1.0);
    const std::size_t upper = n - n / 2;
    std::vector<MoonPoint> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        MoonPoint p = moon_arc_point(i < upper ? 0 : 1, angle(rng));
        if (jitter > 0.0) {
            p.z1 += jitter * noise(rng);
            p.z2 += jitter * noise(rng);
        }
        out.push_back(p);
    }
    return out;
}

std::array<double, 4> moons_noise_std(const MoonPoint& z) {
    const double a = std::abs(z.z1);
    const std::array<double, 4> radicand{0.03 + 0.05 * (3.0 + z.z1), 0.03 + 0.03 * a, 0.03 + 0.05 * a,
                                         0.03 + 0.03 / (0.02 + a)};
    std::array<double, 4> out{};
    for (int d = 0; d < 4; ++d) {
        if (radicand[d] < 0.0)
            throw NumericError("moons noise radicand negative at z1 = " + std::to_string(z.z1));
        out[d] = std::sqrt(radicand[d]);
    }
    return out;
}

std::array<double, 4> moons_to_4d(const MoonPoint& z, const std::array<double, 4>& eps, double noise_scale) {
    const auto s = moons_noise_std(z);
    return {z.z1 - z.z2 + noise_scale * eps[0] * s[0], z.z1 * z.z1 - 0.5 * z.z2 + noise_scale * eps[1] * s[1],
            z.z1 * z.z2 - z.z1 + noise_scale * eps[2] * s[2], z.z1 + z.z2 + noise_scale * eps[3] * s[3]};
}

std::vector<MoonSample> generate_moon_samples(std::size_t n, std::uint64_t seed, double noise_scale, double jitter) {
    auto latents = generate_two_moons(n, seed, jitter);
    std::mt19937_64 rng(derive_seed(seed, 0xE5));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<MoonSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        MoonSample s;
        s.latent = latents[i];
        // Redraw rejected latents from a per-sample stream.
        for (std::uint64_t attempt = 1; s.latent.z1 < -3.6; ++attempt) {
            auto redo = generate_two_moons(1, derive_seed(seed, i * 1000 + attempt), jitter);
            s.latent = redo[0];
        }
        for (auto& e : s.eps) e = normal(rng);
        s.observed = moons_to_4d(s.latent, s.eps, noise_scale);
        out.push_back(s);
    }
    return out;
}

Tensor moons_observed(std::span<const MoonSample> samples) {
    if (samples.empty()) throw ShapeError("no moon samples");
    Tensor t(Shape{samples.size(), 4});
    for (std::size_t i = 0; i < samples.size(); ++i)
        for (std::size_t d = 0; d < 4; ++d) t[i * 4 + d] = samples[i].observed[d];
    return t;
}

// ---- ImageDataset -----------------------------------------------------------------------

Tensor ImageDataset::batch(std::span<const std::size_t> indices) const {
    if (indices.empty()) throw ShapeError("empty batch");
    const std::size_t s = sample_size();
    Tensor t(Shape{indices.size(), channels, height, width});
    for (std::size_t b = 0; b < indices.size(); ++b) {
        if (indices[b] >= count) throw std::out_of_range("image index out of range");
        std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(indices[b] * s), s,
                    t.data().begin() + static_cast<std::ptrdiff_t>(b * s));
    }
    return t;
}

ImageDataset ImageDataset::subset(std::span<const std::size_t> indices) const {
    ImageDataset out;
    out.count = indices.size();
    out.channels = channels;
    out.height = height;
    out.width = width;
    const std::size_t s = sample_size();
    const std::size_t m = height * width;
    for (auto i : indices) {
        if (i >= count) throw std::out_of_range("image index out of range");
        out.pixels.insert(out.pixels.end(), pixels.begin() + static_cast<std::ptrdiff_t>(i * s),
                          pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * s));
        if (!labels.empty()) out.labels.push_back(labels[i]);
        if (!masks.empty())
            out.masks.insert(out.masks.end(), masks.begin() + static_cast<std::ptrdiff_t>(i * m),
                             masks.begin() + static_cast<std::ptrdiff_t>((i + 1) * m));
    }
    return out;
}

std::span<const double> ImageDataset::image(std::size_t i) const {
    if (i >= count) throw std::out_of_range("image index out of range");
    return std::span<const double>(pixels).subspan(i * sample_size(), sample_size());
}

std::span<const std::uint8_t> ImageDataset::mask(std::size_t i) const {
    if (i >= count || masks.empty()) throw std::out_of_range("mask index out of range");
    return std::span<const std::uint8_t>(masks).subspan(i * height * width, height * width);
}

void ImageDataset::validate() const {
    if (pixels.size() != count * sample_size()) throw ShapeError("image buffer size does not match count");
    if (!labels.empty() && labels.size() != count) throw ShapeError("label count does not match image count");
    if (!masks.empty() && masks.size() != count * height * width)
        throw ShapeError("mask buffer size does not match image count");
    for (double p : pixels)
        if (!(p >= 0.0 && p <= 1.0)) throw NumericError("pixel outside [0, 1]");
}

// ---- IDX ------------------------------------------------------------------------------------

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
    return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) | (std::uint32_t(b[at + 2]) << 8) |
           std::uint32_t(b[at + 3]);
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(std::uint8_t(v >> 24));
    out.push_back(std::uint8_t(v >> 16));
    out.push_back(std::uint8_t(v >> 8));
    out.push_back(std::uint8_t(v));
}

}  // namespace

IdxArray parse_idx_bytes(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4) throw InputError("IDX: file shorter than the 4-byte magic");
    if (bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08)
        throw InputError("IDX: bad magic (only unsigned-byte arrays are supported)");
    const std::size_t rank = bytes[3];
    if (rank == 0) throw InputError("IDX: bad magic (rank 0)");
    const std::size_t header = 4 + 4 * rank;
    if (bytes.size() < header)
        throw InputError("IDX: truncated header: expected " + std::to_string(header) + " bytes, got " +
                         std::to_string(bytes.size()));
    IdxArray out;
    std::size_t payload = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        const std::uint32_t d = read_be32(bytes, 4 + 4 * i);
        out.dims.push_back(d);
        if (__builtin_mul_overflow(payload, std::size_t(d), &payload)) throw InputError("IDX: dimension overflow");
    }
    if (bytes.size() - header < payload)
        throw InputError("IDX: truncated payload: expected " + std::to_string(payload) + " bytes, got " +
                         std::to_string(bytes.size() - header));
    if (bytes.size() - header > payload)
        throw InputError("IDX: trailing data: expected " + std::to_string(payload) + " payload bytes, got " +
                         std::to_string(bytes.size() - header));
    out.values.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
    return out;
}

IdxArray read_idx(const std::filesystem::path& path) { return parse_idx_bytes(read_bytes(path)); }

std::vector<std::uint8_t> serialize_idx(const IdxArray& array) {
    if (array.dims.empty() || array.dims.size() > 255) throw std::invalid_argument("IDX rank must be 1..255");
    std::size_t payload = 1;
    for (auto d : array.dims) payload *= d;
    if (payload != array.values.size()) throw std::invalid_argument("IDX extents do not match payload");
    std::vector<std::uint8_t> out{0, 0, 0x08, std::uint8_t(array.dims.size())};
    for (auto d : array.dims) put_be32(out, d);
    out.insert(out.end(), array.values.begin(), array.values.end());
    return out;
}

void write_idx(const std::filesystem::path& path, const IdxArray& array) { write_bytes(path, serialize_idx(array)); }

ImageDataset parse_idx_images(std::span<const std::uint8_t> bytes) {
    IdxArray a = parse_idx_bytes(bytes);
    ImageDataset ds;
    if (a.dims.size() == 3) {
        ds.count = a.dims[0];
        ds.channels = 1;
        ds.height = a.dims[1];
        ds.width = a.dims[2];
    } else if (a.dims.size() == 4) {
        ds.count = a.dims[0];
        ds.channels = a.dims[1];
        ds.height = a.dims[2];
        ds.width = a.dims[3];
    } else {
        throw InputError("IDX: image files need rank 3 or 4, got rank " + std::to_string(a.dims.size()));
    }
    ds.pixels.resize(a.values.size());
    for (std::size_t i = 0; i < a.values.size(); ++i) ds.pixels[i] = a.values[i] / 255.0;
    return ds;
}

ImageDataset load_idx_images(const std::filesystem::path& path) { return parse_idx_images(read_bytes(path)); }

std::vector<int> load_idx_labels(const std::filesystem::path& path) {
    IdxArray a = read_idx(path);
    if (a.dims.size() != 1) throw InputError("IDX: label files need rank 1");
    return std::vector<int>(a.values.begin(), a.values.end());
}

IdxArray images_to_idx(const ImageDataset& ds) {
    IdxArray a;
    a.dims = {std::uint32_t(ds.count), std::uint32_t(ds.channels), std::uint32_t(ds.height), std::uint32_t(ds.width)};
    if (ds.channels == 1) a.dims.erase(a.dims.begin() + 1);
    a.values.resize(ds.pixels.size());
    for (std::size_t i = 0; i < ds.pixels.size(); ++i)
        a.values[i] = std::uint8_t(std::lround(std::clamp(ds.pixels[i], 0.0, 1.0) * 255.0));
    return a;
}

IdxArray masks_to_idx(const ImageDataset& ds) {
    if (!ds.has_masks()) throw std::invalid_argument("dataset has no masks");
    IdxArray a;
    a.dims = {std::uint32_t(ds.count), std::uint32_t(ds.height), std::uint32_t(ds.width)};
    a.values = ds.masks;
    return a;
}

// ---- lesion benchmark ----------------------------------------------------------------------

LesionConfig LesionConfig::from(const KeyValues& kv, const std::string& p) {
    LesionConfig c;
    c.size = static_cast<std::size_t>(kv.get_int(p + "size", static_cast<long long>(c.size)));
    c.channels = static_cast<std::size_t>(kv.get_int(p + "channels", static_cast<long long>(c.channels)));
    c.family_seed = static_cast<std::uint64_t>(kv.get_int(p + "family_seed", static_cast<long long>(c.family_seed)));
    c.blobs_min = static_cast<int>(kv.get_int(p + "blobs_min", c.blobs_min));
    c.blobs_max = static_cast<int>(kv.get_int(p + "blobs_max", c.blobs_max));
    c.base_intensity = kv.get_double(p + "base_intensity", c.base_intensity);
    c.noise_std = kv.get_double(p + "noise_std", c.noise_std);
    c.pose_shift = kv.get_double(p + "pose_shift", c.pose_shift);
    c.pose_scale = kv.get_double(p + "pose_scale", c.pose_scale);
    c.amplitude_jitter = kv.get_double(p + "amplitude_jitter", c.amplitude_jitter);
    c.lesion_intensity_min = kv.get_double(p + "intensity_min", c.lesion_intensity_min);
    c.lesion_intensity_max = kv.get_double(p + "intensity_max", c.lesion_intensity_max);
    c.lesion_radius_min = kv.get_double(p + "radius_min", c.lesion_radius_min);
    c.lesion_radius_max = kv.get_double(p + "radius_max", c.lesion_radius_max);
    if (c.blobs_min < 1 || c.blobs_max < c.blobs_min) throw InputError("lesion: bad blob count range");
    if (c.size < 4 * c.lesion_radius_max) throw InputError("lesion: canvas too small for lesion radius");
    return c;
}

void LesionConfig::write_to(KeyValues& kv, const std::string& p) const {
    kv.set(p + "size", std::to_string(size));
    kv.set(p + "channels", std::to_string(channels));
    kv.set(p + "family_seed", std::to_string(family_seed));
    kv.set(p + "blobs_min", std::to_string(blobs_min));
    kv.set(p + "blobs_max", std::to_string(blobs_max));
    kv.set(p + "base_intensity", format_double(base_intensity));
    kv.set(p + "noise_std", format_double(noise_std));
    kv.set(p + "pose_shift", format_double(pose_shift));
    kv.set(p + "pose_scale", format_double(pose_scale));
    kv.set(p + "amplitude_jitter", format_double(amplitude_jitter));
    kv.set(p + "intensity_min", format_double(lesion_intensity_min));
    kv.set(p + "intensity_max", format_double(lesion_intensity_max));
    kv.set(p + "radius_min", format_double(lesion_radius_min));
    kv.set(p + "radius_max", format_double(lesion_radius_max));
}

namespace {

struct Blob {
    double cx, cy, sx, sy, angle;
    std::vector<double> amplitude;  // per channel
};

std::vector<Blob> blob_family(const LesionConfig& c) {
    std::mt19937_64 rng(c.family_seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int k = c.blobs_min + static_cast<int>(rng() % std::uint64_t(c.blobs_max - c.blobs_min + 1));
    const double s = double(c.size);
    std::vector<Blob> blobs;
    for (int j = 0; j < k; ++j) {
        Blob b;
        b.cx = s / 2 + (u(rng) - 0.5) * s / 4;
        b.cy = s / 2 + (u(rng) - 0.5) * s / 4;
        b.sx = s / 10 + u(rng) * s / 10;
        b.sy = s / 10 + u(rng) * s / 10;
        b.angle = u(rng) * std::numbers::pi;
        for (std::size_t ch = 0; ch < c.channels; ++ch) b.amplitude.push_back(0.08 + 0.12 * u(rng));
        blobs.push_back(std::move(b));
    }
    return blobs;
}

void render_anatomy(const std::vector<Blob>& blobs, const LesionConfig& c, double dx, double dy, double scale,
                    std::span<const double> amp_mult, double* out);

/// Rescale the family so each channel peaks 0.4 above the base intensity.
void normalize_family(std::vector<Blob>& blobs, const LesionConfig& c) {
    std::vector<double> img(c.channels * c.size * c.size);
    std::vector<double> ones(blobs.size(), 1.0);
    render_anatomy(blobs, c, 0.0, 0.0, 1.0, ones, img.data());
    const std::size_t m = c.size * c.size;
    for (std::size_t ch = 0; ch < c.channels; ++ch) {
        const double peak = *std::max_element(img.begin() + static_cast<std::ptrdiff_t>(ch * m),
                                              img.begin() + static_cast<std::ptrdiff_t>((ch + 1) * m)) -
                            c.base_intensity;
        for (auto& b : blobs) b.amplitude[ch] *= 0.4 / peak;
    }
}

void render_anatomy(const std::vector<Blob>& blobs, const LesionConfig& c, double dx, double dy, double scale,
                    std::span<const double> amp_mult, double* out) {
    const std::size_t n = c.size;
    for (std::size_t ch = 0; ch < c.channels; ++ch)
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                double v = c.base_intensity;
                for (std::size_t j = 0; j < blobs.size(); ++j) {
                    const Blob& b = blobs[j];
                    const double px = double(x) - (b.cx + dx);
                    const double py = double(y) - (b.cy + dy);
                    const double ca = std::cos(b.angle), sa = std::sin(b.angle);
                    const double u = (px * ca + py * sa) / (scale * b.sx);
                    const double w = (-px * sa + py * ca) / (scale * b.sy);
                    v += b.amplitude[ch] * amp_mult[j] * std::exp(-0.5 * (u * u + w * w));
                }
                out[(ch * n + y) * n + x] = v;
            }
}

}  // namespace

ImageDataset synthesize_lesion_set(std::size_t n, std::uint64_t seed, double lesion_rate, const LesionConfig& c) {
    if (!(lesion_rate >= 0.0 && lesion_rate <= 1.0)) throw std::invalid_argument("lesion rate must lie in [0, 1]");
    auto blobs = blob_family(c);
    normalize_family(blobs, c);
    ImageDataset ds;
    ds.count = n;
    ds.channels = c.channels;
    ds.height = ds.width = c.size;
    ds.pixels.assign(n * ds.sample_size(), 0.0);
    ds.masks.assign(n * c.size * c.size, 0);

    std::vector<std::uint8_t> has_lesion(n, 0);
    {
        std::mt19937_64 pick(derive_seed(seed, 0x1E5));
        const auto order = permutation(n, pick);
        const auto k = static_cast<std::size_t>(std::llround(lesion_rate * double(n)));
        for (std::size_t i = 0; i < k; ++i) has_lesion[order[i]] = 1;
    }

    const std::size_t m = c.size * c.size;
    for (std::size_t i = 0; i < n; ++i) {
        std::mt19937_64 rng(derive_seed(seed, i));
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::normal_distribution<double> normal(0.0, 1.0);
        const double dx = (2 * u(rng) - 1) * c.pose_shift;
        const double dy = (2 * u(rng) - 1) * c.pose_shift;
        const double scale = 1.0 + (2 * u(rng) - 1) * c.pose_scale;
        std::vector<double> amp(blobs.size());
        for (auto& a : amp) a = 1.0 + (2 * u(rng) - 1) * c.amplitude_jitter;
        double* img = ds.pixels.data() + i * ds.sample_size();
        render_anatomy(blobs, c, dx, dy, scale, amp, img);

        std::uint8_t* mask = ds.masks.data() + i * m;
        if (has_lesion[i]) {
            // Centre on an integer pixel inside the anatomy, clear of the border.
            const auto margin = static_cast<std::size_t>(std::ceil(c.lesion_radius_max)) + 1;
            std::vector<std::size_t> candidates;
            for (std::size_t y = margin; y + margin < c.size; ++y)
                for (std::size_t x = margin; x + margin < c.size; ++x)
                    if (img[y * c.size + x] - c.base_intensity > 0.15) candidates.push_back(y * c.size + x);
            const std::size_t centre = candidates.empty() ? (c.size / 2) * c.size + c.size / 2
                                                          : candidates[rng() % candidates.size()];
            const double cy = double(centre / c.size), cx = double(centre % c.size);
            const double ra = c.lesion_radius_min + u(rng) * (c.lesion_radius_max - c.lesion_radius_min);
            const double rb = c.lesion_radius_min + u(rng) * (c.lesion_radius_max - c.lesion_radius_min);
            const double theta = u(rng) * std::numbers::pi;
            const double intensity =
                c.lesion_intensity_min + u(rng) * (c.lesion_intensity_max - c.lesion_intensity_min);
            const double ct = std::cos(theta), st = std::sin(theta);
            for (std::size_t y = 0; y < c.size; ++y)
                for (std::size_t x = 0; x < c.size; ++x) {
                    const double px = double(x) - cx, py = double(y) - cy;
                    const double a = (px * ct + py * st) / ra;
                    const double b = (-px * st + py * ct) / rb;
                    if (a * a + b * b <= 1.0) {
                        mask[y * c.size + x] = 1;
                        for (std::size_t ch = 0; ch < c.channels; ++ch) img[ch * m + y * c.size + x] += intensity;
                    }
                }
        }
        for (std::size_t k = 0; k < ds.sample_size(); ++k)
            img[k] = std::clamp(img[k] + c.noise_std * normal(rng), 0.0, 1.0);
    }
    return ds;
}

// ---- split -------------------------------------------------------------------------------------

SplitIndices split(std::size_t n, std::array<double, 3> f, std::uint64_t seed) {
    for (double x : f)
        if (x < 0.0) throw std::invalid_argument("split fractions must be non-negative");
    if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) throw std::invalid_argument("split fractions must sum to 1");
    std::mt19937_64 rng(seed);
    const auto order = permutation(n, rng);
    const auto n_train = std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(f[0] * double(n))));
    const auto n_val = std::min<std::size_t>(n - n_train, static_cast<std::size_t>(std::llround(f[1] * double(n))));
    SplitIndices s;
    s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                 order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    return s;
}

}  // namespace qrvae
