#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>

#include "slimmat/tensor.hpp"

namespace slimmat {

namespace fs = std::filesystem;

/// Raised when a write would clobber an existing non-empty directory and the
/// caller did not pass force.
struct RefusedOverwrite : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// One synthetic matting sample. All tensors live in [0,1]; the composite
/// satisfies image = alpha*fg + (1-alpha)*bg up to float32 storage rounding,
/// and alpha values are quantized to the 16-bit grid at generation time so
/// that persistence round-trips exactly.
struct CompositeSample {
    Tensor image;   // 3 x H x W
    Tensor fg;      // 3 x H x W
    Tensor bg;      // 3 x H x W
    Tensor alpha;   // 1 x H x W
    Tensor trimap;  // 1 x H x W, labels {0, 0.5, 1}
    std::uint64_t seed = 0;
    int size = 0;
};

// ---------------------------------------------------------------------------
// raster io: PFM (float32) for color data, PGM for alpha (16-bit) and trimap
// (8-bit labels)
// ---------------------------------------------------------------------------

namespace detail {

inline float to_f32(real v) { return static_cast<float>(v); }

inline void write_pfm(const Tensor& t, const fs::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    const bool color = t.c() == 3;
    if (!color && t.c() != 1) throw ShapeError("write_pfm: expected 1 or 3 channels");
    os << (color ? "PF" : "Pf") << "\n" << t.w() << " " << t.h() << "\n-1.0\n";
    // PFM scanlines run bottom-to-top
    std::vector<float> row(static_cast<std::size_t>(t.w()) * t.c());
    for (int y = t.h() - 1; y >= 0; --y) {
        std::size_t k = 0;
        for (int x = 0; x < t.w(); ++x)
            for (int c = 0; c < t.c(); ++c) row[k++] = to_f32(t.at(0, c, y, x));
        os.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("short write: " + path.string());
}

inline Tensor read_pfm(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::string magic;
    int w = 0, h = 0;
    double scale = 0.0;
    is >> magic >> w >> h >> scale;
    is.get();  // single whitespace after header
    if ((magic != "PF" && magic != "Pf") || w <= 0 || h <= 0 || scale >= 0.0)
        throw std::runtime_error("unsupported pfm: " + path.string());
    const int c = magic == "PF" ? 3 : 1;
    Tensor t(1, c, h, w);
    std::vector<float> row(static_cast<std::size_t>(w) * c);
    for (int y = h - 1; y >= 0; --y) {
        is.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(float)));
        std::size_t k = 0;
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) t.at(0, ch, y, x) = row[k++];
    }
    if (!is) throw std::runtime_error("truncated pfm: " + path.string());
    return t;
}

inline void write_pgm16(const Tensor& t, const fs::path& path) {
    if (t.c() != 1) throw ShapeError("write_pgm16: expected single channel");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "P5\n" << t.w() << " " << t.h() << "\n65535\n";
    for (int y = 0; y < t.h(); ++y)
        for (int x = 0; x < t.w(); ++x) {
            const int v = static_cast<int>(std::llround(t.at(0, 0, y, x) * 65535.0));
            const int q = std::min(65535, std::max(0, v));
            const unsigned char hi = static_cast<unsigned char>(q >> 8);
            const unsigned char lo = static_cast<unsigned char>(q & 0xFF);
            os.put(static_cast<char>(hi));
            os.put(static_cast<char>(lo));
        }
    if (!os) throw std::runtime_error("short write: " + path.string());
}

inline Tensor read_pgm16(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    is.get();
    if (magic != "P5" || maxval != 65535) throw std::runtime_error("unsupported pgm: " + path.string());
    Tensor t(1, 1, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int hi = is.get(), lo = is.get();
            t.at(0, 0, y, x) = static_cast<real>((hi << 8) | lo) / 65535.0;
        }
    if (!is) throw std::runtime_error("truncated pgm: " + path.string());
    return t;
}

// trimap labels: background 0, unknown 128, foreground 255
inline void write_trimap_pgm(const Tensor& t, const fs::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "P5\n" << t.w() << " " << t.h() << "\n255\n";
    for (int y = 0; y < t.h(); ++y)
        for (int x = 0; x < t.w(); ++x) {
            const real v = t.at(0, 0, y, x);
            os.put(v > 0.75 ? char(255) : (v > 0.25 ? char(128) : char(0)));
        }
}

inline Tensor read_trimap_pgm(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    is.get();
    if (magic != "P5" || maxval != 255) throw std::runtime_error("unsupported trimap: " + path.string());
    Tensor t(1, 1, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int v = is.get();
            t.at(0, 0, y, x) = v > 192 ? 1.0 : (v > 64 ? 0.5 : 0.0);
        }
    return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// trimap synthesis
// ---------------------------------------------------------------------------

/// Trimap by erosion: foreground = erode(alpha >= 0.999), background =
/// erode(alpha <= 0.001), remainder unknown. Square structuring element,
/// out-of-image pixels count as matching (an all-foreground image stays
/// all-foreground).
inline Tensor make_trimap(const Tensor& alpha, int kernel) {
    if (alpha.c() != 1) throw ShapeError("make_trimap: alpha must be single channel");
    if (kernel < 1 || kernel % 2 == 0)
        throw std::invalid_argument("make_trimap: kernel must be a positive odd integer");
    if (kernel > alpha.h() || kernel > alpha.w())
        throw std::invalid_argument("make_trimap: kernel larger than image");
    const int h = alpha.h(), w = alpha.w(), r = kernel / 2;

    auto erode = [&](auto candidate) {
        std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * w, 0);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                bool all = true;
                for (int dy = -r; dy <= r && all; ++dy) {
                    const int yy = y + dy;
                    if (yy < 0 || yy >= h) continue;
                    for (int dx = -r; dx <= r; ++dx) {
                        const int xx = x + dx;
                        if (xx < 0 || xx >= w) continue;
                        if (!candidate(alpha.at(0, 0, yy, xx))) {
                            all = false;
                            break;
                        }
                    }
                }
                out[static_cast<std::size_t>(y) * w + x] = all ? 1 : 0;
            }
        return out;
    };

    const auto fg = erode([](real a) { return a >= 0.999; });
    const auto bg = erode([](real a) { return a <= 0.001; });

    Tensor trimap(1, 1, h, w, 0.5);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            if (fg[i]) trimap.at(0, 0, y, x) = 1.0;
            else if (bg[i]) trimap.at(0, 0, y, x) = 0.0;
        }
    return trimap;
}

inline real unknown_fraction(const Tensor& trimap) {
    std::size_t u = 0;
    for (real v : trimap.raw()) u += (v > 0.25 && v < 0.75) ? 1 : 0;
    return static_cast<real>(u) / static_cast<real>(trimap.size());
}

// ---------------------------------------------------------------------------
// procedural sample synthesis
// ---------------------------------------------------------------------------

namespace detail {

// corner-anchored bilinear ramp plus band-limited value noise
inline Tensor smooth_field(Rng& rng, int size, int channels, real noise_amp) {
    Tensor t(1, channels, size, size);
    const int grid = 5;
    for (int c = 0; c < channels; ++c) {
        const real c00 = rng.uniform(), c01 = rng.uniform();
        const real c10 = rng.uniform(), c11 = rng.uniform();
        std::vector<real> noise(grid * grid);
        for (real& v : noise) v = rng.uniform(-noise_amp, noise_amp);
        for (int y = 0; y < size; ++y) {
            const real fy = static_cast<real>(y) / (size - 1);
            for (int x = 0; x < size; ++x) {
                const real fx = static_cast<real>(x) / (size - 1);
                real v = (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11);
                // bilinear interpolation of the coarse noise grid
                const real gx = fx * (grid - 1), gy = fy * (grid - 1);
                const int ix = std::min(grid - 2, static_cast<int>(gx));
                const int iy = std::min(grid - 2, static_cast<int>(gy));
                const real tx = gx - ix, ty = gy - iy;
                const real n = (1 - ty) * ((1 - tx) * noise[iy * grid + ix] +
                                           tx * noise[iy * grid + ix + 1]) +
                               ty * ((1 - tx) * noise[(iy + 1) * grid + ix] +
                                     tx * noise[(iy + 1) * grid + ix + 1]);
                t.at(0, c, y, x) = std::min(1.0, std::max(0.0, v + n));
            }
        }
    }
    return t;
}

inline void stamp_ellipses(Rng& rng, Tensor& alpha) {
    const int size = alpha.h();
    // the unknown band around each primitive has fixed pixel width, so the
    // primitive budget scales with the image
    const int count = 1 + static_cast<int>(rng.uniform_int(0, size / 48));
    for (int e = 0; e < count; ++e) {
        const real cx = rng.uniform(0.25, 0.75) * size;
        const real cy = rng.uniform(0.25, 0.75) * size;
        const real rx = rng.uniform(0.10, 0.28) * size;
        const real ry = rng.uniform(0.10, 0.28) * size;
        const real phi = rng.uniform(0.0, 3.14159265358979323846);
        const real edge = rng.uniform(1.5, 3.0);  // soft-edge width in pixels
        const real cphi = std::cos(phi), sphi = std::sin(phi);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const real dx = x - cx, dy = y - cy;
                const real u = (dx * cphi + dy * sphi) / rx;
                const real v = (-dx * sphi + dy * cphi) / ry;
                const real rho = std::sqrt(u * u + v * v);
                // approximate signed distance (pixels) inside the boundary
                const real d = (1.0 - rho) * std::min(rx, ry);
                const real a = std::min(1.0, std::max(0.0, d / edge));
                alpha.at(0, 0, y, x) = std::max(alpha.at(0, 0, y, x), a);
            }
    }
}

// thin quadratic-Bezier strokes with graded (sub-opaque) alpha
inline void stamp_strokes(Rng& rng, Tensor& alpha) {
    const int size = alpha.h();
    const int count = 1 + static_cast<int>(rng.uniform_int(0, 1 + size / 64));
    for (int s = 0; s < count; ++s) {
        const real x0 = rng.uniform(0.1, 0.9) * size, y0 = rng.uniform(0.1, 0.9) * size;
        const real x1 = rng.uniform(0.0, 1.0) * size, y1 = rng.uniform(0.0, 1.0) * size;
        const real x2 = rng.uniform(0.1, 0.9) * size, y2 = rng.uniform(0.1, 0.9) * size;
        const real peak = rng.uniform(0.55, 0.95);
        const real sigma = rng.uniform(0.5, 0.8);  // ~1 px wide
        const int steps = 4 * size;
        for (int i = 0; i <= steps; ++i) {
            const real t = static_cast<real>(i) / steps;
            const real omt = 1.0 - t;
            const real px = omt * omt * x0 + 2 * omt * t * x1 + t * t * x2;
            const real py = omt * omt * y0 + 2 * omt * t * y1 + t * t * y2;
            const int lo_y = std::max(0, static_cast<int>(py) - 3);
            const int hi_y = std::min(size - 1, static_cast<int>(py) + 3);
            const int lo_x = std::max(0, static_cast<int>(px) - 3);
            const int hi_x = std::min(size - 1, static_cast<int>(px) + 3);
            for (int y = lo_y; y <= hi_y; ++y)
                for (int x = lo_x; x <= hi_x; ++x) {
                    const real d2 = (x - px) * (x - px) + (y - py) * (y - py);
                    const real a = peak * std::exp(-d2 / (2 * sigma * sigma));
                    alpha.at(0, 0, y, x) = std::max(alpha.at(0, 0, y, x), a);
                }
        }
    }
}

inline void quantize_alpha_16bit(Tensor& alpha) {
    for (real& v : alpha.raw())
        v = std::llround(std::min(1.0, std::max(0.0, v)) * 65535.0) / 65535.0;
}

inline void round_to_f32(Tensor& t) {
    for (real& v : t.raw()) v = static_cast<real>(static_cast<float>(v));
}

}  // namespace detail

constexpr int kTrimapKernel = 11;  // nearest odd to the reference dilation size 10
constexpr int kMinSampleSize = 32;

/// Deterministic procedural composite: soft-edged ellipse union plus thin
/// curved strokes over a smooth noisy background. Resamples (with a derived
/// sub-seed) until the trimap's unknown fraction lands in [2%, 60%].
inline CompositeSample synth_sample(std::uint64_t seed, int size) {
    if (size < kMinSampleSize)
        throw std::invalid_argument("synth_sample: size must be >= " +
                                    std::to_string(kMinSampleSize));
    for (std::uint64_t attempt = 0;; ++attempt) {
        if (attempt > 64)
            throw InvariantViolation("synth_sample: could not reach a usable unknown fraction");
        Rng rng(mix_seed(seed, 0xDA7A0000 + attempt));

        CompositeSample s;
        s.seed = seed;
        s.size = size;
        s.bg = detail::smooth_field(rng, size, 3, 0.10);
        s.fg = detail::smooth_field(rng, size, 3, 0.06);
        s.alpha = Tensor(1, 1, size, size);
        detail::stamp_ellipses(rng, s.alpha);
        detail::stamp_strokes(rng, s.alpha);
        detail::quantize_alpha_16bit(s.alpha);
        detail::round_to_f32(s.fg);
        detail::round_to_f32(s.bg);

        s.trimap = make_trimap(s.alpha, kTrimapKernel);
        const real uf = unknown_fraction(s.trimap);
        if (uf < 0.02 || uf > 0.60) continue;

        s.image = Tensor(1, 3, size, size);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const real a = s.alpha.at(0, 0, y, x);
                    s.image.at(0, c, y, x) =
                        a * s.fg.at(0, c, y, x) + (1.0 - a) * s.bg.at(0, c, y, x);
                }
        detail::round_to_f32(s.image);
        return s;
    }
}

// ---------------------------------------------------------------------------
// dataset persistence
// ---------------------------------------------------------------------------

inline void save_sample(const CompositeSample& s, const fs::path& dir) {
    fs::create_directories(dir);
    detail::write_pfm(s.image, dir / "image.pfm");
    detail::write_pfm(s.fg, dir / "fg.pfm");
    detail::write_pfm(s.bg, dir / "bg.pfm");
    detail::write_pgm16(s.alpha, dir / "alpha.pgm");
    detail::write_trimap_pgm(s.trimap, dir / "trimap.pgm");
}

inline CompositeSample load_sample(const fs::path& dir) {
    CompositeSample s;
    s.image = detail::read_pfm(dir / "image.pfm");
    s.fg = detail::read_pfm(dir / "fg.pfm");
    s.bg = detail::read_pfm(dir / "bg.pfm");
    s.alpha = detail::read_pgm16(dir / "alpha.pgm");
    s.trimap = detail::read_trimap_pgm(dir / "trimap.pgm");
    s.size = s.alpha.h();
    return s;
}

struct ManifestRow {
    std::string id;
    std::string split;
    std::uint64_t seed = 0;
    int size = 0;
};

/// Writes `<root>/<split>/<id>/{image,fg,bg,alpha,trimap}` plus manifest.csv.
/// Train and test samples draw from disjoint derived-seed ranges.
inline fs::path generate_dataset(const fs::path& root, int n_train, int n_test, int size,
                                 std::uint64_t seed, bool force = false) {
    if (n_train < 0 || n_test < 0) throw std::invalid_argument("generate_dataset: negative count");
    if (size < kMinSampleSize)
        throw std::invalid_argument("generate_dataset: size must be >= " +
                                    std::to_string(kMinSampleSize));
    if (fs::exists(root) && !fs::is_empty(root)) {
        if (!force)
            throw RefusedOverwrite("dataset directory exists and is not empty: " + root.string() +
                                   " (use force to overwrite)");
        fs::remove_all(root);
    }
    fs::create_directories(root);

    std::vector<ManifestRow> manifest;
    auto emit = [&](const std::string& split, int index, std::uint64_t sample_seed) {
        char id[16];
        std::snprintf(id, sizeof(id), "%05d", index);
        const CompositeSample s = synth_sample(sample_seed, size);
        save_sample(s, root / split / id);
        manifest.push_back({id, split, sample_seed, size});
    };
    for (int i = 0; i < n_train; ++i) emit("train", i, mix_seed(seed, static_cast<std::uint64_t>(i)));
    for (int i = 0; i < n_test; ++i)
        emit("test", i, mix_seed(seed, static_cast<std::uint64_t>(n_train) + i));

    const fs::path manifest_path = root / "manifest.csv";
    std::ofstream os(manifest_path);
    os << "id,split,seed,size\n";
    for (const auto& r : manifest)
        os << r.id << "," << r.split << "," << r.seed << "," << r.size << "\n";
    if (!os) throw std::runtime_error("failed to write manifest: " + manifest_path.string());
    return manifest_path;
}

inline std::vector<ManifestRow> read_manifest(const fs::path& root) {
    std::ifstream is(root / "manifest.csv");
    if (!is) throw std::runtime_error("missing manifest: " + (root / "manifest.csv").string());
    std::vector<ManifestRow> rows;
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        ManifestRow r;
        std::string seed_s, size_s;
        std::getline(ss, r.id, ',');
        std::getline(ss, r.split, ',');
        std::getline(ss, seed_s, ',');
        std::getline(ss, size_s, ',');
        r.seed = std::stoull(seed_s);
        r.size = std::stoi(size_s);
        rows.push_back(std::move(r));
    }
    return rows;
}

/// In-memory training/eval view: network input (RGB + trimap), target alpha,
/// trimap for masking and metrics.
struct TrainingSample {
    Tensor image;   // 3 channels
    Tensor alpha;   // 1 channel
    Tensor trimap;  // 1 channel
};

inline std::vector<TrainingSample> load_split(const fs::path& root, const std::string& split) {
    std::vector<TrainingSample> out;
    for (const auto& row : read_manifest(root)) {
        if (row.split != split) continue;
        const fs::path dir = root / row.split / row.id;
        TrainingSample s;
        s.image = detail::read_pfm(dir / "image.pfm");
        s.alpha = detail::read_pgm16(dir / "alpha.pgm");
        s.trimap = detail::read_trimap_pgm(dir / "trimap.pgm");
        out.push_back(std::move(s));
    }
    if (out.empty()) throw std::runtime_error("no samples for split '" + split + "' under " +
                                              root.string());
    return out;
}

}  // namespace slimmat
