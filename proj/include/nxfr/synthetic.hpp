#pragma once

// Procedural stand-in for two related numeral scripts. Each class is a
// glyph archetype made of polylines in a unit box; samples are rendered
// white-on-black on a 32x32 canvas with random translation, rotation,
// scale, stroke thickness, control-point jitter and salt noise.
//
// Script A uses archetypes 0..9. Script B reuses archetypes 0..5 under a
// fixed script-level distortion (shear, aspect, point offsets) and replaces
// classes 6..9 with archetypes 10..13, so the scripts are related but not
// identical.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "nxfr/dataset.hpp"
#include "nxfr/rng.hpp"

namespace nxfr {

enum class SyntheticScript { A, B };

inline const char* to_string(SyntheticScript s) { return s == SyntheticScript::A ? "synthA" : "synthB"; }

namespace synth {

struct Point {
    double u = 0, v = 0;
};
using Polyline = std::vector<Point>;
using Glyph = std::vector<Polyline>;

inline Polyline segment(double u0, double v0, double u1, double v1) { return {{u0, v0}, {u1, v1}}; }

/// Elliptical arc, angles in degrees, v pointing down.
inline Polyline arc(double cu, double cv, double ru, double rv, double deg0, double deg1, int steps = 24) {
    Polyline p;
    for (int i = 0; i <= steps; ++i) {
        const double a = (deg0 + (deg1 - deg0) * i / steps) * std::numbers::pi / 180.0;
        p.push_back({cu + ru * std::cos(a), cv + rv * std::sin(a)});
    }
    return p;
}

inline std::vector<Glyph> base_archetypes() {
    return {
        {arc(0.5, 0.5, 0.30, 0.42, 0, 360, 32)},
        {segment(0.5, 0.1, 0.5, 0.9), segment(0.33, 0.27, 0.5, 0.1)},
        {arc(0.5, 0.32, 0.28, 0.22, 180, 390), segment(0.74, 0.43, 0.2, 0.9), segment(0.2, 0.9, 0.82, 0.9)},
        {arc(0.5, 0.3, 0.25, 0.2, 200, 450), arc(0.5, 0.7, 0.28, 0.2, 270, 520)},
        {segment(0.6, 0.1, 0.15, 0.65), segment(0.15, 0.65, 0.85, 0.65), segment(0.62, 0.3, 0.62, 0.92)},
        {segment(0.75, 0.1, 0.3, 0.1), segment(0.3, 0.1, 0.28, 0.45), arc(0.5, 0.65, 0.27, 0.25, 220, 480)},
        {arc(0.62, 0.55, 0.36, 0.43, 180, 290), arc(0.5, 0.68, 0.24, 0.22, 0, 360)},
        {segment(0.2, 0.12, 0.8, 0.12), segment(0.8, 0.12, 0.4, 0.9)},
        {arc(0.5, 0.3, 0.22, 0.19, 0, 360), arc(0.5, 0.7, 0.26, 0.21, 0, 360)},
        {arc(0.5, 0.32, 0.24, 0.21, 0, 360), segment(0.74, 0.32, 0.66, 0.9)},
        {segment(0.2, 0.15, 0.8, 0.85), segment(0.8, 0.15, 0.2, 0.85)},
        {Polyline{{0.5, 0.1}, {0.85, 0.85}, {0.15, 0.85}, {0.5, 0.1}}},
        {segment(0.15, 0.2, 0.85, 0.2), segment(0.35, 0.2, 0.3, 0.88), segment(0.65, 0.2, 0.7, 0.88)},
        {arc(0.5, 0.55, 0.3, 0.33, 0, 180), segment(0.2, 0.1, 0.2, 0.55), segment(0.8, 0.1, 0.8, 0.55)},
    };
}

inline constexpr std::size_t kSharedArchetypes = 6;
inline constexpr std::uint64_t kScriptBDistortionSeed = 0x5c417b0bULL;

/// The ten class glyphs of a script. Independent of any sampling seed.
inline std::vector<Glyph> script_glyphs(SyntheticScript script) {
    const auto base = base_archetypes();
    if (script == SyntheticScript::A) {
        return {base.begin(), base.begin() + 10};
    }
    std::vector<Glyph> out;
    Rng rng(kScriptBDistortionSeed);
    for (std::size_t c = 0; c < kSharedArchetypes; ++c) {
        const double shear = rng.uniform(-0.2, 0.2);
        const double aspect = rng.uniform(0.85, 1.15);
        Glyph g = base[c];
        for (auto& line : g) {
            for (auto& p : line) {
                const double du = p.u - 0.5, dv = p.v - 0.5;
                p.u = 0.5 + aspect * du + shear * dv + 0.025 * rng.normal();
                p.v = 0.5 + dv + 0.025 * rng.normal();
            }
        }
        out.push_back(std::move(g));
    }
    for (std::size_t c = 10; c < 14; ++c) {
        out.push_back(base[c]);
    }
    return out;
}

inline double distance_to_segment(double x, double y, const Point& a, const Point& b) {
    const double dx = b.u - a.u, dy = b.v - a.v;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((x - a.u) * dx + (y - a.v) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double px = a.u + t * dx - x, py = a.v + t * dy - y;
    return std::sqrt(px * px + py * py);
}

/// Knobs of the per-sample variation.
struct Variation {
    double glyph_box_px = 20.0;
    double max_shift_px = 2.0;
    double max_rotation_deg = 10.0;
    double scale_jitter = 0.08;
    double thickness_min_px = 1.2;
    double thickness_max_px = 2.4;
    double point_jitter = 0.03;  ///< std-dev in glyph units
    double salt_probability = 0.01;
};

/// Renders one sample into `out` (32*32 floats, row-major).
inline void render(const Glyph& glyph, Rng& rng, const Variation& var, float* out) {
    const double scale = var.glyph_box_px * (1.0 + rng.uniform(-var.scale_jitter, var.scale_jitter));
    const double theta = rng.uniform(-var.max_rotation_deg, var.max_rotation_deg) * std::numbers::pi / 180.0;
    const double cx = kImageSize / 2.0 + rng.uniform(-var.max_shift_px, var.max_shift_px);
    const double cy = kImageSize / 2.0 + rng.uniform(-var.max_shift_px, var.max_shift_px);
    const double half_thickness = 0.5 * rng.uniform(var.thickness_min_px, var.thickness_max_px);
    const double c = std::cos(theta), s = std::sin(theta);

    // Jittered control points mapped to pixel space.
    std::vector<Polyline> lines;
    for (const auto& line : glyph) {
        Polyline mapped;
        for (const auto& p : line) {
            const double u = (p.u + var.point_jitter * rng.normal() - 0.5) * scale;
            const double v = (p.v + var.point_jitter * rng.normal() - 0.5) * scale;
            mapped.push_back({cx + c * u - s * v, cy + s * u + c * v});
        }
        lines.push_back(std::move(mapped));
    }
    for (std::size_t y = 0; y < kImageSize; ++y) {
        for (std::size_t x = 0; x < kImageSize; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            double d = 1e9;
            for (const auto& line : lines) {
                for (std::size_t k = 1; k < line.size(); ++k) {
                    d = std::min(d, distance_to_segment(px, py, line[k - 1], line[k]));
                }
            }
            double ink = std::clamp(half_thickness + 0.5 - d, 0.0, 1.0);
            if (rng.uniform() < var.salt_probability) {
                ink = std::max(ink, rng.uniform(0.5, 1.0));
            }
            out[y * kImageSize + x] = static_cast<float>(ink);
        }
    }
}

} // namespace synth

/// `samples_per_class` images of each of the ten classes of `script`, class
/// by class. A pure function of its arguments.
inline LabeledDataset generate_synthetic(SyntheticScript script, std::size_t samples_per_class, std::uint64_t seed,
                                         const synth::Variation& variation = {}) {
    if (samples_per_class == 0) {
        throw ConfigError("synthetic: samples_per_class must be at least 1");
    }
    const auto glyphs = synth::script_glyphs(script);
    const std::size_t n = samples_per_class * kNumClasses;
    const std::size_t stride = kImageSize * kImageSize;
    LabeledDataset d;
    d.name = to_string(script);
    d.images = Tensor<float>(Shape{n, 1, kImageSize, kImageSize});
    d.labels.resize(n);
    d.partition.assign(n, Partition::Train);
    Rng rng(seed);
    for (std::size_t cls = 0; cls < kNumClasses; ++cls) {
        for (std::size_t k = 0; k < samples_per_class; ++k) {
            const std::size_t i = cls * samples_per_class + k;
            d.labels[i] = static_cast<std::uint8_t>(cls);
            synth::render(glyphs[cls], rng, variation, d.images.data() + i * stride);
        }
    }
    return d;
}

} // namespace nxfr
