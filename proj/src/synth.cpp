#include "flora/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

#include "flora/errors.hpp"

namespace flora {

namespace {

constexpr std::array<const char*, 6> kShapeNames{"disk", "triangle", "stripes", "cross", "square", "ring"};
constexpr int kSupersample = 4;
constexpr double kNoiseSigma = 10.0;

struct Geometry {
    double cx = 0, cy = 0, radius = 0, angle = 0, period = 0;
};

double cross2(double ax, double ay, double bx, double by) { return ax * by - ay * bx; }

// Whether point (x, y) lies inside the shape of the given family.
bool inside(std::size_t family, const Geometry& g, double x, double y) {
    const double dx = x - g.cx, dy = y - g.cy;
    // Coordinates in the shape's rotated frame.
    const double c = std::cos(g.angle), s = std::sin(g.angle);
    const double u = c * dx + s * dy, v = -s * dx + c * dy;
    switch (family) {
        case 0:
            return dx * dx + dy * dy <= g.radius * g.radius;
        case 1: {
            std::array<double, 6> p{};
            for (int k = 0; k < 3; ++k) {
                const double a = g.angle + k * 2.0 * std::numbers::pi / 3.0;
                p[2 * k] = g.cx + g.radius * std::cos(a);
                p[2 * k + 1] = g.cy + g.radius * std::sin(a);
            }
            const double d1 = cross2(p[2] - p[0], p[3] - p[1], x - p[0], y - p[1]);
            const double d2 = cross2(p[4] - p[2], p[5] - p[3], x - p[2], y - p[3]);
            const double d3 = cross2(p[0] - p[4], p[1] - p[5], x - p[4], y - p[5]);
            const bool neg = d1 < 0 || d2 < 0 || d3 < 0;
            const bool pos = d1 > 0 || d2 > 0 || d3 > 0;
            return !(neg && pos);
        }
        case 2: {
            const double phase = std::fmod(u + 1000.0 * g.period, g.period);
            return phase < g.period / 2.0;
        }
        case 3: {
            const double arm = g.radius, half = g.radius * 0.3;
            return (std::abs(u) <= arm && std::abs(v) <= half) || (std::abs(v) <= arm && std::abs(u) <= half);
        }
        case 4: {
            const double half = g.radius * 0.8;
            return std::abs(u) <= half && std::abs(v) <= half;
        }
        case 5: {
            const double r2 = dx * dx + dy * dy;
            const double inner = g.radius * 0.55;
            return r2 <= g.radius * g.radius && r2 >= inner * inner;
        }
        default: {
            // Numbered variants: wedge of a disk with a family-specific opening angle.
            const double opening = std::numbers::pi * (0.3 + 0.15 * static_cast<double>(family % 8));
            return dx * dx + dy * dy <= g.radius * g.radius && std::abs(std::atan2(v, u)) <= opening / 2.0;
        }
    }
}

}  // namespace

std::vector<std::string> synth_class_names(std::size_t num_classes) {
    std::vector<std::string> names;
    for (std::size_t c = 0; c < num_classes; ++c) {
        names.push_back(c < kShapeNames.size() ? std::string(kShapeNames[c]) : "shape" + std::to_string(c + 1));
    }
    return names;
}

Image render_synth_image(std::size_t class_index, std::size_t side, std::uint64_t seed) {
    if (side == 0) {
        throw ShapeError("synthetic image side must be positive");
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double n = static_cast<double>(side);

    Geometry g;
    g.cx = n / 2.0 + (unit(rng) - 0.5) * 0.2 * n;
    g.cy = n / 2.0 + (unit(rng) - 0.5) * 0.2 * n;
    g.radius = (0.28 + 0.12 * unit(rng)) * n;
    g.angle = unit(rng) * 2.0 * std::numbers::pi;
    // At least ~4 px per cycle at 16 px so a stride-2 stem does not alias it away.
    g.period = std::max(4.0, n * (0.25 + 0.15 * unit(rng)));

    // Foreground/background colours far enough apart to keep the shape visible.
    std::array<double, 3> fg{}, bg{};
    for (int attempt = 0; attempt < 64; ++attempt) {
        double dist2 = 0.0;
        for (int c = 0; c < 3; ++c) {
            fg[c] = 255.0 * unit(rng);
            bg[c] = 255.0 * unit(rng);
            dist2 += (fg[c] - bg[c]) * (fg[c] - bg[c]);
        }
        if (dist2 >= 120.0 * 120.0) {
            break;
        }
    }

    std::normal_distribution<double> noise(0.0, kNoiseSigma);
    Image img(side, side);
    constexpr double samples = kSupersample * kSupersample;
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            int hits = 0;
            for (int sy = 0; sy < kSupersample; ++sy) {
                for (int sx = 0; sx < kSupersample; ++sx) {
                    const double px = static_cast<double>(x) + (sx + 0.5) / kSupersample;
                    const double py = static_cast<double>(y) + (sy + 0.5) / kSupersample;
                    hits += inside(class_index, g, px, py) ? 1 : 0;
                }
            }
            const double alpha = hits / samples;
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = bg[c] * (1.0 - alpha) + fg[c] * alpha + noise(rng);
                img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return img;
}

SynthData generate_synth(std::size_t num_classes, std::size_t per_class, std::size_t side, std::uint64_t seed) {
    if (num_classes == 0) {
        throw DataError("synthetic dataset needs at least one class");
    }
    if (per_class == 0) {
        throw DataError("synthetic dataset needs at least one image per class");
    }
    SynthData data;
    data.dataset.class_names = synth_class_names(num_classes);
    std::mt19937_64 seeder(seed);
    for (std::size_t c = 0; c < num_classes; ++c) {
        for (std::size_t i = 0; i < per_class; ++i) {
            std::ostringstream name;
            name << data.dataset.class_names[c] << '_' << std::setw(4) << std::setfill('0') << i << ".png";
            data.dataset.items.push_back({name.str(), c});
            data.images.push_back(render_synth_image(c, side, seeder()));
        }
    }
    return data;
}

SpeciesStore synth_species_store(const std::vector<std::string>& class_names) {
    std::vector<SpeciesRecord> records;
    for (std::size_t c = 0; c < class_names.size(); ++c) {
        SpeciesRecord r;
        r.scientific_name = class_names[c];
        r.common_names = {class_names[c]};
        r.type = static_cast<SpeciesType>(c % 3);
        r.conservation_status = "Not evaluated";
        r.distribution = "Synthetic";
        r.description = "Procedurally drawn " + class_names[c] + " shape.";
        r.image = class_names[c] + "_0000.png";
        records.push_back(std::move(r));
    }
    return SpeciesStore(std::move(records));
}

LabeledDataset synth_dataset(std::size_t num_classes, std::size_t per_class, std::size_t side, std::uint64_t seed,
                             const std::filesystem::path& out_dir) {
    SynthData data = generate_synth(num_classes, per_class, side, seed);
    std::filesystem::create_directories(out_dir);
    for (std::size_t i = 0; i < data.images.size(); ++i) {
        write_png(out_dir / data.dataset.items[i].image, data.images[i]);
    }
    data.dataset.root = out_dir;
    save_labels(data.dataset, out_dir / "labels.csv");
    synth_species_store(data.dataset.class_names).save(out_dir / "species.json");
    return data.dataset;
}

}  // namespace flora
