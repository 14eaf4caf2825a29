#include "dtmi/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "dtmi/data.hpp"
#include "dtmi/image.hpp"
#include "dtmi/rng.hpp"

namespace dtmi {

namespace fs = std::filesystem;

namespace {

struct Color {
    double r, g, b;
};

struct Shape {
    bool is_circle;
    double cx, cy;    // center, pixels
    double rx, ry;    // half-extents (circle: rx == ry)
    Color color;
    double nearness;  // in [0,1], larger = closer to camera

    bool contains(double x, double y) const {
        if (is_circle) {
            const double dx = (x - cx) / rx, dy = (y - cy) / rx;
            return dx * dx + dy * dy <= 1.0;
        }
        return std::abs(x - cx) <= rx && std::abs(y - cy) <= ry;
    }
};

Color lerp(const Color& a, const Color& b, double t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

double clamp01(double v) { return std::min(std::max(v, 0.0), 1.0); }

// Perturb a palette sample by at most +-10% per channel.
Color camouflage(const Color& base, Rng& rng) {
    auto jitter = [&](double v) { return clamp01(v * (1.0 + rng.uniform(-0.1, 0.1))); };
    return {jitter(base.r), jitter(base.g), jitter(base.b)};
}

double linf(const Color& a, const Color& b) {
    return std::max({std::abs(a.r - b.r), std::abs(a.g - b.g), std::abs(a.b - b.b)});
}

// Place a shape with the requested area fraction fully inside the image.
Shape place_shape(Rng& rng, int size, double area_frac) {
    Shape s{};
    s.is_circle = rng.bernoulli(0.5);
    const double area = area_frac * size * size;
    if (s.is_circle) {
        s.rx = s.ry = std::sqrt(area / 3.14159265358979323846);
    } else {
        const double aspect = rng.uniform(0.5, 2.0);
        s.rx = 0.5 * std::sqrt(area * aspect);
        s.ry = 0.5 * std::sqrt(area / aspect);
    }
    // keep a 1px margin so the mask never touches the border
    const double mx = s.rx + 1.0, my = s.ry + 1.0;
    s.cx = rng.uniform(mx, size - mx);
    s.cy = rng.uniform(my, size - my);
    return s;
}

}  // namespace

std::vector<std::string> generate_synthetic_dataset(int count, std::uint64_t seed, int size,
                                                    const std::string& out_dir) {
    const fs::path root(out_dir);
    std::error_code ec;
    for (const char* sub : {"rgb", "depth", "gt"}) {
        fs::create_directories(root / sub, ec);
        if (ec) throw DataError("cannot create output directory " + (root / sub).string() + ": " +
                                ec.message());
    }

    std::vector<std::string> ids;
    ids.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        // per-scene stream: scene i is identical regardless of count
        Rng rng(seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(i) + 1);

        const Color c0{rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)};
        const Color c1{rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)};
        const double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        const double gx = std::cos(theta), gy = std::sin(theta);
        const double bg_near0 = rng.uniform(0.05, 0.15);
        const double bg_near1 = rng.uniform(0.15, 0.30);

        const double mode = rng.uniform();
        const bool rgb_ambiguous = mode < 1.0 / 3.0;
        const bool depth_ambiguous = !rgb_ambiguous && mode < 2.0 / 3.0;

        Shape salient = place_shape(rng, size, rng.uniform(0.05, 0.30));
        salient.nearness = rng.uniform(0.80, 0.95);
        const Color palette_sample = lerp(c0, c1, rng.uniform(0.0, 1.0));
        if (rgb_ambiguous) {
            salient.color = camouflage(palette_sample, rng);
        } else {
            // resample until the color clearly separates from both palette ends
            do {
                salient.color = {rng.uniform(), rng.uniform(), rng.uniform()};
            } while (linf(salient.color, c0) < 0.3 || linf(salient.color, c1) < 0.3);
        }

        const int n_distractors = static_cast<int>(rng.uniform_int(depth_ambiguous ? 1 : 0, 2));
        std::vector<Shape> shapes;  // painted far-to-near; salient last
        for (int d = 0; d < n_distractors; ++d) {
            Shape dist = place_shape(rng, size, rng.uniform(0.03, 0.20));
            dist.color = camouflage(lerp(c0, c1, rng.uniform(0.0, 1.0)), rng);
            // depth-ambiguous scenes keep the distractor close below the
            // salient shape; with sensor noise the per-pixel levels overlap
            // and depth alone cannot tell which shape matters
            dist.nearness = depth_ambiguous
                                ? salient.nearness - rng.uniform(0.015, 0.03)
                                : rng.uniform(0.35, salient.nearness - 0.25);
            shapes.push_back(dist);
        }
        std::sort(shapes.begin(), shapes.end(),
                  [](const Shape& a, const Shape& b) { return a.nearness < b.nearness; });
        shapes.push_back(salient);

        ImageU8 rgb, depth, gt;
        rgb.width = depth.width = gt.width = size;
        rgb.height = depth.height = gt.height = size;
        rgb.channels = 3;
        depth.channels = gt.channels = 1;
        rgb.data.resize(static_cast<std::size_t>(size) * size * 3);
        depth.data.resize(static_cast<std::size_t>(size) * size);
        gt.data.resize(static_cast<std::size_t>(size) * size);

        const double diag = std::sqrt(2.0) * size;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double proj = ((x - size / 2.0) * gx + (y - size / 2.0) * gy) / diag + 0.5;
                const double t = clamp01(proj);
                Color col = lerp(c0, c1, t);
                double near = bg_near0 + (bg_near1 - bg_near0) * t;
                bool is_salient = false;
                for (const auto& s : shapes) {
                    if (s.contains(x + 0.5, y + 0.5)) {
                        col = s.color;
                        near = s.nearness;
                        is_salient = &s == &shapes.back();
                    }
                }
                const std::size_t p = static_cast<std::size_t>(y) * size + x;
                auto q = [&](double v) {
                    return static_cast<std::uint8_t>(std::lround(255.0 * clamp01(v)));
                };
                rgb.data[3 * p + 0] = q(col.r + rng.normal() * 0.01);
                rgb.data[3 * p + 1] = q(col.g + rng.normal() * 0.01);
                rgb.data[3 * p + 2] = q(col.b + rng.normal() * 0.01);
                // bounded sensor noise, well inside the salient/distractor
                // nearness margin so the depth argmax stays on the mask
                depth.data[p] = q(near + rng.uniform(-0.01, 0.01));
                gt.data[p] = is_salient ? 255 : 0;
            }

        char name[32];
        std::snprintf(name, sizeof(name), "scene_%05d", i);
        ids.emplace_back(name);
        write_png((root / "rgb" / (ids.back() + ".png")).string(), rgb);
        write_png((root / "depth" / (ids.back() + ".png")).string(), depth);
        write_png((root / "gt" / (ids.back() + ".png")).string(), gt);
    }

    nlohmann::json manifest = ids;
    std::ofstream mf(root / "manifest.json");
    if (!mf) throw DataError("cannot write manifest under " + out_dir);
    mf << manifest.dump(2) << "\n";
    return ids;
}

}  // namespace dtmi
