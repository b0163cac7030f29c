#include "ucast/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "ucast/image.hpp"

namespace ucast {

namespace {

constexpr real kPi = 3.14159265358979323846;

struct Rgb {
  real r, g, b;
};

struct ShapeSpec {
  bool circle;
  real cx, cy, sx, sy;  // center and half-extents in [0,1] coordinates
  int color;            // palette index
};

// shared scene geometry both domains draw on
std::vector<ShapeSpec> random_shapes(Rng& rng, int palette_size) {
  const int n = 2 + static_cast<int>(rng.uniform_int(4));  // 2..5
  std::vector<ShapeSpec> shapes;
  for (int i = 0; i < n; ++i) {
    ShapeSpec s;
    s.circle = rng.uniform() < 0.5;
    s.cx = rng.uniform(0.15, 0.85);
    s.cy = rng.uniform(0.15, 0.85);
    s.sx = rng.uniform(0.08, 0.3);
    s.sy = s.circle ? s.sx : rng.uniform(0.08, 0.3);
    s.color = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(palette_size)));
    shapes.push_back(s);
  }
  return shapes;
}

// -1 = background, else index of topmost covering shape
int shape_at(const std::vector<ShapeSpec>& shapes, real x, real y) {
  for (int i = static_cast<int>(shapes.size()) - 1; i >= 0; --i) {
    const ShapeSpec& s = shapes[static_cast<size_t>(i)];
    const real dx = (x - s.cx) / s.sx, dy = (y - s.cy) / s.sy;
    const bool inside = s.circle ? (dx * dx + dy * dy <= 1.0)
                                 : (std::fabs(dx) <= 1.0 && std::fabs(dy) <= 1.0);
    if (inside) return i;
  }
  return -1;
}

real clamp01(real v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace

Tensor synth_realistic_image(int64_t resolution, Rng& rng) {
  if (resolution < 4) throw std::invalid_argument("synthetic: resolution too small");
  const real R = static_cast<real>(resolution);
  // muted two-color gradient background along a random direction
  const Rgb a{rng.uniform(0.25, 0.7), rng.uniform(0.25, 0.7), rng.uniform(0.25, 0.7)};
  const Rgb b{rng.uniform(0.25, 0.7), rng.uniform(0.25, 0.7), rng.uniform(0.25, 0.7)};
  const real theta = rng.uniform(0.0, 2.0 * kPi);
  const real dx = std::cos(theta), dy = std::sin(theta);

  std::vector<Rgb> palette;
  for (int i = 0; i < 4; ++i) {
    palette.push_back({rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)});
  }
  std::vector<ShapeSpec> shapes = random_shapes(rng, 4);

  Tensor img({1, 3, resolution, resolution});
  for (int64_t y = 0; y < resolution; ++y)
    for (int64_t x = 0; x < resolution; ++x) {
      const real fx = (static_cast<real>(x) + 0.5) / R;
      const real fy = (static_cast<real>(y) + 0.5) / R;
      const real t = clamp01(0.5 + 0.5 * ((fx - 0.5) * dx + (fy - 0.5) * dy) / 0.7071);
      Rgb c{a.r + t * (b.r - a.r), a.g + t * (b.g - a.g), a.b + t * (b.b - a.b)};
      const int si = shape_at(shapes, fx, fy);
      if (si >= 0) {
        const ShapeSpec& s = shapes[static_cast<size_t>(si)];
        // soft edge: blend toward the shape color near the boundary
        const real ddx = (fx - s.cx) / s.sx, ddy = (fy - s.cy) / s.sy;
        const real r2 = s.circle ? ddx * ddx + ddy * ddy : std::max(std::fabs(ddx), std::fabs(ddy));
        const real edge = clamp01((1.0 - r2) * 6.0);
        const Rgb& p = palette[static_cast<size_t>(s.color)];
        c.r = c.r + edge * (p.r - c.r);
        c.g = c.g + edge * (p.g - c.g);
        c.b = c.b + edge * (p.b - c.b);
      }
      img.at(0, 0, y, x) = clamp01(c.r);
      img.at(0, 1, y, x) = clamp01(c.g);
      img.at(0, 2, y, x) = clamp01(c.b);
    }
  return img;
}

Tensor synth_styled_image(int64_t resolution, int64_t style_id, Rng& rng) {
  if (resolution < 4) throw std::invalid_argument("synthetic: resolution too small");
  if (style_id < 0 || style_id >= kNumSyntheticStyles) {
    throw std::invalid_argument("synthetic: unknown style " + std::to_string(style_id));
  }
  const real R = static_cast<real>(resolution);

  // style 0: warm palette, horizontal stroke bands
  // style 1: cool palette, dotted cross-hatch
  static const std::vector<Rgb> kWarm = {
      {0.86, 0.22, 0.10}, {0.95, 0.58, 0.12}, {0.98, 0.84, 0.30}, {0.60, 0.08, 0.06}};
  static const std::vector<Rgb> kCool = {
      {0.10, 0.28, 0.80}, {0.12, 0.66, 0.72}, {0.32, 0.88, 0.95}, {0.06, 0.12, 0.50}};
  const std::vector<Rgb>& palette = style_id == 0 ? kWarm : kCool;

  std::vector<ShapeSpec> shapes = random_shapes(rng, static_cast<int>(palette.size()) - 1);
  const int bg_color = static_cast<int>(palette.size()) - 1;
  const real period = rng.uniform(3.0, 5.0);
  const real phase = rng.uniform(0.0, 2.0 * kPi);

  Tensor img({1, 3, resolution, resolution});
  for (int64_t y = 0; y < resolution; ++y)
    for (int64_t x = 0; x < resolution; ++x) {
      const real fx = (static_cast<real>(x) + 0.5) / R;
      const real fy = (static_cast<real>(y) + 0.5) / R;
      const int si = shape_at(shapes, fx, fy);
      const Rgb& base =
          palette[static_cast<size_t>(si >= 0 ? shapes[static_cast<size_t>(si)].color : bg_color)];
      real tex;
      if (style_id == 0) {
        tex = 0.85 + 0.25 * std::sin(2.0 * kPi * static_cast<real>(y) / period + phase +
                                     0.8 * std::sin(2.0 * kPi * fx * 3.0));
      } else {
        tex = 0.85 + 0.25 * std::sin(2.0 * kPi * static_cast<real>(x) / period + phase) *
                         std::sin(2.0 * kPi * static_cast<real>(y) / period);
      }
      img.at(0, 0, y, x) = clamp01(base.r * tex);
      img.at(0, 1, y, x) = clamp01(base.g * tex);
      img.at(0, 2, y, x) = clamp01(base.b * tex);
    }
  return img;
}

void write_synthetic_corpus(const std::string& dir, const std::string& kind, int64_t count,
                            int64_t resolution, uint64_t seed) {
  std::filesystem::create_directories(dir);
  Rng rng(seed);
  for (int64_t i = 0; i < count; ++i) {
    Tensor img;
    if (kind == "realistic") {
      img = synth_realistic_image(resolution, rng);
    } else if (kind == "style0") {
      img = synth_styled_image(resolution, 0, rng);
    } else if (kind == "style1") {
      img = synth_styled_image(resolution, 1, rng);
    } else if (kind == "art") {
      img = synth_styled_image(resolution, i % kNumSyntheticStyles, rng);
    } else {
      throw std::invalid_argument("synthetic corpus: unknown kind '" + kind + "'");
    }
    char name[32];
    std::snprintf(name, sizeof(name), "img_%04d.png", static_cast<int>(i));
    save_image((std::filesystem::path(dir) / name).string(), img);
  }
}

}  // namespace ucast
