#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <random>

#include "fsaa/data.hpp"
#include "fsaa/errors.hpp"

namespace fsaa {

namespace {

// Shapes live in the unit disk of a local frame; (u,v) are already rotated
// into the shape's orientation. v grows downwards, as image rows do.
using Inside = std::function<bool(double u, double v)>;

struct Family {
  const char* name;
  int degrees;
  Inside inside;
};

bool in_rect(double u, double v, double u0, double u1, double v0, double v1) {
  return u >= u0 && u <= u1 && v >= v0 && v <= v1;
}

bool in_disk(double u, double v, double cu, double cv, double r) {
  return (u - cu) * (u - cu) + (v - cv) * (v - cv) <= r * r;
}

double radius(double u, double v) { return std::sqrt(u * u + v * v); }

std::vector<Family> build_families() {
  std::vector<Family> f;
  const auto add = [&f](const char* name, std::initializer_list<int> angles, Inside inside) {
    for (int a : angles) f.push_back({name, a, inside});
  };
  add("disk", {0}, [](double u, double v) { return radius(u, v) <= 0.9; });
  add("ring", {0}, [](double u, double v) {
    const double r = radius(u, v);
    return r >= 0.55 && r <= 0.9;
  });
  add("bullseye", {0}, [](double u, double v) {
    const double r = radius(u, v);
    return r <= 0.25 || (r >= 0.5 && r <= 0.85);
  });
  add("plus", {0, 45}, [](double u, double v) {
    return in_rect(u, v, -0.22, 0.22, -0.9, 0.9) || in_rect(u, v, -0.9, 0.9, -0.22, 0.22);
  });
  add("bar", {0, 45, 90, 135}, [](double u, double v) { return in_rect(u, v, -0.9, 0.9, -0.22, 0.22); });
  add("square", {0, 45}, [](double u, double v) { return in_rect(u, v, -0.65, 0.65, -0.65, 0.65); });
  add("outline", {0, 45}, [](double u, double v) {
    return in_rect(u, v, -0.68, 0.68, -0.68, 0.68) && !in_rect(u, v, -0.4, 0.4, -0.4, 0.4);
  });
  add("triangle", {0, 90, 180, 270}, [](double u, double v) {
    // Apex at the top, base at the bottom.
    return v <= 0.6 && v >= -0.85 + 1.8 * std::abs(u);
  });
  add("ell", {0, 90, 180, 270}, [](double u, double v) {
    return in_rect(u, v, -0.7, -0.3, -0.7, 0.7) || in_rect(u, v, -0.7, 0.7, 0.3, 0.7);
  });
  add("tee", {0, 90, 180, 270}, [](double u, double v) {
    return in_rect(u, v, -0.7, 0.7, -0.7, -0.3) || in_rect(u, v, -0.2, 0.2, -0.7, 0.7);
  });
  add("checker3", {0}, [](double u, double v) {
    if (!in_rect(u, v, -0.69, 0.69, -0.69, 0.69)) return false;
    const int i = std::min(2, static_cast<int>((u + 0.69) / 0.46));
    const int j = std::min(2, static_cast<int>((v + 0.69) / 0.46));
    return (i + j) % 2 == 0;
  });
  add("checker2", {0}, [](double u, double v) {
    if (!in_rect(u, v, -0.66, 0.66, -0.66, 0.66)) return false;
    return (u < 0) == (v < 0);
  });
  add("dots2", {0, 45, 90, 135}, [](double u, double v) { return in_disk(u, v, -0.5, 0, 0.32) || in_disk(u, v, 0.5, 0, 0.32); });
  add("dots3", {0, 90}, [](double u, double v) {
    return in_disk(u, v, -0.6, 0, 0.24) || in_disk(u, v, 0, 0, 0.24) || in_disk(u, v, 0.6, 0, 0.24);
  });
  add("halfdisk", {0, 90, 180, 270}, [](double u, double v) { return radius(u, v) <= 0.9 && v <= 0.0; });
  add("crescent", {0, 90, 180, 270}, [](double u, double v) {
    return radius(u, v) <= 0.85 && !in_disk(u, v, 0.38, 0, 0.68);
  });
  add("stripes", {0, 90}, [](double u, double v) {
    if (!in_rect(u, v, -0.7, 0.7, -0.7, 0.7)) return false;
    return static_cast<int>((v + 0.7) / 0.28) % 2 == 0;
  });
  add("aitch", {0, 90}, [](double u, double v) {
    return in_rect(u, v, -0.7, -0.4, -0.7, 0.7) || in_rect(u, v, 0.4, 0.7, -0.7, 0.7) ||
           in_rect(u, v, -0.7, 0.7, -0.15, 0.15);
  });
  return f;
}

const std::vector<Family>& families() {
  static const std::vector<Family> table = build_families();
  return table;
}

Image render(const Family& family, std::size_t size, std::mt19937_64& rng) {
  constexpr int kSuper = 3;
  const double side = static_cast<double>(size);
  const double half = side * 0.3 * std::uniform_real_distribution<double>(0.7, 1.3)(rng);
  const double lo = half + 0.5;
  const double hi = std::max(lo, side - half - 0.5);
  const double cx = std::uniform_real_distribution<double>(lo, hi)(rng);
  const double cy = std::uniform_real_distribution<double>(lo, hi)(rng);
  const double theta = family.degrees * std::numbers::pi / 180.0;
  const double c = std::cos(theta);
  const double s = std::sin(theta);

  Image img(1, size, size);
  std::size_t x0 = size, y0 = size, x1 = 0, y1 = 0;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = (static_cast<double>(x) + (sx + 0.5) / kSuper - cx) / half;
          const double py = (static_cast<double>(y) + (sy + 0.5) / kSuper - cy) / half;
          // Rotate the sample point by -theta into the shape frame.
          const double u = c * px + s * py;
          const double v = -s * px + c * py;
          if (family.inside(u, v)) ++hits;
        }
      if (hits > 0) {
        img.at(0, y, x) = static_cast<float>(hits) / (kSuper * kSuper);
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x + 1);
        y1 = std::max(y1, y + 1);
      }
    }
  if (x1 > x0 && y1 > y0) img.box = Box{x0, y0, x1, y1};

  std::normal_distribution<double> noise(0.0, 0.05);
  for (float& p : img.pixels) p = static_cast<float>(std::clamp(p + noise(rng), 0.0, 1.0));
  return img;
}

}  // namespace

std::size_t synthetic_family_count() { return families().size(); }

Dataset synthetic_shapes_generate(std::size_t num_classes, std::size_t images_per_class, std::size_t image_size,
                                  std::uint64_t seed) {
  const auto& table = families();
  if (num_classes > table.size())
    throw ConfigError("synthetic corpus has " + std::to_string(table.size()) + " shape classes, asked for " +
                      std::to_string(num_classes));
  if (images_per_class == 0) throw ConfigError("images_per_class must be positive");
  if (image_size < 8) throw ConfigError("synthetic image size must be at least 8");

  std::vector<std::size_t> order(table.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 shuffle_rng(seed);
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  Dataset dataset;
  for (std::size_t k = 0; k < num_classes; ++k) {
    const Family& family = table[order[k]];
    char name[48];
    std::snprintf(name, sizeof name, "%s_%03d", family.name, family.degrees);
    ClassRecord record{name, {}};
    record.images.reserve(images_per_class);
    for (std::size_t i = 0; i < images_per_class; ++i) {
      std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                        static_cast<std::uint32_t>(order[k]), static_cast<std::uint32_t>(i)};
      std::mt19937_64 rng(seq);
      record.images.push_back(render(family, image_size, rng));
    }
    dataset.classes.push_back(std::move(record));
  }
  return dataset;
}

std::pair<Dataset, Dataset> synthetic_benchmark(std::uint64_t corpus_seed) {
  return split_classes(
      synthetic_shapes_generate(synthetic_family_count(), kSyntheticImagesPerClass, 28, corpus_seed),
      kSyntheticTrainClasses);
}

}  // namespace fsaa
