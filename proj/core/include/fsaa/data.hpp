#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fsaa/errors.hpp"
#include "fsaa/tensor.hpp"

namespace fsaa {

/// Half-open pixel bounds [x0,x1) x [y0,y1).
struct Box {
  std::size_t x0 = 0;
  std::size_t y0 = 0;
  std::size_t x1 = 0;
  std::size_t y1 = 0;
  bool contains(std::size_t x, std::size_t y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  bool operator==(const Box&) const = default;
};

/// Planar [C,H,W] image with values in [0,1].
struct Image {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
  std::optional<Box> box;  // object bounds, when known by construction

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w) : channels(c), height(h), width(w), pixels(c * h * w, 0.0f) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

struct ClassRecord {
  std::string name;
  std::vector<Image> images;
  bool operator==(const ClassRecord&) const = default;
};

struct Dataset {
  std::vector<ClassRecord> classes;

  std::size_t num_classes() const { return classes.size(); }
  std::size_t num_images() const;
  /// Throws DatasetError unless every class is non-empty, names are unique
  /// and all images share one shape.
  void validate() const;
  bool operator==(const Dataset&) const = default;
};

struct AugmentSpec {
  double crop_ratio = 0.875;
  bool flip_horizontal = true;
};

// --- PGM (P5) / PPM (P6) -----------------------------------------------------

/// Binary PGM/PPM with maxval <= 255; pixels scaled to [0,1].
/// Throws ParseError naming the file on malformed input.
Image read_pnm(const std::filesystem::path& path);
/// P5 for one channel, P6 for three; values clamped to [0,1], rounded to 0..255.
void write_pnm(const std::filesystem::path& path, const Image& image);

// --- geometry ---------------------------------------------------------------

/// Corner-aligned bilinear resampling: output pixel i samples source
/// coordinate i*(in-1)/(out-1) (the centre (in-1)/2 when out == 1).
Image resize_bilinear(const Image& image, std::size_t height, std::size_t width);

/// Exact 90 degree counter-clockwise rotation (pixel permutation).
Image rotate90(const Image& image);

/// Crop of crop_ratio * side at a uniform offset, resized back, then a
/// horizontal flip with probability 0.5 when enabled.
Image random_crop_flip(const Image& image, const AugmentSpec& spec, std::mt19937_64& rng);

// --- datasets -----------------------------------------------------------------

/// root/<class>/<*.pgm|*.ppm>, classes and files in lexicographic order, each
/// image resized to image_size x image_size.
Dataset load_directory_dataset(const std::filesystem::path& root, std::size_t image_size);

/// Four classes per source class: original, then 90, 180 and 270 degree rotations.
Dataset rotation_class_augment(const Dataset& dataset);

/// Number of distinct shape classes the synthetic generator can produce.
std::size_t synthetic_family_count();

/// Procedural grayscale shapes, one class per (shape, orientation) family,
/// with random position, +-30% scale and N(0, 0.05) pixel noise. Every image
/// records the bounding box of its shape. Deterministic per seed.
Dataset synthetic_shapes_generate(std::size_t num_classes, std::size_t images_per_class, std::size_t image_size,
                                  std::uint64_t seed);

/// Desk-scale benchmark: every synthetic shape class at 28x28, the first
/// kSyntheticTrainClasses (in corpus order) for training, the rest held out.
inline constexpr std::size_t kSyntheticTrainClasses = 30;
inline constexpr std::size_t kSyntheticImagesPerClass = 60;
inline constexpr std::uint64_t kSyntheticCorpusSeed = 7;
std::pair<Dataset, Dataset> synthetic_benchmark(std::uint64_t corpus_seed = kSyntheticCorpusSeed);

/// First `count` classes and the rest.
std::pair<Dataset, Dataset> split_classes(const Dataset& dataset, std::size_t count);

/// Stacks equally shaped images into [B,C,H,W].
template <typename T>
Tensor<T> images_to_tensor(std::span<const Image* const> images) {
  if (images.empty()) return {};
  const Image& first = *images.front();
  std::vector<T> values;
  values.reserve(images.size() * first.pixels.size());
  for (const Image* img : images) {
    if (img->channels != first.channels || img->height != first.height || img->width != first.width)
      throw DimensionError("images_to_tensor: images differ in shape");
    values.insert(values.end(), img->pixels.begin(), img->pixels.end());
  }
  return Tensor<T>({images.size(), first.channels, first.height, first.width}, std::move(values));
}

}  // namespace fsaa
