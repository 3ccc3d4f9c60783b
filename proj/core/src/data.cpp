#include "fsaa/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "fsaa/errors.hpp"

namespace fsaa {

std::size_t Dataset::num_images() const {
  std::size_t n = 0;
  for (const auto& c : classes) n += c.images.size();
  return n;
}

void Dataset::validate() const {
  std::set<std::string> names;
  const Image* reference = nullptr;
  for (const auto& c : classes) {
    if (c.images.empty()) throw DatasetError("class '" + c.name + "' has no images");
    if (!names.insert(c.name).second) throw DatasetError("duplicate class name '" + c.name + "'");
    for (const Image& img : c.images) {
      if (!reference) reference = &img;
      if (img.channels != reference->channels || img.height != reference->height || img.width != reference->width)
        throw DatasetError("class '" + c.name + "' holds an image of a different shape");
    }
  }
}

Image resize_bilinear(const Image& image, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw DimensionError("resize_bilinear: zero target size");
  const auto source_coord = [](std::size_t i, std::size_t in, std::size_t out) {
    if (out == 1) return (static_cast<double>(in) - 1.0) / 2.0;
    return static_cast<double>(i) * (static_cast<double>(in) - 1.0) / (static_cast<double>(out) - 1.0);
  };
  Image out(image.channels, height, width);
  for (std::size_t y = 0; y < height; ++y) {
    const double sy = source_coord(y, image.height, height);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double sx = source_coord(x, image.width, width);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < image.channels; ++c) {
        const double top = (1.0 - fx) * image.at(c, y0, x0) + fx * image.at(c, y0, x1);
        const double bottom = (1.0 - fx) * image.at(c, y1, x0) + fx * image.at(c, y1, x1);
        out.at(c, y, x) = static_cast<float>((1.0 - fy) * top + fy * bottom);
      }
    }
  }
  return out;
}

Image rotate90(const Image& image) {
  Image out(image.channels, image.width, image.height);
  for (std::size_t c = 0; c < image.channels; ++c)
    for (std::size_t y = 0; y < out.height; ++y)
      for (std::size_t x = 0; x < out.width; ++x) out.at(c, y, x) = image.at(c, x, image.width - 1 - y);
  if (image.box) {
    const Box& b = *image.box;
    out.box = Box{b.y0, image.width - b.x1, b.y1, image.width - b.x0};
  }
  return out;
}

Image random_crop_flip(const Image& image, const AugmentSpec& spec, std::mt19937_64& rng) {
  if (!(spec.crop_ratio > 0.0 && spec.crop_ratio <= 1.0))
    throw ConfigError("crop_ratio must be in (0,1], got " + std::to_string(spec.crop_ratio));
  const auto crop_side = [&](std::size_t side) {
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(spec.crop_ratio * static_cast<double>(side))),
                                   1, side);
  };
  const std::size_t ch = crop_side(image.height);
  const std::size_t cw = crop_side(image.width);
  const std::size_t oy = std::uniform_int_distribution<std::size_t>(0, image.height - ch)(rng);
  const std::size_t ox = std::uniform_int_distribution<std::size_t>(0, image.width - cw)(rng);
  Image crop(image.channels, ch, cw);
  for (std::size_t c = 0; c < image.channels; ++c)
    for (std::size_t y = 0; y < ch; ++y)
      for (std::size_t x = 0; x < cw; ++x) crop.at(c, y, x) = image.at(c, oy + y, ox + x);
  Image out = (ch == image.height && cw == image.width) ? crop : resize_bilinear(crop, image.height, image.width);
  if (spec.flip_horizontal && std::bernoulli_distribution(0.5)(rng)) {
    for (std::size_t c = 0; c < out.channels; ++c)
      for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width / 2; ++x) std::swap(out.at(c, y, x), out.at(c, y, out.width - 1 - x));
  }
  return out;
}

Dataset load_directory_dataset(const std::filesystem::path& root, std::size_t image_size) {
  namespace fs = std::filesystem;
  if (image_size == 0) throw ConfigError("image size must be positive");
  if (!fs::is_directory(root)) throw DatasetError(root.string() + ": not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw DatasetError(root.string() + ": no class directories");

  Dataset dataset;
  for (const fs::path& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      const std::string ext = entry.path().extension().string();
      if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DatasetError(dir.string() + ": empty class directory");
    ClassRecord record{dir.filename().string(), {}};
    for (const fs::path& file : files) {
      Image img = read_pnm(file);
      if (img.height != image_size || img.width != image_size) img = resize_bilinear(img, image_size, image_size);
      record.images.push_back(std::move(img));
    }
    dataset.classes.push_back(std::move(record));
  }
  dataset.validate();
  return dataset;
}

Dataset rotation_class_augment(const Dataset& dataset) {
  Dataset out;
  out.classes.reserve(dataset.classes.size() * 4);
  for (const ClassRecord& cls : dataset.classes) {
    ClassRecord current = cls;
    for (int quarter = 0; quarter < 4; ++quarter) {
      for (const Image& img : current.images)
        if (img.height != img.width)
          throw ContractError("rotation augmentation needs square images, got " + std::to_string(img.height) + "x" +
                              std::to_string(img.width));
      ClassRecord next{cls.name + (quarter == 0 ? "" : "_rot" + std::to_string(quarter * 90)), {}};
      next.images = current.images;
      out.classes.push_back(std::move(next));
      if (quarter < 3)
        for (Image& img : current.images) img = rotate90(img);
    }
  }
  return out;
}

std::pair<Dataset, Dataset> split_classes(const Dataset& dataset, std::size_t count) {
  if (count > dataset.classes.size())
    throw DatasetError("cannot split off " + std::to_string(count) + " of " + std::to_string(dataset.classes.size()) +
                       " classes");
  Dataset first;
  Dataset rest;
  first.classes.assign(dataset.classes.begin(), dataset.classes.begin() + static_cast<std::ptrdiff_t>(count));
  rest.classes.assign(dataset.classes.begin() + static_cast<std::ptrdiff_t>(count), dataset.classes.end());
  return {std::move(first), std::move(rest)};
}

}  // namespace fsaa
