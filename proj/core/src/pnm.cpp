#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "fsaa/data.hpp"
#include "fsaa/errors.hpp"

namespace fsaa {

namespace {

class HeaderReader {
 public:
  HeaderReader(const std::vector<unsigned char>& bytes, const std::filesystem::path& path)
      : bytes_(bytes), path_(path) {}

  std::size_t number(const char* what) {
    skip_space_and_comments();
    std::size_t value = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_++] - '0');
      if (++digits > 9) fail(std::string(what) + " is too large");
    }
    if (digits == 0) fail(std::string("expected ") + what);
    return value;
  }

  // Exactly one whitespace byte separates the header from the raster.
  std::size_t raster_start() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) fail("missing whitespace before raster");
    return pos_ + 1;
  }

  [[noreturn]] void fail(const std::string& message) const {
    throw ParseError(path_.string() + ": " + message);
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<unsigned char>& bytes_;
  const std::filesystem::path& path_;
  std::size_t pos_ = 2;
};

}  // namespace

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path.string() + ": cannot open");
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  HeaderReader header(bytes, path);
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    header.fail("not a binary PGM (P5) or PPM (P6) file");
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  const std::size_t width = header.number("width");
  const std::size_t height = header.number("height");
  const std::size_t maxval = header.number("maxval");
  if (width == 0 || height == 0) header.fail("zero image dimension");
  if (maxval == 0 || maxval > 255) header.fail("maxval must be in 1..255, got " + std::to_string(maxval));
  const std::size_t start = header.raster_start();
  const std::size_t count = width * height * channels;
  if (bytes.size() < start + count)
    header.fail("truncated raster: expected " + std::to_string(count) + " bytes, found " +
                std::to_string(bytes.size() - std::min(bytes.size(), start)));

  Image image(channels, height, width);
  const float top = static_cast<float>(maxval);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        const unsigned char v = bytes[start + (y * width + x) * channels + c];
        image.at(c, y, x) = std::min(1.0f, static_cast<float>(v) / top);
      }
  return image;
}

void write_pnm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3)
    throw DimensionError("write_pnm: only 1 or 3 channels, got " + std::to_string(image.channels));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << (image.channels == 1 ? "P5" : "P6") << '\n' << image.width << ' ' << image.height << "\n255\n";
  std::string raster(image.width * image.height * image.channels, '\0');
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < image.channels; ++c) {
        const float v = std::clamp(image.at(c, y, x), 0.0f, 1.0f);
        raster[(y * image.width + x) * image.channels + c] = static_cast<char>(std::lround(v * 255.0f));
      }
  out.write(raster.data(), static_cast<std::streamsize>(raster.size()));
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

}  // namespace fsaa
