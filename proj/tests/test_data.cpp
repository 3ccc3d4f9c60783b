#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fsaa/data.hpp"
#include "fsaa/episodic.hpp"
#include "fsaa/errors.hpp"

namespace fsaa {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("fsaa_data_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

Image gradient_image(std::size_t c, std::size_t h, std::size_t w, float offset = 0.0f) {
  Image img(c, h, w);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = static_cast<float>((i * 37 + static_cast<std::size_t>(offset * 255)) % 256) / 255.0f;
  return img;
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f << bytes;
}

// --- PNM --------------------------------------------------------------------------

TEST(Pnm, GrayAndColorRoundTrip) {
  TempDir dir;
  for (std::size_t c : {1u, 3u}) {
    const Image img = gradient_image(c, 5, 7);
    const fs::path p = dir.path() / (c == 1 ? "a.pgm" : "a.ppm");
    write_pnm(p, img);
    const Image back = read_pnm(p);
    EXPECT_EQ(back.channels, c);
    EXPECT_EQ(back.height, 5u);
    EXPECT_EQ(back.width, 7u);
    EXPECT_EQ(back.pixels, img.pixels);
  }
}

TEST(Pnm, HeaderCommentsAndSmallMaxval) {
  TempDir dir;
  const fs::path p = dir.path() / "c.pgm";
  write_bytes(p, std::string("P5\n# made by hand\n2 1\n# another\n15\n") + char(0) + char(15));
  const Image img = read_pnm(p);
  EXPECT_EQ(img.pixels, (std::vector<float>{0.0f, 1.0f}));
}

TEST(Pnm, MalformedInputNamesTheFile) {
  TempDir dir;
  const fs::path bad_magic = dir.path() / "bad_magic.pgm";
  write_bytes(bad_magic, "P2\n1 1\n255\n0");
  const fs::path truncated = dir.path() / "truncated.pgm";
  write_bytes(truncated, "P5\n4 4\n255\nab");
  const fs::path big_maxval = dir.path() / "maxval.pgm";
  write_bytes(big_maxval, "P5\n1 1\n65535\nab");
  for (const fs::path& p : {bad_magic, truncated, big_maxval}) {
    try {
      read_pnm(p);
      ADD_FAILURE() << p;
    } catch (const ParseError& e) {
      EXPECT_NE(std::string(e.what()).find(p.filename().string()), std::string::npos) << e.what();
    }
  }
}

TEST(Pnm, LoadedValuesLieInUnitInterval) {
  TempDir dir;
  std::string payload;
  for (int i = 0; i < 256; ++i) payload.push_back(static_cast<char>(i));
  write_bytes(dir.path() / "all.pgm", "P5\n16 16\n255\n" + payload);
  write_bytes(dir.path() / "all.ppm", "P6\n16 4\n200\n" + payload.substr(0, 192));
  for (const char* name : {"all.pgm", "all.ppm"})
    for (float v : read_pnm(dir.path() / name).pixels) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
}

// --- directory loader ---------------------------------------------------------------

TEST(LoadDirectory, SortedClassesAndFiles) {
  TempDir dir;
  for (const char* cls : {"zeta", "alpha"}) {
    fs::create_directories(dir.path() / cls);
    for (int i = 2; i >= 0; --i) write_pnm(dir.path() / cls / ("img" + std::to_string(i) + ".pgm"), gradient_image(1, 6, 6, i * 0.1f));
  }
  write_bytes(dir.path() / "alpha" / "notes.txt", "ignored");
  const Dataset ds = load_directory_dataset(dir.path(), 6);
  ASSERT_EQ(ds.num_classes(), 2u);
  EXPECT_EQ(ds.classes[0].name, "alpha");
  EXPECT_EQ(ds.classes[1].name, "zeta");
  ASSERT_EQ(ds.classes[0].images.size(), 3u);
  EXPECT_EQ(ds.classes[0].images[0], read_pnm(dir.path() / "alpha" / "img0.pgm"));
  EXPECT_EQ(ds.classes[0].images[2], read_pnm(dir.path() / "alpha" / "img2.pgm"));
  EXPECT_EQ(load_directory_dataset(dir.path(), 6), ds);
}

TEST(LoadDirectory, ResizesToTarget) {
  TempDir dir;
  fs::create_directories(dir.path() / "a");
  write_pnm(dir.path() / "a" / "x.pgm", gradient_image(1, 40, 40));
  for (std::size_t size : {28u, 84u}) {
    const Dataset ds = load_directory_dataset(dir.path(), size);
    EXPECT_EQ(ds.classes[0].images[0].height, size);
    EXPECT_EQ(ds.classes[0].images[0].width, size);
  }
}

TEST(LoadDirectory, Errors) {
  TempDir dir;
  EXPECT_THROW(load_directory_dataset(dir.path() / "missing", 28), DatasetError);
  EXPECT_THROW(load_directory_dataset(dir.path(), 28), DatasetError);
  fs::create_directories(dir.path() / "empty");
  EXPECT_THROW(load_directory_dataset(dir.path(), 28), DatasetError);
  fs::create_directories(dir.path() / "broken");
  write_bytes(dir.path() / "broken" / "x.pgm", "P5\nnope");
  fs::remove_all(dir.path() / "empty");
  EXPECT_THROW(load_directory_dataset(dir.path(), 28), ParseError);
}

TEST(Dataset, ValidateRejectsBadShape) {
  Dataset ds;
  ds.classes.push_back({"a", {Image(1, 4, 4)}});
  ds.classes.push_back({"b", {Image(1, 5, 5)}});
  EXPECT_THROW(ds.validate(), DatasetError);
  ds.classes[1] = {"a", {Image(1, 4, 4)}};
  EXPECT_THROW(ds.validate(), DatasetError);
  ds.classes[1] = {"b", {}};
  EXPECT_THROW(ds.validate(), DatasetError);
}

// --- geometry -----------------------------------------------------------------------

TEST(Resize, CornerAlignedOracle) {
  Image img(1, 2, 2);
  img.pixels = {0.0f, 1.0f, 2.0f, 3.0f};
  const Image up = resize_bilinear(img, 3, 3);
  EXPECT_EQ(up.pixels, (std::vector<float>{0.0f, 0.5f, 1.0f, 1.0f, 1.5f, 2.0f, 2.0f, 2.5f, 3.0f}));
  const Image one = resize_bilinear(img, 1, 1);
  EXPECT_FLOAT_EQ(one.pixels[0], 1.5f);
  EXPECT_EQ(resize_bilinear(up, 3, 3), up);
}

TEST(Resize, MatchesIndependentFormula) {
  const Image img = gradient_image(2, 7, 5);
  const Image out = resize_bilinear(img, 11, 4);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 11; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        const double sy = y * 6.0 / 10.0;
        const double sx = x * 4.0 / 3.0;
        const auto y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
        const std::size_t y1 = std::min<std::size_t>(y0 + 1, 6), x1 = std::min<std::size_t>(x0 + 1, 4);
        const double fy = sy - y0, fx = sx - x0;
        const double v = (1 - fy) * ((1 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x1)) +
                         fy * ((1 - fx) * img.at(c, y1, x0) + fx * img.at(c, y1, x1));
        EXPECT_NEAR(out.at(c, y, x), v, 1e-6);
      }
}

TEST(Rotate90, CounterClockwisePermutation) {
  Image img(1, 2, 2);
  img.pixels = {1, 2, 3, 4};
  img.box = Box{1, 0, 2, 1};  // top-right pixel
  const Image r = rotate90(img);
  EXPECT_EQ(r.pixels, (std::vector<float>{2, 4, 1, 3}));
  EXPECT_EQ(*r.box, (Box{0, 0, 1, 1}));  // now top-left
}

TEST(Rotate90, FourTurnsAreIdentity) {
  Image img = gradient_image(3, 6, 6);
  img.box = Box{1, 2, 4, 5};
  EXPECT_EQ(rotate90(rotate90(rotate90(rotate90(img)))), img);
}

TEST(RandomCropFlip, IdentityWhenFullCropWithoutFlip) {
  std::mt19937_64 rng(1);
  const Image img = gradient_image(1, 9, 9);
  EXPECT_EQ(random_crop_flip(img, {1.0, false}, rng), img);
}

TEST(RandomCropFlip, ShapePreservedAndSeedDeterministic) {
  const Image img = gradient_image(3, 12, 10);
  for (const AugmentSpec spec : {AugmentSpec{0.875, true}, AugmentSpec{0.5, false}, AugmentSpec{0.1, true}}) {
    std::mt19937_64 a(7), b(7);
    const Image x = random_crop_flip(img, spec, a);
    EXPECT_EQ(x.channels, 3u);
    EXPECT_EQ(x.height, 12u);
    EXPECT_EQ(x.width, 10u);
    EXPECT_EQ(x, random_crop_flip(img, spec, b));
  }
}

TEST(RandomCropFlip, FullCropFlipIsMirrorOrIdentity) {
  const Image img = gradient_image(1, 4, 5);
  Image mirror = img;
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 5; ++x) mirror.at(0, y, x) = img.at(0, y, 4 - x);
  std::mt19937_64 rng(3);
  int flips = 0;
  for (int i = 0; i < 200; ++i) {
    const Image out = random_crop_flip(img, {1.0, true}, rng);
    ASSERT_TRUE(out == img || out == mirror);
    flips += out == mirror;
  }
  EXPECT_GT(flips, 60);
  EXPECT_LT(flips, 140);
}

TEST(RandomCropFlip, BadRatioIsConfigError) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(random_crop_flip(Image(1, 4, 4), {0.0, false}, rng), ConfigError);
  EXPECT_THROW(random_crop_flip(Image(1, 4, 4), {1.5, false}, rng), ConfigError);
}

// --- rotation classes ------------------------------------------------------------

TEST(RotationAugment, FourClassesPerSourceAndLossless) {
  const Dataset src = synthetic_shapes_generate(3, 4, 12, 2);
  const Dataset aug = rotation_class_augment(src);
  ASSERT_EQ(aug.num_classes(), 12u);
  EXPECT_EQ(aug.classes[1].name, src.classes[0].name + "_rot90");
  EXPECT_EQ(aug.classes[3].name, src.classes[0].name + "_rot270");
  EXPECT_NO_THROW(aug.validate());
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(aug.classes[4 * k].images, src.classes[k].images);
    for (std::size_t r = 1; r < 4; ++r) {
      const auto& rotated = aug.classes[4 * k + r].images;
      ASSERT_EQ(rotated.size(), src.classes[k].images.size());
      for (std::size_t i = 0; i < rotated.size(); ++i) {
        Image back = rotated[i];
        for (std::size_t t = r; t < 4; ++t) back = rotate90(back);
        EXPECT_EQ(back, src.classes[k].images[i]);
      }
    }
  }
}

TEST(RotationAugment, ScalesToLargeClassCounts) {
  Dataset src;
  for (int k = 0; k < 1200; ++k) src.classes.push_back({"c" + std::to_string(k), {Image(1, 2, 2)}});
  EXPECT_EQ(rotation_class_augment(src).num_classes(), 4800u);
}

TEST(RotationAugment, NonSquareIsContractError) {
  Dataset src;
  src.classes.push_back({"a", {Image(1, 2, 3)}});
  EXPECT_THROW(rotation_class_augment(src), ContractError);
}

// --- synthetic corpus ----------------------------------------------------------------

TEST(Synthetic, ShapeContract) {
  const Dataset ds = synthetic_shapes_generate(10, 40, 28, 3);
  ASSERT_EQ(ds.num_classes(), 10u);
  EXPECT_EQ(ds.num_images(), 400u);
  EXPECT_NO_THROW(ds.validate());
  for (const auto& c : ds.classes)
    for (const auto& img : c.images) {
      EXPECT_EQ(img.channels, 1u);
      EXPECT_EQ(img.height, 28u);
      ASSERT_TRUE(img.box.has_value());
      EXPECT_LT(img.box->x0, img.box->x1);
      EXPECT_LE(img.box->x1, 28u);
      for (float v : img.pixels) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
      }
    }
}

TEST(Synthetic, SeedDeterministic) {
  EXPECT_EQ(synthetic_shapes_generate(6, 5, 28, 11), synthetic_shapes_generate(6, 5, 28, 11));
  EXPECT_NE(synthetic_shapes_generate(6, 5, 28, 11), synthetic_shapes_generate(6, 5, 28, 12));
}

TEST(Synthetic, TooManyClassesIsConfigError) {
  EXPECT_THROW(synthetic_shapes_generate(synthetic_family_count() + 1, 1, 28, 0), ConfigError);
}

TEST(Synthetic, BenchmarkSplitIsDisjoint) {
  const auto [train, test] = synthetic_benchmark();
  EXPECT_EQ(train.num_classes(), kSyntheticTrainClasses);
  EXPECT_EQ(test.num_classes(), synthetic_family_count() - kSyntheticTrainClasses);
  EXPECT_GE(test.num_classes(), 5u);
  for (const auto& a : train.classes)
    for (const auto& b : test.classes) EXPECT_NE(a.name, b.name);
}

// Nearest support in pixel space (the class centroid, for one shot).
std::vector<std::size_t> nearest_centroid(const Dataset& ds, const Episode& ep) {
  const std::size_t way = ep.spec.way;
  const std::size_t dim = ds.classes[0].images[0].pixels.size();
  std::vector<std::vector<double>> centroid(way, std::vector<double>(dim, 0.0));
  for (const Sample& s : ep.support) {
    const auto& px = ds.classes[s.dataset_class].images[s.image].pixels;
    for (std::size_t i = 0; i < dim; ++i) centroid[s.label][i] += px[i] / static_cast<double>(ep.spec.shot);
  }
  std::vector<std::size_t> out;
  for (const Sample& q : ep.query) {
    const auto& px = ds.classes[q.dataset_class].images[q.image].pixels;
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < way; ++k) {
      double d = 0.0;
      for (std::size_t i = 0; i < dim; ++i) d += (px[i] - centroid[k][i]) * (px[i] - centroid[k][i]);
      if (d < best_d) best_d = d, best = k;
    }
    out.push_back(best);
  }
  return out;
}

TEST(Synthetic, NearestCentroidBaselineBeatsChance) {
  const Dataset ds = synthetic_shapes_generate(10, 40, 28, kSyntheticCorpusSeed);
  const EvalReport r = evaluate_with(ds, EpisodeSpec{5, 1, 15}, 300, 1,
                                     [&](const Episode& ep, std::mt19937_64&) { return nearest_centroid(ds, ep); });
  EXPECT_GT(r.mean, 0.30) << r.mean;
}

TEST(SplitClasses, TooManyIsDatasetError) {
  const Dataset ds = synthetic_shapes_generate(3, 1, 12, 0);
  EXPECT_THROW(split_classes(ds, 4), DatasetError);
  const auto [a, b] = split_classes(ds, 3);
  EXPECT_EQ(a.num_classes(), 3u);
  EXPECT_EQ(b.num_classes(), 0u);
}

}  // namespace
}  // namespace fsaa
