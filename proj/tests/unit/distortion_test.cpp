#include <gtest/gtest.h>

#include <fstream>
#include <map>

#include "gear/distortion.hpp"
#include "gear/error.hpp"
#include "support.hpp"

namespace gear {
namespace {

TEST(Generator, DeterministicAndBalanced) {
  auto a = gen_dataset(3, 1000, 4, 32);
  auto b = gen_dataset(3, 1000, 4, 32);
  EXPECT_TRUE(bit_equal(a.images, b.images));
  EXPECT_EQ(a.labels, b.labels);
  std::map<std::uint32_t, int> hist;
  for (auto l : a.labels) ++hist[l];
  ASSERT_EQ(hist.size(), 4u);
  for (auto [label, count] : hist) EXPECT_NEAR(count, 250, 1) << label;
  for (float v : a.images.values()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
  EXPECT_FALSE(bit_equal(a.images, gen_dataset(4, 1000, 4, 32).images));
}

TEST(Generator, RejectsBadOptions) {
  GeneratorOptions o;
  o.period_min = 1.0f;
  EXPECT_THROW(gen_dataset(1, 10, 4, 32, o), InvalidArgument);
  EXPECT_THROW(gen_dataset(1, 10, 0, 32), InvalidArgument);
}

TEST(Split, HoldsOutTail) {
  auto d = gen_dataset(1, 50, 4, 16);
  auto s = split_holdout(d);
  ASSERT_EQ(s.train.size(), 40u);
  ASSERT_EQ(s.test.size(), 10u);
  EXPECT_EQ(s.test.labels.front(), d.labels[40]);
  EXPECT_EQ(s.test.images[0], d.images[40 * 256]);
}

TEST(Jpeg, QuantStepScaling) {
  EXPECT_EQ(jpeg_quant_step(16, 50), 16);
  EXPECT_EQ(jpeg_quant_step(16, 10), 80);
  EXPECT_EQ(jpeg_quant_step(16, 100), 1);
  EXPECT_EQ(jpeg_quant_step(99, 90), 20);
  EXPECT_EQ(kLuminanceQuantTable[0], 16);
  EXPECT_EQ(kLuminanceQuantTable[63], 99);
}

TEST(Jpeg, NearLosslessAtQ100) {
  Rng rng(1);
  for (int i = 0; i < 4; ++i) {
    Tensor img = rng_fill(rng, {24, 32}, Uniform{});
    EXPECT_LT(max_abs_diff(jpeg_like(img, 100), img), 0.02f);
  }
}

TEST(Jpeg, ConstantImageSurvives) {
  Tensor img({16, 16}, 0.37f);
  for (int q : {1, 10, 50, 100}) EXPECT_LT(max_abs_diff(jpeg_like(img, q), img), 1e-3f) << q;
}

TEST(Jpeg, ErrorShrinksWithQuality) {
  auto data = gen_dataset(2, 8, 4, 32);
  std::vector<double> mse;
  for (int q = 10; q <= 100; q += 10) {
    auto d = apply_distortion(data, DistortionLevel::jpeg(q));
    double s = 0;
    for (std::size_t i = 0; i < d.images.size(); ++i) {
      const double e = d.images[i] - data.images[i];
      s += e * e;
    }
    mse.push_back(s);
  }
  int inversions = 0;
  for (std::size_t i = 1; i < mse.size(); ++i) inversions += mse[i] > mse[i - 1];
  EXPECT_LE(inversions, 1);
  EXPECT_GT(mse.front(), 4 * mse.back());
}

TEST(Jpeg, RejectsBadQuality) {
  Tensor img({8, 8});
  EXPECT_THROW(jpeg_like(img, 0), InvalidArgument);
  EXPECT_THROW(jpeg_like(img, 101), InvalidArgument);
}

TEST(Brightness, ScalesAndClamps) {
  Tensor img({4, 4}, 0.8f);
  EXPECT_TRUE(bit_equal(brightness(img, 1.0f), img));
  const Tensor half = brightness(img, 0.5f);
  for (float v : half.values()) EXPECT_FLOAT_EQ(v, 0.4f);
  const Tensor doubled = brightness(img, 2.0f);
  for (float v : doubled.values()) EXPECT_EQ(v, 1.0f);
  EXPECT_THROW(brightness(img, 0.0f), InvalidArgument);
}

TEST(Resolution, IdentityAndConstants) {
  Rng rng(2);
  Tensor img = rng_fill(rng, {1, 16, 24}, Uniform{});
  EXPECT_LE(max_abs_diff(resolution_roundtrip(img, 24), img), 1e-6f);
  Tensor flat({1, 16, 24}, 0.6f);
  for (std::size_t w : {8, 13, 20}) EXPECT_LE(max_abs_diff(resolution_roundtrip(flat, w), flat), 1e-6f);
  EXPECT_THROW(resolution_roundtrip(img, 7), InvalidArgument);
  EXPECT_THROW(resolution_roundtrip(img, 25), InvalidArgument);
}

TEST(Resolution, LowWidthBlurs) {
  Rng rng(3);
  Tensor img = rng_fill(rng, {16, 16}, Uniform{});
  EXPECT_GT(max_abs_diff(resolution_roundtrip(img, 8), img), 0.1f);
}

TEST(ApplyDistortion, NoneIsIdentityLabelsKept) {
  auto d = gen_dataset(4, 20, 4, 16);
  auto same = apply_distortion(d, DistortionLevel::none());
  EXPECT_TRUE(bit_equal(same.images, d.images));
  auto q = apply_distortion(d, DistortionLevel::jpeg(10));
  EXPECT_EQ(q.labels, d.labels);
  ASSERT_TRUE(q.provenance);
  EXPECT_EQ(q.provenance->level, DistortionLevel::jpeg(10));
  EXPECT_FALSE(bit_equal(q.images, d.images));
}

TEST(DistortionLevel, ValidationAndLabels) {
  EXPECT_EQ(DistortionLevel::jpeg(40).label(), "jpeg_quality:40");
  EXPECT_EQ(DistortionLevel::none().label(), "none");
  EXPECT_THROW(DistortionLevel::jpeg(0).validate(), InvalidArgument);
  EXPECT_THROW(DistortionLevel::bright(-1.0f).validate(), InvalidArgument);
  EXPECT_THROW(DistortionLevel::resolution(40).validate(32), InvalidArgument);
  EXPECT_NO_THROW(DistortionLevel::resolution(16).validate(32));
  EXPECT_EQ(parse_distortion_kind("brightness"), DistortionKind::brightness);
  EXPECT_FALSE(parse_distortion_kind("blur"));
  EXPECT_FALSE(distortion_kind_from_tag(9));
}

TEST(EstimateBrightness, ReferenceCases) {
  EXPECT_FLOAT_EQ(estimate_brightness(Tensor({8, 8}, kReferenceBrightness)), 1.0f);
  EXPECT_EQ(estimate_brightness(Tensor({8, 8}, 0.0f)), 0.0f);
  auto d = gen_dataset(5, 16, 4, 32);
  for (std::size_t i = 0; i < 16; ++i) {
    Tensor img({1, 32, 32}, std::vector<float>(d.images.values().begin() + i * 1024,
                                              d.images.values().begin() + (i + 1) * 1024));
    const float full = estimate_brightness(img);
    EXPECT_NEAR(estimate_brightness(brightness(img, 0.5f)), 0.5f * full, 0.05f * 0.5f * full);
  }
}

TEST(EstimateBrightness, GeneratorMatchesReference) {
  auto d = gen_dataset(99, 2000, 4, 32);
  EXPECT_NEAR(estimate_brightness(d.images), 1.0f, 0.01f);
}

TEST(DatasetFile, RoundTrip) {
  auto dir = testing::scratch_dir("dataset_file");
  auto d = gen_dataset(6, 12, 4, 16);
  save_dataset(d, dir / "d.gnnd");
  auto back = load_dataset(dir / "d.gnnd");
  EXPECT_TRUE(bit_equal(back.images, d.images));
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.class_count, 4u);
  auto bytes = serialize_dataset(d);
  bytes.resize(bytes.size() - 5);
  EXPECT_THROW(deserialize_dataset(bytes), FormatError);
}

TEST(PgmDirectory, LoadsImagesAndLabels) {
  auto dir = testing::scratch_dir("pgm");
  for (int i = 0; i < 2; ++i) {
    std::ofstream f(dir / ("img" + std::to_string(i) + ".pgm"), std::ios::binary);
    f << "P5\n# test\n3 2\n255\n";
    for (int p = 0; p < 6; ++p) f.put(static_cast<char>(i == 0 ? 0 : 255));
  }
  std::ofstream(dir / "labels.csv") << "filename,label\nimg0.pgm,0\nimg1.pgm,2\n";
  auto d = load_pgm_directory(dir);
  EXPECT_EQ(d.images.shape(), (Shape{2, 1, 2, 3}));
  EXPECT_EQ(d.labels, (std::vector<std::uint32_t>{0, 2}));
  EXPECT_EQ(d.images[0], 0.0f);
  EXPECT_EQ(d.images[6], 1.0f);
}

}  // namespace
}  // namespace gear
