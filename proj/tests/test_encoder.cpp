#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mvaf/encoder.hpp"
#include "mvaf/grad_check.hpp"

using namespace mvaf;

namespace {

using T64 = Tensor<double>;

T64 random_map(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  T64 t({h, w, c});
  for (auto& v : t.data()) v = rng.uniform();
  return t;
}

Video random_video(std::size_t T, std::size_t H, std::size_t W, std::uint64_t seed) {
  Rng rng(seed);
  Video v({T, H, W, 3});
  for (auto& x : v.data()) x = float(rng.uniform());
  return v;
}

T64 run_roi(const T64& map, const BoundingBox& box, RoiAlignOptions opt = {}) {
  Tape<double> tape;
  return roi_align(tape.constant(map), box, opt).tensor();
}

// Bilinear lookup with edge clamping, written independently of roi_align.
double bilinear(const T64& map, double y, double x, std::size_t ch) {
  const std::size_t h = map.dim(0), w = map.dim(1), c = map.dim(2);
  y = std::min(std::max(y, 0.0), double(h - 1));
  x = std::min(std::max(x, 0.0), double(w - 1));
  const std::size_t y0 = std::size_t(y), x0 = std::size_t(x);
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - double(y0), fx = x - double(x0);
  auto at = [&](std::size_t yy, std::size_t xx) { return map[(yy * w + xx) * c + ch]; };
  return (1 - fy) * (1 - fx) * at(y0, x0) + (1 - fy) * fx * at(y0, x1) + fy * (1 - fx) * at(y1, x0) +
         fy * fx * at(y1, x1);
}

// Dense oracle: average of a 100x100 grid of bilinear samples per bin.
T64 dense_roi_oracle(const T64& map, const BoundingBox& box, std::size_t out = 7, std::size_t grid = 100) {
  const std::size_t h = map.dim(0), w = map.dim(1), c = map.dim(2);
  const double X1 = box.x1 * double(w - 1), X2 = box.x2 * double(w - 1);
  const double Y1 = box.y1 * double(h - 1), Y2 = box.y2 * double(h - 1);
  const double bw = (X2 - X1) / double(out), bh = (Y2 - Y1) / double(out);
  T64 res({out, out, c});
  for (std::size_t i = 0; i < out; ++i)
    for (std::size_t j = 0; j < out; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double total = 0;
        for (std::size_t a = 0; a < grid; ++a)
          for (std::size_t b = 0; b < grid; ++b)
            total += bilinear(map, Y1 + (double(i) + (double(a) + 0.5) / double(grid)) * bh,
                              X1 + (double(j) + (double(b) + 0.5) / double(grid)) * bw, ch);
        res[(i * out + j) * c + ch] = total / double(grid * grid);
      }
  return res;
}

}  // namespace

TEST(RoiAlign, ConstantMapGivesConstantBins) {
  T64 map({5, 6, 2}, 0.375);
  auto out = run_roi(map, BoundingBox::from(0.13, 0.2, 0.77, 0.9));
  EXPECT_EQ(out.shape(), (Shape{7, 7, 2}));
  for (double v : out.data()) EXPECT_NEAR(v, 0.375, 1e-12);
}

TEST(RoiAlign, BilinearAtCentre) {
  T64 map({2, 2, 1}, {1, 2, 3, 4});
  auto out = run_roi(map, BoundingBox::from(0, 0, 1, 1), {.output_size = 1, .samples_per_bin = 1});
  EXPECT_DOUBLE_EQ(out[0], 2.5);
}

TEST(RoiAlign, MatchesDenseOversamplingOracle) {
  Rng rng(7);
  double worst = 0;
  for (int trial = 0; trial < 10; ++trial) {
    T64 map = random_map(5, 5, 2, 100 + trial);
    const double x1 = rng.uniform(0, 0.6), y1 = rng.uniform(0, 0.6);
    auto box = BoundingBox::from(x1, y1, rng.uniform(x1 + 0.1, 1.0), rng.uniform(y1 + 0.1, 1.0));
    auto got = run_roi(map, box);
    auto want = dense_roi_oracle(map, box);
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
  }
  EXPECT_LT(worst, 2e-2);
}

TEST(RoiAlign, BinAlignedBoxReproducesAveragePooling) {
  // On a 15x15 map a box spanning 7 unit cells puts each bin on one cell, so
  // the 2x2 samples average that cell's four corners.
  T64 map = random_map(15, 15, 3, 21);
  for (std::size_t oy : {0u, 3u, 7u})
    for (std::size_t ox : {0u, 5u, 7u}) {
      auto box = BoundingBox::from(ox / 14.0, oy / 14.0, (ox + 7) / 14.0, (oy + 7) / 14.0);
      auto got = run_roi(map, box);
      for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 7; ++j)
          for (std::size_t ch = 0; ch < 3; ++ch) {
            auto at = [&](std::size_t y, std::size_t x) { return map[(y * 15 + x) * 3 + ch]; };
            const std::size_t y = oy + i, x = ox + j;
            const double pool = (at(y, x) + at(y, x + 1) + at(y + 1, x) + at(y + 1, x + 1)) / 4;
            EXPECT_NEAR(got[(i * 7 + j) * 3 + ch], pool, 1e-5);
          }
    }
}

TEST(RoiAlign, LinearInTheFeatureMap) {
  T64 a = random_map(6, 5, 3, 30), b = random_map(6, 5, 3, 31);
  const double alpha = 0.7, beta = -1.9;
  T64 mix({6, 5, 3});
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * a[i] + beta * b[i];
  auto box = BoundingBox::from(0.21, 0.05, 0.66, 0.83);
  auto ra = run_roi(a, box), rb = run_roi(b, box), rm = run_roi(mix, box);
  for (std::size_t i = 0; i < rm.size(); ++i) EXPECT_NEAR(rm[i], alpha * ra[i] + beta * rb[i], 1e-5);
}

TEST(RoiAlign, ContractErrors) {
  Tape<double> tape;
  auto map = tape.constant(random_map(4, 4, 1, 1));
  EXPECT_THROW(roi_align(map, BoundingBox::missing_box()), ContractError);
  EXPECT_THROW(roi_align(map, BoundingBox{0.5, 0.5, 1.2, 0.9, false}), ContractError);
  EXPECT_THROW(BoundingBox::from(0.5, 0.1, 0.4, 0.3), ContractError);
}

TEST(RoiAlign, GradCheck) {
  auto box = BoundingBox::from(0.1, 0.3, 0.8, 0.95);
  TapeFunction<double> f = [&](Tape<double>&, const std::vector<Var<double>>& in) { return roi_align(in[0], box); };
  EXPECT_LT(grad_check<double>(f, {random_map(4, 5, 2, 3)}, 1e-6), 1e-5);
}

TEST(Encoder, ZeroVideoWithZeroBiasGivesZeroMap) {
  ParamStore<double> store;
  Rng rng(1);
  EncoderConfig cfg{.channels = 8, .patch = 4, .temporal_bands = 3};
  init_encoder(store, cfg, rng);
  for (auto& [name, t] : store.entries())
    if (name.ends_with(".bias"))
      for (auto& v : t.data()) v = 0.0;
  Tape<double> tape;
  ParamBinder<double> params(tape, store);
  auto map = encode_video(params, cfg, Video({2, 8, 12, 3}, 0.0f));
  EXPECT_EQ(map.shape(), (Shape{2, 3, 8}));
  for (double v : map.value()) EXPECT_EQ(v, 0.0);
}

TEST(Encoder, ConstantVideoGivesSpatiallyConstantMap) {
  ParamStore<double> store;
  Rng rng(2);
  EncoderConfig cfg{.channels = 8, .patch = 4, .temporal_bands = 3};
  init_encoder(store, cfg, rng);
  Tape<double> tape;
  ParamBinder<double> params(tape, store);
  auto map = encode_video(params, cfg, Video({3, 8, 8, 3}, 0.6f)).tensor();
  for (std::size_t cell = 1; cell < 4; ++cell)
    for (std::size_t ch = 0; ch < 8; ++ch) EXPECT_NEAR(map[cell * 8 + ch], map[ch], 1e-12);
}

TEST(Encoder, MatchesStraightLineReimplementation) {
  const std::size_t T = 8, H = 32, W = 32, c = 8, p = 4, bands = 3;
  ParamStore<double> store;
  Rng rng(3);
  EncoderConfig cfg{.channels = c, .patch = p, .temporal_bands = bands};
  init_encoder(store, cfg, rng);
  for (auto& v : store.get("encoder.norm.gamma").data()) v = rng.uniform(0.5, 1.5);
  for (auto& v : store.get("encoder.norm.beta").data()) v = rng.uniform(-0.5, 0.5);
  Video video = random_video(T, H, W, 4);

  Tape<double> tape;
  ParamBinder<double> params(tape, store);
  auto got = encode_video(params, cfg, video).tensor();

  const auto& pw = store.get("encoder.patch.weight");
  const auto& pb = store.get("encoder.patch.bias");
  const auto& w1 = store.get("encoder.ffn.fc1.weight");
  const auto& b1 = store.get("encoder.ffn.fc1.bias");
  const auto& w2 = store.get("encoder.ffn.fc2.weight");
  const auto& b2 = store.get("encoder.ffn.fc2.bias");
  const auto& gamma = store.get("encoder.norm.gamma");
  const auto& beta = store.get("encoder.norm.beta");
  const std::size_t h = H / p, w = W / p;
  for (std::size_t py = 0; py < h; ++py)
    for (std::size_t px = 0; px < w; ++px) {
      std::vector<double> pooled(c, 0.0);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t k = 0; k < c; ++k) {
          double acc = pb[k];
          std::size_t feature = 0;
          for (std::size_t dy = 0; dy < p; ++dy)
            for (std::size_t dx = 0; dx < p; ++dx)
              for (std::size_t ch = 0; ch < 3; ++ch, ++feature)
                acc += double(video[((t * H + py * p + dy) * W + px * p + dx) * 3 + ch]) * pw.at(feature, k);
          const std::size_t band = k % bands;
          const double weight = band == 0 ? 1.0 : std::cos(std::numbers::pi * double(band) * (t + 0.5) / double(T));
          pooled[k] += acc * weight / double(T);
        }
      std::vector<double> hidden(4 * c);
      for (std::size_t j = 0; j < 4 * c; ++j) {
        double acc = b1[j];
        for (std::size_t k = 0; k < c; ++k) acc += pooled[k] * w1.at(k, j);
        hidden[j] = 0.5 * acc * (1 + std::erf(acc / std::sqrt(2.0)));
      }
      std::vector<double> mixed(c);
      double mean = 0, var = 0;
      for (std::size_t k = 0; k < c; ++k) {
        double acc = b2[k];
        for (std::size_t j = 0; j < 4 * c; ++j) acc += hidden[j] * w2.at(j, k);
        mixed[k] = pooled[k] + acc;
        mean += mixed[k] / double(c);
      }
      for (double v : mixed) var += (v - mean) * (v - mean) / double(c);
      for (std::size_t k = 0; k < c; ++k) {
        const double want = gamma[k] * (mixed[k] - mean) / std::sqrt(var + kEncoderNormEps) + beta[k];
        EXPECT_NEAR(got[(py * w + px) * c + k], want, 1e-6);
      }
    }
}

TEST(Encoder, SharedWeightsAreDeterministicAndDimsValidated) {
  ParamStore<float> store;
  Rng rng(5);
  EncoderConfig cfg{.channels = 4, .patch = 4, .temporal_bands = 2};
  init_encoder(store, cfg, rng);
  Video video = random_video(2, 8, 8, 6);
  Tape<float> tape;
  ParamBinder<float> params(tape, store);
  auto a = encode_video(params, cfg, video).tensor();
  auto b = encode_video(params, cfg, video).tensor();
  EXPECT_EQ(a, b);
  EXPECT_THROW(encode_video(params, cfg, Video({2, 10, 8, 3})), ConfigError);
  EXPECT_THROW(encode_video(params, cfg, Video({2, 8, 8, 1})), DimensionError);
}

TEST(PersonFeatures, MissingViewsAreExactZeros) {
  ParamStore<double> store;
  Rng rng(7);
  EncoderConfig cfg{.channels = 4, .patch = 4, .temporal_bands = 2};
  init_encoder(store, cfg, rng);
  std::vector<Video> videos;
  for (int m = 0; m < 4; ++m) videos.push_back(random_video(2, 16, 16, 10 + m));
  const auto miss = BoundingBox::missing_box();
  std::vector<std::vector<BoundingBox>> boxes{{miss, BoundingBox::from(0.2, 0.2, 0.6, 0.7), miss, miss}};
  auto set = extract_person_features(store, cfg, videos, boxes);
  ASSERT_EQ(set.features.size(), 4u);
  for (std::size_t m = 0; m < 4; ++m) {
    EXPECT_EQ(set.is_missing(0, m), m != 1);
    EXPECT_EQ(set.at(0, m).shape(), (Shape{7, 7, 4}));
    const bool all_zero = std::all_of(set.at(0, m).data().begin(), set.at(0, m).data().end(),
                                      [](double v) { return v == 0.0; });
    EXPECT_EQ(all_zero, m != 1);
  }
}

TEST(PersonFeatures, EmptyAndIdenticalPersons) {
  ParamStore<double> store;
  Rng rng(8);
  EncoderConfig cfg{.channels = 4, .patch = 4, .temporal_bands = 2};
  init_encoder(store, cfg, rng);
  std::vector<Video> videos{random_video(2, 8, 8, 1), random_video(2, 8, 8, 2)};
  EXPECT_EQ(extract_person_features(store, cfg, videos, {}).features.size(), 0u);
  auto box = BoundingBox::from(0.1, 0.1, 0.5, 0.9);
  auto set = extract_person_features(store, cfg, videos, {{box, box}, {box, box}});
  EXPECT_EQ(set.at(0, 0), set.at(1, 0));
  EXPECT_EQ(set.at(0, 1), set.at(1, 1));
  EXPECT_THROW(extract_person_features(store, cfg, {}, {}), ContractError);
}
