#include "mvaf/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mvaf {

void validate_video(const Video& video) {
  if (video.rank() != 4 || video.dim(3) != 3)
    throw DimensionError("video must be [T,H,W,3], got " + shape_str(video.shape()));
}

BoundingBox BoundingBox::from(double x1, double y1, double x2, double y2) {
  if (!(x1 < x2 && y1 < y2))
    throw ContractError("bounding box needs x1 < x2 and y1 < y2");
  return BoundingBox{x1, y1, x2, y2, false};
}

void validate_encoder_config(const EncoderConfig& config, std::size_t height, std::size_t width) {
  if (config.channels == 0 || config.patch == 0 || config.temporal_bands == 0)
    throw ConfigError("encoder channels, patch and temporal_bands must be positive");
  if (height % config.patch != 0 || width % config.patch != 0)
    throw ConfigError("frame size " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by patch " + std::to_string(config.patch));
}

template <typename Real>
void init_encoder(ParamStore<Real>& store, const EncoderConfig& config, Rng& rng) {
  init_linear(store, "encoder.patch", config.patch * config.patch * 3, config.channels, rng);
  init_ffn(store, "encoder.ffn", config.channels, rng);
  store.add("encoder.norm.gamma", Tensor<Real>({config.channels}, Real(1)));
  store.add("encoder.norm.beta", Tensor<Real>({config.channels}, Real(0)));
}

namespace {

double band_weight(std::size_t band, std::size_t t, std::size_t frames) {
  return band == 0 ? 1.0 : std::cos(std::numbers::pi * double(band) * (double(t) + 0.5) / double(frames));
}

}  // namespace

template <typename Real>
Tensor<Real> temporal_code(std::size_t frames, std::size_t channels, std::size_t bands) {
  Tensor<Real> code({frames, channels});
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t k = 0; k < channels; ++k) {
      const std::size_t b = k % bands;
      code.at(t, k) = Real(band_weight(b, t, frames));
    }
  return code;
}

template <typename Real>
Var<Real> encode_video(ParamBinder<Real>& params, const EncoderConfig& config, const Video& video) {
  validate_video(video);
  const std::size_t T = video.dim(0), H = video.dim(1), W = video.dim(2);
  validate_encoder_config(config, H, W);
  const std::size_t p = config.patch, h = H / p, w = W / p, pd = p * p * 3;

  // The projection is linear, so the temporal band weights are applied to
  // the pixels first and each band is projected once instead of every frame.
  const std::size_t B = config.temporal_bands, P = h * w, c = config.channels;
  const Tensor<Real> code = temporal_code<Real>(T, c, B);
  Tensor<Real> banded({B, P, pd});
  auto src = video.data();
  auto dst = banded.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      const Real weight = Real(band_weight(b, t, T)) / Real(T);
      std::size_t o = b * P * pd;
      for (std::size_t py = 0; py < h; ++py)
        for (std::size_t px = 0; px < w; ++px)
          for (std::size_t dy = 0; dy < p; ++dy) {
            const float* row = src.data() + ((t * H + py * p + dy) * W + px * p) * 3;
            for (std::size_t i = 0; i < p * 3; ++i) dst[o++] += weight * Real(row[i]);
          }
    }
  }
  Tensor<Real> select({B, P, c});
  Tensor<Real> bias_weight({c});
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t q = 0; q < P; ++q) select[((k % B) * P + q) * c + k] = Real(1);
    for (std::size_t t = 0; t < T; ++t) bias_weight[k] += code.at(t, k) / Real(T);
  }

  Tape<Real>& tape = params.tape();
  auto projected = matmul(tape.constant(std::move(banded)), params("encoder.patch.weight"));  // [B, P, c]
  auto chosen = scale(mean_over_axis(mul(projected, tape.constant(std::move(select))), 0), Real(B));
  auto pooled = add(chosen, mul(params("encoder.patch.bias"), tape.constant(std::move(bias_weight))));  // [P, c]
  auto mixed = add(pooled, ffn(params, "encoder.ffn", pooled));
  auto normed = layer_norm(mixed, params("encoder.norm.gamma"), params("encoder.norm.beta"), Real(kEncoderNormEps));
  return reshape(normed, {h, w, config.channels});
}

template <typename Real>
Var<Real> roi_align(Var<Real> map, const BoundingBox& box, const RoiAlignOptions& options) {
  if (box.missing) throw ContractError("roi_align: box is MISSING; use extract_person_features for padding");
  if (box.x1 < 0 || box.y1 < 0 || box.x2 > 1 || box.y2 > 1 || !(box.x1 < box.x2) || !(box.y1 < box.y2))
    throw ContractError("roi_align: box must lie within [0,1]^2 with x1 < x2, y1 < y2");
  const Shape& s = map.shape();
  if (s.size() != 3) throw DimensionError("roi_align: map must be [h,w,c], got " + shape_str(s));
  const std::size_t h = s[0], w = s[1], c = s[2];
  const std::size_t out = options.output_size, ns = options.samples_per_bin;
  if (out == 0 || ns == 0) throw ContractError("roi_align: output size and samples must be positive");

  const double X1 = box.x1 * double(w - 1), X2 = box.x2 * double(w - 1);
  const double Y1 = box.y1 * double(h - 1), Y2 = box.y2 * double(h - 1);
  const double bw = (X2 - X1) / double(out), bh = (Y2 - Y1) / double(out);
  const double share = 1.0 / double(ns * ns);

  // Sparse sampling operator: per bin, (map cell, weight) taps.
  struct Tap {
    std::size_t cell;
    Real weight;
  };
  std::vector<std::vector<Tap>> taps(out * out);
  auto add_tap = [&](std::vector<Tap>& list, std::size_t cell, double weight) {
    if (weight == 0.0) return;
    for (auto& t : list)
      if (t.cell == cell) {
        t.weight += Real(weight);
        return;
      }
    list.push_back({cell, Real(weight)});
  };
  for (std::size_t i = 0; i < out; ++i)
    for (std::size_t j = 0; j < out; ++j) {
      auto& list = taps[i * out + j];
      for (std::size_t sy = 0; sy < ns; ++sy)
        for (std::size_t sx = 0; sx < ns; ++sx) {
          const double Y = std::clamp(Y1 + (double(i) + (double(sy) + 0.5) / double(ns)) * bh, 0.0, double(h - 1));
          const double X = std::clamp(X1 + (double(j) + (double(sx) + 0.5) / double(ns)) * bw, 0.0, double(w - 1));
          const std::size_t y0 = static_cast<std::size_t>(std::floor(Y));
          const std::size_t x0 = static_cast<std::size_t>(std::floor(X));
          const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
          const double ly = Y - double(y0), lx = X - double(x0);
          add_tap(list, y0 * w + x0, share * (1 - ly) * (1 - lx));
          add_tap(list, y0 * w + x1, share * (1 - ly) * lx);
          add_tap(list, y1 * w + x0, share * ly * (1 - lx));
          add_tap(list, y1 * w + x1, share * ly * lx);
        }
    }

  auto mv = map.value();
  std::vector<Real> result(out * out * c, Real(0));
  for (std::size_t b = 0; b < taps.size(); ++b)
    for (const auto& t : taps[b])
      for (std::size_t ch = 0; ch < c; ++ch) result[b * c + ch] += t.weight * mv[t.cell * c + ch];

  const int im = map.id();
  return map.tape().record({out, out, c}, std::move(result), {im},
                           [im, c, taps = std::move(taps)](Tape<Real>& tape, int self) {
                             auto g = tape.grad(self);
                             auto gm = tape.accumulate(im);
                             for (std::size_t b = 0; b < taps.size(); ++b)
                               for (const auto& t : taps[b])
                                 for (std::size_t ch = 0; ch < c; ++ch) gm[t.cell * c + ch] += t.weight * g[b * c + ch];
                           });
}

template <typename Real>
std::vector<Var<Real>> extract_person_feature_vars(ParamBinder<Real>& params, const EncoderConfig& config,
                                                   const std::vector<Video>& videos,
                                                   const std::vector<std::vector<BoundingBox>>& boxes) {
  if (videos.empty()) throw ContractError("extract_person_features: no views");
  const std::size_t views = videos.size();
  for (const auto& person : boxes)
    if (person.size() != views)
      throw DimensionError("extract_person_features: every person needs one box per view (" +
                           std::to_string(views) + ")");
  std::vector<Var<Real>> out;
  if (boxes.empty()) return out;

  std::vector<Var<Real>> maps;
  for (const auto& v : videos) maps.push_back(encode_video(params, config, v));
  const RoiAlignOptions roi;
  Var<Real> zero = params.tape().constant(Tensor<Real>({roi.output_size, roi.output_size, config.channels}));
  for (const auto& person : boxes)
    for (std::size_t m = 0; m < views; ++m)
      out.push_back(person[m].missing ? zero : roi_align(maps[m], person[m], roi));
  return out;
}

template <typename Real>
PersonFeatureSet<Real> extract_person_features(const ParamStore<Real>& store, const EncoderConfig& config,
                                               const std::vector<Video>& videos,
                                               const std::vector<std::vector<BoundingBox>>& boxes) {
  Tape<Real> tape;
  ParamBinder<Real> params(tape, store);
  auto vars = extract_person_feature_vars(params, config, videos, boxes);
  PersonFeatureSet<Real> set;
  set.persons = boxes.size();
  set.views = videos.size();
  for (std::size_t n = 0; n < boxes.size(); ++n)
    for (std::size_t m = 0; m < videos.size(); ++m) {
      set.features.push_back(vars[n * videos.size() + m].tensor());
      set.missing.push_back(boxes[n][m].missing);
    }
  return set;
}

#define MVAF_INSTANTIATE_ENCODER(R)                                                                        \
  template void init_encoder(ParamStore<R>&, const EncoderConfig&, Rng&);                                  \
  template Tensor<R> temporal_code<R>(std::size_t, std::size_t, std::size_t);                              \
  template Var<R> encode_video(ParamBinder<R>&, const EncoderConfig&, const Video&);                       \
  template Var<R> roi_align(Var<R>, const BoundingBox&, const RoiAlignOptions&);                           \
  template std::vector<Var<R>> extract_person_feature_vars(ParamBinder<R>&, const EncoderConfig&,          \
                                                           const std::vector<Video>&,                      \
                                                           const std::vector<std::vector<BoundingBox>>&);  \
  template PersonFeatureSet<R> extract_person_features(const ParamStore<R>&, const EncoderConfig&,         \
                                                       const std::vector<Video>&,                          \
                                                       const std::vector<std::vector<BoundingBox>>&);

MVAF_INSTANTIATE_ENCODER(float)
MVAF_INSTANTIATE_ENCODER(double)

}  // namespace mvaf
