#pragma once

#include <vector>

#include "mvaf/nn.hpp"

namespace mvaf {

// Video of one view: [T, H, W, 3] with values in [0, 1].
using Video = Tensor<float>;

void validate_video(const Video& video);

// Normalized box in [0,1]^2, or the MISSING sentinel for an occluded person.
struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  bool missing = true;

  static BoundingBox missing_box() { return {}; }
  static BoundingBox from(double x1, double y1, double x2, double y2);
  bool operator==(const BoundingBox&) const = default;
};

struct EncoderConfig {
  std::size_t channels = 64;
  std::size_t patch = 16;
  // Band 0 is a plain temporal mean; band b > 0 weights frame t by
  // cos(pi * b * (t + 0.5) / T) before averaging, which keeps motion order.
  // Channel k uses band k % temporal_bands.
  std::size_t temporal_bands = 3;
};

inline constexpr double kEncoderNormEps = 1e-5;

void validate_encoder_config(const EncoderConfig& config, std::size_t height, std::size_t width);

// Parameters under encoder.patch, encoder.ffn and encoder.norm, shared by every view.
template <typename Real>
void init_encoder(ParamStore<Real>& store, const EncoderConfig& config, Rng& rng);

// Fixed [T, c] temporal weighting used before the frame average.
template <typename Real>
Tensor<Real> temporal_code(std::size_t frames, std::size_t channels, std::size_t bands);

// Patch projection -> temporal weighting and mean -> residual FFN.
// Returns a feature map of shape [H/patch, W/patch, c].
template <typename Real>
Var<Real> encode_video(ParamBinder<Real>& params, const EncoderConfig& config, const Video& video);

struct RoiAlignOptions {
  std::size_t output_size = 7;
  std::size_t samples_per_bin = 2;
};

// Box scaled by (w-1, h-1) into feature coordinates; each output bin averages
// samples_per_bin^2 bilinear samples at regular sub-bin centres, coordinates
// clamped to the map. Map [h, w, c] -> [out, out, c].
template <typename Real>
Var<Real> roi_align(Var<Real> map, const BoundingBox& box, const RoiAlignOptions& options = {});

// Per (person, view) 7x7xc features; missing pairs hold exact zeros.
template <typename Real>
struct PersonFeatureSet {
  std::size_t persons = 0;
  std::size_t views = 0;
  std::vector<Tensor<Real>> features;  // index n * views + m
  std::vector<bool> missing;

  const Tensor<Real>& at(std::size_t n, std::size_t m) const { return features[n * views + m]; }
  bool is_missing(std::size_t n, std::size_t m) const { return missing[n * views + m]; }
};

// Encodes each view once with the shared encoder, then RoIAligns every present
// box. `boxes[n][m]` is person n in view m. Result entries are Vars in the
// same n * views + m order.
template <typename Real>
std::vector<Var<Real>> extract_person_feature_vars(ParamBinder<Real>& params, const EncoderConfig& config,
                                                   const std::vector<Video>& videos,
                                                   const std::vector<std::vector<BoundingBox>>& boxes);

template <typename Real>
PersonFeatureSet<Real> extract_person_features(const ParamStore<Real>& store, const EncoderConfig& config,
                                               const std::vector<Video>& videos,
                                               const std::vector<std::vector<BoundingBox>>& boxes);

}  // namespace mvaf
