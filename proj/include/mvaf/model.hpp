#pragma once

#include <string>
#include <vector>

#include "mvaf/encoder.hpp"

namespace mvaf {

enum class CooperationMode { SvaDva, VanillaSelf, PooledVector };
enum class SublayerCombination { ParallelSum, Sequential };

const char* cooperation_mode_name(CooperationMode mode);
CooperationMode parse_cooperation_mode(const std::string& text);
const char* combination_name(SublayerCombination combination);
SublayerCombination parse_combination(const std::string& text);

struct CooperationConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  CooperationMode mode = CooperationMode::SvaDva;
  SublayerCombination combination = SublayerCombination::ParallelSum;
  double dropout = 0.0;
  // Ablation switch: hide keys of zero-padded views from every attention.
  bool mask_missing_views = false;
};

struct ModelConfig {
  EncoderConfig encoder;
  CooperationConfig cooperation;
  std::size_t views = 4;
  std::size_t classes = 8;
  double layer_norm_eps = 1e-5;
};

void validate_model_config(const ModelConfig& config);

// Creates every parameter the configuration uses:
//   encoder.*, view_embed.{m} [c] (zeros), classifier.{weight,bias},
//   layer{l}.{sva,dva}.* or layer{l}.self.*, layer{l}.ffn.*,
//   layer{l}.norm1.*, layer{l}.norm2.* (and layer{l}.norm_dva.* when sequential).
template <typename Real>
void init_model(ParamStore<Real>& store, const ModelConfig& config, Rng& rng);

// DETR-style 2D table for a square grid of `tokens` cells: the first c/2
// channels encode the row, the rest the column, alternating sin/cos with
// frequency 10000^(2i/(c/2)).
template <typename Real>
Tensor<Real> sinusoidal_position_embeddings(std::size_t tokens, std::size_t channels);

// F_flat [t, c] + PE [t, c] + VE [c] broadcast over tokens.
template <typename Real>
Var<Real> add_embeddings(Var<Real> flat, Var<Real> position, Var<Real> view_embedding);

struct ForwardOptions {
  bool record = false;
  std::uint64_t dropout_seed = 0;
  bool training = false;
};

template <typename Real>
struct CooperationResult {
  Var<Real> tokens;  // [M * t, c]
  std::vector<AttentionRecord> records;
};

// Runs the L-layer cooperation transformer over per-view blocks [t, c],
// concatenated in view order. `missing` (optional, one flag per view) is only
// consulted when mask_missing_views is set.
template <typename Real>
CooperationResult<Real> cooperation_forward(ParamBinder<Real>& params, const ModelConfig& config,
                                            const std::vector<Var<Real>>& blocks,
                                            const std::vector<bool>* missing = nullptr,
                                            const ForwardOptions& options = {});

// Channelwise max over all tokens: [n, c] -> [c].
template <typename Real>
Var<Real> joint_representation(Var<Real> tokens);

// sigmoid(classifier(f)) : [c] -> [cls].
template <typename Real>
Var<Real> classify(ParamBinder<Real>& params, Var<Real> joint);

template <typename Real>
struct PersonOutput {
  Var<Real> probabilities;  // [cls]
  std::vector<AttentionRecord> records;
};

// One person from its M per-view RoI features [7, 7, c].
template <typename Real>
PersonOutput<Real> forward_person(ParamBinder<Real>& params, const ModelConfig& config,
                                  const std::vector<Var<Real>>& features, const std::vector<bool>& missing,
                                  const ForwardOptions& options = {});

// Every person of one keyframe; persons never interact. `boxes[n][m]`.
template <typename Real>
std::vector<PersonOutput<Real>> forward_persons(ParamBinder<Real>& params, const ModelConfig& config,
                                                const std::vector<Video>& videos,
                                                const std::vector<std::vector<BoundingBox>>& boxes,
                                                const ForwardOptions& options = {});

// Value-only convenience: per-person probability vectors.
template <typename Real>
std::vector<Tensor<Real>> predict(const ParamStore<Real>& store, const ModelConfig& config,
                                  const std::vector<Video>& videos,
                                  const std::vector<std::vector<BoundingBox>>& boxes);

std::vector<std::uint8_t> threshold_labels(const Tensor<float>& probabilities, double threshold = 0.5);

// "MVCK" checkpoint: version, count, then (u16 name length, name, MVTF blob).
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Real>
void write_checkpoint(std::ostream& os, const ParamStore<Real>& store);
template <typename Real>
ParamStore<Real> read_checkpoint(std::istream& is);
template <typename Real>
void save_checkpoint(const std::string& path, const ParamStore<Real>& store);
template <typename Real>
ParamStore<Real> load_checkpoint(const std::string& path);

}  // namespace mvaf
