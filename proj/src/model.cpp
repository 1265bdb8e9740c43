#include "mvaf/model.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <tuple>

#include "mvaf/blob_io.hpp"

namespace mvaf {

const char* cooperation_mode_name(CooperationMode mode) {
  switch (mode) {
    case CooperationMode::SvaDva: return "sva_dva";
    case CooperationMode::VanillaSelf: return "vanilla_self";
    case CooperationMode::PooledVector: return "pooled_vector";
  }
  return "?";
}

CooperationMode parse_cooperation_mode(const std::string& text) {
  for (auto m : {CooperationMode::SvaDva, CooperationMode::VanillaSelf, CooperationMode::PooledVector})
    if (text == cooperation_mode_name(m)) return m;
  throw ConfigError("unknown cooperation mode '" + text + "' (sva_dva, vanilla_self, pooled_vector)");
}

const char* combination_name(SublayerCombination combination) {
  return combination == SublayerCombination::ParallelSum ? "parallel_sum" : "sequential";
}

SublayerCombination parse_combination(const std::string& text) {
  if (text == "parallel_sum") return SublayerCombination::ParallelSum;
  if (text == "sequential") return SublayerCombination::Sequential;
  throw ConfigError("unknown sublayer combination '" + text + "' (parallel_sum, sequential)");
}

void validate_model_config(const ModelConfig& config) {
  const std::size_t c = config.encoder.channels;
  const auto& coop = config.cooperation;
  if (c == 0 || c % 4 != 0) throw ConfigError("channels must be a positive multiple of 4, got " + std::to_string(c));
  if (coop.layers == 0) throw ConfigError("cooperation needs at least one layer");
  if (coop.heads == 0 || c % coop.heads != 0)
    throw ConfigError("heads (" + std::to_string(coop.heads) + ") must divide channels (" + std::to_string(c) + ")");
  if (config.views == 0) throw ConfigError("views must be positive");
  if (config.classes == 0) throw ConfigError("classes must be positive");
  if (coop.dropout < 0 || coop.dropout >= 1) throw ConfigError("dropout must be in [0, 1)");
  if (!(config.layer_norm_eps > 0)) throw ConfigError("layer norm eps must be positive");
}

namespace {

std::string layer_name(std::size_t l) { return "layer" + std::to_string(l); }

template <typename Real>
void init_norm(ParamStore<Real>& store, const std::string& prefix, std::size_t c) {
  store.add(prefix + ".gamma", Tensor<Real>({c}, Real(1)));
  store.add(prefix + ".beta", Tensor<Real>({c}, Real(0)));
}

template <typename Real>
Var<Real> norm(ParamBinder<Real>& params, const ModelConfig& config, const std::string& prefix, Var<Real> x) {
  return layer_norm(x, params(prefix + ".gamma"), params(prefix + ".beta"), Real(config.layer_norm_eps));
}

}  // namespace

template <typename Real>
void init_model(ParamStore<Real>& store, const ModelConfig& config, Rng& rng) {
  validate_model_config(config);
  const std::size_t c = config.encoder.channels;
  init_encoder(store, config.encoder, rng);
  for (std::size_t m = 0; m < config.views; ++m)
    store.add("view_embed." + std::to_string(m), Tensor<Real>({c}, Real(0)));
  for (std::size_t l = 0; l < config.cooperation.layers; ++l) {
    const std::string p = layer_name(l);
    const bool divided = config.cooperation.mode == CooperationMode::SvaDva;
    init_attention(store, p + (divided ? ".sva" : ".self"), c, rng);
    if (divided && config.cooperation.combination == SublayerCombination::Sequential) init_norm(store, p + ".norm_dva", c);
    init_norm(store, p + ".norm1", c);
    init_ffn(store, p + ".ffn", c, rng);
    init_norm(store, p + ".norm2", c);
  }
  init_linear(store, "classifier", c, config.classes, rng);
  // Drawn last so that every parameter shared with VANILLA_SELF (self <-> sva)
  // starts from the same values under the same seed.
  if (config.cooperation.mode == CooperationMode::SvaDva)
    for (std::size_t l = 0; l < config.cooperation.layers; ++l) init_attention(store, layer_name(l) + ".dva", c, rng);
}

template <typename Real>
Tensor<Real> sinusoidal_position_embeddings(std::size_t tokens, std::size_t channels) {
  if (channels == 0 || channels % 4 != 0)
    throw ConfigError("position embeddings need channels divisible by 4, got " + std::to_string(channels));
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(double(tokens))));
  if (side * side != tokens) throw ConfigError("position embeddings need a square token grid");
  const std::size_t half = channels / 2;
  Tensor<Real> pe({tokens, channels});
  for (std::size_t pos = 0; pos < tokens; ++pos) {
    const double coord[2] = {double(pos / side), double(pos % side)};
    for (std::size_t axis = 0; axis < 2; ++axis)
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(10000.0, double(2 * (i / 2)) / double(half));
        const double angle = coord[axis] / freq;
        pe.at(pos, axis * half + i) = Real(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
      }
  }
  return pe;
}

template <typename Real>
Var<Real> add_embeddings(Var<Real> flat, Var<Real> position, Var<Real> view_embedding) {
  if (flat.shape() != position.shape())
    throw DimensionError("add_embeddings: features " + shape_str(flat.shape()) + " vs position " +
                         shape_str(position.shape()));
  if (view_embedding.shape() != Shape{flat.shape().back()})
    throw DimensionError("add_embeddings: view embedding " + shape_str(view_embedding.shape()) +
                         " does not match width " + std::to_string(flat.shape().back()));
  return add(add(flat, position), view_embedding);
}

template <typename Real>
CooperationResult<Real> cooperation_forward(ParamBinder<Real>& params, const ModelConfig& config,
                                            const std::vector<Var<Real>>& blocks, const std::vector<bool>* missing,
                                            const ForwardOptions& options) {
  const auto& coop = config.cooperation;
  if (blocks.empty()) throw ContractError("cooperation_forward: no view blocks");
  const std::size_t views = blocks.size();
  const std::size_t t = blocks[0].shape()[0];
  for (const auto& b : blocks)
    if (b.shape() != blocks[0].shape())
      throw DimensionError("cooperation_forward: view blocks differ: " + shape_str(b.shape()) + " vs " +
                           shape_str(blocks[0].shape()));

  auto build = [&](MaskKind kind) {
    static thread_local std::map<std::tuple<MaskKind, std::size_t, std::size_t>, AttentionMask> cache;
    auto key = std::make_tuple(kind, views, t);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, build_attention_mask(kind, views, t)).first;
    AttentionMask mask = it->second;
    if (coop.mask_missing_views && missing != nullptr) mask = mask.hide_key_views(*missing);
    return mask;
  };
  const bool divided = coop.mode == CooperationMode::SvaDva;
  const AttentionMask full = divided ? AttentionMask{} : build(MaskKind::Full);
  const AttentionMask sva = divided ? build(MaskKind::SVA) : AttentionMask{};
  const AttentionMask dva = divided ? build(MaskKind::DVA) : AttentionMask{};

  CooperationResult<Real> result;
  const double rate = options.training ? coop.dropout : 0.0;
  std::uint64_t sublayer = 0;
  auto attend = [&](std::size_t l, const std::string& name, MaskKind kind, const AttentionMask& mask, Var<Real> x) {
    AttentionOptions ao{.heads = coop.heads,
                        .record = options.record,
                        .dropout = rate,
                        .dropout_seed = Rng::mix(options.dropout_seed ^ Rng::mix(++sublayer))};
    auto out = multi_head_attention(params, layer_name(l) + "." + name, x, x, &mask, ao);
    for (std::size_t h = 0; h < out.head_weights.size(); ++h)
      result.records.push_back({l, h, kind, std::move(out.head_weights[h])});
    return out.output;
  };

  Var<Real> x = concat(blocks, 0);
  for (std::size_t l = 0; l < coop.layers; ++l) {
    const std::string p = layer_name(l);
    Var<Real> y;
    if (!divided) {
      y = norm(params, config, p + ".norm1", add(x, attend(l, "self", MaskKind::Full, full, x)));
    } else if (coop.combination == SublayerCombination::ParallelSum) {
      auto s = attend(l, "sva", MaskKind::SVA, sva, x);
      auto d = attend(l, "dva", MaskKind::DVA, dva, x);
      y = norm(params, config, p + ".norm1", add(add(x, s), d));
    } else {
      auto y1 = norm(params, config, p + ".norm1", add(x, attend(l, "sva", MaskKind::SVA, sva, x)));
      y = norm(params, config, p + ".norm_dva", add(y1, attend(l, "dva", MaskKind::DVA, dva, y1)));
    }
    auto f = dropout(ffn(params, p + ".ffn", y), Real(rate), Rng::mix(options.dropout_seed ^ Rng::mix(++sublayer)));
    x = norm(params, config, p + ".norm2", add(y, f));
  }
  result.tokens = x;
  return result;
}

template <typename Real>
Var<Real> joint_representation(Var<Real> tokens) {
  if (tokens.shape().size() != 2) throw DimensionError("joint_representation: tokens must be [n, c]");
  return max_over_axis(tokens, 0);
}

template <typename Real>
Var<Real> classify(ParamBinder<Real>& params, Var<Real> joint) {
  const std::size_t c = joint.size();
  const auto& w = params.store().get("classifier.weight");
  if (joint.shape() != Shape{c} || w.dim(0) != c)
    throw DimensionError("classify: feature " + shape_str(joint.shape()) + " vs classifier " +
                         shape_str(w.shape()));
  auto logits = linear(params, "classifier", reshape(joint, {1, c}));
  return reshape(sigmoid(logits), {w.dim(1)});
}

template <typename Real>
PersonOutput<Real> forward_person(ParamBinder<Real>& params, const ModelConfig& config,
                                  const std::vector<Var<Real>>& features, const std::vector<bool>& missing,
                                  const ForwardOptions& options) {
  if (features.size() != config.views || missing.size() != config.views)
    throw DimensionError("forward_person: expected " + std::to_string(config.views) + " views, got " +
                         std::to_string(features.size()));
  const std::size_t c = config.encoder.channels;
  std::vector<Var<Real>> blocks;
  if (config.cooperation.mode == CooperationMode::PooledVector) {
    for (std::size_t m = 0; m < features.size(); ++m) {
      auto flat = reshape(features[m], {features[m].size() / c, c});
      blocks.push_back(add(reshape(mean_over_axis(flat, 0), {1, c}), params("view_embed." + std::to_string(m))));
    }
  } else {
    const std::size_t t = features[0].size() / c;
    auto pe = params.tape().constant(sinusoidal_position_embeddings<Real>(t, c));
    for (std::size_t m = 0; m < features.size(); ++m)
      blocks.push_back(
          add_embeddings(reshape(features[m], {t, c}), pe, params("view_embed." + std::to_string(m))));
  }
  auto coop = cooperation_forward(params, config, blocks, &missing, options);
  return {classify(params, joint_representation(coop.tokens)), std::move(coop.records)};
}

template <typename Real>
std::vector<PersonOutput<Real>> forward_persons(ParamBinder<Real>& params, const ModelConfig& config,
                                                const std::vector<Video>& videos,
                                                const std::vector<std::vector<BoundingBox>>& boxes,
                                                const ForwardOptions& options) {
  if (videos.size() != config.views)
    throw DimensionError("forward: model expects " + std::to_string(config.views) + " views, got " +
                         std::to_string(videos.size()));
  auto features = extract_person_feature_vars(params, config.encoder, videos, boxes);
  const std::size_t M = videos.size();
  std::vector<PersonOutput<Real>> out;
  for (std::size_t n = 0; n < boxes.size(); ++n) {
    std::vector<Var<Real>> person(features.begin() + long(n * M), features.begin() + long((n + 1) * M));
    std::vector<bool> missing(M);
    for (std::size_t m = 0; m < M; ++m) missing[m] = boxes[n][m].missing;
    ForwardOptions po = options;
    po.dropout_seed = Rng::mix(options.dropout_seed + n);
    out.push_back(forward_person(params, config, person, missing, po));
  }
  return out;
}

template <typename Real>
std::vector<Tensor<Real>> predict(const ParamStore<Real>& store, const ModelConfig& config,
                                  const std::vector<Video>& videos,
                                  const std::vector<std::vector<BoundingBox>>& boxes) {
  Tape<Real> tape;
  ParamBinder<Real> params(tape, store);
  std::vector<Tensor<Real>> out;
  for (auto& p : forward_persons(params, config, videos, boxes)) out.push_back(p.probabilities.tensor());
  return out;
}

std::vector<std::uint8_t> threshold_labels(const Tensor<float>& probabilities, double threshold) {
  std::vector<std::uint8_t> labels(probabilities.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = probabilities[i] >= threshold ? 1 : 0;
  return labels;
}

template <typename Real>
void write_checkpoint(std::ostream& os, const ParamStore<Real>& store) {
  binary::write_magic(os, "MVCK");
  binary::write_u32(os, kCheckpointVersion);
  binary::write_u32(os, std::uint32_t(store.entries().size()));
  for (const auto& [name, tensor] : store.entries()) {
    if (name.size() > 0xffff) throw FormatError("parameter name too long: " + name);
    binary::write_u16(os, std::uint16_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    write_tensor(os, tensor);
  }
}

template <typename Real>
ParamStore<Real> read_checkpoint(std::istream& is) {
  binary::expect_magic(is, "MVCK", "checkpoint");
  const auto version = binary::read_u32(is);
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = binary::read_u32(is);
  ParamStore<Real> store;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(binary::read_u16(is), '\0');
    if (!is.read(name.data(), std::streamsize(name.size()))) throw FormatError("checkpoint: truncated name");
    store.add(name, read_tensor<Real>(is));
  }
  return store;
}

template <typename Real>
void save_checkpoint(const std::string& path, const ParamStore<Real>& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write checkpoint " + path);
  write_checkpoint(os, store);
  if (!os) throw FormatError("failed writing checkpoint " + path);
}

template <typename Real>
ParamStore<Real> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path);
  return read_checkpoint<Real>(is);
}

#define MVAF_INSTANTIATE_MODEL(R)                                                                            \
  template void init_model(ParamStore<R>&, const ModelConfig&, Rng&);                                        \
  template Tensor<R> sinusoidal_position_embeddings<R>(std::size_t, std::size_t);                            \
  template Var<R> add_embeddings(Var<R>, Var<R>, Var<R>);                                                    \
  template CooperationResult<R> cooperation_forward(ParamBinder<R>&, const ModelConfig&,                     \
                                                    const std::vector<Var<R>>&, const std::vector<bool>*,    \
                                                    const ForwardOptions&);                                  \
  template Var<R> joint_representation(Var<R>);                                                              \
  template Var<R> classify(ParamBinder<R>&, Var<R>);                                                         \
  template PersonOutput<R> forward_person(ParamBinder<R>&, const ModelConfig&, const std::vector<Var<R>>&,   \
                                          const std::vector<bool>&, const ForwardOptions&);                  \
  template std::vector<PersonOutput<R>> forward_persons(ParamBinder<R>&, const ModelConfig&,                 \
                                                        const std::vector<Video>&,                           \
                                                        const std::vector<std::vector<BoundingBox>>&,        \
                                                        const ForwardOptions&);                              \
  template std::vector<Tensor<R>> predict(const ParamStore<R>&, const ModelConfig&, const std::vector<Video>&, \
                                          const std::vector<std::vector<BoundingBox>>&);                     \
  template void write_checkpoint(std::ostream&, const ParamStore<R>&);                                       \
  template ParamStore<R> read_checkpoint<R>(std::istream&);                                                  \
  template void save_checkpoint(const std::string&, const ParamStore<R>&);                                   \
  template ParamStore<R> load_checkpoint<R>(const std::string&);

MVAF_INSTANTIATE_MODEL(float)
MVAF_INSTANTIATE_MODEL(double)

}  // namespace mvaf
