#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mvaf/ops.hpp"
#include "mvaf/random.hpp"

namespace mvaf {

// Named parameter tensors, iterated in name order.
template <typename Real>
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor<Real>>;

  Tensor<Real>& add(const std::string& name, Tensor<Real> value);
  Tensor<Real>& get(const std::string& name);
  const Tensor<Real>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return entries_.contains(name); }

  Map& entries() { return entries_; }
  const Map& entries() const { return entries_; }
  std::vector<std::string> names() const;
  // Total scalar count.
  std::size_t parameter_count() const;
  void zero_grad();

  template <typename Other>
  ParamStore<Other> cast() const {
    ParamStore<Other> out;
    for (const auto& [name, t] : entries_) out.add(name, t.template cast<Other>());
    return out;
  }

  bool operator==(const ParamStore& other) const { return entries_ == other.entries_; }

 private:
  Map entries_;
};

template <typename Real>
using Gradients = std::map<std::string, std::vector<Real>>;

// Binds store entries to tape leaves on first use within one forward pass.
template <typename Real>
class ParamBinder {
 public:
  ParamBinder(Tape<Real>& tape, const ParamStore<Real>& store) : tape_(tape), store_(store) {}

  Var<Real> operator()(const std::string& name);
  Tape<Real>& tape() { return tape_; }
  const ParamStore<Real>& store() const { return store_; }

  // Adds tape gradients of every bound parameter into `sink` (after backward).
  void collect(Gradients<Real>& sink) const;
  // Same, into each tensor's grad buffer.
  void collect(ParamStore<Real>& target) const;

 private:
  Tape<Real>& tape_;
  const ParamStore<Real>& store_;
  std::map<std::string, Var<Real>> bound_;
};

// Weights [in, out] and bias [out], both uniform(-1/sqrt(in), 1/sqrt(in)).
template <typename Real>
void init_linear(ParamStore<Real>& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng);

template <typename Real>
Var<Real> linear(ParamBinder<Real>& params, const std::string& prefix, Var<Real> x);

enum class MaskKind { Full, SVA, DVA };

const char* mask_kind_name(MaskKind kind);

// Token x token visibility over `views` blocks of `tokens_per_view` tokens.
struct AttentionMask {
  MaskKind kind = MaskKind::Full;
  std::size_t views = 1;
  std::size_t tokens_per_view = 1;
  std::vector<std::uint8_t> unmasked;  // row = query, column = key

  std::size_t tokens() const { return views * tokens_per_view; }
  std::size_t view_of(std::size_t token) const { return token / tokens_per_view; }
  bool is_unmasked(std::size_t q, std::size_t k) const { return unmasked[q * tokens() + k] != 0; }
  std::size_t unmasked_count() const;

  // Additionally hides every key belonging to a view flagged in `hidden`.
  AttentionMask hide_key_views(const std::vector<bool>& hidden) const;

  template <typename Real>
  Tensor<Real> additive() const;
};

AttentionMask build_attention_mask(MaskKind kind, std::size_t views, std::size_t tokens_per_view);

struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  MaskKind kind = MaskKind::Full;
  Tensor<double> weights;  // [Mt, Mt], post-softmax
};

template <typename Real>
struct AttentionOutput {
  Var<Real> output;
  // Per-head weights, filled only when recording was requested.
  std::vector<Tensor<double>> head_weights;
  std::size_t all_masked_queries = 0;
};

struct AttentionOptions {
  std::size_t heads = 4;
  bool record = false;
  double dropout = 0.0;
  std::uint64_t dropout_seed = 0;
};

// Scaled dot-product attention with projections prefix.{q,k,v,o}. The same
// mask is shared by every head. A query whose keys are all masked yields an
// exactly-zero output row. `mask == nullptr` means no masking at all.
template <typename Real>
AttentionOutput<Real> multi_head_attention(ParamBinder<Real>& params, const std::string& prefix,
                                           Var<Real> query_input, Var<Real> kv_input,
                                           const AttentionMask* mask, const AttentionOptions& options);

template <typename Real>
void init_attention(ParamStore<Real>& store, const std::string& prefix, std::size_t channels, Rng& rng);

// linear(c -> 4c) -> gelu -> linear(4c -> c) under prefix.fc1 / prefix.fc2.
template <typename Real>
Var<Real> ffn(ParamBinder<Real>& params, const std::string& prefix, Var<Real> x);

template <typename Real>
void init_ffn(ParamStore<Real>& store, const std::string& prefix, std::size_t channels, Rng& rng);

// CSV: layer,head,kind,q_view,q_row,q_col,k_view,k_row,k_col,weight with one
// row per nonzero weight. Tokens within a view are laid out on a grid of
// width `grid_width`.
void write_attention_csv(std::ostream& os, const std::vector<AttentionRecord>& records,
                         std::size_t tokens_per_view, std::size_t grid_width);

}  // namespace mvaf
