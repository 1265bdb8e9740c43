#include "mvaf/nn.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>

namespace mvaf {

template <typename Real>
Tensor<Real>& ParamStore<Real>::add(const std::string& name, Tensor<Real> value) {
  auto [it, inserted] = entries_.emplace(name, std::move(value));
  if (!inserted) throw ContractError("duplicate parameter name " + name);
  return it->second;
}

template <typename Real>
Tensor<Real>& ParamStore<Real>::get(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw LookupError("unknown parameter " + name);
  return it->second;
}

template <typename Real>
const Tensor<Real>& ParamStore<Real>::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw LookupError("unknown parameter " + name);
  return it->second;
}

template <typename Real>
std::vector<std::string> ParamStore<Real>::names() const {
  std::vector<std::string> out;
  for (const auto& [name, t] : entries_) out.push_back(name);
  return out;
}

template <typename Real>
std::size_t ParamStore<Real>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

template <typename Real>
void ParamStore<Real>::zero_grad() {
  for (auto& [name, t] : entries_) {
    t.ensure_grad();
    t.zero_grad();
  }
}

template <typename Real>
Var<Real> ParamBinder<Real>::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var<Real> v = tape_.leaf(store_.get(name));
  bound_.emplace(name, v);
  return v;
}

template <typename Real>
void ParamBinder<Real>::collect(Gradients<Real>& sink) const {
  for (const auto& [name, v] : bound_) {
    auto g = v.grad();
    if (g.empty()) continue;
    auto& dst = sink[name];
    if (dst.empty()) dst.assign(g.size(), Real(0));
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
}

template <typename Real>
void ParamBinder<Real>::collect(ParamStore<Real>& target) const {
  for (const auto& [name, v] : bound_) {
    auto g = v.grad();
    if (g.empty()) continue;
    auto dst = target.get(name).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
}

template <typename Real>
void init_linear(ParamStore<Real>& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(double(in));
  Tensor<Real> w({in, out});
  for (auto& v : w.data()) v = Real(rng.uniform(-bound, bound));
  Tensor<Real> b({out});
  for (auto& v : b.data()) v = Real(rng.uniform(-bound, bound));
  store.add(prefix + ".weight", std::move(w));
  store.add(prefix + ".bias", std::move(b));
}

template <typename Real>
Var<Real> linear(ParamBinder<Real>& params, const std::string& prefix, Var<Real> x) {
  return add(matmul(x, params(prefix + ".weight")), params(prefix + ".bias"));
}

const char* mask_kind_name(MaskKind kind) {
  switch (kind) {
    case MaskKind::Full: return "self";
    case MaskKind::SVA: return "sva";
    case MaskKind::DVA: return "dva";
  }
  return "?";
}

std::size_t AttentionMask::unmasked_count() const {
  std::size_t n = 0;
  for (auto u : unmasked) n += u;
  return n;
}

AttentionMask AttentionMask::hide_key_views(const std::vector<bool>& hidden) const {
  if (hidden.size() != views) throw DimensionError("hide_key_views: one flag per view required");
  AttentionMask out = *this;
  const std::size_t n = tokens();
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t k = 0; k < n; ++k)
      if (hidden[view_of(k)]) out.unmasked[q * n + k] = 0;
  return out;
}

template <typename Real>
Tensor<Real> AttentionMask::additive() const {
  const std::size_t n = tokens();
  Tensor<Real> m({n, n});
  for (std::size_t i = 0; i < n * n; ++i) m[i] = unmasked[i] ? Real(0) : mask_value<Real>();
  return m;
}

AttentionMask build_attention_mask(MaskKind kind, std::size_t views, std::size_t tokens_per_view) {
  if (views == 0 || tokens_per_view == 0) throw ContractError("attention mask needs M >= 1 and t >= 1");
  AttentionMask mask;
  mask.kind = kind;
  mask.views = views;
  mask.tokens_per_view = tokens_per_view;
  const std::size_t n = views * tokens_per_view;
  mask.unmasked.assign(n * n, 0);
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t k = 0; k < n; ++k) {
      const bool same = q / tokens_per_view == k / tokens_per_view;
      bool open = true;
      if (kind == MaskKind::SVA) open = same;
      if (kind == MaskKind::DVA) open = !same;
      mask.unmasked[q * n + k] = open ? 1 : 0;
    }
  return mask;
}

template <typename Real>
void init_attention(ParamStore<Real>& store, const std::string& prefix, std::size_t channels, Rng& rng) {
  for (const char* p : {".q", ".k", ".v", ".o"}) init_linear(store, prefix + p, channels, channels, rng);
}

namespace {

bool block_diagonal(const AttentionMask& mask) {
  const std::size_t n = mask.tokens();
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t k = 0; k < n; ++k)
      if (mask.unmasked[q * n + k] && mask.view_of(q) != mask.view_of(k)) return false;
  return true;
}

// Same math as the dense path when every open key shares the query's view:
// attention runs per view over [heads, M, t, t] score blocks.
template <typename Real>
AttentionOutput<Real> block_attention(ParamBinder<Real>& params, const std::string& prefix, Var<Real> query_input,
                                      Var<Real> kv_input, const AttentionMask& mask,
                                      const AttentionOptions& options) {
  const std::size_t m = mask.views, t = mask.tokens_per_view, n = mask.tokens();
  const std::size_t c = query_input.shape()[1], heads = options.heads, d = c / heads;
  auto split = [&](Var<Real> x, std::vector<std::size_t> order) {
    return permute(reshape(x, {m, t, heads, d}), order);
  };
  auto q = split(linear(params, prefix + ".q", query_input), {2, 0, 1, 3});
  auto kt = split(linear(params, prefix + ".k", kv_input), {2, 0, 3, 1});
  auto v = split(linear(params, prefix + ".v", kv_input), {2, 0, 1, 3});
  auto scores = scale(matmul(q, kt), Real(1) / std::sqrt(Real(d)));

  Tensor<Real> additive({m, t, t});
  for (std::size_t b = 0; b < m; ++b)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < t; ++j)
        additive[(b * t + i) * t + j] = mask.is_unmasked(b * t + i, b * t + j) ? Real(0) : mask_value<Real>();
  SoftmaxStatus status;
  auto weights = masked_softmax_lastdim(scores, &additive, &status);

  AttentionOutput<Real> result;
  if (options.record) {
    auto w = weights.value();
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor<double> hw({n, n});
      for (std::size_t b = 0; b < m; ++b)
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < t; ++j)
            hw[(b * t + i) * n + b * t + j] = double(w[((h * m + b) * t + i) * t + j]);
      result.head_weights.push_back(std::move(hw));
    }
  }
  auto ctx = reshape(permute(matmul(weights, v), {1, 2, 0, 3}), {n, c});
  auto out = linear(params, prefix + ".o", ctx);
  if (status.all_masked_rows > 0) {
    std::vector<bool> keep(n);
    for (std::size_t i = 0; i < n; ++i) keep[i] = !status.row_all_masked[i];
    for (bool k : keep) result.all_masked_queries += k ? 0 : 1;
    out = mask_rows(out, keep);
  }
  result.output = dropout(out, Real(options.dropout), options.dropout_seed);
  return result;
}

}  // namespace

template <typename Real>
AttentionOutput<Real> multi_head_attention(ParamBinder<Real>& params, const std::string& prefix,
                                           Var<Real> query_input, Var<Real> kv_input,
                                           const AttentionMask* mask, const AttentionOptions& options) {
  const Shape& qs = query_input.shape();
  const Shape& ks = kv_input.shape();
  if (qs.size() != 2 || ks.size() != 2 || qs[1] != ks[1])
    throw DimensionError("attention: query " + shape_str(qs) + " and key/value " + shape_str(ks) +
                         " must be [tokens, c] with equal c");
  const std::size_t nq = qs[0], nk = ks[0], c = qs[1], heads = options.heads;
  if (heads == 0 || c % heads != 0)
    throw DimensionError("attention: width " + std::to_string(c) + " not divisible by " +
                         std::to_string(heads) + " heads");
  if (mask != nullptr && (mask->tokens() != nq || mask->tokens() != nk))
    throw DimensionError("attention: mask covers " + std::to_string(mask->tokens()) + " tokens, inputs have " +
                         std::to_string(nq) + " queries and " + std::to_string(nk) + " keys");
  const std::size_t d = c / heads;
  if (mask != nullptr && mask->views > 1 && block_diagonal(*mask))
    return block_attention(params, prefix, query_input, kv_input, *mask, options);

  auto q = permute(reshape(linear(params, prefix + ".q", query_input), {nq, heads, d}), {1, 0, 2});
  auto kt = permute(reshape(linear(params, prefix + ".k", kv_input), {nk, heads, d}), {1, 2, 0});
  auto v = permute(reshape(linear(params, prefix + ".v", kv_input), {nk, heads, d}), {1, 0, 2});
  auto scores = scale(matmul(q, kt), Real(1) / std::sqrt(Real(d)));

  AttentionOutput<Real> result;
  SoftmaxStatus status;
  Var<Real> weights;
  if (mask != nullptr) {
    const Tensor<Real> additive = mask->additive<Real>();
    weights = masked_softmax_lastdim(scores, &additive, &status);
  } else {
    weights = masked_softmax_lastdim(scores);
  }
  if (options.record) {
    auto w = weights.value();
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor<double> hw({nq, nk});
      for (std::size_t i = 0; i < nq * nk; ++i) hw[i] = double(w[h * nq * nk + i]);
      result.head_weights.push_back(std::move(hw));
    }
  }
  auto ctx = reshape(permute(matmul(weights, v), {1, 0, 2}), {nq, c});
  auto out = linear(params, prefix + ".o", ctx);
  if (status.all_masked_rows > 0) {
    // Masks are shared across heads, so head 0's flags describe every head.
    std::vector<bool> keep(nq);
    for (std::size_t i = 0; i < nq; ++i) keep[i] = !status.row_all_masked[i];
    for (bool k : keep) result.all_masked_queries += k ? 0 : 1;
    out = mask_rows(out, keep);
  }
  result.output = dropout(out, Real(options.dropout), options.dropout_seed);
  return result;
}

template <typename Real>
void init_ffn(ParamStore<Real>& store, const std::string& prefix, std::size_t channels, Rng& rng) {
  init_linear(store, prefix + ".fc1", channels, 4 * channels, rng);
  init_linear(store, prefix + ".fc2", 4 * channels, channels, rng);
}

template <typename Real>
Var<Real> ffn(ParamBinder<Real>& params, const std::string& prefix, Var<Real> x) {
  return linear(params, prefix + ".fc2", gelu(linear(params, prefix + ".fc1", x)));
}

void write_attention_csv(std::ostream& os, const std::vector<AttentionRecord>& records,
                         std::size_t tokens_per_view, std::size_t grid_width) {
  os << "layer,head,kind,q_view,q_row,q_col,k_view,k_row,k_col,weight\n";
  os << std::setprecision(9);
  for (const auto& rec : records) {
    const std::size_t n = rec.weights.dim(0);
    for (std::size_t q = 0; q < n; ++q)
      for (std::size_t k = 0; k < n; ++k) {
        const double w = rec.weights.at(q, k);
        if (w == 0.0) continue;
        const std::size_t qt = q % tokens_per_view, kt = k % tokens_per_view;
        os << rec.layer << ',' << rec.head << ',' << mask_kind_name(rec.kind) << ',' << q / tokens_per_view << ','
           << qt / grid_width << ',' << qt % grid_width << ',' << k / tokens_per_view << ',' << kt / grid_width
           << ',' << kt % grid_width << ',' << w << '\n';
      }
  }
}

#define MVAF_INSTANTIATE_NN(R)                                                                          \
  template class ParamStore<R>;                                                                         \
  template class ParamBinder<R>;                                                                        \
  template void init_linear(ParamStore<R>&, const std::string&, std::size_t, std::size_t, Rng&);        \
  template Var<R> linear(ParamBinder<R>&, const std::string&, Var<R>);                                  \
  template Tensor<R> AttentionMask::additive<R>() const;                                                \
  template void init_attention(ParamStore<R>&, const std::string&, std::size_t, Rng&);                  \
  template AttentionOutput<R> multi_head_attention(ParamBinder<R>&, const std::string&, Var<R>, Var<R>, \
                                                   const AttentionMask*, const AttentionOptions&);      \
  template void init_ffn(ParamStore<R>&, const std::string&, std::size_t, Rng&);                        \
  template Var<R> ffn(ParamBinder<R>&, const std::string&, Var<R>);

MVAF_INSTANTIATE_NN(float)
MVAF_INSTANTIATE_NN(double)

}  // namespace mvaf
