#include "mvaf/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numbers>
#include <ostream>
#include <thread>

namespace mvaf {

template <typename Real>
Var<Real> bce_loss(Var<Real> probabilities, const Tensor<Real>& targets) {
  if (probabilities.shape() != targets.shape())
    throw DimensionError("bce_loss: probabilities " + shape_str(probabilities.shape()) + " vs targets " +
                         shape_str(targets.shape()));
  auto p = probabilities.value();
  auto y = targets.data();
  const double count = double(p.size());
  double total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(double(p[i]), kBceClamp, 1 - kBceClamp);
    total -= double(y[i]) * std::log(q) + (1 - double(y[i])) * std::log(1 - q);
  }
  const int ip = probabilities.id();
  std::vector<Real> targ(y.begin(), y.end());
  return probabilities.tape().record({1}, {Real(total / count)}, {ip},
                                     [ip, count, targ = std::move(targ)](Tape<Real>& tape, int self) {
                                       const double g = double(tape.grad(self)[0]);
                                       auto pv = tape.value(ip);
                                       auto gp = tape.accumulate(ip);
                                       for (std::size_t i = 0; i < gp.size(); ++i) {
                                         const double q = double(pv[i]);
                                         if (q < kBceClamp || q > 1 - kBceClamp) continue;
                                         const double t = double(targ[i]);
                                         gp[i] += Real(g * (-t / q + (1 - t) / (1 - q)) / count);
                                       }
                                     });
}

bool decays(const std::string& name) { return name.ends_with(".weight"); }

template <typename Real>
void adamw_step(ParamStore<Real>& params, const Gradients<Real>& grads, OptimizerState& state, double lr,
                const AdamWConfig& config) {
  ++state.step;
  const double t = double(state.step);
  const double c1 = 1 - std::pow(config.beta1, t), c2 = 1 - std::pow(config.beta2, t);
  for (auto& [name, tensor] : params.entries()) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(tensor.size(), 0.0);
      v.assign(tensor.size(), 0.0);
    }
    if (m.size() != tensor.size()) throw DimensionError("adamw_step: moment size mismatch for " + name);
    auto it = grads.find(name);
    if (it != grads.end() && it->second.size() != tensor.size())
      throw DimensionError("adamw_step: gradient size mismatch for " + name);
    const double lambda = decays(name) ? config.weight_decay : 0.0;
    auto data = tensor.data();
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double g = it == grads.end() ? 0.0 : double(it->second[i]);
      m[i] = config.beta1 * m[i] + (1 - config.beta1) * g;
      v[i] = config.beta2 * v[i] + (1 - config.beta2) * g * g;
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      const double theta = double(data[i]);
      data[i] = Real(theta - lr * (mhat / (std::sqrt(vhat) + config.eps) + lambda * theta));
    }
  }
}

double cosine_lr(std::uint64_t step, std::uint64_t total, double lr0, double lr_min) {
  if (total == 0 || step > total)
    throw ContractError("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
  if (step == 0) return lr0;
  if (step == total) return lr_min;
  return lr_min + 0.5 * (lr0 - lr_min) * (1 + std::cos(std::numbers::pi * double(step) / double(total)));
}

void validate_train_config(const TrainConfig& c) {
  if (c.batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(c.lr0 > c.lr_min && c.lr_min > 0)) throw ConfigError("need lr0 > lr_min > 0");
  if (c.adamw.weight_decay < 0) throw ConfigError("weight decay must be non-negative");
  if (!(c.threshold > 0 && c.threshold < 1)) throw ConfigError("threshold must be in (0, 1)");
}

RunSpec full_run(const ModelConfig& model, std::size_t dataset_views) {
  RunSpec run{model, {}};
  run.model.views = dataset_views;
  for (std::size_t m = 0; m < dataset_views; ++m) run.views.push_back(m);
  return run;
}

RunSpec single_view_run(const ModelConfig& model, std::size_t view) {
  RunSpec run{model, {view}};
  run.model.views = 1;
  run.model.cooperation.mode = CooperationMode::VanillaSelf;
  return run;
}

std::size_t worker_threads() {
  if (const char* env = std::getenv("MVAF_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return std::size_t(n);
  }
  return 1;
}

ParamStore<float> init_run_params(const RunSpec& run, std::uint64_t seed) {
  ParamStore<float> store;
  Rng rng = Rng::stream(seed, 0x1417);
  init_model(store, run.model, rng);
  return store;
}

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t n, Fn fn) {
  const std::size_t threads = std::min(worker_threads(), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

using SegmentKey = std::pair<std::size_t, std::size_t>;

class SegmentCache {
 public:
  SegmentCache(const Dataset& data, const std::vector<std::size_t>& views) : data_(data), views_(views) {}

  const std::vector<Video>& get(std::size_t clip, std::size_t keyframe) {
    auto key = SegmentKey{clip, keyframe};
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    auto all = data_.clips[clip].segment(keyframe);
    std::vector<Video> chosen;
    for (auto m : views_) {
      if (m >= all.size()) throw LookupError("dataset has no view " + std::to_string(m));
      chosen.push_back(all[m]);
    }
    return cache_.emplace(key, std::move(chosen)).first->second;
  }

  // Fills the cache up front so concurrent readers never insert.
  void warm(const std::vector<std::size_t>& indices) {
    for (auto i : indices) get(data_.samples[i].clip, data_.samples[i].keyframe);
  }

 private:
  const Dataset& data_;
  std::vector<std::size_t> views_;
  std::map<SegmentKey, std::vector<Video>> cache_;
};

// Sample indices grouped by (clip, keyframe), groups in first-appearance order.
std::vector<std::vector<std::size_t>> group_by_keyframe(const Dataset& data, const std::vector<std::size_t>& indices) {
  std::vector<std::vector<std::size_t>> groups;
  std::map<SegmentKey, std::size_t> where;
  for (auto i : indices) {
    const auto& s = data.samples[i];
    auto [it, fresh] = where.emplace(SegmentKey{s.clip, s.keyframe}, groups.size());
    if (fresh) groups.emplace_back();
    groups[it->second].push_back(i);
  }
  return groups;
}

std::vector<std::vector<BoundingBox>> boxes_for(const Dataset& data, const std::vector<std::size_t>& group,
                                                const RunSpec& run) {
  std::vector<std::vector<BoundingBox>> boxes;
  for (auto i : group) {
    std::vector<BoundingBox> b;
    for (auto m : run.views) b.push_back(data.samples[i].boxes.at(m));
    boxes.push_back(std::move(b));
  }
  return boxes;
}

}  // namespace

std::vector<std::vector<float>> predict_samples(const ParamStore<float>& params, const RunSpec& run,
                                                const Dataset& data, const std::vector<std::size_t>& indices) {
  SegmentCache cache(data, run.views);
  cache.warm(indices);
  auto groups = group_by_keyframe(data, indices);
  std::vector<std::vector<std::vector<float>>> per_group(groups.size());
  parallel_for(groups.size(), [&](std::size_t g) {
    const auto& s = data.samples[groups[g][0]];
    auto probs = predict(params, run.model, cache.get(s.clip, s.keyframe), boxes_for(data, groups[g], run));
    for (auto& p : probs) per_group[g].push_back(p.values());
  });
  std::map<std::size_t, std::vector<float>> by_index;
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t k = 0; k < groups[g].size(); ++k) by_index[groups[g][k]] = std::move(per_group[g][k]);
  std::vector<std::vector<float>> out;
  for (auto i : indices) out.push_back(by_index.at(i));
  return out;
}

MetricReport compute_metrics(const std::vector<std::vector<float>>& probabilities,
                             const std::vector<std::vector<std::uint8_t>>& labels, std::size_t classes,
                             double threshold, std::size_t min_support) {
  if (probabilities.size() != labels.size())
    throw DimensionError("compute_metrics: " + std::to_string(probabilities.size()) + " predictions for " +
                         std::to_string(labels.size()) + " label sets");
  MetricReport r;
  r.classes = classes;
  r.tp.assign(classes, 0);
  r.fp.assign(classes, 0);
  r.fn.assign(classes, 0);
  r.support.assign(classes, 0);
  r.precision.assign(classes, 0);
  r.recall.assign(classes, 0);
  r.f.assign(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (probabilities[i].size() != classes || labels[i].size() != classes)
      throw DimensionError("compute_metrics: row " + std::to_string(i) + " does not have " +
                           std::to_string(classes) + " classes");
    for (std::size_t c = 0; c < classes; ++c) {
      const bool predicted = probabilities[i][c] >= threshold;
      const bool actual = labels[i][c] != 0;
      r.support[c] += actual;
      if (predicted && actual) ++r.tp[c];
      if (predicted && !actual) ++r.fp[c];
      if (!predicted && actual) ++r.fn[c];
    }
  }
  for (std::size_t c = 0; c < classes; ++c) {
    const double tp = double(r.tp[c]);
    r.precision[c] = r.tp[c] + r.fp[c] == 0 ? 0.0 : tp / double(r.tp[c] + r.fp[c]);
    r.recall[c] = r.tp[c] + r.fn[c] == 0 ? 0.0 : tp / double(r.tp[c] + r.fn[c]);
    const double pr = r.precision[c] + r.recall[c];
    r.f[c] = pr == 0 ? 0.0 : 2 * r.precision[c] * r.recall[c] / pr;
    (r.support[c] >= min_support ? r.included : r.excluded).push_back(c);
  }
  if (r.included.empty()) throw EvaluationError("no class has at least " + std::to_string(min_support) + " positives");
  for (auto c : r.included) {
    r.macro_precision += r.precision[c];
    r.macro_recall += r.recall[c];
    r.macro_f += r.f[c];
  }
  const double n = double(r.included.size());
  r.macro_precision /= n;
  r.macro_recall /= n;
  r.macro_f /= n;
  return r;
}

MetricReport evaluate(const ParamStore<float>& params, const RunSpec& run, const Dataset& data,
                      const std::vector<std::size_t>& indices, double threshold, std::size_t min_support) {
  if (indices.empty()) throw EvaluationError("evaluation split is empty");
  std::vector<std::vector<std::uint8_t>> labels;
  for (auto i : indices) labels.push_back(data.samples[i].labels);
  return compute_metrics(predict_samples(params, run, data, indices), labels, run.model.classes, threshold,
                         min_support);
}

TrainResult train(const Dataset& data, const std::vector<std::size_t>& train_indices,
                  const std::vector<std::size_t>& eval_indices, const RunSpec& run, const TrainConfig& config) {
  validate_train_config(config);
  validate_model_config(run.model);
  if (train_indices.empty()) throw TrainingError("training split is empty");
  if (run.views.size() != run.model.views) throw ConfigError("run view list does not match model views");

  TrainResult result;
  result.params = init_run_params(run, config.seed);
  OptimizerState state;
  SegmentCache cache(data, run.views);
  cache.warm(train_indices);

  const std::size_t B = config.batch_size;
  const std::size_t batches = (train_indices.size() + B - 1) / B;
  const std::uint64_t total_steps = std::uint64_t(batches) * config.epochs;
  const std::size_t classes = run.model.classes;
  std::uint64_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order = train_indices;
    Rng shuffle = Rng::stream(config.seed, 0x5eed0000 + epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double epoch_loss = 0;
    for (std::size_t b = 0; b < batches; ++b, ++step) {
      std::vector<std::size_t> batch(order.begin() + long(b * B),
                                     order.begin() + long(std::min(order.size(), (b + 1) * B)));
      auto groups = group_by_keyframe(data, batch);
      std::vector<Gradients<float>> grads(groups.size());
      std::vector<double> losses(groups.size(), 0.0);
      parallel_for(groups.size(), [&](std::size_t g) {
        const auto& group = groups[g];
        const auto& first = data.samples[group[0]];
        Tape<float> tape;
        ParamBinder<float> params(tape, result.params);
        ForwardOptions fo{.record = false,
                          .dropout_seed = Rng::mix(config.seed ^ Rng::mix(step * 1000003 + g)),
                          .training = true};
        auto outs = forward_persons(params, run.model, cache.get(first.clip, first.keyframe),
                                    boxes_for(data, group, run), fo);
        std::vector<Var<float>> rows;
        Tensor<float> targets({group.size(), classes});
        for (std::size_t k = 0; k < group.size(); ++k) {
          rows.push_back(reshape(outs[k].probabilities, {1, classes}));
          for (std::size_t c = 0; c < classes; ++c) targets.at(k, c) = float(data.samples[group[k]].labels[c]);
        }
        auto loss = scale(bce_loss(concat(rows, 0), targets), float(group.size()) / float(batch.size()));
        losses[g] = double(loss.value()[0]);
        tape.backward(loss);
        params.collect(grads[g]);
      });
      Gradients<float> total;
      double loss = 0;
      for (std::size_t g = 0; g < groups.size(); ++g) {
        loss += losses[g];
        for (auto& [name, gv] : grads[g]) {
          auto& dst = total[name];
          if (dst.empty()) dst.assign(gv.size(), 0.0f);
          for (std::size_t i = 0; i < gv.size(); ++i) dst[i] += gv[i];
        }
      }
      if (!std::isfinite(loss))
        throw TrainingError("loss became non-finite at epoch " + std::to_string(epoch) + " batch " +
                            std::to_string(b));
      const double lr = cosine_lr(step, total_steps, config.lr0, config.lr_min);
      adamw_step(result.params, total, state, lr, config.adamw);
      result.log.push_back({epoch, b, lr, loss});
      epoch_loss += loss;
    }
    EpochRow row{epoch, epoch_loss / double(batches), false, {}};
    if (config.eval_each_epoch && !eval_indices.empty()) {
      row.metrics = evaluate(result.params, run, data, eval_indices, config.threshold, config.min_support);
      row.has_metrics = true;
    }
    result.epochs.push_back(std::move(row));
  }
  return result;
}

namespace {

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string class_name(std::size_t c) {
  return c < kClassNames.size() ? kClassNames[c] : "class" + std::to_string(c);
}

}  // namespace

void write_metric_csv(std::ostream& os, const MetricReport& r) {
  os << "class,tp,fp,fn,precision,recall,f\n";
  for (auto c : r.included)
    os << class_name(c) << ',' << r.tp[c] << ',' << r.fp[c] << ',' << r.fn[c] << ',' << fixed(r.precision[c]) << ','
       << fixed(r.recall[c]) << ',' << fixed(r.f[c]) << '\n';
  os << "macro,,,," << fixed(r.macro_precision) << ',' << fixed(r.macro_recall) << ',' << fixed(r.macro_f) << '\n';
}

void write_train_log(std::ostream& os, const std::vector<LogRow>& log) {
  os << "epoch,batch,lr,loss\n";
  for (const auto& row : log)
    os << row.epoch << ',' << row.batch << ',' << format_real(row.lr) << ',' << format_real(row.loss) << '\n';
}

void write_epoch_csv(std::ostream& os, const std::vector<EpochRow>& epochs) {
  os << "epoch,mean_loss,precision,recall,f\n";
  for (const auto& e : epochs) {
    os << e.epoch << ',' << format_real(e.mean_loss);
    if (e.has_metrics) {
      os << ',' << fixed(e.metrics.macro_precision) << ',' << fixed(e.metrics.macro_recall) << ','
         << fixed(e.metrics.macro_f);
    } else {
      os << ",,,";
    }
    os << '\n';
  }
}

double flops_estimate(const RunSpec& run, const SceneConfig& scene) {
  const auto& m = run.model;
  const double c = double(m.encoder.channels), p = double(m.encoder.patch);
  const double views = double(run.views.size());
  const double patches = (double(scene.height) / p) * (double(scene.width) / p);
  double macs = views * (double(scene.frames) * patches * (p * p * 3 * c + c) + patches * 8 * c * c);
  const double roi = 49.0;
  macs += views * roi * 4 * c;
  const double tokens = m.cooperation.mode == CooperationMode::PooledVector ? views : views * roi;
  const double attentions = m.cooperation.mode == CooperationMode::SvaDva ? 2 : 1;
  const double per_layer = attentions * (4 * tokens * c * c + 2 * tokens * tokens * c) + 8 * tokens * c * c;
  macs += double(m.cooperation.layers) * per_layer + c * double(m.classes);
  return 2 * macs;
}

std::vector<BaselineRow> run_baselines(const Dataset& data, const Split& split, const ModelConfig& model,
                                       const TrainConfig& config, std::size_t single_view,
                                       const std::function<void(const std::string&)>& progress) {
  const std::size_t M = data.config.views;
  if (M < 2) throw ConfigError("baselines need a dataset with at least two views");
  if (single_view >= M) throw ConfigError("single view index out of range");
  TrainConfig quiet = config;
  quiet.eval_each_epoch = false;
  auto note = [&](const std::string& s) {
    if (progress) progress(s);
  };
  std::vector<std::vector<std::uint8_t>> labels;
  for (auto i : split.eval) labels.push_back(data.samples[i].labels);
  std::vector<BaselineRow> rows;

  auto train_and_eval = [&](const std::string& name, const RunSpec& run) {
    note(name);
    auto trained = train(data, split.train, {}, run, quiet);
    rows.push_back({name, evaluate(trained.params, run, data, split.eval, config.threshold, config.min_support),
                    flops_estimate(run, data.config)});
  };

  // The single-view model doubles as the ensemble member for that view.
  note("single_view");
  std::vector<std::vector<std::vector<float>>> per_view(M);
  {
    auto run = single_view_run(model, single_view);
    auto trained = train(data, split.train, {}, run, quiet);
    per_view[single_view] = predict_samples(trained.params, run, data, split.eval);
    rows.push_back({"single_view",
                    compute_metrics(per_view[single_view], labels, model.classes, config.threshold, config.min_support),
                    flops_estimate(run, data.config)});
  }

  note("ensemble");
  for (std::size_t m = 0; m < M; ++m) {
    if (m == single_view) continue;
    auto run = single_view_run(model, m);
    auto trained = train(data, split.train, {}, run, quiet);
    per_view[m] = predict_samples(trained.params, run, data, split.eval);
  }
  std::vector<std::vector<float>> ensemble(split.eval.size(), std::vector<float>(model.classes, 0.0f));
  for (std::size_t i = 0; i < split.eval.size(); ++i) {
    const auto& boxes = data.samples[split.eval[i]].boxes;
    std::size_t used = 0;
    for (std::size_t m = 0; m < M; ++m)
      if (!boxes[m].missing) ++used;
    for (std::size_t m = 0; m < M; ++m) {
      if (used > 0 && boxes[m].missing) continue;
      for (std::size_t c = 0; c < model.classes; ++c) ensemble[i][c] += per_view[m][i][c];
    }
    const float n = float(used > 0 ? used : M);
    for (auto& v : ensemble[i]) v /= n;
  }
  rows.push_back({"ensemble", compute_metrics(ensemble, labels, model.classes, config.threshold, config.min_support),
                  double(M) * flops_estimate(single_view_run(model, 0), data.config)});

  ModelConfig pooled = model;
  pooled.cooperation.mode = CooperationMode::PooledVector;
  train_and_eval("pooled_vector", full_run(pooled, M));
  ModelConfig vanilla = model;
  vanilla.cooperation.mode = CooperationMode::VanillaSelf;
  train_and_eval("vanilla_self", full_run(vanilla, M));
  ModelConfig divided = model;
  divided.cooperation.mode = CooperationMode::SvaDva;
  train_and_eval("sva_dva", full_run(divided, M));
  return rows;
}

void write_baseline_csv(std::ostream& os, const std::vector<BaselineRow>& rows) {
  os << "method,precision,recall,f,flops_estimate\n";
  for (const auto& r : rows)
    os << r.method << ',' << fixed(r.report.macro_precision) << ',' << fixed(r.report.macro_recall) << ','
       << fixed(r.report.macro_f) << ',' << format_real(r.flops) << '\n';
}

template Var<float> bce_loss(Var<float>, const Tensor<float>&);
template Var<double> bce_loss(Var<double>, const Tensor<double>&);
template void adamw_step(ParamStore<float>&, const Gradients<float>&, OptimizerState&, double, const AdamWConfig&);
template void adamw_step(ParamStore<double>&, const Gradients<double>&, OptimizerState&, double, const AdamWConfig&);

}  // namespace mvaf
