#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mvaf/model.hpp"
#include "mvaf/synth.hpp"

namespace mvaf {

// Mean over all (person, class) of -[y log p + (1-y) log(1-p)], with p
// clamped to [1e-7, 1-1e-7]; the clamp passes no gradient.
template <typename Real>
Var<Real> bce_loss(Var<Real> probabilities, const Tensor<Real>& targets);

inline constexpr double kBceClamp = 1e-7;

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

struct OptimizerState {
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  std::uint64_t step = 0;
};

// Decay applies to names ending in ".weight" (not biases, norms, view embeddings).
bool decays(const std::string& parameter_name);

// One decoupled-weight-decay Adam update:
//   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + lambda * theta).
// Parameters without a gradient entry are treated as having zero gradient.
template <typename Real>
void adamw_step(ParamStore<Real>& params, const Gradients<Real>& grads, OptimizerState& state, double lr,
                const AdamWConfig& config);

// lr_min + (lr0 - lr_min)(1 + cos(pi step / total)) / 2, for 0 <= step <= total.
double cosine_lr(std::uint64_t step, std::uint64_t total, double lr0 = 1e-4, double lr_min = 1e-6);

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  double lr0 = 1e-4;
  double lr_min = 1e-6;
  AdamWConfig adamw;
  std::uint64_t seed = 0;
  double threshold = 0.5;
  std::size_t min_support = 5;
  bool eval_each_epoch = true;
};

void validate_train_config(const TrainConfig& config);

// A model plus the dataset views it reads: model view i is dataset view views[i].
struct RunSpec {
  ModelConfig model;
  std::vector<std::size_t> views;
};

RunSpec full_run(const ModelConfig& model, std::size_t dataset_views);
RunSpec single_view_run(const ModelConfig& model, std::size_t view);

struct LogRow {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double lr = 0;
  double loss = 0;
};

struct MetricReport {
  std::size_t classes = 0;
  std::vector<std::size_t> tp, fp, fn, support;
  std::vector<double> precision, recall, f;
  std::vector<std::size_t> included, excluded;
  double macro_precision = 0, macro_recall = 0, macro_f = 0;

  bool operator==(const MetricReport&) const = default;
};

struct EpochRow {
  std::size_t epoch = 0;
  double mean_loss = 0;
  bool has_metrics = false;
  MetricReport metrics;
};

struct TrainResult {
  ParamStore<float> params;
  std::vector<LogRow> log;
  std::vector<EpochRow> epochs;
};

// Worker count from MVAF_THREADS (default 1).
std::size_t worker_threads();

ParamStore<float> init_run_params(const RunSpec& run, std::uint64_t seed);

TrainResult train(const Dataset& data, const std::vector<std::size_t>& train_indices,
                  const std::vector<std::size_t>& eval_indices, const RunSpec& run, const TrainConfig& config);

// Per-sample probability vectors, in `indices` order.
std::vector<std::vector<float>> predict_samples(const ParamStore<float>& params, const RunSpec& run,
                                                const Dataset& data, const std::vector<std::size_t>& indices);

// Per-class counts from thresholded probabilities; classes with fewer than
// `min_support` positives are excluded from the macro means.
MetricReport compute_metrics(const std::vector<std::vector<float>>& probabilities,
                             const std::vector<std::vector<std::uint8_t>>& labels, std::size_t classes,
                             double threshold, std::size_t min_support);

MetricReport evaluate(const ParamStore<float>& params, const RunSpec& run, const Dataset& data,
                      const std::vector<std::size_t>& indices, double threshold, std::size_t min_support);

// class,tp,fp,fn,precision,recall,f for included classes, then a macro line.
void write_metric_csv(std::ostream& os, const MetricReport& report);
void write_train_log(std::ostream& os, const std::vector<LogRow>& log);
void write_epoch_csv(std::ostream& os, const std::vector<EpochRow>& epochs);

// Multiply-accumulate estimate of one person's forward pass, times two.
double flops_estimate(const RunSpec& run, const SceneConfig& scene);

struct BaselineRow {
  std::string method;
  MetricReport report;
  double flops = 0;
};

// single_view, ensemble, pooled_vector, vanilla_self, sva_dva; every method
// trains with the same seed and budget.
std::vector<BaselineRow> run_baselines(const Dataset& data, const Split& split, const ModelConfig& model,
                                       const TrainConfig& config, std::size_t single_view = 0,
                                       const std::function<void(const std::string&)>& progress = {});

void write_baseline_csv(std::ostream& os, const std::vector<BaselineRow>& rows);

}  // namespace mvaf
