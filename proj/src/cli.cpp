#include "mvaf/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace mvaf {

FlatConfig store_run_config(const RunConfig& c) {
  FlatConfig out;
  store_scene_config(c.scene, out, "scene.");
  const auto& e = c.model.encoder;
  const auto& k = c.model.cooperation;
  out.set("model.channels", std::uint64_t(e.channels));
  out.set("model.patch", std::uint64_t(e.patch));
  out.set("model.temporal_bands", std::uint64_t(e.temporal_bands));
  out.set("model.layers", std::uint64_t(k.layers));
  out.set("model.heads", std::uint64_t(k.heads));
  out.set("model.mode", cooperation_mode_name(k.mode));
  out.set("model.combination", combination_name(k.combination));
  out.set("model.dropout", k.dropout);
  out.set("model.mask_missing_views", k.mask_missing_views);
  out.set("model.layer_norm_eps", c.model.layer_norm_eps);
  const auto& t = c.train;
  out.set("train.batch_size", std::uint64_t(t.batch_size));
  out.set("train.epochs", std::uint64_t(t.epochs));
  out.set("train.lr0", t.lr0);
  out.set("train.lr_min", t.lr_min);
  out.set("train.beta1", t.adamw.beta1);
  out.set("train.beta2", t.adamw.beta2);
  out.set("train.eps", t.adamw.eps);
  out.set("train.weight_decay", t.adamw.weight_decay);
  out.set("train.seed", std::uint64_t(t.seed));
  out.set("train.threshold", t.threshold);
  out.set("train.min_support", std::uint64_t(t.min_support));
  out.set("train.eval_each_epoch", t.eval_each_epoch);
  const auto& s = c.split;
  out.set("split.train_fraction", s.train_fraction);
  out.set("split.seed", std::uint64_t(s.seed));
  out.set("split.tolerance", s.tolerance);
  out.set("split.restarts", std::uint64_t(s.restarts));
  out.set("split.min_support", std::uint64_t(s.min_support));
  out.set("compare.single_view", std::uint64_t(c.single_view));
  return out;
}

FlatConfig default_run_config() { return store_run_config(RunConfig{}); }

RunConfig resolve_run_config(const FlatConfig& overrides) {
  FlatConfig in = default_run_config();
  for (const auto& [key, value] : overrides.values())
    if (!in.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  in.merge(overrides);

  RunConfig c;
  c.scene = load_scene_config(in, "scene.");
  auto& e = c.model.encoder;
  auto& k = c.model.cooperation;
  e.channels = in.get_uint("model.channels", e.channels);
  e.patch = in.get_uint("model.patch", e.patch);
  e.temporal_bands = in.get_uint("model.temporal_bands", e.temporal_bands);
  k.layers = in.get_uint("model.layers", k.layers);
  k.heads = in.get_uint("model.heads", k.heads);
  k.mode = parse_cooperation_mode(in.get_string("model.mode", ""));
  k.combination = parse_combination(in.get_string("model.combination", ""));
  k.dropout = in.get_real("model.dropout", k.dropout);
  k.mask_missing_views = in.get_bool("model.mask_missing_views", k.mask_missing_views);
  c.model.layer_norm_eps = in.get_real("model.layer_norm_eps", c.model.layer_norm_eps);
  c.model.views = c.scene.views;
  c.model.classes = c.scene.classes;
  validate_model_config(c.model);
  validate_encoder_config(e, c.scene.height, c.scene.width);

  auto& t = c.train;
  t.batch_size = in.get_uint("train.batch_size", t.batch_size);
  t.epochs = in.get_uint("train.epochs", t.epochs);
  t.lr0 = in.get_real("train.lr0", t.lr0);
  t.lr_min = in.get_real("train.lr_min", t.lr_min);
  t.adamw.beta1 = in.get_real("train.beta1", t.adamw.beta1);
  t.adamw.beta2 = in.get_real("train.beta2", t.adamw.beta2);
  t.adamw.eps = in.get_real("train.eps", t.adamw.eps);
  t.adamw.weight_decay = in.get_real("train.weight_decay", t.adamw.weight_decay);
  t.seed = in.get_uint("train.seed", t.seed);
  t.threshold = in.get_real("train.threshold", t.threshold);
  t.min_support = in.get_uint("train.min_support", t.min_support);
  t.eval_each_epoch = in.get_bool("train.eval_each_epoch", t.eval_each_epoch);
  validate_train_config(t);

  auto& s = c.split;
  s.train_fraction = in.get_real("split.train_fraction", s.train_fraction);
  s.seed = in.get_uint("split.seed", s.seed);
  s.tolerance = in.get_real("split.tolerance", s.tolerance);
  s.restarts = in.get_uint("split.restarts", s.restarts);
  s.min_support = in.get_uint("split.min_support", s.min_support);
  if (!(s.train_fraction > 0 && s.train_fraction < 1)) throw ConfigError("split.train_fraction must be in (0, 1)");
  c.single_view = in.get_uint("compare.single_view", c.single_view);
  if (c.single_view >= c.scene.views) throw ConfigError("compare.single_view is not a valid view index");
  return c;
}

std::vector<AttentionRecord> sample_attention(const ParamStore<float>& store, const RunSpec& run, const Dataset& data,
                                              std::size_t sample) {
  if (sample >= data.samples.size()) throw LookupError("sample index out of range");
  const auto& s = data.samples[sample];
  const auto segment = data.clips.at(s.clip).segment(s.keyframe);
  std::vector<Video> videos;
  std::vector<BoundingBox> boxes;
  for (auto m : run.views) {
    videos.push_back(segment.at(m));
    boxes.push_back(s.boxes.at(m));
  }
  Tape<float> tape;
  ParamBinder<float> params(tape, store);
  auto outs = forward_persons(params, run.model, videos, {boxes}, ForwardOptions{.record = true});
  return std::move(outs.at(0).records);
}

void write_heatmap_ppm(std::ostream& os, const AttentionRecord& record, std::size_t t, std::size_t query_view) {
  const std::size_t n = record.weights.dim(0);
  if (t == 0 || n % t != 0 || record.weights.dim(1) != n)
    throw DimensionError("heatmap: record is not a square multi-view block");
  if ((query_view + 1) * t > n) throw LookupError("heatmap: query view out of range");
  double peak = 0;
  for (std::size_t q = 0; q < t; ++q)
    for (std::size_t k = 0; k < n; ++k) peak = std::max(peak, record.weights.at(query_view * t + q, k));
  os << "P6\n" << n << ' ' << t << "\n255\n";
  for (std::size_t q = 0; q < t; ++q)
    for (std::size_t k = 0; k < n; ++k) {
      const double w = record.weights.at(query_view * t + q, k);
      const auto level = static_cast<unsigned char>(peak > 0 ? std::lround(255.0 * w / peak) : 0);
      const unsigned char rgb[3] = {level, level, level};
      os.write(reinterpret_cast<const char*>(rgb), 3);
    }
}

namespace {

struct CommonOptions {
  std::string config;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool has_seed = false;
};

RunConfig gather(const CommonOptions& o) {
  FlatConfig overrides;
  if (!o.config.empty()) overrides = FlatConfig::load(o.config);
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    overrides.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (o.has_seed) {
    overrides.set("scene.seed", o.seed);
    overrides.set("train.seed", o.seed);
    overrides.set("split.seed", o.seed);
  }
  return resolve_run_config(overrides);
}

// Dataset on disk is authoritative for the scene.
RunConfig with_dataset(RunConfig c, const Dataset& data) {
  c.scene = data.config;
  c.model.views = data.config.views;
  c.model.classes = data.config.classes;
  validate_model_config(c.model);
  validate_encoder_config(c.model.encoder, c.scene.height, c.scene.width);
  if (c.single_view >= c.scene.views) throw ConfigError("compare.single_view is not a valid view index");
  return c;
}

template <typename Fn>
void write_file(const std::string& path, Fn fn, bool binary = false) {
  std::ofstream os(path, binary ? std::ios::binary : std::ios::out);
  if (!os) throw FormatError("cannot write " + path);
  fn(os);
  if (!os) throw FormatError("failed writing " + path);
}

std::size_t find_sample(const Dataset& data, const std::string& clip, std::size_t keyframe, std::size_t person) {
  std::size_t clip_index = data.clips.size();
  for (std::size_t i = 0; i < data.clips.size(); ++i)
    if (data.clips[i].id == clip) clip_index = i;
  if (clip_index == data.clips.size()) throw LookupError("no clip '" + clip + "'");
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    if (s.clip == clip_index && s.keyframe == keyframe && s.person == person) return i;
  }
  throw LookupError("clip '" + clip + "' has no person " + std::to_string(person) + " at keyframe " +
                    std::to_string(keyframe));
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-view action recognition with divided view attention"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  CommonOptions common;
  std::string out_path, data_dir, checkpoint, clip;
  std::size_t keyframe = 0, person = 0, query_view = 0;

  auto add_common = [&](CLI::App* cmd, bool with_config) {
    if (with_config) {
      cmd->add_option("--config", common.config, "flat key=value config file");
      cmd->add_option("--set", common.sets, "override one config entry (key=value)");
      cmd->add_option_function<std::uint64_t>(
          "--seed",
          [&](const std::uint64_t& s) {
            common.seed = s;
            common.has_seed = true;
          },
          "seed for scene generation, splitting and training");
    }
  };

  auto* gen = app.add_subcommand("gen-data", "render the synthetic multi-view dataset");
  add_common(gen, true);
  gen->add_option("--out", out_path, "dataset directory")->required();

  auto* tr = app.add_subcommand("train", "train a model on a generated dataset");
  add_common(tr, true);
  tr->add_option("--data", data_dir, "dataset directory")->required();
  tr->add_option("--out", out_path, "checkpoint path")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the evaluation split");
  ev->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--out", out_path, "metric CSV path (default: stdout)");

  auto* cmp = app.add_subcommand("compare", "train and evaluate every baseline");
  add_common(cmp, true);
  cmp->add_option("--data", data_dir, "dataset directory")->required();
  cmp->add_option("--out", out_path, "comparison CSV path (default: stdout)");

  auto* dump = app.add_subcommand("dump-attention", "export attention weights for one person");
  dump->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();
  dump->add_option("--data", data_dir, "dataset directory")->required();
  dump->add_option("--clip", clip, "clip id, e.g. scene_0003")->required();
  dump->add_option("--keyframe", keyframe, "keyframe index")->required();
  dump->add_option("--person", person, "person index")->required();
  dump->add_option("--query-view", query_view, "view whose queries the heatmaps show");
  dump->add_option("--out", out_path, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "mvaf: " << e.what() << '\n';
    return 2;
  }

  try {
    if (gen->parsed()) {
      const RunConfig c = gather(common);
      const Dataset data = generate_dataset(c.scene);
      write_dataset(out_path, data);
      out << "wrote " << data.clips.size() << " clips and " << data.samples.size() << " person samples to "
          << out_path << '\n';
    } else if (tr->parsed()) {
      const Dataset data = load_dataset(data_dir);
      const RunConfig c = with_dataset(gather(common), data);
      const Split split = split_dataset(data.samples, c.scene.classes, c.split);
      const RunSpec run = full_run(c.model, c.scene.views);
      const TrainResult result = train(data, split.train, split.eval, run, c.train);
      save_checkpoint(out_path, result.params);
      write_file(out_path + ".log.csv", [&](std::ostream& os) { write_train_log(os, result.log); });
      write_file(out_path + ".epochs.csv", [&](std::ostream& os) { write_epoch_csv(os, result.epochs); });
      store_run_config(c).save(out_path + ".config");
      out << "trained " << cooperation_mode_name(c.model.cooperation.mode) << " for " << c.train.epochs
          << " epochs on " << split.train.size() << " samples; final loss "
          << (result.epochs.empty() ? 0.0 : result.epochs.back().mean_loss) << '\n';
    } else if (ev->parsed()) {
      const Dataset data = load_dataset(data_dir);
      const RunConfig c = with_dataset(resolve_run_config(FlatConfig::load(checkpoint + ".config")), data);
      const auto params = load_checkpoint<float>(checkpoint);
      const Split split = split_dataset(data.samples, c.scene.classes, c.split);
      const auto report = evaluate(params, full_run(c.model, c.scene.views), data, split.eval, c.train.threshold,
                                   c.train.min_support);
      if (out_path.empty()) {
        write_metric_csv(out, report);
      } else {
        write_file(out_path, [&](std::ostream& os) { write_metric_csv(os, report); });
      }
    } else if (cmp->parsed()) {
      const Dataset data = load_dataset(data_dir);
      const RunConfig c = with_dataset(gather(common), data);
      const Split split = split_dataset(data.samples, c.scene.classes, c.split);
      auto rows = run_baselines(data, split, c.model, c.train, c.single_view,
                                [&](const std::string& m) { err << "training " << m << '\n'; });
      if (out_path.empty()) {
        write_baseline_csv(out, rows);
      } else {
        write_file(out_path, [&](std::ostream& os) { write_baseline_csv(os, rows); });
      }
    } else if (dump->parsed()) {
      const Dataset data = load_dataset(data_dir);
      const RunConfig c = with_dataset(resolve_run_config(FlatConfig::load(checkpoint + ".config")), data);
      const auto params = load_checkpoint<float>(checkpoint);
      const std::size_t sample = find_sample(data, clip, keyframe, person);
      const RunSpec run = full_run(c.model, c.scene.views);
      if (query_view >= run.model.views) throw LookupError("query view out of range");
      const auto records = sample_attention(params, run, data, sample);
      const RoiAlignOptions roi;
      const std::size_t t = roi.output_size * roi.output_size;
      std::error_code ec;
      std::filesystem::create_directories(out_path, ec);
      write_file(out_path + "/attention.csv",
                 [&](std::ostream& os) { write_attention_csv(os, records, t, roi.output_size); });
      for (const auto& r : records) {
        const std::string name = out_path + "/layer" + std::to_string(r.layer) + "_head" + std::to_string(r.head) +
                                 "_" + mask_kind_name(r.kind) + ".ppm";
        write_file(name, [&](std::ostream& os) { write_heatmap_ppm(os, r, t, query_view); }, true);
      }
      out << "wrote " << records.size() << " attention maps to " << out_path << '\n';
    }
  } catch (const std::exception& e) {
    std::string message = e.what();
    std::replace(message.begin(), message.end(), '\n', ' ');
    err << "mvaf: " << message << '\n';
    return 1;
  }
  return 0;
}

}  // namespace mvaf
