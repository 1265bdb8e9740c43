#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "mvaf/config.hpp"
#include "mvaf/encoder.hpp"

namespace mvaf {

// Motion classes first, then the appearance-pulse classes.
inline constexpr std::array<const char*, 8> kClassNames = {"still",     "move_x",      "move_y",     "diagonal",
                                                           "circle_cw", "circle_ccw", "pulse_slow", "pulse_fast"};
inline constexpr std::size_t kMotionClasses = 6;

struct SceneConfig {
  std::uint64_t seed = 7;
  std::size_t scenes = 50;
  std::size_t views = 4;
  std::size_t persons_min = 2;
  std::size_t persons_max = 3;
  std::size_t keyframes = 2;
  std::size_t frames = 8;  // per keyframe segment
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t classes = 8;
  double radius = 0.09;     // disc radius, arena units
  double amplitude = 0.14;  // motion excursion
  std::size_t occluders = 2;
  double occluder_min = 0.25;  // rectangle side range, arena units
  double occluder_max = 0.45;
  // Odd views keep the horizontal coordinate, even views the vertical one;
  // the other axis is replaced by anchor + uniform jitter of this amplitude.
  bool axis_corruption = true;
  double noise = 0.05;
  double pixel_noise = 0.02;
  // Per-view camera response: background 0.2 +- exposure/2, disc gain in [1 - exposure, 1].
  double exposure = 0.0;
  double missing_coverage = 0.9;
};

void validate_scene_config(const SceneConfig& config);
void store_scene_config(const SceneConfig& config, FlatConfig& out, const std::string& prefix = "scene.");
SceneConfig load_scene_config(const FlatConfig& in, const std::string& prefix = "scene.");

struct Annotation {
  std::string clip;
  std::size_t keyframe = 0;
  std::size_t view = 0;
  std::size_t person = 0;
  BoundingBox box;  // missing when fully occluded
  std::vector<std::size_t> labels;

  bool operator==(const Annotation&) const = default;
};

// All views of one scene: videos[m] is [keyframes * frames, H, W, 3].
struct MultiViewClip {
  std::string id;
  std::size_t frames_per_keyframe = 0;
  std::vector<Video> videos;

  std::size_t views() const { return videos.size(); }
  std::size_t keyframes() const;
  // The frames of one keyframe segment, per view.
  std::vector<Video> segment(std::size_t keyframe) const;
  bool operator==(const MultiViewClip&) const = default;
};

struct Scene {
  MultiViewClip clip;
  std::vector<Annotation> annotations;
};

std::string clip_id(std::size_t index);

// Pure function of (config, index).
Scene generate_scene(const SceneConfig& config, std::size_t index);

// "MVAF" clip file: version, M, T, H, W (u32), then M "MVTF" blobs.
inline constexpr std::uint32_t kClipVersion = 1;
void write_clip(std::ostream& os, const MultiViewClip& clip);
MultiViewClip read_clip(std::istream& is, const std::string& id, std::size_t frames_per_keyframe);

// CSV, one row per (clip, keyframe, view, person, action); a missing box has
// empty coordinates and a person without actions has an empty action field.
void write_annotations(std::ostream& os, const std::vector<Annotation>& annotations);
std::vector<Annotation> read_annotations(std::istream& is);
void save_annotations(const std::string& path, const std::vector<Annotation>& annotations);
std::vector<Annotation> load_annotations(const std::string& path);

// One training/evaluation unit: one person at one keyframe, all views.
struct PersonSample {
  std::size_t clip = 0;  // index into Dataset::clips
  std::size_t keyframe = 0;
  std::size_t person = 0;
  std::vector<BoundingBox> boxes;  // per view
  std::vector<std::uint8_t> labels;  // multi-hot [classes]
};

struct Dataset {
  SceneConfig config;
  std::vector<MultiViewClip> clips;
  std::vector<PersonSample> samples;
};

// Groups annotations into per-person samples; clips are matched by id.
std::vector<PersonSample> build_samples(const std::vector<MultiViewClip>& clips,
                                        const std::vector<Annotation>& annotations, std::size_t classes);
Dataset generate_dataset(const SceneConfig& config);

// Disk layout: <dir>/<clip>.mvaf, annotations.csv, manifest.txt, scene.config.
void write_dataset(const std::string& dir, const Dataset& dataset);
Dataset load_dataset(const std::string& dir);

struct SplitOptions {
  double train_fraction = 0.7;
  std::uint64_t seed = 0;
  double tolerance = 0.10;  // max relative class-frequency difference
  std::size_t restarts = 200;
  // Classes with fewer positives than this overall are not balanced.
  std::size_t min_support = 5;
};

struct Split {
  std::vector<std::size_t> train;  // sample indices
  std::vector<std::size_t> eval;
  double worst_relative_difference = 0;
};

// Person-granular split: all keyframes of one (clip, person) land on one side.
Split split_dataset(const std::vector<PersonSample>& samples, std::size_t classes, const SplitOptions& options);

}  // namespace mvaf
