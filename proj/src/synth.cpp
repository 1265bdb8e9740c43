#include "mvaf/synth.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>
#include <tuple>

#include "mvaf/blob_io.hpp"

namespace mvaf {

void validate_scene_config(const SceneConfig& c) {
  auto fail = [](const std::string& msg) { throw ConfigError("scene config: " + msg); };
  if (c.views == 0) fail("views must be positive");
  if (c.persons_min == 0 || c.persons_max < c.persons_min) fail("need 1 <= persons_min <= persons_max");
  if (c.keyframes == 0 || c.frames == 0) fail("keyframes and frames must be positive");
  if (c.height < 2 || c.width < 2) fail("resolution must be at least 2x2");
  if (c.classes < 2 || c.classes > kClassNames.size())
    fail("classes must be in [2, " + std::to_string(kClassNames.size()) + "]");
  if (!(c.radius > 0) || c.amplitude < 0) fail("radius must be positive and amplitude non-negative");
  if (c.occluder_min < 0 || c.occluder_max < c.occluder_min) fail("need 0 <= occluder_min <= occluder_max");
  if (c.noise < 0 || c.pixel_noise < 0) fail("noise levels must be non-negative");
  if (c.exposure < 0 || c.exposure > 0.4) fail("exposure must be in [0, 0.4]");
  if (!(c.missing_coverage > 0 && c.missing_coverage <= 1)) fail("missing_coverage must be in (0, 1]");
}

void store_scene_config(const SceneConfig& c, FlatConfig& out, const std::string& p) {
  out.set(p + "seed", std::uint64_t(c.seed));
  out.set(p + "scenes", std::uint64_t(c.scenes));
  out.set(p + "views", std::uint64_t(c.views));
  out.set(p + "persons_min", std::uint64_t(c.persons_min));
  out.set(p + "persons_max", std::uint64_t(c.persons_max));
  out.set(p + "keyframes", std::uint64_t(c.keyframes));
  out.set(p + "frames", std::uint64_t(c.frames));
  out.set(p + "height", std::uint64_t(c.height));
  out.set(p + "width", std::uint64_t(c.width));
  out.set(p + "classes", std::uint64_t(c.classes));
  out.set(p + "radius", c.radius);
  out.set(p + "amplitude", c.amplitude);
  out.set(p + "occluders", std::uint64_t(c.occluders));
  out.set(p + "occluder_min", c.occluder_min);
  out.set(p + "occluder_max", c.occluder_max);
  out.set(p + "axis_corruption", c.axis_corruption);
  out.set(p + "noise", c.noise);
  out.set(p + "pixel_noise", c.pixel_noise);
  out.set(p + "exposure", c.exposure);
  out.set(p + "missing_coverage", c.missing_coverage);
}

SceneConfig load_scene_config(const FlatConfig& in, const std::string& p) {
  SceneConfig c;
  c.seed = in.get_uint(p + "seed", c.seed);
  c.scenes = in.get_uint(p + "scenes", c.scenes);
  c.views = in.get_uint(p + "views", c.views);
  c.persons_min = in.get_uint(p + "persons_min", c.persons_min);
  c.persons_max = in.get_uint(p + "persons_max", c.persons_max);
  c.keyframes = in.get_uint(p + "keyframes", c.keyframes);
  c.frames = in.get_uint(p + "frames", c.frames);
  c.height = in.get_uint(p + "height", c.height);
  c.width = in.get_uint(p + "width", c.width);
  c.classes = in.get_uint(p + "classes", c.classes);
  c.radius = in.get_real(p + "radius", c.radius);
  c.amplitude = in.get_real(p + "amplitude", c.amplitude);
  c.occluders = in.get_uint(p + "occluders", c.occluders);
  c.occluder_min = in.get_real(p + "occluder_min", c.occluder_min);
  c.occluder_max = in.get_real(p + "occluder_max", c.occluder_max);
  c.axis_corruption = in.get_bool(p + "axis_corruption", c.axis_corruption);
  c.noise = in.get_real(p + "noise", c.noise);
  c.pixel_noise = in.get_real(p + "pixel_noise", c.pixel_noise);
  c.exposure = in.get_real(p + "exposure", c.exposure);
  c.missing_coverage = in.get_real(p + "missing_coverage", c.missing_coverage);
  validate_scene_config(c);
  return c;
}

std::size_t MultiViewClip::keyframes() const {
  if (videos.empty() || frames_per_keyframe == 0) return 0;
  return videos[0].dim(0) / frames_per_keyframe;
}

std::vector<Video> MultiViewClip::segment(std::size_t keyframe) const {
  if (keyframe >= keyframes())
    throw LookupError("clip " + id + " has no keyframe " + std::to_string(keyframe));
  std::vector<Video> out;
  for (const auto& v : videos) {
    const std::size_t frame = v.size() / v.dim(0);
    const auto begin = v.data().begin() + long(keyframe * frames_per_keyframe * frame);
    out.emplace_back(Shape{frames_per_keyframe, v.dim(1), v.dim(2), 3},
                     std::vector<float>(begin, begin + long(frames_per_keyframe * frame)));
  }
  return out;
}

std::string clip_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu", index);
  return buf;
}

namespace {

struct Rect {
  double x1, y1, x2, y2;
  bool contains(double x, double y) const { return x >= x1 && x <= x2 && y >= y1 && y <= y2; }
};

struct ViewWarp {
  double sx = 1, sy = 1;
  double background = 0.2, gain = 1;
  double x(double v) const { return 0.5 + sx * (v - 0.5); }
  double y(double v) const { return 0.5 + sy * (v - 0.5); }
};

struct PersonSegment {
  std::size_t motion = 0;
  int pulse = -1;  // -1 none, otherwise class index
  double ax = 0.5, ay = 0.5;
  double sign_x = 1, sign_y = 1;
  double phase = 0;
};

// Offset from the anchor at segment time tau in (-0.5, 0.5).
std::pair<double, double> motion_offset(const PersonSegment& p, double tau, double amplitude) {
  const double sweep = 2 * tau * amplitude;
  switch (p.motion) {
    case 1: return {p.sign_x * sweep, 0};
    case 2: return {0, p.sign_y * sweep};
    case 3: return {p.sign_x * sweep * std::numbers::sqrt2 / 2, p.sign_y * sweep * std::numbers::sqrt2 / 2};
    case 4:
    case 5: {
      const double dir = p.motion == 5 ? 1.0 : -1.0;
      const double angle = p.phase + dir * 2 * std::numbers::pi * tau;
      return {amplitude * std::cos(angle), amplitude * std::sin(angle)};
    }
    default: return {0, 0};
  }
}

double brightness(const PersonSegment& p, double tau) {
  if (p.pulse < 0) return 0.9;
  const double cycles = p.pulse == 6 ? 1.0 : 3.0;
  return 0.9 * (0.55 + 0.45 * std::cos(2 * std::numbers::pi * cycles * (tau + 0.5)));
}

// Fraction of the ellipse area covered by the union of rectangles.
double coverage(double cx, double cy, double rx, double ry, const std::vector<Rect>& rects) {
  const int grid = 24;
  int inside = 0, covered = 0;
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j) {
      const double u = -1 + (2.0 * j + 1) / grid, v = -1 + (2.0 * i + 1) / grid;
      if (u * u + v * v > 1) continue;
      ++inside;
      const double x = cx + u * rx, y = cy + v * ry;
      if (std::any_of(rects.begin(), rects.end(), [&](const Rect& r) { return r.contains(x, y); })) ++covered;
    }
  return inside == 0 ? 0.0 : double(covered) / double(inside);
}

std::uint64_t stream_index(std::size_t scene, std::size_t kind, std::size_t view) {
  return (std::uint64_t(scene) << 24) ^ (std::uint64_t(kind) << 16) ^ std::uint64_t(view);
}

}  // namespace

Scene generate_scene(const SceneConfig& config, std::size_t index) {
  validate_scene_config(config);
  const std::size_t M = config.views, K = config.keyframes, T = config.frames, H = config.height, W = config.width;
  const std::size_t motions = std::min(config.classes, kMotionClasses);

  Rng people = Rng::stream(config.seed, stream_index(index, 0, 0));
  const std::size_t N = config.persons_min + people.below(config.persons_max - config.persons_min + 1);
  std::vector<std::vector<PersonSegment>> persons(N, std::vector<PersonSegment>(K));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) {
      auto& p = persons[n][k];
      p.motion = people.below(motions);
      const double r = people.uniform();
      if (config.classes > kMotionClasses) {
        const std::size_t pulses = config.classes - kMotionClasses;
        if (r < 0.5) p.pulse = int(kMotionClasses + std::min(pulses - 1, std::size_t(r * 2 * double(pulses))));
      }
      p.ax = people.uniform(0.25, 0.75);
      p.ay = people.uniform(0.25, 0.75);
      p.sign_x = people.uniform() < 0.5 ? -1 : 1;
      p.sign_y = people.uniform() < 0.5 ? -1 : 1;
      p.phase = people.uniform(0, 2 * std::numbers::pi);
    }

  std::vector<ViewWarp> warps(M);
  std::vector<std::vector<Rect>> occluders(M);
  for (std::size_t m = 0; m < M; ++m) {
    Rng wr = Rng::stream(config.seed, stream_index(index, 1, m));
    // No mirroring: a reflected view would swap clockwise and counter-clockwise.
    warps[m].sx = wr.uniform(0.85, 1.0);
    warps[m].sy = wr.uniform(0.85, 1.0);
    warps[m].background = 0.2 + config.exposure * (wr.uniform() - 0.5);
    warps[m].gain = 1 - config.exposure * wr.uniform();
    // Centre and size fractions are drawn independently of the size range so
    // that larger ranges only grow the same rectangles.
    Rng orng = Rng::stream(config.seed, stream_index(index, 2, m));
    for (std::size_t o = 0; o < config.occluders; ++o) {
      const double cx = orng.uniform(), cy = orng.uniform(), uw = orng.uniform(), uh = orng.uniform();
      const double w = config.occluder_min + uw * (config.occluder_max - config.occluder_min);
      const double h = config.occluder_min + uh * (config.occluder_max - config.occluder_min);
      occluders[m].push_back({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2});
    }
  }
  bool any_open = false;
  for (std::size_t m = 0; m < M && !any_open; ++m)
    if (coverage(0.5, 0.5, 0.5, 0.5, occluders[m]) < 1.0) any_open = true;
  if (!any_open) throw GenerationError("occluders cover the whole arena in every view");

  Scene scene;
  scene.clip.id = clip_id(index);
  scene.clip.frames_per_keyframe = T;
  const double rx_base = config.radius, margin = config.radius + config.amplitude;
  const std::size_t keyframe_frame = T / 2;

  for (std::size_t m = 0; m < M; ++m) {
    const ViewWarp& warp = warps[m];
    const bool keeps_x = m % 2 == 1;
    Rng jitter = Rng::stream(config.seed, stream_index(index, 3, m));
    Rng pixels = Rng::stream(config.seed, stream_index(index, 4, m));
    Video video({K * T, H, W, 3});
    auto data = video.data();

    for (std::size_t k = 0; k < K; ++k) {
      std::vector<std::array<double, 2>> keyframe_pos(N);
      for (std::size_t f = 0; f < T; ++f) {
        const double tau = (double(f) + 0.5) / double(T) - 0.5;
        struct Disc {
          double x, y, rx, ry, value;
        };
        std::vector<Disc> discs;
        for (std::size_t n = 0; n < N; ++n) {
          const auto& p = persons[n][k];
          auto [dx, dy] = motion_offset(p, tau, config.amplitude);
          double x = p.ax + dx, y = p.ay + dy;
          if (config.axis_corruption) {
            const double j = config.noise * (2 * jitter.uniform() - 1);
            if (keeps_x) {
              y = p.ay + j;
            } else {
              x = p.ax + j;
            }
          }
          discs.push_back({warp.x(x), warp.y(y), rx_base * std::abs(warp.sx), rx_base * std::abs(warp.sy),
                           warp.gain * brightness(p, tau)});
          if (f == keyframe_frame) keyframe_pos[n] = {discs.back().x, discs.back().y};
        }
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j) {
            const double px = (double(j) + 0.5) / double(W), py = (double(i) + 0.5) / double(H);
            double value = warp.background + config.pixel_noise * (2 * pixels.uniform() - 1);
            for (const auto& d : discs) {
              int hits = 0;
              for (int s = 0; s < 4; ++s) {
                const double sx = px + ((s % 2) - 0.5) * 0.5 / double(W), sy = py + ((s / 2) - 0.5) * 0.5 / double(H);
                const double u = (sx - d.x) / d.rx, v = (sy - d.y) / d.ry;
                if (u * u + v * v <= 1) ++hits;
              }
              const double cov = hits / 4.0;
              value = value * (1 - cov) + d.value * cov;
            }
            for (const auto& r : occluders[m])
              if (r.contains(px, py)) value = 0;
            value = std::clamp(value, 0.0, 1.0);
            float* out = data.data() + (((k * T + f) * H + i) * W + j) * 3;
            out[0] = out[1] = out[2] = float(value);
          }
      }

      for (std::size_t n = 0; n < N; ++n) {
        const auto& p = persons[n][k];
        Annotation a;
        a.clip = scene.clip.id;
        a.keyframe = k;
        a.view = m;
        a.person = n;
        a.labels.push_back(p.motion);
        if (p.pulse >= 0) a.labels.push_back(std::size_t(p.pulse));
        const double rx = rx_base * std::abs(warp.sx), ry = rx_base * std::abs(warp.sy);
        if (coverage(keyframe_pos[n][0], keyframe_pos[n][1], rx, ry, occluders[m]) >= config.missing_coverage) {
          a.box = BoundingBox::missing_box();
        } else {
          const double cx = warp.x(p.ax), cy = warp.y(p.ay);
          const double hx = margin * std::abs(warp.sx), hy = margin * std::abs(warp.sy);
          a.box = BoundingBox::from(std::max(0.0, cx - hx), std::max(0.0, cy - hy), std::min(1.0, cx + hx),
                                    std::min(1.0, cy + hy));
        }
        scene.annotations.push_back(std::move(a));
      }
    }
    scene.clip.videos.push_back(std::move(video));
  }
  // Canonical order: keyframe, view, person.
  std::stable_sort(scene.annotations.begin(), scene.annotations.end(), [](const Annotation& a, const Annotation& b) {
    return std::tie(a.keyframe, a.view, a.person) < std::tie(b.keyframe, b.view, b.person);
  });
  return scene;
}

void write_clip(std::ostream& os, const MultiViewClip& clip) {
  if (clip.videos.empty()) throw FormatError("clip " + clip.id + " has no views");
  const Shape& s = clip.videos[0].shape();
  binary::write_magic(os, "MVAF");
  binary::write_u32(os, kClipVersion);
  binary::write_u32(os, std::uint32_t(clip.videos.size()));
  for (std::size_t d = 0; d < 3; ++d) binary::write_u32(os, std::uint32_t(s[d]));
  for (const auto& v : clip.videos) {
    if (v.shape() != s) throw FormatError("clip " + clip.id + ": views differ in shape");
    write_tensor(os, v);
  }
}

MultiViewClip read_clip(std::istream& is, const std::string& id, std::size_t frames_per_keyframe) {
  binary::expect_magic(is, "MVAF", "clip " + id);
  const auto version = binary::read_u32(is);
  if (version != kClipVersion) throw FormatError("clip " + id + ": unsupported version " + std::to_string(version));
  const std::size_t M = binary::read_u32(is), T = binary::read_u32(is), H = binary::read_u32(is),
                    W = binary::read_u32(is);
  if (frames_per_keyframe == 0 || T % frames_per_keyframe != 0)
    throw FormatError("clip " + id + ": " + std::to_string(T) + " frames is not a whole number of keyframes");
  MultiViewClip clip;
  clip.id = id;
  clip.frames_per_keyframe = frames_per_keyframe;
  for (std::size_t m = 0; m < M; ++m) {
    auto v = read_tensor<float>(is);
    if (v.shape() != Shape{T, H, W, 3})
      throw FormatError("clip " + id + ": view " + std::to_string(m) + " has shape " + shape_str(v.shape()));
    clip.videos.push_back(std::move(v));
  }
  return clip;
}

namespace {

constexpr const char* kAnnotationHeader = "clip,keyframe,view,person,x1,y1,x2,y2,action";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out(1);
  for (char ch : line) {
    if (ch == ',') {
      out.emplace_back();
    } else {
      out.back() += ch;
    }
  }
  return out;
}

template <typename T>
T parse_number(const std::string& text, std::size_t line, const char* what) {
  T v{};
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw ParseError("annotations line " + std::to_string(line) + ": bad " + what + " '" + text + "'");
  return v;
}

}  // namespace

void write_annotations(std::ostream& os, const std::vector<Annotation>& annotations) {
  os << kAnnotationHeader << '\n';
  for (const auto& a : annotations) {
    std::string prefix = a.clip + ',' + std::to_string(a.keyframe) + ',' + std::to_string(a.view) + ',' +
                         std::to_string(a.person) + ',';
    if (a.box.missing) {
      prefix += ",,,,";
    } else {
      prefix += format_real(a.box.x1) + ',' + format_real(a.box.y1) + ',' + format_real(a.box.x2) + ',' +
                format_real(a.box.y2) + ',';
    }
    if (a.labels.empty()) os << prefix << '\n';
    for (auto label : a.labels) os << prefix << label << '\n';
  }
}

std::vector<Annotation> read_annotations(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kAnnotationHeader)
    throw ParseError("annotations line 1: expected header '" + std::string(kAnnotationHeader) + "'");
  std::vector<Annotation> out;
  std::map<std::tuple<std::string, std::size_t, std::size_t, std::size_t>, std::size_t> index;
  for (std::size_t number = 2; std::getline(is, line); ++number) {
    if (line.empty()) continue;
    auto f = split_csv(line);
    if (f.size() != 9)
      throw ParseError("annotations line " + std::to_string(number) + ": expected 9 fields, got " +
                       std::to_string(f.size()));
    if (f[0].empty()) throw ParseError("annotations line " + std::to_string(number) + ": empty clip id");
    Annotation a;
    a.clip = f[0];
    a.keyframe = parse_number<std::size_t>(f[1], number, "keyframe");
    a.view = parse_number<std::size_t>(f[2], number, "view");
    a.person = parse_number<std::size_t>(f[3], number, "person");
    const bool empty_box = f[4].empty() && f[5].empty() && f[6].empty() && f[7].empty();
    if (!empty_box) {
      double c[4];
      for (int i = 0; i < 4; ++i) c[i] = parse_number<double>(f[4 + i], number, "coordinate");
      if (!(c[0] < c[2] && c[1] < c[3]))
        throw ParseError("annotations line " + std::to_string(number) + ": box needs x1 < x2 and y1 < y2");
      a.box = BoundingBox::from(c[0], c[1], c[2], c[3]);
    }
    if (!f[8].empty()) a.labels.push_back(parse_number<std::size_t>(f[8], number, "action"));

    const auto key = std::make_tuple(a.clip, a.keyframe, a.view, a.person);
    auto it = index.find(key);
    if (it == index.end()) {
      index.emplace(key, out.size());
      out.push_back(std::move(a));
      continue;
    }
    Annotation& existing = out[it->second];
    if (!(existing.box == a.box) || existing.labels.empty() || a.labels.empty())
      throw ParseError("annotations line " + std::to_string(number) + ": inconsistent rows for one person");
    existing.labels.push_back(a.labels[0]);
  }
  return out;
}

void save_annotations(const std::string& path, const std::vector<Annotation>& annotations) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path);
  write_annotations(os, annotations);
}

std::vector<Annotation> load_annotations(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot read " + path);
  return read_annotations(is);
}

std::vector<PersonSample> build_samples(const std::vector<MultiViewClip>& clips,
                                        const std::vector<Annotation>& annotations, std::size_t classes) {
  std::map<std::string, std::size_t> clip_index;
  for (std::size_t i = 0; i < clips.size(); ++i) clip_index[clips[i].id] = i;
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, PersonSample> grouped;
  for (const auto& a : annotations) {
    auto c = clip_index.find(a.clip);
    if (c == clip_index.end()) throw LookupError("annotation refers to unknown clip " + a.clip);
    const MultiViewClip& clip = clips[c->second];
    if (a.view >= clip.views() || a.keyframe >= clip.keyframes())
      throw LookupError("annotation for " + a.clip + " names view " + std::to_string(a.view) + " keyframe " +
                        std::to_string(a.keyframe) + " outside the clip");
    std::vector<std::uint8_t> labels(classes, 0);
    for (auto l : a.labels) {
      if (l >= classes) throw ParseError("annotation label " + std::to_string(l) + " exceeds class count");
      labels[l] = 1;
    }
    auto& s = grouped[{c->second, a.keyframe, a.person}];
    if (s.boxes.empty()) {
      s.clip = c->second;
      s.keyframe = a.keyframe;
      s.person = a.person;
      s.boxes.assign(clip.views(), BoundingBox::missing_box());
      s.labels = labels;
    } else if (s.labels != labels) {
      throw ParseError("labels differ across views for " + a.clip + " person " + std::to_string(a.person));
    }
    s.boxes[a.view] = a.box;
  }
  std::vector<PersonSample> out;
  for (auto& [key, s] : grouped) out.push_back(std::move(s));
  return out;
}

Dataset generate_dataset(const SceneConfig& config) {
  Dataset ds;
  ds.config = config;
  std::vector<Annotation> all;
  for (std::size_t i = 0; i < config.scenes; ++i) {
    Scene s = generate_scene(config, i);
    ds.clips.push_back(std::move(s.clip));
    all.insert(all.end(), s.annotations.begin(), s.annotations.end());
  }
  ds.samples = build_samples(ds.clips, all, config.classes);
  return ds;
}

namespace {

std::vector<Annotation> samples_to_annotations(const Dataset& ds) {
  std::vector<Annotation> out;
  for (const auto& s : ds.samples)
    for (std::size_t m = 0; m < s.boxes.size(); ++m) {
      Annotation a;
      a.clip = ds.clips[s.clip].id;
      a.keyframe = s.keyframe;
      a.view = m;
      a.person = s.person;
      a.box = s.boxes[m];
      for (std::size_t c = 0; c < s.labels.size(); ++c)
        if (s.labels[c]) a.labels.push_back(c);
      out.push_back(std::move(a));
    }
  std::stable_sort(out.begin(), out.end(), [](const Annotation& a, const Annotation& b) {
    return std::tie(a.clip, a.keyframe, a.view, a.person) < std::tie(b.clip, b.keyframe, b.view, b.person);
  });
  return out;
}

}  // namespace

void write_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw FormatError("cannot create dataset directory " + dir);
  std::ofstream manifest(dir + "/manifest.txt", std::ios::binary);
  if (!manifest) throw FormatError("cannot write " + dir + "/manifest.txt");
  for (const auto& clip : ds.clips) {
    std::ofstream os(dir + "/" + clip.id + ".mvaf", std::ios::binary);
    if (!os) throw FormatError("cannot write clip " + clip.id);
    write_clip(os, clip);
    manifest << clip.id << '\n';
  }
  save_annotations(dir + "/annotations.csv", samples_to_annotations(ds));
  FlatConfig cfg;
  store_scene_config(ds.config, cfg);
  cfg.save(dir + "/scene.config");
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  ds.config = load_scene_config(FlatConfig::load(dir + "/scene.config"));
  std::ifstream manifest(dir + "/manifest.txt");
  if (!manifest) throw FormatError("cannot read " + dir + "/manifest.txt");
  std::string id;
  while (std::getline(manifest, id)) {
    if (id.empty()) continue;
    std::ifstream is(dir + "/" + id + ".mvaf", std::ios::binary);
    if (!is) throw FormatError("cannot read clip " + id);
    ds.clips.push_back(read_clip(is, id, ds.config.frames));
  }
  ds.samples = build_samples(ds.clips, load_annotations(dir + "/annotations.csv"), ds.config.classes);
  return ds;
}

Split split_dataset(const std::vector<PersonSample>& samples, std::size_t classes, const SplitOptions& options) {
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> by_person;
  for (std::size_t i = 0; i < samples.size(); ++i) by_person[{samples[i].clip, samples[i].person}].push_back(i);
  const std::size_t P = by_person.size();
  if (P < 2) throw SplitError("split needs at least two persons, got " + std::to_string(P));
  if (!(options.train_fraction > 0 && options.train_fraction < 1))
    throw ContractError("train fraction must be in (0, 1)");

  // Per person: instance count and per-class positives.
  std::vector<std::vector<std::size_t>> members;
  std::vector<std::vector<double>> positives;
  std::vector<double> instances;
  std::vector<double> total(classes, 0);
  double total_instances = 0;
  for (const auto& [key, idx] : by_person) {
    members.push_back(idx);
    std::vector<double> pos(classes, 0);
    for (auto i : idx)
      for (std::size_t c = 0; c < classes; ++c) pos[c] += samples[i].labels[c];
    for (std::size_t c = 0; c < classes; ++c) total[c] += pos[c];
    positives.push_back(std::move(pos));
    instances.push_back(double(idx.size()));
    total_instances += double(idx.size());
  }
  std::vector<std::size_t> balanced;
  for (std::size_t c = 0; c < classes; ++c)
    if (total[c] >= double(options.min_support)) balanced.push_back(c);

  const std::size_t n_train =
      std::clamp<std::size_t>(std::size_t(std::lround(options.train_fraction * double(P))), 1, P - 1);

  struct State {
    std::vector<std::uint8_t> in_train;
    std::vector<double> pos_train;
    double inst_train = 0;
  };
  auto objective = [&](const State& s) {
    const double inst_eval = total_instances - s.inst_train;
    double worst = 0;
    for (auto c : balanced) {
      const double overall = total[c] / total_instances;
      const double ft = s.pos_train[c] / s.inst_train;
      const double fe = (total[c] - s.pos_train[c]) / inst_eval;
      worst = std::max(worst, std::abs(ft - fe) / overall);
    }
    return worst;
  };
  auto move = [&](State& s, std::size_t p, bool to_train) {
    const double sign = to_train ? 1 : -1;
    s.in_train[p] = to_train;
    s.inst_train += sign * instances[p];
    for (std::size_t c = 0; c < classes; ++c) s.pos_train[c] += sign * positives[p][c];
  };

  State best;
  double best_score = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < std::max<std::size_t>(1, options.restarts) && best_score > options.tolerance; ++r) {
    Rng rng = Rng::stream(options.seed, r);
    std::vector<std::size_t> order(P);
    for (std::size_t i = 0; i < P; ++i) order[i] = i;
    for (std::size_t i = P; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    State s{std::vector<std::uint8_t>(P, 0), std::vector<double>(classes, 0), 0};
    for (std::size_t i = 0; i < n_train; ++i) move(s, order[i], true);
    double score = objective(s);
    std::vector<std::size_t> train_ids(order.begin(), order.begin() + long(n_train));
    std::vector<std::size_t> eval_ids(order.begin() + long(n_train), order.end());
    for (std::size_t it = 0; it < 20 * P && score > options.tolerance; ++it) {
      const std::size_t a = rng.below(train_ids.size()), b = rng.below(eval_ids.size());
      move(s, train_ids[a], false);
      move(s, eval_ids[b], true);
      const double next = objective(s);
      if (next <= score) {
        score = next;
        std::swap(train_ids[a], eval_ids[b]);
      } else {
        move(s, eval_ids[b], false);
        move(s, train_ids[a], true);
      }
    }
    if (score < best_score) {
      best_score = score;
      best = s;
    }
  }
  if (best_score > options.tolerance) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", best_score);
    throw SplitError("no split within class-frequency tolerance; best attempt differs by " + std::string(buf));
  }
  Split split;
  split.worst_relative_difference = best_score;
  for (std::size_t p = 0; p < P; ++p)
    for (auto i : members[p]) (best.in_train[p] ? split.train : split.eval).push_back(i);
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.eval.begin(), split.eval.end());
  return split;
}

}  // namespace mvaf
