#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <numbers>

#include "ssda/data.hpp"
#include "ssda/error.hpp"

namespace ssda {

const char* to_string(BackgroundTexture texture) {
  switch (texture) {
    case BackgroundTexture::flat: return "flat";
    case BackgroundTexture::stripes: return "stripes";
    case BackgroundTexture::checker: return "checker";
    case BackgroundTexture::grain: return "grain";
  }
  return "flat";
}

BackgroundTexture parse_background_texture(const std::string& text) {
  if (text == "flat") return BackgroundTexture::flat;
  if (text == "stripes") return BackgroundTexture::stripes;
  if (text == "checker") return BackgroundTexture::checker;
  if (text == "grain") return BackgroundTexture::grain;
  throw ConfigError("unknown background texture '" + text + "'");
}

bool DomainShift::is_zero() const {
  return hue_rotation == 0.0 && noise_sigma == 0.0 && blur_radius == 0.0 &&
         background_texture == BackgroundTexture::flat;
}

void SyntheticShiftSpec::validate() const {
  if (image_size < 8) throw ConfigError("image_size must be >= 8");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (samples_per_class < 1) throw ConfigError("samples_per_class must be >= 1");
  if (test_samples_per_class < 0) throw ConfigError("test_samples_per_class must be >= 0");
  if (!(shift.noise_sigma >= 0.0) || !(shift.blur_radius >= 0.0) || !std::isfinite(shift.hue_rotation))
    throw ConfigError("shift values must be finite and non-negative");
  const int glyphs = task == Task::classification ? num_classes : num_classes - 1;
  if (glyphs > static_cast<int>(glyph_names().size()))
    throw ConfigError("at most " + std::to_string(glyph_names().size()) + " glyph classes are available");
}

const std::vector<std::string>& glyph_names() {
  static const std::vector<std::string> names{"triangle", "tee", "ell", "arrow", "cross", "square", "disk", "ring"};
  return names;
}

namespace {

using Rgb = std::array<double, 3>;

// Inside test in glyph coordinates (u right, v down, both in [-1, 1]).
bool glyph_contains(int glyph, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (glyph) {
    case 0: {  // triangle pointing up
      if (v > 0.8 || v < -0.9) return false;
      return au <= 0.9 * (v + 0.9) / 1.7;
    }
    case 1:  // tee
      return (au <= 0.85 && v >= -0.85 && v <= -0.45) || (au <= 0.22 && v >= -0.45 && v <= 0.85);
    case 2:  // ell
      return (u >= -0.7 && u <= -0.3 && av <= 0.85) || (u >= -0.7 && u <= 0.7 && v >= 0.45 && v <= 0.85);
    case 3: {  // arrow pointing up
      if (v >= -0.9 && v <= -0.1 && au <= 0.85 * (v + 0.9) / 0.8) return true;
      return au <= 0.22 && v > -0.1 && v <= 0.85;
    }
    case 4: return (au <= 0.25 && av <= 0.85) || (av <= 0.25 && au <= 0.85);
    case 5: return au <= 0.7 && av <= 0.7;
    case 6: return u * u + v * v <= 0.8 * 0.8;
    case 7: {
      const double r2 = u * u + v * v;
      return r2 <= 0.85 * 0.85 && r2 >= 0.5 * 0.5;
    }
    default: return false;
  }
}

Rgb hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h, 360.0);
  if (h < 0) h += 360.0;
  const double c = v * s;
  const double x = c * (1 - std::abs(std::fmod(h / 60.0, 2.0) - 1));
  const double m = v - c;
  Rgb rgb{};
  if (h < 60) rgb = {c, x, 0};
  else if (h < 120) rgb = {x, c, 0};
  else if (h < 180) rgb = {0, c, x};
  else if (h < 240) rgb = {0, x, c};
  else if (h < 300) rgb = {x, 0, c};
  else rgb = {c, 0, x};
  return {rgb[0] + m, rgb[1] + m, rgb[2] + m};
}

struct GlyphLatent {
  int glyph = 0;
  int class_id = 0;
  double cx = 0, cy = 0, scale = 0, angle = 0;
  Rgb color{};
};

struct SceneLatent {
  std::vector<GlyphLatent> glyphs;  // painted in order
  Rgb background{};
  double light_strength = 0.0;
  double light_angle = 0.0;
  double texture_phase = 0.0;
  double texture_angle = 0.0;
};

SceneLatent draw_scene(const SyntheticShiftSpec& spec, Rng& rng, int class_id) {
  SceneLatent scene;
  const double size = spec.image_size;
  scene.background = hsv_to_rgb(uniform_real(rng, 190, 230), uniform_real(rng, 0.3, 0.6), uniform_real(rng, 0.3, 0.45));
  scene.light_strength = uniform_real(rng, 0.4, 0.7);
  scene.light_angle = uniform_real(rng, 0.0, 2 * std::numbers::pi);
  scene.texture_phase = uniform_real(rng, 0.0, 2 * std::numbers::pi);
  scene.texture_angle = uniform_real(rng, 0.0, std::numbers::pi);
  auto make_glyph = [&](int cls, int glyph, double cx, double cy, double scale) {
    GlyphLatent g;
    g.class_id = cls;
    g.glyph = glyph;
    g.cx = cx;
    g.cy = cy;
    g.scale = scale;
    g.angle = uniform_real(rng, -15.0, 15.0) * std::numbers::pi / 180.0;
    g.color = hsv_to_rgb(uniform_real(rng, 0, 40), uniform_real(rng, 0.7, 1.0), uniform_real(rng, 0.75, 1.0));
    return g;
  };
  if (spec.task == Task::classification) {
    const double scale = uniform_real(rng, 0.28, 0.4) * size;
    const double jitter = 0.12 * size;
    scene.glyphs.push_back(make_glyph(class_id, class_id, size / 2 + uniform_real(rng, -jitter, jitter),
                                      size / 2 + uniform_real(rng, -jitter, jitter), scale));
  } else {
    // Two glyphs, one in each horizontal half; the first carries class_id.
    for (int k = 0; k < 2; ++k) {
      const int cls = k == 0 ? class_id : uniform_int(rng, 1, spec.num_classes - 1);
      const double scale = uniform_real(rng, 0.16, 0.22) * size;
      const double cx = (k == 0 ? 0.27 : 0.73) * size + uniform_real(rng, -0.05, 0.05) * size;
      const double cy = uniform_real(rng, 0.3, 0.7) * size;
      scene.glyphs.push_back(make_glyph(cls, cls - 1, cx, cy, scale));
    }
  }
  return scene;
}

double glyph_coverage(const GlyphLatent& g, int y, int x) {
  constexpr int kSub = 3;
  const double ca = std::cos(g.angle), sa = std::sin(g.angle);
  int inside = 0;
  for (int sy = 0; sy < kSub; ++sy)
    for (int sx = 0; sx < kSub; ++sx) {
      const double px = x + (sx + 0.5) / kSub - g.cx;
      const double py = y + (sy + 0.5) / kSub - g.cy;
      const double u = (ca * px + sa * py) / g.scale;
      const double v = (-sa * px + ca * py) / g.scale;
      if (glyph_contains(g.glyph, u, v)) ++inside;
    }
  return static_cast<double>(inside) / (kSub * kSub);
}

double texture_gain(BackgroundTexture texture, int y, int x, const SceneLatent& scene, Rng& grain_rng) {
  switch (texture) {
    case BackgroundTexture::flat: return 1.0;
    case BackgroundTexture::stripes: {
      const double t = x * std::cos(scene.texture_angle) + y * std::sin(scene.texture_angle);
      return 1.0 + 0.45 * std::sin(2 * std::numbers::pi * t / 4.5 + scene.texture_phase);
    }
    case BackgroundTexture::checker: return ((x / 4 + y / 4) % 2 == 0) ? 1.35 : 0.65;
    case BackgroundTexture::grain: return 1.0 + uniform_real(grain_rng, -0.4, 0.4);
  }
  return 1.0;
}

void hue_rotate(Image& img, double degrees) {
  const double a = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a) / std::sqrt(3.0), t = (1.0 - c) / 3.0;
  const double m[3][3] = {{c + t, t - s, t + s}, {t + s, c + t, t - s}, {t - s, t + s, c + t}};
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const Rgb in{img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)};
      for (int k = 0; k < 3; ++k) img.at(y, x, k) = m[k][0] * in[0] + m[k][1] * in[1] + m[k][2] * in[2];
    }
}

void gaussian_blur(Image& img, double sigma) {
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& k : kernel) k /= total;
  auto pass = [&](bool horizontal) {
    Image out = img;
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        for (int c = 0; c < img.channels; ++c) {
          double acc = 0.0;
          for (int i = -radius; i <= radius; ++i) {
            const int yy = horizontal ? y : std::clamp(y + i, 0, img.height - 1);
            const int xx = horizontal ? std::clamp(x + i, 0, img.width - 1) : x;
            acc += kernel[i + radius] * img.at(yy, xx, c);
          }
          out.at(y, x, c) = acc;
        }
    img = std::move(out);
  };
  pass(true);
  pass(false);
}

void quantize(Image& img) {
  for (auto& v : img.pixels) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

LabeledSample render(const SyntheticShiftSpec& spec, const SceneLatent& scene, const DomainShift& shift,
                     Domain domain, Rng& noise_rng) {
  const int size = spec.image_size;
  LabeledSample s;
  s.domain = domain;
  s.image = Image(size, size, 3);
  if (spec.task == Task::classification)
    s.class_id = scene.glyphs.front().class_id;
  else
    s.label_map.assign(static_cast<std::size_t>(size) * size, 0);

  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double along = ((x + 0.5) / size - 0.5) * std::cos(scene.light_angle) +
                           ((y + 0.5) / size - 0.5) * std::sin(scene.light_angle);
      const double light = 1.0 + scene.light_strength * along;
      const double gain = light * texture_gain(shift.background_texture, y, x, scene, noise_rng);
      Rgb px{scene.background[0] * gain, scene.background[1] * gain, scene.background[2] * gain};
      for (const auto& g : scene.glyphs) {
        const double cov = glyph_coverage(g, y, x);
        for (int k = 0; k < 3; ++k) px[k] = px[k] * (1 - cov) + g.color[k] * cov;
        if (cov >= 0.5 && spec.task == Task::segmentation)
          s.label_map[static_cast<std::size_t>(y) * size + x] = g.class_id;
      }
      for (int k = 0; k < 3; ++k) s.image.at(y, x, k) = px[k];
    }

  if (shift.hue_rotation != 0.0) hue_rotate(s.image, shift.hue_rotation);
  if (shift.blur_radius > 0.0) gaussian_blur(s.image, shift.blur_radius);
  if (shift.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, shift.noise_sigma);
    for (auto& v : s.image.pixels) v += noise(noise_rng);
  }
  quantize(s.image);
  return s;
}

void render_split(const SyntheticShiftSpec& spec, Split split, int per_class, Dataset& source, Dataset& target) {
  const int glyph_classes = spec.task == Task::classification ? spec.num_classes : spec.num_classes - 1;
  const int total = per_class * spec.num_classes;
  const DomainShift canonical{0.0, 0.0, 0.0, BackgroundTexture::flat};
  for (int i = 0; i < total; ++i) {
    const int cls = spec.task == Task::classification ? i % glyph_classes : 1 + i % glyph_classes;
    const auto sp = static_cast<std::uint64_t>(split);
    auto scene_rng = derive_rng(spec.seed, {sp, static_cast<std::uint64_t>(i), 0});
    const SceneLatent scene = draw_scene(spec, scene_rng, cls);
    // Source and target share the per-sample stream so a zero shift renders
    // identical pixels.
    auto source_rng = derive_rng(spec.seed, {sp, static_cast<std::uint64_t>(i), 1});
    auto target_rng = derive_rng(spec.seed, {sp, static_cast<std::uint64_t>(i), 1});
    source.samples.push_back(render(spec, scene, canonical, Domain::source, source_rng));
    target.samples.push_back(render(spec, scene, spec.shift, Domain::target, target_rng));
  }
}

}  // namespace

SyntheticPair generate_synthetic_pair(const SyntheticShiftSpec& spec) {
  spec.validate();
  SyntheticPair pair;
  for (auto* ds : {&pair.source_train, &pair.source_test, &pair.target_train, &pair.target_test}) {
    ds->task = spec.task;
    ds->num_classes = spec.num_classes;
  }
  pair.source_train.domain = pair.source_test.domain = Domain::source;
  pair.target_train.domain = pair.target_test.domain = Domain::target;
  render_split(spec, Split::train, spec.samples_per_class, pair.source_train, pair.target_train);
  render_split(spec, Split::test, spec.test_samples_per_class, pair.source_test, pair.target_test);
  return pair;
}

namespace {

std::filesystem::path write_split(const std::filesystem::path& dir, const Dataset& ds, Domain domain) {
  DatasetManifest m;
  m.task = ds.task;
  m.num_classes = ds.num_classes;
  m.base_dir = dir;
  char name[32];
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    std::snprintf(name, sizeof(name), "%06zu.png", i);
    const std::string image_rel = std::string("images/") + name;
    write_png_image(dir / image_rel, s.image);
    std::string label;
    if (ds.task == Task::classification) {
      label = std::to_string(s.class_id);
    } else {
      label = std::string("labels/") + name;
      write_png_labels(dir / label, s.label_map, s.image.height, s.image.width);
    }
    m.entries.push_back({image_rel, label, domain});
  }
  const auto path = dir / "manifest.csv";
  write_manifest(path, m);
  return path;
}

}  // namespace

WrittenManifests write_synthetic_pair(const std::filesystem::path& root, const SyntheticPair& pair) {
  WrittenManifests out;
  out.source_train = write_split(root / "source" / "train", pair.source_train, Domain::source);
  out.source_test = write_split(root / "source" / "test", pair.source_test, Domain::source);
  out.target_train = write_split(root / "target" / "train", pair.target_train, Domain::target);
  out.target_test = write_split(root / "target" / "test", pair.target_test, Domain::target);
  return out;
}

}  // namespace ssda
