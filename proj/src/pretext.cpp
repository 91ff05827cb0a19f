#include "ssda/pretext.hpp"

#include <cstdio>
#include <fstream>

#include "ssda/error.hpp"

namespace ssda {

const char* to_string(PretextMode mode) {
  switch (mode) {
    case PretextMode::none: return "none";
    case PretextMode::rot: return "rot";
    case PretextMode::mixrot: return "mixrot";
    case PretextMode::sprot: return "sprot";
  }
  return "none";
}

PretextMode parse_pretext_mode(const std::string& text) {
  if (text == "none") return PretextMode::none;
  if (text == "rot") return PretextMode::rot;
  if (text == "mixrot") return PretextMode::mixrot;
  if (text == "sprot") return PretextMode::sprot;
  throw ConfigError("unknown pretext mode '" + text + "'");
}

int PretextConfig::samples_per_image() const {
  const int crops = mode == PretextMode::sprot ? 4 : 1;
  return crops * (expand_all_rotations ? 4 : 1);
}

void PretextConfig::validate_for(int height, int width) const {
  if (crop_size < 8) throw ConfigError("crop_size must be >= 8");
  const int h = mode == PretextMode::sprot ? height / 2 : height;
  const int w = mode == PretextMode::sprot ? width / 2 : width;
  if (crop_size > h || crop_size > w)
    throw ConfigError("crop_size " + std::to_string(crop_size) + " exceeds " +
                      (mode == PretextMode::sprot ? "region " : "image ") + std::to_string(h) + "x" +
                      std::to_string(w));
}

Image rotate90(const Image& img, int r) {
  if (r < 0 || r > 3) throw ConfigError("rotation id must be in [0,3]");
  if (r % 2 == 1 && img.height != img.width) throw ShapeError("odd rotation of a non-square image");
  if (r == 0) return img;
  Image out(r % 2 == 1 ? img.width : img.height, r % 2 == 1 ? img.height : img.width, img.channels);
  const int h = img.height, w = img.width;
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      int sy = 0, sx = 0;
      switch (r) {
        case 1: sy = x; sx = w - 1 - y; break;
        case 2: sy = h - 1 - y; sx = w - 1 - x; break;
        case 3: sy = h - 1 - x; sx = y; break;
      }
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  return out;
}

Image crop(const Image& img, int top, int left, int height, int width) {
  if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > img.height || left + width > img.width)
    throw ShapeError("crop window outside image");
  Image out(height, width, img.channels);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(top + y, left + x, c);
  return out;
}

Image crop_random(const Image& img, int size, Rng& rng, int* top, int* left) {
  if (size < 1 || size > img.height || size > img.width)
    throw ShapeError("crop size " + std::to_string(size) + " exceeds image " + std::to_string(img.height) + "x" +
                     std::to_string(img.width));
  const int y = uniform_int(rng, 0, img.height - size);
  const int x = uniform_int(rng, 0, img.width - size);
  if (top) *top = y;
  if (left) *left = x;
  return crop(img, y, x, size, size);
}

std::array<Image, 4> split_quadrants(const Image& img) {
  if (img.height < 2 || img.width < 2) throw ShapeError("quadrant split needs H, W >= 2");
  const int h0 = img.height / 2, w0 = img.width / 2;
  return {crop(img, 0, 0, h0, w0), crop(img, 0, w0, h0, img.width - w0), crop(img, h0, 0, img.height - h0, w0),
          crop(img, h0, w0, img.height - h0, img.width - w0)};
}

namespace {

void expand(const Image& patch, Domain domain, const PretextConfig& cfg, std::optional<int> region, int top, int left,
            Rng& rng, std::vector<PretextSample>& out) {
  auto emit = [&](int r) {
    PretextSample s;
    s.patch = rotate90(patch, r);
    s.rotation = r;
    s.region = region;
    s.label = region ? encode_spatial_label(*region, r) : r;
    s.domain = domain;
    s.crop_y = top;
    s.crop_x = left;
    out.push_back(std::move(s));
  };
  if (cfg.expand_all_rotations) {
    for (int r = 0; r < 4; ++r) emit(r);
  } else {
    emit(uniform_int(rng, 0, 3));
  }
}

}  // namespace

std::vector<PretextSample> make_pretext_samples(const Image& img, Domain domain, const PretextConfig& cfg, Rng& rng) {
  if (cfg.mode == PretextMode::none) throw ConfigError("pretext mode is none");
  cfg.validate_for(img.height, img.width);
  std::vector<PretextSample> out;
  out.reserve(cfg.samples_per_image());
  if (cfg.mode == PretextMode::sprot) {
    const auto regions = split_quadrants(img);
    for (int q = 0; q < 4; ++q) {
      int top = 0, left = 0;
      const Image patch = crop_random(regions[q], cfg.crop_size, rng, &top, &left);
      expand(patch, domain, cfg, q, top, left, rng, out);
    }
  } else {
    int top = 0, left = 0;
    const Image patch = crop_random(img, cfg.crop_size, rng, &top, &left);
    expand(patch, domain, cfg, std::nullopt, top, left, rng, out);
  }
  return out;
}

std::vector<PretextSample> PretextDataset::samples(const std::vector<std::size_t>& image_indices,
                                                   std::uint64_t draw) const {
  std::vector<PretextSample> out;
  out.reserve(image_indices.size() * cfg_.samples_per_image());
  for (auto i : image_indices) {
    const auto& e = images_.at(i);
    auto rng = derive_rng(seed_, {0x9e7e47, draw, static_cast<std::uint64_t>(i)});
    auto s = make_pretext_samples(*e.image, e.domain, cfg_, rng);
    std::move(s.begin(), s.end(), std::back_inserter(out));
  }
  return out;
}

PretextBatch PretextDataset::batch(const std::vector<std::size_t>& image_indices, std::uint64_t draw) const {
  const auto s = samples(image_indices, draw);
  std::vector<const Image*> patches;
  PretextBatch b;
  b.group_size = cfg_.group_size();
  for (const auto& sample : s) {
    patches.push_back(&sample.patch);
    b.labels.push_back(sample.label);
  }
  b.patches = to_tensor(patches);
  return b;
}

std::vector<PretextSample> PretextDataset::materialize() const {
  std::vector<std::size_t> all(images_.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return samples(all, 0);
}

PretextDataset build_pretext_pool(const Dataset& target, const Dataset* source, const PretextConfig& cfg,
                                  std::uint64_t seed) {
  if (cfg.mode == PretextMode::none) throw ConfigError("pretext mode is none");
  if (cfg.mode == PretextMode::mixrot && source == nullptr)
    throw ConfigError("MixRot requires a source dataset");
  if (target.samples.empty()) throw ConfigError("pretext pool needs target images");
  PretextDataset pool(cfg, seed);
  for (const auto& s : target.samples) {
    cfg.validate_for(s.image.height, s.image.width);
    pool.add(s.image, Domain::target);
  }
  if (cfg.mode == PretextMode::mixrot)
    for (const auto& s : source->samples) {
      cfg.validate_for(s.image.height, s.image.width);
      pool.add(s.image, Domain::source);
    }
  return pool;
}

std::filesystem::path write_pretext_manifest(const std::filesystem::path& dir, const std::vector<PretextSample>& samples,
                                             int num_labels) {
  std::filesystem::create_directories(dir / "patches");
  const auto path = dir / "manifest.csv";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "pretext," << num_labels << '\n';
  char name[32];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(name, sizeof(name), "%06zu.png", i);
    write_png_image(dir / "patches" / name, samples[i].patch);
    out << "patches/" << name << ',' << samples[i].label << ',' << to_string(samples[i].domain) << '\n';
  }
  return path;
}

}  // namespace ssda
