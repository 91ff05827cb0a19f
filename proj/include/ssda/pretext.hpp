#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "ssda/data.hpp"

namespace ssda {

enum class PretextMode { none, rot, mixrot, sprot };

const char* to_string(PretextMode mode);
PretextMode parse_pretext_mode(const std::string& text);

struct PretextConfig {
  PretextMode mode = PretextMode::rot;
  int crop_size = 16;
  bool expand_all_rotations = true;

  // 4 rotation labels, or 16 region x rotation labels for SPRot.
  int num_labels() const { return mode == PretextMode::sprot ? 16 : 4; }
  // Samples produced per source image by make_pretext_samples.
  int samples_per_image() const;
  // Consecutive samples sharing one crop (the loss averages inside a group).
  int group_size() const { return expand_all_rotations ? 4 : 1; }
  // Throws ConfigError unless the crop fits an h x w image (or its quadrants).
  void validate_for(int height, int width) const;
};

struct PretextSample {
  Image patch;
  int label = 0;
  int rotation = 0;
  std::optional<int> region;  // SPRot quadrant
  Domain domain = Domain::target;
  int crop_y = 0, crop_x = 0;  // top-left of the crop inside the image (or region)
};

// Counter-clockwise rotation by r * 90 degrees. Odd r requires a square image.
Image rotate90(const Image& img, int r);

Image crop(const Image& img, int top, int left, int height, int width);

// size x size window with the top-left drawn uniformly over valid positions.
Image crop_random(const Image& img, int size, Rng& rng, int* top = nullptr, int* left = nullptr);

// q=0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right. Odd remainders
// go to the bottom / right regions.
std::array<Image, 4> split_quadrants(const Image& img);

inline int encode_spatial_label(int region, int rotation) { return 4 * region + rotation; }
inline int decode_region(int label) { return label / 4; }
inline int decode_rotation(int label) { return label % 4; }

std::vector<PretextSample> make_pretext_samples(const Image& img, Domain domain, const PretextConfig& cfg, Rng& rng);

struct PretextBatch {
  Tensor patches;
  std::vector<int> labels;
  int group_size = 4;
};

// The image pool a pretext task draws from. Holds pointers into the datasets
// it was built from, which must outlive it.
class PretextDataset {
 public:
  PretextDataset(PretextConfig cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {}

  void add(const Image& image, Domain domain) { images_.push_back({&image, domain}); }

  const PretextConfig& config() const { return cfg_; }
  std::size_t num_images() const { return images_.size(); }
  std::size_t size() const { return images_.size() * cfg_.samples_per_image(); }
  Domain domain_of(std::size_t image) const { return images_.at(image).domain; }
  const Image& image(std::size_t i) const { return *images_.at(i).image; }

  // Samples for the given pool images; `draw` selects an independent crop
  // stream (a training iteration, an epoch).
  std::vector<PretextSample> samples(const std::vector<std::size_t>& image_indices, std::uint64_t draw) const;
  PretextBatch batch(const std::vector<std::size_t>& image_indices, std::uint64_t draw) const;

  // Every image's samples for draw 0.
  std::vector<PretextSample> materialize() const;

 private:
  struct Entry {
    const Image* image;
    Domain domain;
  };
  PretextConfig cfg_;
  std::uint64_t seed_;
  std::vector<Entry> images_;
};

// Rot/SPRot pool only target images; MixRot pools target then source images.
PretextDataset build_pretext_pool(const Dataset& target, const Dataset* source, const PretextConfig& cfg,
                                  std::uint64_t seed);

// Writes patches as PNGs plus `manifest.csv` (`pretext,K` header then
// `patch_path,label,domain` rows).
std::filesystem::path write_pretext_manifest(const std::filesystem::path& dir, const std::vector<PretextSample>& samples,
                                             int num_labels);

}  // namespace ssda
