#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ssda/model.hpp"
#include "ssda/rng.hpp"
#include "ssda/tensor.hpp"

namespace ssda {

enum class Domain { source, target };
enum class Split { train, test };

const char* to_string(Domain domain);
const char* to_string(Split split);
Domain parse_domain(const std::string& text);

// H x W x Ch intensities in [0, 1], stored interleaved (HWC).
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, int ch, double fill = 0.0);

  double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }

  // Throws ShapeError unless dims are positive and every value is finite in [0,1].
  void validate() const;

  friend bool operator==(const Image&, const Image&) = default;
};

struct LabeledSample {
  Image image;
  int class_id = -1;            // classification
  std::vector<int> label_map;   // segmentation, H*W row-major, kIgnoreLabel allowed
  Domain domain = Domain::source;
};

struct Dataset {
  Task task = Task::classification;
  int num_classes = 0;
  Domain domain = Domain::source;
  std::vector<LabeledSample> samples;

  std::size_t size() const { return samples.size(); }
};

struct ManifestEntry {
  std::string image_path;
  std::string label;  // integer class id, or relative label-map path
  Domain domain = Domain::source;
};

struct DatasetManifest {
  Task task = Task::classification;
  int num_classes = 0;
  Split split = Split::train;
  std::filesystem::path base_dir;  // relative paths resolve against this
  std::vector<ManifestEntry> entries;

  std::size_t count(Domain domain) const;
  std::filesystem::path resolve(const std::string& relative) const;
};

// Reads and validates a manifest: header `task,num_classes`, then rows
// `image_path,label,domain`. Relative paths resolve against the manifest's
// directory, or against $SSDA_DATA_ROOT when that is set. The split is taken
// from the parent directory name (train/test).
DatasetManifest load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

// Loads every image (and label map) referenced by the manifest. entries of
// other domains than `domain` are skipped when a domain is given.
Dataset load_dataset(const DatasetManifest& manifest, std::optional<Domain> domain = std::nullopt);

// 8-bit PNG I/O. RGB or grayscale images; label maps as grayscale.
Image read_png_image(const std::filesystem::path& path);
void write_png_image(const std::filesystem::path& path, const Image& image);
std::vector<int> read_png_labels(const std::filesystem::path& path, int* height, int* width);
void write_png_labels(const std::filesystem::path& path, const std::vector<int>& labels, int height, int width);

// ------------------------------------------------------------- synthetic

enum class BackgroundTexture { flat, stripes, checker, grain };

const char* to_string(BackgroundTexture texture);
BackgroundTexture parse_background_texture(const std::string& text);

struct DomainShift {
  double hue_rotation = 0.0;  // degrees
  double noise_sigma = 0.0;
  double blur_radius = 0.0;   // gaussian sigma in pixels
  BackgroundTexture background_texture = BackgroundTexture::flat;

  bool is_zero() const;
};

struct SyntheticShiftSpec {
  Task task = Task::classification;
  int image_size = 32;
  int num_classes = 4;
  int samples_per_class = 125;
  int test_samples_per_class = 50;
  DomainShift shift{70.0, 0.06, 0.6, BackgroundTexture::stripes};
  std::uint64_t seed = 0;

  void validate() const;
};

// Glyph classes, in class-id order for classification (segmentation uses
// class 0 as background and glyph i as class i + 1).
const std::vector<std::string>& glyph_names();

struct SyntheticPair {
  Dataset source_train, source_test, target_train, target_test;
};

// Paired renders: sample i of the target domain has the same latent scene as
// sample i of the source domain, rendered under the spec's shift.
SyntheticPair generate_synthetic_pair(const SyntheticShiftSpec& spec);

struct WrittenManifests {
  std::filesystem::path source_train, source_test, target_train, target_test;
};

// Writes `<root>/{source,target}/{train,test}/{images,labels}/...` plus one
// manifest.csv per (domain, split).
WrittenManifests write_synthetic_pair(const std::filesystem::path& root, const SyntheticPair& pair);

// ---------------------------------------------------------------- batches

// Deterministic shuffled batches of indices into a dataset of n items. Each
// epoch is a fresh permutation seeded by (seed, epoch). With cycle=true the
// stream never ends and batches run across epoch boundaries.
class BatchIterator {
 public:
  BatchIterator(std::size_t n, int batch_size, std::uint64_t seed, bool cycle);

  std::optional<std::vector<std::size_t>> next();
  int epoch() const { return epoch_; }

 private:
  void reshuffle();

  std::size_t n_;
  int batch_size_;
  std::uint64_t seed_;
  bool cycle_;
  int epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

// Stacks images into an N x Ch x H x W tensor (all images must share a shape).
Tensor to_tensor(const std::vector<const Image*>& images);
Tensor to_tensor(const Dataset& dataset, const std::vector<std::size_t>& indices);

}  // namespace ssda
