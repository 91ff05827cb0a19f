#include "ssda/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include <png.h>

#include "ssda/error.hpp"
#include "ssda/losses.hpp"

namespace ssda {

const char* to_string(LoaderErrorKind kind) {
  switch (kind) {
    case LoaderErrorKind::missing_file: return "missing file";
    case LoaderErrorKind::empty_manifest: return "empty manifest";
    case LoaderErrorKind::malformed_row: return "malformed row";
    case LoaderErrorKind::unresolvable_path: return "unresolvable path";
    case LoaderErrorKind::label_out_of_range: return "label out of range";
  }
  return "loader error";
}

const char* to_string(Domain domain) { return domain == Domain::source ? "source" : "target"; }
const char* to_string(Split split) { return split == Split::train ? "train" : "test"; }

Domain parse_domain(const std::string& text) {
  if (text == "source") return Domain::source;
  if (text == "target") return Domain::target;
  throw ConfigError("unknown domain '" + text + "'");
}

Image::Image(int h, int w, int ch, double fill) : height(h), width(w), channels(ch) {
  if (h < 1 || w < 1 || ch < 1) throw ShapeError("image dimensions must be positive");
  pixels.assign(static_cast<std::size_t>(h) * w * ch, fill);
}

void Image::validate() const {
  if (height < 1 || width < 1) throw ShapeError("image dimensions must be positive");
  if (channels != 1 && channels != 3) throw ShapeError("image must have 1 or 3 channels");
  if (pixels.size() != static_cast<std::size_t>(height) * width * channels) throw ShapeError("image buffer size");
  for (double v : pixels)
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) throw ShapeError("image value outside [0,1]");
}

std::size_t DatasetManifest::count(Domain domain) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) { return e.domain == domain; }));
}

std::filesystem::path DatasetManifest::resolve(const std::string& relative) const {
  std::filesystem::path p(relative);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("SSDA_DATA_ROOT"); root && *root) return std::filesystem::path(root) / p;
  return base_dir / p;
}

// ------------------------------------------------------------- manifest

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::optional<int> parse_int(const std::string& s) {
  int v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || ptr != end) return std::nullopt;
  return v;
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoaderError(LoaderErrorKind::missing_file, path.string());

  DatasetManifest m;
  m.base_dir = path.parent_path();
  const auto split_name = path.parent_path().filename().string();
  m.split = split_name == "test" ? Split::test : Split::train;

  std::string line;
  if (!std::getline(in, line)) throw LoaderError(LoaderErrorKind::empty_manifest, path.string());
  {
    const auto fields = split_csv(trim(line));
    std::optional<int> classes;
    if (fields.size() == 2) classes = parse_int(trim(fields[1]));
    if (!classes) throw LoaderError(LoaderErrorKind::malformed_row, path.string() + ":1: expected task,num_classes");
    try {
      m.task = parse_task(trim(fields[0]));
    } catch (const ConfigError&) {
      throw LoaderError(LoaderErrorKind::malformed_row, path.string() + ":1: unknown task");
    }
    m.num_classes = *classes;
    if (m.num_classes < 2) throw LoaderError(LoaderErrorKind::malformed_row, path.string() + ":1: num_classes < 2");
  }

  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    const auto where = path.string() + ":" + std::to_string(line_no);
    const auto fields = split_csv(line);
    if (fields.size() != 3) throw LoaderError(LoaderErrorKind::malformed_row, where + ": expected 3 fields");
    ManifestEntry e{trim(fields[0]), trim(fields[1]), Domain::source};
    try {
      e.domain = parse_domain(trim(fields[2]));
    } catch (const ConfigError&) {
      throw LoaderError(LoaderErrorKind::malformed_row, where + ": unknown domain '" + trim(fields[2]) + "'");
    }
    if (e.image_path.empty() || e.label.empty()) throw LoaderError(LoaderErrorKind::malformed_row, where);
    if (!std::filesystem::exists(m.resolve(e.image_path)))
      throw LoaderError(LoaderErrorKind::unresolvable_path, where + ": " + m.resolve(e.image_path).string());
    if (m.task == Task::classification) {
      const auto cls = parse_int(e.label);
      if (!cls) throw LoaderError(LoaderErrorKind::malformed_row, where + ": label is not an integer");
      if (*cls < 0 || *cls >= m.num_classes)
        throw LoaderError(LoaderErrorKind::label_out_of_range, where + ": class " + e.label);
    } else if (!std::filesystem::exists(m.resolve(e.label))) {
      throw LoaderError(LoaderErrorKind::unresolvable_path, where + ": " + m.resolve(e.label).string());
    }
    m.entries.push_back(std::move(e));
  }
  if (m.entries.empty()) throw LoaderError(LoaderErrorKind::empty_manifest, path.string());
  return m;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << to_string(manifest.task) << ',' << manifest.num_classes << '\n';
  for (const auto& e : manifest.entries) out << e.image_path << ',' << e.label << ',' << to_string(e.domain) << '\n';
}

Dataset load_dataset(const DatasetManifest& manifest, std::optional<Domain> domain) {
  Dataset ds;
  ds.task = manifest.task;
  ds.num_classes = manifest.num_classes;
  ds.domain = domain.value_or(manifest.entries.empty() ? Domain::source : manifest.entries.front().domain);
  for (const auto& e : manifest.entries) {
    if (domain && e.domain != *domain) continue;
    LabeledSample s;
    s.domain = e.domain;
    s.image = read_png_image(manifest.resolve(e.image_path));
    if (manifest.task == Task::classification) {
      s.class_id = *parse_int(e.label);
    } else {
      int h = 0, w = 0;
      s.label_map = read_png_labels(manifest.resolve(e.label), &h, &w);
      if (h != s.image.height || w != s.image.width)
        throw LoaderError(LoaderErrorKind::malformed_row, e.label + ": label map shape differs from image");
      for (int v : s.label_map)
        if (v != kIgnoreLabel && v >= manifest.num_classes)
          throw LoaderError(LoaderErrorKind::label_out_of_range, e.label + ": label " + std::to_string(v));
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ------------------------------------------------------------------ PNG

namespace {

struct PngBuffer {
  int width = 0, height = 0, channels = 0;
  std::vector<unsigned char> data;
};

void write_png(const std::filesystem::path& path, const PngBuffer& buf) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, buf.width, buf.height, 8, buf.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(buf.width) * buf.channels;
  for (int y = 0; y < buf.height; ++y)
    png_write_row(png, const_cast<png_bytep>(buf.data.data() + y * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

PngBuffer read_png(const std::filesystem::path& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw LoaderError(LoaderErrorKind::missing_file, path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("libpng failed reading " + path.string());
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_strip_alpha(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  png_read_update_info(png, info);
  PngBuffer buf;
  buf.width = static_cast<int>(png_get_image_width(png, info));
  buf.height = static_cast<int>(png_get_image_height(png, info));
  buf.channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buf.data.resize(stride * buf.height);
  std::vector<png_bytep> rows(buf.height);
  for (int y = 0; y < buf.height; ++y) rows[y] = buf.data.data() + y * stride;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return buf;
}

}  // namespace

Image read_png_image(const std::filesystem::path& path) {
  const auto buf = read_png(path);
  if (buf.channels != 1 && buf.channels != 3) throw IoError("unsupported channel count in " + path.string());
  Image img(buf.height, buf.width, buf.channels);
  for (std::size_t i = 0; i < buf.data.size(); ++i) img.pixels[i] = buf.data[i] / 255.0;
  return img;
}

void write_png_image(const std::filesystem::path& path, const Image& image) {
  image.validate();
  PngBuffer buf{image.width, image.height, image.channels, {}};
  buf.data.resize(image.pixels.size());
  for (std::size_t i = 0; i < image.pixels.size(); ++i)
    buf.data[i] = static_cast<unsigned char>(std::lround(image.pixels[i] * 255.0));
  write_png(path, buf);
}

std::vector<int> read_png_labels(const std::filesystem::path& path, int* height, int* width) {
  const auto buf = read_png(path);
  if (buf.channels != 1) throw IoError("label map must be grayscale: " + path.string());
  *height = buf.height;
  *width = buf.width;
  return {buf.data.begin(), buf.data.end()};
}

void write_png_labels(const std::filesystem::path& path, const std::vector<int>& labels, int height, int width) {
  if (labels.size() != static_cast<std::size_t>(height) * width) throw ShapeError("label map size");
  PngBuffer buf{width, height, 1, {}};
  buf.data.reserve(labels.size());
  for (int v : labels) {
    if (v < 0 || v > 255) throw ShapeError("label value does not fit 8 bits");
    buf.data.push_back(static_cast<unsigned char>(v));
  }
  write_png(path, buf);
}

// -------------------------------------------------------------- batches

BatchIterator::BatchIterator(std::size_t n, int batch_size, std::uint64_t seed, bool cycle)
    : n_(n), batch_size_(batch_size), seed_(seed), cycle_(cycle) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (n == 0) throw ConfigError("cannot iterate an empty dataset");
  if (!cycle && static_cast<std::size_t>(batch_size) > n)
    throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds dataset size " + std::to_string(n));
  reshuffle();
}

void BatchIterator::reshuffle() {
  order_.resize(n_);
  std::iota(order_.begin(), order_.end(), 0);
  auto rng = derive_rng(seed_, {0xba7c4, static_cast<std::uint64_t>(epoch_)});
  std::shuffle(order_.begin(), order_.end(), rng);
  cursor_ = 0;
}

std::optional<std::vector<std::size_t>> BatchIterator::next() {
  std::vector<std::size_t> batch;
  batch.reserve(batch_size_);
  while (static_cast<int>(batch.size()) < batch_size_) {
    if (cursor_ == n_) {
      if (!cycle_) break;
      ++epoch_;
      reshuffle();
    }
    batch.push_back(order_[cursor_++]);
  }
  if (batch.empty()) return std::nullopt;
  return batch;
}

Tensor to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw ShapeError("to_tensor: no images");
  const int h = images[0]->height, w = images[0]->width, ch = images[0]->channels;
  Tensor t(static_cast<int>(images.size()), ch, h, w);
  for (int n = 0; n < t.n(); ++n) {
    const Image& img = *images[n];
    if (img.height != h || img.width != w || img.channels != ch) throw ShapeError("to_tensor: mixed image shapes");
    for (int c = 0; c < ch; ++c) {
      double* dst = t.plane_ptr(n, c);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) dst[y * w + x] = img.at(y, x, c);
    }
  }
  return t;
}

Tensor to_tensor(const Dataset& dataset, const std::vector<std::size_t>& indices) {
  std::vector<const Image*> images;
  images.reserve(indices.size());
  for (auto i : indices) images.push_back(&dataset.samples.at(i).image);
  return to_tensor(images);
}

}  // namespace ssda
