#include "ssda/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "ssda/error.hpp"

namespace ssda {

const char* to_string(Task task) {
  return task == Task::classification ? "classification" : "segmentation";
}

const char* to_string(FeatureTap tap) { return tap == FeatureTap::middle ? "middle" : "final"; }

Task parse_task(const std::string& text) {
  if (text == "classification") return Task::classification;
  if (text == "segmentation") return Task::segmentation;
  throw ConfigError("unknown task '" + text + "'");
}

FeatureTap parse_feature_tap(const std::string& text) {
  if (text == "middle") return FeatureTap::middle;
  if (text == "final") return FeatureTap::final;
  throw ConfigError("unknown feature tap '" + text + "'");
}

nlohmann::json to_json(const ArchitectureSpec& arch) {
  return {{"input_channels", arch.input_channels},
          {"encoder_channels", arch.encoder_channels},
          {"discriminator_channels", arch.discriminator_channels},
          {"bn_eps", arch.bn_eps},
          {"bn_momentum", arch.bn_momentum},
          {"discriminator_slope", arch.discriminator_slope}};
}

ArchitectureSpec architecture_from_json(const nlohmann::json& j) {
  ArchitectureSpec arch;
  arch.input_channels = j.at("input_channels").get<int>();
  arch.encoder_channels = j.at("encoder_channels").get<std::array<int, 4>>();
  arch.discriminator_channels = j.at("discriminator_channels").get<std::array<int, 2>>();
  arch.bn_eps = j.at("bn_eps").get<double>();
  arch.bn_momentum = j.at("bn_momentum").get<double>();
  arch.discriminator_slope = j.at("discriminator_slope").get<double>();
  return arch;
}

namespace {

void add_block(Sequential& seq, const std::string& name, int in, int out, const ArchitectureSpec& arch) {
  seq.add(Conv2d(name + ".conv", in, out, 3, 1, 1));
  seq.add(BatchNorm2d(name + ".bn", out, arch.bn_eps, arch.bn_momentum));
  seq.add(Relu{});
}

void init_convs(Sequential& seq, Rng& rng) {
  for (auto& layer : seq.layers())
    if (auto* conv = std::get_if<Conv2d>(&layer)) conv->init_he(rng);
}

}  // namespace

Encoder::Encoder(const ArchitectureSpec& arch) {
  const auto& ch = arch.encoder_channels;
  for (int c : ch)
    if (c < 1) throw ConfigError("encoder channels must be positive");
  add_block(lower_, "encoder.block1", arch.input_channels, ch[0], arch);
  lower_.add(AvgPool2{});
  add_block(lower_, "encoder.block2", ch[0], ch[1], arch);
  upper_.add(AvgPool2{});
  add_block(upper_, "encoder.block3", ch[1], ch[2], arch);
  add_block(upper_, "encoder.block4", ch[2], ch[3], arch);
  middle_channels_ = ch[1];
  final_channels_ = ch[3];
}

Encoder::Features Encoder::forward(const Tensor& x, Mode mode, bool need_final) {
  Features f;
  f.middle = lower_.forward(x, mode);
  if (need_final) f.final = upper_.forward(f.middle, mode);
  return f;
}

Tensor Encoder::backward(const Tensor& d_middle, const Tensor& d_final, bool accumulate) {
  Tensor g;
  if (!d_final.empty()) g = upper_.backward(d_final, accumulate);
  if (!d_middle.empty()) {
    if (g.empty())
      g = d_middle;
    else
      g += d_middle;
  }
  if (g.empty()) throw ShapeError("encoder backward without gradient");
  return lower_.backward(g, accumulate);
}

std::vector<Parameter*> Encoder::parameters() {
  auto out = lower_.parameters();
  auto up = upper_.parameters();
  out.insert(out.end(), up.begin(), up.end());
  return out;
}

std::vector<BatchNorm2d*> Encoder::bn_layers() {
  auto out = lower_.bn_layers();
  auto up = upper_.bn_layers();
  out.insert(out.end(), up.begin(), up.end());
  return out;
}

void Encoder::init(Rng& rng) {
  init_convs(lower_, rng);
  init_convs(upper_, rng);
}

MainHead::MainHead(Task task, int in_channels, int num_classes) : task_(task) {
  if (task == Task::classification) {
    project_.add(GlobalAvgPool{});
    project_.add(Conv2d("main.fc", in_channels, num_classes, 1, 1, 0));
  } else {
    project_.add(Conv2d("main.classifier", in_channels, num_classes, 1, 1, 0));
  }
}

Tensor MainHead::project(const Tensor& features, Mode mode) { return project_.forward(features, mode); }

Tensor MainHead::project_backward(const Tensor& grad, bool accumulate) {
  return project_.backward(grad, accumulate);
}

Tensor MainHead::upsample(const Tensor& map, int out_h, int out_w) {
  if (task_ == Task::classification) return map;
  return upsample_.forward(map, out_h, out_w);
}

Tensor MainHead::upsample_backward(const Tensor& grad) {
  if (task_ == Task::classification) return grad;
  return upsample_.backward(grad);
}

void MainHead::init(Rng& rng) { init_convs(project_, rng); }

PretextHead::PretextHead(int in_channels, int num_labels) {
  net_.add(GlobalAvgPool{});
  net_.add(Conv2d("pretext.fc", in_channels, num_labels, 1, 1, 0));
}

void PretextHead::init(Rng& rng) { init_convs(net_, rng); }

Discriminator::Discriminator(const ArchitectureSpec& arch, int num_classes) : input_channels_(num_classes) {
  const auto& ch = arch.discriminator_channels;
  net_.add(Conv2d("disc.conv1", num_classes, ch[0], 3, 2, 1));
  net_.add(LeakyRelu(arch.discriminator_slope));
  net_.add(Conv2d("disc.conv2", ch[0], ch[1], 3, 2, 1));
  net_.add(LeakyRelu(arch.discriminator_slope));
  net_.add(Conv2d("disc.conv3", ch[1], 2, 3, 2, 1));
}

void Discriminator::init(Rng& rng) { init_convs(net_, rng); }

std::vector<Parameter*> Networks::all_parameters() {
  std::vector<Parameter*> out;
  for (auto group : {encoder.parameters(), main.parameters(), pretext.parameters(), discriminator.parameters()})
    out.insert(out.end(), group.begin(), group.end());
  return out;
}

std::vector<BatchNorm2d*> Networks::all_bn_layers() {
  std::vector<BatchNorm2d*> out = encoder.bn_layers();
  for (auto group : {main.bn_layers(), pretext.bn_layers()}) out.insert(out.end(), group.begin(), group.end());
  return out;
}

void Networks::zero_grad() {
  for (auto* p : all_parameters()) p->zero_grad();
}

Networks build_networks(const ArchitectureSpec& arch, Task task, int pretext_labels, int num_classes,
                        FeatureTap tap, std::uint64_t seed) {
  if (pretext_labels != 4 && pretext_labels != 16)
    throw ConfigError("pretext label count must be 4 or 16, got " + std::to_string(pretext_labels));
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2, got " + std::to_string(num_classes));
  if (arch.input_channels < 1) throw ConfigError("input_channels must be positive");

  Networks nets;
  nets.arch = arch;
  nets.task = task;
  nets.num_classes = num_classes;
  nets.pretext_labels = pretext_labels;
  nets.tap = tap;
  nets.encoder = Encoder(arch);
  nets.main = MainHead(task, nets.encoder.final_channels(), num_classes);
  nets.pretext = PretextHead(tap_channels(nets), pretext_labels);
  nets.discriminator = Discriminator(arch, num_classes);

  auto rng_e = derive_rng(seed, {1});
  auto rng_s = derive_rng(seed, {2});
  auto rng_p = derive_rng(seed, {3});
  auto rng_d = derive_rng(seed, {4});
  nets.encoder.init(rng_e);
  nets.main.init(rng_s);
  nets.pretext.init(rng_p);
  nets.discriminator.init(rng_d);
  return nets;
}

int tap_channels(const Networks& nets) {
  if (nets.tap == FeatureTap::middle) return nets.encoder.middle_channels();
  return nets.task == Task::segmentation ? nets.num_classes : nets.encoder.final_channels();
}

namespace {

void check_input(const Networks& nets, const Tensor& images) {
  if (images.empty() || images.c() != nets.arch.input_channels)
    throw ShapeError("expected " + std::to_string(nets.arch.input_channels) + "-channel input batch, got " +
                     images.shape_string());
}

}  // namespace

Tensor forward_main(Networks& nets, const Tensor& images, Mode mode) {
  check_input(nets, images);
  auto f = nets.encoder.forward(images, mode, true);
  Tensor map = nets.main.project(f.final, mode);
  return nets.main.upsample(map, images.h(), images.w());
}

void backward_main(Networks& nets, const Tensor& grad_logits, bool accumulate) {
  Tensor g = nets.main.upsample_backward(grad_logits);
  g = nets.main.project_backward(g, accumulate);
  nets.encoder.backward(Tensor{}, g, accumulate);
}

Tensor tap_features(Networks& nets, const Tensor& images, Mode mode) {
  check_input(nets, images);
  if (nets.tap == FeatureTap::middle) return nets.encoder.forward(images, mode, false).middle;
  auto f = nets.encoder.forward(images, mode, true);
  if (nets.task == Task::segmentation) return nets.main.project(f.final, mode);
  return f.final;
}

Tensor forward_pretext(Networks& nets, const Tensor& patches, Mode mode) {
  return nets.pretext.forward(tap_features(nets, patches, mode), mode);
}

void backward_pretext(Networks& nets, const Tensor& grad_logits, bool accumulate) {
  Tensor g = nets.pretext.backward(grad_logits, accumulate);
  if (nets.tap == FeatureTap::middle) {
    nets.encoder.backward(g, Tensor{}, accumulate);
    return;
  }
  if (nets.task == Task::segmentation) g = nets.main.project_backward(g, accumulate);
  nets.encoder.backward(Tensor{}, g, accumulate);
}

Tensor forward_discriminator(Networks& nets, const Tensor& probs, Mode mode) {
  if (probs.c() != nets.discriminator.input_channels())
    throw ShapeError("discriminator expects " + std::to_string(nets.discriminator.input_channels()) +
                     " channels, got " + probs.shape_string());
  return nets.discriminator.forward(probs, mode);
}

Tensor backward_discriminator(Networks& nets, const Tensor& grad_z, bool accumulate) {
  return nets.discriminator.backward(grad_z, accumulate);
}

Tensor softmax_channels(const Tensor& logits) {
  Tensor p(logits.n(), logits.c(), logits.h(), logits.w());
  for (int n = 0; n < logits.n(); ++n)
    for (int y = 0; y < logits.h(); ++y)
      for (int x = 0; x < logits.w(); ++x) {
        double mx = logits.at(n, 0, y, x);
        for (int c = 1; c < logits.c(); ++c) mx = std::max(mx, logits.at(n, c, y, x));
        double z = 0.0;
        for (int c = 0; c < logits.c(); ++c) {
          const double e = std::exp(logits.at(n, c, y, x) - mx);
          p.at(n, c, y, x) = e;
          z += e;
        }
        for (int c = 0; c < logits.c(); ++c) p.at(n, c, y, x) /= z;
      }
  return p;
}

Tensor softmax_channels_backward(const Tensor& probs, const Tensor& grad_probs) {
  if (!probs.same_shape(grad_probs)) throw ShapeError("softmax backward shape mismatch");
  Tensor g(probs.n(), probs.c(), probs.h(), probs.w());
  for (int n = 0; n < probs.n(); ++n)
    for (int y = 0; y < probs.h(); ++y)
      for (int x = 0; x < probs.w(); ++x) {
        double dot = 0.0;
        for (int c = 0; c < probs.c(); ++c) dot += probs.at(n, c, y, x) * grad_probs.at(n, c, y, x);
        for (int c = 0; c < probs.c(); ++c)
          g.at(n, c, y, x) = probs.at(n, c, y, x) * (grad_probs.at(n, c, y, x) - dot);
      }
  return g;
}

namespace {

struct Fnv1a {
  std::uint64_t state = 0xcbf29ce484222325ULL;
  void add(const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      state ^= p[i];
      state *= 0x100000001b3ULL;
    }
  }
};

}  // namespace

std::uint64_t digest_parameters(const std::vector<Parameter*>& params) {
  Fnv1a h;
  for (const auto* p : params) {
    h.add(p->name.data(), p->name.size());
    h.add(p->value.data(), p->value.size() * sizeof(double));
  }
  return h.state;
}

std::uint64_t parameter_digest(Networks& nets, bool include_bn_stats) {
  Fnv1a h;
  const auto base = digest_parameters(nets.all_parameters());
  h.add(&base, sizeof(base));
  if (include_bn_stats) {
    for (auto* bn : nets.all_bn_layers()) {
      const auto& s = bn->state();
      h.add(s.running_mean.data(), s.running_mean.size() * sizeof(double));
      h.add(s.running_var.data(), s.running_var.size() * sizeof(double));
    }
  }
  return h.state;
}

// Checkpoint layout: 8-byte magic, u64 header length, JSON header, then the
// raw little-endian doubles of every tensor listed in the header, in order.
namespace {

constexpr char kMagic[8] = {'S', 'S', 'D', 'A', 'C', 'K', 'P', '1'};

struct NamedArray {
  std::string name;
  std::vector<double>* values;
};

std::vector<NamedArray> checkpoint_arrays(Networks& nets) {
  std::vector<NamedArray> out;
  for (auto* p : nets.all_parameters()) out.push_back({p->name, &p->value});
  for (auto* bn : nets.all_bn_layers()) {
    out.push_back({bn->name() + ".running_mean", &bn->state().running_mean});
    out.push_back({bn->name() + ".running_var", &bn->state().running_var});
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Networks& nets, const CheckpointMeta& meta) {
  auto arrays = checkpoint_arrays(nets);
  nlohmann::json header;
  header["architecture"] = to_json(nets.arch);
  header["task"] = to_string(nets.task);
  header["num_classes"] = nets.num_classes;
  header["pretext_labels"] = nets.pretext_labels;
  header["feature_tap"] = to_string(nets.tap);
  header["config_hash"] = meta.config_hash;
  header["extra"] = meta.extra;
  auto& index = header["tensors"] = nlohmann::json::array();
  for (const auto& a : arrays) index.push_back({{"name", a.name}, {"size", a.values->size()}});
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& a : arrays)
    out.write(reinterpret_cast<const char*>(a.values->data()),
              static_cast<std::streamsize>(a.values->size() * sizeof(double)));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Networks load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IoError("not a checkpoint: " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1u << 28)) throw IoError("corrupt checkpoint header: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint header: " + path.string());
  const auto header = nlohmann::json::parse(text);

  Networks nets = build_networks(architecture_from_json(header.at("architecture")),
                                 parse_task(header.at("task").get<std::string>()),
                                 header.at("pretext_labels").get<int>(), header.at("num_classes").get<int>(),
                                 parse_feature_tap(header.at("feature_tap").get<std::string>()), 0);
  auto arrays = checkpoint_arrays(nets);
  const auto& index = header.at("tensors");
  if (index.size() != arrays.size())
    throw ShapeError("checkpoint has " + std::to_string(index.size()) + " tensors, architecture needs " +
                     std::to_string(arrays.size()));
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    const auto name = index[i].at("name").get<std::string>();
    const auto size = index[i].at("size").get<std::size_t>();
    if (name != arrays[i].name || size != arrays[i].values->size())
      throw ShapeError("checkpoint tensor mismatch at " + arrays[i].name + ": found " + name + " of size " +
                       std::to_string(size));
    in.read(reinterpret_cast<char*>(arrays[i].values->data()), static_cast<std::streamsize>(size * sizeof(double)));
    if (!in) throw IoError("truncated checkpoint data at " + name);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes in checkpoint " + path.string());
  if (meta) {
    meta->config_hash = header.at("config_hash").get<std::string>();
    meta->extra = header.value("extra", nlohmann::json::object());
  }
  return nets;
}

}  // namespace ssda
