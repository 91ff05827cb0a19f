#include "ssda/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "ssda/error.hpp"

namespace ssda {

namespace pt = boost::property_tree;

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"src", "tar",       "bn",          "rot",          "mixrot",
                                              "sprot", "adv",     "rot+adv",     "rot+adv+bn",   "rot+bn",
                                              "sprot+adv", "sprot+adv+bn", "mixrot+adv"};
  return names;
}

void apply_preset(ExperimentConfig& cfg, const std::string& preset) {
  auto& t = cfg.train;
  t.target_supervised = false;
  t.adversarial = false;
  t.pretext_mode = PretextMode::none;
  cfg.calibrate = false;
  if (preset == "src") {
  } else if (preset == "tar") {
    t.target_supervised = true;
  } else if (preset == "bn") {
    cfg.calibrate = true;
  } else if (preset == "rot") {
    t.pretext_mode = PretextMode::rot;
  } else if (preset == "mixrot") {
    t.pretext_mode = PretextMode::mixrot;
  } else if (preset == "sprot") {
    t.pretext_mode = PretextMode::sprot;
  } else if (preset == "adv") {
    t.adversarial = true;
  } else if (preset == "rot+adv") {
    t.pretext_mode = PretextMode::rot;
    t.adversarial = true;
  } else if (preset == "rot+adv+bn") {
    t.pretext_mode = PretextMode::rot;
    t.adversarial = true;
    cfg.calibrate = true;
  } else if (preset == "rot+bn") {
    t.pretext_mode = PretextMode::rot;
    cfg.calibrate = true;
  } else if (preset == "sprot+adv") {
    t.pretext_mode = PretextMode::sprot;
    t.adversarial = true;
  } else if (preset == "sprot+adv+bn") {
    t.pretext_mode = PretextMode::sprot;
    t.adversarial = true;
    cfg.calibrate = true;
  } else if (preset == "mixrot+adv") {
    t.pretext_mode = PretextMode::mixrot;
    t.adversarial = true;
  } else {
    throw ConfigError("unknown preset '" + preset + "'");
  }
  cfg.preset = preset;
}

namespace {

// Reads typed keys out of one section and rejects anything it did not read.
class Section {
 public:
  Section(const pt::ptree& root, std::string name) : name_(std::move(name)) {
    if (auto child = root.get_child_optional(name_)) tree_ = &*child;
  }

  ~Section() noexcept(false) {
    if (!tree_ || std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : *tree_)
      if (!used_.count(key)) throw ConfigError("unknown config field [" + name_ + "] " + key);
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    used_.insert(key);
    if (!tree_) return;
    auto raw = tree_->get_optional<std::string>(key);
    if (!raw) return;
    try {
      out = convert<T>(*raw);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("invalid value for [" + name_ + "] " + key + ": '" + *raw + "'");
    }
  }

  template <typename T, typename Parse>
  void read_with(const std::string& key, T& out, Parse parse) {
    std::string text;
    bool present = false;
    used_.insert(key);
    if (tree_) {
      if (auto raw = tree_->get_optional<std::string>(key)) {
        text = *raw;
        present = true;
      }
    }
    if (!present) return;
    try {
      out = parse(text);
    } catch (const std::exception& e) {
      throw ConfigError("invalid value for [" + name_ + "] " + key + ": " + e.what());
    }
  }

  bool has(const std::string& key) const { return tree_ && tree_->get_optional<std::string>(key).has_value(); }

 private:
  template <typename T>
  static T convert(const std::string& raw) {
    if constexpr (std::is_same_v<T, bool>) {
      if (raw == "true" || raw == "1" || raw == "yes" || raw == "on") return true;
      if (raw == "false" || raw == "0" || raw == "no" || raw == "off") return false;
      throw ConfigError("expected a boolean, got '" + raw + "'");
    } else if constexpr (std::is_same_v<T, std::string>) {
      return raw;
    } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
      return std::filesystem::path(raw);
    } else if constexpr (std::is_integral_v<T>) {
      std::size_t pos = 0;
      const long long v = std::stoll(raw, &pos);
      if (pos != raw.size()) throw ConfigError("expected an integer, got '" + raw + "'");
      return static_cast<T>(v);
    } else {
      std::size_t pos = 0;
      const double v = std::stod(raw, &pos);
      if (pos != raw.size()) throw ConfigError("expected a number, got '" + raw + "'");
      return static_cast<T>(v);
    }
  }

  std::string name_;
  const pt::ptree* tree_ = nullptr;
  std::set<std::string> used_;
};

template <std::size_t N>
std::array<int, N> parse_int_list(const std::string& text) {
  std::array<int, N> out{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= N) throw ConfigError("expected " + std::to_string(N) + " comma-separated integers");
    out[i++] = std::stoi(item);
  }
  if (i != N) throw ConfigError("expected " + std::to_string(N) + " comma-separated integers");
  return out;
}

LrSchedule parse_schedule(const std::string& text) {
  if (text == "constant") return LrSchedule::constant;
  if (text == "poly") return LrSchedule::poly;
  throw ConfigError("unknown schedule '" + text + "'");
}

const char* to_string(LrSchedule s) { return s == LrSchedule::constant ? "constant" : "poly"; }

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text) {
  pt::ptree root;
  std::istringstream in(text);
  try {
    pt::read_ini(in, root);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  static const std::set<std::string> sections{"data", "run", "train", "model", "calibration"};
  for (const auto& [name, child] : root)
    if (!sections.count(name)) throw ConfigError("unknown config section [" + name + "]");

  ExperimentConfig cfg;
  {
    Section run(root, "run");
    std::string preset = cfg.preset;
    run.read("preset", preset);
    apply_preset(cfg, preset);
    run.read("seed", cfg.train.seed);
    run.read("out_dir", cfg.out_dir);
  }
  {
    Section data(root, "data");
    auto& d = cfg.data;
    data.read_with("task", d.task, parse_task);
    if (d.task == Task::segmentation) d.image_size = 48;
    data.read("image_size", d.image_size);
    data.read("num_classes", d.num_classes);
    data.read("samples_per_class", d.samples_per_class);
    data.read("test_samples_per_class", d.test_samples_per_class);
    data.read("hue_rotation", d.shift.hue_rotation);
    data.read("noise_sigma", d.shift.noise_sigma);
    data.read("blur_radius", d.shift.blur_radius);
    data.read_with("background_texture", d.shift.background_texture, parse_background_texture);
    data.read("seed", d.seed);
    data.read("root", cfg.data_root);
  }
  cfg.train.task = cfg.data.task;
  if (cfg.data.task == Task::segmentation) cfg.train.crop_size = 24;
  {
    Section model(root, "model");
    auto& a = cfg.train.arch;
    model.read_with("encoder_channels", a.encoder_channels, parse_int_list<4>);
    model.read_with("discriminator_channels", a.discriminator_channels, parse_int_list<2>);
    model.read("bn_eps", a.bn_eps);
    model.read("bn_momentum", a.bn_momentum);
  }
  {
    Section train(root, "train");
    auto& t = cfg.train;
    train.read_with("pretext_mode", t.pretext_mode, parse_pretext_mode);
    train.read("adversarial", t.adversarial);
    train.read("adversarial_target_only", t.adversarial_target_only);
    train.read("target_supervised", t.target_supervised);
    train.read("lambda_p", t.weights.lambda_p);
    train.read("lambda_adv", t.weights.lambda_adv);
    train.read("lambda_d", t.weights.lambda_d);
    train.read("lr", t.optimizer.lr);
    train.read("momentum", t.optimizer.momentum);
    train.read("weight_decay", t.optimizer.weight_decay);
    train.read("disc_lr", t.disc_optimizer.lr);
    train.read("disc_momentum", t.disc_optimizer.momentum);
    train.read("disc_weight_decay", t.disc_optimizer.weight_decay);
    train.read_with("schedule", t.schedule, parse_schedule);
    train.read("poly_power", t.poly_power);
    train.read("batch_size_source", t.batch_size_source);
    train.read("batch_size_target", t.batch_size_target);
    train.read("max_iters", t.max_iters);
    train.read("eval_every", t.eval_every);
    train.read_with("feature_tap", t.feature_tap, parse_feature_tap);
    train.read("crop_size", t.crop_size);
    train.read("expand_all_rotations", t.expand_all_rotations);
    train.read_with("loss_normalization", t.loss_normalization, parse_loss_normalization);
    train.read("debug_accumulation_check", t.debug_accumulation_check);
    train.read("debug_check_every", t.debug_check_every);
  }
  {
    Section cal(root, "calibration");
    cal.read("enabled", cfg.calibrate);
    cal.read("passes", cfg.calibration.passes);
    cal.read("batch_size", cfg.calibration.batch_size);
    cal.read("momentum", cfg.calibration.momentum);
  }
  cfg.calibration.seed = cfg.train.seed;
  cfg.data.validate();
  cfg.train.validate();
  cfg.train.pretext().validate_for(cfg.data.image_size, cfg.data.image_size);
  if (cfg.calibrate && cfg.calibration.passes < 1) throw ConfigError("[calibration] passes must be >= 1");
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

void set_run_seed(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.train.seed = seed;
  cfg.calibration.seed = seed;
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  const auto& d = cfg.data;
  const auto& t = cfg.train;
  auto opt = [](const OptimizerConfig& o) {
    return nlohmann::json{{"lr", o.lr}, {"momentum", o.momentum}, {"weight_decay", o.weight_decay}};
  };
  return {
      {"preset", cfg.preset},
      {"data",
       {{"task", to_string(d.task)},
        {"image_size", d.image_size},
        {"num_classes", d.num_classes},
        {"samples_per_class", d.samples_per_class},
        {"test_samples_per_class", d.test_samples_per_class},
        {"hue_rotation", d.shift.hue_rotation},
        {"noise_sigma", d.shift.noise_sigma},
        {"blur_radius", d.shift.blur_radius},
        {"background_texture", to_string(d.shift.background_texture)},
        {"seed", d.seed}}},
      {"train",
       {{"task", to_string(t.task)},
        {"pretext_mode", to_string(t.pretext_mode)},
        {"adversarial", t.adversarial},
        {"adversarial_target_only", t.adversarial_target_only},
        {"target_supervised", t.target_supervised},
        {"lambda_p", t.weights.lambda_p},
        {"lambda_adv", t.weights.lambda_adv},
        {"lambda_d", t.weights.lambda_d},
        {"optimizer", opt(t.optimizer)},
        {"disc_optimizer", opt(t.disc_optimizer)},
        {"schedule", to_string(t.schedule)},
        {"poly_power", t.poly_power},
        {"batch_size_source", t.batch_size_source},
        {"batch_size_target", t.batch_size_target},
        {"max_iters", t.max_iters},
        {"eval_every", t.eval_every},
        {"seed", t.seed},
        {"feature_tap", to_string(t.feature_tap)},
        {"crop_size", t.crop_size},
        {"expand_all_rotations", t.expand_all_rotations},
        {"loss_normalization", to_string(t.loss_normalization)},
        {"architecture", to_json(t.arch)}}},
      {"calibration",
       {{"enabled", cfg.calibrate},
        {"passes", cfg.calibration.passes},
        {"batch_size", cfg.calibration.batch_size},
        {"momentum", cfg.calibration.momentum},
        {"seed", cfg.calibration.seed}}},
  };
}

std::string config_hash(const ExperimentConfig& cfg) {
  const std::string text = to_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::filesystem::path run_directory(const ExperimentConfig& cfg) {
  std::string preset = cfg.preset;
  for (auto& c : preset)
    if (c == '+') c = '_';
  return cfg.out_dir / (preset + "-" + config_hash(cfg).substr(0, 12) + "-s" + std::to_string(cfg.train.seed));
}

ExperimentConfig source_only_variant(const ExperimentConfig& cfg) {
  ExperimentConfig src = cfg;
  apply_preset(src, "src");
  return src;
}

LoadedData load_synthetic_data(const std::filesystem::path& root) {
  auto load = [&](const char* domain, const char* split, Domain d) {
    return load_dataset(load_manifest(root / domain / split / "manifest.csv"), d);
  };
  return {load("source", "train", Domain::source), load("source", "test", Domain::source),
          load("target", "train", Domain::target), load("target", "test", Domain::target)};
}

LoadedData in_memory_data(const SyntheticShiftSpec& spec) {
  auto pair = generate_synthetic_pair(spec);
  return {std::move(pair.source_train), std::move(pair.source_test), std::move(pair.target_train),
          std::move(pair.target_test)};
}

nlohmann::json RunSummary::to_json() const {
  nlohmann::json j{{"preset", preset},
                   {"config_hash", config_hash},
                   {"seed", seed},
                   {"source", source.to_json()},
                   {"target", target.to_json()}};
  j["target_before_calibration"] =
      target_before_calibration ? target_before_calibration->to_json() : nlohmann::json(nullptr);
  j["src_relative_gain"] = src_relative_gain ? nlohmann::json(*src_relative_gain) : nlohmann::json(nullptr);
  return j;
}

RunSummary run_experiment(const ExperimentConfig& cfg, const LoadedData& data,
                          const std::optional<std::filesystem::path>& run_dir, TrainResult* result) {
  const std::string hash = config_hash(cfg);
  std::optional<TrainOutputs> outputs;
  if (run_dir) {
    outputs = TrainOutputs{*run_dir, hash};
    std::filesystem::create_directories(*run_dir);
    std::ofstream(*run_dir / "config.json") << to_json(cfg).dump(2) << '\n';
  }
  const TrainData td{&data.source_train, &data.target_train, &data.source_test, &data.target_test};
  TrainResult tr = train(td, cfg.train, outputs ? &*outputs : nullptr);
  Networks& nets = tr.networks;

  RunSummary summary;
  summary.preset = cfg.preset;
  summary.config_hash = hash;
  summary.seed = cfg.train.seed;
  if (cfg.calibrate) {
    summary.target_before_calibration = evaluate(nets, data.target_test);
    calibrate(nets, data.target_train, cfg.calibration);
  }
  summary.source = evaluate(nets, data.source_test);
  summary.target = evaluate(nets, data.target_test);

  if (run_dir) {
    save_checkpoint(*run_dir / "final.ckpt", nets, {hash, {{"calibrated", cfg.calibrate}}});
    const auto src_dir = run_directory(source_only_variant(cfg));
    const auto src_summary = src_dir / "summary.json";
    if (cfg.preset == "src") {
      summary.src_relative_gain = 0.0;
    } else if (std::filesystem::exists(src_summary)) {
      std::ifstream in(src_summary);
      const auto j = nlohmann::json::parse(in);
      summary.src_relative_gain = summary.target.primary() - j.at("target").at("value").get<double>();
    }
    std::ofstream(*run_dir / "summary.json") << summary.to_json().dump(2) << '\n';
  }
  if (result) *result = std::move(tr);
  return summary;
}

}  // namespace ssda
