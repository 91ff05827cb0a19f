#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "ssda/bncal.hpp"
#include "ssda/error.hpp"
#include "ssda/experiment.hpp"
#include "ssda/metrics.hpp"

namespace fs = std::filesystem;
using namespace ssda;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool force = false;
};

ExperimentConfig load_config(const CommonOptions& opt, const std::string& preset_override) {
  ExperimentConfig cfg = opt.config.empty() ? ExperimentConfig{} : load_experiment_config(opt.config);
  if (!preset_override.empty()) apply_preset(cfg, preset_override);
  if (opt.seed) set_run_seed(cfg, *opt.seed);
  if (!opt.out_dir.empty()) cfg.out_dir = opt.out_dir;
  return cfg;
}

bool manifests_present(const fs::path& root) {
  for (const char* d : {"source", "target"})
    for (const char* s : {"train", "test"})
      if (!fs::exists(root / d / s / "manifest.csv")) return false;
  return true;
}

int cmd_generate(const CommonOptions& opt) {
  ExperimentConfig cfg = load_config(opt, "");
  const fs::path root = opt.out_dir.empty() ? cfg.data_root : fs::path(opt.out_dir);
  if (manifests_present(root) && !opt.force)
    throw ConfigError("dataset already exists at " + root.string() + " (use --force to regenerate)");
  if (opt.force) {
    for (const char* d : {"source", "target"}) fs::remove_all(root / d);
  }
  const auto written = write_synthetic_pair(root, generate_synthetic_pair(cfg.data));
  std::ofstream(root / "spec.json") << to_json(cfg)["data"].dump(2) << '\n';
  for (const auto& p : {written.source_train, written.source_test, written.target_train, written.target_test})
    std::cout << p.string() << '\n';
  return 0;
}

int cmd_train(const CommonOptions& opt, const std::string& preset) {
  ExperimentConfig cfg = load_config(opt, preset);
  const fs::path dir = run_directory(cfg);
  if (fs::exists(dir / "summary.json") && !opt.force)
    throw ConfigError("run directory " + dir.string() + " is already complete (use --force to rerun)");
  if (opt.force) fs::remove_all(dir);
  if (!manifests_present(cfg.data_root))
    throw LoaderError(LoaderErrorKind::missing_file,
                      "no dataset under " + cfg.data_root.string() + " (run `ssda generate` first)");
  const LoadedData data = load_synthetic_data(cfg.data_root);
  const RunSummary summary = run_experiment(cfg, data, dir);
  std::cout << dir.string() << '\n';
  std::printf("%s seed %llu: target %.4f source %.4f", cfg.preset.c_str(),
              static_cast<unsigned long long>(cfg.train.seed), summary.target.primary(), summary.source.primary());
  if (summary.target_before_calibration)
    std::printf(" (before calibration %.4f)", summary.target_before_calibration->primary());
  if (summary.src_relative_gain) std::printf(" gain vs src %+.4f", *summary.src_relative_gain);
  std::printf("\n");
  return 0;
}

int cmd_calibrate(const CommonOptions& opt, const std::string& in, const std::string& manifest,
                  const std::string& out, CalibrationConfig cal) {
  if (!fs::exists(in)) throw IoError("checkpoint not found: " + in);
  if (opt.seed) cal.seed = *opt.seed;
  if (fs::exists(out) && !opt.force) throw ConfigError("output " + out + " exists (use --force to overwrite)");
  CheckpointMeta meta;
  Networks nets = load_checkpoint(in, &meta);
  const Dataset target = load_dataset(load_manifest(manifest));
  calibrate(nets, target, cal);
  meta.extra["calibrated"] = true;
  meta.extra["calibration"] = {{"passes", cal.passes}, {"batch_size", cal.batch_size},
                               {"momentum", cal.momentum}, {"seed", cal.seed}, {"manifest", manifest}};
  save_checkpoint(out, nets, meta);
  std::cout << out << '\n';
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::vector<std::string>& manifests, const std::string& out) {
  if (!fs::exists(ckpt)) throw IoError("checkpoint not found: " + ckpt);
  Networks nets = load_checkpoint(ckpt);
  nlohmann::json records = nlohmann::json::array();
  for (const auto& m : manifests) {
    const Dataset ds = load_dataset(load_manifest(m));
    auto j = evaluate(nets, ds).to_json();
    j["manifest"] = m;
    records.push_back(j);
  }
  if (!out.empty()) std::ofstream(out) << records.dump(2) << '\n';
  std::cout << records.dump(2) << '\n';
  return 0;
}

int cmd_export(const std::string& ckpt, const std::vector<std::string>& manifests, const std::string& out,
               const std::string& tap) {
  if (!fs::exists(ckpt)) throw IoError("checkpoint not found: " + ckpt);
  Networks nets = load_checkpoint(ckpt);
  if (!tap.empty()) nets.tap = parse_feature_tap(tap);
  std::vector<EmbeddingRow> rows;
  for (const auto& m : manifests) {
    const auto part = compute_embeddings(nets, load_dataset(load_manifest(m)));
    rows.insert(rows.end(), part.begin(), part.end());
  }
  write_embeddings_csv(out, rows);
  std::cout << out << " (" << rows.size() << " rows)\n";
  return 0;
}

std::string shell_quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

int cmd_sweep(const CommonOptions& opt, const std::string& self, const std::vector<std::string>& presets,
              const std::vector<std::uint64_t>& seeds) {
  ExperimentConfig base = load_config(opt, "");
  if (!manifests_present(base.data_root))
    throw LoaderError(LoaderErrorKind::missing_file,
                      "no dataset under " + base.data_root.string() + " (run `ssda generate` first)");
  for (const auto& p : presets) apply_preset(base, p);

  // Source-only runs first so every other run can report its SRC-relative gain.
  std::vector<std::string> ordered;
  if (std::find(presets.begin(), presets.end(), "src") != presets.end()) ordered.push_back("src");
  for (const auto& p : presets)
    if (p != "src") ordered.push_back(p);

  nlohmann::json rows = nlohmann::json::array();
  int failures = 0;
  for (const auto& preset : ordered)
    for (auto seed : seeds) {
      std::string cmd = shell_quote(self) + " train --preset " + shell_quote(preset) + " --seed " +
                        std::to_string(seed);
      if (!opt.config.empty()) cmd += " --config " + shell_quote(opt.config);
      if (!opt.out_dir.empty()) cmd += " --out-dir " + shell_quote(opt.out_dir);
      if (opt.force) cmd += " --force";
      cmd += " > /dev/null";
      std::cerr << "[sweep] " << preset << " seed " << seed << '\n';
      const int rc = std::system(cmd.c_str());
      ExperimentConfig cfg = base;
      apply_preset(cfg, preset);
      set_run_seed(cfg, seed);
      const fs::path summary = run_directory(cfg) / "summary.json";
      if (rc != 0 || !fs::exists(summary)) {
        ++failures;
        rows.push_back({{"preset", preset}, {"seed", seed}, {"error", "run failed"}});
        continue;
      }
      std::ifstream in(summary);
      rows.push_back(nlohmann::json::parse(in));
    }
  const fs::path out = base.out_dir / "sweep.json";
  fs::create_directories(base.out_dir);
  std::ofstream(out) << rows.dump(2) << '\n';
  for (const auto& r : rows) {
    if (r.contains("error")) {
      std::printf("%-14s seed %-3llu FAILED\n", r["preset"].get<std::string>().c_str(),
                  static_cast<unsigned long long>(r["seed"].get<std::uint64_t>()));
      continue;
    }
    std::printf("%-14s seed %-3llu target %.4f source %.4f\n", r["preset"].get<std::string>().c_str(),
                static_cast<unsigned long long>(r["seed"].get<std::uint64_t>()),
                r["target"]["value"].get<double>(), r["source"]["value"].get<double>());
  }
  std::cout << out.string() << '\n';
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised domain adaptation experiments"};
  app.require_subcommand(1);

  CommonOptions opt;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "experiment config (INI)")->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "run seed");
    sub->add_option("--out-dir", opt.out_dir, "output directory");
    sub->add_flag("--force", opt.force, "overwrite existing outputs");
  };

  auto* generate = app.add_subcommand("generate", "render the synthetic source/target pair");
  add_common(generate);

  std::string preset;
  auto* train = app.add_subcommand("train", "train, optionally calibrate, and evaluate one run");
  add_common(train);
  train->add_option("--preset", preset, "override [run] preset");

  std::string in_ckpt, out_ckpt, data_manifest;
  CalibrationConfig cal;
  auto* calib = app.add_subcommand("calibrate-bn", "recompute BN statistics on target images");
  add_common(calib);
  calib->add_option("--checkpoint", in_ckpt, "input checkpoint")->required();
  calib->add_option("--data", data_manifest, "target train manifest")->required()->check(CLI::ExistingFile);
  calib->add_option("--output", out_ckpt, "output checkpoint")->required();
  calib->add_option("--passes", cal.passes, "sweeps over the target images")->check(CLI::PositiveNumber);
  calib->add_option("--batch-size", cal.batch_size)->check(CLI::PositiveNumber);
  calib->add_option("--momentum", cal.momentum)->check(CLI::Range(0.0, 1.0));

  std::vector<std::string> manifests;
  std::string out_file;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on one or more manifests");
  eval->add_option("--checkpoint", in_ckpt)->required();
  eval->add_option("--manifest", manifests)->required()->check(CLI::ExistingFile);
  eval->add_option("--output", out_file, "write metrics JSON here");

  std::string tap;
  auto* embed = app.add_subcommand("export-embeddings", "write pooled tap features as CSV");
  embed->add_option("--checkpoint", in_ckpt)->required();
  embed->add_option("--manifest", manifests)->required()->check(CLI::ExistingFile);
  embed->add_option("--output", out_file)->required();
  embed->add_option("--tap", tap, "middle or final (default: the checkpoint's tap)");

  std::vector<std::string> presets{"src", "tar", "rot", "rot+adv", "rot+adv+bn", "bn"};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  auto* sweep = app.add_subcommand("sweep", "run a preset x seed grid, one process per run");
  add_common(sweep);
  sweep->add_option("--presets", presets)->delimiter(',');
  sweep->add_option("--seeds", seeds)->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    if (generate->parsed()) return cmd_generate(opt);
    if (train->parsed()) return cmd_train(opt, preset);
    if (calib->parsed()) return cmd_calibrate(opt, in_ckpt, data_manifest, out_ckpt, cal);
    if (eval->parsed()) return cmd_eval(in_ckpt, manifests, out_file);
    if (embed->parsed()) return cmd_export(in_ckpt, manifests, out_file, tap);
    if (sweep->parsed()) return cmd_sweep(opt, argv[0], presets, seeds);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
