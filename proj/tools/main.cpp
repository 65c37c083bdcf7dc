#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "marnet/ablation.hpp"
#include "marnet/checkpoint.hpp"
#include "marnet/model_check.hpp"
#include "marnet/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace marnet;

namespace {

enum Exit : int {
  ok = 0,
  internal = 1,
  config = 2,
  data_error = 3,
  checkpoint = 4,
  numeric = 5,
  shape = 6,
  check_failed = 7,
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw Error("cannot write " + path.string());
}

struct Common {
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::optional<std::size_t> points;
  bool deterministic = false;
};

// Model chosen by --config (a "train.model" or "model" entry) or --preset.
struct ModelChoice {
  std::string config;
  std::string preset = "classifier";
  std::size_t outputs = 4;
  std::optional<std::size_t> groups;
  std::optional<std::size_t> levels;

  ModelConfig resolve() const {
    if (!config.empty()) {
      const auto j = read_json(config);
      if (j.contains("train")) return train_config_from_json(j.at("train")).model;
      if (j.contains("model")) return model_from_json(j.at("model"));
      return model_from_json(j);
    }
    json j = {{"preset", preset}, {"n_outputs", outputs}};
    if (groups) j["n_groups"] = *groups;
    if (levels) j["levels"] = *levels;
    return model_from_json(j);
  }

  void add(CLI::App* cmd) {
    cmd->add_option("--config", config, "JSON file with a model or train config");
    cmd->add_option("--preset", preset, "classifier | lite | part_segmenter | lite_segmenter | levels");
    cmd->add_option("--outputs", outputs, "Classes or parts");
    cmd->add_option("--groups", groups, "Group count N_g");
    cmd->add_option("--levels", levels, "Backbone depth for the levels preset");
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Override the configured seed");
  cmd->add_option("--out-dir", c.out_dir, "Directory for outputs");
  cmd->add_option("--points", c.points, "Points per cloud fed to the network");
  cmd->add_flag("--deterministic", c.deterministic, "Single-threaded, reproducible run");
}

void print_metrics(const MetricsReport& r) {
  std::printf("samples %zu  OA %.4f  mcA %.4f", r.samples, r.overall_accuracy, r.mean_class_accuracy);
  if (r.segmentation) std::printf("  mIoU %.4f", r.miou);
  std::printf("\n");
}

int run_train(const std::string& config_path, const Common& c, std::optional<std::size_t> epochs) {
  const auto j = read_json(config_path);
  auto cfg = train_config_from_json(j.at("train"));
  auto dc = data_config_from_json(j.value("data", json::object()));
  if (c.seed) cfg.seed = *c.seed;
  if (c.points) {
    cfg.points = *c.points;
    if (dc.points < cfg.points) dc.points = cfg.points;
  }
  if (epochs) cfg.epochs = *epochs;
  validate(cfg);
  const auto [train_set, test_set] = load_data(dc);
  fs::create_directories(c.out_dir);
  const fs::path out(c.out_dir);
  auto result = train(cfg, train_set, &test_set, &std::cout);
  save_checkpoint(out / "final.ckpt", result.final_checkpoint);
  save_checkpoint(out / "best.ckpt", result.best_checkpoint);
  json log = json::array();
  for (const auto& e : result.log) {
    log.push_back({{"epoch", e.epoch},
                   {"lr", e.lr},
                   {"loss", e.loss},
                   {"train_accuracy", e.train_accuracy},
                   {"validation", e.validation < 0.0 ? json(nullptr) : json(e.validation)},
                   {"seconds", e.seconds}});
  }
  write_json(out / "train_log.json",
             {{"config", to_json(cfg)}, {"data", to_json(dc)}, {"epochs", log}, {"best_epoch", result.best_epoch},
              {"seconds", result.seconds}});
  auto model = load_model<float>(result.best_checkpoint);
  EvalOptions eo;
  eo.points = cfg.points;
  const auto report = evaluate(model, test_set, eo);
  write_json(out / "metrics.json", to_json(report));
  std::printf("best epoch %zu  ", result.best_epoch);
  print_metrics(report);
  return ok;
}

int run_eval(const std::string& ckpt, const std::string& config_path, const Common& c, std::size_t voting,
             std::size_t noise) {
  auto model = load_model<float>(load_checkpoint(ckpt));
  DataConfig dc;
  EvalOptions eo;
  if (!config_path.empty()) {
    const auto j = read_json(config_path);
    dc = data_config_from_json(j.value("data", json::object()));
    if (j.contains("eval")) eo = eval_options_from_json(j.at("eval"));
    if (eo.points == 0 && j.contains("train")) eo.points = j.at("train").value("points", std::size_t{0});
  }
  if (c.seed) eo.seed = *c.seed;
  if (c.points) eo.points = *c.points;
  if (dc.kind != "manifest" && eo.points > dc.points && dc.test_points < eo.points) dc.test_points = eo.points;
  eo.voting = voting;
  eo.noise = noise;
  const auto test_set = load_data(dc).second;
  const auto report = evaluate(model, test_set, eo);
  fs::create_directories(c.out_dir);
  write_json(fs::path(c.out_dir) / "metrics.json", to_json(report));
  print_metrics(report);
  return ok;
}

int run_gradcheck(const ModelChoice& m, const Common& c, std::size_t clouds, std::size_t max_elements) {
  ModelGradCheckOptions o;
  o.clouds = clouds;
  o.points = c.points.value_or(8);
  o.max_elements = max_elements;
  if (c.seed) o.seed = *c.seed;
  const auto cfg = m.resolve();
  const auto r = check_model_gradients(cfg, o);
  for (const auto& p : r.parameters) {
    if (!p.report.pass || !p.report.failure.empty()) {
      std::printf("  %-32s rel %.3g %s\n", p.name.c_str(), p.report.max_rel_err, p.report.failure.c_str());
    }
  }
  std::printf("%s: %s  max rel err %.3g  entries %zu  zeros %zu  kinks %zu\n", cfg.name.c_str(),
              r.pass ? "pass" : "FAIL", r.max_rel_err, r.checked, r.zeros, r.kinks);
  return r.pass ? ok : check_failed;
}

int run_ablate(const std::string& config_path, const Common& c) {
  auto spec = ablation_spec_from_json(read_json(config_path));
  if (c.seed) spec.train.seed = *c.seed;
  if (c.points) spec.train.points = *c.points;
  const auto table = ablate(spec, &std::cout);
  write_results(table, c.out_dir);
  std::cout << to_csv(table);
  return ok;
}

int run_bench(const std::string& ckpt, const ModelChoice& m, const Common& c, std::size_t batch,
              std::size_t iterations) {
  std::optional<Model<float>> model;
  if (!ckpt.empty()) {
    model.emplace(load_model<float>(load_checkpoint(ckpt)));
  } else {
    model.emplace(m.resolve(), c.seed.value_or(1));
  }
  BenchOptions o;
  o.batch_size = batch;
  o.iterations = iterations;
  o.points = c.points.value_or(1024);
  if (c.seed) o.seed = *c.seed;
  const auto r = bench(*model, o);
  std::printf("%s: batch %zu, %zu points: %.3f ms/sample, %.3f ms/batch (median of %zu), peak %.1f MiB\n",
              model->config().name.c_str(), o.batch_size, o.points, r.ms_per_sample, r.ms_per_batch, r.batch_ms.size(),
              static_cast<double>(r.peak_bytes) / (1024.0 * 1024.0));
  return ok;
}

int run_complexity(const ModelChoice& m, const Common& c) {
  const auto cfg = m.resolve();
  const auto r = complexity(cfg, c.points.value_or(cfg.reference_points));
  json layers = json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"name", l.name}, {"parameters", l.parameters}, {"flops", l.flops}});
  }
  std::cout << json{{"model", cfg.name},
                    {"parameters", r.parameters},
                    {"flops", r.flops},
                    {"points", r.points},
                    {"convention", r.convention},
                    {"layers", layers}}
                   .dump(2)
            << '\n';
  return ok;
}

int run_synth(DataConfig dc, const Common& c) {
  if (c.seed) dc.seed = *c.seed;
  if (c.points) dc.points = *c.points;
  const auto [train_set, test_set] = load_data(dc);
  const fs::path out(c.out_dir);
  auto tm = data::write_dataset(train_set, out, "train");
  auto sm = data::write_dataset(test_set, out, "test");
  data::save_manifest(out / "train.json", tm);
  data::save_manifest(out / "test.json", sm);
  std::printf("wrote %zu train and %zu test clouds under %s\n", train_set.clouds.size(), test_set.clouds.size(),
              out.string().c_str());
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"marnet point cloud training and evaluation"};
  app.require_subcommand(1);

  Common common;
  ModelChoice model;
  std::string config_path, ckpt;
  std::optional<std::size_t> epochs;
  std::size_t voting = 1, noise = 0, batch = 1, iterations = 20, clouds = 4, max_elements = 4;
  DataConfig synth_cfg;

  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoints");
  train_cmd->add_option("--config", config_path, "JSON with train and data sections")->required();
  train_cmd->add_option("--epochs", epochs, "Override the configured epoch count");
  add_common(train_cmd, common);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval_cmd->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--config", config_path, "JSON with data (and eval) sections");
  eval_cmd->add_option("--voting", voting, "Forward passes averaged per sample")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--noise", noise, "Noise points added per cloud");
  add_common(eval_cmd, common);

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of a 64-bit model");
  model.add(grad_cmd);
  grad_cmd->add_option("--clouds", clouds, "Clouds per batch");
  grad_cmd->add_option("--max-elements", max_elements, "Entries perturbed per parameter tensor (0: all)");
  add_common(grad_cmd, common);

  auto* ablate_cmd = app.add_subcommand("ablate", "Run an ablation sweep");
  ablate_cmd->add_option("--config", config_path, "Ablation spec JSON")->required();
  add_common(ablate_cmd, common);

  auto* bench_cmd = app.add_subcommand("bench", "Time inference");
  bench_cmd->add_option("--checkpoint", ckpt, "Checkpoint file (default: a fresh model)");
  model.add(bench_cmd);
  bench_cmd->add_option("--batch", batch, "Batch size")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--iterations", iterations, "Timed batches")->check(CLI::PositiveNumber);
  add_common(bench_cmd, common);

  auto* cx_cmd = app.add_subcommand("complexity", "Parameter and FLOP counts");
  model.add(cx_cmd);
  add_common(cx_cmd, common);

  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset with manifests");
  synth_cmd->add_option("--kind", synth_cfg.kind, "shapes | hemisphere | torus");
  synth_cmd->add_option("--train-size", synth_cfg.train_size, "Training clouds");
  synth_cmd->add_option("--test-size", synth_cfg.test_size, "Test clouds");
  add_common(synth_cmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? ok : config;
  }

  try {
    if (*train_cmd) return run_train(config_path, common, epochs);
    if (*eval_cmd) return run_eval(ckpt, config_path, common, voting, noise);
    if (*grad_cmd) return run_gradcheck(model, common, clouds, max_elements);
    if (*ablate_cmd) return run_ablate(config_path, common);
    if (*bench_cmd) return run_bench(ckpt, model, common, batch, iterations);
    if (*cx_cmd) return run_complexity(model, common);
    if (*synth_cmd) return run_synth(synth_cfg, common);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return config;
  } catch (const json::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return config;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return data_error;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error (%s): %s\n", to_string(e.code()), e.what());
    return checkpoint;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return numeric;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "shape error: %s\n", e.what());
    return shape;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return internal;
  }
  return internal;
}
