#include "marnet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

#include "marnet/ops.hpp"
#include "marnet/optim.hpp"

namespace marnet {

double learning_rate(const TrainConfig& c, std::size_t epoch) {
  return c.lr * std::pow(c.lr_decay, static_cast<double>(epoch / c.decay_every));
}

void validate(const TrainConfig& c) {
  if (!(c.lr > 0.0)) throw ConfigError("train: lr must be > 0");
  if (!(c.weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  if (c.batch_size == 0) throw ConfigError("train: batch_size must be > 0");
  if (!(c.lr_decay > 0.0 && c.lr_decay <= 1.0)) throw ConfigError("train: lr_decay must lie in (0, 1]");
  if (c.decay_every == 0) throw ConfigError("train: decay_every must be > 0");
  if (c.points == 0) throw ConfigError("train: points must be > 0");
  validate(c.model);
}

// ---------------------------------------------------------------------------
// Config files

ModelConfig model_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  if (!j.contains("preset")) return model_config_from_json(j);
  try {
    const auto preset = j.at("preset").get<std::string>();
    const auto n = j.at("n_outputs").get<std::size_t>();
    const bool has_groups = j.contains("n_groups");
    const auto groups = j.value("n_groups", std::size_t{2});
    ModelConfig c;
    if (preset == "classifier") {
      c = presets::classifier(n, groups);
    } else if (preset == "lite") {
      c = presets::lite(n);
      if (has_groups) set_groups(c, groups);
    } else if (preset == "part_segmenter") {
      c = presets::part_segmenter(n, groups);
    } else if (preset == "lite_segmenter") {
      c = presets::lite_segmenter(n);
      if (has_groups) set_groups(c, groups);
    } else if (preset == "levels") {
      c = presets::with_levels(j.at("levels").get<std::size_t>(), n, groups);
    } else {
      throw ConfigError("unknown model preset '" + preset + "'");
    }
    c.residual = j.value("residual", true);
    if (j.value("backbone_only", false)) c = backbone_only(c);
    validate(c);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"lr_decay", c.lr_decay},
          {"decay_every", c.decay_every},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"augment", c.augment},
          {"points", c.points},
          {"eval_every", c.eval_every},
          {"model", to_json(c.model)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  try {
    TrainConfig c;
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.decay_every = j.value("decay_every", c.decay_every);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.augment = j.value("augment", c.augment);
    c.points = j.value("points", c.points);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.model = model_from_json(j.at("model"));
    validate(c);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

nlohmann::json to_json(const DataConfig& c) {
  return {{"kind", c.kind},
          {"train_size", c.train_size},
          {"test_size", c.test_size},
          {"points", c.points},
          {"test_points", c.test_points},
          {"seed", c.seed},
          {"train_manifest", c.train_manifest},
          {"test_manifest", c.test_manifest}};
}

DataConfig data_config_from_json(const nlohmann::json& j) {
  try {
    DataConfig c;
    c.kind = j.value("kind", c.kind);
    c.train_size = j.value("train_size", c.train_size);
    c.test_size = j.value("test_size", c.test_size);
    c.points = j.value("points", c.points);
    c.test_points = j.value("test_points", c.test_points);
    c.seed = j.value("seed", c.seed);
    c.train_manifest = j.value("train_manifest", c.train_manifest);
    c.test_manifest = j.value("test_manifest", c.test_manifest);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("data config: ") + e.what());
  }
}

std::pair<data::Dataset, data::Dataset> load_data(const DataConfig& c) {
  if (c.kind == "manifest") {
    if (c.train_manifest.empty() || c.test_manifest.empty()) {
      throw ConfigError("data: manifest kind needs train_manifest and test_manifest");
    }
    return {data::load_dataset(data::load_manifest(c.train_manifest)),
            data::load_dataset(data::load_manifest(c.test_manifest))};
  }
  Rng seeds(c.seed);
  const auto train_seed = seeds.next();
  const auto test_seed = seeds.next();
  const std::size_t test_points = c.test_points == 0 ? c.points : c.test_points;
  if (c.kind == "shapes") {
    if (c.train_size % 4 != 0 || c.test_size % 4 != 0) {
      throw ConfigError("data: shapes split sizes must be multiples of 4");
    }
    return {data::synth_shapes(c.train_size / 4, c.points, train_seed),
            data::synth_shapes(c.test_size / 4, test_points, test_seed)};
  }
  data::SegTask task;
  if (c.kind == "hemisphere") {
    task = data::SegTask::hemisphere;
  } else if (c.kind == "torus") {
    task = data::SegTask::torus;
  } else {
    throw ConfigError("data: unknown kind '" + c.kind + "'");
  }
  return {data::synth_segmentation(task, c.train_size, c.points, train_seed),
          data::synth_segmentation(task, c.test_size, test_points, test_seed)};
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::size_t expected_outputs(const ModelConfig& m, const data::Dataset& d) {
  return m.task == Task::classification ? d.class_names.size() : d.n_parts;
}

void check_compatible(const ModelConfig& m, const data::Dataset& d) {
  const auto want = expected_outputs(m, d);
  if (want != m.n_outputs) {
    throw ConfigError("model " + m.name + " has " + std::to_string(m.n_outputs) + " outputs, dataset needs " +
                      std::to_string(want));
  }
}

int argmax_row(const float* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (row[i] > row[best]) best = i;
  return static_cast<int>(best);
}

template <class V>
void shuffle(V& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.index(i));
    std::swap(v[i - 1], v[j]);
  }
}

// Independent stream per sample index.
Rng stream(std::uint64_t seed, std::size_t index) {
  Rng base(seed);
  return base.split(index);
}

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

}  // namespace

TrainResult fit(Model<float>& model, const TrainConfig& cfg, const data::Dataset& train_set,
                const data::Dataset* validation, std::ostream* log) {
  validate(cfg);
  if (train_set.clouds.size() < 2) throw DataError("train: needs at least 2 training clouds");
  check_compatible(model.config(), train_set);
  if (validation != nullptr) check_compatible(model.config(), *validation);
  const bool segmentation = model.config().task == Task::part_segmentation;

  const auto start = Clock::now();
  Rng root(cfg.seed);
  Rng data_rng = root.split(1);
  Rng net_rng = root.split(2);

  const auto named = model.parameters();
  std::vector<Var<float>> params;
  for (const auto& p : named) params.push_back(p.var);
  Adam<float> opt(params, AdamOptions{cfg.lr, cfg.weight_decay});

  TrainResult result;
  bool have_best = false;
  std::vector<std::size_t> order(train_set.clouds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    EpochLog entry;
    entry.epoch = epoch + 1;
    entry.lr = learning_rate(cfg, epoch);
    opt.set_lr(entry.lr);
    shuffle(order, data_rng);

    std::vector<std::pair<std::size_t, std::size_t>> batches;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      batches.emplace_back(b, std::min(order.size(), b + cfg.batch_size));
    }
    // Batch norm needs two rows: fold a trailing single sample into the
    // previous batch.
    if (batches.size() > 1 && batches.back().second - batches.back().first == 1) {
      batches.pop_back();
      batches.back().second = order.size();
    }

    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      std::vector<PointSet> clouds;
      std::vector<int> targets;
      for (std::size_t k = batches[bi].first; k < batches[bi].second; ++k) {
        data::PointCloud c = train_set.clouds[order[k]];
        if (c.size() < cfg.points) {
          throw DataError("train: cloud " + std::to_string(order[k]) + " has " + std::to_string(c.size()) +
                          " points, config needs " + std::to_string(cfg.points));
        }
        if (c.size() > cfg.points) c = data::sample_points(c, cfg.points, data::SamplePolicy::uniform, &data_rng);
        if (cfg.augment) c = data::augment(c, data_rng);
        if (segmentation) {
          if (c.part_labels.size() != c.size()) throw DataError("train: segmentation cloud without part labels");
          targets.insert(targets.end(), c.part_labels.begin(), c.part_labels.end());
        } else {
          targets.push_back(c.label);
        }
        clouds.push_back(std::move(c.points));
      }
      nn::RunMode mode;
      mode.training = true;
      mode.fps_start = pointops::StartPolicy::random;
      mode.rng = &net_rng;
      opt.zero_grad();
      Var<float> loss;
      Tensor<float> logits;
      try {
        auto res = model.forward(clouds, mode);
        loss = softmax_cross_entropy(res.logits, std::span<const int>(targets));
        logits = res.logits.value();
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(bi + 1) + ": " +
                           e.what());
      }
      backward(loss);
      opt.step();
      const std::size_t rows = logits.rows(), cols = logits.cols();
      loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r)
        if (argmax_row(logits.data().data() + r * cols, cols) == targets[r]) ++correct;
      seen += rows;
    }
    entry.loss = loss_sum / static_cast<double>(seen);
    entry.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);

    const bool last = epoch + 1 == cfg.epochs;
    if (validation != nullptr && cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last)) {
      EvalOptions eo;
      eo.points = cfg.points;
      const auto report = evaluate(model, *validation, eo);
      entry.validation = segmentation ? report.miou : report.overall_accuracy;
      if (!have_best || entry.validation > result.best_metric) {
        have_best = true;
        result.best_metric = entry.validation;
        result.best_epoch = epoch + 1;
        result.best_checkpoint = capture(model, &opt, epoch + 1);
      }
    }
    entry.seconds = since(epoch_start);
    result.log.push_back(entry);
    if (log != nullptr) {
      *log << "epoch " << entry.epoch << " lr " << entry.lr << " loss " << entry.loss << " train_acc "
           << entry.train_accuracy;
      if (entry.validation >= 0.0) *log << (segmentation ? " val_miou " : " val_oa ") << entry.validation;
      *log << " (" << entry.seconds << " s)\n" << std::flush;
    }
  }
  result.final_checkpoint = capture(model, &opt, cfg.epochs);
  if (!have_best) {
    result.best_checkpoint = result.final_checkpoint;
    result.best_epoch = cfg.epochs;
  }
  result.seconds = since(start);
  return result;
}

TrainResult train(const TrainConfig& config, const data::Dataset& train_set, const data::Dataset* validation,
                  std::ostream* log) {
  Model<float> model(config.model, config.seed);
  return fit(model, config, train_set, validation, log);
}

// ---------------------------------------------------------------------------
// Evaluation

nlohmann::json to_json(const EvalOptions& o) {
  return {{"voting", o.voting},
          {"augment_votes", o.augment_votes},
          {"points", o.points},
          {"noise", o.noise},
          {"seed", o.seed},
          {"batch_size", o.batch_size}};
}

EvalOptions eval_options_from_json(const nlohmann::json& j) {
  try {
    EvalOptions o;
    o.voting = j.value("voting", o.voting);
    o.augment_votes = j.value("augment_votes", o.augment_votes);
    o.points = j.value("points", o.points);
    o.noise = j.value("noise", o.noise);
    o.seed = j.value("seed", o.seed);
    o.batch_size = j.value("batch_size", o.batch_size);
    return o;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("eval options: ") + e.what());
  }
}

Tensor<float> predict(Model<float>& model, const std::vector<PointSet>& clouds) {
  NoGradGuard guard;
  nn::RunMode mode;
  mode.training = false;
  mode.fps_start = pointops::StartPolicy::lexicographic;
  return model.forward(clouds, mode).logits.value();
}

MetricsReport evaluate(Model<float>& model, const data::Dataset& d, const EvalOptions& o) {
  if (o.voting == 0) throw ConfigError("evaluate: voting must be >= 1");
  if (o.batch_size == 0) throw ConfigError("evaluate: batch_size must be >= 1");
  check_compatible(model.config(), d);
  const bool segmentation = model.config().task == Task::part_segmentation;
  const std::size_t n_out = model.config().n_outputs;

  MetricsReport report;
  report.segmentation = segmentation;
  report.samples = d.clouds.size();
  report.confusion = ConfusionMatrix(n_out);
  IoUAccumulator iou(segmentation ? n_out : 0);

  std::size_t begin = 0;
  while (begin < d.clouds.size()) {
    // Prepare one batch of equally sized clouds.
    std::vector<data::PointCloud> batch;
    std::vector<Rng> rngs;
    for (std::size_t i = begin; i < d.clouds.size() && batch.size() < o.batch_size; ++i) {
      data::PointCloud c = d.clouds[i];
      if (o.points > 0 && c.size() > o.points) c = data::sample_points(c, o.points, data::SamplePolicy::fps);
      Rng rng = stream(o.seed, i);
      if (o.noise > 0) c = data::inject_noise(c, o.noise, rng);
      if (!batch.empty() && c.size() != batch.front().size()) break;
      batch.push_back(std::move(c));
      rngs.push_back(rng);
    }
    const std::size_t rows_per = segmentation ? batch.front().size() : 1;
    std::vector<double> probs(batch.size() * rows_per * n_out, 0.0);
    for (std::size_t v = 0; v < o.voting; ++v) {
      std::vector<PointSet> clouds;
      for (std::size_t k = 0; k < batch.size(); ++k) {
        if (v > 0 && o.augment_votes) {
          clouds.push_back(data::augment(batch[k], rngs[k]).points);
        } else {
          clouds.push_back(batch[k].points);
        }
      }
      const auto p = softmax_rows(predict(model, clouds));
      for (std::size_t i = 0; i < probs.size(); ++i) probs[i] += static_cast<double>(p[i]);
    }
    for (auto& p : probs) p /= static_cast<double>(o.voting);

    for (std::size_t k = 0; k < batch.size(); ++k) {
      std::vector<int> preds(rows_per);
      for (std::size_t r = 0; r < rows_per; ++r) {
        const double* row = probs.data() + (k * rows_per + r) * n_out;
        preds[r] = static_cast<int>(std::max_element(row, row + n_out) - row);
      }
      if (segmentation) {
        const auto& truth = batch[k].part_labels;
        if (truth.size() != rows_per) throw DataError("evaluate: segmentation cloud without part labels");
        for (std::size_t r = 0; r < rows_per; ++r) report.confusion.add(truth[r], preds[r]);
        iou.add(preds, truth);
      } else {
        report.confusion.add(batch[k].label, preds[0]);
      }
      report.predictions.insert(report.predictions.end(), preds.begin(), preds.end());
    }
    report.probabilities.insert(report.probabilities.end(), probs.begin(), probs.end());
    begin += batch.size();
  }
  report.overall_accuracy = overall_accuracy(report.confusion);
  report.mean_class_accuracy = mean_class_accuracy(report.confusion);
  report.per_class_accuracy = class_recall(report.confusion);
  if (segmentation) {
    report.miou = iou.miou();
    report.per_part_iou = iou.per_part();
  }
  return report;
}

// ---------------------------------------------------------------------------
// Benchmark

BenchResult bench(Model<float>& model, const BenchOptions& o) {
  if (o.batch_size == 0 || o.iterations == 0) throw ConfigError("bench: batch_size and iterations must be >= 1");
  Rng rng(o.seed);
  std::vector<PointSet> clouds;
  for (std::size_t b = 0; b < o.batch_size; ++b) {
    clouds.push_back(data::synth_shape(static_cast<data::Primitive>(b % 4), o.points, rng).points);
  }
  for (std::size_t i = 0; i < o.warmup; ++i) predict(model, clouds);
  BenchResult r;
  memory::reset_peak();
  for (std::size_t i = 0; i < o.iterations; ++i) {
    const auto t = Clock::now();
    predict(model, clouds);
    r.batch_ms.push_back(since(t) * 1e3);
  }
  r.peak_bytes = memory::stats().peak_bytes;
  auto sorted = r.batch_ms;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  r.ms_per_batch = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  r.ms_per_sample = r.ms_per_batch / static_cast<double>(o.batch_size);
  return r;
}

}  // namespace marnet
