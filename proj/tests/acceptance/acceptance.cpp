// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit status on
// any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "../common/csv.hpp"
#include "../common/fixtures.hpp"
#include "../common/model_checks.hpp"
#include "../common/oracles.hpp"
#include "marnet/ablation.hpp"
#include "marnet/checkpoint.hpp"
#include "marnet/metrics.hpp"
#include "marnet/model_check.hpp"
#include "marnet/train.hpp"

namespace fs = std::filesystem;
using namespace marnet;

namespace {

// Collects failed expectations; a criterion passes when none were recorded.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) failures_.push_back(what);
  }
  void expect_empty(const std::string& problem, const std::string& what) {
    if (!problem.empty()) failures_.push_back(what + ": " + problem);
  }
  void note(const std::string& s) { notes_.push_back(s); }
  bool ok() const { return failures_.empty(); }
  std::string summary() const {
    std::string out;
    for (const auto& f : failures_) out += (out.empty() ? "" : "; ") + f;
    if (!out.empty()) return out;
    for (const auto& n : notes_) out += (out.empty() ? "" : ", ") + n;
    return out;
  }

 private:
  std::vector<std::string> failures_;
  std::vector<std::string> notes_;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream out;
  out.precision(digits);
  out << v;
  return out.str();
}

bool within(double value, double target, double band) { return std::abs(value - target) <= band * target; }

fs::path work_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "marnet_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// ---------------------------------------------------------------------------
// 1. shapes

void shapes(Check& c) {
  c.expect_empty(check::check_shapes(presets::classifier(40), check::classifier_shapes(), {512, 256, 40}),
                 "classifier");
  c.expect_empty(check::check_shapes(presets::lite(40), check::lite_shapes(), {512, 256, 40}), "lite");
  c.expect_empty(check::check_shapes(presets::part_segmenter(4), check::part_segmenter_shapes(), {128, 4}),
                 "part segmenter");
  c.note("3 configs, " + std::to_string(check::part_segmenter_shapes().size()) + " segmenter stages");
}

// ---------------------------------------------------------------------------
// 2. complexity

void complexity_counts(Check& c) {
  const auto full = complexity(presets::classifier(40));
  const auto lite = complexity(presets::lite(40));
  c.expect(within(full.parameters, 1.13e6, 0.10), "classifier parameters " + std::to_string(full.parameters));
  c.expect(within(lite.parameters, 0.68e6, 0.10), "lite parameters " + std::to_string(lite.parameters));
  const std::vector<std::pair<std::size_t, double>> by_groups = {{1, 1.85e6}, {2, 1.13e6}, {4, 0.84e6}, {8, 0.67e6}};
  std::size_t prev = SIZE_MAX;
  std::string counts;
  for (const auto& [g, target] : by_groups) {
    const auto p = complexity(presets::classifier(40, g)).parameters;
    c.expect(within(p, target, 0.10), "groups " + std::to_string(g) + " parameters " + std::to_string(p));
    c.expect(p < prev, "parameters not decreasing at groups " + std::to_string(g));
    prev = p;
    counts += (counts.empty() ? "" : "/") + fmt(p / 1e6, 3);
  }
  const double mflops = static_cast<double>(full.flops) / 1e6;
  c.expect(within(mflops, 1040.0, 0.35), "classifier MFLOPs " + fmt(mflops));
  c.expect(lite.flops < full.flops, "lite FLOPs not below classifier");
  c.note("params " + fmt(full.parameters / 1e6, 3) + "M/" + fmt(lite.parameters / 1e6, 3) + "M, groups " + counts +
         "M, " + fmt(mflops) + " MFLOPs");
}

// ---------------------------------------------------------------------------
// 3. gradient suite

void gradients(Check& c) {
  double worst = 0.0;
  const auto layers = fixture::layer_gradient_checks(1);
  for (const auto& l : layers) {
    c.expect(l.report.pass && l.report.max_rel_err < 1e-5,
             l.name + " rel err " + fmt(l.report.max_rel_err) + (l.report.failure.empty() ? "" : " (" + l.report.failure + ")"));
    worst = std::max(worst, l.report.max_rel_err);
  }
  for (const auto& cfg : {presets::classifier(4), presets::part_segmenter(3)}) {
    const auto r = check_model_gradients(cfg);
    c.expect(r.pass && r.max_rel_err < 1e-5, cfg.name + " rel err " + fmt(r.max_rel_err));
    c.expect(r.checked > r.zeros + r.kinks, cfg.name + " checked too few elements");
    worst = std::max(worst, r.max_rel_err);
  }
  c.note(std::to_string(layers.size()) + " layer checks + 2 models, max rel err " + fmt(worst, 3));
}

// ---------------------------------------------------------------------------
// 4. gradient flow

void gradient_flow(Check& c) {
  c.expect_empty(check::check_gradient_flow(presets::classifier(40)), "classifier");
  c.note("non-zero gradient at the first backbone level");
}

// ---------------------------------------------------------------------------
// 5. geometric oracles

void geometry(Check& c) {
  Rng rng(5);
  std::size_t fps_sets = 0, queries = 0;
  for (std::size_t n = 1; n <= 64; ++n) {
    const auto pts = fixture::cloud(n, rng);
    const auto idx = pointops::farthest_point_sample(pts, n);
    c.expect_empty(oracle::check_fps(pts, idx, oracle::lexicographic_min(pts)), "fps n=" + std::to_string(n));
    ++fps_sets;
  }
  for (std::size_t n : {1u, 7u, 64u, 200u, 512u}) {
    const auto src = fixture::cloud(n, rng);
    const auto centers = fixture::cloud(32, rng);
    for (double r : {0.05, 0.2, 0.4, 0.8}) {
      for (std::size_t s : {1u, 16u, 32u}) {
        const auto groups = pointops::ball_query(src, centers, r, s);
        for (std::size_t q = 0; q < centers.size(); ++q) {
          c.expect(groups[q].members == oracle::ball_query(src, centers.positions[q], r, s),
                   "ball query n=" + std::to_string(n));
          ++queries;
        }
      }
    }
    for (std::size_t k : {1u, 3u, 16u}) {
      if (k > n) continue;
      const auto r = pointops::knn(src, centers, k);
      for (std::size_t q = 0; q < centers.size(); ++q) {
        const auto expect = oracle::knn(src, centers.positions[q], k);
        for (std::size_t j = 0; j < k; ++j) {
          c.expect(r.indices[q * k + j] == expect[j].second && r.distances[q * k + j] == expect[j].first,
                   "knn n=" + std::to_string(n));
        }
        ++queries;
      }
    }
    const auto feats = fixture::uniform<double>({n, 6}, rng);
    const auto y = pointops::three_nn_interpolate(src, constant(feats), centers).value();
    const auto expect =
        oracle::interpolate(src, std::vector<double>(feats.data().begin(), feats.data().end()), 6, centers);
    double err = 0.0;
    for (std::size_t i = 0; i < expect.size(); ++i) err = std::max(err, std::abs(y[i] - expect[i]));
    c.expect(err < 1e-12, "interpolation n=" + std::to_string(n) + " error " + fmt(err));
  }
  c.note(std::to_string(fps_sets) + " fps sets, " + std::to_string(queries) + " neighbour queries");
}

// ---------------------------------------------------------------------------
// 6. reduction

void reduction(Check& c) {
  Tensor<double> x({1, 4});
  for (std::size_t i = 0; i < 4; ++i) x[i] = static_cast<double>(i + 1);
  const auto y = nn::reduction(constant(x), 2).value();
  c.expect(y.shape() == Shape{1, 2} && y[0] == 3.0 && y[1] == 7.0, "[1,2,3,4] with k=2");

  Rng rng(6);
  const auto a = fixture::uniform<double>({5, 12}, rng), b = fixture::uniform<double>({5, 12}, rng);
  Tensor<double> mix({5, 12});
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 2.5 * a[i] - 0.75 * b[i];
  const auto ra = nn::reduction(constant(a), 3).value(), rb = nn::reduction(constant(b), 3).value();
  const auto rm = nn::reduction(constant(mix), 3).value();
  double lin = 0.0;
  for (std::size_t i = 0; i < rm.size(); ++i) lin = std::max(lin, std::abs(rm[i] - (2.5 * ra[i] - 0.75 * rb[i])));
  c.expect(lin < 1e-14, "linearity error " + fmt(lin));

  auto in = parameter(a);
  auto out = nn::reduction(in, 3);
  const auto w = fixture::uniform<double>(out.shape(), rng);
  backward(dot(out, w));
  bool copies = true;
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t col = 0; col < 12; ++col) copies &= in.grad()[r * 12 + col] == w[r * 4 + col / 3];
  c.expect(copies, "backward is not a bucket copy");

  const auto id = nn::reduction(constant(a), 1).value();
  bool same = true;
  for (std::size_t i = 0; i < a.size(); ++i) same &= id[i] == a[i];
  c.expect(same, "k=1 is not the identity");
  c.note("linearity error " + fmt(lin, 2));
}

// ---------------------------------------------------------------------------
// 7. permutation invariance

void permutation(Check& c) {
  const double d = check::permutation_delta(presets::classifier(40));
  c.expect(d < 1e-4, "max logit change " + fmt(d));
  c.note("max logit change " + fmt(d, 3));
}

// ---------------------------------------------------------------------------
// 8. desk-scale training

DataConfig synthetic(const std::string& kind) {
  DataConfig d;
  d.kind = kind;
  d.train_size = 200;
  d.test_size = 80;
  d.points = 256;
  d.seed = 1;
  return d;
}

TrainConfig desk_training(ModelConfig model, std::size_t epochs) {
  TrainConfig t;
  t.model = std::move(model);
  t.epochs = epochs;
  t.points = 256;
  t.seed = 1;
  return t;
}

fs::path lite_checkpoint() { return work_dir() / "lite_shapes.ckpt"; }

void end_to_end(Check& c) {
  using Clock = std::chrono::steady_clock;
  {
    const auto [train_set, test_set] = load_data(synthetic("shapes"));
    const auto cfg = desk_training(presets::lite(4), 40);
    const auto start = Clock::now();
    const auto r = train(cfg, train_set, &test_set);
    const double s = std::chrono::duration<double>(Clock::now() - start).count();
    save_checkpoint(lite_checkpoint(), r.best_checkpoint);
    c.expect(r.best_metric >= 0.95, "lite test OA " + fmt(r.best_metric));
    c.expect(s < 900.0, "lite training took " + fmt(s) + " s");
    c.note("lite OA " + fmt(r.best_metric, 3) + " at epoch " + std::to_string(r.best_epoch) + " (final " +
           fmt(r.log.back().validation, 3) + ", " + fmt(s, 3) + " s)");
  }
  {
    const auto [train_set, test_set] = load_data(synthetic("hemisphere"));
    const auto cfg = desk_training(presets::lite_segmenter(2), 20);
    const auto start = Clock::now();
    const auto r = train(cfg, train_set, &test_set);
    const double s = std::chrono::duration<double>(Clock::now() - start).count();
    c.expect(r.best_metric >= 0.85, "segmenter mIoU " + fmt(r.best_metric));
    c.expect(s < 900.0, "segmenter training took " + fmt(s) + " s");
    c.note("segmenter mIoU " + fmt(r.best_metric, 3) + " at epoch " + std::to_string(r.best_epoch) + " (final " +
           fmt(r.log.back().validation, 3) + ", " + fmt(s, 3) + " s)");
  }
}

// ---------------------------------------------------------------------------
// 9. ablation harness

AblationSpec sweep(const std::string& name, nlohmann::json values) {
  AblationSpec s;
  s.sweep = name;
  s.values = std::move(values);
  s.train = desk_training(presets::lite(4), 5);
  s.data = synthetic("shapes");
  s.voting = 10;
  return s;
}

void check_table(Check& c, const AblationTable& t, std::size_t rows, const std::string& name) {
  c.expect(t.rows.size() == rows, name + " has " + std::to_string(t.rows.size()) + " rows");
  c.expect_empty(csv::check_well_formed(to_csv(t), rows), name);
  const auto oa = static_cast<std::size_t>(std::find(t.columns.begin(), t.columns.end(), "overall_accuracy") -
                                           t.columns.begin());
  for (const auto& row : t.rows) {
    c.expect(oa < row.size() && row[oa].is_number() && row[oa].get<double>() >= 0.0 && row[oa].get<double>() <= 1.0,
             name + " row without an accuracy");
  }
  write_results(t, work_dir() / name);
}

void ablation(Check& c) {
  const auto components = ablate(sweep("components", {"backbone", "backbone_da", "marnet_no_r", "marnet", "marnet_voting"}));
  check_table(c, components, 5, "components");

  if (!fs::exists(lite_checkpoint())) {
    c.expect(false, "no trained checkpoint from the end-to-end run");
    return;
  }
  auto points = sweep("points", {64, 128, 256, 512, 1024});
  points.checkpoint = lite_checkpoint().string();
  check_table(c, ablate(points), 5, "points");

  auto noise = sweep("noise", {0, 1, 10, 50, 100});
  noise.checkpoint = lite_checkpoint().string();
  const auto table = ablate(noise);
  check_table(c, table, 5, "noise");

  auto model = load_model<float>(load_checkpoint(lite_checkpoint()));
  EvalOptions plain;
  plain.points = noise.train.points;
  const auto [train_set, test_set] = load_data(noise.data);
  const auto r = evaluate(model, test_set, plain);
  c.expect(table.rows.size() == 5 && table.rows[0][4].get<double>() == r.overall_accuracy &&
               table.rows[0][5].get<double>() == r.mean_class_accuracy,
           "noise 0 row differs from plain evaluation");
  c.note("noise 0 OA " + fmt(r.overall_accuracy, 3) + ", noise 100 OA " + fmt(table.rows.back()[4].get<double>(), 3));
}

// ---------------------------------------------------------------------------
// 10. metrics

void metrics(Check& c) {
  ConfusionMatrix m(2);
  for (auto [t, p] : std::vector<std::pair<int, int>>{{0, 0}, {0, 0}, {1, 1}, {1, 0}}) m.add(t, p);
  c.expect(overall_accuracy(m) == 0.75, "OA");
  c.expect(mean_class_accuracy(m) == 0.75, "mcA");
  const std::vector<int> truth = {0, 0, 0, 0, 1, 1, 1, 1, 1};
  const std::vector<int> pred = {0, 0, 0, 1, 1, 1, 1, 1, 0};
  c.expect(miou(truth, truth, 2) == 1.0, "perfect mIoU");
  const std::vector<int> balanced = {0, 1, 0, 1}, complement = {1, 0, 1, 0};
  c.expect(miou(complement, balanced, 2) == 0.0, "complement mIoU");
  c.expect(miou(pred, truth, 2) == (0.6 + 2.0 / 3.0) / 2.0, "hand case mIoU " + fmt(miou(pred, truth, 2)));
  c.expect(miou(pred, truth, 2) == oracle::miou(pred, truth, 2), "mIoU oracle");

  auto d = data::synth_shapes(4, 64, 3);
  Model<float> model(presets::lite(4), 2);
  const auto base = evaluate(model, d);
  EvalOptions o;
  o.voting = 1;
  o.augment_votes = false;
  const auto one = evaluate(model, d, o);
  c.expect(one.probabilities == base.probabilities && one.predictions == base.predictions,
           "voting 1 differs from plain evaluation");
  o.voting = 10;
  const auto ten = evaluate(model, d, o);
  c.expect(ten.predictions == base.predictions, "unaugmented voting changes predictions");
  c.note("hand cases exact, single vote bitwise");
}

// ---------------------------------------------------------------------------
// 11. persistence

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void persistence(Check& c) {
  const auto d = data::synth_shapes(4, 64, 4);
  auto cfg = desk_training(presets::lite(4), 2);
  cfg.points = 64;
  cfg.batch_size = 8;
  Model<float> model(cfg.model, cfg.seed);
  const auto first = fit(model, cfg, d);
  const auto again = train(cfg, d);
  c.expect(serialize(first.final_checkpoint) == serialize(again.final_checkpoint), "seeded training differs");

  const auto a = work_dir() / "a.ckpt", b = work_dir() / "b.ckpt";
  save_checkpoint(a, first.final_checkpoint);
  save_checkpoint(b, load_checkpoint(a));
  const auto bytes = file_bytes(a);
  c.expect(bytes == file_bytes(b), "save-load-save changes bytes");

  auto loaded = load_model<float>(load_checkpoint(b));
  std::vector<PointSet> clouds;
  for (const auto& cl : d.clouds) clouds.push_back(cl.points);
  const auto x = predict(model, clouds), y = predict(loaded, clouds);
  c.expect(x.size() == y.size() && std::memcmp(x.data().data(), y.data().data(), x.size() * sizeof(float)) == 0,
           "logits change after reload");
  c.note(std::to_string(bytes.size()) + " byte checkpoint");
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<void(Check&)> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "shape conformance", 1.0, shapes},
      {2, "complexity conformance", 1.0, complexity_counts},
      {3, "gradient suite", 300.0, gradients},
      {4, "gradient flow", 10.0, gradient_flow},
      {5, "geometric oracles", 60.0, geometry},
      {6, "reduction", 1.0, reduction},
      {7, "permutation invariance", 10.0, permutation},
      {8, "desk-scale end-to-end", 1800.0, end_to_end},
      {9, "ablation harness", 1800.0, ablation},
      {10, "metrics", 1.0, metrics},
      {11, "persistence", 60.0, persistence},
  };
  int failed = 0;
  for (const auto& cr : criteria) {
    Check check;
    const auto start = std::chrono::steady_clock::now();
    try {
      cr.run(check);
    } catch (const std::exception& e) {
      check.expect(false, std::string("exception: ") + e.what());
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    check.expect(s <= cr.budget_seconds, "took " + fmt(s) + " s, budget " + fmt(cr.budget_seconds) + " s");
    if (!check.ok()) ++failed;
    std::printf("%s %2d %-24s %9.2f s  %s\n", check.ok() ? "PASS" : "FAIL", cr.id, cr.name, s,
                check.summary().c_str());
    std::fflush(stdout);
  }
  fs::remove_all(work_dir());
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
