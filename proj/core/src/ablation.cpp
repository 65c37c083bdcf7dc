#include "marnet/ablation.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include "marnet/checkpoint.hpp"
#include "marnet/errors.hpp"

namespace marnet {

AblationSpec ablation_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("ablation spec must be an object");
  try {
    AblationSpec s;
    s.sweep = j.at("sweep").get<std::string>();
    if (j.contains("values")) {
      s.values = j.at("values");
      if (!s.values.is_array()) throw ConfigError("ablation: values must be an array");
    } else if (s.sweep == "components") {
      s.values = {"backbone", "backbone_da", "marnet_no_r", "marnet", "marnet_voting"};
    }
    s.train = train_config_from_json(j.at("train"));
    if (j.contains("data")) s.data = data_config_from_json(j.at("data"));
    if (j.contains("eval")) s.eval = eval_options_from_json(j.at("eval"));
    s.voting = j.value("voting", s.voting);
    s.train_models = j.value("train_models", s.train_models);
    s.checkpoint = j.value("checkpoint", s.checkpoint);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("ablation spec: ") + e.what());
  }
}

namespace {

const std::vector<std::string> kColumns = {"sweep",          "setting", "parameters", "mflops", "overall_accuracy",
                                           "mean_class_accuracy", "miou", "train_seconds"};

using Row = std::vector<nlohmann::json>;

std::string csv_cell(const nlohmann::json& v) {
  if (v.is_null()) return "";
  if (!v.is_string()) return v.dump();
  const auto s = v.get<std::string>();
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

std::vector<std::size_t> size_values(const AblationSpec& s) {
  std::vector<std::size_t> out;
  for (const auto& v : s.values) {
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
      throw ConfigError("ablation: sweep '" + s.sweep + "' takes non-negative integers, got " + v.dump());
    }
    out.push_back(v.get<std::size_t>());
  }
  return out;
}

Row make_row(const AblationSpec& s, const nlohmann::json& setting, const ModelConfig& model) {
  const auto c = complexity(model, s.train.points);
  return {s.sweep, setting, c.parameters, static_cast<double>(c.flops) / 1e6, nullptr, nullptr, nullptr, nullptr};
}

void fill_metrics(Row& row, const MetricsReport& r, const ModelConfig& model) {
  row[4] = r.overall_accuracy;
  row[5] = r.mean_class_accuracy;
  if (model.task == Task::part_segmentation) row[6] = r.miou;
}

struct Context {
  const AblationSpec& spec;
  std::ostream* log;
  data::Dataset train_set;
  data::Dataset test_set;

  EvalOptions eval() const {
    auto e = spec.eval;
    if (e.points == 0) e.points = spec.train.points;
    return e;
  }

  TrainResult fit(Model<float>& model, const TrainConfig& cfg) const {
    return marnet::fit(model, cfg, train_set, nullptr, log);
  }
};

void note(std::ostream* log, const std::string& line) {
  if (log != nullptr) *log << line << '\n' << std::flush;
}

void components(Context& ctx, AblationTable& t) {
  const auto& s = ctx.spec;
  static const std::set<std::string> known = {"backbone", "backbone_da", "marnet_no_r", "marnet", "marnet_voting"};
  std::vector<std::string> variants;
  for (const auto& v : s.values) {
    if (!v.is_string() || known.count(v.get<std::string>()) == 0) {
      throw ConfigError("ablation: unknown component toggle " + v.dump());
    }
    variants.push_back(v.get<std::string>());
  }
  // The voting row reuses the full model when it is also in the sweep.
  std::optional<Model<float>> full;
  double full_seconds = 0.0;
  for (const auto& name : variants) {
    TrainConfig cfg = s.train;
    if (name == "backbone" || name == "backbone_da") {
      cfg.model = backbone_only(cfg.model);
      cfg.augment = name == "backbone_da";
    } else if (name == "marnet_no_r") {
      cfg.model.residual = false;
    }
    auto eval = ctx.eval();
    Row row = make_row(s, name, cfg.model);
    note(ctx.log, "ablation components: " + name);
    const bool shares = name == "marnet" || name == "marnet_voting";
    if (shares && full) {
      row[7] = full_seconds;
    } else {
      Model<float> model(cfg.model, cfg.seed);
      const auto r = ctx.fit(model, cfg);
      row[7] = r.seconds;
      if (shares) {
        full.emplace(std::move(model));
        full_seconds = r.seconds;
      } else {
        fill_metrics(row, evaluate(model, ctx.test_set, eval), cfg.model);
        t.rows.push_back(row);
        continue;
      }
    }
    if (name == "marnet_voting") eval.voting = s.voting;
    fill_metrics(row, evaluate(*full, ctx.test_set, eval), cfg.model);
    t.rows.push_back(row);
  }
}

Model<float> trained_model(Context& ctx, double& seconds) {
  const auto& s = ctx.spec;
  if (!s.checkpoint.empty()) {
    seconds = 0.0;
    return load_model<float>(load_checkpoint(s.checkpoint));
  }
  Model<float> model(s.train.model, s.train.seed);
  seconds = ctx.fit(model, s.train).seconds;
  return model;
}

void points_or_noise(Context& ctx, AblationTable& t) {
  const auto& s = ctx.spec;
  const auto values = size_values(s);
  if (values.empty()) return;
  double seconds = 0.0;
  auto model = trained_model(ctx, seconds);
  for (auto v : values) {
    auto eval = ctx.eval();
    if (s.sweep == "points") {
      eval.points = v;
    } else {
      eval.noise = v;
    }
    note(ctx.log, "ablation " + s.sweep + ": " + std::to_string(v));
    const auto c = complexity(model.config(), eval.points);
    Row row = {s.sweep, v, c.parameters, static_cast<double>(c.flops) / 1e6, nullptr, nullptr, nullptr, seconds};
    fill_metrics(row, evaluate(model, ctx.test_set, eval), model.config());
    t.rows.push_back(row);
  }
}

void groups(Context& ctx, AblationTable& t) {
  const auto& s = ctx.spec;
  for (auto g : size_values(s)) {
    if (g == 0) throw ConfigError("ablation: group count must be >= 1");
    TrainConfig cfg = s.train;
    set_groups(cfg.model, g);
    Row row = make_row(s, g, cfg.model);
    if (s.train_models) {
      note(ctx.log, "ablation groups: " + std::to_string(g));
      Model<float> model(cfg.model, cfg.seed);
      row[7] = ctx.fit(model, cfg).seconds;
      fill_metrics(row, evaluate(model, ctx.test_set, ctx.eval()), cfg.model);
    }
    t.rows.push_back(row);
  }
}

void levels(const AblationSpec& s, AblationTable& t) {
  for (auto l : size_values(s)) {
    const auto groups = s.train.model.bb.empty() ? std::size_t{2} : s.train.model.bb.front().n_groups;
    t.rows.push_back(make_row(s, l, presets::with_levels(l, s.train.model.n_outputs, groups)));
  }
}

}  // namespace

std::string to_csv(const AblationTable& t) {
  std::ostringstream out;
  for (std::size_t i = 0; i < t.columns.size(); ++i) out << (i ? "," : "") << csv_cell(t.columns[i]);
  out << '\n';
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << csv_cell(row[i]);
    out << '\n';
  }
  return out.str();
}

nlohmann::json to_json(const AblationTable& t) {
  auto rows = nlohmann::json::array();
  for (const auto& row : t.rows) {
    nlohmann::json r;
    for (std::size_t i = 0; i < t.columns.size(); ++i) r[t.columns[i]] = row[i];
    rows.push_back(r);
  }
  return {{"columns", t.columns}, {"rows", rows}};
}

AblationTable ablate(const AblationSpec& s, std::ostream* log) {
  static const std::set<std::string> sweeps = {"components", "points", "noise", "groups", "levels"};
  if (sweeps.count(s.sweep) == 0) throw ConfigError("ablation: unknown sweep '" + s.sweep + "'");
  AblationTable t;
  t.columns = kColumns;
  if (s.values.empty()) return t;
  if (s.sweep == "levels") {
    levels(s, t);
    return t;
  }
  if (s.sweep == "groups" && !s.train_models) {
    Context ctx{s, log, {}, {}};
    groups(ctx, t);
    return t;
  }
  DataConfig dc = s.data;
  if (s.sweep == "points") {
    // Test clouds must hold the largest requested input.
    const auto values = size_values(s);
    const auto largest = *std::max_element(values.begin(), values.end());
    const auto stored = dc.test_points == 0 ? dc.points : dc.test_points;
    if (dc.kind != "manifest" && stored < largest) dc.test_points = largest;
  }
  auto [train_set, test_set] = load_data(dc);
  Context ctx{s, log, std::move(train_set), std::move(test_set)};
  if (s.sweep == "components") {
    components(ctx, t);
  } else if (s.sweep == "groups") {
    groups(ctx, t);
  } else {
    points_or_noise(ctx, t);
  }
  return t;
}

void write_results(const AblationTable& t, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "results.csv");
  csv << to_csv(t);
  std::ofstream js(dir / "results.json");
  js << to_json(t).dump(2) << '\n';
  if (!csv || !js) throw Error("ablation: cannot write results into " + dir.string());
}

}  // namespace marnet
