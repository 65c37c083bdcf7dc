#include "marnet/model.hpp"

#include <algorithm>
#include <map>
#include <string>
#include <utility>

namespace marnet {

using nn::LayerKind;
using nn::LayerSpec;
using nn::LevelState;
using nn::Stage;

const char* to_string(Task task) {
  return task == Task::classification ? "classification" : "part_segmentation";
}

namespace {

LayerSpec make_sa(std::string name, std::size_t in, std::vector<double> radii, std::vector<std::size_t> samples,
                  std::vector<std::vector<std::size_t>> mlp, std::size_t groups, std::size_t out_points) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = LayerKind::set_abstraction;
  s.in_channels = {in};
  s.radii = std::move(radii);
  s.samples = std::move(samples);
  s.mlp = std::move(mlp);
  s.n_groups = groups;
  s.out_points = s.radii.empty() ? 1 : out_points;
  return s;
}

LayerSpec make_stage(std::string name, LayerKind kind, std::vector<std::size_t> in, std::vector<std::size_t> widths,
                     std::size_t groups) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = kind;
  s.in_channels = std::move(in);
  s.mlp = {std::move(widths)};
  s.n_groups = groups;
  return s;
}

LayerSpec make_fre(std::string name, std::vector<std::size_t> in, std::size_t width, std::size_t groups,
                   double radius, std::size_t samples) {
  LayerSpec s = make_stage(std::move(name), LayerKind::re_encode, std::move(in), {width, width}, groups);
  if (radius > 0.0) {
    s.radii = {radius};
    s.samples = {samples};
  }
  return s;
}

LayerSpec make_fc(std::string name, std::size_t in, std::size_t out, double dropout, bool final) {
  LayerSpec s = make_stage(std::move(name), LayerKind::fully_connected, {in}, {out}, 1);
  s.dropout = dropout;
  s.final = final;
  return s;
}

std::vector<LayerSpec> classifier_head(std::size_t in, std::size_t n_classes) {
  return {make_fc("fc1", in, 512, 0.4, false), make_fc("fc2", 512, 256, 0.5, false),
          make_fc("fc3", 256, n_classes, 0.0, true)};
}

[[noreturn]] void chain_error(const LayerSpec& spec, const std::string& what) {
  throw ConfigError("layer " + spec.name + ": " + what);
}

void expect_inputs(const LayerSpec& spec, const std::vector<std::size_t>& expected) {
  if (spec.in_channels != expected) {
    std::string want, got;
    for (auto c : expected) want += (want.empty() ? "" : "+") + std::to_string(c);
    for (auto c : spec.in_channels) got += (got.empty() ? "" : "+") + std::to_string(c);
    chain_error(spec, "input channels " + got + " do not match the wiring " + want);
  }
}

}  // namespace

void validate(const ModelConfig& c) {
  const std::size_t levels = c.bb.size();
  if (levels < 2) throw ConfigError("model " + c.name + ": needs at least 2 backbone levels");
  if (c.n_outputs == 0) throw ConfigError("model " + c.name + ": n_outputs must be >= 1");
  if (c.reference_points == 0) throw ConfigError("model " + c.name + ": reference_points must be >= 1");
  auto all = {&c.bb, &c.fcr, &c.fre, &c.fp, &c.head};
  for (const auto* list : all)
    for (const auto& s : *list) nn::validate(s);

  std::vector<std::size_t> bb_out;
  for (std::size_t i = 0; i < levels; ++i) {
    const auto& s = c.bb[i];
    if (s.kind != LayerKind::set_abstraction) chain_error(s, "backbone layers must be set abstractions");
    expect_inputs(s, {i == 0 ? 0 : bb_out.back()});
    if (s.global() != (i + 1 == levels)) chain_error(s, "only the last backbone level pools globally");
    bb_out.push_back(s.out_width());
  }
  // bb_out[i] is the width of backbone level i + 1.
  auto bb_width = [&](std::size_t level) { return bb_out[level - 1]; };

  std::size_t top = bb_out.back();
  std::vector<std::size_t> fcr_out, fre_out;
  if (c.backbone_only) {
    if (c.task != Task::classification) throw ConfigError("model " + c.name + ": backbone_only is classification only");
    if (!c.fcr.empty() || !c.fre.empty()) throw ConfigError("model " + c.name + ": backbone_only has no fcr/fre levels");
  } else {
    if (c.fcr.size() != levels - 1 || c.fre.size() != levels - 1) {
      throw ConfigError("model " + c.name + ": " + std::to_string(levels) + " backbone levels need " +
                        std::to_string(levels - 1) + " fcr and fre levels");
    }
    for (std::size_t j = 1; j < levels; ++j) {
      const auto& s = c.fcr[j - 1];
      if (s.kind != LayerKind::cross_reference) chain_error(s, "expected a cross-reference layer");
      if (j == 1) {
        expect_inputs(s, {bb_width(levels)});
      } else {
        expect_inputs(s, {fcr_out.back(), bb_width(levels - j + 1)});
      }
      fcr_out.push_back(s.out_width());
    }
    for (std::size_t j = 1; j < levels; ++j) {
      const auto& s = c.fre[j - 1];
      if (s.kind != LayerKind::re_encode) chain_error(s, "expected a re-encoding layer");
      if (j == 1) {
        expect_inputs(s, {fcr_out[levels - 2], bb_width(1)});
      } else {
        expect_inputs(s, {fre_out.back(), fcr_out[levels - j - 1], bb_width(j)});
      }
      if (s.global() != (j + 1 == levels)) chain_error(s, "only the last re-encoding level pools globally");
      fre_out.push_back(s.out_width());
    }
    top = fre_out.back();
  }

  if (c.task == Task::part_segmentation) {
    if (c.fp.size() != levels) {
      throw ConfigError("model " + c.name + ": segmentation needs " + std::to_string(levels) + " fp levels");
    }
    for (std::size_t j = 1; j <= levels; ++j) {
      const auto& s = c.fp[j - 1];
      if (s.kind != LayerKind::feature_propagation) chain_error(s, "expected a feature propagation layer");
      std::size_t skip = 6;
      if (j + 2 <= levels) {
        skip = fre_out[levels - 2 - j];
      } else if (j + 1 == levels) {
        skip = fcr_out[levels - 2];
      }
      expect_inputs(s, {top, skip});
      top = s.out_width();
    }
  } else if (!c.fp.empty()) {
    throw ConfigError("model " + c.name + ": classification takes no fp levels");
  }

  if (c.head.empty()) throw ConfigError("model " + c.name + ": empty head");
  for (std::size_t i = 0; i < c.head.size(); ++i) {
    const auto& s = c.head[i];
    if (s.kind != LayerKind::fully_connected) chain_error(s, "head layers must be fully connected");
    expect_inputs(s, {top});
    if (s.final != (i + 1 == c.head.size())) chain_error(s, "exactly the last head layer emits logits");
    top = s.out_width();
  }
  if (top != c.n_outputs) {
    chain_error(c.head.back(), "emits " + std::to_string(top) + " outputs, config says " + std::to_string(c.n_outputs));
  }
}

void set_groups(ModelConfig& config, std::size_t n_groups) {
  if (n_groups == 0) throw ConfigError("n_groups must be >= 1");
  config.n_groups = n_groups;
  for (auto* list : {&config.bb, &config.fcr, &config.fre})
    for (auto& s : *list) s.n_groups = n_groups;
}

ModelConfig backbone_only(ModelConfig config) {
  if (config.task != Task::classification) throw ConfigError("backbone_only: classification models only");
  config.backbone_only = true;
  config.name += "-backbone";
  config.fcr.clear();
  config.fre.clear();
  if (!config.head.empty()) config.head.front().in_channels = {config.bb.back().out_width()};
  return config;
}

// ---------------------------------------------------------------------------

namespace presets {

ModelConfig classifier(std::size_t n_classes, std::size_t n_groups) {
  return with_levels(4, n_classes, n_groups);
}

ModelConfig with_levels(std::size_t levels, std::size_t n_classes, std::size_t n_groups) {
  if (levels < 3 || levels > 6) throw ConfigError("with_levels: level count must lie in [3, 6]");
  ModelConfig c;
  c.name = levels == 4 ? "marnet" : "marnet-l" + std::to_string(levels);
  c.task = Task::classification;
  c.n_groups = n_groups;
  c.n_outputs = n_classes;

  // Set abstraction levels 1 .. levels-1, then a global level.
  const std::vector<std::vector<double>> radii = {
      {0.1, 0.2, 0.4}, {0.2, 0.4, 0.6}, {0.6, 0.8, 0.9}, {0.8, 1.0, 1.2}, {1.0, 1.2, 1.4}};
  const std::vector<std::vector<std::size_t>> samples = {
      {16, 32, 128}, {32, 64, 128}, {64, 96, 128}, {64, 96, 128}, {64, 96, 128}};
  std::vector<std::size_t> width;  // width[i]: output of level i + 1
  std::size_t in = 0, points = 512;
  for (std::size_t i = 0; i + 1 < levels; ++i) {
    const std::size_t w = std::size_t{64} << i;
    const std::size_t q = w / 4, h = w / 2;
    c.bb.push_back(make_sa("bb" + std::to_string(i + 1), in, radii[i], samples[i], {{q, q, q}, {q, q, q}, {h, h, h}},
                           n_groups, points));
    width.push_back(w);
    in = w;
    points = std::max<std::size_t>(1, points / 4);
  }
  c.bb.push_back(make_sa("bb" + std::to_string(levels), in, {}, {}, {{in}}, n_groups, 1));
  width.push_back(in);

  std::size_t running = 0;
  for (std::size_t j = 1; j < levels; ++j) {
    const std::size_t out = width.back() >> j;
    std::vector<std::size_t> ins =
        j == 1 ? std::vector<std::size_t>{width.back()} : std::vector<std::size_t>{running, width[levels - j]};
    c.fcr.push_back(make_stage("fcr" + std::to_string(j), LayerKind::cross_reference, ins, {out, out}, n_groups));
    running = out;
  }
  const std::vector<double> fre_radii = {0.4, 0.8, 1.2, 1.6};
  std::size_t fre_w = 0;
  for (std::size_t j = 1; j < levels; ++j) {
    std::vector<std::size_t> ins;
    if (j == 1) {
      ins = {c.fcr.back().out_width(), width[0]};
    } else {
      ins = {fre_w, c.fcr[levels - j - 1].out_width(), width[j - 1]};
    }
    std::size_t total = 0;
    for (auto v : ins) total += v;
    const bool global = j + 1 == levels;
    c.fre.push_back(make_fre("fre" + std::to_string(j), ins, total, n_groups, global ? 0.0 : fre_radii[j - 1], 32));
    fre_w = total;
  }
  c.head = classifier_head(fre_w, n_classes);
  return c;
}

ModelConfig lite(std::size_t n_classes) {
  const std::size_t g = 2;
  ModelConfig c;
  c.name = "marnet-lite";
  c.task = Task::classification;
  c.n_groups = g;
  c.n_outputs = n_classes;
  c.bb = {make_sa("bb1", 0, {0.2}, {32}, {{32, 32, 32}}, g, 512), make_sa("bb2", 32, {0.4}, {32}, {{64, 64, 64}}, g, 128),
          make_sa("bb3", 64, {0.8}, {32}, {{128, 128, 128}}, g, 32), make_sa("bb4", 128, {}, {}, {{256}}, g, 1)};
  c.fcr = {make_stage("fcr1", LayerKind::cross_reference, {256}, {128, 128}, g),
           make_stage("fcr2", LayerKind::cross_reference, {128, 128}, {64, 64}, g),
           make_stage("fcr3", LayerKind::cross_reference, {64, 64}, {32, 32}, g)};
  c.fre = {make_fre("fre1", {32, 32}, 64, g, 0.4, 32), make_fre("fre2", {64, 64, 64}, 192, g, 0.8, 32),
           make_fre("fre3", {192, 128, 128}, 448, g, 0.0, 0)};
  c.head = classifier_head(448, n_classes);
  return c;
}

ModelConfig part_segmenter(std::size_t n_parts, std::size_t n_groups) {
  ModelConfig c = classifier(n_parts, n_groups);
  c.name = "marnet-seg";
  c.task = Task::part_segmentation;
  c.fp = {make_stage("fp1", LayerKind::feature_propagation, {672, 288}, {256, 256}, 1),
          make_stage("fp2", LayerKind::feature_propagation, {256, 96}, {256, 128}, 1),
          make_stage("fp3", LayerKind::feature_propagation, {128, 32}, {128, 128}, 1),
          make_stage("fp4", LayerKind::feature_propagation, {128, 6}, {128, 128}, 1)};
  c.head = {make_fc("fc1", 128, 128, 0.5, false), make_fc("fc2", 128, n_parts, 0.0, true)};
  return c;
}

ModelConfig lite_segmenter(std::size_t n_parts) {
  ModelConfig c = lite(n_parts);
  c.name = "marnet-lite-seg";
  c.task = Task::part_segmentation;
  c.fp = {make_stage("fp1", LayerKind::feature_propagation, {448, 192}, {128, 128}, 1),
          make_stage("fp2", LayerKind::feature_propagation, {128, 64}, {128, 64}, 1),
          make_stage("fp3", LayerKind::feature_propagation, {64, 32}, {64, 64}, 1),
          make_stage("fp4", LayerKind::feature_propagation, {64, 6}, {64, 64}, 1)};
  c.head = {make_fc("fc1", 64, 64, 0.5, false), make_fc("fc2", 64, n_parts, 0.0, true)};
  return c;
}

}  // namespace presets

std::vector<std::size_t> level_points(const ModelConfig& config, std::size_t n) {
  if (n == 0) throw ShapeError("level_points: empty input");
  std::vector<std::size_t> counts;
  std::size_t prev = n;
  for (const auto& s : config.bb) {
    std::size_t m = 1;
    if (!s.global()) {
      m = std::max<std::size_t>(1, s.out_points * n / config.reference_points);
      m = std::min(m, prev);
    }
    counts.push_back(m);
    prev = m;
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Complexity

namespace {

struct Counter {
  std::size_t params = 0;
  std::uint64_t flops = 0;

  void mlp(std::size_t rows, std::size_t in, const std::vector<std::size_t>& widths, std::size_t n_groups) {
    std::size_t c = in;
    for (auto w : widths) {
      const std::size_t g = nn::effective_groups(c, w, n_groups);
      params += c * w / g + w + 2 * w;
      flops += 2ULL * rows * (c * w / g);
      c = w;
    }
  }
  void interpolate(std::size_t coarse, std::size_t fine, std::size_t channels) {
    const std::size_t k = std::min<std::size_t>(3, coarse);
    flops += static_cast<std::uint64_t>(fine) * coarse;
    flops += 2ULL * fine * k * channels;
  }
};

}  // namespace

ComplexityReport complexity(const ModelConfig& config, std::size_t points) {
  validate(config);
  ComplexityReport r;
  r.points = points == 0 ? config.reference_points : points;
  r.convention =
      "multiply-accumulate = 2 FLOPs for linear layers; 1 FLOP per max-pool or neighbor-search comparison "
      "and per residual/reduction addition; 2 FLOPs per interpolation weight and channel; batch norm, "
      "ReLU, sampling and grouping excluded";
  const auto counts = level_points(config, r.points);
  const std::size_t levels = config.bb.size();
  // pts[i]: points of backbone level i (0 = input).
  std::vector<std::size_t> pts = {r.points};
  pts.insert(pts.end(), counts.begin(), counts.end());

  auto push = [&](const std::string& name, const Counter& c) {
    r.layers.push_back({name, c.params, c.flops});
    r.parameters += c.params;
    r.flops += c.flops;
  };

  for (std::size_t i = 0; i < levels; ++i) {
    const auto& s = config.bb[i];
    Counter c;
    for (std::size_t b = 0; b < s.mlp.size(); ++b) {
      const std::size_t set = s.global() ? pts[i] : s.samples[b];
      const std::size_t rows = pts[i + 1] * set;
      c.mlp(rows, s.in_channels.front() + 6, s.mlp[b], s.n_groups);
      c.flops += static_cast<std::uint64_t>(rows) * s.mlp[b].back();
      if (config.residual) {
        std::size_t w = s.in_channels.front() + 6;
        for (auto v : s.mlp[b]) {
          if (v == w) c.flops += static_cast<std::uint64_t>(rows) * v;
          w = v;
        }
      }
    }
    push(s.name, c);
  }
  for (std::size_t j = 1; j <= config.fcr.size(); ++j) {
    const auto& s = config.fcr[j - 1];
    const std::size_t rows = pts[levels - j + 1];
    Counter c;
    c.mlp(rows, s.total_in(), s.mlp.front(), s.n_groups);
    if (config.residual) c.flops += static_cast<std::uint64_t>(rows) * s.total_in();
    c.interpolate(rows, pts[levels - j], s.out_width());
    push(s.name, c);
  }
  for (std::size_t j = 1; j <= config.fre.size(); ++j) {
    const auto& s = config.fre[j - 1];
    const std::size_t rows = pts[j];
    Counter c;
    c.mlp(rows, s.total_in(), s.mlp.front(), s.n_groups);
    if (config.residual) c.flops += static_cast<std::uint64_t>(rows) * s.total_in();
    const std::size_t pooled = s.global() ? rows : pts[j + 1] * s.samples.front();
    c.flops += static_cast<std::uint64_t>(pooled) * s.out_width();
    push(s.name, c);
  }
  for (std::size_t j = 1; j <= config.fp.size(); ++j) {
    const auto& s = config.fp[j - 1];
    Counter c;
    const std::size_t coarse = j == 1 ? 1 : pts[levels - j + 1];
    const std::size_t fine = pts[levels - j];
    c.interpolate(coarse, fine, s.in_channels.front());
    c.mlp(fine, s.total_in(), s.mlp.front(), 1);
    push(s.name, c);
  }
  const std::size_t head_rows = config.task == Task::classification ? 1 : r.points;
  for (const auto& s : config.head) {
    Counter c;
    const std::size_t in = s.in_channels.front(), out = s.out_width();
    c.params = in * out + out + (s.final ? 0 : 2 * out);
    c.flops = 2ULL * head_rows * in * out;
    push(s.name, c);
  }
  return r;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

const std::map<std::string, LayerKind>& kind_names() {
  static const std::map<std::string, LayerKind> names = {
      {"set_abstraction", LayerKind::set_abstraction},
      {"cross_reference", LayerKind::cross_reference},
      {"re_encode", LayerKind::re_encode},
      {"feature_propagation", LayerKind::feature_propagation},
      {"fully_connected", LayerKind::fully_connected}};
  return names;
}

nlohmann::json spec_to_json(const LayerSpec& s) {
  nlohmann::json j;
  j["name"] = s.name;
  j["kind"] = nn::to_string(s.kind);
  j["in_channels"] = s.in_channels;
  j["radii"] = s.radii;
  j["samples"] = s.samples;
  j["mlp"] = s.mlp;
  j["n_groups"] = s.n_groups;
  j["out_points"] = s.out_points;
  j["dropout"] = s.dropout;
  j["final"] = s.final;
  return j;
}

LayerSpec spec_from_json(const nlohmann::json& j) {
  LayerSpec s;
  s.name = j.at("name").get<std::string>();
  const auto kind = j.at("kind").get<std::string>();
  auto it = kind_names().find(kind);
  if (it == kind_names().end()) throw ConfigError("layer " + s.name + ": unknown kind '" + kind + "'");
  s.kind = it->second;
  s.in_channels = j.at("in_channels").get<std::vector<std::size_t>>();
  s.radii = j.value("radii", std::vector<double>{});
  s.samples = j.value("samples", std::vector<std::size_t>{});
  s.mlp = j.at("mlp").get<std::vector<std::vector<std::size_t>>>();
  s.n_groups = j.value("n_groups", std::size_t{1});
  s.out_points = j.value("out_points", std::size_t{0});
  s.dropout = j.value("dropout", 0.0);
  s.final = j.value("final", false);
  return s;
}

nlohmann::json specs_to_json(const std::vector<LayerSpec>& list) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& s : list) a.push_back(spec_to_json(s));
  return a;
}

std::vector<LayerSpec> specs_from_json(const nlohmann::json& j, const char* key) {
  std::vector<LayerSpec> out;
  if (!j.contains(key)) return out;
  for (const auto& e : j.at(key)) out.push_back(spec_from_json(e));
  return out;
}

}  // namespace

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["name"] = c.name;
  j["task"] = to_string(c.task);
  j["n_groups"] = c.n_groups;
  j["n_outputs"] = c.n_outputs;
  j["residual"] = c.residual;
  j["backbone_only"] = c.backbone_only;
  j["reference_points"] = c.reference_points;
  j["bb"] = specs_to_json(c.bb);
  j["fcr"] = specs_to_json(c.fcr);
  j["fre"] = specs_to_json(c.fre);
  j["fp"] = specs_to_json(c.fp);
  j["head"] = specs_to_json(c.head);
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.name = j.value("name", std::string("marnet"));
    const auto task = j.value("task", std::string("classification"));
    if (task == "classification") {
      c.task = Task::classification;
    } else if (task == "part_segmentation") {
      c.task = Task::part_segmentation;
    } else {
      throw ConfigError("unknown task '" + task + "'");
    }
    c.n_groups = j.value("n_groups", std::size_t{1});
    c.n_outputs = j.at("n_outputs").get<std::size_t>();
    c.residual = j.value("residual", true);
    c.backbone_only = j.value("backbone_only", false);
    c.reference_points = j.value("reference_points", std::size_t{1024});
    c.bb = specs_from_json(j, "bb");
    c.fcr = specs_from_json(j, "fcr");
    c.fre = specs_from_json(j, "fre");
    c.fp = specs_from_json(j, "fp");
    c.head = specs_from_json(j, "head");
    validate(c);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Model

template <class T>
std::vector<LevelShape> ForwardResult<T>::shapes() const {
  std::vector<LevelShape> out;
  for (const auto& l : levels) out.push_back({l.stage, l.level, l.channels(), l.points()});
  return out;
}

template <class T>
const LevelState<T>& ForwardResult<T>::find(Stage stage, int level) const {
  for (const auto& l : levels)
    if (l.stage == stage && l.level == level) return l;
  throw Error(std::string("no ") + nn::to_string(stage) + " level " + std::to_string(level) + " in this pass");
}

template <class T>
Model<T>::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  validate(config_);
  Rng rng(seed);
  const bool r = config_.residual;
  for (const auto& s : config_.bb) bb_.emplace_back(s, r, rng);
  for (const auto& s : config_.fcr) fcr_.emplace_back(s, r, rng);
  for (const auto& s : config_.fre) fre_.emplace_back(s, r, rng);
  for (const auto& s : config_.fp) fp_.emplace_back(s, rng);
  for (const auto& s : config_.head) head_.emplace_back(s, rng);
}

namespace {

template <class F>
auto guarded(const std::string& layer, F&& f) {
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError("layer " + layer + ": " + e.what());
  }
}

}  // namespace

template <class T>
ForwardResult<T> Model<T>::forward(const std::vector<PointSet>& clouds, const nn::RunMode& mode) {
  if (clouds.empty()) throw ShapeError("forward: empty batch");
  const std::size_t n = clouds.front().size();
  if (n == 0) throw ShapeError("forward: empty cloud");
  for (const auto& c : clouds) {
    if (c.size() != n) throw ShapeError("forward: clouds in a batch must have equal point counts");
  }
  const std::size_t levels = bb_.size();
  const auto counts = level_points(config_, n);

  ForwardResult<T> result;
  auto& out = result.levels;
  out.reserve(levels * 3 + fp_.size());

  LevelState<T> input;
  input.clouds = clouds;
  std::vector<std::size_t> bb_at(levels + 1);  // index into `out`, by level
  std::vector<std::vector<std::vector<std::size_t>>> centers(levels);
  const LevelState<T>* prev = &input;
  for (std::size_t i = 0; i < levels; ++i) {
    auto a = guarded(config_.bb[i].name, [&] { return bb_[i].forward(*prev, counts[i], mode); });
    centers[i] = std::move(a.centers);
    out.push_back(std::move(a.level));
    bb_at[i + 1] = out.size() - 1;
    prev = &out.back();
  }
  auto bb = [&](std::size_t level) -> const LevelState<T>& { return out[bb_at[level]]; };

  Var<T> x;
  if (config_.backbone_only) {
    x = *bb(levels).feats;
  } else {
    std::vector<std::size_t> fcr_at(levels), fre_at(levels);
    for (std::size_t j = 1; j < levels; ++j) {
      std::vector<const LevelState<T>*> sources;
      if (j == 1) {
        sources = {&bb(levels)};
      } else {
        sources = {&out[fcr_at[j - 1]], &bb(levels - j + 1)};
      }
      auto next = bb(levels - j).clouds;
      auto s = guarded(config_.fcr[j - 1].name, [&] {
        return fcr_[j - 1].forward(sources, next, static_cast<int>(levels - j), mode);
      });
      out.push_back(std::move(s));
      fcr_at[j] = out.size() - 1;
    }
    for (std::size_t j = 1; j < levels; ++j) {
      std::vector<const LevelState<T>*> sources;
      if (j == 1) {
        sources = {&out[fcr_at[levels - 1]], &bb(1)};
      } else {
        sources = {&out[fre_at[j - 1]], &out[fcr_at[levels - j]], &bb(j)};
      }
      auto s = guarded(config_.fre[j - 1].name, [&] {
        return fre_[j - 1].forward(sources, centers[j], static_cast<int>(j + 1), mode);
      });
      out.push_back(std::move(s));
      fre_at[j] = out.size() - 1;
    }
    if (config_.task == Task::part_segmentation) {
      LevelState<T> raw;
      raw.clouds = clouds;
      Tensor<T> geo(Shape{clouds.size() * n, 6});
      for (std::size_t b = 0; b < clouds.size(); ++b)
        for (std::size_t i = 0; i < n; ++i) {
          T* row = geo.data().data() + (b * n + i) * 6;
          for (int a = 0; a < 3; ++a) row[a] = static_cast<T>(clouds[b].positions[i][a]);
          for (int a = 0; a < 3; ++a) row[3 + a] = clouds[b].has_normals() ? static_cast<T>(clouds[b].normals[i][a]) : T{0};
        }
      raw.feats = constant(std::move(geo));
      std::size_t coarse = fre_at[levels - 1];
      for (std::size_t j = 1; j <= levels; ++j) {
        const LevelState<T>* skip = &raw;
        if (j + 2 <= levels) {
          skip = &out[fre_at[levels - 1 - j]];
        } else if (j + 1 == levels) {
          skip = &out[fcr_at[levels - 1]];
        }
        auto s = guarded(config_.fp[j - 1].name, [&] { return fp_[j - 1].forward(out[coarse], *skip, mode); });
        out.push_back(std::move(s));
        coarse = out.size() - 1;
      }
    }
    x = *out.back().feats;
  }
  for (std::size_t i = 0; i < head_.size(); ++i) {
    x = guarded(config_.head[i].name, [&] { return head_[i].forward(x, mode); });
    result.head_widths.push_back(x.cols());
  }
  result.logits = x;
  return result;
}

template <class T>
std::vector<nn::NamedParameter<T>> Model<T>::parameters() const {
  std::vector<nn::NamedParameter<T>> out;
  for (const auto& l : bb_) l.collect(out);
  for (const auto& l : fcr_) l.collect(out);
  for (const auto& l : fre_) l.collect(out);
  for (const auto& l : fp_) l.collect(out);
  for (const auto& l : head_) l.collect(out);
  return out;
}

template <class T>
std::vector<nn::NamedBuffer<T>> Model<T>::buffers() {
  std::vector<nn::NamedBuffer<T>> out;
  for (auto& l : bb_) l.collect_buffers(out);
  for (auto& l : fcr_) l.collect_buffers(out);
  for (auto& l : fre_) l.collect_buffers(out);
  for (auto& l : fp_) l.collect_buffers(out);
  for (auto& l : head_) l.collect_buffers(out);
  return out;
}

template <class T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.var.size();
  return n;
}

template <class T>
Var<T> forward_classify(Model<T>& model, const PointSet& cloud, const nn::RunMode& mode) {
  if (model.config().task != Task::classification) throw ConfigError("forward_classify: not a classifier");
  return model.forward({cloud}, mode).logits;
}

template <class T>
Var<T> forward_segment(Model<T>& model, const PointSet& cloud, const nn::RunMode& mode) {
  if (model.config().task != Task::part_segmentation) throw ConfigError("forward_segment: not a segmenter");
  return model.forward({cloud}, mode).logits;
}

template struct ForwardResult<float>;
template struct ForwardResult<double>;
template class Model<float>;
template class Model<double>;
template Var<float> forward_classify<float>(Model<float>&, const PointSet&, const nn::RunMode&);
template Var<double> forward_classify<double>(Model<double>&, const PointSet&, const nn::RunMode&);
template Var<float> forward_segment<float>(Model<float>&, const PointSet&, const nn::RunMode&);
template Var<double> forward_segment<double>(Model<double>&, const PointSet&, const nn::RunMode&);

}  // namespace marnet
