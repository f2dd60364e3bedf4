#include "em3rf/config.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <set>

namespace em3rf {

using nlohmann::json;

namespace {

// Reads keys out of one JSON object and remembers which ones were used.
class Section {
 public:
  Section(const json& doc, std::string path) : path_(std::move(path)) {
    if (doc.is_null()) return;
    if (!doc.is_object()) throw ConfigError(where() + "expected an object");
    doc_ = doc;
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!doc_.contains(key)) return;
    try {
      out = doc_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where() + "bad value for '" + key + "': " + doc_.at(key).dump());
    }
  }

  template <typename E, typename Parse>
  void get_enum(const std::string& key, E& out, Parse parse) {
    std::string name;
    seen_.insert(key);
    if (!doc_.contains(key)) return;
    get(key, name);
    try {
      out = parse(name);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where() + e.what());
    }
  }

  json sub(const std::string& key) {
    seen_.insert(key);
    return doc_.contains(key) ? doc_.at(key) : json();
  }

  void finish() const {
    for (const auto& [key, value] : doc_.items())
      if (!seen_.count(key)) throw ConfigError(where() + "unknown key '" + key + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "config: " : "config." + path_ + ": "; }

  json doc_ = json::object();
  std::string path_;
  std::set<std::string> seen_;
};

template <typename T>
void require(bool ok, const std::string& what, const T& value) {
  if (!ok) throw ConfigError("config: invalid " + what + " = " + json(value).dump());
}

}  // namespace

json config_to_json(const Config& c) {
  const auto& e = c.model.encoder;
  const auto& f = c.model.flow;
  const auto& t = c.train;
  return {
      {"seed", c.seed},
      {"jobs", c.jobs},
      {"workdir", c.workdir.string()},
      {"dataset",
       {{"dir", c.dataset.dir.string()},
        {"shapes", c.dataset.shapes},
        {"objects", c.dataset.objects},
        {"fragments", c.dataset.fragments},
        {"points", c.dataset.points},
        {"scale", c.dataset.scale},
        {"tau", c.dataset.tau},
        {"holdout", c.dataset.holdout}}},
      {"model",
       {{"c_geo", e.c_geo},
        {"c_rgb", e.c_rgb},
        {"geo_blocks", e.geo_blocks},
        {"rgb_blocks", e.rgb_blocks},
        {"bands", e.bands},
        {"shape_dim", e.shape_dim},
        {"gram_channels", e.gram_channels},
        {"seg_hidden", e.seg_hidden},
        {"vn_slope", e.vn_slope},
        {"backbone", backbone_name(e.backbone)},
        {"fault_layer", e.fault_layer},
        {"arch", velocity_arch_name(f.arch)},
        {"param", velocity_param_name(f.param)},
        {"pool_channels", f.pool_channels},
        {"pool_gates", f.pool_gates},
        {"vector_width", f.vector_width},
        {"hidden", f.hidden},
        {"flow_blocks", f.blocks},
        {"cross_channels", f.cross_channels}}},
      {"flow",
       {{"lambda", f.lambda},
        {"t_cap", f.t_cap},
        {"steps", t.steps},
        {"time_weight_power", t.time_weight_power},
        {"views", t.views},
        {"color_augment", t.color_augment},
        {"encoder_points", t.encoder_points},
        {"overlap_points", t.overlap_points},
        {"log_every", t.log_every}}},
      {"overlap",
       {{"alpha", t.alpha},
        {"resolution", t.overlap.resolution},
        {"margin", t.overlap.margin},
        {"sigma_cells", t.overlap.sigma_cells},
        {"eps", t.overlap.eps}}},
      {"optimizer",
       {{"lr", t.lr},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"batch", t.batch},
        {"clip", t.clip},
        {"final_lr_fraction", t.final_lr_fraction}}},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"points", c.pretrain.points},
        {"eval_points", c.pretrain.eval_points},
        {"batch", c.pretrain.batch},
        {"lr", c.pretrain.lr},
        {"clip", c.pretrain.clip},
        {"resume", c.pretrain_resume}}},
      {"inference", {{"steps", c.inference.steps}, {"mode", start_mode_name(c.inference.mode)}}},
      {"metrics",
       {{"pa_threshold", c.metrics.pa_threshold}, {"chamfer", chamfer_variant_name(c.metrics.chamfer)}}},
  };
}

Config config_from_json(const json& doc) {
  Config c;
  Section root(doc, "");
  root.get("seed", c.seed);
  root.get("jobs", c.jobs);
  std::string workdir = c.workdir.string();
  root.get("workdir", workdir);
  c.workdir = workdir;

  Section ds(root.sub("dataset"), "dataset");
  std::string dir = c.dataset.dir.string();
  ds.get("dir", dir);
  c.dataset.dir = dir;
  ds.get("shapes", c.dataset.shapes);
  ds.get("objects", c.dataset.objects);
  ds.get("fragments", c.dataset.fragments);
  ds.get("points", c.dataset.points);
  ds.get("scale", c.dataset.scale);
  ds.get("tau", c.dataset.tau);
  ds.get("holdout", c.dataset.holdout);
  ds.finish();

  auto& e = c.model.encoder;
  auto& f = c.model.flow;
  Section m(root.sub("model"), "model");
  m.get("c_geo", e.c_geo);
  m.get("c_rgb", e.c_rgb);
  m.get("geo_blocks", e.geo_blocks);
  m.get("rgb_blocks", e.rgb_blocks);
  m.get("bands", e.bands);
  m.get("shape_dim", e.shape_dim);
  m.get("gram_channels", e.gram_channels);
  m.get("seg_hidden", e.seg_hidden);
  m.get("vn_slope", e.vn_slope);
  m.get_enum("backbone", e.backbone, parse_backbone);
  m.get("fault_layer", e.fault_layer);
  m.get_enum("arch", f.arch, parse_velocity_arch);
  m.get_enum("param", f.param, parse_velocity_param);
  m.get("pool_channels", f.pool_channels);
  m.get("pool_gates", f.pool_gates);
  m.get("vector_width", f.vector_width);
  m.get("hidden", f.hidden);
  m.get("flow_blocks", f.blocks);
  m.get("cross_channels", f.cross_channels);
  m.finish();

  auto& t = c.train;
  Section fl(root.sub("flow"), "flow");
  fl.get("lambda", f.lambda);
  fl.get("t_cap", f.t_cap);
  fl.get("steps", t.steps);
  fl.get("time_weight_power", t.time_weight_power);
  fl.get("views", t.views);
  fl.get("color_augment", t.color_augment);
  fl.get("encoder_points", t.encoder_points);
  fl.get("overlap_points", t.overlap_points);
  fl.get("log_every", t.log_every);
  fl.finish();

  Section ov(root.sub("overlap"), "overlap");
  ov.get("alpha", t.alpha);
  ov.get("resolution", t.overlap.resolution);
  ov.get("margin", t.overlap.margin);
  ov.get("sigma_cells", t.overlap.sigma_cells);
  ov.get("eps", t.overlap.eps);
  ov.finish();

  Section op(root.sub("optimizer"), "optimizer");
  op.get("lr", t.lr);
  op.get("beta1", t.beta1);
  op.get("beta2", t.beta2);
  op.get("batch", t.batch);
  op.get("clip", t.clip);
  op.get("final_lr_fraction", t.final_lr_fraction);
  op.finish();

  Section pre(root.sub("pretrain"), "pretrain");
  pre.get("epochs", c.pretrain.epochs);
  pre.get("points", c.pretrain.points);
  pre.get("eval_points", c.pretrain.eval_points);
  pre.get("batch", c.pretrain.batch);
  pre.get("lr", c.pretrain.lr);
  pre.get("clip", c.pretrain.clip);
  pre.get("resume", c.pretrain_resume);
  pre.finish();

  Section inf(root.sub("inference"), "inference");
  inf.get("steps", c.inference.steps);
  inf.get_enum("mode", c.inference.mode, parse_start_mode);
  inf.finish();

  Section me(root.sub("metrics"), "metrics");
  me.get("pa_threshold", c.metrics.pa_threshold);
  me.get_enum("chamfer", c.metrics.chamfer, parse_chamfer_variant);
  me.finish();
  root.finish();

  require(c.jobs >= 1, "jobs", c.jobs);
  require(c.dataset.objects >= 1, "dataset.objects", c.dataset.objects);
  require(c.dataset.fragments >= 2, "dataset.fragments", c.dataset.fragments);
  require(c.dataset.points >= 16 * c.dataset.fragments, "dataset.points", c.dataset.points);
  require(c.dataset.tau > 0, "dataset.tau", c.dataset.tau);
  require(c.dataset.holdout >= 0, "dataset.holdout", c.dataset.holdout);
  require(!c.dataset.shapes.empty(), "dataset.shapes", c.dataset.shapes);
  for (const auto& s : c.dataset.shapes) {
    try {
      (void)parse_shape(s);
    } catch (const std::invalid_argument& ex) {
      throw ConfigError(std::string("config.dataset: ") + ex.what());
    }
  }
  require(f.t_cap > 0 && f.t_cap < 1, "flow.t_cap", f.t_cap);
  require(f.lambda >= 0, "flow.lambda", f.lambda);
  require(t.steps >= 0, "flow.steps", t.steps);
  require(t.views >= 1, "flow.views", t.views);
  require(t.log_every >= 1, "flow.log_every", t.log_every);
  require(t.alpha >= 0, "overlap.alpha", t.alpha);
  require(t.overlap.resolution >= 4, "overlap.resolution", t.overlap.resolution);
  require(t.overlap.sigma_cells > 0, "overlap.sigma_cells", t.overlap.sigma_cells);
  require(t.overlap.eps > 0, "overlap.eps", t.overlap.eps);
  require(t.lr > 0, "optimizer.lr", t.lr);
  require(t.batch >= 1, "optimizer.batch", t.batch);
  require(c.pretrain.epochs >= 0, "pretrain.epochs", c.pretrain.epochs);
  require(c.pretrain.batch >= 1, "pretrain.batch", c.pretrain.batch);
  require(c.inference.steps >= 1, "inference.steps", c.inference.steps);
  require(c.metrics.pa_threshold > 0, "metrics.pa_threshold", c.metrics.pa_threshold);
  return c;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  json doc;
  try {
    doc = json::parse(is, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  return config_from_json(doc);
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

void apply_environment(Config& cfg) {
  const char* s = std::getenv("EM3RF_SEED");
  if (!s || !*s) return;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (errno || *end || s[0] == '-') throw ConfigError(std::string("EM3RF_SEED is not an unsigned integer: ") + s);
  cfg.seed = v;
}

}  // namespace em3rf
