#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "mmgl/config.hpp"

namespace mmgl {

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::global_pretrain: return "global_pretrain";
    case Stage::local_pretrain: return "local_pretrain";
    case Stage::finetune: return "finetune";
  }
  return "?";
}

Stage parse_stage(const std::string& text) {
  if (text == "global_pretrain") return Stage::global_pretrain;
  if (text == "local_pretrain") return Stage::local_pretrain;
  if (text == "finetune") return Stage::finetune;
  throw Error(ErrorKind::invalid_config, "unknown stage '" + text + "'");
}

StageConfig StageConfig::defaults(Stage stage) {
  StageConfig c;
  c.stage = stage;
  switch (stage) {
    case Stage::global_pretrain:
      c.epochs = 5;
      c.batch_size = 8;
      c.learning_rate = 1e-3;
      c.labeled_only = false;
      break;
    case Stage::local_pretrain:
      c.epochs = 5;
      c.batch_size = 4;
      c.learning_rate = 1e-3;
      c.labeled_only = true;
      break;
    case Stage::finetune:
      c.epochs = 20;
      c.batch_size = 4;
      c.learning_rate = 1e-4;
      c.labeled_only = true;
      c.views = {ViewAxis::transaxial};
      break;
  }
  return c;
}

void StageConfig::validate() const {
  const std::string name = to_string(stage);
  require(epochs >= 0, ErrorKind::invalid_config, name + ".epochs must be >= 0");
  require(batch_size >= 1, ErrorKind::invalid_config, name + ".batch_size must be >= 1");
  require(learning_rate > 0.0, ErrorKind::invalid_config, name + ".learning_rate must be positive");
  require(samples_per_epoch >= 0, ErrorKind::invalid_config, name + ".samples_per_epoch must be >= 0");
  require(!views.empty(), ErrorKind::invalid_config, name + ".views must not be empty");
  if (stage == Stage::global_pretrain)
    require(batch_size >= 2, ErrorKind::invalid_config, "global_pretrain.batch_size must be >= 2 (two positive pairs)");
  if (stage != Stage::global_pretrain)
    require(labeled_only, ErrorKind::invalid_config, name + " trains on labeled slices only");
  if (stage == Stage::finetune)
    require(views.size() == 1 && views.front() == ViewAxis::transaxial, ErrorKind::invalid_config,
            "finetune uses the transaxial view only");
  if (stage != Stage::local_pretrain) require(!freeze_encoder, ErrorKind::invalid_config, "freeze_encoder applies to local_pretrain");
}

const StageConfig& ExperimentConfig::stage(Stage s) const {
  switch (s) {
    case Stage::global_pretrain: return global_stage;
    case Stage::local_pretrain: return local_stage;
    case Stage::finetune: break;
  }
  return finetune_stage;
}

StageConfig& ExperimentConfig::stage(Stage s) { return const_cast<StageConfig&>(std::as_const(*this).stage(s)); }

void ExperimentConfig::set_seed(std::uint64_t s) {
  seed = s;
  for (Stage st : {Stage::global_pretrain, Stage::local_pretrain, Stage::finetune})
    stage(st).seed = derive_seed(s, static_cast<std::uint64_t>(st) + 1);
}

void ExperimentConfig::validate() const {
  require(data.labeled_fraction > 0.0 && data.labeled_fraction <= 1.0, ErrorKind::invalid_config,
          "data.labeled_fraction must lie in (0,1]");
  require(data.val_stride >= 1, ErrorKind::invalid_config, "data.val_stride must be >= 1");
  augmentation.validate();
  model.validate();
  contrastive.validate();
  weights.validate();
  global_stage.validate();
  local_stage.validate();
  finetune_stage.validate();
  require(num_workers >= 1, ErrorKind::invalid_config, "num_workers must be >= 1");
}

int resolve_num_workers(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("MMGL_NUM_WORKERS"); env && *env) {
    try {
      const int n = std::stoi(env);
      require(n >= 1, ErrorKind::invalid_config, "MMGL_NUM_WORKERS must be >= 1");
      return n;
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::invalid_config, std::string("MMGL_NUM_WORKERS is not an integer: ") + env);
    }
  }
  return cfg.num_workers;
}

// ---------------------------------------------------------------------------

namespace {

class Reader {
 public:
  Reader(const YAML::Node& node, std::string path) : node_(node), path_(std::move(path)) {
    require(node_.IsMap() || node_.IsNull(), ErrorKind::invalid_config, "'" + label() + "' must be a mapping");
  }

  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0 || !node_.IsMap()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) throw Error(ErrorKind::invalid_config, "unknown config key '" + prefix() + key + "'");
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!node_.IsMap() || !node_[key]) return;
    try {
      out = node_[key].template as<T>();
    } catch (const YAML::Exception&) {
      throw Error(ErrorKind::invalid_config, "bad value for '" + prefix() + key + "'");
    }
  }

  void get(const std::string& key, Interval& out) {
    std::vector<double> v;
    get(key, v);
    if (has(key)) {
      require(v.size() == 2, ErrorKind::invalid_config, "'" + prefix() + key + "' needs [lo, hi]");
      out = {v[0], v[1]};
    }
  }

  void get(const std::string& key, WeightTriple& out) {
    seen_.insert(key);
    if (!has(key)) return;
    const YAML::Node n = node_[key];
    if (n.IsScalar()) {
      out = parse_portfolio(n.as<std::string>());
      return;
    }
    std::vector<double> v;
    get(key, v);
    require(v.size() == kHeadCount, ErrorKind::invalid_config, "'" + prefix() + key + "' needs three weights");
    std::copy(v.begin(), v.end(), out.begin());
  }

  void get(const std::string& key, std::vector<ViewAxis>& out) {
    seen_.insert(key);
    if (!has(key)) return;
    const YAML::Node n = node_[key];
    if (n.IsScalar()) {
      out = parse_views(n.as<std::string>());
      return;
    }
    std::vector<std::string> names;
    get(key, names);
    std::string joined;
    for (const auto& s : names) joined += s + ",";
    out = parse_views(joined);
  }

  void get(const std::string& key, std::filesystem::path& out) {
    std::string s;
    get(key, s);
    if (has(key)) out = s;
  }

  bool has(const std::string& key) const { return node_.IsMap() && node_[key]; }

  Reader child(const std::string& key) {
    seen_.insert(key);
    return Reader(node_.IsMap() && node_[key] ? node_[key] : YAML::Node(), prefix() + key);
  }

 private:
  std::string label() const { return path_.empty() ? "<root>" : path_; }
  std::string prefix() const { return path_.empty() ? "" : path_ + "."; }

  YAML::Node node_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_stage(Reader&& r, StageConfig& s) {
  r.get("epochs", s.epochs);
  r.get("batch_size", s.batch_size);
  r.get("learning_rate", s.learning_rate);
  r.get("views", s.views);
  r.get("labeled_only", s.labeled_only);
  r.get("seed", s.seed);
  std::filesystem::path init;
  r.get("init_checkpoint", init);
  if (!init.empty()) s.init_checkpoint = init;
  r.get("samples_per_epoch", s.samples_per_epoch);
  r.get("augment", s.augment);
  r.get("freeze_encoder", s.freeze_encoder);
}

std::string views_string(const std::vector<ViewAxis>& views) {
  std::string out;
  for (auto v : views) out += (out.empty() ? "" : ",") + to_string(v);
  return out;
}

// Shortest text that parses back to the same double, so dumps stay readable.
std::string shortest(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

void emit_triple(YAML::Emitter& e, const char* key, const WeightTriple& w) {
  e << YAML::Key << key << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (double v : w) e << shortest(v);
  e << YAML::EndSeq;
}

void emit_interval(YAML::Emitter& e, const char* key, const Interval& i) {
  e << YAML::Key << key << YAML::Value << YAML::Flow << YAML::BeginSeq << shortest(i.lo) << shortest(i.hi) << YAML::EndSeq;
}

void emit_stage(YAML::Emitter& e, const StageConfig& s) {
  e << YAML::Key << to_string(s.stage) << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "epochs" << YAML::Value << s.epochs;
  e << YAML::Key << "batch_size" << YAML::Value << s.batch_size;
  e << YAML::Key << "learning_rate" << YAML::Value << shortest(s.learning_rate);
  e << YAML::Key << "views" << YAML::Value << views_string(s.views);
  e << YAML::Key << "labeled_only" << YAML::Value << s.labeled_only;
  e << YAML::Key << "seed" << YAML::Value << s.seed;
  if (s.init_checkpoint) e << YAML::Key << "init_checkpoint" << YAML::Value << s.init_checkpoint->string();
  e << YAML::Key << "samples_per_epoch" << YAML::Value << s.samples_per_epoch;
  e << YAML::Key << "augment" << YAML::Value << s.augment;
  e << YAML::Key << "freeze_encoder" << YAML::Value << s.freeze_encoder;
  e << YAML::EndMap;
}

}  // namespace

ExperimentConfig parse_config(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw Error(ErrorKind::invalid_config, std::string("YAML parse error: ") + e.what());
  }
  ExperimentConfig cfg;
  {
    Reader r(root, "");
    std::uint64_t seed = 0;
    r.get("seed", seed);
    cfg.set_seed(seed);
    r.get("num_workers", cfg.num_workers);
    r.get("allow_any_init", cfg.allow_any_init);
    {
      Reader d = r.child("data");
      d.get("manifest", cfg.data.manifest);
      d.get("split", cfg.data.split);
      d.get("labeled_fraction", cfg.data.labeled_fraction);
      d.get("split_seed", cfg.data.split_seed);
      d.get("skip_empty_slices", cfg.data.skip_empty_slices);
      d.get("val_stride", cfg.data.val_stride);
    }
    {
      Reader a = r.child("augmentation");
      auto& aug = cfg.augmentation;
      a.get("brightness", aug.brightness);
      a.get("gamma", aug.gamma);
      a.get("noise_sigma_max", aug.noise_sigma_max);
      a.get("rotation_max_deg", aug.rotation_max_deg);
      a.get("crop_scale", aug.crop_scale);
      Reader en = a.child("enable");
      en.get("rotation", aug.rotation);
      en.get("crop", aug.crop);
      en.get("brightness", aug.brightness_enabled);
      en.get("gamma", aug.gamma_enabled);
      en.get("noise", aug.noise);
    }
    {
      Reader m = r.child("model");
      auto& mc = cfg.model;
      m.get("in_channels", mc.in_channels);
      m.get("base_channels", mc.base_channels);
      m.get("n_classes", mc.n_classes);
      m.get("embed_dim", mc.embed_dim);
      m.get("head_hidden", mc.head_hidden);
      m.get("local_dim", mc.local_dim);
      m.get("local_stride", mc.local_stride);
      m.get("seg_background_bias", mc.seg_background_bias);
      m.get("input_size", mc.input_size);
      m.get("head_nonlinearity", mc.head_nonlinearity);
    }
    {
      Reader l = r.child("losses");
      l.get("temperature", cfg.contrastive.temperature);
      std::string mode = to_string(cfg.contrastive.denominator_mode);
      l.get("global_mode", mode);
      cfg.contrastive.denominator_mode = parse_denominator_mode(mode);
      l.get("max_points_per_class", cfg.contrastive.max_points_per_class);
      l.get("global_weights", cfg.weights.global);
      l.get("local_weights", cfg.weights.local);
      l.get("dice_weights", cfg.weights.dice);
    }
    {
      Reader s = r.child("stages");
      read_stage(s.child("global_pretrain"), cfg.global_stage);
      read_stage(s.child("local_pretrain"), cfg.local_stage);
      read_stage(s.child("finetune"), cfg.finetune_stage);
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::missing_file, "config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const ExperimentConfig& cfg) {
  YAML::Emitter e;
  e.SetDoublePrecision(17);
  e << YAML::BeginMap;
  e << YAML::Key << "seed" << YAML::Value << cfg.seed;
  e << YAML::Key << "num_workers" << YAML::Value << cfg.num_workers;
  e << YAML::Key << "allow_any_init" << YAML::Value << cfg.allow_any_init;

  e << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "manifest" << YAML::Value << cfg.data.manifest.string();
  e << YAML::Key << "split" << YAML::Value << cfg.data.split.string();
  e << YAML::Key << "labeled_fraction" << YAML::Value << shortest(cfg.data.labeled_fraction);
  e << YAML::Key << "split_seed" << YAML::Value << cfg.data.split_seed;
  e << YAML::Key << "skip_empty_slices" << YAML::Value << cfg.data.skip_empty_slices;
  e << YAML::Key << "val_stride" << YAML::Value << cfg.data.val_stride;
  e << YAML::EndMap;

  const auto& aug = cfg.augmentation;
  e << YAML::Key << "augmentation" << YAML::Value << YAML::BeginMap;
  emit_interval(e, "brightness", aug.brightness);
  emit_interval(e, "gamma", aug.gamma);
  e << YAML::Key << "noise_sigma_max" << YAML::Value << shortest(aug.noise_sigma_max);
  e << YAML::Key << "rotation_max_deg" << YAML::Value << shortest(aug.rotation_max_deg);
  emit_interval(e, "crop_scale", aug.crop_scale);
  e << YAML::Key << "enable" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "rotation" << YAML::Value << aug.rotation;
  e << YAML::Key << "crop" << YAML::Value << aug.crop;
  e << YAML::Key << "brightness" << YAML::Value << aug.brightness_enabled;
  e << YAML::Key << "gamma" << YAML::Value << aug.gamma_enabled;
  e << YAML::Key << "noise" << YAML::Value << aug.noise;
  e << YAML::EndMap << YAML::EndMap;

  const auto& m = cfg.model;
  e << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "in_channels" << YAML::Value << m.in_channels;
  e << YAML::Key << "base_channels" << YAML::Value << m.base_channels;
  e << YAML::Key << "n_classes" << YAML::Value << m.n_classes;
  e << YAML::Key << "embed_dim" << YAML::Value << m.embed_dim;
  e << YAML::Key << "head_hidden" << YAML::Value << m.head_hidden;
  e << YAML::Key << "local_dim" << YAML::Value << m.local_dim;
  e << YAML::Key << "local_stride" << YAML::Value << m.local_stride;
  e << YAML::Key << "seg_background_bias" << YAML::Value << shortest(m.seg_background_bias);
  e << YAML::Key << "input_size" << YAML::Value << m.input_size;
  e << YAML::Key << "head_nonlinearity" << YAML::Value << m.head_nonlinearity;
  e << YAML::EndMap;

  e << YAML::Key << "losses" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "temperature" << YAML::Value << shortest(cfg.contrastive.temperature);
  e << YAML::Key << "global_mode" << YAML::Value << to_string(cfg.contrastive.denominator_mode);
  e << YAML::Key << "max_points_per_class" << YAML::Value << cfg.contrastive.max_points_per_class;
  emit_triple(e, "global_weights", cfg.weights.global);
  emit_triple(e, "local_weights", cfg.weights.local);
  emit_triple(e, "dice_weights", cfg.weights.dice);
  e << YAML::EndMap;

  e << YAML::Key << "stages" << YAML::Value << YAML::BeginMap;
  emit_stage(e, cfg.global_stage);
  emit_stage(e, cfg.local_stage);
  emit_stage(e, cfg.finetune_stage);
  e << YAML::EndMap;

  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

}  // namespace mmgl
