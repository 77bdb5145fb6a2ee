#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "mmgl/pipeline.hpp"

namespace mmgl {

const LoadedVolume& Dataset::volume(const std::string& id) const {
  for (const auto& v : volumes)
    if (v.volume.id == id) return v;
  throw Error(ErrorKind::invalid_input, "volume '" + id + "' is not in the dataset");
}

std::vector<const LoadedVolume*> Dataset::volumes_of(const std::vector<std::string>& ids) const {
  std::vector<const LoadedVolume*> out;
  for (const auto& id : ids) out.push_back(&volume(id));
  return out;
}

Dataset load_dataset(const DataConfig& data) {
  require(!data.manifest.empty(), ErrorKind::invalid_config, "data.manifest is not set");
  Dataset d;
  std::vector<std::string> ids;
  for (const auto& e : read_manifest(data.manifest)) {
    d.volumes.push_back(load_volume(e.image, e.label, e.id));
    ids.push_back(e.id);
  }
  if (!data.split.empty()) {
    d.split = read_split(data.split);
    for (const auto* list : {&d.split.train_ids, &d.split.val_ids, &d.split.test_ids})
      for (const auto& id : *list) d.volume(id);
  } else {
    d.split = split_dataset(ids, data.labeled_fraction, data.split_seed);
  }
  for (const auto& id : d.split.labeled_ids)
    require(d.volume(id).labels.has_value(), ErrorKind::invalid_input, "labeled volume '" + id + "' has no label file");
  return d;
}

std::vector<ArmSpec> default_arms() {
  return {{"Random", false, false, false, false},
          {"+DS", true, false, false, false},
          {"+DS+MG", true, true, false, false},
          {"+DS+MG+MV", true, true, true, false},
          {"MMGL", true, true, true, true}};
}

ArmSpec parse_arm(const std::string& text) {
  std::string key;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) key += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (const auto& a : default_arms()) {
    std::string name;
    for (char c : a.name) name += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (key == name) return a;
  }
  ArmSpec arm{text, false, false, false, false};
  std::stringstream ss(key);
  std::string tok;
  bool any = false;
  while (std::getline(ss, tok, '+')) {
    if (tok.empty()) continue;
    any = true;
    if (tok == "random") continue;
    else if (tok == "ds") arm.deep_supervision = true;
    else if (tok == "mg") arm.global = true;
    else if (tok == "mv") arm.multi_view = true;
    else if (tok == "local" || tok == "ml") arm.local = true;
    else throw Error(ErrorKind::invalid_config, "unknown ablation toggle '" + tok + "' in '" + text + "'");
  }
  require(any, ErrorKind::invalid_config, "empty ablation arm");
  require(!arm.multi_view || arm.global || arm.local, ErrorKind::invalid_config, "'mv' needs a pre-training stage in '" + text + "'");
  return arm;
}

MetricsRecord evaluate_volumes(const Model& model, const std::vector<const LoadedVolume*>& volumes) {
  std::vector<MetricsRecord> per;
  for (const auto* v : volumes) per.push_back(evaluate_volume(model, v->volume, v->labels ? &*v->labels : nullptr));
  return average_records(per);
}

PipelineResult run_pipeline(const ExperimentConfig& cfg, const Dataset& data, const ArmSpec& arm, const PipelineOptions& opt) {
  cfg.validate();
  TrainOptions topt = TrainOptions::from(cfg);
  const std::vector<ViewAxis> pre_views = arm.multi_view ? std::vector<ViewAxis>(std::begin(kAllViews), std::end(kAllViews))
                                                         : std::vector<ViewAxis>{ViewAxis::transaxial};
  PipelineResult result;
  std::optional<Checkpoint> current;
  auto journal = [&](Stage stage) {
    result.journals.push_back({stage, {}});
    const std::size_t slot = result.journals.size() - 1;
    topt.on_epoch = [&, stage, slot](const EpochRecord& r) {
      result.journals[slot].epochs.push_back(r);
      if (opt.on_epoch) opt.on_epoch(stage, r);
    };
  };

  if (arm.global) {
    StageConfig sc = cfg.global_stage;
    sc.views = pre_views;
    const auto slices = build_slices(data.volumes, data.split.train_ids, sc.views, false, false, cfg.model.input_size);
    journal(Stage::global_pretrain);
    topt.allow_any_init = cfg.allow_any_init;
    current = pretrain_global(slices, sc, topt).last;
  }
  if (arm.local) {
    StageConfig sc = cfg.local_stage;
    if (!arm.multi_view) sc.views = {ViewAxis::transaxial};
    const auto slices = build_slices(data.volumes, data.split.labeled_ids, sc.views, true, cfg.data.skip_empty_slices, cfg.model.input_size);
    journal(Stage::local_pretrain);
    // Ablation arms may skip global pre-training.
    topt.allow_any_init = cfg.allow_any_init || !arm.global;
    current = pretrain_local(slices, current ? &*current : nullptr, sc, topt).last;
  }
  {
    const StageConfig& sc = cfg.finetune_stage;
    if (!arm.deep_supervision) topt.weights.dice = {0.0, 0.0, 1.0};
    const auto slices = build_slices(data.volumes, data.split.labeled_ids, sc.views, true, cfg.data.skip_empty_slices, cfg.model.input_size);
    journal(Stage::finetune);
    topt.allow_any_init = cfg.allow_any_init || !(arm.global && arm.local);
    const ValidationSet val{data.volumes_of(data.split.val_ids), cfg.data.val_stride};
    StageResult r = finetune(slices, val, current ? &*current : nullptr, sc, topt);
    result.final_checkpoint = r.best ? std::move(*r.best) : std::move(r.last);
    result.best_val = result.final_checkpoint.state.best_val;
  }
  if (opt.evaluate_test && !data.split.test_ids.empty()) {
    MetricsRecord m = evaluate_volumes(result.final_checkpoint.model, data.volumes_of(data.split.test_ids));
    m.run = arm.name;
    m.seed = cfg.seed;
    m.labeled_fraction = data.split.labeled_fraction;
    result.test = m;
  }
  return result;
}

std::vector<ArmSummary> summarize(const std::vector<MetricsRecord>& records) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const MetricsRecord*>> groups;
  for (const auto& r : records) {
    if (!groups.count(r.run)) order.push_back(r.run);
    groups[r.run].push_back(&r);
  }
  auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  };
  std::vector<ArmSummary> out;
  for (const auto& run : order) {
    const auto& g = groups[run];
    std::vector<double> d, m, p;
    for (const auto* r : g) {
      d.push_back(r->mean_dice);
      m.push_back(r->miou);
      p.push_back(r->pixacc);
    }
    ArmSummary s;
    s.run = run;
    s.n = static_cast<int>(g.size());
    stats(d, s.mean_dice, s.std_dice);
    stats(m, s.mean_miou, s.std_miou);
    stats(p, s.mean_pixacc, s.std_pixacc);
    out.push_back(s);
  }
  return out;
}

std::vector<MetricsRecord> ablation_run(const std::vector<ArmSpec>& arms, const ExperimentConfig& cfg, const Dataset& data,
                                        const std::vector<std::uint64_t>& seeds, const PipelineOptions& opt,
                                        const std::function<void(const MetricsRecord&)>& on_record) {
  require(!arms.empty(), ErrorKind::invalid_config, "ablation needs at least one arm");
  require(!seeds.empty(), ErrorKind::invalid_config, "ablation needs at least one seed per arm");
  std::vector<MetricsRecord> out;
  PipelineOptions popt = opt;
  popt.evaluate_test = true;
  for (const auto& arm : arms)
    for (auto seed : seeds) {
      ExperimentConfig c = cfg;
      c.set_seed(seed);
      auto r = run_pipeline(c, data, arm, popt);
      require(r.test.has_value(), ErrorKind::invalid_input, "ablation needs test volumes");
      out.push_back(*r.test);
      if (on_record) on_record(out.back());
    }
  return out;
}

std::string format_ablation_table(const std::vector<ArmSummary>& rows) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-14s %3s  %-17s %-17s %-17s %s\n", "arm", "n", "dice", "miou", "pixacc", "reference dice");
  out += line;
  for (const auto& r : rows) {
    std::string ref = "-";
    for (const auto& ladder : kReferenceLadder)
      if (r.run == ladder.arm) {
        std::snprintf(line, sizeof line, "%.1f", ladder.dice);
        ref = line;
      }
    std::snprintf(line, sizeof line, "%-14s %3d  %6.2f +- %-7.2f %6.2f +- %-7.2f %6.2f +- %-7.2f %s\n", r.run.c_str(), r.n,
                  100 * r.mean_dice, 100 * r.std_dice, 100 * r.mean_miou, 100 * r.std_miou, 100 * r.mean_pixacc,
                  100 * r.std_pixacc, ref.c_str());
    out += line;
  }
  return out;
}

}  // namespace mmgl
