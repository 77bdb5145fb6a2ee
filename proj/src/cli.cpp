#include <malloc.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmgl/cli.hpp"
#include "mmgl/pipeline.hpp"
#include "mmgl/report.hpp"
#include "mmgl/synth_phantom.hpp"

namespace mmgl {

namespace fs = std::filesystem;
using nlohmann::json;

void tune_process() {
  flush_denormals();
#if defined(M_MMAP_THRESHOLD)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

// A run directory: created empty (or cleared with --force, or reused by --resume),
// closed by writing run.json that lists every file inside it.
class RunDir {
 public:
  RunDir(fs::path dir, bool force, bool resume, std::string command, std::vector<std::string> argv)
      : dir_(std::move(dir)), command_(std::move(command)), argv_(std::move(argv)), started_(utc_now()) {
    require(!dir_.empty(), ErrorKind::invalid_input, "--out is required");
    if (fs::exists(dir_) && !fs::is_empty(dir_) && !resume) {
      require(force, ErrorKind::invalid_input, "run directory " + dir_.string() + " is not empty (use --force to overwrite)");
      for (const auto& e : fs::directory_iterator(dir_)) fs::remove_all(e.path());
    }
    fs::create_directories(dir_);
  }

  fs::path operator/(const std::string& name) const { return dir_ / name; }
  const fs::path& path() const { return dir_; }
  json& extra() { return extra_; }

  void finish() const {
    std::vector<std::string> outputs;
    for (const auto& e : fs::recursive_directory_iterator(dir_))
      if (e.is_regular_file() && e.path().filename() != "run.json") outputs.push_back(fs::relative(e.path(), dir_).generic_string());
    std::sort(outputs.begin(), outputs.end());
    json doc{{"command", command_}, {"argv", argv_}, {"started", started_}, {"finished", utc_now()}, {"outputs", outputs}};
    for (const auto& [k, v] : extra_.items()) doc[k] = v;
    write_text(dir_ / "run.json", doc.dump(2) + "\n");
  }

 private:
  fs::path dir_;
  std::string command_;
  std::vector<std::string> argv_;
  std::string started_;
  json extra_ = json::object();
};

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string views;
  std::optional<double> labeled_fraction;
  std::string dice_weights;
  std::string global_loss_mode;
  bool allow_any_init = false;
  bool force = false;
  std::string data;
  std::optional<int> epochs;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_out = true) {
  cmd->add_option("--config", f.config, "YAML experiment config")->check(CLI::ExistingFile);
  if (with_out) cmd->add_option("--out", f.out, "run directory")->required();
  cmd->add_option("--seed", f.seed, "experiment seed (re-derives every stage seed)");
  cmd->add_option("--views", f.views, "comma-separated views, e.g. t,c,s");
  cmd->add_option("--labeled-fraction", f.labeled_fraction, "fraction of training volumes with labels");
  cmd->add_option("--dice-weights", f.dice_weights, "deep-supervision portfolio a:b:c");
  cmd->add_option("--global-loss-mode", f.global_loss_mode, "standard or as-written");
  cmd->add_flag("--allow-any-init", f.allow_any_init, "skip stage-order checks on --init");
  cmd->add_flag("--force", f.force, "overwrite a non-empty run directory");
  cmd->add_option("--data", f.data, "dataset manifest (overrides data.manifest)");
  cmd->add_option("--epochs", f.epochs, "epochs of the stage being run");
}

fs::path resolve_against(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute()) return p;
  return fs::absolute(base / p).lexically_normal();
}

ExperimentConfig resolve_config(const CommonFlags& f, std::optional<Stage> stage) {
  ExperimentConfig cfg;
  if (!f.config.empty()) {
    cfg = load_config(f.config);
    const fs::path base = fs::absolute(f.config).parent_path();
    cfg.data.manifest = resolve_against(cfg.data.manifest, base);
    cfg.data.split = resolve_against(cfg.data.split, base);
  }
  if (!f.data.empty()) cfg.data.manifest = fs::absolute(f.data);
  if (f.seed) cfg.set_seed(*f.seed);
  if (f.labeled_fraction) cfg.data.labeled_fraction = *f.labeled_fraction;
  if (!f.dice_weights.empty()) cfg.weights.dice = parse_portfolio(f.dice_weights);
  if (!f.global_loss_mode.empty()) cfg.contrastive.denominator_mode = parse_denominator_mode(f.global_loss_mode);
  if (f.allow_any_init) cfg.allow_any_init = true;
  if (stage) {
    StageConfig& sc = cfg.stage(*stage);
    if (!f.views.empty()) sc.views = parse_views(f.views);
    if (f.epochs) sc.epochs = *f.epochs;
  } else {
    require(f.views.empty() && !f.epochs, ErrorKind::invalid_input, "--views and --epochs apply to single stages only");
  }
  cfg.validate();
  return cfg;
}

fs::path checkpoint_path(const fs::path& p) { return fs::is_directory(p) ? p / "ckpt" : p; }

struct Journal {
  fs::path path;
  std::string text = journal_header();

  void add(Stage stage, const EpochRecord& r) {
    text += journal_row(stage, r);
    write_text(path, text);
  }
};

void print_epoch(std::ostream& out, Stage stage, const EpochRecord& r) {
  out << to_string(stage) << " epoch " << r.epoch << " loss " << std::setprecision(6) << r.loss;
  if (r.val_dice >= 0) out << " val_dice " << std::setprecision(4) << r.val_dice;
  if (r.degenerate) out << " degenerate " << r.degenerate;
  out << std::endl;
}

int cmd_stage(Stage stage, const CommonFlags& f, const std::string& init_flag, bool resume, RunDir& run, std::ostream& out) {
  ExperimentConfig cfg = resolve_config(f, stage);
  StageConfig sc = cfg.stage(stage);
  if (!init_flag.empty()) sc.init_checkpoint = fs::path(init_flag);
  write_text(run / "resolved_config.yaml", dump_config(cfg) + "\n");

  const Dataset data = load_dataset(cfg.data);
  write_split(run / "split.json", data.split);

  std::optional<Checkpoint> init;
  if (sc.init_checkpoint) init = load_checkpoint(checkpoint_path(*sc.init_checkpoint), &cfg.model);
  std::optional<Checkpoint> resume_from;
  Journal journal{run / "losses.csv"};
  if (resume && fs::exists(run / "last.ckpt")) {
    resume_from = load_checkpoint(run / "last.ckpt", &cfg.model);
    StageConfig started = resume_from->stage_config;
    started.epochs = sc.epochs;  // extending a run is allowed
    require(started == sc, ErrorKind::config_mismatch, "resumed run was started with a different stage config");
    for (const auto& r : resume_from->state.history) journal.text += journal_row(stage, r);
    out << "resuming " << to_string(stage) << " after epoch " << resume_from->state.epoch << std::endl;
  }

  TrainOptions topt = TrainOptions::from(cfg);
  topt.num_workers = resolve_num_workers(cfg);
  topt.on_epoch = [&](const EpochRecord& r) {
    journal.add(stage, r);
    print_epoch(out, stage, r);
  };
  topt.on_checkpoint = [&](const Checkpoint& c) {
    save_checkpoint(run / "last.ckpt", c);
    if (stage == Stage::finetune && c.state.best_epoch == c.state.epoch) save_checkpoint(run / "ckpt", c);
  };
  write_text(journal.path, journal.text);

  const Checkpoint* init_ptr = init ? &*init : nullptr;
  const Checkpoint* resume_ptr = resume_from ? &*resume_from : nullptr;
  StageResult result;
  switch (stage) {
    case Stage::global_pretrain: {
      const auto slices = build_slices(data.volumes, data.split.train_ids, sc.views, false, false, cfg.model.input_size);
      result = pretrain_global(slices, sc, topt, init_ptr, resume_ptr);
      break;
    }
    case Stage::local_pretrain: {
      const auto slices = build_slices(data.volumes, data.split.labeled_ids, sc.views, true, cfg.data.skip_empty_slices, cfg.model.input_size);
      result = pretrain_local(slices, init_ptr, sc, topt, resume_ptr);
      break;
    }
    case Stage::finetune: {
      const auto slices = build_slices(data.volumes, data.split.labeled_ids, sc.views, true, cfg.data.skip_empty_slices, cfg.model.input_size);
      const ValidationSet val{data.volumes_of(data.split.val_ids), cfg.data.val_stride};
      result = finetune(slices, val, init_ptr, sc, topt, resume_ptr);
      break;
    }
  }
  save_checkpoint(run / "last.ckpt", result.last);
  // A resumed fine-tuning run that never improves keeps the best checkpoint written before the interruption.
  if (result.best) save_checkpoint(run / "ckpt", *result.best);
  else if (stage != Stage::finetune || !fs::exists(run / "ckpt")) save_checkpoint(run / "ckpt", result.last);
  const Checkpoint chosen = load_checkpoint(run / "ckpt");
  run.extra()["stage"] = to_string(stage);
  run.extra()["config"] = f.config.empty() ? json(nullptr) : json(fs::absolute(f.config).string());
  run.extra()["init"] = sc.init_checkpoint ? json(checkpoint_path(*sc.init_checkpoint).string()) : json(nullptr);
  run.extra()["epochs_completed"] = result.last.state.epoch;
  if (stage == Stage::finetune) {
    run.extra()["best_val_dice"] = chosen.state.best_val;
    run.extra()["best_epoch"] = chosen.state.best_epoch;
    out << "best validation dice " << chosen.state.best_val << " at epoch " << chosen.state.best_epoch << std::endl;
  }
  return 0;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok.erase(0, tok.find_first_not_of(' '));
    tok.erase(tok.find_last_not_of(' ') + 1);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(text)) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used == s.size(), ErrorKind::invalid_input, "bad seed '" + s + "'");
    seeds.push_back(v);
  }
  require(!seeds.empty(), ErrorKind::invalid_input, "no seeds given");
  return seeds;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-scale multi-view global-local contrastive pre-training and deeply supervised fine-tuning of a U-Net"};
  app.name("mmgl");
  app.require_subcommand(1);
  std::vector<std::string> args(argv + 1, argv + argc);

  // synth-data
  int count = 10;
  std::uint64_t synth_seed = 0;
  double noise_sigma = PhantomConfig{}.noise_sigma;
  std::string synth_out;
  bool synth_force = false;
  auto* synth = app.add_subcommand("synth-data", "write labeled synthetic phantoms and a manifest");
  synth->add_option("--count", count, "number of phantoms")->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--noise-sigma", noise_sigma, "Gaussian noise standard deviation");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_flag("--force", synth_force, "overwrite a non-empty directory");

  CommonFlags sf;
  std::string init;
  bool resume = false;
  CLI::App* stage_cmds[3];
  const Stage stages[3] = {Stage::global_pretrain, Stage::local_pretrain, Stage::finetune};
  const char* names[3] = {"pretrain-global", "pretrain-local", "finetune"};
  const char* help[3] = {"multi-scale global contrastive pre-training of the encoder",
                         "multi-scale local supervised contrastive pre-training of the decoder",
                         "deeply supervised fine-tuning on labeled transaxial slices"};
  for (int i = 0; i < 3; ++i) {
    stage_cmds[i] = app.add_subcommand(names[i], help[i]);
    add_common(stage_cmds[i], sf);
    stage_cmds[i]->add_option("--init", init, "checkpoint file or run directory to start from");
    stage_cmds[i]->add_flag("--resume", resume, "continue an interrupted run in --out from its last checkpoint");
  }

  CommonFlags ef;
  std::string eval_init, eval_split = "test", eval_tag = "eval";
  auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint on held-out volumes");
  add_common(evaluate, ef);
  evaluate->add_option("--init", eval_init, "checkpoint file or run directory")->required();
  evaluate->add_option("--split", eval_split, "test, val or train")->check(CLI::IsMember({"test", "val", "train"}));
  evaluate->add_option("--tag", eval_tag, "run tag written to the metrics");

  CommonFlags af;
  std::string arms_text, seeds_text = "0,1";
  auto* ablate = app.add_subcommand("ablate", "run the component ladder over several seeds");
  add_common(ablate, af);
  ablate->add_option("--arms", arms_text, "comma-separated arms (default: Random,+DS,+DS+MG,+DS+MG+MV,MMGL)");
  ablate->add_option("--seeds", seeds_text, "comma-separated seeds");

  std::vector<std::string> report_inputs;
  std::string report_out;
  bool report_force = false;
  auto* report = app.add_subcommand("report", "tables and charts from metrics.json files");
  report->add_option("--metrics", report_inputs, "metrics.json files or run directories")->required();
  report->add_option("--out", report_out, "output directory")->required();
  report->add_flag("--force", report_force, "overwrite a non-empty directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    tune_process();
    if (*synth) {
      RunDir run(synth_out, synth_force, false, "synth-data", args);
      PhantomConfig base;
      base.noise_sigma = noise_sigma;
      const auto entries = write_phantom_dataset(run.path(), count, synth_seed, base);
      run.extra()["count"] = count;
      run.extra()["seed"] = synth_seed;
      run.extra()["manifest"] = "manifest.json";
      run.finish();
      out << "wrote " << entries.size() << " phantoms to " << run.path().string() << std::endl;
      return 0;
    }
    for (int i = 0; i < 3; ++i)
      if (*stage_cmds[i]) {
        RunDir run(sf.out, sf.force, resume, names[i], args);
        cmd_stage(stages[i], sf, init, resume, run, out);
        run.finish();
        return 0;
      }
    if (*evaluate) {
      ExperimentConfig cfg = resolve_config(ef, std::nullopt);
      RunDir run(ef.out, ef.force, false, "evaluate", args);
      write_text(run / "resolved_config.yaml", dump_config(cfg) + "\n");
      const Checkpoint ckpt = load_checkpoint(checkpoint_path(eval_init));
      const Dataset data = load_dataset(cfg.data);
      write_split(run / "split.json", data.split);
      const auto& ids = eval_split == "test" ? data.split.test_ids : eval_split == "val" ? data.split.val_ids : data.split.train_ids;
      require(!ids.empty(), ErrorKind::invalid_input, "the " + eval_split + " split is empty");
      std::vector<MetricsRecord> records;
      std::vector<double> slice_dice;
      for (const auto& id : ids) {
        const auto& v = data.volume(id);
        require(v.labels.has_value(), ErrorKind::invalid_input, "evaluation of " + id + " needs labels");
        const LabelVolume pred = predict_volume(ckpt.model, v.volume);
        MetricsRecord m = compute_metrics(as_span(pred), as_span(*v.labels));
        const double per_slice = slice_mean_dice(pred, *v.labels);
        slice_dice.push_back(per_slice);
        m.run = eval_tag;
        m.seed = cfg.seed;
        m.labeled_fraction = data.split.labeled_fraction;
        records.push_back(m);
        out << id << " mean_dice " << m.mean_dice << " slice_mean_dice " << per_slice << " miou " << m.miou << " pixacc " << m.pixacc
            << std::endl;
      }
      emit_report(records, run.path());
      emit_overlays(ckpt.model, data.volume(ids.front()), run.path());
      const MetricsRecord mean = average_records(records);
      run.extra()["checkpoint"] = checkpoint_path(eval_init).string();
      run.extra()["split"] = eval_split;
      run.extra()["mean_dice"] = mean.mean_dice;
      run.extra()["slice_mean_dice"] = std::accumulate(slice_dice.begin(), slice_dice.end(), 0.0) / static_cast<double>(slice_dice.size());
      run.extra()["miou"] = mean.miou;
      run.extra()["pixacc"] = mean.pixacc;
      run.finish();
      out << "mean over " << records.size() << " volumes: dice " << mean.mean_dice << " miou " << mean.miou << " pixacc "
          << mean.pixacc << std::endl;
      return 0;
    }
    if (*ablate) {
      ExperimentConfig cfg = resolve_config(af, std::nullopt);
      std::vector<ArmSpec> arms;
      if (arms_text.empty()) arms = default_arms();
      else
        for (const auto& a : split_list(arms_text)) arms.push_back(parse_arm(a));
      const auto seeds = parse_seeds(seeds_text);
      RunDir run(af.out, af.force, false, "ablate", args);
      write_text(run / "resolved_config.yaml", dump_config(cfg) + "\n");
      const Dataset data = load_dataset(cfg.data);
      write_split(run / "split.json", data.split);
      cfg.set_seed(cfg.seed);
      cfg.num_workers = resolve_num_workers(cfg);

      std::vector<MetricsRecord> records;
      for (const auto& arm : arms)
        for (auto seed : seeds) {
          ExperimentConfig c = cfg;
          c.set_seed(seed);
          Journal journal{run / ("losses_" + arm.name + "_seed" + std::to_string(seed) + ".csv")};
          write_text(journal.path, journal.text);
          PipelineOptions popt;
          popt.on_epoch = [&](Stage stage, const EpochRecord& r) { journal.add(stage, r); };
          out << "arm " << arm.name << " seed " << seed << std::endl;
          const auto r = run_pipeline(c, data, arm, popt);
          require(r.test.has_value(), ErrorKind::invalid_input, "ablation needs test volumes");
          records.push_back(*r.test);
          out << "  test dice " << r.test->mean_dice << " (best val " << r.best_val << ")" << std::endl;
          write_text(run / "metrics.json", metrics_json(records));
        }
      emit_report(records, run.path());
      const std::string table = format_ablation_table(summarize(records));
      write_text(run / "ablation.txt", table);
      out << table;
      run.extra()["arms"] = [&] {
        json a = json::array();
        for (const auto& arm : arms) a.push_back(arm.name);
        return a;
      }();
      run.extra()["seeds"] = seeds;
      run.finish();
      return 0;
    }
    if (*report) {
      std::vector<MetricsRecord> records;
      for (const auto& in : report_inputs) {
        const fs::path p = fs::is_directory(in) ? fs::path(in) / "metrics.json" : fs::path(in);
        const auto r = parse_metrics_json(read_text(p));
        records.insert(records.end(), r.begin(), r.end());
      }
      require(!records.empty(), ErrorKind::invalid_input, "no metrics records in the inputs");
      RunDir run(report_out, report_force, false, "report", args);
      emit_report(records, run.path());
      const std::string table = format_ablation_table(summarize(records));
      write_text(run / "summary.txt", table);
      out << table;
      run.extra()["inputs"] = report_inputs;
      run.finish();
      return 0;
    }
  } catch (const Error& e) {
    err << "mmgl: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    err << "mmgl: " << e.what() << std::endl;
    return 3;
  }
  return 1;
}

}  // namespace mmgl
