#include <algorithm>
#include <future>
#include <map>
#include <thread>

#include "mmgl/eval.hpp"
#include "mmgl/trainer.hpp"

namespace mmgl {

TrainOptions TrainOptions::from(const ExperimentConfig& cfg) {
  TrainOptions o;
  o.model = cfg.model;
  o.contrastive = cfg.contrastive;
  o.weights = cfg.weights;
  o.augmentation = cfg.augmentation;
  o.allow_any_init = cfg.allow_any_init;
  o.num_workers = resolve_num_workers(cfg);
  return o;
}

std::vector<SliceSample> build_slices(std::span<const LoadedVolume> volumes, const std::vector<std::string>& ids,
                                      const std::vector<ViewAxis>& views, bool need_masks, bool skip_empty, Index size) {
  std::map<std::string, const LoadedVolume*> by_id;
  for (const auto& v : volumes) by_id[v.volume.id] = &v;
  std::vector<SliceSample> out;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    require(it != by_id.end(), ErrorKind::invalid_input, "volume '" + id + "' is not loaded");
    const LoadedVolume& v = *it->second;
    require(!need_masks || v.labels.has_value(), ErrorKind::invalid_input, "volume '" + id + "' has no labels");
    const LabelVolume* labels = need_masks ? &*v.labels : nullptr;
    for (ViewAxis view : views)
      for (auto& raw : slice_volume(v.volume, labels, view)) {
        if (skip_empty && raw.mask && (raw.mask->array() == 0).all()) continue;
        out.push_back(prepare_slice(std::move(raw), size));
      }
  }
  return out;
}

std::vector<std::size_t> epoch_order(std::span<const SliceSample> data, std::uint64_t seed, int epoch, int limit) {
  std::array<std::vector<std::size_t>, 3> by_view;
  for (std::size_t i = 0; i < data.size(); ++i) by_view[static_cast<std::size_t>(data[i].view)].push_back(i);
  Rng rng(derive_seed(seed, 0xe90c, static_cast<std::uint64_t>(epoch)));
  for (auto& v : by_view) std::shuffle(v.begin(), v.end(), rng);
  std::vector<std::size_t> order;
  order.reserve(data.size());
  for (std::size_t k = 0; order.size() < data.size(); ++k)
    for (const auto& v : by_view)
      if (k < v.size()) order.push_back(v[k]);
  if (limit > 0 && static_cast<std::size_t>(limit) < order.size()) order.resize(static_cast<std::size_t>(limit));
  return order;
}

double validation_dice(const Model& model, const ValidationSet& val) {
  require(val.stride >= 1, ErrorKind::invalid_config, "validation stride must be >= 1");
  if (val.volumes.empty()) return -1.0;
  const Index size = model.config().input_size;
  double sum = 0.0;
  for (const LoadedVolume* v : val.volumes) {
    require(v->labels.has_value(), ErrorKind::invalid_input, "validation volume " + v->volume.id + " has no labels");
    std::vector<std::uint8_t> pred, truth;
    for (const auto& s : slice_volume(v->volume, &*v->labels, ViewAxis::transaxial)) {
      if (s.slice_index % val.stride != 0) continue;
      const Image input = resize_slice(normalize_minmax(s.image), size);
      const LabelGrid p = resize_nearest(model.predict(input), s.image.rows(), s.image.cols());
      pred.insert(pred.end(), p.data(), p.data() + p.size());
      truth.insert(truth.end(), s.mask->data(), s.mask->data() + s.mask->size());
    }
    sum += compute_metrics(pred, truth).mean_dice;
  }
  return sum / static_cast<double>(val.volumes.size());
}

namespace {

void check_init(Stage stage, const Checkpoint* init, const TrainOptions& opt) {
  if (init) require(init->model_config == opt.model, ErrorKind::config_mismatch, "init checkpoint has a different model config");
  if (opt.allow_any_init) return;
  switch (stage) {
    case Stage::global_pretrain:
      require(init == nullptr, ErrorKind::stage_order, "global pre-training starts from random weights");
      break;
    case Stage::local_pretrain:
      require(init && init->stage == Stage::global_pretrain, ErrorKind::stage_order,
              "local pre-training needs a global_pretrain checkpoint" +
                  (init ? std::string(", got ") + to_string(init->stage) : std::string()));
      break;
    case Stage::finetune:
      require(init && init->stage == Stage::local_pretrain, ErrorKind::stage_order,
              "fine-tuning needs a local_pretrain checkpoint (or allow_any_init)" +
                  (init ? std::string(", got ") + to_string(init->stage) : std::string()));
      break;
  }
}

nn::ParamList<float> stage_params(Model& m, Stage stage, bool freeze_encoder) {
  nn::ParamList<float> out;
  auto add = [&](nn::ParamList<float> part) { out.insert(out.end(), part.begin(), part.end()); };
  switch (stage) {
    case Stage::global_pretrain:
      add(m.encoder_params());
      add(m.global_head_params());
      break;
    case Stage::local_pretrain:
      if (!freeze_encoder) add(m.encoder_params());
      add(m.decoder_params());
      add(m.local_head_params());
      break;
    case Stage::finetune:
      add(m.encoder_params());
      add(m.decoder_params());
      add(m.seg_head_params());
      break;
  }
  return out;
}

/// Shared bookkeeping of a training stage: model, optimizer, state and resumption.
class StageRun {
 public:
  StageRun(Stage stage, const StageConfig& cfg, const TrainOptions& opt, const Checkpoint* init, const Checkpoint* resume)
      : stage_(stage), cfg_(cfg), opt_(opt), model_(opt.model, derive_seed(cfg.seed, 0x1417)) {
    flush_denormals();
    require(cfg.stage == stage, ErrorKind::invalid_config, "stage config for " + to_string(cfg.stage) + " passed to " + to_string(stage));
    cfg.validate();
    opt.contrastive.validate();
    opt.weights.validate();
    if (resume) {
      require(resume->stage == stage, ErrorKind::stage_order, "cannot resume " + to_string(stage) + " from a " + to_string(resume->stage) + " checkpoint");
      require(resume->model_config == opt.model, ErrorKind::config_mismatch, "resume checkpoint has a different model config");
      model_ = resume->model;
      state_ = resume->state;
    } else {
      check_init(stage, init, opt);
      if (init) model_ = init->model;
    }
    adam_.emplace(stage_params(model_, stage, cfg.freeze_encoder), cfg.learning_rate);
    if (resume) {
      for (auto& [name, moments] : adam_->state()) {
        auto it = resume->optimizer.find(name);
        require(it != resume->optimizer.end(), ErrorKind::corrupt_archive, "resume checkpoint lacks optimizer state for " + name);
        moments = it->second;
      }
      adam_->set_steps(state_.optimizer_steps);
    }
  }

  Model& model() { return model_; }
  nn::Adam<float>& adam() { return *adam_; }
  const StageConfig& cfg() const { return cfg_; }
  TrainState& state() { return state_; }
  int first_epoch() const { return state_.epoch + 1; }

  Checkpoint snapshot() const {
    Checkpoint c;
    c.stage = stage_;
    c.model_config = opt_.model;
    c.stage_config = cfg_;
    c.state = state_;
    c.state.optimizer_steps = adam_->steps();
    c.model = model_;
    c.optimizer = adam_->state();
    return c;
  }

  void finish_epoch(const EpochRecord& r) {
    state_.epoch = r.epoch;
    state_.history.push_back(r);
    state_.optimizer_steps = adam_->steps();
    if (opt_.on_epoch) opt_.on_epoch(r);
  }

  void checkpoint_hook() {
    if (opt_.on_checkpoint) opt_.on_checkpoint(snapshot());
  }

 private:
  Stage stage_;
  StageConfig cfg_;
  TrainOptions opt_;
  Model model_;
  std::optional<nn::Adam<float>> adam_;
  TrainState state_;
};

std::vector<std::vector<std::size_t>> batches_of(const std::vector<std::size_t>& order, int batch_size, std::size_t min_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    if (end - i >= min_size) out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

// Same seeds as make_augmentation_set, so the result does not depend on the worker count.
AugmentationSet augmentation_set(std::span<const SliceSample> data, const std::vector<std::size_t>& batch, const AugmentationConfig& cfg,
                                 std::uint64_t seed, int workers) {
  std::vector<const SliceSample*> items;
  for (auto i : batch) items.push_back(&data[i]);
  if (workers <= 1) return make_augmentation_set(items, cfg, seed);
  std::vector<std::future<AugmentedPair>> jobs;
  AugmentationSet set;
  for (std::size_t m = 0; m < items.size(); ++m) {
    jobs.push_back(std::async(std::launch::async, [&, m] { return make_pair(*items[m], cfg, derive_seed(seed, m)); }));
    if (jobs.size() >= static_cast<std::size_t>(workers) || m + 1 == items.size()) {
      for (auto& j : jobs) {
        auto pair = j.get();
        set.samples.push_back(std::move(pair.a));
        set.samples.push_back(std::move(pair.b));
        const int k = static_cast<int>(set.samples.size());
        set.partner.push_back(k - 1);
        set.partner.push_back(k - 2);
      }
      jobs.clear();
    }
  }
  return set;
}

template <typename F>
void parallel_for(std::size_t n, int workers, F&& body) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::future<void>> jobs;
  for (std::size_t i = 0; i < n; ++i) {
    jobs.push_back(std::async(std::launch::async, [&body, i] {
      flush_denormals();
      body(i);
    }));
    if (jobs.size() >= static_cast<std::size_t>(workers)) {
      for (auto& j : jobs) j.get();
      jobs.clear();
    }
  }
  for (auto& j : jobs) j.get();
}

void require_nonempty(std::span<const SliceSample> data, Stage stage) {
  require(!data.empty(), ErrorKind::invalid_input, to_string(stage) + ": empty dataset");
}

}  // namespace

StageResult pretrain_global(std::span<const SliceSample> data, const StageConfig& cfg, const TrainOptions& opt,
                            const Checkpoint* init, const Checkpoint* resume) {
  StageRun run(Stage::global_pretrain, cfg, opt, init, resume);
  require_nonempty(data, Stage::global_pretrain);
  Model& model = run.model();
  const std::size_t levels = kHeadCount;

  for (int epoch = run.first_epoch(); epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(data, cfg.seed, epoch, cfg.samples_per_epoch);
    const auto batches = batches_of(order, cfg.batch_size, 2);
    require(!batches.empty(), ErrorKind::invalid_input, "global pre-training needs at least 2 slices per epoch");
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const AugmentationSet set =
          augmentation_set(data, batches[bi], opt.augmentation, derive_seed(cfg.seed, 0x6a0b, static_cast<std::uint64_t>(epoch), bi), opt.num_workers);
      const auto n = static_cast<Index>(set.samples.size());
      std::vector<UNetTrace<float>> traces(set.samples.size());
      std::vector<std::array<GlobalHeadCache<float>, kHeadCount>> caches(set.samples.size());
      std::array<Grid<float>, kHeadCount> emb;
      for (auto& e : emb) e.resize(n, opt.model.embed_dim);
      parallel_for(set.samples.size(), opt.num_workers, [&](std::size_t i) {
        traces[i] = model.encode(set.samples[i].image);
        for (std::size_t h = 0; h < levels; ++h) {
          const int level = kHeadLevels[h];
          emb[h].row(static_cast<Index>(i)) = model.global_project(level, traces[i].encoder(level), &caches[i][h]).transpose();
        }
      });
      std::array<Grid<float>, kHeadCount> grads;
      std::array<float, kHeadCount> per_level{};
      for (std::size_t h = 0; h < levels; ++h)
        per_level[h] = global_contrastive_level_loss<float>(emb[h], set.partner, opt.contrastive, &grads[h]);
      const float total = multiscale_global_loss<float>(per_level, opt.weights.global);

      run.adam().zero_grad();
      for (std::size_t i = 0; i < set.samples.size(); ++i) {
        UNetGrads<float> g;
        for (std::size_t h = 0; h < levels; ++h) {
          const auto w = static_cast<float>(opt.weights.global[h]);
          if (w == 0.0f) continue;
          const Vector<float> d = w * grads[h].row(static_cast<Index>(i)).transpose();
          g.add_encoder(kHeadLevels[h], model.global_project_backward(kHeadLevels[h], caches[i][h], d));
        }
        model.backward(traces[i], std::move(g), true);
      }
      run.adam().step();

      rec.loss += total;
      for (std::size_t h = 0; h < levels; ++h) rec.level[h] += per_level[h];
    }
    rec.loss /= static_cast<double>(batches.size());
    for (auto& l : rec.level) l /= static_cast<double>(batches.size());
    run.finish_epoch(rec);
    run.checkpoint_hook();
  }
  return {run.snapshot(), std::nullopt};
}

StageResult pretrain_local(std::span<const SliceSample> data, const Checkpoint* init, const StageConfig& cfg, const TrainOptions& opt,
                           const Checkpoint* resume) {
  StageRun run(Stage::local_pretrain, cfg, opt, init, resume);
  require_nonempty(data, Stage::local_pretrain);
  for (const auto& s : data)
    require(s.mask.has_value(), ErrorKind::invalid_input,
            "local pre-training met an unlabeled slice (" + s.volume_id + " " + to_string(s.view) + " " + std::to_string(s.slice_index) + ")");
  Model& model = run.model();

  for (int epoch = run.first_epoch(); epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(data, cfg.seed, epoch, cfg.samples_per_epoch);
    const auto batches = batches_of(order, cfg.batch_size, 1);
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const std::uint64_t batch_seed = derive_seed(cfg.seed, 0x10ca, static_cast<std::uint64_t>(epoch), bi);
      const AugmentationSet set = augmentation_set(data, batches[bi], opt.augmentation, batch_seed, opt.num_workers);
      const auto inv_n = 1.0f / static_cast<float>(set.samples.size());
      std::array<double, kHeadCount> per_level{};

      run.adam().zero_grad();
      for (std::size_t a = 0; a < set.samples.size(); ++a) {
        const SliceSample& s = set.samples[a];
        const auto trace = model.forward(s.image);
        UNetGrads<float> g;
        bool degenerate = false;
        for (std::size_t h = 0; h < kHeadCount; ++h) {
          const int level = kHeadLevels[h];
          LocalHeadCache<float> cache;
          const auto f = model.local_project(level, trace.decoder(level), &cache);
          Grid<float> grad;
          const auto r = local_supervised_level_loss<float>(f, *s.mask, opt.contrastive, derive_seed(batch_seed, a, h), &grad);
          degenerate |= r.degenerate;
          per_level[h] += r.value * inv_n;
          const auto w = static_cast<float>(opt.weights.local[h]);
          if (w == 0.0f || r.degenerate) continue;
          grad *= w * inv_n;
          g.add_decoder(level, model.local_project_backward(level, cache, grad));
        }
        rec.degenerate += degenerate;
        model.backward(trace, std::move(g), !cfg.freeze_encoder);
      }
      run.adam().step();

      rec.loss += multiscale_sum<double>(per_level, opt.weights.local);
      for (std::size_t h = 0; h < kHeadCount; ++h) rec.level[h] += per_level[h];
    }
    rec.loss /= static_cast<double>(batches.size());
    for (auto& l : rec.level) l /= static_cast<double>(batches.size());
    run.finish_epoch(rec);
    run.checkpoint_hook();
  }
  return {run.snapshot(), std::nullopt};
}

StageResult finetune(std::span<const SliceSample> data, const ValidationSet& val, const Checkpoint* init, const StageConfig& cfg,
                     const TrainOptions& opt, const Checkpoint* resume) {
  StageRun run(Stage::finetune, cfg, opt, init, resume);
  require_nonempty(data, Stage::finetune);
  for (const auto& s : data) {
    require(s.mask.has_value(), ErrorKind::invalid_input, "fine-tuning met an unlabeled slice from " + s.volume_id);
    if (opt.strict_views)
      require(s.view == ViewAxis::transaxial, ErrorKind::invalid_input,
              "fine-tuning uses transaxial slices only, got " + to_string(s.view) + " from " + s.volume_id);
  }
  Model& model = run.model();
  const AugmentationConfig aug = cfg.augment ? opt.augmentation.weak() : AugmentationConfig::disabled();
  std::optional<Checkpoint> best;

  for (int epoch = run.first_epoch(); epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(data, cfg.seed, epoch, cfg.samples_per_epoch);
    const auto batches = batches_of(order, cfg.batch_size, 1);
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& batch = batches[bi];
      const auto inv_b = 1.0f / static_cast<float>(batch.size());
      std::vector<SliceSample> samples(batch.size());
      parallel_for(batch.size(), opt.num_workers, [&](std::size_t k) {
        const SliceSample& src = data[batch[k]];
        samples[k] = aug.any_enabled() ? augment(src, aug, derive_seed(cfg.seed, 0xf17e, static_cast<std::uint64_t>(epoch), bi, k)) : src;
      });
      std::array<double, kHeadCount> per_level{};
      double batch_loss = 0.0;

      run.adam().zero_grad();
      for (const auto& s : samples) {
        const auto trace = model.forward(s.image);
        const auto logits = model.segmentation_logits(trace);
        SegLogits<float> grads;
        std::array<float, kHeadCount> levels{};
        batch_loss += deep_supervised_loss<float>(logits, *s.mask, opt.weights.dice, &grads, &levels) * inv_b;
        UNetGrads<float> g;
        for (std::size_t h = 0; h < kHeadCount; ++h) {
          per_level[h] += levels[h] * inv_b;
          if (grads[h].channels() == 0) continue;
          grads[h].data *= inv_b;
          const int level = kHeadLevels[h];
          g.add_decoder(level, model.segment_backward(level, trace.decoder(level), grads[h]));
        }
        model.backward(trace, std::move(g), true);
      }
      run.adam().step();

      rec.loss += batch_loss;
      for (std::size_t h = 0; h < kHeadCount; ++h) rec.level[h] += per_level[h];
    }
    rec.loss /= static_cast<double>(batches.size());
    for (auto& l : rec.level) l /= static_cast<double>(batches.size());
    rec.val_dice = validation_dice(model, val);
    auto& st = run.state();
    const bool improved = rec.val_dice > st.best_val || (val.volumes.empty());
    if (improved) {
      st.best_val = rec.val_dice;
      st.best_epoch = epoch;
    }
    run.finish_epoch(rec);
    if (improved) best = run.snapshot();
    run.checkpoint_hook();
  }
  Checkpoint last = run.snapshot();
  if (!best && run.state().history.empty()) best = last;
  return {std::move(last), std::move(best)};
}

}  // namespace mmgl
