#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mmgl/trainer.hpp"

namespace mmgl {
namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'M', 'M', 'G', 'L', 'C', 'K', 'P', 'T'};

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

json to_json(const ModelConfig& m) {
  return {{"in_channels", m.in_channels}, {"base_channels", m.base_channels}, {"n_classes", m.n_classes},
          {"embed_dim", m.embed_dim},     {"head_hidden", m.head_hidden},     {"local_dim", m.local_dim},
          {"local_stride", m.local_stride}, {"input_size", m.input_size},     {"head_nonlinearity", m.head_nonlinearity},
          {"seg_background_bias", m.seg_background_bias}};
}

ModelConfig model_config_from(const json& j) {
  ModelConfig m;
  m.in_channels = j.at("in_channels");
  m.base_channels = j.at("base_channels");
  m.n_classes = j.at("n_classes");
  m.embed_dim = j.at("embed_dim");
  m.head_hidden = j.at("head_hidden");
  m.local_dim = j.at("local_dim");
  m.local_stride = j.at("local_stride");
  m.input_size = j.at("input_size");
  m.head_nonlinearity = j.at("head_nonlinearity");
  m.seg_background_bias = j.at("seg_background_bias");
  return m;
}

json to_json(const StageConfig& s) {
  json views = json::array();
  for (auto v : s.views) views.push_back(to_string(v));
  json j = {{"stage", to_string(s.stage)},
            {"epochs", s.epochs},
            {"batch_size", s.batch_size},
            {"learning_rate", s.learning_rate},
            {"views", views},
            {"labeled_only", s.labeled_only},
            {"seed", s.seed},
            {"samples_per_epoch", s.samples_per_epoch},
            {"augment", s.augment},
            {"freeze_encoder", s.freeze_encoder}};
  j["init_checkpoint"] = s.init_checkpoint ? json(s.init_checkpoint->string()) : json(nullptr);
  return j;
}

StageConfig stage_config_from(const json& j) {
  StageConfig s;
  s.stage = parse_stage(j.at("stage"));
  s.epochs = j.at("epochs");
  s.batch_size = j.at("batch_size");
  s.learning_rate = j.at("learning_rate");
  s.views.clear();
  for (const auto& v : j.at("views")) s.views.push_back(parse_view(v));
  s.labeled_only = j.at("labeled_only");
  s.seed = j.at("seed");
  s.samples_per_epoch = j.at("samples_per_epoch");
  s.augment = j.at("augment");
  s.freeze_encoder = j.at("freeze_encoder");
  if (!j.at("init_checkpoint").is_null()) s.init_checkpoint = j.at("init_checkpoint").get<std::string>();
  return s;
}

json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"loss", r.loss}, {"level", r.level}, {"val_dice", r.val_dice}, {"degenerate", r.degenerate}};
}

EpochRecord epoch_record_from(const json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch");
  r.loss = j.at("loss");
  r.level = j.at("level");
  r.val_dice = j.at("val_dice");
  r.degenerate = j.at("degenerate");
  return r;
}

struct Tensor {
  std::string name;
  const Grid<float>* data;
};

template <typename T>
void put(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  require(pos + sizeof(T) <= in.size(), ErrorKind::corrupt_archive, "truncated checkpoint");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::uint64_t TrainState::digest() const {
  json h = json::array();
  for (const auto& r : history) h.push_back(to_json(r));
  const std::string s = h.dump();
  return fnv1a(s.data(), s.size());
}

bool parameters_equal(const Model& a, const Model& b) {
  auto pa = const_cast<Model&>(a).all_params();
  auto pb = const_cast<Model&>(b).all_params();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto& x = pa[i].param->value;
    const auto& y = pb[i].param->value;
    if (pa[i].name != pb[i].name || x.rows() != y.rows() || x.cols() != y.cols()) return false;
    if (std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<std::size_t>(x.size())) != 0) return false;
  }
  return true;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  // Parameters are only read; all_params() is non-const because it also serves the optimizer.
  auto params = const_cast<Model&>(ckpt.model).all_params();
  std::vector<Tensor> tensors;
  for (const auto& p : params) tensors.push_back({"param/" + p.name, &p.param->value});
  for (const auto& [name, m] : ckpt.optimizer) {
    tensors.push_back({"adam.m/" + name, &m.m});
    tensors.push_back({"adam.v/" + name, &m.v});
  }

  std::string blob;
  json table = json::array();
  for (const auto& t : tensors) {
    const std::size_t bytes = sizeof(float) * static_cast<std::size_t>(t.data->size());
    table.push_back({{"name", t.name}, {"rows", t.data->rows()}, {"cols", t.data->cols()}, {"offset", blob.size()}});
    blob.append(reinterpret_cast<const char*>(t.data->data()), bytes);
  }

  json history = json::array();
  for (const auto& r : ckpt.state.history) history.push_back(to_json(r));
  const json header = {{"stage", to_string(ckpt.stage)},
                       {"model_config", to_json(ckpt.model_config)},
                       {"stage_config", to_json(ckpt.stage_config)},
                       {"train_state",
                        {{"epoch", ckpt.state.epoch},
                         {"history", history},
                         {"optimizer_steps", ckpt.state.optimizer_steps},
                         {"best_val", ckpt.state.best_val},
                         {"best_epoch", ckpt.state.best_epoch},
                         {"digest", ckpt.state.digest()}}},
                       {"tensors", table},
                       {"blob_bytes", blob.size()},
                       {"blob_fnv1a", fnv1a(blob.data(), blob.size())}};
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  out += blob;

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), ErrorKind::io, "cannot write checkpoint " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  require(static_cast<bool>(f), ErrorKind::io, "short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::missing_file, "checkpoint " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string in = ss.str();

  require(in.size() >= sizeof(kMagic) && std::memcmp(in.data(), kMagic, sizeof(kMagic)) == 0, ErrorKind::corrupt_archive,
          path.string() + " is not a checkpoint");
  std::size_t pos = sizeof(kMagic);
  const auto version = take<std::uint32_t>(in, pos);
  require(version == kCheckpointVersion, ErrorKind::version_mismatch,
          "checkpoint version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  const auto header_len = take<std::uint64_t>(in, pos);
  require(header_len <= in.size() - pos, ErrorKind::corrupt_archive, "truncated checkpoint header");

  json header;
  try {
    header = json::parse(in.substr(pos, header_len));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::corrupt_archive, std::string("checkpoint header: ") + e.what());
  }
  pos += header_len;
  const std::string blob = in.substr(pos);

  try {
    require(header.at("blob_bytes").get<std::size_t>() == blob.size(), ErrorKind::corrupt_archive, "checkpoint payload size");
    require(header.at("blob_fnv1a").get<std::uint64_t>() == fnv1a(blob.data(), blob.size()), ErrorKind::corrupt_archive,
            "checkpoint payload checksum");

    Checkpoint c;
    c.stage = parse_stage(header.at("stage"));
    c.model_config = model_config_from(header.at("model_config"));
    if (expected)
      require(*expected == c.model_config, ErrorKind::config_mismatch, "checkpoint " + path.string() + " was trained with a different model config");
    c.stage_config = stage_config_from(header.at("stage_config"));
    const json& st = header.at("train_state");
    c.state.epoch = st.at("epoch");
    for (const auto& r : st.at("history")) c.state.history.push_back(epoch_record_from(r));
    c.state.optimizer_steps = st.at("optimizer_steps");
    c.state.best_val = st.at("best_val");
    c.state.best_epoch = st.at("best_epoch");
    require(st.at("digest").get<std::uint64_t>() == c.state.digest(), ErrorKind::corrupt_archive, "train state digest");

    c.model = Model(c.model_config);
    std::map<std::string, Grid<float>> tensors;
    for (const auto& t : header.at("tensors")) {
      const Index rows = t.at("rows"), cols = t.at("cols");
      const std::size_t offset = t.at("offset");
      const std::size_t bytes = sizeof(float) * static_cast<std::size_t>(rows * cols);
      require(offset + bytes <= blob.size(), ErrorKind::corrupt_archive, "tensor outside payload");
      Grid<float> g(rows, cols);
      std::memcpy(g.data(), blob.data() + offset, bytes);
      tensors.emplace(t.at("name").get<std::string>(), std::move(g));
    }
    for (auto& p : c.model.all_params()) {
      auto it = tensors.find("param/" + p.name);
      require(it != tensors.end(), ErrorKind::corrupt_archive, "missing parameter " + p.name);
      require(it->second.rows() == p.param->value.rows() && it->second.cols() == p.param->value.cols(),
              ErrorKind::config_mismatch, "parameter " + p.name + " has a different shape");
      p.param->value = it->second;
      tensors.erase(it);
    }
    for (auto& [name, g] : tensors) {
      const bool m = name.starts_with("adam.m/"), v = name.starts_with("adam.v/");
      require(m || v, ErrorKind::corrupt_archive, "unexpected tensor " + name);
      auto& slot = c.optimizer[name.substr(7)];
      (m ? slot.m : slot.v) = std::move(g);
    }
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::corrupt_archive, std::string("checkpoint header: ") + e.what());
  }
}

}  // namespace mmgl
