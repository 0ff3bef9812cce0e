#include "anyshift/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "anyshift/errors.hpp"
#include "anyshift/rng.hpp"
#include "anyshift/schemas.hpp"

namespace anyshift {

using nlohmann::json;

ShiftSpec joint_benchmark_shift(int n_classes) {
  std::vector<int> held_out;
  for (int c = n_classes / 2; c < n_classes; ++c) held_out.push_back(c);
  return ShiftSpec::joint({ShiftSpec::covariate(17, 0.5, 1.0, 0.0), ShiftSpec::label(held_out)});
}

TrainConfig default_config() {
  TrainConfig cfg;
  cfg.shift = joint_benchmark_shift(cfg.world.n_classes);
  return cfg;
}

json to_json(const TrainConfig& c) {
  json j;
  j["version"] = kConfigSchemaVersion;
  j["seeds"] = {{"world", c.seeds.world}, {"init", c.seeds.init}, {"train", c.seeds.train}, {"eval", c.seeds.eval}};
  j["world"] = {{"n_classes", c.world.n_classes},   {"subpops", c.world.subpops},
                {"d_x", c.world.d_x},               {"radius", c.world.radius},
                {"noise_scale", c.world.noise_scale}, {"min_separation", c.world.min_separation}};
  j["shift"] = to_json(c.shift);
  j["data"] = {{"pretrain_per_class", c.data.pretrain_per_class},
               {"train_per_class", c.data.train_per_class},
               {"test_per_class", c.data.test_per_class}};
  j["encoder"] = {{"hidden", c.encoder.hidden},       {"d", c.encoder.d},
                  {"vocab_size", c.encoder.vocab_size}, {"text_blocks", c.encoder.text_blocks},
                  {"heads", c.encoder.heads},         {"ffn_hidden", c.encoder.ffn_hidden},
                  {"logit_scale", c.encoder.logit_scale}};
  j["pretrain"] = {{"epochs", c.pretrain.epochs}, {"batch_size", c.pretrain.batch_size}, {"lr", c.pretrain.lr}};
  j["model"] = {{"prompt_len", c.model.prompt_len}, {"prompt_width", c.model.prompt_width},
                {"hidden", c.model.hidden},         {"heads", c.model.heads},
                {"ffn_hidden", c.model.ffn_hidden}, {"blocks", c.model.blocks}};
  j["train"] = {{"lr", c.lr},
                {"batch_size", c.batch_size},
                {"iterations", c.iterations},
                {"kl_weight", c.kl_weight},
                {"arm", to_string(c.arm)}};
  j["eval"] = {{"n_s", c.n_s}, {"n_t", c.n_t}, {"threads", c.threads}};
  return j;
}

namespace {

// Typed, path-aware access to one JSON object; rejects unknown keys.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("expected an object", path_.empty() ? "<root>" : path_);
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void read(const std::string& key, int& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) throw ConfigError("expected an integer", field(key));
      out = v->get<int>();
    }
  }
  void read(const std::string& key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<long long>() < 0)) {
        throw ConfigError("expected a nonnegative integer", field(key));
      }
      out = v->get<std::uint64_t>();
    }
  }
  void read(const std::string& key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) throw ConfigError("expected a number", field(key));
      out = v->get<double>();
    }
  }
  void read(const std::string& key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError("expected a string", field(key));
      out = v->get<std::string>();
    }
  }
  const json* take(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  Fields sub(const std::string& key) {
    static const json empty = json::object();
    const json* v = take(key);
    return Fields(v ? *v : empty, field(key));
  }
  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError("unknown key", field(item.key()));
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& msg, const std::string& field) {
  if (!ok) throw ConfigError(msg, field);
}

}  // namespace

TrainConfig config_from_json(const json& j) {
  TrainConfig c = default_config();
  Fields root(j, "");
  int version = kConfigSchemaVersion;
  root.read("version", version);
  require(version == kConfigSchemaVersion, "unsupported config version " + std::to_string(version), "version");
  {
    Fields f = root.sub("seeds");
    f.read("world", c.seeds.world);
    f.read("init", c.seeds.init);
    f.read("train", c.seeds.train);
    f.read("eval", c.seeds.eval);
    f.finish();
  }
  {
    Fields f = root.sub("world");
    f.read("n_classes", c.world.n_classes);
    f.read("subpops", c.world.subpops);
    f.read("d_x", c.world.d_x);
    f.read("radius", c.world.radius);
    f.read("noise_scale", c.world.noise_scale);
    f.read("min_separation", c.world.min_separation);
    f.finish();
    // The default shift holds out half the classes of the configured world.
    if (!j.contains("shift")) c.shift = joint_benchmark_shift(c.world.n_classes);
  }
  if (const json* s = root.take("shift")) c.shift = shift_from_json(*s);
  {
    Fields f = root.sub("data");
    f.read("pretrain_per_class", c.data.pretrain_per_class);
    f.read("train_per_class", c.data.train_per_class);
    f.read("test_per_class", c.data.test_per_class);
    f.finish();
  }
  {
    Fields f = root.sub("encoder");
    f.read("hidden", c.encoder.hidden);
    f.read("d", c.encoder.d);
    f.read("vocab_size", c.encoder.vocab_size);
    f.read("text_blocks", c.encoder.text_blocks);
    f.read("heads", c.encoder.heads);
    f.read("ffn_hidden", c.encoder.ffn_hidden);
    f.read("logit_scale", c.encoder.logit_scale);
    f.finish();
  }
  {
    Fields f = root.sub("pretrain");
    f.read("epochs", c.pretrain.epochs);
    f.read("batch_size", c.pretrain.batch_size);
    f.read("lr", c.pretrain.lr);
    f.finish();
  }
  {
    Fields f = root.sub("model");
    f.read("prompt_len", c.model.prompt_len);
    f.read("prompt_width", c.model.prompt_width);
    f.read("hidden", c.model.hidden);
    f.read("heads", c.model.heads);
    f.read("ffn_hidden", c.model.ffn_hidden);
    f.read("blocks", c.model.blocks);
    f.finish();
  }
  {
    Fields f = root.sub("train");
    f.read("lr", c.lr);
    f.read("batch_size", c.batch_size);
    f.read("iterations", c.iterations);
    f.read("kl_weight", c.kl_weight);
    std::string arm = to_string(c.arm);
    f.read("arm", arm);
    c.arm = arm_from_string(arm);
    f.finish();
  }
  {
    Fields f = root.sub("eval");
    f.read("n_s", c.n_s);
    f.read("n_t", c.n_t);
    f.read("threads", c.threads);
    f.finish();
  }
  root.finish();
  validate(c);
  return c;
}

void validate(const TrainConfig& c) {
  require(c.world.n_classes >= 2, "must be >= 2", "world.n_classes");
  require(c.world.subpops >= 1, "must be >= 1", "world.subpops");
  require(c.world.d_x >= 2, "must be >= 2", "world.d_x");
  require(c.world.radius > 0.0, "must be > 0", "world.radius");
  require(c.world.noise_scale > 0.0, "must be > 0", "world.noise_scale");
  require(c.world.min_separation >= 0.0, "must be >= 0", "world.min_separation");
  require(c.data.pretrain_per_class >= 1, "must be >= 1", "data.pretrain_per_class");
  require(c.data.train_per_class >= 1, "must be >= 1", "data.train_per_class");
  require(c.data.test_per_class >= 1, "must be >= 1", "data.test_per_class");
  require(c.encoder.hidden >= 1, "must be >= 1", "encoder.hidden");
  require(c.encoder.d >= 2, "must be >= 2", "encoder.d");
  require(c.encoder.vocab_size > kTemplateTokens, "must exceed the template token count", "encoder.vocab_size");
  require(c.encoder.text_blocks >= 1, "must be >= 1", "encoder.text_blocks");
  require(c.encoder.heads >= 1 && c.encoder.d % c.encoder.heads == 0, "must divide encoder.d", "encoder.heads");
  require(c.encoder.ffn_hidden >= 1, "must be >= 1", "encoder.ffn_hidden");
  require(c.encoder.logit_scale > 0.0, "must be > 0", "encoder.logit_scale");
  require(c.pretrain.epochs >= 0, "must be >= 0", "pretrain.epochs");
  require(c.pretrain.batch_size >= 2, "must be >= 2", "pretrain.batch_size");
  require(c.pretrain.lr > 0.0, "must be > 0", "pretrain.lr");
  require(c.model.prompt_len >= 1, "must be >= 1", "model.prompt_len");
  require(c.model.prompt_width >= 1, "must be >= 1", "model.prompt_width");
  require(c.model.hidden >= 2, "must be >= 2", "model.hidden");
  require(c.model.heads >= 1 && c.model.hidden % c.model.heads == 0, "must divide model.hidden", "model.heads");
  require(c.model.ffn_hidden >= 1, "must be >= 1", "model.ffn_hidden");
  require(c.model.blocks >= 1, "must be >= 1", "model.blocks");
  require(c.lr > 0.0, "must be > 0", "train.lr");
  require(c.batch_size >= 1, "must be >= 1", "train.batch_size");
  require(c.iterations >= 0, "must be >= 0", "train.iterations");
  require(c.kl_weight >= 0.0, "must be >= 0", "train.kl_weight");
  require(c.n_s >= 1, "must be >= 1", "eval.n_s");
  require(c.n_t >= 1, "must be >= 1", "eval.n_t");
  require(c.threads >= 1, "must be >= 1", "eval.threads");
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value", assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &j;
  std::stringstream ss(path);
  std::string key;
  std::vector<std::string> keys;
  while (std::getline(ss, key, '.')) keys.push_back(key);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const std::string& k = keys[i];
    const bool last = i + 1 == keys.size();
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(k);
      } catch (const std::exception&) {
        throw ConfigError("expected an array index", path);
      }
      if (idx >= node->size()) throw ConfigError("array index out of range", path);
      node = &(*node)[idx];
    } else {
      if (!node->is_object() && !node->is_null()) throw ConfigError("cannot descend into a scalar", path);
      node = &(*node)[k];
    }
    if (last) *node = value;
  }
}

WorldParams world_params(const TrainConfig& cfg) {
  WorldParams p = cfg.world;
  p.seed = cfg.seeds.world;
  return p;
}

EncoderConfig encoder_config(const TrainConfig& cfg) {
  EncoderConfig e = cfg.encoder;
  e.d_x = cfg.world.d_x;
  e.seed = derive_seed(cfg.seeds.init, StreamPurpose::EncoderInit);
  return e;
}

PretrainConfig pretrain_config(const TrainConfig& cfg) {
  PretrainConfig p = cfg.pretrain;
  p.seed = derive_seed(cfg.seeds.init, StreamPurpose::Pretrain);
  return p;
}

ModelConfig model_config(const TrainConfig& cfg) {
  ModelConfig m;
  m.net = cfg.model;
  m.net.feature_width = cfg.encoder.d;
  m.net.seed = derive_seed(cfg.seeds.init, StreamPurpose::NetInit);
  m.adam.lr = cfg.lr;
  m.kl_weight = cfg.kl_weight;
  m.arm = cfg.arm;
  return m;
}

Experiment build_experiment(const TrainConfig& cfg) {
  validate(cfg);
  Experiment exp;
  exp.cfg = cfg;
  const BaseWorld world = make_base_world(world_params(cfg));
  exp.task = apply_shift(world, cfg.shift);

  std::vector<std::string> identities;
  for (int c = 0; c < world.n_classes(); ++c) identities.push_back(fine_class_identity(c));
  for (int k = 0; k < world.n_superclasses(); ++k) identities.push_back(superclass_identity(k));
  const auto names =
      make_class_names(identities, derive_seed(cfg.seeds.world, StreamPurpose::ClassNames), cfg.encoder.vocab_size);
  exp.fine_names.assign(names.begin(), names.begin() + world.n_classes());
  exp.super_names.assign(names.begin() + world.n_classes(), names.end());

  const auto base = apply_shift(world, ShiftSpec::identity());
  const auto n_train = static_cast<int>(exp.task.train.label_classes(world).size());
  const auto n_test = static_cast<int>(exp.task.test.label_classes(world).size());
  exp.pretrain_set = sample_dataset(world, base.train, cfg.data.pretrain_per_class * world.n_classes(),
                                    derive_seed(cfg.seeds.world, StreamPurpose::Sampling, 0));
  exp.train_set = sample_dataset(world, exp.task.train, cfg.data.train_per_class * n_train,
                                 derive_seed(cfg.seeds.world, StreamPurpose::Sampling, 1));
  exp.test_set = sample_dataset(world, exp.task.test, cfg.data.test_per_class * n_test,
                                derive_seed(cfg.seeds.world, StreamPurpose::Sampling, 2));
  return exp;
}

std::vector<ClassName> names_for(const Experiment& exp, const std::vector<int>& label_ids, bool superclass) {
  const auto& pool = superclass ? exp.super_names : exp.fine_names;
  std::vector<ClassName> out;
  for (int id : label_ids) {
    if (id < 0 || id >= static_cast<int>(pool.size())) throw IndexError("no class name for label " + std::to_string(id));
    out.push_back(pool[static_cast<std::size_t>(id)]);
  }
  return out;
}

PretrainOutcome pretrain_encoders(const Experiment& exp) {
  PretrainResult r = pretrain_contrastive(exp.pretrain_set, exp.fine_names, encoder_config(exp.cfg),
                                          pretrain_config(exp.cfg));
  return {std::make_shared<const FrozenEncoders>(std::move(r.encoders)), std::move(r.loss_curve)};
}

ClassSet train_class_set(const Experiment& exp, const FrozenEncoders& enc) {
  const auto ids = exp.task.train.label_classes(exp.task.world);
  return make_class_set(enc, ids, names_for(exp, ids, exp.task.train.superclass_labels));
}

namespace {

std::string nan_dump(const TrainState& state, const std::vector<const RawExample*>& batch, const LossBreakdown& lb,
                     int step) {
  std::ostringstream os;
  os << "non-finite training loss at step " << step << " (total " << lb.total << ", ce " << lb.ce << ", kl " << lb.kl
     << ")\nbatch labels:";
  for (const RawExample* ex : batch) os << ' ' << ex->y;
  os << "\nparameter norms:\n";
  for (const auto& e : state.registry().entries()) os << "  " << e.name << ' ' << e.tensor.value().norm() << '\n';
  return os.str();
}

}  // namespace

std::vector<LossPoint> train(TrainState& state, const Dataset& train_set, const ClassSet& classes,
                             const TrainConfig& cfg, const StepCallback& on_step) {
  if (train_set.empty()) throw InputError("train: empty training split");
  std::vector<LossPoint> curve;
  curve.reserve(static_cast<std::size_t>(cfg.iterations));
  const std::size_t n = train_set.size();
  const std::size_t b = std::min(n, static_cast<std::size_t>(cfg.batch_size));
  std::vector<std::size_t> order(n);
  const auto first = static_cast<int>(state.optimizer().steps_taken());
  for (int k = 0; k < cfg.iterations; ++k) {
    const int step = first + k;
    auto batch_rng = make_stream(cfg.seeds.train, StreamPurpose::TrainBatch, static_cast<std::uint64_t>(step));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<const RawExample*> batch;
    batch.reserve(b);
    for (std::size_t i = 0; i < b; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n - 1);
      std::swap(order[i], order[pick(batch_rng)]);
      batch.push_back(&train_set[order[i]]);
    }
    auto noise_rng = make_stream(cfg.seeds.train, StreamPurpose::TrainNoise, static_cast<std::uint64_t>(step));
    const TrainNoise noise = draw_train_noise(state.net().cfg, noise_rng);

    state.registry().zero_grad();
    Tape tape;
    LossBreakdown lb;
    {
      TapeScope scope(tape);
      lb = forward_train(state, batch, classes, noise);
    }
    if (!std::isfinite(lb.total) || !std::isfinite(lb.kl) || !std::isfinite(lb.ce)) {
      throw NumericError(nan_dump(state, batch, lb, step));
    }
    tape.backward(lb.loss);
    state.optimizer().step(state.registry());
    curve.push_back({step, lb.total, lb.ce, lb.kl});
    if (on_step) on_step(curve.back());
  }
  return curve;
}

std::vector<EvalSplit> eval_splits(const Experiment& exp, const FrozenEncoders& enc) {
  const auto& task = exp.task;
  const bool super = task.test.superclass_labels;
  std::vector<EvalSplit> out;
  const auto subset = [&](const std::vector<int>& ids) {
    const std::set<int> keep(ids.begin(), ids.end());
    Dataset ds;
    for (const auto& ex : exp.test_set) {
      if (keep.count(ex.y)) ds.push_back(ex);
    }
    return ds;
  };
  const auto newc = task.new_classes();
  if (!super && !newc.empty()) {
    const auto basec = task.base_classes();
    out.push_back({"base", subset(basec), make_class_set(enc, basec, names_for(exp, basec, false))});
    out.push_back({"new", subset(newc), make_class_set(enc, newc, names_for(exp, newc, false))});
  }
  const auto all = task.test.label_classes(task.world);
  out.push_back({"all", exp.test_set, make_class_set(enc, all, names_for(exp, all, super))});
  return out;
}

std::vector<char> predict_split(const TrainState& state, const EvalSplit& split, std::size_t split_index,
                                const TrainConfig& cfg, int threads) {
  const std::size_t n = split.examples.size();
  std::vector<char> correct(n, 0);
  PredictOptions opts;
  opts.n_s = cfg.n_s;
  opts.n_t = cfg.n_t;
  const auto run = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < n; i += stride) {
      auto rng = make_stream(cfg.seeds.eval, StreamPurpose::EvalNoise, split_index, i);
      const RawExample& ex = split.examples[i];
      const Prediction p = predict_arm(state, ex, split.classes, opts, rng);
      Index best = 0;
      p.probs.maxCoeff(&best);
      correct[i] = split.classes.label_ids[static_cast<std::size_t>(best)] == ex.y;
    }
  };
  const auto t = static_cast<std::size_t>(std::max(1, threads));
  if (t == 1 || n < 2) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < t; ++w) pool.emplace_back(run, w, t);
    for (auto& th : pool) th.join();
  }
  return correct;
}

EvalResult evaluate(const TrainState& state, const std::vector<EvalSplit>& splits, const TrainConfig& cfg) {
  EvalResult r;
  for (std::size_t s = 0; s < splits.size(); ++s) {
    SplitMetrics m;
    m.name = splits[s].name;
    m.n = splits[s].examples.size();
    if (m.n > 0) {
      const auto flags = predict_split(state, splits[s], s, cfg, cfg.threads);
      std::size_t hits = 0;
      for (char f : flags) hits += f ? 1 : 0;
      m.accuracy = static_cast<double>(hits) / static_cast<double>(m.n);
    }
    r.splits.push_back(m);
  }
  std::optional<double> base, fresh;
  for (const auto& m : r.splits) {
    if (m.name == "base") base = m.accuracy;
    if (m.name == "new") fresh = m.accuracy;
  }
  if (base && fresh) r.harmonic_mean = harmonic_mean(*base, *fresh);
  return r;
}

double harmonic_mean(double a, double b) {
  if (!(a >= 0.0) || !(b >= 0.0) || !std::isfinite(a) || !std::isfinite(b)) {
    throw InputError("harmonic_mean: inputs must be finite and nonnegative");
  }
  if (a + b == 0.0) return 0.0;
  return 2.0 * a * b / (a + b);
}

void save_checkpoint(const std::string& path, const TrainState& state, const TrainConfig& cfg) {
  TensorArchive ar;
  ar.header["format"] = "anyshift.checkpoint/v1";
  ar.header["config"] = to_json(cfg);
  ar.header["steps"] = state.optimizer().steps_taken();
  state.encoders().save(ar);
  state.net().save(ar);
  const auto& entries = state.registry().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    ar.add("adam/m/" + entries[i].name, Tensor(state.optimizer().first_moments()[i]));
    ar.add("adam/v/" + entries[i].name, Tensor(state.optimizer().second_moments()[i]));
  }
  save_archive(path, ar);
}

std::unique_ptr<TrainState> load_checkpoint(const std::string& path, TrainConfig* cfg_out) {
  const TensorArchive ar = load_archive(path);
  if (ar.header.value("format", "") != "anyshift.checkpoint/v1") throw InputError(path + ": not a checkpoint");
  const TrainConfig cfg = config_from_json(ar.header.at("config"));
  auto enc = std::make_shared<const FrozenEncoders>(FrozenEncoders::load(ar));
  auto state = std::make_unique<TrainState>(enc, model_config(cfg), InferenceNetParams::load(ar));
  const auto& entries = state->registry().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    state->optimizer().first_moments()[i] = ar.get("adam/m/" + entries[i].name).value();
    state->optimizer().second_moments()[i] = ar.get("adam/v/" + entries[i].name).value();
  }
  state->optimizer().set_steps_taken(ar.header.at("steps").get<long>());
  if (cfg_out) *cfg_out = cfg;
  return state;
}

void save_dataset(const std::string& path, const Dataset& ds, const json& header) {
  if (ds.empty()) throw InputError("save_dataset: empty dataset");
  const auto n = static_cast<Index>(ds.size());
  Matrix x(n, ds.front().x.size());
  Matrix labels(n, 3);
  for (Index i = 0; i < n; ++i) {
    const auto& ex = ds[static_cast<std::size_t>(i)];
    x.row(i) = ex.x;
    labels(i, 0) = ex.y;
    labels(i, 1) = ex.subpop;
    labels(i, 2) = ex.domain;
  }
  TensorArchive ar;
  ar.header = header;
  ar.add("x", Tensor(std::move(x)));
  ar.add("labels", Tensor(std::move(labels)));
  save_archive(path, ar);
}

Dataset load_dataset(const std::string& path, json* header_out) {
  const TensorArchive ar = load_archive(path);
  const Matrix& x = ar.get("x").value();
  const Matrix& labels = ar.get("labels").value();
  if (labels.rows() != x.rows() || labels.cols() != 3) throw DimensionError(path + ": labels do not match inputs");
  Dataset ds;
  ds.reserve(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < x.rows(); ++i) {
    ds.push_back({x.row(i), static_cast<int>(labels(i, 0)), static_cast<int>(labels(i, 1)),
                  static_cast<int>(labels(i, 2))});
  }
  if (header_out) *header_out = ar.header;
  return ds;
}

json dataset_header(const Experiment& exp, const std::string& role) {
  json h;
  h["format"] = "anyshift.dataset/v1";
  h["role"] = role;
  h["world_seed"] = exp.cfg.seeds.world;
  h["shift"] = to_json(exp.cfg.shift);
  const BaseWorld& world = exp.task.world;
  std::vector<int> ids;
  bool super = false;
  if (role == "train") {
    ids = exp.task.train.label_classes(world);
    super = exp.task.train.superclass_labels;
  } else if (role == "test") {
    ids = exp.task.test.label_classes(world);
    super = exp.task.test.superclass_labels;
  } else {
    for (int c = 0; c < world.n_classes(); ++c) ids.push_back(c);
  }
  json names = json::array();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const ClassName n = names_for(exp, {ids[i]}, super).front();
    names.push_back({{"label", ids[i]}, {"identity", n.identity}, {"tokens", n.token_ids}});
  }
  h["class_names"] = names;
  return h;
}

json loss_curve_json(const std::vector<LossPoint>& curve) {
  json steps = json::array(), total = json::array(), ce = json::array(), kl = json::array();
  for (const auto& p : curve) {
    steps.push_back(p.step);
    total.push_back(p.total);
    ce.push_back(p.ce);
    kl.push_back(p.kl);
  }
  return {{"step", steps}, {"loss_total", total}, {"loss_ce", ce}, {"loss_kl", kl}};
}

namespace {

// Shortest round-trip decimal form.
std::string num(double v) { return json(v).dump(); }

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json splits_json(const EvalResult& eval) {
  json splits = json::object();
  for (const auto& m : eval.splits) splits[m.name] = {{"n", m.n}, {"accuracy", optional_number(m.accuracy)}};
  return splits;
}

}  // namespace

std::string loss_curve_csv(const std::vector<LossPoint>& curve) {
  std::ostringstream os;
  os << "step,loss_total,loss_ce,loss_kl\n";
  for (const auto& p : curve) os << p.step << ',' << num(p.total) << ',' << num(p.ce) << ',' << num(p.kl) << '\n';
  return os.str();
}

json metrics_report(const std::string& run, const TrainConfig& cfg, Arm arm, const EvalResult& eval,
                    const std::vector<LossPoint>& curve, const ShiftDiagnostics& diag,
                    std::uint64_t encoder_checksum) {
  json j;
  j["schema"] = kReportSchemaId;
  j["run"] = run;
  j["arm"] = to_string(arm);
  j["seeds"] = {{"world", cfg.seeds.world}, {"init", cfg.seeds.init}, {"train", cfg.seeds.train},
                {"eval", cfg.seeds.eval}};
  j["config"] = to_json(cfg);
  j["splits"] = splits_json(eval);
  j["harmonic_mean"] = optional_number(eval.harmonic_mean);
  j["loss_curve"] = loss_curve_json(curve);
  j["shift_diagnostics"] = to_json(diag);
  j["encoder_checksum"] = hex64(encoder_checksum);
  return j;
}

json ablate(const Experiment& exp, const std::shared_ptr<const FrozenEncoders>& enc, const std::vector<Arm>& arms) {
  const auto splits = eval_splits(exp, *enc);
  const ClassSet classes = train_class_set(exp, *enc);
  json rows = json::array();
  for (Arm arm : arms) {
    TrainConfig cfg = exp.cfg;
    cfg.arm = arm;
    TrainState state(enc, model_config(cfg));
    std::vector<LossPoint> curve;
    if (arm != Arm::ZeroShot) curve = train(state, exp.train_set, classes, cfg);
    const EvalResult eval = evaluate(state, splits, cfg);
    json row;
    row["arm"] = to_string(arm);
    row["splits"] = splits_json(eval);
    row["harmonic_mean"] = optional_number(eval.harmonic_mean);
    row["final_loss"] = curve.empty() ? json(nullptr) : json(curve.back().total);
    rows.push_back(row);
  }
  json j;
  j["schema"] = "anyshift.ablation/v1";
  j["seeds"] = {{"world", exp.cfg.seeds.world}, {"init", exp.cfg.seeds.init}, {"train", exp.cfg.seeds.train},
                {"eval", exp.cfg.seeds.eval}};
  j["config"] = to_json(exp.cfg);
  j["encoder_checksum"] = hex64(enc->checksum());
  j["arms"] = rows;
  return j;
}

std::string reports_to_csv(const std::vector<std::pair<std::string, json>>& reports) {
  std::ostringstream os;
  os << "run,split,metric,value\n";
  const auto cell = [](const json& v) { return v.is_null() ? std::string() : v.dump(); };
  for (const auto& [run, doc] : reports) {
    for (const auto& [split, m] : doc.at("splits").items()) {
      os << run << ',' << split << ",accuracy," << cell(m.at("accuracy")) << '\n';
      os << run << ',' << split << ",n," << cell(m.at("n")) << '\n';
    }
    if (doc.contains("harmonic_mean")) os << run << ",base_new,harmonic_mean," << cell(doc.at("harmonic_mean")) << '\n';
  }
  return os.str();
}

namespace {

bool has_type(const json& v, const std::string& t) {
  if (t == "object") return v.is_object();
  if (t == "array") return v.is_array();
  if (t == "string") return v.is_string();
  if (t == "number") return v.is_number();
  if (t == "integer") return v.is_number_integer() || (v.is_number_float() && std::floor(v.get<double>()) == v.get<double>());
  if (t == "boolean") return v.is_boolean();
  if (t == "null") return v.is_null();
  return false;
}

void check(const json& v, const json& s, const std::string& path, std::vector<std::string>& errs) {
  if (s.contains("type")) {
    const json& t = s["type"];
    bool ok = false;
    if (t.is_string()) ok = has_type(v, t.get<std::string>());
    for (const auto& alt : t.is_array() ? t : json::array()) ok = ok || has_type(v, alt.get<std::string>());
    if (!ok) {
      errs.push_back(path + ": expected type " + t.dump());
      return;
    }
  }
  if (s.contains("const") && v != s["const"]) errs.push_back(path + ": expected " + s["const"].dump());
  if (s.contains("enum")) {
    const auto& e = s["enum"];
    if (std::find(e.begin(), e.end(), v) == e.end()) errs.push_back(path + ": value not in enum");
  }
  if (v.is_number()) {
    if (s.contains("minimum") && v.get<double>() < s["minimum"].get<double>()) errs.push_back(path + ": below minimum");
    if (s.contains("maximum") && v.get<double>() > s["maximum"].get<double>()) errs.push_back(path + ": above maximum");
  }
  if (v.is_object()) {
    for (const auto& r : s.value("required", json::array())) {
      if (!v.contains(r.get<std::string>())) errs.push_back(path + ": missing " + r.get<std::string>());
    }
    const json props = s.value("properties", json::object());
    for (const auto& [k, sub] : v.items()) {
      if (props.contains(k)) {
        check(sub, props[k], path + "/" + k, errs);
      } else if (s.contains("additionalProperties")) {
        const json& ap = s["additionalProperties"];
        if (ap.is_boolean() && !ap.get<bool>()) {
          errs.push_back(path + ": unexpected key " + k);
        } else if (ap.is_object()) {
          check(sub, ap, path + "/" + k, errs);
        }
      }
    }
  }
  if (v.is_array()) {
    if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>()) errs.push_back(path + ": too few items");
    if (s.contains("items")) {
      for (std::size_t i = 0; i < v.size(); ++i) check(v[i], s["items"], path + "/" + std::to_string(i), errs);
    }
  }
}

}  // namespace

json metrics_report_schema() { return json::parse(schemas::kMetricsReport); }

json config_schema() { return json::parse(schemas::kConfig); }

std::vector<std::string> validate_json(const json& doc, const json& schema) {
  std::vector<std::string> errs;
  check(doc, schema, "", errs);
  return errs;
}

}  // namespace anyshift
