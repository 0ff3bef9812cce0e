// Command-line driver: world / gen / pretrain / train / eval / ablate /
// report / selftest. Exit codes: 0 ok, 1 validation or runtime failure,
// 2 usage.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "anyshift/errors.hpp"
#include "anyshift/experiment.hpp"
#include "anyshift/selftest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace anyshift;

namespace {

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string dir = "run";
};

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Failure("cannot open " + p.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw Failure(p.string() + ": invalid JSON");
  return j;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Failure("cannot write " + p.string());
  out << text;
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

// --config, else <dir>/config.json, else defaults; then --set and --seed.
TrainConfig resolve_config(const Options& o) {
  json j = json::object();
  const fs::path stored = fs::path(o.dir) / "config.json";
  if (!o.config_path.empty()) {
    j = read_json_file(o.config_path);
  } else if (fs::exists(stored)) {
    j = read_json_file(stored);
  }
  for (const auto& s : o.overrides) apply_override(j, s);
  if (o.seed) {
    for (const char* k : {"world", "init", "train", "eval"}) j["seeds"][k] = *o.seed;
  }
  return config_from_json(j);
}

fs::path data_path(const Options& o, const std::string& role) { return fs::path(o.dir) / "data" / (role + ".aspd"); }

// Experiment whose datasets come from <dir>/data, checked against the config.
Experiment load_experiment(const Options& o, const TrainConfig& cfg) {
  Experiment exp = build_experiment(cfg);
  for (const auto& [role, target] : {std::pair<std::string, Dataset*>{"pretrain", &exp.pretrain_set},
                                     {"train", &exp.train_set},
                                     {"test", &exp.test_set}}) {
    const fs::path p = data_path(o, role);
    if (!fs::exists(p)) throw Failure("missing dataset " + p.string() + " (run gen first)");
    json header;
    *target = load_dataset(p.string(), &header);
    if (header.value("world_seed", std::uint64_t{0}) != cfg.seeds.world || header.value("shift", json()) != to_json(cfg.shift)) {
      throw Failure(p.string() + " was generated from a different world seed or shift");
    }
  }
  return exp;
}

int cmd_world(const Options& o) {
  const TrainConfig cfg = resolve_config(o);
  const BaseWorld world = make_base_world(world_params(cfg));
  double min_dist = std::numeric_limits<double>::infinity();
  for (Index a = 0; a < world.means.rows(); ++a) {
    for (Index b = a + 1; b < world.means.rows(); ++b) {
      min_dist = std::min(min_dist, (world.means.row(a) - world.means.row(b)).norm());
    }
  }
  json j = to_json(cfg)["world"];
  j["seed"] = cfg.seeds.world;
  j["components"] = world.means.rows();
  j["min_pairwise_distance"] = min_dist;
  j["superclass_map"] = world.superclass_map;
  write_json(fs::path(o.dir) / "world.json", j);
  write_json(fs::path(o.dir) / "config.json", to_json(cfg));
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_gen(const Options& o) {
  const TrainConfig cfg = resolve_config(o);
  const Experiment exp = build_experiment(cfg);
  fs::create_directories(fs::path(o.dir) / "data");
  save_dataset(data_path(o, "pretrain").string(), exp.pretrain_set, dataset_header(exp, "pretrain"));
  save_dataset(data_path(o, "train").string(), exp.train_set, dataset_header(exp, "train"));
  save_dataset(data_path(o, "test").string(), exp.test_set, dataset_header(exp, "test"));
  const json diag = to_json(diagnose_shift(exp.train_set, exp.test_set));
  write_json(fs::path(o.dir) / "data" / "diagnostics.json", diag);
  write_json(fs::path(o.dir) / "config.json", to_json(cfg));
  std::cout << "pretrain " << exp.pretrain_set.size() << ", train " << exp.train_set.size() << ", test "
            << exp.test_set.size() << " examples written to " << (fs::path(o.dir) / "data").string() << "\n";
  return 0;
}

fs::path encoders_path(const Options& o) { return fs::path(o.dir) / "encoders.aspt"; }
fs::path checkpoint_path(const Options& o) { return fs::path(o.dir) / "checkpoint.aspt"; }

std::shared_ptr<const FrozenEncoders> load_encoders(const Options& o) {
  const fs::path p = encoders_path(o);
  if (!fs::exists(p)) throw Failure("missing encoders " + p.string() + " (run pretrain first)");
  return std::make_shared<const FrozenEncoders>(FrozenEncoders::load(load_archive(p.string())));
}

int cmd_pretrain(const Options& o) {
  const TrainConfig cfg = resolve_config(o);
  const Experiment exp = load_experiment(o, cfg);
  const PretrainOutcome out = pretrain_encoders(exp);
  TensorArchive ar;
  ar.header["format"] = "anyshift.encoders/v1";
  ar.header["pretrain"] = to_json(pretrain_config(cfg));
  ar.header["d"] = cfg.encoder.d;
  ar.header["d_x"] = cfg.world.d_x;
  ar.header["vocab_size"] = cfg.encoder.vocab_size;
  ar.header["logit_scale"] = cfg.encoder.logit_scale;
  out.encoders->save(ar);
  save_archive(encoders_path(o).string(), ar);
  std::ostringstream csv;
  csv << "step,loss\n";
  for (std::size_t i = 0; i < out.loss_curve.size(); ++i) csv << i << ',' << json(out.loss_curve[i]).dump() << '\n';
  write_text(fs::path(o.dir) / "pretrain_loss.csv", csv.str());
  std::vector<int> all;
  for (int c = 0; c < cfg.world.n_classes; ++c) all.push_back(c);
  std::cout << "zero-shot accuracy on the pretraining set: "
            << zero_shot_accuracy(*out.encoders, exp.pretrain_set, exp.fine_names, all) << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  const TrainConfig cfg = resolve_config(o);
  const Experiment exp = load_experiment(o, cfg);
  const auto enc = load_encoders(o);
  TrainState state(enc, model_config(cfg));
  const ClassSet classes = train_class_set(exp, *enc);
  const int every = std::max(1, cfg.iterations / 10);
  const auto curve = train(state, exp.train_set, classes, cfg, [&](const LossPoint& p) {
    if ((p.step + 1) % every == 0) {
      std::cout << "step " << p.step + 1 << " loss " << p.total << " ce " << p.ce << " kl " << p.kl << "\n";
    }
  });
  save_checkpoint(checkpoint_path(o).string(), state, cfg);
  write_text(fs::path(o.dir) / "loss_curve.csv", loss_curve_csv(curve));
  write_json(fs::path(o.dir) / "loss_curve.json", loss_curve_json(curve));
  return 0;
}

std::vector<LossPoint> read_curve(const fs::path& p) {
  std::vector<LossPoint> curve;
  if (!fs::exists(p)) return curve;
  const json j = read_json_file(p);
  for (std::size_t i = 0; i < j.at("step").size(); ++i) {
    curve.push_back({j["step"][i].get<int>(), j["loss_total"][i].get<double>(), j["loss_ce"][i].get<double>(),
                     j["loss_kl"][i].get<double>()});
  }
  return curve;
}

int cmd_eval(const Options& o) {
  if (!fs::exists(checkpoint_path(o))) throw Failure("missing checkpoint " + checkpoint_path(o).string());
  TrainConfig stored;
  auto state = load_checkpoint(checkpoint_path(o).string(), &stored);
  TrainConfig cfg = resolve_config(o);
  // Only evaluation settings may differ from the checkpoint's training run.
  TrainConfig eval_cfg = stored;
  eval_cfg.seeds.eval = cfg.seeds.eval;
  eval_cfg.n_s = cfg.n_s;
  eval_cfg.n_t = cfg.n_t;
  eval_cfg.threads = cfg.threads;
  const Experiment exp = load_experiment(o, stored);
  const EvalResult r = evaluate(*state, eval_splits(exp, state->encoders()), eval_cfg);
  const json report = metrics_report(fs::path(o.dir).filename().string(), eval_cfg, eval_cfg.arm, r,
                                     read_curve(fs::path(o.dir) / "loss_curve.json"),
                                     diagnose_shift(exp.train_set, exp.test_set), state->encoders().checksum());
  const auto errs = validate_json(report, metrics_report_schema());
  if (!errs.empty()) throw Failure("report fails its schema: " + errs.front());
  write_json(fs::path(o.dir) / "report.json", report);
  for (const auto& m : r.splits) {
    std::cout << m.name << " (" << m.n << "): " << (m.accuracy ? json(*m.accuracy).dump() : "null") << "\n";
  }
  if (r.harmonic_mean) std::cout << "H: " << *r.harmonic_mean << "\n";
  return 0;
}

int cmd_ablate(const Options& o, const std::vector<std::string>& arm_names) {
  const TrainConfig cfg = resolve_config(o);
  const Experiment exp = fs::exists(data_path(o, "train")) ? load_experiment(o, cfg) : build_experiment(cfg);
  const auto enc = fs::exists(encoders_path(o)) ? load_encoders(o) : pretrain_encoders(exp).encoders;
  std::vector<Arm> arms;
  for (const auto& a : arm_names) arms.push_back(arm_from_string(a));
  if (arms.empty()) arms = all_arms();
  const json grid = ablate(exp, enc, arms);
  write_json(fs::path(o.dir) / "ablation.json", grid);
  std::ostringstream csv;
  csv << "arm,split,accuracy\n";
  for (const auto& row : grid["arms"]) {
    for (const auto& [split, m] : row["splits"].items()) {
      csv << row["arm"].get<std::string>() << ',' << split << ',' << (m["accuracy"].is_null() ? "" : m["accuracy"].dump())
          << '\n';
    }
  }
  write_text(fs::path(o.dir) / "ablation.csv", csv.str());
  std::cout << csv.str();
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<std::pair<std::string, json>> docs;
  for (const auto& in : inputs) {
    json doc = read_json_file(in);
    const auto errs = validate_json(doc, metrics_report_schema());
    if (!errs.empty()) throw Failure(in + ": " + errs.front());
    docs.emplace_back(doc.at("run").get<std::string>(), std::move(doc));
  }
  const std::string csv = reports_to_csv(docs);
  if (out.empty()) {
    std::cout << csv;
  } else {
    write_text(out, csv);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"anyshift: test-time prompt inference under distribution shift"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--set", o.overrides, "override a config field, key=value (repeatable)");
  app.add_option("--seed", o.seed, "root seed for every RNG stream");
  app.add_option("--dir", o.dir, "run directory")->capture_default_str();

  auto* world = app.add_subcommand("world", "generate and describe the base world");
  auto* gen = app.add_subcommand("gen", "write pretrain/train/test datasets for the configured shift");
  auto* pretrain = app.add_subcommand("pretrain", "contrastively pretrain the encoders");
  auto* trainc = app.add_subcommand("train", "train the prompt model");
  auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint and write report.json");
  auto* ablatec = app.add_subcommand("ablate", "train and evaluate every ablation arm");
  std::vector<std::string> arm_names;
  ablatec->add_option("--arms", arm_names, "arms to run (default: all)");
  auto* report = app.add_subcommand("report", "merge run reports into one CSV");
  std::vector<std::string> inputs;
  std::string out;
  report->add_option("reports", inputs, "report.json files")->required()->check(CLI::ExistingFile);
  report->add_option("--out", out, "CSV path (default: stdout)");
  auto* selftest = app.add_subcommand("selftest", "run the oracle and invariant suite");
  for (auto* sub : {world, gen, pretrain, trainc, evalc, ablatec, report, selftest}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (*world) return cmd_world(o);
    if (*gen) return cmd_gen(o);
    if (*pretrain) return cmd_pretrain(o);
    if (*trainc) return cmd_train(o);
    if (*evalc) return cmd_eval(o);
    if (*ablatec) return cmd_ablate(o, arm_names);
    if (*report) return cmd_report(inputs, out);
    if (*selftest) return run_selftest(std::cout) ? 0 : 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << (e.field().empty() ? "" : e.field() + ": ") << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
