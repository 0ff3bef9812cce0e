#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "anyshift/errors.hpp"
#include "anyshift/experiment.hpp"

using namespace anyshift;
using nlohmann::json;

namespace {

TrainConfig small_config() {
  json j = to_json(default_config());
  for (const char* s : {"world.d_x=12", "encoder.hidden=16", "encoder.d=8", "encoder.heads=2", "encoder.ffn_hidden=16",
                        "encoder.text_blocks=1", "model.hidden=8", "model.heads=2", "model.ffn_hidden=16",
                        "model.blocks=1", "model.prompt_len=2", "model.prompt_width=3", "data.pretrain_per_class=30",
                        "data.train_per_class=4", "data.test_per_class=5", "pretrain.epochs=2", "train.iterations=6",
                        "train.batch_size=8", "eval.n_s=1", "eval.n_t=2"}) {
    apply_override(j, s);
  }
  return config_from_json(j);
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("anyshift_unit_" + name)).string();
}

struct SmallRun {
  TrainConfig cfg = small_config();
  Experiment exp = build_experiment(cfg);
  PretrainOutcome pre = pretrain_encoders(exp);
  std::unique_ptr<TrainState> state = std::make_unique<TrainState>(pre.encoders, model_config(cfg));
  ClassSet classes = train_class_set(exp, *pre.encoders);
  std::vector<LossPoint> curve = train(*state, exp.train_set, classes, cfg);
};

}  // namespace

TEST_CASE("harmonic mean checkpoints and edge cases") {
  CHECK(std::abs(harmonic_mean(76.63, 71.33) - 73.88) <= 0.01);
  CHECK(std::abs(harmonic_mean(82.69, 63.22) - 71.66) <= 0.01);
  CHECK(harmonic_mean(0.0, 0.0) == 0.0);
  CHECK(harmonic_mean(0.0, 50.0) == 0.0);
  CHECK(harmonic_mean(40.0, 40.0) == doctest::Approx(40.0));
  CHECK(harmonic_mean(30.0, 60.0) <= 45.0);
  CHECK_THROWS_AS(harmonic_mean(-1.0, 3.0), InputError);
  CHECK_THROWS_AS(harmonic_mean(std::nan(""), 3.0), InputError);
}

TEST_CASE("default config round-trips and validates against its schema") {
  const TrainConfig d = default_config();
  const json j = to_json(d);
  CHECK(to_json(config_from_json(j)) == j);
  CHECK(validate_json(j, config_schema()).empty());
  CHECK(d.lr == 5e-4);
  CHECK(d.batch_size == 32);
  CHECK(d.iterations == 3000);
  CHECK(d.model.prompt_len == 4);
  CHECK(d.model.prompt_width == 16);
  CHECK(d.encoder.logit_scale == 20.0);
  CHECK(d.data.train_per_class == 16);
}

TEST_CASE("overrides parse json values and nested paths") {
  json j = to_json(default_config());
  apply_override(j, "train.lr=0.01");
  apply_override(j, "train.arm=no_text");
  apply_override(j, "shift.parts.0.angle=0.25");
  const TrainConfig c = config_from_json(j);
  CHECK(c.lr == 0.01);
  CHECK(c.arm == Arm::NoText);
  CHECK(c.shift.parts[0].angle == 0.25);
  CHECK_THROWS_AS(apply_override(j, "no_equals_sign"), ConfigError);
}

TEST_CASE("config errors name the offending field") {
  const auto field_of = [](const json& j) {
    try {
      config_from_json(j);
    } catch (const ConfigError& e) {
      return e.field();
    }
    return std::string("<none>");
  };
  json j = to_json(default_config());
  j["train"]["lr"] = -1.0;
  CHECK(field_of(j) == "train.lr");
  j = to_json(default_config());
  j["train"]["bogus"] = 1;
  CHECK(field_of(j) == "train.bogus");
  j = to_json(default_config());
  j["data"]["train_per_class"] = "many";
  CHECK(field_of(j) == "data.train_per_class");
  j = to_json(default_config());
  j["model"]["heads"] = 5;  // does not divide the hidden width
  CHECK(field_of(j).rfind("model", 0) == 0);
  j = to_json(default_config());
  j["version"] = 99;
  CHECK(field_of(j) == "version");
}

TEST_CASE("schema validator reports violations by path") {
  const json schema = json::parse(R"({"type":"object","required":["a"],"additionalProperties":false,
    "properties":{"a":{"type":"integer","minimum":0},"b":{"type":"array","items":{"enum":["x","y"]}}}})");
  CHECK(validate_json(json{{"a", 1}, {"b", {"x"}}}, schema).empty());
  CHECK(validate_json(json{{"b", {"z"}}}, schema).size() == 2);
  CHECK(validate_json(json{{"a", -1}}, schema).size() == 1);
  CHECK(validate_json(json{{"a", 1}, {"c", 0}}, schema).size() == 1);
}

TEST_CASE("experiment sizes follow the config") {
  const TrainConfig cfg = small_config();
  const Experiment exp = build_experiment(cfg);
  CHECK(exp.pretrain_set.size() == 30u * 8u);
  CHECK(exp.train_set.size() == 4u * 4u);  // four classes held out
  CHECK(exp.test_set.size() == 5u * 8u);
  for (const auto& ex : exp.train_set) CHECK(ex.y < 4);
}

TEST_CASE("small pipeline: training, evaluation, reports, checkpoints") {
  SmallRun run;
  REQUIRE(run.curve.size() == 6u);
  for (const auto& p : run.curve) {
    CHECK(std::isfinite(p.total));
    CHECK(p.kl >= 0.0);
  }

  const auto splits = eval_splits(run.exp, *run.pre.encoders);
  REQUIRE(splits.size() == 3u);
  CHECK(splits[0].name == "base");
  CHECK(splits[1].name == "new");
  CHECK(splits[2].name == "all");

  const EvalResult one = evaluate(*run.state, splits, run.cfg);
  TrainConfig threaded = run.cfg;
  threaded.threads = 3;
  const EvalResult three = evaluate(*run.state, splits, threaded);
  for (std::size_t i = 0; i < one.splits.size(); ++i) CHECK(one.splits[i].accuracy == three.splits[i].accuracy);
  REQUIRE(one.harmonic_mean.has_value());

  const auto diag = diagnose_shift(run.exp.train_set, run.exp.test_set);
  const json report = metrics_report("unit", run.cfg, run.cfg.arm, one, run.curve, diag, run.pre.encoders->checksum());
  CHECK(validate_json(report, metrics_report_schema()).empty());
  CHECK(report["schema"] == kReportSchemaId);

  const std::string csv = reports_to_csv({{"unit", report}});
  CHECK(csv.rfind("run,split,metric,value\n", 0) == 0);
  CHECK(csv.find("unit,all,accuracy,") != std::string::npos);

  const std::string lc = loss_curve_csv(run.curve);
  CHECK(lc.rfind("step,loss_total,loss_ce,loss_kl\n", 0) == 0);
  CHECK(std::count(lc.begin(), lc.end(), '\n') == 7);

  const std::string path = temp_path("checkpoint.aspt");
  save_checkpoint(path, *run.state, run.cfg);
  TrainConfig loaded_cfg;
  auto loaded = load_checkpoint(path, &loaded_cfg);
  std::remove(path.c_str());
  CHECK(to_json(loaded_cfg) == to_json(run.cfg));
  CHECK(loaded->encoders().checksum() == run.pre.encoders->checksum());
  CHECK(loaded->optimizer().steps_taken() == 6);
  const EvalResult again = evaluate(*loaded, splits, run.cfg);
  for (std::size_t i = 0; i < one.splits.size(); ++i) CHECK(one.splits[i].accuracy == again.splits[i].accuracy);

  // resuming continues the same trajectory as an uninterrupted run
  TrainConfig more = run.cfg;
  more.iterations = 3;
  const auto resumed = train(*loaded, run.exp.train_set, run.classes, more);
  TrainConfig longer = run.cfg;
  longer.iterations = 9;
  SmallRun fresh;
  TrainState straight(fresh.pre.encoders, model_config(longer));
  const auto full = train(straight, fresh.exp.train_set, fresh.classes, longer);
  CHECK(resumed.back().step == full.back().step);
  CHECK(resumed.back().total == full.back().total);
}

TEST_CASE("datasets round-trip through files") {
  const Experiment exp = build_experiment(small_config());
  const std::string path = temp_path("train.aspd");
  save_dataset(path, exp.train_set, dataset_header(exp, "train"));
  json header;
  const Dataset back = load_dataset(path, &header);
  std::remove(path.c_str());
  REQUIRE(back.size() == exp.train_set.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].x == exp.train_set[i].x);
    CHECK(back[i].y == exp.train_set[i].y);
    CHECK(back[i].subpop == exp.train_set[i].subpop);
  }
  CHECK(header["role"] == "train");
  CHECK(header["class_names"].size() == 4);
}

TEST_CASE("loading a missing checkpoint fails") {
  CHECK_THROWS(load_checkpoint(temp_path("does_not_exist.aspt")));
}
