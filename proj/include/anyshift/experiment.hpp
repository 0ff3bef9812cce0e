#pragma once

// Experiment harness: configuration, dataset construction, the training
// loop, evaluation with the harmonic mean, ablations and run reports.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "anyshift/encoders.hpp"
#include "anyshift/model.hpp"
#include "anyshift/serialize.hpp"
#include "anyshift/shift_bench.hpp"

namespace anyshift {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kReportSchemaId = "anyshift.metrics_report/v1";

struct SeedConfig {
  std::uint64_t world = 1;
  std::uint64_t init = 2;
  std::uint64_t train = 3;
  std::uint64_t eval = 4;
};

struct DataConfig {
  int pretrain_per_class = 500;
  int train_per_class = 16;
  int test_per_class = 200;
};

struct TrainConfig {
  SeedConfig seeds;
  WorldParams world;  // world.seed is ignored in favour of seeds.world
  ShiftSpec shift;
  DataConfig data;
  EncoderConfig encoder;   // seed derived from seeds.init
  PretrainConfig pretrain; // seed derived from seeds.init
  InferenceNetConfig model;  // seed and feature_width derived
  double lr = 5e-4;
  int batch_size = 32;
  int iterations = 3000;
  double kl_weight = 1.0;
  Arm arm = Arm::Full;
  int n_s = 4;
  int n_t = 4;
  int threads = 1;
};

/// Covariate rotation and bias on the test side combined with half of the
/// classes held out of training.
ShiftSpec joint_benchmark_shift(int n_classes);

TrainConfig default_config();
nlohmann::json to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults; unknown keys and invalid values throw
/// ConfigError naming the field path.
TrainConfig config_from_json(const nlohmann::json& j);
void validate(const TrainConfig& cfg);
/// Applies "a.b.c=value" to a JSON config. The value is parsed as JSON when
/// possible and taken as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

// Fully derived sub-configs.
WorldParams world_params(const TrainConfig& cfg);
EncoderConfig encoder_config(const TrainConfig& cfg);
PretrainConfig pretrain_config(const TrainConfig& cfg);
ModelConfig model_config(const TrainConfig& cfg);

struct Experiment {
  TrainConfig cfg;
  TaskDistribution task;
  std::vector<ClassName> fine_names;   // index = fine class id
  std::vector<ClassName> super_names;  // index = superclass id
  Dataset pretrain_set;
  Dataset train_set;
  Dataset test_set;
};

Experiment build_experiment(const TrainConfig& cfg);
/// Names for the label ids of a side (fine or superclass space).
std::vector<ClassName> names_for(const Experiment& exp, const std::vector<int>& label_ids, bool superclass);

struct PretrainOutcome {
  std::shared_ptr<const FrozenEncoders> encoders;
  std::vector<double> loss_curve;
};

PretrainOutcome pretrain_encoders(const Experiment& exp);

struct LossPoint {
  int step = 0;
  double total = 0.0;
  double ce = 0.0;
  double kl = 0.0;
};

ClassSet train_class_set(const Experiment& exp, const FrozenEncoders& enc);

using StepCallback = std::function<void(const LossPoint&)>;

/// Runs cfg.iterations steps from the optimizer's current step count.
/// Throws NumericError with a diagnostic dump when the loss is not finite.
std::vector<LossPoint> train(TrainState& state, const Dataset& train_set, const ClassSet& classes,
                             const TrainConfig& cfg, const StepCallback& on_step = {});

struct EvalSplit {
  std::string name;
  Dataset examples;
  ClassSet classes;
};

/// base / new / all splits of the test set (base and new only when the
/// shift holds classes out).
std::vector<EvalSplit> eval_splits(const Experiment& exp, const FrozenEncoders& enc);

struct SplitMetrics {
  std::string name;
  std::size_t n = 0;
  std::optional<double> accuracy;  // null for an empty split
};

struct EvalResult {
  std::vector<SplitMetrics> splits;
  std::optional<double> harmonic_mean;  // of the base and new fractions, when both exist
};

/// Per-example predictions with per-example noise streams, reduced in
/// example order; `threads` never changes the result.
EvalResult evaluate(const TrainState& state, const std::vector<EvalSplit>& splits, const TrainConfig& cfg);

/// Correctness flags of one split, for oracle comparisons.
std::vector<char> predict_split(const TrainState& state, const EvalSplit& split, std::size_t split_index,
                                const TrainConfig& cfg, int threads);

/// 2ab / (a + b); 0 when a + b == 0.
double harmonic_mean(double a, double b);

// Checkpoints: encoders + inference network + optimizer moments.
void save_checkpoint(const std::string& path, const TrainState& state, const TrainConfig& cfg);
std::unique_ptr<TrainState> load_checkpoint(const std::string& path, TrainConfig* cfg_out = nullptr);

// Dataset files: one JSON header line followed by ASPT tensors
// x [N x d_x] and labels [N x 3] (label, subpop, domain).
void save_dataset(const std::string& path, const Dataset& ds, const nlohmann::json& header);
Dataset load_dataset(const std::string& path, nlohmann::json* header_out = nullptr);
nlohmann::json dataset_header(const Experiment& exp, const std::string& role);

nlohmann::json loss_curve_json(const std::vector<LossPoint>& curve);
std::string loss_curve_csv(const std::vector<LossPoint>& curve);

/// MetricsReport document for one run.
nlohmann::json metrics_report(const std::string& run, const TrainConfig& cfg, Arm arm, const EvalResult& eval,
                              const std::vector<LossPoint>& curve, const ShiftDiagnostics& diag,
                              std::uint64_t encoder_checksum);

/// Pretrain once, then train and evaluate each arm on identical seeds.
nlohmann::json ablate(const Experiment& exp, const std::shared_ptr<const FrozenEncoders>& enc,
                      const std::vector<Arm>& arms);

/// Rows (run, split, metric, value) from report documents.
std::string reports_to_csv(const std::vector<std::pair<std::string, nlohmann::json>>& reports);

/// Small JSON-schema subset (type, required, properties, items, enum,
/// minimum, maximum, const, additionalProperties=false). Returns the
/// violations as "path: message".
std::vector<std::string> validate_json(const nlohmann::json& doc, const nlohmann::json& schema);

// The schemas shipped in schemas/, compiled in.
nlohmann::json metrics_report_schema();
nlohmann::json config_schema();

}  // namespace anyshift
