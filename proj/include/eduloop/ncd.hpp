#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "eduloop/common.hpp"
#include "eduloop/data_ingest.hpp"
#include "json.hpp"

namespace eduloop::ncd {

// Loss clamp on predicted probabilities.
inline constexpr double kProbEpsilon = 1e-7;

enum class Optimizer { adam, sgd };

struct TrainConfig {
  int epochs = 10;
  double learning_rate = 0.002;
  int batch_size = 256;
  std::vector<int> hidden_sizes{64, 32};
  std::uint64_t seed = 0;
  double init_scale = 0.1;
  Optimizer optimizer = Optimizer::adam;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Weight is out x in. Hidden layers use the logistic activation; the last
// layer is linear with one output, squashed by the logistic in predict().
struct DenseLayer {
  Matrix weight;
  std::vector<double> bias;

  bool operator==(const DenseLayer&) const = default;
};

struct Parameters {
  Matrix theta;  // students x d
  Matrix beta;   // items x d
  std::vector<double> alpha_raw;
  std::vector<DenseLayer> layers;

  // Every parameter block in a fixed order, for optimizers and checks.
  std::vector<std::span<double>> blocks();
  // Same shape, all zeros.
  Parameters zeros_like() const;
  void set_zero();

  bool operator==(const Parameters&) const = default;
};

struct NcdModel {
  int n_students = 0;
  int n_items = 0;
  int n_knowledge = 0;  // embedding dimension
  Parameters params;
  TrainConfig config;

  int dim() const { return n_knowledge; }
  double alpha(int item) const;
  std::span<const double> theta_row(int student) const;
  // Throws Error(data) when layer shapes do not chain from d to 1.
  void check_dims() const;

  bool operator==(const NcdModel&) const = default;
};

// Seeded uniform(-init_scale, init_scale) for every parameter, then MLP
// weights projected onto the non-negative orthant.
NcdModel init_model(int n_students, int n_items, int n_knowledge,
                    const TrainConfig& config);

// Shifts the output bias so that a zero interaction predicts `rate`. fit()
// applies it with the training base rate; without it the non-negative
// weights collapse while the output chases the base rate.
void match_base_rate(NcdModel& model, double rate);

// x = alpha_q * mask(q_row) o (sigmoid(theta) - sigmoid(beta_q)).
std::vector<double> interaction(const NcdModel& model,
                                std::span<const double> theta, int item,
                                std::span<const int> q_row);
std::vector<double> interaction(const NcdModel& model, int student, int item,
                                std::span<const int> q_row);

// Probability of a correct response, strictly inside (0,1).
double predict(const NcdModel& model, std::span<const double> theta, int item,
               std::span<const int> q_row);
double predict(const NcdModel& model, int student, int item,
               std::span<const int> q_row);
// MLP applied to a given interaction vector; used by the monotonicity probes.
double predict_from_interaction(const NcdModel& model,
                                std::span<const double> x);

// -(1/N) sum [r log p + (1-r) log(1-p)] with p clamped to [eps, 1-eps].
double bce_loss(std::span<const double> predictions, std::span<const int> labels);

// Mean loss over `records`; when `gradient` is given it receives the
// analytic gradient of that mean (shape of model.params, overwritten).
double loss_and_gradient(const NcdModel& model,
                         std::span<const ResponseRecord> records,
                         const QMatrix& q, Parameters* gradient);

// dz/dtheta for one (theta, item) pair, where z is the MLP output
// pre-activation. Zero outside the item's knowledge row.
struct AbilityJacobian {
  double probability = 0.5;
  std::vector<double> dz_dtheta;
};
AbilityJacobian ability_jacobian(const NcdModel& model,
                                 std::span<const double> theta, int item,
                                 std::span<const int> q_row);
// Gradient of the single-response loss w.r.t. theta only.
std::vector<double> ability_gradient(const NcdModel& model,
                                     std::span<const double> theta, int item,
                                     std::span<const int> q_row, int label);
// dLoss/dz for one response, honoring the probability clamp.
double loss_slope(double probability, int label);

struct OptimizerState {
  Parameters m;
  Parameters v;
  std::int64_t step = 0;
};

OptimizerState make_optimizer_state(const NcdModel& model);

// Clamp every MLP weight to >= 0.
void project_weights(NcdModel& model);

// One shuffled minibatch pass. Returns the record-weighted mean of the
// minibatch losses. Throws Error(numeric) on a non-finite loss or parameter.
double train_epoch(NcdModel& model, const ResponseDataset& train,
                   const QMatrix& q, const TrainConfig& config, Rng& rng,
                   OptimizerState& state);

struct Metrics {
  double auc = std::numeric_limits<double>::quiet_NaN();  // NaN: undefined
  double acc = 0.0;
  double rmse = 0.0;
  double mse = 0.0;
  double loss = 0.0;
  std::int64_t count = 0;
};

Metrics compute_metrics(std::span<const double> predictions,
                        std::span<const int> labels);
Metrics evaluate(const NcdModel& model, const ResponseDataset& test,
                 const QMatrix& q);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  Metrics valid;
  double seconds = 0.0;
};

struct FitResult {
  NcdModel model;
  std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

FitResult fit(const ResponseDataset& train, const ResponseDataset& valid,
              const QMatrix& q, const TrainConfig& config,
              const EpochCallback& on_epoch = {});

// sigmoid(theta), students x knowledge.
Matrix mastery_table(const NcdModel& model);

// Compares the analytic gradient of the mean loss over `sample` with central
// finite differences on every parameter the sample can influence. The
// relative error of one coordinate is |a - n| / max(|a|, |n|, 1e-6). The
// optional hook edits the analytic gradient before the comparison.
double grad_check(const NcdModel& model, std::span<const ResponseRecord> sample,
                  const QMatrix& q, double epsilon,
                  const std::function<void(Parameters&)>& tamper = {});

nlohmann::json to_json(const NcdModel& model);
NcdModel model_from_json(const nlohmann::json& doc);
void save_model(const NcdModel& model, const std::filesystem::path& path);
NcdModel load_model(const std::filesystem::path& path);

nlohmann::json to_json(const Metrics& metrics);
nlohmann::json to_json(const std::vector<EpochRecord>& history);
nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& doc,
                                   TrainConfig base = {});

}  // namespace eduloop::ncd
