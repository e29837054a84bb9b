#include "eduloop/ncd.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>
#include <sstream>

namespace eduloop::ncd {

namespace {

// Activations of one forward pass. The input is sparse: only the item's
// knowledge coordinates can be non-zero.
struct Forward {
  std::span<const int> row;
  std::vector<double> x;            // x at row[j]
  std::vector<double> sig_theta;    // sigmoid(theta) at row[j]
  std::vector<double> sig_beta;     // sigmoid(beta_q) at row[j]
  double alpha = 0.0;
  std::vector<std::vector<double>> hidden;  // post-activation outputs
  double z = 0.0;
  double p = 0.5;
};

void forward(const NcdModel& model, std::span<const double> theta, int item,
             std::span<const int> row, Forward& fw) {
  const auto& layers = model.params.layers;
  const auto beta = model.params.beta.row(static_cast<std::size_t>(item));
  fw.row = row;
  fw.alpha = model.alpha(item);
  fw.x.resize(row.size());
  fw.sig_theta.resize(row.size());
  fw.sig_beta.resize(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) {
    const auto k = static_cast<std::size_t>(row[j]);
    fw.sig_theta[j] = sigmoid(theta[k]);
    fw.sig_beta[j] = sigmoid(beta[k]);
    fw.x[j] = fw.alpha * (fw.sig_theta[j] - fw.sig_beta[j]);
  }

  fw.hidden.resize(layers.size() - 1);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    const std::size_t out = layer.weight.rows;
    std::vector<double> pre(layer.bias);
    if (l == 0) {
      for (std::size_t o = 0; o < out; ++o) {
        double s = pre[o];
        for (std::size_t j = 0; j < row.size(); ++j) {
          s += layer.weight(o, static_cast<std::size_t>(row[j])) * fw.x[j];
        }
        pre[o] = s;
      }
    } else {
      const auto& in = fw.hidden[l - 1];
      for (std::size_t o = 0; o < out; ++o) {
        const auto w = layer.weight.row(o);
        double s = pre[o];
        for (std::size_t i = 0; i < in.size(); ++i) s += w[i] * in[i];
        pre[o] = s;
      }
    }
    if (l + 1 == layers.size()) {
      fw.z = pre[0];
    } else {
      for (auto& v : pre) v = sigmoid(v);
      fw.hidden[l] = std::move(pre);
    }
  }
  fw.p = sigmoid(fw.z);
}

// Back-propagates dLoss/dz. Accumulates MLP gradients into `grad` when given
// and returns dLoss/dx at the row coordinates.
std::vector<double> backward(const NcdModel& model, const Forward& fw,
                             double dz, Parameters* grad) {
  const auto& layers = model.params.layers;
  std::vector<double> delta{dz};
  std::vector<double> dx(fw.row.size(), 0.0);
  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto& layer = layers[l];
    if (grad != nullptr) {
      auto& g = grad->layers[l];
      for (std::size_t o = 0; o < delta.size(); ++o) g.bias[o] += delta[o];
      if (l == 0) {
        for (std::size_t o = 0; o < delta.size(); ++o) {
          for (std::size_t j = 0; j < fw.row.size(); ++j) {
            g.weight(o, static_cast<std::size_t>(fw.row[j])) += delta[o] * fw.x[j];
          }
        }
      } else {
        const auto& in = fw.hidden[l - 1];
        for (std::size_t o = 0; o < delta.size(); ++o) {
          auto gw = g.weight.row(o);
          for (std::size_t i = 0; i < in.size(); ++i) gw[i] += delta[o] * in[i];
        }
      }
    }
    if (l == 0) {
      for (std::size_t j = 0; j < fw.row.size(); ++j) {
        const auto k = static_cast<std::size_t>(fw.row[j]);
        double s = 0.0;
        for (std::size_t o = 0; o < delta.size(); ++o) {
          s += layer.weight(o, k) * delta[o];
        }
        dx[j] = s;
      }
    } else {
      const auto& in = fw.hidden[l - 1];
      std::vector<double> next(in.size(), 0.0);
      for (std::size_t o = 0; o < delta.size(); ++o) {
        const auto w = layer.weight.row(o);
        for (std::size_t i = 0; i < in.size(); ++i) next[i] += w[i] * delta[o];
      }
      for (std::size_t i = 0; i < in.size(); ++i) {
        next[i] *= in[i] * (1.0 - in[i]);
      }
      delta = std::move(next);
    }
  }
  return dx;
}

void require_item(const NcdModel& model, int item) {
  if (item < 0 || item >= model.n_items) {
    throw Error(ErrorKind::not_found, "invalid item id " + std::to_string(item));
  }
}

void require_student(const NcdModel& model, int student) {
  if (student < 0 || student >= model.n_students) {
    throw Error(ErrorKind::not_found,
                "invalid student id " + std::to_string(student));
  }
}

void require_theta(const NcdModel& model, std::span<const double> theta) {
  if (static_cast<int>(theta.size()) != model.dim()) {
    throw Error(ErrorKind::data, "ability vector has length " +
                                     std::to_string(theta.size()) +
                                     ", model expects " +
                                     std::to_string(model.dim()));
  }
}

void require_row(const NcdModel& model, std::span<const int> row) {
  for (int k : row) {
    if (k < 0 || k >= model.dim()) {
      throw Error(ErrorKind::data,
                  "knowledge id out of range: " + std::to_string(k));
    }
  }
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(),
                     [](double x) { return std::isfinite(x); });
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw Error(ErrorKind::usage, "epochs must be positive");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorKind::usage, "learning rate must be finite and >= 0");
  }
  if (batch_size < 1) throw Error(ErrorKind::usage, "batch size must be positive");
  if (!(init_scale > 0.0)) throw Error(ErrorKind::usage, "init scale must be positive");
  for (int h : hidden_sizes) {
    if (h < 1) throw Error(ErrorKind::usage, "hidden sizes must be positive");
  }
}

std::vector<std::span<double>> Parameters::blocks() {
  std::vector<std::span<double>> out{theta.data, beta.data, alpha_raw};
  for (auto& layer : layers) {
    out.emplace_back(layer.weight.data);
    out.emplace_back(layer.bias);
  }
  return out;
}

Parameters Parameters::zeros_like() const {
  Parameters z = *this;
  z.set_zero();
  return z;
}

void Parameters::set_zero() {
  for (auto block : blocks()) std::fill(block.begin(), block.end(), 0.0);
}

double NcdModel::alpha(int item) const {
  return softplus(params.alpha_raw[static_cast<std::size_t>(item)]);
}

std::span<const double> NcdModel::theta_row(int student) const {
  require_student(*this, student);
  return params.theta.row(static_cast<std::size_t>(student));
}

void NcdModel::check_dims() const {
  auto fail = [](const std::string& what) {
    throw Error(ErrorKind::data, "model dimension mismatch: " + what);
  };
  if (n_students < 0 || n_items < 0 || n_knowledge < 1) fail("bad counts");
  if (params.theta.rows != static_cast<std::size_t>(n_students) ||
      params.theta.cols != static_cast<std::size_t>(n_knowledge)) {
    fail("theta");
  }
  if (params.beta.rows != static_cast<std::size_t>(n_items) ||
      params.beta.cols != static_cast<std::size_t>(n_knowledge)) {
    fail("beta");
  }
  if (params.alpha_raw.size() != static_cast<std::size_t>(n_items)) fail("alpha");
  if (params.layers.empty()) fail("no layers");
  std::size_t in = static_cast<std::size_t>(n_knowledge);
  for (const auto& layer : params.layers) {
    if (layer.weight.cols != in || layer.bias.size() != layer.weight.rows ||
        layer.weight.data.size() != layer.weight.rows * layer.weight.cols) {
      fail("layer chain");
    }
    in = layer.weight.rows;
  }
  if (in != 1) fail("output layer must have one unit");
}

NcdModel init_model(int n_students, int n_items, int n_knowledge,
                    const TrainConfig& config) {
  config.validate();
  if (n_students < 0 || n_items < 1 || n_knowledge < 1) {
    throw Error(ErrorKind::data, "model needs at least one item and skill");
  }
  NcdModel model;
  model.n_students = n_students;
  model.n_items = n_items;
  model.n_knowledge = n_knowledge;
  model.config = config;
  auto& p = model.params;
  p.theta = Matrix(static_cast<std::size_t>(n_students),
                   static_cast<std::size_t>(n_knowledge));
  p.beta = Matrix(static_cast<std::size_t>(n_items),
                  static_cast<std::size_t>(n_knowledge));
  p.alpha_raw.assign(static_cast<std::size_t>(n_items), 0.0);
  std::size_t in = static_cast<std::size_t>(n_knowledge);
  std::vector<int> sizes = config.hidden_sizes;
  sizes.push_back(1);
  for (int out : sizes) {
    DenseLayer layer;
    layer.weight = Matrix(static_cast<std::size_t>(out), in);
    layer.bias.assign(static_cast<std::size_t>(out), 0.0);
    p.layers.push_back(std::move(layer));
    in = static_cast<std::size_t>(out);
  }
  Rng rng(config.seed);
  for (auto block : p.blocks()) {
    for (double& v : block) v = uniform(rng, -config.init_scale, config.init_scale);
  }
  project_weights(model);
  return model;
}

std::vector<double> interaction(const NcdModel& model,
                                std::span<const double> theta, int item,
                                std::span<const int> q_row) {
  require_item(model, item);
  require_theta(model, theta);
  require_row(model, q_row);
  const auto beta = model.params.beta.row(static_cast<std::size_t>(item));
  const double a = model.alpha(item);
  std::vector<double> x(static_cast<std::size_t>(model.dim()), 0.0);
  for (int k : q_row) {
    const auto kk = static_cast<std::size_t>(k);
    x[kk] = a * (sigmoid(theta[kk]) - sigmoid(beta[kk]));
  }
  return x;
}

std::vector<double> interaction(const NcdModel& model, int student, int item,
                                std::span<const int> q_row) {
  return interaction(model, model.theta_row(student), item, q_row);
}

double predict(const NcdModel& model, std::span<const double> theta, int item,
               std::span<const int> q_row) {
  require_item(model, item);
  require_theta(model, theta);
  require_row(model, q_row);
  Forward fw;
  forward(model, theta, item, q_row, fw);
  return fw.p;
}

double predict(const NcdModel& model, int student, int item,
               std::span<const int> q_row) {
  return predict(model, model.theta_row(student), item, q_row);
}

double predict_from_interaction(const NcdModel& model,
                                std::span<const double> x) {
  if (static_cast<int>(x.size()) != model.dim()) {
    throw Error(ErrorKind::data, "interaction vector length mismatch");
  }
  std::vector<double> in(x.begin(), x.end());
  const auto& layers = model.params.layers;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    std::vector<double> out(layer.bias);
    for (std::size_t o = 0; o < out.size(); ++o) {
      const auto w = layer.weight.row(o);
      for (std::size_t i = 0; i < in.size(); ++i) out[o] += w[i] * in[i];
    }
    if (l + 1 < layers.size()) {
      for (auto& v : out) v = sigmoid(v);
    }
    in = std::move(out);
  }
  return sigmoid(in[0]);
}

double bce_loss(std::span<const double> predictions,
                std::span<const int> labels) {
  if (predictions.size() != labels.size()) {
    throw Error(ErrorKind::usage, "bce_loss: length mismatch");
  }
  if (predictions.empty()) throw Error(ErrorKind::usage, "bce_loss: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double p = std::clamp(predictions[i], kProbEpsilon, 1.0 - kProbEpsilon);
    sum += labels[i] ? std::log(p) : std::log1p(-p);
  }
  return -sum / static_cast<double>(predictions.size());
}

double loss_slope(double probability, int label) {
  if (probability < kProbEpsilon || probability > 1.0 - kProbEpsilon) return 0.0;
  return probability - static_cast<double>(label);
}

double loss_and_gradient(const NcdModel& model,
                         std::span<const ResponseRecord> records,
                         const QMatrix& q, Parameters* gradient) {
  if (records.empty()) {
    if (gradient != nullptr) *gradient = model.params.zeros_like();
    return 0.0;
  }
  if (gradient != nullptr) {
    if (gradient->theta.rows != model.params.theta.rows ||
        gradient->beta.rows != model.params.beta.rows ||
        gradient->layers.size() != model.params.layers.size()) {
      *gradient = model.params.zeros_like();
    } else {
      gradient->set_zero();
    }
  }
  const double scale = 1.0 / static_cast<double>(records.size());
  double loss = 0.0;
  Forward fw;
  for (const auto& r : records) {
    require_student(model, r.student);
    require_item(model, r.item);
    const auto& row = q.row(r.item);
    const auto theta = model.params.theta.row(static_cast<std::size_t>(r.student));
    forward(model, theta, r.item, row, fw);
    const double pc = std::clamp(fw.p, kProbEpsilon, 1.0 - kProbEpsilon);
    loss -= r.correct ? std::log(pc) : std::log1p(-pc);
    if (gradient == nullptr) continue;

    const double dz = loss_slope(fw.p, r.correct) * scale;
    const auto dx = backward(model, fw, dz, gradient);
    auto g_theta = gradient->theta.row(static_cast<std::size_t>(r.student));
    auto g_beta = gradient->beta.row(static_cast<std::size_t>(r.item));
    double g_alpha = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      const auto k = static_cast<std::size_t>(row[j]);
      const double st = fw.sig_theta[j];
      const double sb = fw.sig_beta[j];
      g_theta[k] += dx[j] * fw.alpha * st * (1.0 - st);
      g_beta[k] -= dx[j] * fw.alpha * sb * (1.0 - sb);
      g_alpha += dx[j] * (st - sb);
    }
    // d softplus(a) / da = sigmoid(a)
    gradient->alpha_raw[static_cast<std::size_t>(r.item)] +=
        g_alpha * sigmoid(model.params.alpha_raw[static_cast<std::size_t>(r.item)]);
  }
  return loss * scale;
}

AbilityJacobian ability_jacobian(const NcdModel& model,
                                 std::span<const double> theta, int item,
                                 std::span<const int> q_row) {
  require_item(model, item);
  require_theta(model, theta);
  require_row(model, q_row);
  Forward fw;
  forward(model, theta, item, q_row, fw);
  const auto dx = backward(model, fw, 1.0, nullptr);
  AbilityJacobian out;
  out.probability = fw.p;
  out.dz_dtheta.assign(static_cast<std::size_t>(model.dim()), 0.0);
  for (std::size_t j = 0; j < q_row.size(); ++j) {
    const double st = fw.sig_theta[j];
    out.dz_dtheta[static_cast<std::size_t>(q_row[j])] =
        dx[j] * fw.alpha * st * (1.0 - st);
  }
  return out;
}

std::vector<double> ability_gradient(const NcdModel& model,
                                     std::span<const double> theta, int item,
                                     std::span<const int> q_row, int label) {
  auto jac = ability_jacobian(model, theta, item, q_row);
  const double slope = loss_slope(jac.probability, label);
  for (auto& v : jac.dz_dtheta) v *= slope;
  return std::move(jac.dz_dtheta);
}

OptimizerState make_optimizer_state(const NcdModel& model) {
  OptimizerState s;
  s.m = model.params.zeros_like();
  s.v = model.params.zeros_like();
  return s;
}

void project_weights(NcdModel& model) {
  for (auto& layer : model.params.layers) {
    for (auto& w : layer.weight.data) {
      if (w < 0.0) w = 0.0;
    }
  }
}

double train_epoch(NcdModel& model, const ResponseDataset& train,
                   const QMatrix& q, const TrainConfig& config, Rng& rng,
                   OptimizerState& state) {
  config.validate();
  model.check_dims();
  if (train.n_students > model.n_students || train.n_items > model.n_items) {
    throw Error(ErrorKind::data, "dataset does not fit model dimensions");
  }
  if (train.records.empty()) return 0.0;
  if (state.m.layers.size() != model.params.layers.size()) {
    state = make_optimizer_state(model);
  }

  std::vector<std::size_t> order(train.records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(order, rng);

  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kAdamEps = 1e-8;

  Parameters grad = model.params.zeros_like();
  std::vector<ResponseRecord> batch;
  double weighted_loss = 0.0;
  const auto batch_size = static_cast<std::size_t>(config.batch_size);
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    batch.clear();
    for (std::size_t i = start; i < end; ++i) batch.push_back(train.records[order[i]]);

    const double loss = loss_and_gradient(model, batch, q, &grad);
    if (!std::isfinite(loss)) {
      throw Error(ErrorKind::numeric,
                  "non-finite loss at batch " + std::to_string(start / batch_size) +
                      "; training diverged (lower the learning rate)");
    }
    weighted_loss += loss * static_cast<double>(batch.size());

    const double lr = config.learning_rate;
    auto params = model.params.blocks();
    auto grads = grad.blocks();
    if (config.optimizer == Optimizer::sgd) {
      for (std::size_t b = 0; b < params.size(); ++b) {
        for (std::size_t i = 0; i < params[b].size(); ++i) {
          params[b][i] -= lr * grads[b][i];
        }
      }
    } else {
      ++state.step;
      const double t = static_cast<double>(state.step);
      const double c1 = 1.0 - std::pow(kBeta1, t);
      const double c2 = 1.0 - std::pow(kBeta2, t);
      auto ms = state.m.blocks();
      auto vs = state.v.blocks();
      for (std::size_t b = 0; b < params.size(); ++b) {
        auto p = params[b];
        auto g = grads[b];
        auto m = ms[b];
        auto v = vs[b];
        for (std::size_t i = 0; i < p.size(); ++i) {
          m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
          v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
          p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kAdamEps);
        }
      }
    }
    project_weights(model);
    for (auto block : model.params.blocks()) {
      if (!all_finite(block)) {
        throw Error(ErrorKind::numeric,
                    "non-finite loss: parameters overflowed at batch " +
                        std::to_string(start / batch_size) +
                        "; training diverged (lower the learning rate)");
      }
    }
  }
  return weighted_loss / static_cast<double>(train.records.size());
}

void match_base_rate(NcdModel& model, double rate) {
  rate = std::clamp(rate, 0.01, 0.99);
  const std::vector<double> x(static_cast<std::size_t>(model.dim()), 0.0);
  const double p0 = predict_from_interaction(model, x);
  const double z0 = std::log(p0) - std::log1p(-p0);
  model.params.layers.back().bias[0] += std::log(rate) - std::log1p(-rate) - z0;
}

Metrics compute_metrics(std::span<const double> predictions,
                        std::span<const int> labels) {
  if (predictions.size() != labels.size()) {
    throw Error(ErrorKind::usage, "metrics: length mismatch");
  }
  if (predictions.empty()) throw Error(ErrorKind::usage, "metrics: empty test set");
  Metrics m;
  const auto n = predictions.size();
  m.count = static_cast<std::int64_t>(n);
  double se = 0.0;
  std::size_t hits = 0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double diff = predictions[i] - labels[i];
    se += diff * diff;
    if ((predictions[i] >= 0.5 ? 1 : 0) == labels[i]) ++hits;
    n_pos += labels[i] ? 1 : 0;
  }
  m.mse = se / static_cast<double>(n);
  m.rmse = std::sqrt(m.mse);
  m.acc = static_cast<double>(hits) / static_cast<double>(n);
  m.loss = bce_loss(predictions, labels);

  const std::size_t n_neg = n - n_pos;
  if (n_pos > 0 && n_neg > 0) {
    // Mann-Whitney statistic with midranks for ties.
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return predictions[a] < predictions[b];
    });
    double pos_rank_sum = 0.0;
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j + 1 < n && predictions[idx[j + 1]] == predictions[idx[i]]) ++j;
      const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) {
        if (labels[idx[k]]) pos_rank_sum += midrank;
      }
      i = j + 1;
    }
    const double np = static_cast<double>(n_pos);
    m.auc = (pos_rank_sum - np * (np + 1.0) / 2.0) /
            (np * static_cast<double>(n_neg));
  }
  return m;
}

Metrics evaluate(const NcdModel& model, const ResponseDataset& test,
                 const QMatrix& q) {
  if (test.records.empty()) throw Error(ErrorKind::usage, "empty test set");
  std::vector<double> preds;
  std::vector<int> labels;
  preds.reserve(test.records.size());
  labels.reserve(test.records.size());
  for (const auto& r : test.records) {
    preds.push_back(predict(model, r.student, r.item, q.row(r.item)));
    labels.push_back(r.correct);
  }
  return compute_metrics(preds, labels);
}

FitResult fit(const ResponseDataset& train, const ResponseDataset& valid,
              const QMatrix& q, const TrainConfig& config,
              const EpochCallback& on_epoch) {
  if (train.records.empty()) throw Error(ErrorKind::data, "empty training set");
  FitResult result{init_model(train.n_students, train.n_items, train.n_knowledge,
                              config),
                   {}};
  std::int64_t positives = 0;
  for (const auto& r : train.records) positives += r.correct;
  match_base_rate(result.model, static_cast<double>(positives) /
                                    static_cast<double>(train.records.size()));
  // Separate stream from initialization so shuffles do not depend on the
  // number of parameters.
  Rng rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
  OptimizerState state = make_optimizer_state(result.model);
  for (int e = 1; e <= config.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = e;
    rec.train_loss = train_epoch(result.model, train, q, config, rng, state);
    if (!valid.records.empty()) rec.valid = evaluate(result.model, valid, q);
    rec.seconds = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    if (on_epoch) on_epoch(rec);
    result.history.push_back(rec);
  }
  return result;
}

Matrix mastery_table(const NcdModel& model) {
  Matrix out = model.params.theta;
  for (auto& v : out.data) v = sigmoid(v);
  return out;
}

double grad_check(const NcdModel& model, std::span<const ResponseRecord> sample,
                  const QMatrix& q, double epsilon,
                  const std::function<void(Parameters&)>& tamper) {
  if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) {
    throw Error(ErrorKind::usage, "grad_check epsilon must lie in [1e-6, 1e-3]");
  }
  if (sample.empty()) return 0.0;

  Parameters analytic;
  loss_and_gradient(model, sample, q, &analytic);
  if (tamper) tamper(analytic);

  NcdModel probe = model;
  double max_err = 0.0;
  auto check = [&](double& param, double a) {
    const double saved = param;
    param = saved + epsilon;
    const double up = loss_and_gradient(probe, sample, q, nullptr);
    param = saved - epsilon;
    const double down = loss_and_gradient(probe, sample, q, nullptr);
    param = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    max_err = std::max(max_err, std::abs(a - numeric) / denom);
  };

  std::vector<int> students;
  std::vector<int> items;
  for (const auto& r : sample) {
    students.push_back(r.student);
    items.push_back(r.item);
  }
  std::sort(students.begin(), students.end());
  students.erase(std::unique(students.begin(), students.end()), students.end());
  std::sort(items.begin(), items.end());
  items.erase(std::unique(items.begin(), items.end()), items.end());

  const auto d = static_cast<std::size_t>(model.dim());
  for (int s : students) {
    for (std::size_t k = 0; k < d; ++k) {
      check(probe.params.theta(static_cast<std::size_t>(s), k),
            analytic.theta(static_cast<std::size_t>(s), k));
    }
  }
  for (int i : items) {
    const auto ii = static_cast<std::size_t>(i);
    for (std::size_t k = 0; k < d; ++k) {
      check(probe.params.beta(ii, k), analytic.beta(ii, k));
    }
    check(probe.params.alpha_raw[ii], analytic.alpha_raw[ii]);
  }
  for (std::size_t l = 0; l < probe.params.layers.size(); ++l) {
    auto& layer = probe.params.layers[l];
    const auto& g = analytic.layers[l];
    for (std::size_t i = 0; i < layer.weight.data.size(); ++i) {
      check(layer.weight.data[i], g.weight.data[i]);
    }
    for (std::size_t i = 0; i < layer.bias.size(); ++i) {
      check(layer.bias[i], g.bias[i]);
    }
  }
  return max_err;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"hidden_sizes", c.hidden_sizes},
          {"seed", c.seed},
          {"init_scale", c.init_scale},
          {"optimizer", c.optimizer == Optimizer::adam ? "adam" : "sgd"}};
}

TrainConfig train_config_from_json(const nlohmann::json& doc, TrainConfig c) {
  c.epochs = doc.value("epochs", c.epochs);
  c.learning_rate = doc.value("learning_rate", c.learning_rate);
  c.batch_size = doc.value("batch_size", c.batch_size);
  c.hidden_sizes = doc.value("hidden_sizes", c.hidden_sizes);
  c.seed = doc.value("seed", c.seed);
  c.init_scale = doc.value("init_scale", c.init_scale);
  if (doc.contains("optimizer")) {
    const auto name = doc.at("optimizer").get<std::string>();
    if (name == "adam") {
      c.optimizer = Optimizer::adam;
    } else if (name == "sgd") {
      c.optimizer = Optimizer::sgd;
    } else {
      throw Error(ErrorKind::usage, "unknown optimizer '" + name + "'");
    }
  }
  return c;
}

nlohmann::json to_json(const NcdModel& model) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < model.params.layers.size(); ++l) {
    const auto& layer = model.params.layers[l];
    const bool last = l + 1 == model.params.layers.size();
    layers.push_back({{"in", layer.weight.cols},
                      {"out", layer.weight.rows},
                      {"activation", last ? "linear" : "sigmoid"},
                      {"weight", layer.weight.data},
                      {"bias", layer.bias}});
  }
  return {{"dims",
           {{"n_students", model.n_students},
            {"n_items", model.n_items},
            {"n_knowledge", model.n_knowledge},
            {"hidden_sizes", model.config.hidden_sizes}}},
          {"theta", model.params.theta.data},
          {"beta", model.params.beta.data},
          {"alpha_raw", model.params.alpha_raw},
          {"mlp", layers},
          {"output_activation", "sigmoid"},
          {"train_config", to_json(model.config)},
          {"seed", model.config.seed}};
}

NcdModel model_from_json(const nlohmann::json& doc) {
  try {
    NcdModel model;
    const auto& dims = doc.at("dims");
    model.n_students = dims.at("n_students").get<int>();
    model.n_items = dims.at("n_items").get<int>();
    model.n_knowledge = dims.at("n_knowledge").get<int>();
    model.config = train_config_from_json(doc.value("train_config", nlohmann::json::object()));
    model.config.hidden_sizes = dims.at("hidden_sizes").get<std::vector<int>>();
    const auto d = static_cast<std::size_t>(model.n_knowledge);
    model.params.theta.rows = static_cast<std::size_t>(model.n_students);
    model.params.theta.cols = d;
    model.params.theta.data = doc.at("theta").get<std::vector<double>>();
    model.params.beta.rows = static_cast<std::size_t>(model.n_items);
    model.params.beta.cols = d;
    model.params.beta.data = doc.at("beta").get<std::vector<double>>();
    model.params.alpha_raw = doc.at("alpha_raw").get<std::vector<double>>();
    if (model.params.theta.data.size() != model.params.theta.rows * d ||
        model.params.beta.data.size() != model.params.beta.rows * d) {
      throw Error(ErrorKind::data, "model dimension mismatch: embedding sizes");
    }
    for (const auto& l : doc.at("mlp")) {
      DenseLayer layer;
      layer.weight.rows = l.at("out").get<std::size_t>();
      layer.weight.cols = l.at("in").get<std::size_t>();
      layer.weight.data = l.at("weight").get<std::vector<double>>();
      layer.bias = l.at("bias").get<std::vector<double>>();
      model.params.layers.push_back(std::move(layer));
    }
    if (model.params.layers.size() != model.config.hidden_sizes.size() + 1) {
      throw Error(ErrorKind::data, "model dimension mismatch: layer count");
    }
    model.check_dims();
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::data, std::string("malformed model document: ") + e.what());
  }
}

void save_model(const NcdModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::data, "cannot write " + path.string());
  out << to_json(model).dump() << '\n';
}

NcdModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::data, "cannot open model " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::data, "malformed model file " + path.string() + ": " + e.what());
  }
  return model_from_json(doc);
}

nlohmann::json to_json(const Metrics& m) {
  nlohmann::json auc = std::isnan(m.auc) ? nlohmann::json(nullptr) : nlohmann::json(m.auc);
  return {{"auc", auc},   {"acc", m.acc},   {"rmse", m.rmse},
          {"mse", m.mse}, {"loss", m.loss}, {"count", m.count}};
}

nlohmann::json to_json(const std::vector<EpochRecord>& history) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& rec : history) {
    out.push_back({{"epoch", rec.epoch},
                   {"train_loss", rec.train_loss},
                   {"valid", to_json(rec.valid)}});
  }
  return out;
}

}  // namespace eduloop::ncd
