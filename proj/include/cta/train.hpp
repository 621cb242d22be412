#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cta/data.hpp"
#include "cta/model.hpp"

namespace cta {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  std::size_t warmup_epochs = 3;
  std::uint64_t seed = 0;
  std::string dtype = "f32";

  void validate() const {
    if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (warmup_epochs >= epochs)
      throw ConfigError("train.warmup_epochs (" + std::to_string(warmup_epochs) + ") must be < train.epochs (" +
                        std::to_string(epochs) + ")");
    if (!(lr > 0)) throw ConfigError("train.lr must be > 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("train betas must lie in [0, 1)");
    if (!(eps > 0)) throw ConfigError("train.eps must be > 0");
    if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
    if (dtype != "f32" && dtype != "f64") throw ConfigError("train.dtype must be f32 or f64, got '" + dtype + "'");
  }
};

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m, v;  // parallel to the parameter list

  static OptimizerState for_params(const ParamList<T>& params) {
    OptimizerState s;
    for (const auto& p : params) {
      s.m.push_back(Tensor<T>::zeros(p.var.shape()));
      s.v.push_back(Tensor<T>::zeros(p.var.shape()));
    }
    return s;
  }
};

/// Decoupled weight decay with bias-corrected moments:
/// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
template <typename T>
void adamw_step(const ParamList<T>& params, OptimizerState<T>& state, double lr, const TrainConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ContractError("optimizer state tracks " + std::to_string(state.m.size()) + " tensors, model has " +
                        std::to_string(params.size()));
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto var = params[i].var;
    auto& p = var.mutable_value();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.shape() != p.shape() || v.shape() != p.shape())
      throw ContractError("optimizer moment shape " + to_string(m.shape()) + " does not match parameter " +
                          params[i].name + " " + to_string(p.shape()));
    const Tensor<T> g = var.grad();
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const double gk = static_cast<double>(g[k]);
      const double mk = cfg.beta1 * static_cast<double>(m[k]) + (1.0 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * static_cast<double>(v[k]) + (1.0 - cfg.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double pk = static_cast<double>(p[k]);
      const double update = (mk / c1) / (std::sqrt(vk / c2) + cfg.eps) + cfg.weight_decay * pk;
      p[k] = static_cast<T>(pk - lr * update);
    }
  }
}

/// Linear warmup from 0 to cfg.lr over warmup_epochs, then cosine decay to 0
/// at `epochs`. `epoch_frac` counts epochs, fractional within an epoch.
inline double lr_at(double epoch_frac, const TrainConfig& cfg) {
  const double warm = static_cast<double>(cfg.warmup_epochs), total = static_cast<double>(cfg.epochs);
  if (epoch_frac < warm) return cfg.lr * epoch_frac / warm;
  const double progress = std::clamp((epoch_frac - warm) / (total - warm), 0.0, 1.0);
  return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Metrics

/// Argmax per row, ties to the lowest index.
template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits) {
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  std::vector<std::size_t> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    out[i] = best;
  }
  return out;
}

template <typename T>
std::size_t count_correct(const Tensor<T>& logits, const std::vector<int>& labels) {
  const auto pred = argmax_rows(logits);
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) n += static_cast<int>(pred[i]) == labels[i];
  return n;
}

template <typename T>
double top1(const Tensor<T>& logits, const std::vector<int>& labels) {
  return static_cast<double>(count_correct(logits, labels)) / static_cast<double>(labels.size());
}

struct MetricsRow {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_top1 = 0;
  double val_loss = 0;
  double val_top1 = 0;
  double wall_seconds = 0;

  /// Everything except wall time.
  bool same_results(const MetricsRow& o) const {
    return epoch == o.epoch && train_loss == o.train_loss && train_top1 == o.train_top1 && val_loss == o.val_loss &&
           val_top1 == o.val_top1;
  }
};

inline constexpr const char* kMetricsHeader = "epoch,train_loss,train_top1,val_loss,val_top1,wall_seconds";

/// Losses and accuracies use round-trip precision so the CSV reproduces the run.
inline std::string format_metrics_row(const MetricsRow& r) {
  std::ostringstream os;
  os << std::setprecision(17) << r.epoch << ',' << r.train_loss << ',' << r.train_top1 << ',' << r.val_loss << ','
     << r.val_top1 << ',' << std::setprecision(6) << r.wall_seconds;
  return os.str();
}

inline MetricsRow parse_metrics_row(const std::string& line) {
  std::istringstream is(line);
  std::string f[6];
  for (auto& s : f)
    if (!std::getline(is, s, ',')) throw FormatError("metrics row needs 6 fields: '" + line + "'");
  try {
    return {std::stoul(f[0]), std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5])};
  } catch (const std::exception&) {
    throw FormatError("malformed metrics row: '" + line + "'");
  }
}

// ---------------------------------------------------------------------------
// Loops

struct EvalResult {
  double loss = 0;
  double top1 = 0;
};

/// Input preparation shared by training and evaluation: optional resize to
/// the model resolution.
template <typename T>
Tensor<T> model_input(const Tensor<T>& images, const ModelConfig& cfg) {
  return images.dim(2) == cfg.image_size ? images : resize(images, cfg.image_size);
}

/// Mean cross-entropy and top-1 over `ds`; records no graph.
template <typename T>
EvalResult evaluate(const CtaNet<T>& net, const Dataset& ds, std::size_t batch_size = 64) {
  if (ds.num_classes > net.cfg.num_classes)
    throw ConfigError("dataset has " + std::to_string(ds.num_classes) + " classes, model head has " +
                      std::to_string(net.cfg.num_classes));
  NoGradGuard guard;
  double loss_sum = 0;
  std::size_t correct = 0;
  for (const auto& idx : batch_indices(ds.size(), batch_size, std::nullopt)) {
    auto batch = gather<T>(ds, idx);
    auto logits = model_forward(constant(model_input(batch.images, net.cfg)), net);
    loss_sum += static_cast<double>(cross_entropy(logits, batch.labels).value().item()) * static_cast<double>(idx.size());
    correct += count_correct(logits.value(), batch.labels);
  }
  return {loss_sum / static_cast<double>(ds.size()), static_cast<double>(correct) / static_cast<double>(ds.size())};
}

/// Every random choice in epoch `e` derives from (seed, e), so an epoch can be
/// replayed in isolation.
inline std::uint64_t epoch_shuffle_seed(std::uint64_t seed, std::size_t epoch) { return CounterRng::derive(seed, 2 * epoch + 1); }
inline std::uint64_t epoch_augment_seed(std::uint64_t seed, std::size_t epoch) { return CounterRng::derive(seed, 2 * epoch + 2); }

/// One pass over `train` with AdamW; loss and top-1 are measured on the
/// augmented inputs before each update. Throws NumericalError on a
/// non-finite loss.
template <typename T>
EvalResult train_epoch(CtaNet<T>& net, const Dataset& train, OptimizerState<T>& state, const TrainConfig& cfg,
                       std::size_t epoch, const AugmentFlags& aug = {}) {
  if (train.num_classes > net.cfg.num_classes)
    throw ConfigError("dataset has " + std::to_string(train.num_classes) + " classes, model head has " +
                      std::to_string(net.cfg.num_classes));
  const auto params = net.parameters();
  if (state.m.empty()) state = OptimizerState<T>::for_params(params);
  const auto batches = batch_indices(train.size(), cfg.batch_size, epoch_shuffle_seed(cfg.seed, epoch));
  const auto aug_seed = epoch_augment_seed(cfg.seed, epoch);
  double loss_sum = 0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    auto batch = gather<T>(train, batches[b]);
    if (aug.any()) batch = augment(batch, aug, CounterRng::derive(aug_seed, b));
    net.zero_grad();
    auto logits = model_forward(constant(model_input(batch.images, net.cfg)), net);
    auto loss = cross_entropy(logits, batch.labels);
    const double l = static_cast<double>(loss.value().item());
    if (!std::isfinite(l)) {
      const auto op = find_non_finite(loss);
      throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(b) +
                           (op.empty() ? std::string() : " (first bad op: " + op + ")"));
    }
    backward(loss);
    const double frac = static_cast<double>(epoch) + (static_cast<double>(b) + 0.5) / static_cast<double>(batches.size());
    adamw_step(params, state, lr_at(frac, cfg), cfg);
    loss_sum += l * static_cast<double>(batch.size());
    correct += count_correct(logits.value(), batch.labels);
  }
  return {loss_sum / static_cast<double>(train.size()), static_cast<double>(correct) / static_cast<double>(train.size())};
}

/// Runs epochs [start_epoch, cfg.epochs), evaluating on `val` after each and
/// invoking `on_epoch` with the row (for logging or checkpointing).
template <typename T>
std::vector<MetricsRow> fit(CtaNet<T>& net, const Dataset& train, const Dataset& val, OptimizerState<T>& state,
                            const TrainConfig& cfg, std::size_t start_epoch = 0, const AugmentFlags& aug = {},
                            const std::function<void(const MetricsRow&)>& on_epoch = {}) {
  cfg.validate();
  std::vector<MetricsRow> rows;
  for (std::size_t e = start_epoch; e < cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto tr = train_epoch(net, train, state, cfg, e, aug);
    const auto ev = evaluate(net, val);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back({e + 1, tr.loss, tr.top1, ev.loss, ev.top1, secs});
    if (on_epoch) on_epoch(rows.back());
  }
  return rows;
}

}  // namespace cta
