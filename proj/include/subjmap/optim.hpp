#pragma once

// Optimizers, the training loop, subject fine-tuning, gradient checking and
// hyperparameter sweeps.

#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "subjmap/config_types.hpp"
#include "subjmap/datagen.hpp"
#include "subjmap/dataset.hpp"
#include "subjmap/digest.hpp"
#include "subjmap/errors.hpp"
#include "subjmap/models.hpp"

namespace subjmap {

/// A contiguous band of rows of one parameter tensor that the optimizer may
/// touch. Whole tensors use the full row range.
struct ParamSlice {
  std::string name;
  Matrix* value = nullptr;
  std::size_t row_begin = 0;
  std::size_t row_end = 0;
};

/// Every parameter of the model, in for_each_param order.
inline std::vector<ParamSlice> all_param_slices(Model& model) {
  std::vector<ParamSlice> out;
  for_each_param(model, [&](const std::string& name, Matrix& p) {
    out.push_back({name, &p, 0, p.rows()});
  });
  return out;
}

/// Gradient tensors of `grad` keyed by name.
inline std::map<std::string, const Matrix*> gradient_index(const Model& grad) {
  std::map<std::string, const Matrix*> out;
  for_each_param(grad, [&](const std::string& name, const Matrix& p) { out[name] = &p; });
  return out;
}

/// SGD or Adam over a fixed set of parameter slices. Moment buffers are
/// allocated per slice, so frozen tensors never carry state.
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::vector<ParamSlice> slices)
      : cfg_(cfg), slices_(std::move(slices)), lr_(cfg.lr) {
    for (const auto& s : slices_) {
      const std::size_t n = (s.row_end - s.row_begin) * s.value->cols();
      m_.emplace_back(n, 0.0);
      v_.emplace_back(n, 0.0);
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  const std::vector<ParamSlice>& slices() const { return slices_; }

  /// Applies one update. `grads` maps parameter names to gradient tensors of
  /// the same shape as the parameters.
  void step(const std::map<std::string, const Matrix*>& grads) {
    ++t_;
    double clip_scale = 1.0;
    if (cfg_.grad_clip) {
      double sq = 0.0;
      for (const auto& s : slices_) {
        const Matrix& g = *grads.at(s.name);
        for (std::size_t r = s.row_begin; r < s.row_end; ++r)
          for (double v : g.row(r)) sq += v * v;
      }
      const double norm = std::sqrt(sq);
      if (norm > *cfg_.grad_clip) clip_scale = *cfg_.grad_clip / norm;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < slices_.size(); ++k) {
      const auto& s = slices_[k];
      const Matrix& g = *grads.at(s.name);
      const std::size_t cols = s.value->cols();
      double* param = s.value->data() + s.row_begin * cols;
      const double* grad = g.data() + s.row_begin * cols;
      const std::size_t n = (s.row_end - s.row_begin) * cols;
      if (cfg_.optimizer == OptimizerKind::SGD) {
        for (std::size_t i = 0; i < n; ++i) param[i] -= lr_ * clip_scale * grad[i];
        continue;
      }
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = grad[i] * clip_scale;
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        param[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<ParamSlice> slices_;
  std::vector<std::vector<double>> m_, v_;
  double lr_;
  std::uint64_t t_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double metric = 0.0;  // val accuracy for classifiers, val MSE otherwise
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 0 = the initial model
  std::size_t steps = 0;
  double wall_clock_seconds = 0.0;
  std::string config_hash;
  std::map<std::string, double> final_metrics;

  /// Everything except wall-clock time.
  bool same_metrics(const TrainHistory& o) const {
    if (epochs.size() != o.epochs.size() || best_epoch != o.best_epoch || steps != o.steps ||
        config_hash != o.config_hash || final_metrics != o.final_metrics)
      return false;
    for (std::size_t i = 0; i < epochs.size(); ++i) {
      const auto& a = epochs[i];
      const auto& b = o.epochs[i];
      if (a.epoch != b.epoch || a.train_loss != b.train_loss || a.val_loss != b.val_loss ||
          a.metric != b.metric)
        return false;
    }
    return true;
  }
};

inline nlohmann::json to_json(const TrainHistory& h) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : h.epochs)
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss},
                      {"metric", e.metric}});
  return {{"epochs", epochs},
          {"best_epoch", h.best_epoch},
          {"steps", h.steps},
          {"wall_clock_seconds", h.wall_clock_seconds},
          {"config_hash", h.config_hash},
          {"final_metrics", h.final_metrics}};
}

inline std::string history_csv(const TrainHistory& h) {
  std::string out = "epoch,train_loss,val_loss,metric\n";
  for (const auto& e : h.epochs)
    out += std::to_string(e.epoch) + "," + detail::format_double(e.train_loss) + "," +
           detail::format_double(e.val_loss) + "," + detail::format_double(e.metric) + "\n";
  return out;
}

struct EvalSummary {
  double loss = 0.0;
  double mse = 0.0;
  double accuracy = 0.0;
  std::size_t rows = 0;

  /// Validation metric: accuracy for classifiers, MSE otherwise.
  double metric(Objective o) const { return o == Objective::Classifier ? accuracy : mse; }
};

/// Deterministic full-data evaluation (VAEs use z = mu), in chunks.
inline EvalSummary evaluate(const Model& model, const StackedRows& rows, std::size_t chunk = 4096) {
  EvalSummary out;
  out.rows = rows.x.rows();
  if (out.rows == 0) return out;
  double loss_sum = 0.0, mse_sum = 0.0, acc_sum = 0.0;
  for (std::size_t start = 0; start < out.rows; start += chunk) {
    const std::size_t end = std::min(out.rows, start + chunk);
    std::vector<std::size_t> idx(end - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    const Matrix x = rows.x.rows_subset(idx);
    std::span<const SubjectIndex> ids(rows.ids.data() + start, end - start);
    std::span<const int> labels;
    if (!rows.labels.empty()) labels = std::span<const int>(rows.labels.data() + start, end - start);
    const LossBreakdown l = loss(model, x, ids, labels);
    const double w = static_cast<double>(end - start);
    loss_sum += l.total * w;
    mse_sum += l.mse * w;
    acc_sum += l.accuracy * w;
  }
  const double n = static_cast<double>(out.rows);
  out.loss = loss_sum / n;
  out.mse = mse_sum / n;
  out.accuracy = acc_sum / n;
  return out;
}

inline std::string config_hash(const TrainConfig& cfg, const ModelSpec& spec) {
  return canonical_hash({{"train", to_json(cfg)}, {"model", to_json(spec)}});
}

inline void reorthonormalize(Model& model) {
  reorthonormalize(model.encoder_map);
  if (model.decoder_map) reorthonormalize(*model.decoder_map);
}

inline double orthogonality_error(const Model& model) {
  double e = orthogonality_error(model.encoder_map);
  if (model.decoder_map) e = std::max(e, orthogonality_error(*model.decoder_map));
  return e;
}

struct TrainResult {
  Model model;  // best-validation snapshot
  TrainHistory history;
};

namespace detail {

inline void check_subjects(const Model& model, const MultiSubjectDataset& data, const char* what) {
  if (data.size() > model.spec.n_subjects)
    throw UnknownSubject(std::string(what) + " has " + std::to_string(data.size()) +
                         " subjects but the model holds " + std::to_string(model.spec.n_subjects));
  if (data.size() && data.n_features != model.spec.input_size)
    throw ShapeError(std::string(what) + " has " + std::to_string(data.n_features) +
                     " features, model expects " + std::to_string(model.spec.input_size));
  if (model.spec.objective == Objective::Classifier && data.size() && !data.has_labels())
    throw MissingLabels(std::string(what) + " has no timestep labels");
}

struct Batch {
  Matrix x;
  std::vector<SubjectIndex> ids;
  std::vector<int> labels;
};

inline Batch gather_batch(const StackedRows& rows, std::span<const std::size_t> idx) {
  Batch b;
  b.x = rows.x.rows_subset(idx);
  b.ids.reserve(idx.size());
  for (auto i : idx) b.ids.push_back(rows.ids[i]);
  if (!rows.labels.empty())
    for (auto i : idx) b.labels.push_back(rows.labels[i]);
  return b;
}

}  // namespace detail

/// Minibatch training on (subject, timestep) rows drawn across all subjects.
/// Subject i of `train_data` / `val_data` is subject index i of the model.
/// Returns the snapshot with the lowest validation loss (train loss when
/// `val_data` is empty).
inline TrainResult train(const Model& initial, const MultiSubjectDataset& train_data,
                         const MultiSubjectDataset& val_data, const TrainConfig& cfg) {
  cfg.validate();
  detail::check_subjects(initial, train_data, "training data");
  detail::check_subjects(initial, val_data, "validation data");
  const auto t0 = std::chrono::steady_clock::now();

  TrainResult result{initial, {}};
  result.history.config_hash = config_hash(cfg, initial.spec);
  Model model = initial;
  const Objective objective = model.spec.objective;

  const StackedRows train_rows = stack_rows(train_data);
  const StackedRows val_rows = stack_rows(val_data);
  const bool has_val = val_rows.x.rows() > 0;

  Optimizer opt(cfg, all_param_slices(model));
  SeededRng order_rng(derive_seed(cfg.seed, "batch-order"));
  SeededRng noise_rng(derive_seed(cfg.seed, "reparameterization"));

  auto score = [&](const Model& m) {
    return has_val ? evaluate(m, val_rows) : evaluate(m, train_rows);
  };
  EvalSummary best = score(model);
  double best_loss = best.loss;
  std::size_t since_best = 0;

  std::vector<std::size_t> order(train_rows.x.rows());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && !order.empty(); ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const detail::Batch b = detail::gather_batch(
          train_rows, std::span<const std::size_t>(order.data() + start, end - start));
      SeededRng* rng = objective == Objective::VAE ? &noise_rng : nullptr;
      LossAndGradient lg = loss_and_gradient(model, b.x, b.ids, b.labels, rng);
      ++step;
      if (!std::isfinite(lg.loss.total))
        throw DivergenceError("non-finite loss at step " + std::to_string(step));
      opt.step(gradient_index(lg.grad));
      if (step % cfg.orth_every == 0) reorthonormalize(model);
      if (!all_params_finite(model))
        throw DivergenceError("non-finite parameters after step " + std::to_string(step));
      loss_sum += lg.loss.total * static_cast<double>(end - start);
    }
    if (step % cfg.orth_every != 0) reorthonormalize(model);

    const EvalSummary current = score(model);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(order.size()), current.loss,
                    current.metric(objective)};
    result.history.epochs.push_back(rec);
    if (current.loss < best_loss) {
      best_loss = current.loss;
      best = current;
      result.model = model;
      result.history.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
    opt.set_lr(opt.lr() * cfg.lr_decay);
  }

  result.history.steps = step;
  result.history.final_metrics["best_val_loss"] = best.loss;
  result.history.final_metrics[objective == Objective::Classifier ? "best_val_accuracy"
                                                                  : "best_val_mse"] =
      best.metric(objective);
  result.history.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

struct FinetuneResult {
  Model model;              // original subjects followed by the new ones
  Matrix encoder_rows;      // fitted new-subject rows (s rows, or flattened W_i)
  Matrix decoder_rows;      // empty for classifiers
  std::size_t first_new_subject = 0;
  TrainHistory history;
};

namespace detail {

// Slices covering only the appended subjects of one map.
inline void new_subject_slices(SubjectLayer& layer, const std::string& prefix, std::size_t first,
                               std::vector<ParamSlice>& out) {
  if (auto* d = std::get_if<DecomposedMap>(&layer)) {
    out.push_back({prefix + ".s", &d->singular, first, d->singular.rows()});
  } else if (auto* s = std::get_if<SubjectMap>(&layer)) {
    for (std::size_t i = first; i < s->weights.size(); ++i)
      out.push_back({prefix + ".weight." + std::to_string(i), &s->weights[i], 0, s->weights[i].rows()});
  }
}

inline Matrix extract_new_rows(const SubjectLayer& layer, std::size_t first) {
  if (const auto* d = std::get_if<DecomposedMap>(&layer)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = first; i < d->singular.rows(); ++i) idx.push_back(i);
    return d->singular.rows_subset(idx);
  }
  if (const auto* s = std::get_if<SubjectMap>(&layer)) {
    if (first >= s->weights.size()) return {};
    Matrix out(s->weights.size() - first, s->weights[first].size());
    for (std::size_t i = first; i < s->weights.size(); ++i)
      std::copy(s->weights[i].values().begin(), s->weights[i].values().end(), out.row(i - first).begin());
    return out;
  }
  return {};
}

}  // namespace detail

/// Fits only the subject-specific weights of unseen subjects, every other
/// parameter frozen. New subjects are appended after the model's existing
/// ones, initialized at the mean of the trained subjects, and fitted with
/// full-batch steps on the leading ⌈fraction·T⌉ timesteps until the relative
/// loss change over 10 steps drops below `cfg.finetune_tol`.
inline FinetuneResult finetune_subjects(const Model& trained, const MultiSubjectDataset& new_data,
                                        double fraction, const TrainConfig& cfg) {
  cfg.validate();
  const MultiSubjectDataset subset = leading_timesteps(new_data, fraction);
  if (subset.n_features != trained.spec.input_size)
    throw ShapeError("new subjects have " + std::to_string(subset.n_features) +
                     " features, model expects " + std::to_string(trained.spec.input_size));
  if (trained.spec.objective == Objective::Classifier && !subset.has_labels())
    throw MissingLabels("classifier fine-tuning needs timestep labels");
  const auto t0 = std::chrono::steady_clock::now();

  FinetuneResult out;
  out.first_new_subject = trained.spec.n_subjects;
  out.model = trained;
  append_subjects(out.model, new_data.size());
  out.history.config_hash = config_hash(cfg, out.model.spec);

  std::vector<ParamSlice> slices;
  detail::new_subject_slices(out.model.encoder_map, "encoder_map", out.first_new_subject, slices);
  if (out.model.decoder_map)
    detail::new_subject_slices(*out.model.decoder_map, "decoder_map", out.first_new_subject, slices);

  const StackedRows rows = stack_rows(subset, static_cast<SubjectIndex>(out.first_new_subject));
  if (!slices.empty()) {
    Optimizer opt(cfg, slices);
    std::vector<double> losses;
    for (std::size_t step = 1; step <= cfg.finetune_max_steps; ++step) {
      LossAndGradient lg = loss_and_gradient(out.model, rows.x, rows.ids, rows.labels);
      if (!std::isfinite(lg.loss.total))
        throw DivergenceError("non-finite loss at fine-tuning step " + std::to_string(step));
      losses.push_back(lg.loss.total);
      opt.step(gradient_index(lg.grad));
      out.history.steps = step;
      if (losses.size() > 10) {
        const double prev = losses[losses.size() - 11];
        if (std::abs(prev - losses.back()) <= cfg.finetune_tol * std::max(std::abs(prev), 1e-300))
          break;
      }
    }
    for (std::size_t i = 0; i < losses.size(); ++i)
      out.history.epochs.push_back({i + 1, losses[i], losses[i], losses[i]});
  }
  const EvalSummary final_eval = evaluate(out.model, rows);
  out.history.final_metrics["finetune_loss"] = final_eval.loss;
  out.history.best_epoch = out.history.epochs.size();
  out.encoder_rows = detail::extract_new_rows(out.model.encoder_map, out.first_new_subject);
  if (out.model.decoder_map)
    out.decoder_rows = detail::extract_new_rows(*out.model.decoder_map, out.first_new_subject);
  out.history.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

/// SHA-256 over every parameter tensor (name, shape, raw bytes) except the
/// subject-specific entries of subjects ≥ `first_excluded_subject`.
inline std::string parameter_digest(const Model& model, std::size_t first_excluded_subject) {
  Sha256 h;
  for_each_param(model, [&](const std::string& name, const Matrix& p) {
    std::size_t rows = p.rows();
    const bool per_subject_rows = name.ends_with(".s");
    if (per_subject_rows) rows = std::min(rows, first_excluded_subject);
    const bool per_subject_matrix =
        name.find(".weight.") != std::string::npos &&
        (name.starts_with("encoder_map") || name.starts_with("decoder_map"));
    if (per_subject_matrix) {
      const auto idx = std::stoul(name.substr(name.rfind('.') + 1));
      if (idx >= first_excluded_subject) return;
    }
    h.update(name);
    const std::uint64_t shape[2] = {rows, p.cols()};
    h.update(shape, sizeof shape);
    h.update(p.data(), rows * p.cols() * sizeof(double));
  });
  return h.hex();
}

/// Worst relative error |g − g_fd| / max(1e-8, |g| + |g_fd|) over every
/// parameter, with central differences of step h. VAEs are checked in the
/// z = mu mode.
inline double grad_check(const Model& model, const Matrix& x, std::span<const SubjectIndex> ids,
                         std::span<const int> labels = {}, double h = 1e-5) {
  const LossAndGradient lg = loss_and_gradient(model, x, ids, labels);
  const auto grads = gradient_index(lg.grad);
  Model probe = model;
  double worst = 0.0;
  for (const auto& slice : all_param_slices(probe)) {
    const Matrix& g = *grads.at(slice.name);
    for (std::size_t i = 0; i < slice.value->size(); ++i) {
      double& p = slice.value->values()[i];
      const double saved = p;
      p = saved + h;
      const double up = loss(probe, x, ids, labels).total;
      p = saved - h;
      const double down = loss(probe, x, ids, labels).total;
      p = saved;
      const double fd = (up - down) / (2.0 * h);
      const double analytic = g.values()[i];
      const double rel = std::abs(analytic - fd) / std::max(1e-8, std::abs(analytic) + std::abs(fd));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepSetting {
  ModelSpec spec;
  TrainConfig train;
  nlohmann::json label;  // the grid coordinates that produced this setting
};

struct SweepCell {
  std::size_t setting = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double val_metric = 0.0;
  double val_loss = 0.0;
  double test_metric = 0.0;
  std::size_t epochs_run = 0;
};

struct SweepRanking {
  std::size_t setting = 0;
  double mean_val_metric = 0.0;
  double mean_test_metric = 0.0;
  std::size_t successful_seeds = 0;
};

struct SweepTable {
  std::vector<SweepCell> cells;        // ordered by (setting, seed index)
  std::vector<SweepRanking> ranking;   // best first
  std::size_t winner = 0;
  bool higher_is_better = true;
};

struct SweepData {
  const MultiSubjectDataset* train = nullptr;
  const MultiSubjectDataset* val = nullptr;
  const MultiSubjectDataset* test = nullptr;  // optional
};

/// Invoked after each finished cell with its trained model (for callers that
/// want to keep the winners). Must be thread-safe.
using CellCallback = std::function<void(const SweepCell&, const TrainResult&)>;

/// Trains every (setting, seed) cell, ranks settings by their mean validation
/// metric across seeds (accuracy up for classifiers, MSE down otherwise).
/// Failed cells are recorded and excluded from the means. Cells run on
/// `workers` threads; results are merged by (setting, seed) position.
inline SweepTable hyperparameter_sweep(const std::vector<SweepSetting>& grid,
                                       const std::vector<std::uint64_t>& seeds,
                                       const SweepData& data, std::size_t workers = 1,
                                       const CellCallback& on_cell = {}) {
  if (grid.empty() || seeds.empty()) throw ConfigError("sweep needs a non-empty grid and seed list");
  SweepTable table;
  table.higher_is_better = grid.front().spec.objective == Objective::Classifier;
  table.cells.resize(grid.size() * seeds.size());

  auto run_cell = [&](std::size_t k) {
    SweepCell cell;
    cell.setting = k / seeds.size();
    cell.seed = seeds[k % seeds.size()];
    try {
      const SweepSetting& setting = grid[cell.setting];
      TrainConfig cfg = setting.train;
      cfg.seed = cell.seed;
      const Model init = make_model(setting.spec, derive_seed(cell.seed, "init"));
      TrainResult r = train(init, *data.train, *data.val, cfg);
      const Objective o = setting.spec.objective;
      const EvalSummary val = evaluate(r.model, stack_rows(*data.val));
      cell.val_metric = val.metric(o);
      cell.val_loss = val.loss;
      if (data.test) cell.test_metric = evaluate(r.model, stack_rows(*data.test)).metric(o);
      cell.epochs_run = r.history.epochs.size();
      cell.ok = true;
      if (on_cell) on_cell(cell, r);
    } catch (const std::exception& e) {
      cell.ok = false;
      cell.error = e.what();
    }
    table.cells[k] = cell;
  };

  const std::size_t n_cells = table.cells.size();
  const std::size_t n_workers = std::max<std::size_t>(1, std::min(workers, n_cells));
  if (n_workers == 1) {
    for (std::size_t k = 0; k < n_cells; ++k) run_cell(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < n_workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t k = next++; k < n_cells; k = next++) run_cell(k);
      });
  }

  for (std::size_t s = 0; s < grid.size(); ++s) {
    SweepRanking r{s, 0.0, 0.0, 0};
    for (std::size_t j = 0; j < seeds.size(); ++j) {
      const auto& c = table.cells[s * seeds.size() + j];
      if (!c.ok) continue;
      r.mean_val_metric += c.val_metric;
      r.mean_test_metric += c.test_metric;
      ++r.successful_seeds;
    }
    if (r.successful_seeds) {
      r.mean_val_metric /= static_cast<double>(r.successful_seeds);
      r.mean_test_metric /= static_cast<double>(r.successful_seeds);
    }
    table.ranking.push_back(r);
  }
  const bool hib = table.higher_is_better;
  std::stable_sort(table.ranking.begin(), table.ranking.end(), [hib](const auto& a, const auto& b) {
    if ((a.successful_seeds > 0) != (b.successful_seeds > 0)) return a.successful_seeds > 0;
    return hib ? a.mean_val_metric > b.mean_val_metric : a.mean_val_metric < b.mean_val_metric;
  });
  table.winner = table.ranking.front().setting;
  return table;
}

}  // namespace subjmap
