#pragma once

// Classifier, autoencoder and VAE built from a subject-specific input map, a
// shared tanh trunk, and (for the generative objectives) a subject-specific
// output map.
//
//   encoder:  h = map_enc(x);  a = tanh(h) → tanh(dense)… ;  mu = dense(a)
//   decoder:  g = tanh(dense(… tanh(dense(z))));  x̂ = map_dec(g)
//
// With an empty trunk both nonlinear stages are the identity, so the latent
// size must equal the first-layer width.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "subjmap/errors.hpp"
#include "subjmap/layers.hpp"
#include "subjmap/linalg.hpp"
#include "subjmap/rng.hpp"

namespace subjmap {

enum class Objective { Classifier, Autoencoder, VAE };

inline std::string_view to_string(Objective o) {
  switch (o) {
    case Objective::Classifier: return "classifier";
    case Objective::Autoencoder: return "autoencoder";
    case Objective::VAE: return "vae";
  }
  return "?";
}

inline Objective parse_objective(std::string_view s) {
  if (s == "classifier") return Objective::Classifier;
  if (s == "autoencoder") return Objective::Autoencoder;
  if (s == "vae") return Objective::VAE;
  throw ConfigError("unknown objective '" + std::string(s) + "'");
}

struct ModelSpec {
  LayerVariant variant = LayerVariant::Decomposed;
  std::size_t input_size = 0;         // N
  std::size_t first_layer_width = 0;  // L
  std::vector<std::size_t> trunk_widths;
  std::size_t latent_size = 0;        // d; equals n_classes for classifiers
  Objective objective = Objective::Autoencoder;
  std::size_t n_subjects = 0;         // M
  std::size_t n_classes = 0;
  double beta = 1.0;                  // KL weight

  bool operator==(const ModelSpec&) const = default;

  void validate() const {
    if (input_size == 0 || first_layer_width == 0 || latent_size == 0 || n_subjects == 0)
      throw ShapeError("model sizes must be positive");
    if (trunk_widths.empty() && latent_size != first_layer_width)
      throw ShapeError("an empty trunk needs latent_size == first_layer_width");
    for (auto w : trunk_widths)
      if (w == 0) throw ShapeError("trunk widths must be positive");
    if (objective == Objective::Classifier) {
      if (n_classes < 2) throw ShapeError("classifier needs at least 2 classes");
      if (latent_size != n_classes) throw ShapeError("classifier latent_size must equal n_classes");
    }
    if (!(beta >= 0.0)) throw ShapeError("beta must be non-negative");
  }
};

struct Dense {
  Matrix weight;  // in × out
  Matrix bias;    // 1 × out

  bool present() const { return !weight.empty(); }
};

struct Model {
  ModelSpec spec;
  std::uint64_t init_seed = 0;
  SubjectLayer encoder_map;
  std::vector<Dense> encoder_trunk;
  Dense mean_head;                   // absent with an empty trunk
  Dense logvar_head;                 // VAE only
  std::optional<SubjectLayer> decoder_map;
  std::vector<Dense> decoder_trunk;  // ends in a layer of width L
};

inline Dense make_dense(std::size_t in, std::size_t out, SeededRng& rng) {
  const double a = glorot_bound(in, out);
  return {Matrix::uniform(in, out, rng, -a, a), Matrix(1, out)};
}

inline Model make_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  SeededRng rng(seed);
  Model m;
  m.spec = spec;
  m.init_seed = seed;
  m.encoder_map = make_subject_layer(spec.variant, MapSide::Encoder, spec.input_size,
                                     spec.first_layer_width, spec.n_subjects, rng);
  std::size_t width = spec.first_layer_width;
  for (auto w : spec.trunk_widths) {
    m.encoder_trunk.push_back(make_dense(width, w, rng));
    width = w;
  }
  if (!spec.trunk_widths.empty()) m.mean_head = make_dense(width, spec.latent_size, rng);
  if (spec.objective == Objective::VAE) m.logvar_head = make_dense(width, spec.latent_size, rng);

  if (spec.objective != Objective::Classifier) {
    if (!spec.trunk_widths.empty()) {
      width = spec.latent_size;
      for (auto it = spec.trunk_widths.rbegin(); it != spec.trunk_widths.rend(); ++it) {
        m.decoder_trunk.push_back(make_dense(width, *it, rng));
        width = *it;
      }
      m.decoder_trunk.push_back(make_dense(width, spec.first_layer_width, rng));
    }
    m.decoder_map = make_subject_layer(spec.variant, MapSide::Decoder, spec.input_size,
                                       spec.first_layer_width, spec.n_subjects, rng);
  }
  return m;
}

/// Visits every parameter tensor of the model in a fixed order with a stable
/// name. Works on const and non-const models.
template <typename M, typename Fn>
  requires std::is_same_v<std::remove_const_t<M>, Model>
void for_each_param(M& model, Fn&& fn) {
  for_each_param(model.encoder_map, "encoder_map", fn);
  for (std::size_t i = 0; i < model.encoder_trunk.size(); ++i) {
    fn("encoder_trunk." + std::to_string(i) + ".weight", model.encoder_trunk[i].weight);
    fn("encoder_trunk." + std::to_string(i) + ".bias", model.encoder_trunk[i].bias);
  }
  if (model.mean_head.present()) {
    fn(std::string("mean_head.weight"), model.mean_head.weight);
    fn(std::string("mean_head.bias"), model.mean_head.bias);
  }
  if (model.logvar_head.present()) {
    fn(std::string("logvar_head.weight"), model.logvar_head.weight);
    fn(std::string("logvar_head.bias"), model.logvar_head.bias);
  }
  for (std::size_t i = 0; i < model.decoder_trunk.size(); ++i) {
    fn("decoder_trunk." + std::to_string(i) + ".weight", model.decoder_trunk[i].weight);
    fn("decoder_trunk." + std::to_string(i) + ".bias", model.decoder_trunk[i].bias);
  }
  if (model.decoder_map) for_each_param(*model.decoder_map, "decoder_map", fn);
}

/// Same structure as `model`, every parameter zero.
inline Model zeros_like(const Model& model) {
  Model z = model;
  for_each_param(z, [](const std::string&, Matrix& p) { p.fill(0.0); });
  return z;
}

inline std::size_t total_param_count(const Model& model) {
  std::size_t n = 0;
  for_each_param(model, [&](const std::string&, const Matrix& p) { n += p.size(); });
  return n;
}

inline bool all_params_finite(const Model& model) {
  bool ok = true;
  for_each_param(model, [&](const std::string&, const Matrix& p) { ok = ok && p.all_finite(); });
  return ok;
}

/// Adds `count` unseen subjects to every subject map, initialized at the mean
/// of the existing subjects.
inline void append_subjects(Model& model, std::size_t count) {
  append_subjects(model.encoder_map, count);
  if (model.decoder_map) append_subjects(*model.decoder_map, count);
  model.spec.n_subjects += count;
}

constexpr double kLogvarMin = -20.0;
constexpr double kLogvarMax = 20.0;

struct LatentBatch {
  Matrix z;       // B × d
  Matrix mu;      // VAE only
  Matrix logvar;  // VAE only, clamped to [−20, 20]
};

namespace detail {

inline Matrix dense_forward(const Dense& layer, const Matrix& x) {
  Matrix y = matmul(x, layer.weight);
  add_row_vector(y, layer.bias);
  return y;
}

inline void tanh_inplace(Matrix& m) {
  for (auto& v : m.values()) v = std::tanh(v);
}

inline void check_batch(const Model& model, const Matrix& x, std::span<const SubjectIndex> ids) {
  if (x.cols() != model.spec.input_size)
    throw ShapeError("input width " + std::to_string(x.cols()) + " but model expects " +
                     std::to_string(model.spec.input_size));
  if (ids.size() != x.rows()) throw ShapeError("subject id count does not match batch rows");
}

// Activations kept for backprop.
struct EncoderPass {
  Matrix h;                     // map output
  std::vector<Matrix> acts;     // tanh(h), then each trunk layer's tanh output
  Matrix mu;
  Matrix logvar_raw;
  Matrix logvar;
};

inline EncoderPass run_encoder(const Model& model, const Matrix& x,
                               std::span<const SubjectIndex> ids) {
  check_batch(model, x, ids);
  EncoderPass p;
  p.h = forward(model.encoder_map, x, ids);
  const Matrix* features = &p.h;
  if (!model.encoder_trunk.empty()) {
    Matrix a = p.h;
    tanh_inplace(a);
    p.acts.push_back(std::move(a));
    for (const auto& layer : model.encoder_trunk) {
      Matrix next = dense_forward(layer, p.acts.back());
      tanh_inplace(next);
      p.acts.push_back(std::move(next));
    }
    features = &p.acts.back();
    p.mu = dense_forward(model.mean_head, *features);
  } else {
    p.mu = p.h;
  }
  if (model.spec.objective == Objective::VAE) {
    p.logvar_raw = dense_forward(model.logvar_head, *features);
    p.logvar = p.logvar_raw;
    for (auto& v : p.logvar.values()) v = std::clamp(v, kLogvarMin, kLogvarMax);
  }
  return p;
}

struct DecoderPass {
  std::vector<Matrix> acts;  // z, then each trunk layer's tanh output (last is g)
  Matrix out;
};

inline DecoderPass run_decoder(const Model& model, const Matrix& z,
                               std::span<const SubjectIndex> ids) {
  if (!model.decoder_map) throw ShapeError("classifier models have no decoder");
  if (z.cols() != model.spec.latent_size)
    throw ShapeError("latent width " + std::to_string(z.cols()) + " but model expects " +
                     std::to_string(model.spec.latent_size));
  if (ids.size() != z.rows()) throw ShapeError("subject id count does not match batch rows");
  DecoderPass p;
  p.acts.push_back(z);
  for (const auto& layer : model.decoder_trunk) {
    Matrix next = dense_forward(layer, p.acts.back());
    tanh_inplace(next);
    p.acts.push_back(std::move(next));
  }
  p.out = forward(*model.decoder_map, p.acts.back(), ids);
  return p;
}

// ∂loss/∂input through a tanh dense layer whose output is `act`;
// accumulates parameter gradients into `grad`.
inline Matrix dense_tanh_backward(const Dense& layer, const Matrix& input, const Matrix& act,
                                  const Matrix& grad_act, Dense& grad) {
  Matrix pre = grad_act;
  for (std::size_t i = 0; i < pre.size(); ++i) {
    const double a = act.values()[i];
    pre.values()[i] *= 1.0 - a * a;
  }
  grad.weight += matmul_tn(input, pre);
  grad.bias += column_sums(pre);
  return matmul_nt(pre, layer.weight);
}

inline Matrix dense_linear_backward(const Dense& layer, const Matrix& input,
                                    const Matrix& grad_out, Dense& grad) {
  grad.weight += matmul_tn(input, grad_out);
  grad.bias += column_sums(grad_out);
  return matmul_nt(grad_out, layer.weight);
}

inline void accumulate(SubjectLayer& dst, const SubjectLayer& src) {
  std::vector<Matrix*> d;
  for_each_param(dst, "", [&](const std::string&, Matrix& p) { d.push_back(&p); });
  std::size_t i = 0;
  for_each_param(src, "", [&](const std::string&, const Matrix& p) { *d[i++] += p; });
}

// Backprop from ∂loss/∂mu and ∂loss/∂logvar_raw down through the encoder.
inline void encoder_backward(const Model& model, const Matrix& x, std::span<const SubjectIndex> ids,
                             const EncoderPass& pass, const Matrix& grad_mu,
                             const Matrix* grad_logvar_raw, Model& grad) {
  Matrix grad_h;
  if (!model.encoder_trunk.empty()) {
    const Matrix& features = pass.acts.back();
    Matrix grad_features =
        dense_linear_backward(model.mean_head, features, grad_mu, grad.mean_head);
    if (grad_logvar_raw)
      grad_features += dense_linear_backward(model.logvar_head, features, *grad_logvar_raw,
                                             grad.logvar_head);
    Matrix g = std::move(grad_features);
    for (std::size_t i = model.encoder_trunk.size(); i-- > 0;)
      g = dense_tanh_backward(model.encoder_trunk[i], pass.acts[i], pass.acts[i + 1], g,
                              grad.encoder_trunk[i]);
    // through tanh(h)
    const Matrix& a0 = pass.acts.front();
    for (std::size_t i = 0; i < g.size(); ++i) g.values()[i] *= 1.0 - a0.values()[i] * a0.values()[i];
    grad_h = std::move(g);
  } else {
    grad_h = grad_mu;
    if (grad_logvar_raw)
      grad_h += dense_linear_backward(model.logvar_head, pass.h, *grad_logvar_raw, grad.logvar_head);
  }
  LayerGradients lg = backward(model.encoder_map, x, ids, grad_h);
  accumulate(grad.encoder_map, lg.params);
}

// Returns ∂loss/∂z.
inline Matrix decoder_backward(const Model& model, std::span<const SubjectIndex> ids,
                               const DecoderPass& pass, const Matrix& grad_out, Model& grad) {
  LayerGradients lg = backward(*model.decoder_map, pass.acts.back(), ids, grad_out);
  accumulate(*grad.decoder_map, lg.params);
  Matrix g = std::move(lg.input);
  for (std::size_t i = model.decoder_trunk.size(); i-- > 0;)
    g = dense_tanh_backward(model.decoder_trunk[i], pass.acts[i], pass.acts[i + 1], g,
                            grad.decoder_trunk[i]);
  return g;
}

inline Matrix sample_noise(std::size_t rows, std::size_t cols, SeededRng& rng) {
  return Matrix::gaussian(rows, cols, rng);
}

}  // namespace detail

/// Latents for a batch. VAEs sample z = mu + σ·ε when `rng` is given and
/// return z = mu otherwise.
inline LatentBatch encode(const Model& model, const Matrix& x, std::span<const SubjectIndex> ids,
                          SeededRng* rng = nullptr) {
  detail::EncoderPass p = detail::run_encoder(model, x, ids);
  LatentBatch out;
  if (model.spec.objective == Objective::VAE) {
    out.z = p.mu;
    if (rng) {
      const Matrix eps = detail::sample_noise(p.mu.rows(), p.mu.cols(), *rng);
      for (std::size_t i = 0; i < out.z.size(); ++i)
        out.z.values()[i] += std::exp(0.5 * p.logvar.values()[i]) * eps.values()[i];
    }
    out.mu = std::move(p.mu);
    out.logvar = std::move(p.logvar);
  } else {
    out.z = std::move(p.mu);
  }
  return out;
}

inline Matrix decode(const Model& model, const Matrix& z, std::span<const SubjectIndex> ids) {
  return detail::run_decoder(model, z, ids).out;
}

/// Row-wise softmax of classifier logits.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix p = logits;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    auto row = p.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (auto& v : row) sum += (v = std::exp(v - mx));
    for (auto& v : row) v /= sum;
  }
  return p;
}

inline Matrix predict_proba(const Model& model, const Matrix& x, std::span<const SubjectIndex> ids) {
  if (model.spec.objective != Objective::Classifier) throw ShapeError("not a classifier");
  return softmax_rows(encode(model, x, ids).z);
}

inline std::vector<int> predict(const Model& model, const Matrix& x,
                                std::span<const SubjectIndex> ids) {
  const Matrix logits = encode(model, x, ids).z;
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

struct LossBreakdown {
  double total = 0.0;
  double mse = 0.0;            // autoencoder / VAE: mean over all entries
  double kl = 0.0;             // VAE: mean over rows of the summed KL
  double cross_entropy = 0.0;  // classifier
  double accuracy = 0.0;       // classifier
};

struct LossAndGradient {
  LossBreakdown loss;
  Model grad;
};

namespace detail {

inline LossAndGradient evaluate_loss(const Model& model, const Matrix& x,
                                     std::span<const SubjectIndex> ids,
                                     std::span<const int> labels, SeededRng* rng,
                                     bool with_gradient) {
  const auto& spec = model.spec;
  if (spec.objective == Objective::Classifier && labels.size() != x.rows())
    throw MissingLabels("classifier loss needs one label per row");
  LossAndGradient out;
  if (with_gradient) out.grad = zeros_like(model);
  const double b = static_cast<double>(x.rows());

  EncoderPass enc = run_encoder(model, x, ids);

  if (spec.objective == Objective::Classifier) {
    const Matrix probs = softmax_rows(enc.mu);
    double ce = 0.0;
    std::size_t correct = 0;
    Matrix grad_logits = probs;
    for (std::size_t r = 0; r < probs.rows(); ++r) {
      const int y = labels[r];
      if (y < 0 || static_cast<std::size_t>(y) >= spec.n_classes)
        throw MissingLabels("label " + std::to_string(y) + " outside class range");
      auto row = probs.row(r);
      ce -= std::log(std::max(row[static_cast<std::size_t>(y)], 1e-300));
      const auto arg = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (arg == static_cast<std::size_t>(y)) ++correct;
      grad_logits(r, static_cast<std::size_t>(y)) -= 1.0;
    }
    out.loss.cross_entropy = ce / b;
    out.loss.accuracy = static_cast<double>(correct) / b;
    out.loss.total = out.loss.cross_entropy;
    if (with_gradient) {
      grad_logits *= 1.0 / b;
      encoder_backward(model, x, ids, enc, grad_logits, nullptr, out.grad);
    }
    return out;
  }

  Matrix z = enc.mu;
  Matrix eps;
  if (spec.objective == Objective::VAE && rng) {
    eps = sample_noise(z.rows(), z.cols(), *rng);
    for (std::size_t i = 0; i < z.size(); ++i)
      z.values()[i] += std::exp(0.5 * enc.logvar.values()[i]) * eps.values()[i];
  }
  DecoderPass dec = run_decoder(model, z, ids);
  const double n_entries = b * static_cast<double>(spec.input_size);
  double sse = 0.0;
  Matrix grad_out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double diff = dec.out.values()[i] - x.values()[i];
    sse += diff * diff;
    grad_out.values()[i] = 2.0 * diff / n_entries;
  }
  out.loss.mse = sse / n_entries;
  out.loss.total = out.loss.mse;

  double kl = 0.0;
  if (spec.objective == Objective::VAE) {
    for (std::size_t i = 0; i < enc.mu.size(); ++i) {
      const double m = enc.mu.values()[i];
      const double lv = enc.logvar.values()[i];
      kl += 0.5 * (m * m + std::exp(lv) - 1.0 - lv);
    }
    out.loss.kl = kl / b;
    // KL is per sample while the MSE is per entry; dividing by N puts both on
    // the per-entry scale of a unit-variance Gaussian likelihood.
    out.loss.total += spec.beta * out.loss.kl / static_cast<double>(spec.input_size);
  }
  if (!with_gradient) return out;

  const Matrix grad_z = decoder_backward(model, ids, dec, grad_out, out.grad);
  if (spec.objective != Objective::VAE) {
    encoder_backward(model, x, ids, enc, grad_z, nullptr, out.grad);
    return out;
  }
  const double kl_scale = spec.beta / (b * static_cast<double>(spec.input_size));
  Matrix grad_mu = grad_z;
  Matrix grad_lv_raw(enc.mu.rows(), enc.mu.cols());
  for (std::size_t i = 0; i < grad_mu.size(); ++i) {
    const double m = enc.mu.values()[i];
    const double lv = enc.logvar.values()[i];
    grad_mu.values()[i] += kl_scale * m;
    double g_lv = kl_scale * 0.5 * (std::exp(lv) - 1.0);
    if (!eps.empty()) g_lv += grad_z.values()[i] * 0.5 * std::exp(0.5 * lv) * eps.values()[i];
    const double raw = enc.logvar_raw.values()[i];
    grad_lv_raw.values()[i] = (raw > kLogvarMin && raw < kLogvarMax) ? g_lv : 0.0;
  }
  encoder_backward(model, x, ids, enc, grad_mu, &grad_lv_raw, out.grad);
  return out;
}

}  // namespace detail

/// Objective value and its terms. Autoencoder: MSE. VAE: MSE + β·KL/N.
/// Classifier: mean softmax cross-entropy. VAEs sample z only when `rng` is
/// given.
inline LossBreakdown loss(const Model& model, const Matrix& x, std::span<const SubjectIndex> ids,
                          std::span<const int> labels = {}, SeededRng* rng = nullptr) {
  return detail::evaluate_loss(model, x, ids, labels, rng, false).loss;
}

inline LossAndGradient loss_and_gradient(const Model& model, const Matrix& x,
                                         std::span<const SubjectIndex> ids,
                                         std::span<const int> labels = {},
                                         SeededRng* rng = nullptr) {
  return detail::evaluate_loss(model, x, ids, labels, rng, true);
}

/// For each requested subject, decodes the latent points that are zero
/// except coordinate `dim`, which sweeps `grid`. Returns one grid×N stack per
/// subject, in the order given.
inline std::vector<Matrix> latent_traversal(const Model& model, std::size_t dim,
                                            std::span<const double> grid,
                                            std::span<const SubjectIndex> subjects) {
  if (model.spec.objective == Objective::Classifier)
    throw DimensionError("latent traversal needs an autoencoder or VAE");
  if (dim >= model.spec.latent_size)
    throw DimensionError("latent dim " + std::to_string(dim) + " >= " +
                         std::to_string(model.spec.latent_size));
  Matrix z(grid.size(), model.spec.latent_size);
  for (std::size_t g = 0; g < grid.size(); ++g) z(g, dim) = grid[g];
  std::vector<Matrix> stacks;
  stacks.reserve(subjects.size());
  for (SubjectIndex s : subjects) {
    const std::vector<SubjectIndex> ids(grid.size(), s);
    stacks.push_back(decode(model, z, ids));
  }
  return stacks;
}

}  // namespace subjmap
