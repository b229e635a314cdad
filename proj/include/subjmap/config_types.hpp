#pragma once

// Training configuration and the JSON forms of ModelSpec / TrainConfig.
// Parsing is strict: unknown keys raise ConfigError naming the key.

#include <cstdint>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "subjmap/digest.hpp"
#include "subjmap/errors.hpp"
#include "subjmap/models.hpp"

namespace subjmap {

enum class OptimizerKind { SGD, Adam };

struct TrainConfig {
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  std::size_t orth_every = 1;       // steps between U re-projections
  std::size_t patience = 20;        // epochs without val improvement
  std::optional<double> grad_clip;  // global max-norm
  double lr_decay = 1.0;            // per-epoch multiplicative factor
  // fine-tuning
  std::size_t finetune_max_steps = 2000;
  double finetune_tol = 1e-5;       // relative loss change over 10 steps

  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (orth_every < 1) throw ConfigError("train.orth_every must be >= 1");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("train.lr_decay must be in (0, 1]");
    if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("train.grad_clip must be > 0");
  }
};

namespace detail {

inline std::string qualified(std::string_view section, std::string_view key) {
  return section.empty() ? std::string(key) : std::string(section) + "." + std::string(key);
}

inline void reject_unknown_keys(const nlohmann::json& j, std::string_view section,
                                std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw ConfigError((section.empty() ? std::string("config") : std::string(section)) + " must be a JSON object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || item.key() == a;
    if (!ok) throw ConfigError("unknown key '" + qualified(section, item.key()) + "'");
  }
}

template <typename T>
void read_key(const nlohmann::json& j, std::string_view section, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad value for '" + qualified(section, key) + "': " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ModelSpec& s) {
  return {{"variant", std::string(to_string(s.variant))},
          {"input_size", s.input_size},
          {"first_layer_width", s.first_layer_width},
          {"trunk_widths", s.trunk_widths},
          {"latent_size", s.latent_size},
          {"objective", std::string(to_string(s.objective))},
          {"n_subjects", s.n_subjects},
          {"n_classes", s.n_classes},
          {"beta", s.beta}};
}

/// Fields missing from `j` keep the values already in `s`.
inline ModelSpec model_spec_from_json(const nlohmann::json& j, ModelSpec s = {},
                                      std::string_view section = "model") {
  detail::reject_unknown_keys(j, section,
                              {"variant", "input_size", "first_layer_width", "trunk_widths",
                               "latent_size", "objective", "n_subjects", "n_classes", "beta"});
  std::string variant(to_string(s.variant));
  std::string objective(to_string(s.objective));
  detail::read_key(j, section, "variant", variant);
  detail::read_key(j, section, "objective", objective);
  s.variant = parse_variant(variant);
  s.objective = parse_objective(objective);
  detail::read_key(j, section, "input_size", s.input_size);
  detail::read_key(j, section, "first_layer_width", s.first_layer_width);
  detail::read_key(j, section, "trunk_widths", s.trunk_widths);
  detail::read_key(j, section, "latent_size", s.latent_size);
  detail::read_key(j, section, "n_subjects", s.n_subjects);
  detail::read_key(j, section, "n_classes", s.n_classes);
  detail::read_key(j, section, "beta", s.beta);
  return s;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = {{"lr", c.lr},
                      {"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
                      {"beta1", c.beta1},
                      {"beta2", c.beta2},
                      {"eps", c.eps},
                      {"epochs", c.epochs},
                      {"batch_size", c.batch_size},
                      {"seed", c.seed},
                      {"orth_every", c.orth_every},
                      {"patience", c.patience},
                      {"lr_decay", c.lr_decay},
                      {"finetune_max_steps", c.finetune_max_steps},
                      {"finetune_tol", c.finetune_tol}};
  j["grad_clip"] = c.grad_clip ? nlohmann::json(*c.grad_clip) : nlohmann::json(nullptr);
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {},
                                          std::string_view section = "train") {
  detail::reject_unknown_keys(j, section,
                              {"lr", "optimizer", "beta1", "beta2", "eps", "epochs", "batch_size",
                               "seed", "orth_every", "patience", "grad_clip", "lr_decay",
                               "finetune_max_steps", "finetune_tol"});
  detail::read_key(j, section, "lr", c.lr);
  std::string opt = c.optimizer == OptimizerKind::Adam ? "adam" : "sgd";
  detail::read_key(j, section, "optimizer", opt);
  if (opt == "adam") c.optimizer = OptimizerKind::Adam;
  else if (opt == "sgd") c.optimizer = OptimizerKind::SGD;
  else throw ConfigError("unknown optimizer '" + opt + "' in " + std::string(section) + ".optimizer");
  detail::read_key(j, section, "beta1", c.beta1);
  detail::read_key(j, section, "beta2", c.beta2);
  detail::read_key(j, section, "eps", c.eps);
  detail::read_key(j, section, "epochs", c.epochs);
  detail::read_key(j, section, "batch_size", c.batch_size);
  detail::read_key(j, section, "seed", c.seed);
  detail::read_key(j, section, "orth_every", c.orth_every);
  detail::read_key(j, section, "patience", c.patience);
  detail::read_key(j, section, "lr_decay", c.lr_decay);
  detail::read_key(j, section, "finetune_max_steps", c.finetune_max_steps);
  detail::read_key(j, section, "finetune_tol", c.finetune_tol);
  if (j.contains("grad_clip")) {
    if (j.at("grad_clip").is_null()) c.grad_clip.reset();
    else detail::read_key(j, section, "grad_clip", *(c.grad_clip = 0.0));
  }
  c.validate();
  return c;
}

/// SHA-256 of the compact, key-sorted JSON dump. nlohmann's default object
/// type is an ordered map, so key order and whitespace never reach the hash.
inline std::string canonical_hash(const nlohmann::json& j) { return sha256_hex(j.dump()); }

}  // namespace subjmap
