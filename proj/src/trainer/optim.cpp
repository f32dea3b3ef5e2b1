// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>

#include "ltt/hash.hpp"
#include "ltt/trainer.hpp"

namespace ltt {

void TrainConfig::validate() const {
  if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
  if (total_steps < 1) throw ConfigError("total_steps must be at least 1");
  if (warmup_steps < 0 || warmup_steps > total_steps) {
    throw ConfigError("warmup_steps " + std::to_string(warmup_steps) + " must lie in [0, total_steps " +
                      std::to_string(total_steps) + "]");
  }
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0)) {
    throw ConfigError("AdamW betas must lie in [0, 1) and eps must be positive");
  }
  if (!(initial_temperature > 0.0)) throw ConfigError("initial_temperature must be positive");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be at least 1");
  if (divergence_patience < 1) throw ConfigError("divergence_patience must be at least 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"peak_lr", c.peak_lr},
                     {"warmup_steps", c.warmup_steps},
                     {"total_steps", c.total_steps},
                     {"batch_size", c.batch_size},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"freeze_text", c.freeze_text},
                     {"seed", c.seed},
                     {"initial_temperature", c.initial_temperature},
                     {"checkpoint_every", c.checkpoint_every},
                     {"augment", c.augment},
                     {"image_size", c.preprocess.size},
                     {"crop_min_scale", c.preprocess.min_scale},
                     {"crop_max_scale", c.preprocess.max_scale},
                     {"max_seq_len", c.max_seq_len},
                     {"divergence_patience", c.divergence_patience}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.peak_lr = j.value("peak_lr", d.peak_lr);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.total_steps = j.value("total_steps", d.total_steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.freeze_text = j.value("freeze_text", d.freeze_text);
  c.seed = j.value("seed", d.seed);
  c.initial_temperature = j.value("initial_temperature", d.initial_temperature);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.augment = j.value("augment", d.augment);
  c.preprocess.size = j.value("image_size", d.preprocess.size);
  c.preprocess.min_scale = j.value("crop_min_scale", d.preprocess.min_scale);
  c.preprocess.max_scale = j.value("crop_max_scale", d.preprocess.max_scale);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.divergence_patience = j.value("divergence_patience", d.divergence_patience);
}

std::string config_hash(const TrainConfig& config) { return sha256_hex(nlohmann::json(config).dump()); }

double lr_at(int step, const TrainConfig& c) {
  if (step < 0 || step > c.total_steps) {
    throw TrainError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(c.total_steps) + "]");
  }
  if (step < c.warmup_steps) return c.peak_lr * static_cast<double>(step) / c.warmup_steps;
  if (c.total_steps == c.warmup_steps) return c.peak_lr;
  const double progress = static_cast<double>(step - c.warmup_steps) / (c.total_steps - c.warmup_steps);
  return c.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

bool is_no_decay_param(const std::string& name) {
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return name == "logit_scale" || ends_with(".gamma") || ends_with(".beta") || ends_with(".bias");
}

std::vector<ParamGroupEntry> param_groups(const Model& model, const TrainConfig& config) {
  std::vector<ParamGroupEntry> out;
  auto add_tower = [&](const TowerWeights& w, const std::string& prefix) {
    for (const auto& [name, p] : w) {
      const std::string full = prefix + name;
      const double wd = p.pretrained || is_no_decay_param(full) ? 0.0 : config.weight_decay;
      out.push_back({full, p.value, wd, p.pretrained});
    }
  };
  add_tower(model.vision, "vision.");
  if (!config.freeze_text) add_tower(model.text, "text.");
  out.push_back({"logit_scale", model.logit_scale.t, 0.0, false});
  return out;
}

void adamw_step(OptimizerState& state, const std::vector<ParamGroupEntry>& params, double lr, const AdamWHyper& h) {
  // Validate every gradient before touching any parameter.
  for (const auto& p : params) {
    if (!p.value.has_grad()) throw TrainError("parameter '" + p.name + "' has no gradient");
    for (double g : p.value.grad()) {
      if (!std::isfinite(g)) throw TrainError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  for (const auto& p : params) {
    Tensor value = p.value;
    auto data = value.mutable_data();
    const auto grad = value.grad();
    auto& mom = state.moments[p.name];
    if (mom.m.empty()) {
      mom.m.assign(data.size(), 0.0);
      mom.v.assign(data.size(), 0.0);
    }
    if (mom.m.size() != data.size()) throw TrainError("optimizer moments for '" + p.name + "' have the wrong size");
    const double decay = 1.0 - lr * p.weight_decay;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i];
      mom.m[i] = h.beta1 * mom.m[i] + (1.0 - h.beta1) * g;
      mom.v[i] = h.beta2 * mom.v[i] + (1.0 - h.beta2) * g * g;
      const double m_hat = mom.m[i] / bc1;
      const double v_hat = mom.v[i] / bc2;
      data[i] = data[i] * decay - lr * m_hat / (std::sqrt(v_hat) + h.eps);
    }
  }
}

}  // namespace ltt
