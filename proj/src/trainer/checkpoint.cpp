// SPDX-License-Identifier: Apache-2.0

#include <fstream>

#include "ltt/archive.hpp"
#include "ltt/trainer.hpp"

namespace ltt {

namespace {

constexpr const char* kModelFile = "model.lockt";
constexpr const char* kMomentsFile = "moments.lockt";
constexpr const char* kStateFile = "train_state.json";

void write_text(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw TrainError("cannot write " + tmp.string());
    out << text;
    if (!out) throw TrainError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TrainError("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

// JSON numbers cannot hold infinity; an untouched best loss is stored as null.
nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Model& model, const TrainState& state,
                     const TrainConfig& config) {
  std::filesystem::create_directories(dir);
  Archive weights;
  add_tower(weights, model.vision, "vision.");
  add_tower(weights, model.text, "text.");
  weights["logit_scale"] = ArchiveEntry{{}, {model.logit_scale.log_value()}, false};
  write_archive(dir / kModelFile, weights);

  Archive moments;
  for (const auto& [name, mom] : state.optimizer.moments) {
    moments["m." + name] = ArchiveEntry{{mom.m.size()}, mom.m, false};
    moments["v." + name] = ArchiveEntry{{mom.v.size()}, mom.v, false};
  }
  write_archive(dir / kMomentsFile, moments);

  const nlohmann::json meta{{"step", state.step},
                            {"optimizer_step", state.optimizer.step},
                            {"rng_state", state.rng_state},
                            {"config_hash", state.config_hash},
                            {"best_val_loss", finite_or_null(state.best_val_loss)},
                            {"high_loss_streak", state.high_loss_streak},
                            {"config", config},
                            {"vision_config", model.vision_config},
                            {"text_config", model.text_config},
                            {"model_file", kModelFile},
                            {"moments_file", kMomentsFile}};
  write_text(dir / kStateFile, meta.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto meta = read_json(dir / kStateFile);
  Checkpoint ck;
  ck.config = meta.at("config").get<TrainConfig>();
  ck.model.vision_config = meta.at("vision_config").get<EncoderConfig>();
  ck.model.text_config = meta.at("text_config").get<EncoderConfig>();
  const Archive weights = read_archive(dir / meta.value("model_file", std::string(kModelFile)));
  ck.model.vision = extract_tower(weights, "vision.");
  ck.model.text = extract_tower(weights, "text.");
  auto ls = weights.find("logit_scale");
  if (ls == weights.end() || ls->second.data.size() != 1) throw TrainError("checkpoint lacks logit_scale");
  ck.model.logit_scale = LogitScale::from_log(ls->second.data[0]);

  ck.state.step = meta.at("step").get<int>();
  ck.state.optimizer.step = meta.at("optimizer_step").get<std::int64_t>();
  ck.state.rng_state = meta.at("rng_state").get<std::string>();
  ck.state.config_hash = meta.at("config_hash").get<std::string>();
  const auto& best = meta.at("best_val_loss");
  ck.state.best_val_loss = best.is_null() ? std::numeric_limits<double>::infinity() : best.get<double>();
  ck.state.high_loss_streak = meta.value("high_loss_streak", 0);
  if (ck.state.config_hash != config_hash(ck.config)) {
    throw TrainError("checkpoint " + dir.string() + " config does not match its recorded hash");
  }
  const Archive moments = read_archive(dir / meta.value("moments_file", std::string(kMomentsFile)));
  for (const auto& [key, entry] : moments) {
    if (key.rfind("m.", 0) == 0) {
      ck.state.optimizer.moments[key.substr(2)].m = entry.data;
    } else if (key.rfind("v.", 0) == 0) {
      ck.state.optimizer.moments[key.substr(2)].v = entry.data;
    } else {
      throw TrainError("unexpected moment entry '" + key + "'");
    }
  }
  return ck;
}

void save_tower_checkpoint(const std::filesystem::path& path, const TowerWeights& weights,
                           const EncoderConfig& config) {
  save_tower(path, weights);
  auto cfg_path = path;
  cfg_path.replace_extension(".json");
  write_text(cfg_path, nlohmann::json(config).dump(2) + "\n");
}

std::pair<TowerWeights, EncoderConfig> load_tower_checkpoint(const std::filesystem::path& path) {
  auto cfg_path = path;
  cfg_path.replace_extension(".json");
  return {load_tower(path), read_json(cfg_path).get<EncoderConfig>()};
}

}  // namespace ltt
