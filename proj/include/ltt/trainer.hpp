// SPDX-License-Identifier: Apache-2.0
//
// Locked text tuning loop: AdamW with selective decoupled weight decay,
// linear warmup then cosine decay, a frozen text tower, and resumable
// checkpoints.
//
// Checkpoint directory:
//   model.lockt       vision.*, text.*, logit_scale
//   moments.lockt     m.<param>, v.<param> for every optimizer-owned param
//   train_state.json  step, configs, config hash, RNG state, best val loss

#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ltt/contrastive.hpp"
#include "ltt/data.hpp"
#include "ltt/encoders.hpp"

namespace ltt {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double peak_lr = 1e-3;
  int warmup_steps = 100;
  int total_steps = 2000;
  int batch_size = 64;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool freeze_text = true;
  std::uint64_t seed = 0;
  double initial_temperature = kInitialTemperature;
  int checkpoint_every = 200;
  bool augment = true;
  PreprocessConfig preprocess;
  int max_seq_len = 16;
  // Loss above 2 ln B for this many consecutive steps aborts the run.
  int divergence_patience = 100;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
/// SHA-256 of the canonical JSON form.
std::string config_hash(const TrainConfig& config);

/// Learning rate for schedule position `step` in [0, total_steps]. The k-th
/// optimizer update (1-based) uses lr_at(k).
double lr_at(int step, const TrainConfig& config);

/// Both towers plus the learnable temperature.
struct Model {
  EncoderConfig vision_config;
  TowerWeights vision;
  EncoderConfig text_config;
  TowerWeights text;
  LogitScale logit_scale;
};

struct ParamGroupEntry {
  std::string name;  // "vision.<param>", "text.<param>" or "logit_scale"
  Tensor value;
  double weight_decay = 0.0;
  bool pretrained = false;
};

/// LayerNorm gain/shift, biases, and the logit scale are never decayed.
bool is_no_decay_param(const std::string& name);
/// Optimizer-owned parameters with their decay. Frozen text params are absent.
std::vector<ParamGroupEntry> param_groups(const Model& model, const TrainConfig& config);

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

struct OptimizerState {
  std::int64_t step = 0;
  std::map<std::string, AdamMoments> moments;
};

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One decoupled AdamW update: p <- p (1 - lr wd), then the bias-corrected
/// Adam step. Throws TrainError naming the parameter on a missing or
/// non-finite gradient.
void adamw_step(OptimizerState& state, const std::vector<ParamGroupEntry>& params, double lr, const AdamWHyper& hyper);

struct StepMetrics {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double logit_scale = 0.0;  // t, the log of the multiplier
  std::string text_checksum;
  std::size_t duplicate_caption_pairs = 0;
};

struct TrainState {
  int step = 0;
  OptimizerState optimizer;
  std::string rng_state;
  std::string config_hash;
  double best_val_loss = std::numeric_limits<double>::infinity();
  // Consecutive steps with loss above the divergence threshold.
  int high_loss_streak = 0;
};

struct TrainOptions {
  // Checkpoints and metrics.csv go here; empty disables all file output.
  std::filesystem::path out_dir;
  // Continue from this checkpoint directory.
  std::optional<std::filesystem::path> resume_from;
  // Stop (with a checkpoint) after this many total steps; 0 runs to the end.
  int stop_at_step = 0;
};

struct TrainResult {
  std::vector<StepMetrics> log;
  TrainState state;
  std::string text_checksum_before;
  std::string text_checksum_after;
  bool diverged = false;
  std::string report;
};

/// Text-tower embeddings of captions without graph recording, [N, output_dim].
Tensor embed_captions(const std::vector<std::string>& captions, const TowerWeights& text, const EncoderConfig& config,
                      const Vocab& vocab, int max_len);

/// Mean contrastive loss over full validation batches, eval preprocessing,
/// no graph recording.
double validation_loss(const Corpus& corpus, const Vocab& vocab, const Model& model, const TrainConfig& config);

TrainResult train(const Corpus& corpus, const Vocab& vocab, Model& model, const TrainConfig& config,
                  const TrainOptions& options = {});

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  Model model;
  TrainState state;
  TrainConfig config;
};

void save_checkpoint(const std::filesystem::path& dir, const Model& model, const TrainState& state,
                     const TrainConfig& config);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// A single tower archive plus its config as <stem>.json next to it.
void save_tower_checkpoint(const std::filesystem::path& path, const TowerWeights& weights, const EncoderConfig& config);
std::pair<TowerWeights, EncoderConfig> load_tower_checkpoint(const std::filesystem::path& path);

}  // namespace ltt
