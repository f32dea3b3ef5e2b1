// SPDX-License-Identifier: Apache-2.0
//
// Experiment runner: manufactures the pretrained towers and runs the batch
// size, pooling and backbone ablations as independent train+eval cells.
//
// Layout under an output directory:
//   cells/<cell key>/          per-cell training dir (metrics.csv, checkpoints/)
//   cells/<cell key>/result.json
//   <experiment>.csv           append-only results, one row per finished cell

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ltt/data.hpp"
#include "ltt/encoders.hpp"
#include "ltt/eval.hpp"
#include "ltt/trainer.hpp"

namespace ltt {

class ExperimentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Desk-scale presets shared by the CLI and the acceptance runs
// ---------------------------------------------------------------------------

/// Text tower: D=32, 2 blocks, 2 heads, mlp ratio 2, 16 tokens.
EncoderConfig desk_text_config(int vocab_size);
/// ViT on 32x32 crops with 8x8 patches, D=32, 2 blocks, MAP pooling.
EncoderConfig desk_vision_config();
/// 500 steps of batch 64, 50 warmup, checkpoint every 100.
TrainConfig desk_train_config();

// ---------------------------------------------------------------------------
// Pretrained towers
// ---------------------------------------------------------------------------

struct TextPretrainConfig {
  int steps = 300;
  int warmup_steps = 30;
  int batch_size = 16;  // capped at the number of classes
  double peak_lr = 2e-3;
  double weight_decay = 0.05;
  double temperature = 0.1;
  int max_seq_len = 16;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const TextPretrainConfig& c);
void from_json(const nlohmann::json& j, TextPretrainConfig& c);

struct TextPretrainResult {
  TowerWeights weights;
  EncoderConfig config;
  std::vector<double> losses;
  // Mean cosine between eval-template captions of the same / different classes.
  double within_class_cosine = 0.0;
  double cross_class_cosine = 0.0;
};

/// Contrastive caption/paraphrase training of the text tower. Each batch holds
/// distinct classes; a training caption is paired with the same class under a
/// different template. Every returned parameter is flagged pretrained.
TextPretrainResult pretrain_text(const Corpus& corpus, const Vocab& vocab, const EncoderConfig& config,
                                 const TextPretrainConfig& options);

/// Same-class vs cross-class mean cosine over every class filled into `templates`.
std::pair<double, double> class_cosine_separation(const TowerWeights& text, const EncoderConfig& config,
                                                  const GrammarConfig& grammar, const Vocab& vocab,
                                                  const std::vector<std::string>& templates, int max_len);

struct VisionPretrainConfig {
  int steps = 3000;
  int warmup_steps = 300;
  int batch_size = 64;
  double peak_lr = 3e-3;
  double weight_decay = 0.05;
  bool augment = true;
  PreprocessConfig preprocess;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const VisionPretrainConfig& c);
void from_json(const nlohmann::json& j, VisionPretrainConfig& c);

struct VisionPretrainResult {
  TowerWeights weights;  // classifier head removed
  EncoderConfig config;
  std::vector<double> losses;
  double train_accuracy = 0.0;
};

/// Supervised class prediction through a linear head on the projected
/// features. The head is discarded; all retained params are flagged pretrained.
VisionPretrainResult pretrain_vision(const Corpus& corpus, const EncoderConfig& config,
                                     const VisionPretrainConfig& options);

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

enum class ExperimentKind { batch_sweep, pooling_compare, backbone_compare, pretrain_text, pretrain_vision, train, eval };

std::string to_string(ExperimentKind kind);
ExperimentKind experiment_kind_from_string(const std::string& name);

enum class Backbone { random, pretrained };

std::string to_string(Backbone b);
Backbone backbone_from_string(const std::string& name);

struct ExperimentSpec {
  ExperimentKind kind = ExperimentKind::train;
  TrainConfig base;
  EncoderConfig vision;
  std::vector<int> batch_sizes{8, 16, 32, 64, 128};
  std::vector<Pooling> poolings{Pooling::cls_token, Pooling::mean, Pooling::map};
  std::vector<Backbone> backbones{Backbone::random, Backbone::pretrained};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  // Batch sweep budget; 0 means base.batch_size * base.total_steps.
  long samples_seen = 0;
  std::filesystem::path out_dir;

  /// Sweep values ascending and unique, at least two seeds for sweeps.
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentSpec& s);
void from_json(const nlohmann::json& j, ExperimentSpec& s);

/// Shared read-only inputs of every cell.
struct ExperimentContext {
  const Corpus* corpus = nullptr;
  const Vocab* vocab = nullptr;
  TowerWeights text;
  EncoderConfig text_config;
  std::optional<TowerWeights> pretrained_vision;
  EncoderConfig pretrained_vision_config;
  EvalOptions eval;
};

/// One train+eval unit.
struct CellSpec {
  std::string experiment;  // results file stem, e.g. "batch_sweep"
  std::string axis;        // "batch_size", "pooling" or "backbone"
  std::string value;
  std::uint64_t seed = 0;
  TrainConfig train;
  EncoderConfig vision;
  Backbone backbone = Backbone::random;

  std::string cell_id() const;
  /// Content key of everything that determines the trained model; cells with
  /// equal keys share one training directory. `init_checksum` identifies the
  /// pretrained vision weights and is empty for random init.
  std::string cache_key(const std::string& text_checksum, const std::string& init_checksum) const;
};

struct CellResult {
  std::string cell_id;
  std::string experiment;
  std::string axis;
  std::string value;
  std::uint64_t seed = 0;
  int batch_size = 0;
  int steps = 0;
  long samples_seen = 0;
  EvalReport eval;
  double final_loss = 0.0;
  double final_logit_scale = 0.0;
  bool diverged = false;
  std::string text_checksum;
  bool freeze_ok = false;  // text checksum unchanged and no text optimizer state
  double seconds = 0.0;    // wall time of training in this process; not in the CSV
};

/// Results CSV columns; the first row of every results file must equal this.
const std::vector<std::string>& result_columns();
std::string result_header();
std::string result_row(const CellResult& r);
CellResult parse_result_row(const std::string& line);

/// Appends one row, writing the header when the file is new. Throws when an
/// existing file carries a different header (SHA-256 compared).
void append_result(const std::filesystem::path& csv, const CellResult& r);
std::vector<CellResult> read_results(const std::filesystem::path& csv);

/// Order-independent merge keyed on cell id. Duplicate ids must agree on
/// every metric; later duplicates are dropped.
std::map<std::string, CellResult> reduce_by_cell(const std::vector<CellResult>& rows);

struct AxisSummary {
  std::string value;
  std::size_t seeds = 0;
  double zero_shot_top1 = 0.0;
  double mean_r1 = 0.0;
  double zero_shot_top1_std = 0.0;
};

/// Seed means per axis value, in first-seen value order.
std::vector<AxisSummary> summarize(const std::map<std::string, CellResult>& cells,
                                   const std::vector<std::string>& value_order);

/// Trains (or resumes, or reuses) and evaluates one cell.
CellResult run_cell(const CellSpec& cell, const ExperimentContext& ctx, const std::filesystem::path& out_dir);

/// Cells of a sweep spec in run order.
std::vector<CellSpec> batch_sweep_cells(const ExperimentSpec& spec);
std::vector<CellSpec> pooling_cells(const ExperimentSpec& spec);
std::vector<CellSpec> backbone_cells(const ExperimentSpec& spec);

/// Runs every cell not already recorded in <out_dir>/<experiment>.csv and
/// returns the reduced rows of the whole experiment.
std::map<std::string, CellResult> run_sweep(const std::vector<CellSpec>& cells, const ExperimentContext& ctx,
                                            const std::filesystem::path& out_dir);

struct ReportCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SweepReport {
  std::string table;  // human-readable
  std::string csv;    // experiment,value,seeds,zero_shot_top1,zero_shot_top1_std,mean_r1
  std::vector<ReportCheck> invariants;  // must hold for exit code 0
  std::vector<ReportCheck> trends;      // reported, not enforced
  bool ok() const;
};

/// Summaries and invariant checks over all results files in `out_dir`.
SweepReport build_report(const std::filesystem::path& out_dir);

}  // namespace ltt
