// SPDX-License-Identifier: Apache-2.0
//
// Zero-shot classification with prompt ensembles, paired retrieval
// Recall@K in both directions, and the modality gap between embedding
// centroids. Ties always go to the lowest index.

#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ltt/data.hpp"
#include "ltt/encoders.hpp"
#include "ltt/tensor.hpp"
#include "ltt/trainer.hpp"

namespace ltt {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Direction { image_to_text, text_to_image };

std::string to_string(Direction d);

/// Rows divided by their Euclidean norm. Zero rows are an error.
Tensor normalize_rows(const Tensor& x);

/// Averages unit prompt embeddings per class and renormalizes.
/// `prompts` is [C * T, D] in class-major order (class c, template t at row c * T + t).
Tensor ensemble_class_embeddings(const Tensor& prompts, std::size_t num_classes, std::size_t num_templates);

/// Embeds every filled template per class with the text tower and ensembles them, [C, D].
Tensor class_text_embeddings(const std::vector<std::string>& class_names, const std::vector<std::string>& templates,
                             const TowerWeights& text, const EncoderConfig& config, const Vocab& vocab, int max_len);

/// Argmax cosine similarity per image, ties to the lowest class index.
std::vector<int> zero_shot_predict(const Tensor& image_embeddings, const Tensor& class_embeddings);

/// Top-1 accuracy of zero_shot_predict against labels.
double zero_shot_classify(const Tensor& image_embeddings, const Tensor& class_embeddings,
                          const std::vector<int>& labels);

/// 1-based rank of each query's partner (row i pairs with row i). The rank
/// counts candidates scoring strictly higher plus equal-scoring ones at a
/// lower index.
std::vector<std::size_t> partner_ranks(const Tensor& image_embeddings, const Tensor& text_embeddings,
                                       Direction direction);

/// Fraction of queries whose partner ranks within the top k.
double recall_at_k(const Tensor& image_embeddings, const Tensor& text_embeddings, std::size_t k, Direction direction);

/// ‖mean image embedding − mean text embedding‖₂.
double modality_gap(const Tensor& image_embeddings, const Tensor& text_embeddings);

struct EvalReport {
  double zero_shot_top1 = 0.0;
  // recall[direction][k]
  std::map<std::string, std::map<int, double>> recall;
  double mean_recall_at_1 = 0.0;
  double modality_gap = 0.0;
  std::vector<double> per_class_top1;
  std::vector<std::size_t> per_class_count;
  std::size_t num_images = 0;
  std::vector<std::string> templates;
  std::string split;
  std::string vision_checksum;
  std::string text_checksum;
  std::string config_hash;

  /// All fractions in [0, 1] and mean R@1 equal to the directional mean.
  bool invariants_hold() const;
  /// "zero_shot_top1,i2t_r1,i2t_r5,t2i_r1,t2i_r5,mean_r1,modality_gap".
  static std::string csv_header();
  std::string csv_row() const;
};

void to_json(nlohmann::json& j, const EvalReport& r);

struct EvalOptions {
  Split split = Split::test;
  // Prompt templates; empty means the grammar's held-out eval templates.
  std::vector<std::string> templates;
  std::vector<int> recall_ks{1, 5};
  std::size_t chunk = 128;
};

/// Image embeddings of corpus samples under eval preprocessing, [N, D].
Tensor embed_corpus_images(const Corpus& corpus, const std::vector<std::size_t>& members, const Model& model,
                           const PreprocessConfig& preprocess, std::size_t chunk = 128);

EvalReport run_eval(const Model& model, const TrainConfig& config, const Corpus& corpus, const Vocab& vocab,
                    const EvalOptions& options = {});

/// Loads a trainer checkpoint directory and evaluates it. Throws EvalError
/// when the checkpoint does not fit the corpus vocabulary or image size.
EvalReport run_eval(const std::filesystem::path& checkpoint_dir, const Corpus& corpus, const Vocab& vocab,
                    const EvalOptions& options = {});

/// Writes report.json and appends one CSV row (header written when new).
void write_eval_report(const EvalReport& report, const std::filesystem::path& json_path,
                       const std::filesystem::path& csv_path);

}  // namespace ltt
