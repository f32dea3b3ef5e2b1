// SPDX-License-Identifier: Apache-2.0
//
// Synthetic image-caption corpus: colored geometric objects on textured
// backgrounds, captions from a template grammar, CLIP-style preprocessing
// and deterministic epoch batching.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ltt/encoders.hpp"
#include "ltt/rng.hpp"
#include "ltt/tensor.hpp"

namespace ltt {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// RGB raster stored channel-major [3, height, width], values in [0, 1].
struct Raster {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  double at(int channel, int y, int x) const {
    return pixels[(static_cast<std::size_t>(channel) * height + y) * width + x];
  }
  bool operator==(const Raster&) const = default;
};

struct GrammarConfig {
  std::vector<std::string> colors{"red", "green", "blue", "yellow"};
  std::vector<std::string> shapes{"circle", "square", "triangle", "cross"};
  // Phrasings paired with images during vision training.
  std::vector<std::string> train_templates{"a photo of a {}",  "a picture of a {}", "a {}",
                                           "an image of a {}", "a drawing of a {}", "a {} on a textured background"};
  // Zero-shot prompt set. Entries absent from train_templates are held out.
  std::vector<std::string> eval_templates{"a photo of a {}", "an image containing a {} object", "a rendering of a {}",
                                          "there is a {} in this picture"};
  int raster_size = 48;

  int num_classes() const { return static_cast<int>(colors.size() * shapes.size()); }
  std::string class_name(int class_id) const;
  int color_of(int class_id) const { return class_id / static_cast<int>(shapes.size()); }
  int shape_of(int class_id) const { return class_id % static_cast<int>(shapes.size()); }
  /// Eval templates that never appear in training captions.
  std::vector<std::string> held_out_templates() const;
  /// Union of train and eval templates, train first, without duplicates.
  std::vector<std::string> all_templates() const;
  void validate() const;

  bool operator==(const GrammarConfig&) const = default;
};

void to_json(nlohmann::json& j, const GrammarConfig& g);
void from_json(const nlohmann::json& j, GrammarConfig& g);

/// Substitutes `name` for the single "{}" slot.
std::string fill_template(const std::string& templ, const std::string& name);

enum class Split { train, val, test };
std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct SyntheticSample {
  std::size_t id = 0;
  Raster image;
  std::string caption;
  int class_id = 0;
  int template_index = 0;
  Split split = Split::train;
  std::uint64_t seed = 0;
};

struct Corpus {
  GrammarConfig grammar;
  std::uint64_t seed = 0;
  std::vector<SyntheticSample> samples;

  std::vector<std::size_t> indices(Split split) const;
};

/// 80/10/10 split from a hash of (corpus seed, index).
Split split_for(std::uint64_t corpus_seed, std::size_t index);
/// Renders one object of `class_id` using only `sample_seed` for randomness.
Raster render_sample(const GrammarConfig& grammar, int class_id, std::uint64_t sample_seed);
/// Sample i has class i mod C, so every class appears floor(n/C) or ceil(n/C) times.
Corpus generate_corpus(std::size_t n, const GrammarConfig& grammar, std::uint64_t seed);
/// SHA-256 over a canonical serialization of all samples.
std::string corpus_digest(const Corpus& corpus);

/// Directory layout: grammar.json, captions.jsonl, images/<id>.ppm (P6).
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);
void write_ppm(const std::filesystem::path& path, const Raster& raster);
Raster read_ppm(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;

  Vocab();
  explicit Vocab(std::vector<std::string> words);
  /// Every word of the grammar's templates and class names, sorted.
  static Vocab from_grammar(const GrammarConfig& grammar);

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(const std::string& word) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct TokenizedCaption {
  std::vector<int> ids;
  std::vector<double> mask;
};

std::vector<std::string> split_words(const std::string& caption);
/// [BOS] words [EOS] padded with PAD to max_len.
TokenizedCaption tokenize(const std::string& caption, const Vocab& vocab, int max_len);
/// Words between BOS and EOS joined by single spaces.
std::string detokenize(const std::vector<int>& ids, const Vocab& vocab);
TokenBatch make_token_batch(const std::vector<std::string>& captions, const Vocab& vocab, int max_len);

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

inline constexpr std::array<double, 3> kClipMean{0.48145466, 0.4578275, 0.40821073};
inline constexpr std::array<double, 3> kClipStd{0.26862954, 0.26130258, 0.27577711};

struct PreprocessConfig {
  int size = 32;
  // Area fraction kept by the train-mode crop.
  double min_scale = 0.9;
  double max_scale = 1.0;
};

/// Antialiased separable bicubic (a = -0.5) resize to [3, out_h, out_w].
Raster resize_bicubic(const Raster& image, int out_width, int out_height);
/// Eval: shorter side to S, center crop S x S. Train: shorter side to
/// ceil(S / sqrt(s)) with s ~ U[min_scale, max_scale], center square, random
/// S x S crop. Both scale to [0, 1] and apply CLIP normalization.
Tensor preprocess(const Raster& image, const PreprocessConfig& config, bool train_mode, Rng* rng = nullptr);

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

struct ImageBatch {
  Tensor pixels;  // [B, 3, S, S]
  std::vector<std::size_t> sample_ids;
  std::vector<int> class_ids;
};

struct TextBatch {
  TokenBatch tokens;
  std::vector<std::string> captions;
  std::vector<int> class_ids;
};

struct Batch {
  ImageBatch images;
  TextBatch texts;
  // Unordered row pairs sharing an identical caption string (false negatives).
  std::size_t duplicate_caption_pairs = 0;
};

/// Count of pairs i < j with captions[i] == captions[j].
std::size_t count_duplicate_captions(const std::vector<std::string>& captions);

/// Shuffled sample indices grouped into full batches for (seed, epoch).
std::vector<std::vector<std::size_t>> epoch_batches(const std::vector<std::size_t>& indices, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch);

struct BatchOptions {
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  bool train_mode = true;
  int max_seq_len = 16;
  PreprocessConfig preprocess;
};

/// Assembles the batch of the given corpus sample indices. Augmentation
/// randomness is derived from (seed, epoch, sample id) only.
Batch make_batch(const Corpus& corpus, const Vocab& vocab, const std::vector<std::size_t>& members,
                 const BatchOptions& options, std::uint64_t epoch);

class BatchIterator {
 public:
  BatchIterator(const Corpus& corpus, const Vocab& vocab, std::vector<std::size_t> indices, BatchOptions options,
                std::uint64_t epoch);

  std::size_t num_batches() const { return order_.size(); }
  std::optional<Batch> next();

 private:
  const Corpus* corpus_;
  const Vocab* vocab_;
  BatchOptions options_;
  std::uint64_t epoch_;
  std::vector<std::vector<std::size_t>> order_;
  std::size_t cursor_ = 0;
};

}  // namespace ltt
