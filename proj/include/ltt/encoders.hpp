// SPDX-License-Identifier: Apache-2.0
//
// Dual towers that share one embedding space: a ViT image encoder with a
// swappable pooling readout, and a bidirectional text transformer with
// masked mean pooling. Both end in a bias-free projection and l2
// normalization.

#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "ltt/rng.hpp"
#include "ltt/tensor.hpp"

namespace ltt {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Pooling { cls_token, mean, map };

std::string to_string(Pooling pooling);
Pooling pooling_from_string(const std::string& name);

struct EncoderConfig {
  int image_size = 32;
  int patch_size = 8;
  int embed_dim = 64;
  int depth = 2;
  int num_heads = 4;
  double mlp_ratio = 4.0;
  Pooling pooling = Pooling::map;
  int output_dim = 64;
  int vocab_size = 0;
  int max_seq_len = 16;
  double ln_eps = 1e-6;

  int num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  int patch_dim() const { return 3 * patch_size * patch_size; }
  int mlp_dim() const { return static_cast<int>(embed_dim * mlp_ratio); }
  int head_dim() const { return embed_dim / num_heads; }

  void validate_vision() const;
  void validate_text() const;

  bool operator==(const EncoderConfig&) const = default;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

struct Parameter {
  Tensor value;
  // Came from a pretrained checkpoint; excluded from weight decay.
  bool pretrained = false;
};

/// Named parameter set of one tower. Iteration order is lexicographic and
/// stable across save/load.
class TowerWeights {
 public:
  using Map = std::map<std::string, Parameter>;

  void add(const std::string& name, Tensor value, bool pretrained = false);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Parameter& param(const std::string& name);
  const Parameter& param(const std::string& name) const;
  void erase(const std::string& name) { params_.erase(name); }

  std::vector<std::string> names() const;
  std::size_t size() const { return params_.size(); }
  std::size_t numel() const;
  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }
  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }

  void set_requires_grad(bool value);
  void set_pretrained(bool value);
  void zero_grad();
  void clear_grads();
  /// Deep copy of the values and flags, with no gradient state.
  TowerWeights clone() const;
  /// SHA-256 over names, shapes and raw values in iteration order.
  std::string checksum() const;

 private:
  Map params_;
};

/// Token ids [batch, length] with a 0/1 attention mask of the same size.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> ids;
  std::vector<double> mask;
};

TowerWeights init_vision_tower(const EncoderConfig& config, Rng& rng);
TowerWeights init_text_tower(const EncoderConfig& config, Rng& rng);
/// Fresh pooling-head parameters for `pooling`, named under "pool.".
void init_pooling_head(TowerWeights& weights, const EncoderConfig& config, Rng& rng);

/// images[B, 3, H, W] -> [B, N, 3·p²]; each patch flattened channel-major.
Tensor patchify(const Tensor& images, int patch_size);
Tensor unpatchify(const Tensor& patches, int patch_size, int image_size);

/// Pre-norm transformer over patch tokens (plus a leading CLS slot iff the
/// config pools by class token). Returns final-LN token states.
Tensor vit_forward(const Tensor& images, const TowerWeights& weights, const EncoderConfig& config);
/// tokens[B, T, D] -> [B, D].
Tensor pool(const Tensor& tokens, Pooling strategy, const TowerWeights& weights, const EncoderConfig& config);
/// Unprojected pooled features [B, D].
Tensor image_features(const Tensor& images, const TowerWeights& weights, const EncoderConfig& config);
/// vit_forward -> pool -> projection -> l2_normalize, [B, output_dim].
Tensor embed_image(const Tensor& images, const TowerWeights& weights, const EncoderConfig& config);

/// Bidirectional transformer with key padding mask, masked mean pooling,
/// projection and l2 normalization, [B, output_dim].
Tensor text_forward(const TokenBatch& tokens, const TowerWeights& weights, const EncoderConfig& config);

/// Multi-head attention of queries[B, Tq, D] over keys/values[B, Tk, D] using
/// parameters "<prefix>.{q,k,v,out}.{weight,bias}". key_mask, when non-empty,
/// has B·Tk entries and excludes zero positions.
Tensor multihead_attention(const Tensor& queries, const Tensor& keys_values, const TowerWeights& weights,
                           const std::string& prefix, int num_heads, std::span<const double> key_mask = {});

}  // namespace ltt
