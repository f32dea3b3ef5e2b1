// SPDX-License-Identifier: Apache-2.0

#include "ltt/encoders.hpp"

#include <cmath>

#include "ltt/hash.hpp"

namespace ltt {

std::string to_string(Pooling pooling) {
  switch (pooling) {
    case Pooling::cls_token:
      return "cls_token";
    case Pooling::mean:
      return "mean";
    case Pooling::map:
      return "map";
  }
  return "?";
}

Pooling pooling_from_string(const std::string& name) {
  if (name == "cls_token" || name == "cls") return Pooling::cls_token;
  if (name == "mean") return Pooling::mean;
  if (name == "map") return Pooling::map;
  throw ConfigError("unknown pooling strategy '" + name + "' (expected cls_token, mean or map)");
}

void EncoderConfig::validate_vision() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (depth < 0 || output_dim <= 0 || mlp_dim() <= 0) throw ConfigError("invalid depth/output_dim/mlp_ratio");
}

void EncoderConfig::validate_text() const {
  if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (vocab_size <= 0 || max_seq_len <= 0) throw ConfigError("text tower needs vocab_size and max_seq_len");
  if (depth < 0 || output_dim <= 0 || mlp_dim() <= 0) throw ConfigError("invalid depth/output_dim/mlp_ratio");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"embed_dim", c.embed_dim},
                     {"depth", c.depth},           {"num_heads", c.num_heads},   {"mlp_ratio", c.mlp_ratio},
                     {"pooling", to_string(c.pooling)}, {"output_dim", c.output_dim}, {"vocab_size", c.vocab_size},
                     {"max_seq_len", c.max_seq_len}, {"ln_eps", c.ln_eps}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.depth = j.value("depth", d.depth);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.pooling = pooling_from_string(j.value("pooling", to_string(d.pooling)));
  c.output_dim = j.value("output_dim", d.output_dim);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.ln_eps = j.value("ln_eps", d.ln_eps);
}

// ---------------------------------------------------------------------------
// TowerWeights
// ---------------------------------------------------------------------------

void TowerWeights::add(const std::string& name, Tensor value, bool pretrained) {
  if (!params_.emplace(name, Parameter{std::move(value), pretrained}).second) {
    throw ConfigError("duplicate parameter name '" + name + "'");
  }
}

Parameter& TowerWeights::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second;
}

const Parameter& TowerWeights::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second;
}

const Tensor& TowerWeights::at(const std::string& name) const { return param(name).value; }

std::vector<std::string> TowerWeights::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

std::size_t TowerWeights::numel() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.numel();
  return n;
}

void TowerWeights::set_requires_grad(bool value) {
  for (auto& [_, p] : params_) p.value.set_requires_grad(value);
}

void TowerWeights::set_pretrained(bool value) {
  for (auto& [_, p] : params_) p.pretrained = value;
}

void TowerWeights::zero_grad() {
  for (auto& [_, p] : params_) p.value.zero_grad();
}

void TowerWeights::clear_grads() {
  for (auto& [_, p] : params_) p.value.clear_grad();
}

TowerWeights TowerWeights::clone() const {
  TowerWeights out;
  for (const auto& [name, p] : params_) {
    Tensor copy = p.value.detach();
    copy.set_requires_grad(p.value.requires_grad());
    out.add(name, std::move(copy), p.pretrained);
  }
  return out;
}

std::string TowerWeights::checksum() const {
  Sha256 h;
  for (const auto& [name, p] : params_) {
    h.update(name);
    h.update_u64(p.value.rank());
    for (auto d : p.value.shape()) h.update_u64(d);
    h.update(p.value.data());
  }
  return h.hex();
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace {

Tensor normal_tensor(Shape shape, Rng& rng, double stddev) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(v));
}

void add_linear(TowerWeights& w, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                double stddev) {
  w.add(prefix + ".weight", normal_tensor({in, out}, rng, stddev));
  w.add(prefix + ".bias", Tensor::zeros({out}));
}

void add_layer_norm(TowerWeights& w, const std::string& prefix, std::size_t dim) {
  w.add(prefix + ".gamma", Tensor::full({dim}, 1.0));
  w.add(prefix + ".beta", Tensor::zeros({dim}));
}

void add_attention(TowerWeights& w, const std::string& prefix, std::size_t dim, Rng& rng, double stddev = 0.02) {
  for (const char* part : {"q", "k", "v", "out"}) add_linear(w, prefix + "." + part, dim, dim, rng, stddev);
}

void add_blocks(TowerWeights& w, const EncoderConfig& c, Rng& rng) {
  const auto d = static_cast<std::size_t>(c.embed_dim);
  const auto hidden = static_cast<std::size_t>(c.mlp_dim());
  for (int i = 0; i < c.depth; ++i) {
    const std::string p = "blocks." + std::to_string(i);
    add_layer_norm(w, p + ".ln1", d);
    add_attention(w, p + ".attn", d, rng);
    add_layer_norm(w, p + ".ln2", d);
    add_linear(w, p + ".mlp.fc1", d, hidden, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    add_linear(w, p + ".mlp.fc2", hidden, d, rng, 0.02);
  }
  add_layer_norm(w, "ln_final", d);
  w.add("proj.weight",
        normal_tensor({d, static_cast<std::size_t>(c.output_dim)}, rng, 1.0 / std::sqrt(static_cast<double>(d))));
}

}  // namespace

void init_pooling_head(TowerWeights& weights, const EncoderConfig& config, Rng& rng) {
  for (const auto& name : weights.names()) {
    if (name.rfind("pool.", 0) == 0) weights.erase(name);
  }
  const auto d = static_cast<std::size_t>(config.embed_dim);
  switch (config.pooling) {
    case Pooling::cls_token:
      weights.add("pool.cls_token", normal_tensor({1, 1, d}, rng, 0.02));
      break;
    case Pooling::map:
      weights.add("pool.probe", normal_tensor({1, 1, d}, rng, 0.02));
      // No residual path around the pooling attention, so unit-gain weights
      // keep the pooled features at token scale.
      add_attention(weights, "pool.attn", d, rng, 1.0 / std::sqrt(static_cast<double>(d)));
      break;
    case Pooling::mean:
      break;
  }
}

TowerWeights init_vision_tower(const EncoderConfig& config, Rng& rng) {
  config.validate_vision();
  TowerWeights w;
  const auto d = static_cast<std::size_t>(config.embed_dim);
  const auto pd = static_cast<std::size_t>(config.patch_dim());
  add_linear(w, "patch_embed", pd, d, rng, 1.0 / std::sqrt(static_cast<double>(pd)));
  w.add("pos_embed", normal_tensor({static_cast<std::size_t>(config.num_patches()), d}, rng, 0.02));
  add_blocks(w, config, rng);
  init_pooling_head(w, config, rng);
  return w;
}

TowerWeights init_text_tower(const EncoderConfig& config, Rng& rng) {
  config.validate_text();
  TowerWeights w;
  const auto d = static_cast<std::size_t>(config.embed_dim);
  w.add("token_embed", normal_tensor({static_cast<std::size_t>(config.vocab_size), d}, rng, 0.02));
  w.add("pos_embed", normal_tensor({static_cast<std::size_t>(config.max_seq_len), d}, rng, 0.02));
  add_blocks(w, config, rng);
  return w;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

Tensor patchify(const Tensor& images, int patch_size) {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw ShapeError("patchify expects [B, 3, H, W], got " + shape_str(images.shape()));
  }
  const std::size_t batch = images.dim(0), h = images.dim(2), w = images.dim(3);
  const auto p = static_cast<std::size_t>(patch_size);
  if (p == 0 || h != w || h % p != 0) {
    throw ShapeError("patchify: image " + shape_str(images.shape()) + " not divisible into " +
                     std::to_string(patch_size) + "-pixel patches");
  }
  const std::size_t grid = h / p;
  // [B,3,g,p,g,p] -> [B,g,g,3,p,p]: each patch flattened channel-major.
  Tensor x = reshape(images, {batch, 3, grid, p, grid, p});
  return reshape(permute(x, {0, 2, 4, 1, 3, 5}), {batch, grid * grid, 3 * p * p});
}

Tensor unpatchify(const Tensor& patches, int patch_size, int image_size) {
  const auto p = static_cast<std::size_t>(patch_size);
  const auto s = static_cast<std::size_t>(image_size);
  if (p == 0 || s % p != 0) throw ShapeError("unpatchify: image size not divisible by patch size");
  const std::size_t grid = s / p, n = grid * grid, pd = 3 * p * p;
  if (patches.rank() != 3 || patches.dim(1) != n || patches.dim(2) != pd) {
    throw ShapeError("unpatchify: unexpected patch tensor " + shape_str(patches.shape()));
  }
  const std::size_t batch = patches.dim(0);
  std::vector<double> out(batch * 3 * s * s);
  const auto& src = patches.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t py = 0; py < grid; ++py) {
      for (std::size_t px = 0; px < grid; ++px) {
        const double* patch = &src[(b * n + py * grid + px) * pd];
        for (std::size_t c = 0; c < 3; ++c) {
          for (std::size_t dy = 0; dy < p; ++dy) {
            const double* row = patch + (c * p + dy) * p;
            std::copy(row, row + p, &out[((b * 3 + c) * s + py * p + dy) * s + px * p]);
          }
        }
      }
    }
  }
  return Tensor::from({batch, 3, s, s}, std::move(out));
}

namespace {

Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  return reshape(permute(reshape(x, {b, t, heads, d / heads}), {0, 2, 1, 3}), {b * heads, t, d / heads});
}

Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
  const std::size_t t = x.dim(1), dh = x.dim(2);
  return reshape(permute(reshape(x, {batch, heads, t, dh}), {0, 2, 1, 3}), {batch, t, heads * dh});
}

Tensor transformer_block(const Tensor& x, const TowerWeights& w, const std::string& p, const EncoderConfig& c,
                         std::span<const double> key_mask) {
  Tensor h = layer_norm(x, w.at(p + ".ln1.gamma"), w.at(p + ".ln1.beta"), c.ln_eps);
  Tensor y = add(x, multihead_attention(h, h, w, p + ".attn", c.num_heads, key_mask));
  h = layer_norm(y, w.at(p + ".ln2.gamma"), w.at(p + ".ln2.beta"), c.ln_eps);
  h = gelu(linear(h, w.at(p + ".mlp.fc1.weight"), w.at(p + ".mlp.fc1.bias")));
  h = linear(h, w.at(p + ".mlp.fc2.weight"), w.at(p + ".mlp.fc2.bias"));
  return add(y, h);
}

void expect_shape(const TowerWeights& w, const std::string& name, const Shape& shape) {
  if (!w.contains(name)) throw ConfigError("weights lack parameter '" + name + "' required by the config");
  if (w.at(name).shape() != shape) {
    throw ConfigError("parameter '" + name + "' has shape " + shape_str(w.at(name).shape()) + ", config expects " +
                      shape_str(shape));
  }
}

void check_blocks(const TowerWeights& w, const EncoderConfig& c) {
  const auto d = static_cast<std::size_t>(c.embed_dim);
  for (int i = 0; i < c.depth; ++i) {
    const std::string p = "blocks." + std::to_string(i);
    expect_shape(w, p + ".attn.q.weight", {d, d});
    expect_shape(w, p + ".mlp.fc1.weight", {d, static_cast<std::size_t>(c.mlp_dim())});
  }
  if (w.contains("blocks." + std::to_string(c.depth) + ".ln1.gamma")) {
    throw ConfigError("weights have more blocks than config depth " + std::to_string(c.depth));
  }
  expect_shape(w, "ln_final.gamma", {d});
  expect_shape(w, "proj.weight", {d, static_cast<std::size_t>(c.output_dim)});
}

Tensor run_blocks(Tensor x, const TowerWeights& w, const EncoderConfig& c, std::span<const double> key_mask) {
  for (int i = 0; i < c.depth; ++i) x = transformer_block(x, w, "blocks." + std::to_string(i), c, key_mask);
  return layer_norm(x, w.at("ln_final.gamma"), w.at("ln_final.beta"), c.ln_eps);
}

}  // namespace

Tensor multihead_attention(const Tensor& queries, const Tensor& keys_values, const TowerWeights& w,
                           const std::string& prefix, int num_heads, std::span<const double> key_mask) {
  const std::size_t batch = queries.dim(0), tq = queries.dim(1), tk = keys_values.dim(1);
  const auto heads = static_cast<std::size_t>(num_heads);
  const std::size_t dh = queries.dim(2) / heads;
  Tensor q = split_heads(linear(queries, w.at(prefix + ".q.weight"), w.at(prefix + ".q.bias")), heads);
  Tensor k = split_heads(linear(keys_values, w.at(prefix + ".k.weight"), w.at(prefix + ".k.bias")), heads);
  Tensor v = split_heads(linear(keys_values, w.at(prefix + ".v.weight"), w.at(prefix + ".v.bias")), heads);
  Tensor scores = scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (!key_mask.empty()) {
    if (key_mask.size() != batch * tk) throw ShapeError("attention key mask size mismatch");
    // Large finite negative bias: exp underflows to exactly 0.
    std::vector<double> bias(batch * heads * tq * tk, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < tq; ++i) {
          double* row = &bias[((b * heads + h) * tq + i) * tk];
          for (std::size_t j = 0; j < tk; ++j) row[j] = key_mask[b * tk + j] != 0.0 ? 0.0 : -1e9;
        }
      }
    }
    scores = add(scores, Tensor::from(scores.shape(), std::move(bias)));
  }
  Tensor attn = softmax(scores, 2);
  Tensor out = merge_heads(bmm(attn, v), batch, heads);
  return linear(out, w.at(prefix + ".out.weight"), w.at(prefix + ".out.bias"));
}

Tensor vit_forward(const Tensor& images, const TowerWeights& w, const EncoderConfig& c) {
  c.validate_vision();
  const auto d = static_cast<std::size_t>(c.embed_dim);
  const auto n = static_cast<std::size_t>(c.num_patches());
  if (images.rank() != 4 || images.dim(2) != static_cast<std::size_t>(c.image_size)) {
    throw ShapeError("vit_forward: images " + shape_str(images.shape()) + " do not match image_size " +
                     std::to_string(c.image_size));
  }
  expect_shape(w, "patch_embed.weight", {static_cast<std::size_t>(c.patch_dim()), d});
  expect_shape(w, "pos_embed", {n, d});
  check_blocks(w, c);
  Tensor x = linear(patchify(images, c.patch_size), w.at("patch_embed.weight"), w.at("patch_embed.bias"));
  x = add(x, w.at("pos_embed"));
  if (c.pooling == Pooling::cls_token) {
    expect_shape(w, "pool.cls_token", {1, 1, d});
    x = concat({repeat_batch(w.at("pool.cls_token"), images.dim(0)), x}, 1);
  }
  return run_blocks(x, w, c, {});
}

Tensor pool(const Tensor& tokens, Pooling strategy, const TowerWeights& w, const EncoderConfig& c) {
  if (tokens.rank() != 3) throw ShapeError("pool expects [B, T, D], got " + shape_str(tokens.shape()));
  switch (strategy) {
    case Pooling::cls_token:
      if (!w.contains("pool.cls_token")) {
        throw ConfigError("cls_token pooling requested but the tower has no CLS slot");
      }
      return select(tokens, 1, 0);
    case Pooling::mean:
      if (w.contains("pool.cls_token")) throw ConfigError("mean pooling over a tower that prepends a CLS token");
      return mean_axis(tokens, 1);
    case Pooling::map: {
      if (!w.contains("pool.probe")) throw ConfigError("map pooling requested but the tower has no probe query");
      if (w.contains("pool.cls_token")) throw ConfigError("map pooling over a tower that prepends a CLS token");
      const std::size_t batch = tokens.dim(0), d = tokens.dim(2);
      Tensor probe = repeat_batch(w.at("pool.probe"), batch);
      Tensor out = multihead_attention(probe, tokens, w, "pool.attn", c.num_heads);
      return reshape(out, {batch, d});
    }
  }
  throw ConfigError("unknown pooling strategy");
}

Tensor image_features(const Tensor& images, const TowerWeights& w, const EncoderConfig& c) {
  return pool(vit_forward(images, w, c), c.pooling, w, c);
}

Tensor embed_image(const Tensor& images, const TowerWeights& w, const EncoderConfig& c) {
  return l2_normalize(matmul(image_features(images, w, c), w.at("proj.weight")));
}

Tensor text_forward(const TokenBatch& tokens, const TowerWeights& w, const EncoderConfig& c) {
  c.validate_text();
  const auto d = static_cast<std::size_t>(c.embed_dim);
  if (tokens.ids.size() != tokens.batch * tokens.length || tokens.mask.size() != tokens.ids.size()) {
    throw ShapeError("text_forward: token batch buffers do not match [B, L]");
  }
  if (tokens.length > static_cast<std::size_t>(c.max_seq_len)) {
    throw ShapeError("text_forward: sequence length " + std::to_string(tokens.length) + " exceeds max_seq_len " +
                     std::to_string(c.max_seq_len));
  }
  for (int id : tokens.ids) {
    if (id < 0 || id >= c.vocab_size) {
      throw ConfigError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(c.vocab_size));
    }
  }
  expect_shape(w, "token_embed", {static_cast<std::size_t>(c.vocab_size), d});
  expect_shape(w, "pos_embed", {static_cast<std::size_t>(c.max_seq_len), d});
  check_blocks(w, c);
  std::vector<int> positions(tokens.length);
  for (std::size_t i = 0; i < tokens.length; ++i) positions[i] = static_cast<int>(i);
  Tensor x = reshape(embedding(w.at("token_embed"), tokens.ids), {tokens.batch, tokens.length, d});
  x = add(x, embedding(w.at("pos_embed"), positions));
  x = run_blocks(x, w, c, tokens.mask);
  return l2_normalize(matmul(masked_mean(x, tokens.mask), w.at("proj.weight")));
}

}  // namespace ltt
