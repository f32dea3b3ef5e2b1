// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>

#include "ltt/experiments.hpp"

namespace ltt {

namespace {

TrainConfig schedule(int steps, int warmup, double peak_lr) {
  TrainConfig c;
  c.total_steps = steps;
  c.warmup_steps = warmup;
  c.peak_lr = peak_lr;
  return c;
}

std::vector<ParamGroupEntry> tower_groups(const TowerWeights& w, double weight_decay) {
  std::vector<ParamGroupEntry> out;
  for (const auto& [name, p] : w) {
    out.push_back({name, p.value, is_no_decay_param(name) ? 0.0 : weight_decay, false});
  }
  return out;
}

void shuffle(std::vector<int>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

}  // namespace

EncoderConfig desk_text_config(int vocab_size) {
  EncoderConfig c;
  c.embed_dim = 32;
  c.depth = 2;
  c.num_heads = 2;
  c.mlp_ratio = 2.0;
  c.output_dim = 32;
  c.vocab_size = vocab_size;
  c.max_seq_len = 16;
  return c;
}

EncoderConfig desk_vision_config() {
  EncoderConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 32;
  c.depth = 2;
  c.num_heads = 2;
  c.mlp_ratio = 2.0;
  c.pooling = Pooling::map;
  c.output_dim = 32;
  return c;
}

TrainConfig desk_train_config() {
  TrainConfig c;
  c.total_steps = 500;
  c.warmup_steps = 50;
  c.batch_size = 64;
  c.checkpoint_every = 100;
  c.preprocess.size = 32;
  c.max_seq_len = 16;
  return c;
}

void to_json(nlohmann::json& j, const TextPretrainConfig& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"warmup_steps", c.warmup_steps},
                     {"batch_size", c.batch_size},
                     {"peak_lr", c.peak_lr},
                     {"weight_decay", c.weight_decay},
                     {"temperature", c.temperature},
                     {"max_seq_len", c.max_seq_len},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TextPretrainConfig& c) {
  TextPretrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.peak_lr = j.value("peak_lr", d.peak_lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.temperature = j.value("temperature", d.temperature);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.seed = j.value("seed", d.seed);
}

void to_json(nlohmann::json& j, const VisionPretrainConfig& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"warmup_steps", c.warmup_steps},
                     {"batch_size", c.batch_size},
                     {"peak_lr", c.peak_lr},
                     {"weight_decay", c.weight_decay},
                     {"augment", c.augment},
                     {"image_size", c.preprocess.size},
                     {"crop_min_scale", c.preprocess.min_scale},
                     {"crop_max_scale", c.preprocess.max_scale},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, VisionPretrainConfig& c) {
  VisionPretrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.peak_lr = j.value("peak_lr", d.peak_lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.augment = j.value("augment", d.augment);
  c.preprocess.size = j.value("image_size", d.preprocess.size);
  c.preprocess.min_scale = j.value("crop_min_scale", d.preprocess.min_scale);
  c.preprocess.max_scale = j.value("crop_max_scale", d.preprocess.max_scale);
  c.seed = j.value("seed", d.seed);
}

std::pair<double, double> class_cosine_separation(const TowerWeights& text, const EncoderConfig& config,
                                                  const GrammarConfig& grammar, const Vocab& vocab,
                                                  const std::vector<std::string>& templates, int max_len) {
  const int c = grammar.num_classes();
  const auto t = templates.size();
  std::vector<std::string> captions;
  for (int k = 0; k < c; ++k) {
    for (const auto& tmpl : templates) captions.push_back(fill_template(tmpl, grammar.class_name(k)));
  }
  Tensor e = embed_captions(captions, text, config, vocab, max_len);
  const auto d = static_cast<std::size_t>(config.output_dim);
  double within = 0, cross = 0;
  std::size_t nw = 0, nc = 0;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    for (std::size_t j = i + 1; j < captions.size(); ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += e.data()[i * d + k] * e.data()[j * d + k];
      if (i / t == j / t) {
        within += dot;
        ++nw;
      } else {
        cross += dot;
        ++nc;
      }
    }
  }
  return {nw ? within / static_cast<double>(nw) : 1.0, cross / static_cast<double>(nc)};
}

TextPretrainResult pretrain_text(const Corpus& corpus, const Vocab& vocab, const EncoderConfig& config,
                                 const TextPretrainConfig& options) {
  config.validate_text();
  if (config.vocab_size != static_cast<int>(vocab.size())) throw ConfigError("text vocab_size differs from vocab");
  const GrammarConfig& g = corpus.grammar;
  const auto templates = g.all_templates();
  if (templates.size() < 2) throw ExperimentError("paraphrase pairs need at least two templates");
  const int num_classes = g.num_classes();
  const int b = std::min(options.batch_size, num_classes);
  if (b < 2) throw ExperimentError("text pretraining batch needs at least 2 classes");

  // Training captions grouped by class: the caption-only view of the corpus.
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
  for (auto i : corpus.indices(Split::train)) by_class[static_cast<std::size_t>(corpus.samples[i].class_id)].push_back(i);
  for (const auto& v : by_class) {
    if (v.empty()) throw ExperimentError("a class has no training captions");
  }

  Rng rng(mix_seed({options.seed, 0x7e47ULL}));
  TextPretrainResult out;
  out.config = config;
  out.weights = init_text_tower(config, rng);
  out.weights.set_requires_grad(true);
  const auto groups = tower_groups(out.weights, options.weight_decay);
  const TrainConfig sched = schedule(options.steps, options.warmup_steps, options.peak_lr);
  sched.validate();
  const LogitScale scale = LogitScale::from_temperature(options.temperature, false);
  OptimizerState opt;

  std::vector<int> classes(static_cast<std::size_t>(num_classes));
  for (int k = 0; k < num_classes; ++k) classes[static_cast<std::size_t>(k)] = k;
  for (int step = 1; step <= options.steps; ++step) {
    shuffle(classes, rng);
    std::vector<std::string> anchors, paraphrases;
    for (int r = 0; r < b; ++r) {
      const int k = classes[static_cast<std::size_t>(r)];
      const auto& pool = by_class[static_cast<std::size_t>(k)];
      const auto& sample = corpus.samples[pool[rng.below(pool.size())]];
      const std::string& own = g.train_templates.at(static_cast<std::size_t>(sample.template_index));
      std::string other = own;
      while (other == own) other = templates[rng.below(templates.size())];
      anchors.push_back(sample.caption);
      paraphrases.push_back(fill_template(other, g.class_name(k)));
    }
    out.weights.zero_grad();
    Tensor a = text_forward(make_token_batch(anchors, vocab, options.max_seq_len), out.weights, config);
    Tensor p = text_forward(make_token_batch(paraphrases, vocab, options.max_seq_len), out.weights, config);
    Tensor loss = contrastive_step_loss(a, p, scale);
    backward(loss);
    adamw_step(opt, groups, lr_at(step, sched), {});
    out.losses.push_back(loss.item());
  }
  out.weights.clear_grads();
  out.weights.set_requires_grad(false);
  out.weights.set_pretrained(true);
  std::tie(out.within_class_cosine, out.cross_class_cosine) =
      class_cosine_separation(out.weights, config, g, vocab, g.held_out_templates(), options.max_seq_len);
  return out;
}

VisionPretrainResult pretrain_vision(const Corpus& corpus, const EncoderConfig& config,
                                     const VisionPretrainConfig& options) {
  config.validate_vision();
  if (config.image_size != options.preprocess.size) throw ConfigError("vision image_size differs from preprocess size");
  const auto num_classes = static_cast<std::size_t>(corpus.grammar.num_classes());
  const auto d = static_cast<std::size_t>(config.output_dim);
  const auto b = static_cast<std::size_t>(options.batch_size);
  const auto train_idx = corpus.indices(Split::train);
  const std::size_t per_epoch = train_idx.size() / b;
  if (per_epoch == 0) throw ExperimentError("training split smaller than one batch");

  Rng rng(mix_seed({options.seed, 0x715aULL}));
  VisionPretrainResult out;
  out.config = config;
  out.weights = init_vision_tower(config, rng);
  TowerWeights head;
  {
    std::vector<double> w(d * num_classes);
    for (auto& x : w) x = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
    head.add("head.weight", Tensor::from({d, num_classes}, std::move(w)));
    head.add("head.bias", Tensor::zeros({num_classes}));
  }
  out.weights.set_requires_grad(true);
  head.set_requires_grad(true);
  auto groups = tower_groups(out.weights, options.weight_decay);
  for (auto& g : tower_groups(head, options.weight_decay)) groups.push_back(std::move(g));
  const TrainConfig sched = schedule(options.steps, options.warmup_steps, options.peak_lr);
  sched.validate();
  OptimizerState opt;

  auto logits_of = [&](const Tensor& images) {
    Tensor feats = matmul(image_features(images, out.weights, config), out.weights.at("proj.weight"));
    return linear(feats, head.at("head.weight"), head.at("head.bias"));
  };

  Vocab caption_vocab = Vocab::from_grammar(corpus.grammar);
  std::uint64_t cached_epoch = ~0ULL;
  std::vector<std::vector<std::size_t>> order;
  for (int step = 1; step <= options.steps; ++step) {
    const auto k = static_cast<std::size_t>(step - 1);
    const std::uint64_t epoch = k / per_epoch;
    if (epoch != cached_epoch) {
      order = epoch_batches(train_idx, b, options.seed, epoch);
      cached_epoch = epoch;
    }
    BatchOptions bo;
    bo.batch_size = b;
    bo.seed = rng.next_u64();
    bo.train_mode = options.augment;
    bo.preprocess = options.preprocess;
    Batch batch = make_batch(corpus, caption_vocab, order[k % per_epoch], bo, epoch);
    for (auto& g : groups) Tensor(g.value).clear_grad();
    Tensor logp = log_softmax(logits_of(batch.images.pixels), 1);
    Tensor loss = scale(mean(pick(logp, batch.images.class_ids)), -1.0);
    backward(loss);
    adamw_step(opt, groups, lr_at(step, sched), {});
    out.losses.push_back(loss.item());
  }
  for (auto& g : groups) Tensor(g.value).clear_grad();
  out.weights.set_requires_grad(false);
  head.set_requires_grad(false);

  // Train accuracy under eval preprocessing.
  {
    NoGradGuard no_grad;
    std::size_t correct = 0;
    const auto s = static_cast<std::size_t>(options.preprocess.size);
    constexpr std::size_t kChunk = 128;
    for (std::size_t start = 0; start < train_idx.size(); start += kChunk) {
      const std::size_t stop = std::min(train_idx.size(), start + kChunk);
      std::vector<double> pixels;
      for (std::size_t r = start; r < stop; ++r) {
        Tensor img = preprocess(corpus.samples[train_idx[r]].image, options.preprocess, false, nullptr);
        pixels.insert(pixels.end(), img.data().begin(), img.data().end());
      }
      Tensor logits = logits_of(Tensor::from({stop - start, 3, s, s}, std::move(pixels)));
      for (std::size_t r = 0; r < stop - start; ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < num_classes; ++c) {
          if (logits.data()[r * num_classes + c] > logits.data()[r * num_classes + best]) best = c;
        }
        correct += static_cast<int>(best) == corpus.samples[train_idx[start + r]].class_id;
      }
    }
    out.train_accuracy = static_cast<double>(correct) / static_cast<double>(train_idx.size());
  }
  out.weights.set_pretrained(true);
  return out;
}

}  // namespace ltt
