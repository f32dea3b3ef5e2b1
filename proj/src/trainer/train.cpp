// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <unordered_map>

#include "ltt/trainer.hpp"

namespace ltt {

namespace {

constexpr const char* kMetricsHeader = "step,lr,loss,logit_scale,text_checksum";

// Frozen text rows keyed by caption string. Every distinct training caption
// is embedded once up front in sorted order, so the rows do not depend on
// batch history and a resumed run sees the same bits.
class FrozenTextCache {
 public:
  FrozenTextCache(const Corpus& corpus, const std::vector<std::size_t>& members, const Model& model,
                  const Vocab& vocab, int max_len)
      : dim_(static_cast<std::size_t>(model.text_config.output_dim)) {
    std::vector<std::string> captions;
    captions.reserve(members.size());
    for (auto i : members) captions.push_back(corpus.samples[i].caption);
    std::sort(captions.begin(), captions.end());
    captions.erase(std::unique(captions.begin(), captions.end()), captions.end());
    Tensor e = embed_captions(captions, model.text, model.text_config, vocab, max_len);
    for (std::size_t i = 0; i < captions.size(); ++i) {
      const auto* row = e.data().data() + i * dim_;
      cache_.emplace(captions[i], std::vector<double>(row, row + dim_));
    }
  }

  Tensor rows(const std::vector<std::string>& captions) const {
    std::vector<double> out;
    out.reserve(captions.size() * dim_);
    for (const auto& c : captions) {
      const auto& row = cache_.at(c);
      out.insert(out.end(), row.begin(), row.end());
    }
    return Tensor::from({captions.size(), dim_}, std::move(out));
  }

 private:
  std::size_t dim_;
  std::unordered_map<std::string, std::vector<double>> cache_;
};

std::string format_row(const StepMetrics& m) {
  std::ostringstream ss;
  ss << std::setprecision(17) << m.step << ',' << m.lr << ',' << m.loss << ',' << m.logit_scale << ','
     << m.text_checksum;
  return ss.str();
}

// Keeps header plus rows with step <= `step`, for resuming into an existing log.
void truncate_metrics(const std::filesystem::path& path, int step) {
  std::vector<std::string> keep{kMetricsHeader};
  std::ifstream in(path);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoi(line.substr(0, line.find(','))) <= step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

void set_trainable(Model& model, const TrainConfig& config) {
  model.vision.set_requires_grad(true);
  model.text.set_requires_grad(!config.freeze_text);
  model.logit_scale.t.set_requires_grad(true);
}

}  // namespace

Tensor embed_captions(const std::vector<std::string>& captions, const TowerWeights& text, const EncoderConfig& config,
                      const Vocab& vocab, int max_len) {
  NoGradGuard no_grad;
  const auto d = static_cast<std::size_t>(config.output_dim);
  constexpr std::size_t kChunk = 128;
  std::vector<double> out;
  out.reserve(captions.size() * d);
  for (std::size_t start = 0; start < captions.size(); start += kChunk) {
    const std::vector<std::string> chunk(
        captions.begin() + static_cast<std::ptrdiff_t>(start),
        captions.begin() + static_cast<std::ptrdiff_t>(std::min(captions.size(), start + kChunk)));
    Tensor e = text_forward(make_token_batch(chunk, vocab, max_len), text, config);
    out.insert(out.end(), e.data().begin(), e.data().end());
  }
  return Tensor::from({captions.size(), d}, std::move(out));
}

double validation_loss(const Corpus& corpus, const Vocab& vocab, const Model& model, const TrainConfig& config) {
  NoGradGuard no_grad;
  const auto val = corpus.indices(Split::val);
  if (val.size() < 2) throw TrainError("validation split has fewer than 2 samples");
  const std::size_t b = std::min(val.size(), static_cast<std::size_t>(config.batch_size));
  BatchOptions opt;
  opt.batch_size = b;
  opt.seed = config.seed;
  opt.train_mode = false;
  opt.max_seq_len = config.max_seq_len;
  opt.preprocess = config.preprocess;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start + b <= val.size(); start += b) {
    const std::vector<std::size_t> members(val.begin() + static_cast<std::ptrdiff_t>(start),
                                           val.begin() + static_cast<std::ptrdiff_t>(start + b));
    Batch batch = make_batch(corpus, vocab, members, opt, 0);
    Tensor img = embed_image(batch.images.pixels, model.vision, model.vision_config);
    Tensor txt = text_forward(batch.texts.tokens, model.text, model.text_config);
    total += contrastive_step_loss(img, txt, model.logit_scale).item();
    ++count;
  }
  return total / static_cast<double>(count);
}

TrainResult train(const Corpus& corpus, const Vocab& vocab, Model& model, const TrainConfig& config,
                  const TrainOptions& options) {
  config.validate();
  TrainResult result;
  TrainState& st = result.state;
  Rng rng(mix_seed({config.seed, 0x7ea1ULL}));
  const std::filesystem::path metrics_path = options.out_dir.empty() ? "" : options.out_dir / "metrics.csv";

  if (options.resume_from) {
    Checkpoint ck = load_checkpoint(*options.resume_from);
    if (ck.state.config_hash != config_hash(config)) {
      throw TrainError("cannot resume: checkpoint was written under a different training config");
    }
    model = std::move(ck.model);
    st = std::move(ck.state);
    rng.set_state(st.rng_state);
  } else {
    model.logit_scale = LogitScale::from_temperature(config.initial_temperature);
    st.config_hash = config_hash(config);
    if (!metrics_path.empty()) {
      std::filesystem::create_directories(options.out_dir);
      std::ofstream(metrics_path, std::ios::trunc) << kMetricsHeader << '\n';
    }
  }
  model.vision_config.validate_vision();
  model.text_config.validate_text();
  if (model.vision_config.output_dim != model.text_config.output_dim) {
    throw ConfigError("vision and text towers must share output_dim");
  }
  if (model.vision_config.image_size != config.preprocess.size) {
    throw ConfigError("preprocess size " + std::to_string(config.preprocess.size) + " differs from vision image_size " +
                      std::to_string(model.vision_config.image_size));
  }

  if (options.resume_from && !metrics_path.empty()) truncate_metrics(metrics_path, st.step);
  set_trainable(model, config);
  const auto groups = param_groups(model, config);
  const AdamWHyper hyper{config.beta1, config.beta2, config.eps};
  result.text_checksum_before = model.text.checksum();

  const auto train_idx = corpus.indices(Split::train);
  const auto b = static_cast<std::size_t>(config.batch_size);
  const std::size_t per_epoch = train_idx.size() / b;
  if (per_epoch == 0) throw TrainError("training split smaller than one batch");
  const double divergence_threshold = 2.0 * std::log(static_cast<double>(b));

  std::optional<FrozenTextCache> text_cache;
  if (config.freeze_text) text_cache.emplace(corpus, train_idx, model, vocab, config.max_seq_len);
  std::ofstream metrics;
  if (!metrics_path.empty()) metrics.open(metrics_path, std::ios::app);

  auto checkpoint = [&](bool track_best) {
    if (options.out_dir.empty()) return;
    st.rng_state = rng.state();
    if (track_best) {
      const double val = validation_loss(corpus, vocab, model, config);
      if (val < st.best_val_loss) {
        st.best_val_loss = val;
        save_checkpoint(options.out_dir / "checkpoints" / "best", model, st, config);
      }
    }
    save_checkpoint(options.out_dir / "checkpoints" / "last", model, st, config);
  };

  const int end = options.stop_at_step > 0 ? std::min(options.stop_at_step, config.total_steps) : config.total_steps;
  std::uint64_t cached_epoch = ~0ULL;
  std::vector<std::vector<std::size_t>> order;
  while (st.step < end) {
    const auto k = static_cast<std::size_t>(st.step);
    const std::uint64_t epoch = k / per_epoch;
    if (epoch != cached_epoch) {
      order = epoch_batches(train_idx, b, config.seed, epoch);
      cached_epoch = epoch;
    }
    BatchOptions opt;
    opt.batch_size = b;
    opt.seed = rng.next_u64();
    opt.train_mode = config.augment;
    opt.max_seq_len = config.max_seq_len;
    opt.preprocess = config.preprocess;
    Batch batch = make_batch(corpus, vocab, order[k % per_epoch], opt, epoch);

    for (const auto& g : groups) Tensor(g.value).clear_grad();
    Tensor img = embed_image(batch.images.pixels, model.vision, model.vision_config);
    Tensor txt = config.freeze_text ? text_cache->rows(batch.texts.captions)
                                    : text_forward(batch.texts.tokens, model.text, model.text_config);
    Tensor loss = contrastive_step_loss(img, txt, model.logit_scale);
    backward(loss);
    const double lr = lr_at(st.step + 1, config);
    adamw_step(st.optimizer, groups, lr, hyper);
    st.step += 1;

    StepMetrics m{st.step, lr, loss.item(), model.logit_scale.log_value(), model.text.checksum(),
                  batch.duplicate_caption_pairs};
    if (metrics.is_open()) metrics << format_row(m) << '\n' << std::flush;
    result.log.push_back(std::move(m));

    st.high_loss_streak = loss.item() > divergence_threshold ? st.high_loss_streak + 1 : 0;
    if (st.high_loss_streak >= config.divergence_patience) {
      result.diverged = true;
      std::ostringstream ss;
      ss << "diverged at step " << st.step << ": loss stayed above 2 ln B = " << divergence_threshold << " for "
         << st.high_loss_streak << " consecutive steps (last loss " << loss.item() << ", lr " << lr << ")";
      result.report = ss.str();
      checkpoint(false);
      break;
    }
    if (st.step % config.checkpoint_every == 0) {
      checkpoint(true);
    } else if (st.step == end) {
      // End of a run that is not on the cadence: keep "best" identical to
      // what an uninterrupted run would have.
      checkpoint(end == config.total_steps);
    }
  }
  st.rng_state = rng.state();
  for (const auto& g : groups) Tensor(g.value).clear_grad();
  model.vision.set_requires_grad(false);
  model.text.set_requires_grad(false);
  model.logit_scale.t.set_requires_grad(false);
  result.text_checksum_after = model.text.checksum();
  if (result.report.empty()) {
    std::ostringstream ss;
    ss << "completed " << st.step << " of " << config.total_steps << " steps";
    if (!result.log.empty()) ss << ", final loss " << result.log.back().loss;
    result.report = ss.str();
  }
  return result;
}

}  // namespace ltt
