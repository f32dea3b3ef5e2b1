// SPDX-License-Identifier: Apache-2.0

#include <numeric>
#include <unordered_map>

#include "ltt/data.hpp"

namespace ltt {

std::size_t count_duplicate_captions(const std::vector<std::string>& captions) {
  std::unordered_map<std::string_view, std::size_t> counts;
  for (const auto& c : captions) ++counts[c];
  std::size_t pairs = 0;
  for (const auto& [_, k] : counts) pairs += k * (k - 1) / 2;
  return pairs;
}

std::vector<std::vector<std::size_t>> epoch_batches(const std::vector<std::size_t>& indices, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size < 2) throw DataError("batch_size must be at least 2 so every row has negatives");
  std::vector<std::size_t> order = indices;
  Rng rng(mix_seed({seed, epoch, 0xba7c4ULL}));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start + batch_size <= order.size(); start += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(start + batch_size));
  }
  return out;
}

Batch make_batch(const Corpus& corpus, const Vocab& vocab, const std::vector<std::size_t>& members,
                 const BatchOptions& options, std::uint64_t epoch) {
  const auto s = static_cast<std::size_t>(options.preprocess.size);
  const std::size_t per_image = 3 * s * s;
  std::vector<double> pixels(members.size() * per_image);
  Batch b;
  for (std::size_t r = 0; r < members.size(); ++r) {
    const auto& sample = corpus.samples.at(members[r]);
    Rng aug(mix_seed({options.seed, epoch, sample.id, 0xa06ULL}));
    Tensor img = preprocess(sample.image, options.preprocess, options.train_mode, &aug);
    std::copy(img.data().begin(), img.data().end(), pixels.begin() + static_cast<std::ptrdiff_t>(r * per_image));
    b.images.sample_ids.push_back(sample.id);
    b.images.class_ids.push_back(sample.class_id);
    b.texts.captions.push_back(sample.caption);
    b.texts.class_ids.push_back(sample.class_id);
  }
  b.images.pixels = Tensor::from({members.size(), 3, s, s}, std::move(pixels));
  b.texts.tokens = make_token_batch(b.texts.captions, vocab, options.max_seq_len);
  b.duplicate_caption_pairs = count_duplicate_captions(b.texts.captions);
  return b;
}

BatchIterator::BatchIterator(const Corpus& corpus, const Vocab& vocab, std::vector<std::size_t> indices,
                             BatchOptions options, std::uint64_t epoch)
    : corpus_(&corpus),
      vocab_(&vocab),
      options_(std::move(options)),
      epoch_(epoch),
      order_(epoch_batches(indices, options_.batch_size, options_.seed, epoch)) {}

std::optional<Batch> BatchIterator::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  return make_batch(*corpus_, *vocab_, order_[cursor_++], options_, epoch_);
}

}  // namespace ltt
