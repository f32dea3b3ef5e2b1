// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "ltt/data.hpp"
#include "test_util.hpp"

namespace ltt {
namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ltt_data_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

Raster random_raster(int w, int h, Rng& rng) {
  Raster r{w, h, std::vector<double>(3 * static_cast<std::size_t>(w) * h)};
  for (auto& v : r.pixels) v = rng.uniform();
  return r;
}

// Independent 2-D evaluation of the antialiased bicubic resize.
double keys_cubic(double x) {
  x = std::abs(x);
  if (x < 1) return 1.5 * x * x * x - 2.5 * x * x + 1;
  if (x < 2) return -0.5 * x * x * x + 2.5 * x * x - 4 * x + 2;
  return 0;
}

std::vector<double> filter_row(int in, int out, int i) {
  const double scale = static_cast<double>(in) / out;
  const double fs = std::max(1.0, scale);
  const double center = (i + 0.5) * scale;
  std::vector<double> w(static_cast<std::size_t>(in), 0.0);
  double total = 0;
  for (int j = 0; j < in; ++j) {
    if (j + 0.5 < center - 2 * fs || j + 0.5 >= center + 2 * fs) continue;
    w[static_cast<std::size_t>(j)] = keys_cubic((j + 0.5 - center) / fs);
    total += w[static_cast<std::size_t>(j)];
  }
  for (auto& x : w) x /= total;
  return w;
}

double oracle_resize_pixel(const Raster& img, int ow, int oh, int c, int y, int x) {
  const auto wx = filter_row(img.width, ow, x);
  const auto wy = filter_row(img.height, oh, y);
  double acc = 0;
  for (int yy = 0; yy < img.height; ++yy) {
    for (int xx = 0; xx < img.width; ++xx) acc += wy[static_cast<std::size_t>(yy)] * wx[static_cast<std::size_t>(xx)] * img.at(c, yy, xx);
  }
  return std::clamp(acc, 0.0, 1.0);
}

TEST(Grammar, DefaultsAreConsistent) {
  GrammarConfig g;
  EXPECT_NO_THROW(g.validate());
  EXPECT_EQ(g.num_classes(), 16);
  EXPECT_EQ(g.eval_templates.size(), 4u);
  const auto held = g.held_out_templates();
  EXPECT_GE(held.size(), 1u);
  for (const auto& t : held) EXPECT_EQ(std::count(g.train_templates.begin(), g.train_templates.end(), t), 0);
  EXPECT_EQ(g.class_name(0), "red circle");
  EXPECT_EQ(g.class_name(15), "yellow cross");
  EXPECT_EQ(fill_template("a photo of a {}", "blue square"), "a photo of a blue square");
  GrammarConfig bad;
  bad.eval_templates = {"no slot"};
  EXPECT_THROW(bad.validate(), DataError);
}

TEST(GenerateCorpus, BalancedOverClasses) {
  GrammarConfig g;
  g.raster_size = 8;
  Corpus c = generate_corpus(1000, g, 7);
  std::map<int, int> counts;
  for (const auto& s : c.samples) ++counts[s.class_id];
  EXPECT_EQ(counts.size(), 16u);
  for (const auto& [_, k] : counts) EXPECT_TRUE(k == 62 || k == 63) << k;
}

TEST(GenerateCorpus, SeedStableDigest) {
  GrammarConfig g;
  const auto a = corpus_digest(generate_corpus(64, g, 11));
  const auto b = corpus_digest(generate_corpus(64, g, 11));
  const auto c = corpus_digest(generate_corpus(64, g, 12));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_EQ(a.size(), 64u);
}

TEST(GenerateCorpus, SplitsAreDisjointAndNearEightyTenTen) {
  GrammarConfig g;
  g.raster_size = 8;
  Corpus c = generate_corpus(5000, g, 3);
  std::set<std::size_t> train, val, test;
  for (auto i : c.indices(Split::train)) train.insert(c.samples[i].id);
  for (auto i : c.indices(Split::val)) val.insert(c.samples[i].id);
  for (auto i : c.indices(Split::test)) test.insert(c.samples[i].id);
  EXPECT_EQ(train.size() + val.size() + test.size(), 5000u);
  for (auto id : val) EXPECT_EQ(train.count(id), 0u);
  for (auto id : test) EXPECT_EQ(train.count(id) + val.count(id), 0u);
  EXPECT_NEAR(train.size() / 5000.0, 0.8, 0.03);
  EXPECT_NEAR(val.size() / 5000.0, 0.1, 0.02);
  EXPECT_NEAR(test.size() / 5000.0, 0.1, 0.02);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(c.samples[i].split, split_for(3, i));
}

TEST(GenerateCorpus, CaptionIsFunctionOfClassAndTemplate) {
  GrammarConfig g;
  g.raster_size = 8;
  Corpus c = generate_corpus(300, g, 5);
  std::set<int> used;
  for (const auto& s : c.samples) {
    EXPECT_EQ(s.caption, fill_template(g.train_templates[static_cast<std::size_t>(s.template_index)],
                                       g.class_name(s.class_id)));
    used.insert(s.template_index);
  }
  EXPECT_EQ(used.size(), g.train_templates.size());
}

TEST(RenderSample, SameSeedSameBitsAndQuantized) {
  GrammarConfig g;
  Raster a = render_sample(g, 5, 99);
  Raster b = render_sample(g, 5, 99);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, render_sample(g, 5, 100));
  EXPECT_EQ(a.width, 48);
  for (double v : a.pixels) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_EQ(v, std::round(v * 255.0) / 255.0);
  }
}

TEST(RenderSample, ObjectColorDominatesItsChannel) {
  GrammarConfig g;
  // Red object: the reddest pixel is much redder than it is green.
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Raster r = render_sample(g, 0, seed);
    double best = -1;
    for (int y = 0; y < r.height; ++y) {
      for (int x = 0; x < r.width; ++x) best = std::max(best, r.at(0, y, x) - r.at(1, y, x));
    }
    EXPECT_GT(best, 0.4);
  }
}

TEST(CorpusPersistence, SaveLoadRoundTrip) {
  GrammarConfig g;
  Corpus c = generate_corpus(40, g, 21);
  auto dir = scratch("roundtrip");
  save_corpus(c, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "images" / "000039.ppm"));
  Corpus back = load_corpus(dir);
  EXPECT_EQ(corpus_digest(back), corpus_digest(c));
  EXPECT_EQ(back.grammar, c.grammar);
  std::filesystem::remove_all(dir);
}

TEST(CorpusPersistence, PpmIsP6) {
  Rng rng(1);
  Raster r = random_raster(5, 3, rng);
  for (auto& v : r.pixels) v = std::round(v * 255) / 255;
  auto dir = scratch("ppm");
  std::filesystem::create_directories(dir);
  write_ppm(dir / "x.ppm", r);
  EXPECT_EQ(read_ppm(dir / "x.ppm"), r);
  std::ifstream in(dir / "x.ppm", std::ios::binary);
  std::string magic;
  in >> magic;
  EXPECT_EQ(magic, "P6");
  EXPECT_EQ(std::filesystem::file_size(dir / "x.ppm"), std::string("P6\n5 3\n255\n").size() + 45);
  EXPECT_THROW(read_ppm(dir / "missing.ppm"), DataError);
  std::filesystem::remove_all(dir);
}

TEST(Resize, MatchesDirectTwoDimensionalOracle) {
  Rng rng(2);
  Raster img = random_raster(12, 10, rng);
  for (auto [ow, oh] : std::vector<std::pair<int, int>>{{7, 5}, {12, 14}, {5, 10}, {20, 3}}) {
    Raster out = resize_bicubic(img, ow, oh);
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) EXPECT_NEAR(out.at(c, y, x), oracle_resize_pixel(img, ow, oh, c, y, x), 1e-12);
      }
    }
  }
}

TEST(Resize, ConstantImageStaysConstant) {
  Raster img{48, 48, std::vector<double>(3 * 48 * 48, 0.3)};
  for (double v : resize_bicubic(img, 34, 34).pixels) EXPECT_NEAR(v, 0.3, 1e-15);
}

TEST(Preprocess, MeanValuedChannelNormalizesToZero) {
  Raster img{48, 48, std::vector<double>(3 * 48 * 48)};
  for (std::size_t c = 0; c < 3; ++c) std::fill_n(img.pixels.begin() + static_cast<std::ptrdiff_t>(c * 48 * 48), 48 * 48, kClipMean[c]);
  Tensor t = preprocess(img, PreprocessConfig{}, false);
  EXPECT_EQ(t.shape(), (Shape{3, 32, 32}));
  for (double v : t.data()) EXPECT_NEAR(v, 0.0, 1e-12);
  std::fill(img.pixels.begin(), img.pixels.end(), 1.0);
  Tensor w = preprocess(img, PreprocessConfig{}, false);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(w.data()[c * 1024 + 17], (1.0 - kClipMean[c]) / kClipStd[c], 1e-12);
}

TEST(Preprocess, EvalIsDeterministic) {
  GrammarConfig g;
  Raster img = render_sample(g, 3, 4);
  EXPECT_EQ(testing::to_vec(preprocess(img, {}, false)), testing::to_vec(preprocess(img, {}, false)));
}

TEST(Preprocess, TrainWithJitterDisabledEqualsEval) {
  GrammarConfig g;
  PreprocessConfig cfg;
  cfg.min_scale = cfg.max_scale = 1.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Raster img = render_sample(g, static_cast<int>(seed), seed);
    Rng rng(seed);
    EXPECT_EQ(testing::to_vec(preprocess(img, cfg, true, &rng)), testing::to_vec(preprocess(img, cfg, false)));
  }
}

TEST(Preprocess, TrainWithJitterVariesAndStaysSeeded) {
  GrammarConfig g;
  Raster img = render_sample(g, 9, 1);
  PreprocessConfig cfg;
  std::set<std::vector<double>> outs;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Rng a(seed), b(seed);
    auto va = testing::to_vec(preprocess(img, cfg, true, &a));
    EXPECT_EQ(va, testing::to_vec(preprocess(img, cfg, true, &b)));
    outs.insert(va);
  }
  EXPECT_GT(outs.size(), 1u);
}

TEST(Preprocess, Errors) {
  Raster tiny{15, 40, std::vector<double>(3 * 15 * 40, 0.5)};
  EXPECT_THROW(preprocess(tiny, {}, false), DataError);
  Raster ok{48, 48, std::vector<double>(3 * 48 * 48, 0.5)};
  EXPECT_THROW(preprocess(ok, {}, true, nullptr), DataError);
  Raster rect{64, 40, std::vector<double>(3 * 64 * 40, 0.5)};
  EXPECT_EQ(preprocess(rect, {}, false).shape(), (Shape{3, 32, 32}));
}

TEST(Tokenize, CountsAndMask) {
  GrammarConfig g;
  Vocab v = Vocab::from_grammar(g);
  auto t = tokenize("a photo of a red circle", v, 16);
  EXPECT_EQ(t.ids.size(), 16u);
  EXPECT_EQ(std::accumulate(t.mask.begin(), t.mask.end(), 0.0), 8.0);
  EXPECT_EQ(t.ids[0], Vocab::kBos);
  EXPECT_EQ(t.ids[7], Vocab::kEos);
  EXPECT_EQ(t.ids[8], Vocab::kPad);
  for (int i = 1; i <= 6; ++i) EXPECT_GT(t.ids[static_cast<std::size_t>(i)], Vocab::kEos);
}

TEST(Tokenize, RoundTripOverGrammar) {
  GrammarConfig g;
  Vocab v = Vocab::from_grammar(g);
  for (const auto& t : g.all_templates()) {
    for (int c = 0; c < g.num_classes(); ++c) {
      const auto caption = fill_template(t, g.class_name(c));
      EXPECT_EQ(detokenize(tokenize(caption, v, 16).ids, v), caption);
    }
  }
}

TEST(Tokenize, UnknownWordAndOverflow) {
  Vocab v = Vocab::from_grammar(GrammarConfig{});
  auto t = tokenize("a purple circle", v, 8);
  EXPECT_EQ(t.ids[2], Vocab::kUnk);
  EXPECT_EQ(detokenize(t.ids, v), "a [UNK] circle");
  EXPECT_THROW(tokenize("a b c d e f g", v, 8), DataError);
  EXPECT_NO_THROW(tokenize("a b c d e f", v, 8));
}

TEST(Vocab, SaveLoadPreservesIds) {
  Vocab v = Vocab::from_grammar(GrammarConfig{});
  auto dir = scratch("vocab");
  std::filesystem::create_directories(dir);
  v.save(dir / "vocab.txt");
  Vocab back = Vocab::load(dir / "vocab.txt");
  EXPECT_EQ(back.tokens(), v.tokens());
  EXPECT_EQ(back.id("circle"), v.id("circle"));
  EXPECT_EQ(v.token(0), "[PAD]");
  std::filesystem::remove_all(dir);
}

TEST(BatchIter, DropsLastPartialBatch) {
  std::vector<std::size_t> idx(100);
  std::iota(idx.begin(), idx.end(), 0);
  auto batches = epoch_batches(idx, 32, 1, 0);
  EXPECT_EQ(batches.size(), 3u);
  std::set<std::size_t> seen;
  for (const auto& b : batches) {
    EXPECT_EQ(b.size(), 32u);
    seen.insert(b.begin(), b.end());
  }
  EXPECT_EQ(seen.size(), 96u);
  EXPECT_THROW(epoch_batches(idx, 1, 1, 0), DataError);
}

TEST(BatchIter, OrderIsAFunctionOfSeedAndEpoch) {
  std::vector<std::size_t> idx(200);
  std::iota(idx.begin(), idx.end(), 0);
  EXPECT_EQ(epoch_batches(idx, 16, 4, 2), epoch_batches(idx, 16, 4, 2));
  EXPECT_NE(epoch_batches(idx, 16, 4, 2), epoch_batches(idx, 16, 4, 3));
  EXPECT_NE(epoch_batches(idx, 16, 4, 2), epoch_batches(idx, 16, 5, 2));
}

TEST(BatchIter, RowsArePositivePairs) {
  GrammarConfig g;
  Corpus c = generate_corpus(120, g, 8);
  Vocab v = Vocab::from_grammar(g);
  BatchOptions opt;
  opt.batch_size = 16;
  opt.seed = 3;
  BatchIterator it(c, v, c.indices(Split::train), opt, 0);
  std::size_t n = 0;
  while (auto b = it.next()) {
    ++n;
    EXPECT_EQ(b->images.pixels.shape(), (Shape{16, 3, 32, 32}));
    EXPECT_EQ(b->texts.tokens.batch, 16u);
    for (std::size_t r = 0; r < 16; ++r) {
      const auto& s = c.samples[b->images.sample_ids[r]];
      EXPECT_EQ(b->images.class_ids[r], b->texts.class_ids[r]);
      EXPECT_EQ(b->texts.captions[r], s.caption);
      EXPECT_EQ(s.split, Split::train);
    }
    EXPECT_EQ(b->duplicate_caption_pairs, count_duplicate_captions(b->texts.captions));
  }
  EXPECT_EQ(n, it.num_batches());
  EXPECT_EQ(n, c.indices(Split::train).size() / 16);
}

TEST(BatchIter, BatchesAreReproducible) {
  GrammarConfig g;
  Corpus c = generate_corpus(64, g, 9);
  Vocab v = Vocab::from_grammar(g);
  BatchOptions opt;
  opt.batch_size = 8;
  BatchIterator a(c, v, c.indices(Split::train), opt, 1);
  BatchIterator b(c, v, c.indices(Split::train), opt, 1);
  while (auto x = a.next()) {
    auto y = b.next();
    ASSERT_TRUE(y.has_value());
    EXPECT_EQ(testing::to_vec(x->images.pixels), testing::to_vec(y->images.pixels));
    EXPECT_EQ(x->texts.tokens.ids, y->texts.tokens.ids);
  }
}

TEST(DuplicateCaptions, MatchesBruteForceScan) {
  Rng rng(10);
  const std::vector<std::string> pool{"a red circle", "a blue cross", "a photo of a red circle", "a green square"};
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::string> caps(1 + rng.below(30));
    for (auto& s : caps) s = pool[rng.below(pool.size())];
    std::size_t brute = 0;
    for (std::size_t i = 0; i < caps.size(); ++i) {
      for (std::size_t j = i + 1; j < caps.size(); ++j) brute += caps[i] == caps[j] ? 1 : 0;
    }
    EXPECT_EQ(count_duplicate_captions(caps), brute);
  }
}

}  // namespace
}  // namespace ltt
