// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "ltt/eval.hpp"
#include "test_util.hpp"

namespace ltt {
namespace {

// Random rows. With `ties` every entry is +-1/sqrt(d) for d in {4, 16}, so
// rows are exactly unit norm, every dot product is exact, and some rows are
// copies of earlier ones: exact score ties are common.
Tensor instance(std::size_t n, std::size_t d, Rng& rng, bool ties) {
  if (ties) d = d % 2 ? 4 : 16;
  const double mag = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> v(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    if (ties && i > 0 && rng.below(3) == 0) {
      const std::size_t src = rng.below(i);
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(src * d), d, v.begin() + static_cast<std::ptrdiff_t>(i * d));
      continue;
    }
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] = ties ? (rng.below(2) ? mag : -mag) : rng.normal();
  }
  return Tensor::from({n, d}, std::move(v));
}

double oracle_cos(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const std::size_t d = a.dim(1);
  double na = 0, nb = 0;
  for (std::size_t k = 0; k < d; ++k) {
    na += a.data()[i * d + k] * a.data()[i * d + k];
    nb += b.data()[j * d + k] * b.data()[j * d + k];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  double dot = 0;
  for (std::size_t k = 0; k < d; ++k) dot += (a.data()[i * d + k] / na) * (b.data()[j * d + k] / nb);
  return dot;
}

// Sorts candidates by (score desc, index asc) and reports positions.
std::vector<std::size_t> oracle_order(const Tensor& q, std::size_t i, const Tensor& g) {
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t j = 0; j < g.dim(0); ++j) scored.emplace_back(oracle_cos(q, i, g, j), j);
  std::sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
    return x.first != y.first ? x.first > y.first : x.second < y.second;
  });
  std::vector<std::size_t> order;
  for (const auto& [_, j] : scored) order.push_back(j);
  return order;
}

double oracle_recall(const Tensor& img, const Tensor& txt, std::size_t k, Direction dir) {
  const Tensor& q = dir == Direction::image_to_text ? img : txt;
  const Tensor& g = dir == Direction::image_to_text ? txt : img;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < q.dim(0); ++i) {
    const auto order = oracle_order(q, i, g);
    hits += std::find(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), i) !=
            order.begin() + static_cast<std::ptrdiff_t>(k);
  }
  return static_cast<double>(hits) / static_cast<double>(q.dim(0));
}

double oracle_top1(const Tensor& img, const Tensor& cls, const std::vector<int>& labels) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < img.dim(0); ++i) {
    correct += static_cast<int>(oracle_order(img, i, cls).front()) == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(img.dim(0));
}

Tensor scaled(const Tensor& x, double c) {
  std::vector<double> v(x.data().begin(), x.data().end());
  for (auto& e : v) e *= c;
  return Tensor::from(x.shape(), std::move(v));
}

TEST(ZeroShot, OwnEmbeddingsGivePerfectAccuracy) {
  Rng rng(1);
  Tensor img = normalize_rows(instance(6, 5, rng, false));
  EXPECT_EQ(zero_shot_classify(img, img, {0, 1, 2, 3, 4, 5}), 1.0);
}

TEST(ZeroShot, SingleClass) {
  Rng rng(2);
  Tensor img = instance(7, 3, rng, false);
  Tensor cls = instance(1, 3, rng, false);
  EXPECT_EQ(zero_shot_classify(img, cls, std::vector<int>(7, 0)), 1.0);
}

TEST(ZeroShot, AdversarialOrthonormal) {
  // Images e0..e3, classes e4..e7 are unrelated: every score is 0, so the
  // lowest class index wins regardless of label.
  std::vector<double> v(8 * 8, 0.0);
  for (std::size_t i = 0; i < 8; ++i) v[i * 8 + i] = 1.0;
  Tensor img = Tensor::from({4, 8}, std::vector<double>(v.begin(), v.begin() + 32));
  Tensor cls = Tensor::from({4, 8}, std::vector<double>(v.begin() + 32, v.end()));
  const std::vector<int> labels{3, 2, 1, 0};
  EXPECT_EQ(zero_shot_predict(img, cls), (std::vector<int>{0, 0, 0, 0}));
  EXPECT_EQ(zero_shot_classify(img, cls, labels), oracle_top1(img, cls, labels));
  EXPECT_EQ(zero_shot_classify(img, cls, labels), 0.25);
}

TEST(ZeroShot, ErrorsOnBadLabels) {
  Rng rng(3);
  Tensor img = instance(3, 2, rng, false);
  Tensor cls = instance(2, 2, rng, false);
  EXPECT_THROW(zero_shot_classify(img, cls, {0, 2, 1}), EvalError);
  EXPECT_THROW(zero_shot_classify(img, cls, {0, -1, 1}), EvalError);
  EXPECT_THROW(zero_shot_classify(img, cls, {0, 1}), EvalError);
  EXPECT_THROW(zero_shot_classify(img, Tensor::from({1, 3}, {1, 0, 0}), {0, 0, 0}), EvalError);
}

TEST(Recall, IdentityPairingOrthonormal) {
  std::vector<double> v(5 * 5, 0.0);
  for (std::size_t i = 0; i < 5; ++i) v[i * 5 + i] = 1.0;
  Tensor e = Tensor::from({5, 5}, v);
  EXPECT_EQ(recall_at_k(e, e, 1, Direction::image_to_text), 1.0);
  EXPECT_EQ(recall_at_k(e, e, 1, Direction::text_to_image), 1.0);
}

TEST(Recall, FullDepthAlwaysOne) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(10);
    Tensor a = instance(n, 3, rng, trial % 2);
    Tensor b = instance(n, 3, rng, trial % 2);
    EXPECT_EQ(recall_at_k(a, b, n, Direction::image_to_text), 1.0);
    EXPECT_EQ(recall_at_k(a, b, n, Direction::text_to_image), 1.0);
  }
}

TEST(Recall, TiesGoToLowerIndex) {
  // Every text is identical, so query i ranks its own partner at i + 1.
  Tensor img = Tensor::from({3, 2}, {1, 0, 0, 1, 1, 1});
  Tensor txt = Tensor::from({3, 2}, {1, 1, 1, 1, 1, 1});
  EXPECT_EQ(partner_ranks(img, txt, Direction::image_to_text), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_NEAR(recall_at_k(img, txt, 1, Direction::image_to_text), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(recall_at_k(img, txt, 2, Direction::image_to_text), 2.0 / 3.0, 1e-15);
}

TEST(Recall, Errors) {
  Rng rng(5);
  Tensor a = instance(4, 3, rng, false);
  EXPECT_THROW(recall_at_k(a, a, 5, Direction::image_to_text), EvalError);
  EXPECT_THROW(recall_at_k(a, a, 0, Direction::image_to_text), EvalError);
  EXPECT_THROW(recall_at_k(a, instance(3, 3, rng, false), 1, Direction::text_to_image), EvalError);
  EXPECT_THROW(recall_at_k(Tensor::from({2, 2}, {0, 0, 1, 0}), a.detach(), 1, Direction::image_to_text), EvalError);
  EXPECT_THROW(normalize_rows(Tensor::from({2, 2}, {1, 0, 0, 0})), EvalError);
}

// Every (N, C) with N, C <= 10, several random instances each, half of
// them tie-heavy, checked against sorting oracles.
TEST(EvalOracles, ExhaustiveSmallInstances) {
  Rng rng(6);
  std::size_t instances = 0;
  for (std::size_t n = 1; n <= 10; ++n) {
    for (std::size_t c = 1; c <= 10; ++c) {
      for (int rep = 0; rep < 4; ++rep) {
        const bool ties = rep % 2 == 1;
        const std::size_t d = 2 + rng.below(4);
        Tensor img = instance(n, d, rng, ties);
        Tensor cls = instance(c, d, rng, ties);
        Tensor txt = instance(n, d, rng, ties);
        std::vector<int> labels(n);
        for (auto& l : labels) l = static_cast<int>(rng.below(c));
        ASSERT_EQ(zero_shot_classify(img, cls, labels), oracle_top1(img, cls, labels)) << n << "x" << c;
        if (c == 1) {
          for (std::size_t k = 1; k <= n; ++k) {
            for (Direction dir : {Direction::image_to_text, Direction::text_to_image}) {
              ASSERT_EQ(recall_at_k(img, txt, k, dir), oracle_recall(img, txt, k, dir)) << n << " k=" << k;
            }
          }
        }
        ++instances;
      }
    }
  }
  EXPECT_EQ(instances, 400u);
}

TEST(EvalOracles, Random8x8MatchesSortOracle) {
  Rng rng(7);
  Tensor img = instance(8, 8, rng, false);
  Tensor txt = instance(8, 8, rng, false);
  for (std::size_t k = 1; k <= 8; ++k) {
    EXPECT_EQ(recall_at_k(img, txt, k, Direction::image_to_text), oracle_recall(img, txt, k, Direction::image_to_text));
    EXPECT_EQ(recall_at_k(img, txt, k, Direction::text_to_image), oracle_recall(img, txt, k, Direction::text_to_image));
  }
}

TEST(EvalProperties, RecallMonotoneInK) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(30);
    Tensor img = instance(n, 4, rng, trial % 2);
    Tensor txt = instance(n, 4, rng, trial % 2);
    for (Direction dir : {Direction::image_to_text, Direction::text_to_image}) {
      double prev = 0.0;
      for (std::size_t k = 1; k <= n; ++k) {
        const double r = recall_at_k(img, txt, k, dir);
        ASSERT_GE(r, prev);
        prev = r;
      }
    }
  }
}

TEST(EvalProperties, PositiveRescalingLeavesRanksUnchanged) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(20), c = 1 + rng.below(10), d = 2 + rng.below(6);
    const bool ties = trial % 2;
    Tensor img = instance(n, d, rng, ties);
    Tensor txt = instance(n, d, rng, ties);
    Tensor cls = instance(c, d, rng, ties);
    // Exact ties survive rescaling only when it is exact, so tie-heavy
    // instances use powers of two; generic instances use arbitrary factors.
    auto factor = [&] {
      return ties ? std::ldexp(1.0, static_cast<int>(rng.below(41)) - 20) : std::exp(rng.uniform(-7.0, 7.0));
    };
    const double s1 = factor(), s2 = factor(), s3 = factor();
    ASSERT_EQ(zero_shot_predict(img, cls), zero_shot_predict(scaled(img, s1), scaled(cls, s3))) << trial;
    for (Direction dir : {Direction::image_to_text, Direction::text_to_image}) {
      ASSERT_EQ(partner_ranks(img, txt, dir), partner_ranks(scaled(img, s1), scaled(txt, s2), dir)) << trial;
    }
  }
}

TEST(ModalityGap, Examples) {
  Rng rng(10);
  Tensor a = normalize_rows(instance(5, 4, rng, false));
  EXPECT_EQ(modality_gap(a, a), 0.0);
  Tensor e1 = Tensor::from({2, 3}, {1, 0, 0, 1, 0, 0});
  Tensor neg = Tensor::from({1, 3}, {-1, 0, 0});
  EXPECT_DOUBLE_EQ(modality_gap(e1, neg), 2.0);
  Tensor b = normalize_rows(instance(7, 4, rng, false));
  double ss = 0;
  for (std::size_t j = 0; j < 4; ++j) {
    double ca = 0, cb = 0;
    for (std::size_t i = 0; i < 5; ++i) ca += a.data()[i * 4 + j] / 5;
    for (std::size_t i = 0; i < 7; ++i) cb += b.data()[i * 4 + j] / 7;
    ss += (ca - cb) * (ca - cb);
  }
  EXPECT_NEAR(modality_gap(a, b), std::sqrt(ss), 1e-14);
  EXPECT_THROW(modality_gap(Tensor::zeros({0, 4}), b), EvalError);
  EXPECT_THROW(modality_gap(scaled(a, 2.0), b), NotNormalizedError);
}

TEST(PromptEnsemble, RenormalizedMean) {
  Rng rng(11);
  Tensor p = normalize_rows(instance(6, 5, rng, false));  // 3 classes x 2 templates
  Tensor cls = ensemble_class_embeddings(p, 3, 2);
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> mid(5);
    double ss = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      mid[j] = p.data()[(2 * c) * 5 + j] + p.data()[(2 * c + 1) * 5 + j];
      ss += mid[j] * mid[j];
    }
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(cls.data()[c * 5 + j], mid[j] / std::sqrt(ss), 1e-14);
  }
  Tensor single = ensemble_class_embeddings(p, 6, 1);
  for (std::size_t i = 0; i < 30; ++i) EXPECT_NEAR(single.data()[i], p.data()[i], 1e-15);
  EXPECT_THROW(ensemble_class_embeddings(p, 3, 0), EvalError);
  EXPECT_THROW(ensemble_class_embeddings(p, 4, 2), EvalError);
}

struct EvalFixture {
  GrammarConfig grammar;
  Corpus corpus = generate_corpus(480, grammar, 23);
  Vocab vocab = Vocab::from_grammar(grammar);
  Model model;
  TrainConfig cfg;

  EvalFixture() {
    EncoderConfig v;
    v.image_size = 16;
    v.patch_size = 8;
    v.embed_dim = 16;
    v.depth = 1;
    v.num_heads = 2;
    v.mlp_ratio = 2.0;
    v.output_dim = 8;
    EncoderConfig t = v;
    t.vocab_size = vocab.size();
    t.max_seq_len = 12;
    Rng rng(3);
    model.vision_config = v;
    model.vision = init_vision_tower(v, rng);
    model.text_config = t;
    model.text = init_text_tower(t, rng);
    model.logit_scale = LogitScale::from_temperature();
    cfg.preprocess.size = 16;
    cfg.max_seq_len = 12;
  }
};

TEST(ClassTextEmbeddings, TemplateIdentities) {
  EvalFixture f;
  const std::vector<std::string> names{"red circle", "blue cross"};
  Tensor one = class_text_embeddings(names, {"a photo of a {}"}, f.model.text, f.model.text_config, f.vocab, 12);
  Tensor direct = embed_captions({"a photo of a red circle", "a photo of a blue cross"}, f.model.text,
                                 f.model.text_config, f.vocab, 12);
  for (std::size_t i = 0; i < one.numel(); ++i) EXPECT_NEAR(one.data()[i], direct.data()[i], 1e-15);
  Tensor twice = class_text_embeddings(names, {"a photo of a {}", "a photo of a {}"}, f.model.text,
                                       f.model.text_config, f.vocab, 12);
  for (std::size_t i = 0; i < one.numel(); ++i) EXPECT_NEAR(twice.data()[i], one.data()[i], 1e-15);
  EXPECT_THROW(class_text_embeddings(names, {}, f.model.text, f.model.text_config, f.vocab, 12), EvalError);
}

TEST(RunEval, UntrainedVisionIsNearChance) {
  EvalFixture f;
  EvalReport r = run_eval(f.model, f.cfg, f.corpus, f.vocab);
  const double chance = 1.0 / 16.0;
  const double n = static_cast<double>(r.num_images);
  // 99.9% two-sided binomial band around chance.
  EXPECT_LE(std::abs(r.zero_shot_top1 - chance), 3.3 * std::sqrt(chance * (1 - chance) / n) + 1.0 / n);
  EXPECT_TRUE(r.invariants_hold());
  EXPECT_EQ(r.templates, f.grammar.held_out_templates());
  EXPECT_EQ(r.split, "test");
  EXPECT_EQ(r.per_class_top1.size(), 16u);
  EXPECT_EQ(r.mean_recall_at_1, 0.5 * (r.recall["image_to_text"][1] + r.recall["text_to_image"][1]));
  EXPECT_GE(r.recall["image_to_text"][5], r.recall["image_to_text"][1]);

  const auto j = nlohmann::json(r);
  for (const char* key : {"zero_shot_top1", "recall", "modality_gap", "meta"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_TRUE(j["recall"]["image_to_text"].contains("5"));
  EXPECT_TRUE(j["recall"].contains("mean_r1"));
}

TEST(RunEval, CheckpointRoundTripAndMismatch) {
  EvalFixture f;
  auto dir = std::filesystem::temp_directory_path() / "ltt_eval_test_ckpt";
  std::filesystem::remove_all(dir);
  TrainState st;
  st.config_hash = config_hash(f.cfg);
  save_checkpoint(dir, f.model, st, f.cfg);
  EvalReport direct = run_eval(f.model, f.cfg, f.corpus, f.vocab);
  EvalReport loaded = run_eval(dir, f.corpus, f.vocab);
  EXPECT_EQ(direct.csv_row(), loaded.csv_row());

  GrammarConfig other = f.grammar;
  other.colors.push_back("purple");
  EXPECT_THROW(run_eval(dir, f.corpus, Vocab::from_grammar(other)), EvalError);
  TrainConfig wrong = f.cfg;
  wrong.preprocess.size = 32;
  EXPECT_THROW(run_eval(f.model, wrong, f.corpus, f.vocab), EvalError);

  const auto csv = dir / "results.csv";
  write_eval_report(direct, dir / "report.json", csv);
  write_eval_report(loaded, {}, csv);
  std::ifstream in(csv);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 3);
  EXPECT_TRUE(std::filesystem::exists(dir / "report.json"));
  std::filesystem::remove_all(dir);
}

TEST(RunEval, RescaledModelKeepsRankFields) {
  // Doubling the final projection rescales every image embedding before
  // normalization; rank-based fields must not move.
  EvalFixture f;
  EvalReport a = run_eval(f.model, f.cfg, f.corpus, f.vocab);
  Model m2 = f.model;
  m2.vision = f.model.vision.clone();
  auto w = m2.vision.param("proj.weight").value.mutable_data();
  for (auto& x : w) x *= 2.0;
  EvalReport b = run_eval(m2, f.cfg, f.corpus, f.vocab);
  EXPECT_EQ(a.zero_shot_top1, b.zero_shot_top1);
  EXPECT_EQ(a.recall, b.recall);
}

}  // namespace
}  // namespace ltt
