// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <sstream>

#include "ltt/experiments.hpp"

namespace ltt {
namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ltt_experiments_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

EncoderConfig tiny_vision() {
  EncoderConfig v;
  v.image_size = 16;
  v.patch_size = 8;
  v.embed_dim = 16;
  v.depth = 1;
  v.num_heads = 2;
  v.mlp_ratio = 2.0;
  v.output_dim = 8;
  return v;
}

struct World {
  GrammarConfig grammar;
  Corpus corpus = generate_corpus(320, grammar, 5);
  Vocab vocab = Vocab::from_grammar(grammar);
  ExperimentContext ctx;
  ExperimentSpec spec;

  World() {
    EncoderConfig t = tiny_vision();
    t.vocab_size = vocab.size();
    t.max_seq_len = 12;
    TextPretrainConfig tp;
    tp.steps = 20;
    tp.warmup_steps = 2;
    tp.max_seq_len = 12;
    TextPretrainResult text = pretrain_text(corpus, vocab, t, tp);
    ctx.corpus = &corpus;
    ctx.vocab = &vocab;
    ctx.text = text.weights;
    ctx.text_config = t;
    spec.vision = tiny_vision();
    spec.base.total_steps = 6;
    spec.base.warmup_steps = 1;
    spec.base.batch_size = 8;
    spec.base.checkpoint_every = 3;
    spec.base.preprocess.size = 16;
    spec.base.max_seq_len = 12;
    spec.seeds = {0, 1};
    spec.batch_sizes = {4, 8};
    spec.poolings = {Pooling::mean, Pooling::map};
  }
};

CellResult sample_result() {
  CellResult r;
  r.cell_id = "batch_sweep/batch_size=8/seed=1";
  r.experiment = "batch_sweep";
  r.axis = "batch_size";
  r.value = "8";
  r.seed = 1;
  r.batch_size = 8;
  r.steps = 40;
  r.samples_seen = 320;
  r.eval.zero_shot_top1 = 1.0 / 3.0;
  r.eval.recall["image_to_text"][1] = 0.1;
  r.eval.recall["image_to_text"][5] = 0.3;
  r.eval.recall["text_to_image"][1] = 0.2;
  r.eval.recall["text_to_image"][5] = 0.4;
  r.eval.mean_recall_at_1 = 0.5 * (0.1 + 0.2);
  r.eval.modality_gap = 0.7071067811865476;
  r.final_loss = 2.0000000000000004;
  r.final_logit_scale = 2.6592600369327779;
  r.text_checksum = "abc";
  r.freeze_ok = true;
  return r;
}

TEST(Presets, DeskConfigsAreConsistent) {
  EXPECT_NO_THROW(desk_vision_config().validate_vision());
  EXPECT_NO_THROW(desk_text_config(30).validate_text());
  EXPECT_NO_THROW(desk_train_config().validate());
  EXPECT_EQ(desk_train_config().preprocess.size, desk_vision_config().image_size);
  EXPECT_EQ(desk_text_config(30).output_dim, desk_vision_config().output_dim);
  EXPECT_EQ(desk_train_config().batch_size, 64);
  EXPECT_EQ(desk_vision_config().pooling, Pooling::map);
}

TEST(ExperimentSpec, Validation) {
  ExperimentSpec s;
  s.vision = desk_vision_config();
  s.base = desk_train_config();
  s.kind = ExperimentKind::batch_sweep;
  EXPECT_NO_THROW(s.validate());
  ExperimentSpec bad = s;
  bad.batch_sizes = {16, 8};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = s;
  bad.seeds = {3};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = s;
  bad.samples_seen = 1000;  // not a multiple of 64
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = s;
  bad.poolings = {Pooling::map, Pooling::map};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = s;
  bad.kind = ExperimentKind::train;
  bad.seeds = {3};
  EXPECT_NO_THROW(bad.validate());
}

TEST(ExperimentSpec, JsonRoundTrip) {
  ExperimentSpec s;
  s.kind = ExperimentKind::pooling_compare;
  s.vision = desk_vision_config();
  s.base = desk_train_config();
  s.poolings = {Pooling::cls_token, Pooling::map};
  s.seeds = {4, 9};
  s.samples_seen = 1280;
  s.out_dir = "/tmp/x";
  const ExperimentSpec back = nlohmann::json(s).get<ExperimentSpec>();
  EXPECT_EQ(nlohmann::json(back).dump(), nlohmann::json(s).dump());
  EXPECT_THROW(experiment_kind_from_string("nope"), ConfigError);
  EXPECT_THROW(backbone_from_string("imagenet"), ConfigError);
}

TEST(Cells, BatchSweepFixesSamplesSeen) {
  ExperimentSpec s;
  s.kind = ExperimentKind::batch_sweep;
  s.vision = desk_vision_config();
  s.base = desk_train_config();
  const auto cells = batch_sweep_cells(s);
  EXPECT_EQ(cells.size(), s.batch_sizes.size() * s.seeds.size());
  for (const auto& c : cells) {
    EXPECT_EQ(static_cast<long>(c.train.total_steps) * c.train.batch_size, 64L * 500);
    EXPECT_EQ(c.train.seed, c.seed);
    EXPECT_NO_THROW(c.train.validate());
    EXPECT_LE(c.train.warmup_steps, c.train.total_steps);
  }
  // The batch-64 cell is the base configuration and shares its cache key.
  CellSpec base;
  base.train = s.base;
  base.train.seed = 0;
  base.vision = s.vision;
  const auto it = std::find_if(cells.begin(), cells.end(), [](const CellSpec& c) { return c.value == "64" && c.seed == 0; });
  ASSERT_NE(it, cells.end());
  EXPECT_EQ(it->cache_key("t", ""), base.cache_key("t", ""));
  EXPECT_NE(it->cache_key("t", ""), base.cache_key("u", ""));
  EXPECT_EQ(it->cell_id(), "batch_sweep/batch_size=64/seed=0");
}

TEST(Cells, PoolingAndBackboneGrids) {
  ExperimentSpec s;
  s.vision = desk_vision_config();
  s.base = desk_train_config();
  const auto p = pooling_cells(s);
  EXPECT_EQ(p.size(), 9u);
  for (const auto& c : p) EXPECT_EQ(to_string(c.vision.pooling), c.value);
  const auto b = backbone_cells(s);
  EXPECT_EQ(b.size(), 6u);
  EXPECT_EQ(b.front().backbone, Backbone::random);
  EXPECT_EQ(b.back().backbone, Backbone::pretrained);
}

TEST(Results, RowRoundTripIsExact) {
  const CellResult r = sample_result();
  const std::string row = result_row(r);
  EXPECT_EQ(result_row(parse_result_row(row)), row);
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), static_cast<long>(result_columns().size()) - 1);
  EXPECT_THROW(parse_result_row("a,b,c"), ExperimentError);
}

TEST(Results, HeaderGuardRefusesForeignFiles) {
  auto dir = scratch("guard");
  std::filesystem::create_directories(dir);
  const auto csv = dir / "batch_sweep.csv";
  append_result(csv, sample_result());
  append_result(csv, sample_result());
  EXPECT_EQ(read_results(csv).size(), 2u);
  std::ofstream(dir / "other.csv") << "step,loss\n1,2\n";
  EXPECT_THROW(append_result(dir / "other.csv", sample_result()), ExperimentError);
  EXPECT_THROW(read_results(dir / "other.csv"), ExperimentError);
  std::filesystem::remove_all(dir);
}

TEST(Results, ReducerIsOrderIndependent) {
  std::vector<CellResult> rows;
  for (int v : {4, 8, 16}) {
    for (std::uint64_t seed : {0, 1, 2}) {
      CellResult r = sample_result();
      r.value = std::to_string(v);
      r.seed = seed;
      r.cell_id = "batch_sweep/batch_size=" + r.value + "/seed=" + std::to_string(seed);
      r.eval.zero_shot_top1 = 0.1 * v + 0.01 * static_cast<double>(seed);
      rows.push_back(r);
    }
  }
  rows.push_back(rows[3]);  // an identical duplicate from a re-run
  auto reference = reduce_by_cell(rows);
  EXPECT_EQ(reference.size(), 9u);
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto shuffled = rows;
    for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
    auto reduced = reduce_by_cell(shuffled);
    ASSERT_EQ(reduced.size(), reference.size());
    for (const auto& [id, r] : reference) EXPECT_EQ(result_row(reduced.at(id)), result_row(r));
  }
  auto conflict = rows;
  conflict.back().eval.zero_shot_top1 += 0.5;
  EXPECT_THROW(reduce_by_cell(conflict), ExperimentError);

  const auto summary = summarize(reference, {"4", "8", "16"});
  ASSERT_EQ(summary.size(), 3u);
  EXPECT_NEAR(summary[1].zero_shot_top1, 0.8 + 0.01, 1e-12);
  EXPECT_EQ(summary[2].seeds, 3u);
}

TEST(PretrainText, SeparatesClassesAndFlagsEverything) {
  World w;
  bool flags = true;
  for (const auto& [_, p] : w.ctx.text) flags &= p.pretrained;
  EXPECT_TRUE(flags);
  EncoderConfig t = w.ctx.text_config;
  TextPretrainConfig tp;
  tp.steps = 60;
  tp.warmup_steps = 6;
  tp.max_seq_len = 12;
  TextPretrainResult r = pretrain_text(w.corpus, w.vocab, t, tp);
  EXPECT_GT(r.within_class_cosine, r.cross_class_cosine);
  EXPECT_LT(r.losses.back(), r.losses.front());
  TextPretrainResult again = pretrain_text(w.corpus, w.vocab, t, tp);
  EXPECT_EQ(again.weights.checksum(), r.weights.checksum());

  auto dir = scratch("text_tower");
  save_tower_checkpoint(dir / "text.lockt", r.weights, r.config);
  auto [back, cfg] = load_tower_checkpoint(dir / "text.lockt");
  EXPECT_EQ(back.checksum(), r.weights.checksum());
  EXPECT_EQ(cfg, t);
  for (const auto& [_, p] : back) EXPECT_TRUE(p.pretrained);
  std::filesystem::remove_all(dir);
}

TEST(PretrainVision, DropsHeadAndFlagsRetainedParams) {
  World w;
  VisionPretrainConfig vp;
  vp.steps = 6;
  vp.warmup_steps = 1;
  vp.batch_size = 8;
  vp.preprocess.size = 16;
  VisionPretrainResult r = pretrain_vision(w.corpus, tiny_vision(), vp);
  for (const auto& [name, p] : r.weights) {
    EXPECT_TRUE(p.pretrained) << name;
    EXPECT_NE(name.rfind("head.", 0), 0u) << name;
    EXPECT_FALSE(p.value.requires_grad()) << name;
  }
  Rng rng(0);
  EXPECT_EQ(r.weights.names(), init_vision_tower(tiny_vision(), rng).names());
  EXPECT_GE(r.train_accuracy, 0.0);
  EXPECT_LE(r.train_accuracy, 1.0);
  EXPECT_EQ(pretrain_vision(w.corpus, tiny_vision(), vp).weights.checksum(), r.weights.checksum());
}

TEST(Sweep, RerunReproducesCsvAndSkipsFinishedCells) {
  World w;
  w.spec.kind = ExperimentKind::pooling_compare;
  const auto cells = pooling_cells(w.spec);
  auto a = scratch("sweep_a");
  auto b = scratch("sweep_b");
  const auto ra = run_sweep(cells, w.ctx, a);
  EXPECT_EQ(ra.size(), 4u);
  const std::string csv = slurp(a / "pooling_compare.csv");
  run_sweep(cells, w.ctx, a);
  EXPECT_EQ(slurp(a / "pooling_compare.csv"), csv) << "finished cells must not be re-appended";
  run_sweep(cells, w.ctx, b);
  EXPECT_EQ(slurp(b / "pooling_compare.csv"), csv);

  std::set<std::string> sums;
  for (const auto& [_, r] : ra) {
    sums.insert(r.text_checksum);
    EXPECT_TRUE(r.freeze_ok);
    EXPECT_TRUE(r.eval.invariants_hold());
  }
  EXPECT_EQ(sums.size(), 1u);
  EXPECT_EQ(*sums.begin(), w.ctx.text.checksum());

  const SweepReport rep = build_report(a);
  EXPECT_TRUE(rep.ok());
  EXPECT_EQ(rep.trends.size(), 1u);
  EXPECT_NE(rep.table.find("pooling_compare"), std::string::npos);
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}

TEST(Sweep, InterruptedCellResumesToTheSameResult) {
  World w;
  w.spec.kind = ExperimentKind::batch_sweep;
  const CellSpec cell = batch_sweep_cells(w.spec).front();
  auto whole = scratch("cell_whole");
  auto parts = scratch("cell_parts");
  const CellResult ref = run_cell(cell, w.ctx, whole);

  // Interrupt a run of the same cell halfway, then let run_cell finish it.
  const auto dir = parts / "cells" / cell.cache_key(w.ctx.text.checksum(), "");
  Model m;
  m.vision_config = cell.vision;
  m.text_config = w.ctx.text_config;
  m.text = w.ctx.text.clone();
  Rng init(mix_seed({cell.seed, 0x1417ULL}));
  m.vision = init_vision_tower(cell.vision, init);
  train(w.corpus, w.vocab, m, cell.train, {dir, std::nullopt, cell.train.total_steps / 2});
  const CellResult resumed = run_cell(cell, w.ctx, parts);
  EXPECT_EQ(result_row(resumed), result_row(ref));
  EXPECT_EQ(slurp(dir / "metrics.csv"), slurp(whole / "cells" / cell.cache_key(w.ctx.text.checksum(), "") / "metrics.csv"));
  std::filesystem::remove_all(whole);
  std::filesystem::remove_all(parts);
}

TEST(Sweep, BackboneNeedsPretrainedWeights) {
  World w;
  w.spec.kind = ExperimentKind::backbone_compare;
  const auto cells = backbone_cells(w.spec);
  auto dir = scratch("backbone");
  EXPECT_THROW(run_cell(cells.back(), w.ctx, dir), ExperimentError);
  std::filesystem::remove_all(dir);
}

TEST(Report, EmptyDirectoryFails) {
  auto dir = scratch("empty_report");
  std::filesystem::create_directories(dir);
  EXPECT_FALSE(build_report(dir).ok());
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace ltt
