// SPDX-License-Identifier: Apache-2.0
//
// ltt: command-line front end for corpus generation, tower pretraining,
// locked text tuning, evaluation and the ablation sweeps.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "ltt/experiments.hpp"

namespace {

using namespace ltt;

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return nlohmann::json::parse(in);
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

EvalOptions eval_options(const GrammarConfig& g, const std::string& templates, const std::string& split) {
  EvalOptions o;
  o.split = split_from_string(split);
  if (templates == "all") {
    o.templates = g.eval_templates;
  } else if (templates != "held_out") {
    throw std::runtime_error("--templates must be held_out or all");
  }
  return o;
}

struct TrainFlags {
  std::string config;
  std::string corpus;
  std::string text_tower;
  std::string vision_tower;
  std::string out_dir;
  std::uint64_t seed = 0;
  int steps = 0;
  int warmup = -1;
  int batch = 0;
  double lr = 0;
  std::string pooling;
  std::vector<std::uint64_t> seeds;
  std::string templates = "held_out";
};

void add_train_flags(CLI::App* cmd, TrainFlags& f, bool sweep) {
  cmd->add_option("--config", f.config, "ExperimentSpec JSON (base, vision, sweep values, seeds)");
  cmd->add_option("--corpus", f.corpus, "Corpus directory from gen-corpus")->required();
  cmd->add_option("--text-tower", f.text_tower, "Frozen text tower archive from pretrain-text")->required();
  cmd->add_option("--vision-tower", f.vision_tower, "Pretrained vision archive from pretrain-vision");
  cmd->add_option("--out-dir", f.out_dir, "Output directory")->required();
  cmd->add_option("--seed", f.seed, "Seed (sweeps: first of three consecutive seeds unless --seeds)")->required();
  cmd->add_option("--steps", f.steps, "Override total_steps");
  cmd->add_option("--warmup", f.warmup, "Override warmup_steps");
  cmd->add_option("--batch-size", f.batch, "Override batch_size");
  cmd->add_option("--lr", f.lr, "Override peak_lr");
  cmd->add_option("--pooling", f.pooling, "Override vision pooling (cls_token, mean, map)");
  cmd->add_option("--templates", f.templates, "Zero-shot prompts: held_out or all");
  if (sweep) cmd->add_option("--seeds", f.seeds, "Explicit seed list");
}

ExperimentSpec spec_from_flags(const TrainFlags& f, ExperimentKind kind) {
  ExperimentSpec spec;
  spec.base = desk_train_config();
  spec.vision = desk_vision_config();
  if (!f.config.empty()) spec = read_json_file(f.config).get<ExperimentSpec>();
  spec.kind = kind;
  if (f.steps > 0) spec.base.total_steps = f.steps;
  if (f.warmup >= 0) spec.base.warmup_steps = f.warmup;
  if (f.batch > 0) spec.base.batch_size = f.batch;
  if (f.lr > 0) spec.base.peak_lr = f.lr;
  if (!f.pooling.empty()) spec.vision.pooling = pooling_from_string(f.pooling);
  spec.base.seed = f.seed;
  spec.seeds = f.seeds.empty() ? std::vector<std::uint64_t>{f.seed, f.seed + 1, f.seed + 2} : f.seeds;
  spec.out_dir = f.out_dir;
  if (spec.base.checkpoint_every > spec.base.total_steps) spec.base.checkpoint_every = spec.base.total_steps;
  spec.validate();
  return spec;
}

struct Loaded {
  Corpus corpus;
  Vocab vocab;
  ExperimentContext ctx;
};

std::unique_ptr<Loaded> load_inputs(const TrainFlags& f) {
  auto l = std::make_unique<Loaded>();
  l->corpus = load_corpus(f.corpus);
  l->vocab = Vocab::from_grammar(l->corpus.grammar);
  auto [text, tcfg] = load_tower_checkpoint(f.text_tower);
  l->ctx.text = std::move(text);
  l->ctx.text_config = tcfg;
  if (!f.vision_tower.empty()) {
    auto [vision, vcfg] = load_tower_checkpoint(f.vision_tower);
    l->ctx.pretrained_vision = std::move(vision);
    l->ctx.pretrained_vision_config = vcfg;
  }
  l->ctx.corpus = &l->corpus;
  l->ctx.vocab = &l->vocab;
  l->ctx.eval = eval_options(l->corpus.grammar, f.templates, "test");
  return l;
}

int print_report(const SweepReport& rep, const std::filesystem::path& csv_out) {
  std::cout << rep.table;
  for (const auto& c : rep.invariants) {
    std::cout << (c.passed ? "[ok]   " : "[FAIL] ") << c.name << (c.detail.empty() ? "" : " (" + c.detail + ")")
              << '\n';
  }
  for (const auto& c : rep.trends) {
    std::cout << "[trend " << (c.passed ? "holds" : "does not hold") << "] " << c.name << " (" << c.detail << ")\n";
  }
  if (!csv_out.empty()) {
    std::ofstream out(csv_out);
    out << rep.csv;
  }
  return rep.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Locked text tuning laboratory"};
  app.require_subcommand(1);

  // gen-corpus
  std::size_t corpus_size = 4000;
  std::uint64_t corpus_seed = 0;
  std::string corpus_out, grammar_path;
  auto* gen = app.add_subcommand("gen-corpus", "Render the synthetic shapes corpus");
  gen->add_option("--size", corpus_size, "Number of samples");
  gen->add_option("--seed", corpus_seed, "Corpus seed")->required();
  gen->add_option("--out-dir", corpus_out, "Output directory")->required();
  gen->add_option("--grammar", grammar_path, "GrammarConfig JSON");

  // pretrain-text / pretrain-vision
  std::string pt_corpus, pt_out, pt_config;
  std::uint64_t pt_seed = 0;
  auto* ptext = app.add_subcommand("pretrain-text", "Manufacture the frozen text tower");
  ptext->add_option("--corpus", pt_corpus, "Corpus directory")->required();
  ptext->add_option("--out", pt_out, "Output archive path (.lockt); config written beside it")->required();
  ptext->add_option("--config", pt_config, "JSON with optional 'text' (EncoderConfig) and 'pretrain' keys");
  ptext->add_option("--seed", pt_seed, "Seed");
  auto* pvis = app.add_subcommand("pretrain-vision", "Supervised ViT pretraining; the head is discarded");
  pvis->add_option("--corpus", pt_corpus, "Corpus directory")->required();
  pvis->add_option("--out", pt_out, "Output archive path (.lockt)")->required();
  pvis->add_option("--config", pt_config, "JSON with optional 'vision' (EncoderConfig) and 'pretrain' keys");
  pvis->add_option("--seed", pt_seed, "Seed");

  // train
  TrainFlags tf;
  bool resume = false;
  int stop_at = 0;
  auto* trn = app.add_subcommand("train", "Locked text tuning of the vision tower");
  add_train_flags(trn, tf, false);
  trn->add_flag("--resume", resume, "Continue from <out-dir>/checkpoints/last");
  trn->add_option("--stop-at", stop_at, "Stop after this many steps");

  // eval
  std::string ev_corpus, ev_ckpt, ev_json, ev_csv, ev_templates = "held_out", ev_split = "test";
  auto* evl = app.add_subcommand("eval", "Zero-shot and retrieval evaluation of a checkpoint");
  evl->add_option("--corpus", ev_corpus, "Corpus directory")->required();
  evl->add_option("--checkpoint", ev_ckpt, "Trainer checkpoint directory")->required();
  evl->add_option("--templates", ev_templates, "held_out or all");
  evl->add_option("--split", ev_split, "train, val or test");
  evl->add_option("--out-json", ev_json, "Report JSON path");
  evl->add_option("--out-csv", ev_csv, "CSV file to append a row to");

  // sweeps
  TrainFlags sf;
  auto* sbatch = app.add_subcommand("sweep-batch", "Batch size sweep at fixed samples seen");
  add_train_flags(sbatch, sf, true);
  auto* spool = app.add_subcommand("sweep-pooling", "CLS vs mean vs MAP pooling");
  add_train_flags(spool, sf, true);
  auto* sback = app.add_subcommand("sweep-backbone", "Random vs pretrained vision init");
  add_train_flags(sback, sf, true);

  // report
  std::string rep_dir, rep_csv;
  auto* rpt = app.add_subcommand("report", "Summarize sweep results");
  rpt->add_option("--out-dir", rep_dir, "Sweep output directory")->required();
  rpt->add_option("--csv", rep_csv, "Write the summary CSV here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      GrammarConfig g;
      if (!grammar_path.empty()) g = read_json_file(grammar_path).get<GrammarConfig>();
      Corpus c = generate_corpus(corpus_size, g, corpus_seed);
      save_corpus(c, corpus_out);
      const Corpus back = load_corpus(corpus_out);
      const bool ok = corpus_digest(back) == corpus_digest(c);
      std::cout << "corpus " << corpus_out << ": " << c.samples.size() << " samples, train "
                << c.indices(Split::train).size() << ", val " << c.indices(Split::val).size() << ", test "
                << c.indices(Split::test).size() << "\nsha256 " << corpus_digest(c) << '\n';
      if (!ok) std::cerr << "reloaded corpus digest differs\n";
      return ok ? 0 : 1;
    }
    if (*ptext) {
      Corpus c = load_corpus(pt_corpus);
      Vocab v = Vocab::from_grammar(c.grammar);
      EncoderConfig tcfg = desk_text_config(static_cast<int>(v.size()));
      TextPretrainConfig opt;
      if (!pt_config.empty()) {
        const auto j = read_json_file(pt_config);
        if (j.contains("text")) tcfg = j.at("text").get<EncoderConfig>();
        if (j.contains("pretrain")) opt = j.at("pretrain").get<TextPretrainConfig>();
      }
      opt.seed = pt_seed;
      TextPretrainResult r = pretrain_text(c, v, tcfg, opt);
      save_tower_checkpoint(pt_out, r.weights, r.config);
      const auto back = load_tower_checkpoint(pt_out);
      bool flags = true;
      for (const auto& [_, p] : back.first) flags &= p.pretrained;
      const bool ok = back.first.checksum() == r.weights.checksum() && flags &&
                      r.within_class_cosine > r.cross_class_cosine;
      std::filesystem::path report = pt_out;
      report.replace_extension(".report.json");
      write_json_file(report, {{"final_loss", r.losses.back()},
                               {"within_class_cosine", r.within_class_cosine},
                               {"cross_class_cosine", r.cross_class_cosine},
                               {"checksum", r.weights.checksum()},
                               {"pretrain", opt}});
      std::cout << "text tower " << pt_out << ": loss " << r.losses.front() << " -> " << r.losses.back()
                << ", held-out cosine within " << r.within_class_cosine << " / cross " << r.cross_class_cosine
                << "\nchecksum " << r.weights.checksum() << '\n';
      return ok ? 0 : 1;
    }
    if (*pvis) {
      Corpus c = load_corpus(pt_corpus);
      EncoderConfig vcfg = desk_vision_config();
      VisionPretrainConfig opt;
      opt.preprocess.size = vcfg.image_size;
      if (!pt_config.empty()) {
        const auto j = read_json_file(pt_config);
        if (j.contains("vision")) vcfg = j.at("vision").get<EncoderConfig>();
        if (j.contains("pretrain")) opt = j.at("pretrain").get<VisionPretrainConfig>();
      }
      opt.seed = pt_seed;
      VisionPretrainResult r = pretrain_vision(c, vcfg, opt);
      save_tower_checkpoint(pt_out, r.weights, r.config);
      const auto back = load_tower_checkpoint(pt_out);
      bool flags = true, head = false;
      for (const auto& [name, p] : back.first) {
        flags &= p.pretrained;
        head |= name.rfind("head.", 0) == 0;
      }
      std::cout << "vision tower " << pt_out << ": loss " << r.losses.front() << " -> " << r.losses.back()
                << ", train accuracy " << r.train_accuracy << "\nchecksum " << r.weights.checksum() << '\n';
      return back.first.checksum() == r.weights.checksum() && flags && !head ? 0 : 1;
    }
    if (*trn) {
      ExperimentSpec spec = spec_from_flags(tf, ExperimentKind::train);
      spec.seeds = {tf.seed};
      auto in = load_inputs(tf);
      const std::filesystem::path out = tf.out_dir;
      TrainOptions opts;
      opts.out_dir = out;
      opts.stop_at_step = stop_at;
      Model model;
      if (resume) {
        opts.resume_from = out / "checkpoints" / "last";
      } else {
        model.vision_config = spec.vision;
        model.text_config = in->ctx.text_config;
        model.text = in->ctx.text.clone();
        if (in->ctx.pretrained_vision) {
          model.vision = in->ctx.pretrained_vision->clone();
        } else {
          Rng init(mix_seed({tf.seed, 0x1417ULL}));
          model.vision = init_vision_tower(spec.vision, init);
        }
      }
      const std::string text_before = in->ctx.text.checksum();
      TrainResult r = train(in->corpus, in->vocab, model, spec.base, opts);
      bool text_state = false;
      for (const auto& [name, _] : r.state.optimizer.moments) text_state |= name.rfind("text.", 0) == 0;
      const bool freeze_ok = !spec.base.freeze_text || (model.text.checksum() == text_before && !text_state);
      std::cout << r.report << "\ntext checksum " << model.text.checksum() << (freeze_ok ? " (unchanged)" : " (CHANGED)")
                << '\n';
      if (r.state.step == spec.base.total_steps && !r.diverged) {
        EvalReport rep = run_eval(model, spec.base, in->corpus, in->vocab, in->ctx.eval);
        write_eval_report(rep, out / "eval.json", out / "eval.csv");
        std::cout << "zero-shot top1 " << rep.zero_shot_top1 << ", mean R@1 " << rep.mean_recall_at_1
                  << ", modality gap " << rep.modality_gap << '\n';
        return freeze_ok && rep.invariants_hold() ? 0 : 1;
      }
      return freeze_ok && !r.diverged ? 0 : 1;
    }
    if (*evl) {
      Corpus c = load_corpus(ev_corpus);
      Vocab v = Vocab::from_grammar(c.grammar);
      EvalReport rep = run_eval(std::filesystem::path(ev_ckpt), c, v, eval_options(c.grammar, ev_templates, ev_split));
      write_eval_report(rep, ev_json, ev_csv);
      std::cout << nlohmann::json(rep).dump(2) << '\n';
      return rep.invariants_hold() ? 0 : 1;
    }
    if (*sbatch || *spool || *sback) {
      const ExperimentKind kind = *sbatch  ? ExperimentKind::batch_sweep
                                  : *spool ? ExperimentKind::pooling_compare
                                           : ExperimentKind::backbone_compare;
      ExperimentSpec spec = spec_from_flags(sf, kind);
      auto in = load_inputs(sf);
      const auto cells = kind == ExperimentKind::batch_sweep       ? batch_sweep_cells(spec)
                         : kind == ExperimentKind::pooling_compare ? pooling_cells(spec)
                                                                   : backbone_cells(spec);
      write_json_file(std::filesystem::path(sf.out_dir) / (to_string(kind) + ".spec.json"), spec);
      run_sweep(cells, in->ctx, sf.out_dir);
      return print_report(build_report(sf.out_dir), {});
    }
    if (*rpt) return print_report(build_report(rep_dir), rep_csv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
