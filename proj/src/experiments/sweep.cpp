// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "ltt/experiments.hpp"
#include "ltt/hash.hpp"

namespace ltt {

namespace {

std::string fmt(double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string first_line(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

// Last data row of a trainer metrics.csv as (loss, logit_scale).
std::pair<double, double> last_metrics(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::string line, last;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (!line.empty()) last = line;
  }
  if (last.empty()) throw ExperimentError("no metrics rows in " + p.string());
  const auto f = split_csv(last);
  return {std::stod(f.at(2)), std::stod(f.at(3))};
}

nlohmann::json result_to_json(const CellResult& r) {
  return nlohmann::json{{"batch_size", r.batch_size},   {"steps", r.steps},
                        {"samples_seen", r.samples_seen}, {"eval", r.eval},
                        {"final_loss", r.final_loss},     {"final_logit_scale", r.final_logit_scale},
                        {"diverged", r.diverged},         {"text_checksum", r.text_checksum},
                        {"freeze_ok", r.freeze_ok},       {"seconds", r.seconds}};
}

CellResult result_from_json(const nlohmann::json& j) {
  CellResult r;
  r.batch_size = j.at("batch_size").get<int>();
  r.steps = j.at("steps").get<int>();
  r.samples_seen = j.at("samples_seen").get<long>();
  const auto& e = j.at("eval");
  r.eval.zero_shot_top1 = e.at("zero_shot_top1").get<double>();
  for (const char* dir : {"image_to_text", "text_to_image"}) {
    for (const auto& [k, v] : e.at("recall").at(dir).items()) r.eval.recall[dir][std::stoi(k)] = v.get<double>();
  }
  r.eval.mean_recall_at_1 = e.at("recall").at("mean_r1").get<double>();
  r.eval.modality_gap = e.at("modality_gap").get<double>();
  const auto& m = e.at("meta");
  r.eval.per_class_top1 = m.at("per_class_top1").get<std::vector<double>>();
  r.eval.per_class_count = m.at("per_class_count").get<std::vector<std::size_t>>();
  r.eval.num_images = m.at("num_images").get<std::size_t>();
  r.eval.templates = m.at("templates").get<std::vector<std::string>>();
  r.eval.split = m.at("split").get<std::string>();
  r.eval.vision_checksum = m.at("vision_checksum").get<std::string>();
  r.eval.text_checksum = m.at("text_checksum").get<std::string>();
  r.eval.config_hash = m.at("config_hash").get<std::string>();
  r.final_loss = j.at("final_loss").get<double>();
  r.final_logit_scale = j.at("final_logit_scale").get<double>();
  r.diverged = j.at("diverged").get<bool>();
  r.text_checksum = j.at("text_checksum").get<std::string>();
  r.freeze_ok = j.at("freeze_ok").get<bool>();
  r.seconds = j.value("seconds", 0.0);
  return r;
}

template <typename T>
bool ascending_unique(const std::vector<T>& v) {
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (!(v[i - 1] < v[i])) return false;
  }
  return true;
}

CellSpec base_cell(const ExperimentSpec& spec, const char* experiment, const char* axis, std::uint64_t seed) {
  CellSpec c;
  c.experiment = experiment;
  c.axis = axis;
  c.seed = seed;
  c.train = spec.base;
  c.train.seed = seed;
  c.vision = spec.vision;
  return c;
}

}  // namespace

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::batch_sweep: return "batch_sweep";
    case ExperimentKind::pooling_compare: return "pooling_compare";
    case ExperimentKind::backbone_compare: return "backbone_compare";
    case ExperimentKind::pretrain_text: return "pretrain_text";
    case ExperimentKind::pretrain_vision: return "pretrain_vision";
    case ExperimentKind::train: return "train";
    case ExperimentKind::eval: return "eval";
  }
  return "unknown";
}

ExperimentKind experiment_kind_from_string(const std::string& name) {
  for (auto k : {ExperimentKind::batch_sweep, ExperimentKind::pooling_compare, ExperimentKind::backbone_compare,
                 ExperimentKind::pretrain_text, ExperimentKind::pretrain_vision, ExperimentKind::train,
                 ExperimentKind::eval}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown experiment kind '" + name + "'");
}

std::string to_string(Backbone b) { return b == Backbone::random ? "random" : "pretrained"; }

Backbone backbone_from_string(const std::string& name) {
  if (name == "random") return Backbone::random;
  if (name == "pretrained") return Backbone::pretrained;
  throw ConfigError("unknown backbone '" + name + "' (expected random or pretrained)");
}

void ExperimentSpec::validate() const {
  base.validate();
  vision.validate_vision();
  if (!ascending_unique(batch_sizes)) throw ConfigError("batch sizes must be ascending and unique");
  if (!ascending_unique(seeds)) throw ConfigError("seeds must be ascending and unique");
  std::set<Pooling> pset(poolings.begin(), poolings.end());
  if (pset.size() != poolings.size()) throw ConfigError("pooling strategies repeat");
  std::set<Backbone> bset(backbones.begin(), backbones.end());
  if (bset.size() != backbones.size()) throw ConfigError("backbones repeat");
  const bool sweep = kind == ExperimentKind::batch_sweep || kind == ExperimentKind::pooling_compare ||
                     kind == ExperimentKind::backbone_compare;
  if (sweep && seeds.size() < 2) throw ConfigError("sweeps need at least two seeds for trend claims");
  if (kind == ExperimentKind::batch_sweep) {
    const long budget = samples_seen > 0 ? samples_seen : static_cast<long>(base.batch_size) * base.total_steps;
    for (int b : batch_sizes) {
      if (b < 2) throw ConfigError("batch sizes must be at least 2");
      if (budget % b != 0) {
        throw ConfigError("samples_seen " + std::to_string(budget) + " is not a multiple of batch size " +
                          std::to_string(b));
      }
    }
  }
  if (vision.image_size != base.preprocess.size) throw ConfigError("vision image_size differs from preprocess size");
}

void to_json(nlohmann::json& j, const ExperimentSpec& s) {
  std::vector<std::string> pools, backs;
  for (auto p : s.poolings) pools.push_back(to_string(p));
  for (auto b : s.backbones) backs.push_back(to_string(b));
  j = nlohmann::json{{"kind", to_string(s.kind)},       {"base", s.base},           {"vision", s.vision},
                     {"batch_sizes", s.batch_sizes},    {"poolings", pools},        {"backbones", backs},
                     {"seeds", s.seeds},                {"samples_seen", s.samples_seen},
                     {"out_dir", s.out_dir.string()}};
}

void from_json(const nlohmann::json& j, ExperimentSpec& s) {
  ExperimentSpec d;
  s.kind = experiment_kind_from_string(j.value("kind", to_string(d.kind)));
  s.base = j.value("base", d.base);
  s.vision = j.value("vision", d.vision);
  s.batch_sizes = j.value("batch_sizes", d.batch_sizes);
  s.poolings.clear();
  if (j.contains("poolings")) {
    for (const auto& p : j.at("poolings")) s.poolings.push_back(pooling_from_string(p.get<std::string>()));
  } else {
    s.poolings = d.poolings;
  }
  s.backbones.clear();
  if (j.contains("backbones")) {
    for (const auto& b : j.at("backbones")) s.backbones.push_back(backbone_from_string(b.get<std::string>()));
  } else {
    s.backbones = d.backbones;
  }
  s.seeds = j.value("seeds", d.seeds);
  s.samples_seen = j.value("samples_seen", d.samples_seen);
  s.out_dir = j.value("out_dir", std::string());
}

std::string CellSpec::cell_id() const { return experiment + "/" + axis + "=" + value + "/seed=" + std::to_string(seed); }

std::string CellSpec::cache_key(const std::string& text_checksum, const std::string& init_checksum) const {
  const nlohmann::json key{{"train", train},
                           {"vision", vision},
                           {"backbone", to_string(backbone)},
                           {"text", text_checksum},
                           {"init", init_checksum}};
  return sha256_hex(key.dump()).substr(0, 20);
}

const std::vector<std::string>& result_columns() {
  static const std::vector<std::string> cols{
      "cell_id",     "experiment",    "axis",       "value",      "seed",         "batch_size",
      "steps",       "samples_seen",  "zero_shot_top1", "i2t_r1", "i2t_r5",       "t2i_r1",
      "t2i_r5",      "mean_r1",       "modality_gap", "final_loss", "final_logit_scale", "diverged",
      "text_checksum", "freeze_ok",   "invariants_ok"};
  return cols;
}

std::string result_header() {
  std::string out;
  for (const auto& c : result_columns()) out += (out.empty() ? "" : ",") + c;
  return out;
}

std::string result_row(const CellResult& r) {
  auto rec = [&](const char* dir, int k) {
    auto it = r.eval.recall.find(dir);
    return it != r.eval.recall.end() && it->second.count(k) ? fmt(it->second.at(k)) : std::string("nan");
  };
  std::ostringstream ss;
  ss << r.cell_id << ',' << r.experiment << ',' << r.axis << ',' << r.value << ',' << r.seed << ',' << r.batch_size
     << ',' << r.steps << ',' << r.samples_seen << ',' << fmt(r.eval.zero_shot_top1) << ','
     << rec("image_to_text", 1) << ',' << rec("image_to_text", 5) << ',' << rec("text_to_image", 1) << ','
     << rec("text_to_image", 5) << ',' << fmt(r.eval.mean_recall_at_1) << ',' << fmt(r.eval.modality_gap) << ','
     << fmt(r.final_loss) << ',' << fmt(r.final_logit_scale) << ',' << (r.diverged ? 1 : 0) << ','
     << r.text_checksum << ',' << (r.freeze_ok ? 1 : 0) << ',' << (r.eval.invariants_hold() ? 1 : 0);
  return ss.str();
}

CellResult parse_result_row(const std::string& line) {
  const auto f = split_csv(line);
  if (f.size() != result_columns().size()) {
    throw ExperimentError("results row has " + std::to_string(f.size()) + " fields, expected " +
                          std::to_string(result_columns().size()));
  }
  CellResult r;
  r.cell_id = f[0];
  r.experiment = f[1];
  r.axis = f[2];
  r.value = f[3];
  r.seed = std::stoull(f[4]);
  r.batch_size = std::stoi(f[5]);
  r.steps = std::stoi(f[6]);
  r.samples_seen = std::stol(f[7]);
  r.eval.zero_shot_top1 = std::stod(f[8]);
  r.eval.recall["image_to_text"][1] = std::stod(f[9]);
  r.eval.recall["image_to_text"][5] = std::stod(f[10]);
  r.eval.recall["text_to_image"][1] = std::stod(f[11]);
  r.eval.recall["text_to_image"][5] = std::stod(f[12]);
  r.eval.mean_recall_at_1 = std::stod(f[13]);
  r.eval.modality_gap = std::stod(f[14]);
  r.final_loss = std::stod(f[15]);
  r.final_logit_scale = std::stod(f[16]);
  r.diverged = f[17] == "1";
  r.text_checksum = f[18];
  r.freeze_ok = f[19] == "1";
  r.eval.text_checksum = r.text_checksum;
  return r;
}

void append_result(const std::filesystem::path& csv, const CellResult& r) {
  const std::string header = result_header();
  const bool fresh = !std::filesystem::exists(csv) || std::filesystem::file_size(csv) == 0;
  if (!fresh && sha256_hex(first_line(csv)) != sha256_hex(header)) {
    throw ExperimentError("results file " + csv.string() + " has a different header; refusing to append");
  }
  if (csv.has_parent_path()) std::filesystem::create_directories(csv.parent_path());
  std::ofstream out(csv, std::ios::app);
  if (!out) throw ExperimentError("cannot append to " + csv.string());
  if (fresh) out << header << '\n';
  out << result_row(r) << '\n' << std::flush;
}

std::vector<CellResult> read_results(const std::filesystem::path& csv) {
  std::vector<CellResult> rows;
  if (!std::filesystem::exists(csv)) return rows;
  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);
  if (sha256_hex(line) != sha256_hex(result_header())) {
    throw ExperimentError("results file " + csv.string() + " has an unexpected header");
  }
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(parse_result_row(line));
  }
  return rows;
}

std::map<std::string, CellResult> reduce_by_cell(const std::vector<CellResult>& rows) {
  std::map<std::string, CellResult> out;
  for (const auto& r : rows) {
    auto [it, inserted] = out.emplace(r.cell_id, r);
    if (!inserted && result_row(it->second) != result_row(r)) {
      throw ExperimentError("conflicting results for cell " + r.cell_id);
    }
  }
  return out;
}

std::vector<AxisSummary> summarize(const std::map<std::string, CellResult>& cells,
                                   const std::vector<std::string>& value_order) {
  std::vector<AxisSummary> out;
  for (const auto& v : value_order) {
    AxisSummary s;
    s.value = v;
    std::vector<double> accs;
    for (const auto& [_, r] : cells) {
      if (r.value != v) continue;
      accs.push_back(r.eval.zero_shot_top1);
      s.mean_r1 += r.eval.mean_recall_at_1;
    }
    s.seeds = accs.size();
    if (s.seeds == 0) continue;
    for (double a : accs) s.zero_shot_top1 += a;
    s.zero_shot_top1 /= static_cast<double>(s.seeds);
    s.mean_r1 /= static_cast<double>(s.seeds);
    double var = 0;
    for (double a : accs) var += (a - s.zero_shot_top1) * (a - s.zero_shot_top1);
    s.zero_shot_top1_std = s.seeds > 1 ? std::sqrt(var / static_cast<double>(s.seeds - 1)) : 0.0;
    out.push_back(s);
  }
  return out;
}

CellResult run_cell(const CellSpec& cell, const ExperimentContext& ctx, const std::filesystem::path& out_dir) {
  if (!ctx.corpus || !ctx.vocab) throw ExperimentError("experiment context lacks corpus or vocab");
  const std::string text_checksum = ctx.text.checksum();
  std::string init_checksum;
  if (cell.backbone == Backbone::pretrained) {
    if (!ctx.pretrained_vision) throw ExperimentError("pretrained backbone requested but none supplied");
    if (!(ctx.pretrained_vision_config == cell.vision)) {
      throw ExperimentError("pretrained vision config differs from the cell's vision config");
    }
    init_checksum = ctx.pretrained_vision->checksum();
  }
  const auto dir = out_dir / "cells" / cell.cache_key(text_checksum, init_checksum);
  const auto result_path = dir / "result.json";

  CellResult r;
  if (std::filesystem::exists(result_path)) {
    std::ifstream in(result_path);
    r = result_from_json(nlohmann::json::parse(in));
  } else {
    std::filesystem::create_directories(dir);
    {
      std::ofstream(dir / "cell.json") << nlohmann::json{{"train", cell.train},
                                                         {"vision", cell.vision},
                                                         {"backbone", to_string(cell.backbone)},
                                                         {"text_checksum", text_checksum},
                                                         {"init_checksum", init_checksum}}
                                              .dump(2)
                                       << '\n';
    }
    const auto last = dir / "checkpoints" / "last";
    Model model;
    const auto t0 = std::chrono::steady_clock::now();
    bool done = false;
    if (std::filesystem::exists(last / "train_state.json")) {
      done = load_checkpoint(last).state.step >= cell.train.total_steps;
    }
    if (!done) {
      TrainOptions opts;
      opts.out_dir = dir;
      if (std::filesystem::exists(last / "train_state.json")) {
        opts.resume_from = last;
      } else {
        model.vision_config = cell.vision;
        model.text_config = ctx.text_config;
        model.text = ctx.text.clone();
        if (cell.backbone == Backbone::pretrained) {
          model.vision = ctx.pretrained_vision->clone();
        } else {
          Rng init(mix_seed({cell.seed, 0x1417ULL}));
          model.vision = init_vision_tower(cell.vision, init);
        }
      }
      TrainResult tr = train(*ctx.corpus, *ctx.vocab, model, cell.train, opts);
      (void)tr;
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    Checkpoint ck = load_checkpoint(last);
    r.batch_size = cell.train.batch_size;
    r.steps = ck.state.step;
    r.samples_seen = static_cast<long>(ck.state.step) * cell.train.batch_size;
    r.diverged = ck.state.step < cell.train.total_steps;
    std::tie(r.final_loss, r.final_logit_scale) = last_metrics(dir / "metrics.csv");
    r.text_checksum = ck.model.text.checksum();
    bool text_state = false;
    for (const auto& [name, _] : ck.state.optimizer.moments) text_state |= name.rfind("text.", 0) == 0;
    r.freeze_ok = !cell.train.freeze_text || (r.text_checksum == text_checksum && !text_state);
    r.eval = run_eval(ck.model, cell.train, *ctx.corpus, *ctx.vocab, ctx.eval);
    std::ofstream(result_path) << result_to_json(r).dump(2) << '\n';
  }
  r.cell_id = cell.cell_id();
  r.experiment = cell.experiment;
  r.axis = cell.axis;
  r.value = cell.value;
  r.seed = cell.seed;
  return r;
}

std::vector<CellSpec> batch_sweep_cells(const ExperimentSpec& spec) {
  spec.validate();
  const long budget = spec.samples_seen > 0 ? spec.samples_seen
                                            : static_cast<long>(spec.base.batch_size) * spec.base.total_steps;
  std::vector<CellSpec> cells;
  for (int b : spec.batch_sizes) {
    for (auto seed : spec.seeds) {
      CellSpec c = base_cell(spec, "batch_sweep", "batch_size", seed);
      c.value = std::to_string(b);
      c.train.batch_size = b;
      c.train.total_steps = static_cast<int>(budget / b);
      // Warmup and checkpoint cadence keep their fraction of the run.
      const double frac = static_cast<double>(c.train.total_steps) / spec.base.total_steps;
      c.train.warmup_steps = static_cast<int>(std::lround(spec.base.warmup_steps * frac));
      c.train.checkpoint_every = std::max(1, static_cast<int>(std::lround(spec.base.checkpoint_every * frac)));
      c.train.divergence_patience =
          std::max(1, static_cast<int>(std::lround(spec.base.divergence_patience * frac)));
      cells.push_back(c);
    }
  }
  return cells;
}

std::vector<CellSpec> pooling_cells(const ExperimentSpec& spec) {
  spec.validate();
  std::vector<CellSpec> cells;
  for (auto p : spec.poolings) {
    for (auto seed : spec.seeds) {
      CellSpec c = base_cell(spec, "pooling_compare", "pooling", seed);
      c.value = to_string(p);
      c.vision.pooling = p;
      cells.push_back(c);
    }
  }
  return cells;
}

std::vector<CellSpec> backbone_cells(const ExperimentSpec& spec) {
  spec.validate();
  std::vector<CellSpec> cells;
  for (auto b : spec.backbones) {
    for (auto seed : spec.seeds) {
      CellSpec c = base_cell(spec, "backbone_compare", "backbone", seed);
      c.value = to_string(b);
      c.backbone = b;
      cells.push_back(c);
    }
  }
  return cells;
}

std::map<std::string, CellResult> run_sweep(const std::vector<CellSpec>& cells, const ExperimentContext& ctx,
                                            const std::filesystem::path& out_dir) {
  std::map<std::string, std::filesystem::path> files;
  for (const auto& c : cells) files.emplace(c.experiment, out_dir / (c.experiment + ".csv"));
  std::set<std::string> recorded;
  for (const auto& [_, csv] : files) {
    for (const auto& r : read_results(csv)) recorded.insert(r.cell_id);
  }
  for (const auto& c : cells) {
    if (recorded.count(c.cell_id())) continue;
    append_result(files.at(c.experiment), run_cell(c, ctx, out_dir));
    recorded.insert(c.cell_id());
  }
  std::vector<CellResult> rows;
  std::set<std::string> wanted;
  for (const auto& c : cells) wanted.insert(c.cell_id());
  for (const auto& [_, csv] : files) {
    for (auto& r : read_results(csv)) {
      if (wanted.count(r.cell_id)) rows.push_back(std::move(r));
    }
  }
  return reduce_by_cell(rows);
}

bool SweepReport::ok() const {
  return std::all_of(invariants.begin(), invariants.end(), [](const ReportCheck& c) { return c.passed; });
}

SweepReport build_report(const std::filesystem::path& out_dir) {
  SweepReport rep;
  std::ostringstream table, csv;
  csv << "experiment,value,seeds,zero_shot_top1,zero_shot_top1_std,mean_r1\n";
  const std::vector<std::pair<std::string, std::vector<std::string>>> experiments{
      {"batch_sweep", {}}, {"pooling_compare", {"cls_token", "mean", "map"}}, {"backbone_compare", {"random", "pretrained"}}};
  bool any = false;
  for (const auto& [name, fixed_order] : experiments) {
    const auto path = out_dir / (name + ".csv");
    if (!std::filesystem::exists(path)) continue;
    any = true;
    const auto cells = reduce_by_cell(read_results(path));
    std::vector<std::string> order = fixed_order;
    if (name == "batch_sweep") {
      std::set<int> bs;
      for (const auto& [_, r] : cells) bs.insert(std::stoi(r.value));
      for (int b : bs) order.push_back(std::to_string(b));
    }
    const auto summary = summarize(cells, order);

    table << name << '\n';
    table << "  " << std::left << std::setw(12) << "value" << std::right << std::setw(7) << "seeds" << std::setw(12)
          << "top1" << std::setw(10) << "std" << std::setw(12) << "mean R@1" << '\n';
    for (const auto& s : summary) {
      table << "  " << std::left << std::setw(12) << s.value << std::right << std::setw(7) << s.seeds << std::fixed
            << std::setprecision(4) << std::setw(12) << s.zero_shot_top1 << std::setw(10) << s.zero_shot_top1_std
            << std::setw(12) << s.mean_r1 << '\n';
      table.unsetf(std::ios::fixed);
      csv << name << ',' << s.value << ',' << s.seeds << ',' << fmt(s.zero_shot_top1) << ','
          << fmt(s.zero_shot_top1_std) << ',' << fmt(s.mean_r1) << '\n';
    }

    bool rows_ok = true;
    std::set<std::string> text_sums;
    std::map<std::string, std::set<std::uint64_t>> seeds_by_value;
    std::set<long> budgets;
    bool budget_ok = true;
    for (const auto& [_, r] : cells) {
      rows_ok &= r.eval.invariants_hold() && r.freeze_ok;
      text_sums.insert(r.text_checksum);
      seeds_by_value[r.value].insert(r.seed);
      budgets.insert(r.samples_seen);
      budget_ok &= static_cast<long>(r.steps) * r.batch_size == r.samples_seen;
    }
    rep.invariants.push_back({name + ": eval and freeze invariants hold in every row", rows_ok, ""});
    rep.invariants.push_back({name + ": one text tower across cells", text_sums.size() == 1,
                              std::to_string(text_sums.size()) + " distinct checksum(s)"});
    std::set<std::set<std::uint64_t>> seed_sets;
    for (const auto& [_, s] : seeds_by_value) seed_sets.insert(s);
    rep.invariants.push_back({name + ": complete value x seed grid", seed_sets.size() == 1,
                              std::to_string(cells.size()) + " cells"});
    if (name == "batch_sweep") {
      rep.invariants.push_back({name + ": fixed samples seen", budget_ok && budgets.size() == 1,
                                budgets.size() == 1 ? std::to_string(*budgets.begin()) + " samples per cell"
                                                    : "budgets differ"});
      if (summary.size() >= 2) {
        const auto& lo = summary.front();
        const auto& hi = summary.back();
        rep.trends.push_back({"batch " + hi.value + " seed-mean top1 >= batch " + lo.value,
                              hi.zero_shot_top1 >= lo.zero_shot_top1,
                              fmt(hi.zero_shot_top1) + " vs " + fmt(lo.zero_shot_top1)});
      }
    } else if (name == "backbone_compare" && summary.size() == 2) {
      rep.trends.push_back({"pretrained seed-mean top1 >= random", summary[1].zero_shot_top1 >= summary[0].zero_shot_top1,
                            fmt(summary[1].zero_shot_top1) + " vs " + fmt(summary[0].zero_shot_top1)});
    } else if (name == "pooling_compare" && !summary.empty()) {
      auto best = std::max_element(summary.begin(), summary.end(),
                                   [](const AxisSummary& a, const AxisSummary& b) { return a.mean_r1 < b.mean_r1; });
      std::string ordering;
      auto sorted = summary;
      std::stable_sort(sorted.begin(), sorted.end(),
                       [](const AxisSummary& a, const AxisSummary& b) { return a.mean_r1 > b.mean_r1; });
      for (const auto& s : sorted) ordering += (ordering.empty() ? "" : " > ") + s.value;
      rep.trends.push_back({"map has the best seed-mean R@1", best->value == "map", ordering});
    }
    table << '\n';
  }
  if (!any) rep.invariants.push_back({"results present", false, "no results files in " + out_dir.string()});
  rep.table = table.str();
  rep.csv = csv.str();
  return rep;
}

}  // namespace ltt
