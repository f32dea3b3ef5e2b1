// SPDX-License-Identifier: Apache-2.0

#include "ltt/eval.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ltt/contrastive.hpp"

namespace ltt {

namespace {

void require_matrix(const Tensor& x, const char* what) {
  if (!x.defined() || x.rank() != 2) throw EvalError(std::string(what) + " must be a 2-D [N, D] tensor");
  if (x.dim(0) == 0) throw EvalError(std::string(what) + " is empty");
}

// Row-normalized copy as a flat row-major buffer.
std::vector<double> unit_rows(const Tensor& x, const char* what) {
  require_matrix(x, what);
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += out[i * d + j] * out[i * d + j];
    const double norm = std::sqrt(ss);
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw EvalError(std::string(what) + " row " + std::to_string(i) + " has zero or non-finite norm");
    }
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= norm;
  }
  return out;
}

// cos[i, j] between rows of a [n, d] and b [m, d].
std::vector<double> cosine_matrix(const Tensor& a, const Tensor& b, const char* wa, const char* wb) {
  const auto ua = unit_rows(a, wa);
  const auto ub = unit_rows(b, wb);
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  if (b.dim(1) != d) throw EvalError(std::string(wa) + " and " + wb + " have different embedding widths");
  std::vector<double> s(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += ua[i * d + k] * ub[j * d + k];
      s[i * m + j] = acc;
    }
  }
  return s;
}

std::string join(const std::vector<std::string>& v, char sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += v[i];
  }
  return out;
}

}  // namespace

std::string to_string(Direction d) { return d == Direction::image_to_text ? "image_to_text" : "text_to_image"; }

Tensor normalize_rows(const Tensor& x) {
  auto v = unit_rows(x, "embeddings");
  return Tensor::from(x.shape(), std::move(v));
}

Tensor ensemble_class_embeddings(const Tensor& prompts, std::size_t num_classes, std::size_t num_templates) {
  if (num_templates == 0) throw EvalError("prompt ensemble needs at least one template");
  require_matrix(prompts, "prompt embeddings");
  if (prompts.dim(0) != num_classes * num_templates) {
    throw EvalError("prompt embeddings have " + std::to_string(prompts.dim(0)) + " rows, expected " +
                    std::to_string(num_classes * num_templates));
  }
  const std::size_t d = prompts.dim(1);
  const auto unit = unit_rows(prompts, "prompt embeddings");
  std::vector<double> out(num_classes * d, 0.0);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t t = 0; t < num_templates; ++t) {
      const double* row = unit.data() + (c * num_templates + t) * d;
      for (std::size_t j = 0; j < d; ++j) out[c * d + j] += row[j];
    }
    for (std::size_t j = 0; j < d; ++j) out[c * d + j] /= static_cast<double>(num_templates);
  }
  return normalize_rows(Tensor::from({num_classes, d}, std::move(out)));
}

Tensor class_text_embeddings(const std::vector<std::string>& class_names, const std::vector<std::string>& templates,
                             const TowerWeights& text, const EncoderConfig& config, const Vocab& vocab, int max_len) {
  if (templates.empty()) throw EvalError("prompt ensemble needs at least one template");
  if (class_names.empty()) throw EvalError("no class names");
  std::vector<std::string> prompts;
  prompts.reserve(class_names.size() * templates.size());
  for (const auto& name : class_names) {
    for (const auto& t : templates) prompts.push_back(fill_template(t, name));
  }
  return ensemble_class_embeddings(embed_captions(prompts, text, config, vocab, max_len), class_names.size(),
                                   templates.size());
}

std::vector<int> zero_shot_predict(const Tensor& image_embeddings, const Tensor& class_embeddings) {
  const auto s = cosine_matrix(image_embeddings, class_embeddings, "image embeddings", "class embeddings");
  const std::size_t n = image_embeddings.dim(0), c = class_embeddings.dim(0);
  std::vector<int> pred(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (s[i * c + j] > s[i * c + best]) best = j;
    }
    pred[i] = static_cast<int>(best);
  }
  return pred;
}

double zero_shot_classify(const Tensor& image_embeddings, const Tensor& class_embeddings,
                          const std::vector<int>& labels) {
  require_matrix(image_embeddings, "image embeddings");
  require_matrix(class_embeddings, "class embeddings");
  if (labels.size() != image_embeddings.dim(0)) throw EvalError("one label per image is required");
  const int c = static_cast<int>(class_embeddings.dim(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= c) {
      throw EvalError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) + " outside [0, " +
                      std::to_string(c) + ")");
    }
  }
  const auto pred = zero_shot_predict(image_embeddings, class_embeddings);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

std::vector<std::size_t> partner_ranks(const Tensor& image_embeddings, const Tensor& text_embeddings,
                                       Direction direction) {
  require_matrix(image_embeddings, "image embeddings");
  require_matrix(text_embeddings, "text embeddings");
  if (image_embeddings.dim(0) != text_embeddings.dim(0)) throw EvalError("retrieval needs paired rows");
  const bool i2t = direction == Direction::image_to_text;
  const Tensor& queries = i2t ? image_embeddings : text_embeddings;
  const Tensor& gallery = i2t ? text_embeddings : image_embeddings;
  const auto s = cosine_matrix(queries, gallery, "queries", "gallery");
  const std::size_t n = queries.dim(0);
  std::vector<std::size_t> ranks(n);
  for (std::size_t q = 0; q < n; ++q) {
    const double target = s[q * n + q];
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = s[q * n + j];
      ahead += v > target || (v == target && j < q);
    }
    ranks[q] = ahead + 1;
  }
  return ranks;
}

double recall_at_k(const Tensor& image_embeddings, const Tensor& text_embeddings, std::size_t k, Direction direction) {
  require_matrix(image_embeddings, "image embeddings");
  if (k == 0 || k > image_embeddings.dim(0)) {
    throw EvalError("recall k = " + std::to_string(k) + " outside [1, " + std::to_string(image_embeddings.dim(0)) +
                    "]");
  }
  const auto ranks = partner_ranks(image_embeddings, text_embeddings, direction);
  std::size_t hits = 0;
  for (auto r : ranks) hits += r <= k;
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double modality_gap(const Tensor& image_embeddings, const Tensor& text_embeddings) {
  require_matrix(image_embeddings, "image embeddings");
  require_matrix(text_embeddings, "text embeddings");
  if (image_embeddings.dim(1) != text_embeddings.dim(1)) throw EvalError("embedding widths differ");
  require_unit_rows(image_embeddings, "image embeddings");
  require_unit_rows(text_embeddings, "text embeddings");
  const std::size_t d = image_embeddings.dim(1);
  auto centroid = [d](const Tensor& x) {
    std::vector<double> c(d, 0.0);
    const std::size_t n = x.dim(0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) c[j] += x.data()[i * d + j];
    }
    for (auto& v : c) v /= static_cast<double>(n);
    return c;
  };
  const auto a = centroid(image_embeddings);
  const auto b = centroid(text_embeddings);
  double ss = 0.0;
  for (std::size_t j = 0; j < d; ++j) ss += (a[j] - b[j]) * (a[j] - b[j]);
  return std::sqrt(ss);
}

bool EvalReport::invariants_hold() const {
  auto frac = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!frac(zero_shot_top1) || !frac(mean_recall_at_1)) return false;
  for (const auto& [_, by_k] : recall) {
    for (const auto& [k, v] : by_k) {
      if (!frac(v)) return false;
    }
  }
  for (double v : per_class_top1) {
    if (!frac(v)) return false;
  }
  const auto i2t = recall.find("image_to_text");
  const auto t2i = recall.find("text_to_image");
  if (i2t == recall.end() || t2i == recall.end() || !i2t->second.count(1) || !t2i->second.count(1)) return false;
  return mean_recall_at_1 == 0.5 * (i2t->second.at(1) + t2i->second.at(1));
}

std::string EvalReport::csv_header() { return "zero_shot_top1,i2t_r1,i2t_r5,t2i_r1,t2i_r5,mean_r1,modality_gap"; }

std::string EvalReport::csv_row() const {
  auto get = [&](const char* dir, int k) {
    auto it = recall.find(dir);
    if (it == recall.end() || !it->second.count(k)) return std::nan("");
    return it->second.at(k);
  };
  std::ostringstream ss;
  ss << std::setprecision(17) << zero_shot_top1 << ',' << get("image_to_text", 1) << ',' << get("image_to_text", 5)
     << ',' << get("text_to_image", 1) << ',' << get("text_to_image", 5) << ',' << mean_recall_at_1 << ','
     << modality_gap;
  return ss.str();
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json recall = nlohmann::json::object();
  for (const auto& [dir, by_k] : r.recall) {
    for (const auto& [k, v] : by_k) recall[dir][std::to_string(k)] = v;
  }
  recall["mean_r1"] = r.mean_recall_at_1;
  j = nlohmann::json{{"zero_shot_top1", r.zero_shot_top1},
                     {"recall", recall},
                     {"modality_gap", r.modality_gap},
                     {"meta",
                      {{"per_class_top1", r.per_class_top1},
                       {"per_class_count", r.per_class_count},
                       {"num_images", r.num_images},
                       {"templates", r.templates},
                       {"split", r.split},
                       {"vision_checksum", r.vision_checksum},
                       {"text_checksum", r.text_checksum},
                       {"config_hash", r.config_hash}}}};
}

Tensor embed_corpus_images(const Corpus& corpus, const std::vector<std::size_t>& members, const Model& model,
                           const PreprocessConfig& prep, std::size_t chunk) {
  if (members.empty()) throw EvalError("no images to embed");
  NoGradGuard no_grad;
  const auto d = static_cast<std::size_t>(model.vision_config.output_dim);
  const auto s = static_cast<std::size_t>(prep.size);
  std::vector<double> out;
  out.reserve(members.size() * d);
  for (std::size_t start = 0; start < members.size(); start += chunk) {
    const std::size_t stop = std::min(members.size(), start + chunk);
    std::vector<double> pixels;
    pixels.reserve((stop - start) * 3 * s * s);
    for (std::size_t r = start; r < stop; ++r) {
      Tensor img = preprocess(corpus.samples.at(members[r]).image, prep, false, nullptr);
      pixels.insert(pixels.end(), img.data().begin(), img.data().end());
    }
    Tensor e = embed_image(Tensor::from({stop - start, 3, s, s}, std::move(pixels)), model.vision,
                           model.vision_config);
    out.insert(out.end(), e.data().begin(), e.data().end());
  }
  return Tensor::from({members.size(), d}, std::move(out));
}

EvalReport run_eval(const Model& model, const TrainConfig& config, const Corpus& corpus, const Vocab& vocab,
                    const EvalOptions& options) {
  if (model.vision_config.image_size != config.preprocess.size) {
    throw EvalError("vision image_size " + std::to_string(model.vision_config.image_size) +
                    " differs from preprocess size " + std::to_string(config.preprocess.size));
  }
  if (model.text_config.vocab_size != static_cast<int>(vocab.size())) {
    throw EvalError("text tower vocabulary (" + std::to_string(model.text_config.vocab_size) +
                    ") does not match the corpus vocabulary (" + std::to_string(vocab.size()) + ")");
  }
  const auto members = corpus.indices(options.split);
  if (members.empty()) throw EvalError("split " + to_string(options.split) + " is empty");
  const auto templates = options.templates.empty() ? corpus.grammar.held_out_templates() : options.templates;

  std::vector<std::string> class_names;
  for (int c = 0; c < corpus.grammar.num_classes(); ++c) class_names.push_back(corpus.grammar.class_name(c));
  const Tensor classes = class_text_embeddings(class_names, templates, model.text, model.text_config, vocab,
                                               config.max_seq_len);
  const Tensor images = embed_corpus_images(corpus, members, model, config.preprocess, options.chunk);
  std::vector<std::string> captions;
  std::vector<int> labels;
  for (auto i : members) {
    captions.push_back(corpus.samples[i].caption);
    labels.push_back(corpus.samples[i].class_id);
  }
  const Tensor texts = embed_captions(captions, model.text, model.text_config, vocab, config.max_seq_len);

  EvalReport r;
  r.num_images = members.size();
  r.templates = templates;
  r.split = to_string(options.split);
  r.vision_checksum = model.vision.checksum();
  r.text_checksum = model.text.checksum();
  r.config_hash = config_hash(config);

  const auto pred = zero_shot_predict(images, classes);
  r.per_class_top1.assign(class_names.size(), 0.0);
  r.per_class_count.assign(class_names.size(), 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    r.per_class_count[c] += 1;
    if (pred[i] == labels[i]) {
      ++correct;
      r.per_class_top1[c] += 1.0;
    }
  }
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    if (r.per_class_count[c]) r.per_class_top1[c] /= static_cast<double>(r.per_class_count[c]);
  }
  r.zero_shot_top1 = static_cast<double>(correct) / static_cast<double>(pred.size());

  for (Direction dir : {Direction::image_to_text, Direction::text_to_image}) {
    const auto ranks = partner_ranks(images, texts, dir);
    for (int k : options.recall_ks) {
      if (k < 1) throw EvalError("recall k must be positive");
      std::size_t hits = 0;
      for (auto rank : ranks) hits += rank <= static_cast<std::size_t>(k);
      r.recall[to_string(dir)][k] = static_cast<double>(hits) / static_cast<double>(ranks.size());
    }
  }
  if (!r.recall["image_to_text"].count(1)) {
    throw EvalError("recall_ks must include 1 for mean R@1");
  }
  r.mean_recall_at_1 = 0.5 * (r.recall["image_to_text"][1] + r.recall["text_to_image"][1]);
  r.modality_gap = modality_gap(images, texts);
  return r;
}

EvalReport run_eval(const std::filesystem::path& checkpoint_dir, const Corpus& corpus, const Vocab& vocab,
                    const EvalOptions& options) {
  Checkpoint ck = load_checkpoint(checkpoint_dir);
  if (ck.model.vision_config.output_dim != ck.model.text_config.output_dim) {
    throw EvalError("checkpoint towers disagree on output_dim");
  }
  return run_eval(ck.model, ck.config, corpus, vocab, options);
}

void write_eval_report(const EvalReport& report, const std::filesystem::path& json_path,
                       const std::filesystem::path& csv_path) {
  if (!json_path.empty()) {
    if (json_path.has_parent_path()) std::filesystem::create_directories(json_path.parent_path());
    std::ofstream out(json_path, std::ios::trunc);
    if (!out) throw EvalError("cannot write " + json_path.string());
    out << nlohmann::json(report).dump(2) << '\n';
  }
  if (!csv_path.empty()) {
    if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path());
    const bool fresh = !std::filesystem::exists(csv_path) || std::filesystem::file_size(csv_path) == 0;
    std::ofstream out(csv_path, std::ios::app);
    if (!out) throw EvalError("cannot write " + csv_path.string());
    if (fresh) out << EvalReport::csv_header() << ",split,templates\n";
    out << report.csv_row() << ',' << report.split << ",\"" << join(report.templates, '|') << "\"\n";
  }
}

}  // namespace ltt
