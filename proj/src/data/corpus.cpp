// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "ltt/data.hpp"
#include "ltt/hash.hpp"

namespace ltt {

namespace {

constexpr std::string_view kSlot = "{}";

// Hash streams derived from (corpus seed, index).
enum Stream : std::uint64_t { kImage = 1, kSplit = 2, kTemplate = 3 };

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

const std::array<std::array<double, 3>, 4> kPalette{{
    {0.86, 0.14, 0.12},  // red
    {0.16, 0.72, 0.22},  // green
    {0.14, 0.28, 0.88},  // blue
    {0.92, 0.84, 0.14},  // yellow
}};

// Shape membership in object-local coordinates scaled by the radius, y up.
bool inside(int shape, double u, double v) {
  switch (shape) {
    case 0:
      return u * u + v * v <= 1.0;
    case 1:
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 2:
      return v >= -0.5 && v <= 1.0 - std::sqrt(3.0) * std::abs(u);
    case 3:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    default:
      return false;
  }
}

}  // namespace

std::string GrammarConfig::class_name(int class_id) const {
  if (class_id < 0 || class_id >= num_classes()) throw DataError("class id " + std::to_string(class_id) + " out of range");
  return colors[static_cast<std::size_t>(color_of(class_id))] + " " + shapes[static_cast<std::size_t>(shape_of(class_id))];
}

std::vector<std::string> GrammarConfig::held_out_templates() const {
  std::vector<std::string> out;
  for (const auto& t : eval_templates) {
    if (std::find(train_templates.begin(), train_templates.end(), t) == train_templates.end()) out.push_back(t);
  }
  return out;
}

std::vector<std::string> GrammarConfig::all_templates() const {
  std::vector<std::string> out = train_templates;
  for (const auto& t : eval_templates) {
    if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
  }
  return out;
}

void GrammarConfig::validate() const {
  if (colors.empty() || shapes.empty()) throw DataError("grammar needs at least one color and one shape");
  if (colors.size() > kPalette.size()) throw DataError("grammar has more colors than the renderer palette");
  if (shapes.size() > 4) throw DataError("grammar has more shapes than the renderer supports");
  if (train_templates.empty() || eval_templates.empty()) throw DataError("grammar needs train and eval templates");
  for (const auto* set : {&train_templates, &eval_templates}) {
    for (const auto& t : *set) {
      const auto pos = t.find(kSlot);
      if (pos == std::string::npos || t.find(kSlot, pos + 1) != std::string::npos) {
        throw DataError("template '" + t + "' must contain exactly one {} slot");
      }
    }
  }
  if (raster_size < 8) throw DataError("raster_size too small");
}

void to_json(nlohmann::json& j, const GrammarConfig& g) {
  j = nlohmann::json{{"colors", g.colors},
                     {"shapes", g.shapes},
                     {"train_templates", g.train_templates},
                     {"eval_templates", g.eval_templates},
                     {"raster_size", g.raster_size}};
}

void from_json(const nlohmann::json& j, GrammarConfig& g) {
  GrammarConfig d;
  g.colors = j.value("colors", d.colors);
  g.shapes = j.value("shapes", d.shapes);
  g.train_templates = j.value("train_templates", d.train_templates);
  g.eval_templates = j.value("eval_templates", d.eval_templates);
  g.raster_size = j.value("raster_size", d.raster_size);
}

std::string fill_template(const std::string& templ, const std::string& name) {
  const auto pos = templ.find(kSlot);
  if (pos == std::string::npos) throw DataError("template '" + templ + "' has no {} slot");
  return templ.substr(0, pos) + name + templ.substr(pos + kSlot.size());
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
  }
  return "?";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw DataError("unknown split '" + name + "'");
}

std::vector<std::size_t> Corpus::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].split == split) out.push_back(i);
  }
  return out;
}

Split split_for(std::uint64_t corpus_seed, std::size_t index) {
  const auto bucket = mix_seed({corpus_seed, index, kSplit}) % 10;
  return bucket < 8 ? Split::train : (bucket == 8 ? Split::val : Split::test);
}

Raster render_sample(const GrammarConfig& grammar, int class_id, std::uint64_t sample_seed) {
  const int s = grammar.raster_size;
  Rng rng(sample_seed);
  Raster r{s, s, std::vector<double>(3 * static_cast<std::size_t>(s) * s)};

  // Muted background with a faint stripe texture and pixel noise.
  const double gray = rng.uniform(0.35, 0.6);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = rng.uniform(-0.04, 0.04);
  const double angle = rng.uniform(0.0, std::numbers::pi);
  const double freq = rng.uniform(0.15, 0.45);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  std::array<double, 3> color = kPalette[static_cast<std::size_t>(grammar.color_of(class_id))];
  for (auto& c : color) c = std::clamp(c + rng.uniform(-0.06, 0.06), 0.0, 1.0);
  const int shape = grammar.shape_of(class_id);
  const double radius = rng.uniform(0.22, 0.34) * s;
  const double margin = radius + 2.0;
  const double cx = rng.uniform(margin, s - margin);
  const double cy = rng.uniform(margin, s - margin);
  const double rot = shape == 0 ? 0.0 : rng.uniform(-0.3, 0.3);
  const double cr = std::cos(rot), sr = std::sin(rot);

  constexpr int kSuper = 4;
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = x + (sx + 0.5) / kSuper - cx;
          const double py = cy - (y + (sy + 0.5) / kSuper);
          const double u = (cr * px + sr * py) / radius;
          const double v = (-sr * px + cr * py) / radius;
          hits += inside(shape, u, v) ? 1 : 0;
        }
      }
      const double alpha = static_cast<double>(hits) / (kSuper * kSuper);
      const double stripe = 0.05 * std::sin(freq * (x * std::cos(angle) + y * std::sin(angle)) + phase);
      for (int c = 0; c < 3; ++c) {
        const double bg = gray + tint[static_cast<std::size_t>(c)] + stripe + rng.normal(0.0, 0.03);
        const double v = (1.0 - alpha) * bg + alpha * color[static_cast<std::size_t>(c)];
        r.pixels[(static_cast<std::size_t>(c) * s + y) * s + x] = quantize(v);
      }
    }
  }
  return r;
}

Corpus generate_corpus(std::size_t n, const GrammarConfig& grammar, std::uint64_t seed) {
  if (n < 1) throw DataError("generate_corpus needs n >= 1");
  grammar.validate();
  Corpus corpus{grammar, seed, {}};
  corpus.samples.reserve(n);
  const auto classes = static_cast<std::size_t>(grammar.num_classes());
  for (std::size_t i = 0; i < n; ++i) {
    SyntheticSample s;
    s.id = i;
    s.class_id = static_cast<int>(i % classes);
    s.seed = mix_seed({seed, i, kImage});
    s.split = split_for(seed, i);
    s.template_index = static_cast<int>(mix_seed({seed, i, kTemplate}) % grammar.train_templates.size());
    s.caption = fill_template(grammar.train_templates[static_cast<std::size_t>(s.template_index)],
                              grammar.class_name(s.class_id));
    s.image = render_sample(grammar, s.class_id, s.seed);
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

std::string corpus_digest(const Corpus& corpus) {
  Sha256 h;
  h.update(nlohmann::json(corpus.grammar).dump());
  h.update_u64(corpus.seed);
  h.update_u64(corpus.samples.size());
  for (const auto& s : corpus.samples) {
    h.update_u64(s.id);
    h.update_u64(static_cast<std::uint64_t>(s.class_id));
    h.update_u64(static_cast<std::uint64_t>(s.template_index));
    h.update_u64(static_cast<std::uint64_t>(s.split));
    h.update_u64(s.seed);
    h.update_u64(s.caption.size());
    h.update(s.caption);
    h.update_u64(static_cast<std::uint64_t>(s.image.width));
    h.update_u64(static_cast<std::uint64_t>(s.image.height));
    h.update(std::span<const double>(s.image.pixels));
  }
  return h.hex();
}

void write_ppm(const std::filesystem::path& path, const Raster& r) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << r.width << " " << r.height << "\n255\n";
  const std::size_t plane = static_cast<std::size_t>(r.width) * r.height;
  std::string bytes(plane * 3, '\0');
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      bytes[p * 3 + c] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(r.pixels[c * plane + p], 0.0, 1.0) * 255.0)));
    }
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

Raster read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) throw DataError(path.string() + " is not an 8-bit P6 image");
  in.get();
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  std::string bytes(plane * 3, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) throw DataError(path.string() + " is truncated");
  Raster r{w, h, std::vector<double>(plane * 3)};
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) r.pixels[c * plane + p] = static_cast<unsigned char>(bytes[p * 3 + c]) / 255.0;
  }
  return r;
}

namespace {

std::string image_name(std::size_t id) {
  std::ostringstream ss;
  ss << std::setw(6) << std::setfill('0') << id << ".ppm";
  return ss.str();
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  {
    std::ofstream g(dir / "grammar.json");
    g << nlohmann::json{{"grammar", corpus.grammar}, {"seed", corpus.seed}, {"size", corpus.samples.size()}}.dump(2)
      << "\n";
  }
  std::ofstream captions(dir / "captions.jsonl");
  if (!captions) throw DataError("cannot write captions.jsonl in " + dir.string());
  for (const auto& s : corpus.samples) {
    captions << nlohmann::json{{"id", s.id},
                               {"caption", s.caption},
                               {"class_id", s.class_id},
                               {"split", to_string(s.split)},
                               {"seed", s.seed},
                               {"template", s.template_index}}
                    .dump()
             << "\n";
    write_ppm(dir / "images" / image_name(s.id), s.image);
  }
}

Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream g(dir / "grammar.json");
  if (!g) throw DataError("no grammar.json in " + dir.string());
  const auto meta = nlohmann::json::parse(g);
  Corpus corpus;
  corpus.grammar = meta.at("grammar").get<GrammarConfig>();
  corpus.seed = meta.at("seed").get<std::uint64_t>();
  std::ifstream captions(dir / "captions.jsonl");
  if (!captions) throw DataError("no captions.jsonl in " + dir.string());
  std::string line;
  while (std::getline(captions, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    SyntheticSample s;
    s.id = j.at("id").get<std::size_t>();
    s.caption = j.at("caption").get<std::string>();
    s.class_id = j.at("class_id").get<int>();
    s.split = split_from_string(j.at("split").get<std::string>());
    s.seed = j.at("seed").get<std::uint64_t>();
    s.template_index = j.value("template", 0);
    s.image = read_ppm(dir / "images" / image_name(s.id));
    corpus.samples.push_back(std::move(s));
  }
  if (corpus.samples.size() != meta.at("size").get<std::size_t>()) {
    throw DataError("captions.jsonl in " + dir.string() + " does not match the recorded corpus size");
  }
  return corpus;
}

}  // namespace ltt
