// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "ltt/data.hpp"

namespace ltt {

namespace {

const std::vector<std::string> kSpecials{"[PAD]", "[UNK]", "[BOS]", "[EOS]"};

}  // namespace

Vocab::Vocab() : Vocab(std::vector<std::string>{}) {}

Vocab::Vocab(std::vector<std::string> words) {
  tokens_ = kSpecials;
  for (auto& w : words) {
    if (std::find(kSpecials.begin(), kSpecials.end(), w) != kSpecials.end()) continue;
    tokens_.push_back(std::move(w));
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) throw DataError("duplicate vocab token '" + tokens_[i] + "'");
  }
}

Vocab Vocab::from_grammar(const GrammarConfig& grammar) {
  std::set<std::string> words;
  for (const auto& t : grammar.all_templates()) {
    for (auto& w : split_words(fill_template(t, ""))) words.insert(w);
  }
  for (const auto& c : grammar.colors) words.insert(c);
  for (const auto& s : grammar.shapes) words.insert(s);
  return Vocab(std::vector<std::string>(words.begin(), words.end()));
}

int Vocab::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw DataError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& t : tokens_) out << t << "\n";
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocab " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  if (lines.size() < kSpecials.size() || !std::equal(kSpecials.begin(), kSpecials.end(), lines.begin())) {
    throw DataError(path.string() + " does not start with the special tokens");
  }
  return Vocab(std::vector<std::string>(lines.begin() + static_cast<std::ptrdiff_t>(kSpecials.size()), lines.end()));
}

std::vector<std::string> split_words(const std::string& caption) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : caption) {
    const auto uc = static_cast<unsigned char>(ch);
    if (std::isspace(uc)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

TokenizedCaption tokenize(const std::string& caption, const Vocab& vocab, int max_len) {
  const auto words = split_words(caption);
  if (static_cast<int>(words.size()) + 2 > max_len) {
    throw DataError("caption '" + caption + "' needs " + std::to_string(words.size() + 2) + " tokens, max_seq_len is " +
                    std::to_string(max_len));
  }
  TokenizedCaption t;
  t.ids.assign(static_cast<std::size_t>(max_len), Vocab::kPad);
  t.mask.assign(static_cast<std::size_t>(max_len), 0.0);
  t.ids[0] = Vocab::kBos;
  for (std::size_t i = 0; i < words.size(); ++i) t.ids[i + 1] = vocab.id(words[i]);
  t.ids[words.size() + 1] = Vocab::kEos;
  std::fill_n(t.mask.begin(), words.size() + 2, 1.0);
  return t;
}

std::string detokenize(const std::vector<int>& ids, const Vocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == Vocab::kBos || id == Vocab::kPad) continue;
    if (id == Vocab::kEos) break;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

TokenBatch make_token_batch(const std::vector<std::string>& captions, const Vocab& vocab, int max_len) {
  TokenBatch b;
  b.batch = captions.size();
  b.length = static_cast<std::size_t>(max_len);
  b.ids.reserve(b.batch * b.length);
  b.mask.reserve(b.batch * b.length);
  for (const auto& c : captions) {
    auto t = tokenize(c, vocab, max_len);
    b.ids.insert(b.ids.end(), t.ids.begin(), t.ids.end());
    b.mask.insert(b.mask.end(), t.mask.begin(), t.mask.end());
  }
  return b;
}

}  // namespace ltt
