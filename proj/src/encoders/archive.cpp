// SPDX-License-Identifier: Apache-2.0

#include "ltt/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace ltt {

namespace {

constexpr char kMagic[] = "LOCKT1";
constexpr std::size_t kMagicLen = 6;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }
double get_f64(const std::string& in, std::size_t pos) { return std::bit_cast<double>(get_u64(in, pos)); }

}  // namespace

std::string encode_archive(const Archive& archive) {
  nlohmann::json manifest = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, entry] : archive) {
    if (shape_numel(entry.shape) != entry.data.size()) {
      throw ArchiveError("archive entry '" + name + "' shape does not match its data");
    }
    manifest[name] = {{"dtype", "f64"}, {"shape", entry.shape}, {"offset", offset}, {"pretrained", entry.pretrained}};
    offset += entry.data.size() * sizeof(double);
  }
  const std::string text = manifest.dump();
  std::string out(kMagic, kMagicLen);
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& [_, entry] : archive) {
    for (double d : entry.data) put_f64(out, d);
  }
  return out;
}

Archive decode_archive(const std::string& bytes) {
  if (bytes.size() < kMagicLen + 8 || bytes.compare(0, kMagicLen, kMagic) != 0) {
    throw ArchiveError("not a LOCKT1 archive (bad magic)");
  }
  const std::uint64_t mlen = get_u64(bytes, kMagicLen);
  const std::size_t data_start = kMagicLen + 8 + mlen;
  if (data_start > bytes.size()) throw ArchiveError("truncated LOCKT1 manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(kMagicLen + 8, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(std::string("malformed LOCKT1 manifest: ") + e.what());
  }
  Archive out;
  for (const auto& [name, meta] : manifest.items()) {
    if (meta.value("dtype", "") != "f64") throw ArchiveError("entry '" + name + "' has unsupported dtype");
    ArchiveEntry entry;
    entry.shape = meta.at("shape").get<Shape>();
    entry.pretrained = meta.value("pretrained", false);
    const auto offset = meta.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_numel(entry.shape);
    if (data_start + offset + n * sizeof(double) > bytes.size()) {
      throw ArchiveError("entry '" + name + "' extends past end of archive");
    }
    entry.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) entry.data[i] = get_f64(bytes, data_start + offset + i * sizeof(double));
    out.emplace(name, std::move(entry));
  }
  return out;
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = encode_archive(archive);
  // Write-then-rename so an interrupted save never leaves a half archive.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArchiveError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ArchiveError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError("cannot open archive " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_archive(ss.str());
}

void add_tower(Archive& archive, const TowerWeights& weights, const std::string& prefix) {
  for (const auto& [name, p] : weights) {
    ArchiveEntry e{p.value.shape(), {p.value.data().begin(), p.value.data().end()}, p.pretrained};
    if (!archive.emplace(prefix + name, std::move(e)).second) {
      throw ArchiveError("duplicate archive entry '" + prefix + name + "'");
    }
  }
}

TowerWeights extract_tower(const Archive& archive, const std::string& prefix) {
  TowerWeights out;
  for (const auto& [name, e] : archive) {
    if (name.rfind(prefix, 0) != 0) continue;
    out.add(name.substr(prefix.size()), Tensor::from(e.shape, e.data), e.pretrained);
  }
  return out;
}

void save_tower(const std::filesystem::path& path, const TowerWeights& weights) {
  Archive a;
  add_tower(a, weights);
  write_archive(path, a);
}

TowerWeights load_tower(const std::filesystem::path& path) { return extract_tower(read_archive(path)); }

}  // namespace ltt
