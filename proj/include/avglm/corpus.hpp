#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "avglm/batch.hpp"
#include "avglm/error.hpp"
#include "avglm/rng.hpp"

namespace avglm {

// Frequency-ranked vocabulary with fixed reserved ids. The on-disk form is
// one token per line, line number == id, reserved tokens first; the file is
// byte-exactly reproducible and fingerprinted for checkpoint compatibility.
class Vocabulary {
 public:
  static constexpr int pad_id = 0;
  static constexpr int unk_id = 1;
  static constexpr int eos_id = 2;
  static constexpr std::size_t reserved_count = 3;

  Vocabulary() {
    for (const char* t : {"<pad>", "<unk>", "<eos>"}) add(t);
  }

  static Vocabulary build(const std::vector<std::string>& lines, std::size_t cap) {
    if (cap < reserved_count)
      throw ContractError("vocabulary cap " + std::to_string(cap) +
                          " cannot hold the reserved tokens");
    std::unordered_map<std::string, std::size_t> freq;
    bool saw_token = false;
    for (const auto& line : lines) {
      std::istringstream ls(line);
      std::string tok;
      while (ls >> tok) {
        saw_token = true;
        if (tok == "<pad>" || tok == "<unk>" || tok == "<eos>") continue;  // always reserved
        ++freq[tok];
      }
    }
    if (!saw_token) throw DataError("cannot build a vocabulary from an empty corpus");

    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });

    Vocabulary v;
    const std::size_t keep = std::min(ranked.size(), cap - reserved_count);
    for (std::size_t i = 0; i < keep; ++i) v.add(ranked[i].first);
    return v;
  }

  int id_of(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? unk_id : it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) != 0; }

  const std::string& token_of(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw IndexError("vocabulary id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }

  std::size_t size() const { return tokens_.size(); }

  std::string serialize() const {
    std::string out;
    for (const auto& t : tokens_) {
      out += t;
      out += '\n';
    }
    return out;
  }

  std::uint64_t hash() const {
    const std::string s = serialize();
    return fnv1a(s.data(), s.size());
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open vocabulary file for writing: " + path);
    f << serialize();
    if (!f) throw IoError("write failed: " + path);
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open vocabulary file: " + path);
    Vocabulary v;
    v.tokens_.clear();
    v.ids_.clear();
    std::string line;
    while (std::getline(f, line)) v.add(line);
    if (v.tokens_.size() < reserved_count || v.tokens_[0] != "<pad>" || v.tokens_[1] != "<unk>" ||
        v.tokens_[2] != "<eos>")
      throw DataError("vocabulary file " + path + " does not start with the reserved tokens");
    return v;
  }

 private:
  void add(const std::string& token) {
    ids_.emplace(token, static_cast<int>(tokens_.size()));
    tokens_.push_back(token);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// Whitespace tokenization of one sentence line into ids.
inline std::vector<int> encode_tokens(const Vocabulary& vocab, const std::string& line) {
  std::vector<int> ids;
  std::istringstream ls(line);
  std::string tok;
  while (ls >> tok) ids.push_back(vocab.id_of(tok));
  return ids;
}

// Fixed-length row: truncate at L, otherwise append eos (when enabled and
// room permits) then pad. The mask covers real tokens including eos.
inline std::pair<std::vector<int>, std::vector<std::uint8_t>> pad_truncate(
    const std::vector<int>& ids, std::size_t length, bool append_eos = true) {
  if (length == 0) throw ContractError("pad_truncate: length must be positive");
  std::vector<int> row(length, Vocabulary::pad_id);
  std::vector<std::uint8_t> mask(length, 0);
  const std::size_t real = std::min(ids.size(), length);
  for (std::size_t i = 0; i < real; ++i) {
    row[i] = ids[i];
    mask[i] = 1;
  }
  if (append_eos && real < length && real == ids.size()) {
    row[real] = Vocabulary::eos_id;
    mask[real] = 1;
  }
  return {std::move(row), std::move(mask)};
}

struct EncodedCorpus {
  std::size_t rows = 0;
  std::size_t length = 0;
  std::vector<int> tokens;         // rows × length
  std::vector<std::uint8_t> mask;  // rows × length
  std::size_t skipped_empty = 0;   // empty sentences are dropped, counted
};

inline EncodedCorpus encode_corpus(const Vocabulary& vocab, const std::vector<std::string>& lines,
                                   std::size_t length, bool append_eos = true) {
  EncodedCorpus out;
  out.length = length;
  for (const auto& line : lines) {
    auto ids = encode_tokens(vocab, line);
    if (ids.empty()) {
      ++out.skipped_empty;
      continue;
    }
    auto [row, mask] = pad_truncate(ids, length, append_eos);
    out.tokens.insert(out.tokens.end(), row.begin(), row.end());
    out.mask.insert(out.mask.end(), mask.begin(), mask.end());
    ++out.rows;
  }
  return out;
}

// Consecutive, non-overlapping, order-preserving groups. Training drops the
// ragged final group; evaluation keeps it so perplexity covers every token.
inline std::vector<EncodedBatch> batches(const EncodedCorpus& corpus, std::size_t batch_size,
                                         bool drop_ragged) {
  if (batch_size == 0) throw ContractError("batches: batch_size must be positive");
  std::vector<EncodedBatch> out;
  for (std::size_t start = 0; start < corpus.rows; start += batch_size) {
    const std::size_t rows = std::min(batch_size, corpus.rows - start);
    if (rows < batch_size && drop_ragged) break;
    EncodedBatch b;
    b.rows = rows;
    b.length = corpus.length;
    const std::size_t begin = start * corpus.length, end = (start + rows) * corpus.length;
    b.tokens.assign(corpus.tokens.begin() + begin, corpus.tokens.begin() + end);
    b.mask.assign(corpus.mask.begin() + begin, corpus.mask.begin() + end);
    out.push_back(std::move(b));
  }
  return out;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open corpus file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline std::vector<std::string> decode_tokens(const Vocabulary& vocab, const std::vector<int>& ids) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(vocab.token_of(id));
  return out;
}

}  // namespace avglm
