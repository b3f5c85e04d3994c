#include "funnel/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <stdexcept>

#include "funnel/rng.hpp"

namespace funnel {

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

}  // namespace

Vocab::Vocab() : Vocab(std::vector<std::string>(special::kNames, special::kNames + special::kCount)) {}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < special::kCount) throw std::invalid_argument("vocab: missing special tokens");
  for (std::size_t i = 0; i < special::kCount; ++i) {
    if (tokens_[i] != special::kNames[i]) {
      throw std::invalid_argument("vocab: id " + std::to_string(i) + " must be " +
                                  special::kNames[i] + ", found '" + tokens_[i] + "'");
    }
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw std::invalid_argument("vocab: empty token at id " + std::to_string(i));
    if (!index_.emplace(tokens_[i], i).second) {
      throw std::invalid_argument("vocab: duplicate token '" + tokens_[i] + "'");
    }
  }
}

TokenId Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? special::kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

const std::string& Vocab::token(TokenId id) const {
  if (id >= tokens_.size()) throw std::out_of_range("vocab: id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

std::vector<std::string> tokenize(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    std::size_t j = i;
    while (j < line.size() && !is_space(line[j])) ++j;
    if (j > i) {
      std::string word(line.substr(i, j - i));
      for (char& c : word)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
      out.push_back(std::move(word));
    }
    i = j;
  }
  return out;
}

Vocab build_vocab(const std::vector<std::string>& lines, std::size_t max_size) {
  if (max_size < special::kCount) {
    throw std::invalid_argument("vocab: max_size must be at least " + std::to_string(special::kCount));
  }
  std::map<std::string, std::size_t> counts;
  for (const auto& line : lines)
    for (auto& w : tokenize(line)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [w, n] : counts) {
    if (std::find(special::kNames, special::kNames + special::kCount, w) !=
        special::kNames + special::kCount) {
      continue;
    }
    ranked.emplace_back(w, n);
  }
  // counts is already sorted by token, so a stable sort on frequency keeps
  // lexicographic order among ties.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens(special::kNames, special::kNames + special::kCount);
  for (const auto& [w, n] : ranked) {
    if (tokens.size() >= max_size) break;
    tokens.push_back(w);
  }
  return Vocab(std::move(tokens));
}

EncodedLine encode_line(std::string_view line, const Vocab& vocab, std::size_t t) {
  if (!is_power_of_two(t) || t < 2) {
    throw std::invalid_argument("encode_line: length " + std::to_string(t) +
                                " must be a power of two >= 2");
  }
  EncodedLine out;
  out.ids.push_back(special::kCls);
  for (const auto& w : tokenize(line)) {
    if (out.ids.size() + 1 >= t) break;
    out.words.push_back({out.ids.size()});
    out.ids.push_back(vocab.id(w));
  }
  out.ids.push_back(special::kSep);
  out.valid.assign(out.ids.size(), 1);
  out.ids.resize(t, special::kPad);
  out.valid.resize(t, 0);
  return out;
}

std::vector<std::string> decode(const std::vector<TokenId>& ids, const Vocab& vocab) {
  std::vector<std::string> out;
  for (TokenId id : ids)
    if (!is_special(id)) out.push_back(vocab.token(id));
  return out;
}

Batch make_batch(const std::vector<std::string>& lines, const Vocab& vocab, std::size_t t) {
  Batch b;
  b.seq_len = t;
  for (const auto& line : lines) b.rows.push_back(encode_line(line, vocab, t));
  return b;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  if (in.bad()) throw std::runtime_error("read error on '" + path.string() + "'");
  return lines;
}

void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  for (const auto& t : vocab.tokens()) out << t << '\n';
  if (!out) throw std::runtime_error("write error on '" + path.string() + "'");
}

Vocab load_vocab(const std::filesystem::path& path) { return Vocab(read_lines(path)); }

std::vector<std::string> synthetic_corpus(std::size_t num_sentences,
                                          std::size_t words_per_sentence,
                                          std::size_t word_types, std::size_t repeats,
                                          std::uint64_t seed) {
  if (word_types == 0) throw std::invalid_argument("synthetic corpus: no word types");
  Rng rng(seed);
  std::vector<std::string> sentences;
  for (std::size_t s = 0; s < num_sentences; ++s) {
    std::string line;
    for (std::size_t w = 0; w < words_per_sentence; ++w) {
      if (w) line += ' ';
      line += "w" + std::to_string(rng.uniform_int(word_types));
    }
    sentences.push_back(std::move(line));
  }
  std::vector<std::string> lines;
  for (std::size_t r = 0; r < repeats; ++r) lines.insert(lines.end(), sentences.begin(), sentences.end());
  return lines;
}

}  // namespace funnel
