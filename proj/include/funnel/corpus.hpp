#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace funnel {

using TokenId = std::size_t;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kMask = 4;
inline constexpr std::size_t kCount = 5;
inline constexpr const char* kNames[kCount] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
}  // namespace special

inline bool is_special(TokenId id) { return id < special::kCount; }

/// Dense id <-> token mapping whose first five entries are the specials.
class Vocab {
 public:
  Vocab();
  /// `tokens` must start with the five special names in order.
  explicit Vocab(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  TokenId id(std::string_view token) const;  // kUnk when absent
  bool contains(std::string_view token) const;
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Splits on ASCII whitespace and lowercases ASCII letters; other bytes
/// (UTF-8 continuation included) pass through unchanged.
std::vector<std::string> tokenize(std::string_view line);

/// Specials followed by the (max_size - 5) most frequent tokens, ties broken
/// lexicographically.
Vocab build_vocab(const std::vector<std::string>& lines, std::size_t max_size);

/// One encoded sequence of fixed length T.
struct EncodedLine {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> valid;  // 0 at padding
  /// Token positions of each word, in order. Whitespace words are single
  /// tokens here; the span sampler accepts any partition.
  std::vector<std::vector<std::size_t>> words;
};

/// [CLS] tokens... [SEP] [PAD]...; at most T - 2 tokens are kept.
EncodedLine encode_line(std::string_view line, const Vocab& vocab, std::size_t t);

/// Tokens of the non-special ids, in order.
std::vector<std::string> decode(const std::vector<TokenId>& ids, const Vocab& vocab);

struct Batch {
  std::vector<EncodedLine> rows;
  std::size_t seq_len = 0;
};

Batch make_batch(const std::vector<std::string>& lines, const Vocab& vocab, std::size_t t);

/// Throws std::runtime_error naming the path on failure.
std::vector<std::string> read_lines(const std::filesystem::path& path);
void save_vocab(const Vocab& vocab, const std::filesystem::path& path);
Vocab load_vocab(const std::filesystem::path& path);

/// `num_sentences` distinct sentences of `words_per_sentence` words drawn from
/// w0 .. w{word_types - 1}, each repeated `repeats` times in a fixed order.
std::vector<std::string> synthetic_corpus(std::size_t num_sentences,
                                          std::size_t words_per_sentence,
                                          std::size_t word_types, std::size_t repeats,
                                          std::uint64_t seed);

}  // namespace funnel
