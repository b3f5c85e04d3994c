#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace funnel {

/// `unique_layers` parameter sets, each applied `repeat` times in a row.
struct BlockSpec {
  std::size_t unique_layers = 1;
  std::size_t repeat = 1;

  std::size_t total_layers() const { return unique_layers * repeat; }
  /// Parameter set used by layer `t` (0-based) of this block.
  std::size_t param_set_for_layer(std::size_t t) const { return t / repeat; }

  bool operator==(const BlockSpec&) const = default;
};

inline constexpr std::size_t kHeadDim = 64;

/// Parsed architecture layout. Block m (0-based) runs at length T / 2^m.
struct LayoutSpec {
  std::vector<BlockSpec> blocks;
  std::size_t hidden = 0;
  std::size_t decoder_layers = 0;
  /// True for the `L<n>H<d>` form (a single block, printed without `B`).
  bool plain = false;

  std::size_t num_blocks() const { return blocks.size(); }
  std::size_t head_dim() const { return kHeadDim; }
  std::size_t heads() const { return hidden / kHeadDim; }
  std::size_t ffn_inner() const { return 4 * hidden; }
  std::size_t embed_dim() const { return hidden; }
  std::size_t total_encoder_layers() const;
  std::size_t unique_encoder_layers() const;

  bool operator==(const LayoutSpec&) const = default;
};

/// Malformed layout string; `offset` is the byte where parsing stopped.
class LayoutParseError : public std::invalid_argument {
 public:
  LayoutParseError(const std::string& what, std::size_t offset)
      : std::invalid_argument(what), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Well-formed layout that violates a sizing rule (e.g. hidden % 64 != 0).
class LayoutValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Grammar (case-sensitive, no whitespace):
///   layout := "L" int "H" int | "B" spec ("-" spec)* "H" int ("D" int)?
///   spec   := int | int "x" int
LayoutSpec parse_layout(std::string_view text);
std::string format_layout(const LayoutSpec& spec);
void validate_layout(const LayoutSpec& spec);

}  // namespace funnel
