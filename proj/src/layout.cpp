#include "funnel/layout.hpp"

#include <cctype>
#include <limits>

namespace funnel {

std::size_t LayoutSpec::total_encoder_layers() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.total_layers();
  return n;
}

std::size_t LayoutSpec::unique_encoder_layers() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.unique_layers;
  return n;
}

namespace {

class Cursor {
 public:
  explicit Cursor(std::string_view s) : s_(s) {}

  bool done() const { return pos_ >= s_.size(); }
  std::size_t pos() const { return pos_; }
  bool peek(char c) const { return !done() && s_[pos_] == c; }

  void expect(char c) {
    if (!peek(c)) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  bool accept(char c) {
    if (!peek(c)) return false;
    ++pos_;
    return true;
  }

  std::size_t positive_int() {
    const std::size_t start = pos_;
    std::size_t value = 0;
    while (!done() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) {
      const std::size_t digit = static_cast<std::size_t>(s_[pos_] - '0');
      if (value > (std::numeric_limits<std::size_t>::max() - digit) / 10) {
        fail("integer overflow");
      }
      value = value * 10 + digit;
      ++pos_;
    }
    if (pos_ == start) fail("expected a number");
    if (value == 0) {
      pos_ = start;
      fail("expected a positive number");
    }
    return value;
  }

  [[noreturn]] void fail(const std::string& what) const {
    std::string msg = "layout parse error at byte " + std::to_string(pos_) + ": " + what;
    if (!done()) {
      msg += " (found '";
      msg += s_[pos_];
      msg += "')";
    } else {
      msg += " (found end of input)";
    }
    msg += " in \"" + std::string(s_) + "\"";
    throw LayoutParseError(msg, pos_);
  }

 private:
  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace

void validate_layout(const LayoutSpec& spec) {
  if (spec.blocks.empty()) throw LayoutValidationError("layout has no blocks");
  for (const auto& b : spec.blocks) {
    if (b.unique_layers == 0 || b.repeat == 0) {
      throw LayoutValidationError("every block needs at least one layer");
    }
  }
  if (spec.hidden == 0 || spec.hidden % kHeadDim != 0) {
    throw LayoutValidationError("hidden size " + std::to_string(spec.hidden) +
                                " is not a positive multiple of the head size " +
                                std::to_string(kHeadDim));
  }
  if (spec.plain && (spec.blocks.size() != 1 || spec.blocks[0].repeat != 1 || spec.decoder_layers)) {
    throw LayoutValidationError("plain L-layouts have one untied block and no decoder");
  }
}

LayoutSpec parse_layout(std::string_view text) {
  Cursor cur(text);
  LayoutSpec spec;
  if (cur.accept('L')) {
    spec.plain = true;
    spec.blocks.push_back({cur.positive_int(), 1});
    cur.expect('H');
    spec.hidden = cur.positive_int();
  } else if (cur.accept('B')) {
    do {
      BlockSpec block;
      block.unique_layers = cur.positive_int();
      if (cur.accept('x')) block.repeat = cur.positive_int();
      spec.blocks.push_back(block);
    } while (cur.accept('-'));
    cur.expect('H');
    spec.hidden = cur.positive_int();
    if (cur.accept('D')) spec.decoder_layers = cur.positive_int();
  } else {
    cur.fail("expected 'L' or 'B'");
  }
  if (!cur.done()) cur.fail("unexpected trailing input");
  validate_layout(spec);
  return spec;
}

std::string format_layout(const LayoutSpec& spec) {
  std::string out;
  if (spec.plain) {
    out = "L" + std::to_string(spec.blocks.at(0).unique_layers);
  } else {
    out = "B";
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
      if (i) out += '-';
      out += std::to_string(spec.blocks[i].unique_layers);
      if (spec.blocks[i].repeat != 1) out += "x" + std::to_string(spec.blocks[i].repeat);
    }
  }
  out += "H" + std::to_string(spec.hidden);
  if (spec.decoder_layers) out += "D" + std::to_string(spec.decoder_layers);
  return out;
}

}  // namespace funnel
