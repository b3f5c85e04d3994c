#include "funnel/costmodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "funnel/model.hpp"

namespace funnel {

namespace {

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

void require_same_hidden(const LayoutSpec& a, const LayoutSpec& b) {
  if (a.hidden != b.hidden) {
    throw ContractError("layouts " + format_layout(a) + " and " + format_layout(b) +
                        " have different hidden sizes");
  }
}

std::string fixed2(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", round2(x));
  return buf;
}

}  // namespace

CostMode parse_cost_mode(const std::string& name) {
  if (name == "finetune") return CostMode::Finetune;
  if (name == "pretrain") return CostMode::Pretrain;
  throw std::invalid_argument("unknown mode '" + name + "' (expected finetune or pretrain)");
}

const char* cost_mode_name(CostMode mode) { return mode == CostMode::Finetune ? "finetune" : "pretrain"; }

double round2(double x) {
  // The 1e-9 nudge absorbs representation error in values such as 1.005.
  return std::floor(x * 100.0 + 0.5 + 1e-9) / 100.0;
}

double effective_layers(const LayoutSpec& layout, CostMode mode) {
  double total = 0.0;
  double scale = 1.0;
  for (const auto& b : layout.blocks) {
    total += static_cast<double>(b.total_layers()) * scale;
    scale /= 2.0;
  }
  if (mode == CostMode::Pretrain) total += static_cast<double>(layout.decoder_layers);
  return total;
}

double flops_ratio(const LayoutSpec& a, const LayoutSpec& b, CostMode mode) {
  require_same_hidden(a, b);
  return effective_layers(a, mode) / effective_layers(b, mode);
}

std::uint64_t layer_madds(std::uint64_t tq, std::uint64_t tk, std::uint64_t d, AttnVariant variant) {
  std::uint64_t m = tq * d * d + 2 * tk * d * d + tq * d * d;
  m += 2 * tq * tk * d;
  switch (variant) {
    case AttnVariant::Factorized:
      m += 2 * tq * d * d + 4 * tq * tk * d;
      break;
    case AttnVariant::GatherShift:
      m += (tq + tk - 1) * d * d + tq * (tq + tk - 1) * d;
      break;
    case AttnVariant::Naive:
      m += tq * tk * d * d + tq * tk * d;
      break;
  }
  m += 8 * tq * d * d;
  return m;
}

std::uint64_t flops_exact(const LayoutSpec& layout, std::size_t t, CostMode mode, AttnVariant variant) {
  const std::size_t blocks = layout.blocks.size();
  if (!is_power_of_two(t) || (blocks > 0 && t < (std::size_t{1} << (blocks - 1)))) {
    throw ContractError("flops_exact: T = " + std::to_string(t) + " must be a power of two >= 2^(blocks-1)");
  }
  const std::uint64_t d = layout.hidden;
  std::uint64_t madds = 0;
  std::uint64_t prev = t;
  for (std::size_t m = 0; m < blocks; ++m) {
    const std::uint64_t len = t >> m;
    const std::size_t n = layout.blocks[m].total_layers();
    for (std::size_t l = 0; l < n; ++l) {
      const std::uint64_t tk = (m > 0 && l == 0) ? prev : len;
      madds += layer_madds(len, tk, d, variant);
    }
    prev = len;
  }
  if (mode == CostMode::Pretrain) madds += layout.decoder_layers * layer_madds(t, t, d, variant);
  return 2 * madds;
}

CostReport analyze(const LayoutSpec& layout, std::size_t vocab, std::size_t t, CostMode mode) {
  if (vocab == 0) throw ContractError("analyze: vocab must be positive");
  ModelConfig c;
  c.layout = layout;
  c.vocab_size = vocab;
  if (mode == CostMode::Finetune) c.layout.decoder_layers = 0;

  CostReport r;
  r.layout = format_layout(layout);
  r.mode = mode;
  r.vocab = vocab;
  r.seq_len = t;
  for (const auto& [name, shape] : expected_param_shapes(c)) {
    const std::uint64_t n = shape_numel(shape);
    r.params_total += n;
    if (starts_with(name, "encoder.block") || starts_with(name, "decoder.layer")) r.params_transformer += n;
    if (name == param_names::kWordEmbedding) r.params_embedding += n;
  }
  r.effective_layers = effective_layers(layout, mode);
  r.flops_exact = flops_exact(layout, t, mode);
  return r;
}

nlohmann::json cost_report_to_json(const CostReport& r) {
  return {
      {"layout", r.layout},
      {"mode", cost_mode_name(r.mode)},
      {"vocab", r.vocab},
      {"seq_len", r.seq_len},
      {"params_total", r.params_total},
      {"params_transformer", r.params_transformer},
      {"params_embedding", r.params_embedding},
      {"effective_layers", r.effective_layers},
      {"flops_exact", r.flops_exact},
  };
}

std::string cost_report_to_text(const CostReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "layout              %s\n"
                "mode                %s\n"
                "vocab               %zu\n"
                "seq_len             %zu\n"
                "params_total        %llu\n"
                "params_transformer  %llu\n"
                "params_embedding    %llu\n"
                "effective_layers    %g\n"
                "flops_exact         %llu\n",
                r.layout.c_str(), cost_mode_name(r.mode), r.vocab, r.seq_len,
                static_cast<unsigned long long>(r.params_total),
                static_cast<unsigned long long>(r.params_transformer),
                static_cast<unsigned long long>(r.params_embedding), r.effective_layers,
                static_cast<unsigned long long>(r.flops_exact));
  return buf;
}

CompareReport compare(const std::vector<LayoutSpec>& layouts, const LayoutSpec& baseline,
                      std::size_t vocab, std::size_t t, CostMode mode) {
  CompareReport rep;
  rep.baseline = format_layout(baseline);
  rep.mode = mode;
  rep.seq_len = t;
  rep.vocab = vocab;
  const CostReport base = analyze(baseline, vocab, t, mode);
  for (const auto& l : layouts) {
    require_same_hidden(l, baseline);
    const CostReport r = analyze(l, vocab, t, mode);
    rep.rows.push_back({r.layout, flops_ratio(l, baseline, mode),
                        static_cast<double>(r.flops_exact) / static_cast<double>(base.flops_exact),
                        static_cast<double>(r.params_total) / static_cast<double>(base.params_total)});
  }
  return rep;
}

std::string compare_report_to_text(const CompareReport& r) {
  std::size_t width = std::string("layout").size();
  for (const auto& row : r.rows) width = std::max(width, row.layout.size());
  const std::string exact_head = "FLOPs(exact,T=" + std::to_string(r.seq_len) + ")";
  auto pad = [](std::string s, std::size_t w) {
    s.resize(std::max(s.size(), w), ' ');
    return s;
  };
  std::string out = "baseline " + r.baseline + ", mode " + cost_mode_name(r.mode) + ", vocab " +
                    std::to_string(r.vocab) + "\n";
  out += pad("layout", width) + "  " + pad("FLOPs(linear)", 13) + "  " + exact_head + "  #Params\n";
  for (const auto& row : r.rows) {
    out += pad(row.layout, width) + "  " + pad(fixed2(row.flops_linear), 13) + "  " +
           pad(fixed2(row.flops_exact), exact_head.size()) + "  " + fixed2(row.params) + "\n";
  }
  return out;
}

nlohmann::json compare_report_to_json(const CompareReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({
        {"layout", row.layout},
        {"flops_ratio_linear", round2(row.flops_linear)},
        {"flops_ratio_exact", round2(row.flops_exact)},
        {"params_ratio", round2(row.params)},
        {"flops_ratio_linear_raw", row.flops_linear},
        {"flops_ratio_exact_raw", row.flops_exact},
        {"params_ratio_raw", row.params},
    });
  }
  return {{"baseline", r.baseline},
          {"mode", cost_mode_name(r.mode)},
          {"seq_len", r.seq_len},
          {"vocab", r.vocab},
          {"rows", rows}};
}

}  // namespace funnel
