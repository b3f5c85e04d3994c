#include "funnel/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "funnel/checkpoint.hpp"
#include "funnel/corpus.hpp"
#include "funnel/costmodel.hpp"
#include "funnel/funnel.hpp"
#include "funnel/objectives.hpp"

namespace funnel::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr double kAttnTolerance = 1e-8;
constexpr double kGradTolerance = 1e-4;

struct AnalyzeArgs {
  std::string layout;
  std::size_t seq_len = 512;
  std::string mode = "finetune";
  std::size_t vocab = 30522;
  std::string format = "text";
};

struct CompareArgs {
  std::vector<std::string> layouts;
  std::string baseline;
  std::size_t seq_len = 512;
  std::string mode = "finetune";
  std::size_t vocab = 30522;
  std::string format = "text";
};

struct VerifyArgs {
  std::size_t trials = 100;
  std::size_t max_t = 16;
  std::size_t max_d = 16;
  std::uint64_t seed = 0;
  std::string format = "text";
};

struct GradArgs {
  std::string layout;
  std::size_t seq_len = 8;
  std::string objective = "mlm";
  std::size_t vocab = 32;
  double dropout = 0.0;
  std::size_t coords = 16;
  std::uint64_t seed = 0;
  std::string format = "text";
};

struct TrainArgs {
  std::string config;
  std::string corpus;
  std::string out;
  std::optional<std::size_t> steps;
};

struct EncodeArgs {
  std::string config;
  std::string checkpoint;
  std::string input;
  std::string vocab;
  std::string dump = "shapes";
  std::optional<std::size_t> seq_len;
  std::string format = "text";
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string fmt_sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

/// Layout tokens without an H field take the baseline's hidden size, so
/// "B6-6-6" next to "L12H768" reads as "B6-6-6H768".
LayoutSpec layout_with_hidden(const std::string& text, std::size_t hidden) {
  if (text.find('H') != std::string::npos) return parse_layout(text);
  std::string s = text;
  const std::string h = "H" + std::to_string(hidden);
  const auto d = s.find('D');
  if (d == std::string::npos) {
    s += h;
  } else {
    s.insert(d, h);
  }
  return parse_layout(s);
}

int cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
  const CostReport r = analyze(parse_layout(a.layout), a.vocab, a.seq_len, parse_cost_mode(a.mode));
  if (a.format == "json") {
    out << cost_report_to_json(r).dump(2) << '\n';
  } else {
    out << cost_report_to_text(r);
  }
  return kExitOk;
}

int cmd_compare(const CompareArgs& a, std::ostream& out) {
  const LayoutSpec baseline = parse_layout(a.baseline);
  std::vector<LayoutSpec> layouts;
  for (const auto& s : a.layouts) layouts.push_back(layout_with_hidden(s, baseline.hidden));
  const CompareReport r = compare(layouts, baseline, a.vocab, a.seq_len, parse_cost_mode(a.mode));
  if (a.format == "json") {
    out << compare_report_to_json(r).dump(2) << '\n';
  } else {
    out << compare_report_to_text(r);
  }
  return kExitOk;
}

int cmd_verify_attn(const VerifyArgs& a, std::ostream& out, std::ostream& err) {
  if (a.trials == 0) err << "warning: --trials 0 checks nothing\n";
  const EquivalenceReport r = check_position_term_equivalence(a.trials, a.max_t, a.max_d, a.seed);
  const double worst = std::max(r.max_dev_gather, r.max_dev_factorized);
  const bool pass = worst <= kAttnTolerance;
  if (a.format == "json") {
    out << json{{"trials", r.trials},
                {"seed", a.seed},
                {"max_dev_gather", r.max_dev_gather},
                {"max_dev_factorized", r.max_dev_factorized},
                {"tolerance", kAttnTolerance},
                {"pass", pass}}
               .dump(2)
        << '\n';
  } else {
    out << "trials              " << r.trials << '\n'
        << "max_dev_gather      " << fmt_sci(r.max_dev_gather) << '\n'
        << "max_dev_factorized  " << fmt_sci(r.max_dev_factorized) << '\n'
        << "result              " << (pass ? "pass" : "FAIL") << '\n';
  }
  return pass ? kExitOk : kExitVerificationFailed;
}

int cmd_gradcheck(const GradArgs& a, std::ostream& out) {
  ModelConfig c;
  c.layout = parse_layout(a.layout);
  c.vocab_size = a.vocab;
  c.dtype = DType::f64;
  c.dropout = a.dropout;
  c.attn_dropout = a.dropout;
  const GradCheckResult r = mlm_grad_check(c, a.seq_len, step_ladder(a.coords, a.seed), a.seed);
  const bool pass = r.max_rel_error < kGradTolerance;
  const std::string worst = std::next(expected_param_shapes(c).begin(), static_cast<long>(r.worst_param))->first;
  if (a.format == "json") {
    out << json{{"layout", format_layout(c.layout)},
                {"seq_len", a.seq_len},
                {"objective", a.objective},
                {"coords_checked", r.coords_checked},
                {"max_rel_error", r.max_rel_error},
                {"worst_param", worst},
                {"worst_index", r.worst_index},
                {"tolerance", kGradTolerance},
                {"pass", pass}}
               .dump(2)
        << '\n';
  } else {
    out << "layout          " << format_layout(c.layout) << '\n'
        << "coords_checked  " << r.coords_checked << '\n'
        << "max_rel_error   " << fmt_sci(r.max_rel_error) << '\n'
        << "worst           " << worst << '[' << r.worst_index << "] analytic " << fmt_sci(r.analytic)
        << " numeric " << fmt_sci(r.numeric) << '\n'
        << "result          " << (pass ? "pass" : "FAIL") << '\n';
  }
  return pass ? kExitOk : kExitVerificationFailed;
}

std::vector<std::string> non_empty_lines(const fs::path& path) {
  std::vector<std::string> lines;
  for (auto& l : read_lines(path))
    if (!tokenize(l).empty()) lines.push_back(std::move(l));
  return lines;
}

int cmd_train_toy(const TrainArgs& a, std::ostream& out) {
  json cfg = load_json(a.config);
  if (a.steps) {
    cfg["steps"] = *a.steps;
    if (cfg.value("warmup_steps", TrainConfig{}.warmup_steps) >= *a.steps) cfg["warmup_steps"] = *a.steps / 10;
  }
  const ModelConfig model = model_config_from_json(cfg);
  const TrainConfig train = train_config_from_json(cfg);
  const std::vector<std::string> lines = non_empty_lines(a.corpus);
  if (lines.empty()) throw std::invalid_argument("corpus '" + a.corpus + "' has no tokens");
  const Vocab vocab = build_vocab(lines, model.vocab_size);

  const TrainResult result = train_toy(model, train, lines, vocab);

  const fs::path dir(a.out);
  fs::create_directories(dir);
  write_trace_csv(result.trace, dir / "loss.csv");
  save_checkpoint(result.params, dir / "checkpoint.ftnt");
  save_vocab(vocab, dir / "vocab.txt");
  json merged = model_config_to_json(model);
  merged.update(train_config_to_json(train));
  save_json(merged, dir / "config.json");
  json summary = trace_summary(result.trace);
  summary["vocab_size"] = vocab.size();
  summary["out"] = dir.string();
  save_json(summary, dir / "summary.json");
  out << summary.dump(2) << '\n';
  return kExitOk;
}

json shape_json(const Var& v) { return json::array({v.shape()[0], v.shape()[1]}); }

int cmd_encode(const EncodeArgs& a, std::ostream& out) {
  const json cfg = load_json(a.config);
  ModelConfig model = model_config_from_json(cfg);
  model.dropout = 0.0;
  model.attn_dropout = 0.0;
  const TrainConfig train = train_config_from_json(cfg);
  const std::size_t t = a.seq_len.value_or(train.seq_len);

  const auto expected = train.objective == Objective::Electra
                            ? expected_electra_shapes(model, generator_config(model, train.generator_multiplier))
                            : expected_param_shapes(model);
  const ParamMap params = load_checkpoint(a.checkpoint, expected);
  const fs::path vocab_path = a.vocab.empty() ? fs::path(a.checkpoint).parent_path() / "vocab.txt" : fs::path(a.vocab);
  const Vocab vocab = load_vocab(vocab_path);
  if (vocab.size() > model.vocab_size) throw std::invalid_argument("vocabulary is larger than the model's");

  const std::vector<std::string> lines = non_empty_lines(a.input);
  json records = json::array();
  std::string text;
  for (std::size_t n = 0; n < lines.size(); ++n) {
    const EncodedLine e = encode_line(lines[n], vocab, t);
    Tape tape;
    const BoundParams bound(tape, params, false);
    const EncoderState enc = encoder_forward(model, bound, e.ids, e.valid, nullptr);
    json rec = {{"line", n}};
    text += "line " + std::to_string(n) + ":";
    if (a.dump == "shapes") {
      json shapes = json::array();
      for (const auto& b : enc.blocks) {
        shapes.push_back(shape_json(b.hidden));
        text += " [" + std::to_string(b.hidden.shape()[0]) + ", " + std::to_string(b.hidden.shape()[1]) + "]";
      }
      rec["shapes"] = shapes;
      text += '\n';
    } else if (a.dump == "cls") {
      const Tensor& h = enc.final_block().hidden.value();
      std::vector<double> cls(h.data().begin(), h.data().begin() + static_cast<long>(h.cols()));
      for (double v : cls) text += ' ' + fmt(v);
      rec["cls"] = cls;
      text += '\n';
    } else {
      const Tensor h = token_hidden(model, bound, enc, nullptr).value();
      json rows = json::array();
      text += " [" + std::to_string(h.rows()) + ", " + std::to_string(h.cols()) + "]\n";
      for (std::size_t r = 0; r < h.rows(); ++r) {
        std::vector<double> row(h.data().begin() + static_cast<long>(r * h.cols()),
                                h.data().begin() + static_cast<long>((r + 1) * h.cols()));
        for (std::size_t c = 0; c < row.size(); ++c) text += (c ? " " : "  ") + fmt(row[c]);
        text += '\n';
        rows.push_back(row);
      }
      rec["tokens"] = rows;
    }
    records.push_back(rec);
  }
  if (a.format == "json") {
    out << json{{"dump", a.dump}, {"seq_len", t}, {"lines", records}}.dump(2) << '\n';
  } else {
    out << text;
  }
  return kExitOk;
}

int fail(std::ostream& err, const char* category, const std::string& message, int code) {
  std::string one_line = message;
  for (char& c : one_line)
    if (c == '\n') c = ' ';
  err << "error: " << category << ": " << one_line << '\n';
  return code;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Funnel encoder reference tools", "funnel"};
  app.require_subcommand(1);
  const auto formats = CLI::IsMember({"text", "json"});
  const auto modes = CLI::IsMember({"finetune", "pretrain"});

  AnalyzeArgs analyze_args;
  auto* analyze_cmd = app.add_subcommand("analyze", "Parameter and FLOPs report for one layout");
  analyze_cmd->add_option("--layout", analyze_args.layout, "Layout, e.g. B6-6-6H768")->required();
  analyze_cmd->add_option("--seq-len", analyze_args.seq_len, "Sequence length for exact FLOPs")->capture_default_str();
  analyze_cmd->add_option("--mode", analyze_args.mode)->check(modes)->capture_default_str();
  analyze_cmd->add_option("--vocab", analyze_args.vocab)->capture_default_str();
  analyze_cmd->add_option("--format", analyze_args.format)->check(formats)->capture_default_str();

  CompareArgs compare_args;
  auto* compare_cmd = app.add_subcommand("compare", "Cost ratios of layouts against a baseline");
  compare_cmd->add_option("--layouts", compare_args.layouts, "Comma-separated layouts")->required()->delimiter(',');
  compare_cmd->add_option("--baseline", compare_args.baseline)->required();
  compare_cmd->add_option("--seq-len", compare_args.seq_len)->capture_default_str();
  compare_cmd->add_option("--mode", compare_args.mode)->check(modes)->capture_default_str();
  compare_cmd->add_option("--vocab", compare_args.vocab)->capture_default_str();
  compare_cmd->add_option("--format", compare_args.format)->check(formats)->capture_default_str();

  VerifyArgs verify_args;
  auto* verify_cmd = app.add_subcommand("verify-attn", "Naive vs gather vs factorized position term");
  verify_cmd->add_option("--trials", verify_args.trials)->capture_default_str();
  verify_cmd->add_option("--max-t", verify_args.max_t)->check(CLI::PositiveNumber)->capture_default_str();
  verify_cmd->add_option("--max-d", verify_args.max_d)->check(CLI::Range(2, 4096))->capture_default_str();
  verify_cmd->add_option("--seed", verify_args.seed)->capture_default_str();
  verify_cmd->add_option("--format", verify_args.format)->check(formats)->capture_default_str();

  GradArgs grad_args;
  auto* grad_cmd = app.add_subcommand("gradcheck", "End-to-end finite-difference check (f64)");
  grad_cmd->add_option("--layout", grad_args.layout)->required();
  grad_cmd->add_option("--seq-len", grad_args.seq_len)->capture_default_str();
  grad_cmd->add_option("--objective", grad_args.objective)->check(CLI::IsMember({"mlm"}))->capture_default_str();
  grad_cmd->add_option("--vocab", grad_args.vocab)->capture_default_str();
  grad_cmd->add_option("--dropout", grad_args.dropout, "Must be 0")->capture_default_str();
  grad_cmd->add_option("--coords", grad_args.coords, "Coordinates probed per tensor (0 = all)")->capture_default_str();
  grad_cmd->add_option("--seed", grad_args.seed)->capture_default_str();
  grad_cmd->add_option("--format", grad_args.format)->check(formats)->capture_default_str();

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train-toy", "Train on a small corpus");
  train_cmd->add_option("--config", train_args.config, "Model and training JSON")->required();
  train_cmd->add_option("--corpus", train_args.corpus, "Text file, one sequence per line")->required();
  train_cmd->add_option("--steps", train_args.steps, "Overrides the config's steps");
  train_cmd->add_option("--out", train_args.out, "Output directory")->required();

  EncodeArgs encode_args;
  auto* encode_cmd = app.add_subcommand("encode", "Run a trained checkpoint on text");
  encode_cmd->add_option("--config", encode_args.config)->required();
  encode_cmd->add_option("--checkpoint", encode_args.checkpoint)->required();
  encode_cmd->add_option("--input", encode_args.input)->required();
  encode_cmd->add_option("--vocab", encode_args.vocab, "Defaults to vocab.txt next to the checkpoint");
  encode_cmd->add_option("--dump", encode_args.dump)->check(CLI::IsMember({"shapes", "cls", "tokens"}))->capture_default_str();
  encode_cmd->add_option("--seq-len", encode_args.seq_len, "Defaults to the config's seq_len");
  encode_cmd->add_option("--format", encode_args.format)->check(formats)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return fail(err, "usage", e.what(), kExitUsage);
  }

  try {
    if (*analyze_cmd) return cmd_analyze(analyze_args, out);
    if (*compare_cmd) return cmd_compare(compare_args, out);
    if (*verify_cmd) return cmd_verify_attn(verify_args, out, err);
    if (*grad_cmd) return cmd_gradcheck(grad_args, out);
    if (*train_cmd) return cmd_train_toy(train_args, out);
    if (*encode_cmd) return cmd_encode(encode_args, out);
    return fail(err, "usage", "no command", kExitUsage);
  } catch (const LayoutParseError& e) {
    return fail(err, "layout", e.what(), kExitUsage);
  } catch (const LayoutValidationError& e) {
    return fail(err, "layout", e.what(), kExitUsage);
  } catch (const CheckpointError& e) {
    return fail(err, "checkpoint", e.what(), kExitUsage);
  } catch (const ContractError& e) {
    return fail(err, "contract", e.what(), kExitUsage);
  } catch (const NumericError& e) {
    return fail(err, "numeric", e.what(), kExitVerificationFailed);
  } catch (const nlohmann::json::exception& e) {
    return fail(err, "input", e.what(), kExitUsage);
  } catch (const std::invalid_argument& e) {
    return fail(err, "input", e.what(), kExitUsage);
  } catch (const std::out_of_range& e) {
    return fail(err, "input", e.what(), kExitUsage);
  } catch (const std::runtime_error& e) {
    return fail(err, "io", e.what(), kExitUsage);
  } catch (const std::exception& e) {
    return fail(err, "internal", e.what(), kExitVerificationFailed);
  }
}

}  // namespace funnel::cli
