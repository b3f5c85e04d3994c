#include "funnel/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace funnel {

namespace {

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

std::size_t mask_budget(double rate, std::size_t n) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ContractError("mask rate must lie in [0, 1]");
  // The small slack keeps products such as 0.15 * 100 from landing just below
  // an integer.
  return static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 1e-9));
}

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.size() >= prefix.size() && s.compare(0, prefix.size(), prefix) == 0;
}

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

}  // namespace

std::vector<std::size_t> maskable_positions(std::span<const TokenId> ids,
                                            std::span<const std::uint8_t> valid) {
  if (ids.size() != valid.size()) throw DimensionError("maskable_positions: ids/valid length mismatch");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!valid[i]) continue;
    if (ids[i] == special::kCls || ids[i] == special::kSep || ids[i] == special::kPad) continue;
    out.push_back(i);
  }
  return out;
}

MaskPlan sample_single_mask(std::span<const TokenId> ids, std::span<const std::uint8_t> valid,
                            double rate, Rng& rng) {
  std::vector<std::size_t> available = maskable_positions(ids, valid);
  const std::size_t k = mask_budget(rate, available.size());
  MaskPlan plan;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = rng.uniform_int(available.size());
    plan.positions.push_back(available[j]);
    available[j] = available.back();
    available.pop_back();
  }
  std::sort(plan.positions.begin(), plan.positions.end());
  for (std::size_t p : plan.positions) plan.originals.push_back(ids[p]);
  return plan;
}

MaskPlan sample_span_mask(std::span<const TokenId> ids,
                          const std::vector<std::vector<std::size_t>>& words, double rate,
                          std::size_t max_span_words, Rng& rng) {
  if (max_span_words == 0) throw ContractError("span mask: max_span_words must be positive");
  std::size_t n = 0;
  for (const auto& w : words) {
    if (w.empty()) throw ContractError("span mask: empty word");
    for (std::size_t p : w) {
      if (p >= ids.size()) throw DimensionError("span mask: word position out of range");
    }
    n += w.size();
  }
  const std::size_t budget = mask_budget(rate, n);

  std::vector<std::size_t> available(words.size());
  std::vector<std::size_t> slot(words.size());
  for (std::size_t w = 0; w < words.size(); ++w) available[w] = slot[w] = w;
  auto take = [&](std::size_t w) {
    const std::size_t j = slot[w];
    available[j] = available.back();
    slot[available[j]] = j;
    available.pop_back();
    slot[w] = kNone;
  };

  std::size_t masked = 0;
  std::vector<std::size_t> chosen;
  while (masked < budget && !available.empty()) {
    const std::size_t span = max_span_words == 1 ? 1 : 1 + rng.uniform_int(max_span_words);
    const std::size_t start = available[rng.uniform_int(available.size())];
    bool overshoot = false;
    for (std::size_t w = start, count = 0; count < span && w < words.size() && slot[w] != kNone;
         ++w, ++count) {
      if (masked + words[w].size() > budget) {
        overshoot = count == 0;
        if (!overshoot) break;
      }
      take(w);
      chosen.push_back(w);
      masked += words[w].size();
      if (overshoot) break;
    }
    if (overshoot) break;
  }

  MaskPlan plan;
  for (std::size_t w : chosen) plan.positions.insert(plan.positions.end(), words[w].begin(), words[w].end());
  std::sort(plan.positions.begin(), plan.positions.end());
  for (std::size_t p : plan.positions) plan.originals.push_back(ids[p]);
  return plan;
}

std::vector<TokenId> apply_mask(std::span<const TokenId> ids, const MaskPlan& plan, TokenId mask_id) {
  std::vector<TokenId> out(ids.begin(), ids.end());
  for (std::size_t p : plan.positions) {
    if (p >= out.size()) throw DimensionError("apply_mask: position out of range");
    out[p] = mask_id;
  }
  return out;
}

Var tied_logits(Var hidden, Var embedding, std::span<const std::size_t> positions) {
  return matmul_nt(gather_rows(hidden, positions), embedding);
}

Var mlm_loss(Var hidden, Var embedding, const MaskPlan& plan) {
  if (plan.empty()) throw ContractError("mlm_loss: no masked positions");
  if (plan.positions.size() != plan.originals.size()) {
    throw ContractError("mlm_loss: positions/originals length mismatch");
  }
  return cross_entropy(tied_logits(hidden, embedding, plan.positions), plan.originals);
}

GradCheckResult mlm_grad_check(const ModelConfig& config, std::size_t seq_len,
                               const GradCheckOptions& options, std::uint64_t seed) {
  if (config.dtype != DType::f64) throw ContractError("gradient check requires f64");
  if (config.dropout != 0.0 || config.attn_dropout != 0.0) {
    throw ContractError("gradient check requires dropout off");
  }
  if (seq_len < 3) throw ContractError("gradient check needs at least one maskable token");
  if (config.vocab_size <= special::kCount) throw ContractError("gradient check needs non-special tokens");
  Rng rng(seed);
  const ParamMap params = init_params(config, rng);
  std::vector<TokenId> ids(seq_len);
  ids.front() = special::kCls;
  ids.back() = special::kSep;
  for (std::size_t i = 1; i + 1 < seq_len; ++i) {
    ids[i] = special::kCount + rng.uniform_int(config.vocab_size - special::kCount);
  }
  const std::vector<std::uint8_t> valid(seq_len, 1);
  MaskPlan plan = sample_single_mask(ids, valid, 0.15, rng);
  if (plan.empty()) {
    const auto candidates = maskable_positions(ids, valid);
    const std::size_t p = candidates[rng.uniform_int(candidates.size())];
    plan.positions = {p};
    plan.originals = {ids[p]};
  }
  const std::vector<TokenId> masked = apply_mask(ids, plan);

  std::vector<std::string> names;
  std::vector<Tensor> tensors;
  for (const auto& [name, t] : params) {
    names.push_back(name);
    tensors.push_back(t);
  }
  const ScalarFn f = [&](Tape& tape, std::span<const Var> vars) {
    std::map<std::string, Var> bound;
    for (std::size_t i = 0; i < names.size(); ++i) bound.emplace(names[i], vars[i]);
    const BoundParams bp = BoundParams::from_vars(tape, std::move(bound));
    const EncoderState enc = encoder_forward(config, bp, masked, valid, nullptr);
    return mlm_loss(token_hidden(config, bp, enc, nullptr), bp[param_names::kWordEmbedding], plan);
  };
  return grad_check(f, tensors, options);
}

ModelConfig generator_config(const ModelConfig& disc, double multiplier) {
  const double scaled = std::round(static_cast<double>(disc.dims().hidden) * multiplier);
  if (!(multiplier > 0.0) || scaled < 2.0 || static_cast<std::size_t>(scaled) % 2 != 0) {
    throw ContractError("generator width must be a positive even integer");
  }
  const auto hidden = static_cast<std::size_t>(scaled);
  ModelConfig gen = disc;
  const std::size_t heads = hidden % 64 == 0 ? hidden / 64 : 1;
  gen.dims_override = ModelDims{hidden, heads, hidden / heads, 4 * hidden};
  return gen;
}

std::map<std::string, Shape> expected_electra_shapes(const ModelConfig& disc, const ModelConfig& gen) {
  std::map<std::string, Shape> shapes = expected_param_shapes(disc);
  for (auto& [name, shape] : expected_param_shapes(gen)) {
    shapes[electra_names::kGeneratorPrefix + name] = shape;
  }
  shapes[electra_names::kHeadWeight] = {disc.dims().hidden, 1};
  shapes[electra_names::kHeadBias] = {1};
  return shapes;
}

ParamMap init_electra_params(const ModelConfig& disc, const ModelConfig& gen, Rng& rng) {
  ParamMap params = init_params(disc, rng);
  for (auto& [name, t] : init_params(gen, rng)) {
    params.emplace(electra_names::kGeneratorPrefix + name, std::move(t));
  }
  Tensor w({disc.dims().hidden, 1}, disc.dtype);
  for (auto& v : w.data()) v = rng.truncated_normal(disc.init_std);
  w.round_to_dtype();
  params.emplace(electra_names::kHeadWeight, std::move(w));
  params.emplace(electra_names::kHeadBias, Tensor({1}, disc.dtype));
  return params;
}

std::vector<TokenId> sample_from_logits(const Tensor& logits, Rng& rng) {
  std::vector<TokenId> out;
  const std::size_t v = logits.cols();
  std::vector<double> p(v);
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < v; ++c) mx = std::max(mx, logits.at(r, c));
    double total = 0.0;
    for (std::size_t c = 0; c < v; ++c) total += p[c] = std::exp(logits.at(r, c) - mx);
    const double u = rng.uniform() * total;
    double acc = 0.0;
    std::size_t pick = v - 1;
    for (std::size_t c = 0; c < v; ++c) {
      acc += p[c];
      if (u < acc) {
        pick = c;
        break;
      }
    }
    out.push_back(pick);
  }
  return out;
}

std::vector<double> replaced_labels(std::span<const TokenId> original, std::span<const TokenId> corrupted) {
  if (original.size() != corrupted.size()) throw DimensionError("replaced_labels: length mismatch");
  std::vector<double> out(original.size());
  for (std::size_t i = 0; i < original.size(); ++i) out[i] = original[i] != corrupted[i] ? 1.0 : 0.0;
  return out;
}

ElectraOutput electra_step(const ModelConfig& disc, const ModelConfig& gen, const BoundParams& params,
                           std::span<const TokenId> ids, std::span<const std::uint8_t> valid,
                           const MaskPlan& plan, double disc_weight, Rng& sample_rng,
                           Rng* dropout_rng) {
  if (plan.empty()) throw ContractError("electra_step: no masked positions");
  std::map<std::string, Var> gen_vars;
  std::map<std::string, Var> disc_vars;
  const std::string prefix = electra_names::kGeneratorPrefix;
  for (const auto& [name, v] : params.vars()) {
    if (starts_with(name, prefix)) {
      gen_vars.emplace(name.substr(prefix.size()), v);
    } else {
      disc_vars.emplace(name, v);
    }
  }
  const BoundParams gp = BoundParams::from_vars(params.tape(), std::move(gen_vars));
  const BoundParams dp = BoundParams::from_vars(params.tape(), std::move(disc_vars));

  ElectraOutput out;
  const std::vector<TokenId> masked = apply_mask(ids, plan);
  const EncoderState genc = encoder_forward(gen, gp, masked, valid, dropout_rng);
  const Var gh = token_hidden(gen, gp, genc, dropout_rng);
  const Var logits = tied_logits(gh, gp[param_names::kWordEmbedding], plan.positions);
  out.gen_loss = cross_entropy(logits, plan.originals);

  const std::vector<TokenId> samples = sample_from_logits(logits.value(), sample_rng);
  out.corrupted.assign(ids.begin(), ids.end());
  for (std::size_t i = 0; i < plan.positions.size(); ++i) out.corrupted[plan.positions[i]] = samples[i];
  out.labels = replaced_labels(ids, out.corrupted);

  const EncoderState denc = encoder_forward(disc, dp, out.corrupted, valid, dropout_rng);
  const Var dh = token_hidden(disc, dp, denc, dropout_rng);
  const Var dlogits = add_bias(matmul(dh, dp[electra_names::kHeadWeight]), dp[electra_names::kHeadBias]);
  std::vector<double> weights(valid.begin(), valid.end());
  out.disc_loss = bce_with_logits(dlogits, out.labels, weights);
  out.total = out.gen_loss + scale(out.disc_loss, disc_weight);
  return out;
}

void AdamW::step(ParamMap& params, const std::map<std::string, Tensor>& grads, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw ContractError("AdamW: no gradient for '" + name + "'");
    const Tensor& g = git->second;
    if (g.shape() != p.shape()) throw DimensionError("AdamW: gradient shape mismatch for '" + name + "'");
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(p.numel(), 0.0);
      v.assign(p.numel(), 0.0);
    }
    const bool decay = p.rank() >= 2;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
      if (decay) update += config_.weight_decay * p[i];
      p[i] -= lr * update;
    }
    p.round_to_dtype();
  }
}

double learning_rate_at(std::size_t step, std::size_t total, std::size_t warmup, double peak) {
  if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (step >= total) return 0.0;
  return peak * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("objective")) {
    const auto s = j.at("objective").get<std::string>();
    if (s == "mlm") c.objective = Objective::Mlm;
    else if (s == "electra") c.objective = Objective::Electra;
    else throw std::invalid_argument("config: objective must be 'mlm' or 'electra', got '" + s + "'");
  }
  if (j.contains("mask_sampler")) {
    const auto s = j.at("mask_sampler").get<std::string>();
    if (s == "single") c.sampler = MaskSampler::Single;
    else if (s == "span") c.sampler = MaskSampler::Span;
    else throw std::invalid_argument("config: mask_sampler must be 'single' or 'span', got '" + s + "'");
  }
  c.mask_rate = j.value("mask_rate", c.mask_rate);
  c.max_span_words = j.value("max_span_words", c.max_span_words);
  c.seq_len = j.value("seq_len", c.seq_len);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.adam.beta1 = j.value("adam_beta1", c.adam.beta1);
  c.adam.beta2 = j.value("adam_beta2", c.adam.beta2);
  c.adam.eps = j.value("adam_eps", c.adam.eps);
  c.adam.weight_decay = j.value("weight_decay", c.adam.weight_decay);
  c.disc_weight = j.value("disc_weight", c.disc_weight);
  c.generator_multiplier = j.value("generator_multiplier", c.generator_multiplier);
  c.seed = j.value("seed", c.seed);

  if (!(c.mask_rate > 0.0 && c.mask_rate < 1.0)) throw std::invalid_argument("config: mask_rate must lie in (0, 1)");
  if (c.max_span_words == 0) throw std::invalid_argument("config: max_span_words must be positive");
  if (!is_power_of_two(c.seq_len) || c.seq_len < 4) {
    throw std::invalid_argument("config: seq_len must be a power of two >= 4");
  }
  if (c.batch_size == 0 || c.steps == 0) throw std::invalid_argument("config: batch_size and steps must be positive");
  if (c.warmup_steps >= c.steps) throw std::invalid_argument("config: warmup_steps must be below steps");
  if (!(c.learning_rate > 0.0)) throw std::invalid_argument("config: learning_rate must be positive");
  return c;
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {
      {"objective", c.objective == Objective::Mlm ? "mlm" : "electra"},
      {"mask_sampler", c.sampler == MaskSampler::Single ? "single" : "span"},
      {"mask_rate", c.mask_rate},
      {"max_span_words", c.max_span_words},
      {"seq_len", c.seq_len},
      {"batch_size", c.batch_size},
      {"steps", c.steps},
      {"learning_rate", c.learning_rate},
      {"warmup_steps", c.warmup_steps},
      {"adam_beta1", c.adam.beta1},
      {"adam_beta2", c.adam.beta2},
      {"adam_eps", c.adam.eps},
      {"weight_decay", c.adam.weight_decay},
      {"disc_weight", c.disc_weight},
      {"generator_multiplier", c.generator_multiplier},
      {"seed", c.seed},
  };
}

TrainResult train_toy(const ModelConfig& model, const TrainConfig& train,
                      const std::vector<std::string>& lines, const Vocab& vocab) {
  if (lines.empty()) throw std::invalid_argument("train: empty corpus");
  if (vocab.size() > model.vocab_size) {
    throw std::invalid_argument("train: vocabulary has " + std::to_string(vocab.size()) +
                                " entries but the model only " + std::to_string(model.vocab_size));
  }
  const Batch data = make_batch(lines, vocab, train.seq_len);
  const bool electra = train.objective == Objective::Electra;
  const ModelConfig gen = electra ? generator_config(model, train.generator_multiplier) : model;

  Rng root(train.seed);
  Rng init_rng = root.fork(1);
  Rng data_rng = root.fork(2);
  Rng mask_rng = root.fork(3);
  Rng dropout_rng = root.fork(4);
  Rng sample_rng = root.fork(5);

  TrainResult result;
  result.params = electra ? init_electra_params(model, gen, init_rng) : init_params(model, init_rng);
  AdamW opt(train.adam);

  auto plan_for = [&](const EncodedLine& row) {
    return train.sampler == MaskSampler::Single
               ? sample_single_mask(row.ids, row.valid, train.mask_rate, mask_rng)
               : sample_span_mask(row.ids, row.words, train.mask_rate, train.max_span_words, mask_rng);
  };

  for (std::size_t step = 0; step < train.steps; ++step) {
    Tape tape;
    const BoundParams bound(tape, result.params, true);
    const std::string at_step = " at step " + std::to_string(step + 1);
    try {
      std::vector<Var> picked_rows;
      std::vector<std::size_t> targets;
      std::vector<Var> totals;
      for (std::size_t b = 0; b < train.batch_size; ++b) {
        const EncodedLine& row = data.rows[data_rng.uniform_int(data.rows.size())];
        const MaskPlan plan = plan_for(row);
        if (plan.empty()) continue;
        if (electra) {
          totals.push_back(electra_step(model, gen, bound, row.ids, row.valid, plan,
                                        train.disc_weight, sample_rng, &dropout_rng)
                               .total);
        } else {
          const std::vector<TokenId> masked = apply_mask(row.ids, plan);
          const EncoderState enc = encoder_forward(model, bound, masked, row.valid, &dropout_rng);
          const Var h = token_hidden(model, bound, enc, &dropout_rng);
          picked_rows.push_back(gather_rows(h, plan.positions));
          targets.insert(targets.end(), plan.originals.begin(), plan.originals.end());
        }
      }
      if (picked_rows.empty() && totals.empty()) {
        throw ContractError("train: step " + std::to_string(step + 1) + " sampled no maskable tokens");
      }
      Var loss;
      if (electra) {
        loss = totals.front();
        for (std::size_t i = 1; i < totals.size(); ++i) loss = loss + totals[i];
        loss = scale(loss, 1.0 / static_cast<double>(totals.size()));
      } else {
        const Var logits = matmul_nt(concat_rows(picked_rows), bound[param_names::kWordEmbedding]);
        loss = cross_entropy(logits, targets);
      }
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw NumericError("train: non-finite loss" + at_step);
      }
      tape.backward(loss);
      std::map<std::string, Tensor> grads;
      for (const auto& [name, v] : bound.vars()) grads.emplace(name, tape.grad(v));
      const double lr = learning_rate_at(step, train.steps, train.warmup_steps, train.learning_rate);
      opt.step(result.params, grads, lr);
      result.trace.push_back({step + 1, value, lr});
    } catch (const NumericError& e) {
      const std::string what = e.what();
      if (what.find(at_step) != std::string::npos) throw;
      throw NumericError("train: diverged" + at_step + ": " + what);
    }
  }
  return result;
}

void write_trace_csv(const std::vector<StepRecord>& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << "step,loss,lr\n";
  char buf[96];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g\n", r.step, r.loss, r.lr);
    out << buf;
  }
  if (!out) throw std::runtime_error("write error on '" + path.string() + "'");
}

nlohmann::json trace_summary(const std::vector<StepRecord>& trace) {
  nlohmann::json j;
  j["steps"] = trace.size();
  if (trace.empty()) return j;
  double lowest = trace.front().loss;
  for (const auto& r : trace) lowest = std::min(lowest, r.loss);
  const std::size_t tail = std::min<std::size_t>(10, trace.size());
  double tail_sum = 0.0;
  for (std::size_t i = trace.size() - tail; i < trace.size(); ++i) tail_sum += trace[i].loss;
  j["initial_loss"] = trace.front().loss;
  j["final_loss"] = trace.back().loss;
  j["min_loss"] = lowest;
  j["mean_loss_last_10"] = tail_sum / static_cast<double>(tail);
  return j;
}

}  // namespace funnel
