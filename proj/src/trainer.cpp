#include "m1lab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <ostream>

#include "m1lab/error.hpp"
#include "m1lab/ops.hpp"
#include "m1lab/rng.hpp"

namespace m1lab {

void TrainConfig::validate() const {
  if (!(floor_lr > 0.0 && floor_lr <= peak_lr)) fail(ErrorKind::kConfig, "need 0 < floor_lr <= peak_lr");
  if (warmup_steps < 1) fail(ErrorKind::kConfig, "warmup_steps must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail(ErrorKind::kConfig, "betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail(ErrorKind::kConfig, "adam_eps must be positive");
  if (weight_decay < 0.0) fail(ErrorKind::kConfig, "weight_decay must be nonnegative");
  if (!(grad_clip_norm > 0.0)) fail(ErrorKind::kConfig, "grad_clip_norm must be positive");
  if (batch_tokens < 1) fail(ErrorKind::kConfig, "batch_tokens must be positive");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].token_budget == 0) fail(ErrorKind::kConfig, "stage " + std::to_string(i + 1) + " has zero token_budget");
    if (stages[i].context_len == 0) fail(ErrorKind::kConfig, "stage " + std::to_string(i + 1) + " has zero context_len");
  }
}

std::vector<StageSpec> desk_stages(std::uint64_t budget1, std::uint64_t budget2, std::uint64_t budget3) {
  return {{budget1, 256, 1e5, "general"}, {budget2, 256, 1e5, "upsampled"}, {budget3, 1024, 1e6, "anneal"}};
}

double wsd_lr(std::uint64_t step, const TrainConfig& c) {
  if (step < c.warmup_steps) return c.peak_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  const std::uint64_t decay_start = c.warmup_steps + c.stable_steps;
  if (step < decay_start) return c.peak_lr;
  if (step >= decay_start + c.decay_steps) return c.floor_lr;
  const double t = static_cast<double>(step - decay_start) / static_cast<double>(c.decay_steps);
  return c.floor_lr + 0.5 * (c.peak_lr - c.floor_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

double AgcState::average() const {
  if (history.empty()) return 0.0;
  return std::accumulate(history.begin(), history.end(), 0.0) / static_cast<double>(history.size());
}

AgcDecision agc_gate(double norm, AgcState& s) {
  if (!std::isfinite(norm)) {
    ++s.nonfinite_skips;
    return AgcDecision::kSkip;
  }
  if (norm < 0.0) fail(ErrorKind::kParameter, "gradient norm must be nonnegative");
  if (s.history.size() >= AgcState::kCapacity && norm > 1.2 * s.average() + 0.1 && s.skip_counter < s.max_skip) {
    ++s.skip_counter;
    return AgcDecision::kSkip;
  }
  s.history.push_back(norm);
  while (s.history.size() > AgcState::kCapacity) s.history.pop_front();
  s.skip_counter = 0;
  return AgcDecision::kUpdate;
}

AdamState make_adam_state(const std::vector<Tensor>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

double global_grad_norm(const std::vector<Tensor>& params) {
  double ss = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) ss += g * g;
  }
  return std::sqrt(ss);
}

void adamw_update(std::span<double> p, std::span<const double> g, std::span<double> m, std::span<double> v, std::uint64_t step,
                  double lr, double grad_scale, const TrainConfig& c) {
  if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
    fail(ErrorKind::kState, "adamw: parameter, gradient and moment sizes differ");
  }
  if (step < 1) fail(ErrorKind::kState, "adamw: step must be >= 1");
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
  const double decay = 1.0 - lr * c.weight_decay;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g[i] * grad_scale;
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
    p[i] = p[i] * decay - lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.adam_eps);
  }
}

double adamw_step(const std::vector<Tensor>& params, AdamState& state, std::uint64_t step, double lr, const TrainConfig& c) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) fail(ErrorKind::kState, "adamw: moment count differs from parameter count");
  const double norm = global_grad_norm(params);
  const double scale = norm > c.grad_clip_norm ? c.grad_clip_norm / norm : 1.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    if (state.m[i].size() != p.numel()) fail(ErrorKind::kState, "adamw: moment " + std::to_string(i) + " has wrong size");
    const std::vector<double> zeros = p.has_grad() ? std::vector<double>{} : std::vector<double>(p.numel(), 0.0);
    std::span<const double> g = p.has_grad() ? p.grad() : std::span<const double>(zeros);
    adamw_update(p.mutable_data(), g, state.m[i], state.v[i], step, lr, scale, c);
  }
  return norm;
}

CurriculumPosition curriculum_schedule(const std::vector<StageSpec>& stages, std::uint64_t tokens_now, std::uint64_t tokens_before) {
  if (stages.empty()) fail(ErrorKind::kConfig, "curriculum needs at least one stage");
  auto stage_at = [&stages](std::uint64_t tokens) {
    std::uint64_t end = 0;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      end += stages[i].token_budget;
      if (tokens < end) return i;
    }
    return stages.size() - 1;
  };
  CurriculumPosition pos;
  pos.stage = stage_at(tokens_now);
  std::size_t from = stage_at(tokens_before);
  std::uint64_t start = 0;
  for (std::size_t i = 0; i < pos.stage; ++i) {
    start += stages[i].token_budget;
    if (i + 1 > from) {
      pos.transitions.push_back({i, i + 1, start, stages[i + 1].context_len, stages[i + 1].rope_base});
    }
  }
  return pos;
}

BatchSource packed_batches(const PackedBatch& packed, std::size_t sequences_per_batch) {
  if (sequences_per_batch < 1) fail(ErrorKind::kParameter, "sequences_per_batch must be positive");
  auto data = std::make_shared<PackedBatch>(packed);
  auto cursor = std::make_shared<std::size_t>(0);
  return [data, cursor, sequences_per_batch]() -> std::optional<Batch> {
    if (*cursor + sequences_per_batch > data->sequences.size()) return std::nullopt;
    Batch b;
    for (std::size_t i = 0; i < sequences_per_batch; ++i, ++*cursor) {
      b.sequences.push_back(data->sequences[*cursor]);
      b.sample_ids.push_back(data->sample_ids[*cursor]);
    }
    return b;
  };
}

std::vector<std::int32_t> next_token_targets(std::span<const TokenId> tokens, std::span<const std::uint16_t> sample_ids) {
  if (!sample_ids.empty() && sample_ids.size() != tokens.size()) fail(ErrorKind::kDimension, "sample_ids length differs from tokens");
  std::vector<std::int32_t> t(tokens.size(), kIgnoreTarget);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    const bool same = sample_ids.empty() || (sample_ids[i] != 0 && sample_ids[i] == sample_ids[i + 1]);
    if (same) t[i] = static_cast<std::int32_t>(tokens[i + 1]);
  }
  return t;
}

Tensor batch_loss(const Batch& batch, const ModelParams& params, const ModelConfig& config) {
  std::size_t counted = 0;
  std::vector<std::vector<std::int32_t>> targets;
  for (std::size_t s = 0; s < batch.sequences.size(); ++s) {
    std::span<const std::uint16_t> sid;
    if (!batch.sample_ids.empty()) sid = batch.sample_ids[s];
    if (!batch.targets.empty()) {
      if (batch.targets.size() != batch.sequences.size() || batch.targets[s].size() != batch.sequences[s].size())
        fail(ErrorKind::kDimension, "batch targets must match the sequences");
      targets.push_back(batch.targets[s]);
    } else {
      targets.push_back(next_token_targets(batch.sequences[s], sid));
    }
    for (auto t : targets.back()) counted += t != kIgnoreTarget;
  }
  Tensor total = Tensor::scalar(0.0);
  if (counted == 0) return total;
  for (std::size_t s = 0; s < batch.sequences.size(); ++s) {
    std::size_t n = 0;
    for (auto t : targets[s]) n += t != kIgnoreTarget;
    if (n == 0) continue;
    std::span<const std::uint16_t> sid;
    if (!batch.sample_ids.empty()) sid = batch.sample_ids[s];
    Tensor logits = model_forward(batch.sequences[s], params, config, sid);
    total = add(total, scale(masked_cross_entropy(logits, targets[s]), static_cast<double>(n) / static_cast<double>(counted)));
  }
  return total;
}

TrainState make_train_state(const ModelParams& params) {
  TrainState s;
  s.adam = make_adam_state(params.tensors());
  return s;
}

void run_stage(ModelParams& params, const ModelConfig& config, const StageSpec& stage, const BatchSource& data,
               const TrainConfig& train, TrainState& state) {
  train.validate();
  ModelConfig cfg = config;
  cfg.rope_base = stage.rope_base;
  const auto tensors = params.tensors();
  std::uint64_t used = 0;
  while (used < stage.token_budget) {
    auto batch = data();
    if (!batch) {
      fail(ErrorKind::kData, "data exhausted after " + std::to_string(used) + " of " + std::to_string(stage.token_budget) +
                                 " stage tokens (" + std::to_string(state.tokens) + " consumed in total)");
    }
    std::uint64_t batch_tokens = 0;
    for (const auto& seq : batch->sequences) {
      if (seq.size() != stage.context_len) {
        fail(ErrorKind::kConfig, "packed sequence length " + std::to_string(seq.size()) + " differs from stage context_len " +
                                     std::to_string(stage.context_len));
      }
      batch_tokens += seq.size();
    }
    params.zero_grad();
    Tensor loss = batch_loss(*batch, params, cfg);
    Tensor scaled = batch->loss_scale == 1.0 ? loss : scale(loss, batch->loss_scale);
    if (scaled.requires_grad()) scaled.backward();
    const double norm = global_grad_norm(tensors);

    MetricsRow row;
    row.step = state.step + 1;
    row.loss = loss.item();
    row.grad_norm = norm;
    row.lr = wsd_lr(row.step, train);
    row.stage = state.stage;
    const AgcDecision decision = train.agc ? agc_gate(norm, state.agc) : AgcDecision::kUpdate;
    if (decision == AgcDecision::kUpdate && std::isfinite(norm)) {
      ++state.updates;
      adamw_step(tensors, state.adam, state.updates, row.lr, train);
    } else {
      row.skipped = true;
    }
    ++state.step;
    used += batch_tokens;
    state.tokens += batch_tokens;
    row.tokens = state.tokens;
    state.metrics.push_back(row);
  }
  params.zero_grad();
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << "step,tokens,loss,grad_norm,lr,skipped,stage\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%llu,%llu,%.17g,%.17g,%.17g,%d,%zu\n", static_cast<unsigned long long>(r.step),
                  static_cast<unsigned long long>(r.tokens), r.loss, r.grad_norm, r.lr, r.skipped ? 1 : 0, r.stage + 1);
    out << buf;
  }
  if (!out) fail(ErrorKind::kIo, "failed writing metrics");
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path + " for writing");
  write_metrics_csv(out, rows);
}

std::vector<std::vector<TokenId>> markov_corpus(std::size_t vocab, std::size_t n_docs, std::size_t min_len, std::size_t max_len,
                                                std::size_t branching, std::uint64_t seed) {
  if (vocab < 3 || branching < 1 || min_len < 1 || max_len < min_len) fail(ErrorKind::kParameter, "bad markov_corpus arguments");
  Rng rng(seed);
  const std::size_t n = vocab - 1;  // tokens 1..vocab-1, 0 stays free for padding
  std::vector<std::vector<TokenId>> next(n);
  std::vector<std::vector<double>> cdf(n);
  for (std::size_t t = 0; t < n; ++t) {
    double acc = 0.0;
    for (std::size_t b = 0; b < branching; ++b) {
      next[t].push_back(static_cast<TokenId>(1 + rng.below(n)));
      acc += 0.2 + rng.uniform();
      cdf[t].push_back(acc);
    }
    for (auto& c : cdf[t]) c /= acc;
  }
  std::vector<std::vector<TokenId>> docs(n_docs);
  for (auto& d : docs) {
    const std::size_t len = min_len + rng.below(max_len - min_len + 1);
    TokenId cur = static_cast<TokenId>(1 + rng.below(n));
    d.push_back(cur);
    while (d.size() < len) {
      const double u = rng.uniform();
      const auto& c = cdf[cur - 1];
      std::size_t k = 0;
      while (k + 1 < c.size() && u >= c[k]) ++k;
      cur = next[cur - 1][k];
      d.push_back(cur);
    }
  }
  return docs;
}

SpikeArmResult run_spike_arm(const SpikeExperimentConfig& cfg, bool agc) {
  if (cfg.spike_steps.empty()) fail(ErrorKind::kParameter, "spike run needs at least one spike step");
  const std::size_t vocab = cfg.model.vocab_size;
  const auto packed = pack_sequences(markov_corpus(vocab, 1000, 64, 400, 4, cfg.data_seed), cfg.seq_len, 0);
  const auto held = pack_sequences(markov_corpus(vocab, 2, cfg.seq_len, cfg.seq_len, 4, cfg.data_seed), cfg.seq_len, 0);
  Batch eval;
  eval.sequences = held.sequences;
  eval.sample_ids = held.sample_ids;

  TrainConfig tc;
  tc.peak_lr = cfg.lr;
  tc.floor_lr = cfg.lr / 10.0;
  tc.warmup_steps = 10;
  tc.stable_steps = cfg.steps;
  tc.batch_tokens = cfg.sequences_per_batch * cfg.seq_len;
  tc.agc = agc;
  const StageSpec stage{tc.batch_tokens, cfg.seq_len, cfg.model.rope_base, "spike"};

  auto params = build_model(cfg.model, cfg.model_seed);
  auto state = make_train_state(params);
  auto source = packed_batches(packed, cfg.sequences_per_batch);
  SpikeArmResult r;
  r.agc = agc;
  for (std::uint64_t step = 1; step <= cfg.steps; ++step) {
    const bool spike = std::find(cfg.spike_steps.begin(), cfg.spike_steps.end(), step) != cfg.spike_steps.end();
    BatchSource one = [&]() -> std::optional<Batch> {
      auto b = source();
      if (b && spike) {
        b->loss_scale = cfg.spike_scale;
        for (auto& seq : b->sequences) std::fill(seq.begin(), seq.end(), cfg.spike_token);
      }
      return b;
    };
    run_stage(params, cfg.model, stage, one, tc, state);
    if (spike && state.metrics.back().skipped) ++r.skipped_spikes;
    NoGradGuard guard;
    r.eval_loss.push_back(batch_loss(eval, params, cfg.model).item());
  }
  const std::uint64_t first = *std::min_element(cfg.spike_steps.begin(), cfg.spike_steps.end());
  const std::size_t start = first >= 2 ? first - 2 : 0;  // eval_loss[i] follows step i+1
  double low = r.eval_loss[start];
  for (std::size_t t = start + 1; t < r.eval_loss.size(); ++t) {
    r.max_excursion = std::max(r.max_excursion, r.eval_loss[t] - low);
    low = std::min(low, r.eval_loss[t]);
  }
  r.metrics = std::move(state.metrics);
  return r;
}

}  // namespace m1lab
