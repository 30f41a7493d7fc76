#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "m1lab/data.hpp"
#include "m1lab/model.hpp"
#include "m1lab/tensor.hpp"

namespace m1lab {

struct StageSpec {
  std::uint64_t token_budget = 0;
  std::size_t context_len = 256;
  double rope_base = 1e5;
  std::string data_policy;  // name of the pipeline policy set feeding this stage

  bool operator==(const StageSpec&) const = default;
};

struct TrainConfig {
  double peak_lr = 4e-4;
  double floor_lr = 2e-5;
  std::uint64_t warmup_steps = 2000;
  std::uint64_t stable_steps = 0;
  std::uint64_t decay_steps = 0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip_norm = 1.0;
  std::uint64_t batch_tokens = 16384;
  bool agc = true;
  std::vector<StageSpec> stages;

  // Throws a config error on the first violated invariant.
  void validate() const;
};

// Three stages in the 8K/8K/32K, 1e5 -> 1e6 shape, scaled to desk contexts.
std::vector<StageSpec> desk_stages(std::uint64_t budget1, std::uint64_t budget2, std::uint64_t budget3);

// Linear warmup from 0, plateau at peak_lr, cosine to floor_lr over
// decay_steps, floor_lr afterwards.
double wsd_lr(std::uint64_t step, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Adaptive gradient clipping

enum class AgcDecision { kUpdate, kSkip };

struct AgcState {
  static constexpr std::size_t kCapacity = 100;

  std::deque<double> history;  // norms of the last accepted updates, oldest first
  std::size_t skip_counter = 0;
  std::size_t max_skip = 1;
  std::uint64_t nonfinite_skips = 0;

  double average() const;
};

// Skip when the history is full and norm > 1.2 * average + 0.1, unless
// max_skip consecutive skips already happened. Norms enter the history only
// on UPDATE. A non-finite norm always skips, leaves the counter alone and is
// tallied in nonfinite_skips.
AgcDecision agc_gate(double norm, AgcState& state);

// ---------------------------------------------------------------------------
// AdamW

struct AdamState {
  std::vector<std::vector<double>> m, v;
};

AdamState make_adam_state(const std::vector<Tensor>& params);

// sqrt of the sum of squared gradients over all params (missing grads count 0).
double global_grad_norm(const std::vector<Tensor>& params);

// Clips the joint gradient to grad_clip_norm, then for each param:
//   p -= lr*wd*p;  m = b1*m + (1-b1)*g;  v = b2*v + (1-b2)*g^2;
//   p -= lr * (m / (1-b1^step)) / (sqrt(v / (1-b2^step)) + eps)
// Returns the pre-clip gradient norm.
double adamw_step(const std::vector<Tensor>& params, AdamState& state, std::uint64_t step, double lr, const TrainConfig& config);

// Single-buffer form used by the tabular code paths.
void adamw_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                  std::uint64_t step, double lr, double grad_scale, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Curriculum

struct StageTransition {
  std::size_t from_stage = 0;
  std::size_t to_stage = 0;
  std::uint64_t at_tokens = 0;
  std::size_t context_len = 0;
  double rope_base = 0.0;
};

struct CurriculumPosition {
  std::size_t stage = 0;  // 0-based; past the total budget the last stage stays active
  std::vector<StageTransition> transitions;  // crossed while moving from tokens_before to tokens_now
};

CurriculumPosition curriculum_schedule(const std::vector<StageSpec>& stages, std::uint64_t tokens_now,
                                       std::uint64_t tokens_before = 0);

// ---------------------------------------------------------------------------
// Training loop

struct Batch {
  std::vector<std::vector<TokenId>> sequences;
  std::vector<std::vector<std::uint16_t>> sample_ids;
  // Optional per-position targets (kIgnoreTarget to mask); when empty the
  // next-token targets within each sample are used.
  std::vector<std::vector<std::int32_t>> targets;
  // Multiplies the loss before backward; planted spikes use 100.
  double loss_scale = 1.0;
};

// Yields fixed-size batches in a fixed order; std::nullopt once exhausted.
using BatchSource = std::function<std::optional<Batch>()>;

// Consecutive groups of `sequences_per_batch` sequences from a packed set.
BatchSource packed_batches(const PackedBatch& packed, std::size_t sequences_per_batch);

// Next-token targets: tokens[i+1] when positions i and i+1 belong to the same
// sample, ignore otherwise.
std::vector<std::int32_t> next_token_targets(std::span<const TokenId> tokens, std::span<const std::uint16_t> sample_ids);

// Token-weighted mean next-token loss of a batch as a scalar tensor.
Tensor batch_loss(const Batch& batch, const ModelParams& params, const ModelConfig& config);

struct MetricsRow {
  std::uint64_t step = 0;
  std::uint64_t tokens = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  bool skipped = false;
  std::size_t stage = 0;
};

struct TrainState {
  AdamState adam;
  AgcState agc;
  std::uint64_t step = 0;  // optimizer decisions taken so far
  std::uint64_t updates = 0;  // applied parameter updates (AdamW step counter)
  std::uint64_t tokens = 0;
  std::size_t stage = 0;
  std::vector<MetricsRow> metrics;
};

TrainState make_train_state(const ModelParams& params);

// Consumes batches until stage.token_budget tokens (sequence positions) are
// used. Each step: forward, loss, backward, AGC gate, then AdamW with the WSD
// rate when the gate says UPDATE. A skipped step still consumes its batch.
// The model runs with stage.rope_base.
void run_stage(ModelParams& params, const ModelConfig& config, const StageSpec& stage, const BatchSource& data,
               const TrainConfig& train, TrainState& state);

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows);
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

// ---------------------------------------------------------------------------
// Synthetic pretraining data

// Sparse first-order Markov chain over tokens 1..vocab-1: every token has
// `branching` successors with random weights. Documents have lengths in
// [min_len, max_len].
std::vector<std::vector<TokenId>> markov_corpus(std::size_t vocab, std::size_t n_docs, std::size_t min_len, std::size_t max_len,
                                                std::size_t branching, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Planted-spike stability run

struct SpikeExperimentConfig {
  ModelConfig model = [] {
    ModelConfig m;
    m.n_layers = 2;
    m.layer_pattern = {LayerKind::kSwa, LayerKind::kGlobal};
    return m;
  }();
  std::uint64_t model_seed = 7;
  std::uint64_t data_seed = 1;
  std::size_t steps = 160;
  std::size_t sequences_per_batch = 2;
  std::size_t seq_len = 256;
  // Steps whose batch is replaced by a constant-token batch with its loss
  // scaled by spike_scale; they need a full 100-entry norm history first.
  std::vector<std::uint64_t> spike_steps = {110, 125, 140};
  double spike_scale = 100.0;
  TokenId spike_token = 5;
  double lr = 1e-3;
};

struct SpikeArmResult {
  bool agc = false;
  std::vector<double> eval_loss;  // held-out loss after every step
  std::vector<MetricsRow> metrics;
  // Largest rise of the held-out loss above its running minimum, from the
  // step before the first spike to the end of the run.
  double max_excursion = 0.0;
  std::size_t skipped_spikes = 0;
};

SpikeArmResult run_spike_arm(const SpikeExperimentConfig& config, bool agc);

}  // namespace m1lab
