#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "m1lab/model.hpp"
#include "m1lab/trainer.hpp"

namespace m1lab {

// Token layout for synthetic needle-in-a-haystack. Token 0 is reserved;
// filler, key and value alphabets are disjoint half-open ranges, so a key
// token can only ever occur inside the needle or the query.
struct NiahSpec {
  std::size_t vocab = 128;
  std::size_t key_len = 2;
  std::size_t value_len = 2;
  TokenId filler_begin = 1, filler_end = 64;
  TokenId key_begin = 64, key_end = 96;
  TokenId value_begin = 96, value_end = 128;

  void validate() const;
  std::size_t needle_len() const { return key_len + value_len; }
};

// Filler [1, V/2), keys [V/2, 3V/4), values [3V/4, V).
NiahSpec default_niah_spec(std::size_t vocab);

struct NiahCase {
  std::vector<TokenId> haystack;  // filler with the needle (key then value) embedded
  std::vector<TokenId> key;
  std::vector<TokenId> value;  // expected answer
  std::size_t needle_pos = 0;  // index of the first key token in the haystack
  double depth = 0.0;

  // haystack followed by the query (the key again)
  std::vector<TokenId> prompt() const;
  // Positions between the last query token and the first value token of
  // the needle; SWA layers with window w cannot see it when this is >= w.
  std::size_t needle_distance() const;
};

// Needle at floor(depth * (L - needle_len)); deterministic per seed.
NiahCase gen_niah_case(std::size_t length, double depth, std::size_t vocab, std::uint64_t seed);
NiahCase gen_niah_case(std::size_t length, double depth, const NiahSpec& spec, std::uint64_t seed);

// `per_bucket` cases per depth decile, depths uniform within the decile.
std::vector<NiahCase> niah_suite(std::size_t length, std::size_t per_bucket, const NiahSpec& spec, std::uint64_t seed);

struct NiahBucket {
  double depth_lo = 0.0, depth_hi = 0.0;
  std::size_t cases = 0, correct = 0;
  double accuracy() const { return cases ? static_cast<double>(correct) / static_cast<double>(cases) : 0.0; }
};

struct NiahReport {
  std::size_t evaluated = 0, correct = 0, skipped = 0;
  std::array<NiahBucket, 10> per_depth{};
  // cases whose needle lies beyond the SWA window of the evaluated model
  std::size_t beyond_window_cases = 0, beyond_window_correct = 0;
  std::size_t window = 0, context_len = 0;

  double accuracy() const { return evaluated ? static_cast<double>(correct) / static_cast<double>(evaluated) : 0.0; }
  double beyond_window_accuracy() const {
    return beyond_window_cases ? static_cast<double>(beyond_window_correct) / static_cast<double>(beyond_window_cases) : 0.0;
  }
};

// Greedy decoding of value_len tokens after the prompt through the KV cache;
// exact, order-sensitive match. A case whose prompt plus answer does not fit
// in context_len is skipped and tallied.
NiahReport eval_niah(const ModelParams& params, const ModelConfig& config, const std::vector<NiahCase>& cases,
                     std::size_t context_len);

// Greedy continuation of `prompt` by n tokens.
std::vector<TokenId> greedy_decode(const ModelParams& params, const ModelConfig& config, const std::vector<TokenId>& prompt,
                                   std::size_t n);

// JSON {accuracy, evaluated, correct, skipped, per_depth, beyond_window,
// protocol, config}; `config_echo` lands under "config".
std::string niah_report_json(const NiahReport& report, const std::vector<std::pair<std::string, std::string>>& config_echo);
// depth_lo,depth_hi,cases,correct,accuracy per decile.
void write_niah_csv(std::ostream& out, const NiahReport& report);

struct PerplexityResult {
  double perplexity = 0.0;
  double mean_nll = 0.0;
  std::size_t tokens = 0;  // predicted positions
};

// exp(mean next-token cross-entropy); every document runs on its own, so no
// prediction crosses a document boundary.
PerplexityResult eval_perplexity(const ModelParams& params, const ModelConfig& config,
                                 const std::vector<std::vector<TokenId>>& corpus);

// ---------------------------------------------------------------------------
// Retrieval training data and the hybrid-attention experiment

// Training sequences of exactly seq_len tokens: a filler haystack holding
// 1..max_needles needles (distinct final key tokens), then every key
// queried again in random order, each followed by its value. Only the value
// tokens after the queries carry targets.
struct RetrievalCorpusSpec {
  NiahSpec niah;
  std::size_t seq_len = 256;
  std::size_t max_needles = 4;
  // Filler tokens kept free between the last needle and the first query;
  // with min_gap >= window every needle is out of SWA reach.
  std::size_t min_gap = 0;
  // Distinct value tokens across the sequence. Off, values are drawn with
  // replacement, so an answer already given in the query block says nothing
  // about the next one.
  bool distinct_values = true;
};

Batch retrieval_batch(const RetrievalCorpusSpec& spec, std::size_t sequences, Rng& rng);
// Endless deterministic stream of retrieval batches.
BatchSource retrieval_batches(const RetrievalCorpusSpec& spec, std::size_t sequences_per_batch, std::uint64_t seed);

enum class RetrievalArm { kHybrid, kAllSwa, kNoConv };

std::string_view retrieval_arm_name(RetrievalArm arm);

// One curriculum stage: sequences of seq_len tokens with up to max_needles
// needles, min_gap filler between the last needle and the queries.
struct RetrievalStage {
  std::size_t seq_len = 256;
  std::size_t max_needles = 4;
  std::size_t min_gap = 0;
  std::size_t steps = 0;
};

// Stages parse from "seq_len:max_needles:min_gap:steps,..." and render back.
std::vector<RetrievalStage> parse_retrieval_stages(const std::string& text);
std::string render_retrieval_stages(const std::vector<RetrievalStage>& stages);

struct RetrievalExperimentConfig {
  ModelConfig model;  // desk defaults: [SWA,SWA,SWA,GLOBAL], d_model 64, window 64
  std::size_t context_len = 256;  // eval context; the last stage should match it
  // Short contexts first. From scratch at 256 the global layer's attention is
  // spread too thin to find the needle within the time budget.
  std::vector<RetrievalStage> stages{{48, 4, 0, 1500}, {96, 4, 64, 1500}, {256, 4, 64, 1000}};
  std::size_t sequences_per_batch = 4;
  // Schedule spans the sum of stage steps; stable_steps is filled in.
  TrainConfig train = [] {
    TrainConfig t;
    t.peak_lr = 1e-3;
    t.floor_lr = 1e-4;
    t.warmup_steps = 20;
    t.decay_steps = 800;
    t.weight_decay = 0.0;
    return t;
  }();
  std::uint64_t model_seed = 1;
  std::uint64_t data_seed = 7;  // stage i draws from data_seed + i
  std::uint64_t eval_seed = 3;
  std::size_t eval_per_bucket = 20;
  std::size_t key_len = 1;
  std::size_t value_len = 1;
  bool distinct_values = false;
  // Initial weight of the K/V conv taps on earlier positions; negative keeps
  // the build_model init. At 1 a key row starts out carrying its predecessor.
  double conv_history_tap = 1.0;

  std::size_t total_steps() const;
};

// The model config an arm trains: hybrid as given, all-SWA with every layer
// windowed, no-conv with the K/V convolution removed.
ModelConfig retrieval_arm_model(const RetrievalExperimentConfig& config, RetrievalArm arm);

struct RetrievalArmResult {
  RetrievalArm arm = RetrievalArm::kHybrid;
  NiahReport report;
  std::vector<MetricsRow> metrics;
  double seconds = 0.0;
};

RetrievalArmResult run_retrieval_arm(const RetrievalExperimentConfig& config, RetrievalArm arm);

}  // namespace m1lab
