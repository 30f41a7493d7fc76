#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "m1lab/ops.hpp"

namespace m1lab {

// A question with a fixed answer and an enumerable chain-of-thought space:
// every CoT is a sequence of cot_length symbols from [0, alphabet_size).
struct EloTask {
  static constexpr std::size_t kMaxCots = 4096;

  std::vector<TokenId> question;
  std::vector<TokenId> answer;
  std::size_t alphabet_size = 2;
  std::size_t cot_length = 1;
  std::size_t answer_vocab = 2;  // answer tokens live in [0, answer_vocab)

  void validate() const;
  std::size_t cot_count() const;  // alphabet_size^cot_length
  bool operator==(const EloTask&) const = default;
};

// CoT number `index` as symbols, most significant first.
std::vector<TokenId> cot_sequence(const EloTask& task, std::size_t index);

// Tabular policy for one task. pi(CoT|Q) = softmax(cot_logits);
// pi(A|Q,CoT) = prod_t softmax(answer_logits[cot][t])[A_t]. A logit of -inf
// gives an exact zero.
struct EloPolicy {
  std::vector<double> cot_logits;  // [cots]
  std::vector<double> answer_logits;  // [cots, answer.size(), answer_vocab]
};

EloPolicy uniform_policy(const EloTask& task);
EloPolicy random_policy(const EloTask& task, std::uint64_t seed, double scale = 1.0);
void validate_policy(const EloPolicy& policy, const EloTask& task);

// log pi(CoT|Q) for every CoT; normalised in log space.
std::vector<double> cot_log_probs(const EloPolicy& policy, const EloTask& task);
// log pi(A|Q,CoT) for every CoT; -inf where the answer is impossible.
std::vector<double> answer_log_probs(const EloPolicy& policy, const EloTask& task);

struct EloValue {
  double value = 0.0;  // +inf when infinite
  bool infinite = false;
};

// -log sum_CoT pi(CoT|Q) pi(A|Q,CoT), by enumeration with log-sum-exp.
EloValue elo_loss_exact(const EloPolicy& policy, const EloTask& task);
// -sum_CoT pi(CoT|Q) log pi(A|Q,CoT). CoTs with zero probability contribute 0.
EloValue upper_bound_exact(const EloPolicy& policy, const EloTask& task);
// pi(A|Q) = exp(-L_ELO).
double answer_probability(const EloPolicy& policy, const EloTask& task);

enum class BaselineKind { kZero, kBatchMean, kLeaveOneOut };

struct BaselineSpec {
  BaselineKind kind = BaselineKind::kLeaveOneOut;
};

std::string_view baseline_name(BaselineKind kind);
BaselineKind parse_baseline(std::string_view name);

// Per-sample baselines for scores s_i = log pi(A|Q,CoT_i).
std::vector<double> baseline_compute(std::span<const double> scores, BaselineSpec spec);

// kCotOnly differentiates through pi(CoT|Q) alone, answer table held fixed.
// kJoint also returns the gradient for the answer table.
enum class EloGradientMode { kCotOnly, kJoint };

struct EloGradient {
  std::vector<double> cot;  // d/d cot_logits
  std::vector<double> answer;  // d/d answer_logits; empty for kCotOnly
};

// Closed form of grad L_upper:
//   d/d theta_j = -p_j (s_j - sum_c p_c s_c)
//   d/d phi[c][t][v] = -p_c (1[v = A_t] - softmax(phi[c][t])_v)
EloGradient upper_bound_gradient(const EloPolicy& policy, const EloTask& task, EloGradientMode mode = EloGradientMode::kCotOnly);

// The score-function estimator with each CoT weighted by its probability
// instead of sampled, for a constant baseline b:
//   -sum_c p_c (s_c - b) grad log pi(c|Q)
EloGradient elo_gradient_enumerated(const EloPolicy& policy, const EloTask& task, double baseline = 0.0,
                                    EloGradientMode mode = EloGradientMode::kCotOnly);

// -(1/n) sum_i (s_i - b_i) grad log pi(CoT_i|Q) for given draws and
// per-sample baselines. In kJoint mode the answer part is
// -(1/n) sum_i grad s_i.
EloGradient elo_gradient_from_samples(const EloPolicy& policy, const EloTask& task, std::span<const std::size_t> draws,
                                      std::span<const double> baselines, EloGradientMode mode = EloGradientMode::kCotOnly);

// The same with CoT_i ~ pi(CoT|Q) drawn from the seed and b_i from `baseline`.
// A sampled CoT with zero answer probability aborts with a numeric error.
EloGradient elo_gradient_estimate(const EloPolicy& policy, const EloTask& task, std::size_t n_samples, BaselineSpec baseline,
                                  std::uint64_t seed, EloGradientMode mode = EloGradientMode::kCotOnly);

struct EloStepRow {
  std::size_t step = 0;
  double l_elo = 0.0;
  double l_upper = 0.0;
  double answer_prob = 0.0;
};

// Plain gradient descent on L_upper with the enumeration-weighted gradient.
// Row 0 is the starting policy, row k the policy after k updates.
std::vector<EloStepRow> train_elo(EloPolicy& policy, const EloTask& task, std::size_t steps, double lr,
                                  EloGradientMode mode = EloGradientMode::kCotOnly);

// A task whose answer is reachable only through "correct" CoTs: the first CoT
// symbol must equal sum(question) mod alphabet_size. Those CoTs put most of
// the answer mass on the right tokens, all others get random answer logits.
// The CoT logits start as small noise.
struct EloToyProblem {
  EloTask task;
  EloPolicy policy;
};

EloToyProblem reasoning_toy_problem(std::uint64_t seed, std::size_t alphabet_size = 4, std::size_t cot_length = 3,
                                    std::size_t answer_vocab = 8, std::size_t answer_length = 2);

// JSON lines: {"question": [...], "answer": [...], "alphabet_size": K,
// "cot_length": L, "answer_vocab": V}; answer_vocab defaults to
// max(answer) + 1.
std::vector<EloTask> read_elo_tasks(const std::string& path);
void write_elo_tasks(const std::string& path, const std::vector<EloTask>& tasks);

}  // namespace m1lab
