#include "m1lab/elo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "m1lab/error.hpp"
#include "m1lab/rng.hpp"

namespace m1lab {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// log-softmax of one row; -inf entries stay -inf, +inf/NaN are rejected by
// validate_policy before we get here.
void log_softmax_row(const double* x, double* out, std::size_t n) {
  double mx = -kInf;
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[i]);
  if (mx == -kInf) fail(ErrorKind::kNumeric, "softmax row has no finite logit");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i] - mx);
  const double lse = mx + std::log(s);
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - lse;
}

double logsumexp(std::span<const double> x) {
  double mx = -kInf;
  for (double v : x) mx = std::max(mx, v);
  if (mx == -kInf) return -kInf;
  double s = 0.0;
  for (double v : x) s += std::exp(v - mx);
  return mx + std::log(s);
}

std::size_t answer_row_size(const EloTask& task) { return task.answer.size() * task.answer_vocab; }

// Gradient of s_c = log pi(A|c) w.r.t. answer_logits[c], scaled by `w` and
// accumulated into out[c-block].
void accumulate_answer_grad(const EloPolicy& policy, const EloTask& task, std::size_t c, double w, std::vector<double>& out) {
  const std::size_t V = task.answer_vocab;
  std::vector<double> lp(V);
  for (std::size_t t = 0; t < task.answer.size(); ++t) {
    const std::size_t off = c * answer_row_size(task) + t * V;
    log_softmax_row(policy.answer_logits.data() + off, lp.data(), V);
    for (std::size_t v = 0; v < V; ++v) out[off + v] += w * ((v == task.answer[t] ? 1.0 : 0.0) - std::exp(lp[v]));
  }
}

}  // namespace

void EloTask::validate() const {
  if (alphabet_size < 1) fail(ErrorKind::kParameter, "alphabet_size must be positive");
  if (cot_length < 1) fail(ErrorKind::kParameter, "cot_length must be positive");
  std::size_t n = 1;
  for (std::size_t i = 0; i < cot_length; ++i) {
    n *= alphabet_size;
    if (n > kMaxCots)
      fail(ErrorKind::kParameter, "CoT space " + std::to_string(alphabet_size) + "^" + std::to_string(cot_length) +
                                      " exceeds " + std::to_string(kMaxCots));
  }
  if (answer.empty()) fail(ErrorKind::kParameter, "answer must be nonempty");
  if (answer_vocab < 1) fail(ErrorKind::kParameter, "answer_vocab must be positive");
  for (TokenId t : answer)
    if (t >= answer_vocab) fail(ErrorKind::kParameter, "answer token " + std::to_string(t) + " outside answer_vocab");
}

std::size_t EloTask::cot_count() const {
  std::size_t n = 1;
  for (std::size_t i = 0; i < cot_length; ++i) n *= alphabet_size;
  return n;
}

std::vector<TokenId> cot_sequence(const EloTask& task, std::size_t index) {
  if (index >= task.cot_count()) fail(ErrorKind::kIndex, "CoT index " + std::to_string(index) + " out of range");
  std::vector<TokenId> out(task.cot_length);
  for (std::size_t i = task.cot_length; i-- > 0;) {
    out[i] = static_cast<TokenId>(index % task.alphabet_size);
    index /= task.alphabet_size;
  }
  return out;
}

EloPolicy uniform_policy(const EloTask& task) {
  task.validate();
  const std::size_t n = task.cot_count();
  return {std::vector<double>(n, 0.0), std::vector<double>(n * answer_row_size(task), 0.0)};
}

EloPolicy random_policy(const EloTask& task, std::uint64_t seed, double scale) {
  auto p = uniform_policy(task);
  Rng rng(seed);
  for (auto& x : p.cot_logits) x = rng.normal(0.0, scale);
  for (auto& x : p.answer_logits) x = rng.normal(0.0, scale);
  return p;
}

void validate_policy(const EloPolicy& policy, const EloTask& task) {
  task.validate();
  const std::size_t n = task.cot_count();
  if (policy.cot_logits.size() != n)
    fail(ErrorKind::kDimension, "cot_logits has " + std::to_string(policy.cot_logits.size()) + " entries, task needs " +
                                    std::to_string(n));
  if (policy.answer_logits.size() != n * answer_row_size(task))
    fail(ErrorKind::kDimension, "answer_logits has " + std::to_string(policy.answer_logits.size()) +
                                    " entries, task needs " + std::to_string(n * answer_row_size(task)));
  for (double x : policy.cot_logits)
    if (std::isnan(x) || x == kInf) fail(ErrorKind::kNumeric, "cot logit is NaN or +inf");
  for (double x : policy.answer_logits)
    if (std::isnan(x) || x == kInf) fail(ErrorKind::kNumeric, "answer logit is NaN or +inf");
}

std::vector<double> cot_log_probs(const EloPolicy& policy, const EloTask& task) {
  validate_policy(policy, task);
  std::vector<double> out(policy.cot_logits.size());
  log_softmax_row(policy.cot_logits.data(), out.data(), out.size());
  return out;
}

std::vector<double> answer_log_probs(const EloPolicy& policy, const EloTask& task) {
  validate_policy(policy, task);
  const std::size_t n = task.cot_count(), V = task.answer_vocab;
  std::vector<double> out(n, 0.0), lp(V);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t t = 0; t < task.answer.size(); ++t) {
      log_softmax_row(policy.answer_logits.data() + c * answer_row_size(task) + t * V, lp.data(), V);
      out[c] += lp[task.answer[t]];
    }
  }
  return out;
}

EloValue elo_loss_exact(const EloPolicy& policy, const EloTask& task) {
  const auto lp = cot_log_probs(policy, task);
  const auto s = answer_log_probs(policy, task);
  std::vector<double> joint(lp.size());
  for (std::size_t c = 0; c < lp.size(); ++c) joint[c] = lp[c] + s[c];
  const double l = logsumexp(joint);
  if (l == -kInf) return {kInf, true};
  return {std::max(0.0, -l), false};  // a probability never exceeds 1; drop rounding below 0
}

EloValue upper_bound_exact(const EloPolicy& policy, const EloTask& task) {
  const auto lp = cot_log_probs(policy, task);
  const auto s = answer_log_probs(policy, task);
  double total = 0.0;
  for (std::size_t c = 0; c < lp.size(); ++c) {
    if (lp[c] == -kInf) continue;
    if (s[c] == -kInf) return {kInf, true};
    total -= std::exp(lp[c]) * s[c];
  }
  return {total, false};
}

double answer_probability(const EloPolicy& policy, const EloTask& task) {
  const auto l = elo_loss_exact(policy, task);
  return l.infinite ? 0.0 : std::exp(-l.value);
}

std::string_view baseline_name(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::kZero: return "zero";
    case BaselineKind::kBatchMean: return "batch_mean";
    case BaselineKind::kLeaveOneOut: return "leave_one_out";
  }
  return "unknown";
}

BaselineKind parse_baseline(std::string_view name) {
  if (name == "zero") return BaselineKind::kZero;
  if (name == "batch_mean") return BaselineKind::kBatchMean;
  if (name == "leave_one_out") return BaselineKind::kLeaveOneOut;
  fail(ErrorKind::kConfig, "unknown baseline '" + std::string(name) + "'");
}

std::vector<double> baseline_compute(std::span<const double> scores, BaselineSpec spec) {
  const std::size_t n = scores.size();
  std::vector<double> out(n, 0.0);
  if (spec.kind == BaselineKind::kZero) return out;
  double total = 0.0;
  for (double s : scores) total += s;
  if (spec.kind == BaselineKind::kBatchMean) {
    if (n == 0) return out;
    std::fill(out.begin(), out.end(), total / static_cast<double>(n));
    return out;
  }
  if (n < 2) fail(ErrorKind::kParameter, "leave-one-out baseline needs at least 2 samples");
  for (std::size_t i = 0; i < n; ++i) out[i] = (total - scores[i]) / static_cast<double>(n - 1);
  return out;
}

EloGradient upper_bound_gradient(const EloPolicy& policy, const EloTask& task, EloGradientMode mode) {
  const auto lp = cot_log_probs(policy, task);
  const auto s = answer_log_probs(policy, task);
  const std::size_t n = lp.size();
  if (upper_bound_exact(policy, task).infinite) fail(ErrorKind::kNumeric, "L_upper is infinite; gradient undefined");
  double mean = 0.0;
  for (std::size_t c = 0; c < n; ++c)
    if (lp[c] != -kInf) mean += std::exp(lp[c]) * s[c];
  EloGradient g;
  g.cot.assign(n, 0.0);
  for (std::size_t j = 0; j < n; ++j)
    if (lp[j] != -kInf) g.cot[j] = -std::exp(lp[j]) * (s[j] - mean);
  if (mode == EloGradientMode::kJoint) {
    g.answer.assign(policy.answer_logits.size(), 0.0);
    for (std::size_t c = 0; c < n; ++c)
      if (lp[c] != -kInf) accumulate_answer_grad(policy, task, c, -std::exp(lp[c]), g.answer);
  }
  return g;
}

EloGradient elo_gradient_enumerated(const EloPolicy& policy, const EloTask& task, double baseline, EloGradientMode mode) {
  const auto lp = cot_log_probs(policy, task);
  const auto s = answer_log_probs(policy, task);
  const std::size_t n = lp.size();
  std::vector<double> p(n);
  for (std::size_t c = 0; c < n; ++c) p[c] = std::exp(lp[c]);
  EloGradient g;
  g.cot.assign(n, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    if (p[c] == 0.0) continue;
    if (s[c] == -kInf) fail(ErrorKind::kNumeric, "CoT " + std::to_string(c) + " has zero answer probability");
    // grad log pi(c) = e_c - p
    const double w = -p[c] * (s[c] - baseline);
    for (std::size_t j = 0; j < n; ++j) g.cot[j] += w * ((j == c ? 1.0 : 0.0) - p[j]);
  }
  if (mode == EloGradientMode::kJoint) {
    g.answer.assign(policy.answer_logits.size(), 0.0);
    for (std::size_t c = 0; c < n; ++c)
      if (p[c] != 0.0) accumulate_answer_grad(policy, task, c, -p[c], g.answer);
  }
  return g;
}

EloGradient elo_gradient_from_samples(const EloPolicy& policy, const EloTask& task, std::span<const std::size_t> draws,
                                      std::span<const double> baselines, EloGradientMode mode) {
  if (draws.empty()) fail(ErrorKind::kParameter, "need at least one sample");
  if (baselines.size() != draws.size()) fail(ErrorKind::kDimension, "one baseline per sample required");
  const auto lp = cot_log_probs(policy, task);
  const auto s = answer_log_probs(policy, task);
  const std::size_t n = lp.size();
  EloGradient g;
  g.cot.assign(n, 0.0);
  const double inv = 1.0 / static_cast<double>(draws.size());
  double adv_total = 0.0;
  for (std::size_t i = 0; i < draws.size(); ++i) {
    if (draws[i] >= n) fail(ErrorKind::kIndex, "CoT index " + std::to_string(draws[i]) + " out of range");
    const double adv = s[draws[i]] - baselines[i];
    g.cot[draws[i]] -= inv * adv;
    adv_total += adv;
  }
  // grad log pi(c) = e_c - p
  for (std::size_t j = 0; j < n; ++j) g.cot[j] += inv * adv_total * std::exp(lp[j]);
  if (mode == EloGradientMode::kJoint) {
    g.answer.assign(policy.answer_logits.size(), 0.0);
    for (std::size_t c : draws) accumulate_answer_grad(policy, task, c, -inv, g.answer);
  }
  return g;
}

EloGradient elo_gradient_estimate(const EloPolicy& policy, const EloTask& task, std::size_t n_samples, BaselineSpec baseline,
                                  std::uint64_t seed, EloGradientMode mode) {
  if (n_samples < 1) fail(ErrorKind::kParameter, "n_samples must be positive");
  if (baseline.kind == BaselineKind::kLeaveOneOut && n_samples < 2)
    fail(ErrorKind::kParameter, "leave-one-out baseline needs n_samples >= 2");
  const auto lp = cot_log_probs(policy, task);
  const auto s = answer_log_probs(policy, task);
  const std::size_t n = lp.size();
  std::vector<double> cdf(n);
  double acc = 0.0;
  for (std::size_t c = 0; c < n; ++c) cdf[c] = acc += std::exp(lp[c]);

  Rng rng(seed);
  std::vector<std::size_t> draws(n_samples);
  std::vector<double> scores(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const double u = rng.uniform() * acc;
    const auto c = std::min(static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin()), n - 1);
    draws[i] = c;
    scores[i] = s[c];
    if (s[c] == -kInf) {
      std::string seq;
      for (TokenId t : cot_sequence(task, c)) seq += (seq.empty() ? "" : " ") + std::to_string(t);
      fail(ErrorKind::kNumeric, "sample " + std::to_string(i) + " drew CoT [" + seq +
                                    "] with zero answer probability (score -inf); aborting estimate");
    }
  }
  const auto b = baseline_compute(scores, baseline);
  return elo_gradient_from_samples(policy, task, draws, b, mode);
}

std::vector<EloStepRow> train_elo(EloPolicy& policy, const EloTask& task, std::size_t steps, double lr, EloGradientMode mode) {
  if (!(lr > 0.0) || !std::isfinite(lr)) fail(ErrorKind::kParameter, "lr must be positive and finite");
  std::vector<EloStepRow> rows;
  auto record = [&](std::size_t step) {
    const auto le = elo_loss_exact(policy, task);
    const auto lu = upper_bound_exact(policy, task);
    rows.push_back({step, le.value, lu.value, answer_probability(policy, task)});
  };
  record(0);
  for (std::size_t k = 1; k <= steps; ++k) {
    const auto g = elo_gradient_enumerated(policy, task, 0.0, mode);
    for (std::size_t j = 0; j < g.cot.size(); ++j) policy.cot_logits[j] -= lr * g.cot[j];
    for (std::size_t j = 0; j < g.answer.size(); ++j) policy.answer_logits[j] -= lr * g.answer[j];
    record(k);
  }
  return rows;
}

EloToyProblem reasoning_toy_problem(std::uint64_t seed, std::size_t alphabet_size, std::size_t cot_length,
                                    std::size_t answer_vocab, std::size_t answer_length) {
  Rng rng(seed);
  EloTask task;
  task.alphabet_size = alphabet_size;
  task.cot_length = cot_length;
  task.answer_vocab = answer_vocab;
  for (int i = 0; i < 2; ++i) task.question.push_back(static_cast<TokenId>(rng.below(16)));
  for (std::size_t i = 0; i < answer_length; ++i) task.answer.push_back(static_cast<TokenId>(rng.below(answer_vocab)));
  task.validate();

  TokenId key = 0;
  for (TokenId q : task.question) key += q;
  key %= static_cast<TokenId>(alphabet_size);

  EloPolicy policy = uniform_policy(task);
  for (auto& x : policy.cot_logits) x = rng.normal(0.0, 0.1);
  const std::size_t V = answer_vocab, row = answer_length * V;
  for (std::size_t c = 0; c < task.cot_count(); ++c) {
    const bool correct = cot_sequence(task, c)[0] == key;
    for (std::size_t t = 0; t < answer_length; ++t) {
      double* l = policy.answer_logits.data() + c * row + t * V;
      for (std::size_t v = 0; v < V; ++v) l[v] = rng.normal(0.0, 1.0);
      if (correct) l[task.answer[t]] = 6.0;
    }
  }
  return {task, policy};
}

std::vector<EloTask> read_elo_tasks(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path);
  std::vector<EloTask> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kData, where + ": " + e.what());
    }
    try {
      EloTask t;
      t.question = j.at("question").get<std::vector<TokenId>>();
      t.answer = j.at("answer").get<std::vector<TokenId>>();
      t.alphabet_size = j.at("alphabet_size").get<std::size_t>();
      t.cot_length = j.at("cot_length").get<std::size_t>();
      if (j.contains("answer_vocab")) {
        t.answer_vocab = j["answer_vocab"].get<std::size_t>();
      } else {
        TokenId mx = 0;
        for (TokenId a : t.answer) mx = std::max(mx, a);
        t.answer_vocab = static_cast<std::size_t>(mx) + 1;
      }
      t.validate();
      out.push_back(std::move(t));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kData, where + ": " + e.what());
    } catch (const Error& e) {
      fail(ErrorKind::kData, where + ": " + e.what());
    }
  }
  return out;
}

void write_elo_tasks(const std::string& path, const std::vector<EloTask>& tasks) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path + " for writing");
  for (const auto& t : tasks) {
    nlohmann::json j = {{"question", t.question},
                        {"answer", t.answer},
                        {"alphabet_size", t.alphabet_size},
                        {"cot_length", t.cot_length},
                        {"answer_vocab", t.answer_vocab}};
    out << j.dump() << '\n';
  }
  if (!out) fail(ErrorKind::kIo, "failed writing " + path);
}

}  // namespace m1lab
