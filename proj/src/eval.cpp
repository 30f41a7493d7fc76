#include "m1lab/eval.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "m1lab/error.hpp"
#include "m1lab/ops.hpp"
#include "m1lab/rng.hpp"

namespace m1lab {

namespace {

TokenId draw(Rng& rng, TokenId begin, TokenId end) { return begin + static_cast<TokenId>(rng.below(end - begin)); }

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::size_t depth_bucket(double depth) { return std::min<std::size_t>(static_cast<std::size_t>(depth * 10.0), 9); }

}  // namespace

void NiahSpec::validate() const {
  if (key_len < 1 || value_len < 1) fail(ErrorKind::kParameter, "key_len and value_len must be positive");
  auto range = [&](TokenId b, TokenId e, const char* name) {
    if (b >= e) fail(ErrorKind::kParameter, std::string(name) + " alphabet is empty");
    if (e > vocab) fail(ErrorKind::kParameter, std::string(name) + " alphabet exceeds the vocabulary");
  };
  range(filler_begin, filler_end, "filler");
  range(key_begin, key_end, "key");
  range(value_begin, value_end, "value");
  auto overlap = [](TokenId b1, TokenId e1, TokenId b2, TokenId e2) { return b1 < e2 && b2 < e1; };
  if (overlap(filler_begin, filler_end, key_begin, key_end) || overlap(filler_begin, filler_end, value_begin, value_end) ||
      overlap(key_begin, key_end, value_begin, value_end))
    fail(ErrorKind::kParameter, "filler, key and value alphabets must be disjoint");
}

NiahSpec default_niah_spec(std::size_t vocab) {
  if (vocab < 8) fail(ErrorKind::kParameter, "NIAH needs a vocabulary of at least 8 tokens");
  NiahSpec s;
  s.vocab = vocab;
  s.filler_begin = 1;
  s.filler_end = s.key_begin = static_cast<TokenId>(vocab / 2);
  s.key_end = s.value_begin = static_cast<TokenId>(3 * vocab / 4);
  s.value_end = static_cast<TokenId>(vocab);
  return s;
}

std::vector<TokenId> NiahCase::prompt() const {
  std::vector<TokenId> p = haystack;
  p.insert(p.end(), key.begin(), key.end());
  return p;
}

std::size_t NiahCase::needle_distance() const {
  const std::size_t query_last = haystack.size() + key.size() - 1;
  return query_last - (needle_pos + key.size());
}

NiahCase gen_niah_case(std::size_t length, double depth, std::size_t vocab, std::uint64_t seed) {
  return gen_niah_case(length, depth, default_niah_spec(vocab), seed);
}

NiahCase gen_niah_case(std::size_t length, double depth, const NiahSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (!(depth >= 0.0 && depth <= 1.0)) fail(ErrorKind::kParameter, "depth must lie in [0, 1]");
  if (length < spec.needle_len())
    fail(ErrorKind::kParameter, "haystack length " + std::to_string(length) + " cannot hold a needle of " +
                                    std::to_string(spec.needle_len()) + " tokens");
  Rng rng(seed);
  NiahCase c;
  c.depth = depth;
  c.haystack.resize(length);
  for (auto& t : c.haystack) t = draw(rng, spec.filler_begin, spec.filler_end);
  for (std::size_t i = 0; i < spec.key_len; ++i) c.key.push_back(draw(rng, spec.key_begin, spec.key_end));
  for (std::size_t i = 0; i < spec.value_len; ++i) c.value.push_back(draw(rng, spec.value_begin, spec.value_end));
  c.needle_pos = static_cast<std::size_t>(std::floor(depth * static_cast<double>(length - spec.needle_len())));
  std::copy(c.key.begin(), c.key.end(), c.haystack.begin() + static_cast<std::ptrdiff_t>(c.needle_pos));
  std::copy(c.value.begin(), c.value.end(), c.haystack.begin() + static_cast<std::ptrdiff_t>(c.needle_pos + spec.key_len));
  return c;
}

std::vector<NiahCase> niah_suite(std::size_t length, std::size_t per_bucket, const NiahSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<NiahCase> out;
  for (std::size_t b = 0; b < 10; ++b) {
    for (std::size_t i = 0; i < per_bucket; ++i) {
      // stay strictly inside the decile so the bucket is unambiguous
      const double depth = std::min((static_cast<double>(b) + rng.uniform()) / 10.0, (static_cast<double>(b) + 0.999) / 10.0);
      out.push_back(gen_niah_case(length, depth, spec, rng.next_u64()));
    }
  }
  return out;
}

std::vector<TokenId> greedy_decode(const ModelParams& params, const ModelConfig& config, const std::vector<TokenId>& prompt,
                                   std::size_t n) {
  if (prompt.empty()) fail(ErrorKind::kParameter, "greedy decoding needs a nonempty prompt");
  KvCache cache = make_kv_cache(config);
  std::vector<TokenId> out;
  Tensor logits = model_forward_cached(prompt, params, config, cache);
  const std::size_t V = config.vocab_size;
  for (std::size_t i = 0; i < n; ++i) {
    const auto data = logits.data();
    const std::size_t rows = logits.dim(0);
    const TokenId next = static_cast<TokenId>(argmax_row(data.subspan((rows - 1) * V, V)));
    out.push_back(next);
    if (i + 1 < n) logits = model_forward_cached(std::vector<TokenId>{next}, params, config, cache);
  }
  return out;
}

NiahReport eval_niah(const ModelParams& params, const ModelConfig& config, const std::vector<NiahCase>& cases,
                     std::size_t context_len) {
  NiahReport r;
  r.window = config.window_size;
  r.context_len = context_len;
  for (std::size_t b = 0; b < 10; ++b) {
    r.per_depth[b].depth_lo = static_cast<double>(b) / 10.0;
    r.per_depth[b].depth_hi = static_cast<double>(b + 1) / 10.0;
  }
  for (const auto& c : cases) {
    const auto prompt = c.prompt();
    if (prompt.size() + c.value.size() - 1 > context_len) {
      ++r.skipped;
      continue;
    }
    const bool ok = greedy_decode(params, config, prompt, c.value.size()) == c.value;
    ++r.evaluated;
    r.correct += ok;
    auto& bucket = r.per_depth[depth_bucket(c.depth)];
    ++bucket.cases;
    bucket.correct += ok;
    if (c.needle_distance() >= config.window_size) {
      ++r.beyond_window_cases;
      r.beyond_window_correct += ok;
    }
  }
  return r;
}

std::string niah_report_json(const NiahReport& report, const std::vector<std::pair<std::string, std::string>>& config_echo) {
  nlohmann::ordered_json j;
  j["protocol"] = "synthetic token-level needle-in-a-haystack (stand-in protocol)";
  j["accuracy"] = report.accuracy();
  j["evaluated"] = report.evaluated;
  j["correct"] = report.correct;
  j["skipped"] = report.skipped;
  j["per_depth"] = nlohmann::ordered_json::array();
  for (const auto& b : report.per_depth)
    j["per_depth"].push_back(
        {{"depth_lo", b.depth_lo}, {"depth_hi", b.depth_hi}, {"cases", b.cases}, {"correct", b.correct}, {"accuracy", b.accuracy()}});
  j["beyond_window"] = {{"window", report.window},
                        {"cases", report.beyond_window_cases},
                        {"correct", report.beyond_window_correct},
                        {"accuracy", report.beyond_window_accuracy()}};
  nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
  cfg["context_len"] = report.context_len;
  for (const auto& [k, v] : config_echo) cfg[k] = v;
  j["config"] = cfg;
  return j.dump(2) + "\n";
}

void write_niah_csv(std::ostream& out, const NiahReport& report) {
  out << "depth_lo,depth_hi,cases,correct,accuracy\n";
  char buf[128];
  for (const auto& b : report.per_depth) {
    std::snprintf(buf, sizeof buf, "%.1f,%.1f,%zu,%zu,%.17g\n", b.depth_lo, b.depth_hi, b.cases, b.correct, b.accuracy());
    out << buf;
  }
}

PerplexityResult eval_perplexity(const ModelParams& params, const ModelConfig& config,
                                 const std::vector<std::vector<TokenId>>& corpus) {
  if (corpus.empty()) fail(ErrorKind::kParameter, "perplexity needs a nonempty corpus");
  NoGradGuard guard;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& doc : corpus) {
    if (doc.size() < 2) continue;
    const auto targets = next_token_targets(doc, {});
    std::size_t n = 0;
    for (auto t : targets) n += t != kIgnoreTarget;
    Tensor loss = masked_cross_entropy(model_forward(doc, params, config), targets);
    total += loss.item() * static_cast<double>(n);
    count += n;
  }
  if (count == 0) fail(ErrorKind::kParameter, "corpus has no predictable tokens (every document is shorter than 2)");
  PerplexityResult r;
  r.tokens = count;
  r.mean_nll = total / static_cast<double>(count);
  r.perplexity = std::exp(r.mean_nll);
  return r;
}

Batch retrieval_batch(const RetrievalCorpusSpec& spec, std::size_t sequences, Rng& rng) {
  const NiahSpec& n = spec.niah;
  n.validate();
  const std::size_t nl = n.needle_len();
  if (spec.max_needles < 1) fail(ErrorKind::kParameter, "max_needles must be positive");
  if (spec.max_needles > n.key_end - n.key_begin) fail(ErrorKind::kParameter, "more needles than distinct key tokens");
  if (spec.distinct_values && spec.max_needles * n.value_len > n.value_end - n.value_begin)
    fail(ErrorKind::kParameter, "more needle values than distinct value tokens");
  if (spec.seq_len < spec.max_needles * 2 * nl + spec.min_gap + 1)
    fail(ErrorKind::kParameter, "seq_len too short for " + std::to_string(spec.max_needles) + " needles");

  Batch batch;
  for (std::size_t s = 0; s < sequences; ++s) {
    const std::size_t m = 1 + rng.below(spec.max_needles);
    const std::size_t hay = spec.seq_len - m * nl;
    std::vector<TokenId> seq(spec.seq_len);
    for (std::size_t i = 0; i < hay; ++i) seq[i] = draw(rng, n.filler_begin, n.filler_end);

    // Distinct final key tokens and distinct value tokens across the whole
    // sequence, so every query and every value continuation has one answer.
    std::vector<std::vector<TokenId>> keys, values;
    std::vector<TokenId> last_used, values_used;
    for (std::size_t k = 0; k < m; ++k) {
      std::vector<TokenId> key(n.key_len), value(n.value_len);
      for (auto& t : key) t = draw(rng, n.key_begin, n.key_end);
      while (std::find(last_used.begin(), last_used.end(), key.back()) != last_used.end())
        key.back() = draw(rng, n.key_begin, n.key_end);
      last_used.push_back(key.back());
      for (auto& t : value) {
        do t = draw(rng, n.value_begin, n.value_end);
        while (spec.distinct_values && std::find(values_used.begin(), values_used.end(), t) != values_used.end());
        values_used.push_back(t);
      }
      keys.push_back(key);
      values.push_back(value);
    }
    // non-overlapping positions: sorted offsets into the free filler slots
    std::vector<std::size_t> offsets(m);
    for (auto& o : offsets) o = rng.below(hay - spec.min_gap - m * nl + 1);
    std::sort(offsets.begin(), offsets.end());
    for (std::size_t k = 0; k < m; ++k) {
      const std::size_t pos = offsets[k] + k * nl;
      std::copy(keys[k].begin(), keys[k].end(), seq.begin() + static_cast<std::ptrdiff_t>(pos));
      std::copy(values[k].begin(), values[k].end(), seq.begin() + static_cast<std::ptrdiff_t>(pos + n.key_len));
    }
    // queries in random order
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = m; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    std::vector<std::int32_t> targets(spec.seq_len, kIgnoreTarget);
    std::size_t at = hay;
    for (std::size_t k : order) {
      std::copy(keys[k].begin(), keys[k].end(), seq.begin() + static_cast<std::ptrdiff_t>(at));
      std::copy(values[k].begin(), values[k].end(), seq.begin() + static_cast<std::ptrdiff_t>(at + n.key_len));
      for (std::size_t v = 0; v < n.value_len; ++v)
        targets[at + n.key_len - 1 + v] = static_cast<std::int32_t>(values[k][v]);
      at += nl;
    }
    batch.sequences.push_back(std::move(seq));
    batch.targets.push_back(std::move(targets));
  }
  return batch;
}

BatchSource retrieval_batches(const RetrievalCorpusSpec& spec, std::size_t sequences_per_batch, std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  return [spec, sequences_per_batch, rng]() -> std::optional<Batch> { return retrieval_batch(spec, sequences_per_batch, *rng); };
}

std::string_view retrieval_arm_name(RetrievalArm arm) {
  switch (arm) {
    case RetrievalArm::kHybrid: return "hybrid";
    case RetrievalArm::kAllSwa: return "all_swa";
    case RetrievalArm::kNoConv: return "no_conv";
  }
  return "unknown";
}

ModelConfig retrieval_arm_model(const RetrievalExperimentConfig& config, RetrievalArm arm) {
  ModelConfig m = config.model;
  if (arm == RetrievalArm::kAllSwa) m.layer_pattern.assign(m.n_layers, LayerKind::kSwa);
  if (arm == RetrievalArm::kNoConv) m.kv_conv = false;
  m.validate();
  return m;
}

std::vector<RetrievalStage> parse_retrieval_stages(const std::string& text) {
  if (!text.empty() && text.back() == ',') fail(ErrorKind::kConfig, "retrieval stages end with ','");
  std::vector<RetrievalStage> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::array<std::size_t, 4> f{};
    std::stringstream fs(item);
    std::string part;
    std::size_t n = 0;
    while (std::getline(fs, part, ':')) {
      if (n == 4 || part.empty() || part.find_first_not_of("0123456789") != std::string::npos)
        fail(ErrorKind::kConfig, "retrieval stage '" + item + "' is not seq_len:max_needles:min_gap:steps");
      f[n++] = std::stoull(part);
    }
    if (n != 4) fail(ErrorKind::kConfig, "retrieval stage '" + item + "' is not seq_len:max_needles:min_gap:steps");
    if (f[0] == 0 || f[1] == 0 || f[3] == 0) fail(ErrorKind::kConfig, "retrieval stage '" + item + "' has a zero field");
    out.push_back({f[0], f[1], f[2], f[3]});
  }
  if (out.empty()) fail(ErrorKind::kConfig, "no retrieval stages");
  return out;
}

std::string render_retrieval_stages(const std::vector<RetrievalStage>& stages) {
  std::string s;
  for (const auto& st : stages) {
    if (!s.empty()) s += ',';
    s += std::to_string(st.seq_len) + ':' + std::to_string(st.max_needles) + ':' + std::to_string(st.min_gap) + ':' +
         std::to_string(st.steps);
  }
  return s;
}

std::size_t RetrievalExperimentConfig::total_steps() const {
  std::size_t n = 0;
  for (const auto& st : stages) n += st.steps;
  return n;
}

RetrievalArmResult run_retrieval_arm(const RetrievalExperimentConfig& config, RetrievalArm arm) {
  const auto start = std::chrono::steady_clock::now();
  const ModelConfig model = retrieval_arm_model(config, arm);
  if (config.stages.empty()) fail(ErrorKind::kConfig, "no retrieval stages");
  const std::uint64_t total = config.total_steps();
  if (config.train.warmup_steps + config.train.decay_steps > total)
    fail(ErrorKind::kConfig, "retrieval warmup + decay exceed the stage steps");
  TrainConfig train = config.train;
  train.stable_steps = total - train.warmup_steps - train.decay_steps;

  RetrievalCorpusSpec corpus;
  corpus.niah = default_niah_spec(model.vocab_size);
  corpus.niah.key_len = config.key_len;
  corpus.niah.value_len = config.value_len;
  corpus.distinct_values = config.distinct_values;

  ModelParams params = build_model(model, config.model_seed);
  if (config.conv_history_tap >= 0.0 && model.kv_conv) {
    for (auto& layer : params.layers) {
      for (Tensor* t : {&layer.conv_k, &layer.conv_v}) {
        auto d = t->mutable_data();
        const std::size_t w = t->dim(1);
        std::fill(d.begin(), d.end() - static_cast<std::ptrdiff_t>(w), config.conv_history_tap);
      }
    }
  }
  TrainState state = make_train_state(params);
  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    const RetrievalStage& st = config.stages[i];
    corpus.seq_len = st.seq_len;
    corpus.max_needles = st.max_needles;
    corpus.min_gap = st.min_gap;
    StageSpec stage;
    stage.context_len = st.seq_len;
    stage.rope_base = model.rope_base;
    stage.token_budget = static_cast<std::uint64_t>(st.steps) * config.sequences_per_batch * st.seq_len;
    run_stage(params, model, stage, retrieval_batches(corpus, config.sequences_per_batch, config.data_seed + i), train, state);
  }

  // one needle per case; prompt plus answer fits the eval context
  const std::size_t haystack = config.context_len - corpus.niah.key_len - corpus.niah.value_len;
  const auto cases = niah_suite(haystack, config.eval_per_bucket, corpus.niah, config.eval_seed);
  RetrievalArmResult r;
  r.arm = arm;
  r.report = eval_niah(params, model, cases, config.context_len);
  r.metrics = std::move(state.metrics);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace m1lab
