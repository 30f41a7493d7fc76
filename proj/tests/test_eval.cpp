#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "m1lab/error.hpp"
#include "m1lab/eval.hpp"
#include "m1lab/ops.hpp"
#include "m1lab/rng.hpp"

using namespace m1lab;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no m1lab::Error thrown";
  return ErrorKind::kIo;
}

ModelConfig small_config(std::size_t vocab = 64) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 16;
  c.n_layers = 2;
  c.layer_pattern = {LayerKind::kSwa, LayerKind::kGlobal};
  c.global_heads = 2;
  c.global_head_dim = 8;
  c.swa_heads = 2;
  c.swa_head_dim = 8;
  c.window_size = 8;
  c.rope_base = 1e4;
  c.ffn_hidden = 32;
  return c;
}

// count of occurrences of `needle` as a contiguous run in `hay`
std::size_t count_runs(const std::vector<TokenId>& hay, const std::vector<TokenId>& needle) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + needle.size() <= hay.size(); ++i) {
    bool same = true;
    for (std::size_t j = 0; j < needle.size() && same; ++j) same = hay[i + j] == needle[j];
    n += same;
  }
  return n;
}

// Greedy continuation without the KV cache: rerun the full prefix each step.
std::vector<TokenId> greedy_by_recompute(const ModelParams& p, const ModelConfig& c, std::vector<TokenId> seq, std::size_t n) {
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor logits = model_forward(seq, p, c);
    auto d = logits.data();
    const std::size_t V = c.vocab_size;
    std::size_t best = 0;
    for (std::size_t v = 1; v < V; ++v)
      if (d[(seq.size() - 1) * V + v] > d[(seq.size() - 1) * V + best]) best = v;
    out.push_back(static_cast<TokenId>(best));
    seq.push_back(static_cast<TokenId>(best));
  }
  return out;
}

// Two passes per row (max, then sum of exp) in long double.
double oracle_mean_nll(const ModelParams& p, const ModelConfig& c, const std::vector<std::vector<TokenId>>& corpus) {
  long double total = 0.0L;
  std::size_t count = 0;
  for (const auto& doc : corpus) {
    if (doc.size() < 2) continue;
    Tensor logits = model_forward(doc, p, c);
    auto d = logits.data();
    const std::size_t V = c.vocab_size;
    for (std::size_t i = 0; i + 1 < doc.size(); ++i) {
      const double* row = d.data() + i * V;
      long double mx = row[0];
      for (std::size_t v = 1; v < V; ++v) mx = std::max<long double>(mx, row[v]);
      long double z = 0.0L;
      for (std::size_t v = 0; v < V; ++v) z += std::exp(static_cast<long double>(row[v]) - mx);
      total += mx + std::log(z) - row[doc[i + 1]];
      ++count;
    }
  }
  return static_cast<double>(total / static_cast<long double>(count));
}

std::vector<std::vector<TokenId>> random_corpus(std::size_t docs, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<TokenId>> out(docs);
  for (auto& d : out) {
    d.resize(2 + rng.below(20));
    for (auto& t : d) t = static_cast<TokenId>(rng.below(vocab));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Case generation

TEST(NiahSpec, DefaultSplitsAreDisjointAndCoverTheVocabulary) {
  const NiahSpec s = default_niah_spec(128);
  EXPECT_EQ(s.filler_begin, 1);
  EXPECT_EQ(s.filler_end, 64);
  EXPECT_EQ(s.key_begin, 64);
  EXPECT_EQ(s.key_end, 96);
  EXPECT_EQ(s.value_begin, 96);
  EXPECT_EQ(s.value_end, 128);
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(kind_of([] { default_niah_spec(7); }), ErrorKind::kParameter);
}

TEST(NiahSpec, OverlappingOrOversizedAlphabetsRejected) {
  NiahSpec s = default_niah_spec(128);
  s.key_begin = 60;
  EXPECT_EQ(kind_of([&] { s.validate(); }), ErrorKind::kParameter);
  s = default_niah_spec(128);
  s.value_end = 129;
  EXPECT_EQ(kind_of([&] { s.validate(); }), ErrorKind::kParameter);
  s = default_niah_spec(128);
  s.key_len = 0;
  EXPECT_EQ(kind_of([&] { s.validate(); }), ErrorKind::kParameter);
}

TEST(GenNiahCase, DepthZeroPlacesNeedleFirstAndDepthOneLast) {
  const NiahSpec s = default_niah_spec(128);
  const auto a = gen_niah_case(100, 0.0, s, 5);
  EXPECT_EQ(a.needle_pos, 0u);
  EXPECT_EQ(a.haystack.size(), 100u);
  const auto b = gen_niah_case(100, 1.0, s, 5);
  EXPECT_EQ(b.needle_pos, 100u - s.needle_len());
  const auto c = gen_niah_case(100, 0.5, s, 5);
  EXPECT_EQ(c.needle_pos, 48u);  // floor(0.5 * 96)
}

TEST(GenNiahCase, DeterministicPerSeed) {
  const auto a = gen_niah_case(200, 0.3, 128, 77);
  const auto b = gen_niah_case(200, 0.3, 128, 77);
  const auto c = gen_niah_case(200, 0.3, 128, 78);
  EXPECT_EQ(a.haystack, b.haystack);
  EXPECT_EQ(a.key, b.key);
  EXPECT_EQ(a.value, b.value);
  EXPECT_NE(a.haystack, c.haystack);
}

TEST(GenNiahCase, NeedleOccursExactlyOnceWhereReported) {
  const NiahSpec s = default_niah_spec(128);
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double depth = rng.uniform();
    const auto c = gen_niah_case(50 + rng.below(200), depth, s, rng.next_u64());
    std::vector<TokenId> needle = c.key;
    needle.insert(needle.end(), c.value.begin(), c.value.end());
    ASSERT_EQ(count_runs(c.haystack, needle), 1u);
    ASSERT_EQ(count_runs(c.haystack, c.key), 1u);
    ASSERT_TRUE(std::equal(needle.begin(), needle.end(), c.haystack.begin() + static_cast<std::ptrdiff_t>(c.needle_pos)));
    for (std::size_t j = 0; j < c.haystack.size(); ++j) {
      if (j >= c.needle_pos && j < c.needle_pos + needle.size()) continue;
      ASSERT_GE(c.haystack[j], s.filler_begin);
      ASSERT_LT(c.haystack[j], s.filler_end);
    }
    for (auto t : c.key) ASSERT_TRUE(t >= s.key_begin && t < s.key_end);
    for (auto t : c.value) ASSERT_TRUE(t >= s.value_begin && t < s.value_end);
  }
}

TEST(GenNiahCase, PromptAndDistance) {
  const auto c = gen_niah_case(40, 0.0, 128, 1);
  const auto p = c.prompt();
  ASSERT_EQ(p.size(), 42u);
  EXPECT_EQ(std::vector<TokenId>(p.end() - 2, p.end()), c.key);
  // last query token at 41, first value token at 2
  EXPECT_EQ(c.needle_distance(), 39u);
}

TEST(GenNiahCase, InvalidArgumentsAreParameterErrors) {
  EXPECT_EQ(kind_of([] { gen_niah_case(100, -0.1, 128, 1); }), ErrorKind::kParameter);
  EXPECT_EQ(kind_of([] { gen_niah_case(100, 1.1, 128, 1); }), ErrorKind::kParameter);
  EXPECT_EQ(kind_of([] { gen_niah_case(100, std::numeric_limits<double>::quiet_NaN(), 128, 1); }), ErrorKind::kParameter);
  EXPECT_EQ(kind_of([] { gen_niah_case(3, 0.5, 128, 1); }), ErrorKind::kParameter);
  EXPECT_NO_THROW(gen_niah_case(4, 0.5, 128, 1));
}

TEST(NiahSuite, TenDecilesWithDepthInsideEach) {
  const auto cases = niah_suite(80, 7, default_niah_spec(128), 11);
  ASSERT_EQ(cases.size(), 70u);
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const double lo = static_cast<double>(i / 7) / 10.0;
    EXPECT_GE(cases[i].depth, lo);
    EXPECT_LT(cases[i].depth, lo + 0.1);
  }
}

// ---------------------------------------------------------------------------
// Decoding and scoring

TEST(GreedyDecode, CachedDecodingMatchesFullRecompute) {
  const ModelConfig c = small_config();
  const ModelParams p = build_model(c, 4);
  Rng rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<TokenId> prompt(5 + rng.below(20));
    for (auto& t : prompt) t = static_cast<TokenId>(rng.below(c.vocab_size));
    EXPECT_EQ(greedy_decode(p, c, prompt, 6), greedy_by_recompute(p, c, prompt, 6));
  }
  EXPECT_EQ(kind_of([&] { greedy_decode(p, c, {}, 1); }), ErrorKind::kParameter);
}

TEST(EvalNiah, ExactOrderSensitiveMatch) {
  const ModelConfig c = small_config();
  const ModelParams p = build_model(c, 6);
  const NiahSpec s = default_niah_spec(c.vocab_size);
  NiahCase base = gen_niah_case(30, 0.2, s, 1);
  // make the model's own greedy continuation the expected answer
  const auto produced = greedy_decode(p, c, base.prompt(), 2);
  NiahCase hit = base;
  hit.value = produced;
  NiahCase swapped = base;
  swapped.value = {produced[1], produced[0]};
  NiahCase partial = base;
  partial.value = {produced[0], static_cast<TokenId>((produced[1] + 1) % c.vocab_size)};
  EXPECT_EQ(eval_niah(p, c, {hit}, 64).correct, 1u);
  EXPECT_EQ(eval_niah(p, c, {partial}, 64).correct, 0u);
  if (produced[0] != produced[1]) {
    EXPECT_EQ(eval_niah(p, c, {swapped}, 64).correct, 0u);
  }
}

TEST(EvalNiah, UntrainedModelIsNearChance) {
  ModelConfig c = small_config(128);
  const ModelParams p = build_model(c, 2);
  const auto cases = niah_suite(40, 10, default_niah_spec(128), 5);
  const auto r = eval_niah(p, c, cases, 64);
  EXPECT_EQ(r.evaluated, 100u);
  EXPECT_LE(r.accuracy(), 0.05);
}

TEST(EvalNiah, TalliesBucketsSkipsAndBeyondWindow) {
  const ModelConfig c = small_config();
  const ModelParams p = build_model(c, 3);
  const NiahSpec s = default_niah_spec(c.vocab_size);
  auto cases = niah_suite(20, 3, s, 8);
  const auto longer = niah_suite(40, 2, s, 9);
  cases.insert(cases.end(), longer.begin(), longer.end());
  // prompt 22 + 1 fits in 30, prompt 42 + 1 does not
  const auto r = eval_niah(p, c, cases, 30);
  EXPECT_EQ(r.evaluated, 30u);
  EXPECT_EQ(r.skipped, 20u);
  std::size_t bucket_cases = 0, bucket_correct = 0;
  for (const auto& b : r.per_depth) {
    EXPECT_EQ(b.cases, 3u);
    bucket_cases += b.cases;
    bucket_correct += b.correct;
  }
  EXPECT_EQ(bucket_cases, r.evaluated);
  EXPECT_EQ(bucket_correct, r.correct);
  std::size_t beyond = 0;
  for (std::size_t i = 0; i < 30; ++i) beyond += cases[i].needle_distance() >= c.window_size;
  EXPECT_EQ(r.beyond_window_cases, beyond);
  EXPECT_GT(beyond, 0u);
  EXPECT_LT(beyond, 30u);
}

TEST(NiahReportFormat, JsonFieldsAndCsvRows) {
  NiahReport r;
  r.evaluated = 20;
  r.correct = 15;
  r.skipped = 2;
  r.window = 64;
  r.context_len = 256;
  r.beyond_window_cases = 8;
  r.beyond_window_correct = 6;
  for (std::size_t b = 0; b < 10; ++b) {
    r.per_depth[b] = {static_cast<double>(b) / 10.0, static_cast<double>(b + 1) / 10.0, 2, b < 5 ? 2u : 1u};
  }
  const std::string text = niah_report_json(r, {{"model", "desk"}});
  const auto j = nlohmann::json::parse(text);
  EXPECT_DOUBLE_EQ(j["accuracy"].get<double>(), 0.75);
  EXPECT_EQ(j["evaluated"].get<int>(), 20);
  EXPECT_EQ(j["skipped"].get<int>(), 2);
  ASSERT_EQ(j["per_depth"].size(), 10u);
  EXPECT_DOUBLE_EQ(j["per_depth"][7]["accuracy"].get<double>(), 0.5);
  EXPECT_DOUBLE_EQ(j["beyond_window"]["accuracy"].get<double>(), 0.75);
  EXPECT_EQ(j["config"]["model"].get<std::string>(), "desk");
  EXPECT_EQ(j["config"]["context_len"].get<int>(), 256);
  EXPECT_EQ(text, niah_report_json(r, {{"model", "desk"}}));

  std::ostringstream csv;
  write_niah_csv(csv, r);
  std::istringstream in(csv.str());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 11u);
  EXPECT_EQ(lines[0], "depth_lo,depth_hi,cases,correct,accuracy");
  EXPECT_EQ(lines[1], "0.0,0.1,2,2,1");
  EXPECT_EQ(lines[10], "0.9,1.0,2,1,0.5");
}

// ---------------------------------------------------------------------------
// Perplexity

TEST(Perplexity, UniformLogitsGiveVocabularySize) {
  const ModelConfig c = small_config(50);
  ModelParams p = build_model(c, 1);
  for (auto& v : p.output.mutable_data()) v = 0.0;
  const auto r = eval_perplexity(p, c, random_corpus(6, 50, 2));
  EXPECT_NEAR(r.perplexity, 50.0, 1e-9);
}

TEST(Perplexity, MatchesTwoPassOracle) {
  const ModelConfig c = small_config();
  ModelParams p = build_model(c, 12);
  Rng rng(1);
  for (auto& t : p.tensors())
    for (auto& v : t.mutable_data()) v += rng.normal(0.0, 0.2);
  auto corpus = random_corpus(8, c.vocab_size, 3);
  corpus.push_back({5});  // too short to predict anything; skipped
  const auto r = eval_perplexity(p, c, corpus);
  const double nll = oracle_mean_nll(p, c, corpus);
  EXPECT_NEAR(r.mean_nll, nll, 1e-9);
  EXPECT_NEAR(r.perplexity, std::exp(nll), 1e-9 * std::exp(nll));
  std::size_t tokens = 0;
  for (const auto& d : corpus) tokens += d.size() - 1;
  EXPECT_EQ(r.tokens, tokens);
}

TEST(Perplexity, InvariantToDocumentOrder) {
  const ModelConfig c = small_config();
  const ModelParams p = build_model(c, 5);
  auto corpus = random_corpus(10, c.vocab_size, 4);
  const double a = eval_perplexity(p, c, corpus).perplexity;
  std::reverse(corpus.begin(), corpus.end());
  EXPECT_NEAR(eval_perplexity(p, c, corpus).perplexity, a, 1e-12 * a);
}

TEST(Perplexity, NoBoundaryCrossing) {
  // a two-document corpus scores the same as the two documents separately
  const ModelConfig c = small_config();
  const ModelParams p = build_model(c, 5);
  const auto corpus = random_corpus(2, c.vocab_size, 6);
  const auto a = eval_perplexity(p, c, {corpus[0]});
  const auto b = eval_perplexity(p, c, {corpus[1]});
  const auto both = eval_perplexity(p, c, corpus);
  const double pooled = (a.mean_nll * static_cast<double>(a.tokens) + b.mean_nll * static_cast<double>(b.tokens)) /
                        static_cast<double>(a.tokens + b.tokens);
  EXPECT_NEAR(both.mean_nll, pooled, 1e-12);
}

TEST(Perplexity, EmptyOrUnpredictableCorpusRejected) {
  const ModelConfig c = small_config();
  const ModelParams p = build_model(c, 5);
  EXPECT_EQ(kind_of([&] { eval_perplexity(p, c, {}); }), ErrorKind::kParameter);
  EXPECT_EQ(kind_of([&] { eval_perplexity(p, c, {{1}, {}}); }), ErrorKind::kParameter);
}

TEST(Perplexity, OverfitSingleDocumentBelowOnePointTwo) {
  const ModelConfig c = small_config(32);
  ModelParams p = build_model(c, 7);
  Rng rng(8);
  std::vector<TokenId> doc(32);
  for (auto& t : doc) t = static_cast<TokenId>(rng.below(32));
  TrainConfig tc;
  tc.peak_lr = 1e-2;
  tc.floor_lr = 1e-2;
  tc.warmup_steps = 10;
  tc.stable_steps = 1000;
  tc.weight_decay = 0.0;
  TrainState st = make_train_state(p);
  BatchSource src = [&]() -> std::optional<Batch> {
    Batch b;
    b.sequences = {doc};
    return b;
  };
  run_stage(p, c, {300 * 32, 32, c.rope_base, ""}, src, tc, st);
  EXPECT_LT(eval_perplexity(p, c, {doc}).perplexity, 1.2);
}

// ---------------------------------------------------------------------------
// Retrieval training data

TEST(RetrievalBatch, StructureOfEverySequence) {
  RetrievalCorpusSpec spec;
  spec.niah = default_niah_spec(128);
  spec.seq_len = 120;
  spec.max_needles = 5;
  spec.min_gap = 30;
  Rng rng(21);
  const NiahSpec& n = spec.niah;
  for (int round = 0; round < 20; ++round) {
    const Batch b = retrieval_batch(spec, 4, rng);
    ASSERT_EQ(b.sequences.size(), 4u);
    ASSERT_EQ(b.targets.size(), 4u);
    for (std::size_t s = 0; s < 4; ++s) {
      const auto& seq = b.sequences[s];
      const auto& tg = b.targets[s];
      ASSERT_EQ(seq.size(), spec.seq_len);
      std::size_t n_targets = 0;
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (tg[i] == kIgnoreTarget) continue;
        ++n_targets;
        ASSERT_LT(i + 1, seq.size());
        ASSERT_EQ(tg[i], seq[i + 1]);  // a target is always the next token
        ASSERT_GE(tg[i], n.value_begin);
      }
      ASSERT_EQ(n_targets % n.value_len, 0u);
      const std::size_t m = n_targets / n.value_len;
      ASSERT_GE(m, 1u);
      ASSERT_LE(m, spec.max_needles);
      // the query block is the last m needles' worth of tokens
      const std::size_t hay = spec.seq_len - m * n.needle_len();
      std::size_t last_needle_end = 0;
      for (std::size_t q = 0; q < m; ++q) {
        const std::size_t at = hay + q * n.needle_len();
        const std::vector<TokenId> key(seq.begin() + static_cast<std::ptrdiff_t>(at),
                                       seq.begin() + static_cast<std::ptrdiff_t>(at + n.key_len));
        std::vector<TokenId> needle(seq.begin() + static_cast<std::ptrdiff_t>(at),
                                    seq.begin() + static_cast<std::ptrdiff_t>(at + n.needle_len()));
        const std::vector<TokenId> hay_tokens(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(hay));
        ASSERT_EQ(count_runs(hay_tokens, needle), 1u);
        for (std::size_t i = 0; i + needle.size() <= hay; ++i) {
          if (std::equal(needle.begin(), needle.end(), seq.begin() + static_cast<std::ptrdiff_t>(i)))
            last_needle_end = std::max(last_needle_end, i + needle.size());
        }
      }
      ASSERT_GE(hay - last_needle_end, spec.min_gap);
      // every value token appears exactly twice: in its needle and after its query
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (seq[i] >= n.value_begin) {
          ASSERT_EQ(std::count(seq.begin(), seq.end(), seq[i]), 2);
        }
      }
    }
  }
}

TEST(RetrievalBatch, StreamIsDeterministicAndValidated) {
  RetrievalCorpusSpec spec;
  spec.niah = default_niah_spec(128);
  spec.seq_len = 64;
  auto a = retrieval_batches(spec, 3, 5);
  auto b = retrieval_batches(spec, 3, 5);
  for (int i = 0; i < 3; ++i) {
    const auto x = a(), y = b();
    ASSERT_TRUE(x && y);
    EXPECT_EQ(x->sequences, y->sequences);
    EXPECT_EQ(x->targets, y->targets);
  }
  Rng rng(1);
  spec.max_needles = 40;
  EXPECT_EQ(kind_of([&] { retrieval_batch(spec, 1, rng); }), ErrorKind::kParameter);
  spec.max_needles = 4;
  spec.seq_len = 20;
  EXPECT_EQ(kind_of([&] { retrieval_batch(spec, 1, rng); }), ErrorKind::kParameter);
}

TEST(RetrievalArms, ArmConfigs) {
  RetrievalExperimentConfig cfg;
  const auto hybrid = retrieval_arm_model(cfg, RetrievalArm::kHybrid);
  const auto swa = retrieval_arm_model(cfg, RetrievalArm::kAllSwa);
  const auto noconv = retrieval_arm_model(cfg, RetrievalArm::kNoConv);
  EXPECT_EQ(hybrid.layer_pattern, desk_layer_pattern(4));
  EXPECT_TRUE(hybrid.kv_conv);
  for (auto k : swa.layer_pattern) EXPECT_EQ(k, LayerKind::kSwa);
  EXPECT_TRUE(swa.kv_conv);
  EXPECT_EQ(noconv.layer_pattern, hybrid.layer_pattern);
  EXPECT_FALSE(noconv.kv_conv);
  EXPECT_EQ(retrieval_arm_name(RetrievalArm::kAllSwa), "all_swa");
}

TEST(RetrievalArms, StagesRoundTrip) {
  const auto st = parse_retrieval_stages("48:4:0:15,96:2:64:7");
  ASSERT_EQ(st.size(), 2u);
  EXPECT_EQ(st[1].seq_len, 96u);
  EXPECT_EQ(st[1].max_needles, 2u);
  EXPECT_EQ(st[1].min_gap, 64u);
  EXPECT_EQ(st[1].steps, 7u);
  EXPECT_EQ(render_retrieval_stages(st), "48:4:0:15,96:2:64:7");
  RetrievalExperimentConfig cfg;
  EXPECT_EQ(parse_retrieval_stages(render_retrieval_stages(cfg.stages)).size(), cfg.stages.size());
  EXPECT_EQ(cfg.stages.back().seq_len, cfg.context_len);
  for (const char* bad : {"", "48:4:0", "48:4:0:1:2", "48:x:0:1", "0:4:0:1", "48:4:0:0", "48:4:0:1,"}) {
    EXPECT_EQ(kind_of([&] { parse_retrieval_stages(bad); }), ErrorKind::kConfig) << bad;
  }
}

TEST(RetrievalArms, CurriculumRunsEveryStage) {
  RetrievalExperimentConfig cfg;
  cfg.stages = {{24, 2, 0, 3}, {40, 2, 0, 2}};
  cfg.context_len = 40;
  cfg.train.warmup_steps = 1;
  cfg.train.decay_steps = 1;
  cfg.eval_per_bucket = 1;
  const auto r = run_retrieval_arm(cfg, RetrievalArm::kHybrid);
  EXPECT_EQ(r.metrics.size(), 5u);
  EXPECT_GT(r.report.evaluated, 0u);
  cfg.train.decay_steps = 5;
  EXPECT_EQ(kind_of([&] { run_retrieval_arm(cfg, RetrievalArm::kHybrid); }), ErrorKind::kConfig);
}
