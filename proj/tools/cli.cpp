#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <vector>

#include <CLI11.hpp>

#include "m1lab/data.hpp"
#include "m1lab/elo.hpp"
#include "m1lab/error.hpp"
#include "m1lab/eval.hpp"
#include "m1lab/model.hpp"
#include "m1lab/tokenizer.hpp"
#include "m1lab/trainer.hpp"

namespace m1lab::cli {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string render_value(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  if (v.is_number_float()) return fmt_num(v.get<double>());
  if (v.is_null()) return "-";
  return v.dump();
}

// ---------------------------------------------------------------------------
// Settings access

class Settings {
 public:
  explicit Settings(const Config& c) : c_(c) {}

  const std::string& str(const std::string& key) const {
    auto it = c_.find(key);
    if (it == c_.end()) fail(ErrorKind::kConfig, "missing setting '" + key + "'");
    return it->second;
  }
  std::string required_path(const std::string& key) const {
    const auto& v = str(key);
    if (v.empty()) fail(ErrorKind::kConfig, "setting '" + key + "' needs a path");
    return v;
  }
  std::uint64_t u64(const std::string& key) const {
    const auto& v = str(key);
    std::size_t used = 0;
    unsigned long long x = 0;
    try {
      x = std::stoull(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty() || v[0] == '-') fail(ErrorKind::kConfig, key + " must be a nonnegative integer, got '" + v + "'");
    return x;
  }
  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }
  double num(const std::string& key) const {
    const auto& v = str(key);
    std::size_t used = 0;
    double x = 0.0;
    try {
      x = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty() || !std::isfinite(x)) fail(ErrorKind::kConfig, key + " must be a finite number, got '" + v + "'");
    return x;
  }
  bool flag(const std::string& key) const {
    const auto& v = str(key);
    if (v == "true") return true;
    if (v == "false") return false;
    fail(ErrorKind::kConfig, key + " must be true or false, got '" + v + "'");
  }
  // "a:x,b:y" pairs
  std::vector<std::pair<std::string, std::string>> pairs(const std::string& key) const {
    std::vector<std::pair<std::string, std::string>> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      const auto colon = item.find(':');
      if (colon == std::string::npos || colon == 0) fail(ErrorKind::kConfig, key + ": expected name:value, got '" + item + "'");
      out.emplace_back(trim(item.substr(0, colon)), trim(item.substr(colon + 1)));
    }
    return out;
  }
  // every key under `prefix.` with the prefix removed
  std::map<std::string, std::string> section(const std::string& prefix) const {
    std::map<std::string, std::string> out;
    for (const auto& [k, v] : c_)
      if (k.rfind(prefix + ".", 0) == 0) out[k.substr(prefix.size() + 1)] = v;
    return out;
  }

 private:
  const Config& c_;
};

// ---------------------------------------------------------------------------
// Reports

struct Report {
  json j;

  Report(const std::string& command, const std::string& hash) {
    j["command"] = command;
    j["config_hash"] = hash;
    j["seeds"] = json::object();
    j["metrics"] = json::object();
    j["checks"] = json::array();
    j["tables"] = json::array();
    j["artifacts"] = json::array();
  }
  void seed(const std::string& k, std::uint64_t v) { j["seeds"][k] = v; }
  template <class T>
  void metric(const std::string& k, const T& v) {
    j["metrics"][k] = v;
  }
  void check(const std::string& name, double value, const std::string& relation, double threshold) {
    bool pass = false;
    if (relation == "<") pass = value < threshold;
    else if (relation == "<=") pass = value <= threshold;
    else if (relation == ">") pass = value > threshold;
    else if (relation == ">=") pass = value >= threshold;
    else if (relation == "==") pass = value == threshold;
    j["checks"].push_back({{"name", name}, {"value", value}, {"relation", relation}, {"threshold", threshold}, {"pass", pass}});
  }
  void table(const std::string& name, std::vector<std::string> columns, json rows) {
    j["tables"].push_back({{"name", name}, {"columns", columns}, {"rows", std::move(rows)}});
  }
  void artifact(const std::string& name) { j["artifacts"].push_back(name); }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::kIo, "cannot write " + path.string());
  f << text;
  if (!f) fail(ErrorKind::kIo, "write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void emit_report(const fs::path& dir, json report) {
  bool all = true;
  for (const auto& c : report["checks"]) all = all && c["pass"].get<bool>();
  report["status"] = report["checks"].empty() ? "n/a" : (all ? "PASS" : "FAIL");
  write_text(dir / "report.json", report.dump(2) + "\n");
  write_text(dir / "report.txt", render_report_text(report));
}

// ---------------------------------------------------------------------------
// Commands

struct Context {
  std::string command;
  Config config;
  fs::path out_dir;
  std::string hash;
  std::ostream* out = nullptr;
};

using Defaults = Config;

json category_rows(const std::vector<Document>& docs) {
  std::map<int, std::size_t> hist;
  for (const auto& d : docs)
    if (d.category) ++hist[*d.category];
  json rows = json::array();
  for (const auto& [cat, n] : hist) rows.push_back({cat, std::string(category_names()[static_cast<std::size_t>(cat - 1)]), n});
  return rows;
}

void cmd_dedup(Context& ctx) {
  Settings s(ctx.config);
  const auto docs = read_jsonl(s.required_path("io.input"));
  const auto out = dedup_global(docs);
  const std::string name = s.str("io.output");
  write_jsonl((ctx.out_dir / name).string(), out);
  Report r(ctx.command, ctx.hash);
  std::uint64_t total_before = 0, total_after = 0;
  for (const auto& d : docs) total_before += d.dup_count;
  for (const auto& d : out) total_after += d.dup_count;
  r.metric("documents_in", docs.size());
  r.metric("documents_out", out.size());
  r.metric("duplicates_removed", docs.size() - out.size());
  r.check("dup_count mass conserved", static_cast<double>(total_after), "==", static_cast<double>(total_before));
  r.artifact(name);
  emit_report(ctx.out_dir, r.j);
}

void cmd_score(Context& ctx) {
  Settings s(ctx.config);
  auto docs = read_jsonl(s.required_path("io.input"));
  const auto classifier = keyword_classifier();
  double entropy = 0.0, density = 0.0;
  for (auto& d : docs) {
    score_document(d);
    d.category = assign_category(d, classifier);
    entropy += d.quality["entropy"];
    density += d.quality["keyword_density"];
  }
  const std::string name = s.str("io.output");
  write_jsonl((ctx.out_dir / name).string(), docs);
  Report r(ctx.command, ctx.hash);
  r.metric("documents", docs.size());
  const double n = std::max<double>(1.0, static_cast<double>(docs.size()));
  r.metric("mean_entropy", entropy / n);
  r.metric("mean_keyword_density", density / n);
  r.table("categories", {"category", "name", "documents"}, category_rows(docs));
  r.artifact(name);
  emit_report(ctx.out_dir, r.j);
}

void cmd_upsample(Context& ctx) {
  Settings s(ctx.config);
  const auto docs = read_jsonl(s.required_path("io.input"));
  const std::string policy = s.str("upsample.policy");
  const int max_repeats = static_cast<int>(s.u64("upsample.max_repeats"));
  std::vector<Document> out;
  if (policy == "dup_count") {
    auto p = UpsamplePolicy::by_dup_count();
    p.max_repeats = max_repeats;
    out = upsample_by_dup_count(docs, p);
  } else if (policy == "quality") {
    auto p = UpsamplePolicy::top_fraction(s.num("upsample.fraction"), static_cast<int>(s.u64("upsample.repeats")));
    p.max_repeats = max_repeats;
    out = bucket_upsample_by_quality(docs, s.str("upsample.dimension"), p, s.num("upsample.drop_bottom"));
  } else {
    fail(ErrorKind::kConfig, "upsample.policy must be dup_count or quality, got '" + policy + "'");
  }
  std::map<std::string, std::size_t> copies;
  for (const auto& d : out) ++copies[d.id];
  std::size_t most = 0;
  for (const auto& [id, n] : copies) most = std::max(most, n);
  const std::string name = s.str("io.output");
  write_jsonl((ctx.out_dir / name).string(), out);
  Report r(ctx.command, ctx.hash);
  r.metric("documents_in", docs.size());
  r.metric("documents_out", out.size());
  r.check("most copies of one document", static_cast<double>(most), "<=", static_cast<double>(max_repeats));
  r.artifact(name);
  emit_report(ctx.out_dir, r.j);
}

void cmd_mix(Context& ctx) {
  Settings s(ctx.config);
  std::map<std::string, std::vector<Document>> streams;
  for (const auto& [stream, path] : s.pairs("mix.streams")) {
    auto docs = read_jsonl(path);
    for (auto& d : docs) d.source = stream;
    streams[stream] = std::move(docs);
  }
  std::map<std::string, double> ratios;
  for (const auto& [stream, w] : s.pairs("mix.ratios")) {
    Config one{{"w", w}};
    ratios[stream] = Settings(one).num("w");
  }
  const std::size_t n = s.size("mix.n");
  const auto seed = s.u64("run.seed");
  const auto out = mix_streams(streams, ratios, n, seed);
  std::map<std::string, std::size_t> drawn;
  for (const auto& d : out) ++drawn[d.source];
  double total_w = 0.0;
  for (const auto& [k, w] : ratios) total_w += w;
  json rows = json::array();
  Report r(ctx.command, ctx.hash);
  r.seed("run.seed", seed);
  double worst = 0.0;
  for (const auto& [k, w] : ratios) {
    const double target = w / total_w;
    const double got = n ? static_cast<double>(drawn[k]) / static_cast<double>(n) : 0.0;
    worst = std::max(worst, std::abs(got - target));
    rows.push_back({k, target, got, drawn[k]});
  }
  r.table("proportions", {"stream", "target", "empirical", "documents"}, rows);
  r.metric("documents", out.size());
  r.check("largest proportion deviation", worst, "<=", s.num("mix.tolerance"));
  const std::string name = s.str("io.output");
  write_jsonl((ctx.out_dir / name).string(), out);
  r.artifact(name);
  emit_report(ctx.out_dir, r.j);
}

std::vector<std::string> texts_of(const std::vector<Document>& docs) {
  std::vector<std::string> t;
  t.reserve(docs.size());
  for (const auto& d : docs) t.push_back(d.text);
  return t;
}

TokenizerRules rules_from(const Settings& s) {
  TokenizerRules r;
  r.split_digits = s.flag("tokenizer.split_digits");
  r.char_coverage = s.num("tokenizer.char_coverage");
  return r;
}

void cmd_tokenize_train(Context& ctx) {
  Settings s(ctx.config);
  const auto texts = texts_of(read_jsonl(s.required_path("io.input")));
  const auto model = train_bpe(texts, s.size("tokenizer.vocab_size"), rules_from(s));
  const std::string name = s.str("io.output");
  save_tokenizer((ctx.out_dir / name).string(), model);
  Report r(ctx.command, ctx.hash);
  r.metric("vocab_size", model.vocab_size());
  r.metric("merges", model.merges().size());
  r.metric("tokens_per_byte", tokens_per_byte(model, texts));
  std::size_t bad = 0;
  for (const auto& t : texts) bad += model.decode(model.encode(t)) != t;
  r.check("round-trip failures", static_cast<double>(bad), "==", 0.0);
  r.artifact(name);
  emit_report(ctx.out_dir, r.j);
}

void cmd_tokenize_merge(Context& ctx) {
  Settings s(ctx.config);
  const auto general = load_tokenizer(s.required_path("tokenizer.general"));
  const auto domain = load_tokenizer(s.required_path("tokenizer.domain"));
  const auto merged = merge_tokenizers(general, domain);
  const std::string name = s.str("io.output");
  save_tokenizer((ctx.out_dir / name).string(), merged);
  std::set<std::string> uni(general.vocab().begin(), general.vocab().end());
  uni.insert(domain.vocab().begin(), domain.vocab().end());
  Report r(ctx.command, ctx.hash);
  r.metric("general_vocab", general.vocab_size());
  r.metric("domain_vocab", domain.vocab_size());
  r.metric("merged_vocab", merged.vocab_size());
  r.check("merged vocab minus set union", static_cast<double>(merged.vocab_size()) - static_cast<double>(uni.size()), "==", 0.0);
  const std::string eval_path = s.str("io.input");
  if (!eval_path.empty()) {
    const auto texts = texts_of(read_jsonl(eval_path));
    const double g = tokens_per_byte(general, texts), m = tokens_per_byte(merged, texts);
    r.metric("general_tokens_per_byte", g);
    r.metric("merged_tokens_per_byte", m);
    r.check("merged minus general tokens per byte", m - g, "<=", 0.0);
  }
  r.artifact(name);
  emit_report(ctx.out_dir, r.j);
}

void cmd_pack(Context& ctx) {
  Settings s(ctx.config);
  const auto docs = read_jsonl(s.required_path("io.input"));
  const auto tok = load_tokenizer(s.required_path("tokenizer.path"));
  std::vector<std::vector<TokenId>> ids;
  ids.reserve(docs.size());
  for (const auto& d : docs) ids.push_back(tok.encode(d.text));
  const auto packed = pack_sequences(ids, s.size("pack.seq_len"), static_cast<TokenId>(s.u64("pack.pad_id")));
  const std::string name = s.str("io.output");
  write_packed((ctx.out_dir / name).string(), packed);
  const auto& st = packed.stats;
  Report r(ctx.command, ctx.hash);
  r.metric("sequences", packed.sequences.size());
  r.metric("tokens_total", st.tokens_total);
  r.metric("tokens_packed", st.tokens_packed);
  r.metric("tokens_padded", st.tokens_padded);
  r.metric("tokens_truncated", st.tokens_truncated);
  r.metric("truncation_events", st.truncation_events);
  const double slots = static_cast<double>(packed.sequences.size() * packed.seq_len);
  r.metric("padding_fraction", slots > 0 ? static_cast<double>(st.tokens_padded) / slots : 0.0);
  r.check("tokens lost in packing", static_cast<double>(st.tokens_total) - static_cast<double>(st.tokens_packed), "==", 0.0);
  r.artifact(name);
  emit_report(ctx.out_dir, r.j);
}

ModelConfig model_from(const Settings& s) { return model_config_from_map(s.section("model")); }

std::vector<std::vector<TokenId>> markov_docs(const Settings& s, std::size_t vocab, std::size_t n_docs) {
  return markov_corpus(vocab, n_docs, s.size("data.min_len"), s.size("data.max_len"), s.size("data.branching"), s.u64("data.seed"));
}

void cmd_train(Context& ctx) {
  Settings s(ctx.config);
  const ModelConfig model = model_from(s);
  TrainConfig tc;
  tc.peak_lr = s.num("train.peak_lr");
  tc.floor_lr = s.num("train.floor_lr");
  tc.warmup_steps = s.u64("train.warmup_steps");
  tc.stable_steps = s.u64("train.stable_steps");
  tc.decay_steps = s.u64("train.decay_steps");
  tc.beta1 = s.num("train.beta1");
  tc.beta2 = s.num("train.beta2");
  tc.weight_decay = s.num("train.weight_decay");
  tc.grad_clip_norm = s.num("train.grad_clip_norm");
  tc.agc = s.flag("train.agc");
  const std::size_t ctx_len = s.size("train.context_len");
  const std::size_t per_batch = s.size("train.batch_sequences");
  tc.batch_tokens = per_batch * ctx_len;
  tc.validate();
  StageSpec stage{s.u64("train.tokens"), ctx_len, s.num("train.rope_base"), s.str("data.source")};

  PackedBatch packed;
  const std::string source = s.str("data.source");
  if (source == "markov") {
    packed = pack_sequences(markov_docs(s, model.vocab_size, s.size("data.markov_docs")), ctx_len, 0);
  } else if (source == "packed") {
    packed = read_packed(s.required_path("data.path"));
  } else {
    fail(ErrorKind::kConfig, "data.source must be markov or packed, got '" + source + "'");
  }
  const auto seed = s.u64("train.model_seed");
  ModelParams params = build_model(model, seed);
  TrainState state = make_train_state(params);
  run_stage(params, model, stage, packed_batches(packed, per_batch), tc, state);

  write_metrics_csv((ctx.out_dir / "metrics.csv").string(), state.metrics);
  save_checkpoint((ctx.out_dir / "checkpoint.bin").string(), model, params);
  Report r(ctx.command, ctx.hash);
  r.seed("train.model_seed", seed);
  r.seed("data.seed", s.u64("data.seed"));
  if (state.metrics.empty()) fail(ErrorKind::kConfig, "train.tokens is smaller than one batch");
  const auto& last = state.metrics.back();
  std::size_t skipped = 0;
  for (const auto& m : state.metrics) skipped += m.skipped;
  r.metric("steps", state.step);
  r.metric("tokens", state.tokens);
  r.metric("skipped_steps", skipped);
  r.metric("initial_loss", state.metrics.front().loss);
  r.metric("final_loss", last.loss);
  r.check("final loss vs 0.7 ln V", last.loss, "<", 0.7 * std::log(static_cast<double>(model.vocab_size)));
  r.artifact("metrics.csv");
  r.artifact("checkpoint.bin");
  emit_report(ctx.out_dir, r.j);
  *ctx.out << "final loss " << fmt_num(last.loss) << " after " << state.step << " steps\n";
}

json depth_rows(const NiahReport& rep) {
  json rows = json::array();
  for (const auto& b : rep.per_depth) rows.push_back({b.depth_lo, b.depth_hi, b.cases, b.correct, b.accuracy()});
  return rows;
}

RetrievalArm parse_arm(const std::string& v) {
  if (v == "hybrid") return RetrievalArm::kHybrid;
  if (v == "all_swa") return RetrievalArm::kAllSwa;
  if (v == "no_conv") return RetrievalArm::kNoConv;
  fail(ErrorKind::kConfig, "niah.arm must be hybrid, all_swa or no_conv, got '" + v + "'");
}

void cmd_eval_niah(Context& ctx) {
  Settings s(ctx.config);
  NiahReport rep;
  std::vector<std::pair<std::string, std::string>> echo;
  Report r(ctx.command, ctx.hash);
  const std::string ckpt = s.str("io.checkpoint");
  if (!ckpt.empty()) {
    auto [model, params] = load_checkpoint(ckpt);
    NiahSpec spec = default_niah_spec(model.vocab_size);
    spec.key_len = s.size("niah.key_len");
    spec.value_len = s.size("niah.value_len");
    const std::size_t context = s.size("niah.context_len");
    if (context < spec.needle_len() + spec.key_len) fail(ErrorKind::kConfig, "niah.context_len too small for one needle");
    const auto cases = niah_suite(context - spec.key_len - spec.value_len, s.size("niah.per_bucket"), spec, s.u64("niah.seed"));
    rep = eval_niah(params, model, cases, context);
    echo = {{"source", "checkpoint"}, {"checkpoint", ckpt}};
    r.seed("niah.seed", s.u64("niah.seed"));
  } else {
    RetrievalExperimentConfig cfg;
    cfg.model = model_from(s);
    cfg.context_len = s.size("niah.context_len");
    cfg.stages = parse_retrieval_stages(s.str("niah.stages"));
    cfg.sequences_per_batch = s.size("niah.batch_sequences");
    cfg.train.peak_lr = s.num("niah.peak_lr");
    cfg.train.floor_lr = s.num("niah.floor_lr");
    cfg.train.warmup_steps = s.u64("niah.warmup_steps");
    cfg.train.decay_steps = s.u64("niah.decay_steps");
    if (cfg.train.warmup_steps + cfg.train.decay_steps > cfg.total_steps())
      fail(ErrorKind::kConfig, "niah.warmup_steps + niah.decay_steps exceed the stage steps");
    cfg.model_seed = s.u64("niah.model_seed");
    cfg.data_seed = s.u64("niah.data_seed");
    cfg.eval_seed = s.u64("niah.seed");
    cfg.eval_per_bucket = s.size("niah.per_bucket");
    cfg.key_len = s.size("niah.key_len");
    cfg.value_len = s.size("niah.value_len");
    cfg.distinct_values = s.flag("niah.distinct_values");
    cfg.conv_history_tap = s.num("niah.conv_history_tap");
    const RetrievalArm arm = parse_arm(s.str("niah.arm"));
    auto res = run_retrieval_arm(cfg, arm);
    rep = res.report;
    write_metrics_csv((ctx.out_dir / "metrics.csv").string(), res.metrics);
    r.artifact("metrics.csv");
    echo = {{"source", "trained"}, {"arm", std::string(retrieval_arm_name(arm))}};
    r.seed("niah.model_seed", cfg.model_seed);
    r.seed("niah.data_seed", cfg.data_seed);
    r.seed("niah.seed", cfg.eval_seed);
  }
  write_text(ctx.out_dir / "niah.json", niah_report_json(rep, echo));
  std::ofstream csv(ctx.out_dir / "niah.csv", std::ios::binary);
  write_niah_csv(csv, rep);
  r.metric("protocol", "synthetic token-level needle-in-a-haystack (stand-in)");
  r.metric("accuracy", rep.accuracy());
  r.metric("evaluated", rep.evaluated);
  r.metric("skipped", rep.skipped);
  r.metric("beyond_window_cases", rep.beyond_window_cases);
  r.metric("beyond_window_accuracy", rep.beyond_window_accuracy());
  r.check("beyond-window accuracy", rep.beyond_window_accuracy(), ">=", s.num("niah.min_beyond_window_accuracy"));
  r.table("per_depth", {"depth_lo", "depth_hi", "cases", "correct", "accuracy"}, depth_rows(rep));
  r.artifact("niah.json");
  r.artifact("niah.csv");
  emit_report(ctx.out_dir, r.j);
}

void cmd_eval_ppl(Context& ctx) {
  Settings s(ctx.config);
  auto [model, params] = load_checkpoint(s.required_path("io.checkpoint"));
  std::vector<std::vector<TokenId>> corpus;
  const std::string source = s.str("data.source");
  if (source == "markov") {
    // held out: the documents that follow the training prefix of the same chain
    const std::size_t skip = s.size("data.markov_docs"), n = s.size("ppl.docs");
    auto all = markov_docs(s, model.vocab_size, skip + n);
    corpus.assign(all.begin() + static_cast<std::ptrdiff_t>(skip), all.end());
  } else if (source == "packed") {
    const auto packed = read_packed(s.required_path("data.path"));
    for (std::size_t q = 0; q < packed.sequences.size(); ++q) {
      const auto& seq = packed.sequences[q];
      const auto& sid = packed.sample_ids[q];
      for (std::size_t i = 0; i < seq.size();) {
        std::size_t j = i;
        while (j < seq.size() && sid[j] == sid[i]) ++j;
        if (sid[i] != 0) corpus.emplace_back(seq.begin() + static_cast<std::ptrdiff_t>(i), seq.begin() + static_cast<std::ptrdiff_t>(j));
        i = j;
      }
    }
  } else {
    fail(ErrorKind::kConfig, "data.source must be markov or packed, got '" + source + "'");
  }
  const auto res = eval_perplexity(params, model, corpus);
  json j;
  j["perplexity"] = res.perplexity;
  j["mean_nll"] = res.mean_nll;
  j["tokens"] = res.tokens;
  j["documents"] = corpus.size();
  write_text(ctx.out_dir / "ppl.json", j.dump(2) + "\n");
  Report r(ctx.command, ctx.hash);
  r.seed("data.seed", s.u64("data.seed"));
  r.metric("perplexity", res.perplexity);
  r.metric("mean_nll", res.mean_nll);
  r.metric("tokens", res.tokens);
  r.metric("documents", corpus.size());
  r.check("perplexity vs uniform", res.perplexity, "<", static_cast<double>(model.vocab_size));
  r.artifact("ppl.json");
  emit_report(ctx.out_dir, r.j);
  *ctx.out << "perplexity " << fmt_num(res.perplexity) << " over " << res.tokens << " tokens\n";
}

void cmd_elo_demo(Context& ctx) {
  Settings s(ctx.config);
  const auto seed = s.u64("elo.seed");
  auto toy = reasoning_toy_problem(seed, s.size("elo.alphabet_size"), s.size("elo.cot_length"), s.size("elo.answer_vocab"),
                                   s.size("elo.answer_length"));
  const std::string mode_name = s.str("elo.mode");
  EloGradientMode mode;
  if (mode_name == "cot_only") mode = EloGradientMode::kCotOnly;
  else if (mode_name == "joint") mode = EloGradientMode::kJoint;
  else fail(ErrorKind::kConfig, "elo.mode must be cot_only or joint, got '" + mode_name + "'");
  const auto rows = train_elo(toy.policy, toy.task, s.size("elo.steps"), s.num("elo.lr"), mode);

  std::ostringstream csv;
  csv << "step,l_elo,l_upper,answer_prob\n";
  auto& out = *ctx.out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%6s  %12s  %12s  %10s  %s\n", "step", "L_ELO", "L_upper", "pi(A|Q)", "L_ELO<=L_upper");
  out << buf;
  std::size_t violations = 0;
  json table = json::array();
  for (const auto& row : rows) {
    const bool ok = row.l_elo <= row.l_upper;
    violations += !ok;
    std::snprintf(buf, sizeof buf, "%6zu  %12.6f  %12.6f  %10.6f  %s\n", row.step, row.l_elo, row.l_upper, row.answer_prob, ok ? "yes" : "NO");
    out << buf;
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", row.step, row.l_elo, row.l_upper, row.answer_prob);
    csv << buf;
    table.push_back({row.step, row.l_elo, row.l_upper, row.answer_prob});
  }
  write_text(ctx.out_dir / "elo_trace.csv", csv.str());
  Report r(ctx.command, ctx.hash);
  r.seed("elo.seed", seed);
  r.metric("steps", rows.back().step);
  r.metric("initial_answer_prob", rows.front().answer_prob);
  r.metric("final_answer_prob", rows.back().answer_prob);
  r.check("rows with L_ELO > L_upper", static_cast<double>(violations), "==", 0.0);
  r.check("final pi(A|Q)", rows.back().answer_prob, ">", s.num("elo.min_answer_prob"));
  r.table("trace", {"step", "l_elo", "l_upper", "answer_prob"}, table);
  r.artifact("elo_trace.csv");
  emit_report(ctx.out_dir, r.j);
}

void cmd_report(Context& ctx) {
  const auto j = json::parse(read_text(ctx.out_dir / "report.json"));
  write_text(ctx.out_dir / "report.json", j.dump(2) + "\n");
  write_text(ctx.out_dir / "report.txt", render_report_text(j));
}

// ---------------------------------------------------------------------------
// Command table

Defaults model_defaults(const ModelConfig& m) {
  Defaults d;
  for (const auto& [k, v] : model_config_to_map(m)) d["model." + k] = v;
  return d;
}

ModelConfig two_layer_desk() {
  ModelConfig m;
  m.n_layers = 2;
  m.layer_pattern = {LayerKind::kSwa, LayerKind::kGlobal};
  return m;
}

Defaults markov_defaults() {
  return {{"data.source", "markov"}, {"data.path", ""},         {"data.seed", "1"},     {"data.markov_docs", "1000"},
          {"data.min_len", "64"},    {"data.max_len", "400"}, {"data.branching", "4"}};
}

struct CommandSpec {
  std::string name;
  std::string help;
  std::function<Defaults()> defaults;
  std::function<void(Context&)> run;
};

const std::vector<CommandSpec>& commands() {
  static const std::vector<CommandSpec> table = {
      {"dedup", "collapse duplicate documents and sum dup_count",
       [] { return Defaults{{"io.input", ""}, {"io.output", "deduped.jsonl"}}; }, cmd_dedup},
      {"score", "quality scores and category assignment",
       [] { return Defaults{{"io.input", ""}, {"io.output", "scored.jsonl"}}; }, cmd_score},
      {"upsample", "repeat documents by dup_count or quality bucket",
       [] {
         return Defaults{{"io.input", ""},           {"io.output", "upsampled.jsonl"}, {"upsample.policy", "dup_count"},
                         {"upsample.max_repeats", "10"}, {"upsample.dimension", "entropy"}, {"upsample.fraction", "0.1"},
                         {"upsample.repeats", "2"},   {"upsample.drop_bottom", "0"}};
       },
       cmd_upsample},
      {"mix", "sample documents from named streams at target ratios",
       [] {
         return Defaults{{"io.output", "mixed.jsonl"}, {"mix.streams", ""}, {"mix.ratios", ""},
                         {"mix.n", "1000"},            {"mix.tolerance", "0.05"}, {"run.seed", "1"}};
       },
       cmd_mix},
      {"tokenize-train", "train a byte-level BPE tokenizer",
       [] {
         return Defaults{{"io.input", ""},
                         {"io.output", "tokenizer.txt"},
                         {"tokenizer.vocab_size", "512"},
                         {"tokenizer.split_digits", "true"},
                         {"tokenizer.char_coverage", "0.9999"}};
       },
       cmd_tokenize_train},
      {"tokenize-merge", "merge a general and a domain tokenizer",
       [] {
         return Defaults{{"io.input", ""}, {"io.output", "merged_tokenizer.txt"}, {"tokenizer.general", ""}, {"tokenizer.domain", ""}};
       },
       cmd_tokenize_merge},
      {"pack", "tokenize documents and pack them into fixed-length sequences",
       [] {
         return Defaults{{"io.input", ""}, {"io.output", "packed.bin"}, {"tokenizer.path", ""}, {"pack.seq_len", "256"}, {"pack.pad_id", "0"}};
       },
       cmd_pack},
      {"train", "pretrain a desk model and write metrics and a checkpoint",
       [] {
         Defaults d = model_defaults(two_layer_desk());
         d.merge(markov_defaults());
         Defaults t{{"train.peak_lr", "0.003"},     {"train.floor_lr", "0.0003"}, {"train.warmup_steps", "10"},
                    {"train.stable_steps", "50"},   {"train.decay_steps", "40"},  {"train.beta1", "0.9"},
                    {"train.beta2", "0.95"},        {"train.weight_decay", "0.1"}, {"train.grad_clip_norm", "1"},
                    {"train.agc", "true"},          {"train.tokens", "200704"},   {"train.context_len", "256"},
                    {"train.batch_sequences", "8"}, {"train.rope_base", "100000"}, {"train.model_seed", "7"}};
         d.merge(t);
         return d;
       },
       cmd_train},
      {"eval-niah", "needle-in-a-haystack retrieval; trains a retrieval arm when no checkpoint is given",
       [] {
         const RetrievalExperimentConfig e;
         Defaults d = model_defaults(e.model);
         Defaults n{{"io.checkpoint", ""},
                    {"niah.arm", "hybrid"},
                    {"niah.context_len", std::to_string(e.context_len)},
                    {"niah.per_bucket", std::to_string(e.eval_per_bucket)},
                    {"niah.seed", std::to_string(e.eval_seed)},
                    {"niah.key_len", std::to_string(e.key_len)},
                    {"niah.value_len", std::to_string(e.value_len)},
                    {"niah.stages", render_retrieval_stages(e.stages)},
                    {"niah.batch_sequences", std::to_string(e.sequences_per_batch)},
                    {"niah.peak_lr", fmt_num(e.train.peak_lr)},
                    {"niah.floor_lr", fmt_num(e.train.floor_lr)},
                    {"niah.warmup_steps", std::to_string(e.train.warmup_steps)},
                    {"niah.decay_steps", std::to_string(e.train.decay_steps)},
                    {"niah.model_seed", std::to_string(e.model_seed)},
                    {"niah.data_seed", std::to_string(e.data_seed)},
                    {"niah.distinct_values", e.distinct_values ? "true" : "false"},
                    {"niah.conv_history_tap", fmt_num(e.conv_history_tap)},
                    {"niah.min_beyond_window_accuracy", "0.9"}};
         d.merge(n);
         return d;
       },
       cmd_eval_niah},
      {"eval-ppl", "perplexity of a checkpoint on held-out documents",
       [] {
         Defaults d = markov_defaults();
         d["io.checkpoint"] = "";
         d["ppl.docs"] = "50";
         return d;
       },
       cmd_eval_ppl},
      {"elo-demo", "ELO objective on the reasoning toy task",
       [] {
         return Defaults{{"elo.seed", "1"},          {"elo.alphabet_size", "4"}, {"elo.cot_length", "3"},
                         {"elo.answer_vocab", "8"},  {"elo.answer_length", "2"}, {"elo.steps", "100"},
                         {"elo.lr", "1"},            {"elo.mode", "cot_only"},   {"elo.min_answer_prob", "0.9"}};
       },
       cmd_elo_demo},
      {"report", "re-render report.txt and report.json from a run directory", [] { return Defaults{}; }, cmd_report},
  };
  return table;
}

Config resolve(const Defaults& defaults, const Config& given) {
  Config c = defaults;
  for (const auto& [k, v] : given) {
    if (!c.count(k)) fail(ErrorKind::kConfig, "unknown setting '" + k + "' for this command");
    c[k] = v;
  }
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------

Config parse_config_text(std::string_view text) {
  Config c;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) fail(ErrorKind::kConfig, "line " + std::to_string(line_no) + ": expected 'section.key = value'");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    const auto dot = key.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == key.size() || key.find_first_of(" \t") != std::string::npos)
      fail(ErrorKind::kConfig, "line " + std::to_string(line_no) + ": key '" + key + "' is not of the form section.key");
    if (!c.emplace(key, value).second) fail(ErrorKind::kConfig, "line " + std::to_string(line_no) + ": '" + key + "' set twice");
  }
  return c;
}

Config read_config_file(const std::string& path) { return parse_config_text(read_text(path)); }

std::string render_config(const std::string& command, const Config& config) {
  std::string out = "# m1lab " + command + " resolved configuration\n";
  for (const auto& [k, v] : config) out += k + " = " + v + "\n";
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string render_report_text(const nlohmann::ordered_json& report) {
  std::ostringstream o;
  o << "m1lab " << report.value("command", std::string("?")) << "\n";
  o << "config hash: " << report.value("config_hash", std::string("?")) << "\n";
  if (report.contains("status")) o << "status: " << render_value(report["status"]) << "\n";
  if (report.contains("seeds") && !report["seeds"].empty()) {
    o << "seeds:";
    for (const auto& [k, v] : report["seeds"].items()) o << " " << k << "=" << render_value(v);
    o << "\n";
  }
  if (report.contains("metrics") && !report["metrics"].empty()) {
    o << "metrics:\n";
    for (const auto& [k, v] : report["metrics"].items()) o << "  " << k << ": " << render_value(v) << "\n";
  }
  if (report.contains("checks") && !report["checks"].empty()) {
    o << "checks:\n";
    for (const auto& c : report["checks"]) {
      o << "  [" << (c["pass"].get<bool>() ? "PASS" : "FAIL") << "] " << c["name"].get<std::string>() << ": "
        << render_value(c["value"]) << " " << c["relation"].get<std::string>() << " " << render_value(c["threshold"]) << "\n";
    }
  }
  if (report.contains("tables")) {
    for (const auto& t : report["tables"]) {
      o << "table " << t["name"].get<std::string>() << ":\n";
      std::vector<std::vector<std::string>> cells;
      std::vector<std::string> head;
      for (const auto& c : t["columns"]) head.push_back(c.get<std::string>());
      cells.push_back(head);
      for (const auto& row : t["rows"]) {
        std::vector<std::string> line;
        for (const auto& v : row) line.push_back(render_value(v));
        cells.push_back(line);
      }
      std::vector<std::size_t> width(head.size(), 0);
      for (const auto& line : cells)
        for (std::size_t i = 0; i < line.size() && i < width.size(); ++i) width[i] = std::max(width[i], line[i].size());
      for (const auto& line : cells) {
        o << " ";
        for (std::size_t i = 0; i < line.size(); ++i) {
          o << " " << line[i];
          if (i + 1 < line.size()) o << std::string(width[i] - line[i].size(), ' ');
        }
        o << "\n";
      }
    }
  }
  if (report.contains("artifacts") && !report["artifacts"].empty()) {
    o << "artifacts:";
    for (const auto& a : report["artifacts"]) o << " " << a.get<std::string>();
    o << "\n";
  }
  return o.str();
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"m1lab: desk-scale hybrid-attention training laboratory", "m1lab"};
  app.require_subcommand(1);
  std::string config_path, out_dir = "m1lab_out", input;
  std::vector<std::string> sets;
  std::map<std::string, const CommandSpec*> by_name;
  for (const auto& spec : commands()) {
    auto* sc = app.add_subcommand(spec.name, spec.help);
    sc->add_option("-c,--config", config_path, "section.key = value settings file");
    sc->add_option("-s,--set", sets, "override one setting, section.key=value (repeatable)");
    sc->add_option("-o,--out", out_dir, "output directory")->capture_default_str();
    sc->add_option("-i,--input", input, "shorthand for --set io.input=PATH");
    by_name[spec.name] = &spec;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "m1lab: " << e.what() << "\n" << app.help();
    return 2;
  }
  const CommandSpec* spec = nullptr;
  for (auto* sc : app.get_subcommands()) spec = by_name.at(sc->get_name());

  try {
    Context ctx;
    ctx.command = spec->name;
    ctx.out = &out;
    ctx.out_dir = out_dir;
    Config given;
    if (!config_path.empty()) given = read_config_file(config_path);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) fail(ErrorKind::kConfig, "--set expects section.key=value, got '" + kv + "'");
      given[trim(kv.substr(0, eq))] = trim(kv.substr(eq + 1));
    }
    if (!input.empty()) given["io.input"] = input;
    ctx.config = resolve(spec->defaults(), given);
    std::error_code ec;
    fs::create_directories(ctx.out_dir, ec);
    if (ec) fail(ErrorKind::kIo, "cannot create output directory " + out_dir + ": " + ec.message());
    if (spec->name != "report") {
      const std::string resolved = render_config(spec->name, ctx.config);
      ctx.hash = hex64(fnv1a64(resolved));
      write_text(ctx.out_dir / "resolved.cfg", resolved);
    }
    spec->run(ctx);
    if (spec->name != "report") {
      out << "wrote " << (ctx.out_dir / "report.txt").string() << " (config " << ctx.hash << ")\n";
    }
    return 0;
  } catch (const Error& e) {
    err << "m1lab " << spec->name << ": " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "m1lab " << spec->name << ": data error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "m1lab " << spec->name << ": io error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace m1lab::cli
