#include "m1lab/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "m1lab/error.hpp"
#include "m1lab/rng.hpp"

namespace m1lab {

namespace {

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

// Lower-cased ASCII alphanumeric words; every other byte separates.
std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

const std::array<std::string_view, kNumCategories> kCategoryNames = {
    "medicine",  "biology",    "chemistry", "physics",     "mathematics", "computing", "engineering",
    "finance",   "law",        "education", "history",     "geography",   "politics",  "military",
    "arts",      "literature", "music",     "sports",      "entertainment", "commerce", "news",
    "social",    "travel",     "food",      "agriculture", "environment", "religion"};

const std::array<std::vector<std::string_view>, kNumCategories> kCategoryKeywords = {{
    {"patient", "clinical", "disease", "diagnosis", "treatment", "hospital", "symptom", "drug"},
    {"cell", "gene", "protein", "organism", "species", "evolution", "enzyme", "dna"},
    {"molecule", "reaction", "compound", "acid", "catalyst", "solvent", "bond", "oxidation"},
    {"energy", "quantum", "particle", "force", "velocity", "momentum", "gravity", "photon"},
    {"theorem", "proof", "equation", "integral", "matrix", "lemma", "algebra", "polynomial"},
    {"software", "algorithm", "compiler", "function", "database", "server", "code", "program"},
    {"circuit", "bridge", "turbine", "voltage", "design", "structure", "mechanical", "torque"},
    {"market", "stock", "investment", "bank", "interest", "bond", "inflation", "portfolio"},
    {"court", "statute", "contract", "plaintiff", "judge", "attorney", "lawsuit", "verdict"},
    {"student", "teacher", "school", "curriculum", "classroom", "exam", "lesson", "university"},
    {"empire", "dynasty", "century", "ancient", "war", "revolution", "medieval", "king"},
    {"river", "mountain", "continent", "climate", "region", "ocean", "desert", "latitude"},
    {"election", "parliament", "policy", "government", "senator", "vote", "party", "minister"},
    {"army", "soldier", "weapon", "troops", "battle", "navy", "missile", "commander"},
    {"painting", "sculpture", "gallery", "artist", "canvas", "exhibition", "museum", "portrait"},
    {"novel", "poem", "author", "chapter", "poetry", "narrative", "fiction", "prose"},
    {"song", "melody", "guitar", "album", "concert", "orchestra", "rhythm", "piano"},
    {"match", "team", "player", "goal", "league", "tournament", "coach", "score"},
    {"movie", "film", "actor", "celebrity", "television", "show", "episode", "drama"},
    {"product", "price", "shipping", "discount", "customer", "order", "retail", "shop"},
    {"reported", "breaking", "announced", "press", "journalist", "headline", "today", "according"},
    {"friend", "post", "follow", "share", "comment", "like", "community", "online"},
    {"hotel", "flight", "tourist", "trip", "airport", "destination", "passport", "vacation"},
    {"recipe", "cooking", "flavor", "ingredient", "restaurant", "dish", "bake", "meal"},
    {"crop", "farm", "harvest", "soil", "livestock", "irrigation", "fertilizer", "seed"},
    {"pollution", "emission", "ecosystem", "recycling", "carbon", "wildlife", "conservation", "sustainable"},
    {"temple", "prayer", "faith", "church", "scripture", "god", "ritual", "belief"},
}};

const std::unordered_set<std::string>& all_keywords() {
  static const std::unordered_set<std::string> set = [] {
    std::unordered_set<std::string> s;
    for (const auto& list : kCategoryKeywords)
      for (auto w : list) s.emplace(w);
    return s;
  }();
  return set;
}

void check_policy(const UpsamplePolicy& p) {
  if (p.max_repeats < 1) fail(ErrorKind::kPolicy, "max_repeats must be positive");
  if (p.kind == UpsamplePolicy::Kind::kTopFraction) {
    if (!(p.fraction > 0.0 && p.fraction <= 1.0)) fail(ErrorKind::kPolicy, "fraction must lie in (0, 1]");
    if (p.repeats < 1) fail(ErrorKind::kPolicy, "repeats must be positive");
    if (p.repeats > p.max_repeats) {
      fail(ErrorKind::kPolicy, "repeats " + std::to_string(p.repeats) + " exceeds max_repeats " +
                                   std::to_string(p.max_repeats));
    }
  }
  int prev = 0;
  for (const auto& [count, reps] : p.count_to_repeats) {
    if (count < 1 || reps < 1) fail(ErrorKind::kPolicy, "count_to_repeats entries must be positive");
    if (reps < prev) fail(ErrorKind::kPolicy, "count_to_repeats is not monotone at dup_count " + std::to_string(count));
    prev = reps;
  }
}

std::size_t floor_share(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

template <class T>
void put_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) fail(ErrorKind::kData, "packed file truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace

void validate_document(const Document& doc) {
  if (doc.dup_count < 1) fail(ErrorKind::kData, "document " + doc.id + ": dup_count must be >= 1");
  for (const auto& [dim, score] : doc.quality) {
    if (!(score >= 0.0 && score <= 1.0)) fail(ErrorKind::kData, "document " + doc.id + ": quality " + dim + " outside [0,1]");
  }
  if (doc.category && (*doc.category < 1 || *doc.category > kNumCategories)) {
    fail(ErrorKind::kData, "document " + doc.id + ": category outside 1..27");
  }
}

std::string canonical_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (unsigned char c : text) {
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(c));
  }
  return out;
}

std::vector<Document> dedup_global(const std::vector<Document>& docs) {
  std::unordered_set<std::string_view> ids;
  for (const auto& d : docs) {
    if (!ids.insert(d.id).second) fail(ErrorKind::kData, "duplicate document id " + d.id);
  }
  std::vector<Document> out;
  std::unordered_map<std::string, std::size_t> first;
  for (const auto& d : docs) {
    auto [it, fresh] = first.try_emplace(canonical_text(d.text), out.size());
    if (fresh) {
      out.push_back(d);
    } else {
      out[it->second].dup_count += d.dup_count;
    }
  }
  return out;
}

UpsamplePolicy UpsamplePolicy::by_dup_count(std::map<std::uint64_t, int> table) {
  UpsamplePolicy p;
  p.kind = Kind::kByDupCount;
  p.count_to_repeats = std::move(table);
  return p;
}

UpsamplePolicy UpsamplePolicy::top_fraction(double fraction, int repeats) {
  UpsamplePolicy p;
  p.kind = Kind::kTopFraction;
  p.fraction = fraction;
  p.repeats = repeats;
  return p;
}

int default_repeats_for_count(std::uint64_t dup_count, int max_repeats) {
  if (dup_count <= 1) return 1;
  // ceil(log2(c)) = bit width of c - 1
  int lg = 0;
  for (std::uint64_t v = dup_count - 1; v; v >>= 1) ++lg;
  return std::clamp(lg + 1, 1, max_repeats);
}

std::vector<Document> upsample_by_dup_count(const std::vector<Document>& docs, const UpsamplePolicy& policy) {
  if (policy.kind != UpsamplePolicy::Kind::kByDupCount) fail(ErrorKind::kPolicy, "upsample_by_dup_count needs a BY_DUP_COUNT policy");
  check_policy(policy);
  std::vector<Document> out;
  for (const auto& d : docs) {
    int reps;
    if (policy.count_to_repeats.empty()) {
      reps = default_repeats_for_count(d.dup_count, policy.max_repeats);
    } else {
      auto it = policy.count_to_repeats.find(d.dup_count);
      if (it == policy.count_to_repeats.end()) {
        fail(ErrorKind::kPolicy, "count_to_repeats has no entry for dup_count " + std::to_string(d.dup_count) +
                                     " (document " + d.id + ")");
      }
      reps = std::min(it->second, policy.max_repeats);
    }
    for (int r = 0; r < reps; ++r) out.push_back(d);
  }
  return out;
}

std::vector<Document> bucket_upsample_by_quality(const std::vector<Document>& docs, std::string_view dimension,
                                                 const UpsamplePolicy& policy, double drop_bottom_fraction) {
  if (policy.kind != UpsamplePolicy::Kind::kTopFraction) fail(ErrorKind::kPolicy, "bucket upsampling needs a TOP_FRACTION policy");
  check_policy(policy);
  if (!(drop_bottom_fraction >= 0.0 && drop_bottom_fraction < 1.0)) fail(ErrorKind::kPolicy, "drop_bottom_fraction must lie in [0, 1)");
  const std::string dim(dimension);
  std::vector<std::pair<double, const Document*>> ranked;
  ranked.reserve(docs.size());
  for (const auto& d : docs) {
    auto it = d.quality.find(dim);
    if (it == d.quality.end()) fail(ErrorKind::kData, "document " + d.id + " has no quality score '" + dim + "'");
    ranked.emplace_back(it->second, &d);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second->id < b.second->id;
  });
  const std::size_t n = ranked.size();
  const std::size_t dropped = floor_share(drop_bottom_fraction, n);
  const std::size_t kept = n - dropped;
  const std::size_t top = std::min(floor_share(policy.fraction, n), kept);
  std::vector<Document> out;
  for (std::size_t i = 0; i < kept; ++i) {
    const int reps = i < top ? policy.repeats : 1;
    for (int r = 0; r < reps; ++r) out.push_back(*ranked[i].second);
  }
  return out;
}

double entropy_score(std::string_view text) {
  if (text.size() < 2) return 0.0;
  std::array<std::size_t, 256> counts{};
  for (unsigned char c : text) ++counts[c];
  const double n = static_cast<double>(text.size());
  double h = 0.0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h -= p * std::log2(p);
  }
  const double hmax = std::log2(std::min(n, 256.0));
  return std::clamp(h / hmax, 0.0, 1.0);
}

double keyword_density_score(std::string_view text) {
  const auto words = words_of(text);
  if (words.empty()) return 0.0;
  const auto& kw = all_keywords();
  std::size_t hits = 0;
  for (const auto& w : words) hits += kw.count(w);
  return static_cast<double>(hits) / static_cast<double>(words.size());
}

void score_document(Document& doc) {
  doc.quality["entropy"] = entropy_score(doc.text);
  doc.quality["keyword_density"] = keyword_density_score(doc.text);
}

const std::array<std::string_view, kNumCategories>& category_names() { return kCategoryNames; }

const std::vector<std::string_view>& category_keywords(int category) {
  if (category < 1 || category > kNumCategories) fail(ErrorKind::kIndex, "category " + std::to_string(category) + " outside 1..27");
  return kCategoryKeywords[static_cast<std::size_t>(category - 1)];
}

int assign_category(const Document& doc, const CategoryClassifier& classifier) {
  const CategoryScores scores = classifier(doc);
  if (scores.size() != static_cast<std::size_t>(kNumCategories)) {
    fail(ErrorKind::kClassifier, "classifier returned " + std::to_string(scores.size()) + " scores, expected 27");
  }
  std::size_t best = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) {
      fail(ErrorKind::kClassifier, "non-finite score for category " + std::to_string(i + 1) + " on document " + doc.id);
    }
    if (scores[i] > scores[best]) best = i;
  }
  return static_cast<int>(best) + 1;
}

CategoryClassifier keyword_classifier() {
  auto index = std::make_shared<std::unordered_map<std::string, std::vector<std::size_t>>>();
  for (std::size_t c = 0; c < kCategoryKeywords.size(); ++c)
    for (auto w : kCategoryKeywords[c]) (*index)[std::string(w)].push_back(c);
  return [index](const Document& doc) {
    CategoryScores scores(kNumCategories, 0.0);
    for (const auto& w : words_of(doc.text)) {
      auto it = index->find(w);
      if (it == index->end()) continue;
      for (auto c : it->second) scores[c] += 1.0;
    }
    return scores;
  };
}

std::vector<Document> mix_streams(const std::map<std::string, std::vector<Document>>& streams,
                                  const std::map<std::string, double>& target_ratios, std::size_t n, std::uint64_t seed) {
  std::vector<std::pair<const std::vector<Document>*, double>> arms;
  double total = 0.0;
  for (const auto& [name, w] : target_ratios) {
    if (!std::isfinite(w) || w < 0.0) fail(ErrorKind::kConfig, "mix weight for '" + name + "' must be finite and nonnegative");
    if (w == 0.0) continue;
    auto it = streams.find(name);
    if (it == streams.end() || it->second.empty()) fail(ErrorKind::kConfig, "mix weight given for empty stream '" + name + "'");
    arms.emplace_back(&it->second, w);
    total += w;
  }
  if (!(total > 0.0)) fail(ErrorKind::kConfig, "mix weights must sum to a positive value");
  Rng rng(seed);
  std::vector<std::size_t> cursor(arms.size(), 0);
  std::vector<Document> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double u = rng.uniform() * total;
    std::size_t a = 0;
    while (a + 1 < arms.size() && u >= arms[a].second) u -= arms[a++].second;
    const auto& docs = *arms[a].first;
    out.push_back(docs[cursor[a]]);
    cursor[a] = (cursor[a] + 1) % docs.size();
  }
  return out;
}

PackedBatch pack_sequences(const std::vector<std::vector<TokenId>>& token_docs, std::size_t seq_len, TokenId pad_id) {
  if (seq_len < 1 || seq_len > 65535) fail(ErrorKind::kParameter, "seq_len must lie in 1..65535");
  struct Item {
    const TokenId* data;
    std::size_t len;
  };
  PackedBatch batch;
  batch.seq_len = seq_len;
  batch.pad_id = pad_id;
  std::vector<Item> items;
  for (const auto& doc : token_docs) {
    batch.stats.tokens_total += doc.size();
    if (doc.size() > seq_len) {
      ++batch.stats.truncation_events;
      batch.stats.tokens_truncated += doc.size() - seq_len;
    }
    for (std::size_t off = 0; off < doc.size(); off += seq_len) items.push_back({doc.data() + off, std::min(seq_len, doc.size() - off)});
  }
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.len > b.len; });

  std::vector<std::size_t> fill;
  for (const auto& it : items) {
    std::size_t b = 0;
    while (b < fill.size() && fill[b] + it.len > seq_len) ++b;
    if (b == fill.size()) {
      fill.push_back(0);
      batch.sequences.emplace_back();
      batch.sequences.back().reserve(seq_len);
      batch.sample_ids.emplace_back();
      batch.sample_ids.back().reserve(seq_len);
    }
    auto& seq = batch.sequences[b];
    auto& sid = batch.sample_ids[b];
    const auto sample = static_cast<std::uint16_t>(sid.empty() ? 1 : sid.back() + 1);
    seq.insert(seq.end(), it.data, it.data + it.len);
    sid.insert(sid.end(), it.len, sample);
    fill[b] += it.len;
    batch.stats.tokens_packed += it.len;
  }
  for (std::size_t b = 0; b < fill.size(); ++b) {
    batch.stats.tokens_padded += seq_len - fill[b];
    batch.sequences[b].resize(seq_len, pad_id);
    batch.sample_ids[b].resize(seq_len, 0);
  }
  return batch;
}

void write_packed(std::ostream& out, const PackedBatch& batch) {
  out.write("M1PK", 4);
  put_le<std::uint32_t>(out, 1);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(batch.seq_len));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(batch.sequences.size()));
  for (std::size_t s = 0; s < batch.sequences.size(); ++s) {
    if (batch.sequences[s].size() != batch.seq_len || batch.sample_ids[s].size() != batch.seq_len) {
      fail(ErrorKind::kState, "packed sequence " + std::to_string(s) + " does not have length seq_len");
    }
    for (auto t : batch.sequences[s]) put_le<std::uint32_t>(out, t);
    for (auto id : batch.sample_ids[s]) put_le<std::uint16_t>(out, id);
  }
  if (!out) fail(ErrorKind::kIo, "failed writing packed output");
}

PackedBatch read_packed(std::istream& in, TokenId pad_id) {
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "M1PK") fail(ErrorKind::kData, "not a packed file (bad magic)");
  const auto version = get_le<std::uint32_t>(in);
  if (version != 1) fail(ErrorKind::kData, "unsupported packed version " + std::to_string(version));
  PackedBatch batch;
  batch.pad_id = pad_id;
  batch.seq_len = get_le<std::uint32_t>(in);
  const auto count = get_le<std::uint32_t>(in);
  batch.sequences.resize(count);
  batch.sample_ids.resize(count);
  for (std::uint32_t s = 0; s < count; ++s) {
    auto& seq = batch.sequences[s];
    auto& sid = batch.sample_ids[s];
    seq.resize(batch.seq_len);
    sid.resize(batch.seq_len);
    for (auto& t : seq) t = get_le<std::uint32_t>(in);
    for (auto& id : sid) id = get_le<std::uint16_t>(in);
    for (std::size_t i = 0; i < batch.seq_len; ++i) {
      batch.stats.tokens_total += sid[i] != 0;
      batch.stats.tokens_packed += sid[i] != 0;
      batch.stats.tokens_padded += sid[i] == 0;
    }
  }
  return batch;
}

void write_packed(const std::string& path, const PackedBatch& batch) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path + " for writing");
  write_packed(out, batch);
}

PackedBatch read_packed(const std::string& path, TokenId pad_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path);
  return read_packed(in, pad_id);
}

std::vector<Document> read_jsonl(std::istream& in) {
  std::vector<Document> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (canonical_text(line).empty()) continue;
    const std::string where = "line " + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::kData, where + ": " + e.what());
    }
    try {
      Document d;
      if (!j.is_object() || !j.contains("id") || !j.contains("text")) fail(ErrorKind::kData, where + ": needs id and text");
      d.id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
      d.text = j["text"].get<std::string>();
      if (j.contains("lang") && !j["lang"].is_null()) d.lang = j["lang"].get<std::string>();
      if (j.contains("source") && !j["source"].is_null()) d.source = j["source"].get<std::string>();
      if (j.contains("dup_count")) {
        const auto c = j["dup_count"].get<std::int64_t>();
        if (c < 1) fail(ErrorKind::kData, where + ": dup_count must be >= 1");
        d.dup_count = static_cast<std::uint64_t>(c);
      }
      if (j.contains("quality")) {
        for (const auto& [k, v] : j["quality"].items()) d.quality[k] = v.get<double>();
      }
      if (j.contains("category") && !j["category"].is_null()) d.category = j["category"].get<int>();
      validate_document(d);
      docs.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kData, where + ": " + e.what());
    }
  }
  return docs;
}

std::vector<Document> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path);
  return read_jsonl(in);
}

void write_jsonl(std::ostream& out, const std::vector<Document>& docs, bool annotations) {
  for (const auto& d : docs) {
    nlohmann::json j;
    j["id"] = d.id;
    j["text"] = d.text;
    if (!d.lang.empty()) j["lang"] = d.lang;
    if (!d.source.empty()) j["source"] = d.source;
    if (annotations) {
      j["dup_count"] = d.dup_count;
      j["quality"] = nlohmann::json::object();
      for (const auto& [k, v] : d.quality) j["quality"][k] = v;
      j["category"] = d.category ? nlohmann::json(*d.category) : nlohmann::json(nullptr);
    }
    out << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
  }
  if (!out) fail(ErrorKind::kIo, "failed writing JSON lines");
}

void write_jsonl(const std::string& path, const std::vector<Document>& docs, bool annotations) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path + " for writing");
  write_jsonl(out, docs, annotations);
}

}  // namespace m1lab
