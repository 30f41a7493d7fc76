#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "m1lab/ops.hpp"

namespace m1lab {

inline constexpr int kNumCategories = 27;

struct Document {
  std::string id;
  std::string text;
  std::string lang;
  std::string source;
  std::optional<int> category;  // 1..kNumCategories once assigned
  std::uint64_t dup_count = 1;
  std::map<std::string, double> quality;  // dimension -> score in [0, 1]

  bool operator==(const Document&) const = default;
};

// Throws a data error when dup_count < 1, a quality score leaves [0, 1] or
// the category is outside 1..27.
void validate_document(const Document& doc);

// ---------------------------------------------------------------------------
// Deduplication

// Trims both ends and collapses internal whitespace runs to one space.
std::string canonical_text(std::string_view text);

// Collapses documents with identical canonical text onto the first
// occurrence; its dup_count becomes the sum of the group's dup_counts, so a
// second pass is a no-op. Output keeps first-occurrence order.
std::vector<Document> dedup_global(const std::vector<Document>& docs);

// ---------------------------------------------------------------------------
// Upsampling

struct UpsamplePolicy {
  enum class Kind { kByDupCount, kTopFraction };

  Kind kind = Kind::kByDupCount;
  double fraction = 1.0;  // kTopFraction: share of documents repeated
  int repeats = 1;  // kTopFraction: copies of each top document
  int max_repeats = 10;
  // kByDupCount: explicit dup_count -> repeats table. Empty selects the
  // default rule clamp(ceil(log2(dup_count)) + 1, 1, max_repeats).
  std::map<std::uint64_t, int> count_to_repeats;

  static UpsamplePolicy by_dup_count(std::map<std::uint64_t, int> table = {});
  static UpsamplePolicy top_fraction(double fraction, int repeats);
};

int default_repeats_for_count(std::uint64_t dup_count, int max_repeats = 10);

// Emits each document count_to_repeats(dup_count) times (clamped to
// max_repeats), in document order then repeat index.
std::vector<Document> upsample_by_dup_count(const std::vector<Document>& docs, const UpsamplePolicy& policy);

// Sorts by descending score on `dimension` (ties by id), removes the bottom
// drop_bottom_fraction, repeats the top `fraction` policy.repeats times and
// keeps the rest once. Counts are floor(fraction * n) and
// floor(drop_bottom_fraction * n).
std::vector<Document> bucket_upsample_by_quality(const std::vector<Document>& docs, std::string_view dimension,
                                                 const UpsamplePolicy& policy, double drop_bottom_fraction = 0.0);

// ---------------------------------------------------------------------------
// Quality scoring stand-ins

// Byte entropy divided by log2(min(len, 256)); 0 for texts shorter than 2 bytes.
double entropy_score(std::string_view text);
// Share of whitespace-separated words found in the category keyword lists.
double keyword_density_score(std::string_view text);
// Fills quality["entropy"] and quality["keyword_density"].
void score_document(Document& doc);

// ---------------------------------------------------------------------------
// Category assignment

using CategoryScores = std::vector<double>;
using CategoryClassifier = std::function<CategoryScores(const Document&)>;

const std::array<std::string_view, kNumCategories>& category_names();

// Argmax over the 27 scores, returned 1-based; ties go to the lowest index.
int assign_category(const Document& doc, const CategoryClassifier& classifier);

// Counts keyword hits per category over lower-cased words.
CategoryClassifier keyword_classifier();
const std::vector<std::string_view>& category_keywords(int category);

// ---------------------------------------------------------------------------
// Mixing

// Draws n documents: each draw picks a stream with probability proportional
// to its weight and takes that stream's next document, cycling through the
// stream in order.
std::vector<Document> mix_streams(const std::map<std::string, std::vector<Document>>& streams,
                                  const std::map<std::string, double>& target_ratios, std::size_t n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Packing

struct PackStats {
  std::uint64_t tokens_total = 0;
  std::uint64_t tokens_packed = 0;
  // Tokens moved into continuation chunks because their document was longer
  // than seq_len. Split tokens are kept, never discarded.
  std::uint64_t tokens_truncated = 0;
  std::uint64_t tokens_discarded = 0;
  std::uint64_t tokens_padded = 0;
  std::uint64_t truncation_events = 0;

  bool operator==(const PackStats&) const = default;
};

struct PackedBatch {
  std::size_t seq_len = 0;
  TokenId pad_id = 0;
  std::vector<std::vector<TokenId>> sequences;
  // 1-based sample number within the sequence; 0 marks padding.
  std::vector<std::vector<std::uint16_t>> sample_ids;
  PackStats stats;
};

// First-fit-decreasing packing of whole documents into seq_len bins.
// Documents longer than seq_len are first split into ceil(len / seq_len)
// contiguous chunks. Items are sorted by descending length with ties in
// input order; bins are emitted in creation order.
PackedBatch pack_sequences(const std::vector<std::vector<TokenId>>& token_docs, std::size_t seq_len, TokenId pad_id);

// Binary layout, little-endian: magic "M1PK", u32 version (1), u32 seq_len,
// u32 count, then per sequence seq_len u32 token ids followed by seq_len u16
// sample ids.
void write_packed(std::ostream& out, const PackedBatch& batch);
PackedBatch read_packed(std::istream& in, TokenId pad_id = 0);
void write_packed(const std::string& path, const PackedBatch& batch);
PackedBatch read_packed(const std::string& path, TokenId pad_id = 0);

// ---------------------------------------------------------------------------
// JSON-lines I/O

// Reads {id, text, lang?, source?, dup_count?, quality?, category?} per line.
std::vector<Document> read_jsonl(std::istream& in);
std::vector<Document> read_jsonl(const std::string& path);
// Writes id/text/lang/source and, with annotations, dup_count, quality and
// category (null when unassigned).
void write_jsonl(std::ostream& out, const std::vector<Document>& docs, bool annotations = true);
void write_jsonl(const std::string& path, const std::vector<Document>& docs, bool annotations = true);

}  // namespace m1lab
