#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "m1lab/ops.hpp"

namespace m1lab {

struct TokenizerRules {
  bool no_normalization = true;
  bool keep_whitespace_pieces = true;
  bool split_digits = true;
  double char_coverage = 0.9999;

  bool operator==(const TokenizerRules&) const = default;
};

// Splits on whitespace and script boundaries. Whitespace runs survive as
// pieces, every ASCII digit is its own piece, punctuation runs group together
// and each byte that is not part of valid UTF-8 becomes a one-byte piece.
std::vector<std::string> pretokenize(std::string_view text, const TokenizerRules& rules = {});

class TokenizerModel {
 public:
  static constexpr std::size_t kByteTokens = 256;

  // Byte-fallback-only model: ids 0..255 are the single bytes.
  explicit TokenizerModel(TokenizerRules rules = {});

  const TokenizerRules& rules() const { return rules_; }
  std::size_t vocab_size() const { return vocab_.size(); }
  const std::vector<std::string>& vocab() const { return vocab_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

  // Returns the id of `bytes`, adding it when new.
  TokenId add_token(const std::string& bytes);
  // Appends a merge rule; both sides and their concatenation must already be
  // tokens. Duplicate rules are ignored.
  void add_merge(const std::string& left, const std::string& right);

  bool contains(std::string_view bytes) const { return index_.count(std::string(bytes)) > 0; }
  TokenId id_of(std::string_view bytes) const;
  const std::string& token(TokenId id) const;

  // pretokenize, then initial units (vocab characters or raw bytes), then
  // rank-greedy merging: the lowest-rank adjacent pair is merged first,
  // leftmost on ties.
  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(const std::vector<TokenId>& ids) const;

  bool operator==(const TokenizerModel& other) const {
    return rules_ == other.rules_ && vocab_ == other.vocab_ && merges_ == other.merges_;
  }

 private:
  struct PairHash {
    std::size_t operator()(const std::pair<TokenId, TokenId>& p) const noexcept {
      return std::hash<std::uint64_t>()((static_cast<std::uint64_t>(p.first) << 32) | p.second);
    }
  };
  struct MergeInfo {
    std::size_t rank;
    TokenId result;
  };

  void encode_piece(std::string_view piece, std::vector<TokenId>& out) const;

  TokenizerRules rules_;
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> index_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::pair<TokenId, TokenId>, MergeInfo, PairHash> merge_rank_;
};

// Byte-level BPE over pretokenized pieces. Characters that together cover
// rules.char_coverage of all character occurrences get their own tokens
// (multi-byte ones only; single bytes are always present). Then the most
// frequent adjacent pair is merged repeatedly, ties broken by the smaller
// (left bytes, right bytes), until vocab_size is reached or no pair occurs at
// least twice.
TokenizerModel train_bpe(const std::vector<std::string>& corpus, std::size_t vocab_size, const TokenizerRules& rules = {});

// General ids are preserved; domain tokens not in the general vocab are
// appended in domain id order. Merges: the general list, then domain rules
// not already present.
TokenizerModel merge_tokenizers(const TokenizerModel& general, const TokenizerModel& domain);

double tokens_per_byte(const TokenizerModel& model, const std::vector<std::string>& texts);

// Text file: "m1lab-tokenizer 1", rules as key=value, "[vocab] N" and one
// escaped token per line, "[merges] M" and one "left right" pair per line.
void save_tokenizer(std::ostream& out, const TokenizerModel& model);
void save_tokenizer(const std::string& path, const TokenizerModel& model);
TokenizerModel load_tokenizer(std::istream& in);
TokenizerModel load_tokenizer(const std::string& path);

// Printable ASCII except backslash and space stays literal, all else is \xHH.
std::string escape_bytes(std::string_view bytes);
std::string unescape_bytes(std::string_view text);

}  // namespace m1lab
