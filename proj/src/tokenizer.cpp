#include "m1lab/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <queue>
#include <set>
#include <sstream>

#include "m1lab/error.hpp"

namespace m1lab {

namespace {

// Length of the valid UTF-8 sequence starting at text[i], 0 when invalid.
std::size_t utf8_length(std::string_view text, std::size_t i, char32_t* cp_out = nullptr) {
  const auto b0 = static_cast<unsigned char>(text[i]);
  std::size_t len;
  char32_t cp;
  if (b0 < 0x80) {
    if (cp_out) *cp_out = b0;
    return 1;
  } else if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  } else {
    return 0;
  }
  if (i + len > text.size()) return 0;
  for (std::size_t k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(text[i + k]);
    if ((b & 0xC0) != 0x80) return 0;
    cp = (cp << 6) | (b & 0x3F);
  }
  static constexpr char32_t kMin[5] = {0, 0, 0x80, 0x800, 0x10000};
  if (cp < kMin[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return 0;
  if (cp_out) *cp_out = cp;
  return len;
}

enum class CharClass { kSpace, kDigit, kLatin, kGreek, kCyrillic, kHebrew, kArabic, kIndic, kThai, kHangul, kKana, kHan, kPunct, kMark, kOther, kInvalid };

CharClass classify(char32_t c) {
  if (c == ' ' || (c >= 0x09 && c <= 0x0D) || c == 0x85 || c == 0xA0 || c == 0x1680 || (c >= 0x2000 && c <= 0x200A) ||
      c == 0x2028 || c == 0x2029 || c == 0x202F || c == 0x205F || c == 0x3000)
    return CharClass::kSpace;
  if (c >= '0' && c <= '9') return CharClass::kDigit;
  if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z')) return CharClass::kLatin;
  if (c < 0x80) return c < 0x20 || c == 0x7F ? CharClass::kOther : CharClass::kPunct;
  if (c >= 0xA1 && c <= 0xBF) return CharClass::kPunct;
  if (c == 0xD7 || c == 0xF7) return CharClass::kPunct;
  if ((c >= 0xC0 && c <= 0x24F) || (c >= 0x1E00 && c <= 0x1EFF)) return CharClass::kLatin;
  if (c >= 0x300 && c <= 0x36F) return CharClass::kMark;
  if (c >= 0x370 && c <= 0x3FF) return CharClass::kGreek;
  if (c >= 0x400 && c <= 0x52F) return CharClass::kCyrillic;
  if (c >= 0x590 && c <= 0x5FF) return CharClass::kHebrew;
  if (c >= 0x600 && c <= 0x6FF) return CharClass::kArabic;
  if (c >= 0x900 && c <= 0xDFF) return CharClass::kIndic;
  if (c >= 0xE00 && c <= 0xE7F) return CharClass::kThai;
  if ((c >= 0x1100 && c <= 0x11FF) || (c >= 0x3130 && c <= 0x318F) || (c >= 0xAC00 && c <= 0xD7AF)) return CharClass::kHangul;
  if (c >= 0x3040 && c <= 0x30FF) return CharClass::kKana;
  if ((c >= 0x3400 && c <= 0x4DBF) || (c >= 0x4E00 && c <= 0x9FFF) || (c >= 0xF900 && c <= 0xFAFF) ||
      (c >= 0x20000 && c <= 0x2FFFF))
    return CharClass::kHan;
  if ((c >= 0x2010 && c <= 0x205E) || (c >= 0x3001 && c <= 0x303F) || (c >= 0xFF01 && c <= 0xFF0F) ||
      (c >= 0xFF1A && c <= 0xFF20) || (c >= 0xFF3B && c <= 0xFF40) || (c >= 0xFF5B && c <= 0xFF65))
    return CharClass::kPunct;
  return CharClass::kOther;
}

bool rules_text_value(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  fail(ErrorKind::kData, "tokenizer file: expected true/false, got '" + v + "'");
}

}  // namespace

std::vector<std::string> pretokenize(std::string_view text, const TokenizerRules& rules) {
  std::vector<std::string> pieces;
  CharClass run = CharClass::kInvalid;
  bool open = false;
  for (std::size_t i = 0; i < text.size();) {
    char32_t cp = 0;
    std::size_t len = utf8_length(text, i, &cp);
    CharClass cls;
    if (len == 0) {
      len = 1;
      cls = CharClass::kInvalid;
    } else {
      cls = classify(cp);
    }
    const bool single = cls == CharClass::kInvalid || (cls == CharClass::kDigit && rules.split_digits);
    const bool joins = open && !single && (cls == run || (cls == CharClass::kMark && run != CharClass::kSpace));
    if (joins) {
      pieces.back().append(text.substr(i, len));
    } else {
      pieces.emplace_back(text.substr(i, len));
      if (cls != CharClass::kMark) run = cls;
    }
    open = !single;
    i += len;
  }
  if (!rules.keep_whitespace_pieces) {
    std::erase_if(pieces, [](const std::string& p) {
      return std::all_of(p.begin(), p.end(), [](char c) { return c == ' ' || (c >= 0x09 && c <= 0x0D); });
    });
  }
  return pieces;
}

TokenizerModel::TokenizerModel(TokenizerRules rules) : rules_(rules) {
  for (std::size_t b = 0; b < kByteTokens; ++b) add_token(std::string(1, static_cast<char>(b)));
}

TokenId TokenizerModel::add_token(const std::string& bytes) {
  if (bytes.empty()) fail(ErrorKind::kParameter, "empty token");
  auto [it, fresh] = index_.try_emplace(bytes, static_cast<TokenId>(vocab_.size()));
  if (fresh) vocab_.push_back(bytes);
  return it->second;
}

void TokenizerModel::add_merge(const std::string& left, const std::string& right) {
  const TokenId l = id_of(left), r = id_of(right);
  const TokenId result = id_of(left + right);
  auto [it, fresh] = merge_rank_.try_emplace({l, r}, MergeInfo{merges_.size(), result});
  if (fresh) merges_.emplace_back(left, right);
}

TokenId TokenizerModel::id_of(std::string_view bytes) const {
  auto it = index_.find(std::string(bytes));
  if (it == index_.end()) fail(ErrorKind::kIndex, "token '" + escape_bytes(bytes) + "' not in vocabulary");
  return it->second;
}

const std::string& TokenizerModel::token(TokenId id) const {
  if (id >= vocab_.size()) fail(ErrorKind::kIndex, "token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab_.size()));
  return vocab_[id];
}

void TokenizerModel::encode_piece(std::string_view piece, std::vector<TokenId>& out) const {
  std::vector<TokenId> seq;
  for (std::size_t i = 0; i < piece.size();) {
    std::size_t len = utf8_length(piece, i);
    if (len > 1) {
      auto it = index_.find(std::string(piece.substr(i, len)));
      if (it != index_.end()) {
        seq.push_back(it->second);
        i += len;
        continue;
      }
    }
    if (len == 0) len = 1;
    for (std::size_t k = 0; k < len; ++k) seq.push_back(static_cast<unsigned char>(piece[i + k]));
    i += len;
  }
  while (seq.size() > 1) {
    std::size_t best_rank = SIZE_MAX, best_at = 0;
    TokenId best_result = 0;
    for (std::size_t j = 0; j + 1 < seq.size(); ++j) {
      auto it = merge_rank_.find({seq[j], seq[j + 1]});
      if (it != merge_rank_.end() && it->second.rank < best_rank) {
        best_rank = it->second.rank;
        best_at = j;
        best_result = it->second.result;
      }
    }
    if (best_rank == SIZE_MAX) break;
    seq[best_at] = best_result;
    seq.erase(seq.begin() + static_cast<std::ptrdiff_t>(best_at) + 1);
  }
  out.insert(out.end(), seq.begin(), seq.end());
}

std::vector<TokenId> TokenizerModel::encode(std::string_view text) const {
  std::vector<TokenId> out;
  for (const auto& piece : pretokenize(text, rules_)) encode_piece(piece, out);
  return out;
}

std::string TokenizerModel::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (auto id : ids) out += token(id);
  return out;
}

TokenizerModel train_bpe(const std::vector<std::string>& corpus, std::size_t vocab_size, const TokenizerRules& rules) {
  if (vocab_size < TokenizerModel::kByteTokens) {
    fail(ErrorKind::kParameter, "vocab_size " + std::to_string(vocab_size) + " below the 256 byte tokens");
  }
  if (!(rules.char_coverage > 0.0 && rules.char_coverage <= 1.0)) fail(ErrorKind::kParameter, "char_coverage must lie in (0, 1]");
  TokenizerModel model(rules);

  std::map<std::string, std::uint64_t> piece_counts;
  for (const auto& doc : corpus)
    for (auto& p : pretokenize(doc, rules)) ++piece_counts[p];

  // character coverage
  std::map<std::string, std::uint64_t> char_counts;
  std::uint64_t char_total = 0;
  for (const auto& [piece, count] : piece_counts) {
    for (std::size_t i = 0; i < piece.size();) {
      const std::size_t len = utf8_length(piece, i);
      if (len == 0) {
        ++i;
        continue;
      }
      char_counts[piece.substr(i, len)] += count;
      char_total += count;
      i += len;
    }
  }
  std::vector<std::pair<std::string, std::uint64_t>> chars(char_counts.begin(), char_counts.end());
  std::stable_sort(chars.begin(), chars.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  const double target = rules.char_coverage * static_cast<double>(char_total);
  std::uint64_t covered = 0;
  for (const auto& [ch, count] : chars) {
    if (static_cast<double>(covered) >= target) break;
    covered += count;
    if (ch.size() > 1 && model.vocab_size() < vocab_size) model.add_token(ch);
  }

  // initial segmentation of every distinct piece
  std::vector<std::vector<TokenId>> words;
  std::vector<std::uint64_t> freq;
  for (const auto& [piece, count] : piece_counts) {
    std::vector<TokenId> seq;
    for (std::size_t i = 0; i < piece.size();) {
      std::size_t len = utf8_length(piece, i);
      if (len > 1 && model.contains(piece.substr(i, len))) {
        seq.push_back(model.id_of(piece.substr(i, len)));
        i += len;
        continue;
      }
      if (len == 0) len = 1;
      for (std::size_t k = 0; k < len; ++k) seq.push_back(static_cast<unsigned char>(piece[i + k]));
      i += len;
    }
    if (seq.size() > 1) {
      words.push_back(std::move(seq));
      freq.push_back(count);
    }
  }

  using Pair = std::pair<TokenId, TokenId>;
  std::map<Pair, std::int64_t> pair_count;
  std::map<Pair, std::set<std::size_t>> pair_words;
  for (std::size_t w = 0; w < words.size(); ++w) {
    for (std::size_t j = 0; j + 1 < words[w].size(); ++j) {
      const Pair p{words[w][j], words[w][j + 1]};
      pair_count[p] += static_cast<std::int64_t>(freq[w]);
      pair_words[p].insert(w);
    }
  }

  const auto& vocab = model.vocab();
  struct Entry {
    std::int64_t count;
    Pair pair;
  };
  // max count first, then the lexicographically smaller (left, right) bytes
  auto worse = [&vocab](const Entry& a, const Entry& b) {
    if (a.count != b.count) return a.count < b.count;
    const auto& al = vocab[a.pair.first];
    const auto& bl = vocab[b.pair.first];
    if (al != bl) return al > bl;
    return vocab[a.pair.second] > vocab[b.pair.second];
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(worse)> heap(worse);
  for (const auto& [p, c] : pair_count) heap.push({c, p});

  while (model.vocab_size() < vocab_size && !heap.empty()) {
    const Entry top = heap.top();
    heap.pop();
    auto pc = pair_count.find(top.pair);
    if (pc == pair_count.end() || pc->second != top.count) continue;  // stale
    if (top.count < 2) break;

    const Pair best = top.pair;
    const std::string left = model.token(best.first), right = model.token(best.second);
    const TokenId merged = model.add_token(left + right);
    model.add_merge(left, right);

    std::set<Pair> touched;
    const auto affected = std::move(pair_words[best]);
    pair_words.erase(best);
    for (std::size_t w : affected) {
      auto& seq = words[w];
      const auto c = static_cast<std::int64_t>(freq[w]);
      bool present = false;
      for (std::size_t j = 0; j + 1 < seq.size(); ++j) present |= seq[j] == best.first && seq[j + 1] == best.second;
      if (!present) continue;
      for (std::size_t j = 0; j + 1 < seq.size(); ++j) {
        const Pair p{seq[j], seq[j + 1]};
        pair_count[p] -= c;
        touched.insert(p);
      }
      std::vector<TokenId> next;
      next.reserve(seq.size());
      for (std::size_t j = 0; j < seq.size(); ++j) {
        if (j + 1 < seq.size() && seq[j] == best.first && seq[j + 1] == best.second) {
          next.push_back(merged);
          ++j;
        } else {
          next.push_back(seq[j]);
        }
      }
      seq = std::move(next);
      for (std::size_t j = 0; j + 1 < seq.size(); ++j) {
        const Pair p{seq[j], seq[j + 1]};
        pair_count[p] += c;
        pair_words[p].insert(w);
        touched.insert(p);
      }
    }
    for (const auto& p : touched) {
      auto it = pair_count.find(p);
      if (it->second <= 0) {
        pair_count.erase(it);
      } else {
        heap.push({it->second, p});
      }
    }
  }
  return model;
}

TokenizerModel merge_tokenizers(const TokenizerModel& general, const TokenizerModel& domain) {
  if (!(general.rules() == domain.rules())) fail(ErrorKind::kConfig, "tokenizers were trained with different rule blocks");
  TokenizerModel merged = general;
  for (const auto& tok : domain.vocab()) merged.add_token(tok);
  for (const auto& [l, r] : domain.merges()) merged.add_merge(l, r);
  return merged;
}

double tokens_per_byte(const TokenizerModel& model, const std::vector<std::string>& texts) {
  std::size_t tokens = 0, bytes = 0;
  for (const auto& t : texts) {
    tokens += model.encode(t).size();
    bytes += t.size();
  }
  return bytes == 0 ? 0.0 : static_cast<double>(tokens) / static_cast<double>(bytes);
}

std::string escape_bytes(std::string_view bytes) {
  std::string out;
  for (unsigned char c : bytes) {
    if (c > 0x20 && c < 0x7F && c != '\\') {
      out.push_back(static_cast<char>(c));
    } else {
      char buf[5];
      std::snprintf(buf, sizeof buf, "\\x%02x", c);
      out += buf;
    }
  }
  return out;
}

std::string unescape_bytes(std::string_view text) {
  std::string out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '\\') {
      out.push_back(text[i]);
      continue;
    }
    if (i + 3 >= text.size() || text[i + 1] != 'x') fail(ErrorKind::kData, "bad escape in '" + std::string(text) + "'");
    const std::string hex(text.substr(i + 2, 2));
    if (!std::isxdigit(static_cast<unsigned char>(hex[0])) || !std::isxdigit(static_cast<unsigned char>(hex[1]))) {
      fail(ErrorKind::kData, "bad escape in '" + std::string(text) + "'");
    }
    out.push_back(static_cast<char>(std::stoi(hex, nullptr, 16)));
    i += 3;
  }
  return out;
}

void save_tokenizer(std::ostream& out, const TokenizerModel& model) {
  const auto& r = model.rules();
  char cov[40];
  std::snprintf(cov, sizeof cov, "%.17g", r.char_coverage);
  out << "m1lab-tokenizer 1\n";
  out << "no_normalization=" << (r.no_normalization ? "true" : "false") << '\n';
  out << "keep_whitespace_pieces=" << (r.keep_whitespace_pieces ? "true" : "false") << '\n';
  out << "split_digits=" << (r.split_digits ? "true" : "false") << '\n';
  out << "char_coverage=" << cov << '\n';
  out << "[vocab] " << model.vocab_size() << '\n';
  for (const auto& tok : model.vocab()) out << escape_bytes(tok) << '\n';
  out << "[merges] " << model.merges().size() << '\n';
  for (const auto& [l, r2] : model.merges()) out << escape_bytes(l) << ' ' << escape_bytes(r2) << '\n';
  if (!out) fail(ErrorKind::kIo, "failed writing tokenizer");
}

void save_tokenizer(const std::string& path, const TokenizerModel& model) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path + " for writing");
  save_tokenizer(out, model);
}

TokenizerModel load_tokenizer(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "m1lab-tokenizer 1") fail(ErrorKind::kData, "not a tokenizer file");
  TokenizerRules rules;
  std::size_t n_vocab = 0;
  while (std::getline(in, line)) {
    if (line.rfind("[vocab] ", 0) == 0) {
      n_vocab = std::stoul(line.substr(8));
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::kData, "tokenizer file: bad rules line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "no_normalization") {
      rules.no_normalization = rules_text_value(value);
    } else if (key == "keep_whitespace_pieces") {
      rules.keep_whitespace_pieces = rules_text_value(value);
    } else if (key == "split_digits") {
      rules.split_digits = rules_text_value(value);
    } else if (key == "char_coverage") {
      rules.char_coverage = std::stod(value);
    } else {
      fail(ErrorKind::kData, "tokenizer file: unknown rule '" + key + "'");
    }
  }
  TokenizerModel model(rules);
  for (std::size_t i = 0; i < n_vocab; ++i) {
    if (!std::getline(in, line)) fail(ErrorKind::kData, "tokenizer file: vocab section truncated");
    const std::string tok = unescape_bytes(line);
    if (model.add_token(tok) != i) fail(ErrorKind::kData, "tokenizer file: vocab line " + std::to_string(i) + " out of order or duplicated");
  }
  if (!std::getline(in, line) || line.rfind("[merges] ", 0) != 0) fail(ErrorKind::kData, "tokenizer file: missing merges section");
  const std::size_t n_merges = std::stoul(line.substr(9));
  for (std::size_t i = 0; i < n_merges; ++i) {
    if (!std::getline(in, line)) fail(ErrorKind::kData, "tokenizer file: merges section truncated");
    const auto sp = line.find(' ');
    if (sp == std::string::npos) fail(ErrorKind::kData, "tokenizer file: bad merge line '" + line + "'");
    try {
      model.add_merge(unescape_bytes(line.substr(0, sp)), unescape_bytes(line.substr(sp + 1)));
    } catch (const Error& e) {
      fail(ErrorKind::kData, std::string("tokenizer file: ") + e.what());
    }
  }
  if (model.merges().size() != n_merges) fail(ErrorKind::kData, "tokenizer file: duplicate merge rules");
  return model;
}

TokenizerModel load_tokenizer(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path);
  return load_tokenizer(in);
}

}  // namespace m1lab
