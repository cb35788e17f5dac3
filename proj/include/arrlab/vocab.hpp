#pragma once

// Fixed token vocabulary for the toy ranker.
//
// Layout: six structural specials, then single-character tokens, then
// whole-word tokens "0".."99" for comma-separated digit-group docIDs
// ("25,36,39" -> [25][36][39]). Any other string is tokenized one character
// at a time. <eod> terminates every docID.

#include <array>
#include <cctype>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace arrlab {

using TokenId = int;

class Vocabulary {
 public:
  static constexpr TokenId kEod = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kQuery = 2;
  static constexpr TokenId kDocs = 3;
  static constexpr TokenId kSep = 4;
  static constexpr TokenId kAnswer = 5;
  static constexpr int kSpecialCount = 6;
  static constexpr std::string_view kChars = "abcdefghijklmnopqrstuvwxyz0123456789_-. ";
  static constexpr int kWordCount = 100;

  static constexpr int size() { return kSpecialCount + static_cast<int>(kChars.size()) + kWordCount; }

  static TokenId char_token(char c) {
    const auto pos = kChars.find(c);
    if (pos == std::string_view::npos)
      throw std::invalid_argument(std::string("character outside vocabulary: '") + c + "'");
    return kSpecialCount + static_cast<TokenId>(pos);
  }

  static TokenId word_token(int value) {
    if (value < 0 || value >= kWordCount) throw std::invalid_argument("digit group outside vocabulary");
    return kSpecialCount + static_cast<TokenId>(kChars.size()) + value;
  }

  static bool is_word(TokenId t) { return t >= kSpecialCount + static_cast<TokenId>(kChars.size()) && t < size(); }
  static bool is_char(TokenId t) { return t >= kSpecialCount && t < kSpecialCount + static_cast<TokenId>(kChars.size()); }
  static bool is_special(TokenId t) { return t >= 0 && t < kSpecialCount; }

  static std::string text(TokenId t) {
    static constexpr std::array<std::string_view, kSpecialCount> specials = {"<eod>", "<bos>", "<q>",
                                                                             "<docs>", "<sep>", "<ans>"};
    if (t < 0 || t >= size()) throw std::out_of_range("token id out of range");
    if (is_special(t)) return std::string(specials[t]);
    if (is_char(t)) return std::string(1, kChars[t - kSpecialCount]);
    return std::to_string(t - kSpecialCount - static_cast<int>(kChars.size()));
  }

  /// True when `s` is a non-empty comma-separated list of integers in [0, 100).
  static bool is_digit_group_list(std::string_view s) {
    if (s.empty()) return false;
    std::size_t start = 0;
    while (true) {
      const auto comma = s.find(',', start);
      const auto part = s.substr(start, comma == std::string_view::npos ? s.size() - start : comma - start);
      if (part.empty() || part.size() > 2) return false;
      for (char c : part)
        if (!std::isdigit(static_cast<unsigned char>(c))) return false;
      if (part.size() == 2 && part[0] == '0') return false;
      if (comma == std::string_view::npos) return true;
      start = comma + 1;
    }
  }

  /// Tokens of a docID or query string, without <eod>.
  static std::vector<TokenId> tokenize(std::string_view s) {
    if (s.empty()) throw std::invalid_argument("cannot tokenize an empty string");
    std::vector<TokenId> out;
    if (is_digit_group_list(s)) {
      std::size_t start = 0;
      while (start <= s.size()) {
        const auto comma = s.find(',', start);
        const auto end = comma == std::string_view::npos ? s.size() : comma;
        out.push_back(word_token(std::stoi(std::string(s.substr(start, end - start)))));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
      }
      return out;
    }
    for (char c : s) out.push_back(char_token(c));
    return out;
  }

  /// Tokens of a docID followed by <eod>.
  static std::vector<TokenId> docid_tokens(std::string_view s) {
    auto out = tokenize(s);
    out.push_back(kEod);
    return out;
  }

  /// Inverse of tokenize; a trailing <eod> is ignored.
  static std::string detokenize(std::span<const TokenId> tokens) {
    if (!tokens.empty() && tokens.back() == kEod) tokens = tokens.first(tokens.size() - 1);
    std::string out;
    bool words = !tokens.empty() && is_word(tokens.front());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const TokenId t = tokens[i];
      if (is_special(t)) throw std::invalid_argument("structural token inside a docID");
      if (is_word(t) != words) throw std::invalid_argument("mixed word and character tokens");
      if (words && i > 0) out += ',';
      out += text(t);
    }
    return out;
  }
};

}  // namespace arrlab
