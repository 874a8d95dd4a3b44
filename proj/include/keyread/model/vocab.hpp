#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "keyread/numcore/errors.hpp"

namespace keyread::model {

// Character vocabulary: special tokens first, then the 100 printable ASCII
// characters (digits, letters, punctuation, whitespace). Anything else,
// including multi-byte UTF-8 such as '€', encodes to OOV.
class CharVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kSos = 1;
  static constexpr int kEos = 2;
  static constexpr int kOov = 3;
  static constexpr int kWarm = 4;
  static constexpr int kSpecials = 5;

  CharVocab() : CharVocab(printable()) {}

  explicit CharVocab(std::string chars) : chars_(std::move(chars)) {
    lookup_.fill(kOov);
    for (std::size_t i = 0; i < chars_.size(); ++i) {
      const auto c = static_cast<unsigned char>(chars_[i]);
      require(c < 0x80, "CharVocab: characters must be ASCII");
      require(lookup_[c] == kOov, "CharVocab: duplicate character");
      lookup_[c] = kSpecials + static_cast<int>(i);
    }
  }

  static std::string printable() {
    return "0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"
           "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~ \t\n\r\x0b\x0c";
  }

  int size() const { return kSpecials + static_cast<int>(chars_.size()); }
  const std::string& chars() const { return chars_; }

  static bool is_special(int id) { return id >= 0 && id < kSpecials; }

  // Bytes >= 0x80 are skipped in UTF-8 continuation runs so one code point
  // yields one OOV.
  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    for (std::size_t i = 0; i < text.size(); ++i) {
      const auto c = static_cast<unsigned char>(text[i]);
      if (c >= 0x80) {
        ids.push_back(kOov);
        while (i + 1 < text.size() && (static_cast<unsigned char>(text[i + 1]) & 0xC0) == 0x80) ++i;
      } else {
        ids.push_back(lookup_[c]);
      }
    }
    return ids;
  }

  // Value string for a token sequence; every special token is dropped.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids)
      if (!is_special(id)) out += chars_.at(static_cast<std::size_t>(id - kSpecials));
    return out;
  }

  // Single-token spelling, round-trippable through token_id.
  std::string token(int id) const {
    static const std::array<const char*, kSpecials> names = {"<pad>", "<sos>", "<eos>", "<oov>", "<warm>"};
    if (id < 0 || id >= size()) throw Error("token id " + std::to_string(id) + " outside vocabulary");
    if (is_special(id)) return names[static_cast<std::size_t>(id)];
    return std::string(1, chars_[static_cast<std::size_t>(id - kSpecials)]);
  }

  int token_id(std::string_view tok) const {
    for (int i = 0; i < kSpecials; ++i)
      if (tok == token(i)) return i;
    if (tok.size() == 1) return lookup_[static_cast<unsigned char>(tok[0])];
    return kOov;
  }

  bool operator==(const CharVocab& o) const { return chars_ == o.chars_; }

 private:
  std::string chars_;
  std::array<int, 128> lookup_{};
};

}  // namespace keyread::model
