#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "keyread/numcore/errors.hpp"

namespace keyread::synthdoc {

constexpr int kGlyphWidth = 5;
constexpr int kGlyphHeight = 7;
constexpr int kGlyphAdvance = kGlyphWidth + 1;

// Generator charset in class-id order (class 0 is background).
inline const std::u32string& charset() {
  static const std::u32string cs = U"0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ-./: $€";
  return cs;
}

inline std::u32string utf8_decode(std::string_view s) {
  std::u32string out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    int extra = 0;
    char32_t cp = 0;
    if (c < 0x80) {
      cp = c;
    } else if ((c >> 5) == 0x6) {
      cp = c & 0x1F;
      extra = 1;
    } else if ((c >> 4) == 0xE) {
      cp = c & 0x0F;
      extra = 2;
    } else if ((c >> 3) == 0x1E) {
      cp = c & 0x07;
      extra = 3;
    } else {
      throw Error("invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (i + extra >= s.size() && extra > 0) {
      throw Error("truncated UTF-8 sequence at offset " + std::to_string(i));
    }
    for (int k = 1; k <= extra; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc >> 6) != 0x2) throw Error("invalid UTF-8 continuation at offset " + std::to_string(i + k));
      cp = (cp << 6) | (cc & 0x3F);
    }
    out.push_back(cp);
    i += 1 + extra;
  }
  return out;
}

inline std::string utf8_encode(std::u32string_view s) {
  std::string out;
  for (char32_t cp : s) {
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
  }
  return out;
}

using GlyphBitmap = std::array<std::uint8_t, kGlyphWidth * kGlyphHeight>;

// Fixed 5x7 bitmap font covering the generator charset.
class GlyphFont {
 public:
  GlyphFont() {
    static const std::map<char32_t, std::array<const char*, kGlyphHeight>> rows = {
        {U'0', {"01110", "10001", "10011", "10101", "11001", "10001", "01110"}},
        {U'1', {"00100", "01100", "00100", "00100", "00100", "00100", "01110"}},
        {U'2', {"01110", "10001", "00001", "00010", "00100", "01000", "11111"}},
        {U'3', {"11111", "00010", "00100", "00010", "00001", "10001", "01110"}},
        {U'4', {"00010", "00110", "01010", "10010", "11111", "00010", "00010"}},
        {U'5', {"11111", "10000", "11110", "00001", "00001", "10001", "01110"}},
        {U'6', {"00110", "01000", "10000", "11110", "10001", "10001", "01110"}},
        {U'7', {"11111", "00001", "00010", "00100", "01000", "01000", "01000"}},
        {U'8', {"01110", "10001", "10001", "01110", "10001", "10001", "01110"}},
        {U'9', {"01110", "10001", "10001", "01111", "00001", "00010", "01100"}},
        {U'A', {"01110", "10001", "10001", "11111", "10001", "10001", "10001"}},
        {U'B', {"11110", "10001", "10001", "11110", "10001", "10001", "11110"}},
        {U'C', {"01110", "10001", "10000", "10000", "10000", "10001", "01110"}},
        {U'D', {"11100", "10010", "10001", "10001", "10001", "10010", "11100"}},
        {U'E', {"11111", "10000", "10000", "11110", "10000", "10000", "11111"}},
        {U'F', {"11111", "10000", "10000", "11110", "10000", "10000", "10000"}},
        {U'G', {"01110", "10001", "10000", "10111", "10001", "10001", "01111"}},
        {U'H', {"10001", "10001", "10001", "11111", "10001", "10001", "10001"}},
        {U'I', {"01110", "00100", "00100", "00100", "00100", "00100", "01110"}},
        {U'J', {"00111", "00010", "00010", "00010", "00010", "10010", "01100"}},
        {U'K', {"10001", "10010", "10100", "11000", "10100", "10010", "10001"}},
        {U'L', {"10000", "10000", "10000", "10000", "10000", "10000", "11111"}},
        {U'M', {"10001", "11011", "10101", "10101", "10001", "10001", "10001"}},
        {U'N', {"10001", "10001", "11001", "10101", "10011", "10001", "10001"}},
        {U'O', {"01110", "10001", "10001", "10001", "10001", "10001", "01110"}},
        {U'P', {"11110", "10001", "10001", "11110", "10000", "10000", "10000"}},
        {U'Q', {"01110", "10001", "10001", "10001", "10101", "10010", "01101"}},
        {U'R', {"11110", "10001", "10001", "11110", "10100", "10010", "10001"}},
        {U'S', {"01111", "10000", "10000", "01110", "00001", "00001", "11110"}},
        {U'T', {"11111", "00100", "00100", "00100", "00100", "00100", "00100"}},
        {U'U', {"10001", "10001", "10001", "10001", "10001", "10001", "01110"}},
        {U'V', {"10001", "10001", "10001", "10001", "10001", "01010", "00100"}},
        {U'W', {"10001", "10001", "10001", "10101", "10101", "10101", "01010"}},
        {U'X', {"10001", "10001", "01010", "00100", "01010", "10001", "10001"}},
        {U'Y', {"10001", "10001", "10001", "01010", "00100", "00100", "00100"}},
        {U'Z', {"11111", "00001", "00010", "00100", "01000", "10000", "11111"}},
        {U'-', {"00000", "00000", "00000", "11111", "00000", "00000", "00000"}},
        {U'.', {"00000", "00000", "00000", "00000", "00000", "01100", "01100"}},
        {U'/', {"00000", "00001", "00010", "00100", "01000", "10000", "00000"}},
        {U':', {"00000", "01100", "01100", "00000", "01100", "01100", "00000"}},
        {U' ', {"00000", "00000", "00000", "00000", "00000", "00000", "00000"}},
        {U'$', {"00100", "01111", "10100", "01110", "00101", "11110", "00100"}},
        {U'€', {"00111", "01000", "11110", "01000", "11110", "01000", "00111"}},
    };
    for (const auto& [ch, lines] : rows) {
      GlyphBitmap bm{};
      for (int r = 0; r < kGlyphHeight; ++r)
        for (int c = 0; c < kGlyphWidth; ++c) bm[r * kGlyphWidth + c] = lines[r][c] == '1' ? 1 : 0;
      glyphs_.emplace(ch, bm);
    }
  }

  bool has(char32_t ch) const { return glyphs_.count(ch) != 0; }

  const GlyphBitmap& glyph(char32_t ch) const {
    auto it = glyphs_.find(ch);
    if (it == glyphs_.end()) throw Error("font has no glyph for U+" + std::to_string(static_cast<unsigned>(ch)));
    return it->second;
  }

  std::size_t glyph_count() const { return glyphs_.size(); }

  static const GlyphFont& builtin() {
    static const GlyphFont font;
    return font;
  }

 private:
  std::map<char32_t, GlyphBitmap> glyphs_;
};

// Cell class for a character: 1 + charset index; 0 is background (blank
// glyphs such as space are background too).
inline int char_class(char32_t ch) {
  if (ch == U' ') return 0;
  const auto pos = charset().find(ch);
  return pos == std::u32string::npos ? 0 : static_cast<int>(pos) + 1;
}

inline int class_count() { return static_cast<int>(charset().size()) + 1; }

inline int text_width(std::size_t glyphs) {
  return glyphs == 0 ? 0 : static_cast<int>(glyphs) * kGlyphAdvance - 1;
}

}  // namespace keyread::synthdoc
