#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace keyread::train {

inline std::string_view strip(std::string_view s) {
  const auto ws = " \t\n\r\f\v";
  const auto a = s.find_first_not_of(ws);
  if (a == std::string_view::npos) return {};
  return s.substr(a, s.find_last_not_of(ws) - a + 1);
}

// Absent fields are empty strings, so empty/empty is a hit and any
// empty/non-empty pairing is a miss.
inline bool exact_match(std::string_view predicted, std::string_view truth) {
  return strip(predicted) == strip(truth);
}

struct Score {
  long n = 0;
  long correct = 0;
  double exact_match() const { return n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n); }
  void add(bool hit) {
    ++n;
    correct += hit;
  }
};

struct Scored {
  std::string key;
  std::string predicted;
  std::string truth;
};

struct ScoreTable {
  std::map<std::string, Score> per_key;
  Score overall;
};

inline ScoreTable score(const std::vector<Scored>& rows) {
  ScoreTable t;
  for (const auto& r : rows) {
    const bool hit = exact_match(r.predicted, r.truth);
    t.per_key[r.key].add(hit);
    t.overall.add(hit);
  }
  return t;
}

}  // namespace keyread::train
