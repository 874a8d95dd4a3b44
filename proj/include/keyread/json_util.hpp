#pragma once

#include <initializer_list>
#include <set>
#include <string>

#include "json.hpp"
#include "keyread/numcore/errors.hpp"

namespace keyread {

using json = nlohmann::json;

// Rejects members of `obj` outside `allowed`, naming the first offender.
inline void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw Error(where + ": expected a JSON object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : obj.items()) {
    if (!ok.count(k)) throw Error(where + ": unknown key \"" + k + "\"");
  }
}

template <typename T>
void read_if(const json& obj, const char* key, T& out) {
  if (auto it = obj.find(key); it != obj.end()) out = it->get<T>();
}

}  // namespace keyread
