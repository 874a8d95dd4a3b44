#pragma once

#include <string>
#include <vector>

#include "keyread/json_util.hpp"

namespace keyread::model {

struct ModelConfig {
  int height = 64;
  int width = 96;
  int channels = 8;     // C; memory depth is 8C
  int hidden = 64;      // D_h
  int attention = 64;   // D_a
  int key_embed = 8;    // D_k
  int char_embed = 16;  // D_c
  std::vector<std::string> keys = {"number"};
  int n_warm = 2;
  int t_max = 24;  // decode steps after warm-up, EOS included
  double dropout = 0.1;

  int mem_height() const { return height / 8; }
  int mem_width() const { return width / 8; }
  int cells() const { return mem_height() * mem_width(); }
  int mem_depth() const { return 8 * channels; }
  int aug_depth() const { return mem_depth() + mem_height() + mem_width(); }

  int key_id(const std::string& key) const {
    for (std::size_t i = 0; i < keys.size(); ++i)
      if (keys[i] == key) return static_cast<int>(i);
    std::string known;
    for (const auto& k : keys) known += (known.empty() ? "" : ", ") + k;
    throw Error("unknown key \"" + key + "\" (model keys: " + known + ")");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void validate(const ModelConfig& c) {
  if (c.height <= 0 || c.width <= 0 || c.height % 8 != 0 || c.width % 8 != 0)
    throw Error("model config: image extents " + std::to_string(c.height) + "x" + std::to_string(c.width) +
                " must be positive multiples of 8");
  for (int d : {c.channels, c.hidden, c.attention, c.key_embed, c.char_embed, c.t_max})
    if (d <= 0) throw Error("model config: dimensions must be positive");
  if (c.n_warm < 0) throw Error("model config: n_warm must be non-negative");
  if (c.keys.empty()) throw Error("model config: key list is empty");
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw Error("model config: dropout must be in [0, 1)");
}

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"height", c.height},       {"width", c.width},       {"channels", c.channels},
           {"hidden", c.hidden},       {"attention", c.attention}, {"key_embed", c.key_embed},
           {"char_embed", c.char_embed}, {"keys", c.keys},         {"n_warm", c.n_warm},
           {"t_max", c.t_max},         {"dropout", c.dropout}};
}

inline void merge_model_config(const json& j, ModelConfig& c) {
  reject_unknown_keys(j,
                      {"height", "width", "channels", "hidden", "attention", "key_embed", "char_embed", "keys",
                       "n_warm", "t_max", "dropout"},
                      "model config");
  read_if(j, "height", c.height);
  read_if(j, "width", c.width);
  read_if(j, "channels", c.channels);
  read_if(j, "hidden", c.hidden);
  read_if(j, "attention", c.attention);
  read_if(j, "key_embed", c.key_embed);
  read_if(j, "char_embed", c.char_embed);
  read_if(j, "keys", c.keys);
  read_if(j, "n_warm", c.n_warm);
  read_if(j, "t_max", c.t_max);
  read_if(j, "dropout", c.dropout);
}

}  // namespace keyread::model
