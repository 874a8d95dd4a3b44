#pragma once

#include <cstdint>
#include <string>

#include "keyread/json_util.hpp"
#include "keyread/model/config.hpp"
#include "keyread/synthdoc/dataset.hpp"

namespace keyread::train {

struct TrainConfig {
  double lr = 2e-4;
  double pretrain_lr = 1e-3;
  int batch = 8;
  int eval_batch = 32;
  int pretrain_steps = 2000;
  int pretrain_eval_interval = 100;
  int phase1_steps = 6000;
  int phase2_steps = 20000;
  int eval_interval = 250;
  int patience = 5;         // phase 1, in evaluations
  int phase2_patience = 0;  // 0 disables early stopping in phase 2
  int log_interval = 50;
  double val_fraction = 0.1;  // of training templates, held out for model selection
  std::uint64_t seed = 1;

  bool operator==(const TrainConfig&) const = default;
};

inline void validate(const TrainConfig& c) {
  if (!(c.lr > 0.0) || !(c.pretrain_lr > 0.0)) throw Error("train config: learning rates must be positive");
  for (int v : {c.batch, c.eval_batch, c.pretrain_steps, c.pretrain_eval_interval, c.phase1_steps, c.phase2_steps,
                c.eval_interval, c.patience, c.log_interval})
    if (v <= 0) throw Error("train config: budgets, intervals and batch sizes must be positive");
  if (c.phase2_patience < 0) throw Error("train config: phase2_patience must be >= 0");
  if (c.val_fraction <= 0.0 || c.val_fraction >= 1.0) throw Error("train config: val_fraction must be in (0, 1)");
}

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"lr", c.lr},
           {"pretrain_lr", c.pretrain_lr},
           {"batch", c.batch},
           {"eval_batch", c.eval_batch},
           {"pretrain_steps", c.pretrain_steps},
           {"pretrain_eval_interval", c.pretrain_eval_interval},
           {"phase1_steps", c.phase1_steps},
           {"phase2_steps", c.phase2_steps},
           {"eval_interval", c.eval_interval},
           {"patience", c.patience},
           {"phase2_patience", c.phase2_patience},
           {"log_interval", c.log_interval},
           {"val_fraction", c.val_fraction},
           {"seed", c.seed}};
}

inline void merge_train_config(const json& j, TrainConfig& c) {
  reject_unknown_keys(j,
                      {"lr", "pretrain_lr", "batch", "eval_batch", "pretrain_steps", "pretrain_eval_interval",
                       "phase1_steps", "phase2_steps", "eval_interval", "patience", "phase2_patience",
                       "log_interval", "val_fraction", "seed"},
                      "train config");
  read_if(j, "lr", c.lr);
  read_if(j, "pretrain_lr", c.pretrain_lr);
  read_if(j, "batch", c.batch);
  read_if(j, "eval_batch", c.eval_batch);
  read_if(j, "pretrain_steps", c.pretrain_steps);
  read_if(j, "pretrain_eval_interval", c.pretrain_eval_interval);
  read_if(j, "phase1_steps", c.phase1_steps);
  read_if(j, "phase2_steps", c.phase2_steps);
  read_if(j, "eval_interval", c.eval_interval);
  read_if(j, "patience", c.patience);
  read_if(j, "phase2_patience", c.phase2_patience);
  read_if(j, "log_interval", c.log_interval);
  read_if(j, "val_fraction", c.val_fraction);
  read_if(j, "seed", c.seed);
}

// Generator, model and training settings as one document.
struct RunConfig {
  synthdoc::GeneratorConfig generator;
  model::ModelConfig model;
  TrainConfig train;

  bool operator==(const RunConfig&) const = default;
};

inline void to_json(json& j, const RunConfig& c) {
  json m, t;
  model::to_json(m, c.model);
  to_json(t, c.train);
  j = json{{"generator", c.generator}, {"model", m}, {"train", t}};
}

inline void merge_run_config(const json& j, RunConfig& c) {
  reject_unknown_keys(j, {"generator", "model", "train"}, "config");
  if (j.contains("generator")) synthdoc::merge_generator_config(j["generator"], c.generator);
  if (j.contains("model")) model::merge_model_config(j["model"], c.model);
  if (j.contains("train")) merge_train_config(j["train"], c.train);
}

}  // namespace keyread::train
