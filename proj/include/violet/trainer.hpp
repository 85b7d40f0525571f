// SPDX-License-Identifier: Apache-2.0
//
// Run configuration, pre-training and fine-tuning loops, evaluation,
// gradient checking and grid sweeps.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "violet/autograd.hpp"
#include "violet/checkpoint.hpp"
#include "violet/detail/encoding.hpp"
#include "violet/downstream.hpp"
#include "violet/error.hpp"
#include "violet/masking.hpp"
#include "violet/model.hpp"
#include "violet/mvm_targets.hpp"
#include "violet/objectives.hpp"
#include "violet/optim.hpp"
#include "violet/rng.hpp"
#include "violet/synth_data.hpp"

namespace violet {

// ---------------------------------------------------------------------------
// Configuration

struct DataConfig {
  int num_frames = 4;
  int crop = 64;
  SampleMode sampling = SampleMode::kTrain;  // kEval: evenly spaced frames, centre crop
};

struct TrainingConfig {
  int epochs = 1;
  int batch_size = 8;
  long max_steps = -1;  // overrides epochs when >= 0
  long checkpoint_every = 0;
};

struct FinetuneConfig {
  std::string task = "retrieval";
  int epochs = 5;
  double lr = 1e-4;
  int batch_size = 8;
  bool freeze_backbone = false;
  int max_instances = -1;
};

struct SweepConfig {
  std::vector<std::vector<TargetKind>> targets;
  std::vector<std::vector<MaskStrategy>> strategies;
  std::vector<double> ratios;
  std::vector<LossKind> losses;
  std::vector<bool> heads;  // true: 2-layer MLP
  std::vector<std::string> metrics = {"retrieval-zero-shot", "qa-mc"};
};

struct RunConfig {
  std::uint64_t seed = 0;
  CorpusConfig corpus;
  ModelConfig model;  // vocab, frame size, frame count and heads are derived
  DataConfig data;
  ObjectiveConfig objective;
  int codebook_size = 64;
  int teacher_dim = 32;
  OptimizerConfig optimizer;
  TrainingConfig training;
  FinetuneConfig finetune;
  SweepConfig sweep;
};

namespace detail {

using Json = nlohmann::json;

inline void reject_unknown(const Json& j, const std::string& where, const std::set<std::string>& allowed) {
  require(j.is_object(), ErrorCode::kSchema, where + " must be an object");
  for (const auto& [key, _] : j.items())
    require(allowed.count(key) > 0, ErrorCode::kSchema, "unknown key '" + where + "." + key + "'");
}

inline std::string key_path(const std::string& where, const std::string& key) {
  return where.empty() ? key : where + "." + key;
}

inline void read(const Json& j, const std::string& where, const std::string& key, int& out) {
  if (!j.contains(key)) return;
  require(j[key].is_number_integer(), ErrorCode::kSchema, key_path(where, key) + " must be an integer");
  out = j[key].get<int>();
}
inline void read(const Json& j, const std::string& where, const std::string& key, long& out) {
  if (!j.contains(key)) return;
  require(j[key].is_number_integer(), ErrorCode::kSchema, key_path(where, key) + " must be an integer");
  out = j[key].get<long>();
}
inline void read(const Json& j, const std::string& where, const std::string& key, std::uint64_t& out) {
  if (!j.contains(key)) return;
  require(j[key].is_number_unsigned() || (j[key].is_number_integer() && j[key].get<long long>() >= 0),
          ErrorCode::kSchema, key_path(where, key) + " must be a nonnegative integer");
  out = j[key].get<std::uint64_t>();
}
inline void read(const Json& j, const std::string& where, const std::string& key, double& out) {
  if (!j.contains(key)) return;
  require(j[key].is_number(), ErrorCode::kSchema, key_path(where, key) + " must be a number");
  out = j[key].get<double>();
}
inline void read(const Json& j, const std::string& where, const std::string& key, bool& out) {
  if (!j.contains(key)) return;
  require(j[key].is_boolean(), ErrorCode::kSchema, key_path(where, key) + " must be a boolean");
  out = j[key].get<bool>();
}
inline void read(const Json& j, const std::string& where, const std::string& key, std::string& out) {
  if (!j.contains(key)) return;
  require(j[key].is_string(), ErrorCode::kSchema, key_path(where, key) + " must be a string");
  out = j[key].get<std::string>();
}

inline std::vector<std::string> string_list(const Json& j, const std::string& what) {
  require(j.is_array(), ErrorCode::kSchema, what + " must be an array of strings");
  std::vector<std::string> out;
  for (const auto& e : j) {
    require(e.is_string(), ErrorCode::kSchema, what + " must be an array of strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

template <class T, class F>
std::vector<T> parse_list(const Json& j, const std::string& what, F parse) {
  std::vector<T> out;
  for (const auto& s : string_list(j, what)) {
    try {
      out.push_back(parse(s));
    } catch (const Error& e) {
      throw Error(ErrorCode::kSchema, what + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<TargetKind> parse_targets(const Json& j, const std::string& what) {
  return parse_list<TargetKind>(j, what, target_kind_from_string);
}
inline std::vector<MaskStrategy> parse_strategies(const Json& j, const std::string& what) {
  return parse_list<MaskStrategy>(j, what, mask_strategy_from_string);
}

inline bool head_is_mlp(const std::string& s) {
  require(s == "mlp" || s == "linear", ErrorCode::kSchema, "head must be \"mlp\" or \"linear\"");
  return s == "mlp";
}

inline Json names(const std::vector<TargetKind>& v) {
  Json out = Json::array();
  for (auto k : v) out.push_back(to_string(k));
  return out;
}
inline Json names(const std::vector<MaskStrategy>& v) {
  Json out = Json::array();
  for (auto k : v) out.push_back(to_string(k));
  return out;
}

}  // namespace detail

inline const std::set<std::string>& finetune_tasks() {
  static const std::set<std::string> tasks = {"retrieval", "qa-mc", "qa-oe", "qa-fib", "captioning"};
  return tasks;
}

/// Range and consistency checks that need the whole config.
inline void validate(const RunConfig& c) {
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorCode::kInvalidConfig, msg); };
  check(c.corpus.size >= 2, "corpus.size must be >= 2");
  check(c.corpus.train_fraction > 0.0 && c.corpus.train_fraction <= 1.0,
        "corpus.train_fraction must be in (0, 1]");
  check(c.corpus.scene.frame_count >= 1 && c.corpus.scene.canvas_size >= 8, "corpus scene too small");
  check(c.corpus.scene.min_objects >= 0 && c.corpus.scene.min_objects <= c.corpus.scene.max_objects &&
            c.corpus.scene.max_objects <= 7,
        "corpus object counts must satisfy 0 <= min <= max <= 7");
  check(c.data.num_frames >= 1 && c.data.num_frames <= c.corpus.scene.frame_count,
        "data.num_frames must be in 1..corpus.frames");
  check(c.data.crop >= 1 && c.data.crop <= c.corpus.scene.canvas_size, "data.crop exceeds the canvas");
  check(c.model.patch > 0 && c.data.crop % c.model.patch == 0, "model.patch must divide data.crop");
  check(c.model.hidden > 0 && c.model.vt_heads > 0 && c.model.hidden % c.model.vt_heads == 0 &&
            c.model.ct_heads > 0 && c.model.hidden % c.model.ct_heads == 0,
        "model.hidden must be divisible by the head counts");
  check(c.model.vt_layers >= 0 && c.model.ct_layers >= 0 && c.model.mlp_ratio > 0 &&
            c.model.max_text_len > 0 && c.model.init_scale > 0.0,
        "model sizes must be positive");
  const auto& o = c.objective;
  check(o.vtm || o.mlm || o.mvm, "pretrain.tasks must not be empty");
  check(!o.strategies.empty(), "pretrain.strategies must not be empty");
  check(o.mask_ratio >= 0.0 && o.mask_ratio <= 1.0, "pretrain.mask_ratio must be in [0, 1]");
  check(o.mlm_ratio >= 0.0 && o.mlm_ratio <= 1.0, "pretrain.mlm_ratio must be in [0, 1]");
  check(o.vtm_negatives == -1 || o.vtm_negatives >= 1, "pretrain.vtm_negatives must be -1 or >= 1");
  if (o.mvm) check(!o.targets.empty(), "pretrain.targets must not be empty when MVM is enabled");
  for (TargetKind k : o.targets) {
    if (k == TargetKind::kHog) check(c.model.patch % 8 == 0, "HOG needs model.patch % 8 == 0");
    if (k == TargetKind::kVq) check(c.model.patch % 4 == 0, "VQ needs model.patch % 4 == 0");
    if (k == TargetKind::kFlow) check(c.data.num_frames >= 2, "Flow needs data.num_frames >= 2");
  }
  check(c.codebook_size >= 2 && c.teacher_dim >= 2, "codebook_size and teacher_dim must be >= 2");
  check(c.optimizer.lr > 0.0 && c.optimizer.beta1 >= 0.0 && c.optimizer.beta1 < 1.0 &&
            c.optimizer.beta2 >= 0.0 && c.optimizer.beta2 < 1.0 && c.optimizer.eps > 0.0 &&
            c.optimizer.weight_decay >= 0.0 && c.optimizer.warmup_fraction >= 0.0 &&
            c.optimizer.warmup_fraction <= 1.0,
        "optimizer settings out of range");
  check(c.training.epochs >= 0 && c.training.batch_size >= 1 && c.training.checkpoint_every >= 0,
        "training settings out of range");
  if (o.vtm) check(c.training.batch_size >= 2, "VTM needs training.batch_size >= 2");
  check(finetune_tasks().count(c.finetune.task) > 0, "unknown finetune.task '" + c.finetune.task + "'");
  check(c.finetune.epochs >= 0 && c.finetune.lr > 0.0 && c.finetune.batch_size >= 1,
        "finetune settings out of range");
  for (double r : c.sweep.ratios) check(r >= 0.0 && r <= 1.0, "sweep.ratios must be in [0, 1]");
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::read;
  RunConfig c;
  detail::reject_unknown(j, "config", {"seed", "corpus", "model", "data", "pretrain", "optimizer",
                                       "training", "finetune", "sweep"});
  read(j, "", "seed", c.seed);
  c.corpus.seed = c.seed;
  if (j.contains("corpus")) {
    const auto& s = j["corpus"];
    detail::reject_unknown(s, "corpus", {"size", "train_fraction", "seed", "canvas", "frames",
                                         "min_objects", "max_objects", "max_speed"});
    read(s, "corpus", "size", c.corpus.size);
    read(s, "corpus", "train_fraction", c.corpus.train_fraction);
    read(s, "corpus", "seed", c.corpus.seed);
    read(s, "corpus", "canvas", c.corpus.scene.canvas_size);
    read(s, "corpus", "frames", c.corpus.scene.frame_count);
    read(s, "corpus", "min_objects", c.corpus.scene.min_objects);
    read(s, "corpus", "max_objects", c.corpus.scene.max_objects);
    read(s, "corpus", "max_speed", c.corpus.scene.max_speed);
  }
  c.data.crop = c.corpus.scene.canvas_size;
  if (j.contains("model")) {
    const auto& s = j["model"];
    detail::reject_unknown(s, "model", {"hidden", "vt_layers", "vt_heads", "ct_layers", "ct_heads",
                                        "mlp_ratio", "patch", "max_text_len", "init_scale"});
    read(s, "model", "hidden", c.model.hidden);
    read(s, "model", "vt_layers", c.model.vt_layers);
    read(s, "model", "vt_heads", c.model.vt_heads);
    read(s, "model", "ct_layers", c.model.ct_layers);
    read(s, "model", "ct_heads", c.model.ct_heads);
    read(s, "model", "mlp_ratio", c.model.mlp_ratio);
    read(s, "model", "patch", c.model.patch);
    read(s, "model", "max_text_len", c.model.max_text_len);
    read(s, "model", "init_scale", c.model.init_scale);
  }
  if (j.contains("data")) {
    const auto& s = j["data"];
    detail::reject_unknown(s, "data", {"num_frames", "crop", "sampling"});
    read(s, "data", "num_frames", c.data.num_frames);
    read(s, "data", "crop", c.data.crop);
    std::string sampling = "random";
    read(s, "data", "sampling", sampling);
    require(sampling == "random" || sampling == "even", ErrorCode::kSchema,
            "data.sampling must be \"random\" or \"even\"");
    c.data.sampling = sampling == "random" ? SampleMode::kTrain : SampleMode::kEval;
  }
  if (j.contains("pretrain")) {
    const auto& s = j["pretrain"];
    detail::reject_unknown(s, "pretrain", {"tasks", "targets", "strategies", "mask_ratio", "loss",
                                           "head", "vtm_negatives", "mlm_ratio", "codebook_size",
                                           "teacher_dim", "mvm_on_images"});
    auto& o = c.objective;
    if (s.contains("tasks")) {
      o.vtm = o.mlm = o.mvm = false;
      for (const auto& t : detail::string_list(s["tasks"], "pretrain.tasks")) {
        if (t == "VTM") o.vtm = true;
        else if (t == "MLM") o.mlm = true;
        else if (t == "MVM") o.mvm = true;
        else throw Error(ErrorCode::kSchema, "pretrain.tasks: unknown task '" + t + "'");
      }
    }
    if (s.contains("targets")) o.targets = detail::parse_targets(s["targets"], "pretrain.targets");
    if (s.contains("strategies"))
      o.strategies = detail::parse_strategies(s["strategies"], "pretrain.strategies");
    read(s, "pretrain", "mask_ratio", o.mask_ratio);
    std::string loss = to_string(o.regression);
    read(s, "pretrain", "loss", loss);
    require(loss == "l1" || loss == "l2", ErrorCode::kSchema, "pretrain.loss must be \"l1\" or \"l2\"");
    o.regression = loss_kind_from_string(loss);
    std::string head = o.mlp_head ? "mlp" : "linear";
    read(s, "pretrain", "head", head);
    o.mlp_head = detail::head_is_mlp(head);
    read(s, "pretrain", "vtm_negatives", o.vtm_negatives);
    read(s, "pretrain", "mlm_ratio", o.mlm_ratio);
    read(s, "pretrain", "codebook_size", c.codebook_size);
    read(s, "pretrain", "teacher_dim", c.teacher_dim);
    read(s, "pretrain", "mvm_on_images", o.mvm_on_images);
  }
  if (j.contains("optimizer")) {
    const auto& s = j["optimizer"];
    detail::reject_unknown(s, "optimizer", {"lr", "beta1", "beta2", "eps", "weight_decay",
                                            "warmup_fraction", "min_lr_fraction"});
    read(s, "optimizer", "lr", c.optimizer.lr);
    read(s, "optimizer", "beta1", c.optimizer.beta1);
    read(s, "optimizer", "beta2", c.optimizer.beta2);
    read(s, "optimizer", "eps", c.optimizer.eps);
    read(s, "optimizer", "weight_decay", c.optimizer.weight_decay);
    read(s, "optimizer", "warmup_fraction", c.optimizer.warmup_fraction);
    read(s, "optimizer", "min_lr_fraction", c.optimizer.min_lr_fraction);
  }
  if (j.contains("training")) {
    const auto& s = j["training"];
    detail::reject_unknown(s, "training", {"epochs", "batch_size", "max_steps", "checkpoint_every"});
    read(s, "training", "epochs", c.training.epochs);
    read(s, "training", "batch_size", c.training.batch_size);
    read(s, "training", "max_steps", c.training.max_steps);
    read(s, "training", "checkpoint_every", c.training.checkpoint_every);
  }
  if (j.contains("finetune")) {
    const auto& s = j["finetune"];
    detail::reject_unknown(s, "finetune", {"task", "epochs", "lr", "batch_size", "freeze_backbone",
                                           "max_instances"});
    read(s, "finetune", "task", c.finetune.task);
    read(s, "finetune", "epochs", c.finetune.epochs);
    read(s, "finetune", "lr", c.finetune.lr);
    read(s, "finetune", "batch_size", c.finetune.batch_size);
    read(s, "finetune", "freeze_backbone", c.finetune.freeze_backbone);
    read(s, "finetune", "max_instances", c.finetune.max_instances);
  }
  if (j.contains("sweep")) {
    const auto& s = j["sweep"];
    detail::reject_unknown(s, "sweep", {"targets", "strategies", "ratios", "losses", "heads", "metrics"});
    if (s.contains("targets")) {
      require(s["targets"].is_array(), ErrorCode::kSchema, "sweep.targets must be an array of arrays");
      for (const auto& cell : s["targets"]) c.sweep.targets.push_back(detail::parse_targets(cell, "sweep.targets"));
    }
    if (s.contains("strategies")) {
      require(s["strategies"].is_array(), ErrorCode::kSchema, "sweep.strategies must be an array of arrays");
      for (const auto& cell : s["strategies"])
        c.sweep.strategies.push_back(detail::parse_strategies(cell, "sweep.strategies"));
    }
    if (s.contains("ratios")) {
      require(s["ratios"].is_array(), ErrorCode::kSchema, "sweep.ratios must be an array of numbers");
      for (const auto& r : s["ratios"]) {
        require(r.is_number(), ErrorCode::kSchema, "sweep.ratios must be an array of numbers");
        c.sweep.ratios.push_back(r.get<double>());
      }
    }
    if (s.contains("losses"))
      for (const auto& l : detail::string_list(s["losses"], "sweep.losses")) {
        require(l == "l1" || l == "l2", ErrorCode::kSchema, "sweep.losses entries must be l1 or l2");
        c.sweep.losses.push_back(loss_kind_from_string(l));
      }
    if (s.contains("heads"))
      for (const auto& h : detail::string_list(s["heads"], "sweep.heads"))
        c.sweep.heads.push_back(detail::head_is_mlp(h));
    if (s.contains("metrics")) {
      c.sweep.metrics = detail::string_list(s["metrics"], "sweep.metrics");
      for (const auto& m : c.sweep.metrics)
        require(m == "retrieval-zero-shot" || m == "qa-mc" || m == "pretrain", ErrorCode::kSchema,
                "unknown sweep metric '" + m + "'");
    }
  }
  validate(c);
  return c;
}

/// Fully resolved config (defaults filled in); the hash is taken over this.
inline nlohmann::json to_json(const RunConfig& c) {
  using Json = nlohmann::json;
  Json tasks = Json::array();
  if (c.objective.vtm) tasks.push_back("VTM");
  if (c.objective.mlm) tasks.push_back("MLM");
  if (c.objective.mvm) tasks.push_back("MVM");
  Json sweep_targets = Json::array(), sweep_strategies = Json::array(), losses = Json::array(),
       heads = Json::array();
  for (const auto& t : c.sweep.targets) sweep_targets.push_back(detail::names(t));
  for (const auto& s : c.sweep.strategies) sweep_strategies.push_back(detail::names(s));
  for (auto l : c.sweep.losses) losses.push_back(to_string(l));
  for (bool h : c.sweep.heads) heads.push_back(h ? "mlp" : "linear");
  return {
      {"seed", c.seed},
      {"corpus",
       {{"size", c.corpus.size},
        {"train_fraction", c.corpus.train_fraction},
        {"seed", c.corpus.seed},
        {"canvas", c.corpus.scene.canvas_size},
        {"frames", c.corpus.scene.frame_count},
        {"min_objects", c.corpus.scene.min_objects},
        {"max_objects", c.corpus.scene.max_objects},
        {"max_speed", c.corpus.scene.max_speed}}},
      {"model",
       {{"hidden", c.model.hidden},
        {"vt_layers", c.model.vt_layers},
        {"vt_heads", c.model.vt_heads},
        {"ct_layers", c.model.ct_layers},
        {"ct_heads", c.model.ct_heads},
        {"mlp_ratio", c.model.mlp_ratio},
        {"patch", c.model.patch},
        {"max_text_len", c.model.max_text_len},
        {"init_scale", c.model.init_scale}}},
      {"data",
       {{"num_frames", c.data.num_frames},
        {"crop", c.data.crop},
        {"sampling", c.data.sampling == SampleMode::kTrain ? "random" : "even"}}},
      {"pretrain",
       {{"tasks", tasks},
        {"targets", detail::names(c.objective.targets)},
        {"strategies", detail::names(c.objective.strategies)},
        {"mask_ratio", c.objective.mask_ratio},
        {"loss", to_string(c.objective.regression)},
        {"head", c.objective.mlp_head ? "mlp" : "linear"},
        {"vtm_negatives", c.objective.vtm_negatives},
        {"mlm_ratio", c.objective.mlm_ratio},
        {"codebook_size", c.codebook_size},
        {"teacher_dim", c.teacher_dim},
        {"mvm_on_images", c.objective.mvm_on_images}}},
      {"optimizer",
       {{"lr", c.optimizer.lr},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps},
        {"weight_decay", c.optimizer.weight_decay},
        {"warmup_fraction", c.optimizer.warmup_fraction},
        {"min_lr_fraction", c.optimizer.min_lr_fraction}}},
      {"training",
       {{"epochs", c.training.epochs},
        {"batch_size", c.training.batch_size},
        {"max_steps", c.training.max_steps},
        {"checkpoint_every", c.training.checkpoint_every}}},
      {"finetune",
       {{"task", c.finetune.task},
        {"epochs", c.finetune.epochs},
        {"lr", c.finetune.lr},
        {"batch_size", c.finetune.batch_size},
        {"freeze_backbone", c.finetune.freeze_backbone},
        {"max_instances", c.finetune.max_instances}}},
      {"sweep",
       {{"targets", sweep_targets},
        {"strategies", sweep_strategies},
        {"ratios", c.sweep.ratios},
        {"losses", losses},
        {"heads", heads},
        {"metrics", c.sweep.metrics}}},
  };
}

inline std::string config_hash(const RunConfig& c) { return detail::hex64(detail::fnv1a(to_json(c).dump())); }

inline RunConfig load_run_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_text_file(path.string()));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kSchema, "config is not valid JSON: " + std::string(e.what()));
  }
  return parse_run_config(j);
}

// ---------------------------------------------------------------------------
// Workspace: everything derived deterministically from a RunConfig

struct Workspace {
  RunConfig config;
  Corpus corpus;
  ModelConfig model;
  std::shared_ptr<const Codebook> codebook;
  std::map<TargetKind, std::shared_ptr<const Teacher>> teachers;

  TargetSources sources() const {
    TargetSources s;
    s.codebook = codebook.get();
    auto find = [&](TargetKind k) -> const Teacher* {
      auto it = teachers.find(k);
      return it == teachers.end() ? nullptr : it->second.get();
    };
    s.sif = find(TargetKind::kSif);
    s.tvf = find(TargetKind::kTvf);
    s.mmf = find(TargetKind::kMmf);
    return s;
  }

  std::vector<int> split(const std::string& name) const {
    require(name == "train" || name == "val", ErrorCode::kInvalidArgument,
            "split must be \"train\" or \"val\", got '" + name + "'");
    return corpus.split(name == "train");
  }

  FrameSample sample(const AnnotatedClip& clip, SampleMode mode, std::uint64_t seed) const {
    return sample_frames(clip, config.data.num_frames, mode, config.data.crop, seed);
  }
};

inline Codebook codebook_for(const Workspace& ws, std::uint64_t seed) {
  std::vector<int> idx = ws.corpus.split(true);
  idx.resize(std::min<std::size_t>(idx.size(), 32));
  Matrix all(0, 48);
  for (int i : idx) {
    const AnnotatedClip clip = ws.corpus.clip(i);
    const Matrix d = patch_descriptors(ws.sample(clip, SampleMode::kEval, 0).frames, ws.config.model.patch);
    Matrix grown(all.rows() + d.rows(), 48);
    grown << all, d;
    all = std::move(grown);
  }
  return build_codebook(all, ws.config.codebook_size, seed);
}

inline Workspace make_workspace(const RunConfig& cfg) {
  validate(cfg);
  Workspace ws;
  ws.config = cfg;
  ws.corpus = build_corpus(cfg.corpus);
  ws.model = cfg.model;
  ws.model.vocab_size = ws.corpus.vocab().size();
  ws.model.frame_size = cfg.data.crop;
  ws.model.max_frames = cfg.data.num_frames;
  ws.model.seed = derive_seed(cfg.seed, 11);
  ws.model.mvm_heads.clear();
  if (cfg.objective.mvm) {
    for (TargetKind k : cfg.objective.targets) {
      ws.model.mvm_heads.push_back(
          mvm_head_spec(k, ws.model, cfg.objective.mlp_head, cfg.codebook_size, cfg.teacher_dim));
      if (k == TargetKind::kVq && !ws.codebook)
        ws.codebook = std::make_shared<const Codebook>(codebook_for(ws, derive_seed(cfg.seed, 12)));
      if (k == TargetKind::kSif || k == TargetKind::kTvf || k == TargetKind::kMmf)
        ws.teachers[k] = std::make_shared<const Teacher>(
            Teacher::make(teacher_arity_for(k), cfg.model.patch, cfg.teacher_dim,
                          derive_seed(cfg.seed, 13, static_cast<std::uint64_t>(k))));
    }
  }
  validate(ws.model);
  return ws;
}

inline PretrainExample make_example(const Workspace& ws, int index, SampleMode mode, std::uint64_t seed) {
  PretrainExample ex;
  auto clip = std::make_shared<const AnnotatedClip>(ws.corpus.clip(index));
  ex.sample = ws.sample(*clip, mode, seed);
  ex.text = tokenize(clip->caption, ws.corpus.vocab());
  ex.clip = std::move(clip);
  return ex;
}

/// Shuffled fixed-size batches; a trailing singleton joins the previous batch
/// so every batch has in-batch negatives.
inline std::vector<std::vector<int>> epoch_batches(std::vector<int> indices, int batch_size,
                                                   std::uint64_t seed) {
  Rng rng(seed);
  shuffle(indices, rng);
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < indices.size(); i += static_cast<std::size_t>(batch_size))
    out.emplace_back(indices.begin() + static_cast<std::ptrdiff_t>(i),
                     indices.begin() + static_cast<std::ptrdiff_t>(
                                           std::min(indices.size(), i + static_cast<std::size_t>(batch_size))));
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Logging

using LogSink = std::function<void(const nlohmann::json&)>;

/// Appends JSON lines to a file and forwards each record to an optional sink.
class JsonLog {
 public:
  JsonLog(const std::filesystem::path& path, LogSink sink) : sink_(std::move(sink)) {
    if (!path.empty()) {
      std::filesystem::create_directories(path.parent_path());
      file_.open(path, std::ios::app);
      require(static_cast<bool>(file_), ErrorCode::kIo, "cannot open log " + path.string());
    }
  }
  void write(const nlohmann::json& record) {
    if (file_.is_open()) file_ << record.dump() << '\n';
    if (sink_) sink_(record);
  }

 private:
  std::ofstream file_;
  LogSink sink_;
};

// ---------------------------------------------------------------------------
// Pre-training

struct PretrainOptions {
  std::filesystem::path out;     // empty: nothing written
  std::filesystem::path resume;  // checkpoint directory to continue from
  LogSink log;
};

struct PretrainResult {
  ModelConfig model;
  ParamStore params;
  std::vector<LossReport> history;
  long steps = 0;
  std::string config_hash;
};

inline long steps_per_epoch(const Workspace& ws) {
  return static_cast<long>(
      epoch_batches(ws.corpus.split(true), ws.config.training.batch_size, 0).size());
}

inline long total_pretrain_steps(const Workspace& ws) {
  if (ws.config.training.max_steps >= 0) return ws.config.training.max_steps;
  return static_cast<long>(ws.config.training.epochs) * steps_per_epoch(ws);
}

inline void save_resources(const Workspace& ws, const std::filesystem::path& dir) {
  if (ws.codebook) detail::write_text_file((dir / "codebook.json").string(), ws.codebook->to_json().dump(1));
  for (const auto& [kind, t] : ws.teachers) t->save(dir / "teachers" / to_string(kind));
}

inline void save_pretrain_checkpoint(const std::filesystem::path& dir, const Workspace& ws,
                                     const ParamStore& params, const AdamW& opt, long step) {
  nlohmann::json meta = {{"kind", "pretrain"},
                         {"config_hash", config_hash(ws.config)},
                         {"run_config", to_json(ws.config)},
                         {"step", step},
                         {"vocabulary", ws.corpus.vocab().tokens()}};
  save_checkpoint(dir, ws.model, params, meta);
  save_params(opt.first_moment(), {{"optimizer_step", opt.step_count()}}, dir / "optimizer" / "m");
  save_params(opt.second_moment(), {{"optimizer_step", opt.step_count()}}, dir / "optimizer" / "v");
  save_resources(ws, dir);
}

inline std::string step_dir_name(long step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06ld", step);
  return buf;
}

/// One optimisation step of the combined objective.
inline LossReport pretrain_step(const Workspace& ws, ParamStore& params, AdamW& opt, long step,
                                long total_steps) {
  const RunConfig& cfg = ws.config;
  const long per_epoch = steps_per_epoch(ws);
  const long epoch = step / per_epoch;
  const auto batches = epoch_batches(ws.corpus.split(true), cfg.training.batch_size,
                                     derive_seed(cfg.seed, 21, static_cast<std::uint64_t>(epoch)));
  const auto& ids = batches[static_cast<std::size_t>(step % per_epoch)];
  std::vector<PretrainExample> batch;
  for (int i : ids)
    batch.push_back(make_example(ws, i, cfg.data.sampling,
                                 derive_seed(cfg.seed, 22, static_cast<std::uint64_t>(step),
                                             static_cast<std::uint64_t>(i))));
  Tape tape;
  Model model(tape, ws.model, params);
  LossResult res = total_loss(model, batch, cfg.objective, ws.sources(),
                              derive_seed(cfg.seed, 23, static_cast<std::uint64_t>(step)));
  tape.backward(res.total);
  opt.step(params, tape.param_grads(), learning_rate(cfg.optimizer, step, total_steps));
  return res.report;
}

inline PretrainResult pretrain(const RunConfig& cfg, const PretrainOptions& options = {}) {
  const Workspace ws = make_workspace(cfg);
  PretrainResult result;
  result.model = ws.model;
  result.config_hash = config_hash(cfg);
  const long total = total_pretrain_steps(ws);
  AdamW opt(cfg.optimizer);
  long start = 0;
  if (!options.resume.empty()) {
    const Checkpoint ck = load_checkpoint(options.resume);
    require(ck.meta.value("config_hash", std::string()) == result.config_hash,
            ErrorCode::kCheckpointIncompatible,
            "resume checkpoint was produced by a different config (hash " +
                ck.meta.value("config_hash", std::string("?")) + ", expected " + result.config_hash + ")");
    result.params = ck.params;
    start = ck.meta.at("step").get<long>();
    const auto m_dir = options.resume / "optimizer" / "m";
    opt.restore(load_checkpoint_config(m_dir).at("optimizer_step").get<long>(), load_params(m_dir),
                load_params(options.resume / "optimizer" / "v"));
  } else {
    result.params = init_params(ws.model, ws.model.seed);
  }
  JsonLog log(options.out.empty() ? std::filesystem::path() : options.out / "log.jsonl", options.log);
  log.write({{"event", "pretrain_start"},
             {"config_hash", result.config_hash},
             {"steps", total},
             {"start_step", start},
             {"num_params", result.params.num_scalars()}});
  for (long step = start; step < total; ++step) {
    LossReport rep = pretrain_step(ws, result.params, opt, step, total);
    nlohmann::json rec = {{"event", "step"}, {"step", step}, {"lr", learning_rate(cfg.optimizer, step, total)}};
    rec["loss"] = rep.to_json();
    log.write(rec);
    result.history.push_back(std::move(rep));
    if (!options.out.empty() && cfg.training.checkpoint_every > 0 && (step + 1) % cfg.training.checkpoint_every == 0 &&
        step + 1 < total)
      save_pretrain_checkpoint(options.out / step_dir_name(step + 1), ws, result.params, opt, step + 1);
  }
  result.steps = total;
  require(result.params.all_finite(), ErrorCode::kInvalidArgument, "training diverged (non-finite parameters)");
  if (!options.out.empty()) save_pretrain_checkpoint(options.out / "checkpoint", ws, result.params, opt, total);
  log.write({{"event", "pretrain_end"}, {"steps", total}});
  return result;
}

/// Losses and accuracies of the three objectives over `rounds` seeded
/// maskings of the given clips, all in one batch per round.
struct PretrainMetrics {
  double mvm = 0.0, vtm = 0.0, mlm = 0.0;
  double vtm_accuracy = 0.0;       // inside the joint masked pass
  double matching_accuracy = 0.0;  // VTM head on intact video and text
  double mlm_accuracy = 0.0;
  int rounds = 0;
};

inline PretrainMetrics pretrain_metrics(const Workspace& ws, const ParamStore& params,
                                        const std::vector<int>& indices, int rounds, std::uint64_t seed) {
  require(!indices.empty(), ErrorCode::kInvalidArgument, "evaluation split is empty");
  require(rounds >= 1, ErrorCode::kInvalidArgument, "rounds must be >= 1");
  PretrainMetrics m;
  m.rounds = rounds;
  long anchors = 0, vtm_ok = 0, tokens = 0, mlm_ok = 0;
  for (int r = 0; r < rounds; ++r) {
    std::vector<PretrainExample> batch;
    for (int i : indices)
      batch.push_back(make_example(ws, i, ws.config.data.sampling,
                                   derive_seed(seed, 31, static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(i))));
    Tape tape;
    Model model(tape, ws.model, params);
    ObjectiveConfig oc = ws.config.objective;
    if (indices.size() < 2) oc.vtm = false;
    const LossReport rep = total_loss(model, batch, oc, ws.sources(), derive_seed(seed, 32, static_cast<std::uint64_t>(r))).report;
    m.mvm += rep.mvm / rounds;
    m.vtm += rep.vtm / rounds;
    m.mlm += rep.mlm / rounds;
    anchors += rep.vtm_anchors;
    vtm_ok += rep.vtm_correct;
    tokens += rep.masked_tokens;
    mlm_ok += rep.mlm_correct;
  }
  m.vtm_accuracy = anchors ? static_cast<double>(vtm_ok) / static_cast<double>(anchors) : 0.0;
  if (indices.size() >= 2) {
    std::vector<PretrainExample> batch;
    for (int i : indices) batch.push_back(make_example(ws, i, SampleMode::kEval, 0));
    ObjectiveConfig oc = ws.config.objective;
    oc.mvm = oc.mlm = false;
    oc.vtm = true;
    Tape tape;
    Model model(tape, ws.model, params);
    const LossReport rep = total_loss(model, batch, oc, ws.sources(), derive_seed(seed, 33)).report;
    m.matching_accuracy = static_cast<double>(rep.vtm_correct) / static_cast<double>(rep.vtm_anchors);
  }
  m.mlm_accuracy = tokens ? static_cast<double>(mlm_ok) / static_cast<double>(tokens) : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Fine-tuning and evaluation

/// Architecture fields a checkpoint must share with the run config.
inline void check_compatible(const ModelConfig& checkpoint, const ModelConfig& expected) {
  auto same = [&](int a, int b, const char* field) {
    require(a == b, ErrorCode::kCheckpointIncompatible,
            std::string("checkpoint ") + field + " = " + std::to_string(a) + ", config expects " +
                std::to_string(b));
  };
  same(checkpoint.hidden, expected.hidden, "hidden");
  same(checkpoint.vt_layers, expected.vt_layers, "vt_layers");
  same(checkpoint.vt_heads, expected.vt_heads, "vt_heads");
  same(checkpoint.ct_layers, expected.ct_layers, "ct_layers");
  same(checkpoint.ct_heads, expected.ct_heads, "ct_heads");
  same(checkpoint.mlp_ratio, expected.mlp_ratio, "mlp_ratio");
  same(checkpoint.patch, expected.patch, "patch");
  same(checkpoint.frame_size, expected.frame_size, "frame_size");
  same(checkpoint.max_frames, expected.max_frames, "max_frames");
  same(checkpoint.vocab_size, expected.vocab_size, "vocab_size");
  same(checkpoint.max_text_len, expected.max_text_len, "max_text_len");
}

inline QaFormat qa_format_for(const std::string& task) {
  if (task == "qa-mc") return QaFormat::kMultipleChoice;
  if (task == "qa-oe") return QaFormat::kOpenEnded;
  if (task == "qa-fib") return QaFormat::kFillInBlank;
  throw Error(ErrorCode::kInvalidArgument, "not a QA task: '" + task + "'");
}

/// QA instances for corpus clips with at least one object; frames are the
/// evenly spaced evaluation sample.
inline std::vector<QaInstance> qa_instances(const Workspace& ws, const std::vector<int>& indices,
                                            QaFormat format, std::uint64_t seed, int limit = -1) {
  std::vector<QaInstance> out;
  for (int i : indices) {
    if (limit >= 0 && static_cast<int>(out.size()) >= limit) break;
    const auto& e = ws.corpus.entries()[static_cast<std::size_t>(i)];
    if (e.scene.objects.empty()) continue;
    const AnnotatedClip clip = ws.corpus.clip(i);
    out.push_back(make_qa_instance(e.scene, ws.sample(clip, SampleMode::kEval, 0).frames, format,
                                   derive_seed(seed, 41, static_cast<std::uint64_t>(i))));
  }
  return out;
}

struct FinetuneResult {
  ModelConfig model;
  ParamStore params;
  std::vector<double> losses;
};

inline FinetuneResult finetune(const Workspace& ws, const ModelConfig& model_config, ParamStore params,
                               const FinetuneConfig& fc, std::uint64_t seed, const LogSink& sink = {}) {
  require(finetune_tasks().count(fc.task) > 0, ErrorCode::kInvalidArgument,
          "unknown finetune task '" + fc.task + "'");
  FinetuneResult result;
  result.model = model_config;
  if (fc.task == "retrieval") init_t2v_from_vtm(params);
  std::vector<int> train = ws.corpus.split(true);
  if (fc.max_instances >= 0 && static_cast<int>(train.size()) > fc.max_instances)
    train.resize(static_cast<std::size_t>(fc.max_instances));
  require(!train.empty(), ErrorCode::kInvalidArgument, "finetune split is empty");
  const bool is_qa = fc.task.rfind("qa-", 0) == 0;
  std::vector<QaInstance> qa;
  if (is_qa) {
    qa = qa_instances(ws, train, qa_format_for(fc.task), seed);
    require(!qa.empty(), ErrorCode::kInvalidArgument, "no QA instances in the finetune split");
  }
  const int n = is_qa ? static_cast<int>(qa.size()) : static_cast<int>(train.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  const int batch_size = std::max(fc.batch_size, fc.task == "retrieval" ? 2 : 1);
  const long per_epoch = static_cast<long>(epoch_batches(order, batch_size, 0).size());
  const long total = per_epoch * fc.epochs;
  OptimizerConfig oc = ws.config.optimizer;
  oc.lr = fc.lr;
  AdamW opt(oc);
  std::vector<std::string> frozen;
  if (fc.freeze_backbone) frozen = {"vt.", "le.", "ct."};

  for (long step = 0; step < total; ++step) {
    const auto batches = epoch_batches(order, batch_size,
                                       derive_seed(seed, 42, static_cast<std::uint64_t>(step / per_epoch)));
    const auto& ids = batches[static_cast<std::size_t>(step % per_epoch)];
    Tape tape;
    tape.freeze_prefixes(frozen);
    Model model(tape, model_config, params);
    Var loss;
    if (fc.task == "retrieval") {
      std::vector<Array4d> videos;
      std::vector<std::vector<int>> texts;
      for (int k : ids) {
        const int idx = train[static_cast<std::size_t>(k)];
        const AnnotatedClip clip = ws.corpus.clip(idx);
        videos.push_back(ws.sample(clip, ws.config.data.sampling,
                                   derive_seed(seed, 43, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(idx)))
                             .frames);
        texts.push_back(tokenize(clip.caption, ws.corpus.vocab()));
      }
      loss = retrieval_loss(model, videos, texts);
    } else if (is_qa) {
      std::vector<Var> rows;
      std::vector<int> labels;
      for (int k : ids) {
        const QaInstance& inst = qa[static_cast<std::size_t>(k)];
        rows.push_back(qa_logits(model, inst, ws.corpus.vocab()));
        labels.push_back(qa_label(inst, ws.corpus.vocab()));
      }
      loss = cross_entropy(concat_rows(rows), labels);
    } else {
      std::vector<Var> parts;
      for (int k : ids) {
        const int idx = train[static_cast<std::size_t>(k)];
        const AnnotatedClip clip = ws.corpus.clip(idx);
        const FrameSample s = ws.sample(clip, ws.config.data.sampling,
                                        derive_seed(seed, 43, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(idx)));
        MlmResult r = caption_loss(model, s.frames, tokenize(clip.caption, ws.corpus.vocab()),
                                   derive_seed(seed, 44, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(idx)));
        if (r.count > 0) parts.push_back(r.loss);
      }
      if (parts.empty()) {
        result.losses.push_back(0.0);
        continue;
      }
      loss = scale(sum_scalars(parts), 1.0 / static_cast<double>(parts.size()));
    }
    tape.backward(loss);
    ParamStore grads = tape.param_grads();
    for (const auto& prefix : frozen)
      for (auto it = grads.begin(); it != grads.end();) {
        if (it->first.compare(0, prefix.size(), prefix) == 0) {
          const std::string key = it->first;
          ++it;
          grads.erase(key);
        } else {
          ++it;
        }
      }
    opt.step(params, grads, learning_rate(oc, step, total));
    result.losses.push_back(loss.scalar());
    if (sink) sink({{"event", "finetune_step"}, {"task", fc.task}, {"step", step}, {"loss", loss.scalar()}});
  }
  result.params = std::move(params);
  return result;
}

inline const std::set<std::string>& evaluation_tasks() {
  static const std::set<std::string> tasks = {"retrieval", "retrieval-zero-shot", "qa-mc", "qa-oe",
                                              "qa-fib",    "captioning",          "pretrain"};
  return tasks;
}

/// Deterministic metrics for one task on one split, as metric records.
inline nlohmann::json evaluate(const Workspace& ws, const ModelConfig& model_config,
                               const ParamStore& params, const std::string& task,
                               const std::string& split, std::uint64_t seed,
                               const std::string& checkpoint_id = "") {
  require(evaluation_tasks().count(task) > 0, ErrorCode::kInvalidArgument,
          "unknown evaluation task '" + task + "'");
  const std::vector<int> idx = ws.split(split);
  require(!idx.empty(), ErrorCode::kInvalidArgument, "split '" + split + "' is empty");
  nlohmann::json records = nlohmann::json::array();
  auto add = [&](const std::string& metric, double value, int n) {
    records.push_back(metric_record(task, metric, value, n, seed, checkpoint_id));
  };
  const Vocabulary& vocab = ws.corpus.vocab();
  if (task == "retrieval" || task == "retrieval-zero-shot") {
    std::vector<Array4d> videos;
    std::vector<std::vector<int>> texts;
    std::vector<std::string> ids;
    for (int i : idx) {
      const AnnotatedClip clip = ws.corpus.clip(i);
      videos.push_back(ws.sample(clip, SampleMode::kEval, 0).frames);
      texts.push_back(tokenize(clip.caption, vocab));
      ids.push_back(clip.clip_id);
    }
    const RetrievalIndex index =
        build_retrieval_index(model_config, params, videos, texts, ids, task == "retrieval-zero-shot");
    const int n = static_cast<int>(idx.size());
    for (int k : {1, 5, 10})
      if (k <= n) add("R@" + std::to_string(k), recall_at_k(index, k), n);
  } else if (task.rfind("qa-", 0) == 0) {
    const auto qa = qa_instances(ws, idx, qa_format_for(task), seed);
    require(!qa.empty(), ErrorCode::kInvalidArgument, "split '" + split + "' has no QA instances");
    int correct = 0;
    for (const auto& inst : qa) correct += qa_correct(qa_answer(model_config, params, inst, vocab), inst, vocab);
    add("accuracy", static_cast<double>(correct) / static_cast<double>(qa.size()), static_cast<int>(qa.size()));
  } else if (task == "captioning") {
    std::vector<std::vector<int>> pred, ref;
    for (int i : idx) {
      const AnnotatedClip clip = ws.corpus.clip(i);
      pred.push_back(caption_generate(model_config, params, ws.sample(clip, SampleMode::kEval, 0).frames));
      ref.push_back(tokenize(clip.caption, vocab));
    }
    const CaptionMetrics m = caption_metrics(pred, ref);
    add("exact_match", m.exact, m.instances);
    add("token_accuracy", m.per_token, m.instances);
  } else {
    Workspace eval_ws = ws;
    eval_ws.model = model_config;
    const PretrainMetrics m = pretrain_metrics(eval_ws, params, idx, 4, seed);
    const int n = static_cast<int>(idx.size());
    add("mvm_loss", m.mvm, n);
    add("vtm_loss", m.vtm, n);
    add("mlm_loss", m.mlm, n);
    add("vtm_accuracy", m.vtm_accuracy, n);
    add("matching_accuracy", m.matching_accuracy, n);
    add("mlm_accuracy", m.mlm_accuracy, n);
  }
  return records;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckEntry {
  std::string loss;
  std::string group;
  double rel_error = 0.0;
  int coords = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  double max_error(const std::string& loss_prefix = "") const {
    double m = 0.0;
    for (const auto& e : entries)
      if (e.loss.compare(0, loss_prefix.size(), loss_prefix) == 0) m = std::max(m, e.rel_error);
    return m;
  }

  std::vector<std::string> losses() const {
    std::vector<std::string> out;
    for (const auto& e : entries)
      if (out.empty() || out.back() != e.loss) out.push_back(e.loss);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json per_loss = nlohmann::json::object();
    for (const auto& name : losses()) per_loss[name] = max_error(name);
    return {{"max_rel_error", max_error()}, {"per_loss", per_loss}, {"groups", entries.size()}};
  }
};

struct GradCheckConfig {
  std::uint64_t seed = 0;
  int hidden = 8;
  int max_coords = 12;  // sampled coordinates per parameter group
  double step = 1e-5;
  std::vector<std::string> only;  // loss-name prefixes; empty: all
};

/// ||a - n|| / max(||a||, ||n||, floor). The floor keeps groups whose exact
/// gradient is zero (attention key biases) from dividing rounding noise by
/// rounding noise.
inline double relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric,
                             double floor = 1e-5) {
  const double scale = std::max({analytic.norm(), numeric.norm(), floor});
  return (analytic - numeric).norm() / scale;
}

namespace detail {

struct GradCase {
  std::string name;
  ObjectiveConfig objective;
  std::vector<HeadSpec> heads;
};

}  // namespace detail

/// Central finite differences against reverse-mode gradients for every
/// loss on a d=8 model over a 2 x 2 patch grid with two frames.
inline GradCheckReport grad_check(const GradCheckConfig& gc = {}) {
  const Vocabulary vocab = Vocabulary::standard();
  RandomSceneOptions so;
  so.canvas_size = 16;
  so.frame_count = 4;
  so.min_objects = 2;
  so.max_objects = 2;
  std::vector<PretrainExample> batch;
  for (std::uint64_t i = 0; i < 2; ++i) {
    auto clip = std::make_shared<const AnnotatedClip>(generate_clip(random_scene(derive_seed(gc.seed, 51, i), so)));
    PretrainExample ex;
    ex.sample = sample_frames(*clip, 2, SampleMode::kEval, 16, 0);
    ex.text = tokenize(clip->caption, vocab);
    ex.clip = clip;
    batch.push_back(std::move(ex));
  }
  ModelConfig mc;
  mc.hidden = gc.hidden;
  mc.vt_layers = 1;
  mc.vt_heads = 2;
  mc.ct_layers = 1;
  mc.ct_heads = 2;
  mc.mlp_ratio = 2;
  mc.patch = 8;
  mc.frame_size = 16;
  mc.max_frames = 2;
  mc.vocab_size = vocab.size();
  mc.max_text_len = 24;
  mc.init_scale = 0.5;

  Matrix desc(0, 48);
  for (const auto& ex : batch) {
    const Matrix d = patch_descriptors(ex.sample.frames, mc.patch);
    Matrix grown(desc.rows() + d.rows(), 48);
    grown << desc, d;
    desc = std::move(grown);
  }
  const int k = 3;
  const Codebook book = build_codebook(desc, k, derive_seed(gc.seed, 52));
  const int tdim = 6;
  const Teacher sif = Teacher::make(TeacherArity::kImage, mc.patch, tdim, derive_seed(gc.seed, 53));
  const Teacher tvf = Teacher::make(TeacherArity::kVideo, mc.patch, tdim, derive_seed(gc.seed, 54));
  const Teacher mmf = Teacher::make(TeacherArity::kMultimodalImage, mc.patch, tdim, derive_seed(gc.seed, 55));
  TargetSources src;
  src.codebook = &book;
  src.sif = &sif;
  src.tvf = &tvf;
  src.mmf = &mmf;

  std::vector<detail::GradCase> cases;
  ObjectiveConfig base;
  base.strategies = {MaskStrategy::kRandom};
  base.mask_ratio = 0.5;
  for (TargetKind kind : all_target_kinds())
    for (bool mlp : {true, false})
      for (LossKind loss : {LossKind::kL1, LossKind::kL2}) {
        if (kind == TargetKind::kVq && loss == LossKind::kL2) continue;
        detail::GradCase c;
        c.objective = base;
        c.objective.vtm = c.objective.mlm = false;
        c.objective.targets = {kind};
        c.objective.regression = loss;
        c.heads = {mvm_head_spec(kind, mc, mlp, k, tdim)};
        c.name = "MVM/" + to_string(kind) + "/" + (mlp ? "mlp" : "linear") +
                 (kind == TargetKind::kVq ? "/cross-entropy" : "/" + to_string(loss));
        cases.push_back(c);
      }
  {
    detail::GradCase c;
    c.name = "VTM";
    c.objective = base;
    c.objective.mlm = c.objective.mvm = false;
    cases.push_back(c);
    c.name = "MLM";
    c.objective = base;
    c.objective.vtm = c.objective.mvm = false;
    c.objective.mlm_ratio = 0.5;
    cases.push_back(c);
    c.name = "total";
    c.objective = base;
    c.objective.mlm_ratio = 0.5;
    c.heads = {mvm_head_spec(TargetKind::kPixel, mc, true, k, tdim)};
    cases.push_back(c);
  }

  GradCheckReport report;
  for (const auto& c : cases) {
    if (!gc.only.empty() &&
        std::none_of(gc.only.begin(), gc.only.end(),
                     [&](const std::string& p) { return c.name.compare(0, p.size(), p) == 0; }))
      continue;
    ModelConfig cfg = mc;
    cfg.mvm_heads = c.heads;
    ParamStore params = init_params(cfg, derive_seed(gc.seed, 56));
    const std::uint64_t loss_seed = derive_seed(gc.seed, 57);
    auto value = [&](const ParamStore& p) {
      Tape tape;
      Model model(tape, cfg, p);
      return total_loss(model, batch, c.objective, src, loss_seed).total.scalar();
    };
    ParamStore grads;
    {
      Tape tape;
      Model model(tape, cfg, params);
      LossResult r = total_loss(model, batch, c.objective, src, loss_seed);
      require(r.report.masked_patches > 0 || !c.objective.mvm, ErrorCode::kInvalidArgument,
              "gradcheck mask is empty");
      tape.backward(r.total);
      grads = tape.param_grads();
    }
    Rng rng(derive_seed(gc.seed, 58, detail::fnv1a(c.name)));
    for (auto& [path, m] : params) {
      const int size = static_cast<int>(m.size());
      std::vector<int> coords;
      if (size <= gc.max_coords) {
        for (int i = 0; i < size; ++i) coords.push_back(i);
      } else {
        coords = sample_without_replacement(size, gc.max_coords, rng);
      }
      const Matrix g = grads.contains(path) ? grads.at(path) : Matrix::Zero(m.rows(), m.cols());
      Eigen::VectorXd a(coords.size()), n(coords.size());
      for (std::size_t q = 0; q < coords.size(); ++q) {
        double& x = m.data()[coords[q]];
        const double orig = x;
        x = orig + gc.step;
        const double up = value(params);
        x = orig - gc.step;
        const double down = value(params);
        x = orig;
        a(static_cast<Eigen::Index>(q)) = g.data()[coords[q]];
        n(static_cast<Eigen::Index>(q)) = (up - down) / (2.0 * gc.step);
      }
      report.entries.push_back({c.name, path, relative_error(a, n), static_cast<int>(coords.size())});
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Sweep

struct ExperimentRow {
  std::string run_id;
  std::string label;
  std::string config_hash;
  std::string status = "ok";
  std::map<std::string, double> metrics;
  std::map<std::string, double> deltas;  // metric minus baseline
};

struct ExperimentTable {
  std::vector<std::string> columns;
  std::vector<ExperimentRow> rows;

  nlohmann::json to_json() const {
    nlohmann::json out = {{"columns", columns}, {"rows", nlohmann::json::array()}};
    for (const auto& r : rows) {
      nlohmann::json row = {{"run_id", r.run_id},
                            {"label", r.label},
                            {"config_hash", r.config_hash},
                            {"status", r.status},
                            {"metrics", nlohmann::json::object()},
                            {"deltas", nlohmann::json::object()}};
      for (const auto& [k, v] : r.metrics) row["metrics"][k] = v;
      for (const auto& [k, v] : r.deltas) row["deltas"][k] = v;
      out["rows"].push_back(row);
    }
    return out;
  }

  /// Aligned text rendering: one column per metric, deltas in parentheses.
  std::string to_text() const {
    std::vector<std::vector<std::string>> cells;
    std::vector<std::string> header = {"run", "pre-training", "status"};
    header.insert(header.end(), columns.begin(), columns.end());
    cells.push_back(header);
    for (const auto& r : rows) {
      std::vector<std::string> line = {r.run_id, r.label, r.status == "ok" ? "ok" : "error"};
      for (const auto& c : columns) {
        auto it = r.metrics.find(c);
        if (it == r.metrics.end()) {
          line.push_back("-");
          continue;
        }
        char buf[64];
        auto d = r.deltas.find(c);
        if (d != r.deltas.end() && r.run_id != rows.front().run_id)
          std::snprintf(buf, sizeof buf, "%.3f (%+.3f)", it->second, d->second);
        else
          std::snprintf(buf, sizeof buf, "%.3f", it->second);
        line.push_back(buf);
      }
      cells.push_back(line);
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& line : cells)
      for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
    std::ostringstream out;
    for (std::size_t r = 0; r < cells.size(); ++r) {
      for (std::size_t i = 0; i < cells[r].size(); ++i) {
        out << cells[r][i] << std::string(width[i] - cells[r][i].size(), ' ');
        if (i + 1 < cells[r].size()) out << "  ";
      }
      out << '\n';
      if (r == 0) {
        std::size_t total = 0;
        for (std::size_t w : width) total += w + 2;
        out << std::string(total - 2, '-') << '\n';
      }
    }
    for (const auto& r : rows)
      if (r.status != "ok") out << r.run_id << ": " << r.status << '\n';
    return out.str();
  }
};

inline std::string join_names(const std::vector<TargetKind>& kinds) {
  std::string s;
  for (std::size_t i = 0; i < kinds.size(); ++i) s += (i ? "+" : "") + to_string(kinds[i]);
  return s;
}

inline std::string join_names(const std::vector<MaskStrategy>& strategies) {
  std::string s;
  for (std::size_t i = 0; i < strategies.size(); ++i) s += (i ? "+" : "") + to_string(strategies[i]);
  return s;
}

/// Downstream and pre-training metrics of one trained cell.
inline std::map<std::string, double> sweep_metrics(const Workspace& ws, const PretrainResult& run) {
  std::map<std::string, double> out;
  const RunConfig& cfg = ws.config;
  for (const auto& metric : cfg.sweep.metrics) {
    if (metric == "retrieval-zero-shot") {
      for (const auto& rec : evaluate(ws, run.model, run.params, metric, "val", cfg.seed))
        out["ZS " + rec.at("metric").get<std::string>()] = rec.at("value").get<double>();
    } else if (metric == "qa-mc") {
      FinetuneConfig fc = cfg.finetune;
      fc.task = "qa-mc";
      const FinetuneResult ft = finetune(ws, run.model, run.params, fc, cfg.seed);
      for (const auto& rec : evaluate(ws, ft.model, ft.params, "qa-mc", "val", cfg.seed))
        out["QA-MC acc"] = rec.at("value").get<double>();
    } else if (metric == "pretrain") {
      for (const auto& rec : evaluate(ws, run.model, run.params, "pretrain", "train", cfg.seed))
        out[rec.at("metric").get<std::string>()] = rec.at("value").get<double>();
    }
  }
  return out;
}

/// Baseline (VTM+MLM) first, then one row per grid cell. Cells share the
/// corpus and seeds; a failing cell becomes an error row.
inline ExperimentTable sweep(const RunConfig& base, const LogSink& sink = {}) {
  validate(base);
  struct Cell {
    RunConfig config;
    std::string label;
  };
  std::vector<Cell> cells;
  {
    RunConfig b = base;
    b.objective.mvm = false;
    b.objective.vtm = b.objective.mlm = true;
    cells.push_back({b, "VTM+MLM (baseline)"});
  }
  const SweepConfig& s = base.sweep;
  const auto targets = s.targets.empty() ? std::vector<std::vector<TargetKind>>{base.objective.targets} : s.targets;
  const auto strategies =
      s.strategies.empty() ? std::vector<std::vector<MaskStrategy>>{base.objective.strategies} : s.strategies;
  const auto ratios = s.ratios.empty() ? std::vector<double>{base.objective.mask_ratio} : s.ratios;
  const auto losses = s.losses.empty() ? std::vector<LossKind>{base.objective.regression} : s.losses;
  const auto heads = s.heads.empty() ? std::vector<bool>{base.objective.mlp_head} : s.heads;
  for (const auto& t : targets)
    for (const auto& st : strategies)
      for (double r : ratios)
        for (LossKind l : losses)
          for (bool h : heads) {
            RunConfig c = base;
            c.objective.vtm = c.objective.mlm = c.objective.mvm = true;
            c.objective.targets = t;
            c.objective.strategies = st;
            c.objective.mask_ratio = r;
            c.objective.regression = l;
            c.objective.mlp_head = h;
            char ratio[16];
            std::snprintf(ratio, sizeof ratio, "%.2f", r);
            std::string label = "+MVM(" + join_names(t) + ") " + join_names(st) + " p=" + ratio;
            if (losses.size() > 1) label += " " + to_string(l);
            if (heads.size() > 1) label += h ? " mlp" : " linear";
            cells.push_back({c, label});
          }

  ExperimentTable table;
  std::set<std::string> columns;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    ExperimentRow row;
    char id[32];
    std::snprintf(id, sizeof id, "run-%03zu", i);
    row.run_id = id;
    row.label = cells[i].label;
    row.config_hash = config_hash(cells[i].config);
    if (sink) sink({{"event", "sweep_cell_start"}, {"run_id", row.run_id}, {"label", row.label}});
    try {
      const Workspace ws = make_workspace(cells[i].config);
      const PretrainResult run = pretrain(cells[i].config);
      row.metrics = sweep_metrics(ws, run);
    } catch (const std::exception& e) {
      row.status = std::string("error: ") + e.what();
      row.metrics.clear();
    }
    for (const auto& [k, _] : row.metrics) columns.insert(k);
    if (sink)
      sink({{"event", "sweep_cell_end"}, {"run_id", row.run_id}, {"status", row.status}});
    table.rows.push_back(std::move(row));
  }
  table.columns.assign(columns.begin(), columns.end());
  const auto& baseline = table.rows.front();
  for (auto& row : table.rows)
    for (const auto& [k, v] : row.metrics) {
      auto it = baseline.metrics.find(k);
      if (it != baseline.metrics.end()) row.deltas[k] = v - it->second;
    }
  return table;
}

}  // namespace violet
