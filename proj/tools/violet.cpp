// SPDX-License-Identifier: Apache-2.0
//
// violet: command-line driver for corpus generation, pre-training,
// fine-tuning, evaluation, gradient checks and sweeps. Every line written
// to stdout is a JSON object.
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "violet/violet.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

void emit(const json& record) { std::cout << record.dump() << '\n' << std::flush; }

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string resume;
  std::string checkpoint;
  std::string task;
  std::string split = "val";
};

violet::RunConfig run_config(const Options& o, const json* fallback = nullptr) {
  json j = json::object();
  if (!o.config.empty()) {
    if (!fs::is_regular_file(o.config))
      throw violet::Error(violet::ErrorCode::kInvalidConfig, "config file not found: " + o.config);
    try {
      j = json::parse(violet::detail::read_text_file(o.config));
    } catch (const json::exception& e) {
      throw violet::Error(violet::ErrorCode::kSchema, "config is not valid JSON: " + std::string(e.what()));
    }
  } else if (fallback) {
    j = *fallback;
  }
  if (o.seed) {
    require(j.is_object(), violet::ErrorCode::kSchema, "config must be an object");
    j["seed"] = *o.seed;
  }
  return violet::parse_run_config(j);
}

fs::path require_out(const Options& o) {
  if (o.out.empty()) throw violet::Error(violet::ErrorCode::kInvalidConfig, "--out is required");
  return o.out;
}

int gen_corpus(const Options& o) {
  const violet::RunConfig cfg = run_config(o);
  const fs::path out = require_out(o);
  const violet::Corpus corpus = violet::build_corpus(cfg.corpus);
  violet::save_corpus(corpus, out);
  emit({{"event", "corpus_written"},
        {"dir", out.string()},
        {"clips", corpus.size()},
        {"train", corpus.split(true).size()},
        {"val", corpus.split(false).size()}});
  return 0;
}

int pretrain(const Options& o) {
  const violet::RunConfig cfg = run_config(o);
  violet::PretrainOptions po;
  po.out = require_out(o);
  po.resume = o.resume;
  po.log = emit;
  const violet::PretrainResult r = violet::pretrain(cfg, po);
  emit({{"event", "checkpoint_written"}, {"dir", (po.out / "checkpoint").string()}, {"steps", r.steps}});
  return 0;
}

violet::Checkpoint input_checkpoint(const Options& o) {
  const std::string dir = o.checkpoint.empty() ? o.resume : o.checkpoint;
  if (dir.empty()) throw violet::Error(violet::ErrorCode::kInvalidConfig, "--checkpoint is required");
  return violet::load_checkpoint(dir);
}

int finetune(const Options& o) {
  const violet::Checkpoint ck = input_checkpoint(o);
  const json* stored = ck.meta.contains("run_config") ? &ck.meta["run_config"] : nullptr;
  violet::RunConfig cfg = run_config(o, stored);
  if (!o.task.empty()) cfg.finetune.task = o.task;
  violet::validate(cfg);
  const fs::path out = require_out(o);
  const violet::Workspace ws = violet::make_workspace(cfg);
  violet::check_compatible(ck.config, ws.model);
  const violet::FinetuneResult r = violet::finetune(ws, ck.config, ck.params, cfg.finetune, cfg.seed, emit);
  json meta = {{"kind", "finetune"},
               {"task", cfg.finetune.task},
               {"config_hash", violet::config_hash(cfg)},
               {"run_config", violet::to_json(cfg)},
               {"step", r.losses.size()}};
  violet::save_checkpoint(out / "checkpoint", r.model, r.params, meta);
  emit({{"event", "checkpoint_written"}, {"dir", (out / "checkpoint").string()}, {"task", cfg.finetune.task}});
  return 0;
}

int evaluate(const Options& o) {
  const violet::Checkpoint ck = input_checkpoint(o);
  const json* stored = ck.meta.contains("run_config") ? &ck.meta["run_config"] : nullptr;
  const violet::RunConfig cfg = run_config(o, stored);
  const violet::Workspace ws = violet::make_workspace(cfg);
  violet::check_compatible(ck.config, ws.model);
  std::string task = o.task;
  if (task.empty()) task = ck.meta.value("task", std::string("retrieval-zero-shot"));
  const std::string id = violet::detail::hex64(violet::detail::fnv1a(
      violet::detail::read_text_file((fs::path(o.checkpoint.empty() ? o.resume : o.checkpoint) / "manifest.json").string())));
  const json records = violet::evaluate(ws, ck.config, ck.params, task, o.split, cfg.seed, id);
  for (const auto& rec : records) emit(rec);
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    violet::detail::write_text_file((fs::path(o.out) / "metrics.json").string(), records.dump(1));
  }
  return 0;
}

int sweep(const Options& o) {
  const violet::RunConfig cfg = run_config(o);
  const violet::ExperimentTable table = violet::sweep(cfg, emit);
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    violet::detail::write_text_file((fs::path(o.out) / "table.txt").string(), table.to_text());
    violet::detail::write_text_file((fs::path(o.out) / "table.json").string(), table.to_json().dump(1));
  }
  std::cerr << table.to_text();
  emit({{"event", "sweep_table"}, {"table", table.to_json()}});
  return 0;
}

int gradcheck(const Options& o) {
  violet::GradCheckConfig gc;
  if (o.seed) gc.seed = *o.seed;
  const violet::GradCheckReport report = violet::grad_check(gc);
  for (const auto& name : report.losses())
    emit({{"event", "gradcheck"}, {"loss", name}, {"max_rel_error", report.max_error(name)}});
  const bool ok = report.max_error() < 1e-4;
  emit({{"event", "gradcheck_summary"}, {"max_rel_error", report.max_error()}, {"pass", ok}});
  return ok ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VIOLET video-language pre-training on synthetic data"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run configuration");
    sub->add_option("--seed", o.seed, "override the config seed");
    sub->add_option("--out", o.out, "output directory");
  };
  auto* gen = app.add_subcommand("gen-corpus", "render and save a synthetic corpus");
  add_common(gen);
  auto* pre = app.add_subcommand("pretrain", "pre-train with VTM, MLM and MVM");
  add_common(pre);
  pre->add_option("--resume", o.resume, "checkpoint directory to resume from");
  auto* fin = app.add_subcommand("finetune", "fine-tune a checkpoint on a downstream task");
  add_common(fin);
  fin->add_option("--checkpoint,--resume", o.checkpoint, "checkpoint directory")->required();
  fin->add_option("--task", o.task, "retrieval | qa-mc | qa-oe | qa-fib | captioning");
  auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint,--resume", o.checkpoint, "checkpoint directory")->required();
  eval->add_option("--task", o.task, "retrieval | retrieval-zero-shot | qa-mc | qa-oe | qa-fib | captioning | pretrain");
  eval->add_option("--split", o.split, "train | val");
  auto* swp = app.add_subcommand("sweep", "run a grid of pre-training variants and tabulate");
  add_common(swp);
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every loss");
  add_common(grad);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*gen) return gen_corpus(o);
    if (*pre) return pretrain(o);
    if (*fin) return finetune(o);
    if (*eval) return evaluate(o);
    if (*swp) return sweep(o);
    if (*grad) return gradcheck(o);
  } catch (const violet::Error& e) {
    const bool config_error =
        e.code() == violet::ErrorCode::kSchema || e.code() == violet::ErrorCode::kInvalidConfig;
    emit({{"event", "error"}, {"code", std::string(violet::to_string(e.code()))}, {"message", e.what()}});
    return config_error ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    emit({{"event", "error"}, {"code", "runtime"}, {"message", e.what()}});
    return kExitRuntime;
  }
  return kExitRuntime;
}
