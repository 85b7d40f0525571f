// Pre-trains a tiny model for a few steps on a synthetic corpus, then reports
// zero-shot retrieval and pre-training metrics on the validation split.
#include <iostream>

#include "violet/violet.hpp"

int main() {
  const nlohmann::json config = {
      {"seed", 7},
      {"corpus", {{"size", 24}, {"canvas", 32}, {"frames", 4}}},
      {"model", {{"hidden", 16}, {"vt_layers", 1}, {"ct_layers", 1}, {"vt_heads", 2}, {"ct_heads", 2}, {"patch", 8}}},
      {"data", {{"num_frames", 2}}},
      {"pretrain", {{"targets", {"Pixel", "HOG"}}, {"strategies", {"BM", "AM"}}}},
      {"optimizer", {{"lr", 1e-3}}},
      {"training", {{"epochs", 2}, {"batch_size", 4}}},
  };
  const violet::RunConfig cfg = violet::parse_run_config(config);

  violet::PretrainOptions options;
  options.log = [](const nlohmann::json& rec) {
    if (rec.value("event", "") == "step")
      std::cout << "step " << rec["step"] << "  total " << rec["loss"]["total"] << '\n';
  };
  const violet::PretrainResult run = violet::pretrain(cfg, options);

  const violet::Workspace ws = violet::make_workspace(cfg);
  for (const char* task : {"retrieval-zero-shot", "pretrain"})
    for (const auto& rec : violet::evaluate(ws, run.model, run.params, task, "val", cfg.seed))
      std::cout << rec["task"].get<std::string>() << ' ' << rec["metric"].get<std::string>() << " = "
                << rec["value"].get<double>() << '\n';
}
