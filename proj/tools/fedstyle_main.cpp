#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "fedstyle/fedstyle.hpp"

namespace {

namespace fs = std::filesystem;
using namespace fedstyle;

void write_artifacts(const fs::path& out, const ExperimentConfig& cfg, const ExperimentResult& r) {
  write_file_atomic(out / "metrics.csv", metrics_csv(r.metrics));
  write_file_atomic(out / "ledger.jsonl", ledger_jsonl(r.ledger));
  if (!r.final_encoder.layers.empty()) {
    write_file_atomic(out / "checkpoint.txt",
                      experiment_checkpoint_text(r.final_encoder, r.memories));
  }
  write_file_atomic(out / "config.resolved.ini", to_config_text(cfg));
}

void export_datasets(const fs::path& dir, const ExperimentConfig& cfg) {
  for (const auto& spec : resolve_domains(cfg)) {
    std::ostringstream os;
    write_dataset_csv(os, generate_domain(spec));
    write_file_atomic(dir / ("domain_" + std::to_string(spec.domain_id) + ".csv"), os.str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated style-screening simulator"};
  std::string config_path, out_dir, ablation, export_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> rounds;
  bool quiet = false;
  app.add_option("--config", config_path, "Experiment config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Experiment seed (overrides config)");
  app.add_option("--rounds", rounds, "Communication rounds (overrides config)");
  app.add_option("--out", out_dir, "Output directory (overrides config)");
  app.add_option("--ablation", ablation, "Preset: baseline|nsa|pscu|full")
      ->check(CLI::IsMember(ablation_presets()));
  app.add_option("--export-data", export_dir, "Write every domain as CSV into DIR and exit");
  app.add_flag("--quiet", quiet, "Only report errors");
  CLI11_PARSE(app, argc, argv);

  ExperimentConfig cfg;
  try {
    cfg = config_path.empty() ? parse_config_text("") : parse_config(config_path);
    if (seed) cfg.seed = *seed;
    if (rounds) cfg.rounds = *rounds;
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    if (!ablation.empty()) cfg.ablation = ablation_preset(ablation);
    if (const char* env = std::getenv("FEDSTYLE_THREADS")) {
      const auto cap = static_cast<std::size_t>(std::strtoull(env, nullptr, 10));
      if (cap > 0) cfg.threads = std::min(cfg.threads, cap);
    }
    cfg.validate();
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }

  if (!export_dir.empty()) {
    try {
      export_datasets(export_dir, cfg);
    } catch (const std::exception& e) {
      std::cerr << "export failed: " << e.what() << '\n';
      return 1;
    }
    return 0;
  }

  const fs::path out = cfg.output_dir;
  RunHooks hooks;
  hooks.on_warning = [](const std::string& w) { std::cerr << "warning: " << w << '\n'; };
  if (!quiet) {
    hooks.on_round = [](const RoundView& v) {
      std::cout << "round " << v.round << "  rank1(src-val) " << v.entry.rank1_after << "  "
                << (v.entry.positive ? "positive" : "negative") << "  lr " << v.entry.lr << '\n';
    };
  }
  try {
    const auto result = run_experiment(cfg, hooks);
    write_artifacts(out, cfg, result);
    if (!quiet) {
      for (const auto& r : result.final_reports) {
        std::cout << "final  domain " << r.domain_id << "  mAP " << r.metrics.map << "  rank1 "
                  << r.metrics.rank1 << '\n';
      }
    }
  } catch (const ExperimentError& e) {
    std::cerr << "error: " << e.what() << '\n';
    try {
      write_artifacts(out, cfg, e.partial());
    } catch (const std::exception& w) {
      std::cerr << "could not flush partial artifacts: " << w.what() << '\n';
    }
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
