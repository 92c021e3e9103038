// Runs a short experiment through the library API and prints the ledger.
#include <iostream>

#include "fedstyle/fedstyle.hpp"

int main() {
  fedstyle::ExperimentConfig cfg;
  cfg.seed = 1;
  cfg.rounds = 5;

  fedstyle::RunHooks hooks;
  hooks.on_round = [](const fedstyle::RoundView& v) {
    std::cout << fedstyle::to_json_line(v.entry) << '\n';
  };
  const auto result = fedstyle::run_experiment(cfg, hooks);

  for (const auto& r : result.final_reports) {
    std::cout << "target domain " << r.domain_id << ": mAP " << r.metrics.map << ", Rank-1 "
              << r.metrics.rank1 << '\n';
  }
  std::cout << fedstyle::metrics_csv(result.metrics);
}
