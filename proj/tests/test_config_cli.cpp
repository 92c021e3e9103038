#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "support.hpp"

using namespace fedstyle;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("fedstyle_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FEDSTYLE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* kSmall =
    "rounds = 2\n"
    "[data]\nidentities = 8\nholdout_identities = 4\nsamples_per_identity = 6\ninput_dim = 8\n"
    "[encoder]\nhidden_dim = 12\noutput_dim = 6\n"
    "[batch]\np = 4\nk = 3\n";

}  // namespace

TEST(Config, EmptyTextGivesDefaults) {
  const auto cfg = parse_config_text("");
  EXPECT_EQ(cfg.rounds, 60u);
  EXPECT_EQ(cfg.epochs_per_round, 1u);
  EXPECT_EQ(cfg.batch.p * cfg.batch.k, 64u);
  EXPECT_EQ(cfg.memory.momentum, 0.2);
  EXPECT_EQ(cfg.memory.warmup_epochs, 1u);
  EXPECT_EQ(cfg.data.num_sources, 3u);
  EXPECT_EQ(cfg.data.input_dim, 16u);
  EXPECT_EQ(cfg.data.identities, 20u);
  EXPECT_EQ(cfg.data.samples_per_identity, 10u);
  EXPECT_EQ(cfg.encoder.hidden_dim, 64u);
  EXPECT_EQ(cfg.encoder.output_dim, 32u);
  EXPECT_EQ(cfg, ExperimentConfig{});
}

TEST(Config, Overrides) {
  const auto cfg = parse_config_text("rounds=5\n[memory]\npolicy = paper_literal # note\n"
                                     "[domain.1]\nnoise_sigma = 0.1\n[optimizer]\nmilestones=3,7\n");
  EXPECT_EQ(cfg.rounds, 5u);
  EXPECT_EQ(cfg.memory.policy, RenormPolicy::paper_literal);
  EXPECT_EQ(cfg.domains.at(1).noise_sigma, 0.1);
  EXPECT_EQ(cfg.optimizer.milestones, (std::vector<std::size_t>{3, 7}));
  const auto specs = resolve_domains(cfg);
  EXPECT_EQ(specs[1].noise_sigma, 0.1);
  EXPECT_NE(specs[0].noise_sigma, 0.1);
}

TEST(Config, UnknownKeyNamed) {
  try {
    parse_config_text("foo=1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("foo"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos);
  }
  EXPECT_THROW(parse_config_text("[nope]\n"), ConfigError);
  EXPECT_THROW(parse_config_text("[batch]\nk = 1\n"), ConfigError);
  EXPECT_THROW(parse_config_text("[encoder]\nactivation = sigmoid\n"), ConfigError);
}

TEST(Config, EchoRoundTrips) {
  auto cfg = parse_config_text("seed = 99\n[transform]\nforce_degrade_rounds = 4,5\nmix_alpha=0.3333333333333333\n"
                               "[domain.2]\nscale = 1,2,3,4,5,6,7,8,9,10,11,12,13,14,15,0.25\n[ablation]\nenable_nsa = false\n");
  EXPECT_EQ(parse_config_text(to_config_text(cfg)), cfg);
  const ExperimentConfig def;
  EXPECT_EQ(parse_config_text(to_config_text(def)), def);
}

TEST(Config, AblationPresets) {
  EXPECT_EQ(ablation_preset("baseline"), (AblationFlags{false, false, false}));
  EXPECT_EQ(ablation_preset("full"), AblationFlags{});
  EXPECT_THROW(ablation_preset("half"), ConfigError);
}

TEST(Config, ResolvedDomainsSeedAndShape) {
  ExperimentConfig cfg;
  cfg.seed = 5;
  const auto specs = resolve_domains(cfg);
  ASSERT_EQ(specs.size(), 4u);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    EXPECT_EQ(specs[i].domain_id, static_cast<int>(i));
    EXPECT_EQ(specs[i].seed, 5u ^ i);
  }
  EXPECT_EQ(specs[0].num_identities, cfg.data.identities + cfg.data.holdout_identities);
  EXPECT_EQ(specs[3].num_identities, cfg.data.identities);
}

TEST(Cli, SameSeedByteIdenticalArtifacts) {
  const auto dir = scratch("det");
  std::ofstream(dir / "c.ini") << kSmall;
  ASSERT_EQ(run_cli("--config " + (dir / "c.ini").string() + " --seed 4 --quiet --out " + (dir / "a").string()), 0);
  ASSERT_EQ(run_cli("--config " + (dir / "c.ini").string() + " --seed 4 --quiet --out " + (dir / "b").string()), 0);
  for (const char* f : {"metrics.csv", "ledger.jsonl", "checkpoint.txt"}) {
    EXPECT_FALSE(slurp(dir / "a" / f).empty()) << f;
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
  EXPECT_EQ(slurp(dir / "a" / "metrics.csv").substr(0, 27), "round,plan,domain,map,rank1");
}

TEST(Cli, BaselinePresetEqualsFlagsOff) {
  const auto dir = scratch("abl");
  std::ofstream(dir / "c.ini") << kSmall;
  std::ofstream(dir / "off.ini")
      << kSmall << "[ablation]\nenable_nsa=false\nenable_pscu=false\nenable_screening=false\n";
  ASSERT_EQ(run_cli("--config " + (dir / "c.ini").string() + " --ablation baseline --quiet --out " + (dir / "a").string()), 0);
  ASSERT_EQ(run_cli("--config " + (dir / "off.ini").string() + " --quiet --out " + (dir / "b").string()), 0);
  auto a = parse_config(dir / "a" / "config.resolved.ini");
  auto b = parse_config(dir / "b" / "config.resolved.ini");
  a.output_dir = b.output_dir = "";
  EXPECT_EQ(a, b);
  EXPECT_EQ(slurp(dir / "a" / "metrics.csv"), slurp(dir / "b" / "metrics.csv"));
}

TEST(Cli, ErrorsAndExport) {
  const auto dir = scratch("err");
  std::ofstream(dir / "bad.ini") << "foo = 1\n";
  EXPECT_EQ(run_cli("--config " + (dir / "bad.ini").string()), 2);
  EXPECT_NE(run_cli("--ablation nonsense"), 0);
  std::ofstream(dir / "c.ini") << kSmall;
  ASSERT_EQ(run_cli("--config " + (dir / "c.ini").string() + " --export-data " + (dir / "x").string()), 0);
  std::ifstream csv(dir / "x" / "domain_3.csv");
  ASSERT_TRUE(csv.good());
  EXPECT_EQ(read_dataset_csv(csv).size(), 8u * 6u);
}
