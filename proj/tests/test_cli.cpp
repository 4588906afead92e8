#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "support.hpp"

using namespace smmh;
namespace fs = std::filesystem;

namespace {

fs::path workdir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "smmh_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + SMMH_CLI_PATH + " " + args + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::vector<std::string> lines(const fs::path& p) {
  std::istringstream in(read_text(p));
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

json manifest_without_time(const fs::path& dir) {
  auto j = json::parse(read_text(dir / "manifest.json"));
  j.erase("wall_time_seconds");
  return j;
}

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

fs::path reference_model_file(const fs::path& dir) {
  save_model(dir / "model.json", reference_model());
  return dir / "model.json";
}

}  // namespace

TEST(Cli, SampleZeroEpisodes) {
  const auto dir = workdir("zero");
  ASSERT_EQ(run("sample --model " + q(reference_model_file(dir)) + " -n 0 --seed 1 --out " + q(dir / "out")), 0);
  EXPECT_EQ(read_text(dir / "out" / "episodes.jsonl"), "");
  const auto m = json::parse(read_text(dir / "out" / "manifest.json"));
  EXPECT_EQ(m.at("command"), "sample");
  EXPECT_EQ(m.at("seed"), 1);
  EXPECT_TRUE(m.contains("code_version"));
  EXPECT_TRUE(m.contains("wall_time_seconds"));
}

TEST(Cli, SampleIsByteReproducibleAndRoundTrips) {
  const auto dir = workdir("repro");
  const auto model = reference_model_file(dir);
  for (const char* out : {"a", "b"})
    ASSERT_EQ(run("sample --model " + q(model) + " -n 50 --seed 42 --out " + q(dir / out)), 0);
  EXPECT_EQ(read_text(dir / "a" / "episodes.jsonl"), read_text(dir / "b" / "episodes.jsonl"));
  EXPECT_EQ(read_text(dir / "a" / "truth.jsonl"), read_text(dir / "b" / "truth.jsonl"));
  auto ma = manifest_without_time(dir / "a"), mb = manifest_without_time(dir / "b");
  ma.erase("inputs");
  mb.erase("inputs");
  EXPECT_EQ(ma, mb);

  const auto eps = load_episodes(dir / "a" / "episodes.jsonl");
  ASSERT_EQ(eps.size(), 50u);
  EXPECT_EQ(episodes_to_jsonl(eps), read_text(dir / "a" / "episodes.jsonl"));
  const auto lib = sample_dataset(reference_model(), 50, 42);
  for (std::size_t k = 0; k < eps.size(); ++k) EXPECT_EQ(eps[k], lib[k].episode);
  EXPECT_EQ(load_paths(dir / "a" / "truth.jsonl").size(), 50u);
}

TEST(Cli, InvalidModelExitsTwo) {
  const auto dir = workdir("invalid");
  auto p = reference_model();
  p.transition(1, 1) = 0.1;
  p.transition(1, 0) = 0.5;
  save_model(dir / "bad.json", p);
  EXPECT_EQ(run("sample --model " + q(dir / "bad.json") + " -n 3 --out " + q(dir / "out")), 2);
  write_atomic(dir / "garbage.json", "{\"n_states\": ");
  EXPECT_EQ(run("sample --model " + q(dir / "garbage.json") + " -n 3 --out " + q(dir / "out")), 2);
}

TEST(Cli, SingleLabelFitExitsThree) {
  const auto dir = workdir("single");
  std::vector<Episode> eps;
  for (const auto& d : sample_dataset(reference_model(), 40, 3))
    if (d.episode.label == 0) eps.push_back(d.episode);
  save_episodes(dir / "eps.jsonl", eps);
  EXPECT_EQ(run("fit --episodes " + q(dir / "eps.jsonl") + " --out " + q(dir / "out")), 3);
}

TEST(Cli, ChannelMismatchExitsFour) {
  const auto dir = workdir("mismatch");
  const auto model = reference_model_file(dir);
  save_episodes(dir / "eps.jsonl", {smmh::testing::episode({1.0, 2.0}, 1, 3.0)});
  EXPECT_EQ(run("score --model " + q(model) + " --episodes " + q(dir / "eps.jsonl") + " --out " + q(dir / "out")), 4);
}

TEST(Cli, ScoreMatchesLibraryBitForBit) {
  const auto dir = workdir("score");
  const auto model = reference_model_file(dir);
  const auto eps = smmh::testing::episodes_of(sample_dataset(reference_model(), 12, 8));
  save_episodes(dir / "eps.jsonl", eps);
  ASSERT_EQ(run("score --model " + q(model) + " --episodes " + q(dir / "eps.jsonl") + " --out " + q(dir / "out")), 0);
  const auto rows = lines(dir / "out" / "traces.csv");
  ASSERT_FALSE(rows.empty());
  EXPECT_EQ(rows[0], "id,t,risk,p1,p2,p3,p4");
  std::size_t r = 1;
  for (const auto& ep : eps) {
    const auto tr = score_episode(ep, reference_model());
    for (std::size_t k = 0; k < tr.times.size(); ++k, ++r) {
      ASSERT_LT(r, rows.size());
      std::string want = ep.id + "," + fmt17(tr.times[k]) + "," + fmt17(tr.scores[k]);
      for (Eigen::Index i = 0; i < 4; ++i) want += "," + fmt17(tr.posteriors[k](i));
      EXPECT_EQ(rows[r], want);
    }
  }
  EXPECT_EQ(r, rows.size());

  // Thread count does not change a byte.
  ASSERT_EQ(run("score --model " + q(model) + " --episodes " + q(dir / "eps.jsonl") + " --out " + q(dir / "t1"),
                "SMMH_THREADS=1"),
            0);
  ASSERT_EQ(run("score --model " + q(model) + " --episodes " + q(dir / "eps.jsonl") + " --out " + q(dir / "t4"),
                "SMMH_THREADS=4"),
            0);
  EXPECT_EQ(read_text(dir / "t1" / "traces.csv"), read_text(dir / "t4" / "traces.csv"));
  EXPECT_EQ(read_text(dir / "t1" / "traces.csv"), read_text(dir / "out" / "traces.csv"));
}

TEST(Cli, EvalPerfectScorerAndRateRows) {
  const auto dir = workdir("eval");
  const auto eps = smmh::testing::episodes_of(sample_dataset(reference_model(), 40, 9));
  save_episodes(dir / "eps.jsonl", eps);
  std::string csv = "id,t,risk\n";
  for (const auto& ep : eps) csv += ep.id + ",1," + (ep.label == 1 ? "0.9" : "0.1") + "\n";
  write_atomic(dir / "traces.csv", csv);
  ASSERT_EQ(run("eval --traces " + q(dir / "traces.csv") + " --episodes " + q(dir / "eps.jsonl") +
                " --horizon 10 --bin 2 --out " + q(dir / "out")),
            0);
  const auto m = json::parse(read_text(dir / "out" / "metrics.json"));
  EXPECT_EQ(m.at("pr_auc").get<double>(), 1.0);
  EXPECT_EQ(m.at("roc_auc").get<double>(), 1.0);
  EXPECT_EQ(m.at("n_episodes").get<int>(), 40);
  EXPECT_EQ(lines(dir / "out" / "sampling_rate.csv").size(), 1u + 2u * 5u);
}

TEST(Cli, EvalAgreesWithPairCounting) {
  const auto dir = workdir("eval_tiny");
  std::vector<Episode> eps;
  const std::vector<double> scores{0.3, 0.8, 0.8, 0.1, 0.5, 0.6};
  const std::vector<int> labels{0, 1, 0, 0, 1, 1};
  std::string csv = "id,t,risk\n";
  for (std::size_t k = 0; k < scores.size(); ++k) {
    auto ep = smmh::testing::episode({1.0, 2.0}, 1, 5.0, labels[k]);
    ep.id = "e" + std::to_string(k);
    eps.push_back(ep);
    csv += ep.id + ",1,0\n" + ep.id + ",2," + fmt17(scores[k]) + "\n";
  }
  save_episodes(dir / "eps.jsonl", eps);
  write_atomic(dir / "traces.csv", csv);
  ASSERT_EQ(run("eval --traces " + q(dir / "traces.csv") + " --episodes " + q(dir / "eps.jsonl") + " --out " +
                q(dir / "out")),
            0);
  double wins = 0.0, pairs = 0.0;
  for (std::size_t a = 0; a < scores.size(); ++a)
    for (std::size_t b = 0; b < scores.size(); ++b)
      if (labels[a] == 1 && labels[b] == 0) {
        pairs += 1.0;
        wins += scores[a] > scores[b] ? 1.0 : (scores[a] == scores[b] ? 0.5 : 0.0);
      }
  const auto m = json::parse(read_text(dir / "out" / "metrics.json"));
  EXPECT_NEAR(m.at("roc_auc").get<double>(), wins / pairs, 1e-15);
}

TEST(Cli, EvalSingleClassExitsThree) {
  const auto dir = workdir("eval_single");
  auto ep = smmh::testing::episode({1.0}, 1, 2.0, 1);
  ep.id = "only";
  save_episodes(dir / "eps.jsonl", {ep});
  write_atomic(dir / "traces.csv", "id,t,risk\nonly,1,0.5\n");
  EXPECT_EQ(run("eval --traces " + q(dir / "traces.csv") + " --episodes " + q(dir / "eps.jsonl") + " --out " +
                q(dir / "out")),
            3);
}

TEST(Cli, TomlConfigWithFlagOverride) {
  const auto dir = workdir("toml");
  const auto model = reference_model_file(dir);
  std::ofstream(dir / "sample.toml") << "[sample]\nmodel = " << q(model) << "\nn-episodes = 3\nseed = 11\nout = "
                                     << q(dir / "cfg") << "\n";
  ASSERT_EQ(run("sample --config " + q(dir / "sample.toml")), 0);
  EXPECT_EQ(lines(dir / "cfg" / "episodes.jsonl").size(), 3u);
  EXPECT_EQ(json::parse(read_text(dir / "cfg" / "manifest.json")).at("seed"), 11);

  ASSERT_EQ(run("sample --config " + q(dir / "sample.toml") + " -n 2 --out " + q(dir / "flag")), 0);
  EXPECT_EQ(lines(dir / "flag" / "episodes.jsonl").size(), 2u);
  EXPECT_EQ(json::parse(read_text(dir / "flag" / "manifest.json")).at("seed"), 11);
}

TEST(Cli, FitWritesValidModelDeterministically) {
  const auto dir = workdir("fit");
  save_episodes(dir / "eps.jsonl", smmh::testing::episodes_of(sample_dataset(reference_model(), 80, 10)));
  for (const char* out : {"a", "b"})
    ASSERT_EQ(run("fit --episodes " + q(dir / "eps.jsonl") + " --em-iters 5 --seed 3 --out " + q(dir / out)), 0);
  EXPECT_EQ(read_text(dir / "a" / "model.json"), read_text(dir / "b" / "model.json"));
  EXPECT_EQ(read_text(dir / "a" / "loglik.csv"), read_text(dir / "b" / "loglik.csv"));
  EXPECT_EQ(read_text(dir / "a" / "fit_report.json"), read_text(dir / "b" / "fit_report.json"));
  EXPECT_TRUE(validate(load_model(dir / "a" / "model.json")).empty());

  const auto rows = lines(dir / "a" / "loglik.csv");
  ASSERT_GE(rows.size(), 2u);
  EXPECT_EQ(rows[0], "iteration,loglik");
  double prev = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const double v = std::stod(rows[k].substr(rows[k].find(',') + 1));
    EXPECT_GE(v, prev - 1e-6 * std::abs(prev));
    prev = v;
  }
}

TEST(Cli, FitStateGridWritesBicTable) {
  const auto dir = workdir("bic");
  save_episodes(dir / "eps.jsonl", smmh::testing::episodes_of(sample_dataset(reference_model(), 60, 12)));
  ASSERT_EQ(run("fit --episodes " + q(dir / "eps.jsonl") + " --em-iters 3 --state-grid 3,4 --out " + q(dir / "out")),
            0);
  const auto rows = lines(dir / "out" / "bic.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1].substr(0, 2), "3,");
  EXPECT_EQ(rows[2].substr(0, 2), "4,");
}

TEST(Cli, ReferenceModelCommandWritesTheBuiltInModel) {
  const auto dir = workdir("reference");
  ASSERT_EQ(run("reference-model --out " + q(dir / "model.json")), 0);
  EXPECT_EQ(load_model(dir / "model.json"), reference_model());
  EXPECT_TRUE(validate(load_model(dir / "model.json")).empty());
}
