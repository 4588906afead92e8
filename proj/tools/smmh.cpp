// smmh: sample / fit / score / eval driver.
//
// Exit codes: 0 ok, 2 invalid model, 3 degenerate dataset, 4 shape mismatch,
// 5 numerical failure, 1 anything else. Worker threads: SMMH_THREADS.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "smmh/smmh.hpp"

namespace fs = std::filesystem;
using smmh::json;

#ifndef SMMH_VERSION
#define SMMH_VERSION "unknown"
#endif

namespace {

enum Exit { kOk = 0, kOther = 1, kInvalidModel = 2, kDegenerate = 3, kShape = 4, kNumerical = 5 };

struct ExitError : std::runtime_error {
  ExitError(int code, const std::string& what) : std::runtime_error(what), code(code) {}
  int code;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

smmh::ModelParams load_valid_model(const fs::path& path) {
  smmh::ModelParams p;
  try {
    p = smmh::load_model(path);
  } catch (const smmh::Error& e) {
    throw ExitError(kInvalidModel, e.what());
  }
  const auto violations = smmh::validate(p);
  if (!violations.empty()) {
    std::string msg = path.string() + " is not a valid model:";
    for (const auto& v : violations) msg += "\n  [" + v.kind + "] " + v.detail;
    throw ExitError(kInvalidModel, msg);
  }
  return p;
}

std::vector<smmh::Episode> load_episodes_checked(const fs::path& path, std::optional<int> channels) {
  std::vector<smmh::Episode> eps;
  try {
    eps = smmh::load_episodes(path);
  } catch (const smmh::Error& e) {
    throw ExitError(kShape, e.what());
  }
  if (!channels) {
    for (const auto& ep : eps)
      if (!ep.events.empty()) {
        channels = static_cast<int>(ep.events.front().y.size());
        break;
      }
  }
  if (channels) {
    for (const auto& ep : eps) {
      const auto v = smmh::validate_episode(ep, *channels);
      if (v.empty()) continue;
      std::string msg = path.string() + ": invalid episode";
      for (const auto& x : v) msg += "\n  [" + x.kind + "] " + x.detail;
      throw ExitError(v.front().kind == "channels" ? kShape : kDegenerate, msg);
    }
  }
  return eps;
}

struct Manifest {
  std::string command;
  json config = json::object();
  std::uint64_t seed = 0;
  json inputs = json::object();
  json outputs = json::array();
};

// wall_time_seconds is the only field that varies between identical runs.
void write_manifest(const fs::path& dir, const Manifest& m, double seconds) {
  json j;
  j["command"] = m.command;
  j["config"] = m.config;
  j["seed"] = m.seed;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["code_version"] = SMMH_VERSION;
  j["wall_time_seconds"] = seconds;
  smmh::write_atomic(dir / "manifest.json", j.dump(2) + "\n");
}

template <class Fn>
int run_command(const std::string& name, const fs::path& out_dir, Manifest& manifest, Fn&& body) {
  const auto start = std::chrono::steady_clock::now();
  try {
    fs::create_directories(out_dir);
    body();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_manifest(out_dir, manifest, secs);
    return kOk;
  } catch (const ExitError& e) {
    std::cerr << "smmh " << name << ": " << e.what() << "\n";
    return e.code;
  } catch (const smmh::DegenerateDatasetError& e) {
    std::cerr << "smmh " << name << ": " << e.what() << "\n";
    return kDegenerate;
  } catch (const smmh::ShapeMismatchError& e) {
    std::cerr << "smmh " << name << ": " << e.what() << "\n";
    return kShape;
  } catch (const smmh::ParameterError& e) {
    std::cerr << "smmh " << name << ": " << e.what() << "\n";
    return kInvalidModel;
  } catch (const smmh::NumericalError& e) {
    std::cerr << "smmh " << name << ": " << e.what() << "\n";
    return kNumerical;
  } catch (const smmh::ConsistencyError& e) {
    std::cerr << "smmh " << name << ": " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "smmh " << name << ": " << e.what() << "\n";
    return kOther;
  }
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');)
    if (!tok.empty()) out.push_back(std::stoi(tok));
  return out;
}

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');)
    if (!tok.empty()) out.push_back(std::stod(tok));
  return out;
}

// ---------------------------------------------------------------------------

struct SampleOpts {
  std::string model, out;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  int max_jumps = 200;
  int max_events = 10000;
  bool truth = true;
};

int cmd_sample(const SampleOpts& o) {
  Manifest m;
  m.command = "sample";
  m.seed = o.seed;
  m.config = {{"n", o.n}, {"max_jumps", o.max_jumps}, {"max_events_per_segment", o.max_events}, {"truth", o.truth}};
  m.inputs = {{"model", o.model}};
  return run_command("sample", o.out, m, [&] {
    const auto params = load_valid_model(o.model);
    smmh::SampleConfig cfg;
    cfg.max_jumps = o.max_jumps;
    cfg.max_events_per_segment = o.max_events;
    const auto draws = smmh::sample_dataset(params, o.n, o.seed, cfg);
    std::string episodes, truth;
    for (const auto& d : draws) {
      episodes += smmh::episode_to_json(d.episode).dump() + "\n";
      truth += smmh::path_to_json(d.episode.id, d.path).dump() + "\n";
    }
    smmh::write_atomic(fs::path(o.out) / "episodes.jsonl", episodes);
    m.outputs.push_back("episodes.jsonl");
    if (o.truth) {
      smmh::write_atomic(fs::path(o.out) / "truth.jsonl", truth);
      m.outputs.push_back("truth.jsonl");
    }
  });
}

struct FitOpts {
  std::string episodes, out, state_grid;
  std::uint64_t seed = 0;
  int n_states = 4;
  int em_iters = 100;
  double loglik_tol = 1e-6;
  int permutations = 199;
  double significance = 0.05;
  int min_segment = 4;
  double moment_index = 1.0;
};

int cmd_fit(const FitOpts& o) {
  Manifest m;
  m.command = "fit";
  m.seed = o.seed;
  m.config = {{"n_states", o.n_states},       {"em_iters", o.em_iters},         {"loglik_tol", o.loglik_tol},
              {"permutations", o.permutations}, {"significance", o.significance}, {"min_segment", o.min_segment},
              {"moment_index", o.moment_index}, {"state_grid", o.state_grid}};
  m.inputs = {{"episodes", o.episodes}};
  return run_command("fit", o.out, m, [&] {
    const auto eps = load_episodes_checked(o.episodes, std::nullopt);
    smmh::TrainConfig cfg;
    cfg.n_states = o.n_states;
    cfg.em_iters = o.em_iters;
    cfg.loglik_tol = o.loglik_tol;
    cfg.seed = o.seed;
    cfg.changepoint.permutations = o.permutations;
    cfg.changepoint.significance = o.significance;
    cfg.changepoint.min_segment = o.min_segment;
    cfg.changepoint.moment_index = o.moment_index;
    cfg.changepoint.seed = o.seed;

    const fs::path dir(o.out);
    smmh::FitResult result;
    if (!o.state_grid.empty()) {
      auto sel = smmh::select_by_bic(eps, cfg, parse_int_list(o.state_grid));
      std::string csv = "n_states,loglik,n_params,n_obs,bic\n";
      for (const auto& r : sel.rows)
        csv += std::to_string(r.n_states) + "," + fmt(r.loglik) + "," + std::to_string(r.n_params) + "," +
               std::to_string(r.n_obs) + "," + fmt(r.bic) + "\n";
      smmh::write_atomic(dir / "bic.csv", csv);
      m.outputs.push_back("bic.csv");
      result = std::move(sel.fits[sel.best]);
    } else {
      result = smmh::fit(eps, cfg);
    }
    smmh::save_model(dir / "model.json", result.params);
    std::string csv = "iteration,loglik\n";
    for (std::size_t k = 0; k < result.loglik_trace.size(); ++k)
      csv += std::to_string(k + 1) + "," + fmt(result.loglik_trace[k]) + "\n";
    smmh::write_atomic(dir / "loglik.csv", csv);
    json report;
    report["n_states"] = result.params.n_states;
    report["loglik"] = result.loglik;
    report["n_obs"] = result.n_obs;
    report["warnings"] = result.warnings;
    json skipped = json::array();
    for (const auto& s : result.skipped) skipped.push_back({{"id", s.id}, {"reason", s.reason}});
    report["skipped"] = skipped;
    smmh::write_atomic(dir / "fit_report.json", report.dump(2) + "\n");
    m.outputs.push_back("model.json");
    m.outputs.push_back("loglik.csv");
    m.outputs.push_back("fit_report.json");
  });
}

struct ScoreOpts {
  std::string model, episodes, out, grid;
  std::uint64_t seed = 0;
  int max_lookback = 50;
  bool include_hawkes = false;
};

int cmd_score(const ScoreOpts& o) {
  Manifest m;
  m.command = "score";
  m.seed = o.seed;
  m.config = {{"max_lookback", o.max_lookback}, {"include_hawkes", o.include_hawkes}, {"time_grid", o.grid}};
  m.inputs = {{"model", o.model}, {"episodes", o.episodes}};
  return run_command("score", o.out, m, [&] {
    const auto params = load_valid_model(o.model);
    const auto eps = load_episodes_checked(o.episodes, params.channels());
    smmh::FilterConfig cfg;
    cfg.max_lookback = o.max_lookback;
    cfg.include_hawkes = o.include_hawkes;
    if (!o.grid.empty()) cfg.time_grid = parse_double_list(o.grid);
    std::vector<smmh::Episode> nonempty;
    for (const auto& ep : eps)
      if (!ep.events.empty()) nonempty.push_back(ep);
    const auto traces = smmh::score_dataset(nonempty, params, cfg);

    std::string csv = "id,t,risk";
    for (int i = 1; i <= params.n_states; ++i) csv += ",p" + std::to_string(i);
    csv += "\n";
    for (std::size_t d = 0; d < traces.size(); ++d) {
      const auto& tr = traces[d];
      for (std::size_t k = 0; k < tr.times.size(); ++k) {
        csv += nonempty[d].id + "," + fmt(tr.times[k]) + "," + fmt(tr.scores[k]);
        for (Eigen::Index i = 0; i < tr.posteriors[k].size(); ++i) csv += "," + fmt(tr.posteriors[k](i));
        csv += "\n";
      }
    }
    smmh::write_atomic(fs::path(o.out) / "traces.csv", csv);
    m.outputs.push_back("traces.csv");
  });
}

std::map<std::string, smmh::RiskTrace> read_traces(const fs::path& path) {
  std::istringstream in(smmh::read_text(path));
  std::map<std::string, smmh::RiskTrace> out;
  std::string line;
  std::getline(in, line);  // header
  for (std::size_t no = 2; std::getline(in, line); ++no) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, t, r;
    if (!std::getline(ss, id, ',') || !std::getline(ss, t, ',') || !std::getline(ss, r, ','))
      throw ExitError(kShape, path.string() + ":" + std::to_string(no) + ": malformed row");
    auto& tr = out[id];
    tr.times.push_back(std::stod(t));
    tr.scores.push_back(std::stod(r));
  }
  return out;
}

struct EvalOpts {
  std::string traces, episodes, out, thresholds = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";
  std::string aggregation = "max";
  std::uint64_t seed = 0;
  double at_horizon = 24.0;
  double horizon = 35.0;
  double bin = 1.0;
  double test_window = 24.0;
};

int cmd_eval(const EvalOpts& o) {
  Manifest m;
  m.command = "eval";
  m.seed = o.seed;
  m.config = {{"aggregation", o.aggregation}, {"at_horizon", o.at_horizon}, {"thresholds", o.thresholds},
              {"horizon", o.horizon},         {"bin", o.bin},               {"test_window", o.test_window}};
  m.inputs = {{"traces", o.traces}, {"episodes", o.episodes}};
  return run_command("eval", o.out, m, [&] {
    const auto eps = load_episodes_checked(o.episodes, std::nullopt);
    const auto traces = read_traces(o.traces);
    smmh::Aggregation how = smmh::Aggregation::Max;
    if (o.aggregation == "final") {
      how = smmh::Aggregation::Final;
    } else if (o.aggregation == "horizon") {
      how = smmh::Aggregation::AtHorizon;
    } else if (o.aggregation != "max") {
      throw ExitError(kOther, "unknown aggregation '" + o.aggregation + "' (max, final, horizon)");
    }

    std::vector<smmh::ScoredEpisode> scored;
    std::vector<const smmh::Episode*> matched;
    for (const auto& ep : eps) {
      const auto it = traces.find(ep.id);
      if (it == traces.end()) continue;
      scored.push_back({smmh::aggregate(it->second, how, o.at_horizon), ep.label});
      matched.push_back(&ep);
    }
    json metrics;
    metrics["n_episodes"] = scored.size();
    long positives = 0;
    for (const auto& s : scored) positives += s.label;
    metrics["positives"] = positives;
    metrics["aggregation"] = o.aggregation;
    metrics["pr_auc"] = smmh::pr_auc(scored);
    metrics["roc_auc"] = smmh::roc_auc(scored);

    json lead = json::array();
    for (double thr : parse_double_list(o.thresholds)) {
      std::vector<double> leads;
      long alarmed = 0, true_alarms = 0;
      for (std::size_t k = 0; k < matched.size(); ++k) {
        const auto lt = smmh::alarm_lead_time(traces.at(matched[k]->id), thr, matched[k]->censor_time);
        if (!lt) continue;
        ++alarmed;
        if (matched[k]->label == 1) {
          ++true_alarms;
          leads.push_back(*lt);
        }
      }
      json row;
      row["threshold"] = thr;
      row["alarmed"] = alarmed;
      row["sensitivity"] = positives > 0 ? static_cast<double>(true_alarms) / static_cast<double>(positives) : 0.0;
      row["precision"] = alarmed > 0 ? json(static_cast<double>(true_alarms) / static_cast<double>(alarmed)) : json();
      std::sort(leads.begin(), leads.end());
      row["median_lead_time"] = leads.empty() ? json() : json(leads.size() % 2 == 1
                                                                  ? leads[leads.size() / 2]
                                                                  : 0.5 * (leads[leads.size() / 2 - 1] + leads[leads.size() / 2]));
      row["lead_times"] = leads;
      lead.push_back(row);
    }
    metrics["lead_time"] = lead;

    const auto rates = smmh::empirical_sampling_rate(eps, o.horizon, o.bin, o.test_window);
    if (rates.final_window_test) {
      metrics["sampling_rate_test"] = {{"window_hours", o.test_window},
                                       {"t", rates.final_window_test->t},
                                       {"df", rates.final_window_test->df},
                                       {"p_value", rates.final_window_test->p_value}};
    }
    std::string csv = "group,hours_before_censor_start,hours_before_censor_end,rate,ci_low,ci_high,episodes,events\n";
    for (int g = 0; g < 2; ++g)
      for (const auto& b : rates.group[g])
        csv += std::to_string(g) + "," + fmt(b.start) + "," + fmt(b.start + b.width) + "," + fmt(b.rate) + "," +
               fmt(b.ci_low) + "," + fmt(b.ci_high) + "," + std::to_string(b.episodes) + "," +
               std::to_string(b.events) + "\n";
    const fs::path dir(o.out);
    smmh::write_atomic(dir / "metrics.json", metrics.dump(2) + "\n");
    smmh::write_atomic(dir / "sampling_rate.csv", csv);
    m.outputs = {"metrics.json", "sampling_rate.csv"};
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-Markov modulated marked Hawkes process: sample, fit, score, eval"};
  app.set_version_flag("--version", std::string(SMMH_VERSION));
  app.require_subcommand(1);
  // One TOML file can configure every subcommand through [sample], [fit],
  // [score] and [eval] tables; command-line flags take precedence.
  app.set_config("--config", "", "TOML file with option values (flags override)");

  SampleOpts so;
  auto* sample = app.add_subcommand("sample", "Draw synthetic episodes from a model");
  sample->fallthrough();
  sample->add_option("--model", so.model, "Model JSON")->required();
  sample->add_option("-n,--n-episodes", so.n, "Number of episodes")->required();
  sample->add_option("--seed", so.seed, "Random seed");
  sample->add_option("--out", so.out, "Output directory")->required();
  sample->add_option("--max-jumps", so.max_jumps, "Cap on latent jumps per episode");
  sample->add_option("--max-events", so.max_events, "Cap on events per segment");
  sample->add_flag("!--no-truth", so.truth, "Do not write the truth.jsonl sidecar");

  FitOpts fo;
  auto* fit = app.add_subcommand("fit", "Learn a model from episodes");
  fit->fallthrough();
  fit->add_option("--episodes", fo.episodes, "Episodes JSONL")->required();
  fit->add_option("--seed", fo.seed, "Random seed");
  fit->add_option("--out", fo.out, "Output directory")->required();
  fit->add_option("--states", fo.n_states, "Number of states N (>= 3)");
  fit->add_option("--state-grid", fo.state_grid, "Comma-separated N values; select by BIC");
  fit->add_option("--em-iters", fo.em_iters, "Maximum EM iterations");
  fit->add_option("--loglik-tol", fo.loglik_tol, "Relative EM stopping tolerance");
  fit->add_option("--permutations", fo.permutations, "Change-point permutation count");
  fit->add_option("--significance", fo.significance, "Change-point significance level");
  fit->add_option("--min-segment", fo.min_segment, "Minimum change-point segment length");
  fit->add_option("--moment-index", fo.moment_index, "Energy-statistic moment index in (0, 2)");

  ScoreOpts sco;
  auto* score = app.add_subcommand("score", "Real-time risk traces for episodes");
  score->fallthrough();
  score->add_option("--model", sco.model, "Model JSON")->required();
  score->add_option("--episodes", sco.episodes, "Episodes JSONL")->required();
  score->add_option("--seed", sco.seed, "Random seed (recorded only; scoring is deterministic)");
  score->add_option("--out", sco.out, "Output directory")->required();
  score->add_option("--max-lookback", sco.max_lookback, "Longest hypothesized segment, in events");
  score->add_option("--time-grid", sco.grid, "Comma-separated evaluation times (default: every event)");
  score->add_flag("--include-hawkes", sco.include_hawkes, "Use observation times as evidence too");

  EvalOpts eo;
  auto* eval = app.add_subcommand("eval", "Metrics and sampling-rate curves");
  eval->fallthrough();
  eval->add_option("--traces", eo.traces, "traces.csv from score")->required();
  eval->add_option("--episodes", eo.episodes, "Episodes JSONL (labels, censor times, events)")->required();
  eval->add_option("--seed", eo.seed, "Random seed (recorded only)");
  eval->add_option("--out", eo.out, "Output directory")->required();
  eval->add_option("--aggregation", eo.aggregation, "Episode score: max, final or horizon");
  eval->add_option("--at-horizon", eo.at_horizon, "Hours for --aggregation horizon");
  eval->add_option("--thresholds", eo.thresholds, "Comma-separated alarm thresholds");
  eval->add_option("--horizon", eo.horizon, "Hours before censoring covered by the rate curve");
  eval->add_option("--bin", eo.bin, "Rate-curve bin width, hours");
  eval->add_option("--test-window", eo.test_window, "Final window (hours) for the Welch test");

  std::string reference_out;
  auto* reference = app.add_subcommand("reference-model", "Write the built-in synthetic reference model as JSON");
  reference->add_option("--out", reference_out, "Output file")->required();

  CLI11_PARSE(app, argc, argv);

  if (*reference) {
    try {
      smmh::save_model(reference_out, smmh::reference_model());
      return kOk;
    } catch (const std::exception& e) {
      std::cerr << "smmh reference-model: " << e.what() << "\n";
      return kOther;
    }
  }

  if (*sample) return cmd_sample(so);
  if (*fit) return cmd_fit(fo);
  if (*score) return cmd_score(sco);
  if (*eval) return cmd_eval(eo);
  return kOther;
}
