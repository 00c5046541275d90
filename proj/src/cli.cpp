// Copyright 2026 The gsn Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "gsn/cli.hpp"

#include "gsn/gfbsde.hpp"
#include "gsn/io.hpp"
#include "gsn/leader.hpp"
#include "gsn/mc_sim.hpp"
#include "gsn/model.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#ifndef GSN_GIT_DESCRIBE
#define GSN_GIT_DESCRIBE "unknown"
#endif

namespace gsn::cli {
namespace {

namespace fs = std::filesystem;

struct Flags {
  std::string config;
  std::string out = "gsn_out";
  std::optional<std::uint64_t> seed;
  std::optional<int> paths, threads;
};

/// Thrown after a check has been recorded as failed.
struct CheckFailed {};

class Manifest {
 public:
  Manifest(std::string command, const Flags& f) : f_(f) {
    j_["command"] = std::move(command);
    j_["config"] = f.config;
    j_["git_describe"] = GSN_GIT_DESCRIBE;
    j_["stages"] = json::array();
    j_["outputs"] = json::array();
  }

  void set_config_bytes(const std::string& bytes) { j_["config_fnv1a64"] = hex64(fnv1a(bytes)); }
  void set(const std::string& key, json v) { j_[key] = std::move(v); }

  /// Runs one stage; records time and diagnostics, and the error if it throws.
  void stage(const std::string& name, const std::function<json()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    json rec{{"name", name}};
    try {
      rec["diagnostics"] = fn();
      rec["seconds"] = seconds_since(t0);
      j_["stages"].push_back(rec);
    } catch (const std::exception& e) {
      rec["seconds"] = seconds_since(t0);
      rec["error"] = e.what();
      j_["stages"].push_back(rec);
      j_["failed_stage"] = name;
      throw;
    } catch (const CheckFailed&) {
      rec["seconds"] = seconds_since(t0);
      rec["check_failed"] = true;
      j_["stages"].push_back(rec);
      j_["failed_stage"] = name;
      throw;
    }
  }

  std::string out(const std::string& file) {
    fs::create_directories(f_.out);
    j_["outputs"].push_back(file);
    return (fs::path(f_.out) / file).string();
  }

  void write(int code) {
    j_["exit_code"] = code;
    std::error_code ec;
    fs::create_directories(f_.out, ec);
    std::ofstream o(fs::path(f_.out) / "manifest.json");
    o << j_.dump(2) << '\n';
  }

 private:
  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  Flags f_;
  json j_;
};

template <class T>
T opt(const json& o, const char* key, T dflt) {
  if (!o.contains(key)) return dflt;
  try {
    return o[key].get<T>();
  } catch (const std::exception&) {
    throw ConfigError(std::string("options.") + key + ": wrong type");
  }
}

struct Loaded {
  std::string text;
  json j;
  json options = json::object();
};

Loaded load(const Flags& f, Manifest& man) {
  Loaded l;
  l.text = read_file(f.config);
  man.set_config_bytes(l.text);
  l.j = parse_json_text(l.text, f.config);
  if (!l.j.is_object()) throw ConfigError(f.config + ": top level must be an object");
  if (l.j.contains("options")) {
    l.options = l.j["options"];
    const io::Node o(l.options, "options");
    o.only({"seed", "paths", "threads", "fixed_point", "nash_deviations", "leader_deviations", "lln_M", "lln_paths",
            "tests", "empirical_aggregate", "antithetic", "dump_ensemble", "checks", "continuation",
            "residual_paths", "stability"});
  }
  man.set("seed", f.seed ? *f.seed : opt<std::uint64_t>(l.options, "seed", 1));
  return l;
}

SimConfig sim_config(const Flags& f, const json& o) {
  SimConfig c;
  c.paths = f.paths ? *f.paths : opt<int>(o, "paths", 1000);
  c.seed = f.seed ? *f.seed : opt<std::uint64_t>(o, "seed", 1);
  c.threads = f.threads ? *f.threads : opt<int>(o, "threads", 0);
  c.empirical_aggregate = opt<bool>(o, "empirical_aggregate", false);
  c.antithetic = opt<bool>(o, "antithetic", false);
  if (c.paths < 1) throw ConfigError("paths must be >= 1");
  return c;
}

FixedPointOptions fixed_point_options(const json& o) {
  FixedPointOptions fp;
  if (!o.contains("fixed_point")) return fp;
  const io::Node n(o["fixed_point"], "options.fixed_point");
  n.only({"tol", "max_iter", "damping"});
  if (n.has("tol")) fp.tol = n.at("tol").positive();
  if (n.has("max_iter")) fp.max_iter = n.at("max_iter").integer(1);
  if (n.has("damping")) fp.damping = n.at("damping").positive();
  return fp;
}

ContinuationOptions continuation_options(const json& o) {
  ContinuationOptions c;
  if (!o.contains("continuation")) return c;
  const io::Node n(o["continuation"], "options.continuation");
  n.only({"schedule", "init", "delta", "delta_min", "tol", "max_iter"});
  if (n.has("schedule")) {
    const std::string s = n.at("schedule").string();
    if (s == "uniform")
      c.schedule = ContinuationOptions::Schedule::Uniform;
    else if (s != "adaptive")
      n.at("schedule").error("expected 'uniform' or 'adaptive'");
  }
  if (n.has("init")) {
    const std::string s = n.at("init").string();
    if (s == "zero")
      c.init = ContinuationOptions::Init::Zero;
    else if (s != "previous")
      n.at("init").error("expected 'previous' or 'zero'");
  }
  if (n.has("delta")) c.delta = n.at("delta").positive();
  if (n.has("delta_min")) c.delta_min = n.at("delta_min").positive();
  if (n.has("tol")) c.tol = n.at("tol").positive();
  if (n.has("max_iter")) c.max_iter = n.at("max_iter").integer(1);
  return c;
}

void write_report(Manifest& man, const json& report) {
  std::ofstream o(man.out("report.json"));
  o << report.dump(2) << '\n';
}

void print_checks(const json& reports) {
  for (const auto& [name, r] : reports.items())
    if (r.is_object() && r.contains("pass"))
      std::cout << (r["pass"].get<bool>() ? "PASS " : "FAIL ") << name << '\n';
}

bool all_pass(const json& reports) {
  for (const auto& [name, r] : reports.items())
    if (r.is_object() && r.contains("pass") && !r["pass"].get<bool>()) return false;
  return true;
}

// ---------------------------------------------------------------------------

int cmd_validate(const Flags& f, Manifest& man) {
  const Loaded l = load(f, man);
  json reports = json::object();
  if (config_kind(l.j) == "gfbsde") {
    GfbsdeProblem p;
    man.stage("ingest", [&] {
      p = read_gfbsde_problem(l.j, f.config);
      return json{{"n", p.n}, {"M", p.M()}, {"N", p.grid.N}};
    });
    man.stage("check_S1_S2", [&] {
      reports["S1_S2"] = to_json(check_S1_S2(p));
      return reports["S1_S2"]["values"];
    });
  } else {
    GameSpec s;
    man.stage("ingest", [&] {
      s = read_game_spec(l.j, f.config);
      return json{{"M", s.M()}, {"N", s.grid.N}};
    });
    const auto checks = opt<std::vector<std::string>>(l.options, "checks", {"A1", "A3", "A4"});
    man.stage("validate", [&] {
      for (const auto& c : checks) {
        if (c == "A1")
          reports["A1"] = to_json(validate_A1(s));
        else if (c == "A3")
          reports["A3"] = to_json(validate_A3(s));
        else if (c == "A4")
          reports["A4"] = to_json(validate_A4(s));
        else
          throw ConfigError("options.checks: unknown check '" + c + "'");
      }
      return json{{"checks", checks}};
    });
  }
  write_report(man, reports);
  print_checks(reports);
  return all_pass(reports) ? kOk : kCheckFailed;
}

json policy_stationarity(const GameSpec& s, const Equilibrium& eq) {
  double fr = 0.0, lr = 0.0;
  const auto& fp = eq.fpol;
  for (int k = 0; k <= s.grid.N; ++k) {
    for (int u = 0; u < s.M(); ++u) {
      const VectorXd m = eq.followers.m[k].col(u), a = eq.followers.agg[k].col(u), phi = eq.followers.phi[k].col(u);
      const VectorXd al = fp.Kx[k] * m + fp.Kagg[k] * a + fp.Kphi[k] * phi + fp.koff[k];
      fr = std::max(fr, follower_stationarity(s, eq.Pf.P[k], k, m, al, phi, a).cwiseAbs().maxCoeff());
    }
    const VectorXd al = eq.leader.a1[k];
    lr = std::max(lr, leader_stationarity(s, eq.leader, k, eq.leader.xbar[k], al, eq.leader.Mhat[k]).cwiseAbs().maxCoeff());
  }
  return {{"follower", fr}, {"leader", lr}};
}

void write_equilibrium(Manifest& man, const GameSpec& s, const Equilibrium& eq) {
  const TimeGrid& g = s.grid;
  write_paths_csv(man.out("follower_riccati.csv"), g, {{"P", &eq.Pf.P}});
  write_paths_csv(man.out("follower_policy.csv"), g,
                  {{"Kx", &eq.fpol.Kx}, {"Kagg", &eq.fpol.Kagg}, {"Kphi", &eq.fpol.Kphi}, {"koff", &eq.fpol.koff}});
  write_indexed_csv(man.out("follower_paths.csv"), g,
                    {{"m", &eq.followers.m}, {"phi", &eq.followers.phi}, {"agg", &eq.followers.agg}});
  write_paths_csv(man.out("aggregate.csv"), g,
                  {{"Phat", &eq.Phat}, {"Mhat", &eq.reduction.Mhat}, {"Nl", &eq.reduction.Nl}, {"Nhat", &eq.reduction.Nhat}});
  write_paths_csv(man.out("leader_riccati.csv"), g, {{"P", &eq.leader.Pl.P}});
  write_paths_csv(man.out("leader_policy.csv"), g,
                  {{"a1", &eq.leader.a1}, {"K", &eq.leader.K}, {"xbar", &eq.leader.xbar}, {"ybar", &eq.leader.ybar}});
}

Equilibrium equilibrium_stage(Manifest& man, const GameSpec& s, const json& options) {
  man.stage("validate_A1", [&] {
    const Report r = validate_A1(s);
    if (!r.pass) {
      std::cout << "FAIL A1\n";
      std::cout << to_json(r).dump(2) << '\n';
      throw CheckFailed{};
    }
    return to_json(r);
  });
  Equilibrium eq;
  man.stage("equilibrium", [&] {
    eq = assemble_stackelberg_equilibrium(s, {}, fixed_point_options(options));
    return eq.diagnostics;
  });
  return eq;
}

int cmd_equilibrium(const Flags& f, Manifest& man) {
  const Loaded l = load(f, man);
  GameSpec s;
  man.stage("ingest", [&] {
    s = read_game_spec(l.j, f.config);
    return json{{"M", s.M()}, {"N", s.grid.N}};
  });
  const Equilibrium eq = equilibrium_stage(man, s, l.options);
  json st;
  man.stage("stationarity", [&] {
    st = policy_stationarity(s, eq);
    return st;
  });
  man.set("stationarity_residuals", st);
  man.stage("write", [&] {
    write_equilibrium(man, s, eq);
    return json::object();
  });
  write_report(man, {{"diagnostics", eq.diagnostics}, {"stationarity_residuals", st}});
  return kOk;
}

int cmd_simulate(const Flags& f, Manifest& man) {
  const Loaded l = load(f, man);
  GameSpec s;
  man.stage("ingest", [&] {
    s = read_game_spec(l.j, f.config);
    return json{{"M", s.M()}, {"N", s.grid.N}};
  });
  const SimConfig cfg = sim_config(f, l.options);
  man.set("seed", cfg.seed);
  man.set("paths", cfg.paths);
  const Equilibrium eq = equilibrium_stage(man, s, l.options);
  PopulationEnsemble e;
  man.stage("simulate", [&] {
    e = simulate(s, eq, cfg);
    return json{{"paths", e.P}, {"empirical_aggregate", e.empirical}};
  });
  json report;
  man.stage("costs", [&] {
    const MatrixPath Mdet =
        MatrixPath::generate(s.grid, [&](int k) { return MatrixXd(eq.followers.m[k] * s.graphon.weights()); });
    const MomentPaths lm = euler_leader_moments(s, equilibrium_leader_control(eq), eq.leader.xbar, Mdet);
    const CostReport cr = evaluate_costs(s, e, lm.m, lm.S);
    CsvWriter w(man.out("costs.csv"));
    w.header({"index", "cost", "se", "cost_rewritten", "se_rewritten"});
    for (int u = 0; u < e.M; ++u)
      w.row({static_cast<double>(u), cr.follower[u].mean, cr.follower[u].se, cr.follower_rewritten[u].mean,
             cr.follower_rewritten[u].se});
    w.row({-1.0, cr.leader.mean, cr.leader.se, std::numeric_limits<double>::quiet_NaN(),
           std::numeric_limits<double>::quiet_NaN()});
    const StationarityResidual sr = stationarity_residuals(s, eq, e);
    report = {{"leader_cost", cr.leader.mean}, {"leader_se", cr.leader.se},
              {"max_form_gap_in_se", cr.max_form_gap_in_se},
              {"stationarity", {{"follower", sr.follower}, {"leader", sr.leader}, {"scale", sr.scale}}}};
    return report;
  });
  man.stage("write", [&] {
    write_ensemble_summary(man.out("ensemble_summary.csv"), e);
    if (opt<bool>(l.options, "dump_ensemble", false)) write_ensemble_binary(man.out("ensemble.bin"), e);
    return json::object();
  });
  write_report(man, report);
  return kOk;
}

void write_deviation_csv(const std::string& file, const Report& r, bool with_index) {
  CsvWriter w(file);
  std::vector<std::string> h{"draw"};
  if (with_index) h.push_back("index");
  h.insert(h.end(), {"mixed", "lambda", "mc_diff", "se", "exact_diff"});
  w.header(h);
  const json& draws = r.values["draws"];
  for (std::size_t d = 0; d < draws.size(); ++d)
    for (const auto& p : draws[d]["points"]) {
      std::vector<double> row{static_cast<double>(d)};
      if (with_index) row.push_back(draws[d]["index"].get<double>());
      row.push_back(draws[d]["kind"] == "mixed" ? 1.0 : 0.0);
      for (const char* k : {"lambda", "mc_diff", "se", "exact_diff"}) row.push_back(p[k].get<double>());
      w.row(row);
    }
}

int cmd_verify(const Flags& f, Manifest& man) {
  const Loaded l = load(f, man);
  GameSpec s;
  man.stage("ingest", [&] {
    s = read_game_spec(l.j, f.config);
    return json{{"M", s.M()}, {"N", s.grid.N}};
  });
  const SimConfig cfg = sim_config(f, l.options);
  man.set("seed", cfg.seed);
  man.set("paths", cfg.paths);
  std::vector<std::string> tests =
      opt<std::vector<std::string>>(l.options, "tests", {"stationarity", "cost_identity", "nash", "leader"});
  if (l.options.contains("lln_M") && !l.options.contains("tests")) tests.push_back("lln");
  json reports = json::object();
  auto want = [&](const std::string& t) { return std::find(tests.begin(), tests.end(), t) != tests.end(); };
  for (const auto& t : tests)
    if (t != "stationarity" && t != "cost_identity" && t != "nash" && t != "leader" && t != "lln")
      throw ConfigError("options.tests: unknown test '" + t + "'");
  std::optional<Equilibrium> eq;
  if (want("stationarity") || want("cost_identity") || want("nash") || want("leader"))
    eq = equilibrium_stage(man, s, l.options);
  if (want("stationarity"))
    man.stage("stationarity", [&] {
      SimConfig c = cfg;
      c.paths = std::min(cfg.paths, 256);
      const PopulationEnsemble e = simulate(s, *eq, c);
      const StationarityResidual r = stationarity_residuals(s, *eq, e);
      const bool noisy = s.f.D.sup_norm() + s.f.E.sup_norm() + s.f.F.sup_norm() + s.f.sig.sup_norm() +
                             s.l.D.sup_norm() + s.l.E.sup_norm() + s.l.F.sup_norm() + s.l.sig.sup_norm() +
                             s.x0f_cov.norm() + s.x0l_cov.norm() > 0.0;
      const double tol = noisy ? 5.0 * std::sqrt(s.grid.h()) * r.scale : 1e-6;
      Report rep;
      rep.check = "stationarity";
      rep.values = {{"follower", r.follower}, {"leader", r.leader}, {"tolerance", tol}, {"noisy", noisy}};
      rep.margin = tol - std::max(r.follower, r.leader);
      if (rep.margin < 0.0) rep.fail({{"follower", r.follower}, {"leader", r.leader}});
      reports["stationarity"] = to_json(rep);
      return reports["stationarity"]["values"];
    });
  if (want("cost_identity"))
    man.stage("cost_identity", [&] {
      reports["cost_identity"] = to_json(cost_identity_check(s, *eq, cfg));
      return json{{"pass", reports["cost_identity"]["pass"]}, {"margin", reports["cost_identity"]["margin"]}};
    });
  if (want("nash"))
    man.stage("nash_deviation", [&] {
      const Report r = nash_deviation_test(s, *eq, cfg, opt<int>(l.options, "nash_deviations", 50));
      write_deviation_csv(man.out("nash_deviations.csv"), r, true);
      reports["nash"] = to_json(r);
      return json{{"pass", r.pass}, {"min_z", r.values["min_z"]}, {"min_curvature", r.values["min_curvature"]}};
    });
  if (want("leader"))
    man.stage("leader_deviation", [&] {
      const Report r = leader_deviation_test(s, *eq, cfg, opt<int>(l.options, "leader_deviations", 20));
      write_deviation_csv(man.out("leader_deviations.csv"), r, false);
      reports["leader"] = to_json(r);
      return json{{"pass", r.pass}, {"min_z", r.values["min_z"]},
                  {"max_open_loop_vertex", r.values["max_open_loop_vertex"]}};
    });
  if (want("lln"))
    man.stage("exact_lln", [&] {
      SimConfig c = cfg;
      c.paths = opt<int>(l.options, "lln_paths", 200);
      const auto Ms = opt<std::vector<int>>(l.options, "lln_M", {8, 32, 128, 512});
      const Report r = exact_lln_check(s, c, Ms);
      CsvWriter w(man.out("lln.csv"));
      w.header({"M", "rms_dispersion"});
      for (const auto& p : r.values["points"]) w.row({p["M"].get<double>(), p["rms_dispersion"].get<double>()});
      reports["lln"] = to_json(r);
      return json{{"pass", r.pass}, {"slope", r.values["slope"]}};
    });
  write_report(man, reports);
  print_checks(reports);
  return all_pass(reports) ? kOk : kCheckFailed;
}

void write_gfbsde(Manifest& man, const GfbsdeProblem& p, const GfbsdeSolution& sol) {
  std::vector<std::pair<std::string, const MatrixPath*>> cols;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < sol.Pi.size(); ++i) {
    names.push_back(sol.Pi.size() == 1 ? "Pi" : "Pi" + std::to_string(i));
    names.push_back(sol.Pi.size() == 1 ? "Zx" : "Zx" + std::to_string(i));
  }
  for (std::size_t i = 0; i < sol.Pi.size(); ++i) {
    cols.push_back({names[2 * i], &sol.Pi[i]});
    cols.push_back({names[2 * i + 1], &sol.Zx[i]});
  }
  write_paths_csv(man.out("gfbsde_feedback.csv"), p.grid, cols);
  write_indexed_csv(man.out("gfbsde_means.csv"), p.grid,
                    {{"m", &sol.m}, {"ybar", &sol.ybar}, {"zbar", &sol.zbar}, {"agg", &sol.agg}});
}

int cmd_gfbsde(const Flags& f, Manifest& man, const std::string& mode) {
  const Loaded l = load(f, man);
  GfbsdeProblem p;
  man.stage("ingest", [&] {
    if (config_kind(l.j) != "gfbsde") throw ConfigError(f.config + ": expected a config with \"kind\": \"gfbsde\"");
    p = read_gfbsde_problem(l.j, f.config);
    return json{{"n", p.n}, {"M", p.M()}, {"N", p.grid.N}};
  });
  const ContinuationOptions copt = continuation_options(l.options);
  Report mono;
  man.stage("check_S1_S2", [&] {
    mono = check_S1_S2(p);
    if (!mono.pass) {
      std::cout << "FAIL S1_S2: outside theorem hypotheses (K1 = " << mono.values["K1"] << ")\n";
      write_report(man, {{"S1_S2", to_json(mono)}});
      throw CheckFailed{};
    }
    return mono.values;
  });
  json reports = json::object();
  reports["S1_S2"] = to_json(mono);
  if (mode == "solve") {
    GfbsdeSolution sol;
    man.stage("continuation", [&] {
      sol = continuation_solve(p, copt);
      return sol.diagnostics;
    });
    man.stage("residual", [&] {
      const SimConfig c = sim_config(f, l.options);
      const GfbsdeResidual r = residual(p, sol, opt<int>(l.options, "residual_paths", 200), c.seed, c.threads);
      reports["residual"] = {{"forward_res", r.forward_res}, {"backward_res", r.backward_res},
                             {"terminal_res", r.terminal_res}, {"backward_max", r.backward_max}};
      return reports["residual"];
    });
    man.set("residuals", reports["residual"]);
    man.stage("apriori_estimate", [&] {
      reports["apriori_estimate"] = to_json(apriori_estimate_check(p, sol));
      return reports["apriori_estimate"]["values"];
    });
    man.stage("write", [&] {
      write_gfbsde(man, p, sol);
      return json::object();
    });
  } else {
    man.stage("stability", [&] {
      if (!l.options.contains("stability")) throw ConfigError("options.stability: missing (needs 'graphon2')");
      const io::Node n(l.options["stability"], "options.stability");
      n.only({"graphon2", "s_values", "slope_min"});
      const GraphonGrid G2 = read_graphon(n.at("graphon2"));
      if (G2.M() != p.M()) n.at("graphon2").error("must have the same number of indices as the problem graphon");
      std::vector<double> sv{0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625};
      if (n.has("s_values")) sv = n.at("s_values").numbers();
      const double smin = n.has("slope_min") ? n.at("slope_min").number() : 1.8;
      const Report r = stability_experiment(p, p.graphon, G2, sv, copt, smin);
      CsvWriter w(man.out("stability.csv"));
      w.header({"s", "distance", "energy_diff"});
      for (const auto& pt : r.values["points"])
        if (pt.contains("energy_diff"))
          w.row({pt["s"].get<double>(), pt["distance"].get<double>(), pt["energy_diff"].get<double>()});
      reports["stability"] = to_json(r);
      return json{{"slope", r.values["slope"]}, {"K_emp", r.values["K_emp"]}, {"pass", r.pass}};
    });
  }
  write_report(man, reports);
  print_checks(reports);
  return all_pass(reports) ? kOk : kCheckFailed;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Graphon Stackelberg games: equilibrium, linear graphon FBSDEs, Monte Carlo verification", "gsn"};
  app.require_subcommand(1);
  Flags f;
  auto common = [&](CLI::App* c) {
    c->add_option("--config", f.config, "JSON config")->required()->check(CLI::ExistingFile);
    c->add_option("--out", f.out, "output directory");
    c->add_option("--seed", f.seed, "RNG seed (overrides options.seed)");
    c->add_option("--paths", f.paths, "Monte Carlo paths")->check(CLI::PositiveNumber);
    c->add_option("--threads", f.threads, "worker cap (also GS_THREADS)")->check(CLI::PositiveNumber);
  };
  auto* validate = app.add_subcommand("validate", "check the standing assumptions");
  auto* equilibrium = app.add_subcommand("equilibrium", "compute the Stackelberg equilibrium");
  auto* gfbsde = app.add_subcommand("gfbsde", "linear graphon FBSDE");
  gfbsde->require_subcommand(1);
  auto* solve = gfbsde->add_subcommand("solve", "continuation solve");
  auto* stability = gfbsde->add_subcommand("stability", "graphon stability sweep");
  auto* simulate = app.add_subcommand("simulate", "Monte Carlo at the equilibrium");
  auto* verify = app.add_subcommand("verify", "deviation, identity and LLN checks");
  for (auto* c : {validate, equilibrium, solve, stability, simulate, verify}) common(c);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }
  std::string command;
  if (validate->parsed()) command = "validate";
  if (equilibrium->parsed()) command = "equilibrium";
  if (solve->parsed()) command = "gfbsde solve";
  if (stability->parsed()) command = "gfbsde stability";
  if (simulate->parsed()) command = "simulate";
  if (verify->parsed()) command = "verify";
  Manifest man(command, f);
  int code = kOk;
  try {
    if (command == "validate") code = cmd_validate(f, man);
    if (command == "equilibrium") code = cmd_equilibrium(f, man);
    if (command == "gfbsde solve") code = cmd_gfbsde(f, man, "solve");
    if (command == "gfbsde stability") code = cmd_gfbsde(f, man, "stability");
    if (command == "simulate") code = cmd_simulate(f, man);
    if (command == "verify") code = cmd_verify(f, man);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    code = kUsage;
  } catch (const CheckFailed&) {
    code = kCheckFailed;
  } catch (const Error& e) {
    std::cerr << "stage '" << e.stage() << "' failed: " << e.what() << '\n';
    man.set("failed_reason", e.what());
    code = kCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    code = kCheckFailed;
  }
  man.write(code);
  return code;
}

}  // namespace gsn::cli
