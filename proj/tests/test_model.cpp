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

#include "gsn/model.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace gsn;
using namespace gsn::testing;

namespace {

bool names(const Report& r, const std::string& what) { return r.witnesses.dump().find(what) != std::string::npos; }

/// n1 = 1, m1 = 2, Bf = (1, 0), Ef = (0, 1), Rf = I, Qf11 = 1: K = 1.
GameSpec decoupled_a3(double q12 = 0.0, double c = 0.5) {
  const TimeGrid g(1.0, 10);
  GameSpec s = GameSpec::zeros(Dims{1, 1, 2, 1}, g, GraphonGrid::constant(4, c));
  s.f.B = cpath(g, (MatrixXd(1, 2) << 1, 0).finished());
  s.f.E = cpath(g, (MatrixXd(1, 2) << 0, 1).finished());
  MatrixXd Q = MatrixXd::Zero(3, 3);
  Q(0, 0) = 1.0;
  Q(0, 1) = Q(1, 0) = q12;
  s.f.Q = cpath(g, Q);
  return s;
}

GraphonGrid two_block(int M, double split = 0.5) {
  MatrixXd b(2, 2);
  b << 0.8, 0.2, 0.2, 0.8;
  return GraphonGrid::step(M, {0.0, split, 1.0}, b);
}

}  // namespace

TEST(ValidateA1, ZeroSpecPasses) {
  const GameSpec s = GameSpec::zeros(Dims{2, 1, 1, 1}, TimeGrid(1.0, 5), GraphonGrid::constant(3, 0.5));
  const Report r = validate_A1(s);
  EXPECT_TRUE(r.pass) << to_json(r).dump();
}

TEST(ValidateA1, IndefiniteQfNamed) {
  GameSpec s = GameSpec::zeros(Dims{1, 1, 1, 1}, TimeGrid(1.0, 5), GraphonGrid::constant(3, 0.5));
  MatrixXd Q = MatrixXd::Identity(3, 3);
  Q(1, 1) = -0.1;
  s.f.Q = cpath(s.grid, Q);
  const Report r = validate_A1(s);
  EXPECT_FALSE(r.pass);
  EXPECT_TRUE(names(r, "\"Qf\"")) << r.witnesses.dump();
}

TEST(ValidateA1, RandomGramQfPasses) {
  Draw d(21);
  for (int i = 0; i < 10; ++i) {
    GameSpec s = GameSpec::zeros(Dims{2, 1, 1, 1}, TimeGrid(1.0, 5), GraphonGrid::constant(3, 0.5));
    const MatrixXd S = d.normal(5, 5);
    s.f.Q = cpath(s.grid, S.transpose() * S);
    EXPECT_TRUE(validate_A1(s).pass);
  }
}

TEST(ValidateA1, ShapeAndDefinitenessFailures) {
  GameSpec s = GameSpec::zeros(Dims{1, 1, 1, 1}, TimeGrid(1.0, 5), GraphonGrid::constant(3, 0.5));
  GameSpec bad = s;
  bad.f.B = cpath(s.grid, MatrixXd::Zero(2, 1));
  Report r = validate_A1(bad);
  EXPECT_FALSE(r.pass);
  EXPECT_TRUE(names(r, "Bf"));
  bad = s;
  bad.f.R = cpath(s.grid, s1(0.0));
  r = validate_A1(bad);
  EXPECT_FALSE(r.pass);
  EXPECT_TRUE(names(r, "Rf"));
  bad = s;
  bad.l.G = -MatrixXd::Identity(2, 2);
  EXPECT_TRUE(names(validate_A1(bad), "Gl"));
  bad = s;
  bad.f.A[3](0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_TRUE(names(validate_A1(bad), "Af"));
  // total variation is reported, never enforced
  bad = s;
  bad.f.E[2](0, 0) = 5.0;
  r = validate_A1(bad);
  EXPECT_TRUE(r.pass);
  EXPECT_NEAR(r.values["total_variation"]["Ef"].get<double>(), 10.0, 1e-15);
}

TEST(ValidateA3, DecoupledInstanceHasKOne) {
  const Report r = validate_A3(decoupled_a3());
  EXPECT_TRUE(r.pass) << to_json(r).dump();
  EXPECT_NEAR(r.values["K"].get<double>(), 1.0, 1e-14);
  EXPECT_EQ(r.values["condition_value"].get<double>(), 0.0);
}

TEST(ValidateA3, NoDiffusionControlGivesZeroK) {
  // Bf = I, Ef = 0: the stacked gram has rank m1 < 2 n1, so K = 0 and the strict bound fails.
  const TimeGrid g(1.0, 10);
  GameSpec s = GameSpec::zeros(Dims{1, 1, 1, 1}, g, GraphonGrid::constant(4, 0.5));
  s.f.B = spath(g, 1.0);
  s.f.Q = cpath(g, (MatrixXd(3, 3) << 1, 0, 0, 0, 0, 0, 0, 0, 0).finished());
  const Report r = validate_A3(s);
  EXPECT_NEAR(r.values["K"].get<double>(), 0.0, 1e-14);
  EXPECT_FALSE(r.pass);
}

TEST(ValidateA3, CouplingScaleBisection) {
  // value = (1 + 3c) q12 against 2K = 2, so the threshold is q12 = 2 / (1 + 3c).
  const double c = 0.5;
  double lo = 0.0, hi = 5.0;
  EXPECT_TRUE(validate_A3(decoupled_a3(lo, c)).pass);
  EXPECT_FALSE(validate_A3(decoupled_a3(hi, c)).pass);
  for (int i = 0; i < 60; ++i) {
    const double mid = 0.5 * (lo + hi);
    (validate_A3(decoupled_a3(mid, c)).pass ? lo : hi) = mid;
  }
  EXPECT_NEAR(lo, 2.0 / (1.0 + 3.0 * c), 1e-9);
  const Report r = validate_A3(decoupled_a3(1.2, c));
  EXPECT_FALSE(r.pass);
  EXPECT_NEAR(r.margin, 1.0 - 0.5 * 2.5 * 1.2, 1e-12);
}

TEST(ValidateA3, TerminalFormWithConstantGraphon) {
  GameSpec s = decoupled_a3();
  for (double c : {0.0, 0.3, 1.0}) {
    s.graphon = GraphonGrid::constant(5, c);
    MatrixXd G = MatrixXd::Zero(3, 3);
    G(0, 1) = G(1, 0) = 1.0;
    s.f.G = G;
    const Report r = validate_A3(s);
    EXPECT_GE(r.values["terminal_form_min_eig"].get<double>(), -1e-14);
    EXPECT_TRUE(r.pass);
  }
}

TEST(ValidateA4, Examples) {
  GameSpec s = decoupled_a3();
  s.graphon = GraphonGrid::constant(6, 0.3);
  Report r = validate_A4(s);
  EXPECT_TRUE(r.pass);
  EXPECT_NEAR(r.values["c"].get<double>(), 0.3, 1e-15);
  s.graphon = two_block(8);
  r = validate_A4(s);
  EXPECT_TRUE(r.pass);
  EXPECT_NEAR(r.values["c"].get<double>(), 0.5, 1e-15);
  s.graphon = two_block(8, 0.25);
  r = validate_A4(s);
  EXPECT_FALSE(r.pass);
  EXPECT_TRUE(names(r, "max_deviation"));
}

TEST(BuildFollowerGfbsde, NoControlChannel) {
  const TimeGrid g(1.0, 6);
  GameSpec s = GameSpec::zeros(Dims{2, 1, 2, 1}, g, GraphonGrid::constant(3, 0.5));
  const GfbsdeProblem p = build_follower_gfbsde(s, MatrixPath(g, 1, 1));
  for (int i : {1, 2})
    for (int j : {1, 2}) EXPECT_EQ(p.coeffs[0].A[i][j].sup_norm(), 0.0);
}

TEST(BuildFollowerGfbsde, ScalarSubstitution) {
  const TimeGrid g(1.0, 6);
  GameSpec s = GameSpec::zeros(Dims{1, 1, 1, 1}, g, GraphonGrid::constant(3, 0.5));
  s.f.B = spath(g, 1.0);
  const GfbsdeProblem p = build_follower_gfbsde(s, MatrixPath(g, 1, 1));
  EXPECT_EQ(p.coeffs[0].A[1][1][3](0, 0), -1.0);
}

TEST(BuildFollowerGfbsde, RandomScalarMatchesHandSubstitution) {
  Draw d(31);
  const TimeGrid g(1.0, 6);
  GameSpec s = GameSpec::zeros(Dims{1, 1, 1, 1}, g, GraphonGrid::constant(3, 0.5));
  const double A = d.normal(), B = d.normal(), C = d.normal(), D = d.normal(), E = d.normal(), F = d.normal();
  const double R = d.uniform(0.5, 2.0), b = d.normal(), sig = d.normal();
  s.f.A = spath(g, A), s.f.B = spath(g, B), s.f.C = spath(g, C), s.f.D = spath(g, D);
  s.f.E = spath(g, E), s.f.F = spath(g, F), s.f.R = spath(g, R), s.f.b = spath(g, b), s.f.sig = spath(g, sig);
  MatrixXd Q = d.psd(3, 1.0), G = d.psd(3, 1.0);
  s.f.Q = cpath(g, Q);
  s.f.G = G;
  const double xbar = d.normal();
  const GfbsdeProblem p = build_follower_gfbsde(s, spath(g, xbar));
  const auto& c = p.coeffs[0];
  const int k = 4;
  auto v = [&](const MatrixPath& m) { return m[k](0, 0); };
  EXPECT_NEAR(v(c.A[0][0]), -Q(0, 0), 1e-15);
  EXPECT_NEAR(v(c.A[0][1]), -A, 1e-15);
  EXPECT_NEAR(v(c.A[0][2]), -D, 1e-15);
  EXPECT_NEAR(v(c.B[0]), -Q(0, 1), 1e-15);
  EXPECT_NEAR(v(c.A[1][0]), A, 1e-15);
  EXPECT_NEAR(v(c.A[1][1]), -B * B / R, 1e-14);
  EXPECT_NEAR(v(c.A[1][2]), -B * E / R, 1e-14);
  EXPECT_NEAR(v(c.B[1]), C, 1e-15);
  EXPECT_NEAR(v(c.A[2][0]), D, 1e-15);
  EXPECT_NEAR(v(c.A[2][1]), -E * B / R, 1e-14);
  EXPECT_NEAR(v(c.A[2][2]), -E * E / R, 1e-14);
  EXPECT_NEAR(v(c.B[2]), F, 1e-15);
  EXPECT_NEAR(v(c.b), b, 1e-15);
  EXPECT_NEAR(v(c.sig), sig, 1e-15);
  EXPECT_NEAR(v(c.g), -Q(0, 2) * xbar, 1e-15);
  EXPECT_NEAR(c.G1(0, 0), G(0, 0), 1e-15);
  EXPECT_NEAR(c.G2(0, 0), G(0, 1), 1e-15);
  EXPECT_NEAR(c.h(0), G(0, 2) * xbar, 1e-15);
}

TEST(BuildFollowerGfbsde, SingularRfIsHardError) {
  const TimeGrid g(1.0, 6);
  GameSpec s = GameSpec::zeros(Dims{1, 1, 1, 1}, g, GraphonGrid::constant(3, 0.5));
  s.f.R = spath(g, 0.0);
  EXPECT_THROW(build_follower_gfbsde(s, MatrixPath(g, 1, 1)), Error);
}

// ---- properties

TEST(ModelProperty, A3ImpliesMonotonicityWithMargin) {
  for (int i = 0; i < 50; ++i) {
    const GameSpec s = random_a3_spec(1000 + i, 1 + i % 2, 3 + i % 6, 20);
    const Report a3 = validate_A3(s);
    ASSERT_TRUE(a3.pass) << i;
    const Report s2 = check_S1_S2(build_follower_gfbsde(s, smooth_leader_mean(s.grid)));
    EXPECT_TRUE(s2.pass) << i;
    EXPECT_GE(s2.values["K1"].get<double>(), a3.margin - 1e-12) << i;
  }
}

TEST(ModelProperty, LeaderMeanEntersLinearly) {
  const GameSpec s = random_a3_spec(77, 2, 5, 30);
  Draw d(78);
  const MatrixPath x1 = MatrixPath::generate(s.grid, [&](int) { return MatrixXd(d.normal(1, 1)); });
  const MatrixPath x2 = MatrixPath::generate(s.grid, [&](int) { return MatrixXd(d.normal(1, 1)); });
  const MatrixPath x12 = MatrixPath::generate(s.grid, [&](int k) { return MatrixXd(x1[k] + x2[k]); });
  const MatrixPath zero(s.grid, 1, 1);
  const auto p0 = build_follower_gfbsde(s, zero), p1 = build_follower_gfbsde(s, x1),
             p2 = build_follower_gfbsde(s, x2), p12 = build_follower_gfbsde(s, x12);
  const auto &c0 = p0.coeffs[0], &c1 = p1.coeffs[0], &c2 = p2.coeffs[0], &c12 = p12.coeffs[0];
  for (int k = 0; k <= s.grid.N; ++k)
    EXPECT_LT((c12.g[k] - c1.g[k] - c2.g[k] + c0.g[k]).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((c12.h - c1.h - c2.h + c0.h).cwiseAbs().maxCoeff(), 1e-14);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) EXPECT_EQ(sup_diff(c1.A[i][j], c2.A[i][j]), 0.0);
    EXPECT_EQ(sup_diff(c1.B[i], c2.B[i]), 0.0);
  }
  EXPECT_EQ(sup_diff(c1.b, c2.b), 0.0);
  EXPECT_EQ(sup_diff(c1.sig, c2.sig), 0.0);
}

TEST(TimeGridAndPath, Basics) {
  const TimeGrid g(2.0, 8);
  EXPECT_DOUBLE_EQ(g.h(), 0.25);
  for (int k = 0; k < g.N; ++k) EXPECT_LT(g.t(k), g.t(k + 1));
  EXPECT_EQ(g.t(g.N), 2.0);
  EXPECT_THROW(TimeGrid(0.0, 3), ConfigError);
  EXPECT_THROW(TimeGrid(1.0, 0), ConfigError);
  MatrixPath p(g, 1, 1);
  for (int k = 0; k <= g.N; ++k) p[k](0, 0) = k;
  EXPECT_EQ(p.at(0.3)(0, 0), 1.0);  // left-constant
  p.set_interp(Interp::Cubic);
  EXPECT_NEAR(p.at(0.3)(0, 0), 1.2, 1e-13);  // cubic reproduces linear data
}

// ---- JSON ingestion

TEST(GameSpecJson, FixturesLoad) {
  for (const char* name : {"decoupled_scalar.json", "generic_noisy.json", "deterministic.json", "zero_cost.json",
                           "a4_violation.json", "indefinite_qf.json", "lln_step.json"}) {
    EXPECT_NO_THROW(load_game(name)) << name;
  }
  const GameSpec s = load_game("generic_noisy.json");
  EXPECT_EQ(s.M(), 8);
  EXPECT_EQ(s.dims.m1, 2);
  EXPECT_TRUE(validate_A1(s).pass);
  EXPECT_TRUE(validate_A3(s).pass);
  EXPECT_TRUE(validate_A4(s).pass);
}

TEST(GameSpecJson, FieldDiagnostics) {
  json j = config_json("decoupled_scalar.json");
  auto expect_error = [](const json& bad, const std::string& needle) {
    try {
      read_game_spec(bad, "cfg");
      ADD_FAILURE() << "expected ConfigError for " << needle;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  json bad = j;
  bad["follower"]["A"] = "x";
  expect_error(bad, "follower.A");
  bad = j;
  bad["follower"]["Q"] = json::array({json::array({1, 0}), json::array({0, 1})});
  expect_error(bad, "follower.Q");
  bad = j;
  bad["typo_key"] = 1;
  expect_error(bad, "typo_key");
  bad = j;
  bad.erase("T");
  expect_error(bad, "T");
  bad = j;
  bad["graphon"] = {{"kind", "sampled"}, {"values", json::array({json::array({0.1, 0.2}), json::array({0.3, 0.1})})}};
  expect_error(bad, "symmetric");
  EXPECT_THROW(parse_json_text("{\n  \"a\": 1,\n  oops\n}", "x.json"), ConfigError);
  try {
    parse_json_text("{\n  \"a\": 1,\n  oops\n}", "x.json");
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("x.json:3"), std::string::npos) << e.what();
  }
}
