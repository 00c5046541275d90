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

#include "support.hpp"

#include <gtest/gtest.h>

using namespace gsn;
using namespace gsn::testing;

namespace {

double maxabs(const MatrixXd& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

const Equilibrium& cached(const std::string& name) {
  static std::map<std::string, std::pair<GameSpec, Equilibrium>> cache;
  auto it = cache.find(name);
  if (it == cache.end()) {
    GameSpec s = load_game(name);
    Equilibrium eq = assemble_stackelberg_equilibrium(s);
    it = cache.emplace(name, std::make_pair(std::move(s), std::move(eq))).first;
  }
  return it->second.second;
}

}  // namespace

TEST(Aggregation, ZeroRowSum) {
  GameSpec s = load_game("generic_noisy.json");
  s.graphon = GraphonGrid::constant(s.M(), 0.0);
  const RiccatiSolution P = solve_follower_riccati_original(s);
  const HattedCoefficients h = assemble_hatted(s, P);
  const FbodeCoefficients fb = aggregate_follower_system(s, h);
  EXPECT_EQ(fb.c, 0.0);
  EXPECT_EQ(sup_diff(fb.A, h.A), 0.0);
  EXPECT_EQ(fb.C.sup_norm(), 0.0);
  EXPECT_EQ(maxabs(fb.GT), 0.0);
  EXPECT_EQ(solve_leader_asymmetric_riccati(fb).sup_norm(), 0.0);
}

TEST(Aggregation, PopulationMeanMatchesLeaderView) {
  for (const char* name : {"generic_noisy.json", "deterministic.json", "decoupled_scalar.json"}) {
    const GameSpec s = load_game(name);
    const Equilibrium& eq = cached(name);
    double gap = 0.0;
    for (int k = 0; k <= s.grid.N; ++k)
      gap = std::max(gap, maxabs(eq.followers.m[k] * s.graphon.weights() - eq.leader.Mhat[k]));
    EXPECT_LT(gap, 1e-8) << name;
  }
}

TEST(Aggregation, NonConstantRowSumRejected) {
  const GameSpec s = load_game("a4_violation.json");
  const HattedCoefficients h = assemble_hatted(s, solve_follower_riccati_original(s));
  try {
    aggregate_follower_system(s, h);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.stage(), "aggregation");
    EXPECT_NE(std::string(e.what()).find("row-sum deviation"), std::string::npos);
  }
}

TEST(Reduction, MatchesShooting) {
  for (const char* name : {"generic_noisy.json", "deterministic.json"}) {
    const Equilibrium& eq = cached(name);
    const AffineBvp p = fbode_bvp(eq.fb, eq.M0, eq.leader.xbar);
    const auto [x, y] = shooting_solve(p);
    EXPECT_LT(sup_diff(eq.reduction.Mhat, x), 1e-7) << name;
    EXPECT_LT(sup_diff(eq.reduction.Nhat, y), 1e-7) << name;
    EXPECT_LT(eq.reduction.residual, 1e-8);
  }
}

TEST(Reduction, HomogeneousDataGivesZeroOffset) {
  const Equilibrium& eq = cached("generic_noisy.json");
  FbodeCoefficients fb = eq.fb;
  const TimeGrid& g = fb.A.grid();
  fb.b = MatrixPath(g, fb.b.rows(), 1, Interp::Cubic);
  fb.g0 = MatrixPath(g, fb.g0.rows(), 1, Interp::Cubic);
  const MatrixPath xbar(g, fb.Gx.cols(), 1, Interp::Cubic);
  const AggregateReduction r = reduce_via_asymmetric_riccati(fb, eq.Phat, eq.M0, xbar);
  EXPECT_EQ(r.Nl.sup_norm(), 0.0);
  for (int k = 0; k <= g.N; ++k) EXPECT_LT(maxabs(r.Nhat[k] - eq.Phat[k] * r.Mhat[k]), 1e-15);
}

TEST(Reduction, FailedAnsatzIsReported) {
  const Equilibrium& eq = cached("generic_noisy.json");
  MatrixPath wrong = eq.Phat;
  for (int k = 0; k <= wrong.grid().N; ++k) wrong[k].array() += 0.5;
  try {
    reduce_via_asymmetric_riccati(eq.fb, wrong, eq.M0, eq.leader.xbar);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.stage(), "leader_reduction");
  }
}

TEST(LeaderTilde, MeanSystemBlockLayout) {
  const GameSpec s = load_game("generic_noisy.json");
  const Equilibrium& eq = cached("generic_noisy.json");
  const TildeSystem& ts = eq.leader.mean;
  const int n1 = 1, n2 = 1, nx = 2;
  ASSERT_EQ(ts.dim(), nx + n1);
  for (int k : {0, 50, 100}) {
    EXPECT_LT(maxabs(ts.A[k].bottomRightCorner(n1, n1) + (eq.fb.D[k] - eq.Phat[k] * eq.fb.B[k]).transpose()), 1e-15);
    EXPECT_EQ(maxabs(ts.A[k].topRightCorner(nx, n1)), 0.0);
    EXPECT_EQ(maxabs(ts.A[k].bottomLeftCorner(n1, nx)), 0.0);
    EXPECT_EQ(ts.B[k].block(0, nx, n1, n1), eq.fb.B[k]);
    EXPECT_EQ(ts.B[k].block(nx, 0, n1, n1), MatrixXd(eq.fb.B[k].transpose()));
    EXPECT_EQ(maxabs(ts.B[k].bottomRightCorner(n1, n1)), 0.0);
    EXPECT_EQ(maxabs(ts.C[k]) + maxabs(ts.D[k]) + maxabs(ts.E[k]), 0.0);
    EXPECT_EQ(ts.Q[k].block(nx, n1, n1, n2), eq.fb.Gx[k]);
    EXPECT_EQ(maxabs(ts.Q[k].bottomRightCorner(n1, n1)), 0.0);
    EXPECT_LT(maxabs(ts.Q[k] - ts.Q[k].transpose()), 1e-15);
    EXPECT_LT(maxabs(ts.B[k] - ts.B[k].transpose()), 1e-15);
  }
  EXPECT_EQ(maxabs(ts.F.bottomRightCorner(n1, n1)), 0.0);
  EXPECT_EQ(ts.F.block(nx, n1, n1, n2), eq.fb.GTx);
  EXPECT_LT(maxabs(ts.F - ts.F.transpose()), 1e-15);
  EXPECT_EQ(ts.x0(0), eq.M0(0));
  EXPECT_EQ(ts.x0(1), s.x0l_mean(0));
}

TEST(LeaderTilde, SelectorIdentity) {
  // U maps (Mhat, E[X], X - E[X]) to (X, Mhat); x^T (U^T Q U) x == (Ux)^T Q (Ux).
  const GameSpec s = load_game("generic_noisy.json");
  const Equilibrium& eq = cached("generic_noisy.json");
  const LeaderHatted L = build_leader_hatted(s, eq.fb, eq.Phat, eq.M0);
  Draw d(5);
  for (int i = 0; i < 100; ++i) {
    const VectorXd x = d.normal(3, 1);
    const VectorXd ux = L.U * x;
    EXPECT_NEAR(ux(0), x(1) + x(2), 1e-15);
    EXPECT_EQ(ux(1), x(0));
    const int k = i % (s.grid.N + 1);
    EXPECT_NEAR(x.dot(L.Q[k] * x), ux.dot(s.l.Q[k] * ux), 1e-12);
    const VectorXd v = d.normal(2, 1);
    EXPECT_NEAR(v.dot(L.R[k] * v), (L.V * v).dot(s.l.R[k] * (L.V * v)), 1e-12);
  }
}

TEST(LeaderTilde, ZeroLeaderCost) {
  const GameSpec s = load_game("zero_cost.json");
  const Equilibrium eq = assemble_stackelberg_equilibrium(s);
  EXPECT_EQ(eq.leader.Pl.P.sup_norm(), 0.0);
  EXPECT_EQ(eq.leader.K.sup_norm(), 0.0);
  EXPECT_LT(eq.leader.a1.sup_norm(), 1e-14);
  EXPECT_EQ(eq.Pf.P.sup_norm(), 0.0);
  EXPECT_EQ(eq.fpol.Kx.sup_norm(), 0.0);
  EXPECT_LT(eq.followers.phi.sup_norm(), 1e-14);
}

TEST(LeaderFinalSystem, NoNoiseIsDeterministic) {
  const Equilibrium& eq = cached("deterministic.json");
  const TildeSystem& ts = eq.leader.mean;
  const TildePaths tp = solve_leader_final_system(ts, eq.leader.Pmean.P, eq.leader.phi, 5, 9);
  const double h = ts.A.grid().h();
  for (std::size_t k = 0; k < tp.X.size(); ++k) {
    for (int p = 1; p < 5; ++p) EXPECT_EQ(tp.X[k].col(p), tp.X[k].col(0));
    EXPECT_EQ(maxabs(tp.Z[k]), 0.0);
    EXPECT_LT(maxabs(tp.X[k].col(0) - eq.leader.X[k]), 20.0 * h);
  }
}

TEST(LeaderFinalSystem, ZeroForcing) {
  const Equilibrium& eq = cached("generic_noisy.json");
  TildeSystem ts = eq.leader.mean;
  const TimeGrid& g = ts.A.grid();
  const Index d = ts.dim();
  ts.b = ts.sig = ts.g = MatrixPath(g, d, 1, Interp::Cubic);
  ts.x0.setZero();
  const MatrixPath phi = solve_tilde_phi(ts, eq.leader.Pmean.P);
  EXPECT_EQ(phi.sup_norm(), 0.0);
  const TildePaths tp = solve_leader_final_system(ts, eq.leader.Pmean.P, phi, 3, 1);
  for (const auto& X : tp.X) EXPECT_EQ(maxabs(X), 0.0);
  EXPECT_EQ(tilde_mean_path(ts, eq.leader.Pmean.P, phi).sup_norm(), 0.0);
}

TEST(LeaderFeedback, NoControlMapGivesZeroPolicy) {
  const Equilibrium& eq = cached("generic_noisy.json");
  TildeSystem ts = eq.leader.mean;
  const TimeGrid& g = ts.A.grid();
  ts.H = ts.I = MatrixPath(g, ts.H.rows(), ts.dim(), Interp::Cubic);
  const TildeFeedback f = leader_feedback(ts, eq.leader.Pmean);
  EXPECT_EQ(f.Gx.sup_norm() + f.Gphi.sup_norm() + f.goff.sup_norm(), 0.0);
}

TEST(LeaderFeedback, DeterministicStationarity) {
  const GameSpec s = load_game("deterministic.json");
  const Equilibrium& eq = cached("deterministic.json");
  const LeaderSolution& L = eq.leader;
  double worst = 0.0;
  for (int k = 0; k <= s.grid.N; ++k)
    worst = std::max(worst, maxabs(leader_stationarity(s, L, k, L.xbar[k], L.a1[k], L.Mhat[k])));
  EXPECT_LT(worst, 1e-8);
  EXPECT_LT(L.gain_crosscheck, 1e-12);
}

TEST(LeaderFeedback, DeterministicVertexAtZero) {
  const GameSpec s = load_game("deterministic.json");
  const Equilibrium& eq = cached("deterministic.json");
  SimConfig cfg;
  cfg.paths = 4;
  cfg.seed = 2;
  const Report r = leader_deviation_test(s, eq, cfg, 4);
  EXPECT_TRUE(r.pass) << r.witnesses.dump();
  EXPECT_LT(r.values["max_open_loop_vertex"].get<double>(), 1e-6);
  EXPECT_GT(r.values["min_curvature"].get<double>(), 0.0);
}

TEST(Equilibrium, DecoupledLeaderIsStandaloneLq) {
  GameSpec s = load_game("decoupled_scalar.json");
  s.l.b = spath(s.grid, 0.0);
  s.l.sig = spath(s.grid, 0.0);
  const Equilibrium eq = assemble_stackelberg_equilibrium(s);
  // standalone: a1 = -R^{-1} B P xbar with the same Riccati as the fluctuation gain
  const RiccatiSolution P = solve_standard_riccati(s.l.A, s.l.B, s.l.D, s.l.E, s.Ql(0, 0), s.l.R, s.Gl(0, 0));
  for (int k = 0; k <= s.grid.N; ++k) {
    EXPECT_NEAR(eq.leader.a1[k](0, 0), eq.leader.K[k](0, 0) * eq.leader.xbar[k](0, 0), 1e-8);
    EXPECT_NEAR(eq.leader.K[k](0, 0), -P.P[k](0, 0), 1e-10);
  }
  // the leader mean solves x' = (a + b K) x
  const MatrixPath x = integrate_matrix_ode(
      s.grid, [&](double t, const MatrixXd& y) { return MatrixXd((s.l.A.at(t) + s.l.B.at(t) * eq.leader.K.at(t)) * y); },
      s.x0l_mean, Direction::Forward);
  EXPECT_LT(sup_diff(x, eq.leader.xbar), 1e-8);
}

TEST(Equilibrium, ConstantGraphonGivesIdenticalIndices) {
  const GameSpec s = load_game("decoupled_scalar.json");
  const Equilibrium& eq = cached("decoupled_scalar.json");
  for (int k = 0; k <= s.grid.N; ++k)
    for (int u = 1; u < s.M(); ++u) {
      EXPECT_EQ(eq.followers.m[k].col(u), eq.followers.m[k].col(0));
      EXPECT_EQ(eq.followers.phi[k].col(u), eq.followers.phi[k].col(0));
    }
}

TEST(Equilibrium, DiagnosticsRecorded) {
  const Equilibrium& eq = cached("generic_noisy.json");
  const json& d = eq.diagnostics;
  EXPECT_TRUE(d["A1"]["pass"].get<bool>());
  EXPECT_LT(d["follower_riccati"]["cross_form_rel_diff"].get<double>(), 1e-10);
  EXPECT_LT(d["leader"]["reduction_residual"].get<double>(), 1e-8);
  EXPECT_LT(d["leader"]["mean_path_vs_reduction"].get<double>(), 1e-8);
  EXPECT_LT(d["followers"]["population_mean_vs_leader_view"].get<double>(), 1e-8);
}

// ---- properties

TEST(LeaderProperty, CostIsConvexAlongDeviations) {
  const GameSpec s = load_game("generic_noisy.json");
  const Equilibrium& eq = cached("generic_noisy.json");
  const LeaderControl c0 = equilibrium_leader_control(eq);
  const NormalStream rng(77);
  for (int d = 0; d < 5; ++d) {
    const MatrixPath beta = random_direction(s.grid, 1, rng, 10 + d);
    auto J = [&](double lam) {
      LeaderControl c = c0;
      c.abar = MatrixPath::generate(s.grid, [&](int k) { return MatrixXd(c0.abar[k] + lam * beta[k]); });
      return leader_cost_moments(s, c, population_response(s, eq, c.abar)).cost;
    };
    const double j0 = J(0.0), jp = J(0.3), jm = J(-0.3);
    EXPECT_GT(jp + jm - 2.0 * j0, 0.0);
    EXPECT_GE(jp, j0 - 1e-10);
    EXPECT_GE(jm, j0 - 1e-10);
  }
}

TEST(LeaderProperty, ResponseReproducesEquilibriumPaths) {
  for (const char* name : {"generic_noisy.json", "deterministic.json"}) {
    const GameSpec s = load_game(name);
    const Equilibrium& eq = cached(name);
    const PopulationResponse r = population_response(s, eq, eq.leader.a1);
    EXPECT_LT(sup_diff(r.M, eq.leader.Mhat), 1e-8) << name;
    EXPECT_LT(sup_diff(r.xbar, eq.leader.xbar), 1e-8) << name;
    EXPECT_LT(sup_diff(r.N, eq.reduction.Nhat), 1e-8) << name;
  }
}
