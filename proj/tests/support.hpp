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

// Shared fixtures for the test binaries and the acceptance runner.
#pragma once

#include "gsn/gfbsde.hpp"
#include "gsn/io.hpp"
#include "gsn/leader.hpp"
#include "gsn/mc_sim.hpp"

#include <string>

#ifndef GSN_CONFIG_DIR
#define GSN_CONFIG_DIR "configs"
#endif

namespace gsn::testing {

inline MatrixPath cpath(const TimeGrid& g, const MatrixXd& m) { return MatrixPath::constant(g, m); }
inline MatrixPath spath(const TimeGrid& g, double v) { return MatrixPath::constant(g, MatrixXd::Constant(1, 1, v)); }
inline MatrixXd s1(double v) { return MatrixXd::Constant(1, 1, v); }

inline std::string config_path(const std::string& name) { return std::string(GSN_CONFIG_DIR) + "/" + name; }

inline json config_json(const std::string& name) {
  return parse_json_text(read_file(config_path(name)), name);
}

/// Game from configs/, optionally on a different step count.
inline GameSpec load_game(const std::string& name, int N = 0) {
  json j = config_json(name);
  if (N > 0) j["N"] = N;
  return read_game_spec(j, name);
}

inline GfbsdeProblem load_gfbsde(const std::string& name, int N = 0) {
  json j = config_json(name);
  if (N > 0) j["N"] = N;
  return read_gfbsde_problem(j, name);
}

/// Deterministic stream of normals / uniforms for building random data.
class Draw {
 public:
  explicit Draw(std::uint64_t seed) : rng_(seed) {}
  double normal() { return rng_(NormalStream::kAux, 77, 0, next_++, 0); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * rng_.uniform(NormalStream::kAux, 78, 0, next_++); }
  MatrixXd normal(Index r, Index c) {
    MatrixXd m(r, c);
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) m(i, j) = normal();
    return m;
  }
  /// Random matrix with spectral norm exactly `norm`.
  MatrixXd with_norm(Index r, Index c, double norm) {
    const MatrixXd m = normal(r, c);
    const double s = linalg::spectral_norm(m);
    return s > 0.0 ? MatrixXd(m * (norm / s)) : m;
  }
  MatrixXd psd(Index n, double scale) {
    const MatrixXd S = normal(n, n);
    return scale * S.transpose() * S / static_cast<double>(n);
  }

 private:
  NormalStream rng_;
  std::uint32_t next_ = 0;
};

/// PSD graphon with entries in [0,1]: V V^T rescaled, V >= 0.
inline GraphonGrid random_psd_graphon(Draw& d, int M) {
  MatrixXd V(M, 3);
  for (int u = 0; u < M; ++u)
    for (int j = 0; j < 3; ++j) V(u, j) = d.uniform(0.0, 1.0);
  MatrixXd G = V * V.transpose();
  G /= G.maxCoeff();
  return GraphonGrid::sampled(0.5 * (G + G.transpose()));
}

/// Random (A1)-valid follower problem of state dimension n (n1 = n, m1 = n),
/// time-constant coefficients. Leader part is a minimal valid LQ.
inline GameSpec random_riccati_spec(std::uint64_t seed, int n, int N, bool with_E = true) {
  Draw d(seed);
  const TimeGrid g(1.0, N);
  GameSpec s = GameSpec::zeros(Dims{n, 1, n, 1}, g, GraphonGrid::constant(2, 0.5));
  s.f.A = cpath(g, 0.5 * d.normal(n, n));
  s.f.B = cpath(g, d.normal(n, n));
  s.f.D = cpath(g, 0.4 * d.normal(n, n));
  s.f.E = cpath(g, with_E ? MatrixXd(0.6 * d.normal(n, n)) : MatrixXd::Zero(n, n));
  s.f.R = cpath(g, MatrixXd::Identity(n, n) * d.uniform(0.5, 1.5) + d.psd(n, 0.3));
  const int nf = 2 * n + 1;
  s.f.Q = cpath(g, d.psd(nf, 1.0));
  s.f.G = d.psd(nf, 0.5);
  return s;
}

/// Random follower game passing (A3): m1 = 2 n1, B = [b I, 0], E = [0, e I], R = I,
/// weak couplings, PSD graphon. Coefficients are constant in time.
inline GameSpec random_a3_spec(std::uint64_t seed, int n1, int M, int N) {
  Draw d(seed);
  const TimeGrid g(1.0, N);
  const MatrixXd I = MatrixXd::Identity(n1, n1);
  GameSpec s = GameSpec::zeros(Dims{n1, 1, 2 * n1, 1}, g, random_psd_graphon(d, M));
  MatrixXd B = MatrixXd::Zero(n1, 2 * n1), E = MatrixXd::Zero(n1, 2 * n1);
  B.leftCols(n1) = d.uniform(1.0, 1.5) * I;
  E.rightCols(n1) = d.uniform(1.0, 1.5) * I;
  s.f.A = cpath(g, 0.3 * d.normal(n1, n1));
  s.f.B = cpath(g, B);
  s.f.C = cpath(g, d.with_norm(n1, n1, d.uniform(0.0, 0.1)));
  s.f.D = cpath(g, 0.2 * d.normal(n1, n1));
  s.f.E = cpath(g, E);
  s.f.F = cpath(g, d.with_norm(n1, n1, d.uniform(0.0, 0.1)));
  s.f.b = cpath(g, 0.2 * d.normal(n1, 1));
  s.f.sig = cpath(g, 0.3 * d.normal(n1, 1));
  const int nf = 2 * n1 + 1;
  MatrixXd Q = MatrixXd::Zero(nf, nf);
  Q.topLeftCorner(n1, n1) = d.uniform(1.2, 1.5) * I + 0.1 * d.psd(n1, 1.0);
  Q.block(0, n1, n1, n1) = d.with_norm(n1, n1, d.uniform(0.0, 0.1));
  Q.block(n1, 0, n1, n1) = Q.block(0, n1, n1, n1).transpose();
  Q.block(0, 2 * n1, n1, 1) = d.with_norm(n1, 1, d.uniform(0.0, 0.2));
  Q.block(2 * n1, 0, 1, n1) = Q.block(0, 2 * n1, n1, 1).transpose();
  Q.block(n1, n1, n1, n1) = 0.5 * I;
  Q(2 * n1, 2 * n1) = 0.5;
  s.f.Q = cpath(g, Q);
  MatrixXd G = MatrixXd::Zero(nf, nf);
  G.topLeftCorner(n1, n1) = 0.5 * I;
  G.block(0, n1, n1, n1) = d.uniform(0.0, 0.2) * I;
  G.block(n1, 0, n1, n1) = G.block(0, n1, n1, n1);
  G.block(0, 2 * n1, n1, 1) = d.with_norm(n1, 1, 0.1);
  G.block(2 * n1, 0, 1, n1) = G.block(0, 2 * n1, n1, 1).transpose();
  G.block(n1, n1, n1, n1) = 0.5 * I;
  G(2 * n1, 2 * n1) = 0.5;
  s.f.G = G;
  s.x0f_mean.clear();
  for (int u = 0; u < M; ++u) s.x0f_mean.push_back(0.5 * d.normal(n1, 1));
  s.x0f_cov = 0.04 * I;
  s.l.A = spath(g, -0.2);
  s.l.B = spath(g, 1.0);
  s.l.Q = cpath(g, MatrixXd::Identity(n1 + 1, n1 + 1));
  s.x0l_mean = VectorXd::Constant(1, 1.0);
  return s;
}

/// A smooth stand-in for the leader's mean state.
inline MatrixPath smooth_leader_mean(const TimeGrid& g) {
  return MatrixPath::generate(g, [&](int k) { return s1(1.0 + 0.3 * std::cos(2.0 * g.t(k))); });
}

/// Follower block of the equilibrium computed through the feedback ansatz for a
/// given leader mean path.
struct AnsatzSolution {
  RiccatiSolution Pf;
  HattedCoefficients hat;
  FollowerSystemSolution fp;
};

inline AnsatzSolution follower_ansatz(const GameSpec& s, const MatrixPath& xbar) {
  AnsatzSolution a;
  a.Pf = solve_follower_riccati_original(s);
  a.hat = assemble_hatted(s, a.Pf);
  a.fp = solve_follower_fb_system(a.hat, s.graphon, follower_initial_matrix(s), s.Gf(0, 1), s.Gf(0, 2), xbar);
  return a;
}

/// max_k |Y - (P m + phi)| and max_k |m_cont - m_ansatz|.
inline std::pair<double, double> ansatz_gap(const AnsatzSolution& a, const GfbsdeSolution& sol) {
  double dy = 0.0;
  for (int k = 0; k <= sol.grid.N; ++k)
    dy = std::max(dy, (sol.ybar[k] - (a.Pf.P[k] * a.fp.m[k] + a.fp.phi[k])).cwiseAbs().maxCoeff());
  return {sup_diff(sol.m, a.fp.m), dy};
}

/// Empirical order from three refinements: values on the coarse grid nodes.
inline double refinement_order(const MatrixPath& p1, const MatrixPath& p2, const MatrixPath& p4) {
  double e1 = 0.0, e2 = 0.0;
  const int N = p1.grid().N;
  for (int k = 0; k <= N; ++k) {
    e1 = std::max(e1, (p1[k] - p2[2 * k]).cwiseAbs().maxCoeff());
    e2 = std::max(e2, (p2[2 * k] - p4[4 * k]).cwiseAbs().maxCoeff());
  }
  return std::log2(e1 / e2);
}

/// Two-point boundary problem solved by shooting: fundamental matrix of the
/// full linear system, boundary conditions imposed as a linear solve.
inline std::pair<MatrixPath, MatrixPath> shooting_solve(const AffineBvp& p) {
  const TimeGrid& g = p.A.grid();
  const Index nx = p.A.rows(), ny = p.D.rows(), n = nx + ny;
  auto rhs = [&](double t, const MatrixXd& Y) {
    MatrixXd L(n, n);
    L << p.A.at(t), p.B.at(t), p.C.at(t), p.D.at(t);
    VectorXd f(n);
    f << p.f.at(t), p.g.at(t);
    MatrixXd out = L * Y;
    out.rightCols(1) += f;
    return out;
  };
  // Columns: fundamental solution for each unknown y(0) direction, then the particular part.
  MatrixXd Y0 = MatrixXd::Zero(n, ny + 1);
  Y0.block(nx, 0, ny, ny).setIdentity();
  Y0.block(0, ny, nx, 1) = p.x0;
  const MatrixPath sol = integrate_matrix_ode(g, rhs, Y0, Direction::Forward);
  const MatrixXd& YT = sol.back();
  // y(T) - G x(T) = h  for  y0 = c:  (Phi_y - G Phi_x) c = h - (part_y - G part_x)
  const MatrixXd Phx = YT.block(0, 0, nx, ny), Phy = YT.block(nx, 0, ny, ny);
  const VectorXd px = YT.block(0, ny, nx, 1), py = YT.block(nx, ny, ny, 1);
  const VectorXd c = (Phy - p.G * Phx).partialPivLu().solve(p.h - (py - p.G * px));
  VectorXd full(ny + 1);
  full << c, 1.0;
  const MatrixPath x = MatrixPath::generate(g, [&](int k) { return MatrixXd(sol[k].topRows(nx) * full); });
  const MatrixPath y = MatrixPath::generate(g, [&](int k) { return MatrixXd(sol[k].bottomRows(ny) * full); });
  return {x, y};
}

}  // namespace gsn::testing
