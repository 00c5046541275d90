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


#pragma once

#include "gsn/core.hpp"
#include "gsn/gfbsde_problem.hpp"
#include "gsn/graphon.hpp"
#include "gsn/report.hpp"

#include <array>
#include <limits>
#include <string>
#include <vector>

namespace gsn {

struct Dims {
  int n1 = 1, n2 = 1, m1 = 1, m2 = 1;
};

/// Follower coefficients. Q and G act on U = (X, GX, X^l), blocks (n1, n1, n2).
struct FollowerSpec {
  MatrixPath A, B, C, D, E, F, b, sig, Q, R;
  MatrixXd G;
};

/// Leader coefficients. Q and G act on U = (X^l, M), blocks (n2, n1).
struct LeaderSpec {
  MatrixPath A, B, C, D, E, F, b, sig, Q, R;
  MatrixXd G;
};

struct GameSpec {
  Dims dims;
  TimeGrid grid;
  FollowerSpec f;
  LeaderSpec l;
  GraphonGrid graphon;
  std::vector<VectorXd> x0f_mean;  // one shared entry or one per index
  MatrixXd x0f_cov;
  VectorXd x0l_mean;
  MatrixXd x0l_cov;
  double eps_R = 1e-8;

  int M() const { return graphon.M(); }
  const VectorXd& x0f(int u) const { return x0f_mean.size() == 1 ? x0f_mean[0] : x0f_mean[u]; }

  /// Offsets of the follower blocks (X, GX, X^l).
  std::array<int, 4> fblocks() const { return {0, dims.n1, 2 * dims.n1, 2 * dims.n1 + dims.n2}; }
  /// Offsets of the leader blocks (X^l, M).
  std::array<int, 3> lblocks() const { return {0, dims.n2, dims.n2 + dims.n1}; }

  MatrixPath Qf(int i, int j) const { return block_path(f.Q, fblocks(), i, j); }
  MatrixXd Gf(int i, int j) const { return block(f.G, fblocks(), i, j); }
  MatrixPath Ql(int i, int j) const { return block_path(l.Q, lblocks(), i, j); }
  MatrixXd Gl(int i, int j) const { return block(l.G, lblocks(), i, j); }

  /// Zero spec of the given shape with Rf = Rl = I and x0 = 0.
  static GameSpec zeros(const Dims& d, const TimeGrid& grid, const GraphonGrid& G) {
    GameSpec s;
    s.dims = d;
    s.grid = grid;
    s.graphon = G;
    const int nf = 2 * d.n1 + d.n2, nl = d.n1 + d.n2;
    auto z = [&](Index r, Index c) { return MatrixPath(grid, r, c); };
    s.f = {z(d.n1, d.n1), z(d.n1, d.m1), z(d.n1, d.n1), z(d.n1, d.n1), z(d.n1, d.m1), z(d.n1, d.n1),
           z(d.n1, 1), z(d.n1, 1), z(nf, nf), MatrixPath::constant(grid, MatrixXd::Identity(d.m1, d.m1)),
           MatrixXd::Zero(nf, nf)};
    s.l = {z(d.n2, d.n2), z(d.n2, d.m2), z(d.n2, d.n1), z(d.n2, d.n2), z(d.n2, d.m2), z(d.n2, d.n1),
           z(d.n2, 1), z(d.n2, 1), z(nl, nl), MatrixPath::constant(grid, MatrixXd::Identity(d.m2, d.m2)),
           MatrixXd::Zero(nl, nl)};
    s.x0f_mean = {VectorXd::Zero(d.n1)};
    s.x0f_cov = MatrixXd::Zero(d.n1, d.n1);
    s.x0l_mean = VectorXd::Zero(d.n2);
    s.x0l_cov = MatrixXd::Zero(d.n2, d.n2);
    return s;
  }

 private:
  template <std::size_t K>
  static MatrixXd block(const MatrixXd& m, const std::array<int, K>& off, int i, int j) {
    return m.block(off[i], off[j], off[i + 1] - off[i], off[j + 1] - off[j]);
  }
  template <std::size_t K>
  static MatrixPath block_path(const MatrixPath& p, const std::array<int, K>& off, int i, int j) {
    return MatrixPath::generate(p.grid(), [&](int k) { return block(p[k], off, i, j); }, p.interp());
  }
};

namespace detail {

inline void check_shape(Report& r, const std::string& name, const MatrixPath& p, const TimeGrid& grid,
                        Index rows, Index cols) {
  if (p.empty() || p.rows() != rows || p.cols() != cols || !(p.grid() == grid) ||
      static_cast<int>(p.size()) != grid.nodes()) {
    r.fail({{"name", name}, {"problem", "shape"}, {"expected", {rows, cols}}, {"got", {p.rows(), p.cols()}}});
    return;
  }
  for (std::size_t k = 0; k < p.size(); ++k)
    if (!p[k].allFinite() || p[k].rows() != rows || p[k].cols() != cols) {
      r.fail({{"name", name}, {"problem", "non-finite or ragged"}, {"node", k}});
      return;
    }
}

/// Symmetric-PSD test along a path; returns the smallest eigenvalue seen.
inline double check_psd_path(Report& r, const std::string& name, const MatrixPath& p, double floor) {
  double lo = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double asym = (p[k] - p[k].transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-10 * (1.0 + p[k].cwiseAbs().maxCoeff())) {
      r.fail({{"name", name}, {"problem", "not symmetric"}, {"node", k}, {"asymmetry", asym}});
      return lo;
    }
    const double e = linalg::min_eig_sym(p[k]);
    if (e < lo) lo = e;
    if (e < floor) {
      r.fail({{"name", name}, {"problem", "eigenvalue below floor"}, {"node", k}, {"min_eig", e}, {"floor", floor}});
      return lo;
    }
  }
  return lo;
}

inline double total_variation(const MatrixPath& p) {
  double tv = 0.0;
  for (std::size_t k = 1; k < p.size(); ++k) tv += (p[k] - p[k - 1]).cwiseAbs().maxCoeff();
  return tv;
}

}  // namespace detail

/// Dimensional consistency, finiteness, PSD of Q/G weights, PD of Rf.
inline Report validate_A1(const GameSpec& s) {
  Report r;
  r.check = "A1";
  const auto& d = s.dims;
  const auto& g = s.grid;
  const int nf = 2 * d.n1 + d.n2, nl = d.n1 + d.n2;
  using detail::check_shape;
  check_shape(r, "Af", s.f.A, g, d.n1, d.n1);
  check_shape(r, "Bf", s.f.B, g, d.n1, d.m1);
  check_shape(r, "Cf", s.f.C, g, d.n1, d.n1);
  check_shape(r, "Df", s.f.D, g, d.n1, d.n1);
  check_shape(r, "Ef", s.f.E, g, d.n1, d.m1);
  check_shape(r, "Ff", s.f.F, g, d.n1, d.n1);
  check_shape(r, "bf", s.f.b, g, d.n1, 1);
  check_shape(r, "sigf", s.f.sig, g, d.n1, 1);
  check_shape(r, "Qf", s.f.Q, g, nf, nf);
  check_shape(r, "Rf", s.f.R, g, d.m1, d.m1);
  check_shape(r, "Al", s.l.A, g, d.n2, d.n2);
  check_shape(r, "Bl", s.l.B, g, d.n2, d.m2);
  check_shape(r, "Cl", s.l.C, g, d.n2, d.n1);
  check_shape(r, "Dl", s.l.D, g, d.n2, d.n2);
  check_shape(r, "El", s.l.E, g, d.n2, d.m2);
  check_shape(r, "Fl", s.l.F, g, d.n2, d.n1);
  check_shape(r, "bl", s.l.b, g, d.n2, 1);
  check_shape(r, "sigl", s.l.sig, g, d.n2, 1);
  check_shape(r, "Ql", s.l.Q, g, nl, nl);
  check_shape(r, "Rl", s.l.R, g, d.m2, d.m2);
  if (s.f.G.rows() != nf || s.f.G.cols() != nf || !s.f.G.allFinite())
    r.fail({{"name", "Gf"}, {"problem", "shape or non-finite"}});
  if (s.l.G.rows() != nl || s.l.G.cols() != nl || !s.l.G.allFinite())
    r.fail({{"name", "Gl"}, {"problem", "shape or non-finite"}});
  if (!(s.x0f_mean.size() == 1 || static_cast<int>(s.x0f_mean.size()) == s.M()))
    r.fail({{"name", "x0_follower"}, {"problem", "need one mean or one per graphon index"}});
  for (const auto& m : s.x0f_mean)
    if (m.size() != d.n1 || !m.allFinite()) r.fail({{"name", "x0_follower"}, {"problem", "dimension"}});
  if (s.x0l_mean.size() != d.n2) r.fail({{"name", "x0_leader"}, {"problem", "dimension"}});
  if (!r.pass) return r;

  double margin = std::numeric_limits<double>::infinity();
  auto psd_const = [&](const std::string& name, const MatrixXd& m) {
    const MatrixPath one = MatrixPath::constant(TimeGrid(1.0, 1), m);
    margin = std::min(margin, detail::check_psd_path(r, name, one, -1e-10) + 1e-10);
  };
  margin = std::min(margin, detail::check_psd_path(r, "Qf", s.f.Q, -1e-10) + 1e-10);
  psd_const("Gf", s.f.G);
  margin = std::min(margin, detail::check_psd_path(r, "Rf", s.f.R, s.eps_R) - s.eps_R);
  margin = std::min(margin, detail::check_psd_path(r, "Ql", s.l.Q, -1e-10) + 1e-10);
  psd_const("Gl", s.l.G);
  margin = std::min(margin, detail::check_psd_path(r, "Rl", s.l.R, -1e-10) + 1e-10);
  psd_const("x0_follower_cov", s.x0f_cov);
  psd_const("x0_leader_cov", s.x0l_cov);
  r.margin = margin;
  // (A2) asks for continuity in time, which a grid cannot express; record TV only.
  r.values["total_variation"] = {{"Ef", detail::total_variation(s.f.E)},
                                 {"Rf", detail::total_variation(s.f.R)},
                                 {"El", detail::total_variation(s.l.E)},
                                 {"Rl", detail::total_variation(s.l.R)}};
  return r;
}

/// [Bf; Ef] Rf^{-1} [Bf; Ef]^T at node k.
inline MatrixXd follower_control_gram(const GameSpec& s, int k) {
  const int n1 = s.dims.n1;
  MatrixXd BE(2 * n1, s.dims.m1);
  BE << s.f.B[k], s.f.E[k];
  return BE * linalg::spd_solve(s.f.R[k], BE.transpose());
}

/// Symmetrized grid operator of x -> int x^T Gm (Gx): entries w_u w_v G(u,v) Gm.
inline MatrixXd graphon_quadratic_operator(const GraphonGrid& G, const MatrixXd& Gm) {
  const int M = G.M();
  const Index n = Gm.rows();
  MatrixXd op(n * M, n * M);
  for (int u = 0; u < M; ++u)
    for (int v = 0; v < M; ++v)
      op.block(u * n, v * n, n, n) = (G.weights()(u) * G.weights()(v) * G(u, v)) * Gm;
  return linalg::sym(op);
}

/// Monotonicity-type condition on the follower coefficients.
inline Report validate_A3(const GameSpec& s) {
  Report r;
  r.check = "A3";
  double K = std::numeric_limits<double>::infinity();
  double sup = 0.0;
  const MatrixPath Q11 = s.Qf(0, 0), Q12 = s.Qf(0, 1);
  for (int k = 0; k <= s.grid.N; ++k) {
    K = std::min({K, linalg::min_eig_sym(Q11[k]), linalg::min_eig_sym(follower_control_gram(s, k))});
    sup = std::max(sup, linalg::spectral_norm(Q12[k]) + linalg::spectral_norm(s.f.C[k]) +
                            linalg::spectral_norm(s.f.F[k]));
  }
  const double value = (1.0 + 3.0 * sup_norm(s.graphon)) * sup;
  const double K2 = 0.5 * value;
  r.values["K"] = K;
  r.values["K2"] = K2;
  r.values["condition_value"] = value;
  r.margin = K - K2;
  if (!(value < 2.0 * K))
    r.fail({{"condition", "coupling bound"}, {"value", value}, {"two_K", 2.0 * K}});
  const double qmin = linalg::min_eig_sym(graphon_quadratic_operator(s.graphon, s.Gf(0, 1)));
  r.values["terminal_form_min_eig"] = qmin;
  if (qmin < -1e-10) r.fail({{"condition", "terminal quadratic form"}, {"min_eig", qmin}});
  return r;
}

inline Report validate_A4(const GameSpec& s) {
  Report r;
  r.check = "A4";
  const RowSumCheck rs = check_constant_row_sum(s.graphon);
  r.values["c"] = rs.c;
  r.values["max_row_sum_deviation"] = rs.max_deviation;
  r.margin = 1e-10 - rs.max_deviation;
  if (!rs.pass)
    r.fail({{"condition", "row sums not constant"}, {"max_deviation", rs.max_deviation},
            {"index", rs.worst_index}});
  return r;
}

/// The followers' Hamiltonian system written as a graphon-aggregated FBSDE,
/// given the leader's mean state path.
inline GfbsdeProblem build_follower_gfbsde(const GameSpec& s, const MatrixPath& leader_mean) {
  const int n1 = s.dims.n1;
  const auto& g = s.grid;
  if (leader_mean.rows() != s.dims.n2 || leader_mean.cols() != 1 || static_cast<int>(leader_mean.size()) != g.nodes())
    throw std::invalid_argument("build_follower_gfbsde: leader mean path has wrong shape");
  for (int k = 0; k <= g.N; ++k)
    if (linalg::min_eig_sym(s.f.R[k]) < s.eps_R)
      throw Error("build_follower_gfbsde", "Rf singular at node " + std::to_string(k));
  GfbsdeProblem p = GfbsdeProblem::zeros(n1, g, s.graphon);
  auto& c = p.coeffs[0];
  const MatrixPath Q11 = s.Qf(0, 0), Q12 = s.Qf(0, 1), Q13 = s.Qf(0, 2);
  for (int k = 0; k <= g.N; ++k) {
    const MatrixXd& B = s.f.B[k];
    const MatrixXd& E = s.f.E[k];
    const MatrixXd SB = linalg::spd_solve(s.f.R[k], B.transpose());
    const MatrixXd SE = linalg::spd_solve(s.f.R[k], E.transpose());
    c.A[0][0][k] = -Q11[k];
    c.A[0][1][k] = -s.f.A[k].transpose();
    c.A[0][2][k] = -s.f.D[k].transpose();
    c.B[0][k] = -Q12[k];
    c.A[1][0][k] = s.f.A[k];
    c.A[1][1][k] = -B * SB;
    c.A[1][2][k] = -B * SE;
    c.B[1][k] = s.f.C[k];
    c.A[2][0][k] = s.f.D[k];
    c.A[2][1][k] = -E * SB;
    c.A[2][2][k] = -E * SE;
    c.B[2][k] = s.f.F[k];
    c.b[k] = s.f.b[k];
    c.sig[k] = s.f.sig[k];
    c.g[k] = -Q13[k] * leader_mean[k];
  }
  c.g.set_interp(leader_mean.interp());
  c.G1 = s.Gf(0, 0);
  c.G2 = s.Gf(0, 1);
  c.h = s.Gf(0, 2) * leader_mean.back();
  p.x0_mean = s.x0f_mean;
  p.x0_cov = s.x0f_cov;
  return p;
}

}  // namespace gsn
