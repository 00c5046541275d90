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
#include "gsn/graphon.hpp"
#include "gsn/model.hpp"
#include "gsn/ode.hpp"

#include <string>
#include <vector>

namespace gsn {

/// Coefficients of the followers' closed-loop forward-backward system
///   dX = (A X + B phi + C GX + b) dt + (D X + E phi + F GX + sig) dW
///   phi' = H phi + I GX + g,   g = g0 + Gx xbar  (xbar = leader mean).
struct HattedCoefficients {
  MatrixPath A, B, C, D, E, F, H, I, b, sig, g0, Gx;

  MatrixPath ghat(const MatrixPath& xbar) const {
    return MatrixPath::generate(g0.grid(), [&](int k) { return MatrixXd(g0[k] + Gx[k] * xbar[k]); });
  }
};

struct FollowerPolicy {
  MatrixPath Kx, Kphi, Kagg, koff;
};

namespace detail {

/// Per-node pieces shared by the hatted coefficients and the feedback law.
struct FollowerNode {
  MatrixXd S_B, S_E;   // R^{-1} B^T, R^{-1} E^T
  MatrixXd RhatInvP;   // Rhat^{-1} P
};

inline FollowerNode follower_node(const GameSpec& s, const MatrixXd& P, int k, double eps) {
  const Index n = s.dims.n1;
  FollowerNode nd;
  nd.S_B = linalg::spd_solve(s.f.R[k], s.f.B[k].transpose());
  nd.S_E = linalg::spd_solve(s.f.R[k], s.f.E[k].transpose());
  const MatrixXd Rhat = MatrixXd::Identity(n, n) + P * s.f.E[k] * nd.S_E;
  if (linalg::min_singular(Rhat) < eps)
    throw Error("assemble_hatted", "Rhat singular at node " + std::to_string(k));
  nd.RhatInvP = Rhat.partialPivLu().solve(P);
  return nd;
}

}  // namespace detail

inline HattedCoefficients assemble_hatted(const GameSpec& s, const RiccatiSolution& rs) {
  const TimeGrid& grid = s.grid;
  const Index n = s.dims.n1;
  const MatrixPath Q12 = s.Qf(0, 1), Q13 = s.Qf(0, 2);
  HattedCoefficients h;
  auto mk = [&](Index r, Index c) { return MatrixPath(grid, r, c, Interp::Cubic); };
  h.A = mk(n, n), h.B = mk(n, n), h.C = mk(n, n), h.D = mk(n, n), h.E = mk(n, n), h.F = mk(n, n);
  h.H = mk(n, n), h.I = mk(n, n), h.b = mk(n, 1), h.sig = mk(n, 1), h.g0 = mk(n, 1), h.Gx = mk(n, s.dims.n2);
  for (int k = 0; k <= grid.N; ++k) {
    const MatrixXd& P = rs.P[k];
    const auto nd = detail::follower_node(s, P, k, s.eps_R);
    const MatrixXd &A = s.f.A[k], &B = s.f.B[k], &C = s.f.C[k], &D = s.f.D[k], &E = s.f.E[k], &F = s.f.F[k];
    const MatrixXd Dc = D - E * nd.S_B * P;                 // D - E S B^T P
    const MatrixXd W = nd.RhatInvP;                         // Rhat^{-1} P
    const MatrixXd L = -D.transpose() + P * B * nd.S_E;     // -D^T + P B S E^T
    h.A[k] = A - B * nd.S_B * P - B * nd.S_E * W * Dc;
    h.B[k] = -B * nd.S_B + B * nd.S_E * W * E * nd.S_B;
    h.C[k] = C - B * nd.S_E * W * F;
    h.b[k] = s.f.b[k] - B * nd.S_E * W * s.f.sig[k];
    h.D[k] = Dc - E * nd.S_E * W * Dc;
    h.E[k] = -E * nd.S_B + E * nd.S_E * W * E * nd.S_B;
    h.F[k] = F - E * nd.S_E * W * F;
    h.sig[k] = s.f.sig[k] - E * nd.S_E * W * s.f.sig[k];
    h.H[k] = -A.transpose() + P * B * nd.S_B - L * W * E * nd.S_B;
    h.I[k] = -Q12[k] - P * C + L * W * F;
    h.g0[k] = -P * s.f.b[k] + L * W * s.f.sig[k];
    h.Gx[k] = -Q13[k];
  }
  return h;
}

/// alpha = Kx X + Kphi phi + Kagg GX + koff.
inline FollowerPolicy follower_feedback(const GameSpec& s, const RiccatiSolution& rs) {
  const TimeGrid& grid = s.grid;
  const Index n = s.dims.n1, m = s.dims.m1;
  FollowerPolicy pol{MatrixPath(grid, m, n, Interp::Cubic), MatrixPath(grid, m, n, Interp::Cubic),
                     MatrixPath(grid, m, n, Interp::Cubic), MatrixPath(grid, m, 1, Interp::Cubic)};
  for (int k = 0; k <= grid.N; ++k) {
    const MatrixXd& P = rs.P[k];
    const auto nd = detail::follower_node(s, P, k, s.eps_R);
    const MatrixXd &B = s.f.B[k], &E = s.f.E[k];
    const MatrixXd& R = s.f.R[k];
    const MatrixXd Dc = s.f.D[k] - E * nd.S_B * P;
    pol.Kx[k] = -R.ldlt().solve(B.transpose() * P + E.transpose() * nd.RhatInvP * Dc);
    pol.Kphi[k] = -R.ldlt().solve(B.transpose() - E.transpose() * nd.RhatInvP * E * nd.S_B);
    pol.Kagg[k] = -R.ldlt().solve(E.transpose() * nd.RhatInvP * s.f.F[k]);
    pol.koff[k] = -R.ldlt().solve(E.transpose() * nd.RhatInvP * s.f.sig[k]);
  }
  return pol;
}

struct FixedPointOptions {
  double tol = 1e-10;
  int max_iter = 200;
  double damping = 0.5;
};

/// Deterministic part of the followers' equilibrium. Columns are indices.
struct FollowerSystemSolution {
  MatrixPath m;    // n1 x M, m^u = E[X^u]
  MatrixPath phi;  // n1 x M
  MatrixPath agg;  // n1 x M, (G m)^u
  std::vector<double> history;
  int iterations = 0;
};

/// Fixed point on the aggregate: phi backward and m forward given G m,
/// then re-aggregate. x0 holds one column per index.
inline FollowerSystemSolution solve_follower_fb_system(const HattedCoefficients& hc, const GraphonGrid& G,
                                                       const MatrixXd& x0, const MatrixXd& Gf12,
                                                       const MatrixXd& Gf13, const MatrixPath& xbar,
                                                       const FixedPointOptions& opt = {}) {
  const TimeGrid& grid = hc.A.grid();
  const Index n = hc.A.rows();
  const int M = G.M();
  if (x0.rows() != n || x0.cols() != M)
    throw std::invalid_argument("solve_follower_fb_system: x0 must be n1 x M");
  const MatrixPath g = hc.ghat(xbar);
  const MatrixXd ones = MatrixXd::Ones(1, M);
  const MatrixXd phiT_leader = Gf13 * xbar.back();

  auto sweep = [&](const MatrixPath& a, MatrixPath& phi, MatrixPath& m) {
    phi = integrate_matrix_ode(
        grid, [&](double t, const MatrixXd& y) { return MatrixXd(hc.H.at(t) * y + hc.I.at(t) * a.at(t) + g.at(t) * ones); },
        Gf12 * a.back() + phiT_leader * ones, Direction::Backward);
    m = integrate_matrix_ode(
        grid,
        [&](double t, const MatrixXd& y) {
          return MatrixXd(hc.A.at(t) * y + hc.B.at(t) * phi.at(t) + hc.C.at(t) * a.at(t) + hc.b.at(t) * ones);
        },
        x0, Direction::Forward);
  };
  auto aggregate_path = [&](const MatrixPath& m) {
    return MatrixPath::generate(grid, [&](int k) { return G.aggregate_cols(m[k]); });
  };

  FollowerSystemSolution sol;
  MatrixPath a = aggregate_path(MatrixPath::constant(grid, x0, Interp::Cubic));
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= opt.max_iter; ++it) {
    sweep(a, sol.phi, sol.m);
    const MatrixPath a_new = aggregate_path(sol.m);
    const double res = sup_diff(a_new, a);
    sol.history.push_back(res);
    sol.iterations = it;
    const bool damp = res > prev;
    for (int k = 0; k <= grid.N; ++k) a[k] = damp ? MatrixXd(a[k] + opt.damping * (a_new[k] - a[k])) : a_new[k];
    prev = res;
    if (res <= opt.tol) {
      sweep(a, sol.phi, sol.m);
      sol.agg = aggregate_path(sol.m);
      return sol;
    }
  }
  std::string hist;
  for (std::size_t i = 0; i < sol.history.size(); ++i) {
    if (i + 8 < sol.history.size() && i >= 4) continue;
    hist += (hist.empty() ? "" : ", ") + std::to_string(sol.history[i]);
  }
  throw Error("follower_fixed_point", "aggregate fixed point did not converge; residual history [" + hist + "]");
}

/// Follower first-order condition  R alpha + B^T p + E^T q  with
/// p = P X + phi and q = P (realized diffusion of X).
inline VectorXd follower_stationarity(const GameSpec& s, const MatrixXd& P, int k, const VectorXd& X,
                                      const VectorXd& alpha, const VectorXd& phi, const VectorXd& agg) {
  const VectorXd diff = s.f.D[k] * X + s.f.E[k] * alpha + s.f.F[k] * agg + s.f.sig[k];
  const VectorXd p = P * X + phi;
  const VectorXd q = P * diff;
  return s.f.R[k] * alpha + s.f.B[k].transpose() * p + s.f.E[k].transpose() * q;
}

/// q from the dW-coefficient matching, written out as in the derivation.
inline VectorXd follower_q(const GameSpec& s, const MatrixXd& P, int k, const VectorXd& X, const VectorXd& phi,
                           const VectorXd& agg) {
  const auto nd = detail::follower_node(s, P, k, s.eps_R);
  const MatrixXd& E = s.f.E[k];
  return nd.RhatInvP * ((s.f.D[k] - E * nd.S_B * P) * X - E * nd.S_B * phi + s.f.F[k] * agg + s.f.sig[k]);
}

}  // namespace gsn
