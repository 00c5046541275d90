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
#include "gsn/model.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace gsn {

enum class Direction { Forward, Backward };

using MatrixRhs = std::function<MatrixXd(double, const MatrixXd&)>;
using NodeHook = std::function<void(int, MatrixXd&)>;

/// Classical RK4 on the grid. `boundary` is the value at t_0 (forward) or
/// t_N (backward). `hook` runs on every newly produced node (and on the
/// boundary node) and may modify or reject it.
inline MatrixPath integrate_matrix_ode(const TimeGrid& grid, const MatrixRhs& rhs, const MatrixXd& boundary,
                                       Direction dir, const NodeHook& hook = {}) {
  MatrixPath out(grid, boundary.rows(), boundary.cols(), Interp::Cubic);
  const int N = grid.N;
  const double h = grid.h();
  int k = dir == Direction::Forward ? 0 : N;
  MatrixXd y = boundary;
  if (hook) hook(k, y);
  out[k] = y;
  for (int step = 0; step < N; ++step) {
    const double t = grid.t(k);
    const double dt = dir == Direction::Forward ? h : -h;
    const int next = dir == Direction::Forward ? k + 1 : k - 1;
    const double t1 = grid.t(next);
    const double tm = 0.5 * (t + t1);
    const MatrixXd k1 = rhs(t, y);
    const MatrixXd k2 = rhs(tm, y + (0.5 * dt) * k1);
    const MatrixXd k3 = rhs(tm, y + (0.5 * dt) * k2);
    const MatrixXd k4 = rhs(t1, y + dt * k3);
    y += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!y.allFinite())
      throw Error("integrate_matrix_ode", "non-finite value at node " + std::to_string(next));
    if (hook) hook(next, y);
    out[next] = y;
    k = next;
  }
  return out;
}

struct RiccatiOptions {
  double eps_R = 1e-8;
  double blowup_cap = 1e8;
};

struct RiccatiSolution {
  MatrixPath P;
  std::vector<double> min_singular;  // required-invertible factor (R-hat or I - P E), per node
  std::vector<double> min_eig_R;     // R + E^T P E, per node (standard form)
  double max_asymmetry = 0.0;        // before symmetrization
};

/// Standard-form stochastic LQ Riccati
///   P' + PA + A^T P + D^T P D + Q - L^T (R + E^T P E)^{-1} L = 0,  L = B^T P + E^T P D,
/// with P(T) = G.
inline RiccatiSolution solve_standard_riccati(const MatrixPath& A, const MatrixPath& B, const MatrixPath& D,
                                              const MatrixPath& E, const MatrixPath& Q, const MatrixPath& R,
                                              const MatrixXd& G, const RiccatiOptions& opt = {},
                                              const std::string& stage = "riccati_woodbury") {
  const TimeGrid& grid = A.grid();
  RiccatiSolution sol;
  sol.min_eig_R.assign(grid.nodes(), 0.0);
  auto rhs = [&](double t, const MatrixXd& P) {
    const MatrixXd a = A.at(t), b = B.at(t), d = D.at(t), e = E.at(t);
    const MatrixXd L = b.transpose() * P + e.transpose() * P * d;
    const MatrixXd K = R.at(t) + e.transpose() * P * e;
    const MatrixXd out = P * a + a.transpose() * P + d.transpose() * P * d + Q.at(t) -
                         L.transpose() * K.ldlt().solve(L);
    return MatrixXd(-out);
  };
  auto hook = [&](int k, MatrixXd& P) {
    sol.max_asymmetry = std::max(sol.max_asymmetry, (P - P.transpose()).cwiseAbs().maxCoeff());
    P = linalg::sym(P);
    const double e = linalg::min_eig_sym(R[k] + E[k].transpose() * P * E[k]);
    sol.min_eig_R[k] = e;
    if (e < opt.eps_R)
      throw Error(stage, "Riccati regularity lost at node " + std::to_string(k) + " (min eig of R+E'PE = " +
                             std::to_string(e) + ")");
  };
  sol.P = integrate_matrix_ode(grid, rhs, G, Direction::Backward, hook);
  return sol;
}

inline RiccatiSolution solve_follower_riccati_woodbury(const GameSpec& s, const RiccatiOptions& opt = {}) {
  RiccatiOptions o = opt;
  o.eps_R = std::max(opt.eps_R, s.eps_R);
  return solve_standard_riccati(s.f.A, s.f.B, s.f.D, s.f.E, s.Qf(0, 0), s.f.R, s.Gf(0, 0), o,
                                "follower_riccati_woodbury");
}

/// Follower Riccati in the form obtained by matching dt-coefficients:
///   P' + A^T P + PA - P B S B^T P + (D^T - P B S E^T) Rhat^{-1} P (D - E S B^T P) + Q11 = 0,
///   S = Rf^{-1},  Rhat = I + P E S E^T.
inline RiccatiSolution solve_follower_riccati_original(const GameSpec& s, const RiccatiOptions& opt = {}) {
  const TimeGrid& grid = s.grid;
  const MatrixPath Q11 = s.Qf(0, 0);
  const Index n = s.dims.n1;
  RiccatiSolution sol;
  sol.min_singular.assign(grid.nodes(), 0.0);
  auto rhs = [&](double t, const MatrixXd& P) {
    const MatrixXd A = s.f.A.at(t), B = s.f.B.at(t), D = s.f.D.at(t), E = s.f.E.at(t), R = s.f.R.at(t);
    const MatrixXd SB = R.ldlt().solve(B.transpose());
    const MatrixXd SE = R.ldlt().solve(E.transpose());
    const MatrixXd Rhat = MatrixXd::Identity(n, n) + P * E * SE;
    const MatrixXd inner = Rhat.partialPivLu().solve(P * (D - E * SB * P));
    const MatrixXd out = A.transpose() * P + P * A - P * B * SB * P +
                         (D.transpose() - P * B * SE) * inner + Q11.at(t);
    return MatrixXd(-out);
  };
  auto hook = [&](int k, MatrixXd& P) {
    sol.max_asymmetry = std::max(sol.max_asymmetry, (P - P.transpose()).cwiseAbs().maxCoeff());
    P = linalg::sym(P);
    const MatrixXd SE = linalg::spd_solve(s.f.R[k], s.f.E[k].transpose());
    const double sv = linalg::min_singular(MatrixXd::Identity(n, n) + P * s.f.E[k] * SE);
    sol.min_singular[k] = sv;
    if (sv < opt.eps_R)
      throw Error("follower_riccati_original",
                  "Rhat singular at node " + std::to_string(k) +
                      ": invertibility assumption of the follower feedback law violated");
  };
  sol.P = integrate_matrix_ode(grid, rhs, s.Gf(0, 0), Direction::Backward, hook);
  return sol;
}

/// Backward solve of  P' = C + D P - P A - P B P,  P(T) = G  (no symmetry).
/// With (A, B, C, D) = (Ahat + c Chat, Bhat, c Ihat, Hhat) this is the
/// leader's aggregate Riccati  P' + P(Ahat + c Chat) - Hhat P + P Bhat P - c Ihat = 0.
inline MatrixPath integrate_asymmetric_riccati(const MatrixPath& A, const MatrixPath& B, const MatrixPath& C,
                                               const MatrixPath& D, const MatrixXd& G,
                                               const RiccatiOptions& opt = {},
                                               const std::string& stage = "asymmetric_riccati") {
  auto rhs = [&](double t, const MatrixXd& P) {
    return MatrixXd(C.at(t) + D.at(t) * P - P * A.at(t) - P * B.at(t) * P);
  };
  auto hook = [&](int k, MatrixXd& P) {
    if (P.cwiseAbs().maxCoeff() > opt.blowup_cap)
      throw Error(stage, "asymmetric Riccati escape at node " + std::to_string(k));
  };
  try {
    return integrate_matrix_ode(A.grid(), rhs, G, Direction::Backward, hook);
  } catch (const Error& e) {
    if (e.stage() == stage) throw;
    throw Error(stage, std::string("asymmetric Riccati escape (") + e.what() + ")");
  }
}

/// Linear FBSDE / stochastic LQ system in the "tilde" form
///   dX = (A X + B Y + C Z + b) dt + (D X + C^T Y + E Z + sig) dW
///   dY = (Q X - A^T Y - D^T Z + g) dt + Z dW,   X_0 = x0,  Y_T = F X_T
/// with control  alpha = H Y + I Z.
struct TildeSystem {
  MatrixPath A, B, C, D, E, Q, H, I, b, sig, g;
  MatrixXd F;
  VectorXd x0;
  Index dim() const { return A.rows(); }
};

/// P' + P A + A^T P + P B P + (P C + D^T)(I - P E)^{-1} P (D + C^T P) - Q = 0,  P(T) = F.
inline RiccatiSolution solve_augmented_riccati(const TildeSystem& ts, const RiccatiOptions& opt = {},
                                               const std::string& stage = "augmented_riccati") {
  const Index n = ts.dim();
  const MatrixXd Id = MatrixXd::Identity(n, n);
  RiccatiSolution sol;
  sol.min_singular.assign(ts.A.grid().nodes(), 0.0);
  auto rhs = [&](double t, const MatrixXd& P) {
    const MatrixXd A = ts.A.at(t), C = ts.C.at(t), D = ts.D.at(t);
    const MatrixXd inner = (Id - P * ts.E.at(t)).partialPivLu().solve(P * (D + C.transpose() * P));
    return MatrixXd(-(P * A + A.transpose() * P + P * ts.B.at(t) * P + (P * C + D.transpose()) * inner -
                      ts.Q.at(t)));
  };
  auto hook = [&](int k, MatrixXd& P) {
    sol.max_asymmetry = std::max(sol.max_asymmetry, (P - P.transpose()).cwiseAbs().maxCoeff());
    P = linalg::sym(P);
    const double sv = linalg::min_singular(Id - P * ts.E[k]);
    sol.min_singular[k] = sv;
    if (sv < opt.eps_R)
      throw Error(stage, "augmented invertibility violated at node " + std::to_string(k) +
                             " (I - P E singular, so Z cannot be recovered)");
  };
  sol.P = integrate_matrix_ode(ts.A.grid(), rhs, ts.F, Direction::Backward, hook);
  return sol;
}

/// Linear two-point boundary problem
///   x' = A x + B y + f,  y' = C x + D y + g,  x(0) = x0,  y(T) = G x(T) + h,
/// solved through y = Psi x + zeta.
struct AffineBvp {
  MatrixPath A, B, C, D, f, g;
  MatrixXd G;
  VectorXd h, x0;
};

struct AffineBvpSolution {
  MatrixPath Psi, zeta, x, y;
};

/// Decoupling field Psi of the problem (depends on A, B, C, D, G only).
inline MatrixPath affine_bvp_field(const AffineBvp& p, const RiccatiOptions& opt = {},
                                   const std::string& stage = "affine_bvp") {
  return integrate_asymmetric_riccati(p.A, p.B, p.C, p.D, p.G, opt, stage);
}

/// Solve with a precomputed decoupling field.
inline AffineBvpSolution solve_affine_bvp(const AffineBvp& p, const MatrixPath& field) {
  const TimeGrid& grid = p.A.grid();
  AffineBvpSolution s;
  s.Psi = field;
  const MatrixPath& Psi = s.Psi;
  s.zeta = integrate_matrix_ode(
      grid,
      [&](double t, const MatrixXd& z) {
        const MatrixXd Ps = Psi.at(t);
        return MatrixXd((p.D.at(t) - Ps * p.B.at(t)) * z + p.g.at(t) - Ps * p.f.at(t));
      },
      p.h, Direction::Backward);
  s.x = integrate_matrix_ode(
      grid,
      [&](double t, const MatrixXd& x) {
        const MatrixXd b = p.B.at(t);
        return MatrixXd((p.A.at(t) + b * Psi.at(t)) * x + b * s.zeta.at(t) + p.f.at(t));
      },
      p.x0, Direction::Forward);
  s.y = MatrixPath::generate(grid, [&](int k) { return MatrixXd(Psi[k] * s.x[k] + s.zeta[k]); });
  return s;
}

inline AffineBvpSolution solve_affine_bvp(const AffineBvp& p, const RiccatiOptions& opt = {},
                                          const std::string& stage = "affine_bvp") {
  return solve_affine_bvp(p, affine_bvp_field(p, opt, stage));
}

}  // namespace gsn
