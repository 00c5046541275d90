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
#include "gsn/follower.hpp"
#include "gsn/graphon.hpp"
#include "gsn/model.hpp"
#include "gsn/ode.hpp"
#include "gsn/report.hpp"
#include "gsn/rng.hpp"

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

namespace gsn {

/// Population-level two-point problem under constant row sums c:
///   M' = A M + B N + b,   N' = C M + D N + g0 + Gx xbar,
///   M(0) = M0,            N(T) = GT M(T) + GTx xbar(T).
struct FbodeCoefficients {
  MatrixPath A, B, C, D, b, g0, Gx;
  MatrixXd GT, GTx;
  double c = 0.0;

  MatrixPath g(const MatrixPath& xbar) const {
    return MatrixPath::generate(g0.grid(), [&](int k) { return MatrixXd(g0[k] + Gx[k] * xbar[k]); });
  }
};

inline FbodeCoefficients aggregate_follower_system(const HattedCoefficients& h, double c, const MatrixXd& Gf12,
                                                   const MatrixXd& Gf13) {
  FbodeCoefficients fb;
  const TimeGrid& grid = h.A.grid();
  fb.A = MatrixPath::generate(grid, [&](int k) { return MatrixXd(h.A[k] + c * h.C[k]); });
  fb.B = h.B;
  fb.C = MatrixPath::generate(grid, [&](int k) { return MatrixXd(c * h.I[k]); });
  fb.D = h.H;
  fb.b = h.b;
  fb.g0 = h.g0;
  fb.Gx = h.Gx;
  fb.GT = c * Gf12;
  fb.GTx = Gf13;
  fb.c = c;
  return fb;
}

inline FbodeCoefficients aggregate_follower_system(const GameSpec& s, const HattedCoefficients& h) {
  const RowSumCheck rs = check_constant_row_sum(s.graphon);
  if (!rs.pass)
    throw Error("aggregation", "leader aggregation requires constant row sums (max row-sum deviation " +
                                   std::to_string(rs.max_deviation) + " at index " +
                                   std::to_string(rs.worst_index) + ")");
  return aggregate_follower_system(h, rs.c, s.Gf(0, 1), s.Gf(0, 2));
}

/// P' + P (Ahat + c Chat) - Hhat P + P Bhat P - c Ihat = 0,  P(T) = c Gf12.
inline MatrixPath solve_leader_asymmetric_riccati(const FbodeCoefficients& fb, const RiccatiOptions& opt = {}) {
  return integrate_asymmetric_riccati(fb.A, fb.B, fb.C, fb.D, fb.GT, opt, "leader_asymmetric_riccati");
}

struct AggregateReduction {
  MatrixPath Phat, Nl, Mhat, Nhat;
  double residual = 0.0;
};

inline AffineBvp fbode_bvp(const FbodeCoefficients& fb, const VectorXd& M0, const MatrixPath& xbar) {
  return AffineBvp{fb.A, fb.B, fb.C, fb.D, fb.b, fb.g(xbar), fb.GT, fb.GTx * xbar.back(), M0};
}

/// Defect of (M, N) in the two-point problem: each equation is re-integrated
/// with the other component held fixed.
inline double fbode_residual(const FbodeCoefficients& fb, const VectorXd& M0, const MatrixPath& xbar,
                             const MatrixPath& M, const MatrixPath& N) {
  const TimeGrid& grid = M.grid();
  const MatrixPath g = fb.g(xbar);
  const MatrixPath Mc = integrate_matrix_ode(
      grid, [&](double t, const MatrixXd& y) { return MatrixXd(fb.A.at(t) * y + fb.B.at(t) * N.at(t) + fb.b.at(t)); },
      M0, Direction::Forward);
  const MatrixPath Nc = integrate_matrix_ode(
      grid, [&](double t, const MatrixXd& y) { return MatrixXd(fb.C.at(t) * M.at(t) + fb.D.at(t) * y + g.at(t)); },
      fb.GT * M.back() + fb.GTx * xbar.back(), Direction::Backward);
  return std::max(sup_diff(Mc, M), sup_diff(Nc, N));
}

/// N = Phat M + Nl: Nl backward, then M forward, then the ansatz is checked.
inline AggregateReduction reduce_via_asymmetric_riccati(const FbodeCoefficients& fb, const MatrixPath& Phat,
                                                        const VectorXd& M0, const MatrixPath& xbar,
                                                        double tol = 1e-8) {
  const AffineBvpSolution s = solve_affine_bvp(fbode_bvp(fb, M0, xbar), Phat);
  AggregateReduction r{Phat, s.zeta, s.x, s.y, 0.0};
  r.residual = fbode_residual(fb, M0, xbar, r.Mhat, r.Nhat);
  if (!(r.residual <= tol))
    throw Error("leader_reduction", "ansatz verification failed: residual " + std::to_string(r.residual));
  return r;
}

/// Blocks of the leader's augmented state (Mhat, E[X^l], X^l - E[X^l]) and
/// doubled control (E[alpha], alpha - E[alpha]), before any reduction.
struct LeaderHatted {
  MatrixPath A, B, C, D, E, F, Q, R, b, sig, g0, Gx;
  MatrixXd G, H, U, V;  // U, V: state and control selectors
  VectorXd x0;
};

inline MatrixXd leader_state_selector(int n1, int n2) {
  MatrixXd U = MatrixXd::Zero(n2 + n1, n1 + 2 * n2);
  U.block(0, n1, n2, n2).setIdentity();
  U.block(0, n1 + n2, n2, n2).setIdentity();
  U.block(n2, 0, n1, n1).setIdentity();
  return U;
}

inline LeaderHatted build_leader_hatted(const GameSpec& s, const FbodeCoefficients& fb, const MatrixPath& Phat,
                                        const VectorXd& M0) {
  const int n1 = s.dims.n1, n2 = s.dims.n2, m2 = s.dims.m2;
  const int d = n1 + 2 * n2;
  const TimeGrid& grid = s.grid;
  LeaderHatted L;
  L.U = leader_state_selector(n1, n2);
  L.V.resize(m2, 2 * m2);
  L.V << MatrixXd::Identity(m2, m2), MatrixXd::Identity(m2, m2);
  auto gen = [&](auto f) { return MatrixPath::generate(grid, f); };
  L.A = gen([&](int k) {
    MatrixXd a = MatrixXd::Zero(d, d);
    a.block(0, 0, n1, n1) = fb.A[k] + fb.B[k] * Phat[k];
    a.block(n1, 0, n2, n1) = s.l.C[k];
    a.block(n1, n1, n2, n2) = s.l.A[k];
    a.block(n1 + n2, n1 + n2, n2, n2) = s.l.A[k];
    return a;
  });
  L.B = gen([&](int k) {
    MatrixXd b = MatrixXd::Zero(d, n1);
    b.topRows(n1) = fb.B[k];
    return b;
  });
  L.C = gen([&](int k) {
    MatrixXd c = MatrixXd::Zero(d, 2 * m2);
    c.block(n1, 0, n2, m2) = s.l.B[k];
    c.block(n1 + n2, m2, n2, m2) = s.l.B[k];
    return c;
  });
  L.D = gen([&](int k) {
    MatrixXd m = MatrixXd::Zero(d, d);
    m.block(n1 + n2, 0, n2, n1) = s.l.F[k];
    m.block(n1 + n2, n1, n2, n2) = s.l.D[k];
    m.block(n1 + n2, n1 + n2, n2, n2) = s.l.D[k];
    return m;
  });
  L.E = gen([&](int k) {
    MatrixXd e = MatrixXd::Zero(d, 2 * m2);
    e.block(n1 + n2, 0, n2, m2) = s.l.E[k];
    e.block(n1 + n2, m2, n2, m2) = s.l.E[k];
    return e;
  });
  L.F = gen([&](int k) { return MatrixXd(fb.D[k] - Phat[k] * fb.B[k]); });
  L.Q = gen([&](int k) { return MatrixXd(L.U.transpose() * s.l.Q[k] * L.U); });
  L.R = gen([&](int k) { return MatrixXd(L.V.transpose() * s.l.R[k] * L.V); });
  L.b = gen([&](int k) {
    MatrixXd b = MatrixXd::Zero(d, 1);
    b.topRows(n1) = fb.b[k];
    b.block(n1, 0, n2, 1) = s.l.b[k];
    return b;
  });
  L.sig = gen([&](int k) {
    MatrixXd v = MatrixXd::Zero(d, 1);
    v.bottomRows(n2) = s.l.sig[k];
    return v;
  });
  L.g0 = gen([&](int k) { return MatrixXd(fb.g0[k] - Phat[k] * fb.b[k]); });
  L.Gx = fb.Gx;
  L.G = L.U.transpose() * s.l.G * L.U;
  L.H = MatrixXd::Zero(n1, d);
  L.H.block(0, n1, n1, n2) = fb.GTx;
  L.x0 = VectorXd::Zero(d);
  L.x0.head(n1) = M0;
  L.x0.segment(n1, n2) = s.x0l_mean;
  return L;
}

/// Fluctuation part of the leader problem: x~ = X^l - E[X^l], alpha~ = alpha - E[alpha].
inline TildeSystem build_fluctuation_tilde(const GameSpec& s) {
  const TimeGrid& grid = s.grid;
  const int n2 = s.dims.n2, m2 = s.dims.m2;
  auto gen = [&](auto f) { return MatrixPath::generate(grid, f); };
  for (int k = 0; k <= grid.N; ++k)
    if (linalg::min_eig_sym(s.l.R[k]) < s.eps_R)
      throw Error("leader_tilde", "Rl must be positive definite (node " + std::to_string(k) + ")");
  auto RinvB = [&](int k) { return linalg::spd_solve(s.l.R[k], s.l.B[k].transpose()); };
  auto RinvE = [&](int k) { return linalg::spd_solve(s.l.R[k], s.l.E[k].transpose()); };
  const MatrixPath Q11 = s.Ql(0, 0);
  TildeSystem ts;
  ts.A = gen([&](int k) { return s.l.A[k]; });
  ts.B = gen([&](int k) { return MatrixXd(-s.l.B[k] * RinvB(k)); });
  ts.C = gen([&](int k) { return MatrixXd(-s.l.B[k] * RinvE(k)); });
  ts.D = gen([&](int k) { return s.l.D[k]; });
  ts.E = gen([&](int k) { return MatrixXd(-s.l.E[k] * RinvE(k)); });
  ts.Q = gen([&](int k) { return MatrixXd(-Q11[k]); });
  ts.H = gen([&](int k) { return MatrixXd(-RinvB(k)); });
  ts.I = gen([&](int k) { return MatrixXd(-RinvE(k)); });
  ts.b = MatrixPath(grid, n2, 1, Interp::Cubic);
  ts.sig = MatrixPath(grid, n2, 1, Interp::Cubic);
  ts.g = MatrixPath(grid, n2, 1, Interp::Cubic);
  ts.F = s.Gl(0, 0);
  ts.x0 = VectorXd::Zero(n2);
  (void)m2;
  return ts;
}

/// Pieces of the mean problem after the Ito term of the fluctuation cost is
/// absorbed and the control is shifted by Rbar^{-1}(Sbar xi + rbar).
struct LeaderMeanData {
  MatrixPath Rbar, Sbar, rbar;  // m2 x m2, m2 x (n1+n2), m2 x 1
};

inline LeaderMeanData leader_mean_data(const GameSpec& s, const MatrixPath& Pl) {
  const int n1 = s.dims.n1, n2 = s.dims.n2;
  auto gen = [&](auto f) { return MatrixPath::generate(s.grid, f); };
  auto Sx = [&](int k) {
    MatrixXd m(n2, n1 + n2);
    m << s.l.F[k], s.l.D[k];
    return m;
  };
  LeaderMeanData d;
  d.Rbar = gen([&](int k) { return MatrixXd(s.l.R[k] + s.l.E[k].transpose() * Pl[k] * s.l.E[k]); });
  d.Sbar = gen([&](int k) { return MatrixXd(s.l.E[k].transpose() * Pl[k] * Sx(k)); });
  d.rbar = gen([&](int k) { return MatrixXd(s.l.E[k].transpose() * Pl[k] * s.l.sig[k]); });
  return d;
}

/// Mean part: X~ = (xi, chi) with xi = (Mhat, E[X^l]) and chi = -psi,
/// Y~ = (y, Nl), control v.
inline TildeSystem build_mean_tilde(const GameSpec& s, const FbodeCoefficients& fb, const MatrixPath& Phat,
                                    const MatrixPath& Pl, const VectorXd& M0) {
  const int n1 = s.dims.n1, n2 = s.dims.n2, m2 = s.dims.m2;
  const int nx = n1 + n2, d = nx + n1;
  const TimeGrid& grid = s.grid;
  auto gen = [&](auto f) { return MatrixPath::generate(grid, f); };
  const LeaderMeanData md = leader_mean_data(s, Pl);
  MatrixXd J = MatrixXd::Zero(nx, nx);  // U = J xi
  J.block(0, n1, n2, n2).setIdentity();
  J.block(n2, 0, n1, n1).setIdentity();
  auto Sx = [&](int k) {
    MatrixXd m(n2, nx);
    m << s.l.F[k], s.l.D[k];
    return m;
  };
  auto Cc = [&](int k) {
    MatrixXd c = MatrixXd::Zero(nx, m2);
    c.bottomRows(n2) = s.l.B[k];
    return c;
  };
  auto Acal = [&](int k) {
    MatrixXd a = MatrixXd::Zero(nx, nx);
    a.block(0, 0, n1, n1) = fb.A[k] + fb.B[k] * Phat[k];
    a.block(n1, 0, n2, n1) = s.l.C[k];
    a.block(n1, n1, n2, n2) = s.l.A[k];
    return MatrixXd(a - Cc(k) * md.Rbar[k].ldlt().solve(md.Sbar[k]));
  };
  auto Qcal = [&](int k) {
    const MatrixXd Qbar = J.transpose() * s.l.Q[k] * J + Sx(k).transpose() * Pl[k] * Sx(k);
    return MatrixXd(Qbar - md.Sbar[k].transpose() * md.Rbar[k].ldlt().solve(md.Sbar[k]));
  };
  auto qcal = [&](int k) {
    const MatrixXd qbar = Sx(k).transpose() * Pl[k] * s.l.sig[k];
    return MatrixXd(qbar - md.Sbar[k].transpose() * md.Rbar[k].ldlt().solve(md.rbar[k]));
  };
  TildeSystem ts;
  ts.A = gen([&](int k) {
    MatrixXd a = MatrixXd::Zero(d, d);
    a.topLeftCorner(nx, nx) = Acal(k);
    a.bottomRightCorner(n1, n1) = -(fb.D[k] - Phat[k] * fb.B[k]).transpose();
    return a;
  });
  ts.B = gen([&](int k) {
    MatrixXd b = MatrixXd::Zero(d, d);
    b.topLeftCorner(nx, nx) = -Cc(k) * md.Rbar[k].ldlt().solve(Cc(k).transpose());
    b.block(0, nx, n1, n1) = fb.B[k];
    b.block(nx, 0, n1, n1) = fb.B[k].transpose();
    return b;
  });
  ts.C = MatrixPath(grid, d, d, Interp::Cubic);
  ts.D = MatrixPath(grid, d, d, Interp::Cubic);
  ts.E = MatrixPath(grid, d, d, Interp::Cubic);
  ts.Q = gen([&](int k) {
    MatrixXd q = MatrixXd::Zero(d, d);
    q.topLeftCorner(nx, nx) = -Qcal(k);
    q.block(nx, n1, n1, n2) = fb.Gx[k];
    q.block(n1, nx, n2, n1) = fb.Gx[k].transpose();
    return q;
  });
  ts.H = gen([&](int k) {
    MatrixXd h = MatrixXd::Zero(m2, d);
    h.leftCols(nx) = -md.Rbar[k].ldlt().solve(Cc(k).transpose());
    return h;
  });
  ts.I = MatrixPath(grid, m2, d, Interp::Cubic);
  ts.b = gen([&](int k) {
    MatrixXd b = MatrixXd::Zero(d, 1);
    b.topRows(n1) = fb.b[k];
    b.block(n1, 0, n2, 1) = s.l.b[k] - s.l.B[k] * md.Rbar[k].ldlt().solve(md.rbar[k]);
    return b;
  });
  ts.sig = MatrixPath(grid, d, 1, Interp::Cubic);
  ts.g = gen([&](int k) {
    MatrixXd g(d, 1);
    g.topRows(nx) = -qcal(k);
    g.bottomRows(n1) = fb.g0[k] - Phat[k] * fb.b[k];
    return g;
  });
  MatrixXd Ghat = J.transpose() * s.l.G * J;
  MatrixXd H = MatrixXd::Zero(n1, nx);
  H.rightCols(n2) = fb.GTx;
  ts.F = MatrixXd::Zero(d, d);
  ts.F.topLeftCorner(nx, nx) = Ghat;
  ts.F.block(0, nx, nx, n1) = H.transpose();
  ts.F.block(nx, 0, n1, nx) = H;
  ts.x0 = VectorXd::Zero(d);
  ts.x0.head(n1) = M0;
  ts.x0.segment(n1, n2) = s.x0l_mean;
  return ts;
}

inline RiccatiSolution solve_augmented_leader_riccati(const TildeSystem& ts, const RiccatiOptions& opt = {}) {
  return solve_augmented_riccati(ts, opt, "augmented_leader_riccati");
}

/// Control map of a tilde system: alpha = Gx X + Gphi phi + goff.
struct TildeFeedback {
  MatrixPath Gx, Gphi, goff;
};

inline MatrixXd tilde_gamma(const TildeSystem& ts, const MatrixXd& P, int k) {
  const Index n = ts.dim();
  return (MatrixXd::Identity(n, n) - P * ts.E[k]).partialPivLu().inverse();
}

inline TildeFeedback leader_feedback(const TildeSystem& ts, const RiccatiSolution& Pt) {
  const TimeGrid& grid = ts.A.grid();
  TildeFeedback fbk;
  auto gen = [&](auto f) { return MatrixPath::generate(grid, f); };
  fbk.Gx = gen([&](int k) {
    const MatrixXd& P = Pt.P[k];
    return MatrixXd(ts.H[k] * P + ts.I[k] * tilde_gamma(ts, P, k) * P * (ts.D[k] + ts.C[k].transpose() * P));
  });
  fbk.Gphi = gen([&](int k) {
    const MatrixXd& P = Pt.P[k];
    return MatrixXd(ts.H[k] + ts.I[k] * tilde_gamma(ts, P, k) * P * ts.C[k].transpose());
  });
  fbk.goff = gen([&](int k) {
    const MatrixXd& P = Pt.P[k];
    return MatrixXd(ts.I[k] * tilde_gamma(ts, P, k) * P * ts.sig[k]);
  });
  return fbk;
}

/// phi' = -[(P B + A^T + (P C + D^T) Gamma P C^T) phi + P b - g + (P C + D^T) Gamma P sig],  phi(T) = 0.
inline MatrixPath solve_tilde_phi(const TildeSystem& ts, const MatrixPath& P) {
  const Index n = ts.dim();
  const MatrixXd Id = MatrixXd::Identity(n, n);
  return integrate_matrix_ode(
      ts.A.grid(),
      [&](double t, const MatrixXd& phi) {
        const MatrixXd Pt = P.at(t), C = ts.C.at(t), D = ts.D.at(t);
        const MatrixXd PCD = Pt * C + D.transpose();
        const MatrixXd Gm = (Id - Pt * ts.E.at(t)).partialPivLu().inverse();
        return MatrixXd(-((Pt * ts.B.at(t) + ts.A.at(t).transpose() + PCD * Gm * Pt * C.transpose()) * phi +
                          Pt * ts.b.at(t) - ts.g.at(t) + PCD * Gm * Pt * ts.sig.at(t)));
      },
      MatrixXd::Zero(n, 1), Direction::Backward);
}

/// Closed-loop coefficients of X~:  dX = (Ad X + ad) dt + (Sd X + sd) dW.
struct TildeClosedLoop {
  MatrixPath Ad, ad, Sd, sd;
};

inline TildeClosedLoop tilde_closed_loop(const TildeSystem& ts, const MatrixPath& P, const MatrixPath& phi) {
  auto gen = [&](auto f) { return MatrixPath::generate(ts.A.grid(), f); };
  TildeClosedLoop cl;
  // Z = Gamma P [(D + C^T P) X + C^T phi + sig]
  auto zx = [&](int k) { return MatrixXd(tilde_gamma(ts, P[k], k) * P[k] * (ts.D[k] + ts.C[k].transpose() * P[k])); };
  auto z0 = [&](int k) {
    return MatrixXd(tilde_gamma(ts, P[k], k) * P[k] * (ts.C[k].transpose() * phi[k] + ts.sig[k]));
  };
  cl.Ad = gen([&](int k) { return MatrixXd(ts.A[k] + ts.B[k] * P[k] + ts.C[k] * zx(k)); });
  cl.ad = gen([&](int k) { return MatrixXd(ts.B[k] * phi[k] + ts.C[k] * z0(k) + ts.b[k]); });
  cl.Sd = gen([&](int k) { return MatrixXd(ts.D[k] + ts.C[k].transpose() * P[k] + ts.E[k] * zx(k)); });
  cl.sd = gen([&](int k) { return MatrixXd(ts.C[k].transpose() * phi[k] + ts.E[k] * z0(k) + ts.sig[k]); });
  return cl;
}

/// E[X~] along the optimum (the drift is affine, so the mean solves an ODE).
inline MatrixPath tilde_mean_path(const TildeSystem& ts, const MatrixPath& P, const MatrixPath& phi) {
  const TildeClosedLoop cl = tilde_closed_loop(ts, P, phi);
  return integrate_matrix_ode(
      ts.A.grid(), [&](double t, const MatrixXd& x) { return MatrixXd(cl.Ad.at(t) * x + cl.ad.at(t)); }, ts.x0,
      Direction::Forward);
}

/// Euler-Maruyama paths of the final decoupled system (columns are paths).
struct TildePaths {
  std::vector<MatrixXd> X, Y, Z;
};

inline TildePaths solve_leader_final_system(const TildeSystem& ts, const MatrixPath& P, const MatrixPath& phi,
                                            int paths, std::uint64_t seed, const MatrixXd& x0_cov = {}) {
  const TimeGrid& grid = ts.A.grid();
  const Index n = ts.dim();
  const TildeClosedLoop cl = tilde_closed_loop(ts, P, phi);
  const NormalStream rng(seed);
  TildePaths out;
  MatrixXd X = ts.x0.replicate(1, paths);
  if (x0_cov.size() > 0) {
    const Eigen::LDLT<MatrixXd> ld(x0_cov);
    const MatrixXd Lc = ld.transpositionsP().transpose() * MatrixXd(ld.matrixL()) *
                        ld.vectorD().cwiseMax(0.0).cwiseSqrt().asDiagonal();
    MatrixXd xi(n, paths);
    for (int p = 0; p < paths; ++p)
      for (Index j = 0; j < n; ++j)
        xi(j, p) = rng(NormalStream::kInitial, 0, static_cast<std::uint32_t>(p), 0, static_cast<std::uint32_t>(j));
    X += Lc * xi;
  }
  const double sh = std::sqrt(grid.h());
  for (int k = 0; k <= grid.N; ++k) {
    const MatrixXd Gm = tilde_gamma(ts, P[k], k);
    const MatrixXd Zk = (Gm * P[k] * (ts.D[k] + ts.C[k].transpose() * P[k]) * X).colwise() +
                        VectorXd(Gm * P[k] * (ts.C[k].transpose() * phi[k] + ts.sig[k]));
    out.X.push_back(X);
    out.Y.push_back((P[k] * X).colwise() + VectorXd(phi[k]));
    out.Z.push_back(Zk);
    if (k == grid.N) break;
    Eigen::RowVectorXd dW(paths);
    for (int p = 0; p < paths; ++p)
      dW(p) = sh * rng(NormalStream::kLeader, 0, static_cast<std::uint32_t>(p), static_cast<std::uint32_t>(k), 0);
    const MatrixXd drift = (cl.Ad[k] * X).colwise() + VectorXd(cl.ad[k]);
    const MatrixXd diff = (cl.Sd[k] * X).colwise() + VectorXd(cl.sd[k]);
    X = X + grid.h() * drift + diff * dW.asDiagonal();
  }
  return out;
}

/// Leader's equilibrium: fluctuation gain, mean-part solution and the
/// resulting open-loop mean control.  alpha = a1 + K (X - xbar).
struct LeaderSolution {
  TildeSystem fluct, mean;
  RiccatiSolution Pl, Pmean;
  MatrixPath K;              // m2 x n2
  double gain_crosscheck = 0.0;
  MatrixPath phi, X, Y;      // mean tilde system
  TildeFeedback mean_feedback;
  MatrixPath v, a1, xbar, Mhat, Nl, Nhat, ybar;  // ybar: adjoint mean of X^l
  LeaderMeanData md;
};

inline LeaderSolution solve_leader(const GameSpec& s, const FbodeCoefficients& fb, const MatrixPath& Phat,
                                   const VectorXd& M0, const RiccatiOptions& opt = {}) {
  const int n1 = s.dims.n1, n2 = s.dims.n2;
  const int nx = n1 + n2;
  const TimeGrid& grid = s.grid;
  auto gen = [&](auto f) { return MatrixPath::generate(grid, f); };
  LeaderSolution L;
  L.fluct = build_fluctuation_tilde(s);
  L.Pl = solve_augmented_riccati(L.fluct, opt, "leader_fluctuation_riccati");
  const TildeFeedback ff = leader_feedback(L.fluct, L.Pl);
  L.K = ff.Gx;
  for (int k = 0; k <= grid.N; ++k) {
    const MatrixXd& P = L.Pl.P[k];
    const MatrixXd& B = s.l.B[k];
    const MatrixXd& E = s.l.E[k];
    const MatrixXd Kw = -(s.l.R[k] + E.transpose() * P * E).ldlt().solve(B.transpose() * P + E.transpose() * P * s.l.D[k]);
    L.gain_crosscheck = std::max(L.gain_crosscheck, (Kw - L.K[k]).cwiseAbs().maxCoeff());
  }
  L.md = leader_mean_data(s, L.Pl.P);
  L.mean = build_mean_tilde(s, fb, Phat, L.Pl.P, M0);
  L.Pmean = solve_augmented_leader_riccati(L.mean, opt);
  L.phi = solve_tilde_phi(L.mean, L.Pmean.P);
  L.X = tilde_mean_path(L.mean, L.Pmean.P, L.phi);
  L.Y = gen([&](int k) { return MatrixXd(L.Pmean.P[k] * L.X[k] + L.phi[k]); });
  L.mean_feedback = leader_feedback(L.mean, L.Pmean);
  L.v = gen([&](int k) { return MatrixXd(L.mean.H[k] * L.Y[k]); });
  L.Mhat = gen([&](int k) { return MatrixXd(L.X[k].topRows(n1)); });
  L.xbar = gen([&](int k) { return MatrixXd(L.X[k].middleRows(n1, n2)); });
  L.ybar = gen([&](int k) { return MatrixXd(L.Y[k].middleRows(n1, n2)); });
  L.Nl = gen([&](int k) { return MatrixXd(L.Y[k].bottomRows(n1)); });
  L.Nhat = gen([&](int k) { return MatrixXd(Phat[k] * L.Mhat[k] + L.Nl[k]); });
  L.a1 = gen([&](int k) {
    return MatrixXd(L.v[k] - L.md.Rbar[k].ldlt().solve(L.md.Sbar[k] * L.X[k].topRows(nx) + L.md.rbar[k]));
  });
  return L;
}

/// Leader first-order condition  R alpha + B^T p + E^T q  at node k with
/// p = Pl (X - xbar) + ybar and q = Pl (realized diffusion).
inline VectorXd leader_stationarity(const GameSpec& s, const LeaderSolution& L, int k, const VectorXd& X,
                                    const VectorXd& alpha, const VectorXd& M) {
  const MatrixXd& P = L.Pl.P[k];
  const VectorXd diff = s.l.D[k] * X + s.l.E[k] * alpha + s.l.F[k] * M + s.l.sig[k];
  const VectorXd p = P * (X - L.xbar[k]) + L.ybar[k];
  return s.l.R[k] * alpha + s.l.B[k].transpose() * p + s.l.E[k].transpose() * (P * diff);
}

/// Both policies plus every intermediate object of the pipeline.
struct Equilibrium {
  RiccatiSolution Pf;
  HattedCoefficients hat;
  FollowerPolicy fpol;
  FbodeCoefficients fb;
  MatrixPath Phat;
  VectorXd M0;
  AggregateReduction reduction;
  LeaderSolution leader;
  FollowerSystemSolution followers;
  json diagnostics = json::object();
};

/// Population-weighted initial mean of the followers.
inline VectorXd follower_initial_mass(const GameSpec& s) {
  VectorXd m = VectorXd::Zero(s.dims.n1);
  for (int u = 0; u < s.M(); ++u) m += s.graphon.weights()(u) * s.x0f(u);
  return m;
}

inline MatrixXd follower_initial_matrix(const GameSpec& s) {
  MatrixXd x0(s.dims.n1, s.M());
  for (int u = 0; u < s.M(); ++u) x0.col(u) = s.x0f(u);
  return x0;
}

inline Equilibrium assemble_stackelberg_equilibrium(const GameSpec& s, const RiccatiOptions& opt = {},
                                                    const FixedPointOptions& fp = {}) {
  Equilibrium eq;
  auto& dg = eq.diagnostics;
  {
    const Report a1 = validate_A1(s);
    dg["A1"] = to_json(a1);
    if (!a1.pass) throw Error("validate", "assumption A1 violated");
    dg["A3"] = to_json(validate_A3(s));
  }
  eq.Pf = solve_follower_riccati_original(s, opt);
  {
    const RiccatiSolution wb = solve_follower_riccati_woodbury(s, opt);
    const double scale = 1.0 + eq.Pf.P.sup_norm();
    dg["follower_riccati"] = {{"min_singular_Rhat", *std::min_element(eq.Pf.min_singular.begin(), eq.Pf.min_singular.end())},
                              {"cross_form_rel_diff", sup_diff(eq.Pf.P, wb.P) / scale},
                              {"min_eig_R_plus_EPE", *std::min_element(wb.min_eig_R.begin(), wb.min_eig_R.end())}};
  }
  eq.hat = assemble_hatted(s, eq.Pf);
  eq.fpol = follower_feedback(s, eq.Pf);
  eq.fb = aggregate_follower_system(s, eq.hat);
  dg["c"] = eq.fb.c;
  eq.Phat = solve_leader_asymmetric_riccati(eq.fb, opt);
  eq.M0 = follower_initial_mass(s);
  eq.leader = solve_leader(s, eq.fb, eq.Phat, eq.M0, opt);
  eq.reduction = reduce_via_asymmetric_riccati(eq.fb, eq.Phat, eq.M0, eq.leader.xbar);
  dg["leader"] = {
      {"reduction_residual", eq.reduction.residual},
      {"mean_path_vs_reduction", std::max(sup_diff(eq.reduction.Mhat, eq.leader.Mhat),
                                          sup_diff(eq.reduction.Nl, eq.leader.Nl))},
      {"gain_crosscheck", eq.leader.gain_crosscheck},
      {"min_singular_I_minus_PE",
       *std::min_element(eq.leader.Pl.min_singular.begin(), eq.leader.Pl.min_singular.end())}};
  eq.followers = solve_follower_fb_system(eq.hat, s.graphon, follower_initial_matrix(s), s.Gf(0, 1), s.Gf(0, 2),
                                          eq.leader.xbar, fp);
  double agg = 0.0;
  for (int k = 0; k <= s.grid.N; ++k)
    agg = std::max(agg, (eq.followers.m[k] * s.graphon.weights() - eq.leader.Mhat[k]).cwiseAbs().maxCoeff());
  dg["followers"] = {{"fixed_point_iterations", eq.followers.iterations},
                     {"fixed_point_residual", eq.followers.history.back()},
                     {"population_mean_vs_leader_view", agg}};
  return eq;
}

}  // namespace gsn
