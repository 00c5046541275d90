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
#include "gsn/io.hpp"
#include "gsn/leader.hpp"
#include "gsn/model.hpp"
#include "gsn/ode.hpp"
#include "gsn/parallel.hpp"
#include "gsn/report.hpp"
#include "gsn/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

namespace gsn {

/// Composite Simpson on the grid nodes (3/8 rule on the last panel if N is odd).
inline double time_integral(const TimeGrid& grid, const std::vector<double>& f) {
  const int N = grid.N;
  const double h = grid.h();
  if (N == 1) return 0.5 * h * (f[0] + f[1]);
  if (N == 2) return h / 3.0 * (f[0] + 4.0 * f[1] + f[2]);
  const int even = (N % 2 == 0) ? N : N - 3;
  double s = 0.0;
  for (int k = 0; k + 2 <= even; k += 2) s += h / 3.0 * (f[k] + 4.0 * f[k + 1] + f[k + 2]);
  if (even != N) s += 3.0 * h / 8.0 * (f[N - 3] + 3.0 * f[N - 2] + 3.0 * f[N - 1] + f[N]);
  return s;
}

/// Trapezoid weights used for path-wise Monte Carlo costs.
inline double trapezoid_weight(const TimeGrid& grid, int k) {
  return (k == 0 || k == grid.N) ? 0.5 * grid.h() : grid.h();
}

/// Mean and covariance of  dX = (A X + a) dt + (S X + s) dW  (scalar W).
struct MomentPaths {
  MatrixPath m, S;
};

inline MomentPaths propagate_moments(const MatrixPath& A, const MatrixPath& a, const MatrixPath& S,
                                     const MatrixPath& s, const VectorXd& m0, const MatrixXd& S0) {
  const Index n = m0.size();
  MatrixXd y0(n, n + 1);
  y0 << m0, S0;
  const MatrixPath y = integrate_matrix_ode(
      A.grid(),
      [&](double t, const MatrixXd& y) {
        const MatrixXd At = A.at(t), St = S.at(t);
        const VectorXd m = y.col(0);
        const MatrixXd C = y.rightCols(n);
        const VectorXd w = St * m + s.at(t);
        MatrixXd out(n, n + 1);
        out.col(0) = At * m + a.at(t);
        out.rightCols(n) = At * C + C * At.transpose() + St * C * St.transpose() + w * w.transpose();
        return out;
      },
      y0, Direction::Forward);
  MomentPaths mp;
  mp.m = MatrixPath::generate(A.grid(), [&](int k) { return MatrixXd(y[k].col(0)); });
  mp.S = MatrixPath::generate(A.grid(), [&](int k) { return MatrixXd(linalg::sym(y[k].rightCols(n))); });
  return mp;
}

// ---------------------------------------------------------------------------
// Deterministic responses and exact (moment) costs

/// Leader control in mean/fluctuation form: alpha = abar + K (X - E[X]).
struct LeaderControl {
  MatrixPath abar, K;
};

/// Population mean paths generated by a leader mean control.
struct PopulationResponse {
  MatrixPath M, xbar, N;
};

/// Joint (M, E[X^l]; N) problem for a given leader mean control; the
/// followers' aggregate Nash response is built in through (fb, Phat-free form).
inline PopulationResponse population_response(const GameSpec& s, const Equilibrium& eq, const MatrixPath& abar) {
  const int n1 = s.dims.n1, n2 = s.dims.n2;
  const TimeGrid& grid = s.grid;
  const auto& fb = eq.fb;
  auto gen = [&](auto f) { return MatrixPath::generate(grid, f); };
  AffineBvp p;
  p.A = gen([&](int k) {
    MatrixXd a = MatrixXd::Zero(n1 + n2, n1 + n2);
    a.topLeftCorner(n1, n1) = fb.A[k];
    a.bottomLeftCorner(n2, n1) = s.l.C[k];
    a.bottomRightCorner(n2, n2) = s.l.A[k];
    return a;
  });
  p.B = gen([&](int k) {
    MatrixXd b = MatrixXd::Zero(n1 + n2, n1);
    b.topRows(n1) = fb.B[k];
    return b;
  });
  p.C = gen([&](int k) {
    MatrixXd c(n1, n1 + n2);
    c << fb.C[k], fb.Gx[k];
    return c;
  });
  p.D = fb.D;
  p.f = gen([&](int k) {
    MatrixXd f(n1 + n2, 1);
    f << fb.b[k], s.l.B[k] * abar[k] + s.l.b[k];
    return f;
  });
  p.g = fb.g0;
  p.G.resize(n1, n1 + n2);
  p.G << fb.GT, fb.GTx;
  p.h = VectorXd::Zero(n1);
  p.x0.resize(n1 + n2);
  p.x0 << eq.M0, s.x0l_mean;
  const AffineBvpSolution sol = solve_affine_bvp(p, {}, "population_response");
  PopulationResponse r;
  r.M = gen([&](int k) { return MatrixXd(sol.x[k].topRows(n1)); });
  r.xbar = gen([&](int k) { return MatrixXd(sol.x[k].bottomRows(n2)); });
  r.N = sol.y;
  return r;
}

struct LeaderMoments {
  MomentPaths fluct;  // mean of the fluctuation is zero; S is the covariance of X^l
  double cost = 0.0;
};

/// Exact leader cost for control (abar, K) given the population response.
inline LeaderMoments leader_cost_moments(const GameSpec& s, const LeaderControl& c, const PopulationResponse& r) {
  const int n2 = s.dims.n2;
  const TimeGrid& grid = s.grid;
  auto gen = [&](auto f) { return MatrixPath::generate(grid, f); };
  const MatrixPath Acl = gen([&](int k) { return MatrixXd(s.l.A[k] + s.l.B[k] * c.K[k]); });
  const MatrixPath Scl = gen([&](int k) { return MatrixXd(s.l.D[k] + s.l.E[k] * c.K[k]); });
  const MatrixPath w = gen([&](int k) {
    return MatrixXd(s.l.D[k] * r.xbar[k] + s.l.E[k] * c.abar[k] + s.l.F[k] * r.M[k] + s.l.sig[k]);
  });
  LeaderMoments out;
  out.fluct = propagate_moments(Acl, MatrixPath(grid, n2, 1, Interp::Cubic), Scl, w, VectorXd::Zero(n2),
                                s.x0l_cov);
  const MatrixPath Q11 = s.Ql(0, 0);
  std::vector<double> f(grid.nodes());
  auto U = [&](int k) {
    VectorXd u(n2 + s.dims.n1);
    u << r.xbar[k], r.M[k];
    return u;
  };
  for (int k = 0; k <= grid.N; ++k) {
    const MatrixXd& S = out.fluct.S[k];
    const VectorXd u = U(k);
    const VectorXd a = c.abar[k];
    f[k] = u.dot(s.l.Q[k] * u) + (Q11[k] * S).trace() + a.dot(s.l.R[k] * a) +
           (c.K[k].transpose() * s.l.R[k] * c.K[k] * S).trace();
  }
  const VectorXd uT = U(grid.N);
  out.cost = 0.5 * (time_integral(grid, f) + uT.dot(s.l.G * uT) + (s.Gl(0, 0) * out.fluct.S.back()).trace());
  return out;
}

/// Equilibrium leader control and its own response.
inline LeaderControl equilibrium_leader_control(const Equilibrium& eq) { return {eq.leader.a1, eq.leader.K}; }

/// Follower control of one index: alpha = Kx X + Kagg a + k(t).
struct FollowerControl {
  MatrixPath Kx, Kagg, k;
};

inline FollowerControl equilibrium_follower_control(const Equilibrium& eq, int u) {
  const auto& p = eq.fpol;
  FollowerControl c{p.Kx, p.Kagg, MatrixPath()};
  c.k = MatrixPath::generate(p.Kx.grid(), [&](int k) {
    return MatrixXd(p.Kphi[k] * eq.followers.phi[k].col(u) + p.koff[k]);
  });
  return c;
}

/// Exact cost of follower u under control c with the aggregate a, leader
/// mean xbar and leader covariance Sl held fixed.
inline double follower_cost_moments(const GameSpec& s, const FollowerControl& c, const VectorXd& x0,
                                    const MatrixPath& a, const MatrixPath& xbar, const MatrixPath& Sl) {
  const int n1 = s.dims.n1;
  const TimeGrid& grid = s.grid;
  auto gen = [&](auto f) { return MatrixPath::generate(grid, f); };
  const auto& F = s.f;
  const MatrixPath Acl = gen([&](int k) { return MatrixXd(F.A[k] + F.B[k] * c.Kx[k]); });
  const MatrixPath Scl = gen([&](int k) { return MatrixXd(F.D[k] + F.E[k] * c.Kx[k]); });
  const MatrixPath acl = gen([&](int k) {
    return MatrixXd(F.B[k] * (c.Kagg[k] * a[k] + c.k[k]) + F.C[k] * a[k] + F.b[k]);
  });
  const MatrixPath scl = gen([&](int k) {
    return MatrixXd(F.E[k] * (c.Kagg[k] * a[k] + c.k[k]) + F.F[k] * a[k] + F.sig[k]);
  });
  const MomentPaths mp = propagate_moments(Acl, acl, Scl, scl, x0, s.x0f_cov);
  const MatrixPath Q11 = s.Qf(0, 0), Q33 = s.Qf(2, 2);
  auto V = [&](int k) {
    VectorXd v(2 * n1 + s.dims.n2);
    v << mp.m[k], a[k], xbar[k];
    return v;
  };
  std::vector<double> f(grid.nodes());
  for (int k = 0; k <= grid.N; ++k) {
    const VectorXd v = V(k);
    const MatrixXd& S = mp.S[k];
    const VectorXd al = c.Kx[k] * mp.m[k] + c.Kagg[k] * a[k] + c.k[k];
    f[k] = v.dot(F.Q[k] * v) + (Q11[k] * S).trace() + (Q33[k] * Sl[k]).trace() + al.dot(F.R[k] * al) +
           (c.Kx[k].transpose() * F.R[k] * c.Kx[k] * S).trace();
  }
  const VectorXd vT = V(grid.N);
  return 0.5 * (time_integral(grid, f) + vT.dot(F.G * vT) + (s.Gf(0, 0) * mp.S.back()).trace() +
                (s.Gf(2, 2) * Sl.back()).trace());
}

// ---------------------------------------------------------------------------
// Monte Carlo

struct SimConfig {
  int paths = 1000;
  std::uint64_t seed = 1;
  bool empirical_aggregate = false;
  bool antithetic = false;
  int threads = 0;
  bool keep_paths = true;  // false: only aggregate dispersion statistics are kept
};

/// Paths are processed in fixed blocks so results do not depend on the
/// number of workers.
inline constexpr int kPathBlock = 256;

namespace detail {

inline double normal_draw(const NormalStream& rng, const SimConfig& cfg, std::uint32_t domain, std::uint32_t u,
                          int p, int k, std::uint32_t j) {
  if (cfg.antithetic) {
    const int half = (cfg.paths + 1) / 2;
    if (p >= half)
      return -rng(domain, u, static_cast<std::uint32_t>(p - half), static_cast<std::uint32_t>(k), j);
  }
  return rng(domain, u, static_cast<std::uint32_t>(p), static_cast<std::uint32_t>(k), j);
}

inline MatrixXd cov_factor(const MatrixXd& cov) {
  if (cov.size() == 0 || cov.cwiseAbs().maxCoeff() == 0.0) return MatrixXd::Zero(cov.rows(), cov.cols());
  const Eigen::LDLT<MatrixXd> ld(linalg::sym(cov));
  return ld.transpositionsP().transpose() * MatrixXd(ld.matrixL()) *
         ld.vectorD().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

/// Initial draws x0 + L xi for paths [p0, p1).
inline MatrixXd initial_block(const NormalStream& rng, const SimConfig& cfg, std::uint32_t u, int p0, int p1,
                              const VectorXd& mean, const MatrixXd& L) {
  const Index n = mean.size();
  MatrixXd X = mean.replicate(1, p1 - p0);
  if (L.cwiseAbs().maxCoeff() == 0.0) return X;
  MatrixXd xi(n, p1 - p0);
  for (int p = p0; p < p1; ++p)
    for (Index j = 0; j < n; ++j)
      xi(j, p - p0) = normal_draw(rng, cfg, NormalStream::kInitial, u, p, 0, static_cast<std::uint32_t>(j));
  return X + L * xi;
}

inline Eigen::RowVectorXd increment_block(const NormalStream& rng, const SimConfig& cfg, std::uint32_t domain,
                                          std::uint32_t u, int p0, int p1, int k, double sh) {
  Eigen::RowVectorXd dW(p1 - p0);
  for (int p = p0; p < p1; ++p) dW(p - p0) = sh * normal_draw(rng, cfg, domain, u, p, k, 0);
  return dW;
}

[[noreturn]] inline void non_finite(const char* who, int u, int p0, const MatrixXd& X, int k) {
  Index p = 0;
  while (p + 1 < X.cols() && X.col(p).allFinite()) ++p;
  throw Error("simulate", std::string("non-finite ") + who + " state (u=" + std::to_string(u) +
                              ", p=" + std::to_string(p0 + p) + ", k=" + std::to_string(k) + ")");
}

}  // namespace detail

/// States and controls: Xf[u][k] is n1 x P, Xl[k] is n2 x P. Aggregates are
/// stored per path only when they are empirical.
struct PopulationEnsemble {
  TimeGrid grid;
  int M = 0, P = 0;
  bool empirical = false;
  std::vector<std::vector<MatrixXd>> Xf, af, agg;
  std::vector<MatrixXd> Xl, al, Mf;
  /// Per path block: sum over (u, k, p) of |empirical - deterministic aggregate|^2.
  std::vector<double> agg_sq_dev;
};

/// Euler-Maruyama for the whole population under the given controls. The
/// follower u uses control fc[u] (or fc[0] for all); the leader uses lc with
/// E[X^l] = xbar and sees the population mean Mdet (or the empirical mean).
inline PopulationEnsemble simulate(const GameSpec& s, const std::vector<FollowerControl>& fc,
                                   const MatrixPath& agg_det, const LeaderControl& lc, const MatrixPath& xbar,
                                   const MatrixPath& Mdet, const SimConfig& cfg) {
  if (cfg.paths < 1) throw std::invalid_argument("simulate: paths must be >= 1");
  const int M = s.M(), P = cfg.paths, N = s.grid.N;
  const int n1 = s.dims.n1, n2 = s.dims.n2;
  PopulationEnsemble ens;
  ens.grid = s.grid;
  ens.M = M;
  ens.P = P;
  ens.empirical = cfg.empirical_aggregate;
  const int aggc = cfg.empirical_aggregate ? P : 1;
  const bool keep = cfg.keep_paths;
  if (keep) {
    ens.Xf.assign(M, std::vector<MatrixXd>(N + 1, MatrixXd(n1, P)));
    ens.af.assign(M, std::vector<MatrixXd>(N + 1, MatrixXd(s.dims.m1, P)));
    ens.agg.assign(M, std::vector<MatrixXd>(N + 1, MatrixXd(n1, aggc)));
    ens.Xl.assign(N + 1, MatrixXd(n2, P));
    ens.al.assign(N + 1, MatrixXd(s.dims.m2, P));
    ens.Mf.assign(N + 1, MatrixXd(n1, aggc));
  }
  if (keep && !cfg.empirical_aggregate)
    for (int k = 0; k <= N; ++k) {
      for (int u = 0; u < M; ++u) ens.agg[u][k] = agg_det[k].col(u);
      ens.Mf[k] = Mdet[k];
    }
  const NormalStream rng(cfg.seed);
  const MatrixXd Lf = detail::cov_factor(s.x0f_cov), Ll = detail::cov_factor(s.x0l_cov);
  const double h = s.grid.h(), sh = std::sqrt(h);
  const int blocks = (P + kPathBlock - 1) / kPathBlock;
  ens.agg_sq_dev.assign(blocks, 0.0);
  const VectorXd& w = s.graphon.weights();
  parallel_for(blocks, resolve_threads(cfg.threads), [&](long b) {
    const int p0 = static_cast<int>(b) * kPathBlock, p1 = std::min(P, p0 + kPathBlock), np = p1 - p0;
    std::vector<MatrixXd> X(M);
    for (int u = 0; u < M; ++u) X[u] = detail::initial_block(rng, cfg, u + 1, p0, p1, s.x0f(u), Lf);
    MatrixXd Xl = detail::initial_block(rng, cfg, 0, p0, p1, s.x0l_mean, Ll);
    std::vector<MatrixXd> a(M, MatrixXd(n1, np));
    MatrixXd Mf(n1, np);
    for (int k = 0; k <= N; ++k) {
      if (cfg.empirical_aggregate) {
        MatrixXd Y(M, np);
        for (Index j = 0; j < n1; ++j) {
          for (int u = 0; u < M; ++u) Y.row(u) = X[u].row(j);
          const MatrixXd GY = s.graphon.apply_rows(Y);
          for (int u = 0; u < M; ++u) a[u].row(j) = GY.row(u);
          Mf.row(j) = w.transpose() * Y;
        }
        for (int u = 0; u < M; ++u)
          ens.agg_sq_dev[b] += (a[u].colwise() - VectorXd(agg_det[k].col(u))).squaredNorm();
      } else {
        for (int u = 0; u < M; ++u) a[u] = agg_det[k].col(u).replicate(1, np);
        Mf = Mdet[k].replicate(1, np);
      }
      for (int u = 0; u < M; ++u) {
        const FollowerControl& c = fc.size() == 1 ? fc[0] : fc[u];
        MatrixXd al = c.Kx[k] * X[u] + c.Kagg[k] * a[u];
        al.colwise() += VectorXd(c.k[k]);
        if (keep) {
          ens.Xf[u][k].middleCols(p0, np) = X[u];
          ens.af[u][k].middleCols(p0, np) = al;
          if (cfg.empirical_aggregate) ens.agg[u][k].middleCols(p0, np) = a[u];
        }
        if (k < N) {
          MatrixXd drift = s.f.A[k] * X[u] + s.f.B[k] * al + s.f.C[k] * a[u];
          drift.colwise() += VectorXd(s.f.b[k]);
          MatrixXd diff = s.f.D[k] * X[u] + s.f.E[k] * al + s.f.F[k] * a[u];
          diff.colwise() += VectorXd(s.f.sig[k]);
          const Eigen::RowVectorXd dW = detail::increment_block(rng, cfg, NormalStream::kFollower, u, p0, p1, k, sh);
          X[u] += h * drift + diff * dW.asDiagonal();
          if (!X[u].allFinite()) detail::non_finite("follower", u, p0, X[u], k + 1);
        }
      }
      MatrixXd alpha = lc.K[k] * (Xl.colwise() - VectorXd(xbar[k]));
      alpha.colwise() += VectorXd(lc.abar[k]);
      if (keep) {
        ens.Xl[k].middleCols(p0, np) = Xl;
        ens.al[k].middleCols(p0, np) = alpha;
        if (cfg.empirical_aggregate) ens.Mf[k].middleCols(p0, np) = Mf;
      }
      if (k < N) {
        MatrixXd drift = s.l.A[k] * Xl + s.l.B[k] * alpha + s.l.C[k] * Mf;
        drift.colwise() += VectorXd(s.l.b[k]);
        MatrixXd diff = s.l.D[k] * Xl + s.l.E[k] * alpha + s.l.F[k] * Mf;
        diff.colwise() += VectorXd(s.l.sig[k]);
        const Eigen::RowVectorXd dW = detail::increment_block(rng, cfg, NormalStream::kLeader, 0, p0, p1, k, sh);
        Xl += h * drift + diff * dW.asDiagonal();
        if (!Xl.allFinite()) detail::non_finite("leader", -1, p0, Xl, k + 1);
      }
    }
  });
  return ens;
}

/// Simulation at the computed equilibrium.
inline PopulationEnsemble simulate(const GameSpec& s, const Equilibrium& eq, const SimConfig& cfg) {
  std::vector<FollowerControl> fc;
  for (int u = 0; u < s.M(); ++u) fc.push_back(equilibrium_follower_control(eq, u));
  const MatrixPath Mdet =
      MatrixPath::generate(s.grid, [&](int k) { return MatrixXd(eq.followers.m[k] * s.graphon.weights()); });
  return simulate(s, fc, eq.followers.agg, equilibrium_leader_control(eq), eq.leader.xbar, Mdet, cfg);
}

/// Exact mean and covariance of the Euler-Maruyama leader state under control c
/// with deterministic population mean Mdet; xbar is the centring used by c.
inline MomentPaths euler_leader_moments(const GameSpec& s, const LeaderControl& c, const MatrixPath& xbar,
                                        const MatrixPath& Mdet) {
  const TimeGrid& grid = s.grid;
  const double h = grid.h();
  const Index n = s.dims.n2;
  std::vector<MatrixXd> m(grid.nodes()), S(grid.nodes());
  m[0] = s.x0l_mean;
  S[0] = s.x0l_cov;
  for (int k = 0; k < grid.N; ++k) {
    const VectorXd off = c.abar[k] - c.K[k] * xbar[k];
    const MatrixXd A = MatrixXd::Identity(n, n) + h * (s.l.A[k] + s.l.B[k] * c.K[k]);
    const VectorXd a = h * (s.l.B[k] * off + s.l.C[k] * Mdet[k] + s.l.b[k]);
    const MatrixXd D = s.l.D[k] + s.l.E[k] * c.K[k];
    const VectorXd w = D * m[k] + s.l.E[k] * off + s.l.F[k] * Mdet[k] + s.l.sig[k];
    m[k + 1] = A * m[k] + a;
    S[k + 1] = linalg::sym(A * S[k] * A.transpose() + h * (D * S[k] * D.transpose() + w * w.transpose()));
  }
  MomentPaths mp;
  mp.m = MatrixPath::generate(grid, [&](int k) { return m[k]; });
  mp.S = MatrixPath::generate(grid, [&](int k) { return S[k]; });
  return mp;
}

struct MeanSe {
  double mean = 0.0, se = 0.0;
};

inline MeanSe mean_se(const std::vector<double>& v) {
  MeanSe r;
  const std::size_t n = v.size();
  if (n == 0) return r;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  if (*lo == *hi) {
    r.mean = *lo;  // constant sample: exact, no rounding in the spread
    return r;
  }
  r.mean = pairwise_sum(v, 0, n, 0.0) / static_cast<double>(n);
  if (n > 1) {
    std::vector<double> sq(n);
    for (std::size_t i = 0; i < n; ++i) sq[i] = (v[i] - r.mean) * (v[i] - r.mean);
    r.se = std::sqrt(pairwise_sum(sq, 0, n, 0.0) / static_cast<double>(n - 1) / static_cast<double>(n));
  }
  return r;
}

struct CostReport {
  std::vector<MeanSe> follower, follower_rewritten;
  MeanSe leader;
  double max_form_gap_in_se = 0.0;  // max_u |orig - rewritten| / combined SE
};

/// Path-wise costs (trapezoid in time). The rewritten follower form uses
/// E[X^l] = xbar and the leader covariance Sl.
inline CostReport evaluate_costs(const GameSpec& s, const PopulationEnsemble& e, const MatrixPath& xbar,
                                 const MatrixPath& Sl) {
  const int M = e.M, P = e.P, N = e.grid.N;
  const int n1 = s.dims.n1, n2 = s.dims.n2;
  const MatrixPath Q33 = s.Qf(2, 2);
  CostReport rep;
  std::vector<double> trace_term(N + 1);
  for (int k = 0; k <= N; ++k) trace_term[k] = (Q33[k] * Sl[k]).trace();
  const double trace_T = (s.Gf(2, 2) * Sl.back()).trace();
  for (int u = 0; u < M; ++u) {
    std::vector<double> orig(P, 0.0), rew(P, 0.0);
    for (int p = 0; p < P; ++p) {
      auto aggr = [&](int k) -> VectorXd { return e.empirical ? VectorXd(e.agg[u][k].col(p)) : VectorXd(e.agg[u][k].col(0)); };
      auto term = [&](const VectorXd& U, const VectorXd& al, int k) {
        return U.dot(s.f.Q[k] * U) + al.dot(s.f.R[k] * al);
      };
      VectorXd U(2 * n1 + n2), V(2 * n1 + n2);
      for (int k = 0; k <= N; ++k) {
        const VectorXd a = aggr(k);
        const VectorXd al = e.af[u][k].col(p);
        U << e.Xf[u][k].col(p), a, e.Xl[k].col(p);
        V << e.Xf[u][k].col(p), a, xbar[k];
        const double wk = trapezoid_weight(e.grid, k);
        orig[p] += wk * term(U, al, k);
        rew[p] += wk * (term(V, al, k) + trace_term[k]);
      }
      orig[p] = 0.5 * (orig[p] + U.dot(s.f.G * U));
      rew[p] = 0.5 * (rew[p] + V.dot(s.f.G * V) + trace_T);
    }
    rep.follower.push_back(mean_se(orig));
    rep.follower_rewritten.push_back(mean_se(rew));
    const double comb = std::hypot(rep.follower.back().se, rep.follower_rewritten.back().se);
    const double gap = std::abs(rep.follower.back().mean - rep.follower_rewritten.back().mean);
    rep.max_form_gap_in_se = std::max(rep.max_form_gap_in_se, comb > 0.0 ? gap / comb : (gap > 1e-12 ? 1e300 : 0.0));
  }
  std::vector<double> lc(P, 0.0);
  for (int p = 0; p < P; ++p) {
    VectorXd U(n2 + n1);
    for (int k = 0; k <= N; ++k) {
      const VectorXd Mk = e.empirical ? VectorXd(e.Mf[k].col(p)) : VectorXd(e.Mf[k].col(0));
      U << e.Xl[k].col(p), Mk;
      const VectorXd al = e.al[k].col(p);
      lc[p] += trapezoid_weight(e.grid, k) * (U.dot(s.l.Q[k] * U) + al.dot(s.l.R[k] * al));
    }
    lc[p] = 0.5 * (lc[p] + U.dot(s.l.G * U));
  }
  rep.leader = mean_se(lc);
  return rep;
}

/// Per-path costs of follower u alone under control c, with the aggregate,
/// leader mean and leader covariance frozen (rewritten form).
inline std::vector<double> simulate_follower_costs(const GameSpec& s, const FollowerControl& c, int u,
                                                   const MatrixPath& a, const MatrixPath& xbar,
                                                   const MatrixPath& Sl, const SimConfig& cfg) {
  const int P = cfg.paths, N = s.grid.N, n1 = s.dims.n1, n2 = s.dims.n2;
  const NormalStream rng(cfg.seed);
  const MatrixXd Lf = detail::cov_factor(s.x0f_cov);
  const double h = s.grid.h(), sh = std::sqrt(h);
  const MatrixPath Q33 = s.Qf(2, 2);
  std::vector<double> cost(P, 0.0);
  const int blocks = (P + kPathBlock - 1) / kPathBlock;
  parallel_for(blocks, resolve_threads(cfg.threads), [&](long b) {
    const int p0 = static_cast<int>(b) * kPathBlock, p1 = std::min(P, p0 + kPathBlock), np = p1 - p0;
    MatrixXd X = detail::initial_block(rng, cfg, u + 1, p0, p1, s.x0f(u), Lf);
    Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(np);
    VectorXd v(2 * n1 + n2);
    for (int k = 0; k <= N; ++k) {
      const VectorXd off = c.Kagg[k] * a[k] + c.k[k];
      MatrixXd al = c.Kx[k] * X;
      al.colwise() += off;
      const double wk = trapezoid_weight(s.grid, k);
      for (int p = 0; p < np; ++p) {
        v << X.col(p), a[k], xbar[k];
        double f = v.dot(s.f.Q[k] * v) + al.col(p).dot(s.f.R[k] * al.col(p)) + (Q33[k] * Sl[k]).trace();
        if (k < N) {
          acc(p) += wk * f;
        } else {
          acc(p) += wk * f + v.dot(s.f.G * v) + (s.Gf(2, 2) * Sl[k]).trace();
        }
      }
      if (k == N) break;
      MatrixXd drift = s.f.A[k] * X + s.f.B[k] * al;
      drift.colwise() += VectorXd(s.f.C[k] * a[k] + s.f.b[k]);
      MatrixXd diff = s.f.D[k] * X + s.f.E[k] * al;
      diff.colwise() += VectorXd(s.f.F[k] * a[k] + s.f.sig[k]);
      const Eigen::RowVectorXd dW = detail::increment_block(rng, cfg, NormalStream::kFollower, u, p0, p1, k, sh);
      X += h * drift + diff * dW.asDiagonal();
    }
    for (int p = 0; p < np; ++p) cost[p0 + p] = 0.5 * acc(p);
  });
  return cost;
}

/// Per-path leader costs under control c with the population response r.
inline std::vector<double> simulate_leader_costs(const GameSpec& s, const LeaderControl& c,
                                                 const PopulationResponse& r, const SimConfig& cfg) {
  const int P = cfg.paths, N = s.grid.N, n1 = s.dims.n1, n2 = s.dims.n2;
  const NormalStream rng(cfg.seed);
  const MatrixXd Ll = detail::cov_factor(s.x0l_cov);
  const double h = s.grid.h(), sh = std::sqrt(h);
  std::vector<double> cost(P, 0.0);
  const int blocks = (P + kPathBlock - 1) / kPathBlock;
  parallel_for(blocks, resolve_threads(cfg.threads), [&](long b) {
    const int p0 = static_cast<int>(b) * kPathBlock, p1 = std::min(P, p0 + kPathBlock), np = p1 - p0;
    MatrixXd X = detail::initial_block(rng, cfg, 0, p0, p1, s.x0l_mean, Ll);
    Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(np);
    VectorXd U(n2 + n1);
    for (int k = 0; k <= N; ++k) {
      MatrixXd al = c.K[k] * (X.colwise() - VectorXd(r.xbar[k]));
      al.colwise() += VectorXd(c.abar[k]);
      const double wk = trapezoid_weight(s.grid, k);
      for (int p = 0; p < np; ++p) {
        U << X.col(p), r.M[k];
        acc(p) += wk * (U.dot(s.l.Q[k] * U) + al.col(p).dot(s.l.R[k] * al.col(p)));
        if (k == N) acc(p) += U.dot(s.l.G * U);
      }
      if (k == N) break;
      MatrixXd drift = s.l.A[k] * X + s.l.B[k] * al;
      drift.colwise() += VectorXd(s.l.C[k] * r.M[k] + s.l.b[k]);
      MatrixXd diff = s.l.D[k] * X + s.l.E[k] * al;
      diff.colwise() += VectorXd(s.l.F[k] * r.M[k] + s.l.sig[k]);
      const Eigen::RowVectorXd dW = detail::increment_block(rng, cfg, NormalStream::kLeader, 0, p0, p1, k, sh);
      X += h * drift + diff * dW.asDiagonal();
    }
    for (int p = 0; p < np; ++p) cost[p0 + p] = 0.5 * acc(p);
  });
  return cost;
}

/// Original versus rewritten follower cost at the equilibrium (deterministic
/// aggregate). E[X^l] and Cov[X^l] are those of the simulated Euler scheme, so
/// any gap is Monte Carlo error.
inline Report cost_identity_check(const GameSpec& s, const Equilibrium& eq, const SimConfig& cfg,
                                  CostReport* out = nullptr) {
  Report rep;
  rep.check = "cost_identity";
  SimConfig c = cfg;
  c.empirical_aggregate = false;
  const PopulationEnsemble e = simulate(s, eq, c);
  const MatrixPath Mdet =
      MatrixPath::generate(s.grid, [&](int k) { return MatrixXd(eq.followers.m[k] * s.graphon.weights()); });
  const MomentPaths lm = euler_leader_moments(s, equilibrium_leader_control(eq), eq.leader.xbar, Mdet);
  const CostReport cr = evaluate_costs(s, e, lm.m, lm.S);
  double worst = 0.0;
  json rows = json::array();
  for (int u = 0; u < e.M; ++u) {
    const double gap = cr.follower[u].mean - cr.follower_rewritten[u].mean;
    const double se = std::hypot(cr.follower[u].se, cr.follower_rewritten[u].se);
    const double tol = 3.0 * se + 1e-9 * (1.0 + std::abs(cr.follower[u].mean));
    worst = std::max(worst, std::abs(gap) / tol);
    rows.push_back({{"index", u}, {"original", cr.follower[u].mean}, {"original_se", cr.follower[u].se},
                    {"rewritten", cr.follower_rewritten[u].mean}, {"rewritten_se", cr.follower_rewritten[u].se}});
    if (std::abs(gap) > tol) rep.fail({{"index", u}, {"gap", gap}, {"combined_se", se}});
  }
  rep.margin = 1.0 - worst;
  rep.values = {{"max_gap_over_tolerance", worst}, {"paths", cfg.paths}, {"costs", rows}};
  if (out) *out = cr;
  return rep;
}

/// t, index, per-entry mean and standard error of the follower states (index = -1: leader).
inline void write_ensemble_summary(const std::string& file, const PopulationEnsemble& e) {
  CsvWriter w(file);
  const Index n1 = e.Xf.empty() ? 0 : e.Xf[0][0].rows(), n2 = e.Xl[0].rows();
  const Index n = std::max(n1, n2);
  std::vector<std::string> h{"t", "index"};
  for (Index j = 0; j < n; ++j) h.push_back("mean_" + std::to_string(j));
  for (Index j = 0; j < n; ++j) h.push_back("se_" + std::to_string(j));
  w.header(h);
  auto emit = [&](double t, int idx, const MatrixXd& X) {
    std::vector<double> row{t, static_cast<double>(idx)};
    std::vector<double> se;
    for (Index j = 0; j < n; ++j) {
      if (j >= X.rows()) {
        row.push_back(std::numeric_limits<double>::quiet_NaN());
        se.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      std::vector<double> v(X.cols());
      for (Index p = 0; p < X.cols(); ++p) v[p] = X(j, p);
      const MeanSe ms = mean_se(v);
      row.push_back(ms.mean);
      se.push_back(ms.se);
    }
    row.insert(row.end(), se.begin(), se.end());
    w.row(row);
  };
  for (int k = 0; k <= e.grid.N; ++k) {
    for (int u = 0; u < e.M; ++u) emit(e.grid.t(k), u, e.Xf[u][k]);
    emit(e.grid.t(k), -1, e.Xl[k]);
  }
}

/// Raw follower states, little-endian float64 in [u][p][k][component] order.
inline void write_ensemble_binary(const std::string& file, const PopulationEnsemble& e) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error(file + ": cannot write");
  for (int u = 0; u < e.M; ++u)
    for (int p = 0; p < e.P; ++p)
      for (int k = 0; k <= e.grid.N; ++k)
        for (Index j = 0; j < e.Xf[u][k].rows(); ++j) {
          const double v = e.Xf[u][k](j, p);
          out.write(reinterpret_cast<const char*>(&v), sizeof v);
        }
}

struct StationarityResidual {
  double follower = 0.0, leader = 0.0, scale = 1.0;
};

/// Pathwise first-order conditions along simulated equilibrium paths (first
/// `max_paths` paths of the ensemble).
inline StationarityResidual stationarity_residuals(const GameSpec& s, const Equilibrium& eq,
                                                   const PopulationEnsemble& e, int max_paths = 256) {
  StationarityResidual r;
  const int P = std::min(e.P, max_paths);
  double amax = 0.0;
  for (int k = 0; k <= e.grid.N; ++k)
    for (int p = 0; p < P; ++p) {
      for (int u = 0; u < e.M; ++u) {
        const VectorXd agg = e.empirical ? VectorXd(e.agg[u][k].col(p)) : VectorXd(e.agg[u][k].col(0));
        const VectorXd al = e.af[u][k].col(p);
        const VectorXd res = follower_stationarity(s, eq.Pf.P[k], k, e.Xf[u][k].col(p), al,
                                                   eq.followers.phi[k].col(u), agg);
        r.follower = std::max(r.follower, res.cwiseAbs().maxCoeff());
        amax = std::max(amax, al.cwiseAbs().maxCoeff());
      }
      const VectorXd Mk = e.empirical ? VectorXd(e.Mf[k].col(p)) : VectorXd(e.Mf[k].col(0));
      const VectorXd al = e.al[k].col(p);
      const VectorXd res = leader_stationarity(s, eq.leader, k, e.Xl[k].col(p), al, Mk);
      r.leader = std::max(r.leader, res.cwiseAbs().maxCoeff());
      amax = std::max(amax, al.cwiseAbs().maxCoeff());
    }
  r.scale = 1.0 + amax;
  return r;
}

// ---------------------------------------------------------------------------
// Deviation tests

inline const std::vector<double>& deviation_scales() {
  static const std::vector<double> l{-0.2, -0.1, -0.05, 0.05, 0.1, 0.2};
  return l;
}

/// Least-squares quadratic c0 + c1 x + c2 x^2.
inline Eigen::Vector3d fit_quadratic(const std::vector<double>& x, const std::vector<double>& y) {
  MatrixXd A(x.size(), 3);
  VectorXd b(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    A(i, 0) = 1.0;
    A(i, 1) = x[i];
    A(i, 2) = x[i] * x[i];
    b(i) = y[i];
  }
  return A.colPivHouseholderQr().solve(b);
}

/// Smooth random direction: beta(t) = c0 + c1 cos(pi t/T) + c2 sin(pi t/T), per component.
inline MatrixPath random_direction(const TimeGrid& grid, Index rows, const NormalStream& rng, std::uint32_t tag) {
  MatrixXd c(rows, 3);
  for (Index i = 0; i < rows; ++i)
    for (int j = 0; j < 3; ++j)
      c(i, j) = rng(NormalStream::kAux, tag, static_cast<std::uint32_t>(i), 7, static_cast<std::uint32_t>(j));
  const double pi = 3.14159265358979323846;
  return MatrixPath::generate(grid, [&](int k) {
    const double t = grid.t(k);
    return MatrixXd(c.col(0) + c.col(1) * std::cos(pi * t / grid.T) + c.col(2) * std::sin(pi * t / grid.T));
  });
}

inline MatrixXd random_matrix(Index r, Index c, const NormalStream& rng, std::uint32_t tag) {
  MatrixXd m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j)
      m(i, j) = rng(NormalStream::kAux, tag, static_cast<std::uint32_t>(i), 11, static_cast<std::uint32_t>(j));
  return m;
}

/// Leader covariance path at the equilibrium.
inline MatrixPath equilibrium_leader_covariance(const GameSpec& s, const Equilibrium& eq) {
  const PopulationResponse r{eq.leader.Mhat, eq.leader.xbar, eq.reduction.Nhat};
  return leader_cost_moments(s, equilibrium_leader_control(eq), r).fluct.S;
}

namespace detail {

/// A deviation wins if it is cheaper by more than 3 SE. Without noise the
/// path cost is the Euler cost, whose optimum sits O(h) away from the exact
/// one, so there the exact moment cost decides.
inline bool deviation_beats(const MeanSe& ms, double exact_diff, double J0) {
  if (ms.se > 0.0) return ms.mean < -3.0 * ms.se;
  return exact_diff < -1e-9 * (1.0 + std::abs(J0));
}

}  // namespace detail

/// Unilateral follower deviations with the aggregate and the leader frozen.
/// Every draw perturbs the open-loop offset; odd draws also perturb the gain.
inline Report nash_deviation_test(const GameSpec& s, const Equilibrium& eq, const SimConfig& cfg,
                                  int n_deviations) {
  Report rep;
  rep.check = "nash_deviation";
  const NormalStream rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const MatrixPath Sl = equilibrium_leader_covariance(s, eq);
  double worst = std::numeric_limits<double>::infinity(), min_curv = std::numeric_limits<double>::infinity();
  double min_exact_gain = std::numeric_limits<double>::infinity();
  json draws = json::array();
  std::vector<std::vector<double>> base_cache(s.M());
  for (int d = 0; d < n_deviations; ++d) {
    const int u = static_cast<int>(rng.uniform(NormalStream::kAux, 1000 + d, 0, 0) * s.M()) % s.M();
    const FollowerControl c0 = equilibrium_follower_control(eq, u);
    const MatrixPath a = MatrixPath::generate(s.grid, [&](int k) { return MatrixXd(eq.followers.agg[k].col(u)); });
    const bool feedback = d % 2 == 1;
    const MatrixPath beta = random_direction(s.grid, s.dims.m1, rng, 2000 + d);
    const MatrixXd dK = random_matrix(s.dims.m1, s.dims.n1, rng, 3000 + d);
    auto deviate = [&](double lam) {
      FollowerControl c = c0;
      if (feedback) c.Kx = MatrixPath::generate(s.grid, [&](int k) { return MatrixXd(c0.Kx[k] + lam * dK); });
      c.k = MatrixPath::generate(s.grid, [&](int k) { return MatrixXd(c0.k[k] + lam * beta[k]); });
      return c;
    };
    const double J0 = follower_cost_moments(s, c0, s.x0f(u), a, eq.leader.xbar, Sl);
    if (base_cache[u].empty()) base_cache[u] = simulate_follower_costs(s, c0, u, a, eq.leader.xbar, Sl, cfg);
    const auto& base = base_cache[u];
    std::vector<double> lams{0.0}, mc_diff{0.0}, ex_diff{0.0};
    json pts = json::array();
    for (double lam : deviation_scales()) {
      const FollowerControl c = deviate(lam);
      const double J = follower_cost_moments(s, c, s.x0f(u), a, eq.leader.xbar, Sl);
      const auto costs = simulate_follower_costs(s, c, u, a, eq.leader.xbar, Sl, cfg);
      std::vector<double> diff(costs.size());
      for (std::size_t p = 0; p < costs.size(); ++p) diff[p] = costs[p] - base[p];
      const MeanSe ms = mean_se(diff);
      const double z = ms.se > 0.0 ? ms.mean / ms.se : (detail::deviation_beats(ms, J - J0, J0) ? -1e300 : 0.0);
      worst = std::min(worst, z);
      min_exact_gain = std::min(min_exact_gain, (J - J0) / (1.0 + std::abs(J0)));
      lams.push_back(lam);
      mc_diff.push_back(ms.mean);
      ex_diff.push_back(J - J0);
      pts.push_back({{"lambda", lam}, {"mc_diff", ms.mean}, {"se", ms.se}, {"exact_diff", J - J0}});
      if (detail::deviation_beats(ms, J - J0, J0))
        rep.fail({{"draw", d}, {"index", u}, {"lambda", lam}, {"mc_diff", ms.mean}, {"se", ms.se},
                  {"exact_diff", J - J0}, {"kind", feedback ? "mixed" : "open_loop"}});
    }
    const Eigen::Vector3d q = fit_quadratic(lams, mc_diff);
    const Eigen::Vector3d qe = fit_quadratic(lams, ex_diff);
    min_curv = std::min(min_curv, q(2));
    if (!(q(2) > 0.0)) rep.fail({{"draw", d}, {"index", u}, {"problem", "non-positive curvature"}, {"c2", q(2)}});
    draws.push_back({{"index", u}, {"kind", feedback ? "mixed" : "open_loop"}, {"c2_mc", q(2)},
                     {"c2_exact", qe(2)}, {"vertex_exact", qe(2) > 0 ? -qe(1) / (2.0 * qe(2)) : 0.0},
                     {"points", pts}});
  }
  if (min_exact_gain < -1e-9) rep.fail({{"problem", "exact cost decreased"}, {"min_rel_gain", min_exact_gain}});
  rep.margin = worst + 3.0;
  rep.values = {{"min_z", worst}, {"min_curvature", min_curv}, {"min_exact_rel_gain", min_exact_gain},
                {"paths", cfg.paths}, {"draws", draws}};
  return rep;
}

/// Leader deviations with the followers' Nash response re-solved each time.
inline Report leader_deviation_test(const GameSpec& s, const Equilibrium& eq, const SimConfig& cfg,
                                    int n_deviations) {
  Report rep;
  rep.check = "leader_deviation";
  const NormalStream rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  const LeaderControl c0 = equilibrium_leader_control(eq);
  const PopulationResponse r0 = population_response(s, eq, c0.abar);
  const double J0 = leader_cost_moments(s, c0, r0).cost;
  const std::vector<double> base = simulate_leader_costs(s, c0, r0, cfg);
  double worst = std::numeric_limits<double>::infinity(), max_vertex = 0.0,
         min_curv = std::numeric_limits<double>::infinity();
  json draws = json::array();
  for (int d = 0; d < n_deviations; ++d) {
    const bool feedback = d % 2 == 1;
    const MatrixPath beta = random_direction(s.grid, s.dims.m2, rng, 4000 + d);
    const MatrixXd dK = random_matrix(s.dims.m2, s.dims.n2, rng, 5000 + d);
    std::vector<double> lams{0.0}, mc{0.0}, ex{0.0};
    json pts = json::array();
    for (double lam : deviation_scales()) {
      LeaderControl c = c0;
      if (feedback) c.K = MatrixPath::generate(s.grid, [&](int k) { return MatrixXd(c0.K[k] + lam * dK); });
      c.abar = MatrixPath::generate(s.grid, [&](int k) { return MatrixXd(c0.abar[k] + lam * beta[k]); });
      const PopulationResponse r = population_response(s, eq, c.abar);
      const double J = leader_cost_moments(s, c, r).cost;
      const auto costs = simulate_leader_costs(s, c, r, cfg);
      std::vector<double> diff(costs.size());
      for (std::size_t p = 0; p < costs.size(); ++p) diff[p] = costs[p] - base[p];
      const MeanSe ms = mean_se(diff);
      const double z = ms.se > 0.0 ? ms.mean / ms.se : (detail::deviation_beats(ms, J - J0, J0) ? -1e300 : 0.0);
      worst = std::min(worst, z);
      lams.push_back(lam);
      mc.push_back(ms.mean);
      ex.push_back(J - J0);
      pts.push_back({{"lambda", lam}, {"mc_diff", ms.mean}, {"se", ms.se}, {"exact_diff", J - J0}});
      if (detail::deviation_beats(ms, J - J0, J0))
        rep.fail({{"draw", d}, {"lambda", lam}, {"mc_diff", ms.mean}, {"se", ms.se}, {"exact_diff", J - J0},
                  {"kind", feedback ? "mixed" : "open_loop"}});
    }
    const Eigen::Vector3d qe = fit_quadratic(lams, ex);
    const Eigen::Vector3d qm = fit_quadratic(lams, mc);
    const double vertex = qe(2) > 0.0 ? -qe(1) / (2.0 * qe(2)) : 1e300;
    max_vertex = std::max(max_vertex, std::abs(vertex));
    min_curv = std::min(min_curv, qe(2));
    if (!(qe(2) > 0.0)) rep.fail({{"draw", d}, {"problem", "non-positive curvature"}, {"c2", qe(2)}});
    draws.push_back({{"kind", feedback ? "mixed" : "open_loop"}, {"c2_exact", qe(2)}, {"c2_mc", qm(2)},
                     {"vertex_exact", vertex}, {"points", pts}});
  }
  rep.margin = worst + 3.0;
  rep.values = {{"min_z", worst}, {"max_open_loop_vertex", max_vertex}, {"min_curvature", min_curv},
                {"equilibrium_cost_exact", J0}, {"paths", cfg.paths}, {"draws", draws}};
  return rep;
}

/// Dispersion of empirical aggregates around the deterministic path as the
/// number of sampled followers grows.
inline Report exact_lln_check(const GameSpec& s, const SimConfig& cfg, const std::vector<int>& Ms,
                              double slope_max = -0.4) {
  Report rep;
  rep.check = "exact_lln";
  if (s.x0f_mean.size() != 1) throw ConfigError("exact_lln_check needs a shared follower initial mean");
  std::vector<double> lx, ly;
  json pts = json::array();
  for (int M : Ms) {
    GameSpec sm = s;
    sm.graphon = s.graphon.resampled(M);
    const Equilibrium eq = assemble_stackelberg_equilibrium(sm);
    std::vector<FollowerControl> fc;
    for (int u = 0; u < M; ++u) fc.push_back(equilibrium_follower_control(eq, u));
    const MatrixPath Mdet =
        MatrixPath::generate(sm.grid, [&](int k) { return MatrixXd(eq.followers.m[k] * sm.graphon.weights()); });
    const LeaderControl lc = equilibrium_leader_control(eq);
    // Centre on the mean of the Euler scheme (its noise-free run, the dynamics
    // being affine) so the time step does not bias the dispersion.
    GameSpec quiet = sm;
    for (MatrixPath* m : {&quiet.f.D, &quiet.f.E, &quiet.f.F, &quiet.f.sig})
      *m = MatrixPath(sm.grid, m->rows(), m->cols());
    quiet.x0f_cov.setZero();
    SimConfig q;
    q.paths = 1;
    q.threads = 1;
    q.empirical_aggregate = true;
    const PopulationEnsemble mean = simulate(quiet, fc, eq.followers.agg, lc, eq.leader.xbar, Mdet, q);
    const MatrixPath agg = MatrixPath::generate(sm.grid, [&](int k) {
      MatrixXd a(sm.dims.n1, M);
      for (int u = 0; u < M; ++u) a.col(u) = mean.agg[u][k].col(0);
      return a;
    });
    SimConfig c = cfg;
    c.empirical_aggregate = true;
    c.keep_paths = false;
    const PopulationEnsemble e = simulate(sm, fc, agg, lc, eq.leader.xbar, Mdet, c);
    double ss = 0.0;
    for (double v : e.agg_sq_dev) ss += v;
    const double cnt = static_cast<double>(M) * (s.grid.N + 1) * e.P;
    const double rms = std::sqrt(ss / cnt);
    pts.push_back({{"M", M}, {"rms_dispersion", rms}});
    if (rms > 0.0) {
      lx.push_back(std::log(static_cast<double>(M)));
      ly.push_back(std::log(rms));
    }
  }
  double slope = 0.0;
  if (lx.size() >= 2) {
    const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / lx.size();
    const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / ly.size();
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
      sxy += (lx[i] - mx) * (ly[i] - my);
      sxx += (lx[i] - mx) * (lx[i] - mx);
    }
    slope = sxy / sxx;
  }
  const bool zero_noise = lx.empty();
  rep.values = {{"points", pts}, {"slope", zero_noise ? json(nullptr) : json(slope)}, {"slope_max", slope_max}};
  if (!zero_noise) {
    rep.margin = slope_max - slope;
    if (!(slope <= slope_max)) rep.fail({{"problem", "dispersion decays too slowly"}, {"slope", slope}});
  } else {
    rep.margin = 0.0;
  }
  return rep;
}

}  // namespace gsn
