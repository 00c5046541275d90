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
#include "gsn/mc_sim.hpp"
#include "gsn/ode.hpp"
#include "gsn/parallel.hpp"
#include "gsn/report.hpp"
#include "gsn/rng.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace gsn {

/// Coefficient blocks without forcings.
struct GfbsdeOperator {
  std::array<std::array<MatrixPath, 3>, 3> A;
  std::array<MatrixPath, 3> B;
  MatrixXd G1, G2;
};

namespace detail {

inline GfbsdeOperator operator_of(const GfbsdeCoefficients& c) { return {c.A, c.B, c.G1, c.G2}; }

/// The alpha = 0 operator: A11 = A22 = A33 = -K1 I, G1 = I, everything else zero.
inline GfbsdeOperator base_operator(int n, const TimeGrid& grid, double K1) {
  GfbsdeOperator o;
  const MatrixXd I = MatrixXd::Identity(n, n);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) o.A[i][j] = MatrixPath::constant(grid, i == j ? MatrixXd(-K1 * I) : MatrixXd::Zero(n, n));
    o.B[i] = MatrixPath::constant(grid, MatrixXd::Zero(n, n));
  }
  o.G1 = I;
  o.G2 = MatrixXd::Zero(n, n);
  return o;
}

inline MatrixPath lincomb(double a, const MatrixPath& x, double b, const MatrixPath& y) {
  return MatrixPath::generate(x.grid(), [&](int k) { return MatrixXd(a * x[k] + b * y[k]); }, y.interp());
}

/// a * x + b * y blockwise.
inline GfbsdeOperator lincomb(double a, const GfbsdeOperator& x, double b, const GfbsdeOperator& y) {
  GfbsdeOperator o;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) o.A[i][j] = lincomb(a, x.A[i][j], b, y.A[i][j]);
    o.B[i] = lincomb(a, x.B[i], b, y.B[i]);
  }
  o.G1 = a * x.G1 + b * y.G1;
  o.G2 = a * x.G2 + b * y.G2;
  return o;
}

inline double path_diff(const MatrixPath& a, const MatrixPath& b) {
  if (a.empty() || b.empty()) return std::numeric_limits<double>::infinity();
  return sup_diff(a, b);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Monotonicity

/// Largest K1 with  sum_u w_u <A theta^u + B G x, theta^u> <= -K1 sum_u w_u |theta^u|^2  at every node,
/// plus PSD tests of the terminal maps.
inline Report check_S1_S2(const GfbsdeProblem& p) {
  Report rep;
  rep.check = "S1_S2";
  const int n = p.n, M = p.M(), N = p.grid.N, d = 3 * n;
  const MatrixXd& W = p.graphon.weighted();
  const VectorXd& w = p.graphon.weights();
  double max_norm = 0.0;
  for (int u = 0; u < (p.shared() ? 1 : M); ++u) {
    const auto& c = p.at(u);
    for (const auto& row : c.A)
      for (const auto& a : row) max_norm = std::max(max_norm, a.sup_norm());
    for (const auto& b : c.B) max_norm = std::max(max_norm, b.sup_norm());
  }
  if (!std::isfinite(max_norm)) rep.fail({{"condition", "S1"}, {"problem", "non-finite coefficient"}});
  double worst = -std::numeric_limits<double>::infinity();
  int worst_k = 0;
  for (int k = 0; k <= N; ++k) {
    MatrixXd S = MatrixXd::Zero(d * M, d * M);
    for (int u = 0; u < M; ++u) {
      const auto& c = p.at(u);
      MatrixXd Au(d, d);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) Au.block(i * n, j * n, n, n) = c.A[i][j][k];
      S.block(u * d, u * d, d, d) += Au;
      MatrixXd Bu(d, n);
      Bu << c.B[0][k], c.B[1][k], c.B[2][k];
      // G x^v enters with weight W(u, v); the scaled form uses sqrt(w_u w_v) G(u, v)
      for (int v = 0; v < M; ++v) {
        const double s = std::sqrt(w(u) * w(v)) * (W(u, v) / w(v));
        if (s != 0.0) S.block(u * d, v * d, d, n) += s * Bu;
      }
    }
    const double e = linalg::max_eig_sym(linalg::sym(S));
    if (e > worst) {
      worst = e;
      worst_k = k;
    }
  }
  const double K1 = -worst;
  MatrixXd T1 = MatrixXd::Zero(n * M, n * M), T2 = MatrixXd::Zero(n * M, n * M);
  for (int u = 0; u < M; ++u) {
    T1.block(u * n, u * n, n, n) = p.at(u).G1;
    for (int v = 0; v < M; ++v) {
      const double s = std::sqrt(w(u) * w(v)) * (W(u, v) / w(v));
      T2.block(u * n, v * n, n, n) = s * p.at(u).G2;
    }
  }
  const double e1 = linalg::min_eig_sym(linalg::sym(T1)), e2 = linalg::min_eig_sym(linalg::sym(T2));
  const double e12 = linalg::min_eig_sym(linalg::sym(MatrixXd(T1 + T2)));
  rep.margin = K1;
  rep.values = {{"K1", K1}, {"worst_node", worst_k}, {"coefficient_max_norm", max_norm},
                {"terminal_G1_min_eig", e1}, {"terminal_G2W_min_eig", e2}, {"terminal_min_eig", e12}};
  if (!(K1 > 0.0)) rep.fail({{"condition", "S2"}, {"problem", "outside theorem hypotheses"}, {"K1", K1}});
  if (e12 < -1e-12) rep.fail({{"condition", "S2 terminal"}, {"min_eig", e12}});
  return rep;
}

// ---------------------------------------------------------------------------
// Solution representation: Y = Pi X + eta, Z = Zx X + Z0 per index

struct GfbsdeSolution {
  TimeGrid grid;
  int n = 1, M = 1;
  double K1 = 0.0;
  std::vector<MatrixPath> Pi, Zx;   // one entry (shared coefficients) or one per index
  MatrixPath m, ybar, zbar, agg;    // n x M, column u is index u
  json diagnostics = json::object();

  const MatrixPath& pi(int u) const { return Pi.size() == 1 ? Pi[0] : Pi[u]; }
  const MatrixPath& zx(int u) const { return Zx.size() == 1 ? Zx[0] : Zx[u]; }
  VectorXd eta(int u, int k) const { return ybar[k].col(u) - pi(u)[k] * m[k].col(u); }
  VectorXd z0(int u, int k) const { return zbar[k].col(u) - zx(u)[k] * m[k].col(u); }
};

struct ContinuationOptions {
  enum class Schedule { Uniform, Adaptive };
  enum class Init { Previous, Zero };
  Schedule schedule = Schedule::Adaptive;
  Init init = Init::Previous;
  double delta = 0.125;
  double delta_min = 1.0 / 64.0;
  double tol = 1e-10;
  int max_iter = 100;
  double singular_floor = 1e-10;
};

namespace detail {

struct LevelFailure {
  std::string why;
};

/// Closed-loop mean data of index u for the mean stage: zbar = Zm m + Zy y + Za a + z0.
struct MeanGains {
  MatrixPath Zm, Zy, Za, z0;
};

inline MeanGains mean_gains(const GfbsdeOperator& on, const MatrixPath& Pi, const MatrixPath& sig, double floor) {
  const TimeGrid& grid = Pi.grid();
  const Index n = Pi.rows();
  std::vector<MatrixXd> L(grid.nodes());
  for (int k = 0; k <= grid.N; ++k) {
    const MatrixXd IPA = MatrixXd::Identity(n, n) - Pi[k] * on.A[2][2][k];
    if (linalg::min_singular(IPA) < floor) throw LevelFailure{"I - Pi A33 singular at node " + std::to_string(k)};
    L[k] = IPA.partialPivLu().solve(Pi[k]);
  }
  auto gen = [&](const MatrixPath& X) {
    return MatrixPath::generate(grid, [&](int k) { return MatrixXd(L[k] * X[k]); });
  };
  return {gen(on.A[2][0]), gen(on.A[2][1]), gen(on.B[2]), gen(sig)};
}

/// Fluctuation stage: Picard iteration on (Pi, Zx) with the delta-part frozen.
inline std::pair<MatrixPath, MatrixPath> pi_level(const GfbsdeOperator& o, const GfbsdeOperator& d,
                                                  MatrixPath Pi, MatrixPath Zx, const ContinuationOptions& opt,
                                                  int& iters) {
  const TimeGrid& grid = o.A[0][0].grid();
  const Index n = o.G1.rows();
  const MatrixXd I = MatrixXd::Identity(n, n);
  const MatrixXd GT = o.G1 + d.G1;
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= opt.max_iter; ++it) {
    auto frozen = [&](int row, double t) {
      const MatrixXd P = Pi.at(t), Z = Zx.at(t);
      return MatrixXd(d.A[row][0].at(t) + d.A[row][1].at(t) * P + d.A[row][2].at(t) * Z);
    };
    auto zx_of = [&](double t, const MatrixXd& P) {
      const MatrixXd IPA = I - P * o.A[2][2].at(t);
      return MatrixXd(IPA.partialPivLu().solve(P * (o.A[2][0].at(t) + frozen(2, t) + o.A[2][1].at(t) * P)));
    };
    auto rhs = [&](double t, const MatrixXd& P) {
      const MatrixXd Z = zx_of(t, P);
      return MatrixXd(o.A[0][0].at(t) + frozen(0, t) + o.A[0][1].at(t) * P + o.A[0][2].at(t) * Z -
                      P * (o.A[1][0].at(t) + frozen(1, t)) - P * o.A[1][1].at(t) * P - P * o.A[1][2].at(t) * Z);
    };
    auto hook = [&](int k, MatrixXd& P) {
      if (!P.allFinite() || P.cwiseAbs().maxCoeff() > 1e8) throw LevelFailure{"Pi escape at node " + std::to_string(k)};
      if (linalg::min_singular(I - P * o.A[2][2][k]) < opt.singular_floor)
        throw LevelFailure{"I - Pi A33 singular at node " + std::to_string(k)};
    };
    MatrixPath next = integrate_matrix_ode(grid, rhs, GT, Direction::Backward, hook);
    MatrixPath zx = MatrixPath::generate(grid, [&](int k) { return zx_of(grid.t(k), next[k]); });
    const double r = detail::path_diff(next, Pi) + detail::path_diff(zx, Zx);
    Pi = std::move(next);
    Zx = std::move(zx);
    iters = it;
    if (r <= opt.tol * (1.0 + Pi.sup_norm())) return {Pi, Zx};
    if (!std::isfinite(r) && it > 1) throw LevelFailure{"Pi iteration produced non-finite values"};
    if (it > 3 && r > prev) throw LevelFailure{"Pi iteration diverging"};
    prev = r;
  }
  throw LevelFailure{"Pi iteration hit the cap"};
}

struct MeanState {
  MatrixPath m, y;  // n x M
};

/// Mean stage: Picard iteration on (m, ybar) over all indices.
inline MeanState mean_level(const GfbsdeProblem& p, const std::vector<GfbsdeOperator>& o,
                            const std::vector<GfbsdeOperator>& d, const std::vector<MeanGains>& gains,
                            MeanState st, const ContinuationOptions& opt, int& iters) {
  const int n = p.n, M = p.M(), nM = n * M;
  const TimeGrid& grid = p.grid;
  const MatrixXd& W = p.graphon.weighted();
  auto op = [&](const std::vector<GfbsdeOperator>& v, int u) -> const GfbsdeOperator& {
    return v.size() == 1 ? v[0] : v[u];
  };
  auto gn = [&](int u) -> const MeanGains& { return gains.size() == 1 ? gains[0] : gains[u]; };
  auto gen = [&](auto f) { return MatrixPath::generate(grid, f); };
  AffineBvp bvp;
  // x' = A x + B y + f,  y' = C x + D y + g  in stacked index order
  auto coupled = [&](int row, int xcol /*0: x-coefficient, 1: y-coefficient*/) {
    return gen([&](int k) {
      MatrixXd out = MatrixXd::Zero(nM, nM);
      for (int u = 0; u < M; ++u) {
        const auto& ou = op(o, u);
        const auto& g = gn(u);
        const MatrixXd& Ar3 = ou.A[row][2][k];
        if (xcol == 0) {
          out.block(u * n, u * n, n, n) = ou.A[row][0][k] + Ar3 * g.Zm[k];
          const MatrixXd Bu = ou.B[row][k] + Ar3 * g.Za[k];
          for (int v = 0; v < M; ++v)
            if (W(u, v) != 0.0) out.block(u * n, v * n, n, n) += W(u, v) * Bu;
        } else {
          out.block(u * n, u * n, n, n) = ou.A[row][1][k] + Ar3 * g.Zy[k];
        }
      }
      return out;
    });
  };
  bvp.A = coupled(1, 0);
  bvp.B = coupled(1, 1);
  bvp.C = coupled(0, 0);
  bvp.D = coupled(0, 1);
  bvp.G = MatrixXd::Zero(nM, nM);
  for (int u = 0; u < M; ++u) {
    bvp.G.block(u * n, u * n, n, n) = op(o, u).G1;
    for (int v = 0; v < M; ++v) bvp.G.block(u * n, v * n, n, n) += W(u, v) * op(o, u).G2;
  }
  bvp.x0.resize(nM);
  for (int u = 0; u < M; ++u) bvp.x0.segment(u * n, n) = p.x0(u);
  MatrixPath field;
  try {
    field = affine_bvp_field(bvp, {}, "gfbsde_mean");
  } catch (const Error& e) {
    throw LevelFailure{std::string("mean decoupling field: ") + e.what()};
  }
  auto stack = [&](const MatrixXd& X) { return VectorXd(Eigen::Map<const VectorXd>(X.data(), X.size())); };
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= opt.max_iter; ++it) {
    // explicit delta-terms from the current iterate
    std::vector<MatrixXd> ex_f(grid.nodes()), ex_g(grid.nodes());
    for (int k = 0; k <= grid.N; ++k) {
      const MatrixXd a = st.m[k] * W.transpose();
      ex_f[k].resize(n, M);
      ex_g[k].resize(n, M);
      for (int u = 0; u < M; ++u) {
        const auto& ou = op(o, u);
        const auto& du = op(d, u);
        const auto& g = gn(u);
        const VectorXd m = st.m[k].col(u), y = st.y[k].col(u), au = a.col(u);
        const VectorXd z = g.Zm[k] * m + g.Zy[k] * y + g.Za[k] * au + g.z0[k];
        const auto& c = p.at(u);
        ex_f[k].col(u) = ou.A[1][2][k] * g.z0[k] + c.b[k] +
                         du.A[1][0][k] * m + du.A[1][1][k] * y + du.A[1][2][k] * z + du.B[1][k] * au;
        ex_g[k].col(u) = ou.A[0][2][k] * g.z0[k] + c.g[k] +
                         du.A[0][0][k] * m + du.A[0][1][k] * y + du.A[0][2][k] * z + du.B[0][k] * au;
      }
    }
    bvp.f = gen([&](int k) { return MatrixXd(stack(ex_f[k])); });
    bvp.g = gen([&](int k) { return MatrixXd(stack(ex_g[k])); });
    bvp.h.resize(nM);
    const MatrixXd aT = st.m.back() * W.transpose();
    for (int u = 0; u < M; ++u)
      bvp.h.segment(u * n, n) = p.at(u).h + op(d, u).G1 * st.m.back().col(u) + op(d, u).G2 * aT.col(u);
    const AffineBvpSolution sol = solve_affine_bvp(bvp, field);
    MeanState next;
    auto unstack = [&](const MatrixPath& v) {
      return gen([&](int k) { return MatrixXd(Eigen::Map<const MatrixXd>(v[k].data(), n, M)); });
    };
    next.m = unstack(sol.x);
    next.y = unstack(sol.y);
    const double r = detail::path_diff(next.m, st.m) + detail::path_diff(next.y, st.y);
    const double scale = 1.0 + next.m.sup_norm() + next.y.sup_norm();
    st = std::move(next);
    iters = it;
    if (!std::isfinite(r) && it > 1) throw LevelFailure{"mean iteration produced non-finite values"};
    if (r <= opt.tol * scale) return st;
    if (it > 3 && r > prev) throw LevelFailure{"mean iteration diverging"};
    prev = r;
  }
  throw LevelFailure{"mean iteration hit the cap"};
}

struct ContState {
  std::vector<MatrixPath> Pi, Zx;
  MeanState mean;
};

inline MatrixPath zero_path(const TimeGrid& grid, Index r, Index c) { return MatrixPath(grid, r, c, Interp::Cubic); }

inline void finish_solution(const GfbsdeProblem& p, const std::vector<GfbsdeOperator>& target, const ContState& st,
                            GfbsdeSolution& out, double floor) {
  const int n = p.n, M = p.M();
  out.grid = p.grid;
  out.n = n;
  out.M = M;
  out.Pi = st.Pi;
  out.Zx = st.Zx;
  out.m = st.mean.m;
  out.ybar = st.mean.y;
  const MatrixXd& W = p.graphon.weighted();
  out.agg = MatrixPath::generate(p.grid, [&](int k) { return MatrixXd(out.m[k] * W.transpose()); });
  std::vector<MeanGains> gains;
  for (std::size_t s = 0; s < st.Pi.size(); ++s)
    gains.push_back(mean_gains(target[target.size() == 1 ? 0 : s], st.Pi[s], p.at(static_cast<int>(s)).sig, floor));
  if (gains.size() == 1 && !p.shared()) throw std::logic_error("finish_solution: gain layout");
  out.zbar = MatrixPath::generate(p.grid, [&](int k) {
    MatrixXd z(n, M);
    const MatrixXd a = out.m[k] * W.transpose();
    for (int u = 0; u < M; ++u) {
      const auto& g = gains.size() == 1 ? gains[0] : gains[u];
      // sig may differ per index even if the operator is shared
      const MatrixXd L = (MatrixXd::Identity(n, n) - out.pi(u)[k] * (target.size() == 1 ? target[0] : target[u]).A[2][2][k])
                             .partialPivLu()
                             .solve(out.pi(u)[k]);
      z.col(u) = g.Zm[k] * out.m[k].col(u) + g.Zy[k] * out.ybar[k].col(u) + g.Za[k] * a.col(u) + L * p.at(u).sig[k];
    }
    return z;
  });
}

}  // namespace detail

/// Exact solve of the alpha = 0 system (decoupled; the graphon plays no role):
/// Pi = I, eta' = K1 eta + g - b with eta_T = h, Z = sig / (1 + K1), m' = -K1 (m + eta) + b.
inline GfbsdeSolution solve_alpha0(const GfbsdeProblem& p, double K1) {
  const int n = p.n, M = p.M();
  const TimeGrid& grid = p.grid;
  GfbsdeSolution out;
  out.grid = grid;
  out.n = n;
  out.M = M;
  out.K1 = K1;
  out.Pi = {MatrixPath::constant(grid, MatrixXd::Identity(n, n), Interp::Cubic)};
  out.Zx = {detail::zero_path(grid, n, n)};
  std::vector<MatrixPath> eta(M), m(M);
  for (int u = 0; u < M; ++u) {
    const auto& c = p.at(u);
    eta[u] = integrate_matrix_ode(
        grid, [&](double t, const MatrixXd& e) { return MatrixXd(K1 * e + c.g.at(t) - c.b.at(t)); }, c.h,
        Direction::Backward);
    m[u] = integrate_matrix_ode(
        grid, [&](double t, const MatrixXd& x) { return MatrixXd(-K1 * (x + eta[u].at(t)) + c.b.at(t)); }, p.x0(u),
        Direction::Forward);
  }
  const MatrixXd& W = p.graphon.weighted();
  auto gen = [&](auto f) { return MatrixPath::generate(grid, f); };
  out.m = gen([&](int k) {
    MatrixXd x(n, M);
    for (int u = 0; u < M; ++u) x.col(u) = m[u][k];
    return x;
  });
  out.ybar = gen([&](int k) {
    MatrixXd y(n, M);
    for (int u = 0; u < M; ++u) y.col(u) = m[u][k] + eta[u][k];
    return y;
  });
  out.zbar = gen([&](int k) {
    MatrixXd z(n, M);
    for (int u = 0; u < M; ++u) z.col(u) = p.at(u).sig[k] / (1.0 + K1);
    return z;
  });
  out.agg = gen([&](int k) { return MatrixXd(out.m[k] * W.transpose()); });
  out.diagnostics = {{"alpha", 0.0}, {"K1", K1}};
  return out;
}

/// Continuation in alpha from the decoupled system to the target.
inline GfbsdeSolution continuation_solve(const GfbsdeProblem& p, const ContinuationOptions& opt = {},
                                         double K1 = std::numeric_limits<double>::quiet_NaN()) {
  if (std::isnan(K1)) {
    const Report s = check_S1_S2(p);
    K1 = s.values["K1"].get<double>();
  }
  if (!(K1 > 0.0)) {
    std::ostringstream os;
    os << "outside theorem hypotheses (K1 = " << K1 << ")";
    throw Error("gfbsde", os.str());
  }
  const int n = p.n, M = p.M();
  const TimeGrid& grid = p.grid;
  const int sets = p.shared() ? 1 : M;
  const GfbsdeOperator base = detail::base_operator(n, grid, K1);
  std::vector<GfbsdeOperator> target, delta;
  for (int s = 0; s < sets; ++s) {
    target.push_back(detail::operator_of(p.at(s)));
    delta.push_back(detail::lincomb(1.0, target.back(), -1.0, base));
  }
  const GfbsdeSolution s0 = solve_alpha0(p, K1);
  detail::ContState st;
  st.Pi.assign(sets, s0.Pi[0]);
  st.Zx.assign(sets, s0.Zx[0]);
  st.mean = {s0.m, s0.ybar};
  double alpha = 0.0, step = opt.delta;
  json levels = json::array();
  int total_iter = 0;
  while (alpha < 1.0 - 1e-15) {
    const double dlt = std::min(step, 1.0 - alpha);
    const double anew = std::min(1.0, alpha + dlt);
    try {
      std::vector<GfbsdeOperator> o, d, on;
      for (int s = 0; s < sets; ++s) {
        o.push_back(detail::lincomb(1.0, base, alpha, delta[s]));
        d.push_back(detail::lincomb(0.0, base, anew - alpha, delta[s]));
        on.push_back(detail::lincomb(1.0, base, anew, delta[s]));
      }
      detail::ContState next;
      int pit = 0, mit = 0;
      for (int s = 0; s < sets; ++s) {
        MatrixPath P0 = st.Pi[s], Z0 = st.Zx[s];
        if (opt.init == ContinuationOptions::Init::Zero) {
          P0 = detail::zero_path(grid, n, n);
          Z0 = detail::zero_path(grid, n, n);
        }
        int it = 0;
        auto r = detail::pi_level(o[s], d[s], P0, Z0, opt, it);
        pit = std::max(pit, it);
        next.Pi.push_back(std::move(r.first));
        next.Zx.push_back(std::move(r.second));
      }
      std::vector<detail::MeanGains> gains;
      for (int s = 0; s < sets; ++s) gains.push_back(detail::mean_gains(on[s], next.Pi[s], p.at(s).sig, opt.singular_floor));
      detail::MeanState m0 = st.mean;
      if (opt.init == ContinuationOptions::Init::Zero) m0 = {detail::zero_path(grid, n, M), detail::zero_path(grid, n, M)};
      next.mean = detail::mean_level(p, o, d, gains, m0, opt, mit);
      st = std::move(next);
      levels.push_back({{"alpha", anew}, {"delta", dlt}, {"pi_iterations", pit}, {"mean_iterations", mit}});
      total_iter += pit + mit;
      alpha = anew;
    } catch (const detail::LevelFailure& f) {
      if (opt.schedule == ContinuationOptions::Schedule::Uniform || step / 2.0 < opt.delta_min - 1e-15) {
        std::ostringstream os;
        os << "monotonicity margin too small at alpha=" << alpha << " (" << f.why << ")";
        throw Error("gfbsde", os.str());
      }
      levels.push_back({{"alpha", alpha}, {"delta", dlt}, {"failed", f.why}});
      step /= 2.0;
    }
  }
  GfbsdeSolution out;
  detail::finish_solution(p, target, st, out, opt.singular_floor);
  out.K1 = K1;
  out.diagnostics = {{"K1", K1}, {"levels", levels}, {"total_iterations", total_iter},
                     {"schedule", opt.schedule == ContinuationOptions::Schedule::Uniform ? "uniform" : "adaptive"},
                     {"init", opt.init == ContinuationOptions::Init::Zero ? "zero" : "previous"}};
  return out;
}

/// Sup-norm distance between two solutions over (Pi, mean X, mean Y, mean Z).
inline double solution_distance(const GfbsdeSolution& a, const GfbsdeSolution& b) {
  double d = std::max({sup_diff(a.m, b.m), sup_diff(a.ybar, b.ybar), sup_diff(a.zbar, b.zbar)});
  for (int u = 0; u < a.M; ++u) {
    d = std::max(d, sup_diff(a.pi(u), b.pi(u)));
    d = std::max(d, sup_diff(a.zx(u), b.zx(u)));
    if (a.Pi.size() == 1 && b.Pi.size() == 1) break;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Closed loop, paths and residuals

/// Closed-loop forward dynamics of index u:  dX = (Ac X + ac) dt + (Sc X + sc) dW.
struct GfbsdeClosedLoop {
  MatrixPath Ac, ac, Sc, sc;
};

inline GfbsdeClosedLoop closed_loop(const GfbsdeProblem& p, const GfbsdeSolution& s, int u) {
  const auto& c = p.at(u);
  const auto& Pi = s.pi(u);
  const auto& Zx = s.zx(u);
  auto gen = [&](auto f) { return MatrixPath::generate(p.grid, f); };
  GfbsdeClosedLoop cl;
  cl.Ac = gen([&](int k) { return MatrixXd(c.A[1][0][k] + c.A[1][1][k] * Pi[k] + c.A[1][2][k] * Zx[k]); });
  cl.Sc = gen([&](int k) { return MatrixXd(c.A[2][0][k] + c.A[2][1][k] * Pi[k] + c.A[2][2][k] * Zx[k]); });
  cl.ac = gen([&](int k) {
    return MatrixXd(c.A[1][1][k] * s.eta(u, k) + c.A[1][2][k] * s.z0(u, k) + c.B[1][k] * s.agg[k].col(u) + c.b[k]);
  });
  cl.sc = gen([&](int k) {
    return MatrixXd(c.A[2][1][k] * s.eta(u, k) + c.A[2][2][k] * s.z0(u, k) + c.B[2][k] * s.agg[k].col(u) + c.sig[k]);
  });
  return cl;
}

struct GfbsdePaths {
  std::vector<std::vector<MatrixXd>> X, Y, Z;  // [u][k], n x P
};

/// Euler-Maruyama paths of the closed loop; Y and Z follow from the representation.
inline GfbsdePaths sample_paths(const GfbsdeProblem& p, const GfbsdeSolution& s, int paths, std::uint64_t seed,
                                int threads = 0) {
  const int M = p.M(), N = p.grid.N, n = p.n;
  GfbsdePaths out;
  out.X.assign(M, std::vector<MatrixXd>(N + 1, MatrixXd(n, paths)));
  out.Y = out.X;
  out.Z = out.X;
  const NormalStream rng(seed);
  SimConfig cfg;
  cfg.paths = paths;
  const MatrixXd L = detail::cov_factor(p.x0_cov);
  const double h = p.grid.h(), sh = std::sqrt(h);
  parallel_for(M, resolve_threads(threads), [&](long ul) {
    const int u = static_cast<int>(ul);
    const GfbsdeClosedLoop cl = closed_loop(p, s, u);
    MatrixXd X = detail::initial_block(rng, cfg, u + 1, 0, paths, p.x0(u), L);
    for (int k = 0; k <= N; ++k) {
      out.X[u][k] = X;
      out.Y[u][k] = (s.pi(u)[k] * X).colwise() + s.eta(u, k);
      out.Z[u][k] = (s.zx(u)[k] * X).colwise() + s.z0(u, k);
      if (k == N) break;
      const Eigen::RowVectorXd dW = detail::increment_block(rng, cfg, NormalStream::kFollower, u, 0, paths, k, sh);
      MatrixXd drift = (cl.Ac[k] * X).colwise() + VectorXd(cl.ac[k]);
      MatrixXd diff = (cl.Sc[k] * X).colwise() + VectorXd(cl.sc[k]);
      X += h * drift + diff * dW.asDiagonal();
    }
  });
  return out;
}

struct GfbsdeResidual {
  double forward_res = 0.0, backward_res = 0.0, terminal_res = 0.0, backward_max = 0.0;
};

/// Plugs Euler paths of the representation into the discretized equations.
/// forward/backward: sqrt(sum_k mean_{u,p} |defect_k|^2); terminal: max |defect|.
inline GfbsdeResidual residual(const GfbsdeProblem& p, const GfbsdeSolution& s, int paths = 200,
                               std::uint64_t seed = 1, int threads = 0) {
  const int M = p.M(), N = p.grid.N;
  const NormalStream rng(seed);
  SimConfig cfg;
  cfg.paths = paths;
  const MatrixXd L = detail::cov_factor(p.x0_cov);
  const double h = p.grid.h(), sh = std::sqrt(h);
  std::vector<double> fwd(M, 0.0), bwd(M, 0.0), term(M, 0.0), bmax(M, 0.0);
  parallel_for(M, resolve_threads(threads), [&](long ul) {
    const int u = static_cast<int>(ul);
    const auto& c = p.at(u);
    const auto& Pi = s.pi(u);
    const auto& Zx = s.zx(u);
    MatrixXd X = detail::initial_block(rng, cfg, u + 1, 0, paths, p.x0(u), L);
    for (int k = 0; k <= N; ++k) {
      const VectorXd a = s.agg[k].col(u);
      const MatrixXd Y = (Pi[k] * X).colwise() + s.eta(u, k);
      const MatrixXd Z = (Zx[k] * X).colwise() + s.z0(u, k);
      if (k == N) {
        const MatrixXd d = (Y - c.G1 * X).colwise() - VectorXd(c.G2 * a + c.h);
        term[u] = d.cwiseAbs().maxCoeff();
        break;
      }
      const Eigen::RowVectorXd dW = detail::increment_block(rng, cfg, NormalStream::kFollower, u, 0, paths, k, sh);
      MatrixXd drift = (c.A[1][0][k] * X + c.A[1][1][k] * Y + c.A[1][2][k] * Z).colwise() + VectorXd(c.B[1][k] * a + c.b[k]);
      MatrixXd diff = (c.A[2][0][k] * X + c.A[2][1][k] * Y + c.A[2][2][k] * Z).colwise() + VectorXd(c.B[2][k] * a + c.sig[k]);
      const MatrixXd Xn = X + h * drift + diff * dW.asDiagonal();
      const MatrixXd fd = Xn - X - h * drift - diff * dW.asDiagonal();
      const MatrixXd Yn = (Pi[k + 1] * Xn).colwise() + s.eta(u, k + 1);
      MatrixXd ydrift = (c.A[0][0][k] * X + c.A[0][1][k] * Y + c.A[0][2][k] * Z).colwise() + VectorXd(c.B[0][k] * a + c.g[k]);
      const MatrixXd bd = Yn - Y - h * ydrift - Z * dW.asDiagonal();
      fwd[u] += fd.squaredNorm() / paths;
      bwd[u] += bd.squaredNorm() / paths;
      bmax[u] = std::max(bmax[u], bd.cwiseAbs().maxCoeff());
      X = Xn;
    }
  });
  GfbsdeResidual r;
  for (int u = 0; u < M; ++u) {
    r.forward_res += fwd[u] / M;
    r.backward_res += bwd[u] / M;
    r.terminal_res = std::max(r.terminal_res, term[u]);
    r.backward_max = std::max(r.backward_max, bmax[u]);
  }
  r.forward_res = std::sqrt(r.forward_res);
  r.backward_res = std::sqrt(r.backward_res);
  return r;
}

// ---------------------------------------------------------------------------
// Energies, a-priori estimate and stability

struct Energy {
  double sup_x = 0.0, sup_y = 0.0, int_z = 0.0;
  double total() const { return sup_x + sup_y + int_z; }
};

/// Average over indices of  sup E|X|^2 + sup E|Y|^2 + int E|Z|^2  from exact moments of a
/// closed loop with mean/covariance (m, S) and Y = Pi X + eta, Z = Zx X + z0.
inline Energy solution_energy(const GfbsdeProblem& p, const GfbsdeSolution& s) {
  const int M = p.M();
  Energy e;
  for (int u = 0; u < M; ++u) {
    const GfbsdeClosedLoop cl = closed_loop(p, s, u);
    const MomentPaths mp = propagate_moments(cl.Ac, cl.ac, cl.Sc, cl.sc, p.x0(u), p.x0_cov);
    double sx = 0.0, sy = 0.0;
    std::vector<double> fz(p.grid.nodes());
    for (int k = 0; k <= p.grid.N; ++k) {
      const VectorXd m = mp.m[k];
      const MatrixXd& S = mp.S[k];
      const MatrixXd& P = s.pi(u)[k];
      const MatrixXd& Z = s.zx(u)[k];
      sx = std::max(sx, m.squaredNorm() + S.trace());
      sy = std::max(sy, (P * m + s.eta(u, k)).squaredNorm() + (P * S * P.transpose()).trace());
      fz[k] = (Z * m + s.z0(u, k)).squaredNorm() + (Z * S * Z.transpose()).trace();
    }
    e.sup_x += sx / M;
    e.sup_y += sy / M;
    e.int_z += time_integral(p.grid, fz) / M;
  }
  return e;
}

/// E|x0|^2 + |h|^2 + int (|b|^2 + |sig|^2 + |g|^2), averaged over indices.
inline double data_energy(const GfbsdeProblem& p) {
  const int M = p.M();
  double e = 0.0;
  for (int u = 0; u < M; ++u) {
    const auto& c = p.at(u);
    std::vector<double> f(p.grid.nodes());
    for (int k = 0; k <= p.grid.N; ++k) f[k] = c.b[k].squaredNorm() + c.sig[k].squaredNorm() + c.g[k].squaredNorm();
    e += (p.x0(u).squaredNorm() + p.x0_cov.trace() + c.h.squaredNorm() + time_integral(p.grid, f)) / M;
  }
  return e;
}

/// Scales (x0, b, sig, g, h) by f (x0 as a random variable, so its covariance by f^2).
inline GfbsdeProblem scale_data(GfbsdeProblem p, double f) {
  for (auto& x : p.x0_mean) x *= f;
  p.x0_cov *= f * f;
  for (auto& c : p.coeffs) {
    c.b = detail::lincomb(0.0, c.b, f, c.b);
    c.sig = detail::lincomb(0.0, c.sig, f, c.sig);
    c.g = detail::lincomb(0.0, c.g, f, c.g);
    c.h *= f;
  }
  return p;
}

inline Report apriori_estimate_check(const GfbsdeProblem& p, const GfbsdeSolution& s) {
  Report rep;
  rep.check = "apriori_estimate";
  const Energy e = solution_energy(p, s);
  const double data = data_energy(p);
  const double lhs = e.total();
  const double ratio = data > 0.0 ? lhs / data : (lhs == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
  rep.margin = std::isfinite(ratio) ? 1.0 : -1.0;
  if (!std::isfinite(ratio)) rep.fail({{"problem", "non-zero solution for zero data"}, {"lhs", lhs}});
  rep.values = {{"lhs", lhs}, {"sup_x", e.sup_x}, {"sup_y", e.sup_y}, {"int_z", e.int_z}, {"data", data},
                {"ratio", ratio}};
  return rep;
}

/// Energy of the difference of two solutions of the same problem under two graphons, driven by
/// the same noise and initial data.
inline double difference_energy(const GfbsdeProblem& p1, const GfbsdeSolution& s1, const GfbsdeProblem& p2,
                                const GfbsdeSolution& s2) {
  const int M = p1.M();
  double e = 0.0;
  for (int u = 0; u < M; ++u) {
    const GfbsdeClosedLoop c1 = closed_loop(p1, s1, u), c2 = closed_loop(p2, s2, u);
    const MatrixPath da = detail::lincomb(1.0, c1.ac, -1.0, c2.ac);
    const MatrixPath ds = detail::lincomb(1.0, c1.sc, -1.0, c2.sc);
    const Index n = p1.n;
    const MomentPaths mp = propagate_moments(c1.Ac, da, c1.Sc, ds, VectorXd::Zero(n), MatrixXd::Zero(n, n));
    double sx = 0.0, sy = 0.0;
    std::vector<double> fz(p1.grid.nodes());
    for (int k = 0; k <= p1.grid.N; ++k) {
      const VectorXd m = mp.m[k];
      const MatrixXd& S = mp.S[k];
      const MatrixXd& P = s1.pi(u)[k];
      const MatrixXd& Z = s1.zx(u)[k];
      sx = std::max(sx, m.squaredNorm() + S.trace());
      sy = std::max(sy, (P * m + s1.eta(u, k) - s2.eta(u, k)).squaredNorm() + (P * S * P.transpose()).trace());
      fz[k] = (Z * m + s1.z0(u, k) - s2.z0(u, k)).squaredNorm() + (Z * S * Z.transpose()).trace();
    }
    e += (sx + sy + time_integral(p1.grid, fz)) / M;
  }
  return e;
}

/// Interpolated-graphon sweep G(s) = (1 - s) G1 + s G2 against G1.
inline Report stability_experiment(const GfbsdeProblem& p, const GraphonGrid& G1, const GraphonGrid& G2,
                                   const std::vector<double>& s_values = {0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625},
                                   const ContinuationOptions& opt = {}, double slope_min = 1.8) {
  Report rep;
  rep.check = "graphon_stability";
  GfbsdeProblem p1 = p;
  p1.graphon = G1;
  const Report m1 = check_S1_S2(p1);
  if (!m1.pass) {
    rep.fail({{"problem", "reference graphon fails monotonicity"}, {"K1", m1.values["K1"]}});
    rep.values = {{"reference", to_json(m1)}};
    return rep;
  }
  const GfbsdeSolution s1 = continuation_solve(p1, opt);
  const double data = data_energy(p1);
  std::vector<double> lx, ly;
  json pts = json::array();
  double K_emp = 0.0;
  for (double sv : s_values) {
    GfbsdeProblem q = p;
    q.graphon = GraphonGrid::interpolate(G1, G2, sv);
    const double dist = distance(G1, q.graphon);
    const Report mq = check_S1_S2(q);
    if (!mq.pass) {
      pts.push_back({{"s", sv}, {"distance", dist}, {"skipped", "monotonicity"}, {"K1", mq.values["K1"]}});
      continue;
    }
    const GfbsdeSolution sq = continuation_solve(q, opt);
    const double ed = difference_energy(p1, s1, q, sq);
    pts.push_back({{"s", sv}, {"distance", dist}, {"energy_diff", ed}});
    if (dist > 0.0 && data > 0.0) K_emp = std::max(K_emp, ed / (dist * dist * data));
    if (dist == 0.0 && ed > 1e-16) rep.fail({{"problem", "identical graphons differ"}, {"energy_diff", ed}});
    if (dist > 0.0 && ed > 0.0) {
      lx.push_back(std::log(dist));
      ly.push_back(std::log(ed));
    }
  }
  json slope = nullptr;
  if (lx.size() >= 2) {
    const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / lx.size();
    const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / ly.size();
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
      sxy += (lx[i] - mx) * (ly[i] - my);
      sxx += (lx[i] - mx) * (lx[i] - mx);
    }
    const double sl = sxy / sxx;
    slope = sl;
    rep.margin = sl - slope_min;
    if (!(sl >= slope_min)) rep.fail({{"problem", "slope below bound"}, {"slope", sl}});
  }
  rep.values = {{"points", pts}, {"slope", slope}, {"K_emp", K_emp}, {"data_energy", data}, {"K1", m1.values["K1"]}};
  return rep;
}

}  // namespace gsn
