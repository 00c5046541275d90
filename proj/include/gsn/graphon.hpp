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
#include "gsn/rng.hpp"

#include <optional>
#include <string>
#include <vector>

namespace gsn {

/// Follower index space: M cells of [0,1] with quadrature weights.
struct IndexGrid {
  int M = 1;
  VectorXd weights;

  IndexGrid() : weights(VectorXd::Ones(1)) {}
  explicit IndexGrid(int count) : M(count) {
    if (count < 1) throw ConfigError("index grid needs M >= 1");
    weights = VectorXd::Constant(count, 1.0 / count);
  }
  IndexGrid(int count, VectorXd w) : M(count), weights(std::move(w)) {
    if (count < 1 || weights.size() != count) throw ConfigError("index grid: weight count != M");
    if ((weights.array() < 0.0).any() || std::abs(weights.sum() - 1.0) > 1e-12)
      throw ConfigError("index grid: weights must be nonnegative and sum to 1");
  }
  double midpoint(int u) const { return (u + 0.5) / M; }
};

/// Symmetric [0,1]-valued kernel sampled on an IndexGrid.
class GraphonGrid {
 public:
  enum class Kind { Constant, Step, Sampled };

  GraphonGrid() = default;

  static GraphonGrid constant(int M, double c) {
    if (!(c >= 0.0 && c <= 1.0)) throw ConfigError("constant graphon value must lie in [0,1]");
    GraphonGrid g;
    g.kind_ = Kind::Constant;
    g.grid_ = IndexGrid(M);
    g.values_ = MatrixXd::Constant(M, M, c);
    g.boundaries_ = {0.0, 1.0};
    g.blocks_ = MatrixXd::Constant(1, 1, c);
    g.block_of_.assign(M, 0);
    g.finish();
    return g;
  }

  /// Step graphon: value blocks(a,b) on [x_a, x_{a+1}) x [x_b, x_{b+1}).
  /// Cells are assigned to blocks by their midpoint.
  static GraphonGrid step(int M, std::vector<double> boundaries, const MatrixXd& blocks) {
    const auto B = static_cast<Index>(boundaries.size()) - 1;
    if (B < 1 || blocks.rows() != B || blocks.cols() != B)
      throw ConfigError("step graphon: block matrix must be (#boundaries-1) square");
    if (boundaries.front() != 0.0 || boundaries.back() != 1.0)
      throw ConfigError("step graphon: boundaries must start at 0 and end at 1");
    for (Index a = 0; a < B; ++a)
      if (!(boundaries[a] < boundaries[a + 1])) throw ConfigError("step graphon: boundaries must increase");
    if ((blocks - blocks.transpose()).cwiseAbs().maxCoeff() > 0.0)
      throw ConfigError("step graphon: block matrix must be symmetric");
    if ((blocks.array() < 0.0).any() || (blocks.array() > 1.0).any())
      throw ConfigError("step graphon: block values must lie in [0,1]");
    GraphonGrid g;
    g.kind_ = Kind::Step;
    g.grid_ = IndexGrid(M);
    g.boundaries_ = std::move(boundaries);
    g.blocks_ = blocks;
    g.block_of_.resize(M);
    for (int u = 0; u < M; ++u) {
      const double x = g.grid_.midpoint(u);
      int a = 0;
      while (a + 1 < B && x >= g.boundaries_[a + 1]) ++a;
      g.block_of_[u] = a;
    }
    g.values_.resize(M, M);
    for (int u = 0; u < M; ++u)
      for (int v = 0; v < M; ++v) g.values_(u, v) = blocks(g.block_of_[u], g.block_of_[v]);
    g.finish();
    return g;
  }

  /// Explicit matrix; must be symmetric within 1e-12, then averaged.
  static GraphonGrid sampled(const MatrixXd& values) {
    if (values.rows() != values.cols() || values.rows() < 1)
      throw ConfigError("sampled graphon: matrix must be square and nonempty");
    if ((values - values.transpose()).cwiseAbs().maxCoeff() > 1e-12)
      throw ConfigError("sampled graphon: matrix is not symmetric within 1e-12");
    GraphonGrid g;
    g.kind_ = Kind::Sampled;
    g.grid_ = IndexGrid(static_cast<int>(values.rows()));
    g.values_ = 0.5 * (values + values.transpose());
    if ((g.values_.array() < 0.0).any() || (g.values_.array() > 1.0).any())
      throw ConfigError("sampled graphon: entries must lie in [0,1]");
    g.finish();
    return g;
  }

  /// Same kernel on a different cell count (constant and step kinds only).
  GraphonGrid resampled(int M) const {
    switch (kind_) {
      case Kind::Constant: return constant(M, values_(0, 0));
      case Kind::Step: return step(M, boundaries_, blocks_);
      default: throw ConfigError("sampled graphons cannot be resampled to a new cell count");
    }
  }

  /// (1-s) G1 + s G2 on the same grid.
  static GraphonGrid interpolate(const GraphonGrid& a, const GraphonGrid& b, double s) {
    if (a.M() != b.M()) throw std::invalid_argument("interpolate: grid mismatch");
    return sampled((1.0 - s) * a.values_ + s * b.values_);
  }

  Kind kind() const { return kind_; }
  const IndexGrid& grid() const { return grid_; }
  int M() const { return grid_.M; }
  const MatrixXd& values() const { return values_; }
  double operator()(int u, int v) const { return values_(u, v); }
  const VectorXd& weights() const { return grid_.weights; }

  /// W(u,v) = G(u,v) w_v, so (GX)^u = sum_v W(u,v) X^v.
  const MatrixXd& weighted() const { return weighted_; }

  /// Columns of X are per-index states; returns the aggregated columns.
  MatrixXd aggregate_cols(const MatrixXd& X) const {
    if (X.cols() != M()) throw std::invalid_argument("aggregate: expected one column per index");
    if (kind_ != Kind::Sampled) {
      const Index B = blocks_.rows();
      MatrixXd S = MatrixXd::Zero(X.rows(), B);
      for (int v = 0; v < M(); ++v) S.col(block_of_[v]) += grid_.weights(v) * X.col(v);
      MatrixXd Sb = S * blocks_.transpose();  // Sb.col(a) = sum_b blocks(a,b) S_b
      MatrixXd out(X.rows(), M());
      for (int u = 0; u < M(); ++u) out.col(u) = Sb.col(block_of_[u]);
      return out;
    }
    return X * weighted_.transpose();
  }

  /// Rows of Y are indices (columns are e.g. paths); returns W Y.
  MatrixXd apply_rows(const MatrixXd& Y) const {
    if (Y.rows() != M()) throw std::invalid_argument("apply_rows: expected one row per index");
    if (kind_ != Kind::Sampled) {
      const Index B = blocks_.rows();
      MatrixXd S = MatrixXd::Zero(B, Y.cols());
      for (int v = 0; v < M(); ++v) S.row(block_of_[v]) += grid_.weights(v) * Y.row(v);
      const MatrixXd Sb = blocks_ * S;
      MatrixXd out(M(), Y.cols());
      for (int u = 0; u < M(); ++u) out.row(u) = Sb.row(block_of_[u]);
      return out;
    }
    return weighted_ * Y;
  }

 private:
  void finish() {
    weighted_ = values_ * grid_.weights.asDiagonal();
  }

  Kind kind_ = Kind::Constant;
  IndexGrid grid_;
  MatrixXd values_ = MatrixXd::Zero(1, 1);
  MatrixXd weighted_ = MatrixXd::Zero(1, 1);
  std::vector<double> boundaries_;
  MatrixXd blocks_;
  std::vector<int> block_of_;
};

/// Aggregation of a per-index list of d-vectors.
inline std::vector<VectorXd> aggregate(const GraphonGrid& G, const std::vector<VectorXd>& X) {
  if (static_cast<int>(X.size()) != G.M())
    throw std::invalid_argument("aggregate: expected " + std::to_string(G.M()) +
                                " per-index states, got " + std::to_string(X.size()));
  const Index d = X.empty() ? 0 : X[0].size();
  MatrixXd cols(d, G.M());
  for (int u = 0; u < G.M(); ++u) {
    if (X[u].size() != d)
      throw std::invalid_argument("aggregate: index " + std::to_string(u) + " has dimension " +
                                  std::to_string(X[u].size()) + ", expected " + std::to_string(d));
    cols.col(u) = X[u];
  }
  const MatrixXd out = G.aggregate_cols(cols);
  std::vector<VectorXd> r(G.M());
  for (int u = 0; u < G.M(); ++u) r[u] = out.col(u);
  return r;
}

inline double sup_norm(const GraphonGrid& G) { return G.values().maxCoeff(); }

inline double distance(const GraphonGrid& a, const GraphonGrid& b) {
  if (a.M() != b.M() || (a.weights() - b.weights()).cwiseAbs().maxCoeff() != 0.0)
    throw std::invalid_argument("distance: graphons live on different grids");
  return (a.values() - b.values()).cwiseAbs().maxCoeff();
}

inline VectorXd row_sum_profile(const GraphonGrid& G) { return G.values() * G.weights(); }

/// Weighted L2 norm over the index grid; X has one column per index.
inline double l2_norm(const IndexGrid& g, const MatrixXd& X) {
  double s = 0.0;
  for (int u = 0; u < g.M; ++u) s += g.weights(u) * X.col(u).squaredNorm();
  return std::sqrt(s);
}

struct OperatorNormReport {
  bool pass = true;
  double max_ratio = 0.0;
  double bound = 0.0;
  MatrixXd witness;  // first violating sample, if any
};

/// Samples random X and checks ||GX|| <= ||G||_inf ||X|| in the weighted L2 norm.
inline OperatorNormReport operator_norm_bound_check(const GraphonGrid& G, int samples,
                                                    std::uint64_t seed, int dim = 2) {
  if (samples < 1) throw std::invalid_argument("operator_norm_bound_check: samples must be >= 1");
  OperatorNormReport rep;
  rep.bound = sup_norm(G);
  NormalStream rng(seed);
  for (int s = 0; s < samples; ++s) {
    MatrixXd X(dim, G.M());
    for (int u = 0; u < G.M(); ++u)
      for (int j = 0; j < dim; ++j)
        X(j, u) = rng(NormalStream::kAux, static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(s), 0,
                      static_cast<std::uint32_t>(j));
    const double nx = l2_norm(G.grid(), X);
    const double ng = l2_norm(G.grid(), G.aggregate_cols(X));
    const double ratio = nx > 0.0 ? ng / nx : 0.0;
    rep.max_ratio = std::max(rep.max_ratio, ratio);
    if (ng > rep.bound * nx + 1e-12 && rep.pass) {
      rep.pass = false;
      rep.witness = X;
    }
  }
  return rep;
}

/// Eigenvalues of the aggregation operator (real: similar to a symmetric matrix).
inline VectorXd operator_eigenvalues(const GraphonGrid& G) {
  const VectorXd sw = G.weights().cwiseSqrt();
  const MatrixXd S = sw.asDiagonal() * G.values() * sw.asDiagonal();
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(S, Eigen::EigenvaluesOnly);
  return es.eigenvalues();
}

struct RowSumCheck {
  bool pass = false;
  double c = 0.0;
  double max_deviation = 0.0;
  int worst_index = 0;
};

/// Constant-row-sum test with tolerance 1e-10.
inline RowSumCheck check_constant_row_sum(const GraphonGrid& G, double tol = 1e-10) {
  const VectorXd r = row_sum_profile(G);
  RowSumCheck out;
  out.c = r.mean();
  const VectorXd dev = (r.array() - out.c).abs();
  Index worst = 0;
  out.max_deviation = dev.maxCoeff(&worst);
  out.worst_index = static_cast<int>(worst);
  out.pass = out.max_deviation <= tol;
  return out;
}

}  // namespace gsn
