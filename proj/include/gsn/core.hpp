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

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gsn {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Index = Eigen::Index;

/// Raised by solvers. `stage` names the pipeline step that failed.
class Error : public std::runtime_error {
 public:
  Error(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Malformed input (maps to CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Uniform grid t_k = kT/N, k = 0..N.
struct TimeGrid {
  double T = 1.0;
  int N = 1;

  TimeGrid() = default;
  TimeGrid(double horizon, int steps) : T(horizon), N(steps) {
    if (!(horizon > 0.0) || steps < 1) throw ConfigError("time grid needs T > 0 and N >= 1");
  }
  double h() const { return T / N; }
  double t(int k) const { return k == N ? T : (T * k) / N; }
  int nodes() const { return N + 1; }
  bool operator==(const TimeGrid& o) const { return T == o.T && N == o.N; }
};

enum class Interp { LeftConstant, Cubic };

/// Matrix-valued function of time stored at grid nodes.
///
/// Between nodes the path is either left-constant (raw coefficients) or a
/// four-point Lagrange cubic (solver output, which is smooth).
class MatrixPath {
 public:
  MatrixPath() = default;
  MatrixPath(const TimeGrid& grid, Index rows, Index cols, Interp interp = Interp::LeftConstant)
      : grid_(grid), rows_(rows), cols_(cols), interp_(interp),
        values_(static_cast<std::size_t>(grid.nodes()), MatrixXd::Zero(rows, cols)) {}

  static MatrixPath constant(const TimeGrid& grid, const MatrixXd& m,
                             Interp interp = Interp::LeftConstant) {
    MatrixPath p(grid, m.rows(), m.cols(), interp);
    for (auto& v : p.values_) v = m;
    return p;
  }

  /// Path with values f(k); shape taken from f(0).
  template <class F>
  static MatrixPath generate(const TimeGrid& grid, F&& f, Interp interp = Interp::Cubic) {
    MatrixPath p;
    p.grid_ = grid;
    p.interp_ = interp;
    p.values_.resize(static_cast<std::size_t>(grid.nodes()));
    for (int k = 0; k <= grid.N; ++k) p.values_[k] = f(k);
    p.rows_ = p.values_[0].rows();
    p.cols_ = p.values_[0].cols();
    return p;
  }

  const TimeGrid& grid() const { return grid_; }
  Index rows() const { return rows_; }
  Index cols() const { return cols_; }
  Interp interp() const { return interp_; }
  void set_interp(Interp i) { interp_ = i; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  const MatrixXd& operator[](std::size_t k) const { return values_[k]; }
  MatrixXd& operator[](std::size_t k) { return values_[k]; }
  const MatrixXd& front() const { return values_.front(); }
  const MatrixXd& back() const { return values_.back(); }

  MatrixXd at(double t) const {
    const int N = grid_.N;
    const double s = t / grid_.h();
    const double r = std::round(s);
    if (std::abs(s - r) < 1e-9) return values_[clampi(static_cast<int>(r), 0, N)];
    if (interp_ == Interp::LeftConstant || N < 3) {
      if (interp_ == Interp::Cubic) {  // too few nodes for a cubic stencil; linear
        const int i = clampi(static_cast<int>(std::floor(s)), 0, N - 1);
        const double a = s - i;
        return (1.0 - a) * values_[i] + a * values_[i + 1];
      }
      return values_[clampi(static_cast<int>(std::floor(s)), 0, N)];
    }
    const int i = static_cast<int>(std::floor(s));
    const int j0 = clampi(i - 1, 0, N - 3);
    MatrixXd out = MatrixXd::Zero(rows_, cols_);
    for (int j = j0; j < j0 + 4; ++j) {
      double l = 1.0;
      for (int m = j0; m < j0 + 4; ++m)
        if (m != j) l *= (s - m) / static_cast<double>(j - m);
      out.noalias() += l * values_[j];
    }
    return out;
  }

  double sup_norm() const {
    double m = 0.0;
    for (const auto& v : values_) m = std::max(m, v.cwiseAbs().maxCoeff());
    return m;
  }

  std::vector<MatrixXd>& values() { return values_; }
  const std::vector<MatrixXd>& values() const { return values_; }

 private:
  static int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

  TimeGrid grid_;
  Index rows_ = 0;
  Index cols_ = 0;
  Interp interp_ = Interp::LeftConstant;
  std::vector<MatrixXd> values_;
};

/// max_k max_ij |a_k - b_k|
inline double sup_diff(const MatrixPath& a, const MatrixPath& b) {
  if (a.size() != b.size() || a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("sup_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, (a[k] - b[k]).cwiseAbs().maxCoeff());
  return m;
}

namespace linalg {

inline MatrixXd sym(const MatrixXd& a) { return 0.5 * (a + a.transpose()); }

inline double min_eig_sym(const MatrixXd& a) {
  if (a.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym(a), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

inline double max_eig_sym(const MatrixXd& a) {
  if (a.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym(a), Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

inline double spectral_norm(const MatrixXd& a) {
  if (a.size() == 0) return 0.0;
  Eigen::JacobiSVD<MatrixXd> svd(a);
  return svd.singularValues()(0);
}

inline double min_singular(const MatrixXd& a) {
  if (a.size() == 0) return 0.0;
  Eigen::JacobiSVD<MatrixXd> svd(a);
  return svd.singularValues()(svd.singularValues().size() - 1);
}

inline bool finite(const MatrixXd& a) { return a.allFinite(); }

/// Symmetric positive definite solve via LDLT.
inline MatrixXd spd_solve(const MatrixXd& a, const MatrixXd& b) { return a.ldlt().solve(b); }

}  // namespace linalg
}  // namespace gsn
