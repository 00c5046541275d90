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

#include <array>
#include <vector>

namespace gsn {

/// Coefficients of one index of the linear graphon-aggregated FBSDE
///
///   dX = (A21 X + A22 Y + A23 Z + B2 GX + b) dt
///        + (A31 X + A32 Y + A33 Z + B3 GX + sig) dW
///   dY = (A11 X + A12 Y + A13 Z + B1 GX + g) dt + Z dW
///   X_0 = x0,  Y_T = G1 X_T + G2 GX_T + h.
///
/// A[i][j] holds A^{(i+1)(j+1)}.
struct GfbsdeCoefficients {
  std::array<std::array<MatrixPath, 3>, 3> A;
  std::array<MatrixPath, 3> B;
  MatrixXd G1, G2;
  MatrixPath b, sig, g;
  VectorXd h;
};

struct GfbsdeProblem {
  int n = 1;
  TimeGrid grid;
  GraphonGrid graphon;
  std::vector<GfbsdeCoefficients> coeffs;  // one entry (shared) or one per index
  std::vector<VectorXd> x0_mean;           // one entry (shared) or one per index
  MatrixXd x0_cov;                         // n x n, shared

  int M() const { return graphon.M(); }
  bool shared() const { return coeffs.size() == 1; }
  const GfbsdeCoefficients& at(int u) const { return coeffs.size() == 1 ? coeffs[0] : coeffs[u]; }
  GfbsdeCoefficients& at(int u) { return coeffs.size() == 1 ? coeffs[0] : coeffs[u]; }
  const VectorXd& x0(int u) const { return x0_mean.size() == 1 ? x0_mean[0] : x0_mean[u]; }

  /// Zero problem of the given shape.
  static GfbsdeProblem zeros(int n, const TimeGrid& grid, const GraphonGrid& G) {
    GfbsdeProblem p;
    p.n = n;
    p.grid = grid;
    p.graphon = G;
    GfbsdeCoefficients c;
    for (auto& row : c.A)
      for (auto& a : row) a = MatrixPath(grid, n, n);
    for (auto& b : c.B) b = MatrixPath(grid, n, n);
    c.G1 = MatrixXd::Zero(n, n);
    c.G2 = MatrixXd::Zero(n, n);
    c.b = MatrixPath(grid, n, 1);
    c.sig = MatrixPath(grid, n, 1);
    c.g = MatrixPath(grid, n, 1);
    c.h = VectorXd::Zero(n);
    p.coeffs = {c};
    p.x0_mean = {VectorXd::Zero(n)};
    p.x0_cov = MatrixXd::Zero(n, n);
    return p;
  }

  /// Expand shared coefficients / initial data to one entry per index.
  void unshare() {
    if (coeffs.size() == 1) coeffs.assign(M(), coeffs[0]);
    if (x0_mean.size() == 1) x0_mean.assign(M(), x0_mean[0]);
  }
};

}  // namespace gsn
