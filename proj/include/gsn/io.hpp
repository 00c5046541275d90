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
#include "gsn/model.hpp"

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace gsn {

/// FNV-1a 64-bit.
inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char b[17];
  std::snprintf(b, sizeof b, "%016llx", static_cast<unsigned long long>(v));
  return b;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path + ": cannot open");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Parses JSON text; syntax errors are reported with line and column.
inline json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < std::min(e.byte > 0 ? e.byte - 1 : 0, text.size()); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": JSON syntax error (" +
                      e.what() + ")");
  }
}

namespace io {

/// A JSON node together with its dotted location, for diagnostics.
class Node {
 public:
  Node(const json& j, std::string where) : j_(&j), where_(std::move(where)) {}

  const json& raw() const { return *j_; }
  const std::string& where() const { return where_; }
  [[noreturn]] void error(const std::string& what) const { throw ConfigError(where_ + ": " + what); }

  bool has(const std::string& key) const { return j_->is_object() && j_->contains(key); }
  Node at(const std::string& key) const {
    if (!j_->is_object()) error("expected an object");
    if (!j_->contains(key)) error("missing field '" + key + "'");
    return Node((*j_)[key], where_ + "." + key);
  }
  Node at(std::size_t i) const { return Node((*j_)[i], where_ + "[" + std::to_string(i) + "]"); }
  std::size_t size() const { return j_->size(); }
  bool is_array() const { return j_->is_array(); }
  bool is_object() const { return j_->is_object(); }
  bool is_number() const { return j_->is_number(); }

  /// Rejects keys outside the allowed set (catches typos).
  void only(std::initializer_list<const char*> allowed) const {
    if (!j_->is_object()) error("expected an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j_->begin(); it != j_->end(); ++it)
      if (!ok.count(it.key())) error("unknown field '" + it.key() + "'");
  }

  double number() const {
    if (!j_->is_number()) error("expected a number");
    const double v = j_->get<double>();
    if (!std::isfinite(v)) error("non-finite number");
    return v;
  }
  double positive() const {
    const double v = number();
    if (!(v > 0.0)) error("must be positive");
    return v;
  }
  int integer(int lo = std::numeric_limits<int>::min()) const {
    if (!j_->is_number_integer()) error("expected an integer");
    const auto v = j_->get<long long>();
    if (v < lo || v > std::numeric_limits<int>::max()) error("integer out of range (minimum " + std::to_string(lo) + ")");
    return static_cast<int>(v);
  }
  std::string string() const {
    if (!j_->is_string()) error("expected a string");
    return j_->get<std::string>();
  }
  std::vector<double> numbers() const {
    if (!j_->is_array()) error("expected an array of numbers");
    std::vector<double> v;
    for (std::size_t i = 0; i < size(); ++i) v.push_back(at(i).number());
    return v;
  }

  /// Matrix of the given shape: a number (1x1), a flat array (vector) or an array of rows.
  MatrixXd matrix(Index rows, Index cols) const {
    auto shape = [&](Index r, Index c) {
      return std::to_string(r) + "x" + std::to_string(c);
    };
    if (j_->is_number()) {
      if (rows != 1 || cols != 1) error("expected a " + shape(rows, cols) + " matrix, got a number");
      return MatrixXd::Constant(1, 1, number());
    }
    if (!j_->is_array()) error("expected a " + shape(rows, cols) + " matrix");
    if (size() > 0 && !(*j_)[0].is_array()) {
      const std::vector<double> v = numbers();
      if (static_cast<Index>(v.size()) != rows * cols || (rows != 1 && cols != 1))
        error("expected a " + shape(rows, cols) + " matrix, got a flat array of length " + std::to_string(v.size()));
      MatrixXd m(rows, cols);
      for (Index i = 0; i < rows * cols; ++i) m(i) = v[i];
      return m;
    }
    if (static_cast<Index>(size()) != rows)
      error("expected a " + shape(rows, cols) + " matrix, got " + std::to_string(size()) + " rows");
    MatrixXd m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
      const Node r = at(i);
      const std::vector<double> v = r.numbers();
      if (static_cast<Index>(v.size()) != cols)
        r.error("expected " + std::to_string(cols) + " entries, got " + std::to_string(v.size()));
      for (Index j = 0; j < cols; ++j) m(i, j) = v[j];
    }
    return m;
  }

  /// Coefficient path: a constant matrix, or {"nodes": [...], "interp": "left_constant"|"cubic"}
  /// or {"value": m, "interp": ...}.
  MatrixPath path(const TimeGrid& grid, Index rows, Index cols) const {
    if (!j_->is_object()) return MatrixPath::constant(grid, matrix(rows, cols));
    only({"nodes", "value", "interp"});
    Interp in = Interp::LeftConstant;
    if (has("interp")) {
      const std::string s = at("interp").string();
      if (s == "cubic")
        in = Interp::Cubic;
      else if (s != "left_constant")
        at("interp").error("expected 'left_constant' or 'cubic'");
    }
    if (has("value") == has("nodes")) error("give exactly one of 'value' or 'nodes'");
    if (has("value")) return MatrixPath::constant(grid, at("value").matrix(rows, cols), in);
    const Node nodes = at("nodes");
    if (!nodes.is_array() || static_cast<int>(nodes.size()) != grid.nodes())
      nodes.error("expected " + std::to_string(grid.nodes()) + " node values (N+1)");
    MatrixPath p(grid, rows, cols, in);
    for (int k = 0; k <= grid.N; ++k) p[k] = nodes.at(k).matrix(rows, cols);
    return p;
  }

 private:
  const json* j_;
  std::string where_;
};

inline MatrixPath opt_path(const Node& n, const char* key, const TimeGrid& g, Index r, Index c, const MatrixPath& dflt) {
  return n.has(key) ? n.at(key).path(g, r, c) : dflt;
}

inline MatrixXd opt_matrix(const Node& n, const char* key, Index r, Index c, const MatrixXd& dflt) {
  return n.has(key) ? n.at(key).matrix(r, c) : dflt;
}

inline TimeGrid read_grid(const Node& root) {
  const double T = root.at("T").positive();
  const int N = root.at("N").integer(1);
  return TimeGrid{T, N};
}

}  // namespace io

/// {"kind": "constant", "M", "c"} | {"kind": "step", "M", "boundaries", "blocks"} |
/// {"kind": "sampled", "values"} | {"kind": "interpolate", "a", "b", "s"}.
inline GraphonGrid read_graphon(const io::Node& n) {
  const std::string kind = n.at("kind").string();
  if (kind == "constant") {
    n.only({"kind", "M", "c"});
    const double c = n.at("c").number();
    if (c < 0.0 || c > 1.0) n.at("c").error("graphon values must lie in [0, 1]");
    return GraphonGrid::constant(n.at("M").integer(1), c);
  }
  if (kind == "step") {
    n.only({"kind", "M", "boundaries", "blocks"});
    const std::vector<double> b = n.at("boundaries").numbers();
    if (b.size() < 2) n.at("boundaries").error("need at least two boundaries");
    const Index B = static_cast<Index>(b.size()) - 1;
    const MatrixXd blocks = n.at("blocks").matrix(B, B);
    try {
      return GraphonGrid::step(n.at("M").integer(1), b, blocks);
    } catch (const std::exception& e) {
      n.error(e.what());
    }
  }
  if (kind == "sampled") {
    n.only({"kind", "values"});
    const io::Node v = n.at("values");
    if (!v.is_array() || v.size() == 0) v.error("expected a non-empty square array");
    const auto M = static_cast<Index>(v.size());
    try {
      return GraphonGrid::sampled(v.matrix(M, M));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      v.error(e.what());
    }
  }
  if (kind == "interpolate") {
    n.only({"kind", "a", "b", "s"});
    const double s = n.at("s").number();
    if (s < 0.0 || s > 1.0) n.at("s").error("must lie in [0, 1]");
    try {
      return GraphonGrid::interpolate(read_graphon(n.at("a")), read_graphon(n.at("b")), s);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      n.error(e.what());
    }
  }
  n.at("kind").error("unknown graphon kind '" + kind + "'");
}

namespace io {

inline std::vector<VectorXd> read_means(const Node& n, Index dim, int M) {
  if (n.is_array() && n.size() > 0 && n.raw()[0].is_array() && dim != static_cast<Index>(n.size())) {
    if (static_cast<int>(n.size()) != M) n.error("expected one mean or one mean per index (" + std::to_string(M) + ")");
    std::vector<VectorXd> v;
    for (std::size_t u = 0; u < n.size(); ++u) v.push_back(n.at(u).matrix(dim, 1));
    return v;
  }
  return {n.matrix(dim, 1)};
}

template <class Spec>
inline void read_player(const Node& n, Spec& sp, const TimeGrid& g, Index ns, Index nc, Index na, Index nq) {
  n.only({"A", "B", "C", "D", "E", "F", "b", "sigma", "Q", "R", "G"});
  sp.A = opt_path(n, "A", g, ns, ns, sp.A);
  sp.B = opt_path(n, "B", g, ns, nc, sp.B);
  sp.C = opt_path(n, "C", g, ns, na, sp.C);
  sp.D = opt_path(n, "D", g, ns, ns, sp.D);
  sp.E = opt_path(n, "E", g, ns, nc, sp.E);
  sp.F = opt_path(n, "F", g, ns, na, sp.F);
  sp.b = opt_path(n, "b", g, ns, 1, sp.b);
  sp.sig = opt_path(n, "sigma", g, ns, 1, sp.sig);
  sp.Q = opt_path(n, "Q", g, nq, nq, sp.Q);
  sp.R = opt_path(n, "R", g, nc, nc, sp.R);
  sp.G = opt_matrix(n, "G", nq, nq, sp.G);
}

}  // namespace io

/// Game specification. Missing coefficients default to zero, R to the identity.
inline GameSpec read_game_spec(const json& j, const std::string& origin = "config") {
  const io::Node root(j, origin);
  root.only({"kind", "T", "N", "dims", "graphon", "follower", "leader", "initial", "eps_R", "options", "description"});
  if (root.has("kind") && root.at("kind").string() != "game") root.at("kind").error("expected 'game'");
  const TimeGrid grid = io::read_grid(root);
  const io::Node dn = root.at("dims");
  dn.only({"n1", "n2", "m1", "m2"});
  Dims d{dn.at("n1").integer(1), dn.at("n2").integer(1), dn.at("m1").integer(1), dn.at("m2").integer(1)};
  const GraphonGrid G = read_graphon(root.at("graphon"));
  GameSpec s = GameSpec::zeros(d, grid, G);
  if (root.has("follower")) io::read_player(root.at("follower"), s.f, grid, d.n1, d.m1, d.n1, 2 * d.n1 + d.n2);
  if (root.has("leader")) io::read_player(root.at("leader"), s.l, grid, d.n2, d.m2, d.n1, d.n1 + d.n2);
  if (root.has("initial")) {
    const io::Node in = root.at("initial");
    in.only({"follower_mean", "follower_cov", "leader_mean", "leader_cov"});
    if (in.has("follower_mean")) s.x0f_mean = io::read_means(in.at("follower_mean"), d.n1, G.M());
    s.x0f_cov = io::opt_matrix(in, "follower_cov", d.n1, d.n1, s.x0f_cov);
    s.x0l_mean = io::opt_matrix(in, "leader_mean", d.n2, 1, s.x0l_mean);
    s.x0l_cov = io::opt_matrix(in, "leader_cov", d.n2, d.n2, s.x0l_cov);
  }
  if (root.has("eps_R")) s.eps_R = root.at("eps_R").positive();
  return s;
}

/// General linear graphon-aggregated FBSDE. "coefficients" is one object (shared) or one per index.
inline GfbsdeProblem read_gfbsde_problem(const json& j, const std::string& origin = "config") {
  const io::Node root(j, origin);
  root.only({"kind", "T", "N", "n", "graphon", "coefficients", "initial", "options", "description"});
  if (root.at("kind").string() != "gfbsde") root.at("kind").error("expected 'gfbsde'");
  const TimeGrid grid = io::read_grid(root);
  const int n = root.at("n").integer(1);
  const GraphonGrid G = read_graphon(root.at("graphon"));
  GfbsdeProblem p = GfbsdeProblem::zeros(n, grid, G);
  const GfbsdeCoefficients zero = p.coeffs[0];
  auto read_one = [&](const io::Node& c) {
    c.only({"A11", "A12", "A13", "A21", "A22", "A23", "A31", "A32", "A33", "B1", "B2", "B3", "G1", "G2", "b", "sigma",
            "g", "h"});
    GfbsdeCoefficients k = zero;
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        const std::string key = "A" + std::to_string(a + 1) + std::to_string(b + 1);
        k.A[a][b] = io::opt_path(c, key.c_str(), grid, n, n, k.A[a][b]);
      }
      const std::string key = "B" + std::to_string(a + 1);
      k.B[a] = io::opt_path(c, key.c_str(), grid, n, n, k.B[a]);
    }
    k.G1 = io::opt_matrix(c, "G1", n, n, k.G1);
    k.G2 = io::opt_matrix(c, "G2", n, n, k.G2);
    k.b = io::opt_path(c, "b", grid, n, 1, k.b);
    k.sig = io::opt_path(c, "sigma", grid, n, 1, k.sig);
    k.g = io::opt_path(c, "g", grid, n, 1, k.g);
    k.h = io::opt_matrix(c, "h", n, 1, k.h);
    return k;
  };
  if (root.has("coefficients")) {
    const io::Node c = root.at("coefficients");
    if (c.is_array()) {
      if (static_cast<int>(c.size()) != G.M()) c.error("expected one coefficient object per index (" + std::to_string(G.M()) + ")");
      p.coeffs.clear();
      for (std::size_t u = 0; u < c.size(); ++u) p.coeffs.push_back(read_one(c.at(u)));
    } else {
      p.coeffs = {read_one(c)};
    }
  }
  if (root.has("initial")) {
    const io::Node in = root.at("initial");
    in.only({"mean", "cov"});
    if (in.has("mean")) p.x0_mean = io::read_means(in.at("mean"), n, G.M());
    p.x0_cov = io::opt_matrix(in, "cov", n, n, p.x0_cov);
  }
  return p;
}

/// Kind of a config: "game" (default) or "gfbsde".
inline std::string config_kind(const json& j) {
  if (j.is_object() && j.contains("kind") && j["kind"].is_string()) return j["kind"].get<std::string>();
  return "game";
}

// ---------------------------------------------------------------------------
// CSV

/// 17 significant digits: lossless for doubles and independent of locale.
inline std::string fmt17(double v) {
  char b[40];
  std::snprintf(b, sizeof b, "%.17g", v == 0.0 ? 0.0 : v);
  return b;
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw std::runtime_error(path + ": cannot write");
  }
  void header(const std::vector<std::string>& cols) { line(cols); }
  void row(const std::vector<double>& v) {
    std::vector<std::string> s;
    s.reserve(v.size());
    for (double x : v) s.push_back(fmt17(x));
    line(s);
  }
  void line(const std::vector<std::string>& cols) {
    for (std::size_t i = 0; i < cols.size(); ++i) out_ << (i ? "," : "") << cols[i];
    out_ << '\n';
  }
  const std::string& path() const { return path_; }

 private:
  std::ofstream out_;
  std::string path_;
};

/// Column names name_i_j for an r x c matrix (name for 1x1).
inline std::vector<std::string> matrix_columns(const std::string& name, Index r, Index c) {
  if (r == 1 && c == 1) return {name};
  std::vector<std::string> out;
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) out.push_back(name + "_" + std::to_string(i) + "_" + std::to_string(j));
  return out;
}

/// One row per node: t followed by the row-major entries of each path.
inline void write_paths_csv(const std::string& file, const TimeGrid& grid,
                            const std::vector<std::pair<std::string, const MatrixPath*>>& paths) {
  CsvWriter w(file);
  std::vector<std::string> h{"t"};
  for (const auto& [name, p] : paths) {
    const auto c = matrix_columns(name, p->rows(), p->cols());
    h.insert(h.end(), c.begin(), c.end());
  }
  w.header(h);
  for (int k = 0; k <= grid.N; ++k) {
    std::vector<double> row{grid.t(k)};
    for (const auto& [name, p] : paths) {
      const MatrixXd& m = (*p)[k];
      for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    }
    w.row(row);
  }
}

/// Per-index paths (n x M, column u is index u): rows (t, u, entries...).
inline void write_indexed_csv(const std::string& file, const TimeGrid& grid,
                              const std::vector<std::pair<std::string, const MatrixPath*>>& paths) {
  CsvWriter w(file);
  std::vector<std::string> h{"t", "index"};
  for (const auto& [name, p] : paths) {
    const auto c = matrix_columns(name, p->rows(), 1);
    for (std::size_t i = 0; i < c.size(); ++i) h.push_back(p->rows() == 1 ? name : name + "_" + std::to_string(i));
  }
  w.header(h);
  const Index M = paths.front().second->cols();
  for (int k = 0; k <= grid.N; ++k)
    for (Index u = 0; u < M; ++u) {
      std::vector<double> row{grid.t(k), static_cast<double>(u)};
      for (const auto& [name, p] : paths)
        for (Index i = 0; i < p->rows(); ++i) row.push_back((*p)[k](i, u));
      w.row(row);
    }
}

}  // namespace gsn
