#pragma once

// Square linear sum assignment.
//
// Shortest-augmenting-path Hungarian method in double precision, O(C^3).
// Among all optimal assignments the lexicographically smallest permutation
// is returned: once optimal dual potentials are known, an assignment is
// optimal iff it uses only tight edges (zero reduced cost), so the solver
// walks rows in order and moves each row to its smallest tight column that
// still admits a perfect matching of the remaining rows.

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "clewi/errors.hpp"
#include "clewi/tensor.hpp"

namespace clewi {

enum class Objective { Minimize, Maximize };

struct Assignment {
  /// perm[i] = column assigned to row i.
  std::vector<std::size_t> perm;
  /// Sum over rows of cost[i][perm[i]], in the caller's orientation.
  double objective = 0.0;
};

namespace detail {

class TightGraph {
 public:
  TightGraph(std::span<const double> a, std::size_t n, const std::vector<double>& u,
             const std::vector<double>& v, double tol)
      : n_(n), tight_(n * n) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        tight_[i * n + j] = a[i * n + j] - u[i] - v[j] <= tol;
  }

  bool tight(std::size_t i, std::size_t j) const { return tight_[i * n_ + j]; }

  // Lexicographically smallest perfect matching among tight edges, starting
  // from the perfect matching `row_to_col`.
  void make_lexicographic(std::vector<std::size_t>& row_to_col) const {
    std::vector<std::size_t> col_to_row(n_);
    for (std::size_t i = 0; i < n_; ++i) col_to_row[row_to_col[i]] = i;
    for (std::size_t i = 0; i < n_; ++i) {
      const std::size_t current = row_to_col[i];
      for (std::size_t j = 0; j < current; ++j) {
        if (!tight(i, j) || col_to_row[j] < i) continue;
        // Row r gives up j; it needs an alternating path through rows > i
        // that ends on the column row i releases.
        const std::size_t r = col_to_row[j];
        std::vector<char> visited(n_, 0);
        visited[j] = 1;
        if (augment(r, current, i, visited, row_to_col, col_to_row)) {
          row_to_col[i] = j;
          col_to_row[j] = i;
          break;
        }
      }
    }
  }

 private:
  bool augment(std::size_t row, std::size_t target, std::size_t fixed_upto,
               std::vector<char>& visited,
               std::vector<std::size_t>& row_to_col,
               std::vector<std::size_t>& col_to_row) const {
    for (std::size_t c = 0; c < n_; ++c) {
      if (visited[c] || !tight(row, c)) continue;
      if (c != target && col_to_row[c] <= fixed_upto) continue;
      visited[c] = 1;
      if (c == target ||
          augment(col_to_row[c], target, fixed_upto, visited, row_to_col, col_to_row)) {
        row_to_col[row] = c;
        col_to_row[c] = row;
        return true;
      }
    }
    return false;
  }

  std::size_t n_;
  std::vector<char> tight_;
};

}  // namespace detail

/// Optimal assignment for a row-major n x n cost matrix.
inline Assignment solve_lsap(std::span<const double> cost, std::size_t n,
                             Objective objective = Objective::Minimize) {
  if (cost.size() != n * n)
    throw ShapeError("solve_lsap: cost matrix is not square (" + std::to_string(cost.size()) +
                     " entries for n = " + std::to_string(n) + ")");
  double max_abs = 0.0;
  for (double c : cost) {
    if (!std::isfinite(c)) throw Error("solve_lsap: cost matrix has non-finite entries");
    max_abs = std::max(max_abs, std::abs(c));
  }
  Assignment out;
  if (n == 0) return out;

  const double sign = objective == Objective::Maximize ? -1.0 : 1.0;
  std::vector<double> a(n * n);
  for (std::size_t k = 0; k < n * n; ++k) a[k] = sign * cost[k];

  // 1-based potentials; column 0 is the virtual source.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> owner(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0);
  }

  out.perm.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) out.perm[owner[j] - 1] = j - 1;

  std::vector<double> row_pot(u.begin() + 1, u.end()), col_pot(v.begin() + 1, v.end());
  const double tol = 1e-11 * double(n) * (1.0 + max_abs);
  detail::TightGraph(a, n, row_pot, col_pot, tol).make_lexicographic(out.perm);

  for (std::size_t i = 0; i < n; ++i) out.objective += cost[i * n + out.perm[i]];
  return out;
}

inline Assignment solve_lsap(const std::vector<double>& cost, std::size_t n,
                             Objective objective = Objective::Minimize) {
  return solve_lsap(std::span<const double>(cost), n, objective);
}

template <class T>
Assignment solve_lsap(const BasicTensor<T>& cost, Objective objective = Objective::Minimize) {
  if (cost.rank() != 2 || cost.dim(0) != cost.dim(1))
    throw ShapeError("solve_lsap: expected a square matrix, got " + shape_str(cost.shape()));
  std::vector<double> c(cost.values().begin(), cost.values().end());
  return solve_lsap(std::span<const double>(c), cost.dim(0), objective);
}

}  // namespace clewi
