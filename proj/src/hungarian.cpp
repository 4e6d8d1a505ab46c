#include "xdet/rtdetr/hungarian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace xdet {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Dijkstra-style search for the cheapest augmenting path from free row i.
int augmenting_path(int nc, const std::vector<double>& cost, std::vector<double>& u,
                    std::vector<double>& v, std::vector<int>& path, std::vector<int>& row4col,
                    std::vector<double>& shortest, int i, std::vector<bool>& sr,
                    std::vector<bool>& sc, std::vector<int>& remaining, double* out_min) {
  double min_val = 0;
  int num_remaining = nc;
  for (int it = 0; it < nc; ++it) remaining[it] = nc - it - 1;
  std::fill(sr.begin(), sr.end(), false);
  std::fill(sc.begin(), sc.end(), false);
  std::fill(shortest.begin(), shortest.end(), kInf);

  int sink = -1;
  while (sink == -1) {
    int index = -1;
    double lowest = kInf;
    sr[static_cast<size_t>(i)] = true;
    for (int it = 0; it < num_remaining; ++it) {
      const int j = remaining[it];
      const double r = min_val + cost[static_cast<size_t>(i) * nc + j] - u[static_cast<size_t>(i)] -
                       v[static_cast<size_t>(j)];
      if (r < shortest[static_cast<size_t>(j)]) {
        path[static_cast<size_t>(j)] = i;
        shortest[static_cast<size_t>(j)] = r;
      }
      if (shortest[static_cast<size_t>(j)] < lowest ||
          (shortest[static_cast<size_t>(j)] == lowest && row4col[static_cast<size_t>(j)] == -1)) {
        lowest = shortest[static_cast<size_t>(j)];
        index = it;
      }
    }
    min_val = lowest;
    if (min_val == kInf) return -1;  // unreachable with finite costs
    const int j = remaining[index];
    if (row4col[static_cast<size_t>(j)] == -1)
      sink = j;
    else
      i = row4col[static_cast<size_t>(j)];
    sc[static_cast<size_t>(j)] = true;
    remaining[index] = remaining[--num_remaining];
  }
  *out_min = min_val;
  return sink;
}

}  // namespace

std::vector<int> solve_assignment(const std::vector<double>& cost, int n_rows, int n_cols) {
  if (n_rows == 0) return {};
  if (n_rows > n_cols) throw std::invalid_argument("assignment: more rows than columns");
  if (static_cast<int>(cost.size()) != n_rows * n_cols)
    throw std::invalid_argument("assignment: cost matrix size mismatch");
  for (double c : cost)
    if (!std::isfinite(c)) throw std::invalid_argument("assignment: non-finite cost");

  std::vector<double> u(static_cast<size_t>(n_rows), 0.0);
  std::vector<double> v(static_cast<size_t>(n_cols), 0.0);
  std::vector<double> shortest(static_cast<size_t>(n_cols));
  std::vector<int> path(static_cast<size_t>(n_cols), -1);
  std::vector<int> col4row(static_cast<size_t>(n_rows), -1);
  std::vector<int> row4col(static_cast<size_t>(n_cols), -1);
  std::vector<bool> sr(static_cast<size_t>(n_rows));
  std::vector<bool> sc(static_cast<size_t>(n_cols));
  std::vector<int> remaining(static_cast<size_t>(n_cols));

  for (int cur_row = 0; cur_row < n_rows; ++cur_row) {
    double min_val = 0;
    const int sink = augmenting_path(n_cols, cost, u, v, path, row4col, shortest, cur_row, sr, sc,
                                     remaining, &min_val);
    if (sink < 0) throw std::runtime_error("assignment: no augmenting path");

    u[static_cast<size_t>(cur_row)] += min_val;
    for (int i = 0; i < n_rows; ++i)
      if (sr[static_cast<size_t>(i)] && i != cur_row)
        u[static_cast<size_t>(i)] +=
            min_val - shortest[static_cast<size_t>(col4row[static_cast<size_t>(i)])];
    for (int j = 0; j < n_cols; ++j)
      if (sc[static_cast<size_t>(j)]) v[static_cast<size_t>(j)] -= min_val - shortest[static_cast<size_t>(j)];

    int j = sink;
    while (true) {
      const int i = path[static_cast<size_t>(j)];
      row4col[static_cast<size_t>(j)] = i;
      std::swap(col4row[static_cast<size_t>(i)], j);
      if (i == cur_row) break;
    }
  }
  return col4row;
}

double assignment_cost(const std::vector<double>& cost, int n_cols,
                       const std::vector<int>& row_to_col) {
  double total = 0;
  for (size_t r = 0; r < row_to_col.size(); ++r)
    total += cost[r * static_cast<size_t>(n_cols) + static_cast<size_t>(row_to_col[r])];
  return total;
}

}  // namespace xdet
