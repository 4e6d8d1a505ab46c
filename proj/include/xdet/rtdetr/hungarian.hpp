#pragma once

#include <vector>

namespace xdet {

// Exact minimum-cost rectangular assignment (rows <= cols) via shortest
// augmenting paths. Returns, for each row, the matched column.
std::vector<int> solve_assignment(const std::vector<double>& cost, int n_rows, int n_cols);

double assignment_cost(const std::vector<double>& cost, int n_cols, const std::vector<int>& row_to_col);

}  // namespace xdet
