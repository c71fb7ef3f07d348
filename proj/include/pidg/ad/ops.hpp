#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pidg/ad/tape.hpp"

namespace pidg::ad {

// Elementwise, equal shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
Var exp(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var abs(const Var& a);
// Clamps into [lo, hi]; the gradient is zero where the clamp is active.
Var clamp(const Var& a, double lo, double hi);

// Reductions to a single value.
Var sum(const Var& a);
Var mean(const Var& a);
// Row sums: R x C -> R x 1.
Var sum_cols(const Var& a);

// (R x K) * (K x C).
Var matmul(const Var& a, const Var& b);
// a: R x C plus a 1 x C row broadcast over rows.
Var add_row(const Var& a, const Var& row);
// a: R x C times an R x 1 column broadcast over columns.
Var mul_col(const Var& a, const Var& col);

Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(const Var& table, std::span<const std::size_t> rows);
Var reshape(const Var& a, std::vector<std::size_t> shape);

// Row-wise blend: mask[r] ? a[r] : b[r]. The mask is data, not a variable.
Var select_rows(const std::vector<bool>& mask, const Var& a, const Var& b);

}  // namespace pidg::ad
