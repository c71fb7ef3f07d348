#include "pidg/ad/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "pidg/common/error.hpp"

namespace pidg::ad {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

void require_same(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.value().shape_string() + " vs " +
                     b.value().shape_string());
  }
}

void require_rank2(const Var& a, const char* op) {
  if (a.value().rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + a.value().shape_string());
  }
}

// Unary elementwise op with derivative expressed through input x and output y.
template <typename F, typename D>
Var unary(const char* op, const Var& a, F f, D dfdx) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape().record(op, std::move(y), {a}, [a, dfdx](Tape& t, const Tensor& g) {
    if (auto* ga = t.grad_slot(a)) {
      const Tensor& x = a.value();
      for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += g[i] * dfdx(x[i]);
    }
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor y = a.value();
  y += b.value();
  return a.tape().record("add", std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (auto* ga = t.grad_slot(a)) *ga += g;
    if (auto* gb = t.grad_slot(b)) *gb += g;
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] - z[i];
  return a.tape().record("sub", std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (auto* ga = t.grad_slot(a)) *ga += g;
    if (auto* gb = t.grad_slot(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * z[i];
  return a.tape().record("mul", std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (auto* ga = t.grad_slot(a)) {
      const Tensor& z = b.value();
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * z[i];
    }
    if (auto* gb = t.grad_slot(b)) {
      const Tensor& x = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * x[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  require_same(a, b, "div");
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] / z[i];
  return a.tape().record("div", std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& x = a.value();
    const Tensor& z = b.value();
    if (auto* ga = t.grad_slot(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / z[i];
    }
    if (auto* gb = t.grad_slot(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i] * x[i] / (z[i] * z[i]);
    }
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = s * x[i];
  return a.tape().record("scale", std::move(y), {a}, [a, s](Tape& t, const Tensor& g) {
    if (auto* ga = t.grad_slot(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
    }
  });
}

Var add_scalar(const Var& a, double s) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + s;
  return a.tape().record("add_scalar", std::move(y), {a}, [a](Tape& t, const Tensor& g) {
    if (auto* ga = t.grad_slot(a)) *ga += g;
  });
}

Var square(const Var& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var exp(const Var& a) {
  return unary("exp", a, [](double x) { return std::exp(x); },
               [](double x) { return std::exp(x); });
}

Var sin(const Var& a) {
  return unary("sin", a, [](double x) { return std::sin(x); },
               [](double x) { return std::cos(x); });
}

Var cos(const Var& a) {
  return unary("cos", a, [](double x) { return std::cos(x); },
               [](double x) { return -std::sin(x); });
}

Var relu(const Var& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  auto s = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  return unary("sigmoid", a, s, [s](double x) {
    const double v = s(x);
    return v * (1.0 - v);
  });
}

Var abs(const Var& a) {
  // Subgradient 0 at the kink.
  return unary("abs", a, [](double x) { return std::abs(x); },
               [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape().record("sum", Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    if (auto* ga = t.grad_slot(a)) {
      const double gv = g[0];
      for (auto& v : ga->values()) v += gv;
    }
  });
}

Var mean(const Var& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const double inv = 1.0 / static_cast<double>(n);
  return a.tape().record("mean", Tensor::scalar(s * inv), {a}, [a, inv](Tape& t, const Tensor& g) {
    if (auto* ga = t.grad_slot(a)) {
      const double gv = g[0] * inv;
      for (auto& v : ga->values()) v += gv;
    }
  });
}

Var sum_cols(const Var& a) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor y({r, 1});
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x[i * c + j];
    y[i] = s;
  }
  return a.tape().record("sum_cols", std::move(y), {a}, [a, r, c](Tape& t, const Tensor& g) {
    if (auto* ga = t.grad_slot(a)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[i];
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const Tensor& x = a.value();
  const Tensor& w = b.value();
  if (x.cols() != w.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + x.shape_string() + " * " +
                     w.shape_string());
  }
  const auto r = static_cast<Eigen::Index>(x.rows());
  const auto k = static_cast<Eigen::Index>(x.cols());
  const auto c = static_cast<Eigen::Index>(w.cols());
  Tensor y({x.rows(), w.cols()});
  MutMap(y.data(), r, c).noalias() = ConstMap(x.data(), r, k) * ConstMap(w.data(), k, c);
  return a.tape().record("matmul", std::move(y), {a, b}, [a, b, r, k, c](Tape& t, const Tensor& g) {
    ConstMap gm(g.data(), r, c);
    if (auto* ga = t.grad_slot(a)) {
      MutMap(ga->data(), r, k).noalias() += gm * ConstMap(b.value().data(), k, c).transpose();
    }
    if (auto* gb = t.grad_slot(b)) {
      MutMap(gb->data(), k, c).noalias() += ConstMap(a.value().data(), r, k).transpose() * gm;
    }
  });
}

Var add_row(const Var& a, const Var& row) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  if (row.value().size() != c) {
    throw ShapeError("add_row: row of size " + std::to_string(row.value().size()) +
                     " for matrix " + x.shape_string());
  }
  Tensor y = x;
  const Tensor& b = row.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] += b[j];
  return a.tape().record("add_row", std::move(y), {a, row},
                         [a, row, r, c](Tape& t, const Tensor& g) {
                           if (auto* ga = t.grad_slot(a)) *ga += g;
                           if (auto* gb = t.grad_slot(row)) {
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j) (*gb)[j] += g[i * c + j];
                           }
                         });
}

Var mul_col(const Var& a, const Var& col) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  if (col.value().size() != r) {
    throw ShapeError("mul_col: column of size " + std::to_string(col.value().size()) +
                     " for matrix " + x.shape_string());
  }
  const Tensor& s = col.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = x[i * c + j] * s[i];
  return a.tape().record("mul_col", std::move(y), {a, col}, [a, col, r, c](Tape& t, const Tensor& g) {
    const Tensor& x = a.value();
    const Tensor& s = col.value();
    if (auto* ga = t.grad_slot(a)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[i * c + j] * s[i];
    }
    if (auto* gs = t.grad_slot(col)) {
      for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * x[i * c + j];
        (*gs)[i] += acc;
      }
    }
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  if (begin > end || end > c) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of " + std::to_string(c) + " columns");
  }
  const std::size_t w = end - begin;
  Tensor y({r, w});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) y[i * w + j] = x[i * c + begin + j];
  return a.tape().record("slice_cols", std::move(y), {a},
                         [a, r, c, w, begin](Tape& t, const Tensor& g) {
                           if (auto* ga = t.grad_slot(a)) {
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < w; ++j)
                                 (*ga)[i * c + begin + j] += g[i * w + j];
                           }
                         });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t r = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != r) throw ShapeError("concat_cols: row counts differ");
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  Tensor y({r, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& x = parts[k].value();
    const std::size_t w = widths[k];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) y[i * total + off + j] = x[i * w + j];
    off += w;
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].tape().record(
      "concat_cols", std::move(y), parts, [ps, widths, r, total](Tape& t, const Tensor& g) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < ps.size(); ++k) {
          const std::size_t w = widths[k];
          if (auto* gp = t.grad_slot(ps[k])) {
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < w; ++j) (*gp)[i * w + j] += g[i * total + off + j];
          }
          off += w;
        }
      });
}

Var gather_rows(const Var& table, std::span<const std::size_t> rows) {
  const Tensor& x = table.value();
  const std::size_t n = x.rows(), c = x.cols();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Tensor y({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(x.data() + idx[i] * c, c, y.data() + i * c);
  }
  return table.tape().record("gather_rows", std::move(y), {table},
                             [table, idx, c](Tape& t, const Tensor& g) {
                               if (auto* gt = t.grad_slot(table)) {
                                 for (std::size_t i = 0; i < idx.size(); ++i)
                                   for (std::size_t j = 0; j < c; ++j)
                                     (*gt)[idx[i] * c + j] += g[i * c + j];
                               }
                             });
}

Var reshape(const Var& a, std::vector<std::size_t> shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return a.tape().record("reshape", std::move(y), {a}, [a](Tape& t, const Tensor& g) {
    if (auto* ga = t.grad_slot(a)) *ga += g;
  });
}

Var select_rows(const std::vector<bool>& mask, const Var& a, const Var& b) {
  require_same(a, b, "select_rows");
  const std::size_t r = a.value().rows(), c = a.value().cols();
  if (mask.size() != r) throw ShapeError("select_rows: mask length differs from row count");
  Tensor y(a.value().shape());
  for (std::size_t i = 0; i < r; ++i) {
    const Tensor& src = mask[i] ? a.value() : b.value();
    std::copy_n(src.data() + i * c, c, y.data() + i * c);
  }
  return a.tape().record("select_rows", std::move(y), {a, b},
                         [mask, a, b, r, c](Tape& t, const Tensor& g) {
                           Tensor* ga = t.grad_slot(a);
                           Tensor* gb = t.grad_slot(b);
                           for (std::size_t i = 0; i < r; ++i) {
                             Tensor* dst = mask[i] ? ga : gb;
                             if (!dst) continue;
                             for (std::size_t j = 0; j < c; ++j) (*dst)[i * c + j] += g[i * c + j];
                           }
                         });
}

}  // namespace pidg::ad
