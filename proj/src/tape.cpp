#include "sdl/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace sdl {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void guard_finite(const Tensor& t, const char* op) {
  if (!all_finite(t.data)) fail(Err::NonFiniteValue, std::string(op) + " produced a non-finite value");
}

// (outer, len, inner) decomposition of `shape` around `axis`
struct AxisView {
  int64_t outer = 1, len = 1, inner = 1;
};

AxisView axis_view(const std::vector<int64_t>& shape, int axis) {
  require(axis >= 0 && axis < static_cast<int>(shape.size()), Err::InvalidAxis,
          "axis " + std::to_string(axis) + " out of range for rank " +
              std::to_string(shape.size()));
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<size_t>(i)];
  v.len = shape[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

// C[m x n] += / = A[m x k] * B[k x n]
void mm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c,
           int64_t m, int64_t k, int64_t n, bool accumulate) {
  if (!accumulate) std::memset(c, 0, static_cast<size_t>(m * n) * sizeof(double));
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
void mm_nt(const double* __restrict a, const double* __restrict b, double* __restrict c,
           int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (int64_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
void mm_tn(const double* __restrict a, const double* __restrict b, double* __restrict c,
           int64_t m, int64_t k, int64_t n) {
  for (int64_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void softmax_row(const double* x, double* p, int64_t n) {
  double m = x[0];
  for (int64_t j = 1; j < n; ++j) m = std::max(m, x[j]);
  double z = 0.0;
  for (int64_t j = 0; j < n; ++j) {
    p[j] = std::exp(x[j] - m);
    z += p[j];
  }
  double inv = 1.0 / z;
  for (int64_t j = 0; j < n; ++j) p[j] *= inv;
}

}  // namespace

void Tape::reset() {
  nodes_.clear();
  grads_.clear();
}

int Tape::append(Tensor value, std::vector<int> parents,
                 std::function<void(Tape&, const Tensor&)> backprop, bool trainable) {
  Node n;
  n.value = std::move(value);
  n.parents = std::move(parents);
  n.backprop = std::move(backprop);
  n.trainable = trainable;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::accumulate(int node, const double* g, size_t n) {
  if (node < 0) return;
  Tensor& dst = grads_[static_cast<size_t>(node)];
  for (size_t i = 0; i < n; ++i) dst.data[i] += g[i];
}

Tensor Tape::leaf(Tensor value, bool trainable) {
  if (!recording()) {
    value.node = -1;
    return value;
  }
  Tensor out = value;
  out.node = append(std::move(value), {}, nullptr, trainable);
  return out;
}

// ---- arithmetic -----------------------------------------------------------

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), Err::ShapeMismatch, "add: " + a.shape_str() + " vs " + b.shape_str());
  Tensor out(a.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
  guard_finite(out, "add");
  if (!recording()) return out;
  out.node = append(out, {a.node, b.node}, [pa = a.node, pb = b.node](Tape& t, const Tensor& g) {
    t.accumulate(pa, g.data.data(), g.data.size());
    t.accumulate(pb, g.data.data(), g.data.size());
  });
  return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), Err::ShapeMismatch, "sub: " + a.shape_str() + " vs " + b.shape_str());
  Tensor out(a.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] - b.data[i];
  guard_finite(out, "sub");
  if (!recording()) return out;
  out.node = append(out, {a.node, b.node}, [pa = a.node, pb = b.node](Tape& t, const Tensor& g) {
    t.accumulate(pa, g.data.data(), g.data.size());
    if (pb >= 0) {
      Tensor& dst = t.grads_[static_cast<size_t>(pb)];
      for (size_t i = 0; i < g.data.size(); ++i) dst.data[i] -= g.data[i];
    }
  });
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), Err::ShapeMismatch, "mul: " + a.shape_str() + " vs " + b.shape_str());
  Tensor out(a.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
  guard_finite(out, "mul");
  if (!recording()) return out;
  out.node = append(out, {a.node, b.node},
                    [pa = a.node, pb = b.node, av = a.data, bv = b.data](Tape& t, const Tensor& g) {
                      if (pa >= 0) {
                        Tensor& da = t.grads_[static_cast<size_t>(pa)];
                        for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * bv[i];
                      }
                      if (pb >= 0) {
                        Tensor& db = t.grads_[static_cast<size_t>(pb)];
                        for (size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i] * av[i];
                      }
                    });
  return out;
}

Tensor Tape::scale(const Tensor& x, double c) {
  Tensor out(x.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = c * x.data[i];
  guard_finite(out, "scale");
  if (!recording()) return out;
  out.node = append(out, {x.node}, [p = x.node, c](Tape& t, const Tensor& g) {
    if (p < 0) return;
    Tensor& dx = t.grads_[static_cast<size_t>(p)];
    for (size_t i = 0; i < g.data.size(); ++i) dx.data[i] += c * g.data[i];
  });
  return out;
}

Tensor Tape::add_scalar(const Tensor& x, double c) {
  Tensor out(x.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.data[i] + c;
  guard_finite(out, "add_scalar");
  if (!recording()) return out;
  out.node = append(out, {x.node}, [p = x.node](Tape& t, const Tensor& g) {
    t.accumulate(p, g.data.data(), g.data.size());
  });
  return out;
}

Tensor Tape::add_bias(const Tensor& x, const Tensor& bias) {
  int64_t d = x.last_dim();
  require(bias.numel() == d, Err::ShapeMismatch,
          "add_bias: bias " + bias.shape_str() + " vs inner dim " + std::to_string(d));
  int64_t rows = x.numel() / d;
  Tensor out(x.shape);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < d; ++j)
      out.data[static_cast<size_t>(r * d + j)] =
          x.data[static_cast<size_t>(r * d + j)] + bias.data[static_cast<size_t>(j)];
  guard_finite(out, "add_bias");
  if (!recording()) return out;
  out.node = append(out, {x.node, bias.node},
                    [px = x.node, pb = bias.node, rows, d](Tape& t, const Tensor& g) {
                      t.accumulate(px, g.data.data(), g.data.size());
                      if (pb >= 0) {
                        Tensor& db = t.grads_[static_cast<size_t>(pb)];
                        for (int64_t r = 0; r < rows; ++r)
                          for (int64_t j = 0; j < d; ++j)
                            db.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(r * d + j)];
                      }
                    });
  return out;
}

Tensor Tape::tile_rows_add(const Tensor& x, const Tensor& e) {
  require(x.ndim() == 2 && e.ndim() == 2 && x.cols() == e.cols(), Err::ShapeMismatch,
          "tile_rows_add: " + x.shape_str() + " vs " + e.shape_str());
  int64_t n = e.rows(), d = e.cols();
  require(x.rows() % n == 0, Err::ShapeMismatch, "tile_rows_add: rows not a multiple of tile");
  Tensor out(x.shape);
  int64_t rows = x.rows();
  for (int64_t r = 0; r < rows; ++r) {
    const double* er = e.data.data() + (r % n) * d;
    const double* xr = x.data.data() + r * d;
    double* orow = out.data.data() + r * d;
    for (int64_t j = 0; j < d; ++j) orow[j] = xr[j] + er[j];
  }
  guard_finite(out, "tile_rows_add");
  if (!recording()) return out;
  out.node = append(out, {x.node, e.node},
                    [px = x.node, pe = e.node, rows, n, d](Tape& t, const Tensor& g) {
                      t.accumulate(px, g.data.data(), g.data.size());
                      if (pe >= 0) {
                        Tensor& de = t.grads_[static_cast<size_t>(pe)];
                        for (int64_t r = 0; r < rows; ++r) {
                          double* drow = de.data.data() + (r % n) * d;
                          const double* grow = g.data.data() + r * d;
                          for (int64_t j = 0; j < d; ++j) drow[j] += grow[j];
                        }
                      }
                    });
  return out;
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2, Err::ShapeMismatch, "matmul requires 2-D operands");
  require(a.cols() == b.rows(), Err::ShapeMismatch,
          "matmul: inner dimensions differ, " + a.shape_str() + " vs " + b.shape_str());
  int64_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  mm_nn(a.data.data(), b.data.data(), out.data.data(), m, k, n, true);
  guard_finite(out, "matmul");
  if (!recording()) return out;
  out.node = append(out, {a.node, b.node},
                    [pa = a.node, pb = b.node, av = a.data, bv = b.data, m, k, n](
                        Tape& t, const Tensor& g) {
                      if (pa >= 0)
                        mm_nt(g.data.data(), bv.data(), t.grads_[static_cast<size_t>(pa)].data.data(),
                              m, n, k);
                      if (pb >= 0)
                        mm_tn(av.data(), g.data.data(), t.grads_[static_cast<size_t>(pb)].data.data(),
                              k, m, n);
                    });
  return out;
}

Tensor Tape::transpose(const Tensor& x) {
  require(x.ndim() == 2, Err::ShapeMismatch, "transpose requires a 2-D tensor");
  int64_t m = x.rows(), n = x.cols();
  Tensor out({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.data[static_cast<size_t>(j * m + i)] = x.at2(i, j);
  if (!recording()) return out;
  out.node = append(out, {x.node}, [p = x.node, m, n](Tape& t, const Tensor& g) {
    if (p < 0) return;
    Tensor& dx = t.grads_[static_cast<size_t>(p)];
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        dx.data[static_cast<size_t>(i * n + j)] += g.data[static_cast<size_t>(j * m + i)];
  });
  return out;
}

// ---- shape / data movement -------------------------------------------------

Tensor Tape::reshape(const Tensor& x, std::vector<int64_t> shape) {
  require(Tensor::count(shape) == x.numel(), Err::ShapeMismatch,
          "reshape: element count mismatch " + x.shape_str());
  Tensor out(std::move(shape), x.data);
  if (!recording()) return out;
  out.node = append(out, {x.node}, [p = x.node](Tape& t, const Tensor& g) {
    t.accumulate(p, g.data.data(), g.data.size());
  });
  return out;
}

Tensor Tape::gather(const Tensor& x, std::shared_ptr<const std::vector<int64_t>> index,
                    std::vector<int64_t> out_shape) {
  require(static_cast<int64_t>(index->size()) == Tensor::count(out_shape), Err::ShapeMismatch,
          "gather: index length does not match output shape");
  int64_t n = x.numel();
  Tensor out(std::move(out_shape));
  const auto& idx = *index;
  for (size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < n, Err::IndexOutOfRange, "gather index out of range");
    out.data[i] = x.data[static_cast<size_t>(idx[i])];
  }
  if (!recording()) return out;
  out.node = append(out, {x.node}, [p = x.node, index](Tape& t, const Tensor& g) {
    if (p < 0) return;
    Tensor& dx = t.grads_[static_cast<size_t>(p)];
    const auto& ix = *index;
    for (size_t i = 0; i < ix.size(); ++i) dx.data[static_cast<size_t>(ix[i])] += g.data[i];
  });
  return out;
}

Tensor Tape::gather_rows(const Tensor& x, std::shared_ptr<const std::vector<int64_t>> rows) {
  require(x.ndim() == 2, Err::ShapeMismatch, "gather_rows requires a 2-D tensor");
  int64_t m = x.rows(), d = x.cols();
  int64_t out_rows = static_cast<int64_t>(rows->size());
  Tensor out({out_rows, d});
  const auto& idx = *rows;
  for (int64_t r = 0; r < out_rows; ++r) {
    require(idx[static_cast<size_t>(r)] >= 0 && idx[static_cast<size_t>(r)] < m,
            Err::IndexOutOfRange, "gather_rows index out of range");
    std::memcpy(out.data.data() + r * d, x.data.data() + idx[static_cast<size_t>(r)] * d,
                static_cast<size_t>(d) * sizeof(double));
  }
  if (!recording()) return out;
  out.node = append(out, {x.node}, [p = x.node, rows, d](Tape& t, const Tensor& g) {
    if (p < 0) return;
    Tensor& dx = t.grads_[static_cast<size_t>(p)];
    const auto& ix = *rows;
    for (size_t r = 0; r < ix.size(); ++r) {
      double* dst = dx.data.data() + ix[r] * d;
      const double* src = g.data.data() + static_cast<int64_t>(r) * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return out;
}

Tensor Tape::concat_rows(const std::vector<Tensor>& xs) {
  require(!xs.empty(), Err::ShapeMismatch, "concat_rows: empty input list");
  std::vector<int64_t> trailing(xs[0].shape.begin() + 1, xs[0].shape.end());
  int64_t stride = 1;
  for (int64_t t : trailing) stride *= t;
  int64_t total = 0;
  for (const Tensor& x : xs) {
    require(std::equal(trailing.begin(), trailing.end(), x.shape.begin() + 1, x.shape.end()),
            Err::ShapeMismatch, "concat_rows: trailing shapes differ");
    total += x.shape[0];
  }
  std::vector<int64_t> out_shape = {total};
  out_shape.insert(out_shape.end(), trailing.begin(), trailing.end());
  Tensor out(std::move(out_shape));
  std::vector<int> parents;
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const Tensor& x : xs) {
    std::memcpy(out.data.data() + off, x.data.data(), x.data.size() * sizeof(double));
    parents.push_back(x.node);
    offsets.push_back(off);
    off += x.numel();
  }
  if (!recording()) return out;
  std::vector<int64_t> sizes;
  for (const Tensor& x : xs) sizes.push_back(x.numel());
  out.node = append(out, parents,
                    [parents, offsets, sizes](Tape& t, const Tensor& g) {
                      for (size_t i = 0; i < parents.size(); ++i)
                        if (parents[i] >= 0)
                          t.accumulate(parents[i], g.data.data() + offsets[i],
                                       static_cast<size_t>(sizes[i]));
                    });
  return out;
}

// ---- nonlinearities and norms ------------------------------------------------

Tensor Tape::softmax(const Tensor& x, int axis) {
  AxisView v = axis_view(x.shape, axis);
  Tensor out(x.shape);
  std::vector<double> buf(static_cast<size_t>(v.len));
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t in = 0; in < v.inner; ++in) {
      int64_t base = o * v.len * v.inner + in;
      double m = x.data[static_cast<size_t>(base)];
      for (int64_t l = 1; l < v.len; ++l)
        m = std::max(m, x.data[static_cast<size_t>(base + l * v.inner)]);
      double z = 0.0;
      for (int64_t l = 0; l < v.len; ++l) {
        buf[static_cast<size_t>(l)] = std::exp(x.data[static_cast<size_t>(base + l * v.inner)] - m);
        z += buf[static_cast<size_t>(l)];
      }
      for (int64_t l = 0; l < v.len; ++l)
        out.data[static_cast<size_t>(base + l * v.inner)] = buf[static_cast<size_t>(l)] / z;
    }
  guard_finite(out, "softmax");
  if (!recording()) return out;
  out.node = append(out, {x.node}, [p = x.node, v, pv = out.data](Tape& t, const Tensor& g) {
    if (p < 0) return;
    Tensor& dx = t.grads_[static_cast<size_t>(p)];
    for (int64_t o = 0; o < v.outer; ++o)
      for (int64_t in = 0; in < v.inner; ++in) {
        int64_t base = o * v.len * v.inner + in;
        double dot = 0.0;
        for (int64_t l = 0; l < v.len; ++l) {
          size_t i = static_cast<size_t>(base + l * v.inner);
          dot += g.data[i] * pv[i];
        }
        for (int64_t l = 0; l < v.len; ++l) {
          size_t i = static_cast<size_t>(base + l * v.inner);
          dx.data[i] += pv[i] * (g.data[i] - dot);
        }
      }
  });
  return out;
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  int64_t d = x.last_dim();
  require(gamma.numel() == d && beta.numel() == d, Err::ShapeMismatch,
          "layer_norm: gamma/beta must match inner dim " + std::to_string(d));
  int64_t rows = x.numel() / d;
  Tensor out(x.shape);
  std::vector<double> norm(static_cast<size_t>(rows * d));  // pre-affine normalized values
  std::vector<double> inv_std(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = inv;
    double* nr = norm.data() + r * d;
    double* orow = out.data.data() + r * d;
    for (int64_t j = 0; j < d; ++j) {
      nr[j] = (xr[j] - mu) * inv;
      orow[j] = gamma.data[static_cast<size_t>(j)] * nr[j] + beta.data[static_cast<size_t>(j)];
    }
  }
  guard_finite(out, "layer_norm");
  if (!recording()) return out;
  out.node = append(
      out, {x.node, gamma.node, beta.node},
      [px = x.node, pg = gamma.node, pb = beta.node, gv = gamma.data, norm = std::move(norm),
       inv_std = std::move(inv_std), rows, d](Tape& t, const Tensor& g) {
        if (pg >= 0) {
          Tensor& dg = t.grads_[static_cast<size_t>(pg)];
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j)
              dg.data[static_cast<size_t>(j)] +=
                  g.data[static_cast<size_t>(r * d + j)] * norm[static_cast<size_t>(r * d + j)];
        }
        if (pb >= 0) {
          Tensor& db = t.grads_[static_cast<size_t>(pb)];
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j)
              db.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(r * d + j)];
        }
        if (px >= 0) {
          Tensor& dx = t.grads_[static_cast<size_t>(px)];
          for (int64_t r = 0; r < rows; ++r) {
            const double* grow = g.data.data() + r * d;
            const double* nr = norm.data() + r * d;
            double mean_h = 0.0, mean_hn = 0.0;
            for (int64_t j = 0; j < d; ++j) {
              double h = grow[j] * gv[static_cast<size_t>(j)];
              mean_h += h;
              mean_hn += h * nr[j];
            }
            mean_h /= static_cast<double>(d);
            mean_hn /= static_cast<double>(d);
            double inv = inv_std[static_cast<size_t>(r)];
            double* drow = dx.data.data() + r * d;
            for (int64_t j = 0; j < d; ++j) {
              double h = grow[j] * gv[static_cast<size_t>(j)];
              drow[j] += inv * (h - mean_h - nr[j] * mean_hn);
            }
          }
        }
      });
  return out;
}

Tensor Tape::gelu(const Tensor& x) {
  Tensor out(x.shape);
  for (size_t i = 0; i < x.data.size(); ++i) {
    double v = x.data[i];
    out.data[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  guard_finite(out, "gelu");
  if (!recording()) return out;
  out.node = append(out, {x.node}, [p = x.node, xv = x.data](Tape& t, const Tensor& g) {
    if (p < 0) return;
    Tensor& dx = t.grads_[static_cast<size_t>(p)];
    for (size_t i = 0; i < xv.size(); ++i) {
      double v = xv[i];
      double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      dx.data[i] += g.data[i] * (cdf + v * pdf);
    }
  });
  return out;
}

Tensor Tape::row_normalize(const Tensor& x) {
  require(x.ndim() == 2, Err::ShapeMismatch, "row_normalize requires a 2-D tensor");
  int64_t rows = x.rows(), d = x.cols();
  Tensor out(x.shape);
  std::vector<double> norms(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * d;
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) s += xr[j] * xr[j];
    double nrm = std::sqrt(s);
    require(nrm > 0.0, Err::ZeroNormVector, "row_normalize: zero-norm row");
    norms[static_cast<size_t>(r)] = nrm;
    double inv = 1.0 / nrm;
    double* orow = out.data.data() + r * d;
    for (int64_t j = 0; j < d; ++j) orow[j] = xr[j] * inv;
  }
  guard_finite(out, "row_normalize");
  if (!recording()) return out;
  out.node = append(out, {x.node},
                    [p = x.node, nv = out.data, norms = std::move(norms), rows, d](
                        Tape& t, const Tensor& g) {
                      if (p < 0) return;
                      Tensor& dx = t.grads_[static_cast<size_t>(p)];
                      for (int64_t r = 0; r < rows; ++r) {
                        const double* grow = g.data.data() + r * d;
                        const double* nrow = nv.data() + r * d;
                        double dot = 0.0;
                        for (int64_t j = 0; j < d; ++j) dot += grow[j] * nrow[j];
                        double inv = 1.0 / norms[static_cast<size_t>(r)];
                        double* drow = dx.data.data() + r * d;
                        for (int64_t j = 0; j < d; ++j)
                          drow[j] += inv * (grow[j] - dot * nrow[j]);
                      }
                    });
  return out;
}

// ---- reductions ---------------------------------------------------------------

Tensor Tape::sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data) s += v;
  Tensor out = Tensor::scalar(s);
  guard_finite(out, "sum");
  if (!recording()) return out;
  out.node = append(out, {x.node}, [p = x.node, n = x.data.size()](Tape& t, const Tensor& g) {
    if (p < 0) return;
    Tensor& dx = t.grads_[static_cast<size_t>(p)];
    for (size_t i = 0; i < n; ++i) dx.data[i] += g.data[0];
  });
  return out;
}

Tensor Tape::mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor Tape::sum_axis(const Tensor& x, int axis) {
  AxisView v = axis_view(x.shape, axis);
  std::vector<int64_t> out_shape;
  for (size_t i = 0; i < x.shape.size(); ++i)
    if (static_cast<int>(i) != axis) out_shape.push_back(x.shape[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t l = 0; l < v.len; ++l) {
      const double* src = x.data.data() + (o * v.len + l) * v.inner;
      double* dst = out.data.data() + o * v.inner;
      for (int64_t in = 0; in < v.inner; ++in) dst[in] += src[in];
    }
  guard_finite(out, "sum_axis");
  if (!recording()) return out;
  out.node = append(out, {x.node}, [p = x.node, v](Tape& t, const Tensor& g) {
    if (p < 0) return;
    Tensor& dx = t.grads_[static_cast<size_t>(p)];
    for (int64_t o = 0; o < v.outer; ++o)
      for (int64_t l = 0; l < v.len; ++l) {
        double* dst = dx.data.data() + (o * v.len + l) * v.inner;
        const double* src = g.data.data() + o * v.inner;
        for (int64_t in = 0; in < v.inner; ++in) dst[in] += src[in];
      }
  });
  return out;
}

Tensor Tape::mean_axis(const Tensor& x, int axis) {
  AxisView v = axis_view(x.shape, axis);
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(v.len));
}

// ---- losses ---------------------------------------------------------------------

Tensor Tape::mse_loss(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), Err::ShapeMismatch,
          "mse_loss: " + a.shape_str() + " vs " + b.shape_str());
  double s = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    double dlt = a.data[i] - b.data[i];
    s += dlt * dlt;
  }
  double n = static_cast<double>(a.numel());
  Tensor out = Tensor::scalar(s / n);
  guard_finite(out, "mse_loss");
  if (!recording()) return out;
  out.node = append(out, {a.node, b.node},
                    [pa = a.node, pb = b.node, av = a.data, bv = b.data, n](Tape& t, const Tensor& g) {
                      double c = 2.0 * g.data[0] / n;
                      if (pa >= 0) {
                        Tensor& da = t.grads_[static_cast<size_t>(pa)];
                        for (size_t i = 0; i < av.size(); ++i) da.data[i] += c * (av[i] - bv[i]);
                      }
                      if (pb >= 0) {
                        Tensor& db = t.grads_[static_cast<size_t>(pb)];
                        for (size_t i = 0; i < av.size(); ++i) db.data[i] -= c * (av[i] - bv[i]);
                      }
                    });
  return out;
}

Tensor Tape::cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                           const std::vector<double>& weights) {
  require(logits.ndim() == 2, Err::ShapeMismatch, "cross_entropy requires 2-D logits");
  int64_t rows = logits.rows(), c = logits.cols();
  require(static_cast<int64_t>(labels.size()) == rows, Err::ShapeMismatch,
          "cross_entropy: one label per row required");
  require(weights.empty() || static_cast<int64_t>(weights.size()) == rows, Err::ShapeMismatch,
          "cross_entropy: one weight per row required");
  std::vector<double> probs(logits.data.size());
  double loss = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    int y = labels[static_cast<size_t>(r)];
    require(y >= 0 && y < c, Err::UnknownClass, "cross_entropy: label out of range");
    const double* zr = logits.data.data() + r * c;
    double* pr = probs.data() + r * c;
    softmax_row(zr, pr, c);
    double w = weights.empty() ? 1.0 : weights[static_cast<size_t>(r)];
    // -log p[y], computed through the stabilized log-sum-exp
    double m = zr[0];
    for (int64_t j = 1; j < c; ++j) m = std::max(m, zr[j]);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(zr[j] - m);
    loss += w * (std::log(z) + m - zr[y]);
  }
  double inv_rows = 1.0 / static_cast<double>(rows);
  Tensor out = Tensor::scalar(loss * inv_rows);
  guard_finite(out, "cross_entropy");
  if (!recording()) return out;
  out.node = append(out, {logits.node},
                    [p = logits.node, probs = std::move(probs), labels, weights, rows, c,
                     inv_rows](Tape& t, const Tensor& g) {
                      if (p < 0) return;
                      Tensor& dz = t.grads_[static_cast<size_t>(p)];
                      for (int64_t r = 0; r < rows; ++r) {
                        double w = weights.empty() ? 1.0 : weights[static_cast<size_t>(r)];
                        double coef = g.data[0] * w * inv_rows;
                        const double* pr = probs.data() + r * c;
                        double* drow = dz.data.data() + r * c;
                        for (int64_t j = 0; j < c; ++j) drow[j] += coef * pr[j];
                        drow[labels[static_cast<size_t>(r)]] -= coef;
                      }
                    });
  return out;
}

Tensor Tape::cosine_similarity(const Tensor& a, const Tensor& b) {
  require(a.numel() == b.numel(), Err::ShapeMismatch,
          "cosine_similarity: " + a.shape_str() + " vs " + b.shape_str());
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    dot += a.data[i] * b.data[i];
    na2 += a.data[i] * a.data[i];
    nb2 += b.data[i] * b.data[i];
  }
  require(na2 > 0.0 && nb2 > 0.0, Err::ZeroNormVector, "cosine_similarity: zero-norm input");
  double na = std::sqrt(na2), nb = std::sqrt(nb2);
  double cosv = dot / (na * nb);
  Tensor out = Tensor::scalar(cosv);
  guard_finite(out, "cosine_similarity");
  if (!recording()) return out;
  out.node = append(out, {a.node, b.node},
                    [pa = a.node, pb = b.node, av = a.data, bv = b.data, na, nb, cosv](
                        Tape& t, const Tensor& g) {
                      double s = g.data[0];
                      if (pa >= 0) {
                        Tensor& da = t.grads_[static_cast<size_t>(pa)];
                        for (size_t i = 0; i < av.size(); ++i)
                          da.data[i] += s * (bv[i] / (na * nb) - cosv * av[i] / (na * na));
                      }
                      if (pb >= 0) {
                        Tensor& db = t.grads_[static_cast<size_t>(pb)];
                        for (size_t i = 0; i < bv.size(); ++i)
                          db.data[i] += s * (av[i] / (na * nb) - cosv * bv[i] / (nb * nb));
                      }
                    });
  return out;
}

// ---- attention ---------------------------------------------------------------------

namespace {

struct SdpaDims {
  int64_t groups, heads, rows_per_group, d_qk, d_v, total_rows, qk_cols, v_cols;
  double scale;
};

void sdpa_forward(const double* q, const double* k, const double* v, double* out, double* probs,
                  const SdpaDims& dm) {
  int64_t s = dm.rows_per_group;
  std::vector<double> scores(static_cast<size_t>(s));
  for (int64_t g = 0; g < dm.groups; ++g)
    for (int64_t h = 0; h < dm.heads; ++h) {
      int64_t row0 = g * s;
      int64_t qoff = h * dm.d_qk, voff = h * dm.d_v;
      double* pblk = probs + ((g * dm.heads + h) * s * s);
      for (int64_t i = 0; i < s; ++i) {
        const double* qi = q + (row0 + i) * dm.qk_cols + qoff;
        for (int64_t j = 0; j < s; ++j) {
          const double* kj = k + (row0 + j) * dm.qk_cols + qoff;
          double acc = 0.0;
          for (int64_t p = 0; p < dm.d_qk; ++p) acc += qi[p] * kj[p];
          scores[static_cast<size_t>(j)] = acc * dm.scale;
        }
        double* pi = pblk + i * s;
        softmax_row(scores.data(), pi, s);
        double* oi = out + (row0 + i) * dm.v_cols + voff;
        for (int64_t j = 0; j < s; ++j) {
          const double* vj = v + (row0 + j) * dm.v_cols + voff;
          double pij = pi[j];
          for (int64_t p = 0; p < dm.d_v; ++p) oi[p] += pij * vj[p];
        }
      }
    }
}

void sdpa_backward(const double* q, const double* k, const double* v, const double* probs,
                   const double* gout, double* dq, double* dk, double* dv, const SdpaDims& dm) {
  int64_t s = dm.rows_per_group;
  std::vector<double> dp(static_cast<size_t>(s));
  std::vector<double> ds(static_cast<size_t>(s));
  for (int64_t g = 0; g < dm.groups; ++g)
    for (int64_t h = 0; h < dm.heads; ++h) {
      int64_t row0 = g * s;
      int64_t qoff = h * dm.d_qk, voff = h * dm.d_v;
      const double* pblk = probs + ((g * dm.heads + h) * s * s);
      for (int64_t i = 0; i < s; ++i) {
        const double* gi = gout + (row0 + i) * dm.v_cols + voff;
        const double* pi = pblk + i * s;
        double dot = 0.0;
        for (int64_t j = 0; j < s; ++j) {
          const double* vj = v + (row0 + j) * dm.v_cols + voff;
          double acc = 0.0;
          for (int64_t p = 0; p < dm.d_v; ++p) acc += gi[p] * vj[p];
          dp[static_cast<size_t>(j)] = acc;
          dot += acc * pi[j];
          // dV_j += P_ij * gOut_i
          double* dvj = dv + (row0 + j) * dm.v_cols + voff;
          double pij = pi[j];
          for (int64_t p = 0; p < dm.d_v; ++p) dvj[p] += pij * gi[p];
        }
        for (int64_t j = 0; j < s; ++j)
          ds[static_cast<size_t>(j)] = pi[j] * (dp[static_cast<size_t>(j)] - dot) * dm.scale;
        double* dqi = dq + (row0 + i) * dm.qk_cols + qoff;
        const double* qi = q + (row0 + i) * dm.qk_cols + qoff;
        for (int64_t j = 0; j < s; ++j) {
          const double* kj = k + (row0 + j) * dm.qk_cols + qoff;
          double* dkj = dk + (row0 + j) * dm.qk_cols + qoff;
          double dsj = ds[static_cast<size_t>(j)];
          for (int64_t p = 0; p < dm.d_qk; ++p) {
            dqi[p] += dsj * kj[p];
            dkj[p] += dsj * qi[p];
          }
        }
      }
    }
}

}  // namespace

Tensor Tape::grouped_attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t n_groups,
                               int64_t n_heads) {
  require(q.ndim() == 2 && k.ndim() == 2 && v.ndim() == 2, Err::ShapeMismatch,
          "grouped_attention requires 2-D q/k/v");
  require(q.cols() == k.cols(), Err::ShapeMismatch, "grouped_attention: q/k width mismatch");
  require(q.rows() == k.rows() && k.rows() == v.rows(), Err::ShapeMismatch,
          "grouped_attention: row count mismatch");
  require(n_groups > 0 && q.rows() % n_groups == 0, Err::ShapeMismatch,
          "grouped_attention: rows not divisible into groups");
  require(n_heads > 0 && q.cols() % n_heads == 0 && v.cols() % n_heads == 0, Err::ShapeMismatch,
          "grouped_attention: width not divisible into heads");
  SdpaDims dm;
  dm.groups = n_groups;
  dm.heads = n_heads;
  dm.rows_per_group = q.rows() / n_groups;
  dm.d_qk = q.cols() / n_heads;
  dm.d_v = v.cols() / n_heads;
  dm.total_rows = q.rows();
  dm.qk_cols = q.cols();
  dm.v_cols = v.cols();
  dm.scale = 1.0 / std::sqrt(static_cast<double>(dm.d_qk));
  Tensor out({q.rows(), v.cols()});
  std::vector<double> probs(
      static_cast<size_t>(n_groups * n_heads * dm.rows_per_group * dm.rows_per_group));
  sdpa_forward(q.data.data(), k.data.data(), v.data.data(), out.data.data(), probs.data(), dm);
  guard_finite(out, "grouped_attention");
  if (!recording()) return out;
  out.node = append(out, {q.node, k.node, v.node},
                    [pq = q.node, pk = k.node, pv = v.node, qv = q.data, kv = k.data, vv = v.data,
                     probs = std::move(probs), dm](Tape& t, const Tensor& g) {
                      std::vector<double> dq(qv.size(), 0.0), dk(kv.size(), 0.0),
                          dv(vv.size(), 0.0);
                      sdpa_backward(qv.data(), kv.data(), vv.data(), probs.data(), g.data.data(),
                                    dq.data(), dk.data(), dv.data(), dm);
                      t.accumulate(pq, dq.data(), dq.size());
                      t.accumulate(pk, dk.data(), dk.size());
                      t.accumulate(pv, dv.data(), dv.size());
                    });
  return out;
}

Tensor Tape::attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t d_k) {
  require(q.ndim() == 2 && k.ndim() == 2 && v.ndim() == 2, Err::ShapeMismatch,
          "attention requires 2-D q/k/v");
  require(q.cols() == d_k && k.cols() == d_k, Err::ShapeMismatch,
          "attention: q/k width must equal d_k");
  require(k.rows() == v.rows(), Err::ShapeMismatch, "attention: k/v row count mismatch");
  // unlike grouped_attention, q may have a different row count than k/v
  int64_t m = q.rows(), n = k.rows(), d_v = v.cols();
  double sc = 1.0 / std::sqrt(static_cast<double>(d_k));
  Tensor out({m, d_v});
  std::vector<double> probs(static_cast<size_t>(m * n));
  std::vector<double> scores(static_cast<size_t>(n));
  for (int64_t i = 0; i < m; ++i) {
    const double* qi = q.data.data() + i * d_k;
    for (int64_t j = 0; j < n; ++j) {
      const double* kj = k.data.data() + j * d_k;
      double acc = 0.0;
      for (int64_t p = 0; p < d_k; ++p) acc += qi[p] * kj[p];
      scores[static_cast<size_t>(j)] = acc * sc;
    }
    double* pi = probs.data() + i * n;
    softmax_row(scores.data(), pi, n);
    double* oi = out.data.data() + i * d_v;
    for (int64_t j = 0; j < n; ++j) {
      const double* vj = v.data.data() + j * d_v;
      for (int64_t p = 0; p < d_v; ++p) oi[p] += pi[j] * vj[p];
    }
  }
  guard_finite(out, "attention");
  if (!recording()) return out;
  out.node = append(
      out, {q.node, k.node, v.node},
      [pq = q.node, pk = k.node, pv = v.node, qv = q.data, kv = k.data, vv = v.data,
       probs = std::move(probs), m, n, d_k, dv_cols = d_v, scl = sc](
          Tape& t, const Tensor& g) {
        std::vector<double> dq(qv.size(), 0.0), dk(kv.size(), 0.0), dvv(vv.size(), 0.0);
        std::vector<double> dp(static_cast<size_t>(n)), ds(static_cast<size_t>(n));
        for (int64_t i = 0; i < m; ++i) {
          const double* gi = g.data.data() + i * dv_cols;
          const double* pi = probs.data() + i * n;
          double dot = 0.0;
          for (int64_t j = 0; j < n; ++j) {
            const double* vj = vv.data() + j * dv_cols;
            double acc = 0.0;
            for (int64_t p = 0; p < dv_cols; ++p) acc += gi[p] * vj[p];
            dp[static_cast<size_t>(j)] = acc;
            dot += acc * pi[j];
            double* dvj = dvv.data() + j * dv_cols;
            for (int64_t p = 0; p < dv_cols; ++p) dvj[p] += pi[j] * gi[p];
          }
          for (int64_t j = 0; j < n; ++j)
            ds[static_cast<size_t>(j)] = pi[j] * (dp[static_cast<size_t>(j)] - dot) * scl;
          double* dqi = dq.data() + i * d_k;
          const double* qi = qv.data() + i * d_k;
          for (int64_t j = 0; j < n; ++j) {
            const double* kj = kv.data() + j * d_k;
            double* dkj = dk.data() + j * d_k;
            for (int64_t p = 0; p < d_k; ++p) {
              dqi[p] += ds[static_cast<size_t>(j)] * kj[p];
              dkj[p] += ds[static_cast<size_t>(j)] * qi[p];
            }
          }
        }
        t.accumulate(pq, dq.data(), dq.size());
        t.accumulate(pk, dk.data(), dk.size());
        t.accumulate(pv, dvv.data(), dvv.size());
      });
  return out;
}

// ---- reverse pass ---------------------------------------------------------------------

std::unordered_map<int, Tensor> Tape::backward(const Tensor& loss) {
  require(recording(), Err::TapeNotRecording, "backward requires a recording tape");
  require(loss.node >= 0 && loss.node < static_cast<int>(nodes_.size()), Err::TapeNotRecording,
          "backward: loss is not on this tape");
  require(loss.is_scalar(), Err::NonScalarLoss, "backward requires a scalar loss");

  grads_.assign(nodes_.size(), Tensor());
  for (size_t i = 0; i < nodes_.size(); ++i) grads_[i] = Tensor::zeros(nodes_[i].value.shape);

  // restrict the reverse sweep to ancestors of the loss
  std::vector<char> reachable(nodes_.size(), 0);
  std::vector<int> stack = {loss.node};
  reachable[static_cast<size_t>(loss.node)] = 1;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    for (int p : nodes_[static_cast<size_t>(id)].parents)
      if (p >= 0 && !reachable[static_cast<size_t>(p)]) {
        reachable[static_cast<size_t>(p)] = 1;
        stack.push_back(p);
      }
  }

  grads_[static_cast<size_t>(loss.node)].data[0] = 1.0;
  for (int id = loss.node; id >= 0; --id) {
    if (!reachable[static_cast<size_t>(id)]) continue;
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.backprop) n.backprop(*this, grads_[static_cast<size_t>(id)]);
  }

  std::unordered_map<int, Tensor> leaf_grads;
  for (size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].trainable) leaf_grads.emplace(static_cast<int>(i), grads_[i]);
  return leaf_grads;
}

const Tensor& Tape::grad(int node) const {
  require(node >= 0 && node < static_cast<int>(grads_.size()), Err::IndexOutOfRange,
          "grad: node has no gradient (run backward first)");
  return grads_[static_cast<size_t>(node)];
}

const Tensor& Tape::grad(const Tensor& t) const { return grad(t.node); }

// ---- finite differences --------------------------------------------------------

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor g(x.shape);
  Tensor probe = x;
  probe.node = -1;
  for (size_t i = 0; i < probe.data.size(); ++i) {
    double orig = probe.data[i];
    probe.data[i] = orig + h;
    double fp = f(probe);
    probe.data[i] = orig - h;
    double fm = f(probe);
    probe.data[i] = orig;
    require(std::isfinite(fp) && std::isfinite(fm), Err::NonFiniteEvaluation,
            "finite_diff_grad: function evaluated to a non-finite value");
    g.data[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace sdl
