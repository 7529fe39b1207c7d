#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "umrm/common.hpp"
#include "umrm/tensor.hpp"

namespace umrm {

namespace detail {

// Raw kernels. Loop orders are fixed so results are bit-stable across runs;
// the j-inner forms keep the compiler's vectorizer happy without fast-math.

// c(n x m) += a(n x k) * b(k x m)
inline void mm_nn_acc(const double* a, const double* b, double* c, size_t n, size_t k, size_t m) {
  for (size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * m;
    for (size_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      const double* brow = b + kk * m;
      for (size_t j = 0; j < m; ++j) crow[j] += aik * brow[j];
    }
  }
}

// c(n x m) += a(n x k) * b(m x k)^T  (row-by-row dot products)
inline void mm_nt_acc(const double* a, const double* b, double* c, size_t n, size_t k, size_t m) {
  for (size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    for (size_t j = 0; j < m; ++j) {
      const double* brow = b + j * k;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      size_t kk = 0;
      for (; kk + 4 <= k; kk += 4) {
        s0 += arow[kk] * brow[kk];
        s1 += arow[kk + 1] * brow[kk + 1];
        s2 += arow[kk + 2] * brow[kk + 2];
        s3 += arow[kk + 3] * brow[kk + 3];
      }
      double s = (s0 + s1) + (s2 + s3);
      for (; kk < k; ++kk) s += arow[kk] * brow[kk];
      c[i * m + j] += s;
    }
  }
}

// c(k x m) += a(n x k)^T * d(n x m)
inline void mm_tn_acc(const double* a, const double* d, double* c, size_t n, size_t k, size_t m) {
  for (size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    const double* drow = d + i * m;
    for (size_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      double* crow = c + kk * m;
      for (size_t j = 0; j < m; ++j) crow[j] += aik * drow[j];
    }
  }
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

}  // namespace detail

// Eager tape. Every primitive computes its output immediately and, when the
// result participates in gradient flow, records a backward closure. The tape
// order is a topological order by construction, so backward() is a single
// reverse sweep that touches each node exactly once.
//
// Gradients accumulate into leaf tensors across backward() calls; grads of
// tensors created by this graph are zeroed at the start of each backward().
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }
  size_t num_nodes() const { return nodes_.size(); }

  // ---- primitives ------------------------------------------------------

  // c = a * b
  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) throw ConfigError("matmul: inner dimensions differ");
    const size_t n = a.rows(), k = a.cols(), m = b.cols();
    Tensor out = make_out({n, m}, {a, b});
    detail::mm_nn_acc(a.data().data(), b.data().data(), out.data().data(), n, k, m);
    finish("matmul", out, [a, b, out, n, k, m]() {
      if (a.requires_grad())
        detail::mm_nt_acc(out.grad().data(), b.data().data(), a.grad().data(), n, m, k);
      if (b.requires_grad())
        detail::mm_tn_acc(a.data().data(), out.grad().data(), b.grad().data(), n, k, m);
    });
    return out;
  }

  // c = a * b^T
  Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) throw ConfigError("matmul_nt: inner dimensions differ");
    const size_t n = a.rows(), k = a.cols(), m = b.rows();
    Tensor out = make_out({n, m}, {a, b});
    detail::mm_nt_acc(a.data().data(), b.data().data(), out.data().data(), n, k, m);
    finish("matmul_nt", out, [a, b, out, n, k, m]() {
      if (a.requires_grad())
        detail::mm_nn_acc(out.grad().data(), b.data().data(), a.grad().data(), n, m, k);
      if (b.requires_grad())
        detail::mm_tn_acc(out.grad().data(), a.data().data(), b.grad().data(), n, m, k);
    });
    return out;
  }

  // Same-shape addition, or row broadcast when b is a single row (bias).
  Tensor add(const Tensor& a, const Tensor& b) {
    if (a.size() == b.size() && a.cols() == b.cols()) {
      Tensor out = make_out(a.shape(), {a, b});
      const size_t n = a.size();
      for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
      finish("add", out, [a, b, out, n]() {
        if (a.requires_grad())
          for (size_t i = 0; i < n; ++i) a.grad()[i] += out.grad()[i];
        if (b.requires_grad())
          for (size_t i = 0; i < n; ++i) b.grad()[i] += out.grad()[i];
      });
      return out;
    }
    if (b.rows() == 1 && b.cols() == a.cols()) {
      const size_t n = a.rows(), m = a.cols();
      Tensor out = make_out(a.shape(), {a, b});
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < m; ++j) out.data()[i * m + j] = a.data()[i * m + j] + b.data()[j];
      finish("add_rowbcast", out, [a, b, out, n, m]() {
        if (a.requires_grad())
          for (size_t i = 0; i < n * m; ++i) a.grad()[i] += out.grad()[i];
        if (b.requires_grad())
          for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < m; ++j) b.grad()[j] += out.grad()[i * m + j];
      });
      return out;
    }
    throw ConfigError("add: shape mismatch");
  }

  // Elementwise product. Also accepts a size-1 operand (scalar broadcast) or
  // a column vector against a matrix with matching rows (per-row scaling).
  Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.size() == 1 && b.size() != 1) return mul(b, a);
    if (b.size() == 1 && a.size() > 1) {
      Tensor out = make_out(a.shape(), {a, b});
      const size_t n = a.size();
      const double s = b.data()[0];
      for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
      finish("mul_scalar", out, [a, b, out, n, s]() {
        if (a.requires_grad())
          for (size_t i = 0; i < n; ++i) a.grad()[i] += out.grad()[i] * s;
        if (b.requires_grad()) {
          double acc = 0.0;
          for (size_t i = 0; i < n; ++i) acc += out.grad()[i] * a.data()[i];
          b.grad()[0] += acc;
        }
      });
      return out;
    }
    if (b.rows() == a.rows() && b.cols() == 1 && a.cols() > 1) {
      const size_t n = a.rows(), m = a.cols();
      Tensor out = make_out(a.shape(), {a, b});
      for (size_t i = 0; i < n; ++i) {
        const double s = b.data()[i];
        for (size_t j = 0; j < m; ++j) out.data()[i * m + j] = a.data()[i * m + j] * s;
      }
      finish("mul_colbcast", out, [a, b, out, n, m]() {
        if (a.requires_grad())
          for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < m; ++j) a.grad()[i * m + j] += out.grad()[i * m + j] * b.data()[i];
        if (b.requires_grad())
          for (size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (size_t j = 0; j < m; ++j) acc += out.grad()[i * m + j] * a.data()[i * m + j];
            b.grad()[i] += acc;
          }
      });
      return out;
    }
    if (a.size() != b.size() || a.cols() != b.cols()) throw ConfigError("mul: shape mismatch");
    Tensor out = make_out(a.shape(), {a, b});
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    finish("mul", out, [a, b, out, n]() {
      if (a.requires_grad())
        for (size_t i = 0; i < n; ++i) a.grad()[i] += out.grad()[i] * b.data()[i];
      if (b.requires_grad())
        for (size_t i = 0; i < n; ++i) b.grad()[i] += out.grad()[i] * a.data()[i];
    });
    return out;
  }

  // Multiplication by a compile-time-known constant.
  Tensor scale(const Tensor& a, double c) {
    Tensor out = make_out(a.shape(), {a});
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    finish("scale", out, [a, out, n, c]() {
      if (a.requires_grad())
        for (size_t i = 0; i < n; ++i) a.grad()[i] += out.grad()[i] * c;
    });
    return out;
  }

  Tensor softmax_rows(const Tensor& a) {
    const size_t n = a.rows(), m = a.cols();
    Tensor out = make_out(a.shape(), {a});
    for (size_t i = 0; i < n; ++i) {
      const double* x = a.data().data() + i * m;
      double* y = out.data().data() + i * m;
      double mx = x[0];
      for (size_t j = 1; j < m; ++j) mx = std::max(mx, x[j]);
      double z = 0.0;
      for (size_t j = 0; j < m; ++j) {
        y[j] = std::exp(x[j] - mx);
        z += y[j];
      }
      for (size_t j = 0; j < m; ++j) y[j] /= z;
    }
    finish("softmax", out, [a, out, n, m]() {
      if (!a.requires_grad()) return;
      for (size_t i = 0; i < n; ++i) {
        const double* y = out.data().data() + i * m;
        const double* gy = out.grad().data() + i * m;
        double dot = 0.0;
        for (size_t j = 0; j < m; ++j) dot += gy[j] * y[j];
        double* gx = a.grad().data() + i * m;
        for (size_t j = 0; j < m; ++j) gx[j] += y[j] * (gy[j] - dot);
      }
    });
    return out;
  }

  Tensor log_softmax_rows(const Tensor& a) {
    const size_t n = a.rows(), m = a.cols();
    Tensor out = make_out(a.shape(), {a});
    for (size_t i = 0; i < n; ++i) {
      const double* x = a.data().data() + i * m;
      double* y = out.data().data() + i * m;
      double mx = x[0];
      for (size_t j = 1; j < m; ++j) mx = std::max(mx, x[j]);
      double z = 0.0;
      for (size_t j = 0; j < m; ++j) z += std::exp(x[j] - mx);
      const double lse = mx + std::log(z);
      for (size_t j = 0; j < m; ++j) y[j] = x[j] - lse;
    }
    finish("log_softmax", out, [a, out, n, m]() {
      if (!a.requires_grad()) return;
      for (size_t i = 0; i < n; ++i) {
        const double* y = out.data().data() + i * m;
        const double* gy = out.grad().data() + i * m;
        double gsum = 0.0;
        for (size_t j = 0; j < m; ++j) gsum += gy[j];
        double* gx = a.grad().data() + i * m;
        for (size_t j = 0; j < m; ++j) gx[j] += gy[j] - std::exp(y[j]) * gsum;
      }
    });
    return out;
  }

  Tensor sigmoid(const Tensor& a) {
    Tensor out = make_out(a.shape(), {a});
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = 1.0 / (1.0 + std::exp(-a.data()[i]));
    finish("sigmoid", out, [a, out, n]() {
      if (!a.requires_grad()) return;
      for (size_t i = 0; i < n; ++i) {
        const double y = out.data()[i];
        a.grad()[i] += out.grad()[i] * y * (1.0 - y);
      }
    });
    return out;
  }

  // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
  Tensor gelu(const Tensor& a) {
    Tensor out = make_out(a.shape(), {a});
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) {
      const double x = a.data()[i];
      const double t = std::tanh(detail::kGeluC * (x + detail::kGeluA * x * x * x));
      out.data()[i] = 0.5 * x * (1.0 + t);
    }
    finish("gelu", out, [a, out, n]() {
      if (!a.requires_grad()) return;
      for (size_t i = 0; i < n; ++i) {
        const double x = a.data()[i];
        const double t = std::tanh(detail::kGeluC * (x + detail::kGeluA * x * x * x));
        const double dt = (1.0 - t * t) * detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * x * x);
        a.grad()[i] += out.grad()[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
      }
    });
    return out;
  }

  // Per-row normalization to zero mean / unit variance, then affine gamma, beta.
  Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    double eps = 1e-5) {
    const size_t n = x.rows(), m = x.cols();
    if (gamma.size() != m || beta.size() != m) throw ConfigError("layer_norm: affine size mismatch");
    Tensor out = make_out(x.shape(), {x, gamma, beta});
    std::vector<double> xhat(n * m), inv_std(n);
    for (size_t i = 0; i < n; ++i) {
      const double* row = x.data().data() + i * m;
      double mu = 0.0;
      for (size_t j = 0; j < m; ++j) mu += row[j];
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (size_t j = 0; j < m; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<double>(m);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[i] = is;
      for (size_t j = 0; j < m; ++j) {
        const double xh = (row[j] - mu) * is;
        xhat[i * m + j] = xh;
        out.data()[i * m + j] = gamma.data()[j] * xh + beta.data()[j];
      }
    }
    finish("layer_norm", out,
           [x, gamma, beta, out, n, m, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
             for (size_t i = 0; i < n; ++i) {
               const double* g = out.grad().data() + i * m;
               const double* xh = xhat.data() + i * m;
               if (x.requires_grad()) {
                 double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                 for (size_t j = 0; j < m; ++j) {
                   const double dxh = g[j] * gamma.data()[j];
                   mean_dxh += dxh;
                   mean_dxh_xh += dxh * xh[j];
                 }
                 mean_dxh /= static_cast<double>(m);
                 mean_dxh_xh /= static_cast<double>(m);
                 double* gx = x.grad().data() + i * m;
                 for (size_t j = 0; j < m; ++j) {
                   const double dxh = g[j] * gamma.data()[j];
                   gx[j] += inv_std[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                 }
               }
               if (gamma.requires_grad())
                 for (size_t j = 0; j < m; ++j) gamma.grad()[j] += g[j] * xh[j];
               if (beta.requires_grad())
                 for (size_t j = 0; j < m; ++j) beta.grad()[j] += g[j];
             }
           });
    return out;
  }

  // Row lookup: out[i] = table[ids[i]]. Gradient scatters into the table.
  Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    const size_t v = table.rows(), d = table.cols();
    for (int id : ids)
      if (id < 0 || static_cast<size_t>(id) >= v) throw ConfigError("embedding: id out of range");
    Tensor out = make_out({ids.size(), d}, {table});
    for (size_t i = 0; i < ids.size(); ++i)
      std::copy_n(table.data().data() + static_cast<size_t>(ids[i]) * d, d,
                  out.data().data() + i * d);
    finish("embedding", out, [table, out, ids, d]() {
      if (!table.requires_grad()) return;
      for (size_t i = 0; i < ids.size(); ++i) {
        const double* g = out.grad().data() + i * d;
        double* gt = table.grad().data() + static_cast<size_t>(ids[i]) * d;
        for (size_t j = 0; j < d; ++j) gt[j] += g[j];
      }
    });
    return out;
  }

  // Contiguous window copy; [r0, r1) x [c0, c1).
  Tensor slice(const Tensor& a, size_t r0, size_t r1, size_t c0, size_t c1) {
    const size_t n = a.rows(), m = a.cols();
    if (r1 > n || c1 > m || r0 >= r1 || c0 >= c1) throw ConfigError("slice: window out of range");
    const size_t sr = r1 - r0, sc = c1 - c0;
    std::vector<size_t> shape = (a.rank() == 1) ? std::vector<size_t>{sc}
                                                : std::vector<size_t>{sr, sc};
    Tensor out = make_out(shape, {a});
    for (size_t i = 0; i < sr; ++i)
      std::copy_n(a.data().data() + (r0 + i) * m + c0, sc, out.data().data() + i * sc);
    finish("slice", out, [a, out, r0, c0, sr, sc, m]() {
      if (!a.requires_grad()) return;
      for (size_t i = 0; i < sr; ++i) {
        const double* g = out.grad().data() + i * sc;
        double* ga = a.grad().data() + (r0 + i) * m + c0;
        for (size_t j = 0; j < sc; ++j) ga[j] += g[j];
      }
    });
    return out;
  }

  Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ConfigError("concat_rows: empty");
    const size_t m = parts[0].cols();
    size_t n = 0;
    for (const Tensor& p : parts) {
      if (p.cols() != m) throw ConfigError("concat_rows: column mismatch");
      n += p.rows();
    }
    Tensor out = make_out({n, m}, parts);
    size_t r = 0;
    for (const Tensor& p : parts) {
      std::copy_n(p.data().data(), p.size(), out.data().data() + r * m);
      r += p.rows();
    }
    finish("concat_rows", out, [parts, out, m]() {
      size_t r = 0;
      for (const Tensor& p : parts) {
        if (p.requires_grad()) {
          const double* g = out.grad().data() + r * m;
          for (size_t i = 0; i < p.size(); ++i) p.grad()[i] += g[i];
        }
        r += p.rows();
      }
    });
    return out;
  }

  Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ConfigError("concat_cols: empty");
    const size_t n = parts[0].rows();
    size_t m = 0;
    bool all_rank1 = true;
    for (const Tensor& p : parts) {
      if (p.rows() != n) throw ConfigError("concat_cols: row mismatch");
      all_rank1 = all_rank1 && p.rank() == 1;
      m += p.cols();
    }
    std::vector<size_t> shape = (all_rank1 && n == 1) ? std::vector<size_t>{m}
                                                      : std::vector<size_t>{n, m};
    Tensor out = make_out(shape, parts);
    size_t c = 0;
    for (const Tensor& p : parts) {
      const size_t pc = p.cols();
      for (size_t i = 0; i < n; ++i)
        std::copy_n(p.data().data() + i * pc, pc, out.data().data() + i * m + c);
      c += pc;
    }
    finish("concat_cols", out, [parts, out, n, m]() {
      size_t c = 0;
      for (const Tensor& p : parts) {
        const size_t pc = p.cols();
        if (p.requires_grad())
          for (size_t i = 0; i < n; ++i) {
            const double* g = out.grad().data() + i * m + c;
            double* gp = p.grad().data() + i * pc;
            for (size_t j = 0; j < pc; ++j) gp[j] += g[j];
          }
        c += pc;
      }
    });
    return out;
  }

  // Full reductions, strictly left-to-right.
  Tensor sum(const Tensor& a) {
    Tensor out = make_out({1}, {a});
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    out.data()[0] = acc;
    finish("sum", out, [a, out]() {
      if (!a.requires_grad()) return;
      const double g = out.grad()[0];
      for (double& v : a.grad()) v += g;
    });
    return out;
  }

  Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.size());
    Tensor out = make_out({1}, {a});
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    out.data()[0] = acc * inv;
    finish("mean", out, [a, out, inv]() {
      if (!a.requires_grad()) return;
      const double g = out.grad()[0] * inv;
      for (double& v : a.grad()) v += g;
    });
    return out;
  }

  // Per-row negative log-likelihood of integer targets; callers reduce.
  Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    const size_t n = logits.rows(), m = logits.cols();
    if (targets.size() != n) throw ConfigError("cross_entropy: target count mismatch");
    for (int t : targets)
      if (t < 0 || static_cast<size_t>(t) >= m) throw ConfigError("cross_entropy: target out of range");
    Tensor out = make_out({n}, {logits});
    for (size_t i = 0; i < n; ++i) {
      const double* x = logits.data().data() + i * m;
      double mx = x[0];
      for (size_t j = 1; j < m; ++j) mx = std::max(mx, x[j]);
      double z = 0.0;
      for (size_t j = 0; j < m; ++j) z += std::exp(x[j] - mx);
      out.data()[i] = mx + std::log(z) - x[targets[i]];
    }
    finish("cross_entropy", out, [logits, out, targets, n, m]() {
      if (!logits.requires_grad()) return;
      for (size_t i = 0; i < n; ++i) {
        const double* x = logits.data().data() + i * m;
        double mx = x[0];
        for (size_t j = 1; j < m; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (size_t j = 0; j < m; ++j) z += std::exp(x[j] - mx);
        const double g = out.grad()[i];
        double* gx = logits.grad().data() + i * m;
        for (size_t j = 0; j < m; ++j) gx[j] += g * (std::exp(x[j] - mx) / z);
        gx[targets[i]] -= g;
      }
    });
    return out;
  }

  // ---- backward --------------------------------------------------------

  void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ConfigError("backward: loss is not scalar");
    if (!loss.requires_grad())
      throw ConfigError("backward: loss is not reachable from any grad leaf");
    for (Node& node : nodes_) node.out.zero_grad();
    loss.grad()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
  }

 private:
  struct Node {
    const char* op;
    Tensor out;
    std::function<void()> fn;
  };

  Tensor make_out(std::vector<size_t> shape, std::initializer_list<Tensor> inputs) {
    bool rg = false;
    if (recording_)
      for (const Tensor& t : inputs) rg = rg || t.requires_grad();
    return Tensor::zeros(std::move(shape), rg);
  }

  Tensor make_out(std::vector<size_t> shape, const std::vector<Tensor>& inputs) {
    bool rg = false;
    if (recording_)
      for (const Tensor& t : inputs) rg = rg || t.requires_grad();
    return Tensor::zeros(std::move(shape), rg);
  }

  void finish(const char* op, const Tensor& out, std::function<void()> fn) {
    if (!out.all_finite()) throw NumericError(std::string("non-finite result in ") + op);
    if (out.requires_grad()) nodes_.push_back({op, out, std::move(fn)});
  }

  std::vector<Node> nodes_;
  bool recording_;
};

}  // namespace umrm
