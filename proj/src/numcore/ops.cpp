#include "xldg/numcore/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace xldg::num {

namespace {

Graph& same_graph(Var a, Var b, const char* op) {
  if (&a.graph() != &b.graph()) {
    throw std::logic_error(std::string(op) + ": operands live in different graphs");
  }
  return a.graph();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

std::size_t matrix_rows(const Tensor& t) { return t.rank() <= 1 ? 1 : t.rows(); }

// Accumulates `scale * src` into the gradient of node `id`, if it needs one.
void accumulate(Graph& g, std::size_t id, const Tensor& src, double scale = 1.0) {
  if (!g.requires_grad(id)) return;
  auto dst = g.grad_buffer(id).data();
  auto s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * s[i];
}

}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = same_graph(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0]) {
    throw DimensionError("matmul: cannot multiply " + shape_to_string(av.shape()) +
                         " by " + shape_to_string(bv.shape()));
  }
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  Tensor out(Shape{m, n}, 0.0);
  gemm_nn(m, k, n, av.raw(), bv.raw(), out.raw());
  const auto ia = a.id(), ib = b.id();
  return g.push(std::move(out), {ia, ib},
                [ia, ib, m, k, n](Graph& g, const Tensor& go) {
                  if (g.requires_grad(ia)) {
                    gemm_nt(m, n, k, go.raw(), g.value(ib).raw(),
                            g.grad_buffer(ia).raw());
                  }
                  if (g.requires_grad(ib)) {
                    gemm_tn(m, k, n, g.value(ia).raw(), go.raw(),
                            g.grad_buffer(ib).raw());
                  }
                },
                "matmul");
}

Var linear(Var x, Var w, Var bias) {
  Graph& g = same_graph(x, w, "linear");
  same_graph(x, bias, "linear");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = bias.value();
  const std::size_t k = xv.cols();
  if (wv.rank() != 2 || wv.shape()[0] != k || bv.size() != wv.shape()[1]) {
    throw DimensionError("linear: x " + shape_to_string(xv.shape()) + ", w " +
                         shape_to_string(wv.shape()) + ", bias " +
                         shape_to_string(bv.shape()));
  }
  const std::size_t m = matrix_rows(xv), n = wv.shape()[1];
  Tensor out(Shape{m, n}, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(bv.raw(), bv.raw() + n, out.raw() + i * n);
  }
  gemm_nn(m, k, n, xv.raw(), wv.raw(), out.raw());
  const auto ix = x.id(), iw = w.id(), ib = bias.id();
  return g.push(std::move(out), {ix, iw, ib},
                [ix, iw, ib, m, k, n](Graph& g, const Tensor& go) {
                  if (g.requires_grad(ix)) {
                    gemm_nt(m, n, k, go.raw(), g.value(iw).raw(),
                            g.grad_buffer(ix).raw());
                  }
                  if (g.requires_grad(iw)) {
                    gemm_tn(m, k, n, g.value(ix).raw(), go.raw(),
                            g.grad_buffer(iw).raw());
                  }
                  if (g.requires_grad(ib)) {
                    double* gb = g.grad_buffer(ib).raw();
                    for (std::size_t i = 0; i < m; ++i) {
                      const double* r = go.raw() + i * n;
                      for (std::size_t j = 0; j < n; ++j) gb[j] += r[j];
                    }
                  }
                },
                "linear");
}

Var add(Var a, Var b) {
  Graph& g = same_graph(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  const auto ia = a.id(), ib = b.id();
  return g.push(std::move(out), {ia, ib},
                [ia, ib](Graph& g, const Tensor& go) {
                  accumulate(g, ia, go);
                  accumulate(g, ib, go);
                },
                "add");
}

Var sub(Var a, Var b) {
  Graph& g = same_graph(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  const auto ia = a.id(), ib = b.id();
  return g.push(std::move(out), {ia, ib},
                [ia, ib](Graph& g, const Tensor& go) {
                  accumulate(g, ia, go);
                  accumulate(g, ib, go, -1.0);
                },
                "sub");
}

Var mul(Var a, Var b) {
  Graph& g = same_graph(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  const auto ia = a.id(), ib = b.id();
  return g.push(std::move(out), {ia, ib},
                [ia, ib](Graph& g, const Tensor& go) {
                  if (g.requires_grad(ia)) {
                    auto d = g.grad_buffer(ia).data();
                    auto other = g.value(ib).data();
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] * other[i];
                  }
                  if (g.requires_grad(ib)) {
                    auto d = g.grad_buffer(ib).data();
                    auto other = g.value(ia).data();
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] * other[i];
                  }
                },
                "mul");
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (auto& x : out.data()) x *= factor;
  const auto ia = a.id();
  return a.graph().push(
      std::move(out), {ia},
      [ia, factor](Graph& g, const Tensor& go) { accumulate(g, ia, go, factor); },
      "scale");
}

Var add_scalar(Var a, double offset) {
  Tensor out = a.value();
  for (auto& x : out.data()) x += offset;
  const auto ia = a.id();
  return a.graph().push(
      std::move(out), {ia},
      [ia](Graph& g, const Tensor& go) { accumulate(g, ia, go); }, "add_scalar");
}

Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  const auto ia = a.id();
  return a.graph().push(Tensor::scalar(s), {ia},
                        [ia](Graph& g, const Tensor& go) {
                          if (!g.requires_grad(ia)) return;
                          const double d = go[0];
                          for (auto& x : g.grad_buffer(ia).data()) x += d;
                        },
                        "sum");
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var relu(Var a) {
  Tensor out = a.value();
  for (auto& x : out.data()) x = x > 0.0 ? x : 0.0;
  const auto ia = a.id();
  return a.graph().push(std::move(out), {ia},
                        [ia](Graph& g, const Tensor& go) {
                          if (!g.requires_grad(ia)) return;
                          auto d = g.grad_buffer(ia).data();
                          auto x = g.value(ia).data();
                          for (std::size_t i = 0; i < d.size(); ++i) {
                            if (x[i] > 0.0) d[i] += go[i];
                          }
                        },
                        "relu");
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var a) {
  Tensor out = a.value();
  for (auto& x : out.data()) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    x = 0.5 * x * (1.0 + std::tanh(u));
  }
  const auto ia = a.id();
  return a.graph().push(
      std::move(out), {ia},
      [ia](Graph& g, const Tensor& go) {
        if (!g.requires_grad(ia)) return;
        auto d = g.grad_buffer(ia).data();
        auto xs = g.value(ia).data();
        for (std::size_t i = 0; i < d.size(); ++i) {
          const double x = xs[i];
          const double u = kGeluC * (x + kGeluA * x * x * x);
          const double t = std::tanh(u);
          const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
          d[i] += go[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
        }
      },
      "gelu");
}

Var softmax(Var a) {
  Tensor out = a.value();
  const std::size_t n = out.cols(), rows = out.rows();
  for (std::size_t r = 0; r < rows; ++r) {
    double* x = out.raw() + r * n;
    const double mx = *std::max_element(x, x + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      x[j] = std::exp(x[j] - mx);
      s += x[j];
    }
    for (std::size_t j = 0; j < n; ++j) x[j] /= s;
  }
  const auto ia = a.id();
  auto saved = std::make_shared<Tensor>(out);
  return a.graph().push(
      std::move(out), {ia},
      [ia, saved, n, rows](Graph& g, const Tensor& go) {
        if (!g.requires_grad(ia)) return;
        double* d = g.grad_buffer(ia).raw();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = saved->raw() + r * n;
          const double* gy = go.raw() + r * n;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += y[j] * gy[j];
          for (std::size_t j = 0; j < n; ++j) d[r * n + j] += y[j] * (gy[j] - dot);
        }
      },
      "softmax");
}

Var log_softmax(Var a) {
  Tensor out = a.value();
  const std::size_t n = out.cols(), rows = out.rows();
  for (std::size_t r = 0; r < rows; ++r) {
    double* x = out.raw() + r * n;
    const double mx = *std::max_element(x, x + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) x[j] -= lse;
  }
  const auto ia = a.id();
  auto saved = std::make_shared<Tensor>(out);
  return a.graph().push(
      std::move(out), {ia},
      [ia, saved, n, rows](Graph& g, const Tensor& go) {
        if (!g.requires_grad(ia)) return;
        double* d = g.grad_buffer(ia).raw();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = saved->raw() + r * n;
          const double* gy = go.raw() + r * n;
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += gy[j];
          for (std::size_t j = 0; j < n; ++j) d[r * n + j] += gy[j] - std::exp(y[j]) * s;
        }
      },
      "log_softmax");
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Graph& g = same_graph(x, gain, "layer_norm");
  same_graph(x, bias, "layer_norm");
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols(), rows = xv.rows();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: x " + shape_to_string(xv.shape()) +
                         " with gain " + shape_to_string(gain.value().shape()) +
                         " and bias " + shape_to_string(bias.value().shape()));
  }
  Tensor out(xv.shape(), 0.0);
  auto xhat = std::make_shared<Tensor>(xv.shape(), 0.0);
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const double* gv = gain.value().raw();
  const double* bv = bias.value().raw();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.raw() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    double* hr = xhat->raw() + r * d;
    double* orow = out.raw() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      hr[j] = (xr[j] - mu) * rs;
      orow[j] = hr[j] * gv[j] + bv[j];
    }
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return g.push(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, xhat, rstd, d, rows](Graph& g, const Tensor& go) {
        if (g.requires_grad(ig) || g.requires_grad(ib)) {
          double* dg = g.requires_grad(ig) ? g.grad_buffer(ig).raw() : nullptr;
          double* db = g.requires_grad(ib) ? g.grad_buffer(ib).raw() : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = go.raw() + r * d;
            const double* hr = xhat->raw() + r * d;
            for (std::size_t j = 0; j < d; ++j) {
              if (dg) dg[j] += gr[j] * hr[j];
              if (db) db[j] += gr[j];
            }
          }
        }
        if (!g.requires_grad(ix)) return;
        const double* gv = g.value(ig).raw();
        double* dx = g.grad_buffer(ix).raw();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = go.raw() + r * d;
          const double* hr = xhat->raw() + r * d;
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = gr[j] * gv[j];
            s1 += gh;
            s2 += gh * hr[j];
          }
          const double rs = (*rstd)[r];
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = gr[j] * gv[j];
            dx[r * d + j] += rs * (gh - inv_d * s1 - hr[j] * inv_d * s2);
          }
        }
      },
      "layer_norm");
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets,
                  std::size_t pad_index) {
  const Tensor& lv = logits.value();
  const std::size_t vocab = lv.cols(), rows = matrix_rows(lv);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(rows) +
                         " logit rows but " + std::to_string(targets.size()) +
                         " targets");
  }
  std::size_t count = 0;
  for (auto t : targets) {
    if (t == pad_index) continue;
    if (t >= vocab) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) +
                              " outside vocabulary of size " + std::to_string(vocab));
    }
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: empty loss (all positions padded)");

  // Probabilities are kept for the backward pass.
  auto probs = std::make_shared<Tensor>(Shape{rows, vocab}, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == pad_index) continue;
    const double* x = lv.raw() + r * vocab;
    double* p = probs->raw() + r * vocab;
    const double mx = *std::max_element(x, x + vocab);
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      p[j] = std::exp(x[j] - mx);
      s += p[j];
    }
    for (std::size_t j = 0; j < vocab; ++j) p[j] /= s;
    total -= (x[targets[r]] - mx) - std::log(s);
  }
  const double inv = 1.0 / static_cast<double>(count);
  const auto il = logits.id();
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return logits.graph().push(
      Tensor::scalar(total * inv), {il},
      [il, probs, tgt = std::move(tgt), pad_index, vocab, inv](Graph& g,
                                                               const Tensor& go) {
        if (!g.requires_grad(il)) return;
        double* d = g.grad_buffer(il).raw();
        const double s = go[0] * inv;
        for (std::size_t r = 0; r < tgt.size(); ++r) {
          if (tgt[r] == pad_index) continue;
          const double* p = probs->raw() + r * vocab;
          double* dr = d + r * vocab;
          for (std::size_t j = 0; j < vocab; ++j) dr[j] += s * p[j];
          dr[tgt[r]] -= s;
        }
      },
      "cross_entropy");
}

Var gather_rows(Var table, std::span<const std::size_t> ids) {
  const Tensor& tv = table.value();
  const std::size_t d = tv.cols(), n_rows = matrix_rows(tv);
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  Tensor out(Shape{ids.size(), d}, 0.0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= n_rows) {
      throw std::out_of_range("gather_rows: row " + std::to_string(ids[i]) +
                              " of table with " + std::to_string(n_rows) + " rows");
    }
    std::copy(tv.raw() + ids[i] * d, tv.raw() + (ids[i] + 1) * d, out.raw() + i * d);
  }
  const auto it = table.id();
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return table.graph().push(
      std::move(out), {it},
      [it, idv = std::move(idv), d](Graph& g, const Tensor& go) {
        if (!g.requires_grad(it)) return;
        double* t = g.grad_buffer(it).raw();
        for (std::size_t i = 0; i < idv.size(); ++i) {
          double* dst = t + idv[i] * d;
          const double* src = go.raw() + i * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      },
      "gather_rows");
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  Graph& g = parts[0].graph();
  const std::size_t d = parts[0].value().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    same_graph(parts[0], p, "concat_rows");
    if (p.value().cols() != d) {
      throw DimensionError("concat_rows: width " + std::to_string(p.value().cols()) +
                           " differs from " + std::to_string(d));
    }
    total += matrix_rows(p.value());
  }
  Tensor out(Shape{total, d}, 0.0);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    std::copy(v.raw(), v.raw() + v.size(), out.raw() + off * d);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += matrix_rows(v);
  }
  auto inputs = ids;
  return g.push(std::move(out), std::move(inputs),
                [ids, offsets, d](Graph& g, const Tensor& go) {
                  for (std::size_t i = 0; i < ids.size(); ++i) {
                    if (!g.requires_grad(ids[i])) continue;
                    auto dst = g.grad_buffer(ids[i]).data();
                    const double* src = go.raw() + offsets[i] * d;
                    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                  }
                },
                "concat_rows");
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  const std::size_t d = av.cols(), rows = matrix_rows(av);
  if (begin >= end || end > rows) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") of " + std::to_string(rows) + " rows");
  }
  Tensor out(Shape{end - begin, d}, 0.0);
  std::copy(av.raw() + begin * d, av.raw() + end * d, out.raw());
  const auto ia = a.id();
  return a.graph().push(std::move(out), {ia},
                        [ia, begin, d](Graph& g, const Tensor& go) {
                          if (!g.requires_grad(ia)) return;
                          double* dst = g.grad_buffer(ia).raw() + begin * d;
                          for (std::size_t j = 0; j < go.size(); ++j) dst[j] += go[j];
                        },
                        "slice_rows");
}

Var row(Var a, std::size_t i) {
  const std::size_t d = a.value().cols();
  return reshape(slice_rows(a, i, i + 1), Shape{d});
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const auto ia = a.id();
  return a.graph().push(
      std::move(out), {ia},
      [ia](Graph& g, const Tensor& go) { accumulate(g, ia, go); }, "reshape");
}

Var mean_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t d = av.cols(), rows = matrix_rows(av);
  Tensor out(Shape{d}, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[j] += av.raw()[r * d + j];
  }
  const double inv = 1.0 / static_cast<double>(rows);
  for (auto& x : out.data()) x *= inv;
  const auto ia = a.id();
  return a.graph().push(std::move(out), {ia},
                        [ia, rows, d, inv](Graph& g, const Tensor& go) {
                          if (!g.requires_grad(ia)) return;
                          double* dst = g.grad_buffer(ia).raw();
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t j = 0; j < d; ++j) dst[r * d + j] += go[j] * inv;
                          }
                        },
                        "mean_rows");
}

Var max_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t d = av.cols(), rows = matrix_rows(av);
  Tensor out(Shape{d}, 0.0);
  std::vector<std::size_t> argmax(d, 0);
  for (std::size_t j = 0; j < d; ++j) {
    double best = av.raw()[j];
    for (std::size_t r = 1; r < rows; ++r) {
      const double x = av.raw()[r * d + j];
      if (x > best) {
        best = x;
        argmax[j] = r;
      }
    }
    out[j] = best;
  }
  const auto ia = a.id();
  return a.graph().push(std::move(out), {ia},
                        [ia, argmax = std::move(argmax), d](Graph& g, const Tensor& go) {
                          if (!g.requires_grad(ia)) return;
                          double* dst = g.grad_buffer(ia).raw();
                          for (std::size_t j = 0; j < d; ++j) dst[argmax[j] * d + j] += go[j];
                        },
                        "max_rows");
}

Var l2_norm(Var a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x * x;
  const double norm = std::sqrt(s);
  const auto ia = a.id();
  return a.graph().push(Tensor::scalar(norm), {ia},
                        [ia, norm](Graph& g, const Tensor& go) {
                          if (!g.requires_grad(ia) || norm == 0.0) return;
                          auto dst = g.grad_buffer(ia).data();
                          auto x = g.value(ia).data();
                          const double s = go[0] / norm;
                          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * x[i];
                        },
                        "l2_norm");
}

Var dropout(Var a, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  auto mask = std::make_shared<Tensor>(a.value().shape(), 0.0);
  const double keep = 1.0 / (1.0 - p);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    // 53-bit uniform in [0, 1) from the raw engine output.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    (*mask)[i] = u < p ? 0.0 : keep;
    out[i] *= (*mask)[i];
  }
  const auto ia = a.id();
  return a.graph().push(std::move(out), {ia},
                        [ia, mask](Graph& g, const Tensor& go) {
                          if (!g.requires_grad(ia)) return;
                          auto dst = g.grad_buffer(ia).data();
                          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += go[i] * (*mask)[i];
                        },
                        "dropout");
}

Var attention(Var q, Var k, Var v, std::size_t n_heads,
              std::span<const AttentionSegment> segments, bool causal) {
  Graph& g = same_graph(q, k, "attention");
  same_graph(q, v, "attention");
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const std::size_t d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || kv.shape() != vv.shape() || n_heads == 0 ||
      d % n_heads != 0) {
    throw DimensionError("attention: q " + shape_to_string(qv.shape()) + ", k " +
                         shape_to_string(kv.shape()) + ", v " +
                         shape_to_string(vv.shape()) + ", heads " + std::to_string(n_heads));
  }
  const std::size_t nq = matrix_rows(qv), nk = matrix_rows(kv);
  const std::size_t dh = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<AttentionSegment> segs(segments.begin(), segments.end());
  std::vector<std::size_t> prob_offset(segs.size());
  std::size_t total_probs = 0;
  for (std::size_t s = 0; s < segs.size(); ++s) {
    const auto& sg = segs[s];
    if (sg.q_begin + sg.q_len > nq || sg.k_begin + sg.k_len > nk || sg.k_len == 0 ||
        (causal && sg.q_len != sg.k_len)) {
      throw DimensionError("attention: segment out of range or inconsistent");
    }
    prob_offset[s] = total_probs;
    total_probs += n_heads * sg.q_len * sg.k_len;
  }
  auto probs = std::make_shared<std::vector<double>>(total_probs, 0.0);
  Tensor out(Shape{nq, d}, 0.0);

  for (std::size_t s = 0; s < segs.size(); ++s) {
    const auto& sg = segs[s];
    for (std::size_t h = 0; h < n_heads; ++h) {
      double* P = probs->data() + prob_offset[s] + h * sg.q_len * sg.k_len;
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < sg.q_len; ++i) {
        const double* qi = qv.raw() + (sg.q_begin + i) * d + c0;
        double* pr = P + i * sg.k_len;
        const std::size_t visible = causal ? i + 1 : sg.k_len;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < visible; ++j) {
          const double* kj = kv.raw() + (sg.k_begin + j) * d + c0;
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          pr[j] = dot * sc;
          mx = std::max(mx, pr[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < visible; ++j) {
          pr[j] = std::exp(pr[j] - mx);
          z += pr[j];
        }
        double* oi = out.raw() + (sg.q_begin + i) * d + c0;
        for (std::size_t j = 0; j < visible; ++j) {
          pr[j] /= z;
          const double* vj = vv.raw() + (sg.k_begin + j) * d + c0;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pr[j] * vj[c];
        }
      }
    }
  }

  const auto iq = q.id(), ik = k.id(), iv = v.id();
  return g.push(
      std::move(out), {iq, ik, iv},
      [iq, ik, iv, segs = std::move(segs), prob_offset = std::move(prob_offset), probs,
       n_heads, dh, d, sc, causal](Graph& g, const Tensor& go) {
        const Tensor& qv = g.value(iq);
        const Tensor& kv = g.value(ik);
        const Tensor& vv = g.value(iv);
        double* dq = g.requires_grad(iq) ? g.grad_buffer(iq).raw() : nullptr;
        double* dk = g.requires_grad(ik) ? g.grad_buffer(ik).raw() : nullptr;
        double* dv = g.requires_grad(iv) ? g.grad_buffer(iv).raw() : nullptr;
        std::vector<double> dp;
        for (std::size_t s = 0; s < segs.size(); ++s) {
          const auto& sg = segs[s];
          dp.assign(sg.k_len, 0.0);
          for (std::size_t h = 0; h < n_heads; ++h) {
            const double* P = probs->data() + prob_offset[s] + h * sg.q_len * sg.k_len;
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < sg.q_len; ++i) {
              const double* pr = P + i * sg.k_len;
              const double* goi = go.raw() + (sg.q_begin + i) * d + c0;
              const std::size_t visible = causal ? i + 1 : sg.k_len;
              double dot = 0.0;
              for (std::size_t j = 0; j < visible; ++j) {
                const double* vj = vv.raw() + (sg.k_begin + j) * d + c0;
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) acc += goi[c] * vj[c];
                dp[j] = acc;
                dot += acc * pr[j];
                if (dv) {
                  double* dvj = dv + (sg.k_begin + j) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) dvj[c] += pr[j] * goi[c];
                }
              }
              const double* qi = qv.raw() + (sg.q_begin + i) * d + c0;
              double* dqi = dq ? dq + (sg.q_begin + i) * d + c0 : nullptr;
              for (std::size_t j = 0; j < visible; ++j) {
                const double ds = pr[j] * (dp[j] - dot) * sc;
                const double* kj = kv.raw() + (sg.k_begin + j) * d + c0;
                if (dqi) {
                  for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                }
                if (dk) {
                  double* dkj = dk + (sg.k_begin + j) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      },
      "attention");
}

}  // namespace xldg::num
