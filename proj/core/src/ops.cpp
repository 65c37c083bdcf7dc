#include "marnet/ops.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "kernels.hpp"

namespace marnet {
namespace {

// Output shape: input leading extents with the channel extent replaced.
Shape with_channels(const Shape& in, std::size_t channels) {
  Shape out = in;
  out.back() = channels;
  return out;
}

template <class T>
bool wants_grad(const Node<T>& n, std::size_t parent) {
  return n.parents[parent]->value.requires_grad();
}

template <class T>
std::span<T> parent_grad(Node<T>& n, std::size_t parent) {
  return n.parents[parent]->value.grad();
}

}  // namespace

template <class T>
Var<T> grouped_linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                      std::size_t n_groups) {
  const std::size_t c_in = x.cols();
  const auto& ws = weight.shape();
  if (n_groups == 0 || ws.size() != 3 || ws[0] != n_groups) {
    throw ShapeError("grouped_linear: weight " + to_string(ws) + " does not match " +
                     std::to_string(n_groups) + " groups");
  }
  const std::size_t gi = ws[1];
  const std::size_t go = ws[2];
  const std::size_t c_out = go * n_groups;
  if (gi * n_groups != c_in) {
    throw ShapeError("grouped_linear: input has " + std::to_string(c_in) + " channels, weight expects " +
                     std::to_string(gi * n_groups));
  }
  if (bias.size() != c_out) {
    throw ShapeError("grouped_linear: bias has " + std::to_string(bias.size()) + " values, expected " +
                     std::to_string(c_out));
  }
  const std::size_t rows = x.rows();
  Tensor<T> out(with_channels(x.shape(), c_out));
  {
    const T* b = bias.value().data().data();
    T* y = out.data().data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c_out; ++j) y[r * c_out + j] = b[j];
    const T* xd = x.value().data().data();
    const T* wd = weight.value().data().data();
    for (std::size_t g = 0; g < n_groups; ++g) {
      kernels::gemm_acc(rows, gi, go, xd + g * gi, c_in, wd + g * gi * go, go, y + g * go, c_out);
    }
  }
  return make_result<T>(std::move(out), {x, weight, bias}, "grouped_linear",
                        [rows, c_in, c_out, gi, go, n_groups](Node<T>& n) {
                          const T* dy = n.value.grad().data();
                          const T* xd = n.parents[0]->value.data().data();
                          const T* wd = n.parents[1]->value.data().data();
                          if (wants_grad(n, 0)) {
                            T* dx = parent_grad(n, 0).data();
                            std::vector<T> wt(gi * go);
                            for (std::size_t g = 0; g < n_groups; ++g) {
                              kernels::transpose(gi, go, wd + g * gi * go, wt.data());
                              kernels::gemm_acc(rows, go, gi, dy + g * go, c_out, wt.data(), gi,
                                                dx + g * gi, c_in);
                            }
                          }
                          if (wants_grad(n, 1)) {
                            T* dw = parent_grad(n, 1).data();
                            for (std::size_t g = 0; g < n_groups; ++g) {
                              kernels::gemm_tn_acc(rows, gi, go, xd + g * gi, c_in, dy + g * go, c_out,
                                                   dw + g * gi * go, go);
                            }
                          }
                          if (wants_grad(n, 2)) {
                            T* db = parent_grad(n, 2).data();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < c_out; ++j) db[j] += dy[r * c_out + j];
                          }
                        });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  auto in = x.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] > T{0} ? in[i] : T{0};
  return make_result<T>(std::move(out), {x}, "relu", [](Node<T>& n) {
    auto dy = n.value.grad();
    auto in = n.parents[0]->value.data();
    auto dx = parent_grad(n, 0);
    for (std::size_t i = 0; i < dy.size(); ++i)
      if (in[i] > T{0}) dx[i] += dy[i];
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  }
  Tensor<T> out(a.shape());
  auto x = a.value().data();
  auto y = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  return make_result<T>(std::move(out), {a, b}, "add", [](Node<T>& n) {
    auto dy = n.value.grad();
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants_grad(n, p)) continue;
      auto dx = parent_grad(n, p);
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    }
  });
}

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const std::size_t rows = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw ShapeError("concat_channels: row counts " + std::to_string(rows) + " and " +
                       std::to_string(p.rows()) + " differ");
    }
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor<T> out(with_channels(parts.front().shape(), total));
  T* o = out.data().data();
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* in = parts[k].value().data().data();
    const std::size_t w = widths[k];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) o[r * total + offset + c] = in[r * w + c];
    offset += w;
  }
  return make_result<T>(std::move(out), parts, "concat_channels",
                        [rows, total, widths](Node<T>& n) {
                          const T* dy = n.value.grad().data();
                          std::size_t offset = 0;
                          for (std::size_t k = 0; k < widths.size(); ++k) {
                            const std::size_t w = widths[k];
                            if (wants_grad(n, k)) {
                              T* dx = parent_grad(n, k).data();
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t c = 0; c < w; ++c)
                                  dx[r * w + c] += dy[r * total + offset + c];
                            }
                            offset += w;
                          }
                        });
}

template <class T>
Var<T> gather_rows(const Var<T>& src, std::span<const std::size_t> rows) {
  const std::size_t d = src.cols();
  const std::size_t n_src = src.rows();
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  Tensor<T> out(Shape{rows.size(), d});
  const T* s = src.value().data().data();
  T* o = out.data().data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n_src) {
      throw ShapeError("gather_rows: index " + std::to_string(rows[i]) + " out of range " +
                       std::to_string(n_src));
    }
    std::copy_n(s + rows[i] * d, d, o + i * d);
  }
  std::vector<std::size_t> index(rows.begin(), rows.end());
  return make_result<T>(std::move(out), {src}, "gather_rows", [index = std::move(index), d](Node<T>& n) {
    const T* dy = n.value.grad().data();
    T* dx = parent_grad(n, 0).data();
    for (std::size_t i = 0; i < index.size(); ++i) {
      T* row = dx + index[i] * d;
      for (std::size_t c = 0; c < d; ++c) row[c] += dy[i * d + c];
    }
  });
}

template <class T>
Var<T> weighted_gather(const Var<T>& src, std::span<const std::size_t> index,
                       std::span<const T> weights, std::size_t per_row) {
  if (per_row == 0 || index.size() != weights.size() || index.size() % per_row != 0) {
    throw ShapeError("weighted_gather: inconsistent index/weight lengths");
  }
  const std::size_t d = src.cols();
  const std::size_t n_src = src.rows();
  const std::size_t n_out = index.size() / per_row;
  Tensor<T> out(Shape{n_out, d});
  const T* s = src.value().data().data();
  T* o = out.data().data();
  for (std::size_t i = 0; i < n_out; ++i) {
    T* row = o + i * d;
    for (std::size_t j = 0; j < per_row; ++j) {
      const std::size_t src_row = index[i * per_row + j];
      if (src_row >= n_src) throw ShapeError("weighted_gather: index out of range");
      const T w = weights[i * per_row + j];
      const T* in = s + src_row * d;
      for (std::size_t c = 0; c < d; ++c) row[c] += w * in[c];
    }
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<T> wts(weights.begin(), weights.end());
  return make_result<T>(std::move(out), {src}, "weighted_gather",
                        [idx = std::move(idx), wts = std::move(wts), per_row, d](Node<T>& n) {
                          const T* dy = n.value.grad().data();
                          T* dx = parent_grad(n, 0).data();
                          const std::size_t n_out = idx.size() / per_row;
                          for (std::size_t i = 0; i < n_out; ++i) {
                            for (std::size_t j = 0; j < per_row; ++j) {
                              const T w = wts[i * per_row + j];
                              T* row = dx + idx[i * per_row + j] * d;
                              for (std::size_t c = 0; c < d; ++c) row[c] += w * dy[i * d + c];
                            }
                          }
                        });
}

template <class T>
Var<T> max_over_set(const Var<T>& x, std::size_t set_size) {
  const std::size_t rows = x.rows();
  const std::size_t d = x.cols();
  if (set_size == 0 || rows == 0) throw ShapeError("max_over_set: empty set");
  if (rows % set_size != 0) {
    throw ShapeError("max_over_set: " + std::to_string(rows) + " rows are not a multiple of set size " +
                     std::to_string(set_size));
  }
  const std::size_t groups = rows / set_size;
  Tensor<T> out(Shape{groups, d});
  std::vector<std::size_t> argmax(groups * d);
  const T* in = x.value().data().data();
  T* o = out.data().data();
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t base = g * set_size;
    T* best = o + g * d;
    std::size_t* arg = argmax.data() + g * d;
    std::copy_n(in + base * d, d, best);
    std::fill_n(arg, d, base);
    for (std::size_t s = 1; s < set_size; ++s) {
      const T* row = in + (base + s) * d;
      for (std::size_t c = 0; c < d; ++c) {
        // Strict comparison keeps the lowest-index maximizer.
        if (row[c] > best[c]) {
          best[c] = row[c];
          arg[c] = base + s;
        }
      }
    }
  }
  return make_result<T>(std::move(out), {x}, "max_over_set", [argmax = std::move(argmax), d](Node<T>& n) {
    const T* dy = n.value.grad().data();
    T* dx = parent_grad(n, 0).data();
    for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i] * d + i % d] += dy[i];
  });
}

template <class T>
Var<T> max_over_set(const Var<T>& x) {
  auto out = max_over_set(x, x.rows());
  out.value().reshape(Shape{x.cols()});
  return out;
}

template <class T>
Var<T> mean_over_set(const Var<T>& x, std::size_t set_size) {
  const std::size_t rows = x.rows();
  const std::size_t d = x.cols();
  if (set_size == 0 || rows == 0) throw ShapeError("mean_over_set: empty set");
  if (rows % set_size != 0) throw ShapeError("mean_over_set: rows are not a multiple of the set size");
  const std::size_t groups = rows / set_size;
  Tensor<T> out(Shape{groups, d});
  const T* in = x.value().data().data();
  T* o = out.data().data();
  const T inv = T{1} / static_cast<T>(set_size);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t s = 0; s < set_size; ++s)
      for (std::size_t c = 0; c < d; ++c) o[g * d + c] += in[(g * set_size + s) * d + c];
    for (std::size_t c = 0; c < d; ++c) o[g * d + c] *= inv;
  }
  return make_result<T>(std::move(out), {x}, "mean_over_set", [set_size, d, inv](Node<T>& n) {
    const T* dy = n.value.grad().data();
    T* dx = parent_grad(n, 0).data();
    const std::size_t groups = n.value.rows();
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t s = 0; s < set_size; ++s)
        for (std::size_t c = 0; c < d; ++c) dx[(g * set_size + s) * d + c] += dy[g * d + c] * inv;
  });
}

template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  BatchNormState<T>& state, bool training) {
  const std::size_t rows = x.rows();
  const std::size_t d = x.cols();
  if (gamma.size() != d || beta.size() != d || state.running_mean.size() != d ||
      state.running_var.size() != d) {
    throw ShapeError("batch_norm: parameters do not match " + std::to_string(d) + " channels");
  }
  if (training && rows < 2) {
    throw ShapeError("batch_norm: training mode needs at least 2 rows to estimate variance");
  }
  const T* in = x.value().data().data();
  const T* g = gamma.value().data().data();
  const T* b = beta.value().data().data();
  std::vector<T> mean(d), inv_std(d);
  if (training) {
    std::vector<double> acc(d, 0.0), acc2(d, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < d; ++c) acc[c] += in[r * d + c];
    for (std::size_t c = 0; c < d; ++c) acc[c] /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = in[r * d + c] - acc[c];
        acc2[c] += diff * diff;
      }
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    for (std::size_t c = 0; c < d; ++c) {
      const double var = acc2[c] / static_cast<double>(rows);
      mean[c] = static_cast<T>(acc[c]);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + state.eps));
      const double unbiased = acc2[c] / static_cast<double>(rows - 1);
      rm[c] = static_cast<T>((1.0 - state.momentum) * rm[c] + state.momentum * acc[c]);
      rv[c] = static_cast<T>((1.0 - state.momentum) * rv[c] + state.momentum * unbiased);
    }
  } else {
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    for (std::size_t c = 0; c < d; ++c) {
      mean[c] = rm[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + state.eps));
    }
  }
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  {
    T* o = out.data().data();
    T* h = xhat.data().data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        const T v = (in[r * d + c] - mean[c]) * inv_std[c];
        h[r * d + c] = v;
        o[r * d + c] = g[c] * v + b[c];
      }
  }
  return make_result<T>(
      std::move(out), {x, gamma, beta}, "batch_norm",
      [xhat = std::move(xhat), inv_std = std::move(inv_std), training, rows, d](Node<T>& n) {
        const T* dy = n.value.grad().data();
        const T* h = xhat.data().data();
        const T* g = n.parents[1]->value.data().data();
        std::vector<double> sum_dy(d, 0.0), sum_dy_h(d, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < d; ++c) {
            sum_dy[c] += dy[r * d + c];
            sum_dy_h[c] += static_cast<double>(dy[r * d + c]) * h[r * d + c];
          }
        if (wants_grad(n, 1)) {
          auto dg = parent_grad(n, 1);
          for (std::size_t c = 0; c < d; ++c) dg[c] += static_cast<T>(sum_dy_h[c]);
        }
        if (wants_grad(n, 2)) {
          auto db = parent_grad(n, 2);
          for (std::size_t c = 0; c < d; ++c) db[c] += static_cast<T>(sum_dy[c]);
        }
        if (wants_grad(n, 0)) {
          T* dx = parent_grad(n, 0).data();
          if (training) {
            const double inv_rows = 1.0 / static_cast<double>(rows);
            std::vector<T> mean_dy(d), mean_dy_h(d), scale(d);
            for (std::size_t c = 0; c < d; ++c) {
              mean_dy[c] = static_cast<T>(sum_dy[c] * inv_rows);
              mean_dy_h[c] = static_cast<T>(sum_dy_h[c] * inv_rows);
              scale[c] = g[c] * inv_std[c];
            }
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < d; ++c) {
                const std::size_t i = r * d + c;
                dx[i] += scale[c] * (dy[i] - mean_dy[c] - h[i] * mean_dy_h[c]);
              }
          } else {
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < d; ++c) dx[r * d + c] += dy[r * d + c] * g[c] * inv_std[c];
          }
        }
      });
}

template <class T>
Var<T> dropout(const Var<T>& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = rng.uniform() < p ? T{0} : scale;
  Tensor<T> out(x.shape());
  auto in = x.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] * mask[i];
  return make_result<T>(std::move(out), {x}, "dropout", [mask = std::move(mask)](Node<T>& n) {
    auto dy = n.value.grad();
    auto dx = parent_grad(n, 0);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * mask[i];
  });
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  Tensor<T> out(logits.shape());
  const std::size_t rows = logits.rows();
  const std::size_t c = logits.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = logits.at(r, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at(r, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(logits.at(r, j) - mx));
    for (std::size_t j = 0; j < c; ++j)
      out.at(r, j) = static_cast<T>(std::exp(static_cast<double>(logits.at(r, j) - mx)) / z);
  }
  return out;
}

template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> targets) {
  const std::size_t rows = logits.rows();
  const std::size_t classes = logits.cols();
  if (targets.size() != rows) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw ShapeError("softmax_cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
  }
  Tensor<T> probs = softmax_rows(logits.value());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = logits.value().data().data() + r * classes;
    T mx = row[0];
    for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < classes; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    loss += std::log(z) + static_cast<double>(mx) - static_cast<double>(row[targets[r]]);
  }
  loss /= static_cast<double>(rows);
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result<T>(Tensor<T>(Shape{1}, {static_cast<T>(loss)}), {logits}, "softmax_cross_entropy",
                        [probs = std::move(probs), tgt = std::move(tgt), rows, classes](Node<T>& n) {
                          const T up = n.value.grad()[0] / static_cast<T>(rows);
                          auto dx = parent_grad(n, 0);
                          const T* p = probs.data().data();
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < classes; ++j) {
                              const T onehot = static_cast<int>(j) == tgt[r] ? T{1} : T{0};
                              dx[r * classes + j] += up * (p[r * classes + j] - onehot);
                            }
                        });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  double s = 0.0;
  for (T v : x.value().data()) s += v;
  return make_result<T>(Tensor<T>(Shape{1}, {static_cast<T>(s)}), {x}, "sum", [](Node<T>& n) {
    const T up = n.value.grad()[0];
    for (auto& g : parent_grad(n, 0)) g += up;
  });
}

template <class T>
Var<T> dot(const Var<T>& x, const Tensor<T>& w) {
  if (w.size() != x.size()) throw ShapeError("dot: weight size does not match input");
  double s = 0.0;
  auto xv = x.value().data();
  auto wv = w.data();
  for (std::size_t i = 0; i < xv.size(); ++i) s += static_cast<double>(xv[i]) * wv[i];
  return make_result<T>(Tensor<T>(Shape{1}, {static_cast<T>(s)}), {x}, "dot", [w](Node<T>& n) {
    const T up = n.value.grad()[0];
    auto dx = parent_grad(n, 0);
    auto wv = w.data();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += up * wv[i];
  });
}

#define MARNET_INSTANTIATE(T)                                                                   \
  template Var<T> grouped_linear<T>(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t);  \
  template Var<T> relu<T>(const Var<T>&);                                                       \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                         \
  template Var<T> concat_channels<T>(const std::vector<Var<T>>&);                               \
  template Var<T> gather_rows<T>(const Var<T>&, std::span<const std::size_t>);                  \
  template Var<T> weighted_gather<T>(const Var<T>&, std::span<const std::size_t>,               \
                                     std::span<const T>, std::size_t);                          \
  template Var<T> max_over_set<T>(const Var<T>&, std::size_t);                                  \
  template Var<T> max_over_set<T>(const Var<T>&);                                               \
  template Var<T> mean_over_set<T>(const Var<T>&, std::size_t);                                 \
  template Var<T> batch_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormState<T>&, \
                                bool);                                                          \
  template Var<T> dropout<T>(const Var<T>&, double, bool, Rng&);                                \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                         \
  template Var<T> softmax_cross_entropy<T>(const Var<T>&, std::span<const int>);                \
  template Var<T> sum<T>(const Var<T>&);                                                        \
  template Var<T> dot<T>(const Var<T>&, const Tensor<T>&);

MARNET_INSTANTIATE(float)
MARNET_INSTANTIATE(double)
#undef MARNET_INSTANTIATE

}  // namespace marnet
