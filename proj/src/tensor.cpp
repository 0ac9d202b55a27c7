#include "kvfuse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kvfuse/errors.hpp"

namespace kvfuse {

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  bool is_leaf = true;
};

}  // namespace detail

namespace {

thread_local Graph* g_active_graph = nullptr;

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// --- Tensor -------------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  if (static_cast<int64_t>(data.size()) != n) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = static_cast<size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }
int64_t Tensor::rank() const { return static_cast<int64_t>(impl_->shape.size()); }

int64_t Tensor::dim(int64_t axis) const {
  const int64_t r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis out of range for shape " + shape_str(shape()));
  }
  return impl_->shape[static_cast<size_t>(axis)];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(impl_->data.size()); }
std::span<const float> Tensor::data() const { return impl_->data; }
std::span<float> Tensor::mutable_data() const { return impl_->data; }

float Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }
bool Tensor::is_leaf() const { return impl_->is_leaf; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const float> Tensor::grad() const { return impl_->grad; }

std::span<float> Tensor::mutable_grad() const {
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::zero_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

Tensor Tensor::clone() const { return Tensor(shape(), impl_->data, false); }

// --- Graph --------------------------------------------------------------------

Tensor Graph::record(std::string_view op, Tensor output, std::vector<Tensor> inputs,
                     BackwardFn backward) {
  output.impl_->requires_grad = true;
  output.impl_->is_leaf = false;
  nodes_.push_back(Node{op, std::move(inputs), output, std::move(backward)});
  return output;
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() on a loss that was not produced by recorded ops");
  }
  for (auto& node : nodes_) node.output.zero_grad();
  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output.impl_->grad.empty()) continue;
    it->backward(it->output);
  }
}

std::vector<std::string_view> Graph::op_names() const {
  std::vector<std::string_view> names;
  names.reserve(nodes_.size());
  for (const auto& n : nodes_) names.push_back(n.op);
  return names;
}

GraphScope::GraphScope(Graph& graph) : previous_(g_active_graph) { g_active_graph = &graph; }
GraphScope::~GraphScope() { g_active_graph = previous_; }

Graph* active_graph() { return g_active_graph; }

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active_graph == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

Tensor record_op(std::string_view op, Tensor output, std::vector<Tensor> inputs,
                 Graph::BackwardFn backward) {
  Graph* g = g_active_graph;
  if (g == nullptr) return output;
  bool any = false;
  for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
  if (!any) return output;
  return g->record(op, std::move(output), std::move(inputs), std::move(backward));
}

// --- kernels ------------------------------------------------------------------

void gemm(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t p,
          bool accumulate) {
  // Four output rows share each pass over B. Every element still sums over
  // kk in ascending order.
  constexpr int64_t kRows = 4;
  std::vector<double> acc(static_cast<size_t>(kRows * p));
  for (int64_t i0 = 0; i0 < m; i0 += kRows) {
    const int64_t rows = std::min(kRows, m - i0);
    std::fill(acc.begin(), acc.end(), 0.0);
    if (rows == kRows) {
      double* a0 = acc.data();
      double* a1 = a0 + p;
      double* a2 = a1 + p;
      double* a3 = a2 + p;
      for (int64_t kk = 0; kk < k; ++kk) {
        const double x0 = a[i0 * k + kk], x1 = a[(i0 + 1) * k + kk];
        const double x2 = a[(i0 + 2) * k + kk], x3 = a[(i0 + 3) * k + kk];
        const float* brow = b + kk * p;
        for (int64_t j = 0; j < p; ++j) {
          const double bj = brow[j];
          a0[j] += x0 * bj;
          a1[j] += x1 * bj;
          a2[j] += x2 * bj;
          a3[j] += x3 * bj;
        }
      }
    } else {
      for (int64_t r = 0; r < rows; ++r) {
        const float* arow = a + (i0 + r) * k;
        double* accp = acc.data() + r * p;
        for (int64_t kk = 0; kk < k; ++kk) {
          const double aik = arow[kk];
          const float* brow = b + kk * p;
          for (int64_t j = 0; j < p; ++j) accp[j] += aik * static_cast<double>(brow[j]);
        }
      }
    }
    for (int64_t r = 0; r < rows; ++r) {
      float* crow = c + (i0 + r) * p;
      const double* accp = acc.data() + r * p;
      if (accumulate) {
        for (int64_t j = 0; j < p; ++j) crow[j] = static_cast<float>(crow[j] + accp[j]);
      } else {
        for (int64_t j = 0; j < p; ++j) crow[j] = static_cast<float>(accp[j]);
      }
    }
  }
}

namespace {

std::vector<float> transpose_copy(const float* src, int64_t rows, int64_t cols) {
  std::vector<float> out(static_cast<size_t>(rows * cols));
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace

// --- ops ----------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const int64_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), p = b.dim(-1);
  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  const bool shared_b = batch_b.empty();
  if (k != k2 || (!shared_b && batch_a != batch_b)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const int64_t batch = shape_numel(batch_a);
  Shape out_shape = batch_a;
  out_shape.push_back(m);
  out_shape.push_back(p);
  std::vector<float> out(static_cast<size_t>(batch * m * p));
  const float* ad = a.data().data();
  const float* bd = b.data().data();
  if (shared_b) {
    gemm(ad, bd, out.data(), batch * m, k, p, false);
  } else {
    for (int64_t i = 0; i < batch; ++i)
      gemm(ad + i * m * k, bd + i * k * p, out.data() + i * m * p, m, k, p, false);
  }
  Tensor result(std::move(out_shape), std::move(out));
  if (!should_record({&a, &b})) return result;
  return record_op("matmul", result, {a, b},
                   [a, b, batch, m, k, p, shared_b](const Tensor& outp) mutable {
                     const float* g = outp.grad().data();
                     if (a.requires_grad()) {
                       float* ga = a.mutable_grad().data();
                       const int64_t nb = shared_b ? 1 : batch;
                       for (int64_t i = 0; i < nb; ++i) {
                         auto bt = transpose_copy(b.data().data() + i * k * p, k, p);
                         const int64_t rows = shared_b ? batch * m : m;
                         gemm(g + i * m * p, bt.data(), ga + i * m * k, rows, p, k, true);
                       }
                     }
                     if (b.requires_grad()) {
                       float* gb = b.mutable_grad().data();
                       if (shared_b) {
                         auto at = transpose_copy(a.data().data(), batch * m, k);
                         gemm(at.data(), g, gb, k, batch * m, p, true);
                       } else {
                         for (int64_t i = 0; i < batch; ++i) {
                           auto at = transpose_copy(a.data().data() + i * m * k, m, k);
                           gemm(at.data(), g + i * m * p, gb + i * k * p, k, m, p, true);
                         }
                       }
                     }
                   });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  Tensor result(a.shape(), std::move(out));
  if (!should_record({&a, &b})) return result;
  return record_op("add", result, {a, b}, [a, b](const Tensor& outp) mutable {
    auto g = outp.grad();
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto gt = t->mutable_grad();
      for (size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto ad = a.data();
  auto bd = b.data();
  std::vector<float> out(ad.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  Tensor result(a.shape(), std::move(out));
  if (!should_record({&a, &b})) return result;
  return record_op("mul", result, {a, b}, [a, b](const Tensor& outp) mutable {
    auto g = outp.grad();
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      auto bd = b.data();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      auto ad = a.data();
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
    }
  });
}

Tensor scale(const Tensor& a, float factor) {
  std::vector<float> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  Tensor result(a.shape(), std::move(out));
  if (!should_record({&a})) return result;
  return record_op("scale", result, {a}, [a, factor](const Tensor& outp) mutable {
    auto g = outp.grad();
    auto ga = a.mutable_grad();
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  Tensor result = Tensor::scalar(static_cast<float>(acc));
  if (!should_record({&a})) return result;
  return record_op("sum", result, {a}, [a](const Tensor& outp) mutable {
    const float g = outp.grad()[0];
    for (auto& v : a.mutable_grad()) v += g;
  });
}

Tensor silu(const Tensor& a) {
  auto ad = a.data();
  std::vector<float> out(ad.size());
  for (size_t i = 0; i < out.size(); ++i) {
    const double x = ad[i];
    out[i] = static_cast<float>(x / (1.0 + std::exp(-x)));
  }
  Tensor result(a.shape(), std::move(out));
  if (!should_record({&a})) return result;
  return record_op("silu", result, {a}, [a](const Tensor& outp) mutable {
    auto g = outp.grad();
    auto ad = a.data();
    auto ga = a.mutable_grad();
    for (size_t i = 0; i < g.size(); ++i) {
      const double x = ad[i];
      const double s = 1.0 / (1.0 + std::exp(-x));
      ga[i] += static_cast<float>(g[i] * s * (1.0 + x * (1.0 - s)));
    }
  });
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() < 1 || x.dim(-1) < 1) {
    throw DimensionError("softmax_lastdim: empty last dimension in " + shape_str(x.shape()));
  }
  const int64_t d = x.dim(-1);
  const int64_t rows = x.numel() / d;
  auto xd = x.data();
  std::vector<float> out(xd.size());
  for (int64_t r = 0; r < rows; ++r) {
    const float* row = xd.data() + r * d;
    double mx = row[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double total = 0.0;
    std::vector<double> e(static_cast<size_t>(d));
    for (int64_t j = 0; j < d; ++j) {
      e[j] = std::exp(static_cast<double>(row[j]) - mx);
      total += e[j];
    }
    for (int64_t j = 0; j < d; ++j) out[r * d + j] = static_cast<float>(e[j] / total);
  }
  Tensor result(x.shape(), std::move(out));
  if (!should_record({&x})) return result;
  return record_op("softmax", result, {x}, [x, d, rows](const Tensor& outp) mutable {
    auto g = outp.grad();
    auto y = outp.data();
    auto gx = x.mutable_grad();
    for (int64_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) dot += static_cast<double>(g[r * d + j]) * y[r * d + j];
      for (int64_t j = 0; j < d; ++j)
        gx[r * d + j] += static_cast<float>(y[r * d + j] * (g[r * d + j] - dot));
    }
  });
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps) {
  if (weight.rank() != 1 || x.rank() < 1 || x.dim(-1) != weight.dim(0)) {
    throw DimensionError("rms_norm: weight " + shape_str(weight.shape()) +
                         " does not match input " + shape_str(x.shape()));
  }
  const int64_t d = x.dim(-1);
  const int64_t rows = x.numel() / d;
  auto xd = x.data();
  auto wd = weight.data();
  std::vector<float> out(xd.size());
  std::vector<double> inv(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double v = xd[r * d + j];
      ss += v * v;
    }
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(d) + static_cast<double>(eps));
    for (int64_t j = 0; j < d; ++j)
      out[r * d + j] = static_cast<float>(xd[r * d + j] * inv[r] * wd[j]);
  }
  Tensor result(x.shape(), std::move(out));
  if (!should_record({&x, &weight})) return result;
  return record_op(
      "rms_norm", result, {x, weight},
      [x, weight, d, rows, inv = std::move(inv)](const Tensor& outp) mutable {
        auto g = outp.grad();
        auto xd = x.data();
        auto wd = weight.data();
        if (x.requires_grad()) {
          auto gx = x.mutable_grad();
          for (int64_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (int64_t j = 0; j < d; ++j)
              dot += static_cast<double>(g[r * d + j]) * wd[j] * xd[r * d + j];
            const double ir = inv[r];
            const double coef = ir * ir * ir * dot / static_cast<double>(d);
            for (int64_t j = 0; j < d; ++j) {
              gx[r * d + j] += static_cast<float>(ir * wd[j] * g[r * d + j] -
                                                  coef * xd[r * d + j]);
            }
          }
        }
        if (weight.requires_grad()) {
          auto gw = weight.mutable_grad();
          std::vector<double> acc(static_cast<size_t>(d), 0.0);
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j)
              acc[j] += static_cast<double>(g[r * d + j]) * xd[r * d + j] * inv[r];
          for (int64_t j = 0; j < d; ++j) gw[j] += static_cast<float>(acc[j]);
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                     std::span<const uint8_t> mask) {
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy: logits must be [T, V], got " + shape_str(logits.shape()));
  }
  const int64_t t_len = logits.dim(0), v = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != t_len ||
      static_cast<int64_t>(mask.size()) != t_len) {
    throw DimensionError("cross_entropy: targets/mask length must equal " + std::to_string(t_len));
  }
  auto ld = logits.data();
  int64_t count = 0;
  double total = 0.0;
  std::vector<double> lse(static_cast<size_t>(t_len), 0.0);
  for (int64_t t = 0; t < t_len; ++t) {
    if (!mask[t]) continue;
    if (targets[t] < 0 || targets[t] >= v) {
      throw VocabularyError("cross_entropy: target id " + std::to_string(targets[t]) +
                            " outside vocabulary of size " + std::to_string(v));
    }
    const float* row = ld.data() + t * v;
    double mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double s = 0.0;
    for (int64_t j = 0; j < v; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
    lse[t] = mx + std::log(s);
    total += lse[t] - row[targets[t]];
    ++count;
  }
  Tensor result = Tensor::scalar(count ? static_cast<float>(total / count) : 0.0f);
  if (count == 0 || !should_record({&logits})) return result;
  std::vector<int32_t> tg(targets.begin(), targets.end());
  std::vector<uint8_t> mk(mask.begin(), mask.end());
  return record_op("cross_entropy", result, {logits},
                   [logits, tg = std::move(tg), mk = std::move(mk), lse = std::move(lse), t_len, v,
                    count](const Tensor& outp) mutable {
                     const double g = outp.grad()[0] / static_cast<double>(count);
                     auto ld = logits.data();
                     auto gl = logits.mutable_grad();
                     for (int64_t t = 0; t < t_len; ++t) {
                       if (!mk[t]) continue;
                       for (int64_t j = 0; j < v; ++j) {
                         const double p = std::exp(static_cast<double>(ld[t * v + j]) - lse[t]);
                         gl[t * v + j] += static_cast<float>(g * (p - (j == tg[t] ? 1.0 : 0.0)));
                       }
                     }
                   });
}

Tensor embedding(const Tensor& table, std::span<const int32_t> ids) {
  if (table.rank() != 2) {
    throw DimensionError("embedding: table must be [V, D], got " + shape_str(table.shape()));
  }
  const int64_t v = table.dim(0), d = table.dim(1);
  const auto t_len = static_cast<int64_t>(ids.size());
  std::vector<float> out(static_cast<size_t>(t_len * d));
  auto td = table.data();
  for (int64_t t = 0; t < t_len; ++t) {
    if (ids[t] < 0 || ids[t] >= v) {
      throw VocabularyError("embedding: token id " + std::to_string(ids[t]) +
                            " outside vocabulary of size " + std::to_string(v));
    }
    std::copy_n(td.data() + ids[t] * d, d, out.data() + t * d);
  }
  Tensor result({t_len, d}, std::move(out));
  if (!should_record({&table})) return result;
  std::vector<int32_t> idv(ids.begin(), ids.end());
  return record_op("embedding", result, {table},
                   [table, idv = std::move(idv), d](const Tensor& outp) mutable {
                     auto g = outp.grad();
                     auto gt = table.mutable_grad();
                     for (size_t t = 0; t < idv.size(); ++t)
                       for (int64_t j = 0; j < d; ++j) gt[idv[t] * d + j] += g[t * d + j];
                   });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  Tensor result(std::move(shape), std::vector<float>(a.data().begin(), a.data().end()));
  if (!should_record({&a})) return result;
  return record_op("reshape", result, {a}, [a](const Tensor& outp) mutable {
    auto g = outp.grad();
    auto ga = a.mutable_grad();
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Tensor transpose01(const Tensor& a) {
  if (a.rank() != 3) throw DimensionError("transpose01: expected rank 3, got " + shape_str(a.shape()));
  const int64_t d0 = a.dim(0), d1 = a.dim(1), d2 = a.dim(2);
  auto ad = a.data();
  std::vector<float> out(ad.size());
  for (int64_t i = 0; i < d0; ++i)
    for (int64_t j = 0; j < d1; ++j)
      std::copy_n(ad.data() + (i * d1 + j) * d2, d2, out.data() + (j * d0 + i) * d2);
  Tensor result({d1, d0, d2}, std::move(out));
  if (!should_record({&a})) return result;
  return record_op("transpose01", result, {a}, [a, d0, d1, d2](const Tensor& outp) mutable {
    auto g = outp.grad();
    auto ga = a.mutable_grad();
    for (int64_t i = 0; i < d0; ++i)
      for (int64_t j = 0; j < d1; ++j)
        for (int64_t k = 0; k < d2; ++k) ga[(i * d1 + j) * d2 + k] += g[(j * d0 + i) * d2 + k];
  });
}

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose2d: expected rank 2, got " + shape_str(a.shape()));
  const int64_t r = a.dim(0), c = a.dim(1);
  Tensor result({c, r}, transpose_copy(a.data().data(), r, c));
  if (!should_record({&a})) return result;
  return record_op("transpose2d", result, {a}, [a, r, c](const Tensor& outp) mutable {
    auto g = outp.grad();
    auto ga = a.mutable_grad();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

}  // namespace kvfuse
