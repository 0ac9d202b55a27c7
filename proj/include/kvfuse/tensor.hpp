#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kvfuse {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}

// Dense row-major float32 tensor with an optional gradient buffer.
//
// Tensor is a cheap handle: copies share storage. Data is treated as
// immutable once an op has consumed it; the only sanctioned in-place writers
// are optimizers and initializers going through mutable_data().
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t rank() const;
  // Negative axes count from the back.
  int64_t dim(int64_t axis) const;
  int64_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data() const;
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  // True for tensors created by the user rather than by a recorded op.
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const float> grad() const;
  // Allocates a zero gradient on first use.
  std::span<float> mutable_grad() const;
  void zero_grad();

  // Deep copy of the data; the copy is a leaf with no gradient.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend class Graph;
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Tape of recorded operations for one forward pass. Ops record themselves on
// the graph that is active on the calling thread (see GraphScope) whenever at
// least one input requires a gradient. Without an active graph, ops compute
// values only.
class Graph {
 public:
  using BackwardFn = std::function<void(const Tensor& output)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Registers `output` as produced by `op` from `inputs`. When recording is
  // active the output is marked as requiring grad; otherwise this is a no-op.
  Tensor record(std::string_view op, Tensor output, std::vector<Tensor> inputs,
                BackwardFn backward);

  // Reverse-mode sweep from a scalar loss. Intermediate gradients are reset
  // first so repeated calls accumulate only into leaf tensors.
  void backward(const Tensor& loss);

  size_t size() const { return nodes_.size(); }
  std::vector<std::string_view> op_names() const;

 private:
  struct Node {
    std::string_view op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Makes a graph the active recorder for the current thread.
class GraphScope {
 public:
  explicit GraphScope(Graph& graph);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* previous_;
};

Graph* active_graph();

// Records a custom op on the active graph if any input requires grad.
Tensor record_op(std::string_view op, Tensor output, std::vector<Tensor> inputs,
                 Graph::BackwardFn backward);

// True when an op with these inputs would be recorded.
bool should_record(std::initializer_list<const Tensor*> inputs);

// C[M,P] (+)= A[M,K] * B[K,P], every output element summed in double over
// ascending k.
void gemm(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t p,
          bool accumulate);

// --- differentiable ops -----------------------------------------------------

// a[..., M, K] @ b[..., K, P]. Batch dims of b must equal those of a, or b may
// be a plain matrix shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor sum(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softmax_lastdim(const Tensor& x);
Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps);
// Mean token cross entropy over positions where mask is true; 0 if none.
Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                     std::span<const uint8_t> mask);
Tensor embedding(const Tensor& table, std::span<const int32_t> ids);
Tensor reshape(const Tensor& a, Shape shape);
// [A, B, C] -> [B, A, C]
Tensor transpose01(const Tensor& a);
// [M, N] -> [N, M]
Tensor transpose2d(const Tensor& a);

}  // namespace kvfuse
