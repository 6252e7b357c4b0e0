#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dfl {

class Graph;

using Shape = std::vector<size_t>;

size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// The fixed primitive set. Composite operations contributed by other
// modules (losses, ROI pooling) enter the graph as custom nodes.
enum class OpKind {
  conv2d,
  maxpool2d,
  relu,
  sigmoid,
  upsample_nearest,
  concat_channels,
  linear,
  add,
  mul_scalar,
  sum,
  custom,
};

const char* op_name(OpKind kind);

// Parameters attached to a primitive node. Only the fields a kind uses are
// meaningful (conv2d: stride/pad; maxpool2d: window/stride;
// upsample_nearest: factor; mul_scalar: scalar).
struct OpSpec {
  OpKind kind = OpKind::relu;
  int stride = 1;
  int pad = 0;
  int window = 0;
  int factor = 1;
  double scalar = 0.0;
};

// Handle to a value stored in a Graph. Copying the handle is cheap; the
// data and gradient buffers live in the owning graph.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Graph* graph, size_t id) : graph_(graph), id_(id) {}

  bool valid() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  size_t id() const { return id_; }

  const Shape& shape() const;
  size_t numel() const;
  std::span<const double> value() const;
  std::span<const double> grad() const;

 private:
  Graph* graph_ = nullptr;
  size_t id_ = 0;
};

// Extension point for composite nodes. forward values are computed by the
// builder before the node is appended; backward reads the output adjoint
// from the graph and accumulates input adjoints.
class CustomOp {
 public:
  virtual ~CustomOp() = default;
  virtual const char* name() const = 0;
  virtual void backward(Graph& g, std::span<const size_t> inputs,
                        size_t output) = 0;
};

// Append-only reverse-mode tape. Construction, forward, and backward are a
// single-writer unit; distinct graphs may be used concurrently.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor leaf(Shape shape);
  Tensor leaf(Shape shape, std::span<const double> values);

  // Generic entry point; shape-mismatched inputs are rejected before any
  // arithmetic. Named wrappers below cover the common cases.
  Tensor forward(const OpSpec& spec, std::span<const Tensor> inputs);

  Tensor conv2d(Tensor x, Tensor w, Tensor b, int stride = 1, int pad = 0);
  Tensor maxpool2d(Tensor x, int window, int stride);
  Tensor relu(Tensor x);
  Tensor sigmoid(Tensor x);
  Tensor upsample_nearest(Tensor x, int factor);
  Tensor concat_channels(Tensor a, Tensor b);
  Tensor linear(Tensor x, Tensor w, Tensor b);
  Tensor add(Tensor a, Tensor b);
  Tensor mul_scalar(Tensor x, double c);
  Tensor sum(Tensor x);

  // Composite node with precomputed forward values.
  Tensor custom(std::shared_ptr<CustomOp> op, std::span<const Tensor> inputs,
                Shape out_shape, std::vector<double> out_values);

  // Accumulates d(loss)/d(tensor) into every reachable tensor's grad.
  // Each call adds one full gradient, so calling twice doubles the grads.
  void backward(Tensor loss);

  void zero_grads();

  size_t num_tensors() const { return tensors_.size(); }

  const Shape& shape(size_t id) const { return tensors_[id].shape; }
  std::span<const double> value(size_t id) const { return tensors_[id].value; }
  std::span<double> value_mut(size_t id) { return tensors_[id].value; }
  std::span<const double> grad(size_t id) const { return tensors_[id].grad; }

  // Adjoint access for CustomOp::backward. Valid only during backward().
  std::span<const double> adjoint_of(size_t id) const;
  std::span<double> adjoint_accum(size_t id);

 private:
  struct Storage {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
  };
  struct Node {
    OpSpec spec;
    std::vector<size_t> in;
    size_t out = 0;
    std::vector<size_t> aux;  // argmax bookkeeping for maxpool
    std::shared_ptr<CustomOp> custom;
  };

  size_t add_tensor(Shape shape, std::vector<double> values);
  void backward_node(const Node& node);

  std::vector<Storage> tensors_;
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> adj_;
};

// Central-finite-difference gradient verification. The builder constructs a
// fresh scalar-valued graph from the flat point vector and reports which
// leaves, concatenated in order, correspond to it.
struct BuiltScalar {
  Tensor loss;
  std::vector<Tensor> inputs;
};
using ScalarBuilder =
    std::function<BuiltScalar(Graph&, std::span<const double>)>;

// Returns max over coordinates of |analytic - numeric| / max(1, |analytic|,
// |numeric|) with perturbation h (central differences).
double grad_check(const ScalarBuilder& build, std::span<const double> point,
                  double h = 1e-5);

// Weight checkpoint records, stored in the DFLW1 binary format: magic
// "DFLW1\n", then per parameter a length-prefixed UTF-8 name, u32 rank,
// u32 extents, and f64 values, all little-endian.
struct ParamRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

void save_checkpoint(const std::filesystem::path& path,
                     std::span<const ParamRecord> params);
std::vector<ParamRecord> load_checkpoint(const std::filesystem::path& path);

}  // namespace dfl
