#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rstn/common.hpp"

namespace rstn::tc {

// Dense 64-bit float tensor, row-major, last index fastest.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> d);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor scalar(double value) { return full({1}, value); }

  int numel() const { return static_cast<int>(data.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  double& at3(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
  }
  double at3(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
};

int shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// 2D crop window over the trailing two dims, inclusive bounds.
struct Window {
  int min_row = 0;
  int min_col = 0;
  int max_row = 0;
  int max_col = 0;

  int rows() const { return max_row - min_row + 1; }
  int cols() const { return max_col - min_col + 1; }
  bool operator==(const Window&) const = default;
};

// Reverse-mode tape. Nodes are appended in construction order, which is the
// topological order; backward walks the records once, in reverse. One graph
// is owned by one logical thread.
class Graph {
 public:
  using NodeId = std::int32_t;

  // Leaves. Parameters retain gradients and participate in SGD/gradcheck;
  // frozen leaves (requires_grad=false) are excluded.
  NodeId leaf(Tensor value, bool requires_grad = false);

  NodeId conv2d_same(NodeId x, NodeId kernel, NodeId bias);
  NodeId mul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId relu(NodeId x);
  NodeId sigmoid(NodeId x);
  // Elementwise y = scale*x + shift.
  NodeId affine(NodeId x, double scale, double shift);
  // Elementwise quotient; used on scalars for composite losses.
  NodeId div(NodeId a, NodeId b);
  NodeId sum(NodeId x);
  NodeId mean(NodeId x);
  // Nearest-neighbour 2x resampling over the trailing two dims.
  NodeId downsample2x(NodeId x);
  NodeId upsample2x(NodeId x, int out_h, int out_w);
  NodeId window(NodeId x, const Window& win);
  // Adjoint of window: places x into a zero [C,out_h,out_w] grid at win.
  NodeId embed(NodeId x, const Window& win, int out_h, int out_w);

  const Tensor& value(NodeId id) const;
  // Gradient of the last backward() target wrt node id. Valid for nodes on
  // a parameter path; zeros tensor if the node never received gradient.
  const Tensor& grad(NodeId id) const;
  bool requires_grad(NodeId id) const;

  // Reverse accumulation from a scalar loss. Rejects non-scalar targets.
  void backward(NodeId loss);

  int node_count() const { return static_cast<int>(nodes_.size()); }

 private:
  enum class Op {
    leaf, conv2d, mul, add, relu, sigmoid, affine, div, sum, mean,
    down2, up2, window, embed
  };

  struct Node {
    Op op;
    NodeId in[3] = {-1, -1, -1};
    int n_in = 0;
    Tensor value;
    Tensor grad_buf;
    bool needs_grad = false;  // on a path from a parameter
    bool is_param = false;
    double a = 0.0, b = 0.0;  // affine coefficients
    Window win;
  };

  NodeId push(Node n);
  Node& at(NodeId id);
  const Node& at(NodeId id) const;
  Tensor& grad_buffer(NodeId id);

  std::vector<Node> nodes_;
};

// SGD with momentum. Velocity buffers are keyed by registration order; the
// caller passes the same parameter list every step.
struct OptimizerState {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::vector<Tensor> velocity;
  std::int64_t rejected_steps = 0;  // tensors skipped on non-finite grads
};

// v <- momentum*v - lr*g ; p <- p + v. A tensor with any non-finite
// gradient entry is left untouched and counted in state.rejected_steps.
void sgd_step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
              OptimizerState& state);

struct GradCheckResult {
  double max_rel_error = 0.0;
  int worst_param = -1;
  int worst_index = -1;
  std::int64_t coords_checked = 0;
  std::int64_t coords_skipped = 0;  // non-finite loss at a perturbed point
};

// Central finite differences against an analytic gradient. `loss_fn` must
// rebuild the computation from the current parameter values so perturbed
// evaluations see the change. `analytic` holds d(loss)/d(param) per tensor.
// max_coords_per_tensor < 0 checks every coordinate; otherwise a
// deterministic stride subsample is used.
GradCheckResult check_gradients(
    const std::function<double()>& loss_fn, std::vector<Tensor*>& params,
    const std::vector<Tensor>& analytic, double step,
    int max_coords_per_tensor = -1);

}  // namespace rstn::tc
