#include "rstn/tensor.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "rstn/kernels.hpp"

namespace rstn {

Viewpoint viewpoint_from_name(const std::string& name) {
  for (Viewpoint v : kViewpoints)
    if (name == viewpoint_name(v)) return v;
  throw Error("unknown viewpoint '" + name + "'");
}

int default_thread_count() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  auto worker = [&] {
    for (;;) {
      const int i = next.fetch_add(1, std::memory_order_relaxed);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads) - 1);
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace rstn

namespace rstn::tc {

int shape_numel(const std::vector<int>& shape) {
  int n = 1;
  for (int e : shape) {
    require(e > 0, "tensor extents must be positive");
    n *= e;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i)
    os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<int> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  require(static_cast<int>(data.size()) == shape_numel(shape),
          "tensor data length does not match shape " + shape_str(shape));
}

Tensor Tensor::zeros(std::vector<int> shape) {
  const int n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  const int n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value));
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

namespace {

// Sigmoid clamped into the open interval; saturated inputs would otherwise
// round to exactly 0 or 1 in f64.
double stable_sigmoid(double x) {
  double s;
  if (x >= 0.0) {
    s = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    s = e / (1.0 + e);
  }
  const double lo = 1e-300;
  const double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2;
  return s < lo ? lo : (s > hi ? hi : s);
}

int down_extent(int n) { return (n + 1) / 2; }

}  // namespace

Graph::NodeId Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

Graph::Node& Graph::at(NodeId id) { return nodes_[static_cast<std::size_t>(id)]; }
const Graph::Node& Graph::at(NodeId id) const {
  return nodes_[static_cast<std::size_t>(id)];
}

Graph::NodeId Graph::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = Op::leaf;
  n.value = std::move(value);
  n.is_param = requires_grad;
  n.needs_grad = requires_grad;
  return push(std::move(n));
}

Graph::NodeId Graph::conv2d_same(NodeId x, NodeId kernel, NodeId bias) {
  const Tensor& xv = value(x);
  const Tensor& kv = value(kernel);
  const Tensor& bv = value(bias);
  require(xv.rank() == 3, "conv2d input must be [C,H,W], got " + shape_str(xv.shape));
  require(kv.rank() == 4, "conv2d kernel must be [Cout,Cin,k,k], got " + shape_str(kv.shape));
  require(kv.dim(2) == kv.dim(3) && kv.dim(2) % 2 == 1,
          "conv2d kernel must be square with odd size, got " + shape_str(kv.shape));
  require(kv.dim(1) == xv.dim(0),
          "conv2d channel mismatch: input " + shape_str(xv.shape) + " vs kernel " +
              shape_str(kv.shape));
  require(bv.rank() == 1 && bv.dim(0) == kv.dim(0),
          "conv2d bias must be [Cout], got " + shape_str(bv.shape));

  kernels::Conv2dShape cs{xv.dim(0), kv.dim(0), xv.dim(1), xv.dim(2), kv.dim(2)};
  Node n;
  n.op = Op::conv2d;
  n.in[0] = x; n.in[1] = kernel; n.in[2] = bias;
  n.n_in = 3;
  n.needs_grad = at(x).needs_grad || at(kernel).needs_grad || at(bias).needs_grad;
  n.value = Tensor::zeros({cs.cout, cs.h, cs.w});
  kernels::ops().conv2d_forward(cs, xv.data.data(), kv.data.data(), bv.data.data(),
                                n.value.data.data());
  return push(std::move(n));
}

Graph::NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require(av.same_shape(bv), "elementwise mul shape mismatch: " + shape_str(av.shape) +
                                 " vs " + shape_str(bv.shape));
  Node n;
  n.op = Op::mul;
  n.in[0] = a; n.in[1] = b;
  n.n_in = 2;
  n.needs_grad = at(a).needs_grad || at(b).needs_grad;
  n.value = Tensor::zeros(av.shape);
  kernels::ops().mul(av.data.data(), bv.data.data(), n.value.data.data(),
                     av.data.size());
  return push(std::move(n));
}

Graph::NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require(av.same_shape(bv), "elementwise add shape mismatch: " + shape_str(av.shape) +
                                 " vs " + shape_str(bv.shape));
  Node n;
  n.op = Op::add;
  n.in[0] = a; n.in[1] = b;
  n.n_in = 2;
  n.needs_grad = at(a).needs_grad || at(b).needs_grad;
  n.value = Tensor::zeros(av.shape);
  kernels::ops().add(av.data.data(), bv.data.data(), n.value.data.data(),
                     av.data.size());
  return push(std::move(n));
}

Graph::NodeId Graph::relu(NodeId x) {
  const Tensor& xv = value(x);
  Node n;
  n.op = Op::relu;
  n.in[0] = x;
  n.n_in = 1;
  n.needs_grad = at(x).needs_grad;
  n.value = Tensor::zeros(xv.shape);
  kernels::ops().relu(xv.data.data(), n.value.data.data(), xv.data.size());
  return push(std::move(n));
}

Graph::NodeId Graph::sigmoid(NodeId x) {
  const Tensor& xv = value(x);
  Node n;
  n.op = Op::sigmoid;
  n.in[0] = x;
  n.n_in = 1;
  n.needs_grad = at(x).needs_grad;
  n.value = Tensor::zeros(xv.shape);
  for (std::size_t i = 0; i < xv.data.size(); ++i)
    n.value.data[i] = stable_sigmoid(xv.data[i]);
  return push(std::move(n));
}

Graph::NodeId Graph::affine(NodeId x, double scale, double shift) {
  const Tensor& xv = value(x);
  Node n;
  n.op = Op::affine;
  n.in[0] = x;
  n.n_in = 1;
  n.a = scale;
  n.b = shift;
  n.needs_grad = at(x).needs_grad;
  n.value = Tensor::zeros(xv.shape);
  for (std::size_t i = 0; i < xv.data.size(); ++i)
    n.value.data[i] = scale * xv.data[i] + shift;
  return push(std::move(n));
}

Graph::NodeId Graph::div(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require(av.same_shape(bv), "elementwise div shape mismatch: " + shape_str(av.shape) +
                                 " vs " + shape_str(bv.shape));
  Node n;
  n.op = Op::div;
  n.in[0] = a; n.in[1] = b;
  n.n_in = 2;
  n.needs_grad = at(a).needs_grad || at(b).needs_grad;
  n.value = Tensor::zeros(av.shape);
  for (std::size_t i = 0; i < av.data.size(); ++i)
    n.value.data[i] = av.data[i] / bv.data[i];
  return push(std::move(n));
}

Graph::NodeId Graph::sum(NodeId x) {
  const Tensor& xv = value(x);
  Node n;
  n.op = Op::sum;
  n.in[0] = x;
  n.n_in = 1;
  n.needs_grad = at(x).needs_grad;
  double acc = 0.0;  // fixed row-major ascending order
  for (double v : xv.data) acc += v;
  n.value = Tensor::scalar(acc);
  return push(std::move(n));
}

Graph::NodeId Graph::mean(NodeId x) {
  const int n = value(x).numel();
  const NodeId s = sum(x);
  return affine(s, 1.0 / n, 0.0);
}

Graph::NodeId Graph::downsample2x(NodeId x) {
  const Tensor& xv = value(x);
  require(xv.rank() == 3, "downsample2x expects [C,H,W]");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  const int oh = down_extent(h), ow = down_extent(w);
  Node n;
  n.op = Op::down2;
  n.in[0] = x;
  n.n_in = 1;
  n.needs_grad = at(x).needs_grad;
  n.value = Tensor::zeros({c, oh, ow});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx)
        n.value.at3(ci, y, xx) = xv.at3(ci, 2 * y, 2 * xx);
  return push(std::move(n));
}

Graph::NodeId Graph::upsample2x(NodeId x, int out_h, int out_w) {
  const Tensor& xv = value(x);
  require(xv.rank() == 3, "upsample2x expects [C,H,W]");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  require(down_extent(out_h) == h && down_extent(out_w) == w,
          "upsample2x target extent incompatible with input");
  Node n;
  n.op = Op::up2;
  n.in[0] = x;
  n.n_in = 1;
  n.needs_grad = at(x).needs_grad;
  n.value = Tensor::zeros({c, out_h, out_w});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < out_h; ++y)
      for (int xx = 0; xx < out_w; ++xx)
        n.value.at3(ci, y, xx) = xv.at3(ci, y / 2, xx / 2);
  return push(std::move(n));
}

Graph::NodeId Graph::window(NodeId x, const Window& win) {
  const Tensor& xv = value(x);
  require(xv.rank() == 3, "window expects [C,H,W]");
  require(win.min_row >= 0 && win.min_col >= 0 && win.max_row < xv.dim(1) &&
              win.max_col < xv.dim(2) && win.min_row <= win.max_row &&
              win.min_col <= win.max_col,
          "window out of bounds");
  Node n;
  n.op = Op::window;
  n.in[0] = x;
  n.n_in = 1;
  n.win = win;
  n.needs_grad = at(x).needs_grad;
  n.value = Tensor::zeros({xv.dim(0), win.rows(), win.cols()});
  for (int c = 0; c < xv.dim(0); ++c)
    for (int y = 0; y < win.rows(); ++y)
      for (int xx = 0; xx < win.cols(); ++xx)
        n.value.at3(c, y, xx) = xv.at3(c, win.min_row + y, win.min_col + xx);
  return push(std::move(n));
}

Graph::NodeId Graph::embed(NodeId x, const Window& win, int out_h, int out_w) {
  const Tensor& xv = value(x);
  require(xv.rank() == 3, "embed expects [C,H,W]");
  require(win.min_row >= 0 && win.min_col >= 0 && win.max_row < out_h &&
              win.max_col < out_w && win.rows() == xv.dim(1) &&
              win.cols() == xv.dim(2),
          "embed window inconsistent with operand/output extents");
  Node n;
  n.op = Op::embed;
  n.in[0] = x;
  n.n_in = 1;
  n.win = win;
  n.needs_grad = at(x).needs_grad;
  n.value = Tensor::zeros({xv.dim(0), out_h, out_w});
  for (int c = 0; c < xv.dim(0); ++c)
    for (int y = 0; y < xv.dim(1); ++y)
      for (int xx = 0; xx < xv.dim(2); ++xx)
        n.value.at3(c, win.min_row + y, win.min_col + xx) = xv.at3(c, y, xx);
  return push(std::move(n));
}

const Tensor& Graph::value(NodeId id) const {
  require(id >= 0 && id < node_count(), "invalid node id");
  return at(id).value;
}

bool Graph::requires_grad(NodeId id) const { return at(id).needs_grad; }

Tensor& Graph::grad_buffer(NodeId id) {
  Node& n = at(id);
  if (n.grad_buf.data.empty()) n.grad_buf = Tensor::zeros(n.value.shape);
  return n.grad_buf;
}

const Tensor& Graph::grad(NodeId id) const {
  require(id >= 0 && id < node_count(), "invalid node id");
  const Node& n = at(id);
  require(!n.grad_buf.data.empty(),
          "node has no gradient; run backward() over a path containing it");
  return n.grad_buf;
}

void Graph::backward(NodeId loss) {
  require(loss >= 0 && loss < node_count(), "invalid node id");
  require(value(loss).numel() == 1, "backward target must be a scalar");
  const auto& k = kernels::ops();
  grad_buffer(loss).data[0] = 1.0;

  for (NodeId id = loss; id >= 0; --id) {
    Node& n = at(id);
    if (!n.needs_grad || n.grad_buf.data.empty()) continue;
    const double* gy = n.grad_buf.data.data();
    const std::size_t ny = n.grad_buf.data.size();
    switch (n.op) {
      case Op::leaf:
        break;
      case Op::conv2d: {
        Node& x = at(n.in[0]);
        Node& kn = at(n.in[1]);
        Node& bn = at(n.in[2]);
        kernels::Conv2dShape cs{x.value.dim(0), kn.value.dim(0), x.value.dim(1),
                                x.value.dim(2), kn.value.dim(2)};
        if (x.needs_grad)
          k.conv2d_grad_input(cs, gy, kn.value.data.data(),
                              grad_buffer(n.in[0]).data.data());
        if (kn.needs_grad)
          k.conv2d_grad_kernel(cs, gy, x.value.data.data(),
                               grad_buffer(n.in[1]).data.data());
        if (bn.needs_grad)
          kernels::conv2d_grad_bias(cs, gy, grad_buffer(n.in[2]).data.data());
        break;
      }
      case Op::mul: {
        Node& a = at(n.in[0]);
        Node& b = at(n.in[1]);
        if (a.needs_grad)
          k.mul_acc(gy, b.value.data.data(), grad_buffer(n.in[0]).data.data(), ny);
        if (b.needs_grad)
          k.mul_acc(gy, a.value.data.data(), grad_buffer(n.in[1]).data.data(), ny);
        break;
      }
      case Op::add: {
        if (at(n.in[0]).needs_grad)
          k.axpy(1.0, gy, grad_buffer(n.in[0]).data.data(), ny);
        if (at(n.in[1]).needs_grad)
          k.axpy(1.0, gy, grad_buffer(n.in[1]).data.data(), ny);
        break;
      }
      case Op::relu: {
        if (at(n.in[0]).needs_grad)
          k.relu_grad_acc(gy, at(n.in[0]).value.data.data(),
                          grad_buffer(n.in[0]).data.data(), ny);
        break;
      }
      case Op::sigmoid: {
        if (at(n.in[0]).needs_grad)
          k.sigmoid_grad_acc(gy, n.value.data.data(),
                             grad_buffer(n.in[0]).data.data(), ny);
        break;
      }
      case Op::affine: {
        if (at(n.in[0]).needs_grad)
          k.axpy(n.a, gy, grad_buffer(n.in[0]).data.data(), ny);
        break;
      }
      case Op::div: {
        Node& a = at(n.in[0]);
        Node& b = at(n.in[1]);
        if (a.needs_grad) {
          Tensor& da = grad_buffer(n.in[0]);
          for (std::size_t i = 0; i < ny; ++i) da.data[i] += gy[i] / b.value.data[i];
        }
        if (b.needs_grad) {
          Tensor& db = grad_buffer(n.in[1]);
          for (std::size_t i = 0; i < ny; ++i)
            db.data[i] -= gy[i] * n.value.data[i] / b.value.data[i];
        }
        break;
      }
      case Op::sum: {
        if (at(n.in[0]).needs_grad) {
          Tensor& dx = grad_buffer(n.in[0]);
          const double g = gy[0];
          for (double& v : dx.data) v += g;
        }
        break;
      }
      case Op::mean:
        break;  // emitted as sum+affine
      case Op::down2: {
        if (at(n.in[0]).needs_grad) {
          Tensor& dx = grad_buffer(n.in[0]);
          const Tensor& yv = n.grad_buf;
          for (int c = 0; c < yv.dim(0); ++c)
            for (int y = 0; y < yv.dim(1); ++y)
              for (int xx = 0; xx < yv.dim(2); ++xx)
                dx.at3(c, 2 * y, 2 * xx) += yv.at3(c, y, xx);
        }
        break;
      }
      case Op::up2: {
        if (at(n.in[0]).needs_grad) {
          Tensor& dx = grad_buffer(n.in[0]);
          const Tensor& yv = n.grad_buf;
          for (int c = 0; c < yv.dim(0); ++c)
            for (int y = 0; y < yv.dim(1); ++y)
              for (int xx = 0; xx < yv.dim(2); ++xx)
                dx.at3(c, y / 2, xx / 2) += yv.at3(c, y, xx);
        }
        break;
      }
      case Op::window: {
        if (at(n.in[0]).needs_grad) {
          Tensor& dx = grad_buffer(n.in[0]);
          const Tensor& yv = n.grad_buf;
          for (int c = 0; c < yv.dim(0); ++c)
            for (int y = 0; y < yv.dim(1); ++y)
              for (int xx = 0; xx < yv.dim(2); ++xx)
                dx.at3(c, n.win.min_row + y, n.win.min_col + xx) += yv.at3(c, y, xx);
        }
        break;
      }
      case Op::embed: {
        if (at(n.in[0]).needs_grad) {
          Tensor& dx = grad_buffer(n.in[0]);
          const Tensor& yv = n.grad_buf;
          for (int c = 0; c < dx.dim(0); ++c)
            for (int y = 0; y < dx.dim(1); ++y)
              for (int xx = 0; xx < dx.dim(2); ++xx)
                dx.at3(c, y, xx) += yv.at3(c, n.win.min_row + y, n.win.min_col + xx);
        }
        break;
      }
    }
  }
}

void sgd_step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
              OptimizerState& state) {
  require(params.size() == grads.size(), "sgd_step: params/grads size mismatch");
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (const Tensor* p : params) state.velocity.push_back(Tensor::zeros(p->shape));
  }
  require(state.velocity.size() == params.size(),
          "sgd_step: optimizer state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& v = state.velocity[i];
    require(p.same_shape(v), "sgd_step: velocity shape mismatch");
    require(p.same_shape(g), "sgd_step: gradient shape mismatch");
    if (!g.all_finite()) {
      ++state.rejected_steps;
      continue;
    }
    kernels::ops().sgd_update(state.learning_rate, state.momentum, p.data.data(),
                              v.data.data(), g.data.data(), p.data.size());
  }
}

GradCheckResult check_gradients(const std::function<double()>& loss_fn,
                                std::vector<Tensor*>& params,
                                const std::vector<Tensor>& analytic, double step,
                                int max_coords_per_tensor) {
  require(step > 0.0, "check_gradients: step must be positive");
  require(params.size() == analytic.size(),
          "check_gradients: params/analytic size mismatch");
  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    require(p.all_finite(), "check_gradients: parameters must be finite");
    const Tensor& g = analytic[pi];
    require(p.same_shape(g), "check_gradients: analytic gradient shape mismatch");
    const int n = p.numel();
    int stride = 1;
    if (max_coords_per_tensor > 0 && n > max_coords_per_tensor)
      stride = (n + max_coords_per_tensor - 1) / max_coords_per_tensor;
    for (int i = 0; i < n; i += stride) {
      const double saved = p.data[static_cast<std::size_t>(i)];
      p.data[static_cast<std::size_t>(i)] = saved + step;
      const double lp = loss_fn();
      p.data[static_cast<std::size_t>(i)] = saved - step;
      const double lm = loss_fn();
      p.data[static_cast<std::size_t>(i)] = saved;
      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        ++res.coords_skipped;
        continue;
      }
      const double fd = (lp - lm) / (2.0 * step);
      const double rel = std::abs(g.data[static_cast<std::size_t>(i)] - fd) /
                         std::max(1e-8, std::abs(fd));
      ++res.coords_checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = static_cast<int>(pi);
        res.worst_index = i;
      }
    }
  }
  return res;
}

}  // namespace rstn::tc
