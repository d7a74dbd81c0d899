#include "caps/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "gemm.hpp"

namespace caps {

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  bool released = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

}  // namespace detail

using detail::Node;

namespace {

thread_local bool t_grad_enabled = true;

Node& node_of(const Tensor& t) {
  if (!t.defined()) throw ContractError("operation on an undefined tensor");
  return *t.node();
}

void check_extents(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
}

Tensor make_leaf(Shape shape, std::vector<float> data, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

struct AxisSplit {
  std::size_t outer;
  std::size_t extent;
  std::size_t inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  return out;
}

template <typename Fn, typename Deriv>
Tensor unary(const Tensor& x, Fn fn, Deriv deriv) {
  const auto in = x.data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fn(in[i]);
  return make_op_result(x.shape(), std::move(out), {x}, [x, deriv](auto g, auto y) {
    auto gx = grad_sink(x);
    const auto xv = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], y[i]);
  });
}

enum class BinaryKind { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  const std::size_t na = a.size();
  const std::size_t nb = b.size();
  Shape shape;
  if (a.shape() == b.shape()) {
    shape = a.shape();
  } else if (nb == 1) {
    shape = a.shape();
  } else if (na == 1) {
    shape = b.shape();
  } else {
    throw ShapeError(std::string(name) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  const std::size_t n = element_count(shape);
  const std::size_t sa = na == 1 ? 0 : 1;
  const std::size_t sb = nb == 1 ? 0 : 1;
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float x = av[i * sa];
    const float y = bv[i * sb];
    switch (kind) {
      case BinaryKind::kAdd: out[i] = x + y; break;
      case BinaryKind::kSub: out[i] = x - y; break;
      case BinaryKind::kMul: out[i] = x * y; break;
    }
  }
  return make_op_result(std::move(shape), std::move(out), {a, b}, [a, b, kind, sa, sb](auto g, auto) {
    const auto av = a.data();
    const auto bv = b.data();
    if (needs_grad(a)) {
      auto ga = grad_sink(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i * sa] += kind == BinaryKind::kMul ? g[i] * bv[i * sb] : g[i];
      }
    }
    if (needs_grad(b)) {
      auto gb = grad_sink(b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        float d = g[i];
        if (kind == BinaryKind::kSub) d = -d;
        if (kind == BinaryKind::kMul) d = g[i] * av[i * sa];
        gb[i * sb] += d;
      }
    }
  });
}

// Patch matrix for one image: rows (c, ky, kx), columns (oy, ox).
void im2col(const float* image, std::size_t h, std::size_t w, const ConvSpec& spec, std::size_t oh,
            std::size_t ow, float* col) {
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  for (std::size_t c = 0; c < spec.in_channels; ++c) {
    for (std::size_t ky = 0; ky < spec.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < spec.kernel_w; ++kx) {
        float* row = col + ((c * spec.kernel_h + ky) * spec.kernel_w + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) - pad;
          float* dst = row + oy * ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(dst, dst + ow, 0.0f);
            continue;
          }
          const float* src = image + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx) - pad;
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? 0.0f : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const float* col, std::size_t h, std::size_t w, const ConvSpec& spec, std::size_t oh,
            std::size_t ow, float* image) {
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  for (std::size_t c = 0; c < spec.in_channels; ++c) {
    for (std::size_t ky = 0; ky < spec.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < spec.kernel_w; ++kx) {
        const float* row = col + ((c * spec.kernel_h + ky) * spec.kernel_w + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          float* dst = image + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx) - pad;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---- Shape helpers ----------------------------------------------------------

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t ConvSpec::out_extent(std::size_t in, std::size_t kernel) const {
  if (stride == 0) throw ShapeError("conv: stride must be positive");
  const std::size_t padded = in + 2 * padding;
  if (kernel == 0 || padded < kernel) {
    throw ShapeError("conv: kernel " + std::to_string(kernel) + " larger than padded input " +
                     std::to_string(padded));
  }
  return (padded - kernel) / stride + 1;
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) { return constant(shape, 0.0f, requires_grad); }

Tensor Tensor::constant(const Shape& shape, float value, bool requires_grad) {
  check_extents(shape);
  return make_leaf(shape, std::vector<float>(element_count(shape), value), requires_grad);
}

Tensor Tensor::uniform(const Shape& shape, float lo, float hi, Rng& rng, bool requires_grad) {
  check_extents(shape);
  std::vector<float> data(element_count(shape));
  for (auto& v : data) v = rng.uniform(lo, hi);
  return make_leaf(shape, std::move(data), requires_grad);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<float> data, bool requires_grad) {
  check_extents(shape);
  if (data.size() != element_count(shape)) {
    throw ShapeError("from_data: " + std::to_string(data.size()) + " values for shape " + to_string(shape));
  }
  return make_leaf(shape, std::move(data), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) { return make_leaf({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_of(*this).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("dim: axis out of range for " + to_string(s));
  return s[axis];
}

std::size_t Tensor::size() const { return node_of(*this).data.size(); }

std::span<const float> Tensor::data() const { return node_of(*this).data; }

std::span<float> Tensor::mutable_data() { return node_of(*this).data; }

float Tensor::item() const {
  const auto& n = node_of(*this);
  if (n.data.size() != 1) throw ContractError("item() on tensor of shape " + to_string(n.shape));
  return n.data[0];
}

float Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& n = node_of(*this);
  if (index.size() != n.shape.size()) throw ShapeError("at(): index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= n.shape[axis]) throw ShapeError("at(): index out of range");
    flat = flat * n.shape[axis] + i;
    ++axis;
  }
  return n.data[flat];
}

bool Tensor::requires_grad() const { return node_of(*this).requires_grad; }

void Tensor::set_requires_grad(bool on) {
  auto& n = node_of(*this);
  if (n.backward) throw ContractError("set_requires_grad on a non-leaf tensor");
  n.requires_grad = on;
}

bool Tensor::has_grad() const { return !node_of(*this).grad.empty(); }

std::span<const float> Tensor::grad() const {
  const auto& n = node_of(*this);
  if (n.grad.empty()) throw ContractError("tensor has no gradient");
  return n.grad;
}

std::span<float> Tensor::mutable_grad() { return grad_sink(*this); }

void Tensor::zero_grad() {
  auto& n = node_of(*this);
  std::fill(n.grad.begin(), n.grad.end(), 0.0f);
}

Tensor Tensor::detach() const {
  const auto& n = node_of(*this);
  return make_leaf(n.shape, n.data, false);
}

Tensor Tensor::clone() const {
  const auto& n = node_of(*this);
  return make_leaf(n.shape, n.data, n.requires_grad && !n.backward);
}

void Tensor::backward() const {
  auto& root = node_of(*this);
  if (root.data.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + to_string(root.shape));
  }
  if (root.released) throw ContractError("backward() called twice on a released graph");
  if (!root.requires_grad) throw ContractError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  if (root.grad.empty()) root.grad.assign(1, 0.0f);
  root.grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(node->grad, node->data);
  }
  for (Node* node : order) {
    if (node->backward) {
      node->backward = nullptr;
      node->inputs.clear();
      node->released = true;
    }
  }
}

// ---- op plumbing ------------------------------------------------------------

Tensor make_op_result(Shape shape, std::vector<float> data, std::vector<Tensor> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (t_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return needs_grad(t); });
    if (any) {
      node->requires_grad = true;
      node->backward = std::move(backward);
      node->inputs.reserve(inputs.size());
      for (auto& t : inputs) node->inputs.push_back(t.node());
    }
  }
  return Tensor(std::move(node));
}

std::span<float> grad_sink(const Tensor& t) {
  auto& n = node_of(t);
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0f);
  return n.grad;
}

bool needs_grad(const Tensor& t) { return t.defined() && t.node()->requires_grad; }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

// ---- shape ops ----------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape) {
  check_extents(shape);
  if (element_count(shape) != x.size()) {
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape) + " changes element count");
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  return make_op_result(shape, std::move(out), {x}, [x](auto g, auto) {
    auto gx = grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor flatten(const Tensor& x) { return reshape(x, {x.size()}); }

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& in_shape = x.shape();
  const std::size_t rank = in_shape.size();
  if (axes.size() != rank) throw ShapeError("permute: axis list length differs from rank");
  std::vector<bool> seen(rank, false);
  for (auto a : axes) {
    if (a >= rank || seen[a]) throw ShapeError("permute: axes are not a permutation");
    seen[a] = true;
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(rank);
  std::vector<std::size_t> gather_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[axes[i]];
    gather_strides[i] = in_strides[axes[i]];
  }

  // Source offset for each output element, in output order.
  const std::size_t n = x.size();
  auto source = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*source)[i] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        offset += gather_strides[d];
        break;
      }
      offset -= gather_strides[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  const auto in = x.data();
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = in[(*source)[i]];
  return make_op_result(std::move(out_shape), std::move(out), {x}, [x, source](auto g, auto) {
    auto gx = grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*source)[i]] += g[i];
  });
}

// ---- elementwise ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kMul, "mul"); }

Tensor scale(const Tensor& x, float factor) {
  return unary(x, [factor](float v) { return v * factor; }, [factor](float, float) { return factor; });
}

Tensor add_scalar(const Tensor& x, float value) {
  return unary(x, [value](float v) { return v + value; }, [](float, float) { return 1.0f; });
}

Tensor relu(const Tensor& x) {
  // NaN passes through so non-finite values reach the loss checks.
  return unary(x, [](float v) { return v < 0.0f ? 0.0f : v; },
               [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
               [](float, float y) { return y * (1.0f - y); });
}

Tensor square(const Tensor& x) {
  return unary(x, [](float v) { return v * v; }, [](float v, float) { return 2.0f * v; });
}

Tensor max_with(const Tensor& x, float threshold) {
  return unary(x, [threshold](float v) { return v < threshold ? threshold : v; },
               [threshold](float v, float) { return v > threshold ? 1.0f : 0.0f; });
}

// ---- reductions ----------------------------------------------------------------

Tensor sum(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis, "sum");
  const auto in = x.data();
  std::vector<float> out(s.outer * s.inner, 0.0f);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < s.extent; ++k) {
      const float* src = in.data() + (o * s.extent + k) * s.inner;
      float* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  return make_op_result(drop_axis(x.shape(), axis), std::move(out), {x}, [x, s](auto g, auto) {
    auto gx = grad_sink(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t k = 0; k < s.extent; ++k) {
        float* dst = gx.data() + (o * s.extent + k) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += g[o * s.inner + i];
      }
    }
  });
}

Tensor mean(const Tensor& x, std::size_t axis) {
  const auto extent = split_axis(x.shape(), axis, "mean").extent;
  return scale(sum(x, axis), 1.0f / static_cast<float>(extent));
}

Tensor sum_all(const Tensor& x) {
  double total = 0.0;
  for (float v : x.data()) total += v;
  return make_op_result({}, {static_cast<float>(total)}, {x}, [x](auto g, auto) {
    auto gx = grad_sink(x);
    for (auto& v : gx) v += g[0];
  });
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0f / static_cast<float>(x.size())); }

Tensor l2_norm(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis, "l2_norm");
  const auto in = x.data();
  std::vector<float> out(s.outer * s.inner, 0.0f);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      float acc = 0.0f;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const float v = in[(o * s.extent + k) * s.inner + i];
        acc += v * v;
      }
      out[o * s.inner + i] = std::sqrt(acc);
    }
  }
  return make_op_result(drop_axis(x.shape(), axis), std::move(out), {x}, [x, s](auto g, auto y) {
    auto gx = grad_sink(x);
    const auto in = x.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const float norm = y[o * s.inner + i];
        if (norm == 0.0f) continue;
        const float f = g[o * s.inner + i] / norm;
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t idx = (o * s.extent + k) * s.inner + i;
          gx[idx] += f * in[idx];
        }
      }
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis, "softmax");
  const auto in = x.data();
  std::vector<float> out(in.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      float top = in[base];
      for (std::size_t k = 1; k < s.extent; ++k) top = std::max(top, in[base + k * s.inner]);
      float total = 0.0f;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const float e = std::exp(in[base + k * s.inner] - top);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= total;
    }
  }
  return make_op_result(x.shape(), std::move(out), {x}, [x, s](auto g, auto y) {
    auto gx = grad_sink(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        float dot = 0.0f;
        for (std::size_t k = 0; k < s.extent; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t idx = base + k * s.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis, "log_softmax");
  const auto in = x.data();
  std::vector<float> out(in.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      float top = in[base];
      for (std::size_t k = 1; k < s.extent; ++k) top = std::max(top, in[base + k * s.inner]);
      float total = 0.0f;
      for (std::size_t k = 0; k < s.extent; ++k) total += std::exp(in[base + k * s.inner] - top);
      const float log_total = top + std::log(total);
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] = in[base + k * s.inner] - log_total;
    }
  }
  return make_op_result(x.shape(), std::move(out), {x}, [x, s](auto g, auto y) {
    auto gx = grad_sink(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        float gsum = 0.0f;
        for (std::size_t k = 0; k < s.extent; ++k) gsum += g[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t idx = base + k * s.inner;
          gx[idx] += g[idx] - std::exp(y[idx]) * gsum;
        }
      }
    }
  });
}

// ---- linear algebra ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool batched = sa.size() == 3;
  if (!((sa.size() == 2 && sb.size() == 2) || (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0]))) {
    throw ShapeError("matmul: unsupported operand shapes " + to_string(sa) + " x " + to_string(sb));
  }
  const std::size_t batch = batched ? sa[0] : 1;
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa[sa.size() - 1];
  const std::size_t n = sb[sb.size() - 1];
  if (sb[sb.size() - 2] != k) {
    throw ShapeError("matmul: inner extents differ " + to_string(sa) + " x " + to_string(sb));
  }
  std::vector<float> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(false, false, m, n, k, a.data().data() + i * m * k, b.data().data() + i * k * n,
                 out.data() + i * m * n, false);
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return make_op_result(std::move(shape), std::move(out), {a, b}, [a, b, batch, m, n, k](auto g, auto) {
    for (std::size_t i = 0; i < batch; ++i) {
      const float* gi = g.data() + i * m * n;
      if (needs_grad(a)) {
        detail::gemm(false, true, m, k, n, gi, b.data().data() + i * k * n, grad_sink(a).data() + i * m * k, true);
      }
      if (needs_grad(b)) {
        detail::gemm(true, false, k, n, m, a.data().data() + i * m * k, gi, grad_sink(b).data() + i * k * n, true);
      }
    }
  });
}

Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, const ConvSpec& spec) {
  const Shape& s = input.shape();
  if (s.size() != 3 && s.size() != 4) throw ShapeError("conv2d: input must be [C,H,W] or [B,C,H,W]");
  const bool batched = s.size() == 4;
  const std::size_t batch = batched ? s[0] : 1;
  const std::size_t c = s[s.size() - 3];
  const std::size_t h = s[s.size() - 2];
  const std::size_t w = s[s.size() - 1];
  if (c != spec.in_channels) {
    throw ShapeError("conv2d: input has " + std::to_string(c) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  const Shape expected_w{spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w};
  if (weights.shape() != expected_w) {
    throw ShapeError("conv2d: weights " + to_string(weights.shape()) + " do not match spec " + to_string(expected_w));
  }
  if (bias.shape() != Shape{spec.out_channels}) throw ShapeError("conv2d: bias must be [C_out]");
  const std::size_t oh = spec.out_height(h);
  const std::size_t ow = spec.out_width(w);

  const std::size_t patch = c * spec.kernel_h * spec.kernel_w;
  const std::size_t positions = oh * ow;
  const std::size_t co = spec.out_channels;
  std::vector<float> col(patch * positions);
  std::vector<float> out(batch * co * positions);
  const float* x = input.data().data();
  const float* wt = weights.data().data();
  const auto bv = bias.data();
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(x + b * c * h * w, h, w, spec, oh, ow, col.data());
    float* y = out.data() + b * co * positions;
    for (std::size_t o = 0; o < co; ++o) std::fill(y + o * positions, y + (o + 1) * positions, bv[o]);
    detail::gemm(false, false, co, positions, patch, wt, col.data(), y, true);
  }

  Shape shape = batched ? Shape{batch, co, oh, ow} : Shape{co, oh, ow};
  return make_op_result(std::move(shape), std::move(out), {input, weights, bias},
                        [input, weights, bias, spec, batch, c, h, w, oh, ow](auto g, auto) {
    const std::size_t patch = c * spec.kernel_h * spec.kernel_w;
    const std::size_t positions = oh * ow;
    const std::size_t co = spec.out_channels;
    const bool want_x = needs_grad(input);
    const bool want_w = needs_grad(weights);
    std::vector<float> col(patch * positions);
    const float* x = input.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
      const float* gy = g.data() + b * co * positions;
      if (needs_grad(bias)) {
        auto gb = grad_sink(bias);
        for (std::size_t o = 0; o < co; ++o) {
          float acc = 0.0f;
          for (std::size_t p = 0; p < positions; ++p) acc += gy[o * positions + p];
          gb[o] += acc;
        }
      }
      if (want_w) {
        im2col(x + b * c * h * w, h, w, spec, oh, ow, col.data());
        detail::gemm(false, true, co, patch, positions, gy, col.data(), grad_sink(weights).data(), true);
      }
      if (want_x) {
        detail::gemm(true, false, patch, positions, co, weights.data().data(), gy, col.data(), false);
        col2im(col.data(), h, w, spec, oh, ow, grad_sink(input).data() + b * c * h * w);
      }
    }
  });
}

}  // namespace caps
