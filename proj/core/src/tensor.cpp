#include "acal/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

namespace acal {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::vector<double>* GradSink::buffer(const Node* node, std::size_t size) {
  if (!node) return nullptr;
  auto [it, inserted] = buffers_.try_emplace(node);
  if (inserted) it->second.assign(size, 0.0);
  return &it->second;
}

const std::vector<double>* GradSink::find(const Node* node) const {
  auto it = buffers_.find(node);
  return it == buffers_.end() ? nullptr : &it->second;
}

Tensor make_tensor(Shape shape, std::shared_ptr<const std::vector<double>> data,
                   NodePtr node) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  t.node_ = std::move(node);
  return t;
}

const NodePtr& node_of(const Tensor& t) { return t.node_; }

const std::shared_ptr<const std::vector<double>>& data_of(const Tensor& t) {
  return t.data_;
}

}  // namespace detail

namespace kink_trace {

namespace {
thread_local bool t_enabled = false;
thread_local std::uint64_t t_trace = 0xcbf29ce484222325ull;
}  // namespace

void set_enabled(bool on) { t_enabled = on; }
bool enabled() { return t_enabled; }
void reset() { t_trace = 0xcbf29ce484222325ull; }
std::uint64_t value() { return t_trace; }

namespace {
inline void fold(std::uint64_t v) {
  t_trace = (t_trace ^ v) * 0x100000001b3ull;
}
}  // namespace

}  // namespace kink_trace

namespace {

using detail::GradSink;
using detail::Node;
using detail::NodePtr;

std::atomic<std::uint64_t> g_next_node_id{1};

NodePtr new_node(Shape shape, bool param_leaf, std::vector<NodePtr> parents,
                 std::function<void(std::span<const double>, GradSink&)> backprop) {
  auto n = std::make_shared<Node>();
  n->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  n->shape = std::move(shape);
  n->param_leaf = param_leaf;
  n->parents = std::move(parents);
  n->backprop = std::move(backprop);
  return n;
}

std::shared_ptr<const std::vector<double>> share(std::vector<double> v) {
  return std::make_shared<const std::vector<double>>(std::move(v));
}

void check_shape_values(const Shape& shape, const std::vector<double>& values) {
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_size(shape) != values.size()) {
    throw ShapeError("length mismatch: shape " + shape_str(shape) + " wants " +
                     std::to_string(shape_size(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw ValueError("tensor values must be finite");
  }
}

std::vector<NodePtr> parent_nodes(std::initializer_list<const Tensor*> inputs) {
  std::vector<NodePtr> ps;
  for (const Tensor* t : inputs) {
    const NodePtr& n = detail::node_of(*t);
    if (n) ps.push_back(n);
  }
  return ps;
}

bool any_tracked(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t->tracked()) return true;
  }
  return false;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor operand");
}

// Adds src into the sink buffer of `node` (no-op when node is null).
void accumulate(GradSink& sink, const NodePtr& node, std::size_t size,
                const std::function<void(double*)>& fill) {
  std::vector<double>* buf = sink.buffer(node.get(), size);
  if (buf) fill(buf->data());
}

}  // namespace

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  check_shape_values(shape, values);
  return detail::make_tensor(std::move(shape), share(std::move(values)), nullptr);
}

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> v(shape_size(shape), value);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor Tensor::zeros(Shape shape) { return Tensor::full(std::move(shape), 0.0); }

Tensor Tensor::scalar(double value) { return Tensor::from({}, {value}); }

Tensor Tensor::param(Shape shape, std::vector<double> values) {
  check_shape_values(shape, values);
  NodePtr node = new_node(shape, /*param_leaf=*/true, {}, nullptr);
  return detail::make_tensor(std::move(shape), share(std::move(values)), std::move(node));
}

std::span<const double> Tensor::values() const {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

double Tensor::at(std::size_t i) const {
  if (!data_ || i >= data_->size()) {
    throw IndexError("tensor element index " + std::to_string(i) + " out of range");
  }
  return (*data_)[i];
}

double Tensor::item() const {
  if (size() != 1) {
    throw ContractError("item(): tensor has " + std::to_string(size()) +
                        " elements, expected 1");
  }
  return (*data_)[0];
}

bool Tensor::requires_grad() const { return node_ && node_->param_leaf; }

std::uint64_t Tensor::node_id() const { return node_ ? node_->id : 0; }

Tensor Tensor::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

Tensor Tensor::with_grad() const {
  require_defined(*this, "with_grad");
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  t.node_ = new_node(shape_, /*param_leaf=*/true, {}, nullptr);
  return t;
}

bool GradientMap::contains(const Tensor& param) const {
  return param.requires_grad() && entries_.count(param.node_id()) > 0;
}

const Tensor& GradientMap::at(const Tensor& param) const {
  if (!param.requires_grad()) {
    throw ContractError("GradientMap: tensor does not require gradients");
  }
  auto it = entries_.find(param.node_id());
  if (it == entries_.end()) {
    throw ContractError("GradientMap: no entry for parameter node " +
                        std::to_string(param.node_id()));
  }
  return it->second;
}

std::optional<Tensor> GradientMap::find(const Tensor& param) const {
  if (!contains(param)) return std::nullopt;
  return entries_.at(param.node_id());
}

void GradientMap::insert(std::uint64_t id, Tensor grad) {
  entries_.insert_or_assign(id, std::move(grad));
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace {

Tensor unary_op(const Tensor& a, const char* name,
                const std::function<double(double)>& f,
                // builds the backward closure given the output data
                const std::function<std::function<void(std::span<const double>, GradSink&)>(
                    std::shared_ptr<const std::vector<double>> out)>& make_back) {
  require_defined(a, name);
  std::vector<double> out(a.size());
  auto in = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  auto out_data = share(std::move(out));
  NodePtr node;
  if (a.tracked()) {
    node = new_node(a.shape(), false, parent_nodes({&a}), make_back(out_data));
  }
  return detail::make_tensor(a.shape(), out_data, node);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  NodePtr node;
  if (any_tracked({&a, &b})) {
    NodePtr na = detail::node_of(a), nb = detail::node_of(b);
    std::size_t n = a.size();
    node = new_node(a.shape(), false, parent_nodes({&a, &b}),
                    [na, nb, n](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, na, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
                      });
                      accumulate(sink, nb, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
                      });
                    });
  }
  return detail::make_tensor(a.shape(), share(std::move(out)), node);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  if (a.shape() != b.shape()) {
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  NodePtr node;
  if (any_tracked({&a, &b})) {
    NodePtr na = detail::node_of(a), nb = detail::node_of(b);
    std::size_t n = a.size();
    node = new_node(a.shape(), false, parent_nodes({&a, &b}),
                    [na, nb, n](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, na, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
                      });
                      accumulate(sink, nb, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) d[i] -= g[i];
                      });
                    });
  }
  return detail::make_tensor(a.shape(), share(std::move(out)), node);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  NodePtr node;
  if (any_tracked({&a, &b})) {
    NodePtr na = detail::node_of(a), nb = detail::node_of(b);
    auto da = a.detach(), db = b.detach();
    std::size_t n = a.size();
    node = new_node(a.shape(), false, parent_nodes({&a, &b}),
                    [na, nb, da, db, n](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, na, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * db.values()[i];
                      });
                      accumulate(sink, nb, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * da.values()[i];
                      });
                    });
  }
  return detail::make_tensor(a.shape(), share(std::move(out)), node);
}

Tensor neg(const Tensor& a) {
  return unary_op(a, "neg", [](double x) { return -x; },
                  [&a](auto) -> std::function<void(std::span<const double>, GradSink&)> {
                    NodePtr na = detail::node_of(a);
                    std::size_t n = a.size();
                    return [na, n](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, na, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) d[i] -= g[i];
                      });
                    };
                  });
}

Tensor relu(const Tensor& a) {
  if (kink_trace::enabled()) {
    for (double x : a.values()) kink_trace::fold(x > 0.0 ? 1 : 0);
  }
  // subgradient at 0 is 0
  return unary_op(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                  [&a](auto) -> std::function<void(std::span<const double>, GradSink&)> {
                    NodePtr na = detail::node_of(a);
                    auto in = a.detach();
                    std::size_t n = a.size();
                    return [na, in, n](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, na, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) {
                          if (in.values()[i] > 0.0) d[i] += g[i];
                        }
                      });
                    };
                  });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a, "sigmoid",
                  [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                  [&a](std::shared_ptr<const std::vector<double>> out)
                      -> std::function<void(std::span<const double>, GradSink&)> {
                    NodePtr na = detail::node_of(a);
                    std::size_t n = a.size();
                    return [na, out, n](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, na, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) {
                          const double y = (*out)[i];
                          d[i] += g[i] * y * (1.0 - y);
                        }
                      });
                    };
                  });
}

Tensor tanh(const Tensor& a) {
  return unary_op(a, "tanh", [](double x) { return std::tanh(x); },
                  [&a](std::shared_ptr<const std::vector<double>> out)
                      -> std::function<void(std::span<const double>, GradSink&)> {
                    NodePtr na = detail::node_of(a);
                    std::size_t n = a.size();
                    return [na, out, n](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, na, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) {
                          const double y = (*out)[i];
                          d[i] += g[i] * (1.0 - y * y);
                        }
                      });
                    };
                  });
}

Tensor log(const Tensor& a) {
  require_defined(a, "log");
  for (double v : a.values()) {
    if (!(v > 0.0)) {
      throw ValueError("log: input must be strictly positive, got " + std::to_string(v));
    }
  }
  return unary_op(a, "log", [](double x) { return std::log(x); },
                  [&a](auto) -> std::function<void(std::span<const double>, GradSink&)> {
                    NodePtr na = detail::node_of(a);
                    auto in = a.detach();
                    std::size_t n = a.size();
                    return [na, in, n](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, na, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) d[i] += g[i] / in.values()[i];
                      });
                    };
                  });
}

Tensor elementwise(ElemKind kind, const Tensor& a, const Tensor* b) {
  const bool binary = kind == ElemKind::add || kind == ElemKind::sub || kind == ElemKind::mul;
  if (binary && b == nullptr) {
    throw ContractError("elementwise: binary kind requires a second operand");
  }
  if (!binary && b != nullptr) {
    throw ContractError("elementwise: unary kind takes a single operand");
  }
  switch (kind) {
    case ElemKind::add: return add(a, *b);
    case ElemKind::sub: return sub(a, *b);
    case ElemKind::mul: return mul(a, *b);
    case ElemKind::neg: return neg(a);
    case ElemKind::relu: return relu(a);
    case ElemKind::sigmoid: return sigmoid(a);
    case ElemKind::tanh: return tanh(a);
    case ElemKind::log: return log(a);
  }
  throw ContractError("elementwise: unknown kind");
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw ShapeError("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  {
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    for (std::size_t i = 0; i < m; ++i) {
      double* po = out.data() + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = pa[i * k + p];
        const double* pbr = pb + p * n;
        for (std::size_t j = 0; j < n; ++j) po[j] += av * pbr[j];
      }
    }
  }
  NodePtr node;
  if (any_tracked({&a, &b})) {
    NodePtr na = detail::node_of(a), nb = detail::node_of(b);
    auto da = a.detach(), db = b.detach();
    node = new_node({m, n}, false, parent_nodes({&a, &b}),
                    [na, nb, da, db, m, k, n](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, na, m * k, [&](double* d) {
                        // dA = G * B^T
                        const double* pb = db.values().data();
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t p = 0; p < k; ++p) {
                            double acc = 0.0;
                            const double* gr = g.data() + i * n;
                            const double* br = pb + p * n;
                            for (std::size_t j = 0; j < n; ++j) acc += gr[j] * br[j];
                            d[i * k + p] += acc;
                          }
                      });
                      accumulate(sink, nb, k * n, [&](double* d) {
                        // dB = A^T * G
                        const double* pa = da.values().data();
                        for (std::size_t i = 0; i < m; ++i) {
                          const double* gr = g.data() + i * n;
                          for (std::size_t p = 0; p < k; ++p) {
                            const double av = pa[i * k + p];
                            double* dr = d + p * n;
                            for (std::size_t j = 0; j < n; ++j) dr[j] += av * gr[j];
                          }
                        }
                      });
                    });
  }
  return detail::make_tensor({m, n}, share(std::move(out)), node);
}

// ---------------------------------------------------------------------------
// Convolution and spatial ops
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  bool batched;
  std::size_t B, C, H, W;      // input
  std::size_t OC, KH, KW;      // kernel
  std::size_t OH, OW;          // output
  std::size_t stride, pad;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, std::size_t stride,
                   std::size_t padding) {
  if (input.rank() != 3 && input.rank() != 4) {
    throw ShapeError("conv2d: input must be [C,H,W] or [B,C,H,W], got " +
                     shape_str(input.shape()));
  }
  if (kernel.rank() != 4) {
    throw ShapeError("conv2d: kernel must be [C_out,C_in,kh,kw], got " +
                     shape_str(kernel.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvDims d{};
  d.batched = input.rank() == 4;
  d.B = d.batched ? input.shape()[0] : 1;
  d.C = input.shape()[d.batched ? 1 : 0];
  d.H = input.shape()[d.batched ? 2 : 1];
  d.W = input.shape()[d.batched ? 3 : 2];
  d.OC = kernel.shape()[0];
  d.KH = kernel.shape()[2];
  d.KW = kernel.shape()[3];
  d.stride = stride;
  d.pad = padding;
  if (kernel.shape()[1] != d.C) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.shape()[1]) +
                     " input channels, input has " + std::to_string(d.C));
  }
  if (d.H + 2 * padding < d.KH || d.W + 2 * padding < d.KW) {
    throw ShapeError("conv2d: kernel " + std::to_string(d.KH) + "x" + std::to_string(d.KW) +
                     " larger than padded input " + std::to_string(d.H + 2 * padding) + "x" +
                     std::to_string(d.W + 2 * padding));
  }
  d.OH = (d.H + 2 * padding - d.KH) / stride + 1;
  d.OW = (d.W + 2 * padding - d.KW) / stride + 1;
  return d;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride,
              std::size_t padding) {
  require_defined(input, "conv2d");
  require_defined(kernel, "conv2d");
  const ConvDims d = conv_dims(input, kernel, stride, padding);

  std::vector<double> out(d.B * d.OC * d.OH * d.OW, 0.0);
  const double* in = input.values().data();
  const double* ker = kernel.values().data();
  for (std::size_t b = 0; b < d.B; ++b) {
    const double* in_b = in + b * d.C * d.H * d.W;
    double* out_b = out.data() + b * d.OC * d.OH * d.OW;
    for (std::size_t oc = 0; oc < d.OC; ++oc) {
      double* out_c = out_b + oc * d.OH * d.OW;
      for (std::size_t ic = 0; ic < d.C; ++ic) {
        const double* in_c = in_b + ic * d.H * d.W;
        const double* k_c = ker + (oc * d.C + ic) * d.KH * d.KW;
        for (std::size_t oh = 0; oh < d.OH; ++oh) {
          const std::ptrdiff_t ih0 =
              static_cast<std::ptrdiff_t>(oh * d.stride) - static_cast<std::ptrdiff_t>(d.pad);
          for (std::size_t kh = 0; kh < d.KH; ++kh) {
            const std::ptrdiff_t ih = ih0 + static_cast<std::ptrdiff_t>(kh);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.H)) continue;
            const double* in_row = in_c + ih * d.W;
            const double* k_row = k_c + kh * d.KW;
            double* out_row = out_c + oh * d.OW;
            for (std::size_t ow = 0; ow < d.OW; ++ow) {
              const std::ptrdiff_t iw0 = static_cast<std::ptrdiff_t>(ow * d.stride) -
                                         static_cast<std::ptrdiff_t>(d.pad);
              double acc = 0.0;
              for (std::size_t kw = 0; kw < d.KW; ++kw) {
                const std::ptrdiff_t iw = iw0 + static_cast<std::ptrdiff_t>(kw);
                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.W)) continue;
                acc += in_row[iw] * k_row[kw];
              }
              out_row[ow] += acc;
            }
          }
        }
      }
    }
  }

  Shape out_shape = d.batched ? Shape{d.B, d.OC, d.OH, d.OW} : Shape{d.OC, d.OH, d.OW};
  NodePtr node;
  if (any_tracked({&input, &kernel})) {
    NodePtr ni = detail::node_of(input), nk = detail::node_of(kernel);
    auto din = input.detach(), dker = kernel.detach();
    node = new_node(out_shape, false, parent_nodes({&input, &kernel}),
                    [ni, nk, din, dker, d](std::span<const double> g, GradSink& sink) {
                      const double* in = din.values().data();
                      const double* ker = dker.values().data();
                      std::vector<double>* gin = sink.buffer(ni.get(), din.size());
                      std::vector<double>* gker = sink.buffer(nk.get(), dker.size());
                      for (std::size_t b = 0; b < d.B; ++b) {
                        const double* in_b = in + b * d.C * d.H * d.W;
                        const double* g_b = g.data() + b * d.OC * d.OH * d.OW;
                        double* gin_b = gin ? gin->data() + b * d.C * d.H * d.W : nullptr;
                        for (std::size_t oc = 0; oc < d.OC; ++oc) {
                          const double* g_c = g_b + oc * d.OH * d.OW;
                          for (std::size_t ic = 0; ic < d.C; ++ic) {
                            const double* in_c = in_b + ic * d.H * d.W;
                            const std::size_t koff = (oc * d.C + ic) * d.KH * d.KW;
                            double* gin_c = gin_b ? gin_b + ic * d.H * d.W : nullptr;
                            for (std::size_t oh = 0; oh < d.OH; ++oh) {
                              const std::ptrdiff_t ih0 =
                                  static_cast<std::ptrdiff_t>(oh * d.stride) -
                                  static_cast<std::ptrdiff_t>(d.pad);
                              for (std::size_t ow = 0; ow < d.OW; ++ow) {
                                const double gv = g_c[oh * d.OW + ow];
                                if (gv == 0.0) continue;
                                const std::ptrdiff_t iw0 =
                                    static_cast<std::ptrdiff_t>(ow * d.stride) -
                                    static_cast<std::ptrdiff_t>(d.pad);
                                for (std::size_t kh = 0; kh < d.KH; ++kh) {
                                  const std::ptrdiff_t ih = ih0 + static_cast<std::ptrdiff_t>(kh);
                                  if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.H)) continue;
                                  for (std::size_t kw = 0; kw < d.KW; ++kw) {
                                    const std::ptrdiff_t iw =
                                        iw0 + static_cast<std::ptrdiff_t>(kw);
                                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.W)) continue;
                                    const std::size_t ii = static_cast<std::size_t>(ih) * d.W +
                                                           static_cast<std::size_t>(iw);
                                    const std::size_t ki = koff + kh * d.KW + kw;
                                    if (gin_c) gin_c[ii] += gv * ker[ki];
                                    if (gker) (*gker)[ki] += gv * in_c[ii];
                                  }
                                }
                              }
                            }
                          }
                        }
                      }
                    });
  }
  return detail::make_tensor(std::move(out_shape), share(std::move(out)), node);
}

Tensor bias_add_channels(const Tensor& x, const Tensor& bias) {
  require_defined(x, "bias_add_channels");
  require_defined(bias, "bias_add_channels");
  if (x.rank() != 3 && x.rank() != 4) {
    throw ShapeError("bias_add_channels: input must be [C,H,W] or [B,C,H,W]");
  }
  const bool batched = x.rank() == 4;
  const std::size_t B = batched ? x.shape()[0] : 1;
  const std::size_t C = x.shape()[batched ? 1 : 0];
  const std::size_t HW = x.shape()[batched ? 2 : 1] * x.shape()[batched ? 3 : 2];
  if (bias.rank() != 1 || bias.shape()[0] != C) {
    throw ShapeError("bias_add_channels: bias must be [" + std::to_string(C) + "], got " +
                     shape_str(bias.shape()));
  }
  std::vector<double> out(x.size());
  {
    const double* px = x.values().data();
    const double* pb = bias.values().data();
    std::size_t i = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const double bv = pb[c];
        for (std::size_t s = 0; s < HW; ++s, ++i) out[i] = px[i] + bv;
      }
  }
  NodePtr node;
  if (any_tracked({&x, &bias})) {
    NodePtr nx = detail::node_of(x), nb = detail::node_of(bias);
    std::size_t n = x.size();
    node = new_node(x.shape(), false, parent_nodes({&x, &bias}),
                    [nx, nb, n, B, C, HW](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, nx, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
                      });
                      accumulate(sink, nb, C, [&](double* d) {
                        std::size_t i = 0;
                        for (std::size_t b = 0; b < B; ++b)
                          for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t s = 0; s < HW; ++s, ++i) d[c] += g[i];
                      });
                    });
  }
  return detail::make_tensor(x.shape(), share(std::move(out)), node);
}

Tensor max_pool2d(const Tensor& x, std::size_t window) {
  require_defined(x, "max_pool2d");
  if (window == 0) throw ShapeError("max_pool2d: window must be positive");
  if (x.rank() != 3 && x.rank() != 4) {
    throw ShapeError("max_pool2d: input must be [C,H,W] or [B,C,H,W]");
  }
  const bool batched = x.rank() == 4;
  const std::size_t B = batched ? x.shape()[0] : 1;
  const std::size_t C = x.shape()[batched ? 1 : 0];
  const std::size_t H = x.shape()[batched ? 2 : 1];
  const std::size_t W = x.shape()[batched ? 3 : 2];
  const std::size_t OH = H / window, OW = W / window;
  if (OH == 0 || OW == 0) {
    throw ShapeError("max_pool2d: input " + std::to_string(H) + "x" + std::to_string(W) +
                     " smaller than window " + std::to_string(window));
  }
  std::vector<double> out(B * C * OH * OW);
  // flat input index of each selected maximum; first hit wins on ties
  std::vector<std::size_t> arg(out.size());
  {
    const double* px = x.values().data();
    std::size_t o = 0;
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      const double* plane = px + bc * H * W;
      const std::size_t base = bc * H * W;
      for (std::size_t oh = 0; oh < OH; ++oh)
        for (std::size_t ow = 0; ow < OW; ++ow, ++o) {
          double best = plane[(oh * window) * W + ow * window];
          std::size_t besti = base + (oh * window) * W + ow * window;
          for (std::size_t dy = 0; dy < window; ++dy)
            for (std::size_t dx = 0; dx < window; ++dx) {
              const std::size_t ih = oh * window + dy, iw = ow * window + dx;
              const double v = plane[ih * W + iw];
              if (v > best) {
                best = v;
                besti = base + ih * W + iw;
              }
            }
          out[o] = best;
          arg[o] = besti;
        }
    }
  }
  if (kink_trace::enabled()) {
    for (std::size_t a : arg) kink_trace::fold(a);
  }
  Shape out_shape = batched ? Shape{B, C, OH, OW} : Shape{C, OH, OW};
  NodePtr node;
  if (x.tracked()) {
    NodePtr nx = detail::node_of(x);
    std::size_t n = x.size();
    auto argp = std::make_shared<std::vector<std::size_t>>(std::move(arg));
    node = new_node(out_shape, false, parent_nodes({&x}),
                    [nx, n, argp](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, nx, n, [&](double* d) {
                        for (std::size_t o = 0; o < g.size(); ++o) d[(*argp)[o]] += g[o];
                      });
                    });
  }
  return detail::make_tensor(std::move(out_shape), share(std::move(out)), node);
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  require_defined(x, "upsample_nearest");
  if (factor == 0) throw ShapeError("upsample_nearest: factor must be positive");
  if (x.rank() != 3 && x.rank() != 4) {
    throw ShapeError("upsample_nearest: input must be [C,H,W] or [B,C,H,W]");
  }
  const bool batched = x.rank() == 4;
  const std::size_t B = batched ? x.shape()[0] : 1;
  const std::size_t C = x.shape()[batched ? 1 : 0];
  const std::size_t H = x.shape()[batched ? 2 : 1];
  const std::size_t W = x.shape()[batched ? 3 : 2];
  const std::size_t OH = H * factor, OW = W * factor;
  std::vector<double> out(B * C * OH * OW);
  {
    const double* px = x.values().data();
    std::size_t o = 0;
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      const double* plane = px + bc * H * W;
      for (std::size_t oh = 0; oh < OH; ++oh) {
        const double* row = plane + (oh / factor) * W;
        for (std::size_t ow = 0; ow < OW; ++ow, ++o) out[o] = row[ow / factor];
      }
    }
  }
  Shape out_shape = batched ? Shape{B, C, OH, OW} : Shape{C, OH, OW};
  NodePtr node;
  if (x.tracked()) {
    NodePtr nx = detail::node_of(x);
    std::size_t n = x.size();
    node = new_node(out_shape, false, parent_nodes({&x}),
                    [nx, n, B, C, H, W, factor, OH, OW](std::span<const double> g,
                                                        GradSink& sink) {
                      accumulate(sink, nx, n, [&](double* d) {
                        std::size_t o = 0;
                        for (std::size_t bc = 0; bc < B * C; ++bc) {
                          double* plane = d + bc * H * W;
                          for (std::size_t oh = 0; oh < OH; ++oh) {
                            double* row = plane + (oh / factor) * W;
                            for (std::size_t ow = 0; ow < OW; ++ow, ++o)
                              row[ow / factor] += g[o];
                          }
                        }
                      });
                    });
  }
  return detail::make_tensor(std::move(out_shape), share(std::move(out)), node);
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("reshape: extents must be positive");
  }
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  NodePtr node;
  if (x.tracked()) {
    NodePtr nx = detail::node_of(x);
    std::size_t n = x.size();
    node = new_node(shape, false, parent_nodes({&x}),
                    [nx, n](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, nx, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
                      });
                    });
  }
  return detail::make_tensor(std::move(shape), detail::data_of(x), node);
}

Tensor tile(const Tensor& x, std::size_t repeat) {
  require_defined(x, "tile");
  if (repeat == 0) throw ShapeError("tile: repeat must be positive");
  const std::size_t n = x.size();
  std::vector<double> out(n * repeat);
  for (std::size_t r = 0; r < repeat; ++r) {
    std::copy(x.values().begin(), x.values().end(), out.begin() + r * n);
  }
  Shape out_shape;
  out_shape.push_back(repeat);
  for (std::size_t e : x.shape()) out_shape.push_back(e);
  NodePtr node;
  if (x.tracked()) {
    NodePtr nx = detail::node_of(x);
    node = new_node(out_shape, false, parent_nodes({&x}),
                    [nx, n, repeat](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, nx, n, [&](double* d) {
                        for (std::size_t r = 0; r < repeat; ++r)
                          for (std::size_t i = 0; i < n; ++i) d[i] += g[r * n + i];
                      });
                    });
  }
  return detail::make_tensor(std::move(out_shape), share(std::move(out)), node);
}

Tensor mean_all(const Tensor& x) {
  require_defined(x, "mean_all");
  const std::size_t n = x.size();
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  const double m = acc / static_cast<double>(n);
  NodePtr node;
  if (x.tracked()) {
    NodePtr nx = detail::node_of(x);
    node = new_node({}, false, parent_nodes({&x}),
                    [nx, n](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, nx, n, [&](double* d) {
                        const double gv = g[0] / static_cast<double>(n);
                        for (std::size_t i = 0; i < n; ++i) d[i] += gv;
                      });
                    });
  }
  return detail::make_tensor({}, share({m}), node);
}

Tensor scale(const Tensor& x, double c) {
  require_defined(x, "scale");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * c;
  NodePtr node;
  if (x.tracked()) {
    NodePtr nx = detail::node_of(x);
    std::size_t n = x.size();
    node = new_node(x.shape(), false, parent_nodes({&x}),
                    [nx, n, c](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, nx, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * c;
                      });
                    });
  }
  return detail::make_tensor(x.shape(), share(std::move(out)), node);
}

Tensor clamp(const Tensor& x, double lo, double hi, std::size_t* clamped_count) {
  require_defined(x, "clamp");
  if (!(lo <= hi)) throw ValueError("clamp: lo must not exceed hi");
  std::vector<double> out(x.size());
  std::size_t clamped = 0;
  const bool tracing = kink_trace::enabled();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.values()[i];
    if (v < lo) {
      out[i] = lo;
      ++clamped;
      if (tracing) kink_trace::fold(0);
    } else if (v > hi) {
      out[i] = hi;
      ++clamped;
      if (tracing) kink_trace::fold(2);
    } else {
      out[i] = v;
      if (tracing) kink_trace::fold(1);
    }
  }
  if (clamped_count) *clamped_count += clamped;
  NodePtr node;
  if (x.tracked()) {
    NodePtr nx = detail::node_of(x);
    auto in = x.detach();
    std::size_t n = x.size();
    node = new_node(x.shape(), false, parent_nodes({&x}),
                    [nx, in, n, lo, hi](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, nx, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) {
                          const double v = in.values()[i];
                          if (v > lo && v < hi) d[i] += g[i];
                        }
                      });
                    });
  }
  return detail::make_tensor(x.shape(), share(std::move(out)), node);
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  require_defined(logits, "softmax_cross_entropy");
  if (logits.rank() != 2) {
    throw ShapeError("softmax_cross_entropy: logits must be [B,K], got " +
                     shape_str(logits.shape()));
  }
  const std::size_t B = logits.shape()[0], K = logits.shape()[1];
  if (labels.size() != B) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(B) + " rows but " +
                     std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      throw IndexError("softmax_cross_entropy: label " + std::to_string(y) +
                       " out of range [0," + std::to_string(K) + ")");
    }
  }
  std::vector<double> probs(B * K);
  double loss = 0.0;
  const double* pl = logits.values().data();
  for (std::size_t i = 0; i < B; ++i) {
    const double* row = pl + i * K;
    double mx = row[0];
    for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < K; ++j) denom += std::exp(row[j] - mx);
    const double log_denom = std::log(denom);
    for (std::size_t j = 0; j < K; ++j) probs[i * K + j] = std::exp(row[j] - mx) / denom;
    loss += -(row[static_cast<std::size_t>(labels[i])] - mx - log_denom);
  }
  loss /= static_cast<double>(B);
  NodePtr node;
  if (logits.tracked()) {
    NodePtr nl = detail::node_of(logits);
    auto probs_p = std::make_shared<std::vector<double>>(std::move(probs));
    auto labels_p = std::make_shared<std::vector<int>>(labels);
    node = new_node({}, false, parent_nodes({&logits}),
                    [nl, probs_p, labels_p, B, K](std::span<const double> g, GradSink& sink) {
                      accumulate(sink, nl, B * K, [&](double* d) {
                        const double gv = g[0] / static_cast<double>(B);
                        for (std::size_t i = 0; i < B; ++i) {
                          const std::size_t y = static_cast<std::size_t>((*labels_p)[i]);
                          for (std::size_t j = 0; j < K; ++j) {
                            double p = (*probs_p)[i * K + j];
                            d[i * K + j] += gv * (p - (j == y ? 1.0 : 0.0));
                          }
                        }
                      });
                    });
  }
  return detail::make_tensor({}, share({loss}), node);
}

Tensor l1_distance(const Tensor& a, const Tensor& b) {
  require_defined(a, "l1_distance");
  require_defined(b, "l1_distance");
  if (a.shape() != b.shape()) {
    throw ShapeError("l1_distance: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t n = a.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(a.values()[i] - b.values()[i]);
  const double m = acc / static_cast<double>(n);
  if (kink_trace::enabled()) {
    for (std::size_t i = 0; i < n; ++i) {
      const double diff = a.values()[i] - b.values()[i];
      kink_trace::fold(diff > 0.0 ? 2 : (diff < 0.0 ? 0 : 1));
    }
  }
  NodePtr node;
  if (any_tracked({&a, &b})) {
    NodePtr na = detail::node_of(a), nb = detail::node_of(b);
    auto da = a.detach(), db = b.detach();
    node = new_node({}, false, parent_nodes({&a, &b}),
                    [na, nb, da, db, n](std::span<const double> g, GradSink& sink) {
                      const double gv = g[0] / static_cast<double>(n);
                      // subgradient 0 where a == b
                      accumulate(sink, na, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) {
                          const double diff = da.values()[i] - db.values()[i];
                          if (diff > 0.0) d[i] += gv;
                          else if (diff < 0.0) d[i] -= gv;
                        }
                      });
                      accumulate(sink, nb, n, [&](double* d) {
                        for (std::size_t i = 0; i < n; ++i) {
                          const double diff = da.values()[i] - db.values()[i];
                          if (diff > 0.0) d[i] -= gv;
                          else if (diff < 0.0) d[i] += gv;
                        }
                      });
                    });
  }
  return detail::make_tensor({}, share({m}), node);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

GradientMap backward(const Tensor& loss) {
  if (!loss.tracked()) {
    throw ContractError("backward: loss is not attached to a computation graph");
  }
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_str(loss.shape()));
  }
  const NodePtr& root = detail::node_of(loss);

  // Reachable subgraph, then reverse creation order. Every node's id exceeds
  // its parents' ids, so descending ids form a valid topological order.
  std::vector<const Node*> order;
  {
    std::vector<const Node*> stack{root.get()};
    std::map<const Node*, bool> seen;
    while (!stack.empty()) {
      const Node* n = stack.back();
      stack.pop_back();
      if (seen[n]) continue;
      seen[n] = true;
      order.push_back(n);
      for (const NodePtr& p : n->parents) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](const Node* a, const Node* b) { return a->id > b->id; });
  }

  GradSink sink;
  *sink.buffer(root.get(), 1) = {1.0};
  for (const Node* n : order) {
    if (!n->backprop) continue;
    const std::vector<double>* g = sink.find(n);
    if (!g) continue;
    n->backprop(std::span<const double>(g->data(), g->size()), sink);
  }

  GradientMap gm;
  for (const Node* n : order) {
    if (!n->param_leaf) continue;
    const std::vector<double>* g = sink.find(n);
    if (!g) continue;
    // gradients are computed data; overflow handling is the caller's call
    gm.insert(n->id, detail::make_tensor(n->shape, share(*g), nullptr));
  }
  return gm;
}

}  // namespace acal
