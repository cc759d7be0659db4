#include "blockflow/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace blockflow {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const MatR>;
using MMap = Eigen::Map<MatR>;

std::atomic<std::uint64_t> next_id{1};

#if defined(__GLIBC__)
// Activations are a few hundred KB each and churn every step. glibc would
// serve them with fresh mmaps and page-fault them in every time.
[[maybe_unused]] const bool malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif
thread_local bool grad_mode = true;

NodePtr make_node(Shape shape, std::vector<double> values) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->id = next_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

// Wraps a freshly computed value; records history when any input needs it.
Tensor finish(Shape shape, std::vector<double> values, std::initializer_list<const Tensor*> inputs,
              std::function<void(Node&)> bw) {
  auto n = make_node(std::move(shape), std::move(values));
  if (grad_mode) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const Tensor* t : inputs) n->parents.push_back(t->node());
      n->backward = std::move(bw);
    }
  }
  return Tensor(std::move(n));
}

Tensor finish_many(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> bw) {
  auto n = make_node(std::move(shape), std::move(values));
  if (grad_mode) {
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      n->requires_grad = true;
      for (const Tensor& t : inputs) n->parents.push_back(t.node());
      n->backward = std::move(bw);
    }
  }
  return Tensor(std::move(n));
}

void require(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Flat index into `in` for every flat index of `out` (in broadcasts to out).
std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  std::size_t r = out.size();
  std::vector<std::size_t> in_stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    std::size_t ax = in.size() - 1 - i;
    std::size_t oax = r - 1 - i;
    in_stride[oax] = in[ax] == 1 ? 0 : s;
    s *= in[ax];
  }
  std::size_t total = shape_numel(out);
  std::vector<std::size_t> idx(total);
  std::vector<std::size_t> counter(r, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    idx[flat] = off;
    for (std::size_t ax = r; ax-- > 0;) {
      ++counter[ax];
      off += in_stride[ax];
      if (counter[ax] < out[ax]) break;
      off -= in_stride[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  return idx;
}

// Two-operand broadcast as a few collapsed axes with per-operand strides
// (0 on broadcast axes). Avoids materializing per-element index tables.
struct Broadcast {
  std::vector<std::size_t> ext, sa, sb;
};

Broadcast make_broadcast(const Shape& a, const Shape& b, const Shape& out) {
  const std::size_t r = out.size();
  auto strides = [&](const Shape& in) {
    std::vector<std::size_t> st(r, 0);
    std::size_t s = 1;
    for (std::size_t i = 0; i < in.size(); ++i) {
      std::size_t ax = in.size() - 1 - i;
      st[r - 1 - i] = in[ax] == 1 ? 0 : s;
      s *= in[ax];
    }
    return st;
  };
  auto ta = strides(a), tb = strides(b);
  Broadcast bc;
  for (std::size_t i = 0; i < r; ++i) {
    if (out[i] == 1) continue;
    if (!bc.ext.empty() && bc.sa.back() == ta[i] * out[i] && bc.sb.back() == tb[i] * out[i]) {
      bc.ext.back() *= out[i];
      bc.sa.back() = ta[i];
      bc.sb.back() = tb[i];
    } else {
      bc.ext.push_back(out[i]);
      bc.sa.push_back(ta[i]);
      bc.sb.push_back(tb[i]);
    }
  }
  return bc;
}

// f(out_index, a_index, b_index) in increasing out_index order.
template <class F>
void broadcast_for(const Broadcast& bc, F&& f) {
  const std::size_t r = bc.ext.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t inner = bc.ext[r - 1], ia_in = bc.sa[r - 1], ib_in = bc.sb[r - 1];
  std::size_t outer = 1;
  for (std::size_t i = 0; i + 1 < r; ++i) outer *= bc.ext[i];
  std::vector<std::size_t> counter(r, 0);
  std::size_t oa = 0, ob = 0, o = 0;
  for (std::size_t q = 0; q < outer; ++q) {
    for (std::size_t j = 0; j < inner; ++j) f(o++, oa + j * ia_in, ob + j * ib_in);
    for (std::size_t ax = r - 1; ax-- > 0;) {
      oa += bc.sa[ax];
      ob += bc.sb[ax];
      if (++counter[ax] < bc.ext[ax]) break;
      oa -= bc.sa[ax] * counter[ax];
      ob -= bc.sb[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
}

template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA da, DB db) {
  require(a, op);
  require(b, op);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto av = a.values();
  auto bv = b.values();
  if (sa == sb) {
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
    return finish(sa, std::move(out), {&a, &b}, [da, db](Node& self) {
      const auto& g = self.grad;
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      if (pa.requires_grad) {
        auto& ga = pa.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(pa.values[i], pb.values[i], self.values[i]);
      }
      if (pb.requires_grad) {
        auto& gb = pb.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(pa.values[i], pb.values[i], self.values[i]);
      }
    });
  }
  Shape so = broadcast_shape(sa, sb, op);
  auto bc = std::make_shared<Broadcast>(make_broadcast(sa, sb, so));
  std::vector<double> out(shape_numel(so));
  broadcast_for(*bc, [&](std::size_t o, std::size_t x, std::size_t y) { out[o] = f(av[x], bv[y]); });
  return finish(so, std::move(out), {&a, &b}, [bc, da, db](Node& self) {
    const auto& g = self.grad;
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      broadcast_for(*bc, [&](std::size_t o, std::size_t x, std::size_t y) {
        ga[x] += g[o] * da(pa.values[x], pb.values[y], self.values[o]);
      });
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      broadcast_for(*bc, [&](std::size_t o, std::size_t x, std::size_t y) {
        gb[y] += g[o] * db(pa.values[x], pb.values[y], self.values[o]);
      });
    }
  });
}

template <class F, class D>
Tensor unary(const Tensor& a, const char* op, F f, D d) {
  require(a, op);
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return finish(a.shape(), std::move(out), {&a}, [d](Node& self) {
    Node& p = *self.parents[0];
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gp[i] += self.grad[i] * d(p.values[i], self.values[i]);
  });
}

// Pure re-indexing: out[i] = in[src[i]].
Tensor gather_flat(const Tensor& a, Shape shape, std::shared_ptr<std::vector<std::size_t>> src) {
  auto av = a.values();
  std::vector<double> out(src->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[(*src)[i]];
  return finish(std::move(shape), std::move(out), {&a}, [src](Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gp[(*src)[i]] += self.grad[i];
  });
}

std::size_t axis_index(int axis, std::size_t rank) {
  int r = static_cast<int>(rank);
  int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(ax);
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  return Tensor(make_node(shape, std::vector<double>(shape_numel(shape), value)));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("Tensor::from: shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("Tensor::from: zero extent in " + shape_str(shape));
  }
  return Tensor(make_node(shape, std::move(values)));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::parameter(const Shape& shape, std::vector<double> values) {
  Tensor t = from(shape, std::move(values));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const {
  require(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::dim(int i) const { return shape()[axis_index(i, rank())]; }
std::size_t Tensor::numel() const { return node_ ? node_->values.size() : 0; }

std::span<const double> Tensor::values() const {
  require(*this, "values");
  return node_->values;
}

std::span<double> Tensor::mutable_values() {
  require(*this, "mutable_values");
  if (node_->backward) throw ContractError("mutable_values on a tensor with recorded history");
  return node_->values;
}

std::span<const double> Tensor::grad() const {
  require(*this, "grad");
  return node_->grad_buffer();
}

std::span<double> Tensor::mutable_grad() {
  require(*this, "grad");
  return node_->grad_buffer();
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->values.size(); }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && !node_->backward; }
std::uint64_t Tensor::id() const { return node_ ? node_->id : 0; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->values[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw DimensionError("at(): rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t ax = 0;
  for (std::size_t i : index) {
    if (i >= s[ax]) throw DimensionError("at(): index out of range for " + shape_str(s));
    flat = flat * s[ax] + i;
    ++ax;
  }
  return node_->values[flat];
}

void Tensor::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  require(*this, "detach");
  return Tensor(make_node(node_->shape, node_->values));
}

// ---------------------------------------------------------------- Tape

Tape Tape::record(const Tensor& loss) {
  require(loss, "Tape::record");
  Tape tape;
  tape.loss_ = loss;
  if (!loss.requires_grad()) return tape;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  Node* root = loss.node().get();
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      tape.order_.push_back(n);
      stack.pop_back();
    }
  }
  return tape;
}

void Tape::backward() {
  if (loss_.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss_.shape()));
  }
  if (order_.empty()) return;
  for (Node* n : order_) {
    if (n->backward) n->grad.assign(n->values.size(), 0.0);
  }
  Node* root = order_.back();
  root->grad_buffer()[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

void backward(const Tensor& loss) {
  require(loss, "backward");
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  Tape::record(loss).backward();
}

bool grad_enabled() { return grad_mode; }
NoGradGuard::NoGradGuard() : previous_(grad_mode) { grad_mode = false; }
NoGradGuard::~NoGradGuard() { grad_mode = previous_; }

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary(a, "mul_scalar", [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor square(const Tensor& a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor exp(const Tensor& a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(a, "sqrt", [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary(
      a, "softplus", [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      });
}

Tensor gelu(const Tensor& a) {
  // tanh approximation
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      a, "gelu", [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        double u = c * (x + k * x * x * x);
        double th = std::tanh(u);
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * k * x * x);
      });
}

Tensor tanh(const Tensor& a) {
  return unary(a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
  require(a, "sum");
  auto av = a.values();
  double s = std::accumulate(av.begin(), av.end(), 0.0);
  return finish({1}, {s}, {&a}, [](Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    double g = self.grad[0];
    for (double& x : gp) x += g;
  });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_lastdim(const Tensor& a) {
  require(a, "sum_lastdim");
  Shape s = a.shape();
  std::size_t n = s.back();
  std::size_t rows = a.numel() / n;
  auto av = a.values();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += av[r * n + j];
    out[r] = acc;
  }
  s.back() = 1;
  return finish(s, std::move(out), {&a}, [n](Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < self.grad.size(); ++r) {
      for (std::size_t j = 0; j < n; ++j) gp[r * n + j] += self.grad[r];
    }
  });
}

Tensor mean_lastdim(const Tensor& a) {
  return mul_scalar(sum_lastdim(a), 1.0 / static_cast<double>(a.dim(-1)));
}

// ---------------------------------------------------------------- shape

Tensor reshape(const Tensor& a, const Shape& shape) {
  require(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return finish(shape, std::move(out), {&a}, [](Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gp[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  require(a, "permute");
  const Shape& s = a.shape();
  std::size_t r = s.size();
  if (axes.size() != r) throw DimensionError("permute: axes size mismatch for " + shape_str(s));
  std::vector<bool> used(r, false);
  for (std::size_t ax : axes) {
    if (ax >= r || used[ax]) throw DimensionError("permute: invalid axes for " + shape_str(s));
    used[ax] = true;
  }
  std::vector<std::size_t> stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) stride[i] = stride[i + 1] * s[i + 1];
  Shape out(r);
  std::vector<std::size_t> ostride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = s[axes[i]];
    ostride[i] = stride[axes[i]];
  }
  auto src = std::make_shared<std::vector<std::size_t>>(a.numel());
  std::vector<std::size_t> counter(r, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < src->size(); ++flat) {
    (*src)[flat] = off;
    for (std::size_t ax = r; ax-- > 0;) {
      ++counter[ax];
      off += ostride[ax];
      if (counter[ax] < out[ax]) break;
      off -= ostride[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  return gather_flat(a, out, src);
}

Tensor transpose_last2(const Tensor& a) {
  std::size_t r = a.rank();
  if (r < 2) throw DimensionError("transpose_last2: rank < 2 for " + shape_str(a.shape()));
  std::vector<std::size_t> axes(r);
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(a, axes);
}

Tensor slice_lastdim(const Tensor& a, std::size_t start, std::size_t length) {
  require(a, "slice_lastdim");
  std::size_t n = a.dim(-1);
  if (length == 0 || start + length > n) {
    throw DimensionError("slice_lastdim: [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") outside " + shape_str(a.shape()));
  }
  std::size_t rows = a.numel() / n;
  auto src = std::make_shared<std::vector<std::size_t>>(rows * length);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < length; ++j) (*src)[r * length + j] = r * n + start + j;
  }
  Shape s = a.shape();
  s.back() = length;
  return gather_flat(a, s, src);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  for (const auto& p : parts) require(p, "concat");
  const Shape& s0 = parts[0].shape();
  std::size_t ax = axis_index(axis, s0.size());
  Shape out = s0;
  out[ax] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw DimensionError("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != s0[i]) {
        throw DimensionError("concat: extent mismatch " + shape_str(s0) + " vs " + shape_str(s));
      }
    }
    out[ax] += s[ax];
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out[i];
  std::size_t inner = 1;
  for (std::size_t i = ax + 1; i < out.size(); ++i) inner *= out[i];
  std::vector<double> values(shape_numel(out));
  std::vector<std::size_t> widths;
  std::size_t row = out[ax] * inner;
  std::size_t col0 = 0;
  for (const auto& p : parts) {
    std::size_t w = p.dim(static_cast<int>(ax)) * inner;
    widths.push_back(w);
    auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  values.begin() + static_cast<std::ptrdiff_t>(o * row + col0));
    }
    col0 += w;
  }
  return finish_many(out, std::move(values), parts, [widths, outer, row](Node& self) {
    std::size_t c0 = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      std::size_t w = widths[k];
      if (p.requires_grad) {
        auto& gp = p.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < w; ++j) gp[o * w + j] += self.grad[o * row + c0 + j];
        }
      }
      c0 += w;
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  require(table, "gather_rows");
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank 2, got " + shape_str(table.shape()));
  std::size_t rows = table.dim(0), cols = table.dim(1);
  auto src = std::make_shared<std::vector<std::size_t>>(indices.size() * cols);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(indices[i]) + " out of range for " +
                           shape_str(table.shape()));
    }
    for (std::size_t j = 0; j < cols; ++j) (*src)[i * cols + j] = indices[i] * cols + j;
  }
  return gather_flat(table, {indices.size(), cols}, src);
}

// ---------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a, "matmul");
  require(b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa.back() != sb[sb.size() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  auto mi = static_cast<Eigen::Index>(m), ki = static_cast<Eigen::Index>(k), ni = static_cast<Eigen::Index>(n);

  if (sb.size() == 2) {
    std::size_t rows = a.numel() / k;
    auto ri = static_cast<Eigen::Index>(rows);
    Shape so = sa;
    so.back() = n;
    std::vector<double> out(rows * n);
    MMap(out.data(), ri, ni).noalias() = CMap(a.values().data(), ri, ki) * CMap(b.values().data(), ki, ni);
    return finish(so, std::move(out), {&a, &b}, [ri, ki, ni](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      CMap g(self.grad.data(), ri, ni);
      if (pa.requires_grad) {
        MMap(pa.grad_buffer().data(), ri, ki).noalias() += g * CMap(pb.values.data(), ki, ni).transpose();
      }
      if (pb.requires_grad) {
        MMap(pb.grad_buffer().data(), ki, ni).noalias() += CMap(pa.values.data(), ri, ki).transpose() * g;
      }
    });
  }

  Shape ba(sa.begin(), sa.end() - 2), bb(sb.begin(), sb.end() - 2);
  Shape bo = broadcast_shape(ba, bb, "matmul");
  auto ia = std::make_shared<std::vector<std::size_t>>(broadcast_index(ba, bo));
  auto ib = std::make_shared<std::vector<std::size_t>>(broadcast_index(bb, bo));
  std::size_t batches = ia->size();
  Shape so = bo;
  so.push_back(m);
  so.push_back(n);
  std::vector<double> out(batches * m * n);
  const double* ap = a.values().data();
  const double* bp = b.values().data();
  for (std::size_t q = 0; q < batches; ++q) {
    MMap(out.data() + q * m * n, mi, ni).noalias() =
        CMap(ap + (*ia)[q] * m * k, mi, ki) * CMap(bp + (*ib)[q] * k * n, ki, ni);
  }
  return finish(so, std::move(out), {&a, &b}, [ia, ib, m, k, n, mi, ki, ni](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t q = 0; q < ia->size(); ++q) {
      CMap g(self.grad.data() + q * m * n, mi, ni);
      if (pa.requires_grad) {
        MMap(pa.grad_buffer().data() + (*ia)[q] * m * k, mi, ki).noalias() +=
            g * CMap(pb.values.data() + (*ib)[q] * k * n, ki, ni).transpose();
      }
      if (pb.requires_grad) {
        MMap(pb.grad_buffer().data() + (*ib)[q] * k * n, ki, ni).noalias() +=
            CMap(pa.values.data() + (*ia)[q] * m * k, mi, ki).transpose() * g;
      }
    }
  });
}

// ---------------------------------------------------------------- softmax / layernorm

Tensor softmax_lastdim(const Tensor& x) {
  require(x, "softmax_lastdim");
  std::size_t n = x.dim(-1);
  std::size_t rows = x.numel() / n;
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    double* o = out.data() + r * n;
    double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return finish(x.shape(), std::move(out), {&x}, [n, rows](Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.values.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) gp[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

LayerNormStats layernorm_stats(const Tensor& h, double eps) {
  require(h, "layernorm");
  std::size_t n = h.dim(-1);
  if (n < 2) throw DimensionError("layernorm: normalization axis needs extent >= 2, got " + shape_str(h.shape()));
  std::size_t rows = h.numel() / n;
  auto hv = h.values();
  std::vector<double> out(hv.size()), mu(rows), var(rows);
  auto inv = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = hv.data() + r * n;
    double m = 0.0;
    for (std::size_t j = 0; j < n; ++j) m += in[j];
    m /= static_cast<double>(n);
    double v = 0.0;
    for (std::size_t j = 0; j < n; ++j) v += (in[j] - m) * (in[j] - m);
    v /= static_cast<double>(n);
    double s = 1.0 / std::sqrt(v + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (in[j] - m) * s;
    mu[r] = m;
    var[r] = v;
    (*inv)[r] = s;
  }
  Shape stat_shape = h.shape();
  stat_shape.back() = 1;
  Tensor normalized = finish(h.shape(), std::move(out), {&h}, [n, rows, inv](Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    double nn = static_cast<double>(n);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.values.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double gm = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        gm += g[j];
        gy += g[j] * y[j];
      }
      gm /= nn;
      gy /= nn;
      double s = (*inv)[r];
      for (std::size_t j = 0; j < n; ++j) gp[r * n + j] += s * (g[j] - gm - y[j] * gy);
    }
  });
  return {normalized, Tensor::from(stat_shape, std::move(mu)), Tensor::from(stat_shape, std::move(var))};
}

Tensor layernorm(const Tensor& h, double eps) { return layernorm_stats(h, eps).normalized; }

}  // namespace blockflow
