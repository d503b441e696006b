#include "edetr/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace edetr {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;

std::shared_ptr<TensorNode> new_node(Shape shape, std::vector<double> data,
                                     bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

[[noreturn]] void shape_fail(const std::string& op, const Shape& a,
                             const Shape& b) {
  throw std::invalid_argument(op + ": shape mismatch " + shape_str(a) +
                              " vs " + shape_str(b));
}

void check_same_shape(const std::string& op, const Tensor& a,
                      const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

}  // namespace

int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::vector<double>& TensorNode::grad_buf() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// Builds a result node; drops the tape edge when grads are off or no parent
// participates.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<Tensor> parents,
                   std::function<void(TensorNode&)> backward_fn) {
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& p : parents)
      if (p.defined() && p.requires_grad()) track = true;
  }
  auto n = new_node(std::move(shape), std::move(data), track);
  if (track) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  int n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, 0.0),
                         requires_grad && g_grad_enabled));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  int n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, value),
                         requires_grad && g_grad_enabled));
}

Tensor Tensor::from(Shape shape, std::vector<double> data,
                    bool requires_grad) {
  if (shape_numel(shape) != static_cast<int>(data.size()))
    throw std::invalid_argument("Tensor::from: " + shape_str(shape) +
                                " does not hold " +
                                std::to_string(data.size()) + " values");
  return Tensor(new_node(std::move(shape), std::move(data),
                         requires_grad && g_grad_enabled));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::ndim() const { return static_cast<int>(node_->shape.size()); }
int Tensor::dim(int i) const { return node_->shape[i]; }
int Tensor::numel() const { return static_cast<int>(node_->data.size()); }
bool Tensor::requires_grad() const { return node_->requires_grad; }
const std::vector<double>& Tensor::data() const { return node_->data; }
std::vector<double>& Tensor::mutable_data() { return node_->data; }

double Tensor::value() const {
  if (numel() != 1)
    throw std::logic_error("Tensor::value: tensor " + shape_str(shape()) +
                           " is not scalar");
  return node_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != ndim())
    throw std::logic_error("Tensor::at: rank mismatch");
  int flat = 0, i = 0;
  for (int v : idx) flat = flat * node_->shape[i++] + v;
  return node_->data[flat];
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty())
    throw std::logic_error("Tensor::grad: no gradient populated");
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
  return Tensor(new_node(node_->shape, node_->data, false));
}

void Tensor::backward() const {
  if (numel() != 1)
    throw std::logic_error("backward: loss must be scalar, got " +
                           shape_str(shape()));
  if (!node_->requires_grad) return;

  // Topological order over the participating subgraph.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      TensorNode* p = n->parents[next++].node();
      if (p && p->requires_grad && seen.insert(p).second)
        stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  std::sort(order.begin(), order.end(),
            [](TensorNode* a, TensorNode* b) { return a->id > b->id; });

  // Interior grads are scratch for this sweep; only leaves accumulate
  // across repeated backward calls.
  for (TensorNode* n : order)
    if (n->backward_fn) n->grad.clear();

  node_->grad_buf()[0] += 1.0;
  for (TensorNode* n : order)
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
}

// ---------------------------------------------------------------------------
// elementwise

namespace {

template <class F, class DF>
Tensor unary_op(const char* name, const Tensor& a, F f, DF df) {
  (void)name;
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i]);
  return make_result(a.shape(), std::move(out), {a},
                     [a, df](TensorNode& self) {
                       auto& g = a.node()->grad_buf();
                       for (size_t i = 0; i < g.size(); ++i)
                         g[i] += self.grad[i] *
                                 df(a.data()[i], self.data[i]);
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (int i = 0; i < a.numel(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [a, b](TensorNode& self) {
                       if (a.requires_grad()) {
                         auto& g = a.node()->grad_buf();
                         for (size_t i = 0; i < g.size(); ++i)
                           g[i] += self.grad[i];
                       }
                       if (b.requires_grad()) {
                         auto& g = b.node()->grad_buf();
                         for (size_t i = 0; i < g.size(); ++i)
                           g[i] += self.grad[i];
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (int i = 0; i < a.numel(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [a, b](TensorNode& self) {
                       if (a.requires_grad()) {
                         auto& g = a.node()->grad_buf();
                         for (size_t i = 0; i < g.size(); ++i)
                           g[i] += self.grad[i];
                       }
                       if (b.requires_grad()) {
                         auto& g = b.node()->grad_buf();
                         for (size_t i = 0; i < g.size(); ++i)
                           g[i] -= self.grad[i];
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (int i = 0; i < a.numel(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [a, b](TensorNode& self) {
                       if (a.requires_grad()) {
                         auto& g = a.node()->grad_buf();
                         for (size_t i = 0; i < g.size(); ++i)
                           g[i] += self.grad[i] * b.data()[i];
                       }
                       if (b.requires_grad()) {
                         auto& g = b.node()->grad_buf();
                         for (size_t i = 0; i < g.size(); ++i)
                           g[i] += self.grad[i] * a.data()[i];
                       }
                     });
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape("div", a, b);
  std::vector<double> out(a.numel());
  for (int i = 0; i < a.numel(); ++i) out[i] = a.data()[i] / b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [a, b](TensorNode& self) {
                       if (a.requires_grad()) {
                         auto& g = a.node()->grad_buf();
                         for (size_t i = 0; i < g.size(); ++i)
                           g[i] += self.grad[i] / b.data()[i];
                       }
                       if (b.requires_grad()) {
                         auto& g = b.node()->grad_buf();
                         for (size_t i = 0; i < g.size(); ++i)
                           g[i] -= self.grad[i] * self.data[i] / b.data()[i];
                       }
                     });
}

Tensor neg(const Tensor& a) {
  return unary_op("neg", a, [](double x) { return -x; },
                  [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op("add_scalar", a, [s](double x) { return x + s; },
                  [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op("mul_scalar", a, [s](double x) { return x * s; },
                  [s](double, double) { return s; });
}

Tensor exp(const Tensor& a) {
  return unary_op("exp", a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op("log", a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op("sqrt", a, [](double x) { return std::sqrt(x); },
                  [](double, double y) { return 0.5 / y; });
}

Tensor relu(const Tensor& a) {
  return unary_op("relu", a, [](double x) { return x > 0 ? x : 0.0; },
                  [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op("sigmoid", a,
                  [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                  [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& a) {
  // log(sigmoid(x)) = -log1p(exp(-x)), stable for both signs
  return unary_op(
      "log_sigmoid", a,
      [](double x) {
        return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
      },
      [](double x, double) { return 1.0 / (1.0 + std::exp(x)); });
}

Tensor abs(const Tensor& a) {
  return unary_op("abs", a, [](double x) { return std::abs(x); },
                  [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor pow_scalar(const Tensor& a, double p) {
  return unary_op("pow_scalar", a, [p](double x) { return std::pow(x, p); },
                  [p](double x, double y) {
                    return x == 0.0 ? 0.0 : p * y / x;
                  });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  check_same_shape("maximum", a, b);
  std::vector<double> out(a.numel());
  for (int i = 0; i < a.numel(); ++i)
    out[i] = std::max(a.data()[i], b.data()[i]);
  return make_result(a.shape(), std::move(out), {a, b},
                     [a, b](TensorNode& self) {
                       for (size_t i = 0; i < self.data.size(); ++i) {
                         bool take_a = a.data()[i] >= b.data()[i];
                         Tensor t = take_a ? a : b;
                         if (t.requires_grad())
                           t.node()->grad_buf()[i] += self.grad[i];
                       }
                     });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  check_same_shape("minimum", a, b);
  std::vector<double> out(a.numel());
  for (int i = 0; i < a.numel(); ++i)
    out[i] = std::min(a.data()[i], b.data()[i]);
  return make_result(a.shape(), std::move(out), {a, b},
                     [a, b](TensorNode& self) {
                       for (size_t i = 0; i < self.data.size(); ++i) {
                         bool take_a = a.data()[i] <= b.data()[i];
                         Tensor t = take_a ? a : b;
                         if (t.requires_grad())
                           t.node()->grad_buf()[i] += self.grad[i];
                       }
                     });
}

// ---------------------------------------------------------------------------
// linear algebra / shape

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    shape_fail("matmul", a.shape(), b.shape());
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      double av = ad[i * k + p];
      if (av == 0.0) continue;
      for (int j = 0; j < n; ++j) out[i * n + j] += av * bd[p * n + j];
    }
  return make_result(
      {m, n}, std::move(out), {a, b}, [a, b, m, k, n](TensorNode& self) {
        const auto& g = self.grad;
        if (a.requires_grad()) {
          auto& ga = a.node()->grad_buf();
          const auto& bd = b.data();
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              double acc = 0.0;
              for (int j = 0; j < n; ++j) acc += g[i * n + j] * bd[p * n + j];
              ga[i * k + p] += acc;
            }
        }
        if (b.requires_grad()) {
          auto& gb = b.node()->grad_buf();
          const auto& ad = a.data();
          for (int p = 0; p < k; ++p)
            for (int i = 0; i < m; ++i) {
              double av = ad[i * k + p];
              if (av == 0.0) continue;
              for (int j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
            }
        }
      });
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw std::invalid_argument("transpose: need 2-d tensor");
  int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.numel());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return make_result({n, m}, std::move(out), {a}, [a, m, n](TensorNode& self) {
    auto& g = a.node()->grad_buf();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    shape_fail("reshape", a.shape(), shape);
  std::vector<double> out = a.data();
  return make_result(std::move(shape), std::move(out), {a},
                     [a](TensorNode& self) {
                       auto& g = a.node()->grad_buf();
                       for (size_t i = 0; i < g.size(); ++i)
                         g[i] += self.grad[i];
                     });
}

Tensor slice_rows(const Tensor& a, int start, int len) {
  if (a.ndim() != 2 || start < 0 || start + len > a.dim(0))
    throw std::invalid_argument("slice_rows: bad range [" +
                                std::to_string(start) + "," +
                                std::to_string(start + len) + ") of " +
                                shape_str(a.shape()));
  int d = a.dim(1);
  std::vector<double> out(a.data().begin() + start * d,
                          a.data().begin() + (start + len) * d);
  return make_result({len, d}, std::move(out), {a},
                     [a, start, d](TensorNode& self) {
                       auto& g = a.node()->grad_buf();
                       for (size_t i = 0; i < self.grad.size(); ++i)
                         g[start * d + i] += self.grad[i];
                     });
}

Tensor slice_cols(const Tensor& a, int start, int len) {
  if (a.ndim() != 2 || start < 0 || start + len > a.dim(1))
    throw std::invalid_argument("slice_cols: bad range of " +
                                shape_str(a.shape()));
  int n = a.dim(0), d = a.dim(1);
  std::vector<double> out(static_cast<size_t>(n) * len);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < len; ++j) out[i * len + j] = a.data()[i * d + start + j];
  return make_result({n, len}, std::move(out), {a},
                     [a, start, n, d, len](TensorNode& self) {
                       auto& g = a.node()->grad_buf();
                       for (int i = 0; i < n; ++i)
                         for (int j = 0; j < len; ++j)
                           g[i * d + start + j] += self.grad[i * len + j];
                     });
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
  if (a.ndim() != 2) throw std::invalid_argument("gather_rows: need 2-d");
  int d = a.dim(1);
  std::vector<double> out(idx.size() * d);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.dim(0))
      throw std::invalid_argument("gather_rows: index " +
                                  std::to_string(idx[i]) + " out of " +
                                  shape_str(a.shape()));
    std::copy_n(a.data().begin() + idx[i] * d, d, out.begin() + i * d);
  }
  return make_result({static_cast<int>(idx.size()), d}, std::move(out), {a},
                     [a, idx, d](TensorNode& self) {
                       auto& g = a.node()->grad_buf();
                       for (size_t i = 0; i < idx.size(); ++i)
                         for (int j = 0; j < d; ++j)
                           g[idx[i] * d + j] += self.grad[i * d + j];
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  int d = parts[0].dim(1), rows = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(1) != d)
      shape_fail("concat_rows", parts[0].shape(), p.shape());
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(rows) * d);
  for (const auto& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result({rows, d}, std::move(out), parts,
                     [parts](TensorNode& self) {
                       size_t off = 0;
                       for (const auto& p : parts) {
                         if (p.requires_grad()) {
                           auto& g = p.node()->grad_buf();
                           for (size_t i = 0; i < g.size(); ++i)
                             g[i] += self.grad[off + i];
                         }
                         off += p.data().size();
                       }
                     });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  int n = parts[0].dim(0), d = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != n)
      shape_fail("concat_cols", parts[0].shape(), p.shape());
    d += p.dim(1);
  }
  std::vector<double> out(static_cast<size_t>(n) * d);
  int col = 0;
  for (const auto& p : parts) {
    int pd = p.dim(1);
    for (int i = 0; i < n; ++i)
      std::copy_n(p.data().begin() + i * pd, pd, out.begin() + i * d + col);
    col += pd;
  }
  return make_result({n, d}, std::move(out), parts,
                     [parts, n, d](TensorNode& self) {
                       int col = 0;
                       for (const auto& p : parts) {
                         int pd = p.dim(1);
                         if (p.requires_grad()) {
                           auto& g = p.node()->grad_buf();
                           for (int i = 0; i < n; ++i)
                             for (int j = 0; j < pd; ++j)
                               g[i * pd + j] += self.grad[i * d + col + j];
                         }
                         col += pd;
                       }
                     });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (a.ndim() != 2 || v.ndim() != 1 || a.dim(1) != v.dim(0))
    shape_fail("add_rowvec", a.shape(), v.shape());
  int n = a.dim(0), d = a.dim(1);
  std::vector<double> out(a.numel());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[i * d + j] = a.data()[i * d + j] + v.data()[j];
  return make_result({n, d}, std::move(out), {a, v},
                     [a, v, n, d](TensorNode& self) {
                       if (a.requires_grad()) {
                         auto& g = a.node()->grad_buf();
                         for (size_t i = 0; i < g.size(); ++i)
                           g[i] += self.grad[i];
                       }
                       if (v.requires_grad()) {
                         auto& g = v.node()->grad_buf();
                         for (int i = 0; i < n; ++i)
                           for (int j = 0; j < d; ++j)
                             g[j] += self.grad[i * d + j];
                       }
                     });
}

Tensor select(const Tensor& a, int flat_index) {
  if (flat_index < 0 || flat_index >= a.numel())
    throw std::invalid_argument("select: index out of range");
  return make_result({1}, {a.data()[flat_index]}, {a},
                     [a, flat_index](TensorNode& self) {
                       a.node()->grad_buf()[flat_index] += self.grad[0];
                     });
}

// ---------------------------------------------------------------------------
// reductions / softmax

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double x : a.data()) acc += x;
  return make_result({1}, {acc}, {a}, [a](TensorNode& self) {
    auto& g = a.node()->grad_buf();
    for (double& x : g) x += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / a.numel()); }

Tensor softmax(const Tensor& a, int axis) {
  if (axis < 0) axis += a.ndim();
  if (axis < 0 || axis >= a.ndim())
    throw std::invalid_argument("softmax: bad axis");
  int n = a.dim(axis);
  int inner = 1, outer = 1;
  for (int i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  std::vector<double> out(a.numel());
  const auto& d = a.data();
  for (int o = 0; o < outer; ++o)
    for (int in = 0; in < inner; ++in) {
      auto idx = [&](int j) { return (o * n + j) * inner + in; };
      double mx = d[idx(0)];
      for (int j = 1; j < n; ++j) mx = std::max(mx, d[idx(j)]);
      double z = 0.0;
      for (int j = 0; j < n; ++j) z += std::exp(d[idx(j)] - mx);
      for (int j = 0; j < n; ++j) out[idx(j)] = std::exp(d[idx(j)] - mx) / z;
    }
  return make_result(
      a.shape(), std::move(out), {a},
      [a, n, inner, outer](TensorNode& self) {
        auto& g = a.node()->grad_buf();
        for (int o = 0; o < outer; ++o)
          for (int in = 0; in < inner; ++in) {
            auto idx = [&](int j) { return (o * n + j) * inner + in; };
            double dot = 0.0;
            for (int j = 0; j < n; ++j)
              dot += self.grad[idx(j)] * self.data[idx(j)];
            for (int j = 0; j < n; ++j)
              g[idx(j)] += self.data[idx(j)] * (self.grad[idx(j)] - dot);
          }
      });
}

// ---------------------------------------------------------------------------
// normalization

namespace {

// Shared row-normalization: x viewed as [rows, width], affine per column
// position via gamma/beta of length width.
Tensor norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 int rows, int width, double eps, Shape out_shape) {
  std::vector<double> out(x.numel()), mu(rows), istd(rows);
  const auto& d = x.data();
  for (int r = 0; r < rows; ++r) {
    double m = 0.0;
    for (int j = 0; j < width; ++j) m += d[r * width + j];
    m /= width;
    double var = 0.0;
    for (int j = 0; j < width; ++j) {
      double c = d[r * width + j] - m;
      var += c * c;
    }
    var /= width;
    mu[r] = m;
    istd[r] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < width; ++j)
      out[r * width + j] =
          (d[r * width + j] - m) * istd[r] * gamma.data()[j] + beta.data()[j];
  }
  return make_result(
      std::move(out_shape), std::move(out), {x, gamma, beta},
      [x, gamma, beta, rows, width, mu, istd](TensorNode& self) {
        const auto& d = x.data();
        for (int r = 0; r < rows; ++r) {
          double gsum = 0.0, gxsum = 0.0;
          std::vector<double> gy(width);
          for (int j = 0; j < width; ++j) {
            double xh = (d[r * width + j] - mu[r]) * istd[r];
            gy[j] = self.grad[r * width + j] * gamma.data()[j];
            gsum += gy[j];
            gxsum += gy[j] * xh;
            if (gamma.requires_grad())
              gamma.node()->grad_buf()[j] += self.grad[r * width + j] * xh;
            if (beta.requires_grad())
              beta.node()->grad_buf()[j] += self.grad[r * width + j];
          }
          if (x.requires_grad()) {
            auto& gx = x.node()->grad_buf();
            for (int j = 0; j < width; ++j) {
              double xh = (d[r * width + j] - mu[r]) * istd[r];
              gx[r * width + j] +=
                  istd[r] * (gy[j] - gsum / width - xh * gxsum / width);
            }
          }
        }
      });
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.ndim() != 2 || gamma.numel() != x.dim(1) || beta.numel() != x.dim(1))
    shape_fail("layer_norm", x.shape(), gamma.shape());
  return norm_rows(x, gamma, beta, x.dim(0), x.dim(1), eps, x.shape());
}

Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    double eps) {
  if (x.ndim() != 3 || gamma.numel() != x.dim(0) || beta.numel() != x.dim(0))
    shape_fail("channel_norm", x.shape(), gamma.shape());
  int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  // per-channel stats over H*W, but affine is per channel (per row here),
  // so transpose the affine handling: normalize rows of [C, H*W] with
  // per-row gamma/beta. Reuse norm_rows by viewing gamma/beta per row.
  std::vector<double> out(x.numel()), mu(c), istd(c);
  const auto& d = x.data();
  for (int r = 0; r < c; ++r) {
    double m = 0.0;
    for (int j = 0; j < hw; ++j) m += d[r * hw + j];
    m /= hw;
    double var = 0.0;
    for (int j = 0; j < hw; ++j) {
      double cc = d[r * hw + j] - m;
      var += cc * cc;
    }
    var /= hw;
    mu[r] = m;
    istd[r] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < hw; ++j)
      out[r * hw + j] =
          (d[r * hw + j] - m) * istd[r] * gamma.data()[r] + beta.data()[r];
  }
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, c, hw, mu, istd](TensorNode& self) {
        const auto& d = x.data();
        for (int r = 0; r < c; ++r) {
          double gsum = 0.0, gxsum = 0.0;
          for (int j = 0; j < hw; ++j) {
            double xh = (d[r * hw + j] - mu[r]) * istd[r];
            double gy = self.grad[r * hw + j] * gamma.data()[r];
            gsum += gy;
            gxsum += gy * xh;
            if (gamma.requires_grad())
              gamma.node()->grad_buf()[r] += self.grad[r * hw + j] * xh;
            if (beta.requires_grad())
              beta.node()->grad_buf()[r] += self.grad[r * hw + j];
          }
          if (x.requires_grad()) {
            auto& gx = x.node()->grad_buf();
            for (int j = 0; j < hw; ++j) {
              double xh = (d[r * hw + j] - mu[r]) * istd[r];
              double gy = self.grad[r * hw + j] * gamma.data()[r];
              gx[r * hw + j] +=
                  istd[r] * (gy - gsum / hw - xh * gxsum / hw);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// spatial

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int padding) {
  if (x.ndim() != 3 || w.ndim() != 4 || x.dim(0) != w.dim(1))
    shape_fail("conv2d", x.shape(), w.shape());
  int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int oh = (h + 2 * padding - kh) / stride + 1;
  int ow = (wd + 2 * padding - kw) / stride + 1;
  if (oh <= 0 || ow <= 0)
    throw std::invalid_argument("conv2d: non-positive output for input " +
                                shape_str(x.shape()) + " kernel " +
                                shape_str(w.shape()));
  if (b.defined() && b.numel() != cout)
    shape_fail("conv2d bias", b.shape(), {cout});
  std::vector<double> out(static_cast<size_t>(cout) * oh * ow, 0.0);
  const auto& xd = x.data();
  const auto& wdt = w.data();
  for (int oc = 0; oc < cout; ++oc)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = b.defined() ? b.data()[oc] : 0.0;
        for (int ic = 0; ic < cin; ++ic)
          for (int ky = 0; ky < kh; ++ky) {
            int iy = oy * stride + ky - padding;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ix = ox * stride + kx - padding;
              if (ix < 0 || ix >= wd) continue;
              acc += xd[(ic * h + iy) * wd + ix] *
                     wdt[((oc * cin + ic) * kh + ky) * kw + kx];
            }
          }
        out[(oc * oh + oy) * ow + ox] = acc;
      }
  std::vector<Tensor> parents = b.defined() ? std::vector<Tensor>{x, w, b}
                                            : std::vector<Tensor>{x, w};
  return make_result(
      {cout, oh, ow}, std::move(out), std::move(parents),
      [x, w, b, stride, padding, cin, h, wd, cout, kh, kw, oh,
       ow](TensorNode& self) {
        const auto& g = self.grad;
        const auto& xd = x.data();
        const auto& wdt = w.data();
        for (int oc = 0; oc < cout; ++oc)
          for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
              double go = g[(oc * oh + oy) * ow + ox];
              if (go == 0.0) continue;
              if (b.defined() && b.requires_grad())
                b.node()->grad_buf()[oc] += go;
              for (int ic = 0; ic < cin; ++ic)
                for (int ky = 0; ky < kh; ++ky) {
                  int iy = oy * stride + ky - padding;
                  if (iy < 0 || iy >= h) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    int ix = ox * stride + kx - padding;
                    if (ix < 0 || ix >= wd) continue;
                    int xi = (ic * h + iy) * wd + ix;
                    int wi = ((oc * cin + ic) * kh + ky) * kw + kx;
                    if (x.requires_grad())
                      x.node()->grad_buf()[xi] += go * wdt[wi];
                    if (w.requires_grad())
                      w.node()->grad_buf()[wi] += go * xd[xi];
                  }
                }
            }
      });
}

namespace {

// Bilinear kernel shared by the sampling ops. Normalized (0,0) is the
// center of pixel (0,0), (1,1) the center of pixel (H-1,W-1); outside
// values are zero.
struct BilinearTap {
  int x0, y0;
  double fx, fy;  // fractional parts
  double px, py;  // pixel-space coords
};

BilinearTap bilinear_tap(double nx, double ny, int h, int w) {
  BilinearTap t;
  t.px = nx * (w - 1);
  t.py = ny * (h - 1);
  t.x0 = static_cast<int>(std::floor(t.px));
  t.y0 = static_cast<int>(std::floor(t.py));
  t.fx = t.px - t.x0;
  t.fy = t.py - t.y0;
  return t;
}

inline double map_at(const std::vector<double>& d, int c, int y, int x, int h,
                     int w) {
  if (x < 0 || x >= w || y < 0 || y >= h) return 0.0;
  return d[(c * h + y) * w + x];
}

}  // namespace

Tensor grid_sample(const Tensor& map, const Tensor& pts) {
  if (map.ndim() != 3 || pts.ndim() != 2 || pts.dim(1) != 2)
    shape_fail("grid_sample", map.shape(), pts.shape());
  int c = map.dim(0), h = map.dim(1), w = map.dim(2), p = pts.dim(0);
  std::vector<double> out(static_cast<size_t>(p) * c);
  const auto& md = map.data();
  for (int i = 0; i < p; ++i) {
    BilinearTap t = bilinear_tap(pts.data()[2 * i], pts.data()[2 * i + 1], h, w);
    for (int ch = 0; ch < c; ++ch) {
      double v00 = map_at(md, ch, t.y0, t.x0, h, w);
      double v01 = map_at(md, ch, t.y0, t.x0 + 1, h, w);
      double v10 = map_at(md, ch, t.y0 + 1, t.x0, h, w);
      double v11 = map_at(md, ch, t.y0 + 1, t.x0 + 1, h, w);
      out[i * c + ch] = (1 - t.fy) * ((1 - t.fx) * v00 + t.fx * v01) +
                        t.fy * ((1 - t.fx) * v10 + t.fx * v11);
    }
  }
  return make_result(
      {p, c}, std::move(out), {map, pts},
      [map, pts, c, h, w, p](TensorNode& self) {
        const auto& md = map.data();
        for (int i = 0; i < p; ++i) {
          BilinearTap t =
              bilinear_tap(pts.data()[2 * i], pts.data()[2 * i + 1], h, w);
          double gx = 0.0, gy = 0.0;
          for (int ch = 0; ch < c; ++ch) {
            double go = self.grad[i * c + ch];
            if (go == 0.0 && !pts.requires_grad()) continue;
            double v00 = map_at(md, ch, t.y0, t.x0, h, w);
            double v01 = map_at(md, ch, t.y0, t.x0 + 1, h, w);
            double v10 = map_at(md, ch, t.y0 + 1, t.x0, h, w);
            double v11 = map_at(md, ch, t.y0 + 1, t.x0 + 1, h, w);
            if (map.requires_grad()) {
              auto& gm = map.node()->grad_buf();
              auto acc = [&](int y, int x, double wgt) {
                if (x >= 0 && x < w && y >= 0 && y < h)
                  gm[(ch * h + y) * w + x] += go * wgt;
              };
              acc(t.y0, t.x0, (1 - t.fy) * (1 - t.fx));
              acc(t.y0, t.x0 + 1, (1 - t.fy) * t.fx);
              acc(t.y0 + 1, t.x0, t.fy * (1 - t.fx));
              acc(t.y0 + 1, t.x0 + 1, t.fy * t.fx);
            }
            gx += go * ((1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
            gy += go * ((1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
          }
          if (pts.requires_grad()) {
            auto& gp = pts.node()->grad_buf();
            gp[2 * i] += gx * (w - 1);
            gp[2 * i + 1] += gy * (h - 1);
          }
        }
      });
}

Tensor bilinear_sample(const Tensor& map, const Tensor& xy) {
  if (xy.numel() != 2)
    throw std::invalid_argument("bilinear_sample: xy must have 2 elements");
  Tensor pts = reshape(xy, {1, 2});
  return reshape(grid_sample(map, pts), {map.dim(0)});
}

Tensor ms_deform_sample(const std::vector<Tensor>& levels, const Tensor& locs,
                        const Tensor& weights, int num_heads,
                        int points_per_level) {
  int num_levels = static_cast<int>(levels.size());
  if (num_levels == 0)
    throw std::invalid_argument("ms_deform_sample: no levels");
  int d = levels[0].dim(0);
  for (const auto& lv : levels)
    if (lv.ndim() != 3 || lv.dim(0) != d)
      shape_fail("ms_deform_sample levels", levels[0].shape(), lv.shape());
  if (d % num_heads != 0)
    throw std::invalid_argument("ms_deform_sample: channels not divisible by heads");
  int dh = d / num_heads;
  int mlk = num_heads * num_levels * points_per_level;
  if (locs.ndim() != 3 || locs.dim(1) != mlk || locs.dim(2) != 2)
    shape_fail("ms_deform_sample locs", locs.shape(), {locs.dim(0), mlk, 2});
  if (weights.ndim() != 2 || weights.dim(0) != locs.dim(0) ||
      weights.dim(1) != mlk)
    shape_fail("ms_deform_sample weights", weights.shape(),
               {locs.dim(0), mlk});
  int n = locs.dim(0);
  int lk = num_levels * points_per_level;
  std::vector<double> out(static_cast<size_t>(n) * d, 0.0);
  for (int q = 0; q < n; ++q)
    for (int m = 0; m < num_heads; ++m)
      for (int l = 0; l < num_levels; ++l) {
        int h = levels[l].dim(1), w = levels[l].dim(2);
        const auto& md = levels[l].data();
        for (int k = 0; k < points_per_level; ++k) {
          int s = (m * num_levels + l) * points_per_level + k;
          double wgt = weights.data()[q * mlk + s];
          BilinearTap t = bilinear_tap(locs.data()[(q * mlk + s) * 2],
                                       locs.data()[(q * mlk + s) * 2 + 1], h, w);
          for (int c = 0; c < dh; ++c) {
            int ch = m * dh + c;
            double v00 = map_at(md, ch, t.y0, t.x0, h, w);
            double v01 = map_at(md, ch, t.y0, t.x0 + 1, h, w);
            double v10 = map_at(md, ch, t.y0 + 1, t.x0, h, w);
            double v11 = map_at(md, ch, t.y0 + 1, t.x0 + 1, h, w);
            out[q * d + ch] +=
                wgt * ((1 - t.fy) * ((1 - t.fx) * v00 + t.fx * v01) +
                       t.fy * ((1 - t.fx) * v10 + t.fx * v11));
          }
        }
      }
  std::vector<Tensor> parents = levels;
  parents.push_back(locs);
  parents.push_back(weights);
  (void)lk;
  return make_result(
      {n, d}, std::move(out), std::move(parents),
      [levels, locs, weights, num_heads, points_per_level, num_levels, d, dh,
       mlk, n](TensorNode& self) {
        for (int q = 0; q < n; ++q)
          for (int m = 0; m < num_heads; ++m)
            for (int l = 0; l < num_levels; ++l) {
              int h = levels[l].dim(1), w = levels[l].dim(2);
              const auto& md = levels[l].data();
              for (int k = 0; k < points_per_level; ++k) {
                int s = (m * num_levels + l) * points_per_level + k;
                double wgt = weights.data()[q * mlk + s];
                BilinearTap t =
                    bilinear_tap(locs.data()[(q * mlk + s) * 2],
                                 locs.data()[(q * mlk + s) * 2 + 1], h, w);
                double gx = 0.0, gy = 0.0, gw = 0.0;
                for (int c = 0; c < dh; ++c) {
                  int ch = m * dh + c;
                  double go = self.grad[q * d + ch];
                  double v00 = map_at(md, ch, t.y0, t.x0, h, w);
                  double v01 = map_at(md, ch, t.y0, t.x0 + 1, h, w);
                  double v10 = map_at(md, ch, t.y0 + 1, t.x0, h, w);
                  double v11 = map_at(md, ch, t.y0 + 1, t.x0 + 1, h, w);
                  double sample =
                      (1 - t.fy) * ((1 - t.fx) * v00 + t.fx * v01) +
                      t.fy * ((1 - t.fx) * v10 + t.fx * v11);
                  gw += go * sample;
                  if (levels[l].requires_grad()) {
                    auto& gm = levels[l].node()->grad_buf();
                    auto acc = [&](int y, int x, double ww) {
                      if (x >= 0 && x < w && y >= 0 && y < h)
                        gm[(ch * h + y) * w + x] += go * wgt * ww;
                    };
                    acc(t.y0, t.x0, (1 - t.fy) * (1 - t.fx));
                    acc(t.y0, t.x0 + 1, (1 - t.fy) * t.fx);
                    acc(t.y0 + 1, t.x0, t.fy * (1 - t.fx));
                    acc(t.y0 + 1, t.x0 + 1, t.fy * t.fx);
                  }
                  gx += go * wgt *
                        ((1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                  gy += go * wgt *
                        ((1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                }
                if (locs.requires_grad()) {
                  auto& gl = locs.node()->grad_buf();
                  gl[(q * mlk + s) * 2] += gx * (w - 1);
                  gl[(q * mlk + s) * 2 + 1] += gy * (h - 1);
                }
                if (weights.requires_grad())
                  weights.node()->grad_buf()[q * mlk + s] += gw;
              }
            }
      });
}

Tensor rows_to_chw(const Tensor& rows, int h, int w) {
  if (rows.ndim() != 2 || rows.dim(0) != h * w)
    shape_fail("rows_to_chw", rows.shape(), {h * w, rows.dim(1)});
  int c = rows.dim(1);
  std::vector<double> out(rows.numel());
  for (int i = 0; i < h * w; ++i)
    for (int j = 0; j < c; ++j) out[j * h * w + i] = rows.data()[i * c + j];
  return make_result({c, h, w}, std::move(out), {rows},
                     [rows, h, w, c](TensorNode& self) {
                       auto& g = rows.node()->grad_buf();
                       for (int i = 0; i < h * w; ++i)
                         for (int j = 0; j < c; ++j)
                           g[i * c + j] += self.grad[j * h * w + i];
                     });
}

Tensor pad_to(const Tensor& x, int h, int w) {
  if (x.ndim() != 3 || x.dim(1) > h || x.dim(2) > w)
    shape_fail("pad_to", x.shape(), {x.dim(0), h, w});
  int c = x.dim(0), xh = x.dim(1), xw = x.dim(2);
  if (xh == h && xw == w) return reshape(x, x.shape());
  std::vector<double> out(static_cast<size_t>(c) * h * w, 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < xh; ++y)
      for (int xx = 0; xx < xw; ++xx)
        out[(ch * h + y) * w + xx] = x.data()[(ch * xh + y) * xw + xx];
  return make_result({c, h, w}, std::move(out), {x},
                     [x, c, h, w, xh, xw](TensorNode& self) {
                       auto& g = x.node()->grad_buf();
                       for (int ch = 0; ch < c; ++ch)
                         for (int y = 0; y < xh; ++y)
                           for (int xx = 0; xx < xw; ++xx)
                             g[(ch * xh + y) * xw + xx] +=
                                 self.grad[(ch * h + y) * w + xx];
                     });
}

}  // namespace edetr
