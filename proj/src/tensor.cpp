#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace flowcast {

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }

  void accumulate(const std::vector<double>& g) {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
};

}  // namespace detail

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw TensorError(msg);
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw TensorError(std::string("non-finite result in ") + op);
  }
}

NodePtr make_node(Shape shape, std::vector<double> values) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

bool suffix_of(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i) {
    if (small[i] != big[off + i]) return false;
  }
  return true;
}

Tensor finish(NodePtr out, std::vector<NodePtr> parents, std::function<void()> bw,
              const char* op) {
  check_finite(out->values, op);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  if (needs) {
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(bw);
  }
  return Tensor(std::move(out));
}

// rows/cols view of a 2-D (or 1-D, treated as a single row) tensor
void as_matrix(const TensorNode& n, int& rows, int& cols) {
  if (n.shape.size() == 2) {
    rows = n.shape[0];
    cols = n.shape[1];
  } else if (n.shape.size() == 1) {
    rows = 1;
    cols = n.shape[0];
  } else {
    throw TensorError("operation requires a 1-D or 2-D tensor, got " + shape_str(n.shape));
  }
}

template <class F, class DA, class DB>
Tensor binary_op(const Tensor& ta, const Tensor& tb, F f, DA dfda, DB dfdb, const char* name) {
  NodePtr a = ta.handle();
  NodePtr b = tb.handle();
  const bool b_small = b->numel() <= a->numel();
  const NodePtr& big = b_small ? a : b;
  const NodePtr& small = b_small ? b : a;
  check(small->numel() == 1 || suffix_of(small->shape, big->shape),
        std::string(name) + ": shapes " + shape_str(a->shape) + " and " + shape_str(b->shape) +
            " are not broadcast-compatible");
  const size_t bn = small->values.size();
  const size_t n = big->values.size();

  std::vector<double> out(n);
  if (b_small) {
    for (size_t i = 0; i < n; ++i) out[i] = f(a->values[i], b->values[i % bn]);
  } else {
    for (size_t i = 0; i < n; ++i) out[i] = f(a->values[i % bn], b->values[i]);
  }
  NodePtr o = make_node(big->shape, std::move(out));
  TensorNode* oraw = o.get();
  auto bw = [a, b, oraw, b_small, n, bn, dfda, dfdb]() {
    const std::vector<double>& g = oraw->grad;
    if (a->requires_grad) {
      auto& ga = a->grad;
      if (ga.empty()) ga.assign(a->values.size(), 0.0);
      for (size_t i = 0; i < n; ++i) {
        const size_t ia = b_small ? i : i % bn;
        const size_t ib = b_small ? i % bn : i;
        ga[ia] += g[i] * dfda(a->values[ia], b->values[ib]);
      }
    }
    if (b->requires_grad) {
      auto& gb = b->grad;
      if (gb.empty()) gb.assign(b->values.size(), 0.0);
      for (size_t i = 0; i < n; ++i) {
        const size_t ia = b_small ? i : i % bn;
        const size_t ib = b_small ? i % bn : i;
        gb[ib] += g[i] * dfdb(a->values[ia], b->values[ib]);
      }
    }
  };
  return finish(std::move(o), {a, b}, std::move(bw), name);
}

template <class F, class DF>
Tensor unary_op(const Tensor& ta, F f, DF dfdx, const char* name) {
  NodePtr a = ta.handle();
  const size_t n = a->values.size();
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = f(a->values[i]);
  NodePtr o = make_node(a->shape, std::move(out));
  TensorNode* oraw = o.get();
  auto bw = [a, oraw, n, dfdx]() {
    if (!a->requires_grad) return;
    auto& ga = a->grad;
    if (ga.empty()) ga.assign(n, 0.0);
    const std::vector<double>& g = oraw->grad;
    for (size_t i = 0; i < n; ++i) ga[i] += g[i] * dfdx(a->values[i], oraw->values[i]);
  };
  return finish(std::move(o), {a}, std::move(bw), name);
}

}  // namespace

const std::shared_ptr<detail::TensorNode>& Tensor::handle() const {
  if (!node_) throw TensorError("use of undefined tensor");
  return node_;
}

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

// ---- construction ----------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  for (int d : shape) check(d > 0, "tensor extents must be positive");
  return Tensor(make_node(shape, std::vector<double>(static_cast<size_t>(numel(shape)), value)));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> values) {
  for (int d : shape) check(d > 0, "tensor extents must be positive");
  check(numel(shape) == static_cast<std::int64_t>(values.size()),
        "shape " + shape_str(shape) + " does not match data length " + std::to_string(values.size()));
  check_finite(values, "from_data");
  return Tensor(make_node(shape, std::move(values)));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor randn(const Shape& shape, Rng& rng, double stddev) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from_data(shape, std::move(v));
}

// ---- accessors -------------------------------------------------------------

const Shape& Tensor::shape() const { return handle()->shape; }

std::int64_t Tensor::size() const { return handle()->numel(); }

const std::vector<double>& Tensor::values() const { return handle()->values; }

double Tensor::item() const {
  check(size() == 1, "item() requires a scalar tensor");
  return handle()->values[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool enable) {
  handle()->requires_grad = enable;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  check(!handle()->grad.empty(), "tensor has no gradient; run backward() first");
  return node_->grad;
}

void Tensor::zero_grad() { handle()->grad.clear(); }

std::vector<double>& Tensor::mutable_values() {
  check(handle()->parents.empty() && !node_->backward_fn,
        "in-place update is only allowed on leaf tensors");
  return node_->values;
}

// ---- binary ops ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; }, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; }, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; }, "mul");
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); }, "div");
}

// ---- scalar ops ------------------------------------------------------------

Tensor scale(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; }, "scale");
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; }, "add_scalar");
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// ---- elementwise unary -----------------------------------------------------

Tensor sin(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); },
      "sin");
}

Tensor cos(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); },
      "cos");
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; }, "exp");
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; }, "log");
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; }, "sqrt");
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; },
      "tanh");
}

Tensor sigmoid(const Tensor& a) {
  auto f = [](double x) {
    if (x >= 0.0) {
      const double z = std::exp(-x);
      return 1.0 / (1.0 + z);
    }
    const double z = std::exp(x);
    return z / (1.0 + z);
  };
  return unary_op(
      a, f, [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

Tensor softplus(const Tensor& a) {
  auto f = [](double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); };
  auto df = [](double x, double) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double z = std::exp(x);
    return z / (1.0 + z);
  };
  return unary_op(a, f, df, "softplus");
}

Tensor huber(const Tensor& a, double delta) {
  check(delta > 0.0, "huber delta must be positive");
  auto f = [delta](double r) {
    const double ar = std::abs(r);
    return ar <= delta ? 0.5 * r * r : delta * (ar - 0.5 * delta);
  };
  auto df = [delta](double r, double) {
    return std::abs(r) <= delta ? r : (r > 0.0 ? delta : -delta);
  };
  return unary_op(a, f, df, "huber");
}

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& ta, const Tensor& tb) {
  NodePtr a = ta.handle();
  NodePtr b = tb.handle();
  int m, k, k2, n;
  as_matrix(*a, m, k);
  as_matrix(*b, k2, n);
  check(k == k2, "matmul: inner dimensions mismatch " + shape_str(a->shape) + " x " +
                     shape_str(b->shape));

  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  const double* A = a->values.data();
  const double* B = b->values.data();
  for (int i = 0; i < m; ++i) {
    double* Oi = out.data() + static_cast<size_t>(i) * n;
    const double* Ai = A + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double aip = Ai[p];
      const double* Bp = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) Oi[j] += aip * Bp[j];
    }
  }
  Shape oshape = (a->shape.size() == 1 && b->shape.size() == 2) ? Shape{n} : Shape{m, n};
  NodePtr o = make_node(std::move(oshape), std::move(out));
  TensorNode* oraw = o.get();
  auto bw = [a, b, oraw, m, k, n]() {
    const std::vector<double>& g = oraw->grad;
    const double* A = a->values.data();
    const double* B = b->values.data();
    if (a->requires_grad) {
      auto& ga = a->grad;
      if (ga.empty()) ga.assign(a->values.size(), 0.0);
      // dA = G * B^T
      for (int i = 0; i < m; ++i) {
        const double* Gi = g.data() + static_cast<size_t>(i) * n;
        double* GAi = ga.data() + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
          const double* Bp = B + static_cast<size_t>(p) * n;
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += Gi[j] * Bp[j];
          GAi[p] += acc;
        }
      }
    }
    if (b->requires_grad) {
      auto& gb = b->grad;
      if (gb.empty()) gb.assign(b->values.size(), 0.0);
      // dB = A^T * G
      for (int i = 0; i < m; ++i) {
        const double* Gi = g.data() + static_cast<size_t>(i) * n;
        const double* Ai = A + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
          const double aip = Ai[p];
          double* GBp = gb.data() + static_cast<size_t>(p) * n;
          for (int j = 0; j < n; ++j) GBp[j] += aip * Gi[j];
        }
      }
    }
  };
  return finish(std::move(o), {a, b}, std::move(bw), "matmul");
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& ta) {
  NodePtr a = ta.handle();
  long double acc = 0.0L;
  for (double x : a->values) acc += x;
  NodePtr o = make_node({1}, {static_cast<double>(acc)});
  TensorNode* oraw = o.get();
  auto bw = [a, oraw]() {
    if (!a->requires_grad) return;
    auto& ga = a->grad;
    if (ga.empty()) ga.assign(a->values.size(), 0.0);
    const double g = oraw->grad[0];
    for (double& x : ga) x += g;
  };
  return finish(std::move(o), {a}, std::move(bw), "sum");
}

Tensor mean(const Tensor& ta) {
  NodePtr a = ta.handle();
  const double n = static_cast<double>(a->numel());
  long double acc = 0.0L;
  for (double x : a->values) acc += x;
  NodePtr o = make_node({1}, {static_cast<double>(acc / n)});
  TensorNode* oraw = o.get();
  auto bw = [a, oraw, n]() {
    if (!a->requires_grad) return;
    auto& ga = a->grad;
    if (ga.empty()) ga.assign(a->values.size(), 0.0);
    const double g = oraw->grad[0] / n;
    for (double& x : ga) x += g;
  };
  return finish(std::move(o), {a}, std::move(bw), "mean");
}

// ---- structure ops ---------------------------------------------------------

Tensor reshape(const Tensor& ta, const Shape& shape) {
  NodePtr a = ta.handle();
  check(numel(shape) == a->numel(),
        "reshape: " + shape_str(a->shape) + " -> " + shape_str(shape) + " changes element count");
  NodePtr o = make_node(shape, a->values);
  TensorNode* oraw = o.get();
  auto bw = [a, oraw]() {
    if (!a->requires_grad) return;
    a->accumulate(oraw->grad);
  };
  return finish(std::move(o), {a}, std::move(bw), "reshape");
}

Tensor concat_cols(const Tensor& ta, const Tensor& tb) {
  NodePtr a = ta.handle();
  NodePtr b = tb.handle();
  int ra, ca, rb, cb;
  as_matrix(*a, ra, ca);
  as_matrix(*b, rb, cb);
  check(ra == rb, "concat_cols: row mismatch");
  std::vector<double> out(static_cast<size_t>(ra) * (ca + cb));
  for (int i = 0; i < ra; ++i) {
    std::copy_n(a->values.data() + static_cast<size_t>(i) * ca, ca,
                out.data() + static_cast<size_t>(i) * (ca + cb));
    std::copy_n(b->values.data() + static_cast<size_t>(i) * cb, cb,
                out.data() + static_cast<size_t>(i) * (ca + cb) + ca);
  }
  NodePtr o = make_node({ra, ca + cb}, std::move(out));
  TensorNode* oraw = o.get();
  auto bw = [a, b, oraw, ra, ca, cb]() {
    const std::vector<double>& g = oraw->grad;
    if (a->requires_grad) {
      auto& ga = a->grad;
      if (ga.empty()) ga.assign(a->values.size(), 0.0);
      for (int i = 0; i < ra; ++i)
        for (int c = 0; c < ca; ++c)
          ga[static_cast<size_t>(i) * ca + c] += g[static_cast<size_t>(i) * (ca + cb) + c];
    }
    if (b->requires_grad) {
      auto& gb = b->grad;
      if (gb.empty()) gb.assign(b->values.size(), 0.0);
      for (int i = 0; i < ra; ++i)
        for (int c = 0; c < cb; ++c)
          gb[static_cast<size_t>(i) * cb + c] += g[static_cast<size_t>(i) * (ca + cb) + ca + c];
    }
  };
  return finish(std::move(o), {a, b}, std::move(bw), "concat_cols");
}

Tensor slice_cols(const Tensor& ta, int start, int len) {
  NodePtr a = ta.handle();
  int r, c;
  as_matrix(*a, r, c);
  check(start >= 0 && len > 0 && start + len <= c, "slice_cols: range out of bounds");
  std::vector<double> out(static_cast<size_t>(r) * len);
  for (int i = 0; i < r; ++i)
    std::copy_n(a->values.data() + static_cast<size_t>(i) * c + start, len,
                out.data() + static_cast<size_t>(i) * len);
  Shape oshape = a->shape.size() == 1 ? Shape{len} : Shape{r, len};
  NodePtr o = make_node(std::move(oshape), std::move(out));
  TensorNode* oraw = o.get();
  auto bw = [a, oraw, r, c, start, len]() {
    if (!a->requires_grad) return;
    auto& ga = a->grad;
    if (ga.empty()) ga.assign(a->values.size(), 0.0);
    const std::vector<double>& g = oraw->grad;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < len; ++j)
        ga[static_cast<size_t>(i) * c + start + j] += g[static_cast<size_t>(i) * len + j];
  };
  return finish(std::move(o), {a}, std::move(bw), "slice_cols");
}

Tensor gather_rows(const Tensor& ta, const std::vector<int>& index) {
  NodePtr a = ta.handle();
  int r, c;
  as_matrix(*a, r, c);
  check(!index.empty(), "gather_rows: empty index");
  for (int i : index) check(i >= 0 && i < r, "gather_rows: index out of range");
  const int e = static_cast<int>(index.size());
  std::vector<double> out(static_cast<size_t>(e) * c);
  for (int i = 0; i < e; ++i)
    std::copy_n(a->values.data() + static_cast<size_t>(index[i]) * c, c,
                out.data() + static_cast<size_t>(i) * c);
  NodePtr o = make_node({e, c}, std::move(out));
  TensorNode* oraw = o.get();
  auto bw = [a, oraw, index, c, e]() {
    if (!a->requires_grad) return;
    auto& ga = a->grad;
    if (ga.empty()) ga.assign(a->values.size(), 0.0);
    const std::vector<double>& g = oraw->grad;
    for (int i = 0; i < e; ++i) {
      double* row = ga.data() + static_cast<size_t>(index[i]) * c;
      const double* gi = g.data() + static_cast<size_t>(i) * c;
      for (int j = 0; j < c; ++j) row[j] += gi[j];
    }
  };
  return finish(std::move(o), {a}, std::move(bw), "gather_rows");
}

Tensor segment_sum(const Tensor& ta, const std::vector<int>& segment, int num_segments) {
  NodePtr a = ta.handle();
  int r, c;
  as_matrix(*a, r, c);
  check(static_cast<int>(segment.size()) == r, "segment_sum: segment id per row required");
  check(num_segments > 0, "segment_sum: num_segments must be positive");
  for (int s : segment) check(s >= 0 && s < num_segments, "segment_sum: segment id out of range");
  std::vector<double> out(static_cast<size_t>(num_segments) * c, 0.0);
  for (int i = 0; i < r; ++i) {
    double* dst = out.data() + static_cast<size_t>(segment[i]) * c;
    const double* src = a->values.data() + static_cast<size_t>(i) * c;
    for (int j = 0; j < c; ++j) dst[j] += src[j];
  }
  NodePtr o = make_node({num_segments, c}, std::move(out));
  TensorNode* oraw = o.get();
  auto bw = [a, oraw, segment, r, c]() {
    if (!a->requires_grad) return;
    auto& ga = a->grad;
    if (ga.empty()) ga.assign(a->values.size(), 0.0);
    const std::vector<double>& g = oraw->grad;
    for (int i = 0; i < r; ++i) {
      const double* gi = g.data() + static_cast<size_t>(segment[i]) * c;
      double* row = ga.data() + static_cast<size_t>(i) * c;
      for (int j = 0; j < c; ++j) row[j] += gi[j];
    }
  };
  return finish(std::move(o), {a}, std::move(bw), "segment_sum");
}

Tensor mul_rowscale(const Tensor& ta, const Tensor& tw) {
  NodePtr a = ta.handle();
  NodePtr w = tw.handle();
  int r, c;
  as_matrix(*a, r, c);
  check(w->numel() == r, "mul_rowscale: weight length must equal row count");
  std::vector<double> out(a->values.size());
  for (int i = 0; i < r; ++i) {
    const double wi = w->values[i];
    const double* src = a->values.data() + static_cast<size_t>(i) * c;
    double* dst = out.data() + static_cast<size_t>(i) * c;
    for (int j = 0; j < c; ++j) dst[j] = src[j] * wi;
  }
  NodePtr o = make_node(a->shape, std::move(out));
  TensorNode* oraw = o.get();
  auto bw = [a, w, oraw, r, c]() {
    const std::vector<double>& g = oraw->grad;
    if (a->requires_grad) {
      auto& ga = a->grad;
      if (ga.empty()) ga.assign(a->values.size(), 0.0);
      for (int i = 0; i < r; ++i) {
        const double wi = w->values[i];
        for (int j = 0; j < c; ++j)
          ga[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(i) * c + j] * wi;
      }
    }
    if (w->requires_grad) {
      auto& gw = w->grad;
      if (gw.empty()) gw.assign(w->values.size(), 0.0);
      for (int i = 0; i < r; ++i) {
        long double acc = 0.0L;
        for (int j = 0; j < c; ++j)
          acc += g[static_cast<size_t>(i) * c + j] * a->values[static_cast<size_t>(i) * c + j];
        gw[i] += static_cast<double>(acc);
      }
    }
  };
  return finish(std::move(o), {a, w}, std::move(bw), "mul_rowscale");
}

Tensor sum_col_blocks(const Tensor& ta, int blocks) {
  NodePtr a = ta.handle();
  int r, c;
  as_matrix(*a, r, c);
  check(blocks > 0 && c % blocks == 0, "sum_col_blocks: blocks must divide column count");
  const int bw_ = c / blocks;
  std::vector<double> out(static_cast<size_t>(r) * blocks, 0.0);
  for (int i = 0; i < r; ++i)
    for (int h = 0; h < blocks; ++h) {
      long double acc = 0.0L;
      const double* src = a->values.data() + static_cast<size_t>(i) * c + static_cast<size_t>(h) * bw_;
      for (int j = 0; j < bw_; ++j) acc += src[j];
      out[static_cast<size_t>(i) * blocks + h] = static_cast<double>(acc);
    }
  NodePtr o = make_node({r, blocks}, std::move(out));
  TensorNode* oraw = o.get();
  auto bw = [a, oraw, r, c, blocks, bw_]() {
    if (!a->requires_grad) return;
    auto& ga = a->grad;
    if (ga.empty()) ga.assign(a->values.size(), 0.0);
    const std::vector<double>& g = oraw->grad;
    for (int i = 0; i < r; ++i)
      for (int h = 0; h < blocks; ++h) {
        const double gh = g[static_cast<size_t>(i) * blocks + h];
        double* dst = ga.data() + static_cast<size_t>(i) * c + static_cast<size_t>(h) * bw_;
        for (int j = 0; j < bw_; ++j) dst[j] += gh;
      }
  };
  return finish(std::move(o), {a}, std::move(bw), "sum_col_blocks");
}

Tensor mul_col_blocks(const Tensor& ta, const Tensor& tw, int blocks) {
  NodePtr a = ta.handle();
  NodePtr w = tw.handle();
  int r, c, rw, cw;
  as_matrix(*a, r, c);
  as_matrix(*w, rw, cw);
  check(blocks > 0 && c % blocks == 0, "mul_col_blocks: blocks must divide column count");
  check(rw == r && cw == blocks, "mul_col_blocks: weight shape must be [rows, blocks]");
  const int bw_ = c / blocks;
  std::vector<double> out(a->values.size());
  for (int i = 0; i < r; ++i)
    for (int h = 0; h < blocks; ++h) {
      const double wv = w->values[static_cast<size_t>(i) * blocks + h];
      const size_t base = static_cast<size_t>(i) * c + static_cast<size_t>(h) * bw_;
      for (int j = 0; j < bw_; ++j) out[base + j] = a->values[base + j] * wv;
    }
  NodePtr o = make_node(a->shape, std::move(out));
  TensorNode* oraw = o.get();
  auto bw = [a, w, oraw, r, c, blocks, bw_]() {
    const std::vector<double>& g = oraw->grad;
    if (a->requires_grad) {
      auto& ga = a->grad;
      if (ga.empty()) ga.assign(a->values.size(), 0.0);
      for (int i = 0; i < r; ++i)
        for (int h = 0; h < blocks; ++h) {
          const double wv = w->values[static_cast<size_t>(i) * blocks + h];
          const size_t base = static_cast<size_t>(i) * c + static_cast<size_t>(h) * bw_;
          for (int j = 0; j < bw_; ++j) ga[base + j] += g[base + j] * wv;
        }
    }
    if (w->requires_grad) {
      auto& gw = w->grad;
      if (gw.empty()) gw.assign(w->values.size(), 0.0);
      for (int i = 0; i < r; ++i)
        for (int h = 0; h < blocks; ++h) {
          const size_t base = static_cast<size_t>(i) * c + static_cast<size_t>(h) * bw_;
          long double acc = 0.0L;
          for (int j = 0; j < bw_; ++j) acc += g[base + j] * a->values[base + j];
          gw[static_cast<size_t>(i) * blocks + h] += static_cast<double>(acc);
        }
    }
  };
  return finish(std::move(o), {a, w}, std::move(bw), "mul_col_blocks");
}

Tensor segment_softmax(const Tensor& ts, const std::vector<int>& segment, int num_segments) {
  NodePtr s = ts.handle();
  int r, c;
  as_matrix(*s, r, c);
  check(static_cast<int>(segment.size()) == r, "segment_softmax: segment id per row required");
  for (int id : segment)
    check(id >= 0 && id < num_segments, "segment_softmax: segment id out of range");

  // column-independent, numerically stabilized by per-segment max
  std::vector<double> seg_max(static_cast<size_t>(num_segments) * c,
                              -std::numeric_limits<double>::infinity());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) {
      double& m = seg_max[static_cast<size_t>(segment[i]) * c + j];
      m = std::max(m, s->values[static_cast<size_t>(i) * c + j]);
    }
  std::vector<double> out(s->values.size());
  std::vector<double> seg_norm(static_cast<size_t>(num_segments) * c, 0.0);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) {
      const double e =
          std::exp(s->values[static_cast<size_t>(i) * c + j] - seg_max[static_cast<size_t>(segment[i]) * c + j]);
      out[static_cast<size_t>(i) * c + j] = e;
      seg_norm[static_cast<size_t>(segment[i]) * c + j] += e;
    }
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<size_t>(i) * c + j] /= seg_norm[static_cast<size_t>(segment[i]) * c + j];

  NodePtr o = make_node(s->shape, std::move(out));
  TensorNode* oraw = o.get();
  auto bw = [s, oraw, segment, r, c, num_segments]() {
    if (!s->requires_grad) return;
    auto& gs = s->grad;
    if (gs.empty()) gs.assign(s->values.size(), 0.0);
    const std::vector<double>& g = oraw->grad;
    const std::vector<double>& y = oraw->values;
    // dot[seg, j] = sum over rows in segment of g*y
    std::vector<double> dot(static_cast<size_t>(num_segments) * c, 0.0);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        dot[static_cast<size_t>(segment[i]) * c + j] +=
            g[static_cast<size_t>(i) * c + j] * y[static_cast<size_t>(i) * c + j];
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        const size_t idx = static_cast<size_t>(i) * c + j;
        gs[idx] += y[idx] * (g[idx] - dot[static_cast<size_t>(segment[i]) * c + j]);
      }
  };
  return finish(std::move(o), {s}, std::move(bw), "segment_softmax");
}

Tensor layer_norm(const Tensor& ta, double eps) {
  NodePtr a = ta.handle();
  int r, c;
  as_matrix(*a, r, c);
  std::vector<double> out(a->values.size());
  std::vector<double> inv_std(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    const double* row = a->values.data() + static_cast<size_t>(i) * c;
    long double m = 0.0L;
    for (int j = 0; j < c; ++j) m += row[j];
    const double mu = static_cast<double>(m / c);
    long double v = 0.0L;
    for (int j = 0; j < c; ++j) v += (row[j] - mu) * (row[j] - mu);
    const double s = 1.0 / std::sqrt(static_cast<double>(v / c) + eps);
    inv_std[static_cast<size_t>(i)] = s;
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] = (row[j] - mu) * s;
  }
  NodePtr o = make_node(a->shape, std::move(out));
  TensorNode* oraw = o.get();
  auto bw = [a, oraw, r, c, inv_std]() {
    if (!a->requires_grad) return;
    auto& ga = a->grad;
    if (ga.empty()) ga.assign(a->values.size(), 0.0);
    const std::vector<double>& g = oraw->grad;
    const std::vector<double>& y = oraw->values;
    for (int i = 0; i < r; ++i) {
      const size_t base = static_cast<size_t>(i) * c;
      long double gm = 0.0L, gy = 0.0L;
      for (int j = 0; j < c; ++j) {
        gm += g[base + j];
        gy += g[base + j] * y[base + j];
      }
      const double mean_g = static_cast<double>(gm / c);
      const double mean_gy = static_cast<double>(gy / c);
      const double s = inv_std[static_cast<size_t>(i)];
      for (int j = 0; j < c; ++j)
        ga[base + j] += s * (g[base + j] - mean_g - y[base + j] * mean_gy);
    }
  };
  return finish(std::move(o), {a}, std::move(bw), "layer_norm");
}

// ---- autodiff control ------------------------------------------------------

Tensor detach(const Tensor& ta) {
  NodePtr a = ta.handle();
  return Tensor(make_node(a->shape, a->values));
}

void backward(const Tensor& loss) {
  NodePtr root = loss.handle();
  check(root->numel() == 1, "backward requires a scalar loss");
  check(root->backward_fn != nullptr,
        "backward called without an active tape (loss is not an op output)");

  // reverse topological order by iterative DFS
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next].get();
      ++next;
      if (p->backward_fn && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    (*it)->backward_fn();
  }
  // clear the tape: op outputs become leaves, grads on leaves survive
  for (TensorNode* n : order) {
    n->parents.clear();
    n->backward_fn = nullptr;
  }
}

}  // namespace flowcast
